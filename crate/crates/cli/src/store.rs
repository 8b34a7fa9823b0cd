//! On-disk layout.
//!
//! ```text
//! <share_dir>/<subject>/PS_<i>.share          staged private shares
//! <institutions_dir>/inst-<k>/<subject>/*.share
//! <institutions_dir>/inst-<k>/OFFLINE         marks institution k unreachable
//! <vault_dir>/...                             vault log, snapshot and AS files
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use voidface_core::distribution::InstitutionId;
use voidface_core::orchestrator::{FetchError, ShareSource};
use voidface_core::share_file;
use voidface_core::vault::{erase_file, InstitutionDirectory, Unreachable};
use voidface_core::{ShareGrid, ShareRole, SubjectId};

pub const OFFLINE_MARKER: &str = "OFFLINE";

/// File name of a grid inside a subject directory.
pub fn file_name(grid: &ShareGrid) -> String {
    match grid.role() {
        ShareRole::Authentication => "AS.share".into(),
        ShareRole::Private => format!("PS_{}.share", grid.patch_index() + 1),
        ShareRole::Subgrid => {
            format!(
                "PS_{}.{}of{}.share",
                grid.patch_index() + 1,
                grid.subgrid_index() + 1,
                grid.subgrid_total()
            )
        }
    }
}

pub fn institution_dir(root: &Path, k: InstitutionId) -> PathBuf {
    root.join(format!("inst-{k}"))
}

pub fn is_offline(root: &Path, k: InstitutionId) -> bool {
    institution_dir(root, k).join(OFFLINE_MARKER).exists()
}

/// Every `*.share` file below `dir`, sorted.
pub fn share_files(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "share") {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Erases every share file of a subject directory, then the directory.
pub fn erase_subject_dir(dir: &Path) -> io::Result<usize> {
    let files = share_files(dir)?;
    for f in &files {
        erase_file(f)?;
    }
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    Ok(files.len())
}

/// Institutions as directories on the local filesystem.
pub struct DirInstitutions {
    pub root: PathBuf,
}

impl ShareSource for DirInstitutions {
    fn fetch(
        &self,
        institution: InstitutionId,
        subject: SubjectId,
        patch_index: u8,
    ) -> Result<Vec<ShareGrid>, FetchError> {
        if is_offline(&self.root, institution) {
            return Err(FetchError(institution));
        }
        let dir = institution_dir(&self.root, institution).join(subject.to_string());
        let files = share_files(&dir).map_err(|_| FetchError(institution))?;
        let mut grids = Vec::new();
        for f in files {
            match share_file::read_file(&f) {
                Ok(g) if g.patch_index() == patch_index && g.subject_id() == subject => {
                    grids.push(g)
                }
                Ok(_) => {}
                Err(e) => log::warn!("skipping unreadable share {}: {e}", f.display()),
            }
        }
        Ok(grids)
    }
}

impl InstitutionDirectory for DirInstitutions {
    fn delete_subject(
        &mut self,
        institution: InstitutionId,
        subject: SubjectId,
    ) -> Result<usize, Unreachable> {
        if is_offline(&self.root, institution) {
            return Err(Unreachable(institution));
        }
        let dir = institution_dir(&self.root, institution).join(subject.to_string());
        erase_subject_dir(&dir).map_err(|e| {
            log::warn!("deleting {}: {e}", dir.display());
            Unreachable(institution)
        })
    }
}
