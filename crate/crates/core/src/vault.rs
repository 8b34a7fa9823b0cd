//! Trusted-party store of authentication shares.
//!
//! On-disk layout under the vault directory:
//!
//! ```text
//! log.jsonl          one JSON event per line, append-only
//! as/<subject>.share authentication share (share file format)
//! snapshot.json      records plus the number of log lines they cover
//! ```
//!
//! Registration persists the share file before the REGISTER event, and
//! revocation logs REVOKE before erasing the file, so a crash at any point
//! never leaves an active record without its bytes. Opening a vault replays
//! the log over the snapshot and removes share files that no active record
//! owns.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distribution::{InstitutionId, PlacementPlan};
use crate::share_file::{self, FormatError};
use crate::vss::{ShareGrid, ShareRole, SubjectId};

/// Default period of the abandoned-share collector, in simulated seconds.
pub const DEFAULT_GC_PERIOD_S: f64 = 3600.0;

pub type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

#[derive(Debug, Error)]
pub enum VaultError {
    #[error("subject {0} is already active")]
    Conflict(SubjectId),
    #[error("subject {0} not found")]
    NotFound(SubjectId),
    #[error("requester {0:?} is not known to the vault")]
    UnknownRequester(String),
    #[error("requester {0:?} is not authorized for any requested subject")]
    Unauthorized(String),
    #[error("no authorized subjects remain")]
    NoData { excluded: Vec<Exclusion> },
    #[error("expected an authentication share for {0}")]
    NotAuthentication(SubjectId),
    #[error("share subject {got} does not match {expected}")]
    SubjectMismatch { expected: SubjectId, got: SubjectId },
    #[error("corrupt vault log line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExclusionReason {
    /// The subject exercised the right to be forgotten.
    Rtbf,
    NotRegistered,
    NotAuthorized,
    /// Active record without readable share bytes.
    ShareMissing,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub subject_id: SubjectId,
    pub reason: ExclusionReason,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevocationEntry {
    pub created_at: DateTime<Utc>,
    pub revoked_at: DateTime<Utc>,
}

/// Vault metadata for one subject. Share bytes live apart from the record
/// so revoked records can be kept, listed and serialized safely.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: SubjectId,
    pub active: bool,
    pub created_at: DateTime<Utc>,
    pub revoked_at: Option<DateTime<Utc>>,
    pub allow_list: BTreeSet<String>,
    pub placement: Option<PlacementPlan>,
    /// Earlier registrations of the same id that were revoked.
    pub history: Vec<RevocationEntry>,
    /// Institutions still holding abandoned private shares.
    pub pending_gc: BTreeSet<InstitutionId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LogEvent {
    Register {
        at: DateTime<Utc>,
        subject_id: SubjectId,
    },
    Grant {
        at: DateTime<Utc>,
        subject_id: SubjectId,
        requester: String,
    },
    Place {
        at: DateTime<Utc>,
        subject_id: SubjectId,
        placement: PlacementPlan,
    },
    Revoke {
        at: DateTime<Utc>,
        subject_id: SubjectId,
    },
    GcPass {
        at: DateTime<Utc>,
        acknowledged: Vec<GcAck>,
        queued: Vec<GcTarget>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GcTarget {
    pub subject_id: SubjectId,
    pub institution: InstitutionId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcAck {
    pub subject_id: SubjectId,
    pub institution: InstitutionId,
    pub grids_deleted: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcReport {
    pub acknowledged: Vec<GcAck>,
    /// Deletions that could not be delivered; retried on the next pass.
    pub queued: Vec<GcTarget>,
}

impl GcReport {
    pub fn is_empty(&self) -> bool {
        self.acknowledged.is_empty() && self.queued.is_empty()
    }
}

#[derive(Debug, Error)]
#[error("institution {0} unreachable")]
pub struct Unreachable(pub InstitutionId);

/// Whatever can delete a subject's grids at an institution.
pub trait InstitutionDirectory {
    /// Deletes every grid of `subject` held at `institution` and returns how
    /// many were removed.
    fn delete_subject(
        &mut self,
        institution: InstitutionId,
        subject: SubjectId,
    ) -> Result<usize, Unreachable>;
}

/// Authentication share released to an authorized training round.
#[derive(Clone, Debug)]
pub struct AsHandle {
    pub subject_id: SubjectId,
    pub grid: ShareGrid,
    pub placement: Option<PlacementPlan>,
}

#[derive(Clone, Debug)]
pub struct ValidationOutcome {
    pub authorized: Vec<AsHandle>,
    pub excluded: Vec<Exclusion>,
}

impl ValidationOutcome {
    pub fn authorized_ids(&self) -> Vec<SubjectId> {
        self.authorized.iter().map(|h| h.subject_id).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevokeConfirmation {
    pub subject_id: SubjectId,
    pub revoked_at: DateTime<Utc>,
    pub already_revoked: bool,
    /// Institutions queued for abandoned-share collection.
    pub gc_targets: Vec<InstitutionId>,
}

/// Periodic trigger for the abandoned-share collector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GcSchedule {
    pub period_s: f64,
    last_run_s: Option<f64>,
}

impl Default for GcSchedule {
    fn default() -> Self {
        GcSchedule::new(DEFAULT_GC_PERIOD_S)
    }
}

impl GcSchedule {
    pub fn new(period_s: f64) -> Self {
        GcSchedule {
            period_s,
            last_run_s: None,
        }
    }

    pub fn due(&self, now_s: f64) -> bool {
        self.last_run_s
            .is_none_or(|last| now_s - last >= self.period_s)
    }

    pub fn mark_run(&mut self, now_s: f64) {
        self.last_run_s = Some(now_s);
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    log_lines: usize,
    records: Vec<SubjectRecord>,
}

pub struct Vault {
    dir: Option<PathBuf>,
    records: BTreeMap<SubjectId, SubjectRecord>,
    shares: BTreeMap<SubjectId, ShareGrid>,
    log_lines: usize,
    clock: Clock,
}

impl std::fmt::Debug for Vault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Vault")
            .field("dir", &self.dir)
            .field("records", &self.records.len())
            .field("log_lines", &self.log_lines)
            .finish()
    }
}

impl Vault {
    /// Volatile vault, used by the simulator.
    pub fn in_memory() -> Self {
        Vault {
            dir: None,
            records: BTreeMap::new(),
            shares: BTreeMap::new(),
            log_lines: 0,
            clock: Arc::new(Utc::now),
        }
    }

    /// Opens or creates a durable vault and recovers its state.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, VaultError> {
        let dir = dir.into();
        fs::create_dir_all(dir.join("as"))?;
        let mut vault = Vault {
            dir: Some(dir.clone()),
            ..Vault::in_memory()
        };

        let snapshot_path = dir.join("snapshot.json");
        let mut skip = 0;
        if snapshot_path.exists() {
            let snap: Snapshot = serde_json::from_slice(&fs::read(&snapshot_path)?)?;
            skip = snap.log_lines;
            vault.records = snap
                .records
                .into_iter()
                .map(|r| (r.subject_id, r))
                .collect();
        }
        let log_path = dir.join("log.jsonl");
        if log_path.exists() {
            for (i, line) in BufReader::new(File::open(&log_path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                vault.log_lines = i + 1;
                if i < skip {
                    continue;
                }
                let event: LogEvent =
                    serde_json::from_str(&line).map_err(|e| VaultError::CorruptLog {
                        line: i + 1,
                        reason: e.to_string(),
                    })?;
                vault.apply(&event);
            }
        }
        vault.recover_share_files()?;
        Ok(vault)
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn now(&self) -> DateTime<Utc> {
        (self.clock)()
    }

    fn share_path(&self, subject: SubjectId) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join("as").join(format!("{subject}.share")))
    }

    fn recover_share_files(&mut self) -> Result<(), VaultError> {
        let Some(dir) = self.dir.clone() else {
            return Ok(());
        };
        for entry in fs::read_dir(dir.join("as"))? {
            let path = entry?.path();
            let owner = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_suffix(".share"))
                .and_then(|id| id.parse::<SubjectId>().ok());
            let keep = owner.is_some_and(|id| self.records.get(&id).is_some_and(|r| r.active));
            if !keep {
                log::warn!("removing unowned share file {}", path.display());
                erase_file(&path)?;
            }
        }
        let active: Vec<SubjectId> = self
            .records
            .values()
            .filter(|r| r.active)
            .map(|r| r.subject_id)
            .collect();
        for id in active {
            let path = self.share_path(id).expect("durable vault");
            match share_file::read_file(&path) {
                Ok(grid) => {
                    self.shares.insert(id, grid);
                }
                Err(e) => log::error!("active subject {id} has no readable share: {e}"),
            }
        }
        Ok(())
    }

    fn append(&mut self, event: LogEvent) -> Result<(), VaultError> {
        if let Some(dir) = &self.dir {
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("log.jsonl"))?;
            let mut line = serde_json::to_string(&event)?;
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.sync_data()?;
        }
        self.log_lines += 1;
        self.apply(&event);
        Ok(())
    }

    fn apply(&mut self, event: &LogEvent) {
        match event {
            LogEvent::Register { at, subject_id } => {
                let record = self
                    .records
                    .entry(*subject_id)
                    .or_insert_with(|| SubjectRecord {
                        subject_id: *subject_id,
                        active: false,
                        created_at: *at,
                        revoked_at: None,
                        allow_list: BTreeSet::new(),
                        placement: None,
                        history: Vec::new(),
                        pending_gc: BTreeSet::new(),
                    });
                if let Some(revoked_at) = record.revoked_at.take() {
                    record.history.push(RevocationEntry {
                        created_at: record.created_at,
                        revoked_at,
                    });
                    record.allow_list.clear();
                }
                record.active = true;
                record.created_at = *at;
                record.placement = None;
            }
            LogEvent::Grant {
                subject_id,
                requester,
                ..
            } => {
                if let Some(r) = self.records.get_mut(subject_id) {
                    r.allow_list.insert(requester.clone());
                }
            }
            LogEvent::Place {
                subject_id,
                placement,
                ..
            } => {
                if let Some(r) = self.records.get_mut(subject_id) {
                    r.placement = Some(placement.clone());
                }
            }
            LogEvent::Revoke { at, subject_id } => {
                if let Some(r) = self.records.get_mut(subject_id) {
                    r.active = false;
                    r.revoked_at = Some(*at);
                    if let Some(p) = &r.placement {
                        r.pending_gc.extend(p.institutions());
                    }
                }
                self.shares.remove(subject_id);
            }
            LogEvent::GcPass { acknowledged, .. } => {
                for ack in acknowledged {
                    if let Some(r) = self.records.get_mut(&ack.subject_id) {
                        r.pending_gc.remove(&ack.institution);
                    }
                }
            }
        }
    }

    /// Writes a snapshot covering the whole log so far.
    pub fn checkpoint(&self) -> Result<(), VaultError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let snap = Snapshot {
            log_lines: self.log_lines,
            records: self.records.values().cloned().collect(),
        };
        write_atomic(
            &dir.join("snapshot.json"),
            &serde_json::to_vec_pretty(&snap)?,
        )?;
        Ok(())
    }

    pub fn record(&self, subject: SubjectId) -> Option<&SubjectRecord> {
        self.records.get(&subject)
    }

    pub fn records(&self) -> impl Iterator<Item = &SubjectRecord> {
        self.records.values()
    }

    /// True when the vault holds share bytes for `subject`, in memory or on disk.
    pub fn holds_share(&self, subject: SubjectId) -> bool {
        self.shares.contains_key(&subject) || self.share_path(subject).is_some_and(|p| p.exists())
    }

    pub fn register_subject(
        &mut self,
        subject: SubjectId,
        grid: ShareGrid,
        placement: Option<PlacementPlan>,
    ) -> Result<SubjectRecord, VaultError> {
        if grid.role() != ShareRole::Authentication {
            return Err(VaultError::NotAuthentication(subject));
        }
        if grid.subject_id() != subject {
            return Err(VaultError::SubjectMismatch {
                expected: subject,
                got: grid.subject_id(),
            });
        }
        if self.records.get(&subject).is_some_and(|r| r.active) {
            return Err(VaultError::Conflict(subject));
        }
        if let Some(path) = self.share_path(subject) {
            write_atomic(&path, &share_file::encode(&grid))?;
        }
        self.shares.insert(subject, grid);
        let at = self.now();
        self.append(LogEvent::Register {
            at,
            subject_id: subject,
        })?;
        if let Some(placement) = placement {
            self.set_placement(subject, placement)?;
        }
        Ok(self.records[&subject].clone())
    }

    pub fn set_placement(
        &mut self,
        subject: SubjectId,
        placement: PlacementPlan,
    ) -> Result<(), VaultError> {
        if !self.records.contains_key(&subject) {
            return Err(VaultError::NotFound(subject));
        }
        let at = self.now();
        self.append(LogEvent::Place {
            at,
            subject_id: subject,
            placement,
        })
    }

    /// Adds `requester` to the subject's allow-list. Idempotent.
    pub fn grant_requester(
        &mut self,
        subject: SubjectId,
        requester: &str,
    ) -> Result<(), VaultError> {
        let record = self
            .records
            .get(&subject)
            .ok_or(VaultError::NotFound(subject))?;
        if record.allow_list.contains(requester) {
            return Ok(());
        }
        let at = self.now();
        self.append(LogEvent::Grant {
            at,
            subject_id: subject,
            requester: requester.to_string(),
        })
    }

    fn knows_requester(&self, requester: &str) -> bool {
        self.records
            .values()
            .any(|r| r.allow_list.contains(requester))
    }

    /// Releases authentication shares for the requested subjects that are
    /// active and allow `requester`; every other subject is listed with a
    /// reason.
    pub fn validate_training_request(
        &self,
        requester: &str,
        subjects: &[SubjectId],
    ) -> Result<ValidationOutcome, VaultError> {
        if !self.knows_requester(requester) {
            return Err(VaultError::UnknownRequester(requester.to_string()));
        }
        let mut authorized = Vec::new();
        let mut excluded = Vec::new();
        let mut seen = BTreeSet::new();
        for &subject_id in subjects {
            if !seen.insert(subject_id) {
                continue;
            }
            let reason = match self.records.get(&subject_id) {
                None => Some(ExclusionReason::NotRegistered),
                Some(r) if !r.active => Some(ExclusionReason::Rtbf),
                Some(r) if !r.allow_list.contains(requester) => {
                    Some(ExclusionReason::NotAuthorized)
                }
                Some(r) => match self.shares.get(&subject_id) {
                    Some(grid) => {
                        authorized.push(AsHandle {
                            subject_id,
                            grid: grid.clone(),
                            placement: r.placement.clone(),
                        });
                        None
                    }
                    None => Some(ExclusionReason::ShareMissing),
                },
            };
            if let Some(reason) = reason {
                excluded.push(Exclusion { subject_id, reason });
            }
        }
        if authorized.is_empty() {
            if !excluded.is_empty()
                && excluded
                    .iter()
                    .all(|e| e.reason == ExclusionReason::NotAuthorized)
            {
                return Err(VaultError::Unauthorized(requester.to_string()));
            }
            return Err(VaultError::NoData { excluded });
        }
        Ok(ValidationOutcome {
            authorized,
            excluded,
        })
    }

    /// Erases the subject's authentication share. Idempotent.
    pub fn rtbf_revoke(&mut self, subject: SubjectId) -> Result<RevokeConfirmation, VaultError> {
        let record = self
            .records
            .get(&subject)
            .ok_or(VaultError::NotFound(subject))?;
        if !record.active {
            return Ok(RevokeConfirmation {
                subject_id: subject,
                revoked_at: record.revoked_at.expect("revoked record has a timestamp"),
                already_revoked: true,
                gc_targets: record.pending_gc.iter().copied().collect(),
            });
        }
        let at = self.now();
        self.append(LogEvent::Revoke {
            at,
            subject_id: subject,
        })?;
        if let Some(path) = self.share_path(subject) {
            erase_file(&path)?;
        }
        let record = &self.records[&subject];
        Ok(RevokeConfirmation {
            subject_id: subject,
            revoked_at: at,
            already_revoked: false,
            gc_targets: record.pending_gc.iter().copied().collect(),
        })
    }

    /// Deletions still owed for revoked subjects. Subjects that were
    /// registered again are skipped, since their id now names live shares.
    pub fn gc_plan(&self) -> Vec<GcTarget> {
        self.records
            .values()
            .filter(|r| !r.active)
            .flat_map(|r| {
                r.pending_gc.iter().map(move |&institution| GcTarget {
                    subject_id: r.subject_id,
                    institution,
                })
            })
            .collect()
    }

    /// Logs the outcome of a collection pass performed elsewhere.
    pub fn record_gc_pass(
        &mut self,
        acknowledged: Vec<GcAck>,
        queued: Vec<GcTarget>,
    ) -> Result<GcReport, VaultError> {
        if acknowledged.is_empty() && queued.is_empty() {
            return Ok(GcReport::default());
        }
        let at = self.now();
        self.append(LogEvent::GcPass {
            at,
            acknowledged: acknowledged.clone(),
            queued: queued.clone(),
        })?;
        Ok(GcReport {
            acknowledged,
            queued,
        })
    }

    /// Orders every institution in each revoked subject's placement to drop
    /// that subject's grids. Unreachable institutions stay queued.
    pub fn gc_abandoned_shares(
        &mut self,
        directory: &mut impl InstitutionDirectory,
    ) -> Result<GcReport, VaultError> {
        let mut acknowledged = Vec::new();
        let mut queued = Vec::new();
        for target in self.gc_plan() {
            match directory.delete_subject(target.institution, target.subject_id) {
                Ok(grids_deleted) => acknowledged.push(GcAck {
                    subject_id: target.subject_id,
                    institution: target.institution,
                    grids_deleted,
                }),
                Err(e) => {
                    log::warn!("gc deferred for {}: {e}", target.subject_id);
                    queued.push(target);
                }
            }
        }
        self.record_gc_pass(acknowledged, queued)
    }

    pub fn log_events(&self) -> Result<Vec<LogEvent>, VaultError> {
        let Some(dir) = &self.dir else {
            return Ok(Vec::new());
        };
        let path = dir.join("log.jsonl");
        if !path.exists() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if !line.trim().is_empty() {
                out.push(
                    serde_json::from_str(&line).map_err(|e| VaultError::CorruptLog {
                        line: i + 1,
                        reason: e.to_string(),
                    })?,
                );
            }
        }
        Ok(out)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

/// Overwrites a file with zeros before unlinking it.
pub fn erase_file(path: &Path) -> io::Result<()> {
    match fs::metadata(path) {
        Ok(meta) => {
            let mut f = OpenOptions::new().write(true).open(path)?;
            f.write_all(&vec![0u8; meta.len() as usize])?;
            f.sync_all()?;
            drop(f);
            fs::remove_file(path)
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::plan_distribution;
    use crate::rng::seeded;
    use crate::vss::{share_patches, GridShape, PatchImage, PatchKind};

    fn fixture(n: u128) -> (SubjectId, ShareGrid, Vec<ShareGrid>) {
        let subject = SubjectId::from_u128(n);
        let shape = GridShape::new(4, 4, 3).unwrap();
        let patches: Vec<PatchImage> = PatchKind::ALL
            .into_iter()
            .map(|k| PatchImage::new(k, shape, vec![k.index(); 48]).unwrap())
            .collect();
        let (auth, ps) = share_patches(subject, &patches, &mut seeded(n as u64)).unwrap();
        (subject, auth, ps)
    }

    fn registered(vault: &mut Vault, n: u128, requester: &str) -> SubjectId {
        let (subject, auth, ps) = fixture(n);
        let plan = plan_distribution(&ps, 6, &mut seeded(1)).unwrap().plan;
        vault.register_subject(subject, auth, Some(plan)).unwrap();
        vault.grant_requester(subject, requester).unwrap();
        subject
    }

    struct Directory {
        held: BTreeMap<(InstitutionId, SubjectId), usize>,
        offline: BTreeSet<InstitutionId>,
    }

    impl InstitutionDirectory for Directory {
        fn delete_subject(
            &mut self,
            institution: InstitutionId,
            subject: SubjectId,
        ) -> Result<usize, Unreachable> {
            if self.offline.contains(&institution) {
                return Err(Unreachable(institution));
            }
            Ok(self.held.remove(&(institution, subject)).unwrap_or(0))
        }
    }

    #[test]
    fn register_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let subject = {
            let mut v = Vault::open(dir.path()).unwrap();
            registered(&mut v, 1, "lab")
        };
        let v = Vault::open(dir.path()).unwrap();
        assert!(v.record(subject).unwrap().active);
        assert!(v.holds_share(subject));
        let out = v.validate_training_request("lab", &[subject]).unwrap();
        assert_eq!(out.authorized_ids(), vec![subject]);
        assert_eq!(out.authorized[0].grid.role(), ShareRole::Authentication);
    }

    #[test]
    fn duplicate_registration_conflicts() {
        let mut v = Vault::in_memory();
        let (subject, auth, _) = fixture(2);
        v.register_subject(subject, auth.clone(), None).unwrap();
        assert!(matches!(
            v.register_subject(subject, auth, None),
            Err(VaultError::Conflict(_))
        ));
        let (_, ps_only, ps) = fixture(3);
        drop(ps_only);
        assert!(matches!(
            v.register_subject(SubjectId::from_u128(3), ps[0].clone(), None),
            Err(VaultError::NotAuthentication(_))
        ));
    }

    #[test]
    fn reregistration_keeps_history() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = Vault::open(dir.path()).unwrap();
        let subject = registered(&mut v, 4, "lab");
        v.rtbf_revoke(subject).unwrap();
        let (_, auth, _) = fixture(4);
        v.register_subject(subject, auth, None).unwrap();
        drop(v);
        let v = Vault::open(dir.path()).unwrap();
        let r = v.record(subject).unwrap();
        assert!(r.active);
        assert_eq!(r.history.len(), 1);
        assert!(r.allow_list.is_empty());
        let kinds: Vec<_> = v
            .log_events()
            .unwrap()
            .iter()
            .map(|e| {
                serde_json::to_value(e).unwrap()["event"]
                    .as_str()
                    .unwrap()
                    .to_string()
            })
            .collect();
        assert_eq!(kinds, ["REGISTER", "PLACE", "GRANT", "REVOKE", "REGISTER"]);
    }

    #[test]
    fn validation_reasons() {
        let mut v = Vault::in_memory();
        let a = registered(&mut v, 10, "lab");
        let b = registered(&mut v, 11, "lab");
        let c = registered(&mut v, 12, "other");
        let ghost = SubjectId::from_u128(99);

        let all = v.validate_training_request("lab", &[a, b]).unwrap();
        assert_eq!(all.authorized_ids(), vec![a, b]);
        assert!(all.excluded.is_empty());

        v.rtbf_revoke(b).unwrap();
        let out = v
            .validate_training_request("lab", &[a, b, c, ghost])
            .unwrap();
        assert_eq!(out.authorized_ids(), vec![a]);
        assert_eq!(
            out.excluded,
            vec![
                Exclusion {
                    subject_id: b,
                    reason: ExclusionReason::Rtbf
                },
                Exclusion {
                    subject_id: c,
                    reason: ExclusionReason::NotAuthorized
                },
                Exclusion {
                    subject_id: ghost,
                    reason: ExclusionReason::NotRegistered
                },
            ]
        );

        assert!(matches!(
            v.validate_training_request("lab", &[c]),
            Err(VaultError::Unauthorized(_))
        ));
        assert!(matches!(
            v.validate_training_request("nobody", &[a]),
            Err(VaultError::UnknownRequester(_))
        ));
        match v.validate_training_request("lab", &[b]) {
            Err(VaultError::NoData { excluded }) => {
                assert_eq!(excluded[0].reason, ExclusionReason::Rtbf)
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn revoke_erases_and_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = Vault::open(dir.path()).unwrap();
        let s = registered(&mut v, 20, "lab");
        let path = dir.path().join("as").join(format!("{s}.share"));
        assert!(path.exists());
        let first = v.rtbf_revoke(s).unwrap();
        assert!(!first.already_revoked);
        assert_eq!(first.gc_targets.len(), 6);
        assert!(!path.exists());
        assert!(!v.holds_share(s));
        let second = v.rtbf_revoke(s).unwrap();
        assert!(second.already_revoked);
        assert_eq!(second.revoked_at, first.revoked_at);
        assert!(matches!(
            v.rtbf_revoke(SubjectId::from_u128(77)),
            Err(VaultError::NotFound(_))
        ));
    }

    #[test]
    fn crash_recovery_never_validates_without_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (subject, auth, _) = fixture(30);
        // Crash after the share file but before the REGISTER event.
        fs::create_dir_all(dir.path().join("as")).unwrap();
        let orphan = dir.path().join("as").join(format!("{subject}.share"));
        share_file::write_file(&orphan, &auth).unwrap();
        let mut v = Vault::open(dir.path()).unwrap();
        assert!(v.record(subject).is_none());
        assert!(!orphan.exists());

        // Crash after REVOKE was logged but before the file was erased.
        v.register_subject(subject, auth.clone(), None).unwrap();
        v.grant_requester(subject, "lab").unwrap();
        v.rtbf_revoke(subject).unwrap();
        share_file::write_file(&orphan, &auth).unwrap();
        let v = Vault::open(dir.path()).unwrap();
        assert!(!orphan.exists());
        assert!(matches!(
            v.validate_training_request("lab", &[subject]),
            Err(VaultError::NoData { .. })
        ));
    }

    #[test]
    fn active_record_with_lost_bytes_is_excluded() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = Vault::open(dir.path()).unwrap();
        let s = registered(&mut v, 31, "lab");
        drop(v);
        fs::remove_file(dir.path().join("as").join(format!("{s}.share"))).unwrap();
        let v = Vault::open(dir.path()).unwrap();
        match v.validate_training_request("lab", &[s]) {
            Err(VaultError::NoData { excluded }) => {
                assert_eq!(excluded[0].reason, ExclusionReason::ShareMissing)
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn snapshot_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = Vault::open(dir.path()).unwrap();
        let a = registered(&mut v, 40, "lab");
        v.checkpoint().unwrap();
        let b = registered(&mut v, 41, "lab");
        v.rtbf_revoke(a).unwrap();
        drop(v);
        let v = Vault::open(dir.path()).unwrap();
        assert!(!v.record(a).unwrap().active);
        assert!(v.record(b).unwrap().active);
        assert_eq!(
            v.validate_training_request("lab", &[a, b])
                .unwrap()
                .authorized_ids(),
            vec![b]
        );
    }

    #[test]
    fn gc_passes() {
        let mut v = Vault::in_memory();
        let mut dir = Directory {
            held: BTreeMap::new(),
            offline: BTreeSet::new(),
        };
        assert!(v.gc_abandoned_shares(&mut dir).unwrap().is_empty());

        let s = registered(&mut v, 50, "lab");
        for i in 0..6 {
            dir.held.insert((i, s), 1);
        }
        v.rtbf_revoke(s).unwrap();
        dir.offline.insert(3);
        let first = v.gc_abandoned_shares(&mut dir).unwrap();
        assert_eq!(first.acknowledged.len(), 5);
        assert_eq!(
            first.queued,
            vec![GcTarget {
                subject_id: s,
                institution: 3
            }]
        );
        dir.offline.clear();
        let second = v.gc_abandoned_shares(&mut dir).unwrap();
        assert_eq!(second.acknowledged.len(), 1);
        assert!(second.queued.is_empty());
        assert!(dir.held.is_empty());
        assert!(v.gc_plan().is_empty());
    }

    #[test]
    fn schedule_period() {
        let mut s = GcSchedule::default();
        assert!(s.due(0.0));
        s.mark_run(0.0);
        assert!(!s.due(3599.0));
        assert!(s.due(3600.0));
    }
}
