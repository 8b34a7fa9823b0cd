//! Option resolution: command-line flags, then `VOIDFACE_*` environment
//! variables (both handled by clap), then the TOML config file, then
//! built-in defaults.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::exit::{CliError, Exit};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Text,
    Json,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// TOML file with defaults for the options below.
    #[arg(long, env = "VOIDFACE_CONFIG", global = true)]
    pub config: Option<PathBuf>,
    /// Root for the vault, staging and institution directories.
    #[arg(long, env = "VOIDFACE_DATA_DIR", global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, env = "VOIDFACE_VAULT_DIR", global = true)]
    pub vault_dir: Option<PathBuf>,
    /// Staging area for private shares awaiting distribution.
    #[arg(long, env = "VOIDFACE_SHARE_DIR", global = true)]
    pub share_dir: Option<PathBuf>,
    /// Parent of the per-institution `inst-<k>` directories.
    #[arg(long, env = "VOIDFACE_INSTITUTIONS_DIR", global = true)]
    pub institutions_dir: Option<PathBuf>,
    /// Number of storage institutions.
    #[arg(long, env = "VOIDFACE_INSTITUTIONS", global = true)]
    pub institutions: Option<usize>,
    /// Edge length of extracted patches.
    #[arg(long, env = "VOIDFACE_PATCH_SIZE", global = true)]
    pub patch_size: Option<u16>,
    /// Seed for every random draw; omitted means operating-system entropy.
    #[arg(long, env = "VOIDFACE_SEED", global = true)]
    pub seed: Option<u64>,
    #[arg(long, env = "VOIDFACE_FORMAT", value_enum, global = true)]
    pub format: Option<Format>,
    /// Shorthand for `--format json`.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    data_dir: Option<PathBuf>,
    vault_dir: Option<PathBuf>,
    share_dir: Option<PathBuf>,
    institutions_dir: Option<PathBuf>,
    institutions: Option<usize>,
    patch_size: Option<u16>,
    seed: Option<u64>,
    format: Option<Format>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CliConfig {
    pub vault_dir: PathBuf,
    pub share_dir: PathBuf,
    pub institutions_dir: PathBuf,
    pub institutions: usize,
    pub patch_size: u16,
    pub seed: Option<u64>,
    pub format: Format,
}

pub const DEFAULT_DATA_DIR: &str = "voidface-data";

impl CliConfig {
    pub fn resolve(args: &GlobalArgs) -> Result<Self, CliError> {
        let file = match &args.config {
            Some(path) => read_file(path)?,
            None => FileConfig::default(),
        };
        let data_dir = args
            .data_dir
            .clone()
            .or(file.data_dir)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR));
        let format = if args.json {
            Some(Format::Json)
        } else {
            args.format
        };
        let cfg = CliConfig {
            vault_dir: args
                .vault_dir
                .clone()
                .or(file.vault_dir)
                .unwrap_or_else(|| data_dir.join("vault")),
            share_dir: args
                .share_dir
                .clone()
                .or(file.share_dir)
                .unwrap_or_else(|| data_dir.join("shares")),
            institutions_dir: args
                .institutions_dir
                .clone()
                .or(file.institutions_dir)
                .unwrap_or_else(|| data_dir.join("institutions")),
            institutions: args.institutions.or(file.institutions).unwrap_or(6),
            patch_size: args
                .patch_size
                .or(file.patch_size)
                .unwrap_or(voidface_core::patch::DEFAULT_PATCH_SIZE),
            seed: args.seed.or(file.seed),
            format: format.or(file.format).unwrap_or_default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.institutions == 0 {
            return Err(CliError::new(
                Exit::Config,
                "at least one institution is required",
            ));
        }
        if self.patch_size == 0 {
            return Err(CliError::new(Exit::Config, "patch size must be positive"));
        }
        for (name, dir) in [
            ("vault", &self.vault_dir),
            ("share", &self.share_dir),
            ("institutions", &self.institutions_dir),
        ] {
            if dir.exists() && !dir.is_dir() {
                return Err(CliError::new(
                    Exit::Config,
                    format!("{name} path {} is not a directory", dir.display()),
                ));
            }
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::new(Exit::Config, format!("config {}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| CliError::new(Exit::Config, format!("config {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beats_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("cfg.toml");
        std::fs::write(
            &file,
            "institutions = 4\npatch_size = 32\nseed = 9\nformat = \"json\"\n",
        )
        .unwrap();
        let args = GlobalArgs {
            config: Some(file),
            institutions: Some(3),
            ..Default::default()
        };
        let cfg = CliConfig::resolve(&args).unwrap();
        assert_eq!(cfg.institutions, 3);
        assert_eq!(cfg.patch_size, 32);
        assert_eq!(cfg.seed, Some(9));
        assert_eq!(cfg.format, Format::Json);
        assert_eq!(cfg.vault_dir, PathBuf::from(DEFAULT_DATA_DIR).join("vault"));
    }

    #[test]
    fn rejects_unknown_keys_and_zero_institutions() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("cfg.toml");
        std::fs::write(&file, "institutes = 4\n").unwrap();
        let err = CliConfig::resolve(&GlobalArgs {
            config: Some(file),
            ..Default::default()
        })
        .unwrap_err();
        assert_eq!(err.exit, Exit::Config);
        let err = CliConfig::resolve(&GlobalArgs {
            institutions: Some(0),
            ..Default::default()
        })
        .unwrap_err();
        assert_eq!(err.exit, Exit::Config);
    }
}
