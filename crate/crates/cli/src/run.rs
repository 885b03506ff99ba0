//! Config loading, output files and exit-code mapping shared by subcommands.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use lsdfn::kv::KvMap;
use lsdfn::Error;

/// Name of the effective-config echo in the output directory.
pub const EFFECTIVE_CONFIG: &str = "effective_config.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    CheckFailed,
}

impl Outcome {
    pub fn from_passed(passed: bool) -> Self {
        if passed {
            Outcome::Success
        } else {
            Outcome::CheckFailed
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unknown keys, degenerate configs.
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(Error::Config(_) | Error::Checkpoint(_) | Error::CheckpointMismatch(_)) => 2,
            CliError::Core(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => f.write_str(msg),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub struct RunConfig {
    /// File values with `--seed` and `--set` applied on top.
    pub kv: KvMap,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, sets: &[String], seed: Option<u64>, out: PathBuf) -> CliResult<Self> {
        let mut kv = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                KvMap::parse(&text)?
            }
            None => KvMap::default(),
        };
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {s:?}")))?;
            kv.insert(k.trim(), v.trim());
        }
        if let Some(seed) = seed {
            kv.insert("seed", seed);
        }
        Ok(RunConfig { kv, out })
    }

    pub fn check_keys(&self, allowed: &[&str]) -> CliResult<()> {
        Ok(self.kv.reject_unknown(allowed)?)
    }

    /// Create the output directory and write the effective configuration.
    pub fn prepare_out(&self, effective: &KvMap) -> CliResult<()> {
        fs::create_dir_all(&self.out).map_err(|e| io_error(&self.out, e))?;
        self.write(EFFECTIVE_CONFIG, effective.to_text().as_bytes())
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.out.join(name);
        fs::write(&path, bytes).map_err(|e| io_error(&path, e))
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Usage(format!("cannot write {}: {e}", path.display()))
}

/// `# key=value` lines for CSV headers.
pub fn csv_comments(kv: &KvMap) -> String {
    kv.iter().map(|(k, v)| format!("# {k}={v}\n")).collect()
}

/// Comma-joined list for config echoes.
pub fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}
