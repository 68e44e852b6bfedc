//! Output-directory plumbing: artifact paths, atomic writes, and the run
//! lock that keeps two invocations from interleaving writes.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use echoprobe_core::error::{Error, Result};

/// Held while a stage writes into an output directory. Creating the lock
/// fails if another process holds it; dropping removes it.
#[derive(Debug)]
pub struct OutLock {
    path: PathBuf,
}

/// Marker error for a held lock (mapped to exit code 4).
#[derive(Debug)]
pub struct LockHeld(pub PathBuf);

impl std::fmt::Display for LockHeld {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "output directory is locked by another run: {} (remove the file if that run is dead)",
            self.0.display()
        )
    }
}

impl std::error::Error for LockHeld {}

impl OutLock {
    pub fn acquire(out_dir: &Path) -> anyhow::Result<OutLock> {
        fs::create_dir_all(out_dir)?;
        let path = out_dir.join(".echoprobe.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(OutLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(anyhow::Error::new(LockHeld(path)))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Writes bytes atomically: temp file in the target directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .ok_or_else(|| Error::config(format!("no parent directory for {}", path.display())))?;
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        path.file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_else(|| "artifact".to_string()),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Serializes `value` as pretty JSON (with a trailing newline) atomically.
pub fn atomic_write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

/// Reads a JSON artifact; a missing file names the stage that produces it.
pub fn read_json<T: DeserializeOwned>(path: &Path, producer: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::missing(path.display().to_string(), producer)
        } else {
            Error::Io(e)
        }
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Artifact layout inside one output directory.
#[derive(Debug, Clone)]
pub struct Paths {
    pub out: PathBuf,
}

impl Paths {
    pub fn new(out: impl Into<PathBuf>) -> Paths {
        Paths { out: out.into() }
    }

    pub fn corpus(&self) -> PathBuf {
        self.out.join("corpus.jsonl")
    }
    pub fn train_corpus(&self) -> PathBuf {
        self.out.join("train_corpus.jsonl")
    }
    /// Stem for the model checkpoint (`.bin` / `.json` added by the model).
    pub fn model_stem(&self) -> PathBuf {
        self.out.join("model")
    }
    pub fn train_report(&self) -> PathBuf {
        self.out.join("train_report.json")
    }
    pub fn banks_dir(&self) -> PathBuf {
        self.out.join("banks")
    }
    pub fn outcomes(&self) -> PathBuf {
        self.out.join("outcomes.json")
    }
    pub fn probe_report(&self) -> PathBuf {
        self.out.join("probe_report.json")
    }
    pub fn cka_report(&self) -> PathBuf {
        self.out.join("cka_report.json")
    }
    pub fn attn_report(&self) -> PathBuf {
        self.out.join("attn_report.json")
    }
    pub fn patch_report(&self) -> PathBuf {
        self.out.join("patch_report.json")
    }
    pub fn mask_report(&self) -> PathBuf {
        self.out.join("mask_report.json")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.out.join("report")
    }
}
