//! Run directory layout, atomic writes, the writer lock and stage
//! snapshots.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions, TryLockError};
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::manifest::{RunManifest, Stage};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELSPACE_FILE: &str = "labelspace.json";
pub const TRAININGSET_FILE: &str = "trainingset.jsonl";
pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const STATE_FILE: &str = "state.json";
pub const REPORT_TSV: &str = "report.tsv";
pub const REPORT_TXT: &str = "report.txt";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const CASES_DIR: &str = "cases";
pub const WORLDS_DIR: &str = "worlds";
pub const STAGES_DIR: &str = "stages";
const LOCK_FILE: &str = ".lock";

/// Write through a temporary sibling and rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Stage outputs as named files; digested in name order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Snapshot {
    pub files: BTreeMap<String, Vec<u8>>,
}

impl Snapshot {
    pub fn insert(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.insert(name.to_string(), bytes);
    }

    pub fn get(&self, name: &str) -> Result<&[u8]> {
        self.files
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::CorruptManifest(format!("snapshot lacks {name}")))
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, bytes) in &self.files {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        }
        hex::encode(h.finalize())
    }
}

/// Paths under `runs/{id}`.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(store_root: &Path, run_id: &str) -> Self {
        RunDir {
            root: store_root.join("runs").join(run_id),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.path(MANIFEST_FILE)
    }

    pub fn exists(&self) -> bool {
        self.manifest_path().is_file()
    }

    pub fn cases_dir(&self) -> PathBuf {
        self.path(CASES_DIR)
    }

    pub fn snapshot_dir(index: u32, stage: Option<Stage>) -> String {
        match stage {
            Some(s) => format!("{STAGES_DIR}/{index:02}-{}", s.tag()),
            None => format!("{STAGES_DIR}/00-init"),
        }
    }

    pub fn read_manifest(&self) -> Result<RunManifest> {
        let path = self.manifest_path();
        let bytes = read_file(&path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::CorruptManifest(format!("{}: {e}", path.display())))
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(manifest)?;
        bytes.push(b'\n');
        write_atomic(&self.manifest_path(), &bytes)
    }

    /// Replace the snapshot directory `rel` with `snap`'s files.
    pub fn write_snapshot(&self, rel: &str, snap: &Snapshot) -> Result<()> {
        let dir = self.path(rel);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for (name, bytes) in &snap.files {
            write_atomic(&dir.join(name), bytes)?;
        }
        Ok(())
    }

    pub fn read_snapshot(&self, rel: &str) -> Result<Snapshot> {
        let dir = self.path(rel);
        let mut snap = Snapshot::default();
        let entries = fs::read_dir(&dir).map_err(|e| Error::CorruptManifest(format!("{}: {e}", dir.display())))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.starts_with('.') {
                continue;
            }
            snap.insert(&name, read_file(&entry.path())?);
        }
        Ok(snap)
    }

    /// Remove snapshot directories not named in `keep`.
    pub fn prune_snapshots(&self, keep: &[String]) -> Result<()> {
        let dir = self.path(STAGES_DIR);
        let Ok(entries) = fs::read_dir(&dir) else {
            return Ok(());
        };
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let rel = format!("{STAGES_DIR}/{}", entry.file_name().to_string_lossy());
            if !keep.contains(&rel) {
                let p = entry.path();
                fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        Ok(())
    }

    pub fn append_line(&self, name: &str, line: &str) -> Result<()> {
        let path = self.path(name);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }

    /// Take the advisory writer lock; released when the guard drops or the
    /// process exits.
    pub fn lock(&self) -> Result<RunLock> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let path = self.path(LOCK_FILE);
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        match file.try_lock() {
            Ok(()) => Ok(RunLock { _file: file }),
            Err(TryLockError::WouldBlock) => Err(Error::Locked(path)),
            Err(TryLockError::Error(e)) => Err(Error::io(&path, e)),
        }
    }
}

#[derive(Debug)]
pub struct RunLock {
    _file: File,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trip_and_digest() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path(), "r");
        let mut s = Snapshot::default();
        s.insert("a.json", b"{}".to_vec());
        s.insert("b.jsonl", b"1\n2\n".to_vec());
        run.write_snapshot("stages/01-feed", &s).unwrap();
        let back = run.read_snapshot("stages/01-feed").unwrap();
        assert_eq!(back, s);
        assert_eq!(back.digest(), s.digest());

        let mut changed = s.clone();
        changed.insert("b.jsonl", b"1\n3\n".to_vec());
        assert_ne!(changed.digest(), s.digest());
        // moving bytes between file boundaries changes the digest
        let mut shifted = Snapshot::default();
        shifted.insert("a.json", b"{}1".to_vec());
        shifted.insert("b.jsonl", b"\n2\n".to_vec());
        assert_ne!(shifted.digest(), s.digest());
    }

    #[test]
    fn second_writer_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path(), "r");
        let guard = run.lock().unwrap();
        assert!(matches!(run.lock(), Err(Error::Locked(_))));
        drop(guard);
        run.lock().unwrap();
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x/y.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path().join("x")).unwrap().count(), 1);
    }

    #[test]
    fn prune_keeps_named() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path(), "r");
        let mut s = Snapshot::default();
        s.insert("f", vec![1]);
        run.write_snapshot("stages/00-init", &s).unwrap();
        run.write_snapshot("stages/01-find-issue", &s).unwrap();
        run.prune_snapshots(&["stages/00-init".to_string()]).unwrap();
        assert!(run.path("stages/00-init").exists());
        assert!(!run.path("stages/01-find-issue").exists());
    }
}
