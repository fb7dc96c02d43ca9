//! File-backed stand-in for secure storage and the replay-protected counter.
//!
//! Every write goes through `stage` (write `<name>.tmp` and fsync) and
//! `commit` (rename over `<name>` and fsync the directory). A crash between
//! the two leaves the previous file intact; stray temp files are discarded
//! on the next open.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

pub const HUK_FILE: &str = "huk.bin";
pub const SEED_SET_FILE: &str = "seed_set.bin";
pub const COUNTER_FILE: &str = "counter.bin";
pub const EPOCH_FILE: &str = "epoch.bin";
pub const PEERS_FILE: &str = "peers.bin";
pub const CERT_FILE: &str = "cert.bin";
pub const ROOT_CA_FILE: &str = "root_ca.bin";

const TMP_SUFFIX: &str = ".tmp";

#[derive(Debug, Clone)]
pub struct DeviceDir {
    root: PathBuf,
}

impl DeviceDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DeviceDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn tmp_path(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}{TMP_SUFFIX}"))
    }

    pub fn create(&self) -> io::Result<()> {
        fs::create_dir_all(&self.root)
    }

    pub fn read(&self, name: &str) -> io::Result<Option<Vec<u8>>> {
        match fs::read(self.path(name)) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).exists()
    }

    pub fn size(&self, name: &str) -> io::Result<u64> {
        Ok(fs::metadata(self.path(name))?.len())
    }

    pub fn stage(&self, name: &str, bytes: &[u8]) -> io::Result<()> {
        let mut f = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(self.tmp_path(name))?;
        f.write_all(bytes)?;
        f.sync_all()
    }

    pub fn commit(&self, name: &str) -> io::Result<()> {
        fs::rename(self.tmp_path(name), self.path(name))?;
        self.sync_dir()
    }

    pub fn write_atomic(&self, name: &str, bytes: &[u8]) -> io::Result<()> {
        self.stage(name, bytes)?;
        self.commit(name)
    }

    pub fn remove(&self, name: &str) -> io::Result<()> {
        match fs::remove_file(self.path(name)) {
            Ok(()) => self.sync_dir(),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(e),
        }
    }

    /// Drops any half-written temp files left by a crash.
    pub fn discard_staged(&self) -> io::Result<()> {
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            if entry.file_name().to_string_lossy().ends_with(TMP_SUFFIX) {
                fs::remove_file(entry.path())?;
            }
        }
        Ok(())
    }

    fn sync_dir(&self) -> io::Result<()> {
        // Directory fsync makes the rename durable on Linux; other platforms
        // may refuse to open a directory, which is not an error here.
        if let Ok(d) = File::open(&self.root) {
            let _ = d.sync_all();
        }
        Ok(())
    }
}

pub fn read_u32_be(bytes: &[u8]) -> Option<u32> {
    Some(u32::from_be_bytes(bytes.try_into().ok()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_without_commit_keeps_old_value() {
        let tmp = tempfile::tempdir().unwrap();
        let d = DeviceDir::new(tmp.path());
        d.write_atomic(COUNTER_FILE, &1u32.to_be_bytes()).unwrap();
        d.stage(COUNTER_FILE, &2u32.to_be_bytes()).unwrap();
        assert_eq!(read_u32_be(&d.read(COUNTER_FILE).unwrap().unwrap()), Some(1));
        d.discard_staged().unwrap();
        assert!(!tmp.path().join("counter.bin.tmp").exists());
        d.stage(COUNTER_FILE, &3u32.to_be_bytes()).unwrap();
        d.commit(COUNTER_FILE).unwrap();
        assert_eq!(read_u32_be(&d.read(COUNTER_FILE).unwrap().unwrap()), Some(3));
    }

    #[test]
    fn missing_file_reads_as_none() {
        let tmp = tempfile::tempdir().unwrap();
        let d = DeviceDir::new(tmp.path());
        assert!(d.read(SEED_SET_FILE).unwrap().is_none());
        d.remove(SEED_SET_FILE).unwrap();
    }
}
