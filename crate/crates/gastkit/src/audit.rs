//! Record of every dataset file a command reads.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct FileAudit {
    reads: Mutex<Vec<PathBuf>>,
}

impl FileAudit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, path: &Path) {
        self.reads.lock().expect("audit lock").push(path.to_path_buf());
    }

    pub fn reads(&self) -> Vec<PathBuf> {
        self.reads.lock().expect("audit lock").clone()
    }

    /// Reads a whole file and logs the access.
    pub fn read(&self, path: &Path) -> Result<Vec<u8>> {
        self.record(path);
        std::fs::read(path).map_err(|e| Error::io(path, e))
    }

    pub fn read_to_string(&self, path: &Path) -> Result<String> {
        self.record(path);
        std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
    }

    /// Writes the sorted, de-duplicated access list as JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut reads = self.reads();
        reads.sort();
        reads.dedup();
        crate::io::write_json(path, &reads)
    }
}
