//! Output writing that refuses to clobber existing files unless asked.

use std::path::Path;

use volseg_core::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct OutputPolicy {
    pub overwrite: bool,
}

impl OutputPolicy {
    /// Errors if `path` exists and overwriting was not requested.
    pub fn check(&self, path: &Path) -> Result<()> {
        if path.exists() && !self.overwrite {
            return Err(Error::config(
                "--overwrite",
                format!("{} exists; pass --overwrite to replace it", path.display()),
            ));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
        self.check(path)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn create_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
    }
}
