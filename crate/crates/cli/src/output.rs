use std::fs;
use std::path::{Path, PathBuf};

use crate::CliError;

/// A command's output directory. Existing files are only replaced with
/// `--force`; the check happens before any work starts.
pub struct OutputDir {
    dir: PathBuf,
    force: bool,
}

impl OutputDir {
    pub fn prepare(dir: PathBuf, force: bool) -> Result<Self, CliError> {
        if dir.exists() && !force {
            let occupied = fs::read_dir(&dir)
                .map_err(|e| io_error(&dir, e))?
                .next()
                .is_some();
            if occupied {
                return Err(CliError::Usage(format!(
                    "{} already holds outputs; pass --force to replace them",
                    dir.display()
                )));
            }
        }
        fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
        Ok(Self { dir, force })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        write_file(&path, bytes.as_ref(), self.force)?;
        Ok(path)
    }
}

pub fn write_file(path: &Path, bytes: &[u8], force: bool) -> Result<(), CliError> {
    refuse_existing(path, force)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_error(path, e))
}

pub fn refuse_existing(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Usage(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}
