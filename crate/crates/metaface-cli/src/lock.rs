//! One command at a time per run directory.
//!
//! The lock is a `.lock` file created with `create_new`, which is atomic on
//! every platform we care about. Dropping the guard removes the file. A
//! crash can leave a stale lock behind; the error message says where it is
//! so the user can delete it after checking nothing is running.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use metaface_core::{Error, Result};

#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<RunLock> {
        std::fs::create_dir_all(run_dir)?;
        let path = run_dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut file) => {
                let _ = writeln!(file, "pid={}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::AlreadyExists,
                    format!(
                        "run dir {} is in use by another command; if nothing is \
                         running, remove {}",
                        run_dir.display(),
                        path.display()
                    ),
                )))
            }
            Err(e) => Err(Error::Io(e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_acquire_fails_until_released() {
        let dir = std::env::temp_dir().join(format!("metaface-lock-{}", std::process::id()));
        let lock = RunLock::acquire(&dir).unwrap();
        let err = RunLock::acquire(&dir).unwrap_err();
        assert!(err.to_string().contains("in use"));
        drop(lock);
        let again = RunLock::acquire(&dir).unwrap();
        drop(again);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
