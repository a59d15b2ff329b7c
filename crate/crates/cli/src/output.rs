use std::fmt;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use mr2_core::Error;
use tempfile::NamedTempFile;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Core(Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Core(Error::Input(_)) => 1,
            Failure::Core(Error::Format(_) | Error::Io(_) | Error::State(_)) => 2,
            Failure::Core(Error::Numeric(_)) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

/// Files staged next to their destination and renamed into place together.
#[derive(Default)]
pub struct Staged {
    files: Vec<(NamedTempFile, PathBuf)>,
}

impl Staged {
    pub fn add(&mut self, path: &Path, bytes: &[u8]) -> CliResult {
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d,
            _ => Path::new("."),
        };
        let mut tmp = NamedTempFile::new_in(dir)?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        self.files.push((tmp, path.to_path_buf()));
        Ok(())
    }

    pub fn commit(self) -> CliResult {
        for (tmp, path) in self.files {
            tmp.persist(&path).map_err(|e| Failure::Core(Error::Io(e.error)))?;
        }
        Ok(())
    }
}

/// Writes to `path` atomically, or to stdout when no path is given.
pub fn emit(path: Option<&Path>, text: &str) -> CliResult {
    match path {
        Some(p) => {
            let mut s = Staged::default();
            s.add(p, text.as_bytes())?;
            s.commit()
        }
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}
