use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Append-only CSV log whose first column is an iteration number.
pub(crate) struct CsvLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl CsvLog {
    pub(crate) fn create(path: &Path, header: &str) -> Result<Self> {
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{header}").map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    /// Reopens a log after a resume, dropping rows past `through_iter`.
    pub(crate) fn resume(path: &Path, header: &str, through_iter: usize) -> Result<Self> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(_) => return Self::create(path, header),
        };
        let mut kept = String::new();
        for (i, line) in text.lines().enumerate() {
            let keep = i == 0
                || line
                    .split(',')
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .is_some_and(|it| it <= through_iter);
            if keep {
                kept.push_str(line);
                kept.push('\n');
            }
        }
        fs::write(path, kept).map_err(|e| Error::io(path, e))?;
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub(crate) fn row(&mut self, cells: &[String]) -> Result<()> {
        writeln!(self.out, "{}", cells.join(",")).map_err(|e| Error::io(&self.path, e))
    }

    pub(crate) fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Shortest representation that parses back to the same f64.
pub(crate) fn num(v: f64) -> String {
    format!("{v:?}")
}
