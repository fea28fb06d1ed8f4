use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;

pub const TRAIN_LOG_HEADER: &str =
    "step,l_cpl,l_gan_pr,l_gan_fr,l_l2,l_perc,total,d_loss_pr,d_loss_fr,seconds";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainLogRecord {
    pub step: u64,
    pub breakdown: LossBreakdown,
    pub seconds: f64,
    pub n_genuine: u64,
    pub n_impostor: u64,
}

impl TrainLogRecord {
    /// CSV row; floats use the shortest round-trip representation.
    pub fn csv_row(&self) -> String {
        let b = &self.breakdown;
        format!(
            "{},{},{},{},{},{},{},{},{},{:.3}",
            self.step,
            b.l_cpl,
            b.l_gan_profile,
            b.l_gan_frontal,
            b.l_l2,
            b.l_perceptual,
            b.total,
            b.d_loss_profile,
            b.d_loss_frontal,
            self.seconds
        )
    }
}

/// Append-only `train_log.csv`.
#[derive(Debug)]
pub struct TrainLog {
    path: PathBuf,
    file: File,
}

impl TrainLog {
    /// Opens for appending, writing the header when the file is new or empty.
    /// An existing file with a different header is refused.
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let existing = match File::open(path) {
            Ok(f) => BufReader::new(f).lines().next().transpose().map_err(|e| Error::io(path, e))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(Error::io(path, e)),
        };
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        match existing.as_deref() {
            None | Some("") => {
                writeln!(file, "{TRAIN_LOG_HEADER}").map_err(|e| Error::io(path, e))?
            }
            Some(TRAIN_LOG_HEADER) => {}
            Some(other) => {
                return Err(Error::ingestion(
                    path,
                    format!("unexpected log header `{other}`"),
                ))
            }
        }
        Ok(TrainLog {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, record: &TrainLogRecord) -> Result<()> {
        writeln!(self.file, "{}", record.csv_row()).map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}
