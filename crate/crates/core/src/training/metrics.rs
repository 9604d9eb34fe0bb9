use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::config::KL_STEP_COLUMNS;
use crate::error::{Error, Result};

pub const HEADER: &str =
    "step,lr,loss_total,loss_diag,loss_sd,grad_norm,ema_applied,kl_n1,kl_n2,kl_n4,kl_n8,kl_n16";

/// One metrics row. KL entries line up with [`KL_STEP_COLUMNS`].
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_diag: f64,
    pub loss_sd: f64,
    pub grad_norm: f64,
    pub ema_applied: bool,
    pub kl: [Option<f64>; KL_STEP_COLUMNS.len()],
}

impl MetricsRow {
    /// CSV line without the trailing newline. Floats use the shortest
    /// representation that round-trips, so equal values give equal text.
    pub fn to_csv(&self) -> String {
        let mut fields = vec![
            self.step.to_string(),
            self.lr.to_string(),
            self.loss_total.to_string(),
            self.loss_diag.to_string(),
            self.loss_sd.to_string(),
            self.grad_norm.to_string(),
            u8::from(self.ema_applied).to_string(),
        ];
        fields.extend(
            self.kl
                .iter()
                .map(|k| k.map(|v| v.to_string()).unwrap_or_default()),
        );
        fields.join(",")
    }
}

/// Appends rows to `metrics.csv`, one flush per row.
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
}

impl MetricsWriter {
    /// Starts a fresh file with the header.
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = File::create(path)?;
        writeln!(file, "{HEADER}")?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            file,
        })
    }

    /// Reopens an existing file for a run resumed at `step`, dropping any
    /// rows written after it.
    pub fn resume(path: &Path, step: u64) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines();
        match lines.next() {
            Some(Ok(h)) if h == HEADER => {}
            _ => {
                return Err(Error::Format(format!(
                    "{}: missing metrics header",
                    path.display()
                )))
            }
        }
        let mut kept = vec![HEADER.to_string()];
        for line in lines {
            let line = line?;
            let row_step: u64 = line
                .split(',')
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("{}: bad row `{line}`", path.display())))?;
            if row_step <= step {
                kept.push(line);
            }
        }
        let mut text = kept.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.file, "{}", row.to_csv())?;
        self.file.flush()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
