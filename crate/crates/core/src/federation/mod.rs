//! Client/server orchestration: the two aggregation loops, collaborative grid
//! search and threshold selection, and evaluation on known and new devices.

pub mod grid;
pub mod metrics;
pub mod threshold;
pub mod training;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub use grid::{collaborative_grid_search, preset_grid, GridOutcome, GridPoint, GridScore};
pub use metrics::{confusion, evaluate, predict, Confusion, Evaluation, Metric, RoundMetrics};
pub use threshold::{
    detect, detect_all, detect_sample, global_threshold, local_threshold, mean_plus_std, StdKind,
};
pub use training::{
    batch_from_samples, no_observer, run_federated, run_mini_batch, run_multi_epoch, train_local,
    Algorithm, Client, EpochSampler, FederationConfig, Observer, RoundRecord, TrainingOutcome,
};

/// Append-only JSON-lines writer for round records.
pub struct RoundLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl RoundLog {
    pub fn create(path: &Path) -> Result<RoundLog> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(RoundLog {
            path: path.to_owned(),
            out: BufWriter::new(file),
        })
    }

    pub fn append(&mut self, record: &RoundRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out
            .write_all(b"\n")
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}
