use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::Result;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    #[default]
    PretrainGenerator,
    PretrainCritic,
    AdversarialGenerator,
    AdversarialCritic,
    /// End-of-epoch row for an epoch without updates.
    Epoch,
}

/// One row of the training log. Only the serialized columns take part in
/// equality-sensitive comparisons; wall-clock time and the critic weight
/// bound are kept in memory only.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub phase: Phase,
    #[serde(rename = "L1")]
    pub l1: Option<f64>,
    #[serde(rename = "L2")]
    pub l2: Option<f64>,
    pub combined: Option<f64>,
    pub critic_loss: Option<f64>,
    pub mean_real: Option<f64>,
    pub mean_fake: Option<f64>,
    pub val_metric: Option<f64>,
    #[serde(skip)]
    pub critic_max_abs: Option<f64>,
    #[serde(skip)]
    pub wall_clock: f64,
}

impl LogRecord {
    /// The row as written to CSV.
    pub fn columns(&self) -> Self {
        Self {
            critic_max_abs: None,
            wall_clock: 0.0,
            ..self.clone()
        }
    }
}

/// Append-only training record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.records {
            w.serialize(r)?;
        }
        if self.records.is_empty() {
            w.write_record([
                "step",
                "epoch",
                "phase",
                "L1",
                "L2",
                "combined",
                "critic_loss",
                "mean_real",
                "mean_fake",
                "val_metric",
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(File::create(path)?)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let records = r.deserialize().collect::<std::result::Result<Vec<LogRecord>, _>>()?;
        Ok(Self { records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_drops_memory_only_fields() {
        let log = TrainLog {
            records: vec![
                LogRecord {
                    step: 1,
                    epoch: 1,
                    phase: Phase::AdversarialGenerator,
                    l1: Some(-0.25),
                    l2: Some(3.5),
                    combined: Some(3.475),
                    wall_clock: 9.0,
                    ..LogRecord::default()
                },
                LogRecord {
                    step: 2,
                    epoch: 1,
                    phase: Phase::AdversarialCritic,
                    critic_loss: Some(-1e-3),
                    mean_real: Some(0.1),
                    mean_fake: Some(0.099),
                    val_metric: Some(12.5),
                    critic_max_abs: Some(0.01),
                    ..LogRecord::default()
                },
            ],
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("step,epoch,phase,L1,L2,combined,critic_loss,mean_real,mean_fake,val_metric\n"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        std::fs::write(&p, &buf).unwrap();
        let back = TrainLog::load_csv(&p).unwrap();
        let expected: Vec<_> = log.records.iter().map(LogRecord::columns).collect();
        assert_eq!(back.records, expected);
    }
}
