//! Per-epoch learning curves, exported as `epoch,split,accuracy_percent,mean_loss`.

use std::fmt;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const CSV_HEADER: &str = "epoch,split,accuracy_percent,mean_loss";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Test => "test",
        })
    }
}

impl FromStr for SplitName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(SplitName::Train),
            "test" => Ok(SplitName::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: u64,
    pub split: SplitName,
    pub accuracy_percent: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub fn push(&mut self, epoch: u64, split: SplitName, accuracy_percent: f64, mean_loss: f64) {
        self.rows.push(MetricRow { epoch, split, accuracy_percent, mean_loss });
    }

    pub fn last(&self, split: SplitName) -> Option<&MetricRow> {
        self.rows.iter().rev().find(|r| r.split == split)
    }

    pub fn write_csv(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", r.epoch, r.split, r.accuracy_percent, r.mean_loss)?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to memory");
        String::from_utf8(buf).expect("ascii")
    }

    pub fn parse_csv(text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == CSV_HEADER => {}
            other => return Err(format!("bad header {other:?}")),
        }
        let mut log = MetricsLog::default();
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(format!("line {}: expected 4 fields", n + 2));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| format!("line {}: {e}", n + 2));
            log.rows.push(MetricRow {
                epoch: f[0].parse().map_err(|e| format!("line {}: {e}", n + 2))?,
                split: f[1].parse()?,
                accuracy_percent: num(f[2])?,
                mean_loss: num(f[3])?,
            });
        }
        Ok(log)
    }
}

/// Write the curves to `path`.
pub fn export_curves(metrics: &MetricsLog, path: &Path) -> io::Result<()> {
    std::fs::write(path, metrics.to_csv())
}
