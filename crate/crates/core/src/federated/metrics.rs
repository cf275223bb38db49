//! Per-round evaluation records and their CSV stream.
//!
//! The CSV carries one row per round per split. Wall-clock time is kept in
//! memory only; serialized outputs stay byte-identical across reruns.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Metrics of one split at one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: String,
    pub accuracy: f64,
    /// Mean spectral efficiency under the predicted configurations.
    pub se_pred: f64,
    /// Mean spectral efficiency under the oracle configurations.
    pub se_best: f64,
    /// Mean spectral efficiency of a uniformly random configuration.
    pub se_random: f64,
}

/// Evaluation record of one communication round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub splits: Vec<SplitMetrics>,
    /// In-memory only; excluded from serialized outputs so files are
    /// reproducible byte for byte.
    #[serde(skip)]
    pub wall_ms: f64,
}

impl RoundMetrics {
    pub fn split(&self, name: &str) -> Option<&SplitMetrics> {
        self.splits.iter().find(|s| s.split == name)
    }
}

pub const METRICS_FORMAT_VERSION: u32 = 1;

/// Writes the metrics stream with a `#` meta line carrying the config hash
/// and seed list.
pub fn write_metrics_csv(
    metrics: &[RoundMetrics],
    config_hash: &str,
    seeds: &[u64],
    path: &Path,
) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    let seed_list = seeds
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join(",");
    writeln!(
        file,
        "# risfl-metrics v{METRICS_FORMAT_VERSION} config_hash={config_hash} seeds={seed_list}"
    )?;
    let mut writer = csv::Writer::from_writer(file);
    writer.write_record(["round", "split", "accuracy", "se_pred", "se_best", "se_random"])?;
    for m in metrics {
        for s in &m.splits {
            writer.write_record([
                m.round.to_string(),
                s.split.clone(),
                format!("{}", s.accuracy),
                format!("{}", s.se_pred),
                format!("{}", s.se_best),
                format!("{}", s.se_random),
            ])?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Reads a metrics stream back; returns the rounds and the meta line.
pub fn read_metrics_csv(path: &Path) -> Result<(Vec<RoundMetrics>, String)> {
    let file = std::fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut meta = String::new();
    reader.read_line(&mut meta)?;
    if !meta.starts_with("# risfl-metrics v") {
        return Err(Error::contract(format!("malformed metrics meta: {meta:?}")));
    }
    let mut csv_reader = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut out: Vec<RoundMetrics> = Vec::new();
    for record in csv_reader.records() {
        let record = record?;
        if record.len() != 6 {
            return Err(Error::contract("metrics row must have 6 fields"));
        }
        let round: usize = record[0]
            .parse()
            .map_err(|e| Error::contract(format!("bad round: {e}")))?;
        let parse = |i: usize| -> Result<f64> {
            record[i]
                .parse()
                .map_err(|e| Error::contract(format!("bad float: {e}")))
        };
        let split = SplitMetrics {
            split: record[1].to_string(),
            accuracy: parse(2)?,
            se_pred: parse(3)?,
            se_best: parse(4)?,
            se_random: parse(5)?,
        };
        match out.last_mut() {
            Some(last) if last.round == round => last.splits.push(split),
            _ => out.push(RoundMetrics {
                round,
                splits: vec![split],
                wall_ms: 0.0,
            }),
        }
    }
    Ok((out, meta.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_metrics() -> Vec<RoundMetrics> {
        (1..=3)
            .map(|round| RoundMetrics {
                round,
                splits: vec![
                    SplitMetrics {
                        split: "train".into(),
                        accuracy: 0.5 + 0.1 * round as f64,
                        se_pred: 20.0,
                        se_best: 21.0,
                        se_random: 19.5,
                    },
                    SplitMetrics {
                        split: "ood".into(),
                        accuracy: 0.4 + 0.1 * round as f64,
                        se_pred: 18.0,
                        se_best: 21.0,
                        se_random: 19.5,
                    },
                ],
                wall_ms: 12.0,
            })
            .collect()
    }

    #[test]
    fn metrics_round_trip_and_deterministic_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path_a = dir.path().join("a.csv");
        let path_b = dir.path().join("b.csv");
        let metrics = sample_metrics();
        write_metrics_csv(&metrics, "abc123", &[1, 2], &path_a).unwrap();
        write_metrics_csv(&metrics, "abc123", &[1, 2], &path_b).unwrap();
        assert_eq!(
            std::fs::read(&path_a).unwrap(),
            std::fs::read(&path_b).unwrap()
        );

        let (back, meta) = read_metrics_csv(&path_a).unwrap();
        assert!(meta.contains("config_hash=abc123"));
        assert_eq!(back.len(), 3);
        assert_eq!(back[0].splits.len(), 2);
        assert_eq!(back[2].split("ood").unwrap().accuracy, 0.4 + 0.1 * 3.0);
    }
}
