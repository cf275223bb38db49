//! Dataset serialization: one versioned CSV per environment.
//!
//! Line 1 is a `#` meta line carrying the format version, channel dimension,
//! environment id, generation seed, and configuration count; line 2 is the
//! column header; each following row is one sample. Floats round-trip exactly.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use num_complex::Complex64;

use super::{CsiSample, Dataset};
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetMeta {
    pub version: u32,
    pub channel_dim: usize,
    pub environment_id: u32,
    pub seed: u64,
    pub num_configs: usize,
}

const GEO_COLUMNS: [&str; 6] = ["az_tx", "el_tx", "az_rx", "el_rx", "dist_tx", "dist_rx"];

pub fn write_dataset_csv(dataset: &Dataset, seed: u64, path: &Path) -> Result<()> {
    let sample0 = dataset
        .samples
        .first()
        .ok_or_else(|| Error::contract("cannot serialize an empty dataset"))?;
    let n = sample0.h.len();
    let num_configs = sample0.per_config_gains.len();

    let mut file = std::fs::File::create(path)?;
    writeln!(
        file,
        "# risfl-dataset v{DATASET_FORMAT_VERSION} n={n} env={} seed={seed} configs={num_configs}",
        dataset.environment_id
    )?;

    let mut writer = csv::Writer::from_writer(file);
    let mut header = vec!["sample_index".to_string()];
    for part in ["h_re", "h_im", "g_re", "g_im"] {
        header.extend((0..n).map(|i| format!("{part}_{i}")));
    }
    header.extend(GEO_COLUMNS.iter().map(|s| s.to_string()));
    header.extend((0..num_configs).map(|c| format!("gain_{c}")));
    header.push("label".to_string());
    writer.write_record(&header)?;

    for (idx, s) in dataset.samples.iter().enumerate() {
        let mut row = Vec::with_capacity(header.len());
        row.push(idx.to_string());
        for val in s
            .h
            .iter()
            .map(|c| c.re)
            .chain(s.h.iter().map(|c| c.im))
            .chain(s.g.iter().map(|c| c.re))
            .chain(s.g.iter().map(|c| c.im))
            .chain(s.geo_features.iter().copied())
            .chain(s.per_config_gains.iter().copied())
        {
            row.push(format_f64(val));
        }
        row.push(s.label.to_string());
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_dataset_csv(path: &Path) -> Result<(Dataset, DatasetMeta)> {
    let file = std::fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut meta_line = String::new();
    reader.read_line(&mut meta_line)?;
    let meta = parse_meta(meta_line.trim())?;

    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let n = meta.channel_dim;
    let expected = 1 + 4 * n + 6 + meta.num_configs + 1;
    let mut samples = Vec::new();
    for record in csv_reader.records() {
        let record = record?;
        if record.len() != expected {
            return Err(Error::contract(format!(
                "dataset row has {} fields, expected {expected}",
                record.len()
            )));
        }
        let field = |i: usize| -> Result<f64> {
            record[i]
                .parse::<f64>()
                .map_err(|e| Error::contract(format!("bad float in column {i}: {e}")))
        };
        let complex_block = |start: usize| -> Result<Vec<Complex64>> {
            (0..n)
                .map(|i| Ok(Complex64::new(field(start + i)?, field(start + n + i)?)))
                .collect()
        };
        let h = complex_block(1)?;
        let g = complex_block(1 + 2 * n)?;
        let geo_start = 1 + 4 * n;
        let mut geo_features = [0.0; 6];
        for (i, slot) in geo_features.iter_mut().enumerate() {
            *slot = field(geo_start + i)?;
        }
        let gain_start = geo_start + 6;
        let per_config_gains: Vec<f64> = (0..meta.num_configs)
            .map(|c| field(gain_start + c))
            .collect::<Result<_>>()?;
        let label: usize = record[expected - 1]
            .parse()
            .map_err(|e| Error::contract(format!("bad label: {e}")))?;
        samples.push(CsiSample {
            h,
            g,
            geo_features,
            label,
            per_config_gains,
        });
    }
    Ok((
        Dataset {
            environment_id: meta.environment_id,
            samples,
        },
        meta,
    ))
}

fn parse_meta(line: &str) -> Result<DatasetMeta> {
    let err = || Error::contract(format!("malformed dataset meta line: {line:?}"));
    let rest = line.strip_prefix("# risfl-dataset v").ok_or_else(err)?;
    let mut parts = rest.split_whitespace();
    let version: u32 = parts.next().ok_or_else(err)?.parse().map_err(|_| err())?;
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::contract(format!(
            "unsupported dataset format version {version}"
        )));
    }
    let mut channel_dim = None;
    let mut environment_id = None;
    let mut seed = None;
    let mut num_configs = None;
    for part in parts {
        let (key, value) = part.split_once('=').ok_or_else(err)?;
        match key {
            "n" => channel_dim = Some(value.parse().map_err(|_| err())?),
            "env" => environment_id = Some(value.parse().map_err(|_| err())?),
            "seed" => seed = Some(value.parse().map_err(|_| err())?),
            "configs" => num_configs = Some(value.parse().map_err(|_| err())?),
            _ => return Err(err()),
        }
    }
    Ok(DatasetMeta {
        version,
        channel_dim: channel_dim.ok_or_else(err)?,
        environment_id: environment_id.ok_or_else(err)?,
        seed: seed.ok_or_else(err)?,
        num_configs: num_configs.ok_or_else(err)?,
    })
}

/// f64 Display is shortest round-trip; parsing the string restores the bits.
fn format_f64(v: f64) -> String {
    format!("{v}")
}
