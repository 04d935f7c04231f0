//! Dataset files, environment catalogs and content hashes.

use std::fs;
use std::path::Path;

use ggode_core::datagen::{EnvironmentSpec, NormStats, TrajectoryRecord};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{self, PayloadBuilder, Span};
use crate::error::{Error, Result};

const DATASET_KIND: &str = "dataset";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RecordHeader {
    env_id: u32,
    #[serde(rename = "T")]
    steps: usize,
    #[serde(rename = "N")]
    n_agents: usize,
    #[serde(rename = "D")]
    dim: usize,
    dt: f64,
    times: Span,
    positions: Span,
    velocities: Span,
    accelerations: Span,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetHeader {
    record_count: usize,
    records: Vec<RecordHeader>,
    #[serde(default)]
    stats: Option<NormStats>,
}

/// Write records (and optionally their normalization) to `path`.
pub fn write_dataset(path: &Path, records: &[TrajectoryRecord], stats: Option<&NormStats>) -> Result<()> {
    let mut payload = PayloadBuilder::default();
    let mut headers = Vec::with_capacity(records.len());
    for r in records {
        r.validate()?;
        headers.push(RecordHeader {
            env_id: r.env_id,
            steps: r.len(),
            n_agents: r.n_agents,
            dim: r.dim,
            dt: r.dt,
            times: payload.push(&r.times),
            positions: payload.push(&r.positions),
            velocities: payload.push(&r.velocities),
            accelerations: payload.push(&r.accelerations),
        });
    }
    let header = DatasetHeader {
        record_count: records.len(),
        records: headers,
        stats: stats.cloned(),
    };
    container::write_file(path, DATASET_KIND, header, &payload.finish())
}

/// Records and the stored normalization, if any.
pub fn read_dataset(path: &Path) -> Result<(Vec<TrajectoryRecord>, Option<NormStats>)> {
    let (header, payload): (DatasetHeader, Vec<f64>) = container::read_file(path, DATASET_KIND)?;
    if header.record_count != header.records.len() {
        return Err(Error::format(format!(
            "header declares {} records but lists {}",
            header.record_count,
            header.records.len()
        )));
    }
    let mut records = Vec::with_capacity(header.records.len());
    for (k, h) in header.records.iter().enumerate() {
        let frame = h.steps * h.n_agents * h.dim;
        let take = |span: &Span, want: usize, what: &str| -> Result<Vec<f64>> {
            let v = span.slice(&payload)?;
            if v.len() != want {
                return Err(Error::format(format!("record {k}: {what} has {} values, expected {want}", v.len())));
            }
            Ok(v.to_vec())
        };
        let record = TrajectoryRecord {
            env_id: h.env_id,
            dt: h.dt,
            n_agents: h.n_agents,
            dim: h.dim,
            times: take(&h.times, h.steps, "times")?,
            positions: take(&h.positions, frame, "positions")?,
            velocities: take(&h.velocities, frame, "velocities")?,
            accelerations: take(&h.accelerations, frame, "accelerations")?,
        };
        record.validate()?;
        records.push(record);
    }
    Ok((records, header.stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub version: u32,
    pub environments: Vec<EnvironmentSpec>,
}

pub fn write_catalog(path: &Path, envs: &[EnvironmentSpec]) -> Result<()> {
    let catalog = Catalog {
        version: container::FORMAT_VERSION,
        environments: envs.to_vec(),
    };
    write_json(path, &catalog)
}

pub fn read_catalog(path: &Path) -> Result<Vec<EnvironmentSpec>> {
    let catalog: Catalog = read_json(path)?;
    for env in &catalog.environments {
        env.validate()?;
    }
    Ok(catalog.environments)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ggode_core::datagen::{fit_zscore, Boundary};

    fn record(env_id: u32, n: usize, steps: usize, seed: u64) -> TrajectoryRecord {
        let mut rng = ggode_core::Rng::new(seed);
        TrajectoryRecord::from_positions(env_id, 0.01, n, 2, rng.normal_vec(steps * n * 2, 1.0)).unwrap()
    }

    #[test]
    fn records_of_different_sizes_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let records = vec![record(0, 3, 5, 1), record(4, 7, 4, 2)];
        let stats = fit_zscore(&records).unwrap();
        write_dataset(&path, &records, Some(&stats)).unwrap();
        let (back, s) = read_dataset(&path).unwrap();
        assert_eq!(back, records);
        assert_eq!(s, Some(stats));
        assert_eq!(back[1].n_agents, 7);
    }

    #[test]
    fn catalog_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let envs = vec![
            EnvironmentSpec::lennard_jones(0, 1.0, vec![6.0, 6.0], Boundary::Periodic).with_damping(0.5),
            EnvironmentSpec::ramp_box(1, vec![], [1.0, 1.0]),
        ];
        write_catalog(&path, &envs).unwrap();
        assert_eq!(read_catalog(&path).unwrap(), envs);
    }

    #[test]
    fn hash_changes_with_content() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        fs::write(&a, b"abc").unwrap();
        assert_eq!(
            file_hash(&a).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        fs::write(&a, b"abd").unwrap();
        assert_ne!(
            file_hash(&a).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
