//! CSV and JSON writers for run artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::EstimatorResult;
use crate::record::{Observable, TrajectoryRecord};
use crate::variant::Units;

pub const SCHEMA_VERSION: u32 = 1;

/// Provenance written next to every data file. The only field that varies
/// between identical invocations is `created_unix`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub schema_version: u32,
    pub package_version: String,
    pub command: String,
    pub units: Units,
    pub base_seed: u64,
    pub dt: Option<f64>,
    pub grid: Option<crate::grid::GridSpec>,
    pub thresholds: BTreeMap<String, f64>,
    pub parameters: BTreeMap<String, serde_json::Value>,
    pub created_unix: Option<u64>,
}

impl RunMetadata {
    pub fn new(command: &str, units: Units, base_seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            units,
            base_seed,
            dt: None,
            grid: None,
            thresholds: BTreeMap::new(),
            parameters: BTreeMap::new(),
            created_unix: None,
        }
    }

    pub fn stamped(mut self) -> Self {
        self.created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .ok()
            .map(|d| d.as_secs());
        self
    }

    pub fn parameter(mut self, key: &str, value: impl Serialize) -> Self {
        self.parameters.insert(key.to_string(), serde_json::to_value(value).unwrap_or(serde_json::Value::Null));
        self
    }
}

fn csv_to_string(build: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    build(&mut w).expect("writing to memory");
    String::from_utf8(w.into_inner().expect("flushing to memory")).expect("csv output is UTF-8")
}

/// Long-format rows `trajectory,time,observable,value`.
pub fn long_csv(records: &[TrajectoryRecord], observables: &[Observable]) -> String {
    csv_to_string(|w| {
        w.write_record(["trajectory", "time", "observable", "value"])?;
        for r in records {
            for &obs in observables {
                let series = r.series(obs);
                for (t, v) in r.times.iter().zip(series) {
                    w.write_record([r.trajectory.to_string(), t.to_string(), obs.name().to_string(), v.to_string()])?;
                }
            }
        }
        Ok(())
    })
}

/// Wide table with one column per header.
pub fn table_csv(headers: &[&str], rows: &[Vec<f64>]) -> String {
    csv_to_string(|w| {
        w.write_record(headers)?;
        for row in rows {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        Ok(())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub metadata: RunMetadata,
    pub results: Vec<EstimatorResult>,
}

pub fn summary_json(metadata: &RunMetadata, results: &[EstimatorResult]) -> String {
    let mut meta = metadata.clone();
    meta.created_unix = None;
    let s = Summary { metadata: meta, results: results.to_vec() };
    serde_json::to_string_pretty(&s).expect("summary serializes") + "\n"
}

pub fn metadata_json(metadata: &RunMetadata) -> String {
    serde_json::to_string_pretty(metadata).expect("metadata serializes") + "\n"
}

pub fn write_file(dir: &Path, name: &str, contents: &str) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    #[test]
    fn long_csv_layout() {
        let mut r = TrajectoryRecord::new(3);
        r.times = vec![0.0, 0.5];
        r.xbar = vec![1.0, 1.25];
        r.pbar = vec![0.0, -2.0];
        r.width = vec![Complex64::new(1.0, 0.0); 2];
        let s = long_csv(&[r], &[Observable::Xbar, Observable::Pbar]);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "trajectory,time,observable,value");
        assert_eq!(lines[1], "3,0,xbar,1");
        assert_eq!(lines[4], "3,0.5,pbar,-2");
        assert_eq!(lines.len(), 5);
    }

    #[test]
    fn summary_omits_timestamp() {
        let meta = RunMetadata::new("test", Units::natural(), 1).stamped();
        assert!(meta.created_unix.is_some());
        let s = summary_json(&meta, &[]);
        assert!(s.contains("\"created_unix\": null"));
        assert_eq!(table_csv(&["a", "b"], &[vec![1.0, 0.1]]), "a,b\n1,0.1\n");
    }
}
