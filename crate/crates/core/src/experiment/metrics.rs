//! Newline-delimited JSON metrics records.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// One line of a metrics file. Field order is fixed by declaration order and
/// payload keys are sorted, so identical runs give identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Simulated cost at which the record was produced.
    pub cost: f64,
    pub experiment: String,
    pub kind: String,
    pub payload: Map<String, Value>,
}

impl MetricsRecord {
    pub fn new(cost: f64, experiment: &str, kind: &str) -> Self {
        Self {
            cost,
            experiment: experiment.to_string(),
            kind: kind.to_string(),
            payload: Map::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.payload.insert(key.to_string(), value.into());
        self
    }

    /// Adds every field of a serializable struct to the payload.
    pub fn with_fields(mut self, fields: &impl Serialize) -> Self {
        if let Value::Object(map) = serde_json::to_value(fields).expect("metrics serialize") {
            self.payload.extend(map);
        }
        self
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.payload.get(key).and_then(Value::as_f64)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.payload.get(key).and_then(Value::as_str)
    }

    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("metrics serialize");
        s.push('\n');
        s
    }
}

pub fn append_records(path: &Path, records: &[MetricsRecord]) -> std::io::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut buf = String::new();
    for r in records {
        buf.push_str(&r.to_line());
    }
    f.write_all(buf.as_bytes())
}

pub fn read_records(path: &Path) -> std::io::Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{}:{}: {e}", path.display(), i + 1),
            )
        })?;
        out.push(rec);
    }
    Ok(out)
}
