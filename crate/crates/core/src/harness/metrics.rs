//! JSON-lines metrics stream.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Appends one JSON object per line with the mandatory `phase`, `step` and
/// `seed` keys. Steps must strictly increase within a phase.
pub struct MetricsWriter {
    out: Option<(PathBuf, BufWriter<File>)>,
    last_step: BTreeMap<String, u64>,
    seed: u64,
}

impl MetricsWriter {
    pub fn create(path: impl AsRef<Path>, seed: u64) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            out: Some((path, BufWriter::new(file))),
            last_step: BTreeMap::new(),
            seed,
        })
    }

    /// Validates records but writes nothing.
    pub fn discard(seed: u64) -> Self {
        Self {
            out: None,
            last_step: BTreeMap::new(),
            seed,
        }
    }

    pub fn record<T: Serialize>(&mut self, phase: &str, step: u64, fields: &T) -> Result<()> {
        if let Some(&prev) = self.last_step.get(phase) {
            if step <= prev {
                return Err(Error::Contract(format!(
                    "metrics step {step} does not increase past {prev} in phase {phase}"
                )));
            }
        }
        self.last_step.insert(phase.to_string(), step);
        let mut obj = Map::new();
        obj.insert("phase".into(), Value::from(phase));
        obj.insert("step".into(), Value::from(step));
        obj.insert("seed".into(), Value::from(self.seed));
        match serde_json::to_value(fields)? {
            Value::Object(extra) => {
                for (k, v) in extra {
                    if obj.contains_key(&k) {
                        return Err(Error::Contract(format!("metrics field {k} is reserved")));
                    }
                    obj.insert(k, v);
                }
            }
            Value::Null => {}
            other => return Err(Error::Contract(format!("metrics fields must be an object, got {other}"))),
        }
        if let Some((path, w)) = &mut self.out {
            let line = serde_json::to_string(&Value::Object(obj))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some((path, w)) = &mut self.out {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }
}

impl Drop for MetricsWriter {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

/// Reads a metrics file back as JSON values, one per line.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<Value>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
