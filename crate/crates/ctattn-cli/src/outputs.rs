//! Machine-readable outputs: `metrics.json` (versioned schema, sorted keys)
//! and `metrics.csv` rows for plotting.

use crate::CliError;
use serde_json::{json, Map, Value};
use std::path::Path;

pub const METRICS_SCHEMA_VERSION: u32 = 1;

pub fn metrics_json(task: &str, seed: u64, metrics: Value) -> Value {
    json!({
        "schema_version": METRICS_SCHEMA_VERSION,
        "task": task,
        "seed": seed,
        "metrics": metrics,
    })
}

pub fn write_metrics(
    out: &Path,
    doc: &Value,
    csv_header: &str,
    csv_rows: &[String],
) -> Result<(), CliError> {
    let pretty = serde_json::to_string_pretty(doc)
        .map_err(|e| CliError::Runtime(format!("encode metrics: {e}")))?;
    std::fs::write(out.join("metrics.json"), pretty + "\n")
        .map_err(|e| CliError::Runtime(format!("write metrics.json: {e}")))?;
    let mut csv = String::from(csv_header);
    csv.push('\n');
    for row in csv_rows {
        csv.push_str(row);
        csv.push('\n');
    }
    std::fs::write(out.join("metrics.csv"), csv)
        .map_err(|e| CliError::Runtime(format!("write metrics.csv: {e}")))?;
    println!("{}", doc);
    Ok(())
}

/// Sorted-key JSON object from (name, value) pairs.
pub fn obj(pairs: &[(&str, Value)]) -> Value {
    let mut map = Map::new();
    for (k, v) in pairs {
        map.insert(k.to_string(), v.clone());
    }
    Value::Object(map)
}
