use crate::error::Failure;
use axonflow::runtime::Stats;
use clap::ValueEnum;
use serde::Serialize;
use serde_json::{Map, Value};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
    Csv,
}

/// First differing neuron found by `verify`.
#[derive(Clone, Debug, Serialize)]
pub struct Mismatch {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph: Option<usize>,
    pub frame: usize,
    pub fm: String,
    pub c: u32,
    pub x: u32,
    pub y: u32,
    pub expected: i8,
    pub got: i8,
}

fn scalar(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "-".into(),
        other => other.to_string(),
    }
}

/// Flatten nested objects into dotted keys.
fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        Value::Array(a) if a.iter().any(|v| v.is_object()) => {
            for (i, v) in a.iter().enumerate() {
                flatten(&format!("{prefix}.{i}"), v, out);
            }
        }
        Value::Array(a) => out.push((prefix.to_string(), a.iter().map(scalar).collect::<Vec<_>>().join(" "))),
        other => out.push((prefix.to_string(), scalar(other))),
    }
}

pub fn render(format: Format, v: &Value) -> Result<String, Failure> {
    Ok(match format {
        Format::Json => serde_json::to_string_pretty(v)? + "\n",
        Format::Table | Format::Csv => {
            let mut rows = Vec::new();
            flatten("", v, &mut rows);
            let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
            let mut s = String::new();
            if format == Format::Csv {
                s.push_str("key,value\n");
            }
            for (k, val) in rows {
                if format == Format::Csv {
                    let _ = writeln!(s, "{k},{val}");
                } else {
                    let _ = writeln!(s, "{k:<width$}  {val}");
                }
            }
            s
        }
    })
}

pub fn emit(format: Format, v: &Value, out: Option<&Path>) -> Result<(), Failure> {
    let text = render(format, v)?;
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Statistics with one column per frame.
pub fn emit_stats(format: Format, frames: &[Stats]) -> Result<(), Failure> {
    if format == Format::Json {
        return emit(format, &serde_json::json!({ "frames": frames.len(), "stats": frames }), None);
    }
    let cols: Vec<Map<String, Value>> = frames
        .iter()
        .map(|s| match serde_json::to_value(s) {
            Ok(Value::Object(m)) => m,
            _ => Map::new(),
        })
        .collect();
    let keys: Vec<&String> = cols.first().map(|m| m.keys().collect()).unwrap_or_default();
    let width = keys.iter().map(|k| k.len()).max().unwrap_or(0);
    let mut s = String::new();
    if format == Format::Csv {
        let _ = writeln!(s, "frame,{}", keys.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(","));
        for (i, c) in cols.iter().enumerate() {
            let vals: Vec<String> = keys.iter().map(|k| scalar(&c[k.as_str()])).collect();
            let _ = writeln!(s, "{i},{}", vals.join(","));
        }
    } else {
        let head: Vec<String> = (0..cols.len()).map(|i| format!("{:>12}", format!("frame {i}"))).collect();
        let _ = writeln!(s, "{:<width$}{}", "", head.join(""));
        for k in keys {
            let vals: Vec<String> = cols.iter().map(|c| format!("{:>12}", scalar(&c[k.as_str()]))).collect();
            let _ = writeln!(s, "{k:<width$}{}", vals.join(""));
        }
    }
    print!("{s}");
    Ok(())
}
