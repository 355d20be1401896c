//! Newline-delimited JSON series files.
//!
//! Line 1 is a header record:
//!
//! ```text
//! {"format":"sand-ndjson","version":1,"task":"multilabel:3","input_dim":4}
//! ```
//!
//! Every further non-blank line is one sample:
//!
//! ```text
//! {"id":"a","series":[[0.1,null,2,3],...],"label":1}
//! ```
//!
//! `series` is `T × input_dim`, numbers or `null`. The label field depends
//! on the task: `label` (class index) for `binary` and `multiclass:C`,
//! `labels` (0/1 array of length K) for `multilabel:K`, `step_labels`
//! (length T) for the per-step tasks. Optional fields: `step_mask` (0/1
//! per step) and `value` (a continuous target).
//!
//! Loading imputes `null` as 0 and appends one indicator channel per input
//! channel, 1 where the value was missing, so the loaded width is
//! `2 · input_dim`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Map, Value};

use super::{Dataset, Label, Sample};
use crate::encoder::TaskKind;
use crate::error::{Error, Result};

pub const NDJSON_FORMAT: &str = "sand-ndjson";
pub const NDJSON_VERSION: u64 = 1;

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

pub fn load_ndjson(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_ndjson(&text)
}

/// Parses NDJSON text; see the module docs for the schema.
pub fn read_ndjson(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines.next().ok_or_else(|| parse_err(1, "missing header record"))?;
    let hline = hline + 1;
    let header: Value = serde_json::from_str(header).map_err(|e| parse_err(hline, e.to_string()))?;
    if header.get("format").and_then(Value::as_str) != Some(NDJSON_FORMAT) {
        return Err(parse_err(hline, format!("header must declare \"format\":\"{NDJSON_FORMAT}\"")));
    }
    match header.get("version").and_then(Value::as_u64) {
        Some(NDJSON_VERSION) => {}
        other => return Err(parse_err(hline, format!("unsupported version {other:?}"))),
    }
    let task: TaskKind = header
        .get("task")
        .and_then(Value::as_str)
        .ok_or_else(|| parse_err(hline, "header lacks \"task\""))?
        .parse()
        .map_err(|e: Error| parse_err(hline, e.to_string()))?;
    let r = header
        .get("input_dim")
        .and_then(Value::as_u64)
        .filter(|&r| r > 0)
        .ok_or_else(|| parse_err(hline, "header lacks a positive \"input_dim\""))? as usize;

    let mut samples = Vec::new();
    for (i, line) in lines {
        samples.push(parse_record(i + 1, line, task, r)?);
    }
    Ok(Dataset {
        task,
        input_dim: 2 * r,
        indicator_from: Some(r),
        samples,
    })
}

fn parse_record(line: usize, text: &str, task: TaskKind, r: usize) -> Result<Sample> {
    let err = |msg: String| parse_err(line, msg);
    let rec: Map<String, Value> = serde_json::from_str(text).map_err(|e| err(e.to_string()))?;
    let id = match rec.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => return Err(err("missing \"id\"".into())),
    };
    let rows = rec
        .get("series")
        .and_then(Value::as_array)
        .ok_or_else(|| err(format!("sample `{id}`: missing \"series\" array")))?;
    if rows.is_empty() {
        return Err(err(format!("sample `{id}`: empty series")));
    }
    let len = rows.len();
    let mut x = vec![0.0; len * 2 * r];
    for (t, row) in rows.iter().enumerate() {
        let row = row
            .as_array()
            .filter(|a| a.len() == r)
            .ok_or_else(|| err(format!("sample `{id}`: step {t} is not an array of {r} values")))?;
        let out = &mut x[t * 2 * r..(t + 1) * 2 * r];
        for (c, v) in row.iter().enumerate() {
            match v {
                Value::Null => out[r + c] = 1.0,
                Value::Number(n) => out[c] = n.as_f64().filter(|v| v.is_finite()).ok_or_else(|| {
                    err(format!("sample `{id}`: step {t} channel {c} is not a finite number"))
                })?,
                other => {
                    return Err(err(format!("sample `{id}`: step {t} channel {c} is non-numeric: {other}")))
                }
            }
        }
    }

    let field = |name: &str| {
        rec.get(name)
            .ok_or_else(|| err(format!("sample `{id}`: missing \"{name}\" for task {task}")))
    };
    let index = |v: &Value| v.as_u64().map(|u| u as usize);
    let label = match task {
        TaskKind::Binary | TaskKind::Multiclass(_) => {
            let c = index(field("label")?).filter(|&c| c < task.logits());
            Label::Class(c.ok_or_else(|| err(format!("sample `{id}`: label must be a class index below {}", task.logits())))?)
        }
        TaskKind::Multilabel(k) => {
            let bits: Option<Vec<u8>> = field("labels")?
                .as_array()
                .filter(|a| a.len() == k)
                .and_then(|a| a.iter().map(|v| index(v).filter(|&b| b <= 1).map(|b| b as u8)).collect());
            Label::Multi(bits.ok_or_else(|| err(format!("sample `{id}`: labels must be {k} values in {{0,1}}")))?)
        }
        TaskKind::StepBinary | TaskKind::StepRegression => {
            let steps: Option<Vec<f64>> = field("step_labels")?
                .as_array()
                .filter(|a| a.len() == len)
                .and_then(|a| a.iter().map(Value::as_f64).collect());
            let steps = steps.ok_or_else(|| err(format!("sample `{id}`: step_labels must hold {len} numbers")))?;
            if task == TaskKind::StepBinary && steps.iter().any(|&y| y != 0.0 && y != 1.0) {
                return Err(err(format!("sample `{id}`: step_labels must be 0 or 1")));
            }
            Label::Steps(steps)
        }
    };
    let step_mask = match rec.get("step_mask") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let m: Option<Vec<bool>> = v
                .as_array()
                .filter(|a| a.len() == len)
                .and_then(|a| a.iter().map(|v| index(v).filter(|&b| b <= 1).map(|b| b == 1)).collect());
            Some(m.ok_or_else(|| err(format!("sample `{id}`: step_mask must be {len} values in {{0,1}}")))?)
        }
    };
    let value = match rec.get("value") {
        None | Some(Value::Null) => None,
        Some(v) => Some(v.as_f64().ok_or_else(|| err(format!("sample `{id}`: value must be a number")))?),
    };
    Ok(Sample { id, x, len, label, step_mask, value })
}

/// Writes `ds` in the NDJSON schema. Indicator channels, if present, are
/// folded back into `null`s so that loading the file reproduces `ds`.
pub fn write_ndjson(ds: &Dataset, path: &Path) -> Result<()> {
    let raw = ds.indicator_from.unwrap_or(ds.input_dim);
    let mut out = String::new();
    let header = json!({
        "format": NDJSON_FORMAT,
        "version": NDJSON_VERSION,
        "task": ds.task.to_string(),
        "input_dim": raw,
    });
    out.push_str(&header.to_string());
    out.push('\n');
    for s in &ds.samples {
        let series: Vec<Value> = s
            .x
            .chunks_exact(ds.input_dim)
            .map(|row| {
                (0..raw)
                    .map(|c| {
                        let missing = ds.indicator_from.is_some() && row[raw + c] != 0.0;
                        if missing { Value::Null } else { json!(row[c]) }
                    })
                    .collect()
            })
            .collect();
        let mut rec = Map::new();
        rec.insert("id".into(), json!(s.id));
        rec.insert("series".into(), Value::Array(series));
        match &s.label {
            Label::Class(c) => rec.insert("label".into(), json!(c)),
            Label::Multi(v) => rec.insert("labels".into(), json!(v)),
            Label::Steps(v) => rec.insert("step_labels".into(), json!(v)),
        };
        if let Some(m) = &s.step_mask {
            let m: Vec<u8> = m.iter().map(|&b| b as u8).collect();
            rec.insert("step_mask".into(), json!(m));
        }
        if let Some(v) = s.value {
            rec.insert("value".into(), json!(v));
        }
        out.push_str(&Value::Object(rec).to_string());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Flat CSV, one row per step: `id,t,x0..x{R-1},label`. The label column
/// holds the class, the `;`-joined label vector, or the step label.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::from("id,t");
    for c in 0..ds.input_dim {
        out.push_str(&format!(",x{c}"));
    }
    out.push_str(",label\n");
    for s in &ds.samples {
        for (t, row) in s.x.chunks_exact(ds.input_dim).enumerate() {
            out.push_str(&format!("{},{t}", s.id));
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            let label = match &s.label {
                Label::Class(c) => c.to_string(),
                Label::Multi(v) => v.iter().map(u8::to_string).collect::<Vec<_>>().join(";"),
                Label::Steps(v) => v[t].to_string(),
            };
            out.push_str(&format!(",{label}\n"));
        }
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
