//! Plain-text dataset exchange.
//!
//! Observations live in a CSV with header `instance,time,channel,value`;
//! missing cells are simply absent rows. A JSON sidecar next to the CSV
//! records the channel layout, the generator seed, and the task window
//! the file was produced for. Values are written with Rust's shortest
//! round-trip float formatting, so write → ingest → write is
//! byte-identical.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DataError, Dataset, TaskWindow};
use crate::graph::{Event, TimeSeries};

pub const CSV_HEADER: &str = "instance,time,channel,value";
pub const META_VERSION: u32 = 1;

/// Sidecar describing a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    pub channel_count: usize,
    /// Free-form note; times are abstract reals.
    pub time_unit: String,
    pub seed: Option<u64>,
    /// Slicing the generator had in mind, if any.
    pub window: Option<TaskWindow>,
}

impl DatasetMeta {
    pub fn new(channel_count: usize) -> Self {
        DatasetMeta {
            version: META_VERSION,
            channel_count,
            time_unit: "abstract time units".into(),
            seed: None,
            window: None,
        }
    }
}

/// Sidecar path for a dataset file: same stem, `.json` extension.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Writes the dataset CSV and its sidecar.
pub fn write_csv(ds: &Dataset, path: &Path, meta: &DatasetMeta) -> Result<(), DataError> {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for (i, ts) in ds.instances.iter().enumerate() {
        for e in &ts.events {
            for (c, v) in e.values.iter().enumerate() {
                if let Some(v) = v {
                    writeln!(out, "{i},{},{c},{v}", e.time).expect("string write");
                }
            }
        }
    }
    std::fs::write(path, out)?;
    let json = serde_json::to_string_pretty(meta)?;
    std::fs::write(sidecar_path(path), json)?;
    Ok(())
}

fn parse_row(line_no: usize, line: &str) -> Result<(usize, f64, usize, f64), DataError> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 4 {
        return Err(DataError::CsvFormat {
            line: line_no,
            message: format!("expected 4 comma-separated fields, got {}", fields.len()),
        });
    }
    let instance: usize = fields[0].trim().parse().map_err(|_| DataError::CsvFormat {
        line: line_no,
        message: format!("instance `{}` is not a non-negative integer", fields[0]),
    })?;
    let time: f64 = fields[1].trim().parse().map_err(|_| DataError::CsvFormat {
        line: line_no,
        message: format!("time `{}` is not a number", fields[1]),
    })?;
    let channel: usize = fields[2].trim().parse().map_err(|_| DataError::CsvFormat {
        line: line_no,
        message: format!("channel `{}` is not a non-negative integer", fields[2]),
    })?;
    let value: f64 = fields[3].trim().parse().map_err(|_| DataError::CsvFormat {
        line: line_no,
        message: format!("value `{}` is not a number", fields[3]),
    })?;
    if !time.is_finite() || !value.is_finite() {
        return Err(DataError::CsvFormat {
            line: line_no,
            message: "time and value must be finite".into(),
        });
    }
    Ok((instance, time, channel, value))
}

/// Reads a dataset CSV and, when present, its sidecar.
///
/// Rows may come in any order; they are grouped by instance and exact
/// timestamp. Instances appear in ascending id order.
pub fn ingest_csv(path: &Path) -> Result<(Dataset, Option<DatasetMeta>), DataError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end() == CSV_HEADER => {}
        Some((_, header)) => {
            return Err(DataError::CsvFormat {
                line: 1,
                message: format!("expected header `{CSV_HEADER}`, got `{header}`"),
            })
        }
        None => return Err(DataError::EmptyFile),
    }

    let mut rows: Vec<(usize, f64, usize, f64, usize)> = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (i, t, c, v) = parse_row(idx + 1, line)?;
        rows.push((i, t, c, v, idx + 1));
    }
    if rows.is_empty() {
        return Err(DataError::EmptyFile);
    }

    rows.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.4.cmp(&b.4))
    });
    for pair in rows.windows(2) {
        let (i0, t0, c0, _, _) = pair[0];
        let (i1, t1, c1, _, line) = pair[1];
        if i0 == i1 && t0 == t1 && c0 == c1 {
            return Err(DataError::DuplicateCell {
                line,
                instance: i1,
                time: t1,
                channel: c1,
            });
        }
    }

    let meta = {
        let side = sidecar_path(path);
        if side.exists() {
            let text = std::fs::read_to_string(side)?;
            Some(serde_json::from_str::<DatasetMeta>(&text)?)
        } else {
            None
        }
    };
    let max_channel = rows.iter().map(|r| r.2).max().unwrap_or(0);
    let channel_count = match &meta {
        Some(m) => {
            if m.channel_count <= max_channel {
                return Err(DataError::InvalidSpec(format!(
                    "sidecar declares {} channels but the data uses channel {}",
                    m.channel_count, max_channel
                )));
            }
            m.channel_count
        }
        None => max_channel + 1,
    };

    let mut instances = Vec::new();
    let mut current_instance = usize::MAX;
    for (i, t, c, v, _) in rows {
        if i != current_instance {
            instances.push(TimeSeries {
                events: Vec::new(),
                channel_count,
            });
            current_instance = i;
        }
        let ts = instances.last_mut().expect("pushed above");
        let same_time = ts.events.last().map(|e| e.time == t).unwrap_or(false);
        if !same_time {
            ts.events.push(Event {
                time: t,
                values: vec![None; channel_count],
            });
        }
        ts.events.last_mut().expect("pushed above").values[c] = Some(v);
    }
    for ts in &instances {
        ts.validate()?;
    }
    Ok((
        Dataset {
            channel_count,
            instances,
        },
        meta,
    ))
}
