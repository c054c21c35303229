//! Dataset plumbing: synthetic generation, CSV ingestion, task-window
//! slicing, and dataset statistics.
//!
//! A [`Dataset`] holds raw series only. Forecasting tasks are derived
//! from it by [`slice_task`], which splits each series at the
//! observation boundary and turns the observed cells of the following
//! events into the query.

pub mod csv;
pub mod synthetic;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Answer, Event, ForecastQuery, GraphError, QueryItem, TimeSeries};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("instance {instance}: needs {needed} future event times after t = {observe_until}, found {available}")]
    InsufficientFuture {
        instance: usize,
        observe_until: f64,
        needed: usize,
        available: usize,
    },
    #[error("instance {instance}: no events at or before t = {observe_until}")]
    EmptyObservation { instance: usize, observe_until: f64 },
    #[error("line {line}: {message}")]
    CsvFormat { line: usize, message: String },
    #[error("line {line}: duplicate cell (instance {instance}, time {time}, channel {channel})")]
    DuplicateCell {
        line: usize,
        instance: usize,
        time: f64,
        channel: usize,
    },
    #[error("file contains no data rows")]
    EmptyFile,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A collection of raw series sharing one channel layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channel_count: usize,
    pub instances: Vec<TimeSeries>,
}

/// How to cut a raw series into an observation part and a forecast query.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskWindow {
    /// Events at or before this time are observed.
    pub observe_until: f64,
    pub horizon: Horizon,
}

/// Forecast extent: either the next k distinct event times, or every
/// event inside a fixed span after the observation boundary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Horizon {
    Steps(usize),
    Span(f64),
}

impl TaskWindow {
    pub fn validate(&self) -> Result<(), DataError> {
        if !self.observe_until.is_finite() || self.observe_until <= 0.0 {
            return Err(DataError::InvalidSpec(
                "observe_until must be positive and finite".into(),
            ));
        }
        match self.horizon {
            Horizon::Steps(0) => Err(DataError::InvalidSpec(
                "horizon must cover at least one step".into(),
            )),
            Horizon::Span(h) if !(h.is_finite() && h > 0.0) => Err(DataError::InvalidSpec(
                "horizon span must be positive and finite".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// One forecasting task: what the model sees, what it is asked, and the
/// ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskInstance {
    pub series: TimeSeries,
    pub query: ForecastQuery,
    pub answer: Answer,
}

/// Summary numbers for a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub sample_count: usize,
    pub channel_count: usize,
    /// Largest event count over the instances.
    pub max_length: usize,
    /// Largest observed-cell count over the instances.
    pub max_observations: usize,
    /// Share of missing cells over all events, in percent.
    pub sparsity_percent: f64,
}

/// Splits one raw series into a task.
///
/// The observation part keeps events at or before `w.observe_until`.
/// The query covers the observed cells of the forecast events, ordered
/// by time then channel, and the answer carries their recorded values.
pub fn slice_task(
    ts: &TimeSeries,
    w: &TaskWindow,
    instance: usize,
) -> Result<TaskInstance, DataError> {
    w.validate()?;
    ts.validate()?;
    let observed: Vec<Event> = ts
        .events
        .iter()
        .filter(|e| e.time <= w.observe_until)
        .cloned()
        .collect();
    if observed.is_empty() {
        return Err(DataError::EmptyObservation {
            instance,
            observe_until: w.observe_until,
        });
    }
    let future: Vec<&Event> = match w.horizon {
        Horizon::Steps(k) => {
            let future: Vec<&Event> = ts
                .events
                .iter()
                .filter(|e| e.time > w.observe_until)
                .take(k)
                .collect();
            if future.len() < k {
                return Err(DataError::InsufficientFuture {
                    instance,
                    observe_until: w.observe_until,
                    needed: k,
                    available: future.len(),
                });
            }
            future
        }
        Horizon::Span(h) => {
            let future: Vec<&Event> = ts
                .events
                .iter()
                .filter(|e| e.time > w.observe_until && e.time <= w.observe_until + h)
                .collect();
            if future.is_empty() {
                return Err(DataError::InsufficientFuture {
                    instance,
                    observe_until: w.observe_until,
                    needed: 1,
                    available: 0,
                });
            }
            future
        }
    };
    let mut items = Vec::new();
    let mut values = Vec::new();
    for e in &future {
        for (c, v) in e.values.iter().enumerate() {
            if let Some(v) = v {
                items.push(QueryItem {
                    time: e.time,
                    channel: c,
                });
                values.push(*v);
            }
        }
    }
    Ok(TaskInstance {
        series: TimeSeries {
            events: observed,
            channel_count: ts.channel_count,
        },
        query: ForecastQuery { items },
        answer: Answer(values),
    })
}

/// Slices every instance, dropping those without enough future events.
/// Returns the tasks and the number of skipped instances.
pub fn make_tasks(ds: &Dataset, w: &TaskWindow) -> Result<(Vec<TaskInstance>, usize), DataError> {
    let mut tasks = Vec::with_capacity(ds.instances.len());
    let mut skipped = 0usize;
    for (i, ts) in ds.instances.iter().enumerate() {
        match slice_task(ts, w, i) {
            Ok(task) => tasks.push(task),
            Err(DataError::InsufficientFuture { .. }) | Err(DataError::EmptyObservation { .. }) => {
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok((tasks, skipped))
}

pub fn stats(ds: &Dataset) -> DatasetStats {
    let mut total_events = 0usize;
    let mut total_observed = 0usize;
    let mut max_length = 0usize;
    let mut max_observations = 0usize;
    for ts in &ds.instances {
        let observed = ts.observed_count();
        total_events += ts.events.len();
        total_observed += observed;
        max_length = max_length.max(ts.events.len());
        max_observations = max_observations.max(observed);
    }
    let cells = ds.channel_count * total_events;
    let sparsity = if cells == 0 {
        0.0
    } else {
        1.0 - total_observed as f64 / cells as f64
    };
    DatasetStats {
        sample_count: ds.instances.len(),
        channel_count: ds.channel_count,
        max_length,
        max_observations,
        sparsity_percent: 100.0 * sparsity,
    }
}

pub use csv::{ingest_csv, write_csv, DatasetMeta};
pub use synthetic::{generate, sparsify_asts, SyntheticSpec};
