//! Forecasting irregularly sampled multivariate time series with missing
//! values by encoding each series and its query as a sparse bipartite
//! graph and predicting the query edge weights with an attention GNN.
//!
//! The crate is split into the numeric core (tensors, autodiff, Adam),
//! the graph encoding, the model itself, synthetic and CSV data handling,
//! and the training harness. The `grafiti` binary wires these together.

pub mod cli;
pub mod data;
pub mod graph;
pub mod model;
pub mod numerics;
pub mod training;
