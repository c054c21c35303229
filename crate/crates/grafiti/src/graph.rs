//! Encoding of a time series query as a sparsity structure graph and the
//! decoding of final edge embeddings back into query answers.
//!
//! The graph is bipartite: channel nodes on one side, observed-time and
//! query-time nodes on the other. Every non-missing observation becomes
//! an edge carrying `(value, 1)`; every query becomes an edge carrying
//! `(0, 0)`. Node ids are assigned channels first, then observed
//! timepoints in series order, then unique query timepoints in first
//! appearance order, so the numbering is a bijection onto
//! `0 .. C + N + K'`.

use thiserror::Error;

use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("time series has no events")]
    EmptySeries,
    #[error("query has no items")]
    EmptyQuery,
    #[error("query channel {channel} out of range for {channel_count} channels")]
    ChannelOutOfRange {
        channel: usize,
        channel_count: usize,
    },
    #[error("event {index} has {got} channel slots, expected {expected}")]
    EventWidthMismatch {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("timepoints not strictly increasing at event {index}")]
    NonIncreasingTimes { index: usize },
    #[error("event {index} has no observed value")]
    FullyMissingEvent { index: usize },
    #[error("answer lengths differ: {left} vs {right}")]
    AnswerLengthMismatch { left: usize, right: usize },
    #[error("final edge embeddings have dimension {got}, expected 1")]
    EdgeDimensionNotScalar { got: usize },
    #[error("edge embedding rows {got} do not match edge count {expected}")]
    EdgeCountMismatch { got: usize, expected: usize },
}

/// One observation event: a timepoint and a real-or-missing value per
/// channel. Missing values are `None`, so arithmetic can never touch a
/// sentinel.
#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub time: f64,
    pub values: Vec<Option<f64>>,
}

impl Event {
    pub fn observed_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }
}

/// Irregularly sampled multivariate time series with missing values.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    pub events: Vec<Event>,
    pub channel_count: usize,
}

impl TimeSeries {
    /// Checks the structural invariants: consistent channel width,
    /// strictly increasing timepoints, at least one observation per event.
    pub fn validate(&self) -> Result<(), GraphError> {
        let mut prev = f64::NEG_INFINITY;
        for (i, ev) in self.events.iter().enumerate() {
            if ev.values.len() != self.channel_count {
                return Err(GraphError::EventWidthMismatch {
                    index: i,
                    got: ev.values.len(),
                    expected: self.channel_count,
                });
            }
            if ev.time <= prev {
                return Err(GraphError::NonIncreasingTimes { index: i });
            }
            if ev.observed_count() == 0 {
                return Err(GraphError::FullyMissingEvent { index: i });
            }
            prev = ev.time;
        }
        Ok(())
    }

    /// Number of non-missing observations.
    pub fn observed_count(&self) -> usize {
        self.events.iter().map(Event::observed_count).sum()
    }

    pub fn last_time(&self) -> Option<f64> {
        self.events.last().map(|e| e.time)
    }
}

/// One queried (timepoint, channel) pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryItem {
    pub time: f64,
    pub channel: usize,
}

/// The set of (timepoint, channel) pairs whose values are to be predicted.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastQuery {
    pub items: Vec<QueryItem>,
}

impl ForecastQuery {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// True when every query timepoint is after the series' last
    /// observation, which is what makes this a forecasting query.
    pub fn is_forecasting_for(&self, s: &TimeSeries) -> bool {
        match s.last_time() {
            Some(last) => self.items.iter().all(|q| q.time > last),
            None => false,
        }
    }
}

/// Predicted or ground-truth values, one per query item.
#[derive(Clone, Debug, PartialEq)]
pub struct Answer(pub Vec<f64>);

impl Answer {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// An edge between a time-or-query node and a channel node, with its
/// 2-dimensional feature `(value, target indicator)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeRec {
    /// Node id in the time/query range `C .. C+N+K'`.
    pub time_node: usize,
    /// Node id in the channel range `0 .. C` (equal to the channel index).
    pub channel_node: usize,
    /// First feature component: the observed value, or 0 for query edges.
    pub value: f64,
    /// Second feature component: 1 for observed edges, 0 for query edges.
    pub target_indicator: f64,
}

/// Bipartite sparsity structure graph for one time series query.
///
/// Immutable after construction.
#[derive(Clone, Debug)]
pub struct SparsityGraph {
    pub channel_count: usize,
    /// Observed timepoints, one per time node, in series order.
    pub times: Vec<f64>,
    /// Unique query timepoints, one per query node, in first appearance order.
    pub query_times: Vec<f64>,
    pub edges: Vec<EdgeRec>,
    /// For each node, its incident `(neighbor node, edge index)` pairs in
    /// ascending neighbor order.
    adjacency: Vec<Vec<(usize, usize)>>,
    /// For each query item, the index of its edge in `edges`.
    pub query_edge_index: Vec<usize>,
    /// The query items the graph was built for, in order.
    pub query_items: Vec<QueryItem>,
}

impl SparsityGraph {
    pub fn node_count(&self) -> usize {
        self.channel_count + self.times.len() + self.query_times.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_channel_node(&self, v: usize) -> bool {
        v < self.channel_count
    }

    pub fn is_query_node(&self, v: usize) -> bool {
        v >= self.channel_count + self.times.len() && v < self.node_count()
    }

    /// Timepoint feature of a time or query node.
    pub fn node_time(&self, v: usize) -> Option<f64> {
        let c = self.channel_count;
        if v < c || v >= self.node_count() {
            return None;
        }
        let i = v - c;
        if i < self.times.len() {
            Some(self.times[i])
        } else {
            Some(self.query_times[i - self.times.len()])
        }
    }

    /// Incident `(neighbor, edge index)` pairs of `u`, ascending by
    /// neighbor id. Empty for isolated nodes.
    pub fn neighborhood(&self, u: usize) -> &[(usize, usize)] {
        &self.adjacency[u]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.adjacency[u].len()
    }

    /// Reorders edge storage by `perm` (new position `i` holds old edge
    /// `perm[i]`), rebuilding adjacency and query indices. The graph it
    /// denotes is unchanged; this exists so tests can assert storage-order
    /// invariance of the model.
    pub fn permute_edges(&self, perm: &[usize]) -> SparsityGraph {
        assert_eq!(perm.len(), self.edges.len());
        let edges: Vec<EdgeRec> = perm.iter().map(|&i| self.edges[i]).collect();
        let mut inverse = vec![0usize; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let query_edge_index = self.query_edge_index.iter().map(|&e| inverse[e]).collect();
        let adjacency = build_adjacency(self.node_count(), &edges);
        SparsityGraph {
            channel_count: self.channel_count,
            times: self.times.clone(),
            query_times: self.query_times.clone(),
            edges,
            adjacency,
            query_edge_index,
            query_items: self.query_items.clone(),
        }
    }

    /// Shuffles each neighborhood list with the given ordering function.
    /// Model outputs must not depend on neighborhood order.
    pub fn with_shuffled_neighborhoods(
        &self,
        mut shuffle: impl FnMut(&mut Vec<(usize, usize)>),
    ) -> SparsityGraph {
        let mut g = self.clone();
        for adj in &mut g.adjacency {
            shuffle(adj);
        }
        g
    }
}

fn build_adjacency(node_count: usize, edges: &[EdgeRec]) -> Vec<Vec<(usize, usize)>> {
    let mut adjacency = vec![Vec::new(); node_count];
    for (i, e) in edges.iter().enumerate() {
        adjacency[e.channel_node].push((e.time_node, i));
        adjacency[e.time_node].push((e.channel_node, i));
    }
    for adj in &mut adjacency {
        adj.sort_by_key(|&(v, _)| v);
    }
    adjacency
}

/// Builds the sparsity structure graph of a time series query.
///
/// Query nodes are always fresh nodes, even when a query timepoint
/// coincides with an observed timepoint.
pub fn ts2graph(s: &TimeSeries, q: &ForecastQuery) -> Result<SparsityGraph, GraphError> {
    if s.events.is_empty() {
        return Err(GraphError::EmptySeries);
    }
    if q.items.is_empty() {
        return Err(GraphError::EmptyQuery);
    }
    s.validate()?;
    let c = s.channel_count;
    for item in &q.items {
        if item.channel >= c {
            return Err(GraphError::ChannelOutOfRange {
                channel: item.channel,
                channel_count: c,
            });
        }
    }

    let times: Vec<f64> = s.events.iter().map(|e| e.time).collect();
    let n = times.len();

    // unique query timepoints in first appearance order
    let mut query_times: Vec<f64> = Vec::new();
    for item in &q.items {
        if !query_times.iter().any(|&t| t == item.time) {
            query_times.push(item.time);
        }
    }

    let mut edges = Vec::with_capacity(s.observed_count() + q.items.len());
    for (i, ev) in s.events.iter().enumerate() {
        for (ch, v) in ev.values.iter().enumerate() {
            if let Some(x) = v {
                edges.push(EdgeRec {
                    time_node: c + i,
                    channel_node: ch,
                    value: *x,
                    target_indicator: 1.0,
                });
            }
        }
    }
    let mut query_edge_index = Vec::with_capacity(q.items.len());
    for item in &q.items {
        let k = query_times.iter().position(|&t| t == item.time).unwrap();
        let time_node = c + n + k;
        // duplicate (time, channel) items share one edge
        let existing = edges
            .iter()
            .position(|e| e.time_node == time_node && e.channel_node == item.channel);
        let idx = match existing {
            Some(i) => i,
            None => {
                edges.push(EdgeRec {
                    time_node,
                    channel_node: item.channel,
                    value: 0.0,
                    target_indicator: 0.0,
                });
                edges.len() - 1
            }
        };
        query_edge_index.push(idx);
    }

    let node_count = c + n + query_times.len();
    let adjacency = build_adjacency(node_count, &edges);
    Ok(SparsityGraph {
        channel_count: c,
        times,
        query_times,
        edges,
        adjacency,
        query_edge_index,
        query_items: q.items.clone(),
    })
}

/// Builds the graph of the observations alone, with no query nodes or
/// edges. This is what the no-query-edge ablation runs on.
pub fn observation_graph(s: &TimeSeries) -> Result<SparsityGraph, GraphError> {
    if s.events.is_empty() {
        return Err(GraphError::EmptySeries);
    }
    s.validate()?;
    let c = s.channel_count;
    let times: Vec<f64> = s.events.iter().map(|e| e.time).collect();
    let mut edges = Vec::with_capacity(s.observed_count());
    for (i, ev) in s.events.iter().enumerate() {
        for (ch, v) in ev.values.iter().enumerate() {
            if let Some(x) = v {
                edges.push(EdgeRec {
                    time_node: c + i,
                    channel_node: ch,
                    value: *x,
                    target_indicator: 1.0,
                });
            }
        }
    }
    let node_count = c + times.len();
    let adjacency = build_adjacency(node_count, &edges);
    Ok(SparsityGraph {
        channel_count: c,
        times,
        query_times: Vec::new(),
        edges,
        adjacency,
        query_edge_index: Vec::new(),
        query_items: Vec::new(),
    })
}

/// Reads the predicted answers off the final edge embeddings: the scalar
/// embedding of each query edge, in query order.
pub fn graph2ts(edge_embeddings: &Tensor, g: &SparsityGraph) -> Result<Answer, GraphError> {
    if edge_embeddings.cols() != 1 {
        return Err(GraphError::EdgeDimensionNotScalar {
            got: edge_embeddings.cols(),
        });
    }
    if edge_embeddings.rows() != g.edge_count() {
        return Err(GraphError::EdgeCountMismatch {
            got: edge_embeddings.rows(),
            expected: g.edge_count(),
        });
    }
    let values = g
        .query_edge_index
        .iter()
        .map(|&e| edge_embeddings.data()[e])
        .collect();
    Ok(Answer(values))
}

/// Mean squared error between two answers to the same query.
pub fn squared_error(y: &Answer, y2: &Answer) -> Result<f64, GraphError> {
    if y.len() != y2.len() {
        return Err(GraphError::AnswerLengthMismatch {
            left: y.len(),
            right: y2.len(),
        });
    }
    let k = y.len() as f64;
    Ok(y.0
        .iter()
        .zip(&y2.0)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked_example() -> (TimeSeries, ForecastQuery) {
        let s = TimeSeries {
            events: vec![
                Event {
                    time: 0.0,
                    values: vec![Some(1.0), None],
                },
                Event {
                    time: 0.5,
                    values: vec![Some(2.0), Some(3.0)],
                },
            ],
            channel_count: 2,
        };
        let q = ForecastQuery {
            items: vec![QueryItem {
                time: 1.0,
                channel: 0,
            }],
        };
        (s, q)
    }

    #[test]
    fn ts2graph_worked_example() {
        let (s, q) = worked_example();
        let g = ts2graph(&s, &q).unwrap();
        // channels {0,1}, times {2,3}, query {4}
        assert_eq!(g.channel_count, 2);
        assert_eq!(g.times, vec![0.0, 0.5]);
        assert_eq!(g.query_times, vec![1.0]);
        assert_eq!(g.edge_count(), 4);
        let expect = [
            (2, 0, 1.0, 1.0),
            (3, 0, 2.0, 1.0),
            (3, 1, 3.0, 1.0),
            (4, 0, 0.0, 0.0),
        ];
        for (e, (t, c, v, ind)) in g.edges.iter().zip(expect) {
            assert_eq!((e.time_node, e.channel_node), (t, c));
            assert_eq!((e.value, e.target_indicator), (v, ind));
        }
    }

    #[test]
    fn fully_observed_series_gives_complete_bipartite_graph() {
        let s = TimeSeries {
            events: (0..4)
                .map(|i| Event {
                    time: i as f64,
                    values: vec![Some(0.1), Some(0.2), Some(0.3)],
                })
                .collect(),
            channel_count: 3,
        };
        let q = ForecastQuery {
            items: vec![QueryItem {
                time: 9.0,
                channel: 0,
            }],
        };
        let g = ts2graph(&s, &q).unwrap();
        let observed = g.edges.iter().filter(|e| e.target_indicator == 1.0).count();
        assert_eq!(observed, 3 * 4);
    }

    #[test]
    fn duplicate_query_times_share_a_node_but_not_an_edge() {
        let (s, _) = worked_example();
        let q = ForecastQuery {
            items: vec![
                QueryItem {
                    time: 1.0,
                    channel: 0,
                },
                QueryItem {
                    time: 1.0,
                    channel: 1,
                },
            ],
        };
        let g = ts2graph(&s, &q).unwrap();
        assert_eq!(g.query_times.len(), 1); // K' = 1
        assert_eq!(g.query_edge_index.len(), 2); // K = 2
        let query_edges = g.edges.iter().filter(|e| e.target_indicator == 0.0).count();
        assert_eq!(query_edges, 2);
    }

    #[test]
    fn query_node_is_fresh_even_on_coincident_time() {
        let (s, _) = worked_example();
        let q = ForecastQuery {
            items: vec![QueryItem {
                time: 0.5,
                channel: 0,
            }],
        };
        let g = ts2graph(&s, &q).unwrap();
        // time node for 0.5 and query node for 0.5 are distinct
        assert_eq!(g.times.len(), 2);
        assert_eq!(g.query_times, vec![0.5]);
        assert_eq!(g.node_count(), 5);
    }

    #[test]
    fn neighborhoods_from_worked_example() {
        let (s, q) = worked_example();
        let g = ts2graph(&s, &q).unwrap();
        let n0: Vec<usize> = g.neighborhood(0).iter().map(|&(v, _)| v).collect();
        assert_eq!(n0, vec![2, 3, 4]);
        let n1: Vec<usize> = g.neighborhood(1).iter().map(|&(v, _)| v).collect();
        assert_eq!(n1, vec![3]);
    }

    #[test]
    fn unconnected_channel_has_empty_neighborhood() {
        let s = TimeSeries {
            events: vec![Event {
                time: 0.0,
                values: vec![Some(1.0), None],
            }],
            channel_count: 2,
        };
        let q = ForecastQuery {
            items: vec![QueryItem {
                time: 1.0,
                channel: 0,
            }],
        };
        let g = ts2graph(&s, &q).unwrap();
        assert!(g.neighborhood(1).is_empty());
    }

    #[test]
    fn graph2ts_reads_query_edges_only() {
        let (s, q) = worked_example();
        let g = ts2graph(&s, &q).unwrap();
        let emb = Tensor::matrix(4, 1, vec![9.0, 8.0, 7.0, 0.7]).unwrap();
        let ans = graph2ts(&emb, &g).unwrap();
        assert_eq!(ans.0, vec![0.7]);
        // changing observed-edge embeddings cannot change the answer
        let emb2 = Tensor::matrix(4, 1, vec![-1.0, -2.0, -3.0, 0.7]).unwrap();
        assert_eq!(graph2ts(&emb2, &g).unwrap().0, vec![0.7]);
    }

    #[test]
    fn graph2ts_duplicate_time_example() {
        let (s, _) = worked_example();
        let q = ForecastQuery {
            items: vec![
                QueryItem {
                    time: 1.0,
                    channel: 0,
                },
                QueryItem {
                    time: 1.0,
                    channel: 1,
                },
            ],
        };
        let g = ts2graph(&s, &q).unwrap();
        let emb = Tensor::matrix(5, 1, vec![0.0, 0.0, 0.0, 0.4, -0.9]).unwrap();
        let ans = graph2ts(&emb, &g).unwrap();
        assert_eq!(ans.0, vec![0.4, -0.9]);
    }

    #[test]
    fn graph2ts_rejects_wide_embeddings() {
        let (s, q) = worked_example();
        let g = ts2graph(&s, &q).unwrap();
        let emb = Tensor::matrix(4, 2, vec![0.0; 8]).unwrap();
        assert!(matches!(
            graph2ts(&emb, &g),
            Err(GraphError::EdgeDimensionNotScalar { got: 2 })
        ));
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let (s, q) = worked_example();
        let empty_s = TimeSeries {
            events: vec![],
            channel_count: 2,
        };
        assert!(matches!(ts2graph(&empty_s, &q), Err(GraphError::EmptySeries)));
        let empty_q = ForecastQuery { items: vec![] };
        assert!(matches!(ts2graph(&s, &empty_q), Err(GraphError::EmptyQuery)));
        let bad_q = ForecastQuery {
            items: vec![QueryItem {
                time: 1.0,
                channel: 5,
            }],
        };
        assert!(matches!(
            ts2graph(&s, &bad_q),
            Err(GraphError::ChannelOutOfRange { channel: 5, .. })
        ));
    }

    #[test]
    fn squared_error_examples() {
        let a = Answer(vec![1.0, 2.0, 3.0]);
        assert_eq!(squared_error(&a, &a).unwrap(), 0.0);
        let z = Answer(vec![0.0, 0.0]);
        let o = Answer(vec![1.0, 1.0]);
        assert_eq!(squared_error(&z, &o).unwrap(), 1.0);
        let b = Answer(vec![1.0, 1.0, 1.0]);
        assert!((squared_error(&a, &b).unwrap() - 5.0 / 3.0).abs() < 1e-15);
        assert!(squared_error(&a, &z).is_err());
    }

    #[test]
    fn adding_a_missing_slot_changes_nothing() {
        let (s, q) = worked_example();
        let g1 = ts2graph(&s, &q).unwrap();
        // widen every event by one never-observed channel
        let mut s2 = s.clone();
        s2.channel_count = 3;
        for ev in &mut s2.events {
            ev.values.push(None);
        }
        let g2 = ts2graph(&s2, &q).unwrap();
        assert_eq!(g1.times, g2.times);
        assert_eq!(g1.edge_count(), g2.edge_count());
        // same edges, channel node ids unchanged, time node ids shifted by one
        for (e1, e2) in g1.edges.iter().zip(&g2.edges) {
            assert_eq!(e1.channel_node, e2.channel_node);
            assert_eq!(e1.time_node + 1, e2.time_node);
            assert_eq!(e1.value, e2.value);
        }
    }
}
