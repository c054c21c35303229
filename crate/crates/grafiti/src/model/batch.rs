//! Batched execution over padded, masked neighborhood groups.
//!
//! A batch is the disjoint union of the instance graphs: node and edge
//! matrices are stacked with per-instance offsets, and nodes are grouped
//! into buckets by padded degree (next power of two). Within a bucket
//! every node carries `pad` key slots; slots beyond the true degree point
//! at a dummy row and are masked out of the softmax exactly, so batched
//! outputs agree with per-instance execution to the last bit. Padded
//! entries sit after the real neighbors, which keeps per-row summation
//! order identical to the single-instance route.

use crate::graph::SparsityGraph;
use crate::model::{GnnLayerParams, HeadParams, ModelConfig, ModelError, ModelParams};
use crate::numerics::{affine, mab_grouped, Tape, Tensor};

/// One padded degree class: all nodes whose neighborhoods fit in `pad`
/// key slots (and did not fit in the next smaller class).
struct Bucket {
    pad: usize,
    /// Global node ids, ascending.
    nodes: Vec<usize>,
    /// `nodes.len() · pad` neighbor node ids (dummy 0 in padded slots).
    nbr_nodes: Vec<usize>,
    /// `nodes.len() · pad` incident edge ids (dummy 0 in padded slots).
    nbr_edges: Vec<usize>,
    mask: Vec<bool>,
}

/// Index structures for running a batch of sparsity graphs as one
/// disjoint-union graph.
pub struct BatchGraph {
    channel_count: usize,
    /// Rows of the stacked channel one-hot block, one per channel node.
    onehot: Tensor,
    /// Stacked time/query node timepoints.
    times: Tensor,
    /// Global node id → row in `[channel block ; time block]`.
    node_perm: Vec<usize>,
    /// Stacked edge features.
    edge_feats: Tensor,
    edge_channel_idx: Vec<usize>,
    edge_time_idx: Vec<usize>,
    buckets: Vec<Bucket>,
    /// Global node id → row in `[bucket outputs… ; previous node matrix]`.
    assemble_perm: Vec<usize>,
    /// Global edge ids of the query edges, instance-major, query order.
    query_rows: Vec<usize>,
    /// Per-instance `(start, len)` ranges into the prediction rows.
    query_ranges: Vec<(usize, usize)>,
    /// Ablation readout inputs: per query, the global channel node id and
    /// the query time.
    readout_channels: Vec<usize>,
    readout_times: Vec<f64>,
}

fn padded(deg: usize) -> usize {
    deg.next_power_of_two()
}

impl BatchGraph {
    /// Batch for the standard model: graphs built with query edges.
    pub fn new(graphs: &[&SparsityGraph]) -> Result<Self, ModelError> {
        Self::build(graphs, None)
    }

    /// Batch for the ablation: observation-only graphs plus the queries
    /// answered through the readout head.
    pub fn new_ablation(
        graphs: &[&SparsityGraph],
        queries: &[&crate::graph::ForecastQuery],
    ) -> Result<Self, ModelError> {
        if graphs.len() != queries.len() {
            return Err(ModelError::InvalidConfig(
                "graph and query counts differ".into(),
            ));
        }
        Self::build(graphs, Some(queries))
    }

    fn build(
        graphs: &[&SparsityGraph],
        queries: Option<&[&crate::graph::ForecastQuery]>,
    ) -> Result<Self, ModelError> {
        let Some(first) = graphs.first() else {
            return Err(ModelError::InvalidConfig("empty batch".into()));
        };
        let channel_count = first.channel_count;
        if graphs.iter().any(|g| g.channel_count != channel_count) {
            return Err(ModelError::InvalidConfig(
                "batch mixes channel counts".into(),
            ));
        }

        let mut node_offset = Vec::with_capacity(graphs.len());
        let mut edge_offset = Vec::with_capacity(graphs.len());
        let (mut nodes, mut edges) = (0usize, 0usize);
        for g in graphs {
            node_offset.push(nodes);
            edge_offset.push(edges);
            nodes += g.node_count();
            edges += g.edge_count();
        }

        let mut onehot = Vec::new();
        let mut times = Vec::new();
        let mut node_perm = vec![0usize; nodes];
        let mut ch_rows = 0usize;
        // first pass: channel block rows
        for (gi, _) in graphs.iter().enumerate() {
            for c in 0..channel_count {
                let mut row = vec![0.0; channel_count];
                row[c] = 1.0;
                onehot.extend_from_slice(&row);
                node_perm[node_offset[gi] + c] = ch_rows;
                ch_rows += 1;
            }
        }
        // second pass: time/query block rows
        let mut t_rows = 0usize;
        for (gi, g) in graphs.iter().enumerate() {
            for (i, &t) in g.times.iter().chain(g.query_times.iter()).enumerate() {
                times.push(t);
                node_perm[node_offset[gi] + channel_count + i] = ch_rows + t_rows;
                t_rows += 1;
            }
        }

        let mut edge_feats = Vec::with_capacity(edges * 2);
        let mut edge_channel_idx = Vec::with_capacity(edges);
        let mut edge_time_idx = Vec::with_capacity(edges);
        for (gi, g) in graphs.iter().enumerate() {
            for e in &g.edges {
                edge_feats.push(e.value);
                edge_feats.push(e.target_indicator);
                edge_channel_idx.push(node_offset[gi] + e.channel_node);
                edge_time_idx.push(node_offset[gi] + e.time_node);
            }
        }

        // degree buckets over all non-isolated nodes
        let mut by_pad: std::collections::BTreeMap<usize, Vec<(usize, usize)>> =
            std::collections::BTreeMap::new();
        for (gi, g) in graphs.iter().enumerate() {
            for u in 0..g.node_count() {
                let deg = g.degree(u);
                if deg > 0 {
                    by_pad
                        .entry(padded(deg))
                        .or_default()
                        .push((node_offset[gi] + u, gi));
                }
            }
        }
        let mut buckets = Vec::with_capacity(by_pad.len());
        let mut assemble_perm = vec![usize::MAX; nodes];
        let mut assembled = 0usize;
        for (pad, members) in by_pad {
            let mut bucket = Bucket {
                pad,
                nodes: Vec::with_capacity(members.len()),
                nbr_nodes: Vec::with_capacity(members.len() * pad),
                nbr_edges: Vec::with_capacity(members.len() * pad),
                mask: Vec::with_capacity(members.len() * pad),
            };
            for (global_u, gi) in members {
                let g = graphs[gi];
                let local_u = global_u - node_offset[gi];
                bucket.nodes.push(global_u);
                let nbrs = g.neighborhood(local_u);
                for &(v, e) in nbrs {
                    bucket.nbr_nodes.push(node_offset[gi] + v);
                    bucket.nbr_edges.push(edge_offset[gi] + e);
                    bucket.mask.push(true);
                }
                for _ in nbrs.len()..pad {
                    bucket.nbr_nodes.push(0);
                    bucket.nbr_edges.push(0);
                    bucket.mask.push(false);
                }
                assemble_perm[global_u] = assembled;
                assembled += 1;
            }
            buckets.push(bucket);
        }
        // isolated nodes read their previous embedding
        for u in 0..nodes {
            if assemble_perm[u] == usize::MAX {
                assemble_perm[u] = assembled + u;
            }
        }

        let mut query_rows = Vec::new();
        let mut query_ranges = Vec::with_capacity(graphs.len());
        let mut readout_channels = Vec::new();
        let mut readout_times = Vec::new();
        match queries {
            None => {
                for (gi, g) in graphs.iter().enumerate() {
                    let start = query_rows.len();
                    for &e in &g.query_edge_index {
                        query_rows.push(edge_offset[gi] + e);
                    }
                    query_ranges.push((start, g.query_edge_index.len()));
                }
            }
            Some(queries) => {
                for (gi, q) in queries.iter().enumerate() {
                    let start = readout_times.len();
                    for item in &q.items {
                        readout_channels.push(node_offset[gi] + item.channel);
                        readout_times.push(item.time);
                    }
                    query_ranges.push((start, q.items.len()));
                }
            }
        }

        Ok(BatchGraph {
            channel_count,
            onehot: Tensor::matrix(ch_rows, channel_count, onehot)?,
            times: Tensor::matrix(t_rows, 1, times)?,
            node_perm,
            edge_feats: Tensor::matrix(edges, 2, edge_feats)?,
            edge_channel_idx,
            edge_time_idx,
            buckets,
            assemble_perm,
            query_rows,
            query_ranges,
            readout_channels,
            readout_times,
        })
    }

    /// Per-instance `(start, len)` ranges into the prediction rows.
    pub fn query_ranges(&self) -> &[(usize, usize)] {
        &self.query_ranges
    }

    pub fn total_queries(&self) -> usize {
        self.query_ranges.iter().map(|&(_, len)| len).sum()
    }

    fn initial_embed(
        &self,
        tape: &Tape,
        p: &ModelParams,
    ) -> Result<(Tensor, Tensor), ModelError> {
        let h_ch = affine(tape, &p.channel_embed, &self.onehot)?;
        let h_t = tape.sin(&affine(tape, &p.time_embed, &self.times)?)?;
        let stacked = tape.concat_rows(&[&h_ch, &h_t])?;
        let h_nodes = tape.gather_rows(&stacked, &self.node_perm)?;
        let h_edges = affine(tape, &p.edge_embed, &self.edge_feats)?;
        Ok((h_nodes, h_edges))
    }

    fn node_update(
        &self,
        tape: &Tape,
        h_nodes: &Tensor,
        h_edges: &Tensor,
        layer: &GnnLayerParams,
    ) -> Result<Tensor, ModelError> {
        let mut outs = Vec::with_capacity(self.buckets.len() + 1);
        for b in &self.buckets {
            let nbr_h = tape.gather_rows(h_nodes, &b.nbr_nodes)?;
            let nbr_e = tape.gather_rows(h_edges, &b.nbr_edges)?;
            let keys = tape.concat_cols(&[&nbr_h, &nbr_e])?;
            let queries = tape.gather_rows(h_nodes, &b.nodes)?;
            outs.push(mab_grouped(
                tape, &layer.mab, &queries, &keys, &keys, b.pad, &b.mask,
            )?);
        }
        let mut refs: Vec<&Tensor> = outs.iter().collect();
        refs.push(h_nodes);
        let stacked = tape.concat_rows(&refs)?;
        Ok(tape.gather_rows(&stacked, &self.assemble_perm)?)
    }

    fn edge_update(
        &self,
        tape: &Tape,
        h_nodes: &Tensor,
        h_edges: &Tensor,
        ff: &crate::numerics::AffineParams,
        is_head: bool,
    ) -> Result<Tensor, ModelError> {
        let h_ch = tape.gather_rows(h_nodes, &self.edge_channel_idx)?;
        let h_tq = tape.gather_rows(h_nodes, &self.edge_time_idx)?;
        let cat = tape.concat_cols(&[&h_ch, &h_tq, h_edges])?;
        let z = affine(tape, ff, &cat)?;
        if is_head {
            Ok(z)
        } else {
            Ok(tape.relu(&tape.add(h_edges, &z)?)?)
        }
    }
}

/// Batched forward pass. Returns the stacked query predictions, one row
/// per query item, instance-major; slice them with
/// [`BatchGraph::query_ranges`].
pub fn forward_batch(
    tape: &Tape,
    bg: &BatchGraph,
    p: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Tensor, ModelError> {
    cfg.validate()?;
    if cfg.channel_count != bg.channel_count {
        return Err(ModelError::InvalidConfig(format!(
            "config has {} channels, batch has {}",
            cfg.channel_count, bg.channel_count
        )));
    }
    let (mut h_nodes, mut h_edges) = bg.initial_embed(tape, p)?;
    for layer in &p.layers {
        let new_nodes = bg.node_update(tape, &h_nodes, &h_edges, layer)?;
        let new_edges = bg.edge_update(tape, &h_nodes, &h_edges, &layer.edge_ff, false)?;
        h_nodes = new_nodes;
        h_edges = new_edges;
    }
    match &p.head {
        HeadParams::EdgeScalar(ff) => {
            let scalar_edges = bg.edge_update(tape, &h_nodes, &h_edges, ff, true)?;
            Ok(tape.gather_rows(&scalar_edges, &bg.query_rows)?)
        }
        HeadParams::QueryReadout(readout) => {
            let h_ch = tape.gather_rows(&h_nodes, &bg.readout_channels)?;
            let t_col = Tensor::matrix(bg.readout_times.len(), 1, bg.readout_times.clone())?;
            let t_enc = tape.sin(&affine(tape, &p.time_embed, &t_col)?)?;
            let cat = tape.concat_cols(&[&h_ch, &t_enc])?;
            Ok(affine(tape, readout, &cat)?)
        }
    }
}
