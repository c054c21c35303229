//! Single-instance forward pass over exact-size neighborhoods.
//!
//! Layer semantics are synchronous: node updates for all nodes read the
//! layer-l states, and the edge update also reads the layer-l node
//! embeddings, so the new node matrix is applied only after both updates
//! are formed. Isolated nodes skip the attention block and carry their
//! embedding through unchanged.

use crate::graph::{
    graph2ts, observation_graph, ts2graph, Answer, ForecastQuery, SparsityGraph, TimeSeries,
};
use crate::model::{GnnLayerParams, HeadParams, ModelConfig, ModelError, ModelParams};
use crate::numerics::{affine, mab, AffineParams, Tape, Tensor};

/// Initial node and edge embeddings.
///
/// Channel nodes embed their one-hot id through a dense layer; time and
/// query nodes embed their timepoint through a learned sinusoidal
/// encoding; edges embed their `(value, indicator)` feature pair.
pub fn initial_embed(
    tape: &Tape,
    g: &SparsityGraph,
    p: &ModelParams,
) -> Result<(Tensor, Tensor), ModelError> {
    let c = g.channel_count;
    let onehot = Tensor::identity(c);
    let h_channels = affine(tape, &p.channel_embed, &onehot)?;

    let mut times: Vec<f64> = g.times.clone();
    times.extend_from_slice(&g.query_times);
    let t_col = Tensor::matrix(times.len(), 1, times)?;
    let h_times = tape.sin(&affine(tape, &p.time_embed, &t_col)?)?;

    let h_nodes = tape.concat_rows(&[&h_channels, &h_times])?;

    let mut feats = Vec::with_capacity(g.edge_count() * 2);
    for e in &g.edges {
        feats.push(e.value);
        feats.push(e.target_indicator);
    }
    let f_edge = Tensor::matrix(g.edge_count(), 2, feats)?;
    let h_edges = affine(tape, &p.edge_embed, &f_edge)?;
    Ok((h_nodes, h_edges))
}

fn node_update(
    tape: &Tape,
    g: &SparsityGraph,
    h_nodes: &Tensor,
    h_edges: &Tensor,
    layer: &GnnLayerParams,
) -> Result<Tensor, ModelError> {
    let mut rows: Vec<Tensor> = Vec::with_capacity(g.node_count());
    for u in 0..g.node_count() {
        let nbrs = g.neighborhood(u);
        if nbrs.is_empty() {
            // isolated node: identity carry-through
            rows.push(tape.gather_rows(h_nodes, &[u])?);
            continue;
        }
        let (vs, es): (Vec<usize>, Vec<usize>) = nbrs.iter().copied().unzip();
        let nbr_h = tape.gather_rows(h_nodes, &vs)?;
        let nbr_e = tape.gather_rows(h_edges, &es)?;
        let keys = tape.concat_cols(&[&nbr_h, &nbr_e])?;
        let query = tape.gather_rows(h_nodes, &[u])?;
        let mask = vec![true; nbrs.len()];
        rows.push(mab(tape, &layer.mab, &query, &keys, &keys, &mask)?);
    }
    let refs: Vec<&Tensor> = rows.iter().collect();
    Ok(tape.concat_rows(&refs)?)
}

/// Edge update: dense layer over channel ‖ time ‖ edge embeddings. Inner
/// layers add the residual and the activation; the scalar head is a plain
/// linear map so predictions can take any sign.
pub fn edge_update(
    tape: &Tape,
    g: &SparsityGraph,
    h_nodes: &Tensor,
    h_edges: &Tensor,
    ff: &AffineParams,
    is_head: bool,
) -> Result<Tensor, ModelError> {
    let ch_idx: Vec<usize> = g.edges.iter().map(|e| e.channel_node).collect();
    let tq_idx: Vec<usize> = g.edges.iter().map(|e| e.time_node).collect();
    let h_ch = tape.gather_rows(h_nodes, &ch_idx)?;
    let h_tq = tape.gather_rows(h_nodes, &tq_idx)?;
    let cat = tape.concat_cols(&[&h_ch, &h_tq, h_edges])?;
    let z = affine(tape, ff, &cat)?;
    if is_head {
        Ok(z)
    } else {
        Ok(tape.relu(&tape.add(h_edges, &z)?)?)
    }
}

/// One full GNN layer: attention node update, then residual edge update,
/// both reading the incoming states.
pub fn gnn_layer(
    tape: &Tape,
    g: &SparsityGraph,
    h_nodes: &Tensor,
    h_edges: &Tensor,
    layer: &GnnLayerParams,
) -> Result<(Tensor, Tensor), ModelError> {
    let new_nodes = node_update(tape, g, h_nodes, h_edges, layer)?;
    let new_edges = edge_update(tape, g, h_nodes, h_edges, &layer.edge_ff, false)?;
    Ok((new_nodes, new_edges))
}

/// Full pass over an already-built graph, returning the final scalar edge
/// embeddings as an `[|E| × 1]` tensor (differentiable when `p` is
/// watched on `tape`).
pub fn forward_graph(
    tape: &Tape,
    g: &SparsityGraph,
    p: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Tensor, ModelError> {
    cfg.validate()?;
    let (mut h_nodes, mut h_edges) = initial_embed(tape, g, p)?;
    for layer in &p.layers {
        (h_nodes, h_edges) = gnn_layer(tape, g, &h_nodes, &h_edges, layer)?;
    }
    let HeadParams::EdgeScalar(ff) = &p.head else {
        return Err(ModelError::InvalidConfig(
            "edge-scalar head required for the standard forward".into(),
        ));
    };
    edge_update(tape, g, &h_nodes, &h_edges, ff, true)
}

/// Forecast for one time series query: encode, run the layers, decode.
pub fn forward(
    s: &TimeSeries,
    q: &ForecastQuery,
    p: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Answer, ModelError> {
    let g = ts2graph(s, q)?;
    let tape = Tape::new();
    let scalar_edges = forward_graph(&tape, &g, p, cfg)?;
    Ok(graph2ts(&scalar_edges, &g)?)
}

/// Ablation forward without query edges: the graph holds observations
/// only, and each query is answered by a dense readout over the channel
/// embedding concatenated with the sinusoidal encoding of the query time.
pub fn forward_no_target(
    s: &TimeSeries,
    q: &ForecastQuery,
    p: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Answer, ModelError> {
    cfg.validate()?;
    if !cfg.ablation_no_target_edges {
        return Err(ModelError::NotAblationConfig);
    }
    let g = observation_graph(s)?;
    let tape = Tape::new();
    let out = forward_no_target_graph(&tape, &g, q, p)?;
    Ok(Answer(out.data().to_vec()))
}

/// Graph-level ablation forward, exposed so training can watch parameters
/// on the tape.
pub fn forward_no_target_graph(
    tape: &Tape,
    g: &SparsityGraph,
    q: &ForecastQuery,
    p: &ModelParams,
) -> Result<Tensor, ModelError> {
    let HeadParams::QueryReadout(readout) = &p.head else {
        return Err(ModelError::NotAblationConfig);
    };
    let (mut h_nodes, mut h_edges) = initial_embed(tape, g, p)?;
    for layer in &p.layers {
        (h_nodes, h_edges) = gnn_layer(tape, g, &h_nodes, &h_edges, layer)?;
    }
    let channels: Vec<usize> = q.items.iter().map(|item| item.channel).collect();
    let h_ch = tape.gather_rows(&h_nodes, &channels)?;
    let qt: Vec<f64> = q.items.iter().map(|item| item.time).collect();
    let t_col = Tensor::matrix(qt.len(), 1, qt)?;
    let t_enc = tape.sin(&affine(tape, &p.time_embed, &t_col)?)?;
    let cat = tape.concat_cols(&[&h_ch, &t_enc])?;
    Ok(affine(tape, readout, &cat)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{squared_error, Event, QueryItem};
    use crate::numerics::{finite_difference_gradient, max_rel_error};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(c: usize, l: usize, heads: usize, d: usize) -> ModelConfig {
        ModelConfig {
            layer_count: l,
            head_count: heads,
            hidden_dim: d,
            channel_count: c,
            ablation_no_target_edges: false,
        }
    }

    fn random_instance(rng: &mut ChaCha8Rng, c: usize) -> (TimeSeries, ForecastQuery) {
        let n = rng.gen_range(2..5);
        let mut t = 0.0;
        let events = (0..n)
            .map(|_| {
                t += rng.gen_range(0.2..1.0);
                let mut values: Vec<Option<f64>> = (0..c)
                    .map(|_| rng.gen_bool(0.6).then(|| rng.gen_range(-1.0..1.0)))
                    .collect();
                if values.iter().all(Option::is_none) {
                    values[rng.gen_range(0..c)] = Some(rng.gen_range(-1.0..1.0));
                }
                Event { time: t, values }
            })
            .collect();
        let items = (0..rng.gen_range(1..4))
            .map(|_| QueryItem {
                time: t + rng.gen_range(0.1..1.0),
                channel: rng.gen_range(0..c),
            })
            .collect();
        (
            TimeSeries {
                events,
                channel_count: c,
            },
            ForecastQuery { items },
        )
    }

    fn get_flat(p: &ModelParams) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, t) in p.named_tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    fn set_flat(p: &mut ModelParams, x: &[f64]) {
        let mut off = 0;
        for (_, t) in p.named_tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&x[off..off + n]);
            off += n;
        }
    }

    #[test]
    fn coincident_time_and_query_nodes_share_initial_embeddings() {
        let s = TimeSeries {
            events: vec![
                Event {
                    time: 1.0,
                    values: vec![Some(0.5)],
                },
                Event {
                    time: 2.0,
                    values: vec![Some(0.3)],
                },
            ],
            channel_count: 1,
        };
        let q = ForecastQuery {
            items: vec![QueryItem {
                time: 2.0,
                channel: 0,
            }],
        };
        let g = ts2graph(&s, &q).unwrap();
        let c = cfg(1, 1, 1, 4);
        let p = ModelParams::init(&c, 0).unwrap();
        let tape = Tape::new();
        let (h_nodes, _) = initial_embed(&tape, &g, &p).unwrap();
        let d = c.hidden_dim;
        // node 2 is the observed time 2.0, node 3 the query node at 2.0
        let row2 = &h_nodes.data()[2 * d..3 * d];
        let row3 = &h_nodes.data()[3 * d..4 * d];
        assert_eq!(row2, row3);
    }

    #[test]
    fn query_edge_embedding_is_the_edge_affine_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (s, q) = random_instance(&mut rng, 2);
        let g = ts2graph(&s, &q).unwrap();
        let c = cfg(2, 1, 1, 4);
        let p = ModelParams::init(&c, 1).unwrap();
        let tape = Tape::new();
        let (_, h_edges) = initial_embed(&tape, &g, &p).unwrap();
        let d = c.hidden_dim;
        let e = g.query_edge_index[0];
        assert_eq!(&h_edges.data()[e * d..(e + 1) * d], p.edge_embed.bias.data());
    }

    #[test]
    fn zero_time_weights_collapse_all_time_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (s, q) = random_instance(&mut rng, 2);
        let g = ts2graph(&s, &q).unwrap();
        let c = cfg(2, 1, 1, 4);
        let mut p = ModelParams::init(&c, 1).unwrap();
        for w in p.time_embed.weight.data_mut() {
            *w = 0.0;
        }
        let tape = Tape::new();
        let (h_nodes, _) = initial_embed(&tape, &g, &p).unwrap();
        let d = c.hidden_dim;
        let expected: Vec<f64> = p.time_embed.bias.data().iter().map(|b| b.sin()).collect();
        for v in 2..g.node_count() {
            assert_eq!(&h_nodes.data()[v * d..(v + 1) * d], expected.as_slice());
        }
    }

    #[test]
    fn single_edge_graph_has_the_expected_degrees_and_forecast_shape() {
        let s = TimeSeries {
            events: vec![Event {
                time: 1.0,
                values: vec![Some(0.7)],
            }],
            channel_count: 1,
        };
        let q = ForecastQuery {
            items: vec![QueryItem {
                time: 2.0,
                channel: 0,
            }],
        };
        let g = ts2graph(&s, &q).unwrap();
        assert_eq!(g.degree(0), 2);
        assert_eq!(g.degree(1), 1);
        assert_eq!(g.degree(2), 1);
        let c = cfg(1, 2, 1, 4);
        let p = ModelParams::init(&c, 2).unwrap();
        let ans = forward(&s, &q, &p, &c).unwrap();
        assert_eq!(ans.len(), 1);
        assert!(ans.0[0].is_finite());
    }

    #[test]
    fn edge_storage_order_does_not_change_answers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = cfg(3, 2, 2, 8);
        let p = ModelParams::init(&c, 4).unwrap();
        for _ in 0..5 {
            let (s, q) = random_instance(&mut rng, 3);
            let g = ts2graph(&s, &q).unwrap();
            let mut perm: Vec<usize> = (0..g.edge_count()).collect();
            perm.shuffle(&mut rng);
            let g2 = g.permute_edges(&perm);
            let tape = Tape::new();
            let a = graph2ts(&forward_graph(&tape, &g, &p, &c).unwrap(), &g).unwrap();
            let b = graph2ts(&forward_graph(&tape, &g2, &p, &c).unwrap(), &g2).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn neighborhood_order_does_not_change_answers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = cfg(3, 3, 1, 8);
        let p = ModelParams::init(&c, 6).unwrap();
        for _ in 0..5 {
            let (s, q) = random_instance(&mut rng, 3);
            let g = ts2graph(&s, &q).unwrap();
            let g2 = g.with_shuffled_neighborhoods(|adj| adj.reverse());
            let tape = Tape::new();
            let a = graph2ts(&forward_graph(&tape, &g, &p, &c).unwrap(), &g).unwrap();
            let b = graph2ts(&forward_graph(&tape, &g2, &p, &c).unwrap(), &g2).unwrap();
            for (x, y) in a.0.iter().zip(&b.0) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (s, q) = random_instance(&mut rng, 3);
        let g = ts2graph(&s, &q).unwrap();
        let c = cfg(3, 2, 2, 4);
        let p = ModelParams::init(&c, 8).unwrap();
        let d = c.hidden_dim;
        let h_nodes = Tensor::matrix(
            g.node_count(),
            d,
            (0..g.node_count() * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let h_edges = Tensor::matrix(
            g.edge_count(),
            d,
            (0..g.edge_count() * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();

        let layer = &p.layers[0];
        let tape = Tape::new();
        let watched = GnnLayerParams {
            mab: layer.mab.watch(&tape),
            edge_ff: layer.edge_ff.watch(&tape),
        };
        let (nn, ne) = gnn_layer(&tape, &g, &h_nodes, &h_edges, &watched).unwrap();
        let loss = tape
            .add(&tape.sum(&nn).unwrap(), &tape.sum(&ne).unwrap())
            .unwrap();
        let grads = tape.backward(&loss).unwrap();
        let tracked = [
            &watched.mab.mha.wq,
            &watched.mab.mha.wk,
            &watched.mab.mha.wv,
            &watched.mab.mha.wo,
            &watched.mab.ff.weight,
            &watched.mab.ff.bias,
            &watched.edge_ff.weight,
            &watched.edge_ff.bias,
        ];
        let mut analytic = Vec::new();
        for t in tracked {
            analytic.extend_from_slice(grads.get(t).unwrap());
        }

        let mut flat = Vec::new();
        for t in tracked {
            flat.extend_from_slice(t.data());
        }
        let numeric = finite_difference_gradient(
            |x| {
                let mut layer = p.layers[0].clone();
                let mut off = 0;
                for t in [
                    &mut layer.mab.mha.wq,
                    &mut layer.mab.mha.wk,
                    &mut layer.mab.mha.wv,
                    &mut layer.mab.mha.wo,
                    &mut layer.mab.ff.weight,
                    &mut layer.mab.ff.bias,
                    &mut layer.edge_ff.weight,
                    &mut layer.edge_ff.bias,
                ] {
                    let n = t.len();
                    t.data_mut().copy_from_slice(&x[off..off + n]);
                    off += n;
                }
                let tape = Tape::new();
                let (nn, ne) = gnn_layer(&tape, &g, &h_nodes, &h_edges, &layer).unwrap();
                nn.data().iter().sum::<f64>() + ne.data().iter().sum::<f64>()
            },
            &flat,
            1e-5,
        );
        let err = max_rel_error(&analytic, &numeric);
        assert!(err < 1e-4, "layer gradient error {err}");
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for case in 0..5 {
            let c = cfg(3, 1 + case % 3, [1, 2][case % 2], 4);
            let (s, q) = random_instance(&mut rng, 3);
            let g = ts2graph(&s, &q).unwrap();
            let p = ModelParams::init(&c, 10 + case as u64).unwrap();
            let target: Vec<f64> = (0..q.items.len())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let target_t = Tensor::matrix(target.len(), 1, target.clone()).unwrap();

            let tape = Tape::new();
            let watched = p.watch(&tape);
            let scalar_edges = forward_graph(&tape, &g, &watched, &c).unwrap();
            let preds = tape
                .gather_rows(&scalar_edges, &g.query_edge_index)
                .unwrap();
            let diff = tape.sub(&preds, &target_t).unwrap();
            let sq = tape.mul(&diff, &diff).unwrap();
            let loss = tape
                .scale(&tape.sum(&sq).unwrap(), 1.0 / target.len() as f64)
                .unwrap();
            let grads = tape.backward(&loss).unwrap();
            let mut analytic = Vec::new();
            for (_, t) in watched.named_tensors() {
                match grads.get(t) {
                    Some(gr) => analytic.extend_from_slice(gr),
                    None => analytic.extend(std::iter::repeat(0.0).take(t.len())),
                }
            }

            let flat = get_flat(&p);
            let target_answer = Answer(target.clone());
            let numeric = finite_difference_gradient(
                |x| {
                    let mut px = p.clone();
                    set_flat(&mut px, x);
                    let ans = forward(&s, &q, &px, &c).unwrap();
                    squared_error(&ans, &target_answer).unwrap()
                },
                &flat,
                1e-5,
            );
            let err = max_rel_error(&analytic, &numeric);
            assert!(err < 1e-4, "case {case}: end-to-end gradient error {err}");
        }
    }

    #[test]
    fn query_order_permutes_the_answer_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = cfg(3, 2, 2, 8);
        let p = ModelParams::init(&c, 12).unwrap();
        for _ in 0..5 {
            let (s, mut q) = random_instance(&mut rng, 3);
            let base = forward(&s, &q, &p, &c).unwrap();
            let mut perm: Vec<usize> = (0..q.items.len()).collect();
            perm.shuffle(&mut rng);
            let items = perm.iter().map(|&i| q.items[i]).collect();
            q = ForecastQuery { items };
            let permuted = forward(&s, &q, &p, &c).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                assert!(
                    (permuted.0[k] - base.0[i]).abs() < 1e-9,
                    "query order changed a prediction"
                );
            }
        }
    }

    #[test]
    fn unobserved_channel_is_carried_through() {
        let s = TimeSeries {
            events: vec![
                Event {
                    time: 0.5,
                    values: vec![Some(0.2), Some(-0.1), None],
                },
                Event {
                    time: 1.5,
                    values: vec![Some(0.4), None, None],
                },
            ],
            channel_count: 3,
        };
        let q = ForecastQuery {
            items: vec![QueryItem {
                time: 2.0,
                channel: 0,
            }],
        };
        let g = ts2graph(&s, &q).unwrap();
        assert_eq!(g.degree(2), 0);
        let c = cfg(3, 2, 1, 4);
        let p = ModelParams::init(&c, 13).unwrap();
        let ans = forward(&s, &q, &p, &c).unwrap();
        assert!(ans.0[0].is_finite());
    }

    #[test]
    fn perturbing_a_query_time_changes_the_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let c = cfg(3, 2, 1, 8);
        let p = ModelParams::init(&c, 16).unwrap();
        let (s, q) = random_instance(&mut rng, 3);
        let base = forward(&s, &q, &p, &c).unwrap();
        let mut q2 = q.clone();
        q2.items[0].time += 0.25;
        let shifted = forward(&s, &q2, &p, &c).unwrap();
        assert_ne!(base.0[0], shifted.0[0]);
    }

    #[test]
    fn ablation_runs_without_query_nodes_and_repeats_identical_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (s, mut q) = random_instance(&mut rng, 3);
        q.items = vec![q.items[0], q.items[0]];
        let g = observation_graph(&s).unwrap();
        assert_eq!(g.node_count(), 3 + s.events.len());
        let c = ModelConfig {
            ablation_no_target_edges: true,
            ..cfg(3, 2, 1, 8)
        };
        let p = ModelParams::init(&c, 18).unwrap();
        let ans = forward_no_target(&s, &q, &p, &c).unwrap();
        assert_eq!(ans.len(), 2);
        assert_eq!(ans.0[0], ans.0[1]);

        let standard = cfg(3, 2, 1, 8);
        let ps = ModelParams::init(&standard, 18).unwrap();
        assert!(matches!(
            forward_no_target(&s, &q, &ps, &standard),
            Err(ModelError::NotAblationConfig)
        ));
    }
}
