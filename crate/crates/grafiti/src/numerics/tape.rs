//! Tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable primitive is a method on [`Tape`]. An operation
//! whose inputs are all constants (no tape node) evaluates eagerly and
//! returns a constant; as soon as one input is tracked, the op records a
//! node holding a backward closure. [`Tape::backward`] replays the nodes
//! in reverse creation order, which is a valid reverse topological order
//! because the tape is append-only.

use std::cell::RefCell;
use std::rc::Rc;

use crate::numerics::tensor::Tensor;
use crate::numerics::NumericsError;

/// Backward closure: maps the gradient of the node's output to one
/// gradient buffer per parent, in parent order.
type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Node {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
}

/// Records primitive operations for a single backward pass.
///
/// A tape is single-writer and not `Sync`; parallelism happens across
/// independent tapes.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Accumulated gradients keyed by tape node id.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `t`, if `t` was on the tape and reached.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        let id = t.node?;
        self.grads.get(id)?.as_deref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, parents: Vec<Option<usize>>, backward: BackwardFn) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents,
            backward: Some(backward),
        });
        nodes.len() - 1
    }

    /// Registers `t` as a differentiable leaf and returns the tracked handle.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: Vec::new(),
            backward: None,
        });
        let mut out = t.clone();
        out.node = Some(nodes.len() - 1);
        out.set_requires_grad(true);
        out
    }

    /// Propagates gradients from a scalar `loss` back to every leaf.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients, NumericsError> {
        let loss_id = loss.node.ok_or(NumericsError::NotOnTape)?;
        if loss.len() != 1 {
            return Err(NumericsError::NotScalar {
                shape: loss.shape().to_vec(),
            });
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss_id] = Some(vec![1.0]);
        for id in (0..=loss_id).rev() {
            let Some(g) = grads[id].clone() else { continue };
            let node = &nodes[id];
            let Some(backward) = &node.backward else { continue };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pid) = parent else { continue };
                match &mut grads[*pid] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&pg) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn finish(
        &self,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Option<usize>>,
        make_backward: impl FnOnce() -> BackwardFn,
    ) -> Result<Tensor, NumericsError> {
        let mut out = Tensor::new(shape, data)?;
        if parents.iter().any(Option::is_some) {
            let id = self.push(parents, make_backward());
            out.node = Some(id);
            out.set_requires_grad(true);
        }
        Ok(out)
    }

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
        if a.shape() != b.shape() {
            return Err(NumericsError::DimMismatch {
                op: "add",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        self.finish(a.shape().to_vec(), data, vec![a.node, b.node], || {
            Box::new(move |g| vec![g.to_vec(), g.to_vec()])
        })
    }

    /// Elementwise difference `a - b`.
    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
        if a.shape() != b.shape() {
            return Err(NumericsError::DimMismatch {
                op: "sub",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        self.finish(a.shape().to_vec(), data, vec![a.node, b.node], || {
            Box::new(move |g| vec![g.to_vec(), g.iter().map(|v| -v).collect()])
        })
    }

    /// Elementwise product.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
        if a.shape() != b.shape() {
            return Err(NumericsError::DimMismatch {
                op: "mul",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let (ad, bd) = (a.data_rc(), b.data_rc());
        self.finish(a.shape().to_vec(), data, vec![a.node, b.node], || {
            Box::new(move |g| {
                let ga = g.iter().zip(bd.iter()).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(ad.iter()).map(|(g, x)| g * x).collect();
                vec![ga, gb]
            })
        })
    }

    /// Multiplies every element by the constant `c`.
    pub fn scale(&self, a: &Tensor, c: f64) -> Result<Tensor, NumericsError> {
        let data: Vec<f64> = a.data().iter().map(|x| x * c).collect();
        self.finish(a.shape().to_vec(), data, vec![a.node], || {
            Box::new(move |g| vec![g.iter().map(|v| v * c).collect()])
        })
    }

    /// Adds a row vector `b` to every row of `x`.
    pub fn add_bias(&self, x: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
        let (n, m) = (x.rows(), x.cols());
        if b.len() != m {
            return Err(NumericsError::DimMismatch {
                op: "add_bias",
                left: x.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let mut data = x.data().to_vec();
        for r in 0..n {
            for c in 0..m {
                data[r * m + c] += b.data()[c];
            }
        }
        self.finish(vec![n, m], data, vec![x.node, b.node], || {
            Box::new(move |g| {
                let mut gb = vec![0.0; m];
                for r in 0..n {
                    for c in 0..m {
                        gb[c] += g[r * m + c];
                    }
                }
                vec![g.to_vec(), gb]
            })
        })
    }

    /// Matrix product `a[n×k] · b[k×m]`.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
        let (n, k) = (a.rows(), a.cols());
        let (k2, m) = (b.rows(), b.cols());
        if k != k2 {
            return Err(NumericsError::DimMismatch {
                op: "matmul",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let data = matmul_raw(a.data(), b.data(), n, k, m);
        let (ad, bd) = (a.data_rc(), b.data_rc());
        self.finish(vec![n, m], data, vec![a.node, b.node], || {
            Box::new(move |g| {
                // dA = g · Bᵀ, dB = Aᵀ · g
                let mut ga = vec![0.0; n * k];
                for r in 0..n {
                    for c in 0..k {
                        let mut acc = 0.0;
                        for j in 0..m {
                            acc += g[r * m + j] * bd[c * m + j];
                        }
                        ga[r * k + c] = acc;
                    }
                }
                let mut gb = vec![0.0; k * m];
                for r in 0..k {
                    for c in 0..m {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += ad[j * k + r] * g[j * m + c];
                        }
                        gb[r * m + c] = acc;
                    }
                }
                vec![ga, gb]
            })
        })
    }

    /// Matrix product with transposed right operand: `a[n×k] · b[m×k]ᵀ`.
    pub fn matmul_nt(&self, a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
        let (n, k) = (a.rows(), a.cols());
        let (m, k2) = (b.rows(), b.cols());
        if k != k2 {
            return Err(NumericsError::DimMismatch {
                op: "matmul_nt",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let mut data = vec![0.0; n * m];
        for r in 0..n {
            for c in 0..m {
                let mut acc = 0.0;
                for j in 0..k {
                    acc += a.data()[r * k + j] * b.data()[c * k + j];
                }
                data[r * m + c] = acc;
            }
        }
        let (ad, bd) = (a.data_rc(), b.data_rc());
        self.finish(vec![n, m], data, vec![a.node, b.node], || {
            Box::new(move |g| {
                // C = A·Bᵀ ⇒ dA = g·B, dB = gᵀ·A
                let ga = matmul_raw(g, &bd, n, m, k);
                let mut gb = vec![0.0; m * k];
                for r in 0..m {
                    for c in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[j * m + r] * ad[j * k + c];
                        }
                        gb[r * k + c] = acc;
                    }
                }
                vec![ga, gb]
            })
        })
    }

    /// Elementwise rectified linear unit.
    pub fn relu(&self, a: &Tensor) -> Result<Tensor, NumericsError> {
        let data: Vec<f64> = a.data().iter().map(|x| x.max(0.0)).collect();
        let ad = a.data_rc();
        self.finish(a.shape().to_vec(), data, vec![a.node], || {
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(ad.iter())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect()]
            })
        })
    }

    /// Elementwise sine.
    pub fn sin(&self, a: &Tensor) -> Result<Tensor, NumericsError> {
        let data: Vec<f64> = a.data().iter().map(|x| x.sin()).collect();
        let ad = a.data_rc();
        self.finish(a.shape().to_vec(), data, vec![a.node], || {
            Box::new(move |g| vec![g.iter().zip(ad.iter()).map(|(g, x)| g * x.cos()).collect()])
        })
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self, a: &Tensor) -> Result<Tensor, NumericsError> {
        let s: f64 = a.data().iter().sum();
        let n = a.len();
        self.finish(vec![1], vec![s], vec![a.node], || {
            Box::new(move |g| vec![vec![g[0]; n]])
        })
    }

    /// Selects rows of `a` by index, in the given order (repeats allowed).
    pub fn gather_rows(&self, a: &Tensor, idx: &[usize]) -> Result<Tensor, NumericsError> {
        let (n, m) = (a.rows(), a.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(NumericsError::IndexOutOfRange { index: bad, rows: n });
        }
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            data.extend_from_slice(&a.data()[i * m..(i + 1) * m]);
        }
        let idx = idx.to_vec();
        let out_rows = idx.len();
        self.finish(vec![out_rows, m], data, vec![a.node], || {
            Box::new(move |g| {
                let mut ga = vec![0.0; n * m];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..m {
                        ga[i * m + c] += g[r * m + c];
                    }
                }
                vec![ga]
            })
        })
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&self, parts: &[&Tensor]) -> Result<Tensor, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::EmptyConcat);
        }
        let m = parts[0].cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.cols() != m {
                return Err(NumericsError::DimMismatch {
                    op: "concat_rows",
                    left: parts[0].shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
            rows += p.rows();
            data.extend_from_slice(p.data());
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.len()).collect();
        let parents = parts.iter().map(|p| p.node).collect();
        self.finish(vec![rows, m], data, parents, || {
            Box::new(move |g| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut off = 0;
                for &sz in &sizes {
                    out.push(g[off..off + sz].to_vec());
                    off += sz;
                }
                out
            })
        })
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&self, parts: &[&Tensor]) -> Result<Tensor, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::EmptyConcat);
        }
        let n = parts[0].rows();
        let widths: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
        for p in parts {
            if p.rows() != n {
                return Err(NumericsError::DimMismatch {
                    op: "concat_cols",
                    left: parts[0].shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
            }
        }
        let parents = parts.iter().map(|p| p.node).collect();
        let widths_b = widths.clone();
        self.finish(vec![n, total], data, parents, || {
            Box::new(move |g| {
                let mut out: Vec<Vec<f64>> = widths_b.iter().map(|&w| vec![0.0; n * w]).collect();
                for r in 0..n {
                    let mut off = r * total;
                    for (gp, &w) in out.iter_mut().zip(&widths_b) {
                        gp[r * w..(r + 1) * w].copy_from_slice(&g[off..off + w]);
                        off += w;
                    }
                }
                out
            })
        })
    }

    /// Takes the column block `[start, start+len)` of a matrix.
    pub fn slice_cols(&self, a: &Tensor, start: usize, len: usize) -> Result<Tensor, NumericsError> {
        let (n, m) = (a.rows(), a.cols());
        if start + len > m {
            return Err(NumericsError::SliceOutOfRange { start, len, cols: m });
        }
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&a.data()[r * m + start..r * m + start + len]);
        }
        self.finish(vec![n, len], data, vec![a.node], || {
            Box::new(move |g| {
                let mut ga = vec![0.0; n * m];
                for r in 0..n {
                    ga[r * m + start..r * m + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![ga]
            })
        })
    }

    /// Row-wise softmax restricted to unmasked entries; masked entries are
    /// exactly zero. A fully masked row signals attention over an isolated
    /// node and is an error.
    pub fn masked_softmax(&self, scores: &Tensor, mask: &[bool]) -> Result<Tensor, NumericsError> {
        let (n, m) = (scores.rows(), scores.cols());
        if mask.len() != n * m {
            return Err(NumericsError::DimMismatch {
                op: "masked_softmax",
                left: scores.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let mut data = vec![0.0; n * m];
        for r in 0..n {
            let row = &scores.data()[r * m..(r + 1) * m];
            let mrow = &mask[r * m..(r + 1) * m];
            let mut max = f64::NEG_INFINITY;
            for (x, &keep) in row.iter().zip(mrow) {
                if keep && *x > max {
                    max = *x;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(NumericsError::DegenerateAttention { row: r });
            }
            let mut denom = 0.0;
            for (c, (x, &keep)) in row.iter().zip(mrow).enumerate() {
                if keep {
                    let e = (x - max).exp();
                    data[r * m + c] = e;
                    denom += e;
                }
            }
            for c in 0..m {
                data[r * m + c] /= denom;
            }
        }
        let out_rc = Rc::new(data.clone());
        self.finish(vec![n, m], data, vec![scores.node], || {
            Box::new(move |g| {
                // dS_ij = y_ij (g_ij − Σ_k y_ik g_ik); masked entries have y = 0.
                let mut gs = vec![0.0; n * m];
                for r in 0..n {
                    let y = &out_rc[r * m..(r + 1) * m];
                    let gr = &g[r * m..(r + 1) * m];
                    let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for c in 0..m {
                        gs[r * m + c] = y[c] * (gr[c] - dot);
                    }
                }
                vec![gs]
            })
        })
    }

    /// Per-row grouped attention scores. Row `i` of the output holds the dot
    /// products of `q` row `i` with `k` rows `i·m .. i·m+m`.
    pub fn dot_rows_grouped(
        &self,
        q: &Tensor,
        k: &Tensor,
        m: usize,
    ) -> Result<Tensor, NumericsError> {
        let (n, h) = (q.rows(), q.cols());
        if k.rows() != n * m || k.cols() != h {
            return Err(NumericsError::DimMismatch {
                op: "dot_rows_grouped",
                left: q.shape().to_vec(),
                right: k.shape().to_vec(),
            });
        }
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let qrow = &q.data()[i * h..(i + 1) * h];
            for j in 0..m {
                let krow = &k.data()[(i * m + j) * h..(i * m + j + 1) * h];
                data[i * m + j] = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
            }
        }
        let (qd, kd) = (q.data_rc(), k.data_rc());
        self.finish(vec![n, m], data, vec![q.node, k.node], || {
            Box::new(move |g| {
                let mut gq = vec![0.0; n * h];
                let mut gk = vec![0.0; n * m * h];
                for i in 0..n {
                    for j in 0..m {
                        let gij = g[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for d in 0..h {
                            gq[i * h + d] += gij * kd[(i * m + j) * h + d];
                            gk[(i * m + j) * h + d] += gij * qd[i * h + d];
                        }
                    }
                }
                vec![gq, gk]
            })
        })
    }

    /// Per-row grouped weighted sum. Row `i` of the output is
    /// `Σ_j a[i,j] · v[i·m + j]`.
    pub fn weight_rows_grouped(
        &self,
        a: &Tensor,
        v: &Tensor,
    ) -> Result<Tensor, NumericsError> {
        let (n, m) = (a.rows(), a.cols());
        let h = v.cols();
        if v.rows() != n * m {
            return Err(NumericsError::DimMismatch {
                op: "weight_rows_grouped",
                left: a.shape().to_vec(),
                right: v.shape().to_vec(),
            });
        }
        let mut data = vec![0.0; n * h];
        for i in 0..n {
            for j in 0..m {
                let w = a.data()[i * m + j];
                if w == 0.0 {
                    continue;
                }
                let vrow = &v.data()[(i * m + j) * h..(i * m + j + 1) * h];
                for d in 0..h {
                    data[i * h + d] += w * vrow[d];
                }
            }
        }
        let (ad, vd) = (a.data_rc(), v.data_rc());
        self.finish(vec![n, h], data, vec![a.node, v.node], || {
            Box::new(move |g| {
                let mut ga = vec![0.0; n * m];
                let mut gv = vec![0.0; n * m * h];
                for i in 0..n {
                    let grow = &g[i * h..(i + 1) * h];
                    for j in 0..m {
                        let vrow = &vd[(i * m + j) * h..(i * m + j + 1) * h];
                        ga[i * m + j] = grow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                        let w = ad[i * m + j];
                        if w != 0.0 {
                            for d in 0..h {
                                gv[(i * m + j) * h + d] += w * grow[d];
                            }
                        }
                    }
                }
                vec![ga, gv]
            })
        })
    }
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        for j in 0..k {
            let av = a[r * k + j];
            if av == 0.0 {
                continue;
            }
            let brow = &b[j * m..(j + 1) * m];
            let orow = &mut out[r * m..(r + 1) * m];
            for c in 0..m {
                orow[c] += av * brow[c];
            }
        }
    }
    out
}
