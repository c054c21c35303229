//! Layer primitives the network is assembled from: dense (affine) maps,
//! the activation, scaled dot-product multi-head attention, and the
//! residual attention block used for node updates.
//!
//! Attention comes in two routes over the same parameters:
//! [`mha`] is the standard form where every query row attends the same
//! key set, and [`mha_grouped`] gives each query row its own padded,
//! masked key group. The grouped form is what batched execution over
//! variable-size neighborhoods uses.

use rand::Rng;

use crate::numerics::tape::Tape;
use crate::numerics::tensor::Tensor;
use crate::numerics::NumericsError;

/// Weights of a dense layer `x · W + b`.
#[derive(Clone, Debug)]
pub struct AffineParams {
    pub weight: Tensor, // [in_dim × out_dim]
    pub bias: Tensor,   // [out_dim]
}

impl AffineParams {
    /// Kaiming-uniform style init: entries drawn from ±sqrt(1/fan_in).
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let bias = (0..out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
        AffineParams {
            weight: Tensor::matrix(in_dim, out_dim, weight).unwrap(),
            bias: Tensor::vector(bias),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Registers both tensors as leaves on `tape`.
    pub fn watch(&self, tape: &Tape) -> Self {
        AffineParams {
            weight: tape.watch(&self.weight),
            bias: tape.watch(&self.bias),
        }
    }
}

/// Dense layer: `x[n × in] · weight + bias`, bias broadcast over rows.
pub fn affine(tape: &Tape, p: &AffineParams, x: &Tensor) -> Result<Tensor, NumericsError> {
    if x.cols() != p.in_dim() {
        return Err(NumericsError::DimMismatch {
            op: "affine",
            left: x.shape().to_vec(),
            right: p.weight.shape().to_vec(),
        });
    }
    let xw = tape.matmul(x, &p.weight)?;
    tape.add_bias(&xw, &p.bias)
}

/// The network's non-linearity (ReLU).
pub fn activation(tape: &Tape, x: &Tensor) -> Result<Tensor, NumericsError> {
    tape.relu(x)
}

/// Projection weights for multi-head attention.
///
/// Query and key/value input widths may differ; the projections absorb the
/// mismatch. `model_dim` must be divisible by `head_count`, and per-head
/// blocks are contiguous column slices of the projected matrices.
#[derive(Clone, Debug)]
pub struct MhaParams {
    pub wq: Tensor, // [query_dim × model_dim]
    pub wk: Tensor, // [kv_dim × model_dim]
    pub wv: Tensor, // [kv_dim × model_dim]
    pub wo: Tensor, // [model_dim × model_dim]
    pub head_count: usize,
    pub model_dim: usize,
}

impl MhaParams {
    pub fn init(
        query_dim: usize,
        kv_dim: usize,
        model_dim: usize,
        head_count: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(head_count > 0 && model_dim % head_count == 0);
        let uni = |rows: usize, cols: usize, rng: &mut dyn rand::RngCore| {
            let bound = (1.0 / rows as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::matrix(rows, cols, data).unwrap()
        };
        MhaParams {
            wq: uni(query_dim, model_dim, rng),
            wk: uni(kv_dim, model_dim, rng),
            wv: uni(kv_dim, model_dim, rng),
            wo: uni(model_dim, model_dim, rng),
            head_count,
            model_dim,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.head_count
    }

    pub fn watch(&self, tape: &Tape) -> Self {
        MhaParams {
            wq: tape.watch(&self.wq),
            wk: tape.watch(&self.wk),
            wv: tape.watch(&self.wv),
            wo: tape.watch(&self.wo),
            head_count: self.head_count,
            model_dim: self.model_dim,
        }
    }

    fn check(&self, query: &Tensor, keys: &Tensor, values: &Tensor) -> Result<(), NumericsError> {
        if query.cols() != self.wq.rows() || keys.cols() != self.wk.rows() {
            return Err(NumericsError::DimMismatch {
                op: "mha",
                left: query.shape().to_vec(),
                right: self.wq.shape().to_vec(),
            });
        }
        if keys.shape() != values.shape() {
            return Err(NumericsError::DimMismatch {
                op: "mha",
                left: keys.shape().to_vec(),
                right: values.shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// Scaled dot-product multi-head attention over a shared key set.
///
/// `mask[i · k + j]` tells whether query row `i` may attend key row `j`.
pub fn mha(
    tape: &Tape,
    p: &MhaParams,
    query: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    mask: &[bool],
) -> Result<Tensor, NumericsError> {
    p.check(query, keys, values)?;
    let q = tape.matmul(query, &p.wq)?;
    let k = tape.matmul(keys, &p.wk)?;
    let v = tape.matmul(values, &p.wv)?;
    let hd = p.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(p.head_count);
    for h in 0..p.head_count {
        let qh = tape.slice_cols(&q, h * hd, hd)?;
        let kh = tape.slice_cols(&k, h * hd, hd)?;
        let vh = tape.slice_cols(&v, h * hd, hd)?;
        let scores = tape.scale(&tape.matmul_nt(&qh, &kh)?, scale)?;
        let attn = tape.masked_softmax(&scores, mask)?;
        heads.push(tape.matmul(&attn, &vh)?);
    }
    let refs: Vec<&Tensor> = heads.iter().collect();
    let cat = tape.concat_cols(&refs)?;
    tape.matmul(&cat, &p.wo)
}

/// Grouped multi-head attention: query row `i` attends only key rows
/// `i·group .. i·group+group` of `keys`/`values`, under `mask`.
pub fn mha_grouped(
    tape: &Tape,
    p: &MhaParams,
    query: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    group: usize,
    mask: &[bool],
) -> Result<Tensor, NumericsError> {
    p.check(query, keys, values)?;
    let q = tape.matmul(query, &p.wq)?;
    let k = tape.matmul(keys, &p.wk)?;
    let v = tape.matmul(values, &p.wv)?;
    let hd = p.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(p.head_count);
    for h in 0..p.head_count {
        let qh = tape.slice_cols(&q, h * hd, hd)?;
        let kh = tape.slice_cols(&k, h * hd, hd)?;
        let vh = tape.slice_cols(&v, h * hd, hd)?;
        let scores = tape.scale(&tape.dot_rows_grouped(&qh, &kh, group)?, scale)?;
        let attn = tape.masked_softmax(&scores, mask)?;
        heads.push(tape.weight_rows_grouped(&attn, &vh)?);
    }
    let refs: Vec<&Tensor> = heads.iter().collect();
    let cat = tape.concat_cols(&refs)?;
    tape.matmul(&cat, &p.wo)
}

/// Parameters of the residual multi-head attention block.
#[derive(Clone, Debug)]
pub struct MabParams {
    pub mha: MhaParams,
    pub ff: AffineParams, // model_dim → model_dim
}

impl MabParams {
    pub fn init(
        query_dim: usize,
        kv_dim: usize,
        model_dim: usize,
        head_count: usize,
        rng: &mut impl Rng,
    ) -> Self {
        MabParams {
            mha: MhaParams::init(query_dim, kv_dim, model_dim, head_count, rng),
            ff: AffineParams::init(model_dim, model_dim, rng),
        }
    }

    pub fn watch(&self, tape: &Tape) -> Self {
        MabParams {
            mha: self.mha.watch(tape),
            ff: self.ff.watch(tape),
        }
    }
}

/// Residual attention block: `α(H + FF(H))` with `H = α(Q + MHA(Q, K, V))`.
///
/// The residual requires `Q` to already have `model_dim` columns.
pub fn mab(
    tape: &Tape,
    p: &MabParams,
    query: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    mask: &[bool],
) -> Result<Tensor, NumericsError> {
    if query.cols() != p.mha.model_dim {
        return Err(NumericsError::DimMismatch {
            op: "mab residual",
            left: query.shape().to_vec(),
            right: vec![p.mha.model_dim],
        });
    }
    let att = mha(tape, &p.mha, query, keys, values, mask)?;
    let h = activation(tape, &tape.add(query, &att)?)?;
    let ff = affine(tape, &p.ff, &h)?;
    activation(tape, &tape.add(&h, &ff)?)
}

/// Grouped variant of [`mab`]; see [`mha_grouped`].
pub fn mab_grouped(
    tape: &Tape,
    p: &MabParams,
    query: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    group: usize,
    mask: &[bool],
) -> Result<Tensor, NumericsError> {
    if query.cols() != p.mha.model_dim {
        return Err(NumericsError::DimMismatch {
            op: "mab residual",
            left: query.shape().to_vec(),
            right: vec![p.mha.model_dim],
        });
    }
    let att = mha_grouped(tape, &p.mha, query, keys, values, group, mask)?;
    let h = activation(tape, &tape.add(query, &att)?)?;
    let ff = affine(tape, &p.ff, &h)?;
    activation(tape, &tape.add(&h, &ff)?)
}
