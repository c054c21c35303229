//! The forecasting network: initial node/edge embeddings, stacked
//! attention GNN layers, and the scalar edge readout, plus the
//! no-query-edge ablation variant.
//!
//! Two execution routes share the same parameters: [`forward`] processes
//! one instance with exact-size neighborhoods, and [`batch::forward_batch`]
//! runs many instances at once over padded, masked neighborhood groups.
//! Both must produce identical numbers; the test suite asserts it.

pub mod batch;
mod forward;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::GraphError;
use crate::numerics::{AffineParams, MabParams, NumericsError, Tape, Tensor};

pub use forward::{
    edge_update, forward, forward_graph, forward_no_target, forward_no_target_graph, gnn_layer,
    initial_embed,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint tensor {name}: expected shape {expected:?}, found {found:?}")]
    CheckpointShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint is missing tensor {0}")]
    CheckpointMissingTensor(String),
    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),
    #[error("ablation forward called without ablation_no_target_edges")]
    NotAblationConfig,
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Json(#[from] serde_json::Error),
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layer_count: usize,
    pub head_count: usize,
    pub hidden_dim: usize,
    pub channel_count: usize,
    #[serde(default)]
    pub ablation_no_target_edges: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layer_count < 1 {
            return Err(ModelError::InvalidConfig("layer_count must be >= 1".into()));
        }
        if self.head_count == 0 || self.hidden_dim % self.head_count != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "hidden_dim {} not divisible by head_count {}",
                self.hidden_dim, self.head_count
            )));
        }
        if self.channel_count == 0 {
            return Err(ModelError::InvalidConfig("channel_count must be > 0".into()));
        }
        Ok(())
    }
}

/// One full GNN layer: attention node update plus residual dense edge
/// update.
#[derive(Clone, Debug)]
pub struct GnnLayerParams {
    pub mab: MabParams,        // query d, keys/values 2d, output d
    pub edge_ff: AffineParams, // 3d → d
}

/// The output stage after the shared layers.
#[derive(Clone, Debug)]
pub enum HeadParams {
    /// Final edge update producing scalar edge embeddings (3d → 1).
    EdgeScalar(AffineParams),
    /// Ablation readout over channel embedding ‖ query time encoding (2d → 1).
    QueryReadout(AffineParams),
}

/// All learnable weights.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub channel_embed: AffineParams, // one-hot C → d
    pub time_embed: AffineParams,    // 1 → d, applied inside sin
    pub edge_embed: AffineParams,    // (value, indicator) 2 → d
    /// Shared layers: L−1 of them; the L-th layer is the head.
    pub layers: Vec<GnnLayerParams>,
    pub head: HeadParams,
}

impl ModelParams {
    /// Seeded initialization for a config. The same (config, seed) pair
    /// always yields the same weights.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channel_embed = AffineParams::init(cfg.channel_count, d, &mut rng);
        let time_embed = AffineParams::init(1, d, &mut rng);
        let edge_embed = AffineParams::init(2, d, &mut rng);
        let shared = cfg.layer_count - 1;
        let layers = (0..shared)
            .map(|_| GnnLayerParams {
                mab: MabParams::init(d, 2 * d, d, cfg.head_count, &mut rng),
                edge_ff: AffineParams::init(3 * d, d, &mut rng),
            })
            .collect();
        let head = if cfg.ablation_no_target_edges {
            HeadParams::QueryReadout(AffineParams::init(2 * d, 1, &mut rng))
        } else {
            HeadParams::EdgeScalar(AffineParams::init(3 * d, 1, &mut rng))
        };
        Ok(ModelParams {
            channel_embed,
            time_embed,
            edge_embed,
            layers,
            head,
        })
    }

    /// All tensors with stable names, in a fixed traversal order shared by
    /// the optimizer, checkpoints, and gradient flattening.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        push_affine(&mut out, "channel_embed", &self.channel_embed);
        push_affine(&mut out, "time_embed", &self.time_embed);
        push_affine(&mut out, "edge_embed", &self.edge_embed);
        for (l, layer) in self.layers.iter().enumerate() {
            let p = format!("layers.{l}");
            out.push((format!("{p}.mab.mha.wq"), &layer.mab.mha.wq));
            out.push((format!("{p}.mab.mha.wk"), &layer.mab.mha.wk));
            out.push((format!("{p}.mab.mha.wv"), &layer.mab.mha.wv));
            out.push((format!("{p}.mab.mha.wo"), &layer.mab.mha.wo));
            push_affine(&mut out, &format!("{p}.mab.ff"), &layer.mab.ff);
            push_affine(&mut out, &format!("{p}.edge_ff"), &layer.edge_ff);
        }
        match &self.head {
            HeadParams::EdgeScalar(p) => push_affine(&mut out, "head.edge_scalar", p),
            HeadParams::QueryReadout(p) => push_affine(&mut out, "head.query_readout", p),
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        push_affine_mut(&mut out, "channel_embed", &mut self.channel_embed);
        push_affine_mut(&mut out, "time_embed", &mut self.time_embed);
        push_affine_mut(&mut out, "edge_embed", &mut self.edge_embed);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let p = format!("layers.{l}");
            out.push((format!("{p}.mab.mha.wq"), &mut layer.mab.mha.wq));
            out.push((format!("{p}.mab.mha.wk"), &mut layer.mab.mha.wk));
            out.push((format!("{p}.mab.mha.wv"), &mut layer.mab.mha.wv));
            out.push((format!("{p}.mab.mha.wo"), &mut layer.mab.mha.wo));
            push_affine_mut(&mut out, &format!("{p}.mab.ff"), &mut layer.mab.ff);
            push_affine_mut(&mut out, &format!("{p}.edge_ff"), &mut layer.edge_ff);
        }
        match &mut self.head {
            HeadParams::EdgeScalar(p) => push_affine_mut(&mut out, "head.edge_scalar", p),
            HeadParams::QueryReadout(p) => push_affine_mut(&mut out, "head.query_readout", p),
        }
        out
    }

    /// Registers every tensor as a leaf on `tape`, returning the tracked
    /// parameter set used for one forward/backward pass.
    pub fn watch(&self, tape: &Tape) -> ModelParams {
        let mut watched = self.clone();
        for (_, t) in watched.named_tensors_mut() {
            *t = tape.watch(t);
        }
        watched
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }
}

fn push_affine<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, p: &'a AffineParams) {
    out.push((format!("{prefix}.weight"), &p.weight));
    out.push((format!("{prefix}.bias"), &p.bias));
}

fn push_affine_mut<'a>(
    out: &mut Vec<(String, &'a mut Tensor)>,
    prefix: &str,
    p: &'a mut AffineParams,
) {
    out.push((format!("{prefix}.weight"), &mut p.weight));
    out.push((format!("{prefix}.bias"), &mut p.bias));
}

/// Per-channel normalization statistics carried next to a trained model
/// so predictions can be mapped back to raw units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Versioned JSON container for a trained model: config, all parameter
/// tensors, the init seed, and optional normalization stats.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    tensors: Vec<CheckpointTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<ChannelStats>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn from_params(
        cfg: &ModelConfig,
        params: &ModelParams,
        seed: u64,
        normalization: Option<ChannelStats>,
    ) -> Self {
        let tensors = params
            .named_tensors()
            .into_iter()
            .map(|(name, t)| CheckpointTensor {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: cfg.clone(),
            seed,
            tensors,
            normalization,
        }
    }

    /// Rebuilds the parameter set, verifying every tensor's shape against
    /// the stored config.
    pub fn to_params(&self) -> Result<ModelParams, ModelError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(ModelError::CheckpointVersion(self.version));
        }
        let mut params = ModelParams::init(&self.config, self.seed)?;
        for (name, t) in params.named_tensors_mut() {
            let stored = self
                .tensors
                .iter()
                .find(|ct| ct.name == name)
                .ok_or_else(|| ModelError::CheckpointMissingTensor(name.clone()))?;
            if stored.shape != t.shape() {
                return Err(ModelError::CheckpointShapeMismatch {
                    name,
                    expected: t.shape().to_vec(),
                    found: stored.shape.clone(),
                });
            }
            *t = Tensor::new(stored.shape.clone(), stored.data.clone())?;
        }
        Ok(params)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ModelError> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        let json = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&json)?)
    }
}
