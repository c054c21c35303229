//! Training protocol: MSE training with Adam, plateau learning-rate
//! halving, early stopping, k-fold cross-validation with a holdout
//! validation split, and random hyperparameter sampling.

pub mod run;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::graph::GraphError;
use crate::model::ModelError;
use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("need at least {need} instances, got {have}")]
    TooFewInstances { have: usize, need: usize },
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },
}

/// Knobs of the training protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Epochs without validation improvement before the LR is halved.
    pub lr_halving_patience: u32,
    pub max_epochs: usize,
    /// Epochs without validation improvement before training stops.
    pub early_stop_patience: u32,
    pub batch_size: usize,
    pub folds: usize,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
    /// Hyperparameter configurations sampled during selection.
    pub hyper_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            lr_halving_patience: 10,
            max_epochs: 200,
            early_stop_patience: 30,
            batch_size: 64,
            folds: 5,
            validation_fraction: 0.20,
            test_fraction: 0.10,
            seed: 0,
            hyper_samples: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainingError::InvalidConfig("lr must be positive".into()));
        }
        if self.lr_halving_patience == 0 || self.early_stop_patience == 0 {
            return Err(TrainingError::InvalidConfig("patiences must be >= 1".into()));
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.folds == 0 {
            return Err(TrainingError::InvalidConfig(
                "max_epochs, batch_size and folds must be positive".into(),
            ));
        }
        for (name, f) in [
            ("validation_fraction", self.validation_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(TrainingError::InvalidConfig(format!(
                    "{name} must be in (0, 1)"
                )));
            }
        }
        if self.hyper_samples == 0 {
            return Err(TrainingError::InvalidConfig(
                "hyper_samples must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Instance-id lists for one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// All folds of a cross-validation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub folds: Vec<FoldSplit>,
}

/// Builds the cross-validation split plan.
///
/// One seeded shuffle fixes the instance order; fold i takes the i-th
/// `test_fraction` chunk as its test set, so test sets are pairwise
/// disjoint. The remainder is reshuffled under a derived seed and split
/// into validation and train.
pub fn make_splits(instance_count: usize, cfg: &TrainConfig) -> Result<SplitPlan, TrainingError> {
    cfg.validate()?;
    let test_len = ((instance_count as f64 * cfg.test_fraction).round() as usize).max(1);
    if cfg.folds * test_len > instance_count {
        return Err(TrainingError::TooFewInstances {
            have: instance_count,
            need: cfg.folds * test_len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..instance_count).collect();
    order.shuffle(&mut rng);
    let fold_seeds: Vec<u64> = (0..cfg.folds).map(|_| rng.gen()).collect();

    let mut folds = Vec::with_capacity(cfg.folds);
    for i in 0..cfg.folds {
        let test: Vec<usize> = order[i * test_len..(i + 1) * test_len].to_vec();
        let mut rest: Vec<usize> = order
            .iter()
            .copied()
            .filter(|id| !test.contains(id))
            .collect();
        let mut fold_rng = ChaCha8Rng::seed_from_u64(fold_seeds[i]);
        rest.shuffle(&mut fold_rng);
        let val_len = ((rest.len() as f64 * cfg.validation_fraction).round() as usize).max(1);
        if val_len >= rest.len() {
            return Err(TrainingError::TooFewInstances {
                have: instance_count,
                need: cfg.folds * test_len + 2,
            });
        }
        let validation = rest[..val_len].to_vec();
        let train = rest[val_len..].to_vec();
        folds.push(FoldSplit {
            train,
            validation,
            test,
        });
    }
    Ok(SplitPlan { folds })
}

/// What [`Scheduler::observe`] decided for this epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SchedulerDecision {
    /// Validation improved; the caller should snapshot the parameters.
    Improved,
    Continue,
    /// The learning rate was just halved.
    Halved,
    Stop,
}

/// Plateau tracker: one counter of epochs since the best validation
/// loss, halving the LR each `halving_patience` stale epochs and
/// stopping after `early_stop_patience` of them. Any strictly lower
/// validation loss counts as an improvement.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scheduler {
    lr: f64,
    halving_patience: u32,
    early_stop_patience: u32,
    best: Option<f64>,
    stale: u32,
}

impl Scheduler {
    pub fn new(lr: f64, halving_patience: u32, early_stop_patience: u32) -> Self {
        Scheduler {
            lr,
            halving_patience,
            early_stop_patience,
            best: None,
            stale: 0,
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Scheduler::new(cfg.lr, cfg.lr_halving_patience, cfg.early_stop_patience)
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn observe(&mut self, val_loss: f64) -> SchedulerDecision {
        if self.best.map_or(true, |b| val_loss < b) {
            self.best = Some(val_loss);
            self.stale = 0;
            return SchedulerDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.early_stop_patience {
            return SchedulerDecision::Stop;
        }
        if self.stale % self.halving_patience == 0 {
            self.lr /= 2.0;
            return SchedulerDecision::Halved;
        }
        SchedulerDecision::Continue
    }
}

pub use run::{
    run_cv, run_cv_resumable, CvState,
    baseline_carry_forward, baseline_train_mean, evaluate, evaluate_unbatched, fit_channel_stats,
    normalize_tasks, sample_search_space, select_hyperparameters, select_hyperparameters_with,
    train_fold, EpochRecord, FoldReport, TrainReport, TrainSession,
};

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_hit_the_documented_fractions() {
        let cfg = TrainConfig::default();
        let plan = make_splits(100, &cfg).unwrap();
        assert_eq!(plan.folds.len(), 5);
        for fold in &plan.folds {
            assert_eq!(fold.test.len(), 10);
            assert_eq!(fold.validation.len(), 18);
            assert_eq!(fold.train.len(), 72);
        }
    }

    #[test]
    fn splits_partition_and_test_sets_are_disjoint() {
        let cfg = TrainConfig::default();
        let plan = make_splits(83, &cfg).unwrap();
        let mut seen_test = std::collections::HashSet::new();
        for fold in &plan.folds {
            let mut all: Vec<usize> = fold
                .train
                .iter()
                .chain(&fold.validation)
                .chain(&fold.test)
                .copied()
                .collect();
            all.sort_unstable();
            assert_eq!(all, (0..83).collect::<Vec<_>>());
            for &id in &fold.test {
                assert!(seen_test.insert(id), "test id {id} reused across folds");
            }
        }
    }

    #[test]
    fn splits_are_deterministic_under_seed() {
        let cfg = TrainConfig::default();
        assert_eq!(make_splits(60, &cfg).unwrap(), make_splits(60, &cfg).unwrap());
        let other = TrainConfig {
            seed: 9,
            ..TrainConfig::default()
        };
        assert_ne!(make_splits(60, &cfg).unwrap(), make_splits(60, &other).unwrap());
    }

    #[test]
    fn too_few_instances_is_an_error() {
        let cfg = TrainConfig::default();
        assert!(matches!(
            make_splits(4, &cfg),
            Err(TrainingError::TooFewInstances { .. })
        ));
    }

    #[test]
    fn strictly_improving_validation_never_halves() {
        let mut s = Scheduler::new(0.1, 10, 30);
        for k in 0..50 {
            let d = s.observe(1.0 / (k + 1) as f64);
            assert_eq!(d, SchedulerDecision::Improved);
        }
        assert_eq!(s.lr(), 0.1);
    }

    #[test]
    fn constant_validation_stops_at_the_thirty_first_stale_epoch() {
        let mut s = Scheduler::new(0.1, 10, 30);
        assert_eq!(s.observe(1.0), SchedulerDecision::Improved);
        let mut decisions = Vec::new();
        for _ in 0..30 {
            decisions.push(s.observe(1.0));
        }
        assert_eq!(decisions[9], SchedulerDecision::Halved);
        assert_eq!(decisions[19], SchedulerDecision::Halved);
        assert_eq!(decisions[29], SchedulerDecision::Stop);
        assert!(decisions[..29]
            .iter()
            .filter(|d| **d == SchedulerDecision::Halved)
            .count()
            == 2);
        assert_eq!(s.lr(), 0.025);
    }

    #[test]
    fn lr_sequence_is_a_non_increasing_step_function_with_exact_halving() {
        let mut s = Scheduler::new(0.4, 3, 30);
        let mut last = s.lr();
        let mut rng_vals = [1.0, 1.0, 1.0, 1.0, 0.5, 0.6, 0.6, 0.6, 0.6].iter();
        for &v in rng_vals.by_ref() {
            let before = s.lr();
            s.observe(v);
            assert!(s.lr() <= before);
            if s.lr() != before {
                assert_eq!(s.lr(), before / 2.0);
            }
            last = s.lr();
        }
        assert_eq!(last, 0.1);
    }

    #[test]
    fn equal_validation_loss_is_not_an_improvement() {
        let mut s = Scheduler::new(0.1, 10, 30);
        s.observe(1.0);
        assert_eq!(s.observe(1.0), SchedulerDecision::Continue);
        assert_eq!(s.best(), Some(1.0));
    }
}
