//! Full-graph training loop: adaptive-moment optimizer, validation-monitored
//! early stopping, multi-seed aggregation and the localization ablation suite.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::GraphBundle;
use crate::layers::{GraphTopo, Localization};
use crate::metrics::{evaluate, predictions, Metrics};
use crate::model::{loss_total, LossBreakdown, Model, ModelConfig, ParamRegistry};
use crate::real::Real;
use crate::tensor::{Matrix, Tape, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping. Improvement is
    /// higher validation accuracy, with lower validation loss as tiebreak.
    pub patience: usize,
    pub seeds: Vec<u64>,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_epochs: 500,
            patience: 100,
            seeds: (0..10).collect(),
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), TrainError> {
        if self.seeds.is_empty() {
            return Err(TrainError::NoSeeds);
        }
        if self.patience > self.max_epochs {
            return Err(TrainError::PatienceExceedsEpochs {
                patience: self.patience,
                max_epochs: self.max_epochs,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("tensor error: {0}")]
    Tensor(#[from] TensorError),
    #[error("graph error: {0}")]
    Graph(#[from] crate::graph::GraphError),
    #[error("training diverged (non-finite loss) at epoch {epoch}: {source}")]
    Diverged { epoch: usize, source: TensorError },
    #[error("seed list is empty")]
    NoSeeds,
    #[error("patience {patience} exceeds max_epochs {max_epochs}")]
    PatienceExceedsEpochs { patience: usize, max_epochs: usize },
    #[error("all {0} seeds failed")]
    AllSeedsFailed(usize),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// One point on the per-epoch curve.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpochPoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Outcome of one seed's training run.
#[derive(Debug, Clone, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    pub test: Metrics,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub wall_ms: u64,
    pub curve: Vec<EpochPoint>,
    pub final_breakdown: LossBreakdown,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct Aggregate {
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_micro_f: f64,
    pub std_micro_f: f64,
    pub mean_macro_f: f64,
    pub std_macro_f: f64,
    /// True when fewer than two seeds succeeded, so std is reported as 0.
    pub degenerate_std: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub per_seed: Vec<SeedRun>,
    pub failures: Vec<SeedFailure>,
    pub aggregate: Aggregate,
}

/// First and second moment estimates per parameter tensor.
struct Adam<F> {
    m: Vec<Matrix<F>>,
    v: Vec<Matrix<F>>,
    t: i32,
}

impl<F: Real> Adam<F> {
    fn new(registry: &ParamRegistry<F>) -> Self {
        let shapes: Vec<_> = registry
            .ids()
            .map(|id| {
                let s = registry.value(id).shape();
                Matrix::zeros(s.rows, s.cols)
            })
            .collect();
        Adam {
            m: shapes.clone(),
            v: shapes,
            t: 0,
        }
    }

    fn step(&mut self, registry: &mut ParamRegistry<F>, grads: &[Matrix<F>], cfg: &TrainConfig) {
        self.t += 1;
        let b1 = F::from_f64(cfg.beta1);
        let b2 = F::from_f64(cfg.beta2);
        let lr = F::from_f64(cfg.lr);
        let eps = F::from_f64(cfg.eps);
        let corr1 = F::one() - b1.powi(self.t);
        let corr2 = F::one() - b2.powi(self.t);
        let ids: Vec<_> = registry.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = registry.value_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (F::one() - b1) * g[j];
                v[j] = b2 * v[j] + (F::one() - b2) * g[j] * g[j];
                let m_hat = m[j] / corr1;
                let v_hat = v[j] / corr2;
                p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

fn val_cross_entropy<F: Real>(probs: &Matrix<F>, labels: &[usize], subset: &[usize]) -> f64 {
    subset
        .iter()
        .map(|&v| -probs.get(v, labels[v]).as_f64().max(1e-12).ln())
        .sum()
}

/// Train one seed on the full graph and evaluate on the test split at the
/// best validation epoch.
pub fn train_run<F: Real>(
    bundle: &GraphBundle,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    seed: u64,
) -> Result<(ParamRegistry<F>, SeedRun)> {
    train_config.validate()?;
    let splits = bundle.splits()?.clone();
    let started = Instant::now();

    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut registry = ParamRegistry::<F>::new();
    let model = Model::build(
        model_config,
        bundle.feature_dim,
        bundle.num_classes,
        &mut registry,
        &mut init_rng,
    );
    let topo = GraphTopo::from_bundle(bundle);
    let features: Matrix<F> = bundle.features.cast();
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
    let mut adam = Adam::new(&registry);

    let mut best_snapshot = registry.snapshot();
    let mut best_epoch = 0usize;
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_val_loss = f64::INFINITY;
    let mut since_best = 0usize;
    let mut curve = Vec::new();
    let mut last_breakdown = LossBreakdown::default();
    let mut epochs_run = 0usize;

    for epoch in 1..=train_config.max_epochs {
        epochs_run = epoch;
        let diverged = |e: TensorError| match e {
            TensorError::NonFinite { .. } => TrainError::Diverged { epoch, source: e },
            other => TrainError::Tensor(other),
        };

        // gradient step on the full objective
        let mut tape = Tape::new();
        let leaves = registry.push_leaves(&mut tape).map_err(diverged)?;
        let x = tape.constant(features.clone()).map_err(diverged)?;
        let (probs, gates) = model
            .forward(&mut tape, &leaves, &topo, x, true, &mut dropout_rng)
            .map_err(diverged)?;
        let (loss, breakdown) = loss_total(
            &mut tape,
            probs,
            &bundle.labels,
            &splits.train,
            &registry,
            &leaves,
            &gates,
            model_config.lambda_g,
            model_config.lambda_l,
            model_config.lambda,
        )
        .map_err(diverged)?;
        tape.backward(loss).map_err(diverged)?;
        let grads: Vec<Matrix<F>> = leaves
            .iter()
            .map(|&t| match tape.grad(t) {
                Some(g) => g.clone(),
                None => {
                    let s = tape.shape(t);
                    Matrix::zeros(s.rows, s.cols)
                }
            })
            .collect();
        adam.step(&mut registry, &grads, train_config);
        last_breakdown = breakdown;

        // deterministic evaluation pass
        let mut eval_tape = Tape::new();
        let eval_leaves = registry.push_leaves(&mut eval_tape).map_err(diverged)?;
        let x = eval_tape.constant(features.clone()).map_err(diverged)?;
        let mut eval_rng = ChaCha8Rng::seed_from_u64(0);
        let (eval_probs, _) = model
            .forward(&mut eval_tape, &eval_leaves, &topo, x, false, &mut eval_rng)
            .map_err(diverged)?;
        let probs_mat = eval_tape.value(eval_probs);
        let preds = predictions(probs_mat);
        let val = evaluate(&preds, &bundle.labels, &splits.val, bundle.num_classes);
        let val_loss = val_cross_entropy(probs_mat, &bundle.labels, &splits.val);

        curve.push(EpochPoint {
            epoch,
            train_loss: breakdown.total,
            val_loss,
            val_accuracy: val.accuracy,
        });

        let improved = val.accuracy > best_acc
            || (val.accuracy == best_acc && val_loss < best_val_loss);
        if improved {
            best_acc = val.accuracy;
            best_val_loss = val_loss;
            best_epoch = epoch;
            best_snapshot = registry.snapshot();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= train_config.patience {
                break;
            }
        }
    }

    registry.restore(&best_snapshot);

    let mut test_tape = Tape::new();
    let test_leaves = registry.push_leaves(&mut test_tape)?;
    let x = test_tape.constant(features)?;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(0);
    let (test_probs, _) = model.forward(&mut test_tape, &test_leaves, &topo, x, false, &mut eval_rng)?;
    let preds = predictions(test_tape.value(test_probs));
    let test = evaluate(&preds, &bundle.labels, &splits.test, bundle.num_classes);

    let run = SeedRun {
        seed,
        test,
        best_epoch,
        epochs_run,
        wall_ms: started.elapsed().as_millis() as u64,
        curve,
        final_breakdown: last_breakdown,
    };
    Ok((registry, run))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn aggregate(per_seed: &[SeedRun]) -> Aggregate {
    let acc: Vec<f64> = per_seed.iter().map(|r| r.test.accuracy).collect();
    let micro: Vec<f64> = per_seed.iter().map(|r| r.test.micro_f).collect();
    let macro_: Vec<f64> = per_seed.iter().map(|r| r.test.macro_f).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&acc);
    let (mean_micro_f, std_micro_f) = mean_std(&micro);
    let (mean_macro_f, std_macro_f) = mean_std(&macro_);
    Aggregate {
        mean_accuracy,
        std_accuracy,
        mean_micro_f,
        std_micro_f,
        mean_macro_f,
        std_macro_f,
        degenerate_std: per_seed.len() < 2,
    }
}

/// Run every seed in the config sequentially with fully isolated state and
/// aggregate test metrics across the successes.
pub fn multi_run<F: Real>(
    bundle: &GraphBundle,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<RunResult> {
    train_config.validate()?;
    let mut per_seed = Vec::new();
    let mut failures = Vec::new();
    for &seed in &train_config.seeds {
        match train_run::<F>(bundle, model_config, train_config, seed) {
            Ok((_, run)) => per_seed.push(run),
            Err(e) => failures.push(SeedFailure {
                seed,
                error: e.to_string(),
            }),
        }
    }
    if per_seed.is_empty() {
        return Err(TrainError::AllSeedsFailed(train_config.seeds.len()));
    }
    let aggregate = aggregate(&per_seed);
    Ok(RunResult {
        per_seed,
        failures,
        aggregate,
    })
}

pub const ABLATION_VARIANTS: [Localization; 4] = [
    Localization::None,
    Localization::Node,
    Localization::Edge,
    Localization::Both,
];

/// Four runs differing only in localization mode, sharing the seed list so
/// differences are attributable to localization alone.
pub fn ablation_suite<F: Real>(
    bundle: &GraphBundle,
    base_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<Vec<(Localization, RunResult)>> {
    ABLATION_VARIANTS
        .iter()
        .map(|&localization| {
            let config = ModelConfig {
                localization,
                ..base_config.clone()
            };
            multi_run::<F>(bundle, &config, train_config).map(|r| (localization, r))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{synthetic_graph, SplitMode, SplitSpec, SyntheticKind, SyntheticSpec};

    fn sbm_bundle() -> GraphBundle {
        let mut bundle = synthetic_graph(&SyntheticSpec {
            kind: SyntheticKind::Sbm {
                p_in: 0.6,
                p_out: 0.05,
            },
            n: 30,
            feature_dim: 6,
            num_classes: 3,
            seed: 7,
        })
        .unwrap();
        bundle
            .make_splits(&SplitSpec {
                per_class_train: 3,
                val_size: 9,
                test_size: 9,
                seed: 1,
                mode: SplitMode::SeededRandom,
            })
            .unwrap();
        bundle
    }

    fn quick_config() -> (ModelConfig, TrainConfig) {
        let model = ModelConfig {
            dropout: 0.0,
            lambda_g: 0.0,
            ..ModelConfig::default()
        };
        let train = TrainConfig {
            max_epochs: 30,
            patience: 30,
            seeds: vec![0],
            ..TrainConfig::default()
        };
        (model, train)
    }

    #[test]
    fn loss_decreases_over_first_epochs() {
        let bundle = sbm_bundle();
        let (model, train) = quick_config();
        let (_, run) = train_run::<f64>(&bundle, &model, &train, 0).unwrap();
        for w in run.curve[..10].windows(2) {
            assert!(
                w[1].train_loss < w[0].train_loss,
                "loss rose at epoch {}: {} -> {}",
                w[1].epoch,
                w[0].train_loss,
                w[1].train_loss
            );
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut registry = ParamRegistry::<f64>::new();
        let id = registry.add(
            "w",
            crate::model::ParamGroup::Global,
            Matrix::from_rows(&[vec![1.0, -2.0]]).unwrap(),
        );
        let mut adam = Adam::new(&registry);
        let grads = vec![Matrix::zeros(1, 2)];
        adam.step(&mut registry, &grads, &TrainConfig::default());
        assert_eq!(registry.value(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut registry = ParamRegistry::<f64>::new();
        let id = registry.add(
            "w",
            crate::model::ParamGroup::Global,
            Matrix::from_rows(&[vec![0.0]]).unwrap(),
        );
        let mut adam = Adam::new(&registry);
        let grads = vec![Matrix::from_rows(&[vec![3.0]]).unwrap()];
        adam.step(&mut registry, &grads, &TrainConfig::default());
        // first Adam step has magnitude ~lr regardless of gradient scale
        let w = registry.value(id).get(0, 0);
        assert!(w < 0.0 && (w + 0.01).abs() < 1e-6);
    }

    #[test]
    fn early_stopping_respects_patience_and_best_epoch() {
        let bundle = sbm_bundle();
        let (model, mut train) = quick_config();
        train.max_epochs = 100;
        train.patience = 5;
        let (_, run) = train_run::<f64>(&bundle, &model, &train, 3).unwrap();
        assert!(run.best_epoch <= run.epochs_run);
        if run.epochs_run < train.max_epochs {
            assert_eq!(run.epochs_run, run.best_epoch + train.patience);
        }
    }

    #[test]
    fn train_run_is_deterministic() {
        let bundle = sbm_bundle();
        let (model, train) = quick_config();
        let (_, a) = train_run::<f64>(&bundle, &model, &train, 5).unwrap();
        let (_, b) = train_run::<f64>(&bundle, &model, &train, 5).unwrap();
        assert_eq!(a.test.accuracy, b.test.accuracy);
        assert_eq!(a.best_epoch, b.best_epoch);
        let la: Vec<f64> = a.curve.iter().map(|p| p.train_loss).collect();
        let lb: Vec<f64> = b.curve.iter().map(|p| p.train_loss).collect();
        assert_eq!(la, lb);
    }

    #[test]
    fn multi_run_aggregates_all_seeds() {
        let bundle = sbm_bundle();
        let (model, mut train) = quick_config();
        train.max_epochs = 10;
        train.patience = 10;
        train.seeds = vec![0, 1, 2];
        let result = multi_run::<f64>(&bundle, &model, &train).unwrap();
        assert_eq!(result.per_seed.len(), 3);
        assert!(result.failures.is_empty());
        assert!(!result.aggregate.degenerate_std);
        let mean = result.per_seed.iter().map(|r| r.test.accuracy).sum::<f64>() / 3.0;
        assert!((result.aggregate.mean_accuracy - mean).abs() < 1e-12);
    }

    #[test]
    fn single_seed_std_is_degenerate_zero() {
        let bundle = sbm_bundle();
        let (model, mut train) = quick_config();
        train.max_epochs = 5;
        train.patience = 5;
        let result = multi_run::<f64>(&bundle, &model, &train).unwrap();
        assert!(result.aggregate.degenerate_std);
        assert_eq!(result.aggregate.std_accuracy, 0.0);
    }

    #[test]
    fn ablation_runs_four_variants_with_shared_seeds() {
        let bundle = sbm_bundle();
        let (model, mut train) = quick_config();
        train.max_epochs = 5;
        train.patience = 5;
        let results = ablation_suite::<f64>(&bundle, &model, &train).unwrap();
        assert_eq!(results.len(), 4);
        let modes: Vec<Localization> = results.iter().map(|(m, _)| *m).collect();
        assert_eq!(modes, ABLATION_VARIANTS.to_vec());
        for (_, r) in &results {
            assert_eq!(r.per_seed[0].seed, train.seeds[0]);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = TrainConfig {
            seeds: vec![],
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(TrainError::NoSeeds)));
        let bad = TrainConfig {
            patience: 501,
            ..TrainConfig::default()
        };
        assert!(matches!(
            bad.validate(),
            Err(TrainError::PatienceExceedsEpochs { .. })
        ));
    }
}
