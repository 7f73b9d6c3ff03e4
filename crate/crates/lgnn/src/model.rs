//! Model assembly: parameter registry, multi-layer forward, the regularized
//! training objective and parameter counting.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::layers::{
    Activation, GateState, GcnNorm, GraphTopo, Layer, LayerKind, LayerSpec, Localization,
};
use crate::real::Real;
use crate::tensor::{Matrix, Result, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Θ_G: weight matrices, attention vectors, MLP weights.
    Global,
    /// Θ_L: the dense maps that generate gates.
    Localization,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct ParamEntry<F> {
    name: String,
    group: ParamGroup,
    value: Matrix<F>,
}

/// All learnable tensors, each tagged Global or Localization exactly once.
#[derive(Debug, Clone, Default)]
pub struct ParamRegistry<F> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Real> ParamRegistry<F> {
    pub fn new() -> Self {
        ParamRegistry {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, value: Matrix<F>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.to_string(),
            group,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn value(&self, id: ParamId) -> &Matrix<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix<F> {
        &mut self.entries[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Register every parameter as a `requires_grad` leaf on a fresh tape.
    /// The returned vector is indexed by `ParamId::index`.
    pub fn push_leaves(&self, tape: &mut Tape<F>) -> Result<Vec<Tensor>> {
        self.entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), true))
            .collect()
    }

    pub fn count(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Immutable snapshot of all values (for best-epoch restore).
    pub fn snapshot(&self) -> Vec<Matrix<F>> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Matrix<F>]) {
        for (e, s) in self.entries.iter_mut().zip(snapshot) {
            e.value = s.clone();
        }
    }

    pub fn cast<G: Real>(&self) -> ParamRegistry<G> {
        ParamRegistry {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    group: e.group,
                    value: e.value.cast(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gcn,
    Gat,
    Gin,
}

/// High-level model configuration; layer specs are derived from it plus the
/// dataset dimensions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub localization: Localization,
    pub num_layers: usize,
    pub hidden_dim: usize,
    /// Attention heads on hidden GAT layers; the output layer uses one head.
    pub heads: usize,
    pub gcn_norm: GcnNorm,
    pub hidden_activation: Activation,
    pub gate_activation: Activation,
    /// Node-gate bottleneck engages when the layer input dimension exceeds
    /// this; the bottleneck width is the layer's output dimension.
    pub bottleneck_above: usize,
    pub lambda_g: f64,
    pub lambda_l: f64,
    pub lambda: f64,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Gcn,
            localization: Localization::None,
            num_layers: 2,
            hidden_dim: 8,
            heads: 8,
            gcn_norm: GcnNorm::ContextMean,
            hidden_activation: Activation::Relu,
            gate_activation: Activation::Tanh,
            bottleneck_above: 64,
            lambda_g: 5e-4,
            lambda_l: 1.0,
            lambda: 1.0,
            dropout: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn layer_kind(&self) -> LayerKind {
        match self.kind {
            ModelKind::Gcn => LayerKind::Gcn,
            ModelKind::Gat => LayerKind::Gat,
            ModelKind::Gin => LayerKind::Gin,
        }
    }

    /// Expand into per-layer specs for a graph with the given input feature
    /// dimension and class count.
    pub fn layer_specs(&self, feature_dim: usize, num_classes: usize) -> Vec<LayerSpec> {
        let kind = self.layer_kind();
        let mut specs = Vec::with_capacity(self.num_layers);
        let mut in_dim = feature_dim;
        for l in 0..self.num_layers {
            let last = l + 1 == self.num_layers;
            let out_dim = if last { num_classes } else { self.hidden_dim };
            let heads = if kind == LayerKind::Gat && !last {
                self.heads
            } else {
                1
            };
            let bottleneck = (self.localization.node_level() && in_dim > self.bottleneck_above)
                .then_some(out_dim);
            let spec = LayerSpec {
                kind,
                in_dim,
                out_dim,
                localization: self.localization,
                heads,
                gate_bottleneck: bottleneck,
                activation: if last {
                    Activation::Identity
                } else {
                    self.hidden_activation
                },
                gate_activation: self.gate_activation,
                gcn_norm: self.gcn_norm,
                gin_mlp_hidden: out_dim,
            };
            in_dim = spec.layer_out_dim();
            specs.push(spec);
        }
        specs
    }
}

/// A built model: layers with registered parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub dropout: f64,
}

impl Model {
    pub fn build<F: Real>(
        config: &ModelConfig,
        feature_dim: usize,
        num_classes: usize,
        registry: &mut ParamRegistry<F>,
        rng: &mut impl Rng,
    ) -> Model {
        let layers = config
            .layer_specs(feature_dim, num_classes)
            .into_iter()
            .enumerate()
            .map(|(l, spec)| Layer::new(spec, registry, rng, &format!("layer{l}")))
            .collect();
        Model {
            layers,
            dropout: config.dropout,
        }
    }

    /// Full forward pass to row-stochastic class probabilities. Dropout is
    /// applied to layer inputs only when `training`; all gate tensors from
    /// the pass are returned for the loss regularizer.
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        leaves: &[Tensor],
        topo: &GraphTopo,
        features: Tensor,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<(Tensor, GateState)> {
        let mut gates = GateState::new();
        let mut h = features;
        for layer in &self.layers {
            if training && self.dropout > 0.0 {
                let keep = 1.0 - self.dropout;
                let shape = tape.shape(h);
                let mask: Vec<F> = (0..shape.rows * shape.cols)
                    .map(|_| {
                        if rng.gen_range(0.0..1.0) < keep {
                            F::from_f64(1.0 / keep)
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                h = tape.dropout(h, mask)?;
            }
            h = layer.forward(tape, leaves, topo, h, &mut gates)?;
        }
        let probs = tape.softmax_rows(h)?;
        Ok((probs, gates))
    }
}

/// Scalar components of the objective, for logging.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cross_entropy: f64,
    pub global_reg: f64,
    pub local_reg: f64,
    pub gate_penalty: f64,
}

/// The full objective: summed cross-entropy over labeled nodes, squared-norm
/// penalties on Θ_G and Θ_L, and the mean-normalized gate penalty pulling
/// scales to one and shifts to zero.
#[allow(clippy::too_many_arguments)]
pub fn loss_total<F: Real>(
    tape: &mut Tape<F>,
    probs: Tensor,
    labels: &[usize],
    train_mask: &[usize],
    registry: &ParamRegistry<F>,
    leaves: &[Tensor],
    gates: &GateState,
    lambda_g: f64,
    lambda_l: f64,
    lambda: f64,
) -> Result<(Tensor, LossBreakdown)> {
    let shape = tape.shape(probs);
    let clamped = tape.clamp_min(probs, F::from_f64(1e-12))?;
    let logp = tape.log(clamped)?;
    let mut onehot = Matrix::zeros(shape.rows, shape.cols);
    for &v in train_mask {
        onehot.set(v, labels[v], F::one());
    }
    let mask = tape.constant(onehot)?;
    let picked = tape.mul(logp, mask)?;
    let summed = tape.sum_all(picked)?;
    let ce = tape.scale(summed, -F::one())?;

    let mut breakdown = LossBreakdown::default();
    let mut total = ce;
    breakdown.cross_entropy = tape.value(ce).get(0, 0).as_f64();

    let group_norm = |tape: &mut Tape<F>, group: ParamGroup| -> Result<Option<Tensor>> {
        let mut acc: Option<Tensor> = None;
        for id in registry.ids() {
            if registry.group(id) != group {
                continue;
            }
            let leaf = leaves[id.index()];
            let sq = tape.mul(leaf, leaf)?;
            let s = tape.sum_all(sq)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, s)?,
                None => s,
            });
        }
        Ok(acc)
    };

    if lambda_g > 0.0 {
        if let Some(norm) = group_norm(tape, ParamGroup::Global)? {
            let term = tape.scale(norm, F::from_f64(lambda_g))?;
            breakdown.global_reg = tape.value(term).get(0, 0).as_f64();
            total = tape.add(total, term)?;
        }
    }
    if lambda_l > 0.0 {
        if let Some(norm) = group_norm(tape, ParamGroup::Localization)? {
            let term = tape.scale(norm, F::from_f64(lambda_l))?;
            breakdown.local_reg = tape.value(term).get(0, 0).as_f64();
            total = tape.add(total, term)?;
        }
    }
    if lambda > 0.0 && !gates.scales.is_empty() {
        let a_elems = gates.scale_elements(tape);
        let b_elems = gates.shift_elements(tape);
        let mut penalty: Option<Tensor> = None;
        for &a in &gates.scales {
            let centered = tape.add_scalar(a, -F::one())?;
            let sq = tape.mul(centered, centered)?;
            let s = tape.sum_all(sq)?;
            let s = tape.scale(s, F::from_f64(1.0 / a_elems as f64))?;
            penalty = Some(match penalty {
                Some(p) => tape.add(p, s)?,
                None => s,
            });
        }
        for &b in &gates.shifts {
            let sq = tape.mul(b, b)?;
            let s = tape.sum_all(sq)?;
            let s = tape.scale(s, F::from_f64(1.0 / b_elems as f64))?;
            penalty = Some(match penalty {
                Some(p) => tape.add(p, s)?,
                None => s,
            });
        }
        if let Some(p) = penalty {
            let term = tape.scale(p, F::from_f64(lambda))?;
            breakdown.gate_penalty = tape.value(term).get(0, 0).as_f64();
            total = tape.add(total, term)?;
        }
    }
    breakdown.total = tape.value(total).get(0, 0).as_f64();
    Ok((total, breakdown))
}

/// Per-group and total parameter counts for a config on a dataset of the
/// given dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub global: usize,
    pub localization: usize,
    pub total: usize,
}

pub fn param_count(config: &ModelConfig, feature_dim: usize, num_classes: usize) -> ParamCounts {
    use rand::SeedableRng;
    let mut registry = ParamRegistry::<f64>::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    Model::build(config, feature_dim, num_classes, &mut registry, &mut rng);
    ParamCounts {
        global: registry.count(ParamGroup::Global),
        localization: registry.count(ParamGroup::Localization),
        total: registry.total(),
    }
}

/// Per-parameter ledger rows for the `params` command.
pub fn param_ledger(
    config: &ModelConfig,
    feature_dim: usize,
    num_classes: usize,
) -> Vec<(String, ParamGroup, usize)> {
    use rand::SeedableRng;
    let mut registry = ParamRegistry::<f64>::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    Model::build(config, feature_dim, num_classes, &mut registry, &mut rng);
    registry
        .ids()
        .map(|id| {
            (
                registry.name(id).to_string(),
                registry.group(id),
                registry.value(id).len(),
            )
        })
        .collect()
}

/// Build a model and compute probabilities in inference mode on a bundle,
/// convenience for tests and evaluation.
pub fn forward_probs<F: Real>(
    model: &Model,
    registry: &ParamRegistry<F>,
    topo: &GraphTopo,
    features: &Matrix<F>,
    rng: &mut impl Rng,
) -> Result<Matrix<F>> {
    let mut tape = Tape::new();
    let leaves = registry.push_leaves(&mut tape)?;
    let x = tape.constant(features.clone())?;
    let (probs, _) = model.forward(&mut tape, &leaves, topo, x, false, rng)?;
    Ok(tape.value(probs).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{synthetic_graph, SyntheticKind, SyntheticSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cora_dims() -> (usize, usize) {
        (1433, 7)
    }

    #[test]
    fn gcn_cora_param_count() {
        let (d, k) = cora_dims();
        let config = ModelConfig::default();
        let counts = param_count(&config, d, k);
        assert_eq!(counts.total, 1433 * 8 + 8 * 7); // 11,520
        assert_eq!(counts.localization, 0);
    }

    #[test]
    fn lgcn_cora_param_count() {
        let (d, k) = cora_dims();
        let config = ModelConfig {
            localization: Localization::Both,
            ..ModelConfig::default()
        };
        let counts = param_count(&config, d, k);
        // node gates layer 1 (bottleneck k=8): 2 * (8*1433 + 1433*8) = 45,856
        // edge gates layer 1: 2 * 8*2866 = 45,856
        // node gates layer 2 (full rank 8x8): 128
        // edge gates layer 2: 2 * 7*16 = 224
        assert_eq!(counts.localization, 45_856 + 45_856 + 128 + 224);
        assert_eq!(counts.total, 103_584);
    }

    #[test]
    fn gcn_film_cora_param_count() {
        let (d, k) = cora_dims();
        let config = ModelConfig {
            localization: Localization::Film,
            ..ModelConfig::default()
        };
        let counts = param_count(&config, d, k);
        // film layer 1: 2 * 8*1433 = 22,928; layer 2: 2 * 7*8 = 112
        assert_eq!(counts.total, 11_520 + 22_928 + 112); // 34,560
    }

    #[test]
    fn gat_cora_param_count() {
        let (d, k) = cora_dims();
        let config = ModelConfig {
            kind: ModelKind::Gat,
            ..ModelConfig::default()
        };
        let counts = param_count(&config, d, k);
        // 8 heads * (1433*8 + 2*8) + (64*7 + 2*7) = 91,840 + 462
        assert_eq!(counts.total, 92_302);
    }

    #[test]
    fn gcn64_param_count_matches_ledger() {
        let (d, k) = cora_dims();
        let config = ModelConfig {
            hidden_dim: 64,
            ..ModelConfig::default()
        };
        let counts = param_count(&config, d, k);
        assert_eq!(counts.total, 1433 * 64 + 64 * 7); // ~92K
    }

    fn toy_bundle() -> crate::graph::GraphBundle {
        synthetic_graph(&SyntheticSpec {
            kind: SyntheticKind::Er { p: 0.5 },
            n: 12,
            feature_dim: 5,
            num_classes: 2,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn forward_rows_are_stochastic() {
        let bundle = toy_bundle();
        let config = ModelConfig {
            localization: Localization::Both,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        let mut registry = ParamRegistry::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::build(&config, 5, 2, &mut registry, &mut rng);
        let topo = GraphTopo::from_bundle(&bundle);
        let probs =
            forward_probs(&model, &registry, &topo, &bundle.features.cast(), &mut rng).unwrap();
        for i in 0..probs.rows() {
            let s: f64 = probs.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_gates_match_unlocalized_forward() {
        let bundle = toy_bundle();
        let topo = GraphTopo::from_bundle(&bundle);
        let base = ModelConfig {
            dropout: 0.0,
            ..ModelConfig::default()
        };
        let localized = ModelConfig {
            localization: Localization::Both,
            ..base.clone()
        };
        let mut reg_base = ParamRegistry::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m_base = Model::build(&base, 5, 2, &mut reg_base, &mut rng);
        let mut reg_loc = ParamRegistry::<f64>::new();
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        let m_loc = Model::build(&localized, 5, 2, &mut reg_loc, &mut rng2);
        // copy the global weights across by name
        for id in reg_base.ids() {
            let name = reg_base.name(id).to_string();
            let value = reg_base.value(id).clone();
            let targets: Vec<ParamId> = reg_loc
                .ids()
                .filter(|&lid| reg_loc.name(lid) == name)
                .collect();
            for lid in targets {
                *reg_loc.value_mut(lid) = value.clone();
            }
        }
        let feats: Matrix<f64> = bundle.features.cast();
        let p_base = forward_probs(&m_base, &reg_base, &topo, &feats, &mut rng).unwrap();
        let p_loc = forward_probs(&m_loc, &reg_loc, &topo, &feats, &mut rng).unwrap();
        for (a, b) in p_base.data().iter().zip(p_loc.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_half_probability() {
        let mut tape = Tape::<f64>::new();
        let probs = tape
            .leaf(Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap(), false)
            .unwrap();
        let registry = ParamRegistry::<f64>::new();
        let gates = GateState::new();
        let (loss, parts) = loss_total(
            &mut tape,
            probs,
            &[0],
            &[0],
            &registry,
            &[],
            &gates,
            0.0,
            0.0,
            0.0,
        )
        .unwrap();
        assert!((tape.value(loss).get(0, 0) - std::f64::consts::LN_2).abs() < 1e-4);
        assert!((parts.cross_entropy - std::f64::consts::LN_2).abs() < 1e-4);
    }

    #[test]
    fn identity_gates_give_zero_penalty_and_lambda_is_linear() {
        let bundle = toy_bundle();
        let topo = GraphTopo::from_bundle(&bundle);
        let config = ModelConfig {
            localization: Localization::Both,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        let mut registry = ParamRegistry::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Model::build(&config, 5, 2, &mut registry, &mut rng);
        let train_mask: Vec<usize> = (0..6).collect();

        let run = |registry: &ParamRegistry<f64>, lambda: f64| -> LossBreakdown {
            let mut tape = Tape::new();
            let leaves = registry.push_leaves(&mut tape).unwrap();
            let x = tape.constant(bundle.features.cast()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (probs, gates) = model
                .forward(&mut tape, &leaves, &topo, x, false, &mut rng)
                .unwrap();
            let (_, parts) = loss_total(
                &mut tape,
                probs,
                &bundle.labels,
                &train_mask,
                registry,
                &leaves,
                &gates,
                0.0,
                0.0,
                lambda,
            )
            .unwrap();
            parts
        };

        // gate matrices start at zero => identity gates => zero penalty
        let parts = run(&registry, 1.0);
        assert_eq!(parts.gate_penalty, 0.0);

        // perturb a gate matrix, check penalty doubles with lambda
        let gate_ids: Vec<ParamId> = registry
            .ids()
            .filter(|&id| registry.name(id).contains("node_gate.m_a"))
            .collect();
        for id in gate_ids {
            registry.value_mut(id).data_mut()[0] = 0.3;
        }
        let p1 = run(&registry, 1.0).gate_penalty;
        let p2 = run(&registry, 2.0).gate_penalty;
        assert!(p1 > 0.0);
        assert!((p2 - 2.0 * p1).abs() < 1e-9 * p2.abs().max(1.0));
    }

    #[test]
    fn zero_global_params_zero_global_reg() {
        let mut registry = ParamRegistry::<f64>::new();
        registry.add("w", ParamGroup::Global, Matrix::zeros(3, 3));
        let mut tape = Tape::new();
        let probs = tape
            .leaf(Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap(), false)
            .unwrap();
        let leaves = registry.push_leaves(&mut tape).unwrap();
        let gates = GateState::new();
        let (_, parts) = loss_total(
            &mut tape,
            probs,
            &[0],
            &[0],
            &registry,
            &leaves,
            &gates,
            5e-4,
            0.0,
            0.0,
        )
        .unwrap();
        assert_eq!(parts.global_reg, 0.0);
    }
}
