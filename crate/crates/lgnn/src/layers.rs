//! GNN layers with node-level and edge-level localization.
//!
//! A layer computes, for every context edge `(u -> v)` with `u ∈ C_v`, the
//! message `W_v h_u ⊙ a_uv + b_uv` and aggregates messages per target node.
//! The node-localized weight `W_v = W ⊙ [(a_v)ₓ]ᵀ + [(b_v)ₓ]ᵀ` is never
//! materialized; the algebraic identity
//! `W_v h = W (a_v ⊙ h) + (b_v · h) 1` is used instead.
//!
//! Base aggregators: context-mean (GCN), attention-weighted sum (GAT) and
//! sum + 2-layer MLP (GIN). A FiLM variant conditions its gates on the target
//! node's own state only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::GraphBundle;
use crate::model::{ParamGroup, ParamId, ParamRegistry};
use crate::real::Real;
use crate::tensor::{Matrix, Result, Tape, Tensor};

/// Slope of the leaky ReLU used for attention scoring (GAT convention).
pub const ATTENTION_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Gcn,
    Gat,
    Gin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Localization {
    #[default]
    None,
    Node,
    Edge,
    Both,
    Film,
}

impl Localization {
    pub fn node_level(self) -> bool {
        matches!(self, Localization::Node | Localization::Both)
    }
    pub fn edge_level(self) -> bool {
        matches!(self, Localization::Edge | Localization::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply<F: Real>(self, tape: &mut Tape<F>, x: Tensor) -> Result<Tensor> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => Ok(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GcnNorm {
    /// Plain mean over `C_v` (the literal aggregation of the layer equation).
    ContextMean,
    /// Symmetric `1/sqrt((deg u + 1)(deg v + 1))` normalization.
    Sym,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub localization: Localization,
    /// Attention heads, concatenated (GAT only).
    pub heads: usize,
    /// Bottleneck width for node gates on high-dimensional inputs.
    pub gate_bottleneck: Option<usize>,
    /// Final activation; identity on the output layer.
    pub activation: Activation,
    pub gate_activation: Activation,
    pub gcn_norm: GcnNorm,
    /// Hidden width of the GIN MLP (also the message width for GIN).
    pub gin_mlp_hidden: usize,
}

impl LayerSpec {
    /// Width of a single per-edge message.
    pub fn message_dim(&self) -> usize {
        match self.kind {
            LayerKind::Gin => self.gin_mlp_hidden,
            _ => self.out_dim,
        }
    }

    /// Output width of the whole layer (heads concatenated for GAT).
    pub fn layer_out_dim(&self) -> usize {
        match self.kind {
            LayerKind::Gat => self.heads * self.out_dim,
            _ => self.out_dim,
        }
    }
}

/// Flattened context-edge structure of a graph, precomputed once per run.
#[derive(Debug, Clone)]
pub struct GraphTopo {
    pub num_nodes: usize,
    /// Source node `u` of each context edge `(u -> v)`.
    pub edge_src: Vec<usize>,
    /// Target node `v` of each context edge.
    pub edge_dst: Vec<usize>,
    /// `1/sqrt((deg u + 1)(deg v + 1))` per context edge.
    pub sym_coeff: Vec<f64>,
}

impl GraphTopo {
    pub fn from_bundle(bundle: &GraphBundle) -> Self {
        let src = bundle.ctx.edge_src().to_vec();
        let dst = bundle.ctx.edge_dst().to_vec();
        let sym_coeff = src
            .iter()
            .zip(&dst)
            .map(|(&u, &v)| {
                let du = bundle.ctx.context_size(u) as f64;
                let dv = bundle.ctx.context_size(v) as f64;
                1.0 / (du * dv).sqrt()
            })
            .collect();
        GraphTopo {
            num_nodes: bundle.num_nodes,
            edge_src: src,
            edge_dst: dst,
            sym_coeff,
        }
    }

    pub fn num_context_edges(&self) -> usize {
        self.edge_src.len()
    }
}

/// Scale/shift tensors produced during one forward pass, for the gate
/// regularizer of the training objective.
#[derive(Debug, Default)]
pub struct GateState {
    pub scales: Vec<Tensor>,
    pub shifts: Vec<Tensor>,
}

impl GateState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, scale: Tensor, shift: Tensor) {
        self.scales.push(scale);
        self.shifts.push(shift);
    }

    /// Total element count of all recorded scales (|A|).
    pub fn scale_elements<F: Real>(&self, tape: &Tape<F>) -> usize {
        self.scales.iter().map(|&t| tape.value(t).len()).sum()
    }

    /// Total element count of all recorded shifts (|B|).
    pub fn shift_elements<F: Real>(&self, tape: &Tape<F>) -> usize {
        self.shifts.iter().map(|&t| tape.value(t).len()).sum()
    }
}

/// Mean of the context states: row `v` of the result is the mean of `h_u`
/// over `u ∈ C_v` (self included).
pub fn context_mean<F: Real>(tape: &mut Tape<F>, h: Tensor, topo: &GraphTopo) -> Result<Tensor> {
    let gathered = tape.gather_rows(h, &topo.edge_src)?;
    tape.scatter_mean(gathered, &topo.edge_dst, topo.num_nodes)
}

/// Per-edge message under the node-localized weight, via the identity
/// `W_v h = W (a_v ⊙ h) + (b_v · h) 1` (no per-node matrices materialized).
///
/// `h_rows`, `a_rows`, `b_rows` are already aligned per context edge: row `e`
/// holds `h_u` for the edge's source and the gates of its target.
pub fn localized_message<F: Real>(
    tape: &mut Tape<F>,
    w: Tensor,
    h_rows: Tensor,
    a_rows: Tensor,
    b_rows: Tensor,
) -> Result<Tensor> {
    let scaled = tape.mul(h_rows, a_rows)?;
    let wpart = tape.matmul_nt(scaled, w)?;
    let bh = tape.mul(b_rows, h_rows)?;
    let bdot = tape.row_sum(bh)?;
    tape.add_col(wpart, bdot)
}

#[derive(Debug, Clone)]
enum NodeGateParams {
    Full {
        m_a: ParamId,
        m_b: ParamId,
    },
    Bottleneck {
        m_a1: ParamId,
        m_a2: ParamId,
        m_b1: ParamId,
        m_b2: ParamId,
    },
}

/// One GNN layer: parameter handles plus the spec needed to run it.
#[derive(Debug, Clone)]
pub struct Layer {
    pub spec: LayerSpec,
    /// Global weight, one per head.
    w: Vec<ParamId>,
    /// Attention vectors as `1 x 2*out_dim`, one per head (GAT).
    att: Vec<ParamId>,
    /// Second MLP weight (GIN): `out_dim x gin_mlp_hidden`.
    gin_mlp: Option<ParamId>,
    node_gate: Option<NodeGateParams>,
    /// `N_a`, `N_b`: `message_dim x 2*in_dim`.
    edge_gate: Option<(ParamId, ParamId)>,
    /// FiLM gate matrices: `message_dim x in_dim` each.
    film_gate: Option<(ParamId, ParamId)>,
}

fn glorot<F: Real>(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix<F> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| F::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

impl Layer {
    /// Register all parameters for this layer. Weight matrices use Glorot
    /// initialization; every gate matrix starts at zero so training begins at
    /// the exact global model. No gate layer has a bias.
    pub fn new<F: Real>(
        spec: LayerSpec,
        registry: &mut ParamRegistry<F>,
        rng: &mut impl Rng,
        prefix: &str,
    ) -> Self {
        let heads = match spec.kind {
            LayerKind::Gat => spec.heads,
            _ => 1,
        };
        let msg_dim = spec.message_dim();
        let mut w = Vec::new();
        let mut att = Vec::new();
        for k in 0..heads {
            let name = if heads == 1 {
                format!("{prefix}.w")
            } else {
                format!("{prefix}.head{k}.w")
            };
            w.push(registry.add(
                &name,
                ParamGroup::Global,
                glorot(msg_dim, spec.in_dim, rng),
            ));
            if spec.kind == LayerKind::Gat {
                att.push(registry.add(
                    &format!("{prefix}.head{k}.att"),
                    ParamGroup::Global,
                    glorot(1, 2 * spec.out_dim, rng),
                ));
            }
        }
        let gin_mlp = (spec.kind == LayerKind::Gin).then(|| {
            registry.add(
                &format!("{prefix}.mlp2"),
                ParamGroup::Global,
                glorot(spec.out_dim, spec.gin_mlp_hidden, rng),
            )
        });
        let node_gate = spec.localization.node_level().then(|| match spec.gate_bottleneck {
            Some(k) => NodeGateParams::Bottleneck {
                m_a1: registry.add(
                    &format!("{prefix}.node_gate.m_a1"),
                    ParamGroup::Localization,
                    Matrix::zeros(k, spec.in_dim),
                ),
                m_a2: registry.add(
                    &format!("{prefix}.node_gate.m_a2"),
                    ParamGroup::Localization,
                    Matrix::zeros(spec.in_dim, k),
                ),
                m_b1: registry.add(
                    &format!("{prefix}.node_gate.m_b1"),
                    ParamGroup::Localization,
                    Matrix::zeros(k, spec.in_dim),
                ),
                m_b2: registry.add(
                    &format!("{prefix}.node_gate.m_b2"),
                    ParamGroup::Localization,
                    Matrix::zeros(spec.in_dim, k),
                ),
            },
            None => NodeGateParams::Full {
                m_a: registry.add(
                    &format!("{prefix}.node_gate.m_a"),
                    ParamGroup::Localization,
                    Matrix::zeros(spec.in_dim, spec.in_dim),
                ),
                m_b: registry.add(
                    &format!("{prefix}.node_gate.m_b"),
                    ParamGroup::Localization,
                    Matrix::zeros(spec.in_dim, spec.in_dim),
                ),
            },
        });
        let edge_gate = spec.localization.edge_level().then(|| {
            (
                registry.add(
                    &format!("{prefix}.edge_gate.n_a"),
                    ParamGroup::Localization,
                    Matrix::zeros(msg_dim, 2 * spec.in_dim),
                ),
                registry.add(
                    &format!("{prefix}.edge_gate.n_b"),
                    ParamGroup::Localization,
                    Matrix::zeros(msg_dim, 2 * spec.in_dim),
                ),
            )
        });
        let film_gate = (spec.localization == Localization::Film).then(|| {
            (
                registry.add(
                    &format!("{prefix}.film.g_a"),
                    ParamGroup::Localization,
                    Matrix::zeros(msg_dim, spec.in_dim),
                ),
                registry.add(
                    &format!("{prefix}.film.g_b"),
                    ParamGroup::Localization,
                    Matrix::zeros(msg_dim, spec.in_dim),
                ),
            )
        });
        Layer {
            spec,
            w,
            att,
            gin_mlp,
            node_gate,
            edge_gate,
            film_gate,
        }
    }

    /// `a = act(x M_a^T) + 1`, `b = act(x M_b^T)`; the bottlenecked form chains
    /// two linear maps with the same activation between them.
    fn gates<F: Real>(
        &self,
        tape: &mut Tape<F>,
        leaves: &[Tensor],
        x: Tensor,
        which: &NodeGateParams,
    ) -> Result<(Tensor, Tensor)> {
        let act = self.spec.gate_activation;
        let gate = |tape: &mut Tape<F>, w1: ParamId, w2: Option<ParamId>| -> Result<Tensor> {
            let y = tape.matmul_nt(x, leaves[w1.index()])?;
            let y = act.apply(tape, y)?;
            match w2 {
                Some(w2) => {
                    let y = tape.matmul_nt(y, leaves[w2.index()])?;
                    act.apply(tape, y)
                }
                None => Ok(y),
            }
        };
        let (raw_a, raw_b) = match *which {
            NodeGateParams::Full { m_a, m_b } => (gate(tape, m_a, None)?, gate(tape, m_b, None)?),
            NodeGateParams::Bottleneck {
                m_a1,
                m_a2,
                m_b1,
                m_b2,
            } => (
                gate(tape, m_a1, Some(m_a2))?,
                gate(tape, m_b1, Some(m_b2))?,
            ),
        };
        let a = tape.add_scalar(raw_a, F::one())?;
        Ok((a, raw_b))
    }

    /// Full layer forward. Gates are applied to the per-edge messages before
    /// aggregation (for GAT, before attention weighting); every gate tensor
    /// produced is recorded in `gates`.
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        leaves: &[Tensor],
        topo: &GraphTopo,
        h: Tensor,
        gates: &mut GateState,
    ) -> Result<Tensor> {
        let n = topo.num_nodes;
        let dst = &topo.edge_dst;
        let h_src = tape.gather_rows(h, &topo.edge_src)?;

        let node_rows = match &self.node_gate {
            Some(ng) => {
                let ctx = tape.scatter_mean(h_src, dst, n)?;
                let (a_v, b_v) = self.gates(tape, leaves, ctx, ng)?;
                gates.record(a_v, b_v);
                Some((tape.gather_rows(a_v, dst)?, tape.gather_rows(b_v, dst)?))
            }
            None => None,
        };

        let edge_mod = match self.edge_gate {
            Some((n_a, n_b)) => {
                let h_dst = tape.gather_rows(h, dst)?;
                // target state first, then source (edge context ordering)
                let c = tape.concat_cols(h_dst, h_src)?;
                let act = self.spec.gate_activation;
                let ra = tape.matmul_nt(c, leaves[n_a.index()])?;
                let ra = act.apply(tape, ra)?;
                let a_uv = tape.add_scalar(ra, F::one())?;
                let rb = tape.matmul_nt(c, leaves[n_b.index()])?;
                let b_uv = act.apply(tape, rb)?;
                gates.record(a_uv, b_uv);
                Some((a_uv, b_uv))
            }
            None => None,
        };

        let film_rows = match self.film_gate {
            Some((g_a, g_b)) => {
                let act = self.spec.gate_activation;
                let ra = tape.matmul_nt(h, leaves[g_a.index()])?;
                let ra = act.apply(tape, ra)?;
                let gamma = tape.add_scalar(ra, F::one())?;
                let rb = tape.matmul_nt(h, leaves[g_b.index()])?;
                let beta = act.apply(tape, rb)?;
                gates.record(gamma, beta);
                Some((tape.gather_rows(gamma, dst)?, tape.gather_rows(beta, dst)?))
            }
            None => None,
        };

        let mut head_out = Vec::with_capacity(self.w.len());
        for (k, &wid) in self.w.iter().enumerate() {
            let w = leaves[wid.index()];
            let mut msg = match node_rows {
                Some((a_rows, b_rows)) => localized_message(tape, w, h_src, a_rows, b_rows)?,
                None => tape.matmul_nt(h_src, w)?,
            };
            if let Some(&(a_uv, b_uv)) = edge_mod.as_ref() {
                let scaled = tape.mul(msg, a_uv)?;
                msg = tape.add(scaled, b_uv)?;
            }
            if let Some(&(gamma_rows, beta_rows)) = film_rows.as_ref() {
                let scaled = tape.mul(msg, gamma_rows)?;
                msg = tape.add(scaled, beta_rows)?;
            }
            let out = match self.spec.kind {
                LayerKind::Gcn => match self.spec.gcn_norm {
                    GcnNorm::ContextMean => tape.scatter_mean(msg, dst, n)?,
                    GcnNorm::Sym => {
                        let coeff = Matrix::from_vec(
                            topo.sym_coeff.len(),
                            1,
                            topo.sym_coeff.iter().map(|&c| F::from_f64(c)).collect(),
                        )
                        .expect("sized");
                        let coeff = tape.constant(coeff)?;
                        let scaled = tape.mul_col(msg, coeff)?;
                        tape.scatter_sum(scaled, dst, n)?
                    }
                },
                LayerKind::Gin => {
                    let summed = tape.scatter_sum(msg, dst, n)?;
                    let hidden = tape.relu(summed)?;
                    tape.matmul_nt(hidden, leaves[self.gin_mlp.expect("gin").index()])?
                }
                LayerKind::Gat => {
                    let transformed = tape.matmul_nt(h, w)?;
                    let t_dst = tape.gather_rows(transformed, dst)?;
                    let score_in = tape.concat_cols(t_dst, msg)?;
                    let raw = tape.matmul_nt(score_in, leaves[self.att[k].index()])?;
                    let scores = tape.leaky_relu(raw, F::from_f64(ATTENTION_SLOPE))?;
                    let alpha = tape.segment_softmax(scores, dst, n)?;
                    let weighted = tape.mul_col(msg, alpha)?;
                    tape.scatter_sum(weighted, dst, n)?
                }
            };
            head_out.push(out);
        }
        let mut out = head_out[0];
        for &next in &head_out[1..] {
            out = tape.concat_cols(out, next)?;
        }
        self.spec.activation.apply(tape, out)
    }

    pub fn weight_ids(&self) -> &[ParamId] {
        &self.w
    }
}
