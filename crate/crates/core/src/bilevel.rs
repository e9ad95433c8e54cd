//! Second step: target-only training under pseudo-label supervision, with
//! an optional stochastic feature head and an outer loop that tunes the
//! labeling function by implicit differentiation.
//!
//! Inner objective on a target batch of size `B`:
//!
//! `L_trn = 1/B Σ_i 𝟙(max p_i ≥ τ) CE(g(z_i), ŷ_i) + λ mean_i (m − Σ log σ_i)⁺`
//!
//! plus `½ wd ‖Ψ‖²` when weight decay is configured. The outer objective
//! is the batch mean of `Σ log σ`. The hypergradient is
//! `−∂/∂θ ⟨(H + δI)⁻¹ ∇_Ψ L_val, ∇_Ψ L_trn⟩`, with the inverse applied by a
//! truncated Neumann series.

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    grad_and_hvp, inner_second_order, outer_value_and_grad, BilevelObjective, Graph, Objective, ParamSet, Scalar, Var,
};
use crate::datamodel::{split_held_out, BatchCursor, BatchIterator, LabeledSet, MultiDomainDataset};
use crate::error::{Error, Result};
use crate::first_step::{predict_with, LabelingFunctionState, LabelingNet};
use crate::nn::{linear, BackboneSpec, Classifier, StageHook};
use crate::optim::{LrSchedule, Sgd, SgdConfig};
use crate::pseudolabel::{argmax, gumbel_noise, gumbel_soft_label_graph, update_adaptive_threshold, ThresholdMode, ThresholdState};
use crate::stochastic_head::{draw_epsilon, entropy_max_loss_graph, head_forward, mean_uncertainty_graph, StochasticHeadParams};

/// `M_Ψ`: backbone `Ψ₀`, optional Gaussian head `{Ψ_μ, Ψ_σ}`, classifier
/// `Ψ₁`. Parameters are named `backbone.*`, `head.*`, `classifier.*`.
///
/// With a head, the head takes the place of the backbone's final feature
/// layer: the trunk output feeds `μ` and `σ`, and the backbone activation is
/// applied to the sampled pre-activation `z` before the classifier. The
/// hook is ignored on that path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetNet {
    pub backbone: BackboneSpec,
    pub num_classes: usize,
    pub stochastic: bool,
}

/// Nodes of one target-model forward pass.
#[derive(Debug, Clone, Copy)]
pub struct TargetNodes {
    pub logits: Var,
    pub log_sigma: Option<Var>,
}

impl TargetNet {
    fn num_backbone_tensors(&self) -> usize {
        LabelingNet {
            backbone: self.backbone.clone(),
            num_classes: self.num_classes,
        }
        .num_backbone_tensors()
    }

    fn num_tensors(&self) -> usize {
        self.num_backbone_tensors() + if self.stochastic { 4 } else { 2 }
    }

    /// Forward pass. With a stochastic head, `epsilon` selects the sampled
    /// feature; `None` uses `μ`.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        leaves: &[Var],
        x: Var,
        epsilon: Option<&[f64]>,
        hook: Option<StageHook<'_, S>>,
    ) -> Result<TargetNodes> {
        if leaves.len() != self.num_tensors() {
            return Err(Error::shape("target model parameter count mismatch"));
        }
        let nb = self.num_backbone_tensors();
        let (z, log_sigma, k) = if self.stochastic {
            let h = self.backbone.forward_trunk(g, &leaves[..nb - 2], x)?;
            let head = head_forward(g, &leaves[nb - 2..nb + 2], h, epsilon)?;
            let z = self.backbone.activation().apply(g, head.z);
            (z, Some(head.log_sigma), nb + 2)
        } else {
            (self.backbone.forward(g, &leaves[..nb], x, hook)?, None, nb)
        };
        Ok(TargetNodes {
            logits: linear(g, z, leaves[k], leaves[k + 1]),
            log_sigma,
        })
    }
}

impl Classifier for TargetNet {
    fn input_len(&self) -> usize {
        self.backbone.input_len()
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Deterministic (`μ`) path.
    fn logits<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        leaves: &[Var],
        x: Var,
        hook: Option<StageHook<'_, S>>,
    ) -> Result<Var> {
        Ok(self.forward(g, leaves, x, None, hook)?.logits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetModelState {
    pub net: TargetNet,
    pub psi: ParamSet,
    pub optimizer: Sgd,
}

impl TargetModelState {
    /// Copies `F_θ`. When `stochastic`, the final feature layer becomes
    /// `Ψ_μ` and `Ψ_σ` starts at zero (`σ = 1`), so the deterministic path
    /// starts out computing exactly `F_θ`.
    pub fn from_labeling(net: &LabelingNet, theta: &ParamSet, stochastic: bool, sgd: SgdConfig) -> Result<Self> {
        let backbone = theta.subset("backbone.");
        let mut psi = ParamSet::new();
        if stochastic {
            let t = backbone.tensors();
            let nb = t.len();
            if nb < 2 {
                return Err(Error::shape("backbone has no final layer"));
            }
            for p in &t[..nb - 2] {
                psi.push(format!("backbone.{}", p.name), p.rows, p.cols, p.data.clone());
            }
            let head = StochasticHeadParams::from_layer(&t[nb - 2], &t[nb - 1])?;
            psi.extend_prefixed("head.", &head.params);
        } else {
            psi.extend_prefixed("backbone.", &backbone);
        }
        psi.extend_prefixed("classifier.", &theta.subset("classifier."));
        let optimizer = Sgd::new(sgd, psi.num_scalars())?;
        Ok(Self {
            net: TargetNet {
                backbone: net.backbone.clone(),
                num_classes: net.num_classes,
                stochastic,
            },
            psi,
            optimizer,
        })
    }

    pub fn head(&self) -> Option<StochasticHeadParams> {
        self.net
            .stochastic
            .then(|| StochasticHeadParams::from_params(self.psi.subset("head.")).ok())
            .flatten()
    }

    /// Class probabilities on the deterministic path.
    pub fn predict(&self, inputs: &[f64]) -> Result<Vec<Vec<f64>>> {
        predict_with(&self.net, &self.psi, inputs)
    }

    /// Per-instance `Σ log σ` (zero for a model without a head).
    pub fn uncertainty_scores(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        let len = self.net.input_len();
        if !inputs.len().is_multiple_of(len) {
            return Err(Error::shape("inputs are not a multiple of the input length"));
        }
        let n = inputs.len() / len;
        if !self.net.stochastic {
            return Ok(vec![0.0; n]);
        }
        let mut g = Graph::<f64>::new();
        let leaves = self.psi.leaves(&mut g);
        let x = g.constant(inputs, n, len);
        let nodes = self.net.forward(&mut g, &leaves, x, None, None)?;
        let ls = nodes.log_sigma.expect("stochastic net has a head");
        let per = g.sum_rows(ls);
        Ok(g.value(per).to_vec())
    }
}

/// Truncation and scaling of the series `η Σ_{j<J} (I − η(H + δI))ʲ v`.
///
/// The series converges when the spectral radius of `I − η(H + δI)` is
/// below one, i.e. `0 < η (λ + δ) < 2` for every eigenvalue `λ` of `H`.
/// This is not checked.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeumannConfig {
    pub num_terms: usize,
    pub eta: f64,
    pub damping: f64,
}

impl Default for NeumannConfig {
    fn default() -> Self {
        Self {
            num_terms: 20,
            eta: 0.01,
            damping: 1e-3,
        }
    }
}

impl NeumannConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_terms == 0 || !(self.eta > 0.0) || !(self.damping >= 0.0) {
            return Err(Error::config("Neumann series needs J ≥ 1, η > 0 and δ ≥ 0"));
        }
        Ok(())
    }
}

/// Supervision fed to the inner loss.
#[derive(Debug, Clone, PartialEq)]
pub enum InnerLabels {
    /// Fixed class indices (warmup and the naive baseline).
    Hard(Vec<usize>),
    /// Gumbel-softmax labels of `F_θ(x)` with fixed noise, differentiable
    /// in `θ`.
    Gumbel {
        noise: Vec<f64>,
        temperature: f64,
        straight_through: bool,
    },
}

/// One evaluation of the inner and outer objectives: a batch with all its
/// random draws fixed.
#[derive(Debug, Clone)]
pub struct InnerProblem<'a> {
    pub labeling: &'a LabelingNet,
    pub target: &'a TargetNet,
    /// Row-major `[B, input_len]`.
    pub inputs: &'a [f64],
    pub labels: InnerLabels,
    /// Stop-gradient confidence gate per row.
    pub mask: Vec<bool>,
    /// Reparameterization noise `[B, d]`; ignored without a head.
    pub epsilon: Option<Vec<f64>>,
    pub lambda: f64,
    pub margin: f64,
    pub weight_decay: f64,
    /// Batch for the outer loss; the training batch when `None`.
    pub val_inputs: Option<&'a [f64]>,
}

/// Graph nodes of the inner objective's parts.
#[derive(Debug, Clone, Copy)]
pub struct InnerNodes {
    pub ce: Var,
    pub ment: Option<Var>,
    pub total: Var,
}

impl InnerProblem<'_> {
    fn rows(&self) -> usize {
        self.inputs.len() / self.target.input_len()
    }

    fn check(&self) -> Result<()> {
        let len = self.target.input_len();
        if self.inputs.is_empty() || !self.inputs.len().is_multiple_of(len) {
            return Err(Error::shape("inner batch is empty or ragged"));
        }
        if self.mask.len() != self.rows() {
            return Err(Error::shape("mask length differs from the batch"));
        }
        Ok(())
    }

    pub fn nodes<S: Scalar>(&self, g: &mut Graph<S>, outer: &[Var], inner: &[Var]) -> Result<InnerNodes> {
        self.check()?;
        let b = self.rows();
        let c = self.target.num_classes;
        let x = g.constant(self.inputs, b, self.target.input_len());
        let y = match &self.labels {
            InnerLabels::Hard(h) => {
                if h.len() != b || h.iter().any(|&k| k >= c) {
                    return Err(Error::shape("hard labels do not match the batch"));
                }
                let mut onehot = vec![0.0; b * c];
                for (i, &k) in h.iter().enumerate() {
                    onehot[i * c + k] = 1.0;
                }
                g.constant(&onehot, b, c)
            }
            InnerLabels::Gumbel {
                noise,
                temperature,
                straight_through,
            } => {
                let lf = self.labeling.logits(g, outer, x, None)?;
                gumbel_soft_label_graph(g, lf, noise, *temperature, *straight_through)?
            }
        };
        let eps = if self.target.stochastic {
            Some(
                self.epsilon
                    .as_deref()
                    .ok_or_else(|| Error::Contract("stochastic inner loss needs epsilon".into()))?,
            )
        } else {
            None
        };
        let nodes = self.target.forward(g, inner, x, eps, None)?;
        let logp = g.log_softmax(nodes.logits);
        let picked = g.mul(logp, y);
        let w: Vec<f64> = self
            .mask
            .iter()
            .map(|&m| if m { 1.0 / b as f64 } else { 0.0 })
            .collect();
        let wv = g.constant(&w, b, 1);
        let gated = g.mul_col(picked, wv);
        let s = g.sum(gated);
        let ce = g.neg(s);
        let mut total = ce;
        let ment = nodes.log_sigma.map(|ls| entropy_max_loss_graph(g, ls, self.margin));
        if let Some(m) = ment {
            let lm = g.scale(m, self.lambda);
            total = g.add(total, lm);
        }
        if self.weight_decay > 0.0 {
            for &p in inner {
                let sq = g.mul(p, p);
                let s = g.sum(sq);
                let d = g.scale(s, 0.5 * self.weight_decay);
                total = g.add(total, d);
            }
        }
        Ok(InnerNodes { ce, ment, total })
    }
}

impl BilevelObjective for InnerProblem<'_> {
    fn inner_loss<S: Scalar>(&self, g: &mut Graph<S>, outer: &[Var], inner: &[Var]) -> Result<Var> {
        Ok(self.nodes(g, outer, inner)?.total)
    }

    fn outer_loss<S: Scalar>(&self, g: &mut Graph<S>, inner: &[Var]) -> Result<Var> {
        let xs = self.val_inputs.unwrap_or(self.inputs);
        outer_loss_graph(g, self.target, inner, xs)
    }
}

/// Batch mean of `Σ log σ` on the deterministic path.
pub fn outer_loss_graph<S: Scalar>(g: &mut Graph<S>, net: &TargetNet, leaves: &[Var], inputs: &[f64]) -> Result<Var> {
    let len = net.input_len();
    if inputs.is_empty() || !inputs.len().is_multiple_of(len) {
        return Err(Error::shape("validation batch is empty or ragged"));
    }
    let x = g.constant(inputs, inputs.len() / len, len);
    let nodes = net.forward(g, leaves, x, None, None)?;
    let ls = nodes
        .log_sigma
        .ok_or_else(|| Error::Contract("outer loss needs a stochastic head".into()))?;
    Ok(mean_uncertainty_graph(g, ls))
}

/// Values of the inner objective's parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerValue {
    pub ce: f64,
    pub ment: f64,
    pub total: f64,
}

/// Inner objective parts and the flat gradient w.r.t. `Ψ`.
pub fn inner_value_and_grad(problem: &InnerProblem<'_>, theta: &ParamSet, psi: &ParamSet) -> Result<(InnerValue, Vec<f64>)> {
    let mut g = Graph::<f64>::new();
    let ol = theta.leaves(&mut g);
    let il = psi.leaves(&mut g);
    let n = problem.nodes(&mut g, &ol, &il)?;
    let grads = g.backward(n.total);
    let mut flat = Vec::with_capacity(psi.num_scalars());
    for (v, t) in il.iter().zip(psi.tensors()) {
        flat.extend(grads.get_or_zeros(*v, t.data.len()));
    }
    Ok((
        InnerValue {
            ce: g.scalar(n.ce),
            ment: n.ment.map_or(0.0, |m| g.scalar(m)),
            total: g.scalar(n.total),
        },
        flat,
    ))
}

/// Value of the inner objective.
pub fn inner_loss(problem: &InnerProblem<'_>, theta: &ParamSet, psi: &ParamSet) -> Result<InnerValue> {
    let mut g = Graph::<f64>::new();
    let ol = theta.leaves(&mut g);
    let il = psi.leaves(&mut g);
    let n = problem.nodes(&mut g, &ol, &il)?;
    Ok(InnerValue {
        ce: g.scalar(n.ce),
        ment: n.ment.map_or(0.0, |m| g.scalar(m)),
        total: g.scalar(n.total),
    })
}

/// Outer loss of a target model on `inputs`.
pub fn outer_loss(target: &TargetModelState, inputs: &[f64]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let leaves = target.psi.leaves(&mut g);
    let l = outer_loss_graph(&mut g, &target.net, &leaves, inputs)?;
    Ok(g.scalar(l))
}

/// `∇²L(params) · v` by forward-over-reverse differentiation.
pub fn hvp<O: Objective>(obj: &O, params: &ParamSet, v: &[f64]) -> Result<Vec<f64>> {
    Ok(grad_and_hvp(obj, params, v)?.1)
}

/// Truncated Neumann series for `(H + δI)⁻¹ v` given an HVP oracle:
/// `p₀ = v`, `p_{j+1} = p_j − η (H p_j + δ p_j)`, result `η Σ_{j<J} p_j`.
pub fn neumann_series(
    mut hvp_fn: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    v: &[f64],
    cfg: &NeumannConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut p = v.to_vec();
    let mut acc = vec![0.0; v.len()];
    for j in 0..cfg.num_terms {
        for (a, x) in acc.iter_mut().zip(&p) {
            *a += x;
        }
        if j + 1 == cfg.num_terms {
            break;
        }
        let hp = hvp_fn(&p)?;
        if hp.len() != p.len() {
            return Err(Error::shape("HVP returned a vector of the wrong length"));
        }
        for (x, h) in p.iter_mut().zip(&hp) {
            *x -= cfg.eta * (h + cfg.damping * *x);
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                step: j + 1,
                what: "Neumann series term".into(),
            });
        }
    }
    Ok(acc.into_iter().map(|a| cfg.eta * a).collect())
}

/// [`neumann_series`] with the HVP of `obj` at `params`.
pub fn neumann_inverse_hvp<O: Objective>(obj: &O, params: &ParamSet, v: &[f64], cfg: &NeumannConfig) -> Result<Vec<f64>> {
    neumann_series(|p| hvp(obj, params, p), v, cfg)
}

/// Implicit-differentiation hypergradient and its intermediates.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypergradient {
    pub grad: Vec<f64>,
    pub val_loss: f64,
    /// `∂L_val/∂Ψ`.
    pub v1: Vec<f64>,
    /// Approximate `(H + δI)⁻¹ v1`.
    pub v2: Vec<f64>,
}

impl Hypergradient {
    pub fn norm(&self) -> f64 {
        self.grad.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// `dL_val/dθ` through the inner optimum: `v1 = ∇_Ψ L_val`,
/// `v2 ≈ H⁻¹ v1`, result `−∂/∂θ ⟨v2, ∇_Ψ L_trn⟩`. The outer loss has no
/// direct dependence on `θ`.
pub fn hypergradient<B: BilevelObjective>(
    obj: &B,
    theta: &ParamSet,
    psi: &ParamSet,
    cfg: &NeumannConfig,
) -> Result<Hypergradient> {
    let (val_loss, v1) = outer_value_and_grad(obj, psi)?;
    let v2 = neumann_series(|p| Ok(inner_second_order(obj, theta, psi, p)?.0), &v1, cfg)?;
    let (_, mixed) = inner_second_order(obj, theta, psi, &v2)?;
    Ok(Hypergradient {
        grad: mixed.into_iter().map(|x| -x).collect(),
        val_loss,
        v1,
        v2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondStepMode {
    /// Vanilla target model on hard, thresholded pseudo-labels.
    Naive,
    /// Stochastic head and entropy term, labeling function frozen.
    RobustNoBilevel,
    /// Stochastic head plus outer updates of the labeling function.
    RobustFull,
}

impl SecondStepMode {
    pub fn stochastic(self) -> bool {
        self != SecondStepMode::Naive
    }

    pub fn bilevel(self) -> bool {
        self == SecondStepMode::RobustFull
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    InnerWarmup,
    Bilevel,
}

/// When the warmup ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PhaseTrigger {
    /// Epoch-mean inner loss improved by less than `rel_tol` (relative)
    /// over the last `window` epochs.
    Converged { window: usize, rel_tol: f64 },
    /// After a fixed number of warmup epochs.
    FixedEpochs { epochs: usize },
}

impl PhaseTrigger {
    pub fn fires(&self, epoch_losses: &[f64]) -> bool {
        match *self {
            PhaseTrigger::Converged { window, rel_tol } => {
                let n = epoch_losses.len();
                if n <= window {
                    return false;
                }
                let old = epoch_losses[n - 1 - window];
                let new = epoch_losses[n - 1];
                (old - new) / old.abs().max(f64::MIN_POSITIVE) < rel_tol
            }
            PhaseTrigger::FixedEpochs { epochs } => epoch_losses.len() >= epochs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub mode: ThresholdMode,
    /// The fixed threshold (`Fixed` mode only).
    pub tau: f64,
    pub alpha: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            mode: ThresholdMode::Adaptive,
            tau: 0.95,
            alpha: 0.999,
        }
    }
}

impl ThresholdConfig {
    pub fn init(&self, num_classes: usize) -> ThresholdState {
        match self.mode {
            ThresholdMode::Fixed => ThresholdState::fixed(self.tau),
            ThresholdMode::Adaptive => ThresholdState::adaptive(self.alpha),
            ThresholdMode::PerClass => ThresholdState::per_class(self.alpha, num_classes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondStepConfig {
    pub mode: SecondStepMode,
    pub epochs: usize,
    pub batch_size: usize,
    /// Target-model optimizer. A cosine schedule with `total_steps == 0`
    /// spans the whole run. Its `weight_decay` is moved into the inner
    /// objective so the hypergradient sees it.
    pub sgd: SgdConfig,
    pub lambda: f64,
    pub margin: f64,
    pub threshold: ThresholdConfig,
    pub neumann: NeumannConfig,
    /// Plain-SGD learning rate of the labeling function.
    pub outer_lr: f64,
    pub inner_steps_per_outer: usize,
    pub trigger: PhaseTrigger,
    pub gumbel_temperature: f64,
    pub straight_through: bool,
    /// Hold out this fraction of the target training set for the outer
    /// loss instead of reusing the training batch.
    pub held_out_val: Option<f64>,
    pub seed: u64,
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for SecondStepConfig {
    fn default() -> Self {
        Self {
            mode: SecondStepMode::RobustFull,
            epochs: 30,
            batch_size: 64,
            sgd: SgdConfig {
                lr: 0.01,
                momentum: 0.9,
                weight_decay: 5e-4,
                schedule: LrSchedule::Cosine { total_steps: 0 },
            },
            lambda: 0.1,
            margin: 4.0,
            threshold: ThresholdConfig::default(),
            neumann: NeumannConfig::default(),
            outer_lr: 5e-5,
            inner_steps_per_outer: 10,
            trigger: PhaseTrigger::Converged {
                window: 5,
                rel_tol: 1e-3,
            },
            gumbel_temperature: 1.0,
            straight_through: true,
            held_out_val: None,
            seed: 0,
            max_batches_per_epoch: None,
        }
    }
}

impl SecondStepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.inner_steps_per_outer == 0 {
            return Err(Error::config("batch size and inner steps per outer step must be positive"));
        }
        if !(self.lambda >= 0.0) || !self.margin.is_finite() {
            return Err(Error::config("λ must be non-negative and m finite"));
        }
        if !(self.outer_lr >= 0.0) || !(self.gumbel_temperature > 0.0) {
            return Err(Error::config("outer learning rate must be ≥ 0 and temperature > 0"));
        }
        if let Some(f) = self.held_out_val {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::config("held-out fraction must lie in (0, 1)"));
            }
        }
        self.sgd.validate()?;
        self.neumann.validate()
    }

    fn target_sgd(&self) -> SgdConfig {
        SgdConfig {
            weight_decay: 0.0,
            ..self.sgd
        }
    }
}

/// Outer variables, inner variables and the schedule state around them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilevelState {
    pub labeling: LabelingFunctionState,
    pub target: TargetModelState,
    pub threshold: ThresholdState,
    pub neumann: NeumannConfig,
    pub loss_weight_lambda: f64,
    pub margin_m: f64,
    pub phase: Phase,
    pub mode: SecondStepMode,
    pub epoch: usize,
    pub step: usize,
    pub outer_steps: usize,
    pub inner_since_outer: usize,
    /// Epoch means of the inner objective.
    pub epoch_losses: Vec<f64>,
    epoch_loss_acc: f64,
    epoch_loss_count: usize,
    /// Epoch at which the bilevel phase started.
    pub bilevel_started: Option<usize>,
    /// Epochs in which no pseudo-label passed the gate.
    pub empty_mask_epochs: Vec<usize>,
    epoch_had_open_gate: bool,
    pub cursor: Option<BatchCursor>,
    pub val_cursor: Option<BatchCursor>,
    pub rng: ChaCha8Rng,
}

impl BilevelState {
    /// Target model copied from the first-step labeling function.
    pub fn new(labeling: LabelingFunctionState, cfg: &SecondStepConfig) -> Result<Self> {
        cfg.validate()?;
        let target = TargetModelState::from_labeling(&labeling.net, &labeling.theta, cfg.mode.stochastic(), cfg.target_sgd())?;
        let threshold = cfg.threshold.init(labeling.net.num_classes);
        Ok(Self {
            labeling,
            target,
            threshold,
            neumann: cfg.neumann,
            loss_weight_lambda: cfg.lambda,
            margin_m: cfg.margin,
            phase: Phase::InnerWarmup,
            mode: cfg.mode,
            epoch: 0,
            step: 0,
            outer_steps: 0,
            inner_since_outer: 0,
            epoch_losses: Vec::new(),
            epoch_loss_acc: 0.0,
            epoch_loss_count: 0,
            bilevel_started: None,
            empty_mask_epochs: Vec::new(),
            epoch_had_open_gate: false,
            cursor: None,
            val_cursor: None,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002),
        })
    }
}

/// Per-step record of the second step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondStepRecord {
    pub step: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub l_trn: f64,
    pub l_ce: f64,
    pub l_ment: f64,
    pub l_val: Option<f64>,
    pub masked_fraction: f64,
    pub tau: f64,
    pub hypergrad_norm: Option<f64>,
    /// Set on the last step of an epoch when evaluation labels are given.
    pub target_acc: Option<f64>,
}

/// Accuracy of `model` at `params` on a labeled set.
pub fn accuracy_of<M: Classifier>(model: &M, params: &ParamSet, set: &LabeledSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Contract("empty evaluation set".into()));
    }
    let probs = predict_with(model, params, &set.flat_inputs())?;
    let hits = probs.iter().zip(&set.labels).filter(|(p, &y)| argmax(p) == y).count();
    Ok(hits as f64 / set.len() as f64)
}

/// The target-training and outer-validation views of `dataset`.
pub fn second_step_views(dataset: &MultiDomainDataset, cfg: &SecondStepConfig) -> Result<(MultiDomainDataset, Option<MultiDomainDataset>)> {
    match cfg.held_out_val {
        None => Ok((dataset.clone(), None)),
        Some(f) => {
            let (train, held) = split_held_out(dataset, f, cfg.seed)?;
            Ok((train, Some(held)))
        }
    }
}

fn next_batch_from(dataset: &MultiDomainDataset, cursor: &mut Option<BatchCursor>, cfg: &SecondStepConfig, salt: u64) -> Result<(Vec<f64>, usize)> {
    let tid = dataset.target_id();
    let c = match cursor.take() {
        Some(c) => c,
        None => BatchCursor::new(dataset, &[tid], cfg.batch_size, cfg.seed ^ salt)?,
    };
    let mut it = BatchIterator::resume(dataset, c);
    let per_epoch = it.batches_per_epoch();
    let batch = it.next_batch();
    *cursor = Some(it.cursor().clone());
    let inputs = batch.per_domain.into_iter().next().map(|d| d.inputs).unwrap_or_default();
    Ok((inputs, per_epoch))
}

/// One inner step (and, on schedule, one outer step). Returns the record.
pub fn second_step_update(
    state: &mut BilevelState,
    train: &MultiDomainDataset,
    val: Option<&MultiDomainDataset>,
    cfg: &SecondStepConfig,
    eval: Option<&LabeledSet>,
) -> Result<SecondStepRecord> {
    let (x, batches) = next_batch_from(train, &mut state.cursor, cfg, 0)?;
    let per_epoch = cfg.max_batches_per_epoch.map_or(batches, |m| m.min(batches)).max(1);
    let mut sgd = cfg.target_sgd();
    if let LrSchedule::Cosine { total_steps: 0 } = sgd.schedule {
        sgd.schedule = LrSchedule::Cosine {
            total_steps: per_epoch * cfg.epochs,
        };
    }
    state.target.optimizer.config = sgd;

    let b = x.len() / train.shape().len();
    let probs = predict_with(&state.labeling.net, &state.labeling.theta, &x)?;
    state.threshold = update_adaptive_threshold(&state.threshold, &probs);
    let hard: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let mask: Vec<bool> = probs
        .iter()
        .zip(&hard)
        .map(|(p, &h)| p[h] >= state.threshold.tau_for(h))
        .collect();
    let open = mask.iter().filter(|&&m| m).count();
    let masked_fraction = open as f64 / b as f64;
    state.epoch_had_open_gate |= open > 0;

    let stochastic = state.target.net.stochastic;
    let epsilon = stochastic.then(|| draw_epsilon(&mut state.rng, b * state.target.net.backbone.feature_dim()));
    let labels = match state.phase {
        Phase::Bilevel => InnerLabels::Gumbel {
            noise: gumbel_noise(&mut state.rng, b * state.target.net.num_classes),
            temperature: cfg.gumbel_temperature,
            straight_through: cfg.straight_through,
        },
        Phase::InnerWarmup => InnerLabels::Hard(hard),
    };
    let val_x = match val {
        Some(v) if state.phase == Phase::Bilevel => Some(next_batch_from(v, &mut state.val_cursor, cfg, 0x00dd_ba11)?.0),
        _ => None,
    };
    let net_l = state.labeling.net.clone();
    let net_t = state.target.net.clone();
    let problem = InnerProblem {
        labeling: &net_l,
        target: &net_t,
        inputs: &x,
        labels,
        mask,
        epsilon,
        lambda: if stochastic { cfg.lambda } else { 0.0 },
        margin: cfg.margin,
        weight_decay: cfg.sgd.weight_decay,
        val_inputs: val_x.as_deref(),
    };
    let (value, grad) = inner_value_and_grad(&problem, &state.labeling.theta, &state.target.psi)?;
    if !value.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            step: state.step,
            what: format!("inner loss (ce {}, ment {})", value.ce, value.ment),
        });
    }
    if open > 0 || stochastic {
        state.target.optimizer.step(&mut state.target.psi, &grad)?;
    } else {
        debug!("step {}: every pseudo-label below τ = {}; no update", state.step, state.threshold.tau);
    }

    let mut record = SecondStepRecord {
        step: state.step,
        epoch: state.epoch,
        phase: state.phase,
        l_trn: value.total,
        l_ce: value.ce,
        l_ment: value.ment,
        l_val: None,
        masked_fraction,
        tau: state.threshold.tau,
        hypergrad_norm: None,
        target_acc: None,
    };
    if stochastic {
        record.l_val = Some(outer_loss(&state.target, val_x.as_deref().unwrap_or(&x))?);
    }

    if state.phase == Phase::Bilevel {
        state.inner_since_outer += 1;
        if state.inner_since_outer >= cfg.inner_steps_per_outer {
            let hg = hypergradient(&problem, &state.labeling.theta, &state.target.psi, &cfg.neumann)?;
            if hg.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    step: state.step,
                    what: "hypergradient".into(),
                });
            }
            if cfg.outer_lr != 0.0 {
                state.labeling.theta.axpy(-cfg.outer_lr, &hg.grad)?;
            }
            record.hypergrad_norm = Some(hg.norm());
            state.outer_steps += 1;
            state.inner_since_outer = 0;
        }
    }

    state.epoch_loss_acc += value.total;
    state.epoch_loss_count += 1;
    state.step += 1;
    if state.step.is_multiple_of(per_epoch) {
        finish_epoch(state, cfg);
        if let Some(set) = eval {
            record.target_acc = Some(accuracy_of(&state.target.net, &state.target.psi, set)?);
        }
    }
    Ok(record)
}

fn finish_epoch(state: &mut BilevelState, cfg: &SecondStepConfig) {
    let mean = state.epoch_loss_acc / state.epoch_loss_count.max(1) as f64;
    state.epoch_losses.push(mean);
    state.epoch_loss_acc = 0.0;
    state.epoch_loss_count = 0;
    if !state.epoch_had_open_gate {
        warn!("epoch {}: no pseudo-label passed the confidence gate", state.epoch);
        state.empty_mask_epochs.push(state.epoch);
    }
    state.epoch_had_open_gate = false;
    state.epoch += 1;
    if state.mode.bilevel() && state.phase == Phase::InnerWarmup && cfg.trigger.fires(&state.epoch_losses) {
        info!("phase trigger fired after {} epochs; starting bilevel updates", state.epoch);
        state.phase = Phase::Bilevel;
        state.bilevel_started = Some(state.epoch);
        state.inner_since_outer = 0;
    }
}

/// Runs the second step until `cfg.epochs` epochs are complete, resuming
/// from the state's position. `sink` receives every step record.
pub fn train_second_step(
    mut state: BilevelState,
    dataset: &MultiDomainDataset,
    cfg: &SecondStepConfig,
    eval: Option<&LabeledSet>,
    sink: &mut dyn FnMut(&SecondStepRecord),
) -> Result<BilevelState> {
    cfg.validate()?;
    if state.mode != cfg.mode {
        return Err(Error::Contract("state and config disagree on the second-step mode".into()));
    }
    let (train, val) = second_step_views(dataset, cfg)?;
    while state.epoch < cfg.epochs {
        let rec = second_step_update(&mut state, &train, val.as_ref(), cfg, eval)?;
        sink(&rec);
    }
    if cfg.mode.bilevel() && state.bilevel_started.is_none() {
        warn!("phase trigger never fired; the run completed in the warmup phase");
    }
    Ok(state)
}

/// Vanilla target model on thresholded hard labels. `tau` fixes the
/// threshold; `None` keeps the configured (adaptive) schedule.
pub fn naive_second_step(
    labeling: &LabelingFunctionState,
    dataset: &MultiDomainDataset,
    tau: Option<f64>,
    cfg: &SecondStepConfig,
) -> Result<TargetModelState> {
    let mut cfg = cfg.clone();
    cfg.mode = SecondStepMode::Naive;
    if let Some(t) = tau {
        cfg.threshold = ThresholdConfig {
            mode: ThresholdMode::Fixed,
            tau: t,
            ..cfg.threshold
        };
    }
    let state = BilevelState::new(labeling.clone(), &cfg)?;
    Ok(train_second_step(state, dataset, &cfg, None, &mut |_| {})?.target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    struct Quadratic;

    // L_trn = ½(Ψ − θ)², L_val = ½Ψ²
    impl BilevelObjective for Quadratic {
        fn inner_loss<S: Scalar>(&self, g: &mut Graph<S>, outer: &[Var], inner: &[Var]) -> Result<Var> {
            let d = g.sub(inner[0], outer[0]);
            let sq = g.mul(d, d);
            let s = g.sum(sq);
            Ok(g.scale(s, 0.5))
        }

        fn outer_loss<S: Scalar>(&self, g: &mut Graph<S>, inner: &[Var]) -> Result<Var> {
            let sq = g.mul(inner[0], inner[0]);
            let s = g.sum(sq);
            Ok(g.scale(s, 0.5))
        }
    }

    fn scalar(name: &str, v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push(name, 1, 1, vec![v]);
        p
    }

    #[test]
    fn quadratic_hypergradient() {
        let cfg = NeumannConfig {
            num_terms: 5,
            eta: 1.0,
            damping: 0.0,
        };
        let hg = hypergradient(&Quadratic, &scalar("t", 0.7), &scalar("p", 0.7), &cfg).unwrap();
        assert!((hg.grad[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn series_collapses_for_scaled_identity() {
        let v = [1.0, -2.0, 0.5];
        let cfg = NeumannConfig {
            num_terms: 7,
            eta: 0.5,
            damping: 0.0,
        };
        let out = neumann_series(|p| Ok(p.iter().map(|x| 2.0 * x).collect()), &v, &cfg).unwrap();
        for (o, x) in out.iter().zip(&v) {
            assert_eq!(*o, 0.5 * x);
        }
    }

    #[test]
    fn divergent_series_reports_term() {
        let cfg = NeumannConfig {
            num_terms: 5000,
            eta: 1.0,
            damping: 0.0,
        };
        let r = neumann_series(|p| Ok(p.iter().map(|x| 1e3 * x).collect()), &[1.0], &cfg);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn trigger_rules() {
        let t = PhaseTrigger::Converged {
            window: 2,
            rel_tol: 1e-3,
        };
        assert!(!t.fires(&[1.0, 0.5]));
        assert!(!t.fires(&[1.0, 0.5, 0.4]));
        assert!(t.fires(&[1.0, 0.5, 0.5, 0.4999]));
        assert!(PhaseTrigger::FixedEpochs { epochs: 2 }.fires(&[3.0, 2.0]));
    }

    #[test]
    fn identity_head_preserves_labeling_function() {
        let net = LabelingNet::new(
            BackboneSpec::Mlp {
                input_dim: 3,
                hidden: vec![4, 5],
                activation: Activation::Tanh,
            },
            3,
        )
        .unwrap();
        let theta = net.init(&mut ChaCha8Rng::seed_from_u64(2));
        let t = TargetModelState::from_labeling(&net, &theta, true, SgdConfig::plain(0.1)).unwrap();
        let x = [0.3, -1.0, 2.0, 0.1, 0.2, -0.3];
        let a = predict_with(&net, &theta, &x).unwrap();
        let b = t.predict(&x).unwrap();
        for (p, q) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((p - q).abs() < 1e-14);
        }
        assert_eq!(t.uncertainty_scores(&x).unwrap(), vec![0.0, 0.0]);
    }
}
