//! First step: train the labeling function `F_θ` on all domains with a
//! supervised source loss plus a pluggable adaptation loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{fixmatch_cm_loss_graph, plan_fixmatch_cm, weak_augment, FixMatchCmConfig, FixMatchPlan, TargetPseudoLabels};
use crate::autodiff::{value_and_grad, Graph, Objective, ParamSet, Scalar, Var};
use crate::datamodel::{BatchCursor, BatchIterator, InputShape, MultiDomainBatch, MultiDomainDataset};
use crate::error::{Error, Result};
use crate::nn::{init_classifier, linear, softmax_rows, BackboneSpec, Classifier, StageHook};
use crate::optim::{LrSchedule, Sgd, SgdConfig};
use crate::pseudolabel::argmax;

const PREDICT_CHUNK: usize = 512;

/// `F_θ`: backbone plus linear classifier. Parameters are named
/// `backbone.*` and `classifier.{w,b}`, in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelingNet {
    pub backbone: BackboneSpec,
    pub num_classes: usize,
}

impl LabelingNet {
    pub fn new(backbone: BackboneSpec, num_classes: usize) -> Result<Self> {
        backbone.validate()?;
        if num_classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        Ok(Self { backbone, num_classes })
    }

    pub fn init(&self, rng: &mut impl rand::Rng) -> ParamSet {
        let mut p = ParamSet::new();
        p.extend_prefixed("backbone.", &self.backbone.init(rng));
        p.extend_prefixed("classifier.", &init_classifier(rng, self.backbone.feature_dim(), self.num_classes));
        p
    }

    /// Number of leading leaves that belong to the backbone.
    pub fn num_backbone_tensors(&self) -> usize {
        self.backbone.num_tensors()
    }

    pub fn features<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        leaves: &[Var],
        x: Var,
        hook: Option<StageHook<'_, S>>,
    ) -> Result<Var> {
        self.backbone.forward(g, &leaves[..self.num_backbone_tensors()], x, hook)
    }
}

impl Classifier for LabelingNet {
    fn input_len(&self) -> usize {
        self.backbone.input_len()
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        leaves: &[Var],
        x: Var,
        hook: Option<StageHook<'_, S>>,
    ) -> Result<Var> {
        let nb = self.num_backbone_tensors();
        if leaves.len() != nb + 2 {
            return Err(Error::shape("labeling net parameter count mismatch"));
        }
        let f = self.features(g, leaves, x, hook)?;
        Ok(linear(g, f, leaves[nb], leaves[nb + 1]))
    }
}

/// Softmax probabilities of any classifier at `params`.
pub fn predict_with<M: Classifier>(model: &M, params: &ParamSet, inputs: &[f64]) -> Result<Vec<Vec<f64>>> {
    let len = model.input_len();
    if len == 0 || !inputs.len().is_multiple_of(len) {
        return Err(Error::shape(format!("inputs are not a multiple of the input length {len}")));
    }
    let mut out = Vec::with_capacity(inputs.len() / len);
    for chunk in inputs.chunks(PREDICT_CHUNK * len) {
        let mut g = Graph::<f64>::new();
        let leaves = params.leaves(&mut g);
        let x = g.constant(chunk, chunk.len() / len, len);
        let logits = model.logits(&mut g, &leaves, x, None)?;
        out.extend(softmax_rows(g.value(logits), model.num_classes()));
    }
    Ok(out)
}

/// Mean cross-entropy of `[n, C]` logits against class indices.
pub fn cross_entropy_graph<S: Scalar>(g: &mut Graph<S>, logits: Var, labels: &[usize]) -> Var {
    let (n, c) = g.shape(logits);
    let mut w = vec![0.0; n * c];
    for (i, &y) in labels.iter().enumerate() {
        w[i * c + y] = 1.0 / n as f64;
    }
    let logp = g.log_softmax(logits);
    let wc = g.constant(&w, n, c);
    let prod = g.mul(logp, wc);
    let s = g.sum(prod);
    g.neg(s)
}

/// Column means of a `[n, d]` node.
fn column_mean<S: Scalar>(g: &mut Graph<S>, x: Var) -> Var {
    let n = g.shape(x).0;
    let ones = g.constant(&vec![1.0 / n as f64; n], 1, n);
    g.matmul(ones, x)
}

/// The adaptation term `L_da`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdaptationLossPlugin {
    /// Source-only training.
    Zero,
    /// Squared distance between each source domain's mean feature and the
    /// target's, summed over sources and scaled by `weight`.
    MomentMatching { weight: f64 },
    /// Replaces the whole objective with the mixed consistency loss.
    FixMatchCm(FixMatchCmConfig),
}

impl AdaptationLossPlugin {
    pub fn name(&self) -> &'static str {
        match self {
            AdaptationLossPlugin::Zero => "zero",
            AdaptationLossPlugin::MomentMatching { .. } => "moment_matching",
            AdaptationLossPlugin::FixMatchCm(_) => "fixmatch_cm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step1Config {
    pub epochs: usize,
    pub batch_size: usize,
    /// A cosine schedule with `total_steps == 0` spans the whole run.
    pub sgd: SgdConfig,
    pub seed: u64,
    /// Caps the number of batches per epoch.
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for Step1Config {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            sgd: SgdConfig {
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 5e-4,
                schedule: LrSchedule::Cosine { total_steps: 0 },
            },
            seed: 0,
            max_batches_per_epoch: None,
        }
    }
}

impl Step1Config {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        self.sgd.validate()
    }

    fn batches_per_epoch(&self, it: &BatchIterator<'_>) -> usize {
        let n = it.batches_per_epoch();
        self.max_batches_per_epoch.map_or(n, |m| m.min(n)).max(1)
    }
}

/// `θ` and everything needed to continue training it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelingFunctionState {
    pub net: LabelingNet,
    pub theta: ParamSet,
    pub optimizer: Sgd,
    pub epoch: usize,
    pub step: usize,
    pub loss_history: Vec<f64>,
    pub cursor: Option<BatchCursor>,
    pub rng: ChaCha8Rng,
}

impl LabelingFunctionState {
    pub fn new(net: LabelingNet, sgd: SgdConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = net.init(&mut rng);
        let optimizer = Sgd::new(sgd, theta.num_scalars())?;
        Ok(Self {
            net,
            theta,
            optimizer,
            epoch: 0,
            step: 0,
            loss_history: Vec::new(),
            cursor: None,
            rng,
        })
    }

    pub fn predict(&self, inputs: &[f64]) -> Result<Vec<Vec<f64>>> {
        predict(self, inputs)
    }
}

/// Pooled source cross-entropy plus, for moment matching, the feature term.
struct SupervisedObjective<'a> {
    net: &'a LabelingNet,
    batch: &'a MultiDomainBatch,
    target_id: usize,
    plugin: &'a AdaptationLossPlugin,
}

/// Source rows of `batch` as one flat input buffer plus labels.
fn pooled_sources(batch: &MultiDomainBatch, target_id: usize) -> (Vec<f64>, Vec<usize>) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for d in batch.per_domain.iter().filter(|d| d.domain_id != target_id) {
        x.extend_from_slice(&d.inputs);
        y.extend(d.labels.as_deref().unwrap_or_default());
    }
    (x, y)
}

impl SupervisedObjective<'_> {
    fn supervised<S: Scalar>(&self, g: &mut Graph<S>, leaves: &[Var]) -> Result<Var> {
        let (x, y) = pooled_sources(self.batch, self.target_id);
        if y.is_empty() {
            return Err(Error::Contract("batch has no labeled source rows".into()));
        }
        let len = self.net.input_len();
        let xv = g.constant(&x, y.len(), len);
        let logits = self.net.logits(g, leaves, xv, None)?;
        Ok(cross_entropy_graph(g, logits, &y))
    }

    fn adaptation<S: Scalar>(&self, g: &mut Graph<S>, leaves: &[Var]) -> Result<Option<Var>> {
        let weight = match self.plugin {
            AdaptationLossPlugin::MomentMatching { weight } => *weight,
            _ => return Ok(None),
        };
        let len = self.net.input_len();
        let target = self
            .batch
            .get(self.target_id)
            .ok_or_else(|| Error::Contract("moment matching needs target rows".into()))?;
        let xt = g.constant(&target.inputs, target.len(), len);
        let ft = self.net.features(g, leaves, xt, None)?;
        let mt = column_mean(g, ft);
        let mut total: Option<Var> = None;
        for d in self.batch.per_domain.iter().filter(|d| d.domain_id != self.target_id) {
            let xs = g.constant(&d.inputs, d.len(), len);
            let fs = self.net.features(g, leaves, xs, None)?;
            let ms = column_mean(g, fs);
            let diff = g.sub(ms, mt);
            let sq = g.mul(diff, diff);
            let s = g.sum(sq);
            total = Some(match total {
                Some(t) => g.add(t, s),
                None => s,
            });
        }
        Ok(total.map(|t| g.scale(t, weight)))
    }
}

impl Objective for SupervisedObjective<'_> {
    fn loss<S: Scalar>(&self, g: &mut Graph<S>, leaves: &[Var]) -> Result<Var> {
        let sup = self.supervised(g, leaves)?;
        Ok(match self.adaptation(g, leaves)? {
            Some(da) => g.add(sup, da),
            None => sup,
        })
    }
}

struct PlannedObjective<'a> {
    net: &'a LabelingNet,
    plan: &'a FixMatchPlan,
}

impl Objective for PlannedObjective<'_> {
    fn loss<S: Scalar>(&self, g: &mut Graph<S>, leaves: &[Var]) -> Result<Var> {
        fixmatch_cm_loss_graph(g, self.net, leaves, self.plan)
    }
}

/// The supervised term and the adaptation term at `theta`, evaluated
/// separately. For the mixed-consistency plugin the adaptation term is
/// `None`, since that objective replaces both.
pub fn objective_terms(
    net: &LabelingNet,
    theta: &ParamSet,
    batch: &MultiDomainBatch,
    target_id: usize,
    plugin: &AdaptationLossPlugin,
) -> Result<(f64, Option<f64>)> {
    let obj = SupervisedObjective {
        net,
        batch,
        target_id,
        plugin,
    };
    let mut g = Graph::<f64>::new();
    let leaves = theta.leaves(&mut g);
    let sup = obj.supervised(&mut g, &leaves)?;
    let da = obj.adaptation(&mut g, &leaves)?;
    Ok((g.scalar(sup), da.map(|v| g.scalar(v))))
}

/// Pseudo-labels of the target rows of `batch` from weakly augmented inputs.
pub fn weak_pseudo_labels(
    net: &LabelingNet,
    theta: &ParamSet,
    batch: &MultiDomainBatch,
    target_id: usize,
    shape: InputShape,
    jitter: f64,
    rng: &mut impl rand::Rng,
) -> Result<Option<TargetPseudoLabels>> {
    let Some(t) = batch.get(target_id) else {
        return Ok(None);
    };
    let len = shape.len();
    let weak: Vec<f64> = t
        .inputs
        .chunks(len)
        .flat_map(|x| weak_augment(x, shape, jitter, rng))
        .collect();
    let probs = predict_with(net, theta, &weak)?;
    let hard: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let confidence = probs.iter().zip(&hard).map(|(p, &h)| p[h]).collect();
    Ok(Some(TargetPseudoLabels { hard, confidence }))
}

/// Value of the mixed-consistency objective on `batch`, with pseudo-labels
/// drawn at the current `θ` and the gate at `tau0`.
pub fn fixmatch_cm_objective(
    state: &LabelingFunctionState,
    batch: &MultiDomainBatch,
    target_id: usize,
    shape: InputShape,
    cfg: &FixMatchCmConfig,
    rng: &mut impl rand::Rng,
) -> Result<f64> {
    let plan = plan_for(state, batch, target_id, shape, cfg, rng)?;
    let mut g = Graph::<f64>::new();
    let leaves = state.theta.leaves(&mut g);
    let loss = fixmatch_cm_loss_graph(&mut g, &state.net, &leaves, &plan)?;
    Ok(g.scalar(loss))
}

fn plan_for(
    state: &LabelingFunctionState,
    batch: &MultiDomainBatch,
    target_id: usize,
    shape: InputShape,
    cfg: &FixMatchCmConfig,
    rng: &mut impl rand::Rng,
) -> Result<FixMatchPlan> {
    let pseudo = if cfg.target_terms {
        weak_pseudo_labels(&state.net, &state.theta, batch, target_id, shape, cfg.weak_jitter, rng)?
    } else {
        None
    };
    plan_fixmatch_cm(batch, target_id, pseudo.as_ref(), shape, cfg, rng)
}

/// Loss and flat gradient of one first-step update on `batch`.
pub fn step1_loss_and_grad(
    state: &mut LabelingFunctionState,
    batch: &MultiDomainBatch,
    target_id: usize,
    shape: InputShape,
    plugin: &AdaptationLossPlugin,
) -> Result<(f64, Vec<f64>)> {
    match plugin {
        AdaptationLossPlugin::FixMatchCm(cfg) => {
            let mut rng = state.rng.clone();
            let plan = plan_for(state, batch, target_id, shape, cfg, &mut rng)?;
            state.rng = rng;
            value_and_grad(
                &PlannedObjective {
                    net: &state.net,
                    plan: &plan,
                },
                &state.theta,
            )
        }
        _ => value_and_grad(
            &SupervisedObjective {
                net: &state.net,
                batch,
                target_id,
                plugin,
            },
            &state.theta,
        ),
    }
}

fn resolve_sgd(cfg: &Step1Config, total: usize) -> SgdConfig {
    let mut sgd = cfg.sgd;
    if let LrSchedule::Cosine { total_steps: 0 } = sgd.schedule {
        sgd.schedule = LrSchedule::Cosine { total_steps: total };
    }
    sgd
}

/// Draws the next batch and applies one optimizer step. Returns the loss.
pub fn step1_update(
    state: &mut LabelingFunctionState,
    dataset: &MultiDomainDataset,
    plugin: &AdaptationLossPlugin,
    cfg: &Step1Config,
) -> Result<f64> {
    cfg.validate()?;
    let all: Vec<usize> = (0..dataset.num_domains()).collect();
    let cursor = match state.cursor.take() {
        Some(c) => c,
        None => BatchCursor::new(dataset, &all, cfg.batch_size, cfg.seed)?,
    };
    let mut it = BatchIterator::resume(dataset, cursor);
    let per_epoch = cfg.batches_per_epoch(&it);
    state.optimizer.config = resolve_sgd(cfg, per_epoch * cfg.epochs);
    let batch = it.next_batch();
    state.cursor = Some(it.cursor().clone());
    let (loss, grad) = step1_loss_and_grad(state, &batch, dataset.target_id(), dataset.shape(), plugin)?;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            step: state.step,
            what: "first-step loss".into(),
        });
    }
    state.optimizer.step(&mut state.theta, &grad)?;
    state.loss_history.push(loss);
    state.step += 1;
    if state.step.is_multiple_of(per_epoch) {
        state.epoch += 1;
    }
    Ok(loss)
}

/// Trains until `cfg.epochs` epochs are complete (resuming from the
/// state's epoch and batch cursor).
pub fn train_step1(
    mut state: LabelingFunctionState,
    dataset: &MultiDomainDataset,
    plugin: &AdaptationLossPlugin,
    cfg: &Step1Config,
) -> Result<LabelingFunctionState> {
    if dataset.num_sources() == 0 {
        return Err(Error::config("first step needs at least one source domain"));
    }
    while state.epoch < cfg.epochs {
        step1_update(&mut state, dataset, plugin, cfg)?;
    }
    Ok(state)
}

/// Class probabilities of `F_θ` for row-major `inputs`.
pub fn predict(state: &LabelingFunctionState, inputs: &[f64]) -> Result<Vec<Vec<f64>>> {
    predict_with(&state.net, &state.theta, inputs)
}
