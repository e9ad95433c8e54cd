//! Strong augmentations for the first-step objective: image-level CutMix
//! with label mixing, feature-level MixStyle, and the masked consistency
//! loss that combines them.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamSet, Scalar, Var};
use crate::datamodel::{InputShape, MultiDomainBatch};
use crate::error::{Error, Result};
use crate::nn::Classifier;

/// Variance stabilizer for MixStyle's per-channel statistics.
pub const MIXSTYLE_EPS: f64 = 1e-6;

/// Half-open patch `[y0, y1) x [x0, x1)` covering all channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRect {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl PatchRect {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MixLabel {
    Class(usize),
    Soft(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedSample {
    pub input: Vec<f64>,
    pub label_a: MixLabel,
    pub label_b: MixLabel,
    /// Fraction of the area still belonging to sample `a`.
    pub mix_ratio: f64,
    pub patch: PatchRect,
}

/// Draws a CutMix patch: `λ ~ U(0, 1)`, then each spatial side longer than
/// one gets length `round(size · (1 − λ)^(1/k))` for `k` such sides, with
/// a uniform centre and clipping at the borders. Sides of length one are
/// always covered, so vector inputs get an interval patch.
pub fn draw_patch(shape: InputShape, rng: &mut impl Rng) -> PatchRect {
    let lam: f64 = rng.random();
    let active = [shape.height, shape.width].iter().filter(|&&s| s > 1).count().max(1);
    let side = |size: usize, rng: &mut dyn rand::RngCore| -> (usize, usize) {
        if size <= 1 {
            return (0, size);
        }
        let len = (size as f64 * (1.0 - lam).powf(1.0 / active as f64)).round() as isize;
        let c = rng.random_range(0..size) as isize;
        let lo = (c - len / 2).clamp(0, size as isize) as usize;
        let hi = (c - len / 2 + len).clamp(0, size as isize) as usize;
        (lo, hi)
    };
    let (y0, y1) = side(shape.height, rng);
    let (x0, x1) = side(shape.width, rng);
    PatchRect { y0, y1, x0, x1 }
}

/// Pastes `patch` of `b` into `a`.
pub fn cutmix_with_patch(
    a: &[f64],
    label_a: MixLabel,
    b: &[f64],
    label_b: MixLabel,
    shape: InputShape,
    patch: PatchRect,
) -> Result<MixedSample> {
    if a.len() != shape.len() || b.len() != shape.len() {
        return Err(Error::shape("cutmix inputs must match the input shape"));
    }
    if patch.y1 > shape.height || patch.x1 > shape.width || patch.y0 > patch.y1 || patch.x0 > patch.x1 {
        return Err(Error::shape("patch outside the image"));
    }
    let mut input = a.to_vec();
    for c in 0..shape.channels {
        for y in patch.y0..patch.y1 {
            let row = (c * shape.height + y) * shape.width;
            input[row + patch.x0..row + patch.x1].copy_from_slice(&b[row + patch.x0..row + patch.x1]);
        }
    }
    let total = shape.height * shape.width;
    Ok(MixedSample {
        input,
        label_a,
        label_b,
        mix_ratio: 1.0 - patch.area() as f64 / total as f64,
        patch,
    })
}

pub fn cutmix(
    a: &[f64],
    label_a: MixLabel,
    b: &[f64],
    label_b: MixLabel,
    shape: InputShape,
    rng: &mut impl Rng,
) -> Result<MixedSample> {
    let patch = draw_patch(shape, rng);
    cutmix_with_patch(a, label_a, b, label_b, shape, patch)
}

/// Per-channel mean and `sqrt(var + ε)` of one instance.
pub fn channel_stats(x: &[f64], channels: usize) -> Vec<(f64, f64)> {
    let n = x.len() / channels;
    x.chunks(n)
        .map(|ch| {
            let mean = ch.iter().sum::<f64>() / n as f64;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            (mean, (var + MIXSTYLE_EPS).sqrt())
        })
        .collect()
}

/// Affine maps `x ↦ scale·x + shift` per channel realizing MixStyle of `a`
/// towards `b`'s statistics.
fn mixstyle_affine(a: &[f64], b: &[f64], channels: usize, coeff: f64) -> Vec<(f64, f64)> {
    channel_stats(a, channels)
        .into_iter()
        .zip(channel_stats(b, channels))
        .map(|((ma, sa), (mb, sb))| {
            let mu = coeff * ma + (1.0 - coeff) * mb;
            let sig = coeff * sa + (1.0 - coeff) * sb;
            let scale = sig / sa;
            (scale, mu - ma * scale)
        })
        .collect()
}

/// Renormalizes `a` per channel to the convex combination of the two
/// inputs' channel statistics, keeping `a`'s normalized content.
pub fn mixstyle(a: &[f64], b: &[f64], channels: usize, coeff: f64) -> Result<Vec<f64>> {
    if a.len() != b.len() || channels == 0 || !a.len().is_multiple_of(channels) || a.is_empty() {
        return Err(Error::shape("mixstyle inputs must share a channel-divisible shape"));
    }
    if !(0.0..=1.0).contains(&coeff) {
        return Err(Error::domain(format!("mix coefficient {coeff} outside [0, 1]")));
    }
    let n = a.len() / channels;
    let affine = mixstyle_affine(a, b, channels, coeff);
    Ok(a.iter()
        .enumerate()
        .map(|(i, &x)| {
            let (s, t) = affine[i / n];
            s * x + t
        })
        .collect())
}

/// Which row's style each row borrows, and how much of its own it keeps.
#[derive(Debug, Clone, PartialEq)]
pub struct MixStylePlan {
    pub partner: Vec<usize>,
    pub coeff: Vec<f64>,
}

impl MixStylePlan {
    /// Partners come from a different domain when the batch has one,
    /// otherwise from an in-batch shuffle. Coefficients are `Beta(α, α)`.
    pub fn draw(row_domain: &[usize], alpha: f64, rng: &mut impl Rng) -> Result<Self> {
        let beta = Beta::new(alpha, alpha).map_err(|e| Error::config(format!("mixstyle alpha: {e}")))?;
        let n = row_domain.len();
        let multi = row_domain.iter().any(|&d| d != row_domain[0]);
        let mut shuffled: Vec<usize> = (0..n).collect();
        shuffled.shuffle(rng);
        let partner = (0..n)
            .map(|i| {
                if multi {
                    loop {
                        let j = rng.random_range(0..n);
                        if row_domain[j] != row_domain[i] {
                            break j;
                        }
                    }
                } else {
                    shuffled[i]
                }
            })
            .collect();
        let coeff = (0..n).map(|_| beta.sample(rng)).collect();
        Ok(Self { partner, coeff })
    }
}

/// MixStyle on the tape. Statistics are treated as constants, so the op
/// is an elementwise affine map with constant coefficients.
pub fn apply_mixstyle_graph<S: Scalar>(
    g: &mut Graph<S>,
    features: Var,
    channels: usize,
    plan: &MixStylePlan,
) -> Result<Var> {
    let (n, m) = g.shape(features);
    if plan.partner.len() != n || channels == 0 || m % channels != 0 {
        return Err(Error::shape("mixstyle plan does not match the feature batch"));
    }
    let vals = g.primal(features);
    let per = m / channels;
    let mut scale = Vec::with_capacity(n * m);
    let mut shift = Vec::with_capacity(n * m);
    for i in 0..n {
        let a = &vals[i * m..(i + 1) * m];
        let b = &vals[plan.partner[i] * m..(plan.partner[i] + 1) * m];
        for (s, t) in mixstyle_affine(a, b, channels, plan.coeff[i]) {
            scale.extend(std::iter::repeat_n(s, per));
            shift.extend(std::iter::repeat_n(t, per));
        }
    }
    let sc = g.constant(&scale, n, m);
    let sh = g.constant(&shift, n, m);
    let scaled = g.mul(features, sc);
    Ok(g.add(scaled, sh))
}

/// Weak augmentation used before pseudo-labeling: images get a random
/// horizontal flip and a translation of up to 1/8 of each side (zero
/// fill); vectors get small Gaussian jitter.
pub fn weak_augment(x: &[f64], shape: InputShape, jitter: f64, rng: &mut impl Rng) -> Vec<f64> {
    if shape.height <= 1 {
        return x
            .iter()
            .map(|&v| {
                let e: f64 = StandardNormal.sample(rng);
                v + jitter * e
            })
            .collect();
    }
    let flip = rng.random_bool(0.5);
    let max_dy = (shape.height / 8) as i64;
    let max_dx = (shape.width / 8) as i64;
    let dy = rng.random_range(-max_dy..=max_dy) as isize;
    let dx = rng.random_range(-max_dx..=max_dx) as isize;
    let mut out = vec![0.0; x.len()];
    for c in 0..shape.channels {
        for y in 0..shape.height {
            for xx in 0..shape.width {
                let sy = y as isize - dy;
                let mut sx = xx as isize - dx;
                if sy < 0 || sy >= shape.height as isize || sx < 0 || sx >= shape.width as isize {
                    continue;
                }
                if flip {
                    sx = shape.width as isize - 1 - sx;
                }
                out[(c * shape.height + y) * shape.width + xx] =
                    x[(c * shape.height + sy as usize) * shape.width + sx as usize];
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixMatchCmConfig {
    /// Confidence gate for target pseudo-labels.
    pub tau0: f64,
    pub cutmix: bool,
    pub mixstyle: bool,
    /// Probability that MixStyle is active for a batch.
    pub mixstyle_prob: f64,
    /// `Beta(α, α)` parameter of the MixStyle coefficient.
    pub mixstyle_alpha: f64,
    /// Include the target pseudo-label terms.
    pub target_terms: bool,
    /// Gaussian jitter of the weak augmentation for vector inputs.
    pub weak_jitter: f64,
}

impl Default for FixMatchCmConfig {
    fn default() -> Self {
        Self {
            tau0: 0.95,
            cutmix: true,
            mixstyle: true,
            mixstyle_prob: 0.5,
            mixstyle_alpha: 0.1,
            target_terms: true,
            weak_jitter: 0.05,
        }
    }
}

/// Pseudo-labels of the target rows, from weakly augmented inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetPseudoLabels {
    pub hard: Vec<usize>,
    /// Predicted probability of `hard`.
    pub confidence: Vec<f64>,
}

/// All random draws and labels behind one evaluation of the objective.
/// Rows are source domains in batch order, then the target.
#[derive(Debug, Clone, PartialEq)]
pub struct FixMatchPlan {
    pub shape: InputShape,
    /// Row-major mixed inputs.
    pub inputs: Vec<f64>,
    pub row_domain: Vec<usize>,
    pub is_target: Vec<bool>,
    pub mix_ratio: Vec<f64>,
    pub label_a: Vec<usize>,
    pub label_b: Vec<usize>,
    pub partner_row: Vec<usize>,
    /// Pseudo-label gate `q(ŷ) ≥ τ0` (always true on source rows).
    pub gate: Vec<bool>,
    pub mixstyle: Option<MixStylePlan>,
    /// Rows whose CutMix partner was a target image (mixed with a
    /// pseudo-label rather than ground truth).
    pub target_partner_rows: usize,
}

impl FixMatchPlan {
    pub fn num_rows(&self) -> usize {
        self.row_domain.len()
    }

    pub fn num_source_rows(&self) -> usize {
        self.is_target.iter().filter(|&&t| !t).count()
    }

    pub fn num_target_rows(&self) -> usize {
        self.is_target.iter().filter(|&&t| t).count()
    }

    /// Rows passing the pseudo-label gate among the target rows.
    pub fn open_gates(&self) -> usize {
        self.is_target
            .iter()
            .zip(&self.gate)
            .filter(|(t, g)| **t && **g)
            .count()
    }
}

/// Draws the augmentations for one batch.
pub fn plan_fixmatch_cm(
    batch: &MultiDomainBatch,
    target_id: usize,
    pseudo: Option<&TargetPseudoLabels>,
    shape: InputShape,
    cfg: &FixMatchCmConfig,
    rng: &mut impl Rng,
) -> Result<FixMatchPlan> {
    let len = shape.len();
    let mut raw: Vec<&[f64]> = Vec::new();
    let mut row_domain = Vec::new();
    let mut is_target = Vec::new();
    let mut label_a = Vec::new();
    let mut gate = Vec::new();
    for db in &batch.per_domain {
        let tgt = db.domain_id == target_id;
        if tgt && !cfg.target_terms {
            continue;
        }
        let labels: Vec<usize> = match (&db.labels, tgt) {
            (Some(l), false) => l.clone(),
            (_, true) => {
                let p = pseudo.ok_or_else(|| Error::Contract("target rows need pseudo-labels".into()))?;
                if p.hard.len() != db.len() || p.confidence.len() != db.len() {
                    return Err(Error::Contract("pseudo-labels do not match the target batch".into()));
                }
                gate.extend(p.confidence.iter().map(|&q| q >= cfg.tau0));
                p.hard.clone()
            }
            (None, false) => {
                return Err(Error::Contract(format!("source domain {} has no labels", db.domain_id)))
            }
        };
        if !tgt {
            gate.extend(std::iter::repeat_n(true, db.len()));
        }
        for (i, l) in labels.into_iter().enumerate() {
            raw.push(&db.inputs[i * len..(i + 1) * len]);
            row_domain.push(db.domain_id);
            is_target.push(tgt);
            label_a.push(l);
        }
    }
    let n = raw.len();
    if n == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut inputs = Vec::with_capacity(n * len);
    let mut mix_ratio = Vec::with_capacity(n);
    let mut label_b = Vec::with_capacity(n);
    let mut partner_row = Vec::with_capacity(n);
    let mut target_partner_rows = 0;
    for i in 0..n {
        if cfg.cutmix {
            let j = rng.random_range(0..n);
            let m = cutmix(
                raw[i],
                MixLabel::Class(label_a[i]),
                raw[j],
                MixLabel::Class(label_a[j]),
                shape,
                rng,
            )?;
            inputs.extend_from_slice(&m.input);
            mix_ratio.push(m.mix_ratio);
            label_b.push(label_a[j]);
            partner_row.push(j);
            if is_target[j] {
                target_partner_rows += 1;
            }
        } else {
            inputs.extend_from_slice(raw[i]);
            mix_ratio.push(1.0);
            label_b.push(label_a[i]);
            partner_row.push(i);
        }
    }
    let mixstyle = if cfg.mixstyle && rng.random_bool(cfg.mixstyle_prob.clamp(0.0, 1.0)) {
        Some(MixStylePlan::draw(&row_domain, cfg.mixstyle_alpha, rng)?)
    } else {
        None
    };
    if target_partner_rows > 0 {
        log::debug!("{target_partner_rows} cutmix partners were target images (pseudo-labeled)");
    }
    Ok(FixMatchPlan {
        shape,
        inputs,
        row_domain,
        is_target,
        mix_ratio,
        label_a,
        label_b,
        partner_row,
        gate,
        mixstyle,
        target_partner_rows,
    })
}

/// Logits of the planned (mixed) inputs, with MixStyle applied after the
/// first backbone stage when planned.
pub fn planned_logits<S: Scalar, M: Classifier>(
    g: &mut Graph<S>,
    model: &M,
    leaves: &[Var],
    plan: &FixMatchPlan,
) -> Result<Var> {
    let x = g.constant(&plan.inputs, plan.num_rows(), plan.shape.len());
    match &plan.mixstyle {
        Some(ms) => {
            let mut hook = |g: &mut Graph<S>, h: Var, channels: usize| apply_mixstyle_graph(g, h, channels, ms);
            model.logits(g, leaves, x, Some(&mut hook))
        }
        None => model.logits(g, leaves, x, None),
    }
}

/// The first-step objective on a planned batch:
///
/// `1/(KB) Σ_src [λ CE(p, y) + (1−λ) CE(p, y^D)]
///  + 1/B Σ_tgt [𝟙(q ≥ τ0) λ CE(p, ŷ) + (1−λ) CE(p, y^D)]`.
///
/// The gate multiplies only the pseudo-label term.
pub fn fixmatch_cm_loss_graph<S: Scalar, M: Classifier>(
    g: &mut Graph<S>,
    model: &M,
    leaves: &[Var],
    plan: &FixMatchPlan,
) -> Result<Var> {
    let logits = planned_logits(g, model, leaves, plan)?;
    let c = model.num_classes();
    let n = plan.num_rows();
    let n_src = plan.num_source_rows() as f64;
    let n_tgt = plan.num_target_rows() as f64;
    let mut w = vec![0.0; n * c];
    for i in 0..n {
        let lam = plan.mix_ratio[i];
        let norm = if plan.is_target[i] { n_tgt } else { n_src };
        let gate = if plan.gate[i] { 1.0 } else { 0.0 };
        w[i * c + plan.label_a[i]] += gate * lam / norm;
        w[i * c + plan.label_b[i]] += (1.0 - lam) / norm;
    }
    let logp = g.log_softmax(logits);
    let wc = g.constant(&w, n, c);
    let weighted = g.mul(logp, wc);
    let s = g.sum(weighted);
    Ok(g.neg(s))
}

/// Evaluates the objective once at `params`, drawing augmentations from
/// `rng`. Returns the value and the plan used.
#[allow(clippy::too_many_arguments)]
pub fn fixmatch_cm_loss<M: Classifier>(
    model: &M,
    params: &ParamSet,
    batch: &MultiDomainBatch,
    target_id: usize,
    pseudo: Option<&TargetPseudoLabels>,
    shape: InputShape,
    cfg: &FixMatchCmConfig,
    rng: &mut impl Rng,
) -> Result<(f64, FixMatchPlan)> {
    let plan = plan_fixmatch_cm(batch, target_id, pseudo, shape, cfg, rng)?;
    let mut g = Graph::<f64>::new();
    let leaves = params.leaves(&mut g);
    let loss = fixmatch_cm_loss_graph(&mut g, model, &leaves, &plan)?;
    Ok((g.scalar(loss), plan))
}
