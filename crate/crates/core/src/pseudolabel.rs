//! Turning labeling-function outputs into supervision: hard labels,
//! confidence masks, Gumbel-softmax labels, and the adaptive threshold.
//!
//! Threshold statistics are computed over each sample's max-probability,
//! the quantity the mask compares against. Masks are treated as constants
//! by the losses that use them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, Var};
use crate::error::{Error, Result};

const PROB_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub probs: Vec<f64>,
    /// `argmax(probs)`, lowest index on ties.
    pub hard: usize,
    /// Gumbel-softmax label, when one was drawn.
    pub soft: Option<Vec<f64>>,
    pub confidence: f64,
    pub masked_in: bool,
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::domain("empty probability vector"));
    }
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&x| !(x >= -PROB_TOL) || !x.is_finite()) || (sum - 1.0).abs() > PROB_TOL {
        return Err(Error::domain(format!("not a probability vector (sum {sum})")));
    }
    Ok(())
}

pub fn hard_label(probs: &[f64]) -> Result<PseudoLabel> {
    check_distribution(probs)?;
    let hard = argmax(probs);
    Ok(PseudoLabel {
        probs: probs.to_vec(),
        hard,
        soft: None,
        confidence: probs[hard],
        masked_in: false,
    })
}

/// Standard Gumbel draws `-ln(-ln u)`.
pub fn gumbel_noise(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            // open interval keeps both logs finite
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::domain(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

/// `softmax((logits + noise) / temperature)`; with `straight_through` the
/// returned value is the one-hot of its argmax.
pub fn gumbel_soft_label_with_noise(
    logits: &[f64],
    noise: &[f64],
    temperature: f64,
    straight_through: bool,
) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    if logits.len() != noise.len() {
        return Err(Error::shape("logits and noise differ in length"));
    }
    let y: Vec<f64> = logits
        .iter()
        .zip(noise)
        .map(|(l, n)| (l + n) / temperature)
        .collect();
    let mx = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = y.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    let soft: Vec<f64> = e.into_iter().map(|v| v / z).collect();
    if straight_through {
        let k = argmax(&soft);
        Ok((0..soft.len()).map(|i| if i == k { 1.0 } else { 0.0 }).collect())
    } else {
        Ok(soft)
    }
}

pub fn gumbel_soft_label(
    logits: &[f64],
    temperature: f64,
    rng: &mut impl Rng,
    straight_through: bool,
) -> Result<Vec<f64>> {
    let noise = gumbel_noise(rng, logits.len());
    gumbel_soft_label_with_noise(logits, &noise, temperature, straight_through)
}

/// Tape version over `[batch, classes]` logits with fixed `noise`.
///
/// Straight-through returns `soft + detach(onehot − soft)`: the forward
/// value is the one-hot, the gradient is that of the soft vector.
pub fn gumbel_soft_label_graph<S: Scalar>(
    g: &mut Graph<S>,
    logits: Var,
    noise: &[f64],
    temperature: f64,
    straight_through: bool,
) -> Result<Var> {
    check_temperature(temperature)?;
    let (n, c) = g.shape(logits);
    if noise.len() != n * c {
        return Err(Error::shape("gumbel noise has the wrong size"));
    }
    let nz = g.constant(noise, n, c);
    let perturbed = g.add(logits, nz);
    let scaled = g.scale(perturbed, 1.0 / temperature);
    let soft = g.softmax(scaled);
    if !straight_through {
        return Ok(soft);
    }
    let vals = g.primal(soft);
    let mut onehot = vec![0.0; n * c];
    for (i, row) in vals.chunks(c).enumerate() {
        onehot[i * c + argmax(row)] = 1.0;
    }
    let hard = g.constant(&onehot, n, c);
    let diff = g.sub(hard, soft);
    let stop = g.detach(diff);
    Ok(g.add(soft, stop))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// `τ` never changes.
    Fixed,
    /// One EMA-scheduled `τ` for all classes.
    Adaptive,
    /// One EMA-scheduled `τ_c` per predicted class.
    PerClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassThreshold {
    pub tau: f64,
    pub floor_stat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    pub mode: ThresholdMode,
    pub tau: f64,
    pub alpha: f64,
    /// Latest batch `p_mean − p_std`.
    pub floor_stat: f64,
    pub initialized: bool,
    /// Per-class thresholds, lazily initialized on first observation.
    pub per_class: Option<Vec<Option<ClassThreshold>>>,
    /// Set when the latest update saw an empty batch.
    pub empty_batch_warning: bool,
}

impl ThresholdState {
    pub fn fixed(tau: f64) -> Self {
        Self {
            mode: ThresholdMode::Fixed,
            tau,
            alpha: 1.0,
            floor_stat: tau,
            initialized: true,
            per_class: None,
            empty_batch_warning: false,
        }
    }

    pub fn adaptive(alpha: f64) -> Self {
        Self {
            mode: ThresholdMode::Adaptive,
            tau: 1.0,
            alpha,
            floor_stat: 1.0,
            initialized: false,
            per_class: None,
            empty_batch_warning: false,
        }
    }

    pub fn per_class(alpha: f64, num_classes: usize) -> Self {
        Self {
            mode: ThresholdMode::PerClass,
            per_class: Some(vec![None; num_classes]),
            ..Self::adaptive(alpha)
        }
    }

    /// Threshold applied to a sample predicted as `class`.
    pub fn tau_for(&self, class: usize) -> f64 {
        match &self.per_class {
            Some(pc) => pc.get(class).copied().flatten().map_or(self.tau, |c| c.tau),
            None => self.tau,
        }
    }
}

/// Mean and population standard deviation.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn ema_step(tau: f64, alpha: f64, floor: f64) -> f64 {
    alpha * tau + (1.0 - alpha) * floor
}

/// First call: `τ ← p_mean + p_std` (capped at 1). Later calls:
/// `τ ← α τ + (1 − α)(p_mean − p_std)`. Statistics are over the batch's
/// max-probabilities; per-class thresholds use only samples predicted as
/// that class, and keep their value when the class is absent.
pub fn update_adaptive_threshold(state: &ThresholdState, batch_probs: &[Vec<f64>]) -> ThresholdState {
    let mut next = state.clone();
    next.empty_batch_warning = false;
    if state.mode == ThresholdMode::Fixed {
        return next;
    }
    if batch_probs.is_empty() {
        next.empty_batch_warning = true;
        return next;
    }
    let maxp: Vec<f64> = batch_probs.iter().map(|p| p[argmax(p)]).collect();
    let (mean, std) = mean_std(&maxp);
    next.floor_stat = mean - std;
    if state.initialized {
        next.tau = ema_step(state.tau, state.alpha, next.floor_stat);
    } else {
        next.tau = (mean + std).min(1.0);
        next.initialized = true;
    }
    if let Some(pc) = next.per_class.as_mut() {
        for (c, slot) in pc.iter_mut().enumerate() {
            let vals: Vec<f64> = batch_probs
                .iter()
                .zip(&maxp)
                .filter(|(p, _)| argmax(p) == c)
                .map(|(_, &m)| m)
                .collect();
            if vals.is_empty() {
                continue;
            }
            let (m, s) = mean_std(&vals);
            *slot = Some(match slot {
                Some(ct) => ClassThreshold {
                    tau: ema_step(ct.tau, state.alpha, m - s),
                    floor_stat: m - s,
                },
                None => ClassThreshold {
                    tau: (m + s).min(1.0),
                    floor_stat: m - s,
                },
            });
        }
    }
    next
}

/// Marks `masked_in` on each label (`confidence ≥ τ`, inclusive) and
/// returns the mask with the masked-in fraction.
pub fn confidence_mask(labels: &mut [PseudoLabel], state: &ThresholdState) -> (Vec<bool>, f64) {
    let mask: Vec<bool> = labels
        .iter_mut()
        .map(|l| {
            l.masked_in = l.confidence >= state.tau_for(l.hard);
            l.masked_in
        })
        .collect();
    let frac = if mask.is_empty() {
        0.0
    } else {
        mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64
    };
    (mask, frac)
}

/// Hard labels and mask for a batch of probability rows.
pub fn label_batch(probs: &[Vec<f64>], state: &ThresholdState) -> Result<(Vec<PseudoLabel>, Vec<bool>, f64)> {
    let mut labels = probs.iter().map(|p| hard_label(p)).collect::<Result<Vec<_>>>()?;
    let (mask, frac) = confidence_mask(&mut labels, state);
    Ok((labels, mask, frac))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hard_label_cases() {
        let l = hard_label(&[0.1, 0.7, 0.2]).unwrap();
        assert_eq!((l.hard, l.confidence), (1, 0.7));
        let u = hard_label(&[0.25; 4]).unwrap();
        assert_eq!((u.hard, u.confidence), (0, 0.25));
        let o = hard_label(&[0.0, 0.0, 1.0]).unwrap();
        assert_eq!((o.hard, o.confidence), (2, 1.0));
        assert!(matches!(hard_label(&[0.5, 0.6]), Err(Error::Domain(_))));
    }

    #[test]
    fn gumbel_limits() {
        let cold = gumbel_soft_label_with_noise(&[2.0, 1.0], &[0.0, 0.0], 1e-3, false).unwrap();
        assert!((cold[0] - 1.0).abs() < 1e-12 && cold[1] < 1e-12);
        let hot = gumbel_soft_label_with_noise(&[2.0, 1.0], &[0.0, 0.0], 1e9, false).unwrap();
        assert!((hot[0] - 0.5).abs() < 1e-8);
        assert!(gumbel_soft_label_with_noise(&[1.0], &[0.0], 0.0, false).is_err());
        let st = gumbel_soft_label_with_noise(&[0.2, 0.1, 3.0], &[0.0; 3], 1.0, true).unwrap();
        assert_eq!(st, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn straight_through_forward_is_onehot_backward_is_soft() {
        let logits = [0.3, -0.4, 1.1];
        let noise = [0.2, 0.5, -0.1];
        let weights = [1.0, 2.0, 3.0];
        let mut g = Graph::<f64>::new();
        let l = g.constant(&logits, 1, 3);
        let y = gumbel_soft_label_graph(&mut g, l, &noise, 0.7, true).unwrap();
        let v = g.primal(y);
        assert_eq!(argmax(&v), 2);
        assert!((v[2] - 1.0).abs() < 1e-15 && v[0].abs() < 1e-15);
        let w = g.constant(&weights, 1, 3);
        let wy = g.mul(y, w);
        let s = g.sum(wy);
        let grad_st = g.backward(s).get(l).unwrap().to_vec();

        let mut g2 = Graph::<f64>::new();
        let l2 = g2.constant(&logits, 1, 3);
        let y2 = gumbel_soft_label_graph(&mut g2, l2, &noise, 0.7, false).unwrap();
        let w2 = g2.constant(&weights, 1, 3);
        let wy2 = g2.mul(y2, w2);
        let s2 = g2.sum(wy2);
        let grad_soft = g2.backward(s2).get(l2).unwrap().to_vec();
        for (a, b) in grad_st.iter().zip(&grad_soft) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn threshold_init_then_ema() {
        let batch = vec![vec![0.7, 0.3], vec![0.1, 0.9]];
        let s0 = ThresholdState::adaptive(0.999);
        let s1 = update_adaptive_threshold(&s0, &batch);
        assert!((s1.tau - 0.9).abs() < 1e-12);
        let s2 = update_adaptive_threshold(&s1, &batch);
        assert!((s2.tau - (0.999 * 0.9 + 0.001 * 0.7)).abs() < 1e-12);
        assert!((s2.tau - 0.8998).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_flagged_noop() {
        let s = update_adaptive_threshold(&ThresholdState::adaptive(0.9), &[vec![0.6, 0.4]]);
        let t = update_adaptive_threshold(&s, &[]);
        assert!(t.empty_batch_warning);
        assert_eq!(t.tau, s.tau);
    }

    #[test]
    fn mask_cases() {
        let mk = |c: &[f64]| {
            c.iter()
                .map(|&x| hard_label(&[x, 1.0 - x]).unwrap())
                .collect::<Vec<_>>()
        };
        let mut ls = mk(&[0.95, 0.85, 0.9]);
        let (m, f) = confidence_mask(&mut ls, &ThresholdState::fixed(0.9));
        assert_eq!(m, vec![true, false, true]);
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
        let (m, f) = confidence_mask(&mut mk(&[0.6, 0.7]), &ThresholdState::fixed(0.99));
        assert_eq!((m, f), (vec![false, false], 0.0));
        let (m, _) = confidence_mask(&mut mk(&[0.5, 0.7]), &ThresholdState::fixed(0.0));
        assert_eq!(m, vec![true, true]);
    }

    #[test]
    fn per_class_missing_class_keeps_threshold() {
        let s0 = ThresholdState::per_class(0.5, 3);
        let s1 = update_adaptive_threshold(&s0, &[vec![0.8, 0.1, 0.1], vec![0.1, 0.6, 0.3]]);
        let pc = s1.per_class.as_ref().unwrap();
        assert!((pc[0].unwrap().tau - 0.8).abs() < 1e-12);
        assert!((pc[1].unwrap().tau - 0.6).abs() < 1e-12);
        assert!(pc[2].is_none());
        assert_eq!(s1.tau_for(2), s1.tau);
        let s2 = update_adaptive_threshold(&s1, &[vec![0.9, 0.05, 0.05]]);
        let pc2 = s2.per_class.as_ref().unwrap();
        assert_eq!(pc2[1], pc[1]);
        assert!((pc2[0].unwrap().tau - (0.5 * 0.8 + 0.5 * 0.9)).abs() < 1e-12);
    }
}
