//! Gaussian feature head: each instance's final feature is `N(μ, σ²)` with
//! data-dependent `μ` and `σ`, sampled by reparameterization, plus the
//! hinge entropy-maximization loss and the per-instance uncertainty score.
//!
//! `σ = exp(clamp(pre, -6, 6))`, so `Σ log σ` is linear in the
//! pre-activation wherever the clamp is inactive.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamSet, ParamTensor, Scalar, Var};
use crate::error::{Error, Result};
use crate::nn::linear;

pub const LOG_SIGMA_MIN: f64 = -6.0;
pub const LOG_SIGMA_MAX: f64 = 6.0;

/// `Ψ_μ` and `Ψ_σ`: two affine maps from `d_in` to `d_out`.
///
/// Tensors are named `mu.w`, `mu.b`, `sigma.w`, `sigma.b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticHeadParams {
    pub params: ParamSet,
    pub d_in: usize,
    pub d_out: usize,
}

impl StochasticHeadParams {
    /// `μ` starts as the identity map and `σ` as the constant 1 (score 0).
    pub fn identity_init(dim: usize) -> Self {
        let mut eye = vec![0.0; dim * dim];
        for i in 0..dim {
            eye[i * dim + i] = 1.0;
        }
        let mut params = ParamSet::new();
        params.push("mu.w", dim, dim, eye);
        params.push("mu.b", 1, dim, vec![0.0; dim]);
        params.push("sigma.w", dim, dim, vec![0.0; dim * dim]);
        params.push("sigma.b", 1, dim, vec![0.0; dim]);
        Self {
            params,
            d_in: dim,
            d_out: dim,
        }
    }

    /// `μ` starts as the affine layer `(w, b)` and `σ` as the constant 1.
    pub fn from_layer(w: &ParamTensor, b: &ParamTensor) -> Result<Self> {
        let (d_in, d_out) = (w.rows, w.cols);
        if (b.rows, b.cols) != (1, d_out) {
            return Err(Error::shape("layer bias does not match its weight"));
        }
        let mut params = ParamSet::new();
        params.push("mu.w", d_in, d_out, w.data.clone());
        params.push("mu.b", 1, d_out, b.data.clone());
        params.push("sigma.w", d_in, d_out, vec![0.0; d_in * d_out]);
        params.push("sigma.b", 1, d_out, vec![0.0; d_out]);
        Ok(Self { params, d_in, d_out })
    }

    pub fn from_params(params: ParamSet) -> Result<Self> {
        let get = |n: &str| {
            params
                .get(n)
                .map(|t| (t.rows, t.cols))
                .ok_or_else(|| Error::shape(format!("stochastic head missing `{n}`")))
        };
        let (d_in, d_out) = get("mu.w")?;
        if get("mu.b")? != (1, d_out) || get("sigma.w")? != (d_in, d_out) || get("sigma.b")? != (1, d_out) {
            return Err(Error::shape("inconsistent stochastic head shapes"));
        }
        Ok(Self { params, d_in, d_out })
    }
}

/// One instance's Gaussian feature and the noise used to sample it.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticFeature {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub z: Vec<f64>,
    pub epsilon: Vec<f64>,
}

/// Graph nodes produced by [`head_forward`].
#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    pub mu: Var,
    pub log_sigma: Var,
    pub sigma: Var,
    pub z: Var,
}

/// Head forward on the tape. `leaves` are `[mu.w, mu.b, sigma.w, sigma.b]`;
/// `epsilon` is the `[batch, d_out]` standard-normal draw, or `None` for the
/// deterministic path (`z = μ`).
pub fn head_forward<S: Scalar>(
    g: &mut Graph<S>,
    leaves: &[Var],
    x: Var,
    epsilon: Option<&[f64]>,
) -> Result<HeadNodes> {
    let (rows, cols) = g.shape(x);
    if leaves.len() != 4 || g.shape(leaves[0]).0 != cols {
        return Err(Error::shape(format!("stochastic head input has width {cols}")));
    }
    let mu = linear(g, x, leaves[0], leaves[1]);
    let pre = linear(g, x, leaves[2], leaves[3]);
    let log_sigma = g.clamp(pre, LOG_SIGMA_MIN, LOG_SIGMA_MAX);
    let sigma = g.exp(log_sigma);
    let z = match epsilon {
        Some(eps) => {
            let d_out = g.shape(mu).1;
            if eps.len() != rows * d_out {
                return Err(Error::shape("epsilon has the wrong size"));
            }
            let e = g.constant(eps, rows, d_out);
            let se = g.mul(sigma, e);
            g.add(mu, se)
        }
        None => mu,
    };
    Ok(HeadNodes {
        mu,
        log_sigma,
        sigma,
        z,
    })
}

/// Standard-normal draw of `n` values.
pub fn draw_epsilon(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Samples `z = μ + σ ⊙ ε` for one backbone feature.
pub fn forward_stochastic(
    head: &StochasticHeadParams,
    z_prev: &[f64],
    rng: &mut impl Rng,
) -> Result<StochasticFeature> {
    let eps = draw_epsilon(rng, head.d_out);
    forward_with_epsilon(head, z_prev, eps)
}

/// [`forward_stochastic`] with a caller-chosen `ε`.
pub fn forward_with_epsilon(
    head: &StochasticHeadParams,
    z_prev: &[f64],
    epsilon: Vec<f64>,
) -> Result<StochasticFeature> {
    if z_prev.len() != head.d_in {
        return Err(Error::shape(format!(
            "head expects a {}-dim feature, got {}",
            head.d_in,
            z_prev.len()
        )));
    }
    let mut g = Graph::<f64>::new();
    let leaves = head.params.leaves(&mut g);
    let x = g.constant(z_prev, 1, head.d_in);
    let nodes = head_forward(&mut g, &leaves, x, None)?;
    let mu = g.primal(nodes.mu);
    let sigma = g.primal(nodes.sigma);
    // computed outside the tape so z = μ + σ ⊙ ε holds bit-exactly
    let z = mu
        .iter()
        .zip(&sigma)
        .zip(&epsilon)
        .map(|((m, s), e)| m + s * e)
        .collect();
    Ok(StochasticFeature {
        mu,
        sigma,
        z,
        epsilon,
    })
}

/// Evaluation path: `μ` only, no randomness.
pub fn forward_deterministic(head: &StochasticHeadParams, z_prev: &[f64]) -> Result<Vec<f64>> {
    Ok(forward_with_epsilon(head, z_prev, vec![0.0; head.d_out])?.mu)
}

fn check_sigma(sigma: &[Vec<f64>]) -> Result<()> {
    if sigma.iter().flatten().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::domain("sigma must be strictly positive and finite"));
    }
    Ok(())
}

/// `Σ_dim log σ` for each instance.
pub fn uncertainty_score(sigma: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_sigma(sigma)?;
    Ok(sigma.iter().map(|s| s.iter().map(|x| x.ln()).sum()).collect())
}

/// Batch mean of `(m − Σ_dim log σ)⁺`.
pub fn entropy_max_loss(sigma: &[Vec<f64>], margin: f64) -> Result<f64> {
    if !margin.is_finite() {
        return Err(Error::domain("margin must be finite"));
    }
    if sigma.is_empty() {
        return Ok(0.0);
    }
    let scores = uncertainty_score(sigma)?;
    Ok(scores.iter().map(|s| (margin - s).max(0.0)).sum::<f64>() / scores.len() as f64)
}

/// Tape version of [`entropy_max_loss`] taking `log σ` (`[batch, d_out]`).
pub fn entropy_max_loss_graph<S: Scalar>(g: &mut Graph<S>, log_sigma: Var, margin: f64) -> Var {
    let per = g.sum_rows(log_sigma);
    let neg = g.neg(per);
    let gap = g.add_scalar(neg, margin);
    let hinge = g.relu(gap);
    g.mean(hinge)
}

/// Tape version of the batch-mean uncertainty score.
pub fn mean_uncertainty_graph<S: Scalar>(g: &mut Graph<S>, log_sigma: Var) -> Var {
    let per = g.sum_rows(log_sigma);
    g.mean(per)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::E;

    fn head() -> StochasticHeadParams {
        let mut h = StochasticHeadParams::identity_init(3);
        let w = &mut h.params.get_mut("sigma.w").unwrap().data;
        w[0] = 0.3;
        w[4] = -0.2;
        w[8] = 0.1;
        h.params.get_mut("mu.b").unwrap().data[1] = 0.5;
        h
    }

    #[test]
    fn zero_epsilon_gives_mu_exactly() {
        let f = forward_with_epsilon(&head(), &[1.0, -2.0, 0.5], vec![0.0; 3]).unwrap();
        assert_eq!(f.z, f.mu);
        assert_eq!(forward_deterministic(&head(), &[1.0, -2.0, 0.5]).unwrap(), f.mu);
    }

    #[test]
    fn reparameterization_identity_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = forward_stochastic(&head(), &[1.0, -2.0, 0.5], &mut rng).unwrap();
        for i in 0..3 {
            assert_eq!(f.z[i], f.mu[i] + f.sigma[i] * f.epsilon[i]);
            assert!(f.sigma[i] > 0.0);
        }
    }

    #[test]
    fn same_seed_same_sample() {
        let a = forward_stochastic(&head(), &[0.1, 0.2, 0.3], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = forward_stochastic(&head(), &[0.1, 0.2, 0.3], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        assert!(matches!(
            forward_deterministic(&head(), &[1.0, 2.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn deterministic_path_ignores_sigma_parameters() {
        let h = head();
        let mut g = Graph::<f64>::new();
        let leaves = h.params.leaves(&mut g);
        let x = g.constant(&[1.0, -2.0, 0.5], 1, 3);
        let nodes = head_forward(&mut g, &leaves, x, None).unwrap();
        let sq = g.mul(nodes.z, nodes.z);
        let l = g.sum(sq);
        let grads = g.backward(l);
        assert!(grads.get(leaves[2]).is_none());
        assert!(grads.get(leaves[3]).is_none());
    }

    #[test]
    fn entropy_loss_analytic_cases() {
        assert_eq!(entropy_max_loss(&[vec![E; 4]], 4.0).unwrap(), 0.0);
        assert!((entropy_max_loss(&[vec![E]], 4.0).unwrap() - 3.0).abs() < 1e-15);
        assert!(matches!(entropy_max_loss(&[vec![0.0]], 4.0), Err(Error::Domain(_))));
    }

    #[test]
    fn uncertainty_score_cases() {
        assert_eq!(uncertainty_score(&[vec![1.0; 5]]).unwrap(), vec![0.0]);
        let s = uncertainty_score(&[vec![E * E, 1.0 / (E * E)]]).unwrap()[0];
        assert!(s.abs() < 1e-15);
        let lo = uncertainty_score(&[vec![0.5, 1.0]]).unwrap()[0];
        let hi = uncertainty_score(&[vec![0.6, 1.1]]).unwrap()[0];
        assert!(hi > lo);
        assert!(uncertainty_score(&[vec![-1.0]]).is_err());
    }
}
