use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use twostep_core::autodiff::Graph;
use twostep_core::pseudolabel::{
    argmax, confidence_mask, gumbel_soft_label, gumbel_soft_label_with_noise, hard_label, label_batch,
    update_adaptive_threshold, ThresholdState,
};
use twostep_core::stochastic_head::{
    entropy_max_loss, entropy_max_loss_graph, forward_stochastic, forward_with_epsilon, uncertainty_score,
    StochasticHeadParams,
};

fn distribution(raw: Vec<f64>) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

fn probs_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..5).prop_flat_map(|c| vec(vec(0.01f64..1.0, c).prop_map(distribution), 1..20))
}

fn head(dim: usize, seed: u64) -> StochasticHeadParams {
    let mut h = StochasticHeadParams::identity_init(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = &mut h.params.get_mut("sigma.w").unwrap().data;
    for x in w.iter_mut() {
        *x = rand::Rng::random_range(&mut rng, -0.5..0.5);
    }
    h
}

proptest! {
    #[test]
    fn reparameterization_and_positive_sigma(seed in 0u64..500, input in vec(-3.0f64..3.0, 4)) {
        let h = head(4, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = forward_stochastic(&h, &input, &mut rng).unwrap();
        for i in 0..4 {
            prop_assert!(f.sigma[i] > 0.0 && f.sigma[i].is_finite());
            prop_assert_eq!(f.z[i], f.mu[i] + f.sigma[i] * f.epsilon[i]);
        }
        let again = forward_with_epsilon(&h, &input, f.epsilon.clone()).unwrap();
        prop_assert_eq!(again, f);
    }

    #[test]
    fn entropy_loss_is_a_nonnegative_hinge(
        sigma in vec(vec(0.01f64..20.0, 3), 1..8),
        margin in -5.0f64..10.0,
    ) {
        let loss = entropy_max_loss(&sigma, margin).unwrap();
        prop_assert!(loss >= 0.0);
        let scores = uncertainty_score(&sigma).unwrap();
        let expected = scores.iter().map(|s| (margin - s).max(0.0)).sum::<f64>() / scores.len() as f64;
        prop_assert!((loss - expected).abs() < 1e-12);
        // raising every σ can only lower the loss
        let wider: Vec<Vec<f64>> = sigma.iter().map(|r| r.iter().map(|s| s * 1.5).collect()).collect();
        prop_assert!(entropy_max_loss(&wider, margin).unwrap() <= loss + 1e-12);
    }

    #[test]
    fn entropy_gradient_vanishes_beyond_margin(log_sigma in vec(-3.0f64..3.0, 6), margin in -4.0f64..4.0) {
        let mut g = Graph::<f64>::new();
        let leaf = g.leaf(log_sigma.clone(), 2, 3);
        let l = entropy_max_loss_graph(&mut g, leaf, margin);
        let grad = g.backward(l).get_or_zeros(leaf, 6);
        for r in 0..2 {
            let score: f64 = log_sigma[r * 3..(r + 1) * 3].iter().sum();
            let expected = if score > margin { 0.0 } else if score < margin { -0.5 } else { f64::NAN };
            if expected.is_finite() {
                for c in 0..3 {
                    prop_assert!((grad[r * 3 + c] - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn hard_label_is_the_argmax(p in vec(0.01f64..1.0, 2..6).prop_map(distribution)) {
        let l = hard_label(&p).unwrap();
        prop_assert!(p.iter().all(|&x| x <= l.confidence));
        prop_assert_eq!(p[l.hard], l.confidence);
        prop_assert!(p[..l.hard].iter().all(|&x| x < l.confidence));
    }

    #[test]
    fn gumbel_labels_are_distributions(
        logits in vec(-5.0f64..5.0, 2..6),
        temperature in 0.05f64..5.0,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let soft = gumbel_soft_label(&logits, temperature, &mut rng, false).unwrap();
        prop_assert!((soft.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(soft.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let noise = vec![0.3; logits.len()];
        let hard = gumbel_soft_label_with_noise(&logits, &noise, temperature, true).unwrap();
        let soft = gumbel_soft_label_with_noise(&logits, &noise, temperature, false).unwrap();
        prop_assert_eq!(hard.iter().filter(|&&x| x == 1.0).count(), 1);
        prop_assert_eq!(argmax(&hard), argmax(&soft));
        prop_assert_eq!(argmax(&soft), argmax(&logits));
    }

    #[test]
    fn adaptive_threshold_follows_the_ema(batches in vec(probs_strategy(), 1..6), alpha in 0.0f64..1.0) {
        let mut state = ThresholdState::adaptive(alpha);
        for (n, batch) in batches.iter().enumerate() {
            let maxp: Vec<f64> = batch.iter().map(|p| p[argmax(p)]).collect();
            let mean = maxp.iter().sum::<f64>() / maxp.len() as f64;
            let std = (maxp.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / maxp.len() as f64).sqrt();
            let next = update_adaptive_threshold(&state, batch);
            let expected = if n == 0 { (mean + std).min(1.0) } else { alpha * state.tau + (1.0 - alpha) * (mean - std) };
            prop_assert!((next.tau - expected).abs() < 1e-12);
            prop_assert!(next.tau <= 1.0);
            state = next;
        }
    }

    #[test]
    fn mask_shrinks_as_threshold_rises(probs in probs_strategy(), lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        let (_, mask_lo, frac_lo) = label_batch(&probs, &ThresholdState::fixed(lo)).unwrap();
        let (mut labels, mask_hi, frac_hi) = label_batch(&probs, &ThresholdState::fixed(hi)).unwrap();
        prop_assert!(frac_hi <= frac_lo);
        for (a, b) in mask_hi.iter().zip(&mask_lo) {
            prop_assert!(!a || *b);
        }
        let (again, _) = confidence_mask(&mut labels, &ThresholdState::fixed(hi));
        prop_assert_eq!(again, mask_hi);
    }
}

#[test]
fn per_class_thresholds_only_see_their_class() {
    let batch = vec![vec![0.9, 0.1], vec![0.7, 0.3], vec![0.2, 0.8]];
    let state = update_adaptive_threshold(&ThresholdState::per_class(0.5, 2), &batch);
    // class 0 saw 0.9 and 0.7, class 1 only 0.8
    assert!((state.tau_for(0) - 0.9).abs() < 1e-12);
    assert!((state.tau_for(1) - 0.8).abs() < 1e-12);
}
