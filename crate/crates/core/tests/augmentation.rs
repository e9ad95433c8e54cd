use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use twostep_core::augment::{
    channel_stats, cutmix, cutmix_with_patch, draw_patch, fixmatch_cm_loss, mixstyle, plan_fixmatch_cm,
    FixMatchCmConfig, MixLabel, TargetPseudoLabels, MIXSTYLE_EPS,
};
use twostep_core::datamodel::{DomainBatch, InputShape, MultiDomainBatch};
use twostep_core::first_step::LabelingNet;
use twostep_core::nn::{Activation, BackboneSpec};

fn shape_strategy() -> impl Strategy<Value = InputShape> {
    (1usize..4, 1usize..9, 1usize..9).prop_map(|(channels, height, width)| InputShape { channels, height, width })
}

fn batch(dim: usize, rows: usize) -> MultiDomainBatch {
    let x = |k: usize| (0..rows * dim).map(|i| ((i * 13 + k * 7) % 11) as f64 / 5.0 - 1.0).collect();
    MultiDomainBatch {
        per_domain: vec![
            DomainBatch {
                domain_id: 0,
                inputs: x(0),
                labels: Some((0..rows).map(|i| i % 3).collect()),
                indices: (0..rows).collect(),
            },
            DomainBatch {
                domain_id: 1,
                inputs: x(1),
                labels: None,
                indices: (0..rows).collect(),
            },
        ],
    }
}

fn mlp(dim: usize) -> (LabelingNet, twostep_core::autodiff::ParamSet) {
    let net = LabelingNet::new(
        BackboneSpec::Mlp {
            input_dim: dim,
            hidden: vec![6],
            activation: Activation::Relu,
        },
        3,
    )
    .unwrap();
    let params = net.init(&mut ChaCha8Rng::seed_from_u64(1));
    (net, params)
}

proptest! {
    #[test]
    fn cutmix_ratio_is_the_unpasted_pixel_fraction(shape in shape_strategy(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = vec![0.0; shape.len()];
        let b = vec![1.0; shape.len()];
        let m = cutmix(&a, MixLabel::Class(0), &b, MixLabel::Class(1), shape, &mut rng).unwrap();
        let pasted = m.input.iter().filter(|&&v| v == 1.0).count();
        prop_assert_eq!(pasted, m.patch.area() * shape.channels);
        prop_assert_eq!(m.mix_ratio, 1.0 - pasted as f64 / shape.len() as f64);
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    let v = m.input[(c * shape.height + y) * shape.width + x];
                    prop_assert_eq!(v == 1.0, m.patch.contains(y, x));
                }
            }
        }
    }

    #[test]
    fn patches_stay_inside_the_image(shape in shape_strategy(), seed in 0u64..1000) {
        let p = draw_patch(shape, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(p.y0 <= p.y1 && p.y1 <= shape.height);
        prop_assert!(p.x0 <= p.x1 && p.x1 <= shape.width);
        let a: Vec<f64> = (0..shape.len()).map(|i| i as f64).collect();
        let m = cutmix_with_patch(&a, MixLabel::Class(0), &a, MixLabel::Class(0), shape, p).unwrap();
        prop_assert_eq!(m.input, a);
    }

    #[test]
    fn mixstyle_hits_the_interpolated_statistics(
        a in proptest::collection::vec(-5.0f64..5.0, 24),
        b in proptest::collection::vec(-5.0f64..5.0, 24),
        coeff in 0.0f64..=1.0,
    ) {
        let out = mixstyle(&a, &b, 3, coeff).unwrap();
        let (sa, sb, so) = (channel_stats(&a, 3), channel_stats(&b, 3), channel_stats(&out, 3));
        for c in 0..3 {
            let mean = coeff * sa[c].0 + (1.0 - coeff) * sb[c].0;
            prop_assert!((so[c].0 - mean).abs() < 1e-9 * (1.0 + mean.abs()));
            // scaling by σ/√(var+ε) leaves var·σ²/(var+ε) of variance
            let std = coeff * sa[c].1 + (1.0 - coeff) * sb[c].1;
            let var_a = sa[c].1 * sa[c].1 - MIXSTYLE_EPS;
            let expected = (std * std * var_a / (var_a + MIXSTYLE_EPS) + MIXSTYLE_EPS).sqrt();
            prop_assert!((so[c].1 - expected).abs() < 1e-9 * (1.0 + expected));
        }
        // normalized content is preserved: the map is increasing and affine
        let c0 = &a[..8];
        let o0 = &out[..8];
        for i in 0..8 {
            for j in 0..8 {
                if c0[i] < c0[j] {
                    prop_assert!(o0[i] <= o0[j]);
                }
            }
        }
    }

    #[test]
    fn fixmatch_loss_is_nonnegative_and_reproducible(seed in 0u64..300, tau0 in 0.0f64..1.0) {
        let (net, params) = mlp(4);
        let b = batch(4, 5);
        let pseudo = TargetPseudoLabels { hard: vec![0, 1, 2, 0, 1], confidence: vec![0.99, 0.3, 0.96, 0.5, 0.97] };
        let cfg = FixMatchCmConfig { tau0, mixstyle: false, ..Default::default() };
        let shape = InputShape::vector(4);
        let (l1, p1) = fixmatch_cm_loss(&net, &params, &b, 1, Some(&pseudo), shape, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (l2, p2) = fixmatch_cm_loss(&net, &params, &b, 1, Some(&pseudo), shape, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(l1 >= 0.0 && l1.is_finite());
        prop_assert_eq!(l1, l2);
        prop_assert_eq!(p1.open_gates(), pseudo.confidence.iter().filter(|&&q| q >= tau0).count());
        prop_assert_eq!(p2.num_rows(), 10);
    }
}

#[test]
fn closing_every_gate_removes_only_the_pseudo_label_term() {
    let (net, params) = mlp(4);
    let b = batch(4, 5);
    let pseudo = TargetPseudoLabels {
        hard: vec![0, 1, 2, 0, 1],
        confidence: vec![0.99; 5],
    };
    let shape = InputShape::vector(4);
    let open = FixMatchCmConfig {
        tau0: 0.5,
        cutmix: false,
        mixstyle: false,
        ..Default::default()
    };
    let closed = FixMatchCmConfig { tau0: 1.5, ..open.clone() };
    let rng = || ChaCha8Rng::seed_from_u64(9);
    let (l_open, _) = fixmatch_cm_loss(&net, &params, &b, 1, Some(&pseudo), shape, &open, &mut rng()).unwrap();
    let (l_closed, plan) = fixmatch_cm_loss(&net, &params, &b, 1, Some(&pseudo), shape, &closed, &mut rng()).unwrap();
    // without CutMix every row has ratio 1, so closed gates zero the target rows
    assert_eq!(plan.open_gates(), 0);
    let src_only = FixMatchCmConfig {
        target_terms: false,
        ..open
    };
    let (l_src, _) = fixmatch_cm_loss(&net, &params, &b, 1, Some(&pseudo), shape, &src_only, &mut rng()).unwrap();
    assert!((l_closed - l_src).abs() < 1e-12);
    assert!(l_open > l_closed);
}

#[test]
fn target_rows_require_pseudo_labels() {
    let b = batch(4, 3);
    let r = plan_fixmatch_cm(
        &b,
        1,
        None,
        InputShape::vector(4),
        &FixMatchCmConfig::default(),
        &mut ChaCha8Rng::seed_from_u64(0),
    );
    assert!(r.is_err());
}
