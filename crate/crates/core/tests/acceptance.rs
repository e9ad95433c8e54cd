//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on
//! any failure. Built with `harness = false`.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use twostep_core::augment::{
    cutmix, fixmatch_cm_loss_graph, mixstyle, plan_fixmatch_cm, planned_logits, FixMatchCmConfig, MixLabel,
    TargetPseudoLabels,
};
use twostep_core::autodiff::{inner_second_order, BilevelObjective, Graph, ParamSet, Scalar, Var};
use twostep_core::bilevel::{
    hypergradient, inner_value_and_grad, neumann_series, outer_loss, second_step_update,
    second_step_views, BilevelState, InnerLabels, InnerProblem, NeumannConfig, Phase, TargetModelState,
};
use twostep_core::datamodel::{
    generate_synthetic_msda, DomainBatch, InputShape, MultiDomainBatch, SyntheticShiftConfig,
};
use twostep_core::first_step::{
    step1_update, train_step1, AdaptationLossPlugin, LabelingFunctionState, LabelingNet, Step1Config,
};
use twostep_core::harness::{
    load_checkpoint, read_metrics, run_ablation, run_experiment, run_seed, run_sensitivity, save_checkpoint,
    ExperimentConfig, RunMode, SENSITIVITY_LAMBDAS,
};
use twostep_core::nn::{Activation, BackboneSpec};
use twostep_core::optim::{LrSchedule, SgdConfig};
use twostep_core::pseudolabel::{
    argmax, gumbel_noise, gumbel_soft_label, gumbel_soft_label_graph, gumbel_soft_label_with_noise,
    update_adaptive_threshold, ThresholdState,
};
use twostep_core::stochastic_head::{draw_epsilon, entropy_max_loss, entropy_max_loss_graph};
use twostep_core::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// ---------------------------------------------------------------- 1

struct Quadratic;

impl BilevelObjective for Quadratic {
    fn inner_loss<S: Scalar>(&self, g: &mut Graph<S>, outer: &[Var], inner: &[Var]) -> Result<Var> {
        let d = g.sub(inner[0], outer[0]);
        let sq = g.mul(d, d);
        Ok(g.scale(sq, 0.5))
    }

    fn outer_loss<S: Scalar>(&self, g: &mut Graph<S>, inner: &[Var]) -> Result<Var> {
        let sq = g.mul(inner[0], inner[0]);
        Ok(g.scale(sq, 0.5))
    }
}

fn scalar_set(name: &str, v: f64) -> ParamSet {
    let mut p = ParamSet::new();
    p.push(name, 1, 1, vec![v]);
    p
}

fn criterion_1() -> Result<Outcome> {
    let theta = scalar_set("theta", 0.7);
    // inner optimum Ψ* = θ
    let psi = scalar_set("psi", 0.7);
    let cfg = NeumannConfig {
        num_terms: 60,
        eta: 0.5,
        damping: 0.0,
    };
    let hg = hypergradient(&Quadratic, &theta, &psi, &cfg)?;
    let err = (hg.grad[0] - 0.7).abs();
    Ok(outcome(err <= 1e-6, format!("hypergradient {:.12}, |error| {err:.2e}", hg.grad[0])))
}

// ---------------------------------------------------------------- 2

fn dense_hessian(p: &InnerProblem, theta: &ParamSet, psi: &ParamSet) -> Result<DMatrix<f64>> {
    let n = psi.num_scalars();
    let mut h = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        let (col, _) = inner_second_order(p, theta, psi, &e)?;
        for (j, v) in col.into_iter().enumerate() {
            h[(j, i)] = v;
        }
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// Levenberg-Marquardt on the inner loss with the exact Hessian, run to
/// gradient norm 1e-12.
fn solve_inner(p: &InnerProblem, theta: &ParamSet, start: &ParamSet) -> Result<ParamSet> {
    let mut psi = start.clone();
    let mut mu = 1.0;
    let (mut val, mut grad) = inner_value_and_grad(p, theta, &psi)?;
    for _ in 0..500 {
        if grad.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-12 {
            break;
        }
        let h = dense_hessian(p, theta, &psi)?;
        loop {
            let damped = &h + DMatrix::identity(h.nrows(), h.nrows()) * mu;
            let Some(chol) = damped.cholesky() else {
                mu *= 4.0;
                continue;
            };
            let step = chol.solve(&DVector::from_column_slice(&grad));
            let mut cand = psi.clone();
            cand.axpy(-1.0, step.as_slice())?;
            let (v2, g2) = inner_value_and_grad(p, theta, &cand)?;
            if v2.total <= val.total + 1e-15 {
                psi = cand;
                val = v2;
                grad = g2;
                mu = (mu / 3.0).max(1e-12);
                break;
            }
            mu *= 4.0;
            if mu > 1e12 {
                return Ok(psi);
            }
        }
    }
    Ok(psi)
}

fn criterion_2() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let backbone = BackboneSpec::Mlp {
        input_dim: 2,
        hidden: vec![4],
        activation: Activation::Tanh,
    };
    let lnet = LabelingNet::new(backbone, 3)?;
    let mut theta = lnet.init(&mut rng);
    let jittered: Vec<f64> = theta.flatten().iter().map(|x| x + 0.3 * (rng.random::<f64>() - 0.5)).collect();
    theta.set_flat(&jittered)?;
    let tstate = TargetModelState::from_labeling(&lnet, &theta, true, SgdConfig::plain(0.1))?;
    let b = 12;
    let x: Vec<f64> = (0..b * 2).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
    let eps: Vec<f64> = (0..b * 4).map(|_| rng.random::<f64>() - 0.5).collect();
    let noise = gumbel_noise(&mut rng, b * 3);
    let prob = InnerProblem {
        labeling: &lnet,
        target: &tstate.net,
        inputs: &x,
        labels: InnerLabels::Gumbel {
            noise,
            temperature: 1.0,
            straight_through: false,
        },
        mask: vec![true; b],
        epsilon: Some(eps),
        lambda: 0.1,
        margin: 4.0,
        // keeps the inner problem strongly convex enough to re-solve exactly
        weight_decay: 0.5,
        val_inputs: None,
    };
    let psi_star = solve_inner(&prob, &theta, &tstate.psi)?;
    let lmax = dense_hessian(&prob, &theta, &psi_star)?.symmetric_eigen().eigenvalues.max();
    let cfg = NeumannConfig {
        num_terms: 20_000,
        eta: 1.0 / lmax,
        damping: 0.0,
    };
    let hg = hypergradient(&prob, &theta, &psi_star, &cfg)?;

    let h = 1e-4;
    let (mut ok, mut counted) = (0, 0);
    let mut worst: f64 = 0.0;
    for k in 0..theta.num_scalars() {
        let at = |d: f64| -> Result<f64> {
            let mut t = theta.clone();
            let mut flat = t.flatten();
            flat[k] += d;
            t.set_flat(&flat)?;
            let psi = solve_inner(&prob, &t, &psi_star)?;
            outer_loss(
                &TargetModelState {
                    psi,
                    ..tstate.clone()
                },
                &x,
            )
        };
        let fd = (at(h)? - at(-h)?) / (2.0 * h);
        if fd.abs() > 1e-6 {
            counted += 1;
            let rel = (fd - hg.grad[k]).abs() / fd.abs();
            worst = worst.max(rel);
            if rel <= 1e-2 {
                ok += 1;
            }
        }
    }
    let pass = counted > 0 && ok as f64 >= 0.9 * counted as f64;
    Ok(outcome(
        pass,
        format!(
            "{} outer / {} inner params, {ok}/{counted} coordinates within 1e-2 (worst {worst:.1e})",
            theta.num_scalars(),
            tstate.psi.num_scalars()
        ),
    ))
}

// ---------------------------------------------------------------- 3

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let q = m.qr().q();
    let eig = DVector::<f64>::from_fn(n, |_, _| rng.random_range(1.0..5.0));
    &q * DMatrix::from_diagonal(&eig) * q.transpose()
}

fn criterion_3() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut monotone = true;
    for _ in 0..20 {
        let a = random_spd(&mut rng, 10);
        let lmax = a.clone().symmetric_eigen().eigenvalues.max();
        let v = DVector::<f64>::from_fn(10, |_, _| StandardNormal.sample(&mut rng));
        let exact = a.clone().try_inverse().expect("SPD matrix is invertible") * &v;
        let mut prev = f64::INFINITY;
        for j in [10, 50, 200] {
            let cfg = NeumannConfig {
                num_terms: j,
                eta: 0.9 / lmax,
                damping: 0.0,
            };
            let approx = neumann_series(|p| Ok((&a * DVector::from_column_slice(p)).as_slice().to_vec()), v.as_slice(), &cfg)?;
            let err = (DVector::from_vec(approx) - &exact).norm() / exact.norm();
            monotone &= err <= prev;
            prev = err;
            if j == 200 {
                worst = worst.max(err);
            }
        }
    }
    Ok(outcome(
        worst <= 1e-4 && monotone,
        format!("20 systems, worst relative error at J=200 {worst:.1e}, monotone {monotone}"),
    ))
}

// ---------------------------------------------------------------- 4

/// Mean uncertainty score of (clean, corrupted) instances after training a
/// stochastic target model on target labels with a fraction `rho` flipped.
fn sigma_separation(seed: u64, rho: f64) -> Result<(f64, f64)> {
    let (dim, hidden, n) = (2, 32, 512);
    let ds = generate_synthetic_msda(&SyntheticShiftConfig {
        seed,
        input_dim: dim,
        samples_per_domain: n,
        class_std: 0.7,
        ambient_std: 0.0,
        shift_magnitudes: vec![0.0; 4],
        ..Default::default()
    })?;
    let backbone = BackboneSpec::Mlp {
        input_dim: dim,
        hidden: vec![hidden, hidden],
        activation: Activation::Tanh,
    };
    let s1 = Step1Config {
        epochs: 10,
        batch_size: 32,
        seed,
        ..Default::default()
    };
    let lf = train_step1(
        LabelingFunctionState::new(LabelingNet::new(backbone, 3)?, s1.sgd, seed)?,
        &ds,
        &AdaptationLossPlugin::Zero,
        &s1,
    )?;
    let set = ds.target_train_eval_set().expect("synthetic target has labels");
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let mut labels = set.labels.clone();
    let mut corrupt = vec![false; labels.len()];
    for (l, c) in labels.iter_mut().zip(corrupt.iter_mut()) {
        if rng.random::<f64>() < rho {
            *l = (*l + rng.random_range(1..3)) % 3;
            *c = true;
        }
    }
    let sgd = SgdConfig {
        lr: 0.01,
        momentum: 0.9,
        weight_decay: 0.0,
        schedule: LrSchedule::Constant,
    };
    let mut target = TargetModelState::from_labeling(&lf.net, &lf.theta, true, sgd)?;
    let x = set.flat_inputs();
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for _ in 0..50 {
        order.shuffle(&mut rng);
        for chunk in order.chunks(32) {
            let xb: Vec<f64> = chunk.iter().flat_map(|&i| x[i * dim..(i + 1) * dim].to_vec()).collect();
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let problem = InnerProblem {
                labeling: &lf.net,
                target: &target.net,
                inputs: &xb,
                labels: InnerLabels::Hard(yb),
                mask: vec![true; chunk.len()],
                epsilon: Some(draw_epsilon(&mut rng, chunk.len() * hidden)),
                lambda: 0.001,
                margin: 4.0,
                weight_decay: 5e-4,
                val_inputs: None,
            };
            let (_, grad) = inner_value_and_grad(&problem, &lf.theta, &target.psi)?;
            target.optimizer.step(&mut target.psi, &grad)?;
        }
    }
    let scores = target.uncertainty_scores(&x)?;
    let mean = |want: bool| {
        let v: Vec<f64> = scores.iter().zip(&corrupt).filter(|(_, &c)| c == want).map(|(s, _)| *s).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    Ok((mean(false), mean(true)))
}

fn criterion_4() -> Result<Outcome> {
    let mut details = Vec::new();
    let mut pass = true;
    for rho in [0.2, 0.4] {
        let mut wins = 0;
        for seed in 0..5 {
            let (clean, noisy) = sigma_separation(seed, rho)?;
            if noisy > clean {
                wins += 1;
            }
        }
        pass &= wins >= 4;
        details.push(format!("ρ={rho}: {wins}/5 seeds"));
    }
    Ok(outcome(pass, details.join(", ")))
}

// ---------------------------------------------------------------- 5, 10

fn benchmark_config(out: &std::path::Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&repo_root().join("configs/synthetic_benchmark.toml"))?;
    cfg.output_dir = out.to_path_buf();
    Ok(cfg)
}

fn criterion_5() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let cfg = benchmark_config(dir.path())?;
    let table = run_ablation(&cfg, &mut |c, s| run_seed(c, s, false))?;
    let mean = |m: RunMode| table.rows.iter().find(|r| r.mode == m).map(|r| r.target.mean).unwrap_or(f64::NAN);
    let (full, nob, naive, none) = (
        mean(RunMode::RobustFull),
        mean(RunMode::RobustNoBilevel),
        mean(RunMode::Naive),
        mean(RunMode::None),
    );
    let gain = naive - none;
    let pass = gain >= 0.01 && full >= nob && nob >= naive;
    Ok(outcome(
        pass,
        format!(
            "full {:.1}, no_bilevel {:.1}, naive {:.1}, first step {:.1} (naive gain {:.1} points)",
            100.0 * full,
            100.0 * nob,
            100.0 * naive,
            100.0 * none,
            100.0 * gain
        ),
    ))
}

fn criterion_10() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let cfg = benchmark_config(dir.path())?;
    let report = run_sensitivity(&cfg, &SENSITIVITY_LAMBDAS, &[], &mut |c, s| run_seed(c, s, false))?;
    let spread = report.spread("lambda").unwrap_or(f64::NAN);
    let means: Vec<String> = report.points.iter().map(|p| format!("{:.1}", 100.0 * p.target.mean)).collect();
    Ok(outcome(
        spread <= 0.03,
        format!("λ ∈ {SENSITIVITY_LAMBDAS:?} → [{}], spread {:.2} points", means.join(", "), 100.0 * spread),
    ))
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Result<Outcome> {
    let alpha = 0.999;
    // max-probabilities 0.9 and 0.7: mean 0.8, population std 0.1
    let batch = vec![vec![0.9, 0.1], vec![0.7, 0.3]];
    let mut state = ThresholdState::adaptive(alpha);
    let mut worst: f64 = 0.0;
    for n in 0..=1000 {
        state = update_adaptive_threshold(&state, &batch);
        let expected = 0.7 + 0.2 * alpha.powi(n);
        worst = worst.max((state.tau - expected).abs());
    }
    Ok(outcome(worst <= 1e-9, format!("max |τ_n − (0.7 + 0.2·0.999ⁿ)| = {worst:.1e} over n ≤ 1000")))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, c) = (3, 4);
    let logits: Vec<f64> = (0..n * c).map(|_| StandardNormal.sample(&mut rng)).collect();
    let noise = gumbel_noise(&mut rng, n * c);
    let weights: Vec<f64> = (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let temperature = 0.7;

    // f(logits) = Σ w ⊙ soft_label(logits)
    let f = |l: &[f64]| -> Result<f64> {
        let mut total = 0.0;
        for r in 0..n {
            let y = gumbel_soft_label_with_noise(&l[r * c..(r + 1) * c], &noise[r * c..(r + 1) * c], temperature, false)?;
            total += y.iter().zip(&weights[r * c..(r + 1) * c]).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(total)
    };
    let mut worst: f64 = 0.0;
    for straight_through in [false, true] {
        let mut g = Graph::<f64>::new();
        let leaf = g.leaf(logits.clone(), n, c);
        let y = gumbel_soft_label_graph(&mut g, leaf, &noise, temperature, straight_through)?;
        let w = g.constant(&weights, n, c);
        let prod = g.mul(y, w);
        let s = g.sum(prod);
        let grads = g.backward(s);
        let analytic = grads.get_or_zeros(leaf, n * c);
        let h = 1e-6;
        for k in 0..n * c {
            let mut up = logits.clone();
            let mut down = logits.clone();
            up[k] += h;
            down[k] -= h;
            let fd = (f(&up)? - f(&down)?) / (2.0 * h);
            worst = worst.max((fd - analytic[k]).abs());
        }
    }

    let draws = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mut first = 0;
    for _ in 0..draws {
        if argmax(&gumbel_soft_label(&[1.0, 0.0], 1.0, &mut rng, true)?) == 0 {
            first += 1;
        }
    }
    let freq = first as f64 / draws as f64;
    let e = std::f64::consts::E;
    let target = e / (e + 1.0);
    let pass = worst <= 1e-4 && (freq - target).abs() <= 0.01;
    Ok(outcome(
        pass,
        format!("gradient max |error| {worst:.1e}; argmax frequency {freq:.4} vs e/(e+1) = {target:.4}"),
    ))
}

// ---------------------------------------------------------------- 8

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn population_stats(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn criterion_8() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let shape = InputShape {
        channels: 2,
        height: 6,
        width: 6,
    };
    let classes = 3;
    let backbone = BackboneSpec::Conv {
        channels: shape.channels,
        height: shape.height,
        width: shape.width,
        conv_channels: [3, 4, 4],
        feature_dim: 5,
        activation: Activation::Relu,
    };
    let net = LabelingNet::new(backbone, classes)?;
    let params = net.init(&mut rng);
    let rows = 4;
    let image = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..rows * shape.len()).map(|_| StandardNormal.sample(rng)).collect() };
    let per_domain = vec![
        DomainBatch {
            domain_id: 0,
            inputs: image(&mut rng),
            labels: Some(vec![0, 1, 2, 1]),
            indices: (0..rows).collect(),
        },
        DomainBatch {
            domain_id: 1,
            inputs: image(&mut rng),
            labels: Some(vec![2, 2, 0, 1]),
            indices: (0..rows).collect(),
        },
        DomainBatch {
            domain_id: 2,
            inputs: image(&mut rng),
            labels: None,
            indices: (0..rows).collect(),
        },
    ];
    let batch = MultiDomainBatch { per_domain };
    let pseudo = TargetPseudoLabels {
        hard: vec![1, 0, 2, 2],
        confidence: vec![0.97, 0.5, 0.96, 0.2],
    };
    let cfg = FixMatchCmConfig {
        mixstyle_prob: 1.0,
        ..Default::default()
    };
    let plan = plan_fixmatch_cm(&batch, 2, Some(&pseudo), shape, &cfg, &mut rng)?;

    let mut g = Graph::<f64>::new();
    let leaves = params.leaves(&mut g);
    let loss = fixmatch_cm_loss_graph(&mut g, &net, &leaves, &plan)?;
    let value = g.scalar(loss);
    let logits_node = planned_logits(&mut g, &net, &leaves, &plan)?;
    let logits = g.primal(logits_node);

    // independent term-by-term recomputation
    let n_src = plan.is_target.iter().filter(|t| !**t).count() as f64;
    let n_tgt = plan.is_target.iter().filter(|t| **t).count() as f64;
    let mut expected = 0.0;
    for i in 0..plan.num_rows() {
        let logp = log_softmax_row(&logits[i * classes..(i + 1) * classes]);
        let lam = plan.mix_ratio[i];
        let ce_a = -logp[plan.label_a[i]];
        let ce_b = -logp[plan.label_b[i]];
        if plan.is_target[i] {
            let gate = if pseudo.confidence[i - 2 * rows] >= cfg.tau0 { 1.0 } else { 0.0 };
            expected += (gate * lam * ce_a + (1.0 - lam) * ce_b) / n_tgt;
        } else {
            expected += (lam * ce_a + (1.0 - lam) * ce_b) / n_src;
        }
    }
    let loss_err = (value - expected).abs();

    // CutMix: distinct value ranges make every pasted pixel identifiable
    let mut ratio_exact = true;
    for _ in 0..200 {
        let a: Vec<f64> = (0..shape.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..shape.len()).map(|_| rng.random_range(2.0..3.0)).collect();
        let m = cutmix(&a, MixLabel::Class(0), &b, MixLabel::Class(1), shape, &mut rng)?;
        let from_b = m.input.iter().filter(|&&v| v >= 2.0).count();
        let oracle = 1.0 - from_b as f64 / shape.len() as f64;
        ratio_exact &= m.mix_ratio == oracle;
    }

    // MixStyle: output statistics are the convex combination of the inputs'
    let mut stat_err: f64 = 0.0;
    for _ in 0..50 {
        let channels = 3;
        let per = 16;
        let a: Vec<f64> = (0..channels * per).map(|i| 1.0 + (i / per) as f64 + rng.random_range(-1.5..1.5)).collect();
        let b: Vec<f64> = (0..channels * per).map(|_| rng.random_range(-4.0..0.0)).collect();
        let coeff = rng.random_range(0.0..1.0);
        let out = mixstyle(&a, &b, channels, coeff)?;
        for c in 0..channels {
            let r = c * per..(c + 1) * per;
            let (ma, sa) = population_stats(&a[r.clone()]);
            let (mb, sb) = population_stats(&b[r.clone()]);
            let (mo, so) = population_stats(&out[r]);
            stat_err = stat_err
                .max((mo - (coeff * ma + (1.0 - coeff) * mb)).abs())
                .max((so - (coeff * sa + (1.0 - coeff) * sb)).abs());
        }
    }
    let pass = loss_err <= 1e-6 && ratio_exact && stat_err <= 1e-5;
    Ok(outcome(
        pass,
        format!(
            "loss |error| {loss_err:.1e} (mixstyle {}), cutmix ratios exact {ratio_exact}, mixstyle stat |error| {stat_err:.1e}",
            if plan.mixstyle.is_some() { "on" } else { "off" }
        ),
    ))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Result<Outcome> {
    let e = std::f64::consts::E;
    let boundary = entropy_max_loss(&[vec![e; 4]], 4.0)?;
    let inside = entropy_max_loss(&[vec![e]], 4.0)?;
    let values_ok = boundary.abs() < 1e-12 && (inside - 3.0).abs() < 1e-12;

    // rows with Σ log σ well inside and well outside the margin
    let log_sigma = vec![0.3, -0.2, 0.1, 2.5, 2.0, 1.0, -1.0, 0.5, 0.2];
    let (rows, cols, margin) = (3, 3, 4.0);
    let value = |ls: &[f64]| -> Result<f64> {
        let sigma: Vec<Vec<f64>> = ls.chunks(cols).map(|r| r.iter().map(|v| v.exp()).collect()).collect();
        entropy_max_loss(&sigma, margin)
    };
    let mut g = Graph::<f64>::new();
    let leaf = g.leaf(log_sigma.clone(), rows, cols);
    let l = entropy_max_loss_graph(&mut g, leaf, margin);
    let analytic = g.backward(l).get_or_zeros(leaf, rows * cols);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..rows * cols {
        let mut up = log_sigma.clone();
        let mut down = log_sigma.clone();
        up[k] += h;
        down[k] -= h;
        let fd = (value(&up)? - value(&down)?) / (2.0 * h);
        worst = worst.max((fd - analytic[k]).abs());
    }
    Ok(outcome(
        values_ok && worst <= 1e-5,
        format!("values {boundary} and {inside}; gradient max |error| {worst:.1e}"),
    ))
}

// ---------------------------------------------------------------- 11

fn smoke_config(out: &std::path::Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&repo_root().join("configs/smoke.toml"))?;
    cfg.output_dir = out.to_path_buf();
    Ok(cfg)
}

type MetricRow = (usize, String, Vec<(String, f64)>);

fn metric_values(cfg: &ExperimentConfig) -> Result<Vec<MetricRow>> {
    let mut out = Vec::new();
    for &s in &cfg.seeds {
        for r in read_metrics(&cfg.seed_dir(s).join("metrics.jsonl"))? {
            out.push((r.step, r.phase, r.metrics.into_iter().collect()));
        }
    }
    Ok(out)
}

fn criterion_11() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let cfg = smoke_config(dir.path())?;
    let a = run_experiment(&cfg)?;
    let metrics_a = metric_values(&cfg)?;
    let b = run_experiment(&cfg)?;
    let metrics_b = metric_values(&cfg)?;
    let same_summary = serde_json::to_string(&a)? == serde_json::to_string(&b)?;
    let same_metrics = metrics_a == metrics_b;

    // checkpoint round trip inside the bilevel phase
    let seed = cfg.seeds[0];
    let ds = cfg.load_dataset(seed)?;
    let s1 = cfg.step1_config(seed);
    let mut lf = LabelingFunctionState::new(cfg.labeling_net(&ds)?, s1.sgd, seed)?;
    let plugin = cfg.plugin();
    for _ in 0..3 {
        step1_update(&mut lf, &ds, &plugin, &s1)?;
    }
    let p1 = dir.path().join("s1.ckpt.json");
    save_checkpoint(&p1, "h", &lf)?;
    let mut lf_back: LabelingFunctionState = load_checkpoint(&p1, Some("h"))?;
    let step1_same = step1_update(&mut lf, &ds, &plugin, &s1)? == step1_update(&mut lf_back, &ds, &plugin, &s1)?;
    let lf = train_step1(lf, &ds, &plugin, &s1)?;

    let s2 = cfg.step2_config(seed);
    let (train, val) = second_step_views(&ds, &s2)?;
    let mut state = BilevelState::new(lf, &s2)?;
    while state.phase != Phase::Bilevel || state.outer_steps == 0 {
        second_step_update(&mut state, &train, val.as_ref(), &s2, None)?;
    }
    let p2 = dir.path().join("s2.ckpt.json");
    save_checkpoint(&p2, "h", &state)?;
    let mut back: BilevelState = load_checkpoint(&p2, Some("h"))?;
    let mut step2_same = back == state;
    for _ in 0..s2.inner_steps_per_outer + 1 {
        let r1 = second_step_update(&mut state, &train, val.as_ref(), &s2, None)?;
        let r2 = second_step_update(&mut back, &train, val.as_ref(), &s2, None)?;
        step2_same &= r1 == r2;
    }
    step2_same &= back.labeling.theta == state.labeling.theta && back.target.psi == state.target.psi;
    let pass = same_summary && same_metrics && step1_same && step2_same;
    Ok(outcome(
        pass,
        format!(
            "summary identical {same_summary}, metrics identical {same_metrics}, resumed first-step loss identical {step1_same}, resumed second-step records identical {step2_same}"
        ),
    ))
}

// ----------------------------------------------------------------

type Check = fn() -> Result<Outcome>;

fn main() -> ExitCode {
    let checks: [(u32, &str, Check, Duration); 11] = [
        (1, "analytic hypergradient", criterion_1, Duration::from_secs(1)),
        (2, "numeric hypergradient", criterion_2, Duration::from_secs(300)),
        (3, "Neumann oracle", criterion_3, Duration::from_secs(10)),
        (4, "sigma separation", criterion_4, Duration::from_secs(600)),
        (5, "two-step gain and ablation order", criterion_5, Duration::from_secs(1800)),
        (6, "adaptive threshold", criterion_6, Duration::MAX),
        (7, "Gumbel-softmax", criterion_7, Duration::MAX),
        (8, "FixMatch-CM, CutMix, MixStyle oracles", criterion_8, Duration::MAX),
        (9, "entropy loss", criterion_9, Duration::MAX),
        (10, "sensitivity flatness", criterion_10, Duration::from_secs(3600)),
        (11, "determinism and checkpoint round trip", criterion_11, Duration::MAX),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check, limit) in checks {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let result = check();
        let took = t0.elapsed();
        let (pass, detail) = match result {
            Ok(o) => (o.pass && took <= limit, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let budget = if limit == Duration::MAX {
            String::new()
        } else {
            format!(" / {}s", limit.as_secs())
        };
        println!(
            "criterion {id:>2} {}: {name}: {detail} [{:.2}s{budget}]",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
        if !pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
