//! Running experiments: per-seed runs with checkpoints and metrics, and
//! multi-seed summaries, ablations and sensitivity sweeps on top.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::{ExperimentConfig, RunMode};
use super::eval::{evaluate, Evaluation};
use super::metrics::MetricsWriter;
use crate::bilevel::{second_step_update, second_step_views, BilevelState, Phase, TargetModelState};
use crate::datamodel::{LabeledSet, MultiDomainDataset};
use crate::error::{Error, Result};
use crate::first_step::{step1_update, LabelingFunctionState};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const STEP1_CHECKPOINT: &str = "step1.ckpt.json";
pub const STEP2_CHECKPOINT: &str = "step2.ckpt.json";
pub const RESULT_FILE: &str = "result.json";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_TABLE: &str = "summary.md";
pub const SENSITIVITY_FILE: &str = "sensitivity.json";
pub const ABLATION_FILE: &str = "ablation.json";

pub const SENSITIVITY_LAMBDAS: [f64; 4] = [0.001, 0.01, 0.1, 1.0];
pub const SENSITIVITY_MARGINS: [f64; 5] = [2.0, 4.0, 8.0, 16.0, 32.0];

impl ExperimentConfig {
    /// Hash identifying one seed's run, independent of where it is stored.
    pub fn run_hash(&self, seed: u64) -> String {
        ExperimentConfig {
            seeds: vec![seed],
            output_dir: PathBuf::new(),
            ..self.clone()
        }
        .hash()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAccuracy {
    pub domain: String,
    pub is_target: bool,
    pub accuracy: f64,
}

/// Outcome of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub config_hash: String,
    pub mode: RunMode,
    pub first_step: Vec<DomainAccuracy>,
    pub second_step: Option<Vec<DomainAccuracy>>,
    /// Target test accuracy of the deployed model.
    pub target_accuracy: f64,
    pub first_step_target_accuracy: f64,
    pub bilevel_started: Option<usize>,
    pub outer_steps: usize,
    pub empty_mask_epochs: Vec<usize>,
}

fn metric(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect()
}

fn append_new(w: &mut MetricsWriter, step: usize, epoch: usize, phase: &str, m: BTreeMap<String, f64>) -> Result<()> {
    // A resumed run replays steps whose records were written before the
    // last checkpoint was taken.
    if w.last_step().is_some_and(|s| step <= s) {
        return Ok(());
    }
    w.append(step, epoch, phase, m)
}

fn target_test(dataset: &MultiDomainDataset) -> Result<LabeledSet> {
    dataset
        .target_test()
        .or_else(|| dataset.target_train_eval_set())
        .ok_or_else(|| Error::config("the target domain has no evaluation labels"))
}

/// Trains (or resumes) the first step in `dir`.
pub fn run_step1(
    cfg: &ExperimentConfig,
    seed: u64,
    dataset: &MultiDomainDataset,
    dir: &Path,
    resume: bool,
    metrics: &mut MetricsWriter,
) -> Result<LabelingFunctionState> {
    let hash = cfg.run_hash(seed);
    let ckpt = dir.join(STEP1_CHECKPOINT);
    let s1 = cfg.step1_config(seed);
    let mut state = if resume && ckpt.exists() {
        info!("resuming first step from {}", ckpt.display());
        load_checkpoint::<LabelingFunctionState>(&ckpt, Some(&hash))?
    } else {
        LabelingFunctionState::new(cfg.labeling_net(dataset)?, s1.sgd, seed)?
    };
    let plugin = cfg.plugin();
    let test = target_test(dataset)?;
    while state.epoch < s1.epochs {
        let epoch = state.epoch;
        let step = state.step;
        let lr = state.optimizer.current_lr();
        let loss = step1_update(&mut state, dataset, &plugin, &s1)?;
        let mut m = metric(&[("loss", loss), ("lr", lr)]);
        if state.epoch != epoch {
            let acc = evaluate(&state.net, &state.theta, &test)?.accuracy;
            m.insert("target_acc".into(), acc);
            info!("first step epoch {}: loss {loss:.4}, target acc {acc:.4}", state.epoch);
        }
        append_new(metrics, step, epoch, "step1", m)?;
        if state.epoch != epoch {
            save_checkpoint(&ckpt, &hash, &state)?;
        }
    }
    save_checkpoint(&ckpt, &hash, &state)?;
    metrics.flush()?;
    Ok(state)
}

/// Trains (or resumes) the second step in `dir`, starting from `labeling`.
pub fn run_step2(
    cfg: &ExperimentConfig,
    seed: u64,
    dataset: &MultiDomainDataset,
    labeling: LabelingFunctionState,
    dir: &Path,
    resume: bool,
    metrics: &mut MetricsWriter,
) -> Result<BilevelState> {
    if cfg.mode == RunMode::None {
        return Err(Error::config("mode `none` has no second step"));
    }
    let hash = cfg.run_hash(seed);
    let ckpt = dir.join(STEP2_CHECKPOINT);
    let s2 = cfg.step2_config(seed);
    let offset = labeling.step;
    let mut state = if resume && ckpt.exists() {
        info!("resuming second step from {}", ckpt.display());
        load_checkpoint::<BilevelState>(&ckpt, Some(&hash))?
    } else {
        BilevelState::new(labeling, &s2)?
    };
    let test = target_test(dataset)?;
    let (train, val) = second_step_views(dataset, &s2)?;
    while state.epoch < s2.epochs {
        let epoch = state.epoch;
        let lr = state.target.optimizer.current_lr();
        let rec = second_step_update(&mut state, &train, val.as_ref(), &s2, Some(&test))?;
        let mut m = metric(&[
            ("l_trn", rec.l_trn),
            ("l_ce", rec.l_ce),
            ("l_ment", rec.l_ment),
            ("masked_fraction", rec.masked_fraction),
            ("tau", rec.tau),
            ("lr", lr),
        ]);
        for (k, v) in [("l_val", rec.l_val), ("hypergrad_norm", rec.hypergrad_norm), ("target_acc", rec.target_acc)] {
            if let Some(v) = v {
                m.insert(k.into(), v);
            }
        }
        if rec.target_acc.is_some() && state.target.net.stochastic {
            let scores = state.target.uncertainty_scores(&test.flat_inputs())?;
            m.insert("sigma_score".into(), scores.iter().sum::<f64>() / scores.len().max(1) as f64);
        }
        let phase = match rec.phase {
            Phase::InnerWarmup => "warmup",
            Phase::Bilevel => "bilevel",
        };
        append_new(metrics, offset + rec.step, rec.epoch, phase, m)?;
        if state.epoch != epoch && cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0 {
            save_checkpoint(&ckpt, &hash, &state)?;
        }
    }
    save_checkpoint(&ckpt, &hash, &state)?;
    metrics.flush()?;
    Ok(state)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::Read {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn domain_accuracies<M: crate::nn::Classifier>(
    model: &M,
    params: &crate::autodiff::ParamSet,
    dataset: &MultiDomainDataset,
    test: &LabeledSet,
) -> Result<(Vec<DomainAccuracy>, Evaluation)> {
    let mut out = Vec::new();
    for id in 0..dataset.num_sources() {
        if let Some(set) = dataset.source_set(id) {
            out.push(DomainAccuracy {
                domain: dataset.domain(id).name.clone(),
                is_target: false,
                accuracy: evaluate(model, params, &set)?.accuracy,
            });
        }
    }
    let target_eval = evaluate(model, params, test)?;
    out.push(DomainAccuracy {
        domain: dataset.domain(dataset.target_id()).name.clone(),
        is_target: true,
        accuracy: target_eval.accuracy,
    });
    Ok((out, target_eval))
}

/// Evaluates a target model on the target test set and stores the
/// confusion matrix next to the checkpoint.
pub fn evaluate_target(model: &TargetModelState, dataset: &MultiDomainDataset) -> Result<Evaluation> {
    evaluate(&model.net, &model.psi, &target_test(dataset)?)
}

/// Runs one seed end to end in `cfg.seed_dir(seed)`. With `resume`, picks
/// up from existing checkpoints.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, resume: bool) -> Result<SeedResult> {
    let dir = cfg.seed_dir(seed);
    std::fs::create_dir_all(&dir)?;
    let single = ExperimentConfig {
        seeds: vec![seed],
        ..cfg.clone()
    };
    std::fs::write(dir.join(CONFIG_FILE), single.to_toml_string()?)?;
    let metrics_path = dir.join(METRICS_FILE);
    if !resume && metrics_path.exists() {
        std::fs::remove_file(&metrics_path)?;
    }
    let mut metrics = MetricsWriter::open(&metrics_path)?;
    let dataset = cfg.load_dataset(seed)?;
    let test = target_test(&dataset)?;

    let labeling = run_step1(cfg, seed, &dataset, &dir, resume, &mut metrics)?;
    let (first_step, first_eval) = domain_accuracies(&labeling.net, &labeling.theta, &dataset, &test)?;
    write_json(&dir.join("confusion_first_step.json"), &first_eval)?;

    let mut result = SeedResult {
        seed,
        config_hash: cfg.run_hash(seed),
        mode: cfg.mode,
        first_step,
        second_step: None,
        target_accuracy: first_eval.accuracy,
        first_step_target_accuracy: first_eval.accuracy,
        bilevel_started: None,
        outer_steps: 0,
        empty_mask_epochs: Vec::new(),
    };
    if cfg.mode != RunMode::None {
        let state = run_step2(cfg, seed, &dataset, labeling, &dir, resume, &mut metrics)?;
        let (second, eval) = domain_accuracies(&state.target.net, &state.target.psi, &dataset, &test)?;
        write_json(&dir.join("confusion_second_step.json"), &eval)?;
        result.second_step = Some(second);
        result.target_accuracy = eval.accuracy;
        result.bilevel_started = state.bilevel_started;
        result.outer_steps = state.outer_steps;
        result.empty_mask_epochs = state.empty_mask_epochs.clone();
    }
    write_json(&dir.join(RESULT_FILE), &result)?;
    info!("seed {seed}: target accuracy {:.4}", result.target_accuracy);
    Ok(result)
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }

    /// Accuracies as percentages, e.g. `98.8±0.08`.
    pub fn display_percent(&self) -> String {
        format!("{:.1}±{:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    /// `first_step` or `second_step`.
    pub stage: String,
    pub domain: String,
    pub is_target: bool,
    pub per_seed: Vec<f64>,
    pub stats: MeanStd,
    pub display: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub name: String,
    pub config_hash: String,
    pub mode: RunMode,
    pub seeds: Vec<u64>,
    pub rows: Vec<SummaryRow>,
    /// Target accuracy of the deployed model across seeds.
    pub target: MeanStd,
    pub target_display: String,
}

fn stage_rows(stage: &str, per_seed: &[&[DomainAccuracy]]) -> Vec<SummaryRow> {
    let Some(first) = per_seed.first() else {
        return Vec::new();
    };
    first
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let values: Vec<f64> = per_seed.iter().map(|r| r[i].accuracy).collect();
            let stats = MeanStd::of(&values);
            SummaryRow {
                stage: stage.to_string(),
                domain: d.domain.clone(),
                is_target: d.is_target,
                per_seed: values,
                display: stats.display_percent(),
                stats,
            }
        })
        .collect()
}

pub fn summarize(cfg: &ExperimentConfig, results: &[SeedResult]) -> ExperimentSummary {
    let first: Vec<&[DomainAccuracy]> = results.iter().map(|r| r.first_step.as_slice()).collect();
    let mut rows = stage_rows("first_step", &first);
    let second: Vec<&[DomainAccuracy]> = results.iter().filter_map(|r| r.second_step.as_deref()).collect();
    if second.len() == results.len() {
        rows.extend(stage_rows("second_step", &second));
    }
    let target = MeanStd::of(&results.iter().map(|r| r.target_accuracy).collect::<Vec<_>>());
    ExperimentSummary {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        mode: cfg.mode,
        seeds: results.iter().map(|r| r.seed).collect(),
        rows,
        target,
        target_display: target.display_percent(),
    }
}

impl ExperimentSummary {
    pub fn render_table(&self) -> String {
        let mut s = format!(
            "{} (mode {}, {} seeds)\n\n| stage | domain | accuracy (%) |\n|---|---|---|\n",
            self.name,
            self.mode.name(),
            self.seeds.len()
        );
        for r in &self.rows {
            let tag = if r.is_target { " (target)" } else { "" };
            s.push_str(&format!("| {} | {}{} | {} |\n", r.stage, r.domain, tag, r.display));
        }
        s.push_str(&format!("\nfinal target accuracy: {}\n", self.target_display));
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join(SUMMARY_JSON), self)?;
        std::fs::write(dir.join(SUMMARY_TABLE), self.render_table())?;
        Ok(())
    }
}

/// Executes one seed of one config. The in-process runner is
/// [`run_seed`]; the CLI substitutes a subprocess.
pub type SeedRunner<'a> = dyn FnMut(&ExperimentConfig, u64) -> Result<SeedResult> + 'a;

/// Runs every seed of `cfg` and writes the summary into its directory.
pub fn run_experiment_with(cfg: &ExperimentConfig, runner: &mut SeedRunner<'_>) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let results = cfg
        .seeds
        .iter()
        .map(|&s| runner(cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(cfg, &results);
    summary.write(&cfg.experiment_dir())?;
    Ok(summary)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    run_experiment_with(cfg, &mut |c, s| run_seed(c, s, false))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub index: usize,
    pub mode: RunMode,
    pub target: MeanStd,
    pub display: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub name: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let mut s = format!("{} ablation\n\n| # | mode | target accuracy (%) |\n|---|---|---|\n", self.name);
        for r in &self.rows {
            s.push_str(&format!("| {} | {} | {} |\n", r.index, r.mode.name(), r.display));
        }
        s
    }

    /// Whether target accuracy is non-increasing down the table.
    pub fn is_ordered(&self) -> bool {
        self.rows.windows(2).all(|w| w[0].target.mean >= w[1].target.mean)
    }
}

/// The four ablation rows (full, without bilevel, naive, first step only),
/// each over all seeds. Writes `ablation.json` and `ablation.md` under the
/// base experiment directory.
pub fn run_ablation(base: &ExperimentConfig, runner: &mut SeedRunner<'_>) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (i, cfg) in base.ablation().iter().enumerate() {
        let summary = run_experiment_with(cfg, runner)?;
        rows.push(AblationRow {
            index: i + 1,
            mode: cfg.mode,
            target: summary.target,
            display: summary.target_display,
        });
    }
    let table = AblationTable {
        name: base.name.clone(),
        rows,
    };
    let dir = base.experiment_dir();
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join(ABLATION_FILE), &table)?;
    std::fs::write(dir.join("ablation.md"), table.render())?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityPoint {
    /// `lambda` or `margin`.
    pub param: String,
    pub value: f64,
    pub per_seed: Vec<f64>,
    pub target: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub name: String,
    pub points: Vec<SensitivityPoint>,
}

impl SensitivityReport {
    /// Max minus min of the mean accuracy over one parameter's values.
    pub fn spread(&self, param: &str) -> Option<f64> {
        let means: Vec<f64> = self.points.iter().filter(|p| p.param == param).map(|p| p.target.mean).collect();
        if means.is_empty() {
            return None;
        }
        let max = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = means.iter().cloned().fold(f64::INFINITY, f64::min);
        Some(max - min)
    }
}

/// One config per `(param, value)`, named after the base.
pub fn sensitivity_configs(base: &ExperimentConfig, lambdas: &[f64], margins: &[f64]) -> Vec<(String, f64, ExperimentConfig)> {
    let mut out = Vec::new();
    for &l in lambdas {
        let cfg = ExperimentConfig {
            name: format!("{}-lambda-{l}", base.name),
            lambda: l,
            ..base.clone()
        };
        out.push(("lambda".to_string(), l, cfg));
    }
    for &m in margins {
        let cfg = ExperimentConfig {
            name: format!("{}-margin-{m}", base.name),
            margin: m,
            ..base.clone()
        };
        out.push(("margin".to_string(), m, cfg));
    }
    out
}

/// Sweeps `λ` and `m` one at a time around `base` and writes
/// `sensitivity.json` under the base experiment directory.
pub fn run_sensitivity(
    base: &ExperimentConfig,
    lambdas: &[f64],
    margins: &[f64],
    runner: &mut SeedRunner<'_>,
) -> Result<SensitivityReport> {
    let mut points = Vec::new();
    for (param, value, cfg) in sensitivity_configs(base, lambdas, margins) {
        let summary = run_experiment_with(&cfg, runner)?;
        let per_seed = summary
            .rows
            .iter()
            .rev()
            .find(|r| r.is_target)
            .map(|r| r.per_seed.clone())
            .unwrap_or_default();
        points.push(SensitivityPoint {
            param,
            value,
            per_seed,
            target: summary.target,
        });
    }
    let report = SensitivityReport {
        name: base.name.clone(),
        points,
    };
    let dir = base.experiment_dir();
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join(SENSITIVITY_FILE), &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_formatting() {
        let s = MeanStd::of(&[0.988, 0.9888, 0.9872]);
        assert_eq!(s.display_percent(), "98.8±0.08");
        assert_eq!(MeanStd::of(&[0.5]).std, 0.0);
    }
}
