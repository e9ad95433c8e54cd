//! Multi-domain datasets: in-memory representation, a synthetic domain-shift
//! generator, on-disk ingestion, batching, and held-out splitting.
//!
//! Domains are stored sources first (ids `0..K`) with the target last (id
//! `K`). Target labels, when known, live in an evaluation-only store: the
//! training view ([`MultiDomainDataset::training_sample`], batch iterators)
//! never exposes them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-sample input layout, channels-first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    /// A plain feature vector, laid out as a `1 x 1 x dim` image.
    pub fn vector(dim: usize) -> Self {
        Self {
            channels: 1,
            height: 1,
            width: dim,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One input as seen by a training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSample {
    pub input: Vec<f64>,
    pub label: Option<usize>,
    pub domain_id: usize,
}

/// One domain's samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub name: String,
    inputs: Vec<Vec<f64>>,
    /// Training-visible labels (sources only).
    labels: Option<Vec<usize>>,
    /// Evaluation-only ground truth.
    eval_labels: Option<Vec<usize>>,
    /// Which training labels were corrupted by injected noise.
    corrupted: Option<Vec<bool>>,
}

impl Domain {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i]
    }

    fn select(&self, idx: &[usize]) -> Domain {
        Domain {
            name: self.name.clone(),
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            eval_labels: self
                .eval_labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
            corrupted: self
                .corrupted
                .as_ref()
                .map(|c| idx.iter().map(|&i| c[i]).collect()),
        }
    }
}

/// A labeled evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub shape: InputShape,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn flat_inputs(&self) -> Vec<f64> {
        self.inputs.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiDomainDataset {
    shape: InputShape,
    num_classes: usize,
    class_names: Vec<String>,
    domains: Vec<Domain>,
    target_test: Option<Domain>,
}

impl MultiDomainDataset {
    pub fn shape(&self) -> InputShape {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// `K`, the number of source domains.
    pub fn num_sources(&self) -> usize {
        self.domains.len() - 1
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    /// Domain id of the target, equal to [`Self::num_sources`].
    pub fn target_id(&self) -> usize {
        self.domains.len() - 1
    }

    pub fn domain(&self, id: usize) -> &Domain {
        &self.domains[id]
    }

    pub fn domain_len(&self, id: usize) -> usize {
        self.domains[id].len()
    }

    /// Training view of one sample. Target samples never carry a label.
    pub fn training_sample(&self, domain_id: usize, index: usize) -> DomainSample {
        let d = &self.domains[domain_id];
        DomainSample {
            input: d.inputs[index].clone(),
            label: d.labels.as_ref().map(|l| l[index]),
            domain_id,
        }
    }

    /// Training view of a whole domain.
    pub fn training_samples(&self, domain_id: usize) -> impl Iterator<Item = DomainSample> + '_ {
        (0..self.domains[domain_id].len()).map(move |i| self.training_sample(domain_id, i))
    }

    /// Ground truth for evaluation, including the hidden target labels.
    pub fn eval_labels(&self, domain_id: usize) -> Option<&[usize]> {
        let d = &self.domains[domain_id];
        d.eval_labels.as_deref().or(d.labels.as_deref())
    }

    /// Flags of source labels corrupted by injected noise.
    pub fn corrupted_flags(&self, domain_id: usize) -> Option<&[bool]> {
        self.domains[domain_id].corrupted.as_deref()
    }

    /// The target domain's training inputs with their evaluation labels, if
    /// those are known.
    pub fn target_train_eval_set(&self) -> Option<LabeledSet> {
        let t = &self.domains[self.target_id()];
        t.eval_labels.as_ref().map(|labels| LabeledSet {
            shape: self.shape,
            inputs: t.inputs.clone(),
            labels: labels.clone(),
        })
    }

    /// The disjoint labeled target test set.
    pub fn target_test(&self) -> Option<LabeledSet> {
        self.target_test.as_ref().and_then(|t| {
            t.eval_labels.as_ref().map(|labels| LabeledSet {
                shape: self.shape,
                inputs: t.inputs.clone(),
                labels: labels.clone(),
            })
        })
    }

    /// Labeled set for a source domain.
    pub fn source_set(&self, domain_id: usize) -> Option<LabeledSet> {
        let d = &self.domains[domain_id];
        d.labels.as_ref().map(|labels| LabeledSet {
            shape: self.shape,
            inputs: d.inputs.clone(),
            labels: labels.clone(),
        })
    }

    /// Moves a stratified `fraction` of the labeled target training samples
    /// into the test store, keeping train and test disjoint.
    pub fn hold_out_target_test(&mut self, fraction: f64, seed: u64) -> Result<()> {
        let tid = self.target_id();
        let labels = self.domains[tid].eval_labels.clone().ok_or_else(|| {
            Error::config("target test split needs labeled target data")
        })?;
        let groups = group_by_label(&labels, self.num_classes);
        let (train_idx, test_idx) = stratified_split(&groups, fraction, seed)?;
        let target = self.domains[tid].clone();
        self.domains[tid] = target.select(&train_idx);
        self.target_test = Some(target.select(&test_idx));
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.domains.len() < 2 {
            return Err(Error::config("need at least one source and one target domain"));
        }
        for (id, d) in self.domains.iter().enumerate() {
            let is_target = id == self.domains.len() - 1;
            if is_target == d.labels.is_some() {
                return Err(Error::Contract(format!(
                    "domain `{}`: sources must carry training labels, the target must not",
                    d.name
                )));
            }
            if d.inputs.iter().any(|x| x.len() != self.shape.len()) {
                return Err(Error::shape(format!("domain `{}` has inputs of the wrong length", d.name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// Rotate the latent plane by the magnitude, in degrees.
    Rotation,
    /// Translate along the latent diagonal by the magnitude.
    Translation,
    /// Scale the within-class spread by `1 + magnitude`.
    CovarianceScale,
}

impl FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotation" => Ok(ShiftKind::Rotation),
            "translation" => Ok(ShiftKind::Translation),
            "covariance_scale" | "covariance-scale" => Ok(ShiftKind::CovarianceScale),
            other => Err(Error::config(format!("unknown shift kind `{other}`"))),
        }
    }
}

/// Class blobs in a 2-D latent plane, shifted per domain and embedded into
/// `input_dim` dimensions by a fixed random orthonormal map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticShiftConfig {
    pub num_classes: usize,
    pub num_source_domains: usize,
    pub samples_per_domain: usize,
    /// Size of the separate labeled target test set.
    pub target_test_samples: usize,
    pub input_dim: usize,
    pub shift_kind: ShiftKind,
    /// One magnitude per source domain followed by the target's.
    pub shift_magnitudes: Vec<f64>,
    /// Distance of class means from the origin.
    pub class_radius: f64,
    /// Within-class standard deviation in the latent plane.
    pub class_std: f64,
    /// Isotropic noise added in the embedding space.
    pub ambient_std: f64,
    /// Fraction of source training labels flipped to another class.
    pub label_noise_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticShiftConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            num_source_domains: 3,
            samples_per_domain: 256,
            target_test_samples: 256,
            input_dim: 2,
            shift_kind: ShiftKind::Rotation,
            shift_magnitudes: vec![0.0, 30.0, 60.0, 90.0],
            class_radius: 3.0,
            class_std: 0.7,
            ambient_std: 0.0,
            label_noise_rate: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticShiftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.num_source_domains < 1 {
            return Err(Error::config("num_source_domains must be positive"));
        }
        if self.samples_per_domain == 0 || self.target_test_samples == 0 {
            return Err(Error::config("sample counts must be positive"));
        }
        if self.input_dim < 2 {
            return Err(Error::config("input_dim must be at least 2"));
        }
        if self.shift_magnitudes.len() != self.num_source_domains + 1 {
            return Err(Error::config(format!(
                "expected {} shift magnitudes (sources then target), got {}",
                self.num_source_domains + 1,
                self.shift_magnitudes.len()
            )));
        }
        if self.shift_magnitudes.iter().any(|m| !m.is_finite()) {
            return Err(Error::config("shift magnitudes must be finite"));
        }
        if !(self.class_std > 0.0 && self.class_radius >= 0.0 && self.ambient_std >= 0.0) {
            return Err(Error::config("class_std must be positive, radius and ambient noise non-negative"));
        }
        if !(0.0..1.0).contains(&self.label_noise_rate) {
            return Err(Error::config("label_noise_rate must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Draws a synthetic multi-source dataset. Pure function of `cfg`.
pub fn generate_synthetic_msda(cfg: &SyntheticShiftConfig) -> Result<MultiDomainDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let embed = random_orthonormal_pair(&mut rng, cfg.input_dim);
    let k = cfg.num_source_domains;

    let draw_domain = |rng: &mut ChaCha8Rng, n: usize, shift: f64| {
        let mut inputs = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            // balanced classes in a shuffled order
            let c = i % cfg.num_classes;
            labels.push(c);
            inputs.push(sample_point(rng, cfg, &embed, c, shift));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let inputs: Vec<Vec<f64>> = order.iter().map(|&i| inputs[i].clone()).collect();
        let labels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        (inputs, labels)
    };

    let mut domains = Vec::with_capacity(k + 1);
    for (d, &shift) in cfg.shift_magnitudes.iter().enumerate().take(k) {
        let (inputs, clean) = draw_domain(&mut rng, cfg.samples_per_domain, shift);
        let mut labels = clean.clone();
        let mut corrupted = vec![false; labels.len()];
        if cfg.label_noise_rate > 0.0 {
            for (l, flag) in labels.iter_mut().zip(corrupted.iter_mut()) {
                if rng.random::<f64>() < cfg.label_noise_rate {
                    let off = rng.random_range(1..cfg.num_classes);
                    *l = (*l + off) % cfg.num_classes;
                    *flag = true;
                }
            }
        }
        domains.push(Domain {
            name: format!("source{d}"),
            inputs,
            labels: Some(labels),
            eval_labels: Some(clean),
            corrupted: Some(corrupted),
        });
    }
    let target_shift = cfg.shift_magnitudes[k];
    let (inputs, labels) = draw_domain(&mut rng, cfg.samples_per_domain, target_shift);
    domains.push(Domain {
        name: "target".into(),
        inputs,
        labels: None,
        eval_labels: Some(labels),
        corrupted: None,
    });
    let (inputs, labels) = draw_domain(&mut rng, cfg.target_test_samples, target_shift);
    let target_test = Domain {
        name: "target_test".into(),
        inputs,
        labels: None,
        eval_labels: Some(labels),
        corrupted: None,
    };

    let ds = MultiDomainDataset {
        shape: InputShape::vector(cfg.input_dim),
        num_classes: cfg.num_classes,
        class_names: (0..cfg.num_classes).map(|c| format!("class{c}")).collect(),
        domains,
        target_test: Some(target_test),
    };
    ds.validate()?;
    Ok(ds)
}

fn random_orthonormal_pair(rng: &mut ChaCha8Rng, dim: usize) -> [Vec<f64>; 2] {
    if dim == 2 {
        return [vec![1.0, 0.0], vec![0.0, 1.0]];
    }
    let mut gauss = || -> Vec<f64> { (0..dim).map(|_| StandardNormal.sample(rng)).collect() };
    let mut a = gauss();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    a.iter_mut().for_each(|x| *x /= na);
    let mut b = gauss();
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    b.iter_mut().zip(&a).for_each(|(y, x)| *y -= dot * x);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    b.iter_mut().for_each(|x| *x /= nb);
    [a, b]
}

fn sample_point(
    rng: &mut ChaCha8Rng,
    cfg: &SyntheticShiftConfig,
    embed: &[Vec<f64>; 2],
    class: usize,
    shift: f64,
) -> Vec<f64> {
    let angle = std::f64::consts::TAU * class as f64 / cfg.num_classes as f64;
    let mut spread = cfg.class_std;
    if cfg.shift_kind == ShiftKind::CovarianceScale {
        spread *= 1.0 + shift;
    }
    let n0: f64 = StandardNormal.sample(rng);
    let n1: f64 = StandardNormal.sample(rng);
    let mut u = cfg.class_radius * angle.cos() + spread * n0;
    let mut v = cfg.class_radius * angle.sin() + spread * n1;
    match cfg.shift_kind {
        ShiftKind::Rotation => {
            let (s, c) = shift.to_radians().sin_cos();
            (u, v) = (c * u - s * v, s * u + c * v);
        }
        ShiftKind::Translation => {
            u += shift * std::f64::consts::FRAC_1_SQRT_2;
            v += shift * std::f64::consts::FRAC_1_SQRT_2;
        }
        ShiftKind::CovarianceScale => {}
    }
    (0..cfg.input_dim)
        .map(|j| {
            let ambient: f64 = if cfg.ambient_std > 0.0 {
                let e: f64 = StandardNormal.sample(rng);
                cfg.ambient_std * e
            } else {
                0.0
            };
            u * embed[0][j] + v * embed[1][j] + ambient
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Ingestion

/// How an on-disk dataset is laid out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSpec {
    /// Name of the target domain directory; all other top-level
    /// directories are sources.
    pub target_domain: String,
    /// Resize decoded images to `(width, height)`.
    pub resize: Option<(u32, u32)>,
    /// Decode images as single-channel luminance.
    pub grayscale: bool,
}

impl LayoutSpec {
    pub fn new(target_domain: impl Into<String>) -> Self {
        Self {
            target_domain: target_domain.into(),
            resize: None,
            grayscale: false,
        }
    }
}

struct Record {
    domain: String,
    class: Option<String>,
    path: PathBuf,
}

/// Loads `root/<domain>/<class>/<file>` for sources and either
/// `root/<target>/<file>` (unlabeled) or `root/<target>/<class>/<file>`
/// (labels kept for evaluation only).
///
/// Source domains get ids in lexicographic order of their directory names;
/// class indices follow the sorted class-directory names.
pub fn load_multi_domain_dataset(root: &Path, layout: &LayoutSpec) -> Result<MultiDomainDataset> {
    let mut records = Vec::new();
    let mut saw_target = false;
    for domain_dir in sorted_entries(root)? {
        if !domain_dir.is_dir() {
            continue;
        }
        let domain = file_name(&domain_dir);
        if domain == layout.target_domain {
            saw_target = true;
        }
        for entry in sorted_entries(&domain_dir)? {
            if entry.is_dir() {
                let class = file_name(&entry);
                for file in sorted_entries(&entry)? {
                    if file.is_file() {
                        records.push(Record {
                            domain: domain.clone(),
                            class: Some(class.clone()),
                            path: file,
                        });
                    }
                }
            } else if entry.is_file() {
                records.push(Record {
                    domain: domain.clone(),
                    class: None,
                    path: entry,
                });
            }
        }
    }
    if !saw_target {
        return Err(Error::Ingestion {
            domain: layout.target_domain.clone(),
            reason: "target domain directory not found".into(),
        });
    }
    assemble(records, layout)
}

/// Loads a manifest with one `path=<p> domain=<d> [class=<c>]` record per
/// line. Relative paths resolve against the manifest's directory; `#`
/// starts a comment.
pub fn load_manifest(manifest: &Path, layout: &LayoutSpec) -> Result<MultiDomainDataset> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::Read {
        path: manifest.to_path_buf(),
        reason: e.to_string(),
    })?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = BTreeMap::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| {
                Error::config(format!("manifest line {}: expected key=value, got `{tok}`", lineno + 1))
            })?;
            fields.insert(k, v);
        }
        let path = fields
            .get("path")
            .ok_or_else(|| Error::config(format!("manifest line {}: missing path", lineno + 1)))?;
        let domain = fields
            .get("domain")
            .ok_or_else(|| Error::config(format!("manifest line {}: missing domain", lineno + 1)))?;
        records.push(Record {
            domain: domain.to_string(),
            class: fields.get("class").map(|c| c.to_string()),
            path: base.join(path),
        });
    }
    assemble(records, layout)
}

fn assemble(records: Vec<Record>, layout: &LayoutSpec) -> Result<MultiDomainDataset> {
    let mut by_domain: BTreeMap<String, Vec<Record>> = BTreeMap::new();
    for r in records {
        by_domain.entry(r.domain.clone()).or_default().push(r);
    }
    let target_records = by_domain.remove(&layout.target_domain).ok_or_else(|| Error::Ingestion {
        domain: layout.target_domain.clone(),
        reason: "no target samples".into(),
    })?;
    if by_domain.is_empty() {
        return Err(Error::config("no source domains found"));
    }

    // class set from the first source; every other source must match
    let mut class_set: Option<BTreeSet<String>> = None;
    for (name, recs) in &by_domain {
        let mut classes = BTreeSet::new();
        for r in recs {
            let c = r.class.clone().ok_or_else(|| Error::Ingestion {
                domain: name.clone(),
                reason: format!("unlabeled source file `{}`", r.path.display()),
            })?;
            classes.insert(c);
        }
        match &class_set {
            None => class_set = Some(classes),
            Some(expected) if *expected != classes => {
                return Err(Error::Ingestion {
                    domain: name.clone(),
                    reason: format!(
                        "class set {:?} differs from {:?}",
                        classes.iter().collect::<Vec<_>>(),
                        expected.iter().collect::<Vec<_>>()
                    ),
                });
            }
            Some(_) => {}
        }
    }
    let class_names: Vec<String> = class_set.unwrap_or_default().into_iter().collect();
    let class_index = |domain: &str, c: &str| {
        class_names.binary_search_by(|x| x.as_str().cmp(c)).map_err(|_| Error::Ingestion {
            domain: domain.to_string(),
            reason: format!("unknown class `{c}`"),
        })
    };

    let mut shape: Option<InputShape> = None;
    let mut read = |r: &Record| -> Result<Vec<f64>> {
        let (s, data) = read_input(&r.path, layout)?;
        match shape {
            None => shape = Some(s),
            Some(expected) if expected != s => {
                return Err(Error::Ingestion {
                    domain: r.domain.clone(),
                    reason: format!(
                        "`{}` has shape {:?}, expected {:?}",
                        r.path.display(),
                        s,
                        expected
                    ),
                });
            }
            Some(_) => {}
        }
        Ok(data)
    };

    let mut domains = Vec::new();
    for (name, recs) in &by_domain {
        let mut inputs = Vec::with_capacity(recs.len());
        let mut labels = Vec::with_capacity(recs.len());
        for r in recs {
            inputs.push(read(r)?);
            labels.push(class_index(name, r.class.as_deref().unwrap_or_default())?);
        }
        domains.push(Domain {
            name: name.clone(),
            inputs,
            labels: Some(labels),
            eval_labels: None,
            corrupted: None,
        });
    }
    let labeled = target_records.iter().filter(|r| r.class.is_some()).count();
    if labeled != 0 && labeled != target_records.len() {
        return Err(Error::Ingestion {
            domain: layout.target_domain.clone(),
            reason: "target mixes labeled subdirectories and loose files".into(),
        });
    }
    let mut inputs = Vec::with_capacity(target_records.len());
    let mut eval = Vec::new();
    for r in &target_records {
        inputs.push(read(r)?);
        if let Some(c) = &r.class {
            eval.push(class_index(&layout.target_domain, c)?);
        }
    }
    domains.push(Domain {
        name: layout.target_domain.clone(),
        inputs,
        labels: None,
        eval_labels: (labeled > 0).then_some(eval),
        corrupted: None,
    });

    let ds = MultiDomainDataset {
        shape: shape.ok_or_else(|| Error::config("dataset has no samples"))?,
        num_classes: class_names.len(),
        class_names,
        domains,
        target_test: None,
    };
    if ds.num_classes < 2 {
        return Err(Error::config("need at least two classes"));
    }
    ds.validate()?;
    Ok(ds)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::Read {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut out = Vec::new();
    for e in rd {
        let e = e.map_err(|e| Error::Read {
            path: dir.to_path_buf(),
            reason: e.to_string(),
        })?;
        let p = e.path();
        if file_name(&p).starts_with('.') {
            continue;
        }
        out.push(p);
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Numeric text files (`.txt`, `.csv`, `.vec`) hold one whitespace- or
/// comma-separated vector; anything else is decoded as an image scaled to
/// `[0, 1]`, channels-first.
fn read_input(path: &Path, layout: &LayoutSpec) -> Result<(InputShape, Vec<f64>)> {
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    let read_err = |reason: String| Error::Read {
        path: path.to_path_buf(),
        reason,
    };
    if matches!(ext.as_str(), "txt" | "csv" | "vec") {
        let text = fs::read_to_string(path).map_err(|e| read_err(e.to_string()))?;
        let data = text
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>().map_err(|e| read_err(format!("`{t}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if data.is_empty() {
            return Err(read_err("empty vector".into()));
        }
        return Ok((InputShape::vector(data.len()), data));
    }
    let mut img = image::open(path).map_err(|e| read_err(e.to_string()))?;
    if let Some((w, h)) = layout.resize {
        img = img.resize_exact(w, h, image::imageops::FilterType::Triangle);
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    if layout.grayscale {
        let g = img.to_luma8();
        let data = g.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
        Ok((
            InputShape {
                channels: 1,
                height: h,
                width: w,
            },
            data,
        ))
    } else {
        let rgb = img.to_rgb8();
        let mut data = vec![0.0; 3 * w * h];
        for (i, p) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * w * h + i] = p.0[c] as f64 / 255.0;
            }
        }
        Ok((
            InputShape {
                channels: 3,
                height: h,
                width: w,
            },
            data,
        ))
    }
}

// ---------------------------------------------------------------------------
// Batching

/// One domain's share of a [`MultiDomainBatch`].
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBatch {
    pub domain_id: usize,
    /// Row-major `[batch, input_len]`.
    pub inputs: Vec<f64>,
    /// Present for sources, absent for the target.
    pub labels: Option<Vec<usize>>,
    /// Sample indices within the domain.
    pub indices: Vec<usize>,
}

impl DomainBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiDomainBatch {
    pub per_domain: Vec<DomainBatch>,
}

impl MultiDomainBatch {
    pub fn domain_ids(&self) -> Vec<usize> {
        self.per_domain.iter().map(|d| d.domain_id).collect()
    }

    pub fn get(&self, domain_id: usize) -> Option<&DomainBatch> {
        self.per_domain.iter().find(|d| d.domain_id == domain_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DomainStream {
    domain_id: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl DomainStream {
    fn next_index(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let i = self.order[self.pos];
        self.pos += 1;
        i
    }
}

/// Resumable position of a [`BatchIterator`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchCursor {
    batch_size: usize,
    streams: Vec<DomainStream>,
}

impl BatchCursor {
    pub fn new(
        dataset: &MultiDomainDataset,
        domains: &[usize],
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if domains.is_empty() {
            return Err(Error::config("no domains to iterate"));
        }
        let mut streams = Vec::with_capacity(domains.len());
        for &d in domains {
            if d >= dataset.num_domains() || dataset.domain_len(d) == 0 {
                return Err(Error::config(format!("domain {d} is missing or empty")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(d as u64 + 1);
            let mut order: Vec<usize> = (0..dataset.domain_len(d)).collect();
            order.shuffle(&mut rng);
            streams.push(DomainStream {
                domain_id: d,
                order,
                pos: 0,
                rng,
            });
        }
        Ok(Self {
            batch_size,
            streams,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }
}

/// Endless stream of per-domain batches. Each domain walks its own
/// shuffled permutation and reshuffles when it wraps, so within one pass
/// every sample appears exactly once.
pub struct BatchIterator<'a> {
    dataset: &'a MultiDomainDataset,
    cursor: BatchCursor,
}

impl<'a> BatchIterator<'a> {
    pub fn resume(dataset: &'a MultiDomainDataset, cursor: BatchCursor) -> Self {
        Self { dataset, cursor }
    }

    pub fn cursor(&self) -> &BatchCursor {
        &self.cursor
    }

    /// `max_d ceil(n_d / B)` over participating domains.
    pub fn batches_per_epoch(&self) -> usize {
        self.cursor
            .streams
            .iter()
            .map(|s| s.order.len().div_ceil(self.cursor.batch_size))
            .max()
            .unwrap_or(0)
    }

    pub fn next_batch(&mut self) -> MultiDomainBatch {
        let b = self.cursor.batch_size;
        let len = self.dataset.shape().len();
        let per_domain = self
            .cursor
            .streams
            .iter_mut()
            .map(|s| {
                let indices: Vec<usize> = (0..b).map(|_| s.next_index()).collect();
                let dom = self.dataset.domain(s.domain_id);
                let mut inputs = Vec::with_capacity(b * len);
                for &i in &indices {
                    inputs.extend_from_slice(dom.input(i));
                }
                let labels = dom
                    .labels
                    .as_ref()
                    .map(|l| indices.iter().map(|&i| l[i]).collect());
                DomainBatch {
                    domain_id: s.domain_id,
                    inputs,
                    labels,
                    indices,
                }
            })
            .collect();
        MultiDomainBatch { per_domain }
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = MultiDomainBatch;

    fn next(&mut self) -> Option<MultiDomainBatch> {
        Some(self.next_batch())
    }
}

/// Batches over `domains` with per-domain batch size `batch_size`.
pub fn iterate_batches<'a>(
    dataset: &'a MultiDomainDataset,
    domains: &[usize],
    batch_size: usize,
    seed: u64,
) -> Result<BatchIterator<'a>> {
    let cursor = BatchCursor::new(dataset, domains, batch_size, seed)?;
    Ok(BatchIterator { dataset, cursor })
}

// ---------------------------------------------------------------------------
// Splitting

fn group_by_label(labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    groups.retain(|g| !g.is_empty());
    groups
}

fn stratified_split(groups: &[Vec<usize>], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    let mut held = Vec::new();
    for g in groups {
        let mut g = g.clone();
        g.shuffle(&mut rng);
        let n_held = (fraction * g.len() as f64).round() as usize;
        if n_held == 0 || n_held == g.len() {
            return Err(Error::config(format!(
                "fraction {fraction} leaves an empty part for a group of {} samples",
                g.len()
            )));
        }
        held.extend_from_slice(&g[..n_held]);
        keep.extend_from_slice(&g[n_held..]);
    }
    keep.sort_unstable();
    held.sort_unstable();
    Ok((keep, held))
}

/// Splits every domain into a training part and a held-out part of size
/// `fraction`, stratified by class where training labels exist. The
/// target test store stays with the training part.
pub fn split_held_out(
    dataset: &MultiDomainDataset,
    fraction: f64,
    seed: u64,
) -> Result<(MultiDomainDataset, MultiDomainDataset)> {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (id, d) in dataset.domains.iter().enumerate() {
        let groups = match &d.labels {
            Some(l) => group_by_label(l, dataset.num_classes),
            None => vec![(0..d.len()).collect()],
        };
        let (a, b) = stratified_split(&groups, fraction, seed.wrapping_add(id as u64))?;
        train.push(d.select(&a));
        held.push(d.select(&b));
    }
    Ok((
        MultiDomainDataset {
            domains: train,
            ..dataset.clone()
        },
        MultiDomainDataset {
            domains: held,
            target_test: None,
            ..dataset.clone()
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SyntheticShiftConfig {
        SyntheticShiftConfig {
            samples_per_domain: 100,
            target_test_samples: 50,
            ..Default::default()
        }
    }

    #[test]
    fn target_training_view_hides_labels() {
        let ds = generate_synthetic_msda(&cfg()).unwrap();
        let t = ds.target_id();
        assert!(ds.training_samples(t).all(|s| s.label.is_none() && s.domain_id == t));
        assert!(ds.training_samples(0).all(|s| s.label.is_some()));
        assert_eq!(ds.eval_labels(t).unwrap().len(), 100);
        assert_eq!(ds.target_test().unwrap().len(), 50);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            SyntheticShiftConfig {
                samples_per_domain: 0,
                ..cfg()
            },
            SyntheticShiftConfig {
                num_classes: 1,
                ..cfg()
            },
            SyntheticShiftConfig {
                shift_magnitudes: vec![0.0, 1.0],
                ..cfg()
            },
            SyntheticShiftConfig {
                label_noise_rate: 1.0,
                ..cfg()
            },
        ];
        for c in bad {
            assert!(matches!(generate_synthetic_msda(&c), Err(Error::Config(_))));
        }
        assert!("spiral".parse::<ShiftKind>().is_err());
        assert_eq!("covariance-scale".parse::<ShiftKind>().unwrap(), ShiftKind::CovarianceScale);
    }

    #[test]
    fn label_noise_flags_match_flipped_labels() {
        let ds = generate_synthetic_msda(&SyntheticShiftConfig {
            label_noise_rate: 0.3,
            ..cfg()
        })
        .unwrap();
        let flags = ds.corrupted_flags(0).unwrap();
        let clean = ds.eval_labels(0).unwrap();
        let noisy: Vec<usize> = ds.training_samples(0).map(|s| s.label.unwrap()).collect();
        for i in 0..flags.len() {
            assert_eq!(flags[i], clean[i] != noisy[i]);
        }
        let rate = flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64;
        assert!((0.15..0.45).contains(&rate));
    }

    #[test]
    fn zero_batch_size_is_a_config_error() {
        let ds = generate_synthetic_msda(&cfg()).unwrap();
        assert!(matches!(iterate_batches(&ds, &[0], 0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn target_batches_have_no_labels() {
        let ds = generate_synthetic_msda(&cfg()).unwrap();
        let mut it = iterate_batches(&ds, &[0, 1, 2, 3], 8, 1).unwrap();
        let b = it.next_batch();
        assert_eq!(b.domain_ids(), vec![0, 1, 2, 3]);
        assert!(b.get(3).unwrap().labels.is_none());
        assert!(b.get(0).unwrap().labels.is_some());
    }
}
