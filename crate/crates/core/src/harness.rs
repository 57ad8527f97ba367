//! Experiment orchestration: staged pipelines per seed, checkpoint
//! chaining with checksums, mean aggregation, metric deltas and CAM
//! reports. Every run writes below `{out_dir}/{experiment}/{seed}/`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{generate, DomainKind, DomainSpec, ImageSample};
use crate::error::{Error, Result};
use crate::layercam::{cam_file_name, export_image, layer_cams, render};
use crate::metrics::{
    evaluate_with, write_predictions_csv, write_roc_csv, Evaluation, MetricsReport, METRIC_KEYS,
};
use crate::nn::{Group, MiniResNet, StageTag};
use crate::swft::{fine_tune, swft_sweep, FreezePlan, Splits, StepResult};
use crate::train::{argmax, split_stratified, train, write_file, TrainConfig, TrainHistory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Source pretraining, then target head only.
    OneStepLastlayer,
    /// Source, full intermediate training, then target head only.
    TwoStepLastlayer,
    /// Source pretraining, then every layer on the target.
    PretrainFull,
    /// Random initialization trained on the target.
    Scratch,
    /// Source, intermediate, then one target run per SWFT step.
    SwftSweep,
    /// LayerCAM overlays of an existing checkpoint.
    CamReport,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::OneStepLastlayer,
        ExperimentKind::TwoStepLastlayer,
        ExperimentKind::PretrainFull,
        ExperimentKind::Scratch,
        ExperimentKind::SwftSweep,
        ExperimentKind::CamReport,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::OneStepLastlayer => "one-step-lastlayer",
            ExperimentKind::TwoStepLastlayer => "two-step-lastlayer",
            ExperimentKind::PretrainFull => "pretrain-full",
            ExperimentKind::Scratch => "scratch",
            ExperimentKind::SwftSweep => "swft-sweep",
            ExperimentKind::CamReport => "cam-report",
        }
    }

    fn needs_intermediate(self) -> bool {
        matches!(self, ExperimentKind::TwoStepLastlayer | ExperimentKind::SwftSweep)
    }
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = ExperimentKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!(
                    "unknown experiment kind `{s}`; valid kinds: {}",
                    valid.join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sizes {
    pub source: usize,
    pub intermediate: usize,
    pub target: usize,
}

impl Default for Sizes {
    fn default() -> Self {
        Sizes {
            source: 2000,
            intermediate: 3000,
            target: 1500,
        }
    }
}

impl Sizes {
    pub fn get(&self, kind: DomainKind) -> usize {
        match kind {
            DomainKind::Source => self.source,
            DomainKind::Intermediate => self.intermediate,
            DomainKind::Target => self.target,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwftSection {
    pub steps: Vec<usize>,
}

impl Default for SwftSection {
    fn default() -> Self {
        SwftSection {
            steps: (1..=6).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CamSection {
    pub checkpoint: Option<PathBuf>,
    pub stages: Vec<String>,
    pub class: usize,
    pub samples: usize,
}

impl Default for CamSection {
    fn default() -> Self {
        CamSection {
            checkpoint: None,
            stages: Group::STAGES[1..].iter().map(|g| g.name().to_string()).collect(),
            class: 1,
            samples: 4,
        }
    }
}

impl CamSection {
    pub fn groups(&self) -> Result<Vec<Group>> {
        parse_stages(&self.stages)
    }
}

pub fn parse_stages<S: AsRef<str>>(names: &[S]) -> Result<Vec<Group>> {
    names
        .iter()
        .map(|n| {
            let g: Group = n.as_ref().parse()?;
            if matches!(g, Group::Stem | Group::Fc) {
                return Err(Error::Config(format!(
                    "cam stages must be layer1..layer4, got `{}`",
                    n.as_ref()
                )));
            }
            Ok(g)
        })
        .collect()
}

/// Everything a run depends on. Loaded from TOML; unspecified keys keep
/// their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seeds: Vec<u64>,
    /// Seed of dataset generation and splitting, shared by all runs.
    pub data_seed: u64,
    pub out_dir: PathBuf,
    pub sizes: Sizes,
    pub train: TrainConfig,
    pub swft: SwftSection,
    pub cam: CamSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: ExperimentKind::TwoStepLastlayer,
            seeds: vec![1, 2, 3],
            data_seed: 123,
            out_dir: PathBuf::from("runs"),
            sizes: Sizes::default(),
            train: TrainConfig::default(),
            swft: SwftSection::default(),
            cam: CamSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        for kind in DomainKind::ALL {
            let classes = DomainSpec::for_kind(kind).num_classes();
            let n = self.sizes.get(kind);
            if n < 10 * classes {
                return Err(Error::Config(format!(
                    "sizes.{} = {n} is below 10 per class ({} classes)",
                    kind.name(),
                    classes
                )));
            }
        }
        self.train.validate()?;
        for &s in &self.swft.steps {
            FreezePlan::for_step(s)?;
        }
        if self.swft.steps.is_empty() {
            return Err(Error::Config("swft.steps must not be empty".into()));
        }
        self.cam.groups()?;
        if self.cam.class >= 2 {
            return Err(Error::Config(format!("cam.class must be 0 or 1, got {}", self.cam.class)));
        }
        Ok(())
    }

    pub fn train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    pub fn seed_dir(&self, kind: ExperimentKind, seed: u64) -> PathBuf {
        self.out_dir.join(kind.name()).join(seed.to_string())
    }
}

/// Generates a domain and splits it by class: 7:3 for the pretraining
/// domains, 7:2:1 for the target.
pub fn domain_splits(kind: DomainKind, n: usize, data_seed: u64) -> Result<Splits> {
    let samples = generate(&DomainSpec::for_kind(kind), n, data_seed)?;
    let ratios: &[f64] = match kind {
        DomainKind::Target => &[7.0, 2.0, 1.0],
        _ => &[7.0, 3.0],
    };
    let mut parts = split_stratified(&samples, ratios, data_seed, |s| s.label)?.into_iter();
    Ok(Splits {
        train: parts.next().unwrap_or_default(),
        val: parts.next().unwrap_or_default(),
        test: parts.next().unwrap_or_default(),
    })
}

/// Generated datasets for one configuration, built on first use.
#[derive(Default)]
pub struct Datasets {
    sizes: Sizes,
    data_seed: u64,
    cache: BTreeMap<&'static str, Splits>,
}

impl Datasets {
    pub fn new(config: &ExperimentConfig) -> Self {
        Datasets {
            sizes: config.sizes.clone(),
            data_seed: config.data_seed,
            cache: BTreeMap::new(),
        }
    }

    pub fn get(&mut self, kind: DomainKind) -> Result<&Splits> {
        if !self.cache.contains_key(kind.name()) {
            let s = domain_splits(kind, self.sizes.get(kind), self.data_seed)?;
            self.cache.insert(kind.name(), s);
        }
        Ok(&self.cache[kind.name()])
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub stage: StageTag,
    pub path: PathBuf,
    pub sha256: String,
}

/// Writes a checkpoint and reads it straight back, so the next stage
/// consumes the bytes that are on disk.
fn persist(model: &MiniResNet, path: &Path) -> Result<(Vec<u8>, CheckpointRecord)> {
    let written = model.to_checkpoint_bytes();
    write_file(path, &written)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let sha256 = sha256_hex(&bytes);
    if sha256 != sha256_hex(&written) {
        return Err(Error::invalid(format!("{}: read-back checksum mismatch", path.display())));
    }
    Ok((
        bytes,
        CheckpointRecord {
            stage: model.meta.stage,
            path: path.to_path_buf(),
            sha256,
        },
    ))
}

/// Outcome of one seed of one experiment.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub checkpoints: Vec<CheckpointRecord>,
    /// Checksum of the checkpoint the target stage started from.
    pub upstream_sha256: Option<String>,
    pub evaluation: Option<Evaluation>,
    pub history: Option<TrainHistory>,
    pub sweep: Vec<StepResult>,
    pub stage_histories: Vec<(StageTag, TrainHistory)>,
}

impl RunRecord {
    pub fn report(&self) -> Option<&MetricsReport> {
        self.evaluation.as_ref().map(|e| &e.report)
    }
}

/// Upstream stages of one seed, computed once and shared by every
/// experiment kind in a [`run_experiments`] call.
struct Upstream {
    source: Option<(Vec<u8>, TrainHistory)>,
    intermediate: Option<(Vec<u8>, TrainHistory)>,
}

fn pretrain(
    start: &MiniResNet,
    splits: &Splits,
    classes: usize,
    config: &TrainConfig,
    stage: StageTag,
) -> Result<(Vec<u8>, TrainHistory)> {
    let mut model = start.clone();
    if model.num_classes() != classes || stage != StageTag::Source {
        model.replace_head(classes, config.seed)?;
    }
    let (mut model, history) = train(&model, &splits.train, &splits.val, config, &FreezePlan::all())?;
    model.meta.stage = stage;
    model.meta.seed = config.seed;
    Ok((model.to_checkpoint_bytes(), history))
}

impl Upstream {
    fn source(&mut self, data: &mut Datasets, config: &TrainConfig) -> Result<(Vec<u8>, TrainHistory)> {
        if self.source.is_none() {
            let init = MiniResNet::build(10, config.seed)?;
            let splits = data.get(DomainKind::Source)?;
            self.source = Some(pretrain(&init, splits, 10, config, StageTag::Source)?);
        }
        Ok(self.source.clone().expect("just computed"))
    }

    fn intermediate(&mut self, data: &mut Datasets, config: &TrainConfig) -> Result<(Vec<u8>, TrainHistory)> {
        if self.intermediate.is_none() {
            let (src, _) = self.source(data, config)?;
            let start = MiniResNet::from_checkpoint_bytes(&src)?;
            let splits = data.get(DomainKind::Intermediate)?;
            let classes = DomainSpec::intermediate().num_classes();
            self.intermediate = Some(pretrain(&start, splits, classes, config, StageTag::Intermediate)?);
        }
        Ok(self.intermediate.clone().expect("just computed"))
    }
}

fn write_run_csvs(dir: &Path, eval: &Evaluation) -> Result<()> {
    let csv = dir.join("csv");
    std::fs::create_dir_all(&csv).map_err(|e| Error::io(&csv, e))?;
    let mut buf = Vec::new();
    write_predictions_csv(&mut buf, &eval.predictions)?;
    write_file(&csv.join("predictions.csv"), &buf)?;
    let mut buf = Vec::new();
    write_roc_csv(&mut buf, &eval.roc)?;
    write_file(&csv.join("roc.csv"), &buf)?;
    write_file(&csv.join("metrics.csv"), metrics_csv(std::slice::from_ref(&eval.report)).as_bytes())
}

/// `seed,accuracy,...,auc` rows, without timing so reruns compare equal.
pub fn metrics_csv(reports: &[MetricsReport]) -> String {
    let mut s = format!("seed,{}\n", METRIC_KEYS.join(","));
    for r in reports {
        let _ = write!(s, "{}", r.seed);
        for v in r.values() {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

fn run_seed(
    kind: ExperimentKind,
    config: &ExperimentConfig,
    seed: u64,
    data: &mut Datasets,
    upstream: &mut Upstream,
) -> Result<RunRecord> {
    let tc = config.train_for(seed);
    let dir = config.seed_dir(kind, seed);
    let ckpt_dir = dir.join("checkpoints");
    let mut record = RunRecord {
        kind,
        seed,
        checkpoints: Vec::new(),
        upstream_sha256: None,
        evaluation: None,
        history: None,
        sweep: Vec::new(),
        stage_histories: Vec::new(),
    };

    let upstream_bytes = match kind {
        ExperimentKind::CamReport => return cam_run(config, seed, data, record),
        ExperimentKind::Scratch => {
            let (bytes, rec) = persist(&MiniResNet::build(2, seed)?, &ckpt_dir.join("init.vxck"))?;
            record.checkpoints.push(rec);
            bytes
        }
        _ => {
            let (src, h) = upstream.source(data, &tc)?;
            let (mut bytes, rec) = persist(&MiniResNet::from_checkpoint_bytes(&src)?, &ckpt_dir.join("source.vxck"))?;
            record.checkpoints.push(rec);
            record.stage_histories.push((StageTag::Source, h));
            if kind.needs_intermediate() {
                let (inter, h) = upstream.intermediate(data, &tc)?;
                let (b, rec) = persist(
                    &MiniResNet::from_checkpoint_bytes(&inter)?,
                    &ckpt_dir.join("intermediate.vxck"),
                )?;
                bytes = b;
                record.checkpoints.push(rec);
                record.stage_histories.push((StageTag::Intermediate, h));
            }
            bytes
        }
    };
    record.upstream_sha256 = Some(sha256_hex(&upstream_bytes));
    let target = data.get(DomainKind::Target)?;

    if kind == ExperimentKind::SwftSweep {
        record.sweep = swft_sweep(&upstream_bytes, target, &tc, &config.swft.steps)?;
        crate::swft::write_sweep(&record.sweep, &dir.join("swft"))?;
    } else {
        let plan = match kind {
            ExperimentKind::OneStepLastlayer | ExperimentKind::TwoStepLastlayer => FreezePlan::head_only(),
            _ => FreezePlan::all(),
        };
        let result = fine_tune(&upstream_bytes, target, 2, &tc, &plan)?;
        let (_, rec) = persist(&result.model, &ckpt_dir.join("target.vxck"))?;
        record.checkpoints.push(rec);
        write_run_csvs(&dir, &result.evaluation)?;
        record.evaluation = Some(result.evaluation);
        record.history = Some(result.history);
    }
    for (stage, h) in &record.stage_histories {
        h.write_csv(&dir.join("csv").join(format!("history_{}.csv", stage.name())))?;
    }
    if let Some(h) = &record.history {
        h.write_csv(&dir.join("csv").join("history_target.csv"))?;
    }
    Ok(record)
}

/// Aggregate over seeds of one experiment.
#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub runs: Vec<RunRecord>,
    /// Mean metrics in [`METRIC_KEYS`] order (empty for sweeps and CAM runs).
    pub mean: Vec<f64>,
    /// Index into `runs` of the run whose accuracy is closest to the mean.
    pub closest_to_mean: Option<usize>,
    /// Per step: `(step, mean metrics, mean epochs)`.
    pub sweep_mean: Vec<(usize, Vec<f64>, f64)>,
}

impl ExperimentReport {
    pub fn mean_named(&self) -> Vec<(&'static str, f64)> {
        METRIC_KEYS.iter().copied().zip(self.mean.iter().copied()).collect()
    }
}

fn mean_of(rows: &[[f64; 8]]) -> Vec<f64> {
    (0..8)
        .map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / rows.len() as f64)
        .collect()
}

/// Runs one experiment over all configured seeds.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut reports = run_experiments(config, &[config.kind])?;
    Ok(reports.remove(0))
}

/// Runs several experiment kinds over the same seeds, training the shared
/// source and intermediate stages once per seed.
pub fn run_experiments(config: &ExperimentConfig, kinds: &[ExperimentKind]) -> Result<Vec<ExperimentReport>> {
    config.validate()?;
    let mut data = Datasets::new(config);
    let mut runs: Vec<Vec<RunRecord>> = vec![Vec::new(); kinds.len()];
    for &seed in &config.seeds {
        let mut upstream = Upstream {
            source: None,
            intermediate: None,
        };
        for (i, &kind) in kinds.iter().enumerate() {
            runs[i].push(run_seed(kind, config, seed, &mut data, &mut upstream)?);
        }
    }
    kinds
        .iter()
        .zip(runs)
        .map(|(&kind, runs)| aggregate(config, kind, runs))
        .collect()
}

fn aggregate(config: &ExperimentConfig, kind: ExperimentKind, runs: Vec<RunRecord>) -> Result<ExperimentReport> {
    let dir = config.out_dir.join(kind.name());
    let mut report = ExperimentReport {
        kind,
        runs,
        mean: Vec::new(),
        closest_to_mean: None,
        sweep_mean: Vec::new(),
    };
    let reports: Vec<MetricsReport> = report.runs.iter().filter_map(|r| r.report().cloned()).collect();
    if !reports.is_empty() {
        let rows: Vec<[f64; 8]> = reports.iter().map(|r| r.values()).collect();
        report.mean = mean_of(&rows);
        let closest = closest_index(&rows.iter().map(|r| r[0]).collect::<Vec<_>>(), report.mean[0]);
        report.closest_to_mean = Some(closest);
        write_file(&dir.join("summary.csv"), summary_csv(&reports, &report.mean, closest).as_bytes())?;
        let mut timing = String::from("seed,target_epochs,target_wall_time_s\n");
        for r in &report.runs {
            if let Some(h) = &r.history {
                let _ = writeln!(timing, "{},{},{:.3}", r.seed, h.epochs.len(), h.wall_time_s());
            }
        }
        write_file(&dir.join("timings.csv"), timing.as_bytes())?;
    }
    if kind == ExperimentKind::SwftSweep {
        for &step in &config.swft.steps {
            let per: Vec<&StepResult> = report
                .runs
                .iter()
                .filter_map(|r| r.sweep.iter().find(|s| s.plan.step == step))
                .collect();
            let rows: Vec<[f64; 8]> = per.iter().map(|s| s.report().values()).collect();
            let epochs = per.iter().map(|s| s.history.epochs.len() as f64).sum::<f64>() / per.len() as f64;
            report.sweep_mean.push((step, mean_of(&rows), epochs));
        }
        let mut s = format!("step,epoch,{}\n", METRIC_KEYS.join(","));
        for (step, vals, epochs) in &report.sweep_mean {
            let _ = write!(s, "{step},{epochs}");
            for v in vals {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        write_file(&dir.join("summary.csv"), s.as_bytes())?;
    }
    Ok(report)
}

/// Index of the value nearest `target`; ties go to the earliest.
pub fn closest_index(values: &[f64], target: f64) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if (v - target).abs() < (values[best] - target).abs() {
            best = i;
        }
    }
    best
}

/// Per-seed rows, a `mean` row, and a flag marking the run closest to the
/// mean accuracy.
pub fn summary_csv(reports: &[MetricsReport], mean: &[f64], closest: usize) -> String {
    let mut s = format!("run,{},closest_to_mean\n", METRIC_KEYS.join(","));
    for (i, r) in reports.iter().enumerate() {
        let _ = write!(s, "{}", r.seed);
        for v in r.values() {
            let _ = write!(s, ",{v}");
        }
        let _ = writeln!(s, ",{}", u8::from(i == closest));
    }
    s.push_str("mean");
    for v in mean {
        let _ = write!(s, ",{v}");
    }
    s.push_str(",0\n");
    s
}

/// Reads the `mean` row of a summary CSV as `(metric, value)` pairs.
pub fn read_summary_mean(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    for row in rdr.records() {
        let row = row?;
        if row.get(0) == Some("mean") {
            return headers
                .iter()
                .zip(row.iter())
                .skip(1)
                .filter(|(h, _)| METRIC_KEYS.contains(h))
                .map(|(h, v)| {
                    v.parse::<f64>()
                        .map(|x| (h.to_string(), x))
                        .map_err(|e| Error::Config(format!("{}: {h}={v}: {e}", path.display())))
                })
                .collect();
        }
    }
    Err(Error::Config(format!("{}: no `mean` row", path.display())))
}

/// `a - b` per metric; both sides must list the same metrics in order.
pub fn delta_report<S: AsRef<str>, T: AsRef<str>>(a: &[(S, f64)], b: &[(T, f64)]) -> Result<Vec<(String, f64)>> {
    let keys_a: Vec<&str> = a.iter().map(|(k, _)| k.as_ref()).collect();
    let keys_b: Vec<&str> = b.iter().map(|(k, _)| k.as_ref()).collect();
    if keys_a != keys_b {
        return Err(Error::Config(format!(
            "metric keys differ: {keys_a:?} vs {keys_b:?}"
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|((k, x), (_, y))| (k.as_ref().to_string(), x - y))
        .collect())
}

pub fn delta_csv(deltas: &[(String, f64)]) -> String {
    let mut s = String::from("metric,delta\n");
    for (k, d) in deltas {
        let _ = writeln!(s, "{k},{d}");
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamIndexRow {
    pub file: String,
    pub image_id: String,
    pub stage: String,
    pub class: usize,
    pub label: usize,
    pub pred: usize,
    pub score_malignant: f64,
}

/// One overlay PNG per sample and stage plus `index.csv`.
pub fn cam_report(
    model: &MiniResNet,
    samples: &[ImageSample],
    stages: &[Group],
    class: usize,
    config: &TrainConfig,
    dir: &Path,
) -> Result<Vec<CamIndexRow>> {
    if class >= model.num_classes() {
        return Err(Error::invalid(format!(
            "class {class} out of range for {} classes",
            model.num_classes()
        )));
    }
    let maps = layer_cams(model, samples, stages, class, &config.normalization)?;
    let mut rows = Vec::new();
    for (sample, sc) in samples.iter().zip(&maps) {
        let probs = crate::tensor::softmax(&crate::tensor::Tensor::new(vec![1, sc.logits.len()], sc.logits.clone())?)?;
        let score = probs.data().get(1).copied().unwrap_or(0.0) as f64;
        let pred = argmax(&sc.logits);
        for cam in &sc.cams {
            let file = cam_file_name(&sample.id, cam.stage, class);
            export_image(&render(cam, &sample.image)?, &dir.join(&file))?;
            rows.push(CamIndexRow {
                file,
                image_id: sample.id.clone(),
                stage: cam.stage.name().to_string(),
                class,
                label: sample.label,
                pred,
                score_malignant: score,
            });
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    write_file(&dir.join("index.csv"), &bytes)?;
    Ok(rows)
}

fn cam_run(config: &ExperimentConfig, seed: u64, data: &mut Datasets, mut record: RunRecord) -> Result<RunRecord> {
    let path = config
        .cam
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("cam-report needs cam.checkpoint (the upstream target checkpoint)".into()))?;
    let (model, bytes) = crate::nn::load_checkpoint(path)?;
    record.upstream_sha256 = Some(sha256_hex(&bytes));
    let test = &data.get(DomainKind::Target)?.test;
    let samples = &test[..config.cam.samples.min(test.len())];
    let dir = config.seed_dir(ExperimentKind::CamReport, seed).join("cams");
    cam_report(&model, samples, &config.cam.groups()?, config.cam.class, &config.train, &dir)?;
    Ok(record)
}

/// Scores a checkpoint on the configured target test split.
pub fn evaluate_checkpoint(config: &ExperimentConfig, path: &Path) -> Result<Evaluation> {
    let (model, _) = crate::nn::load_checkpoint(path)?;
    let target = domain_splits(DomainKind::Target, config.sizes.target, config.data_seed)?;
    evaluate_with(&model, &target.test, model.meta.seed, &config.train.normalization)
}
