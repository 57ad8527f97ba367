//! Optimization loop: Adam, step learning-rate decay, early stopping on
//! validation loss, flip augmentation and stratified dataset splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::ImageSample;
use crate::error::{Error, Result};
use crate::nn::{BackwardRequest, CaptureSpec, Group, GroupModes, MiniResNet, TensorKind};
use crate::raster::Image;
use crate::rng::stream;
use crate::swft::FreezePlan;
use crate::tensor::{softmax_cross_entropy, Tensor};

/// Batch size used for inference-only passes.
pub const EVAL_BATCH: usize = 64;

/// Per-channel input normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub lr0: f64,
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub flip_probability: f64,
    pub normalization: Normalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_epochs: 70,
            patience: 10,
            min_delta: 0.0,
            lr0: 1e-3,
            lr_step: 5,
            lr_gamma: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 123,
            flip_probability: 0.5,
            normalization: Normalization::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be >= 1".into());
        }
        if self.lr_step == 0 {
            return bad("lr_step must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return bad(format!(
                "flip_probability must lie in [0, 1], got {}",
                self.flip_probability
            ));
        }
        if !(self.lr0 > 0.0 && self.lr_gamma > 0.0 && self.min_delta >= 0.0) {
            return bad("lr0 and lr_gamma must be positive, min_delta non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.normalization.std.iter().any(|&s| s <= 0.0) {
            return bad("normalization std must be positive".into());
        }
        Ok(())
    }
}

/// Step decay: `lr0 * gamma^floor(epoch / step)`.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    config.lr0 * config.lr_gamma.powi((epoch / config.lr_step) as i32)
}

/// Adam moments keyed by tensor name. Created empty; moments are
/// zero-initialized the first time a tensor is updated.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub t: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamParams {
    fn from(c: &TrainConfig) -> Self {
        AdamParams {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn moments(&self, name: &str) -> Option<(&[f32], &[f32])> {
        self.moments
            .get(name)
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    fn update(&mut self, hp: AdamParams, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: param.shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
        let n = param.numel();
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        if m.len() != n {
            return Err(Error::invalid(format!(
                "adam_step: moment for `{name}` has {} elements, parameter has {n}",
                m.len()
            )));
        }
        let t = self.t.max(1) as i32;
        let c1 = 1.0 - hp.beta1.powi(t);
        let c2 = 1.0 - hp.beta2.powi(t);
        let (b1, b2) = (hp.beta1 as f32, hp.beta2 as f32);
        let (a1, a2) = ((1.0 - hp.beta1) as f32, (1.0 - hp.beta2) as f32);
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *m = b1 * *m + a1 * g;
            *v = b2 * *v + a2 * g * g;
            let m_hat = *m as f64 / c1;
            let v_hat = *v as f64 / c2;
            *p -= (lr * m_hat / (v_hat.sqrt() + hp.eps)) as f32;
        }
        Ok(())
    }
}

/// One Adam step with bias correction over named parameters. Parameters
/// without a gradient are left untouched.
pub fn adam_step(
    params: &mut [(&str, &mut Tensor)],
    grads: &[(String, Tensor)],
    state: &mut AdamState,
    hp: AdamParams,
    lr: f64,
) -> Result<()> {
    state.t += 1;
    for (name, param) in params.iter_mut() {
        if let Some((_, g)) = grads.iter().find(|(n, _)| n == name) {
            state.update(hp, name, param, g, lr)?;
        }
    }
    Ok(())
}

fn adam_step_model(
    model: &mut MiniResNet,
    grads: Vec<(String, Tensor)>,
    state: &mut AdamState,
    hp: AdamParams,
    lr: f64,
) -> Result<()> {
    state.t += 1;
    let grads: BTreeMap<String, Tensor> = grads.into_iter().collect();
    let mut failure = None;
    model.visit_mut(|name, _, kind, t| {
        if kind != TensorKind::Param || failure.is_some() {
            return;
        }
        if let Some(g) = grads.get(&name) {
            if let Err(e) = state.update(hp, &name, t, g, lr) {
                failure = Some(e);
            }
        }
    });
    failure.map_or(Ok(()), Err)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop,
}

#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    pub best: f64,
    pub best_index: Option<usize>,
    pub counter: usize,
    seen: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopping {
            patience,
            min_delta,
            best: f64::INFINITY,
            best_index: None,
            counter: 0,
            seen: 0,
        }
    }

    /// Feeds one monitored value. Improvement means strictly below
    /// `best - min_delta`.
    pub fn update(&mut self, monitored: f64) -> Result<Decision> {
        if monitored.is_nan() {
            return Err(Error::NonFinite("early stopping monitor".into()));
        }
        let index = self.seen;
        self.seen += 1;
        if monitored < self.best - self.min_delta {
            self.best = monitored;
            self.best_index = Some(index);
            self.counter = 0;
        } else {
            self.counter += 1;
        }
        Ok(if self.counter >= self.patience {
            Decision::Stop
        } else {
            Decision::Continue
        })
    }

    pub fn improved_last(&self) -> bool {
        self.seen > 0 && self.best_index == Some(self.seen - 1)
    }
}

/// Mirrors the image horizontally with probability `p`.
pub fn augment(image: &Image, rng: &mut ChaCha8Rng, p: f64) -> Image {
    if draw_flip(rng, p) {
        image.flip_horizontal()
    } else {
        image.clone()
    }
}

fn draw_flip(rng: &mut ChaCha8Rng, p: f64) -> bool {
    rng.random::<f64>() < p
}

/// `[3, H, W]` tensor of `(x - mean) / std` per channel.
pub fn normalize(image: &Image, norm: &Normalization) -> Tensor {
    let mut out = vec![0.0; image.data.len()];
    write_normalized(image, false, norm, &mut out);
    Tensor::new(vec![3, image.height, image.width], out).expect("image buffer has 3*H*W values")
}

fn write_normalized(image: &Image, flip: bool, norm: &Normalization, out: &mut [f32]) {
    let (h, w) = (image.height, image.width);
    for c in 0..3 {
        let (mean, inv) = (norm.mean[c], 1.0 / norm.std[c]);
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let sx = if flip { w - 1 - x } else { x };
                plane[y * w + x] = (image.data[(y * w + sx) * 3 + c] - mean) * inv;
            }
        }
    }
}

/// Stacks samples into an `[N, 3, H, W]` batch, optionally mirroring some.
pub fn normalize_batch(
    samples: &[&ImageSample],
    flips: Option<&[bool]>,
    norm: &Normalization,
) -> Result<Tensor> {
    let Some(first) = samples.first() else {
        return Err(Error::invalid("normalize_batch: empty batch"));
    };
    let (h, w) = (first.image.height, first.image.width);
    if let Some(f) = flips {
        if f.len() != samples.len() {
            return Err(Error::invalid("normalize_batch: one flip flag per sample required"));
        }
    }
    let per = 3 * h * w;
    let mut data = vec![0.0; samples.len() * per];
    for (i, s) in samples.iter().enumerate() {
        if (s.image.height, s.image.width) != (h, w) {
            return Err(Error::ShapeMismatch {
                op: "normalize_batch",
                left: vec![h, w],
                right: vec![s.image.height, s.image.width],
            });
        }
        let flip = flips.is_some_and(|f| f[i]);
        write_normalized(&s.image, flip, norm, &mut data[i * per..(i + 1) * per]);
    }
    Tensor::new(vec![samples.len(), 3, h, w], data)
}

/// Split sizes for `n` items: every split but the largest takes
/// `floor(n * r)`, the largest absorbs the remainder.
pub fn split_sizes(n: usize, ratios: &[f64]) -> Result<Vec<usize>> {
    if ratios.is_empty() || ratios.iter().any(|&r| r <= 0.0 || !r.is_finite()) {
        return Err(Error::invalid(format!("split ratios must be positive, got {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    let largest = (0..ratios.len())
        .max_by(|&a, &b| ratios[a].total_cmp(&ratios[b]).then(b.cmp(&a)))
        .expect("non-empty");
    let mut sizes: Vec<usize> = ratios
        .iter()
        .map(|r| (n as f64 * r / total).floor() as usize)
        .collect();
    let rest: usize = sizes
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != largest)
        .map(|(_, s)| s)
        .sum();
    sizes[largest] = n - rest;
    Ok(sizes)
}

/// Shuffles by `seed` and cuts contiguous partitions; see [`split_sizes`].
pub fn split_dataset<T: Clone>(items: &[T], ratios: &[f64], seed: u64) -> Result<Vec<Vec<T>>> {
    split_stratified(items, ratios, seed, |_| 0)
}

/// Like [`split_dataset`] but applied per stratum (typically the class
/// label), so every split keeps the class proportions.
pub fn split_stratified<T: Clone>(
    items: &[T],
    ratios: &[f64],
    seed: u64,
    stratum: impl Fn(&T) -> usize,
) -> Result<Vec<Vec<T>>> {
    if items.is_empty() {
        return Err(Error::invalid("split_dataset: no items"));
    }
    split_sizes(items.len(), ratios)?;
    let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        strata.entry(stratum(item)).or_default().push(i);
    }
    let mut out = vec![Vec::new(); ratios.len()];
    for (key, mut idx) in strata {
        idx.shuffle(&mut stream(seed, key as u64));
        let mut start = 0;
        for (split, size) in out.iter_mut().zip(split_sizes(idx.len(), ratios)?) {
            split.extend(idx[start..start + size].iter().map(|&i| items[i].clone()));
            start += size;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Early,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    pub fn wall_time_s(&self) -> f64 {
        self.epochs.iter().map(|e| e.wall_time_s).sum()
    }

    /// CSV with columns `epoch,train_loss,val_loss,val_acc,lr`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_acc,lr\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.val_loss, e.val_acc, e.lr
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_csv().as_bytes())
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Eval-mode mean cross-entropy and accuracy.
pub fn eval_loss(model: &MiniResNet, samples: &[ImageSample], norm: &Normalization) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::invalid("eval_loss: no samples"));
    }
    let (mut loss, mut correct) = (0.0f64, 0usize);
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let logits = model.predict(&normalize_batch(&refs, None, norm)?)?;
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        let (l, _) = softmax_cross_entropy(&logits, &labels)?;
        loss += l as f64 * chunk.len() as f64;
        let c = logits.shape()[1];
        for (row, &y) in logits.data().chunks(c).zip(&labels) {
            if argmax(row) == y {
                correct += 1;
            }
        }
    }
    let n = samples.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Non-finite values inside an epoch mean the run blew up there.
fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged { epoch, loss: f32::NAN },
        other => other,
    }
}

/// Trains the groups in `plan` with Adam under the step schedule, stops
/// early on validation loss and returns the weights of the best epoch.
pub fn train(
    model: &MiniResNet,
    train_split: &[ImageSample],
    val_split: &[ImageSample],
    config: &TrainConfig,
    plan: &FreezePlan,
) -> Result<(MiniResNet, TrainHistory)> {
    config.validate()?;
    if train_split.is_empty() || val_split.is_empty() {
        return Err(Error::invalid("train: train and validation splits must be non-empty"));
    }
    let classes = model.num_classes();
    if let Some(s) = train_split.iter().chain(val_split).find(|s| s.label >= classes) {
        return Err(Error::invalid(format!(
            "train: sample {} has label {} but the model has {classes} outputs",
            s.id, s.label
        )));
    }
    let trainable: BTreeSet<Group> = plan.trainable.clone();
    let modes = GroupModes::for_trainable(&trainable);
    let request = BackwardRequest {
        param_groups: trainable.clone(),
        capture: BTreeSet::new(),
    };
    let hp = AdamParams::from(config);
    let norm = &config.normalization;

    let mut model = model.clone();
    let mut best = model.clone();
    let mut adam = AdamState::new();
    let mut stopper = EarlyStopping::new(config.patience, config.min_delta);
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut order: Vec<usize> = (0..train_split.len()).collect();

    for epoch in 0..config.max_epochs {
        let start = Instant::now();
        let lr = lr_at(config, epoch);
        let mut rng = stream(config.seed, epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(config.batch_size) {
            let samples: Vec<&ImageSample> = batch.iter().map(|&i| &train_split[i]).collect();
            let flips: Vec<bool> = batch
                .iter()
                .map(|_| draw_flip(&mut rng, config.flip_probability))
                .collect();
            let x = normalize_batch(&samples, Some(&flips), norm)?;
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            let fwd = model
                .forward_internal(&x, modes, &CaptureSpec::none())
                .map_err(|e| diverged(e, epoch))?;
            let (loss, d_logits) = softmax_cross_entropy(&fwd.logits, &labels).map_err(|e| diverged(e, epoch))?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            loss_sum += loss as f64 * batch.len() as f64;
            let grads = model
                .backward_internal(&fwd.trace, &d_logits, &request)
                .map_err(|e| diverged(e, epoch))?;
            model.apply_bn_updates(&fwd.trace);
            adam_step_model(&mut model, grads.param_grads, &mut adam, hp, lr)?;
        }
        let train_loss = loss_sum / train_split.len() as f64;
        let (val_loss, val_acc) = eval_loss(&model, val_split, norm).map_err(|e| diverged(e, epoch))?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: val_loss as f32,
            });
        }
        let decision = stopper.update(val_loss)?;
        if stopper.improved_last() {
            best = model.clone();
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_acc,
            lr,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        if decision == Decision::Stop {
            stop_reason = StopReason::Early;
            break;
        }
    }
    let best_epoch = stopper.best_index.unwrap_or(0);
    Ok((
        best,
        TrainHistory {
            epochs,
            best_epoch,
            stop_reason,
        },
    ))
}
