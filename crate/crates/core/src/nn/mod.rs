//! The four-stage residual network and its checkpoint format.
//!
//! Parameters are partitioned into six named groups (`stem`, `layer1` ..
//! `layer4`, `fc`). Every tensor name is prefixed with its group, and the
//! freezing logic in [`crate::swft`] operates on whole groups.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointMeta, StageTag, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::mix_seed;
use crate::tensor::{
    batchnorm2d_impl, conv2d, global_avg_pool, linear, relu, BatchNormCtx, Conv2dCtx, GapCtx, LinearCtx, Mode, ReluCtx,
    RunningStats, Tensor,
};

pub const INPUT_SIZE: usize = 64;
pub const INPUT_CHANNELS: usize = 3;
pub const STAGE_WIDTHS: [usize; 4] = [16, 32, 64, 128];
pub const STEM_WIDTH: usize = 16;

/// A named parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Stem,
    Layer1,
    Layer2,
    Layer3,
    Layer4,
    Fc,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::Stem,
        Group::Layer1,
        Group::Layer2,
        Group::Layer3,
        Group::Layer4,
        Group::Fc,
    ];

    /// The groups that produce a spatial activation map.
    pub const STAGES: [Group; 5] = [
        Group::Stem,
        Group::Layer1,
        Group::Layer2,
        Group::Layer3,
        Group::Layer4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Stem => "stem",
            Group::Layer1 => "layer1",
            Group::Layer2 => "layer2",
            Group::Layer3 => "layer3",
            Group::Layer4 => "layer4",
            Group::Fc => "fc",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_stage(self) -> bool {
        self != Group::Fc
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown group `{s}` (expected one of stem, layer1, layer2, layer3, layer4, fc)"
                ))
            })
    }
}

/// Whether a tensor is a learned parameter or a batch-norm running statistic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Param,
    Buffer,
}

#[derive(Clone, Debug)]
struct Conv {
    weight: Tensor,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn new(rng: &mut ChaCha8Rng, out_c: usize, in_c: usize, k: usize, stride: usize) -> Self {
        let fan_in = in_c * k * k;
        Conv {
            weight: he_normal(rng, vec![out_c, in_c, k, k], fan_in),
            stride,
            pad: k / 2,
        }
    }
}

#[derive(Clone, Debug)]
struct Bn {
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
}

impl Bn {
    fn new(c: usize) -> Self {
        Bn {
            gamma: Tensor::full(vec![c], 1.0),
            beta: Tensor::zeros(vec![c]),
            stats: RunningStats::new(c),
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv1: Conv,
    bn1: Bn,
    conv2: Conv,
    bn2: Bn,
    shortcut: Option<(Conv, Bn)>,
}

impl Block {
    fn new(rng: &mut ChaCha8Rng, in_c: usize, out_c: usize, stride: usize) -> Self {
        let conv1 = Conv::new(rng, out_c, in_c, 3, stride);
        let conv2 = Conv::new(rng, out_c, out_c, 3, 1);
        let shortcut =
            (stride != 1 || in_c != out_c).then(|| (Conv::new(rng, out_c, in_c, 1, stride), Bn::new(out_c)));
        Block {
            conv1,
            bn1: Bn::new(out_c),
            conv2,
            bn2: Bn::new(out_c),
            shortcut,
        }
    }
}

fn he_normal(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f32).sqrt();
    let normal = Normal::new(0.0f32, std).expect("positive std");
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches")
}

static NEXT_TOKEN: AtomicU64 = AtomicU64::new(1);

fn fresh_token() -> u64 {
    NEXT_TOKEN.fetch_add(1, Ordering::Relaxed)
}

/// Provenance carried by a model and written into its checkpoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelMeta {
    pub seed: u64,
    pub stage: StageTag,
}

/// Mini residual network: a stride-2 stem, four single-block stages with
/// widths 16/32/64/128 (stride 2 entering stages 2-4), global average
/// pooling and a linear head.
#[derive(Clone, Debug)]
pub struct MiniResNet {
    stem_conv: Conv,
    stem_bn: Bn,
    blocks: [Block; 4],
    fc_weight: Tensor,
    fc_bias: Tensor,
    num_classes: usize,
    pub meta: ModelMeta,
    token: u64,
    version: u64,
}

/// Per-stage batch-norm mode. `fc` has no normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupModes([Mode; 5]);

impl GroupModes {
    pub fn uniform(mode: Mode) -> Self {
        GroupModes([mode; 5])
    }

    /// Stages holding a trainable group run in train mode, the rest in eval.
    pub fn for_trainable(trainable: &BTreeSet<Group>) -> Self {
        let mut modes = [Mode::Eval; 5];
        for g in trainable.iter().filter(|g| g.is_stage()) {
            modes[g.index()] = Mode::Train;
        }
        GroupModes(modes)
    }

    pub fn get(&self, stage: Group) -> Mode {
        self.0[stage.index()]
    }
}

/// Stages whose activations should be recorded during a forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CaptureSpec {
    stages: BTreeSet<Group>,
}

impl CaptureSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(stages: impl IntoIterator<Item = Group>) -> Result<Self> {
        let stages: BTreeSet<Group> = stages.into_iter().collect();
        if stages.contains(&Group::Fc) {
            return Err(Error::invalid("fc has no spatial activation to capture"));
        }
        Ok(CaptureSpec { stages })
    }

    pub fn stages(&self) -> &BTreeSet<Group> {
        &self.stages
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }
}

/// Activation of one stage and, after a class-score backward pass, the
/// gradient of that score with respect to the activation.
#[derive(Clone, Debug)]
pub struct StageCapture {
    pub stage: Group,
    pub activation: Tensor,
    pub gradient: Option<Tensor>,
}

/// Result of a capturing forward pass.
#[derive(Debug, Default)]
pub struct FeatureCapture {
    pub stages: Vec<StageCapture>,
    origin: Option<(u64, u64)>,
    trace: Option<Trace>,
}

impl FeatureCapture {
    pub fn get(&self, stage: Group) -> Option<&StageCapture> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }
}

#[derive(Debug)]
struct BlockTrace {
    conv1: Conv2dCtx,
    bn1: BatchNormCtx,
    relu1: ReluCtx,
    conv2: Conv2dCtx,
    bn2: BatchNormCtx,
    shortcut: Option<(Conv2dCtx, BatchNormCtx)>,
    relu_out: ReluCtx,
}

#[derive(Debug)]
pub(crate) struct Trace {
    stem_conv: Conv2dCtx,
    stem_bn: BatchNormCtx,
    stem_relu: ReluCtx,
    blocks: Vec<BlockTrace>,
    gap: GapCtx,
    fc: LinearCtx,
    pooled_shape: [usize; 2],
}

/// What a backward pass has to produce.
#[derive(Clone, Debug, Default)]
pub(crate) struct BackwardRequest {
    pub param_groups: BTreeSet<Group>,
    pub capture: BTreeSet<Group>,
}

#[derive(Debug, Default)]
pub(crate) struct BackwardOutput {
    pub param_grads: Vec<(String, Tensor)>,
    pub stage_grads: Vec<(Group, Tensor)>,
}

pub(crate) struct ForwardOutput {
    pub logits: Tensor,
    pub trace: Trace,
    pub captured: Vec<(Group, Tensor)>,
}

fn block_forward(block: &Block, x: Tensor, mode: Mode) -> Result<(Tensor, BlockTrace)> {
    let (h, conv1) = conv_forward(&x, &block.conv1.weight, block.conv1.stride, block.conv1.pad)?;
    let (h, bn1) = bn_forward(&h, &block.bn1, mode)?;
    let (h, relu1) = relu(&h);
    let (h, conv2) = conv_forward(&h, &block.conv2.weight, block.conv2.stride, block.conv2.pad)?;
    let (h, bn2) = bn_forward(&h, &block.bn2, mode)?;
    let (skip, shortcut) = match &block.shortcut {
        Some((conv, bn)) => {
            let (s, sc_conv) = conv_forward(&x, &conv.weight, conv.stride, conv.pad)?;
            let (s, sc_bn) = bn_forward(&s, bn, mode)?;
            (s, Some((sc_conv, sc_bn)))
        }
        None => (x, None),
    };
    let (out, relu_out) = relu(&h.add(&skip)?);
    Ok((
        out,
        BlockTrace {
            conv1,
            bn1,
            relu1,
            conv2,
            bn2,
            shortcut,
            relu_out,
        },
    ))
}

macro_rules! visit_tensors {
    ($self:ident, $f:ident, $iter:ident, $($mutability:tt)*) => {{
        $f("stem.conv.weight".to_string(), Group::Stem, TensorKind::Param, & $($mutability)* $self.stem_conv.weight);
        visit_bn!("stem.bn", Group::Stem, $self.stem_bn, $f, $($mutability)*);
        for (i, block) in $self.blocks.$iter().enumerate() {
            let group = Group::STAGES[i + 1];
            let p = group.name();
            $f(format!("{p}.conv1.weight"), group, TensorKind::Param, & $($mutability)* block.conv1.weight);
            visit_bn!(format!("{p}.bn1"), group, block.bn1, $f, $($mutability)*);
            $f(format!("{p}.conv2.weight"), group, TensorKind::Param, & $($mutability)* block.conv2.weight);
            visit_bn!(format!("{p}.bn2"), group, block.bn2, $f, $($mutability)*);
            if let Some((conv, bn)) = & $($mutability)* block.shortcut {
                $f(format!("{p}.shortcut.conv.weight"), group, TensorKind::Param, & $($mutability)* conv.weight);
                visit_bn!(format!("{p}.shortcut.bn"), group, *bn, $f, $($mutability)*);
            }
        }
        $f("fc.weight".to_string(), Group::Fc, TensorKind::Param, & $($mutability)* $self.fc_weight);
        $f("fc.bias".to_string(), Group::Fc, TensorKind::Param, & $($mutability)* $self.fc_bias);
    }};
}

macro_rules! visit_bn {
    ($prefix:expr, $group:expr, $bn:expr, $f:ident, $($mutability:tt)*) => {{
        let prefix = $prefix;
        $f(format!("{prefix}.gamma"), $group, TensorKind::Param, & $($mutability)* $bn.gamma);
        $f(format!("{prefix}.beta"), $group, TensorKind::Param, & $($mutability)* $bn.beta);
        $f(format!("{prefix}.running_mean"), $group, TensorKind::Buffer, & $($mutability)* $bn.stats.mean);
        $f(format!("{prefix}.running_var"), $group, TensorKind::Buffer, & $($mutability)* $bn.stats.var);
    }};
}

impl MiniResNet {
    /// Builds a freshly initialized network. Conv and linear weights are
    /// drawn from `N(0, 2 / fan_in)`; the head is drawn last so that the
    /// class count never changes the body's initialization.
    pub fn build(num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid(format!(
                "num_classes must be >= 2, got {num_classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem_conv = Conv::new(&mut rng, STEM_WIDTH, INPUT_CHANNELS, 3, 2);
        let mut in_c = STEM_WIDTH;
        let blocks = STAGE_WIDTHS.map(|w| {
            let stride = if w == STAGE_WIDTHS[0] { 1 } else { 2 };
            let block = Block::new(&mut rng, in_c, w, stride);
            in_c = w;
            block
        });
        let (fc_weight, fc_bias) = init_head(&mut rng, num_classes);
        Ok(MiniResNet {
            stem_conv,
            stem_bn: Bn::new(STEM_WIDTH),
            blocks,
            fc_weight,
            fc_bias,
            num_classes,
            meta: ModelMeta {
                seed,
                stage: StageTag::Untrained,
            },
            token: fresh_token(),
            version: 0,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Swaps the classifier head for a freshly initialized one with
    /// `num_classes` outputs. Nothing outside `fc` is touched.
    pub fn replace_head(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes < 2 {
            return Err(Error::invalid(format!(
                "num_classes must be >= 2, got {num_classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6663_6865_6164));
        let (w, b) = init_head(&mut rng, num_classes);
        self.fc_weight = w;
        self.fc_bias = b;
        self.num_classes = num_classes;
        self.touch();
        Ok(())
    }

    fn touch(&mut self) {
        self.version += 1;
    }

    pub fn visit(&self, mut f: impl FnMut(String, Group, TensorKind, &Tensor)) {
        visit_tensors!(self, f, iter,);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(String, Group, TensorKind, &mut Tensor)) {
        self.touch();
        visit_tensors!(self, f, iter_mut, mut);
    }

    /// All tensors (parameters and running statistics) in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, Group, TensorKind, Tensor)> {
        let mut out = Vec::new();
        self.visit(|name, group, kind, t| out.push((name, group, kind, t.clone())));
        out
    }

    pub fn named_parameters(&self) -> Vec<(String, Group, Tensor)> {
        self.named_tensors()
            .into_iter()
            .filter(|(_, _, kind, _)| *kind == TensorKind::Param)
            .map(|(n, g, _, t)| (n, g, t))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, _, kind, t| {
            if kind == TensorKind::Param {
                n += t.numel()
            }
        });
        n
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        let mut found = None;
        self.visit(|n, _, _, t| {
            if n == name {
                found = Some(t.clone());
            }
        });
        found
    }

    /// Forward pass with every stage in `mode`. Train mode updates the
    /// running statistics. Stages listed in `capture` are recorded so that
    /// [`MiniResNet::backward_from_class_score`] can be called afterwards.
    pub fn forward(
        &mut self,
        batch: &Tensor,
        mode: Mode,
        capture: &CaptureSpec,
    ) -> Result<(Tensor, FeatureCapture)> {
        let modes = GroupModes::uniform(mode);
        let out = self.forward_internal(batch, modes, capture)?;
        if mode == Mode::Train {
            self.apply_bn_updates(&out.trace);
        }
        Ok(self.package_capture(out, capture))
    }

    /// Eval-mode [`MiniResNet::forward`] that leaves the model untouched.
    pub fn forward_eval(&self, batch: &Tensor, capture: &CaptureSpec) -> Result<(Tensor, FeatureCapture)> {
        let out = self.forward_internal(batch, GroupModes::uniform(Mode::Eval), capture)?;
        Ok(self.package_capture(out, capture))
    }

    fn package_capture(&self, out: ForwardOutput, capture: &CaptureSpec) -> (Tensor, FeatureCapture) {
        if capture.is_empty() {
            return (out.logits, FeatureCapture::default());
        }
        let capture = FeatureCapture {
            stages: out
                .captured
                .into_iter()
                .map(|(stage, activation)| StageCapture {
                    stage,
                    activation,
                    gradient: None,
                })
                .collect(),
            origin: Some((self.token, self.version)),
            trace: Some(out.trace),
        };
        (out.logits, capture)
    }

    /// Eval-mode logits without recording anything.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self
            .forward_internal(batch, GroupModes::uniform(Mode::Eval), &CaptureSpec::none())?
            .logits)
    }

    /// Eval-mode logits computed from the output activation of `stage`,
    /// i.e. the part of the network after that stage.
    pub fn forward_from(&self, stage: Group, activation: &Tensor) -> Result<Tensor> {
        if stage == Group::Fc {
            return Err(Error::invalid("forward_from: fc has no activation to resume from"));
        }
        let mut x = activation.clone();
        for block in &self.blocks[stage.index()..] {
            x = block_forward(block, x, Mode::Eval)?.0;
        }
        let (pooled, _) = global_avg_pool(&x)?;
        let [n, ch, _, _] = pooled.dims4("pooled")?;
        let pooled = pooled.reshape(vec![n, ch])?;
        Ok(linear(&pooled, &self.fc_weight, &self.fc_bias)?.0)
    }

    /// Fills each captured stage's gradient with `d logit[class] / d A`.
    /// The model's parameters are left untouched.
    pub fn backward_from_class_score(
        &self,
        mut capture: FeatureCapture,
        class_index: usize,
    ) -> Result<FeatureCapture> {
        if capture.origin != Some((self.token, self.version)) {
            return Err(Error::StaleCapture);
        }
        let trace = capture.trace.as_ref().ok_or(Error::StaleCapture)?;
        if class_index >= self.num_classes {
            return Err(Error::invalid(format!(
                "class {class_index} out of range for {} classes",
                self.num_classes
            )));
        }
        let [batch, _] = trace.pooled_shape;
        let mut d_logits = Tensor::zeros(vec![batch, self.num_classes]);
        for row in d_logits.data_mut().chunks_mut(self.num_classes) {
            row[class_index] = 1.0;
        }
        let req = BackwardRequest {
            param_groups: BTreeSet::new(),
            capture: capture.stages.iter().map(|s| s.stage).collect(),
        };
        let out = self.backward_internal(trace, &d_logits, &req)?;
        for (stage, grad) in out.stage_grads {
            if let Some(entry) = capture.stages.iter_mut().find(|s| s.stage == stage) {
                entry.gradient = Some(grad);
            }
        }
        Ok(capture)
    }

    pub(crate) fn forward_internal(
        &self,
        batch: &Tensor,
        modes: GroupModes,
        capture: &CaptureSpec,
    ) -> Result<ForwardOutput> {
        let [_, c, _, _] = batch.dims4("model input")?;
        if c != INPUT_CHANNELS {
            return Err(Error::ShapeMismatch {
                op: "model input channels",
                left: batch.shape().to_vec(),
                right: vec![0, INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE],
            });
        }
        let mut captured = Vec::new();
        let mode = modes.get(Group::Stem);
        let (x, stem_conv) = conv_forward(batch, &self.stem_conv.weight, self.stem_conv.stride, self.stem_conv.pad)?;
        let (x, stem_bn) = bn_forward(&x, &self.stem_bn, mode)?;
        let (mut x, stem_relu) = relu(&x);
        if capture.stages.contains(&Group::Stem) {
            captured.push((Group::Stem, x.clone()));
        }
        let mut blocks = Vec::with_capacity(4);
        for (i, block) in self.blocks.iter().enumerate() {
            let stage = Group::STAGES[i + 1];
            let (out, trace) = block_forward(block, x, modes.get(stage))?;
            if capture.stages.contains(&stage) {
                captured.push((stage, out.clone()));
            }
            x = out;
            blocks.push(trace);
        }
        let (pooled, gap) = global_avg_pool(&x)?;
        let [n, ch, _, _] = pooled.dims4("pooled")?;
        let pooled = pooled.reshape(vec![n, ch])?;
        let (logits, fc) = linear(&pooled, &self.fc_weight, &self.fc_bias)?;
        if !logits.all_finite() {
            return Err(Error::NonFinite("forward logits".into()));
        }
        Ok(ForwardOutput {
            logits,
            trace: Trace {
                stem_conv,
                stem_bn,
                stem_relu,
                blocks,
                gap,
                fc,
                pooled_shape: [n, ch],
            },
            captured,
        })
    }

    pub(crate) fn apply_bn_updates(&mut self, trace: &Trace) {
        if let Some((m, v)) = trace.stem_bn.batch_stats() {
            self.stem_bn.stats.update(m, v);
        }
        for (block, bt) in self.blocks.iter_mut().zip(&trace.blocks) {
            if let Some((m, v)) = bt.bn1.batch_stats() {
                block.bn1.stats.update(m, v);
            }
            if let Some((m, v)) = bt.bn2.batch_stats() {
                block.bn2.stats.update(m, v);
            }
            if let (Some((_, bn)), Some((_, bt_bn))) = (&mut block.shortcut, &bt.shortcut) {
                if let Some((m, v)) = bt_bn.batch_stats() {
                    bn.stats.update(m, v);
                }
            }
        }
        self.touch();
    }

    pub(crate) fn backward_internal(
        &self,
        trace: &Trace,
        d_logits: &Tensor,
        req: &BackwardRequest,
    ) -> Result<BackwardOutput> {
        let mut out = BackwardOutput::default();
        let lowest = req
            .param_groups
            .iter()
            .chain(req.capture.iter())
            .min()
            .copied();
        let Some(lowest) = lowest else {
            return Ok(out);
        };
        let need_body = lowest < Group::Fc;
        let (d_pooled, fc_params) =
            trace
                .fc
                .backward_parts(d_logits, need_body, req.param_groups.contains(&Group::Fc))?;
        if let Some((dw, db)) = fc_params {
            out.param_grads.push(("fc.weight".into(), dw));
            out.param_grads.push(("fc.bias".into(), db));
        }
        let Some(d_pooled) = d_pooled else {
            return Ok(out);
        };
        let [n, ch] = trace.pooled_shape;
        let mut d = trace.gap.backward(&d_pooled.reshape(vec![n, ch, 1, 1])?)?;

        for i in (0..4).rev() {
            let stage = Group::STAGES[i + 1];
            if req.capture.contains(&stage) {
                out.stage_grads.push((stage, d.clone()));
            }
            let want_params = req.param_groups.contains(&stage);
            let want_input = lowest < stage;
            if !want_params && !want_input {
                return Ok(out);
            }
            let bt = &trace.blocks[i];
            let p = stage.name();
            let d_sum = bt.relu_out.backward(&d)?;
            let (d_h, bn2) = bt.bn2.backward_parts(&d_sum, true, want_params)?;
            let d_h = d_h.expect("requested");
            let (d_h, k2, _) = bt.conv2.backward_parts(&d_h, true, want_params)?;
            let d_h = bt.relu1.backward(&d_h.expect("requested"))?;
            let (d_h, bn1) = bt.bn1.backward_parts(&d_h, true, want_params)?;
            let (d_main, k1, _) =
                bt.conv1
                    .backward_parts(&d_h.expect("requested"), want_input, want_params)?;
            let mut sc_grads = None;
            let d_skip = match &bt.shortcut {
                Some((sc_conv, sc_bn)) => {
                    let (d_s, bn_sc) = sc_bn.backward_parts(&d_sum, want_input || want_params, want_params)?;
                    let (d_s, k_sc, _) = sc_conv.backward_parts(
                        &d_s.expect("requested"),
                        want_input,
                        want_params,
                    )?;
                    sc_grads = k_sc.zip(bn_sc);
                    d_s
                }
                None => want_input.then(|| d_sum.clone()),
            };
            if want_params {
                let (g1, b1) = bn1.expect("requested");
                let (g2, b2) = bn2.expect("requested");
                out.param_grads.push((format!("{p}.conv1.weight"), k1.expect("requested")));
                out.param_grads.push((format!("{p}.bn1.gamma"), g1));
                out.param_grads.push((format!("{p}.bn1.beta"), b1));
                out.param_grads.push((format!("{p}.conv2.weight"), k2.expect("requested")));
                out.param_grads.push((format!("{p}.bn2.gamma"), g2));
                out.param_grads.push((format!("{p}.bn2.beta"), b2));
                if let Some((k, (g, b))) = sc_grads {
                    out.param_grads.push((format!("{p}.shortcut.conv.weight"), k));
                    out.param_grads.push((format!("{p}.shortcut.bn.gamma"), g));
                    out.param_grads.push((format!("{p}.shortcut.bn.beta"), b));
                }
            }
            if !want_input {
                return Ok(out);
            }
            d = d_main
                .expect("requested")
                .add(&d_skip.expect("requested"))?;
        }

        if req.capture.contains(&Group::Stem) {
            out.stage_grads.push((Group::Stem, d.clone()));
        }
        if req.param_groups.contains(&Group::Stem) {
            let d = trace.stem_relu.backward(&d)?;
            let (d, bn) = trace.stem_bn.backward_parts(&d, true, true)?;
            let (_, k, _) = trace
                .stem_conv
                .backward_parts(&d.expect("requested"), false, true)?;
            let (g, b) = bn.expect("requested");
            out.param_grads.push(("stem.conv.weight".into(), k.expect("requested")));
            out.param_grads.push(("stem.bn.gamma".into(), g));
            out.param_grads.push(("stem.bn.beta".into(), b));
        }
        Ok(out)
    }
}

fn bn_forward(x: &Tensor, bn: &Bn, mode: Mode) -> Result<(Tensor, BatchNormCtx)> {
    batchnorm2d_impl(x, &bn.gamma, &bn.beta, &bn.stats, mode)
}

fn conv_forward(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<(Tensor, Conv2dCtx)> {
    conv2d(x, weight, None, stride, pad)
}

fn init_head(rng: &mut ChaCha8Rng, num_classes: usize) -> (Tensor, Tensor) {
    let features = STAGE_WIDTHS[3];
    (
        he_normal(rng, vec![num_classes, features], features),
        Tensor::zeros(vec![num_classes]),
    )
}
