//! Independent oracles shared by the integration tests and the acceptance
//! gate: finite differences over f64 reference forwards, a brute-force
//! convolution and direct-counting metrics. None of these call into the code
//! they check.

#![allow(dead_code)]

pub mod reference;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vxlab::tensor::{
    batchnorm2d, conv2d, global_avg_pool, linear, relu, softmax_cross_entropy, RunningStats,
};
use vxlab::{Mode, Tensor};

use reference::Arr;

pub const FD_STEP: f32 = 1e-3;
pub const FD_TOL: f64 = 1e-2;
pub const FD_MIN_MAG: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Quadruple-loop cross-correlation.
pub fn naive_conv(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let s = input.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let k = kernel.shape();
    let (o, kh, kw) = (k[0], k[2], k[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let x = |b: usize, ch: usize, y: isize, xx: isize| -> f64 {
        if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
            0.0
        } else {
            input.data()[((b * c + ch) * h + y as usize) * w + xx as usize] as f64
        }
    };
    let mut out = Vec::with_capacity(n * o * oh * ow);
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |t| t.data()[oc] as f64);
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let wv = kernel.data()[((oc * c + ic) * kh + ky) * kw + kx] as f64;
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                acc += wv * x(b, ic, y, xx);
                            }
                        }
                    }
                    out.push(acc as f32);
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

/// Every input/kernel combination up to 2x3x5x5 input and 4x3x3x3 kernel,
/// strides {1, 2}, pads {0, 1}. Returns the largest deviation seen and the
/// number of cases.
pub fn conv_oracle_grid(seed: u64) -> (f32, usize) {
    let mut r = rng(seed);
    let (mut worst, mut cases) = (0.0f32, 0);
    for n in 1..=2 {
        for c in 1..=3 {
            for hw in 1..=5 {
                for o in 1..=4 {
                    for k in 1..=3 {
                        for stride in 1..=2 {
                            for pad in 0..=1 {
                                if hw + 2 * pad < k {
                                    continue;
                                }
                                let x = rand_tensor(&mut r, &[n, c, hw, hw], 1.0);
                                let kern = rand_tensor(&mut r, &[o, c, k, k], 1.0);
                                let bias = rand_tensor(&mut r, &[o], 1.0);
                                let use_bias = (n + c + o) % 2 == 0;
                                let b = use_bias.then_some(&bias);
                                let (got, _) = conv2d(&x, &kern, b, stride, pad).unwrap();
                                let want = naive_conv(&x, &kern, b, stride, pad);
                                assert_eq!(got.shape(), want.shape());
                                worst = worst.max(got.max_abs_diff(&want).unwrap());
                                cases += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    (worst, cases)
}

/// Largest relative error between `analytic` and central differences of
/// `f` around `x`, over elements whose magnitude exceeds [`FD_MIN_MAG`].
/// The step is applied to the f32 input; `skip` excludes elements (e.g. at a
/// ReLU kink).
pub fn fd_max_rel_err(
    x: &Tensor,
    analytic: &Tensor,
    f: impl Fn(&Tensor) -> f64,
    skip: impl Fn(usize) -> bool,
) -> (f64, usize) {
    assert_eq!(x.shape(), analytic.shape());
    let (mut worst, mut checked) = (0.0f64, 0usize);
    for i in 0..x.numel() {
        if skip(i) {
            continue;
        }
        let mut plus = x.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= FD_STEP;
        let h = (plus.data()[i] as f64 - minus.data()[i] as f64) / 2.0;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
        let a = analytic.data()[i] as f64;
        if a.abs().max(numeric.abs()) <= FD_MIN_MAG {
            continue;
        }
        checked += 1;
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()));
    }
    (worst, checked)
}

/// Outcome of one primitive's gradient sweep. `forward` is the largest
/// deviation of the primitive's output from the f64 reference.
#[derive(Debug)]
pub struct GradReport {
    pub primitive: &'static str,
    pub shapes: usize,
    pub elements: usize,
    pub worst: f64,
    pub forward: f64,
}

pub const FORWARD_TOL: f64 = 1e-4;

impl GradReport {
    fn new(primitive: &'static str) -> Self {
        GradReport {
            primitive,
            shapes: 0,
            elements: 0,
            worst: 0.0,
            forward: 0.0,
        }
    }

    fn add(&mut self, (worst, n): (f64, usize)) {
        self.worst = self.worst.max(worst);
        self.elements += n;
    }

    fn forward(&mut self, reference: &Arr, got: &Tensor) {
        self.forward = self.forward.max(reference.deviation(got));
    }

    pub fn ok(&self) -> bool {
        self.worst < FD_TOL && self.forward < FORWARD_TOL && self.shapes >= 20 && self.elements > 0
    }
}

fn small_shape(r: &mut ChaCha8Rng) -> [usize; 4] {
    [
        r.random_range(1..=3),
        r.random_range(1..=4),
        r.random_range(1..=4),
        r.random_range(1..=4),
    ]
}

fn a(t: &Tensor) -> Arr {
    Arr::of(t)
}

pub fn grad_conv(seed: u64, shapes: usize) -> GradReport {
    let mut r = rng(seed);
    let mut rep = GradReport::new("conv2d");
    while rep.shapes < shapes {
        let [n, c, h, w] = small_shape(&mut r);
        let (k, stride, pad) = (r.random_range(1..=3), r.random_range(1..=2), r.random_range(0..=1));
        if h + 2 * pad < k || w + 2 * pad < k {
            continue;
        }
        let o = r.random_range(1..=4);
        let x = rand_tensor(&mut r, &[n, c, h, w], 1.0);
        let kern = rand_tensor(&mut r, &[o, c, k, k], 1.0);
        let bias = rand_tensor(&mut r, &[o], 1.0);
        let (y, ctx) = conv2d(&x, &kern, Some(&bias), stride, pad).unwrap();
        rep.forward(&reference::conv(&a(&x), &a(&kern), Some(&a(&bias)), stride, pad), &y);
        let up = rand_tensor(&mut r, y.shape(), 1.0);
        let g = ctx.backward(&up).unwrap();
        let f = |x: &Tensor, k: &Tensor, b: &Tensor| reference::conv(&a(x), &a(k), Some(&a(b)), stride, pad).dot(&up);
        rep.add(fd_max_rel_err(&x, &g.d_input, |x| f(x, &kern, &bias), |_| false));
        rep.add(fd_max_rel_err(&kern, g.param("weight").unwrap(), |k| f(&x, k, &bias), |_| false));
        rep.add(fd_max_rel_err(&bias, g.param("bias").unwrap(), |b| f(&x, &kern, b), |_| false));
        rep.shapes += 1;
    }
    rep
}

pub fn grad_batchnorm(seed: u64, shapes: usize, mode: Mode) -> GradReport {
    let mut r = rng(seed);
    let mut rep = GradReport::new(match mode {
        Mode::Train => "batchnorm2d (train)",
        Mode::Eval => "batchnorm2d (eval)",
    });
    while rep.shapes < shapes {
        let [n, c, h, w] = small_shape(&mut r);
        if mode == Mode::Train && n * h * w < 2 {
            continue;
        }
        let x = rand_tensor(&mut r, &[n, c, h, w], 1.0);
        let gamma = rand_tensor(&mut r, &[c], 1.0).map(|v| v + 1.5);
        let beta = rand_tensor(&mut r, &[c], 1.0);
        let mut stats = RunningStats::new(c);
        stats.mean = rand_tensor(&mut r, &[c], 0.5);
        stats.var = rand_tensor(&mut r, &[c], 0.5).map(|v| v + 1.0);
        let (rm, rv) = (a(&stats.mean), a(&stats.var));
        let running = (mode == Mode::Eval).then_some((&rm, &rv));
        let (y, ctx) = batchnorm2d(&x, &gamma, &beta, &mut stats.clone(), mode).unwrap();
        rep.forward(&reference::batchnorm(&a(&x), &a(&gamma), &a(&beta), running), &y);
        let up = rand_tensor(&mut r, y.shape(), 1.0);
        let g = ctx.backward(&up).unwrap();
        let f = |x: &Tensor, gm: &Tensor, bt: &Tensor| reference::batchnorm(&a(x), &a(gm), &a(bt), running).dot(&up);
        rep.add(fd_max_rel_err(&x, &g.d_input, |x| f(x, &gamma, &beta), |_| false));
        rep.add(fd_max_rel_err(&gamma, g.param("gamma").unwrap(), |gm| f(&x, gm, &beta), |_| false));
        rep.add(fd_max_rel_err(&beta, g.param("beta").unwrap(), |bt| f(&x, &gamma, bt), |_| false));
        rep.shapes += 1;
    }
    rep
}

pub fn grad_relu(seed: u64, shapes: usize) -> GradReport {
    let mut r = rng(seed);
    let mut rep = GradReport::new("relu");
    while rep.shapes < shapes {
        let shape = small_shape(&mut r);
        let x = rand_tensor(&mut r, &shape, 1.0);
        let (y, ctx) = relu(&x);
        rep.forward(&reference::relu(&a(&x)), &y);
        let up = rand_tensor(&mut r, y.shape(), 1.0);
        let dx = ctx.backward(&up).unwrap();
        let kink = |i: usize| x.data()[i].abs() <= 2.0 * FD_STEP;
        rep.add(fd_max_rel_err(&x, &dx, |x| reference::relu(&a(x)).dot(&up), kink));
        rep.shapes += 1;
    }
    rep
}

pub fn grad_gap(seed: u64, shapes: usize) -> GradReport {
    let mut r = rng(seed);
    let mut rep = GradReport::new("global_avg_pool");
    while rep.shapes < shapes {
        let shape = small_shape(&mut r);
        let x = rand_tensor(&mut r, &shape, 1.0);
        let (y, ctx) = global_avg_pool(&x).unwrap();
        let want = reference::gap(&a(&x));
        rep.forward(&want, &y.clone().reshape(want.shape.clone()).unwrap());
        let up = rand_tensor(&mut r, y.shape(), 1.0);
        let dx = ctx.backward(&up).unwrap();
        let flat = up.clone().reshape(want.shape.clone()).unwrap();
        rep.add(fd_max_rel_err(&x, &dx, |x| reference::gap(&a(x)).dot(&flat), |_| false));
        rep.shapes += 1;
    }
    rep
}

pub fn grad_linear(seed: u64, shapes: usize) -> GradReport {
    let mut r = rng(seed);
    let mut rep = GradReport::new("linear");
    while rep.shapes < shapes {
        let (n, i, o) = (r.random_range(1..=4), r.random_range(1..=6), r.random_range(1..=5));
        let x = rand_tensor(&mut r, &[n, i], 1.0);
        let w = rand_tensor(&mut r, &[o, i], 1.0);
        let b = rand_tensor(&mut r, &[o], 1.0);
        let (y, ctx) = linear(&x, &w, &b).unwrap();
        rep.forward(&reference::linear(&a(&x), &a(&w), &a(&b)), &y);
        let up = rand_tensor(&mut r, y.shape(), 1.0);
        let g = ctx.backward(&up).unwrap();
        let f = |x: &Tensor, w: &Tensor, b: &Tensor| reference::linear(&a(x), &a(w), &a(b)).dot(&up);
        rep.add(fd_max_rel_err(&x, &g.d_input, |x| f(x, &w, &b), |_| false));
        rep.add(fd_max_rel_err(&w, g.param("weight").unwrap(), |w| f(&x, w, &b), |_| false));
        rep.add(fd_max_rel_err(&b, g.param("bias").unwrap(), |b| f(&x, &w, b), |_| false));
        rep.shapes += 1;
    }
    rep
}

pub fn grad_softmax_ce(seed: u64, shapes: usize) -> GradReport {
    let mut r = rng(seed);
    let mut rep = GradReport::new("softmax_cross_entropy");
    while rep.shapes < shapes {
        let (n, c) = (r.random_range(1..=4), r.random_range(2..=5));
        let logits = rand_tensor(&mut r, &[n, c], 2.0);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let (loss, d) = softmax_cross_entropy(&logits, &labels).unwrap();
        let want = reference::softmax_ce(&a(&logits), &labels);
        rep.forward = rep.forward.max((want - loss as f64).abs() / want.abs().max(1.0));
        rep.add(fd_max_rel_err(&logits, &d, |l| reference::softmax_ce(&a(l), &labels), |_| false));
        rep.shapes += 1;
    }
    rep
}

pub fn all_gradient_reports(seed: u64, shapes: usize) -> Vec<GradReport> {
    vec![
        grad_conv(seed, shapes),
        grad_batchnorm(seed + 1, shapes, Mode::Train),
        grad_batchnorm(seed + 2, shapes, Mode::Eval),
        grad_relu(seed + 3, shapes),
        grad_gap(seed + 4, shapes),
        grad_linear(seed + 5, shapes),
        grad_softmax_ce(seed + 6, shapes),
    ]
}

/// Direct counts `(tp, fp, fn, tn)` for `positive`.
pub fn count_confusion(preds: &[usize], labels: &[usize], positive: usize) -> (usize, usize, usize, usize) {
    let mut c = (0, 0, 0, 0);
    for (&p, &y) in preds.iter().zip(labels) {
        match (p == positive, y == positive) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, true) => c.2 += 1,
            (false, false) => c.3 += 1,
        }
    }
    c
}

pub fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Mann-Whitney pair statistic with half credit for ties.
pub fn pair_auc(scores: &[f64], labels: &[usize], positive: usize) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y == positive).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y != positive).map(|(&s, _)| s).collect();
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Names of tensors that broke the freezing contract of `plan`: any tensor
/// of a frozen group that differs from `before`, and any trainable group in
/// which no parameter moved. Heads of different shape count as moved.
pub fn freezing_violations(
    before: &vxlab::MiniResNet,
    after: &vxlab::MiniResNet,
    plan: &vxlab::FreezePlan,
) -> Vec<String> {
    use std::collections::BTreeMap;
    use vxlab::nn::TensorKind;
    let old: BTreeMap<String, Tensor> = before.named_tensors().into_iter().map(|(n, _, _, t)| (n, t)).collect();
    let mut moved: BTreeMap<vxlab::Group, bool> = BTreeMap::new();
    let mut bad = Vec::new();
    for (name, group, kind, t) in after.named_tensors() {
        let same = old.get(&name).is_some_and(|o| o == &t);
        if plan.is_trainable(group) {
            if kind == TensorKind::Param {
                *moved.entry(group).or_default() |= !same;
            }
        } else if !same {
            bad.push(format!("{name} (frozen {group}) changed"));
        }
    }
    for g in &plan.trainable {
        if !moved.get(g).copied().unwrap_or(false) {
            bad.push(format!("trainable group {g} never moved"));
        }
    }
    bad
}

/// Independent evaluation of `ReLU(sum_k ReLU(g) * A)` at one location.
pub fn cam_oracle(a: &[f32], g: &[f32], k: usize, hw: usize, pos: usize) -> f64 {
    (0..k)
        .map(|c| (g[c * hw + pos] as f64).max(0.0) * a[c * hw + pos] as f64)
        .sum::<f64>()
        .max(0.0)
}

/// Runs the LayerCAM property battery on `pairs` random (A, g) pairs and
/// returns a description of every violation.
pub fn cam_property_failures(seed: u64, pairs: usize) -> Vec<String> {
    use vxlab::layercam::cam_values;
    let mut r = rng(seed);
    let mut bad = Vec::new();
    let close = |x: f32, y: f64| (x as f64 - y).abs() <= 1e-6 * y.abs().max(1.0);
    for case in 0..pairs {
        let (k, h, w) = (r.random_range(1..=6), r.random_range(1..=5), r.random_range(1..=5));
        let hw = h * w;
        let a = rand_tensor(&mut r, &[k, h, w], 2.0);
        let g = rand_tensor(&mut r, &[k, h, w], 1.0);
        let (_, _, m) = cam_values(&a, &g).unwrap();
        if m.iter().any(|&v| v < 0.0) {
            bad.push(format!("case {case}: negative map"));
        }
        if (0..hw).any(|p| !close(m[p], cam_oracle(a.data(), g.data(), k, hw, p))) {
            bad.push(format!("case {case}: differs from direct evaluation"));
        }
        let closed = g.map(|v| -v.abs());
        if cam_values(&a, &closed).unwrap().2.iter().any(|&v| v != 0.0) {
            bad.push(format!("case {case}: non-positive gradients gave a non-zero map"));
        }
        // Powers of two scale exactly; other factors up to rounding.
        let lambda = [0.25f32, 2.0, 8.0][case % 3];
        let factor = r.random_range(0.1..10.0f32);
        for (what, sa, sg) in [("A", lambda, 1.0), ("g", 1.0, lambda)] {
            let (_, _, scaled) = cam_values(&a.scale(sa), &g.scale(sg)).unwrap();
            if scaled.iter().zip(&m).any(|(&s, &v)| s != v * lambda) {
                bad.push(format!("case {case}: scaling {what} by {lambda} is not exact"));
            }
        }
        for (what, sa, sg) in [("A", factor, 1.0), ("g", 1.0, factor)] {
            let (_, _, scaled) = cam_values(&a.scale(sa), &g.scale(sg)).unwrap();
            if scaled.iter().zip(&m).any(|(&s, &v)| !close(s, v as f64 * factor as f64)) {
                bad.push(format!("case {case}: scaling {what} by {factor} is not homogeneous"));
            }
        }
        let mut perm: Vec<usize> = (0..k).collect();
        perm.reverse();
        perm.rotate_left(case % k);
        let shuffle = |t: &Tensor| {
            let data = perm.iter().flat_map(|&c| t.data()[c * hw..(c + 1) * hw].to_vec()).collect();
            Tensor::new(vec![k, h, w], data).unwrap()
        };
        let (_, _, pm) = cam_values(&shuffle(&a), &shuffle(&g)).unwrap();
        if pm.iter().zip(&m).any(|(&x, &y)| !close(x, y as f64)) {
            bad.push(format!("case {case}: channel permutation changed the map"));
        }
    }
    bad
}

/// Compares confusion counts, accuracy, precision, recall, F1 and AUC with
/// direct-counting oracles on `sets` random prediction/label sets. Returns the violations and the
/// largest AUC deviation from the pair statistic.
pub fn metric_oracle_failures(seed: u64, sets: usize) -> (Vec<String>, f64) {
    use vxlab::metrics::{confusion, roc_auc};
    let mut r = rng(seed);
    let mut bad = Vec::new();
    let mut worst_auc = 0.0f64;
    for case in 0..sets {
        let n = r.random_range(2..=200);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
        let preds: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
        // Coarse scores force plenty of ties.
        let levels = r.random_range(2..=50) as f64;
        let scores: Vec<f64> = (0..n).map(|_| (r.random_range(0.0..1.0) * levels).floor() / levels).collect();
        for positive in [0, 1] {
            let (tp, fp, fneg, tn) = count_confusion(&preds, &labels, positive);
            let cm = confusion(&preds, &labels, positive).unwrap();
            if (cm.tp, cm.fp, cm.fn_, cm.tn) != (tp, fp, fneg, tn) {
                bad.push(format!("case {case}: confusion counts"));
            }
            let (p, rc) = (ratio(tp, tp + fp), ratio(tp, tp + fneg));
            let f1 = if p + rc == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
            let want = [ratio(tp + tn, n), p, rc, f1];
            let got = [cm.accuracy(), cm.precision(), cm.recall(), cm.f1()];
            if want != got {
                bad.push(format!("case {case} positive {positive}: {got:?} vs {want:?}"));
            }
            if got.iter().any(|v| !(0.0..=1.0).contains(v)) {
                bad.push(format!("case {case}: metric outside [0, 1]"));
            }
        }
        if labels.iter().all(|&l| l == labels[0]) {
            if roc_auc(&scores, &labels, 1).is_ok() {
                bad.push(format!("case {case}: single-class AUC accepted"));
            }
            continue;
        }
        let auc = roc_auc(&scores, &labels, 1).unwrap();
        worst_auc = worst_auc.max((auc - pair_auc(&scores, &labels, 1)).abs());
    }
    if worst_auc >= 1e-9 {
        bad.push(format!("AUC deviates from the pair statistic by {worst_auc}"));
    }
    (bad, worst_auc)
}

/// Mean tortuosity in degrees over the polylines of `sample` that have at
/// least three points.
pub fn sample_tortuosity(sample: &vxlab::datagen::ImageSample) -> Option<f64> {
    let t: Vec<f64> = sample
        .vessels
        .iter()
        .filter(|p| p.len() >= 3)
        .map(|p| vxlab::datagen::tortuosity(p).unwrap().to_degrees())
        .collect();
    (!t.is_empty()).then(|| t.iter().sum::<f64>() / t.len() as f64)
}

/// Per-class tortuosity ranges (min, max) over the first `per_class`
/// samples of each target class.
pub fn target_tortuosity_ranges(per_class: usize, seed: u64) -> [(f64, f64, usize); 2] {
    let samples = vxlab::datagen::gen_target(per_class * 4, seed).unwrap();
    [0, 1].map(|c| {
        let vals: Vec<f64> = samples
            .iter()
            .filter(|s| s.label == c)
            .take(per_class)
            .filter_map(sample_tortuosity)
            .collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi, vals.len())
    })
}

/// Largest deviation of empirical class shares from `priors` at size `n`.
pub fn prior_deviation(kind: vxlab::datagen::DomainKind, priors: &[f64], n: usize, seed: u64) -> f64 {
    let spec = vxlab::datagen::DomainSpec::for_kind(kind);
    let samples = vxlab::datagen::generate(&spec, n, seed).unwrap();
    priors
        .iter()
        .enumerate()
        .map(|(c, p)| (samples.iter().filter(|s| s.label == c).count() as f64 / n as f64 - p).abs())
        .fold(0.0, f64::max)
}
