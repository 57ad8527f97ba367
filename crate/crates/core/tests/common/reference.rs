//! Straight-line f64 forwards of every primitive and of the network tail.
//! Used as the function under finite differences, so that the oracle's own
//! rounding stays far below the tolerance being checked.

use vxlab::{Group, MiniResNet, Tensor};

const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn of(t: &Tensor) -> Arr {
        Arr {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    /// `sum(r * self)`.
    pub fn dot(&self, r: &Tensor) -> f64 {
        assert_eq!(self.shape, r.shape());
        self.data.iter().zip(r.data()).map(|(&a, &b)| a * b as f64).sum()
    }

    /// Largest `|self - t| / max(1, |self|)`.
    pub fn deviation(&self, t: &Tensor) -> f64 {
        assert_eq!(self.shape, t.shape());
        self.data
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b as f64).abs() / a.abs().max(1.0))
            .fold(0.0, f64::max)
    }
}

pub fn conv(x: &Arr, w: &Arr, b: Option<&Arr>, stride: usize, pad: usize) -> Arr {
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (o, kh, kw) = (w.shape[0], w.shape[2], w.shape[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for bi in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data[oc]);
                    for ic in 0..c {
                        for ky in 0..kh {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                if xx < 0 || xx >= wd as isize {
                                    continue;
                                }
                                acc += w.data[((oc * c + ic) * kh + ky) * kw + kx]
                                    * x.data[((bi * c + ic) * h + y as usize) * wd + xx as usize];
                            }
                        }
                    }
                    out[((bi * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Arr {
        shape: vec![n, o, oh, ow],
        data: out,
    }
}

/// Batch statistics (biased variance) when `running` is `None`, otherwise
/// the given mean and variance.
pub fn batchnorm(x: &Arr, gamma: &Arr, beta: &Arr, running: Option<(&Arr, &Arr)>) -> Arr {
    let (n, c) = (x.shape[0], x.shape[1]);
    let plane = x.shape[2] * x.shape[3];
    let mut out = x.data.clone();
    for ch in 0..c {
        let vals = || (0..n).flat_map(move |b| (0..plane).map(move |i| (b * c + ch) * plane + i));
        let (mean, var) = match running {
            Some((m, v)) => (m.data[ch], v.data[ch]),
            None => {
                let count = (n * plane) as f64;
                let mean = vals().map(|i| x.data[i]).sum::<f64>() / count;
                let var = vals().map(|i| (x.data[i] - mean).powi(2)).sum::<f64>() / count;
                (mean, var)
            }
        };
        let inv = 1.0 / (var + BN_EPS).sqrt();
        for i in vals() {
            out[i] = gamma.data[ch] * (x.data[i] - mean) * inv + beta.data[ch];
        }
    }
    Arr {
        shape: x.shape.clone(),
        data: out,
    }
}

pub fn relu(x: &Arr) -> Arr {
    Arr {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

pub fn add(a: &Arr, b: &Arr) -> Arr {
    assert_eq!(a.shape, b.shape);
    Arr {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    }
}

/// `[N, C, H, W] -> [N, C]`.
pub fn gap(x: &Arr) -> Arr {
    let plane = x.shape[2] * x.shape[3];
    Arr {
        shape: vec![x.shape[0], x.shape[1]],
        data: x.data.chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect(),
    }
}

pub fn linear(x: &Arr, w: &Arr, b: &Arr) -> Arr {
    let (n, i) = (x.shape[0], x.shape[1]);
    let o = w.shape[0];
    let mut out = Vec::with_capacity(n * o);
    for r in 0..n {
        for k in 0..o {
            out.push(b.data[k] + (0..i).map(|j| x.data[r * i + j] * w.data[k * i + j]).sum::<f64>());
        }
    }
    Arr {
        shape: vec![n, o],
        data: out,
    }
}

/// Mean cross-entropy of softmax(logits) against `labels`.
pub fn softmax_ce(logits: &Arr, labels: &[usize]) -> f64 {
    let c = logits.shape[1];
    let total: f64 = logits
        .data
        .chunks(c)
        .zip(labels)
        .map(|(row, &l)| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            lse - row[l]
        })
        .sum();
    total / labels.len() as f64
}

fn param(model: &MiniResNet, name: &str) -> Arr {
    Arr::of(&model.tensor(name).unwrap_or_else(|| panic!("missing tensor {name}")))
}

fn bn_eval(model: &MiniResNet, prefix: &str, x: &Arr) -> Arr {
    let (m, v) = (param(model, &format!("{prefix}.running_mean")), param(model, &format!("{prefix}.running_var")));
    batchnorm(
        x,
        &param(model, &format!("{prefix}.gamma")),
        &param(model, &format!("{prefix}.beta")),
        Some((&m, &v)),
    )
}

/// Eval-mode residual block of stage `group`; the first stage keeps the
/// resolution, every later one halves it.
fn block(model: &MiniResNet, group: Group, x: &Arr) -> Arr {
    let p = group.name();
    let stride = if group == Group::Layer1 { 1 } else { 2 };
    let h = conv(x, &param(model, &format!("{p}.conv1.weight")), None, stride, 1);
    let h = relu(&bn_eval(model, &format!("{p}.bn1"), &h));
    let h = conv(&h, &param(model, &format!("{p}.conv2.weight")), None, 1, 1);
    let h = bn_eval(model, &format!("{p}.bn2"), &h);
    let skip = match model.tensor(&format!("{p}.shortcut.conv.weight")) {
        Some(w) => bn_eval(model, &format!("{p}.shortcut.bn"), &conv(x, &Arr::of(&w), None, stride, 0)),
        None => x.clone(),
    };
    relu(&add(&h, &skip))
}

/// Eval-mode logits from the output activation of `stage`.
pub fn net_from(model: &MiniResNet, stage: Group, activation: &Arr) -> Arr {
    let mut x = activation.clone();
    for &g in &Group::STAGES[stage.index() + 1..] {
        x = block(model, g, &x);
    }
    linear(&gap(&x), &param(model, "fc.weight"), &param(model, "fc.bias"))
}

/// Eval-mode logits of a normalized image batch.
pub fn net(model: &MiniResNet, batch: &Arr) -> Arr {
    let x = conv(batch, &param(model, "stem.conv.weight"), None, 2, 1);
    let x = relu(&bn_eval(model, "stem.bn", &x));
    net_from(model, Group::Stem, &x)
}
