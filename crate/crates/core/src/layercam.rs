//! LayerCAM: class activation maps that weight every activation by its
//! own ReLU-gated gradient, `M = ReLU(sum_k ReLU(g_k) * A_k)`, plus the
//! resampling, scaling and overlay needed to look at them.

use std::path::Path;

use crate::datagen::ImageSample;
use crate::error::{Error, Result};
use crate::nn::{CaptureSpec, Group, MiniResNet};
use crate::raster::{save_image, Image};
use crate::tensor::Tensor;
use crate::train::{normalize_batch, Normalization};

/// Blend factor of the heat map over the image.
pub const OVERLAY_ALPHA: f32 = 0.5;
/// Colour of zero attention.
pub const LOW_COLOR: [f32; 3] = [0.0, 0.0, 1.0];
/// Colour of full attention.
pub const HIGH_COLOR: [f32; 3] = [1.0, 0.0, 0.0];

#[derive(Clone, Debug, PartialEq)]
pub struct ClassActivationMap {
    pub stage: Group,
    pub class: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub image_id: Option<String>,
}

impl ClassActivationMap {
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }
}

/// Map values from `[K, H, W]` activations and gradients.
pub fn cam_values(a: &Tensor, g: &Tensor) -> Result<(usize, usize, Vec<f32>)> {
    if a.shape() != g.shape() || a.ndim() != 3 {
        return Err(Error::ShapeMismatch {
            op: "layercam (activation vs gradient, [K, H, W])",
            left: a.shape().to_vec(),
            right: g.shape().to_vec(),
        });
    }
    let (k, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let hw = h * w;
    let mut acc = vec![0.0f64; hw];
    for c in 0..k {
        let (ac, gc) = (&a.data()[c * hw..(c + 1) * hw], &g.data()[c * hw..(c + 1) * hw]);
        for ((m, &av), &gv) in acc.iter_mut().zip(ac).zip(gc) {
            if gv > 0.0 {
                *m += gv as f64 * av as f64;
            }
        }
    }
    Ok((h, w, acc.into_iter().map(|v| v.max(0.0) as f32).collect()))
}

pub fn compute_cam(a: &Tensor, g: &Tensor, stage: Group, class: usize) -> Result<ClassActivationMap> {
    let (height, width, values) = cam_values(a, g)?;
    Ok(ClassActivationMap {
        stage,
        class,
        height,
        width,
        values,
        image_id: None,
    })
}

/// Bilinear resampling with half-pixel centres (`align_corners = false`).
pub fn upsample_bilinear(map: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Result<Vec<f32>> {
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 || map.len() != h * w {
        return Err(Error::invalid(format!(
            "upsample_bilinear: {}-element map as {h}x{w} to {out_h}x{out_w}",
            map.len()
        )));
    }
    let taps = |out: usize, size: usize| -> Vec<(usize, usize, f32)> {
        let scale = size as f32 / out as f32;
        (0..out)
            .map(|i| {
                let src = ((i as f32 + 0.5) * scale - 0.5).clamp(0.0, (size - 1) as f32);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(size - 1);
                (lo, hi, src - lo as f32)
            })
            .collect()
    };
    let (ys, xs) = (taps(out_h, h), taps(out_w, w));
    let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            let top = lerp(map[y0 * w + x0], map[y0 * w + x1], tx);
            let bottom = lerp(map[y1 * w + x0], map[y1 * w + x1], tx);
            out.push(lerp(top, bottom, ty));
        }
    }
    Ok(out)
}

/// Min-max scaling to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_map(map: &[f32]) -> Vec<f32> {
    let lo = map.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return vec![0.0; map.len()];
    }
    map.iter().map(|&v| (v - lo) / (hi - lo)).collect()
}

/// Linear blue-to-red ramp.
pub fn colormap(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    [0, 1, 2].map(|c| LOW_COLOR[c] + (HIGH_COLOR[c] - LOW_COLOR[c]) * t)
}

/// `alpha * colormap(map) + (1 - alpha) * image`.
pub fn overlay(map01: &[f32], image: &Image) -> Result<Image> {
    if map01.len() != image.height * image.width {
        return Err(Error::invalid(format!(
            "overlay: {}-element map for a {}x{} image",
            map01.len(),
            image.height,
            image.width
        )));
    }
    let mut data = Vec::with_capacity(image.data.len());
    for (&m, px) in map01.iter().zip(image.data.chunks(3)) {
        let c = colormap(m);
        for ch in 0..3 {
            data.push(OVERLAY_ALPHA * c[ch] + (1.0 - OVERLAY_ALPHA) * px[ch]);
        }
    }
    Image::new(image.height, image.width, data)
}

pub fn export_image(image: &Image, path: &Path) -> Result<()> {
    save_image(image, path)
}

/// Upsamples, normalizes and overlays a map onto its source image.
pub fn render(cam: &ClassActivationMap, image: &Image) -> Result<Image> {
    let up = upsample_bilinear(&cam.values, cam.height, cam.width, image.height, image.width)?;
    overlay(&normalize_map(&up), image)
}

/// Per-sample maps and logits for a set of stages.
#[derive(Clone, Debug)]
pub struct SampleCams {
    pub logits: Vec<f32>,
    pub cams: Vec<ClassActivationMap>,
}

/// Eval-mode LayerCAM of `class` at each stage for every sample.
pub fn layer_cams(
    model: &MiniResNet,
    samples: &[ImageSample],
    stages: &[Group],
    class: usize,
    norm: &Normalization,
) -> Result<Vec<SampleCams>> {
    let spec = CaptureSpec::new(stages.iter().copied())?;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(crate::train::EVAL_BATCH) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let batch = normalize_batch(&refs, None, norm)?;
        let (logits, capture) = model.forward_eval(&batch, &spec)?;
        let capture = model.backward_from_class_score(capture, class)?;
        let nc = model.num_classes();
        for (i, sample) in chunk.iter().enumerate() {
            let mut cams = Vec::with_capacity(stages.len());
            for &stage in stages {
                let sc = capture.get(stage).ok_or(Error::StaleCapture)?;
                let grad = sc.gradient.as_ref().ok_or(Error::StaleCapture)?;
                let mut cam = compute_cam(&slice0(&sc.activation, i)?, &slice0(grad, i)?, stage, class)?;
                cam.image_id = Some(sample.id.clone());
                cams.push(cam);
            }
            out.push(SampleCams {
                logits: logits.data()[i * nc..(i + 1) * nc].to_vec(),
                cams,
            });
        }
    }
    Ok(out)
}

/// Item `i` of the leading axis.
fn slice0(t: &Tensor, i: usize) -> Result<Tensor> {
    let per: usize = t.shape()[1..].iter().product();
    Tensor::new(t.shape()[1..].to_vec(), t.data()[i * per..(i + 1) * per].to_vec())
}

pub fn cam_file_name(image_id: &str, stage: Group, class: usize) -> String {
    format!("{image_id}_{}_{class}.png", stage.name())
}
