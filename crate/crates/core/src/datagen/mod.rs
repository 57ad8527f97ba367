//! Seeded procedural image domains.
//!
//! Three generators with disjoint label spaces:
//!
//! * **source**: ten classes of textured geometric primitives;
//! * **intermediate**: fundus-like fields whose vessels radiate from a
//!   bright disc with small per-step turning, graded 0-4 by the number of
//!   bright lesion spots;
//! * **target**: mucosa-like fields where benign vessels are smooth and
//!   malignant vessels are tortuous tangles.
//!
//! Generation is a pure function of `(domain, n, seed)`: image `i` is drawn
//! from its own stream seeded by `hash(seed, i)`, and labels are assigned by
//! a seeded shuffle of exact per-class quotas.

mod domains;
mod render;

use std::f32::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::save_image;
pub use crate::raster::Image;
use crate::rng::{mix_seed, stream};

pub const IMAGE_SIZE: usize = 64;

/// A vessel centerline in pixel coordinates.
pub type Polyline = Vec<(f32, f32)>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainKind {
    Source,
    Intermediate,
    Target,
}

impl DomainKind {
    pub const ALL: [DomainKind; 3] = [
        DomainKind::Source,
        DomainKind::Intermediate,
        DomainKind::Target,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DomainKind::Source => "source",
            DomainKind::Intermediate => "intermediate",
            DomainKind::Target => "target",
        }
    }

    fn salt(self) -> u64 {
        match self {
            DomainKind::Source => 0x5352_4300,
            DomainKind::Intermediate => 0x494e_5400,
            DomainKind::Target => 0x5447_5400,
        }
    }
}

impl fmt::Display for DomainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DomainKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DomainKind::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown domain `{s}` (expected source, intermediate or target)"
                ))
            })
    }
}

/// Generator knobs. Angles are in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum GeneratorParams {
    Shapes {
        noise: f32,
    },
    Fundus {
        vessel_count: (usize, usize),
        max_turn_deg: f32,
        /// Inclusive lesion-count range per severity grade.
        lesion_counts: [(usize, usize); 5],
    },
    Mucosa {
        benign_vessels: (usize, usize),
        /// Per-vessel constant bend plus per-step jitter bound the benign turn.
        benign_bend_deg: f32,
        benign_jitter_deg: f32,
        malignant_vessels: (usize, usize),
        malignant_turn_deg: (f32, f32),
        /// Probability a tangle keeps turning the same way, which closes loops.
        malignant_turn_persistence: f64,
    },
}

/// One image domain: its label space, class priors and generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub kind: DomainKind,
    pub generator_id: String,
    pub labels: Vec<String>,
    pub priors: Vec<f64>,
    pub image_size: usize,
    pub params: GeneratorParams,
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// Grade counts of the fundus reference dataset (no DR .. proliferative).
pub const FUNDUS_GRADE_COUNTS: [u32; 5] = [25810, 2443, 5292, 873, 708];
/// Benign and malignant counts of the endoscopy reference dataset.
pub const MUCOSA_CLASS_COUNTS: [u32; 2] = [7657, 3487];

fn normalized(counts: &[u32]) -> Vec<f64> {
    let total: u32 = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

impl DomainSpec {
    pub fn source() -> Self {
        DomainSpec {
            kind: DomainKind::Source,
            generator_id: "shapes-v1".into(),
            labels: strings(&domains::SOURCE_CLASSES),
            priors: vec![0.1; 10],
            image_size: IMAGE_SIZE,
            params: GeneratorParams::Shapes { noise: 0.03 },
        }
    }

    pub fn intermediate() -> Self {
        DomainSpec {
            kind: DomainKind::Intermediate,
            generator_id: "fundus-radial-v1".into(),
            labels: strings(&["no-dr", "mild", "moderate", "severe", "proliferative"]),
            priors: normalized(&FUNDUS_GRADE_COUNTS),
            image_size: IMAGE_SIZE,
            params: GeneratorParams::Fundus {
                vessel_count: (6, 9),
                max_turn_deg: 8.0,
                lesion_counts: [(0, 0), (1, 3), (4, 8), (9, 15), (16, 24)],
            },
        }
    }

    pub fn target() -> Self {
        DomainSpec {
            kind: DomainKind::Target,
            generator_id: "mucosa-tortuous-v1".into(),
            labels: strings(&["benign", "malignant"]),
            priors: normalized(&MUCOSA_CLASS_COUNTS),
            image_size: IMAGE_SIZE,
            params: GeneratorParams::Mucosa {
                benign_vessels: (4, 6),
                benign_bend_deg: 4.0,
                benign_jitter_deg: 3.0,
                malignant_vessels: (3, 5),
                malignant_turn_deg: (35.0, 90.0),
                malignant_turn_persistence: 0.7,
            },
        }
    }

    pub fn for_kind(kind: DomainKind) -> Self {
        match kind {
            DomainKind::Source => Self::source(),
            DomainKind::Intermediate => Self::intermediate(),
            DomainKind::Target => Self::target(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.priors.len() != self.labels.len() {
            return Err(Error::invalid(format!(
                "{}: {} priors for {} labels",
                self.kind,
                self.priors.len(),
                self.labels.len()
            )));
        }
        let sum: f64 = self.priors.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.priors.iter().any(|&p| p < 0.0) {
            return Err(Error::invalid(format!(
                "{}: class priors must be non-negative and sum to 1 (sum {sum})",
                self.kind
            )));
        }
        if self.image_size != IMAGE_SIZE {
            return Err(Error::invalid(format!(
                "{}: only {IMAGE_SIZE}x{IMAGE_SIZE} images are supported",
                self.kind
            )));
        }
        Ok(())
    }

    fn min_samples(&self) -> usize {
        match self.kind {
            DomainKind::Source => 10,
            DomainKind::Intermediate => 5,
            DomainKind::Target => 2,
        }
    }
}

/// Checks that the domains pairwise differ in generator and label space.
pub fn check_heterogeneous(specs: &[DomainSpec]) -> Result<()> {
    for (i, a) in specs.iter().enumerate() {
        for b in &specs[i + 1..] {
            if a.generator_id == b.generator_id {
                return Err(Error::invalid(format!(
                    "{} and {} share generator {}",
                    a.kind, b.kind, a.generator_id
                )));
            }
            if a.labels == b.labels {
                return Err(Error::invalid(format!(
                    "{} and {} share a label space",
                    a.kind, b.kind
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: Image,
    pub label: usize,
    pub domain: DomainKind,
    /// Seed of this image's private random stream.
    pub seed: u64,
    /// Vessel centerlines drawn into the image (empty for the source domain).
    pub vessels: Vec<Polyline>,
    /// Lesion spots drawn (intermediate domain only).
    pub lesions: usize,
}

/// Exact per-class quotas (largest remainder, ties to the lower class),
/// shuffled by `seed`.
fn assign_labels(priors: &[f64], n: usize, seed: u64) -> Vec<usize> {
    let raw: Vec<f64> = priors.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..priors.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &c in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[c] += 1;
        rest -= 1;
    }
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
        .collect();
    labels.shuffle(&mut stream(seed, 0x4c41_4245_4c53));
    labels
}

/// Generates `n` samples of `spec`.
pub fn generate(spec: &DomainSpec, n: usize, seed: u64) -> Result<Vec<ImageSample>> {
    spec.validate()?;
    if n < spec.min_samples() {
        return Err(Error::invalid(format!(
            "{} needs at least {} samples, got {n}",
            spec.kind,
            spec.min_samples()
        )));
    }
    let domain_seed = mix_seed(seed, spec.kind.salt());
    let labels = assign_labels(&spec.priors, n, domain_seed);
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let image_seed = mix_seed(domain_seed, i as u64);
            let r = domains::render(spec, label, image_seed);
            ImageSample {
                id: format!("{}-{:05}", spec.kind, i),
                image: r.image,
                label,
                domain: spec.kind,
                seed: image_seed,
                vessels: r.vessels,
                lesions: r.lesions,
            }
        })
        .collect())
}

pub fn gen_source(n: usize, seed: u64) -> Result<Vec<ImageSample>> {
    generate(&DomainSpec::source(), n, seed)
}

pub fn gen_intermediate(n: usize, seed: u64) -> Result<Vec<ImageSample>> {
    generate(&DomainSpec::intermediate(), n, seed)
}

pub fn gen_target(n: usize, seed: u64) -> Result<Vec<ImageSample>> {
    generate(&DomainSpec::target(), n, seed)
}

/// Mean absolute turning angle per interior vertex, in radians.
pub fn tortuosity(polyline: &[(f32, f32)]) -> Result<f64> {
    if polyline.len() < 3 {
        return Err(Error::invalid(format!(
            "tortuosity needs at least 3 points, got {}",
            polyline.len()
        )));
    }
    let total: f64 = polyline
        .windows(3)
        .map(|w| {
            let a = ((w[1].1 - w[0].1) as f64).atan2((w[1].0 - w[0].0) as f64);
            let b = ((w[2].1 - w[1].1) as f64).atan2((w[2].0 - w[1].0) as f64);
            wrap_angle(b - a).abs()
        })
        .sum();
    Ok(total / (polyline.len() - 2) as f64)
}

fn wrap_angle(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let r = (a + std::f64::consts::PI).rem_euclid(tau) - std::f64::consts::PI;
    if r <= -std::f64::consts::PI {
        r + tau
    } else {
        r
    }
}

pub(crate) fn deg(v: f32) -> f32 {
    v * PI / 180.0
}

#[derive(Debug, Serialize)]
struct ManifestRow<'a> {
    id: &'a str,
    file: String,
    label: usize,
    domain: &'a str,
    seed: u64,
}

/// Writes one PNG per sample plus `manifest.csv` into `dir`.
pub fn dump_dataset(samples: &[ImageSample], dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest)?;
    for s in samples {
        let file = format!("{}.png", s.id);
        save_image(&s.image, &dir.join(&file))?;
        w.serialize(ManifestRow {
            id: &s.id,
            file,
            label: s.label,
            domain: s.domain.name(),
            seed: s.seed,
        })?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}
