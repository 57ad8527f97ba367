use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Image;

pub(crate) type Rgb = [f32; 3];
pub(crate) type Point = (f32, f32);

impl Image {
    pub(crate) fn filled(size: usize, f: impl Fn(f32, f32) -> Rgb) -> Image {
        let mut data = Vec::with_capacity(size * size * 3);
        for y in 0..size {
            for x in 0..size {
                let c = f(x as f32 + 0.5, y as f32 + 0.5);
                data.extend_from_slice(&c);
            }
        }
        Image {
            height: size,
            width: size,
            data,
        }
    }

    /// Blends `color` into the image with per-pixel opacity `mask`.
    pub(crate) fn blend(&mut self, mask: &Mask, color: Rgb) {
        for (px, &a) in self.data.chunks_mut(3).zip(&mask.alpha) {
            if a > 0.0 {
                for (v, c) in px.iter_mut().zip(color) {
                    *v = *v * (1.0 - a) + c * a;
                }
            }
        }
    }

    pub(crate) fn add_noise(&mut self, rng: &mut ChaCha8Rng, amplitude: f32) {
        for v in &mut self.data {
            *v += rng.random_range(-amplitude..=amplitude);
        }
    }

    pub(crate) fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Coverage buffer; overlapping strokes take the maximum, so a shape is
/// blended exactly once.
pub(crate) struct Mask {
    size: usize,
    alpha: Vec<f32>,
}

impl Mask {
    pub(crate) fn new(size: usize) -> Self {
        Mask {
            size,
            alpha: vec![0.0; size * size],
        }
    }

    fn splat(&mut self, x0: f32, y0: f32, x1: f32, y1: f32, coverage: impl Fn(f32, f32) -> f32) {
        let lo_x = x0.floor().max(0.0) as usize;
        let lo_y = y0.floor().max(0.0) as usize;
        let hi_x = (x1.ceil().max(0.0) as usize).min(self.size);
        let hi_y = (y1.ceil().max(0.0) as usize).min(self.size);
        for y in lo_y..hi_y {
            for x in lo_x..hi_x {
                let a = coverage(x as f32 + 0.5, y as f32 + 0.5);
                let slot = &mut self.alpha[y * self.size + x];
                if a > *slot {
                    *slot = a.min(1.0);
                }
            }
        }
    }

    /// Anti-aliased thick segment.
    pub(crate) fn segment(&mut self, a: Point, b: Point, width: f32) {
        let r = width / 2.0 + 1.0;
        self.splat(
            a.0.min(b.0) - r,
            a.1.min(b.1) - r,
            a.0.max(b.0) + r,
            a.1.max(b.1) + r,
            |px, py| (width / 2.0 + 0.5 - dist_to_segment((px, py), a, b)).clamp(0.0, 1.0),
        );
    }

    pub(crate) fn polyline(&mut self, points: &[Point], width: f32) {
        for w in points.windows(2) {
            self.segment(w[0], w[1], width);
        }
    }

    /// Anti-aliased filled disc.
    pub(crate) fn disc(&mut self, c: Point, radius: f32) {
        let r = radius + 1.0;
        self.splat(c.0 - r, c.1 - r, c.0 + r, c.1 + r, |px, py| {
            let d = ((px - c.0).powi(2) + (py - c.1).powi(2)).sqrt();
            (radius + 0.5 - d).clamp(0.0, 1.0)
        });
    }

    /// Anti-aliased annulus of the given stroke width.
    pub(crate) fn ring(&mut self, c: Point, radius: f32, width: f32) {
        let r = radius + width + 1.0;
        self.splat(c.0 - r, c.1 - r, c.0 + r, c.1 + r, |px, py| {
            let d = ((px - c.0).powi(2) + (py - c.1).powi(2)).sqrt();
            (width / 2.0 + 0.5 - (d - radius).abs()).clamp(0.0, 1.0)
        });
    }

    /// Filled convex polygon (vertices in either winding order).
    pub(crate) fn polygon(&mut self, pts: &[Point]) {
        let (mut x0, mut y0, mut x1, mut y1) = (f32::MAX, f32::MAX, f32::MIN, f32::MIN);
        for p in pts {
            x0 = x0.min(p.0);
            y0 = y0.min(p.1);
            x1 = x1.max(p.0);
            y1 = y1.max(p.1);
        }
        let n = pts.len();
        let area2: f32 = (0..n)
            .map(|i| {
                let (a, b) = (pts[i], pts[(i + 1) % n]);
                a.0 * b.1 - b.0 * a.1
            })
            .sum();
        let orient = area2.signum();
        self.splat(x0 - 1.0, y0 - 1.0, x1 + 1.0, y1 + 1.0, |px, py| {
            let inside = (0..n)
                .map(|i| {
                    let (a, b) = (pts[i], pts[(i + 1) % n]);
                    let cross = (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0);
                    let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt().max(1e-6);
                    orient * cross / len
                })
                .fold(f32::MAX, f32::min);
            (inside + 0.5).clamp(0.0, 1.0)
        });
    }
}

pub(crate) fn dist_to_segment(p: Point, a: Point, b: Point) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

pub(crate) fn random_color(rng: &mut ChaCha8Rng) -> Rgb {
    [rng.random(), rng.random(), rng.random()]
}

/// A random color differing from `other` by at least `min_dist` in L1.
pub(crate) fn contrasting_color(rng: &mut ChaCha8Rng, other: Rgb, min_dist: f32) -> Rgb {
    loop {
        let c = random_color(rng);
        let d: f32 = c.iter().zip(other).map(|(a, b)| (a - b).abs()).sum();
        if d >= min_dist {
            return c;
        }
    }
}

/// Sum of a few random low-frequency cosines, roughly in `[-1, 1]`.
pub(crate) struct SmoothField {
    waves: Vec<(f32, f32, f32, f32)>,
}

impl SmoothField {
    pub(crate) fn new(rng: &mut ChaCha8Rng, count: usize, max_freq: f32) -> Self {
        let waves = (0..count)
            .map(|_| {
                (
                    rng.random_range(-max_freq..max_freq),
                    rng.random_range(-max_freq..max_freq),
                    rng.random_range(0.0..std::f32::consts::TAU),
                    rng.random_range(0.5..1.0) / count as f32,
                )
            })
            .collect();
        SmoothField { waves }
    }

    pub(crate) fn at(&self, x: f32, y: f32) -> f32 {
        self.waves
            .iter()
            .map(|&(fx, fy, ph, amp)| amp * (fx * x + fy * y + ph).cos())
            .sum()
    }
}
