use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::render::{contrasting_color, random_color, Mask, Point, Rgb, SmoothField};
use super::{deg, DomainSpec, GeneratorParams, Image, Polyline};

pub(super) const SOURCE_CLASSES: [&str; 10] = [
    "discs", "bars", "checker", "gradient", "noise", "rings", "scribble", "curves", "dots",
    "polygons",
];

const STEP: f32 = 2.5;

pub(super) struct Rendered {
    pub image: Image,
    pub vessels: Vec<Polyline>,
    pub lesions: usize,
}

pub(super) fn render(spec: &DomainSpec, label: usize, seed: u64) -> Rendered {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = spec.image_size;
    let (mut image, vessels, lesions) = match &spec.params {
        GeneratorParams::Shapes { noise } => {
            let mut img = shapes(&mut rng, size, label);
            img.add_noise(&mut rng, *noise);
            (img, Vec::new(), 0)
        }
        GeneratorParams::Fundus {
            vessel_count,
            max_turn_deg,
            lesion_counts,
        } => fundus(&mut rng, size, label, *vessel_count, *max_turn_deg, lesion_counts),
        GeneratorParams::Mucosa {
            benign_vessels,
            benign_bend_deg,
            benign_jitter_deg,
            malignant_vessels,
            malignant_turn_deg,
            malignant_turn_persistence,
        } => {
            let vessels = if label == 0 {
                benign_vessels_walks(
                    &mut rng,
                    size,
                    *benign_vessels,
                    *benign_bend_deg,
                    *benign_jitter_deg,
                )
            } else {
                tangles(
                    &mut rng,
                    size,
                    *malignant_vessels,
                    *malignant_turn_deg,
                    *malignant_turn_persistence,
                )
            };
            (mucosa(&mut rng, size, &vessels), vessels, 0)
        }
    };
    image.clamp01();
    Rendered {
        image,
        vessels,
        lesions,
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: Rgb, amount: f32) -> Rgb {
    base.map(|c| c + rng.random_range(-amount..=amount))
}

fn inside(p: Point, lo: f32, hi: f32) -> bool {
    p.0 >= lo && p.0 <= hi && p.1 >= lo && p.1 <= hi
}

/// Random walk of fixed step length. `turn` supplies each heading change;
/// the walk stops early when `keep` rejects the next point.
fn walk(
    rng: &mut ChaCha8Rng,
    start: Point,
    heading: f32,
    steps: usize,
    mut turn: impl FnMut(&mut ChaCha8Rng) -> f32,
    keep: impl Fn(Point) -> bool,
) -> Polyline {
    let mut pts = vec![start];
    let mut h = heading;
    let mut p = start;
    for i in 0..steps {
        if i > 0 {
            h += turn(rng);
        }
        let next = (p.0 + STEP * h.cos(), p.1 + STEP * h.sin());
        if !keep(next) {
            break;
        }
        pts.push(next);
        p = next;
    }
    pts
}

/// Fully saturated hue for class `label`, evenly spaced around the wheel.
fn class_tint(label: usize) -> Rgb {
    let h = label as f32 / SOURCE_CLASSES.len() as f32 * 6.0;
    [5.0f32, 3.0, 1.0].map(|k| {
        let t = (h + k).rem_euclid(6.0);
        1.0 - t.min(4.0 - t).clamp(0.0, 1.0)
    })
}

fn shapes(rng: &mut ChaCha8Rng, size: usize, label: usize) -> Image {
    // Half class tint, half random, so color is a weak cue next to texture.
    let tint = class_tint(label);
    let base = random_color(rng);
    let bg = [0, 1, 2].map(|i| 0.5 * (base[i] + tint[i]));
    let fg = contrasting_color(rng, bg, 0.9);
    let s = size as f32;
    let theta: f32 = rng.random_range(0.0..std::f32::consts::PI);
    let (ct, st) = (theta.cos(), theta.sin());
    let mut mask = Mask::new(size);
    let mut img = Image::filled(size, |_, _| bg);
    match SOURCE_CLASSES[label] {
        "discs" => {
            for _ in 0..rng.random_range(1..=3) {
                let r = rng.random_range(6.0..14.0);
                let c = (rng.random_range(r..s - r), rng.random_range(r..s - r));
                mask.disc(c, r);
            }
        }
        "bars" => {
            let period = rng.random_range(6.0..12.0f32);
            let duty = rng.random_range(0.3..0.6f32);
            let phase = rng.random_range(0.0..period);
            img = Image::filled(size, |x, y| {
                let u = (x * ct + y * st + phase).rem_euclid(period) / period;
                if u < duty {
                    fg
                } else {
                    bg
                }
            });
        }
        "checker" => {
            let period = rng.random_range(6.0..14.0f32);
            img = Image::filled(size, |x, y| {
                let u = ((x * ct + y * st) / period).floor() as i64;
                let v = ((-x * st + y * ct) / period).floor() as i64;
                if (u + v).rem_euclid(2) == 0 {
                    fg
                } else {
                    bg
                }
            });
        }
        "gradient" => {
            img = Image::filled(size, |x, y| {
                let t = (((x - s / 2.0) * ct + (y - s / 2.0) * st) / s + 0.5).clamp(0.0, 1.0);
                [0, 1, 2].map(|i| bg[i] * (1.0 - t) + fg[i] * t)
            });
        }
        "noise" => {
            let field = SmoothField::new(rng, 12, 0.6);
            img = Image::filled(size, |x, y| {
                let t = (field.at(x, y) * 1.5 + 0.5).clamp(0.0, 1.0);
                [0, 1, 2].map(|i| bg[i] * (1.0 - t) + fg[i] * t)
            });
            img.add_noise(rng, 0.12);
        }
        "rings" => {
            let c = (rng.random_range(16.0..48.0), rng.random_range(16.0..48.0));
            let spacing = rng.random_range(5.0..9.0f32);
            let width = rng.random_range(1.5..3.0);
            let mut r = rng.random_range(2.0..spacing);
            while r < s {
                mask.ring(c, r, width);
                r += spacing;
            }
        }
        "scribble" => {
            for _ in 0..rng.random_range(2..=4) {
                let start = (rng.random_range(12.0..52.0), rng.random_range(12.0..52.0));
                let mut sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let heading = rng.random_range(0.0..std::f32::consts::TAU);
                let steps = rng.random_range(15..30);
                let pts = walk(
                    rng,
                    start,
                    heading,
                    steps,
                    |r| {
                        if r.random_bool(0.35) {
                            sign = -sign;
                        }
                        sign * deg(r.random_range(30.0..100.0))
                    },
                    |p| inside(p, 2.0, s - 2.0),
                );
                mask.polyline(&pts, rng.random_range(1.0..2.5));
            }
        }
        "curves" => {
            for _ in 0..rng.random_range(3..=6) {
                let start = (rng.random_range(4.0..60.0), rng.random_range(4.0..60.0));
                let bend = deg(rng.random_range(-5.0..5.0));
                let heading = rng.random_range(0.0..std::f32::consts::TAU);
                let steps = rng.random_range(12..26);
                let pts = walk(
                    rng,
                    start,
                    heading,
                    steps,
                    |r| bend + deg(r.random_range(-1.0..1.0)),
                    |p| inside(p, 0.0, s),
                );
                mask.polyline(&pts, rng.random_range(1.0..2.5));
            }
        }
        "dots" => {
            let spacing = rng.random_range(8.0..12.0f32);
            let r = rng.random_range(1.5..3.0);
            let off = (rng.random_range(0.0..spacing), rng.random_range(0.0..spacing));
            let mut y = off.1;
            while y < s {
                let mut x = off.0;
                while x < s {
                    mask.disc((x + rng.random_range(-1.0..1.0), y + rng.random_range(-1.0..1.0)), r);
                    x += spacing;
                }
                y += spacing;
            }
        }
        "polygons" => {
            for _ in 0..rng.random_range(1..=3) {
                let c = (rng.random_range(14.0..50.0), rng.random_range(14.0..50.0));
                let r = rng.random_range(7.0..14.0f32);
                let k = rng.random_range(3..=4);
                let rot = rng.random_range(0.0..std::f32::consts::TAU);
                let pts: Vec<Point> = (0..k)
                    .map(|i| {
                        let a = rot + i as f32 * std::f32::consts::TAU / k as f32;
                        (c.0 + r * a.cos(), c.1 + r * a.sin())
                    })
                    .collect();
                mask.polygon(&pts);
            }
        }
        other => unreachable!("unknown source class {other}"),
    }
    img.blend(&mask, fg);
    img
}

fn fundus(
    rng: &mut ChaCha8Rng,
    size: usize,
    grade: usize,
    vessel_count: (usize, usize),
    max_turn_deg: f32,
    lesion_counts: &[(usize, usize); 5],
) -> (Image, Vec<Polyline>, usize) {
    let s = size as f32;
    let center = (s / 2.0 + rng.random_range(-2.0..2.0), s / 2.0 + rng.random_range(-2.0..2.0));
    let radius = rng.random_range(27.0..30.0f32);
    let base = jitter(rng, [0.78, 0.38, 0.16], 0.05);
    let field = SmoothField::new(rng, 4, 0.15);
    let mut img = Image::filled(size, |x, y| {
        let d = ((x - center.0).powi(2) + (y - center.1).powi(2)).sqrt();
        let cover = (radius + 0.5 - d).clamp(0.0, 1.0);
        let shade = 1.0 - 0.35 * (d / radius).powi(2) + 0.05 * field.at(x, y);
        [0, 1, 2].map(|i| 0.02 * (1.0 - cover) + base[i] * shade * cover)
    });
    let in_field = move |p: Point| {
        ((p.0 - center.0).powi(2) + (p.1 - center.1).powi(2)).sqrt() < radius - 1.5
    };

    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let disc = (
        center.0 + side * rng.random_range(11.0..15.0),
        center.1 + rng.random_range(-3.0..3.0),
    );
    let disc_r = rng.random_range(4.0..5.5f32);

    let max_turn = deg(max_turn_deg);
    let n = rng.random_range(vessel_count.0..=vessel_count.1);
    let mut vessels = Vec::new();
    let offset = rng.random_range(0.0..std::f32::consts::TAU);
    for k in 0..n {
        let heading = offset + k as f32 * std::f32::consts::TAU / n as f32 + deg(rng.random_range(-12.0..12.0));
        let start = (disc.0 + disc_r * heading.cos(), disc.1 + disc_r * heading.sin());
        let main = walk(rng, start, heading, 40, |r| r.random_range(-max_turn..max_turn), in_field);
        if main.len() > 8 && rng.random_bool(0.6) {
            let at = rng.random_range(3..main.len() - 3);
            let dir = (main[at].1 - main[at - 1].1).atan2(main[at].0 - main[at - 1].0);
            let fork = if rng.random_bool(0.5) { 1.0 } else { -1.0 } * deg(rng.random_range(25.0..40.0));
            let branch = walk(rng, main[at], dir + fork, 20, |r| r.random_range(-max_turn..max_turn), in_field);
            if branch.len() >= 3 {
                vessels.push(branch);
            }
        }
        if main.len() >= 3 {
            vessels.push(main);
        }
    }
    let vessel_color = jitter(rng, [0.45, 0.10, 0.07], 0.04);
    for v in &vessels {
        let len = v.len() as f32;
        let w0 = rng.random_range(2.0..2.6f32);
        let mut mask = Mask::new(size);
        for (i, seg) in v.windows(2).enumerate() {
            let width = w0 - (w0 - 1.0) * i as f32 / len;
            mask.segment(seg[0], seg[1], width);
        }
        img.blend(&mask, vessel_color);
    }

    let mut disc_mask = Mask::new(size);
    disc_mask.disc(disc, disc_r);
    img.blend(&disc_mask, jitter(rng, [0.98, 0.86, 0.55], 0.03));

    let (lo, hi) = lesion_counts[grade];
    let count = rng.random_range(lo..=hi);
    let mut lesions = Mask::new(size);
    let mut placed = 0;
    while placed < count {
        let a = rng.random_range(0.0..std::f32::consts::TAU);
        let d = radius * rng.random_range(0.0f32..1.0).sqrt() * 0.85;
        let p = (center.0 + d * a.cos(), center.1 + d * a.sin());
        if ((p.0 - disc.0).powi(2) + (p.1 - disc.1).powi(2)).sqrt() < disc_r + 3.0 {
            continue;
        }
        lesions.disc(p, rng.random_range(0.8..1.8));
        placed += 1;
    }
    img.blend(&lesions, jitter(rng, [0.96, 0.92, 0.40], 0.03));
    img.add_noise(rng, 0.02);
    (img, vessels, count)
}

fn benign_vessels_walks(
    rng: &mut ChaCha8Rng,
    size: usize,
    count: (usize, usize),
    bend_deg: f32,
    jitter_deg: f32,
) -> Vec<Polyline> {
    let s = size as f32;
    let n = rng.random_range(count.0..=count.1);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let start = (rng.random_range(6.0..s - 6.0), rng.random_range(6.0..s - 6.0));
        let bend = deg(rng.random_range(-bend_deg..=bend_deg));
        let jit = deg(jitter_deg);
        // |turn| <= bend + jitter and at most 24 steps keep the total heading
        // change below 180 degrees, so a vessel can never cross itself.
        let heading = rng.random_range(0.0..std::f32::consts::TAU);
        let steps = rng.random_range(16..=24);
        let pts = walk(
            rng,
            start,
            heading,
            steps,
            |r| bend + r.random_range(-jit..=jit),
            |p| inside(p, 0.0, s),
        );
        if pts.len() >= 6 {
            out.push(pts);
        }
    }
    out
}

fn tangles(
    rng: &mut ChaCha8Rng,
    size: usize,
    count: (usize, usize),
    turn_deg: (f32, f32),
    persistence: f64,
) -> Vec<Polyline> {
    let s = size as f32;
    let n = rng.random_range(count.0..=count.1);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let start = (rng.random_range(14.0..s - 14.0), rng.random_range(14.0..s - 14.0));
        let mut sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let heading = rng.random_range(0.0..std::f32::consts::TAU);
        let steps = rng.random_range(18..=28);
        let pts = walk(
            rng,
            start,
            heading,
            steps,
            |r| {
                if !r.random_bool(persistence) {
                    sign = -sign;
                }
                sign * deg(r.random_range(turn_deg.0..=turn_deg.1))
            },
            |p| inside(p, 1.0, s - 1.0),
        );
        if pts.len() >= 6 {
            out.push(pts);
        }
    }
    out
}

fn mucosa(rng: &mut ChaCha8Rng, size: usize, vessels: &[Polyline]) -> Image {
    let base = jitter(rng, [0.87, 0.63, 0.62], 0.04);
    let field = SmoothField::new(rng, 5, 0.2);
    let mut img = Image::filled(size, |x, y| {
        let f = field.at(x, y) * 0.06;
        [base[0] + f, base[1] + f * 0.8, base[2] + f * 0.8]
    });
    let color = jitter(rng, [0.55, 0.17, 0.22], 0.05);
    let mut mask = Mask::new(size);
    for v in vessels {
        mask.polyline(v, rng.random_range(1.2..2.4));
    }
    img.blend(&mask, color);
    img.add_noise(rng, 0.02);
    img
}
