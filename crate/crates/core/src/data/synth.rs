use super::{Kind, SigImage, CANVAS_HEIGHT, CANVAS_WIDTH};
use crate::error::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const BASELINE: f64 = 0.62;
const FORGER_TAG: u64 = 0x5DEE_CE66_D1CE_4E5B;

/// Parametric handwriting style of one synthetic writer.
///
/// Stroke control points live in normalized canvas coordinates (x to the
/// right, y downwards, both in `[0, 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct WriterStyle {
    pub seed: u64,
    /// Glyph sequence: one polyline of control points per pen stroke.
    pub strokes: Vec<Vec<[f64; 2]>>,
    /// Horizontal shear applied around the baseline.
    pub slant: f64,
    /// Pen width in pixels.
    pub thickness: f64,
    /// Standard deviation of per-sample control-point noise (normalized units).
    pub jitter: f64,
    pub scale: f64,
    pub ink: f64,
    /// Amplitude in pixels of the low-pass wobble added along strokes.
    pub tremor: f64,
}

/// Deterministic writer style from `seed`.
pub fn gen_writer(seed: u64) -> WriterStyle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = BASELINE + rng.random_range(-0.04..0.04);
    let letters = rng.random_range(4..=7);
    let width = 0.78 / letters as f64;

    let mut main = vec![[0.1, base]];
    let mut x = 0.1;
    for _ in 0..letters {
        let h = rng.random_range(0.14..0.38);
        match rng.random_range(0..3) {
            0 => {
                main.push([x + 0.5 * width, base - h]);
                main.push([x + width, base]);
            }
            1 => {
                main.push([x + 0.75 * width, base - h]);
                main.push([x + 0.2 * width, base - 0.8 * h]);
                main.push([x + width, base]);
            }
            _ => {
                main.push([x + 0.35 * width, base - 0.6 * h]);
                main.push([x + 0.6 * width, base + rng.random_range(0.1..0.2)]);
                main.push([x + width, base]);
            }
        }
        x += width;
    }
    let mut strokes = vec![main];
    if rng.random_bool(0.5) {
        let top = base - rng.random_range(0.35..0.5);
        strokes.push(vec![[0.08, base], [0.1, top], [0.16, top + 0.05], [0.14, base]]);
    }
    if rng.random_bool(0.5) {
        let y = base + rng.random_range(0.12..0.2);
        strokes.push(vec![
            [0.15, y],
            [0.45, y + rng.random_range(-0.04..0.04)],
            [0.85, y - rng.random_range(0.0..0.06)],
        ]);
    }

    WriterStyle {
        seed,
        strokes,
        slant: rng.random_range(-0.4..0.4),
        thickness: rng.random_range(1.5..2.5),
        jitter: rng.random_range(0.004..0.008),
        scale: rng.random_range(0.85..1.0),
        ink: rng.random_range(0.85..1.0),
        tremor: 0.0,
    }
}

/// The forger assigned to a writer: same glyph sequence, a different hand.
fn forger_of(style: &WriterStyle) -> WriterStyle {
    let mut rng = ChaCha8Rng::seed_from_u64(style.seed ^ FORGER_TAG);
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let thickness = if rng.random_bool(0.5) {
        style.thickness * rng.random_range(0.6..0.75)
    } else {
        style.thickness * rng.random_range(1.35..1.6)
    };
    WriterStyle {
        seed: style.seed ^ FORGER_TAG,
        strokes: style.strokes.clone(),
        slant: style.slant + sign * rng.random_range(0.25..0.45),
        thickness: thickness.max(1.0),
        jitter: style.jitter * rng.random_range(2.5..4.0),
        scale: style.scale * rng.random_range(0.9..1.1),
        ink: rng.random_range(0.85..1.0),
        tremor: rng.random_range(0.4..0.8),
    }
}

/// Renders one sample on the model canvas.
///
/// Genuine samples use the writer's own style; forged samples re-trace the
/// writer's glyph sequence in the forger's style with larger jitter.
pub fn render(style: &WriterStyle, kind: Kind, sample_seed: u64) -> Result<SigImage> {
    let hand = match kind {
        Kind::Genuine => style.clone(),
        Kind::Forged => forger_of(style),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let (h, w) = (CANVAS_HEIGHT, CANVAS_WIDTH);

    let shift = [0.008 * unit.sample(&mut rng), 0.008 * unit.sample(&mut rng)];
    let slant = hand.slant + 0.03 * unit.sample(&mut rng);
    let radius = 0.5 * hand.thickness * (1.0 + 0.05 * unit.sample(&mut rng)).max(0.5);

    let mut canvas = SigImage::blank(h, w);
    for stroke in &hand.strokes {
        let controls: Vec<[f64; 2]> = stroke
            .iter()
            .map(|&[x, y]| {
                let jx = x + hand.jitter * unit.sample(&mut rng);
                let jy = y + hand.jitter * unit.sample(&mut rng);
                let sx = 0.5 + (jx - 0.5) * hand.scale + slant * (BASELINE - jy) + shift[0];
                let sy = BASELINE + (jy - BASELINE) * hand.scale + shift[1];
                [sx * w as f64, sy * h as f64]
            })
            .collect();
        let mut path = catmull_rom(&controls, 10);
        if hand.tremor > 0.0 {
            let mut off = [0.0, 0.0];
            for p in &mut path {
                off[0] = 0.6 * off[0] + 0.4 * 1.5 * hand.tremor * unit.sample(&mut rng);
                off[1] = 0.6 * off[1] + 0.4 * 1.5 * hand.tremor * unit.sample(&mut rng);
                p[0] += off[0];
                p[1] += off[1];
            }
        }
        for seg in path.windows(2) {
            stamp_segment(&mut canvas, seg[0], seg[1], radius, hand.ink);
        }
    }
    Ok(canvas)
}

/// Uniform Catmull-Rom spline through `pts` with `steps` samples per span.
fn catmull_rom(pts: &[[f64; 2]], steps: usize) -> Vec<[f64; 2]> {
    if pts.len() < 2 {
        return pts.to_vec();
    }
    let at = |i: isize| pts[i.clamp(0, pts.len() as isize - 1) as usize];
    let mut out = Vec::with_capacity((pts.len() - 1) * steps + 1);
    for i in 0..pts.len() as isize - 1 {
        let (p0, p1, p2, p3) = (at(i - 1), at(i), at(i + 1), at(i + 2));
        for s in 0..steps {
            let t = s as f64 / steps as f64;
            let (t2, t3) = (t * t, t * t * t);
            let mut q = [0.0; 2];
            for d in 0..2 {
                q[d] = 0.5
                    * (2.0 * p1[d]
                        + (p2[d] - p0[d]) * t
                        + (2.0 * p0[d] - 5.0 * p1[d] + 4.0 * p2[d] - p3[d]) * t2
                        + (3.0 * p1[d] - p0[d] - 3.0 * p2[d] + p3[d]) * t3);
            }
            out.push(q);
        }
    }
    out.push(pts[pts.len() - 1]);
    out
}

/// Anti-aliased capsule from `a` to `b`; coverage combines by maximum.
fn stamp_segment(img: &mut SigImage, a: [f64; 2], b: [f64; 2], radius: f64, ink: f64) {
    let reach = radius + 1.0;
    let x0 = (a[0].min(b[0]) - reach).floor().max(0.0) as usize;
    let y0 = (a[1].min(b[1]) - reach).floor().max(0.0) as usize;
    let x1 = ((a[0].max(b[0]) + reach).ceil() as isize).min(img.width as isize - 1);
    let y1 = ((a[1].max(b[1]) + reach).ceil() as isize).min(img.height as isize - 1);
    if x1 < 0 || y1 < 0 {
        return;
    }
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    for py in y0..=y1 as usize {
        for px in x0..=x1 as usize {
            let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
            let t = if len2 > 0.0 {
                (((cx - a[0]) * dx + (cy - a[1]) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (ex, ey) = (cx - a[0] - t * dx, cy - a[1] - t * dy);
            let cov = (radius + 0.5 - (ex * ex + ey * ey).sqrt()).clamp(0.0, 1.0);
            if cov > 0.0 {
                let v = &mut img.pixels[py * img.width + px];
                *v = v.max(ink * cov);
            }
        }
    }
}
