//! Supersampled scanline rasterizer for one crop.

use alloc::vec;
use alloc::vec::Vec;
use core::f32::consts::PI;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::Rng;

use super::object::ObjectSpec;
use crate::rng::stream;

pub const CROP: usize = 128;
pub const CHANNELS: usize = 3;
/// Subsamples per pixel along each axis.
pub const SUPERSAMPLE: usize = 4;

const TAG_BACKGROUND: u64 = 0x4247;
const TAG_AUGMENT: u64 = 0x0041_5547;

/// Smooth two-colour sinusoidal background, grey-ish and kept away from
/// the object's colours.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Background {
    c0: [f32; 3],
    c1: [f32; 3],
    freq: [f32; 2],
    phase: f32,
}

/// Smallest summed channel distance between any background colour and any
/// object colour; keeps the silhouette visible.
const MIN_CONTRAST: f32 = 0.6;
const CONTRAST_TRIES: usize = 64;

fn distance(a: &[f32; 3], b: &[f32; 3]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

impl Background {
    fn sample(seed: u64, palette: &[[f32; 3]]) -> Self {
        let mut rng = stream(seed, TAG_BACKGROUND, 0);
        let (mut c0, mut c1) = ([0.0; 3], [0.0; 3]);
        let mut best = -1.0f32;
        for _ in 0..CONTRAST_TRIES {
            let g = rng.gen_range(0.1f32..0.9);
            let mut a = [0.0; 3];
            let mut b = [0.0; 3];
            for c in 0..CHANNELS {
                a[c] = (g + rng.gen_range(-0.08f32..0.08)).clamp(0.0, 1.0);
                b[c] = (a[c] + rng.gen_range(-0.15f32..0.15)).clamp(0.0, 1.0);
            }
            let contrast = palette
                .iter()
                .map(|p| distance(p, &a).min(distance(p, &b)))
                .fold(f32::INFINITY, f32::min);
            if contrast > best {
                (c0, c1, best) = (a, b, contrast);
            }
            if contrast >= MIN_CONTRAST {
                break;
            }
        }
        let angle = rng.gen_range(0.0f32..PI);
        let wavelength = rng.gen_range(24.0f32..96.0);
        let k = 2.0 * PI / wavelength;
        Self {
            c0,
            c1,
            freq: [k * angle.cos(), k * angle.sin()],
            phase: rng.gen_range(0.0f32..2.0 * PI),
        }
    }

    fn at(&self, x: f32, y: f32) -> [f32; 3] {
        let t = 0.5 + 0.5 * (self.freq[0] * x + self.freq[1] * y + self.phase).sin();
        let mut out = [0.0; 3];
        for c in 0..CHANNELS {
            out[c] = self.c0[c] + (self.c1[c] - self.c0[c]) * t;
        }
        out
    }
}

/// Renders `obj` rotated by `theta` (counter-clockwise on screen) with its
/// centre at crop centre + `offset` (x right, y down), over a background
/// drawn from `seed`. CHW layout, values in `[0, 1]`.
pub fn render_clean(obj: &ObjectSpec, theta: f32, offset: [f32; 2], seed: u64) -> Vec<f32> {
    let plane = CROP * CROP;
    let ss = SUPERSAMPLE;
    let sub = CROP * ss;
    // the outline is point-symmetric, so a half turn renders identically
    let (sin, cos) = crate::head::wrap_angle(theta).sin_cos();
    let cx = CROP as f32 / 2.0 + offset[0];
    let cy = CROP as f32 / 2.0 + offset[1];

    // outline in image coordinates; screen y points down
    let poly: Vec<[f32; 2]> = obj
        .outline
        .iter()
        .map(|&[u, v]| [cx + u * cos - v * sin, cy - (u * sin + v * cos)])
        .collect();

    let mut acc = vec![0.0f32; CHANNELS * plane];
    let mut cover = vec![0u16; plane];
    let mut xs: Vec<f32> = Vec::with_capacity(poly.len());
    for sy in 0..sub {
        let y = (sy as f32 + 0.5) / ss as f32;
        xs.clear();
        for i in 0..poly.len() {
            let p = poly[i];
            let q = poly[(i + 1) % poly.len()];
            if (p[1] <= y && y < q[1]) || (q[1] <= y && y < p[1]) {
                xs.push(p[0] + (y - p[1]) * (q[0] - p[0]) / (q[1] - p[1]));
            }
        }
        xs.sort_by(|a, b| a.partial_cmp(b).expect("finite intersections"));
        let row = sy / ss;
        for span in xs.chunks_exact(2) {
            let j0 = (span[0] * ss as f32 - 0.5).ceil().max(0.0) as usize;
            let j1 = ((span[1] * ss as f32 - 0.5).ceil().max(0.0) as usize).min(sub);
            for j in j0..j1 {
                let x = (j as f32 + 0.5) / ss as f32;
                // inverse rotation to the object frame for the colour band
                let (dx, dy) = (x - cx, cy - y);
                let u = dx * cos + dy * sin;
                let col = obj.color_at(u);
                let px = row * CROP + j / ss;
                cover[px] += 1;
                for c in 0..CHANNELS {
                    acc[c * plane + px] += col[c];
                }
            }
        }
    }

    let bg = Background::sample(seed, &obj.colors);
    let total = (ss * ss) as f32;
    let mut image = vec![0.0f32; CHANNELS * plane];
    for py in 0..CROP {
        for px in 0..CROP {
            let i = py * CROP + px;
            let back = bg.at(px as f32 + 0.5, py as f32 + 0.5);
            let free = total - cover[i] as f32;
            for c in 0..CHANNELS {
                image[c * plane + i] =
                    ((acc[c * plane + i] + free * back[c]) / total).clamp(0.0, 1.0);
            }
        }
    }
    image
}

/// Brightness `x[0.8, 1.2]` and per-channel gain `x[0.9, 1.1]`, clamped to `[0, 1]`.
pub fn augment(image: &mut [f32], seed: u64) {
    let mut rng = stream(seed, TAG_AUGMENT, 0);
    let brightness = rng.gen_range(0.8f32..1.2);
    let plane = image.len() / CHANNELS;
    for c in 0..CHANNELS {
        let g = brightness * rng.gen_range(0.9f32..1.1);
        for v in &mut image[c * plane..(c + 1) * plane] {
            *v = (*v * g).clamp(0.0, 1.0);
        }
    }
}
