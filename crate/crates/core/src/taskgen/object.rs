use alloc::vec::Vec;
use core::f32::consts::PI;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::Rng;

use crate::rng::stream;

const TAG_OBJECT: u64 = 0x4f42_4a45_4354;
pub const MIN_ASPECT: f32 = 1.8;

/// A procedural object: a point-symmetric elongated polygon painted in
/// colour bands across its principal axis.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSpec {
    pub seed: u64,
    /// Outline in the object frame, principal axis along `+u`, counter-clockwise.
    /// Vertex `i + len/2` is the negation of vertex `i`.
    pub outline: Vec<[f32; 2]>,
    /// Fractions of `half_length` at which the colour changes, ascending.
    pub band_edges: Vec<f32>,
    /// One colour per band, innermost first; `band_edges.len() + 1` entries.
    pub colors: Vec<[f32; 3]>,
    pub half_length: f32,
}

impl ObjectSpec {
    /// Extent along the principal axis over extent across it.
    pub fn aspect(&self) -> f32 {
        let (mut u, mut v) = (0.0f32, 0.0f32);
        for p in &self.outline {
            u = u.max(p[0].abs());
            v = v.max(p[1].abs());
        }
        u / v
    }

    /// Colour at object-frame coordinate `u` along the axis.
    pub fn color_at(&self, u: f32) -> [f32; 3] {
        let t = u.abs() / self.half_length;
        let band = self.band_edges.iter().take_while(|&&e| t >= e).count();
        self.colors[band]
    }
}

fn ellipse_radius(a: f32, b: f32, phi: f32) -> f32 {
    let (s, c) = (phi.sin(), phi.cos());
    a * b / ((b * c) * (b * c) + (a * s) * (a * s)).sqrt()
}

fn color_distance(x: &[f32; 3], y: &[f32; 3]) -> f32 {
    x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum()
}

/// Deterministic object from `seed`; aspect ratio is at least [`MIN_ASPECT`].
pub fn generate_object(seed: u64) -> ObjectSpec {
    let mut rng = stream(seed, TAG_OBJECT, 0);
    let half_length = rng.gen_range(30.0f32..42.0);
    let outline = loop {
        let b = half_length / rng.gen_range(2.0f32..3.2);
        let m = rng.gen_range(3usize..=5);
        let mut half: Vec<[f32; 2]> = Vec::with_capacity(m);
        for j in 0..m {
            let (phi, r) = if j == 0 {
                (0.0, half_length)
            } else {
                let phi = PI * (j as f32 + rng.gen_range(-0.3f32..0.3)) / m as f32;
                (
                    phi,
                    ellipse_radius(half_length, b, phi) * rng.gen_range(0.85f32..1.15),
                )
            };
            half.push([r * phi.cos(), r * phi.sin()]);
        }
        let mut outline = half.clone();
        outline.extend(half.iter().map(|p| [-p[0], -p[1]]));
        let spec = ObjectSpec {
            seed,
            outline,
            band_edges: Vec::new(),
            colors: Vec::new(),
            half_length,
        };
        if spec.aspect() >= MIN_ASPECT {
            break spec.outline;
        }
    };

    let k = rng.gen_range(2usize..=4);
    let mut colors: Vec<[f32; 3]> = Vec::with_capacity(k);
    while colors.len() < k {
        let c = [
            rng.gen_range(0.1f32..0.95),
            rng.gen_range(0.1f32..0.95),
            rng.gen_range(0.1f32..0.95),
        ];
        if colors.last().map_or(true, |p| color_distance(p, &c) >= 0.4) {
            colors.push(c);
        }
    }
    let mut band_edges: Vec<f32> = (1..k).map(|_| rng.gen_range(0.2f32..0.9)).collect();
    band_edges.sort_by(|a, b| a.partial_cmp(b).expect("finite edges"));
    ObjectSpec {
        seed,
        outline,
        band_edges,
        colors,
        half_length,
    }
}
