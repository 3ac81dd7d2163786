//! Procedural grasp tasks: one object per task, rendered into 128x128 crops
//! that are positive when the object sits at the crop centre and negative
//! when it is pushed off-centre.

mod object;
mod render;

use alloc::vec::Vec;
use core::f32::consts::{FRAC_PI_2, PI};

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::head::{wrap_angle, GraspLabel};
use crate::rng::{derive_seed, stream};
use crate::tensor::{Shape4, Tensor};

pub use object::{generate_object, ObjectSpec, MIN_ASPECT};
pub use render::{augment, render_clean, CHANNELS, CROP, SUPERSAMPLE};

/// Positive crops keep the object centre within this many pixels of the crop centre.
pub const R_POS: f32 = 2.0;
/// Negative crops push the object centre this far out.
pub const R_NEG_MIN: f32 = 16.0;
pub const R_NEG_MAX: f32 = 48.0;

pub const GENERATOR_VERSION: u32 = 1;
pub const SAMPLE_LEN: usize = CHANNELS * CROP * CROP;

const TAG_POSE: u64 = 0x504f_5345;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x0054_5241_494e,
            Split::Val => 0x56_414c,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Provenance {
    pub object_seed: u64,
    /// Rotation as drawn, before wrapping.
    pub theta: f32,
    pub offset: [f32; 2],
    /// Seeds the background and the colour jitter.
    pub augment_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3 x 128 x 128`, CHW, values in `[0, 1]`.
    pub image: Vec<f32>,
    pub label: GraspLabel,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub object_seed: u64,
    pub seed: u64,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl TaskDataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

/// Class of an offset: `Some(true)` inside `R_POS`, `Some(false)` inside the
/// negative band, `None` in the gap or beyond.
pub fn offset_class(offset: [f32; 2]) -> Option<bool> {
    let r = offset[0].hypot(offset[1]);
    if r <= R_POS {
        Some(true)
    } else if (R_NEG_MIN..=R_NEG_MAX).contains(&r) {
        Some(false)
    } else {
        None
    }
}

/// Renders one labelled crop. The class follows from `offset`; `seed` drives
/// the background and, when `augment` is set, the colour jitter.
pub fn render_sample(
    obj: &ObjectSpec,
    theta: f32,
    offset: [f32; 2],
    augment: bool,
    seed: u64,
) -> Result<Sample> {
    if !theta.is_finite() || !offset[0].is_finite() || !offset[1].is_finite() {
        return Err(Error::InvalidLabel("non-finite pose".into()));
    }
    let positive = offset_class(offset).ok_or(Error::OffsetOutOfBand {
        offset: offset[0].hypot(offset[1]),
        class: if offset[0].hypot(offset[1]) < R_NEG_MIN {
            "positive"
        } else {
            "negative"
        },
    })?;
    let mut image = render_clean(obj, theta, offset, seed);
    if augment {
        render::augment(&mut image, seed);
    }
    Ok(Sample {
        image,
        label: GraspLabel::new(positive, wrap_angle(theta))?,
        provenance: Provenance {
            object_seed: obj.seed,
            theta,
            offset,
            augment_seed: seed,
        },
    })
}

/// Sample `index` of `split`; even indices are positive, odd negative.
/// Independent of every other index, so samples can be generated in any order.
pub fn task_sample(obj: &ObjectSpec, split: Split, index: usize, seed: u64) -> Result<Sample> {
    let sample_seed = derive_seed(seed, split.tag(), index as u64);
    let mut rng = stream(sample_seed, TAG_POSE, 0);
    // uniform over (-pi/2, pi/2]
    let theta = FRAC_PI_2 - PI * rng.gen::<f32>();
    let dir = 2.0 * PI * rng.gen::<f32>();
    let r = if index % 2 == 0 {
        R_POS * rng.gen::<f32>().sqrt()
    } else {
        let t: f32 = rng.gen();
        (R_NEG_MIN * R_NEG_MIN + t * (R_NEG_MAX * R_NEG_MAX - R_NEG_MIN * R_NEG_MIN)).sqrt()
    };
    let offset = [r * dir.cos(), r * dir.sin()];
    render_sample(obj, theta, offset, true, sample_seed)
}

/// `sizes = (train, val)` samples with alternating classes.
pub fn generate_task(obj: &ObjectSpec, sizes: (usize, usize), seed: u64) -> Result<TaskDataset> {
    let gen = |split, n| {
        (0..n)
            .map(|i| task_sample(obj, split, i, seed))
            .collect::<Result<Vec<_>>>()
    };
    Ok(TaskDataset {
        object_seed: obj.seed,
        seed,
        train: gen(Split::Train, sizes.0)?,
        val: gen(Split::Val, sizes.1)?,
    })
}

/// Stacks the selected samples into a batch tensor with their labels.
pub fn batch_of(samples: &[Sample], indices: &[usize]) -> Result<(Tensor, Vec<GraspLabel>)> {
    let x = Tensor::stack(
        indices.iter().map(|&i| samples[i].image.as_slice()),
        Shape4::new(1, CHANNELS, CROP, CROP),
    )?;
    Ok((x, indices.iter().map(|&i| samples[i].label).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_pose_is_positive_with_zero_angle() {
        let obj = generate_object(3);
        let s = render_sample(&obj, 0.0, [0.0, 0.0], false, 1).unwrap();
        assert!(s.label.positive);
        assert_eq!(s.label.angle, 0.0);
        assert_eq!(s.image.len(), SAMPLE_LEN);
    }

    #[test]
    fn label_angle_is_wrapped() {
        let obj = generate_object(3);
        let s = render_sample(&obj, 2.0, [20.0, 0.0], true, 1).unwrap();
        assert!(!s.label.positive);
        assert!((s.label.angle - (2.0 - PI)).abs() < 1e-6);
    }

    #[test]
    fn offsets_in_the_gap_are_rejected() {
        let obj = generate_object(3);
        for off in [[5.0, 0.0], [0.0, 10.0], [60.0, 0.0]] {
            assert!(matches!(
                render_sample(&obj, 0.0, off, false, 1),
                Err(Error::OffsetOutOfBand { .. })
            ));
        }
    }

    #[test]
    fn objects_are_elongated() {
        for seed in 0..50 {
            let o = generate_object(seed);
            assert!(o.aspect() >= MIN_ASPECT, "seed {seed}: {}", o.aspect());
            assert_eq!(o.colors.len(), o.band_edges.len() + 1);
            assert!((2..=4).contains(&o.colors.len()));
        }
    }
}
