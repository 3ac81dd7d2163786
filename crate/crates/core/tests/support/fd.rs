//! Finite-difference oracles for every hand-written backward kernel, shared
//! by the gradient-check tests and the acceptance suite.
//!
//! Each case draws a small random problem, contracts the kernel output with a
//! random cotangent `r` to get the scalar `<r, f(x)>`, and compares the
//! analytic gradient to central differences of that scalar. The 64-bit check
//! runs the kernels in `f64` throughout. The 32-bit check runs the analytic
//! gradient in `f32` and takes the differences on the `f64` instantiation of
//! the same forward code at the same (rounded) point, so the oracle is not
//! swamped by single-precision cancellation.

// each includer uses a different subset
#![allow(dead_code)]

use rand::Rng;
use sgm_core::head::grasp_loss_raw;
use sgm_core::ops::batchnorm::{
    batch_statistics, batchnorm_backward, batchnorm_normalize, BatchNormParams, BnMode,
};
use sgm_core::ops::conv::{conv2d_backward, conv2d_forward, ConvParams};
use sgm_core::ops::pointwise::{pointwise, pointwise_backward, Pointwise};
use sgm_core::rng::{stream, Rng64};
use sgm_core::{GraspLabel, Real, Shape4, Tensor};

pub const SEEDS: u64 = 100;
pub const TOL_F32: f64 = 1e-3;
pub const TOL_F64: f64 = 1e-6;
const STEP: f64 = 1e-6;

fn random(rng: &mut Rng64, shape: Shape4, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-scale..scale))
}

/// Rounds through `f32` so both precisions see the identical point.
fn round32(t: &Tensor<f64>) -> Tensor<f64> {
    t.map(|v| v as f32 as f64)
}

fn round32_vec(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x as f32 as f64).collect()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|, tiny)`.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Central differences of `f` with respect to every entry of `x`.
fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + STEP;
            let up = f(&probe);
            probe[i] = orig - STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn to_f64s<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|&x| Real::to_f64(x)).collect()
}

struct ConvCase {
    x: Tensor<f64>,
    p: ConvParams<f64>,
    r: Tensor<f64>,
}

fn conv_case(seed: u64) -> ConvCase {
    let mut rng = stream(seed, 0x636f_6e76, 0);
    let kernel = [1usize, 2, 3, 5][rng.gen_range(0..4)];
    let stride = rng.gen_range(1..=2);
    let padding = rng.gen_range(0..=kernel / 2);
    let (n, cin, cout) = (
        rng.gen_range(1..=2),
        rng.gen_range(1..=3),
        rng.gen_range(1..=3),
    );
    let h = rng.gen_range(kernel..kernel + 5);
    let w = rng.gen_range(kernel..kernel + 5);
    let x = random(&mut rng, Shape4::new(n, cin, h, w), 1.0);
    let weight = random(&mut rng, Shape4::new(cout, cin, kernel, kernel), 0.5);
    let bias = (0..cout).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let p = ConvParams::new(weight, bias, stride, padding).unwrap();
    let out = p.output_shape(x.shape()).unwrap();
    let r = random(&mut rng, out, 1.0);
    ConvCase { x, p, r }
}

/// Errors of the input, weight and bias gradients.
fn check_conv<T: Real>(c: &ConvCase) -> [f64; 3] {
    let g = conv2d_backward(&c.x.cast::<T>(), &c.p.cast::<T>(), &c.r.cast::<T>()).unwrap();
    let objective =
        |x: &Tensor<f64>, p: &ConvParams<f64>| dot(&c.r, &conv2d_forward(x, p).unwrap());
    let shape = c.x.shape();
    let nx = numeric_grad(c.x.data(), |v| {
        objective(&Tensor::new(shape, v.to_vec()).unwrap(), &c.p)
    });
    let wshape = c.p.weight.shape();
    let nw = numeric_grad(c.p.weight.data(), |v| {
        let mut p = c.p.clone();
        p.weight = Tensor::new(wshape, v.to_vec()).unwrap();
        objective(&c.x, &p)
    });
    let nb = numeric_grad(&c.p.bias, |v| {
        let mut p = c.p.clone();
        p.bias = v.to_vec();
        objective(&c.x, &p)
    });
    [
        rel_err(&to_f64s(g.input.unwrap().data()), &nx),
        rel_err(&to_f64s(g.weight.data()), &nw),
        rel_err(&to_f64s(&g.bias), &nb),
    ]
}

fn conv_rounded(c: &ConvCase) -> ConvCase {
    let mut p = c.p.clone();
    p.weight = round32(&p.weight);
    p.bias = round32_vec(&p.bias);
    ConvCase {
        x: round32(&c.x),
        p,
        r: round32(&c.r),
    }
}

struct BnCase {
    x: Tensor<f64>,
    p: BatchNormParams<f64>,
    r: Tensor<f64>,
}

fn bn_case(seed: u64) -> BnCase {
    let mut rng = stream(seed, 0x626e, 0);
    // With two values per channel the normalized output is +-1 whatever the
    // input, so the input gradient vanishes and a relative error means
    // nothing; keep at least four.
    let shape = loop {
        let s = Shape4::new(
            rng.gen_range(2..=4),
            rng.gen_range(1..=3),
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
        );
        if s.n * s.plane() >= 4 {
            break s;
        }
    };
    let mut x = random(&mut rng, shape, 1.0);
    // per-channel offsets and scales exercise the mean and variance paths
    for c in 0..shape.c {
        let (shift, scale) = (rng.gen_range(-2.0..2.0), rng.gen_range(0.5..3.0));
        for n in 0..shape.n {
            for v in x.plane_mut(n, c) {
                *v = shift + scale * *v;
            }
        }
    }
    let mut p = BatchNormParams::identity(shape.c);
    for c in 0..shape.c {
        p.gamma[c] = rng.gen_range(0.5..1.5);
        p.beta[c] = rng.gen_range(-0.5..0.5);
        p.running_mean[c] = rng.gen_range(-1.0..1.0);
        p.running_var[c] = rng.gen_range(0.5..2.0);
    }
    let r = random(&mut rng, shape, 1.0);
    BnCase { x, p, r }
}

fn bn_objective(x: &Tensor<f64>, p: &BatchNormParams<f64>, r: &Tensor<f64>, mode: BnMode) -> f64 {
    let stats = match mode {
        BnMode::Train => batch_statistics(x).unwrap(),
        BnMode::Eval => p.running_stats(),
    };
    dot(r, &batchnorm_normalize(x, p, &stats).unwrap())
}

fn check_bn<T: Real>(c: &BnCase, mode: BnMode) -> [f64; 3] {
    let (x, p) = (c.x.cast::<T>(), c.p.cast::<T>());
    let stats = match mode {
        BnMode::Train => batch_statistics(&x).unwrap(),
        BnMode::Eval => p.running_stats(),
    };
    let g = batchnorm_backward(&x, &p, &stats, &c.r.cast::<T>()).unwrap();
    let shape = c.x.shape();
    let nx = numeric_grad(c.x.data(), |v| {
        bn_objective(&Tensor::new(shape, v.to_vec()).unwrap(), &c.p, &c.r, mode)
    });
    let ng = numeric_grad(&c.p.gamma, |v| {
        let mut p = c.p.clone();
        p.gamma = v.to_vec();
        bn_objective(&c.x, &p, &c.r, mode)
    });
    let nb = numeric_grad(&c.p.beta, |v| {
        let mut p = c.p.clone();
        p.beta = v.to_vec();
        bn_objective(&c.x, &p, &c.r, mode)
    });
    [
        rel_err(&to_f64s(g.input.data()), &nx),
        rel_err(&to_f64s(&g.gamma), &ng),
        rel_err(&to_f64s(&g.beta), &nb),
    ]
}

fn check_pointwise<T: Real>(kind: Pointwise, x: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    let g = pointwise_backward(kind, &x.cast::<T>(), &r.cast::<T>()).unwrap();
    let shape = x.shape();
    let n = numeric_grad(x.data(), |v| {
        dot(
            r,
            &pointwise(kind, &Tensor::new(shape, v.to_vec()).unwrap()),
        )
    });
    rel_err(&to_f64s(g.data()), &n)
}

fn random_labels(rng: &mut Rng64, n: usize) -> Vec<GraspLabel> {
    (0..n)
        .map(|_| {
            let angle = std::f32::consts::FRAC_PI_2 - std::f32::consts::PI * rng.gen::<f32>();
            GraspLabel::new(rng.gen_bool(0.5), angle).unwrap()
        })
        .collect()
}

fn check_loss<T: Real>(raw: &Tensor<f64>, labels: &[GraspLabel]) -> f64 {
    let (_, g) = grasp_loss_raw(&raw.cast::<T>(), labels).unwrap();
    let shape = raw.shape();
    let n = numeric_grad(raw.data(), |v| {
        grasp_loss_raw(&Tensor::new(shape, v.to_vec()).unwrap(), labels)
            .unwrap()
            .0
            .total
    });
    rel_err(&to_f64s(g.data()), &n)
}

/// One compared gradient: relative errors in both precisions.
#[derive(Clone, Debug)]
pub struct Check {
    pub what: String,
    pub err_f64: f64,
    pub err_f32: f64,
}

impl Check {
    pub fn passes(&self) -> bool {
        self.err_f64 < TOL_F64 && self.err_f32 < TOL_F32
    }
}

fn checks(kernel: &str, names: &[&str], e64: &[f64], e32: &[f64]) -> Vec<Check> {
    names
        .iter()
        .zip(e64.iter().zip(e32))
        .map(|(n, (&a, &b))| Check {
            what: format!("{kernel} {n}"),
            err_f64: a,
            err_f32: b,
        })
        .collect()
}

pub fn conv_checks(seed: u64) -> Vec<Check> {
    let c = conv_case(seed);
    checks(
        "conv",
        &["input", "weight", "bias"],
        &check_conv::<f64>(&c),
        &check_conv::<f32>(&conv_rounded(&c)),
    )
}

pub fn bn_checks(seed: u64) -> Vec<Check> {
    let c = bn_case(seed);
    let rounded = {
        let mut p = c.p.clone();
        p.gamma = round32_vec(&p.gamma);
        p.beta = round32_vec(&p.beta);
        p.running_mean = round32_vec(&p.running_mean);
        p.running_var = round32_vec(&p.running_var);
        BnCase {
            x: round32(&c.x),
            p,
            r: round32(&c.r),
        }
    };
    let mut out = checks(
        "bn train",
        &["input", "gamma", "beta"],
        &check_bn::<f64>(&c, BnMode::Train),
        &check_bn::<f32>(&rounded, BnMode::Train),
    );
    out.extend(checks(
        "bn eval",
        &["input", "gamma", "beta"],
        &check_bn::<f64>(&c, BnMode::Eval),
        &check_bn::<f32>(&rounded, BnMode::Eval),
    ));
    out
}

pub fn pointwise_checks(seed: u64) -> Vec<Check> {
    let mut rng = stream(seed, 0x7077, 0);
    let shape = Shape4::new(
        rng.gen_range(1..=3),
        rng.gen_range(1..=3),
        rng.gen_range(1..=5),
        rng.gen_range(1..=5),
    );
    // keep ReLU inputs away from the kink so the differences never straddle it
    let x = Tensor::from_fn(shape, |_, _, _, _| {
        let v: f64 = rng.gen_range(0.01..4.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    });
    let r = random(&mut rng, shape, 1.0);
    [Pointwise::Relu, Pointwise::Sigmoid, Pointwise::Tanh]
        .into_iter()
        .map(|kind| Check {
            what: format!("{kind:?}"),
            err_f64: check_pointwise::<f64>(kind, &x, &r),
            err_f32: check_pointwise::<f32>(kind, &round32(&x), &round32(&r)),
        })
        .collect()
}

pub fn loss_checks(seed: u64) -> Vec<Check> {
    let mut rng = stream(seed, 0x6c6f_7373, 0);
    let n = rng.gen_range(1..=8);
    let raw = random(&mut rng, Shape4::new(n, 3, 1, 1), 3.0);
    let labels = random_labels(&mut rng, n);
    vec![Check {
        what: "loss head".into(),
        err_f64: check_loss::<f64>(&raw, &labels),
        err_f32: check_loss::<f32>(&round32(&raw), &labels),
    }]
}

/// Every kernel over every seed.
pub fn all_checks() -> Vec<(u64, Check)> {
    let mut out = Vec::new();
    for seed in 0..SEEDS {
        for f in [conv_checks, bn_checks, pointwise_checks, loss_checks] {
            out.extend(f(seed).into_iter().map(|c| (seed, c)));
        }
    }
    out
}
