#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rchc::autodiff::{Graph, Tensor, Var};
use rchc::Result;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-3;
/// Denominator floor so components that are zero analytically compare on
/// an absolute scale far below the finite-difference noise that matters.
pub const FD_FLOOR: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            scale * e
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values bounded away from zero, for the relu kink.
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let mut t = normal(rng, shape, 1.0);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1f64.copysign(*v);
        }
    }
    t
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn eval(build: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>, inputs: &[Tensor], track: bool) -> (Graph, Vec<Var>, Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_requires_grad(track))).collect();
    let out = build(&mut g, &vars).expect("forward");
    (g, vars, out)
}

/// Largest element-wise relative error between the tape gradient of the
/// scalar `build(inputs)` and central differences, over every input.
pub fn max_grad_error(build: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>, inputs: &[Tensor]) -> f64 {
    let (mut g, vars, out) = eval(build, inputs, true);
    assert!(g.value(out).is_scalar(), "gradient check needs a scalar output");
    g.backward(out).expect("backward");
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).expect("leaf gradient").to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let f = |delta: f64| {
                let mut shifted = inputs.to_vec();
                shifted[k].data_mut()[i] += delta;
                let (g, _, out) = eval(build, &shifted, false);
                g.value(out).item()
            };
            let numeric = (f(FD_STEP) - f(-FD_STEP)) / (2.0 * FD_STEP);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

/// Reduces a non-scalar output to a scalar with fixed random weights so
/// every output element contributes a distinct gradient.
pub fn weighted_sum(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// Random probability rows from softmax of normal logits.
pub fn random_probs(rng: &mut impl Rng, n: usize, k: usize, scale: f64) -> Tensor {
    rchc::autodiff::softmax(&normal(rng, &[n, k], scale)).unwrap()
}
