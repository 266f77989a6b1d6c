//! Central finite-difference checks of every differentiable op and of the
//! composite FRRU. The scalar loss is `sum(w * out)` with fixed random `w`,
//! accumulated in f64; perturbations are applied to the f32 values.
//!
//! Error per tensor is `max |analytic - numeric| / max |analytic|`, i.e. the
//! deviation relative to the gradient's scale, so that f32 round-off in
//! near-zero components does not dominate. Op-level inputs are kept away
//! from ReLU kinks and max-pool ties; composite units are handled by the
//! kink test in `scaled_error`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use crate::frrn::{ConvUnit, Frru, FrruSpec, ResidualUnit};
use crate::layers::{
    add, concat_channels, split_channels, upsample_nearest, upsample_nearest_backward, BatchNorm2d, Conv2d, MaxPool,
    Mode, Relu,
};
use crate::{Module, Param, Tensor};

/// Perturbation applied to each f32 component.
pub const EPS: f32 = 1e-3;
/// Largest acceptable scaled error.
pub const TOL: f64 = 1e-3;

/// Wraps parameter-free state so it fits the harness.
struct Op<T>(T);

impl<T> Module for Op<T> {
    fn visit(&mut self, _: &mut dyn FnMut(&mut Param)) {}
    fn visit_ref(&self, _: &mut dyn FnMut(&Param)) {}
}

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so ReLU kinks are never crossed.
fn away_from_zero(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m: f32 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::from_vec(shape, v).unwrap()
}

/// Distinct values at least 0.01 apart so max-pool ties are never crossed.
fn well_separated(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n).map(|i| i as f32 * 0.01 - n as f32 * 0.005).collect();
    v.shuffle(rng);
    Tensor::from_vec(shape, v).unwrap()
}

fn loss(outs: &[Tensor], weights: &[Tensor]) -> f64 {
    outs.iter()
        .zip(weights)
        .map(|(o, w)| o.data().iter().zip(w.data()).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>())
        .sum()
}

/// Backward and forward one-sided differences.
fn one_sided(plus: f64, base: f64, minus: f64) -> (f64, f64) {
    ((base - minus) / EPS as f64, (plus - base) / EPS as f64)
}

/// Each component is compared against the central difference. A
/// perturbation that crosses a ReLU kink or a max-pool switch leaves only one
/// side smooth, and the analytic value is then a one-sided derivative, so the
/// closest of the central and both one-sided differences is used.
fn scaled_error(analytic: &[f32], numeric: &[(f64, f64)]) -> f64 {
    let scale = numeric
        .iter()
        .map(|&(a, b)| 0.5 * (a + b))
        .zip(analytic)
        .fold(0.0f64, |m, (n, &a)| m.max(n.abs()).max(a.abs() as f64))
        .max(1e-6);
    let mut worst = 0.0f64;
    for (&a, &(minus, plus)) in analytic.iter().zip(numeric) {
        let a = a as f64;
        let err = (a - 0.5 * (minus + plus)).abs().min((a - minus).abs()).min((a - plus).abs());
        worst = worst.max(err);
    }
    worst / scale
}

fn set_param(m: &mut dyn Module, index: usize, j: usize, delta: f32) {
    let mut k = 0;
    m.visit(&mut |p| {
        if k == index {
            p.value[j] += delta;
        }
        k += 1;
    });
}

/// Returns the worst scaled error over all inputs and trainable parameters.
fn check<M: Module>(
    model: &mut M,
    inputs: Vec<Tensor>,
    rng: &mut ChaCha8Rng,
    forward: impl Fn(&mut M, &[Tensor], bool) -> Vec<Tensor>,
    backward: impl Fn(&mut M, &[Tensor]) -> Vec<Tensor>,
) -> f64 {
    let outs = forward(model, &inputs, true);
    let weights: Vec<Tensor> = outs.iter().map(|o| random(o.shape(), rng)).collect();
    model.zero_grad();
    let input_grads = backward(model, &weights);
    let mut analytic_params = Vec::new();
    model.visit_ref(&mut |p| analytic_params.push((p.trainable, p.grad.clone())));

    let mut worst = 0.0f64;
    let mut inputs = inputs;
    let base = loss(&forward(model, &inputs, false), &weights);
    for t in 0..inputs.len() {
        let mut numeric = vec![(0.0, 0.0); inputs[t].len()];
        for (j, num) in numeric.iter_mut().enumerate() {
            let orig = inputs[t].data()[j];
            inputs[t].data_mut()[j] = orig + EPS;
            let lp = loss(&forward(model, &inputs, false), &weights);
            inputs[t].data_mut()[j] = orig - EPS;
            let lm = loss(&forward(model, &inputs, false), &weights);
            inputs[t].data_mut()[j] = orig;
            *num = one_sided(lp, base, lm);
        }
        worst = worst.max(scaled_error(input_grads[t].data(), &numeric));
    }
    for (pi, (trainable, grad)) in analytic_params.iter().enumerate() {
        if !trainable {
            continue;
        }
        let mut numeric = vec![(0.0, 0.0); grad.len()];
        for (j, num) in numeric.iter_mut().enumerate() {
            set_param(model, pi, j, EPS);
            let lp = loss(&forward(model, &inputs, false), &weights);
            set_param(model, pi, j, -2.0 * EPS);
            let lm = loss(&forward(model, &inputs, false), &weights);
            set_param(model, pi, j, EPS);
            *num = one_sided(lp, base, lm);
        }
        worst = worst.max(scaled_error(grad, &numeric));
    }
    worst
}

fn conv3x3(rng: &mut ChaCha8Rng) -> f64 {
    let mut conv = Conv2d::new("c", 2, 2, 3, true, rng).unwrap();
    let x = random([1, 2, 4, 4], rng);
    check(&mut conv, vec![x], rng, |m, x, r| vec![m.forward(&x[0], r).unwrap()], |m, g| vec![m.backward(&g[0]).unwrap()])
}

fn conv1x1(rng: &mut ChaCha8Rng) -> f64 {
    let mut conv = Conv2d::new("c", 3, 2, 1, true, rng).unwrap();
    let x = random([2, 3, 3, 4], rng);
    check(&mut conv, vec![x], rng, |m, x, r| vec![m.forward(&x[0], r).unwrap()], |m, g| vec![m.backward(&g[0]).unwrap()])
}

fn batchnorm_train(rng: &mut ChaCha8Rng) -> f64 {
    let mut bn = BatchNorm2d::new("bn", 2);
    bn.gamma.value = vec![rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5)];
    bn.beta.value = vec![rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
    let x = random([2, 2, 3, 3], rng);
    check(
        &mut bn,
        vec![x],
        rng,
        |m, x, r| vec![m.forward(&x[0], Mode::Train, r).unwrap()],
        |m, g| vec![m.backward(&g[0]).unwrap()],
    )
}

fn batchnorm_eval(rng: &mut ChaCha8Rng) -> f64 {
    let mut bn = BatchNorm2d::new("bn", 2);
    bn.running_mean.value = vec![0.3, -0.2];
    bn.running_var.value = vec![0.5, 2.0];
    let x = random([1, 2, 3, 3], rng);
    check(
        &mut bn,
        vec![x],
        rng,
        |m, x, r| vec![m.forward(&x[0], Mode::Eval, r).unwrap()],
        |m, g| vec![m.backward(&g[0]).unwrap()],
    )
}

fn relu(rng: &mut ChaCha8Rng) -> f64 {
    let x = away_from_zero([1, 2, 4, 4], rng);
    check(
        &mut Op(Relu::default()),
        vec![x],
        rng,
        |m, x, r| vec![m.0.forward(x[0].clone(), r)],
        |m, g| vec![m.0.backward(g[0].clone()).unwrap()],
    )
}

fn maxpool(rng: &mut ChaCha8Rng) -> f64 {
    let factor = if rng.gen_bool(0.5) { 2 } else { 4 };
    let x = well_separated([2, 2, 8, 8], rng);
    check(
        &mut Op(MaxPool::new(factor)),
        vec![x],
        rng,
        |m, x, r| vec![m.0.forward(&x[0], r).unwrap()],
        |m, g| vec![m.0.backward(&g[0]).unwrap()],
    )
}

fn upsample(rng: &mut ChaCha8Rng) -> f64 {
    let x = random([1, 2, 3, 3], rng);
    check(
        &mut Op(()),
        vec![x],
        rng,
        |_, x, _| vec![upsample_nearest(&x[0], 2)],
        |_, g| vec![upsample_nearest_backward(&g[0], 2).unwrap()],
    )
}

fn concat_and_add(rng: &mut ChaCha8Rng) -> f64 {
    let a = random([2, 1, 3, 3], rng);
    let b = random([2, 2, 3, 3], rng);
    let c = random([2, 3, 3, 3], rng);
    check(
        &mut Op(()),
        vec![a, b, c],
        rng,
        |_, x, _| vec![add(&concat_channels(&x[0], &x[1]).unwrap(), &x[2]).unwrap()],
        |_, g| {
            let (ga, gb) = split_channels(&g[0], 1).unwrap();
            vec![ga, gb, g[0].clone()]
        },
    )
}

fn conv_unit_train(rng: &mut ChaCha8Rng) -> f64 {
    let mut unit = ConvUnit::new("u", 2, 3, 3, false, rng).unwrap();
    let x = random([2, 2, 4, 4], rng);
    check(
        &mut unit,
        vec![x],
        rng,
        |m, x, r| vec![m.forward(&x[0], Mode::Train, r).unwrap()],
        |m, g| vec![m.backward(g[0].clone()).unwrap()],
    )
}

fn residual_unit_eval(rng: &mut ChaCha8Rng) -> f64 {
    let mut unit = ResidualUnit::new("r", 2, rng).unwrap();
    let x = random([1, 2, 4, 4], rng);
    check(
        &mut unit,
        vec![x],
        rng,
        |m, x, r| vec![m.forward(&x[0], Mode::Eval, r).unwrap()],
        |m, g| vec![m.backward(g[0].clone()).unwrap()],
    )
}

fn frru_eval(rng: &mut ChaCha8Rng) -> f64 {
    let spec = FrruSpec { in_pooled: 4, pooled_channels: 4, residual_channels: 4, pooling_factor: 2 };
    let mut frru = Frru::new("f", spec, rng).unwrap();
    let z = well_separated([1, 4, 8, 8], rng);
    let y = random([1, 4, 4, 4], rng);
    check(
        &mut frru,
        vec![z, y],
        rng,
        |m, x, r| {
            let (z, y) = m.forward(&x[0], &x[1], Mode::Eval, r).unwrap();
            vec![z, y]
        },
        |m, g| {
            let (gz, gy) = m.backward(&g[0], &g[1]).unwrap();
            vec![gz, gy]
        },
    )
}



pub type Case = fn(&mut ChaCha8Rng) -> f64;

/// Every differentiable op and the composite FRRU.
pub const CASES: [(&str, Case); 11] = [
    ("conv3x3", conv3x3),
    ("conv1x1", conv1x1),
    ("batchnorm train", batchnorm_train),
    ("batchnorm eval", batchnorm_eval),
    ("relu", relu),
    ("maxpool", maxpool),
    ("upsample", upsample),
    ("concat/add", concat_and_add),
    ("conv unit train", conv_unit_train),
    ("residual unit eval", residual_unit_eval),
    ("frru eval", frru_eval),
];

/// Worst scaled error of `case` over seeds `0..seeds`, with its seed.
pub fn worst_over_seeds(case: Case, seeds: u64) -> (f64, u64) {
    (0..seeds)
        .map(|s| (case(&mut ChaCha8Rng::seed_from_u64(s)), s))
        .fold((0.0, 0), |w, c| if c.0 > w.0 { c } else { w })
}
