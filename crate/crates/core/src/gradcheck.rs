//! Central finite-difference checks of every differentiable tape operation.

use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{arg_err, Result};
use crate::model::{Arch, SegModel};
use crate::ops::{self, ConvGeom};
use crate::rng::DetRng;
use crate::tensor::Tensor;

/// Operations covered by [`check_op`].
pub const OPS: [&str; 13] = [
    "conv2d",
    "conv2d-strided",
    "linear",
    "relu",
    "upsample-bilinear",
    "softmax",
    "weighted-cross-entropy",
    "kl-divergence",
    "add",
    "scale",
    "sum",
    "dot",
    "model",
];

/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op: &'static str,
    pub instances: usize,
    pub checked: usize,
    pub max_rel_err: f64,
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// One random instance: differentiable inputs plus a scalar loss builder.
struct Instance {
    inputs: Vec<Tensor>,
    build: alloc::boxed::Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>,
}

fn randn(shape: &[usize], scale: f64, rng: &mut DetRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * rng.normal()).collect()).expect("shape product")
}

/// Values bounded away from the ReLU kink by more than the FD step.
fn away_from_zero(shape: &[usize], rng: &mut DetRng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.uniform_range(0.05, 1.5);
            if rng.bernoulli(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape, data).expect("shape product")
}

fn distribution(shape: &[usize], rng: &mut DetRng) -> Tensor {
    let axis = shape.len() - 1;
    ops::softmax(&randn(shape, 1.0, rng), axis).expect("non-empty axis")
}

fn onehot(rows: usize, k: usize, rng: &mut DetRng) -> Vec<f64> {
    let mut d = vec![0.0; rows * k];
    for r in 0..rows {
        d[r * k + rng.below(k)] = 1.0;
    }
    d
}

fn dims(rng: &mut DetRng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn project(tape: &mut Tape, out: Var, proj: &Tensor) -> Result<Var> {
    tape.dot(out, proj.clone())
}

fn conv_instance(rng: &mut DetRng, geom: ConvGeom) -> Instance {
    let (h, w, cin, cout, k) = (dims(rng, 3, 6), dims(rng, 3, 6), dims(rng, 1, 3), dims(rng, 1, 3), 3);
    let x = randn(&[h, w, cin], 1.0, rng);
    let wt = randn(&[k, k, cin, cout], 0.5, rng);
    let b = randn(&[cout], 0.5, rng);
    let out = ops::conv2d(&x, &wt, &b, geom).expect("valid conv");
    let proj = randn(out.shape(), 1.0, rng);
    Instance {
        inputs: vec![x, wt, b],
        build: alloc::boxed::Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], geom)?;
            project(t, y, &proj)
        }),
    }
}

fn instance(op: &str, rng: &mut DetRng) -> Result<Instance> {
    let boxed = |f: alloc::boxed::Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>, inputs| Instance { inputs, build: f };
    Ok(match op {
        "conv2d" => conv_instance(rng, ConvGeom { stride: 1, padding: 0 }),
        "conv2d-strided" => conv_instance(rng, ConvGeom { stride: 2, padding: 1 }),
        "linear" => {
            let (r, din, dout) = (dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 4));
            let proj = randn(&[r, 2, dout], 1.0, rng);
            let inputs = vec![randn(&[r, 2, din], 1.0, rng), randn(&[din, dout], 1.0, rng), randn(&[dout], 1.0, rng)];
            boxed(
                alloc::boxed::Box::new(move |t, v| {
                    let y = t.linear(v[0], v[1], v[2])?;
                    project(t, y, &proj)
                }),
                inputs,
            )
        }
        "relu" => {
            let shape = [dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 3)];
            let proj = randn(&shape, 1.0, rng);
            let inputs = vec![away_from_zero(&shape, rng)];
            boxed(
                alloc::boxed::Box::new(move |t, v| {
                    let y = t.relu(v[0]);
                    project(t, y, &proj)
                }),
                inputs,
            )
        }
        "upsample-bilinear" => {
            let (h, w, c) = (dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 3));
            let (oh, ow) = (dims(rng, h, 9), dims(rng, w, 9));
            let proj = randn(&[oh, ow, c], 1.0, rng);
            let inputs = vec![randn(&[h, w, c], 1.0, rng)];
            boxed(
                alloc::boxed::Box::new(move |t, v| {
                    let y = t.upsample_bilinear(v[0], oh, ow)?;
                    project(t, y, &proj)
                }),
                inputs,
            )
        }
        "softmax" => {
            let shape = [dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 2, 5)];
            let axis = rng.below(3);
            let proj = randn(&shape, 1.0, rng);
            let inputs = vec![randn(&shape, 2.0, rng)];
            boxed(
                alloc::boxed::Box::new(move |t, v| {
                    let y = t.softmax(v[0], axis)?;
                    project(t, y, &proj)
                }),
                inputs,
            )
        }
        "weighted-cross-entropy" => {
            let (h, w, k) = (dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 2, 5));
            let target = Tensor::new(&[h, w, k], onehot(h * w, k, rng))?;
            let weights = Tensor::new(&[h, w], (0..h * w).map(|_| rng.uniform()).collect())?;
            let inputs = vec![randn(&[h, w, k], 2.0, rng)];
            boxed(
                alloc::boxed::Box::new(move |t, v| {
                    let p = t.softmax(v[0], 2)?;
                    t.weighted_cross_entropy(p, target.clone(), weights.clone())
                }),
                inputs,
            )
        }
        "kl-divergence" => {
            let (h, w, k) = (dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 2, 5));
            let teacher = distribution(&[h, w, k], rng);
            let inputs = vec![randn(&[h, w, k], 2.0, rng)];
            boxed(
                alloc::boxed::Box::new(move |t, v| {
                    let p = t.softmax(v[0], 2)?;
                    t.kl_divergence(p, teacher.clone())
                }),
                inputs,
            )
        }
        "add" => {
            let shape = [dims(rng, 1, 4), dims(rng, 1, 4)];
            let proj = randn(&shape, 1.0, rng);
            let inputs = vec![randn(&shape, 1.0, rng), randn(&shape, 1.0, rng)];
            boxed(
                alloc::boxed::Box::new(move |t, v| {
                    let y = t.add(v[0], v[1])?;
                    project(t, y, &proj)
                }),
                inputs,
            )
        }
        "scale" => {
            let shape = [dims(rng, 1, 4), dims(rng, 1, 4)];
            let (proj, f) = (randn(&shape, 1.0, rng), 3.0 * rng.normal());
            let inputs = vec![randn(&shape, 1.0, rng)];
            boxed(
                alloc::boxed::Box::new(move |t, v| {
                    let y = t.scale(v[0], f);
                    project(t, y, &proj)
                }),
                inputs,
            )
        }
        "sum" => {
            let shape = [dims(rng, 1, 4), dims(rng, 1, 4)];
            let inputs = vec![randn(&shape, 1.0, rng)];
            boxed(alloc::boxed::Box::new(|t, v| Ok(t.sum(v[0]))), inputs)
        }
        "dot" => {
            let shape = [dims(rng, 1, 4), dims(rng, 1, 4)];
            let proj = randn(&shape, 1.0, rng);
            let inputs = vec![randn(&shape, 1.0, rng)];
            boxed(alloc::boxed::Box::new(move |t, v| t.dot(v[0], proj.clone())), inputs)
        }
        "model" => return model_instance(rng),
        other => return Err(arg_err!("no gradient check for `{}`", other)),
    })
}

/// Smallest |pre-activation| of a forward pass; FD steps must not cross a kink.
fn min_preactivation(model: &SegModel, image: &Tensor) -> Result<f64> {
    let arch = model.arch();
    let geom = ConvGeom { stride: arch.stride, padding: arch.kernel / 2 };
    let p = model.params();
    let mut x = image.clone();
    let mut min = f64::INFINITY;
    for b in 0..arch.widths.len() {
        let z = ops::conv2d(&x, &p[2 * b].value, &p[2 * b + 1].value, geom)?;
        min = z.data().iter().fold(min, |m, v| m.min(v.abs()));
        x = ops::relu(&z);
    }
    Ok(min)
}

/// Mean of the logits of a small model with random (non-zero) biases.
fn model_instance(rng: &mut DetRng) -> Result<Instance> {
    let arch = Arch { in_channels: 2, widths: vec![3, 4], kernel: 3, stride: 2, classes: 3 };
    loop {
        let mut model = SegModel::init(arch.clone(), rng)?;
        for p in model.params_mut() {
            p.value = randn(p.value.shape(), 0.6, rng);
        }
        let image = randn(&[6, 6, 2], 1.0, rng);
        if min_preactivation(&model, &image)? < 1e-3 {
            continue;
        }
        let inputs = model.params().iter().map(|p| p.value.clone()).collect();
        let scale = 1.0 / (6 * 6 * arch.classes) as f64;
        return Ok(Instance {
            inputs,
            build: alloc::boxed::Box::new(move |t, v| {
                let bound = crate::model::BoundModel::from_vars(v.to_vec());
                let out = model.forward(t, &bound, &image)?;
                let s = t.sum(out.logits);
                Ok(t.scale(s, scale))
            }),
        });
    }
}

fn loss_at(inst: &Instance, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = (inst.build)(&mut tape, &vars)?;
    Ok(tape.value(loss).item())
}

/// Maximum relative error over every input element of one instance.
fn check_instance(inst: &Instance, eps: f64) -> Result<(usize, f64)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inst.inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = (inst.build)(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut inputs = inst.inputs.clone();
    let (mut checked, mut worst) = (0, 0.0f64);
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v);
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + eps;
            let up = loss_at(inst, &inputs)?;
            inputs[i].data_mut()[j] = orig - eps;
            let down = loss_at(inst, &inputs)?;
            inputs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
            checked += 1;
        }
    }
    Ok((checked, worst))
}

/// Checks `op` on `instances` random instances drawn from `rng`.
pub fn check_op(op: &str, instances: usize, eps: f64, rng: &mut DetRng) -> Result<GradCheckReport> {
    let name = OPS.iter().copied().find(|&o| o == op).ok_or_else(|| arg_err!("no gradient check for `{}`", op))?;
    let mut report = GradCheckReport { op: name, instances, checked: 0, max_rel_err: 0.0 };
    for _ in 0..instances {
        let inst = instance(name, rng)?;
        let (n, err) = check_instance(&inst, eps)?;
        report.checked += n;
        report.max_rel_err = report.max_rel_err.max(err);
    }
    Ok(report)
}

/// Runs [`check_op`] for every entry of [`OPS`], each on its own stream.
pub fn check_all(instances: usize, eps: f64, seed: u64) -> Result<Vec<GradCheckReport>> {
    OPS.iter()
        .map(|op| check_op(op, instances, eps, &mut DetRng::derive(seed, op)))
        .collect()
}
