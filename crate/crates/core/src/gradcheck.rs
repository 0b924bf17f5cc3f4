//! Finite-difference verification of the analytic gradients.
//!
//! Every check builds a scalar function of some input tensors twice: once
//! differentiated by [`Graph::backward`], once probed by central
//! differences. Non-scalar outputs are contracted with fixed random weights
//! so that every output entry contributes.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{chamfer_op, sigma_chamfer_op};
use crate::models::{kl_divergence_op, loss_op, Model, ModelConfig, Sampling, Variant};
use crate::tensor::{BatchNormMode, Graph, Tensor, Var};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted normwise relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    /// Normwise relative error over all input gradients together.
    pub rel_error: f64,
    /// Input with the largest absolute discrepancy.
    pub worst_input: usize,
    pub n_inputs: usize,
    pub n_entries: usize,
    pub seconds: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.rel_error < TOLERANCE
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the absolute difference when both
/// gradients vanish.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm2(analytic).max(norm2(numeric));
    if scale < 1e-12 {
        norm2(&diff)
    } else {
        norm2(&diff) / scale
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

/// Builds the objective; non-scalar outputs are contracted with weights
/// drawn from `seed`.
fn objective(g: &mut Graph, vars: &[Var], f: &Build<'_>, seed: u64) -> Result<Var> {
    let out = f(g, vars)?;
    if g.value(out).len() == 1 {
        return Ok(out);
    }
    let shape = g.shape(out).to_vec();
    let mut rng = crate::seed::rng(seed);
    let w: Vec<f64> = (0..g.value(out).len())
        .map(|_| rng.random_range(0.5..1.5))
        .collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn eval(inputs: &[Tensor], f: &Build<'_>, seed: u64) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = objective(&mut g, &vars, f, seed)?;
    g.value(out).item()
}

/// Compares analytic and central-difference gradients for every input.
pub fn check(name: &str, inputs: Vec<Tensor>, f: &Build<'_>) -> Result<CheckResult> {
    let started = Instant::now();
    let seed = crate::seed::derive(0, name);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = objective(&mut g, &vars, f, seed)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
        })
        .collect();

    let mut probe = inputs.clone();
    let mut numeric: Vec<Vec<f64>> = inputs.iter().map(|t| vec![0.0; t.len()]).collect();
    for (i, column) in numeric.iter_mut().enumerate() {
        for (j, slot) in column.iter_mut().enumerate() {
            let x = inputs[i].data()[j];
            probe[i].data_mut()[j] = x + STEP;
            let up = eval(&probe, f, seed)?;
            probe[i].data_mut()[j] = x - STEP;
            let down = eval(&probe, f, seed)?;
            probe[i].data_mut()[j] = x;
            *slot = (up - down) / (2.0 * STEP);
        }
    }
    // Inputs whose true gradient vanishes (a bias feeding batch
    // normalisation) would score pure noise on a per-input scale.
    let worst_input = (0..inputs.len())
        .map(|i| {
            let diff: Vec<f64> = analytic[i]
                .iter()
                .zip(&numeric[i])
                .map(|(a, n)| a - n)
                .collect();
            (i, norm2(&diff))
        })
        .fold((0, f64::NEG_INFINITY), |best, (i, e)| {
            if !(e <= best.1) {
                (i, e)
            } else {
                best
            }
        })
        .0;
    let rel_error = rel_error(&analytic.concat(), &numeric.concat());
    Ok(CheckResult {
        name: name.to_string(),
        rel_error,
        worst_input,
        n_inputs: inputs.len(),
        n_entries: inputs.iter().map(Tensor::len).sum(),
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn randn(rng: &mut crate::seed::Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn uniform(rng: &mut crate::seed::Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Loss of a σ-VAE on the 64-point reduced configuration, as a function of
/// every parameter.
pub fn check_model_loss(variant: Variant, seed: u64) -> Result<CheckResult> {
    let config = ModelConfig::reduced(variant);
    let model = Model::new(config.clone(), seed)?;
    let mut rng = crate::seed::rng(seed ^ 0x5eed);
    let x = randn(&mut rng, &[2, config.n_points, 3], 1.0);
    let inputs: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    let f = |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let bound = model.bind_vars(g, v.to_vec())?;
        let xv = g.constant(x.clone());
        let out = model.forward(g, &bound, xv, Sampling::Draw(seed))?;
        Ok(loss_op(g, variant, xv, &out, 0.1, false)?.total)
    };
    check(&format!("{variant} loss (reduced model)"), inputs, &f)
}

/// The whole suite; each entry is one differentiable operation.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = crate::seed::rng(seed);
    let mut out = Vec::new();

    let (a, b) = (randn(&mut rng, &[4, 5], 1.0), randn(&mut rng, &[5, 3], 1.0));
    out.push(check("matmul", vec![a, b], &|g, v| g.matmul(v[0], v[1]))?);

    let x = randn(&mut rng, &[6, 4], 1.0);
    let gamma = uniform(&mut rng, &[4], 0.5, 1.5);
    let beta = randn(&mut rng, &[4], 0.5);
    out.push(check(
        "batch_norm (train)",
        vec![x.clone(), gamma.clone(), beta.clone()],
        &|g, v| g.batch_norm(v[0], v[1], v[2], BatchNormMode::Train { slot: 0 }),
    )?);
    let (mean, var) = (vec![0.1, -0.2, 0.3, 0.0], vec![0.5, 1.5, 2.0, 0.8]);
    out.push(check(
        "batch_norm (eval)",
        vec![x, gamma, beta],
        &|g, v| {
            g.batch_norm(
                v[0],
                v[1],
                v[2],
                BatchNormMode::Eval {
                    mean: mean.clone(),
                    var: var.clone(),
                },
            )
        },
    )?);

    let x = randn(&mut rng, &[2, 2, 3, 4], 1.0);
    let w = randn(&mut rng, &[2, 2, 4, 5], 0.5);
    let bias = randn(&mut rng, &[5], 0.5);
    out.push(check("transposed_conv2d", vec![x, w, bias], &|g, v| {
        g.transposed_conv2d(v[0], v[1], v[2])
    })?);

    let x = randn(&mut rng, &[2, 7, 4], 1.0);
    out.push(check("max_pool_points", vec![x], &|g, v| {
        g.max_pool_points(v[0])
    })?);

    let x = uniform(&mut rng, &[12], -30.0, 30.0);
    out.push(check("softplus_eps", vec![x], &|g, v| {
        g.softplus_eps(v[0], 1e-6)
    })?);

    let x = randn(&mut rng, &[3, 5], 0.5);
    let b = randn(&mut rng, &[5], 0.5);
    let p = uniform(&mut rng, &[3, 5], 0.5, 2.0);
    out.push(check("elementwise ops", vec![x, b, p], &|g, v| {
        let h = g.add_bias(v[0], v[1])?;
        let l = g.leaky_relu(h, 0.2);
        let e = g.exp(l)?;
        let lg = g.log(v[2])?;
        let m = g.mul(e, lg)?;
        let s = g.square(m);
        let c = g.concat(&[s, v[2]], 1)?;
        let r = g.reshape(c, vec![30])?;
        let sc = g.scale(r, 0.7);
        let d = g.sub(sc, r)?;
        Ok(g.add_scalar(d, 1.0))
    })?);

    let x = randn(&mut rng, &[2, 9, 3], 1.0);
    let y = randn(&mut rng, &[2, 11, 3], 1.0);
    out.push(check(
        "chamfer_distance",
        vec![x.clone(), y.clone()],
        &|g, v| chamfer_op(g, v[0], v[1]),
    )?);

    let var = uniform(&mut rng, &[2, 11, 3], 0.2, 2.0);
    for weighted in [false, true] {
        let name = if weighted {
            "sigma_chamfer (weighted matching)"
        } else {
            "sigma_chamfer"
        };
        out.push(check(
            name,
            vec![x.clone(), y.clone(), var.clone()],
            &|g, v| sigma_chamfer_op(g, v[0], v[1], v[2], weighted),
        )?);
    }

    let mu = randn(&mut rng, &[3, 4], 1.0);
    let lv = randn(&mut rng, &[3, 4], 0.5);
    out.push(check("kl_divergence", vec![mu, lv], &|g, v| {
        kl_divergence_op(g, v[0], v[1])
    })?);

    out.push(check_model_loss(Variant::SigmaVae, seed)?);
    if let Some(bad) = out.iter().find(|r| !r.rel_error.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient check `{}` produced a non-finite error",
            bad.name
        )));
    }
    Ok(out)
}
