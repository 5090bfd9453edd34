//! Central-difference checks of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};

// Round-off in the loss grows as 1/h and swamps the smallest network
// gradients (recall-gate weights sit near 1e-7) below about 1e-6; steps of
// 1e-4 and up start straddling ReLU kinks in the fusion head.
const STEP: f64 = 1e-5;

/// Largest norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)` over the checked
/// tensors, where `a` is the analytic and `n` the numeric gradient. Tensors
/// whose gradients are both below `1e-12` in norm count as exact.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Name or index of the worst tensor.
    pub worst: String,
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Random fixed weights so the scalar loss `Σ wᵢ·outᵢ` exercises every
/// output element with a different sensitivity.
fn projection(dims: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n = dims.iter().product();
    Tensor::from_vec(dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn project(g: &mut Graph<'_>, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// Checks `∂/∂inputs` of `build`, which maps constant input vars to an output
/// of any shape.
pub fn check_inputs<F>(inputs: &[Tensor], seed: u64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let weights = projection(g.shape(out).dims(), &mut rng)?;
    let loss = project(&mut g, out, &weights)?;
    let grads = g.backward(loss)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let loss = project(&mut g, out, &weights)?;
        Ok(g.value(loss).item().expect("scalar"))
    };

    let mut report = GradCheck {
        max_relative_error: 0.0,
        worst: String::new(),
    };
    let mut probe = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads
            .get(v)
            .ok_or_else(|| Error::MissingGradient(format!("input {k}")))?
            .data()
            .to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let x0 = probe[k].data()[e];
            probe[k].data_mut()[e] = x0 + STEP;
            let up = eval(&probe)?;
            probe[k].data_mut()[e] = x0 - STEP;
            let down = eval(&probe)?;
            probe[k].data_mut()[e] = x0;
            *slot = (up - down) / (2.0 * STEP);
        }
        let err = relative_error(&analytic, &numeric);
        if err >= report.max_relative_error {
            report = GradCheck {
                max_relative_error: err,
                worst: format!("input {k}"),
            };
        }
    }
    Ok(report)
}

/// Checks `∂/∂params` of `build`, which records a forward pass over `params`
/// (plus any constants it creates itself).
pub fn check_params<F>(params: &ParamSet, seed: u64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (weights, analytic) = {
        let mut g = Graph::with_params(params);
        let out = build(&mut g)?;
        let weights = projection(g.shape(out).dims(), &mut rng)?;
        let loss = project(&mut g, out, &weights)?;
        let grads = g.backward(loss)?;
        let analytic: Vec<Vec<f64>> = params
            .ids()
            .map(|id| {
                grads
                    .param(id)
                    .map(|t| t.data().to_vec())
                    .ok_or_else(|| Error::MissingGradient(params.name(id).to_string()))
            })
            .collect::<Result<_>>()?;
        (weights, analytic)
    };
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::inference(p);
        let out = build(&mut g)?;
        let loss = project(&mut g, out, &weights)?;
        Ok(g.value(loss).item().expect("scalar"))
    };

    let mut report = GradCheck {
        max_relative_error: 0.0,
        worst: String::new(),
    };
    let mut probe = params.clone();
    for (id, analytic) in params.ids().zip(&analytic) {
        let mut numeric = vec![0.0; analytic.len()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let x0 = probe.value(id).data()[e];
            probe.value_mut(id).data_mut()[e] = x0 + STEP;
            let up = eval(&probe)?;
            probe.value_mut(id).data_mut()[e] = x0 - STEP;
            let down = eval(&probe)?;
            probe.value_mut(id).data_mut()[e] = x0;
            *slot = (up - down) / (2.0 * STEP);
        }
        let err = relative_error(analytic, &numeric);
        if err >= report.max_relative_error {
            report = GradCheck {
                max_relative_error: err,
                worst: params.name(id).to_string(),
            };
        }
    }
    Ok(report)
}
