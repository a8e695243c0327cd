//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::NetworkArchitecture;
use super::network::loss_and_grad;
use super::params::{init_params, GradientSet, ParameterSet};
use super::tensor::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
pub const GRADCHECK_BATCH: usize = 4;

/// Central differences of `f` with respect to every parameter value.
pub fn numerical_gradient<F>(params: &ParameterSet, step: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&ParameterSet) -> Result<f64>,
{
    let base: Vec<f64> = params.values().collect();
    let mut probe = base.clone();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        probe[i] = base[i] + step;
        let plus = f(&params.with_values(&probe)?)?;
        probe[i] = base[i] - step;
        let minus = f(&params.with_values(&probe)?)?;
        probe[i] = base[i];
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// max over entries of `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

/// Random parameters and a random labeled batch for `arch`, derived from `seed`.
pub fn gradcheck_problem(arch: &NetworkArchitecture, seed: u64) -> (ParameterSet, Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164_6368_6b21);
    let params = init_params(arch, seed);
    // nonzero biases so the bias paths carry signal
    let mut values: Vec<f64> = params.values().collect();
    let mut offset = 0;
    for entry in params.entries() {
        offset += entry.weight.len();
        for v in &mut values[offset..offset + entry.bias.len()] {
            *v = rng.gen_range(-0.1..0.1);
        }
        offset += entry.bias.len();
    }
    let params = params.with_values(&values).expect("same layout");
    let [c, h, w] = arch.input_shape();
    let n = GRADCHECK_BATCH * c * h * w;
    let batch = Tensor::new(
        vec![GRADCHECK_BATCH, c, h, w],
        (0..n).map(|_| rng.gen::<f64>()).collect(),
    )
    .expect("finite inputs");
    let labels = (0..GRADCHECK_BATCH)
        .map(|_| rng.gen_range(0..arch.num_classes()))
        .collect();
    (params, batch, labels)
}

/// Compares a supplied analytic gradient against finite differences of the batch loss.
pub fn gradient_check_with(
    arch: &NetworkArchitecture,
    params: &ParameterSet,
    batch: &Tensor,
    labels: &[usize],
    analytic: &GradientSet,
) -> Result<f64> {
    let numeric = numerical_gradient(params, FD_STEP, |p| {
        loss_and_grad(arch, p, batch, labels).map(|(l, _)| l)
    })?;
    let analytic: Vec<f64> = analytic.values().collect();
    Ok(max_relative_error(&analytic, &numeric))
}

/// Max relative error between backprop and finite differences on a seeded problem.
pub fn gradient_check(arch: &NetworkArchitecture, seed: u64) -> Result<f64> {
    let (params, batch, labels) = gradcheck_problem(arch, seed);
    let (_, grads) = loss_and_grad(arch, &params, &batch, &labels)?;
    gradient_check_with(arch, &params, &batch, &labels, &grads)
}
