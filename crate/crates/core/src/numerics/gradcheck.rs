//! Central-difference gradient checking in 64-bit arithmetic.

use super::nn::Net;
use super::rng::RngState;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-4;

/// Coordinates checked when a parameter vector is larger than this.
pub const DEFAULT_SAMPLE: usize = 256;

/// Largest relative error `|analytic − cd| / max(|analytic|, |cd|, 1e-8)` over
/// a seeded subset of at most `sample` coordinates of `params`.
///
/// `objective` returns the loss and its analytic gradient at a point.
pub fn grad_check_fn<F>(
    params: &[f64],
    mut objective: F,
    eps: f64,
    sample: usize,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eps must be positive, got {eps}"
        )));
    }
    let (loss, analytic) = objective(params)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss} at base point")));
    }
    if analytic.len() != params.len() {
        return Err(Error::DimensionMismatch {
            context: "analytic gradient length",
            expected: params.len().to_string(),
            got: analytic.len().to_string(),
        });
    }
    let coords: Vec<usize> = if params.len() <= sample {
        (0..params.len()).collect()
    } else {
        let mut perm = RngState::new(seed).permutation(params.len());
        perm.truncate(sample);
        perm.sort_unstable();
        perm
    };
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for &i in &coords {
        let orig = probe[i];
        probe[i] = orig + eps;
        let (lp, _) = objective(&probe)?;
        probe[i] = orig - eps;
        let (lm, _) = objective(&probe)?;
        probe[i] = orig;
        if !lp.is_finite() || !lm.is_finite() {
            return Err(Error::NonFinite(format!("loss at coordinate {i} ± eps")));
        }
        let cd = (lp - lm) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Gradient check of a single network under a loss head.
///
/// `head` maps the network output to `(loss, dloss/doutput)`. Both parameter
/// and input gradients are checked.
pub fn grad_check<H>(net: &Net<f64>, head: H, input: &Tensor<f64>, eps: f64) -> Result<f64>
where
    H: Fn(&Tensor<f64>) -> (f64, Tensor<f64>),
{
    let n_params = net.num_params();
    let mut params = net.flatten();
    params.extend(input.data().iter().copied());
    let mut scratch = net.clone();
    grad_check_fn(
        &params,
        |p| {
            scratch.load_flat(&p[..n_params]);
            let x = Tensor::new(input.shape().to_vec(), p[n_params..].to_vec())?;
            let (y, cache) = scratch.forward(&x)?;
            let (loss, g) = head(&y);
            let (grads, gi) = scratch.backward(&cache, &g)?;
            let mut flat = grads.flatten();
            flat.extend(gi.data().iter().copied());
            Ok((loss, flat))
        },
        eps,
        DEFAULT_SAMPLE,
        0x6772_6164,
    )
}

/// Sum-of-squares head `Σ (y − t)²`.
pub fn squared_error_head(
    target: &Tensor<f64>,
) -> impl Fn(&Tensor<f64>) -> (f64, Tensor<f64>) + '_ {
    move |y: &Tensor<f64>| {
        let mut loss = 0.0;
        let g = Tensor::from_fn(y.shape(), |i| {
            let d = y.data()[i] - target.data()[i];
            loss += d * d;
            2.0 * d
        });
        (loss, g)
    }
}
