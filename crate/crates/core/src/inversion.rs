//! Latent codes for given images: one-shot recoding, iterative gradient
//! descent through the decoder, and the generative-range probe built on them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::models::{chain_backward, chain_forward, image_strip, LatentModel, OutputHead};
use crate::numerics::{mse, rng_normal, Net, Real, RngState, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InversionMethod {
    Recoder,
    Gradient,
    RecoderGradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionResult {
    pub code: Vec<f32>,
    pub final_image_mse: f64,
    pub steps_used: usize,
    pub method: InversionMethod,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientConfig {
    pub steps: usize,
    /// Initial step size; halved on a rejected step, grown on acceptance.
    pub lr: f64,
    /// Weight of the `‖z‖²` penalty.
    pub prior: f64,
}

impl Default for GradientConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 1.0,
            prior: 0.0,
        }
    }
}

const LR_GROWTH: f64 = 1.25;
const LR_FLOOR: f64 = 1e-12;

/// `MSE(decode(z), target) + prior·‖z‖²` and its gradient in `z`.
pub fn inversion_objective<T: Real>(
    nets: &[&Net<T>],
    head: OutputHead,
    target: &[T],
    z: &[T],
    prior: f64,
) -> Result<(f64, Vec<f64>)> {
    let codes = Tensor::new(vec![1, z.len()], z.to_vec())?;
    let (img, cache) = chain_forward(nets, head, &codes)?;
    if img.len() != target.len() {
        return Err(dim_mismatch(
            "inversion target size",
            img.len(),
            target.len(),
        ));
    }
    let p = target.len() as f64;
    let g = Tensor::from_fn(img.shape(), |k| {
        T::from_f64(2.0 * (img.data()[k].to_f64() - target[k].to_f64()) / p)
    });
    let (_, gz) = chain_backward(nets, &cache, &g)?;
    let norm2: f64 = z.iter().map(|v| v.to_f64() * v.to_f64()).sum();
    let loss = mse(img.data(), target) + prior * norm2;
    let grad = gz
        .data()
        .iter()
        .zip(z)
        .map(|(g, v)| g.to_f64() + 2.0 * prior * v.to_f64())
        .collect();
    Ok((loss, grad))
}

/// Monotone gradient descent with step halving. Returns the result and the
/// loss after every iteration, starting with the initial loss.
pub fn invert_gradient_traced(
    model: &dyn LatentModel,
    target: &[f32],
    init: &[f32],
    cfg: &GradientConfig,
) -> Result<(InversionResult, Vec<f64>)> {
    if init.len() != model.latent_dim() {
        return Err(dim_mismatch(
            "inversion init width",
            model.latent_dim(),
            init.len(),
        ));
    }
    if target.len() != model.image_dim() {
        return Err(dim_mismatch(
            "inversion target size",
            model.image_dim(),
            target.len(),
        ));
    }
    if !(cfg.lr > 0.0) || !(cfg.prior >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "inversion needs lr > 0 and prior >= 0, got {} and {}",
            cfg.lr, cfg.prior
        )));
    }
    let nets = model.decoder_nets();
    let head = model.output_head();
    let mut z = init.to_vec();
    let (mut loss, mut grad) = inversion_objective(&nets, head, target, &z, cfg.prior)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("initial inversion loss {loss}")));
    }
    let mut trace = vec![loss];
    let mut lr = cfg.lr;
    let mut steps = 0;
    while steps < cfg.steps && loss > 0.0 && lr > LR_FLOOR {
        steps += 1;
        let cand: Vec<f32> = z
            .iter()
            .zip(&grad)
            .map(|(v, g)| (*v as f64 - lr * g) as f32)
            .collect();
        let (cl, cg) = inversion_objective(&nets, head, target, &cand, cfg.prior)?;
        if cl.is_finite() && cl <= loss {
            z = cand;
            loss = cl;
            grad = cg;
            lr *= LR_GROWTH;
        } else {
            lr *= 0.5;
        }
        trace.push(loss);
    }
    let image = model.decode(&Tensor::new(vec![1, z.len()], z.clone())?)?;
    let final_image_mse = mse(image.data(), target);
    Ok((
        InversionResult {
            code: z,
            final_image_mse,
            steps_used: steps,
            method: InversionMethod::Gradient,
        },
        trace,
    ))
}

pub fn invert_gradient(
    model: &dyn LatentModel,
    target: &[f32],
    init: &[f32],
    cfg: &GradientConfig,
) -> Result<InversionResult> {
    Ok(invert_gradient_traced(model, target, init, cfg)?.0)
}

/// Where gradient inversion starts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "from")]
pub enum InitRule {
    /// The prior mean.
    Zeros,
    /// One prior draw per image, from child streams of `seed`.
    Prior { seed: u64 },
    /// The model's recoder or encoder output.
    Recoder,
}

fn initial_codes(model: &dyn LatentModel, images: &Tensor, init: InitRule) -> Result<Tensor> {
    let (n, d) = (images.rows(), model.latent_dim());
    match init {
        InitRule::Zeros => Ok(Tensor::zeros(&[n, d])),
        InitRule::Prior { seed } => {
            let rows: Vec<f32> = (0..n)
                .flat_map(|i| {
                    rng_normal::<f32>(&mut RngState::new(seed).child(i as u64), &[d]).into_data()
                })
                .collect();
            Tensor::matrix(n, d, rows)
        }
        InitRule::Recoder => model.encode(images),
    }
}

/// Gradient inversion of each image, in parallel across images.
pub fn invert_batch(
    model: &dyn LatentModel,
    images: &Tensor,
    init: InitRule,
    cfg: &GradientConfig,
) -> Result<Vec<InversionResult>> {
    let images = images.as_matrix();
    let inits = initial_codes(model, &images, init)?;
    let method = if init == InitRule::Recoder {
        InversionMethod::RecoderGradient
    } else {
        InversionMethod::Gradient
    };
    (0..images.rows())
        .into_par_iter()
        .map(|i| {
            let mut r = invert_gradient(model, images.row(i), inits.row(i), cfg)?;
            r.method = method;
            Ok(r)
        })
        .collect()
}

/// One forward pass of the recoder (or encoder) per image.
pub fn invert_recoder(model: &dyn LatentModel, images: &Tensor) -> Result<Vec<InversionResult>> {
    let images = images.as_matrix();
    let codes = model.encode(&images)?;
    let recon = model.decode(&codes)?;
    Ok((0..images.rows())
        .map(|i| InversionResult {
            code: codes.row(i).to_vec(),
            final_image_mse: mse(recon.row(i), images.row(i)),
            steps_used: 0,
            method: InversionMethod::Recoder,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "method")]
pub enum ProbeMethod {
    Recoder,
    Gradient {
        init: InitRule,
        config: GradientConfig,
    },
}

pub fn invert_with(
    model: &dyn LatentModel,
    images: &Tensor,
    method: &ProbeMethod,
) -> Result<Vec<InversionResult>> {
    match method {
        ProbeMethod::Recoder => invert_recoder(model, images),
        ProbeMethod::Gradient { init, config } => invert_batch(model, images, *init, config),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeReport {
    pub method: ProbeMethod,
    pub median_in: f64,
    pub median_out: f64,
    /// `median_out / median_in`.
    pub ratio: f64,
    pub n_in: usize,
    pub n_out: usize,
}

/// Middle value; mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

pub fn probe_ratio(median_in: f64, median_out: f64) -> f64 {
    if median_out == median_in {
        1.0
    } else {
        median_out / median_in
    }
}

/// Median inversion error on in-range and out-of-range images.
pub fn range_probe(
    model: &dyn LatentModel,
    in_range: &Tensor,
    out_range: &Tensor,
    method: &ProbeMethod,
) -> Result<ProbeReport> {
    if in_range.rows() == 0 || out_range.rows() == 0 {
        return Err(Error::InvalidArgument(
            "range probe needs nonempty image sets".into(),
        ));
    }
    let errs = |imgs: &Tensor| -> Result<Vec<f64>> {
        Ok(invert_with(model, imgs, method)?
            .iter()
            .map(|r| r.final_image_mse)
            .collect())
    };
    let median_in = median(&errs(in_range)?).expect("nonempty");
    let median_out = median(&errs(out_range)?).expect("nonempty");
    Ok(ProbeReport {
        method: *method,
        median_in,
        median_out,
        ratio: probe_ratio(median_in, median_out),
        n_in: in_range.rows(),
        n_out: out_range.rows(),
    })
}

/// Originals on the top row, reconstructions from the codes below.
pub fn comparison_strip(
    model: &dyn LatentModel,
    originals: &Tensor,
    results: &[InversionResult],
    side: usize,
) -> Result<Tensor> {
    if results.len() != originals.rows() {
        return Err(dim_mismatch(
            "inversion result count",
            originals.rows(),
            results.len(),
        ));
    }
    let d = model.latent_dim();
    let codes = Tensor::matrix(
        results.len(),
        d,
        results
            .iter()
            .flat_map(|r| r.code.iter().copied())
            .collect(),
    )?;
    let top = image_strip(&originals.as_matrix(), side)?;
    let bottom = image_strip(&model.decode(&codes)?, side)?;
    let w = top.row_len();
    Tensor::matrix(
        2 * side,
        w,
        top.into_data()
            .into_iter()
            .chain(bottom.into_data())
            .collect(),
    )
}
