//! Ablation importance of latent variables: how much reconstruction error
//! grows when one coordinate of the code is forced to zero.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{mean_row_mse, LatentModel};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainReport {
    /// Per-variable gain in mean per-pixel MSE units. May be negative.
    pub gains: Vec<f64>,
    /// Variable indices by descending gain, ties by ascending index.
    pub order: Vec<usize>,
    /// Cumulative share of total positive gain along `order`.
    pub cumulative_share: Vec<f64>,
    pub dataset_size: usize,
}

fn zero_column(codes: &Tensor, var: usize) -> Tensor {
    let mut out = codes.as_matrix();
    for i in 0..out.rows() {
        out.row_mut(i)[var] = 0.0;
    }
    out
}

fn check_index(model: &dyn LatentModel, var: usize) -> Result<()> {
    if var >= model.latent_dim() {
        return Err(Error::IndexOutOfRange {
            what: "latent variable",
            index: var,
            size: model.latent_dim(),
        });
    }
    Ok(())
}

struct Baseline {
    images: Tensor,
    codes: Tensor,
    mse: f64,
}

fn baseline(model: &dyn LatentModel, images: &Tensor) -> Result<Baseline> {
    if images.rows() == 0 {
        return Err(Error::InvalidArgument(
            "gain needs a nonempty dataset".into(),
        ));
    }
    let images = images.as_matrix();
    let codes = model.encode(&images)?;
    let mse = mean_row_mse(&images, &model.decode(&codes)?);
    Ok(Baseline { images, codes, mse })
}

fn gain_from(model: &dyn LatentModel, base: &Baseline, var: usize) -> Result<f64> {
    let ablated = model.decode(&zero_column(&base.codes, var))?;
    Ok(mean_row_mse(&base.images, &ablated) - base.mse)
}

/// Mean increase in reconstruction MSE when coordinate `var` is zeroed
/// before decoding.
pub fn reconstruction_gain(model: &dyn LatentModel, images: &Tensor, var: usize) -> Result<f64> {
    check_index(model, var)?;
    let base = baseline(model, images)?;
    gain_from(model, &base, var)
}

/// Descending order with ties by index; shares over positive gains only.
pub fn report_from_gains(gains: Vec<f64>, dataset_size: usize) -> GainReport {
    let mut order: Vec<usize> = (0..gains.len()).collect();
    order.sort_by(|&a, &b| gains[b].total_cmp(&gains[a]).then(a.cmp(&b)));
    let total: f64 = gains.iter().filter(|g| **g > 0.0).sum();
    let mut acc = 0.0;
    let cumulative_share = order
        .iter()
        .map(|&i| {
            acc += gains[i].max(0.0);
            if total > 0.0 {
                acc / total
            } else {
                0.0
            }
        })
        .collect();
    GainReport {
        gains,
        order,
        cumulative_share,
        dataset_size,
    }
}

pub fn rank_variables(model: &dyn LatentModel, images: &Tensor) -> Result<GainReport> {
    let base = baseline(model, images)?;
    let gains = (0..model.latent_dim())
        .into_par_iter()
        .map(|v| gain_from(model, &base, v))
        .collect::<Result<Vec<_>>>()?;
    Ok(report_from_gains(gains, base.images.rows()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub indices: Vec<usize>,
    /// Set when `2^n` reaches the requested support-set size.
    pub warning: Option<String>,
}

/// First `n` variables of the ranking.
pub fn select_top(report: &GainReport, n: usize, target_size: usize) -> Result<Selection> {
    let d = report.order.len();
    if n == 0 || n > d {
        return Err(Error::InvalidArgument(format!(
            "feature count {n} outside 1..={d}"
        )));
    }
    let sectors = 1u128.checked_shl(n as u32).unwrap_or(u128::MAX);
    let warning = (sectors >= target_size as u128).then(|| {
        format!("2^{n} = {sectors} sectors is not below the support-set size {target_size}")
    });
    Ok(Selection {
        indices: report.order[..n].to_vec(),
        warning,
    })
}

impl GainReport {
    /// `variable_index,gain,rank,cumulative_share`, one row per variable in rank order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variable_index,gain,rank,cumulative_share\n");
        for (rank, (&v, share)) in self.order.iter().zip(&self.cumulative_share).enumerate() {
            out.push_str(&format!("{v},{:.8e},{rank},{share:.6}\n", self.gains[v]));
        }
        out
    }
}
