//! Parametric Gaussian-blob images on a 16×16 grid.
//!
//! Six factors (center, radius, intensity, background, elongation) span a
//! low-dimensional image manifold with known ground truth.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{RngState, Tensor};

pub const SIDE: usize = 16;
pub const PIXELS: usize = SIDE * SIDE;
pub const NUM_FACTORS: usize = 6;

/// Factor names in column order.
pub const FACTOR_NAMES: [&str; NUM_FACTORS] = ["cx", "cy", "r", "a", "b", "e"];

/// Inclusive `[lo, hi]` range of each factor, in column order.
pub const FACTOR_RANGES: [(f64, f64); NUM_FACTORS] = [
    (0.2, 0.8),
    (0.2, 0.8),
    (0.08, 0.30),
    (0.5, 1.0),
    (0.0, 0.3),
    (0.5, 2.0),
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobFactors {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    /// Foreground intensity.
    pub a: f64,
    /// Background level.
    pub b: f64,
    /// Elongation.
    pub e: f64,
}

impl BlobFactors {
    pub fn to_array(self) -> [f64; NUM_FACTORS] {
        [self.cx, self.cy, self.r, self.a, self.b, self.e]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != NUM_FACTORS {
            return Err(Error::DimensionMismatch {
                context: "blob factor row",
                expected: NUM_FACTORS.to_string(),
                got: v.len().to_string(),
            });
        }
        Ok(Self {
            cx: v[0],
            cy: v[1],
            r: v[2],
            a: v[3],
            b: v[4],
            e: v[5],
        })
    }

    pub fn validate(&self) -> Result<()> {
        for ((name, (lo, hi)), v) in FACTOR_NAMES.iter().zip(FACTOR_RANGES).zip(self.to_array()) {
            if !(v >= lo && v <= hi) {
                return Err(Error::InvalidArgument(format!(
                    "factor {name} = {v} outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

/// Closed-form renderer without range validation.
pub fn render_blob_raw(f: &BlobFactors, out: &mut [f32]) {
    let two_r2 = 2.0 * f.r * f.r;
    for py in 0..SIDE {
        let v = (py as f64 + 0.5) / SIDE as f64;
        for px in 0..SIDE {
            let u = (px as f64 + 0.5) / SIDE as f64;
            let du = u - f.cx;
            let dv = v - f.cy;
            let q = (du * du * f.e + dv * dv / f.e) / two_r2;
            let value = f.b + f.a * libm::exp(-q);
            out[py * SIDE + px] = value.clamp(0.0, 1.0) as f32;
        }
    }
}

/// Renders one `16×16` image; row index is `py`, column index `px`.
pub fn render_blob(f: &BlobFactors) -> Result<Tensor> {
    f.validate()?;
    let mut data = vec![0.0f32; PIXELS];
    render_blob_raw(f, &mut data);
    Tensor::new(vec![SIDE, SIDE], data)
}

/// `n × 6` factors, each uniform over its range.
pub fn sample_factors(rng: &mut RngState, n: usize) -> Result<Tensor<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample_factors needs n >= 1".into()));
    }
    let mut data = Vec::with_capacity(n * NUM_FACTORS);
    for _ in 0..n {
        for (lo, hi) in FACTOR_RANGES {
            data.push(rng.uniform_range(lo, hi));
        }
    }
    Tensor::new(vec![n, NUM_FACTORS], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `n × 16 × 16`, values in `[0, 1]`.
    pub images: Tensor,
    /// `n × 6` in [`FACTOR_NAMES`] order.
    pub factors: Tensor<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n: usize,
    pub factor_ranges: Vec<FactorRange>,
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorRange {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

/// Samples factors from `seed` and renders them.
pub fn make_dataset(seed: u64, n: usize) -> Result<Dataset> {
    let factors = sample_factors(&mut RngState::new(seed), n)?;
    let images = render_factors(&factors)?;
    Ok(Dataset {
        images,
        factors,
        seed,
    })
}

/// Renders every factor row; rows are independent so the result does not
/// depend on scheduling.
pub fn render_factors(factors: &Tensor<f64>) -> Result<Tensor> {
    let n = factors.rows();
    for i in 0..n {
        BlobFactors::from_slice(factors.row(i))?.validate()?;
    }
    let mut data = vec![0.0f32; n * PIXELS];
    data.par_chunks_mut(PIXELS)
        .enumerate()
        .for_each(|(i, out)| {
            let f = BlobFactors::from_slice(factors.row(i)).expect("validated");
            render_blob_raw(&f, out);
        });
    Tensor::new(vec![n, SIDE, SIDE], data)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Images flattened to `n × 256`.
    pub fn flat_images(&self) -> Tensor {
        self.images.as_matrix()
    }

    /// SHA-256 over the little-endian bytes of images then factors.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in self.images.data() {
            h.update(v.to_le_bytes());
        }
        for v in self.factors.data() {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            seed: self.seed,
            n: self.len(),
            factor_ranges: FACTOR_NAMES
                .iter()
                .zip(FACTOR_RANGES)
                .map(|(name, (lo, hi))| FactorRange {
                    name: (*name).to_string(),
                    lo,
                    hi,
                })
                .collect(),
            checksum: self.checksum(),
        }
    }

    /// Deterministic split: the last `floor(n · fraction)` rows are held out.
    pub fn split_holdout(&self, fraction: f64) -> (Tensor, Tensor) {
        let flat = self.flat_images();
        let n = flat.rows();
        let held = ((n as f64) * fraction).floor() as usize;
        let cut = n - held.min(n.saturating_sub(1));
        (flat.slice_rows(0, cut), flat.slice_rows(cut, n))
    }
}

/// Intensity-inverted copies `1 − x` of the first `k` dataset images.
pub fn out_of_range_probe_set(dataset: &Dataset, k: usize) -> Result<Tensor> {
    if k > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "probe count {k} exceeds dataset size {}",
            dataset.len()
        )));
    }
    Ok(invert_intensity(&dataset.images.slice_rows(0, k)))
}

pub fn invert_intensity(images: &Tensor) -> Tensor {
    images.map(|v| 1.0 - v)
}
