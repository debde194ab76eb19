//! Desk-scale latent-variable generative models sharing one encode/decode contract.

mod decoder;
mod gan;
mod log;
mod style;
mod vae;

pub(crate) use decoder::{chain_backward, chain_forward};
pub use decoder::{combine_split, OutputHead};
pub use gan::{
    discriminator_objective, generator_objective, recoder_features, train_gan, train_recoder,
    AdversarialLoss, GanConfig, GanModel, RecoderConfig,
};
pub use log::TrainLog;
pub use style::{train_style_proxy, StyleConfig, StyleProxyModel};
pub use vae::{train_svae, train_vae, vae_objective, SvaeModel, VaeConfig, VaeModel, VaeObjective};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::numerics::{rng_normal, Net, Real, RngState, Tensor};

/// Rows per chunk when inference is split across threads. Rows are
/// independent, so chunking never changes results.
const INFERENCE_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Vae,
    Svae,
    Gan,
    StyleProxy,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Vae => "VAE",
            ModelKind::Svae => "SVAE",
            ModelKind::Gan => "GAN",
            ModelKind::StyleProxy => "STYLE",
        }
    }

    /// Variational models share an objective; the others are adversarial.
    pub fn is_variational(self) -> bool {
        matches!(self, ModelKind::Vae | ModelKind::Svae)
    }
}

/// Encode/decode contract every model honors.
///
/// Codes live in the space the encoder reaches: the prior space for the
/// variational models and the plain GAN, the intermediate `w` space for the
/// style proxy.
pub trait LatentModel: Sync {
    fn kind(&self) -> ModelKind;
    fn latent_dim(&self) -> usize;
    fn image_dim(&self) -> usize;

    /// Networks applied, in order, to turn a code into an image.
    fn decoder_nets(&self) -> Vec<&Net>;
    fn output_head(&self) -> OutputHead;

    /// Deterministic encoding (posterior mean or recoder output).
    fn encode(&self, images: &Tensor) -> Result<Tensor>;

    fn decode(&self, codes: &Tensor) -> Result<Tensor> {
        if codes.row_len() != self.latent_dim() {
            return Err(dim_mismatch(
                "decode code width",
                self.latent_dim(),
                codes.row_len(),
            ));
        }
        let nets = self.decoder_nets();
        let head = self.output_head();
        par_rows(codes, self.image_dim(), |chunk| {
            decoder::decode_chain(&nets, head, chunk)
        })
    }
}

/// Applies `f` to row chunks in parallel and stacks the results in order.
pub(crate) fn par_rows<F>(input: &Tensor, out_width: usize, f: F) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    let n = input.rows();
    if n == 0 {
        return Ok(Tensor::zeros(&[0, out_width]));
    }
    let flat = input.as_matrix();
    let starts: Vec<usize> = (0..n).step_by(INFERENCE_CHUNK).collect();
    let parts: Vec<Tensor> = starts
        .par_iter()
        .map(|&s| f(&flat.slice_rows(s, (s + INFERENCE_CHUNK).min(n))))
        .collect::<Result<_>>()?;
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

pub(crate) fn encode_with(net: &Net, images: &Tensor, width: usize, take: usize) -> Result<Tensor> {
    if images.row_len() != net.d_in() {
        return Err(dim_mismatch(
            "encoder input width",
            net.d_in(),
            images.row_len(),
        ));
    }
    par_rows(images, take, |chunk| {
        let out = net.predict(chunk)?;
        if take == width {
            return Ok(out);
        }
        let mut data = Vec::with_capacity(out.rows() * take);
        for i in 0..out.rows() {
            data.extend_from_slice(&out.row(i)[..take]);
        }
        Tensor::matrix(out.rows(), take, data)
    })
}

/// Any trained model, for heterogeneous collections and persistence.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    Vae(VaeModel),
    Svae(SvaeModel),
    Gan(GanModel),
    StyleProxy(StyleProxyModel),
}

impl AnyModel {
    fn inner(&self) -> &dyn LatentModel {
        match self {
            AnyModel::Vae(m) => m,
            AnyModel::Svae(m) => m,
            AnyModel::Gan(m) => m,
            AnyModel::StyleProxy(m) => m,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            AnyModel::Vae(m) => m.seed,
            AnyModel::Svae(m) => m.seed,
            AnyModel::Gan(m) => m.seed,
            AnyModel::StyleProxy(m) => m.seed,
        }
    }
}

impl LatentModel for AnyModel {
    fn kind(&self) -> ModelKind {
        self.inner().kind()
    }
    fn latent_dim(&self) -> usize {
        self.inner().latent_dim()
    }
    fn image_dim(&self) -> usize {
        self.inner().image_dim()
    }
    fn decoder_nets(&self) -> Vec<&Net> {
        self.inner().decoder_nets()
    }
    fn output_head(&self) -> OutputHead {
        self.inner().output_head()
    }
    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        self.inner().encode(images)
    }
    fn decode(&self, codes: &Tensor) -> Result<Tensor> {
        self.inner().decode(codes)
    }
}

/// Draws `n` standard-normal prior codes and decodes them. The style proxy
/// routes its prior codes through the mapping network first.
pub fn sample_ancestral(model: &AnyModel, rng: &mut RngState, n: usize) -> Result<Tensor> {
    match model {
        AnyModel::StyleProxy(m) => {
            let z = rng_normal(rng, &[n, m.latent_dim]);
            let w = m.map_to_w(&z)?;
            m.decode(&w)
        }
        other => {
            let z = rng_normal(rng, &[n, other.latent_dim()]);
            other.decode(&z)
        }
    }
}

/// Mean over images and pixels of `(x − decode(encode(x)))²`.
pub fn reconstruction_mse(model: &dyn LatentModel, images: &Tensor) -> Result<f64> {
    let flat = images.as_matrix();
    let recon = model.decode(&model.encode(&flat)?)?;
    Ok(mean_row_mse(&flat, &recon))
}

/// Mean of per-row pixel MSE, accumulated in `f64` in row order.
pub fn mean_row_mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let n = a.rows();
    if n == 0 {
        return 0.0;
    }
    (0..n)
        .map(|i| crate::numerics::mse(a.row(i), b.row(i)))
        .sum::<f64>()
        / n as f64
}

/// Mean over `samples` of the smallest pixel MSE to any row of `data`.
pub fn nearest_neighbor_mse(samples: &Tensor, data: &Tensor) -> Result<f64> {
    let (s, d) = (samples.as_matrix(), data.as_matrix());
    if s.row_len() != d.row_len() {
        return Err(dim_mismatch(
            "nearest-neighbor image size",
            d.row_len(),
            s.row_len(),
        ));
    }
    if s.rows() == 0 || d.rows() == 0 {
        return Err(Error::InvalidArgument(
            "nearest-neighbor search needs nonempty sets".into(),
        ));
    }
    let best: Vec<f64> = (0..s.rows())
        .into_par_iter()
        .map(|i| {
            (0..d.rows())
                .map(|j| crate::numerics::mse(s.row(i), d.row(j)))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    Ok(best.iter().sum::<f64>() / best.len() as f64)
}

/// Decodes `z` with coordinate `var_index` swept over `steps` equally spaced
/// values in `[lo, hi]`. Returns the `steps × P` images.
pub fn latent_traversal(
    model: &dyn LatentModel,
    z: &[f32],
    var_index: usize,
    lo: f64,
    hi: f64,
    steps: usize,
) -> Result<Tensor> {
    let d = model.latent_dim();
    if z.len() != d {
        return Err(dim_mismatch("traversal code width", d, z.len()));
    }
    if var_index >= d {
        return Err(Error::IndexOutOfRange {
            what: "latent variable",
            index: var_index,
            size: d,
        });
    }
    if steps == 0 {
        return Err(Error::InvalidArgument(
            "traversal needs at least one step".into(),
        ));
    }
    let mut codes = Vec::with_capacity(steps * d);
    for s in 0..steps {
        let t = if steps == 1 {
            lo
        } else {
            lo + (hi - lo) * s as f64 / (steps - 1) as f64
        };
        let mut row = z.to_vec();
        row[var_index] = t as f32;
        codes.extend(row);
    }
    model.decode(&Tensor::matrix(steps, d, codes)?)
}

/// Lays `k × (side·side)` images side by side into one `side × (k·side)` strip.
pub fn image_strip(images: &Tensor, side: usize) -> Result<Tensor> {
    let k = images.rows();
    if images.row_len() != side * side {
        return Err(dim_mismatch(
            "strip image size",
            side * side,
            images.row_len(),
        ));
    }
    let width = k * side;
    let mut data = vec![0.0f32; side * width];
    for i in 0..k {
        let img = images.row(i);
        for y in 0..side {
            data[y * width + i * side..y * width + (i + 1) * side]
                .copy_from_slice(&img[y * side..(y + 1) * side]);
        }
    }
    Tensor::new(vec![side, width], data)
}
