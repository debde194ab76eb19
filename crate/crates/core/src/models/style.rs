//! Style-proxy generator: a mapping network sends prior codes `z` to an
//! intermediate space `w`, and a synthesis network renders `w`.

use super::decoder::OutputHead;
use super::gan::{
    encode_recoded, fit_recoder, recoder_features, train_adversarial, GanConfig, RecoderConfig,
};
use super::{mean_row_mse, LatentModel, ModelKind, TrainLog};
use crate::error::{dim_mismatch, Error, Result};
use crate::manifold::Dataset;
use crate::numerics::{rng_normal, Activation, Net, RngState, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct StyleConfig {
    /// Adversarial settings; `latent_dim` is the size of both `z` and `w`.
    pub gan: GanConfig,
    pub mapping_hidden: Vec<usize>,
    pub mapping_alpha: f64,
    /// Learning-rate multiplier applied to the mapping network.
    pub mapping_lr_scale: f64,
}

impl Default for StyleConfig {
    fn default() -> Self {
        Self {
            gan: GanConfig {
                latent_dim: 32,
                ..GanConfig::default()
            },
            mapping_hidden: vec![64, 64],
            mapping_alpha: 0.2,
            mapping_lr_scale: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleProxyModel {
    /// `z → w`, leaky-relu hidden layers.
    pub mapping: Net,
    /// `w → P`, logistic output.
    pub synthesis: Net,
    pub discriminator: Net,
    /// `P → w`, once trained.
    pub w_recoder: Option<Net>,
    /// Size of the prior space `z`.
    pub latent_dim: usize,
    pub seed: u64,
}

impl StyleProxyModel {
    pub fn new(
        mapping: Net,
        synthesis: Net,
        discriminator: Net,
        w_recoder: Option<Net>,
        seed: u64,
    ) -> Result<Self> {
        if mapping.d_out() != synthesis.d_in() {
            return Err(dim_mismatch(
                "synthesis input",
                mapping.d_out(),
                synthesis.d_in(),
            ));
        }
        if discriminator.d_in() != synthesis.d_out() || discriminator.d_out() != 1 {
            return Err(dim_mismatch(
                "discriminator shape",
                format!("{} → 1", synthesis.d_out()),
                format!("{} → {}", discriminator.d_in(), discriminator.d_out()),
            ));
        }
        if let Some(r) = &w_recoder {
            if r.d_in() != synthesis.d_out() || r.d_out() != synthesis.d_in() {
                return Err(dim_mismatch(
                    "w recoder shape",
                    format!("{} → {}", synthesis.d_out(), synthesis.d_in()),
                    format!("{} → {}", r.d_in(), r.d_out()),
                ));
            }
        }
        Ok(Self {
            latent_dim: mapping.d_in(),
            mapping,
            synthesis,
            discriminator,
            w_recoder,
            seed,
        })
    }

    pub fn w_dim(&self) -> usize {
        self.mapping.d_out()
    }

    pub fn map_to_w(&self, z: &Tensor) -> Result<Tensor> {
        if z.row_len() != self.latent_dim {
            return Err(dim_mismatch(
                "prior code width",
                self.latent_dim,
                z.row_len(),
            ));
        }
        super::par_rows(z, self.w_dim(), |chunk| self.mapping.predict(chunk))
    }

    /// Fresh `(z, w)` pairs from the prior.
    pub fn sample_zw(&self, rng: &mut RngState, n: usize) -> Result<(Tensor, Tensor)> {
        let z = rng_normal(rng, &[n, self.latent_dim]);
        let w = self.map_to_w(&z)?;
        Ok((z, w))
    }

    pub fn train_recoder(&mut self, cfg: &RecoderConfig) -> Result<TrainLog> {
        let (mapping, synthesis) = (&self.mapping, &self.synthesis);
        let d = self.latent_dim;
        let (net, log) = fit_recoder(synthesis.d_out(), mapping.d_out(), cfg, |rng, m| {
            let z = rng_normal(rng, &[m, d]);
            let w = mapping.predict(&z)?;
            let x = synthesis.predict(&w)?;
            Ok((w, x))
        })?;
        self.w_recoder = Some(net);
        Ok(log)
    }

    /// Per-component MSE of the recoder against `w` on fresh samples.
    pub fn recoder_latent_mse(&self, rng: &mut RngState, n: usize) -> Result<f64> {
        let r = self.w_recoder.as_ref().ok_or(Error::MissingRecoder)?;
        let (_, w) = self.sample_zw(rng, n)?;
        let what = r.predict(&recoder_features(&self.synthesis.predict(&w)?))?;
        Ok(mean_row_mse(&w, &what))
    }
}

impl LatentModel for StyleProxyModel {
    fn kind(&self) -> ModelKind {
        ModelKind::StyleProxy
    }
    fn latent_dim(&self) -> usize {
        self.w_dim()
    }
    fn image_dim(&self) -> usize {
        self.synthesis.d_out()
    }
    fn decoder_nets(&self) -> Vec<&Net> {
        vec![&self.synthesis]
    }
    fn output_head(&self) -> OutputHead {
        OutputHead::Direct
    }
    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let r = self.w_recoder.as_ref().ok_or(Error::MissingRecoder)?;
        encode_recoded(r, images, self.w_dim())
    }
}

/// Adversarial training of mapping and synthesis together; the mapping net
/// learns at `mapping_lr_scale` times the generator rate.
pub fn train_style_proxy(
    dataset: &Dataset,
    cfg: &StyleConfig,
) -> Result<(StyleProxyModel, TrainLog)> {
    let d = cfg.gan.latent_dim;
    if d == 0 {
        return Err(Error::InvalidArgument("latent dim must be positive".into()));
    }
    if !(cfg.mapping_lr_scale >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "mapping learning-rate scale must be non-negative, got {}",
            cfg.mapping_lr_scale
        )));
    }
    let mut rng = RngState::new(cfg.gan.seed);
    let p = dataset.flat_images().row_len();
    let mut init = rng.child(1);
    let leaky = Activation::LeakyRelu {
        alpha: cfg.mapping_alpha,
    };
    let mut mdims = vec![d];
    mdims.extend(&cfg.mapping_hidden);
    mdims.push(d);
    let mut sdims = vec![d];
    sdims.extend(&cfg.gan.generator_hidden);
    sdims.push(p);
    let mut ddims = vec![p];
    ddims.extend(&cfg.gan.discriminator_hidden);
    ddims.push(1);
    let mapping = Net::mlp(&mdims, leaky, Activation::Identity, &mut init)?;
    let synthesis = Net::mlp(&sdims, Activation::Relu, Activation::Sigmoid, &mut init)?;
    let mut disc = Net::mlp(
        &ddims,
        Activation::LeakyRelu { alpha: 0.2 },
        Activation::Identity,
        &mut init,
    )?;
    let mut nets = vec![mapping, synthesis];
    let run = train_adversarial(
        dataset,
        &cfg.gan,
        &mut nets,
        &[cfg.mapping_lr_scale, 1.0],
        &mut disc,
        &mut rng,
    )?;
    let synthesis = nets.pop().expect("synthesis net");
    let mapping = nets.pop().expect("mapping net");
    Ok((
        StyleProxyModel::new(mapping, synthesis, disc, None, cfg.gan.seed)?,
        run.log,
    ))
}
