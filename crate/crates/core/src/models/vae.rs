//! Gaussian-posterior autoencoders: the plain VAE and the split-decoder SVAE.
//!
//! Both minimize `MSE(x, x̂) + γ·KL(N(μ, σ²) ‖ N(0, I))` per sample, with the
//! reconstruction term averaged over pixels and the KL summed over latent
//! coordinates. Sampling uses the reparameterization `z = μ + σ⊙ε`.

use std::time::Instant;

use super::decoder::{chain_backward, chain_forward, OutputHead};
use super::{encode_with, mean_row_mse, LatentModel, ModelKind, TrainLog};
use crate::error::{dim_mismatch, Error, Result};
use crate::manifold::Dataset;
use crate::numerics::{
    rng_normal, Activation, AdamConfig, Net, NetGrads, OptState, Real, RngState, Tensor,
};

#[derive(Clone, Debug, PartialEq)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub gamma: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    /// Fraction of the dataset (taken from the end) held out for evaluation.
    pub holdout: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            gamma: 0.002,
            epochs: 30,
            lr: 1e-3,
            batch_size: 64,
            seed: 0,
            encoder_hidden: vec![256, 128],
            decoder_hidden: vec![128, 256],
            holdout: 0.1,
        }
    }
}

impl VaeConfig {
    /// Defaults for the split-decoder variant (wider latent space).
    pub fn svae() -> Self {
        Self {
            latent_dim: 24,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel {
    /// `P → … → 2d`: posterior mean then log-variance.
    pub encoder: Net,
    /// `d → … → P`, logistic output.
    pub decoder: Net,
    pub latent_dim: usize,
    pub gamma: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvaeModel {
    pub encoder: Net,
    /// `d → … → 3P` logits for `(x̂₁, x̂₂, σ)`.
    pub decoder: Net,
    pub latent_dim: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl VaeModel {
    pub fn new(encoder: Net, decoder: Net, gamma: f64, seed: u64) -> Result<Self> {
        let latent_dim = decoder.d_in();
        check_shapes(&encoder, &decoder, latent_dim, OutputHead::Direct)?;
        Ok(Self {
            encoder,
            decoder,
            latent_dim,
            gamma,
            seed,
        })
    }

    /// Posterior means and log-variances, each `n × d`.
    pub fn posterior(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        posterior(&self.encoder, self.latent_dim, images)
    }
}

impl SvaeModel {
    pub fn new(encoder: Net, decoder: Net, gamma: f64, seed: u64) -> Result<Self> {
        let latent_dim = decoder.d_in();
        check_shapes(&encoder, &decoder, latent_dim, OutputHead::Split)?;
        Ok(Self {
            encoder,
            decoder,
            latent_dim,
            gamma,
            seed,
        })
    }
}

fn check_shapes(encoder: &Net, decoder: &Net, d: usize, head: OutputHead) -> Result<()> {
    if encoder.d_out() != 2 * d {
        return Err(dim_mismatch(
            "encoder output width (2d)",
            2 * d,
            encoder.d_out(),
        ));
    }
    if head.image_dim(decoder.d_out()) != encoder.d_in() {
        return Err(dim_mismatch(
            "decoder image width",
            encoder.d_in(),
            decoder.d_out(),
        ));
    }
    Ok(())
}

fn posterior(encoder: &Net, d: usize, images: &Tensor) -> Result<(Tensor, Tensor)> {
    let h = encoder.predict(&images.as_matrix())?;
    let n = h.rows();
    let mut mu = Vec::with_capacity(n * d);
    let mut lv = Vec::with_capacity(n * d);
    for i in 0..n {
        mu.extend_from_slice(&h.row(i)[..d]);
        lv.extend_from_slice(&h.row(i)[d..]);
    }
    Ok((Tensor::matrix(n, d, mu)?, Tensor::matrix(n, d, lv)?))
}

impl LatentModel for VaeModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Vae
    }
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }
    fn image_dim(&self) -> usize {
        self.encoder.d_in()
    }
    fn decoder_nets(&self) -> Vec<&Net> {
        vec![&self.decoder]
    }
    fn output_head(&self) -> OutputHead {
        OutputHead::Direct
    }
    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        encode_with(&self.encoder, images, 2 * self.latent_dim, self.latent_dim)
    }
}

impl LatentModel for SvaeModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Svae
    }
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }
    fn image_dim(&self) -> usize {
        self.encoder.d_in()
    }
    fn decoder_nets(&self) -> Vec<&Net> {
        vec![&self.decoder]
    }
    fn output_head(&self) -> OutputHead {
        OutputHead::Split
    }
    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        encode_with(&self.encoder, images, 2 * self.latent_dim, self.latent_dim)
    }
}

/// Loss, its components and gradients for one batch.
#[derive(Clone, Debug)]
pub struct VaeObjective<T> {
    pub loss: f64,
    /// Mean per-pixel squared error.
    pub recon: f64,
    /// Mean per-sample KL divergence.
    pub kl: f64,
    pub encoder_grads: NetGrads<T>,
    pub decoder_grads: NetGrads<T>,
}

/// Batch objective with the reparameterization noise `noise` (`m × d`) fixed,
/// so the loss is a deterministic function of the parameters.
pub fn vae_objective<T: Real>(
    encoder: &Net<T>,
    decoder: &Net<T>,
    head: OutputHead,
    x: &Tensor<T>,
    noise: &Tensor<T>,
    gamma: f64,
) -> Result<VaeObjective<T>> {
    let x = x.as_matrix();
    let m = x.rows();
    let d = decoder.d_in();
    if noise.rows() != m || noise.row_len() != d {
        return Err(dim_mismatch(
            "noise shape",
            format!("[{m}, {d}]"),
            format!("{:?}", noise.shape()),
        ));
    }
    let (h, enc_cache) = encoder.forward(&x)?;
    if h.row_len() != 2 * d {
        return Err(dim_mismatch(
            "encoder output width (2d)",
            2 * d,
            h.row_len(),
        ));
    }

    let mut z = Vec::with_capacity(m * d);
    let mut sigma = Vec::with_capacity(m * d);
    let mut kl = 0.0;
    for i in 0..m {
        let hr = h.row(i);
        let er = noise.row(i);
        for j in 0..d {
            let mu = hr[j].to_f64();
            let lv = hr[d + j].to_f64();
            let s = libm::exp(0.5 * lv);
            sigma.push(s);
            z.push(T::from_f64(mu + s * er[j].to_f64()));
            kl += 0.5 * (mu * mu + s * s - 1.0 - lv);
        }
    }
    let z = Tensor::new(vec![m, d], z)?;
    let (xhat, dec_cache) = chain_forward(&[decoder], head, &z)?;
    let p = xhat.row_len();
    if p != x.row_len() {
        return Err(dim_mismatch("reconstruction width", x.row_len(), p));
    }
    let recon = mean_row_mse(&x, &xhat);
    let scale = 2.0 / (p * m) as f64;
    let grad_img = Tensor::from_fn(&[m, p], |k| {
        T::from_f64(scale * (xhat.data()[k].to_f64() - x.data()[k].to_f64()))
    });
    let (mut dec_grads, gz) = chain_backward(&[decoder], &dec_cache, &grad_img)?;

    let inv_m = 1.0 / m as f64;
    let mut gh = vec![T::default(); m * 2 * d];
    for i in 0..m {
        let hr = h.row(i);
        for j in 0..d {
            let k = i * d + j;
            let mu = hr[j].to_f64();
            let s = sigma[k];
            let g = gz.data()[k].to_f64();
            gh[i * 2 * d + j] = T::from_f64(g + gamma * mu * inv_m);
            gh[i * 2 * d + d + j] = T::from_f64(
                g * noise.data()[k].to_f64() * 0.5 * s + gamma * 0.5 * (s * s - 1.0) * inv_m,
            );
        }
    }
    let gh = Tensor::new(vec![m, 2 * d], gh)?;
    let encoder_grads = encoder.backward_params(&enc_cache, &gh)?;
    let kl = kl * inv_m;
    Ok(VaeObjective {
        loss: recon + gamma * kl,
        recon,
        kl,
        encoder_grads,
        decoder_grads: dec_grads.remove(0),
    })
}

struct Trained {
    encoder: Net,
    decoder: Net,
    log: TrainLog,
}

fn train_gaussian_autoencoder(
    dataset: &Dataset,
    cfg: &VaeConfig,
    head: OutputHead,
) -> Result<Trained> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument(
            "training needs a nonempty dataset".into(),
        ));
    }
    if !(cfg.gamma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gamma must be positive, got {}",
            cfg.gamma
        )));
    }
    if cfg.batch_size == 0 || cfg.latent_dim == 0 {
        return Err(Error::InvalidArgument(
            "batch size and latent dim must be positive".into(),
        ));
    }
    let start = Instant::now();
    let rng = RngState::new(cfg.seed);
    let (train, _) = dataset.split_holdout(cfg.holdout);
    let p = train.row_len();
    let d = cfg.latent_dim;

    let mut enc_dims = vec![p];
    enc_dims.extend(&cfg.encoder_hidden);
    enc_dims.push(2 * d);
    let mut dec_dims = vec![d];
    dec_dims.extend(&cfg.decoder_hidden);
    let (dec_out, dec_act) = match head {
        OutputHead::Direct => (p, Activation::Sigmoid),
        OutputHead::Split => (3 * p, Activation::Identity),
    };
    dec_dims.push(dec_out);
    let mut init_rng = rng.child(1);
    let mut encoder = Net::mlp(
        &enc_dims,
        Activation::Relu,
        Activation::Identity,
        &mut init_rng,
    )?;
    let mut decoder = Net::mlp(&dec_dims, Activation::Relu, dec_act, &mut init_rng)?;

    let adam = AdamConfig::new(cfg.lr);
    let mut enc_opt = OptState::for_params(adam, &encoder.params_mut());
    let mut dec_opt = OptState::for_params(adam, &decoder.params_mut());
    let mut log = TrainLog::new(cfg.seed, &["loss", "recon", "kl"]);
    let mut noise_rng = rng.child(2);
    let mut order_rng = rng.child(3);

    for epoch in 0..cfg.epochs {
        let order = order_rng.permutation(train.rows());
        let (mut sum_loss, mut sum_recon, mut sum_kl, mut count) = (0.0, 0.0, 0.0, 0usize);
        for batch_idx in order.chunks(cfg.batch_size) {
            let x = train.select_rows(batch_idx);
            let noise = rng_normal::<f32>(&mut noise_rng, &[batch_idx.len(), d]);
            let obj = vae_objective(&encoder, &decoder, head, &x, &noise, cfg.gamma)?;
            if !obj.loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    reason: format!(
                        "non-finite loss {} (recon {}, kl {})",
                        obj.loss, obj.recon, obj.kl
                    ),
                });
            }
            step(&mut enc_opt, &mut encoder, &obj.encoder_grads, epoch)?;
            step(&mut dec_opt, &mut decoder, &obj.decoder_grads, epoch)?;
            let w = batch_idx.len() as f64;
            sum_loss += obj.loss * w;
            sum_recon += obj.recon * w;
            sum_kl += obj.kl * w;
            count += batch_idx.len();
        }
        let c = count as f64;
        log.push(epoch, vec![sum_loss / c, sum_recon / c, sum_kl / c]);
    }

    log.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(Trained {
        encoder,
        decoder,
        log,
    })
}

pub(crate) fn step(
    opt: &mut OptState,
    net: &mut Net,
    grads: &NetGrads,
    epoch: usize,
) -> Result<()> {
    opt.adam_step(&mut net.params_mut(), &grads.slices())
        .map_err(|e| match e {
            Error::NonFinite(reason) => Error::Divergence { epoch, reason },
            other => other,
        })
}

/// Trains a VAE; the held-out split is scored with posterior-mean encodings.
pub fn train_vae(dataset: &Dataset, cfg: &VaeConfig) -> Result<(VaeModel, TrainLog)> {
    let t = train_gaussian_autoencoder(dataset, cfg, OutputHead::Direct)?;
    let model = VaeModel::new(t.encoder, t.decoder, cfg.gamma, cfg.seed)?;
    let mut log = t.log;
    let (_, held) = dataset.split_holdout(cfg.holdout);
    log.holdout_mse = Some(super::reconstruction_mse(&model, &held)?);
    Ok((model, log))
}

/// Trains the split-decoder variant.
pub fn train_svae(dataset: &Dataset, cfg: &VaeConfig) -> Result<(SvaeModel, TrainLog)> {
    let t = train_gaussian_autoencoder(dataset, cfg, OutputHead::Split)?;
    let model = SvaeModel::new(t.encoder, t.decoder, cfg.gamma, cfg.seed)?;
    let mut log = t.log;
    let (_, held) = dataset.split_holdout(cfg.holdout);
    log.holdout_mse = Some(super::reconstruction_mse(&model, &held)?);
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::make_dataset;
    use crate::numerics::grad_check_fn;

    fn small_nets(head: OutputHead, seed: u64) -> (Net<f64>, Net<f64>) {
        let mut rng = RngState::new(seed);
        let enc = Net::mlp(
            &[10, 8, 6],
            Activation::Tanh,
            Activation::Identity,
            &mut rng,
        )
        .unwrap();
        let out = match head {
            OutputHead::Direct => 10,
            OutputHead::Split => 30,
        };
        let act = if head == OutputHead::Direct {
            Activation::Sigmoid
        } else {
            Activation::Identity
        };
        let dec = Net::mlp(&[3, 7, out], Activation::Tanh, act, &mut rng).unwrap();
        (enc.cast(), dec.cast())
    }

    fn check(head: OutputHead) -> f64 {
        let (enc, dec) = small_nets(head, 4);
        let mut rng = RngState::new(5);
        let x = Tensor::<f64>::from_fn(&[4, 10], |_| rng.uniform());
        let noise = rng_normal::<f64>(&mut rng, &[4, 3]);
        let ne = enc.num_params();
        let mut params = enc.flatten();
        params.extend(dec.flatten());
        let (mut e, mut dn) = (enc.clone(), dec.clone());
        grad_check_fn(
            &params,
            |p| {
                e.load_flat(&p[..ne]);
                dn.load_flat(&p[ne..]);
                let o = vae_objective(&e, &dn, head, &x, &noise, 0.3)?;
                let mut g = o.encoder_grads.flatten();
                g.extend(o.decoder_grads.flatten());
                Ok((o.loss, g))
            },
            1e-5,
            usize::MAX,
            0,
        )
        .unwrap()
    }

    #[test]
    fn vae_objective_gradients_match_finite_differences() {
        let err = check(OutputHead::Direct);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn svae_objective_gradients_match_finite_differences() {
        let err = check(OutputHead::Split);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn zero_epochs_returns_seeded_initialization() {
        let ds = make_dataset(1, 50).unwrap();
        let cfg = VaeConfig {
            epochs: 0,
            encoder_hidden: vec![32],
            decoder_hidden: vec![32],
            latent_dim: 4,
            ..VaeConfig::default()
        };
        let (a, log) = train_vae(&ds, &cfg).unwrap();
        let (b, _) = train_vae(&ds, &cfg).unwrap();
        assert!(log.rows.is_empty());
        assert_eq!(a, b);
        assert!(log.holdout_mse.unwrap().is_finite());
    }

    #[test]
    fn short_training_is_bit_reproducible_and_lowers_loss() {
        let ds = make_dataset(2, 200).unwrap();
        let cfg = VaeConfig {
            epochs: 3,
            encoder_hidden: vec![32],
            decoder_hidden: vec![32],
            latent_dim: 4,
            batch_size: 32,
            ..VaeConfig::default()
        };
        let (a, la) = train_vae(&ds, &cfg).unwrap();
        let (b, lb) = train_vae(&ds, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la.rows, lb.rows);
        assert!(la.rows[2].1[0] < la.rows[0].1[0]);
        let (s1, _) = train_svae(
            &ds,
            &VaeConfig {
                latent_dim: 5,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(s1.decoder.d_out(), 3 * 256);
        assert_eq!(s1.encode(&ds.flat_images()).unwrap().shape(), &[200, 5]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let ds = make_dataset(1, 10).unwrap();
        assert!(train_vae(
            &ds,
            &VaeConfig {
                gamma: 0.0,
                ..VaeConfig::default()
            }
        )
        .is_err());
        assert!(train_vae(
            &ds,
            &VaeConfig {
                batch_size: 0,
                ..VaeConfig::default()
            }
        )
        .is_err());
    }
}
