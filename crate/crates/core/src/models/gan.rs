//! Adversarial generator/discriminator pair, plus the recoder that inverts a
//! trained generator by regressing latent codes from generated images.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::decoder::OutputHead;
use super::vae::step;
use super::{mean_row_mse, AnyModel, LatentModel, ModelKind, TrainLog};
use crate::error::{dim_mismatch, Error, Result};
use crate::manifold::Dataset;
use crate::numerics::nn::sigmoid;
use crate::numerics::{
    rng_normal, Activation, AdamConfig, Net, NetGrads, OptState, Real, RngState, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversarialLoss {
    NonSaturating,
    LeastSquares,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanConfig {
    pub latent_dim: usize,
    pub epochs: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub loss: AdversarialLoss,
    pub batch_size: usize,
    pub seed: u64,
    pub generator_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    /// Mean across-batch pixel variance that counts as collapsed.
    pub collapse_variance: f64,
    /// Consecutive collapsed epochs before training aborts.
    pub collapse_patience: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            epochs: 30,
            lr_g: 2e-4,
            lr_d: 2e-4,
            beta1: 0.5,
            loss: AdversarialLoss::LeastSquares,
            batch_size: 64,
            seed: 0,
            generator_hidden: vec![128, 256],
            discriminator_hidden: vec![256, 128],
            collapse_variance: 1e-4,
            collapse_patience: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanModel {
    /// `d → … → P`, logistic output.
    pub generator: Net,
    /// `P → … → 1`, raw score.
    pub discriminator: Net,
    /// `P → … → d`, once trained.
    pub recoder: Option<Net>,
    pub latent_dim: usize,
    pub seed: u64,
}

impl GanModel {
    pub fn new(
        generator: Net,
        discriminator: Net,
        recoder: Option<Net>,
        seed: u64,
    ) -> Result<Self> {
        let d = generator.d_in();
        if discriminator.d_in() != generator.d_out() || discriminator.d_out() != 1 {
            return Err(dim_mismatch(
                "discriminator shape",
                format!("{} → 1", generator.d_out()),
                format!("{} → {}", discriminator.d_in(), discriminator.d_out()),
            ));
        }
        if let Some(r) = &recoder {
            if r.d_in() != generator.d_out() || r.d_out() != d {
                return Err(dim_mismatch(
                    "recoder shape",
                    format!("{} → {d}", generator.d_out()),
                    format!("{} → {}", r.d_in(), r.d_out()),
                ));
            }
        }
        Ok(Self {
            generator,
            discriminator,
            recoder,
            latent_dim: d,
            seed,
        })
    }

    /// Fraction of a balanced real/fake batch the discriminator classifies correctly.
    pub fn discriminator_accuracy(
        &self,
        real: &Tensor,
        rng: &mut RngState,
        loss: AdversarialLoss,
    ) -> Result<f64> {
        let z = rng_normal(rng, &[real.rows(), self.latent_dim]);
        let fake = self.generator.predict(&z)?;
        let (_, _, acc) =
            discriminator_objective(&self.discriminator, &real.as_matrix(), &fake, loss)?;
        Ok(acc)
    }

    /// Per-component latent MSE of the recoder on fresh `(z, G(z))` pairs.
    pub fn recoder_latent_mse(&self, rng: &mut RngState, n: usize) -> Result<f64> {
        let recoder = self.recoder.as_ref().ok_or(Error::MissingRecoder)?;
        let z = rng_normal(rng, &[n, self.latent_dim]);
        let zhat = recoder.predict(&recoder_features(&self.generator.predict(&z)?))?;
        Ok(mean_row_mse(&z, &zhat))
    }

    /// Trains (or retrains) the recoder on freshly generated pairs.
    pub fn train_recoder(&mut self, cfg: &RecoderConfig) -> Result<TrainLog> {
        let gen = &self.generator;
        let d = self.latent_dim;
        let (net, log) = fit_recoder(gen.d_out(), d, cfg, |rng, m| {
            let z = rng_normal(rng, &[m, d]);
            let x = gen.predict(&z)?;
            Ok((z, x))
        })?;
        self.recoder = Some(net);
        Ok(log)
    }
}

impl LatentModel for GanModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Gan
    }
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }
    fn image_dim(&self) -> usize {
        self.generator.d_out()
    }
    fn decoder_nets(&self) -> Vec<&Net> {
        vec![&self.generator]
    }
    fn output_head(&self) -> OutputHead {
        OutputHead::Direct
    }
    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let r = self.recoder.as_ref().ok_or(Error::MissingRecoder)?;
        encode_recoded(r, images, self.latent_dim)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-x.abs()))
}

/// Discriminator loss on a real and a fake batch, its gradients, and the
/// classification accuracy over both batches.
pub fn discriminator_objective<T: Real>(
    disc: &Net<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    loss: AdversarialLoss,
) -> Result<(f64, NetGrads<T>, f64)> {
    let (sr, cr) = disc.forward(real)?;
    let (sf, cf) = disc.forward(fake)?;
    let (mr, mf) = (sr.rows() as f64, sf.rows() as f64);
    let mut value = 0.0;
    let mut correct = 0usize;
    let gr = Tensor::from_fn(sr.shape(), |i| {
        let s = sr.data()[i].to_f64();
        let g = match loss {
            AdversarialLoss::LeastSquares => {
                value += 0.5 * (s - 1.0) * (s - 1.0) / mr;
                correct += usize::from(s > 0.5);
                (s - 1.0) / mr
            }
            AdversarialLoss::NonSaturating => {
                value += softplus(-s) / mr;
                correct += usize::from(s > 0.0);
                (sigmoid(s) - 1.0) / mr
            }
        };
        T::from_f64(g)
    });
    let gf = Tensor::from_fn(sf.shape(), |i| {
        let s = sf.data()[i].to_f64();
        let g = match loss {
            AdversarialLoss::LeastSquares => {
                value += 0.5 * s * s / mf;
                correct += usize::from(s < 0.5);
                s / mf
            }
            AdversarialLoss::NonSaturating => {
                value += softplus(s) / mf;
                correct += usize::from(s < 0.0);
                sigmoid(s) / mf
            }
        };
        T::from_f64(g)
    });
    let mut grads = disc.backward_params(&cr, &gr)?;
    grads.add_assign(&disc.backward_params(&cf, &gf)?);
    let acc = correct as f64 / (mr + mf);
    Ok((value, grads, acc))
}

/// Generator loss for prior codes `z` against a fixed discriminator; returns
/// the loss, generator gradients and the generated batch.
pub fn generator_objective<T: Real>(
    gen: &Net<T>,
    disc: &Net<T>,
    z: &Tensor<T>,
    loss: AdversarialLoss,
) -> Result<(f64, NetGrads<T>, Tensor<T>)> {
    let (fake, gcache) = gen.forward(z)?;
    let (value, gx) = generator_loss_on_images(disc, &fake, loss)?;
    let (grads, _) = gen.backward(&gcache, &gx)?;
    Ok((value, grads, fake))
}

/// Generator-side adversarial loss of a batch of images and its gradient with
/// respect to those images.
pub(crate) fn generator_loss_on_images<T: Real>(
    disc: &Net<T>,
    fake: &Tensor<T>,
    loss: AdversarialLoss,
) -> Result<(f64, Tensor<T>)> {
    let (s, dcache) = disc.forward(fake)?;
    let m = s.rows() as f64;
    let mut value = 0.0;
    let gs = Tensor::from_fn(s.shape(), |i| {
        let v = s.data()[i].to_f64();
        let g = match loss {
            AdversarialLoss::LeastSquares => {
                value += 0.5 * (v - 1.0) * (v - 1.0) / m;
                (v - 1.0) / m
            }
            AdversarialLoss::NonSaturating => {
                value += softplus(-v) / m;
                (sigmoid(v) - 1.0) / m
            }
        };
        T::from_f64(g)
    });
    let (_, gx) = disc.backward(&dcache, &gs)?;
    Ok((value, gx))
}

/// Mean over pixels of the across-batch variance.
pub(crate) fn batch_pixel_variance(images: &Tensor) -> f64 {
    let (m, p) = (images.rows(), images.row_len());
    if m < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for j in 0..p {
        let mean = (0..m).map(|i| images.row(i)[j] as f64).sum::<f64>() / m as f64;
        total += (0..m)
            .map(|i| {
                let d = images.row(i)[j] as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / m as f64;
    }
    total / p as f64
}

pub(crate) struct AdversarialRun {
    pub log: TrainLog,
}

/// Alternating discriminator/generator updates over the dataset. The
/// generator is the chain `nets` (updated with per-net learning-rate scales).
pub(crate) fn train_adversarial(
    dataset: &Dataset,
    cfg: &GanConfig,
    nets: &mut [Net],
    lr_scale: &[f64],
    disc: &mut Net,
    rng: &mut RngState,
) -> Result<AdversarialRun> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument(
            "training needs a nonempty dataset".into(),
        ));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let start = Instant::now();
    let real_all = dataset.flat_images();
    let d = nets[0].d_in();
    let g_adam = AdamConfig::new(cfg.lr_g).with_betas(cfg.beta1, 0.999);
    let mut g_opts: Vec<OptState> = nets
        .iter_mut()
        .zip(lr_scale)
        .map(|(n, s)| {
            OptState::for_params(
                AdamConfig {
                    lr: g_adam.lr * s,
                    ..g_adam
                },
                &n.params_mut(),
            )
        })
        .collect();
    let mut d_opt = OptState::for_params(
        AdamConfig::new(cfg.lr_d).with_betas(cfg.beta1, 0.999),
        &disc.params_mut(),
    );
    let mut log = TrainLog::new(cfg.seed, &["d_loss", "g_loss", "d_acc", "gen_variance"]);
    let mut order_rng = rng.child(10);
    let mut z_rng = rng.child(11);
    let z_probe: Tensor = rng_normal(&mut rng.child(12), &[256, d]);
    let mut collapsed = 0usize;

    for epoch in 0..cfg.epochs {
        let order = order_rng.permutation(real_all.rows());
        let (mut sd, mut sg, mut sa, mut nb) = (0.0, 0.0, 0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let real = real_all.select_rows(idx);
            let z: Tensor = rng_normal(&mut z_rng, &[idx.len(), d]);

            let refs: Vec<&Net> = nets.iter().collect();
            let fake = super::decoder::decode_chain(&refs, OutputHead::Direct, &z)?;
            let (dl, dgrads, acc) = discriminator_objective(disc, &real, &fake, cfg.loss)?;
            step(&mut d_opt, disc, &dgrads, epoch)?;

            let refs: Vec<&Net> = nets.iter().collect();
            let (fake, cache) = super::decoder::chain_forward(&refs, OutputHead::Direct, &z)?;
            let (gl, gx) = generator_loss_on_images(disc, &fake, cfg.loss)?;
            let (ggrads, _) = super::decoder::chain_backward(&refs, &cache, &gx)?;
            for ((net, opt), g) in nets.iter_mut().zip(g_opts.iter_mut()).zip(&ggrads) {
                step(opt, net, g, epoch)?;
            }
            if !dl.is_finite() || !gl.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    reason: format!("non-finite adversarial loss (d {dl}, g {gl})"),
                });
            }
            sd += dl;
            sg += gl;
            sa += acc;
            nb += 1;
        }
        let refs: Vec<&Net> = nets.iter().collect();
        let probe = super::decoder::decode_chain(&refs, OutputHead::Direct, &z_probe)?;
        let var = batch_pixel_variance(&probe);
        let nb = nb.max(1) as f64;
        log.push(epoch, vec![sd / nb, sg / nb, sa / nb, var]);
        if var < cfg.collapse_variance {
            collapsed += 1;
            if collapsed >= cfg.collapse_patience {
                return Err(Error::ModeCollapse {
                    threshold: cfg.collapse_variance,
                    epochs: collapsed,
                    variance: var,
                });
            }
        } else {
            collapsed = 0;
        }
    }
    log.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(AdversarialRun { log })
}

pub fn train_gan(dataset: &Dataset, cfg: &GanConfig) -> Result<(GanModel, TrainLog)> {
    if cfg.latent_dim == 0 {
        return Err(Error::InvalidArgument("latent dim must be positive".into()));
    }
    let mut rng = RngState::new(cfg.seed);
    let p = dataset.flat_images().row_len();
    let mut init = rng.child(1);
    let leaky = Activation::LeakyRelu { alpha: 0.2 };
    let mut gdims = vec![cfg.latent_dim];
    gdims.extend(&cfg.generator_hidden);
    gdims.push(p);
    let mut ddims = vec![p];
    ddims.extend(&cfg.discriminator_hidden);
    ddims.push(1);
    let gen = Net::mlp(&gdims, Activation::Relu, Activation::Sigmoid, &mut init)?;
    let mut disc = Net::mlp(&ddims, leaky, Activation::Identity, &mut init)?;
    let mut nets = vec![gen];
    let run = train_adversarial(dataset, cfg, &mut nets, &[1.0], &mut disc, &mut rng)?;
    let gen = nets.pop().expect("one generator net");
    Ok((GanModel::new(gen, disc, None, cfg.seed)?, run.log))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoderConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// Steps per logged row.
    pub log_every: usize,
}

impl Default for RecoderConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 64,
            lr: 1e-3,
            seed: 0,
            hidden: vec![256, 128],
            log_every: 100,
        }
    }
}

/// Fits the recoder of an adversarial model in place. The style proxy's
/// recoder targets `w`; the plain GAN's targets `z`.
pub fn train_recoder(model: &mut AnyModel, cfg: &RecoderConfig) -> Result<TrainLog> {
    match model {
        AnyModel::Gan(m) => m.train_recoder(cfg),
        AnyModel::StyleProxy(m) => m.train_recoder(cfg),
        other => Err(Error::InvalidArgument(format!(
            "{} encodes with its posterior mean and has no recoder",
            other.kind().label()
        ))),
    }
}

/// Pixel logits, clamped away from 0 and 1. The generator's last layer is
/// logistic, so the recoder sees its pre-activation output.
pub fn recoder_features(images: &Tensor) -> Tensor {
    images.map(|v| {
        let v = (v as f64).clamp(1e-6, 1.0 - 1e-6);
        libm::log(v / (1.0 - v)) as f32
    })
}

pub(crate) fn encode_recoded(recoder: &Net, images: &Tensor, width: usize) -> Result<Tensor> {
    if images.row_len() != recoder.d_in() {
        return Err(dim_mismatch(
            "recoder input width",
            recoder.d_in(),
            images.row_len(),
        ));
    }
    super::par_rows(images, width, |chunk| {
        recoder.predict(&recoder_features(chunk))
    })
}

/// Regresses latent targets from images with a per-component MSE loss on
/// fresh samples every step.
pub(crate) fn fit_recoder<F>(
    image_dim: usize,
    latent_dim: usize,
    cfg: &RecoderConfig,
    mut sample: F,
) -> Result<(Net, TrainLog)>
where
    F: FnMut(&mut RngState, usize) -> Result<(Tensor, Tensor)>,
{
    if cfg.batch == 0 {
        return Err(Error::InvalidArgument(
            "recoder batch must be positive".into(),
        ));
    }
    let start = Instant::now();
    let rng = RngState::new(cfg.seed);
    let mut dims = vec![image_dim];
    dims.extend(&cfg.hidden);
    dims.push(latent_dim);
    let mut net = Net::mlp(
        &dims,
        Activation::LeakyRelu { alpha: 0.2 },
        Activation::Identity,
        &mut rng.child(1),
    )?;
    let mut opt = OptState::for_params(AdamConfig::new(cfg.lr), &net.params_mut());
    let mut data_rng = rng.child(2);
    let mut log = TrainLog::new(cfg.seed, &["latent_mse"]);
    let every = cfg.log_every.max(1);
    let mut acc = 0.0;
    for s in 0..cfg.steps {
        // Cosine decay to zero over the run.
        opt.config.lr =
            cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * s as f64 / cfg.steps as f64).cos());
        let (target, images) = sample(&mut data_rng, cfg.batch)?;
        let (pred, cache) = net.forward(&recoder_features(&images))?;
        let loss = mean_row_mse(&target, &pred);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch: s / every,
                reason: format!("recoder loss {loss} at step {s}"),
            });
        }
        let scale = 2.0 / pred.len() as f64;
        let g = Tensor::from_fn(pred.shape(), |k| {
            (scale * (pred.data()[k] as f64 - target.data()[k] as f64)) as f32
        });
        let grads = net.backward_params(&cache, &g)?;
        step(&mut opt, &mut net, &grads, s / every)?;
        acc += loss;
        if (s + 1) % every == 0 {
            log.push(s / every, vec![acc / every as f64]);
            acc = 0.0;
        }
    }
    log.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((net, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::make_dataset;
    use crate::numerics::grad_check_fn;

    fn nets(seed: u64) -> (Net<f64>, Net<f64>) {
        let mut rng = RngState::new(seed);
        let g = Net::mlp(&[3, 6, 8], Activation::Tanh, Activation::Sigmoid, &mut rng).unwrap();
        let d = Net::mlp(
            &[8, 5, 1],
            Activation::LeakyRelu { alpha: 0.2 },
            Activation::Identity,
            &mut rng,
        )
        .unwrap();
        (g.cast(), d.cast())
    }

    #[test]
    fn generator_gradients_match_finite_differences() {
        for loss in [
            AdversarialLoss::LeastSquares,
            AdversarialLoss::NonSaturating,
        ] {
            let (g, d) = nets(1);
            let z = rng_normal::<f64>(&mut RngState::new(2), &[5, 3]);
            let mut scratch = g.clone();
            let err = grad_check_fn(
                &g.flatten(),
                |p| {
                    scratch.load_flat(p);
                    let (l, gr, _) = generator_objective(&scratch, &d, &z, loss)?;
                    Ok((l, gr.flatten()))
                },
                1e-6,
                usize::MAX,
                0,
            )
            .unwrap();
            assert!(err < 1e-3, "{loss:?}: {err}");
        }
    }

    #[test]
    fn discriminator_gradients_match_finite_differences() {
        for loss in [
            AdversarialLoss::LeastSquares,
            AdversarialLoss::NonSaturating,
        ] {
            let (g, d) = nets(3);
            let mut rng = RngState::new(4);
            let real = Tensor::<f64>::from_fn(&[4, 8], |_| rng.uniform());
            let fake = g.predict(&rng_normal(&mut rng, &[4, 3])).unwrap();
            let mut scratch = d.clone();
            let err = grad_check_fn(
                &d.flatten(),
                |p| {
                    scratch.load_flat(p);
                    let (l, gr, _) = discriminator_objective(&scratch, &real, &fake, loss)?;
                    Ok((l, gr.flatten()))
                },
                1e-6,
                usize::MAX,
                0,
            )
            .unwrap();
            assert!(err < 1e-3, "{loss:?}: {err}");
        }
    }

    #[test]
    fn zero_epochs_is_seeded_init() {
        let ds = make_dataset(1, 20).unwrap();
        let cfg = GanConfig {
            epochs: 0,
            generator_hidden: vec![16],
            discriminator_hidden: vec![16],
            ..GanConfig::default()
        };
        let (a, log) = train_gan(&ds, &cfg).unwrap();
        let (b, _) = train_gan(&ds, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(log.rows.is_empty());
        assert!(matches!(
            a.encode(&ds.flat_images()),
            Err(Error::MissingRecoder)
        ));
    }

    #[test]
    fn collapse_detector_fires_on_constant_generator() {
        let ds = make_dataset(1, 64).unwrap();
        let cfg = GanConfig {
            epochs: 10,
            lr_g: 0.0,
            collapse_patience: 2,
            generator_hidden: vec![8],
            discriminator_hidden: vec![8],
            ..GanConfig::default()
        };
        // A generator whose weights are all zero emits one constant image.
        let mut gen = Net::mlp(
            &[16, 8, 256],
            Activation::Relu,
            Activation::Sigmoid,
            &mut RngState::new(0),
        )
        .unwrap();
        for s in gen.params_mut() {
            s.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut disc = Net::mlp(
            &[256, 8, 1],
            Activation::Relu,
            Activation::Identity,
            &mut RngState::new(1),
        )
        .unwrap();
        let mut nets = vec![gen];
        let err = train_adversarial(
            &ds,
            &cfg,
            &mut nets,
            &[1.0],
            &mut disc,
            &mut RngState::new(2),
        )
        .err()
        .unwrap();
        assert!(matches!(err, Error::ModeCollapse { epochs: 2, .. }));
    }

    #[test]
    fn pixel_variance_of_identical_rows_is_zero() {
        let t = Tensor::full(&[5, 4], 0.3f32);
        assert_eq!(batch_pixel_variance(&t), 0.0);
        let u = Tensor::<f32>::matrix(2, 1, vec![0.0, 1.0]).unwrap();
        assert!((batch_pixel_variance(&u) - 0.25).abs() < 1e-12);
    }
}
