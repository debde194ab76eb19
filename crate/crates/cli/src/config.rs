//! JSON run configuration. Every section rejects unknown keys, and
//! [`RunConfig::validate`] runs before any work starts.

use std::path::Path;

use latent_atlas::mapping::{FitMethod, FitOptions, MinibatchOptions};
use latent_atlas::models::{
    AdversarialLoss, GanConfig, ModelKind, RecoderConfig, StyleConfig, VaeConfig,
};
use latent_atlas::support::PickRule;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// The bundled configuration that reproduces the whole toy study.
pub const DEMO_CONFIG: &str = include_str!("../configs/demo.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub models: Vec<ModelSpec>,
    pub support: SupportConfig,
    pub mapping: MappingConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n: usize,
    /// Fraction of rows, taken from the end, kept out of training and support selection.
    #[serde(default = "default_holdout")]
    pub holdout: f64,
}

fn default_holdout() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub latent_dim: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub hyperparams: Hyperparams,
}

/// Overrides on top of each model family's defaults. Keys that do not apply
/// to the model kind are rejected by validation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub gamma: Option<f64>,
    pub encoder_hidden: Option<Vec<usize>>,
    pub decoder_hidden: Option<Vec<usize>>,
    pub generator_hidden: Option<Vec<usize>>,
    pub discriminator_hidden: Option<Vec<usize>>,
    pub loss: Option<AdversarialLoss>,
    pub mapping_lr_scale: Option<f64>,
    pub recoder_steps: Option<usize>,
    pub recoder_lr: Option<f64>,
    pub recoder_hidden: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PickMode {
    Extreme,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupportConfig {
    pub n_features: usize,
    pub threshold: f64,
    pub target_size: usize,
    pub pick: PickMode,
    #[serde(default)]
    pub pick_seed: u64,
    /// Position of the instance, in expanded config order, whose codes define the sectors.
    #[serde(default)]
    pub source_model: usize,
}

impl SupportConfig {
    pub fn pick_rule(&self) -> PickRule {
        match self.pick {
            PickMode::Extreme => PickRule::Extreme,
            PickMode::Random => PickRule::Random {
                seed: self.pick_seed,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingConfig {
    pub bias: bool,
    pub ridge: f64,
    pub method: FitMethod,
    #[serde(default)]
    pub minibatch: Option<MinibatchConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinibatchConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl MappingConfig {
    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            bias: self.bias,
            ridge: self.ridge,
        }
    }

    pub fn minibatch_options(&self) -> MinibatchOptions {
        let mut o = MinibatchOptions {
            bias: self.bias,
            ..MinibatchOptions::default()
        };
        if let Some(m) = &self.minibatch {
            o.steps = m.steps;
            o.batch = m.batch;
            o.lr = m.lr;
            o.seed = m.seed;
        }
        o
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out images used to score the maps.
    pub n_images: usize,
    /// In-range and inverted images per model in the range probe.
    #[serde(default = "default_probe_images")]
    pub probe_images: usize,
    #[serde(default = "default_probe_steps")]
    pub probe_steps: usize,
    /// Strip length for traversals and sample sheets.
    #[serde(default = "default_strip")]
    pub strip_len: usize,
}

fn default_probe_images() -> usize {
    32
}

fn default_probe_steps() -> usize {
    300
}

fn default_strip() -> usize {
    11
}

/// One model to train: a kind, a seed and its resolved training settings.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub kind: ModelKind,
    pub latent_dim: usize,
    pub seed: u64,
    pub hyperparams: Hyperparams,
}

impl Instance {
    /// File stem used for the model and its logs, e.g. `vae-s3`.
    pub fn stem(&self) -> String {
        model_stem(self.kind, self.seed)
    }
}

pub fn model_stem(kind: ModelKind, seed: u64) -> String {
    let k = match kind {
        ModelKind::Vae => "vae",
        ModelKind::Svae => "svae",
        ModelKind::Gan => "gan",
        ModelKind::StyleProxy => "style-proxy",
    };
    format!("{k}-s{seed}")
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self, CliError> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| usage(format!("{origin}: {e}")))?;
        cfg.validate().map_err(|e| match e {
            CliError::Usage(m) => usage(format!("{origin}: {m}")),
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn demo() -> Self {
        Self::from_json(DEMO_CONFIG, "bundled demo config").expect("bundled demo config is valid")
    }

    /// Instances in config order: each model entry expanded over its seeds.
    pub fn instances(&self) -> Vec<Instance> {
        self.models
            .iter()
            .flat_map(|m| {
                m.seeds.iter().map(move |&seed| Instance {
                    kind: m.kind,
                    latent_dim: m.latent_dim,
                    seed,
                    hyperparams: m.hyperparams.clone(),
                })
            })
            .collect()
    }

    pub fn holdout_rows(&self) -> usize {
        (self.dataset.n as f64 * self.dataset.holdout).floor() as usize
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.dataset;
        if d.n < 2 {
            return Err(usage(format!("dataset.n must be at least 2, got {}", d.n)));
        }
        if !(0.0..1.0).contains(&d.holdout) {
            return Err(usage(format!(
                "dataset.holdout must lie in [0, 1), got {}",
                d.holdout
            )));
        }
        if self.models.is_empty() {
            return Err(usage("models must list at least one model"));
        }
        for (i, m) in self.models.iter().enumerate() {
            if m.latent_dim == 0 {
                return Err(usage(format!("models[{i}].latent_dim must be positive")));
            }
            if m.seeds.is_empty() {
                return Err(usage(format!("models[{i}].seeds must not be empty")));
            }
            let mut s = m.seeds.clone();
            s.sort_unstable();
            s.dedup();
            if s.len() != m.seeds.len() {
                return Err(usage(format!("models[{i}].seeds contains duplicates")));
            }
            m.hyperparams.check(m.kind).map_err(|k| {
                usage(format!(
                    "models[{i}].hyperparams.{k} does not apply to {:?}",
                    m.kind
                ))
            })?;
        }
        let instances = self.instances();
        if instances.len() < 2 {
            return Err(usage("at least two model instances are needed for mapping"));
        }
        let s = &self.support;
        let Some(src) = instances.get(s.source_model) else {
            return Err(usage(format!(
                "support.source_model {} exceeds instance count {}",
                s.source_model,
                instances.len()
            )));
        };
        if s.n_features == 0 || s.n_features > src.latent_dim.min(30) {
            return Err(usage(format!(
                "support.n_features must lie in 1..={}, got {}",
                src.latent_dim.min(30),
                s.n_features
            )));
        }
        if !(s.threshold > 0.0) {
            return Err(usage(format!(
                "support.threshold must be positive, got {}",
                s.threshold
            )));
        }
        if s.target_size < 2 {
            return Err(usage(format!(
                "support.target_size must be at least 2, got {}",
                s.target_size
            )));
        }
        if s.target_size > d.n - self.holdout_rows() {
            return Err(usage("support.target_size exceeds the training rows"));
        }
        if !(self.mapping.ridge >= 0.0) {
            return Err(usage(format!(
                "mapping.ridge must be non-negative, got {}",
                self.mapping.ridge
            )));
        }
        if self.mapping.method == FitMethod::ClosedForm && self.mapping.minibatch.is_some() {
            return Err(usage(
                "mapping.minibatch is only allowed with method minibatch",
            ));
        }
        let held = self.holdout_rows();
        let e = &self.eval;
        if e.n_images == 0 || e.n_images > held {
            return Err(usage(format!(
                "eval.n_images must lie in 1..={held} (the held-out rows), got {}",
                e.n_images
            )));
        }
        if e.probe_images == 0 || e.probe_images > held {
            return Err(usage(format!(
                "eval.probe_images must lie in 1..={held}, got {}",
                e.probe_images
            )));
        }
        if e.strip_len == 0 {
            return Err(usage("eval.strip_len must be positive"));
        }
        Ok(())
    }
}

impl Hyperparams {
    /// Name of the first key that the model kind does not use.
    fn check(&self, kind: ModelKind) -> Result<(), &'static str> {
        let variational = kind.is_variational();
        let checks: [(&'static str, bool, bool); 10] = [
            ("gamma", self.gamma.is_some(), variational),
            ("encoder_hidden", self.encoder_hidden.is_some(), variational),
            ("decoder_hidden", self.decoder_hidden.is_some(), variational),
            (
                "generator_hidden",
                self.generator_hidden.is_some(),
                !variational,
            ),
            (
                "discriminator_hidden",
                self.discriminator_hidden.is_some(),
                !variational,
            ),
            ("loss", self.loss.is_some(), !variational),
            (
                "mapping_lr_scale",
                self.mapping_lr_scale.is_some(),
                kind == ModelKind::StyleProxy,
            ),
            ("recoder_steps", self.recoder_steps.is_some(), !variational),
            ("recoder_lr", self.recoder_lr.is_some(), !variational),
            (
                "recoder_hidden",
                self.recoder_hidden.is_some(),
                !variational,
            ),
        ];
        match checks.iter().find(|(_, set, ok)| *set && !ok) {
            Some((name, _, _)) => Err(name),
            None => Ok(()),
        }
    }

    pub fn vae_config(
        &self,
        kind: ModelKind,
        latent_dim: usize,
        seed: u64,
        holdout: f64,
    ) -> VaeConfig {
        let mut c = if kind == ModelKind::Svae {
            VaeConfig::svae()
        } else {
            VaeConfig::default()
        };
        c.latent_dim = latent_dim;
        c.seed = seed;
        c.holdout = holdout;
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.gamma {
            c.gamma = v;
        }
        if let Some(v) = &self.encoder_hidden {
            c.encoder_hidden = v.clone();
        }
        if let Some(v) = &self.decoder_hidden {
            c.decoder_hidden = v.clone();
        }
        c
    }

    pub fn gan_config(&self, latent_dim: usize, seed: u64) -> GanConfig {
        let mut c = GanConfig {
            latent_dim,
            seed,
            ..GanConfig::default()
        };
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.lr {
            c.lr_g = v;
            c.lr_d = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = &self.generator_hidden {
            c.generator_hidden = v.clone();
        }
        if let Some(v) = &self.discriminator_hidden {
            c.discriminator_hidden = v.clone();
        }
        if let Some(v) = self.loss {
            c.loss = v;
        }
        c
    }

    pub fn style_config(&self, latent_dim: usize, seed: u64) -> StyleConfig {
        let mut c = StyleConfig {
            gan: self.gan_config(latent_dim, seed),
            ..StyleConfig::default()
        };
        if let Some(v) = self.mapping_lr_scale {
            c.mapping_lr_scale = v;
        }
        c
    }

    pub fn recoder_config(&self, seed: u64) -> RecoderConfig {
        let mut c = RecoderConfig {
            seed,
            ..RecoderConfig::default()
        };
        if let Some(v) = self.recoder_steps {
            c.steps = v;
        }
        if let Some(v) = self.recoder_lr {
            c.lr = v;
        }
        if let Some(v) = &self.recoder_hidden {
            c.hidden = v.clone();
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_config_parses() {
        let cfg = RunConfig::demo();
        assert!(cfg.instances().len() >= 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(DEMO_CONFIG).unwrap();
        v["support"]["colour"] = serde_json::json!(3);
        let err = RunConfig::from_json(&v.to_string(), "x.json").unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
        let mut v: serde_json::Value = serde_json::from_str(DEMO_CONFIG).unwrap();
        v["models"][0]["hyperparams"]["momentum"] = serde_json::json!(0.9);
        assert!(RunConfig::from_json(&v.to_string(), "x.json").is_err());
    }

    #[test]
    fn misplaced_hyperparameter_is_named() {
        let mut v: serde_json::Value = serde_json::from_str(DEMO_CONFIG).unwrap();
        let gan = v["models"]
            .as_array()
            .unwrap()
            .iter()
            .position(|m| m["kind"] == "gan")
            .unwrap();
        v["models"][gan]["hyperparams"]["gamma"] = serde_json::json!(0.1);
        let err = RunConfig::from_json(&v.to_string(), "x.json").unwrap_err();
        assert!(err.to_string().contains("hyperparams.gamma"), "{err}");
    }

    #[test]
    fn eval_count_is_bounded_by_holdout() {
        let mut cfg = RunConfig::demo();
        cfg.eval.n_images = cfg.holdout_rows() + 1;
        assert!(cfg.validate().is_err());
    }
}
