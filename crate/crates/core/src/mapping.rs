//! Linear maps between latent spaces: fitting, application, and scoring in
//! the latent and visible domains.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::models::{mean_row_mse, AnyModel, LatentModel, ModelKind};
use crate::numerics::{matmul_nt, solve_least_squares, AdamConfig, OptState, RngState, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    ClosedForm,
    Minibatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitMeta {
    pub method: FitMethod,
    pub ridge: f64,
    /// Where the fitting pairs came from, e.g. `support-set` or `full-data`.
    pub source: String,
    pub n_pairs: usize,
}

/// `z₂ ≈ A z₁ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMap {
    /// `d2 × d1`.
    pub a: Tensor,
    pub bias: Option<Vec<f32>>,
    pub src_id: String,
    pub dst_id: String,
    pub meta: FitMeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitOptions {
    pub bias: bool,
    pub ridge: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            bias: false,
            ridge: 1e-4,
        }
    }
}

impl LinearMap {
    pub fn identity(dim: usize, id: &str) -> Self {
        Self {
            a: Tensor::identity(dim),
            bias: None,
            src_id: id.to_string(),
            dst_id: id.to_string(),
            meta: FitMeta {
                method: FitMethod::ClosedForm,
                ridge: 0.0,
                source: "identity".into(),
                n_pairs: 0,
            },
        }
    }

    pub fn zeros(src_dim: usize, dst_dim: usize, bias: bool) -> Self {
        Self {
            a: Tensor::zeros(&[dst_dim, src_dim]),
            bias: bias.then(|| vec![0.0; dst_dim]),
            src_id: String::new(),
            dst_id: String::new(),
            meta: FitMeta {
                method: FitMethod::Minibatch,
                ridge: 0.0,
                source: String::new(),
                n_pairs: 0,
            },
        }
    }

    pub fn src_dim(&self) -> usize {
        self.a.row_len()
    }

    pub fn dst_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn with_ids(mut self, src: &str, dst: &str) -> Self {
        self.src_id = src.to_string();
        self.dst_id = dst.to_string();
        self
    }

    pub fn all_finite(&self) -> bool {
        self.a.all_finite()
            && self
                .bias
                .as_ref()
                .map_or(true, |b| b.iter().all(|v| v.is_finite()))
    }
}

fn column_means(t: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; t.row_len()];
    for i in 0..t.rows() {
        for (o, v) in out.iter_mut().zip(t.row(i)) {
            *o += *v as f64;
        }
    }
    let m = t.rows().max(1) as f64;
    out.iter_mut().for_each(|o| *o /= m);
    out
}

fn center(t: &Tensor, means: &[f64]) -> Tensor<f64> {
    let w = t.row_len();
    Tensor::from_fn(&[t.rows(), w], |i| t.data()[i] as f64 - means[i % w])
}

/// Minimizes `mean_k ‖A z1_k (+ b) − z2_k‖² + λ‖A‖²` in closed form. With a
/// bias the data are centered first, so the bias is not regularized.
pub fn fit_linear_map(z1: &Tensor, z2: &Tensor, opts: FitOptions) -> Result<LinearMap> {
    let m = z1.rows();
    if z2.rows() != m {
        return Err(dim_mismatch("paired code count", m, z2.rows()));
    }
    if m == 0 {
        return Err(Error::InvalidArgument(
            "fitting needs at least one pair".into(),
        ));
    }
    let (d1, d2) = (z1.row_len(), z2.row_len());
    // The solver minimizes a sum; scale the penalty to keep the mean objective.
    let ridge = opts.ridge * m as f64;
    let (x, bias) = if opts.bias {
        let (m1, m2) = (column_means(z1), column_means(z2));
        let x = solve_least_squares(&center(z1, &m1), &center(z2, &m2), ridge)?;
        let bias = (0..d2)
            .map(|j| (m2[j] - (0..d1).map(|i| x.row(i)[j] * m1[i]).sum::<f64>()) as f32)
            .collect();
        (x, Some(bias))
    } else {
        (
            solve_least_squares(&z1.cast::<f64>(), &z2.cast::<f64>(), ridge)?,
            None,
        )
    };
    Ok(LinearMap {
        a: x.transpose().cast(),
        bias,
        src_id: String::new(),
        dst_id: String::new(),
        meta: FitMeta {
            method: FitMethod::ClosedForm,
            ridge: opts.ridge,
            source: "full-data".into(),
            n_pairs: m,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinibatchOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub bias: bool,
    pub seed: u64,
}

impl Default for MinibatchOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 64,
            lr: 1e-2,
            bias: false,
            seed: 0,
        }
    }
}

/// Source of matched `(z1, z2)` batches.
pub trait PairSampler {
    fn sample(&mut self, rng: &mut RngState, batch: usize) -> Result<(Tensor, Tensor)>;
}

/// Uniform rows, with replacement, from fixed paired data.
pub struct FixedPairs<'a> {
    pub z1: &'a Tensor,
    pub z2: &'a Tensor,
}

impl PairSampler for FixedPairs<'_> {
    fn sample(&mut self, rng: &mut RngState, batch: usize) -> Result<(Tensor, Tensor)> {
        let n = self.z1.rows();
        if n == 0 || self.z2.rows() != n {
            return Err(dim_mismatch("fixed pair count", n, self.z2.rows()));
        }
        let idx: Vec<usize> = (0..batch).map(|_| rng.below(n)).collect();
        Ok((self.z1.select_rows(&idx), self.z2.select_rows(&idx)))
    }
}

impl<F> PairSampler for F
where
    F: FnMut(&mut RngState, usize) -> Result<(Tensor, Tensor)>,
{
    fn sample(&mut self, rng: &mut RngState, batch: usize) -> Result<(Tensor, Tensor)> {
        self(rng, batch)
    }
}

/// Adam on the mean squared latent residual, starting from the zero map.
/// Needs the dimensions up front since the sampler is only called per step.
pub fn fit_linear_map_minibatch(
    sampler: &mut dyn PairSampler,
    src_dim: usize,
    dst_dim: usize,
    opts: MinibatchOptions,
) -> Result<LinearMap> {
    if opts.batch == 0 {
        return Err(Error::InvalidArgument(
            "minibatch size must be positive".into(),
        ));
    }
    let mut map = LinearMap::zeros(src_dim, dst_dim, opts.bias);
    map.meta.source = "sampled".into();
    map.meta.n_pairs = opts.steps * opts.batch;
    let mut bias = map.bias.take().unwrap_or_default();
    let shapes: Vec<usize> = if opts.bias {
        vec![src_dim * dst_dim, dst_dim]
    } else {
        vec![src_dim * dst_dim]
    };
    let mut opt = OptState::new(AdamConfig::new(opts.lr), &shapes);
    let mut rng = RngState::new(opts.seed);
    for step in 0..opts.steps {
        opt.config.lr =
            opts.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / opts.steps as f64).cos());
        let (z1, z2) = sampler.sample(&mut rng, opts.batch)?;
        if z1.row_len() != src_dim || z2.row_len() != dst_dim {
            return Err(dim_mismatch(
                "sampled pair widths",
                format!("{src_dim}/{dst_dim}"),
                format!("{}/{}", z1.row_len(), z2.row_len()),
            ));
        }
        let current = LinearMap {
            bias: opts.bias.then(|| bias.clone()),
            ..map.clone()
        };
        let pred = apply_map(&current, &z1)?;
        let m = z1.rows() as f64;
        let mut ga = vec![0.0f64; src_dim * dst_dim];
        let mut gb = vec![0.0f64; dst_dim];
        let mut loss = 0.0;
        for k in 0..z1.rows() {
            let (x, p, t) = (z1.row(k), pred.row(k), z2.row(k));
            for j in 0..dst_dim {
                let r = p[j] as f64 - t[j] as f64;
                loss += r * r / m;
                let g = 2.0 * r / m;
                gb[j] += g;
                for (i, xi) in x.iter().enumerate() {
                    ga[j * src_dim + i] += g * *xi as f64;
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch: step,
                reason: format!("map fitting loss {loss}"),
            });
        }
        let ga: Vec<f32> = ga.into_iter().map(|v| v as f32).collect();
        let gb: Vec<f32> = gb.into_iter().map(|v| v as f32).collect();
        let a = map.a.data_mut();
        let res = if opts.bias {
            opt.adam_step(&mut [a, bias.as_mut_slice()], &[&ga, &gb])
        } else {
            opt.adam_step(&mut [a], &[&ga])
        };
        res.map_err(|e| Error::Divergence {
            epoch: step,
            reason: e.to_string(),
        })?;
    }
    map.bias = opts.bias.then_some(bias);
    Ok(map)
}

/// How the type matrix fits each off-diagonal map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "method")]
pub enum MapFit {
    ClosedForm(FitOptions),
    Minibatch(MinibatchOptions),
}

impl MapFit {
    pub fn fit(&self, z1: &Tensor, z2: &Tensor) -> Result<LinearMap> {
        match *self {
            MapFit::ClosedForm(o) => fit_linear_map(z1, z2, o),
            MapFit::Minibatch(o) => {
                let mut pairs = FixedPairs { z1, z2 };
                let mut m = fit_linear_map_minibatch(&mut pairs, z1.row_len(), z2.row_len(), o)?;
                m.meta.n_pairs = z1.rows();
                Ok(m)
            }
        }
    }
}

/// `codes · Aᵀ (+ b)`.
pub fn apply_map(map: &LinearMap, codes: &Tensor) -> Result<Tensor> {
    if codes.row_len() != map.src_dim() {
        return Err(dim_mismatch(
            "map input width",
            map.src_dim(),
            codes.row_len(),
        ));
    }
    let mut out = matmul_nt(&codes.as_matrix(), &map.a)?;
    if let Some(b) = &map.bias {
        for i in 0..out.rows() {
            for (o, bv) in out.row_mut(i).iter_mut().zip(b) {
                *o = (*o as f64 + *bv as f64) as f32;
            }
        }
    }
    Ok(out)
}

/// Latent residual of a map: `(per-component, summed)` means over rows.
pub fn latent_mse(map: &LinearMap, z1: &Tensor, z2: &Tensor) -> Result<(f64, f64)> {
    if z2.row_len() != map.dst_dim() {
        return Err(dim_mismatch(
            "target code width",
            map.dst_dim(),
            z2.row_len(),
        ));
    }
    if z1.rows() != z2.rows() {
        return Err(dim_mismatch("paired code count", z1.rows(), z2.rows()));
    }
    let per = mean_row_mse(&apply_map(map, z1)?, z2);
    Ok((per, per * map.dst_dim() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    /// Per-component latent MSE between `M(z1)` and `z2`.
    pub l_mse: f64,
    /// Summed over components.
    pub l_mse_raw: f64,
    /// Source reconstruction MSE.
    pub r_mse: f64,
    /// Visible-domain MSE after mapping and decoding with the destination.
    pub m_mse: f64,
    pub n_eval: usize,
}

/// Codes of one model for a fixed image set, reused across pairs.
pub struct Encoded {
    pub codes: Tensor,
    pub r_mse: f64,
}

pub fn encode_set(model: &dyn LatentModel, images: &Tensor) -> Result<Encoded> {
    let images = images.as_matrix();
    let codes = model.encode(&images)?;
    let r_mse = mean_row_mse(&images, &model.decode(&codes)?);
    Ok(Encoded { codes, r_mse })
}

fn evaluate_encoded(
    dst: &dyn LatentModel,
    map: &LinearMap,
    images: &Tensor,
    src: &Encoded,
    z2: &Tensor,
) -> Result<EvalReport> {
    let mapped = apply_map(map, &src.codes)?;
    let (l_mse, l_mse_raw) = latent_mse(map, &src.codes, z2)?;
    let m_mse = mean_row_mse(&images.as_matrix(), &dst.decode(&mapped)?);
    Ok(EvalReport {
        l_mse,
        l_mse_raw,
        r_mse: src.r_mse,
        m_mse,
        n_eval: images.rows(),
    })
}

pub fn evaluate_mapping(
    src: &dyn LatentModel,
    dst: &dyn LatentModel,
    map: &LinearMap,
    images: &Tensor,
) -> Result<EvalReport> {
    if map.src_dim() != src.latent_dim() || map.dst_dim() != dst.latent_dim() {
        return Err(dim_mismatch(
            "map shape",
            format!("{} × {}", dst.latent_dim(), src.latent_dim()),
            format!("{} × {}", map.dst_dim(), map.src_dim()),
        ));
    }
    let e1 = encode_set(src, images)?;
    let z2 = dst.encode(&images.as_matrix())?;
    evaluate_encoded(dst, map, images, &e1, &z2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RelocationType {
    /// Same model, same instance.
    #[serde(rename = "self")]
    SelfMap,
    #[serde(rename = "type-1")]
    Type1,
    #[serde(rename = "type-2")]
    Type2,
    #[serde(rename = "type-3")]
    Type3,
}

impl RelocationType {
    pub fn classify(src: ModelKind, dst: ModelKind, same_instance: bool) -> Self {
        if same_instance {
            RelocationType::SelfMap
        } else if src == dst {
            RelocationType::Type1
        } else if src.is_variational() && dst.is_variational() {
            RelocationType::Type2
        } else {
            RelocationType::Type3
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            RelocationType::SelfMap => "self",
            RelocationType::Type1 => "1",
            RelocationType::Type2 => "2",
            RelocationType::Type3 => "3",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

/// One ordered pair of model instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairResult {
    pub from: String,
    pub to: String,
    pub kind: RelocationType,
    /// Per-component L-MSE on the fitting pairs.
    pub fit_l_mse: f64,
    pub eval: EvalReport,
}

/// Pairs of one (source kind, destination kind), averaged over instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryRow {
    pub from: String,
    pub to: String,
    pub kind: RelocationType,
    pub pairs: usize,
    pub l_mse: Stat,
    pub r_mse: Stat,
    pub m_mse: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypeMatrix {
    pub models: Vec<String>,
    /// `support-set` or `full-data`.
    pub fit_source: String,
    pub fit: MapFit,
    pub pairs: Vec<PairResult>,
    pub summary: Vec<SummaryRow>,
}

pub fn instance_name(model: &AnyModel) -> String {
    format!("{}#{}", model.kind().label(), model.seed())
}

/// Fits and scores every ordered pair of models. Maps are fitted on
/// `fit_images` (support-set images or the full data) and scored on
/// `eval_images`; self pairs use the identity map.
pub fn run_type_matrix(
    models: &[AnyModel],
    fit_images: &Tensor,
    fit_source: &str,
    eval_images: &Tensor,
    fit: &MapFit,
) -> Result<(TypeMatrix, Vec<LinearMap>)> {
    if models.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "type matrix needs at least 2 models, got {}",
            models.len()
        )));
    }
    let names: Vec<String> = models.iter().map(instance_name).collect();
    let fit_codes: Vec<Tensor> = models
        .par_iter()
        .map(|m| m.encode(&fit_images.as_matrix()))
        .collect::<Result<_>>()?;
    let eval_sets: Vec<Encoded> = models
        .par_iter()
        .map(|m| encode_set(m, eval_images))
        .collect::<Result<_>>()?;

    let mut pairs = Vec::new();
    let mut maps = Vec::new();
    for (i, src) in models.iter().enumerate() {
        for (j, dst) in models.iter().enumerate() {
            let kind = RelocationType::classify(src.kind(), dst.kind(), i == j);
            let map = if i == j {
                LinearMap::identity(src.latent_dim(), &names[i])
            } else {
                let mut m = fit
                    .fit(&fit_codes[i], &fit_codes[j])?
                    .with_ids(&names[i], &names[j]);
                m.meta.source = fit_source.to_string();
                m
            };
            let (fit_l_mse, _) = latent_mse(&map, &fit_codes[i], &fit_codes[j])?;
            let eval =
                evaluate_encoded(dst, &map, eval_images, &eval_sets[i], &eval_sets[j].codes)?;
            pairs.push(PairResult {
                from: names[i].clone(),
                to: names[j].clone(),
                kind,
                fit_l_mse,
                eval,
            });
            maps.push(map);
        }
    }

    let mut kinds: Vec<ModelKind> = models.iter().map(|m| m.kind()).collect();
    kinds.sort();
    kinds.dedup();
    let mut summary = Vec::new();
    for &a in &kinds {
        for &b in &kinds {
            let of_kinds = |p: &&PairResult, ia: usize, ib: usize| {
                models[ia].kind() == a
                    && models[ib].kind() == b
                    && p.kind != RelocationType::SelfMap
            };
            let mut chosen: Vec<&PairResult> = pairs
                .iter()
                .enumerate()
                .filter(|(k, p)| of_kinds(p, k / models.len(), k % models.len()))
                .map(|(_, p)| p)
                .collect();
            let kind = if chosen.is_empty() {
                // A single instance of this kind: report its self pair.
                chosen = pairs
                    .iter()
                    .enumerate()
                    .filter(|(k, p)| {
                        p.kind == RelocationType::SelfMap
                            && models[k / models.len()].kind() == a
                            && a == b
                    })
                    .map(|(_, p)| p)
                    .collect();
                RelocationType::SelfMap
            } else {
                RelocationType::classify(a, b, false)
            };
            if chosen.is_empty() {
                continue;
            }
            let col = |f: fn(&EvalReport) -> f64| {
                Stat::of(&chosen.iter().map(|p| f(&p.eval)).collect::<Vec<_>>())
            };
            summary.push(SummaryRow {
                from: a.label().to_string(),
                to: b.label().to_string(),
                kind,
                pairs: chosen.len(),
                l_mse: col(|e| e.l_mse),
                r_mse: col(|e| e.r_mse),
                m_mse: col(|e| e.m_mse),
            });
        }
    }

    Ok((
        TypeMatrix {
            models: names,
            fit_source: fit_source.to_string(),
            fit: *fit,
            pairs,
            summary,
        },
        maps,
    ))
}

impl TypeMatrix {
    /// `From,To,Type,Pairs,L-MSE,L-MSE std,R-MSE,R-MSE std,M-MSE,M-MSE std`.
    pub fn summary_csv(&self) -> String {
        let mut out =
            String::from("From,To,Type,Pairs,L-MSE,L-MSE std,R-MSE,R-MSE std,M-MSE,M-MSE std\n");
        for r in &self.summary {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.from,
                r.to,
                r.kind.label(),
                r.pairs,
                r.l_mse.mean,
                r.l_mse.std,
                r.r_mse.mean,
                r.r_mse.std,
                r.m_mse.mean,
                r.m_mse.std
            ));
        }
        out
    }

    /// One row per ordered instance pair.
    pub fn pairs_csv(&self) -> String {
        let mut out = String::from("From,To,Type,Fit L-MSE,L-MSE,L-MSE raw,R-MSE,M-MSE,N\n");
        for p in &self.pairs {
            let e = &p.eval;
            out.push_str(&format!(
                "{},{},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{}\n",
                p.from,
                p.to,
                p.kind.label(),
                p.fit_l_mse,
                e.l_mse,
                e.l_mse_raw,
                e.r_mse,
                e.m_mse,
                e.n_eval
            ));
        }
        out
    }
}
