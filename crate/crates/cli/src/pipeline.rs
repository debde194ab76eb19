//! Training and the end-to-end study behind `matrix` and `demo`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use latent_atlas::importance::{rank_variables, select_top, GainReport};
use latent_atlas::inversion::{range_probe, GradientConfig, InitRule, ProbeMethod, ProbeReport};
use latent_atlas::manifold::{invert_intensity, make_dataset, Dataset, SIDE};
use latent_atlas::mapping::{
    instance_name, run_type_matrix, FitMethod, LinearMap, MapFit, TypeMatrix,
};
use latent_atlas::models::{
    image_strip, latent_traversal, nearest_neighbor_mse, sample_ancestral, train_gan,
    train_recoder, train_style_proxy, train_svae, train_vae, AnyModel, LatentModel, ModelKind,
    TrainLog,
};
use latent_atlas::numerics::{RngState, Tensor};
use latent_atlas::storage::{
    load_model, save_dataset, save_map, save_model, save_support_set, write_image_pgm,
};
use latent_atlas::support::{
    build_support_set, diversity_score, random_subset, sector_census, SectorSpec, SupportSet,
};
use serde::Serialize;

use crate::config::{Instance, RunConfig};
use crate::{at, CliError};

/// Samples drawn for the nearest-neighbor fidelity check.
const FIDELITY_SAMPLES: usize = 256;
/// Generated pairs used to score a recoder.
const RECODER_EVAL: usize = 2000;

pub fn progress(msg: &str) {
    eprintln!("[latent-atlas] {msg}");
}

/// The first `n − floor(n·holdout)` rows, for models that take a whole dataset.
pub fn training_part(dataset: &Dataset, holdout: f64) -> Dataset {
    let n = dataset.len();
    let keep = n - ((n as f64 * holdout).floor() as usize).min(n.saturating_sub(1));
    Dataset {
        images: dataset.images.slice_rows(0, keep),
        factors: dataset.factors.slice_rows(0, keep),
        seed: dataset.seed,
    }
}

/// Trains one instance; adversarial models also get their recoder.
pub fn train_instance(
    inst: &Instance,
    dataset: &Dataset,
    holdout: f64,
) -> Result<(AnyModel, Vec<(String, TrainLog)>), CliError> {
    let hp = &inst.hyperparams;
    let started = Instant::now();
    let (model, mut logs) = match inst.kind {
        ModelKind::Vae => {
            let (m, log) = train_vae(
                dataset,
                &hp.vae_config(inst.kind, inst.latent_dim, inst.seed, holdout),
            )?;
            (AnyModel::Vae(m), vec![("train".to_string(), log)])
        }
        ModelKind::Svae => {
            let (m, log) = train_svae(
                dataset,
                &hp.vae_config(inst.kind, inst.latent_dim, inst.seed, holdout),
            )?;
            (AnyModel::Svae(m), vec![("train".to_string(), log)])
        }
        ModelKind::Gan => {
            let (m, log) = train_gan(
                &training_part(dataset, holdout),
                &hp.gan_config(inst.latent_dim, inst.seed),
            )?;
            (AnyModel::Gan(m), vec![("train".to_string(), log)])
        }
        ModelKind::StyleProxy => {
            let (m, log) = train_style_proxy(
                &training_part(dataset, holdout),
                &hp.style_config(inst.latent_dim, inst.seed),
            )?;
            (AnyModel::StyleProxy(m), vec![("train".to_string(), log)])
        }
    };
    let mut model = model;
    if !inst.kind.is_variational() {
        let log = train_recoder(&mut model, &hp.recoder_config(inst.seed))?;
        logs.push(("recoder".to_string(), log));
    }
    progress(&format!(
        "trained {} in {:.1}s",
        inst.stem(),
        started.elapsed().as_secs_f64()
    ));
    Ok((model, logs))
}

/// Per-component latent MSE of the recoder on fresh generated pairs.
pub fn recoder_mse(model: &AnyModel, seed: u64) -> Result<Option<f64>, CliError> {
    let mut rng = RngState::new(seed).child(77);
    Ok(match model {
        AnyModel::Gan(m) if m.recoder.is_some() => {
            Some(m.recoder_latent_mse(&mut rng, RECODER_EVAL)?)
        }
        AnyModel::StyleProxy(m) if m.w_recoder.is_some() => {
            Some(m.recoder_latent_mse(&mut rng, RECODER_EVAL)?)
        }
        _ => None,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct DatasetReport {
    pub seed: u64,
    pub n: usize,
    pub checksum: String,
    pub train_rows: usize,
    pub held_out_rows: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelReport {
    pub name: String,
    pub file: String,
    pub kind: ModelKind,
    pub latent_dim: usize,
    pub seed: u64,
    pub holdout_mse: Option<f64>,
    pub recoder_latent_mse: Option<f64>,
    /// Mean distance from generated samples to their nearest training image.
    pub nn_fidelity: f64,
    pub final_losses: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SupportReport {
    pub source_model: String,
    pub selected_vars: Vec<usize>,
    pub selection_warning: Option<String>,
    pub sector_counts: Vec<usize>,
    pub outside_sectors: usize,
    pub occupancy_ratio: Option<f64>,
    pub size: usize,
    pub top_ups: usize,
    pub diversity_support: f64,
    pub diversity_random: f64,
    pub diversity_ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeEntry {
    pub model: String,
    pub report: ProbeReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct StudyReport {
    pub dataset: DatasetReport,
    pub models: Vec<ModelReport>,
    pub gains: GainReport,
    pub support: SupportReport,
    pub matrix: TypeMatrix,
    pub probes: Vec<ProbeEntry>,
}

/// Everything a study produced, kept in memory for callers that check it.
pub struct StudyOutcome {
    pub report: StudyReport,
    pub dataset: Dataset,
    pub models: Vec<AnyModel>,
    pub maps: Vec<LinearMap>,
    pub support: SupportSet,
    /// Files written, relative to the output directory, sorted.
    pub artifacts: Vec<String>,
    /// Training wall clock per instance; `None` when reused. Kept out of
    /// every written file so reruns stay bit-identical.
    pub train_secs: Vec<Option<f64>>,
}

struct Writer {
    root: PathBuf,
    written: Vec<String>,
}

impl Writer {
    fn path(&mut self, rel: &str) -> Result<PathBuf, CliError> {
        let p = self.root.join(rel);
        if let Some(dir) = p.parent() {
            at(std::fs::create_dir_all(dir).map_err(Into::into), dir)?;
        }
        self.written.push(rel.to_string());
        Ok(p)
    }

    fn text(&mut self, rel: &str, body: &str) -> Result<(), CliError> {
        let p = self.path(rel)?;
        at(std::fs::write(&p, body).map_err(Into::into), &p)
    }

    fn pgm(&mut self, rel: &str, image: &Tensor) -> Result<(), CliError> {
        let p = self.path(rel)?;
        at(write_image_pgm(&p, image), &p)
    }
}

fn final_losses(logs: &[(String, TrainLog)]) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for (phase, log) in logs {
        if let Some((_, vals)) = log.rows.last() {
            for (c, v) in log.columns.iter().zip(vals) {
                out.insert(format!("{phase}.{c}"), *v);
            }
        }
    }
    out
}

fn rows_to_strip(images: &Tensor) -> Result<Tensor, CliError> {
    Ok(image_strip(&images.as_matrix(), SIDE)?)
}

/// Stacks equally wide strips vertically.
fn stack(strips: &[Tensor]) -> Result<Tensor, CliError> {
    let w = strips[0].row_len();
    let h: usize = strips.iter().map(|s| s.rows()).sum();
    let data = strips
        .iter()
        .flat_map(|s| s.data().iter().copied())
        .collect();
    Ok(Tensor::matrix(h, w, data)?)
}

/// Runs the whole study: data, models, importance, support set, all maps,
/// figure analogs and the range probe. Models found in `reuse` under their
/// usual file name are loaded instead of trained.
pub fn run_study(
    cfg: &RunConfig,
    out: &Path,
    reuse: Option<&Path>,
) -> Result<StudyOutcome, CliError> {
    let mut w = Writer {
        root: out.to_path_buf(),
        written: Vec::new(),
    };
    let holdout = cfg.dataset.holdout;
    let dataset = make_dataset(cfg.dataset.seed, cfg.dataset.n)?;
    let data_dir = w.path("dataset/images.lsat")?;
    w.written.push("dataset/manifest.json".into());
    let data_dir = data_dir.parent().expect("nested path").to_path_buf();
    at(save_dataset(&data_dir, &dataset), &data_dir)?;
    progress(&format!(
        "dataset seed {} with {} images",
        dataset.seed,
        dataset.len()
    ));

    let instances = cfg.instances();
    let mut models = Vec::new();
    let mut reports = Vec::new();
    let mut train_secs = Vec::new();
    let train_part = training_part(&dataset, holdout);
    let train_images = train_part.flat_images();
    for inst in &instances {
        let file = format!("models/{}.lsm", inst.stem());
        let cached = reuse
            .map(|d| d.join(format!("{}.lsm", inst.stem())))
            .filter(|p| p.exists());
        let started = Instant::now();
        let (model, logs) = match cached {
            Some(p) => (at(load_model(&p), &p)?, Vec::new()),
            None => train_instance(inst, &dataset, holdout)?,
        };
        train_secs.push((!logs.is_empty()).then(|| started.elapsed().as_secs_f64()));
        if model.kind() != inst.kind || model.seed() != inst.seed {
            return Err(CliError::Runtime(format!(
                "reused model for {} has a different kind or seed",
                inst.stem()
            )));
        }
        let p = w.path(&file)?;
        at(save_model(&p, &model), &p)?;
        for (phase, log) in &logs {
            w.text(&format!("logs/{}-{phase}.csv", inst.stem()), &log.to_csv())?;
        }
        let samples = sample_ancestral(
            &model,
            &mut RngState::new(inst.seed).child(31),
            FIDELITY_SAMPLES,
        )?;
        reports.push(ModelReport {
            name: instance_name(&model),
            file,
            kind: inst.kind,
            latent_dim: model.latent_dim(),
            seed: inst.seed,
            holdout_mse: logs.iter().find_map(|(_, l)| l.holdout_mse),
            recoder_latent_mse: recoder_mse(&model, inst.seed)?,
            nn_fidelity: nearest_neighbor_mse(&samples, &train_images)?,
            final_losses: final_losses(&logs),
        });
        models.push(model);
    }

    // Importance and the support set come from one source model.
    let src = &models[cfg.support.source_model];
    let src_name = instance_name(src);
    let gains = rank_variables(src, &train_images)?;
    w.text("gains.csv", &gains.to_csv())?;
    let selection = select_top(&gains, cfg.support.n_features, cfg.support.target_size)?;
    if let Some(msg) = &selection.warning {
        progress(&format!("warning: {msg}"));
    }
    let spec = SectorSpec::new(selection.indices.clone(), cfg.support.threshold)?;
    let codes = src.encode(&train_images)?;
    let census = sector_census(&codes, &spec)?;
    let support = build_support_set(
        &codes,
        &spec,
        cfg.support.target_size,
        cfg.support.pick_rule(),
    )?;
    let p = w.path("support.json")?;
    at(save_support_set(&p, &support), &p)?;
    let indices = support.indices();
    let fit_images = train_images.select_rows(&indices);
    w.pgm("figures/support-set.pgm", &rows_to_strip(&fit_images)?)?;
    let random = random_subset(
        train_images.rows(),
        indices.len(),
        &mut RngState::new(cfg.dataset.seed).child(5),
    )?;
    let diversity_support = diversity_score(&train_images, &indices)?;
    let diversity_random = diversity_score(&train_images, &random)?;
    let support_report = SupportReport {
        source_model: src_name.clone(),
        selected_vars: selection.indices.clone(),
        selection_warning: selection.warning.clone(),
        sector_counts: census.counts.clone(),
        outside_sectors: census.none,
        occupancy_ratio: census.occupancy_ratio(),
        size: indices.len(),
        top_ups: support.num_topups(),
        diversity_support,
        diversity_random,
        diversity_ratio: diversity_support / diversity_random,
    };
    progress(&format!(
        "support set of {} ({} top-ups), diversity ratio {:.3}",
        indices.len(),
        support.num_topups(),
        support_report.diversity_ratio
    ));

    // All ordered pairs, fit on the support set and scored on held-out rows.
    let train_rows = train_images.rows();
    let flat = dataset.flat_images();
    let eval_images = flat.slice_rows(train_rows, train_rows + cfg.eval.n_images);
    let fit = match cfg.mapping.method {
        FitMethod::ClosedForm => MapFit::ClosedForm(cfg.mapping.fit_options()),
        FitMethod::Minibatch => MapFit::Minibatch(cfg.mapping.minibatch_options()),
    };
    let (matrix, maps) = run_type_matrix(&models, &fit_images, "support-set", &eval_images, &fit)?;
    let stems: Vec<String> = instances.iter().map(Instance::stem).collect();
    for (k, map) in maps.iter().enumerate() {
        let (i, j) = (k / models.len(), k % models.len());
        if i != j {
            let p = w.path(&format!("maps/{}__{}.lsm", stems[i], stems[j]))?;
            at(save_map(&p, map), &p)?;
        }
    }
    w.text("matrix/summary.csv", &matrix.summary_csv())?;
    w.text("matrix/pairs.csv", &matrix.pairs_csv())?;
    progress("type matrix written");

    // Figure analogs: samples, traversals, relocations.
    let strip_len = cfg.eval.strip_len;
    let originals = eval_images.slice_rows(0, strip_len.min(eval_images.rows()));
    let src_codes = src.encode(&originals)?;
    for (i, (model, stem)) in models.iter().zip(&stems).enumerate() {
        let samples = sample_ancestral(
            model,
            &mut RngState::new(cfg.dataset.seed).child(i as u64),
            strip_len,
        )?;
        w.pgm(
            &format!("figures/{stem}-samples.pgm"),
            &rows_to_strip(&samples)?,
        )?;
        let base = vec![0.0f32; model.latent_dim()];
        let vars: Vec<usize> = if i == cfg.support.source_model {
            selection.indices.iter().copied().take(3).collect()
        } else {
            (0..model.latent_dim().min(3)).collect()
        };
        let rows: Vec<Tensor> = vars
            .iter()
            .map(|&v| rows_to_strip(&latent_traversal(model, &base, v, -2.25, 2.25, strip_len)?))
            .collect::<Result<_, _>>()?;
        w.pgm(&format!("figures/{stem}-traversal.pgm"), &stack(&rows)?)?;
        if i != cfg.support.source_model {
            let map = &maps[cfg.support.source_model * models.len() + i];
            let mapped = latent_atlas::mapping::apply_map(map, &src_codes)?;
            let sheet = stack(&[
                rows_to_strip(&originals)?,
                rows_to_strip(&src.decode(&src_codes)?)?,
                rows_to_strip(&model.decode(&mapped)?)?,
            ])?;
            w.pgm(
                &format!(
                    "figures/relocate-{}__{stem}.pgm",
                    stems[cfg.support.source_model]
                ),
                &sheet,
            )?;
        }
    }

    // Generative-range probe: own samples against inverted held-out images.
    let method = ProbeMethod::Gradient {
        init: InitRule::Recoder,
        config: GradientConfig {
            steps: cfg.eval.probe_steps,
            ..GradientConfig::default()
        },
    };
    let k = cfg.eval.probe_images;
    let inverted = invert_intensity(&eval_images.slice_rows(0, k.min(eval_images.rows())));
    let mut probes = Vec::new();
    for (model, inst) in models.iter().zip(&instances) {
        let in_range = sample_ancestral(model, &mut RngState::new(inst.seed).child(41), k)?;
        let report = range_probe(model, &in_range, &inverted, &method)?;
        progress(&format!(
            "probe {}: ratio {:.2}",
            instance_name(model),
            report.ratio
        ));
        probes.push(ProbeEntry {
            model: instance_name(model),
            report,
        });
    }

    let report = StudyReport {
        dataset: DatasetReport {
            seed: dataset.seed,
            n: dataset.len(),
            checksum: dataset.checksum(),
            train_rows,
            held_out_rows: dataset.len() - train_rows,
        },
        models: reports,
        gains,
        support: support_report,
        matrix,
        probes,
    };
    let body =
        serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
    w.text("report.json", &body)?;
    let mut artifacts = w.written;
    artifacts.sort();
    Ok(StudyOutcome {
        report,
        dataset,
        models,
        maps,
        support,
        artifacts,
        train_secs,
    })
}
