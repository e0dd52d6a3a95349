//! Experiment orchestration shared by the CLI and the test suite: the named
//! ablation vocabulary, single-variant training and evaluation, and the
//! ablation and subject-scale sweeps.
//!
//! Every sweep derives child seeds from the run seed, evaluates the held-out
//! subjects on held-out stimuli, and reports seed-means, so two runs with the
//! same resolved config produce the same tables.

use crate::config::RunConfig;
use crate::error::{CoreError, Result};
use crate::inference::{DecodeIdentity, Decoder, InferenceSettings, TargetBank};
use crate::lfcm::{Lfcm, SubjectToken};
use crate::seeding;
use crate::synthworld::World;
use crate::training::{
    build_latent_cache, compute_rescale_stats, train_lfcm, LfcmStepLog, RescaleStats, TrainAblation,
};
use crate::univae::UniVae;
use crate::evalkit;
use rand::seq::SliceRandom;
use serde::Serialize;
use std::fmt;
use std::str::FromStr;

/// One mechanism toggled off the full pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// The full model; the baseline every variant is compared against.
    None,
    /// Drop the compositor pathway; only the alignment term trains.
    NoComp,
    /// Zero the re-factorization consistency term.
    NoRefcr,
    /// Disable cross-subject code swapping.
    NoSwap,
    /// Compose from content alone; the nuisance code goes unused.
    NoNuisance,
    /// Drop dataset embeddings from conditioning.
    NoDataset,
    /// Drop subject embeddings from conditioning.
    NoSubject,
    /// Factorize latents from a random untrained autoencoder.
    NoUnivae,
    /// Skip per-code rescaling at inference.
    NoRescale,
    /// Decode under the default embedding only; no sweep over seen subjects.
    NoSweep,
}

impl Ablation {
    pub const ALL: [Ablation; 10] = [
        Ablation::None,
        Ablation::NoComp,
        Ablation::NoRefcr,
        Ablation::NoSwap,
        Ablation::NoNuisance,
        Ablation::NoDataset,
        Ablation::NoSubject,
        Ablation::NoUnivae,
        Ablation::NoRescale,
        Ablation::NoSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoComp => "no_comp",
            Ablation::NoRefcr => "no_refcr",
            Ablation::NoSwap => "no_swap",
            Ablation::NoNuisance => "no_nuisance",
            Ablation::NoDataset => "no_dataset",
            Ablation::NoSubject => "no_subject",
            Ablation::NoUnivae => "no_univae",
            Ablation::NoRescale => "no_rescale",
            Ablation::NoSweep => "no_sweep",
        }
    }

    /// Inference-time toggles reuse the full trained model.
    pub fn is_eval_only(self) -> bool {
        matches!(self, Ablation::None | Ablation::NoRescale | Ablation::NoSweep)
    }

    fn train_ablation(self) -> TrainAblation {
        TrainAblation {
            no_swap: self == Ablation::NoSwap,
            no_refcr: self == Ablation::NoRefcr,
            no_nuisance: self == Ablation::NoNuisance,
            no_comp: self == Ablation::NoComp,
        }
    }

    fn settings(self, base: InferenceSettings) -> InferenceSettings {
        InferenceSettings {
            sweep: base.sweep && self != Ablation::NoSweep,
            rescale: base.rescale && self != Ablation::NoRescale,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Ablation> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| CoreError::UnknownAblation(s.to_string()))
    }
}

/// Stage II artifacts for one trained variant. `ae_override` is present only
/// when the variant replaces the shared autoencoder (untrained-encoder
/// ablation); evaluation must then use it in place of the trained one.
pub struct VariantModels {
    pub ablation: Ablation,
    pub lfcm: Lfcm,
    pub stats: RescaleStats,
    pub ae_override: Option<UniVae>,
    /// Per-step training log, for persistence by callers.
    pub log: Vec<LfcmStepLog>,
}

/// Train a factorization module for one ablation against a frozen
/// autoencoder, on the given world subjects. `seed` drives pair sampling.
pub fn train_variant(
    cfg: &RunConfig,
    world: &World,
    ae: &UniVae,
    subjects: &[usize],
    ablation: Ablation,
    seed: u64,
) -> Result<VariantModels> {
    let mode = cfg.exec_mode()?;
    let ae_override = match ablation {
        Ablation::NoUnivae => Some(UniVae::init(cfg.univae.clone(), &world.surface)?),
        _ => None,
    };
    let ae_used = ae_override.as_ref().unwrap_or(ae);

    let mut lfcm_cfg = cfg.lfcm.clone();
    match ablation {
        Ablation::NoDataset => lfcm_cfg.use_dataset = false,
        Ablation::NoSubject => lfcm_cfg.use_subject = false,
        _ => {}
    }

    let cache = build_latent_cache(world, ae_used, cfg.training.train_stimuli, subjects, mode)?;
    let (lr, lc) = ae_used.latent_shape();
    let mut lfcm = Lfcm::init(lfcm_cfg, lr, lc, subjects.len(), world.n_datasets())?;
    let mut tc = cfg.lfcm_train_config(ablation.train_ablation())?;
    tc.seed = seed;
    let log =
        train_lfcm(&mut lfcm, ae_used, world, &cache, cfg.training.train_stimuli, subjects.len(), &tc)?;
    let stats = compute_rescale_stats(&lfcm, &cache, mode)?;
    Ok(VariantModels { ablation, lfcm, stats, ae_override, log })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EvalOutcome {
    pub two_way: f64,
    pub top1: f64,
}

/// Decode one subject's held-out stimuli and score retrieval against the
/// full stimulus bank. `identity` controls whether the decoder may use a
/// trained subject embedding or must treat the subject as unknown.
pub fn eval_subject(
    cfg: &RunConfig,
    world: &World,
    ae: &UniVae,
    models: &VariantModels,
    subject: usize,
    identity: DecodeIdentity,
) -> Result<EvalOutcome> {
    let mode = cfg.exec_mode()?;
    let ae_used = models.ae_override.as_ref().unwrap_or(ae);
    let settings = models.ablation.settings(InferenceSettings {
        sweep: cfg.inference.sweep,
        rescale: cfg.inference.rescale,
    });
    let dec = Decoder::new(ae_used, &models.lfcm, Some(&models.stats), settings)?;
    let bank = TargetBank::from_world(world);
    let ds = cfg.eval.dataset;

    let mut cells = Vec::new();
    let mut truth = Vec::new();
    for stim in cfg.training.train_stimuli..world.n_stimuli() {
        for trial in 0..cfg.eval.trials as u64 {
            cells.push((stim, subject, ds, trial));
            truth.push(stim);
        }
    }
    if cells.is_empty() {
        return Err(CoreError::InsufficientData("no evaluation samples".into()));
    }
    let codes = dec.codes_for_cells(world, &cells, |_| identity, mode);
    Ok(EvalOutcome {
        two_way: evalkit::two_way_exhaustive(&codes, &bank, &truth),
        top1: evalkit::top1_accuracy(&codes, &bank, &truth),
    })
}

/// Mean outcome over every held-out subject, decoded as unknown.
pub fn eval_unseen(
    cfg: &RunConfig,
    world: &World,
    ae: &UniVae,
    models: &VariantModels,
) -> Result<EvalOutcome> {
    let unseen: Vec<usize> = (cfg.seen_subjects()..world.n_subjects()).collect();
    if unseen.is_empty() {
        return Err(CoreError::InsufficientData("no held-out subjects".into()));
    }
    let mut two_way = 0.0;
    let mut top1 = 0.0;
    for &s in &unseen {
        let o = eval_subject(cfg, world, ae, models, s, DecodeIdentity::Unknown)?;
        two_way += o.two_way;
        top1 += o.top1;
    }
    let n = unseen.len() as f64;
    Ok(EvalOutcome { two_way: two_way / n, top1: top1 / n })
}

/// Identity policy against a training-subject list: trained subjects decode
/// under their learned embedding, everyone else decodes as unknown.
pub fn identity_against(trained_on: &[usize], subject: usize) -> DecodeIdentity {
    match trained_on.iter().position(|&s| s == subject) {
        Some(local) => DecodeIdentity::Known(local),
        None => DecodeIdentity::Unknown,
    }
}

/// Full evaluation bundle over the held-out stimuli for the given subjects:
/// retrieval metrics per dataset and pooled, map-level Pearson correlation of
/// the factorize/compose/decode round trip against clean renders, and the
/// content-code contrast distances over the subject-by-stimulus panel.
pub fn metrics_report(
    cfg: &RunConfig,
    world: &World,
    ae: &UniVae,
    models: &VariantModels,
    subjects: &[usize],
    trained_on: &[usize],
) -> Result<evalkit::MetricsReport> {
    let mode = cfg.exec_mode()?;
    let ae_used = models.ae_override.as_ref().unwrap_or(ae);
    let settings = models.ablation.settings(InferenceSettings {
        sweep: cfg.inference.sweep,
        rescale: cfg.inference.rescale,
    });
    let dec = Decoder::new(ae_used, &models.lfcm, Some(&models.stats), settings)?;
    let bank = TargetBank::from_world(world);
    let test_stims: Vec<usize> = (cfg.training.train_stimuli..world.n_stimuli()).collect();
    if subjects.is_empty() || test_stims.is_empty() {
        return Err(CoreError::InsufficientData("no evaluation cells".into()));
    }

    let active = world.surface.active_indices();
    let mut per_dataset = Vec::with_capacity(world.n_datasets());
    let mut pooled_codes = Vec::new();
    let mut pooled_truth = Vec::new();
    let mut pooled_pix = Vec::new();

    for ds in 0..world.n_datasets() {
        let mut cells = Vec::new();
        let mut truth = Vec::new();
        for &s in subjects {
            for &stim in &test_stims {
                for trial in 0..cfg.eval.trials as u64 {
                    cells.push((stim, s, ds, trial));
                    truth.push(stim);
                }
            }
        }
        let codes = dec.codes_for_cells(world, &cells, |s| identity_against(trained_on, s), mode);

        // Map-level correlation of the composed latent decoded back to the
        // surface, against the noise-free render of the same cell.
        let pix = crate::exec::map_indexed(mode, cells.len(), |i| {
            let (stim, s, d, trial) = cells[i];
            let grid = world.render(stim, s, d, trial);
            let z = ae_used.encode(&world.surface.patchify(&grid));
            let token = match identity_against(trained_on, s) {
                DecodeIdentity::Known(local) => SubjectToken::Seen(local),
                DecodeIdentity::Unknown => SubjectToken::Default,
            };
            let (c, n) = models.lfcm.factorize(&z, token, d);
            let z_hat = models.lfcm.compose(&c, &n, token, d);
            let recon = world.surface.unpatchify(&ae_used.decode(&z_hat));
            let clean = world.render_clean(stim, s, d);
            let pred: Vec<f64> = active.iter().map(|&ix| recon.data()[ix]).collect();
            let gt: Vec<f64> = active.iter().map(|&ix| clean.data()[ix]).collect();
            evalkit::pixcorr(&pred, &gt)
        });

        let two_way = evalkit::two_way_exhaustive(&codes, &bank, &truth);
        let top1 = evalkit::top1_accuracy(&codes, &bank, &truth);
        let mut pix_vals = Vec::with_capacity(pix.len());
        for p in pix {
            pix_vals.push(p?);
        }
        let pix_mean = pix_vals.iter().sum::<f64>() / pix_vals.len() as f64;
        per_dataset.push(evalkit::DatasetMetrics { dataset: ds, pixcorr: pix_mean, two_way, top1 });

        pooled_codes.extend(codes);
        pooled_truth.extend(truth);
        pooled_pix.extend(pix_vals);
    }

    // Contrast-distance panel: every world subject contributes one trial per
    // capped test stimulus on the first dataset, so cross-subject pairs exist
    // even when a single subject is being scored.
    let cap = test_stims.len().min(12);
    let mut panel_cells = Vec::new();
    for s in 0..world.n_subjects() {
        for &stim in &test_stims[..cap] {
            panel_cells.push((stim, s, 0usize, 0u64));
        }
    }
    let panel_codes =
        dec.codes_for_cells(world, &panel_cells, |s| identity_against(trained_on, s), mode);
    let panel_subj: Vec<usize> = panel_cells.iter().map(|c| c.1).collect();
    let panel_stim: Vec<usize> = panel_cells.iter().map(|c| c.0).collect();
    let contrasts = evalkit::disentanglement_report(&panel_codes, &panel_subj, &panel_stim)?;
    Ok(evalkit::MetricsReport {
        pixcorr: pooled_pix.iter().sum::<f64>() / pooled_pix.len() as f64,
        two_way: evalkit::two_way_exhaustive(&pooled_codes, &bank, &pooled_truth),
        top1: evalkit::top1_accuracy(&pooled_codes, &bank, &pooled_truth),
        within_stim_cross_subj_dist: contrasts.within_stim_cross_subj,
        within_subj_cross_stim_dist: contrasts.within_subj_cross_stim,
        per_dataset,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    /// Seed-mean unseen-subject metrics.
    pub two_way: f64,
    pub top1: f64,
    /// `two_way` minus the full model's seed-mean.
    pub delta_two_way: f64,
}

/// Train and evaluate the full model plus each named ablation under shared
/// seeds; the full model is always the first row. Eval-only ablations reuse
/// the full model's weights per seed.
pub fn ablation_table(
    cfg: &RunConfig,
    world: &World,
    ae: &UniVae,
    ablations: &[Ablation],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(CoreError::InvalidConfig("ablation table needs at least one seed".into()));
    }
    let subjects: Vec<usize> = (0..cfg.seen_subjects()).collect();
    let mut full = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        full.push(train_variant(cfg, world, ae, &subjects, Ablation::None, seed)?);
    }
    let mean_of = |outs: &[EvalOutcome]| -> (f64, f64) {
        let n = outs.len() as f64;
        (
            outs.iter().map(|o| o.two_way).sum::<f64>() / n,
            outs.iter().map(|o| o.top1).sum::<f64>() / n,
        )
    };

    let full_outs: Vec<EvalOutcome> =
        full.iter().map(|m| eval_unseen(cfg, world, ae, m)).collect::<Result<_>>()?;
    let (full_two_way, full_top1) = mean_of(&full_outs);
    let mut rows = vec![AblationRow {
        ablation: Ablation::None,
        two_way: full_two_way,
        top1: full_top1,
        delta_two_way: 0.0,
    }];

    for &ab in ablations {
        if ab == Ablation::None {
            continue;
        }
        let mut outs = Vec::with_capacity(seeds.len());
        for (i, &seed) in seeds.iter().enumerate() {
            let models;
            let eval_models = if ab.is_eval_only() {
                // Borrow the trained full model; only settings change.
                models = VariantModels {
                    ablation: ab,
                    lfcm: full[i].lfcm.clone(),
                    stats: full[i].stats.clone(),
                    ae_override: None,
                    log: Vec::new(),
                };
                &models
            } else {
                models = train_variant(cfg, world, ae, &subjects, ab, seed)?;
                &models
            };
            outs.push(eval_unseen(cfg, world, ae, eval_models)?);
        }
        let (two_way, top1) = mean_of(&outs);
        rows.push(AblationRow { ablation: ab, two_way, top1, delta_two_way: two_way - full_two_way });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct ScaleRow {
    pub count: usize,
    pub mean_two_way: f64,
    pub std_two_way: f64,
    pub mean_top1: f64,
}

/// Subject-scale sweep: for each training-subject count, train the
/// factorization stage on a subset of the seen pool and score the held-out
/// subjects. Each repeat draws one permutation of the pool and grows it by
/// prefix, so larger counts extend smaller ones instead of resampling, and
/// trains under its own derived seed.
pub fn subject_scale_table(
    cfg: &RunConfig,
    world: &World,
    ae: &UniVae,
    counts: &[usize],
    repeats: usize,
) -> Result<Vec<ScaleRow>> {
    let pool: Vec<usize> = (0..cfg.seen_subjects()).collect();
    if counts.is_empty() || repeats == 0 {
        return Err(CoreError::InvalidConfig("subject-scale needs counts and repeats".into()));
    }
    for &k in counts {
        if k < 2 || k > pool.len() {
            return Err(CoreError::InvalidConfig(format!(
                "subject count {k} outside 2..={}",
                pool.len()
            )));
        }
    }

    let mut rows = Vec::with_capacity(counts.len());
    let mut accs = vec![Vec::with_capacity(repeats); counts.len()];
    let mut tops = vec![Vec::with_capacity(repeats); counts.len()];
    for r in 0..repeats as u64 {
        let mut order = pool.clone();
        order.shuffle(&mut seeding::rng_from_key(&[cfg.training.seed, r], "subject-scale"));
        let train_seed = seeding::derive_seed(&[cfg.training.seed, r], "subject-scale-train");
        for (ci, &k) in counts.iter().enumerate() {
            let mut subjects = order[..k].to_vec();
            subjects.sort_unstable();
            let models = train_variant(cfg, world, ae, &subjects, Ablation::None, train_seed)?;
            let out = eval_unseen(cfg, world, ae, &models)?;
            accs[ci].push(out.two_way);
            tops[ci].push(out.top1);
        }
    }
    for (ci, &k) in counts.iter().enumerate() {
        let n = repeats as f64;
        let mean = accs[ci].iter().sum::<f64>() / n;
        let var = accs[ci].iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        rows.push(ScaleRow {
            count: k,
            mean_two_way: mean,
            std_two_way: var.sqrt(),
            mean_top1: tops[ci].iter().sum::<f64>() / n,
        });
    }
    Ok(rows)
}
