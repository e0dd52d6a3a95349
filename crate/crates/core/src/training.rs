//! Stage II training: pair sampling, the composite loss, and the rescale
//! statistics computed from the finished model.
//!
//! Each step samples pairs that share a stimulus but come from different
//! subjects. Four latents are composed per pair: two self-reconstructions and
//! two with nuisance codes swapped across the pair. Content codes align to
//! the stimulus target, every composed latent must reconstruct its subject's
//! latent and surface, and re-factorizing a detached composed latent must
//! recover the codes that built it. The three terms are weighted and summed;
//! all reductions are per-element means.

use crate::error::{CoreError, Result};
use crate::exec::{self, ExecMode};
use crate::lfcm::{Lfcm, SubjectToken};
use crate::opt::{AdamW, AdamWConfig, Ema};
use crate::seeding;
use crate::synthworld::World;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::univae::UniVae;
use rand::Rng;
use serde::Serialize;
use std::path::Path;
use std::sync::Arc;

/// One pre-encoded training cell: a rendered response and its frozen latent.
/// `subj` is the local index into the training subject list, not a world id.
#[derive(Debug, Clone)]
pub struct TrainCell {
    pub stim: usize,
    pub subj: usize,
    pub ds: usize,
    pub tokens: Tensor,
    pub z: Tensor,
}

/// Grid of cells over train stimuli x training subjects x datasets, one noisy
/// trial per cell. `subjects` holds world subject ids; cell order follows
/// their positions, so [`cell_index`] works on local indices. Indexed by
/// [`cell_index`].
pub fn build_latent_cache(
    world: &World,
    ae: &UniVae,
    train_stimuli: usize,
    subjects: &[usize],
    mode: ExecMode,
) -> Result<Vec<TrainCell>> {
    if train_stimuli == 0 || train_stimuli > world.n_stimuli() {
        return Err(CoreError::InvalidConfig(format!(
            "train_stimuli {} outside 1..={}",
            train_stimuli,
            world.n_stimuli()
        )));
    }
    if subjects.is_empty() {
        return Err(CoreError::InvalidConfig("empty training subject list".into()));
    }
    for (i, &s) in subjects.iter().enumerate() {
        if s >= world.n_subjects() {
            return Err(CoreError::IndexOutOfRange(format!(
                "training subject {s} outside world of {}",
                world.n_subjects()
            )));
        }
        if subjects[..i].contains(&s) {
            return Err(CoreError::InvalidConfig(format!("duplicate training subject {s}")));
        }
    }
    let n_seen = subjects.len();
    let n_ds = world.n_datasets();
    let total = train_stimuli * n_seen * n_ds;
    let cells = exec::map_indexed(mode, total, |i| {
        let ds = i % n_ds;
        let subj = (i / n_ds) % n_seen;
        let stim = i / (n_ds * n_seen);
        let grid = world.render(stim, subjects[subj], ds, 0);
        let tokens = world.surface.patchify(&grid);
        let z = ae.encode(&tokens);
        TrainCell { stim, subj, ds, tokens, z }
    });
    Ok(cells)
}

pub fn cell_index(stim: usize, subj: usize, ds: usize, n_seen: usize, n_ds: usize) -> usize {
    (stim * n_seen + subj) * n_ds + ds
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossWeights {
    pub align: f64,
    pub rec: f64,
    pub refcr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { align: 1.0, rec: 1.0, refcr: 1.0 }
    }
}

/// Training-time ablation switches. All off reproduces the full objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainAblation {
    /// Drop the cross-subject swap surrogates.
    pub no_swap: bool,
    /// Drop the re-factorization consistency term.
    pub no_refcr: bool,
    /// Compose from content alone; nuisance codes go unused.
    pub no_nuisance: bool,
    /// Drop the compositor pathway entirely: no surrogates, so the
    /// reconstruction and re-factorization terms vanish and only the
    /// alignment term trains.
    pub no_comp: bool,
}

#[derive(Debug, Clone)]
pub struct LfcmTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub opt: AdamWConfig,
    pub weights: LossWeights,
    pub ablation: TrainAblation,
    /// Polyak decay for the returned weights; 0 keeps the last iterate.
    pub ema: f64,
    pub seed: u64,
    pub mode: ExecMode,
}

#[derive(Debug, Clone, Serialize)]
pub struct LfcmStepLog {
    pub step: usize,
    pub loss: f64,
    pub align: f64,
    pub rec: f64,
    pub refcr: f64,
    pub lr: f64,
}

pub fn write_lfcm_log(path: &Path, log: &[LfcmStepLog]) -> Result<()> {
    let mut out = String::from("step,loss,align,rec,refcr,lr\n");
    for s in log {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.step, s.loss, s.align, s.rec, s.refcr, s.lr
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct PairDraw {
    stim: usize,
    cell_i: usize,
    cell_j: usize,
    subj_i: usize,
    subj_j: usize,
    ds_i: usize,
    ds_j: usize,
    /// Factorization conditioning for the initial split; the default token
    /// substitutes for the true one at the configured rate.
    tok_i: SubjectToken,
    tok_j: SubjectToken,
}

/// One surrogate latent scheduled for reconstruction and re-factorization.
struct SurrogatePlan {
    content_from_other: bool,
    subj: usize,
    ds: usize,
    own: bool,
}

fn scalar_terms(tape: &mut Tape, terms: &[NodeId]) -> NodeId {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    acc
}

/// Builds the full pair loss on `tape`. Returns (total, align, rec, refcr)
/// nodes; the scalar parts are also readable without a backward pass.
#[allow(clippy::too_many_arguments)]
fn pair_loss_program(
    tape: &mut Tape,
    lfcm: &Lfcm,
    lfcm_staged: &crate::params::Staged,
    ae: &UniVae,
    ae_staged: &crate::params::Staged,
    cache: &[TrainCell],
    draw: &PairDraw,
    c_gt: &Tensor,
    token_weights: &Arc<Vec<f64>>,
    token_denom: f64,
    weights: LossWeights,
    ab: TrainAblation,
) -> (NodeId, NodeId, NodeId, NodeId) {
    let cell_i = &cache[draw.cell_i];
    let cell_j = &cache[draw.cell_j];
    let z_i = tape.constant(cell_i.z.clone());
    let z_j = tape.constant(cell_j.z.clone());
    let s_i = tape.constant(cell_i.tokens.clone());
    let s_j = tape.constant(cell_j.tokens.clone());
    let gt = tape.constant(c_gt.clone());

    let (c_i, n_i) = lfcm.factorize_program(tape, lfcm_staged, z_i, draw.tok_i, draw.ds_i);
    let (c_j, n_j) = lfcm.factorize_program(tape, lfcm_staged, z_j, draw.tok_j, draw.ds_j);

    let a_i = tape.mse(c_i, gt);
    let a_j = tape.mse(c_j, gt);
    let align = scalar_terms(tape, &[a_i, a_j]);

    let mut plans = Vec::new();
    if !ab.no_comp {
        plans.push(SurrogatePlan { content_from_other: false, subj: draw.subj_i, ds: draw.ds_i, own: true });
        plans.push(SurrogatePlan { content_from_other: false, subj: draw.subj_j, ds: draw.ds_j, own: false });
        if !ab.no_swap {
            plans.push(SurrogatePlan { content_from_other: true, subj: draw.subj_i, ds: draw.ds_i, own: true });
            plans.push(SurrogatePlan { content_from_other: true, subj: draw.subj_j, ds: draw.ds_j, own: false });
        }
    }

    let mut rec_terms = Vec::new();
    let mut refcr_terms = Vec::new();
    for plan in &plans {
        let (c_used, n_used, z_target, s_target) = if plan.own {
            (if plan.content_from_other { c_j } else { c_i }, n_i, z_i, s_i)
        } else {
            (if plan.content_from_other { c_i } else { c_j }, n_j, z_j, s_j)
        };
        let n_opt = if ab.no_nuisance { None } else { Some(n_used) };
        let z_hat = lfcm.compose_program_opt(tape, lfcm_staged, c_used, n_opt, SubjectToken::Seen(plan.subj), plan.ds);
        rec_terms.push(tape.mse(z_hat, z_target));
        let recon = ae.decode_program(tape, ae_staged, z_hat);
        rec_terms.push(tape.weighted_mse(recon, s_target, token_weights.clone(), token_denom));

        if !ab.no_refcr {
            let z_sg = tape.detach(z_hat);
            let (c_re, n_re) = lfcm.factorize_program(tape, lfcm_staged, z_sg, SubjectToken::Seen(plan.subj), plan.ds);
            refcr_terms.push(tape.mse(c_re, gt));
            if !ab.no_nuisance {
                let n_sg = tape.detach(n_used);
                refcr_terms.push(tape.mse(n_re, n_sg));
            }
        }
    }
    let rec = if rec_terms.is_empty() {
        tape.scalar_constant(0.0)
    } else {
        scalar_terms(tape, &rec_terms)
    };
    let refcr = if refcr_terms.is_empty() {
        tape.scalar_constant(0.0)
    } else {
        scalar_terms(tape, &refcr_terms)
    };

    let wa = tape.scale(align, weights.align);
    let wr = tape.scale(rec, weights.rec);
    let wf = tape.scale(refcr, weights.refcr);
    let total = scalar_terms(tape, &[wa, wr, wf]);
    (total, align, rec, refcr)
}

/// Train the factorization module against a frozen autoencoder. `cache` must
/// cover `train_stimuli x n_seen x n_datasets` as built by
/// [`build_latent_cache`]; pairs need at least two seen subjects.
pub fn train_lfcm(
    lfcm: &mut Lfcm,
    ae: &UniVae,
    world: &World,
    cache: &[TrainCell],
    train_stimuli: usize,
    n_seen: usize,
    tc: &LfcmTrainConfig,
) -> Result<Vec<LfcmStepLog>> {
    if n_seen < 2 {
        return Err(CoreError::NoPairAvailable(format!(
            "cross-subject pairs need at least 2 seen subjects, have {n_seen}"
        )));
    }
    let n_ds = world.n_datasets();
    if cache.len() != train_stimuli * n_seen * n_ds {
        return Err(CoreError::InvalidConfig(format!(
            "cache has {} cells, expected {}",
            cache.len(),
            train_stimuli * n_seen * n_ds
        )));
    }
    let token_weights = Arc::new(world.surface.token_weights().into_data());
    let token_denom: f64 = token_weights.iter().sum();

    let mut opt = AdamW::new(tc.opt.clone(), &lfcm.store);
    let mut ema = (tc.ema > 0.0).then(|| Ema::new(tc.ema, &lfcm.store));
    let mut rng = seeding::rng_for(tc.seed, "lfcm-train");
    let mut log = Vec::with_capacity(tc.steps);

    for step in 0..tc.steps {
        let mut draws = Vec::with_capacity(tc.batch);
        for _ in 0..tc.batch {
            let stim = rng.gen_range(0..train_stimuli);
            let subj_i = rng.gen_range(0..n_seen);
            let mut subj_j = rng.gen_range(0..n_seen - 1);
            if subj_j >= subj_i {
                subj_j += 1;
            }
            let ds_i = rng.gen_range(0..n_ds);
            let ds_j = rng.gen_range(0..n_ds);
            let tok_i = if rng.gen_bool(lfcm.cfg.default_replace_prob) {
                SubjectToken::Default
            } else {
                SubjectToken::Seen(subj_i)
            };
            let tok_j = if rng.gen_bool(lfcm.cfg.default_replace_prob) {
                SubjectToken::Default
            } else {
                SubjectToken::Seen(subj_j)
            };
            draws.push(PairDraw {
                stim,
                cell_i: cell_index(stim, subj_i, ds_i, n_seen, n_ds),
                cell_j: cell_index(stim, subj_j, ds_j, n_seen, n_ds),
                subj_i,
                subj_j,
                ds_i,
                ds_j,
                tok_i,
                tok_j,
            });
        }

        let lr = opt.current_lr();
        type PairOut = (f64, f64, f64, f64, Vec<Tensor>);
        let folded = exec::map_reduce_ordered(
            tc.mode,
            draws.len(),
            (0.0, 0.0, 0.0, 0.0, None::<Vec<Tensor>>),
            |i| -> PairOut {
                let draw = &draws[i];
                let c_gt = world.visual_target(draw.stim);
                let mut tape = Tape::new();
                let lfcm_staged = lfcm.stage(&mut tape, true);
                let ae_staged = ae.stage(&mut tape, false);
                let (total, align, rec, refcr) = pair_loss_program(
                    &mut tape,
                    lfcm,
                    &lfcm_staged,
                    ae,
                    &ae_staged,
                    cache,
                    draw,
                    &c_gt,
                    &token_weights,
                    token_denom,
                    tc.weights,
                    tc.ablation,
                );
                let grads = tape.backward(total);
                let g: Vec<Tensor> = (0..lfcm.store.len())
                    .map(|p| {
                        grads.wrt_or_zeros(
                            lfcm_staged.id(p),
                            lfcm.store.get(p).rows(),
                            lfcm.store.get(p).cols(),
                        )
                    })
                    .collect();
                (
                    tape.scalar(total),
                    tape.scalar(align),
                    tape.scalar(rec),
                    tape.scalar(refcr),
                    g,
                )
            },
            |acc, item: PairOut| {
                let (tl, al, rl, fl, gs) = acc;
                let (t, a, r, f, g) = item;
                let gs = match gs {
                    None => Some(g),
                    Some(mut tot) => {
                        for (x, y) in tot.iter_mut().zip(&g) {
                            x.add_in_place(y);
                        }
                        Some(tot)
                    }
                };
                (tl + t, al + a, rl + r, fl + f, gs)
            },
        );
        let (tl, al, rl, fl, gs) = folded;
        let b = tc.batch as f64;
        let loss = tl / b;
        if !loss.is_finite() {
            return Err(CoreError::DivergenceDetected { step, loss });
        }
        let mut grads = gs.expect("nonempty batch");
        for g in &mut grads {
            g.scale_in_place(1.0 / b);
        }
        opt.step(&mut lfcm.store, &grads)?;
        if let Some(e) = ema.as_mut() {
            e.update(&lfcm.store);
        }
        log.push(LfcmStepLog { step, loss, align: al / b, rec: rl / b, refcr: fl / b, lr });
    }
    if let Some(e) = ema {
        e.write_back(&mut lfcm.store);
    }
    Ok(log)
}

/// Per-feature moments of training content codes, stored broadcast to the
/// full code shape. The mean/std pool over cache cells and content tokens.
#[derive(Debug, Clone)]
pub struct RescaleStats {
    pub mean: Tensor,
    pub std: Tensor,
}

impl RescaleStats {
    /// Scale a code's per-feature moments (taken across its own tokens) to
    /// the training moments. A code already at the training moments is a
    /// fixed point.
    pub fn apply(&self, c: &Tensor) -> Tensor {
        assert_eq!(c.shape(), self.mean.shape(), "code shape");
        let (rows, cols) = c.shape();
        let mut out = Tensor::zeros(rows, cols);
        for f in 0..cols {
            let mut m = 0.0;
            for t in 0..rows {
                m += c.get(t, f);
            }
            m /= rows as f64;
            let mut v = 0.0;
            for t in 0..rows {
                let d = c.get(t, f) - m;
                v += d * d;
            }
            let s = (v / rows as f64).sqrt().max(1e-6);
            let tm = self.mean.get(0, f);
            let ts = self.std.get(0, f).max(1e-6);
            for t in 0..rows {
                out.set(t, f, (c.get(t, f) - m) / s * ts + tm);
            }
        }
        out
    }

    pub fn save_to(&self, path: &Path, lfcm_fp: &str) -> Result<()> {
        let meta = serde_json::json!({"kind": "rescale-stats", "lfcm_fp": lfcm_fp});
        let mut c = crate::container::Container::new(lfcm_fp, meta);
        c.push("mean", self.mean.clone());
        c.push("std", self.std.clone());
        c.write_to(path)
    }

    pub fn load_from(path: &Path) -> Result<RescaleStats> {
        let c = crate::container::Container::read_from(path)?;
        if c.meta_str("kind") != Some("rescale-stats") {
            return Err(CoreError::Io(format!("{}: not a stats file", path.display())));
        }
        Ok(RescaleStats { mean: c.require("mean")?.clone(), std: c.require("std")?.clone() })
    }

    /// Fingerprint of the factorizer these stats were computed under.
    pub fn load_meta_lfcm_fp(path: &Path) -> Result<Option<String>> {
        let c = crate::container::Container::read_from(path)?;
        Ok(c.meta_str("lfcm_fp").map(|s| s.to_string()))
    }
}

/// Factorize every cache cell under its true conditioning and pool content
/// moments per feature dimension.
pub fn compute_rescale_stats(lfcm: &Lfcm, cache: &[TrainCell], mode: ExecMode) -> Result<RescaleStats> {
    if cache.is_empty() {
        return Err(CoreError::InsufficientData("no cells to compute rescale stats from".into()));
    }
    let codes = exec::map_indexed(mode, cache.len(), |i| {
        let cell = &cache[i];
        lfcm.factorize(&cell.z, SubjectToken::Seen(cell.subj), cell.ds).0
    });
    let (rows, cols) = codes[0].shape();
    let n = (codes.len() * rows) as f64;
    let mut mean = vec![0.0; cols];
    for c in &codes {
        for t in 0..rows {
            for (f, m) in mean.iter_mut().enumerate() {
                *m += c.get(t, f);
            }
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; cols];
    for c in &codes {
        for t in 0..rows {
            for (f, v) in var.iter_mut().enumerate() {
                let d = c.get(t, f) - mean[f];
                *v += d * d;
            }
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
    let mut mean_t = Tensor::zeros(rows, cols);
    let mut std_t = Tensor::zeros(rows, cols);
    for t in 0..rows {
        mean_t.row_mut(t).copy_from_slice(&mean);
        std_t.row_mut(t).copy_from_slice(&std);
    }
    Ok(RescaleStats { mean: mean_t, std: std_t })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lfcm::LfcmConfig;
    use crate::synthworld::WorldConfig;
    use crate::univae::UniVaeConfig;

    fn fixture() -> (World, UniVae, Lfcm) {
        let world = World::generate(WorldConfig {
            seed: 9,
            n_subjects: 3,
            n_datasets: 2,
            n_stimuli: 6,
            d_true: 4,
            grid: 16,
            patch: 4,
            noise_std: 0.1,
            target_rows: 2,
            target_cols: 8,
            ..Default::default()
        })
        .unwrap();
        let ae = UniVae::init(
            UniVaeConfig {
                width: 8,
                heads: 2,
                enc_blocks: 1,
                dec_blocks: 1,
                cls_tokens: 2,
                ffn_mult: 2,
                init_seed: 4,
            },
            &world.surface,
        )
        .unwrap();
        let lfcm = Lfcm::init(
            LfcmConfig { d_c: 8, content_tokens: 2, blocks: 1, heads: 2, ffn_mult: 2, ..Default::default() },
            2,
            8,
            3,
            2,
        )
        .unwrap();
        (world, ae, lfcm)
    }

    fn train_cfg(mode: ExecMode) -> LfcmTrainConfig {
        LfcmTrainConfig {
            steps: 4,
            batch: 3,
            opt: AdamWConfig { lr: 1e-3, warmup_steps: 2, ..Default::default() },
            weights: LossWeights::default(),
            ablation: TrainAblation::default(),
            ema: 0.0,
            seed: 31,
            mode,
        }
    }

    #[test]
    fn cache_layout_matches_index_helper() {
        let (world, ae, _) = fixture();
        let cache = build_latent_cache(&world, &ae, 4, &[0, 1, 2], ExecMode::Sequential).unwrap();
        assert_eq!(cache.len(), 4 * 3 * 2);
        for (i, cell) in cache.iter().enumerate() {
            assert_eq!(cell_index(cell.stim, cell.subj, cell.ds, 3, 2), i);
        }
    }

    #[test]
    fn training_runs_and_freezes_autoencoder() {
        let (world, ae, mut lfcm) = fixture();
        let before = ae.store.to_flat();
        let cache = build_latent_cache(&world, &ae, 4, &[0, 1, 2], ExecMode::Sequential).unwrap();
        let log = train_lfcm(&mut lfcm, &ae, &world, &cache, 4, 3, &train_cfg(ExecMode::Sequential)).unwrap();
        assert_eq!(log.len(), 4);
        assert!(log.iter().all(|s| s.loss.is_finite()));
        // The autoencoder must be untouched, bit for bit.
        for (a, b) in before.iter().zip(ae.store.to_flat()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn training_is_mode_invariant() {
        let (world, ae, lfcm0) = fixture();
        let cache = build_latent_cache(&world, &ae, 4, &[0, 1, 2], ExecMode::Sequential).unwrap();
        let mut a = lfcm0.clone();
        train_lfcm(&mut a, &ae, &world, &cache, 4, 3, &train_cfg(ExecMode::Sequential)).unwrap();
        let mut b = lfcm0;
        train_lfcm(&mut b, &ae, &world, &cache, 4, 3, &train_cfg(ExecMode::Parallel)).unwrap();
        for (x, y) in a.store.to_flat().iter().zip(b.store.to_flat()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn single_subject_cannot_pair() {
        let (world, ae, mut lfcm) = fixture();
        let cache = build_latent_cache(&world, &ae, 4, &[0], ExecMode::Sequential).unwrap();
        let err = train_lfcm(&mut lfcm, &ae, &world, &cache, 4, 1, &train_cfg(ExecMode::Sequential));
        assert!(matches!(err, Err(CoreError::NoPairAvailable(_))));
    }

    /// With only the re-factorization term active, its stop-gradient must keep
    /// every compositor parameter's gradient at exactly zero while factorizer
    /// parameters still learn.
    #[test]
    fn refcr_gradient_stops_at_compositor() {
        let (world, ae, lfcm) = fixture();
        let cache = build_latent_cache(&world, &ae, 2, &[0, 1, 2], ExecMode::Sequential).unwrap();
        let token_weights = Arc::new(world.surface.token_weights().into_data());
        let token_denom: f64 = token_weights.iter().sum();
        let draw = PairDraw {
            stim: 1,
            cell_i: cell_index(1, 0, 0, 3, 2),
            cell_j: cell_index(1, 2, 1, 3, 2),
            subj_i: 0,
            subj_j: 2,
            ds_i: 0,
            ds_j: 1,
            tok_i: SubjectToken::Seen(0),
            tok_j: SubjectToken::Seen(2),
        };
        let c_gt = world.visual_target(1);
        let mut tape = Tape::new();
        let lfcm_staged = lfcm.stage(&mut tape, true);
        let ae_staged = ae.stage(&mut tape, false);
        let (_, _, _, refcr) = pair_loss_program(
            &mut tape,
            &lfcm,
            &lfcm_staged,
            &ae,
            &ae_staged,
            &cache,
            &draw,
            &c_gt,
            &token_weights,
            token_denom,
            LossWeights { align: 0.0, rec: 0.0, refcr: 1.0 },
            TrainAblation::default(),
        );
        let grads = tape.backward(refcr);
        let mut saw_fact_grad = false;
        for p in 0..lfcm.store.len() {
            let name = lfcm.store.name(p);
            let g = grads.wrt(lfcm_staged.id(p));
            if name.starts_with("comp.") || name == "out.w" || name == "out.b" {
                let zero = g.map_or(true, |t| t.data().iter().all(|&v| v == 0.0));
                assert!(zero, "compositor param `{name}` received gradient");
            }
            if name.starts_with("fact.") && g.map_or(false, |t| t.data().iter().any(|&v| v != 0.0)) {
                saw_fact_grad = true;
            }
        }
        assert!(saw_fact_grad, "factorizer got no gradient at all");
    }

    #[test]
    fn rescale_stats_fixed_point() {
        let (world, ae, lfcm) = fixture();
        let cache = build_latent_cache(&world, &ae, 3, &[0, 1, 2], ExecMode::Sequential).unwrap();
        let stats = compute_rescale_stats(&lfcm, &cache, ExecMode::Sequential).unwrap();
        // A synthetic code whose own moments equal the training moments must
        // pass through unchanged.
        let (rows, cols) = stats.mean.shape();
        let mut c = Tensor::zeros(rows, cols);
        for f in 0..cols {
            let m = stats.mean.get(0, f);
            let s = stats.std.get(0, f);
            // Two-point construction has mean m and std s for even row counts.
            for t in 0..rows {
                let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
                c.set(t, f, m + sign * s);
            }
        }
        let out = stats.apply(&c);
        for (a, b) in c.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn rescale_stats_round_trip() {
        let (world, ae, lfcm) = fixture();
        let cache = build_latent_cache(&world, &ae, 2, &[0, 1], ExecMode::Sequential).unwrap();
        let stats = compute_rescale_stats(&lfcm, &cache, ExecMode::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.ntc");
        stats.save_to(&path, "fp").unwrap();
        let back = RescaleStats::load_from(&path).unwrap();
        assert_eq!(stats.mean.data(), back.mean.data());
        assert_eq!(stats.std.data(), back.std.data());
    }
}
