//! Evaluation metrics and the gradient-check suite.
//!
//! Metrics are small and oracle-friendly on purpose: retrieval accuracies
//! reduce to cosine comparisons that a test can recompute by brute force.
//!
//! The gradient suite re-derives every loss term's gradient by central
//! finite differences on miniature model instances and compares against the
//! tape's analytic gradients. Stop-gradient terms are checked by freezing the
//! detached values as constants captured at the base point, which leaves the
//! analytic gradient unchanged while making the finite-difference loss well
//! defined.

use crate::error::{CoreError, Result};
use crate::exec::{self, ExecMode};
use crate::inference::{cosine, TargetBank};
use crate::lfcm::{Lfcm, LfcmConfig, SubjectToken};
use crate::params::{ParamStore, Staged};
use crate::seeding;
use crate::surface::SurfaceMap;
use crate::synthworld::World;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::univae::{UniVae, UniVaeConfig};
use std::sync::Arc;

/// Coefficient of determination, pooled over all entries.
pub fn r2(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "r2 length");
    assert!(!truth.is_empty(), "r2 on empty input");
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    let ss_res: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p) * (t - p)).sum();
    assert!(ss_tot > 0.0, "r2 against constant truth");
    1.0 - ss_res / ss_tot
}

/// Pearson correlation between two pixel vectors. Constant inputs have no
/// correlation to speak of and are rejected.
pub fn pixcorr(a: &[f64], b: &[f64]) -> Result<f64> {
    assert_eq!(a.len(), b.len(), "pixcorr length");
    if a.len() < 2 {
        return Err(CoreError::DegenerateInput("pixcorr needs at least 2 pixels".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return Err(CoreError::DegenerateInput("pixcorr on a constant map".into()));
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

/// Exhaustive two-way identification: for every code and every wrong bank
/// entry, does the true target score higher? Mean over all comparisons.
pub fn two_way_exhaustive(codes: &[Tensor], bank: &TargetBank, true_idx: &[usize]) -> f64 {
    assert_eq!(codes.len(), true_idx.len());
    assert!(!codes.is_empty() && bank.len() > 1);
    let mut correct = 0usize;
    let mut total = 0usize;
    for (code, &t) in codes.iter().zip(true_idx) {
        let scores = bank.scores(code);
        for (j, &s) in scores.iter().enumerate() {
            if j == t {
                continue;
            }
            if scores[t] > s {
                correct += 1;
            }
            total += 1;
        }
    }
    correct as f64 / total as f64
}

/// How two-way identification picks its distractors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistractorPolicy {
    /// Compare against every wrong bank entry. Deterministic, the default.
    Exhaustive,
    /// Draw `draws` wrong entries per sample from a seeded stream. Useful
    /// when the bank is too large to sweep.
    Sampled { draws: usize, seed: u64 },
}

impl Default for DistractorPolicy {
    fn default() -> Self {
        DistractorPolicy::Exhaustive
    }
}

/// Two-way identification under a distractor policy. Ties count as failures
/// in both modes.
pub fn two_way_identification(
    codes: &[Tensor],
    bank: &TargetBank,
    true_idx: &[usize],
    policy: DistractorPolicy,
) -> Result<f64> {
    assert_eq!(codes.len(), true_idx.len());
    if codes.is_empty() || bank.len() < 2 {
        return Err(CoreError::InsufficientData(
            "two-way identification needs samples and at least 2 bank entries".into(),
        ));
    }
    match policy {
        DistractorPolicy::Exhaustive => Ok(two_way_exhaustive(codes, bank, true_idx)),
        DistractorPolicy::Sampled { draws, seed } => {
            if draws == 0 {
                return Err(CoreError::InvalidConfig("sampled two-way with 0 draws".into()));
            }
            let mut correct = 0usize;
            let mut total = 0usize;
            for (i, (code, &t)) in codes.iter().zip(true_idx).enumerate() {
                let scores = bank.scores(code);
                let mut rng = seeding::rng_from_key(&[seed, i as u64], "two-way-sampled");
                for _ in 0..draws {
                    // Rejection-sample a wrong entry; bank.len() >= 2 so this halts.
                    let j = loop {
                        let j = rand::Rng::gen_range(&mut rng, 0..bank.len());
                        if j != t {
                            break j;
                        }
                    };
                    if scores[t] > scores[j] {
                        correct += 1;
                    }
                    total += 1;
                }
            }
            Ok(correct as f64 / total as f64)
        }
    }
}

pub fn top1_accuracy(codes: &[Tensor], bank: &TargetBank, true_idx: &[usize]) -> f64 {
    assert_eq!(codes.len(), true_idx.len());
    let hits = codes
        .iter()
        .zip(true_idx)
        .filter(|(c, &t)| bank.top1(c) == t)
        .count();
    hits as f64 / codes.len() as f64
}

/// Leave-one-out cosine nearest-neighbor label accuracy.
pub fn nn_label_accuracy(items: &[Tensor], labels: &[usize]) -> f64 {
    assert_eq!(items.len(), labels.len());
    assert!(items.len() > 1);
    let mut hits = 0usize;
    for i in 0..items.len() {
        let mut best = None;
        let mut best_sim = f64::NEG_INFINITY;
        for j in 0..items.len() {
            if i == j {
                continue;
            }
            let s = cosine(&items[i], &items[j]);
            if s > best_sim {
                best_sim = s;
                best = Some(j);
            }
        }
        if labels[best.unwrap()] == labels[i] {
            hits += 1;
        }
    }
    hits as f64 / items.len() as f64
}

/// Nearest-neighbor structure of a labeled panel along two label axes.
#[derive(Debug, Clone, Copy)]
pub struct PanelClustering {
    pub subject_acc: f64,
    pub stimulus_acc: f64,
}

pub fn panel_clustering(items: &[Tensor], subjects: &[usize], stimuli: &[usize]) -> PanelClustering {
    PanelClustering {
        subject_acc: nn_label_accuracy(items, subjects),
        stimulus_acc: nn_label_accuracy(items, stimuli),
    }
}

/// Mean Euclidean distances over the two contrast sets of a labeled panel:
/// pairs sharing a stimulus across different subjects, and pairs sharing a
/// subject across different stimuli. Content codes should put the first well
/// below the second; raw responses sit the other way around.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct DisentanglementReport {
    pub within_stim_cross_subj: f64,
    pub within_subj_cross_stim: f64,
}

pub fn disentanglement_report(
    items: &[Tensor],
    subjects: &[usize],
    stimuli: &[usize],
) -> Result<DisentanglementReport> {
    assert_eq!(items.len(), subjects.len());
    assert_eq!(items.len(), stimuli.len());
    let dist = |a: &Tensor, b: &Tensor| -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let (mut cross_subj, mut n_cs) = (0.0, 0usize);
    let (mut cross_stim, mut n_ct) = (0.0, 0usize);
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            let d = dist(&items[i], &items[j]);
            if stimuli[i] == stimuli[j] && subjects[i] != subjects[j] {
                cross_subj += d;
                n_cs += 1;
            } else if subjects[i] == subjects[j] && stimuli[i] != stimuli[j] {
                cross_stim += d;
                n_ct += 1;
            }
        }
    }
    if n_cs == 0 || n_ct == 0 {
        return Err(CoreError::InsufficientData(
            "disentanglement needs pairs in both contrast sets".into(),
        ));
    }
    Ok(DisentanglementReport {
        within_stim_cross_subj: cross_subj / n_cs as f64,
        within_subj_cross_stim: cross_stim / n_ct as f64,
    })
}

/// Per-dataset slice of an evaluation run.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct DatasetMetrics {
    pub dataset: usize,
    pub pixcorr: f64,
    pub two_way: f64,
    pub top1: f64,
}

/// Bundled metrics for one decoding run. The distance pair comes from a
/// content-code panel over the evaluated cells; the CSV form carries only the
/// per-dataset table plus a pooled `all` row, the JSON form carries everything.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricsReport {
    pub pixcorr: f64,
    pub two_way: f64,
    pub top1: f64,
    pub within_stim_cross_subj_dist: f64,
    pub within_subj_cross_stim_dist: f64,
    pub per_dataset: Vec<DatasetMetrics>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,pixcorr,two_way,top1\n");
        for row in &self.per_dataset {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                row.dataset, row.pixcorr, row.two_way, row.top1
            ));
        }
        out.push_str(&format!(
            "all,{:.6},{:.6},{:.6}\n",
            self.pixcorr, self.two_way, self.top1
        ));
        out
    }
}

/// Reconstruction R^2 of the autoencoder over active pixels, pooled across
/// the given cells, against noise-free renders.
pub fn ae_eval_r2(
    world: &World,
    ae: &UniVae,
    stims: &[usize],
    subjects: &[usize],
    datasets: &[usize],
    mode: ExecMode,
) -> Result<f64> {
    let mut cells = Vec::new();
    for &k in stims {
        for &s in subjects {
            for &d in datasets {
                cells.push((k, s, d));
            }
        }
    }
    if cells.is_empty() {
        return Err(CoreError::InsufficientData("no cells to evaluate".into()));
    }
    let active = world.surface.active_indices();
    let pairs = exec::map_indexed(mode, cells.len(), |i| {
        let (k, s, d) = cells[i];
        let clean = world.render_clean(k, s, d);
        let tokens = world.surface.patchify(&clean);
        let recon_grid = world.surface.unpatchify(&ae.reconstruct(&tokens));
        let mut t = Vec::with_capacity(active.len());
        let mut p = Vec::with_capacity(active.len());
        for &idx in &active {
            t.push(clean.data()[idx]);
            p.push(recon_grid.data()[idx]);
        }
        (t, p)
    });
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for (t, p) in pairs {
        truth.extend(t);
        pred.extend(p);
    }
    Ok(r2(&pred, &truth))
}

// ---------------------------------------------------------------------------
// Gradient suite
// ---------------------------------------------------------------------------

pub const GRAD_TOL: f64 = 1e-3;
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub n_params: usize,
}

#[derive(Debug, Clone)]
pub struct GradSuiteReport {
    pub checks: Vec<GradCheck>,
    /// True when a deliberately corrupted gradient was flagged, proving the
    /// tolerance has teeth.
    pub corruption_detected: bool,
    pub tol: f64,
}

impl GradSuiteReport {
    pub fn passed(&self) -> bool {
        self.corruption_detected && self.checks.iter().all(|c| c.max_rel_err < self.tol)
    }
}

fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6)
}

/// Compare analytic gradients of `program` against central differences over
/// every parameter in `store`. Returns (max rel err, param scalar count).
fn check_program(store: &mut ParamStore, program: &dyn Fn(&mut Tape, &Staged) -> NodeId) -> (f64, usize) {
    let mut tape = Tape::new();
    let staged = store.stage(&mut tape, true);
    let loss = program(&mut tape, &staged);
    let grads = tape.backward(loss);
    let analytic: Vec<Tensor> = (0..store.len())
        .map(|p| grads.wrt_or_zeros(staged.id(p), store.get(p).rows(), store.get(p).cols()))
        .collect();

    let loss_of = |store: &ParamStore| -> f64 {
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape, false);
        let loss = program(&mut tape, &staged);
        tape.scalar(loss)
    };

    let mut max_err: f64 = 0.0;
    let mut count = 0usize;
    for p in 0..store.len() {
        for i in 0..store.get(p).len() {
            let orig = store.get(p).data()[i];
            store.get_mut(p).data_mut()[i] = orig + FD_STEP;
            let fp = loss_of(store);
            store.get_mut(p).data_mut()[i] = orig - FD_STEP;
            let fm = loss_of(store);
            store.get_mut(p).data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(fd, analytic[p].data()[i]));
            count += 1;
        }
    }
    (max_err, count)
}

struct TinyFixture {
    surface: SurfaceMap,
    ae: UniVae,
    lfcm: Lfcm,
    tokens_i: Tensor,
    z_i: Tensor,
    z_j: Tensor,
    c_gt: Tensor,
    weights: Arc<Vec<f64>>,
    denom: f64,
}

fn tiny_fixture(seed: u64) -> TinyFixture {
    let surface = SurfaceMap::generate(8, 8, 4, 0.25, seed).unwrap();
    let ae = UniVae::init(
        UniVaeConfig {
            width: 4,
            heads: 2,
            enc_blocks: 1,
            dec_blocks: 1,
            cls_tokens: 2,
            ffn_mult: 2,
            init_seed: seed.wrapping_add(1),
        },
        &surface,
    )
    .unwrap();
    let lfcm = Lfcm::init(
        LfcmConfig {
            d_c: 6,
            content_tokens: 2,
            blocks: 1,
            heads: 2,
            ffn_mult: 2,
            default_replace_prob: 0.0,
            init_seed: seed.wrapping_add(2),
            ..Default::default()
        },
        2,
        4,
        2,
        1,
    )
    .unwrap();
    let mut rng = seeding::rng_for(seed, "grad-fixture");
    let n_tok = surface.n_tokens();
    let mut grid_i = Tensor::randn(8, 8, 1.0, &mut rng);
    surface.mask_grid(&mut grid_i);
    let mut grid_j = Tensor::randn(8, 8, 1.0, &mut rng);
    surface.mask_grid(&mut grid_j);
    let tokens_i = surface.patchify(&grid_i);
    let tokens_j = surface.patchify(&grid_j);
    let z_i = ae.encode(&tokens_i);
    let z_j = ae.encode(&tokens_j);
    let c_gt = Tensor::randn(2, 6, 0.5, &mut rng);
    let weights = Arc::new(surface.token_weights().into_data());
    let denom: f64 = weights.iter().sum();
    assert!(n_tok >= 2, "tiny surface too aggressive");
    TinyFixture { surface, ae, lfcm, tokens_i, z_i, z_j, c_gt, weights, denom }
}

/// Run every gradient check on miniature instances. Deterministic in `seed`.
pub fn run_gradient_suite(seed: u64) -> GradSuiteReport {
    let mut checks = Vec::new();
    let mut rng = seeding::rng_for(seed, "grad-suite");

    // Plain quadratic: loss = mean((x - t)^2). Analytic and FD agree to
    // near machine precision; a failure here means the harness is broken.
    {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::randn(3, 3, 1.0, &mut rng));
        let target = Tensor::randn(3, 3, 1.0, &mut rng);
        let (err, n) = check_program(&mut store, &|tape, staged| {
            let t = tape.constant(target.clone());
            tape.mse(staged.id(0), t)
        });
        assert!(err < 1e-8, "quadratic gradient err {err}");
        checks.push(GradCheck { name: "quadratic".into(), max_rel_err: err, n_params: n });
    }

    let fx = tiny_fixture(seed);

    // Autoencoder masked reconstruction, gradients for all encoder and
    // decoder parameters.
    {
        let mut store = fx.ae.store.clone();
        let ae = &fx.ae;
        let visible: Vec<usize> = (0..fx.surface.n_tokens()).step_by(2).collect();
        let tokens = fx.tokens_i.clone();
        let (weights, denom) = (fx.weights.clone(), fx.denom);
        let (err, n) = check_program(&mut store, &move |tape, staged| {
            let t = tape.constant(tokens.clone());
            let z = ae.encode_program(tape, staged, t, &visible);
            let recon = ae.decode_program(tape, staged, z);
            tape.weighted_mse(recon, t, weights.clone(), denom)
        });
        checks.push(GradCheck { name: "ae_masked_recon".into(), max_rel_err: err, n_params: n });
    }

    // Content alignment term.
    {
        let mut store = fx.lfcm.store.clone();
        let lfcm = &fx.lfcm;
        let (z, gt) = (fx.z_i.clone(), fx.c_gt.clone());
        let (err, n) = check_program(&mut store, &move |tape, staged| {
            let zn = tape.constant(z.clone());
            let gtn = tape.constant(gt.clone());
            let (c, _) = lfcm.factorize_program(tape, staged, zn, SubjectToken::Seen(0), 0);
            tape.mse(c, gtn)
        });
        checks.push(GradCheck { name: "lfcm_align".into(), max_rel_err: err, n_params: n });
    }

    // Latent reconstruction through a swap composition.
    {
        let mut store = fx.lfcm.store.clone();
        let lfcm = &fx.lfcm;
        let (z_i, z_j) = (fx.z_i.clone(), fx.z_j.clone());
        let (err, n) = check_program(&mut store, &move |tape, staged| {
            let zi = tape.constant(z_i.clone());
            let zj = tape.constant(z_j.clone());
            let (_, n_i) = lfcm.factorize_program(tape, staged, zi, SubjectToken::Seen(0), 0);
            let (c_j, _) = lfcm.factorize_program(tape, staged, zj, SubjectToken::Seen(1), 0);
            let z_hat = lfcm.compose_program(tape, staged, c_j, n_i, SubjectToken::Seen(0), 0);
            tape.mse(z_hat, zi)
        });
        checks.push(GradCheck { name: "lfcm_rec_latent".into(), max_rel_err: err, n_params: n });
    }

    // Surface reconstruction: gradient flows through the frozen decoder into
    // the composed latent. AE parameters are constants here; the check runs
    // over LFCM parameters only.
    {
        let mut store = fx.lfcm.store.clone();
        let (lfcm, ae) = (&fx.lfcm, &fx.ae);
        let (z_i, tokens_i) = (fx.z_i.clone(), fx.tokens_i.clone());
        let (weights, denom) = (fx.weights.clone(), fx.denom);
        let (err, n) = check_program(&mut store, &move |tape, staged| {
            let zi = tape.constant(z_i.clone());
            let ti = tape.constant(tokens_i.clone());
            let ae_staged = ae.stage(tape, false);
            let (c, nn) = lfcm.factorize_program(tape, staged, zi, SubjectToken::Seen(0), 0);
            let z_hat = lfcm.compose_program(tape, staged, c, nn, SubjectToken::Seen(0), 0);
            let recon = ae.decode_program(tape, &ae_staged, z_hat);
            tape.weighted_mse(recon, ti, weights.clone(), denom)
        });
        checks.push(GradCheck { name: "lfcm_rec_surface".into(), max_rel_err: err, n_params: n });
    }

    // Re-factorization consistency. The detached surrogate and nuisance
    // target are captured as constants at the base point so finite
    // differences see exactly what the stop-gradient makes the analytic
    // gradient see.
    {
        let lfcm = &fx.lfcm;
        let (z_hat_const, n_sg_const) = {
            let mut tape = Tape::new();
            let staged = lfcm.stage(&mut tape, false);
            let zi = tape.constant(fx.z_i.clone());
            let (c, nn) = lfcm.factorize_program(&mut tape, &staged, zi, SubjectToken::Seen(0), 0);
            let z_hat = lfcm.compose_program(&mut tape, &staged, c, nn, SubjectToken::Seen(0), 0);
            (tape.value(z_hat).clone(), tape.value(nn).clone())
        };
        let mut store = fx.lfcm.store.clone();
        let gt = fx.c_gt.clone();
        let (err, n) = check_program(&mut store, &move |tape, staged| {
            let z_sg = tape.constant(z_hat_const.clone());
            let n_sg = tape.constant(n_sg_const.clone());
            let gtn = tape.constant(gt.clone());
            let (c_re, n_re) = lfcm.factorize_program(tape, staged, z_sg, SubjectToken::Seen(0), 0);
            let lc = tape.mse(c_re, gtn);
            let ln = tape.mse(n_re, n_sg);
            tape.add(lc, ln)
        });
        checks.push(GradCheck { name: "lfcm_refcr".into(), max_rel_err: err, n_params: n });
    }

    // Sensitivity probe: scale one analytic gradient by 1.01 and confirm the
    // comparison notices. Uses the quadratic case where FD is exact.
    let corruption_detected = {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::randn(2, 2, 1.0, &mut rng));
        let target = Tensor::randn(2, 2, 1.0, &mut rng);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape, true);
        let t = tape.constant(target.clone());
        let loss = tape.mse(staged.id(0), t);
        let grads = tape.backward(loss);
        let mut g = grads.wrt(staged.id(0)).unwrap().clone();
        g.scale_in_place(1.01);
        let mut worst: f64 = 0.0;
        for i in 0..store.get(0).len() {
            let orig = store.get(0).data()[i];
            store.get_mut(0).data_mut()[i] = orig + FD_STEP;
            let fp = {
                let mut tape = Tape::new();
                let staged = store.stage(&mut tape, false);
                let tn = tape.constant(target.clone());
                let l = tape.mse(staged.id(0), tn);
                tape.scalar(l)
            };
            store.get_mut(0).data_mut()[i] = orig - FD_STEP;
            let fm = {
                let mut tape = Tape::new();
                let staged = store.stage(&mut tape, false);
                let tn = tape.constant(target.clone());
                let l = tape.mse(staged.id(0), tn);
                tape.scalar(l)
            };
            store.get_mut(0).data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(fd, g.data()[i]));
        }
        worst >= GRAD_TOL
    };

    GradSuiteReport { checks, corruption_detected, tol: GRAD_TOL }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_suite_passes() {
        let report = run_gradient_suite(77);
        for c in &report.checks {
            assert!(
                c.max_rel_err < report.tol,
                "{}: rel err {} over {} params",
                c.name,
                c.max_rel_err,
                c.n_params
            );
        }
        assert!(report.corruption_detected, "corrupted gradient went unnoticed");
        assert!(report.passed());
        assert_eq!(report.checks.len(), 6);
    }

    #[test]
    fn r2_of_perfect_prediction_is_one() {
        let t = vec![1.0, 2.0, 3.0, -1.0];
        assert!((r2(&t, &t) - 1.0).abs() < 1e-15);
        let mean_pred = vec![1.25; 4];
        assert!(r2(&mean_pred, &t).abs() < 1e-12);
    }

    #[test]
    fn pixcorr_affine_invariance_and_symmetry() {
        let mut rng = seeding::rng_for(5, "pixcorr");
        let a = Tensor::randn(1, 50, 1.0, &mut rng);
        let b = Tensor::randn(1, 50, 1.0, &mut rng);
        let r_ab = pixcorr(a.data(), b.data()).unwrap();
        let r_ba = pixcorr(b.data(), a.data()).unwrap();
        assert!((r_ab - r_ba).abs() < 1e-12);
        let scaled: Vec<f64> = b.data().iter().map(|v| 3.0 * v + 7.0).collect();
        assert!((pixcorr(a.data(), &scaled).unwrap() - r_ab).abs() < 1e-10);
        assert!((pixcorr(a.data(), a.data()).unwrap() - 1.0).abs() < 1e-12);
        let flat = vec![2.5; 50];
        assert!(matches!(
            pixcorr(&flat, b.data()),
            Err(CoreError::DegenerateInput(_))
        ));
    }

    #[test]
    fn two_way_matches_brute_force_on_known_case() {
        // Three orthogonal targets; codes slightly off their true target.
        let t0 = Tensor::from_vec(1, 3, vec![1.0, 0.0, 0.0]);
        let t1 = Tensor::from_vec(1, 3, vec![0.0, 1.0, 0.0]);
        let t2 = Tensor::from_vec(1, 3, vec![0.0, 0.0, 1.0]);
        let bank = TargetBank::from_targets(vec![t0.clone(), t1.clone(), t2.clone()]);
        let codes = vec![
            Tensor::from_vec(1, 3, vec![0.9, 0.1, 0.0]),
            Tensor::from_vec(1, 3, vec![0.2, 0.8, 0.1]),
        ];
        let acc = two_way_exhaustive(&codes, &bank, &[0, 1]);
        assert!((acc - 1.0).abs() < 1e-12);
        assert!((top1_accuracy(&codes, &bank, &[0, 1]) - 1.0).abs() < 1e-12);
        // Deliberately wrong label: code 0 is nearest t0, labeled t1.
        let acc_wrong = two_way_exhaustive(&codes[..1].to_vec(), &bank, &[1]);
        assert!(acc_wrong < 0.6);
    }

    #[test]
    fn sampled_two_way_tracks_exhaustive() {
        let mut rng = seeding::rng_for(9, "two-way-sampled");
        let targets: Vec<Tensor> = (0..12).map(|_| Tensor::randn(1, 8, 1.0, &mut rng)).collect();
        let codes: Vec<Tensor> = targets
            .iter()
            .map(|t| {
                let noise = Tensor::randn(1, 8, 0.4, &mut rng);
                Tensor::from_vec(1, 8, t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect())
            })
            .collect();
        let idx: Vec<usize> = (0..12).collect();
        let bank = TargetBank::from_targets(targets);
        let exact =
            two_way_identification(&codes, &bank, &idx, DistractorPolicy::Exhaustive).unwrap();
        let sampled = two_way_identification(
            &codes,
            &bank,
            &idx,
            DistractorPolicy::Sampled { draws: 400, seed: 3 },
        )
        .unwrap();
        assert!((exact - sampled).abs() < 0.08, "exact {exact} sampled {sampled}");
        // Same seed, same estimate.
        let again = two_way_identification(
            &codes,
            &bank,
            &idx,
            DistractorPolicy::Sampled { draws: 400, seed: 3 },
        )
        .unwrap();
        assert_eq!(sampled, again);
        assert!(matches!(
            two_way_identification(&[], &bank, &[], DistractorPolicy::Exhaustive),
            Err(CoreError::InsufficientData(_))
        ));
    }

    #[test]
    fn disentanglement_distances_on_planted_panel() {
        // Items cluster by stimulus: same-stimulus pairs are 0.1 apart,
        // same-subject pairs are ~2 apart.
        let mut items = Vec::new();
        let mut subjects = Vec::new();
        let mut stimuli = Vec::new();
        for stim in 0..3usize {
            for subj in 0..2usize {
                let mut v = vec![0.0; 4];
                v[stim] = 2.0;
                v[3] = 0.1 * subj as f64;
                items.push(Tensor::from_vec(1, 4, v));
                subjects.push(subj);
                stimuli.push(stim);
            }
        }
        let rep = disentanglement_report(&items, &subjects, &stimuli).unwrap();
        assert!(rep.within_stim_cross_subj < 0.2);
        assert!(rep.within_subj_cross_stim > 2.0);
        // Single subject: no cross-subject pairs to compare.
        let solo = disentanglement_report(&items[..2], &[0, 0], &[0, 1]);
        assert!(matches!(solo, Err(CoreError::InsufficientData(_))));
    }

    #[test]
    fn metrics_report_serializes_both_ways() {
        let rep = MetricsReport {
            pixcorr: 0.5,
            two_way: 0.9,
            top1: 0.25,
            within_stim_cross_subj_dist: 1.0,
            within_subj_cross_stim_dist: 2.0,
            per_dataset: vec![DatasetMetrics { dataset: 0, pixcorr: 0.5, two_way: 0.9, top1: 0.25 }],
        };
        let json = rep.to_json();
        assert!(json.contains("\"two_way\": 0.9"));
        let csv = rep.to_csv();
        assert!(csv.starts_with("dataset,pixcorr,two_way,top1\n0,"));
        assert!(csv.trim_end().ends_with("all,0.500000,0.900000,0.250000"));
    }

    #[test]
    fn nn_accuracy_detects_clusters() {
        // Two tight clusters along different axes.
        let items = vec![
            Tensor::from_vec(1, 2, vec![1.0, 0.05]),
            Tensor::from_vec(1, 2, vec![1.0, -0.05]),
            Tensor::from_vec(1, 2, vec![0.05, 1.0]),
            Tensor::from_vec(1, 2, vec![-0.05, 1.0]),
        ];
        let labels = vec![0, 0, 1, 1];
        assert!((nn_label_accuracy(&items, &labels) - 1.0).abs() < 1e-12);
        let anti = vec![1, 0, 1, 0];
        assert!(nn_label_accuracy(&items, &anti) < 0.5 + 1e-12);
    }
}
