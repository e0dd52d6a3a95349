//! End-to-end pipeline smoke test on a miniature world: both stages train,
//! the decoder scores the held-out subject, the metrics report is complete,
//! and the whole path is deterministic and execution-mode invariant.

use corticode_core::config::RunConfig;
use corticode_core::experiments::{self, Ablation};
use corticode_core::synthworld::World;
use corticode_core::univae::{train_univae, UniVae};

fn tiny_cfg(exec: &str) -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("world.n_subjects", "4"),
        ("world.n_stimuli", "12"),
        ("world.target_rows", "2"),
        ("world.target_cols", "12"),
        ("surface.grid", "16"),
        ("training.train_stimuli", "8"),
        ("training.ae_steps", "60"),
        ("training.ae_batch", "2"),
        ("training.lfcm_steps", "40"),
        ("training.warmup_steps", "5"),
        ("univae.width", "24"),
        ("univae.enc_blocks", "1"),
        ("univae.dec_blocks", "1"),
        ("univae.heads", "2"),
        ("lfcm.d_c", "12"),
        ("lfcm.content_tokens", "2"),
        ("lfcm.blocks", "1"),
        ("lfcm.heads", "2"),
        ("eval.trials", "2"),
        ("training.exec", exec),
    ] {
        cfg.apply_override(k, v).unwrap();
    }
    cfg.validate().unwrap();
    cfg
}

fn run_pipeline(cfg: &RunConfig) -> (experiments::EvalOutcome, corticode_core::evalkit::MetricsReport) {
    let world = World::generate(cfg.world_config()).unwrap();
    let mut ae = UniVae::init(cfg.univae.clone(), &world.surface).unwrap();
    train_univae(&mut ae, &world, &cfg.ae_train_config().unwrap()).unwrap();
    let seen: Vec<usize> = (0..cfg.seen_subjects()).collect();
    let models =
        experiments::train_variant(cfg, &world, &ae, &seen, Ablation::None, cfg.training.seed)
            .unwrap();
    let outcome = experiments::eval_unseen(cfg, &world, &ae, &models).unwrap();
    let unseen: Vec<usize> = (cfg.seen_subjects()..world.n_subjects()).collect();
    let report =
        experiments::metrics_report(cfg, &world, &ae, &models, &unseen, &seen).unwrap();
    (outcome, report)
}

#[test]
fn pipeline_trains_scores_and_reproduces() {
    let cfg = tiny_cfg("sequential");
    let (outcome, report) = run_pipeline(&cfg);

    assert!(outcome.two_way.is_finite() && (0.0..=1.0).contains(&outcome.two_way));
    assert!((0.0..=1.0).contains(&outcome.top1));
    assert_eq!(report.per_dataset.len(), 2);
    assert!((-1.0..=1.0).contains(&report.pixcorr));
    assert!(report.within_stim_cross_subj_dist > 0.0);
    assert!(report.within_subj_cross_stim_dist > 0.0);
    // Pooled retrieval agrees with the summary fields to rounding.
    assert!((0.0..=1.0).contains(&report.two_way));

    // Bitwise reproducibility of the whole train+eval path.
    let (outcome2, report2) = run_pipeline(&cfg);
    assert_eq!(outcome.two_way, outcome2.two_way);
    assert_eq!(outcome.top1, outcome2.top1);
    assert_eq!(report.to_json(), report2.to_json());
}

#[test]
fn pipeline_is_execution_mode_invariant() {
    let (seq, seq_report) = run_pipeline(&tiny_cfg("sequential"));
    let (par, par_report) = run_pipeline(&tiny_cfg("parallel"));
    assert_eq!(seq.two_way, par.two_way);
    assert_eq!(seq.top1, par.top1);
    assert_eq!(seq_report.to_json(), par_report.to_json());
}
