//! `corticode`: generate synthetic cortical worlds, train both model stages,
//! decode held-out subjects, and reproduce the evaluation tables.
//!
//! Every command re-reads the run configuration (TOML plus `--set` dotted
//! overrides), writes the resolved document next to its outputs, and reuses
//! artifacts from earlier commands in the same output directory. Checkpoints
//! carry config fingerprints so a factorizer is never silently paired with an
//! autoencoder it was not trained against.
//!
//! Exit codes, by error family:
//!
//! -  1 a check ran and failed (grad-check)
//! -  2 invalid configuration or flag value
//! -  3 index out of range
//! -  4 shape mismatch
//! -  5 divergence during training
//! -  6 checkpoint fingerprint mismatch
//! -  7 invalid pair policy
//! -  8 no training pair available
//! -  9 missing rescale statistics
//! - 10 degenerate metric input
//! - 11 insufficient data for a statistic
//! - 12 non-finite gradient
//! - 13 unknown ablation name
//! - 14 filesystem or serialization failure

use clap::{Parser, Subcommand};
use corticode_core::config::RunConfig;
use corticode_core::container::config_fingerprint;
use corticode_core::error::{CoreError, Result};
use corticode_core::evalkit;
use corticode_core::experiments::{self, Ablation, VariantModels};
use corticode_core::inference::{Decoder, InferenceSettings, TargetBank};
use corticode_core::lfcm::Lfcm;
use corticode_core::synthworld::World;
use corticode_core::training::{write_lfcm_log, RescaleStats};
use corticode_core::univae::{train_univae, write_step_log, UniVae};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "corticode", version, about = "Compositional latent decoding on synthetic cortical worlds")]
struct Cli {
    /// Run configuration TOML; defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Dotted-key override, e.g. `--set training.lfcm_steps=200`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Output directory for artifacts. Falls back to $CORTICODE_OUT, then `runs`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Force sequential execution regardless of the configured mode.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the world checkpoint and write the split manifest.
    GenWorld,
    /// Stage I: train the universal autoencoder on seen subjects.
    TrainAe,
    /// Stage II: train the factorizer against the saved autoencoder.
    TrainLfcm {
        /// Training-time ablation (`none`, `no_swap`, `no_refcr`, ...).
        #[arg(long, default_value = "none")]
        ablation: String,
    },
    /// Decode surface maps to content codes; writes per-sample rows.
    Decode {
        /// Comma-separated world subject ids; defaults to the held-out ones.
        #[arg(long)]
        subjects: Option<String>,
        /// Decode under the default embedding only.
        #[arg(long)]
        no_sweep: bool,
        /// Skip per-code rescaling.
        #[arg(long)]
        no_rescale: bool,
    },
    /// Score decoding quality; writes the metrics report as JSON and CSV.
    Eval {
        /// Comma-separated world subject ids; defaults to the held-out ones.
        #[arg(long)]
        subjects: Option<String>,
    },
    /// Train and score the full model plus each named ablation.
    Ablate {
        /// Comma-separated ablation names; defaults to the headline set.
        #[arg(long)]
        ablations: Option<String>,
        /// Independent seeds to average over.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// Sweep the number of training subjects and score held-out decoding.
    SubjectScale {
        #[arg(long, default_value = "2,4,6,10")]
        counts: String,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Finite-difference audit of every loss gradient.
    GradCheck {
        #[arg(long, default_value_t = 1234)]
        seed: u64,
    },
}

fn exit_code(e: &CoreError) -> u8 {
    match e {
        CoreError::InvalidConfig(_) => 2,
        CoreError::IndexOutOfRange(_) => 3,
        CoreError::ShapeMismatch(_) => 4,
        CoreError::DivergenceDetected { .. } => 5,
        CoreError::FingerprintMismatch { .. } => 6,
        CoreError::InvalidPolicy(_) => 7,
        CoreError::NoPairAvailable(_) => 8,
        CoreError::MissingStats(_) => 9,
        CoreError::DegenerateInput(_) => 10,
        CoreError::InsufficientData(_) => 11,
        CoreError::NonFiniteGradient(_) => 12,
        CoreError::UnknownAblation(_) => 13,
        CoreError::Io(_) => 14,
    }
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Snapshot the resolved config next to the command's outputs.
    fn snapshot(&self, command: &str) -> Result<()> {
        self.cfg.save(&self.path(&format!("config.{command}.toml")))
    }
}

fn load_ctx(cli: &Cli) -> Result<Ctx> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            CoreError::InvalidConfig(format!("--set expects KEY=VALUE, got `{kv}`"))
        })?;
        cfg.apply_override(k.trim(), v.trim())?;
    }
    if cli.deterministic {
        cfg.training.exec = "sequential".into();
    }
    cfg.validate()?;
    let out = cli
        .out
        .clone()
        .or_else(|| std::env::var_os("CORTICODE_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    std::fs::create_dir_all(&out)?;
    Ok(Ctx { cfg, out })
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| CoreError::InvalidConfig(format!("bad list entry `{t}`")))
        })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Load the world checkpoint if present, generating and saving it otherwise.
/// A checkpoint built under a different world config is rejected rather than
/// silently regenerated.
fn ensure_world(ctx: &Ctx) -> Result<World> {
    let path = ctx.path("world.ntc");
    let want = ctx.cfg.world_config();
    if path.exists() {
        let w = World::load_from(&path)?;
        if w.cfg != want {
            return Err(CoreError::FingerprintMismatch {
                expected: config_fingerprint(&want),
                found: config_fingerprint(&w.cfg),
            });
        }
        return Ok(w);
    }
    let w = World::generate(want)?;
    w.save_to(&path)?;
    Ok(w)
}

fn load_ae(ctx: &Ctx, world: &World) -> Result<UniVae> {
    UniVae::load_from(&ctx.path("ae.ntc"), &world.surface)
}

/// Load factorizer and rescale stats, verifying the fingerprint chain:
/// the factorizer must reference this autoencoder's config, the stats must
/// reference this factorizer's config.
fn load_lfcm_chain(ctx: &Ctx, ae: &UniVae) -> Result<(Lfcm, RescaleStats)> {
    let lfcm_path = ctx.path("lfcm.ntc");
    let lfcm = Lfcm::load_from(&lfcm_path)?;
    let want_ae = config_fingerprint(&ae.cfg);
    if let Some(found) = Lfcm::load_meta_ae_fp(&lfcm_path)? {
        if found != want_ae {
            return Err(CoreError::FingerprintMismatch { expected: want_ae, found });
        }
    }
    let stats_path = ctx.path("rescale.ntc");
    let stats = RescaleStats::load_from(&stats_path)?;
    let want_lfcm = config_fingerprint(&lfcm.cfg);
    if let Some(found) = RescaleStats::load_meta_lfcm_fp(&stats_path)? {
        if found != want_lfcm {
            return Err(CoreError::FingerprintMismatch { expected: want_lfcm, found });
        }
    }
    Ok((lfcm, stats))
}

/// Held-out subjects by the config's split.
fn default_eval_subjects(ctx: &Ctx, world: &World) -> Vec<usize> {
    (ctx.cfg.seen_subjects()..world.n_subjects()).collect()
}

fn resolve_subjects(ctx: &Ctx, world: &World, arg: &Option<String>) -> Result<Vec<usize>> {
    let subjects = match arg {
        Some(s) => parse_usize_list(s)?,
        None => default_eval_subjects(ctx, world),
    };
    if subjects.is_empty() {
        return Err(CoreError::InsufficientData("no subjects to evaluate".into()));
    }
    for &s in &subjects {
        if s >= world.n_subjects() {
            return Err(CoreError::IndexOutOfRange(format!(
                "subject {s} outside 0..{}",
                world.n_subjects()
            )));
        }
    }
    Ok(subjects)
}

#[derive(Serialize)]
struct StimulusRange {
    start: usize,
    end: usize,
}

#[derive(Serialize)]
struct Manifest {
    world_fingerprint: String,
    n_subjects: usize,
    n_datasets: usize,
    n_stimuli: usize,
    seen_subjects: Vec<usize>,
    unseen_subjects: Vec<usize>,
    train_stimuli: StimulusRange,
    test_stimuli: StimulusRange,
}

fn cmd_gen_world(ctx: &Ctx) -> Result<()> {
    ctx.snapshot("gen-world")?;
    let world = ensure_world(ctx)?;
    let seen = ctx.cfg.seen_subjects();
    let manifest = Manifest {
        world_fingerprint: config_fingerprint(&world.cfg),
        n_subjects: world.n_subjects(),
        n_datasets: world.n_datasets(),
        n_stimuli: world.n_stimuli(),
        seen_subjects: (0..seen).collect(),
        unseen_subjects: (seen..world.n_subjects()).collect(),
        train_stimuli: StimulusRange { start: 0, end: ctx.cfg.training.train_stimuli },
        test_stimuli: StimulusRange {
            start: ctx.cfg.training.train_stimuli,
            end: world.n_stimuli(),
        },
    };
    write_json(&ctx.path("manifest.json"), &manifest)?;
    println!(
        "world ready: {} subjects ({} seen), {} stimuli, {} datasets",
        world.n_subjects(),
        seen,
        world.n_stimuli(),
        world.n_datasets()
    );
    Ok(())
}

fn cmd_train_ae(ctx: &Ctx) -> Result<()> {
    ctx.snapshot("train-ae")?;
    let world = ensure_world(ctx)?;
    let mut ae = UniVae::init(ctx.cfg.univae.clone(), &world.surface)?;
    let tc = ctx.cfg.ae_train_config()?;
    let log = train_univae(&mut ae, &world, &tc)?;
    ae.save_to(&ctx.path("ae.ntc"), &config_fingerprint(&world.cfg))?;
    write_step_log(&ctx.path("ae_log.csv"), &log)?;
    let last = log.last().map(|l| l.loss).unwrap_or(f64::NAN);
    println!("autoencoder trained: {} steps, final loss {last:.6}", log.len());
    Ok(())
}

fn cmd_train_lfcm(ctx: &Ctx, ablation: &str) -> Result<()> {
    ctx.snapshot("train-lfcm")?;
    let ab: Ablation = ablation.parse()?;
    if ab != Ablation::None && ab.is_eval_only() {
        return Err(CoreError::InvalidConfig(format!(
            "`{ab}` only changes inference; train the full model and pass the flag to `decode`"
        )));
    }
    if ab == Ablation::NoUnivae {
        return Err(CoreError::InvalidConfig(
            "the untrained-encoder ablation is not persistable; use `ablate`".into(),
        ));
    }
    let world = ensure_world(ctx)?;
    let ae = load_ae(ctx, &world)?;
    let subjects: Vec<usize> = (0..ctx.cfg.seen_subjects()).collect();
    let models =
        experiments::train_variant(&ctx.cfg, &world, &ae, &subjects, ab, ctx.cfg.training.seed)?;
    let ae_fp = config_fingerprint(&ae.cfg);
    models.lfcm.save_to(&ctx.path("lfcm.ntc"), &ae_fp)?;
    models.stats.save_to(&ctx.path("rescale.ntc"), &config_fingerprint(&models.lfcm.cfg))?;
    write_lfcm_log(&ctx.path("lfcm_log.csv"), &models.log)?;
    let last = models.log.last().map(|l| l.loss).unwrap_or(f64::NAN);
    println!(
        "factorizer trained ({}): {} steps, final loss {last:.6}",
        ab,
        models.log.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct DecodeRow {
    stimulus: usize,
    subject: usize,
    dataset: usize,
    trial: u64,
    predicted: usize,
    correct: bool,
    score_true: f64,
    score_predicted: f64,
}

#[derive(Serialize)]
struct DecodeSummary {
    subjects: Vec<usize>,
    dataset: usize,
    trials: usize,
    sweep: bool,
    rescale: bool,
    two_way: f64,
    top1: f64,
}

#[derive(Serialize)]
struct DecodeOutput {
    summary: DecodeSummary,
    samples: Vec<DecodeRow>,
}

fn cmd_decode(ctx: &Ctx, subjects: &Option<String>, no_sweep: bool, no_rescale: bool) -> Result<()> {
    ctx.snapshot("decode")?;
    let world = ensure_world(ctx)?;
    let ae = load_ae(ctx, &world)?;
    let (lfcm, stats) = load_lfcm_chain(ctx, &ae)?;
    let subjects = resolve_subjects(ctx, &world, subjects)?;
    let settings = InferenceSettings {
        sweep: ctx.cfg.inference.sweep && !no_sweep,
        rescale: ctx.cfg.inference.rescale && !no_rescale,
    };
    let dec = Decoder::new(&ae, &lfcm, Some(&stats), settings)?;
    let bank = TargetBank::from_world(&world);
    let trained_on: Vec<usize> = (0..ctx.cfg.seen_subjects()).collect();
    let ds = ctx.cfg.eval.dataset;

    let mut cells = Vec::new();
    let mut truth = Vec::new();
    for &s in &subjects {
        for stim in ctx.cfg.training.train_stimuli..world.n_stimuli() {
            for trial in 0..ctx.cfg.eval.trials as u64 {
                cells.push((stim, s, ds, trial));
                truth.push(stim);
            }
        }
    }
    if cells.is_empty() {
        return Err(CoreError::InsufficientData("no samples to decode".into()));
    }
    let codes = dec.codes_for_cells(
        &world,
        &cells,
        |s| experiments::identity_against(&trained_on, s),
        ctx.cfg.exec_mode()?,
    );

    let mut samples = Vec::with_capacity(cells.len());
    for (i, &(stim, s, d, trial)) in cells.iter().enumerate() {
        let scores = bank.scores(&codes[i]);
        let predicted = bank.top1(&codes[i]);
        samples.push(DecodeRow {
            stimulus: stim,
            subject: s,
            dataset: d,
            trial,
            predicted,
            correct: predicted == stim,
            score_true: scores[stim],
            score_predicted: scores[predicted],
        });
    }
    let summary = DecodeSummary {
        subjects,
        dataset: ds,
        trials: ctx.cfg.eval.trials,
        sweep: settings.sweep,
        rescale: settings.rescale,
        two_way: evalkit::two_way_exhaustive(&codes, &bank, &truth),
        top1: evalkit::top1_accuracy(&codes, &bank, &truth),
    };
    println!(
        "decoded {} samples: two_way {:.4}, top1 {:.4}",
        samples.len(),
        summary.two_way,
        summary.top1
    );
    write_json(&ctx.path("decode.json"), &DecodeOutput { summary, samples })?;
    Ok(())
}

fn cmd_eval(ctx: &Ctx, subjects: &Option<String>) -> Result<()> {
    ctx.snapshot("eval")?;
    let world = ensure_world(ctx)?;
    let ae = load_ae(ctx, &world)?;
    let (lfcm, stats) = load_lfcm_chain(ctx, &ae)?;
    let subjects = resolve_subjects(ctx, &world, subjects)?;
    let trained_on: Vec<usize> = (0..ctx.cfg.seen_subjects()).collect();
    let models = VariantModels {
        ablation: Ablation::None,
        lfcm,
        stats,
        ae_override: None,
        log: Vec::new(),
    };
    let report = experiments::metrics_report(&ctx.cfg, &world, &ae, &models, &subjects, &trained_on)?;
    std::fs::write(ctx.path("eval.csv"), report.to_csv())?;
    std::fs::write(ctx.path("eval.json"), report.to_json() + "\n")?;
    println!(
        "eval over {} subjects: pixcorr {:.4}, two_way {:.4}, top1 {:.4}",
        subjects.len(),
        report.pixcorr,
        report.two_way,
        report.top1
    );
    println!(
        "code distances: within-stim/cross-subj {:.4}, within-subj/cross-stim {:.4}",
        report.within_stim_cross_subj_dist, report.within_subj_cross_stim_dist
    );
    Ok(())
}

const DEFAULT_ABLATIONS: &str = "no_swap,no_refcr,no_nuisance,no_rescale,no_sweep";

fn cmd_ablate(ctx: &Ctx, ablations: &Option<String>, repeats: usize) -> Result<()> {
    ctx.snapshot("ablate")?;
    if repeats == 0 {
        return Err(CoreError::InvalidConfig("ablate needs at least one repeat".into()));
    }
    let names = ablations.as_deref().unwrap_or(DEFAULT_ABLATIONS);
    let list: Vec<Ablation> = names
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    let world = ensure_world(ctx)?;
    let ae = load_ae(ctx, &world)?;
    let seeds: Vec<u64> = (0..repeats as u64)
        .map(|i| corticode_core::seeding::derive_seed(&[ctx.cfg.training.seed, i], "ablate"))
        .collect();
    let rows = experiments::ablation_table(&ctx.cfg, &world, &ae, &list, &seeds)?;

    let mut csv = String::from("ablation,two_way,top1,delta_two_way\n");
    println!("{:<14} {:>9} {:>9} {:>9}", "ablation", "two_way", "top1", "delta");
    for row in &rows {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            row.ablation, row.two_way, row.top1, row.delta_two_way
        ));
        println!(
            "{:<14} {:>9.4} {:>9.4} {:>+9.4}",
            row.ablation.name(),
            row.two_way,
            row.top1,
            row.delta_two_way
        );
    }
    std::fs::write(ctx.path("ablate.csv"), csv)?;
    write_json(&ctx.path("ablate.json"), &rows)?;
    Ok(())
}

fn cmd_subject_scale(ctx: &Ctx, counts: &str, repeats: usize) -> Result<()> {
    ctx.snapshot("subject-scale")?;
    let counts = parse_usize_list(counts)?;
    let world = ensure_world(ctx)?;
    let ae = load_ae(ctx, &world)?;
    let rows = experiments::subject_scale_table(&ctx.cfg, &world, &ae, &counts, repeats)?;

    let mut csv = String::from("count,mean_two_way,std_two_way,mean_top1\n");
    println!("{:>6} {:>12} {:>11} {:>9}", "count", "mean_two_way", "std_two_way", "top1");
    for row in &rows {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            row.count, row.mean_two_way, row.std_two_way, row.mean_top1
        ));
        println!(
            "{:>6} {:>12.4} {:>11.4} {:>9.4}",
            row.count, row.mean_two_way, row.std_two_way, row.mean_top1
        );
    }
    std::fs::write(ctx.path("subject_scale.csv"), csv)?;
    write_json(&ctx.path("subject_scale.json"), &rows)?;
    Ok(())
}

fn cmd_grad_check(ctx: &Ctx, seed: u64) -> Result<ExitCode> {
    ctx.snapshot("grad-check")?;
    let report = evalkit::run_gradient_suite(seed);
    println!("{:<18} {:>12} {:>8}  status", "check", "max_rel_err", "params");
    for c in &report.checks {
        let ok = c.max_rel_err < report.tol;
        println!(
            "{:<18} {:>12.3e} {:>8}  {}",
            c.name,
            c.max_rel_err,
            c.n_params,
            if ok { "ok" } else { "FAIL" }
        );
    }
    println!(
        "corruption probe: {}",
        if report.corruption_detected { "detected" } else { "MISSED" }
    );
    let value = serde_json::json!({
        "tol": report.tol,
        "corruption_detected": report.corruption_detected,
        "passed": report.passed(),
        "checks": report.checks.iter().map(|c| serde_json::json!({
            "name": c.name,
            "max_rel_err": c.max_rel_err,
            "n_params": c.n_params,
        })).collect::<Vec<_>>(),
    });
    write_json(&ctx.path("grad_check.json"), &value)?;
    if report.passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient suite failed");
        Ok(ExitCode::FAILURE)
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let ctx = load_ctx(cli)?;
    match &cli.cmd {
        Cmd::GenWorld => cmd_gen_world(&ctx)?,
        Cmd::TrainAe => cmd_train_ae(&ctx)?,
        Cmd::TrainLfcm { ablation } => cmd_train_lfcm(&ctx, ablation)?,
        Cmd::Decode { subjects, no_sweep, no_rescale } => {
            cmd_decode(&ctx, subjects, *no_sweep, *no_rescale)?
        }
        Cmd::Eval { subjects } => cmd_eval(&ctx, subjects)?,
        Cmd::Ablate { ablations, repeats } => cmd_ablate(&ctx, ablations, *repeats)?,
        Cmd::SubjectScale { counts, repeats } => cmd_subject_scale(&ctx, counts, *repeats)?,
        Cmd::GradCheck { seed } => return cmd_grad_check(&ctx, *seed),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
