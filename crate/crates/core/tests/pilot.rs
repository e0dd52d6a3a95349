// Scratch calibration harness. Run explicitly:
//   cargo test -p corticode-core --test pilot -- --ignored --nocapture

use corticode_core::config::RunConfig;
use corticode_core::evalkit;
use corticode_core::exec::ExecMode;
use corticode_core::inference::{DecodeIdentity, Decoder, InferenceSettings, TargetBank};
use corticode_core::lfcm::Lfcm;
use corticode_core::synthworld::World;
use corticode_core::training::{build_latent_cache, compute_rescale_stats, train_lfcm};
use corticode_core::univae::{train_univae, UniVae};
use std::time::Instant;

#[test]
#[ignore]
fn pilot() {
    let mut cfg = RunConfig::default();
    for (k, v) in std::env::vars() {
        if let Some(key) = k.strip_prefix("PILOT_") {
            if key == "AE_CACHE" || key == "LFCM_SUBJECTS" || key == "ABLATION" {
                continue;
            }
            let key = key.to_lowercase().replace("__", ".");
            cfg.apply_override(&key, &v).unwrap();
            println!("override {key} = {v}");
        }
    }
    let mode = ExecMode::Parallel;
    let t0 = Instant::now();
    let world = World::generate(cfg.world_config()).unwrap();
    println!(
        "world: {} active px, {} tokens, signal std {:.4}, noise sigma {:.4} [{:?}]",
        world.surface.active_count(),
        world.surface.n_tokens(),
        world.signal_std(),
        world.noise_sigma(),
        t0.elapsed()
    );

    let t0 = Instant::now();
    let cache_path = std::env::var("PILOT_AE_CACHE").ok().map(std::path::PathBuf::from);
    let ae = match &cache_path {
        Some(p) if p.exists() => {
            let ae = UniVae::load_from(p, &world.surface).unwrap();
            println!("ae loaded from {} [{:?}]", p.display(), t0.elapsed());
            ae
        }
        _ => {
            let mut ae = UniVae::init(cfg.univae.clone(), &world.surface).unwrap();
            println!("ae params: {}", ae.store.n_scalars());
            let log = train_univae(&mut ae, &world, &cfg.ae_train_config().unwrap()).unwrap();
            println!(
                "ae train: {:?}, loss {:.5} -> {:.5}",
                t0.elapsed(),
                log.first().unwrap().loss,
                log.last().unwrap().loss
            );
            if let Some(p) = &cache_path {
                ae.save_to(p, "pilot").unwrap();
                println!("ae saved to {}", p.display());
            }
            ae
        }
    };

    let pool = cfg.seen_subjects();
    let n_seen = std::env::var("PILOT_LFCM_SUBJECTS")
        .ok()
        .map(|v| v.parse::<usize>().unwrap())
        .unwrap_or(pool);
    let ablation = match std::env::var("PILOT_ABLATION").as_deref() {
        Ok("no_swap") => corticode_core::training::TrainAblation { no_swap: true, ..Default::default() },
        Ok("no_refcr") => corticode_core::training::TrainAblation { no_refcr: true, ..Default::default() },
        Ok("no_nuisance") => corticode_core::training::TrainAblation { no_nuisance: true, ..Default::default() },
        _ => Default::default(),
    };
    let train_stimuli = cfg.training.train_stimuli;
    let test_stims: Vec<usize> = (train_stimuli..cfg.world.n_stimuli).collect();
    let t0 = Instant::now();
    let pool_subjects: Vec<usize> = (0..pool).collect();
    let r2_test = evalkit::ae_eval_r2(&world, &ae, &test_stims, &pool_subjects, &[0], mode).unwrap();
    let train_probe: Vec<usize> = (0..test_stims.len().min(train_stimuli)).collect();
    let r2_train = evalkit::ae_eval_r2(&world, &ae, &train_probe, &pool_subjects, &[0], mode).unwrap();
    println!("ae held-out r2: {:.4} (train-stim r2 {:.4}) [{:?}]", r2_test, r2_train, t0.elapsed());

    let t0 = Instant::now();
    let cache = build_latent_cache(&world, &ae, train_stimuli, &(0..n_seen).collect::<Vec<_>>(), mode).unwrap();
    println!("latent cache: {} cells [{:?}]", cache.len(), t0.elapsed());

    let (lr, lc) = ae.latent_shape();
    let mut lfcm = Lfcm::init(cfg.lfcm.clone(), lr, lc, n_seen, cfg.world.n_datasets).unwrap();
    println!("lfcm params: {}", lfcm.store.n_scalars());
    let t0 = Instant::now();
    let log = train_lfcm(
        &mut lfcm,
        &ae,
        &world,
        &cache,
        train_stimuli,
        n_seen,
        &cfg.lfcm_train_config(ablation).unwrap(),
    )
    .unwrap();
    let tail = &log[log.len().saturating_sub(5)..];
    println!(
        "lfcm train: {:?}, loss {:.4} -> {:.4} (align {:.4} rec {:.4} refcr {:.4})",
        t0.elapsed(),
        log.first().unwrap().loss,
        tail.iter().map(|s| s.loss).sum::<f64>() / tail.len() as f64,
        tail.iter().map(|s| s.align).sum::<f64>() / tail.len() as f64,
        tail.iter().map(|s| s.rec).sum::<f64>() / tail.len() as f64,
        tail.iter().map(|s| s.refcr).sum::<f64>() / tail.len() as f64,
    );

    let stats = compute_rescale_stats(&lfcm, &cache, mode).unwrap();
    let bank = TargetBank::from_world(&world);
    let unseen = cfg.world.n_subjects - 1;
    let trial_base = 1_000_000u64;

    let dec = Decoder::new(&ae, &lfcm, Some(&stats), InferenceSettings { sweep: true, rescale: true }).unwrap();
    let t0 = Instant::now();

    // Unseen subject on held-out stimuli.
    let cells: Vec<(usize, usize, usize, u64)> =
        test_stims.iter().map(|&k| (k, unseen, 0, trial_base + k as u64)).collect();
    let codes = dec.codes_for_cells(&world, &cells, |_| DecodeIdentity::Unknown, mode);
    let two_way = evalkit::two_way_exhaustive(&codes, &bank, &test_stims);
    let top1 = evalkit::top1_accuracy(&codes, &bank, &test_stims);
    println!("unseen: two-way {:.4}, top1 {:.4} [{:?}]", two_way, top1, t0.elapsed());

    for (name, sweep, rescale) in [("no_sweep", false, true), ("no_rescale", true, false)] {
        let d = Decoder::new(&ae, &lfcm, Some(&stats), InferenceSettings { sweep, rescale }).unwrap();
        let codes = d.codes_for_cells(&world, &cells, |_| DecodeIdentity::Unknown, mode);
        let tw = evalkit::two_way_exhaustive(&codes, &bank, &test_stims);
        println!("unseen[{name}]: two-way {:.4}", tw);
    }

    // Seen subjects, same stimuli.
    let mut accs = Vec::new();
    for s in 0..n_seen {
        let cells: Vec<(usize, usize, usize, u64)> =
            test_stims.iter().map(|&k| (k, s, 0, trial_base + 7000 + k as u64)).collect();
        let codes = dec.codes_for_cells(&world, &cells, move |_| DecodeIdentity::Known(s), mode);
        accs.push(evalkit::two_way_exhaustive(&codes, &bank, &test_stims));
    }
    let seen_mean = accs.iter().sum::<f64>() / accs.len() as f64;
    println!("seen mean two-way {:.4} (per-subject {:?})", seen_mean, accs.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>());

    // Disentanglement panel: raw vs content space.
    let mut raw = Vec::new();
    let mut code_items = Vec::new();
    let mut subj_labels = Vec::new();
    let mut stim_labels = Vec::new();
    let active = world.surface.active_indices();
    for &k in test_stims.iter().take(12) {
        for s in 0..n_seen {
            let grid = world.render(k, s, 0, trial_base + 9000 + (k * 100 + s) as u64);
            let vals: Vec<f64> = active.iter().map(|&i| grid.data()[i]).collect();
            raw.push(corticode_core::Tensor::from_vec(1, vals.len(), vals));
            let tokens = world.surface.patchify(&grid);
            code_items.push(dec.code_for_tokens(&tokens, DecodeIdentity::Known(s), 0));
            subj_labels.push(s);
            stim_labels.push(k);
        }
    }
    let raw_cl = evalkit::panel_clustering(&raw, &subj_labels, &stim_labels);
    let code_cl = evalkit::panel_clustering(&code_items, &subj_labels, &stim_labels);
    println!(
        "raw space: subject-nn {:.3} stimulus-nn {:.3} | code space: subject-nn {:.3} stimulus-nn {:.3}",
        raw_cl.subject_acc, raw_cl.stimulus_acc, code_cl.subject_acc, code_cl.stimulus_acc
    );

    let (raw_ws, raw_wt) = mean_panel_distances(&raw, &subj_labels, &stim_labels);
    let (code_ws, code_wt) = mean_panel_distances(&code_items, &subj_labels, &stim_labels);
    println!(
        "raw dist: within-stim cross-subj {:.4} vs within-subj cross-stim {:.4} (ratio {:.3})",
        raw_ws,
        raw_wt,
        raw_ws / raw_wt
    );
    println!(
        "code dist: within-stim cross-subj {:.4} vs within-subj cross-stim {:.4} (ratio {:.3})",
        code_ws,
        code_wt,
        code_ws / code_wt
    );
}

/// (mean within-stimulus cross-subject distance, mean within-subject cross-stimulus distance)
fn mean_panel_distances(items: &[corticode_core::Tensor], subjects: &[usize], stimuli: &[usize]) -> (f64, f64) {
    let dist = |a: &corticode_core::Tensor, b: &corticode_core::Tensor| -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let mut ws = (0.0, 0usize);
    let mut wt = (0.0, 0usize);
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            if stimuli[i] == stimuli[j] && subjects[i] != subjects[j] {
                ws.0 += dist(&items[i], &items[j]);
                ws.1 += 1;
            } else if subjects[i] == subjects[j] && stimuli[i] != stimuli[j] {
                wt.0 += dist(&items[i], &items[j]);
                wt.1 += 1;
            }
        }
    }
    (ws.0 / ws.1 as f64, wt.0 / wt.1 as f64)
}
