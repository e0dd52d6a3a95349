//! Synthetic response world.
//!
//! Each stimulus is a latent vector `t`. A subject observes it through a
//! subject-specific mixing matrix plus a subject bias; a dataset applies a
//! gain and an additive offset pattern; the result is embedded on the surface
//! grid, spatially smoothed, masked, and optionally corrupted with seeded
//! per-trial measurement noise:
//!
//! ```text
//! response = mask(smooth(embed(gain_d * (W_s t + b_s) + o_d))) + mask(noise)
//! ```
//!
//! Subject mixers share a common base (`W_s` orthonormalizes `W_base + a E_s`),
//! so an unseen subject is a perturbation of structure the models have seen,
//! not an arbitrary new code. The bias term makes subject identity, not
//! stimulus content, the dominant axis of raw-space geometry.
//!
//! The paired target for decoding is a fixed isometric embedding of `t` into
//! a `target_rows x target_cols` matrix, so target-space inner products equal
//! stimulus-space inner products.

use crate::container::{config_fingerprint, Container};
use crate::error::{CoreError, Result};
use crate::exec::{self, ExecMode};
use crate::seeding;
use crate::surface::SurfaceMap;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_subjects: usize,
    pub n_datasets: usize,
    pub n_stimuli: usize,
    /// Latent stimulus dimensionality.
    pub d_true: usize,
    pub grid: usize,
    pub patch: usize,
    pub keep_threshold: f64,
    /// Scale of the per-subject mixer perturbation. Zero makes every subject
    /// share one mixer.
    pub subject_variability: f64,
    /// Norm scale of the per-subject additive bias.
    pub bias_scale: f64,
    pub dataset_gain_std: f64,
    pub dataset_offset_std: f64,
    /// Measurement noise level. Interpreted as a fraction of the clean
    /// signal's per-pixel std when `noise_relative` is set, else as an
    /// absolute std.
    pub noise_std: f64,
    pub noise_relative: bool,
    pub smooth: bool,
    /// Shape of the paired decoding target.
    pub target_rows: usize,
    pub target_cols: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 17,
            n_subjects: 10,
            n_datasets: 2,
            n_stimuli: 200,
            d_true: 10,
            grid: 32,
            patch: 4,
            keep_threshold: 0.5,
            subject_variability: 0.4,
            bias_scale: 4.0,
            dataset_gain_std: 0.15,
            dataset_offset_std: 0.2,
            noise_std: 0.25,
            noise_relative: true,
            smooth: true,
            target_rows: 4,
            target_cols: 64,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.n_datasets == 0 || self.n_stimuli == 0 {
            return Err(CoreError::InvalidConfig("world needs subjects, datasets, stimuli".into()));
        }
        if self.d_true == 0 {
            return Err(CoreError::InvalidConfig("d_true must be positive".into()));
        }
        if self.target_rows * self.target_cols < self.d_true {
            return Err(CoreError::InvalidConfig(format!(
                "target {}x{} cannot hold a {}-dim isometric embedding",
                self.target_rows, self.target_cols, self.d_true
            )));
        }
        if self.noise_std < 0.0 {
            return Err(CoreError::InvalidConfig("noise_std must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub cfg: WorldConfig,
    pub surface: SurfaceMap,
    /// `n_stimuli x d_true`, rows iid standard normal.
    stimuli: Tensor,
    /// Per subject: `P x d_true` mixer over active pixels, columns orthonormal.
    mixers: Vec<Tensor>,
    /// Per subject: bias over active pixels, `1 x P`.
    biases: Vec<Tensor>,
    /// Per dataset gain scalar.
    gains: Vec<f64>,
    /// Per dataset offset over active pixels, `1 x P`.
    offsets: Vec<Tensor>,
    /// `(target_rows*target_cols) x d_true`, orthonormal columns.
    target_proj: Tensor,
    /// Global factor bringing the pooled clean per-pixel std to ~1, so the
    /// response scale is insensitive to the structural knobs.
    response_scale: f64,
    /// Monte-Carlo estimate of the clean signal's per-pixel std.
    sigma_signal: f64,
}

/// Orthonormalize columns in place (modified Gram-Schmidt, two passes).
fn orthonormalize_columns(m: &mut Tensor) {
    let (rows, cols) = m.shape();
    for _ in 0..2 {
        for j in 0..cols {
            for k in 0..j {
                let mut dot = 0.0;
                for r in 0..rows {
                    dot += m.get(r, j) * m.get(r, k);
                }
                for r in 0..rows {
                    let v = m.get(r, j) - dot * m.get(r, k);
                    m.set(r, j, v);
                }
            }
            let norm: f64 = (0..rows).map(|r| m.get(r, j) * m.get(r, j)).sum::<f64>().sqrt();
            assert!(norm > 1e-12, "degenerate column during orthonormalization");
            for r in 0..rows {
                let v = m.get(r, j) / norm;
                m.set(r, j, v);
            }
        }
    }
}

impl World {
    pub fn generate(cfg: WorldConfig) -> Result<World> {
        cfg.validate()?;
        let surface = SurfaceMap::generate(cfg.grid, cfg.grid, cfg.patch, cfg.keep_threshold, cfg.seed)?;
        let p = surface.active_count();

        let mut rng = seeding::rng_for(cfg.seed, "stimuli");
        let stimuli = Tensor::randn(cfg.n_stimuli, cfg.d_true, 1.0, &mut rng);

        let mut base_rng = seeding::rng_for(cfg.seed, "base-mixer");
        let col_std = 1.0 / (p as f64).sqrt();
        let base = Tensor::randn(p, cfg.d_true, col_std, &mut base_rng);

        let mut mixers = Vec::with_capacity(cfg.n_subjects);
        let mut biases = Vec::with_capacity(cfg.n_subjects);
        for s in 0..cfg.n_subjects {
            let mut rng = seeding::rng_from_key(&[cfg.seed, s as u64], "subject");
            let pert = Tensor::randn(p, cfg.d_true, col_std, &mut rng);
            let mut w = base.clone();
            w.axpy_in_place(cfg.subject_variability, &pert);
            orthonormalize_columns(&mut w);
            mixers.push(w);
            let bias_std = cfg.bias_scale / (p as f64).sqrt();
            biases.push(Tensor::randn(1, p, bias_std, &mut rng));
        }

        let mut gains = Vec::with_capacity(cfg.n_datasets);
        let mut offsets = Vec::with_capacity(cfg.n_datasets);
        for d in 0..cfg.n_datasets {
            let mut rng = seeding::rng_from_key(&[cfg.seed, d as u64], "dataset");
            let g: f64 = 1.0 + cfg.dataset_gain_std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            gains.push(g);
            let off_std = cfg.dataset_offset_std * (cfg.d_true as f64 / p as f64).sqrt();
            offsets.push(Tensor::randn(1, p, off_std, &mut rng));
        }

        let mut tp_rng = seeding::rng_for(cfg.seed, "target-proj");
        let mut target_proj = Tensor::randn(cfg.target_rows * cfg.target_cols, cfg.d_true, 1.0, &mut tp_rng);
        orthonormalize_columns(&mut target_proj);
        // Semi-orthogonal columns leave target entries at variance d_true/P.
        // Blow the frame up to unit per-element variance; cosine geometry is
        // unchanged and regression targets sit at the same scale as latents.
        let up = ((cfg.target_rows * cfg.target_cols) as f64 / cfg.d_true as f64).sqrt();
        target_proj.scale_in_place(up);

        let mut world = World {
            cfg,
            surface,
            stimuli,
            mixers,
            biases,
            gains,
            offsets,
            target_proj,
            response_scale: 1.0,
            sigma_signal: 1.0,
        };
        let raw_std = world.estimate_signal_std();
        if raw_std > 0.0 {
            world.response_scale = 1.0 / raw_std;
        }
        world.sigma_signal = world.estimate_signal_std();
        Ok(world)
    }

    /// Pooled std of clean active-pixel values over a deterministic sample of
    /// (stimulus, subject, dataset) cells.
    fn estimate_signal_std(&self) -> f64 {
        let mut vals = Vec::new();
        let take = self.cfg.n_stimuli.min(24);
        for k in 0..take {
            let s = k % self.cfg.n_subjects;
            let d = k % self.cfg.n_datasets;
            let grid = self.render_clean(k, s, d);
            for &i in &self.surface.active_indices() {
                vals.push(grid.data()[i]);
            }
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        var.sqrt()
    }

    pub fn n_stimuli(&self) -> usize {
        self.cfg.n_stimuli
    }

    pub fn n_subjects(&self) -> usize {
        self.cfg.n_subjects
    }

    pub fn n_datasets(&self) -> usize {
        self.cfg.n_datasets
    }

    pub fn signal_std(&self) -> f64 {
        self.sigma_signal
    }

    /// Absolute measurement-noise std after resolving the relative flag.
    pub fn noise_sigma(&self) -> f64 {
        if self.cfg.noise_relative {
            self.cfg.noise_std * self.sigma_signal
        } else {
            self.cfg.noise_std
        }
    }

    pub fn stimulus(&self, k: usize) -> &[f64] {
        self.stimuli.row(k)
    }

    /// Ground-truth decoding target for stimulus `k`. Isometric in `t`, so
    /// cosine similarities of targets mirror those of stimuli.
    pub fn visual_target(&self, k: usize) -> Tensor {
        let t = self.stimuli.row(k);
        let rows = self.cfg.target_rows;
        let cols = self.cfg.target_cols;
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows * cols {
            let mut acc = 0.0;
            for (j, &tj) in t.iter().enumerate() {
                acc += self.target_proj.get(i, j) * tj;
            }
            out.data_mut()[i] = acc;
        }
        out
    }

    fn embed_and_smooth(&self, active_vals: &[f64]) -> Tensor {
        let h = self.cfg.grid;
        let mut grid = Tensor::zeros(h, h);
        for (&idx, &v) in self.surface.active_indices().iter().zip(active_vals) {
            grid.data_mut()[idx] = v;
        }
        if self.cfg.smooth {
            grid = smooth_3tap(&grid);
        }
        self.surface.mask_grid(&mut grid);
        grid
    }

    /// Noise-free response grid.
    pub fn render_clean(&self, stim: usize, subj: usize, ds: usize) -> Tensor {
        assert!(stim < self.cfg.n_stimuli && subj < self.cfg.n_subjects && ds < self.cfg.n_datasets);
        let w = &self.mixers[subj];
        let t = self.stimuli.row(stim);
        let p = w.rows();
        let mut vals = vec![0.0; p];
        for r in 0..p {
            let mut acc = 0.0;
            for (j, &tj) in t.iter().enumerate() {
                acc += w.get(r, j) * tj;
            }
            vals[r] = self.response_scale
                * (self.gains[ds] * (acc + self.biases[subj].data()[r]) + self.offsets[ds].data()[r]);
        }
        self.embed_and_smooth(&vals)
    }

    /// Response grid with per-trial measurement noise. The noise stream is
    /// keyed by (world seed, stimulus, subject, dataset, trial), so a cell is
    /// reproducible regardless of render order.
    pub fn render(&self, stim: usize, subj: usize, ds: usize, trial: u64) -> Tensor {
        let mut grid = self.render_clean(stim, subj, ds);
        let sigma = self.noise_sigma();
        if sigma > 0.0 {
            let mut rng = seeding::rng_from_key(
                &[self.cfg.seed, stim as u64, subj as u64, ds as u64, trial],
                "render-noise",
            );
            for &idx in &self.surface.active_indices() {
                let n: f64 = rng.sample(StandardNormal);
                grid.data_mut()[idx] += sigma * n;
            }
        }
        grid
    }

    /// Render many cells at once; order of results matches `cells`.
    pub fn render_batch(&self, mode: ExecMode, cells: &[(usize, usize, usize, u64)]) -> Vec<Tensor> {
        exec::map_indexed(mode, cells.len(), |i| {
            let (k, s, d, trial) = cells[i];
            self.render(k, s, d, trial)
        })
    }

    pub fn save_to(&self, path: &Path) -> Result<()> {
        let fp = config_fingerprint(&self.cfg);
        let meta = serde_json::json!({
            "kind": "world",
            "config": serde_json::to_value(&self.cfg)?,
        });
        let mut c = Container::new(&fp, meta);
        self.surface.save_into(&mut c);
        c.push("stimuli", self.stimuli.clone());
        c.push("target_proj", self.target_proj.clone());
        c.push("scales", Tensor::from_vec(1, 2, vec![self.response_scale, self.sigma_signal]));
        c.push("gains", Tensor::from_vec(1, self.gains.len(), self.gains.clone()));
        for (s, (m, b)) in self.mixers.iter().zip(&self.biases).enumerate() {
            c.push(&format!("mixer.{s}"), m.clone());
            c.push(&format!("bias.{s}"), b.clone());
        }
        for (d, o) in self.offsets.iter().enumerate() {
            c.push(&format!("offset.{d}"), o.clone());
        }
        c.write_to(path)
    }

    pub fn load_from(path: &Path) -> Result<World> {
        let c = Container::read_from(path)?;
        if c.meta_str("kind") != Some("world") {
            return Err(CoreError::Io(format!("{}: not a world file", path.display())));
        }
        let cfg: WorldConfig = serde_json::from_value(
            c.meta
                .get("config")
                .cloned()
                .ok_or_else(|| CoreError::Io("world file has no config".into()))?,
        )?;
        c.check_fingerprint(&config_fingerprint(&cfg))?;
        let surface = SurfaceMap::load_from(&c)?;
        let stimuli = c.require("stimuli")?.clone();
        let target_proj = c.require("target_proj")?.clone();
        let scales = c.require("scales")?.data().to_vec();
        let (response_scale, sigma_signal) = (scales[0], scales[1]);
        let gains = c.require("gains")?.data().to_vec();
        let mut mixers = Vec::with_capacity(cfg.n_subjects);
        let mut biases = Vec::with_capacity(cfg.n_subjects);
        for s in 0..cfg.n_subjects {
            mixers.push(c.require(&format!("mixer.{s}"))?.clone());
            biases.push(c.require(&format!("bias.{s}"))?.clone());
        }
        let mut offsets = Vec::with_capacity(cfg.n_datasets);
        for d in 0..cfg.n_datasets {
            offsets.push(c.require(&format!("offset.{d}"))?.clone());
        }
        Ok(World {
            cfg,
            surface,
            stimuli,
            mixers,
            biases,
            gains,
            offsets,
            target_proj,
            response_scale,
            sigma_signal,
        })
    }
}

/// Separable [1 2 1]/4 smoothing with zero padding.
fn smooth_3tap(grid: &Tensor) -> Tensor {
    let (h, w) = grid.shape();
    let mut tmp = Tensor::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.5 * grid.get(r, c);
            if c > 0 {
                acc += 0.25 * grid.get(r, c - 1);
            }
            if c + 1 < w {
                acc += 0.25 * grid.get(r, c + 1);
            }
            tmp.set(r, c, acc);
        }
    }
    let mut out = Tensor::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.5 * tmp.get(r, c);
            if r > 0 {
                acc += 0.25 * tmp.get(r - 1, c);
            }
            if r + 1 < h {
                acc += 0.25 * tmp.get(r + 1, c);
            }
            out.set(r, c, acc);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> WorldConfig {
        WorldConfig {
            seed: 5,
            n_subjects: 3,
            n_datasets: 2,
            n_stimuli: 12,
            d_true: 6,
            grid: 16,
            patch: 4,
            target_rows: 2,
            target_cols: 8,
            ..Default::default()
        }
    }

    #[test]
    fn rendering_is_deterministic_per_cell() {
        let w = World::generate(small_cfg()).unwrap();
        let a = w.render(3, 1, 0, 2);
        let b = w.render(3, 1, 0, 2);
        assert_eq!(a.data(), b.data());
        let c = w.render(3, 1, 0, 3);
        assert_ne!(a.data(), c.data(), "different trials must differ");
    }

    /// Independent oracle for the noise level: the empirical std of
    /// (noisy - clean) over active pixels and many trials must match the
    /// configured sigma.
    #[test]
    fn noise_std_matches_configuration() {
        let w = World::generate(small_cfg()).unwrap();
        let clean = w.render_clean(0, 0, 0);
        let active = w.surface.active_indices();
        let mut sq = 0.0;
        let mut n = 0.0;
        for trial in 0..200 {
            let noisy = w.render(0, 0, 0, trial);
            for &i in &active {
                let d = noisy.data()[i] - clean.data()[i];
                sq += d * d;
                n += 1.0;
            }
        }
        let emp = (sq / n).sqrt();
        let want = w.noise_sigma();
        assert!(want > 0.0);
        assert!((emp - want).abs() / want < 0.03, "empirical {emp} vs {want}");
    }

    /// The target embedding is a scaled isometry: pairwise inner products of
    /// targets equal those of the underlying stimulus vectors times P/d_true,
    /// so cosine similarities carry over exactly.
    #[test]
    fn visual_targets_preserve_inner_products() {
        let w = World::generate(small_cfg()).unwrap();
        let cfg = small_cfg();
        let gain = (cfg.target_rows * cfg.target_cols) as f64 / cfg.d_true as f64;
        for i in 0..4 {
            for j in 0..4 {
                let ti = w.visual_target(i);
                let tj = w.visual_target(j);
                let tgt: f64 = ti.data().iter().zip(tj.data()).map(|(a, b)| a * b).sum();
                let stim: f64 = w.stimulus(i).iter().zip(w.stimulus(j)).map(|(a, b)| a * b).sum();
                assert!((tgt - gain * stim).abs() < 1e-9, "({i},{j}): {tgt} vs {stim}");
            }
        }
    }

    #[test]
    fn zero_variability_collapses_subject_mixers() {
        let mut cfg = small_cfg();
        cfg.subject_variability = 0.0;
        cfg.bias_scale = 0.0;
        cfg.noise_std = 0.0;
        let w = World::generate(cfg).unwrap();
        let a = w.render_clean(2, 0, 0);
        let b = w.render_clean(2, 1, 0);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn subjects_differ_under_variability() {
        let w = World::generate(small_cfg()).unwrap();
        let a = w.render_clean(2, 0, 0);
        let b = w.render_clean(2, 1, 0);
        let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-3);
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let w = World::generate(small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("world.ntc");
        w.save_to(&path).unwrap();
        let back = World::load_from(&path).unwrap();
        assert_eq!(back.cfg, w.cfg);
        let a = w.render(5, 2, 1, 9);
        let b = back.render(5, 2, 1, 9);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn render_batch_matches_individual_renders() {
        let w = World::generate(small_cfg()).unwrap();
        let cells = vec![(0, 0, 0, 0), (1, 2, 1, 4), (7, 1, 0, 2)];
        let seq = w.render_batch(ExecMode::Sequential, &cells);
        let par = w.render_batch(ExecMode::Parallel, &cells);
        for ((s, p), &(k, su, d, tr)) in seq.iter().zip(&par).zip(&cells) {
            let direct = w.render(k, su, d, tr);
            assert_eq!(s.data(), direct.data());
            assert_eq!(p.data(), direct.data());
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = small_cfg();
        cfg.target_rows = 1;
        cfg.target_cols = 2; // cannot hold d_true = 6
        assert!(World::generate(cfg).is_err());
    }
}
