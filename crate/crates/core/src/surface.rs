//! Surface geometry: a rectangular grid, an irregular active-pixel mask, and
//! the patch tokenization used by the autoencoder.
//!
//! Pixels outside the mask carry no signal and are held at zero. The grid is
//! cut into `patch x patch` tiles; a tile is kept when its active-pixel
//! fraction reaches `keep_threshold`, and only kept tiles become tokens.
//! `unpatchify` is a right inverse of `patchify` on the kept region and fills
//! everything else with zeros.

use crate::container::Container;
use crate::error::{CoreError, Result};
use crate::seeding;
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct SurfaceMap {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub keep_threshold: f64,
    active: Vec<bool>,
    /// Patch indices (row-major over the patch grid) that made the cut.
    kept: Vec<usize>,
}

impl SurfaceMap {
    /// Irregular blob mask: an ellipse modulated by low-frequency wobble so
    /// the boundary is uneven, like a flattened cortical sheet.
    pub fn generate(height: usize, width: usize, patch: usize, keep_threshold: f64, seed: u64) -> Result<Self> {
        if height % patch != 0 || width % patch != 0 {
            return Err(CoreError::InvalidConfig(format!(
                "patch {patch} must divide grid {height}x{width}"
            )));
        }
        if !(0.0..=1.0).contains(&keep_threshold) {
            return Err(CoreError::InvalidConfig(format!(
                "keep_threshold {keep_threshold} outside [0, 1]"
            )));
        }
        let mut rng = seeding::rng_for(seed, "surface-mask");
        let waves: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    rng.gen_range(1.0..3.5),
                    rng.gen_range(1.0..3.5),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.05..0.18),
                )
            })
            .collect();
        let mut active = vec![false; height * width];
        for r in 0..height {
            for c in 0..width {
                let u = ((r as f64 + 0.5) / height as f64 - 0.5) * 2.0;
                let v = ((c as f64 + 0.5) / width as f64 - 0.5) * 2.0;
                let d2 = (u / 0.92).powi(2) + (v / 0.88).powi(2);
                let wobble: f64 = waves
                    .iter()
                    .map(|(fu, fv, ph, amp)| amp * (fu * std::f64::consts::PI * u + fv * std::f64::consts::PI * v + ph).sin())
                    .sum();
                active[r * width + c] = 1.0 - d2 + wobble > 0.0;
            }
        }
        Self::from_mask(height, width, patch, keep_threshold, active)
    }

    pub fn from_mask(height: usize, width: usize, patch: usize, keep_threshold: f64, active: Vec<bool>) -> Result<Self> {
        if active.len() != height * width {
            return Err(CoreError::ShapeMismatch(format!(
                "mask has {} entries for a {height}x{width} grid",
                active.len()
            )));
        }
        if height % patch != 0 || width % patch != 0 {
            return Err(CoreError::InvalidConfig(format!(
                "patch {patch} must divide grid {height}x{width}"
            )));
        }
        let npx = width / patch;
        let npy = height / patch;
        let mut kept = Vec::new();
        for py in 0..npy {
            for px in 0..npx {
                let mut count = 0usize;
                for dr in 0..patch {
                    for dc in 0..patch {
                        if active[(py * patch + dr) * width + px * patch + dc] {
                            count += 1;
                        }
                    }
                }
                if count as f64 / (patch * patch) as f64 >= keep_threshold {
                    kept.push(py * npx + px);
                }
            }
        }
        if kept.is_empty() {
            return Err(CoreError::DegenerateInput("mask keeps no patches".into()));
        }
        Ok(SurfaceMap { height, width, patch, keep_threshold, active, kept })
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn n_tokens(&self) -> usize {
        self.kept.len()
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch
    }

    pub fn is_active(&self, r: usize, c: usize) -> bool {
        self.active[r * self.width + c]
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// Flat pixel indices of every active pixel, row-major.
    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.n_pixels()).filter(|&i| self.active[i]).collect()
    }

    /// Flat pixel indices of active pixels inside kept patches: exactly the
    /// pixels the autoencoder can reconstruct.
    pub fn covered_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let npx = self.width / self.patch;
        for &p in &self.kept {
            let py = p / npx;
            let px = p % npx;
            for dr in 0..self.patch {
                for dc in 0..self.patch {
                    let idx = (py * self.patch + dr) * self.width + px * self.patch + dc;
                    if self.active[idx] {
                        out.push(idx);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Zero out inactive pixels of a full grid, in place.
    pub fn mask_grid(&self, grid: &mut Tensor) {
        assert_eq!(grid.shape(), (self.height, self.width), "grid shape");
        for (v, &a) in grid.data_mut().iter_mut().zip(&self.active) {
            if !a {
                *v = 0.0;
            }
        }
    }

    /// Tokenize a full grid: one row per kept patch, pixels row-major within
    /// the patch, inactive pixels forced to zero.
    pub fn patchify(&self, grid: &Tensor) -> Tensor {
        assert_eq!(grid.shape(), (self.height, self.width), "grid shape");
        let pd = self.token_dim();
        let npx = self.width / self.patch;
        let mut out = Tensor::zeros(self.kept.len(), pd);
        for (t, &p) in self.kept.iter().enumerate() {
            let py = p / npx;
            let px = p % npx;
            let row = out.row_mut(t);
            for dr in 0..self.patch {
                for dc in 0..self.patch {
                    let idx = (py * self.patch + dr) * self.width + px * self.patch + dc;
                    if self.active[idx] {
                        row[dr * self.patch + dc] = grid.data()[idx];
                    }
                }
            }
        }
        out
    }

    /// Scatter tokens back onto a full grid; dropped patches and inactive
    /// pixels read zero.
    pub fn unpatchify(&self, tokens: &Tensor) -> Tensor {
        assert_eq!(tokens.shape(), (self.kept.len(), self.token_dim()), "token shape");
        let npx = self.width / self.patch;
        let mut grid = Tensor::zeros(self.height, self.width);
        for (t, &p) in self.kept.iter().enumerate() {
            let py = p / npx;
            let px = p % npx;
            for dr in 0..self.patch {
                for dc in 0..self.patch {
                    let idx = (py * self.patch + dr) * self.width + px * self.patch + dc;
                    if self.active[idx] {
                        grid.data_mut()[idx] = tokens.get(t, dr * self.patch + dc);
                    }
                }
            }
        }
        grid
    }

    /// 0/1 weights aligned with token entries; 1 marks an active pixel.
    pub fn token_weights(&self) -> Tensor {
        let pd = self.token_dim();
        let npx = self.width / self.patch;
        let mut out = Tensor::zeros(self.kept.len(), pd);
        for (t, &p) in self.kept.iter().enumerate() {
            let py = p / npx;
            let px = p % npx;
            let row = out.row_mut(t);
            for dr in 0..self.patch {
                for dc in 0..self.patch {
                    let idx = (py * self.patch + dr) * self.width + px * self.patch + dc;
                    if self.active[idx] {
                        row[dr * self.patch + dc] = 1.0;
                    }
                }
            }
        }
        out
    }

    pub fn save_into(&self, c: &mut Container) {
        let mask: Vec<f64> = self.active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
        c.push("surface.mask", Tensor::from_vec(self.height, self.width, mask));
        c.push(
            "surface.shape",
            Tensor::from_vec(1, 3, vec![self.patch as f64, self.keep_threshold, 0.0]),
        );
    }

    pub fn load_from(c: &Container) -> Result<Self> {
        let mask = c.require("surface.mask")?;
        let shape = c.require("surface.shape")?;
        let patch = shape.data()[0] as usize;
        let keep_threshold = shape.data()[1];
        let active: Vec<bool> = mask.data().iter().map(|&v| v != 0.0).collect();
        Self::from_mask(mask.rows(), mask.cols(), patch, keep_threshold, active)
    }
}
