//! Run configuration: one TOML document that pins everything an experiment
//! needs. Unknown keys are rejected, every field has a default, and dotted
//! keys (`training.lfcm_steps=800`) override single values from the command
//! line. The resolved document is written next to every run's outputs so a
//! result can always be traced to its exact configuration.

use crate::error::{CoreError, Result};
use crate::exec::ExecMode;
use crate::lfcm::LfcmConfig;
use crate::opt::AdamWConfig;
use crate::synthworld::WorldConfig;
use crate::training::{LfcmTrainConfig, LossWeights, TrainAblation};
use crate::univae::{AeTrainConfig, UniVaeConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSection {
    pub seed: u64,
    pub n_subjects: usize,
    pub n_datasets: usize,
    pub n_stimuli: usize,
    pub d_true: usize,
    pub subject_variability: f64,
    pub bias_scale: f64,
    pub dataset_gain_std: f64,
    pub dataset_offset_std: f64,
    pub noise_std: f64,
    pub noise_relative: bool,
    pub smooth: bool,
    pub target_rows: usize,
    pub target_cols: usize,
}

impl Default for WorldSection {
    fn default() -> Self {
        let w = WorldConfig::default();
        WorldSection {
            seed: w.seed,
            n_subjects: w.n_subjects,
            n_datasets: w.n_datasets,
            n_stimuli: w.n_stimuli,
            d_true: w.d_true,
            subject_variability: w.subject_variability,
            bias_scale: w.bias_scale,
            dataset_gain_std: w.dataset_gain_std,
            dataset_offset_std: w.dataset_offset_std,
            noise_std: w.noise_std,
            noise_relative: w.noise_relative,
            smooth: w.smooth,
            target_rows: w.target_rows,
            target_cols: w.target_cols,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SurfaceSection {
    pub grid: usize,
    pub patch: usize,
    pub keep_threshold: f64,
}

impl Default for SurfaceSection {
    fn default() -> Self {
        SurfaceSection { grid: 32, patch: 4, keep_threshold: 0.5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub seed: u64,
    /// `auto`, `sequential`, or `parallel`.
    pub exec: String,
    /// Stimuli 0..train_stimuli train; the rest are held out.
    pub train_stimuli: usize,
    pub ae_steps: usize,
    pub ae_batch: usize,
    pub ae_lr: f64,
    pub ae_jitter: f64,
    pub ae_ema: f64,
    pub lfcm_ema: f64,
    pub lfcm_steps: usize,
    pub lfcm_batch: usize,
    pub lfcm_lr: f64,
    pub warmup_steps: usize,
    pub ae_decay: f64,
    pub lfcm_decay: f64,
    pub w_align: f64,
    pub w_rec: f64,
    pub w_refcr: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            seed: 42,
            exec: "auto".into(),
            train_stimuli: 160,
            ae_steps: 10_000,
            ae_batch: 4,
            ae_lr: 3e-3,
            ae_jitter: 0.05,
            ae_ema: 0.999,
            lfcm_ema: 0.995,
            lfcm_steps: 500,
            lfcm_batch: 8,
            lfcm_lr: 1e-3,
            warmup_steps: 400,
            ae_decay: 0.05,
            lfcm_decay: 0.01,
            w_align: 1.0,
            w_rec: 1.0,
            w_refcr: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceSection {
    pub sweep: bool,
    pub rescale: bool,
}

impl Default for InferenceSection {
    fn default() -> Self {
        InferenceSection { sweep: true, rescale: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Trailing subjects excluded from all training and treated as unseen.
    pub held_out_subjects: usize,
    /// Noisy trials decoded per evaluation cell.
    pub trials: usize,
    /// Dataset decoded at evaluation time.
    pub dataset: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { held_out_subjects: 1, trials: 1, dataset: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldSection,
    pub surface: SurfaceSection,
    pub univae: UniVaeConfig,
    pub lfcm: LfcmConfig,
    pub training: TrainingSection,
    pub inference: InferenceSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(s).map_err(|e| CoreError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }

    /// Set one value by dotted key, e.g. `world.noise_std=0.1`. The value
    /// string is parsed according to the existing field's type.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = toml::Value::try_from(&*self)
            .map_err(|e| CoreError::InvalidConfig(e.to_string()))?;
        let parts: Vec<&str> = key.split('.').collect();
        let (last, parents) = parts.split_last().expect("split yields at least one part");
        let mut cursor = &mut root;
        for part in parents {
            cursor = cursor
                .as_table_mut()
                .ok_or_else(|| CoreError::InvalidConfig(format!("`{key}`: not a table at `{part}`")))?
                .get_mut(*part)
                .ok_or_else(|| CoreError::InvalidConfig(format!("unknown config key `{key}`")))?;
        }
        let entry = cursor
            .as_table_mut()
            .ok_or_else(|| CoreError::InvalidConfig(format!("`{key}`: not a table")))?
            .get_mut(*last)
            .ok_or_else(|| CoreError::InvalidConfig(format!("unknown config key `{key}`")))?;
        *entry = parse_toml_scalar(entry, value, key)?;
        // Type-check via the round trip but defer cross-field validation:
        // a stack of overrides may only be coherent once complete.
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| CoreError::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.world_config().validate()?;
        self.univae.validate()?;
        self.lfcm.validate()?;
        if self.training.train_stimuli == 0 || self.training.train_stimuli >= self.world.n_stimuli {
            return Err(CoreError::InvalidConfig(format!(
                "train_stimuli {} leaves no held-out stimuli of {}",
                self.training.train_stimuli, self.world.n_stimuli
            )));
        }
        if self.eval.held_out_subjects >= self.world.n_subjects {
            return Err(CoreError::InvalidConfig(format!(
                "held_out_subjects {} exhausts {} subjects",
                self.eval.held_out_subjects, self.world.n_subjects
            )));
        }
        if self.seen_subjects() < 2 {
            return Err(CoreError::InvalidConfig(
                "need at least 2 seen subjects for pair training".into(),
            ));
        }
        if self.eval.trials == 0 {
            return Err(CoreError::InvalidConfig("eval.trials must be positive".into()));
        }
        if self.eval.dataset >= self.world.n_datasets {
            return Err(CoreError::InvalidConfig(format!(
                "eval.dataset {} outside {} datasets",
                self.eval.dataset, self.world.n_datasets
            )));
        }
        // The alignment loss compares content codes to visual targets
        // entrywise, so their shapes must agree.
        if self.lfcm.content_tokens != self.world.target_rows
            || self.lfcm.d_c != self.world.target_cols
        {
            return Err(CoreError::InvalidConfig(format!(
                "content code {}x{} must match the visual target {}x{}",
                self.lfcm.content_tokens, self.lfcm.d_c, self.world.target_rows, self.world.target_cols
            )));
        }
        self.exec_mode()?;
        Ok(())
    }

    pub fn world_config(&self) -> WorldConfig {
        let w = &self.world;
        WorldConfig {
            seed: w.seed,
            n_subjects: w.n_subjects,
            n_datasets: w.n_datasets,
            n_stimuli: w.n_stimuli,
            d_true: w.d_true,
            grid: self.surface.grid,
            patch: self.surface.patch,
            keep_threshold: self.surface.keep_threshold,
            subject_variability: w.subject_variability,
            bias_scale: w.bias_scale,
            dataset_gain_std: w.dataset_gain_std,
            dataset_offset_std: w.dataset_offset_std,
            noise_std: w.noise_std,
            noise_relative: w.noise_relative,
            smooth: w.smooth,
            target_rows: w.target_rows,
            target_cols: w.target_cols,
        }
    }

    pub fn exec_mode(&self) -> Result<ExecMode> {
        match self.training.exec.as_str() {
            "auto" => Ok(ExecMode::auto()),
            other => other
                .parse()
                .map_err(|e: String| CoreError::InvalidConfig(e)),
        }
    }

    pub fn seen_subjects(&self) -> usize {
        self.world.n_subjects - self.eval.held_out_subjects
    }

    pub fn ae_train_config(&self) -> Result<AeTrainConfig> {
        Ok(AeTrainConfig {
            steps: self.training.ae_steps,
            batch: self.training.ae_batch,
            opt: AdamWConfig {
                lr: self.training.ae_lr,
                warmup_steps: self.training.warmup_steps,
                weight_decay: self.training.ae_decay,
                total_steps: Some(self.training.ae_steps),
                ..Default::default()
            },
            train_stimuli: self.training.train_stimuli,
            n_subjects: self.seen_subjects(),
            jitter: self.training.ae_jitter,
            ema: self.training.ae_ema,
            seed: self.training.seed,
            mode: self.exec_mode()?,
        })
    }

    pub fn lfcm_train_config(&self, ablation: TrainAblation) -> Result<LfcmTrainConfig> {
        Ok(LfcmTrainConfig {
            steps: self.training.lfcm_steps,
            batch: self.training.lfcm_batch,
            opt: AdamWConfig {
                lr: self.training.lfcm_lr,
                warmup_steps: self.training.warmup_steps,
                weight_decay: self.training.lfcm_decay,
                total_steps: Some(self.training.lfcm_steps),
                ..Default::default()
            },
            weights: LossWeights {
                align: self.training.w_align,
                rec: self.training.w_rec,
                refcr: self.training.w_refcr,
            },
            ablation,
            ema: self.training.lfcm_ema,
            seed: self.training.seed,
            mode: self.exec_mode()?,
        })
    }
}

fn parse_toml_scalar(existing: &toml::Value, value: &str, key: &str) -> Result<toml::Value> {
    let parsed = match existing {
        toml::Value::Boolean(_) => toml::Value::Boolean(value.parse().map_err(|_| {
            CoreError::InvalidConfig(format!("`{key}` expects a bool, got `{value}`"))
        })?),
        toml::Value::Integer(_) => toml::Value::Integer(value.parse().map_err(|_| {
            CoreError::InvalidConfig(format!("`{key}` expects an integer, got `{value}`"))
        })?),
        toml::Value::Float(_) => toml::Value::Float(value.parse().map_err(|_| {
            CoreError::InvalidConfig(format!("`{key}` expects a float, got `{value}`"))
        })?),
        toml::Value::String(_) => toml::Value::String(value.to_string()),
        other => {
            return Err(CoreError::InvalidConfig(format!(
                "`{key}` is a {} and cannot be overridden",
                other.type_str()
            )))
        }
    };
    Ok(parsed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str("[world]\nbogus = 3\n");
        assert!(err.is_err());
    }

    #[test]
    fn overrides_respect_types() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("world.noise_std", "0.5").unwrap();
        assert_eq!(cfg.world.noise_std, 0.5);
        cfg.apply_override("training.lfcm_steps", "77").unwrap();
        assert_eq!(cfg.training.lfcm_steps, 77);
        cfg.apply_override("inference.sweep", "false").unwrap();
        assert!(!cfg.inference.sweep);
        cfg.apply_override("training.exec", "sequential").unwrap();
        assert_eq!(cfg.exec_mode().unwrap(), ExecMode::Sequential);
        assert!(cfg.apply_override("world.noise_std", "not-a-number").is_err());
        assert!(cfg.apply_override("world.does_not_exist", "1").is_err());
        assert!(cfg.apply_override("nonsense.key", "1").is_err());
    }

    #[test]
    fn invalid_splits_are_rejected() {
        // Overrides apply without cross-field checks; validate() is the gate.
        let mut cfg = RunConfig::default();
        cfg.apply_override("training.train_stimuli", "200").unwrap();
        assert!(cfg.validate().is_err(), "train split must leave held-out stimuli");
        let mut cfg = RunConfig::default();
        cfg.apply_override("eval.held_out_subjects", "10").unwrap();
        assert!(cfg.validate().is_err());
        // Order independence: shrink the world before widening the split.
        let mut cfg = RunConfig::default();
        cfg.apply_override("world.n_stimuli", "12").unwrap();
        cfg.apply_override("training.train_stimuli", "8").unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn world_config_merges_surface() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("surface.grid", "16").unwrap();
        let wc = cfg.world_config();
        assert_eq!(wc.grid, 16);
        assert_eq!(wc.patch, cfg.surface.patch);
        assert_eq!(wc.n_subjects, cfg.world.n_subjects);
    }
}
