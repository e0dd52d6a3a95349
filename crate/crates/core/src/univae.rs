//! Stage I: universal surface autoencoder.
//!
//! Kept patches become tokens, a learnable CLS bank is prepended, and a
//! pre-norm transformer encodes the sequence; the CLS rows after the final
//! norm are the latent `z`. The decoder never sees the spatial tokens: it
//! starts from learnable guide tokens (one per kept patch, plus the shared
//! positional table), cross-attends to `z`, and ends in a linear head back to
//! pixel space, so all information must pass through the CLS bottleneck.
//!
//! One autoencoder serves every subject and dataset; later stages treat it as
//! frozen and differentiate through it without updating it.

use crate::container::{config_fingerprint, Container};
use crate::error::{CoreError, Result};
use crate::exec::{self, ExecMode};
use crate::nn::{CrossBlock, LayerNorm, Linear, SelfBlock, TokenBank};
use crate::opt::{AdamW, AdamWConfig, Ema};
use crate::params::{ParamStore, Staged};
use crate::seeding;
use crate::surface::SurfaceMap;
use crate::synthworld::World;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct UniVaeConfig {
    pub width: usize,
    pub heads: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub cls_tokens: usize,
    /// FFN hidden size as a multiple of width.
    pub ffn_mult: usize,
    pub init_seed: u64,
}

impl Default for UniVaeConfig {
    fn default() -> Self {
        UniVaeConfig {
            width: 64,
            heads: 4,
            enc_blocks: 2,
            dec_blocks: 2,
            cls_tokens: 4,
            ffn_mult: 4,
            init_seed: 101,
        }
    }
}

impl UniVaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(CoreError::InvalidConfig(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.cls_tokens == 0 {
            return Err(CoreError::InvalidConfig("cls_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct UniVae {
    pub cfg: UniVaeConfig,
    pub store: ParamStore,
    n_tokens: usize,
    token_dim: usize,
    in_proj: Linear,
    pos: TokenBank,
    cls: TokenBank,
    enc: Vec<SelfBlock>,
    ln_enc: LayerNorm,
    guide: TokenBank,
    dec: Vec<CrossBlock>,
    ln_dec: LayerNorm,
    out_proj: Linear,
}

impl UniVae {
    pub fn init(cfg: UniVaeConfig, surface: &SurfaceMap) -> Result<UniVae> {
        cfg.validate()?;
        let mut rng = seeding::rng_for(cfg.init_seed, "univae-init");
        let mut store = ParamStore::new();
        let w = cfg.width;
        let n_tokens = surface.n_tokens();
        let token_dim = surface.token_dim();
        let hidden = w * cfg.ffn_mult;
        let in_proj = Linear::init(&mut store, "enc.in", token_dim, w, &mut rng);
        let pos = TokenBank::init(&mut store, "pos", n_tokens, w, 0.02, &mut rng);
        let cls = TokenBank::init(&mut store, "cls", cfg.cls_tokens, w, 0.02, &mut rng);
        let enc = (0..cfg.enc_blocks)
            .map(|i| SelfBlock::init(&mut store, &format!("enc.{i}"), w, cfg.heads, hidden, &mut rng))
            .collect();
        let ln_enc = LayerNorm::init(&mut store, "enc.ln_out", w);
        let guide = TokenBank::init(&mut store, "guide", n_tokens, w, 0.02, &mut rng);
        let dec = (0..cfg.dec_blocks)
            .map(|i| CrossBlock::init(&mut store, &format!("dec.{i}"), w, cfg.heads, hidden, &mut rng))
            .collect();
        let ln_dec = LayerNorm::init(&mut store, "dec.ln_out", w);
        let out_proj = Linear::init(&mut store, "dec.out", w, token_dim, &mut rng);
        Ok(UniVae {
            cfg,
            store,
            n_tokens,
            token_dim,
            in_proj,
            pos,
            cls,
            enc,
            ln_enc,
            guide,
            dec,
            ln_dec,
            out_proj,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    /// Latent shape `(rows, cols)` of `z`.
    pub fn latent_shape(&self) -> (usize, usize) {
        (self.cfg.cls_tokens, self.cfg.width)
    }

    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> Staged {
        self.store.stage(tape, trainable)
    }

    /// Encoder program. `visible` lists token indices fed to the encoder;
    /// pass all indices for full visibility. Returns the latent node.
    pub fn encode_program(&self, tape: &mut Tape, staged: &Staged, tokens: NodeId, visible: &[usize]) -> NodeId {
        assert!(!visible.is_empty(), "encoder needs at least one visible token");
        let picked = tape.gather_rows(tokens, visible);
        let projected = self.in_proj.apply(tape, staged, picked);
        let pos = tape.gather_rows(staged.id(self.pos.table), visible);
        let embedded = tape.add(projected, pos);
        let cls = self.cls.all(staged);
        let mut seq = tape.concat_rows(&[cls, embedded]);
        for blk in &self.enc {
            seq = blk.apply(tape, staged, seq);
        }
        let seq = self.ln_enc.apply(tape, staged, seq);
        tape.slice_rows(seq, 0, self.cfg.cls_tokens)
    }

    /// Decoder program from a latent node to reconstructed tokens.
    pub fn decode_program(&self, tape: &mut Tape, staged: &Staged, z: NodeId) -> NodeId {
        let guide = self.guide.all(staged);
        let pos = staged.id(self.pos.table);
        let mut seq = tape.add(guide, pos);
        for blk in &self.dec {
            seq = blk.apply(tape, staged, seq, z);
        }
        let seq = self.ln_dec.apply(tape, staged, seq);
        self.out_proj.apply(tape, staged, seq)
    }

    fn all_visible(&self) -> Vec<usize> {
        (0..self.n_tokens).collect()
    }

    /// Encode a token matrix with full visibility, no gradients.
    pub fn encode(&self, tokens: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape, false);
        let t = tape.constant(tokens.clone());
        let z = self.encode_program(&mut tape, &staged, t, &self.all_visible());
        tape.value(z).clone()
    }

    /// Decode a latent back to tokens, no gradients.
    pub fn decode(&self, z: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape, false);
        let zn = tape.constant(z.clone());
        let out = self.decode_program(&mut tape, &staged, zn);
        tape.value(out).clone()
    }

    pub fn reconstruct(&self, tokens: &Tensor) -> Tensor {
        self.decode(&self.encode(tokens))
    }

    pub fn save_to(&self, path: &Path, surface_fp: &str) -> Result<()> {
        let fp = config_fingerprint(&self.cfg);
        let meta = serde_json::json!({
            "kind": "univae",
            "config": serde_json::to_value(&self.cfg)?,
            "surface_fp": surface_fp,
            "n_tokens": self.n_tokens,
            "token_dim": self.token_dim,
        });
        let mut c = Container::new(&fp, meta);
        for (name, t) in self.store.entries() {
            c.push(name, t.clone());
        }
        c.write_to(path)
    }

    pub fn load_from(path: &Path, surface: &SurfaceMap) -> Result<UniVae> {
        let c = Container::read_from(path)?;
        if c.meta_str("kind") != Some("univae") {
            return Err(CoreError::Io(format!("{}: not an autoencoder file", path.display())));
        }
        let cfg: UniVaeConfig = serde_json::from_value(
            c.meta
                .get("config")
                .cloned()
                .ok_or_else(|| CoreError::Io("autoencoder file has no config".into()))?,
        )?;
        c.check_fingerprint(&config_fingerprint(&cfg))?;
        let mut model = UniVae::init(cfg, surface)?;
        if model.n_tokens != c.meta_u64("n_tokens").unwrap_or(0) as usize {
            return Err(CoreError::ShapeMismatch(
                "autoencoder was trained on a different surface".into(),
            ));
        }
        model.store.load_entries(&c.tensors)?;
        Ok(model)
    }
}

/// Everything the Stage I trainer needs beyond the model itself.
#[derive(Debug, Clone)]
pub struct AeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub opt: AdamWConfig,
    pub train_stimuli: usize,
    pub n_subjects: usize,
    /// Std of extra input noise on active pixels; the target stays the raw
    /// tokens, so this regularizes like a denoiser.
    pub jitter: f64,
    /// Polyak decay for the returned weights; 0 keeps the last iterate.
    pub ema: f64,
    pub seed: u64,
    pub mode: ExecMode,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn write_step_log(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut out = String::from("step,loss,lr\n");
    for s in log {
        out.push_str(&format!("{},{},{}\n", s.step, s.loss, s.lr));
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct AeSample {
    input: Tensor,
    tokens: Tensor,
}

/// Train the autoencoder on rendered responses from the first
/// `train_stimuli` stimuli across the given subjects and all datasets.
/// Returns the per-step loss trace.
pub fn train_univae(model: &mut UniVae, world: &World, tc: &AeTrainConfig) -> Result<Vec<StepLog>> {
    if tc.train_stimuli == 0 || tc.train_stimuli > world.n_stimuli() {
        return Err(CoreError::InvalidConfig(format!(
            "train_stimuli {} outside 1..={}",
            tc.train_stimuli,
            world.n_stimuli()
        )));
    }
    if tc.n_subjects == 0 || tc.n_subjects > world.n_subjects() {
        return Err(CoreError::InvalidConfig(format!(
            "n_subjects {} outside 1..={}",
            tc.n_subjects,
            world.n_subjects()
        )));
    }
    let weights = Arc::new(world.surface.token_weights().into_data());
    let denom: f64 = weights.iter().sum();
    let visible = model.all_visible();

    let mut opt = AdamW::new(tc.opt.clone(), &model.store);
    let mut ema = (tc.ema > 0.0).then(|| Ema::new(tc.ema, &model.store));
    let mut rng = seeding::rng_for(tc.seed, "ae-train");
    let mut log = Vec::with_capacity(tc.steps);
    let mut trial_counter: u64 = 0;

    for step in 0..tc.steps {
        // All randomness happens here, sequentially, so execution mode cannot
        // change what gets sampled.
        let mut samples = Vec::with_capacity(tc.batch);
        for _ in 0..tc.batch {
            let k = rng.gen_range(0..tc.train_stimuli);
            let s = rng.gen_range(0..tc.n_subjects);
            let d = rng.gen_range(0..world.n_datasets());
            let trial = trial_counter;
            trial_counter += 1;
            let grid = world.render(k, s, d, trial);
            let tokens = world.surface.patchify(&grid);
            let mut input = tokens.clone();
            if tc.jitter > 0.0 {
                for (x, &w) in input.data_mut().iter_mut().zip(weights.iter()) {
                    let n: f64 = rng.sample(StandardNormal);
                    *x += tc.jitter * w * n;
                }
            }
            samples.push(AeSample { input, tokens });
        }

        let lr = opt.current_lr();
        let (loss_sum, grad_sum) = exec::map_reduce_ordered(
            tc.mode,
            samples.len(),
            (0.0_f64, None::<Vec<Tensor>>),
            |i| {
                let sample = &samples[i];
                let mut tape = Tape::new();
                let staged = model.stage(&mut tape, true);
                let input = tape.constant(sample.input.clone());
                let tokens = tape.constant(sample.tokens.clone());
                let z = model.encode_program(&mut tape, &staged, input, &visible);
                let recon = model.decode_program(&mut tape, &staged, z);
                let loss = tape.weighted_mse(recon, tokens, weights.clone(), denom);
                let grads = tape.backward(loss);
                let g: Vec<Tensor> = (0..model.store.len())
                    .map(|p| {
                        grads.wrt_or_zeros(
                            staged.id(p),
                            model.store.get(p).rows(),
                            model.store.get(p).cols(),
                        )
                    })
                    .collect();
                (tape.scalar(loss), g)
            },
            |acc, (l, g)| {
                let (ls, gs) = acc;
                let gs = match gs {
                    None => Some(g),
                    Some(mut total) => {
                        for (t, n) in total.iter_mut().zip(&g) {
                            t.add_in_place(n);
                        }
                        Some(total)
                    }
                };
                (ls + l, gs)
            },
        );
        let loss = loss_sum / tc.batch as f64;
        if !loss.is_finite() {
            return Err(CoreError::DivergenceDetected { step, loss });
        }
        let mut grads = grad_sum.expect("nonempty batch");
        let scale = 1.0 / tc.batch as f64;
        for g in &mut grads {
            g.scale_in_place(scale);
        }
        opt.step(&mut model.store, &grads)?;
        if let Some(e) = ema.as_mut() {
            e.update(&model.store);
        }
        log.push(StepLog { step, loss, lr });
    }
    if let Some(e) = ema {
        e.write_back(&mut model.store);
    }
    Ok(log)
}
