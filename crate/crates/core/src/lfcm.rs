//! Stage II model: the latent factorization and composition module.
//!
//! The frozen autoencoder latent `z` is projected to the code width and
//! conditioned additively with a subject embedding and a dataset embedding.
//! The factorizer's learnable queries cross-attend to the conditioned tokens
//! and split into a content code `c` (aligned to the stimulus target) and a
//! single-row nuisance code `n` (everything else: subject identity, dataset
//! idiosyncrasies, measurement noise). The compositor inverts the split,
//! rebuilding a latent from any (content, nuisance) pairing under explicit
//! conditioning.
//!
//! Subject embedding index `n_subjects` is the default embedding: training
//! occasionally substitutes it for the true one so that factorization under
//! unknown identity lands in-distribution at inference time.

use crate::container::{config_fingerprint, Container};
use crate::error::{CoreError, Result};
use crate::nn::{CrossBlock, LayerNorm, Linear, TokenBank};
use crate::params::{ParamStore, Staged};
use crate::seeding;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LfcmConfig {
    /// Code width shared by content and nuisance tokens.
    pub d_c: usize,
    /// Number of content tokens.
    pub content_tokens: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Probability of swapping in the default subject embedding when
    /// factorizing a real latent during training.
    pub default_replace_prob: f64,
    /// Condition on subject embeddings. Off drops the subject pathway
    /// entirely: every identity maps to the same unconditioned program.
    pub use_subject: bool,
    /// Condition on dataset embeddings.
    pub use_dataset: bool,
    pub init_seed: u64,
}

impl Default for LfcmConfig {
    fn default() -> Self {
        LfcmConfig {
            d_c: 64,
            content_tokens: 4,
            blocks: 2,
            heads: 4,
            ffn_mult: 2,
            default_replace_prob: 0.05,
            use_subject: true,
            use_dataset: true,
            init_seed: 202,
        }
    }
}

impl LfcmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_c == 0 || self.heads == 0 || self.d_c % self.heads != 0 {
            return Err(CoreError::InvalidConfig(format!(
                "d_c {} must be a positive multiple of heads {}",
                self.d_c, self.heads
            )));
        }
        if self.content_tokens == 0 {
            return Err(CoreError::InvalidConfig("content_tokens must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.default_replace_prob) {
            return Err(CoreError::InvalidConfig(format!(
                "default_replace_prob {} outside [0, 1]",
                self.default_replace_prob
            )));
        }
        Ok(())
    }
}

/// Subject conditioning for factorization and composition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubjectToken {
    Seen(usize),
    /// The shared fallback embedding used when identity is unknown.
    Default,
}

#[derive(Debug, Clone)]
pub struct Lfcm {
    pub cfg: LfcmConfig,
    pub store: ParamStore,
    n_subjects: usize,
    n_datasets: usize,
    latent_rows: usize,
    latent_cols: usize,
    in_proj: Linear,
    subj_emb: TokenBank,
    data_emb: TokenBank,
    fact_queries: TokenBank,
    fact_blocks: Vec<CrossBlock>,
    fact_ln: LayerNorm,
    comp_queries: TokenBank,
    comp_blocks: Vec<CrossBlock>,
    comp_ln: LayerNorm,
    out_proj: Linear,
}

impl Lfcm {
    /// `latent_rows x latent_cols` is the autoencoder latent shape;
    /// `n_subjects` counts seen subjects only (the default embedding is extra).
    pub fn init(cfg: LfcmConfig, latent_rows: usize, latent_cols: usize, n_subjects: usize, n_datasets: usize) -> Result<Lfcm> {
        cfg.validate()?;
        if n_subjects == 0 || n_datasets == 0 {
            return Err(CoreError::InvalidConfig("need at least one subject and dataset".into()));
        }
        let mut rng = seeding::rng_for(cfg.init_seed, "lfcm-init");
        let mut store = ParamStore::new();
        let d = cfg.d_c;
        let hidden = d * cfg.ffn_mult;
        let in_proj = Linear::init(&mut store, "in", latent_cols, d, &mut rng);
        let subj_emb = TokenBank::init(&mut store, "emb.subject", n_subjects + 1, d, 0.02, &mut rng);
        let data_emb = TokenBank::init(&mut store, "emb.dataset", n_datasets, d, 0.02, &mut rng);
        let fact_queries = TokenBank::init(&mut store, "fact.queries", cfg.content_tokens + 1, d, 0.02, &mut rng);
        let fact_blocks = (0..cfg.blocks)
            .map(|i| CrossBlock::init(&mut store, &format!("fact.{i}"), d, cfg.heads, hidden, &mut rng))
            .collect();
        let fact_ln = LayerNorm::init(&mut store, "fact.ln_out", d);
        let comp_queries = TokenBank::init(&mut store, "comp.queries", latent_rows, d, 0.02, &mut rng);
        let comp_blocks = (0..cfg.blocks)
            .map(|i| CrossBlock::init(&mut store, &format!("comp.{i}"), d, cfg.heads, hidden, &mut rng))
            .collect();
        let comp_ln = LayerNorm::init(&mut store, "comp.ln_out", d);
        let out_proj = Linear::init(&mut store, "out", d, latent_cols, &mut rng);
        Ok(Lfcm {
            cfg,
            store,
            n_subjects,
            n_datasets,
            latent_rows,
            latent_cols,
            in_proj,
            subj_emb,
            data_emb,
            fact_queries,
            fact_blocks,
            fact_ln,
            comp_queries,
            comp_blocks,
            comp_ln,
            out_proj,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    pub fn n_datasets(&self) -> usize {
        self.n_datasets
    }

    /// Content code shape.
    pub fn code_shape(&self) -> (usize, usize) {
        (self.cfg.content_tokens, self.cfg.d_c)
    }

    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> Staged {
        self.store.stage(tape, trainable)
    }

    fn subj_row(&self, tape: &mut Tape, staged: &Staged, tok: SubjectToken) -> NodeId {
        let idx = match tok {
            SubjectToken::Seen(s) => {
                assert!(s < self.n_subjects, "subject index out of range");
                s
            }
            SubjectToken::Default => self.n_subjects,
        };
        self.subj_emb.row(tape, staged, idx)
    }

    fn conditioned(&self, tape: &mut Tape, staged: &Staged, tokens: NodeId, subj: SubjectToken, ds: usize) -> NodeId {
        assert!(ds < self.n_datasets, "dataset index out of range");
        let mut h = tokens;
        if self.cfg.use_subject {
            let s = self.subj_row(tape, staged, subj);
            h = tape.add_row(h, s);
        }
        if self.cfg.use_dataset {
            let d = self.data_emb.row(tape, staged, ds);
            h = tape.add_row(h, d);
        }
        h
    }

    /// Factorizer program: latent node to `(content, nuisance)` nodes.
    pub fn factorize_program(&self, tape: &mut Tape, staged: &Staged, z: NodeId, subj: SubjectToken, ds: usize) -> (NodeId, NodeId) {
        let h = self.in_proj.apply(tape, staged, z);
        let h = self.conditioned(tape, staged, h, subj, ds);
        let mut q = staged.id(self.fact_queries.table);
        for blk in &self.fact_blocks {
            q = blk.apply(tape, staged, q, h);
        }
        let q = self.fact_ln.apply(tape, staged, q);
        let c = tape.slice_rows(q, 0, self.cfg.content_tokens);
        let n = tape.slice_rows(q, self.cfg.content_tokens, 1);
        (c, n)
    }

    /// Compositor program: `(content, nuisance)` nodes to a rebuilt latent.
    pub fn compose_program(&self, tape: &mut Tape, staged: &Staged, c: NodeId, n: NodeId, subj: SubjectToken, ds: usize) -> NodeId {
        self.compose_program_opt(tape, staged, c, Some(n), subj, ds)
    }

    /// Compositor with an optional nuisance row; `None` feeds content alone,
    /// which is the nuisance-ablated pathway.
    pub fn compose_program_opt(&self, tape: &mut Tape, staged: &Staged, c: NodeId, n: Option<NodeId>, subj: SubjectToken, ds: usize) -> NodeId {
        let ctx = match n {
            Some(n) => tape.concat_rows(&[c, n]),
            None => c,
        };
        let ctx = self.conditioned(tape, staged, ctx, subj, ds);
        let mut q = staged.id(self.comp_queries.table);
        for blk in &self.comp_blocks {
            q = blk.apply(tape, staged, q, ctx);
        }
        let q = self.comp_ln.apply(tape, staged, q);
        self.out_proj.apply(tape, staged, q)
    }

    /// Factorize without gradients.
    pub fn factorize(&self, z: &Tensor, subj: SubjectToken, ds: usize) -> (Tensor, Tensor) {
        assert_eq!(z.shape(), (self.latent_rows, self.latent_cols), "latent shape");
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape, false);
        let zn = tape.constant(z.clone());
        let (c, n) = self.factorize_program(&mut tape, &staged, zn, subj, ds);
        (tape.value(c).clone(), tape.value(n).clone())
    }

    /// Compose without gradients.
    pub fn compose(&self, c: &Tensor, n: &Tensor, subj: SubjectToken, ds: usize) -> Tensor {
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape, false);
        let cn = tape.constant(c.clone());
        let nn = tape.constant(n.clone());
        let z = self.compose_program(&mut tape, &staged, cn, nn, subj, ds);
        tape.value(z).clone()
    }

    pub fn save_to(&self, path: &Path, ae_fp: &str) -> Result<()> {
        let fp = config_fingerprint(&self.cfg);
        let meta = serde_json::json!({
            "kind": "lfcm",
            "config": serde_json::to_value(&self.cfg)?,
            "ae_fp": ae_fp,
            "n_subjects": self.n_subjects,
            "n_datasets": self.n_datasets,
            "latent_rows": self.latent_rows,
            "latent_cols": self.latent_cols,
        });
        let mut c = Container::new(&fp, meta);
        for (name, t) in self.store.entries() {
            c.push(name, t.clone());
        }
        c.write_to(path)
    }

    pub fn load_from(path: &Path) -> Result<Lfcm> {
        let c = Container::read_from(path)?;
        if c.meta_str("kind") != Some("lfcm") {
            return Err(CoreError::Io(format!("{}: not a factorizer file", path.display())));
        }
        let cfg: LfcmConfig = serde_json::from_value(
            c.meta
                .get("config")
                .cloned()
                .ok_or_else(|| CoreError::Io("factorizer file has no config".into()))?,
        )?;
        c.check_fingerprint(&config_fingerprint(&cfg))?;
        let get = |k: &str| {
            c.meta_u64(k)
                .map(|v| v as usize)
                .ok_or_else(|| CoreError::Io(format!("factorizer file lacks `{k}`")))
        };
        let mut model = Lfcm::init(cfg, get("latent_rows")?, get("latent_cols")?, get("n_subjects")?, get("n_datasets")?)?;
        model.store.load_entries(&c.tensors)?;
        Ok(model)
    }

    /// The stored fingerprint of the autoencoder this model was trained
    /// against, if the file recorded one.
    pub fn load_meta_ae_fp(path: &Path) -> Result<Option<String>> {
        let c = Container::read_from(path)?;
        Ok(c.meta_str("ae_fp").map(|s| s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> Lfcm {
        Lfcm::init(
            LfcmConfig { d_c: 8, content_tokens: 2, blocks: 1, heads: 2, ffn_mult: 2, ..Default::default() },
            3,
            6,
            4,
            2,
        )
        .unwrap()
    }

    #[test]
    fn factorize_and_compose_shapes() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::randn(3, 6, 1.0, &mut rng);
        let (c, n) = m.factorize(&z, SubjectToken::Seen(0), 1);
        assert_eq!(c.shape(), (2, 8));
        assert_eq!(n.shape(), (1, 8));
        let zt = m.compose(&c, &n, SubjectToken::Seen(0), 1);
        assert_eq!(zt.shape(), (3, 6));
    }

    #[test]
    fn conditioning_changes_output() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Tensor::randn(3, 6, 1.0, &mut rng);
        let (c0, _) = m.factorize(&z, SubjectToken::Seen(0), 0);
        let (c1, _) = m.factorize(&z, SubjectToken::Seen(1), 0);
        let (cd, _) = m.factorize(&z, SubjectToken::Default, 0);
        let diff01: f64 = c0.data().iter().zip(c1.data()).map(|(a, b)| (a - b).abs()).sum();
        let diff0d: f64 = c0.data().iter().zip(cd.data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff01 > 1e-9);
        assert!(diff0d > 1e-9);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lfcm.ntc");
        m.save_to(&path, "aefp").unwrap();
        let back = Lfcm::load_from(&path).unwrap();
        for (x, y) in m.store.to_flat().iter().zip(back.store.to_flat()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(Lfcm::load_meta_ae_fp(&path).unwrap().as_deref(), Some("aefp"));
    }

    #[test]
    fn dropped_conditioning_ignores_identity() {
        let m = Lfcm::init(
            LfcmConfig {
                d_c: 8,
                content_tokens: 2,
                blocks: 1,
                heads: 2,
                ffn_mult: 2,
                use_subject: false,
                use_dataset: false,
                ..Default::default()
            },
            3,
            6,
            4,
            2,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor::randn(3, 6, 1.0, &mut rng);
        let (c0, _) = m.factorize(&z, SubjectToken::Seen(0), 0);
        let (c1, _) = m.factorize(&z, SubjectToken::Seen(2), 1);
        let (cd, _) = m.factorize(&z, SubjectToken::Default, 1);
        assert_eq!(c0.data(), c1.data());
        assert_eq!(c0.data(), cd.data());
    }

    #[test]
    fn out_of_range_subject_panics() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Tensor::randn(3, 6, 1.0, &mut rng);
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            m.factorize(&z, SubjectToken::Seen(9), 0)
        }));
        assert!(r.is_err());
    }
}
