//! Stage III: decoding responses from subjects the models never trained on.
//!
//! An unknown subject's response is encoded and factorized under the default
//! subject embedding. Because no single embedding is right, the sweep
//! re-factorizes under every seen subject's embedding as well, rescales each
//! content code to the training moments, and averages. Readout is cosine
//! retrieval against a bank of stimulus targets, which stands in for a
//! generative readout: scores rank candidate stimuli directly.

use crate::error::{CoreError, Result};
use crate::exec::{self, ExecMode};
use crate::lfcm::{Lfcm, SubjectToken};
use crate::synthworld::World;
use crate::tensor::Tensor;
use crate::training::RescaleStats;
use crate::univae::UniVae;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferenceSettings {
    /// Aggregate content codes over all subject embeddings instead of using
    /// only the default embedding.
    pub sweep: bool,
    /// Rescale each content code to the training moments before aggregation.
    pub rescale: bool,
}

impl Default for InferenceSettings {
    fn default() -> Self {
        InferenceSettings { sweep: true, rescale: true }
    }
}

/// Whether the decoder may use a subject's trained embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeIdentity {
    Known(usize),
    Unknown,
}

pub struct Decoder<'a> {
    pub ae: &'a UniVae,
    pub lfcm: &'a Lfcm,
    pub stats: Option<&'a RescaleStats>,
    pub settings: InferenceSettings,
}

impl<'a> Decoder<'a> {
    pub fn new(ae: &'a UniVae, lfcm: &'a Lfcm, stats: Option<&'a RescaleStats>, settings: InferenceSettings) -> Result<Self> {
        if settings.rescale && stats.is_none() {
            return Err(CoreError::MissingStats(0));
        }
        Ok(Decoder { ae, lfcm, stats, settings })
    }

    fn finalize(&self, c: Tensor) -> Tensor {
        match (self.settings.rescale, self.stats) {
            (true, Some(stats)) => stats.apply(&c),
            _ => c,
        }
    }

    /// Decode a token matrix to an aggregated content code.
    pub fn code_for_tokens(&self, tokens: &Tensor, identity: DecodeIdentity, ds: usize) -> Tensor {
        let z = self.ae.encode(tokens);
        match identity {
            DecodeIdentity::Known(s) => {
                let (c, _) = self.lfcm.factorize(&z, SubjectToken::Seen(s), ds);
                self.finalize(c)
            }
            DecodeIdentity::Unknown => {
                let mut tokens_to_try = vec![SubjectToken::Default];
                if self.settings.sweep {
                    for s in 0..self.lfcm.n_subjects() {
                        tokens_to_try.push(SubjectToken::Seen(s));
                    }
                }
                let mut acc: Option<Tensor> = None;
                let count = tokens_to_try.len() as f64;
                for tok in tokens_to_try {
                    let (c, _) = self.lfcm.factorize(&z, tok, ds);
                    let c = self.finalize(c);
                    match &mut acc {
                        None => acc = Some(c),
                        Some(a) => a.add_in_place(&c),
                    }
                }
                let mut out = acc.expect("at least the default candidate");
                out.scale_in_place(1.0 / count);
                out
            }
        }
    }

    /// Render-and-decode for a batch of world cells; results in cell order.
    pub fn codes_for_cells(
        &self,
        world: &World,
        cells: &[(usize, usize, usize, u64)],
        identity_of: impl Fn(usize) -> DecodeIdentity + Sync,
        mode: ExecMode,
    ) -> Vec<Tensor> {
        exec::map_indexed(mode, cells.len(), |i| {
            let (stim, subj, ds, trial) = cells[i];
            let grid = world.render(stim, subj, ds, trial);
            let tokens = world.surface.patchify(&grid);
            self.code_for_tokens(&tokens, identity_of(subj), ds)
        })
    }
}

/// Retrieval bank: candidate targets, typically one per stimulus in the world.
#[derive(Debug, Clone)]
pub struct TargetBank {
    targets: Vec<Tensor>,
}

impl TargetBank {
    pub fn from_world(world: &World) -> Self {
        let targets = (0..world.n_stimuli()).map(|k| world.visual_target(k)).collect();
        TargetBank { targets }
    }

    pub fn from_targets(targets: Vec<Tensor>) -> Self {
        assert!(!targets.is_empty(), "empty target bank");
        TargetBank { targets }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn target(&self, k: usize) -> &Tensor {
        &self.targets[k]
    }

    /// Cosine similarity of a code against every bank entry.
    pub fn scores(&self, code: &Tensor) -> Vec<f64> {
        self.targets.iter().map(|t| cosine(code, t)).collect()
    }

    pub fn top1(&self, code: &Tensor) -> usize {
        let scores = self.scores(code);
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        best
    }
}

/// Cosine similarity over flattened entries, zero-safe.
pub fn cosine(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "cosine shape");
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = (na.sqrt() * nb.sqrt()).max(1e-12);
    dot / denom
}
