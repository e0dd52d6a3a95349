//! Transformer building blocks expressed as tape programs.
//!
//! Each block holds parameter *indices* into a [`ParamStore`]; the owning
//! model stages the store onto a fresh tape per forward pass and the blocks
//! emit their ops against the staged ids. Attention splits heads by column
//! slicing, so head count must divide the model width.

use crate::params::{ParamStore, Staged};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Dense layer `x @ w + b` with Xavier-normal init.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn init(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let w = store.insert(&format!("{prefix}.w"), Tensor::randn(fan_in, fan_out, std, rng));
        let b = store.insert(&format!("{prefix}.b"), Tensor::zeros(1, fan_out));
        Linear { w, b }
    }

    pub fn apply(&self, tape: &mut Tape, staged: &Staged, x: NodeId) -> NodeId {
        let h = tape.matmul(x, staged.id(self.w));
        tape.add_row(h, staged.id(self.b))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: usize,
    pub bias: usize,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        let gain = store.insert(&format!("{prefix}.gain"), Tensor::from_vec(1, dim, vec![1.0; dim]));
        let bias = store.insert(&format!("{prefix}.bias"), Tensor::zeros(1, dim));
        LayerNorm { gain, bias }
    }

    pub fn apply(&self, tape: &mut Tape, staged: &Staged, x: NodeId) -> NodeId {
        tape.layer_norm(x, staged.id(self.gain), staged.id(self.bias))
    }
}

/// Multi-head attention. Queries come from `q_in`, keys and values from
/// `kv_in`; self-attention passes the same node for both.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(dim % heads == 0, "heads must divide width");
        Attention {
            q: Linear::init(store, &format!("{prefix}.q"), dim, dim, rng),
            k: Linear::init(store, &format!("{prefix}.k"), dim, dim, rng),
            v: Linear::init(store, &format!("{prefix}.v"), dim, dim, rng),
            o: Linear::init(store, &format!("{prefix}.o"), dim, dim, rng),
            heads,
            dim,
        }
    }

    pub fn apply(&self, tape: &mut Tape, staged: &Staged, q_in: NodeId, kv_in: NodeId) -> NodeId {
        let q = self.q.apply(tape, staged, q_in);
        let k = self.k.apply(tape, staged, kv_in);
        let v = self.v.apply(tape, staged, kv_in);
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut ctx = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * hd, hd);
            let kh = tape.slice_cols(k, h * hd, hd);
            let vh = tape.slice_cols(v, h * hd, hd);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            ctx.push(tape.matmul(attn, vh));
        }
        let joined = tape.concat_cols(&ctx);
        self.o.apply(tape, staged, joined)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ffn {
    pub l1: Linear,
    pub l2: Linear,
}

impl Ffn {
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Ffn {
            l1: Linear::init(store, &format!("{prefix}.l1"), dim, hidden, rng),
            l2: Linear::init(store, &format!("{prefix}.l2"), hidden, dim, rng),
        }
    }

    pub fn apply(&self, tape: &mut Tape, staged: &Staged, x: NodeId) -> NodeId {
        let h = self.l1.apply(tape, staged, x);
        let h = tape.gelu(h);
        self.l2.apply(tape, staged, h)
    }
}

/// Pre-norm self-attention block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelfBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: Ffn,
}

impl SelfBlock {
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        SelfBlock {
            ln1: LayerNorm::init(store, &format!("{prefix}.ln1"), dim),
            attn: Attention::init(store, &format!("{prefix}.attn"), dim, heads, rng),
            ln2: LayerNorm::init(store, &format!("{prefix}.ln2"), dim),
            ffn: Ffn::init(store, &format!("{prefix}.ffn"), dim, hidden, rng),
        }
    }

    pub fn apply(&self, tape: &mut Tape, staged: &Staged, x: NodeId) -> NodeId {
        let n = self.ln1.apply(tape, staged, x);
        let a = self.attn.apply(tape, staged, n, n);
        let x = tape.add(x, a);
        let n = self.ln2.apply(tape, staged, x);
        let f = self.ffn.apply(tape, staged, n);
        tape.add(x, f)
    }
}

/// Pre-norm cross-attention block: queries update by attending to a fixed
/// context, then pass through an FFN. Context is normalized with its own
/// gain/bias since it lives in a different representation space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossBlock {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: Ffn,
}

impl CrossBlock {
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        CrossBlock {
            ln_q: LayerNorm::init(store, &format!("{prefix}.ln_q"), dim),
            ln_kv: LayerNorm::init(store, &format!("{prefix}.ln_kv"), dim),
            attn: Attention::init(store, &format!("{prefix}.attn"), dim, heads, rng),
            ln2: LayerNorm::init(store, &format!("{prefix}.ln2"), dim),
            ffn: Ffn::init(store, &format!("{prefix}.ffn"), dim, hidden, rng),
        }
    }

    pub fn apply(&self, tape: &mut Tape, staged: &Staged, q: NodeId, ctx: NodeId) -> NodeId {
        let qn = self.ln_q.apply(tape, staged, q);
        let cn = self.ln_kv.apply(tape, staged, ctx);
        let a = self.attn.apply(tape, staged, qn, cn);
        let q = tape.add(q, a);
        let n = self.ln2.apply(tape, staged, q);
        let f = self.ffn.apply(tape, staged, n);
        tape.add(q, f)
    }
}

/// Learnable query/token bank stored as one `n x dim` matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenBank {
    pub table: usize,
    pub n: usize,
    pub dim: usize,
}

impl TokenBank {
    pub fn init(store: &mut ParamStore, name: &str, n: usize, dim: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let table = store.insert(name, Tensor::randn(n, dim, std, rng));
        TokenBank { table, n, dim }
    }

    /// The whole bank as one node.
    pub fn all(&self, staged: &Staged) -> NodeId {
        staged.id(self.table)
    }

    /// One row as a `1 x dim` node.
    pub fn row(&self, tape: &mut Tape, staged: &Staged, idx: usize) -> NodeId {
        assert!(idx < self.n, "token index out of range");
        tape.slice_rows(staged.id(self.table), idx, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn fd_check_param(
        build: &dyn Fn(&ParamStore) -> f64,
        store: &mut ParamStore,
        idx: usize,
        analytic: &Tensor,
        h: f64,
        tol: f64,
    ) {
        for i in 0..store.get(idx).len() {
            let orig = store.get(idx).data()[i];
            store.get_mut(idx).data_mut()[i] = orig + h;
            let fp = build(store);
            store.get_mut(idx).data_mut()[i] = orig - h;
            let fm = build(store);
            store.get_mut(idx).data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic.data()[i];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!(
                (fd - an).abs() / denom < tol,
                "param {idx} elem {i}: fd {fd} vs analytic {an}"
            );
        }
    }

    /// Gradients through a full self-attention block match finite differences
    /// for every parameter.
    #[test]
    fn self_block_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let block = SelfBlock::init(&mut store, "blk", 4, 2, 8, &mut rng);
        let x0 = Tensor::randn(3, 4, 0.8, &mut rng);
        let tgt = Tensor::randn(3, 4, 0.8, &mut rng);

        let loss_of = |store: &ParamStore| -> f64 {
            let mut tape = Tape::new();
            let staged = store.stage(&mut tape, false);
            let x = tape.constant(x0.clone());
            let t = tape.constant(tgt.clone());
            let y = block.apply(&mut tape, &staged, x);
            let l = tape.mse(y, t);
            tape.scalar(l)
        };

        let mut tape = Tape::new();
        let staged = store.stage(&mut tape, true);
        let x = tape.constant(x0.clone());
        let t = tape.constant(tgt.clone());
        let y = block.apply(&mut tape, &staged, x);
        let l = tape.mse(y, t);
        let grads = tape.backward(l);

        for idx in 0..store.len() {
            let g = grads.wrt_or_zeros(staged.id(idx), store.get(idx).rows(), store.get(idx).cols());
            fd_check_param(&loss_of, &mut store, idx, &g, 1e-5, 2e-4);
        }
    }

    /// Cross-attention: gradient flows to queries, context, and parameters.
    #[test]
    fn cross_block_routes_gradient_to_both_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut store = ParamStore::new();
        let block = CrossBlock::init(&mut store, "xb", 4, 2, 8, &mut rng);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape, true);
        let q = tape.leaf(Tensor::randn(2, 4, 1.0, &mut rng), true);
        let ctx = tape.leaf(Tensor::randn(5, 4, 1.0, &mut rng), true);
        let t = tape.constant(Tensor::zeros(2, 4));
        let y = block.apply(&mut tape, &staged, q, ctx);
        let l = tape.mse(y, t);
        let grads = tape.backward(l);
        assert!(grads.wrt(q).is_some());
        assert!(grads.wrt(ctx).is_some());
        assert!(grads.wrt(staged.id(block.attn.q.w)).is_some());
    }

    #[test]
    fn attention_output_shape_follows_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut store = ParamStore::new();
        let attn = Attention::init(&mut store, "a", 8, 4, &mut rng);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape, false);
        let q = tape.constant(Tensor::randn(3, 8, 1.0, &mut rng));
        let kv = tape.constant(Tensor::randn(7, 8, 1.0, &mut rng));
        let out = attn.apply(&mut tape, &staged, q, kv);
        assert_eq!(tape.value(out).shape(), (3, 8));
    }

    #[test]
    fn token_bank_row_is_table_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut store = ParamStore::new();
        let bank = TokenBank::init(&mut store, "emb", 5, 3, 0.02, &mut rng);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape, false);
        let row = bank.row(&mut tape, &staged, 2);
        assert_eq!(tape.value(row).shape(), (1, 3));
        assert_eq!(tape.value(row).data(), store.get(bank.table).row(2));
    }
}
