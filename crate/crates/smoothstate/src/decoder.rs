//! Causal transformer decoder producing query states from masked state
//! embeddings and action embeddings.
//!
//! States and actions are embedded to the shared dimension d, interleaved as
//! [s_0, a_0, s_1, a_1, ...], and summed with a sinusoidal positional table
//! in which pair i contributes its encoding twice (once for the state token,
//! once for the action token). Blocks are pre-norm: layer norm, masked
//! multi-head self-attention, residual, layer norm, 4d feed-forward,
//! residual. Token k attends to indices <= k, so the state read at index 2i
//! sees states up to i and actions strictly before i. Query states are
//! gathered at even token indices and passed through a two-layer projection
//! head. The decoder exists only for the training path.

use rand::Rng;

use crate::layers::{uniform_init, LayerNormLayer, Linear};
use crate::param::{ParamId, ParamStore};
use crate::tape::{sinusoidal_table, Tape, VarId};
use crate::tensor::Tensor;

const NEG_MASK: f64 = -1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub d: usize,
    /// Projection-head hidden width.
    pub mlp_hidden: usize,
}

impl DecoderConfig {
    pub fn new(depth: usize, heads: usize, d: usize, mlp_hidden: usize) -> Self {
        assert!(depth >= 1, "decoder depth must be >= 1");
        assert!(heads >= 1 && d % heads == 0, "token dim {d} not divisible by heads {heads}");
        DecoderConfig { depth, heads, d, mlp_hidden }
    }
}

/// Linear map from one-hot action id to a d-dimensional token.
#[derive(Clone, Debug)]
pub struct ActionEmbedder {
    pub weight: ParamId,
    pub bias: ParamId,
    pub n_actions: usize,
    pub d: usize,
}

impl ActionEmbedder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, n_actions: usize, d: usize, rng: &mut R) -> Self {
        let weight =
            store.add(format!("{name}.w"), uniform_init(vec![n_actions, d], n_actions, rng));
        let bias = store.add(format!("{name}.b"), uniform_init(vec![d], n_actions, rng));
        ActionEmbedder { weight, bias, n_actions, d }
    }

    /// actions (flattened, length N) -> tokens (N, d).
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, actions: &[usize]) -> VarId {
        for &a in actions {
            assert!(a < self.n_actions, "action id {a} out of range 0..{}", self.n_actions);
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let rows = tape.gather_rows(w, actions);
        tape.add_bias(rows, b)
    }
}

/// Interleaved state-action token batch of shape (B, 2F, d).
pub struct TokenSequence {
    pub tokens: VarId,
    pub b: usize,
    pub f: usize,
    pub d: usize,
}

/// Builds the interleaved token sequence with duplicated positional pairs.
///
/// `states` has shape (B, F, d); `actions` is row-major (B, F).
pub fn build_token_sequence(
    tape: &mut Tape,
    store: &ParamStore,
    states: VarId,
    actions: &[usize],
    embedder: &ActionEmbedder,
) -> TokenSequence {
    let shape = tape.shape(states).to_vec();
    assert_eq!(shape.len(), 3, "build_token_sequence: states must be (B,F,d), got {shape:?}");
    let (b, f, d) = (shape[0], shape[1], shape[2]);
    assert_eq!(
        actions.len(),
        b * f,
        "build_token_sequence: {} actions for {}x{} sequence slots",
        actions.len(),
        b,
        f
    );
    let s_flat = tape.reshape(states, vec![b * f, d]);
    let a_flat = embedder.embed(tape, store, actions);
    let stacked = tape.concat_rows(&[s_flat, a_flat]);
    let mut idx = Vec::with_capacity(2 * b * f);
    for bi in 0..b {
        for i in 0..f {
            idx.push(bi * f + i); // state row
            idx.push(b * f + bi * f + i); // action row
        }
    }
    let interleaved = tape.gather_rows(stacked, &idx);

    let table = sinusoidal_table(f, d);
    let mut pos = Tensor::zeros(vec![2 * b * f, d]);
    for bi in 0..b {
        for i in 0..f {
            let src = &table.data[i * d..(i + 1) * d];
            let r0 = (bi * 2 * f + 2 * i) * d;
            pos.data[r0..r0 + d].copy_from_slice(src);
            pos.data[r0 + d..r0 + 2 * d].copy_from_slice(src);
        }
    }
    let pos = tape.constant(pos);
    let sum = tape.add(interleaved, pos);
    let tokens = tape.reshape(sum, vec![b, 2 * f, d]);
    TokenSequence { tokens, b, f, d }
}

struct Block {
    ln1: LayerNormLayer,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNormLayer,
    ff1: Linear,
    ff2: Linear,
}

/// The transformer decoder plus projection head.
pub struct Decoder {
    pub cfg: DecoderConfig,
    blocks: Vec<Block>,
    proj1: Linear,
    proj2: Linear,
}

impl Decoder {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: DecoderConfig, rng: &mut R) -> Self {
        let d = cfg.d;
        let blocks = (0..cfg.depth)
            .map(|i| {
                let p = format!("{prefix}.layer{i}");
                Block {
                    ln1: LayerNormLayer::new(store, &format!("{p}.ln1"), d),
                    wq: Linear::new(store, &format!("{p}.attn.q"), d, d, rng),
                    wk: Linear::new(store, &format!("{p}.attn.k"), d, d, rng),
                    wv: Linear::new(store, &format!("{p}.attn.v"), d, d, rng),
                    wo: Linear::new(store, &format!("{p}.attn.o"), d, d, rng),
                    ln2: LayerNormLayer::new(store, &format!("{p}.ln2"), d),
                    ff1: Linear::new(store, &format!("{p}.ff1"), d, 4 * d, rng),
                    ff2: Linear::new(store, &format!("{p}.ff2"), 4 * d, d, rng),
                }
            })
            .collect();
        let proj1 = Linear::new(store, &format!("{prefix}.proj1"), d, cfg.mlp_hidden, rng);
        let proj2 = Linear::new(store, &format!("{prefix}.proj2"), cfg.mlp_hidden, d, rng);
        Decoder { cfg, blocks, proj1, proj2 }
    }

    /// Additive causal mask: 0 at or below the diagonal, a large negative
    /// constant above it. Finite so that fully masked rows cannot produce
    /// NaN; none occur here since the diagonal is always visible.
    fn causal_mask(t: usize) -> Tensor {
        let mut m = Tensor::zeros(vec![t, t]);
        for i in 0..t {
            for j in (i + 1)..t {
                m.data[i * t + j] = NEG_MASK;
            }
        }
        m
    }

    /// tokens (B, 2F, d) -> query states (B, F, d), read at even indices.
    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, seq: &TokenSequence) -> VarId {
        let (b, f, d) = (seq.b, seq.f, seq.d);
        assert_eq!(d, self.cfg.d, "token dim {d} vs decoder dim {}", self.cfg.d);
        let t = 2 * f;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mask = tape.constant(Self::causal_mask(t));

        let flat = tape.reshape(seq.tokens, vec![b * t, d]);
        let mut outputs = Vec::with_capacity(b);
        let even_idx: Vec<usize> = (0..f).map(|i| 2 * i).collect();
        for bi in 0..b {
            let mut x = tape.slice_rows(flat, bi * t, t);
            for block in &self.blocks {
                let h = block.ln1.forward(tape, store, x);
                let q = block.wq.forward(tape, store, h);
                let k = block.wk.forward(tape, store, h);
                let v = block.wv.forward(tape, store, h);
                let mut head_outs = Vec::with_capacity(heads);
                for hi in 0..heads {
                    let qh = tape.slice_cols(q, hi * dh, dh);
                    let kh = tape.slice_cols(k, hi * dh, dh);
                    let vh = tape.slice_cols(v, hi * dh, dh);
                    let kt = tape.transpose(kh);
                    let scores = tape.matmul(qh, kt);
                    let scores = tape.scale(scores, scale);
                    let scores = tape.add(scores, mask);
                    let att = tape.softmax(scores);
                    head_outs.push(tape.matmul(att, vh));
                }
                let concat = tape.concat_cols(&head_outs);
                let attn_out = block.wo.forward(tape, store, concat);
                x = tape.add(x, attn_out);

                let h2 = block.ln2.forward(tape, store, x);
                let ff = block.ff1.forward(tape, store, h2);
                let ff = tape.relu(ff);
                let ff = block.ff2.forward(tape, store, ff);
                x = tape.add(x, ff);
            }
            outputs.push(tape.gather_rows(x, &even_idx));
        }
        let states = tape.concat_rows(&outputs);
        let p = self.proj1.forward(tape, store, states);
        let p = tape.relu(p);
        let p = self.proj2.forward(tape, store, p);
        tape.reshape(p, vec![b, f, d])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(
        d: usize,
        depth: usize,
        heads: usize,
        seed: u64,
    ) -> (ParamStore, ActionEmbedder, Decoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedder = ActionEmbedder::new(&mut store, "act", 5, d, &mut rng);
        let decoder = Decoder::new(&mut store, "dec", DecoderConfig::new(depth, heads, d, d), &mut rng);
        (store, embedder, decoder)
    }

    fn rand_states(b: usize, f: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng as _;
        Tensor::new(vec![b, f, d], (0..b * f * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn decode_value(
        store: &ParamStore,
        embedder: &ActionEmbedder,
        decoder: &Decoder,
        states: &Tensor,
        actions: &[usize],
    ) -> Tensor {
        let mut tape = Tape::new();
        let s = tape.constant(states.clone());
        let seq = build_token_sequence(&mut tape, store, s, actions, embedder);
        let out = decoder.decode(&mut tape, store, &seq);
        tape.value(out).clone()
    }

    #[test]
    fn token_order_is_interleaved_with_length_2f() {
        let d = 4;
        let (mut store, _, _) = setup(d, 1, 2, 0);
        // Zero the action embedder so action tokens are exactly zero,
        // making row contents easy to predict.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let embedder = ActionEmbedder::new(&mut store, "act0", 5, d, &mut rng);
        for id in store.ids_with_prefix("act0.") {
            for v in store.value_mut(id).data.iter_mut() {
                *v = 0.0;
            }
        }
        let f = 3;
        let states = Tensor::new(
            vec![1, f, d],
            (0..f * d).map(|i| (i / d) as f64 + 1.0).collect(), // row i filled with i+1
        );
        let mut tape = Tape::new();
        let s = tape.constant(states);
        let seq = build_token_sequence(&mut tape, &store, s, &[0, 1, 2], &embedder);
        assert_eq!(tape.shape(seq.tokens), &[1, 2 * f, d]);
        let table = sinusoidal_table(f, d);
        let toks = tape.value(seq.tokens);
        for i in 0..f {
            for j in 0..d {
                let p = table.data[i * d + j];
                let state_tok = toks.data[(2 * i) * d + j];
                let action_tok = toks.data[(2 * i + 1) * d + j];
                assert!((state_tok - ((i + 1) as f64 + p)).abs() < 1e-12);
                assert!((action_tok - p).abs() < 1e-12, "action token is positional only");
            }
        }
    }

    #[test]
    fn zero_inputs_reduce_to_positional_table() {
        let d = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let embedder = ActionEmbedder::new(&mut store, "act", 5, d, &mut rng);
        for id in store.ids_with_prefix("act.") {
            for v in store.value_mut(id).data.iter_mut() {
                *v = 0.0;
            }
        }
        let f = 4;
        let states = Tensor::zeros(vec![1, f, d]);
        let mut tape = Tape::new();
        let s = tape.constant(states);
        let seq = build_token_sequence(&mut tape, &store, s, &[0; 4], &embedder);
        let table = sinusoidal_table(f, d);
        let toks = tape.value(seq.tokens);
        for i in 0..f {
            for j in 0..d {
                let p = table.data[i * d + j];
                assert_eq!(toks.data[(2 * i) * d + j], p);
                assert_eq!(toks.data[(2 * i + 1) * d + j], p);
            }
        }
    }

    #[test]
    fn positional_vectors_are_duplicated_per_pair() {
        // tokens minus their content must agree within each (state, action) pair.
        let d = 8;
        let (store, embedder, _) = setup(d, 1, 2, 3);
        let f = 3;
        let states = rand_states(1, f, d, 7);
        let actions = [1usize, 3, 0];
        let mut tape = Tape::new();
        let s = tape.constant(states.clone());
        let seq = build_token_sequence(&mut tape, &store, s, &actions, &embedder);
        let toks = tape.value(seq.tokens).clone();
        // Recover content: state rows from input, action rows from the embedder.
        let mut t2 = Tape::new();
        let emb = embedder.embed(&mut t2, &store, &actions);
        let emb = t2.value(emb).clone();
        for i in 0..f {
            for j in 0..d {
                let pos_from_state = toks.data[(2 * i) * d + j] - states.data[i * d + j];
                let pos_from_action = toks.data[(2 * i + 1) * d + j] - emb.data[i * d + j];
                assert!((pos_from_state - pos_from_action).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pair_swap_with_positions_is_row_relabeling() {
        let d = 8;
        let (store, embedder, _) = setup(d, 1, 2, 4);
        let f = 4;
        let states = rand_states(1, f, d, 8);
        let actions = [0usize, 1, 2, 3];
        let mut tape = Tape::new();
        let s = tape.constant(states.clone());
        let seq = build_token_sequence(&mut tape, &store, s, &actions, &embedder);
        let base = tape.value(seq.tokens).clone();

        // Swap pairs 1 and 2 in the inputs, and swap the positional rows by
        // rebuilding content-only tokens and adding swapped positions.
        let table = sinusoidal_table(f, d);
        let mut swapped_states = states.clone();
        for j in 0..d {
            swapped_states.data.swap(d + j, 2 * d + j);
        }
        let mut swapped_actions = actions;
        swapped_actions.swap(1, 2);
        let mut t2 = Tape::new();
        let s2 = t2.constant(swapped_states);
        let seq2 = build_token_sequence(&mut t2, &store, s2, &swapped_actions, &embedder);
        let got = t2.value(seq2.tokens).clone();

        // got pair slot 1 = base pair 2 content + position 1; relabeling means
        // got(slot1) - p1 == base(slot2) - p2, for both tokens of the pair.
        for (slot, src) in [(1usize, 2usize), (2, 1)] {
            for tok in 0..2 {
                for j in 0..d {
                    let a = got.data[(2 * slot + tok) * d + j] - table.data[slot * d + j];
                    let b = base.data[(2 * src + tok) * d + j] - table.data[src * d + j];
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn output_shape_is_b_f_d() {
        let d = 8;
        let (store, embedder, decoder) = setup(d, 2, 4, 5);
        let out = decode_value(&store, &embedder, &decoder, &rand_states(2, 4, d, 1), &[0; 8]);
        assert_eq!(out.shape, vec![2, 4, d]);
    }

    /// Systematic single-token perturbation: state j influences outputs at
    /// i >= j only; action j influences outputs at i > j only.
    #[test]
    fn causal_visibility_sweep() {
        let d = 8;
        let f = 4;
        let (store, embedder, decoder) = setup(d, 2, 4, 6);
        let states = rand_states(1, f, d, 2);
        let actions = [1usize, 2, 3, 4];
        let base = decode_value(&store, &embedder, &decoder, &states, &actions);

        for j in 0..f {
            // Perturb state j.
            let mut s2 = states.clone();
            s2.data[j * d] += 0.5;
            let out = decode_value(&store, &embedder, &decoder, &s2, &actions);
            for i in 0..f {
                let diff: f64 = (0..d)
                    .map(|c| (out.data[i * d + c] - base.data[i * d + c]).abs())
                    .fold(0.0, f64::max);
                if i < j {
                    assert!(diff <= 1e-12, "state {j} leaked into output {i}: {diff}");
                } else if i == j {
                    assert!(diff > 1e-9, "output {i} ignores its own state");
                }
            }
            // Perturb action j by switching to a different id.
            let mut a2 = actions;
            a2[j] = if actions[j] == 0 { 1 } else { 0 };
            let out = decode_value(&store, &embedder, &decoder, &states, &a2);
            for i in 0..f {
                let diff: f64 = (0..d)
                    .map(|c| (out.data[i * d + c] - base.data[i * d + c]).abs())
                    .fold(0.0, f64::max);
                if i <= j {
                    assert!(diff <= 1e-12, "action {j} leaked into output {i}: {diff}");
                } else {
                    assert!(diff > 1e-9, "output {i} ignores visible action {j}");
                }
            }
        }
    }

    #[test]
    fn perturbing_first_state_moves_every_output() {
        let d = 8;
        let f = 4;
        let (store, embedder, decoder) = setup(d, 2, 4, 0);
        let states = rand_states(1, f, d, 3);
        let actions = [0usize, 1, 2, 3];
        let base = decode_value(&store, &embedder, &decoder, &states, &actions);
        // Single-entry perturbation: a uniform shift would be cancelled by
        // the pre-attention layer norm and never reach later tokens.
        let mut s2 = states.clone();
        s2.data[0] += 0.25;
        let out = decode_value(&store, &embedder, &decoder, &s2, &actions);
        for i in 0..f {
            let diff: f64 = (0..d)
                .map(|c| (out.data[i * d + c] - base.data[i * d + c]).abs())
                .fold(0.0, f64::max);
            assert!(diff > 1e-9, "output {i} did not respond to the first state");
        }
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let d = 8;
        let f = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let embedder = ActionEmbedder::new(&mut store, "act", 5, d, &mut rng);
        let decoder = Decoder::new(&mut store, "dec", DecoderConfig::new(1, 2, d, d), &mut rng);
        let states = rand_states(2, f, d, 4);
        let actions = vec![0usize, 1, 2, 3, 4, 0];
        let ids = store.ids();
        let report = crate::gradcheck::grad_check(
            &mut store,
            &ids,
            |tape, store| {
                let s = tape.constant(states.clone());
                let seq = build_token_sequence(tape, store, s, &actions, &embedder);
                let out = decoder.decode(tape, store, &seq);
                let flat = tape.reshape(out, vec![2 * f, d]);
                let sq = tape.mul(flat, flat);
                tape.mean_all(sq)
            },
            1e-5,
            1e-4,
        );
        assert!(report.passed(), "decoder gradcheck: {}", report.max_rel_err());
    }
}
