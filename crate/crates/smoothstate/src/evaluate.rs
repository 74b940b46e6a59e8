//! Held-out evaluation: per-distance similarity buckets with Spearman rank
//! correlation, and a closed-form linear probe from frozen embeddings to the
//! ground-truth dot position. Only the query encoder is used here; the
//! decoder never participates in evaluation.

use rand_chacha::ChaCha8Rng;

use crate::encoder::Encoder;
use crate::env::{sample_batch, stack_windows, ReplayBuffer};
use crate::param::ParamStore;
use crate::probe::{ridge_probe_mse, spearman};
use crate::tensor::{matmul_2d, Tensor};

#[derive(Clone, Debug)]
pub struct SmoothnessReport {
    /// Mean bilinear similarity per temporal distance 0..=L.
    pub per_delta: Vec<f64>,
    /// Mean similarity of cross-sequence pairs.
    pub cross: f64,
    /// Spearman rho between distance and bucket mean; 0 when undefined.
    pub spearman: f64,
    /// False when every bucket mean is identical (rho undefined).
    pub spearman_defined: bool,
}

impl SmoothnessReport {
    pub fn strictly_decreasing_through_cross(&self) -> bool {
        let mut prev = f64::INFINITY;
        for &v in &self.per_delta {
            if v >= prev {
                return false;
            }
            prev = v;
        }
        self.cross < prev
    }
}

/// Buckets bilinear similarities of unmasked encodings by temporal distance.
///
/// `w` is the bilinear weight matrix (d, d). Pairs from the same sequence
/// with distance beyond `window` belong to neither bucket.
pub fn smoothness_from_embeddings(
    embeddings: &[Tensor], // per batch: (B, F, d)
    w: &Tensor,
    window: usize,
) -> SmoothnessReport {
    let mut sums = vec![0.0f64; window + 1];
    let mut counts = vec![0usize; window + 1];
    let mut cross_sum = 0.0;
    let mut cross_n = 0usize;
    for emb in embeddings {
        let (b, f, d) = (emb.shape[0], emb.shape[1], emb.shape[2]);
        let n = b * f;
        let ew = matmul_2d(&emb.data, &w.data, n, d, d);
        for m in 0..n {
            for k in 0..n {
                let sim: f64 =
                    (0..d).map(|c| ew[m * d + c] * emb.data[k * d + c]).sum();
                if m / f == k / f {
                    let delta = (m % f).abs_diff(k % f);
                    if delta <= window {
                        sums[delta] += sim;
                        counts[delta] += 1;
                    }
                } else {
                    cross_sum += sim;
                    cross_n += 1;
                }
            }
        }
    }
    let per_delta: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let cross = if cross_n > 0 { cross_sum / cross_n as f64 } else { 0.0 };
    let deltas: Vec<f64> = (0..=window).map(|d| d as f64).collect();
    let (rho, defined) = match spearman(&deltas, &per_delta) {
        Some(r) => (r, true),
        None => (0.0, false),
    };
    SmoothnessReport { per_delta, cross, spearman: rho, spearman_defined: defined }
}

/// Encodes `n_batches` held-out batches and buckets their similarities.
#[allow(clippy::too_many_arguments)]
pub fn eval_smoothness(
    encoder: &Encoder,
    store: &ParamStore,
    w: &Tensor,
    buffer: &ReplayBuffer,
    n_batches: usize,
    batch: usize,
    seq_len: usize,
    window: usize,
    rng: &mut ChaCha8Rng,
) -> SmoothnessReport {
    let mut embeddings = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let windows = sample_batch(buffer, batch, seq_len, rng);
        let (frames, _) = stack_windows(&windows);
        embeddings.push(encoder.encode_value(store, &frames));
    }
    smoothness_from_embeddings(&embeddings, w, window)
}

/// Ridge-probe MSE from frozen embeddings to dot position (x, y).
/// Fit on the first half of the episodes, report on the second half.
pub fn eval_probe(encoder: &Encoder, store: &ParamStore, buffer: &ReplayBuffer) -> f64 {
    assert!(buffer.len() >= 2, "probe needs at least two episodes");
    let mut xs: Vec<Vec<Vec<f64>>> = vec![Vec::new(), Vec::new()];
    let mut ys: Vec<Vec<Vec<f64>>> = vec![Vec::new(), Vec::new()];
    let split = buffer.len() / 2;
    for (i, ep) in buffer.episodes.iter().enumerate() {
        let t = ep.frames.shape[0];
        let (c, h, w) = (ep.frames.shape[1], ep.frames.shape[2], ep.frames.shape[3]);
        let frames = ep.frames.clone().reshaped(vec![1, t, c, h, w]);
        let emb = encoder.encode_value(store, &frames);
        let d = emb.shape[2];
        let side = usize::from(i >= split);
        for ti in 0..t {
            xs[side].push(emb.data[ti * d..(ti + 1) * d].to_vec());
            ys[side].push(vec![ep.latents[ti][0], ep.latents[ti][1]]);
        }
    }
    ridge_probe_mse(&xs[0], &ys[0], &xs[1], &ys[1], 1e-3)
}
