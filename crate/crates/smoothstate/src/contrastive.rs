//! Multi-level temporal contrastive objective with bilinear similarity.
//!
//! Queries and keys are indexed by flattened (sequence, timestep). For a
//! query at timestep i, keys from the same sequence at temporal distance
//! Delta = |i - j| form similarity level Delta; level l treats keys at
//! Delta = l as positives against a denominator of same-sequence keys with
//! Delta >= l plus every cross-sequence key, at temperature tau_l. The
//! total objective sums levels 0..=L per query (boundary queries skip
//! levels with no positives) and averages over all queries. Gradients flow
//! into the queries and the bilinear weight only; key states enter as
//! constants.

use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Learnable d x d bilinear form, initialized to the identity.
#[derive(Clone, Debug)]
pub struct BilinearSimilarity {
    pub w: ParamId,
    pub d: usize,
}

impl BilinearSimilarity {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::eye(d));
        BilinearSimilarity { w, d }
    }

    /// sim(m, n) = q_m^T W k_n over flattened (B, F) indices, with keys and
    /// queries given as tape nodes of shape (B*F, d).
    pub fn matrix_vars(&self, tape: &mut Tape, q_flat: VarId, w: VarId, k_flat: VarId) -> VarId {
        let qw = tape.matmul(q_flat, w);
        let kt = tape.transpose(k_flat);
        tape.matmul(qw, kt)
    }

    /// Convenience: q on tape with shape (B, F, d), keys as a constant.
    pub fn matrix(&self, tape: &mut Tape, store: &ParamStore, q: VarId, keys: &Tensor) -> VarId {
        let qs = tape.shape(q).to_vec();
        assert_eq!(qs.len(), 3, "similarity: queries must be (B,F,d), got {qs:?}");
        let (b, f, d) = (qs[0], qs[1], qs[2]);
        assert_eq!(d, self.d, "similarity: query dim {d} vs W dim {}", self.d);
        assert_eq!(keys.shape, vec![b, f, d], "similarity: key shape {:?}", keys.shape);
        let q_flat = tape.reshape(q, vec![b * f, d]);
        let w = tape.param(store, self.w);
        let k_flat = tape.constant(keys.clone().reshaped(vec![b * f, d]));
        self.matrix_vars(tape, q_flat, w, k_flat)
    }
}

/// tau_l = tau0 + l * delta, strictly increasing and positive.
#[derive(Clone, Copy, Debug)]
pub struct TemperatureSchedule {
    pub tau0: f64,
    pub delta: f64,
}

impl TemperatureSchedule {
    pub fn new(tau0: f64, delta: f64) -> Self {
        assert!(tau0 > 0.0, "temperature tau0 must be > 0, got {tau0}");
        assert!(delta > 0.0, "temperature increment must be > 0, got {delta}");
        TemperatureSchedule { tau0, delta }
    }

    pub fn tau(&self, level: usize) -> f64 {
        self.tau0 + level as f64 * self.delta
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ContrastiveConfig {
    /// Temporal window size L.
    pub window: usize,
    pub schedule: TemperatureSchedule,
    /// Loss weight lambda in the total objective.
    pub weight: f64,
}

/// Key-set structure for a (B, F) batch with window L.
#[derive(Clone, Debug)]
pub struct LevelPartition {
    pub b: usize,
    pub f: usize,
    pub window: usize,
}

impl LevelPartition {
    pub fn new(b: usize, f: usize, window: usize) -> Self {
        assert!(b >= 1 && f >= 1, "partition needs B >= 1 and F >= 1");
        LevelPartition { b, f, window }
    }

    pub fn num_queries(&self) -> usize {
        self.b * self.f
    }

    fn split(&self, idx: usize) -> (usize, usize) {
        (idx / self.f, idx % self.f)
    }

    /// Same-sequence keys at exactly distance `l` from query `q`.
    pub fn positives(&self, q: usize, l: usize) -> Vec<usize> {
        let (qb, qi) = self.split(q);
        let mut out = Vec::new();
        if l == 0 {
            return vec![q];
        }
        if qi >= l {
            out.push(qb * self.f + (qi - l));
        }
        if qi + l < self.f {
            out.push(qb * self.f + (qi + l));
        }
        out
    }

    /// Denominator for level `l`: same-sequence keys with distance >= l plus
    /// all cross-sequence keys.
    pub fn denominator(&self, q: usize, l: usize) -> Vec<usize> {
        let (qb, qi) = self.split(q);
        let mut out = Vec::new();
        for k in 0..self.num_queries() {
            let (kb, ki) = self.split(k);
            if kb == qb {
                if qi.abs_diff(ki) >= l {
                    out.push(k);
                }
            } else {
                out.push(k);
            }
        }
        out
    }

    /// The lowest-similarity pool: cross-sequence keys plus same-sequence
    /// keys beyond the window.
    pub fn negative_pool(&self, q: usize) -> Vec<usize> {
        let (qb, qi) = self.split(q);
        let mut out = Vec::new();
        for k in 0..self.num_queries() {
            let (kb, ki) = self.split(k);
            if kb != qb || qi.abs_diff(ki) > self.window {
                out.push(k);
            }
        }
        out
    }

    fn num_mask(&self, l: usize) -> Vec<bool> {
        let n = self.num_queries();
        let mut mask = vec![false; n * n];
        for q in 0..n {
            for k in self.positives(q, l) {
                mask[q * n + k] = true;
            }
        }
        mask
    }

    fn den_mask(&self, l: usize) -> Vec<bool> {
        let n = self.num_queries();
        let mut mask = vec![false; n * n];
        for q in 0..n {
            for k in self.denominator(q, l) {
                mask[q * n + k] = true;
            }
        }
        mask
    }

    /// 1.0 for queries whose level-l positive set is nonempty.
    pub fn valid(&self, l: usize) -> Vec<f64> {
        (0..self.num_queries())
            .map(|q| if self.positives(q, l).is_empty() { 0.0 } else { 1.0 })
            .collect()
    }
}

/// Per-query loss vector for one similarity level.
pub struct LevelLoss {
    /// (B*F,) tape node; entries for invalid queries are meaningless and
    /// must be masked by `valid`.
    pub per_query: VarId,
    pub valid: Vec<f64>,
}

/// Level-l loss per query: log-sum-exp over the denominator minus
/// log-sum-exp over the positives, at temperature `tau`.
pub fn level_loss(tape: &mut Tape, sims: VarId, part: &LevelPartition, l: usize, tau: f64) -> LevelLoss {
    let n = part.num_queries();
    assert_eq!(tape.shape(sims), &[n, n], "level_loss: sims must be ({n},{n})");
    let scaled = tape.scale(sims, 1.0 / tau);
    let num = tape.masked_lse(scaled, &part.num_mask(l));
    let den = tape.masked_lse(scaled, &part.den_mask(l));
    let per_query = tape.sub(den, num);
    LevelLoss { per_query, valid: part.valid(l) }
}

/// Scalar objective plus the per-level reporting breakdown.
pub struct ContrastiveLoss {
    /// Mean over all B*F queries of the summed per-level losses.
    pub total: VarId,
    /// Mean per level over queries with a nonempty positive set.
    pub level_means: Vec<f64>,
    pub level_counts: Vec<usize>,
    /// The similarity matrix the losses were computed from.
    pub sims: VarId,
}

/// Sums level losses 0..=L and averages over queries. Boundary queries
/// whose level-l positive set is empty contribute nothing at that level.
pub fn multilevel_loss(
    tape: &mut Tape,
    sims: VarId,
    part: &LevelPartition,
    cfg: &ContrastiveConfig,
) -> ContrastiveLoss {
    let n = part.num_queries();
    let mut total: Option<VarId> = None;
    let mut level_means = Vec::with_capacity(cfg.window + 1);
    let mut level_counts = Vec::with_capacity(cfg.window + 1);
    for l in 0..=cfg.window {
        let ll = level_loss(tape, sims, part, l, cfg.schedule.tau(l));
        let count = ll.valid.iter().filter(|&&v| v > 0.0).count();
        let masked = if count == n {
            ll.per_query
        } else {
            let valid = tape.constant(Tensor::new(vec![n], ll.valid.clone()));
            tape.mul(ll.per_query, valid)
        };
        let level_sum = tape.sum_all(masked);
        let sum_value = tape.value(level_sum).data[0];
        level_means.push(if count > 0 { sum_value / count as f64 } else { 0.0 });
        level_counts.push(count);
        total = Some(match total {
            Some(t) => tape.add(t, level_sum),
            None => level_sum,
        });
    }
    let total = tape.scale(total.expect("window >= 0 always yields level 0"), 1.0 / n as f64);
    ContrastiveLoss { total, level_means, level_counts, sims }
}

/// Full path from query states and constant key states.
pub fn contrastive_loss(
    tape: &mut Tape,
    store: &ParamStore,
    sim: &BilinearSimilarity,
    q_states: VarId,
    k_states: &Tensor,
    cfg: &ContrastiveConfig,
) -> ContrastiveLoss {
    let qs = tape.shape(q_states).to_vec();
    let part = LevelPartition::new(qs[0], qs[1], cfg.window);
    let sims = sim.matrix(tape, store, q_states, k_states);
    multilevel_loss(tape, sims, &part, cfg)
}

/// Total objective: task loss plus `weight` times the contrastive loss.
/// The task term defaults to zero at call sites without one.
pub fn total_loss(tape: &mut Tape, task: VarId, contrastive: VarId, weight: f64) -> VarId {
    let scaled = tape.scale(contrastive, weight);
    tape.add(task, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Brute-force oracle over queries x levels x keys, written before the
    // vectorized path and kept independent of it.
    fn naive_multilevel(
        sims: &[f64],
        b: usize,
        f: usize,
        window: usize,
        tau0: f64,
        dtau: f64,
    ) -> (f64, Vec<f64>, Vec<usize>) {
        let n = b * f;
        let mut total = 0.0;
        let mut sums = vec![0.0; window + 1];
        let mut counts = vec![0usize; window + 1];
        for q in 0..n {
            let (qb, qi) = (q / f, q % f);
            for l in 0..=window {
                let tau = tau0 + l as f64 * dtau;
                let mut num = 0.0;
                let mut den = 0.0;
                let mut npos = 0usize;
                for k in 0..n {
                    let (kb, ki) = (k / f, k % f);
                    let e = (sims[q * n + k] / tau).exp();
                    if kb == qb {
                        let delta = qi.abs_diff(ki);
                        if delta == l {
                            num += e;
                            npos += 1;
                        }
                        if delta >= l {
                            den += e;
                        }
                    } else {
                        den += e;
                    }
                }
                if npos == 0 {
                    continue;
                }
                let loss = -(num / den).ln();
                total += loss;
                sums[l] += loss;
                counts[l] += 1;
            }
        }
        let means = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect();
        (total / n as f64, means, counts)
    }

    fn rand_sims(n: usize, seed: u64, scale: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, n], (0..n * n).map(|_| rng.gen_range(-scale..scale)).collect())
    }

    fn run_vectorized(
        sims: &Tensor,
        b: usize,
        f: usize,
        window: usize,
        tau0: f64,
        dtau: f64,
    ) -> (f64, Vec<f64>, Vec<usize>) {
        let mut tape = Tape::new();
        let s = tape.constant(sims.clone());
        let part = LevelPartition::new(b, f, window);
        let cfg = ContrastiveConfig {
            window,
            schedule: TemperatureSchedule::new(tau0, dtau),
            weight: 1.0,
        };
        let out = multilevel_loss(&mut tape, s, &part, &cfg);
        (tape.value(out.total).data[0], out.level_means, out.level_counts)
    }

    #[test]
    fn similarity_identity_case() {
        let mut store = ParamStore::new();
        let sim = BilinearSimilarity::new(&mut store, "sim", 3);
        // One-hot basis rows, B=1 F=3.
        let mut basis = Tensor::zeros(vec![1, 3, 3]);
        for i in 0..3 {
            basis.data[i * 3 + i] = 1.0;
        }
        let mut tape = Tape::new();
        let q = tape.constant(basis.clone());
        let m = sim.matrix(&mut tape, &store, q, &basis);
        assert_eq!(tape.value(m).data, Tensor::eye(3).data);
    }

    #[test]
    fn similarity_zero_weight_annihilates() {
        let mut store = ParamStore::new();
        let sim = BilinearSimilarity::new(&mut store, "sim", 3);
        for v in store.value_mut(sim.w).data.iter_mut() {
            *v = 0.0;
        }
        let q = Tensor::new(vec![1, 2, 3], (0..6).map(|v| v as f64).collect());
        let mut tape = Tape::new();
        let qv = tape.constant(q.clone());
        let m = sim.matrix(&mut tape, &store, qv, &q);
        assert!(tape.value(m).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn similarity_dot_product_arithmetic() {
        let mut store = ParamStore::new();
        let sim = BilinearSimilarity::new(&mut store, "sim", 2);
        let q = Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]);
        let k = Tensor::new(vec![1, 1, 2], vec![3.0, 4.0]);
        let mut tape = Tape::new();
        let qv = tape.constant(q);
        let m = sim.matrix(&mut tape, &store, qv, &k);
        assert_eq!(tape.value(m).data, vec![11.0]);
    }

    #[test]
    fn partition_counts_match_fig_layout() {
        // B=3, F=5, L=3, query (0, 1).
        let part = LevelPartition::new(3, 5, 3);
        let q = 1;
        assert_eq!(part.positives(q, 0), vec![1]);
        assert_eq!(part.positives(q, 1).len(), 2);
        assert_eq!(part.positives(q, 2).len(), 1);
        assert_eq!(part.positives(q, 3).len(), 1);
        assert_eq!(part.negative_pool(q).len(), 10);
    }

    #[test]
    fn boundary_query_has_empty_top_level() {
        let part = LevelPartition::new(1, 5, 3);
        assert!(part.positives(2, 3).is_empty());
        assert_eq!(part.valid(3)[2], 0.0);
    }

    #[test]
    fn degenerate_single_query() {
        let part = LevelPartition::new(1, 1, 0);
        assert_eq!(part.positives(0, 0), vec![0]);
        assert!(part.negative_pool(0).is_empty());
        assert_eq!(part.denominator(0, 0), vec![0]);
    }

    #[test]
    fn partition_covers_all_keys_disjointly() {
        for (b, f, window) in [(2, 4, 2), (3, 5, 3), (1, 6, 0)] {
            let part = LevelPartition::new(b, f, window);
            for q in 0..part.num_queries() {
                let mut seen = vec![0usize; part.num_queries()];
                for l in 0..=window {
                    for k in part.positives(q, l) {
                        seen[k] += 1;
                    }
                }
                for k in part.negative_pool(q) {
                    seen[k] += 1;
                }
                assert!(
                    seen.iter().all(|&c| c == 1),
                    "levels plus pool must partition keys exactly once: {seen:?}"
                );
            }
        }
    }

    #[test]
    fn denominator_shrinks_with_level() {
        let part = LevelPartition::new(2, 6, 3);
        for q in 0..part.num_queries() {
            for l in 0..3 {
                let hi = part.denominator(q, l + 1);
                let lo = part.denominator(q, l);
                assert!(hi.iter().all(|k| lo.contains(k)), "denominator must shrink weakly");
                assert!(hi.len() <= lo.len());
            }
        }
    }

    #[test]
    fn uniform_similarities_give_set_size_ratio() {
        // B=2, F=2, L=0: numerator 1 key, denominator 2 same-seq + 2 cross.
        let sims = Tensor::zeros(vec![4, 4]);
        for tau in [0.07, 0.14, 1.0] {
            let mut tape = Tape::new();
            let s = tape.constant(sims.clone());
            let part = LevelPartition::new(2, 2, 0);
            let ll = level_loss(&mut tape, s, &part, 0, tau);
            for q in 0..4 {
                let v = tape.value(ll.per_query).data[q];
                assert!((v - 4.0f64.ln()).abs() < 1e-12, "tau {tau}: {v}");
            }
        }
    }

    #[test]
    fn saturated_positives_drive_loss_to_zero() {
        let part = LevelPartition::new(2, 2, 0);
        let mut sims = Tensor::zeros(vec![4, 4]);
        for q in 0..4 {
            sims.data[q * 4 + q] = 60.0; // positives far above everything else
        }
        let mut tape = Tape::new();
        let s = tape.constant(sims);
        let ll = level_loss(&mut tape, s, &part, 0, 1.0);
        for q in 0..4 {
            assert!(tape.value(ll.per_query).data[q] < 1e-10);
        }
    }

    #[test]
    fn level_loss_matches_triple_loop_oracle() {
        let (b, f, window) = (2, 3, 1);
        let sims = rand_sims(b * f, 0, 2.0);
        let (naive_total, naive_means, naive_counts) =
            naive_multilevel(&sims.data, b, f, window, 0.07, 0.075);
        let (total, means, counts) = run_vectorized(&sims, b, f, window, 0.07, 0.075);
        assert!((total - naive_total).abs() < 1e-10, "{total} vs {naive_total}");
        assert_eq!(counts, naive_counts);
        for (a, b) in means.iter().zip(&naive_means) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn tiny_instance_matches_oracle() {
        let (b, f, window) = (2, 4, 2);
        let sims = rand_sims(b * f, 0, 1.5);
        let (naive_total, ..) = naive_multilevel(&sims.data, b, f, window, 0.07, 0.075);
        let (total, ..) = run_vectorized(&sims, b, f, window, 0.07, 0.075);
        assert!((total - naive_total).abs() < 1e-10);
    }

    #[test]
    fn oracle_sweep_over_shapes_and_seeds() {
        for b in [1usize, 2, 3] {
            for f in [2usize, 4, 6] {
                for window in [0usize, 1, 2] {
                    for seed in 0..5u64 {
                        let sims = rand_sims(b * f, seed, 2.0);
                        let (nt, nm, nc) =
                            naive_multilevel(&sims.data, b, f, window, 0.07, 0.075);
                        let (vt, vm, vc) = run_vectorized(&sims, b, f, window, 0.07, 0.075);
                        assert!(
                            (vt - nt).abs() < 1e-10,
                            "B={b} F={f} L={window} seed={seed}: {vt} vs {nt}"
                        );
                        assert_eq!(vc, nc);
                        for (a, c) in vm.iter().zip(&nm) {
                            assert!((a - c).abs() < 1e-10);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn window_zero_collapses_to_infonce() {
        // Direct implementation of the one-positive contrastive objective
        // with the same-timestep key as the positive and every key in the
        // denominator.
        let (b, f) = (2, 4);
        let n = b * f;
        let tau = 0.07;
        let sims = rand_sims(n, 3, 2.0);
        let mut direct = 0.0;
        for q in 0..n {
            let den: f64 = (0..n).map(|k| (sims.data[q * n + k] / tau).exp()).sum();
            let num = (sims.data[q * n + q] / tau).exp();
            direct += -(num / den).ln();
        }
        direct /= n as f64;
        let (total, ..) = run_vectorized(&sims, b, f, 0, tau, 0.075);
        assert!((total - direct).abs() < 1e-10, "{total} vs {direct}");
    }

    #[test]
    fn doubled_temperatures_with_equal_sims_change_nothing() {
        let sims = Tensor::full(vec![6, 6], 0.37);
        let (t1, ..) = run_vectorized(&sims, 2, 3, 1, 0.07, 0.075);
        let (t2, ..) = run_vectorized(&sims, 2, 3, 1, 0.14, 0.15);
        assert!((t1 - t2).abs() < 1e-12);
    }

    #[test]
    fn constant_logit_shift_is_invisible() {
        let (b, f, window) = (2, 4, 2);
        let sims = rand_sims(b * f, 5, 2.0);
        let mut shifted = sims.clone();
        for v in shifted.data.iter_mut() {
            *v += 13.5;
        }
        let (t1, m1, _) = run_vectorized(&sims, b, f, window, 0.07, 0.075);
        let (t2, m2, _) = run_vectorized(&shifted, b, f, window, 0.07, 0.075);
        assert!((t1 - t2).abs() < 1e-10);
        for (a, c) in m1.iter().zip(&m2) {
            assert!((a - c).abs() < 1e-10);
        }
    }

    #[test]
    fn gradients_flow_into_queries_keys_and_weight() {
        let (b, f, d, window) = (2, 3, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let q = store.add("q", {
            let data = (0..b * f * d).map(|_| rng.gen_range(-0.5..0.5)).collect();
            Tensor::new(vec![b * f, d], data)
        });
        let k = store.add("k", {
            let data = (0..b * f * d).map(|_| rng.gen_range(-0.5..0.5)).collect();
            Tensor::new(vec![b * f, d], data)
        });
        let w = store.add("w", Tensor::eye(d));
        let sim = BilinearSimilarity { w, d };
        let cfg = ContrastiveConfig {
            window,
            schedule: TemperatureSchedule::new(0.3, 0.2),
            weight: 1.0,
        };
        let ids = vec![q, k, w];
        let report = crate::gradcheck::grad_check(
            &mut store,
            &ids,
            |tape, store| {
                let qv = tape.param(store, q);
                let kv = tape.param(store, k);
                let wv = tape.param(store, w);
                let sims = sim.matrix_vars(tape, qv, wv, kv);
                let part = LevelPartition::new(b, f, window);
                multilevel_loss(tape, sims, &part, &cfg).total
            },
            1e-5,
            1e-4,
        );
        assert!(report.passed(), "contrastive gradcheck: {}", report.max_rel_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = Tape::new();
        let task = tape.constant(Tensor::scalar(0.0));
        let aux = tape.constant(Tensor::scalar(2.0));
        let t = total_loss(&mut tape, task, aux, 0.1);
        assert!((tape.value(t).data[0] - 0.2).abs() < 1e-15);

        let task = tape.constant(Tensor::scalar(0.7));
        let aux = tape.constant(Tensor::scalar(3.0));
        let t = total_loss(&mut tape, task, aux, 0.0);
        assert_eq!(tape.value(t).data[0], 0.7, "lambda 0 leaves only the task term");

        let task = tape.constant(Tensor::scalar(1.3));
        let aux = tape.constant(Tensor::scalar(1.3));
        let t = total_loss(&mut tape, task, aux, 1.0);
        assert!((tape.value(t).data[0] - 2.6).abs() < 1e-15);
    }
}
