//! Closed-form ridge regression probe and Spearman rank correlation.

/// Solves a symmetric positive-definite system via Gaussian elimination
/// with partial pivoting. `a` is n x n row-major, consumed in place.
fn solve(mut a: Vec<f64>, mut b: Vec<Vec<f64>>, n: usize) -> Vec<Vec<f64>> {
    for col in 0..n {
        let mut pivot = col;
        for r in (col + 1)..n {
            if a[r * n + col].abs() > a[pivot * n + col].abs() {
                pivot = r;
            }
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            for rhs in b.iter_mut() {
                rhs.swap(col, pivot);
            }
        }
        let diag = a[col * n + col];
        assert!(diag.abs() > 1e-300, "ridge system is singular despite regularizer");
        for r in (col + 1)..n {
            let factor = a[r * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                a[r * n + j] -= factor * a[col * n + j];
            }
            for rhs in b.iter_mut() {
                rhs[r] -= factor * rhs[col];
            }
        }
    }
    for rhs in b.iter_mut() {
        for col in (0..n).rev() {
            let mut v = rhs[col];
            for j in (col + 1)..n {
                v -= a[col * n + j] * rhs[j];
            }
            rhs[col] = v / a[col * n + col];
        }
    }
    b
}

/// Ridge regression with centered features and targets (the intercept is
/// unpenalized): fits on (train_x, train_y), reports mean squared error on
/// (test_x, test_y) averaged over samples and target dimensions.
pub fn ridge_probe_mse(
    train_x: &[Vec<f64>],
    train_y: &[Vec<f64>],
    test_x: &[Vec<f64>],
    test_y: &[Vec<f64>],
    reg: f64,
) -> f64 {
    assert!(!train_x.is_empty() && !test_x.is_empty(), "probe needs data on both splits");
    let d = train_x[0].len();
    let t = train_y[0].len();
    let n = train_x.len() as f64;

    let mut x_mean = vec![0.0; d];
    for row in train_x {
        for (m, v) in x_mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in x_mean.iter_mut() {
        *m /= n;
    }
    let mut y_mean = vec![0.0; t];
    for row in train_y {
        for (m, v) in y_mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in y_mean.iter_mut() {
        *m /= n;
    }

    // Normal equations on centered data: (Xc^T Xc + reg I) W = Xc^T Yc.
    let mut gram = vec![0.0; d * d];
    let mut xty = vec![vec![0.0; d]; t];
    for (row, y) in train_x.iter().zip(train_y) {
        let xc: Vec<f64> = row.iter().zip(&x_mean).map(|(v, m)| v - m).collect();
        for i in 0..d {
            for j in i..d {
                gram[i * d + j] += xc[i] * xc[j];
            }
        }
        for k in 0..t {
            let yc = y[k] - y_mean[k];
            for i in 0..d {
                xty[k][i] += xc[i] * yc;
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            gram[i * d + j] = gram[j * d + i];
        }
        gram[i * d + i] += reg;
    }
    let weights = solve(gram, xty, d); // weights[k][i]

    let mut mse = 0.0;
    for (row, y) in test_x.iter().zip(test_y) {
        for k in 0..t {
            let mut pred = y_mean[k];
            for i in 0..d {
                pred += weights[k][i] * (row[i] - x_mean[i]);
            }
            let e = pred - y[k];
            mse += e * e;
        }
    }
    mse / (test_x.len() * t) as f64
}

/// Spearman rank correlation. Returns `None` when either side is constant
/// (the correlation is undefined there).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("NaN in rank input"));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0; // average rank for ties
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_features_probe_to_machine_precision() {
        // Embeddings equal to the latents: the probe recovers the projection.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let targets: Vec<Vec<f64>> = data.iter().map(|r| vec![r[0], r[1]]).collect();
        let mse = ridge_probe_mse(&data[..100], &targets[..100], &data[100..], &targets[100..], 1e-3);
        assert!(mse <= 1e-6, "oracle probe mse {mse}");
    }

    #[test]
    fn constant_features_predict_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<Vec<f64>> = (0..400).map(|_| vec![0.7, 0.7, 0.7]).collect();
        let y: Vec<Vec<f64>> = (0..400).map(|_| vec![rng.gen_range(0.0..1.0)]).collect();
        let mse = ridge_probe_mse(&x[..200], &y[..200], &x[200..], &y[200..], 1e-3);
        let train_mean = y[..200].iter().map(|r| r[0]).sum::<f64>() / 200.0;
        let expect: f64 =
            y[200..].iter().map(|r| (r[0] - train_mean).powi(2)).sum::<f64>() / 200.0;
        assert!((mse - expect).abs() < 1e-12, "{mse} vs variance {expect}");
    }

    #[test]
    fn spearman_of_constructed_monotone_case_is_minus_one() {
        let deltas = [0.0, 1.0, 2.0, 3.0];
        let sims: Vec<f64> = deltas.iter().map(|d| -d).collect();
        assert_eq!(spearman(&deltas, &sims), Some(-1.0));
    }

    #[test]
    fn spearman_undefined_for_constant_input() {
        assert_eq!(spearman(&[0.0, 1.0, 2.0], &[5.0, 5.0, 5.0]), None);
    }

    #[test]
    fn spearman_handles_ties_with_average_ranks() {
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 10.0, 5.0, 1.0]).unwrap();
        assert!(r < -0.9);
    }
}
