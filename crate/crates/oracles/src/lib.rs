//! Reference solvers for the test suites.
//!
//! Everything here is written against plain `Vec<f64>` rows with textbook
//! algorithms and shares no code with `conscope-core`, so the tests can use
//! it as a second opinion on the production solvers.

#![allow(clippy::needless_range_loop)]

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
///
/// Panics on a singular system; oracle inputs are constructed to be regular.
pub fn gauss_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let m = b.len();
    let mut aug: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(row, &rhs)| {
            let mut r = row.clone();
            r.push(rhs);
            r
        })
        .collect();
    for col in 0..m {
        let pivot = (col..m)
            .max_by(|&i, &j| aug[i][col].abs().total_cmp(&aug[j][col].abs()))
            .unwrap();
        assert!(aug[pivot][col].abs() > 1e-300, "singular oracle system");
        aug.swap(col, pivot);
        for row in col + 1..m {
            let f = aug[row][col] / aug[col][col];
            if f != 0.0 {
                for k in col..=m {
                    aug[row][k] -= f * aug[col][k];
                }
            }
        }
    }
    let mut x = vec![0.0; m];
    for row in (0..m).rev() {
        let mut s = aug[row][m];
        for k in row + 1..m {
            s -= aug[row][k] * x[k];
        }
        x[row] = s / aug[row][row];
    }
    x
}

/// Ridge least squares with an unpenalized intercept, solved directly from the
/// normal equations of the design `[H | 1]`. Returns `(weights, intercept)`.
pub fn normal_equations(h: &[Vec<f64>], t: &[f64], ridge: f64) -> (Vec<f64>, f64) {
    let d = h[0].len();
    let p = d + 1;
    let mut gram = vec![vec![0.0; p]; p];
    let mut rhs = vec![0.0; p];
    for (row, &ti) in h.iter().zip(t) {
        let x: Vec<f64> = row.iter().copied().chain(std::iter::once(1.0)).collect();
        for a in 0..p {
            rhs[a] += x[a] * ti;
            for b in 0..p {
                gram[a][b] += x[a] * x[b];
            }
        }
    }
    for (j, row) in gram.iter_mut().enumerate().take(d) {
        row[j] += ridge;
    }
    let sol = gauss_solve(&gram, &rhs);
    (sol[..d].to_vec(), sol[d])
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Gradient of `sum log-lik - ridge/2 |w|^2` with respect to `[w, b]`.
pub fn penalized_logistic_gradient(
    h: &[Vec<f64>],
    t: &[f64],
    weights: &[f64],
    intercept: f64,
    ridge: f64,
) -> Vec<f64> {
    let d = weights.len();
    let mut g = vec![0.0; d + 1];
    for (row, &ti) in h.iter().zip(t) {
        let eta: f64 = row.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() + intercept;
        let r = ti - sigmoid(eta);
        for j in 0..d {
            g[j] += r * row[j];
        }
        g[d] += r;
    }
    for j in 0..d {
        g[j] -= ridge * weights[j];
    }
    g
}

/// Plain Newton iterations on the penalized Bernoulli log-likelihood in raw
/// coordinates, starting from zero, no line search beyond step halving.
/// Returns `(weights, intercept)`.
pub fn penalized_logistic_newton(h: &[Vec<f64>], t: &[f64], ridge: f64) -> (Vec<f64>, f64) {
    let d = h[0].len();
    let p = d + 1;
    let mut beta = vec![0.0; p];
    let objective = |beta: &[f64]| -> f64 {
        let mut ll = 0.0;
        for (row, &ti) in h.iter().zip(t) {
            let eta: f64 = row.iter().zip(beta).map(|(x, w)| x * w).sum::<f64>() + beta[d];
            // log(1 + e^eta) computed stably
            let softplus = if eta > 0.0 {
                eta + (-eta).exp().ln_1p()
            } else {
                eta.exp().ln_1p()
            };
            ll += ti * eta - softplus;
        }
        ll - 0.5 * ridge * beta[..d].iter().map(|w| w * w).sum::<f64>()
    };
    let mut current = objective(&beta);
    for _ in 0..500 {
        let g = penalized_logistic_gradient(h, t, &beta[..d], beta[d], ridge);
        if g.iter().all(|v| v.abs() < 1e-11 * t.len() as f64) {
            break;
        }
        let mut hess = vec![vec![0.0; p]; p];
        for row in h {
            let eta: f64 = row.iter().zip(&beta).map(|(x, w)| x * w).sum::<f64>() + beta[d];
            let pr = sigmoid(eta);
            let wgt = pr * (1.0 - pr);
            let x: Vec<f64> = row.iter().copied().chain(std::iter::once(1.0)).collect();
            for a in 0..p {
                for b in 0..p {
                    hess[a][b] += wgt * x[a] * x[b];
                }
            }
        }
        for (j, row) in hess.iter_mut().enumerate().take(d) {
            row[j] += ridge;
        }
        let step = gauss_solve(&hess, &g);
        let mut scale = 1.0;
        loop {
            let trial: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + scale * s).collect();
            let val = objective(&trial);
            if val >= current || scale < 1e-10 {
                beta = trial;
                current = val;
                break;
            }
            scale *= 0.5;
        }
    }
    (beta[..d].to_vec(), beta[d])
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, sorted
/// in descending order.
pub fn jacobi_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
    let m = a.len();
    let mut s: Vec<Vec<f64>> = a.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..m)
            .flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| s[i][j] * s[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..m {
            for q in p + 1..m {
                if s[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (s[q][q] - s[p][p]) / (2.0 * s[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..m {
                    let skp = s[k][p];
                    let skq = s[k][q];
                    s[k][p] = c * skp - sn * skq;
                    s[k][q] = sn * skp + c * skq;
                }
                for k in 0..m {
                    let spk = s[p][k];
                    let sqk = s[q][k];
                    s[p][k] = c * spk - sn * sqk;
                    s[q][k] = sn * spk + c * sqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..m).map(|i| s[i][i]).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    eig
}

/// Sample covariance (divisor `n - 1`) of the rows.
pub fn sample_covariance(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in rows {
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += (r[a] - mean[a]) * (r[b] - mean[b]);
            }
        }
    }
    for row in &mut cov {
        for v in row.iter_mut() {
            *v /= n - 1.0;
        }
    }
    cov
}

/// A small deterministic generator (xorshift64*) so fixtures do not depend on
/// the `rand` stack used by the code under test.
#[derive(Debug, Clone)]
pub struct FixtureRng(u64);

impl FixtureRng {
    pub fn new(seed: u64) -> Self {
        FixtureRng(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1)
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.0 = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(f64::MIN_POSITIVE);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn matrix(&mut self, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| self.normal()).collect())
            .collect()
    }

    /// Random orthogonal `d x d` matrix by Gram-Schmidt on a Gaussian draw.
    pub fn orthogonal(&mut self, d: usize) -> Vec<Vec<f64>> {
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
        while q.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| self.normal()).collect();
            for u in &q {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= dot * ui;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                q.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        q
    }
}
