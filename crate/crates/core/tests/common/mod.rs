#![allow(clippy::needless_range_loop)]

//! Independent reference implementations used by the integration tests.
//! Nothing here calls into the estimation code it is compared against.
#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use visitsim_core::domain::{GapRecord, PanelDataset, Subject};

/// Lower Cholesky factor of a dense symmetric positive definite matrix.
pub fn cholesky(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                assert!(s > 0.0, "matrix is not positive definite");
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    l
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn forward_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; b.len()];
    for i in 0..b.len() {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * x[k];
        }
        x[i] = s / l[i][i];
    }
    x
}

/// Log density of `N(0, sigma)` at `r`, through a dense Cholesky factor.
pub fn mvn_logpdf(r: &[f64], sigma: &[Vec<f64>]) -> f64 {
    let l = cholesky(sigma);
    let w = forward_solve(&l, r);
    let logdet: f64 = (0..r.len()).map(|i| 2.0 * l[i][i].ln()).sum();
    -0.5 * (r.len() as f64 * (2.0 * std::f64::consts::PI).ln()
        + logdet
        + w.iter().map(|v| v * v).sum::<f64>())
}

/// Random-intercept covariance `s2v J + s2e I`.
pub fn compound_symmetry(n: usize, s2v: f64, s2e: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| s2v + if i == j { s2e } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Which extra column the mixed model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extra {
    None,
    TotalCentered,
    Cumulative,
}

/// Fixed-effects rows `[1, z, t, extra?]` for one subject.
pub fn design_rows(s: &Subject, extra: Extra, mean_count: f64) -> Vec<Vec<f64>> {
    s.visit_times
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let z = if s.treated { 1.0 } else { 0.0 };
            let mut row = vec![1.0, z, t];
            match extra {
                Extra::None => {}
                Extra::TotalCentered => row.push(s.visit_times.len() as f64 - mean_count),
                Extra::Cumulative => row.push(j as f64 + 1.0),
            }
            row
        })
        .collect()
}

/// Mixed-model log-likelihood by dense multivariate normal densities.
pub fn dense_lmm_loglik(
    panel: &PanelDataset,
    extra: Extra,
    alpha: &[f64],
    s2v: f64,
    s2e: f64,
) -> f64 {
    let mean_count = panel
        .subjects
        .iter()
        .map(|s| s.visit_times.len() as f64)
        .sum::<f64>()
        / panel.subjects.len() as f64;
    panel
        .subjects
        .iter()
        .map(|s| {
            let rows = design_rows(s, extra, mean_count);
            let r: Vec<f64> = rows
                .iter()
                .zip(&s.outcomes)
                .map(|(x, y)| y - x.iter().zip(alpha).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            mvn_logpdf(&r, &compound_symmetry(r.len(), s2v, s2e))
        })
        .sum()
}

/// Joint model parameters on the natural scale.
#[derive(Debug, Clone, Copy)]
pub struct NaturalParams {
    pub alpha: [f64; 3],
    pub gamma: f64,
    pub beta: f64,
    pub lambda: f64,
    pub p: f64,
    pub s2u: f64,
    pub s2v: f64,
    pub s2e: f64,
}

/// Monte Carlo estimate of the joint log-likelihood, drawing the frailty
/// from its prior. Returns the estimate and its delta-method standard error.
pub fn mc_joint_loglik<R: Rng>(
    panel: &PanelDataset,
    th: &NaturalParams,
    draws: usize,
    rng: &mut R,
) -> (f64, f64) {
    let mut total = 0.0;
    let mut var = 0.0;
    for s in &panel.subjects {
        let z = if s.treated { 1.0 } else { 0.0 };
        let n = s.visit_times.len();
        let r: Vec<f64> = s
            .visit_times
            .iter()
            .zip(&s.outcomes)
            .map(|(t, y)| y - th.alpha[0] - th.alpha[1] * z - th.alpha[2] * t)
            .collect();
        let sigma = compound_symmetry(n, th.s2v, th.s2e);
        // The outcome density is Gaussian in u: evaluate it at three points
        // and recover the exact quadratic.
        let f0 = mvn_logpdf(&r, &sigma);
        let shifted = |u: f64| {
            let ru: Vec<f64> = r.iter().map(|v| v - th.gamma * u).collect();
            mvn_logpdf(&ru, &sigma)
        };
        let (fp, fm) = (shifted(1.0), shifted(-1.0));
        let c1 = 0.5 * (fp - fm);
        let c2 = 0.5 * (fp + fm) - f0;

        let mut ends: Vec<f64> = s.visit_times[1..].to_vec();
        ends.push(s.censoring_time);
        let mut events = 0.0;
        let mut log_base = 0.0;
        let mut cum = 0.0;
        for (j, end) in ends.iter().enumerate() {
            let gap = end - s.visit_times[j];
            if j + 1 < n {
                events += 1.0;
                log_base += (th.lambda * th.p).ln() + (th.p - 1.0) * gap.ln() + th.beta * z;
            }
            cum += th.lambda * gap.powf(th.p) * (th.beta * z).exp();
        }

        let su = th.s2u.sqrt();
        let logs: Vec<f64> = (0..draws)
            .map(|_| {
                let e: f64 = StandardNormal.sample(rng);
                let u = su * e;
                log_base + events * u - cum * u.exp() + f0 + c1 * u + c2 * u * u
            })
            .collect();
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
        let mean = w.iter().sum::<f64>() / draws as f64;
        let sd = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws as f64 - 1.0)).sqrt();
        total += m + mean.ln();
        var += (sd / (mean * (draws as f64).sqrt())).powi(2);
    }
    (total, var.sqrt())
}

/// Breslow partial log-likelihood for a single covariate, gap-time risk sets.
pub fn breslow_loglik(eta: f64, records: &[(f64, bool, f64)]) -> f64 {
    let mut times: Vec<f64> = records.iter().filter(|r| r.1).map(|r| r.0).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    times
        .iter()
        .map(|&t| {
            let tied: Vec<&(f64, bool, f64)> = records.iter().filter(|r| r.1 && r.0 == t).collect();
            let risk: f64 = records
                .iter()
                .filter(|r| r.0 >= t)
                .map(|r| (eta * r.2).exp())
                .sum();
            tied.iter().map(|r| eta * r.2).sum::<f64>() - tied.len() as f64 * risk.ln()
        })
        .sum()
}

/// Maximiser of a unimodal function on `[lo, hi]`: a coarse grid, then
/// golden-section refinement around the best grid point.
pub fn grid_search_max(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let n = 2000;
    let step = (hi - lo) / n as f64;
    let best = (0..=n)
        .map(|i| lo + step * i as f64)
        .max_by(|a, b| f(*a).total_cmp(&f(*b)))
        .unwrap();
    let (mut a, mut b) = (best - step, best + step);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    while b - a > 1e-12 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if f(c) > f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    0.5 * (a + b)
}

pub fn records_1d(records: &[GapRecord]) -> Vec<(f64, bool, f64)> {
    records
        .iter()
        .map(|r| (r.gap, r.observed, r.covariates[0]))
        .collect()
}

/// Least squares through the normal equations and Gaussian elimination
/// with partial pivoting.
pub fn ols(rows: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let p = rows[0].len();
    let mut a = vec![vec![0.0; p + 1]; p];
    for (x, yi) in rows.iter().zip(y) {
        for i in 0..p {
            for j in 0..p {
                a[i][j] += x[i] * x[j];
            }
            a[i][p] += x[i] * yi;
        }
    }
    for col in 0..p {
        let piv = (col..p)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        for i in col + 1..p {
            let f = a[i][col] / a[col][col];
            for j in col..=p {
                a[i][j] -= f * a[col][j];
            }
        }
    }
    let mut b = vec![0.0; p];
    for i in (0..p).rev() {
        let s: f64 = (i + 1..p).map(|j| a[i][j] * b[j]).sum();
        b[i] = (a[i][p] - s) / a[i][i];
    }
    b
}

/// Sample median; sorts in place.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
