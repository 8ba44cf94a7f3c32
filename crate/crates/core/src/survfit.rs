//! Andersen-Gill recurrent-event Cox model on the gap-time scale.
//!
//! Each gap record is one risk interval `(0, gap]`; a record is in the risk set
//! of every event whose gap is no longer than its own. Ties use the Breslow
//! approximation. The baseline intensity is left unspecified.
//!
//! Robust variances cluster on subject, either by a leave-one-subject-out
//! jackknife or by the score-residual sandwich.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::domain::GapRecord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurvError {
    #[error("no gap records")]
    Empty,
    #[error("no events: every gap is censored")]
    NoEvents,
    #[error("record {index}: expected {expected} covariates, found {found}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("record {index} (subject {subject}): gap must be positive and covariates finite")]
    InvalidRecord { index: usize, subject: u32 },
    #[error("coefficient vector has length {found}, expected {expected}")]
    CoefficientLength { expected: usize, found: usize },
}

/// Partial log-likelihood with its first two derivatives.
#[derive(Debug, Clone)]
pub struct CoxEval {
    pub loglik: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RobustVariance {
    /// Grouped jackknife; `exact` refits each replicate instead of taking one
    /// Newton step from the full-data estimate.
    Jackknife { exact: bool },
    /// Cluster sandwich built from score residuals.
    Sandwich,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoxOptions {
    pub robust: RobustVariance,
    pub max_iter: usize,
}

impl Default for CoxOptions {
    fn default() -> Self {
        Self {
            robust: RobustVariance::Jackknife { exact: false },
            max_iter: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CoxStatus {
    Converged,
    /// A coefficient diverged: the partial likelihood keeps increasing.
    MonotoneLikelihood {
        column: usize,
    },
    SingularInformation,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct CoxFit {
    pub coef: Vec<f64>,
    pub naive_cov: DMatrix<f64>,
    pub robust_cov: DMatrix<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub status: CoxStatus,
    pub n_events: usize,
    pub iterations: usize,
    /// Columns without contrast; their coefficients are held at zero.
    pub aliased: Vec<bool>,
}

impl CoxFit {
    /// Hazard ratio with a Wald 95% interval from the robust variance.
    pub fn hazard_ratio(&self, column: usize) -> (f64, f64, f64) {
        let b = self.coef[column];
        let se = self.robust_cov[(column, column)].max(0.0).sqrt();
        (b.exp(), (b - 1.96 * se).exp(), (b + 1.96 * se).exp())
    }

    pub fn robust_se(&self, column: usize) -> f64 {
        self.robust_cov[(column, column)].max(0.0).sqrt()
    }
}

/// Records sorted by decreasing gap, covariates centred, ties grouped.
struct RiskData {
    q: usize,
    x: Vec<f64>,
    event: Vec<bool>,
    cluster: Vec<usize>,
    /// Ranges into the sorted arrays, one per distinct gap, longest first.
    groups: Vec<(usize, usize)>,
    n_clusters: usize,
    /// Range of each covariate column.
    spans: Vec<f64>,
}

impl RiskData {
    fn new(records: &[GapRecord]) -> Result<Self, SurvError> {
        let first = records.first().ok_or(SurvError::Empty)?;
        let q = first.covariates.len();
        for (index, r) in records.iter().enumerate() {
            if r.covariates.len() != q {
                return Err(SurvError::DimensionMismatch {
                    index,
                    expected: q,
                    found: r.covariates.len(),
                });
            }
            if !(r.gap > 0.0 && r.gap.is_finite()) || r.covariates.iter().any(|c| !c.is_finite()) {
                return Err(SurvError::InvalidRecord {
                    index,
                    subject: r.subject_id,
                });
            }
        }
        if !records.iter().any(|r| r.observed) {
            return Err(SurvError::NoEvents);
        }
        let n = records.len() as f64;
        let means: Vec<f64> = (0..q)
            .map(|k| records.iter().map(|r| r.covariates[k]).sum::<f64>() / n)
            .collect();

        let mut order: Vec<usize> = (0..records.len()).collect();
        order.sort_by(|&a, &b| records[b].gap.total_cmp(&records[a].gap).then(a.cmp(&b)));
        let mut cluster_of: HashMap<u32, usize> = HashMap::new();
        for r in records {
            let next = cluster_of.len();
            cluster_of.entry(r.subject_id).or_insert(next);
        }
        let mut x = Vec::with_capacity(records.len() * q);
        let mut event = Vec::with_capacity(records.len());
        let mut cluster = Vec::with_capacity(records.len());
        let mut groups = Vec::new();
        let mut start = 0;
        for (pos, &i) in order.iter().enumerate() {
            let r = &records[i];
            x.extend(r.covariates.iter().zip(&means).map(|(c, m)| c - m));
            event.push(r.observed);
            cluster.push(cluster_of[&r.subject_id]);
            let last = pos + 1 == order.len() || records[order[pos + 1]].gap != r.gap;
            if last {
                groups.push((start, pos + 1));
                start = pos + 1;
            }
        }
        let spans = (0..q)
            .map(|k| {
                let (lo, hi) = records
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                        (lo.min(r.covariates[k]), hi.max(r.covariates[k]))
                    });
                hi - lo
            })
            .collect();
        Ok(Self {
            q,
            x,
            event,
            cluster,
            groups,
            n_clusters: cluster_of.len(),
            spans,
        })
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.q..(i + 1) * self.q]
    }

    fn column_is_constant(&self, k: usize) -> bool {
        let n = self.event.len();
        let first = self.x[k];
        (0..n).all(|i| self.x[i * self.q + k] == first)
    }

    /// Value, score and Hessian over the `active` columns, optionally
    /// leaving one cluster out.
    fn evaluate(
        &self,
        eta: &[f64],
        active: &[usize],
        skip: Option<usize>,
    ) -> (f64, DVector<f64>, DMatrix<f64>) {
        let m = active.len();
        let mut ll = 0.0;
        let mut u = DVector::zeros(m);
        let mut h = DMatrix::zeros(m, m);
        let mut s0 = 0.0;
        let mut s1 = DVector::zeros(m);
        let mut s2 = DMatrix::zeros(m, m);
        let mut xa = DVector::zeros(m);
        for &(a, b) in &self.groups {
            for i in a..b {
                if Some(self.cluster[i]) == skip {
                    continue;
                }
                let row = self.row(i);
                let lp: f64 = active.iter().map(|&k| row[k] * eta[k]).sum();
                let r = lp.exp();
                s0 += r;
                for (j, &k) in active.iter().enumerate() {
                    xa[j] = row[k];
                }
                s1.axpy(r, &xa, 1.0);
                s2.ger(r, &xa, &xa, 1.0);
            }
            if s0 == 0.0 {
                continue;
            }
            let xbar = &s1 / s0;
            let cov = &s2 / s0 - &xbar * xbar.transpose();
            for i in a..b {
                if !self.event[i] || Some(self.cluster[i]) == skip {
                    continue;
                }
                let row = self.row(i);
                let lp: f64 = active.iter().map(|&k| row[k] * eta[k]).sum();
                ll += lp - s0.ln();
                for (j, &k) in active.iter().enumerate() {
                    u[j] += row[k] - xbar[j];
                }
                h -= &cov;
            }
        }
        (ll, u, h)
    }

    /// Newton-Raphson with step halving, from `start`.
    fn newton(
        &self,
        start: &[f64],
        active: &[usize],
        skip: Option<usize>,
        max_iter: usize,
    ) -> NewtonOutcome {
        let mut eta = start.to_vec();
        let (mut ll, mut u, mut h) = self.evaluate(&eta, active, skip);
        let mut status = CoxStatus::MaxIterations;
        let mut iterations = 0;
        for it in 1..=max_iter {
            iterations = it;
            let info = -&h;
            let Some(chol) = info.cholesky() else {
                status = CoxStatus::SingularInformation;
                break;
            };
            let mut step = chol.solve(&u);
            // Newton decrement: predicted log-likelihood gain, free of covariate units.
            // Inside the quadratic region one more full step is free and squares the error.
            if u.dot(&step) <= 1e-14 {
                let mut trial = eta.clone();
                for (j, &k) in active.iter().enumerate() {
                    trial[k] += step[j];
                }
                let (ll_t, u_t, h_t) = self.evaluate(&trial, active, skip);
                if ll_t.is_finite() && ll_t >= ll - 1e-12 * ll.abs().max(1.0) {
                    (eta, ll, u, h) = (trial, ll_t, u_t, h_t);
                }
                status = CoxStatus::Converged;
                break;
            }
            let mut trial: Vec<f64>;
            let mut halvings = 0;
            loop {
                trial = eta.clone();
                for (j, &k) in active.iter().enumerate() {
                    trial[k] += step[j];
                }
                let (ll_t, u_t, h_t) = self.evaluate(&trial, active, skip);
                if ll_t.is_finite() && ll_t >= ll - 1e-12 * ll.abs().max(1.0) {
                    let small = max_abs(step.as_slice()) <= 1e-12;
                    eta = trial;
                    ll = ll_t;
                    u = u_t;
                    h = h_t;
                    if small {
                        status = CoxStatus::Converged;
                    }
                    break;
                }
                halvings += 1;
                if halvings > 30 {
                    status = CoxStatus::Converged;
                    break;
                }
                step /= 2.0;
            }
            if self.diverging(&eta, active).is_some() || status == CoxStatus::Converged {
                break;
            }
        }
        if status == CoxStatus::Converged && decrement(&h, &u) > 1e-8 {
            status = CoxStatus::MaxIterations;
        }
        // A flat score far out on the coefficient scale means the maximum is at infinity.
        if let Some(column) = self.diverging(&eta, active) {
            status = CoxStatus::MonotoneLikelihood { column };
        }
        NewtonOutcome {
            eta,
            loglik: ll,
            hessian: h,
            status,
            iterations,
        }
    }

    fn diverging(&self, eta: &[f64], active: &[usize]) -> Option<usize> {
        active
            .iter()
            .copied()
            .find(|&k| eta[k].abs() * self.spans[k] > MONOTONE_BOUND)
    }

    /// Per-cluster sums of score residuals at `eta`.
    fn cluster_scores(&self, eta: &[f64], active: &[usize]) -> Vec<DVector<f64>> {
        let m = active.len();
        let xa = |i: usize| DVector::from_iterator(m, active.iter().map(|&k| self.row(i)[k]));
        let risk = |i: usize| {
            active
                .iter()
                .map(|&k| self.row(i)[k] * eta[k])
                .sum::<f64>()
                .exp()
        };
        // Risk-set sums at each group, longest gap first.
        let mut xbar = Vec::with_capacity(self.groups.len());
        let mut s0s = Vec::with_capacity(self.groups.len());
        let mut s0 = 0.0;
        let mut s1 = DVector::zeros(m);
        for &(a, b) in &self.groups {
            for i in a..b {
                let r = risk(i);
                s0 += r;
                s1.axpy(r, &xa(i), 1.0);
            }
            xbar.push(&s1 / s0);
            s0s.push(s0);
        }
        // Cumulative hazard increments from the shortest gap upwards.
        let mut scores = vec![DVector::zeros(m); self.n_clusters];
        let mut cum_a = 0.0;
        let mut cum_b = DVector::zeros(m);
        for (g, &(a, b)) in self.groups.iter().enumerate().rev() {
            let events = (a..b).filter(|&i| self.event[i]).count() as f64;
            cum_a += events / s0s[g];
            cum_b.axpy(events / s0s[g], &xbar[g], 1.0);
            for i in a..b {
                let x = xa(i);
                let mut s = -(&x * cum_a - &cum_b) * risk(i);
                if self.event[i] {
                    s += &x - &xbar[g];
                }
                scores[self.cluster[i]] += s;
            }
        }
        scores
    }
}

struct NewtonOutcome {
    eta: Vec<f64>,
    loglik: f64,
    hessian: DMatrix<f64>,
    status: CoxStatus,
    iterations: usize,
}

/// Log hazard ratio across a covariate's range beyond which the coefficient
/// is treated as diverging.
const MONOTONE_BOUND: f64 = 15.0;

/// `u' (-H)^{-1} u`, infinite when `-H` is not positive definite.
fn decrement(h: &DMatrix<f64>, u: &DVector<f64>) -> f64 {
    match (-h).cholesky() {
        Some(chol) => u.dot(&chol.solve(u)),
        None => f64::INFINITY,
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Breslow partial log-likelihood on the gap-time scale.
pub fn cox_partial_loglik(eta: &[f64], records: &[GapRecord]) -> Result<CoxEval, SurvError> {
    let data = RiskData::new(records)?;
    if eta.len() != data.q {
        return Err(SurvError::CoefficientLength {
            expected: data.q,
            found: eta.len(),
        });
    }
    let active: Vec<usize> = (0..data.q).collect();
    // Centring the covariates leaves the partial likelihood unchanged.
    let (ll, gradient, hessian) = data.evaluate(eta, &active, None);
    Ok(CoxEval {
        loglik: ll,
        gradient,
        hessian,
    })
}

pub fn fit_andersen_gill(records: &[GapRecord]) -> Result<CoxFit, SurvError> {
    fit_andersen_gill_with(records, &CoxOptions::default())
}

pub fn fit_andersen_gill_with(
    records: &[GapRecord],
    opts: &CoxOptions,
) -> Result<CoxFit, SurvError> {
    let data = RiskData::new(records)?;
    let q = data.q;
    let aliased: Vec<bool> = (0..q).map(|k| data.column_is_constant(k)).collect();
    let active: Vec<usize> = (0..q).filter(|&k| !aliased[k]).collect();
    let n_events = data.event.iter().filter(|&&e| e).count();
    let m = active.len();

    let outcome = data.newton(&vec![0.0; q], &active, None, opts.max_iter);
    let converged = outcome.status == CoxStatus::Converged;

    let embed = |small: &DMatrix<f64>| {
        let mut full = DMatrix::zeros(q, q);
        for (i, &ki) in active.iter().enumerate() {
            for (j, &kj) in active.iter().enumerate() {
                full[(ki, kj)] = small[(i, j)];
            }
        }
        full
    };
    let naive_small = if m == 0 {
        Some(DMatrix::zeros(0, 0))
    } else {
        (-&outcome.hessian).cholesky().map(|c| c.inverse())
    };
    let (naive_cov, robust_cov) = match (&naive_small, converged) {
        (Some(naive), true) => {
            let robust = match opts.robust {
                RobustVariance::Jackknife { exact } => {
                    jackknife(&data, &outcome.eta, &active, exact, opts.max_iter)
                }
                RobustVariance::Sandwich => sandwich(&data, &outcome.eta, &active, naive),
            };
            (embed(naive), embed(&robust))
        }
        _ => {
            let nan = DMatrix::from_element(q, q, f64::NAN);
            (nan.clone(), nan)
        }
    };
    Ok(CoxFit {
        coef: outcome.eta,
        naive_cov,
        robust_cov,
        loglik: outcome.loglik,
        converged,
        status: outcome.status,
        n_events,
        iterations: outcome.iterations,
        aliased,
    })
}

/// `(K - 1) / K * sum_i (theta_(-i) - mean)(theta_(-i) - mean)'`.
fn jackknife(
    data: &RiskData,
    eta: &[f64],
    active: &[usize],
    exact: bool,
    max_iter: usize,
) -> DMatrix<f64> {
    let m = active.len();
    let k = data.n_clusters;
    let replicates: Vec<DVector<f64>> = (0..k)
        .map(|i| {
            let est = if exact {
                data.newton(eta, active, Some(i), max_iter).eta
            } else {
                let (_, u, h) = data.evaluate(eta, active, Some(i));
                let mut e = eta.to_vec();
                if let Some(chol) = (-h).cholesky() {
                    let step = chol.solve(&u);
                    for (j, &c) in active.iter().enumerate() {
                        e[c] += step[j];
                    }
                }
                e
            };
            DVector::from_iterator(m, active.iter().map(|&c| est[c]))
        })
        .collect();
    jackknife_covariance(&replicates)
}

pub(crate) fn jackknife_covariance(replicates: &[DVector<f64>]) -> DMatrix<f64> {
    let k = replicates.len();
    let m = replicates.first().map_or(0, |r| r.len());
    if k < 2 {
        return DMatrix::from_element(m, m, f64::NAN);
    }
    let mean = replicates.iter().fold(DVector::zeros(m), |acc, r| acc + r) / k as f64;
    let mut cov = DMatrix::zeros(m, m);
    for r in replicates {
        let d = r - &mean;
        cov.ger(1.0, &d, &d, 1.0);
    }
    cov * ((k as f64 - 1.0) / k as f64)
}

fn sandwich(data: &RiskData, eta: &[f64], active: &[usize], naive: &DMatrix<f64>) -> DMatrix<f64> {
    let m = active.len();
    let mut meat = DMatrix::zeros(m, m);
    for s in data.cluster_scores(eta, active) {
        meat.ger(1.0, &s, &s, 1.0);
    }
    naive * meat * naive
}
