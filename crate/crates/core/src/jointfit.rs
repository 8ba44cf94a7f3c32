//! Joint model for the visit process and the outcome (model A).
//!
//! Gap times follow a Weibull proportional-hazards model with a shared normal
//! frailty `u`; outcomes follow a random-intercept linear model in which `u`
//! enters with loading `gamma`:
//!
//! ```text
//! r(t | z, u) = lambda p t^(p-1) exp(beta z + u)
//! y_ij        = alpha0 + alpha1 z_i + alpha2 t_ij + gamma u_i + v_i + e_ij
//! ```
//!
//! The random intercept `v` is integrated analytically, leaving a
//! one-dimensional integral over `u` per subject. After collecting sufficient
//! statistics, the log integrand of subject `i` is
//!
//! ```text
//! g(u) = c + a u - b u^2 - K exp(u)
//! ```
//!
//! which is evaluated by Gauss-Hermite quadrature, either on the prior scale
//! of `u` or recentred at the mode of `g` (adaptive).

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::dgm::Truth;
use crate::domain::{FitResult, ModelLabel, PanelDataset, ParamEstimate, Subject};
use crate::lmm::{fit_lmm_detailed, LmmError, LmmSpec};
use crate::optim::{fd_hessian, max_abs, minimize, pairwise_sum, spd_inverse, BfgsOptions};
use crate::quadrature::{QuadratureError, QuadratureRule};
use crate::survfit::fit_andersen_gill;

#[derive(Debug, Error)]
pub enum JointError {
    #[error("panel needs at least 2 subjects, found {0}")]
    TooFewSubjects(usize),
    #[error("non-finite likelihood contribution for subject {subject}")]
    NonFinite { subject: u32 },
    #[error("invalid parameter vector: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error("starting values: {0}")]
    Start(#[from] LmmError),
}

/// Number of free parameters.
pub const N_PARAMS: usize = 10;

const BETA: usize = 0;
const LN_LAMBDA: usize = 1;
const LN_P: usize = 2;
const ALPHA0: usize = 3;
const GAMMA: usize = 6;
const LN_SU: usize = 7;
const LN_SV: usize = 8;
const LN_SE: usize = 9;

/// Joint-model parameters; scale parameters are stored on the log scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointParams {
    pub beta: f64,
    pub ln_lambda: f64,
    pub ln_p: f64,
    pub alpha: [f64; 3],
    pub gamma: f64,
    pub ln_sigma_u: f64,
    pub ln_sigma_v: f64,
    pub ln_sigma_e: f64,
}

impl JointParams {
    /// Order: beta, ln lambda, ln p, alpha0..2, gamma, ln sigma_u, ln sigma_v, ln sigma_e.
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.beta,
            self.ln_lambda,
            self.ln_p,
            self.alpha[0],
            self.alpha[1],
            self.alpha[2],
            self.gamma,
            self.ln_sigma_u,
            self.ln_sigma_v,
            self.ln_sigma_e,
        ]
    }

    pub fn from_slice(x: &[f64]) -> Result<Self, JointError> {
        if x.len() != N_PARAMS {
            return Err(JointError::InvalidParams(format!(
                "expected {N_PARAMS} values, got {}",
                x.len()
            )));
        }
        let p = Self {
            beta: x[0],
            ln_lambda: x[1],
            ln_p: x[2],
            alpha: [x[3], x[4], x[5]],
            gamma: x[6],
            ln_sigma_u: x[7],
            ln_sigma_v: x[8],
            ln_sigma_e: x[9],
        };
        p.check()?;
        Ok(p)
    }

    /// Parameters of the generating model.
    pub fn from_truth(t: &Truth) -> Self {
        Self {
            beta: t.beta,
            ln_lambda: t.lambda.ln(),
            ln_p: t.p.ln(),
            alpha: [t.alpha0, t.alpha1, t.alpha2],
            gamma: t.gamma,
            ln_sigma_u: 0.5 * t.sigma2_u.ln(),
            ln_sigma_v: 0.5 * t.sigma2_v.ln(),
            ln_sigma_e: 0.5 * t.sigma2_e.ln(),
        }
    }

    pub fn lambda(&self) -> f64 {
        self.ln_lambda.exp()
    }

    pub fn p(&self) -> f64 {
        self.ln_p.exp()
    }

    pub fn sigma2_u(&self) -> f64 {
        (2.0 * self.ln_sigma_u).exp()
    }

    pub fn sigma2_v(&self) -> f64 {
        (2.0 * self.ln_sigma_v).exp()
    }

    pub fn sigma2_e(&self) -> f64 {
        (2.0 * self.ln_sigma_e).exp()
    }

    fn check(&self) -> Result<(), JointError> {
        let v = self.to_vec();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(JointError::InvalidParams("non-finite value".into()));
        }
        let scales = [
            self.lambda(),
            self.p(),
            self.sigma2_u(),
            self.sigma2_v(),
            self.sigma2_e(),
        ];
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(JointError::InvalidParams(
                "scale parameter overflows".into(),
            ));
        }
        Ok(())
    }
}

/// How the integral over the frailty is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Integration {
    /// Nodes recentred and rescaled at the mode of each subject's integrand.
    #[default]
    Adaptive,
    /// Nodes placed on the prior distribution of `u`.
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointOptions {
    pub order: usize,
    pub integration: Integration,
    pub bfgs: BfgsOptions,
    /// Newton steps on the finite-difference Hessian after BFGS.
    pub polish_steps: usize,
}

impl Default for JointOptions {
    fn default() -> Self {
        Self {
            order: 25,
            integration: Integration::Adaptive,
            bfgs: BfgsOptions::default(),
            polish_steps: 3,
        }
    }
}

/// Per-subject data reduced to what the likelihood needs.
#[derive(Debug, Clone)]
struct SubjectData {
    id: u32,
    z: f64,
    events: f64,
    /// Sum of log gap lengths over observed gaps.
    ln_event_gaps: f64,
    gaps: Vec<f64>,
    ln_gaps: Vec<f64>,
    times: Vec<f64>,
    y: Vec<f64>,
}

impl SubjectData {
    fn new(s: &Subject) -> Self {
        let n = s.n_visits();
        let mut gaps = Vec::with_capacity(n);
        let mut ln_event_gaps = 0.0;
        for j in 0..n {
            let end = if j + 1 < n {
                s.visit_times[j + 1]
            } else {
                s.censoring_time
            };
            let g = end - s.visit_times[j];
            if j + 1 < n {
                ln_event_gaps += g.ln();
            }
            gaps.push(g);
        }
        // A zero-length censored gap contributes nothing to the cumulative hazard.
        let ln_gaps = gaps
            .iter()
            .map(|g: &f64| if *g > 0.0 { g.ln() } else { 0.0 })
            .collect();
        Self {
            id: s.id,
            z: s.z(),
            events: (n - 1) as f64,
            ln_event_gaps,
            gaps,
            ln_gaps,
            times: s.visit_times.clone(),
            y: s.outcomes.clone(),
        }
    }
}

/// Coefficients of `g(u) = c + a u - b u^2 - K e^u` and their parameter
/// derivatives; `c` and `b` include the normal prior on `u`.
struct Coefs {
    c: f64,
    a: f64,
    b: f64,
    k: f64,
    dc: [f64; N_PARAMS],
    da: [f64; N_PARAMS],
    db: [f64; N_PARAMS],
    dk: [f64; N_PARAMS],
}

fn coefficients(s: &SubjectData, th: &JointParams) -> Coefs {
    let mut dc = [0.0; N_PARAMS];
    let mut da = [0.0; N_PARAMS];
    let mut db = [0.0; N_PARAMS];
    let mut dk = [0.0; N_PARAMS];

    // Visit process.
    let lambda = th.lambda();
    let p = th.p();
    let scale = lambda * (th.beta * s.z).exp();
    let mut sum_tp = 0.0;
    let mut sum_tp_ln = 0.0;
    for (g, lg) in s.gaps.iter().zip(&s.ln_gaps) {
        if *g > 0.0 {
            let tp = (p * lg).exp();
            sum_tp += tp;
            sum_tp_ln += tp * lg;
        }
    }
    let k = scale * sum_tp;
    let d = s.events;
    let c_rec = d * (th.beta * s.z + th.ln_lambda + th.ln_p) + (p - 1.0) * s.ln_event_gaps;
    dc[BETA] = d * s.z;
    dk[BETA] = k * s.z;
    dc[LN_LAMBDA] = d;
    dk[LN_LAMBDA] = k;
    dc[LN_P] = d + p * s.ln_event_gaps;
    dk[LN_P] = scale * p * sum_tp_ln;

    // Outcome, with v integrated out: y ~ N(X alpha + gamma u 1, w J + e I).
    let n = s.y.len() as f64;
    let w = th.sigma2_v();
    let e = th.sigma2_e();
    let den = e + n * w;
    let cw = w / den;
    let xsum = [n, n * s.z, s.times.iter().sum::<f64>()];
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    let mut xr = [0.0; 3];
    for (t, y) in s.times.iter().zip(&s.y) {
        let r = y - th.alpha[0] - th.alpha[1] * s.z - th.alpha[2] * t;
        s1 += r;
        s2 += r * r;
        xr[0] += r;
        xr[2] += t * r;
    }
    xr[1] = s.z * xr[0];
    let q0 = (s2 - cw * s1 * s1) / e;
    let logdet = (n - 1.0) * e.ln() + den.ln();
    let ly0 = -0.5 * (n * (2.0 * PI).ln() + logdet + q0);
    let sm = s1 / den;
    let m = n / den;
    let g = th.gamma;

    for kx in 0..3 {
        dc[ALPHA0 + kx] = (xr[kx] - cw * xsum[kx] * s1) / e;
        da[ALPHA0 + kx] = -g * xsum[kx] / den;
    }
    da[GAMMA] = sm;
    db[GAMMA] = g * m;

    // ln sigma_v
    {
        let dden = 2.0 * n * w;
        let dm = -n * dden / (den * den);
        let ds = -s1 * dden / (den * den);
        let dlogdet = dden / den;
        let dq0 = -2.0 * w * s1 * s1 / (den * den);
        dc[LN_SV] = -0.5 * (dlogdet + dq0);
        da[LN_SV] = g * ds;
        db[LN_SV] = 0.5 * g * g * dm;
    }
    // ln sigma_e
    {
        let dden = 2.0 * e;
        let dm = -n * dden / (den * den);
        let ds = -s1 * dden / (den * den);
        let dlogdet = 2.0 * (n - 1.0) + dden / den;
        let vr2 = (s2 - 2.0 * cw * s1 * s1 + n * cw * cw * s1 * s1) / (e * e);
        let dq0 = -2.0 * e * vr2;
        dc[LN_SE] = -0.5 * (dlogdet + dq0);
        da[LN_SE] = g * ds;
        db[LN_SE] = 0.5 * g * g * dm;
    }

    // Prior on u.
    let su2 = th.sigma2_u();
    dc[LN_SU] = -1.0;
    db[LN_SU] = -1.0 / su2;

    Coefs {
        c: c_rec + ly0 - 0.5 * (2.0 * PI * su2).ln(),
        a: d + g * sm,
        b: 0.5 * (g * g * m + 1.0 / su2),
        k,
        dc,
        da,
        db,
        dk,
    }
}

impl Coefs {
    fn g(&self, u: f64) -> f64 {
        self.c + self.a * u - self.b * u * u - self.k * u.exp()
    }

    fn g1(&self, u: f64) -> f64 {
        self.a - 2.0 * self.b * u - self.k * u.exp()
    }

    /// Root of `g'`, which is strictly decreasing in `u`.
    fn mode(&self) -> f64 {
        let f0 = self.g1(0.0);
        if f0 == 0.0 {
            return 0.0;
        }
        let (mut lo, mut hi) = if f0 > 0.0 {
            let mut hi = self.a / (2.0 * self.b);
            if self.k > 0.0 {
                hi = hi.min((self.a / self.k).ln());
            }
            (0.0, hi)
        } else {
            ((self.a - self.k) / (2.0 * self.b), 0.0)
        };
        let mut u = if f0 > 0.0 { lo } else { hi };
        for _ in 0..200 {
            let f = self.g1(u);
            if f == 0.0 {
                return u;
            }
            if f > 0.0 {
                lo = u;
            } else {
                hi = u;
            }
            let slope = -2.0 * self.b - self.k * u.exp();
            let mut next = u - f / slope;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - u).abs() <= 1e-14 * (1.0 + u.abs()) || hi - lo <= 1e-14 * (1.0 + u.abs()) {
                return next;
            }
            u = next;
        }
        u
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log integral over `u` of one subject, and optionally its gradient.
fn subject_contribution(
    s: &SubjectData,
    th: &JointParams,
    rule: &QuadratureRule,
    mode: Integration,
    grad: Option<&mut [f64; N_PARAMS]>,
) -> f64 {
    let cf = coefficients(s, th);
    let nodes = rule.nodes();
    let weights = rule.weights();
    let mut terms = Vec::with_capacity(nodes.len());
    let mut us = Vec::with_capacity(nodes.len());
    match mode {
        Integration::Adaptive => {
            let u_hat = cf.mode();
            let h = 2.0 * cf.b + cf.k * u_hat.exp();
            let s_hat = h.sqrt().recip();
            for (x, w) in nodes.iter().zip(weights) {
                let u = u_hat + s_hat * x;
                us.push(u);
                terms.push(w.ln() + cf.g(u) + 0.5 * x * x);
            }
            let lse = log_sum_exp(&terms);
            let value = s_hat.ln() + 0.5 * (2.0 * PI).ln() + lse;
            if let Some(grad) = grad {
                let eu = u_hat.exp();
                let nodes_eu: Vec<f64> = us.iter().map(|u| u.exp()).collect();
                let pis: Vec<f64> = terms.iter().map(|t| (t - lse).exp()).collect();
                let slopes: Vec<f64> = us
                    .iter()
                    .zip(&nodes_eu)
                    .map(|(u, e)| cf.a - 2.0 * cf.b * u - cf.k * e)
                    .collect();
                for j in 0..N_PARAMS {
                    let dg1 = cf.da[j] - 2.0 * cf.db[j] * u_hat - cf.dk[j] * eu;
                    let du = dg1 / h;
                    let dh = 2.0 * cf.db[j] + cf.dk[j] * eu + cf.k * eu * du;
                    let rel_ds = -0.5 * dh / h;
                    let ds = s_hat * rel_ds;
                    let mut acc = 0.0;
                    for k in 0..us.len() {
                        let u = us[k];
                        let g_j =
                            cf.dc[j] + cf.da[j] * u - cf.db[j] * u * u - cf.dk[j] * nodes_eu[k];
                        acc += pis[k] * (g_j + slopes[k] * (du + nodes[k] * ds));
                    }
                    grad[j] = rel_ds + acc;
                }
            }
            value
        }
        Integration::Standard => {
            // Drop the prior from g: the nodes already carry it.
            let su = th.ln_sigma_u.exp();
            let c = cf.c + 0.5 * (2.0 * PI * su * su).ln();
            let b = cf.b - 0.5 / (su * su);
            let h_fn = |u: f64| c + cf.a * u - b * u * u - cf.k * u.exp();
            for (x, w) in nodes.iter().zip(weights) {
                let u = su * x;
                us.push(u);
                terms.push(w.ln() + h_fn(u));
            }
            let lse = log_sum_exp(&terms);
            if let Some(grad) = grad {
                let nodes_eu: Vec<f64> = us.iter().map(|u| u.exp()).collect();
                let pis: Vec<f64> = terms.iter().map(|t| (t - lse).exp()).collect();
                for j in 0..N_PARAMS {
                    let (dcj, dbj) = if j == LN_SU {
                        (0.0, 0.0)
                    } else {
                        (cf.dc[j], cf.db[j])
                    };
                    let mut acc = 0.0;
                    for k in 0..us.len() {
                        let (u, eu) = (us[k], nodes_eu[k]);
                        let mut d = dcj + cf.da[j] * u - dbj * u * u - cf.dk[j] * eu;
                        if j == LN_SU {
                            d += (cf.a - 2.0 * b * u - cf.k * eu) * u;
                        }
                        acc += pis[k] * d;
                    }
                    grad[j] = acc;
                }
            }
            lse
        }
    }
}

/// Precomputed panel plus quadrature rule.
struct JointProblem {
    subjects: Vec<SubjectData>,
    rule: QuadratureRule,
    mode: Integration,
}

impl JointProblem {
    fn new(panel: &PanelDataset, rule: QuadratureRule, mode: Integration) -> Self {
        Self {
            subjects: panel.subjects.iter().map(SubjectData::new).collect(),
            rule,
            mode,
        }
    }

    fn contributions(&self, th: &JointParams) -> Vec<f64> {
        self.subjects
            .par_iter()
            .with_min_len(32)
            .map(|s| subject_contribution(s, th, &self.rule, self.mode, None))
            .collect()
    }

    fn loglik(&self, th: &JointParams) -> Result<f64, JointError> {
        let parts = self.contributions(th);
        if let Some(i) = parts.iter().position(|v| !v.is_finite()) {
            return Err(JointError::NonFinite {
                subject: self.subjects[i].id,
            });
        }
        Ok(pairwise_sum(&parts))
    }

    /// Log-likelihood and gradient; non-finite on failure.
    fn loglik_grad(&self, th: &JointParams, grad: &mut [f64]) -> f64 {
        let parts: Vec<(f64, [f64; N_PARAMS])> = self
            .subjects
            .par_iter()
            .with_min_len(32)
            .map(|s| {
                let mut g = [0.0; N_PARAMS];
                let v = subject_contribution(s, th, &self.rule, self.mode, Some(&mut g));
                (v, g)
            })
            .collect();
        let values: Vec<f64> = parts.iter().map(|p| p.0).collect();
        let mut column = vec![0.0; parts.len()];
        for (j, gj) in grad.iter_mut().enumerate() {
            for (slot, p) in column.iter_mut().zip(&parts) {
                *slot = p.1[j];
            }
            *gj = pairwise_sum(&column);
        }
        pairwise_sum(&values)
    }
}

/// Joint log-likelihood, integrating the frailty with the default
/// (adaptive) Gauss-Hermite rule.
pub fn joint_loglik(
    params: &JointParams,
    panel: &PanelDataset,
    rule: &QuadratureRule,
) -> Result<f64, JointError> {
    joint_loglik_with(params, panel, rule, Integration::default())
}

pub fn joint_loglik_with(
    params: &JointParams,
    panel: &PanelDataset,
    rule: &QuadratureRule,
    mode: Integration,
) -> Result<f64, JointError> {
    params.check()?;
    JointProblem::new(panel, rule.clone(), mode).loglik(params)
}

/// Log-likelihood with its gradient in the order of [`JointParams::to_vec`].
pub fn joint_loglik_grad(
    params: &JointParams,
    panel: &PanelDataset,
    rule: &QuadratureRule,
    mode: Integration,
) -> Result<(f64, Vec<f64>), JointError> {
    params.check()?;
    let problem = JointProblem::new(panel, rule.clone(), mode);
    let mut grad = vec![0.0; N_PARAMS];
    let value = problem.loglik_grad(params, &mut grad);
    if !value.is_finite() {
        // Locate the offending subject.
        problem.loglik(params)?;
    }
    Ok((value, grad))
}

/// Per-subject log contributions `(subject_id, value)`, in panel order.
pub fn joint_loglik_contributions(
    params: &JointParams,
    panel: &PanelDataset,
    rule: &QuadratureRule,
    mode: Integration,
) -> Result<Vec<(u32, f64)>, JointError> {
    params.check()?;
    let problem = JointProblem::new(panel, rule.clone(), mode);
    let parts = problem.contributions(params);
    Ok(problem.subjects.iter().map(|s| s.id).zip(parts).collect())
}

/// Marginal log-likelihood of the visit process alone under the Weibull
/// frailty model, by Gauss-Hermite quadrature recentred at each subject's
/// mode. Written directly from the gap records, independently of the joint
/// likelihood code, so that the two can be checked against each other.
pub fn weibull_frailty_loglik(
    params: &JointParams,
    panel: &PanelDataset,
    rule: &QuadratureRule,
) -> f64 {
    let (lambda, p) = (params.lambda(), params.p());
    let s2 = params.sigma2_u();
    let parts: Vec<f64> = panel
        .subject_gaps()
        .map(|(s, gaps)| {
            let bz = params.beta * s.z();
            let mut base = -0.5 * (2.0 * PI * s2).ln();
            let mut d = 0.0;
            let mut k = 0.0;
            for r in gaps {
                if r.observed {
                    base += (lambda * p).ln() + (p - 1.0) * r.gap.ln() + bz;
                    d += 1.0;
                }
                k += lambda * r.gap.powf(p) * bz.exp();
            }
            let g = |u: f64| base + d * u - k * u.exp() - u * u / (2.0 * s2);
            // g is strictly concave; Newton from the prior mean with a bisection bracket.
            let (mut lo, mut hi) = (-50.0f64, 50.0f64);
            let mut u = 0.0f64;
            for _ in 0..200 {
                let score = d - k * u.exp() - u / s2;
                let step = score / (k * u.exp() + 1.0 / s2);
                if step.abs() < 1e-13 * (1.0 + u.abs()) {
                    break;
                }
                if score > 0.0 {
                    lo = u;
                } else {
                    hi = u;
                }
                let next = u + step;
                u = if next > lo && next < hi {
                    next
                } else {
                    0.5 * (lo + hi)
                };
            }
            let scale = (k * u.exp() + 1.0 / s2).powf(-0.5);
            let terms: Vec<f64> = rule
                .nodes()
                .iter()
                .zip(rule.weights())
                .map(|(x, w)| w.ln() + 0.5 * x * x + g(u + scale * x))
                .collect();
            scale.ln() + 0.5 * (2.0 * PI).ln() + log_sum_exp(&terms)
        })
        .collect();
    pairwise_sum(&parts)
}

/// Weibull regression without frailty, started at `beta0`.
fn weibull_start(panel: &PanelDataset, beta0: f64) -> [f64; 3] {
    let recs = &panel.gap_records;
    let events = recs.iter().filter(|r| r.observed).count() as f64;
    let exposure: f64 = recs.iter().map(|r| r.gap).sum();
    let x0 = [beta0, (events.max(1.0) / exposure.max(1e-12)).ln(), 0.0];
    let data: Vec<(f64, f64, bool)> = recs
        .iter()
        .filter(|r| r.gap > 0.0)
        .map(|r| (r.covariates[0], r.gap.ln(), r.observed))
        .collect();
    let objective = |x: &[f64], g: &mut [f64]| -> f64 {
        let (b, ll, lp) = (x[0], x[1], x[2]);
        let p = lp.exp();
        let mut f = 0.0;
        g.iter_mut().for_each(|v| *v = 0.0);
        for &(z, lt, d) in &data {
            let h = (ll + b * z + p * lt).exp();
            if d {
                f += b * z + ll + lp + (p - 1.0) * lt;
                g[0] += z;
                g[1] += 1.0;
                g[2] += 1.0 + p * lt;
            }
            f -= h;
            g[0] -= h * z;
            g[1] -= h;
            g[2] -= h * p * lt;
        }
        g.iter_mut().for_each(|v| *v = -*v);
        -f
    };
    let min = minimize(objective, &x0, None, &BfgsOptions::default());
    if min.f.is_finite() && min.x.iter().all(|v| v.is_finite() && v.abs() < 20.0) {
        [min.x[0], min.x[1], min.x[2]]
    } else {
        x0
    }
}

/// Fitted joint model with the covariance of the free parameters.
#[derive(Debug, Clone)]
pub struct JointFit {
    pub params: JointParams,
    pub loglik: f64,
    pub covariance: Option<DMatrix<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl JointFit {
    pub fn to_fit_result(&self) -> FitResult {
        let th = &self.params;
        let se = |k: usize| {
            self.covariance
                .as_ref()
                .map_or(f64::NAN, |c| c[(k, k)].max(0.0).sqrt())
        };
        let entry = |name: &str, estimate: f64, se: f64| ParamEstimate {
            name: name.into(),
            estimate,
            se,
        };
        let params = vec![
            entry("alpha0", th.alpha[0], se(ALPHA0)),
            entry("alpha1", th.alpha[1], se(ALPHA0 + 1)),
            entry("alpha2", th.alpha[2], se(ALPHA0 + 2)),
            entry("gamma", th.gamma, se(GAMMA)),
            entry("beta", th.beta, se(BETA)),
            entry("lambda", th.lambda(), th.lambda() * se(LN_LAMBDA)),
            entry("p", th.p(), th.p() * se(LN_P)),
            entry("sigma2_u", th.sigma2_u(), 2.0 * th.sigma2_u() * se(LN_SU)),
            entry("sigma2_v", th.sigma2_v(), 2.0 * th.sigma2_v() * se(LN_SV)),
            entry("sigma2_e", th.sigma2_e(), 2.0 * th.sigma2_e() * se(LN_SE)),
        ];
        debug_assert!(params
            .iter()
            .map(|p| p.name.as_str())
            .eq(ModelLabel::A.param_names().iter().copied()));
        FitResult {
            model: ModelLabel::A,
            params,
            loglik: Some(self.loglik),
            converged: self.converged,
            iterations: self.iterations,
        }
    }
}

pub fn fit_joint(panel: &PanelDataset, opts: &JointOptions) -> Result<FitResult, JointError> {
    Ok(fit_joint_detailed(panel, opts)?.to_fit_result())
}

pub fn fit_joint_detailed(
    panel: &PanelDataset,
    opts: &JointOptions,
) -> Result<JointFit, JointError> {
    if panel.n_subjects() < 2 {
        return Err(JointError::TooFewSubjects(panel.n_subjects()));
    }
    if (panel.n_events() as f64) < panel.n_subjects() as f64 {
        log::warn!(
            "joint model: {} events for {} subjects; the frailty is weakly identified",
            panel.n_events(),
            panel.n_subjects()
        );
    }
    let rule = QuadratureRule::gauss_hermite(opts.order)?;
    let problem = JointProblem::new(panel, rule, opts.integration);
    let x0 = start_values(panel)?;

    let objective = |x: &[f64], g: &mut [f64]| -> f64 {
        let Ok(th) = JointParams::from_slice(x) else {
            return f64::NAN;
        };
        let v = problem.loglik_grad(&th, g);
        g.iter_mut().for_each(|v| *v = -*v);
        -v
    };
    let neg_grad = |x: &[f64], g: &mut [f64]| {
        objective(x, g);
    };

    let h0 = fd_hessian(neg_grad, &x0, 1e-4);
    let min = minimize(objective, &x0, spd_inverse(&h0), &opts.bfgs);
    let mut x = min.x.clone();
    let mut f = min.f;
    let mut g = min.grad.clone();
    let mut ok = min.converged();

    // Newton polish: sharpens the optimum and supplies the information matrix.
    let mut hess = fd_hessian(neg_grad, &x, 1e-5);
    for _ in 0..opts.polish_steps {
        let Some(cov) = spd_inverse(&hess) else { break };
        if max_abs(&g) <= 1e-9 {
            break;
        }
        let step = &cov * nalgebra::DVector::from_column_slice(&g);
        let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a - s).collect();
        let mut gt = vec![0.0; N_PARAMS];
        let ft = objective(&trial, &mut gt);
        if !(ft.is_finite() && ft <= f + 1e-10 * f.abs().max(1.0)) {
            break;
        }
        x = trial;
        f = ft;
        g = gt;
        hess = fd_hessian(neg_grad, &x, 1e-5);
    }
    if max_abs(&g) <= 1e-4 {
        ok = ok || min.f.is_finite();
    }
    let covariance = spd_inverse(&hess);
    let params = JointParams::from_slice(&x)?;
    let converged =
        ok && covariance.is_some() && f.is_finite() && max_abs(&g) <= opts.bfgs.stall_gtol;
    Ok(JointFit {
        params,
        loglik: -f,
        covariance,
        converged,
        iterations: min.iterations,
        grad_norm: max_abs(&g),
    })
}

fn start_values(panel: &PanelDataset) -> Result<Vec<f64>, JointError> {
    let lmm = fit_lmm_detailed(panel, LmmSpec::MODEL_D, &BfgsOptions::default())?;
    let ag_beta = fit_andersen_gill(&panel.gap_records)
        .ok()
        .filter(|f| f.converged)
        .map_or(0.0, |f| f.coef[0]);
    let [beta, ln_lambda, ln_p] = weibull_start(panel, ag_beta);
    let a = &lmm.params.alpha;
    Ok(JointParams {
        beta,
        ln_lambda,
        ln_p,
        alpha: [a[0], a[1], a[2]],
        gamma: 0.0,
        ln_sigma_u: 0.5f64.ln(),
        ln_sigma_v: 0.5 * lmm.params.sigma2_v.max(1e-6).ln(),
        ln_sigma_e: 0.5 * lmm.params.sigma2_e.max(1e-6).ln(),
    }
    .to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgm::{simulate, ScenarioConfig};
    use crate::rng::DatasetSeed;

    fn panel(preset: &str, n: usize, rep: u32) -> PanelDataset {
        let mut cfg = ScenarioConfig::preset(preset).unwrap();
        cfg.n_subjects = n;
        simulate(&cfg, DatasetSeed::new(cfg.seed, rep)).unwrap()
    }

    fn perturbed(base: &JointParams, k: usize) -> JointParams {
        let mut x = base.to_vec();
        for (j, v) in x.iter_mut().enumerate() {
            *v += 0.1 * (((j * 7 + k * 13) % 11) as f64 / 10.0 - 0.5);
        }
        JointParams::from_slice(&x).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let panel = panel("jm_g15_l030", 25, 1);
        let rule = QuadratureRule::gauss_hermite(15).unwrap();
        let truth = JointParams::from_truth(&ScenarioConfig::preset("jm_g15_l030").unwrap().truth);
        for mode in [Integration::Adaptive, Integration::Standard] {
            for k in 0..4 {
                let th = perturbed(&truth, k);
                let (_, g) = joint_loglik_grad(&th, &panel, &rule, mode).unwrap();
                let x = th.to_vec();
                for j in 0..N_PARAMS {
                    let h = 1e-6;
                    let mut xp = x.clone();
                    xp[j] += h;
                    let mut xm = x.clone();
                    xm[j] -= h;
                    let fp = joint_loglik_with(
                        &JointParams::from_slice(&xp).unwrap(),
                        &panel,
                        &rule,
                        mode,
                    )
                    .unwrap();
                    let fm = joint_loglik_with(
                        &JointParams::from_slice(&xm).unwrap(),
                        &panel,
                        &rule,
                        mode,
                    )
                    .unwrap();
                    let fd = (fp - fm) / (2.0 * h);
                    assert!(
                        (fd - g[j]).abs() <= 1e-5 * fd.abs().max(1.0),
                        "{mode:?} point {k} param {j}: fd {fd} analytic {}",
                        g[j]
                    );
                }
            }
        }
    }

    #[test]
    fn adaptive_rule_is_converged_at_order_25() {
        let panel = panel("jm_g15_l100", 30, 2);
        let truth = JointParams::from_truth(&ScenarioConfig::preset("jm_g15_l100").unwrap().truth);
        let r25 = QuadratureRule::gauss_hermite(25).unwrap();
        let r50 = QuadratureRule::gauss_hermite(50).unwrap();
        let a = joint_loglik_with(&truth, &panel, &r25, Integration::Adaptive).unwrap();
        let b = joint_loglik_with(&truth, &panel, &r50, Integration::Adaptive).unwrap();
        assert!((a - b).abs() < 1e-9 * a.abs(), "{a} vs {b}");
    }

    #[test]
    fn mode_solves_first_order_condition() {
        let panel = panel("jm_g15_l100", 20, 3);
        let th = JointParams::from_truth(&ScenarioConfig::preset("jm_g15_l100").unwrap().truth);
        for s in panel.subjects.iter().map(SubjectData::new) {
            let cf = coefficients(&s, &th);
            let u = cf.mode();
            assert!(
                cf.g1(u).abs() < 1e-8 * (1.0 + cf.a.abs() + cf.k),
                "subject {}",
                s.id
            );
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut x = JointParams::from_truth(&Truth::default()).to_vec();
        x[LN_SE] = f64::NAN;
        assert!(JointParams::from_slice(&x).is_err());
        assert!(JointParams::from_slice(&x[..3]).is_err());
    }

    #[test]
    fn fit_recovers_parameters_roughly() {
        let mut cfg = ScenarioConfig::preset("jm_g15_l100").unwrap();
        cfg.n_subjects = 400;
        let panel = simulate(&cfg, DatasetSeed::new(7, 1)).unwrap();
        let fit = fit_joint_detailed(&panel, &JointOptions::default()).unwrap();
        assert!(fit.converged, "grad {}", fit.grad_norm);
        let t = &cfg.truth;
        assert!((fit.params.alpha[1] - t.alpha1).abs() < 0.4);
        assert!((fit.params.gamma - t.gamma).abs() < 0.6);
        assert!((fit.params.beta - t.beta).abs() < 0.4);
        assert!((fit.params.p() - t.p).abs() < 0.15);
        let r = fit.to_fit_result();
        assert_eq!(r.params.len(), 10);
        assert!(r.params.iter().all(|p| p.se.is_finite() && p.se > 0.0));
    }
}
