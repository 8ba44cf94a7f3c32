//! Random-intercept linear mixed models fitted by maximum likelihood.
//!
//! For a subject with `n` rows the marginal covariance is
//! `V = sigma2_e I + sigma2_v J`, whose inverse and determinant have closed
//! forms:
//!
//! ```text
//! V^-1   = (I - c J) / sigma2_e,       c = sigma2_v / (sigma2_e + n sigma2_v)
//! log|V| = (n - 1) log sigma2_e + log(sigma2_e + n sigma2_v)
//! ```
//!
//! so every likelihood evaluation is linear in the number of rows. The fixed
//! effects are profiled out by generalised least squares and the two variances
//! are optimised on the log-standard-deviation scale.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::domain::{FitResult, ModelLabel, PanelDataset, ParamEstimate};
use crate::optim::{fd_hessian, minimize, spd_inverse, BfgsOptions};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmmError {
    #[error("design column '{column}' is constant zero or collinear with the preceding columns")]
    SingularDesign { column: &'static str },
    #[error("variance parameters must be positive and finite (sigma2_v = {sigma2_v}, sigma2_e = {sigma2_e})")]
    InvalidVariance { sigma2_v: f64, sigma2_e: f64 },
    #[error("expected {expected} fixed effects, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("at least two subjects are required, got {0}")]
    TooFewSubjects(usize),
}

/// Visit-process adjustment added to the mean model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Adjustment {
    /// Model D: intercept, treatment, time.
    None,
    /// Model B: adds the subject's total visit count, centred on the dataset mean.
    TotalCountCentered,
    /// Model C: adds the number of visits up to and including the current one.
    CumulativeCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LmmSpec {
    pub adjustment: Adjustment,
}

impl LmmSpec {
    pub const MODEL_B: LmmSpec = LmmSpec {
        adjustment: Adjustment::TotalCountCentered,
    };
    pub const MODEL_C: LmmSpec = LmmSpec {
        adjustment: Adjustment::CumulativeCount,
    };
    pub const MODEL_D: LmmSpec = LmmSpec {
        adjustment: Adjustment::None,
    };

    pub fn for_model(label: ModelLabel) -> Option<LmmSpec> {
        match label {
            ModelLabel::B => Some(Self::MODEL_B),
            ModelLabel::C => Some(Self::MODEL_C),
            ModelLabel::D => Some(Self::MODEL_D),
            _ => None,
        }
    }

    pub fn model(&self) -> ModelLabel {
        match self.adjustment {
            Adjustment::None => ModelLabel::D,
            Adjustment::TotalCountCentered => ModelLabel::B,
            Adjustment::CumulativeCount => ModelLabel::C,
        }
    }

    pub fn column_names(&self) -> &'static [&'static str] {
        match self.adjustment {
            Adjustment::None => &["alpha0", "alpha1", "alpha2"],
            _ => &["alpha0", "alpha1", "alpha2", "alpha3"],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmmParams {
    pub alpha: Vec<f64>,
    pub sigma2_v: f64,
    pub sigma2_e: f64,
}

/// Row-major fixed-effects design with per-subject row blocks.
#[derive(Debug, Clone)]
pub struct Design {
    pub names: &'static [&'static str],
    pub p: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub blocks: Vec<Range<usize>>,
}

impl Design {
    pub fn new(panel: &PanelDataset, spec: LmmSpec) -> Result<Design, LmmError> {
        let names = spec.column_names();
        let p = names.len();
        let n_rows = panel.n_rows();
        let mean_count = panel
            .subjects
            .iter()
            .map(|s| s.n_visits() as f64)
            .sum::<f64>()
            / panel.n_subjects() as f64;
        let mut x = Vec::with_capacity(n_rows * p);
        let mut y = Vec::with_capacity(n_rows);
        let mut blocks = Vec::with_capacity(panel.n_subjects());
        for s in &panel.subjects {
            let start = y.len();
            for (j, (&t, &yij)) in s.visit_times.iter().zip(&s.outcomes).enumerate() {
                x.extend_from_slice(&[1.0, s.z(), t]);
                match spec.adjustment {
                    Adjustment::None => {}
                    Adjustment::TotalCountCentered => x.push(s.n_visits() as f64 - mean_count),
                    Adjustment::CumulativeCount => x.push((j + 1) as f64),
                }
                y.push(yij);
            }
            blocks.push(start..y.len());
        }
        let design = Design {
            names,
            p,
            x,
            y,
            blocks,
        };
        design.check_rank()?;
        Ok(design)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.x[r * self.p..(r + 1) * self.p]
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    /// Modified Gram-Schmidt over the columns; reports the first dependent one.
    fn check_rank(&self) -> Result<(), LmmError> {
        let n = self.n_rows();
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(self.p);
        for k in 0..self.p {
            let mut v: Vec<f64> = (0..n).map(|r| self.x[r * self.p + k]).collect();
            let norm0 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            for q in &basis {
                let proj: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= proj * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm0 == 0.0 || norm <= 1e-9 * norm0 {
                return Err(LmmError::SingularDesign {
                    column: column_label(self.names[k]),
                });
            }
            v.iter_mut().for_each(|a| *a /= norm);
            basis.push(v);
        }
        Ok(())
    }
}

fn column_label(param: &'static str) -> &'static str {
    match param {
        "alpha0" => "intercept",
        "alpha1" => "z",
        "alpha2" => "time",
        _ => "visit_count",
    }
}

/// Per-subject sufficient statistics for GLS.
#[derive(Debug, Clone)]
struct BlockStats {
    n: f64,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    xsum: DVector<f64>,
    ysum: f64,
}

pub(crate) struct LmmProblem<'a> {
    design: &'a Design,
    stats: Vec<BlockStats>,
}

impl<'a> LmmProblem<'a> {
    pub(crate) fn new(design: &'a Design) -> Self {
        let p = design.p;
        let stats = design
            .blocks
            .iter()
            .map(|b| {
                let mut xtx = DMatrix::zeros(p, p);
                let mut xty = DVector::zeros(p);
                let mut xsum = DVector::zeros(p);
                let mut ysum = 0.0;
                for r in b.clone() {
                    let x = design.row(r);
                    let y = design.y[r];
                    for i in 0..p {
                        xsum[i] += x[i];
                        xty[i] += x[i] * y;
                        for j in 0..p {
                            xtx[(i, j)] += x[i] * x[j];
                        }
                    }
                    ysum += y;
                }
                BlockStats {
                    n: b.len() as f64,
                    xtx,
                    xty,
                    xsum,
                    ysum,
                }
            })
            .collect();
        Self { design, stats }
    }

    /// GLS estimate of the fixed effects for given variances.
    pub(crate) fn gls(&self, sigma2_v: f64, sigma2_e: f64) -> Option<Vec<f64>> {
        let p = self.design.p;
        let mut a = DMatrix::zeros(p, p);
        let mut b = DVector::zeros(p);
        for s in &self.stats {
            let c = sigma2_v / (sigma2_e + s.n * sigma2_v);
            a += &s.xtx - (&s.xsum * s.xsum.transpose()) * c;
            b += &s.xty - &s.xsum * (c * s.ysum);
        }
        let chol = a.cholesky()?;
        let sol = chol.solve(&b);
        sol.iter()
            .all(|v| v.is_finite())
            .then(|| sol.iter().copied().collect())
    }

    /// Log-likelihood and gradient in `(alpha, ln sigma_v, ln sigma_e)`.
    pub(crate) fn loglik_grad(
        &self,
        alpha: &[f64],
        sigma2_v: f64,
        sigma2_e: f64,
        grad: Option<&mut [f64]>,
    ) -> f64 {
        let p = self.design.p;
        let (w, e) = (sigma2_v, sigma2_e);
        let mut total = 0.0;
        let mut g_alpha = vec![0.0; p];
        let mut g_w = 0.0;
        let mut g_e = 0.0;
        let want_grad = grad.is_some();
        let mut xr = vec![0.0; p];
        for (block, st) in self.design.blocks.iter().zip(&self.stats) {
            let n = st.n;
            let (mut s1, mut s2) = (0.0, 0.0);
            xr.iter_mut().for_each(|v| *v = 0.0);
            for r in block.clone() {
                let x = self.design.row(r);
                let fitted: f64 = x.iter().zip(alpha).map(|(a, b)| a * b).sum();
                let res = self.design.y[r] - fitted;
                s1 += res;
                s2 += res * res;
                if want_grad {
                    for k in 0..p {
                        xr[k] += x[k] * res;
                    }
                }
            }
            let den = e + n * w;
            let c = w / den;
            let quad = (s2 - c * s1 * s1) / e;
            total += -0.5 * (n * LN_2PI + (n - 1.0) * e.ln() + den.ln() + quad);
            if want_grad {
                for k in 0..p {
                    g_alpha[k] += (xr[k] - c * st.xsum[k] * s1) / e;
                }
                g_w += -0.5 * (n / den - s1 * s1 / (den * den));
                let vinv_r_sq = (s2 - 2.0 * c * s1 * s1 + n * c * c * s1 * s1) / (e * e);
                g_e += -0.5 * ((n - 1.0) / e + 1.0 / den - vinv_r_sq);
            }
        }
        if let Some(g) = grad {
            g[..p].copy_from_slice(&g_alpha);
            g[p] = 2.0 * w * g_w;
            g[p + 1] = 2.0 * e * g_e;
        }
        total
    }

    fn start_values(&self) -> Option<(Vec<f64>, f64, f64)> {
        let alpha = self.gls(0.0, 1.0)?;
        let mut within = 0.0;
        let mut means = Vec::with_capacity(self.design.blocks.len());
        let mut total = 0.0;
        for block in &self.design.blocks {
            let res: Vec<f64> = block
                .clone()
                .map(|r| {
                    let fitted: f64 = self
                        .design
                        .row(r)
                        .iter()
                        .zip(&alpha)
                        .map(|(a, b)| a * b)
                        .sum();
                    self.design.y[r] - fitted
                })
                .collect();
            let mean = res.iter().sum::<f64>() / res.len() as f64;
            within += res.iter().map(|r| (r - mean).powi(2)).sum::<f64>();
            total += res.iter().map(|r| r * r).sum::<f64>();
            means.push((mean, res.len() as f64));
        }
        let n = self.design.n_rows() as f64;
        let m = means.len() as f64;
        let total_var = total / n;
        let sigma2_e = if n > m {
            within / (n - m)
        } else {
            0.5 * total_var
        };
        let mean_n = n / m;
        let between = means.iter().map(|(mu, _)| mu * mu).sum::<f64>() / m;
        let sigma2_v = (between - sigma2_e / mean_n).max(0.1 * total_var);
        let floor = (1e-8 * total_var).max(1e-300);
        Some((alpha, sigma2_v.max(floor), sigma2_e.max(floor)))
    }
}

/// Marginal log-likelihood of a random-intercept model.
pub fn lmm_loglik(
    params: &LmmParams,
    panel: &PanelDataset,
    spec: LmmSpec,
) -> Result<f64, LmmError> {
    if !(params.sigma2_v > 0.0
        && params.sigma2_e > 0.0
        && params.sigma2_v.is_finite()
        && params.sigma2_e.is_finite())
    {
        return Err(LmmError::InvalidVariance {
            sigma2_v: params.sigma2_v,
            sigma2_e: params.sigma2_e,
        });
    }
    let design = Design::new(panel, spec)?;
    if params.alpha.len() != design.p {
        return Err(LmmError::DimensionMismatch {
            expected: design.p,
            got: params.alpha.len(),
        });
    }
    let problem = LmmProblem::new(&design);
    Ok(problem.loglik_grad(&params.alpha, params.sigma2_v, params.sigma2_e, None))
}

/// Fitted mixed model with the full parameter covariance.
#[derive(Debug, Clone)]
pub struct LmmFit {
    pub spec: LmmSpec,
    pub params: LmmParams,
    pub loglik: f64,
    /// Covariance of `(alpha, ln sigma_v, ln sigma_e)`, when the information is positive definite.
    pub covariance: Option<DMatrix<f64>>,
    pub converged: bool,
    pub iterations: usize,
}

impl LmmFit {
    pub fn to_fit_result(&self) -> FitResult {
        let p = self.params.alpha.len();
        let se = |k: usize| {
            self.covariance
                .as_ref()
                .map_or(f64::NAN, |c| c[(k, k)].max(0.0).sqrt())
        };
        let mut params: Vec<ParamEstimate> = self
            .spec
            .column_names()
            .iter()
            .enumerate()
            .map(|(k, name)| ParamEstimate {
                name: (*name).into(),
                estimate: self.params.alpha[k],
                se: se(k),
            })
            .collect();
        params.push(ParamEstimate {
            name: "sigma2_v".into(),
            estimate: self.params.sigma2_v,
            se: 2.0 * self.params.sigma2_v * se(p),
        });
        params.push(ParamEstimate {
            name: "sigma2_e".into(),
            estimate: self.params.sigma2_e,
            se: 2.0 * self.params.sigma2_e * se(p + 1),
        });
        FitResult {
            model: self.spec.model(),
            params,
            loglik: Some(self.loglik),
            converged: self.converged,
            iterations: self.iterations,
        }
    }
}

pub fn fit_lmm(panel: &PanelDataset, spec: LmmSpec) -> Result<FitResult, LmmError> {
    Ok(fit_lmm_detailed(panel, spec, &BfgsOptions::default())?.to_fit_result())
}

pub fn fit_lmm_detailed(
    panel: &PanelDataset,
    spec: LmmSpec,
    opts: &BfgsOptions,
) -> Result<LmmFit, LmmError> {
    if panel.n_subjects() < 2 {
        return Err(LmmError::TooFewSubjects(panel.n_subjects()));
    }
    let design = Design::new(panel, spec)?;
    let problem = LmmProblem::new(&design);
    let p = design.p;
    let (_, sv0, se0) = problem.start_values().ok_or(LmmError::SingularDesign {
        column: "intercept",
    })?;

    let profile = |x: &[f64], g: &mut [f64]| -> f64 {
        let (w, e) = ((2.0 * x[0]).exp(), (2.0 * x[1]).exp());
        let Some(alpha) = problem.gls(w, e) else {
            return f64::NAN;
        };
        let mut full = vec![0.0; p + 2];
        let ll = problem.loglik_grad(&alpha, w, e, Some(&mut full));
        g[0] = -full[p];
        g[1] = -full[p + 1];
        -ll
    };
    let x0 = [0.5 * sv0.ln(), 0.5 * se0.ln()];
    let h0 = fd_hessian(
        |x: &[f64], g: &mut [f64]| {
            profile(x, g);
        },
        &x0,
        1e-4,
    );
    let min = minimize(profile, &x0, spd_inverse(&h0), opts);
    let (w, e) = ((2.0 * min.x[0]).exp(), (2.0 * min.x[1]).exp());
    let alpha = problem.gls(w, e).ok_or(LmmError::SingularDesign {
        column: "intercept",
    })?;
    let loglik = problem.loglik_grad(&alpha, w, e, None);

    let mut theta = alpha.clone();
    theta.extend_from_slice(&min.x);
    let hess = fd_hessian(
        |t: &[f64], g: &mut [f64]| {
            let (w, e) = ((2.0 * t[p]).exp(), (2.0 * t[p + 1]).exp());
            problem.loglik_grad(&t[..p], w, e, Some(g));
            g.iter_mut().for_each(|v| *v = -*v);
        },
        &theta,
        1e-5,
    );
    let covariance = spd_inverse(&hess);
    let converged = min.converged() && covariance.is_some() && loglik.is_finite();
    Ok(LmmFit {
        spec,
        params: LmmParams {
            alpha,
            sigma2_v: w,
            sigma2_e: e,
        },
        loglik,
        covariance,
        converged,
        iterations: min.iterations,
    })
}
