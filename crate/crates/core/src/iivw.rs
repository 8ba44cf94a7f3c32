//! Inverse-intensity-of-visiting weights and the weighted marginal model (model E).
//!
//! The visit intensity is modelled by an Andersen-Gill fit on gap times. Each
//! visit is weighted by the inverse of the estimated relative intensity that
//! led to it, normalised so that the weights average one, and the mean outcome
//! `alpha0 + alpha1 z + alpha2 t` is fitted by weighted least squares with a
//! cluster-robust sandwich variance.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::domain::{FitResult, GapCovariates, ModelLabel, PanelDataset, ParamEstimate};
use crate::survfit::{fit_andersen_gill_with, CoxFit, CoxOptions, SurvError};

#[derive(Debug, Error)]
pub enum IivwError {
    #[error("weight model did not converge")]
    WeightModelNotConverged,
    #[error("weight model has {expected} coefficients but gap records carry {found} covariates")]
    CovariateMismatch { expected: usize, found: usize },
    #[error("no weight for subject {subject}, visit {visit}")]
    MissingWeight { subject: u32, visit: usize },
    #[error("weighted normal equations are singular")]
    Singular,
    #[error("need at least 2 clusters, found {0}")]
    TooFewClusters(usize),
    #[error("input lengths disagree")]
    LengthMismatch,
    #[error(transparent)]
    Survival(#[from] SurvError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightEntry {
    pub subject_id: u32,
    /// 1-based visit index.
    pub visit_index: usize,
    pub weight: f64,
}

/// Visit weights, in panel order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    pub entries: Vec<WeightEntry>,
    /// Normalised inverse intensities per gap record, before the shift.
    pub normalized: Vec<f64>,
    /// Entries with a weight of zero or less.
    pub n_nonpositive: usize,
}

impl WeightTable {
    pub fn get(&self, subject_id: u32, visit_index: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.subject_id == subject_id && e.visit_index == visit_index)
            .map(|e| e.weight)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["subject_id", "visit_index", "weight"])?;
        for e in &self.entries {
            w.write_record(&[
                e.subject_id.to_string(),
                e.visit_index.to_string(),
                format!("{}", e.weight),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `raw - mean(raw) + 1`.
pub fn normalize_weights(raw: &[f64]) -> Vec<f64> {
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.iter().map(|r| r - mean + 1.0).collect()
}

/// Weights from a fitted visit-intensity model.
///
/// The weight computed from gap `j` attaches to visit `j + 1`; every
/// subject's first visit has weight one.
pub fn compute_iiv_weights(
    coxfit: &CoxFit,
    panel: &PanelDataset,
) -> Result<WeightTable, IivwError> {
    if !coxfit.converged {
        return Err(IivwError::WeightModelNotConverged);
    }
    let q = coxfit.coef.len();
    let raw: Vec<f64> = panel
        .gap_records
        .iter()
        .map(|r| {
            if r.covariates.len() != q {
                return Err(IivwError::CovariateMismatch {
                    expected: q,
                    found: r.covariates.len(),
                });
            }
            let lp: f64 = r
                .covariates
                .iter()
                .zip(&coxfit.coef)
                .map(|(x, b)| x * b)
                .sum();
            Ok((-lp).exp())
        })
        .collect::<Result<_, _>>()?;
    let normalized = normalize_weights(&raw);

    let mut entries = Vec::with_capacity(raw.len());
    let mut offset = 0;
    for s in &panel.subjects {
        let n = s.n_visits();
        for j in 0..n {
            let weight = if j == 0 {
                1.0
            } else {
                normalized[offset + j - 1]
            };
            entries.push(WeightEntry {
                subject_id: s.id,
                visit_index: j + 1,
                weight,
            });
        }
        offset += n;
    }
    let n_nonpositive = entries.iter().filter(|e| e.weight <= 0.0).count();
    if n_nonpositive > 0 {
        log::warn!("{n_nonpositive} visit weights are zero or negative; using them as-is");
    }
    Ok(WeightTable {
        entries,
        normalized,
        n_nonpositive,
    })
}

/// Weighted least-squares fit with a cluster sandwich covariance.
#[derive(Debug, Clone)]
pub struct WlsFit {
    pub coef: Vec<f64>,
    pub covariance: DMatrix<f64>,
}

/// Solves `X'WX b = X'Wy`; the sandwich groups score contributions by
/// `clusters` and carries the small-sample factor `G / (G - 1)`.
pub fn weighted_regression(
    x: &DMatrix<f64>,
    y: &[f64],
    w: &[f64],
    clusters: &[u32],
) -> Result<WlsFit, IivwError> {
    let (n, p) = x.shape();
    if y.len() != n || w.len() != n || clusters.len() != n {
        return Err(IivwError::LengthMismatch);
    }
    let mut xtwx = DMatrix::zeros(p, p);
    let mut xtwy = DVector::zeros(p);
    for i in 0..n {
        let row = x.row(i).transpose();
        xtwx.ger(w[i], &row, &row, 1.0);
        xtwy.axpy(w[i] * y[i], &row, 1.0);
    }
    let lu = xtwx.clone().lu();
    let bread = lu.try_inverse().ok_or(IivwError::Singular)?;
    // Relative pivot check: near-singular systems invert to garbage.
    let scale = xtwx.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(bread.iter().all(|v| v.is_finite())
        && xtwx.determinant().abs() > 1e-12 * scale.powi(p as i32))
    {
        return Err(IivwError::Singular);
    }
    let coef = &bread * &xtwy;

    let mut scores: BTreeMap<u32, DVector<f64>> = BTreeMap::new();
    for i in 0..n {
        let row = x.row(i).transpose();
        let resid = y[i] - row.dot(&coef);
        scores
            .entry(clusters[i])
            .or_insert_with(|| DVector::zeros(p))
            .axpy(w[i] * resid, &row, 1.0);
    }
    let g = scores.len();
    if g < 2 {
        return Err(IivwError::TooFewClusters(g));
    }
    let mut meat = DMatrix::zeros(p, p);
    for s in scores.values() {
        meat.ger(1.0, s, s, 1.0);
    }
    let covariance = &bread * meat * &bread * (g as f64 / (g as f64 - 1.0));
    Ok(WlsFit {
        coef: coef.iter().copied().collect(),
        covariance,
    })
}

/// Weighted marginal model `E[y] = alpha0 + alpha1 z + alpha2 t`.
pub fn fit_wgee(panel: &PanelDataset, weights: &WeightTable) -> Result<FitResult, IivwError> {
    let lookup: HashMap<(u32, usize), f64> = weights
        .entries
        .iter()
        .map(|e| ((e.subject_id, e.visit_index), e.weight))
        .collect();
    let n = panel.n_rows();
    let mut x = DMatrix::zeros(n, 3);
    let mut y = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let mut clusters = Vec::with_capacity(n);
    let mut row = 0;
    for s in &panel.subjects {
        for (j, (t, yij)) in s.visit_times.iter().zip(&s.outcomes).enumerate() {
            let weight = *lookup.get(&(s.id, j + 1)).ok_or(IivwError::MissingWeight {
                subject: s.id,
                visit: j + 1,
            })?;
            x[(row, 0)] = 1.0;
            x[(row, 1)] = s.z();
            x[(row, 2)] = *t;
            y.push(*yij);
            w.push(weight);
            clusters.push(s.id);
            row += 1;
        }
    }
    let fit = weighted_regression(&x, &y, &w, &clusters)?;
    let params = ModelLabel::E
        .param_names()
        .iter()
        .enumerate()
        .map(|(k, name)| ParamEstimate {
            name: (*name).into(),
            estimate: fit.coef[k],
            se: fit.covariance[(k, k)].max(0.0).sqrt(),
        })
        .collect();
    Ok(FitResult {
        model: ModelLabel::E,
        params,
        loglik: None,
        converged: true,
        iterations: 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IivwOptions {
    pub covariates: GapCovariates,
    pub cox: CoxOptions,
}

/// Model E end to end: visit-intensity fit, weights, weighted regression.
pub fn fit_model_e(
    panel: &PanelDataset,
    opts: &IivwOptions,
) -> Result<(FitResult, WeightTable), IivwError> {
    let panel = panel.with_gap_covariates(opts.covariates);
    let cox = fit_andersen_gill_with(&panel.gap_records, &opts.cox)?;
    let weights = compute_iiv_weights(&cox, &panel)?;
    let fit = fit_wgee(&panel, &weights)?;
    Ok((fit, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_panel, Subject};

    #[test]
    fn normalisation_example() {
        let n = normalize_weights(&[2.0, 1.0, 0.5]);
        let expected = [1.0 + 5.0 / 6.0, 5.0 / 6.0, 1.0 / 3.0];
        for (a, b) in n.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((n.iter().sum::<f64>() / 3.0 - 1.0).abs() < 1e-15);
    }

    fn toy_panel() -> PanelDataset {
        build_panel(vec![
            Subject {
                id: 1,
                treated: true,
                censoring_time: 6.0,
                visit_times: vec![0.0, 1.0, 2.5],
                outcomes: vec![1.0, 2.0, 3.5],
                latent: None,
            },
            Subject {
                id: 2,
                treated: false,
                censoring_time: 7.0,
                visit_times: vec![0.0, 3.0],
                outcomes: vec![0.5, 1.0],
                latent: None,
            },
        ])
        .unwrap()
    }

    fn cox_with(coef: Vec<f64>) -> CoxFit {
        let q = coef.len();
        CoxFit {
            coef,
            naive_cov: DMatrix::identity(q, q),
            robust_cov: DMatrix::identity(q, q),
            loglik: 0.0,
            converged: true,
            status: crate::survfit::CoxStatus::Converged,
            n_events: 0,
            iterations: 0,
            aliased: vec![false; q],
        }
    }

    #[test]
    fn shift_attaches_forward() {
        let panel = toy_panel();
        let table = compute_iiv_weights(&cox_with(vec![2f64.ln()]), &panel).unwrap();
        // Raw: treated 0.5 (x3), control 1 (x2); mean 0.7.
        let treated = 0.5 - 0.7 + 1.0;
        let control = 1.0 - 0.7 + 1.0;
        assert_eq!(table.entries.len(), 5);
        assert_eq!(table.get(1, 1), Some(1.0));
        assert!((table.get(1, 2).unwrap() - treated).abs() < 1e-12);
        assert!((table.get(1, 3).unwrap() - treated).abs() < 1e-12);
        assert_eq!(table.get(2, 1), Some(1.0));
        assert!((table.get(2, 2).unwrap() - control).abs() < 1e-12);
        let mean = table.normalized.iter().sum::<f64>() / table.normalized.len() as f64;
        assert!((mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn null_weight_model_gives_unit_weights() {
        let table = compute_iiv_weights(&cox_with(vec![0.0]), &toy_panel()).unwrap();
        assert!(table.entries.iter().all(|e| e.weight == 1.0));
        assert_eq!(table.n_nonpositive, 0);
    }

    #[test]
    fn unconverged_weight_model_rejected() {
        let mut cox = cox_with(vec![0.0]);
        cox.converged = false;
        assert!(matches!(
            compute_iiv_weights(&cox, &toy_panel()),
            Err(IivwError::WeightModelNotConverged)
        ));
    }

    #[test]
    fn csv_export() {
        let table = compute_iiv_weights(&cox_with(vec![0.0]), &toy_panel()).unwrap();
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("subject_id,visit_index,weight\n1,1,1\n"));
        assert_eq!(text.lines().count(), 6);
    }

    #[test]
    fn missing_weight_is_an_error() {
        let panel = toy_panel();
        let mut table = compute_iiv_weights(&cox_with(vec![0.0]), &panel).unwrap();
        table.entries.pop();
        assert!(matches!(
            fit_wgee(&panel, &table),
            Err(IivwError::MissingWeight {
                subject: 2,
                visit: 2
            })
        ));
    }

    #[test]
    fn singular_design_detected() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let r = weighted_regression(&x, &[1.0, 2.0, 3.0], &[1.0; 3], &[1, 2, 3]);
        assert!(matches!(r, Err(IivwError::Singular)));
    }
}
