//! Monte Carlo study driver: replication, model dispatch, performance
//! measures with Monte Carlo standard errors, descriptive summaries of
//! simulated panels and diagnostics for informative visiting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dgm::{simulate, DgmError, ScenarioConfig};
use crate::domain::{FitResult, GapCovariates, GapRecord, ModelLabel, PanelDataset, ParamEstimate};
use crate::iivw::{fit_model_e, IivwError, IivwOptions};
use crate::jointfit::{fit_joint, JointError, JointOptions};
use crate::lmm::{fit_lmm_detailed, LmmError, LmmSpec};
use crate::optim::BfgsOptions;
use crate::rng::DatasetSeed;
use crate::survfit::{fit_andersen_gill_with, CoxOptions, SurvError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("study needs at least 2 replications, got {0}")]
    TooFewReps(usize),
    #[error("study needs at least one model")]
    NoModels,
    #[error("no true value for parameter '{param}' in scenario '{scenario}'")]
    MissingTruth { scenario: String, param: String },
    #[error("simulation failed in replication {rep}: {source}")]
    Simulation { rep: usize, source: DgmError },
    #[error("estimates table: {0}")]
    Csv(#[from] csv::Error),
    #[error("estimates table line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("panel needs at least 2 subjects")]
    TooFewSubjects,
    #[error(transparent)]
    Survival(#[from] SurvError),
}

#[derive(Debug, Error)]
pub enum FitError {
    #[error(transparent)]
    Lmm(#[from] LmmError),
    #[error(transparent)]
    Joint(#[from] JointError),
    #[error(transparent)]
    Iivw(#[from] IivwError),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FitOptions {
    pub joint: JointOptions,
    pub lmm: BfgsOptions,
    pub iivw: IivwOptions,
}

/// Fits one model to one panel.
pub fn fit_model(
    panel: &PanelDataset,
    model: ModelLabel,
    opts: &FitOptions,
) -> Result<FitResult, FitError> {
    Ok(match model {
        ModelLabel::A => fit_joint(panel, &opts.joint)?,
        ModelLabel::B | ModelLabel::C | ModelLabel::D => {
            let spec = LmmSpec::for_model(model).expect("mixed-model label");
            fit_lmm_detailed(panel, spec, &opts.lmm)?.to_fit_result()
        }
        ModelLabel::E => fit_model_e(panel, &opts.iivw)?.0,
    })
}

/// Placeholder for a fit that raised an error.
pub fn failed_fit(model: ModelLabel) -> FitResult {
    FitResult {
        model,
        params: model
            .param_names()
            .iter()
            .map(|n| ParamEstimate {
                name: (*n).into(),
                estimate: f64::NAN,
                se: f64::NAN,
            })
            .collect(),
        loglik: None,
        converged: false,
        iterations: 0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub scenario: ScenarioConfig,
    pub models: Vec<ModelLabel>,
    pub reps: usize,
    pub master_seed: u64,
    pub fit: FitOptions,
}

impl StudyConfig {
    /// Desk-scale study of `scenario` with every model.
    pub fn new(scenario: ScenarioConfig) -> Self {
        let master_seed = scenario.seed;
        Self {
            scenario,
            models: ModelLabel::ALL.to_vec(),
            reps: 200,
            master_seed,
            fit: FitOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.reps < 2 {
            return Err(HarnessError::TooFewReps(self.reps));
        }
        if self.models.is_empty() {
            return Err(HarnessError::NoModels);
        }
        Ok(())
    }
}

/// One estimate from one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRow {
    pub scenario: String,
    /// 1-based replication number.
    pub rep: usize,
    pub model: ModelLabel,
    pub param: String,
    /// Absent when the fit did not converge.
    pub est: Option<f64>,
    pub se: Option<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EstimatesTable {
    pub rows: Vec<EstimateRow>,
}

const ESTIMATE_HEADER: [&str; 7] = [
    "scenario",
    "rep",
    "model",
    "param",
    "est",
    "se",
    "converged",
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

impl EstimatesTable {
    pub fn push_fit(&mut self, scenario: &str, rep: usize, fit: &FitResult) {
        for p in &fit.params {
            let keep = |x: f64| (fit.converged && x.is_finite()).then_some(x);
            self.rows.push(EstimateRow {
                scenario: scenario.to_owned(),
                rep,
                model: fit.model,
                param: p.name.clone(),
                est: keep(p.estimate),
                se: keep(p.se),
                converged: fit.converged,
            });
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(ESTIMATE_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.scenario.clone(),
                r.rep.to_string(),
                r.model.to_string(),
                r.param.clone(),
                fmt_opt(r.est),
                fmt_opt(r.se),
                r.converged.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, HarnessError> {
        let mut reader = csv::Reader::from_reader(input);
        let header = reader.headers()?.clone();
        if !header.iter().eq(ESTIMATE_HEADER) {
            return Err(HarnessError::Parse {
                line: 1,
                message: format!("expected header {}", ESTIMATE_HEADER.join(",")),
            });
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let bad = |message: String| HarnessError::Parse { line, message };
            let num = |s: &str| -> Result<Option<f64>, HarnessError> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse::<f64>()
                        .map(Some)
                        .map_err(|e| bad(format!("'{s}': {e}")))
                }
            };
            rows.push(EstimateRow {
                scenario: rec[0].to_owned(),
                rep: rec[1].parse().map_err(|e| bad(format!("rep: {e}")))?,
                model: rec[2].parse().map_err(bad)?,
                param: rec[3].to_owned(),
                est: num(&rec[4])?,
                se: num(&rec[5])?,
                converged: rec[6].parse().map_err(|e| bad(format!("converged: {e}")))?,
            });
        }
        Ok(Self { rows })
    }

    /// Rows whose parameter has a true value in `truths`.
    pub fn with_params_in(&self, truths: &BTreeMap<String, f64>) -> Self {
        Self {
            rows: self
                .rows
                .iter()
                .filter(|r| truths.contains_key(&r.param))
                .cloned()
                .collect(),
        }
    }
}

/// Fits every requested model to every replication.
///
/// Replications run in parallel; each draws from its own substream, so the
/// table depends only on the configuration.
pub fn run_study(study: &StudyConfig) -> Result<EstimatesTable, HarnessError> {
    study.validate()?;
    let per_rep: Vec<Result<Vec<FitResult>, HarnessError>> = (1..=study.reps)
        .into_par_iter()
        .map(|rep| {
            let seed = DatasetSeed::new(study.master_seed, rep as u32);
            let panel = simulate(&study.scenario, seed)
                .map_err(|source| HarnessError::Simulation { rep, source })?;
            Ok(study
                .models
                .iter()
                .map(|&m| {
                    fit_model(&panel, m, &study.fit).unwrap_or_else(|e| {
                        log::debug!("rep {rep} model {m}: {e}");
                        failed_fit(m)
                    })
                })
                .collect())
        })
        .collect();
    let mut table = EstimatesTable::default();
    for (i, fits) in per_rep.into_iter().enumerate() {
        for fit in fits? {
            table.push_fit(&study.scenario.name, i + 1, &fit);
        }
    }
    Ok(table)
}

/// Performance of one estimator for one parameter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerformanceRow {
    pub scenario: String,
    pub model: ModelLabel,
    pub param: String,
    pub truth: f64,
    pub mean_est: f64,
    pub bias: f64,
    pub bias_mcse: f64,
    pub emp_se: f64,
    pub mod_se: f64,
    pub mse: f64,
    pub mse_mcse: f64,
    pub coverage: f64,
    pub coverage_mcse: f64,
    pub conv_rate: f64,
    /// Converged replications entering the measures.
    #[serde(skip)]
    pub n_converged: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PerformanceTable {
    pub rows: Vec<PerformanceRow>,
}

impl PerformanceTable {
    pub fn get(&self, model: ModelLabel, param: &str) -> Option<&PerformanceRow> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.param == param)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        if self.rows.is_empty() {
            w.write_record([
                "scenario",
                "model",
                "param",
                "truth",
                "mean_est",
                "bias",
                "bias_mcse",
                "emp_se",
                "mod_se",
                "mse",
                "mse_mcse",
                "coverage",
                "coverage_mcse",
                "conv_rate",
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

fn param_rank(model: ModelLabel, param: &str) -> usize {
    model
        .param_names()
        .iter()
        .position(|p| *p == param)
        .unwrap_or(usize::MAX)
}

/// Performance measures over converged replications.
///
/// Every parameter in `estimates` needs an entry in `truths`; restrict the
/// table first with [`EstimatesTable::with_params_in`] when some parameters
/// have no true value. Cells with fewer than two converged replications get
/// NaN measures.
pub fn summarize(
    estimates: &EstimatesTable,
    truths: &BTreeMap<String, f64>,
) -> Result<PerformanceTable, HarnessError> {
    type Key = (String, ModelLabel, usize, String);
    let mut groups: BTreeMap<Key, (usize, Vec<(f64, f64)>)> = BTreeMap::new();
    for r in &estimates.rows {
        if !truths.contains_key(&r.param) {
            return Err(HarnessError::MissingTruth {
                scenario: r.scenario.clone(),
                param: r.param.clone(),
            });
        }
        let key = (
            r.scenario.clone(),
            r.model,
            param_rank(r.model, &r.param),
            r.param.clone(),
        );
        let cell = groups.entry(key).or_default();
        cell.0 += 1;
        if let (true, Some(est)) = (r.converged, r.est) {
            cell.1.push((est, r.se.unwrap_or(f64::NAN)));
        }
    }
    let rows = groups
        .into_iter()
        .map(|((scenario, model, _, param), (total, mut values))| {
            let truth = truths[&param];
            // Sorting makes the sums independent of row order.
            values.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            performance(scenario, model, param, truth, total, &values)
        })
        .collect();
    Ok(PerformanceTable { rows })
}

fn performance(
    scenario: String,
    model: ModelLabel,
    param: String,
    truth: f64,
    total: usize,
    values: &[(f64, f64)],
) -> PerformanceRow {
    let k = values.len();
    let kf = k as f64;
    let conv_rate = if total == 0 {
        f64::NAN
    } else {
        kf / total as f64
    };
    let mut row = PerformanceRow {
        scenario,
        model,
        param,
        truth,
        mean_est: f64::NAN,
        bias: f64::NAN,
        bias_mcse: f64::NAN,
        emp_se: f64::NAN,
        mod_se: f64::NAN,
        mse: f64::NAN,
        mse_mcse: f64::NAN,
        coverage: f64::NAN,
        coverage_mcse: f64::NAN,
        conv_rate,
        n_converged: k,
    };
    if k < 2 {
        return row;
    }
    let mean = values.iter().map(|v| v.0).sum::<f64>() / kf;
    let var = values.iter().map(|v| (v.0 - mean).powi(2)).sum::<f64>() / (kf - 1.0);
    let emp_se = var.sqrt();
    let sq: Vec<f64> = values.iter().map(|v| (v.0 - truth).powi(2)).collect();
    let mse = sq.iter().sum::<f64>() / kf;
    let mse_mcse = (sq.iter().map(|s| (s - mse).powi(2)).sum::<f64>() / (kf * (kf - 1.0))).sqrt();
    let ses: Vec<f64> = values
        .iter()
        .map(|v| v.1)
        .filter(|s| s.is_finite())
        .collect();
    let mod_se = if ses.is_empty() {
        f64::NAN
    } else {
        ses.iter().sum::<f64>() / ses.len() as f64
    };
    let covered = values
        .iter()
        .filter(|(est, se)| se.is_finite() && (est - truth).abs() <= 1.96 * se)
        .count() as f64;
    let coverage = covered / kf;
    row.mean_est = mean;
    row.bias = mean - truth;
    row.bias_mcse = emp_se / kf.sqrt();
    row.emp_se = emp_se;
    row.mod_se = mod_se;
    row.mse = mse;
    row.mse_mcse = mse_mcse;
    row.coverage = coverage;
    row.coverage_mcse = (coverage * (1.0 - coverage) / kf).sqrt();
    row
}

/// Runs a study and summarises every parameter with a true value.
pub fn run_and_summarize(
    study: &StudyConfig,
) -> Result<(EstimatesTable, PerformanceTable), HarnessError> {
    let estimates = run_study(study)?;
    let truths = study.scenario.truths();
    let perf = summarize(&estimates.with_params_in(&truths), &truths)?;
    Ok((estimates, perf))
}

/// Median and interquartile interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quartiles {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

/// Quantile by linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], prob: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Self {
            median: quantile(&v, 0.5),
            q1: quantile(&v, 0.25),
            q3: quantile(&v, 0.75),
        }
    }
}

/// Summary characteristics of simulated panels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Descriptives {
    pub scenario: String,
    pub reps: usize,
    /// Total outcome rows per dataset.
    pub rows: Quartiles,
    /// Measurements per subject, pooled over datasets.
    pub measurements: Quartiles,
    /// Observed gap times, pooled over datasets.
    pub gaps: Quartiles,
}

pub fn describe_datasets(
    scenario: &ScenarioConfig,
    reps: usize,
    master_seed: u64,
) -> Result<Descriptives, HarnessError> {
    let per_rep: Vec<Result<(f64, Vec<f64>, Vec<f64>), HarnessError>> = (1..=reps.max(1))
        .into_par_iter()
        .map(|rep| {
            let panel = simulate(scenario, DatasetSeed::new(master_seed, rep as u32))
                .map_err(|source| HarnessError::Simulation { rep, source })?;
            let counts = panel.subjects.iter().map(|s| s.n_visits() as f64).collect();
            let gaps = panel
                .gap_records
                .iter()
                .filter(|r| r.observed)
                .map(|r| r.gap)
                .collect();
            Ok((panel.n_rows() as f64, counts, gaps))
        })
        .collect();
    let mut rows = Vec::new();
    let mut counts = Vec::new();
    let mut gaps = Vec::new();
    for r in per_rep {
        let (n, c, g) = r?;
        rows.push(n);
        counts.extend(c);
        gaps.extend(g);
    }
    Ok(Descriptives {
        scenario: scenario.name.clone(),
        reps: reps.max(1),
        rows: Quartiles::of(&rows),
        measurements: Quartiles::of(&counts),
        gaps: Quartiles::of(&gaps),
    })
}

/// Ranks with ties sharing their average rank, starting at 1.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation; NaN when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman inputs differ in length");
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Covariate examined by [`diagnose_informativeness`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticCovariate {
    /// Treatment indicator (subject level).
    Z,
    /// Outcome at the visit opening each gap.
    YPrev,
}

impl std::str::FromStr for DiagnosticCovariate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "z" => Ok(Self::Z),
            "y_prev" => Ok(Self::YPrev),
            other => Err(format!(
                "unknown covariate '{other}' (expected z or y_prev)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub covariate: DiagnosticCovariate,
    pub applicable: bool,
    pub note: Option<String>,
    pub n_gaps: usize,
    pub spearman_rho: Option<f64>,
    pub permutation_p: Option<f64>,
    pub permutations: usize,
    pub hazard_ratio: Option<f64>,
    pub hr_lower: Option<f64>,
    pub hr_upper: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnoseOptions {
    pub permutations: usize,
    pub seed: u64,
    pub cox: CoxOptions,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        Self {
            permutations: 999,
            seed: 1,
            cox: CoxOptions::default(),
        }
    }
}

/// Spearman correlation between observed gap times and a covariate, with a
/// permutation p-value, and the Andersen-Gill hazard ratio for the covariate.
///
/// A subject-level covariate is permuted across subjects, keeping each
/// subject's gaps together; a visit-level covariate is permuted across gaps.
pub fn diagnose_informativeness(
    panel: &PanelDataset,
    covariate: DiagnosticCovariate,
    opts: &DiagnoseOptions,
) -> Result<Diagnostics, HarnessError> {
    if panel.n_subjects() < 2 {
        return Err(HarnessError::TooFewSubjects);
    }
    let cov_panel = panel.with_gap_covariates(GapCovariates::TreatmentAndPreviousOutcome);
    let column = match covariate {
        DiagnosticCovariate::Z => 0,
        DiagnosticCovariate::YPrev => 1,
    };
    let records: Vec<GapRecord> = cov_panel
        .gap_records
        .iter()
        .map(|r| GapRecord {
            covariates: vec![r.covariates[column]],
            ..r.clone()
        })
        .collect();
    let observed: Vec<&GapRecord> = records.iter().filter(|r| r.observed).collect();
    let gaps: Vec<f64> = observed.iter().map(|r| r.gap).collect();
    let xs: Vec<f64> = observed.iter().map(|r| r.covariates[0]).collect();

    let mut diag = Diagnostics {
        covariate,
        applicable: false,
        note: None,
        n_gaps: gaps.len(),
        spearman_rho: None,
        permutation_p: None,
        permutations: opts.permutations,
        hazard_ratio: None,
        hr_lower: None,
        hr_upper: None,
    };
    let constant = xs.windows(2).all(|w| w[0] == w[1]);
    if gaps.len() < 2 || constant {
        diag.note = Some(if gaps.len() < 2 {
            "fewer than two observed gaps".into()
        } else {
            "covariate is constant over observed gaps".into()
        });
        return Ok(diag);
    }
    diag.applicable = true;
    let rho = spearman(&gaps, &xs);
    diag.spearman_rho = Some(rho);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut exceed = 0usize;
    match covariate {
        DiagnosticCovariate::Z => {
            // Subject-level: permute treatment labels across subjects.
            let mut ids: Vec<u32> = Vec::new();
            let mut labels: Vec<f64> = Vec::new();
            for s in &panel.subjects {
                ids.push(s.id);
                labels.push(s.z());
            }
            let index: std::collections::HashMap<u32, usize> =
                ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
            let owner: Vec<usize> = observed.iter().map(|r| index[&r.subject_id]).collect();
            let mut perm = labels.clone();
            for _ in 0..opts.permutations {
                perm.shuffle(&mut rng);
                let px: Vec<f64> = owner.iter().map(|&i| perm[i]).collect();
                let r = spearman(&gaps, &px);
                if r.is_finite() && r.abs() >= rho.abs() - 1e-12 {
                    exceed += 1;
                }
            }
        }
        DiagnosticCovariate::YPrev => {
            let mut px = xs.clone();
            for _ in 0..opts.permutations {
                px.shuffle(&mut rng);
                if spearman(&gaps, &px).abs() >= rho.abs() - 1e-12 {
                    exceed += 1;
                }
            }
        }
    }
    diag.permutation_p = Some((exceed + 1) as f64 / (opts.permutations + 1) as f64);

    match fit_andersen_gill_with(&records, &opts.cox) {
        Ok(fit) if fit.converged && !fit.aliased[0] => {
            let (hr, lo, hi) = fit.hazard_ratio(0);
            diag.hazard_ratio = Some(hr);
            diag.hr_lower = Some(lo);
            diag.hr_upper = Some(hi);
        }
        Ok(fit) => {
            diag.note = Some(format!(
                "Andersen-Gill fit did not converge ({:?})",
                fit.status
            ));
        }
        Err(e) => diag.note = Some(format!("Andersen-Gill fit failed: {e}")),
    }
    Ok(diag)
}

impl Descriptives {
    /// One-line text summary.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let q = |x: &Quartiles| format!("{:.2} ({:.2} to {:.2})", x.median, x.q1, x.q3);
        let _ = write!(
            s,
            "{}: rows {}; measurements per subject {}; gap time {}",
            self.scenario,
            q(&self.rows),
            q(&self.measurements),
            q(&self.gaps)
        );
        s
    }
}
