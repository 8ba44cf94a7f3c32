//! Panel data types shared by the simulators and the estimators.
//!
//! A [`Subject`] holds the visit times and outcomes of one individual. Every
//! subject is observed at baseline (`t = 0`) and followed until an
//! administrative censoring time `C`. [`build_panel`] turns a list of
//! subjects into a [`PanelDataset`], deriving one [`GapRecord`] per visit: the
//! gap from that visit to the next one (observed) or to `C` (censored).

use std::fmt;
use std::str::FromStr;

use serde::ser::{SerializeMap, SerializeStruct};
use serde::{Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("subject {subject}: no visits recorded")]
    NoVisits { subject: u32 },
    #[error("subject {subject}: first visit at t = {time}, expected the baseline visit at t = 0")]
    MissingBaseline { subject: u32, time: f64 },
    #[error("subject {subject}: visit times not strictly increasing at visit {index} ({previous} -> {time})")]
    NonMonotoneVisits {
        subject: u32,
        index: usize,
        previous: f64,
        time: f64,
    },
    #[error("subject {subject}: visit at t = {time} is not before the censoring time {censoring}")]
    VisitAfterCensoring {
        subject: u32,
        time: f64,
        censoring: f64,
    },
    #[error("subject {subject}: censoring time {censoring} must be positive and finite")]
    InvalidCensoring { subject: u32, censoring: f64 },
    #[error("subject {subject}: {outcomes} outcomes for {visits} visits")]
    OutcomeLengthMismatch {
        subject: u32,
        visits: usize,
        outcomes: usize,
    },
    #[error("subject {subject}: non-finite outcome at visit {index}")]
    NonFiniteOutcome { subject: u32, index: usize },
    #[error("duplicate subject id {0}")]
    DuplicateSubject(u32),
    #[error("panel has no subjects")]
    EmptyPanel,
}

/// Simulation bookkeeping: the random effects that generated a subject.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentEffects {
    /// Log-scale visit-rate effect: `u` for the joint model, `xi` for the Gamma families.
    pub frailty: f64,
    /// Random intercept of the outcome.
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: u32,
    pub treated: bool,
    /// Administrative censoring time, in years.
    pub censoring_time: f64,
    /// Visit times in years; the first entry is the baseline visit at 0.
    pub visit_times: Vec<f64>,
    pub outcomes: Vec<f64>,
    pub latent: Option<LatentEffects>,
}

impl Subject {
    /// Treatment indicator as a covariate value.
    pub fn z(&self) -> f64 {
        if self.treated {
            1.0
        } else {
            0.0
        }
    }

    pub fn n_visits(&self) -> usize {
        self.visit_times.len()
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        let subject = self.id;
        if !(self.censoring_time.is_finite() && self.censoring_time > 0.0) {
            return Err(DomainError::InvalidCensoring {
                subject,
                censoring: self.censoring_time,
            });
        }
        let Some(&first) = self.visit_times.first() else {
            return Err(DomainError::NoVisits { subject });
        };
        if first != 0.0 {
            return Err(DomainError::MissingBaseline {
                subject,
                time: first,
            });
        }
        for (index, pair) in self.visit_times.windows(2).enumerate() {
            if !(pair[1] > pair[0]) {
                return Err(DomainError::NonMonotoneVisits {
                    subject,
                    index: index + 1,
                    previous: pair[0],
                    time: pair[1],
                });
            }
        }
        let last = *self.visit_times.last().unwrap_or(&0.0);
        if !(last < self.censoring_time) {
            return Err(DomainError::VisitAfterCensoring {
                subject,
                time: last,
                censoring: self.censoring_time,
            });
        }
        if self.outcomes.len() != self.visit_times.len() {
            return Err(DomainError::OutcomeLengthMismatch {
                subject,
                visits: self.visit_times.len(),
                outcomes: self.outcomes.len(),
            });
        }
        if let Some(index) = self.outcomes.iter().position(|y| !y.is_finite()) {
            return Err(DomainError::NonFiniteOutcome { subject, index });
        }
        Ok(())
    }
}

/// Covariates attached to each gap record for the visit-intensity model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GapCovariates {
    /// Treatment indicator only.
    #[default]
    Treatment,
    /// Treatment and the outcome recorded at the visit that opens the gap.
    TreatmentAndPreviousOutcome,
}

impl GapCovariates {
    pub fn names(self) -> &'static [&'static str] {
        match self {
            GapCovariates::Treatment => &["z"],
            GapCovariates::TreatmentAndPreviousOutcome => &["z", "y_prev"],
        }
    }

    fn values(self, subject: &Subject, visit: usize) -> Vec<f64> {
        match self {
            GapCovariates::Treatment => vec![subject.z()],
            GapCovariates::TreatmentAndPreviousOutcome => {
                vec![subject.z(), subject.outcomes[visit]]
            }
        }
    }
}

/// One inter-visit gap.
#[derive(Debug, Clone, PartialEq)]
pub struct GapRecord {
    pub subject_id: u32,
    /// 1-based index: gap `j` starts at visit `j`.
    pub index: usize,
    pub gap: f64,
    /// `true` when the gap ends in a visit, `false` for the final gap ending at censoring.
    pub observed: bool,
    pub covariates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    pub subjects: Vec<Subject>,
    pub gap_records: Vec<GapRecord>,
    pub scenario_tag: String,
}

impl PanelDataset {
    pub fn n_rows(&self) -> usize {
        self.subjects.iter().map(Subject::n_visits).sum()
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_events(&self) -> usize {
        self.gap_records.iter().filter(|r| r.observed).count()
    }

    /// Gap records of subject at position `i`, in visit order.
    ///
    /// Records are stored contiguously per subject, in subject order.
    pub fn subject_gaps(&self) -> impl Iterator<Item = (&Subject, &[GapRecord])> {
        let mut offset = 0;
        self.subjects.iter().map(move |s| {
            let n = s.n_visits();
            let slice = &self.gap_records[offset..offset + n];
            offset += n;
            (s, slice)
        })
    }

    /// Same subjects with the gap covariates rebuilt.
    pub fn with_gap_covariates(&self, covariates: GapCovariates) -> PanelDataset {
        PanelDataset {
            subjects: self.subjects.clone(),
            gap_records: derive_gap_records(&self.subjects, covariates),
            scenario_tag: self.scenario_tag.clone(),
        }
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.scenario_tag = tag.into();
        self
    }
}

/// Builds a panel, deriving gap records with the treatment indicator as covariate.
pub fn build_panel(subjects: Vec<Subject>) -> Result<PanelDataset, DomainError> {
    build_panel_with(subjects, "", GapCovariates::Treatment)
}

pub fn build_panel_with(
    subjects: Vec<Subject>,
    scenario_tag: &str,
    covariates: GapCovariates,
) -> Result<PanelDataset, DomainError> {
    if subjects.is_empty() {
        return Err(DomainError::EmptyPanel);
    }
    let mut seen = std::collections::HashSet::with_capacity(subjects.len());
    for s in &subjects {
        s.validate()?;
        if !seen.insert(s.id) {
            return Err(DomainError::DuplicateSubject(s.id));
        }
    }
    let gap_records = derive_gap_records(&subjects, covariates);
    Ok(PanelDataset {
        subjects,
        gap_records,
        scenario_tag: scenario_tag.to_owned(),
    })
}

fn derive_gap_records(subjects: &[Subject], covariates: GapCovariates) -> Vec<GapRecord> {
    let total: usize = subjects.iter().map(Subject::n_visits).sum();
    let mut records = Vec::with_capacity(total);
    for s in subjects {
        let n = s.n_visits();
        for j in 0..n {
            let (end, observed) = if j + 1 < n {
                (s.visit_times[j + 1], true)
            } else {
                (s.censoring_time, false)
            };
            records.push(GapRecord {
                subject_id: s.id,
                index: j + 1,
                gap: end - s.visit_times[j],
                observed,
                covariates: covariates.values(s, j),
            });
        }
    }
    records
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelLabel {
    A,
    B,
    C,
    D,
    E,
}

impl ModelLabel {
    pub const ALL: [ModelLabel; 5] = [
        ModelLabel::A,
        ModelLabel::B,
        ModelLabel::C,
        ModelLabel::D,
        ModelLabel::E,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelLabel::A => "A",
            ModelLabel::B => "B",
            ModelLabel::C => "C",
            ModelLabel::D => "D",
            ModelLabel::E => "E",
        }
    }

    /// Names of the parameters each model reports, in output order.
    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            ModelLabel::A => &[
                "alpha0", "alpha1", "alpha2", "gamma", "beta", "lambda", "p", "sigma2_u",
                "sigma2_v", "sigma2_e",
            ],
            ModelLabel::B | ModelLabel::C => &[
                "alpha0", "alpha1", "alpha2", "alpha3", "sigma2_v", "sigma2_e",
            ],
            ModelLabel::D => &["alpha0", "alpha1", "alpha2", "sigma2_v", "sigma2_e"],
            ModelLabel::E => &["alpha0", "alpha1", "alpha2"],
        }
    }
}

impl fmt::Display for ModelLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(ModelLabel::A),
            "B" => Ok(ModelLabel::B),
            "C" => Ok(ModelLabel::C),
            "D" => Ok(ModelLabel::D),
            "E" => Ok(ModelLabel::E),
            other => Err(format!(
                "unknown model '{other}' (expected one of A, B, C, D, E)"
            )),
        }
    }
}

impl Serialize for ModelLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEstimate {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
}

/// Output of any of the five estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub model: ModelLabel,
    pub params: Vec<ParamEstimate>,
    /// Maximised log-likelihood; `None` for the estimating-equation model.
    pub loglik: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl FitResult {
    pub fn get(&self, name: &str) -> Option<&ParamEstimate> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn estimate(&self, name: &str) -> Option<f64> {
        self.get(name).map(|p| p.estimate)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fit results serialize")
    }
}

struct ParamMap<'a>(&'a [ParamEstimate]);

impl Serialize for ParamMap<'_> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct EstSe {
            est: Option<f64>,
            se: Option<f64>,
        }
        let finite = |x: f64| x.is_finite().then_some(x);
        let mut map = serializer.serialize_map(Some(self.0.len()))?;
        for p in self.0 {
            map.serialize_entry(
                &p.name,
                &EstSe {
                    est: finite(p.estimate),
                    se: finite(p.se),
                },
            )?;
        }
        map.end()
    }
}

impl Serialize for FitResult {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut st = serializer.serialize_struct("FitResult", 5)?;
        st.serialize_field("model", &self.model)?;
        st.serialize_field("params", &ParamMap(&self.params))?;
        st.serialize_field("loglik", &self.loglik)?;
        st.serialize_field("converged", &self.converged)?;
        st.serialize_field("iterations", &self.iterations)?;
        st.end()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subject(id: u32, visits: &[f64], c: f64) -> Subject {
        Subject {
            id,
            treated: id % 2 == 1,
            censoring_time: c,
            visit_times: visits.to_vec(),
            outcomes: visits.iter().map(|t| 1.0 + t).collect(),
            latent: None,
        }
    }

    #[test]
    fn gaps_from_visits() {
        let panel = build_panel(vec![subject(1, &[0.0, 1.5, 3.0], 5.0)]).unwrap();
        let gaps: Vec<_> = panel
            .gap_records
            .iter()
            .map(|r| (r.gap, r.observed))
            .collect();
        assert_eq!(gaps, vec![(1.5, true), (1.5, true), (2.0, false)]);
        assert_eq!(panel.gap_records[2].index, 3);
    }

    #[test]
    fn baseline_only_subject() {
        let panel = build_panel(vec![subject(4, &[0.0], 7.0)]).unwrap();
        assert_eq!(panel.gap_records.len(), 1);
        assert_eq!(panel.gap_records[0].gap, 7.0);
        assert!(!panel.gap_records[0].observed);
    }

    #[test]
    fn rejects_non_monotone() {
        let err = build_panel(vec![subject(9, &[0.0, 2.0, 2.0], 5.0)]).unwrap_err();
        assert!(matches!(
            err,
            DomainError::NonMonotoneVisits {
                subject: 9,
                index: 2,
                ..
            }
        ));
        assert!(err.to_string().contains("subject 9"));
    }

    #[test]
    fn rejects_visit_at_censoring() {
        let err = build_panel(vec![subject(3, &[0.0, 5.0], 5.0)]).unwrap_err();
        assert!(matches!(
            err,
            DomainError::VisitAfterCensoring { subject: 3, .. }
        ));
    }

    #[test]
    fn rejects_missing_baseline_and_empty() {
        assert!(matches!(
            build_panel(vec![subject(1, &[0.5], 5.0)]),
            Err(DomainError::MissingBaseline { .. })
        ));
        assert_eq!(build_panel(vec![]), Err(DomainError::EmptyPanel));
        assert!(matches!(
            build_panel(vec![subject(1, &[0.0], 5.0), subject(1, &[0.0], 6.0)]),
            Err(DomainError::DuplicateSubject(1))
        ));
    }

    #[test]
    fn previous_outcome_covariate() {
        let panel = build_panel_with(
            vec![subject(1, &[0.0, 2.0], 5.0)],
            "x",
            GapCovariates::TreatmentAndPreviousOutcome,
        )
        .unwrap();
        assert_eq!(panel.gap_records[0].covariates, vec![1.0, 1.0]);
        assert_eq!(panel.gap_records[1].covariates, vec![1.0, 3.0]);
    }

    #[test]
    fn fit_result_json_shape() {
        let fit = FitResult {
            model: ModelLabel::D,
            params: vec![ParamEstimate {
                name: "alpha1".into(),
                estimate: 1.25,
                se: 0.5,
            }],
            loglik: Some(-10.0),
            converged: true,
            iterations: 7,
        };
        let v: serde_json::Value = serde_json::from_str(&fit.to_json()).unwrap();
        assert_eq!(v["model"], "D");
        assert_eq!(v["params"]["alpha1"]["est"], 1.25);
        assert_eq!(v["params"]["alpha1"]["se"], 0.5);
        assert_eq!(v["loglik"], -10.0);
        assert_eq!(v["converged"], true);
        assert_eq!(v["iterations"], 7);
    }
}
