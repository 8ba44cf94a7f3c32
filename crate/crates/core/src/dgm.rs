//! Data-generating mechanisms for panels with informative visit processes.
//!
//! Three families are supported:
//!
//! * [`Family::JointModel`]: semi-Markov Weibull visit process with a shared
//!   log-normal frailty `u` that also enters the outcome as `gamma * u`.
//! * [`Family::GammaTreatment`]: Gamma gap times whose scale depends on
//!   treatment and a subject-level effect `xi`.
//! * [`Family::GammaTreatmentLaggedY`]: as above, with the scale also driven by
//!   the outcome recorded at the visit opening the gap.
//!
//! Per-subject draw order is fixed: censoring time, treatment, the subject
//! effects (`u` or `xi`, then `v`), then for every visit the residual of its
//! outcome followed by the gap to the next visit. Each subject draws from its
//! own substream (see [`crate::rng`]).

use rand::distr::{Bernoulli, Open01};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    build_panel_with, DomainError, GapCovariates, LatentEffects, PanelDataset, Subject,
};
use crate::rng::DatasetSeed;

/// Visits per subject beyond which a simulated process is treated as runaway.
const MAX_VISITS_PER_SUBJECT: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DgmError {
    #[error("uniform draw {0} outside (0, 1)")]
    UniformOutOfRange(f64),
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("scenario family {0:?} cannot be simulated by this generator")]
    WrongFamily(Family),
    #[error("subject {0}: visit process exceeded {MAX_VISITS_PER_SUBJECT} visits")]
    RunawayProcess(u32),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    JointModel,
    GammaTreatment,
    GammaTreatmentLaggedY,
}

/// How scheduled visits combine with the stochastic visit process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleRule {
    /// The next visit is the earlier of the process draw and the next
    /// scheduled time; the gap clock restarts at every realised visit.
    #[default]
    Reset,
    /// Scheduled visits are added on top of an undisturbed process.
    Superpose,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularVisits {
    /// Interval between scheduled visits, in years.
    pub interval: f64,
    pub rule: ScheduleRule,
}

/// True parameter values of a data-generating mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub alpha0: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub p: f64,
    pub sigma2_u: f64,
    pub sigma2_v: f64,
    pub sigma2_e: f64,
    pub gamma_shape: f64,
    pub psi: f64,
    pub omega: f64,
    pub sigma2_xi: f64,
}

impl Default for Truth {
    fn default() -> Self {
        Self {
            alpha0: 0.0,
            alpha1: 1.0,
            alpha2: 0.2,
            beta: 1.0,
            gamma: 0.0,
            lambda: 0.10,
            p: 1.05,
            sigma2_u: 1.0,
            sigma2_v: 0.5,
            sigma2_e: 1.0,
            gamma_shape: 2.0,
            psi: 0.0,
            omega: 0.20,
            sigma2_xi: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub family: Family,
    pub n_subjects: usize,
    pub seed: u64,
    pub censoring_lower: f64,
    pub censoring_upper: f64,
    pub regular_visits: Option<RegularVisits>,
    pub truth: Truth,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            family: Family::JointModel,
            n_subjects: 200,
            seed: 1,
            censoring_lower: 5.0,
            censoring_upper: 10.0,
            regular_visits: None,
            truth: Truth::default(),
        }
    }
}

/// Names of the shipped scenarios, in the order of the descriptive table.
pub const PRESET_NAMES: [&str; 10] = [
    "gamma_psi0",
    "jm_g00_l010",
    "jm_g00_l030",
    "jm_g00_l100",
    "gamma_psi2",
    "gamma_psi2_lagged",
    "jm_g15_l010",
    "jm_g15_l030",
    "jm_g15_l100",
    "jm_g30_l005_regular",
];

impl ScenarioConfig {
    pub fn joint_model(name: &str, gamma: f64, lambda: f64) -> Self {
        Self {
            name: name.into(),
            truth: Truth {
                gamma,
                lambda,
                ..Truth::default()
            },
            ..Self::default()
        }
    }

    pub fn gamma_process(name: &str, psi: f64, lagged: bool) -> Self {
        Self {
            name: name.into(),
            family: if lagged {
                Family::GammaTreatmentLaggedY
            } else {
                Family::GammaTreatment
            },
            truth: Truth {
                psi,
                ..Truth::default()
            },
            ..Self::default()
        }
    }

    /// One of the ten shipped scenarios, by name (see [`PRESET_NAMES`]).
    pub fn preset(name: &str) -> Option<Self> {
        let mut config = match name {
            "gamma_psi0" => Self::gamma_process(name, 0.0, false),
            "jm_g00_l010" => Self::joint_model(name, 0.0, 0.10),
            "jm_g00_l030" => Self::joint_model(name, 0.0, 0.30),
            "jm_g00_l100" => Self::joint_model(name, 0.0, 1.00),
            "gamma_psi2" => Self::gamma_process(name, 2.0, false),
            "gamma_psi2_lagged" => Self::gamma_process(name, 2.0, true),
            "jm_g15_l010" => Self::joint_model(name, 1.5, 0.10),
            "jm_g15_l030" => Self::joint_model(name, 1.5, 0.30),
            "jm_g15_l100" => Self::joint_model(name, 1.5, 1.00),
            "jm_g30_l005_regular" => {
                let mut c = Self::joint_model(name, 3.0, 0.05);
                c.regular_visits = Some(RegularVisits {
                    interval: 1.0,
                    rule: ScheduleRule::Reset,
                });
                c
            }
            _ => return None,
        };
        let position = PRESET_NAMES.iter().position(|n| *n == name)? as u64;
        config.seed = 20_200_000 + position;
        Some(config)
    }

    pub fn presets() -> Vec<Self> {
        PRESET_NAMES
            .iter()
            .map(|n| Self::preset(n).expect("preset exists"))
            .collect()
    }

    pub fn validate(&self) -> Result<(), DgmError> {
        let t = &self.truth;
        let bad = |msg: String| Err(DgmError::InvalidConfig(msg));
        if self.n_subjects == 0 {
            return bad("n_subjects must be at least 1".into());
        }
        if self.n_subjects > u32::MAX as usize {
            return bad("n_subjects too large".into());
        }
        for (name, value) in [
            ("sigma2_u", t.sigma2_u),
            ("sigma2_v", t.sigma2_v),
            ("sigma2_e", t.sigma2_e),
            ("sigma2_xi", t.sigma2_xi),
            ("lambda", t.lambda),
            ("p", t.p),
            ("gamma_shape", t.gamma_shape),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return bad(format!("{name} must be positive and finite, got {value}"));
            }
        }
        for (name, value) in [
            ("alpha0", t.alpha0),
            ("alpha1", t.alpha1),
            ("alpha2", t.alpha2),
            ("beta", t.beta),
            ("gamma", t.gamma),
            ("psi", t.psi),
            ("omega", t.omega),
        ] {
            if !value.is_finite() {
                return bad(format!("{name} must be finite"));
            }
        }
        if !(self.censoring_lower > 0.0
            && self.censoring_upper >= self.censoring_lower
            && self.censoring_upper.is_finite())
        {
            return bad(format!(
                "censoring bounds must satisfy 0 < lower <= upper, got ({}, {})",
                self.censoring_lower, self.censoring_upper
            ));
        }
        if let Some(r) = &self.regular_visits {
            if !(r.interval > 0.0 && r.interval.is_finite()) {
                return bad("regular visit interval must be positive".into());
            }
            if self.family != Family::JointModel {
                return bad("regular visits are only defined for the joint-model family".into());
            }
        }
        Ok(())
    }

    /// True values for every parameter that has one under this mechanism.
    pub fn truths(&self) -> std::collections::BTreeMap<String, f64> {
        let t = &self.truth;
        let mut m = std::collections::BTreeMap::new();
        let mut put = |k: &str, v: f64| {
            m.insert(k.to_owned(), v);
        };
        put("alpha0", t.alpha0);
        put("alpha1", t.alpha1);
        put("alpha2", t.alpha2);
        put("sigma2_v", t.sigma2_v);
        put("sigma2_e", t.sigma2_e);
        if self.family == Family::JointModel {
            put("gamma", t.gamma);
            put("beta", t.beta);
            put("lambda", t.lambda);
            put("p", t.p);
            put("sigma2_u", t.sigma2_u);
        }
        m
    }
}

/// Inverse-transform draw of a Weibull proportional-hazards gap time.
///
/// The cumulative hazard is `lambda * t^p * exp(linpred)`, so the draw solves
/// `H(t) = -ln(u01)`.
pub fn draw_weibull_gap(u01: f64, lambda: f64, p: f64, linpred: f64) -> Result<f64, DgmError> {
    if !(u01 > 0.0 && u01 < 1.0) {
        return Err(DgmError::UniformOutOfRange(u01));
    }
    Ok((-u01.ln() / (lambda * linpred.exp())).powf(1.0 / p))
}

/// Simulates one dataset from whichever family the config names.
pub fn simulate(config: &ScenarioConfig, seed: DatasetSeed) -> Result<PanelDataset, DgmError> {
    match config.family {
        Family::JointModel => simulate_joint_model(config, seed),
        Family::GammaTreatment | Family::GammaTreatmentLaggedY => {
            simulate_gamma_process(config, seed)
        }
    }
}

pub fn simulate_joint_model(
    config: &ScenarioConfig,
    seed: impl Into<DatasetSeed>,
) -> Result<PanelDataset, DgmError> {
    if config.family != Family::JointModel {
        return Err(DgmError::WrongFamily(config.family));
    }
    simulate_subjects(config, seed.into(), joint_model_subject)
}

pub fn simulate_gamma_process(
    config: &ScenarioConfig,
    seed: impl Into<DatasetSeed>,
) -> Result<PanelDataset, DgmError> {
    if config.family == Family::JointModel {
        return Err(DgmError::WrongFamily(config.family));
    }
    simulate_subjects(config, seed.into(), gamma_subject)
}

fn simulate_subjects(
    config: &ScenarioConfig,
    seed: DatasetSeed,
    draw: fn(&ScenarioConfig, u32, &mut ChaCha8Rng) -> Result<Subject, DgmError>,
) -> Result<PanelDataset, DgmError> {
    config.validate()?;
    let subjects = (0..config.n_subjects as u32)
        .map(|i| {
            let mut rng = seed.subject_rng(i);
            draw(config, i + 1, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(build_panel_with(
        subjects,
        &config.name,
        GapCovariates::Treatment,
    )?)
}

/// Draws shared by both families: censoring time and treatment.
fn draw_design(config: &ScenarioConfig, rng: &mut ChaCha8Rng) -> (f64, bool) {
    let width = config.censoring_upper - config.censoring_lower;
    let censoring = config.censoring_lower + width * rng.random::<f64>();
    let treated = rng.sample(Bernoulli::new(0.5).expect("valid probability"));
    (censoring, treated)
}

fn normal(rng: &mut ChaCha8Rng, variance: f64) -> f64 {
    Normal::new(0.0, variance.sqrt())
        .expect("validated variance")
        .sample(rng)
}

fn joint_model_subject(
    config: &ScenarioConfig,
    id: u32,
    rng: &mut ChaCha8Rng,
) -> Result<Subject, DgmError> {
    let t = &config.truth;
    let (censoring, treated) = draw_design(config, rng);
    let z = if treated { 1.0 } else { 0.0 };
    let u = normal(rng, t.sigma2_u);
    let v = normal(rng, t.sigma2_v);
    let linpred = t.beta * z + u;
    let residual = Normal::new(0.0, t.sigma2_e.sqrt()).expect("validated variance");
    let outcome = |time: f64, rng: &mut ChaCha8Rng| {
        t.alpha0 + z * t.alpha1 + time * t.alpha2 + t.gamma * u + v + residual.sample(rng)
    };
    let gap = |rng: &mut ChaCha8Rng| {
        let u01: f64 = rng.sample(Open01);
        draw_weibull_gap(u01, t.lambda, t.p, linpred)
    };

    let mut visit_times = vec![0.0];
    let mut outcomes = vec![outcome(0.0, rng)];
    match config.regular_visits {
        Some(RegularVisits {
            interval,
            rule: ScheduleRule::Superpose,
        }) => {
            let mut process = Vec::new();
            let mut clock = 0.0;
            loop {
                clock += gap(rng)?;
                if clock >= censoring {
                    break;
                }
                process.push(clock);
                if process.len() > MAX_VISITS_PER_SUBJECT {
                    return Err(DgmError::RunawayProcess(id));
                }
            }
            let mut k = 1.0;
            while k * interval < censoring {
                process.push(k * interval);
                k += 1.0;
            }
            process.sort_by(f64::total_cmp);
            process.dedup();
            for time in process {
                visit_times.push(time);
                outcomes.push(outcome(time, rng));
            }
        }
        schedule => {
            let mut now = 0.0;
            loop {
                let mut next = now + gap(rng)?;
                if let Some(r) = schedule {
                    next = next.min(next_scheduled(now, r.interval));
                }
                if next >= censoring {
                    break;
                }
                now = next;
                visit_times.push(now);
                outcomes.push(outcome(now, rng));
                if visit_times.len() > MAX_VISITS_PER_SUBJECT {
                    return Err(DgmError::RunawayProcess(id));
                }
            }
        }
    }
    Ok(Subject {
        id,
        treated,
        censoring_time: censoring,
        visit_times,
        outcomes,
        latent: Some(LatentEffects { frailty: u, v }),
    })
}

/// First multiple of `interval` strictly after `now`.
fn next_scheduled(now: f64, interval: f64) -> f64 {
    let mut k = (now / interval).floor() + 1.0;
    // Guard against `now` sitting a rounding error below a scheduled time.
    if k * interval <= now + 1e-9 * interval {
        k += 1.0;
    }
    k * interval
}

fn gamma_subject(
    config: &ScenarioConfig,
    id: u32,
    rng: &mut ChaCha8Rng,
) -> Result<Subject, DgmError> {
    let t = &config.truth;
    let lagged = config.family == Family::GammaTreatmentLaggedY;
    let (censoring, treated) = draw_design(config, rng);
    let z = if treated { 1.0 } else { 0.0 };
    let xi = normal(rng, t.sigma2_xi);
    let v = normal(rng, t.sigma2_v);
    let residual = Normal::new(0.0, t.sigma2_e.sqrt()).expect("validated variance");

    let mut visit_times = vec![0.0];
    let mut outcomes = Vec::new();
    let mut now = 0.0;
    loop {
        let y = t.alpha0 + z * t.alpha1 + now * t.alpha2 + v + residual.sample(rng);
        outcomes.push(y);
        let mut log_scale = -t.psi * t.beta * z + xi;
        if lagged {
            log_scale += t.omega * y;
        }
        let gap = Gamma::new(t.gamma_shape, log_scale.exp())
            .map_err(|e| DgmError::InvalidConfig(format!("gamma gap distribution: {e}")))?
            .sample(rng);
        let next = now + gap;
        if next >= censoring || !(gap > 0.0) {
            break;
        }
        now = next;
        visit_times.push(now);
        if visit_times.len() > MAX_VISITS_PER_SUBJECT {
            return Err(DgmError::RunawayProcess(id));
        }
    }
    Ok(Subject {
        id,
        treated,
        censoring_time: censoring,
        visit_times,
        outcomes,
        latent: Some(LatentEffects { frailty: xi, v }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn weibull_gap_unit_exponential() {
        let t = draw_weibull_gap((-1.0f64).exp(), 1.0, 1.0, 0.0).unwrap();
        assert!((t - 1.0).abs() < 1e-15);
    }

    #[test]
    fn weibull_gap_matches_closed_form() {
        // (ln 2 / 0.3)^(1/1.05)
        let expected = (std::f64::consts::LN_2 / 0.30).powf(1.0 / 1.05);
        let t = draw_weibull_gap(0.5, 0.30, 1.05, 0.0).unwrap();
        assert!((t - expected).abs() < 1e-12);
        assert!((t - 2.2202).abs() < 1e-4);
    }

    #[test]
    fn weibull_gap_inverts_cumulative_hazard() {
        for &(u, lam, p, lp) in &[
            (0.3, 0.1, 1.05, 0.7),
            (0.99, 2.0, 0.5, -1.0),
            (1e-9, 0.05, 3.0, 2.5),
        ] {
            let t = draw_weibull_gap(u, lam, p, lp).unwrap();
            let h: f64 = lam * t.powf(p) * f64::exp(lp);
            assert!((h + f64::ln(u)).abs() < 1e-12 * (1.0 + h));
        }
    }

    #[test]
    fn weibull_gap_domain() {
        for u in [0.0, 1.0, -0.5, f64::NAN] {
            assert!(matches!(
                draw_weibull_gap(u, 1.0, 1.0, 0.0),
                Err(DgmError::UniformOutOfRange(_))
            ));
        }
    }

    #[test]
    fn degenerate_noise_gives_pure_random_intercept() {
        let mut c = ScenarioConfig::joint_model("degenerate", 2.0, 0.3);
        c.truth.sigma2_u = 1e-30;
        c.truth.sigma2_e = 1e-30;
        c.truth.alpha0 = 0.0;
        c.truth.alpha1 = 0.0;
        c.truth.alpha2 = 0.0;
        c.n_subjects = 20;
        let panel = simulate(&c, DatasetSeed::new(5, 0)).unwrap();
        for s in &panel.subjects {
            let v = s.latent.unwrap().v;
            for y in &s.outcomes {
                assert!((y - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fixed_censoring_without_process_gives_baseline_only() {
        let mut c = ScenarioConfig::joint_model("empty", 0.0, 1e-300);
        c.censoring_lower = 6.0;
        c.censoring_upper = 6.0;
        c.n_subjects = 30;
        let panel = simulate(&c, DatasetSeed::new(1, 0)).unwrap();
        assert_eq!(panel.n_rows(), 30);
        assert!(panel.subjects.iter().all(|s| s.censoring_time == 6.0));
    }

    #[test]
    fn regular_visits_fill_schedule() {
        let mut c = ScenarioConfig::preset("jm_g30_l005_regular").unwrap();
        c.truth.lambda = 1e-300;
        c.n_subjects = 50;
        let panel = simulate(&c, DatasetSeed::new(3, 0)).unwrap();
        for s in &panel.subjects {
            assert_eq!(s.n_visits(), 1 + s.censoring_time.floor() as usize);
            for (k, t) in s.visit_times.iter().enumerate() {
                assert_eq!(*t, k as f64);
            }
        }
    }

    #[test]
    fn regular_reset_rule_never_skips_schedule() {
        let c = ScenarioConfig::preset("jm_g30_l005_regular").unwrap();
        let panel = simulate(&c, DatasetSeed::new(9, 2)).unwrap();
        for s in &panel.subjects {
            for k in 1..=(s.censoring_time.floor() as usize) {
                let k = k as f64;
                if k < s.censoring_time {
                    assert!(s.visit_times.contains(&k), "scheduled visit {k} missing");
                }
            }
        }
    }

    #[test]
    fn superpose_rule_contains_schedule() {
        let mut c = ScenarioConfig::preset("jm_g30_l005_regular").unwrap();
        c.regular_visits.as_mut().unwrap().rule = ScheduleRule::Superpose;
        c.truth.lambda = 0.5;
        let panel = simulate(&c, DatasetSeed::new(9, 2)).unwrap();
        let extra: usize = panel
            .subjects
            .iter()
            .map(|s| s.n_visits() - 1 - s.censoring_time.floor() as usize)
            .sum();
        assert!(extra > 0);
    }

    #[test]
    fn next_scheduled_is_strictly_later() {
        assert_eq!(next_scheduled(0.0, 1.0), 1.0);
        assert_eq!(next_scheduled(3.0, 1.0), 4.0);
        assert_eq!(next_scheduled(3.4, 1.0), 4.0);
        assert_eq!(next_scheduled(0.3, 0.1), 0.4);
    }

    #[test]
    fn gamma_family_mean_gap() {
        // Z = 0, xi = 0, omega = 0: gaps are iid Gamma(2, 1).
        let g = Gamma::new(2.0, 1.0).unwrap();
        let mut rng = substream(77, 0, 0);
        let n = 1_000_000;
        let mean = (0..n).map(|_| g.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn wrong_family_rejected() {
        let c = ScenarioConfig::preset("gamma_psi0").unwrap();
        assert!(matches!(
            simulate_joint_model(&c, 1),
            Err(DgmError::WrongFamily(_))
        ));
        let c = ScenarioConfig::preset("jm_g00_l010").unwrap();
        assert!(matches!(
            simulate_gamma_process(&c, 1),
            Err(DgmError::WrongFamily(_))
        ));
    }

    #[test]
    fn validation_errors() {
        let mut c = ScenarioConfig::default();
        c.truth.sigma2_v = 0.0;
        assert!(c.validate().is_err());
        let c = ScenarioConfig {
            n_subjects: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ScenarioConfig {
            censoring_upper: 4.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn presets_are_valid_and_named() {
        let presets = ScenarioConfig::presets();
        assert_eq!(presets.len(), 10);
        for p in &presets {
            p.validate().unwrap();
        }
        assert!(ScenarioConfig::preset("nope").is_none());
    }
}
