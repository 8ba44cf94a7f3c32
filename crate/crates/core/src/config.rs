//! Scenario configuration files.
//!
//! Files are TOML with a `[scenario]` table, an optional `[truth]` table and an
//! optional `[study]` table. Unknown keys are rejected. Any key may be omitted;
//! omitted values come from the named `preset` when one is given, otherwise
//! from the defaults listed below.
//!
//! ```toml
//! [scenario]
//! preset = "jm_g15_l030"       # optional starting point
//! name = "jm_g15_l030"
//! family = "joint_model"       # joint_model | gamma_treatment | gamma_treatment_lagged_y
//! n_subjects = 200
//! seed = 20200007
//! censoring_lower = 5.0
//! censoring_upper = 10.0
//! regular_interval = 1.0       # scheduled visits every interval (joint model only)
//! regular_rule = "reset"       # reset | superpose
//!
//! [truth]
//! alpha0 = 0.0
//! alpha1 = 1.0
//! alpha2 = 0.2
//! beta = 1.0
//! gamma = 1.5
//! lambda = 0.3
//! p = 1.05
//! sigma2_u = 1.0
//! sigma2_v = 0.5
//! sigma2_e = 1.0
//! gamma_shape = 2.0            # Gamma families
//! psi = 0.0
//! omega = 0.2
//! sigma2_xi = 0.1
//!
//! [study]
//! reps = 200
//! models = ["A", "B", "C", "D", "E"]
//! quadrature_order = 25
//! ```

use serde::Deserialize;
use thiserror::Error;

use crate::dgm::{DgmError, Family, RegularVisits, ScenarioConfig, ScheduleRule};
use crate::domain::ModelLabel;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
    #[error("unknown model '{0}'")]
    UnknownModel(String),
    #[error("{0}")]
    Invalid(#[from] DgmError),
    #[error("regular_rule given without regular_interval")]
    RuleWithoutInterval,
    #[error("study.reps must be at least 2, got {0}")]
    TooFewReps(usize),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    scenario: RawScenario,
    #[serde(default)]
    truth: RawTruth,
    #[serde(default)]
    study: RawStudy,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    preset: Option<String>,
    name: Option<String>,
    family: Option<Family>,
    n_subjects: Option<usize>,
    seed: Option<u64>,
    censoring_lower: Option<f64>,
    censoring_upper: Option<f64>,
    regular_interval: Option<f64>,
    regular_rule: Option<ScheduleRule>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTruth {
    alpha0: Option<f64>,
    alpha1: Option<f64>,
    alpha2: Option<f64>,
    beta: Option<f64>,
    gamma: Option<f64>,
    lambda: Option<f64>,
    p: Option<f64>,
    sigma2_u: Option<f64>,
    sigma2_v: Option<f64>,
    sigma2_e: Option<f64>,
    gamma_shape: Option<f64>,
    psi: Option<f64>,
    omega: Option<f64>,
    sigma2_xi: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStudy {
    reps: Option<usize>,
    models: Option<Vec<String>>,
    quadrature_order: Option<usize>,
}

/// Study settings that a config file may carry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StudySettings {
    pub reps: Option<usize>,
    pub models: Option<Vec<ModelLabel>>,
    pub quadrature_order: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    pub scenario: ScenarioConfig,
    pub study: StudySettings,
}

/// Every key accepted by the parser, as `(table, key, description)`.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    (
        "scenario",
        "preset",
        "shipped scenario used as the starting point",
    ),
    ("scenario", "name", "label written to output tables"),
    (
        "scenario",
        "family",
        "joint_model | gamma_treatment | gamma_treatment_lagged_y",
    ),
    (
        "scenario",
        "n_subjects",
        "subjects per simulated dataset (default 200)",
    ),
    ("scenario", "seed", "master seed"),
    (
        "scenario",
        "censoring_lower",
        "lower bound of the uniform censoring time (default 5)",
    ),
    (
        "scenario",
        "censoring_upper",
        "upper bound of the uniform censoring time (default 10)",
    ),
    (
        "scenario",
        "regular_interval",
        "add scheduled visits at this interval (joint model only)",
    ),
    (
        "scenario",
        "regular_rule",
        "reset | superpose: how scheduled visits combine with the process",
    ),
    ("truth", "alpha0", "outcome intercept (default 0)"),
    (
        "truth",
        "alpha1",
        "treatment effect on the outcome (default 1)",
    ),
    ("truth", "alpha2", "time slope of the outcome (default 0.2)"),
    (
        "truth",
        "beta",
        "treatment log hazard ratio for visits (default 1)",
    ),
    (
        "truth",
        "gamma",
        "frailty loading on the outcome (default 0)",
    ),
    (
        "truth",
        "lambda",
        "Weibull scale of the visit hazard (default 0.1)",
    ),
    (
        "truth",
        "p",
        "Weibull shape of the visit hazard (default 1.05)",
    ),
    ("truth", "sigma2_u", "frailty variance (default 1)"),
    (
        "truth",
        "sigma2_v",
        "random-intercept variance (default 0.5)",
    ),
    ("truth", "sigma2_e", "residual variance (default 1)"),
    (
        "truth",
        "gamma_shape",
        "shape of Gamma gap times (default 2)",
    ),
    (
        "truth",
        "psi",
        "treatment effect on the Gamma gap rate (default 0)",
    ),
    (
        "truth",
        "omega",
        "previous-outcome effect on the Gamma gap rate (default 0.2)",
    ),
    (
        "truth",
        "sigma2_xi",
        "variance of the subject effect on Gamma gaps (default 0.1)",
    ),
    ("study", "reps", "number of replications"),
    ("study", "models", "subset of A, B, C, D, E"),
    (
        "study",
        "quadrature_order",
        "Gauss-Hermite nodes for model A (default 25)",
    ),
];

/// Human-readable listing of [`SCHEMA`].
pub fn schema_help() -> String {
    let mut out = String::from("Config keys:\n");
    for (table, key, doc) in SCHEMA {
        out.push_str(&format!("  [{table}] {key:<18} {doc}\n"));
    }
    out
}

pub fn parse_config(text: &str) -> Result<ConfigFile, ConfigError> {
    let raw: RawFile = toml::from_str(text)?;
    let s = raw.scenario;
    let mut cfg = match &s.preset {
        Some(p) => {
            ScenarioConfig::preset(p).ok_or_else(|| ConfigError::UnknownPreset(p.clone()))?
        }
        None => ScenarioConfig::default(),
    };
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    set!(cfg.name, s.name);
    set!(cfg.family, s.family);
    set!(cfg.n_subjects, s.n_subjects);
    set!(cfg.seed, s.seed);
    set!(cfg.censoring_lower, s.censoring_lower);
    set!(cfg.censoring_upper, s.censoring_upper);
    match (s.regular_interval, s.regular_rule) {
        (Some(interval), rule) => {
            cfg.regular_visits = Some(RegularVisits {
                interval,
                rule: rule.unwrap_or_default(),
            })
        }
        (None, Some(rule)) => match cfg.regular_visits.as_mut() {
            Some(r) => r.rule = rule,
            None => return Err(ConfigError::RuleWithoutInterval),
        },
        (None, None) => {}
    }
    let t = raw.truth;
    let tr = &mut cfg.truth;
    set!(tr.alpha0, t.alpha0);
    set!(tr.alpha1, t.alpha1);
    set!(tr.alpha2, t.alpha2);
    set!(tr.beta, t.beta);
    set!(tr.gamma, t.gamma);
    set!(tr.lambda, t.lambda);
    set!(tr.p, t.p);
    set!(tr.sigma2_u, t.sigma2_u);
    set!(tr.sigma2_v, t.sigma2_v);
    set!(tr.sigma2_e, t.sigma2_e);
    set!(tr.gamma_shape, t.gamma_shape);
    set!(tr.psi, t.psi);
    set!(tr.omega, t.omega);
    set!(tr.sigma2_xi, t.sigma2_xi);
    cfg.validate()?;

    let models = raw
        .study
        .models
        .map(|ms| {
            ms.iter()
                .map(|m| {
                    m.parse::<ModelLabel>()
                        .map_err(|_| ConfigError::UnknownModel(m.clone()))
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .transpose()?;
    if let Some(r) = raw.study.reps {
        if r < 2 {
            return Err(ConfigError::TooFewReps(r));
        }
    }
    Ok(ConfigFile {
        scenario: cfg,
        study: StudySettings {
            reps: raw.study.reps,
            models,
            quadrature_order: raw.study.quadrature_order,
        },
    })
}

/// Renders a scenario as a config file that parses back to the same scenario.
pub fn render_config(cfg: &ScenarioConfig) -> String {
    let family = match cfg.family {
        Family::JointModel => "joint_model",
        Family::GammaTreatment => "gamma_treatment",
        Family::GammaTreatmentLaggedY => "gamma_treatment_lagged_y",
    };
    let t = &cfg.truth;
    let mut out = format!(
        "[scenario]\nname = \"{}\"\nfamily = \"{family}\"\nn_subjects = {}\nseed = {}\ncensoring_lower = {:?}\ncensoring_upper = {:?}\n",
        cfg.name, cfg.n_subjects, cfg.seed, cfg.censoring_lower, cfg.censoring_upper
    );
    if let Some(r) = &cfg.regular_visits {
        let rule = match r.rule {
            ScheduleRule::Reset => "reset",
            ScheduleRule::Superpose => "superpose",
        };
        out.push_str(&format!(
            "regular_interval = {:?}\nregular_rule = \"{rule}\"\n",
            r.interval
        ));
    }
    out.push_str("\n[truth]\n");
    for (k, v) in [
        ("alpha0", t.alpha0),
        ("alpha1", t.alpha1),
        ("alpha2", t.alpha2),
        ("beta", t.beta),
        ("gamma", t.gamma),
        ("lambda", t.lambda),
        ("p", t.p),
        ("sigma2_u", t.sigma2_u),
        ("sigma2_v", t.sigma2_v),
        ("sigma2_e", t.sigma2_e),
        ("gamma_shape", t.gamma_shape),
        ("psi", t.psi),
        ("omega", t.omega),
        ("sigma2_xi", t.sigma2_xi),
    ] {
        out.push_str(&format!("{k} = {v:?}\n"));
    }
    out
}
