use std::fmt::Write as _;
use std::path::Path;

use visitsim_core::config::{parse_config, render_config, StudySettings};
use visitsim_core::domain::GapCovariates;
use visitsim_core::harness::{
    describe_datasets, diagnose_informativeness, run_and_summarize, DiagnoseOptions,
    DiagnosticCovariate, HarnessError,
};
use visitsim_core::iivw::{fit_model_e, IivwOptions};
use visitsim_core::io::{read_panel_csv, write_panel_csv};
use visitsim_core::jointfit::{
    fit_joint_detailed, joint_loglik_contributions, Integration, JointOptions,
};
use visitsim_core::quadrature::QuadratureRule;
use visitsim_core::{fit_model, simulate as simulate_panel, summarize as summarize_table};
use visitsim_core::{
    DatasetSeed, EstimatesTable, FitOptions, ModelLabel, PanelDataset, ScenarioConfig, StudyConfig,
};

use crate::output::{manifest_beside, Manifest};
use crate::{CliError, Quadrature, ScenarioSource};

const DEFAULT_REPS: usize = 200;

struct Resolved {
    scenario: ScenarioConfig,
    study: StudySettings,
    text: String,
    seed: u64,
    seed_source: &'static str,
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

/// Scenario from `--config` or `--preset`; seed from `--seed`, then
/// `VISITSIM_SEED`, then the config.
fn resolve(source: &ScenarioSource) -> Result<Resolved, CliError> {
    let (mut scenario, study, text) = match (&source.config, &source.preset) {
        (Some(path), _) => {
            let bytes = read_file(path)?;
            let text = String::from_utf8(bytes)
                .map_err(|_| CliError::Validation(format!("{}: not UTF-8 text", path.display())))?;
            let parsed = parse_config(&text)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            (parsed.scenario, parsed.study, text)
        }
        (None, Some(name)) => {
            let cfg = ScenarioConfig::preset(name).ok_or_else(|| {
                CliError::Validation(format!(
                    "unknown preset '{name}' (expected one of {})",
                    visitsim_core::dgm::PRESET_NAMES.join(", ")
                ))
            })?;
            let text = render_config(&cfg);
            (cfg, StudySettings::default(), text)
        }
        (None, None) => {
            return Err(CliError::Validation(
                "one of --config or --preset is required".into(),
            ))
        }
    };
    let (seed, seed_source) = match source.seed {
        Some(s) => (s, "flag"),
        None => match std::env::var("VISITSIM_SEED") {
            Ok(v) => (
                v.trim().parse().map_err(|_| {
                    CliError::Validation(format!("VISITSIM_SEED is not an unsigned integer: '{v}'"))
                })?,
                "env",
            ),
            Err(_) => (scenario.seed, "config"),
        },
    };
    scenario.seed = seed;
    Ok(Resolved {
        scenario,
        study,
        text,
        seed,
        seed_source,
    })
}

fn manifest_for(command: &'static str, r: &Resolved) -> Manifest {
    let mut m = Manifest::new(command);
    m.config_text(r.text.clone());
    m.master_seed = Some(r.seed);
    m.seed_source = Some(r.seed_source);
    m
}

fn load_panel(path: &Path, manifest: &mut Manifest) -> Result<PanelDataset, CliError> {
    let bytes = read_file(path)?;
    manifest.input(path, &bytes);
    read_panel_csv(bytes.as_slice())
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

pub fn simulate(source: &ScenarioSource, rep: u32, out: &Path) -> Result<(), CliError> {
    let r = resolve(source)?;
    let panel = simulate_panel(&r.scenario, DatasetSeed::new(r.seed, rep))
        .map_err(|e| CliError::Numerical(format!("simulation failed: {e}")))?;
    let mut buf = Vec::new();
    write_panel_csv(&panel, &mut buf).map_err(|e| CliError::Validation(e.to_string()))?;
    let mut manifest = manifest_for("simulate", &r);
    manifest.write(out, &buf)?;
    manifest.finish(&manifest_beside(out))?;
    log::info!(
        "{} subjects, {} rows written to {}",
        panel.n_subjects(),
        panel.n_rows(),
        out.display()
    );
    Ok(())
}

pub struct FitArgs<'a> {
    pub panel: &'a Path,
    pub model: &'a str,
    pub quadrature: Quadrature,
    pub order: usize,
    pub weight_covariates: &'a str,
    pub weights_out: Option<&'a Path>,
    pub dump_loglik: Option<&'a Path>,
    pub out: Option<&'a Path>,
}

fn integration(q: Quadrature) -> Integration {
    match q {
        Quadrature::Adaptive => Integration::Adaptive,
        Quadrature::Standard => Integration::Standard,
    }
}

fn check_order(order: usize) -> Result<(), CliError> {
    QuadratureRule::gauss_hermite(order)
        .map(|_| ())
        .map_err(|e| CliError::Validation(e.to_string()))
}

pub fn fit(a: FitArgs<'_>) -> Result<(), CliError> {
    let model: ModelLabel = a.model.parse().map_err(CliError::Validation)?;
    check_order(a.order)?;
    if a.weights_out.is_some() && model != ModelLabel::E {
        return Err(CliError::Validation(
            "--weights-out applies to model E only".into(),
        ));
    }
    if a.dump_loglik.is_some() && model != ModelLabel::A {
        return Err(CliError::Validation(
            "--dump-loglik applies to model A only".into(),
        ));
    }
    let covariates = match a.weight_covariates {
        "z" => GapCovariates::Treatment,
        "z,y_prev" => GapCovariates::TreatmentAndPreviousOutcome,
        other => {
            return Err(CliError::Validation(format!(
                "unknown --weight-covariates '{other}' (expected z or z,y_prev)"
            )))
        }
    };
    let mut manifest = Manifest::new("fit");
    let panel = load_panel(a.panel, &mut manifest)?;
    let joint = JointOptions {
        order: a.order,
        integration: integration(a.quadrature),
        ..JointOptions::default()
    };
    let numerical = |e: &dyn std::fmt::Display| CliError::Numerical(format!("model {model}: {e}"));

    let result = match model {
        ModelLabel::A => {
            let fit = fit_joint_detailed(&panel, &joint).map_err(|e| numerical(&e))?;
            if let Some(path) = a.dump_loglik {
                let rule = QuadratureRule::gauss_hermite(a.order).map_err(|e| numerical(&e))?;
                let parts =
                    joint_loglik_contributions(&fit.params, &panel, &rule, joint.integration)
                        .map_err(|e| numerical(&e))?;
                let mut csv = String::from("subject_id,loglik\n");
                for (id, v) in parts {
                    let _ = writeln!(csv, "{id},{v}");
                }
                manifest.write(path, csv.as_bytes())?;
            }
            fit.to_fit_result()
        }
        ModelLabel::E => {
            let opts = IivwOptions {
                covariates,
                ..IivwOptions::default()
            };
            let (fit, weights) = fit_model_e(&panel, &opts).map_err(|e| numerical(&e))?;
            if let Some(path) = a.weights_out {
                let mut buf = Vec::new();
                weights
                    .write_csv(&mut buf)
                    .map_err(|e| CliError::Validation(e.to_string()))?;
                manifest.write(path, &buf)?;
            }
            fit
        }
        _ => {
            let opts = FitOptions {
                joint,
                ..FitOptions::default()
            };
            fit_model(&panel, model, &opts).map_err(|e| numerical(&e))?
        }
    };
    let mut json = result.to_json();
    json.push('\n');
    match a.out {
        Some(path) => {
            manifest.write(path, json.as_bytes())?;
            manifest.finish(&manifest_beside(path))?;
        }
        None => {
            print!("{json}");
            if let Some(first) = manifest.outputs.first() {
                let path = std::path::PathBuf::from(&first.path);
                manifest.finish(&manifest_beside(&path))?;
            }
        }
    }
    if result.converged {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "model {model} did not converge"
        )))
    }
}

pub struct StudyArgs<'a> {
    pub source: &'a ScenarioSource,
    pub reps: Option<usize>,
    pub models: Option<&'a [String]>,
    pub quadrature: Quadrature,
    pub order: Option<usize>,
    pub out_dir: &'a Path,
}

pub fn run_study(a: StudyArgs<'_>) -> Result<(), CliError> {
    let r = resolve(a.source)?;
    let models = match a.models {
        Some(list) => list
            .iter()
            .map(|m| m.parse::<ModelLabel>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(CliError::Validation)?,
        None => r
            .study
            .models
            .clone()
            .unwrap_or_else(|| ModelLabel::ALL.to_vec()),
    };
    let order = a.order.or(r.study.quadrature_order).unwrap_or(25);
    check_order(order)?;
    let study = StudyConfig {
        scenario: r.scenario.clone(),
        models,
        reps: a.reps.or(r.study.reps).unwrap_or(DEFAULT_REPS),
        master_seed: r.seed,
        fit: FitOptions {
            joint: JointOptions {
                order,
                integration: integration(a.quadrature),
                ..JointOptions::default()
            },
            ..FitOptions::default()
        },
    };
    log::info!(
        "{}: {} replications of {:?}",
        study.scenario.name,
        study.reps,
        study.models
    );
    let (estimates, perf) = run_and_summarize(&study).map_err(|e| match e {
        HarnessError::Simulation { .. } => CliError::Numerical(e.to_string()),
        other => CliError::Validation(other.to_string()),
    })?;
    let mut manifest = manifest_for("run-study", &r);
    let mut buf = Vec::new();
    estimates
        .write_csv(&mut buf)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    manifest.write(&a.out_dir.join("estimates.csv"), &buf)?;
    manifest.write(
        &a.out_dir.join("performance.csv"),
        perf.to_csv_string().as_bytes(),
    )?;
    manifest.finish(&a.out_dir.join("manifest.json"))?;
    Ok(())
}

pub fn summarize(estimates: &Path, source: &ScenarioSource, out: &Path) -> Result<(), CliError> {
    let r = resolve(source)?;
    let mut manifest = manifest_for("summarize", &r);
    let bytes = read_file(estimates)?;
    manifest.input(estimates, &bytes);
    let table = EstimatesTable::read_csv(bytes.as_slice())
        .map_err(|e| CliError::Validation(format!("{}: {e}", estimates.display())))?;
    let truths = r.scenario.truths();
    let perf = summarize_table(&table.with_params_in(&truths), &truths)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    manifest.write(out, perf.to_csv_string().as_bytes())?;
    manifest.finish(&manifest_beside(out))?;
    Ok(())
}

pub fn describe(source: &ScenarioSource, reps: usize, out: Option<&Path>) -> Result<(), CliError> {
    if reps == 0 {
        return Err(CliError::Validation("--reps must be at least 1".into()));
    }
    let r = resolve(source)?;
    let d = describe_datasets(&r.scenario, reps, r.seed)
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    println!("{}", d.render());
    if let Some(path) = out {
        let mut csv = String::from("statistic,median,q1,q3\n");
        for (name, q) in [
            ("rows", d.rows),
            ("measurements", d.measurements),
            ("gap_time", d.gaps),
        ] {
            let _ = writeln!(csv, "{name},{},{},{}", q.median, q.q1, q.q3);
        }
        let mut manifest = manifest_for("describe", &r);
        manifest.write(path, csv.as_bytes())?;
        manifest.finish(&manifest_beside(path))?;
    }
    Ok(())
}

pub fn diagnose(
    panel: &Path,
    covariate: &str,
    permutations: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let covariate: DiagnosticCovariate = covariate.parse().map_err(CliError::Validation)?;
    let mut manifest = Manifest::new("diagnose");
    manifest.master_seed = Some(seed);
    manifest.seed_source = Some("flag");
    let panel = load_panel(panel, &mut manifest)?;
    let opts = DiagnoseOptions {
        permutations,
        seed,
        ..DiagnoseOptions::default()
    };
    let d = diagnose_informativeness(&panel, covariate, &opts)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let show = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
    println!("observed gaps: {}", d.n_gaps);
    println!(
        "spearman rho: {} (permutation p = {}, {} permutations)",
        show(d.spearman_rho),
        show(d.permutation_p),
        d.permutations
    );
    println!(
        "hazard ratio: {} (95% CI {} to {})",
        show(d.hazard_ratio),
        show(d.hr_lower),
        show(d.hr_upper)
    );
    if let Some(note) = &d.note {
        println!("note: {note}");
    }
    if let Some(path) = out {
        let mut json = serde_json::to_string_pretty(&d).expect("diagnostics serialise");
        json.push('\n');
        manifest.write(path, json.as_bytes())?;
        manifest.finish(&manifest_beside(path))?;
    }
    Ok(())
}
