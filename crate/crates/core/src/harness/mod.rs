//! Scenario runner: resolves a scenario, runs its checks, writes the report
//! and artifacts, and replays witnesses.

pub mod report;
pub mod scenario;

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::certify::{
    check_theorem_conditions, comparison_check, converse_check, dini_lemma_check, dini_oracle_check,
    dplus_decay_check, envelope_check, extinction_check, gronwall_check, periodic_reduction_check,
    random_trajectory, replay_condition, sampled_map_check, CertReport, CheckResult, SampleSpec, Witness,
};
use crate::error::{Error, Result};
use crate::functionals::Functional;

pub use report::{summary_text, ScenarioReport};
pub use scenario::{load_scenario, parse_scenario, CheckSpec, ConverseSpec, Reference, Resolved, Scenario};

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "RFDE_LYAP_THREADS";

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Scenarios shipped with the crate.
pub const BUNDLED: &[(&str, &str)] = &[
    ("example212", include_str!("../../scenarios/example212.json")),
    ("example213", include_str!("../../scenarios/example213.json")),
    ("sampled_feedback", include_str!("../../scenarios/sampled_feedback.json")),
    ("converse_scalar", include_str!("../../scenarios/converse_scalar.json")),
];

/// Loads a scenario from a path, or from the bundled set by name.
pub fn scenario_from_arg(arg: &str) -> Result<Scenario> {
    let path = Path::new(arg);
    if path.exists() {
        return load_scenario(path);
    }
    match BUNDLED.iter().find(|(n, _)| *n == arg) {
        Some((n, text)) => parse_scenario(text, &format!("{n}.json")),
        None => Err(Error::Config(format!("{arg}: no such file or bundled scenario"))),
    }
}

/// Exit code for an error: configuration problems map to 2.
pub fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parameter(_) | Error::OffGrid { .. } | Error::Missing(_) => EXIT_CONFIG,
        _ => EXIT_FAIL,
    }
}

/// Runs `f` on a pool capped by [`THREADS_ENV`] when it is set.
pub fn with_thread_limit<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
        Err(_) => Ok(f()),
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub grid_step: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: ScenarioReport,
    /// Artifact name and contents, report and summary excluded.
    pub artifacts: Vec<(String, Vec<u8>)>,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.report.cert.passed {
            EXIT_PASS
        } else {
            EXIT_FAIL
        }
    }
}

fn functional(r: &Resolved) -> Result<&Functional> {
    r.functional
        .as_ref()
        .ok_or_else(|| Error::Config("this check needs a functional".into()))
}

/// Default decay rate: `ρ(1)`, which is the constant for linear `ρ`.
fn rate_or_rho(rate: Option<f64>, v: &Functional) -> Result<f64> {
    match rate {
        Some(r) => Ok(r),
        None => v
            .bounds()
            .rho
            .as_ref()
            .map(|rho| rho(1.0))
            .ok_or_else(|| Error::Config(format!("give a rate; functional {} has no ρ", v.name()))),
    }
}

/// Runs one check; artifacts are returned as `(file name, bytes)`.
pub fn run_check(r: &Resolved, index: usize, spec: &CheckSpec) -> Result<(Vec<CheckResult>, Vec<(String, Vec<u8>)>)> {
    let sys = &r.system;
    let mut artifacts = Vec::new();
    let results = match spec {
        CheckSpec::Conditions { form, sample } => check_theorem_conditions(sys, functional(r)?, *form, sample)?,
        CheckSpec::Envelope { spec, decay } => {
            let (c, env) = envelope_check(sys, spec, *decay)?;
            let mut buf = Vec::new();
            env.write_csv(&mut buf, spec.csv_stride)?;
            artifacts.push((format!("envelope_{index}.csv"), buf));
            vec![c]
        }
        CheckSpec::DplusDecay {
            sample,
            trajectories,
            horizon,
            rate,
            from,
            stride,
        } => {
            let v = functional(r)?;
            let rate = rate_or_rho(*rate, v)?;
            let from = from.unwrap_or(sys.delay_span());
            vec![dplus_decay_check(sys, v, sample, *trajectories, *horizon, rate, from, *stride)?]
        }
        CheckSpec::DiniLemma {
            sample,
            samples,
            horizon,
        } => vec![dini_lemma_check(sys, functional(r)?, sample, *samples, *horizon)?],
        CheckSpec::DiniOracle { sample, samples } => vec![dini_oracle_check(sys, functional(r)?, sample, *samples)?],
        CheckSpec::Comparison {
            sample,
            trajectories,
            horizon,
            rate,
            injected,
        } => {
            let v = functional(r)?;
            let rate = rate_or_rho(*rate, v)?;
            vec![comparison_check(sys, v, sample, *trajectories, *horizon, rate, *injected)?]
        }
        CheckSpec::Gronwall {
            sample,
            pairs,
            horizon,
            rel,
        } => vec![gronwall_check(sys, sample, *pairs, *horizon, *rel)?],
        CheckSpec::Extinction {
            sample,
            component,
            after,
            horizon,
            tol,
        } => vec![extinction_check(sys, sample, *component, *after, *horizon, *tol)?],
        CheckSpec::PeriodicReduction {
            sample,
            ks,
            offset,
            horizon,
            tol,
        } => vec![periodic_reduction_check(sys, sample, ks, *offset, *horizon, *tol)?],
        CheckSpec::SampledMap { sample, periods, tol } => vec![sampled_map_check(sys, sample, *periods, *tol)?],
        CheckSpec::Converse {
            sample,
            states,
            decay_oracle,
            decrease_tol,
            converse,
        } => converse_check(sys, converse.config(), sample, *states, *decay_oracle, *decrease_tol)?,
    };
    let results = results
        .into_iter()
        .map(|mut c| {
            c.spec = index;
            c
        })
        .collect();
    Ok((results, artifacts))
}

/// Runs every check of an already overridden scenario. Configuration errors
/// abort the run; any other error fails its check.
pub fn run_resolved(r: &Resolved) -> Result<RunOutcome> {
    let sc = &r.scenario;
    let mut checks = Vec::new();
    let mut artifacts = Vec::new();
    for (i, spec) in sc.checks.iter().enumerate() {
        match run_check(r, i, spec) {
            Ok((c, a)) => {
                checks.extend(c);
                artifacts.extend(a);
            }
            Err(e) if exit_code_for(&e) == EXIT_CONFIG => {
                return Err(Error::Config(format!("check {i} ({}): {e}", spec.kind())))
            }
            Err(e) => {
                let mut c = CheckResult::new(spec.kind(), 0.0);
                c.spec = i;
                c.fail(e.to_string());
                checks.push(c);
            }
        }
    }
    if sc.trajectories > 0 {
        let spec = SampleSpec {
            seed: sc.seed.unwrap_or(SampleSpec::default().seed),
            grid_step: sc.grid_step,
            ..SampleSpec::default()
        };
        let dumps: Vec<(String, Vec<u8>)> = (0..sc.trajectories as u64)
            .into_par_iter()
            .map(|k| {
                let (traj, ..) = random_trajectory(&r.system, &spec, sc.trajectory_horizon, k)?;
                let mut buf = Vec::new();
                traj.write_csv(&mut buf)?;
                Ok((format!("trajectory_{k}.csv"), buf))
            })
            .collect::<Result<_>>()?;
        artifacts.extend(dumps);
    }
    let report = ScenarioReport {
        scenario: sc.name.clone(),
        system: r.system.name().to_string(),
        functional: r.functional.as_ref().map(|f| f.name().to_string()),
        seed: sc.seed,
        grid_step: sc.grid_step,
        cert: CertReport::new(checks),
        files: artifacts.iter().map(|(n, _)| n.clone()).collect(),
    };
    Ok(RunOutcome { report, artifacts })
}

/// Applies overrides, resolves and runs.
pub fn run_scenario(sc: &Scenario, opts: &RunOptions) -> Result<RunOutcome> {
    let sc = sc.clone().with_overrides(opts.seed, opts.grid_step);
    let r = sc.resolve()?;
    with_thread_limit(|| run_resolved(&r))?
}

/// Writes `report.json`, `summary.txt` and the artifacts into `dir`.
/// Returns the summary text.
pub fn write_outputs(outcome: &RunOutcome, dir: &Path, scenario_arg: &str) -> Result<String> {
    std::fs::create_dir_all(dir)?;
    let report_path = dir.join("report.json");
    std::fs::write(&report_path, outcome.report.to_json()?)?;
    for (name, bytes) in &outcome.artifacts {
        std::fs::write(dir.join(name), bytes)?;
    }
    let summary = summary_text(&outcome.report, scenario_arg, &report_path.display().to_string());
    std::fs::write(dir.join("summary.txt"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayOutcome {
    pub recorded: Witness,
    pub lhs: f64,
    pub rhs: f64,
}

impl ReplayOutcome {
    /// Bitwise agreement with the recorded witness.
    pub fn identical(&self) -> bool {
        self.lhs.to_bits() == self.recorded.lhs.to_bits() && self.rhs.to_bits() == self.recorded.rhs.to_bits()
    }
}

/// Re-evaluates the witness of result `name` from scenario check `spec`.
/// Inequality-suite witnesses are re-evaluated alone; other checks are
/// rerun in full.
pub fn replay(sc: &Scenario, report: &ScenarioReport, spec: usize, name: &str) -> Result<ReplayOutcome> {
    let recorded = report
        .check(spec, name)
        .ok_or_else(|| Error::Config(format!("report has no result {name} for check {spec}")))?
        .witness
        .clone()
        .ok_or_else(|| Error::Config(format!("result {name} of check {spec} has no witness")))?;
    let sc = sc.clone().with_overrides(report.seed, report.grid_step);
    let r = sc.resolve()?;
    let check = sc
        .checks
        .get(spec)
        .ok_or_else(|| Error::Config(format!("scenario has no check {spec}")))?;
    with_thread_limit(|| -> Result<ReplayOutcome> {
        let (lhs, rhs) = match check {
            CheckSpec::Conditions { form, sample } => {
                replay_condition(&r.system, functional(&r)?, *form, sample, name, &recorded)?
            }
            other => {
                let (results, _) = run_check(&r, spec, other)?;
                let w = results
                    .into_iter()
                    .find(|c| c.name == name)
                    .and_then(|c| c.witness)
                    .ok_or_else(|| Error::Config(format!("rerun of check {spec} produced no witness for {name}")))?;
                (w.lhs, w.rhs)
            }
        };
        Ok(ReplayOutcome { recorded, lhs, rhs })
    })?
}
