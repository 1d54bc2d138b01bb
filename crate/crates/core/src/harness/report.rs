//! Report documents and their text summaries.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::certify::{CertReport, CheckResult, Witness};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub system: String,
    pub functional: Option<String>,
    /// Effective overrides, reused by replay.
    pub seed: Option<u64>,
    pub grid_step: Option<f64>,
    #[serde(flatten)]
    pub cert: CertReport,
    /// Artifacts written next to the report.
    pub files: Vec<String>,
}

impl ScenarioReport {
    /// Pretty JSON with a trailing newline; map keys are sorted, so equal
    /// reports give equal bytes.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| super::scenario::parse_error("report", &e))
    }

    pub fn check(&self, spec: usize, name: &str) -> Option<&CheckResult> {
        self.cert.checks.iter().find(|c| c.spec == spec && c.name == name)
    }
}

fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6e}")
    } else {
        format!("{v}")
    }
}

fn fmt_witness(w: &Witness) -> String {
    let mut s = format!(
        "family={} seed={} index={} t={} t0={} lhs={} rhs={}",
        w.family,
        w.seed,
        w.index,
        w.t,
        w.t0,
        fmt_num(w.lhs),
        fmt_num(w.rhs)
    );
    if let Some(d) = &w.d {
        let _ = write!(s, " d={d:?}");
    }
    s
}

/// Human-readable summary. `scenario_arg` and `report_path` fill in the
/// replay command printed under each failure with a witness.
pub fn summary_text(report: &ScenarioReport, scenario_arg: &str, report_path: &str) -> String {
    let mut s = String::new();
    let verdict = if report.cert.passed { "PASS" } else { "FAIL" };
    let _ = writeln!(
        s,
        "scenario {}: {verdict} ({} results), system {}{}",
        report.scenario,
        report.cert.checks.len(),
        report.system,
        report
            .functional
            .as_ref()
            .map(|f| format!(", functional {f}"))
            .unwrap_or_default()
    );
    for c in &report.cert.checks {
        let _ = writeln!(
            s,
            "  {} [{}] {}: samples={} worst_slack={} tolerance={}",
            if c.passed { "PASS" } else { "FAIL" },
            c.spec,
            c.name,
            c.samples,
            fmt_num(c.worst_slack),
            fmt_num(c.tolerance)
        );
        for w in &c.warnings {
            let _ = writeln!(s, "    warning: {w}");
        }
        if let Some(w) = &c.witness {
            let _ = writeln!(s, "    witness: {}", fmt_witness(w));
            let _ = writeln!(
                s,
                "    replay: rfde-lyap replay {scenario_arg} --report {report_path} --check {} --name {}",
                c.spec, c.name
            );
        }
    }
    let _ = writeln!(s, "{}", report.cert.statement);
    s
}
