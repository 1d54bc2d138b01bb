//! Sampling-based certification: reachable states, empirical decay
//! envelopes, Lyapunov-condition suites and trajectory-level checks.
//!
//! Every check is a falsification attempt over a reported sample. A pass
//! means no violation was found. Samples are generated from `(seed, index)`
//! so any witness can be regenerated and re-evaluated bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::comparison::{check_dominated, DominationMode};
use crate::converse::{Converse, ConverseConfig};
use crate::dini::{dplus_along, estimate_v0, v0_along, Aggregate};
use crate::error::{Error, Result};
use crate::functionals::Functional;
use crate::history::{grid_multiple, random_fourier_history, simpson, HistorySegment};
use crate::integrator::{continuity_gap, integrate, IntegratorConfig, Status, Trajectory};
use crate::signals::{make_signal, random_switch_times, DisturbanceSignal, SignalKind, SignalSpec};
use crate::system::RfdeSystem;

pub const REPORT_VERSION: u32 = 1;
pub const STATEMENT: &str = "pass means no violation was found on the reported sample";

/// Streams separating the sample families drawn from one seed.
mod stream {
    pub const STATE: u64 = 1;
    pub const REACHABLE: u64 = 2;
    pub const PAIR: u64 = 3;
    pub const TRAJECTORY: u64 = 4;
    pub const ENVELOPE: u64 = 5;
    pub const DIRECTION: u64 = 6;
}

/// Deterministic generator for sample `index` of a family.
pub fn sample_rng(seed: u64, family: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((family << 40) | index);
    rng
}

/// Sampling configuration shared by the checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSpec {
    pub histories: usize,
    /// Random signals per history where a check uses several.
    pub signals: usize,
    pub t0s: Vec<f64>,
    pub max_norm: f64,
    pub modes: usize,
    pub max_switches: usize,
    /// Random interior disturbance values added to the box vertices.
    pub extra_d: usize,
    pub seed: u64,
    pub rel_tol: f64,
    pub residual_tol: f64,
    pub lipschitz_pairs: usize,
    pub grid_step: Option<f64>,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self {
            histories: 200,
            signals: 8,
            t0s: vec![0.0, 0.5, 1.0, 1.5, 2.0],
            max_norm: 2.0,
            modes: 3,
            max_switches: 3,
            extra_d: 0,
            seed: 1,
            rel_tol: 1e-3,
            residual_tol: 1e-6,
            lipschitz_pairs: 200,
            grid_step: None,
        }
    }
}

impl SampleSpec {
    pub fn integrator(&self) -> IntegratorConfig {
        match self.grid_step {
            Some(g) => IntegratorConfig::with_grid_step(g),
            None => IntegratorConfig::default(),
        }
    }
}

/// Floats that may be non-finite: written as numbers when finite, else as
/// the strings `"inf"`, `"-inf"`, `"nan"`.
pub mod float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                _ => Err(serde::de::Error::custom(format!("not a number: {s}"))),
            },
        }
    }
}

/// Replayable description of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub family: String,
    pub seed: u64,
    pub index: u64,
    pub t: f64,
    pub t0: f64,
    #[serde(default)]
    pub d: Option<Vec<f64>>,
    #[serde(default)]
    pub signal: Option<SignalSpec>,
    #[serde(with = "float")]
    pub lhs: f64,
    #[serde(with = "float")]
    pub rhs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    /// Index of the scenario check that produced this result.
    pub spec: usize,
    pub passed: bool,
    pub samples: usize,
    #[serde(with = "float")]
    pub tolerance: f64,
    /// Largest `lhs - rhs`.
    #[serde(with = "float")]
    pub worst_slack: f64,
    /// Largest `lhs - rhs - band`; positive means a violation.
    #[serde(with = "float")]
    pub worst_margin: f64,
    pub witness: Option<Witness>,
    pub warnings: Vec<String>,
    pub data: Map<String, Value>,
}

impl CheckResult {
    pub fn new(name: impl Into<String>, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            spec: 0,
            passed: true,
            samples: 0,
            tolerance,
            worst_slack: f64::NEG_INFINITY,
            worst_margin: f64::NEG_INFINITY,
            witness: None,
            warnings: Vec::new(),
            data: Map::new(),
        }
    }

    /// Records `lhs <= rhs + band`.
    pub fn push(&mut self, lhs: f64, rhs: f64, band: f64, witness: impl FnOnce() -> Witness) {
        self.samples += 1;
        let slack = lhs - rhs;
        let margin = if slack.is_nan() { f64::INFINITY } else { slack - band };
        if slack > self.worst_slack || slack.is_nan() {
            self.worst_slack = if slack.is_nan() { f64::INFINITY } else { slack };
        }
        if margin > 0.0 {
            self.passed = false;
            if margin > self.worst_margin {
                let mut w = witness();
                w.lhs = lhs;
                w.rhs = rhs;
                self.witness = Some(w);
            }
        }
        self.worst_margin = self.worst_margin.max(margin);
    }

    /// Relative band `tol·(1 + |lhs| + |rhs|)`.
    pub fn push_rel(&mut self, lhs: f64, rhs: f64, witness: impl FnOnce() -> Witness) {
        let band = self.tolerance * (1.0 + lhs.abs() + rhs.abs());
        self.push(lhs, rhs, band, witness);
    }

    pub fn fail(&mut self, msg: impl Into<String>) {
        self.passed = false;
        self.warnings.push(msg.into());
    }

    pub fn with_data(mut self, key: &str, v: impl Serialize) -> Self {
        self.data.insert(key.to_string(), serde_json::to_value(v).unwrap_or(Value::Null));
        self
    }

    pub fn set_data(&mut self, key: &str, v: impl Serialize) {
        self.data.insert(key.to_string(), serde_json::to_value(v).unwrap_or(Value::Null));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertReport {
    pub version: u32,
    pub statement: String,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl CertReport {
    pub fn new(checks: Vec<CheckResult>) -> Self {
        Self {
            version: REPORT_VERSION,
            statement: STATEMENT.into(),
            passed: checks.iter().all(|c| c.passed),
            checks,
        }
    }
}

fn witness(family: &str, seed: u64, index: u64, t: f64, t0: f64) -> Witness {
    Witness {
        family: family.into(),
        seed,
        index,
        t,
        t0,
        d: None,
        signal: None,
        lhs: 0.0,
        rhs: 0.0,
    }
}

/// Random bang-bang signal in relative time as a replayable spec.
fn random_signal_spec<R: Rng>(
    sys: &RfdeSystem,
    rng: &mut R,
    horizon: f64,
    grid_step: f64,
    max_switches: usize,
) -> Result<SignalSpec> {
    let bx = sys.disturbance_box().clone();
    if bx.dim() == 0 {
        return Ok(SignalSpec {
            kind: SignalKind::Constant,
            bx,
            switch_times: Vec::new(),
            values: None,
            center: None,
            amplitude: None,
            omega: None,
            phase: None,
        });
    }
    let k = rng.gen_range(0..=max_switches);
    let switch_times = random_switch_times(rng, horizon, grid_step, k);
    let values = (0..=switch_times.len())
        .map(|_| bx.sample_vertex(rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(SignalSpec {
        kind: SignalKind::PiecewiseConstant,
        bx,
        switch_times,
        values: Some(values),
        center: None,
        amplitude: None,
        omega: None,
        phase: None,
    })
}

/// Constant signals at every box vertex (or the empty signal).
pub fn vertex_signals(sys: &RfdeSystem) -> Result<Vec<DisturbanceSignal>> {
    let bx = sys.disturbance_box();
    if bx.dim() == 0 {
        return Ok(vec![DisturbanceSignal::none()]);
    }
    bx.vertices()?
        .into_iter()
        .map(|v| DisturbanceSignal::constant(bx.clone(), v).map(|s| s.with_label("vertex")))
        .collect()
}

/// Box vertices plus `extra` random interior points.
fn disturbance_values<R: Rng>(sys: &RfdeSystem, rng: &mut R, extra: usize) -> Result<Vec<Vec<f64>>> {
    let bx = sys.disturbance_box();
    let mut out = bx.vertices()?;
    if bx.dim() > 0 {
        for _ in 0..extra {
            out.push(bx.sample(rng)?);
        }
    }
    Ok(out)
}

/// Random state `index`: a Fourier history of the given span with norm in
/// `(0, max_norm]`, and its evaluation time from `spec.t0s`.
pub fn random_state(
    sys: &RfdeSystem,
    spec: &SampleSpec,
    span: f64,
    index: u64,
) -> Result<(f64, HistorySegment)> {
    let mut rng = sample_rng(spec.seed, stream::STATE, index);
    let g = spec.integrator().resolve_grid(sys.delay_span());
    let norm = spec.max_norm * (1.0 - rng.gen::<f64>());
    let x = random_fourier_history(&mut rng, span, g, sys.state_dim(), spec.modes, norm)?;
    let t = spec.t0s[index as usize % spec.t0s.len()];
    Ok((t, x))
}

/// A member of `S(t)`: the `(r + τ)`-window at `t` of a solution started at
/// `t - τ`.
#[derive(Clone, Debug)]
pub struct SState {
    pub index: u64,
    pub t: f64,
    pub segment: HistorySegment,
    pub signal: SignalSpec,
    pub x0_norm: f64,
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub struct SStates {
    pub states: Vec<SState>,
    pub discarded: usize,
    pub warnings: Vec<String>,
}

/// Regenerates reachable state `index` at time `t`. `None` when the
/// trajectory blows up.
pub fn s_state(sys: &RfdeSystem, t: f64, tau: f64, spec: &SampleSpec, index: u64) -> Result<Option<SState>> {
    let cfg = spec.integrator();
    let r = sys.delay_span();
    let g = cfg.resolve_grid(r);
    let mut rng = sample_rng(spec.seed, stream::REACHABLE, index);
    let norm = spec.max_norm * (1.0 - rng.gen::<f64>());
    let x0 = random_fourier_history(&mut rng, r, g, sys.state_dim(), spec.modes, norm)?;
    let signal = random_signal_spec(sys, &mut rng, tau.max(g), g, spec.max_switches)?;
    let t0 = t - tau;
    let d = make_signal(&signal)?.delayed(t0);
    let segment = if tau == 0.0 {
        x0.clone()
    } else {
        let traj = integrate(sys, t0, &x0, &d, t, &cfg)?;
        if !traj.is_completed() {
            return Ok(None);
        }
        let res = traj.integral_residual(sys, &d, t0, t)?;
        let segment = traj.window(t, r + tau)?;
        return Ok(Some(SState {
            index,
            t,
            segment,
            signal,
            x0_norm: x0.sup_norm(),
            residual: res,
        }));
    };
    Ok(Some(SState {
        index,
        t,
        segment,
        signal,
        x0_norm: x0.sup_norm(),
        residual: 0.0,
    }))
}

/// `spec.histories` reachable states at time `t`; states whose integral
/// residual exceeds `spec.residual_tol` are discarded with a warning.
pub fn generate_s_states(sys: &RfdeSystem, t: f64, tau: f64, spec: &SampleSpec) -> Result<SStates> {
    if !(t >= tau) || !(tau >= 0.0) {
        return Err(Error::Parameter(format!("need t >= τ >= 0, got t = {t}, τ = {tau}")));
    }
    let raw: Vec<Option<SState>> = (0..spec.histories as u64)
        .into_par_iter()
        .map(|i| s_state(sys, t, tau, spec, i))
        .collect::<Result<_>>()?;
    let mut out = SStates {
        states: Vec::new(),
        discarded: 0,
        warnings: Vec::new(),
    };
    for (i, s) in raw.into_iter().enumerate() {
        match s {
            None => {
                out.discarded += 1;
                out.warnings.push(format!("sample {i} blew up and was discarded"));
            }
            Some(s) if s.residual > spec.residual_tol => {
                out.discarded += 1;
                out.warnings.push(format!(
                    "sample {i} failed the membership residual test ({:e})",
                    s.residual
                ));
            }
            Some(s) => out.states.push(s),
        }
    }
    Ok(out)
}

/// Batch for [`empirical_envelope`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvelopeSpec {
    pub norms: Vec<f64>,
    pub histories: usize,
    /// Random signals per history, on top of the constant vertex signals.
    pub signals: usize,
    pub t0s: Vec<f64>,
    pub horizon: f64,
    pub max_switches: usize,
    pub modes: usize,
    pub seed: u64,
    pub grid_step: Option<f64>,
    /// Column stride of the CSV output.
    pub csv_stride: usize,
}

impl Default for EnvelopeSpec {
    fn default() -> Self {
        Self {
            norms: vec![1e-3, 0.01, 0.5, 1.0, 2.0],
            histories: 8,
            signals: 4,
            t0s: vec![0.0],
            horizon: 10.0,
            max_switches: 3,
            modes: 3,
            seed: 1,
            grid_step: None,
            csv_stride: 10,
        }
    }
}

/// `m(s, t)`: the largest `‖T_r(t₀ + t)x‖` over the batch with `‖x₀‖ <= s`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KLEnvelope {
    pub norms: Vec<f64>,
    pub grid_step: f64,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub t0s: Vec<f64>,
    pub runs: usize,
    pub seed: u64,
    pub blowups: Vec<Witness>,
}

impl KLEnvelope {
    /// First grid time after which row `i` stays at or below `eps`.
    pub fn decay_time(&self, i: usize, eps: f64) -> Option<f64> {
        let row = &self.values[i];
        let last_above = row.iter().rposition(|&v| v > eps);
        match last_above {
            None => Some(0.0),
            Some(k) if k + 1 < row.len() => Some(self.times[k + 1]),
            Some(_) => None,
        }
    }

    /// Largest `sup_t m(s, t) / s` over the rows (bounded overshoot).
    pub fn overshoot(&self) -> f64 {
        self.norms
            .iter()
            .zip(&self.values)
            .filter(|(s, _)| **s > 0.0)
            .map(|(s, row)| row.iter().copied().fold(0.0, f64::max) / s)
            .fold(0.0, f64::max)
    }

    /// For each `eps`: the largest row norm `s` with `sup_t m(s, t) <= eps`.
    pub fn delta_table(&self, eps: &[f64]) -> Vec<(f64, Option<f64>)> {
        eps.iter()
            .map(|&e| {
                let s = self
                    .norms
                    .iter()
                    .zip(&self.values)
                    .filter(|(_, row)| row.iter().all(|&v| v <= e))
                    .map(|(s, _)| *s)
                    .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))));
                (e, s)
            })
            .collect()
    }

    /// For each `eps` and row: [`Self::decay_time`].
    pub fn tau_table(&self, eps: &[f64]) -> Vec<(f64, Vec<Option<f64>>)> {
        eps.iter()
            .map(|&e| (e, (0..self.norms.len()).map(|i| self.decay_time(i, e)).collect()))
            .collect()
    }

    /// Rows `s`, columns `t` (every `stride`-th grid time).
    pub fn write_csv<W: std::io::Write>(&self, w: W, stride: usize) -> Result<()> {
        let stride = stride.max(1);
        let mut wr = csv::Writer::from_writer(w);
        let cols: Vec<usize> = (0..self.times.len()).step_by(stride).collect();
        let mut header = vec!["s".to_string()];
        header.extend(cols.iter().map(|&k| crate::history::fmt_f64(self.times[k])));
        wr.write_record(&header)?;
        for (s, row) in self.norms.iter().zip(&self.values) {
            let mut rec = vec![crate::history::fmt_f64(*s)];
            rec.extend(cols.iter().map(|&k| crate::history::fmt_f64(row[k])));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Simulates the batch and records the envelope. Blow-ups are kept as
/// witnesses; their runs are excluded from the rows.
pub fn empirical_envelope(sys: &RfdeSystem, spec: &EnvelopeSpec) -> Result<KLEnvelope> {
    if spec.norms.is_empty() || spec.t0s.is_empty() || !(spec.horizon > 0.0) {
        return Err(Error::Config("envelope needs norms, t0s and a positive horizon".into()));
    }
    let cfg = match spec.grid_step {
        Some(g) => IntegratorConfig::with_grid_step(g),
        None => IntegratorConfig::default(),
    };
    let r = sys.delay_span();
    let g = cfg.resolve_grid(r);
    let steps = (spec.horizon / g).round() as usize;
    let vertices = vertex_signals(sys)?;
    let per_history = vertices.len() + spec.signals;
    let mut jobs = Vec::new();
    for (ni, _) in spec.norms.iter().enumerate() {
        for (ti, _) in spec.t0s.iter().enumerate() {
            for h in 0..spec.histories {
                for k in 0..per_history {
                    jobs.push((ni, ti, h, k));
                }
            }
        }
    }
    type Run = (usize, std::result::Result<Vec<f64>, Witness>);
    let runs: Vec<Run> = jobs
        .par_iter()
        .map(|&(ni, ti, h, k)| -> Result<Run> {
            let index = (((ni * spec.t0s.len() + ti) * spec.histories + h) * per_history + k) as u64;
            let hist_index = ((ni * spec.t0s.len() + ti) * spec.histories + h) as u64;
            let mut hrng = sample_rng(spec.seed, stream::ENVELOPE, hist_index);
            let x0 = random_fourier_history(&mut hrng, r, g, sys.state_dim(), spec.modes, spec.norms[ni])?;
            let t0 = (spec.t0s[ti] / g).round() * g;
            let (d, sig) = if k < vertices.len() {
                (vertices[k].clone(), None)
            } else {
                let mut srng = sample_rng(spec.seed, stream::TRAJECTORY, index);
                let s = random_signal_spec(sys, &mut srng, spec.horizon, g, spec.max_switches)?;
                (make_signal(&s)?.delayed(t0), Some(s))
            };
            let traj = integrate(sys, t0, &x0, &d, t0 + spec.horizon, &cfg)?;
            if let Status::BlowUp { t_max } = traj.status() {
                let mut w = witness("envelope", spec.seed, index, t_max, t0);
                w.signal = sig;
                w.lhs = f64::INFINITY;
                return Ok((ni, Err(w)));
            }
            let mut norms = traj.window_norms(r)?;
            norms.truncate(steps + 1);
            Ok((ni, Ok(norms)))
        })
        .collect::<Result<_>>()?;
    let mut per_norm = vec![vec![0.0; steps + 1]; spec.norms.len()];
    let mut blowups = Vec::new();
    for (ni, run) in runs {
        match run {
            Ok(n) => {
                for (a, b) in per_norm[ni].iter_mut().zip(&n) {
                    *a = f64::max(*a, *b);
                }
            }
            Err(w) => blowups.push(w),
        }
    }
    // cumulative over s: m(s, t) uses every start with ‖x₀‖ <= s
    let mut order: Vec<usize> = (0..spec.norms.len()).collect();
    order.sort_by(|&a, &b| spec.norms[a].total_cmp(&spec.norms[b]));
    let mut values = per_norm.clone();
    for w in 1..order.len() {
        let (prev, cur) = (order[w - 1], order[w]);
        for k in 0..=steps {
            values[cur][k] = values[cur][k].max(values[prev][k]);
        }
    }
    Ok(KLEnvelope {
        norms: spec.norms.clone(),
        grid_step: g,
        times: (0..=steps).map(|k| k as f64 * g).collect(),
        values,
        t0s: spec.t0s.clone(),
        runs: jobs.len(),
        seed: spec.seed,
        blowups,
    })
}

/// Envelope checks: no blow-up, and every row falls below `decay·s`.
pub fn envelope_check(sys: &RfdeSystem, spec: &EnvelopeSpec, decay: f64) -> Result<(CheckResult, KLEnvelope)> {
    let env = empirical_envelope(sys, spec)?;
    let mut c = CheckResult::new("envelope", decay);
    if let Some(w) = env.blowups.first() {
        c.passed = false;
        c.witness = Some(w.clone());
        c.warnings.push(format!("{} runs blew up", env.blowups.len()));
    }
    let mut taus = Vec::new();
    for (i, &s) in env.norms.iter().enumerate() {
        let tau = env.decay_time(i, decay * s);
        c.samples += 1;
        if tau.is_none() {
            c.fail(format!("row s = {s} does not fall below {decay}·s within the horizon"));
        }
        taus.push(tau);
    }
    c.worst_slack = env
        .norms
        .iter()
        .zip(&env.values)
        .map(|(s, row)| row.last().copied().unwrap_or(0.0) - decay * s)
        .fold(f64::NEG_INFINITY, f64::max);
    c.worst_margin = c.worst_slack;
    c.set_data("tau", &taus);
    c.set_data("overshoot", env.overshoot());
    c.set_data("runs", env.runs);
    c.set_data("delta", env.delta_table(&[1e-3, 1e-2, 1e-1]));
    Ok((c, env))
}

/// Theorem forms: full-history lower bound with decrease everywhere, or
/// point-value lower bound with decrease on reachable states; each in a
/// time-varying and a uniform version.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Form {
    FullDecay,
    UniformFullDecay,
    ReachableDecay,
    UniformReachableDecay,
}

impl Form {
    pub fn uniform(self) -> bool {
        matches!(self, Form::UniformFullDecay | Form::UniformReachableDecay)
    }

    pub fn reachable(self) -> bool {
        matches!(self, Form::ReachableDecay | Form::UniformReachableDecay)
    }
}

/// `V⁰(t, x; f(t, T_r(0)x, d))`, closed form when available.
pub fn v0_at(sys: &RfdeSystem, v: &Functional, t: f64, x: &HistorySegment, d: &[f64]) -> Result<f64> {
    let xr = x.tail(sys.delay_span())?;
    let dir = sys.eval_rhs(t, &xr, d)?;
    match v.derivative(t, x, &dir)? {
        Some(val) => Ok(val),
        None => Ok(estimate_v0(v, t, x, &dir, Aggregate::TailMax)?.value),
    }
}

fn need<T: Clone>(v: &Option<T>, what: &str, name: &str) -> Result<T> {
    v.clone()
        .ok_or_else(|| Error::Config(format!("functional {name} lacks the bound {what} required by this form")))
}

/// `∫₀ᵗ b`.
fn integral_of(b: &dyn Fn(f64) -> f64, t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let n = 256;
    let vals: Vec<f64> = (0..=n).map(|k| b(t * k as f64 / n as f64)).collect();
    simpson(&vals, t / n as f64)
}

/// Per-sample evaluation of one inequality: `(lhs, rhs)` pairs.
type Pairs = Vec<(f64, f64, Option<Vec<f64>>)>;

/// Runs the inequality suite of `form` for `v` on `sys`.
pub fn check_theorem_conditions(
    sys: &RfdeSystem,
    v: &Functional,
    form: Form,
    spec: &SampleSpec,
) -> Result<Vec<CheckResult>> {
    let b = v.bounds().clone();
    let name = v.name().to_string();
    let a1 = need(&b.a1, "a1", &name)?;
    let a2 = need(&b.a2, "a2", &name)?;
    let beta: crate::system::ScalarFn = if form.uniform() {
        std::sync::Arc::new(|_| 1.0)
    } else {
        need(&b.beta, "beta", &name)?
    };
    if spec.t0s.is_empty() || spec.histories == 0 {
        return Err(Error::Config("sample spec needs t0s and histories".into()));
    }
    let r = sys.delay_span();
    let span = v.window_span();
    let tau = v.tau();
    if (span - (r + tau)).abs() > 1e-9 * span.max(1.0) {
        return Err(Error::Config(format!(
            "functional window {span} differs from r + τ = {}",
            r + tau
        )));
    }
    let tol = spec.rel_tol;
    let seed = spec.seed;
    let mut out = Vec::new();

    // random states: sandwich and decrease or growth
    let states: Vec<(f64, HistorySegment, Vec<Vec<f64>>)> = (0..spec.histories as u64)
        .into_par_iter()
        .map(|i| {
            let (t, x) = random_state(sys, spec, span, i)?;
            let mut rng = sample_rng(seed, stream::DIRECTION, i);
            Ok((t, x, disturbance_values(sys, &mut rng, spec.extra_d)?))
        })
        .collect::<Result<_>>()?;
    let values: Vec<f64> = states
        .par_iter()
        .map(|(t, x, _)| v.eval(*t, x))
        .collect::<Result<_>>()?;

    let mut lower = CheckResult::new("sandwich_lower", tol);
    let mut upper = CheckResult::new("sandwich_upper", tol);
    for (i, ((t, x, _), val)) in states.iter().zip(&values).enumerate() {
        let low_arg = if form.reachable() { crate::history::norm(x.current()) } else { x.sup_norm() };
        let w = || witness("state", seed, i as u64, *t, *t);
        lower.push_rel(a1(low_arg), *val, w);
        upper.push_rel(*val, a2(beta(*t) * x.sup_norm()), w);
    }
    out.push(lower);
    out.push(upper);

    let derivs: Vec<Pairs> = states
        .par_iter()
        .zip(&values)
        .map(|((t, x, ds), val)| -> Result<Pairs> {
            let mut row = Vec::new();
            for d in ds {
                let lhs = v0_at(sys, v, *t, x, d)?;
                let rhs = match form {
                    Form::FullDecay | Form::UniformFullDecay => -val,
                    Form::ReachableDecay => {
                        let g2 = need(&b.growth, "beta2", &name)?;
                        let b3 = b.beta3.clone().unwrap_or_else(|| std::sync::Arc::new(|_| 0.0));
                        g2(*t) * val + b.r_const * b3(*t)
                    }
                    Form::UniformReachableDecay => {
                        let g = need(&b.growth, "beta", &name)?;
                        g(*t) * val
                    }
                };
                row.push((lhs, rhs, Some(d.clone())));
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let mut c = CheckResult::new(if form.reachable() { "growth" } else { "decrease" }, tol);
    for (i, row) in derivs.iter().enumerate() {
        for (lhs, rhs, d) in row {
            c.push_rel(*lhs, *rhs, || {
                let mut w = witness("state", seed, i as u64, states[i].0, states[i].0);
                w.d = d.clone();
                w
            });
        }
    }
    out.push(c);

    if !form.reachable() {
        out.push(lipschitz_check(sys, v, spec)?);
    } else {
        out.extend(reachable_decrease(sys, v, form, spec)?);
    }
    Ok(out)
}

/// `|V(t, y) - V(t, x)| <= M(R)‖y - x‖` on pairs within radius `R`, `t <= R`.
fn lipschitz_check(sys: &RfdeSystem, v: &Functional, spec: &SampleSpec) -> Result<CheckResult> {
    let m = need(&v.bounds().lipschitz, "lipschitz modulus M(R)", v.name())?;
    let span = v.window_span();
    let g = spec.integrator().resolve_grid(sys.delay_span());
    let dim = sys.state_dim();
    let rows: Vec<(f64, f64, f64)> = (0..spec.lipschitz_pairs as u64)
        .into_par_iter()
        .map(|i| -> Result<(f64, f64, f64)> {
            let mut rng = sample_rng(spec.seed, stream::PAIR, i);
            let big_r = spec.max_norm * (1.0 - rng.gen::<f64>()).max(0.05);
            let t = big_r * rng.gen::<f64>();
            let nx = big_r * (1.0 - rng.gen::<f64>());
            let x = random_fourier_history(&mut rng, span, g, dim, spec.modes, nx)?;
            let ny = big_r * (1.0 - rng.gen::<f64>());
            let y = if i % 2 == 0 {
                random_fourier_history(&mut rng, span, g, dim, spec.modes, ny)?
            } else {
                x.scaled(rng.gen_range(0.9..1.0))
            };
            let lhs = (v.eval(t, &y)? - v.eval(t, &x)?).abs();
            let rhs = m(big_r) * y.sub(&x)?.sup_norm();
            Ok((t, lhs, rhs))
        })
        .collect::<Result<_>>()?;
    let mut c = CheckResult::new("lipschitz", spec.rel_tol);
    for (i, (t, lhs, rhs)) in rows.into_iter().enumerate() {
        c.push_rel(lhs, rhs, || witness("pair", spec.seed, i as u64, t, t));
    }
    Ok(c)
}

/// Decrease on reachable states at times `τ + t0s`.
fn reachable_decrease(sys: &RfdeSystem, v: &Functional, form: Form, spec: &SampleSpec) -> Result<Vec<CheckResult>> {
    let b = v.bounds().clone();
    let name = v.name().to_string();
    let rho = need(&b.rho, "rho", &name)?;
    let (b4, mu): (crate::system::ScalarFn, crate::system::ScalarFn) = if form.uniform() {
        (std::sync::Arc::new(|_| 1.0), std::sync::Arc::new(|_| 0.0))
    } else {
        (need(&b.beta4, "beta4", &name)?, b.mu.clone().unwrap_or_else(|| std::sync::Arc::new(|_| 0.0)))
    };
    let tau = v.tau();
    let ds = sys.disturbance_box().vertices()?;
    type Row = (SState, Vec<(f64, f64)>);
    let rows: Vec<Option<Row>> = (0..spec.histories as u64)
        .into_par_iter()
        .map(|i| -> Result<Option<Row>> {
            let t = tau + spec.t0s[i as usize % spec.t0s.len()];
            let Some(s) = s_state(sys, t, tau, spec, i)? else {
                return Ok(None);
            };
            if s.residual > spec.residual_tol {
                return Ok(Some((s, Vec::new())));
            }
            let val = v.eval(t, &s.segment)?;
            let rhs = -b4(t) * rho(val) + b4(t) * mu(integral_of(&*b4, t));
            let pairs = ds
                .iter()
                .map(|d| Ok((v0_at(sys, v, t, &s.segment, d)?, rhs)))
                .collect::<Result<_>>()?;
            Ok(Some((s, pairs)))
        })
        .collect::<Result<_>>()?;
    let mut membership = CheckResult::new("membership", spec.residual_tol);
    let mut c = CheckResult::new("reachable_decrease", spec.rel_tol);
    for (i, row) in rows.into_iter().enumerate() {
        let Some((s, pairs)) = row else {
            membership.warnings.push(format!("sample {i} blew up and was discarded"));
            continue;
        };
        let w = |d: Option<&Vec<f64>>| {
            let mut w = witness("reachable", spec.seed, s.index, s.t, s.t - tau);
            w.signal = Some(s.signal.clone());
            w.d = d.cloned();
            w
        };
        membership.samples += 1;
        membership.worst_slack = membership.worst_slack.max(s.residual);
        if s.residual > spec.residual_tol {
            membership
                .warnings
                .push(format!("sample {i} failed the membership residual test ({:e}) and was discarded", s.residual));
            continue;
        }
        for ((lhs, rhs), d) in pairs.into_iter().zip(&ds) {
            c.push_rel(lhs, rhs, || w(Some(d)));
        }
    }
    membership.worst_margin = membership.worst_slack - spec.residual_tol;
    Ok(vec![membership, c])
}

/// Re-evaluates the inequality recorded in a witness of
/// [`check_theorem_conditions`]. Returns `(lhs, rhs)`.
pub fn replay_condition(
    sys: &RfdeSystem,
    v: &Functional,
    form: Form,
    spec: &SampleSpec,
    check: &str,
    w: &Witness,
) -> Result<(f64, f64)> {
    let b = v.bounds().clone();
    let name = v.name().to_string();
    match (check, w.family.as_str()) {
        ("sandwich_lower" | "sandwich_upper" | "decrease" | "growth", "state") => {
            let (t, x) = random_state(sys, spec, v.window_span(), w.index)?;
            let val = v.eval(t, &x)?;
            match check {
                "sandwich_lower" => {
                    let arg = if form.reachable() { crate::history::norm(x.current()) } else { x.sup_norm() };
                    Ok((need(&b.a1, "a1", &name)?(arg), val))
                }
                "sandwich_upper" => {
                    let beta = if form.uniform() { 1.0 } else { need(&b.beta, "beta", &name)?(t) };
                    Ok((val, need(&b.a2, "a2", &name)?(beta * x.sup_norm())))
                }
                _ => {
                    let d = w.d.clone().ok_or(Error::Missing("witness disturbance value"))?;
                    let lhs = v0_at(sys, v, t, &x, &d)?;
                    let rhs = match form {
                        Form::FullDecay | Form::UniformFullDecay => -val,
                        Form::ReachableDecay => {
                            let b3 = b.beta3.clone().map_or(0.0, |f| f(t));
                            need(&b.growth, "beta2", &name)?(t) * val + b.r_const * b3
                        }
                        Form::UniformReachableDecay => need(&b.growth, "beta", &name)?(t) * val,
                    };
                    Ok((lhs, rhs))
                }
            }
        }
        ("reachable_decrease" | "membership", "reachable") => {
            let mut sub = spec.clone();
            sub.seed = w.seed;
            let tau = v.tau();
            let s = s_state(sys, w.t, tau, &sub, w.index)?
                .ok_or_else(|| Error::BlowUp { t: w.t })?;
            if check == "membership" {
                return Ok((s.residual, 0.0));
            }
            let d = w.d.clone().ok_or(Error::Missing("witness disturbance value"))?;
            let val = v.eval(w.t, &s.segment)?;
            let rho = need(&b.rho, "rho", &name)?;
            let rhs = if form.uniform() {
                -rho(val)
            } else {
                let b4 = need(&b.beta4, "beta4", &name)?;
                let mu = b.mu.clone().map_or(0.0, |m| m(integral_of(&*b4, w.t)));
                -b4(w.t) * rho(val) + b4(w.t) * mu
            };
            Ok((v0_at(sys, v, w.t, &s.segment, &d)?, rhs))
        }
        _ => Err(Error::Config(format!(
            "no replay for check {check} with sample family {}",
            w.family
        ))),
    }
}

/// Trajectory sample `index`: random history, random signal, start time.
pub fn random_trajectory(
    sys: &RfdeSystem,
    spec: &SampleSpec,
    horizon: f64,
    index: u64,
) -> Result<(Trajectory, DisturbanceSignal, SignalSpec, f64)> {
    let cfg = spec.integrator();
    let r = sys.delay_span();
    let g = cfg.resolve_grid(r);
    let mut rng = sample_rng(spec.seed, stream::TRAJECTORY, index);
    let norm = spec.max_norm * (1.0 - rng.gen::<f64>());
    let x0 = random_fourier_history(&mut rng, r, g, sys.state_dim(), spec.modes, norm)?;
    let sig = random_signal_spec(sys, &mut rng, horizon, g, spec.max_switches)?;
    let t0 = (spec.t0s[index as usize % spec.t0s.len()] / g).round() * g;
    let d = make_signal(&sig)?.delayed(t0);
    let traj = integrate(sys, t0, &x0, &d, t0 + horizon, &cfg)?;
    Ok((traj, d, sig, t0))
}

/// `D⁺V <= -rate·V + tol(1 + V)` at every `stride`-th grid time from
/// `t0 + from` along random trajectories.
pub fn dplus_decay_check(
    sys: &RfdeSystem,
    v: &Functional,
    spec: &SampleSpec,
    trajectories: usize,
    horizon: f64,
    rate: f64,
    from: f64,
    stride: usize,
) -> Result<CheckResult> {
    let rows: Vec<Vec<(f64, f64, f64, f64, SignalSpec)>> = (0..trajectories as u64)
        .into_par_iter()
        .map(|i| {
            let (traj, _, sig, t0) = random_trajectory(sys, spec, horizon, i)?;
            if !traj.is_completed() {
                return Err(Error::BlowUp { t: traj.t_last() });
            }
            let g = traj.grid_step();
            let first = (from / g).round() as usize;
            let mut row = Vec::new();
            let mut m = first;
            while m < traj.steps() {
                let t = traj.time(m);
                let val = v.eval(t, &traj.window(t, v.window_span())?)?;
                let dp = dplus_along(v, &traj, t, Aggregate::TailMax)?.value;
                row.push((t, t0, dp, -rate * val + spec.rel_tol * (1.0 + val), sig.clone()));
                m += stride.max(1);
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let mut c = CheckResult::new("dplus_decay", spec.rel_tol);
    for (i, row) in rows.into_iter().enumerate() {
        for (t, t0, lhs, rhs, sig) in row {
            c.push(lhs, rhs, 0.0, || {
                let mut w = witness("trajectory", spec.seed, i as u64, t, t0);
                w.signal = Some(sig.clone());
                w
            });
        }
    }
    Ok(c.with_data("rate", rate))
}

/// `D⁺V <= V⁰(t, T(t)x; f(t, T_r(t)x, d(t)))` at random grid times.
pub fn dini_lemma_check(
    sys: &RfdeSystem,
    v: &Functional,
    spec: &SampleSpec,
    samples: usize,
    horizon: f64,
) -> Result<CheckResult> {
    let rows: Vec<(f64, f64, f64, f64)> = (0..samples as u64)
        .into_par_iter()
        .map(|i| {
            let (traj, _, _, t0) = random_trajectory(sys, spec, horizon, i)?;
            let mut rng = sample_rng(spec.seed, stream::DIRECTION, i);
            let m = rng.gen_range(0..traj.steps());
            let t = traj.time(m);
            // along smooth solutions D⁺V = V⁰, so the limit estimate is compared
            let dp = dplus_along(v, &traj, t, Aggregate::Richardson)?.value;
            let v0 = v0_along(v, &traj, t)?;
            Ok((t, t0, dp, v0))
        })
        .collect::<Result<_>>()?;
    let mut c = CheckResult::new("dini_lemma", spec.rel_tol);
    for (i, (t, t0, dp, v0)) in rows.into_iter().enumerate() {
        c.push_rel(dp, v0, || witness("trajectory", spec.seed, i as u64, t, t0));
    }
    Ok(c)
}

/// Numerical `V⁰` (Richardson value) against the closed form, within
/// `rel_tol` relative with a `1e-6` absolute floor.
pub fn dini_oracle_check(sys: &RfdeSystem, v: &Functional, spec: &SampleSpec, samples: usize) -> Result<CheckResult> {
    if !v.has_derivative() {
        return Err(Error::Config(format!("functional {} has no closed-form derivative", v.name())));
    }
    let rows: Vec<(f64, f64, f64, Vec<f64>)> = (0..samples as u64)
        .into_par_iter()
        .map(|i| {
            let (t, x) = random_state(sys, spec, v.window_span(), i)?;
            let mut rng = sample_rng(spec.seed, stream::DIRECTION, i);
            let bx = sys.disturbance_box();
            let d = if bx.dim() == 0 { Vec::new() } else { bx.sample(&mut rng)? };
            let dir = sys.eval_rhs(t, &x.tail(sys.delay_span())?, &d)?;
            let exact = v.derivative(t, &x, &dir)?.unwrap_or(f64::NAN);
            let est = estimate_v0(v, t, &x, &dir, Aggregate::Richardson)?.value;
            Ok((t, est, exact, d))
        })
        .collect::<Result<_>>()?;
    let mut c = CheckResult::new("dini_oracle", spec.rel_tol);
    for (i, (t, est, exact, d)) in rows.into_iter().enumerate() {
        let band = (spec.rel_tol * exact.abs()).max(1e-6);
        c.push((est - exact).abs(), 0.0, band, || {
            let mut w = witness("state", spec.seed, i as u64, t, t);
            w.d = Some(d.clone());
            w
        });
    }
    Ok(c)
}

/// Comparison-lemma check: `V` along trajectories restarted at `t0 + r·j`
/// stays below `ẇ = -rate·w`, `w = V` at the restart. A copy of the
/// samples shifted by `+injected` must be flagged at its first grid point.
pub fn comparison_check(
    sys: &RfdeSystem,
    v: &Functional,
    spec: &SampleSpec,
    trajectories: usize,
    horizon: f64,
    rate: f64,
    injected: f64,
) -> Result<CheckResult> {
    let r = sys.delay_span();
    let f = move |_: f64, w: f64| -rate * w;
    type Row = (f64, f64, bool, Option<f64>, f64);
    let rows: Vec<Vec<Row>> = (0..trajectories as u64)
        .into_par_iter()
        .map(|i| -> Result<Vec<Row>> {
            let (traj, _, _, t0) = random_trajectory(sys, spec, horizon, i)?;
            let g = traj.grid_step();
            let vals: Vec<f64> = (0..=traj.steps())
                .map(|m| {
                    let t = traj.time(m);
                    v.eval(t, &traj.window(t, v.window_span())?)
                })
                .collect::<Result<_>>()?;
            let step_r = ((r.max(g)) / g).round() as usize;
            let mut out = Vec::new();
            let mut start = step_r;
            while start + 2 <= traj.steps() {
                let ts = traj.time(start);
                let seq = &vals[start..];
                let rep = check_dominated(seq, ts, g, &f, seq[0], DominationMode::Bounded, (0.0, f64::INFINITY), spec.rel_tol)?;
                let shifted: Vec<f64> = seq.iter().map(|x| x + injected).collect();
                let inj = check_dominated(&shifted, ts, g, &f, seq[0], DominationMode::Bounded, (0.0, f64::INFINITY), spec.rel_tol)?;
                out.push((ts, t0, rep.holds, inj.first_violation, rep.worst_slack));
                start += step_r;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut c = CheckResult::new("comparison", spec.rel_tol);
    let mut injected_ok = true;
    for (i, row) in rows.into_iter().enumerate() {
        for (ts, t0, holds, inj, slack) in row {
            c.push(slack, 0.0, 0.0, || witness("trajectory", spec.seed, i as u64, ts, t0));
            if !holds {
                c.passed = false;
            }
            if inj.map_or(true, |tv| (tv - ts).abs() > 1e-12) {
                injected_ok = false;
            }
        }
    }
    if !injected_ok {
        c.fail("injected counterexample was not flagged at its first grid point");
    }
    c.set_data("injected_detected", injected_ok);
    c.set_data("rate", rate);
    Ok(c)
}

/// Measured gap of paired solutions against the Gronwall bound.
pub fn gronwall_check(sys: &RfdeSystem, spec: &SampleSpec, pairs: usize, horizon: f64, rel: f64) -> Result<CheckResult> {
    let cfg = spec.integrator();
    let r = sys.delay_span();
    let g = cfg.resolve_grid(r);
    let rows: Vec<(f64, f64)> = (0..pairs as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(spec.seed, stream::PAIR, i);
            let nx = spec.max_norm * (1.0 - rng.gen::<f64>());
            let ny = spec.max_norm * (1.0 - rng.gen::<f64>());
            let x0 = random_fourier_history(&mut rng, r, g, sys.state_dim(), spec.modes, nx)?;
            let y0 = random_fourier_history(&mut rng, r, g, sys.state_dim(), spec.modes, ny)?;
            let sig = random_signal_spec(sys, &mut rng, horizon, g, spec.max_switches)?;
            let t0 = (spec.t0s[i as usize % spec.t0s.len()] / g).round() * g;
            let d = make_signal(&sig)?.delayed(t0);
            let gap = continuity_gap(sys, t0, &x0, &y0, &d, t0 + horizon, &cfg)?;
            Ok((t0, gap.worst_excess()))
        })
        .collect::<Result<_>>()?;
    let mut c = CheckResult::new("gronwall", rel);
    for (i, (t0, excess)) in rows.into_iter().enumerate() {
        c.push(excess, 0.0, rel, || witness("pair", spec.seed, i as u64, t0, t0));
    }
    Ok(c)
}

/// `|x_c(t)| <= tol(1 + ‖x₀‖)` for `t >= t0 + after`.
pub fn extinction_check(
    sys: &RfdeSystem,
    spec: &SampleSpec,
    component: usize,
    after: f64,
    horizon: f64,
    tol: f64,
) -> Result<CheckResult> {
    if component >= sys.state_dim() {
        return Err(Error::Config(format!("component {component} out of range")));
    }
    let cfg = spec.integrator();
    let r = sys.delay_span();
    let g = cfg.resolve_grid(r);
    let per = spec.signals.max(1);
    let rows: Vec<(f64, f64, f64, f64, SignalSpec)> = (0..(spec.histories * per) as u64)
        .into_par_iter()
        .map(|i| {
            let h = i / per as u64;
            let mut hrng = sample_rng(spec.seed, stream::STATE, h);
            let norm = spec.max_norm * (1.0 - hrng.gen::<f64>());
            let x0 = random_fourier_history(&mut hrng, r, g, sys.state_dim(), spec.modes, norm)?;
            let mut srng = sample_rng(spec.seed, stream::TRAJECTORY, i);
            let sig = random_signal_spec(sys, &mut srng, horizon, g, spec.max_switches)?;
            let t0 = (spec.t0s[h as usize % spec.t0s.len()] / g).round() * g;
            let d = make_signal(&sig)?.delayed(t0);
            let traj = integrate(sys, t0, &x0, &d, t0 + horizon, &cfg)?;
            if !traj.is_completed() {
                return Ok((t0, t0, f64::INFINITY, 0.0, sig));
            }
            let first = ((after / g).round() as usize).min(traj.steps());
            let mut worst = (t0 + after, 0.0f64);
            for m in first..=traj.steps() {
                let v = traj.state(m)[component].abs();
                if v > worst.1 {
                    worst = (traj.time(m), v);
                }
            }
            Ok((worst.0, t0, worst.1, tol * (1.0 + x0.sup_norm()), sig))
        })
        .collect::<Result<_>>()?;
    let mut c = CheckResult::new("extinction", tol);
    for (i, (t, t0, lhs, rhs, sig)) in rows.into_iter().enumerate() {
        c.push(lhs, rhs, 0.0, || {
            let mut w = witness("trajectory", spec.seed, i as u64, t, t0);
            w.signal = Some(sig.clone());
            w
        });
    }
    Ok(c.with_data("after", after))
}

/// Checks `φ(t, t₀, x₀; d) = φ(t - kT, t₀ - kT, x₀; P d)` on the grid for
/// `t₀ = kT + offset`.
pub fn periodic_reduction_check(
    sys: &RfdeSystem,
    spec: &SampleSpec,
    ks: &[usize],
    offset: f64,
    horizon: f64,
    tol: f64,
) -> Result<CheckResult> {
    let period = sys
        .period()
        .ok_or_else(|| Error::Config(format!("system {} declares no period", sys.name())))?;
    let cfg = spec.integrator();
    let r = sys.delay_span();
    let g = cfg.resolve_grid(r);
    if grid_multiple(period, g).is_none() || grid_multiple(offset, g).is_none() {
        return Err(Error::Config(format!(
            "period {period} and offset {offset} must be multiples of the grid step {g}"
        )));
    }
    let jobs: Vec<(usize, u64)> = ks
        .iter()
        .flat_map(|&k| (0..spec.histories as u64).map(move |h| (k, h)))
        .collect();
    let rows: Vec<(f64, f64)> = jobs
        .par_iter()
        .map(|&(k, h)| {
            let mut rng = sample_rng(spec.seed, stream::STATE, h);
            let norm = spec.max_norm * (1.0 - rng.gen::<f64>());
            let x0 = random_fourier_history(&mut rng, r, g, sys.state_dim(), spec.modes, norm)?;
            let sig = random_signal_spec(sys, &mut rng, horizon, g, spec.max_switches)?;
            let shift = k as f64 * period;
            let t0 = shift + offset;
            let d = make_signal(&sig)?.delayed(t0);
            let pd = d.shift(shift);
            let a = integrate(sys, t0, &x0, &d, t0 + horizon, &cfg)?;
            let b = integrate(sys, offset, &x0, &pd, offset + horizon, &cfg)?;
            let steps = a.steps().min(b.steps());
            let mut worst: f64 = if a.steps() == b.steps() { 0.0 } else { f64::INFINITY };
            for m in 0..=steps {
                for (p, q) in a.state(m).iter().zip(b.state(m)) {
                    worst = worst.max((p - q).abs());
                }
            }
            Ok((t0, worst))
        })
        .collect::<Result<_>>()?;
    let mut c = CheckResult::new("periodic_reduction", tol);
    for (i, (t0, gap)) in rows.into_iter().enumerate() {
        c.push(gap, 0.0, tol, || witness("periodic", spec.seed, i as u64, t0, t0));
    }
    Ok(c.with_data("period", period))
}

/// For `ẋ = -x(tᵢ)` sampled with period `r`: the states at sampling times
/// satisfy `x((i+1)r) = (1 - r)x(ir)` once the first full period has passed.
pub fn sampled_map_check(sys: &RfdeSystem, spec: &SampleSpec, periods: usize, tol: f64) -> Result<CheckResult> {
    let r = sys.delay_span();
    let cfg = spec.integrator();
    let g = cfg.resolve_grid(r);
    let per = grid_multiple(r, g).ok_or(Error::OffGrid {
        what: "sampling period",
        value: r,
        grid_step: g,
    })?;
    let rows: Vec<(f64, f64)> = (0..spec.histories as u64)
        .into_par_iter()
        .map(|h| {
            let mut rng = sample_rng(spec.seed, stream::STATE, h);
            let norm = spec.max_norm * (1.0 - rng.gen::<f64>());
            let x0 = random_fourier_history(&mut rng, r, g, sys.state_dim(), spec.modes, norm)?;
            let t0 = (spec.t0s[h as usize % spec.t0s.len()] / r).round() * r;
            let traj = integrate(sys, t0, &x0, &DisturbanceSignal::none(), t0 + periods as f64 * r, &cfg)?;
            let mut worst: f64 = 0.0;
            for i in 0..periods {
                let a = traj.state(i * per)[0];
                let b = traj.state((i + 1) * per)[0];
                worst = worst.max((b - (1.0 - r) * a).abs());
            }
            Ok((t0, worst))
        })
        .collect::<Result<_>>()?;
    let mut c = CheckResult::new("sampled_map", tol);
    for (i, (t0, gap)) in rows.into_iter().enumerate() {
        c.push(gap, 0.0, tol, || witness("state", spec.seed, i as u64, t0, t0));
    }
    Ok(c)
}

/// Converse-construction checks: exact sandwich lower bound, flagged upper
/// bound, decrease under concatenation-consistent sampling and `V ≡ 0`
/// along the zero solution. With `decay_oracle`, `Û_q` is also compared
/// with `max{0, |x| - 1/q}`.
pub fn converse_check(
    sys: &RfdeSystem,
    cfg: ConverseConfig,
    spec: &SampleSpec,
    states: usize,
    decay_oracle: bool,
    decrease_tol: f64,
) -> Result<Vec<CheckResult>> {
    let conv = Converse::new(sys, cfg)?;
    let r = sys.delay_span();
    let g = conv.grid_step();
    let q_max = conv.config().q_max;
    let mut lower = CheckResult::new("converse_sandwich_lower", 0.0);
    let mut upper = CheckResult::new("converse_sandwich_upper", 0.0);
    let mut oracle = CheckResult::new("converse_oracle", 1e-6);
    let mut decrease = CheckResult::new("converse_decrease", decrease_tol);
    let rows: Vec<_> = (0..states as u64)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let mut rng = sample_rng(spec.seed, stream::STATE, i);
            let norm = spec.max_norm * (1.0 - rng.gen::<f64>());
            let x = random_fourier_history(&mut rng, r, g, sys.state_dim(), spec.modes, norm)?;
            let t = (spec.t0s[i as usize % spec.t0s.len()] / g).round() * g;
            let sand = conv.sandwich(t, &x)?;
            let head = {
                let bx = sys.disturbance_box();
                if bx.dim() == 0 {
                    DisturbanceSignal::none()
                } else {
                    // bang-bang head: a random vertex on [t, t + h)
                    let vtx = bx.sample_vertex(&mut rng)?;
                    let tail = bx.sample_vertex(&mut rng)?;
                    DisturbanceSignal::piecewise_constant(bx.clone(), &[t + g], vec![vtx, tail])?
                }
            };
            let q = 1 + (i as usize % q_max);
            let dec = conv.check_decrease(q, t, &x, &head, g, decrease_tol)?;
            Ok((t, x.current()[0], sand, dec))
        })
        .collect::<Result<_>>()?;
    for (i, (t, x0, sand, dec)) in rows.into_iter().enumerate() {
        for row in &sand {
            lower.push(row.lower, row.value, 0.0, || witness("state", spec.seed, i as u64, t, t));
            if row.value > row.upper {
                upper.warnings.push(format!(
                    "sample {i}, q = {}: Û_q = {} exceeds ã₂(β‖x‖) = {}; the envelope fit is too tight",
                    row.q, row.value, row.upper
                ));
            }
            upper.samples += 1;
            upper.worst_slack = upper.worst_slack.max(row.value - row.upper);
            if decay_oracle {
                let exact = (x0.abs() - 1.0 / row.q as f64).max(0.0);
                oracle.push((row.value - exact).abs(), 0.0, 1e-6, || witness("state", spec.seed, i as u64, t, t));
            }
        }
        decrease.push(dec.later, (-dec.h).exp() * dec.now, decrease_tol * (1.0 + dec.now), || {
            witness("state", spec.seed, i as u64, t, t)
        });
    }
    upper.worst_margin = upper.worst_slack;

    // V vanishes along the zero solution
    let assembled = conv.assemble_v()?;
    let mut zero = CheckResult::new("converse_zero_solution", 0.0);
    let z = HistorySegment::constant(r, g, &vec![0.0; sys.state_dim()])?;
    let z = if r == 0.0 { HistorySegment::point(&vec![0.0; sys.state_dim()])? } else { z };
    for (k, &t) in spec.t0s.iter().enumerate() {
        let val = assembled.functional.eval(t, &z)?;
        zero.push(val.abs(), 0.0, 0.0, || witness("zero", spec.seed, k as u64, t, t));
    }
    let mut out = vec![lower, upper, decrease, zero];
    if decay_oracle {
        out.push(oracle);
    }
    let c0 = &mut out[0];
    c0.set_data("weights", &assembled.weights);
    if let Some(fit) = conv.fit() {
        c0.set_data("envelope_fit", fit);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::{find_c, v212, v212_unchecked, v213};
    use crate::system::{example212, example213, sampled_integrator, scalar_decay};
    use approx::assert_abs_diff_eq;

    fn small(histories: usize) -> SampleSpec {
        SampleSpec {
            histories,
            ..SampleSpec::default()
        }
    }

    #[test]
    fn zero_start_reachable_state_is_zero() {
        let sys = example212(1.0, 1.1, 0.4).unwrap();
        let spec = SampleSpec {
            histories: 1,
            max_norm: 0.0,
            grid_step: Some(0.004),
            ..SampleSpec::default()
        };
        let s = s_state(&sys, 0.4, 0.4, &spec, 0).unwrap().unwrap();
        assert_eq!(s.segment.sup_norm(), 0.0);
    }

    #[test]
    fn reachable_states_pass_membership() {
        let sys = example213();
        let spec = SampleSpec {
            histories: 10,
            grid_step: Some(0.01),
            ..SampleSpec::default()
        };
        let st = generate_s_states(&sys, 6.0, 5.0, &spec).unwrap();
        assert_eq!(st.states.len(), 10);
        for s in &st.states {
            assert!(s.residual < 1e-6);
            assert_abs_diff_eq!(s.segment.span(), 6.0, epsilon = 1e-12);
            // x ≡ 0 on [-1, 0]
            for k in (s.segment.cells() - 100)..s.segment.len() {
                assert!(s.segment.node(k)[0].abs() <= 1e-6 * (1.0 + s.x0_norm));
            }
        }
    }

    #[test]
    fn decay_envelope_closed_form() {
        let spec = EnvelopeSpec {
            norms: vec![0.5, 1.0],
            histories: 2,
            signals: 0,
            horizon: 2.0,
            grid_step: Some(0.01),
            ..EnvelopeSpec::default()
        };
        let env = empirical_envelope(&scalar_decay(), &spec).unwrap();
        for (s, row) in env.norms.iter().zip(&env.values) {
            for (t, v) in env.times.iter().zip(row) {
                assert_abs_diff_eq!(*v, s * (-t).exp(), epsilon = 1e-9);
            }
        }
        let zero = empirical_envelope(
            &scalar_decay(),
            &EnvelopeSpec {
                norms: vec![0.0],
                ..spec
            },
        )
        .unwrap();
        assert!(zero.values[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn uniform_reachable_suite_example212() {
        let sys = example212(1.0, 1.1, 0.4).unwrap();
        let c = find_c(1.0, 1.1, 0.4).unwrap();
        let v = v212(1.0, 1.1, 0.4, c).unwrap();
        let spec = SampleSpec {
            grid_step: Some(0.004),
            ..small(40)
        };
        let res = check_theorem_conditions(&sys, &v, Form::UniformReachableDecay, &spec).unwrap();
        for r in &res {
            assert!(r.passed, "{} failed: {:?}", r.name, r.witness);
        }
    }

    #[test]
    fn inflated_c_is_falsified_and_replays() {
        let sys = example212(1.0, 1.1, 0.4).unwrap();
        // c > a: the decrease itself breaks, not only the growth bound
        let v = v212_unchecked(1.0, 1.1, 0.4, 1.5).unwrap();
        let spec = SampleSpec {
            grid_step: Some(0.004),
            ..small(40)
        };
        let res = check_theorem_conditions(&sys, &v, Form::UniformReachableDecay, &spec).unwrap();
        let dec = res.iter().find(|r| r.name == "reachable_decrease").unwrap();
        assert!(!dec.passed);
        let w = dec.witness.as_ref().unwrap();
        let (lhs, rhs) = replay_condition(&sys, &v, Form::UniformReachableDecay, &spec, "reachable_decrease", w).unwrap();
        assert_eq!((lhs, rhs), (w.lhs, w.rhs));
    }

    #[test]
    fn reachable_suite_example213() {
        let sys = example213();
        let v = v213();
        let spec = SampleSpec {
            grid_step: Some(0.01),
            t0s: vec![0.0, 0.7],
            ..small(20)
        };
        let res = check_theorem_conditions(&sys, &v, Form::ReachableDecay, &spec).unwrap();
        for r in &res {
            assert!(r.passed, "{} failed: {:?}", r.name, r.witness);
        }
    }

    #[test]
    fn periodic_and_sampled_map() {
        let sys = sampled_integrator(1.0).unwrap();
        let spec = SampleSpec {
            grid_step: Some(0.01),
            t0s: vec![0.0],
            ..small(4)
        };
        let c = periodic_reduction_check(&sys, &spec, &[0, 1, 3], 0.0, 4.0, 1e-12).unwrap();
        assert!(c.passed, "{:?}", c.worst_slack);
        let c = sampled_map_check(&sys, &spec, 4, 1e-9).unwrap();
        assert!(c.passed);
        let bad = periodic_reduction_check(&sys, &spec, &[1], 0.005, 4.0, 1e-12);
        assert!(matches!(bad, Err(Error::Config(_))));
    }

    #[test]
    fn missing_bounds_is_config_error() {
        let sys = scalar_decay();
        let v = crate::functionals::half_square(0.0).unwrap();
        let res = check_theorem_conditions(&sys, &v, Form::UniformReachableDecay, &small(2));
        assert!(matches!(res, Err(Error::Config(_))));
    }
}
