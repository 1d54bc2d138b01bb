//! Right-hand sides `f(t, T_r(t)x, d)`, built-in systems and hypothesis probes.
//!
//! Probes can only falsify the analytic hypotheses; a passing probe means no
//! violation was found on the sampled inputs.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::history::{norm, random_fourier_history, History, HistorySegment};
use crate::signals::DisturbanceBox;

/// Where the right-hand side is evaluated.
///
/// `regime` is the start of the current integration step. It only matters
/// for systems whose right-hand side jumps at registered discontinuity
/// times: evaluating at the end of a step with `regime` at its start yields
/// the left limit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalPoint {
    pub t: f64,
    pub regime: f64,
}

impl EvalPoint {
    pub fn at(t: f64) -> Self {
        Self { t, regime: t }
    }
}

pub type RhsFn = Arc<dyn Fn(EvalPoint, &dyn History, &[f64], &mut [f64]) + Send + Sync>;
/// `L(t, s)`.
pub type ModulusFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Times at which the right-hand side may be discontinuous in `t`.
#[derive(Clone, Debug, PartialEq)]
pub enum DiscontinuitySet {
    Finite(Vec<f64>),
    /// `{offset + i·period : i ∈ ℤ}`.
    Periodic { period: f64, offset: f64 },
}

impl DiscontinuitySet {
    pub fn empty() -> Self {
        DiscontinuitySet::Finite(Vec::new())
    }

    /// Points in the open interval `(a, b)`.
    pub fn in_open(&self, a: f64, b: f64) -> Vec<f64> {
        match self {
            DiscontinuitySet::Finite(v) => v.iter().copied().filter(|t| *t > a && *t < b).collect(),
            DiscontinuitySet::Periodic { period, offset } => {
                let mut i = ((a - offset) / period).floor() as i64;
                let mut out = Vec::new();
                loop {
                    let t = offset + i as f64 * period;
                    if t >= b {
                        break;
                    }
                    if t > a {
                        out.push(t);
                    }
                    i += 1;
                }
                out
            }
        }
    }
}

/// `|f(t, x, d)| <= ζ(γ(t)‖x‖)`.
#[derive(Clone)]
pub struct Growth {
    pub zeta: ScalarFn,
    pub gamma: ScalarFn,
}

/// An RFDE `ẋ(t) = f(t, T_r(t)x, d(t))`.
#[derive(Clone)]
pub struct RfdeSystem {
    name: String,
    delay_span: f64,
    state_dim: usize,
    bx: DisturbanceBox,
    rhs: RhsFn,
    discontinuities: DiscontinuitySet,
    lipschitz: Option<ModulusFn>,
    growth: Option<Growth>,
    period: Option<f64>,
    uniform: bool,
}

impl fmt::Debug for RfdeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RfdeSystem")
            .field("name", &self.name)
            .field("delay_span", &self.delay_span)
            .field("state_dim", &self.state_dim)
            .field("box", &self.bx)
            .field("discontinuities", &self.discontinuities)
            .field("lipschitz", &self.lipschitz.is_some())
            .field("growth", &self.growth.is_some())
            .field("period", &self.period)
            .finish()
    }
}

impl RfdeSystem {
    pub fn new(
        name: impl Into<String>,
        delay_span: f64,
        state_dim: usize,
        bx: DisturbanceBox,
        rhs: RhsFn,
    ) -> Result<Self> {
        if !(delay_span >= 0.0) || !delay_span.is_finite() {
            return Err(Error::Parameter(format!("delay span must be >= 0, got {delay_span}")));
        }
        if state_dim == 0 {
            return Err(Error::Parameter("state dimension must be positive".into()));
        }
        Ok(Self {
            name: name.into(),
            delay_span,
            state_dim,
            bx,
            rhs,
            discontinuities: DiscontinuitySet::empty(),
            lipschitz: None,
            growth: None,
            period: None,
            uniform: false,
        })
    }

    pub fn with_lipschitz(mut self, l: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.lipschitz = Some(Arc::new(l));
        self
    }

    pub fn without_lipschitz(mut self) -> Self {
        self.lipschitz = None;
        self
    }

    pub fn with_growth(
        mut self,
        zeta: impl Fn(f64) -> f64 + Send + Sync + 'static,
        gamma: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.growth = Some(Growth {
            zeta: Arc::new(zeta),
            gamma: Arc::new(gamma),
        });
        self
    }

    pub fn with_period(mut self, period: f64) -> Result<Self> {
        if !(period > 0.0) || !period.is_finite() {
            return Err(Error::Parameter(format!("period must be positive, got {period}")));
        }
        self.period = Some(period);
        Ok(self)
    }

    pub fn with_discontinuities(mut self, set: DiscontinuitySet) -> Self {
        self.discontinuities = set;
        self
    }

    /// Marks the right-hand side as independent of `t`, so uniform-in-time
    /// estimates apply.
    pub fn with_uniform(mut self, uniform: bool) -> Self {
        self.uniform = uniform;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn delay_span(&self) -> f64 {
        self.delay_span
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn disturbance_box(&self) -> &DisturbanceBox {
        &self.bx
    }

    pub fn discontinuities(&self) -> &DiscontinuitySet {
        &self.discontinuities
    }

    pub fn lipschitz(&self) -> Option<&ModulusFn> {
        self.lipschitz.as_ref()
    }

    pub fn growth(&self) -> Option<&Growth> {
        self.growth.as_ref()
    }

    pub fn period(&self) -> Option<f64> {
        self.period
    }

    pub fn is_uniform(&self) -> bool {
        self.uniform
    }

    /// Unchecked evaluation for inner loops.
    #[inline]
    pub fn rhs_into(&self, at: EvalPoint, x: &dyn History, d: &[f64], out: &mut [f64]) {
        (self.rhs)(at, x, d, out)
    }

    /// Checked evaluation of `f(t, x, d)`.
    pub fn eval_rhs(&self, t: f64, x: &HistorySegment, d: &[f64]) -> Result<Vec<f64>> {
        let tol = 1e-9 * self.delay_span.max(1.0);
        if (x.span() - self.delay_span).abs() > tol {
            return Err(Error::InvalidHistory(format!(
                "history span {} differs from delay span {}",
                x.span(),
                self.delay_span
            )));
        }
        if x.dim() != self.state_dim {
            return Err(Error::Dimension {
                what: "history",
                expected: self.state_dim,
                got: x.dim(),
            });
        }
        if d.len() != self.bx.dim() {
            return Err(Error::Dimension {
                what: "disturbance",
                expected: self.bx.dim(),
                got: d.len(),
            });
        }
        if !self.bx.contains(d) {
            return Err(Error::InvalidSignal(format!("disturbance {d:?} outside the box")));
        }
        let mut out = vec![0.0; self.state_dim];
        self.rhs_into(EvalPoint::at(t), x, d, &mut out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model(format!("non-finite right-hand side at t = {t}")));
        }
        Ok(out)
    }
}

/// `ẋ(t) = -d(t) x(t - r)`, `d ∈ [a, b]`.
pub fn example212(a: f64, b: f64, r: f64) -> Result<RfdeSystem> {
    if !(a > 0.0) || !(b >= a) || !b.is_finite() {
        return Err(Error::Parameter(format!("need b >= a > 0, got a = {a}, b = {b}")));
    }
    let rhs: RhsFn = Arc::new(move |_, x, d, out| {
        let mut xr = [0.0];
        x.value_into(-r, &mut xr);
        out[0] = -d[0] * xr[0];
    });
    Ok(RfdeSystem::new("example212", r, 1, DisturbanceBox::interval(a, b)?, rhs)?
        .with_lipschitz(move |_, _| b)
        .with_growth(|s| s, move |_| b)
        .with_uniform(true))
}

/// The gain of the first equation of [`example213`]: `2 sin²(πt)` on
/// `[2k, 2k+1]` and `0` on `(2k-1, 2k)`.
pub fn example213_gain(t: f64) -> f64 {
    if t.rem_euclid(2.0) <= 1.0 {
        let s = (std::f64::consts::PI * t).sin();
        2.0 * s * s
    } else {
        0.0
    }
}

/// Planar system `ẋ = -a(t) x(t-1)`, `ẏ = -y + d eᵗ x²`, `d ∈ [-1, 1]`.
pub fn example213() -> RfdeSystem {
    let rhs: RhsFn = Arc::new(|at, x, d, out| {
        let mut past = [0.0; 2];
        let mut now = [0.0; 2];
        x.value_into(-1.0, &mut past);
        x.value_into(0.0, &mut now);
        out[0] = -example213_gain(at.t) * past[0];
        out[1] = -now[1] + d[0] * at.t.exp() * now[0] * now[0];
    });
    RfdeSystem::new(
        "example213",
        1.0,
        2,
        DisturbanceBox::interval(-1.0, 1.0).expect("valid box"),
        rhs,
    )
    .expect("valid system")
    .with_lipschitz(|t, s| 2.0 + t.exp() * s)
    .with_growth(|s| 3.0 * s + s * s, |t| t.exp())
}

/// `ẋ = -x` without delay.
pub fn scalar_decay() -> RfdeSystem {
    let rhs: RhsFn = Arc::new(|_, x, _, out| {
        let mut v = [0.0];
        x.value_into(0.0, &mut v);
        out[0] = -v[0];
    });
    RfdeSystem::new("scalar_decay", 0.0, 1, DisturbanceBox::empty(), rhs)
        .expect("valid system")
        .with_lipschitz(|_, _| 0.0)
        .with_growth(|s| s, |_| 1.0)
        .with_uniform(true)
}

/// `ẋ = -x(t - 1)`.
pub fn linear_delay() -> RfdeSystem {
    let rhs: RhsFn = Arc::new(|_, x, _, out| {
        let mut v = [0.0];
        x.value_into(-1.0, &mut v);
        out[0] = -v[0];
    });
    RfdeSystem::new("linear_delay", 1.0, 1, DisturbanceBox::empty(), rhs)
        .expect("valid system")
        .with_lipschitz(|_, _| 1.0)
        .with_growth(|s| s, |_| 1.0)
        .with_uniform(true)
}

/// `ẋ = x(t)² + 0·x(t - r)`, which escapes in finite time.
pub fn quadratic_blowup(r: f64) -> Result<RfdeSystem> {
    let rhs: RhsFn = Arc::new(move |_, x, _, out| {
        let mut v = [0.0];
        let mut p = [0.0];
        x.value_into(0.0, &mut v);
        x.value_into(-r, &mut p);
        out[0] = v[0] * v[0] + 0.0 * p[0];
    });
    Ok(RfdeSystem::new("quadratic_blowup", r, 1, DisturbanceBox::empty(), rhs)?
        .with_lipschitz(|_, s| s)
        .with_growth(|s| s * s, |_| 1.0))
}

/// Finite-dimensional dynamics `f(t, x, u)`.
pub type PlantFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> Vec<f64> + Send + Sync>;
/// Feedback `k(t, x, x_sample)`.
pub type FeedbackFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> Vec<f64> + Send + Sync>;

/// Sampled-data closed loop `ẋ = f(t, x, k(t, x, x(tᵢ)))` with sampling
/// times `tᵢ = i r`, written as an RFDE with delay span `r`.
///
/// The delayed argument is `θ = ⌊t/r⌋ r - t`. When `time_invariant` is set
/// the system is declared `r`-periodic.
pub fn sampled_data(
    name: impl Into<String>,
    state_dim: usize,
    f: PlantFn,
    k: FeedbackFn,
    r: f64,
    time_invariant: bool,
) -> Result<RfdeSystem> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::Parameter(format!("sampling period must be positive, got {r}")));
    }
    let rhs: RhsFn = Arc::new(move |at, x, _, out| {
        let n = out.len();
        let mut now = vec![0.0; n];
        let mut past = vec![0.0; n];
        x.value_into(0.0, &mut now);
        let sample_time = (at.regime / r + 1e-9).floor() * r;
        let theta = (sample_time - at.t).clamp(-r, 0.0);
        x.value_into(theta, &mut past);
        let u = k(at.t, &now, &past);
        let v = f(at.t, &now, &u);
        out.copy_from_slice(&v);
    });
    let sys = RfdeSystem::new(name, r, state_dim, DisturbanceBox::empty(), rhs)?
        .with_discontinuities(DiscontinuitySet::Periodic {
            period: r,
            offset: 0.0,
        });
    if time_invariant {
        Ok(sys.with_period(r)?.with_uniform(true))
    } else {
        Ok(sys)
    }
}

/// `ẋ = u`, `u = -x(tᵢ)`.
pub fn sampled_integrator(r: f64) -> Result<RfdeSystem> {
    let f: PlantFn = Arc::new(|_, _, u| u.to_vec());
    let k: FeedbackFn = Arc::new(|_, _, past| past.iter().map(|v| -v).collect());
    Ok(sampled_data("sampled_integrator", 1, f, k, r, true)?
        .with_lipschitz(|_, _| 1.0)
        .with_growth(|s| s, |_| 1.0))
}

/// Named scalar nonlinearities for expression systems; all vanish at 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    #[default]
    Identity,
    Square,
    Cube,
    Tanh,
    Sin,
}

impl Nonlinearity {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Nonlinearity::Identity => v,
            Nonlinearity::Square => v * v,
            Nonlinearity::Cube => v * v * v,
            Nonlinearity::Tanh => v.tanh(),
            Nonlinearity::Sin => v.sin(),
        }
    }
}

/// One term `coef · g(x_var(t - delay)) [· d_k(t)]` added to equation `eq`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub eq: usize,
    pub coef: f64,
    pub var: usize,
    #[serde(default)]
    pub delay: f64,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
    #[serde(default)]
    pub disturbance: Option<usize>,
}

/// User-defined system as a sum of terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpressionSystem {
    pub state_dim: usize,
    pub delay_span: f64,
    #[serde(rename = "box", default = "DisturbanceBox::empty")]
    pub bx: DisturbanceBox,
    pub terms: Vec<Term>,
    #[serde(default)]
    pub lipschitz_const: Option<f64>,
}

impl ExpressionSystem {
    pub fn build(&self) -> Result<RfdeSystem> {
        let bx = self.bx.clone().validated()?;
        for (i, t) in self.terms.iter().enumerate() {
            if t.eq >= self.state_dim || t.var >= self.state_dim {
                return Err(Error::Config(format!("term {i}: index out of range")));
            }
            if !(t.delay >= 0.0) || t.delay > self.delay_span + 1e-12 {
                return Err(Error::Config(format!(
                    "term {i}: delay {} outside [0, {}]",
                    t.delay, self.delay_span
                )));
            }
            if let Some(k) = t.disturbance {
                if k >= bx.dim() {
                    return Err(Error::Config(format!("term {i}: disturbance index out of range")));
                }
            }
            if !t.coef.is_finite() {
                return Err(Error::Config(format!("term {i}: non-finite coefficient")));
            }
        }
        let terms = self.terms.clone();
        let n = self.state_dim;
        let rhs: RhsFn = Arc::new(move |_, x, d, out| {
            let mut buf = vec![0.0; n];
            out.iter_mut().for_each(|o| *o = 0.0);
            for t in &terms {
                x.value_into(-t.delay, &mut buf);
                let mut v = t.coef * t.nonlinearity.apply(buf[t.var]);
                if let Some(k) = t.disturbance {
                    v *= d[k];
                }
                out[t.eq] += v;
            }
        });
        let sys = RfdeSystem::new("expression", self.delay_span, n, bx, rhs)?.with_uniform(true);
        Ok(match self.lipschitz_const {
            Some(l) => sys.with_lipschitz(move |_, _| l),
            None => sys,
        })
    }
}

/// Built-in system names with a one-line description.
pub fn builtin_systems() -> Vec<(&'static str, &'static str)> {
    vec![
        ("example212", "x' = -d x(t-r), d in [a,b]; params a, b, r"),
        ("example213", "x' = -a(t) x(t-1), y' = -y + d e^t x^2, d in [-1,1]"),
        ("scalar_decay", "x' = -x, no delay"),
        ("linear_delay", "x' = -x(t-1)"),
        ("quadratic_blowup", "x' = x^2 + 0 x(t-r); param r"),
        ("sampled_integrator", "x' = u, u = -x(t_i), t_i = i r; param r"),
        ("expression", "sum of coef*g(x_j(t-delay))[*d_k] terms"),
    ]
}

fn param(params: &serde_json::Value, key: &str, default: Option<f64>) -> Result<f64> {
    match params.get(key) {
        Some(v) => v
            .as_f64()
            .ok_or_else(|| Error::Config(format!("parameter {key} must be a number"))),
        None => default.ok_or_else(|| Error::Config(format!("missing parameter {key}"))),
    }
}

/// Resolves a built-in system by name.
pub fn builtin_system(name: &str, params: &serde_json::Value) -> Result<RfdeSystem> {
    match name {
        "example212" => example212(
            param(params, "a", Some(1.0))?,
            param(params, "b", Some(1.1))?,
            param(params, "r", Some(0.4))?,
        ),
        "example213" => Ok(example213()),
        "scalar_decay" => Ok(scalar_decay()),
        "linear_delay" => Ok(linear_delay()),
        "quadratic_blowup" => quadratic_blowup(param(params, "r", Some(1.0))?),
        "sampled_integrator" => sampled_integrator(param(params, "r", Some(1.0))?),
        "expression" => {
            let spec: ExpressionSystem = serde_json::from_value(params.clone())
                .map_err(|e| Error::Config(format!("expression system: {e}")))?;
            spec.build()
        }
        other => Err(Error::Config(format!("unknown system {other:?}"))),
    }
}

/// Both sides of the one-sided Lipschitz inequality.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LipschitzProbe {
    /// `(x(0) - y(0)) · (f(t,x,d) - f(t,y,d))`
    pub lhs: f64,
    /// `L(t, ‖x‖ + ‖y‖) ‖x - y‖²`
    pub bound: f64,
}

impl LipschitzProbe {
    pub fn holds(&self, rel_tol: f64) -> bool {
        self.lhs <= self.bound + rel_tol * (1.0 + self.bound.abs())
    }
}

pub fn probe_one_sided_lipschitz(
    sys: &RfdeSystem,
    t: f64,
    x: &HistorySegment,
    y: &HistorySegment,
    d: &[f64],
) -> Result<LipschitzProbe> {
    let l = sys.lipschitz().ok_or(Error::Missing("one-sided Lipschitz modulus"))?;
    let fx = sys.eval_rhs(t, x, d)?;
    let fy = sys.eval_rhs(t, y, d)?;
    let lhs = x
        .current()
        .iter()
        .zip(y.current())
        .zip(fx.iter().zip(&fy))
        .map(|((a, b), (p, q))| (a - b) * (p - q))
        .sum();
    let diff = x.sub(y)?.sup_norm();
    let bound = l(t, x.sup_norm() + y.sup_norm()) * diff * diff;
    Ok(LipschitzProbe { lhs, bound })
}

fn sample_d<R: Rng + ?Sized>(bx: &DisturbanceBox, rng: &mut R) -> Vec<f64> {
    bx.sample(rng).unwrap_or_else(|_| {
        let mut v = vec![0.0; bx.dim()];
        bx.clamp(&mut v);
        v
    })
}

fn probe_grid(sys: &RfdeSystem) -> f64 {
    if sys.delay_span() > 0.0 {
        sys.delay_span() / 20.0
    } else {
        1.0
    }
}

/// Largest `|f(t, 0, d)|` over random `(t, d)`, `t ∈ [0, t_max]`.
pub fn probe_equilibrium<R: Rng + ?Sized>(
    sys: &RfdeSystem,
    rng: &mut R,
    samples: usize,
    t_max: f64,
) -> Result<f64> {
    let zero = HistorySegment::constant(
        sys.delay_span(),
        probe_grid(sys),
        &vec![0.0; sys.state_dim()],
    )?;
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let t = rng.gen_range(0.0..=t_max);
        let d = sample_d(sys.disturbance_box(), rng);
        worst = worst.max(norm(&sys.eval_rhs(t, &zero, &d)?));
    }
    Ok(worst)
}

/// Largest `|f(t + T, x, d) - f(t, x, d)|` over random triples.
pub fn probe_periodicity<R: Rng + ?Sized>(
    sys: &RfdeSystem,
    rng: &mut R,
    samples: usize,
    t_max: f64,
) -> Result<f64> {
    let period = sys.period().ok_or(Error::Missing("declared period"))?;
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let target = rng.gen_range(0.1..=5.0);
        let x = random_fourier_history(rng, sys.delay_span(), probe_grid(sys), sys.state_dim(), 3, target)?;
        // Grid times avoid the ambiguity of sampled-data regimes mid-step.
        let t = (rng.gen_range(0.0..=t_max) / probe_grid(sys)).round() * probe_grid(sys);
        let d = sample_d(sys.disturbance_box(), rng);
        let a = sys.eval_rhs(t, &x, &d)?;
        let b = sys.eval_rhs(t + period, &x, &d)?;
        worst = worst.max(a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max));
    }
    Ok(worst)
}

/// Outcome of the boundedness / smallness probe.
#[derive(Clone, Debug, PartialEq)]
pub struct GrowthProbe {
    /// Largest `|f|` seen on `‖x‖ <= R`, `t <= R`.
    pub max_rhs: f64,
    /// Samples with `|f| > ζ(γ(t)‖x‖)` when a growth envelope is declared.
    pub envelope_violations: usize,
    /// `(ε, sup |f|)` for `‖x‖ <= ε` and `t` within `ε` of a base time.
    pub smallness: Vec<(f64, f64)>,
}

impl GrowthProbe {
    /// Bounded, envelope respected, and `sup |f| → 0` along the ε-sequence.
    pub fn passes(&self) -> bool {
        let decreasing = self
            .smallness
            .windows(2)
            .all(|w| w[1].1 <= w[0].1 * (1.0 + 1e-9) + 1e-15);
        let vanishing = match (self.smallness.first(), self.smallness.last()) {
            (Some(a), Some(b)) => b.1 == 0.0 || b.1 <= 1e-3 * a.1,
            _ => true,
        };
        self.max_rhs.is_finite() && self.envelope_violations == 0 && decreasing && vanishing
    }
}

pub fn probe_growth<R: Rng + ?Sized>(
    sys: &RfdeSystem,
    rng: &mut R,
    radius: f64,
    samples: usize,
) -> Result<GrowthProbe> {
    let g = probe_grid(sys);
    let mut max_rhs: f64 = 0.0;
    let mut violations = 0;
    for _ in 0..samples {
        let target = rng.gen_range(0.0..=radius);
        let x = random_fourier_history(rng, sys.delay_span(), g, sys.state_dim(), 3, target)?;
        let t = rng.gen_range(0.0..=radius);
        let d = sample_d(sys.disturbance_box(), rng);
        let f = norm(&sys.eval_rhs(t, &x, &d)?);
        max_rhs = max_rhs.max(f);
        if let Some(gr) = sys.growth() {
            let env = (gr.zeta)((gr.gamma)(t) * x.sup_norm());
            if f > env * (1.0 + 1e-9) + 1e-12 {
                violations += 1;
            }
        }
    }
    let base = rng.gen_range(0.0..=radius);
    let mut smallness = Vec::new();
    for k in 1..=6 {
        let eps = 10f64.powi(-k);
        let mut sup: f64 = 0.0;
        for _ in 0..samples.clamp(1, 64) {
            let target = rng.gen_range(0.0..=eps);
            let x = random_fourier_history(rng, sys.delay_span(), g, sys.state_dim(), 3, target)?;
            let t = (base + rng.gen_range(-eps..=eps)).max(0.0);
            let d = sample_d(sys.disturbance_box(), rng);
            sup = sup.max(norm(&sys.eval_rhs(t, &x, &d)?));
        }
        smallness.push((eps, sup));
    }
    // Suprema over nested balls are taken over independent samples; enforce
    // monotonicity of the reported sequence explicitly.
    for i in (0..smallness.len().saturating_sub(1)).rev() {
        if smallness[i].1 < smallness[i + 1].1 {
            smallness[i].1 = smallness[i + 1].1;
        }
    }
    Ok(GrowthProbe {
        max_rhs,
        envelope_violations: violations,
        smallness,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn example212_rhs() {
        let sys = example212(1.0, 1.0, 0.5).unwrap();
        let x = HistorySegment::from_fn(0.5, 0.05, 1, |t| vec![1.0 + t]).unwrap();
        assert_abs_diff_eq!(sys.eval_rhs(0.0, &x, &[1.0]).unwrap()[0], -0.5, epsilon = 1e-15);
        let one = HistorySegment::constant(0.4, 0.004, &[1.0]).unwrap();
        let s = example212(1.0, 1.1, 0.4).unwrap();
        assert_abs_diff_eq!(s.eval_rhs(3.0, &one, &[1.05]).unwrap()[0], -1.05, epsilon = 1e-15);
        assert!(example212(0.0, 1.0, 1.0).is_err());
        assert!(example212(1.0, 0.5, 1.0).is_err());
        let (a, b, r): (f64, f64, f64) = (1.0, 1.1, 0.4);
        assert!(2.0 * b.powi(3) * r * r < a);
    }

    #[test]
    fn example213_gain_values() {
        assert_abs_diff_eq!(example213_gain(0.5), 2.0, epsilon = 1e-15);
        assert_eq!(example213_gain(1.5), 0.0);
        assert_abs_diff_eq!(example213_gain(2.5), 2.0, epsilon = 1e-12);
        let sys = example213();
        let x = HistorySegment::constant(1.0, 0.01, &[0.7, -0.2]).unwrap();
        assert_eq!(sys.eval_rhs(1.5, &x, &[0.3]).unwrap()[0], 0.0);
        let z = HistorySegment::constant(1.0, 0.01, &[0.0, 0.0]).unwrap();
        assert_eq!(sys.eval_rhs(0.3, &z, &[1.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn sampled_data_cases() {
        let f: PlantFn = Arc::new(|_, _, u| u.to_vec());
        let k: FeedbackFn = Arc::new(|_, _, _| vec![0.0]);
        let zero_loop = sampled_data("z", 1, f, k, 1.0, true).unwrap();
        let x = HistorySegment::constant(1.0, 0.1, &[3.0]).unwrap();
        assert_eq!(zero_loop.eval_rhs(0.3, &x, &[]).unwrap(), vec![0.0]);

        let sys = sampled_integrator(1.0).unwrap();
        let five = HistorySegment::constant(1.0, 0.1, &[5.0]).unwrap();
        assert_eq!(sys.eval_rhs(0.3, &five, &[]).unwrap(), vec![-5.0]);
        let ramp = HistorySegment::from_fn(1.0, 0.1, 1, |t| vec![t]).unwrap();
        let a = sys.eval_rhs(0.3, &ramp, &[]).unwrap();
        let b = sys.eval_rhs(1.3, &ramp, &[]).unwrap();
        assert_eq!(a, b);
        assert_abs_diff_eq!(a[0], 0.3, epsilon = 1e-14);
        assert_eq!(sys.period(), Some(1.0));
        assert_eq!(sys.discontinuities().in_open(0.0, 3.5), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn lipschitz_probe() {
        let sys = example212(1.0, 1.1, 0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let nx = rng.gen_range(0.0..3.0);
            let x = random_fourier_history(&mut rng, 0.4, 0.01, 1, 3, nx)
                .unwrap();
            let ny = rng.gen_range(0.0..3.0);
            let y = random_fourier_history(&mut rng, 0.4, 0.01, 1, 3, ny)
                .unwrap();
            let d = [rng.gen_range(1.0..=1.1)];
            let p = probe_one_sided_lipschitz(&sys, 0.0, &x, &y, &d).unwrap();
            assert!(p.holds(1e-12), "{p:?}");
        }
        let x = HistorySegment::constant(0.4, 0.01, &[1.0]).unwrap();
        let p = probe_one_sided_lipschitz(&sys, 0.0, &x, &x, &[1.0]).unwrap();
        assert_eq!((p.lhs, p.bound), (0.0, 0.0));

        let wrong = example212(1.0, 1.1, 0.4).unwrap().with_lipschitz(|_, _| 0.0);
        let x = HistorySegment::from_fn(0.4, 0.01, 1, |t| vec![1.0 + 5.0 * t]).unwrap();
        let y = HistorySegment::constant(0.4, 0.01, &[0.0]).unwrap();
        let p = probe_one_sided_lipschitz(&wrong, 0.0, &x, &y, &[1.0]).unwrap();
        assert!(!p.holds(1e-12));
        let none = wrong.without_lipschitz();
        assert!(matches!(
            probe_one_sided_lipschitz(&none, 0.0, &x, &y, &[1.0]),
            Err(Error::Missing(_))
        ));
    }

    #[test]
    fn equilibrium_and_periodicity_probes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = serde_json::json!({});
        for (name, _) in builtin_systems() {
            if name == "expression" {
                continue;
            }
            let sys = builtin_system(name, &params).unwrap();
            assert_eq!(probe_equilibrium(&sys, &mut rng, 1000, 20.0).unwrap(), 0.0, "{name}");
        }
        let sys = sampled_integrator(1.0).unwrap();
        assert!(probe_periodicity(&sys, &mut rng, 200, 10.0).unwrap() < 1e-12);
    }

    #[test]
    fn growth_probe_builtins() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for sys in [example212(1.0, 1.1, 0.4).unwrap(), example213(), linear_delay()] {
            let p = probe_growth(&sys, &mut rng, 3.0, 300).unwrap();
            assert!(p.passes(), "{} {p:?}", sys.name());
        }
    }

    #[test]
    fn expression_system() {
        let spec: ExpressionSystem = serde_json::from_str(
            r#"{"state_dim":1,"delay_span":0.5,"box":{"lower":[0.5],"upper":[1.0]},
                "terms":[{"eq":0,"coef":-1.0,"var":0,"delay":0.5,"disturbance":0},
                         {"eq":0,"coef":-0.1,"var":0,"nonlinearity":"cube"}]}"#,
        )
        .unwrap();
        let sys = spec.build().unwrap();
        let x = HistorySegment::constant(0.5, 0.05, &[2.0]).unwrap();
        assert_abs_diff_eq!(sys.eval_rhs(0.0, &x, &[0.5]).unwrap()[0], -1.8, epsilon = 1e-14);
    }
}
