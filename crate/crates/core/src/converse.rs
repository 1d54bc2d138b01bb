//! Sampled converse-Lyapunov construction.
//!
//! `Û_q(t, x)` maximizes `max{0, ã₁(‖φ(τ, t, x; d)‖) - 1/q}·e^{τ-t}` over
//! grid times `τ ∈ [t, t + T̃]` and a finite disturbance family, so it is a
//! lower bound of the true supremum. `V` is a weighted sum of the `Û_q`.
//!
//! Family members are stored in relative time (starting at 0) and moved to
//! the evaluation time with [`DisturbanceSignal::delayed`].

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals::{Bounds, EvalFn, Functional};
use crate::history::{random_fourier_history, HistorySegment};
use crate::integrator::{integrate, IntegratorConfig, Status};
use crate::signals::DisturbanceSignal;
use crate::system::{RfdeSystem, ScalarFn};

/// Safety factor applied to the least-squares envelope fit.
pub const KAPPA: f64 = 1.1;

/// Disturbance sample family: constant vertex signals, bang-bang signals with
/// at most `max_switches` grid-aligned switches and random step functions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilySpec {
    pub bang_bang: usize,
    pub max_switches: usize,
    pub random: usize,
    /// Switch times are drawn in `(0, horizon)`.
    pub horizon: f64,
    pub seed: u64,
}

impl Default for FamilySpec {
    fn default() -> Self {
        Self {
            bang_bang: 8,
            max_switches: 3,
            random: 16,
            horizon: 5.0,
            seed: 1,
        }
    }
}

/// Batch used to fit `ã₂` and `β`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSpec {
    pub norms: Vec<f64>,
    pub histories: usize,
    pub t0s: Vec<f64>,
    pub horizon: f64,
    pub seed: u64,
}

impl Default for FitSpec {
    fn default() -> Self {
        Self {
            norms: vec![0.25, 0.5, 1.0, 1.5, 2.0],
            histories: 8,
            t0s: vec![0.0],
            horizon: 4.0,
            seed: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Weights built from `G₁`, `G₃`; needs the system's `L`, `ζ`, `γ`.
    Default,
    /// Plain `2⁻q`.
    Plain,
    /// User weights, normalized to sum at most 1.
    User(Vec<f64>),
}

#[derive(Clone)]
pub struct ConverseConfig {
    /// `ã₁`, unit Lipschitz; identity by default.
    pub a1: ScalarFn,
    /// Inverse of `ã₁`; found by bisection when absent.
    pub a1_inv: Option<ScalarFn>,
    /// `ã₂`; fitted when absent.
    pub a2: Option<ScalarFn>,
    /// `β`; `≡ 1` for uniform systems, fitted otherwise, when absent.
    pub beta: Option<ScalarFn>,
    pub q_max: usize,
    pub family: FamilySpec,
    pub fit: FitSpec,
    pub integrator: IntegratorConfig,
    pub weights: WeightMode,
    /// Cap on the sampled horizon `T̃`.
    pub max_horizon: f64,
}

impl Default for ConverseConfig {
    fn default() -> Self {
        Self {
            a1: Arc::new(|s| s),
            a1_inv: Some(Arc::new(|s| s)),
            a2: None,
            beta: None,
            q_max: 8,
            family: FamilySpec::default(),
            fit: FitSpec::default(),
            integrator: IntegratorConfig::default(),
            weights: WeightMode::Default,
            max_horizon: 50.0,
        }
    }
}

/// `T̃(R, q) = max{0, ½ log(q ã₂(β(R) R))}`.
pub fn horizon_t(big_r: f64, q: usize, a2: &dyn Fn(f64) -> f64, beta: &dyn Fn(f64) -> f64) -> f64 {
    let arg = q as f64 * a2(beta(big_r) * big_r);
    if arg <= 1.0 {
        0.0
    } else {
        0.5 * arg.ln()
    }
}

/// Fitted envelope `ã₂(s) = κ(c₁s + c₂s²)` and step function `β`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnvelopeFit {
    pub c1: f64,
    pub c2: f64,
    pub kappa: f64,
    /// `(t₀, β)` steps, non-decreasing.
    pub beta_steps: Vec<(f64, f64)>,
    /// `(s, max e^{2t} ã₁(‖φ‖))` data at the first `t₀`.
    pub data: Vec<(f64, f64)>,
    /// Largest `ã₁(m) - e^{-2t} ã₂(β s)` over the fitted data.
    pub worst_slack: f64,
}

impl EnvelopeFit {
    pub fn a2(&self, s: f64) -> f64 {
        self.kappa * (self.c1 * s + self.c2 * s * s)
    }

    pub fn beta(&self, t: f64) -> f64 {
        let mut b = self.beta_steps.first().map_or(1.0, |s| s.1);
        for &(t0, v) in &self.beta_steps {
            if t >= t0 {
                b = v;
            }
        }
        b
    }
}

/// Non-negative least squares for `y ≈ c₁s + c₂s²`.
fn fit_quadratic(data: &[(f64, f64)]) -> (f64, f64) {
    let (mut s11, mut s12, mut s22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(s, y) in data {
        s11 += s * s;
        s12 += s * s * s;
        s22 += s.powi(4);
        b1 += s * y;
        b2 += s * s * y;
    }
    let det = s11 * s22 - s12 * s12;
    if det.abs() > 1e-300 {
        let c1 = (b1 * s22 - b2 * s12) / det;
        let c2 = (s11 * b2 - s12 * b1) / det;
        if c1 >= 0.0 && c2 >= 0.0 {
            return (c1, c2);
        }
    }
    let resid = |c1: f64, c2: f64| -> f64 {
        data.iter().map(|&(s, y)| (c1 * s + c2 * s * s - y).powi(2)).sum()
    };
    let lin = if s11 > 0.0 { (b1 / s11).max(0.0) } else { 0.0 };
    let quad = if s22 > 0.0 { (b2 / s22).max(0.0) } else { 0.0 };
    if resid(lin, 0.0) <= resid(0.0, quad) {
        (lin, 0.0)
    } else {
        (0.0, quad)
    }
}

/// Smallest `y ≥ 0` with `f(y) ≥ target` for increasing `f`.
fn invert(f: &dyn Fn(f64) -> f64, target: f64) -> f64 {
    if !(target > 0.0) {
        return 0.0;
    }
    if target.is_infinite() {
        return f64::INFINITY;
    }
    let mut hi = 1.0;
    while f(hi) < target {
        hi *= 2.0;
        if hi > 1e300 {
            return f64::INFINITY;
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Per-`q` slacks of the sandwich `max{0, ã₁(‖x‖) - 1/q} ≤ Û_q ≤ ã₂(β(t)‖x‖)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SandwichRow {
    pub q: usize,
    pub lower: f64,
    pub value: f64,
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecreaseReport {
    pub q: usize,
    pub t: f64,
    pub h: f64,
    pub later: f64,
    pub now: f64,
    /// `Û_q(t+h, ·) - e^{-h} Û_q(t, ·)`.
    pub slack: f64,
    pub holds: bool,
}

/// The assembled functional with its weights and companion lower bound.
#[derive(Clone)]
pub struct AssembledV {
    pub functional: Functional,
    pub weights: Vec<f64>,
    /// `a₁(s) = Σ w_q max{0, ã₁(s) - 1/q}`.
    pub lower: ScalarFn,
}

/// Converse construction bound to one system.
#[derive(Clone)]
pub struct Converse {
    sys: RfdeSystem,
    cfg: ConverseConfig,
    a2: ScalarFn,
    beta: ScalarFn,
    fit: Option<EnvelopeFit>,
    family: Vec<DisturbanceSignal>,
    grid_step: f64,
}

impl Converse {
    pub fn new(sys: &RfdeSystem, cfg: ConverseConfig) -> Result<Self> {
        if cfg.q_max == 0 {
            return Err(Error::Config("q_max must be at least 1".into()));
        }
        let grid_step = cfg.integrator.resolve_grid(sys.delay_span());
        let family = build_family(sys, &cfg.family, grid_step)?;
        let mut out = Self {
            sys: sys.clone(),
            a2: Arc::new(|s| s),
            beta: Arc::new(|_| 1.0),
            fit: None,
            family,
            grid_step,
            cfg,
        };
        match (out.cfg.a2.clone(), out.cfg.beta.clone()) {
            (Some(a2), Some(beta)) => {
                out.a2 = a2;
                out.beta = beta;
            }
            (Some(a2), None) if sys.is_uniform() => out.a2 = a2,
            (a2, beta) => {
                let fit = out.fit_envelope()?;
                let f1 = fit.clone();
                out.a2 = a2.unwrap_or_else(|| Arc::new(move |s| f1.a2(s)));
                let f2 = fit.clone();
                out.beta = beta.unwrap_or_else(|| Arc::new(move |t| f2.beta(t)));
                out.fit = Some(fit);
            }
        }
        Ok(out)
    }

    pub fn system(&self) -> &RfdeSystem {
        &self.sys
    }

    pub fn config(&self) -> &ConverseConfig {
        &self.cfg
    }

    pub fn fit(&self) -> Option<&EnvelopeFit> {
        self.fit.as_ref()
    }

    pub fn family(&self) -> &[DisturbanceSignal] {
        &self.family
    }

    pub fn grid_step(&self) -> f64 {
        self.grid_step
    }

    pub fn a2(&self, s: f64) -> f64 {
        (self.a2)(s)
    }

    pub fn beta(&self, t: f64) -> f64 {
        (self.beta)(t)
    }

    /// `T̃(R, q)`.
    pub fn horizon(&self, big_r: f64, q: usize) -> f64 {
        horizon_t(big_r, q, &*self.a2, &*self.beta)
    }

    /// Sampled horizon for `Û_q(t, x)`, rounded up to the grid and capped.
    fn sample_horizon(&self, t: f64, norm: f64, q: usize) -> f64 {
        let h = self.horizon(t.max(norm), q).min(self.cfg.max_horizon);
        (h / self.grid_step).ceil() * self.grid_step
    }

    fn a1_inv(&self, y: f64) -> f64 {
        match &self.cfg.a1_inv {
            Some(f) => f(y),
            None => invert(&*self.cfg.a1, y),
        }
    }

    /// `‖φ(τ)‖` at grid times `τ = t, t+g, ..., t+horizon` under one signal.
    fn norms(&self, t: f64, x: &HistorySegment, d: &DisturbanceSignal, horizon: f64) -> Result<Vec<f64>> {
        if horizon <= 0.0 {
            return Ok(vec![x.sup_norm()]);
        }
        let traj = integrate(&self.sys, t, x, d, t + horizon, &self.cfg.integrator)?;
        if let Status::BlowUp { t_max } = traj.status() {
            return Err(Error::ConstructionInvalid(format!(
                "trajectory from t = {t} under {} blew up after t = {t_max}",
                d.label()
            )));
        }
        traj.window_norms(self.sys.delay_span())
    }

    /// `max_k max{0, ã₁(n_k) - 1/q}·e^{k g}` over the first `len` norms.
    fn weighted(&self, norms: &[f64], q: usize, len: usize) -> f64 {
        let a1 = &self.cfg.a1;
        norms
            .iter()
            .take(len)
            .enumerate()
            .map(|(k, &n)| (a1(n) - 1.0 / q as f64).max(0.0) * (k as f64 * self.grid_step).exp())
            .fold(0.0, f64::max)
    }

    /// `Û_q(t, x)` for every `q` in `qs` over absolute-time signals, with
    /// per-`q` horizons.
    fn sup_over(
        &self,
        t: f64,
        x: &HistorySegment,
        signals: &[DisturbanceSignal],
        qs: &[usize],
        horizons: &[f64],
    ) -> Result<Vec<f64>> {
        let longest = horizons.iter().copied().fold(0.0, f64::max);
        let runs: Vec<Vec<f64>> = signals
            .par_iter()
            .map(|d| self.norms(t, x, d, longest))
            .collect::<Result<_>>()?;
        Ok(qs
            .iter()
            .zip(horizons)
            .map(|(&q, &hz)| {
                let len = (hz / self.grid_step).round() as usize + 1;
                runs.iter().map(|n| self.weighted(n, q, len)).fold(0.0, f64::max)
            })
            .collect())
    }

    fn base_signals(&self, t: f64) -> Vec<DisturbanceSignal> {
        self.family.iter().map(|d| d.delayed(t)).collect()
    }

    /// `Û_q(t, x)`.
    pub fn estimate_uq(&self, q: usize, t: f64, x: &HistorySegment) -> Result<f64> {
        Ok(self.estimate_all(t, x, &[q])?[0])
    }

    /// `Û_q(t, x)` for several `q`, sharing trajectories.
    pub fn estimate_all(&self, t: f64, x: &HistorySegment, qs: &[usize]) -> Result<Vec<f64>> {
        if qs.iter().any(|&q| q == 0) {
            return Err(Error::Parameter("q must be at least 1".into()));
        }
        let norm = x.sup_norm();
        let horizons: Vec<f64> = qs.iter().map(|&q| self.sample_horizon(t, norm, q)).collect();
        self.sup_over(t, x, &self.base_signals(t), qs, &horizons)
    }

    /// Sandwich rows for `q = 1..=q_max`.
    pub fn sandwich(&self, t: f64, x: &HistorySegment) -> Result<Vec<SandwichRow>> {
        let qs: Vec<usize> = (1..=self.cfg.q_max).collect();
        let vals = self.estimate_all(t, x, &qs)?;
        let norm = x.sup_norm();
        let upper = self.a2(self.beta(t) * norm);
        Ok(qs
            .iter()
            .zip(vals)
            .map(|(&q, value)| SandwichRow {
                q,
                lower: ((self.cfg.a1)(norm) - 1.0 / q as f64).max(0.0),
                value,
                upper,
            })
            .collect())
    }

    /// `Û_q(t+h, φ(t+h, t, x; d_head)) ≤ e^{-h} Û_q(t, x)`, with the time-`t`
    /// family containing `d_head` concatenated with every family member.
    pub fn check_decrease(
        &self,
        q: usize,
        t: f64,
        x: &HistorySegment,
        d_head: &DisturbanceSignal,
        h: f64,
        tol: f64,
    ) -> Result<DecreaseReport> {
        let g = self.grid_step;
        let steps = crate::history::grid_multiple(h, g).filter(|&m| m > 0).ok_or(Error::OffGrid {
            what: "decrease step h",
            value: h,
            grid_step: g,
        })?;
        let h = steps as f64 * g;
        let head = integrate(&self.sys, t, x, d_head, t + h, &self.cfg.integrator)?;
        if let Status::BlowUp { t_max } = head.status() {
            return Err(Error::ConstructionInvalid(format!("head trajectory blew up after t = {t_max}")));
        }
        let x1 = head.window(t + h, self.sys.delay_span())?;
        let later_h = self.sample_horizon(t + h, x1.sup_norm(), q);
        let later = self.sup_over(t + h, &x1, &self.base_signals(t + h), &[q], &[later_h])?[0];

        let now_h = self.sample_horizon(t, x.sup_norm(), q).max(h + later_h);
        let mut signals = self.base_signals(t);
        for d in &self.family {
            signals.push(DisturbanceSignal::concat(d_head, t + h, d)?);
        }
        let now = self.sup_over(t, x, &signals, &[q], &[now_h])?[0];
        let slack = later - (-h).exp() * now;
        Ok(DecreaseReport {
            q,
            t,
            h,
            later,
            now,
            slack,
            holds: slack <= tol * (1.0 + now),
        })
    }

    /// `L̃(t, s) = L(t, 2ã₁⁻¹(ã₂(β(t)s)))`.
    fn l_tilde(&self, t: f64, s: f64) -> Result<f64> {
        let l = self
            .sys
            .lipschitz()
            .ok_or_else(|| Error::Config("default weights need the system's Lipschitz modulus L".into()))?;
        Ok(l(t, 2.0 * self.a1_inv(self.a2(self.beta(t) * s))))
    }

    /// `G₁(t, s) = ζ(γ(t) ã₁⁻¹(ã₂(β(t)s)))`.
    pub fn g1(&self, t: f64, s: f64) -> Result<f64> {
        let gr = self
            .sys
            .growth()
            .ok_or_else(|| Error::Config("default weights need the system's growth envelope (ζ, γ)".into()))?;
        Ok((gr.zeta)((gr.gamma)(t) * self.a1_inv(self.a2(self.beta(t) * s))))
    }

    /// `G₃(R, q) = exp(T̃(R, q)(1 + L̃(R + T̃(R, q), 2R)))`.
    pub fn g3(&self, big_r: f64, q: usize) -> Result<f64> {
        let tt = self.horizon(big_r, q);
        Ok((tt * (1.0 + self.l_tilde(big_r + tt, 2.0 * big_r)?)).exp())
    }

    /// Series weights for `q = 1..=q_max`.
    pub fn weights(&self) -> Result<Vec<f64>> {
        let qmax = self.cfg.q_max;
        match &self.cfg.weights {
            WeightMode::Default => (1..=qmax)
                .map(|q| {
                    let qf = q as f64;
                    let den = 1.0
                        + self.g3(qf, q)?
                        + (2.0 + self.g3(qf + 1.0, q)?) * (1.0 + self.g1(qf, qf)?);
                    let w = 0.5f64.powi(q as i32) / den;
                    Ok(if w.is_finite() { w } else { 0.0 })
                })
                .collect(),
            WeightMode::Plain => Ok((1..=qmax).map(|q| 0.5f64.powi(q as i32)).collect()),
            WeightMode::User(w) => {
                if w.len() != qmax || w.iter().any(|v| !(*v >= 0.0)) {
                    return Err(Error::Config(format!(
                        "user weights need {qmax} non-negative entries"
                    )));
                }
                let sum: f64 = w.iter().sum();
                Ok(if sum > 1.0 { w.iter().map(|v| v / sum).collect() } else { w.clone() })
            }
        }
    }

    /// `V(t, x) = Σ w_q Û_q(t, x)` as a functional on `r`-histories.
    pub fn assemble_v(&self) -> Result<AssembledV> {
        let weights = self.weights()?;
        let me = Arc::new(self.clone());
        let w = weights.clone();
        let eval: EvalFn = Arc::new(move |t, x| {
            let qs: Vec<usize> = (1..=w.len()).collect();
            let u = me.estimate_all(t, x, &qs)?;
            Ok(u.iter().zip(&w).map(|(u, w)| u * w).sum())
        });
        let a1 = self.cfg.a1.clone();
        let wl = weights.clone();
        let lower: ScalarFn = Arc::new(move |s| {
            wl.iter()
                .enumerate()
                .map(|(i, w)| w * (a1(s) - 1.0 / (i + 1) as f64).max(0.0))
                .sum()
        });
        let a2 = self.a2.clone();
        let beta = self.beta.clone();
        let functional = Functional::new("converse", self.sys.delay_span(), 0.0, eval)?.with_bounds(Bounds {
            a1: Some(lower.clone()),
            a2: Some(a2),
            beta: Some(beta),
            ..Bounds::default()
        });
        Ok(AssembledV {
            functional,
            weights,
            lower,
        })
    }

    /// Fits `ã₂(s) = κ(c₁s + c₂s²)` to `max_t e^{2t} ã₁(‖φ‖)` and, for
    /// non-uniform systems, a non-decreasing step function `β(t₀)`.
    fn fit_envelope(&self) -> Result<EnvelopeFit> {
        let spec = &self.cfg.fit;
        if spec.norms.is_empty() || spec.t0s.is_empty() || spec.histories == 0 {
            return Err(Error::Config("envelope fit needs norms, t0s and histories".into()));
        }
        let r = self.sys.delay_span();
        let g = self.grid_step;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut starts = Vec::new();
        for &s in &spec.norms {
            for _ in 0..spec.histories {
                starts.push((s, random_fourier_history(&mut rng, r, g, self.sys.state_dim(), 3, s)?));
            }
        }
        let t0s = if self.sys.is_uniform() { &spec.t0s[..1] } else { &spec.t0s[..] };
        let mut per_t0 = Vec::new();
        for &t0 in t0s {
            let t0 = (t0 / g).round() * g;
            let jobs: Vec<(f64, &HistorySegment, DisturbanceSignal)> = starts
                .iter()
                .flat_map(|(s, x)| self.family.iter().map(move |d| (*s, x, d.delayed(t0))))
                .collect();
            let ys: Vec<(f64, f64)> = jobs
                .par_iter()
                .map(|(s, x, d)| {
                    let n = self.norms(t0, x, d, spec.horizon)?;
                    let y = n
                        .iter()
                        .enumerate()
                        .map(|(k, &v)| (2.0 * k as f64 * g).exp() * (self.cfg.a1)(v))
                        .fold(0.0, f64::max);
                    Ok((*s, y))
                })
                .collect::<Result<_>>()?;
            let mut data: Vec<(f64, f64)> = spec.norms.iter().map(|&s| (s, 0.0)).collect();
            for (s, y) in ys {
                if let Some(e) = data.iter_mut().find(|e| e.0 == s) {
                    e.1 = e.1.max(y);
                }
            }
            per_t0.push((t0, data));
        }
        let base = &per_t0[0].1;
        let (mut c1, c2) = fit_quadratic(base);
        if c1 == 0.0 && c2 == 0.0 {
            c1 = 1.0;
        }
        let raw = |s: f64| c1 * s + c2 * s * s;
        let ratio = base
            .iter()
            .filter(|(s, _)| raw(*s) > 0.0)
            .map(|&(s, y)| y / raw(s))
            .fold(1.0, f64::max);
        let kappa = KAPPA * ratio;
        let a2 = |s: f64| kappa * raw(s);
        let mut beta_steps = Vec::new();
        let mut running: f64 = 1.0;
        for (t0, data) in &per_t0 {
            let need = data
                .iter()
                .map(|&(s, y)| if s > 0.0 { invert(&a2, y) / s } else { 1.0 })
                .fold(1.0, f64::max);
            running = running.max(need);
            beta_steps.push((*t0, running));
        }
        let worst_slack = per_t0
            .iter()
            .zip(&beta_steps)
            .flat_map(|((_, data), &(_, b))| data.iter().map(move |&(s, y)| y - a2(b * s)))
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(EnvelopeFit {
            c1,
            c2,
            kappa,
            beta_steps,
            data: base.clone(),
            worst_slack,
        })
    }
}

/// Relative-time family from a spec, seeded deterministically.
pub fn build_family(sys: &RfdeSystem, spec: &FamilySpec, grid_step: f64) -> Result<Vec<DisturbanceSignal>> {
    let bx = sys.disturbance_box();
    if bx.dim() == 0 {
        return Ok(vec![DisturbanceSignal::none()]);
    }
    let mut out = Vec::new();
    for v in bx.vertices()? {
        out.push(DisturbanceSignal::constant(bx.clone(), v)?.with_label("vertex"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for _ in 0..spec.bang_bang {
        let k = rng.gen_range(1..=spec.max_switches.max(1));
        out.push(DisturbanceSignal::random_bang_bang(bx, &mut rng, spec.horizon, grid_step, k)?);
    }
    for _ in 0..spec.random {
        let k = rng.gen_range(0..=spec.max_switches);
        out.push(DisturbanceSignal::random_piecewise_constant(
            bx,
            &mut rng,
            spec.horizon,
            grid_step,
            k,
        )?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{example212, scalar_decay};
    use approx::assert_abs_diff_eq;

    fn decay_cfg() -> ConverseConfig {
        ConverseConfig {
            a2: Some(Arc::new(|s| s * s)),
            beta: Some(Arc::new(|_| 1.0)),
            q_max: 4,
            integrator: IntegratorConfig::with_grid_step(1e-3),
            weights: WeightMode::Plain,
            ..ConverseConfig::default()
        }
    }

    #[test]
    fn horizon_cases() {
        let id = |s: f64| s;
        let one = |_: f64| 1.0;
        assert_eq!(horizon_t(0.5, 1, &id, &one), 0.0);
        assert_abs_diff_eq!(horizon_t(std::f64::consts::E.powi(2), 1, &id, &one), 1.0, epsilon = 1e-14);
        let mut prev = 0.0;
        for i in 0..20 {
            let h = horizon_t(0.5 + i as f64, 3, &id, &one);
            assert!(h >= prev);
            prev = h;
        }
        assert!(horizon_t(5.0, 4, &id, &one) >= horizon_t(5.0, 3, &id, &one));
    }

    #[test]
    fn decay_uq_closed_form() {
        let c = Converse::new(&scalar_decay(), decay_cfg()).unwrap();
        for &x in &[0.0, 0.3, 1.0, -2.5, 4.0] {
            let h = HistorySegment::point(&[x]).unwrap();
            for q in 1..=4 {
                let u = c.estimate_uq(q, 0.7, &h).unwrap();
                assert_abs_diff_eq!(u, (x.abs() - 1.0 / q as f64).max(0.0), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn decay_decrease_and_series() {
        let c = Converse::new(&scalar_decay(), decay_cfg()).unwrap();
        let x = HistorySegment::point(&[2.0]).unwrap();
        for q in 1..=4 {
            let rep = c.check_decrease(q, 0.0, &x, &DisturbanceSignal::none(), 0.05, 1e-9).unwrap();
            assert!(rep.holds, "{rep:?}");
        }
        let cfg = ConverseConfig {
            q_max: 1,
            weights: WeightMode::User(vec![1.0]),
            ..decay_cfg()
        };
        let v = Converse::new(&scalar_decay(), cfg).unwrap().assemble_v().unwrap();
        for &x in &[0.0, 0.5, 1.7, -3.0] {
            let h = HistorySegment::point(&[x]).unwrap();
            assert_abs_diff_eq!(
                v.functional.eval(0.0, &h).unwrap(),
                (x.abs() - 1.0).max(0.0),
                epsilon = 1e-6
            );
        }
    }

    #[test]
    fn q_monotone_and_family_monotone() {
        let sys = example212(1.0, 1.1, 0.4).unwrap();
        let cfg = ConverseConfig {
            a2: Some(Arc::new(|s| 20.0 * s)),
            beta: Some(Arc::new(|_| 1.0)),
            q_max: 3,
            integrator: IntegratorConfig::with_grid_step(0.01),
            family: FamilySpec {
                bang_bang: 2,
                random: 2,
                ..FamilySpec::default()
            },
            ..ConverseConfig::default()
        };
        let c = Converse::new(&sys, cfg.clone()).unwrap();
        let x = HistorySegment::from_fn(0.4, 0.01, 1, |t| vec![1.5 + t]).unwrap();
        let u = c.estimate_all(0.0, &x, &[1, 2, 3]).unwrap();
        assert!(u[0] <= u[1] && u[1] <= u[2]);
        let bigger = Converse::new(
            &sys,
            ConverseConfig {
                family: FamilySpec {
                    bang_bang: 2,
                    random: 6,
                    ..FamilySpec::default()
                },
                ..cfg
            },
        )
        .unwrap();
        let u2 = bigger.estimate_all(0.0, &x, &[1, 2, 3]).unwrap();
        for (a, b) in u.iter().zip(&u2) {
            assert!(b >= a);
        }
        let zero = HistorySegment::constant(0.4, 0.01, &[0.0]).unwrap();
        assert_eq!(c.estimate_all(0.0, &zero, &[1, 2, 3]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn default_weights_need_growth() {
        let sys = scalar_decay().without_lipschitz();
        let c = Converse::new(
            &sys,
            ConverseConfig {
                weights: WeightMode::Default,
                ..decay_cfg()
            },
        )
        .unwrap();
        assert!(matches!(c.weights(), Err(Error::Config(_))));
    }

    #[test]
    fn fitted_envelope_dominates_data() {
        let sys = example212(1.0, 1.1, 0.4).unwrap();
        let cfg = ConverseConfig {
            integrator: IntegratorConfig::with_grid_step(0.02),
            fit: FitSpec {
                histories: 2,
                horizon: 2.0,
                ..FitSpec::default()
            },
            family: FamilySpec {
                bang_bang: 2,
                random: 2,
                ..FamilySpec::default()
            },
            ..ConverseConfig::default()
        };
        let c = Converse::new(&sys, cfg).unwrap();
        let fit = c.fit().unwrap();
        assert!(fit.worst_slack <= 0.0);
        assert!(fit.kappa >= KAPPA);
        assert_eq!(c.beta(3.0), 1.0);
    }

    #[test]
    fn nnls_fallbacks() {
        let (c1, c2) = fit_quadratic(&[(1.0, 2.0), (2.0, 4.0), (3.0, 6.0)]);
        assert_abs_diff_eq!(c1, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c2, 0.0, epsilon = 1e-12);
        let (c1, c2) = fit_quadratic(&[(1.0, 1.0), (2.0, 4.0), (3.0, 9.0)]);
        assert_abs_diff_eq!(c1, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c2, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(invert(&|s: f64| s * s, 9.0), 3.0, epsilon = 1e-12);
    }
}
