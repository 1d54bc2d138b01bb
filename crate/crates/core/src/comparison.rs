//! Scalar comparison dynamics `η̇ = -ρ(η) + μ(t)`, grid checks of the
//! comparison principle, and the λ-perturbed equation `ż = f(t, z) + λ`.

use crate::error::{Error, Result};
use crate::system::ScalarFn;

/// Uniformly sampled scalar solution with cubic Hermite dense output.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarTrajectory {
    t0: f64,
    step: f64,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

impl ScalarTrajectory {
    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.step
    }

    pub fn t_end(&self) -> f64 {
        self.time(self.values.len() - 1)
    }

    /// Dense value, clamped to the computed interval.
    pub fn value_at(&self, t: f64) -> f64 {
        let last = self.values.len() - 1;
        let u = ((t - self.t0) / self.step).clamp(0.0, last as f64);
        if last == 0 {
            return self.values[0];
        }
        let k = (u.floor() as usize).min(last - 1);
        let s = u - k as f64;
        let s2 = s * s;
        let s3 = s2 * s;
        (2.0 * s3 - 3.0 * s2 + 1.0) * self.values[k]
            + (s3 - 2.0 * s2 + s) * self.step * self.slopes[k]
            + (-2.0 * s3 + 3.0 * s2) * self.values[k + 1]
            + (s3 - s2) * self.step * self.slopes[k + 1]
    }
}

/// Classical RK4 for `ẇ = f(t, w)` on a uniform grid. With `clip` the
/// solution is clipped at 0 from below after every step. Leaving `domain`
/// is a [`Error::Domain`] error.
pub fn rk4_scalar(
    f: &dyn Fn(f64, f64) -> f64,
    w0: f64,
    t0: f64,
    t_end: f64,
    step: f64,
    clip: bool,
    domain: (f64, f64),
) -> Result<ScalarTrajectory> {
    if !(step > 0.0) || !(t_end > t0) {
        return Err(Error::Parameter(format!(
            "need step > 0 and t_end > t0, got step {step}, [{t0}, {t_end}]"
        )));
    }
    if !(w0 >= domain.0 && w0 <= domain.1) {
        return Err(Error::Domain { t: t0 });
    }
    let steps = ((t_end - t0) / step - 1e-9).ceil().max(1.0) as usize;
    let mut values = Vec::with_capacity(steps + 1);
    let mut slopes = Vec::with_capacity(steps + 1);
    let mut w = w0;
    values.push(w);
    for k in 0..steps {
        let t = t0 + k as f64 * step;
        let k1 = f(t, w);
        let k2 = f(t + 0.5 * step, w + 0.5 * step * k1);
        let k3 = f(t + 0.5 * step, w + 0.5 * step * k2);
        let k4 = f(t + step, w + step * k3);
        slopes.push(k1);
        w += step / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if clip && w < 0.0 {
            w = 0.0;
        }
        let t_next = t0 + (k + 1) as f64 * step;
        if !w.is_finite() || w < domain.0 || w > domain.1 {
            return Err(Error::Domain { t: t_next });
        }
        values.push(w);
    }
    slopes.push(f(t0 + steps as f64 * step, w));
    Ok(ScalarTrajectory {
        t0,
        step,
        values,
        slopes,
    })
}

/// `η̇ = -ρ(η) + μ(t)`, `η(t0) = η0`.
#[derive(Clone)]
pub struct ComparisonProblem {
    pub rho: ScalarFn,
    pub mu: ScalarFn,
    pub eta0: f64,
}

impl ComparisonProblem {
    pub fn new(
        rho: impl Fn(f64) -> f64 + Send + Sync + 'static,
        mu: impl Fn(f64) -> f64 + Send + Sync + 'static,
        eta0: f64,
    ) -> Self {
        Self {
            rho: std::sync::Arc::new(rho),
            mu: std::sync::Arc::new(mu),
            eta0,
        }
    }

    /// Sampled checks of `ρ(0) = 0`, `ρ > 0` on `(0, s_max]`, `μ >= 0`.
    pub fn validate(&self, s_max: f64, t0: f64, t_end: f64) -> Result<()> {
        if (self.rho)(0.0) != 0.0 {
            return Err(Error::Parameter("ρ(0) must be 0".into()));
        }
        for k in 1..=64 {
            let s = s_max * k as f64 / 64.0;
            if !((self.rho)(s) > 0.0) {
                return Err(Error::Parameter(format!("ρ({s}) is not positive")));
            }
            let t = t0 + (t_end - t0) * k as f64 / 64.0;
            if !((self.mu)(t) >= 0.0) {
                return Err(Error::Parameter(format!("μ({t}) is negative")));
            }
        }
        if !(self.eta0 >= 0.0) {
            return Err(Error::Parameter("η0 must be >= 0".into()));
        }
        Ok(())
    }
}

/// Solves the comparison equation with clipping at 0.
pub fn solve_eta(p: &ComparisonProblem, t0: f64, t_end: f64, step: f64) -> Result<ScalarTrajectory> {
    let rho = p.rho.clone();
    let mu = p.mu.clone();
    let f = move |t: f64, w: f64| -rho(w.max(0.0)) + mu(t);
    rk4_scalar(&f, p.eta0, t0, t_end, step, true, (0.0, f64::INFINITY))
}

/// Which hypothesis of the comparison lemma the caller relies on; recorded
/// in the report, not verified symbolically.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DominationMode {
    /// `f(t, ·)` non-decreasing.
    Monotone,
    /// `f(t, w) <= φ(t)` for a locally integrable `φ`.
    Bounded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DominationReport {
    pub mode: DominationMode,
    pub holds: bool,
    /// First grid time with `v > w + tol`.
    pub first_violation: Option<f64>,
    /// Largest `v - w - tol` over the grid (negative when dominated).
    pub worst_slack: f64,
    pub checked: usize,
    /// Set when sampled values contradict the chosen mode.
    pub warning: Option<String>,
}

/// Checks `v(t) <= w(t)` at the grid times `t0 + k·step` where `w` solves
/// `ẇ = f(t, w)`, `w(t0) = w0`. The band is `rel_tol·(1 + |w|)`.
///
/// `v` is given by its grid samples (the first at `t0`). A start value above
/// `w0` is reported as a violation at `t0`.
#[allow(clippy::too_many_arguments)]
pub fn check_dominated(
    v: &[f64],
    t0: f64,
    step: f64,
    f: &dyn Fn(f64, f64) -> f64,
    w0: f64,
    mode: DominationMode,
    domain: (f64, f64),
    rel_tol: f64,
) -> Result<DominationReport> {
    if v.len() < 2 {
        return Err(Error::Parameter("need at least two samples of v".into()));
    }
    let t_end = t0 + (v.len() - 1) as f64 * step;
    let w = rk4_scalar(f, w0, t0, t_end, step, false, domain)?;
    let mut report = DominationReport {
        mode,
        holds: true,
        first_violation: None,
        worst_slack: f64::NEG_INFINITY,
        checked: 0,
        warning: None,
    };
    for (k, vk) in v.iter().enumerate() {
        let wk = w.values()[k];
        let slack = vk - wk - rel_tol * (1.0 + wk.abs());
        report.worst_slack = report.worst_slack.max(slack);
        report.checked += 1;
        if slack > 0.0 && report.first_violation.is_none() {
            report.holds = false;
            report.first_violation = Some(w.time(k));
        }
    }
    if mode == DominationMode::Monotone {
        'outer: for k in (0..v.len()).step_by((v.len() / 16).max(1)) {
            let t = w.time(k);
            let base = w.values()[k];
            let probes = [base - 1.0, base - 0.1, base, base + 0.1, base + 1.0];
            let probes: Vec<f64> =
                probes.iter().copied().filter(|p| *p >= domain.0 && *p <= domain.1).collect();
            for pair in probes.windows(2) {
                if f(t, pair[1]) < f(t, pair[0]) {
                    report.warning = Some(format!(
                        "f(t, ·) is not non-decreasing near t = {t}; the comparison lemma's monotone form does not apply"
                    ));
                    break 'outer;
                }
            }
        }
    }
    Ok(report)
}

/// Solves `ż = f(t, z) + λ`.
pub fn solve_perturbed(
    f: &dyn Fn(f64, f64) -> f64,
    w0: f64,
    lambda: f64,
    t0: f64,
    t_end: f64,
    step: f64,
) -> Result<ScalarTrajectory> {
    if !(lambda >= 0.0) {
        return Err(Error::Parameter(format!("λ must be >= 0, got {lambda}")));
    }
    let g = |t: f64, z: f64| f(t, z) + lambda;
    rk4_scalar(&g, w0, t0, t_end, step, false, (f64::NEG_INFINITY, f64::INFINITY))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn eta_linear_closed_forms() {
        let p = ComparisonProblem::new(|s| s, |_| 0.0, 0.0);
        let e = solve_eta(&p, 0.0, 5.0, 1e-2).unwrap();
        assert!(e.values().iter().all(|v| *v == 0.0));

        let p = ComparisonProblem::new(|s| s, |_| 0.0, 2.0);
        let e = solve_eta(&p, 1.0, 6.0, 1e-2).unwrap();
        for k in 0..e.len() {
            let t = e.time(k);
            assert_abs_diff_eq!(e.values()[k], 2.0 * (-(t - 1.0)).exp(), epsilon = 1e-6);
        }

        // (e^t η)' = e^{-t}  ⇒  η = e^{-t}(η0 + 1 - e^{-t}) from t0 = 0
        let p = ComparisonProblem::new(|s| s, |t| (-2.0 * t).exp(), 0.5);
        p.validate(10.0, 0.0, 5.0).unwrap();
        let e = solve_eta(&p, 0.0, 5.0, 1e-2).unwrap();
        for k in 0..e.len() {
            let t = e.time(k);
            let exact = (-t).exp() * (0.5 + 1.0 - (-t).exp());
            assert_abs_diff_eq!(e.values()[k], exact, epsilon = 1e-6);
        }
        assert_abs_diff_eq!(e.value_at(2.345), (-2.345f64).exp() * (1.5 - (-2.345f64).exp()), epsilon = 1e-6);
    }

    #[test]
    fn domination_cases() {
        let zero = |_: f64, _: f64| 0.0;
        let v = vec![1.0; 50];
        let r = check_dominated(&v, 0.0, 0.1, &zero, 1.0, DominationMode::Monotone, (f64::NEG_INFINITY, f64::INFINITY), 1e-6).unwrap();
        assert!(r.holds);

        let decay = |_: f64, w: f64| -w;
        let w = rk4_scalar(&decay, 1.0, 0.0, 5.0, 0.01, false, (f64::NEG_INFINITY, f64::INFINITY)).unwrap();
        let bumped: Vec<f64> = w.values().iter().map(|x| x + 0.1).collect();
        let r = check_dominated(&bumped, 0.0, 0.01, &decay, 1.0, DominationMode::Bounded, (f64::NEG_INFINITY, f64::INFINITY), 1e-6).unwrap();
        assert!(!r.holds);
        assert_eq!(r.first_violation, Some(0.0));

        let grow = |_: f64, w: f64| w;
        let e = check_dominated(&v, 0.0, 0.1, &grow, 1.0, DominationMode::Monotone, (0.0, 2.0), 1e-6);
        assert!(matches!(e, Err(Error::Domain { .. })));
    }

    #[test]
    fn perturbed() {
        let zero = |_: f64, _: f64| 0.0;
        let z = solve_perturbed(&zero, 1.0, 0.5, 2.0, 4.0, 0.01).unwrap();
        for k in 0..z.len() {
            assert_abs_diff_eq!(z.values()[k], 1.0 + 0.5 * (z.time(k) - 2.0), epsilon = 1e-12);
        }
        let decay = |_: f64, w: f64| -w;
        let w = solve_perturbed(&decay, 1.0, 0.0, 0.0, 5.0, 0.01).unwrap();
        let w2 = rk4_scalar(&decay, 1.0, 0.0, 5.0, 0.01, false, (f64::NEG_INFINITY, f64::INFINITY)).unwrap();
        assert_eq!(w, w2);
        let gap = |lam: f64| {
            let z = solve_perturbed(&decay, 1.0, lam, 0.0, 5.0, 0.01).unwrap();
            z.values().iter().zip(w.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let (g1, g2) = (gap(0.1), gap(0.05));
        assert_abs_diff_eq!(g1 / g2, 2.0, epsilon = 1e-6);
        assert!(g1 <= 0.1 * (1.0 - (-5.0f64).exp()) + 1e-9);
    }

    #[test]
    fn monotone_flow() {
        let rho = |s: f64| s + s * s * s;
        let a = ComparisonProblem::new(rho, |t| 0.3 * (-t).exp(), 0.4);
        let b = ComparisonProblem::new(rho, |t| 0.3 * (-t).exp(), 0.9);
        let ea = solve_eta(&a, 0.0, 10.0, 1e-2).unwrap();
        let eb = solve_eta(&b, 0.0, 10.0, 1e-2).unwrap();
        assert!(ea.values().iter().zip(eb.values()).all(|(x, y)| x <= y));
        assert!(eb.values().last().unwrap() < &1e-2);
    }
}
