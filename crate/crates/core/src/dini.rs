//! Numerical Dini derivatives of functionals: the directional derivative
//! `V⁰(t, x; v)` through the ray splice `E_h`, and `D⁺V` along stored
//! trajectories.
//!
//! Each level `h = g·2⁻ᵏ` works on the history resampled at step `h/2`, so
//! the shift is two cells. A two-cell shift keeps composite Simpson weights
//! aligned and the difference quotient consistent.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::functionals::Functional;
use crate::history::HistorySegment;
use crate::integrator::Trajectory;

/// Coarsest `h` for point histories (`r + τ = 0`).
pub const POINT_H0: f64 = 1e-6;
/// Number of `h` levels.
pub const LEVELS: usize = 6;
/// Number of trailing quotients aggregated by [`Aggregate::TailMax`].
pub const TAIL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    /// Maximum of the last three quotients; a conservative limsup estimate.
    TailMax,
    /// First-order Richardson extrapolation of the last two quotients.
    Richardson,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiniEstimate {
    pub value: f64,
    pub rule: Aggregate,
    pub h: Vec<f64>,
    pub quotients: Vec<f64>,
    /// `2q_K - q_{K-1}`, reported alongside the tail maximum.
    pub richardson: f64,
    pub extrapolated: bool,
    pub warning: Option<String>,
}

impl DiniEstimate {
    fn from_quotients(h: Vec<f64>, quotients: Vec<f64>, rule: Aggregate) -> Self {
        let k = quotients.len();
        let tail_max = quotients[k.saturating_sub(TAIL)..]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let richardson = if k >= 2 {
            2.0 * quotients[k - 1] - quotients[k - 2]
        } else {
            quotients[k - 1]
        };
        let value = match rule {
            Aggregate::TailMax => tail_max,
            Aggregate::Richardson => richardson,
        };
        Self {
            value,
            rule,
            h,
            quotients,
            richardson,
            extrapolated: rule == Aggregate::Richardson,
            warning: None,
        }
    }

    /// Re-aggregates the same quotients under another rule.
    pub fn with_rule(&self, rule: Aggregate) -> Self {
        let mut out = Self::from_quotients(self.h.clone(), self.quotients.clone(), rule);
        out.warning = self.warning.clone();
        out
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Model(format!("non-finite functional value in {what}")))
    }
}

/// `V⁰(t, x; v)` with the inner perturbation `y` collapsed to zero, valid for
/// locally Lipschitz functionals.
pub fn estimate_v0(
    v: &Functional,
    t: f64,
    x: &HistorySegment,
    dir: &[f64],
    rule: Aggregate,
) -> Result<DiniEstimate> {
    if (x.span() - v.window_span()).abs() > 1e-9 * v.window_span().max(1.0) {
        return Err(Error::InvalidHistory(format!(
            "functional {} needs span {}, got {}",
            v.name(),
            v.window_span(),
            x.span()
        )));
    }
    // A point history carries no meaningful grid.
    let g = if x.cells() == 0 { POINT_H0 } else { x.grid_step() };
    let mut hs = Vec::with_capacity(LEVELS);
    let mut qs = Vec::with_capacity(LEVELS);
    for k in 0..LEVELS {
        let h = g / (1u64 << k) as f64;
        let fine = x.refine(1 << (k + 1));
        let base = finite(v.eval(t, &fine)?, "estimate_v0")?;
        let moved = finite(v.eval(t + h, &fine.apply_eh(dir, h)?)?, "estimate_v0")?;
        hs.push(h);
        qs.push((moved - base) / h);
    }
    let mut est = DiniEstimate::from_quotients(hs, qs, rule);
    if !v.is_locally_lipschitz() {
        est.warning = Some(format!(
            "{} is not declared locally Lipschitz; the y = 0 reduction may underestimate V⁰",
            v.name()
        ));
    }
    Ok(est)
}

/// Nodes `[start, start + cells]` of `w` as a history without slopes.
fn slice(w: &HistorySegment, start: usize, cells: usize) -> Result<HistorySegment> {
    let n = w.dim();
    let s = &w.samples()[start * n..(start + cells + 1) * n];
    HistorySegment::from_flat(n, w.grid_step(), s.to_vec())
}

/// Forward Dini derivative of `s ↦ V(s, T_span(s)x)` at the grid time `t`,
/// where `span` is the functional's window.
pub fn dplus_along(
    v: &Functional,
    traj: &Trajectory,
    t: f64,
    rule: Aggregate,
) -> Result<DiniEstimate> {
    let g = traj.grid_step();
    let m = traj.step_index(t)?;
    if m + 1 > traj.steps() {
        return Err(Error::OutOfRange {
            theta: t + g,
            span: traj.t_last(),
        });
    }
    let span = v.window_span();
    let wide = traj.window(t + g, span + g)?;
    let mut hs = Vec::with_capacity(LEVELS);
    let mut qs = Vec::with_capacity(LEVELS);
    for k in 0..LEVELS {
        let factor = 1usize << (k + 1);
        let h = g / (1u64 << k) as f64;
        let fine = wide.refine(factor);
        let cells = fine.cells() - factor;
        let now = slice(&fine, 0, cells)?;
        let later = slice(&fine, 2, cells)?;
        let a = finite(v.eval(t, &now)?, "dplus_along")?;
        let b = finite(v.eval(t + h, &later)?, "dplus_along")?;
        hs.push(h);
        qs.push((b - a) / h);
    }
    Ok(DiniEstimate::from_quotients(hs, qs, rule))
}

/// `V⁰(t, T(t)x; f(t, T_r(t)x, d(t)))` along a trajectory, using the
/// stored right derivative as the direction. Prefers the closed form.
pub fn v0_along(v: &Functional, traj: &Trajectory, t: f64) -> Result<f64> {
    let m = traj.step_index(t)?;
    let w = traj.window(t, v.window_span())?;
    let dir = traj.right_derivative(m).to_vec();
    match v.derivative(t, &w, &dir)? {
        Some(d) => Ok(d),
        None => Ok(estimate_v0(v, t, &w, &dir, Aggregate::TailMax)?.value),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::{half_square, v212, Functional};
    use crate::integrator::{integrate, IntegratorConfig};
    use crate::signals::DisturbanceSignal;
    use crate::system::{example212, scalar_decay};
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    #[test]
    fn half_square_point() {
        let v = half_square(0.0).unwrap();
        let x = HistorySegment::point(&[2.0]).unwrap();
        let e = estimate_v0(&v, 0.0, &x, &[-3.0], Aggregate::TailMax).unwrap();
        assert_abs_diff_eq!(e.value, -6.0, epsilon = 1e-6);
        // roundoff at h ~ 3e-8
        assert_abs_diff_eq!(e.richardson, -6.0, epsilon = 1e-7);
    }

    #[test]
    fn half_square_on_window() {
        let v = half_square(1.0).unwrap();
        let x = HistorySegment::from_fn(1.0, 1e-3, 1, |t| vec![2.0 + t]).unwrap();
        let e = estimate_v0(&v, 0.0, &x, &[-3.0], Aggregate::TailMax).unwrap();
        // quotients are x0 v + h v²/2, exactly linear in h
        assert_abs_diff_eq!(e.value, -6.0, epsilon = 1e-3);
        assert_abs_diff_eq!(e.richardson, -6.0, epsilon = 1e-9);
    }

    #[test]
    fn constant_functional_zero() {
        let v = Functional::new("one", 0.5, 0.0, Arc::new(|_, _| Ok(1.0))).unwrap();
        let x = HistorySegment::from_fn(0.5, 0.01, 1, |t| vec![t.sin()]).unwrap();
        let e = estimate_v0(&v, 0.0, &x, &[4.0], Aggregate::TailMax).unwrap();
        assert_eq!(e.value, 0.0);
    }

    #[test]
    fn v212_against_closed_form() {
        let v = v212(1.0, 1.1, 0.4, 0.2).unwrap();
        let x = HistorySegment::from_fn_with_derivative(
            0.8,
            0.004,
            1,
            |t| vec![(3.0 * t).cos() + 0.3 * t],
            |t| vec![-3.0 * (3.0 * t).sin() + 0.3],
        )
        .unwrap();
        let xr = x.interpolate(-0.4).unwrap()[0];
        let dir = [-1.05 * xr];
        let exact = v.derivative(0.0, &x, &dir).unwrap().unwrap();
        let e = estimate_v0(&v, 0.0, &x, &dir, Aggregate::TailMax).unwrap();
        assert!((e.richardson - exact).abs() <= 1e-3 * exact.abs().max(1e-3));
    }

    #[test]
    fn dplus_decay_oracle() {
        let sys = scalar_decay();
        let x0 = HistorySegment::point(&[1.0]).unwrap();
        let traj = integrate(
            &sys,
            0.0,
            &x0,
            &DisturbanceSignal::none(),
            0.01,
            &IntegratorConfig::with_grid_step(1e-4),
        )
        .unwrap();
        let v = half_square(0.0).unwrap();
        let e = dplus_along(&v, &traj, 0.0, Aggregate::TailMax).unwrap();
        assert_abs_diff_eq!(e.value, -1.0, epsilon = 1e-4);
    }

    #[test]
    fn equilibrium_zero_and_lemma() {
        let sys = example212(1.0, 1.1, 0.4).unwrap();
        let v = v212(1.0, 1.1, 0.4, 0.2).unwrap();
        let cfg = IntegratorConfig::with_grid_step(0.004);
        let d = DisturbanceSignal::constant(sys.disturbance_box().clone(), vec![1.05]).unwrap();
        let zero = HistorySegment::constant(0.4, 0.004, &[0.0]).unwrap();
        let tz = integrate(&sys, 0.0, &zero, &d, 1.0, &cfg).unwrap();
        assert_eq!(dplus_along(&v, &tz, 0.5, Aggregate::TailMax).unwrap().value, 0.0);

        let x0 = HistorySegment::from_fn(0.4, 0.004, 1, |t| vec![1.0 + t]).unwrap();
        let tr = integrate(&sys, 0.0, &x0, &d, 2.0, &cfg).unwrap();
        for &t in &[0.4, 0.8, 1.2, 1.6] {
            let dp = dplus_along(&v, &tr, t, Aggregate::TailMax).unwrap();
            let v0 = v0_along(&v, &tr, t).unwrap();
            assert!(dp.richardson <= v0 + 1e-3 * (1.0 + v0.abs()), "{t}: {} > {v0}", dp.richardson);
            assert!((dp.richardson - v0).abs() <= 1e-3 * (1.0 + v0.abs()));
        }
        assert!(dplus_along(&v, &tr, 2.0, Aggregate::TailMax).is_err());
    }
}
