//! Lyapunov–Krasovskii functionals `V(t, x)` on histories of span `r + τ`,
//! with optional closed-form directional derivatives and bounding functions.
//!
//! Integral terms use composite Simpson quadrature on the history grid.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::history::{grid_multiple, simpson, HistorySegment};
use crate::system::ScalarFn;

pub type EvalFn = Arc<dyn Fn(f64, &HistorySegment) -> Result<f64> + Send + Sync>;
/// Closed-form `V⁰(t, x; v)`.
pub type DerivativeFn = Arc<dyn Fn(f64, &HistorySegment, &[f64]) -> f64 + Send + Sync>;

/// Bounding functions used by the theorem-condition suites. Which ones are
/// required depends on the checked form.
#[derive(Clone, Default)]
pub struct Bounds {
    pub a1: Option<ScalarFn>,
    pub a2: Option<ScalarFn>,
    /// `β(t)` of the sandwich with full-history lower bound, or `β₁(t)` of
    /// the point-value form.
    pub beta: Option<ScalarFn>,
    /// Growth rate: the constant `β` of the uniform form or `β₂(t)`.
    pub growth: Option<ScalarFn>,
    pub r_const: f64,
    pub beta3: Option<ScalarFn>,
    pub beta4: Option<ScalarFn>,
    pub rho: Option<ScalarFn>,
    pub mu: Option<ScalarFn>,
    /// `M(R)`.
    pub lipschitz: Option<ScalarFn>,
}

fn arc(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Option<ScalarFn> {
    Some(Arc::new(f))
}

/// A functional `V : ℝ⁺ × C⁰([-(r+τ), 0]) → ℝ⁺`.
#[derive(Clone)]
pub struct Functional {
    name: String,
    window_span: f64,
    tau: f64,
    eval: EvalFn,
    derivative: Option<DerivativeFn>,
    bounds: Bounds,
    locally_lipschitz: bool,
}

impl fmt::Debug for Functional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Functional")
            .field("name", &self.name)
            .field("window_span", &self.window_span)
            .field("tau", &self.tau)
            .field("derivative", &self.derivative.is_some())
            .field("locally_lipschitz", &self.locally_lipschitz)
            .finish()
    }
}

impl Functional {
    pub fn new(name: impl Into<String>, window_span: f64, tau: f64, eval: EvalFn) -> Result<Self> {
        if !(window_span >= 0.0) || !(tau >= 0.0) || tau > window_span + 1e-12 {
            return Err(Error::Parameter(format!(
                "need 0 <= τ <= window span, got τ = {tau}, span = {window_span}"
            )));
        }
        Ok(Self {
            name: name.into(),
            window_span,
            tau,
            eval,
            derivative: None,
            bounds: Bounds::default(),
            locally_lipschitz: true,
        })
    }

    pub fn with_derivative(mut self, d: DerivativeFn) -> Self {
        self.derivative = Some(d);
        self
    }

    pub fn with_bounds(mut self, b: Bounds) -> Self {
        self.bounds = b;
        self
    }

    /// Declares that the functional is not known to be locally Lipschitz;
    /// numerical `V⁰` estimates then carry a warning.
    pub fn with_locally_lipschitz(mut self, yes: bool) -> Self {
        self.locally_lipschitz = yes;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn window_span(&self) -> f64 {
        self.window_span
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn is_locally_lipschitz(&self) -> bool {
        self.locally_lipschitz
    }

    pub fn has_derivative(&self) -> bool {
        self.derivative.is_some()
    }

    fn check_span(&self, x: &HistorySegment) -> Result<()> {
        if (x.span() - self.window_span).abs() > 1e-9 * self.window_span.max(1.0) {
            return Err(Error::InvalidHistory(format!(
                "functional {} needs span {}, got {}",
                self.name,
                self.window_span,
                x.span()
            )));
        }
        Ok(())
    }

    /// `V(t, x)`.
    pub fn eval(&self, t: f64, x: &HistorySegment) -> Result<f64> {
        self.check_span(x)?;
        let v = (self.eval)(t, x)?;
        if !v.is_finite() {
            return Err(Error::Model(format!("{} is not finite at t = {t}", self.name)));
        }
        Ok(v)
    }

    /// Closed-form `V⁰(t, x; v)` when available.
    pub fn derivative(&self, t: f64, x: &HistorySegment, v: &[f64]) -> Result<Option<f64>> {
        self.check_span(x)?;
        Ok(self.derivative.as_ref().map(|d| d(t, x, v)))
    }
}

/// `∫_{-len}^0 g(x(θ)) dθ` over the trailing nodes of `x`.
fn tail_integral(x: &HistorySegment, len: f64, g: impl Fn(&[f64]) -> f64) -> Result<f64> {
    if len == 0.0 {
        return Ok(0.0);
    }
    let cells = grid_multiple(len, x.grid_step()).ok_or(Error::OffGrid {
        what: "integration length",
        value: len,
        grid_step: x.grid_step(),
    })?;
    let start = x.cells() - cells;
    let vals: Vec<f64> = (start..x.len()).map(|k| g(x.node(k))).collect();
    Ok(simpson(&vals, x.grid_step()))
}

/// `∫_{-len}^0 w(θ) g(x(θ)) dθ`.
fn weighted_tail_integral(
    x: &HistorySegment,
    len: f64,
    w: impl Fn(f64) -> f64,
    g: impl Fn(&[f64]) -> f64,
) -> Result<f64> {
    if len == 0.0 {
        return Ok(0.0);
    }
    let cells = grid_multiple(len, x.grid_step()).ok_or(Error::OffGrid {
        what: "integration length",
        value: len,
        grid_step: x.grid_step(),
    })?;
    let start = x.cells() - cells;
    let vals: Vec<f64> = (start..x.len()).map(|k| w(x.theta(k)) * g(x.node(k))).collect();
    Ok(simpson(&vals, x.grid_step()))
}

/// Constants of the scalar delay functional.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct V212Constants {
    pub a: f64,
    pub b: f64,
    pub r: f64,
    pub c: f64,
    /// `(a - c)(1 - 2cr) - 2b³r²`
    pub k1: f64,
    /// `b³r + c(a - c)`
    pub k2: f64,
    /// `½(1 + 2r(a - c))`
    pub k: f64,
    /// `a - c + b²/k1`
    pub beta: f64,
}

impl V212Constants {
    pub fn new(a: f64, b: f64, r: f64, c: f64) -> Self {
        let k1 = margin(a, b, r, c);
        let k2 = b.powi(3) * r + c * (a - c);
        Self {
            a,
            b,
            r,
            c,
            k1,
            k2,
            k: 0.5 * (1.0 + 2.0 * r * (a - c)),
            beta: a - c + b * b / k1,
        }
    }
}

/// `(a - c)(1 - 2cr) - 2b³r²`.
pub fn margin(a: f64, b: f64, r: f64, c: f64) -> f64 {
    (a - c) * (1.0 - 2.0 * c * r) - 2.0 * b.powi(3) * r * r
}

/// A decay rate `c ∈ (0, a)` with positive margin, chosen to maximize
/// `c · margin(c)`. `None` when `2b³r² >= a`.
pub fn find_c(a: f64, b: f64, r: f64) -> Option<f64> {
    if !(a > 0.0) || !(2.0 * b.powi(3) * r * r < a) {
        return None;
    }
    // margin is a convex quadratic in c, positive at 0: bisect its first root.
    let (mut lo, mut hi) = (0.0, a);
    if margin(a, b, r, a) < 0.0 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if margin(a, b, r, mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    let root = if margin(a, b, r, a) < 0.0 { lo } else { a };
    let obj = |c: f64| c * margin(a, b, r, c);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let (mut x0, mut x1) = (0.0, root);
    let mut p = x1 - phi * (x1 - x0);
    let mut q = x0 + phi * (x1 - x0);
    let (mut fp, mut fq) = (obj(p), obj(q));
    for _ in 0..200 {
        if fp < fq {
            x0 = p;
            p = q;
            fp = fq;
            q = x0 + phi * (x1 - x0);
            fq = obj(q);
        } else {
            x1 = q;
            q = p;
            fq = fp;
            p = x1 - phi * (x1 - x0);
            fp = obj(p);
        }
    }
    let c = 0.5 * (x0 + x1);
    (c > 0.0 && c < a && margin(a, b, r, c) > 0.0).then_some(c)
}

/// The scalar delay functional
/// `½x(0)² + ½k1 ∫_{-r}^0 x² + ½k2 ∫_{-2r}^0 ∫_s^0 x²(l) dl ds`
/// on histories of span `2r`; the double integral is evaluated as
/// `∫_{-2r}^0 (l + 2r) x²(l) dl`.
pub fn v212(a: f64, b: f64, r: f64, c: f64) -> Result<Functional> {
    if !(c > 0.0 && c < a) || !(margin(a, b, r, c) > 0.0) {
        return Err(Error::Parameter(format!(
            "c = {c} is infeasible for (a, b, r) = ({a}, {b}, {r})"
        )));
    }
    v212_unchecked(a, b, r, c)
}

/// [`v212`] without the feasibility check, for falsification experiments.
pub fn v212_unchecked(a: f64, b: f64, r: f64, c: f64) -> Result<Functional> {
    if !(r > 0.0) {
        return Err(Error::Parameter("the delay functional needs r > 0".into()));
    }
    let k = V212Constants::new(a, b, r, c);
    let eval: EvalFn = Arc::new(move |_, x| {
        let x0 = x.current()[0];
        let i1 = tail_integral(x, r, |v| v[0] * v[0])?;
        let i2 = weighted_tail_integral(x, 2.0 * r, |l| l + 2.0 * r, |v| v[0] * v[0])?;
        Ok(0.5 * x0 * x0 + 0.5 * k.k1 * i1 + 0.5 * k.k2 * i2)
    });
    let deriv: DerivativeFn = Arc::new(move |_, x, v| {
        let x0 = x.current()[0];
        let xr = x.interpolate(-r).map(|p| p[0]).unwrap_or(0.0);
        let full = tail_integral(x, 2.0 * r, |p| p[0] * p[0]).unwrap_or(f64::NAN);
        x0 * v[0] + 0.5 * k.k1 * (x0 * x0 - xr * xr) + 0.5 * k.k2 * (2.0 * r * x0 * x0 - full)
    });
    let lip = 1.0 + k.k1 * r + 2.0 * k.k2 * r * r;
    let bounds = Bounds {
        a1: arc(|s| 0.5 * s * s),
        a2: arc(move |s| k.k * s * s),
        beta: arc(|_| 1.0),
        growth: arc(move |_| k.beta),
        rho: arc(move |s| c * s),
        mu: arc(|_| 0.0),
        beta4: arc(|_| 1.0),
        lipschitz: arc(move |big_r| lip * big_r),
        ..Bounds::default()
    };
    Ok(Functional::new("V212", 2.0 * r, r, eval)?
        .with_derivative(deriv)
        .with_bounds(bounds))
}

/// The planar time-varying functional
/// `½x(0)² + ½e^{2t}x(0)⁴ + ∫_{-1}^0 (x² + x⁴) + ½y(0)²` on histories of
/// span 6.
pub fn v213() -> Functional {
    let eval: EvalFn = Arc::new(|t, h| {
        let p = h.current();
        let (x0, y0) = (p[0], p[1]);
        let i = tail_integral(h, 1.0, |v| v[0] * v[0] + v[0].powi(4))?;
        Ok(0.5 * x0 * x0 + 0.5 * (2.0 * t).exp() * x0.powi(4) + i + 0.5 * y0 * y0)
    });
    let deriv: DerivativeFn = Arc::new(|t, h, v| {
        let p = h.current();
        let (x0, y0) = (p[0], p[1]);
        let x1 = h.interpolate(-1.0).map(|q| q[0]).unwrap_or(0.0);
        let e2 = (2.0 * t).exp();
        x0 * v[0] + e2 * x0.powi(4) + 2.0 * e2 * x0.powi(3) * v[0] + x0 * x0 + x0.powi(4)
            - x1 * x1
            - x1.powi(4)
            + y0 * v[1]
    });
    let bounds = Bounds {
        a1: arc(|s| 0.5 * s * s),
        a2: arc(|s| 2.0 * s * s + 4.0 * s.powi(4)),
        beta: arc(|t| t.exp()),
        growth: arc(|t| 12.0 * t.exp()),
        r_const: 0.0,
        beta3: arc(|_| 1.0),
        beta4: arc(|_| 2.0),
        rho: arc(|s| s),
        mu: arc(|_| 0.0),
        lipschitz: arc(|r| 3.0 * r + 4.0 * r.powi(3) + 2.0 * (2.0 * r).exp() * r.powi(3)),
    };
    Functional::new("V213", 6.0, 5.0, eval)
        .expect("valid functional")
        .with_derivative(deriv)
        .with_bounds(bounds)
}

/// `½|x(0)|²` on histories of the given span.
pub fn half_square(window_span: f64) -> Result<Functional> {
    let eval: EvalFn = Arc::new(|_, x| Ok(0.5 * x.current().iter().map(|v| v * v).sum::<f64>()));
    let deriv: DerivativeFn =
        Arc::new(|_, x, v| x.current().iter().zip(v).map(|(a, b)| a * b).sum());
    Ok(Functional::new("half_square", window_span, 0.0, eval)?
        .with_derivative(deriv)
        .with_bounds(Bounds {
            a1: arc(|s| 0.5 * s * s),
            a2: arc(|s| 0.5 * s * s),
            beta: arc(|_| 1.0),
            lipschitz: arc(|r| r),
            ..Bounds::default()
        }))
}

/// Built-in functional names with a one-line description.
pub fn builtin_functionals() -> Vec<(&'static str, &'static str)> {
    vec![
        ("V212", "scalar delay functional; params a, b, r, optional c (default: find_c)"),
        ("V213", "planar time-varying functional on span 6"),
        ("half_square", "½|x(0)|²; param window"),
    ]
}

/// Resolves a built-in functional by name.
pub fn builtin_functional(name: &str, params: &serde_json::Value) -> Result<Functional> {
    let num = |key: &str, default: Option<f64>| -> Result<f64> {
        match params.get(key) {
            Some(v) => v
                .as_f64()
                .ok_or_else(|| Error::Config(format!("parameter {key} must be a number"))),
            None => default.ok_or_else(|| Error::Config(format!("missing parameter {key}"))),
        }
    };
    match name {
        "V212" => {
            let (a, b, r) = (num("a", Some(1.0))?, num("b", Some(1.1))?, num("r", Some(0.4))?);
            let c = match params.get("c") {
                Some(_) => num("c", None)?,
                None => find_c(a, b, r).ok_or_else(|| {
                    Error::Config(format!("no feasible c for (a, b, r) = ({a}, {b}, {r})"))
                })?,
            };
            if params.get("unchecked").and_then(|v| v.as_bool()).unwrap_or(false) {
                v212_unchecked(a, b, r, c)
            } else {
                v212(a, b, r, c)
            }
        }
        "V213" => Ok(v213()),
        "half_square" => half_square(num("window", Some(0.0))?),
        other => Err(Error::Config(format!("unknown functional {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::history::random_fourier_history;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_history_zero_value() {
        let c = find_c(1.0, 1.1, 0.4).unwrap();
        let v = v212(1.0, 1.1, 0.4, c).unwrap();
        let z = HistorySegment::constant(0.8, 0.004, &[0.0]).unwrap();
        assert_eq!(v.eval(0.0, &z).unwrap(), 0.0);
        assert_eq!(v.derivative(0.0, &z, &[0.0]).unwrap(), Some(0.0));
        let w = v213();
        let z2 = HistorySegment::constant(6.0, 0.01, &[0.0, 0.0]).unwrap();
        assert_eq!(w.eval(3.0, &z2).unwrap(), 0.0);
    }

    #[test]
    fn constant_history_values() {
        let (a, b, r, c) = (1.0, 1.1, 0.4, 0.2);
        let k1 = (a - c) * (1.0 - 2.0 * c * r) - 2.0 * b * b * b * r * r;
        let k2 = b * b * b * r + c * (a - c);
        let v = v212(a, b, r, c).unwrap();
        let xi = 1.7;
        let x = HistorySegment::constant(0.8, 0.004, &[xi]).unwrap();
        let exact = xi * xi * (0.5 + 0.5 * k1 * r + k2 * r * r);
        assert_abs_diff_eq!(v.eval(0.0, &x).unwrap(), exact, epsilon = 1e-12);

        let (xi, up, t) = (0.6, -1.3, 0.7);
        let h = HistorySegment::constant(6.0, 0.01, &[xi, up]).unwrap();
        let exact = 0.5 * xi * xi
            + 0.5 * (2.0 * t as f64).exp() * xi.powi(4)
            + (xi * xi + xi.powi(4))
            + 0.5 * up * up;
        assert_abs_diff_eq!(v213().eval(t, &h).unwrap(), exact, epsilon = 1e-12);
    }

    #[test]
    fn feasibility_margin_arithmetic() {
        assert_abs_diff_eq!(margin(1.0, 1.1, 0.4, 0.2), 0.8 * 0.84 - 0.42592, epsilon = 1e-14);
        assert_abs_diff_eq!(margin(1.0, 1.1, 0.4, 0.2), 0.24608, epsilon = 1e-14);
        let c = find_c(1.0, 1.1, 0.4).unwrap();
        assert!(margin(1.0, 1.1, 0.4, c) > 0.0);
        assert_eq!(find_c(1.0, 1.0, 1.0), None);
        let c0 = find_c(2.0, 3.0, 0.0).unwrap();
        assert_abs_diff_eq!(c0, 1.0, epsilon = 1e-8);
        assert!(v212(1.0, 1.1, 0.4, 0.99).is_err());
    }

    #[test]
    fn double_integral_polynomial_exact() {
        // x(θ) = 1 + θ on [-2r, 0]: ∫_{-2r}^0 (l + 2r)(1 + l)² dl in closed form
        let r: f64 = 0.4;
        let x = HistorySegment::from_fn(2.0 * r, 0.004, 1, |t| vec![1.0 + t]).unwrap();
        let got = weighted_tail_integral(&x, 2.0 * r, |l| l + 2.0 * r, |v| v[0] * v[0]).unwrap();
        let anti = |l: f64| {
            // ∫ (l + 2r)(1 + l)² dl
            let p = 1.0 + l;
            p.powi(4) / 4.0 + (2.0 * r - 1.0) * p.powi(3) / 3.0
        };
        assert_abs_diff_eq!(got, anti(0.0) - anti(-2.0 * r), epsilon = 1e-14);
    }

    #[test]
    fn derivative_matches_eq_form() {
        let (a, b, r) = (1.0, 1.1, 0.4);
        let c = find_c(a, b, r).unwrap();
        let k = V212Constants::new(a, b, r, c);
        let v = v212(a, b, r, c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let target = rng.gen_range(0.1..3.0);
            let x = random_fourier_history(&mut rng, 0.8, 0.004, 1, 4, target).unwrap();
            let d = rng.gen_range(a..=b);
            let x0 = x.current()[0];
            let xr = x.interpolate(-r).unwrap()[0];
            let vals: Vec<f64> = (0..x.len()).map(|i| x.node(i)[0].powi(2)).collect();
            let full = simpson(&vals, 0.004);
            let eq = -d * x0 * xr + 0.5 * (a - c) * x0 * x0 - 0.5 * k.k1 * xr * xr - 0.5 * k.k2 * full;
            let got = v.derivative(0.0, &x, &[-d * xr]).unwrap().unwrap();
            assert_abs_diff_eq!(got, eq, epsilon = 1e-12 * (1.0 + eq.abs()));
        }
    }

    #[test]
    fn v213_bounds_on_samples() {
        let v = v213();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let target = rng.gen_range(0.0..2.0);
            let h = random_fourier_history(&mut rng, 6.0, 0.01, 2, 3, target).unwrap();
            let t: f64 = rng.gen_range(0.0..3.0);
            let d: f64 = rng.gen_range(-1.0..=1.0);
            let p = h.current();
            let x1 = h.interpolate(-1.0).unwrap()[0];
            let f = [-crate::system::example213_gain(t) * x1, -p[1] + d * t.exp() * p[0] * p[0]];
            let der = v.derivative(t, &h, &f).unwrap().unwrap();
            let young = 2.0 * p[0] * p[0]
                + (1.0 + 3.0 * (8.0 * t / 3.0).exp() + 1.5 * (2.0 * t).exp()) * p[0].powi(4)
                - 0.5 * p[1] * p[1];
            assert!(der <= young + 1e-9 * (1.0 + young.abs()));
            let val = v.eval(t, &h).unwrap();
            assert!(der <= 12.0 * t.exp() * val + 1e-9 * (1.0 + val));
        }
        // x-component vanishing on [-1, 0]
        for _ in 0..50 {
            let yv: f64 = rng.gen_range(-2.0..2.0);
            let h = HistorySegment::from_fn(6.0, 0.01, 2, |th| {
                vec![if th < -1.0 { (th + 1.0) * (th + 1.0) } else { 0.0 }, yv]
            })
            .unwrap();
            let t: f64 = rng.gen_range(5.0..8.0);
            let d: f64 = rng.gen_range(-1.0..=1.0);
            let x1 = h.interpolate(-1.0).unwrap()[0];
            let f = [-crate::system::example213_gain(t) * x1, -yv + d * t.exp() * 0.0];
            let der = v.derivative(t, &h, &f).unwrap().unwrap();
            assert!(der <= -2.0 * v.eval(t, &h).unwrap() + 1e-12);
        }
    }

    #[test]
    fn v212_sandwich_and_lipschitz() {
        let (a, b, r) = (1.0, 1.1, 0.4);
        let c = find_c(a, b, r).unwrap();
        let v = v212(a, b, r, c).unwrap();
        let bd = v.bounds().clone();
        let (a1, a2, m) = (bd.a1.unwrap(), bd.a2.unwrap(), bd.lipschitz.unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let target = rng.gen_range(0.0..3.0);
            let x = random_fourier_history(&mut rng, 0.8, 0.008, 1, 4, target).unwrap();
            let val = v.eval(0.0, &x).unwrap();
            assert!(a1(x.current()[0].abs()) <= val + 1e-12);
            assert!(val <= a2(x.sup_norm()) * (1.0 + 1e-9));
        }
        for _ in 0..200 {
            let big_r = rng.gen_range(0.1..3.0);
            let t1 = rng.gen_range(0.0..big_r);
            let t2 = rng.gen_range(0.0..big_r);
            let x = random_fourier_history(&mut rng, 0.8, 0.008, 1, 4, t1).unwrap();
            let y = random_fourier_history(&mut rng, 0.8, 0.008, 1, 4, t2).unwrap();
            let lhs = (v.eval(0.0, &y).unwrap() - v.eval(0.0, &x).unwrap()).abs();
            assert!(lhs <= m(big_r) * y.sub(&x).unwrap().sup_norm() * (1.0 + 1e-9) + 1e-12);
        }
    }
}
