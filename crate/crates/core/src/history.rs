//! Finite-window state histories `x(θ)`, `θ ∈ [-span, 0]`.
//!
//! A [`HistorySegment`] stores the state on a uniform grid and interpolates
//! between nodes: cubic Hermite when derivative samples are present, linear
//! otherwise. Derivatives may be one-sided (left and right values at a node),
//! which lets trajectories with kinks at grid times be represented without
//! smearing the kink over a cell.
//!
//! Norms on state vectors are Euclidean; the history norm is the maximum of
//! the Euclidean norm over the window.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Relative tolerance used when testing whether a length is a grid multiple.
const GRID_TOL: f64 = 1e-7;

/// Returns `Some(k)` when `value = k * step` up to rounding.
pub fn grid_multiple(value: f64, step: f64) -> Option<usize> {
    if !(step > 0.0) || !value.is_finite() || value < -GRID_TOL * step {
        return None;
    }
    let k = (value / step).round();
    if ((value / step) - k).abs() <= GRID_TOL * k.max(1.0) {
        Some(k as usize)
    } else {
        None
    }
}

/// Composite Simpson rule on uniformly spaced samples.
///
/// An odd number of intervals is closed with Simpson's 3/8 rule on the last
/// three intervals; a single interval falls back to the trapezoid rule.
pub fn simpson(values: &[f64], step: f64) -> f64 {
    let n = values.len().saturating_sub(1);
    match n {
        0 => 0.0,
        1 => 0.5 * step * (values[0] + values[1]),
        2 => step / 3.0 * (values[0] + 4.0 * values[1] + values[2]),
        _ => {
            let even_end = if n % 2 == 0 { n } else { n - 3 };
            let mut acc = 0.0;
            let mut i = 0;
            while i < even_end {
                acc += step / 3.0 * (values[i] + 4.0 * values[i + 1] + values[i + 2]);
                i += 2;
            }
            if n % 2 == 1 {
                let j = n - 3;
                acc += 3.0 * step / 8.0
                    * (values[j] + 3.0 * values[j + 1] + 3.0 * values[j + 2] + values[j + 3]);
            }
            acc
        }
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Read access to a state history, used by right-hand-side evaluators.
///
/// `value_into` clamps `θ` to `[-span, 0]`.
pub trait History {
    fn span(&self) -> f64;
    fn dim(&self) -> usize;
    fn value_into(&self, theta: f64, out: &mut [f64]);

    fn value(&self, theta: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.value_into(theta, &mut out);
        out
    }

    /// The present state `x(0)`.
    fn current(&self) -> Vec<f64> {
        self.value(0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Slopes {
    /// Slope used at the left end of the cell starting at each node.
    right: Vec<f64>,
    /// Slope used at the right end of the cell ending at each node.
    left: Vec<f64>,
}

/// A continuous history on a uniform grid; immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct HistorySegment {
    dim: usize,
    grid_step: f64,
    cells: usize,
    samples: Vec<f64>,
    slopes: Option<Slopes>,
}

// Hermite basis on s ∈ [0, 1].
#[inline]
fn hermite_basis(s: f64) -> [f64; 4] {
    let s2 = s * s;
    let s3 = s2 * s;
    [
        2.0 * s3 - 3.0 * s2 + 1.0,
        s3 - 2.0 * s2 + s,
        -2.0 * s3 + 3.0 * s2,
        s3 - s2,
    ]
}

#[inline]
fn hermite_basis_deriv(s: f64) -> [f64; 4] {
    let s2 = s * s;
    [
        6.0 * s2 - 6.0 * s,
        3.0 * s2 - 4.0 * s + 1.0,
        -6.0 * s2 + 6.0 * s,
        3.0 * s2 - 2.0 * s,
    ]
}

impl HistorySegment {
    /// Builds a segment from a flat row-major sample buffer of `(N+1) * dim`
    /// entries ordered from `θ = -span` to `θ = 0`.
    pub fn from_flat(dim: usize, grid_step: f64, samples: Vec<f64>) -> Result<Self> {
        if !(grid_step > 0.0) || !grid_step.is_finite() {
            return Err(Error::InvalidHistory(format!(
                "grid step must be positive and finite, got {grid_step}"
            )));
        }
        if dim == 0 {
            return Err(Error::InvalidHistory("state dimension must be positive".into()));
        }
        if samples.is_empty() || samples.len() % dim != 0 {
            return Err(Error::InvalidHistory(format!(
                "sample buffer of length {} does not hold whole {dim}-vectors",
                samples.len()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidHistory("samples must be finite".into()));
        }
        let cells = samples.len() / dim - 1;
        Ok(Self {
            dim,
            grid_step,
            cells,
            samples,
            slopes: None,
        })
    }

    /// Builds a segment from one state vector per node.
    pub fn from_samples(grid_step: f64, samples: Vec<Vec<f64>>) -> Result<Self> {
        let dim = samples.first().map(Vec::len).unwrap_or(0);
        if samples.iter().any(|s| s.len() != dim) {
            return Err(Error::InvalidHistory("samples have differing dimensions".into()));
        }
        Self::from_flat(dim, grid_step, samples.concat())
    }

    /// A single-state history (`span = 0`), the finite-dimensional case.
    pub fn point(value: &[f64]) -> Result<Self> {
        Self::from_flat(value.len(), 1.0, value.to_vec())
    }

    /// Constant history `x ≡ value` with zero derivative samples.
    pub fn constant(span: f64, grid_step: f64, value: &[f64]) -> Result<Self> {
        let n = cells_for(span, grid_step)?;
        let samples: Vec<f64> = (0..=n).flat_map(|_| value.iter().copied()).collect();
        let zeros = vec![0.0; samples.len()];
        Self::from_flat(value.len(), grid_step, samples)?.with_flat_slopes(zeros.clone(), zeros)
    }

    /// Samples `f` on the grid; linear interpolation between nodes.
    pub fn from_fn(
        span: f64,
        grid_step: f64,
        dim: usize,
        f: impl Fn(f64) -> Vec<f64>,
    ) -> Result<Self> {
        let n = cells_for(span, grid_step)?;
        let mut samples = Vec::with_capacity((n + 1) * dim);
        for k in 0..=n {
            let v = f(-((n - k) as f64) * grid_step);
            if v.len() != dim {
                return Err(Error::Dimension {
                    what: "history sample",
                    expected: dim,
                    got: v.len(),
                });
            }
            samples.extend_from_slice(&v);
        }
        Self::from_flat(dim, grid_step, samples)
    }

    /// Samples `f` and its derivative `df`; cubic Hermite interpolation.
    pub fn from_fn_with_derivative(
        span: f64,
        grid_step: f64,
        dim: usize,
        f: impl Fn(f64) -> Vec<f64>,
        df: impl Fn(f64) -> Vec<f64>,
    ) -> Result<Self> {
        let seg = Self::from_fn(span, grid_step, dim, f)?;
        let n = seg.cells;
        let derivs: Vec<Vec<f64>> = (0..=n)
            .map(|k| df(-((n - k) as f64) * grid_step))
            .collect();
        seg.with_derivatives(derivs)
    }

    /// Attaches derivative samples (one per node) for Hermite interpolation.
    pub fn with_derivatives(self, derivs: Vec<Vec<f64>>) -> Result<Self> {
        if derivs.len() != self.len() || derivs.iter().any(|d| d.len() != self.dim) {
            return Err(Error::InvalidHistory(
                "derivative samples must match the sample shape".into(),
            ));
        }
        let flat = derivs.concat();
        self.with_flat_slopes(flat.clone(), flat)
    }

    /// Attaches one-sided derivative samples in flat row-major layout.
    pub(crate) fn with_flat_slopes(mut self, left: Vec<f64>, right: Vec<f64>) -> Result<Self> {
        if left.len() != self.samples.len() || right.len() != self.samples.len() {
            return Err(Error::InvalidHistory(
                "derivative samples must match the sample shape".into(),
            ));
        }
        if left.iter().chain(right.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidHistory("derivative samples must be finite".into()));
        }
        self.slopes = Some(Slopes { right, left });
        Ok(self)
    }

    /// Drops derivative samples, falling back to linear interpolation.
    pub fn without_derivatives(mut self) -> Self {
        self.slopes = None;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid_step(&self) -> f64 {
        self.grid_step
    }

    /// Number of grid cells `N`; the segment holds `N + 1` nodes.
    pub fn cells(&self) -> usize {
        self.cells
    }

    /// Number of nodes.
    pub fn len(&self) -> usize {
        self.cells + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn span(&self) -> f64 {
        self.cells as f64 * self.grid_step
    }

    pub fn has_derivatives(&self) -> bool {
        self.slopes.is_some()
    }

    /// `θ` of node `k`.
    pub fn theta(&self, k: usize) -> f64 {
        -((self.cells - k) as f64) * self.grid_step
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.samples[k * self.dim..(k + 1) * self.dim]
    }

    /// `x(0)`.
    pub fn current(&self) -> &[f64] {
        self.node(self.cells)
    }

    /// Right-sided derivative sample at node `k`.
    pub fn derivative(&self, k: usize) -> Option<&[f64]> {
        self.slopes
            .as_ref()
            .map(|s| &s.right[k * self.dim..(k + 1) * self.dim])
    }

    /// Left-sided derivative sample at node `k`.
    pub fn left_derivative(&self, k: usize) -> Option<&[f64]> {
        self.slopes
            .as_ref()
            .map(|s| &s.left[k * self.dim..(k + 1) * self.dim])
    }

    /// Flat sample buffer, row-major from `θ = -span` to `θ = 0`.
    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// Values of component `i` at every node.
    pub fn component(&self, i: usize) -> Vec<f64> {
        self.samples.iter().skip(i).step_by(self.dim).copied().collect()
    }

    /// Interpolated value at `θ ∈ [-span, 0]`; exact at nodes.
    pub fn interpolate(&self, theta: f64) -> Result<Vec<f64>> {
        let span = self.span();
        let slack = 1e-12 * span.max(1.0);
        if !(theta >= -span - slack && theta <= slack) {
            return Err(Error::OutOfRange { theta, span });
        }
        let mut out = vec![0.0; self.dim];
        self.eval_into(theta, &mut out);
        Ok(out)
    }

    fn locate(&self, theta: f64) -> (usize, f64) {
        let pos = (theta + self.span()) / self.grid_step;
        let k = (pos.floor().max(0.0) as usize).min(self.cells - 1);
        let s = (theta - self.theta(k)) / self.grid_step;
        (k, s.clamp(0.0, 1.0))
    }

    fn eval_into(&self, theta: f64, out: &mut [f64]) {
        if self.cells == 0 {
            out.copy_from_slice(self.node(0));
            return;
        }
        let (k, s) = self.locate(theta);
        self.eval_cell(k, s, out);
    }

    fn eval_cell(&self, k: usize, s: f64, out: &mut [f64]) {
        let n = self.dim;
        let y0 = &self.samples[k * n..(k + 1) * n];
        let y1 = &self.samples[(k + 1) * n..(k + 2) * n];
        match &self.slopes {
            Some(sl) => {
                let [h00, h10, h01, h11] = hermite_basis(s);
                let g = self.grid_step;
                let m0 = &sl.right[k * n..(k + 1) * n];
                let m1 = &sl.left[(k + 1) * n..(k + 2) * n];
                for i in 0..n {
                    out[i] = h00 * y0[i] + h10 * g * m0[i] + h01 * y1[i] + h11 * g * m1[i];
                }
            }
            None => {
                for i in 0..n {
                    out[i] = y0[i] + s * (y1[i] - y0[i]);
                }
            }
        }
    }

    /// Derivative of the interpolant inside cell `k` at local coordinate `s`.
    fn eval_cell_deriv(&self, k: usize, s: f64, out: &mut [f64]) {
        let n = self.dim;
        let g = self.grid_step;
        let y0 = &self.samples[k * n..(k + 1) * n];
        let y1 = &self.samples[(k + 1) * n..(k + 2) * n];
        match &self.slopes {
            Some(sl) => {
                let [d00, d10, d01, d11] = hermite_basis_deriv(s);
                let m0 = &sl.right[k * n..(k + 1) * n];
                let m1 = &sl.left[(k + 1) * n..(k + 2) * n];
                for i in 0..n {
                    out[i] = (d00 * y0[i] + d01 * y1[i]) / g + d10 * m0[i] + d11 * m1[i];
                }
            }
            None => {
                for i in 0..n {
                    out[i] = (y1[i] - y0[i]) / g;
                }
            }
        }
    }

    /// `‖x‖ = max_θ |x(θ)|` over the dense interpolant, including interior
    /// extrema of the Hermite cubics.
    pub fn sup_norm(&self) -> f64 {
        let mut best = (0..self.len())
            .map(|k| norm(self.node(k)))
            .fold(0.0, f64::max);
        if self.slopes.is_some() {
            for k in 0..self.cells {
                best = best.max(self.cell_interior_max(k));
            }
        }
        best
    }

    /// Per-cell maximum of `|x(θ)|`, endpoints included.
    pub fn cell_sup_norms(&self) -> Vec<f64> {
        (0..self.cells)
            .map(|k| {
                let ends = norm(self.node(k)).max(norm(self.node(k + 1)));
                if self.slopes.is_some() {
                    ends.max(self.cell_interior_max(k))
                } else {
                    ends
                }
            })
            .collect()
    }

    fn cell_interior_max(&self, k: usize) -> f64 {
        let n = self.dim;
        let sl = self.slopes.as_ref().expect("slopes present");
        let g = self.grid_step;
        if n == 1 {
            let y0 = self.samples[k];
            let y1 = self.samples[k + 1];
            let m0 = g * sl.right[k];
            let m1 = g * sl.left[k + 1];
            let a = 6.0 * y0 + 3.0 * m0 - 6.0 * y1 + 3.0 * m1;
            let b = -6.0 * y0 - 4.0 * m0 + 6.0 * y1 - 2.0 * m1;
            let c = m0;
            let mut best: f64 = 0.0;
            let mut consider = |s: f64| {
                if s > 0.0 && s < 1.0 {
                    let [h00, h10, h01, h11] = hermite_basis(s);
                    best = best.max((h00 * y0 + h10 * m0 + h01 * y1 + h11 * m1).abs());
                }
            };
            if a.abs() < 1e-300 {
                if b.abs() > 0.0 {
                    consider(-c / b);
                }
            } else {
                let disc = b * b - 4.0 * a * c;
                if disc >= 0.0 {
                    let sq = disc.sqrt();
                    // numerically stable roots
                    let q = -0.5 * (b + b.signum() * sq);
                    if q != 0.0 {
                        consider(q / a);
                        consider(c / q);
                    } else {
                        consider(-b / (2.0 * a));
                    }
                }
            }
            best
        } else {
            // Critical points of |p(s)|²: sign changes of p(s)·p'(s).
            const SUB: usize = 16;
            let mut p = vec![0.0; n];
            let mut dp = vec![0.0; n];
            let phi = |s: f64, p: &mut [f64], dp: &mut [f64]| {
                self.eval_cell(k, s, p);
                self.eval_cell_deriv(k, s, dp);
                p.iter().zip(dp.iter()).map(|(a, b)| a * b).sum::<f64>()
            };
            let mut best: f64 = 0.0;
            let mut s_prev = 0.0;
            let mut f_prev = phi(0.0, &mut p, &mut dp);
            for j in 1..=SUB {
                let s = j as f64 / SUB as f64;
                let f = phi(s, &mut p, &mut dp);
                best = best.max(norm(&p));
                if f_prev > 0.0 && f < 0.0 {
                    let (mut lo, mut hi) = (s_prev, s);
                    for _ in 0..60 {
                        let mid = 0.5 * (lo + hi);
                        if phi(mid, &mut p, &mut dp) > 0.0 {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    self.eval_cell(k, 0.5 * (lo + hi), &mut p);
                    best = best.max(norm(&p));
                }
                s_prev = s;
                f_prev = f;
            }
            best
        }
    }

    /// The perturbation operator: the history shifted left by `h` with the
    /// ray `x(0) + (θ + h) v` spliced onto `(-h, 0]`.
    ///
    /// `h` must be a grid multiple with `0 <= h < span`. The result is
    /// piecewise linear between nodes. For `span = 0` the history is a plain
    /// vector and the result is the point `x(0) + h v`.
    pub fn apply_eh(&self, v: &[f64], h: f64) -> Result<HistorySegment> {
        if v.len() != self.dim {
            return Err(Error::Dimension {
                what: "direction v",
                expected: self.dim,
                got: v.len(),
            });
        }
        if !(h >= 0.0) {
            return Err(Error::ShiftTooLarge { h, span: self.span() });
        }
        if self.cells == 0 {
            let p: Vec<f64> = self.node(0).iter().zip(v).map(|(x, v)| x + h * v).collect();
            return HistorySegment::point(&p).map(|mut s| {
                s.grid_step = self.grid_step;
                s
            });
        }
        if h == 0.0 {
            return Ok(self.clone());
        }
        let m = grid_multiple(h, self.grid_step).ok_or(Error::OffGrid {
            what: "shift h",
            value: h,
            grid_step: self.grid_step,
        })?;
        if m >= self.cells {
            return Err(Error::ShiftTooLarge { h, span: self.span() });
        }
        let n = self.dim;
        let mut out = Vec::with_capacity(self.samples.len());
        out.extend_from_slice(&self.samples[m * n..]);
        let x0 = self.current();
        for k in (self.cells - m + 1)..=self.cells {
            let lift = self.theta(k) + h;
            out.extend(x0.iter().zip(v).map(|(x, v)| x + lift * v));
        }
        HistorySegment::from_flat(n, self.grid_step, out)
    }

    /// Modulus-of-continuity functional
    /// `sup{|x(0) - x(θ)|; θ ∈ [-min(h, span), 0]} + sup{|x(θ+h) - x(θ)|; θ ∈ [-span, -h]}`
    /// (second term only when `h < span`).
    ///
    /// Suprema are taken over nodes, node preimages `θ_k - h` and cell
    /// midpoints, which is exact for piecewise-linear segments.
    pub fn modulus_g2(&self, h: f64) -> f64 {
        if !(h > 0.0) || self.cells == 0 {
            return 0.0;
        }
        let span = self.span();
        let x0 = self.current().to_vec();
        let mut buf = vec![0.0; self.dim];
        let diff = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
        };
        let reach = h.min(span);
        let mut first: f64 = 0.0;
        for k in 0..self.len() {
            let th = self.theta(k);
            if th >= -reach - 1e-15 {
                first = first.max(diff(&x0, self.node(k)));
            }
            let mid = th - 0.5 * self.grid_step;
            if mid >= -reach && k > 0 {
                self.eval_into(mid, &mut buf);
                first = first.max(diff(&x0, &buf));
            }
        }
        self.eval_into(-reach, &mut buf);
        first = first.max(diff(&x0, &buf));

        let mut second: f64 = 0.0;
        if h < span {
            let mut a = vec![0.0; self.dim];
            let mut b = vec![0.0; self.dim];
            let mut probe = |th: f64| {
                if th >= -span - 1e-15 && th <= -h + 1e-15 {
                    let th = th.clamp(-span, -h);
                    self.eval_into(th + h, &mut a);
                    self.eval_into(th, &mut b);
                    diff(&a, &b)
                } else {
                    0.0
                }
            };
            for k in 0..self.len() {
                let th = self.theta(k);
                second = second.max(probe(th));
                second = second.max(probe(th - h));
                second = second.max(probe(th - 0.5 * self.grid_step));
            }
            second = second.max(probe(-h));
        }
        first + second
    }

    /// Resamples onto a grid `factor` times finer using the interpolant.
    pub fn refine(&self, factor: usize) -> HistorySegment {
        if factor <= 1 || self.cells == 0 {
            return self.clone();
        }
        let n = self.dim;
        let cells = self.cells * factor;
        let g = self.grid_step / factor as f64;
        let mut samples = vec![0.0; (cells + 1) * n];
        for j in 0..=cells {
            let dst = &mut samples[j * n..(j + 1) * n];
            if j % factor == 0 {
                dst.copy_from_slice(self.node(j / factor));
            } else {
                self.eval_cell(j / factor, (j % factor) as f64 / factor as f64, dst);
            }
        }
        let slopes = self.slopes.as_ref().map(|sl| {
            let mut left = vec![0.0; samples.len()];
            let mut right = vec![0.0; samples.len()];
            for j in 0..=cells {
                let (l, r) = (&mut left[j * n..(j + 1) * n], &mut right[j * n..(j + 1) * n]);
                if j % factor == 0 {
                    let k = j / factor;
                    l.copy_from_slice(&sl.left[k * n..(k + 1) * n]);
                    r.copy_from_slice(&sl.right[k * n..(k + 1) * n]);
                } else {
                    self.eval_cell_deriv(j / factor, (j % factor) as f64 / factor as f64, l);
                    r.copy_from_slice(l);
                }
            }
            Slopes { right, left }
        });
        HistorySegment {
            dim: n,
            grid_step: g,
            cells,
            samples,
            slopes,
        }
    }

    /// The trailing part `x|[-span, 0]` of this history.
    pub fn tail(&self, span: f64) -> Result<HistorySegment> {
        if self.cells == 0 {
            return Ok(self.clone());
        }
        let m = grid_multiple(span, self.grid_step).ok_or(Error::OffGrid {
            what: "tail span",
            value: span,
            grid_step: self.grid_step,
        })?;
        if m > self.cells {
            return Err(Error::InvalidHistory(format!(
                "tail span {span} exceeds history span {}",
                self.span()
            )));
        }
        let start = (self.cells - m) * self.dim;
        let mut seg = HistorySegment {
            dim: self.dim,
            grid_step: self.grid_step,
            cells: m,
            samples: self.samples[start..].to_vec(),
            slopes: None,
        };
        if let Some(sl) = &self.slopes {
            seg.slopes = Some(Slopes {
                right: sl.right[start..].to_vec(),
                left: sl.left[start..].to_vec(),
            });
        }
        Ok(seg)
    }

    /// Node-wise difference `self - other`.
    pub fn sub(&self, other: &HistorySegment) -> Result<HistorySegment> {
        self.check_same_grid(other)?;
        let samples = self
            .samples
            .iter()
            .zip(&other.samples)
            .map(|(a, b)| a - b)
            .collect();
        let slopes = match (&self.slopes, &other.slopes) {
            (Some(a), Some(b)) => Some(Slopes {
                right: a.right.iter().zip(&b.right).map(|(p, q)| p - q).collect(),
                left: a.left.iter().zip(&b.left).map(|(p, q)| p - q).collect(),
            }),
            _ => None,
        };
        Ok(HistorySegment {
            samples,
            slopes,
            ..self.clone_shape()
        })
    }

    /// Scales samples (and derivatives) by `c`.
    pub fn scaled(&self, c: f64) -> HistorySegment {
        HistorySegment {
            samples: self.samples.iter().map(|v| v * c).collect(),
            slopes: self.slopes.as_ref().map(|sl| Slopes {
                right: sl.right.iter().map(|v| v * c).collect(),
                left: sl.left.iter().map(|v| v * c).collect(),
            }),
            ..self.clone_shape()
        }
    }

    /// Largest node-wise Euclidean distance to `other`.
    pub fn max_node_distance(&self, other: &HistorySegment) -> Result<f64> {
        self.check_same_grid(other)?;
        Ok((0..self.len())
            .map(|k| {
                self.node(k)
                    .iter()
                    .zip(other.node(k))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max))
    }

    fn clone_shape(&self) -> HistorySegment {
        HistorySegment {
            dim: self.dim,
            grid_step: self.grid_step,
            cells: self.cells,
            samples: Vec::new(),
            slopes: None,
        }
    }

    fn check_same_grid(&self, other: &HistorySegment) -> Result<()> {
        if self.dim != other.dim {
            return Err(Error::Dimension {
                what: "history",
                expected: self.dim,
                got: other.dim,
            });
        }
        if self.cells != other.cells
            || (self.cells > 0 && (self.grid_step - other.grid_step).abs() > 1e-12 * self.grid_step)
        {
            return Err(Error::InvalidHistory("histories live on different grids".into()));
        }
        Ok(())
    }

    /// Writes `theta,x1..xn[,dx1..dxn]` rows with θ ascending.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["theta".to_string()];
        header.extend((1..=self.dim).map(|i| format!("x{i}")));
        if self.slopes.is_some() {
            header.extend((1..=self.dim).map(|i| format!("dx{i}")));
        }
        wr.write_record(&header)?;
        for k in 0..self.len() {
            let mut row = vec![fmt_f64(self.theta(k))];
            row.extend(self.node(k).iter().map(|v| fmt_f64(*v)));
            if let Some(d) = self.derivative(k) {
                row.extend(d.iter().map(|v| fmt_f64(*v)));
            }
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads the format produced by [`HistorySegment::write_csv`].
    pub fn read_csv<R: Read>(r: R) -> Result<HistorySegment> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        let dim = header.iter().filter(|h| h.starts_with('x')).count();
        let with_d = header.iter().any(|h| h.starts_with("dx"));
        if dim == 0 || header.get(0) != Some("theta") {
            return Err(Error::InvalidHistory("expected header theta,x1..xn".into()));
        }
        let mut thetas = Vec::new();
        let mut samples = Vec::new();
        let mut derivs = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| Error::InvalidHistory(format!("missing column {i}")))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidHistory(e.to_string()))
            };
            thetas.push(parse(0)?);
            for i in 0..dim {
                samples.push(parse(1 + i)?);
            }
            if with_d {
                for i in 0..dim {
                    derivs.push(parse(1 + dim + i)?);
                }
            }
        }
        if thetas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidHistory("θ must be strictly ascending".into()));
        }
        let step = if thetas.len() > 1 {
            (thetas[thetas.len() - 1] - thetas[0]) / (thetas.len() - 1) as f64
        } else {
            1.0
        };
        let seg = HistorySegment::from_flat(dim, step, samples)?;
        if with_d {
            seg.with_flat_slopes(derivs.clone(), derivs)
        } else {
            Ok(seg)
        }
    }
}

impl History for HistorySegment {
    fn span(&self) -> f64 {
        HistorySegment::span(self)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn value_into(&self, theta: f64, out: &mut [f64]) {
        self.eval_into(theta.clamp(-HistorySegment::span(self), 0.0), out)
    }
}

/// Random smooth history: per component a truncated Fourier series with
/// coefficients in `[-1, 1]`, rescaled so that `sup_norm == target_norm`.
/// Derivative samples are exact, so interpolation is cubic Hermite.
pub fn random_fourier_history<R: rand::Rng + ?Sized>(
    rng: &mut R,
    span: f64,
    grid_step: f64,
    dim: usize,
    modes: usize,
    target_norm: f64,
) -> Result<HistorySegment> {
    if span == 0.0 {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let n = norm(&v);
        let scale = if n > 0.0 { target_norm / n } else { 0.0 };
        return HistorySegment::point(&v.iter().map(|x| x * scale).collect::<Vec<_>>());
    }
    let coeffs: Vec<Vec<(f64, f64)>> = (0..dim)
        .map(|_| {
            (0..=modes)
                .map(|_| (rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)))
                .collect()
        })
        .collect();
    let w = std::f64::consts::PI / span;
    let f = |th: f64| -> Vec<f64> {
        coeffs
            .iter()
            .map(|c| {
                c.iter()
                    .enumerate()
                    .map(|(k, (a, b))| {
                        let kw = k as f64 * w;
                        a * (kw * th).cos() + b * (kw * th).sin()
                    })
                    .sum()
            })
            .collect()
    };
    let df = |th: f64| -> Vec<f64> {
        coeffs
            .iter()
            .map(|c| {
                c.iter()
                    .enumerate()
                    .map(|(k, (a, b))| {
                        let kw = k as f64 * w;
                        kw * (b * (kw * th).cos() - a * (kw * th).sin())
                    })
                    .sum()
            })
            .collect()
    };
    let raw = HistorySegment::from_fn_with_derivative(span, grid_step, dim, f, df)?;
    let n = raw.sup_norm();
    let scale = if n > 0.0 { target_norm / n } else { 0.0 };
    Ok(raw.scaled(scale))
}

fn cells_for(span: f64, grid_step: f64) -> Result<usize> {
    if !(grid_step > 0.0) {
        return Err(Error::InvalidHistory(format!("grid step must be positive, got {grid_step}")));
    }
    grid_multiple(span, grid_step).ok_or(Error::OffGrid {
        what: "span",
        value: span,
        grid_step,
    })
}

/// 17 significant digits, the format used for every emitted float.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "NaN".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_and_constant_norms() {
        let z = HistorySegment::constant(1.0, 0.1, &[0.0, 0.0]).unwrap();
        assert_eq!(z.sup_norm(), 0.0);
        let c = HistorySegment::constant(1.0, 0.1, &[3.0, -4.0]).unwrap();
        assert_eq!(c.sup_norm(), 5.0);
    }

    #[test]
    fn sin_sup_norm_close_to_one() {
        use std::f64::consts::PI;
        let x = HistorySegment::from_fn_with_derivative(
            2.0,
            0.01,
            1,
            |t| vec![(PI * t).sin()],
            |t| vec![PI * (PI * t).cos()],
        )
        .unwrap();
        assert_abs_diff_eq!(x.sup_norm(), 1.0, epsilon = 1e-8);
        let lin = x.clone().without_derivatives();
        assert!((lin.sup_norm() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn interior_extremum_found_between_nodes() {
        // max of 1 - (θ + 0.5)² at θ = -0.5, which is a cell midpoint
        let x = HistorySegment::from_fn_with_derivative(
            1.0,
            1.0 / 3.0,
            1,
            |t| vec![1.0 - (t + 0.5) * (t + 0.5)],
            |t| vec![-2.0 * (t + 0.5)],
        )
        .unwrap();
        assert_abs_diff_eq!(x.sup_norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn vector_interior_extremum() {
        let x = HistorySegment::from_fn_with_derivative(
            1.0,
            1.0 / 3.0,
            2,
            |t| vec![1.0 - (t + 0.5) * (t + 0.5), 0.0],
            |t| vec![-2.0 * (t + 0.5), 0.0],
        )
        .unwrap();
        assert_abs_diff_eq!(x.sup_norm(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn interpolation_node_exact_and_out_of_range() {
        let x = HistorySegment::from_fn(1.0, 0.25, 1, |t| vec![t.exp()]).unwrap();
        for k in 0..x.len() {
            assert_eq!(x.interpolate(x.theta(k)).unwrap(), x.node(k).to_vec());
        }
        assert!(matches!(x.interpolate(-1.5), Err(Error::OutOfRange { .. })));
        assert!(x.interpolate(0.1).is_err());
    }

    #[test]
    fn linear_and_cubic_reproduction() {
        let lin = HistorySegment::from_fn(2.0, 0.5, 1, |t| vec![3.0 * t - 1.0]).unwrap();
        for th in [-1.9, -1.3, -0.77, -0.01] {
            assert_abs_diff_eq!(lin.interpolate(th).unwrap()[0], 3.0 * th - 1.0, epsilon = 1e-14);
        }
        let p = |t: f64| 2.0 * t * t * t - t * t + 0.5 * t + 4.0;
        let dp = |t: f64| 6.0 * t * t - 2.0 * t + 0.5;
        let cub =
            HistorySegment::from_fn_with_derivative(2.0, 0.5, 1, |t| vec![p(t)], |t| vec![dp(t)])
                .unwrap();
        for th in [-1.9, -1.3, -0.77, -0.01] {
            assert_abs_diff_eq!(cub.interpolate(th).unwrap()[0], p(th), epsilon = 1e-13);
        }
    }

    #[test]
    fn eh_identity_fixed_point_and_errors() {
        let x = HistorySegment::from_fn(1.0, 0.1, 1, |t| vec![t.sin()]).unwrap();
        assert_eq!(x.apply_eh(&[2.0], 0.0).unwrap(), x);
        let c = HistorySegment::constant(1.0, 0.1, &[2.5]).unwrap();
        let e = c.apply_eh(&[0.0], 0.3).unwrap();
        assert!(e.samples().iter().all(|v| *v == 2.5));
        assert!(matches!(x.apply_eh(&[1.0], 1.0), Err(Error::ShiftTooLarge { .. })));
        assert!(matches!(x.apply_eh(&[1.0], 0.15), Err(Error::OffGrid { .. })));
    }

    #[test]
    fn eh_shape() {
        let x = HistorySegment::from_fn(1.0, 0.1, 1, |t| vec![t * t]).unwrap();
        let e = x.apply_eh(&[3.0], 0.2).unwrap();
        // shifted part
        assert_abs_diff_eq!(e.interpolate(-1.0).unwrap()[0], 0.64, epsilon = 1e-14);
        assert_abs_diff_eq!(e.interpolate(-0.2).unwrap()[0], 0.0, epsilon = 1e-14);
        // ray part
        assert_abs_diff_eq!(e.interpolate(-0.1).unwrap()[0], 0.3, epsilon = 1e-14);
        assert_abs_diff_eq!(e.interpolate(0.0).unwrap()[0], 0.6, epsilon = 1e-14);
    }

    #[test]
    fn g2_cases() {
        let x = HistorySegment::from_fn(1.0, 0.1, 1, |t| vec![t.cos()]).unwrap();
        assert_eq!(x.modulus_g2(0.0), 0.0);
        let c = HistorySegment::constant(1.0, 0.1, &[7.0]).unwrap();
        for h in [0.05, 0.3, 2.0] {
            assert_eq!(c.modulus_g2(h), 0.0);
        }
        let m = -1.7;
        let lin = HistorySegment::from_fn(1.0, 0.1, 1, |t| vec![m * t]).unwrap();
        for h in [0.1, 0.25, 0.5, 0.93] {
            assert_abs_diff_eq!(lin.modulus_g2(h), 2.0 * m.abs() * h, epsilon = 1e-12);
        }
    }

    #[test]
    fn g2_decreases_to_zero() {
        let x = HistorySegment::from_fn_with_derivative(
            1.0,
            0.01,
            1,
            |t| vec![(5.0 * t).sin()],
            |t| vec![5.0 * (5.0 * t).cos()],
        )
        .unwrap();
        let vals: Vec<f64> = (1..12).map(|k| x.modulus_g2(2f64.powi(-k))).collect();
        assert!(vals.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(*vals.last().unwrap() < 1e-2);
    }

    #[test]
    fn simpson_exactness() {
        // ∫_0^1 t³ dt with 5 intervals uses the 3/8 tail
        for n in [2usize, 3, 4, 5, 8, 9] {
            let h = 1.0 / n as f64;
            let vals: Vec<f64> = (0..=n).map(|k| (k as f64 * h).powi(3)).collect();
            assert_abs_diff_eq!(simpson(&vals, h), 0.25, epsilon = 1e-14);
        }
    }

    #[test]
    fn refine_keeps_nodes_and_tail() {
        let x = HistorySegment::from_fn_with_derivative(
            0.8,
            0.1,
            1,
            |t| vec![t.exp()],
            |t| vec![t.exp()],
        )
        .unwrap();
        let r = x.refine(4);
        assert_eq!(r.cells(), 32);
        for k in 0..x.len() {
            assert_eq!(r.node(4 * k), x.node(k));
        }
        let t = x.tail(0.4).unwrap();
        assert_eq!(t.cells(), 4);
        assert_eq!(t.current(), x.current());
    }

    #[test]
    fn csv_round_trip() {
        let x = HistorySegment::from_fn_with_derivative(
            0.5,
            0.125,
            2,
            |t| vec![t, t * t],
            |t| vec![1.0, 2.0 * t],
        )
        .unwrap();
        let mut buf = Vec::new();
        x.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("theta,x1,x2,dx1,dx2"));
        let y = HistorySegment::read_csv(&buf[..]).unwrap();
        assert_eq!(x.samples(), y.samples());
        assert_eq!(x.cells(), y.cells());
    }
}
