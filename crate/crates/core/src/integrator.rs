//! Method-of-steps RK4 on a fixed grid with cubic Hermite dense output.
//!
//! Each node stores the state together with the right derivative (first RK4
//! stage of the following step) and the left derivative (the right-hand side
//! re-evaluated at the node in the regime of the preceding step). Delayed
//! lookups read the Hermite interpolant built from these; lookups that fall
//! inside the current step interpolate linearly between the step start and
//! the stage value.
//!
//! Steps are aligned with every discontinuity of the system and of the
//! input signal; the input is evaluated on the piece active at the start of
//! each step, which gives right limits at the start and left limits at the
//! end.

use std::collections::VecDeque;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::history::{grid_multiple, norm, History, HistorySegment};
use crate::signals::DisturbanceSignal;
use crate::system::{EvalPoint, RfdeSystem};

/// Default state norm at which a run is declared to blow up.
pub const DEFAULT_OVERFLOW: f64 = 1e8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntegratorConfig {
    /// Defaults to `r/100`, or `10⁻²` without delay.
    pub grid_step: Option<f64>,
    pub overflow: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            grid_step: None,
            overflow: DEFAULT_OVERFLOW,
        }
    }
}

impl IntegratorConfig {
    pub fn with_grid_step(grid_step: f64) -> Self {
        Self {
            grid_step: Some(grid_step),
            ..Self::default()
        }
    }

    pub fn resolve_grid(&self, delay_span: f64) -> f64 {
        self.grid_step.unwrap_or(if delay_span > 0.0 {
            delay_span / 100.0
        } else {
            1e-2
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Status {
    Completed,
    /// The overflow threshold was crossed during the step after `t_max`;
    /// `t_max` is the last completed grid time. The threshold is a heuristic.
    BlowUp { t_max: f64 },
}

/// Read-only view of node data, usable while the arrays are still growing.
#[derive(Clone, Copy)]
struct Dense<'a> {
    dim: usize,
    t0: f64,
    g: f64,
    lead: usize,
    states: &'a [f64],
    left: &'a [f64],
    right: &'a [f64],
}

impl<'a> Dense<'a> {
    fn last(&self) -> usize {
        self.states.len() / self.dim - 1
    }

    fn node(&self, j: usize) -> &'a [f64] {
        &self.states[j * self.dim..(j + 1) * self.dim]
    }

    fn eval_into(&self, tau: f64, out: &mut [f64]) {
        let n = self.dim;
        let last = self.last();
        let u = (tau - self.t0) / self.g + self.lead as f64;
        if u <= 0.0 || last == 0 {
            out.copy_from_slice(self.node(if u <= 0.0 { 0 } else { last }));
            return;
        }
        if u >= last as f64 {
            out.copy_from_slice(self.node(last));
            return;
        }
        let k = (u.floor() as usize).min(last - 1);
        let s = u - k as f64;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = (s3 - 2.0 * s2 + s) * self.g;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = (s3 - s2) * self.g;
        for i in 0..n {
            out[i] = h00 * self.states[k * n + i]
                + h10 * self.right[k * n + i]
                + h01 * self.states[(k + 1) * n + i]
                + h11 * self.left[(k + 1) * n + i];
        }
    }
}

/// History seen by an RK4 stage at `t_stage` with provisional state `x_stage`.
struct StageView<'a> {
    dense: Dense<'a>,
    span: f64,
    t_n: f64,
    x_n: &'a [f64],
    t_stage: f64,
    x_stage: &'a [f64],
}

impl History for StageView<'_> {
    fn span(&self) -> f64 {
        self.span
    }

    fn dim(&self) -> usize {
        self.dense.dim
    }

    fn value_into(&self, theta: f64, out: &mut [f64]) {
        let theta = theta.clamp(-self.span, 0.0);
        if theta == 0.0 {
            out.copy_from_slice(self.x_stage);
            return;
        }
        let tau = self.t_stage + theta;
        if tau > self.t_n {
            let w = (tau - self.t_n) / (self.t_stage - self.t_n);
            for i in 0..out.len() {
                out[i] = self.x_n[i] + w * (self.x_stage[i] - self.x_n[i]);
            }
        } else {
            self.dense.eval_into(tau, out);
        }
    }
}

/// History `T_span(t)x` read from the dense output.
struct TimeView<'a> {
    dense: Dense<'a>,
    span: f64,
    t: f64,
}

impl History for TimeView<'_> {
    fn span(&self) -> f64 {
        self.span
    }

    fn dim(&self) -> usize {
        self.dense.dim
    }

    fn value_into(&self, theta: f64, out: &mut [f64]) {
        self.dense.eval_into(self.t + theta.clamp(-self.span, 0.0), out)
    }
}

/// A computed solution on `[t0 - r, t_last]`, extended before `t0 - r` by
/// the constant `x0(-r)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    system: String,
    signal: String,
    t0: f64,
    grid_step: f64,
    delay_span: f64,
    dim: usize,
    /// Number of grid cells in the initial history.
    lead: usize,
    states: Vec<f64>,
    left: Vec<f64>,
    right: Vec<f64>,
    status: Status,
}

/// Solves `ẋ(t) = f(t, T_r(t)x, d(t))` from `T_r(t0)x = x0` up to `t_end`
/// (rounded up to the grid).
///
/// A blow-up is reported in [`Trajectory::status`], not as an error.
pub fn integrate(
    sys: &RfdeSystem,
    t0: f64,
    x0: &HistorySegment,
    d: &DisturbanceSignal,
    t_end: f64,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    let r = sys.delay_span();
    let g = cfg.resolve_grid(r);
    let n = sys.state_dim();
    if !(g > 0.0) || !g.is_finite() {
        return Err(Error::Parameter(format!("grid step must be positive, got {g}")));
    }
    if !(t_end > t0) || !t0.is_finite() || !t_end.is_finite() {
        return Err(Error::Parameter(format!("need t_end > t0, got t0 = {t0}, t_end = {t_end}")));
    }
    let lead = grid_multiple(r, g).ok_or(Error::OffGrid {
        what: "delay span",
        value: r,
        grid_step: g,
    })?;
    if x0.dim() != n {
        return Err(Error::Dimension {
            what: "initial history",
            expected: n,
            got: x0.dim(),
        });
    }
    if (x0.span() - r).abs() > 1e-9 * r.max(1.0) {
        return Err(Error::InvalidHistory(format!(
            "initial history span {} differs from delay span {r}",
            x0.span()
        )));
    }
    let x0 = if lead == 0 || (x0.grid_step() - g).abs() <= 1e-12 * g {
        x0.clone()
    } else {
        match grid_multiple(x0.grid_step(), g) {
            Some(f) if f > 1 => x0.refine(f),
            _ => {
                return Err(Error::OffGrid {
                    what: "initial history grid",
                    value: x0.grid_step(),
                    grid_step: g,
                })
            }
        }
    };
    if d.dim() != sys.disturbance_box().dim() {
        return Err(Error::Dimension {
            what: "disturbance signal",
            expected: sys.disturbance_box().dim(),
            got: d.dim(),
        });
    }
    let sb = d.disturbance_box();
    if !(sys.disturbance_box().contains(sb.lower()) && sys.disturbance_box().contains(sb.upper()))
    {
        return Err(Error::InvalidSignal("signal box is not inside the system box".into()));
    }
    let steps = ((t_end - t0) / g - 1e-9).ceil().max(1.0) as usize;
    let horizon = t0 + steps as f64 * g;
    for tk in sys
        .discontinuities()
        .in_open(t0, horizon)
        .into_iter()
        .chain(d.discontinuities_in(t0, horizon))
    {
        if grid_multiple(tk - t0, g).is_none() {
            return Err(Error::MisalignedDiscontinuity { t: tk });
        }
    }

    // Initial nodes with one-sided slopes; linear data gets chord slopes so
    // that the Hermite interpolant reproduces it exactly.
    let cap = (lead + steps + 1) * n;
    let mut states = Vec::with_capacity(cap);
    let mut left = Vec::with_capacity(cap);
    let mut right = Vec::with_capacity(cap);
    states.extend_from_slice(x0.samples());
    for k in 0..=lead {
        match (x0.left_derivative(k), x0.derivative(k)) {
            (Some(l), Some(rt)) => {
                left.extend_from_slice(l);
                right.extend_from_slice(rt);
            }
            _ => {
                for i in 0..n {
                    let chord = |a: usize| (x0.node(a + 1)[i] - x0.node(a)[i]) / g;
                    left.push(if k > 0 { chord(k - 1) } else { 0.0 });
                }
                for i in 0..n {
                    let chord = |a: usize| (x0.node(a + 1)[i] - x0.node(a)[i]) / g;
                    right.push(if k < lead { chord(k) } else { 0.0 });
                }
            }
        }
    }
    left[..n].iter_mut().for_each(|v| *v = 0.0);

    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut xs = vec![0.0; n];
    let mut xn = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut slope = vec![0.0; n];
    let mut dv = vec![0.0; d.dim()];
    let mut dm = vec![0.0; d.dim()];
    let mut de = vec![0.0; d.dim()];
    let mut status = Status::Completed;

    for step in 0..steps {
        let t_n = t0 + step as f64 * g;
        let t_mid = t_n + 0.5 * g;
        let t_next = t0 + (step + 1) as f64 * g;
        let seg = d.segment_index(t_n);
        d.eval_segment_into(seg, t_n, &mut dv);
        d.eval_segment_into(seg, t_mid, &mut dm);
        d.eval_segment_into(seg, t_next, &mut de);
        let jn = lead + step;
        xn.copy_from_slice(&states[jn * n..(jn + 1) * n]);
        {
            let dense = Dense {
                dim: n,
                t0,
                g,
                lead,
                states: &states,
                left: &left,
                right: &right,
            };
            sys.rhs_into(EvalPoint { t: t_n, regime: t_n }, &stage(dense, r, t_n, &xn, t_n, &xn), &dv, &mut k1);
            for i in 0..n {
                xs[i] = xn[i] + 0.5 * g * k1[i];
            }
            sys.rhs_into(EvalPoint { t: t_mid, regime: t_n }, &stage(dense, r, t_n, &xn, t_mid, &xs), &dm, &mut k2);
            for i in 0..n {
                xs[i] = xn[i] + 0.5 * g * k2[i];
            }
            sys.rhs_into(EvalPoint { t: t_mid, regime: t_n }, &stage(dense, r, t_n, &xn, t_mid, &xs), &dm, &mut k3);
            for i in 0..n {
                xs[i] = xn[i] + g * k3[i];
            }
            sys.rhs_into(EvalPoint { t: t_next, regime: t_n }, &stage(dense, r, t_n, &xn, t_next, &xs), &de, &mut k4);
            for i in 0..n {
                next[i] = xn[i] + g / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            sys.rhs_into(
                EvalPoint { t: t_next, regime: t_n },
                &stage(dense, r, t_n, &xn, t_next, &next),
                &de,
                &mut slope,
            );
        }
        let finite = k1.iter().chain(&next).chain(&slope).all(|v| v.is_finite());
        if k1.iter().all(|v| v.is_finite()) {
            right[jn * n..(jn + 1) * n].copy_from_slice(&k1);
        }
        if !finite || norm(&next) > cfg.overflow {
            if !k1.iter().all(|v| v.is_finite()) {
                let l = left[jn * n..(jn + 1) * n].to_vec();
                right[jn * n..(jn + 1) * n].copy_from_slice(&l);
            }
            status = Status::BlowUp { t_max: t_n };
            break;
        }
        states.extend_from_slice(&next);
        left.extend_from_slice(&slope);
        right.extend_from_slice(&slope);
    }
    // Without delay the only initial node is t0 itself; its left slope is
    // never used by windows of positive span beyond the constant extension.
    Ok(Trajectory {
        system: sys.name().to_string(),
        signal: d.label().to_string(),
        t0,
        grid_step: g,
        delay_span: r,
        dim: n,
        lead,
        states,
        left,
        right,
        status,
    })
}

fn stage<'a>(
    dense: Dense<'a>,
    span: f64,
    t_n: f64,
    x_n: &'a [f64],
    t_stage: f64,
    x_stage: &'a [f64],
) -> StageView<'a> {
    StageView {
        dense,
        span,
        t_n,
        x_n,
        t_stage,
        x_stage,
    }
}

impl Trajectory {
    fn dense(&self) -> Dense<'_> {
        Dense {
            dim: self.dim,
            t0: self.t0,
            g: self.grid_step,
            lead: self.lead,
            states: &self.states,
            left: &self.left,
            right: &self.right,
        }
    }

    pub fn system_name(&self) -> &str {
        &self.system
    }

    pub fn signal_label(&self) -> &str {
        &self.signal
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn grid_step(&self) -> f64 {
        self.grid_step
    }

    pub fn delay_span(&self) -> f64 {
        self.delay_span
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn is_completed(&self) -> bool {
        self.status == Status::Completed
    }

    fn last_node(&self) -> usize {
        self.states.len() / self.dim - 1
    }

    /// Number of completed steps after `t0`.
    pub fn steps(&self) -> usize {
        self.last_node() - self.lead
    }

    /// Last computed grid time.
    pub fn t_last(&self) -> f64 {
        self.time(self.steps())
    }

    /// Grid time `t0 + m·g`.
    pub fn time(&self, m: usize) -> f64 {
        self.t0 + m as f64 * self.grid_step
    }

    /// Grid times from `t0` to `t_last`.
    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps()).map(|m| self.time(m)).collect()
    }

    /// State at grid time `t0 + m·g`.
    pub fn state(&self, m: usize) -> &[f64] {
        let j = self.lead + m;
        &self.states[j * self.dim..(j + 1) * self.dim]
    }

    /// Index `m` with `t = t0 + m·g`.
    pub fn step_index(&self, t: f64) -> Result<usize> {
        let m = grid_multiple(t - self.t0, self.grid_step).ok_or(Error::OffGrid {
            what: "time",
            value: t,
            grid_step: self.grid_step,
        })?;
        if m > self.steps() {
            return Err(Error::OutOfRange {
                theta: t,
                span: self.t_last(),
            });
        }
        Ok(m)
    }

    /// Dense value `x(t)`; constant extension before `t0 - r`, clamped
    /// after `t_last`.
    pub fn value_at(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.dense().eval_into(t, &mut out);
        out
    }

    /// Right derivative at grid time `t0 + m·g`.
    pub fn right_derivative(&self, m: usize) -> &[f64] {
        let j = self.lead + m;
        &self.right[j * self.dim..(j + 1) * self.dim]
    }

    /// Left derivative at grid time `t0 + m·g`.
    pub fn left_derivative(&self, m: usize) -> &[f64] {
        let j = self.lead + m;
        &self.left[j * self.dim..(j + 1) * self.dim]
    }

    /// `T_span(t)x` at a grid time, with one-sided derivative samples.
    pub fn window(&self, t: f64, span: f64) -> Result<HistorySegment> {
        let m = self.step_index(t)?;
        let w = grid_multiple(span, self.grid_step).ok_or(Error::OffGrid {
            what: "window span",
            value: span,
            grid_step: self.grid_step,
        })?;
        let n = self.dim;
        let end = (self.lead + m) as isize;
        let mut samples = Vec::with_capacity((w + 1) * n);
        let mut left = Vec::with_capacity((w + 1) * n);
        let mut right = Vec::with_capacity((w + 1) * n);
        for j in (end - w as isize)..=end {
            if j < 0 {
                samples.extend_from_slice(&self.states[..n]);
                left.extend(std::iter::repeat(0.0).take(n));
                right.extend(std::iter::repeat(0.0).take(n));
            } else {
                let j = j as usize;
                samples.extend_from_slice(&self.states[j * n..(j + 1) * n]);
                left.extend_from_slice(&self.left[j * n..(j + 1) * n]);
                right.extend_from_slice(&self.right[j * n..(j + 1) * n]);
            }
        }
        if w == 0 {
            return HistorySegment::from_flat(n, self.grid_step, samples);
        }
        HistorySegment::from_flat(n, self.grid_step, samples)?.with_flat_slopes(left, right)
    }

    /// Window resampled on a grid `factor` times finer.
    pub fn window_refined(&self, t: f64, span: f64, factor: usize) -> Result<HistorySegment> {
        Ok(self.window(t, span)?.refine(factor))
    }

    /// The whole stored solution as one history ending at `t_last`.
    pub fn as_segment(&self) -> Result<HistorySegment> {
        let span = (self.last_node()) as f64 * self.grid_step;
        self.window(self.t_last(), span)
    }

    /// `‖T_span(t)x‖` for every grid time from `t0` to `t_last`.
    pub fn window_norms(&self, span: f64) -> Result<Vec<f64>> {
        let w = grid_multiple(span, self.grid_step).ok_or(Error::OffGrid {
            what: "window span",
            value: span,
            grid_step: self.grid_step,
        })?;
        let whole = self.as_segment()?;
        let node_norms: Vec<f64> = (0..whole.len()).map(|k| norm(whole.node(k))).collect();
        let cells = whole.cell_sup_norms();
        let first = node_norms[0];
        let mut out = Vec::with_capacity(self.steps() + 1);
        // Sliding maximum over the `w` cells that end at each node.
        let mut dq: VecDeque<usize> = VecDeque::new();
        for j in 0..=self.last_node() {
            if w == 0 {
                if j >= self.lead {
                    out.push(node_norms[j]);
                }
                continue;
            }
            if j > 0 {
                let c = j - 1;
                while dq.back().is_some_and(|&b| cells[b] <= cells[c]) {
                    dq.pop_back();
                }
                dq.push_back(c);
            }
            while dq.front().is_some_and(|&f| f + w < j) {
                dq.pop_front();
            }
            if j >= self.lead {
                let mut v = dq.front().map_or(node_norms[j], |&f| cells[f]);
                if j < w {
                    v = v.max(first);
                }
                out.push(v.max(node_norms[j]));
            }
        }
        Ok(out)
    }

    /// History view `T_span(t)x` at an arbitrary time inside the solution.
    pub fn view_at(&self, t: f64, span: f64) -> impl History + '_ {
        TimeView {
            dense: self.dense(),
            span,
            t,
        }
    }

    /// Largest violation of `x(t) = x(t_from) + ∫ f` over grid times in
    /// `[t_from, t_to]`, with per-cell Simpson quadrature of the right-hand
    /// side (node values from the stored one-sided derivatives, midpoints
    /// re-evaluated on the dense output).
    pub fn integral_residual(
        &self,
        sys: &RfdeSystem,
        d: &DisturbanceSignal,
        t_from: f64,
        t_to: f64,
    ) -> Result<f64> {
        let a = self.step_index(t_from)?;
        let b = self.step_index(t_to)?;
        let n = self.dim;
        let g = self.grid_step;
        let mut acc = self.state(a).to_vec();
        let mut fm = vec![0.0; n];
        let mut dm = vec![0.0; d.dim()];
        let mut worst: f64 = 0.0;
        for m in a..b {
            let t = self.time(m);
            let tm = t + 0.5 * g;
            let seg = d.segment_index(t);
            d.eval_segment_into(seg, tm, &mut dm);
            let view = TimeView {
                dense: self.dense(),
                span: self.delay_span,
                t: tm,
            };
            sys.rhs_into(EvalPoint { t: tm, regime: t }, &view, &dm, &mut fm);
            let fr = self.right_derivative(m);
            let fl = self.left_derivative(m + 1);
            for i in 0..n {
                acc[i] += g / 6.0 * (fr[i] + 4.0 * fm[i] + fl[i]);
            }
            let x = self.state(m + 1);
            let err = acc.iter().zip(x).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            worst = worst.max(err);
        }
        Ok(worst)
    }

    /// Writes `t,x1..xn,dx1..dxn` for every node from `t0 - r` on; the
    /// derivative column is the right derivative (left at the final node).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dim).map(|i| format!("x{i}")));
        header.extend((1..=self.dim).map(|i| format!("dx{i}")));
        wr.write_record(&header)?;
        let n = self.dim;
        let last = self.last_node();
        for j in 0..=last {
            let t = self.t0 + (j as f64 - self.lead as f64) * self.grid_step;
            let mut row = vec![crate::history::fmt_f64(t)];
            row.extend(self.states[j * n..(j + 1) * n].iter().map(|v| crate::history::fmt_f64(*v)));
            let ds = if j == last { &self.left } else { &self.right };
            row.extend(ds[j * n..(j + 1) * n].iter().map(|v| crate::history::fmt_f64(*v)));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn metadata(&self) -> TrajectoryMeta {
        TrajectoryMeta {
            system: self.system.clone(),
            signal: self.signal.clone(),
            t0: self.t0,
            t_last: self.t_last(),
            grid_step: self.grid_step,
            delay_span: self.delay_span,
            status: self.status,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryMeta {
    pub system: String,
    pub signal: String,
    pub t0: f64,
    pub t_last: f64,
    pub grid_step: f64,
    pub delay_span: f64,
    pub status: Status,
}

/// Measured and predicted separation of two solutions.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuityGap {
    pub times: Vec<f64>,
    /// `‖T_r(t)x - T_r(t)y‖`.
    pub measured: Vec<f64>,
    /// `‖x0 - y0‖ exp(L̃ (t - t0))` with `L̃ = L(t, sup‖T_r x‖ + sup‖T_r y‖)`.
    pub bound: Vec<f64>,
}

impl ContinuityGap {
    /// Largest `measured / bound - 1` (0 where both vanish).
    pub fn worst_excess(&self) -> f64 {
        self.measured
            .iter()
            .zip(&self.bound)
            .map(|(m, b)| if *b > 0.0 { m / b - 1.0 } else if *m > 0.0 { f64::INFINITY } else { -1.0 })
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Integrates from `x0` and `y0` and compares the gap with the Gronwall
/// bound on the common domain.
pub fn continuity_gap(
    sys: &RfdeSystem,
    t0: f64,
    x0: &HistorySegment,
    y0: &HistorySegment,
    d: &DisturbanceSignal,
    t_end: f64,
    cfg: &IntegratorConfig,
) -> Result<ContinuityGap> {
    let l = sys
        .lipschitz()
        .ok_or(Error::Missing("one-sided Lipschitz modulus"))?
        .clone();
    let x = integrate(sys, t0, x0, d, t_end, cfg)?;
    let y = integrate(sys, t0, y0, d, t_end, cfg)?;
    let r = sys.delay_span();
    let steps = x.steps().min(y.steps());
    let nx = x.window_norms(r)?;
    let ny = y.window_norms(r)?;
    let init = x.window(t0, r)?.sub(&y.window(t0, r)?)?.sup_norm();
    let mut sx: f64 = 0.0;
    let mut sy: f64 = 0.0;
    let mut gap = ContinuityGap {
        times: Vec::with_capacity(steps + 1),
        measured: Vec::with_capacity(steps + 1),
        bound: Vec::with_capacity(steps + 1),
    };
    for m in 0..=steps {
        let t = x.time(m);
        sx = sx.max(nx[m]);
        sy = sy.max(ny[m]);
        let diff = x.window(t, r)?.sub(&y.window(t, r)?)?.sup_norm();
        gap.times.push(t);
        gap.measured.push(diff);
        gap.bound.push(init * (l(t, sx + sy) * (t - t0)).exp());
    }
    Ok(gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{example212, linear_delay, quadratic_blowup, scalar_decay};
    use approx::assert_abs_diff_eq;

    fn exact_linear_delay(t: f64) -> f64 {
        if t <= 1.0 {
            1.0 - t
        } else {
            1.0 - t + (t - 1.0) * (t - 1.0) / 2.0
        }
    }

    #[test]
    fn zero_stays_zero() {
        let sys = example212(1.0, 1.1, 0.4).unwrap();
        let x0 = HistorySegment::constant(0.4, 0.004, &[0.0]).unwrap();
        let d = DisturbanceSignal::bang_bang(sys.disturbance_box().clone(), &[1.0, 2.0], None)
            .unwrap();
        let tr = integrate(&sys, 0.0, &x0, &d, 5.0, &IntegratorConfig::default()).unwrap();
        assert!(tr.is_completed());
        assert!((0..=tr.steps()).all(|m| tr.state(m)[0] == 0.0));
    }

    #[test]
    fn method_of_steps_oracle() {
        let sys = linear_delay();
        let x0 = HistorySegment::constant(1.0, 0.01, &[1.0]).unwrap();
        let tr =
            integrate(&sys, 0.0, &x0, &DisturbanceSignal::none(), 2.0, &IntegratorConfig::default())
                .unwrap();
        for m in 0..=tr.steps() {
            let t = tr.time(m);
            assert_abs_diff_eq!(tr.state(m)[0], exact_linear_delay(t), epsilon = 1e-10);
        }
        assert_abs_diff_eq!(tr.value_at(1.505)[0], exact_linear_delay(1.505), epsilon = 1e-9);
    }

    #[test]
    fn deterministic() {
        let sys = example212(1.0, 1.1, 0.4).unwrap();
        let x0 = HistorySegment::from_fn(0.4, 0.004, 1, |t| vec![(3.0 * t).cos()]).unwrap();
        let d = DisturbanceSignal::bang_bang(sys.disturbance_box().clone(), &[0.5, 1.2], None)
            .unwrap();
        let cfg = IntegratorConfig::default();
        let a = integrate(&sys, 0.0, &x0, &d, 3.0, &cfg).unwrap();
        let b = integrate(&sys, 0.0, &x0, &d, 3.0, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn blow_up_time() {
        let sys = quadratic_blowup(1.0).unwrap();
        let x0 = HistorySegment::constant(1.0, 0.01, &[2.0]).unwrap();
        let tr =
            integrate(&sys, 0.0, &x0, &DisturbanceSignal::none(), 2.0, &IntegratorConfig::default())
                .unwrap();
        match tr.status() {
            Status::BlowUp { t_max } => assert!((t_max - 0.5).abs() <= 0.05, "{t_max}"),
            s => panic!("expected blow-up, got {s:?}"),
        }
    }

    #[test]
    fn errors() {
        let sys = example212(1.0, 1.1, 0.4).unwrap();
        let x0 = HistorySegment::constant(0.4, 0.004, &[1.0]).unwrap();
        let d = DisturbanceSignal::constant(sys.disturbance_box().clone(), vec![1.0]).unwrap();
        let bad = IntegratorConfig::with_grid_step(0.003);
        assert!(matches!(
            integrate(&sys, 0.0, &x0, &d, 1.0, &bad),
            Err(Error::OffGrid { .. })
        ));
        assert!(integrate(&sys, 1.0, &x0, &d, 1.0, &IntegratorConfig::default()).is_err());
        let off = DisturbanceSignal::bang_bang(sys.disturbance_box().clone(), &[0.0015], None)
            .unwrap();
        assert!(matches!(
            integrate(&sys, 0.0, &x0, &off, 1.0, &IntegratorConfig::default()),
            Err(Error::MisalignedDiscontinuity { .. })
        ));
    }

    #[test]
    fn windows_and_norms() {
        let sys = scalar_decay();
        let x0 = HistorySegment::point(&[1.0]).unwrap();
        let tr =
            integrate(&sys, 0.0, &x0, &DisturbanceSignal::none(), 1.0, &IntegratorConfig::default())
                .unwrap();
        let w = tr.window(0.5, 0.0).unwrap();
        assert_abs_diff_eq!(w.current()[0], (-0.5f64).exp(), epsilon = 1e-9);
        let norms = tr.window_norms(0.0).unwrap();
        assert_abs_diff_eq!(norms[100], (-1.0f64).exp(), epsilon = 1e-9);

        let sys = example212(1.0, 1.1, 0.4).unwrap();
        let x0 = HistorySegment::from_fn(0.4, 0.004, 1, |t| vec![(7.0 * t).sin() + 0.2]).unwrap();
        let d = DisturbanceSignal::constant(sys.disturbance_box().clone(), vec![1.1]).unwrap();
        let tr = integrate(&sys, 0.0, &x0, &d, 3.0, &IntegratorConfig::default()).unwrap();
        let fast = tr.window_norms(0.8).unwrap();
        for m in [0usize, 50, 100, 400, 750] {
            let slow = tr.window(tr.time(m), 0.8).unwrap().sup_norm();
            assert_abs_diff_eq!(fast[m], slow, epsilon = 1e-12);
        }
        let w0 = tr.window(0.0, 0.4).unwrap();
        for k in 0..w0.len() {
            assert_eq!(w0.node(k), x0.node(k));
        }
    }

    #[test]
    fn continuity_gap_bound() {
        let sys = example212(1.0, 1.1, 0.4).unwrap();
        let x0 = HistorySegment::from_fn(0.4, 0.004, 1, |t| vec![1.0 + t]).unwrap();
        let y0 = HistorySegment::from_fn(0.4, 0.004, 1, |t| vec![0.5 - 2.0 * t]).unwrap();
        let d = DisturbanceSignal::bang_bang(sys.disturbance_box().clone(), &[1.0], None).unwrap();
        let cfg = IntegratorConfig::default();
        let gap = continuity_gap(&sys, 0.0, &x0, &y0, &d, 5.0, &cfg).unwrap();
        assert!(gap.worst_excess() <= 1e-3);
        assert!(gap.bound.windows(2).all(|w| w[1] >= w[0]));
        let same = continuity_gap(&sys, 0.0, &x0, &x0, &d, 5.0, &cfg).unwrap();
        assert!(same.measured.iter().all(|m| *m == 0.0));
    }

    #[test]
    fn residual_small() {
        let sys = example212(1.0, 1.1, 0.4).unwrap();
        let x0 = HistorySegment::from_fn(0.4, 0.004, 1, |t| vec![(5.0 * t).cos()]).unwrap();
        let d = DisturbanceSignal::bang_bang(sys.disturbance_box().clone(), &[0.6, 1.3], None)
            .unwrap();
        let tr = integrate(&sys, 0.0, &x0, &d, 3.0, &IntegratorConfig::default()).unwrap();
        assert!(tr.integral_residual(&sys, &d, 0.0, 3.0).unwrap() < 1e-8);
    }
}
