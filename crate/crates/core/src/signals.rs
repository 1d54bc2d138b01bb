//! Disturbance inputs: right-continuous, piecewise-continuous maps into a box.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BOX_TOL: f64 = 1e-12;

/// Axis-aligned disturbance set `D ⊂ ℝˡ`. Coordinates may be declared
/// unbounded (serialized as `null`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceBox {
    #[serde(with = "lower_bounds")]
    lower: Vec<f64>,
    #[serde(with = "upper_bounds")]
    upper: Vec<f64>,
}

macro_rules! bound_serde {
    ($name:ident, $missing:expr) => {
        mod $name {
            use serde::{Deserialize, Deserializer, Serialize, Serializer};

            pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
                let opt: Vec<Option<f64>> =
                    v.iter().map(|x| x.is_finite().then_some(*x)).collect();
                opt.serialize(s)
            }

            pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
                let opt: Vec<Option<f64>> = Vec::deserialize(d)?;
                Ok(opt.into_iter().map(|x| x.unwrap_or($missing)).collect())
            }
        }
    };
}

bound_serde!(lower_bounds, f64::NEG_INFINITY);
bound_serde!(upper_bounds, f64::INFINITY);

impl DisturbanceBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension {
                what: "box bounds",
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if l.is_nan() || u.is_nan() || l > u || *l == f64::INFINITY || *u == f64::NEG_INFINITY
            {
                return Err(Error::InvalidSignal(format!(
                    "box coordinate {i}: need lower <= upper, got [{l}, {u}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// One-dimensional box `[a, b]`.
    pub fn interval(a: f64, b: f64) -> Result<Self> {
        Self::new(vec![a], vec![b])
    }

    /// The zero-dimensional box, for systems without disturbance input.
    pub fn empty() -> Self {
        Self {
            lower: Vec::new(),
            upper: Vec::new(),
        }
    }

    /// Validates bounds after deserialization.
    pub fn validated(self) -> Result<Self> {
        Self::new(self.lower, self.upper)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn is_bounded(&self) -> bool {
        self.lower.iter().chain(&self.upper).all(|v| v.is_finite())
    }

    pub fn contains(&self, d: &[f64]) -> bool {
        d.len() == self.dim()
            && d.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| {
                let tol = BOX_TOL * (1.0 + v.abs());
                *v >= l - tol && *v <= u + tol
            })
    }

    pub fn clamp(&self, d: &mut [f64]) {
        for (v, (l, u)) in d.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*l, *u);
        }
    }

    /// All `2ˡ` corners (duplicates collapsed for degenerate coordinates).
    pub fn vertices(&self) -> Result<Vec<Vec<f64>>> {
        if !self.is_bounded() {
            return Err(Error::InvalidSignal("vertices of an unbounded box".into()));
        }
        let mut out: Vec<Vec<f64>> = vec![Vec::new()];
        for (l, u) in self.lower.iter().zip(&self.upper) {
            let mut next = Vec::with_capacity(out.len() * 2);
            for v in &out {
                let mut a = v.clone();
                a.push(*l);
                next.push(a);
                if u > l {
                    let mut b = v.clone();
                    b.push(*u);
                    next.push(b);
                }
            }
            out = next;
        }
        Ok(out)
    }

    /// Uniform sample; unbounded coordinates are rejected.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        if !self.is_bounded() {
            return Err(Error::InvalidSignal("cannot sample an unbounded box".into()));
        }
        Ok(self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| if u > l { rng.gen_range(*l..=*u) } else { *l })
            .collect())
    }

    /// Random corner.
    pub fn sample_vertex<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        if !self.is_bounded() {
            return Err(Error::InvalidSignal("vertices of an unbounded box".into()));
        }
        Ok(self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| if rng.gen_bool(0.5) { *l } else { *u })
            .collect())
    }

    /// Smallest box containing both.
    pub fn hull(&self, other: &DisturbanceBox) -> Result<DisturbanceBox> {
        if self.dim() != other.dim() {
            return Err(Error::Dimension {
                what: "box",
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(DisturbanceBox {
            lower: self.lower.iter().zip(&other.lower).map(|(a, b)| a.min(*b)).collect(),
            upper: self.upper.iter().zip(&other.upper).map(|(a, b)| a.max(*b)).collect(),
        })
    }
}

/// Continuous evaluator of one piece.
#[derive(Clone, Debug, PartialEq)]
pub enum PieceFn {
    Constant(Vec<f64>),
    /// `center + amplitude·sin(ω t + phase)` per coordinate, clipped to the box.
    Sinusoid {
        center: Vec<f64>,
        amplitude: Vec<f64>,
        omega: f64,
        phase: f64,
    },
}

impl PieceFn {
    fn eval_into(&self, t: f64, out: &mut [f64]) {
        match self {
            PieceFn::Constant(v) => out.copy_from_slice(v),
            PieceFn::Sinusoid {
                center,
                amplitude,
                omega,
                phase,
            } => {
                let s = (omega * t + phase).sin();
                for (o, (c, a)) in out.iter_mut().zip(center.iter().zip(amplitude)) {
                    *o = c + a * s;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Segment {
    /// First time at which the piece is active; `-∞` for the leading piece.
    start: f64,
    /// The piece is evaluated at `t + offset`.
    offset: f64,
    f: PieceFn,
}

/// A member of the admissible input class: finitely many pieces on every
/// bounded interval, right-continuous at each switch.
#[derive(Clone, Debug, PartialEq)]
pub struct DisturbanceSignal {
    bx: DisturbanceBox,
    segments: Vec<Segment>,
    label: String,
}

impl DisturbanceSignal {
    fn from_pieces(
        bx: DisturbanceBox,
        switch_times: &[f64],
        pieces: Vec<PieceFn>,
        label: String,
    ) -> Result<Self> {
        if pieces.len() != switch_times.len() + 1 {
            return Err(Error::InvalidSignal(format!(
                "{} switch times need {} pieces, got {}",
                switch_times.len(),
                switch_times.len() + 1,
                pieces.len()
            )));
        }
        if switch_times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidSignal("switch times must be finite".into()));
        }
        if switch_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidSignal("switch times must be strictly increasing".into()));
        }
        for p in &pieces {
            if let PieceFn::Constant(v) = p {
                if v.len() != bx.dim() {
                    return Err(Error::Dimension {
                        what: "signal value",
                        expected: bx.dim(),
                        got: v.len(),
                    });
                }
                if !bx.contains(v) {
                    return Err(Error::InvalidSignal(format!("value {v:?} lies outside the box")));
                }
            }
        }
        let segments = pieces
            .into_iter()
            .enumerate()
            .map(|(i, f)| Segment {
                start: if i == 0 { f64::NEG_INFINITY } else { switch_times[i - 1] },
                offset: 0.0,
                f,
            })
            .collect();
        Ok(Self {
            bx,
            segments,
            label,
        })
    }

    /// `d ≡ value`.
    pub fn constant(bx: DisturbanceBox, value: Vec<f64>) -> Result<Self> {
        Self::from_pieces(bx, &[], vec![PieceFn::Constant(value)], "constant".into())
    }

    /// The input for systems without disturbances.
    pub fn none() -> Self {
        Self::constant(DisturbanceBox::empty(), Vec::new()).expect("empty signal is valid")
    }

    /// Step function with `values[i]` on `[switch_times[i-1], switch_times[i])`.
    pub fn piecewise_constant(
        bx: DisturbanceBox,
        switch_times: &[f64],
        values: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let pieces = values.into_iter().map(PieceFn::Constant).collect();
        Self::from_pieces(bx, switch_times, pieces, "piecewise_constant".into())
    }

    /// Step function through box vertices. Without explicit `vertices` the
    /// values alternate between the lower and upper corner, starting low.
    pub fn bang_bang(
        bx: DisturbanceBox,
        switch_times: &[f64],
        vertices: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let values = match vertices {
            Some(v) => {
                let corners = bx.vertices()?;
                for val in &v {
                    let is_corner = corners
                        .iter()
                        .any(|c| c.iter().zip(val).all(|(a, b)| (a - b).abs() <= BOX_TOL));
                    if val.len() != bx.dim() || !is_corner {
                        return Err(Error::InvalidSignal(format!(
                            "bang-bang value {val:?} is not a box vertex"
                        )));
                    }
                }
                v
            }
            None => {
                if !bx.is_bounded() {
                    return Err(Error::InvalidSignal("bang-bang needs a bounded box".into()));
                }
                (0..=switch_times.len())
                    .map(|i| {
                        if i % 2 == 0 {
                            bx.lower.clone()
                        } else {
                            bx.upper.clone()
                        }
                    })
                    .collect()
            }
        };
        let mut s = Self::piecewise_constant(bx, switch_times, values)?;
        s.label = format!("bang_bang({})", switch_times.len());
        Ok(s)
    }

    /// Smooth sinusoid clipped to the box.
    pub fn sinusoid(
        bx: DisturbanceBox,
        center: Vec<f64>,
        amplitude: Vec<f64>,
        omega: f64,
        phase: f64,
    ) -> Result<Self> {
        if center.len() != bx.dim() || amplitude.len() != bx.dim() {
            return Err(Error::Dimension {
                what: "sinusoid parameters",
                expected: bx.dim(),
                got: center.len().min(amplitude.len()),
            });
        }
        if !omega.is_finite() || !phase.is_finite() {
            return Err(Error::InvalidSignal("sinusoid parameters must be finite".into()));
        }
        let f = PieceFn::Sinusoid {
            center,
            amplitude,
            omega,
            phase,
        };
        Self::from_pieces(bx, &[], vec![f], "sinusoid".into())
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn disturbance_box(&self) -> &DisturbanceBox {
        &self.bx
    }

    pub fn dim(&self) -> usize {
        self.bx.dim()
    }

    /// Index of the piece active at `t` (right-continuous convention).
    pub fn segment_index(&self, t: f64) -> usize {
        self.segments.partition_point(|s| s.start <= t).saturating_sub(1)
    }

    /// Evaluates piece `idx` at `t`, whether or not it is active there. Used
    /// for left limits at the end of a step.
    pub fn eval_segment_into(&self, idx: usize, t: f64, out: &mut [f64]) {
        let seg = &self.segments[idx];
        seg.f.eval_into(t + seg.offset, out);
        self.bx.clamp(out);
    }

    /// `d(t)`, the right limit at switches.
    pub fn value_into(&self, t: f64, out: &mut [f64]) {
        self.eval_segment_into(self.segment_index(t), t, out);
    }

    pub fn value(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.value_into(t, &mut out);
        out
    }

    /// `d(t⁻)`.
    pub fn left_limit(&self, t: f64) -> Vec<f64> {
        let idx = self.segments.partition_point(|s| s.start < t).saturating_sub(1);
        let mut out = vec![0.0; self.dim()];
        self.eval_segment_into(idx, t, &mut out);
        out
    }

    /// All switch times.
    pub fn discontinuity_times(&self) -> Vec<f64> {
        self.segments.iter().skip(1).map(|s| s.start).collect()
    }

    /// Switch times in the open interval `(a, b)`.
    pub fn discontinuities_in(&self, a: f64, b: f64) -> Vec<f64> {
        self.segments
            .iter()
            .skip(1)
            .map(|s| s.start)
            .filter(|t| *t > a && *t < b)
            .collect()
    }

    /// `(shift d)(t) = d(t + t0)`. Negative `t0` delays the signal.
    pub fn shift(&self, t0: f64) -> DisturbanceSignal {
        if t0 == 0.0 {
            return self.clone();
        }
        let first = self.segment_index(t0);
        let segments = self.segments[first..]
            .iter()
            .enumerate()
            .map(|(i, s)| Segment {
                start: if i == 0 { f64::NEG_INFINITY } else { s.start - t0 },
                offset: s.offset + t0,
                f: s.f.clone(),
            })
            .collect();
        DisturbanceSignal {
            bx: self.bx.clone(),
            segments,
            label: self.label.clone(),
        }
    }

    /// The signal `τ ↦ self(τ - t)`, i.e. `self` started at time `t`.
    pub fn delayed(&self, t: f64) -> DisturbanceSignal {
        self.shift(-t)
    }

    /// `head` on `(-∞, t_split)` and `tail(· - t_split)` from `t_split` on.
    pub fn concat(
        head: &DisturbanceSignal,
        t_split: f64,
        tail: &DisturbanceSignal,
    ) -> Result<DisturbanceSignal> {
        let bx = head.bx.hull(&tail.bx)?;
        let moved = tail.delayed(t_split);
        let mut segments: Vec<Segment> = head
            .segments
            .iter()
            .filter(|s| s.start < t_split)
            .cloned()
            .collect();
        let from = moved.segment_index(t_split);
        for (i, s) in moved.segments[from..].iter().enumerate() {
            let mut s = s.clone();
            if i == 0 {
                s.start = if segments.is_empty() {
                    f64::NEG_INFINITY
                } else {
                    t_split
                };
            }
            segments.push(s);
        }
        Ok(DisturbanceSignal {
            bx,
            segments,
            label: format!("{}|{}", head.label, tail.label),
        })
    }

    /// Random step function on `[0, horizon)` with `switches` grid-aligned
    /// switch times and values uniform in the box.
    pub fn random_piecewise_constant<R: Rng + ?Sized>(
        bx: &DisturbanceBox,
        rng: &mut R,
        horizon: f64,
        grid_step: f64,
        switches: usize,
    ) -> Result<Self> {
        let times = random_switch_times(rng, horizon, grid_step, switches);
        let values = (0..=times.len())
            .map(|_| bx.sample(rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::piecewise_constant(bx.clone(), &times, values)?
            .with_label(format!("random_piecewise({})", times.len())))
    }

    /// Random bang-bang signal through random vertices.
    pub fn random_bang_bang<R: Rng + ?Sized>(
        bx: &DisturbanceBox,
        rng: &mut R,
        horizon: f64,
        grid_step: f64,
        switches: usize,
    ) -> Result<Self> {
        let times = random_switch_times(rng, horizon, grid_step, switches);
        let values = (0..=times.len())
            .map(|_| bx.sample_vertex(rng))
            .collect::<Result<Vec<_>>>()?;
        Self::bang_bang(bx.clone(), &times, Some(values))
    }
}

/// Distinct grid times in `(0, horizon)`, sorted.
pub fn random_switch_times<R: Rng + ?Sized>(
    rng: &mut R,
    horizon: f64,
    grid_step: f64,
    count: usize,
) -> Vec<f64> {
    let cells = (horizon / grid_step).floor() as usize;
    if cells < 2 || count == 0 {
        return Vec::new();
    }
    let mut ks: Vec<usize> = (0..count).map(|_| rng.gen_range(1..cells)).collect();
    ks.sort_unstable();
    ks.dedup();
    ks.into_iter().map(|k| k as f64 * grid_step).collect()
}

/// JSON description of a signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalSpec {
    pub kind: SignalKind,
    #[serde(rename = "box")]
    pub bx: DisturbanceBox,
    #[serde(default)]
    pub switch_times: Vec<f64>,
    #[serde(default)]
    pub values: Option<Vec<Vec<f64>>>,
    /// Sinusoid parameters for `smooth`.
    #[serde(default)]
    pub center: Option<Vec<f64>>,
    #[serde(default)]
    pub amplitude: Option<Vec<f64>>,
    #[serde(default)]
    pub omega: Option<f64>,
    #[serde(default)]
    pub phase: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    Constant,
    PiecewiseConstant,
    BangBang,
    Smooth,
}

/// Builds a signal from its JSON description.
pub fn make_signal(spec: &SignalSpec) -> Result<DisturbanceSignal> {
    let bx = spec.bx.clone().validated()?;
    match spec.kind {
        SignalKind::Constant => {
            let v = match &spec.values {
                Some(v) if v.len() == 1 => v[0].clone(),
                Some(_) => {
                    return Err(Error::InvalidSignal("constant signal needs one value".into()))
                }
                None => bx.lower().to_vec(),
            };
            DisturbanceSignal::constant(bx, v)
        }
        SignalKind::PiecewiseConstant => {
            let values = spec
                .values
                .clone()
                .ok_or(Error::Missing("values for piecewise_constant signal"))?;
            DisturbanceSignal::piecewise_constant(bx, &spec.switch_times, values)
        }
        SignalKind::BangBang => {
            DisturbanceSignal::bang_bang(bx, &spec.switch_times, spec.values.clone())
        }
        SignalKind::Smooth => {
            let center = match &spec.center {
                Some(c) => c.clone(),
                None => bx
                    .lower()
                    .iter()
                    .zip(bx.upper())
                    .map(|(l, u)| 0.5 * (l + u))
                    .collect(),
            };
            let amplitude = match &spec.amplitude {
                Some(a) => a.clone(),
                None => bx
                    .lower()
                    .iter()
                    .zip(bx.upper())
                    .map(|(l, u)| 0.5 * (u - l))
                    .collect(),
            };
            DisturbanceSignal::sinusoid(
                bx,
                center,
                amplitude,
                spec.omega.unwrap_or(1.0),
                spec.phase.unwrap_or(0.0),
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit() -> DisturbanceBox {
        DisturbanceBox::interval(1.0, 1.1).unwrap()
    }

    #[test]
    fn constant_everywhere() {
        let d = DisturbanceSignal::constant(unit(), vec![1.0]).unwrap();
        for t in [-3.0, 0.0, 2.5, 1e6] {
            assert_eq!(d.value(t), vec![1.0]);
        }
        assert_eq!(d.shift(7.3).value(0.1), vec![1.0]);
    }

    #[test]
    fn bang_bang_alternates_right_continuously() {
        let d = DisturbanceSignal::bang_bang(unit(), &[1.0, 2.0, 3.0], None).unwrap();
        assert_eq!(d.value(0.999), vec![1.0]);
        assert_eq!(d.value(1.0), vec![1.1]);
        assert_eq!(d.left_limit(1.0), vec![1.0]);
        assert_eq!(d.value(2.0), vec![1.0]);
        assert_eq!(d.value(3.0), vec![1.1]);
        assert_eq!(d.discontinuity_times(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn box_violation_and_bad_times() {
        let e = DisturbanceSignal::piecewise_constant(unit(), &[1.0], vec![vec![1.0], vec![2.1]]);
        assert!(matches!(e, Err(Error::InvalidSignal(_))));
        let e = DisturbanceSignal::piecewise_constant(
            unit(),
            &[2.0, 1.0],
            vec![vec![1.0], vec![1.0], vec![1.0]],
        );
        assert!(e.is_err());
    }

    #[test]
    fn shift_moves_steps() {
        let d = DisturbanceSignal::piecewise_constant(unit(), &[5.0], vec![vec![1.0], vec![1.1]])
            .unwrap();
        assert_eq!(d.shift(0.0), d);
        let s = d.shift(3.0);
        assert_eq!(s.value(1.9), vec![1.0]);
        assert_eq!(s.value(2.0), vec![1.1]);
    }

    #[test]
    fn concat_cases() {
        let a = DisturbanceSignal::constant(unit(), vec![1.0]).unwrap();
        let b = DisturbanceSignal::constant(unit(), vec![1.1]).unwrap();
        let c = DisturbanceSignal::concat(&a, 2.0, &b).unwrap();
        assert_eq!(c.value(1.99), vec![1.0]);
        assert_eq!(c.value(2.0), vec![1.1]);
        let z = DisturbanceSignal::concat(&a, 0.0, &b).unwrap();
        for t in [0.0, 0.5, 10.0] {
            assert_eq!(z.value(t), b.value(t));
        }
        let same = DisturbanceSignal::concat(&a, 3.0, &a).unwrap();
        for t in [0.0, 2.9, 3.0, 8.0] {
            assert_eq!(same.value(t), vec![1.0]);
        }
    }

    #[test]
    fn concat_tail_is_relative() {
        let a = DisturbanceSignal::constant(unit(), vec![1.0]).unwrap();
        let b = DisturbanceSignal::bang_bang(unit(), &[0.5], None).unwrap();
        let c = DisturbanceSignal::concat(&a, 2.0, &b).unwrap();
        assert_eq!(c.value(2.2), vec![1.0]);
        assert_eq!(c.value(2.5), vec![1.1]);
        assert_eq!(c.discontinuity_times(), vec![2.0, 2.5]);
    }

    #[test]
    fn sinusoid_clipped() {
        let bx = DisturbanceBox::interval(-1.0, 1.0).unwrap();
        let d = DisturbanceSignal::sinusoid(bx.clone(), vec![0.5], vec![2.0], 3.0, 0.0).unwrap();
        for k in 0..200 {
            assert!(bx.contains(&d.value(k as f64 * 0.037)));
        }
    }

    #[test]
    fn make_signal_from_json() {
        let spec: SignalSpec = serde_json::from_str(
            r#"{"kind":"bang_bang","box":{"lower":[1.0],"upper":[1.1]},"switch_times":[1,2,3]}"#,
        )
        .unwrap();
        let d = make_signal(&spec).unwrap();
        assert_eq!(d.value(1.5), vec![1.1]);
        let spec: SignalSpec = serde_json::from_str(
            r#"{"kind":"constant","box":{"lower":[null],"upper":[2.0]},"values":[[0.0]]}"#,
        )
        .unwrap();
        let d = make_signal(&spec).unwrap();
        assert_eq!(d.value(0.0), vec![0.0]);
        assert!(!d.disturbance_box().is_bounded());
    }

    #[test]
    fn random_generators_snap_to_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bx = DisturbanceBox::new(vec![-1.0, 0.0], vec![1.0, 2.0]).unwrap();
        let d = DisturbanceSignal::random_piecewise_constant(&bx, &mut rng, 5.0, 0.01, 6).unwrap();
        for t in d.discontinuity_times() {
            let k = t / 0.01;
            assert!((k - k.round()).abs() < 1e-9);
        }
        let b = DisturbanceSignal::random_bang_bang(&bx, &mut rng, 5.0, 0.01, 3).unwrap();
        let corners = bx.vertices().unwrap();
        for k in 0..100 {
            let v = b.value(k as f64 * 0.05);
            assert!(corners.contains(&v));
        }
    }
}
