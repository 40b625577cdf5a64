//! Shared vocabulary: segments, action intervals, observations, parameters and constants.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::random::RandomStream;

/// Index of a segment inside its [`SegmentSpace`].
pub type SegmentId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: String,
    pub weight: f64,
    /// Unit cost entering the margin reward.
    pub cost: f64,
}

/// Finite feature space with a categorical arrival distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSpace {
    segments: Vec<Segment>,
    cumulative: Vec<f64>,
}

impl SegmentSpace {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::invariant(
                "segments",
                "at least one segment is required",
            ));
        }
        for (i, s) in segments.iter().enumerate() {
            if !(s.weight.is_finite() && s.weight >= 0.0) {
                return Err(Error::invariant(
                    format!("segments[{i}].weight"),
                    format!("weight {} must be finite and >= 0", s.weight),
                ));
            }
            if !(s.cost.is_finite() && s.cost >= 0.0) {
                return Err(Error::invariant(
                    format!("segments[{i}].cost"),
                    format!("cost {} must be finite and >= 0", s.cost),
                ));
            }
            let valid_id = !s.id.is_empty()
                && s.id
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
            if !valid_id {
                return Err(Error::invariant(
                    format!("segments[{i}].id"),
                    format!(
                        "id {:?} must be non-empty ASCII letters, digits, '_', '-' or '.'",
                        s.id
                    ),
                ));
            }
            if segments[..i].iter().any(|o| o.id == s.id) {
                return Err(Error::invariant(
                    format!("segments[{i}].id"),
                    format!("duplicate segment id {:?}", s.id),
                ));
            }
        }
        let total: f64 = segments.iter().map(|s| s.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invariant(
                "segments.weights",
                format!("weights sum to {total}, expected 1"),
            ));
        }
        let mut acc = 0.0;
        let cumulative = segments
            .iter()
            .map(|s| {
                acc += s.weight;
                acc
            })
            .collect();
        Ok(Self {
            segments,
            cumulative,
        })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn weight(&self, x: SegmentId) -> f64 {
        self.segments[x].weight
    }

    pub fn cost(&self, x: SegmentId) -> f64 {
        self.segments[x].cost
    }

    pub fn id(&self, x: SegmentId) -> &str {
        &self.segments[x].id
    }

    pub fn index_of(&self, id: &str) -> Option<SegmentId> {
        self.segments.iter().position(|s| s.id == id)
    }

    /// Draws a segment with probability equal to its weight. Consumes exactly one uniform.
    pub fn sample(&self, rng: &mut RandomStream) -> SegmentId {
        let u = rng.uniform();
        if let Some(i) = self.cumulative.iter().position(|&c| u < c) {
            return i;
        }
        // Rounding left the last cumulative weight slightly below 1.
        self.segments
            .iter()
            .rposition(|s| s.weight > 0.0)
            .expect("weights sum to one")
    }
}

/// Free-function form of [`SegmentSpace::sample`].
pub fn sample_segment(space: &SegmentSpace, rng: &mut RandomStream) -> SegmentId {
    space.sample(rng)
}

/// Compact admissible price interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionInterval {
    lo: f64,
    hi: f64,
}

impl ActionInterval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::invariant(
                "actions",
                "interval bounds must be finite",
            ));
        }
        if lo >= hi {
            return Err(Error::invariant(
                "actions",
                format!("lower bound {lo} must be below upper bound {hi}"),
            ));
        }
        Ok(Self { lo, hi })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, a: f64) -> bool {
        a >= self.lo && a <= self.hi
    }

    /// Euclidean projection onto the interval.
    pub fn project(&self, a: f64) -> Result<f64> {
        if !a.is_finite() {
            return Err(Error::NonFinite(format!("action {a} cannot be projected")));
        }
        Ok(a.clamp(self.lo, self.hi))
    }

    /// `n >= 2` evenly spaced points including both endpoints.
    pub fn grid(&self, n: usize) -> Vec<f64> {
        assert!(n >= 2, "grid needs at least two points");
        let step = self.width() / (n - 1) as f64;
        (0..n)
            .map(|i| {
                if i == n - 1 {
                    self.hi
                } else {
                    self.lo + step * i as f64
                }
            })
            .collect()
    }
}

pub fn project_action(interval: &ActionInterval, a: f64) -> Result<f64> {
    interval.project(a)
}

/// One interaction `(x_t, a_t, y_t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub t: u64,
    pub x: SegmentId,
    pub a: f64,
    pub y: f64,
    pub explored: bool,
}

/// A point of the parameter space; holds both the ground truth and running estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector(DVector<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invariant(
                "theta",
                "parameter dimension must be >= 1",
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("theta[{i}] = {}", values[i])));
        }
        Ok(Self(DVector::from_vec(values)))
    }

    pub fn zeros(d: usize) -> Self {
        Self(DVector::zeros(d))
    }

    pub fn from_vector(v: DVector<f64>) -> Result<Self> {
        Self::new(v.iter().copied().collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn distance_sq(&self, other: &ParameterVector) -> f64 {
        (&self.0 - &other.0).norm_squared()
    }
}

/// Every constant entering an implemented inequality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConstants {
    pub c1: f64,
    pub c2: f64,
    pub c_h: f64,
    pub rho_h: f64,
    pub l_a: f64,
    pub gamma_a: f64,
    pub l_theta: f64,
    /// Bound on the reachable natural parameter, `|psi(x,a) theta*| <= w_bound`.
    pub w_bound: f64,
    pub theta_norm_bound: f64,
}

impl ModelConstants {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("c1", self.c1),
            ("c2", self.c2),
            ("rho_h", self.rho_h),
            ("l_a", self.l_a),
            ("gamma_a", self.gamma_a),
            ("w_bound", self.w_bound),
            ("theta_norm_bound", self.theta_norm_bound),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invariant(
                    name,
                    format!("{v} must be finite and > 0"),
                ));
            }
        }
        for (name, v) in [("c_h", self.c_h), ("l_theta", self.l_theta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invariant(
                    name,
                    format!("{v} must be finite and >= 0"),
                ));
            }
        }
        if self.l_a < self.gamma_a {
            return Err(Error::invariant(
                "gamma_a",
                format!(
                    "PL constant {} exceeds smoothness constant {}",
                    self.gamma_a, self.l_a
                ),
            ));
        }
        if self.c1 > self.c2 {
            return Err(Error::invariant(
                "c1",
                format!("c1 = {} exceeds c2 = {}", self.c1, self.c2),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(id: &str, w: f64) -> Segment {
        Segment {
            id: id.into(),
            weight: w,
            cost: 0.0,
        }
    }

    #[test]
    fn single_segment_always_drawn() {
        let space = SegmentSpace::new(vec![seg("only", 1.0)]).unwrap();
        let mut rng = RandomStream::from_seed(1);
        assert!((0..1000).all(|_| space.sample(&mut rng) == 0));
    }

    #[test]
    fn balanced_frequencies_within_three_sigma() {
        let space = SegmentSpace::new(vec![seg("a", 0.5), seg("b", 0.5)]).unwrap();
        let mut rng = RandomStream::from_seed(11);
        let n = 100_000;
        let hits = (0..n).filter(|_| space.sample(&mut rng) == 0).count();
        let p = hits as f64 / n as f64;
        let sigma = (0.25 / n as f64).sqrt();
        assert!((p - 0.5).abs() <= 3.0 * sigma, "frequency {p}");
    }

    #[test]
    fn zero_mass_segment_never_drawn() {
        let space = SegmentSpace::new(vec![seg("a", 1.0), seg("b", 0.0)]).unwrap();
        let mut rng = RandomStream::from_seed(5);
        assert!((0..10_000).all(|_| space.sample(&mut rng) == 0));
    }

    #[test]
    fn rejects_bad_spaces() {
        assert!(SegmentSpace::new(vec![]).is_err());
        assert!(SegmentSpace::new(vec![seg("a", 0.5), seg("a", 0.5)]).is_err());
        assert!(SegmentSpace::new(vec![seg("a", 0.5), seg("b", 0.6)]).is_err());
        assert!(SegmentSpace::new(vec![seg("a", 1.5), seg("b", -0.5)]).is_err());
        assert!(SegmentSpace::new(vec![seg("a,b", 1.0)]).is_err());
        assert!(SegmentSpace::new(vec![seg("", 1.0)]).is_err());
    }

    #[test]
    fn projection_examples() {
        let iv = ActionInterval::new(0.0, 1.0).unwrap();
        assert_eq!(iv.project(0.4).unwrap(), 0.4);
        assert_eq!(iv.project(1.7).unwrap(), 1.0);
        assert_eq!(iv.project(-2.0).unwrap(), 0.0);
        assert!(matches!(iv.project(f64::NAN), Err(Error::NonFinite(_))));
        assert!(iv.project(f64::INFINITY).is_err());
    }

    #[test]
    fn interval_validation() {
        assert!(ActionInterval::new(1.0, 1.0).is_err());
        assert!(ActionInterval::new(2.0, 1.0).is_err());
        assert!(ActionInterval::new(0.0, f64::INFINITY).is_err());
        let g = ActionInterval::new(0.2, 1.2).unwrap().grid(101);
        assert_eq!(g.len(), 101);
        assert_eq!(g[0], 0.2);
        assert_eq!(g[100], 1.2);
    }

    #[test]
    fn constants_validation() {
        let ok = ModelConstants {
            c1: 0.1,
            c2: 0.25,
            c_h: 1.0,
            rho_h: 0.1,
            l_a: 2.0,
            gamma_a: 1.0,
            l_theta: 1.0,
            w_bound: 3.0,
            theta_norm_bound: 5.0,
        };
        assert!(ok.validate().is_ok());
        assert!(ModelConstants { gamma_a: 3.0, ..ok }.validate().is_err());
        assert!(ModelConstants { c1: 0.3, ..ok }.validate().is_err());
        assert!(ModelConstants { rho_h: 0.0, ..ok }.validate().is_err());
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(a in -1e6f64..1e6, lo in -10f64..10.0, width in 1e-3f64..10.0) {
            let iv = ActionInterval::new(lo, lo + width).unwrap();
            let p = iv.project(a).unwrap();
            prop_assert!(iv.contains(p));
            prop_assert_eq!(iv.project(p).unwrap(), p);
        }
    }
}
