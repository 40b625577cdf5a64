//! Parametric response laws, expected rewards and their action gradients.
//!
//! The generalized linear family has density
//! `g(y) exp(h(y) w - b(w))` with respect to a reference measure, where the
//! natural parameter is `w = psi(x, a) theta`. Only scalar statistics are
//! supported (`m = 1`).

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::random::RandomStream;
use crate::types::{ActionInterval, ParameterVector, SegmentId, SegmentSpace};

/// Gauss-Hermite order used for continuous responses.
pub const QUADRATURE_ORDER: usize = 64;
/// Successive-order tolerance of the quadrature convergence check.
pub const QUADRATURE_TOLERANCE: f64 = 1e-8;

pub fn sigmoid(w: f64) -> f64 {
    if w >= 0.0 {
        1.0 / (1.0 + (-w).exp())
    } else {
        let e = w.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^w)` without overflow.
fn softplus(w: f64) -> f64 {
    if w > 0.0 {
        w + (-w).exp().ln_1p()
    } else {
        w.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceMeasure {
    Counting,
    Lebesgue,
}

/// Log-partition function `b` together with the matching base `g` and statistic `h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Link {
    /// Bernoulli responses on `{0, 1}`: `b(w) = ln(1 + e^w)`, `h(y) = y`.
    Logistic,
    /// Gaussian responses with known variance `v`: `b(w) = w^2 / (2v)`, `h(y) = y / v`.
    Gaussian { variance: f64 },
}

impl Link {
    pub fn measure(&self) -> ReferenceMeasure {
        match self {
            Link::Logistic => ReferenceMeasure::Counting,
            Link::Gaussian { .. } => ReferenceMeasure::Lebesgue,
        }
    }

    pub fn value(&self, w: f64) -> f64 {
        match *self {
            Link::Logistic => softplus(w),
            Link::Gaussian { variance } => 0.5 * w * w / variance,
        }
    }

    pub fn grad(&self, w: f64) -> f64 {
        match *self {
            Link::Logistic => sigmoid(w),
            Link::Gaussian { variance } => w / variance,
        }
    }

    pub fn hess(&self, w: f64) -> f64 {
        match *self {
            Link::Logistic => {
                let s = sigmoid(w);
                s * (1.0 - s)
            }
            Link::Gaussian { variance } => 1.0 / variance,
        }
    }

    /// Analytic supremum of `b''` over the real line.
    pub fn max_curvature(&self) -> f64 {
        match *self {
            Link::Logistic => 0.25,
            Link::Gaussian { variance } => 1.0 / variance,
        }
    }

    pub fn statistic(&self, y: f64) -> f64 {
        match *self {
            Link::Logistic => y,
            Link::Gaussian { variance } => y / variance,
        }
    }

    pub fn base(&self, y: f64) -> f64 {
        match *self {
            Link::Logistic => 1.0,
            Link::Gaussian { variance } => {
                (-0.5 * y * y / variance).exp() / (2.0 * std::f64::consts::PI * variance).sqrt()
            }
        }
    }

    /// Finite response support, when the reference measure is counting.
    pub fn support(&self) -> Option<&'static [f64]> {
        match self {
            Link::Logistic => Some(&[0.0, 1.0]),
            Link::Gaussian { .. } => None,
        }
    }

    /// Response mean `E[y]` at natural parameter `w`.
    pub fn mean(&self, w: f64) -> f64 {
        match *self {
            Link::Logistic => sigmoid(w),
            Link::Gaussian { .. } => w,
        }
    }
}

/// Feature kernel `psi(x, a)`: one-hot segment encoding tensored with `[1, a]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMap {
    segments: usize,
}

impl FeatureMap {
    pub fn segment_affine(segments: usize) -> Self {
        assert!(segments >= 1);
        Self { segments }
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    /// Parameter dimension `d`.
    pub fn dim(&self) -> usize {
        2 * self.segments
    }

    pub fn row(&self, x: SegmentId, a: f64) -> DVector<f64> {
        let mut r = DVector::zeros(self.dim());
        r[2 * x] = 1.0;
        r[2 * x + 1] = a;
        r
    }

    /// `d psi / d a`.
    pub fn row_da(&self, x: SegmentId, _a: f64) -> DVector<f64> {
        let mut r = DVector::zeros(self.dim());
        r[2 * x + 1] = 1.0;
        r
    }

    /// Natural parameter `psi(x, a) theta`.
    #[inline]
    pub fn index(&self, theta: &[f64], x: SegmentId, a: f64) -> f64 {
        theta[2 * x] + theta[2 * x + 1] * a
    }

    #[inline]
    pub fn index_da(&self, theta: &[f64], x: SegmentId) -> f64 {
        theta[2 * x + 1]
    }

    /// Operator norm of `psi(x, a)` (a single row, so its Euclidean norm).
    pub fn op_norm(&self, _x: SegmentId, a: f64) -> f64 {
        (1.0 + a * a).sqrt()
    }
}

/// Generalized linear response family with scalar statistic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlmSpec {
    pub features: FeatureMap,
    pub link: Link,
}

impl GlmSpec {
    pub fn new(features: FeatureMap, link: Link) -> Result<Self> {
        if let Link::Gaussian { variance } = link {
            if !(variance.is_finite() && variance > 0.0) {
                return Err(Error::invariant(
                    "model.variance",
                    format!("{variance} must be > 0"),
                ));
            }
        }
        Ok(Self { features, link })
    }

    pub fn dim(&self) -> usize {
        self.features.dim()
    }

    /// Density of `y` with respect to the reference measure.
    pub fn density(&self, theta: &ParameterVector, x: SegmentId, a: f64, y: f64) -> f64 {
        let w = self.features.index(theta.as_slice(), x, a);
        self.density_at(w, y)
    }

    fn density_at(&self, w: f64, y: f64) -> f64 {
        self.link.base(y) * (self.link.statistic(y) * w - self.link.value(w)).exp()
    }

    /// `|ln ∫ g exp(h w) dν - b(w)|` at the given natural parameter.
    pub fn normalization_gap(&self, w: f64) -> f64 {
        let total = match self.link.support() {
            Some(support) => support
                .iter()
                .map(|&y| self.link.base(y) * (self.link.statistic(y) * w).exp())
                .sum::<f64>(),
            None => {
                let Link::Gaussian { variance } = self.link else {
                    unreachable!("only the Gaussian link has continuous support")
                };
                // E_{N(0, v)}[exp(h(Y) w)], with g the N(0, v) density.
                gaussian_expectation(0.0, variance, QUADRATURE_ORDER, |y| {
                    (self.link.statistic(y) * w).exp()
                })
            }
        };
        (total.ln() - self.link.value(w)).abs()
    }
}

/// `b~`: the log-partition outside `[-W, W]` replaced by its second-order Taylor expansion at the boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtendedLink {
    pub link: Link,
    pub w_bound: f64,
}

impl ExtendedLink {
    pub fn new(link: Link, w_bound: f64) -> Result<Self> {
        if !(w_bound.is_finite() && w_bound > 0.0) {
            return Err(Error::invariant(
                "model.w_bound",
                format!("{w_bound} must be > 0"),
            ));
        }
        Ok(Self { link, w_bound })
    }

    /// Value, first and second derivative of `b~` at `w`.
    #[inline]
    pub fn eval(&self, w: f64) -> (f64, f64, f64) {
        let bound = self.w_bound;
        if w.abs() <= bound {
            return (self.link.value(w), self.link.grad(w), self.link.hess(w));
        }
        let edge = bound.copysign(w);
        let (v, g, h) = (
            self.link.value(edge),
            self.link.grad(edge),
            self.link.hess(edge),
        );
        let dw = w - edge;
        (v + g * dw + 0.5 * h * dw * dw, g + h * dw, h)
    }
}

pub fn link_extension_btilde(link: Link, w_bound: f64, w: f64) -> Result<(f64, f64, f64)> {
    Ok(ExtendedLink::new(link, w_bound)?.eval(w))
}

/// Curvature constants `(c1, c2)`: `c1 = min b''` on `[-W, W]`, `c2 = sup b''`.
pub fn glm_constants(link: Link, w_bound: f64) -> Result<(f64, f64)> {
    if !(w_bound.is_finite() && w_bound > 0.0) {
        return Err(Error::invariant(
            "model.w_bound",
            format!("{w_bound} must be > 0"),
        ));
    }
    const GRID: usize = 20_001;
    let step = 2.0 * w_bound / (GRID - 1) as f64;
    let (mut best_i, mut best) = (0, f64::INFINITY);
    for i in 0..GRID {
        let v = link.hess(-w_bound + step * i as f64);
        if v < best {
            best = v;
            best_i = i;
        }
    }
    let lo = (-w_bound + step * best_i.saturating_sub(1) as f64).max(-w_bound);
    let hi = (-w_bound + step * (best_i + 1) as f64).min(w_bound);
    let (_, refined) = golden_section_min(|w| link.hess(w), lo, hi, 1e-12);
    let c1 = best.min(refined);
    if !(c1 > 0.0) {
        return Err(Error::NotStronglyConvex(c1));
    }

    let mut c2 = link.max_curvature();
    let wide = 5.0 * w_bound;
    let wide_step = 2.0 * wide / (GRID - 1) as f64;
    for i in 0..GRID {
        let v = link.hess(-wide + wide_step * i as f64);
        if v > c2 * (1.0 + 1e-12) {
            c2 = v;
        }
    }
    Ok((c1, c2))
}

/// Golden-section search for a minimum of a unimodal function on `[lo, hi]`.
pub(crate) fn golden_section_min(
    f: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    width: f64,
) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > width {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

/// Mean model and constants for the bounded-response least-squares loss.
///
/// The mean is affine, `mu(theta, x, a) = psi(x, a) theta`, and the dominating
/// matrix is `h_scale * psi^T psi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeastSquaresSpec {
    pub features: FeatureMap,
    pub y_lo: f64,
    pub y_hi: f64,
    pub c1: f64,
    pub c2: f64,
    pub h_scale: f64,
    /// Loss scale `C1 = 8 / (c2 (y_hi - y_lo)^2) * (1/c1 + y_lo - y_hi)`.
    pub big_c1: f64,
}

impl LeastSquaresSpec {
    pub fn new(
        features: FeatureMap,
        y_lo: f64,
        y_hi: f64,
        c1: f64,
        c2: f64,
        h_scale: f64,
    ) -> Result<Self> {
        if !(y_lo.is_finite() && y_hi.is_finite() && y_lo < y_hi) {
            return Err(Error::invariant(
                "model.response_bounds",
                format!("need finite y_lo < y_hi, got [{y_lo}, {y_hi}]"),
            ));
        }
        let range = y_hi - y_lo;
        if !(c1 > 0.0 && c1 <= 1.0 / range) {
            return Err(Error::invariant(
                "model.ls_c1",
                format!(
                    "c1 = {c1} must lie in (0, 1/(y_hi - y_lo)] = (0, {}]",
                    1.0 / range
                ),
            ));
        }
        if !(c2 > 0.0 && h_scale >= 0.0) {
            return Err(Error::invariant(
                "model.ls_c2",
                "c2 must be > 0 and h_scale >= 0",
            ));
        }
        let big_c1 = 8.0 / (c2 * range * range) * (1.0 / c1 + y_lo - y_hi);
        Ok(Self {
            features,
            y_lo,
            y_hi,
            c1,
            c2,
            h_scale,
            big_c1,
        })
    }

    /// Affine-mean instance with the tightest admissible choice `H = c1 psi^T psi`, `c2 = 1/c1`.
    pub fn affine(features: FeatureMap, y_lo: f64, y_hi: f64, c1: f64) -> Result<Self> {
        Self::new(features, y_lo, y_hi, c1, 1.0 / c1, c1)
    }

    pub fn mean(&self, theta: &[f64], x: SegmentId, a: f64) -> f64 {
        self.features.index(theta, x, a)
    }

    pub fn mean_grad(&self, x: SegmentId, a: f64) -> DVector<f64> {
        self.features.row(x, a)
    }

    pub fn mean_hess(&self, _x: SegmentId, _a: f64) -> DMatrix<f64> {
        let d = self.features.dim();
        DMatrix::zeros(d, d)
    }

    pub fn dominating(&self, x: SegmentId, a: f64) -> DMatrix<f64> {
        linalg::outer(&self.features.row(x, a)) * self.h_scale
    }

    /// Checks `∇²mu ⪯ H ⪯ c1 ∇mu ∇mu^T` and `∇mu ∇mu^T ⪯ c2 H` on the probe grid.
    pub fn check_sandwich(
        &self,
        space: &SegmentSpace,
        interval: &ActionInterval,
        probe: usize,
    ) -> Result<()> {
        const TOL: f64 = 1e-12;
        for x in 0..space.len() {
            for a in interval.grid(probe) {
                let dom = self.dominating(x, a);
                let g = linalg::outer(&self.mean_grad(x, a));
                let checks = [
                    ("H - hess(mu)", &dom - self.mean_hess(x, a)),
                    ("c1 grad grad^T - H", &g * self.c1 - &dom),
                    ("c2 H - grad grad^T", &dom * self.c2 - &g),
                ];
                for (name, m) in checks {
                    let e = linalg::min_eigenvalue(&m);
                    if e < -TOL {
                        return Err(Error::invariant(
                            "model.least_squares",
                            format!("{name} has eigenvalue {e:.3e} at segment {x}, action {a}"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardKind {
    /// `r ≡ 0`.
    Zero,
    /// `r(x, a, y) = scale * y * (a - cost(x))`.
    Margin,
}

/// Known instantaneous reward `r(x, a, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardFunction {
    kind: RewardKind,
    scale: f64,
    costs: Vec<f64>,
    sup_bound: f64,
}

impl RewardFunction {
    pub fn zero() -> Self {
        Self {
            kind: RewardKind::Zero,
            scale: 0.0,
            costs: Vec::new(),
            sup_bound: 0.0,
        }
    }

    /// Margin reward; `response_abs_max` bounds `|y|` and yields the declared bound on `|r|`.
    pub fn margin(
        space: &SegmentSpace,
        interval: &ActionInterval,
        scale: f64,
        response_abs_max: f64,
    ) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::invariant(
                "reward.scale",
                format!("{scale} must be > 0"),
            ));
        }
        let costs: Vec<f64> = (0..space.len()).map(|x| space.cost(x)).collect();
        let margin = costs
            .iter()
            .map(|c| (interval.lo() - c).abs().max((interval.hi() - c).abs()))
            .fold(0.0, f64::max);
        Ok(Self {
            kind: RewardKind::Margin,
            scale,
            costs,
            sup_bound: scale * response_abs_max * margin,
        })
    }

    pub fn kind(&self) -> RewardKind {
        self.kind
    }

    pub fn sup_bound(&self) -> f64 {
        self.sup_bound
    }

    /// Every supported kind is differentiable in `a` for fixed `y`.
    pub fn is_differentiable(&self) -> bool {
        true
    }

    #[inline]
    pub fn evaluate(&self, x: SegmentId, a: f64, y: f64) -> f64 {
        match self.kind {
            RewardKind::Zero => 0.0,
            RewardKind::Margin => self.scale * y * (a - self.costs[x]),
        }
    }

    #[inline]
    pub fn grad_a(&self, _x: SegmentId, _a: f64, y: f64) -> f64 {
        match self.kind {
            RewardKind::Zero => 0.0,
            RewardKind::Margin => self.scale * y,
        }
    }
}

/// Gauss-Hermite nodes and weights for the weight `exp(-x^2)`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    const PIM4: f64 = 0.751_125_544_464_942_5; // pi^(-1/4)
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let mut z = 0.0;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

fn cached_rule(n: usize) -> &'static (Vec<f64>, Vec<f64>) {
    static R64: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    static R128: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    match n {
        64 => R64.get_or_init(|| gauss_hermite(64)),
        128 => R128.get_or_init(|| gauss_hermite(128)),
        _ => panic!("no cached Gauss-Hermite rule of order {n}"),
    }
}

/// `E[f(Y)]` for `Y ~ N(mean, variance)` with the cached rule of order `n` (64 or 128).
pub fn gaussian_expectation(mean: f64, variance: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    let (nodes, weights) = cached_rule(n);
    let s = (2.0 * variance).sqrt();
    let total: f64 = nodes
        .iter()
        .zip(weights)
        .map(|(&z, &w)| w * f(mean + s * z))
        .sum();
    total / std::f64::consts::PI.sqrt()
}

/// Order-64 expectation, checked against order 128.
fn checked_gaussian_expectation(mean: f64, variance: f64, f: impl Fn(f64) -> f64) -> Result<f64> {
    let low = gaussian_expectation(mean, variance, QUADRATURE_ORDER, &f);
    let high = gaussian_expectation(mean, variance, 2 * QUADRATURE_ORDER, &f);
    let diff = (low - high).abs();
    if diff > QUADRATURE_TOLERANCE {
        return Err(Error::Quadrature {
            low: QUADRATURE_ORDER,
            high: 2 * QUADRATURE_ORDER,
            diff,
        });
    }
    Ok(low)
}

/// Conditional response law `pi_theta(dy | x, a)` with known ground truth.
#[derive(Debug, Clone)]
pub struct ResponseModel {
    glm: GlmSpec,
    truth: ParameterVector,
    interval: ActionInterval,
    space: SegmentSpace,
    /// Simulated responses are clamped to these bounds (bounded-response instance).
    truncation: Option<(f64, f64)>,
}

impl ResponseModel {
    pub fn new(
        glm: GlmSpec,
        truth: ParameterVector,
        interval: ActionInterval,
        space: SegmentSpace,
        truncation: Option<(f64, f64)>,
    ) -> Result<Self> {
        if truth.dim() != glm.dim() {
            return Err(Error::invariant(
                "model.theta_star",
                format!(
                    "length {} does not match dimension {}",
                    truth.dim(),
                    glm.dim()
                ),
            ));
        }
        if glm.features.segments() != space.len() {
            return Err(Error::invariant(
                "model.features",
                "feature map and segment space disagree on the number of segments",
            ));
        }
        if let Some((lo, hi)) = truncation {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::invariant(
                    "model.response_bounds",
                    "need finite lo < hi",
                ));
            }
        }
        Ok(Self {
            glm,
            truth,
            interval,
            space,
            truncation,
        })
    }

    pub fn glm(&self) -> &GlmSpec {
        &self.glm
    }

    pub fn features(&self) -> FeatureMap {
        self.glm.features
    }

    pub fn link(&self) -> Link {
        self.glm.link
    }

    pub fn truth(&self) -> &ParameterVector {
        &self.truth
    }

    pub fn interval(&self) -> &ActionInterval {
        &self.interval
    }

    pub fn space(&self) -> &SegmentSpace {
        &self.space
    }

    pub fn truncation(&self) -> Option<(f64, f64)> {
        self.truncation
    }

    pub fn dim(&self) -> usize {
        self.glm.dim()
    }

    /// Largest `|y|` the simulator can emit.
    pub fn response_abs_max(&self) -> f64 {
        match (self.glm.link.support(), self.truncation) {
            (_, Some((lo, hi))) => lo.abs().max(hi.abs()),
            (Some(s), None) => s.iter().fold(0.0, |m, y| m.max(y.abs())),
            (None, None) => f64::INFINITY,
        }
    }

    /// Draws `y ~ pi_theta*(. | x, a)`. Consumes one uniform (Bernoulli) or one normal (Gaussian).
    pub fn sample_response(&self, x: SegmentId, a: f64, rng: &mut RandomStream) -> Result<f64> {
        if !self.interval.contains(a) {
            return Err(Error::invariant(
                "action",
                format!("{a} outside the action interval"),
            ));
        }
        let w = self.glm.features.index(self.truth.as_slice(), x, a);
        let y = match self.glm.link {
            Link::Logistic => {
                if rng.uniform() < sigmoid(w) {
                    1.0
                } else {
                    0.0
                }
            }
            Link::Gaussian { variance } => w + variance.sqrt() * rng.standard_normal(),
        };
        Ok(match self.truncation {
            Some((lo, hi)) => y.clamp(lo, hi),
            None => y,
        })
    }

    /// `r̄_theta(x, a) = ∫ r(x, a, y) pi_theta(dy | x, a)`.
    pub fn expected_reward(
        &self,
        theta: &ParameterVector,
        reward: &RewardFunction,
        x: SegmentId,
        a: f64,
    ) -> Result<f64> {
        self.expected_reward_raw(theta.as_slice(), reward, x, a)
    }

    pub(crate) fn expected_reward_raw(
        &self,
        theta: &[f64],
        reward: &RewardFunction,
        x: SegmentId,
        a: f64,
    ) -> Result<f64> {
        if reward.kind() == RewardKind::Zero {
            return Ok(0.0);
        }
        let w = self.glm.features.index(theta, x, a);
        match self.glm.link {
            Link::Logistic => {
                let p = sigmoid(w);
                Ok(p * reward.evaluate(x, a, 1.0) + (1.0 - p) * reward.evaluate(x, a, 0.0))
            }
            Link::Gaussian { variance } => {
                let mean = self.glm.link.mean(w);
                checked_gaussian_expectation(mean, variance, |y| reward.evaluate(x, a, y))
            }
        }
    }

    /// `∂_a r̄_theta(x, a)`, computed exactly (no sampling).
    ///
    /// `∂_a E[r] = E[∂_a r] + E[r (h(y) - b'(w))] ∂_a w`.
    pub fn grad_a_expected_reward(
        &self,
        theta: &ParameterVector,
        reward: &RewardFunction,
        x: SegmentId,
        a: f64,
    ) -> Result<f64> {
        self.grad_a_raw(theta.as_slice(), reward, x, a)
    }

    pub(crate) fn grad_a_raw(
        &self,
        theta: &[f64],
        reward: &RewardFunction,
        x: SegmentId,
        a: f64,
    ) -> Result<f64> {
        if reward.kind() == RewardKind::Zero {
            return Ok(0.0);
        }
        let features = self.glm.features;
        let w = features.index(theta, x, a);
        let dw = features.index_da(theta, x);
        let link = self.glm.link;
        let b1 = link.grad(w);
        match link {
            Link::Logistic => {
                let p = sigmoid(w);
                let mut total = 0.0;
                for (y, prob) in [(1.0, p), (0.0, 1.0 - p)] {
                    total += prob
                        * (reward.grad_a(x, a, y)
                            + reward.evaluate(x, a, y) * (link.statistic(y) - b1) * dw);
                }
                Ok(total)
            }
            Link::Gaussian { variance } => {
                let mean = link.mean(w);
                checked_gaussian_expectation(mean, variance, |y| {
                    reward.grad_a(x, a, y)
                        + reward.evaluate(x, a, y) * (link.statistic(y) - b1) * dw
                })
            }
        }
    }

    /// Checks `|psi(x, a) theta*| <= w_bound` over segments × a probe grid.
    pub fn check_containment(&self, w_bound: f64, probe: usize) -> Result<()> {
        for x in 0..self.space.len() {
            for a in self.interval.grid(probe) {
                let w = self.glm.features.index(self.truth.as_slice(), x, a);
                if w.abs() > w_bound {
                    return Err(Error::invariant(
                        "model.theta_star",
                        format!(
                            "psi(x, a) theta* = {w:.6} outside [-{w_bound}, {w_bound}] at segment {:?}, action {a}",
                            self.space.id(x)
                        ),
                    ));
                }
            }
        }
        Ok(())
    }
}
