//! Compatible losses and their information matrices.
//!
//! Both supported losses are single-index: `l(theta, x, a, y) = f(psi(x, a) theta, y)`,
//! and both information matrices are scalar multiples of `psi^T psi`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::response::{
    glm_constants, ExtendedLink, FeatureMap, GlmSpec, LeastSquaresSpec, ResponseModel,
};
use crate::types::{ParameterVector, SegmentId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    GlmLoglik,
    LeastSquares,
}

/// Scaled negative log-likelihood with the strongly convex link extension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlmLoss {
    pub glm: GlmSpec,
    pub extension: ExtendedLink,
    pub c1: f64,
    pub c2: f64,
}

impl GlmLoss {
    pub fn new(glm: GlmSpec, w_bound: f64) -> Result<Self> {
        let (c1, c2) = glm_constants(glm.link, w_bound)?;
        Ok(Self {
            glm,
            extension: ExtendedLink::new(glm.link, w_bound)?,
            c1,
            c2,
        })
    }

    /// `2 c1 / c2`.
    pub fn scale(&self) -> f64 {
        2.0 * self.c1 / self.c2
    }

    /// `2 c1^2 / c2`.
    pub fn info_scale(&self) -> f64 {
        2.0 * self.c1 * self.c1 / self.c2
    }

    #[inline]
    fn index_terms(&self, w: f64, y: f64) -> (f64, f64, f64) {
        let s = self.scale();
        let h = self.glm.link.statistic(y);
        let (b, b1, b2) = self.extension.eval(w);
        (-s * (h * w - b), s * (b1 - h), s * b2)
    }
}

/// Bounded-response least-squares loss `(C1 / 2) (y - mu)^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsLoss {
    pub spec: LeastSquaresSpec,
}

impl LsLoss {
    pub fn new(spec: LeastSquaresSpec) -> Result<Self> {
        ls_information_scale(&spec)?;
        Ok(Self { spec })
    }

    pub fn info_scale(&self) -> f64 {
        ls_information_scale(&self.spec).expect("validated at construction") * self.spec.h_scale
    }

    #[inline]
    fn index_terms(&self, w: f64, y: f64) -> (f64, f64, f64) {
        let c = self.spec.big_c1;
        let r = y - w;
        (0.5 * c * r * r, -c * r, c)
    }
}

/// Loss `l` together with its information matrix `H(x, a)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossSpec {
    Glm(GlmLoss),
    LeastSquares(LsLoss),
}

impl LossSpec {
    pub fn kind(&self) -> LossKind {
        match self {
            LossSpec::Glm(_) => LossKind::GlmLoglik,
            LossSpec::LeastSquares(_) => LossKind::LeastSquares,
        }
    }

    pub fn features(&self) -> FeatureMap {
        match self {
            LossSpec::Glm(l) => l.glm.features,
            LossSpec::LeastSquares(l) => l.spec.features,
        }
    }

    pub fn dim(&self) -> usize {
        self.features().dim()
    }

    /// `(c1, c2)` of whichever loss family this is.
    pub fn curvature_constants(&self) -> (f64, f64) {
        match self {
            LossSpec::Glm(l) => (l.c1, l.c2),
            LossSpec::LeastSquares(l) => (l.spec.c1, l.spec.c2),
        }
    }

    /// Rejects responses outside the loss's admissible range.
    pub fn check_response(&self, y: f64) -> Result<()> {
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("response {y}")));
        }
        if let LossSpec::LeastSquares(l) = self {
            if y < l.spec.y_lo || y > l.spec.y_hi {
                return Err(Error::invariant(
                    "response",
                    format!("y = {y} outside [{}, {}]", l.spec.y_lo, l.spec.y_hi),
                ));
            }
        }
        Ok(())
    }

    /// `(f, f', f'')` of the single-index form at `w = psi theta`.
    #[inline]
    pub fn index_terms(&self, w: f64, y: f64) -> (f64, f64, f64) {
        match self {
            LossSpec::Glm(l) => l.index_terms(w, y),
            LossSpec::LeastSquares(l) => l.index_terms(w, y),
        }
    }

    /// Value, gradient and Hessian in theta.
    pub fn evaluate(
        &self,
        theta: &ParameterVector,
        x: SegmentId,
        a: f64,
        y: f64,
    ) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        self.check_response(y)?;
        let features = self.features();
        let row = features.row(x, a);
        let (f, f1, f2) = self.index_terms(row.dot(theta.as_vector()), y);
        Ok((f, &row * f1, linalg::outer(&row) * f2))
    }

    /// `s` such that `H(x, a) = s psi^T psi`.
    pub fn info_scale(&self) -> f64 {
        match self {
            LossSpec::Glm(l) => l.info_scale(),
            LossSpec::LeastSquares(l) => l.info_scale(),
        }
    }

    pub fn info_matrix(&self, x: SegmentId, a: f64) -> DMatrix<f64> {
        linalg::outer(&self.features().row(x, a)) * self.info_scale()
    }
}

pub fn glm_loss(
    theta: &ParameterVector,
    x: SegmentId,
    a: f64,
    y: f64,
    loss: &GlmLoss,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    LossSpec::Glm(*loss)
        .evaluate(theta, x, a, y)
        .expect("the log-likelihood loss accepts every finite response")
}

/// `(2 c1^2 / c2) psi^T psi`.
pub fn glm_information(x: SegmentId, a: f64, loss: &GlmLoss) -> DMatrix<f64> {
    let row = loss.glm.features.row(x, a);
    linalg::outer(&row) * (2.0 * loss.c1 * loss.c1 / loss.c2)
}

pub fn ls_loss(
    theta: &ParameterVector,
    x: SegmentId,
    a: f64,
    y: f64,
    spec: &LeastSquaresSpec,
) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
    let loss = LossSpec::LeastSquares(LsLoss { spec: *spec });
    loss.check_response(y)?;
    let mu = spec.mean(theta.as_slice(), x, a);
    let grad_mu = spec.mean_grad(x, a);
    let c = spec.big_c1;
    let value = 0.5 * c * (y - mu).powi(2);
    let grad = &grad_mu * (-c * (y - mu));
    let hess = (spec.mean_hess(x, a) * (-(y - mu)) + linalg::outer(&grad_mu)) * c;
    Ok((value, grad, hess))
}

fn ls_information_scale(spec: &LeastSquaresSpec) -> Result<f64> {
    let scale = spec.big_c1 * (1.0 / spec.c1 + spec.y_lo - spec.y_hi);
    if !(scale > 0.0) {
        return Err(Error::invariant(
            "model.ls_c1",
            format!(
                "information scale C1 (1/c1 + y_lo - y_hi) = {scale:.3e} must be > 0; require c1 < 1/(y_hi - y_lo)"
            ),
        ));
    }
    Ok(scale)
}

/// `C1 (1/c1 + y_lo - y_hi) H(x, a)` with `H` the dominating information matrix.
pub fn ls_information(x: SegmentId, a: f64, spec: &LeastSquaresSpec) -> Result<DMatrix<f64>> {
    Ok(spec.dominating(x, a) * ls_information_scale(spec)?)
}

/// Exact sub-Gaussian compatibility check at the true parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Compatibility {
    pub lhs: f64,
    pub rhs: f64,
    pub ok: bool,
}

/// Compares `E[exp(lambda^T ∇l(theta*, x, a, y))]` with `exp(lambda^T H lambda)`.
///
/// Only finite-support responses are supported; the expectation is an exact sum.
pub fn check_subgaussian_compatibility(
    model: &ResponseModel,
    loss: &LossSpec,
    x: SegmentId,
    a: f64,
    lambda: &DVector<f64>,
) -> Result<Compatibility> {
    let Some(support) = model.link().support() else {
        return Err(Error::Unsupported(
            "sub-Gaussian compatibility is only checked exactly for finite-support responses"
                .into(),
        ));
    };
    let truth = model.truth();
    let row = loss.features().row(x, a);
    let w = row.dot(truth.as_vector());
    let projected = row.dot(lambda);
    let lhs: f64 = support
        .iter()
        .map(|&y| {
            let (_, f1, _) = loss.index_terms(w, y);
            model.glm().density(truth, x, a, y) * (f1 * projected).exp()
        })
        .sum();
    let h = loss.info_matrix(x, a);
    let rhs = lambda.dot(&(&h * lambda)).exp();
    Ok(Compatibility {
        lhs,
        rhs,
        ok: lhs <= rhs * (1.0 + 1e-12),
    })
}
