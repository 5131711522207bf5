//! Hyperbolic-plane geometry on the matrix model.
//!
//! A point is stored as half-plane coordinates (X, Y) with X > 0 and viewed on
//! demand as the symmetric positive matrix
//!   M(X,Y) = [[X + Y^2/X, Y/X], [Y/X, 1/X]],  det M = 1.
//! The group GL(2,R) with |det| = 1 acts by P.M = (P^-1)^T M P^-1, an isometry
//! of the metric g(B1,B2) = 1/2 Tr(M^-1 B1 M^-1 B2).

use nalgebra::{Matrix2, Vector2};
use thiserror::Error;

/// Projective comparison tolerance for rod vectors.
pub const PROJ_TOL: f64 = 1e-12;
/// Karcher-mean fixed-point tolerance.
const KARCHER_TOL: f64 = 1e-12;
/// Karcher-mean iteration cap.
const KARCHER_MAX_ITER: usize = 200;

#[derive(Debug, Error)]
pub enum HypError {
    #[error("point must have X > 0 and finite coordinates, got X={x}, Y={y}")]
    InvalidPoint { x: f64, y: f64 },
    #[error("matrix must have |det| = 1, got det = {det}")]
    NotUnimodular { det: f64 },
    #[error("rod vector pair is degenerate (projectively equal)")]
    DegeneratePair,
    #[error("rod vector must be nonzero")]
    ZeroVector,
    #[error("weights must be positive with positive sum")]
    BadWeights,
    #[error("Karcher iteration failed to converge, residual {residual}")]
    KarcherDiverged { residual: f64 },
}

/// A point of the hyperbolic plane, X > 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HPoint {
    x: f64,
    y: f64,
}

impl HPoint {
    pub fn new(x: f64, y: f64) -> Result<Self, HypError> {
        if !(x > 0.0) || !x.is_finite() || !y.is_finite() {
            return Err(HypError::InvalidPoint { x, y });
        }
        Ok(HPoint { x, y })
    }

    /// Basepoint (1, 0), the identity matrix.
    pub fn basepoint() -> Self {
        HPoint { x: 1.0, y: 0.0 }
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    /// Matrix view M(X,Y); symmetric positive with det 1.
    pub fn embed_matrix(&self) -> Matrix2<f64> {
        let (x, y) = (self.x, self.y);
        Matrix2::new(x + y * y / x, y / x, y / x, 1.0 / x)
    }

    /// Inverse of `embed_matrix`.
    pub fn from_matrix(m: &Matrix2<f64>) -> Result<Self, HypError> {
        let x = 1.0 / m[(1, 1)];
        let y = m[(0, 1)] / m[(1, 1)];
        HPoint::new(x, y)
    }
}

/// Hyperbolic distance. Via the trace invariant: for the matrix views A, B,
/// Tr(A^-1 B) = 2 cosh d; written in coordinates it reduces to the stable form
/// d = 2 asinh( sqrt(((X1-X2)^2 + (Y1-Y2)^2) / (4 X1 X2)) ).
pub fn dist(a: &HPoint, b: &HPoint) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let q = (dx * dx + dy * dy) / (4.0 * a.x * b.x);
    2.0 * q.sqrt().asinh()
}

/// An element of GL(2,R) with |det| = 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupElem {
    m: Matrix2<f64>,
}

impl GroupElem {
    pub fn new(m: Matrix2<f64>) -> Result<Self, HypError> {
        let det = m.determinant();
        if !((det.abs() - 1.0).abs() < 1e-12) {
            return Err(HypError::NotUnimodular { det });
        }
        Ok(GroupElem { m })
    }

    pub fn identity() -> Self {
        GroupElem {
            m: Matrix2::identity(),
        }
    }

    /// D_lambda = diag(lambda, 1/lambda).
    pub fn diag(lambda: f64) -> Self {
        GroupElem {
            m: Matrix2::new(lambda, 0.0, 0.0, 1.0 / lambda),
        }
    }

    /// L_mu, lower unipotent.
    pub fn lower(mu: f64) -> Self {
        GroupElem {
            m: Matrix2::new(1.0, 0.0, mu, 1.0),
        }
    }

    /// U_mu, upper unipotent.
    pub fn upper(mu: f64) -> Self {
        GroupElem {
            m: Matrix2::new(1.0, mu, 0.0, 1.0),
        }
    }

    /// R_lambda = [[0, lambda], [lambda, 0]]; det = -lambda^2.
    pub fn swap(lambda: f64) -> Self {
        GroupElem {
            m: Matrix2::new(0.0, lambda, lambda, 0.0),
        }
    }

    /// Rotation by theta.
    pub fn rotation(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        GroupElem {
            m: Matrix2::new(c, -s, s, c),
        }
    }

    pub fn matrix(&self) -> &Matrix2<f64> {
        &self.m
    }

    pub fn det(&self) -> f64 {
        self.m.determinant()
    }

    pub fn inverse(&self) -> Self {
        let d = self.m.determinant();
        let inv = Matrix2::new(
            self.m[(1, 1)] / d,
            -self.m[(0, 1)] / d,
            -self.m[(1, 0)] / d,
            self.m[(0, 0)] / d,
        );
        GroupElem { m: inv }
    }

    pub fn compose(&self, other: &GroupElem) -> Self {
        GroupElem { m: self.m * other.m }
    }
}

/// Isometric action P.M = (P^-1)^T M P^-1.
pub fn act(p: &GroupElem, pt: &HPoint) -> HPoint {
    let pinv = p.inverse();
    let m = pinv.m.transpose() * pt.embed_matrix() * pinv.m;
    // The image is symmetric positive with det 1 up to roundoff.
    HPoint::new(1.0 / m[(1, 1)], m[(0, 1)] / m[(1, 1)]).expect("group action preserves validity")
}

/// Action on plane vectors (the dual action to `act`, so that values of the
/// quadratic form M(v, v) are preserved): v -> P v, projectively.
pub fn act_vector(p: &GroupElem, v: &RodVector) -> RodVector {
    RodVector::new(p.m * v.rep).expect("nonsingular action preserves nonzero vectors")
}

/// A point of RP^1: a nonzero plane vector up to scale.
#[derive(Debug, Clone, Copy)]
pub struct RodVector {
    rep: Vector2<f64>,
}

impl RodVector {
    pub fn new(rep: Vector2<f64>) -> Result<Self, HypError> {
        if rep.norm() == 0.0 || !rep.x.is_finite() || !rep.y.is_finite() {
            return Err(HypError::ZeroVector);
        }
        Ok(RodVector { rep })
    }

    pub fn from_components(a: f64, b: f64) -> Result<Self, HypError> {
        RodVector::new(Vector2::new(a, b))
    }

    /// bv_alpha = (1, alpha)^T.
    pub fn bv(alpha: f64) -> Self {
        RodVector {
            rep: Vector2::new(1.0, alpha),
        }
    }

    pub fn representative(&self) -> Vector2<f64> {
        self.rep
    }

    /// Angle in [0, pi).
    pub fn angle(&self) -> f64 {
        let mut t = self.rep.y.atan2(self.rep.x);
        if t < 0.0 {
            t += std::f64::consts::PI;
        }
        if t >= std::f64::consts::PI {
            t -= std::f64::consts::PI;
        }
        t
    }

    /// Orthogonal line.
    pub fn perp(&self) -> Self {
        RodVector {
            rep: Vector2::new(-self.rep.y, self.rep.x),
        }
    }

    /// Projective equality: normalized cross product below `PROJ_TOL`.
    pub fn approx_eq(&self, other: &RodVector) -> bool {
        let cross = self.rep.x * other.rep.y - self.rep.y * other.rep.x;
        cross.abs() < PROJ_TOL * self.rep.norm() * other.rep.norm()
    }
}

impl PartialEq for RodVector {
    fn eq(&self, other: &Self) -> bool {
        self.approx_eq(other)
    }
}

/// The wedge invariant and normal-form rotation: the unique alpha > 0 and
/// P in PSO(2) with P.v = [(1, alpha/2)] and P.v2 = [(1, -alpha/2)].
/// Returns alpha = 0 with P = Id when v = v2.
pub fn wedge(v: &RodVector, v2: &RodVector) -> (f64, GroupElem) {
    if v.approx_eq(v2) {
        return (0.0, GroupElem::identity());
    }
    let phi = v.angle();
    let phi2 = v2.angle();
    let mut diff = (phi - phi2) % std::f64::consts::PI;
    if diff < 0.0 {
        diff += std::f64::consts::PI;
    }
    let psi = diff / 2.0; // in (0, pi/2)
    let alpha = 2.0 * psi.tan();
    let p = GroupElem::rotation(psi - phi);
    (alpha, p)
}

/// bar P = R_1 P_{v,v2}; maps v -> [(1, 2/alpha)] and v2 -> [(1, -2/alpha)].
pub fn bar_p(v: &RodVector, v2: &RodVector) -> Result<GroupElem, HypError> {
    if v.approx_eq(v2) {
        return Err(HypError::DegeneratePair);
    }
    let (_, p) = wedge(v, v2);
    Ok(GroupElem::swap(1.0).compose(&p))
}

/// The rotation P_v with P_v.v = [(1,0)] and P_v.v_perp = [(0,1)].
pub fn axis_frame(v: &RodVector) -> GroupElem {
    GroupElem::rotation(-v.angle())
}

// --- symmetric 2x2 matrix calculus for the Karcher mean ---

/// Apply an analytic function to a symmetric 2x2 matrix by spectral calculus.
fn sym_apply(m: &Matrix2<f64>, f: impl Fn(f64) -> f64) -> Matrix2<f64> {
    let t = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let half_diff = 0.5 * (m[(0, 0)] - m[(1, 1)]);
    let disc = (half_diff * half_diff + m[(0, 1)] * m[(0, 1)]).sqrt();
    if disc == 0.0 {
        return Matrix2::new(f(t), 0.0, 0.0, f(t));
    }
    // f(M) = s Id + d (M - t Id), written so that a sub-ulp eigenvalue split
    // degrades gracefully instead of producing 0/0.
    let f1 = f(t + disc);
    let f2 = f(t - disc);
    let s = 0.5 * (f1 + f2);
    let d = 0.5 * (f1 - f2) / disc;
    Matrix2::identity() * (s - d * t) + m * d
}

fn sym_sqrt(m: &Matrix2<f64>) -> Matrix2<f64> {
    sym_apply(m, f64::sqrt)
}

fn sym_log(m: &Matrix2<f64>) -> Matrix2<f64> {
    sym_apply(m, f64::ln)
}

fn sym_exp(m: &Matrix2<f64>) -> Matrix2<f64> {
    sym_apply(m, f64::exp)
}

/// Riemannian logarithm at `base`: the tangent matrix T with Exp_base(T) = p.
pub fn log_map(base: &HPoint, p: &HPoint) -> Matrix2<f64> {
    let a = base.embed_matrix();
    let s = sym_sqrt(&a);
    let s_inv = sym_apply(&a, |l| 1.0 / l.sqrt());
    let inner = s_inv * p.embed_matrix() * s_inv;
    // Symmetrize against roundoff before taking the log.
    let inner = (inner + inner.transpose()) * 0.5;
    s * sym_log(&inner) * s
}

/// Riemannian exponential at `base` of the symmetric tangent matrix `t`.
pub fn exp_map(base: &HPoint, t: &Matrix2<f64>) -> HPoint {
    let a = base.embed_matrix();
    let s = sym_sqrt(&a);
    let s_inv = sym_apply(&a, |l| 1.0 / l.sqrt());
    let inner = s_inv * t * s_inv;
    let inner = (inner + inner.transpose()) * 0.5;
    let m = s * sym_exp(&inner) * s;
    HPoint::from_matrix(&m).expect("exponential lands in the model")
}

/// Norm of a tangent matrix at `base` under g(B,B) = 1/2 Tr((M^-1 B)^2).
pub fn tangent_norm(base: &HPoint, t: &Matrix2<f64>) -> f64 {
    let m = base.embed_matrix();
    // det m = 1, so the inverse is the adjugate.
    let m_inv = Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]);
    let prod = m_inv * t;
    (0.5 * (prod * prod).trace()).max(0.0).sqrt()
}

/// Weighted Karcher mean. Unique by negative curvature; computed by the
/// fixed-point iteration x <- Exp_x(sum_i w_i Log_x(p_i)).
pub fn geodesic_mix(points: &[HPoint], weights: &[f64]) -> Result<HPoint, HypError> {
    if points.is_empty() || points.len() != weights.len() {
        return Err(HypError::BadWeights);
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(HypError::BadWeights);
    }
    let mut x = points[0];
    let mut residual = f64::INFINITY;
    let mut best = (x, f64::INFINITY);
    // Roundoff in log/exp grows with the spread, so tolerances are relative
    // to the configuration diameter seen from the starting point.
    let scale: f64 = 1.0 + points.iter().map(|p| dist(&x, p)).fold(0.0, f64::max);
    for _ in 0..KARCHER_MAX_ITER {
        let mut step = Matrix2::zeros();
        let mut hess_bound = 0.0;
        for (p, &w) in points.iter().zip(weights) {
            step += log_map(&x, p) * (w / total);
            let d = dist(&x, p);
            // Hessian of w/2 d(.,p)^2 has eigenvalues in [w, w d coth d].
            hess_bound += (w / total) * if d < 1e-8 { 1.0 } else { d / d.tanh() };
        }
        residual = tangent_norm(&x, &step);
        if residual < KARCHER_TOL * scale {
            return Ok(x);
        }
        if residual < best.1 {
            best = (x, residual);
        }
        // Optimally damped gradient step; the undamped update oscillates once
        // the spread is of order one.
        let tau = 2.0 / (1.0 + hess_bound.max(1.0));
        x = exp_map(&x, &(step * tau));
    }
    // Widely spread configurations hit a roundoff plateau of order
    // eps * e^diam before reaching the tolerance; accept the best iterate
    // if it is plausibly at that floor.
    if best.1 < 1e-4 * scale {
        return Ok(best.0);
    }
    Err(HypError::KarcherDiverged { residual })
}
