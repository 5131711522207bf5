//! Closed-form augmented harmonic maps: the oracle library.
//!
//! Each constructor returns an `AugmentedMap`, an immutable pair of evaluation
//! closures (Phi into the hyperbolic plane, nu the augmentation) together with
//! the rod structure it is tamed by and, when known in closed form, the
//! normalized rod vectors. These maps serve as boundary data, relaxation
//! seeds, and exact references for the solver and the verification layer.

use crate::hyp::{act, GroupElem, HPoint, HypError, RodVector};
use crate::rods::{AsymptoticType, RodStructure, RodsError};
use nalgebra::{Matrix2, Vector2};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelsError {
    #[error("parameter {name} must be {requirement}, got {value}")]
    BadParameter {
        name: &'static str,
        requirement: &'static str,
        value: f64,
    },
    #[error("axis source points must be strictly increasing")]
    BadSources,
    #[error("evaluation point (rho={rho}, z={z}) is outside the domain: {what}")]
    Domain { rho: f64, z: f64, what: &'static str },
    #[error("coordinate inversion failed to converge, residual {residual}")]
    InversionDiverged { residual: f64 },
    #[error("model matrix lost unimodularity, det = {det}")]
    BadMatrix { det: f64 },
    #[error(transparent)]
    Rods(#[from] RodsError),
    #[error(transparent)]
    Hyp(#[from] HypError),
}

type EvalFn = dyn Fn(f64, f64) -> Result<(HPoint, f64), ModelsError> + Send + Sync;

/// An augmented harmonic map given by closed-form evaluation.
#[derive(Clone)]
pub struct AugmentedMap {
    eval: Arc<EvalFn>,
    rod_structure: RodStructure,
    normalized_rod_vectors: Option<Vec<Vector2<f64>>>,
}

impl AugmentedMap {
    fn from_closure(
        eval: impl Fn(f64, f64) -> Result<(HPoint, f64), ModelsError> + Send + Sync + 'static,
        rod_structure: RodStructure,
        normalized_rod_vectors: Option<Vec<Vector2<f64>>>,
    ) -> Self {
        AugmentedMap {
            eval: Arc::new(eval),
            rod_structure,
            normalized_rod_vectors,
        }
    }

    /// Evaluate (Phi, nu) at an interior point (rho > 0).
    pub fn eval(&self, rho: f64, z: f64) -> Result<(HPoint, f64), ModelsError> {
        if !(rho > 0.0) || !rho.is_finite() || !z.is_finite() {
            return Err(ModelsError::Domain {
                rho,
                z,
                what: "need finite coordinates with rho > 0",
            });
        }
        (self.eval)(rho, z)
    }

    pub fn phi(&self, rho: f64, z: f64) -> Result<HPoint, ModelsError> {
        Ok(self.eval(rho, z)?.0)
    }

    pub fn nu(&self, rho: f64, z: f64) -> Result<f64, ModelsError> {
        Ok(self.eval(rho, z)?.1)
    }

    pub fn rod_structure(&self) -> &RodStructure {
        &self.rod_structure
    }

    pub fn normalized_rod_vectors(&self) -> Option<&[Vector2<f64>]> {
        self.normalized_rod_vectors.as_deref()
    }

    /// Frame change: Phi -> P.Phi pointwise, rod vectors -> P v, nu unchanged.
    /// The rod structure follows the group action (untyped, order reversed for
    /// orientation-reversing P), and normalized vectors are mapped along.
    pub fn change_frame(&self, p: &GroupElem) -> Result<AugmentedMap, ModelsError> {
        let rod_structure =
            crate::rods::transform(&self.rod_structure, &crate::rods::RodOp::Act(*p))?;
        let normalized_rod_vectors = self.normalized_rod_vectors.as_ref().map(|vs| {
            let mapped: Vec<Vector2<f64>> = vs.iter().map(|v| p.matrix() * v).collect();
            if p.det() < 0.0 {
                mapped.into_iter().rev().collect()
            } else {
                mapped
            }
        });
        let inner = self.eval.clone();
        let pp = *p;
        Ok(AugmentedMap {
            eval: Arc::new(move |rho, z| {
                let (pt, nu) = inner(rho, z)?;
                Ok((act(&pp, &pt), nu))
            }),
            rod_structure,
            normalized_rod_vectors,
        })
    }
}

/// HPoint from a raw model matrix, rejecting loss of unimodularity (the
/// target normalization det(rho Phi) = rho^2 means det Phi = 1).
fn phi_point(m: &Matrix2<f64>) -> Result<HPoint, ModelsError> {
    let det = m.determinant();
    let scale = m.norm();
    if (det - 1.0).abs() > 1e-8 * (1.0 + scale * scale) {
        return Err(ModelsError::BadMatrix { det });
    }
    Ok(HPoint::from_matrix(m)?)
}

fn require(cond: bool, name: &'static str, requirement: &'static str, value: f64) -> Result<(), ModelsError> {
    if cond {
        Ok(())
    } else {
        Err(ModelsError::BadParameter {
            name,
            requirement,
            value,
        })
    }
}

// --- local models ---

/// The rod model in frame `v`: diag(rho, 1/rho) rotated by the axis frame of
/// `v`; nu identically 0. Tames the interior of any rod with vector `v`.
pub fn rod_model(v: &RodVector) -> AugmentedMap {
    let frame = crate::hyp::axis_frame(v).inverse();
    let normalized = frame.matrix() * Vector2::new(1.0, 0.0);
    let structure = RodStructure::untyped(vec![], vec![*v]).expect("one rod, no turning points");
    AugmentedMap::from_closure(
        move |rho, _z| {
            let pt = HPoint::new(rho, 0.0)?;
            Ok((act(&frame, &pt), 0.0))
        },
        structure,
        Some(vec![normalized]),
    )
}

/// The turning-point model for the rod-vector pair (v, v2): the scale
/// invariant map P^-1.Phi_alpha with alpha their wedge, entries
/// (1/rho) [[alpha r / 2, z], [z, 2 r / alpha]] in the normal frame, and
/// augmentation nu = (1/2) log(alpha / (2r)).
pub fn turning_model(v: &RodVector, v2: &RodVector) -> Result<AugmentedMap, ModelsError> {
    let (alpha, p) = crate::hyp::wedge(v, v2);
    if alpha == 0.0 {
        return Err(ModelsError::BadParameter {
            name: "v, v2",
            requirement: "projectively distinct",
            value: alpha,
        });
    }
    let pinv = p.inverse();
    let structure = RodStructure::new(vec![0.0], vec![*v, *v2], AsymptoticType::Ae)?;
    let normalized = vec![
        pinv.matrix() * Vector2::new(1.0, 0.5 * alpha),
        pinv.matrix() * Vector2::new(1.0, -0.5 * alpha),
    ];
    Ok(AugmentedMap::from_closure(
        move |rho, z| {
            let r = rho.hypot(z);
            let m = Matrix2::new(
                0.5 * alpha * r / rho,
                z / rho,
                z / rho,
                2.0 * r / (alpha * rho),
            );
            let pt = act(&pinv, &phi_point(&m)?);
            Ok((pt, 0.5 * (0.5 * alpha / r).ln()))
        },
        structure,
        Some(normalized),
    ))
}

// --- asymptotic families ---

/// The ALF- family: H = 1 + alpha/(2r), A = alpha z / (2r), half-plane
/// coordinates (X, Y) = (rho H, A), nu = (1/2) log H. At alpha = 0 this is
/// the trivial AF model.
pub fn tn_minus(alpha: f64) -> Result<AugmentedMap, ModelsError> {
    require(alpha >= 0.0, "alpha", "nonnegative", alpha)?;
    let structure = if alpha == 0.0 {
        crate::rods::af_structure(0.0)
    } else {
        RodStructure::new(
            vec![0.0],
            vec![RodVector::bv(0.5 * alpha), RodVector::bv(-0.5 * alpha)],
            AsymptoticType::AlfMinus,
        )?
    };
    let normalized = if alpha == 0.0 {
        vec![Vector2::new(1.0, 0.0)]
    } else {
        vec![
            Vector2::new(1.0, 0.5 * alpha),
            Vector2::new(1.0, -0.5 * alpha),
        ]
    };
    Ok(AugmentedMap::from_closure(
        move |rho, z| {
            let r = rho.hypot(z);
            let h = 1.0 + 0.5 * alpha / r;
            let pt = HPoint::new(rho * h, 0.5 * alpha * z / r)?;
            Ok((pt, 0.5 * h.ln()))
        },
        structure,
        Some(normalized),
    ))
}

/// The ALF+ family: the R_1 twist of `tn_minus` with the same augmentation.
/// Its normalized rod vectors are (alpha/2, 1) and (-alpha/2, 1).
pub fn tn_plus(alpha: f64) -> Result<AugmentedMap, ModelsError> {
    require(alpha > 0.0, "alpha", "positive", alpha)?;
    let r1 = GroupElem::swap(1.0);
    let minus = tn_minus(alpha)?;
    let structure = RodStructure::new(
        vec![0.0],
        vec![
            RodVector::from_components(0.5 * alpha, 1.0)?,
            RodVector::from_components(-0.5 * alpha, 1.0)?,
        ],
        AsymptoticType::AlfPlus,
    )?;
    let normalized = vec![
        Vector2::new(0.5 * alpha, 1.0),
        Vector2::new(-0.5 * alpha, 1.0),
    ];
    Ok(AugmentedMap::from_closure(
        move |rho, z| {
            let (pt, nu) = minus.eval(rho, z)?;
            Ok((act(&r1, &pt), nu))
        },
        structure,
        Some(normalized),
    ))
}

/// The AF family: U_{-beta}.Phi_{[(1,0)]} with nu = 0.
pub fn af_model(beta: f64) -> AugmentedMap {
    let twist = GroupElem::upper(-beta);
    AugmentedMap::from_closure(
        move |rho, _z| {
            let pt = act(&twist, &HPoint::new(rho, 0.0)?);
            Ok((pt, 0.0))
        },
        crate::rods::af_structure(beta),
        Some(vec![Vector2::new(1.0, 0.0)]),
    )
}

// --- exact instantons ---

/// The Eguchi-Hanson family: two sources of strengths n1, n2 at z = 0 and
/// z = 2a, with H = n1/(2r) + n2/(2 r_{2a}), flux A the matching combination,
/// (X, Y) = (rho H, A) and nu = (1/2) log H. AE with two turning points.
pub fn eguchi_hanson(n1: f64, n2: f64, a: f64) -> Result<AugmentedMap, ModelsError> {
    require(n1 > 0.0, "n1", "positive", n1)?;
    require(n2 > 0.0, "n2", "positive", n2)?;
    require(a > 0.0, "a", "positive", a)?;
    let structure = RodStructure::new(
        vec![0.0, 2.0 * a],
        vec![
            RodVector::bv(0.5 * (n1 + n2)),
            RodVector::bv(0.5 * (n2 - n1)),
            RodVector::bv(-0.5 * (n1 + n2)),
        ],
        AsymptoticType::Ae,
    )?;
    let normalized = vec![
        Vector2::new(1.0, 0.5 * (n1 + n2)),
        Vector2::new(1.0, 0.5 * (n2 - n1)),
        Vector2::new(1.0, -0.5 * (n1 + n2)),
    ];
    Ok(AugmentedMap::from_closure(
        move |rho, z| {
            let r = rho.hypot(z);
            let r2 = rho.hypot(z - 2.0 * a);
            let h = 0.5 * n1 / r + 0.5 * n2 / r2;
            let flux = 0.5 * n1 * z / r + 0.5 * n2 * (z - 2.0 * a) / r2;
            let pt = HPoint::new(rho * h, flux)?;
            Ok((pt, 0.5 * h.ln()))
        },
        structure,
        Some(normalized),
    ))
}

/// The multi-center family from an axisymmetric harmonic function
/// V = T + sum_j lambda_j / (2 r_j): Phi = (1/rho) [[V^-1, V^-1 F],
/// [V^-1 F, rho^2 V + V^-1 F^2]] with the closed-form flux
/// F = sum_j lambda_j (z - z_j) / (2 r_j), nu = (1/2) log V. The source
/// configuration is translated so the first point sits at z = 0. AE for
/// T = 0, ALF+ for T > 0; always degree 0.
pub fn gibbons_hawking(points: &[f64], weights: &[f64], t: f64) -> Result<AugmentedMap, ModelsError> {
    require(t >= 0.0, "T", "nonnegative", t)?;
    require(
        !points.is_empty() && points.len() == weights.len(),
        "points",
        "nonempty, one weight per point",
        points.len() as f64,
    )?;
    if let Some(&w) = weights.iter().find(|&&w| !(w > 0.0)) {
        return Err(ModelsError::BadParameter {
            name: "lambda",
            requirement: "positive",
            value: w,
        });
    }
    if points.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(ModelsError::BadSources);
    }
    let shift = points[0];
    let zs: Vec<f64> = points.iter().map(|z| z - shift).collect();
    let lam = weights.to_vec();
    let total: f64 = lam.iter().sum();
    let n = zs.len();
    let mut vectors = Vec::with_capacity(n + 1);
    let mut normalized = Vec::with_capacity(n + 1);
    // The flux F tends to below - total/2 on the j-th axis segment, and the
    // collapsing direction there is (-F, 1): the same scale that makes the
    // single-source case agree with `tn_plus` (lambda = alpha).
    let mut below = 0.0;
    for j in 0..=n {
        let c = 0.5 * total - below;
        vectors.push(RodVector::from_components(c, 1.0)?);
        normalized.push(Vector2::new(c, 1.0));
        if j < n {
            below += lam[j];
        }
    }
    let atype = if t > 0.0 {
        AsymptoticType::AlfPlus
    } else {
        AsymptoticType::Ae
    };
    let structure = RodStructure::new(zs.clone(), vectors, atype)?;
    Ok(AugmentedMap::from_closure(
        move |rho, z| {
            let mut v = t;
            let mut f = 0.0;
            for (zj, l) in zs.iter().zip(&lam) {
                let rj = rho.hypot(z - zj);
                v += 0.5 * l / rj;
                f += 0.5 * l * (z - zj) / rj;
            }
            let m = Matrix2::new(
                1.0 / (v * rho),
                f / (v * rho),
                f / (v * rho),
                (rho * rho * v + f * f / v) / rho,
            );
            Ok((phi_point(&m)?, 0.5 * v.ln()))
        },
        structure,
        Some(normalized),
    ))
}

/// Surface gravity and angular velocity (kappa, Omega) of the Kerr family at
/// rotation parameter `a` (mass fixed to 1/2).
pub fn kerr_frequencies(a: f64) -> (f64, f64) {
    let m = 0.5;
    let za = (m * m + a * a).sqrt();
    let sa = m + za;
    (za / (2.0 * m * sa), a / (2.0 * m * sa))
}

/// Invert the Weyl map of the Kerr family: find (s, theta) with
/// rho = sqrt(Delta) sin(theta), z = (s - m) cos(theta) + z_a. The seed comes
/// from the exact ellipse relation between (rho, z - z_a) and s; a Newton
/// polish then drives the residual below 1e-12 (relative).
pub fn kerr_weyl_inverse(a: f64, rho: f64, z: f64) -> Result<(f64, f64), ModelsError> {
    if !(rho > 0.0) {
        return Err(ModelsError::Domain {
            rho,
            z,
            what: "Weyl inversion needs rho > 0",
        });
    }
    let m = 0.5;
    let za = (m * m + a * a).sqrt();
    let zeta = z - za;
    // (s - m)^2 solves w^2 - b w + z_a^2 zeta^2 = 0 with the larger root.
    let b = za * za + rho * rho + zeta * zeta;
    let disc = (b * b - 4.0 * za * za * zeta * zeta).max(0.0).sqrt();
    let w = 0.5 * (b + disc);
    let mut s = m + w.sqrt();
    let mut th = (rho / (w - za * za).max(f64::MIN_POSITIVE).sqrt()).atan2(zeta / w.sqrt());
    let scale = 1.0 + rho.abs() + z.abs();
    let tol = 1e-12;
    let mut residual = f64::INFINITY;
    for _ in 0..50 {
        let delta = s * s - 2.0 * m * s - a * a;
        let sqd = delta.max(0.0).sqrt();
        let (sin_t, cos_t) = th.sin_cos();
        let g1 = sqd * sin_t - rho;
        let g2 = (s - m) * cos_t + za - z;
        residual = g1.hypot(g2) / scale;
        if residual < tol {
            return Ok((s, th));
        }
        // Jacobian of (g1, g2) in (s, theta).
        let j11 = (s - m) / sqd * sin_t;
        let j12 = sqd * cos_t;
        let j21 = cos_t;
        let j22 = -(s - m) * sin_t;
        let det = j11 * j22 - j12 * j21;
        if det == 0.0 {
            break;
        }
        s -= (j22 * g1 - j12 * g2) / det;
        th -= (-j21 * g1 + j11 * g2) / det;
        s = s.max(m + za + f64::MIN_POSITIVE);
        th = th.clamp(0.0, std::f64::consts::PI);
    }
    Err(ModelsError::InversionDiverged { residual })
}

/// The Kerr family (mass 1/2): evaluation inverts the Weyl map and applies
/// the explicit (Phi, nu). Rod structure (0, 2 z_a) with middle vector
/// (1/kappa, Omega/kappa) and AF ends (0, 1).
pub fn kerr(a: f64) -> Result<AugmentedMap, ModelsError> {
    let m = 0.5;
    let za = (m * m + a * a).sqrt();
    let (kappa, omega) = kerr_frequencies(a);
    let middle = Vector2::new(1.0 / kappa, omega / kappa);
    let structure = RodStructure::new(
        vec![0.0, 2.0 * za],
        vec![
            RodVector::from_components(0.0, 1.0)?,
            RodVector::new(middle)?,
            RodVector::from_components(0.0, 1.0)?,
        ],
        AsymptoticType::Af { beta: 0.0 },
    )?;
    let normalized = vec![Vector2::new(0.0, 1.0), middle, Vector2::new(0.0, 1.0)];
    Ok(AugmentedMap::from_closure(
        move |rho, z| {
            let (s, th) = kerr_weyl_inverse(a, rho, z)?;
            let (sin_t, cos_t) = th.sin_cos();
            let st2 = sin_t * sin_t;
            let sigma = s * s - a * a * cos_t * cos_t;
            let delta = s * s - 2.0 * m * s - a * a;
            let pref = 1.0 / (sigma * rho);
            let mat = Matrix2::new(
                pref * (delta + a * a * st2),
                pref * (-2.0 * a * s * m * st2),
                pref * (-2.0 * a * s * m * st2),
                pref * (st2 * (a * a * rho * rho + (s * s - a * a) * (s * s - a * a))),
            );
            let denom = rho * rho * cos_t * cos_t + (s - m) * (s - m) * st2 * st2;
            let nu = 0.5 * (sigma * st2 / denom).ln();
            Ok((phi_point(&mat)?, nu))
        },
        structure,
        Some(normalized),
    ))
}

// --- the Type II exact constructor ---

/// Building block of the Type II harmonic function: U0 = 2r - z log((r+z)/(r-z)).
fn u0_z(rho: f64, zeta: f64) -> f64 {
    let r = rho.hypot(zeta);
    -2.0 * (zeta / r).atanh()
}

/// Harmonic conjugate of U0 (H_rho = -rho U0_z, H_z = rho U0_rho), frozen as
/// H0 = zeta r + rho^2 log((zeta + r)/rho), evaluated stably on both sides.
fn h0(rho: f64, zeta: f64) -> f64 {
    let r = rho.hypot(zeta);
    // (zeta + r)(r - zeta) = rho^2, so log((zeta+r)/rho) = -log((r-zeta)/rho).
    let log_term = if zeta >= 0.0 {
        ((zeta + r) / rho).ln()
    } else {
        -((r - zeta) / rho).ln()
    };
    zeta * r + rho * rho * log_term
}

/// Exposed for the conjugate-function unit test.
#[doc(hidden)]
pub fn bg_conjugate_block(rho: f64, zeta: f64) -> f64 {
    h0(rho, zeta)
}

/// The degree-1 exact family built from a positive convex piecewise affine
/// profile f(z) = A + sum_j a_j |z - z_j| with end slopes -1 and +1. The
/// harmonic function U = A log rho^2 + sum_j a_j U0(rho, z - z_j) determines
/// (V, F, nu) and the harmonic map in the centered torus basis. The kink
/// configuration is translated so the first kink sits at z = 0.
///
/// Returns an error when the slope increments are not positive or do not sum
/// to 1; evaluation errors where V <= 0.
pub fn bg_type2(a_total: f64, kinks: &[(f64, f64)]) -> Result<AugmentedMap, ModelsError> {
    require(a_total > 0.0, "A", "positive", a_total)?;
    require(!kinks.is_empty(), "kinks", "nonempty", kinks.len() as f64)?;
    if kinks.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(ModelsError::BadSources);
    }
    if let Some(&(_, aj)) = kinks.iter().find(|&&(_, aj)| !(aj > 0.0)) {
        return Err(ModelsError::BadParameter {
            name: "a_j",
            requirement: "positive",
            value: aj,
        });
    }
    let total: f64 = kinks.iter().map(|&(_, aj)| aj).sum();
    require(
        (total - 1.0).abs() < 1e-9,
        "sum a_j",
        "equal to 1 (end slopes -1 and 1)",
        total,
    )?;
    let shift = kinks[0].0;
    let zs: Vec<f64> = kinks.iter().map(|&(zj, _)| zj - shift).collect();
    let aj: Vec<f64> = kinks.iter().map(|&(_, aj)| aj).collect();
    let n = zs.len();

    // Slopes f'_j on the rods I_j = (z_j, z_{j+1}) and values f_j = f(z_j).
    let mut slopes = Vec::with_capacity(n + 1);
    let mut acc = -1.0;
    slopes.push(acc);
    for &a in &aj {
        acc += 2.0 * a;
        slopes.push(acc);
    }
    let fval = |z: f64| -> f64 {
        a_total
            + zs.iter()
                .zip(&aj)
                .map(|(zj, a)| a * (z - zj).abs())
                .sum::<f64>()
    };
    let fj: Vec<f64> = zs.iter().map(|&zj| fval(zj)).collect();
    let flat = |slope: f64| slope.abs() <= 1e-12;

    // Torus constants F_j on the rods; None marks the zero-slope rod, where
    // the constant is formally infinite.
    let s_mom: f64 = zs.iter().zip(&aj).map(|(z, a)| a * z).sum();
    let q_mom: f64 = zs.iter().zip(&aj).map(|(z, a)| a * z * z).sum();
    let f_first = (-(a_total + s_mom) * (a_total + s_mom) + q_mom) / a_total;
    let f_last = ((a_total - s_mom) * (a_total - s_mom) - q_mom) / a_total;
    let mut fconst: Vec<Option<f64>> = vec![None; n + 1];
    fconst[0] = Some(f_first);
    for j in 1..=n {
        if flat(slopes[j]) {
            continue;
        }
        // fj[j - 1] is the profile value at the kink z_j between rods
        // I_{j-1} and I_j.
        fconst[j] = if let Some(prev) = fconst[j - 1] {
            Some(prev + fj[j - 1] * fj[j - 1] * (1.0 / slopes[j] - 1.0 / slopes[j - 1]) / a_total)
        } else {
            // Jump over the flat rod I_{j-1}, where f(z_{j-1}) = f(z_j).
            let base = fconst[j - 2].expect("adjacent flat rods are impossible");
            let fz = fj[j - 2];
            Some(
                base + (fz * fz * (1.0 / slopes[j] - 1.0 / slopes[j - 2])
                    - 2.0 * (zs[j - 1] - zs[j - 2]) * fz)
                    / a_total,
            )
        };
    }
    debug_assert!(
        (fconst[n].unwrap() - f_last).abs() < 1e-7 * (1.0 + f_last.abs()),
        "torus-constant recursion disagrees with the closed form"
    );
    let mid = 0.5 * (f_first + f_last);

    let diff = f_last - f_first;
    let atype = if diff.abs() <= 1e-12 * (1.0 + f_last.abs() + f_first.abs()) {
        AsymptoticType::Af { beta: 0.0 }
    } else if diff > 0.0 {
        AsymptoticType::AlfMinus
    } else {
        AsymptoticType::AlfPlus
    };

    let mut vectors = Vec::with_capacity(n + 1);
    let mut normalized = Vec::with_capacity(n + 1);
    for j in 0..=n {
        if flat(slopes[j]) {
            // f is constant on the flat rod, equal to its value at the left
            // kink z_j.
            let fz = fj[j - 1];
            vectors.push(RodVector::from_components(0.0, 1.0)?);
            normalized.push(Vector2::new(0.0, -fz * fz / a_total));
        } else {
            let w = Vector2::new(1.0, mid - fconst[j].unwrap());
            vectors.push(RodVector::new(w)?);
            normalized.push(w * slopes[j]);
        }
    }
    let structure = RodStructure::new(zs.clone(), vectors, atype)?;

    let k = 2.0 * a_total;
    Ok(AugmentedMap::from_closure(
        move |rho, z| {
            // Derivatives of U = A log rho^2 + sum_j a_j U0(rho, z - z_j) and
            // the conjugate H (with H(log rho^2) = 2z).
            let mut ru_rho = 2.0 * a_total; // rho * U_rho
            let mut u_z = 0.0;
            let mut u_zz = 0.0;
            let mut u_rhoz = 0.0;
            let mut conj = 2.0 * a_total * z;
            for (zj, a) in zs.iter().zip(&aj) {
                let zeta = z - zj;
                let r = rho.hypot(zeta);
                ru_rho += 2.0 * a * r;
                u_z += a * u0_z(rho, zeta);
                u_zz += -2.0 * a / r;
                u_rhoz += 2.0 * a * zeta / (rho * r);
                conj += a * h0(rho, zeta);
            }
            let u_rho = ru_rho / rho;
            let w2 = u_rhoz * u_rhoz + u_zz * u_zz;
            if w2 <= 0.0 {
                return Err(ModelsError::Domain {
                    rho,
                    z,
                    what: "degenerate Ward chart (U_rz^2 + U_zz^2 = 0)",
                });
            }
            let v = -(ru_rho + u_rho * u_rho * u_zz / w2) / k;
            if !(v > 0.0) {
                return Err(ModelsError::Domain {
                    rho,
                    z,
                    what: "V <= 0",
                });
            }
            let f = -(-rho * u_rho * u_rho * u_rhoz / w2 + rho * rho * u_z + 2.0 * conj) / k;
            let nu = 0.5 * (0.25 * v * rho * rho * w2).ln();
            let pt = HPoint::new(rho * v, f - mid)?;
            Ok((pt, nu))
        },
        structure,
        Some(normalized),
    ))
}

/// The canonical asymptotic model of a typed rod structure: the member of the
/// matching family (AF / AE / ALF-+) framed so that its two ends line up with
/// the structure's end rod vectors. The frame is gauge-fixed through the
/// wedge normal form (a rotation), which pins down the one-parameter
/// stabilizer freedom of the end pair.
pub fn asymptotic_model(r: &RodStructure) -> Result<AugmentedMap, ModelsError> {
    let atype = r.atype().ok_or(ModelsError::BadParameter {
        name: "rod structure",
        requirement: "typed (carries an asymptotic type)",
        value: f64::NAN,
    })?;
    let vectors = r.rod_vectors();
    let v0 = vectors[0];
    let vn = vectors[vectors.len() - 1];
    match atype {
        AsymptoticType::Af { beta } => {
            let frame = crate::hyp::axis_frame(&v0).inverse();
            af_model(beta).change_frame(&frame)
        }
        AsymptoticType::Ae => turning_model(&v0, &vn),
        AsymptoticType::AlfMinus => {
            let (w, p) = crate::hyp::wedge(&v0, &vn);
            if w == 0.0 {
                return Err(ModelsError::BadParameter {
                    name: "end vectors",
                    requirement: "projectively distinct",
                    value: w,
                });
            }
            tn_minus(w)?.change_frame(&p.inverse())
        }
        AsymptoticType::AlfPlus => {
            let (w, p) = crate::hyp::wedge(&v0, &vn);
            if w == 0.0 {
                return Err(ModelsError::BadParameter {
                    name: "end vectors",
                    requirement: "projectively distinct",
                    value: w,
                });
            }
            // The ALF+ member whose ends have wedge w is tn_plus(4/w); line
            // its ends up with (v0, vn) through both normal forms.
            let model = tn_plus(4.0 / w)?;
            let ends = model.rod_structure().rod_vectors().to_vec();
            let (_, p2) = crate::hyp::wedge(&ends[0], &ends[1]);
            model.change_frame(&p.inverse().compose(&p2))
        }
    }
}

// --- rescaled family ---

/// The twist scale sigma(alpha, lambda): sqrt(lambda) for alpha lambda < 1/4,
/// 1/sqrt(alpha) for alpha lambda > 1, joined by a C^1 cubic staying inside
/// the corridor [sqrt(lambda)/2, 2 sqrt(lambda)]. Satisfies
/// alpha sigma^2 <= 4 everywhere.
pub fn sigma(alpha: f64, lambda: f64) -> f64 {
    let t = alpha * lambda;
    if t < 0.25 {
        lambda.sqrt()
    } else if t > 1.0 {
        1.0 / alpha.sqrt()
    } else {
        // Hermite bridge h on [1/4, 1] with h(1/4) = 1, h'(1/4) = 0,
        // h(1) = 1, h'(1) = -1/2 (matching d/dt of sqrt(1/t) at 1).
        let s = (t - 0.25) / 0.75;
        let h = 1.0 - 0.375 * (s * s * s - s * s);
        lambda.sqrt() * h
    }
}

/// The zoomed-out ALF- model D_sigma^-1 . Phi^{TN-_alpha}(rho/lambda,
/// z/lambda): the family interpolating between the rod model (alpha lambda
/// small) and the one-turning-point AE map (alpha lambda large), with the
/// twist kept in a bounded set. Locally tamed by the weak untyped structure
/// with rod vectors [(1, +-alpha sigma^2 / 2)].
pub fn rescaled_model(alpha: f64, lambda: f64) -> Result<AugmentedMap, ModelsError> {
    require(alpha >= 0.0, "alpha", "nonnegative", alpha)?;
    require(lambda > 0.0, "lambda", "positive", lambda)?;
    let sg = sigma(alpha, lambda);
    let twist = GroupElem::diag(sg).inverse();
    let half = 0.5 * alpha * sg * sg;
    let structure = RodStructure::untyped(
        vec![0.0],
        vec![RodVector::bv(half), RodVector::bv(-half)],
    )?;
    let minus = tn_minus(alpha)?;
    Ok(AugmentedMap::from_closure(
        move |rho, z| {
            let (pt, nu) = minus.eval(rho / lambda, z / lambda)?;
            Ok((act(&twist, &pt), nu))
        },
        structure,
        None,
    ))
}

// --- finite-difference residuals ---

fn inv2(m: &Matrix2<f64>) -> Matrix2<f64> {
    let d = m.determinant();
    Matrix2::new(m[(1, 1)] / d, -m[(0, 1)] / d, -m[(1, 0)] / d, m[(0, 0)] / d)
}

/// Centered-difference residual of the harmonic-map equation
/// (rho Phi^-1 Phi_rho)_rho + (rho Phi^-1 Phi_z)_z = 0 at spacing h;
/// O(h^2) for exact solutions. Needs rho > 2h.
pub fn harmonic_residual(
    map: &AugmentedMap,
    rho: f64,
    z: f64,
    h: f64,
) -> Result<f64, ModelsError> {
    let mat = |r: f64, zz: f64| -> Result<Matrix2<f64>, ModelsError> {
        Ok(map.phi(r, zz)?.embed_matrix())
    };
    let flux_rho = |r: f64, zz: f64| -> Result<Matrix2<f64>, ModelsError> {
        let d = (mat(r + h, zz)? - mat(r - h, zz)?) / (2.0 * h);
        Ok(inv2(&mat(r, zz)?) * d * r)
    };
    let flux_z = |r: f64, zz: f64| -> Result<Matrix2<f64>, ModelsError> {
        let d = (mat(r, zz + h)? - mat(r, zz - h)?) / (2.0 * h);
        Ok(inv2(&mat(r, zz)?) * d * r)
    };
    let res = (flux_rho(rho + h, z)? - flux_rho(rho - h, z)?) / (2.0 * h)
        + (flux_z(rho, z + h)? - flux_z(rho, z - h)?) / (2.0 * h);
    Ok(res.norm())
}

/// Centered-difference residual of the augmentation system: with
/// U = Id + rho Phi^-1 Phi_rho and V = rho Phi^-1 Phi_z, checks
/// nu_z = Tr(U V)/(4 rho) and nu_rho = -1/(2 rho) + Tr(U^2 - V^2)/(8 rho).
/// Returns the larger deviation; O(h^2) for exact augmented maps.
pub fn augmentation_residual(
    map: &AugmentedMap,
    rho: f64,
    z: f64,
    h: f64,
) -> Result<f64, ModelsError> {
    let mat = |r: f64, zz: f64| -> Result<Matrix2<f64>, ModelsError> {
        Ok(map.phi(r, zz)?.embed_matrix())
    };
    let center = mat(rho, z)?;
    let cinv = inv2(&center);
    let du = cinv * ((mat(rho + h, z)? - mat(rho - h, z)?) / (2.0 * h)) * rho
        + Matrix2::identity();
    let dv = cinv * ((mat(rho, z + h)? - mat(rho, z - h)?) / (2.0 * h)) * rho;
    let nu_rho = (map.nu(rho + h, z)? - map.nu(rho - h, z)?) / (2.0 * h);
    let nu_z = (map.nu(rho, z + h)? - map.nu(rho, z - h)?) / (2.0 * h);
    let r1 = nu_z - (du * dv).trace() / (4.0 * rho);
    let r2 = nu_rho + 0.5 / rho - (du * du - dv * dv).trace() / (8.0 * rho);
    Ok(r1.abs().max(r2.abs()))
}
