//! Augmentation pass: integrate nu from a solved map, normalize it against
//! the asymptotic model, and extract normalized rod vectors and cone angles.

use crate::hyp::{act, HPoint};
use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{asymptotic_model, ModelsError};
use crate::rods::{Enhancement, RodsError};
use crate::solver::{AugmentedField, SolverError};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("loop residual {max:.3e} exceeds tolerance {tol:.3e}: the map is not harmonic enough for a single-valued nu")]
    LoopResidual { max: f64, tol: f64 },
    #[error("extrapolation ladder for rod {rod} is not monotone")]
    NonMonotone { rod: usize },
    #[error("extrapolated rod-vector norm for rod {rod} is not positive")]
    BadLimit { rod: usize },
    #[error("rod index {0} out of range")]
    BadRod(usize),
    #[error("lattice does not enhance the rod structure")]
    NotEnhancing,
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Models(#[from] ModelsError),
    #[error(transparent)]
    Rods(#[from] RodsError),
}

/// Compatibility check for the integrated one-form (d nu): circulation around
/// every grid plaquette.
#[derive(Clone, Debug)]
pub struct LoopReport {
    pub max: f64,
    pub rms: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RodAngle {
    pub index: usize,
    pub angle: f64,
    pub normalized: [f64; 2],
    pub primitive: [f64; 2],
    pub err: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConeAngleReport {
    pub rods: Vec<RodAngle>,
}

/// Derivative weights of the Lagrange interpolant through `xs`, evaluated at
/// `at`. Handles non-uniform spacing and one-sided stencils alike.
fn dlagrange(xs: &[f64], at: f64) -> Vec<f64> {
    let n = xs.len();
    let mut w = vec![0.0; n];
    for m in 0..n {
        let mut denom = 1.0;
        for p in 0..n {
            if p != m {
                denom *= xs[m] - xs[p];
            }
        }
        let mut s = 0.0;
        for q in 0..n {
            if q == m {
                continue;
            }
            let mut prod = 1.0;
            for p in 0..n {
                if p != m && p != q {
                    prod *= at - xs[p];
                }
            }
            s += prod;
        }
        w[m] = s / denom;
    }
    w
}

/// A stencil window of width up to 5 around `i`, clamped to [lo, hi).
fn window(i: usize, lo: usize, hi: usize) -> std::ops::Range<usize> {
    let width = 5.min(hi - lo);
    let a = i.saturating_sub(2).max(lo).min(hi - width);
    a..a + width
}

#[inline]
fn adjugate(m: &Matrix2<f64>) -> Matrix2<f64> {
    // The embedded matrices have det 1, so this is the inverse.
    Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)])
}

/// Integrate the augmentation nu over the grid by trapezoid sums along a
/// spanning tree and store it in the field.
///
/// The partial derivatives of nu come from the first-order system in
/// U = Id + rho Phi^-1 Phi_rho and V = rho Phi^-1 Phi_z (centered
/// differences, one-sided at boundaries). The tree starts at the outermost
/// axis-adjacent node on the first rod, runs along the bottom edge and the
/// outer-rho edge, then sweeps each row inward so no integration path passes
/// near a turning point. Plaquette circulations of the derivative field are
/// returned; if the largest exceeds `tol` the map was not harmonic enough
/// and an error is raised (nu is still stored for diagnostics).
pub fn integrate_nu(field: &mut AugmentedField, tol: f64) -> Result<LoopReport, AugmentError> {
    let g = field.grid();
    let (nr, nz) = (g.n_rho(), g.n_z());
    let rho = g.rho_nodes().to_vec();
    let zn = g.z_nodes().to_vec();

    // Everything is evaluated per column in that column's rod frame; the
    // traces entering d nu are invariant under frame changes, which act on
    // U and V by conjugation.
    let framed = |i: usize, j: usize| -> HPoint {
        let p = field
            .phi_at(i, j)
            .expect("off-axis node stores a valid point");
        act(&field.charts[j], &p)
    };

    let mut nu_r = vec![0.0f64; nr * nz];
    let mut nu_z = vec![0.0f64; nr * nz];
    let mut s = vec![0.0f64; nr];
    for (i, r) in rho.iter().enumerate() {
        s[i] = r * r;
    }
    let mut cu = vec![0.0f64; nr];
    let mut cv = vec![0.0f64; nr];
    for j in 0..nz {
        let chart = field.chart_top[j] > 0;
        if chart {
            // Chart coordinates down the column, including the axis value:
            // both are smooth in rho^2, so differencing in s = rho^2 with the
            // axis node resolves the derivative where the raw matrix entries
            // blow up like 1/rho.
            cu[0] = field.axis_u[j];
            cv[0] = 0.0;
            for i in 1..nr {
                let p = framed(i, j);
                cu[i] = (p.x() / rho[i]).ln();
                cv[i] = p.y();
            }
        }
        for i in 1..nr {
            let r = rho[i];
            let (m, m_r) = if chart {
                let iw = window(i, 0, nr);
                let ws = dlagrange(&s[iw.clone()], s[i]);
                let (mut u_s, mut v_s) = (0.0, 0.0);
                for (w, ii) in ws.iter().zip(iw) {
                    u_s += w * cu[ii];
                    v_s += w * cv[ii];
                }
                let (u_r, v_r) = (2.0 * r * u_s, 2.0 * r * v_s);
                let eu = cu[i].exp();
                let (x, y) = (r * eu, cv[i]);
                let (x_r, y_r) = (eu * (1.0 + r * u_r), v_r);
                let m = Matrix2::new(x + y * y / x, y / x, y / x, 1.0 / x);
                let m_r = Matrix2::new(
                    x_r + (2.0 * y * y_r * x - y * y * x_r) / (x * x),
                    (y_r * x - y * x_r) / (x * x),
                    (y_r * x - y * x_r) / (x * x),
                    -x_r / (x * x),
                );
                (m, m_r)
            } else {
                let iw = window(i, 1, nr);
                let wr = dlagrange(&rho[iw.clone()], rho[i]);
                let mut m_r = Matrix2::zeros();
                for (w, ii) in wr.iter().zip(iw) {
                    m_r += framed(ii, j).embed_matrix() * *w;
                }
                (framed(i, j).embed_matrix(), m_r)
            };
            // The z-derivative stencil crosses columns, so it has to stay in
            // one frame: this column's.
            let jw = window(j, 0, nz);
            let wz = dlagrange(&zn[jw.clone()], zn[j]);
            let mut m_z = Matrix2::zeros();
            for (w, jj) in wz.iter().zip(jw) {
                let p = field
                    .phi_at(i, jj)
                    .expect("off-axis node stores a valid point");
                m_z += act(&field.charts[j], &p).embed_matrix() * *w;
            }
            let m_inv = adjugate(&m);
            let u = Matrix2::identity() + (m_inv * m_r) * r;
            let v = (m_inv * m_z) * r;
            let k = j * nr + i;
            nu_z[k] = (u * v).trace() / (4.0 * r);
            nu_r[k] = -0.5 / r + (u * u - v * v).trace() / (8.0 * r);
        }
    }

    // Circulation around each plaquette with both rho edges off the axis.
    let mut max = 0.0f64;
    let mut sq = 0.0f64;
    let mut cnt = 0usize;
    for j in 0..nz - 1 {
        for i in 1..nr - 1 {
            let k = j * nr + i;
            let ku = k + nr;
            let dr = rho[i + 1] - rho[i];
            let dz = zn[j + 1] - zn[j];
            let circ = 0.5 * (nu_r[k] + nu_r[k + 1]) * dr
                + 0.5 * (nu_z[k + 1] + nu_z[ku + 1]) * dz
                - 0.5 * (nu_r[ku] + nu_r[ku + 1]) * dr
                - 0.5 * (nu_z[k] + nu_z[ku]) * dz;
            max = max.max(circ.abs());
            sq += circ * circ;
            cnt += 1;
        }
    }
    let report = LoopReport {
        max,
        rms: (sq / cnt as f64).sqrt(),
    };

    let mut nu = vec![0.0f64; nr * nz];
    // Bottom edge, outward from the reference node (1, 0).
    for i in 2..nr {
        nu[i] = nu[i - 1] + 0.5 * (nu_r[i - 1] + nu_r[i]) * (rho[i] - rho[i - 1]);
    }
    // Outer-rho edge upward, then each row inward toward the axis.
    for j in 1..nz {
        let k = j * nr + nr - 1;
        nu[k] = nu[k - nr] + 0.5 * (nu_z[k - nr] + nu_z[k]) * (zn[j] - zn[j - 1]);
        for i in (1..nr - 1).rev() {
            let k = j * nr + i;
            nu[k] = nu[k + 1] - 0.5 * (nu_r[k] + nu_r[k + 1]) * (rho[i + 1] - rho[i]);
        }
    }
    // Axis values by the same even-in-rho closure the solver uses.
    let (r1, r2) = (rho[1], rho[2]);
    for j in 0..nz {
        nu[j * nr] = (r2 * r2 * nu[j * nr + 1] - r1 * r1 * nu[j * nr + 2]) / (r2 * r2 - r1 * r1);
    }
    field.nu.copy_from_slice(&nu);

    if report.max > tol {
        return Err(AugmentError::LoopResidual {
            max: report.max,
            tol,
        });
    }
    Ok(report)
}

/// Fix the additive constant in nu so the outer-shell mean of nu minus the
/// asymptotic model's nu vanishes. Returns the shift that was subtracted.
pub fn normalize_nu(field: &mut AugmentedField) -> Result<f64, AugmentError> {
    let sharp = asymptotic_model(field.rod_structure())?;
    let g = field.grid();
    let (nr, nz) = (g.n_rho(), g.n_z());
    let rho = g.rho_nodes();
    let zn = g.z_nodes();
    let (zc, r_out) = (g.z_center(), g.r_out());
    let mut sum = 0.0;
    let mut cnt = 0usize;
    for j in 0..nz {
        for i in 1..nr {
            let r = (rho[i] * rho[i] + (zn[j] - zc) * (zn[j] - zc)).sqrt();
            if r >= 0.9 * r_out {
                sum += field.nu_at(i, j) - sharp.nu(rho[i], zn[j])?;
                cnt += 1;
            }
        }
    }
    let shift = sum / cnt as f64;
    for v in field.nu.iter_mut() {
        *v -= shift;
    }
    Ok(shift)
}

/// Anchor point and local length scale for evaluating quantities on a rod
/// interior: the midpoint for finite rods, one length-scale beyond the last
/// turning point for the semi-infinite ones.
fn rod_anchor(field: &AugmentedField, rod: usize) -> Result<(f64, f64), AugmentError> {
    let tps = field.rod_structure().turning_points();
    let nrods = tps.len() + 1;
    if rod >= nrods {
        return Err(AugmentError::BadRod(rod));
    }
    let scale = field.grid().length_scale();
    if tps.is_empty() {
        return Ok((field.grid().z_center(), scale));
    }
    if rod == 0 {
        Ok((tps[0] - scale, scale))
    } else if rod == tps.len() {
        Ok((tps[tps.len() - 1] + scale, scale))
    } else {
        Ok((
            0.5 * (tps[rod - 1] + tps[rod]),
            tps[rod] - tps[rod - 1],
        ))
    }
}

/// The normalized rod vector (defined up to sign): the representative scaled
/// so that sqrt(rho Phi(v, v)) / (e^nu rho) tends to 1 on the rod. Returns
/// the vector and a relative error estimate from the extrapolation ladder.
///
/// The limit is taken at the rod anchor by a dyadic ladder rho_k = rho0 2^-k,
/// k = 0..5, with Richardson extrapolation assuming a quadratic leading
/// error; the last two extrapolants' spread is the error estimate.
pub fn normalized_rod_vector(
    field: &AugmentedField,
    rod: usize,
) -> Result<(Vector2<f64>, f64), AugmentError> {
    let (z_m, ell) = rod_anchor(field, rod)?;
    let v = field.rod_structure().rod_vectors()[rod].representative();
    let rho0 = 0.2 * ell;
    let mut f = [0.0f64; 6];
    for (k, fk) in f.iter_mut().enumerate() {
        let r = rho0 * 0.5f64.powi(k as i32);
        let m = field.sample_phi(r, z_m)?.embed_matrix();
        let q = (v.transpose() * m * v)[(0, 0)];
        let nu = field.sample_nu(r, z_m)?;
        *fk = (r * q).sqrt() / (nu.exp() * r);
    }
    // The approach to the limit should not oscillate: sign changes matter
    // only when the step is large in absolute terms, otherwise they are
    // interpolation noise on a converged tail. Genuine corruption (a bad
    // sample inside the ladder) shows up as percent-level excursions.
    let mut sign = 0.0f64;
    for k in 0..5 {
        let d = f[k + 1] - f[k];
        if d.abs() > 1e-3 * (1.0 + f[k].abs()) {
            if sign != 0.0 && d.signum() != sign {
                return Err(AugmentError::NonMonotone { rod });
            }
            sign = d.signum();
        }
    }
    let mut l = [0.0f64; 5];
    for k in 0..5 {
        l[k] = f[k + 1] + (f[k + 1] - f[k]) / 3.0;
    }
    let limit = l[4];
    if !(limit > 0.0) {
        return Err(AugmentError::BadLimit { rod });
    }
    let err = (l[4] - l[3]).abs() / limit;
    Ok((v / limit, err))
}

/// Cone angles of every rod with respect to an enhancement lattice:
/// theta_j = 2 pi |primitive_j| / |normalized_j| along the common line.
pub fn cone_angles(
    field: &AugmentedField,
    lat: &Enhancement,
) -> Result<ConeAngleReport, AugmentError> {
    let r = field.rod_structure();
    if !lat.enhances(r) {
        return Err(AugmentError::NotEnhancing);
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut rods = Vec::with_capacity(r.rod_vectors().len());
    for (idx, rv) in r.rod_vectors().iter().enumerate() {
        let (vbar, rel) = normalized_rod_vector(field, idx)?;
        let prim = lat.primitive_vector(rv)?;
        let angle = two_pi * prim.norm() / vbar.norm();
        let mismatch = (prim * two_pi - vbar * angle)
            .norm()
            .min((prim * two_pi + vbar * angle).norm());
        assert!(
            mismatch <= 1e-10 * (1.0 + two_pi * prim.norm()),
            "primitive and normalized vectors are not collinear"
        );
        rods.push(RodAngle {
            index: idx,
            angle,
            normalized: [vbar.x, vbar.y],
            primitive: [prim.x, prim.y],
            err: angle * rel,
        });
    }
    Ok(ConeAngleReport { rods })
}
