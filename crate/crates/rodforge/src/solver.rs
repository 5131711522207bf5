//! Numerical construction of tamed harmonic maps on a truncated half-plane.
//!
//! The solver discretizes (rho Phi^-1 Phi_rho)_rho + (rho Phi^-1 Phi_z)_z = 0
//! on a graded tensor grid, seeds it with a glued background map, and runs
//! nonlinear red-black (zebra) Gauss-Seidel relaxation: each interior node
//! moves along the geodesic toward the weighted mean of its neighbors. Near
//! the axis the update switches to the scalar (u, v) chart of the local rod
//! vector, where the axis conditions u_rho = 0 and v = 0 are regular.

use crate::hyp::{act, dist, exp_map, log_map, tangent_norm, GroupElem, HPoint, HypError};
use crate::models::{self, AugmentedMap, ModelsError};
use crate::rods::{RodDocument, RodStructure, RodsError};
use nalgebra::Matrix2;
use rayon::prelude::*;
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("grid spec rejected: {what} (value {value})")]
    BadSpec { what: &'static str, value: f64 },
    #[error("turning points separated by {sep} but the grid only resolves {resolvable}; refine the grid")]
    Separation { sep: f64, resolvable: f64 },
    #[error("rod structure must carry an asymptotic type to be solved")]
    Untyped,
    #[error("relaxation stagnated at residual {residual} after {sweeps} sweeps (tol {tol})")]
    Stagnation {
        residual: f64,
        sweeps: usize,
        tol: f64,
    },
    #[error("point (rho={rho}, z={z}) is outside the computational domain")]
    OutOfDomain { rho: f64, z: f64 },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(&'static str),
    #[error(transparent)]
    Models(#[from] ModelsError),
    #[error(transparent)]
    Rods(#[from] RodsError),
    #[error(transparent)]
    Hyp(#[from] HypError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

// --- grid ---

/// Parameters of the graded tensor grid.
#[derive(Clone, Debug)]
pub struct GridSpec {
    pub n_rho: usize,
    pub n_z: usize,
    /// Truncation radius as a multiple of the structure size.
    pub r_out_factor: f64,
    /// Spacing ratio toward the axis, in (0, 1]; 1 = uniform.
    pub axis_grading: f64,
    /// Spacing ratio toward each turning point, in (0, 1].
    pub tp_grading: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            n_rho: 128,
            n_z: 256,
            r_out_factor: 8.0,
            axis_grading: 0.95,
            tp_grading: 0.90,
        }
    }
}

impl GridSpec {
    /// The same grid at half the resolution per direction.
    pub fn coarsened(&self, factor: usize) -> GridSpec {
        GridSpec {
            n_rho: (self.n_rho / factor).max(17),
            n_z: (self.n_z / factor).max(17),
            ..self.clone()
        }
    }
}

/// Geometric node distribution on [0, len]: n nodes, spacing ratio 1/f
/// growing away from 0 (f = 1 gives uniform spacing).
fn geometric_nodes(len: f64, n: usize, f: f64) -> Vec<f64> {
    let m = n - 1;
    let g = 1.0 / f;
    let mut h = if (g - 1.0).abs() < 1e-12 {
        len / m as f64
    } else {
        len * (g - 1.0) / (g.powi(m as i32) - 1.0)
    };
    let mut nodes = Vec::with_capacity(n);
    let mut x = 0.0;
    nodes.push(0.0);
    for _ in 0..m {
        x += h;
        h *= g;
        nodes.push(x);
    }
    *nodes.last_mut().unwrap() = len;
    nodes
}

/// m+1 nodes on [a, b], optionally clustered toward either end.
fn segment_nodes(a: f64, b: f64, m: usize, cluster_a: bool, cluster_b: bool, f: f64) -> Vec<f64> {
    let len = b - a;
    match (cluster_a, cluster_b) {
        (false, false) => (0..=m).map(|k| a + len * k as f64 / m as f64).collect(),
        (true, false) => geometric_nodes(len, m + 1, f).into_iter().map(|x| a + x).collect(),
        (false, true) => {
            let mut nodes: Vec<f64> = geometric_nodes(len, m + 1, f)
                .into_iter()
                .rev()
                .map(|x| b - x)
                .collect();
            nodes[0] = a;
            nodes
        }
        (true, true) => {
            let m1 = m / 2;
            let m2 = m - m1;
            let mid = 0.5 * (a + b);
            let mut nodes = segment_nodes(a, mid, m1.max(1), true, false, f);
            let right = segment_nodes(mid, b, m2.max(1), false, true, f);
            nodes.extend_from_slice(&right[1..]);
            nodes
        }
    }
}

/// The graded computational grid: rho nodes from 0 to R_out, z nodes spanning
/// z_center +- R_out with every turning point sitting on a node.
#[derive(Clone, Debug)]
pub struct Grid {
    rho: Vec<f64>,
    z: Vec<f64>,
    r_out: f64,
    z_center: f64,
    size: f64,
    tp_cols: Vec<usize>,
    // Precomputed spacings.
    rho_half: Vec<f64>,
    drho: Vec<f64>,
    dz: Vec<f64>,
}

impl Grid {
    pub fn build(r: &RodStructure, spec: &GridSpec) -> Result<Grid, SolverError> {
        if spec.n_rho < 16 || spec.n_z < 16 {
            return Err(SolverError::BadSpec {
                what: "node counts must be at least 16 per direction",
                value: spec.n_rho.min(spec.n_z) as f64,
            });
        }
        for (name, f) in [
            ("axis_grading", spec.axis_grading),
            ("tp_grading", spec.tp_grading),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(SolverError::BadSpec {
                    what: if name == "axis_grading" {
                        "axis grading factor must lie in (0, 1]"
                    } else {
                        "turning-point grading factor must lie in (0, 1]"
                    },
                    value: f,
                });
            }
        }
        if !(spec.r_out_factor >= 1.0) {
            return Err(SolverError::BadSpec {
                what: "truncation factor must be at least 1",
                value: spec.r_out_factor,
            });
        }
        let tps = r.turning_points();
        let size = r.size().max(1.0);
        let z_center = if tps.is_empty() {
            0.0
        } else {
            0.5 * (tps[0] + tps[tps.len() - 1])
        };
        let r_out = spec.r_out_factor * size;
        let rho = geometric_nodes(r_out, spec.n_rho, spec.axis_grading);

        let mut anchors = vec![z_center - r_out];
        anchors.extend_from_slice(tps);
        anchors.push(z_center + r_out);
        let total_m = spec.n_z - 1;
        let nseg = anchors.len() - 1;
        let lens: Vec<f64> = anchors.windows(2).map(|w| w[1] - w[0]).collect();
        let weights: Vec<f64> = lens.iter().map(|l| l.sqrt()).collect();
        let wsum: f64 = weights.iter().sum();
        let mut alloc: Vec<usize> = weights
            .iter()
            .map(|w| ((total_m as f64 * w / wsum).round() as usize).max(10))
            .collect();
        // Rebalance to hit the requested total exactly.
        loop {
            let s: usize = alloc.iter().sum();
            if s == total_m {
                break;
            }
            let k = (0..nseg)
                .max_by(|&a, &b| {
                    let fa = alloc[a] as f64 / weights[a];
                    let fb = alloc[b] as f64 / weights[b];
                    if s > total_m {
                        fa.partial_cmp(&fb).unwrap()
                    } else {
                        fb.partial_cmp(&fa).unwrap()
                    }
                })
                .unwrap();
            if s > total_m {
                if alloc[k] <= 10 {
                    break;
                }
                alloc[k] -= 1;
            } else {
                alloc[k] += 1;
            }
        }
        let mut z = Vec::with_capacity(total_m + 1);
        for k in 0..nseg {
            let cluster_a = k > 0;
            let cluster_b = k + 1 < nseg;
            let seg = segment_nodes(
                anchors[k],
                anchors[k + 1],
                alloc[k],
                cluster_a,
                cluster_b,
                spec.tp_grading,
            );
            if k == 0 {
                z.extend_from_slice(&seg);
            } else {
                z.extend_from_slice(&seg[1..]);
            }
        }
        let tp_cols: Vec<usize> = tps
            .iter()
            .map(|&t| {
                z.iter()
                    .position(|&zz| (zz - t).abs() < 1e-12 * (1.0 + t.abs()))
                    .expect("turning points are grid anchors")
            })
            .collect();
        let rho_half: Vec<f64> = rho.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        let drho: Vec<f64> = rho.windows(2).map(|w| w[1] - w[0]).collect();
        let dz: Vec<f64> = z.windows(2).map(|w| w[1] - w[0]).collect();
        Ok(Grid {
            rho,
            z,
            r_out,
            z_center,
            size,
            tp_cols,
            rho_half,
            drho,
            dz,
        })
    }

    pub fn rho_nodes(&self) -> &[f64] {
        &self.rho
    }

    pub fn z_nodes(&self) -> &[f64] {
        &self.z
    }

    pub fn r_out(&self) -> f64 {
        self.r_out
    }

    /// The reference length the grid was scaled by (rod-structure size,
    /// floored at one).
    pub fn length_scale(&self) -> f64 {
        self.size
    }

    pub fn z_center(&self) -> f64 {
        self.z_center
    }

    pub fn n_rho(&self) -> usize {
        self.rho.len()
    }

    pub fn n_z(&self) -> usize {
        self.z.len()
    }

    fn locate(nodes: &[f64], x: f64) -> usize {
        match nodes.binary_search_by(|p| p.partial_cmp(&x).unwrap()) {
            Ok(k) => k.min(nodes.len() - 2),
            Err(k) => k.saturating_sub(1).min(nodes.len() - 2),
        }
    }
}

// --- field ---

/// A-posteriori error bound from convolving the background tension against
/// the Newtonian kernel, sampled on a probe subset.
#[derive(Clone, Debug)]
pub struct FBound {
    pub probes: Vec<(f64, f64)>,
    pub values: Vec<f64>,
    pub max: f64,
}

/// Shell profile of the distance to the asymptotic model, with a fitted
/// decay exponent over the outer decade.
#[derive(Clone, Debug)]
pub struct DecayProfile {
    pub radii: Vec<f64>,
    pub sup_dist: Vec<f64>,
    pub exponent: f64,
}

/// The discretized augmented map: (X, Y) per node off the axis, the chart
/// coordinate u on the axis, and nu (filled by the augmentation pass).
#[derive(Clone)]
pub struct AugmentedField {
    grid: Grid,
    pub(crate) x: Vec<f64>,
    pub(crate) y: Vec<f64>,
    pub(crate) nu: Vec<f64>,
    pub(crate) resid: Vec<f64>,
    pub(crate) axis_u: Vec<f64>,
    pub(crate) charts: Vec<GroupElem>,
    charts_inv: Vec<GroupElem>,
    pub(crate) chart_top: Vec<usize>,
    rod_structure: RodStructure,
    residual_history: Vec<f64>,
    f_bound: Option<FBound>,
    corr: Option<Corrections>,
}

/// Statistics of one relaxation run.
#[derive(Clone, Debug)]
pub struct RelaxStats {
    pub sweeps: usize,
    pub residual: f64,
}

fn build_charts(
    grid: &Grid,
    r: &RodStructure,
) -> (Vec<GroupElem>, Vec<GroupElem>, Vec<usize>) {
    let nz = grid.z.len();
    let nr = grid.rho.len();
    let tps = r.turning_points();
    let vectors = r.rod_vectors();
    let mut charts = Vec::with_capacity(nz);
    let mut charts_inv = Vec::with_capacity(nz);
    let mut tops = Vec::with_capacity(nz);
    for j in 0..nz {
        if grid.tp_cols.contains(&j) {
            charts.push(GroupElem::identity());
            charts_inv.push(GroupElem::identity());
            tops.push(0);
            continue;
        }
        let z = grid.z[j];
        let rod = tps.iter().filter(|&&t| t < z).count();
        let q = crate::hyp::axis_frame(&vectors[rod]);
        charts_inv.push(q.inverse());
        charts.push(q);
        // Local rod length: the rod itself if finite, otherwise the structure
        // size as the scale.
        let ell = if rod == 0 || rod == tps.len() {
            grid.size
        } else {
            tps[rod] - tps[rod - 1]
        };
        let lim = 0.05 * ell;
        let mut top = grid.rho.iter().take_while(|&&p| p < lim).count().max(4);
        top = top.min(nr / 3).max(3);
        tops.push(top);
    }
    (charts, charts_inv, tops)
}

impl AugmentedField {
    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        j * self.grid.rho.len() + i
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn rod_structure(&self) -> &RodStructure {
        &self.rod_structure
    }

    pub fn residual_history(&self) -> &[f64] {
        &self.residual_history
    }

    pub fn f_bound(&self) -> Option<&FBound> {
        self.f_bound.as_ref()
    }

    /// Switch every column to the direct geodesic update (test hook: the
    /// pure scheme is exactly energy-diminishing, the chart closure is not).
    #[cfg(test)]
    pub(crate) fn disable_charts(&mut self) {
        for t in &mut self.chart_top {
            *t = 0;
        }
    }

    /// The map at node (i, j); None on the axis, where Phi degenerates.
    pub fn phi_at(&self, i: usize, j: usize) -> Option<HPoint> {
        if i == 0 {
            return None;
        }
        HPoint::new(self.x[self.idx(i, j)], self.y[self.idx(i, j)]).ok()
    }

    pub fn nu_at(&self, i: usize, j: usize) -> f64 {
        self.nu[self.idx(i, j)]
    }

    /// Sample the map by bilinear interpolation; inside the first cell ring
    /// the interpolation runs in the (u, v) chart with the known rho^2 axis
    /// behavior.
    pub fn sample_phi(&self, rho: f64, z: f64) -> Result<HPoint, SolverError> {
        let g = &self.grid;
        if !(rho > 0.0)
            || rho > g.r_out
            || z < g.z[0]
            || z > g.z[g.z.len() - 1]
        {
            return Err(SolverError::OutOfDomain { rho, z });
        }
        let j = Grid::locate(&g.z, z);
        let tz = ((z - g.z[j]) / g.dz[j]).clamp(0.0, 1.0);
        let i = Grid::locate(&g.rho, rho).max(if rho < g.rho[1] { 0 } else { 1 });
        let top = self.chart_top[j].min(self.chart_top[j + 1]);
        if i + 1 <= top {
            // Chart columns on both sides: interpolate the chart variables,
            // which stay smooth down to the axis (u and v are even in rho, so
            // the radial coordinate is s = rho^2).
            let q = self.charts[j];
            let qi = self.charts_inv[j];
            let chart = |ii: usize, jj: usize| -> (f64, f64) {
                if ii == 0 {
                    (self.axis_u[jj], 0.0)
                } else {
                    let p = HPoint::new(self.x[self.idx(ii, jj)], self.y[self.idx(ii, jj)])
                        .expect("stored point");
                    let pp = act(&q, &p);
                    ((pp.x() / g.rho[ii]).ln(), pp.y())
                }
            };
            let (u0a, v0a) = chart(i, j);
            let (u0b, v0b) = chart(i, j + 1);
            let (u1a, v1a) = chart(i + 1, j);
            let (u1b, v1b) = chart(i + 1, j + 1);
            let s0 = g.rho[i] * g.rho[i];
            let s1 = g.rho[i + 1] * g.rho[i + 1];
            let ts = ((rho * rho - s0) / (s1 - s0)).clamp(0.0, 1.0);
            let lo_u = u0a + tz * (u0b - u0a);
            let lo_v = v0a + tz * (v0b - v0a);
            let hi_u = u1a + tz * (u1b - u1a);
            let hi_v = v1a + tz * (v1b - v1a);
            let u = lo_u + ts * (hi_u - lo_u);
            let v = lo_v + ts * (hi_v - lo_v);
            return Ok(act(&qi, &HPoint::new(rho * u.exp(), v)?));
        }
        let i = i.max(1);
        let tr = ((rho - g.rho[i]) / g.drho[i]).clamp(0.0, 1.0);
        let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
        let corner = |ii: usize, jj: usize| (self.x[self.idx(ii, jj)], self.y[self.idx(ii, jj)]);
        let (xa, ya) = corner(i, j);
        let (xb, yb) = corner(i + 1, j);
        let (xc, yc) = corner(i, j + 1);
        let (xd, yd) = corner(i + 1, j + 1);
        let x = lerp(lerp(xa, xb, tr), lerp(xc, xd, tr), tz);
        let y = lerp(lerp(ya, yb, tr), lerp(yc, yd, tr), tz);
        Ok(HPoint::new(x, y)?)
    }

    pub fn sample_nu(&self, rho: f64, z: f64) -> Result<f64, SolverError> {
        let g = &self.grid;
        if !(rho >= 0.0) || rho > g.r_out || z < g.z[0] || z > g.z[g.z.len() - 1] {
            return Err(SolverError::OutOfDomain { rho, z });
        }
        let i = Grid::locate(&g.rho, rho);
        let j = Grid::locate(&g.z, z);
        let tr = ((rho - g.rho[i]) / g.drho[i]).clamp(0.0, 1.0);
        let tz = ((z - g.z[j]) / g.dz[j]).clamp(0.0, 1.0);
        let v = |ii: usize, jj: usize| self.nu[self.idx(ii, jj)];
        let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
        Ok(lerp(
            lerp(v(i, j), v(i + 1, j), tr),
            lerp(v(i, j + 1), v(i + 1, j + 1), tr),
            tz,
        ))
    }

    /// Sample a closed-form augmented map onto a grid.
    pub fn from_model(map: &AugmentedMap, grid: &Grid) -> Result<AugmentedField, SolverError> {
        let r = map.rod_structure().clone();
        let (charts, charts_inv, tops) = build_charts(grid, &r);
        let nr = grid.rho.len();
        let nz = grid.z.len();
        let nn = nr * nz;
        let mut x = vec![0.0; nn];
        let mut y = vec![f64::NAN; nn];
        let mut nu = vec![0.0; nn];
        let mut axis_u = vec![f64::NAN; nz];
        let eps = grid.rho[1] * 1e-4;
        for j in 0..nz {
            let z = grid.z[j];
            for i in 1..nr {
                let (pt, n) = map.eval(grid.rho[i], z)?;
                x[j * nr + i] = pt.x();
                y[j * nr + i] = pt.y();
                nu[j * nr + i] = n;
            }
            let (pt, n) = map.eval(eps, z)?;
            nu[j * nr] = n;
            if tops[j] > 0 {
                let pp = act(&charts[j], &pt);
                axis_u[j] = (pp.x() / eps).ln();
            }
        }
        Ok(AugmentedField {
            grid: grid.clone(),
            x,
            y,
            nu,
            resid: vec![0.0; nn],
            axis_u,
            charts,
            charts_inv,
            chart_top: tops,
            rod_structure: r,
            residual_history: Vec::new(),
            f_bound: None,
            corr: None,
        })
    }

    /// CSV dump of all nodes: rho, z, X, Y, nu, resid with 17 significant
    /// digits. On the axis X = 0 and Y is the rod's Y-limit where defined.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "rho,z,X,Y,nu,resid")?;
        let g = &self.grid;
        let nr = g.rho.len();
        let tps = self.rod_structure.turning_points();
        let vectors = self.rod_structure.rod_vectors();
        for j in 0..g.z.len() {
            for i in 0..nr {
                let k = j * nr + i;
                let (x, y) = if i == 0 {
                    let rod = tps.iter().filter(|&&t| t < g.z[j]).count();
                    let rep = vectors[rod.min(vectors.len() - 1)].representative();
                    let lim = if rep.x.abs() > 1e-12 {
                        -rep.y / rep.x
                    } else {
                        f64::NAN
                    };
                    (0.0, lim)
                } else {
                    (self.x[k], self.y[k])
                };
                writeln!(
                    w,
                    "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                    g.rho[i], g.z[j], x, y, self.nu[k], self.resid[k]
                )?;
            }
        }
        Ok(())
    }

    /// Versioned binary checkpoint ("RFG1").
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<(), SolverError> {
        w.write_all(b"RFG1")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&[u8::from(self.corr.is_some())])?;
        let g = &self.grid;
        for n in [g.rho.len() as u64, g.z.len() as u64] {
            w.write_all(&n.to_le_bytes())?;
        }
        for v in [g.r_out, g.z_center, g.size] {
            w.write_all(&v.to_le_bytes())?;
        }
        let arrays: [&[f64]; 7] = [
            &g.rho,
            &g.z,
            &self.x,
            &self.y,
            &self.nu,
            &self.resid,
            &self.axis_u,
        ];
        for arr in arrays {
            for v in arr {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.write_all(&(self.residual_history.len() as u64).to_le_bytes())?;
        for v in &self.residual_history {
            w.write_all(&v.to_le_bytes())?;
        }
        let doc = RodDocument::from_parts(&self.rod_structure, None)?;
        let json = serde_json::to_vec(&doc)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<AugmentedField, SolverError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"RFG1" {
            return Err(SolverError::BadCheckpoint("magic mismatch"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != 1 {
            return Err(SolverError::BadCheckpoint("unsupported version"));
        }
        let mut b1 = [0u8; 1];
        r.read_exact(&mut b1)?;
        let has_corr = b1[0] != 0;
        let mut b8 = [0u8; 8];
        let mut read_u64 = |r: &mut R| -> Result<u64, SolverError> {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let nr = read_u64(r)? as usize;
        let nz = read_u64(r)? as usize;
        let mut bf = [0u8; 8];
        let mut read_f64 = |r: &mut R| -> Result<f64, SolverError> {
            r.read_exact(&mut bf)?;
            Ok(f64::from_le_bytes(bf))
        };
        let r_out = read_f64(r)?;
        let z_center = read_f64(r)?;
        let size = read_f64(r)?;
        let read_vec = |r: &mut R, n: usize| -> Result<Vec<f64>, SolverError> {
            let mut out = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b)?;
                out.push(f64::from_le_bytes(b));
            }
            Ok(out)
        };
        let rho = read_vec(r, nr)?;
        let z = read_vec(r, nz)?;
        let x = read_vec(r, nr * nz)?;
        let y = read_vec(r, nr * nz)?;
        let nu = read_vec(r, nr * nz)?;
        let resid = read_vec(r, nr * nz)?;
        let axis_u = read_vec(r, nz)?;
        let mut b8b = [0u8; 8];
        r.read_exact(&mut b8b)?;
        let hist_len = u64::from_le_bytes(b8b) as usize;
        let residual_history = read_vec(r, hist_len)?;
        r.read_exact(&mut b8b)?;
        let json_len = u64::from_le_bytes(b8b) as usize;
        let mut json = vec![0u8; json_len];
        r.read_exact(&mut json)?;
        let doc: RodDocument = serde_json::from_slice(&json)?;
        let (structure, _) = doc.into_parts()?;
        let tp_cols: Vec<usize> = structure
            .turning_points()
            .iter()
            .map(|&t| {
                z.iter()
                    .position(|&zz| (zz - t).abs() < 1e-9 * (1.0 + t.abs()))
                    .ok_or(SolverError::BadCheckpoint("turning point off-grid"))
            })
            .collect::<Result<_, _>>()?;
        let rho_half: Vec<f64> = rho.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        let drho: Vec<f64> = rho.windows(2).map(|w| w[1] - w[0]).collect();
        let dz: Vec<f64> = z.windows(2).map(|w| w[1] - w[0]).collect();
        let grid = Grid {
            rho,
            z,
            r_out,
            z_center,
            size,
            tp_cols,
            rho_half,
            drho,
            dz,
        };
        let (charts, charts_inv, chart_top) = build_charts(&grid, &structure);
        // The corner corrections are a deterministic function of the grid
        // and the structure, so they are rebuilt instead of serialized.
        let corr = if has_corr {
            let bg = Background::build(&structure, grid.size)?;
            Some(build_corrections(&grid, &bg, &charts, &chart_top)?)
        } else {
            None
        };
        Ok(AugmentedField {
            grid,
            x,
            y,
            nu,
            resid,
            axis_u,
            charts,
            charts_inv,
            chart_top,
            rod_structure: structure,
            residual_history,
            f_bound: None,
            corr,
        })
    }
}

// --- background map ---

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// 1 inside r0, 0 outside r1.
fn bump(r: f64, r0: f64, r1: f64) -> f64 {
    smoothstep((r1 - r) / (r1 - r0))
}

struct Background {
    sharp: AugmentedMap,
    z_center: f64,
    tps: Vec<f64>,
    tp_models: Vec<AugmentedMap>,
    tp_radius: Vec<f64>,
    rod_models: Vec<Option<AugmentedMap>>,
}

impl Background {
    fn build(r: &RodStructure, size: f64) -> Result<Background, SolverError> {
        if r.atype().is_none() {
            return Err(SolverError::Untyped);
        }
        let sharp = models::asymptotic_model(r)?;
        let tps = r.turning_points().to_vec();
        let vectors = r.rod_vectors();
        let z_center = if tps.is_empty() {
            0.0
        } else {
            0.5 * (tps[0] + tps[tps.len() - 1])
        };
        let mut tp_models = Vec::new();
        let mut tp_radius = Vec::new();
        for k in 0..tps.len() {
            tp_models.push(models::turning_model(&vectors[k], &vectors[k + 1])?);
            let left = if k > 0 { tps[k] - tps[k - 1] } else { f64::INFINITY };
            let right = if k + 1 < tps.len() {
                tps[k + 1] - tps[k]
            } else {
                f64::INFINITY
            };
            tp_radius.push(0.5 * left.min(right).min(size));
        }
        let mut rod_models = vec![None; vectors.len()];
        for (j, slot) in rod_models.iter_mut().enumerate() {
            if j > 0 && j < tps.len() {
                *slot = Some(models::rod_model(&vectors[j]));
            }
        }
        Ok(Background {
            sharp,
            z_center,
            tps,
            tp_models,
            tp_radius,
            rod_models,
        })
    }

    fn eval(&self, rho: f64, z: f64) -> Result<HPoint, SolverError> {
        let far = self.sharp.phi(rho, z - self.z_center)?;
        let mut pts: Vec<HPoint> = Vec::new();
        let mut ws: Vec<f64> = Vec::new();
        for (k, model) in self.tp_models.iter().enumerate() {
            let rk = rho.hypot(z - self.tps[k]);
            let d = self.tp_radius[k];
            let w = bump(rk, 0.5 * d, d);
            if w > 0.0 {
                pts.push(model.phi(rho, z - self.tps[k])?);
                ws.push(w);
            }
        }
        for (j, slot) in self.rod_models.iter().enumerate() {
            if let Some(model) = slot {
                let (zl, zr) = (self.tps[j - 1], self.tps[j]);
                let ell = zr - zl;
                let m = (z - zl).min(zr - z);
                let w = smoothstep((m / ell - 0.20) / 0.15) * bump(rho, 0.25 * ell, 0.5 * ell);
                if w > 0.0 {
                    pts.push(model.phi(rho, z)?);
                    ws.push(w);
                }
            }
        }
        let s: f64 = ws.iter().sum();
        if s <= 0.0 {
            return Ok(far);
        }
        let local = if pts.len() == 1 {
            pts[0]
        } else {
            let scale = 1.0 / s;
            let norm: Vec<f64> = ws.iter().map(|w| w * scale).collect();
            crate::hyp::geodesic_mix(&pts, &norm)?
        };
        let t = s.min(1.0);
        if t >= 1.0 {
            Ok(local)
        } else {
            Ok(exp_map(&far, &(log_map(&far, &local) * t)))
        }
    }
}

/// Assemble the glued background field: the asymptotic model far out, the
/// turning-point model near each turning point, the rod model along interior
/// rod interiors, joined by geodesic interpolation with smooth cutoffs.
pub fn background_map(r: &RodStructure, grid: &Grid) -> Result<AugmentedField, SolverError> {
    // Refuse structures the grid cannot resolve: every finite rod must be
    // well separated relative to the first off-axis rho node, which sets the
    // scale below which the near-axis chart region can tell rods apart.
    let resolvable = 10.0 * grid.rho[1];
    for k in 1..r.turning_points().len() {
        let sep = r.turning_points()[k] - r.turning_points()[k - 1];
        if sep < resolvable {
            return Err(SolverError::Separation { sep, resolvable });
        }
    }
    let bg = Background::build(r, grid.size)?;
    let (charts, charts_inv, tops) = build_charts(grid, r);
    let nr = grid.rho.len();
    let nz = grid.z.len();
    let nn = nr * nz;
    let mut x = vec![0.0; nn];
    let mut y = vec![f64::NAN; nn];
    let mut nu = vec![0.0; nn];
    let mut axis_u = vec![f64::NAN; nz];
    let eps = grid.rho[1] * 1e-4;
    for j in 0..nz {
        let z = grid.z[j];
        for i in 1..nr {
            let pt = bg.eval(grid.rho[i], z)?;
            x[j * nr + i] = pt.x();
            y[j * nr + i] = pt.y();
            nu[j * nr + i] = bg.sharp.nu(grid.rho[i], z - bg.z_center)?;
        }
        nu[j * nr] = bg.sharp.nu(eps, z - bg.z_center)?;
        if tops[j] > 0 {
            let pt = bg.eval(eps, z)?;
            let pp = act(&charts[j], &pt);
            axis_u[j] = (pp.x() / eps).ln();
        }
    }
    let corr = build_corrections(grid, &bg, &charts, &tops)?;
    Ok(AugmentedField {
        grid: grid.clone(),
        x,
        y,
        nu,
        resid: vec![0.0; nn],
        axis_u,
        charts,
        charts_inv,
        chart_top: tops,
        rod_structure: r.clone(),
        residual_history: Vec::new(),
        f_bound: None,
        corr: Some(corr),
    })
}

// --- corner defect correction ---

/// Discrete defects of the exact turning-point models on the scheme's own
/// stencil, tapered to zero at the gluing radius. Subtracting them from the
/// updates makes the scheme exact on the singular local models, so the
/// pointwise error near the axis corners is set by the smooth deviation
/// instead of the O(1) truncation on the log singularity.
#[derive(Clone)]
struct Corrections {
    /// Model point at direct-update nodes inside a correction ball.
    base: Vec<Option<HPoint>>,
    /// Tapered tangent defect at those nodes (stencil-weighted log sum).
    tangent: Vec<Matrix2<f64>>,
    /// Tapered scalar defects of the chart equations.
    chart_u: Vec<f64>,
    chart_v: Vec<f64>,
}

fn build_corrections(
    grid: &Grid,
    bg: &Background,
    charts: &[GroupElem],
    tops: &[usize],
) -> Result<Corrections, SolverError> {
    let nr = grid.rho.len();
    let nz = grid.z.len();
    let nn = nr * nz;
    let mut corr = Corrections {
        base: vec![None; nn],
        tangent: vec![Matrix2::zeros(); nn],
        chart_u: vec![0.0; nn],
        chart_v: vec![0.0; nn],
    };
    for (k, model) in bg.tp_models.iter().enumerate() {
        let zk = bg.tps[k];
        let rad = bg.tp_radius[k];
        for j in 1..nz - 1 {
            if (grid.z[j] - zk).abs() >= rad {
                continue;
            }
            let top = tops[j];
            let q = charts[j];
            // Model values in this column's chart; the axis entry mirrors the
            // scheme's one-sided closure so the model is an exact fixed point
            // of the corrected update.
            let mu = |ii: usize, jj: usize| -> Result<(f64, f64), SolverError> {
                if ii == 0 {
                    let a = {
                        let p = model.phi(grid.rho[1], grid.z[jj] - zk)?;
                        let pp = act(&q, &p);
                        (pp.x() / grid.rho[1]).ln()
                    };
                    let b = {
                        let p = model.phi(grid.rho[2], grid.z[jj] - zk)?;
                        let pp = act(&q, &p);
                        (pp.x() / grid.rho[2]).ln()
                    };
                    let (r1, r2) = (grid.rho[1], grid.rho[2]);
                    Ok(((r2 * r2 * a - r1 * r1 * b) / (r2 * r2 - r1 * r1), 0.0))
                } else {
                    let p = model.phi(grid.rho[ii], grid.z[jj] - zk)?;
                    let pp = act(&q, &p);
                    Ok(((pp.x() / grid.rho[ii]).ln(), pp.y()))
                }
            };
            for i in 1..nr - 1 {
                let rho = grid.rho[i];
                let r_node = rho.hypot(grid.z[j] - zk);
                if r_node >= rad {
                    break;
                }
                let chi = bump(r_node, 0.5 * rad, rad);
                if chi <= 0.0 {
                    continue;
                }
                let idx = j * nr + i;
                let drbar = 0.5 * (grid.rho[i + 1] - grid.rho[i - 1]);
                let dzbar = 0.5 * (grid.z[j + 1] - grid.z[j - 1]);
                let we = grid.rho_half[i] / (grid.drho[i] * drbar);
                let ww = grid.rho_half[i - 1] / (grid.drho[i - 1] * drbar);
                let wn = rho / (grid.dz[j] * dzbar);
                let ws = rho / (grid.dz[j - 1] * dzbar);
                if top > 0 && i <= top {
                    let (u, v) = mu(i, j)?;
                    let (u_w, v_w) = mu(i - 1, j)?;
                    let (u_e, v_e) = mu(i + 1, j)?;
                    let (u_s, v_s) = mu(i, j - 1)?;
                    let (u_n, v_n) = mu(i, j + 1)?;
                    let vr = (v_e - v_w) / (grid.rho[i + 1] - grid.rho[i - 1]);
                    let vz = (v_n - v_s) / (grid.z[j + 1] - grid.z[j - 1]);
                    let src = (vr * vr + vz * vz) * (-2.0 * u).exp() / rho;
                    let wsum = we + ww + wn + ws;
                    let c_u = we * u_e + ww * u_w + wn * u_n + ws * u_s - wsum * u + src;
                    let ve = (-(u + u_e)).exp() / grid.rho_half[i] / (grid.drho[i] * drbar);
                    let vw = (-(u + u_w)).exp() / grid.rho_half[i - 1] / (grid.drho[i - 1] * drbar);
                    let vn_ = (-(u + u_n)).exp() / rho / (grid.dz[j] * dzbar);
                    let vs_ = (-(u + u_s)).exp() / rho / (grid.dz[j - 1] * dzbar);
                    let vsum = ve + vw + vn_ + vs_;
                    let c_v = ve * v_e + vw * v_w + vn_ * v_n + vs_ * v_s - vsum * v;
                    corr.chart_u[idx] = chi * c_u;
                    corr.chart_v[idx] = chi * c_v;
                } else {
                    let p = model.phi(rho, grid.z[j] - zk)?;
                    let mut t = Matrix2::zeros();
                    if i > 1 || top > 0 {
                        t += log_map(&p, &model.phi(grid.rho[i - 1], grid.z[j] - zk)?) * ww;
                    }
                    t += log_map(&p, &model.phi(grid.rho[i + 1], grid.z[j] - zk)?) * we;
                    t += log_map(&p, &model.phi(rho, grid.z[j - 1] - zk)?) * ws;
                    t += log_map(&p, &model.phi(rho, grid.z[j + 1] - zk)?) * wn;
                    corr.base[idx] = Some(p);
                    corr.tangent[idx] = t * chi;
                }
            }
        }
    }
    Ok(corr)
}

// --- relaxation ---

/// Remove the conformal (trace) component of a tangent read at a base point
/// it does not belong to; the model sits at det = 1, so the defect tangent
/// from a nearby base acquires a spurious trace part at the field point.
#[inline]
fn project_tracefree(p: &HPoint, t: &Matrix2<f64>) -> Matrix2<f64> {
    let m = p.embed_matrix();
    let m_inv = Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]);
    let c = 0.5 * (m_inv * t).trace();
    t - m * c
}

struct RawField {
    x: *mut f64,
    y: *mut f64,
    resid: *mut f64,
    axis_u: *mut f64,
}

// Zebra coloring guarantees disjoint column ownership per pass.
unsafe impl Sync for RawField {}

#[allow(clippy::too_many_arguments)]
unsafe fn sweep_column(
    raw: &RawField,
    g: &Grid,
    charts: &[GroupElem],
    charts_inv: &[GroupElem],
    tops: &[usize],
    corr: Option<&Corrections>,
    j: usize,
    omega: f64,
) -> f64 {
    let nr = g.rho.len();
    let get = |i: usize, jj: usize| -> (f64, f64) {
        let k = jj * nr + i;
        (*raw.x.add(k), *raw.y.add(k))
    };
    let get_pt = |i: usize, jj: usize| -> HPoint {
        let (x, y) = get(i, jj);
        HPoint::new(x, y).expect("field stores valid half-plane points")
    };
    let q = charts[j];
    let qi = charts_inv[j];
    let chart_of = |i: usize, jj: usize| -> (f64, f64) {
        let pp = act(&q, &get_pt(i, jj));
        ((pp.x() / g.rho[i]).ln(), pp.y())
    };
    let top = tops[j];
    let mut colmax = 0.0f64;
    for i in 1..nr - 1 {
        let k = j * nr + i;
        let rho = g.rho[i];
        let drbar = 0.5 * (g.rho[i + 1] - g.rho[i - 1]);
        let dzbar = 0.5 * (g.z[j + 1] - g.z[j - 1]);
        let we = g.rho_half[i] / (g.drho[i] * drbar);
        let ww = g.rho_half[i - 1] / (g.drho[i - 1] * drbar);
        let wn = rho / (g.dz[j] * dzbar);
        let ws = rho / (g.dz[j - 1] * dzbar);
        if top > 0 && i <= top {
            // Scalar updates in the (u, v) chart of the local rod vector.
            let (u, v) = chart_of(i, j);
            let (u_w, v_w) = if i == 1 {
                (*raw.axis_u.add(j), 0.0)
            } else {
                chart_of(i - 1, j)
            };
            let (u_e, v_e) = chart_of(i + 1, j);
            let (u_s, v_s) = chart_of(i, j - 1);
            let (u_n, v_n) = chart_of(i, j + 1);
            let vr = (v_e - v_w) / (g.rho[i + 1] - g.rho[i - 1]);
            let vz = (v_n - v_s) / (g.z[j + 1] - g.z[j - 1]);
            // div(rho grad u) = -e^{-2u} |grad v|^2 / rho, so the source
            // pushes u above the neighbor average (and is self-damping:
            // larger u shrinks it, which keeps the iteration stable).
            let src = (vr * vr + vz * vz) * (-2.0 * u).exp() / rho;
            let c_u = corr.map_or(0.0, |c| c.chart_u[k]);
            let wsum = we + ww + wn + ws;
            let u_gs = (we * u_e + ww * u_w + wn * u_n + ws * u_s + src - c_u) / wsum;
            // v flux coefficients e^{-2u}/rho at the half edges.
            let ce = (-(u + u_e)).exp() / g.rho_half[i];
            let cw = (-(u + u_w)).exp() / g.rho_half[i - 1];
            let cn = (-(u + u_n)).exp() / rho;
            let cs = (-(u + u_s)).exp() / rho;
            let ve = ce / (g.drho[i] * drbar);
            let vw = cw / (g.drho[i - 1] * drbar);
            let vn_ = cn / (g.dz[j] * dzbar);
            let vs_ = cs / (g.dz[j - 1] * dzbar);
            let vsum = ve + vw + vn_ + vs_;
            let c_v = corr.map_or(0.0, |c| c.chart_v[k]);
            let v_gs = (ve * v_e + vw * v_w + vn_ * v_n + vs_ * v_s - c_v) / vsum;
            let mut du = u_gs - u;
            let mut dv = v_gs - v;
            let res = du.abs() + dv.abs();
            colmax = colmax.max(res);
            let cap = 2.0 * (1.0 + v.abs());
            if res > cap {
                let f = cap / res;
                du *= f;
                dv *= f;
            }
            // Over-relaxation is marginally unstable where the defect
            // corrections act; fall back to plain Gauss-Seidel there.
            let om = if c_u != 0.0 || c_v != 0.0 {
                omega.min(1.0)
            } else {
                omega
            };
            let u_new = u + om * du;
            let v_new = v + om * dv;
            let p_new = act(
                &qi,
                &HPoint::new(rho * u_new.exp(), v_new).expect("chart stays in the model"),
            );
            *raw.x.add(k) = p_new.x();
            *raw.y.add(k) = p_new.y();
            *raw.resid.add(k) = res;
        } else {
            // Direct geodesic update toward the weighted neighbor mean.
            let p = get_pt(i, j);
            let mut t = Matrix2::zeros();
            let mut wsum = 0.0;
            if i > 1 || top > 0 {
                t += log_map(&p, &get_pt(i - 1, j)) * ww;
                wsum += ww;
            }
            // i == 1 on a turning-point column: the radial flux through the
            // axis cell face vanishes there, so the west term is dropped.
            t += log_map(&p, &get_pt(i + 1, j)) * we;
            t += log_map(&p, &get_pt(i, j - 1)) * ws;
            t += log_map(&p, &get_pt(i, j + 1)) * wn;
            wsum += we + ws + wn;
            let mut om = omega;
            if let Some(c) = corr {
                // Subtract the model's stencil defect (the field sits close
                // to the model wherever the taper is nonzero, so reading the
                // tangent at the field point is a second-order crime).
                if c.base[k].is_some() {
                    t = project_tracefree(&p, &(t - c.tangent[k]));
                    om = omega.min(1.0);
                }
            }
            let disp = t / wsum;
            let res = tangent_norm(&p, &disp);
            colmax = colmax.max(res);
            let scale = if res > 2.0 { 2.0 / res } else { 1.0 };
            let p_new = exp_map(&p, &(disp * (om * scale)));
            *raw.x.add(k) = p_new.x();
            *raw.y.add(k) = p_new.y();
            *raw.resid.add(k) = res;
        }
    }
    if top > 0 {
        // Axis closure u_rho = 0: quadratic one-sided fit through rows 1, 2.
        let (u1, _) = chart_of(1, j);
        let (u2, _) = chart_of(2, j);
        let (r1, r2) = (g.rho[1], g.rho[2]);
        let u0 = (r2 * r2 * u1 - r1 * r1 * u2) / (r2 * r2 - r1 * r1);
        let old = *raw.axis_u.add(j);
        colmax = colmax.max((u0 - old).abs());
        *raw.axis_u.add(j) = u0;
    }
    colmax
}

fn sweep(field: &mut AugmentedField, omega: f64) -> f64 {
    let nz = field.grid.z.len();
    let grid = &field.grid;
    let charts = &field.charts;
    let charts_inv = &field.charts_inv;
    let tops = &field.chart_top;
    let corr = field.corr.as_ref();
    let raw = RawField {
        x: field.x.as_mut_ptr(),
        y: field.y.as_mut_ptr(),
        resid: field.resid.as_mut_ptr(),
        axis_u: field.axis_u.as_mut_ptr(),
    };
    let mut maxres = 0.0f64;
    for parity in 0..2 {
        let m = (1..nz - 1)
            .into_par_iter()
            .filter(|j| j & 1 == parity)
            .map(|j| unsafe { sweep_column(&raw, grid, charts, charts_inv, tops, corr, j, omega) })
            .reduce(|| 0.0, f64::max);
        maxres = maxres.max(m);
    }
    maxres
}

/// Relax the field in place until the sup-norm of the discrete tension
/// displacement drops below `tol` or `max_sweeps` is exhausted. Errors on
/// stagnation above tolerance.
pub fn relax(
    field: &mut AugmentedField,
    tol: f64,
    max_sweeps: usize,
) -> Result<RelaxStats, SolverError> {
    let n = field.grid.rho.len().max(field.grid.z.len());
    let omega_opt = (2.0 / (1.0 + (std::f64::consts::PI / n as f64).sin())).min(1.95);
    let mut best = f64::INFINITY;
    let mut best_sweep = 0;
    let mut res = f64::INFINITY;
    for s in 0..max_sweeps {
        let omega = if s < 30 { 1.0 } else { omega_opt };
        res = sweep(field, omega);
        field.residual_history.push(res);
        if res < tol {
            return Ok(RelaxStats {
                sweeps: s + 1,
                residual: res,
            });
        }
        if res < 0.999 * best {
            best = res;
            best_sweep = s;
        } else if s - best_sweep > 1500 {
            return Err(SolverError::Stagnation {
                residual: res,
                sweeps: s + 1,
                tol,
            });
        }
    }
    if res < tol {
        Ok(RelaxStats {
            sweeps: max_sweeps,
            residual: res,
        })
    } else {
        Err(SolverError::Stagnation {
            residual: res,
            sweeps: max_sweeps,
            tol,
        })
    }
}

/// Options for the full solve pipeline.
#[derive(Clone, Debug)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_sweeps: usize,
    /// Number of coarse-to-fine levels (1 = no cascade).
    pub levels: usize,
    /// Attach the Newtonian-kernel a-posteriori bound.
    pub f_bound: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-8,
            max_sweeps: 200_000,
            levels: 3,
            f_bound: false,
        }
    }
}

/// Initialize every non-Dirichlet node of `fine` from `coarse` by sampling.
fn inject(fine: &mut AugmentedField, coarse: &AugmentedField) -> Result<(), SolverError> {
    let nr = fine.grid.rho.len();
    let nz = fine.grid.z.len();
    for j in 1..nz - 1 {
        let z = fine.grid.z[j];
        for i in 1..nr - 1 {
            let rho = fine.grid.rho[i];
            if let Ok(p) = coarse.sample_phi(rho, z) {
                let k = j * nr + i;
                fine.x[k] = p.x();
                fine.y[k] = p.y();
            }
        }
        if fine.chart_top[j] > 0 {
            let eps = fine.grid.rho[1] * 1e-3;
            if let Ok(p) = coarse.sample_phi(eps, z) {
                let pp = act(&fine.charts[j], &p);
                fine.axis_u[j] = (pp.x() / eps).ln();
            }
        }
    }
    Ok(())
}

/// Background map, coarse-to-fine cascade, relaxation, and the a-posteriori
/// bound: the full construction of the tamed harmonic map for `r`.
pub fn solve_with(
    r: &RodStructure,
    spec: &GridSpec,
    opts: &SolveOptions,
) -> Result<AugmentedField, SolverError> {
    let mut prev: Option<AugmentedField> = None;
    for level in (0..opts.levels.max(1)).rev() {
        let lspec = spec.coarsened(1 << level);
        if level > 0 && (lspec.n_rho >= spec.n_rho || lspec.n_z >= spec.n_z) {
            continue;
        }
        let grid = Grid::build(r, &lspec)?;
        let mut field = background_map(r, &grid)?;
        let f_bound = if level == 0 && opts.f_bound {
            Some(newtonian_bound(&field))
        } else {
            None
        };
        if let Some(c) = &prev {
            inject(&mut field, c)?;
        }
        let tol = opts.tol * 10f64.powi(level as i32);
        relax(&mut field, tol, opts.max_sweeps)?;
        field.f_bound = f_bound;
        prev = Some(field);
    }
    Ok(prev.expect("at least one level runs"))
}

pub fn solve(r: &RodStructure, spec: &GridSpec) -> Result<AugmentedField, SolverError> {
    solve_with(r, spec, &SolveOptions::default())
}

// --- diagnostics ---

/// Complete elliptic integral K(m) with parameter m = k^2, by AGM.
fn ellip_k(m: f64) -> f64 {
    let mut a = 1.0f64;
    let mut b = (1.0 - m).max(0.0).sqrt();
    for _ in 0..60 {
        if (a - b).abs() < 1e-15 * a {
            break;
        }
        let an = 0.5 * (a + b);
        b = (a * b).sqrt();
        a = an;
    }
    std::f64::consts::FRAC_PI_2 / a
}

/// Convolve the discrete tension of `field` against the Newtonian kernel of
/// R^3 (rings in the half-plane), sampled on a probe subset. Bounds the
/// distance between the background and the true solution.
pub fn newtonian_bound(field: &AugmentedField) -> FBound {
    let g = &field.grid;
    let nr = g.rho.len();
    let nz = g.z.len();
    // Tension density per 3-volume at interior nodes away from the axis.
    let mut sources: Vec<(f64, f64, f64)> = Vec::new(); // (rho, z, strength dA)
    for j in 1..nz - 1 {
        for i in 3..nr - 1 {
            let p = match field.phi_at(i, j) {
                Some(p) => p,
                None => continue,
            };
            let rho = g.rho[i];
            let drbar = 0.5 * (g.rho[i + 1] - g.rho[i - 1]);
            let dzbar = 0.5 * (g.z[j + 1] - g.z[j - 1]);
            let we = g.rho_half[i] / (g.drho[i] * drbar);
            let ww = g.rho_half[i - 1] / (g.drho[i - 1] * drbar);
            let wn = rho / (g.dz[j] * dzbar);
            let ws = rho / (g.dz[j - 1] * dzbar);
            let mut t = Matrix2::zeros();
            t += log_map(&p, &field.phi_at(i - 1, j).unwrap()) * ww;
            t += log_map(&p, &field.phi_at(i + 1, j).unwrap()) * we;
            t += log_map(&p, &field.phi_at(i, j - 1).unwrap()) * ws;
            t += log_map(&p, &field.phi_at(i, j + 1).unwrap()) * wn;
            if let Some(c) = &field.corr {
                // Measure gluing tension, not the scheme's corner truncation.
                let k = j * nr + i;
                if c.base[k].is_some() {
                    t = project_tracefree(&p, &(t - c.tangent[k]));
                }
            }
            let density = tangent_norm(&p, &t) / rho;
            if density > 1e-12 {
                sources.push((rho, g.z[j], density * drbar * dzbar));
            }
        }
    }
    let mut probes = Vec::new();
    let mut values = Vec::new();
    let mut maxv = 0.0f64;
    for j in (1..nz - 1).step_by(8) {
        for i in (1..nr - 1).step_by(8) {
            let (rp, zp) = (g.rho[i], g.z[j]);
            let mut f = 0.0;
            for &(rs, zs, q) in &sources {
                let dz = zp - zs;
                let denom2 = (rp + rs) * (rp + rs) + dz * dz;
                if denom2 < (0.5 * g.drho[i.min(nr - 2)]).powi(2) {
                    continue; // self cell excluded
                }
                let m = 4.0 * rp * rs / denom2;
                f += q * 4.0 * rs * ellip_k(m.min(1.0 - 1e-14)) / denom2.sqrt();
            }
            probes.push((rp, zp));
            values.push(f);
            maxv = maxv.max(f);
        }
    }
    FBound {
        probes,
        values,
        max: maxv,
    }
}

/// Shell profile of sup d(Phi, Phi_sharp) with a decay-exponent fit over the
/// outer decade.
pub fn distance_to_model(field: &AugmentedField) -> Result<DecayProfile, SolverError> {
    let sharp = models::asymptotic_model(&field.rod_structure)?;
    let g = &field.grid;
    let nshell = 14;
    let r_min = g.size.max(g.r_out / 100.0);
    let lr0 = r_min.ln();
    let lr1 = g.r_out.ln();
    let mut radii = vec![0.0; nshell];
    let mut sup = vec![0.0f64; nshell];
    for (k, r) in radii.iter_mut().enumerate() {
        *r = (lr0 + (lr1 - lr0) * (k as f64 + 0.5) / nshell as f64).exp();
    }
    let nr = g.rho.len();
    for j in 0..g.z.len() {
        let zrel = g.z[j] - g.z_center;
        for i in 1..nr {
            let rho = g.rho[i];
            let rr = rho.hypot(zrel);
            if rr < r_min || rr > g.r_out {
                continue;
            }
            let k = (((rr.ln() - lr0) / (lr1 - lr0) * nshell as f64) as usize).min(nshell - 1);
            let p = field.phi_at(i, j).expect("interior node");
            let d = dist(&p, &sharp.phi(rho, zrel)?);
            if d > sup[k] {
                sup[k] = d;
            }
        }
    }
    // Least-squares slope of log sup against log r over the outer decade.
    let cut = g.r_out / 10.0;
    let pts: Vec<(f64, f64)> = radii
        .iter()
        .zip(&sup)
        .filter(|(&r, &s)| r >= cut && s > 1e-14)
        .map(|(&r, &s)| (r.ln(), s.ln()))
        .collect();
    let exponent = if pts.len() >= 2 {
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        (n * sxy - sx * sy) / (n * sxx - sx * sx)
    } else {
        0.0
    };
    Ok(DecayProfile {
        radii,
        sup_dist: sup,
        exponent,
    })
}

/// Discrete harmonic-map energy over edges away from the axis (the energy
/// density is not integrable up to the rods). Non-increasing under sweeps on
/// the direct-update region.
pub fn discrete_energy(field: &AugmentedField) -> f64 {
    let g = &field.grid;
    let nr = g.rho.len();
    let nz = g.z.len();
    let mut e = 0.0;
    for j in 0..nz {
        for i in 1..nr - 1 {
            let p = field.phi_at(i, j).unwrap();
            let q = field.phi_at(i + 1, j).unwrap();
            let dzbar = if j == 0 {
                0.5 * g.dz[0]
            } else if j == nz - 1 {
                0.5 * g.dz[nz - 2]
            } else {
                0.5 * (g.z[j + 1] - g.z[j - 1])
            };
            let w = g.rho_half[i] * dzbar / g.drho[i];
            e += 0.5 * w * dist(&p, &q).powi(2);
        }
    }
    for j in 0..nz - 1 {
        for i in 1..nr {
            let p = field.phi_at(i, j).unwrap();
            let q = field.phi_at(i, j + 1).unwrap();
            let drbar = if i == nr - 1 {
                0.5 * g.drho[nr - 2]
            } else {
                0.5 * (g.rho[i + 1] - g.rho[i - 1])
            };
            let w = g.rho[i] * drbar / g.dz[j];
            e += 0.5 * w * dist(&p, &q).powi(2);
        }
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hyp::RodVector;
    use crate::rods;

    fn small_spec() -> GridSpec {
        GridSpec {
            n_rho: 40,
            n_z: 72,
            r_out_factor: 8.0,
            axis_grading: 0.92,
            tp_grading: 0.88,
        }
    }

    #[test]
    fn grid_places_turning_points_on_nodes() {
        let r = rods::tb_minus(0.4).unwrap();
        let g = Grid::build(&r, &small_spec()).unwrap();
        for &tp in r.turning_points() {
            assert!(g.z_nodes().iter().any(|&z| (z - tp).abs() < 1e-12));
        }
        assert!(g.rho_nodes()[0] == 0.0);
        assert!(g.rho_nodes().len() >= 16 && g.z_nodes().len() >= 16);
        assert!(g.rho_nodes().windows(2).all(|w| w[1] > w[0]));
        assert!(g.z_nodes().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn grid_rejects_bad_specs() {
        let r = rods::tn_minus_structure();
        let mut s = small_spec();
        s.n_rho = 8;
        assert!(Grid::build(&r, &s).is_err());
        let mut s = small_spec();
        s.axis_grading = 1.4;
        assert!(Grid::build(&r, &s).is_err());
    }

    #[test]
    fn background_matches_asymptotic_model_far_out() {
        let r = rods::tn_minus_structure();
        let g = Grid::build(&r, &small_spec()).unwrap();
        let field = background_map(&r, &g).unwrap();
        let oracle = crate::models::tn_minus(1.0).unwrap();
        // Far outside the single gluing ball the background is the model.
        let nr = g.rho_nodes().len();
        let j = g.z_nodes().len() / 2;
        let i = nr - 2;
        let p = field.phi_at(i, j).unwrap();
        let q = oracle
            .phi(g.rho_nodes()[i], g.z_nodes()[j] - g.z_center())
            .unwrap();
        assert!(dist(&p, &q) < 1e-12);
    }

    #[test]
    fn background_requires_resolvable_separation() {
        let r = rods::tb_minus(1e-6).unwrap();
        let g = Grid::build(&r, &small_spec()).unwrap();
        match background_map(&r, &g) {
            Err(SolverError::Separation { .. }) => {}
            other => panic!("expected separation error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn exact_model_field_is_nearly_stationary() {
        let map = crate::models::tn_minus(1.0).unwrap();
        let r = map.rod_structure().clone();
        let g = Grid::build(&r, &small_spec()).unwrap();
        let mut field = AugmentedField::from_model(&map, &g).unwrap();
        let before = field.clone();
        let stats = relax(&mut field, 5e-3, 500).unwrap();
        assert!(stats.residual < 5e-3);
        // The exact solution moves only at the discretization level; the
        // truncation error concentrates at the axis corner, so split the
        // check into corner and bulk.
        let mut worst = 0.0f64;
        let mut worst_bulk = 0.0f64;
        for j in 1..g.n_z() - 1 {
            for i in 1..g.n_rho() - 1 {
                let d = dist(
                    &field.phi_at(i, j).unwrap(),
                    &before.phi_at(i, j).unwrap(),
                );
                worst = worst.max(d);
                let r = g.rho_nodes()[i].hypot(g.z_nodes()[j] - g.z_center());
                if r > 0.3 {
                    worst_bulk = worst_bulk.max(d);
                }
            }
        }
        assert!(worst < 0.15, "moved {worst}");
        assert!(worst_bulk < 0.02, "bulk moved {worst_bulk}");
    }

    #[test]
    fn solve_trivial_af_structure_returns_the_model() {
        let r = rods::af_structure(0.3);
        let spec = GridSpec {
            n_rho: 24,
            n_z: 32,
            ..small_spec()
        };
        let field = solve_with(
            &r,
            &spec,
            &SolveOptions {
                tol: 1e-9,
                levels: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let oracle = crate::models::af_model(0.3);
        let g = field.grid();
        let mut worst = 0.0f64;
        let mut at = (0, 0);
        for j in 0..g.n_z() {
            for i in 1..g.n_rho() {
                let q = oracle.phi(g.rho_nodes()[i], g.z_nodes()[j]).unwrap();
                let d = dist(&field.phi_at(i, j).unwrap(), &q);
                if d > worst {
                    worst = d;
                    at = (i, j);
                }
            }
        }
        assert!(
            worst < 2e-2,
            "sup distance {worst} at i={} (rho={}), j={} (z={})",
            at.0,
            g.rho_nodes()[at.0],
            at.1,
            g.z_nodes()[at.1]
        );
    }

    #[test]
    fn solve_taub_nut_matches_oracle() {
        let r = rods::tn_minus_structure();
        let field = solve_with(
            &r,
            &small_spec(),
            &SolveOptions {
                tol: 1e-8,
                levels: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let oracle = crate::models::tn_minus(1.0).unwrap();
        let g = field.grid();
        let mut worst = 0.0f64;
        let mut worst_bulk = 0.0f64;
        let mut at = (0, 0);
        for j in 1..g.n_z() - 1 {
            for i in 1..g.n_rho() - 1 {
                let q = oracle
                    .phi(g.rho_nodes()[i], g.z_nodes()[j] - g.z_center())
                    .unwrap();
                let d = dist(&field.phi_at(i, j).unwrap(), &q);
                if d > worst {
                    worst = d;
                    at = (i, j);
                }
                let r = g.rho_nodes()[i].hypot(g.z_nodes()[j] - g.z_center());
                if r > 0.3 {
                    worst_bulk = worst_bulk.max(d);
                }
            }
        }
        assert!(
            worst < 0.15,
            "sup distance to Taub-NUT oracle {worst} at rho={} z={}",
            g.rho_nodes()[at.0],
            g.z_nodes()[at.1]
        );
        assert!(worst_bulk < 2e-2, "bulk distance {worst_bulk}");
    }

    #[test]
    fn energy_is_monotone_under_sweeps() {
        let map = crate::models::tn_minus(1.0).unwrap();
        let r = map.rod_structure().clone();
        let g = Grid::build(&r, &small_spec()).unwrap();
        let mut field = AugmentedField::from_model(&map, &g).unwrap();
        field.disable_charts();
        // Perturb the interior away from the solution.
        let nr = g.n_rho();
        for j in 2..g.n_z() - 2 {
            for i in nr / 2..nr - 2 {
                let k = j * nr + i;
                field.x[k] *= 1.0 + 0.05 * ((i * 31 + j * 17) % 7) as f64 / 7.0;
            }
        }
        let mut last = discrete_energy(&field);
        for _ in 0..40 {
            relax(&mut field, 0.0, 1).ok();
            let e = discrete_energy(&field);
            assert!(e <= last * (1.0 + 1e-9), "energy rose: {last} -> {e}");
            last = e;
        }
    }

    #[test]
    fn maximum_principle_for_identical_boundaries() {
        let map = crate::models::tn_minus(1.0).unwrap();
        let r = map.rod_structure().clone();
        let g = Grid::build(&r, &small_spec()).unwrap();
        let mut a = AugmentedField::from_model(&map, &g).unwrap();
        let mut b = a.clone();
        let nr = g.n_rho();
        for j in 2..g.n_z() - 2 {
            for i in nr / 2..nr - 2 {
                let k = j * nr + i;
                b.x[k] *= 1.02;
                b.y[k] += 0.01;
            }
        }
        relax(&mut a, 1e-9, 20_000).unwrap();
        relax(&mut b, 1e-9, 20_000).unwrap();
        // Same discrete problem, same boundary: the interior distance cannot
        // exceed the (zero) boundary distance beyond solver tolerance.
        let mut worst = 0.0f64;
        for j in 1..g.n_z() - 1 {
            for i in 1..g.n_rho() - 1 {
                worst = worst.max(dist(&a.phi_at(i, j).unwrap(), &b.phi_at(i, j).unwrap()));
            }
        }
        assert!(worst < 1e-5, "interior distance {worst}");
    }

    #[test]
    fn frame_equivariance_under_rotations() {
        let r = rods::tn_minus_structure();
        let p = GroupElem::rotation(0.37);
        let r2 = rods::transform(&r, &rods::RodOp::Act(p))
            .unwrap()
            .with_atype(r.atype().unwrap());
        let opts = SolveOptions {
            tol: 1e-8,
            levels: 1,
            ..Default::default()
        };
        let spec = GridSpec {
            n_rho: 28,
            n_z: 48,
            ..small_spec()
        };
        let fa = solve_with(&r, &spec, &opts).unwrap();
        let fb = solve_with(&r2, &spec, &opts).unwrap();
        let g = fa.grid();
        let mut worst = 0.0f64;
        for j in 1..g.n_z() - 1 {
            for i in 1..g.n_rho() - 1 {
                let moved = act(&p, &fa.phi_at(i, j).unwrap());
                worst = worst.max(dist(&moved, &fb.phi_at(i, j).unwrap()));
            }
        }
        assert!(worst < 1e-4, "equivariance defect {worst}");
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let map = crate::models::tn_minus(1.0).unwrap();
        let g = Grid::build(map.rod_structure(), &small_spec()).unwrap();
        let field = AugmentedField::from_model(&map, &g).unwrap();
        let mut buf = Vec::new();
        field.write_checkpoint(&mut buf).unwrap();
        let back = AugmentedField::read_checkpoint(&mut buf.as_slice()).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&field.x), bits(&back.x));
        assert_eq!(bits(&field.y), bits(&back.y));
        assert_eq!(bits(&field.nu), bits(&back.nu));
        assert_eq!(field.grid.rho, back.grid.rho);
        assert_eq!(field.grid.z, back.grid.z);
    }

    #[test]
    fn csv_has_header_and_full_precision() {
        let map = crate::models::tn_minus(1.0).unwrap();
        let g = Grid::build(map.rod_structure(), &small_spec()).unwrap();
        let field = AugmentedField::from_model(&map, &g).unwrap();
        let mut buf = Vec::new();
        field.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "rho,z,X,Y,nu,resid");
        let first = lines.next().unwrap();
        let fields: Vec<&str> = first.split(',').collect();
        assert_eq!(fields.len(), 6);
        // 17 significant digits survive a parse round trip.
        let x: f64 = fields[2].parse().unwrap();
        assert_eq!(format!("{:.16e}", x), fields[2]);
    }

    #[test]
    fn exact_model_distance_profile_vanishes() {
        let map = crate::models::tn_minus(1.0).unwrap();
        let g = Grid::build(map.rod_structure(), &small_spec()).unwrap();
        let field = AugmentedField::from_model(&map, &g).unwrap();
        let profile = distance_to_model(&field).unwrap();
        assert!(profile.sup_dist.iter().all(|&d| d < 1e-10));
    }

    #[test]
    fn sample_phi_agrees_with_nodes_and_chart() {
        let map = crate::models::tn_minus(1.0).unwrap();
        let g = Grid::build(map.rod_structure(), &small_spec()).unwrap();
        let field = AugmentedField::from_model(&map, &g).unwrap();
        // Off-grid sample near the axis against the closed form.
        let rho = g.rho_nodes()[1] * 0.3;
        let z = 0.5 * (g.z_nodes()[10] + g.z_nodes()[11]);
        let s = field.sample_phi(rho, z).unwrap();
        let e = map.phi(rho, z).unwrap();
        assert!(dist(&s, &e) < 1e-2);
        // And in the bulk.
        let rho = 1.7;
        let s = field.sample_phi(rho, z).unwrap();
        let e = map.phi(rho, z).unwrap();
        assert!(dist(&s, &e) < 1e-2);
    }

    #[test]
    fn kerr_background_tension_localizes() {
        let map = crate::models::kerr(0.3).unwrap();
        let r = map.rod_structure().clone();
        let spec = GridSpec {
            n_rho: 32,
            n_z: 56,
            ..small_spec()
        };
        let g = Grid::build(&r, &spec).unwrap();
        let field = background_map(&r, &g).unwrap();
        let fb = newtonian_bound(&field);
        assert!(fb.max.is_finite());
        assert!(fb.max > 0.0);
    }

    #[test]
    fn untyped_structure_is_rejected() {
        let r = crate::rods::RodStructure::untyped(
            vec![0.0],
            vec![RodVector::bv(0.5), RodVector::bv(-0.5)],
        )
        .unwrap();
        let g = Grid::build(&r, &small_spec()).unwrap();
        assert!(matches!(
            background_map(&r, &g),
            Err(SolverError::Untyped)
        ));
    }
}
