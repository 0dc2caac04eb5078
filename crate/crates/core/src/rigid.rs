//! Infinitesimal rigid motions `a(x) = A x + b` with `A` skew, least-squares
//! and trimmed fits, and the norm bounds for rigid motions on subsets.

use serde::{Deserialize, Serialize};

use crate::field::DisplacementField;
use crate::geometry::{Aabb, Point};
use crate::grid::{GridGeom, Mask};
use crate::KornError;

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidMotion {
    /// Rotation rate; `A = [[0, -omega], [omega, 0]]`.
    pub omega: f64,
    pub b: [f64; 2],
}

impl RigidMotion {
    pub fn new(omega: f64, b: [f64; 2]) -> Self {
        RigidMotion { omega, b }
    }

    pub fn translation(b: [f64; 2]) -> Self {
        RigidMotion { omega: 0.0, b }
    }

    pub fn eval(&self, p: Point) -> [f64; 2] {
        [-self.omega * p.y + self.b[0], self.omega * p.x + self.b[1]]
    }

    pub fn matrix(&self) -> [[f64; 2]; 2] {
        [[0.0, -self.omega], [self.omega, 0.0]]
    }

    /// `|A|_F = sqrt(2) |omega|`.
    pub fn frobenius(&self) -> f64 {
        std::f64::consts::SQRT_2 * self.omega.abs()
    }

    pub fn add(&self, o: &RigidMotion) -> RigidMotion {
        RigidMotion { omega: self.omega + o.omega, b: [self.b[0] + o.b[0], self.b[1] + o.b[1]] }
    }

    pub fn sub(&self, o: &RigidMotion) -> RigidMotion {
        RigidMotion { omega: self.omega - o.omega, b: [self.b[0] - o.b[0], self.b[1] - o.b[1]] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub motion: RigidMotion,
    /// Condition number of the (uncentered) 3x3 normal matrix.
    pub condition: f64,
    /// `L^2` residual over the region.
    pub residual_l2: f64,
}

/// Least-squares rigid fit over the cells of `region`.
pub fn fit_rigid(u: &DisplacementField, region: &Mask) -> Result<RigidMotion, KornError> {
    Ok(fit_rigid_report(u, region)?.motion)
}

pub fn fit_rigid_report(u: &DisplacementField, region: &Mask) -> Result<FitReport, KornError> {
    let g = u.geom();
    let cells: Vec<usize> = region.indices().collect();
    let motion = fit_cells(&g, &u.values, &cells)?;
    let condition = normal_condition(&g, &cells);
    let residual_l2 = residual_lp(&g, &u.values, &cells, &motion, 2.0);
    Ok(FitReport { motion, condition, residual_l2 })
}

/// Least-squares fit over an explicit list of cells.
pub fn fit_cells(g: &GridGeom, values: &[[f64; 2]], cells: &[usize]) -> Result<RigidMotion, KornError> {
    if cells.len() < 3 {
        return Err(KornError::Degenerate(format!("rigid fit needs at least 3 cells, got {}", cells.len())));
    }
    let nf = cells.len() as f64;
    let (mut cx, mut cy, mut ux, mut uy) = (0.0, 0.0, 0.0, 0.0);
    for &i in cells {
        let p = g.center_of(i);
        cx += p.x;
        cy += p.y;
        ux += values[i][0];
        uy += values[i][1];
    }
    let (cx, cy, ux, uy) = (cx / nf, cy / nf, ux / nf, uy / nf);
    let (mut num, mut den) = (0.0, 0.0);
    for &i in cells {
        let p = g.center_of(i);
        let (yx, yy) = (p.x - cx, p.y - cy);
        num += yx * (values[i][1] - uy) - yy * (values[i][0] - ux);
        den += yx * yx + yy * yy;
    }
    if den <= 1e-10 * nf * g.h * g.h {
        return Err(KornError::Degenerate("rank-deficient rigid fit: all cells coincide".into()));
    }
    let omega = num / den;
    // a(x) = omega J (x - c) + mean(u)
    Ok(RigidMotion { omega, b: [ux + omega * cy, uy - omega * cx] })
}

fn normal_condition(g: &GridGeom, cells: &[usize]) -> f64 {
    let mut m = [[0.0f64; 3]; 3];
    for &i in cells {
        let p = g.center_of(i);
        // basis for (omega, b1, b2): (-y, x), (1, 0), (0, 1)
        let phi = [[-p.y, p.x], [1.0, 0.0], [0.0, 1.0]];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] += phi[r][0] * phi[c][0] + phi[r][1] * phi[c][1];
            }
        }
    }
    let ev = sym3_eigenvalues(m);
    let (lo, hi) = (ev.iter().cloned().fold(f64::INFINITY, f64::min), ev.iter().cloned().fold(0.0, f64::max));
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Eigenvalues of a symmetric 3x3 matrix by cyclic Jacobi rotations.
fn sym3_eigenvalues(mut a: [[f64; 3]; 3]) -> [f64; 3] {
    for _ in 0..50 {
        let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        if off < 1e-30 * (a[0][0].powi(2) + a[1][1].powi(2) + a[2][2].powi(2)) {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q].abs() < 1e-300 {
                continue;
            }
            let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut r = [[0.0; 3]; 3];
            for (k, row) in r.iter_mut().enumerate() {
                row[k] = 1.0;
            }
            r[p][p] = c;
            r[q][q] = c;
            r[p][q] = s;
            r[q][p] = -s;
            // a <- r^T a r
            let mut tmp = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    tmp[i][j] = (0..3).map(|k| a[i][k] * r[k][j]).sum();
                }
            }
            for i in 0..3 {
                for j in 0..3 {
                    a[i][j] = (0..3).map(|k| r[k][i] * tmp[k][j]).sum();
                }
            }
        }
    }
    [a[0][0], a[1][1], a[2][2]]
}

/// `L^p` norm of `u - a` over the listed cells.
pub fn residual_lp(g: &GridGeom, values: &[[f64; 2]], cells: &[usize], a: &RigidMotion, p: f64) -> f64 {
    let mut acc: f64 = 0.0;
    for &i in cells {
        let m = a.eval(g.center_of(i));
        let r = (values[i][0] - m[0]).hypot(values[i][1] - m[1]);
        if p.is_infinite() {
            acc = acc.max(r);
        } else {
            acc += r.powf(p);
        }
    }
    if p.is_infinite() {
        acc
    } else {
        (acc * g.h * g.h).powf(1.0 / p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrimmedFit {
    pub motion: RigidMotion,
    pub inliers: Mask,
    pub residual_lp: f64,
    pub trimmed_area: f64,
}

/// Rigid fit that may discard up to `area_budget` of the worst-fitting cells.
///
/// Each sweep drops the worst cells (at least one cell, 1% of the region),
/// never more than the budget, and refits. The removal sequence does not
/// depend on the budget, so inlier sets are nested in the budget.
pub fn fit_rigid_trimmed(
    u: &DisplacementField,
    region: &Mask,
    area_budget: f64,
    p: f64,
) -> Result<TrimmedFit, KornError> {
    let g = u.geom();
    let cells: Vec<usize> = region.indices().collect();
    let area = cells.len() as f64 * g.cell_area();
    if !(area_budget >= 0.0) || area_budget >= area {
        return Err(KornError::InvalidArgument(format!("trim budget {area_budget} must lie in [0, {area})")));
    }
    let (motion, inl) = trim_cells(&g, &u.values, &cells, area_budget)?;
    let mut inliers = Mask::new(g.nx, g.ny);
    for &i in &inl {
        inliers.data[i] = true;
    }
    let residual_lp = residual_lp(&g, &u.values, &inl, &motion, p);
    let trimmed_area = (cells.len() - inl.len()) as f64 * g.cell_area();
    Ok(TrimmedFit { motion, inliers, residual_lp, trimmed_area })
}

/// Core of [`fit_rigid_trimmed`] on cell lists. Returns the motion and inlier cells.
pub fn trim_cells(
    g: &GridGeom,
    values: &[[f64; 2]],
    cells: &[usize],
    area_budget: f64,
) -> Result<(RigidMotion, Vec<usize>), KornError> {
    let mut inl: Vec<usize> = cells.to_vec();
    let mut motion = fit_cells(g, values, &inl)?;
    let max_cells = ((area_budget / g.cell_area()) + 1e-9).floor() as usize;
    let max_cells = max_cells.min(cells.len().saturating_sub(3));
    if max_cells == 0 {
        return Ok((motion, inl));
    }
    let chunk = (cells.len() / 100).max(1);
    let scale = 1.0 + cells.iter().map(|&i| values[i][0].hypot(values[i][1])).fold(0.0, f64::max);
    let sq_res = |m: &RigidMotion, i: usize| {
        let a = m.eval(g.center_of(i));
        (values[i][0] - a[0]).powi(2) + (values[i][1] - a[1]).powi(2)
    };
    let mut removed = 0usize;
    let mut res: f64 = inl.iter().map(|&i| sq_res(&motion, i)).sum();
    while removed < max_cells {
        if res <= 1e-24 * scale * scale * inl.len() as f64 {
            break;
        }
        let take = chunk.min(max_cells - removed);
        let mut scored: Vec<(f64, usize)> = inl.iter().map(|&i| (sq_res(&motion, i), i)).collect();
        // worst first; ties by cell index for determinism
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut next: Vec<usize> = scored[take..].iter().map(|s| s.1).collect();
        next.sort_unstable();
        let m2 = fit_cells(g, values, &next)?;
        let r2: f64 = next.iter().map(|&i| sq_res(&m2, i)).sum();
        inl = next;
        motion = m2;
        removed += take;
        let improved = res - r2;
        res = r2;
        if improved < 0.01 * (res + improved) {
            break;
        }
    }
    Ok((motion, inl))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs_without_c: f64,
    pub ratio: f64,
}

/// `|A|` against `|E|^(-1/2-1/q) ||a||_{L^q(E)}`.
pub fn bound_check_a(a: &RigidMotion, g: &GridGeom, region: &Mask, q: f64) -> BoundCheck {
    let cells: Vec<usize> = region.indices().collect();
    let area = cells.len() as f64 * g.cell_area();
    let norm = motion_norm(a, g, &cells, q);
    let expo = if q.is_infinite() { -0.5 } else { -0.5 - 1.0 / q };
    let rhs = area.powf(expo) * norm;
    let lhs = a.frobenius();
    let ratio = if lhs == 0.0 { 0.0 } else { lhs / rhs };
    BoundCheck { lhs, rhs_without_c: rhs, ratio }
}

/// Empirical constant of `||a||_{L^q(Q)} <= c (R^2/|E|)^(1/2+1/q) ||a||_{L^q(E)}`.
pub fn extend_bound_check(a: &RigidMotion, g: &GridGeom, small: &Mask, big: &Aabb, q: f64) -> f64 {
    let e_cells: Vec<usize> = small.indices().collect();
    let q_cells: Vec<usize> = match g.cells_with_center_in(big) {
        Some((x0, x1, y0, y1)) => (y0..=y1).flat_map(|y| (x0..=x1).map(move |x| y * g.nx + x)).collect(),
        None => Vec::new(),
    };
    let r = 0.5 * big.width();
    let e_area = e_cells.len() as f64 * g.cell_area();
    let expo = if q.is_infinite() { 0.5 } else { 0.5 + 1.0 / q };
    let lhs = motion_norm(a, g, &q_cells, q);
    let rhs = (r * r / e_area).powf(expo) * motion_norm(a, g, &e_cells, q);
    if lhs == 0.0 {
        0.0
    } else {
        lhs / rhs
    }
}

fn motion_norm(a: &RigidMotion, g: &GridGeom, cells: &[usize], q: f64) -> f64 {
    let mut acc: f64 = 0.0;
    for &i in cells {
        let v = a.eval(g.center_of(i));
        let r = v[0].hypot(v[1]);
        if q.is_infinite() {
            acc = acc.max(r);
        } else {
            acc += r.powf(q);
        }
    }
    if q.is_infinite() {
        acc
    } else {
        (acc * g.cell_area()).powf(1.0 / q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::sample_analytic;
    use crate::geometry::SegmentSet;

    fn full(n: usize) -> Mask {
        Mask::full(n, n)
    }

    #[test]
    fn exact_fits() {
        let u = sample_analytic(&|p| [-p.y, p.x], SegmentSet::new(), 32, 1.0).unwrap();
        let r = fit_rigid_report(&u, &full(32)).unwrap();
        assert!((r.motion.omega - 1.0).abs() < 1e-13 && r.motion.b[0].abs() < 1e-13 && r.motion.b[1].abs() < 1e-13);
        assert!(r.residual_l2 < 1e-12);
        let u = sample_analytic(&|_| [3.0, -2.0], SegmentSet::new(), 32, 1.0).unwrap();
        let m = fit_rigid(&u, &full(32)).unwrap();
        assert!(m.omega.abs() < 1e-13 && (m.b[0] - 3.0).abs() < 1e-13 && (m.b[1] + 2.0).abs() < 1e-13);
        let u = sample_analytic(&|p| [p.x, 0.0], SegmentSet::new(), 32, 1.0).unwrap();
        let m = fit_rigid(&u, &full(32)).unwrap();
        assert!(m.omega.abs() < 1e-13 && m.b[0].abs() < 1e-13 && m.b[1].abs() < 1e-13);
    }

    #[test]
    fn degenerate_regions() {
        let u = sample_analytic(&|_| [0.0, 0.0], SegmentSet::new(), 8, 1.0).unwrap();
        let mut m = Mask::new(8, 8);
        m.set(2, 2, true);
        m.set(3, 2, true);
        assert!(fit_rigid(&u, &m).is_err());
    }

    #[test]
    fn trimmed_recovers_majority() {
        let u = sample_analytic(
            &|p| if p.x > 0.5 && p.y > 0.5 { [5.0 * p.y, -5.0 * p.x + 3.0] } else { [-0.2 * p.y + 1.0, 0.2 * p.x] },
            SegmentSet::new(),
            32,
            1.0,
        )
        .unwrap();
        let corner_area = 0.25;
        let t = fit_rigid_trimmed(&u, &full(32), corner_area, 2.0).unwrap();
        assert!((t.motion.omega - 0.2).abs() < 1e-10);
        assert!((t.motion.b[0] - 1.0).abs() < 1e-10 && t.motion.b[1].abs() < 1e-10);
        assert!(t.residual_lp < 1e-10);
        assert!(t.trimmed_area <= corner_area + 1e-12);
        let rigid = sample_analytic(&|p| [-p.y, p.x], SegmentSet::new(), 16, 1.0).unwrap();
        let t = fit_rigid_trimmed(&rigid, &full(16), 1.0, 2.0).unwrap();
        assert_eq!(t.trimmed_area, 0.0);
        let lin = sample_analytic(&|p| [p.x, 0.0], SegmentSet::new(), 16, 1.0).unwrap();
        let t = fit_rigid_trimmed(&lin, &full(16), 0.0, 2.0).unwrap();
        assert_eq!(t.motion, fit_rigid(&lin, &full(16)).unwrap());
        assert!(fit_rigid_trimmed(&lin, &full(16), 4.0, 2.0).is_err());
    }

    #[test]
    fn bound_checks() {
        let g = GridGeom::square(512, Point::ORIGIN, 1.0);
        let m = Mask::full(512, 512);
        let c = bound_check_a(&RigidMotion::new(1.0, [0.0, 0.0]), &g, &m, 2.0);
        assert!((c.lhs - 2f64.sqrt()).abs() < 1e-14);
        assert!((c.rhs_without_c - 0.25 * (8.0f64 / 3.0).sqrt()).abs() < 1e-5);
        assert!((c.ratio - 3.4641).abs() < 1e-3);
        assert_eq!(bound_check_a(&RigidMotion::new(0.0, [1.0, 0.0]), &g, &m, 2.0).ratio, 0.0);
        // dilation invariance: same region shape on a grid of half the size
        let g2 = GridGeom::square(512, Point::ORIGIN, 0.5);
        let c2 = bound_check_a(&RigidMotion::new(1.0, [0.0, 0.0]), &g2, &m, 2.0);
        assert!((c.ratio - c2.ratio).abs() < 1e-9);
    }
}
