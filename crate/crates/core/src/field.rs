//! Rasterized displacement fields with segment jump sets, jump-aware
//! differences and discrete Lebesgue norms.

use serde::{Deserialize, Serialize};

use crate::geometry::{Aabb, Point, SegmentSet};
use crate::grid::{EdgeCuts, GridGeom, Mask};
use crate::KornError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementField {
    pub n: usize,
    pub mu: f64,
    pub center: Point,
    pub h: f64,
    /// Row-major `n * n` displacement vectors.
    pub values: Vec<[f64; 2]>,
    pub jumps: SegmentSet,
}

impl DisplacementField {
    pub fn new(n: usize, mu: f64, values: Vec<[f64; 2]>, jumps: SegmentSet) -> Result<Self, KornError> {
        Self::with_center(n, mu, Point::ORIGIN, values, jumps)
    }

    pub fn with_center(
        n: usize,
        mu: f64,
        center: Point,
        values: Vec<[f64; 2]>,
        jumps: SegmentSet,
    ) -> Result<Self, KornError> {
        if n == 0 || values.len() != n * n {
            return Err(KornError::InvalidArgument(format!("expected {} values, got {}", n * n, values.len())));
        }
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(KornError::InvalidArgument(format!("domain halfside {mu} must be positive")));
        }
        if let Some(i) = values.iter().position(|v| !v[0].is_finite() || !v[1].is_finite()) {
            return Err(KornError::InvalidInput(format!("non-finite displacement at cell {i}")));
        }
        let dom = Aabb::centered(center, mu);
        let tol = 1e-9 * mu;
        for s in jumps.iter() {
            for p in [s.a, s.b] {
                if p.x < dom.min.x - tol || p.x > dom.max.x + tol || p.y < dom.min.y - tol || p.y > dom.max.y + tol {
                    return Err(KornError::InvalidInput(format!("jump endpoint ({}, {}) outside the domain", p.x, p.y)));
                }
            }
        }
        Ok(DisplacementField { n, mu, center, h: 2.0 * mu / n as f64, values, jumps })
    }

    pub fn geom(&self) -> GridGeom {
        GridGeom::square(self.n, self.center, self.mu)
    }

    pub fn domain(&self) -> Aabb {
        Aabb::centered(self.center, self.mu)
    }

    pub fn cuts(&self) -> EdgeCuts {
        EdgeCuts::from_segments(&self.geom(), &self.jumps)
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 2] {
        self.values[y * self.n + x]
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|v| v[0].hypot(v[1])).fold(0.0, f64::max)
    }

    /// The `m * m` block starting at cell `(x0, y0)` as a field on its own square.
    pub fn sub_square(&self, x0: usize, y0: usize, m: usize) -> Result<DisplacementField, KornError> {
        if x0 + m > self.n || y0 + m > self.n || m == 0 {
            return Err(KornError::InvalidArgument("sub-square outside the grid".into()));
        }
        let g = self.geom();
        let lo = Point::new(g.origin.x + x0 as f64 * self.h, g.origin.y + y0 as f64 * self.h);
        let mu = 0.5 * m as f64 * self.h;
        let center = Point::new(lo.x + mu, lo.y + mu);
        let mut values = Vec::with_capacity(m * m);
        for y in 0..m {
            for x in 0..m {
                values.push(self.get(x0 + x, y0 + y));
            }
        }
        let jumps = self.jumps.clipped(&Aabb::centered(center, mu));
        DisplacementField::with_center(m, mu, center, values, jumps)
    }
}

/// Samples `f` at `origin + (k + offset) h`; offset `(0.5, 0.5)` gives cell centers.
pub fn sample_analytic(
    f: &dyn Fn(Point) -> [f64; 2],
    jumps: SegmentSet,
    n: usize,
    mu: f64,
) -> Result<DisplacementField, KornError> {
    sample_analytic_offset(f, jumps, n, mu, [0.5, 0.5])
}

pub fn sample_analytic_offset(
    f: &dyn Fn(Point) -> [f64; 2],
    jumps: SegmentSet,
    n: usize,
    mu: f64,
    offset: [f64; 2],
) -> Result<DisplacementField, KornError> {
    if n < 8 {
        return Err(KornError::InvalidArgument(format!("resolution n = {n} below 8")));
    }
    if !(0.0..1.0).contains(&offset[0]) || !(0.0..1.0).contains(&offset[1]) {
        return Err(KornError::InvalidArgument("sampling offset must lie in [0,1)^2".into()));
    }
    let h = 2.0 * mu / n as f64;
    let mut values = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let p = Point::new(-mu + (x as f64 + offset[0]) * h, -mu + (y as f64 + offset[1]) * h);
            values.push(f(p));
        }
    }
    DisplacementField::new(n, mu, values, jumps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrainField {
    pub n: usize,
    pub h: f64,
    /// Full discrete gradient `grad[c][i][j] = d u_i / d x_j`.
    pub grad: Vec<[[f64; 2]; 2]>,
    /// Symmetric part `[e11, e12, e22]`.
    pub strain: Vec<[f64; 3]>,
    pub valid: Mask,
}

impl StrainField {
    pub fn strain_frobenius(&self) -> Vec<f64> {
        self.strain.iter().map(|e| (e[0] * e[0] + 2.0 * e[1] * e[1] + e[2] * e[2]).sqrt()).collect()
    }

    pub fn grad_frobenius(&self) -> Vec<f64> {
        self.grad.iter().map(|g| (g[0][0].powi(2) + g[0][1].powi(2) + g[1][0].powi(2) + g[1][1].powi(2)).sqrt()).collect()
    }

    pub fn masked_area(&self) -> f64 {
        (self.valid.data.len() - self.valid.count()) as f64 * self.h * self.h
    }

    pub fn max_grad(&self) -> f64 {
        self.grad_frobenius().iter().zip(&self.valid.data).filter(|(_, v)| **v).map(|(g, _)| *g).fold(0.0, f64::max)
    }
}

/// Jump-aware discrete gradient and strain of `u`.
pub fn strain(u: &DisplacementField) -> StrainField {
    strain_with_cuts(u, &u.cuts())
}

/// Central differences, replaced by one-sided ones where a stencil edge is cut.
pub fn strain_with_cuts(u: &DisplacementField, cuts: &EdgeCuts) -> StrainField {
    let n = u.n;
    let h = u.h;
    let mut grad = vec![[[0.0; 2]; 2]; n * n];
    let mut strain = vec![[0.0; 3]; n * n];
    let mut valid = Mask::new(n, n);
    for y in 0..n {
        for x in 0..n {
            let c = u.get(x, y);
            let right = x + 1 < n && !cuts.cut_right(x, y);
            let left = x > 0 && !cuts.cut_right(x - 1, y);
            let up = y + 1 < n && !cuts.cut_up(x, y);
            let down = y > 0 && !cuts.cut_up(x, y - 1);
            let dx = match (left, right) {
                (true, true) => Some(diff(u.get(x + 1, y), u.get(x - 1, y), 2.0 * h)),
                (false, true) => Some(diff(u.get(x + 1, y), c, h)),
                (true, false) => Some(diff(c, u.get(x - 1, y), h)),
                (false, false) => None,
            };
            let dy = match (down, up) {
                (true, true) => Some(diff(u.get(x, y + 1), u.get(x, y - 1), 2.0 * h)),
                (false, true) => Some(diff(u.get(x, y + 1), c, h)),
                (true, false) => Some(diff(c, u.get(x, y - 1), h)),
                (false, false) => None,
            };
            if let (Some(dx), Some(dy)) = (dx, dy) {
                let i = y * n + x;
                let g = [[dx[0], dy[0]], [dx[1], dy[1]]];
                grad[i] = g;
                strain[i] = [g[0][0], 0.5 * (g[0][1] + g[1][0]), g[1][1]];
                valid.data[i] = true;
            }
        }
    }
    StrainField { n, h, grad, strain, valid }
}

fn diff(a: [f64; 2], b: [f64; 2], d: f64) -> [f64; 2] {
    [(a[0] - b[0]) / d, (a[1] - b[1]) / d]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormResult {
    pub value: f64,
    /// Set when the region contained no cells.
    pub empty: bool,
}

/// `(sum |v|^p h^2)^(1/p)` over the masked cells, or the max for `p = inf`.
pub fn lp_norm(magnitudes: &[f64], p: f64, region: Option<&Mask>, h: f64) -> NormResult {
    let sel = |i: usize| region.map_or(true, |m| m.data[i]);
    let mut any = false;
    if p.is_infinite() {
        let mut m: f64 = 0.0;
        for (i, v) in magnitudes.iter().enumerate() {
            if sel(i) {
                any = true;
                m = m.max(v.abs());
            }
        }
        return NormResult { value: m, empty: !any };
    }
    let mut s = 0.0;
    for (i, v) in magnitudes.iter().enumerate() {
        if sel(i) {
            any = true;
            s += v.abs().powf(p);
        }
    }
    NormResult { value: (s * h * h).powf(1.0 / p), empty: !any }
}

pub fn vector_magnitudes(v: &[[f64; 2]]) -> Vec<f64> {
    v.iter().map(|a| a[0].hypot(a[1])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Segment;

    #[test]
    fn rigid_and_linear_strains() {
        let u = sample_analytic(&|p| [-p.y + 0.3, p.x - 2.0], SegmentSet::new(), 32, 1.0).unwrap();
        let e = strain(&u);
        assert!(e.strain.iter().all(|s| s.iter().all(|v| v.abs() < 1e-12)));
        let u = sample_analytic(&|p| [p.x, 0.0], SegmentSet::new(), 32, 1.0).unwrap();
        let e = strain(&u);
        assert!(e.strain.iter().all(|s| (s[0] - 1.0).abs() < 1e-12 && s[1].abs() < 1e-12 && s[2].abs() < 1e-12));
        let u = sample_analytic(&|p| [p.y, 0.0], SegmentSet::new(), 32, 1.0).unwrap();
        let e = strain(&u);
        assert!(e.strain.iter().all(|s| s[0].abs() < 1e-12 && (s[1] - 0.5).abs() < 1e-12 && s[2].abs() < 1e-12));
    }

    #[test]
    fn no_difference_across_crack() {
        let crack = SegmentSet::from_segments(vec![Segment::new(Point::new(0.0, -1.0), Point::new(0.0, 1.0)).unwrap()]);
        let u = sample_analytic(&|p| if p.x < 0.0 { [1.0, 0.0] } else { [-3.0, 5.0] }, crack, 16, 1.0).unwrap();
        let e = strain(&u);
        assert_eq!(e.valid.count(), 256);
        assert!(e.grad.iter().all(|g| g.iter().flatten().all(|v| *v == 0.0)));
    }

    #[test]
    fn first_order_convergence() {
        let mut errs = Vec::new();
        for n in [32usize, 64, 128] {
            let u = sample_analytic(&|p| [p.x * p.x, 0.0], SegmentSet::new(), n, 1.0).unwrap();
            let e = strain(&u);
            let g = u.geom();
            let err = (0..n * n).map(|i| (e.strain[i][0] - 2.0 * g.center_of(i).x).abs()).fold(0.0, f64::max);
            errs.push(err * n as f64 / 2.0);
        }
        // err / h stays bounded
        assert!(errs.iter().all(|r| *r < 1.5));
    }

    #[test]
    fn norms() {
        let ones = vec![1.0; 16 * 16];
        let r = lp_norm(&ones, 2.0, None, 1.0 / 16.0);
        assert!((r.value - 1.0).abs() < 1e-12);
        assert_eq!(lp_norm(&vec![-2.5; 4], f64::INFINITY, None, 1.0).value, 2.5);
        let u = sample_analytic(&|p| [p.x, 0.0], SegmentSet::new(), 256, 1.0).unwrap();
        let v = lp_norm(&vector_magnitudes(&u.values), 2.0, None, u.h).value;
        assert!((v - (4.0f64 / 3.0).sqrt()).abs() < 1e-3);
        let empty = Mask::new(4, 4);
        assert!(lp_norm(&[1.0; 16], 2.0, Some(&empty), 1.0).empty);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(sample_analytic(&|_| [f64::NAN, 0.0], SegmentSet::new(), 8, 1.0).is_err());
        assert!(sample_analytic(&|_| [0.0, 0.0], SegmentSet::new(), 4, 1.0).is_err());
    }
}
