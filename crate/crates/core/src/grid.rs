//! Cell grids: masks, crack-aware adjacency, connected components and the
//! Euclidean distance transform.

use serde::{Deserialize, Serialize};

use crate::geometry::{Aabb, Point, Segment, SegmentSet};

/// Placement of an `nx * ny` cell grid in the plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeom {
    pub nx: usize,
    pub ny: usize,
    pub h: f64,
    /// Lower-left corner of cell `(0, 0)`.
    pub origin: Point,
}

impl GridGeom {
    pub fn square(n: usize, center: Point, mu: f64) -> Self {
        GridGeom { nx: n, ny: n, h: 2.0 * mu / n as f64, origin: Point::new(center.x - mu, center.y - mu) }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.nx + x
    }

    pub fn xy(&self, i: usize) -> (usize, usize) {
        (i % self.nx, i / self.nx)
    }

    pub fn center(&self, x: usize, y: usize) -> Point {
        Point::new(self.origin.x + (x as f64 + 0.5) * self.h, self.origin.y + (y as f64 + 0.5) * self.h)
    }

    pub fn center_of(&self, i: usize) -> Point {
        let (x, y) = self.xy(i);
        self.center(x, y)
    }

    pub fn cell_area(&self) -> f64 {
        self.h * self.h
    }

    pub fn bounds(&self) -> Aabb {
        Aabb {
            min: self.origin,
            max: Point::new(self.origin.x + self.nx as f64 * self.h, self.origin.y + self.ny as f64 * self.h),
        }
    }

    /// Inclusive cell range whose centers lie in the closed box, clamped to the grid.
    pub fn cells_with_center_in(&self, b: &Aabb) -> Option<(usize, usize, usize, usize)> {
        let fx0 = ((b.min.x - self.origin.x) / self.h - 0.5).ceil();
        let fx1 = ((b.max.x - self.origin.x) / self.h - 0.5).floor();
        let fy0 = ((b.min.y - self.origin.y) / self.h - 0.5).ceil();
        let fy1 = ((b.max.y - self.origin.y) / self.h - 0.5).floor();
        let x0 = fx0.max(0.0);
        let y0 = fy0.max(0.0);
        let x1 = fx1.min(self.nx as f64 - 1.0);
        let y1 = fy1.min(self.ny as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            return None;
        }
        Some((x0 as usize, x1 as usize, y0 as usize, y1 as usize))
    }

    /// Like [`Self::cells_with_center_in`] but for the open box.
    pub fn cells_with_center_in_open(&self, b: &Aabb) -> Option<(usize, usize, usize, usize)> {
        let (x0, x1, y0, y1) = self.cells_with_center_in(b)?;
        let (mut x0, mut x1, mut y0, mut y1) = (x0, x1, y0, y1);
        let tol = 1e-9 * self.h;
        if (self.center(x0, 0).x - b.min.x).abs() < tol {
            x0 += 1;
        }
        if (self.center(x1, 0).x - b.max.x).abs() < tol {
            if x1 == 0 {
                return None;
            }
            x1 -= 1;
        }
        if (self.center(0, y0).y - b.min.y).abs() < tol {
            y0 += 1;
        }
        if (self.center(0, y1).y - b.max.y).abs() < tol {
            if y1 == 0 {
                return None;
            }
            y1 -= 1;
        }
        if x0 > x1 || y0 > y1 {
            return None;
        }
        Some((x0, x1, y0, y1))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub nx: usize,
    pub ny: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(nx: usize, ny: usize) -> Self {
        Mask { nx, ny, data: vec![false; nx * ny] }
    }

    pub fn full(nx: usize, ny: usize) -> Self {
        Mask { nx, ny, data: vec![true; nx * ny] }
    }

    pub fn from_fn(nx: usize, ny: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Mask::new(nx, ny);
        for y in 0..ny {
            for x in 0..nx {
                m.data[y * nx + x] = f(x, y);
            }
        }
        m
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.nx + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.nx + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|b| *b)
    }

    pub fn union_with(&mut self, o: &Mask) {
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a |= *b;
        }
    }

    pub fn intersect_with(&mut self, o: &Mask) {
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a &= *b;
        }
    }

    pub fn minus(&self, o: &Mask) -> Mask {
        Mask { nx: self.nx, ny: self.ny, data: self.data.iter().zip(&o.data).map(|(a, b)| *a && !*b).collect() }
    }

    pub fn complement(&self) -> Mask {
        Mask { nx: self.nx, ny: self.ny, data: self.data.iter().map(|a| !a).collect() }
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.data.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)
    }

    /// Dilation by one cell in the 8-neighbourhood.
    pub fn dilate(&self) -> Mask {
        let mut out = self.clone();
        for y in 0..self.ny {
            for x in 0..self.nx {
                if !self.get(x, y) {
                    continue;
                }
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                        if xx >= 0 && yy >= 0 && (xx as usize) < self.nx && (yy as usize) < self.ny {
                            out.set(xx as usize, yy as usize, true);
                        }
                    }
                }
            }
        }
        out
    }
}

/// Edges between neighbouring cells whose center-to-center stencil crosses a segment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeCuts {
    pub nx: usize,
    pub ny: usize,
    /// Edge between `(x, y)` and `(x + 1, y)`, indexed `y * (nx - 1) + x`.
    pub horiz: Vec<bool>,
    /// Edge between `(x, y)` and `(x, y + 1)`, indexed `y * nx + x`.
    pub vert: Vec<bool>,
}

impl EdgeCuts {
    pub fn none(nx: usize, ny: usize) -> Self {
        EdgeCuts { nx, ny, horiz: vec![false; (nx.max(1) - 1) * ny], vert: vec![false; nx * (ny.max(1) - 1)] }
    }

    pub fn from_segments(g: &GridGeom, segs: &SegmentSet) -> Self {
        let mut cuts = EdgeCuts::none(g.nx, g.ny);
        cuts.add_segments(g, segs);
        cuts
    }

    pub fn add_segments(&mut self, g: &GridGeom, segs: &SegmentSet) {
        for s in segs.iter() {
            let b = s.bounds();
            let x0 = (((b.min.x - g.origin.x) / g.h).floor() as i64 - 1).max(0) as usize;
            let y0 = (((b.min.y - g.origin.y) / g.h).floor() as i64 - 1).max(0) as usize;
            let x1 = (((b.max.x - g.origin.x) / g.h).floor() as i64 + 1).min(g.nx as i64 - 1);
            let y1 = (((b.max.y - g.origin.y) / g.h).floor() as i64 + 1).min(g.ny as i64 - 1);
            if x1 < 0 || y1 < 0 {
                continue;
            }
            let (x1, y1) = (x1 as usize, y1 as usize);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let c = g.center(x, y);
                    if x + 1 < g.nx && !self.horiz[y * (g.nx - 1) + x] {
                        let st = Segment { a: c, b: g.center(x + 1, y) };
                        if st.intersects(s) {
                            self.horiz[y * (g.nx - 1) + x] = true;
                        }
                    }
                    if y + 1 < g.ny && !self.vert[y * g.nx + x] {
                        let st = Segment { a: c, b: g.center(x, y + 1) };
                        if st.intersects(s) {
                            self.vert[y * g.nx + x] = true;
                        }
                    }
                }
            }
        }
    }

    pub fn union_with(&mut self, o: &EdgeCuts) {
        for (a, b) in self.horiz.iter_mut().zip(&o.horiz) {
            *a |= *b;
        }
        for (a, b) in self.vert.iter_mut().zip(&o.vert) {
            *a |= *b;
        }
    }

    /// Cuts every edge between cells of different labels.
    pub fn from_labels(nx: usize, ny: usize, labels: &[i32]) -> Self {
        let mut c = EdgeCuts::none(nx, ny);
        for y in 0..ny {
            for x in 0..nx {
                let l = labels[y * nx + x];
                if x + 1 < nx && labels[y * nx + x + 1] != l {
                    c.horiz[y * (nx - 1) + x] = true;
                }
                if y + 1 < ny && labels[(y + 1) * nx + x] != l {
                    c.vert[y * nx + x] = true;
                }
            }
        }
        c
    }

    pub fn cut_right(&self, x: usize, y: usize) -> bool {
        self.horiz[y * (self.nx - 1) + x]
    }

    pub fn cut_up(&self, x: usize, y: usize) -> bool {
        self.vert[y * self.nx + x]
    }

    /// Whether the 4-neighbour step from `(x, y)` by `(dx, dy)` is cut.
    pub fn blocked(&self, x: usize, y: usize, dx: i64, dy: i64) -> bool {
        match (dx, dy) {
            (1, 0) => self.cut_right(x, y),
            (-1, 0) => self.cut_right(x - 1, y),
            (0, 1) => self.cut_up(x, y),
            (0, -1) => self.cut_up(x, y - 1),
            _ => panic!("not a 4-neighbour step"),
        }
    }

    /// Whether the cell has a cut edge on any side.
    pub fn touches(&self, x: usize, y: usize) -> bool {
        (x + 1 < self.nx && self.cut_right(x, y))
            || (x > 0 && self.cut_right(x - 1, y))
            || (y + 1 < self.ny && self.cut_up(x, y))
            || (y > 0 && self.cut_up(x, y - 1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

const N4: [(i64, i64); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
const N8: [(i64, i64); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];

/// Connected components of `mask`; cells outside get label `-1`.
///
/// With cuts, only 4-connectivity is meaningful and cut edges are not crossed.
pub fn label_components(mask: &Mask, cuts: Option<&EdgeCuts>, conn: Connectivity) -> (Vec<i32>, usize) {
    let (nx, ny) = (mask.nx, mask.ny);
    let mut labels = vec![-1i32; nx * ny];
    let mut count = 0usize;
    let mut stack = Vec::new();
    let nbrs: &[(i64, i64)] = match conn {
        Connectivity::Four => &N4,
        Connectivity::Eight => &N8,
    };
    for start in 0..nx * ny {
        if !mask.data[start] || labels[start] >= 0 {
            continue;
        }
        let l = count as i32;
        count += 1;
        labels[start] = l;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % nx, i / nx);
            for &(dx, dy) in nbrs {
                let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                if xx < 0 || yy < 0 || xx >= nx as i64 || yy >= ny as i64 {
                    continue;
                }
                let j = yy as usize * nx + xx as usize;
                if !mask.data[j] || labels[j] >= 0 {
                    continue;
                }
                if let Some(c) = cuts {
                    if dx != 0 && dy != 0 {
                        continue;
                    }
                    if c.blocked(x, y, dx, dy) {
                        continue;
                    }
                }
                labels[j] = l;
                stack.push(j);
            }
        }
    }
    (labels, count)
}

/// Relabels a label map so that every label is one connected component
/// (4-connectivity, honouring cuts). Returns the new map and count.
pub fn split_labels(labels: &[i32], nx: usize, ny: usize, cuts: Option<&EdgeCuts>) -> (Vec<i32>, usize) {
    let mut out = vec![-1i32; nx * ny];
    let mut count = 0usize;
    let mut stack = Vec::new();
    for start in 0..nx * ny {
        if labels[start] < 0 || out[start] >= 0 {
            continue;
        }
        let src = labels[start];
        let l = count as i32;
        count += 1;
        out[start] = l;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % nx, i / nx);
            for (dx, dy) in N4 {
                let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                if xx < 0 || yy < 0 || xx >= nx as i64 || yy >= ny as i64 {
                    continue;
                }
                let j = yy as usize * nx + xx as usize;
                if labels[j] != src || out[j] >= 0 {
                    continue;
                }
                if let Some(c) = cuts {
                    if c.blocked(x, y, dx, dy) {
                        continue;
                    }
                }
                out[j] = l;
                stack.push(j);
            }
        }
    }
    (out, count)
}

const INF: f64 = 1e30;

/// One-dimensional squared distance transform (lower envelope of parabolas).
/// Returns distances and the index of the winning parabola.
fn edt_1d(f: &[f64], d: &mut [f64], arg: &mut [usize], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let mut first = None;
    for (q, fq) in f.iter().enumerate() {
        if *fq < INF {
            first = Some(q);
            break;
        }
    }
    let Some(q0) = first else {
        d.iter_mut().for_each(|x| *x = INF);
        return;
    };
    v[0] = q0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in q0 + 1..n {
        if f[q] >= INF {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        d[q] = dq * dq + f[p];
        arg[q] = p;
    }
}

/// Exact squared Euclidean distance (in cell units) from every cell center to
/// the nearest site cell center, plus the index of that site.
pub fn edt_with_sites(sites: &Mask) -> (Vec<f64>, Vec<usize>) {
    let (nx, ny) = (sites.nx, sites.ny);
    let m = nx.max(ny);
    let mut d = vec![0.0; m];
    let mut arg = vec![0usize; m];
    let mut v = vec![0usize; m];
    let mut z = vec![0.0; m + 1];
    // columns
    let mut col = vec![INF; nx * ny];
    let mut col_y = vec![0usize; nx * ny];
    let mut f = vec![0.0; ny];
    for x in 0..nx {
        for y in 0..ny {
            f[y] = if sites.get(x, y) { 0.0 } else { INF };
        }
        edt_1d(&f, &mut d[..ny], &mut arg[..ny], &mut v, &mut z);
        for y in 0..ny {
            col[y * nx + x] = d[y];
            col_y[y * nx + x] = arg[y];
        }
    }
    let mut out = vec![INF; nx * ny];
    let mut site = vec![usize::MAX; nx * ny];
    let mut f = vec![0.0; nx];
    for y in 0..ny {
        for x in 0..nx {
            f[x] = col[y * nx + x];
        }
        edt_1d(&f, &mut d[..nx], &mut arg[..nx], &mut v, &mut z);
        for x in 0..nx {
            out[y * nx + x] = d[x];
            if d[x] < INF {
                let sx = arg[x];
                site[y * nx + x] = col_y[y * nx + sx] * nx + sx;
            }
        }
    }
    (out, site)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edt_matches_brute_force() {
        let sites = Mask::from_fn(13, 9, |x, y| (x * 7 + y * 3) % 11 == 0);
        let (d, s) = edt_with_sites(&sites);
        for y in 0..9 {
            for x in 0..13 {
                let mut best = f64::INFINITY;
                for sy in 0..9 {
                    for sx in 0..13 {
                        if sites.get(sx, sy) {
                            let dd = ((x as f64 - sx as f64).powi(2)) + ((y as f64 - sy as f64).powi(2));
                            best = best.min(dd);
                        }
                    }
                }
                assert_eq!(d[y * 13 + x], best);
                let (sx, sy) = (s[y * 13 + x] % 13, s[y * 13 + x] / 13);
                assert!(sites.get(sx, sy));
                assert_eq!((x as f64 - sx as f64).powi(2) + (y as f64 - sy as f64).powi(2), best);
            }
        }
    }

    #[test]
    fn cuts_split_components() {
        let g = GridGeom::square(8, Point::ORIGIN, 1.0);
        let segs = SegmentSet::from_segments(vec![Segment { a: Point::new(0.0, -1.0), b: Point::new(0.0, 1.0) }]);
        let cuts = EdgeCuts::from_segments(&g, &segs);
        let (_, n) = label_components(&Mask::full(8, 8), Some(&cuts), Connectivity::Four);
        assert_eq!(n, 2);
        let half = SegmentSet::from_segments(vec![Segment { a: Point::new(0.0, -1.0), b: Point::new(0.0, 0.3) }]);
        let cuts = EdgeCuts::from_segments(&g, &half);
        let (_, n) = label_components(&Mask::full(8, 8), Some(&cuts), Connectivity::Four);
        assert_eq!(n, 1);
    }

    #[test]
    fn diagonal_touching_cells() {
        let m = Mask::from_fn(4, 4, |x, y| x == y);
        assert_eq!(label_components(&m, None, Connectivity::Four).1, 4);
        assert_eq!(label_components(&m, None, Connectivity::Eight).1, 1);
    }
}
