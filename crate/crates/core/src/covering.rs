//! Bad squares around the (auxiliary) jump set, their enlarged unions and
//! components, and the jump-density regularization by square removal.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::field::DisplacementField;
use crate::geometry::{
    measure_in_union, segment_length_in_open, Aabb, DyadicGrid, Point, Segment, SegmentSet, Square, Theta,
};
use crate::grid::{label_components, Connectivity, Mask};

/// Generation whose square boundaries form `J_0` in the analysis.
pub const PAPER_J0_GENERATION: u32 = 7;
/// First generation at which the analysis collects bad squares.
pub const PAPER_MIN_GENERATION: u32 = 8;

/// Default isolated-component exponent `r = (2 - p)/24`.
pub fn default_r(p: f64) -> f64 {
    (2.0 - p) / 24.0
}

/// Which auxiliary set is added to the jump set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum J0Mode {
    /// Boundaries of all generation-`g` squares inside the domain.
    Generation(u32),
    /// Only the boundary of the domain square.
    DomainBoundary,
    /// No auxiliary set (test mode).
    Suppressed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxJump {
    /// `J* = J u J_0`.
    pub all: SegmentSet,
    pub j0: SegmentSet,
}

/// Grid lines of the generation-`g` squares, one segment per full line.
pub fn j0_segments(grid: &DyadicGrid, mode: J0Mode) -> SegmentSet {
    let dom = grid.domain();
    let lines = match mode {
        J0Mode::Suppressed => return SegmentSet::new(),
        J0Mode::DomainBoundary => 1,
        J0Mode::Generation(g) => grid.count(g).max(1),
    };
    let mut out = SegmentSet::new();
    let step = dom.width() / lines as f64;
    for k in 0..=lines {
        let x = dom.min.x + k as f64 * step;
        let y = dom.min.y + k as f64 * step;
        out.push(Segment { a: Point::new(x, dom.min.y), b: Point::new(x, dom.max.y) });
        out.push(Segment { a: Point::new(dom.min.x, y), b: Point::new(dom.max.x, y) });
    }
    out
}

pub fn auxiliary_jump(j: &SegmentSet, grid: &DyadicGrid, mode: J0Mode) -> AuxJump {
    let j0 = j0_segments(grid, mode);
    let mut all = j.clone();
    all.extend(&j0);
    AuxJump { all, j0 }
}

/// Lattice squares of generation `i` whose open enlargement `factor * Q` meets `s`,
/// with the length of `s` inside that enlargement.
fn enlarged_hits(grid: &DyadicGrid, i: u32, factor: f64, s: &Segment, out: &mut BTreeMap<(i64, i64), f64>) {
    let hs = grid.halfside(i);
    let m = grid.count(i) as i64;
    let dom = grid.domain();
    let side = 2.0 * hs;
    let reach = factor * hs;
    let b = s.bounds();
    let y0 = (((b.min.y - reach - dom.min.y) / side).floor() as i64).max(0);
    let y1 = (((b.max.y + reach - dom.min.y) / side).floor() as i64).min(m - 1);
    for iy in y0..=y1 {
        let cy = dom.min.y + (2 * iy + 1) as f64 * hs;
        let slab = Aabb {
            min: Point::new(b.min.x - side, cy - reach),
            max: Point::new(b.max.x + side, cy + reach),
        };
        let Some((t0, t1)) = s.clip_params(&slab) else { continue };
        let (p, q) = (s.at(t0), s.at(t1));
        let (xa, xb) = (p.x.min(q.x), p.x.max(q.x));
        let x0 = (((xa - reach - dom.min.x) / side).floor() as i64).max(0);
        let x1 = (((xb + reach - dom.min.x) / side).floor() as i64).min(m - 1);
        for ix in x0..=x1 {
            let c = Point::new(dom.min.x + (2 * ix + 1) as f64 * hs, cy);
            let len = segment_length_in_open(s, &Aabb::centered(c, reach));
            if len > 0.0 {
                *out.entry((ix, iy)).or_insert(0.0) += len;
            }
        }
    }
}

/// `H^1(segs n factor*Q)` for every square of generation `i` where it is positive.
pub fn enlarged_measures(grid: &DyadicGrid, i: u32, factor: f64, segs: &SegmentSet) -> BTreeMap<(i64, i64), f64> {
    let mut out = BTreeMap::new();
    for s in segs.iter() {
        enlarged_hits(grid, i, factor, s, &mut out);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BadSquareIndex {
    pub grid: DyadicGrid,
    pub jstar: SegmentSet,
    pub j0: SegmentSet,
    pub i_min: u32,
    pub i_max: u32,
    /// Per generation: bad lattice squares with `H^1(J* n Q')`.
    pub bad: BTreeMap<u32, BTreeMap<(i64, i64), f64>>,
}

impl BadSquareIndex {
    pub fn theta(&self) -> Theta {
        self.grid.theta
    }

    pub fn threshold(&self, i: u32) -> f64 {
        self.theta().powi(3) * self.grid.halfside(i)
    }

    pub fn is_bad(&self, i: u32, ix: i64, iy: i64) -> bool {
        self.bad.get(&i).is_some_and(|m| m.contains_key(&(ix, iy)))
    }

    pub fn bad_squares(&self, i: u32) -> Vec<Square> {
        self.bad
            .get(&i)
            .map(|m| m.keys().map(|&(x, y)| self.grid.square(i, x, y)).collect())
            .unwrap_or_default()
    }

    pub fn bad_cells(&self, i: u32) -> Vec<(i64, i64)> {
        self.bad.get(&i).map(|m| m.keys().copied().collect()).unwrap_or_default()
    }
}

/// Flags `Q` of generation `i` as bad when `H^1(J* n Q') >= theta^3 s_i`, and
/// whenever `Q'` meets `J_0`.
pub fn classify_bad(aux: &AuxJump, grid: &DyadicGrid, i_min: u32, i_max: u32) -> BadSquareIndex {
    let mut bad = BTreeMap::new();
    for i in i_min..=i_max {
        let thr = grid.theta.powi(3) * grid.halfside(i);
        let tol = 1e-12 * grid.mu;
        let meas = enlarged_measures(grid, i, 1.5, &aux.all);
        let touch0 = enlarged_measures(grid, i, 1.5, &aux.j0);
        let set: BTreeMap<(i64, i64), f64> = meas
            .into_iter()
            .filter(|(k, v)| *v >= thr - tol || touch0.contains_key(k))
            .collect();
        bad.insert(i, set);
    }
    BadSquareIndex { grid: *grid, jstar: aux.all.clone(), j0: aux.j0.clone(), i_min, i_max, bad }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    /// Lattice cells of generation `i` (may extend past the domain).
    pub cells: Vec<(i64, i64)>,
    pub diameter: f64,
    pub boundary_length: f64,
    pub isolated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentSet {
    pub generation: u32,
    pub components: Vec<Component>,
}

/// Dense lattice mask over an index window.
#[derive(Clone, Debug)]
pub(crate) struct LatticeMask {
    pub x0: i64,
    pub y0: i64,
    pub mask: Mask,
}

impl LatticeMask {
    pub fn from_cells(cells: &BTreeSet<(i64, i64)>) -> Option<LatticeMask> {
        let x0 = cells.iter().map(|c| c.0).min()?;
        let x1 = cells.iter().map(|c| c.0).max()?;
        let y0 = cells.iter().map(|c| c.1).min()?;
        let y1 = cells.iter().map(|c| c.1).max()?;
        let (nx, ny) = ((x1 - x0 + 1) as usize, (y1 - y0 + 1) as usize);
        let mut mask = Mask::new(nx, ny);
        for &(x, y) in cells {
            mask.set((x - x0) as usize, (y - y0) as usize, true);
        }
        Some(LatticeMask { x0, y0, mask })
    }
}

/// Union of the closed `Q'''` of the given bad cells, as generation-`i` lattice cells.
pub fn triple_cells(cells: &[(i64, i64)]) -> BTreeSet<(i64, i64)> {
    let mut out = BTreeSet::new();
    for &(x, y) in cells {
        for dy in -2..=2 {
            for dx in -2..=2 {
                out.insert((x + dx, y + dy));
            }
        }
    }
    out
}

/// Diameter of a union of closed lattice cells of side `side`.
pub fn cells_diameter(cells: &[(i64, i64)], side: f64) -> f64 {
    let mut pts: Vec<(i64, i64)> = Vec::with_capacity(cells.len() * 4);
    for &(x, y) in cells {
        pts.extend_from_slice(&[(x, y), (x + 1, y), (x, y + 1), (x + 1, y + 1)]);
    }
    pts.sort_unstable();
    pts.dedup();
    let hull = convex_hull(&pts);
    let mut best = 0i64;
    for a in 0..hull.len() {
        for b in a + 1..hull.len() {
            let (dx, dy) = (hull[a].0 - hull[b].0, hull[a].1 - hull[b].1);
            best = best.max(dx * dx + dy * dy);
        }
    }
    (best as f64).sqrt() * side
}

fn convex_hull(pts: &[(i64, i64)]) -> Vec<(i64, i64)> {
    if pts.len() < 3 {
        return pts.to_vec();
    }
    let cross = |o: (i64, i64), a: (i64, i64), b: (i64, i64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut lower: Vec<(i64, i64)> = Vec::new();
    for &p in pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(i64, i64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn perimeter_cells(mask: &Mask) -> usize {
    let mut edges = 0;
    for y in 0..mask.ny {
        for x in 0..mask.nx {
            if !mask.get(x, y) {
                continue;
            }
            edges += usize::from(x == 0 || !mask.get(x - 1, y));
            edges += usize::from(x + 1 == mask.nx || !mask.get(x + 1, y));
            edges += usize::from(y == 0 || !mask.get(x, y - 1));
            edges += usize::from(y + 1 == mask.ny || !mask.get(x, y + 1));
        }
    }
    edges
}

/// Connected components (8-connectivity) of a set of lattice cells of side `side`.
pub fn lattice_components(cells: &BTreeSet<(i64, i64)>, side: f64) -> Vec<(Vec<(i64, i64)>, f64, f64)> {
    let Some(lm) = LatticeMask::from_cells(cells) else { return Vec::new() };
    let (labels, count) = label_components(&lm.mask, None, Connectivity::Eight);
    let mut groups: Vec<Vec<(i64, i64)>> = vec![Vec::new(); count];
    for (i, l) in labels.iter().enumerate() {
        if *l >= 0 {
            let (x, y) = (i % lm.mask.nx, i / lm.mask.nx);
            groups[*l as usize].push((x as i64 + lm.x0, y as i64 + lm.y0));
        }
    }
    groups
        .into_iter()
        .map(|g| {
            let set: BTreeSet<(i64, i64)> = g.iter().copied().collect();
            let m = LatticeMask::from_cells(&set).unwrap();
            let per = perimeter_cells(&m.mask) as f64 * side;
            let d = cells_diameter(&g, side);
            (g, d, per)
        })
        .collect()
}

/// Components of `B^i`, the union of `Q'''` over the bad squares of generation `i`.
pub fn components(index: &BadSquareIndex, i: u32, r: f64) -> ComponentSet {
    let side = 2.0 * index.grid.halfside(i);
    let cells = triple_cells(&index.bad_cells(i));
    let limit = isolation_limit(&index.grid, i, r);
    let components = lattice_components(&cells, side)
        .into_iter()
        .map(|(cells, diameter, boundary_length)| Component {
            cells,
            diameter,
            boundary_length,
            isolated: diameter <= limit,
        })
        .collect();
    ComponentSet { generation: i, components }
}

/// `theta^(-i r) s_i`.
pub fn isolation_limit(grid: &DyadicGrid, i: u32, r: f64) -> f64 {
    grid.theta.value().powf(-(i as f64) * r) * grid.halfside(i)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnionBound {
    pub boundary_length: f64,
    pub jump_in_union: f64,
    pub ratio: f64,
    /// Union of `dQ'''` over the greedy subfamily.
    pub gamma: SegmentSet,
    /// The greedy subfamily.
    pub kept: Vec<Square>,
}

/// Boundary of `R = U Q'''` over squares selected at several generations,
/// compared with the jump length inside `R`.
pub fn union_boundary_bound(grid: &DyadicGrid, selected: &[(u32, Vec<(i64, i64)>)], jstar: &SegmentSet) -> UnionBound {
    let Some(fine) = selected.iter().map(|s| s.0).max() else {
        return UnionBound { boundary_length: 0.0, jump_in_union: 0.0, ratio: 0.0, gamma: SegmentSet::new(), kept: vec![] };
    };
    let fan = grid.theta.fanout() as i64;
    let side = 2.0 * grid.halfside(fine);
    let mut by_gen: Vec<&(u32, Vec<(i64, i64)>)> = selected.iter().collect();
    by_gen.sort_by_key(|s| s.0);
    // fine-lattice cells of every Q''' and of the greedy subfamily
    let block = |gen: u32, x: i64, y: i64| {
        let k = fan.pow(fine - gen);
        (x * k - 2 * k, x * k + 3 * k - 1, y * k - 2 * k, y * k + 3 * k - 1)
    };
    let mut union: BTreeSet<(i64, i64)> = BTreeSet::new();
    let mut kept = Vec::new();
    let mut boxes = Vec::new();
    let mut gens: Vec<u32> = by_gen.iter().map(|s| s.0).collect();
    gens.dedup();
    for g in gens {
        let covered_before = union.clone();
        for sel in by_gen.iter().filter(|s| s.0 == g) {
            for &(x, y) in &sel.1 {
                let (x0, x1, y0, y1) = block(g, x, y);
                let inside = (y0..=y1).all(|yy| (x0..=x1).all(|xx| covered_before.contains(&(xx, yy))));
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        union.insert((xx, yy));
                    }
                }
                let sq = grid.square(g, x, y);
                boxes.push(sq.triple_prime());
                if !inside {
                    kept.push(sq);
                }
            }
        }
    }
    let lm = LatticeMask::from_cells(&union).unwrap();
    let boundary_length = perimeter_cells(&lm.mask) as f64 * side;
    let jump_in_union = measure_in_union(jstar, &boxes);
    let mut gamma = SegmentSet::new();
    for q in &kept {
        for e in q.triple_prime().edges() {
            gamma.push(e);
        }
    }
    let ratio = if jump_in_union > 0.0 { boundary_length / jump_in_union } else { f64::INFINITY };
    UnionBound { boundary_length, jump_in_union, ratio, gamma, kept }
}

/// Connected components of a segment set (closed segments touching count as connected).
pub fn segment_components(segs: &SegmentSet) -> Vec<Vec<usize>> {
    let n = segs.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let bbs: Vec<Aabb> = segs.iter().map(|s| s.bounds()).collect();
    for a in 0..n {
        for b in a + 1..n {
            if !bbs[a].intersects_closed(&bbs[b]) {
                continue;
            }
            if segs.segments[a].intersects(&segs.segments[b]) {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    groups.into_values().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalGeneration {
    pub generation: u32,
    /// Set when no generation up to the grid floor met the selection rule.
    pub truncated: bool,
}

/// Smallest generation `i` in `i_start..=i_floor` at which every component of
/// `B^i` holds one component of `J*`, components of `J*` are `theta^-1 s_i`
/// apart, no component of `B^i` is isolated, and their count is at most
/// `H^1(J*)/s_i`.
pub fn choose_final_generation(index: &BadSquareIndex, i_start: u32, i_floor: u32, r: f64) -> FinalGeneration {
    let grid = &index.grid;
    let comps = segment_components(&index.jstar);
    let total = index.jstar.total_length();
    let mut min_dist = f64::INFINITY;
    for a in 0..comps.len() {
        for b in a + 1..comps.len() {
            for &sa in &comps[a] {
                for &sb in &comps[b] {
                    let d = index.jstar.segments[sa].closest_points(&index.jstar.segments[sb]).0;
                    min_dist = min_dist.min(d);
                }
            }
        }
    }
    for i in i_start..=i_floor.min(index.i_max) {
        let s = grid.halfside(i);
        let far_apart = comps.len() <= 1 || min_dist >= s / grid.theta.value();
        let few = comps.len() as f64 <= total / s;
        if !(far_apart && few) {
            continue;
        }
        let cs = components(index, i, r);
        if cs.components.iter().any(|c| c.isolated) {
            continue;
        }
        if one_jump_component_each(index, i, &cs, &comps) {
            return FinalGeneration { generation: i, truncated: false };
        }
    }
    FinalGeneration { generation: i_floor.min(index.i_max), truncated: true }
}

fn one_jump_component_each(index: &BadSquareIndex, i: u32, cs: &ComponentSet, comps: &[Vec<usize>]) -> bool {
    let grid = &index.grid;
    let side = 2.0 * grid.halfside(i);
    let mut owner: BTreeMap<(i64, i64), usize> = BTreeMap::new();
    for (k, c) in cs.components.iter().enumerate() {
        for &cell in &c.cells {
            owner.insert(cell, k);
        }
    }
    let mut count = vec![0usize; cs.components.len()];
    for comp in comps {
        let mut hit: BTreeSet<usize> = BTreeSet::new();
        for &si in comp {
            let s = &index.jstar.segments[si];
            let steps = (s.length() / (0.25 * side)).ceil().max(1.0) as usize;
            for k in 0..=steps {
                let p = s.at(k as f64 / steps as f64);
                let (x, y) = grid.index_of(i, p);
                for (dx, dy) in [(0, 0), (-1, 0), (0, -1), (-1, -1)] {
                    if let Some(&o) = owner.get(&(x + dx, y + dy)) {
                        hit.insert(o);
                    }
                }
            }
        }
        for o in hit {
            count[o] += 1;
        }
    }
    let _ = side;
    count.iter().all(|c| *c <= 1)
}

/// Squares removed at one generation of the regularization sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemovedLayer {
    pub generation: u32,
    pub cells: Vec<(i64, i64)>,
    pub squares: Vec<Square>,
    /// `H^1` of the boundary of the union of this layer.
    pub boundary_length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regularization {
    pub grid: DyadicGrid,
    pub floor_generation: u32,
    pub layers: Vec<RemovedLayer>,
    /// Final running set: jump parts outside removed squares plus their boundaries.
    pub gamma: SegmentSet,
    /// Original jumps together with the boundaries of every removed square.
    pub augmented_jumps: SegmentSet,
    pub removed_boundary_total: f64,
    pub jump_length: f64,
    pub ledger_ratio: f64,
}

impl Regularization {
    pub fn removed_boxes(&self) -> Vec<Aabb> {
        self.layers.iter().flat_map(|l| l.squares.iter().map(Square::bounds)).collect()
    }

    /// `u` with every cell whose center lies in the first `j` removed layers set to zero.
    pub fn field_after(&self, u: &DisplacementField, j: usize) -> DisplacementField {
        let mut out = u.clone();
        let g = u.geom();
        for layer in self.layers.iter().take(j) {
            for sq in &layer.squares {
                if let Some((x0, x1, y0, y1)) = g.cells_with_center_in(&sq.bounds()) {
                    for y in y0..=y1 {
                        for x in x0..=x1 {
                            out.values[y * u.n + x] = [0.0, 0.0];
                        }
                    }
                }
            }
        }
        out
    }
}

/// Finest generation whose squares are at least one cell wide.
pub fn floor_generation(n: usize, theta: Theta) -> u32 {
    let mut i = 0;
    while (theta.fanout() as usize).pow(i + 1) <= n {
        i += 1;
    }
    i
}

/// Removal threshold at generation `i`: `min(16 s_i, theta^-1 d(Q))`.
pub fn removal_threshold(grid: &DyadicGrid, i: u32) -> f64 {
    let s = grid.halfside(i);
    (16.0 * s).min(2.0 * std::f64::consts::SQRT_2 * s / grid.theta.value())
}

/// Boundary of a union of same-generation lattice squares, as unit edges.
fn union_boundary_segments(grid: &DyadicGrid, i: u32, cells: &BTreeSet<(i64, i64)>) -> SegmentSet {
    let mut out = SegmentSet::new();
    for &(x, y) in cells {
        let b = grid.square(i, x, y).bounds();
        let e = b.edges();
        // bottom, right, top, left
        let nbr = [(x, y - 1), (x + 1, y), (x, y + 1), (x - 1, y)];
        for k in 0..4 {
            if !cells.contains(&nbr[k]) {
                out.push(e[k]);
            }
        }
    }
    out
}

/// Bottom-up removal of squares carrying too much jump, generation by
/// generation from the grid floor up to generation 1.
pub fn regularize_jump_density(u: &DisplacementField, theta: Theta) -> Regularization {
    let grid = DyadicGrid { center: u.center, mu: u.mu, theta };
    let floor = floor_generation(u.n, theta);
    regularize_segments(&u.jumps, &grid, floor)
}

pub fn regularize_segments(jumps: &SegmentSet, grid: &DyadicGrid, floor: u32) -> Regularization {
    let mut layers: Vec<RemovedLayer> = Vec::new();
    let mut boundaries: Vec<SegmentSet> = Vec::new();
    let mut gamma = jumps.clone();
    for g in (1..=floor).rev() {
        let thr = removal_threshold(grid, g);
        let meas = enlarged_measures(grid, g, 1.0, &gamma);
        let cells: BTreeSet<(i64, i64)> =
            meas.into_iter().filter(|(_, v)| *v > thr * (1.0 + 1e-12)).map(|(k, _)| k).collect();
        if cells.is_empty() {
            continue;
        }
        let bnd = union_boundary_segments(grid, g, &cells);
        let squares: Vec<Square> = cells.iter().map(|&(x, y)| grid.square(g, x, y)).collect();
        layers.push(RemovedLayer {
            generation: g,
            cells: cells.into_iter().collect(),
            squares,
            boundary_length: bnd.total_length(),
        });
        boundaries.push(bnd);
        gamma = running_gamma(jumps, &layers, &boundaries);
    }
    let mut augmented = jumps.clone();
    for b in &boundaries {
        augmented.extend(b);
    }
    let removed_boundary_total: f64 = layers.iter().map(|l| l.boundary_length).sum();
    let jump_length = jumps.total_length();
    Regularization {
        grid: *grid,
        floor_generation: floor,
        layers,
        gamma,
        augmented_jumps: augmented,
        removed_boundary_total,
        jump_length,
        ledger_ratio: if jump_length > 0.0 { removed_boundary_total / jump_length } else { 0.0 },
    }
}

/// `U_k (dR_k \ U_{l>k} closed R_l) u (J \ U_k closed R_k)`.
fn running_gamma(jumps: &SegmentSet, layers: &[RemovedLayer], boundaries: &[SegmentSet]) -> SegmentSet {
    let all: Vec<Aabb> = layers.iter().flat_map(|l| l.squares.iter().map(Square::bounds)).collect();
    let mut out = jumps.minus_boxes(&all);
    for k in 0..layers.len() {
        let later: Vec<Aabb> = layers[k + 1..].iter().flat_map(|l| l.squares.iter().map(Square::bounds)).collect();
        out.extend(&boundaries[k].minus_boxes(&later));
    }
    out
}

/// Largest `H^1(segs n Q) / (theta^-1 d(Q))` over all squares of generations `1..=floor`.
pub fn density_violations(segs: &SegmentSet, grid: &DyadicGrid, floor: u32) -> (usize, f64) {
    let mut count = 0;
    let mut worst: f64 = 0.0;
    for g in 1..=floor {
        let lim = 2.0 * std::f64::consts::SQRT_2 * grid.halfside(g) / grid.theta.value();
        for (_, v) in enlarged_measures(grid, g, 1.0, segs) {
            worst = worst.max(v / lim);
            if v > lim * (1.0 + 1e-9) {
                count += 1;
            }
        }
    }
    (count, worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(ax: f64, ay: f64, bx: f64, by: f64) -> Segment {
        Segment::new(Point::new(ax, ay), Point::new(bx, by)).unwrap()
    }

    #[test]
    fn j0_length_matches_line_count() {
        let grid = DyadicGrid::new(1.0, Theta::Half);
        let aux = auxiliary_jump(&SegmentSet::new(), &grid, J0Mode::Generation(7));
        // oracle: 2^7 + 1 vertical and horizontal lines, each of length 2
        let lines = 2 * ((1u64 << 7) + 1);
        assert!((aux.all.total_length() - lines as f64 * 2.0).abs() < 1e-9);
        assert!((aux.all.total_length() - 516.0).abs() < 1e-9);
        let j = SegmentSet::from_segments(vec![seg(0.0, 0.0, 0.3, 0.1)]);
        let aux = auxiliary_jump(&j, &grid, J0Mode::DomainBoundary);
        assert!(aux.all.total_length() >= j.total_length());
        assert!((aux.j0.total_length() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn threshold_example() {
        // theta = 1/2 and s_i = 1 at generation 0 with mu = 1; Q' = (-1.5, 1.5)^2
        let grid = DyadicGrid { center: Point::new(0.0, 0.0), mu: 1.0, theta: Theta::Half };
        let j = SegmentSet::from_segments(vec![seg(-0.1, 0.0, 0.1, 0.0)]);
        let aux = AuxJump { all: j.clone(), j0: SegmentSet::new() };
        let idx = classify_bad(&aux, &grid, 0, 0);
        assert!(idx.is_bad(0, 0, 0));
        let short = SegmentSet::from_segments(vec![seg(-0.05, 0.0, 0.05, 0.0)]);
        let idx = classify_bad(&AuxJump { all: short, j0: SegmentSet::new() }, &grid, 0, 0);
        assert!(!idx.is_bad(0, 0, 0));
        let idx = classify_bad(&AuxJump { all: SegmentSet::new(), j0: SegmentSet::new() }, &grid, 0, 3);
        assert!(idx.bad.values().all(|m| m.is_empty()));
    }

    #[test]
    fn j0_touching_squares_are_bad() {
        let grid = DyadicGrid::new(1.0, Theta::Quarter);
        let aux = auxiliary_jump(&SegmentSet::new(), &grid, J0Mode::Generation(1));
        let idx = classify_bad(&aux, &grid, 2, 2);
        // every generation-2 square whose Q' meets a generation-1 line is bad
        for iy in 0..16i64 {
            for ix in 0..16i64 {
                let near = |k: i64| k % 4 == 0 || k % 4 == 3;
                assert_eq!(idx.is_bad(2, ix, iy), near(ix) || near(iy), "({ix},{iy})");
            }
        }
    }

    #[test]
    fn component_examples() {
        let grid = DyadicGrid::new(1.0, Theta::Quarter);
        let mut idx = BadSquareIndex {
            grid,
            jstar: SegmentSet::new(),
            j0: SegmentSet::new(),
            i_min: 3,
            i_max: 3,
            bad: BTreeMap::new(),
        };
        idx.bad.insert(3, BTreeMap::from([((10, 10), 1.0)]));
        let cs = components(&idx, 3, 0.05);
        assert_eq!(cs.components.len(), 1);
        let q = grid.square(3, 10, 10);
        assert!((cs.components[0].diameter - 5.0 * q.diameter()).abs() < 1e-12);
        assert!((cs.components[0].boundary_length - 40.0 * q.halfside).abs() < 1e-12);
        idx.bad.insert(3, BTreeMap::from([((10, 10), 1.0), ((20, 20), 1.0)]));
        assert_eq!(components(&idx, 3, 0.05).components.len(), 2);
    }

    #[test]
    fn long_crack_component_is_not_isolated() {
        let grid = DyadicGrid::new(1.0, Theta::Quarter);
        let (i, r) = (3u32, 0.05);
        let lim = isolation_limit(&grid, i, r);
        let len = (10.0 * lim).min(1.9);
        let j = SegmentSet::from_segments(vec![seg(-0.95, 0.01, -0.95 + len, 0.01)]);
        let idx = classify_bad(&AuxJump { all: j, j0: SegmentSet::new() }, &grid, i, i);
        let cs = components(&idx, i, r);
        assert_eq!(cs.components.len(), 1);
        assert!(cs.components[0].diameter > lim && !cs.components[0].isolated);
        // with a large exponent the same component becomes isolated exactly when flagged
        let cs = components(&idx, i, 2.0);
        for c in &cs.components {
            assert_eq!(c.isolated, c.diameter <= isolation_limit(&grid, i, 2.0));
        }
    }

    #[test]
    fn union_bound_single_square() {
        let grid = DyadicGrid::new(1.0, Theta::Quarter);
        let q = grid.square(3, 10, 10);
        let j = SegmentSet::from_segments(vec![seg(q.center.x - 0.5 * q.halfside, q.center.y, q.center.x + 0.5 * q.halfside, q.center.y)]);
        let ub = union_boundary_bound(&grid, &[(3, vec![(10, 10)])], &j);
        assert!((ub.boundary_length - 40.0 * q.halfside).abs() < 1e-12);
        assert!((ub.ratio - 40.0 * q.halfside / j.total_length()).abs() < 1e-9);
        assert_eq!(ub.gamma.len(), 4);
    }

    #[test]
    fn union_bound_drops_nested_square() {
        let grid = DyadicGrid::new(1.0, Theta::Quarter);
        // generation-4 square in the middle of the coarse square (2, 2): its Q''' lies inside the coarse Q'''
        let ub = union_boundary_bound(&grid, &[(3, vec![(2, 2)]), (4, vec![(9, 9)])], &SegmentSet::new());
        assert_eq!(ub.kept.len(), 1);
        assert_eq!(ub.kept[0].generation, 3);
        let coarse = grid.square(3, 2, 2);
        assert!((ub.boundary_length - 40.0 * coarse.halfside).abs() < 1e-12);
    }

    #[test]
    fn regularization_keeps_sparse_jumps() {
        let grid = DyadicGrid::new(1.0, Theta::Quarter);
        let j = SegmentSet::from_segments(vec![seg(-1.0, 0.013, 1.0, 0.013)]);
        let reg = regularize_segments(&j, &grid, 4);
        assert!(reg.layers.is_empty());
        assert_eq!(reg.gamma, j);
    }

    #[test]
    fn dense_cluster_removes_one_square_region() {
        let grid = DyadicGrid::new(1.0, Theta::Quarter);
        let q = grid.square(2, 5, 6);
        let b = q.bounds();
        // 100 d(Q) of jump spread over horizontal lines inside Q
        let lines = 100.0 * q.diameter() / (2.0 * q.halfside);
        let k = lines.ceil() as usize;
        let mut j = SegmentSet::new();
        for t in 0..k {
            let y = b.min.y + (t as f64 + 0.5) / k as f64 * b.height();
            j.push(seg(b.min.x + 1e-6, y, b.max.x - 1e-6, y));
        }
        let reg = regularize_segments(&j, &grid, 4);
        // union of removed squares is exactly Q; no ancestor of Q is removed
        let boxes = reg.removed_boxes();
        let area: f64 = reg
            .layers
            .iter()
            .flat_map(|l| l.squares.iter())
            .map(Square::area)
            .sum();
        assert!((area - q.area()).abs() < 1e-12);
        assert!(reg.layers.iter().all(|l| l.generation >= 2));
        assert!(boxes.iter().all(|bb| b.contains_box(bb)));
        let (viol, _) = density_violations(&reg.gamma, &grid, 4);
        assert_eq!(viol, 0);
    }
}
