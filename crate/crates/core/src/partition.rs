//! Auxiliary partition into simply connected pieces, the Whitney-type
//! covering built on top of it, and John-constant estimates for cell regions.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covering::{
    auxiliary_jump, cells_diameter, choose_final_generation, classify_bad, enlarged_measures, floor_generation,
    isolation_limit, segment_components, union_boundary_bound, BadSquareIndex, FinalGeneration, J0Mode,
};
use crate::field::DisplacementField;
use crate::geometry::{saturate, Aabb, DyadicGrid, Point, Segment, SegmentSet, Square, Theta};
use crate::grid::{edt_with_sites, label_components, split_labels, Connectivity, EdgeCuts, GridGeom, Mask};
use crate::KornError;

type Range = (usize, usize, usize, usize);

/// The generation-`g` lattice of `Q_mu` viewed as a dense `m x m` cell grid.
#[derive(Clone, Copy, Debug)]
struct Lattice {
    generation: u32,
    fanout: i64,
    m: usize,
    side: f64,
    lo: Point,
}

impl Lattice {
    fn new(grid: &DyadicGrid, generation: u32) -> Self {
        Lattice {
            generation,
            fanout: grid.theta.fanout() as i64,
            m: grid.count(generation) as usize,
            side: 2.0 * grid.halfside(generation),
            lo: grid.domain().min,
        }
    }

    fn center(&self, c: usize) -> Point {
        let (x, y) = (c % self.m, c / self.m);
        Point::new(self.lo.x + (x as f64 + 0.5) * self.side, self.lo.y + (y as f64 + 0.5) * self.side)
    }

    fn cell_of(&self, p: Point) -> (usize, usize) {
        let f = |v: f64| ((v / self.side).floor().max(0.0) as usize).min(self.m - 1);
        (f(p.x - self.lo.x), f(p.y - self.lo.y))
    }

    /// Cells of the block of generation-`gen` lattice indices `x0..=x1, y0..=y1`, clipped.
    fn block(&self, gen: u32, x0: i64, x1: i64, y0: i64, y1: i64) -> Option<Range> {
        let k = self.fanout.pow(self.generation - gen);
        let m = self.m as i64;
        let (fx0, fx1) = ((x0 * k).max(0), ((x1 + 1) * k - 1).min(m - 1));
        let (fy0, fy1) = ((y0 * k).max(0), ((y1 + 1) * k - 1).min(m - 1));
        if fx0 > fx1 || fy0 > fy1 {
            return None;
        }
        Some((fx0 as usize, fx1 as usize, fy0 as usize, fy1 as usize))
    }

    fn triple(&self, gen: u32, x: i64, y: i64) -> Option<Range> {
        self.block(gen, x - 2, x + 2, y - 2, y + 2)
    }

    /// Calls `f` for every cell met by the closed segment (sampled at a quarter cell).
    fn raster(&self, s: &Segment, mut f: impl FnMut(usize)) {
        let steps = (s.length() / (0.25 * self.side)).ceil().max(1.0) as usize;
        let mut last = usize::MAX;
        for k in 0..=steps {
            let (x, y) = self.cell_of(s.at(k as f64 / steps as f64));
            let c = y * self.m + x;
            if c != last {
                f(c);
                last = c;
            }
        }
    }
}

fn fill(mask: &mut Mask, r: Range) {
    for y in r.2..=r.3 {
        for x in r.0..=r.1 {
            mask.set(x, y, true);
        }
    }
}

fn all_in(mask: &Mask, r: Range) -> bool {
    (r.2..=r.3).all(|y| (r.0..=r.1).all(|x| mask.get(x, y)))
}

fn any_in(mask: &Mask, r: Range) -> bool {
    (r.2..=r.3).any(|y| (r.0..=r.1).any(|x| mask.get(x, y)))
}

fn grow(r: Range, m: usize) -> Range {
    (r.0.saturating_sub(1), (r.1 + 1).min(m - 1), r.2.saturating_sub(1), (r.3 + 1).min(m - 1))
}

fn groups(labels: &[i32], count: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); count];
    for (i, l) in labels.iter().enumerate() {
        if *l >= 0 {
            out[*l as usize].push(i);
        }
    }
    out
}

fn to_xy(cells: &[usize], m: usize) -> Vec<(i64, i64)> {
    cells.iter().map(|&c| ((c % m) as i64, (c / m) as i64)).collect()
}

fn mask_of(cells: &[usize], m: usize) -> Mask {
    let mut mk = Mask::new(m, m);
    for &c in cells {
        mk.data[c] = true;
    }
    mk
}

/// `E^i` and the saturated isolated part `U_i` of one generation, on the final-generation lattice.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelSets {
    pub generation: u32,
    pub e: Mask,
    pub isolated: Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectingSegment {
    pub generation: u32,
    pub segment: Segment,
    /// Whether the connection runs through a removed component.
    pub via_removed: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuxPartition {
    pub geom: GridGeom,
    pub grid: DyadicGrid,
    /// Piece label per field cell.
    pub labels: Vec<i32>,
    pub count: usize,
    /// Union of the piece boundaries: the used jump components, all connecting segments and `dQ_mu`.
    pub boundary_segments: SegmentSet,
    pub connecting: Vec<ConnectingSegment>,
    pub boundary_length: f64,
    pub jump_length: f64,
    pub final_generation: FinalGeneration,
    pub i_min: u32,
    pub levels: Vec<LevelSets>,
}

impl AuxPartition {
    pub fn lattice_generation(&self) -> u32 {
        self.final_generation.generation
    }

    pub fn level(&self, i: u32) -> Option<&LevelSets> {
        self.levels.iter().find(|l| l.generation == i)
    }

    pub fn piece_mask(&self, j: usize) -> Mask {
        Mask {
            nx: self.geom.nx,
            ny: self.geom.ny,
            data: self.labels.iter().map(|l| *l == j as i32).collect(),
        }
    }

    /// Cuts separating the pieces, including slits ending inside a piece.
    pub fn cuts(&self) -> EdgeCuts {
        let mut c = EdgeCuts::from_labels(self.geom.nx, self.geom.ny, &self.labels);
        c.add_segments(&self.geom, &self.boundary_segments);
        c
    }

    /// `sum H^1(dP_j) / H^1(J)`; infinite without jumps.
    pub fn ledger_ratio(&self) -> f64 {
        if self.jump_length > 0.0 {
            self.boundary_length / self.jump_length
        } else {
            f64::INFINITY
        }
    }
}

/// Bad squares of generations `from..=to` whose closed `Q'''` lies in `outer`
/// and stays away from `inner`.
fn removed_squares(
    index: &BadSquareIndex,
    lat: &Lattice,
    outer: &Mask,
    inner: &Mask,
    from: u32,
    to: u32,
) -> Vec<(u32, Vec<(i64, i64)>)> {
    let mut out = Vec::new();
    for l in from..=to {
        let kept: Vec<(i64, i64)> = index
            .bad_cells(l)
            .into_iter()
            .filter(|&(x, y)| {
                lat.triple(l, x, y).is_some_and(|r| all_in(outer, r) && !any_in(inner, grow(r, lat.m)))
            })
            .collect();
        if !kept.is_empty() {
            out.push((l, kept));
        }
    }
    out
}

struct Witness {
    dist: f64,
    /// Cell of the first node.
    from: usize,
    /// Cell of the second node.
    to: usize,
}

/// Closest cell pairs from node `a` (through its distance transform) to every cell group.
fn closest_to(edt: &(Vec<f64>, Vec<usize>), target: &[usize]) -> Witness {
    let mut best = Witness { dist: f64::INFINITY, from: 0, to: 0 };
    for &c in target {
        let d = edt.0[c];
        if d < best.dist {
            best = Witness { dist: d, from: edt.1[c], to: c };
        }
    }
    best.dist = best.dist.sqrt();
    best
}

fn find(p: &mut [usize], mut i: usize) -> usize {
    while p[i] != i {
        p[i] = p[p[i]];
        i = p[i];
    }
    i
}

/// Minimum spanning forest over `n` nodes with the given weighted edges (Kruskal).
fn kruskal(n: usize, mut edges: Vec<(f64, usize, usize, usize)>) -> Vec<(usize, usize, usize)> {
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut parent: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    for (_, a, b, tag) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
            out.push((a, b, tag));
        }
    }
    out
}

fn push_nonzero(out: &mut Vec<Segment>, a: Point, b: Point) {
    if a.dist(b) > 1e-12 * (1.0 + a.norm()) {
        out.push(Segment { a, b });
    }
}

/// Builds the auxiliary partition for the final generation `fin`.
pub fn build_aux_partition(
    index: &BadSquareIndex,
    jumps: &SegmentSet,
    fin: FinalGeneration,
    r: f64,
    geom: &GridGeom,
) -> Result<AuxPartition, KornError> {
    let grid = index.grid;
    let i_min = index.i_min;
    let big = fin.generation;
    if big < i_min || big > index.i_max {
        return Err(KornError::InvalidArgument(format!(
            "final generation {big} outside the classified range {i_min}..={}",
            index.i_max
        )));
    }
    let lat = Lattice::new(&grid, big);
    let m = lat.m;
    let gens: Vec<u32> = (i_min..=big).collect();

    // Step I: the decreasing sets E^i.
    let b: Vec<Mask> = gens
        .iter()
        .map(|&l| {
            let mut mk = Mask::new(m, m);
            for (x, y) in index.bad_cells(l) {
                if let Some(r) = lat.triple(l, x, y) {
                    fill(&mut mk, r);
                }
            }
            mk
        })
        .collect();
    let mut suffix = b.clone();
    for k in (0..suffix.len().saturating_sub(1)).rev() {
        let next = suffix[k + 1].clone();
        suffix[k].union_with(&next);
    }
    let mut levels: Vec<LevelSets> = Vec::new();
    let full = Mask::full(m, m);
    for (k, &i) in gens.iter().enumerate() {
        let lim = isolation_limit(&grid, i, r);
        let e_prev = if k == 0 { &full } else { &levels[k - 1].e };
        let (labels, cnt) = label_components(&suffix[k], None, Connectivity::Eight);
        let mut e = Mask::new(m, m);
        for g in groups(&labels, cnt) {
            if !g.iter().any(|&c| b[k].data[c]) || !g.iter().any(|&c| e_prev.data[c]) {
                continue;
            }
            if cells_diameter(&to_xy(&g, m), lat.side) <= lim {
                continue;
            }
            for c in g {
                e.data[c] = true;
            }
        }
        let (bl, bc) = label_components(&b[k], None, Connectivity::Eight);
        let mut iso = Mask::new(m, m);
        for g in groups(&bl, bc) {
            if cells_diameter(&to_xy(&g, m), lat.side) <= lim {
                for c in g {
                    iso.data[c] = true;
                }
            }
        }
        levels.push(LevelSets { generation: i, e, isolated: saturate(&iso) });
    }

    // Step II: connect the components of E^i and the earlier segments.
    let mut s_prev: Vec<Segment> = Vec::new();
    let mut connecting: Vec<ConnectingSegment> = Vec::new();
    let dom = grid.domain();
    for (k, &i) in gens.iter().enumerate() {
        let e_i = &levels[k].e;
        let mut mask = e_i.clone();
        let mut owner = vec![-1i32; m * m];
        for (si, s) in s_prev.iter().enumerate() {
            lat.raster(s, |c| {
                if !mask.data[c] {
                    mask.data[c] = true;
                    owner[c] = si as i32;
                }
            });
        }
        let (fl, fc) = label_components(&mask, None, Connectivity::Eight);
        if fc <= 1 {
            continue;
        }
        let outer = if k == 0 { &full } else { &levels[k - 1].e };
        let from = if k == 0 { i_min } else { i - 1 };
        let sel = removed_squares(index, &lat, outer, e_i, from, big);
        let mut rmask = Mask::new(m, m);
        for (l, cells) in &sel {
            for &(x, y) in cells {
                if let Some(r) = lat.triple(*l, x, y) {
                    fill(&mut rmask, r);
                }
            }
        }
        let (rl, rc) = label_components(&rmask, None, Connectivity::Eight);
        let f_groups = groups(&fl, fc);
        let r_groups = groups(&rl, rc);
        let edts: Vec<(Vec<f64>, Vec<usize>)> =
            f_groups.par_iter().map(|g| edt_with_sites(&mask_of(g, m))).collect();
        let direct: Vec<Vec<Witness>> = (0..fc)
            .into_par_iter()
            .map(|a| f_groups.iter().map(|g| closest_to(&edts[a], g)).collect())
            .collect();
        let to_r: Vec<Vec<Witness>> = (0..fc)
            .into_par_iter()
            .map(|a| r_groups.iter().map(|g| closest_to(&edts[a], g)).collect())
            .collect();
        let mut edges = Vec::new();
        for a in 0..fc {
            for bb in a + 1..fc {
                let mut w = direct[a][bb].dist;
                let mut tag = usize::MAX;
                for l in 0..rc {
                    let via = to_r[a][l].dist + to_r[bb][l].dist;
                    if via < w {
                        w = via;
                        tag = l;
                    }
                }
                edges.push((w, a, bb, tag));
            }
        }
        let snap = |c: usize| -> Point {
            let p = lat.center(c);
            if e_i.data[c] || owner[c] < 0 {
                p
            } else {
                s_prev[owner[c] as usize].project(p).1
            }
        };
        let gamma = if rc > 0 { Some(union_boundary_bound(&grid, &sel, &index.jstar)) } else { None };
        let mut added: Vec<(Segment, bool)> = Vec::new();
        for (a, bb, tag) in kruskal(fc, edges) {
            let mut segs = Vec::new();
            if tag == usize::MAX {
                let w = &direct[a][bb];
                push_nonzero(&mut segs, snap(w.from), snap(w.to));
            } else {
                let (wa, wb) = (&to_r[a][tag], &to_r[bb][tag]);
                push_nonzero(&mut segs, snap(wa.from), lat.center(wa.to));
                push_nonzero(&mut segs, snap(wb.from), lat.center(wb.to));
                if let Some(ub) = &gamma {
                    for q in &ub.kept {
                        let (x, y) = lat.cell_of(q.center);
                        if rl[y * m + x] != tag as i32 {
                            continue;
                        }
                        for e in q.triple_prime().edges() {
                            if let Some(c) = e.clip(&dom) {
                                segs.push(c);
                            }
                        }
                    }
                }
            }
            let via = tag != usize::MAX;
            added.extend(segs.into_iter().map(|s| (s, via)));
        }
        for (s, via) in added {
            s_prev.push(s);
            connecting.push(ConnectingSegment { generation: i, segment: s, via_removed: via });
        }
    }

    // Step III: connect the accumulated segments with the jump components inside E^I.
    let e_big = &levels.last().expect("at least one generation").e;
    let jstar = &index.jstar;
    let mut nodes_set: Vec<Segment> = s_prev.clone();
    for comp in segment_components(jstar) {
        let meets = comp.iter().any(|&si| {
            let mut hit = false;
            lat.raster(&jstar.segments[si], |c| hit |= e_big.data[c]);
            hit
        });
        if meets {
            nodes_set.extend(comp.iter().map(|&si| jstar.segments[si]));
        }
    }
    if !nodes_set.is_empty() {
        nodes_set.extend(dom.edges());
    }
    let node_segs = SegmentSet::from_segments(nodes_set);
    let comps = segment_components(&node_segs);
    let mut edges = Vec::new();
    let mut pairs: BTreeMap<(usize, usize), (Point, Point)> = BTreeMap::new();
    let bbs: Vec<Aabb> = comps
        .iter()
        .map(|c| SegmentSet::from_segments(c.iter().map(|&s| node_segs.segments[s]).collect()).bounds().unwrap())
        .collect();
    for a in 0..comps.len() {
        for bb in a + 1..comps.len() {
            let gap = box_gap(&bbs[a], &bbs[bb]);
            let mut best = (f64::INFINITY, Point::ORIGIN, Point::ORIGIN);
            for &sa in &comps[a] {
                for &sb in &comps[bb] {
                    let c = node_segs.segments[sa].closest_points(&node_segs.segments[sb]);
                    if c.0 < best.0 {
                        best = c;
                    }
                }
            }
            debug_assert!(best.0 >= gap - 1e-9);
            pairs.insert((a, bb), (best.1, best.2));
            edges.push((best.0, a, bb, 0));
        }
    }
    for (a, bb, _) in kruskal(comps.len(), edges) {
        let (p, q) = pairs[&(a, bb)];
        let mut segs = Vec::new();
        push_nonzero(&mut segs, p, q);
        for s in segs {
            connecting.push(ConnectingSegment { generation: big + 1, segment: s, via_removed: false });
        }
    }
    let mut boundary = node_segs.clone();
    for c in connecting.iter().filter(|c| c.generation > big) {
        boundary.push(c.segment);
    }

    let cuts = EdgeCuts::from_segments(geom, &boundary);
    let (labels, count) = label_components(&Mask::full(geom.nx, geom.ny), Some(&cuts), Connectivity::Four);
    let aux = AuxPartition {
        geom: *geom,
        grid,
        labels,
        count,
        boundary_length: boundary.total_length(),
        boundary_segments: boundary,
        connecting,
        jump_length: jumps.total_length(),
        final_generation: fin,
        i_min,
        levels,
    };
    for j in 0..aux.count {
        if !is_simply_connected(&aux.piece_mask(j), Some(&cuts)) {
            return Err(KornError::Internal(format!("auxiliary piece {j} is not simply connected")));
        }
    }
    Ok(aux)
}

fn box_gap(a: &Aabb, b: &Aabb) -> f64 {
    let dx = (a.min.x - b.max.x).max(b.min.x - a.max.x).max(0.0);
    let dy = (a.min.y - b.max.y).max(b.min.y - a.max.y).max(0.0);
    (dx * dx + dy * dy).sqrt()
}

/// Configuration of the auxiliary construction on a whole field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxConfig {
    pub theta: Theta,
    pub r: f64,
    pub j0: J0Mode,
    /// First generation at which bad squares are collected.
    pub i_min: u32,
}

impl AuxConfig {
    pub fn new(theta: Theta, r: f64) -> Self {
        AuxConfig { theta, r, j0: J0Mode::DomainBoundary, i_min: 1 }
    }
}

/// Bad-square index, final generation and auxiliary partition of a field.
pub fn aux_for_field(u: &DisplacementField, cfg: &AuxConfig) -> Result<(BadSquareIndex, AuxPartition), KornError> {
    let grid = DyadicGrid { center: u.center, mu: u.mu, theta: cfg.theta };
    let floor = floor_generation(u.n, cfg.theta);
    if floor < cfg.i_min {
        return Err(KornError::InvalidArgument(format!(
            "grid of {} cells has no generation {} squares",
            u.n, cfg.i_min
        )));
    }
    let aux = auxiliary_jump(&u.jumps, &grid, cfg.j0);
    let index = classify_bad(&aux, &grid, cfg.i_min, floor);
    let fin = choose_final_generation(&index, cfg.i_min, floor, cfg.r);
    let part = build_aux_partition(&index, &u.jumps, fin, cfg.r, &u.geom())?;
    Ok((index, part))
}

/// Whether the (4-connected, cut-aware) cell region is connected and has a
/// connected complement, with cut edges counted as part of the complement.
pub fn is_simply_connected(region: &Mask, cuts: Option<&EdgeCuts>) -> bool {
    let (nx, ny) = (region.nx, region.ny);
    if region.is_empty() || label_components(region, cuts, Connectivity::Four).1 != 1 {
        return false;
    }
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < nx as i64 && y < ny as i64 && region.get(x as usize, y as usize);
    let cw = nx + 1;
    let corner = |x: usize, y: usize| y * cw + x;
    let mut parent: Vec<usize> = (0..cw * (ny + 1)).collect();
    let mut used = vec![false; cw * (ny + 1)];
    let link = |a: usize, b: usize, parent: &mut Vec<usize>, used: &mut Vec<bool>| {
        used[a] = true;
        used[b] = true;
        let (ra, rb) = (find(parent, a), find(parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    };
    // horizontal corner edges separate cells (x, y-1) and (x, y)
    for y in 0..=ny {
        for x in 0..nx {
            let (lo, hi) = (inside(x as i64, y as i64 - 1), inside(x as i64, y as i64));
            let cut = lo && hi && cuts.is_some_and(|c| c.cut_up(x, y - 1));
            if !(lo && hi) || cut {
                link(corner(x, y), corner(x + 1, y), &mut parent, &mut used);
            }
        }
    }
    for y in 0..ny {
        for x in 0..=nx {
            let (l, r) = (inside(x as i64 - 1, y as i64), inside(x as i64, y as i64));
            let cut = l && r && cuts.is_some_and(|c| c.cut_right(x - 1, y));
            if !(l && r) || cut {
                link(corner(x, y), corner(x, y + 1), &mut parent, &mut used);
            }
        }
    }
    let mut root = None;
    for c in 0..used.len() {
        if used[c] {
            let r = find(&mut parent, c);
            match root {
                None => root = Some(r),
                Some(r0) if r0 != r => return false,
                _ => {}
            }
        }
    }
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SquareOrigin {
    /// From one of the layers `T^i_-`.
    Layer,
    /// Whitney continuation below the final generation.
    Continuation,
    /// Leftover floor cells.
    Floor,
    /// Child of a square split to restore the neighbour rule.
    Balanced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverSquare {
    pub square: Square,
    pub ix: i64,
    pub iy: i64,
    pub origin: SquareOrigin,
    /// Set when one of the jump-smallness properties fails; routed to the exceptional set.
    pub exceptional: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CoveringChecks {
    /// Squares are pairwise disjoint and tile the domain.
    pub tiles: bool,
    pub neighbor_violations: usize,
    pub max_overlap: usize,
    /// `H^1(J n Q') > theta^2 s` with `Q''` outside `Z`.
    pub jump_violations: usize,
    /// Same bound failing next to a square of another generation.
    pub neighbor_jump_violations: usize,
    /// Squares below the final generation whose `Q'` still meets `J`.
    pub fine_touching: usize,
    pub balance_splits: usize,
    /// Largest `d(X) / (theta^{-lr} s_l)` over the `Z` components.
    pub z_diameter_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZComponent {
    pub generation: u32,
    /// Cells of the fine lattice.
    pub cells: Vec<(i64, i64)>,
    pub diameter: f64,
    /// Indices of the covering squares of this generation on the boundary of the component.
    pub boundary_squares: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WhitneyCovering {
    pub grid: DyadicGrid,
    /// Generation of the lattice used for masks (the grid floor).
    pub fine_generation: u32,
    pub squares: Vec<CoverSquare>,
    /// Covering square per fine-lattice cell.
    pub owner: Vec<usize>,
    pub z: Vec<ZComponent>,
    pub z_mask: Mask,
    pub checks: CoveringChecks,
}

impl WhitneyCovering {
    pub fn exceptional_count(&self) -> usize {
        self.squares.iter().filter(|s| s.exceptional).count()
    }

    /// Field cells whose centers lie in the closed union of exceptional squares.
    pub fn exceptional_mask(&self, geom: &GridGeom) -> Mask {
        let mut m = Mask::new(geom.nx, geom.ny);
        for s in self.squares.iter().filter(|s| s.exceptional) {
            if let Some(r) = geom.cells_with_center_in(&s.square.bounds()) {
                fill(&mut m, r);
            }
        }
        m
    }

    /// Maximal number of open `Q'` containing a field cell center.
    pub fn overlap_max(&self, geom: &GridGeom) -> usize {
        overlap_counts(&self.squares, geom).into_iter().max().unwrap_or(0)
    }
}

fn overlap_counts(squares: &[CoverSquare], geom: &GridGeom) -> Vec<usize> {
    let mut counts = vec![0usize; geom.len()];
    for s in squares {
        if let Some((x0, x1, y0, y1)) = geom.cells_with_center_in_open(&s.square.prime()) {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    counts[y * geom.nx + x] += 1;
                }
            }
        }
    }
    counts
}

/// Pairs of covering squares whose open `Q'` overlap although their generations differ by more than one.
pub fn neighbor_generation_violations(squares: &[CoverSquare]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..squares.len()).collect();
    order.sort_by(|&a, &b| squares[a].square.prime().min.x.total_cmp(&squares[b].square.prime().min.x));
    let mut out = Vec::new();
    for (k, &a) in order.iter().enumerate() {
        let pa = squares[a].square.prime();
        for &b in &order[k + 1..] {
            let pb = squares[b].square.prime();
            if pb.min.x >= pa.max.x {
                break;
            }
            let (ga, gb) = (squares[a].square.generation, squares[b].square.generation);
            if ga.abs_diff(gb) > 1 && pa.overlaps_open(&pb) {
                out.push((a.min(b), a.max(b)));
            }
        }
    }
    out
}

/// Parts of `segs` inside the closed union of the marked lattice cells.
fn segments_in_mask(segs: &SegmentSet, lat: &Lattice, mask: &Mask) -> SegmentSet {
    let mut out = SegmentSet::new();
    for s in segs.iter() {
        let mut cells = BTreeSet::new();
        lat.raster(s, |c| {
            let (x, y) = (c % lat.m, c / lat.m);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                    if xx >= 0 && yy >= 0 && (xx as usize) < lat.m && (yy as usize) < lat.m {
                        cells.insert(yy as usize * lat.m + xx as usize);
                    }
                }
            }
        });
        let mut iv: Vec<(f64, f64)> = cells
            .into_iter()
            .filter(|&c| mask.data[c])
            .filter_map(|c| {
                let p = lat.center(c);
                s.clip_params(&Aabb::centered(p, 0.5 * lat.side))
            })
            .collect();
        iv.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut cur: Option<(f64, f64)> = None;
        for (a, b) in iv {
            match cur {
                Some((c0, c1)) if a <= c1 => cur = Some((c0, c1.max(b))),
                Some((c0, c1)) => {
                    if c1 > c0 {
                        out.push(Segment { a: s.at(c0), b: s.at(c1) });
                    }
                    cur = Some((a, b));
                }
                None => cur = Some((a, b)),
            }
        }
        if let Some((c0, c1)) = cur {
            if c1 > c0 {
                out.push(Segment { a: s.at(c0), b: s.at(c1) });
            }
        }
    }
    out
}

/// Whitney-type covering subordinate to the auxiliary partition.
///
/// `jumps` is the jump set used for the smallness checks. Squares failing one
/// of the jump-smallness properties are kept but flagged as exceptional.
pub fn build_whitney(
    aux: &AuxPartition,
    index: &BadSquareIndex,
    jumps: &SegmentSet,
    r: f64,
) -> Result<WhitneyCovering, KornError> {
    let grid = index.grid;
    let theta = grid.theta;
    let fan = theta.fanout() as i64;
    let big = aux.lattice_generation();
    let fine_gen = index.i_max.max(big);
    let fine = Lattice::new(&grid, fine_gen);
    let biglat = Lattice::new(&grid, big);
    let mf = fine.m;
    let mut squares: Vec<CoverSquare> = Vec::new();
    let mut covered = Mask::new(mf, mf);
    let place = |squares: &mut Vec<CoverSquare>, covered: &mut Mask, g: u32, x: i64, y: i64, origin| -> bool {
        let Some(r) = fine.block(g, x, x, y, y) else { return false };
        if any_in(covered, r) {
            return false;
        }
        fill(covered, r);
        squares.push(CoverSquare { square: grid.square(g, x, y), ix: x, iy: y, origin, exceptional: false });
        true
    };

    // layers C^i = T^i_- \ T^{i-1}_-
    let mut prev_tm: Option<(usize, Vec<bool>)> = None;
    let mut tier_squares: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for lv in &aux.levels {
        let i = lv.generation;
        let mi = grid.count(i) as usize;
        let t: Vec<bool> = (0..mi * mi)
            .map(|c| {
                let (x, y) = ((c % mi) as i64, (c / mi) as i64);
                biglat.block(i, x, x, y, y).is_some_and(|r| !any_in(&lv.e, r))
            })
            .collect();
        let shrink = |t: &[bool]| -> Vec<bool> {
            (0..mi * mi)
                .map(|c| {
                    let (x, y) = ((c % mi) as i64, (c / mi) as i64);
                    t[c] && (-1..=1).all(|dy| {
                        (-1..=1).all(|dx| {
                            let (xx, yy) = (x + dx, y + dy);
                            // neighbours outside the domain do not count against Q'' c T
                            xx < 0 || yy < 0 || xx >= mi as i64 || yy >= mi as i64 || t[yy as usize * mi + xx as usize]
                        })
                    })
                })
                .collect()
        };
        let tm = shrink(&t);
        for c in 0..mi * mi {
            if !tm[c] {
                continue;
            }
            let (x, y) = ((c % mi) as i64, (c / mi) as i64);
            if let Some((mp, ptm)) = &prev_tm {
                let (px, py) = ((x / fan) as usize, (y / fan) as usize);
                if ptm[py * mp + px] {
                    continue;
                }
            }
            if place(&mut squares, &mut covered, i, x, y, SquareOrigin::Layer) {
                tier_squares.entry(i).or_default().push(squares.len() - 1);
            }
        }
        prev_tm = Some((mi, tm));
    }

    // Whitney continuation relative to J n E^I
    let e_big = &aux.levels.last().expect("levels").e;
    let j_e = segments_in_mask(jumps, &biglat, e_big);
    for k in big + 1..=fine_gen {
        let mk = grid.count(k) as i64;
        let hits = enlarged_measures(&grid, k, 3.0, &j_e);
        for y in 0..mk {
            for x in 0..mk {
                if hits.contains_key(&(x, y)) {
                    continue;
                }
                place(&mut squares, &mut covered, k, x, y, SquareOrigin::Continuation);
            }
        }
    }
    for c in 0..mf * mf {
        if !covered.data[c] {
            let (x, y) = ((c % mf) as i64, (c / mf) as i64);
            place(&mut squares, &mut covered, fine_gen, x, y, SquareOrigin::Floor);
        }
    }

    // restore the neighbour rule by splitting coarse squares
    let mut balance_splits = 0usize;
    loop {
        let viol = neighbor_generation_violations(&squares);
        if viol.is_empty() {
            break;
        }
        let mut split: BTreeSet<usize> = BTreeSet::new();
        for (a, b) in viol {
            let coarse = if squares[a].square.generation < squares[b].square.generation { a } else { b };
            split.insert(coarse);
        }
        let mut next = Vec::with_capacity(squares.len() + split.len() * 4);
        for (k, s) in squares.into_iter().enumerate() {
            if !split.contains(&k) {
                next.push(s);
                continue;
            }
            let g = s.square.generation + 1;
            for dy in 0..fan {
                for dx in 0..fan {
                    let (x, y) = (s.ix * fan + dx, s.iy * fan + dy);
                    next.push(CoverSquare {
                        square: grid.square(g, x, y),
                        ix: x,
                        iy: y,
                        origin: SquareOrigin::Balanced,
                        exceptional: false,
                    });
                }
            }
        }
        balance_splits += split.len();
        squares = next;
        if squares.iter().any(|s| s.square.generation > fine_gen) {
            return Err(KornError::CoveringInvariant("balancing went below the grid floor".into()));
        }
    }
    if balance_splits > 0 {
        log::info!("covering: {balance_splits} squares split to restore the neighbour rule");
    }

    // owner map and tiling check
    let mut owner = vec![usize::MAX; mf * mf];
    let mut tiles = true;
    for (k, s) in squares.iter().enumerate() {
        let r = fine.block(s.square.generation, s.ix, s.ix, s.iy, s.iy).expect("square inside the domain");
        for y in r.2..=r.3 {
            for x in r.0..=r.1 {
                let c = y * mf + x;
                tiles &= owner[c] == usize::MAX;
                owner[c] = k;
            }
        }
    }
    tiles &= owner.iter().all(|o| *o != usize::MAX);
    if !tiles {
        return Err(KornError::CoveringInvariant("covering squares do not tile the domain".into()));
    }

    // Z from the isolated parts
    let mut z_mask = Mask::new(mf, mf);
    let mut z = Vec::new();
    let mut z_ratio: f64 = 0.0;
    for lv in &aux.levels {
        if lv.isolated.is_empty() {
            continue;
        }
        let i = lv.generation;
        let thr = theta.powi(2) * grid.halfside(i);
        let meas = enlarged_measures(&grid, i, 1.5, jumps);
        let mut y_mask = Mask::new(mf, mf);
        for &k in tier_squares.get(&i).map(Vec::as_slice).unwrap_or(&[]) {
            let s = &squares[k];
            let inside = biglat
                .block(i, s.ix - 1, s.ix + 1, s.iy - 1, s.iy + 1)
                .is_some_and(|r| all_in(&lv.isolated, r));
            if inside && meas.get(&(s.ix, s.iy)).copied().unwrap_or(0.0) > thr {
                if let Some(r) = fine.block(i, s.ix - 1, s.ix + 1, s.iy - 1, s.iy + 1) {
                    fill(&mut y_mask, r);
                }
            }
        }
        let y_mask = saturate(&y_mask);
        let (labels, cnt) = label_components(&y_mask, None, Connectivity::Eight);
        let lim = isolation_limit(&grid, i, r);
        for g in groups(&labels, cnt) {
            let cells = to_xy(&g, mf);
            let diameter = cells_diameter(&cells, fine.side);
            z_ratio = z_ratio.max(diameter / lim);
            let comp = mask_of(&g, mf);
            let boundary_squares = squares
                .iter()
                .enumerate()
                .filter(|(_, s)| s.square.generation == i)
                .filter_map(|(k, s)| {
                    let r = fine.block(i, s.ix, s.ix, s.iy, s.iy)?;
                    (all_in(&comp, r) && !all_in(&comp, grow(r, mf))).then_some(k)
                })
                .collect();
            z.push(ZComponent { generation: i, cells, diameter, boundary_squares });
        }
        z_mask.union_with(&y_mask);
    }

    // jump smallness, flagged not fatal
    let mut checks = CoveringChecks { tiles, balance_splits, z_diameter_ratio: z_ratio, ..Default::default() };
    let gens: BTreeSet<u32> = squares.iter().map(|s| s.square.generation).collect();
    let meas: BTreeMap<u32, BTreeMap<(i64, i64), f64>> =
        gens.iter().map(|&g| (g, enlarged_measures(&grid, g, 1.5, jumps))).collect();
    let bad_jump: Vec<bool> = squares
        .iter()
        .map(|s| {
            let g = s.square.generation;
            let v = meas[&g].get(&(s.ix, s.iy)).copied().unwrap_or(0.0);
            v > theta.powi(2) * s.square.halfside * (1.0 + 1e-9)
        })
        .collect();
    let mut by_x: Vec<usize> = (0..squares.len()).collect();
    by_x.sort_by(|&a, &b| squares[a].square.double_prime().min.x.total_cmp(&squares[b].square.double_prime().min.x));
    let mut next_to_other = vec![false; squares.len()];
    for (k, &a) in by_x.iter().enumerate() {
        let da = squares[a].square.double_prime();
        for &b in &by_x[k + 1..] {
            let db = squares[b].square.double_prime();
            if db.min.x >= da.max.x {
                break;
            }
            if squares[a].square.generation != squares[b].square.generation && da.overlaps_open(&db) {
                next_to_other[a] = true;
                next_to_other[b] = true;
            }
        }
    }
    for (k, s) in squares.iter_mut().enumerate() {
        let g = s.square.generation;
        let r = fine.block(g, s.ix - 1, s.ix + 1, s.iy - 1, s.iy + 1).expect("inside");
        let in_z = all_in(&z_mask, r);
        if bad_jump[k] && !in_z {
            checks.jump_violations += 1;
            s.exceptional = true;
        }
        if bad_jump[k] && next_to_other[k] {
            checks.neighbor_jump_violations += 1;
            s.exceptional = true;
        }
        if g > big && meas[&g].contains_key(&(s.ix, s.iy)) {
            checks.fine_touching += 1;
            s.exceptional = true;
        }
    }
    let cov = WhitneyCovering { grid, fine_generation: fine_gen, squares, owner, z, z_mask, checks };
    let max_overlap = cov.overlap_max(&aux.geom);
    if max_overlap > 12 {
        return Err(KornError::CoveringInvariant(format!("{max_overlap} enlarged squares overlap at one cell")));
    }
    let mut cov = cov;
    cov.checks.max_overlap = max_overlap;
    Ok(cov)
}

/// Estimated John constant of a connected cell region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JohnEstimate {
    pub center: Point,
    pub center_cell: usize,
    pub rho: f64,
    /// Cell centers from the worst cell to the center.
    pub witness_worst_path: Vec<Point>,
    /// The same path as cell indices.
    pub worst_cells: Vec<usize>,
    /// Cell on the worst path where the ratio is attained.
    pub bottleneck: usize,
    pub area: f64,
    pub diameter: f64,
}

impl JohnEstimate {
    /// `|Omega| >= |B_1| (2 rho)^-2 d(Omega)^2`.
    pub fn plump(&self) -> bool {
        self.area >= std::f64::consts::PI * (2.0 * self.rho).powi(-2) * self.diameter * self.diameter * (1.0 - 1e-9)
    }
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl Ord for HeapItem {
    fn cmp(&self, o: &Self) -> Ordering {
        o.0.total_cmp(&self.0).then(o.1.cmp(&self.1))
    }
}

/// Distance to the region boundary per cell (`EDT + h/2`, infinite outside).
fn boundary_distance(region: &Mask, cuts: Option<&EdgeCuts>, h: f64) -> Vec<f64> {
    let (nx, ny) = (region.nx, region.ny);
    let boundary = Mask::from_fn(nx, ny, |x, y| {
        if !region.get(x, y) {
            return false;
        }
        let out = |xx: i64, yy: i64| {
            xx < 0 || yy < 0 || xx >= nx as i64 || yy >= ny as i64 || !region.get(xx as usize, yy as usize)
        };
        let (xi, yi) = (x as i64, y as i64);
        out(xi - 1, yi) || out(xi + 1, yi) || out(xi, yi - 1) || out(xi, yi + 1) || cuts.is_some_and(|c| c.touches(x, y))
    });
    let (d2, _) = edt_with_sites(&boundary);
    d2.iter()
        .enumerate()
        .map(|(i, d)| if region.data[i] { (d.sqrt() + 0.5) * h } else { f64::INFINITY })
        .collect()
}

/// Cell-graph moves allowed inside the region: 4-neighbour steps not crossing a
/// cut, and diagonal steps whose two L-shaped detours are both open.
fn moves(region: &Mask, cuts: Option<&EdgeCuts>, c: usize) -> Vec<(usize, f64)> {
    let (nx, ny) = (region.nx as i64, region.ny as i64);
    let (x, y) = ((c % region.nx) as i64, (c / region.nx) as i64);
    let ok4 = |x: i64, y: i64, dx: i64, dy: i64| {
        let (xx, yy) = (x + dx, y + dy);
        xx >= 0
            && yy >= 0
            && xx < nx
            && yy < ny
            && region.get(xx as usize, yy as usize)
            && !cuts.is_some_and(|k| k.blocked(x as usize, y as usize, dx, dy))
    };
    let mut out = Vec::with_capacity(8);
    for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
        if ok4(x, y, dx, dy) {
            out.push(((y + dy) as usize * region.nx + (x + dx) as usize, 1.0));
        }
    }
    for (dx, dy) in [(1, 1), (1, -1), (-1, 1), (-1, -1)] {
        let via_x = ok4(x, y, dx, 0) && ok4(x + dx, y, 0, dy);
        let via_y = ok4(x, y, 0, dy) && ok4(x, y + dy, dx, 0);
        if via_x && via_y {
            out.push(((y + dy) as usize * region.nx + (x + dx) as usize, std::f64::consts::SQRT_2));
        }
    }
    out
}

/// John constant estimate: the center is the deepest cell, paths come from a
/// shortest-path tree under the cost `ds / dist`, and `rho` is the largest
/// `(arclength from x) / dist` seen along any tree path.
pub fn john_constant(geom: &GridGeom, region: &Mask, cuts: Option<&EdgeCuts>) -> Result<JohnEstimate, KornError> {
    let (_, count) = label_components(region, cuts, Connectivity::Four);
    if count != 1 {
        return Err(KornError::InvalidArgument(format!("region has {count} components, expected one")));
    }
    let h = geom.h;
    let dist = boundary_distance(region, cuts, h);
    let cells: Vec<usize> = region.indices().collect();
    let center_cell = cells
        .iter()
        .copied()
        .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
        .expect("non-empty region");
    let n = region.data.len();
    let mut cost = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut arc = vec![0.0; n];
    let mut heap = BinaryHeap::new();
    cost[center_cell] = 0.0;
    heap.push(HeapItem(0.0, center_cell));
    while let Some(HeapItem(c, i)) = heap.pop() {
        if c > cost[i] {
            continue;
        }
        for (j, step) in moves(region, cuts, i) {
            let w = step * h * 2.0 / (dist[i] + dist[j]);
            if c + w < cost[j] {
                cost[j] = c + w;
                parent[j] = i;
                arc[j] = arc[i] + step * h;
                heap.push(HeapItem(c + w, j));
            }
        }
    }
    let worst: Vec<(f64, usize)> = cells
        .par_iter()
        .map(|&x| {
            let mut best = (0.0, x);
            let mut y = x;
            loop {
                let t = arc[x] - arc[y];
                let ratio = t / dist[y];
                if ratio > best.0 {
                    best = (ratio, y);
                }
                if parent[y] == usize::MAX {
                    break;
                }
                y = parent[y];
            }
            best
        })
        .collect();
    let (k, &(rho, bottleneck)) = worst
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .0.total_cmp(&b.1 .0).then(b.0.cmp(&a.0)))
        .expect("non-empty region");
    let mut path = Vec::new();
    let mut worst_cells = Vec::new();
    let mut y = cells[k];
    loop {
        path.push(geom.center_of(y));
        worst_cells.push(y);
        if parent[y] == usize::MAX {
            break;
        }
        y = parent[y];
    }
    let pts: Vec<(i64, i64)> = cells.iter().map(|&c| ((c % geom.nx) as i64, (c / geom.nx) as i64)).collect();
    Ok(JohnEstimate {
        center: geom.center_of(center_cell),
        center_cell,
        rho: rho.max(1.0),
        witness_worst_path: path,
        worst_cells,
        bottleneck,
        area: cells.len() as f64 * geom.cell_area(),
        diameter: cells_diameter(&pts, h),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JohnRefinement {
    pub labels: Vec<i32>,
    pub count: usize,
    /// Cells of pieces that became too small before meeting the target.
    pub rest: Mask,
    pub added_boundary: f64,
    pub cut_segments: SegmentSet,
    pub rhos: Vec<f64>,
}

/// Maximal run of piece cells through `(x, y)` along one axis without crossing a cut.
fn chord(piece: &Mask, cuts: &EdgeCuts, x: usize, y: usize, horizontal: bool) -> (usize, usize) {
    if horizontal {
        let (mut a, mut b) = (x, x);
        while a > 0 && piece.get(a - 1, y) && !cuts.cut_right(a - 1, y) {
            a -= 1;
        }
        while b + 1 < piece.nx && piece.get(b + 1, y) && !cuts.cut_right(b, y) {
            b += 1;
        }
        (a, b)
    } else {
        let (mut a, mut b) = (y, y);
        while a > 0 && piece.get(x, a - 1) && !cuts.cut_up(x, a - 1) {
            a -= 1;
        }
        while b + 1 < piece.ny && piece.get(x, b + 1) && !cuts.cut_up(x, b) {
            b += 1;
        }
        (a, b)
    }
}

/// Tries to split `piece` along the chord through `(x, y)`; returns the new
/// cuts, the cut segment and its length if the piece falls apart.
fn try_chord(
    geom: &GridGeom,
    piece: &Mask,
    cuts: &EdgeCuts,
    x: usize,
    y: usize,
    horizontal: bool,
) -> Option<(EdgeCuts, Segment, f64)> {
    let (a, b) = chord(piece, cuts, x, y, horizontal);
    let mut c = cuts.clone();
    let h = geom.h;
    let seg;
    if horizontal {
        let yy = if y + 1 < piece.ny { y } else { y.checked_sub(1)? };
        for xx in a..=b {
            c.vert[yy * c.nx + xx] = true;
        }
        let ly = geom.origin.y + (yy + 1) as f64 * h;
        seg = Segment { a: Point::new(geom.origin.x + a as f64 * h, ly), b: Point::new(geom.origin.x + (b + 1) as f64 * h, ly) };
    } else {
        let xx = if x + 1 < piece.nx { x } else { x.checked_sub(1)? };
        for yy in a..=b {
            c.horiz[yy * (c.nx - 1) + xx] = true;
        }
        let lx = geom.origin.x + (xx + 1) as f64 * h;
        seg = Segment { a: Point::new(lx, geom.origin.y + a as f64 * h), b: Point::new(lx, geom.origin.y + (b + 1) as f64 * h) };
    }
    let (_, n) = label_components(piece, Some(&c), Connectivity::Four);
    (n >= 2).then(|| (c, seg, (b - a + 1) as f64 * h))
}

type Split = (EdgeCuts, Segment, f64, Vec<Vec<usize>>);

/// Shortest axis chord through a cell of the worst path that splits the piece
/// without leaving a sliver (every part keeps at least `len^2 / 4` cells).
fn best_split(geom: &GridGeom, piece: &Mask, cuts: &EdgeCuts, path: &[usize]) -> Option<Split> {
    let stride = (path.len() / 64).max(1);
    let mut best: Option<(usize, usize, Split)> = None;
    for &c in path.iter().step_by(stride) {
        let (x, y) = geom.xy(c);
        for horizontal in [true, false] {
            let (a, b) = chord(piece, cuts, x, y, horizontal);
            let cells = b - a + 1;
            if best.as_ref().is_some_and(|(l, _, _)| cells > *l) {
                continue;
            }
            let Some((nc, seg, len)) = try_chord(geom, piece, cuts, x, y, horizontal) else { continue };
            let (pl, pc) = label_components(piece, Some(&nc), Connectivity::Four);
            let parts = groups(&pl, pc);
            let smallest = parts.iter().map(Vec::len).min().unwrap_or(0);
            if smallest * 4 < cells * cells {
                continue;
            }
            let better = match &best {
                None => true,
                Some((l, s, _)) => cells < *l || (cells == *l && smallest > *s),
            };
            if better {
                best = Some((cells, smallest, (nc, seg, len, parts)));
            }
        }
    }
    best.map(|b| b.2)
}

/// Recursively cuts pieces whose John constant exceeds `rho_target` along the
/// shorter axis chord through the worst bottleneck.
pub fn john_refine_labels(
    geom: &GridGeom,
    labels: &[i32],
    cuts: &EdgeCuts,
    rho_target: f64,
    eps_area: f64,
) -> Result<JohnRefinement, KornError> {
    if rho_target < 2.0 || eps_area <= 0.0 {
        return Err(KornError::InvalidArgument("rho_target must be >= 2 and eps_area positive".into()));
    }
    const MAX_DEPTH: usize = 12;
    let (nx, ny) = (geom.nx, geom.ny);
    let (split, count) = split_labels(labels, nx, ny, Some(cuts));
    let mut cuts = cuts.clone();
    let mut queue: Vec<(Mask, usize)> = groups(&split, count)
        .into_iter()
        .map(|g| (Mask { nx, ny, data: { let mut d = vec![false; nx * ny]; g.iter().for_each(|&c| d[c] = true); d } }, 0))
        .collect();
    let mut done: Vec<(Mask, f64, bool)> = Vec::new();
    let mut cut_segments = SegmentSet::new();
    let mut added = 0.0;
    while let Some((piece, depth)) = queue.pop() {
        let est = john_constant(geom, &piece, Some(&cuts))?;
        let area = est.area;
        if est.rho <= rho_target {
            done.push((piece, est.rho, false));
            continue;
        }
        if area < eps_area {
            done.push((piece, est.rho, true));
            continue;
        }
        if depth >= MAX_DEPTH {
            done.push((piece, est.rho, false));
            continue;
        }
        let mut applied = false;
        if let Some((c, seg, len, parts)) = best_split(geom, &piece, &cuts, &est.worst_cells) {
            cuts = c;
            cut_segments.push(seg);
            added += len;
            for g in parts {
                let mut m = Mask::new(nx, ny);
                g.iter().for_each(|&i| m.data[i] = true);
                queue.push((m, depth + 1));
            }
            applied = true;
        }
        if !applied {
            done.push((piece, est.rho, false));
        }
    }
    done.sort_by_key(|(m, _, _)| m.data.iter().position(|b| *b));
    let mut out = vec![-1i32; nx * ny];
    let mut rest = Mask::new(nx, ny);
    let mut rhos = Vec::new();
    for (k, (m, rho, small)) in done.iter().enumerate() {
        for i in m.indices() {
            out[i] = k as i32;
            if *small {
                rest.data[i] = true;
            }
        }
        rhos.push(*rho);
    }
    Ok(JohnRefinement { labels: out, count: done.len(), rest, added_boundary: added, cut_segments, rhos })
}

pub fn john_refine(aux: &AuxPartition, rho_target: f64, eps_area: f64) -> Result<JohnRefinement, KornError> {
    john_refine_labels(&aux.geom, &aux.labels, &aux.cuts(), rho_target, eps_area)
}
