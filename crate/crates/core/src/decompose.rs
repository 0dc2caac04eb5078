//! Top-level pipelines: the iterated piecewise Korn decomposition, the
//! level-set (coarea) partition and the small-jump truncation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covering::{default_r, floor_generation, regularize_jump_density, Regularization};
use crate::field::{lp_norm, strain, strain_with_cuts, vector_magnitudes, DisplacementField};
use crate::geometry::{measure_in_union, Aabb, Point, Theta};
use crate::grid::{split_labels, EdgeCuts, GridGeom, Mask};
use crate::partition::{aux_for_field, build_whitney, john_refine, AuxConfig, SquareOrigin, WhitneyCovering};
use crate::rigid::{fit_cells, residual_lp, trim_cells, RigidMotion};
use crate::KornError;

/// Intermediate exponent used by the iteration, `1 + p/2`.
pub fn p_prime(p: f64) -> f64 {
    1.0 + 0.5 * p
}

/// Decay exponent `(1 - r)(2 - p)/(3p + 2)` of the iteration.
pub fn lambda(p: f64, r: f64) -> f64 {
    (1.0 - r) * (2.0 - p) / (3.0 * p + 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecomposeConfig {
    pub theta: Theta,
    pub p: f64,
    /// Integrability of the jump part; `None` is the quadratic case.
    pub q: Option<f64>,
    pub r_override: Option<f64>,
    /// Trim budget factor for per-piece fits.
    pub c_e: f64,
    pub rho_john: f64,
    /// Stop once the exceptional area drops to this value; `None` derives it.
    pub epsilon: Option<f64>,
    pub max_iters: usize,
}

impl DecomposeConfig {
    pub fn new(theta: Theta, p: f64) -> Self {
        DecomposeConfig { theta, p, q: None, r_override: None, c_e: 1.0, rho_john: 8.0, epsilon: None, max_iters: 12 }
    }

    pub fn validate(&self) -> Result<(), KornError> {
        if !(1.0..2.0).contains(&self.p) {
            return Err(KornError::Config(format!("p = {} must lie in [1, 2)", self.p)));
        }
        if let Some(q) = self.q {
            if !(q > self.p) {
                return Err(KornError::Config(format!("q = {q} must exceed p = {}", self.p)));
            }
        }
        if let Some(r) = self.r_override {
            if !(r > 0.0 && r < 1.0) {
                return Err(KornError::Config(format!("r = {r} must lie in (0, 1)")));
            }
        }
        if let Some(e) = self.epsilon {
            if !(e >= 0.0) {
                return Err(KornError::Config(format!("epsilon = {e} must be non-negative")));
            }
        }
        if !(self.c_e >= 0.0) || !(self.rho_john >= 2.0) {
            return Err(KornError::Config("c_e must be non-negative and rho_john at least 2".into()));
        }
        Ok(())
    }

    pub fn r(&self) -> f64 {
        if let Some(r) = self.r_override {
            return r;
        }
        match self.q {
            Some(q) if q.is_finite() => (q - self.p) / (6.0 * q * q),
            _ => default_r(self.p),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SquareKind {
    /// One trimmed motion on the whole square.
    Single,
    /// Auxiliary partition with one motion per piece.
    Partitioned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SingleReason {
    ShortJump,
    UncoveredJumpShort,
    CoarseGrid,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SquareDecomposition {
    pub kind: SquareKind,
    pub reason: Option<SingleReason>,
    pub labels: Vec<i32>,
    pub count: usize,
    pub motions: Vec<RigidMotion>,
    /// Trimmed cells and the John rest set.
    pub e: Mask,
    pub rest: Mask,
    pub jump_length: f64,
    /// Jump length outside the enlarged covering squares.
    pub uncovered_jump: f64,
    /// `|E| / (mu theta^2 H^1(J))`, zero when there is no jump.
    pub e_ratio: f64,
    pub boundary_length: f64,
    /// No generation up to the grid floor met the final-generation rule.
    pub truncated_generation: bool,
    #[serde(skip)]
    pub covering: Option<WhitneyCovering>,
}

fn cells_area(m: &Mask, h: f64) -> f64 {
    m.count() as f64 * h * h
}

/// Motion for a cell list: rigid fit from three cells on, mean otherwise.
fn motion_for(g: &GridGeom, values: &[[f64; 2]], cells: &[usize]) -> RigidMotion {
    if cells.len() >= 3 {
        if let Ok(m) = fit_cells(g, values, cells) {
            return m;
        }
    }
    let k = cells.len().max(1) as f64;
    let s = cells.iter().fold([0.0, 0.0], |a, &i| [a[0] + values[i][0], a[1] + values[i][1]]);
    RigidMotion::translation([s[0] / k, s[1] / k])
}

fn groups(labels: &[i32], count: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); count];
    for (i, &l) in labels.iter().enumerate() {
        if l >= 0 {
            out[l as usize].push(i);
        }
    }
    out
}

/// Length of jump-cut edges with both neighbours in the same piece.
fn internal_cut_length(labels: &[i32], count: usize, cuts: &EdgeCuts, h: f64) -> Vec<f64> {
    let (nx, ny) = (cuts.nx, cuts.ny);
    let mut out = vec![0.0; count];
    for y in 0..ny {
        for x in 0..nx {
            let l = labels[y * nx + x];
            if l < 0 {
                continue;
            }
            if x + 1 < nx && cuts.cut_right(x, y) && labels[y * nx + x + 1] == l {
                out[l as usize] += h;
            }
            if y + 1 < ny && cuts.cut_up(x, y) && labels[(y + 1) * nx + x] == l {
                out[l as usize] += h;
            }
        }
    }
    out
}

fn single(u: &DisplacementField, cfg: &DecomposeConfig, reason: SingleReason) -> Result<SquareDecomposition, KornError> {
    let g = u.geom();
    let cells: Vec<usize> = (0..g.len()).collect();
    let area = 4.0 * u.mu * u.mu;
    let jl = u.jumps.total_length();
    let theta = cfg.theta.value();
    let budget = (cfg.c_e * u.mu * theta * theta * jl).min(0.5 * area);
    let (motion, inl) = trim_cells(&g, &u.values, &cells, budget)?;
    let mut e = Mask::full(g.nx, g.ny);
    for &i in &inl {
        e.data[i] = false;
    }
    let e_ratio = if jl > 0.0 { cells_area(&e, u.h) / (u.mu * theta * theta * jl) } else { 0.0 };
    Ok(SquareDecomposition {
        kind: SquareKind::Single,
        reason: Some(reason),
        labels: vec![0; g.len()],
        count: 1,
        motions: vec![motion],
        rest: Mask::new(g.nx, g.ny),
        e,
        jump_length: jl,
        uncovered_jump: jl,
        e_ratio,
        boundary_length: 0.0,
        truncated_generation: false,
        covering: None,
    })
}

/// Decomposition primitive on one square: either a single trimmed motion or
/// the auxiliary partition (refined to John pieces) with per-piece fits.
pub fn decompose_square(u: &DisplacementField, cfg: &DecomposeConfig) -> Result<SquareDecomposition, KornError> {
    cfg.validate()?;
    let theta = cfg.theta.value();
    let jl = u.jumps.total_length();
    let cap = 2.0 * std::f64::consts::SQRT_2 * u.mu / (theta * theta);
    if jl > cap * (1.0 + 1e-9) {
        return Err(KornError::NeedsRegularization(format!("jump length {jl:.4} exceeds {cap:.4}")));
    }
    let small = u.mu * theta * theta;
    if jl < small {
        return single(u, cfg, SingleReason::ShortJump);
    }
    let r = cfg.r();
    if floor_generation(u.n, cfg.theta) < 2 {
        return single(u, cfg, SingleReason::CoarseGrid);
    }
    let (index, aux) = aux_for_field(u, &AuxConfig::new(cfg.theta, r))?;
    let cov = build_whitney(&aux, &index, &u.jumps, r)?;
    let boxes: Vec<Aabb> = cov
        .squares
        .iter()
        .filter(|s| s.origin != SquareOrigin::Floor && !s.exceptional)
        .map(|s| s.square.prime())
        .collect();
    let uncovered = (jl - measure_in_union(&u.jumps, &boxes)).max(0.0);
    if uncovered < small {
        let mut out = single(u, cfg, SingleReason::UncoveredJumpShort)?;
        out.uncovered_jump = uncovered;
        out.truncated_generation = aux.final_generation.truncated;
        return Ok(out);
    }
    let g = u.geom();
    let area = 4.0 * u.mu * u.mu;
    let john = john_refine(&aux, cfg.rho_john, (1e-3 * area).max(4.0 * u.h * u.h))?;
    let jcuts = u.cuts();
    let inner = internal_cut_length(&john.labels, john.count, &jcuts, u.h);
    let pieces = groups(&john.labels, john.count);
    let fits: Vec<(RigidMotion, Vec<usize>)> = pieces
        .par_iter()
        .zip(inner.par_iter())
        .map(|(cells, &jin)| {
            if cells.len() < 3 {
                return Ok((motion_for(&g, &u.values, cells), Vec::new()));
            }
            let parea = cells.len() as f64 * u.h * u.h;
            let budget = (cfg.c_e * u.mu * theta * theta * jin).min(0.5 * parea);
            let (m, inl) = trim_cells(&g, &u.values, cells, budget)?;
            let keep: std::collections::HashSet<usize> = inl.into_iter().collect();
            Ok((m, cells.iter().copied().filter(|c| !keep.contains(c)).collect()))
        })
        .collect::<Result<_, KornError>>()?;
    let mut e = john.rest.clone();
    let mut motions = Vec::with_capacity(fits.len());
    for (m, trimmed) in fits {
        motions.push(m);
        for c in trimmed {
            e.data[c] = true;
        }
    }
    let e_ratio = cells_area(&e, u.h) / (small * jl);
    Ok(SquareDecomposition {
        kind: SquareKind::Partitioned,
        reason: None,
        labels: john.labels,
        count: john.count,
        motions,
        rest: john.rest,
        e,
        jump_length: jl,
        uncovered_jump: uncovered,
        e_ratio,
        boundary_length: aux.boundary_length + john.added_boundary,
        truncated_generation: aux.final_generation.truncated,
        covering: Some(cov),
    })
}

/// Default stopping area: `1e-3 |Q|`, lowered to the largest area on which
/// `||grad u||_p^p` stays below `mu^(2-p) ||e(u)||_2^p` for every cell set.
pub fn default_epsilon(u: &DisplacementField, p: f64) -> f64 {
    let base = 1e-3 * 4.0 * u.mu * u.mu;
    let s = strain(u);
    let e2 = lp_norm(&s.strain_frobenius(), 2.0, Some(&s.valid), u.h).value;
    if e2 <= 0.0 {
        return base;
    }
    let bound = u.mu.powf(2.0 - p) * e2.powf(p);
    let mut g: Vec<f64> = s.grad_frobenius().iter().zip(&s.valid.data).filter(|(_, v)| **v).map(|(x, _)| x.powf(p)).collect();
    g.sort_by(|a, b| b.total_cmp(a));
    let ca = u.h * u.h;
    let mut acc = 0.0;
    let mut k = 0usize;
    for x in g {
        if acc + x * ca > bound {
            break;
        }
        acc += x * ca;
        k += 1;
    }
    // every set of area <= 4 eps must satisfy the bound
    base.min(0.25 * k as f64 * ca)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub generation: u32,
    pub e_area: f64,
    pub squares: usize,
    pub partitioned: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionLedger {
    pub p: f64,
    pub p_prime: f64,
    pub r: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub jump_length: f64,
    /// `sum_j H^1(boundary of P_j)`, the domain boundary included.
    pub boundary_sum: f64,
    /// `boundary_sum / (H^1(J) + H^1(boundary of Q))`.
    pub boundary_ratio: f64,
    pub e_l2: f64,
    pub v_sup: f64,
    pub grad_v_p: f64,
    pub grad_v_p_prime: f64,
    /// `||grad v||_p / ||e(u)||_2`; zero when both vanish.
    pub korn_ratio: f64,
    pub korn_ratio_prime: f64,
    /// `||v||_inf / ||e(u)||_2`.
    pub sup_ratio: f64,
    pub exceptional_area: f64,
    pub iterations: Vec<IterationRecord>,
    pub reached_floor: bool,
    pub coarea_pieces: usize,
    pub coarea_added_perimeter: f64,
    pub rho: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PiecewiseDecomposition {
    pub labels: Vec<i32>,
    pub count: usize,
    pub motions: Vec<RigidMotion>,
    pub v: DisplacementField,
    /// Final exceptional set.
    pub e: Mask,
    pub first_kind: SquareKind,
    /// Set when the top-level square's final generation hit the grid floor.
    pub truncated_generation: bool,
    pub ledger: DecompositionLedger,
    #[serde(skip)]
    pub covering: Option<WhitneyCovering>,
}

impl PiecewiseDecomposition {
    pub fn piece_areas(&self) -> Vec<f64> {
        let mut a = vec![0.0; self.count];
        for &l in &self.labels {
            a[l as usize] += self.v.h * self.v.h;
        }
        a
    }

    /// `v + sum_j a_j chi_{P_j}`.
    pub fn reconstruct(&self) -> Vec<[f64; 2]> {
        let g = self.v.geom();
        (0..g.len())
            .map(|i| {
                let a = self.motions[self.labels[i] as usize].eval(g.center_of(i));
                [self.v.values[i][0] + a[0], self.v.values[i][1] + a[1]]
            })
            .collect()
    }
}

/// Relabels to `0..count` in order of first appearance.
fn canonical(labels: &[i32]) -> (Vec<i32>, Vec<i32>) {
    let mut map: BTreeMap<i32, i32> = BTreeMap::new();
    let mut order = Vec::new();
    let out = labels
        .iter()
        .map(|&l| {
            *map.entry(l).or_insert_with(|| {
                order.push(l);
                order.len() as i32 - 1
            })
        })
        .collect();
    (out, order)
}

struct Dsu(Vec<usize>);

impl Dsu {
    fn find(&mut self, mut a: usize) -> usize {
        while self.0[a] != a {
            self.0[a] = self.0[self.0[a]];
            a = self.0[a];
        }
        a
    }
}

/// Adjacent label pairs across edges not cut by the jump set.
fn adjacency(labels: &[i32], nx: usize, ny: usize, cuts: &EdgeCuts) -> Vec<(usize, usize)> {
    let mut pairs = std::collections::BTreeSet::new();
    for y in 0..ny {
        for x in 0..nx {
            let l = labels[y * nx + x];
            if x + 1 < nx && !cuts.cut_right(x, y) {
                let m = labels[y * nx + x + 1];
                if m != l {
                    pairs.insert((l.min(m) as usize, l.max(m) as usize));
                }
            }
            if y + 1 < ny && !cuts.cut_up(x, y) {
                let m = labels[(y + 1) * nx + x];
                if m != l {
                    pairs.insert((l.min(m) as usize, l.max(m) as usize));
                }
            }
        }
    }
    pairs.into_iter().collect()
}

fn bbox(g: &GridGeom, cells: &[usize]) -> Aabb {
    let mut b = Aabb { min: Point::new(f64::INFINITY, f64::INFINITY), max: Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY) };
    for &c in cells {
        let p = g.center_of(c);
        b.min.x = b.min.x.min(p.x);
        b.min.y = b.min.y.min(p.y);
        b.max.x = b.max.x.max(p.x);
        b.max.y = b.max.y.max(p.y);
    }
    b
}

/// Largest `|a(x)|` over a box, attained at a corner.
fn motion_sup_on(a: &RigidMotion, b: &Aabb) -> f64 {
    [b.min, Point::new(b.max.x, b.min.y), Point::new(b.min.x, b.max.y), b.max]
        .iter()
        .map(|&p| {
            let v = a.eval(p);
            v[0].hypot(v[1])
        })
        .fold(0.0, f64::max)
}

/// Merges adjacent pieces whose motions agree on both pieces up to `tol`.
fn coalesce(g: &GridGeom, labels: &mut [i32], motions: &mut Vec<RigidMotion>, cuts: &EdgeCuts, tol: f64) {
    let count = motions.len();
    let cells = groups(labels, count);
    let boxes: Vec<Aabb> = cells.iter().map(|c| bbox(g, c)).collect();
    let mut dsu = Dsu((0..count).collect());
    let mut root_box = boxes.clone();
    for (a, b) in adjacency(labels, g.nx, g.ny, cuts) {
        let (ra, rb) = (dsu.find(a), dsu.find(b));
        if ra == rb {
            continue;
        }
        let ba = &root_box[ra];
        let bb = &root_box[rb];
        let u = Aabb {
            min: Point::new(ba.min.x.min(bb.min.x), ba.min.y.min(bb.min.y)),
            max: Point::new(ba.max.x.max(bb.max.x), ba.max.y.max(bb.max.y)),
        };
        if motion_sup_on(&motions[ra].sub(&motions[rb]), &u) <= tol {
            let (keep, drop) = (ra.min(rb), ra.max(rb));
            dsu.0[drop] = keep;
            root_box[keep] = u;
        }
    }
    let roots: Vec<i32> = (0..count).map(|l| dsu.find(l) as i32).collect();
    for l in labels.iter_mut() {
        *l = roots[*l as usize];
    }
}

/// Absorbs pieces that lie mostly in the exceptional set, and slivers too
/// small for a rigid fit, into the adjacent piece whose motion fits them best.
fn absorb_exceptional(u: &DisplacementField, labels: &mut [i32], motions: &[RigidMotion], e: &Mask, cuts: &EdgeCuts) {
    let g = u.geom();
    let count = motions.len();
    let cells = groups(labels, count);
    let adj = adjacency(labels, g.nx, g.ny, cuts);
    let mut nbrs = vec![Vec::new(); count];
    for &(a, b) in &adj {
        nbrs[a].push(b);
        nbrs[b].push(a);
    }
    let mut dsu = Dsu((0..count).collect());
    for l in 0..count {
        let c = &cells[l];
        if c.is_empty() {
            continue;
        }
        let outside = c.iter().filter(|&&i| !e.data[i]).count();
        if 2 * outside >= c.len() && c.len() >= 3 {
            continue;
        }
        let mut cands: Vec<(f64, usize)> = Vec::new();
        for &nb in &nbrs[l] {
            let r = dsu.find(nb);
            if r == dsu.find(l) || cands.iter().any(|c| c.1 == r) {
                continue;
            }
            cands.push((residual_lp(&g, &u.values, c, &motions[r], 2.0), r));
        }
        // near-ties go to the lowest label so round-off cannot decide
        let lo = cands.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
        let best = cands.iter().filter(|c| c.0 <= lo * (1.0 + 1e-9) + 1e-12).map(|c| c.1).min();
        if let Some(r) = best {
            let rl = dsu.find(l);
            dsu.0[rl] = r;
        }
    }
    let roots: Vec<i32> = (0..count).map(|l| dsu.find(l) as i32).collect();
    for l in labels.iter_mut() {
        *l = roots[*l as usize];
    }
}

/// Square-lattice cell size at generation `k`, if it divides the grid.
fn block_size(n: usize, theta: Theta, k: u32) -> Option<usize> {
    let d = (theta.fanout() as usize).checked_pow(k)?;
    (n % d == 0).then(|| n / d)
}

/// Iterated decomposition: a primitive on the whole square, then on the
/// sub-squares of each generation that still meet the exceptional set,
/// followed by cleanup and a coarea split of the remainder.
pub fn iterate(u: &DisplacementField, cfg: &DecomposeConfig) -> Result<PiecewiseDecomposition, KornError> {
    cfg.validate()?;
    let g = u.geom();
    let h = u.h;
    let eps = cfg.epsilon.unwrap_or_else(|| default_epsilon(u, cfg.p));
    let first = decompose_square(u, cfg)?;
    let first_kind = first.kind;
    let truncated_generation = first.truncated_generation;
    let covering = first.covering.clone();
    let mut labels = first.labels.clone();
    let mut motions = first.motions.clone();
    let mut e = first.e.clone();
    let mut records = vec![IterationRecord {
        generation: 0,
        e_area: cells_area(&e, h),
        squares: 1,
        partitioned: usize::from(first.kind == SquareKind::Partitioned),
    }];
    let mut stalls = 0;
    let mut reached_floor = false;
    for k in 1..=cfg.max_iters as u32 {
        let area = cells_area(&e, h);
        if area <= eps {
            break;
        }
        let Some(m) = block_size(u.n, cfg.theta, k).filter(|&m| m >= 8) else {
            reached_floor = true;
            break;
        };
        let per = u.n / m;
        let blocks: Vec<(usize, usize)> = (0..per * per)
            .map(|b| (b % per, b / per))
            .filter(|&(bx, by)| (0..m).any(|y| (0..m).any(|x| e.get(bx * m + x, by * m + y))))
            .collect();
        let local: Vec<Option<SquareDecomposition>> = blocks
            .par_iter()
            .map(|&(bx, by)| {
                let sub = u.sub_square(bx * m, by * m, m)?;
                match decompose_square(&sub, cfg) {
                    Ok(d) => Ok(Some(d)),
                    Err(KornError::NeedsRegularization(_)) => Ok(None),
                    Err(err) => Err(err),
                }
            })
            .collect::<Result<_, KornError>>()?;
        let mut partitioned = 0;
        for (&(bx, by), d) in blocks.iter().zip(&local) {
            let Some(d) = d else { continue };
            partitioned += usize::from(d.kind == SquareKind::Partitioned);
            let mut fresh: BTreeMap<i32, i32> = BTreeMap::new();
            for y in 0..m {
                for x in 0..m {
                    let gi = g.idx(bx * m + x, by * m + y);
                    let li = y * m + x;
                    if !e.data[gi] || d.e.data[li] {
                        continue;
                    }
                    let ll = d.labels[li];
                    let id = *fresh.entry(ll).or_insert_with(|| {
                        motions.push(d.motions[ll as usize]);
                        motions.len() as i32 - 1
                    });
                    labels[gi] = id;
                    e.data[gi] = false;
                }
            }
        }
        let new_area = cells_area(&e, h);
        records.push(IterationRecord { generation: k, e_area: new_area, squares: blocks.len(), partitioned });
        if new_area >= area {
            stalls += 1;
            if stalls >= 3 {
                return Err(KornError::Stalled(format!(
                    "exceptional area {new_area:.3e} not decreasing after {} iterations (history: {:?})",
                    k,
                    records.iter().map(|r| r.e_area).collect::<Vec<_>>()
                )));
            }
        } else {
            stalls = 0;
        }
    }

    // cleanup
    let jcuts = u.cuts();
    let (split, _) = split_labels(&labels, g.nx, g.ny, Some(&jcuts));
    let mut labels = split;
    let mut motions = refit(u, &labels, &e);
    absorb_exceptional(u, &mut labels, &motions, &e, &jcuts);
    let (lab, _) = canonical(&labels);
    labels = lab;
    motions = refit(u, &labels, &e);
    let scale = rigid_free_scale(u);
    let tol = 1e-8 * scale;
    coalesce(&g, &mut labels, &mut motions, &jcuts, tol);
    let (lab, _) = canonical(&labels);
    labels = lab;
    motions = refit(u, &labels, &e);

    let jl = u.jumps.total_length();
    let rho = jl + 8.0 * u.mu;
    let mut v = residual_field(u, &labels, &motions)?;
    let mut coarea_pieces = 1;
    let mut coarea_added = 0.0;
    let vmax = v.sup_norm();
    if vmax > 1e-9 * scale {
        let mut cuts = EdgeCuts::from_labels(g.nx, g.ny, &labels);
        cuts.union_with(&jcuts);
        // Quantized so that round-off from adding a rigid motion to u cannot flip a level choice.
        let q = (scale.log2().floor() - 34.0).exp2();
        let comps: Vec<Vec<f64>> = (0..2).map(|c| v.values.iter().map(|x| (x[c] / q).round() * q).collect()).collect();
        let cp = poincare_split(&g, &comps, Some(&cuts), rho)?;
        if cp.count > 1 {
            let count = motions.len() as i64;
            let combined: Vec<i32> =
                labels.iter().zip(&cp.labels).map(|(&a, &b)| (b as i64 * count + a as i64) as i32).collect();
            let (lab, order) = canonical(&combined);
            motions = order
                .iter()
                .map(|&k| {
                    let (b, a) = ((k as i64 / count) as usize, (k as i64 % count) as usize);
                    motions[a].add(&RigidMotion::translation([cp.anchors[b][0], cp.anchors[b][1]]))
                })
                .collect();
            labels = lab;
            v = residual_field(u, &labels, &motions)?;
        }
        coarea_pieces = cp.count;
        coarea_added = cp.added_perimeter.iter().sum();
    }
    let count = motions.len();
    let ledger = build_ledger(u, &labels, &v, cfg, eps, &e, records, reached_floor, coarea_pieces, coarea_added, rho);
    Ok(PiecewiseDecomposition { labels, count, motions, v, e, first_kind, truncated_generation, ledger, covering })
}

/// Removes jump-dense squares, decomposes the remaining field and gives
/// every removed region its own piece fitted to the original `u`.
pub fn decompose_field(u: &DisplacementField, cfg: &DecomposeConfig) -> Result<(Regularization, PiecewiseDecomposition), KornError> {
    let reg = regularize_jump_density(u, cfg.theta);
    if reg.layers.is_empty() {
        return Ok((reg, iterate(u, cfg)?));
    }
    let mut w = reg.field_after(u, reg.layers.len());
    w.jumps = reg.gamma.clone();
    let mut d = iterate(&w, cfg)?;
    let g = u.geom();
    let mut removed = Mask::new(g.nx, g.ny);
    for b in reg.removed_boxes() {
        if let Some((x0, x1, y0, y1)) = g.cells_with_center_in(&b) {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    removed.set(x, y, true);
                }
            }
        }
    }
    let (comp, _) = crate::grid::label_components(&removed, None, crate::grid::Connectivity::Four);
    let base = d.count as i32;
    let mut labels = d.labels.clone();
    for (i, &c) in comp.iter().enumerate() {
        if c >= 0 {
            labels[i] = base + c;
        }
    }
    let (labels, order) = canonical(&labels);
    let mut motions: Vec<RigidMotion> = Vec::with_capacity(order.len());
    let cells = groups(&labels, order.len());
    for (new, &old) in order.iter().enumerate() {
        motions.push(if old < base { d.motions[old as usize] } else { motion_for(&g, &u.values, &cells[new]) });
    }
    let v = residual_field(u, &labels, &motions)?;
    let ledger = build_ledger(
        u,
        &labels,
        &v,
        cfg,
        d.ledger.epsilon,
        &d.e,
        std::mem::take(&mut d.ledger.iterations),
        d.ledger.reached_floor,
        d.ledger.coarea_pieces,
        d.ledger.coarea_added_perimeter,
        d.ledger.rho,
    );
    let count = motions.len();
    let out = PiecewiseDecomposition {
        labels,
        count,
        motions,
        v,
        e: d.e,
        first_kind: d.first_kind,
        truncated_generation: d.truncated_generation,
        ledger,
        covering: d.covering,
    };
    Ok((reg, out))
}

/// `1 + ||u - a||_inf` for the global rigid fit `a`; unchanged when a rigid
/// motion is added to `u`, unlike `||u||_inf`.
fn rigid_free_scale(u: &DisplacementField) -> f64 {
    let g = u.geom();
    let all: Vec<usize> = (0..g.len()).collect();
    let a = motion_for(&g, &u.values, &all);
    let r = residual_field(u, &vec![0; g.len()], &[a]).map_or(0.0, |v| v.sup_norm());
    1.0 + r
}

/// Per-piece fit on the cells outside `e`, falling back to all cells. Pieces
/// too small or too thin for a rigid fit take the best neighbouring motion
/// shifted by the mean residual, which keeps the result equivariant under
/// adding a rigid motion to `u`.
fn refit(u: &DisplacementField, labels: &[i32], e: &Mask) -> Vec<RigidMotion> {
    let g = u.geom();
    let count = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let cells = groups(labels, count);
    let fits: Vec<Option<RigidMotion>> = cells
        .par_iter()
        .map(|cells| {
            let good: Vec<usize> = cells.iter().copied().filter(|&c| !e.data[c]).collect();
            let fit = |c: &[usize]| if c.len() >= 3 { fit_cells(&g, &u.values, c).ok() } else { None };
            fit(&good).or_else(|| fit(cells))
        })
        .collect();
    let mut nbrs: Vec<Vec<usize>> = vec![Vec::new(); count];
    for (a, b) in adjacency(labels, g.nx, g.ny, &EdgeCuts::none(g.nx, g.ny)) {
        nbrs[a].push(b);
        nbrs[b].push(a);
    }
    let shifted = |l: usize, base: RigidMotion| {
        let k = cells[l].len().max(1) as f64;
        let s = cells[l].iter().fold([0.0, 0.0], |acc, &i| {
            let a = base.eval(g.center_of(i));
            [acc[0] + u.values[i][0] - a[0], acc[1] + u.values[i][1] - a[1]]
        });
        base.add(&RigidMotion::translation([s[0] / k, s[1] / k]))
    };
    // resolve in rounds so that chains of tiny pieces inherit from the nearest fitted one
    let mut fits = fits;
    loop {
        let snapshot = fits.clone();
        let mut changed = false;
        for l in 0..count {
            if snapshot[l].is_some() {
                continue;
            }
            let cands: Vec<(f64, RigidMotion)> = nbrs[l]
                .iter()
                .filter_map(|&nb| snapshot[nb].map(|m| shifted(l, m)))
                .map(|m| (residual_lp(&g, &u.values, &cells[l], &m, 2.0), m))
                .collect();
            // near-ties (e.g. every neighbour fits a single cell exactly) go to the lowest label
            let best = cands.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
            if let Some(c) = cands.iter().find(|c| c.0 <= best * (1.0 + 1e-9) + 1e-12) {
                fits[l] = Some(c.1);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    fits.into_iter()
        .enumerate()
        .map(|(l, f)| f.unwrap_or_else(|| motion_for(&g, &u.values, &cells[l])))
        .collect()
}

fn residual_field(u: &DisplacementField, labels: &[i32], motions: &[RigidMotion]) -> Result<DisplacementField, KornError> {
    let g = u.geom();
    let values = (0..g.len())
        .map(|i| {
            let a = motions[labels[i] as usize].eval(g.center_of(i));
            [u.values[i][0] - a[0], u.values[i][1] - a[1]]
        })
        .collect();
    DisplacementField::with_center(u.n, u.mu, u.center, values, u.jumps.clone())
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else if a > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// Interfaces between different labels, in length units.
pub fn interface_length(labels: &[i32], nx: usize, ny: usize, h: f64) -> f64 {
    let c = EdgeCuts::from_labels(nx, ny, labels);
    (c.horiz.iter().filter(|b| **b).count() + c.vert.iter().filter(|b| **b).count()) as f64 * h
}

#[allow(clippy::too_many_arguments)]
fn build_ledger(
    u: &DisplacementField,
    labels: &[i32],
    v: &DisplacementField,
    cfg: &DecomposeConfig,
    eps: f64,
    e: &Mask,
    iterations: Vec<IterationRecord>,
    reached_floor: bool,
    coarea_pieces: usize,
    coarea_added_perimeter: f64,
    rho: f64,
) -> DecompositionLedger {
    let g = u.geom();
    let jl = u.jumps.total_length();
    let boundary_sum = 2.0 * interface_length(labels, g.nx, g.ny, u.h) + 8.0 * u.mu;
    let su = strain(u);
    let e_l2 = lp_norm(&su.strain_frobenius(), 2.0, Some(&su.valid), u.h).value;
    let mut cuts = EdgeCuts::from_labels(g.nx, g.ny, labels);
    cuts.union_with(&u.cuts());
    let sv = strain_with_cuts(v, &cuts);
    let gv = sv.grad_frobenius();
    let pp = p_prime(cfg.p);
    let grad_v_p = lp_norm(&gv, cfg.p, Some(&sv.valid), u.h).value;
    let grad_v_p_prime = lp_norm(&gv, pp, Some(&sv.valid), u.h).value;
    let v_sup = lp_norm(&vector_magnitudes(&v.values), f64::INFINITY, None, u.h).value;
    let r = cfg.r();
    DecompositionLedger {
        p: cfg.p,
        p_prime: pp,
        r,
        lambda: lambda(cfg.p, r),
        epsilon: eps,
        jump_length: jl,
        boundary_sum,
        boundary_ratio: boundary_sum / (jl + 8.0 * u.mu),
        e_l2,
        v_sup,
        grad_v_p,
        grad_v_p_prime,
        korn_ratio: ratio(grad_v_p, e_l2),
        korn_ratio_prime: ratio(grad_v_p_prime, e_l2),
        sup_ratio: ratio(v_sup, e_l2),
        exceptional_area: cells_area(e, u.h),
        iterations,
        reached_floor,
        coarea_pieces,
        coarea_added_perimeter,
        rho,
    }
}

/// Sorted edge extremes of a scalar field over uncut neighbour pairs.
struct EdgeLevels {
    lo: Vec<f64>,
    hi: Vec<f64>,
    h: f64,
}

impl EdgeLevels {
    fn new(vals: &[f64], nx: usize, ny: usize, h: f64, cuts: Option<&EdgeCuts>) -> Self {
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        let mut push = |a: f64, b: f64| {
            lo.push(a.min(b));
            hi.push(a.max(b));
        };
        for y in 0..ny {
            for x in 0..nx {
                let i = y * nx + x;
                if x + 1 < nx && !cuts.is_some_and(|c| c.cut_right(x, y)) {
                    push(vals[i], vals[i + 1]);
                }
                if y + 1 < ny && !cuts.is_some_and(|c| c.cut_up(x, y)) {
                    push(vals[i], vals[i + nx]);
                }
            }
        }
        lo.sort_by(f64::total_cmp);
        hi.sort_by(f64::total_cmp);
        EdgeLevels { lo, hi, h }
    }

    /// `h * sum |difference|` over the edges.
    fn variation(&self) -> f64 {
        self.h * (self.hi.iter().sum::<f64>() - self.lo.iter().sum::<f64>())
    }

    /// Perimeter of `{u > t}`: edges with `lo <= t < hi`.
    fn above(&self, t: f64) -> f64 {
        let a = self.lo.partition_point(|&x| x <= t);
        let b = self.hi.partition_point(|&x| x <= t);
        (a - b) as f64 * self.h
    }

    /// Perimeter of `{u >= t}`: edges with `lo < t <= hi`.
    fn at_least(&self, t: f64) -> f64 {
        let a = self.lo.partition_point(|&x| x < t);
        let b = self.hi.partition_point(|&x| x < t);
        (a - b) as f64 * self.h
    }

    /// Integral of the `{u > t}` perimeter over `t` in `(a, b]`.
    fn integral(&self, a: f64, b: f64) -> f64 {
        let mut s = 0.0;
        // lo and hi are sorted independently, so integrate each as a sum of ramps
        for &x in &self.lo {
            s += (b - x.clamp(a, b)).max(0.0);
        }
        for &x in &self.hi {
            s -= (b - x.clamp(a, b)).max(0.0);
        }
        s * self.h
    }
}

const SAMPLES: usize = 32;

/// Best sampled level in `(lo, hi]` for `per`; ties go to the level nearest
/// the band middle.
fn sampled_level(lo: f64, hi: f64, per: &dyn Fn(f64) -> f64, include_hi: bool) -> (f64, f64) {
    let mid = 0.5 * (lo + hi);
    let mut best = (f64::INFINITY, f64::INFINITY, lo);
    let mut consider = |t: f64| {
        let p = per(t);
        let d = (t - mid).abs();
        if p < best.0 || (p == best.0 && d < best.1) {
            best = (p, d, t);
        }
    };
    for k in 1..=SAMPLES {
        consider(lo + (hi - lo) * k as f64 / (SAMPLES + 1) as f64);
    }
    if include_hi {
        consider(hi);
    }
    (best.2, best.0)
}

/// Exact minimiser of the `{u > t}` perimeter over `t` in `(lo, hi]`.
fn swept_level(levels: &EdgeLevels, vals: &[f64], lo: f64, hi: f64) -> (f64, f64) {
    let mut bps: Vec<f64> = vals.iter().copied().filter(|&x| x > lo && x <= hi).collect();
    bps.sort_by(f64::total_cmp);
    bps.dedup();
    let t0 = bps.first().map_or(hi, |&f| 0.5 * (lo + f));
    let mut best = (levels.above(t0), t0);
    for t in bps.into_iter().chain(std::iter::once(hi)) {
        let p = levels.above(t);
        if p < best.0 {
            best = (p, t);
        }
    }
    (best.1, best.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentLevels {
    /// `||grad u_c||_{L^1}` as an edge sum with the l1 pointwise norm.
    pub total_variation: f64,
    pub m: f64,
    /// Bands are `(base + iM, base + (i+1)M]` with `base = min u`.
    pub base: f64,
    /// Chosen levels, one per band, from the lowest band up.
    pub levels: Vec<f64>,
    pub labels: Vec<i32>,
    /// Translation per level piece.
    pub anchors: Vec<f64>,
    pub added_perimeter: f64,
    pub swept_bands: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoareaPartition {
    pub rho: f64,
    pub components: Vec<ComponentLevels>,
    /// Intersection of the per-component level pieces.
    pub labels: Vec<i32>,
    pub count: usize,
    /// Translation per label, one entry per component.
    pub anchors: Vec<Vec<f64>>,
    pub added_perimeter: Vec<f64>,
}

impl CoareaPartition {
    /// `u_c - b_{label}` per component.
    pub fn residual(&self, comps: &[Vec<f64>]) -> Vec<Vec<f64>> {
        comps
            .iter()
            .enumerate()
            .map(|(c, vals)| vals.iter().zip(&self.labels).map(|(x, &l)| x - self.anchors[l as usize][c]).collect())
            .collect()
    }

    pub fn m_values(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.m).collect()
    }
}

fn split_component(geom: &GridGeom, vals: &[f64], cuts: Option<&EdgeCuts>, rho: f64) -> ComponentLevels {
    let levels = EdgeLevels::new(vals, geom.nx, geom.ny, geom.h, cuts);
    let tv = levels.variation();
    let (vmin, vmax) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if !(tv > 0.0) {
        let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
        return ComponentLevels {
            total_variation: tv,
            m: 0.0,
            base: vmin,
            levels: Vec::new(),
            labels: vec![0; vals.len()],
            anchors: vec![mean],
            added_perimeter: 0.0,
            swept_bands: 0,
        };
    }
    let m = tv / rho;
    let bands = (((vmax - vmin) / m).ceil() as usize).max(1);
    let band = |i: usize| (vmin + i as f64 * m, vmin + (i + 1) as f64 * m);
    let per = |t: f64| levels.above(t);
    let mut chosen: Vec<(f64, f64)> = (0..bands)
        .map(|i| {
            let (lo, hi) = band(i);
            sampled_level(lo, hi, &per, true)
        })
        .collect();
    let mut swept = 0;
    let total: f64 = chosen.iter().map(|c| c.1).sum();
    if total > rho * (1.0 + 1e-12) {
        for k in 0..bands {
            let (lo, hi) = band(k);
            let mean = levels.integral(lo, hi) / m;
            if chosen[k].1 > mean {
                chosen[k] = swept_level(&levels, vals, lo, hi);
                swept += 1;
            }
        }
    }
    let ts: Vec<f64> = chosen.iter().map(|c| c.0).collect();
    let added = chosen.iter().map(|c| c.1).sum();
    // piece k holds t_{k-1} < u <= t_k, with open ends
    let raw: Vec<i32> = vals.iter().map(|&x| ts.partition_point(|&t| t < x) as i32).collect();
    let (labels, _) = canonical(&raw);
    let count = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut range = vec![(f64::INFINITY, f64::NEG_INFINITY); count];
    for (&l, &x) in labels.iter().zip(vals) {
        let r = &mut range[l as usize];
        r.0 = r.0.min(x);
        r.1 = r.1.max(x);
    }
    ComponentLevels {
        total_variation: tv,
        m,
        base: vmin,
        levels: ts,
        labels,
        anchors: range.iter().map(|r| 0.5 * (r.0 + r.1)).collect(),
        added_perimeter: added,
        swept_bands: swept,
    }
}

/// Level-set partition of a scalar or vector field: per component, one
/// level per band of height `M = ||grad u||_1 / rho`, chosen to keep the
/// added perimeter (off the cuts) within `rho`.
pub fn poincare_split(
    geom: &GridGeom,
    comps: &[Vec<f64>],
    cuts: Option<&EdgeCuts>,
    rho: f64,
) -> Result<CoareaPartition, KornError> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(KornError::InvalidArgument(format!("rho = {rho} must be positive")));
    }
    if comps.is_empty() || comps.iter().any(|c| c.len() != geom.len()) {
        return Err(KornError::InvalidArgument("component arrays must match the grid".into()));
    }
    let components: Vec<ComponentLevels> = comps.par_iter().map(|vals| split_component(geom, vals, cuts, rho)).collect();
    let k = comps.len();
    let raw: Vec<Vec<i32>> = (0..geom.len()).map(|i| components.iter().map(|c| c.labels[i]).collect()).collect();
    let mut map: BTreeMap<&Vec<i32>, i32> = BTreeMap::new();
    let mut anchors = Vec::new();
    let mut labels = Vec::with_capacity(geom.len());
    for key in &raw {
        let next = map.len() as i32;
        let id = *map.entry(key).or_insert_with(|| {
            anchors.push((0..k).map(|c| components[c].anchors[key[c] as usize]).collect());
            next
        });
        labels.push(id);
    }
    let added_perimeter = components.iter().map(|c| c.added_perimeter).collect();
    Ok(CoareaPartition { rho, count: anchors.len(), components, labels, anchors, added_perimeter })
}

/// [`poincare_split`] on the two components of a field, off its jump set.
pub fn poincare_split_field(u: &DisplacementField, rho: f64) -> Result<CoareaPartition, KornError> {
    let comps: Vec<Vec<f64>> = (0..2).map(|c| u.values.iter().map(|x| x[c]).collect()).collect();
    poincare_split(&u.geom(), &comps, Some(&u.cuts()), rho)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationNorms {
    pub lq_outside: f64,
    pub linf_outside: f64,
    pub e_area: f64,
    pub e_perimeter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationResult {
    pub e: Mask,
    pub a: RigidMotion,
    /// `H^1(J)^(-1/2) ||e(u)||_2`; `None` without a jump.
    pub m: Option<f64>,
    /// Per component level in `(M, 2M)`.
    pub levels: Vec<f64>,
    pub q: f64,
    pub jump_length: f64,
    pub e_l2: f64,
    /// `u - a`.
    pub v: Vec<[f64; 2]>,
    pub norms: TruncationNorms,
}

impl TruncationResult {
    /// Componentwise clamp of `v` to `[-2M, 2M]`; the identity when no
    /// level was needed.
    pub fn truncated(&self) -> Vec<[f64; 2]> {
        match self.m {
            Some(m) if !self.levels.is_empty() => self.v.iter().map(|x| [x[0].clamp(-2.0 * m, 2.0 * m), x[1].clamp(-2.0 * m, 2.0 * m)]).collect(),
            _ => self.v.clone(),
        }
    }
}

/// `M = H^1(J)^(-1/2) ||e(u)||_2`.
pub fn truncation_scale(jump_length: f64, e_l2: f64) -> f64 {
    e_l2 / jump_length.sqrt()
}

/// Truncation of `u - a` at a low-perimeter level between `M` and `2M`; the
/// cells above the level form the exceptional set.
pub fn korn_poincare_small_jump(u: &DisplacementField, q: f64, c_budget: f64) -> Result<TruncationResult, KornError> {
    if !(q >= 1.0) {
        return Err(KornError::InvalidArgument(format!("q = {q} must be at least 1")));
    }
    let g = u.geom();
    let cells: Vec<usize> = (0..g.len()).collect();
    let jl = u.jumps.total_length();
    let area = 4.0 * u.mu * u.mu;
    let su = strain(u);
    let e_l2 = lp_norm(&su.strain_frobenius(), 2.0, Some(&su.valid), u.h).value;
    let budget = (c_budget * jl * jl).min(0.5 * area);
    let (a, _) = trim_cells(&g, &u.values, &cells, budget)?;
    let v: Vec<[f64; 2]> = cells
        .iter()
        .map(|&i| {
            let m = a.eval(g.center_of(i));
            [u.values[i][0] - m[0], u.values[i][1] - m[1]]
        })
        .collect();
    let mut e = Mask::new(g.nx, g.ny);
    let mut m_val = None;
    let mut levels = Vec::new();
    if jl > 0.0 {
        let m = truncation_scale(jl, e_l2);
        m_val = Some(m);
        let tol = 1e-12 * (1.0 + u.sup_norm());
        if m > tol {
            let cuts = u.cuts();
            for c in 0..2 {
                let w: Vec<f64> = v.iter().map(|x| x[c].clamp(-2.0 * m, 2.0 * m).abs()).collect();
                let lv = EdgeLevels::new(&w, g.nx, g.ny, g.h, Some(&cuts));
                let per = |t: f64| lv.at_least(t);
                let (t, _) = sampled_level(m, 2.0 * m, &per, false);
                levels.push(t);
                for (i, &x) in w.iter().enumerate() {
                    if x >= t {
                        e.data[i] = true;
                    }
                }
            }
        } else {
            let tol = 1e-9 * (1.0 + u.sup_norm());
            for (i, x) in v.iter().enumerate() {
                if x[0].abs() > tol || x[1].abs() > tol {
                    e.data[i] = true;
                }
            }
        }
    }
    let outside = e.complement();
    let mags = vector_magnitudes(&v);
    let lq = lp_norm(&mags, q, Some(&outside), u.h);
    let linf = lp_norm(&mags, f64::INFINITY, Some(&outside), u.h);
    let norms = TruncationNorms {
        lq_outside: if lq.empty { 0.0 } else { lq.value },
        linf_outside: if linf.empty { 0.0 } else { linf.value },
        e_area: cells_area(&e, u.h),
        e_perimeter: interface_length(&e.data.iter().map(|&b| i32::from(b)).collect::<Vec<_>>(), g.nx, g.ny, u.h),
    };
    Ok(TruncationResult { e, a, m: m_val, levels, q, jump_length: jl, e_l2, v, norms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Segment, SegmentSet};
    use crate::grid::{label_components, Connectivity};

    fn seg(ax: f64, ay: f64, bx: f64, by: f64) -> Segment {
        Segment::new(Point::new(ax, ay), Point::new(bx, by)).unwrap()
    }

    fn field(n: usize, jumps: Vec<Segment>, f: impl Fn(Point) -> [f64; 2]) -> DisplacementField {
        let g = GridGeom::square(n, Point::ORIGIN, 1.0);
        let values = (0..n * n).map(|i| f(g.center_of(i))).collect();
        DisplacementField::new(n, 1.0, values, SegmentSet::from_segments(jumps)).unwrap()
    }

    fn cfg() -> DecomposeConfig {
        DecomposeConfig::new(Theta::Quarter, 1.5)
    }

    #[test]
    fn exponents() {
        assert_eq!(p_prime(1.0), 1.5);
        assert!((lambda(1.0, 1.0 / 24.0) - (23.0 / 24.0) / 5.0).abs() < 1e-15);
        assert!((cfg().r() - 0.5 / 24.0).abs() < 1e-15);
        let q = DecomposeConfig { q: Some(4.0), ..cfg() };
        assert!((q.r() - 2.5 / 96.0).abs() < 1e-15);
        assert!(DecomposeConfig { p: 2.0, ..cfg() }.validate().is_err());
    }

    #[test]
    fn ramp_gives_two_strips() {
        let n = 128;
        let g = GridGeom::square(n, Point::new(0.5, 0.5), 0.5);
        let vals: Vec<f64> = (0..n * n).map(|i| g.center_of(i).x).collect();
        let cp = poincare_split(&g, &[vals.clone()], None, 2.0).unwrap();
        let c = &cp.components[0];
        assert!((c.m - 0.5).abs() < 1e-2, "M = {}", c.m);
        assert_eq!(cp.count, 2);
        assert!((cp.added_perimeter[0] - 1.0).abs() < 1e-9);
        let v = cp.residual(&[vals]);
        let sup = v[0].iter().fold(0.0f64, |a, x| a.max(x.abs()));
        assert!(sup <= 2.0 * c.m);
        for (i, &t) in c.levels.iter().enumerate() {
            assert!(t > c.base + i as f64 * c.m && t <= c.base + (i + 1) as f64 * c.m);
        }
    }

    #[test]
    fn constant_is_one_piece() {
        let u = field(32, vec![], |_| [0.3, -1.0]);
        let cp = poincare_split_field(&u, 1.0).unwrap();
        assert_eq!(cp.count, 1);
        assert!((cp.anchors[0][0] - 0.3).abs() < 1e-12 && (cp.anchors[0][1] + 1.0).abs() < 1e-12);
        assert!(poincare_split_field(&u, 0.0).is_err());
    }

    #[test]
    fn perimeter_within_budget_on_rough_field() {
        let u = field(64, vec![seg(-1.0, 0.2, 0.4, 0.2)], |p| {
            [(7.0 * p.x).sin() + p.y * p.y, (3.0 * p.x * p.y).cos() + if p.y > 0.2 { 1.0 } else { 0.0 }]
        });
        for rho in [0.5, 2.0, 10.0] {
            let cp = poincare_split_field(&u, rho).unwrap();
            let comps: Vec<Vec<f64>> = (0..2).map(|c| u.values.iter().map(|x| x[c]).collect()).collect();
            let v = cp.residual(&comps);
            for (c, comp) in cp.components.iter().enumerate() {
                assert!(cp.added_perimeter[c] <= rho * (1.0 + 1e-9));
                assert!(v[c].iter().all(|x| x.abs() <= 2.0 * comp.m * (1.0 + 1e-12)));
            }
        }
    }

    #[test]
    fn truncation_scale_arithmetic() {
        assert!((truncation_scale(0.04, 0.2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn truncation_of_rigid_field_is_empty() {
        let u = field(64, vec![seg(-0.1, 0.0, 0.1, 0.0)], |p| [0.2 - 0.5 * p.y, 1.0 + 0.5 * p.x]);
        let t = korn_poincare_small_jump(&u, 4.0, 1.0).unwrap();
        assert!(t.e.is_empty());
        assert!(t.norms.linf_outside < 1e-12 && t.norms.lq_outside < 1e-12);
        assert_eq!(t.norms.e_area, 0.0);
        let tv = t.truncated();
        assert!(tv.iter().zip(&t.v).all(|(a, b)| a == b));
    }

    #[test]
    fn truncation_identity_off_e() {
        let u = field(64, vec![seg(0.5, 1.0, 1.0, 0.5)], |p| {
            if p.x + p.y > 1.5 {
                [3.0, -2.0]
            } else {
                [0.05 * p.x * p.x, 0.02 * p.y]
            }
        });
        let t = korn_poincare_small_jump(&u, 4.0, 1.0).unwrap();
        let m = t.m.unwrap();
        assert!(t.levels.iter().all(|&l| l > m && l < 2.0 * m));
        let tv = t.truncated();
        let g = u.geom();
        for i in 0..g.len() {
            if !t.e.data[i] {
                assert_eq!(tv[i], t.v[i]);
                assert!(t.v[i][0].abs() < 2.0 * m && t.v[i][1].abs() < 2.0 * m);
            }
            if g.center_of(i).x + g.center_of(i).y > 1.6 {
                assert!(t.e.data[i]);
            }
        }
    }

    #[test]
    fn rigid_without_jump_is_one_piece() {
        let u = field(64, vec![], |p| [1.0 - 0.3 * p.y, 2.0 + 0.3 * p.x]);
        let d = iterate(&u, &cfg()).unwrap();
        assert_eq!(d.count, 1);
        assert!(d.v.sup_norm() < 1e-12);
        assert_eq!(d.first_kind, SquareKind::Single);
    }

    fn three_piece(n: usize) -> (DisplacementField, Vec<RigidMotion>) {
        let motions = vec![
            RigidMotion::new(0.3, [1.0, 0.0]),
            RigidMotion::new(-0.2, [0.0, 0.5]),
            RigidMotion::new(0.1, [-1.0, 1.0]),
        ];
        let m = motions.clone();
        let u = field(n, vec![seg(-0.2, -1.0, -0.2, 1.0), seg(-0.2, 0.3, 1.0, 0.3)], move |p| {
            let k = if p.x < -0.2 { 0 } else if p.y < 0.3 { 1 } else { 2 };
            m[k].eval(p)
        });
        (u, motions)
    }

    #[test]
    fn exact_piecewise_rigidity_with_three_pieces() {
        let (u, _) = three_piece(128);
        let d = iterate(&u, &cfg()).unwrap();
        assert_eq!(d.count, 3);
        assert!(d.v.sup_norm() < 1e-9);
        let rec = d.reconstruct();
        assert!(rec.iter().zip(&u.values).all(|(a, b)| (a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12));
        // per-piece oracle on the flood-filled pieces
        let g = u.geom();
        let (flood, k) = label_components(&Mask::full(g.nx, g.ny), Some(&u.cuts()), Connectivity::Four);
        assert_eq!(k, 3);
        for j in 0..k {
            let cells: Vec<usize> = (0..g.len()).filter(|&i| flood[i] == j as i32).collect();
            let oracle = fit_cells(&g, &u.values, &cells).unwrap();
            let mine = d.motions[d.labels[cells[0]] as usize];
            assert!(cells.iter().all(|&c| d.labels[c] == d.labels[cells[0]]));
            assert!(mine.sub(&oracle).frobenius() < 1e-9);
            assert!((mine.b[0] - oracle.b[0]).abs() < 1e-9 && (mine.b[1] - oracle.b[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn chord_square_is_partitioned() {
        let (u, motions) = three_piece(64);
        let d = decompose_square(&u, &cfg()).unwrap();
        assert_eq!(d.kind, SquareKind::Partitioned);
        let g = u.geom();
        // every main piece lies on one side and reproduces that side's motion
        for j in 0..d.count {
            let cells: Vec<usize> = (0..g.len()).filter(|&i| d.labels[i] == j as i32).collect();
            if cells.len() < 16 {
                continue;
            }
            let p = g.center_of(cells[0]);
            let k = if p.x < -0.2 { 0 } else if p.y < 0.3 { 1 } else { 2 };
            assert!(d.motions[j].sub(&motions[k]).frobenius() < 1e-9);
        }
    }

    #[test]
    fn tiny_jump_gives_single_motion() {
        let u = field(64, vec![seg(0.0, 0.0, 0.01, 0.0)], |p| [0.5 * p.y, -0.5 * p.x]);
        let d = decompose_square(&u, &cfg()).unwrap();
        assert_eq!(d.kind, SquareKind::Single);
        assert!(d.motions[0].sub(&RigidMotion::new(-0.5, [0.0, 0.0])).frobenius() < 1e-12);
        assert!(d.e.is_empty());
    }

    #[test]
    fn long_jump_needs_regularization() {
        let segs: Vec<Segment> = (0..80).map(|k| seg(-1.0, -0.99 + 0.0245 * k as f64, 1.0, -0.99 + 0.0245 * k as f64)).collect();
        let u = field(32, segs, |_| [0.0, 0.0]);
        assert!(matches!(decompose_square(&u, &cfg()), Err(KornError::NeedsRegularization(_))));
    }

    #[test]
    fn adding_a_rigid_motion_is_equivariant() {
        let (u, _) = three_piece(64);
        let mut w = u.clone();
        for (i, v) in w.values.iter_mut().enumerate() {
            let p = u.geom().center_of(i);
            *v = [v[0] + 0.01 * p.x * p.x, v[1] - 0.02 * p.x * p.y];
        }
        let a0 = RigidMotion::new(0.7, [-2.0, 3.0]);
        let mut shifted = w.clone();
        for (i, v) in shifted.values.iter_mut().enumerate() {
            let a = a0.eval(w.geom().center_of(i));
            *v = [v[0] + a[0], v[1] + a[1]];
        }
        let d1 = iterate(&w, &cfg()).unwrap();
        let d2 = iterate(&shifted, &cfg()).unwrap();
        assert_eq!(d1.labels, d2.labels);
        for (m1, m2) in d1.motions.iter().zip(&d2.motions) {
            assert!(m2.sub(&m1.add(&a0)).frobenius() < 1e-9);
            assert!((m2.b[0] - m1.b[0] - a0.b[0]).abs() < 1e-9);
        }
        let dv = d1.v.values.iter().zip(&d2.v.values).fold(0.0f64, |a, (x, y)| a.max((x[0] - y[0]).abs() + (x[1] - y[1]).abs()));
        assert!(dv < 1e-9);
    }
}
