//! Seeded synthetic fields used by the tests, the verification suite and the
//! `sample` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::field::DisplacementField;
use crate::geometry::{Aabb, Point, Segment, SegmentSet};
use crate::grid::{label_components, Connectivity, EdgeCuts, GridGeom, Mask};
use crate::rigid::RigidMotion;
use crate::KornError;

/// Samples `f` at the cell centers of the grid on `Q_mu(center)`.
pub fn sample_centered(
    f: &dyn Fn(Point) -> [f64; 2],
    jumps: SegmentSet,
    n: usize,
    center: Point,
    mu: f64,
) -> Result<DisplacementField, KornError> {
    let g = GridGeom::square(n, center, mu);
    let values = (0..g.len()).map(|i| f(g.center_of(i))).collect();
    DisplacementField::with_center(n, mu, center, values, jumps)
}

fn unit_square() -> (Point, f64) {
    (Point::new(0.5, 0.5), 0.5)
}

/// Field with a known split into pieces and one motion per piece.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PiecewiseFixture {
    pub name: String,
    pub field: DisplacementField,
    /// Ground-truth piece per cell.
    pub truth: Vec<i32>,
    pub motions: Vec<RigidMotion>,
}

impl PiecewiseFixture {
    pub fn pieces(&self) -> usize {
        self.motions.len()
    }
}

fn random_motion(rng: &mut ChaCha8Rng) -> RigidMotion {
    RigidMotion::new(rng.gen_range(-1.0..1.0), [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
}

/// Full line through the domain, clipped to it.
fn random_chord(rng: &mut ChaCha8Rng, dom: &Aabb) -> Option<Segment> {
    let c = Point::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6));
    let a: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let d = Point::new(a.cos() * 4.0, a.sin() * 4.0);
    Segment::new(Point::new(c.x - d.x, c.y - d.y), Point::new(c.x + d.x, c.y + d.y)).ok()?.clip(dom)
}

/// Straight cracks across `Q_1` splitting it into at most six pieces, each
/// moved by its own rigid motion, so `e(u) = 0` off the cracks.
pub fn chord_fixture(seed: u64, n: usize) -> Result<PiecewiseFixture, KornError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dom = Aabb::centered(Point::ORIGIN, 1.0);
    let g = GridGeom::square(n, Point::ORIGIN, 1.0);
    for _ in 0..1000 {
        let m = rng.gen_range(1..=3);
        let segs: Vec<Segment> = (0..m).filter_map(|_| random_chord(&mut rng, &dom)).collect();
        if segs.len() != m {
            continue;
        }
        let jumps = SegmentSet::from_segments(segs);
        let cuts = EdgeCuts::from_segments(&g, &jumps);
        let (truth, k) = label_components(&Mask::full(n, n), Some(&cuts), Connectivity::Four);
        if k > 6 {
            continue;
        }
        let mut sizes = vec![0usize; k];
        truth.iter().for_each(|&l| sizes[l as usize] += 1);
        if sizes.iter().any(|&s| s * 50 < n * n) {
            continue;
        }
        let motions: Vec<RigidMotion> = (0..k).map(|_| random_motion(&mut rng)).collect();
        let values = (0..g.len()).map(|i| motions[truth[i] as usize].eval(g.center_of(i))).collect();
        let field = DisplacementField::new(n, 1.0, values, jumps)?;
        return Ok(PiecewiseFixture { name: format!("chord-{seed}"), field, truth, motions });
    }
    Err(KornError::Internal(format!("no admissible chord layout for seed {seed}")))
}

fn polygon(c: Point, r: f64, sides: usize) -> Vec<Segment> {
    let pt = |k: usize| {
        let a = std::f64::consts::TAU * k as f64 / sides as f64;
        Point::new(c.x + r * a.cos(), c.y + r * a.sin())
    };
    (0..sides).filter_map(|k| Segment::new(pt(k), pt(k + 1)).ok()).collect()
}

/// Centers and radii of the rotating balls, largest first.
pub fn ball_layout(k: usize) -> Vec<(Point, f64)> {
    let w = |j: f64| 1.0 / (j * j.ln().powi(2));
    let radii: Vec<f64> = (0..k).map(|i| 0.5 * w(i as f64 + 2.0) / w(2.0)).collect();
    let mut out = Vec::with_capacity(k);
    let dir = std::f64::consts::FRAC_1_SQRT_2;
    let mut c = Point::new(0.35, 0.05);
    for (i, &r) in radii.iter().enumerate() {
        match i {
            0 => out.push((Point::new(-0.4, -0.3), r)),
            1 => out.push((c, r)),
            _ => {
                let step = radii[i - 1] + r + 0.03;
                c = Point::new(c.x + step * dir, c.y + step * dir);
                out.push((c, r));
            }
        }
    }
    out
}

/// Balls with shrinking radii, each rotating about its center at rate
/// `+-1/r`, on top of a smooth background strain.
pub fn rotating_balls(k: usize, n: usize) -> Result<PiecewiseFixture, KornError> {
    let layout = ball_layout(k);
    let background = |p: Point| [0.1 * p.x * p.y, 0.05 * (p.x * p.x - p.y * p.y)];
    let mut segs = Vec::new();
    for &(c, r) in &layout {
        segs.extend(polygon(c, r, 24));
    }
    let jumps = SegmentSet::from_segments(segs);
    let g = GridGeom::square(n, Point::ORIGIN, 1.0);
    let cuts = EdgeCuts::from_segments(&g, &jumps);
    let (comp, count) = label_components(&Mask::full(n, n), Some(&cuts), Connectivity::Four);
    let mut motions = vec![RigidMotion::default(); count];
    for (j, &(c, r)) in layout.iter().enumerate() {
        let (x, y) = (((c.x - g.origin.x) / g.h) as usize, ((c.y - g.origin.y) / g.h) as usize);
        let d = if j % 2 == 0 { 1.0 / r } else { -1.0 / r };
        // A (x - c) with A = [[0, d], [-d, 0]]
        motions[comp[g.idx(x, y)] as usize] = RigidMotion::new(-d, [-d * c.y, d * c.x]);
    }
    let mut values = vec![[0.0; 2]; g.len()];
    for i in 0..g.len() {
        let p = g.center_of(i);
        let m = motions[comp[i] as usize].eval(p);
        let b = background(p);
        values[i] = [m[0] + b[0], m[1] + b[1]];
    }
    let field = DisplacementField::new(n, 1.0, values, jumps)?;
    Ok(PiecewiseFixture { name: format!("balls-{k}"), field, truth: comp, motions })
}

/// Seeded crack forest: 1 to 50 segments of length `mu/50 .. mu/2`, each
/// opening by a bump that vanishes at the tips, over a smooth background.
pub fn crack_forest(seed: u64, n: usize) -> Result<DisplacementField, KornError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu = 1.0;
    let count = rng.gen_range(1..=50);
    let mut cracks = Vec::with_capacity(count);
    while cracks.len() < count {
        let len = rng.gen_range(mu / 50.0..mu / 2.0);
        let a: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let (dx, dy) = (a.cos() * len, a.sin() * len);
        let lim = 0.95 * mu;
        let p = Point::new(rng.gen_range(-lim..lim), rng.gen_range(-lim..lim));
        let q = Point::new(p.x + dx, p.y + dy);
        if q.x.abs() > lim || q.y.abs() > lim {
            continue;
        }
        let opening = [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)];
        cracks.push((Segment::new(p, q)?, opening));
    }
    let w0 = [rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5)];
    let f = |x: Point| {
        let mut v = [0.05 * w0[0] * (x.x * x.y).sin(), 0.05 * w0[1] * (x.x - x.y).cos()];
        for (s, c) in &cracks {
            let l = s.length();
            let d = Point::new((s.b.x - s.a.x) / l, (s.b.y - s.a.y) / l);
            let r = Point::new(x.x - s.a.x, x.y - s.a.y);
            let t = r.dot(d);
            let nrm = d.cross(r);
            let rad = 0.25 * l;
            if t <= 0.0 || t >= l || nrm.abs() >= rad {
                continue;
            }
            let psi = (std::f64::consts::PI * t / l).sin().powi(2) * (1.0 - (nrm / rad).powi(2)).powi(2);
            let side = if nrm > 0.0 { 0.5 } else { -0.5 };
            v[0] += side * psi * c[0];
            v[1] += side * psi * c[1];
        }
        v
    };
    let jumps = SegmentSet::from_segments(cracks.iter().map(|c| c.0).collect());
    sample_centered(&f, jumps, n, Point::ORIGIN, mu)
}

/// Unit square whose top-right corner triangle of leg `ell` is cut off by a
/// crack and moved by a large rigid motion; the rest carries a small strain.
pub fn detached_corner(ell: f64, n: usize) -> Result<DisplacementField, KornError> {
    if !(ell > 0.0 && ell < 1.0) {
        return Err(KornError::InvalidArgument(format!("corner leg {ell} must lie in (0, 1)")));
    }
    let (c, mu) = unit_square();
    let crack = Segment::new(Point::new(1.0 - ell, 1.0), Point::new(1.0, 1.0 - ell))?;
    let wild = RigidMotion::new(5.0, [3.0, -2.0]);
    let f = |p: Point| {
        if p.x + p.y > 2.0 - ell {
            wild.eval(p)
        } else {
            [0.02 * p.x * p.x + 0.1 - 0.05 * p.y, 0.01 * p.x * p.y + 0.05 * p.x]
        }
    };
    sample_centered(&f, SegmentSet::from_segments(vec![crack]), n, c, mu)
}

/// `u = (x_1, 0)` on the unit square.
pub fn ramp(n: usize) -> Result<DisplacementField, KornError> {
    let (c, mu) = unit_square();
    sample_centered(&|p| [p.x, 0.0], SegmentSet::new(), n, c, mu)
}

/// One rigid motion on `Q_1`, no jump.
pub fn rigid(n: usize, a: RigidMotion) -> Result<DisplacementField, KornError> {
    sample_centered(&|p| a.eval(p), SegmentSet::new(), n, Point::ORIGIN, 1.0)
}

/// Linear strain `u = (s x_1, 0)` on `Q_1`, no jump.
pub fn linear_strain(n: usize, s: f64) -> Result<DisplacementField, KornError> {
    sample_centered(&|p| [s * p.x, 0.0], SegmentSet::new(), n, Point::ORIGIN, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chord_fixtures_are_piecewise_rigid() {
        for seed in 0..5 {
            let fx = chord_fixture(seed, 64).unwrap();
            assert!((1..=6).contains(&fx.pieces()));
            let g = fx.field.geom();
            for i in 0..g.len() {
                let a = fx.motions[fx.truth[i] as usize].eval(g.center_of(i));
                assert_eq!(a, fx.field.values[i]);
            }
        }
        let a = chord_fixture(3, 64).unwrap();
        let b = chord_fixture(3, 64).unwrap();
        assert_eq!(a.field, b.field);
    }

    #[test]
    fn balls_are_disjoint_and_inside() {
        let l = ball_layout(6);
        for (i, &(c, r)) in l.iter().enumerate() {
            assert!(c.x.abs() + r < 1.0 && c.y.abs() + r < 1.0);
            for &(d, s) in &l[..i] {
                assert!(c.dist(d) > r + s);
            }
        }
        assert!(l.windows(2).all(|w| w[1].1 < w[0].1));
    }

    #[test]
    fn forest_respects_segment_ranges() {
        for seed in 0..10 {
            let u = crack_forest(seed, 32).unwrap();
            assert!((1..=50).contains(&u.jumps.len()));
            for s in u.jumps.iter() {
                assert!(s.length() >= 0.02 - 1e-12 && s.length() <= 0.5 + 1e-12);
            }
        }
    }

    #[test]
    fn corner_is_wild() {
        let u = detached_corner(0.2, 64).unwrap();
        let g = u.geom();
        let i = g.idx(63, 63);
        assert!(u.values[i][0].abs() > 1.0);
        assert!(u.values[0][0].abs() < 0.2);
    }
}
