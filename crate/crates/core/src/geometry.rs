//! Points, segments, dyadic squares and their enlargements.
//!
//! Squares of generation `i` have halfside `s_i = mu * theta^i` and tile the
//! domain square `Q_mu` for every `i >= 1`. They are indexed by lattice
//! coordinates `(ix, iy)` counted from the lower-left corner of the domain.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::grid::Mask;
use crate::KornError;

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const ORIGIN: Point = Point { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: Point) -> f64 {
        (self - o).norm()
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, k: f64) -> Point {
        Point::new(self.x * k, self.y * k)
    }
}

impl Neg for Point {
    type Output = Point;
    fn neg(self) -> Point {
        Point::new(-self.x, -self.y)
    }
}

/// Scale ratio between consecutive generations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Theta {
    Half,
    Quarter,
    Eighth,
    Sixteenth,
}

impl Theta {
    pub fn from_f64(t: f64) -> Result<Theta, KornError> {
        let all = [Theta::Half, Theta::Quarter, Theta::Eighth, Theta::Sixteenth];
        all.into_iter()
            .find(|th| (th.value() - t).abs() < 1e-12)
            .ok_or_else(|| KornError::Config(format!("theta = {t} is not one of 1/2, 1/4, 1/8, 1/16")))
    }

    pub fn value(self) -> f64 {
        1.0 / self.fanout() as f64
    }

    /// Number of children per axis, `1/theta`.
    pub fn fanout(self) -> u32 {
        match self {
            Theta::Half => 2,
            Theta::Quarter => 4,
            Theta::Eighth => 8,
            Theta::Sixteenth => 16,
        }
    }

    pub fn log2_fanout(self) -> u32 {
        self.fanout().trailing_zeros()
    }

    pub fn powi(self, i: i32) -> f64 {
        self.value().powi(i)
    }
}

impl Default for Theta {
    fn default() -> Self {
        Theta::Quarter
    }
}

/// Axis-aligned box `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Point,
    pub max: Point,
}

impl Aabb {
    pub fn centered(c: Point, halfside: f64) -> Aabb {
        Aabb {
            min: Point::new(c.x - halfside, c.y - halfside),
            max: Point::new(c.x + halfside, c.y + halfside),
        }
    }

    pub fn contains_open(&self, p: Point) -> bool {
        p.x > self.min.x && p.x < self.max.x && p.y > self.min.y && p.y < self.max.y
    }

    pub fn contains_closed(&self, p: Point) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    /// Half-open `[min, max)` membership used for tiling.
    pub fn contains_halfopen(&self, p: Point) -> bool {
        p.x >= self.min.x && p.x < self.max.x && p.y >= self.min.y && p.y < self.max.y
    }

    pub fn overlaps_open(&self, o: &Aabb) -> bool {
        self.min.x < o.max.x && o.min.x < self.max.x && self.min.y < o.max.y && o.min.y < self.max.y
    }

    pub fn intersects_closed(&self, o: &Aabb) -> bool {
        self.min.x <= o.max.x && o.min.x <= self.max.x && self.min.y <= o.max.y && o.min.y <= self.max.y
    }

    pub fn contains_box(&self, o: &Aabb) -> bool {
        o.min.x >= self.min.x && o.max.x <= self.max.x && o.min.y >= self.min.y && o.max.y <= self.max.y
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn edges(&self) -> [Segment; 4] {
        let (a, b) = (self.min, self.max);
        let c = Point::new(b.x, a.y);
        let d = Point::new(a.x, b.y);
        [Segment { a, b: c }, Segment { a: c, b }, Segment { a: b, b: d }, Segment { a: d, b: a }]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Square {
    pub center: Point,
    pub halfside: f64,
    pub generation: u32,
}

impl Square {
    pub fn bounds(&self) -> Aabb {
        Aabb::centered(self.center, self.halfside)
    }

    /// Diameter `d(Q) = 2*sqrt(2)*s`.
    pub fn diameter(&self) -> f64 {
        2.0 * std::f64::consts::SQRT_2 * self.halfside
    }

    pub fn area(&self) -> f64 {
        4.0 * self.halfside * self.halfside
    }

    pub fn enlarge(&self, e: Enlargement) -> EnlargedSquare {
        EnlargedSquare { base: *self, factor: e }
    }

    pub fn prime(&self) -> Aabb {
        Aabb::centered(self.center, 1.5 * self.halfside)
    }

    pub fn double_prime(&self) -> Aabb {
        Aabb::centered(self.center, 3.0 * self.halfside)
    }

    pub fn triple_prime(&self) -> Aabb {
        Aabb::centered(self.center, 5.0 * self.halfside)
    }
}

/// The three enlargement factors used by the covering construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Enlargement {
    /// `Q' = 3/2 Q`
    Prime,
    /// `Q'' = 3 Q`
    DoublePrime,
    /// `Q''' = 5 Q`
    TriplePrime,
}

impl Enlargement {
    pub fn from_factor(f: f64) -> Result<Enlargement, KornError> {
        match f {
            f if f == 1.5 => Ok(Enlargement::Prime),
            f if f == 3.0 => Ok(Enlargement::DoublePrime),
            f if f == 5.0 => Ok(Enlargement::TriplePrime),
            _ => Err(KornError::InvalidArgument(format!("enlargement factor {f} not in {{3/2, 3, 5}}"))),
        }
    }

    pub fn factor(self) -> f64 {
        match self {
            Enlargement::Prime => 1.5,
            Enlargement::DoublePrime => 3.0,
            Enlargement::TriplePrime => 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnlargedSquare {
    pub base: Square,
    pub factor: Enlargement,
}

impl EnlargedSquare {
    pub fn halfside(&self) -> f64 {
        self.base.halfside * self.factor.factor()
    }

    pub fn bounds(&self) -> Aabb {
        Aabb::centered(self.base.center, self.halfside())
    }
}

pub fn enlarge(sq: &Square, factor: f64) -> Result<EnlargedSquare, KornError> {
    Ok(sq.enlarge(Enlargement::from_factor(factor)?))
}

/// Anything with an axis-aligned extent; used by the measure routines.
pub trait HasBounds {
    fn aabb(&self) -> Aabb;
}

impl HasBounds for Aabb {
    fn aabb(&self) -> Aabb {
        *self
    }
}

impl HasBounds for Square {
    fn aabb(&self) -> Aabb {
        self.bounds()
    }
}

impl HasBounds for EnlargedSquare {
    fn aabb(&self) -> Aabb {
        self.bounds()
    }
}

/// The dyadic lattice attached to a domain square `Q_mu` centered at `center`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DyadicGrid {
    pub center: Point,
    pub mu: f64,
    pub theta: Theta,
}

impl DyadicGrid {
    pub fn new(mu: f64, theta: Theta) -> Self {
        DyadicGrid { center: Point::ORIGIN, mu, theta }
    }

    pub fn domain(&self) -> Aabb {
        Aabb::centered(self.center, self.mu)
    }

    pub fn halfside(&self, i: u32) -> f64 {
        self.mu * self.theta.powi(i as i32)
    }

    /// Squares per axis at generation `i`.
    pub fn count(&self, i: u32) -> u64 {
        (self.theta.fanout() as u64).pow(i)
    }

    pub fn square(&self, i: u32, ix: i64, iy: i64) -> Square {
        let s = self.halfside(i);
        let lo = self.domain().min;
        Square {
            center: Point::new(lo.x + (2 * ix + 1) as f64 * s, lo.y + (2 * iy + 1) as f64 * s),
            halfside: s,
            generation: i,
        }
    }

    /// Lattice index of the generation-`i` square containing `p` (half-open convention).
    pub fn index_of(&self, i: u32, p: Point) -> (i64, i64) {
        let side = 2.0 * self.halfside(i);
        let lo = self.domain().min;
        (((p.x - lo.x) / side).floor() as i64, ((p.y - lo.y) / side).floor() as i64)
    }

    /// Range of lattice indices (inclusive) whose closed squares meet the closed box.
    pub fn index_range(&self, i: u32, b: &Aabb) -> (i64, i64, i64, i64) {
        let side = 2.0 * self.halfside(i);
        let lo = self.domain().min;
        let x0 = ((b.min.x - lo.x) / side).floor() as i64 - 1;
        let x1 = ((b.max.x - lo.x) / side).floor() as i64 + 1;
        let y0 = ((b.min.y - lo.y) / side).floor() as i64 - 1;
        let y1 = ((b.max.y - lo.y) / side).floor() as i64 + 1;
        (x0, x1, y0, y1)
    }
}

/// Children of `sq` at the next generation.
pub fn dyadic_children(sq: &Square, theta: Theta) -> Vec<Square> {
    let f = theta.fanout() as i64;
    let s = sq.halfside / f as f64;
    let lo = sq.bounds().min;
    let mut out = Vec::with_capacity((f * f) as usize);
    for iy in 0..f {
        for ix in 0..f {
            out.push(Square {
                center: Point::new(lo.x + (2 * ix + 1) as f64 * s, lo.y + (2 * iy + 1) as f64 * s),
                halfside: s,
                generation: sq.generation + 1,
            });
        }
    }
    out
}

/// Validated variant of [`dyadic_children`] accepting a raw ratio.
pub fn dyadic_children_checked(sq: &Square, theta: f64) -> Result<Vec<Square>, KornError> {
    Ok(dyadic_children(sq, Theta::from_f64(theta)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: Point,
    pub b: Point,
}

impl Segment {
    pub fn new(a: Point, b: Point) -> Result<Segment, KornError> {
        if !(a.x.is_finite() && a.y.is_finite() && b.x.is_finite() && b.y.is_finite()) {
            return Err(KornError::InvalidArgument("segment endpoint not finite".into()));
        }
        if a.dist(b) == 0.0 {
            return Err(KornError::InvalidArgument(format!("degenerate segment at ({}, {})", a.x, a.y)));
        }
        Ok(Segment { a, b })
    }

    pub fn length(&self) -> f64 {
        self.a.dist(self.b)
    }

    pub fn at(&self, t: f64) -> Point {
        self.a + (self.b - self.a) * t
    }

    pub fn bounds(&self) -> Aabb {
        Aabb {
            min: Point::new(self.a.x.min(self.b.x), self.a.y.min(self.b.y)),
            max: Point::new(self.a.x.max(self.b.x), self.a.y.max(self.b.y)),
        }
    }

    /// Parameter interval of the part inside the closed box (Liang-Barsky).
    pub fn clip_params(&self, b: &Aabb) -> Option<(f64, f64)> {
        let d = self.b - self.a;
        let mut t0 = 0.0f64;
        let mut t1 = 1.0f64;
        let checks = [
            (-d.x, self.a.x - b.min.x),
            (d.x, b.max.x - self.a.x),
            (-d.y, self.a.y - b.min.y),
            (d.y, b.max.y - self.a.y),
        ];
        for (p, q) in checks {
            if p == 0.0 {
                if q < 0.0 {
                    return None;
                }
            } else {
                let r = q / p;
                if p < 0.0 {
                    t0 = t0.max(r);
                } else {
                    t1 = t1.min(r);
                }
            }
        }
        if t0 <= t1 {
            Some((t0, t1))
        } else {
            None
        }
    }

    /// Part inside the closed box, if it has positive length.
    pub fn clip(&self, b: &Aabb) -> Option<Segment> {
        let (t0, t1) = self.clip_params(b)?;
        if t1 - t0 <= 0.0 {
            return None;
        }
        Some(Segment { a: self.at(t0), b: self.at(t1) })
    }

    /// Closed-segment intersection test; touching endpoints count.
    pub fn intersects(&self, o: &Segment) -> bool {
        let (p, r) = (self.a, self.b - self.a);
        let (q, s) = (o.a, o.b - o.a);
        let scale = r.norm().max(s.norm());
        let eps = 1e-12 * scale * scale;
        let rxs = r.cross(s);
        let qp = q - p;
        if rxs.abs() <= eps {
            if qp.cross(r).abs() > eps * (1.0 + qp.norm() / scale.max(1e-300)) {
                return false;
            }
            let rr = r.dot(r);
            let t0 = qp.dot(r) / rr;
            let t1 = t0 + s.dot(r) / rr;
            let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
            return hi >= -1e-12 && lo <= 1.0 + 1e-12;
        }
        let t = qp.cross(s) / rxs;
        let u = qp.cross(r) / rxs;
        let tol = 1e-12;
        t >= -tol && t <= 1.0 + tol && u >= -tol && u <= 1.0 + tol
    }

    /// Closest point on the segment to `p`, with its parameter.
    pub fn project(&self, p: Point) -> (f64, Point) {
        let d = self.b - self.a;
        let t = ((p - self.a).dot(d) / d.dot(d)).clamp(0.0, 1.0);
        (t, self.at(t))
    }

    pub fn dist_to_point(&self, p: Point) -> f64 {
        self.project(p).1.dist(p)
    }

    /// Distance between two segments with a pair of witness points.
    pub fn closest_points(&self, o: &Segment) -> (f64, Point, Point) {
        if self.intersects(o) {
            let p = self.intersection_point(o).unwrap_or(self.a);
            return (0.0, p, p);
        }
        let cands = [
            (self.a, o.project(self.a).1),
            (self.b, o.project(self.b).1),
            (self.project(o.a).1, o.a),
            (self.project(o.b).1, o.b),
        ];
        let mut best = (f64::INFINITY, self.a, o.a);
        for (p, q) in cands {
            let d = p.dist(q);
            if d < best.0 {
                best = (d, p, q);
            }
        }
        best
    }

    fn intersection_point(&self, o: &Segment) -> Option<Point> {
        let (p, r) = (self.a, self.b - self.a);
        let (q, s) = (o.a, o.b - o.a);
        let rxs = r.cross(s);
        if rxs == 0.0 {
            for c in [o.a, o.b, self.a, self.b] {
                if self.dist_to_point(c) <= 1e-12 * r.norm() && o.dist_to_point(c) <= 1e-12 * s.norm() {
                    return Some(c);
                }
            }
            return None;
        }
        let t = ((q - p).cross(s) / rxs).clamp(0.0, 1.0);
        Some(self.at(t))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentSet {
    pub segments: Vec<Segment>,
}

impl SegmentSet {
    pub fn new() -> Self {
        SegmentSet::default()
    }

    pub fn from_segments(segments: Vec<Segment>) -> Self {
        SegmentSet { segments }
    }

    pub fn push(&mut self, s: Segment) {
        self.segments.push(s);
    }

    pub fn extend(&mut self, o: &SegmentSet) {
        self.segments.extend_from_slice(&o.segments);
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn total_length(&self) -> f64 {
        self.segments.iter().map(Segment::length).sum()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Segment> {
        self.segments.iter()
    }

    pub fn bounds(&self) -> Option<Aabb> {
        let mut it = self.segments.iter();
        let first = it.next()?.bounds();
        Some(it.fold(first, |acc, s| {
            let b = s.bounds();
            Aabb {
                min: Point::new(acc.min.x.min(b.min.x), acc.min.y.min(b.min.y)),
                max: Point::new(acc.max.x.max(b.max.x), acc.max.y.max(b.max.y)),
            }
        }))
    }

    /// Parts of the segments inside the closed box.
    pub fn clipped(&self, b: &Aabb) -> SegmentSet {
        SegmentSet { segments: self.segments.iter().filter_map(|s| s.clip(b)).collect() }
    }

    /// Segments with the parts inside any of the closed boxes removed.
    pub fn minus_boxes(&self, boxes: &[Aabb]) -> SegmentSet {
        let mut out = SegmentSet::new();
        for s in &self.segments {
            let sb = s.bounds();
            let mut cut: Vec<(f64, f64)> = boxes
                .iter()
                .filter(|b| b.intersects_closed(&sb))
                .filter_map(|b| s.clip_params(b))
                .collect();
            cut.sort_by(|x, y| x.0.total_cmp(&y.0));
            let mut t = 0.0;
            for (c0, c1) in merge_intervals(cut) {
                if c0 > t {
                    out.push(Segment { a: s.at(t), b: s.at(c0) });
                }
                t = t.max(c1);
            }
            if t < 1.0 {
                out.push(Segment { a: s.at(t), b: s.b });
            }
        }
        out.segments.retain(|s| s.length() > 1e-14 * (1.0 + s.a.norm()));
        out
    }
}

fn merge_intervals(mut v: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    v.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(v.len());
    for (a, b) in v {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

/// Length of the part of `s` lying in the open box.
pub fn segment_length_in_open(s: &Segment, b: &Aabb) -> f64 {
    let Some((t0, t1)) = s.clip_params(b) else {
        return 0.0;
    };
    if t1 <= t0 {
        return 0.0;
    }
    let p = s.at(t0);
    let q = s.at(t1);
    let tol = 1e-12 * (b.width().max(b.height()) + p.norm());
    // a piece running along an edge of the box is outside the open box
    let on_vertical = |x: f64| (p.x - x).abs() <= tol && (q.x - x).abs() <= tol;
    let on_horizontal = |y: f64| (p.y - y).abs() <= tol && (q.y - y).abs() <= tol;
    if on_vertical(b.min.x) || on_vertical(b.max.x) || on_horizontal(b.min.y) || on_horizontal(b.max.y) {
        return 0.0;
    }
    (t1 - t0) * s.length()
}

/// Exact one-dimensional measure of `segs` inside the open square.
pub fn segment_measure_in<B: HasBounds>(sq: &B, segs: &SegmentSet) -> f64 {
    let b = sq.aabb();
    segs.iter().map(|s| segment_length_in_open(s, &b)).sum()
}

/// Measure of `segs` inside a union of closed boxes; overlaps of the boxes are counted once.
pub fn measure_in_union(segs: &SegmentSet, boxes: &[Aabb]) -> f64 {
    let mut total = 0.0;
    for s in segs.iter() {
        let sb = s.bounds();
        let iv: Vec<(f64, f64)> = boxes
            .iter()
            .filter(|b| b.intersects_closed(&sb))
            .filter_map(|b| s.clip_params(b))
            .collect();
        let len = s.length();
        total += merge_intervals(iv).into_iter().map(|(a, b)| (b - a) * len).sum::<f64>();
    }
    total
}

/// Fills the bounded holes of a cell region (complement taken with 4-connectivity).
pub fn saturate(region: &Mask) -> Mask {
    let (nx, ny) = (region.nx, region.ny);
    let mut outside = Mask::new(nx, ny);
    let mut stack = Vec::new();
    for x in 0..nx {
        for y in [0, ny - 1] {
            if !region.get(x, y) && !outside.get(x, y) {
                outside.set(x, y, true);
                stack.push((x, y));
            }
        }
    }
    for y in 0..ny {
        for x in [0, nx - 1] {
            if !region.get(x, y) && !outside.get(x, y) {
                outside.set(x, y, true);
                stack.push((x, y));
            }
        }
    }
    while let Some((x, y)) = stack.pop() {
        for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
            let (xx, yy) = (x as i64 + dx, y as i64 + dy);
            if xx < 0 || yy < 0 || xx >= nx as i64 || yy >= ny as i64 {
                continue;
            }
            let (xx, yy) = (xx as usize, yy as usize);
            if !region.get(xx, yy) && !outside.get(xx, yy) {
                outside.set(xx, yy, true);
                stack.push((xx, yy));
            }
        }
    }
    let mut out = Mask::new(nx, ny);
    for i in 0..out.data.len() {
        out.data[i] = !outside.data[i];
    }
    out
}
