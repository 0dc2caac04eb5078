//! Acceptance gate. Runs every criterion at its pinned tolerance, prints one
//! PASS/FAIL line per criterion and exits non-zero if any fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use korn_core::covering::{density_violations, regularize_jump_density};
use korn_core::decompose::{
    decompose_field, iterate, korn_poincare_small_jump, poincare_split_field, DecomposeConfig, PiecewiseDecomposition,
};
use korn_core::field::{lp_norm, strain, DisplacementField};
use korn_core::fixtures::{chord_fixture, crack_forest, detached_corner, ramp, rotating_balls, sample_centered, PiecewiseFixture};
use korn_core::grid::Mask;
use korn_core::partition::WhitneyCovering;
use korn_core::rigid::fit_rigid;
use korn_core::verify::{audit_covering, oracle_fit, oracle_two_piece_fit};
use korn_core::{Point, RigidMotion, Segment, SegmentSet, Theta};

const N: usize = 256;

struct Outcome {
    pass: bool,
    summary: String,
}

fn outcome(pass: bool, summary: String) -> Outcome {
    Outcome { pass, summary }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len() / 2;
    if s.len() % 2 == 1 {
        s[k]
    } else {
        0.5 * (s[k - 1] + s[k])
    }
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn motion_rel_err(a: &RigidMotion, reference: &RigidMotion) -> f64 {
    let d = a.sub(reference);
    let nd = (d.omega * d.omega + d.b[0] * d.b[0] + d.b[1] * d.b[1]).sqrt();
    let nr = (reference.omega.powi(2) + reference.b[0].powi(2) + reference.b[1].powi(2)).sqrt();
    nd / nr.max(1e-12)
}

/// Shared state: every covering built along the way, for the exhaustive audit.
#[derive(Default)]
struct Coverings {
    list: Vec<(String, DisplacementField, WhitneyCovering)>,
}

impl Coverings {
    fn keep(&mut self, name: String, u: &DisplacementField, d: &PiecewiseDecomposition) {
        if let Some(c) = &d.covering {
            self.list.push((name, u.clone(), c.clone()));
        }
    }
}

fn cfg(p: f64) -> DecomposeConfig {
    DecomposeConfig::new(Theta::Quarter, p)
}

fn criterion_1(chords: &[PiecewiseFixture], decs: &[(PiecewiseDecomposition, Duration)]) -> Outcome {
    let mut bad = Vec::new();
    let mut worst_t = Duration::ZERO;
    let mut worst_v = 0.0f64;
    for (seed, (fx, (d, t))) in chords.iter().zip(decs).enumerate() {
        let u = &fx.field;
        let main = d.piece_areas().iter().filter(|&&a| a >= 4.0 * u.h * u.h).count();
        let bound = 10.0 * u.h * strain(u).max_grad();
        worst_t = worst_t.max(*t);
        worst_v = worst_v.max(d.ledger.v_sup / bound.max(f64::MIN_POSITIVE));
        if main != fx.pieces() || d.ledger.v_sup > bound || *t > Duration::from_secs(30) {
            bad.push(format!("seed {seed}: k={} main={main} |v|={:.2e} bound={bound:.2e} t={t:.1?}", fx.pieces(), d.ledger.v_sup));
        }
    }
    outcome(
        bad.is_empty(),
        format!("{} chord fixtures, worst |v|/bound {worst_v:.2e}, slowest {worst_t:.2?} {}", chords.len(), bad.join("; ")),
    )
}

fn criterion_2(cov: &Coverings) -> Outcome {
    let mut gaps = 0;
    let mut max_overlap = 0;
    let mut max_gap = 0;
    let mut bad = Vec::new();
    for (name, u, c) in &cov.list {
        let a = audit_covering(c, &u.geom());
        gaps += a.gap_violations;
        max_overlap = max_overlap.max(a.max_overlap);
        max_gap = max_gap.max(a.max_gap);
        if a.gap_violations > 0 || a.max_overlap > 12 {
            bad.push(format!("{name}: gaps {} overlap {}", a.gap_violations, a.max_overlap));
        }
    }
    outcome(
        bad.is_empty(),
        format!("{} coverings, gap violations {gaps}, max neighbour gap {max_gap}, max overlap {max_overlap} {}", cov.list.len(), bad.join("; ")),
    )
}

fn criterion_3(fields: &[(String, &DisplacementField)]) -> Outcome {
    let mut bad = Vec::new();
    let mut worst_per = 0.0f64;
    let mut worst_sup = 0.0f64;
    let mut runs = 0;
    let mut check = |name: &str, u: &DisplacementField, rho: f64| {
        runs += 1;
        let cp = match poincare_split_field(u, rho) {
            Ok(c) => c,
            Err(e) => {
                bad.push(format!("{name}: {e}"));
                return None;
            }
        };
        let comps: Vec<Vec<f64>> = (0..2).map(|c| u.values.iter().map(|x| x[c]).collect()).collect();
        let res = cp.residual(&comps);
        for (c, comp) in cp.components.iter().enumerate() {
            let sup = res[c].iter().fold(0.0f64, |a, x| a.max(x.abs()));
            worst_per = worst_per.max(comp.added_perimeter / (2.0 * rho));
            if comp.m > 0.0 {
                worst_sup = worst_sup.max(sup / (2.0 * comp.m));
            }
            if comp.added_perimeter > 2.0 * rho || sup > 2.0 * comp.m {
                bad.push(format!("{name}[{c}] rho={rho}: per {:.4} sup {sup:.3e} M {:.3e}", comp.added_perimeter, comp.m));
            }
        }
        Some(cp)
    };
    let r = ramp(N).unwrap();
    let ramp_per = check("ramp", &r, 2.0).map(|c| c.added_perimeter[0]);
    for (name, u) in fields {
        let h = u.jumps.total_length() + 8.0 * u.mu;
        for rho in [0.25 * h, h, 4.0 * h] {
            check(name, u, rho);
        }
    }
    let ramp_ok = ramp_per.is_some_and(|p| (p - 1.0).abs() < 1e-12);
    if !ramp_ok {
        bad.push(format!("ramp perimeter {ramp_per:?}, expected 1"));
    }
    outcome(
        bad.is_empty(),
        format!(
            "{runs} splits, ramp perimeter {:.3} vs bound 4, worst perimeter/2rho {worst_per:.3}, worst sup/2M {worst_sup:.3} {}",
            ramp_per.unwrap_or(f64::NAN),
            bad.join("; ")
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut c1 = BTreeMap::new();
    let mut c2 = BTreeMap::new();
    let mut detail = Vec::new();
    for n in [128usize, 256, 512] {
        let (mut m1, mut m2) = (0.0f64, 0.0f64);
        for ell in [0.1, 0.2, 0.3] {
            let u = detached_corner(ell, n).unwrap();
            let t = korn_poincare_small_jump(&u, 4.0, 1.0).unwrap();
            let h = t.jump_length;
            m1 = m1.max(t.norms.e_area / (h * h));
            m2 = m2.max(t.norms.linf_outside / (t.e_l2 / h.sqrt()));
        }
        c1.insert(n, m1);
        c2.insert(n, m2);
        detail.push(format!("n={n}: C1 {m1:.3} C2 {m2:.3}"));
    }
    let spread = |m: &BTreeMap<usize, f64>| {
        let v: Vec<f64> = m.values().copied().collect();
        max(&v) / v.iter().copied().fold(f64::INFINITY, f64::min)
    };
    let (s1, s2) = (spread(&c1), spread(&c2));
    outcome(s1 <= 2.0 && s2 <= 2.0, format!("{}; drift C1 {s1:.3}x, C2 {s2:.3}x (limit 2x)", detail.join(", ")))
}

fn criterion_5(forests: &[DisplacementField], cov: &mut Coverings) -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for p in [1.0, 1.5] {
        let mut korn = Vec::new();
        let mut bnd = Vec::new();
        let mut errs = Vec::new();
        for (seed, u) in forests.iter().enumerate() {
            match decompose_field(u, &cfg(p)) {
                Ok((_, d)) => {
                    korn.push(d.ledger.korn_ratio);
                    bnd.push(d.ledger.boundary_ratio);
                    if p == 1.5 {
                        cov.keep(format!("forest-{seed}"), u, &d);
                    }
                }
                Err(e) => errs.push(format!("seed {seed}: {e}")),
            }
        }
        let (km, kx) = (median(&korn), max(&korn));
        let (bm, bx) = (median(&bnd), max(&bnd));
        let ok = errs.is_empty() && kx <= 10.0 * km && bx <= 10.0 * bm && kx.is_finite();
        pass &= ok;
        lines.push(format!(
            "p={p}: korn median {km:.3} max {kx:.3}, boundary median {bm:.3} max {bx:.3}{}",
            if errs.is_empty() { String::new() } else { format!(" errors: {}", errs.join("; ")) }
        ));
    }
    outcome(pass, format!("{} forests; {}", forests.len(), lines.join("; ")))
}

fn criterion_6(cov: &mut Coverings) -> Outcome {
    let mut gu = Vec::new();
    let mut gv = Vec::new();
    for k in [2usize, 4, 6] {
        let fx = rotating_balls(k, N).unwrap();
        let u = &fx.field;
        let s = strain(u);
        gu.push(lp_norm(&s.grad_frobenius(), 1.5, Some(&s.valid), u.h).value);
        match decompose_field(u, &cfg(1.5)) {
            Ok((_, d)) => {
                gv.push(d.ledger.grad_v_p);
                cov.keep(format!("balls-{k}"), u, &d);
            }
            Err(e) => return outcome(false, format!("k={k}: {e}")),
        }
    }
    let mono = gu.windows(2).all(|w| w[1] > w[0]);
    let stable = gv.iter().all(|&v| v <= 2.0 * gv[0] && v >= 0.5 * gv[0]);
    outcome(
        mono && stable,
        format!(
            "|grad u|_1.5 = {:.4} {:.4} {:.4} (increasing: {mono}); |grad v|_1.5 = {:.4} {:.4} {:.4} (within 2x of k=2: {stable})",
            gu[0], gu[1], gu[2], gv[0], gv[1], gv[2]
        ),
    )
}

fn criterion_7(chords: &[PiecewiseFixture], decs: &[(PiecewiseDecomposition, Duration)], forests: &[DisplacementField]) -> Outcome {
    let mut worst_iter = 0.0f64;
    let mut bad = Vec::new();
    for (seed, (fx, (d, _))) in chords.iter().zip(decs).enumerate() {
        let o = match oracle_two_piece_fit(&fx.field, &fx.truth) {
            Ok(o) => o,
            Err(e) => {
                bad.push(format!("seed {seed}: {e}"));
                continue;
            }
        };
        for (t, om) in o.motions.iter().enumerate() {
            let mut votes: BTreeMap<i32, usize> = BTreeMap::new();
            for (i, &l) in fx.truth.iter().enumerate() {
                if l == t as i32 {
                    *votes.entry(d.labels[i]).or_default() += 1;
                }
            }
            let Some((&lab, _)) = votes.iter().max_by_key(|(_, &c)| c) else { continue };
            let err = motion_rel_err(&d.motions[lab as usize], om);
            worst_iter = worst_iter.max(err);
            if err > 1e-6 {
                bad.push(format!("seed {seed} piece {t}: rel {err:.2e}"));
            }
        }
    }
    let mut worst_fit = 0.0f64;
    for (seed, u) in forests.iter().enumerate().take(10) {
        let g = u.geom();
        for stride in [1usize, 3, 7] {
            let region = Mask::from_fn(g.nx, g.ny, |x, y| (x * 5 + y * 3 + seed) % (stride + 1) != 0 || stride == 1);
            let cells: Vec<usize> = region.indices().collect();
            let (Ok(a), Some(b)) = (fit_rigid(u, &region), oracle_fit(u, &cells)) else {
                bad.push(format!("forest {seed}: fit failed"));
                continue;
            };
            let err = (a.omega - b.omega).abs().max((a.b[0] - b.b[0]).abs()).max((a.b[1] - b.b[1]).abs());
            worst_fit = worst_fit.max(err);
            if err > 1e-10 {
                bad.push(format!("forest {seed} stride {stride}: fit diff {err:.2e}"));
            }
        }
    }
    outcome(
        bad.is_empty(),
        format!("iterate vs oracle worst rel {worst_iter:.2e} (limit 1e-6); fit vs dense oracle worst {worst_fit:.2e} (limit 1e-10) {}", bad.join("; ")),
    )
}

/// A dense comb of short parallel cracks that forces the regularization to remove squares.
fn comb(n: usize) -> DisplacementField {
    let mut segs = SegmentSet::new();
    for k in 0..40 {
        let x = -0.5 + 0.0025 * k as f64;
        segs.push(Segment::new(Point::new(x, 0.1), Point::new(x, 0.2)).unwrap());
    }
    sample_centered(&|p| [0.1 * p.y, 0.0], segs, n, Point::ORIGIN, 1.0).unwrap()
}

fn criterion_8(fields: &[(String, &DisplacementField)]) -> Outcome {
    let dense = comb(N);
    let mut all: Vec<(String, &DisplacementField)> = fields.to_vec();
    all.push(("comb".into(), &dense));
    let mut bad = Vec::new();
    let mut worst = 0.0f64;
    let mut removed = 0;
    for (name, u) in &all {
        let reg = regularize_jump_density(u, Theta::Quarter);
        removed += reg.layers.len();
        let (v, w) = density_violations(&reg.gamma, &reg.grid, reg.floor_generation);
        worst = worst.max(w);
        if v > 0 {
            bad.push(format!("{name}: {v} squares"));
        }
    }
    outcome(
        bad.is_empty(),
        format!("{} fields, {removed} removed layers, worst density ratio {worst:.3} {}", all.len(), bad.join("; ")),
    )
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut cov = Coverings::default();

    let chords: Vec<PiecewiseFixture> = (0..20).map(|s| chord_fixture(s, N).unwrap()).collect();
    let decs: Vec<(PiecewiseDecomposition, Duration)> = chords
        .iter()
        .map(|fx| {
            let t = Instant::now();
            let d = iterate(&fx.field, &cfg(1.5)).expect("chord fixture decomposes");
            (d, t.elapsed())
        })
        .collect();
    for (s, (fx, (d, _))) in chords.iter().zip(&decs).enumerate() {
        cov.keep(format!("chord-{s}"), &fx.field, d);
    }
    let forests: Vec<DisplacementField> = (0..50).map(|s| crack_forest(s, N).unwrap()).collect();
    let corners: Vec<DisplacementField> = [0.1, 0.2, 0.3].iter().map(|&l| detached_corner(l, N).unwrap()).collect();
    for (l, u) in [0.1, 0.2, 0.3].iter().zip(&corners) {
        if let Ok((_, d)) = decompose_field(u, &cfg(1.5)) {
            cov.keep(format!("corner-{l}"), u, &d);
        }
    }

    results.push((1, criterion_1(&chords, &decs)));
    results.push((5, criterion_5(&forests, &mut cov)));
    results.push((6, criterion_6(&mut cov)));
    results.push((2, criterion_2(&cov)));

    let mut fields: Vec<(String, &DisplacementField)> = Vec::new();
    fields.extend(chords.iter().enumerate().map(|(s, f)| (format!("chord-{s}"), &f.field)));
    fields.extend(forests.iter().enumerate().map(|(s, u)| (format!("forest-{s}"), u)));
    fields.extend(corners.iter().enumerate().map(|(s, u)| (format!("corner-{s}"), u)));
    results.push((3, criterion_3(&fields)));
    results.push((4, criterion_4()));
    results.push((7, criterion_7(&chords, &decs, &forests)));
    results.push((8, criterion_8(&fields)));

    results.sort_by_key(|(k, _)| *k);
    let mut failed = 0;
    for (k, o) in &results {
        println!("criterion {k}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.summary.trim_end());
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {}/{} criteria passed in {:.1?}", results.len() - failed, results.len(), start.elapsed());
    if failed > 0 {
        std::process::exit(1);
    }
}
