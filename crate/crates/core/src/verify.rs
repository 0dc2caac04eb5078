//! Brute-force oracles and the corpus harness that turns the pipelines'
//! inequalities into measured constants and their exact invariants into
//! hard checks.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covering::{density_violations, regularize_jump_density};
use crate::decompose::{
    decompose_field, decompose_square, korn_poincare_small_jump, poincare_split_field, DecomposeConfig,
    PiecewiseDecomposition,
};
use crate::field::{strain, DisplacementField};
use crate::fixtures;
use crate::geometry::{Aabb, Point, Theta};
use crate::grid::{EdgeCuts, GridGeom};
use crate::partition::WhitneyCovering;
use crate::rigid::RigidMotion;
use crate::KornError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleFit {
    pub motions: Vec<RigidMotion>,
    /// `L^2` norm of `u - a_label` over all labelled cells.
    pub residual: f64,
    pub piece_residuals: Vec<f64>,
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for c in 0..3 {
        let p = (c..3).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[p][c].abs() < 1e-300 {
            return None;
        }
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..3 {
            let f = a[r][c] / a[c][c];
            for k in c..3 {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = [0.0; 3];
    for r in (0..3).rev() {
        let s: f64 = (r + 1..3).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Dense normal-equation fit of `(omega, b)` on raw cell-center
/// coordinates, written independently of the pipeline's fitter.
pub fn oracle_fit(u: &DisplacementField, cells: &[usize]) -> Option<RigidMotion> {
    let n = u.n;
    let h = 2.0 * u.mu / n as f64;
    let mut a = [[0.0; 3]; 3];
    let mut b = [0.0; 3];
    for &i in cells {
        let x = u.center.x - u.mu + ((i % n) as f64 + 0.5) * h;
        let y = u.center.y - u.mu + ((i / n) as f64 + 0.5) * h;
        // rows of the design matrix: [-y, 1, 0] and [x, 0, 1]
        let r1 = [-y, 1.0, 0.0];
        let r2 = [x, 0.0, 1.0];
        let v = u.values[i];
        for p in 0..3 {
            for q in 0..3 {
                a[p][q] += r1[p] * r1[q] + r2[p] * r2[q];
            }
            b[p] += r1[p] * v[0] + r2[p] * v[1];
        }
    }
    let s = solve3(a, b)?;
    Some(RigidMotion::new(s[0], [s[1], s[2]]))
}

/// Independent per-label rigid fits for a known label map.
pub fn oracle_two_piece_fit(u: &DisplacementField, labels: &[i32]) -> Result<OracleFit, KornError> {
    if labels.len() != u.values.len() {
        return Err(KornError::InvalidArgument("label map does not match the field".into()));
    }
    let count = labels.iter().map(|&l| l + 1).max().unwrap_or(0).max(0) as usize;
    let mut cells = vec![Vec::new(); count];
    for (i, &l) in labels.iter().enumerate() {
        if l >= 0 {
            cells[l as usize].push(i);
        }
    }
    let h = 2.0 * u.mu / u.n as f64;
    let mut motions = Vec::with_capacity(count);
    let mut piece_residuals = Vec::with_capacity(count);
    let mut total = 0.0;
    for (l, c) in cells.iter().enumerate() {
        let m = oracle_fit(u, c).ok_or_else(|| KornError::Degenerate(format!("label {l} has a singular fit")))?;
        let mut s = 0.0;
        for &i in c {
            let x = u.center.x - u.mu + ((i % u.n) as f64 + 0.5) * h;
            let y = u.center.y - u.mu + ((i / u.n) as f64 + 0.5) * h;
            let a = m.eval(Point::new(x, y));
            s += (u.values[i][0] - a[0]).powi(2) + (u.values[i][1] - a[1]).powi(2);
        }
        total += s;
        piece_residuals.push((s * h * h).sqrt());
        motions.push(m);
    }
    Ok(OracleFit { motions, residual: (total * h * h).sqrt(), piece_residuals })
}

/// Length of the boundary of `{u > t}` off the cut edges, by direct edge count.
pub fn oracle_level_perimeter(geom: &GridGeom, vals: &[f64], cuts: Option<&EdgeCuts>, t: f64) -> f64 {
    let (nx, ny) = (geom.nx, geom.ny);
    let mut count = 0usize;
    for y in 0..ny {
        for x in 0..nx {
            let i = y * nx + x;
            let above = vals[i] > t;
            if x + 1 < nx && (vals[i + 1] > t) != above && !cuts.is_some_and(|c| c.cut_right(x, y)) {
                count += 1;
            }
            if y + 1 < ny && (vals[i + nx] > t) != above && !cuts.is_some_and(|c| c.cut_up(x, y)) {
                count += 1;
            }
        }
    }
    count as f64 * geom.h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoveringAudit {
    pub squares: usize,
    pub pairs_checked: usize,
    /// Pairs with overlapping `Q'` whose generations differ by more than one.
    pub gap_violations: usize,
    pub max_gap: u32,
    pub max_overlap: usize,
}

/// Exhaustive pairwise and per-cell audit of a covering.
pub fn audit_covering(cov: &WhitneyCovering, geom: &GridGeom) -> CoveringAudit {
    let primes: Vec<Aabb> = cov.squares.iter().map(|s| s.square.prime()).collect();
    let gens: Vec<u32> = cov.squares.iter().map(|s| s.square.generation).collect();
    let mut pairs = 0;
    let mut bad = 0;
    let mut max_gap = 0;
    for i in 0..primes.len() {
        for j in i + 1..primes.len() {
            let (a, b) = (&primes[i], &primes[j]);
            if a.min.x < b.max.x && b.min.x < a.max.x && a.min.y < b.max.y && b.min.y < a.max.y {
                pairs += 1;
                let gap = gens[i].abs_diff(gens[j]);
                max_gap = max_gap.max(gap);
                if gap > 1 {
                    bad += 1;
                }
            }
        }
    }
    let mut count = vec![0usize; geom.len()];
    let dom = geom.bounds();
    let span = |lo: f64, hi: f64, o: f64, n: usize| {
        let a = (((lo - o) / geom.h - 1.0).floor().max(0.0) as usize).min(n);
        let b = (((hi - o) / geom.h + 1.0).ceil().max(0.0) as usize).min(n);
        a..b
    };
    for b in &primes {
        for y in span(b.min.y, b.max.y, dom.min.y, geom.ny) {
            for x in span(b.min.x, b.max.x, dom.min.x, geom.nx) {
                let p = geom.center(x, y);
                if p.x > b.min.x && p.x < b.max.x && p.y > b.min.y && p.y < b.max.y {
                    count[y * geom.nx + x] += 1;
                }
            }
        }
    }
    CoveringAudit {
        squares: primes.len(),
        pairs_checked: pairs,
        gap_violations: bad,
        max_gap,
        max_overlap: count.into_iter().max().unwrap_or(0),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerSample {
    pub fixture: String,
    pub lhs: f64,
    pub rhs_core: f64,
    /// `lhs / rhs_core`; `None` when both vanish.
    pub constant: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    /// The inequality `lhs <= C rhs_core` being measured.
    pub inequality: String,
    pub samples: Vec<LedgerSample>,
    pub max: Option<f64>,
    pub p95: Option<f64>,
    pub median: Option<f64>,
    /// Fixtures whose constant exceeds the alarm factor times the median.
    pub alarms: Vec<String>,
}

impl LedgerEntry {
    fn new(inequality: &str) -> Self {
        LedgerEntry { inequality: inequality.into(), samples: Vec::new(), max: None, p95: None, median: None, alarms: Vec::new() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstantLedger {
    pub entries: BTreeMap<String, LedgerEntry>,
}

/// Nearest-rank quantile of a non-empty sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let k = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[k - 1]
}

impl ConstantLedger {
    pub fn record(&mut self, id: &str, inequality: &str, fixture: &str, lhs: f64, rhs_core: f64) {
        let tiny = 1e-14 * (1.0 + lhs.abs());
        let constant = if rhs_core > tiny {
            Some(lhs / rhs_core)
        } else if lhs.abs() <= tiny {
            None
        } else {
            Some(f64::INFINITY)
        };
        self.entries
            .entry(id.to_string())
            .or_insert_with(|| LedgerEntry::new(inequality))
            .samples
            .push(LedgerSample { fixture: fixture.into(), lhs, rhs_core, constant });
    }

    /// Commutative merge; samples are kept sorted by fixture name.
    pub fn merge(mut self, other: ConstantLedger) -> ConstantLedger {
        for (k, e) in other.entries {
            let dst = self.entries.entry(k).or_insert_with(|| LedgerEntry::new(&e.inequality));
            dst.samples.extend(e.samples);
            dst.samples.sort_by(|a, b| a.fixture.cmp(&b.fixture));
        }
        self
    }

    /// Fills in the statistics and the alarms at `alarm_factor` times the median.
    pub fn finalize(&mut self, alarm_factor: f64) {
        for e in self.entries.values_mut() {
            e.samples.sort_by(|a, b| a.fixture.cmp(&b.fixture));
            let mut cs: Vec<f64> = e.samples.iter().filter_map(|s| s.constant).collect();
            cs.sort_by(f64::total_cmp);
            if cs.is_empty() {
                e.max = None;
                e.p95 = None;
                e.median = None;
                e.alarms.clear();
                continue;
            }
            let med = quantile(&cs, 0.5);
            e.max = cs.last().copied();
            e.p95 = Some(quantile(&cs, 0.95));
            e.median = Some(med);
            e.alarms = e
                .samples
                .iter()
                .filter(|s| s.constant.is_some_and(|c| c > alarm_factor * med && c > 0.0))
                .map(|s| s.fixture.clone())
                .collect();
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteFailure {
    pub fixture: String,
    pub check: String,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteOutcome {
    pub ledger: ConstantLedger,
    pub failures: Vec<SuiteFailure>,
    pub fixtures: Vec<String>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CorpusFixture {
    Rigid,
    LinearStrain,
    Ramp,
    Chord(u64),
    Balls(usize),
    Forest(u64),
    Corner(f64),
}

impl CorpusFixture {
    pub fn name(&self) -> String {
        match self {
            CorpusFixture::Rigid => "rigid".into(),
            CorpusFixture::LinearStrain => "linear-strain".into(),
            CorpusFixture::Ramp => "ramp".into(),
            CorpusFixture::Chord(s) => format!("chord-{s:02}"),
            CorpusFixture::Balls(k) => format!("balls-{k}"),
            CorpusFixture::Forest(s) => format!("forest-{s:02}"),
            CorpusFixture::Corner(l) => format!("corner-{l:.2}"),
        }
    }

    pub fn build(&self, n: usize) -> Result<DisplacementField, KornError> {
        match self {
            CorpusFixture::Rigid => fixtures::rigid(n, RigidMotion::new(0.4, [1.0, -0.5])),
            CorpusFixture::LinearStrain => fixtures::linear_strain(n, 0.01),
            CorpusFixture::Ramp => fixtures::ramp(n),
            CorpusFixture::Chord(s) => Ok(fixtures::chord_fixture(*s, n)?.field),
            CorpusFixture::Balls(k) => Ok(fixtures::rotating_balls(*k, n)?.field),
            CorpusFixture::Forest(s) => fixtures::crack_forest(*s, n),
            CorpusFixture::Corner(l) => fixtures::detached_corner(*l, n),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub name: String,
    pub n: usize,
    pub fixtures: Vec<CorpusFixture>,
}

impl CorpusSpec {
    /// Named corpora: `rigid`, `quick` and `default`.
    pub fn named(name: &str, n: usize) -> Result<CorpusSpec, KornError> {
        let fixtures = match name {
            "rigid" => vec![CorpusFixture::Rigid],
            "quick" => vec![
                CorpusFixture::Rigid,
                CorpusFixture::Ramp,
                CorpusFixture::Chord(0),
                CorpusFixture::Balls(2),
                CorpusFixture::Forest(0),
                CorpusFixture::Corner(0.2),
            ],
            "default" => {
                let mut f = vec![CorpusFixture::Rigid, CorpusFixture::LinearStrain, CorpusFixture::Ramp];
                f.extend((0..6).map(CorpusFixture::Chord));
                f.extend([2, 4, 6].map(CorpusFixture::Balls));
                f.extend((0..6).map(CorpusFixture::Forest));
                f.extend([0.1, 0.2, 0.3].map(CorpusFixture::Corner));
                f
            }
            other => return Err(KornError::Config(format!("unknown corpus '{other}'"))),
        };
        if n < 32 || !n.is_power_of_two() {
            return Err(KornError::Config(format!("corpus resolution {n} must be a power of two >= 32")));
        }
        Ok(CorpusSpec { name: name.into(), n, fixtures })
    }
}

/// Exact checks and ledger samples for one decomposition.
fn check_decomposition(
    name: &str,
    u: &DisplacementField,
    d: &PiecewiseDecomposition,
    ledger: &mut ConstantLedger,
    failures: &mut Vec<SuiteFailure>,
) {
    let mut fail = |check: &str, detail: String| {
        failures.push(SuiteFailure { fixture: name.into(), check: check.into(), detail });
    };
    let scale = 1e-9 * (1.0 + u.sup_norm());
    let rec = d.reconstruct();
    let err = rec.iter().zip(&u.values).fold(0.0f64, |a, (x, y)| a.max((x[0] - y[0]).abs().max((x[1] - y[1]).abs())));
    if err > scale {
        fail("reconstruction", format!("max error {err:.3e}"));
    }
    let mut areas = vec![0usize; d.count];
    d.labels.iter().for_each(|&l| areas[l as usize] += 1);
    if areas.iter().any(|&a| a == 0) {
        fail("labels", "empty piece".into());
    }
    let s = strain(u);
    let l = &d.ledger;
    if l.e_l2 <= 1e-9 * (1.0 + u.sup_norm()) {
        let bound = 10.0 * u.h * s.max_grad();
        if l.v_sup > bound.max(scale) {
            fail("piecewise-rigidity", format!("sup |v| = {:.3e} above {:.3e}", l.v_sup, bound));
        }
    }
    if let Some(cov) = &d.covering {
        let audit = audit_covering(cov, &u.geom());
        if audit.gap_violations > 0 {
            fail("covering-neighbours", format!("{} pairs with generation gap {}", audit.gap_violations, audit.max_gap));
        }
        if audit.max_overlap > 12 {
            fail("covering-overlap", format!("{} squares overlap", audit.max_overlap));
        }
    }
    ledger.record("korn_p", "||grad v||_p <= C ||e(u)||_2", name, l.grad_v_p, l.e_l2);
    ledger.record("korn_p_prime", "||grad v||_p' <= C ||e(u)||_2", name, l.grad_v_p_prime, l.e_l2);
    ledger.record("sup_bound", "||v||_inf <= C ||e(u)||_2", name, l.v_sup, l.e_l2);
    ledger.record(
        "partition_perimeter",
        "sum_j H1(boundary P_j) <= C (H1(J) + H1(boundary Q))",
        name,
        l.boundary_sum,
        l.jump_length + 8.0 * u.mu,
    );
}

fn run_fixture(fx: &CorpusFixture, n: usize, cfg: &DecomposeConfig) -> Result<(ConstantLedger, Vec<SuiteFailure>), KornError> {
    let name = fx.name();
    let u = fx.build(n)?;
    let mut ledger = ConstantLedger::default();
    let mut failures = Vec::new();
    let jl = u.jumps.total_length();

    let reg = regularize_jump_density(&u, cfg.theta);
    let (viol, _) = density_violations(&reg.gamma, &reg.grid, reg.floor_generation);
    if viol > 0 {
        failures.push(SuiteFailure { fixture: name.clone(), check: "regularization".into(), detail: format!("{viol} dense squares") });
    }
    if jl > 0.0 {
        ledger.record("regularization_boundary", "H1(removed boundaries) <= C H1(J)", &name, reg.removed_boundary_total, jl);
    }

    match decompose_field(&u, cfg) {
        Ok((_, d)) => check_decomposition(&name, &u, &d, &mut ledger, &mut failures),
        Err(e) => failures.push(SuiteFailure { fixture: name.clone(), check: "decompose".into(), detail: e.to_string() }),
    }
    if reg.layers.is_empty() {
        let sq = decompose_square(&u, cfg)?;
        if jl > 0.0 {
            let th = cfg.theta.value();
            ledger.record("square_exceptional", "|E_u| <= c mu theta^2 H1(J)", &name, sq.e.count() as f64 * u.h * u.h, u.mu * th * th * jl);
        }
    }

    let rho = jl + 8.0 * u.mu;
    let cp = poincare_split_field(&u, rho)?;
    let comps: Vec<Vec<f64>> = (0..2).map(|c| u.values.iter().map(|x| x[c]).collect()).collect();
    let v = cp.residual(&comps);
    for (c, comp) in cp.components.iter().enumerate() {
        if cp.added_perimeter[c] > 2.0 * rho * (1.0 + 1e-12) {
            failures.push(SuiteFailure {
                fixture: name.clone(),
                check: "coarea-perimeter".into(),
                detail: format!("component {c}: {:.4} above {:.4}", cp.added_perimeter[c], 2.0 * rho),
            });
        }
        let sup = v[c].iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if sup > 2.0 * comp.m * (1.0 + 1e-12) + 1e-300 {
            failures.push(SuiteFailure {
                fixture: name.clone(),
                check: "coarea-sup".into(),
                detail: format!("component {c}: {sup:.4e} above 2M = {:.4e}", 2.0 * comp.m),
            });
        }
        ledger.record("coarea_perimeter", "added perimeter <= 2 rho", &name, cp.added_perimeter[c], rho);
    }

    if jl > 0.0 {
        let t = korn_poincare_small_jump(&u, 4.0, 1.0)?;
        ledger.record("truncation_area", "|E| <= C H1(J)^2", &name, t.norms.e_area, jl * jl);
        ledger.record(
            "truncation_sup",
            "||u - a||_inf(Q \\ E) <= C H1(J)^(-1/2) ||e(u)||_2",
            &name,
            t.norms.linf_outside,
            t.e_l2 / jl.sqrt(),
        );
        ledger.record("truncation_perimeter", "H1(boundary E) <= C H1(J)", &name, t.norms.e_perimeter, jl);
    }
    Ok((ledger, failures))
}

/// Runs every pipeline on the corpus, asserting the exact invariants and
/// collecting the empirical constants of the inequalities.
pub fn run_suite(corpus: &CorpusSpec, cfg: &DecomposeConfig, alarm_factor: f64) -> SuiteOutcome {
    let results: Vec<(String, Result<(ConstantLedger, Vec<SuiteFailure>), KornError>)> =
        corpus.fixtures.par_iter().map(|fx| (fx.name(), run_fixture(fx, corpus.n, cfg))).collect();
    let mut ledger = ConstantLedger::default();
    let mut failures = Vec::new();
    let mut names = Vec::new();
    for (name, r) in results {
        names.push(name.clone());
        match r {
            Ok((l, f)) => {
                ledger = ledger.merge(l);
                failures.extend(f);
            }
            Err(e) => failures.push(SuiteFailure { fixture: name, check: "run".into(), detail: e.to_string() }),
        }
    }
    ledger.finalize(alarm_factor);
    let passed = failures.is_empty();
    SuiteOutcome { ledger, failures, fixtures: names, passed }
}

/// Default pipeline configuration of the suite.
pub fn suite_config() -> DecomposeConfig {
    DecomposeConfig::new(Theta::Quarter, 1.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SegmentSet;
    use crate::rigid::fit_cells;

    #[test]
    fn two_rigid_halves_have_zero_residual() {
        let a = RigidMotion::new(0.3, [1.0, 2.0]);
        let b = RigidMotion::new(-0.1, [0.0, -1.0]);
        let u = fixtures::sample_centered(&|p| if p.x < 0.0 { a.eval(p) } else { b.eval(p) }, SegmentSet::new(), 32, Point::ORIGIN, 1.0)
            .unwrap();
        let g = u.geom();
        let labels: Vec<i32> = (0..g.len()).map(|i| i32::from(g.center_of(i).x >= 0.0)).collect();
        let o = oracle_two_piece_fit(&u, &labels).unwrap();
        assert!(o.residual < 1e-12);
        assert!(o.motions[0].sub(&a).frobenius() < 1e-12 && o.motions[1].sub(&b).frobenius() < 1e-12);
    }

    #[test]
    fn residual_is_linear_in_the_perturbation() {
        let mut res = Vec::new();
        for eps in [1e-3, 1e-2, 1e-1] {
            let u = fixtures::sample_centered(
                &|p| if p.x < 0.0 { [1.0, 0.0] } else { [eps * p.x, 0.5] },
                SegmentSet::new(),
                32,
                Point::ORIGIN,
                1.0,
            )
            .unwrap();
            let g = u.geom();
            let labels: Vec<i32> = (0..g.len()).map(|i| i32::from(g.center_of(i).x >= 0.0)).collect();
            res.push(oracle_two_piece_fit(&u, &labels).unwrap().residual / eps);
        }
        assert!((res[0] - res[2]).abs() < 1e-9 * res[0] && (res[1] - res[2]).abs() < 1e-9 * res[0]);
    }

    #[test]
    fn oracle_agrees_with_pipeline_fit() {
        let u = fixtures::crack_forest(3, 32).unwrap();
        let g = u.geom();
        let cells: Vec<usize> = (0..g.len()).filter(|i| i % 3 != 0).collect();
        let a = fit_cells(&g, &u.values, &cells).unwrap();
        let b = oracle_fit(&u, &cells).unwrap();
        assert!((a.omega - b.omega).abs() < 1e-10 && (a.b[0] - b.b[0]).abs() < 1e-10 && (a.b[1] - b.b[1]).abs() < 1e-10);
    }

    #[test]
    fn level_perimeter_of_ramp() {
        let u = fixtures::ramp(64).unwrap();
        let vals: Vec<f64> = u.values.iter().map(|v| v[0]).collect();
        let g = u.geom();
        assert!((oracle_level_perimeter(&g, &vals, None, 0.5) - 1.0).abs() < 1e-12);
        assert_eq!(oracle_level_perimeter(&g, &vals, None, 2.0), 0.0);
    }

    #[test]
    fn coarea_identity_for_smooth_field() {
        let n = 256;
        let u = fixtures::sample_centered(&|p| [(2.0 * p.x).sin() * p.y + p.y * p.y, 0.0], SegmentSet::new(), n, Point::ORIGIN, 1.0)
            .unwrap();
        let vals: Vec<f64> = u.values.iter().map(|v| v[0]).collect();
        let g = u.geom();
        let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let steps = 2000;
        let dt = (hi - lo) / steps as f64;
        let riemann: f64 = (0..steps).map(|k| oracle_level_perimeter(&g, &vals, None, lo + (k as f64 + 0.5) * dt) * dt).sum();
        // L^1 norm of the l1 pointwise gradient by central differences
        let s = strain(&u);
        let l1: f64 = s.grad.iter().map(|m| m[0][0].abs() + m[0][1].abs()).sum::<f64>() * u.h * u.h;
        assert!((riemann - l1).abs() < 0.05 * l1, "{riemann} vs {l1}");
    }

    #[test]
    fn ledger_statistics_and_alarms() {
        let mut l = ConstantLedger::default();
        for (k, c) in [1.0, 1.2, 0.9, 1.1, 30.0].iter().enumerate() {
            l.record("x", "a <= C b", &format!("f{k}"), *c, 1.0);
        }
        l.record("x", "a <= C b", "zero", 0.0, 0.0);
        l.finalize(10.0);
        let e = &l.entries["x"];
        assert_eq!(e.median, Some(1.1));
        assert_eq!(e.max, Some(30.0));
        assert_eq!(e.alarms, vec!["f4".to_string()]);
        assert_eq!(e.samples.iter().filter(|s| s.constant.is_none()).count(), 1);
    }

    #[test]
    fn rigid_corpus_passes_with_trivial_constants() {
        let corpus = CorpusSpec::named("rigid", 64).unwrap();
        let out = run_suite(&corpus, &suite_config(), 10.0);
        assert!(out.passed, "{:?}", out.failures);
        for k in ["korn_p", "korn_p_prime", "sup_bound"] {
            let e = &out.ledger.entries[k];
            assert!(e.samples.iter().all(|s| s.constant.map_or(true, |c| c.abs() < 1e-6)), "{e:?}");
        }
    }
}
