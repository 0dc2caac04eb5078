//! Versioned JSON reports. Struct field order fixes the key order, so a
//! report is byte-stable for a fixed input and configuration.

use serde::{Deserialize, Serialize};

use crate::covering::{floor_generation, Regularization};
use crate::decompose::{
    decompose_field, korn_poincare_small_jump, poincare_split_field, CoareaPartition, DecomposeConfig,
    DecompositionLedger, PiecewiseDecomposition, SquareKind, TruncationResult,
};
use crate::field::DisplacementField;
use crate::rigid::RigidMotion;
use crate::verify::{ConstantLedger, SuiteOutcome};
use crate::KornError;

pub const SCHEMA: &str = "korn-report/1";

/// Alarm factor applied to single-run ledgers.
pub const ALARM_FACTOR: f64 = 10.0;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub theta: f64,
    pub p: f64,
    pub q: Option<f64>,
    pub r_override: Option<f64>,
    pub epsilon: Option<f64>,
    pub max_iters: usize,
    pub rho: Option<f64>,
    pub seed: u64,
    pub n: Option<usize>,
    pub linf_guard: Option<f64>,
    pub corpus: Option<String>,
    pub input: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputSummary {
    pub name: String,
    pub n: usize,
    pub mu: f64,
    pub jump_segments: usize,
    pub jump_length: f64,
    pub sup_norm: f64,
}

impl InputSummary {
    pub fn of(name: &str, u: &DisplacementField) -> Self {
        InputSummary {
            name: name.into(),
            n: u.n,
            mu: u.mu,
            jump_segments: u.jumps.len(),
            jump_length: u.jumps.total_length(),
            sup_norm: u.sup_norm(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecomposeSummary {
    pub pieces: usize,
    pub motions: Vec<RigidMotion>,
    pub piece_areas: Vec<f64>,
    pub first_kind: SquareKind,
    pub regularization_layers: usize,
    pub removed_boundary: f64,
    pub ledger: DecompositionLedger,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoareaComponent {
    pub total_variation: f64,
    pub m: f64,
    pub levels: Vec<f64>,
    pub added_perimeter: f64,
    pub perimeter_bound: f64,
    pub residual_sup: f64,
    pub sup_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoincareSummary {
    pub rho: f64,
    pub pieces: usize,
    pub components: Vec<CoareaComponent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KornPoincareSummary {
    pub q: f64,
    pub m: Option<f64>,
    pub motion: RigidMotion,
    pub levels: Vec<f64>,
    pub e_empty: bool,
    pub e_area: f64,
    pub e_perimeter: f64,
    pub linf_outside: f64,
    pub lq_outside: f64,
    pub e_l2: f64,
    pub jump_length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub corpus: String,
    pub n: usize,
    pub fixtures: Vec<String>,
    pub failures: Vec<crate::verify::SuiteFailure>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReportBody {
    Decompose(DecomposeSummary),
    Poincare(PoincareSummary),
    KornPoincare(KornPoincareSummary),
    Verify(VerifySummary),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub config: RunConfig,
    pub input: Option<InputSummary>,
    pub floor_generation: u32,
    /// The final generation was capped by the grid floor.
    pub truncated_generation: bool,
    pub passed: bool,
    pub result: ReportBody,
    pub ledger: ConstantLedger,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn decompose_ledger(name: &str, l: &DecompositionLedger, mu: f64) -> ConstantLedger {
    let mut c = ConstantLedger::default();
    c.record("korn_p", "||grad v||_p <= C ||e(u)||_2", name, l.grad_v_p, l.e_l2);
    c.record("korn_p_prime", "||grad v||_p' <= C ||e(u)||_2", name, l.grad_v_p_prime, l.e_l2);
    c.record("sup_bound", "||v||_inf <= C ||e(u)||_2", name, l.v_sup, l.e_l2);
    c.record(
        "partition_perimeter",
        "sum_j H1(boundary P_j) <= C (H1(J) + H1(boundary Q))",
        name,
        l.boundary_sum,
        l.jump_length + 8.0 * mu,
    );
    c.finalize(ALARM_FACTOR);
    c
}

pub struct DecomposeRun {
    pub report: Report,
    pub regularization: Regularization,
    pub decomposition: PiecewiseDecomposition,
}

pub fn decompose_report(u: &DisplacementField, cfg: &DecomposeConfig, run: RunConfig, name: &str) -> Result<DecomposeRun, KornError> {
    let (reg, d) = decompose_field(u, cfg)?;
    let passed = run.linf_guard.map_or(true, |g| d.ledger.v_sup <= g);
    let report = Report {
        schema: SCHEMA.into(),
        config: run,
        input: Some(InputSummary::of(name, u)),
        floor_generation: reg.floor_generation,
        truncated_generation: d.truncated_generation,
        passed,
        result: ReportBody::Decompose(DecomposeSummary {
            pieces: d.count,
            motions: d.motions.clone(),
            piece_areas: d.piece_areas(),
            first_kind: d.first_kind,
            regularization_layers: reg.layers.len(),
            removed_boundary: reg.removed_boundary_total,
            ledger: d.ledger.clone(),
        }),
        ledger: decompose_ledger(name, &d.ledger, u.mu),
    };
    Ok(DecomposeRun { report, regularization: reg, decomposition: d })
}

pub fn poincare_report(u: &DisplacementField, rho: f64, run: RunConfig, name: &str, theta: crate::Theta) -> Result<(Report, CoareaPartition), KornError> {
    let cp = poincare_split_field(u, rho)?;
    let comps: Vec<Vec<f64>> = (0..2).map(|c| u.values.iter().map(|x| x[c]).collect()).collect();
    let res = cp.residual(&comps);
    let mut ledger = ConstantLedger::default();
    let mut passed = true;
    let components: Vec<CoareaComponent> = cp
        .components
        .iter()
        .zip(&res)
        .map(|(c, r)| {
            let sup = r.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            passed &= c.added_perimeter <= 2.0 * rho && sup <= 2.0 * c.m;
            ledger.record("coarea_perimeter", "added perimeter <= 2 rho", name, c.added_perimeter, rho);
            CoareaComponent {
                total_variation: c.total_variation,
                m: c.m,
                levels: c.levels.clone(),
                added_perimeter: c.added_perimeter,
                perimeter_bound: 2.0 * rho,
                residual_sup: sup,
                sup_bound: 2.0 * c.m,
            }
        })
        .collect();
    ledger.finalize(ALARM_FACTOR);
    let report = Report {
        schema: SCHEMA.into(),
        config: run,
        input: Some(InputSummary::of(name, u)),
        floor_generation: floor_generation(u.n, theta),
        truncated_generation: false,
        passed,
        result: ReportBody::Poincare(PoincareSummary { rho, pieces: cp.count, components }),
        ledger,
    };
    Ok((report, cp))
}

pub fn korn_poincare_report(
    u: &DisplacementField,
    q: f64,
    run: RunConfig,
    name: &str,
    theta: crate::Theta,
) -> Result<(Report, TruncationResult), KornError> {
    let t = korn_poincare_small_jump(u, q, 1.0)?;
    let mut ledger = ConstantLedger::default();
    if t.jump_length > 0.0 {
        ledger.record("truncation_area", "|E| <= C H1(J)^2", name, t.norms.e_area, t.jump_length * t.jump_length);
        ledger.record(
            "truncation_sup",
            "||u - a||_inf(Q \\ E) <= C H1(J)^(-1/2) ||e(u)||_2",
            name,
            t.norms.linf_outside,
            t.e_l2 / t.jump_length.sqrt(),
        );
    }
    ledger.finalize(ALARM_FACTOR);
    let report = Report {
        schema: SCHEMA.into(),
        config: run,
        input: Some(InputSummary::of(name, u)),
        floor_generation: floor_generation(u.n, theta),
        truncated_generation: false,
        passed: true,
        result: ReportBody::KornPoincare(KornPoincareSummary {
            q: t.q,
            m: t.m,
            motion: t.a,
            levels: t.levels.clone(),
            e_empty: t.e.count() == 0,
            e_area: t.norms.e_area,
            e_perimeter: t.norms.e_perimeter,
            linf_outside: t.norms.linf_outside,
            lq_outside: t.norms.lq_outside,
            e_l2: t.e_l2,
            jump_length: t.jump_length,
        }),
        ledger,
    };
    Ok((report, t))
}

pub fn verify_report(out: SuiteOutcome, run: RunConfig, corpus: &str, n: usize, theta: crate::Theta) -> Report {
    Report {
        schema: SCHEMA.into(),
        config: run,
        input: None,
        floor_generation: floor_generation(n, theta),
        truncated_generation: false,
        passed: out.passed,
        result: ReportBody::Verify(VerifySummary { corpus: corpus.into(), n, fixtures: out.fixtures, failures: out.failures }),
        ledger: out.ledger,
    }
}
