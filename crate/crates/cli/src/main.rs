mod svg;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use korn_core::decompose::DecomposeConfig;
use korn_core::field::DisplacementField;
use korn_core::report::{self, Report, RunConfig};
use korn_core::verify::{self, CorpusFixture, CorpusSpec};
use korn_core::{io, KornError, Theta};

#[derive(Parser)]
#[command(name = "korn", version, about = "Piecewise rigid decompositions of cracked displacement fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Regularize, decompose into pieces with rigid motions, and report.
    Decompose(RunArgs),
    /// Level-set partition with a perimeter budget.
    Poincare(RunArgs),
    /// Small-jump truncation with a single rigid motion.
    Kornpoincare(RunArgs),
    /// Run the verification corpus.
    Verify(RunArgs),
    /// Write a fixture field file.
    Sample(SampleArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    svg: Option<PathBuf>,
    #[arg(long, default_value_t = 0.25)]
    theta: f64,
    #[arg(long, default_value_t = 1.5)]
    p: f64,
    #[arg(long)]
    q: Option<f64>,
    /// Perimeter budget of the level-set partition; defaults to `H1(J) + H1(boundary Q)`.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value_t = 12)]
    max_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corpus resolution for `verify`.
    #[arg(long, default_value_t = 128)]
    n: usize,
    /// Fail with exit code 4 when `||v||_inf` exceeds this value.
    #[arg(long)]
    linf_guard: Option<f64>,
    #[arg(long, default_value = "default")]
    corpus: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum FixtureKind {
    Rigid,
    Strain,
    Ramp,
    Chord,
    Balls,
    Forest,
    Corner,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long, value_enum)]
    fixture: FixtureKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ball count for `balls`.
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Crack length for `corner`.
    #[arg(long, default_value_t = 0.2)]
    ell: f64,
}

enum Failure {
    Input(String),
    Config(String),
    Pipeline(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Config(_) => 3,
            Failure::Pipeline(_) => 4,
        }
    }
}

impl From<KornError> for Failure {
    fn from(e: KornError) -> Self {
        match e {
            KornError::Io { .. } | KornError::Format(_) | KornError::InvalidInput(_) => Failure::Input(e.to_string()),
            KornError::Config(_) => Failure::Config(e.to_string()),
            other => Failure::Pipeline(other.to_string()),
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Input(format!("cannot write {}: {e}", path.display())))
}

fn emit(report: &Report, out: Option<&Path>) -> Result<(), Failure> {
    let json = report.to_json();
    match out {
        Some(p) => write_text(p, &json),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

fn load(a: &RunArgs) -> Result<(DisplacementField, String), Failure> {
    let path = a.input.as_ref().ok_or_else(|| Failure::Config("--input is required".into()))?;
    let u = io::read_field(path)?;
    let name = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
    Ok((u, name))
}

fn run_config(cmd: &str, a: &RunArgs) -> RunConfig {
    RunConfig {
        command: cmd.into(),
        theta: a.theta,
        p: a.p,
        q: a.q,
        r_override: None,
        epsilon: a.epsilon,
        max_iters: a.max_iters,
        rho: a.rho,
        seed: a.seed,
        n: (cmd == "verify").then_some(a.n),
        linf_guard: a.linf_guard,
        corpus: (cmd == "verify").then(|| a.corpus.clone()),
        input: a.input.as_ref().map(|p| p.display().to_string()),
    }
}

fn decompose_config(a: &RunArgs) -> Result<DecomposeConfig, Failure> {
    let mut cfg = DecomposeConfig::new(Theta::from_f64(a.theta).map_err(|e| Failure::Config(e.to_string()))?, a.p);
    cfg.q = a.q;
    cfg.epsilon = a.epsilon;
    cfg.max_iters = a.max_iters;
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn decompose(a: &RunArgs) -> Result<(), Failure> {
    let cfg = decompose_config(a)?;
    let (u, name) = load(a)?;
    let run = report::decompose_report(&u, &cfg, run_config("decompose", a), &name)?;
    log::info!("{} pieces, ||v||_inf = {:.3e}", run.decomposition.count, run.decomposition.ledger.v_sup);
    if let Some(p) = &a.svg {
        write_text(p, &svg::render(&u, &run.decomposition))?;
    }
    emit(&run.report, a.out.as_deref())?;
    if !run.report.passed {
        return Err(Failure::Pipeline(format!(
            "||v||_inf = {:.6e} exceeds the guard {:.6e}",
            run.decomposition.ledger.v_sup,
            a.linf_guard.unwrap_or(f64::INFINITY)
        )));
    }
    Ok(())
}

fn poincare(a: &RunArgs) -> Result<(), Failure> {
    let theta = decompose_config(a)?.theta;
    let (u, name) = load(a)?;
    let rho = a.rho.unwrap_or(u.jumps.total_length() + 8.0 * u.mu);
    if !(rho > 0.0) {
        return Err(Failure::Config(format!("rho = {rho} must be positive")));
    }
    let (r, _) = report::poincare_report(&u, rho, run_config("poincare", a), &name, theta)?;
    emit(&r, a.out.as_deref())?;
    if !r.passed {
        return Err(Failure::Pipeline("level-set partition exceeded its bounds".into()));
    }
    Ok(())
}

fn korn_poincare(a: &RunArgs) -> Result<(), Failure> {
    let theta = decompose_config(a)?.theta;
    let q = a.q.unwrap_or(4.0);
    if !(q > 2.0) {
        return Err(Failure::Config(format!("q = {q} must exceed 2")));
    }
    let (u, name) = load(a)?;
    let (r, _) = report::korn_poincare_report(&u, q, run_config("kornpoincare", a), &name, theta)?;
    emit(&r, a.out.as_deref())
}

fn verify_corpus(a: &RunArgs) -> Result<(), Failure> {
    let cfg = decompose_config(a)?;
    let corpus = CorpusSpec::named(&a.corpus, a.n)?;
    let out = verify::run_suite(&corpus, &cfg, report::ALARM_FACTOR);
    for f in &out.failures {
        log::warn!("{}: {} ({})", f.fixture, f.check, f.detail);
    }
    let r = report::verify_report(out, run_config("verify", a), &a.corpus, a.n, cfg.theta);
    emit(&r, a.out.as_deref())?;
    if !r.passed {
        return Err(Failure::Pipeline("exact invariant failed; see the report".into()));
    }
    Ok(())
}

fn sample(a: &SampleArgs) -> Result<(), Failure> {
    let fx = match a.fixture {
        FixtureKind::Rigid => CorpusFixture::Rigid,
        FixtureKind::Strain => CorpusFixture::LinearStrain,
        FixtureKind::Ramp => CorpusFixture::Ramp,
        FixtureKind::Chord => CorpusFixture::Chord(a.seed),
        FixtureKind::Balls => CorpusFixture::Balls(a.k),
        FixtureKind::Forest => CorpusFixture::Forest(a.seed),
        FixtureKind::Corner => CorpusFixture::Corner(a.ell),
    };
    let u = fx.build(a.n).map_err(|e| Failure::Config(e.to_string()))?;
    io::write_field(&a.out, &u)?;
    log::info!("wrote {} ({}x{})", a.out.display(), a.n, a.n);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KORN_LOG", "warn")).init();
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Decompose(a) => decompose(a),
        Command::Poincare(a) => poincare(a),
        Command::Kornpoincare(a) => korn_poincare(a),
        Command::Verify(a) => verify_corpus(a),
        Command::Sample(a) => sample(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Input(m) | Failure::Config(m) | Failure::Pipeline(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}
