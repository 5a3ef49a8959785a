use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use gkp_sss::circuits::{build_ft_circuit, FtParams, QubitCircuit};
use gkp_sss::energy::{noise_bound, BoundKind, RotationKernel};
use gkp_sss::faultmc::{
    estimate_logical_error, fault_path_bounds, memory_circuit, threshold_params, FaultPathParams, NoiseAssignment, ShiftKernel,
};
use gkp_sss::ftcheck::{run_suite, FtConfig, SUITES};
use gkp_sss::states::{make_s_state, position_profile, EnvelopeSpec, LogicalTarget};
use gkp_sss::{GridSpec, SimError, SQRT_PI};

const SEED_ENV: &str = "GKP_SIM_SEED";
const DEFAULT_SEED: u64 = 0x5eed;

/// Grid simulator and fault-tolerance checker for the square-lattice GKP code.
///
/// Every flag can also be given in a `key = value` file passed with
/// `--config`; flags on the command line win. The seed defaults to
/// $GKP_SIM_SEED. Exit status: 0 when all checks pass, 1 when a check
/// fails, 2 on usage errors.
#[derive(Parser, Debug)]
#[command(name = "gkp-sim", version, args_override_self = true)]
struct Cli {
    /// `key = value` file mirroring the flags of the subcommand.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Write output here instead of stdout.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run the fault-tolerance condition suites.
    ///
    /// Output: one line per case,
    /// `suite=.. case=.. margin=.. verdict=.. expected=.. deviation=.. seed=..`,
    /// then `summary=PASS|FAIL`. A case passes when its verdict matches the
    /// expected one.
    Verify(VerifyArgs),
    /// Monte Carlo logical error rates over a noise sweep.
    ///
    /// CSV columns: sigma_or_s,eps,trials,logical_x_rate,logical_z_rate,stderr,seed.
    /// `stderr` is the larger of the two rates' standard errors.
    Sweep(SweepArgs),
    /// Emit a prepared s-state.
    ///
    /// `csv`: columns x,density of the position wavefunction over the grid
    /// window. `bin`: the binary state dump.
    State(StateArgs),
    /// Closed-form noise and fault-path bounds.
    ///
    /// CSV columns: kind,params,bound. `fault-path` adds eps_qubit and tv rows.
    Bounds(BoundsArgs),
    /// EC output width and feasibility margins for given s_p, s_g, s_m.
    ///
    /// CSV columns: name,value. Lengths accept `c`, `c/38`, `3c/40` and plain
    /// numbers, where c = sqrt(pi). Exits 1 when infeasible.
    Params(ParamsArgs),
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    suite: SuiteArg,
    /// Grid size of single-mode cases.
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Grid size of two-mode cases.
    #[arg(long, default_value_t = 32)]
    n_two: usize,
    /// Grid size of the three-mode EC cases.
    #[arg(long, default_value_t = 16)]
    n_ec: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SuiteArg {
    Meas,
    Prep,
    Gate,
    Ec,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NoiseArg {
    /// Gaussian displacements of width sigma on data gates.
    Gaussian,
    /// Uniform displacements in (-s, s)^2 at every location.
    Bounded,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_enum, default_value = "gaussian")]
    noise: NoiseArg,
    /// `start:stop:step`, inclusive of `stop`.
    #[arg(long, value_name = "A:B:STEP")]
    sigma_range: String,
    #[arg(long, default_value_t = 10_000)]
    trials: u64,
    /// Rare-event probability per location; rare draws are uniform in (-c, c)^2.
    #[arg(long, default_value_t = 0.0)]
    eps: f64,
    /// Qubit circuit file; defaults to a one-qubit memory with one EC.
    #[arg(long, value_name = "PATH")]
    circuit: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the trials.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TargetArg {
    Zero,
    Y,
    Pi8,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EmitArg {
    Csv,
    Bin,
}

#[derive(Args, Debug)]
struct StateArgs {
    #[arg(long, value_enum, default_value = "zero")]
    target: TargetArg,
    /// Envelope half-width.
    #[arg(long, default_value = "0.3")]
    s: String,
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Position window in periods each side; defaults to the full period.
    #[arg(long)]
    cutoff: Option<usize>,
    #[arg(long, value_enum, default_value = "csv")]
    emit: EmitArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Loss,
    Rotation,
    Range,
    Resolution,
    Composition,
    FaultPath,
}

#[derive(Args, Debug)]
struct BoundsArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    energy: Option<f64>,
    /// Fixed rotation angle.
    #[arg(long)]
    theta: Option<f64>,
    /// Half-width of a uniform rotation kernel.
    #[arg(long)]
    theta_max: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    b: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    /// Channel norm at the composed energy.
    #[arg(long)]
    norm: Option<f64>,
    /// Qubit circuit file for `fault-path`.
    #[arg(long, value_name = "PATH")]
    circuit: Option<PathBuf>,
    /// Number of ExRecs in the fault path.
    #[arg(long, default_value_t = 1)]
    r: usize,
}

#[derive(Args, Debug)]
struct ParamsArgs {
    #[arg(long)]
    sp: String,
    #[arg(long)]
    sg: String,
    #[arg(long)]
    sm: String,
}

enum Failure {
    Usage(String),
    Check,
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Parse `0.05`, `c`, `c/38`, `3c/40` or `3*c/40`.
fn parse_length(text: &str) -> Result<f64, Failure> {
    let t = text.trim().replace(' ', "");
    let bad = || usage(format!("cannot read length '{text}'"));
    let Some(i) = t.find('c') else {
        return t.parse().map_err(|_| bad());
    };
    let coef = match t[..i].trim_end_matches('*') {
        "" => 1.0,
        "-" => -1.0,
        k => k.parse::<f64>().map_err(|_| bad())?,
    };
    let div = match &t[i + 1..] {
        "" => 1.0,
        rest => rest.strip_prefix('/').ok_or_else(bad)?.parse::<f64>().map_err(|_| bad())?,
    };
    Ok(coef * SQRT_PI / div)
}

fn seed_or_env(seed: Option<u64>) -> Result<u64, Failure> {
    if let Some(s) = seed {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| usage(format!("{SEED_ENV}='{v}' is not an integer"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

fn need(v: Option<f64>, name: &str) -> Result<f64, Failure> {
    v.ok_or_else(|| usage(format!("--{name} is required for this kind")))
}

fn verify(a: &VerifyArgs, out: &mut dyn Write) -> Outcome {
    let cfg = FtConfig { n_single: a.n, n_two: a.n_two, n_ec: a.n_ec, tol: a.tol, seed: seed_or_env(a.seed)?, ..FtConfig::default() };
    let names: Vec<&str> = match a.suite {
        SuiteArg::Meas => vec!["meas"],
        SuiteArg::Prep => vec!["prep"],
        SuiteArg::Gate => vec!["gate"],
        SuiteArg::Ec => vec!["ec"],
        SuiteArg::All => SUITES.to_vec(),
    };
    let mut ok = true;
    for name in names {
        let report = run_suite(&cfg, name)?;
        write!(out, "{report}")?;
        ok &= report.ok();
    }
    writeln!(out, "summary={}", if ok { "PASS" } else { "FAIL" })?;
    if ok {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}

fn sigma_values(range: &str) -> Result<Vec<f64>, Failure> {
    let parts: Vec<&str> = range.split(':').collect();
    let bad = || usage(format!("--sigma-range '{range}' is not start:stop:step"));
    let nums = parts.iter().map(|p| parse_length(p)).collect::<Result<Vec<_>, _>>().map_err(|_| bad())?;
    let (a, b, step) = match nums[..] {
        [a] => (a, a, 1.0),
        [a, b, step] if step > 0.0 && b >= a => (a, b, step),
        _ => return Err(bad()),
    };
    let n = ((b - a) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| a + i as f64 * step).collect())
}

fn sweep(a: &SweepArgs, out: &mut dyn Write) -> Outcome {
    if a.trials == 0 {
        return Err(usage("--trials must be at least 1"));
    }
    if !(0.0..1.0).contains(&a.eps) {
        return Err(usage("--eps must lie in [0, 1)"));
    }
    if let Some(j) = a.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global().map_err(|e| usage(e.to_string()))?;
    }
    let seed = seed_or_env(a.seed)?;
    let source = match &a.circuit {
        Some(p) => Some(QubitCircuit::parse(&fs::read_to_string(p)?)?),
        None => None,
    };
    writeln!(out, "sigma_or_s,eps,trials,logical_x_rate,logical_z_rate,stderr,seed")?;
    for sigma in sigma_values(&a.sigma_range)? {
        let (noise, params) = match a.noise {
            NoiseArg::Gaussian => (NoiseAssignment::gaussian_memory(sigma), FtParams::uniform(0.0, 0.0, 0.0)),
            NoiseArg::Bounded => (NoiseAssignment::declared(), FtParams::uniform(sigma, sigma, sigma)),
        };
        let noise = NoiseAssignment { eps: a.eps, rare: ShiftKernel::Uniform { s: SQRT_PI }, ..noise };
        let circuit = match &source {
            Some(qc) => build_ft_circuit(qc, params)?,
            None => {
                let mut c = memory_circuit();
                if matches!(a.noise, NoiseArg::Bounded) {
                    c = build_ft_circuit(&c.source, params)?;
                }
                c
            }
        };
        let est = estimate_logical_error(&circuit, &noise, a.trials, seed)?;
        writeln!(
            out,
            "{sigma:.6},{:.6e},{},{:.6e},{:.6e},{:.6e},{seed}",
            a.eps,
            a.trials,
            est.x.rate,
            est.z.rate,
            est.x.stderr.max(est.z.stderr)
        )?;
    }
    Ok(())
}

fn state(a: &StateArgs, out: &mut dyn Write) -> Outcome {
    let target = match a.target {
        TargetArg::Zero => LogicalTarget::Zero,
        TargetArg::Y => LogicalTarget::Y,
        TargetArg::Pi8 => LogicalTarget::PiOver8,
    };
    let grid = GridSpec::new(a.n, a.cutoff.unwrap_or(a.n))?;
    let st = make_s_state(target, &EnvelopeSpec::bump(parse_length(&a.s)?), grid)?;
    match a.emit {
        EmitArg::Csv => position_profile(&st)?.write_csv(out)?,
        EmitArg::Bin => st.write_dump(out)?,
    }
    Ok(())
}

fn bounds(a: &BoundsArgs, out: &mut dyn Write) -> Outcome {
    writeln!(out, "kind,params,bound")?;
    let (name, params, kind) = match a.kind {
        KindArg::Loss => {
            let (eta, e) = (need(a.eta, "eta")?, need(a.energy, "energy")?);
            ("loss", format!("eta={eta};energy={e}"), BoundKind::Loss { eta, energy: e })
        }
        KindArg::Rotation => {
            let e = need(a.energy, "energy")?;
            let (p, kernel) = match (a.theta, a.theta_max) {
                (Some(t), None) => (format!("theta={t};energy={e}"), RotationKernel::Delta { theta: t }),
                (None, Some(t)) => (format!("theta_max={t};energy={e}"), RotationKernel::Uniform { theta_max: t }),
                _ => return Err(usage("rotation needs exactly one of --theta, --theta-max")),
            };
            ("rotation", p, BoundKind::Rotation { kernel, energy: e })
        }
        KindArg::Range => {
            let (e, g) = (need(a.energy, "energy")?, need(a.gamma, "gamma")?);
            ("range", format!("energy={e};gamma={g}"), BoundKind::FiniteRange { energy: e, gamma: g })
        }
        KindArg::Resolution => {
            let b = need(a.b, "b")?;
            ("resolution", format!("b={b}"), BoundKind::Resolution { b })
        }
        KindArg::Composition => {
            let (eps, norm) = (need(a.eps, "eps")?, need(a.norm, "norm")?);
            ("composition", format!("eps={eps};norm={norm}"), BoundKind::Composition { eps, norm })
        }
        KindArg::FaultPath => {
            let eps = need(a.eps, "eps")?;
            let path = a.circuit.as_ref().ok_or_else(|| usage("--circuit is required for fault-path"))?;
            let qc = QubitCircuit::parse(&fs::read_to_string(path)?)?;
            let circuit = build_ft_circuit(&qc, FtParams::uniform(0.0, 0.0, 0.0))?;
            let p = FaultPathParams::from_circuit(&circuit, eps)?;
            let b = fault_path_bounds(&p, a.r);
            let params = format!("eps={eps};l_max={};locations={};r={}", p.l_max(), p.locations(), a.r);
            writeln!(out, "eps_qubit,{params},{:.6e}", b.eps_qubit)?;
            writeln!(out, "fault_path,{params},{:.6e}", b.fault_path)?;
            writeln!(out, "tv,{params},{:.6e}", b.tv_bound)?;
            writeln!(out, "valid,{params},{}", u8::from(b.valid))?;
            return Ok(());
        }
    };
    writeln!(out, "{name},{params},{:.6}", noise_bound(&kind)?)?;
    Ok(())
}

fn params(a: &ParamsArgs, out: &mut dyn Write) -> Outcome {
    let (sp, sg, sm) = (parse_length(&a.sp)?, parse_length(&a.sg)?, parse_length(&a.sm)?);
    if [sp, sg, sm].iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(usage("lengths must be finite and nonnegative"));
    }
    let r = threshold_params(sp, sg, sm);
    writeln!(out, "name,value")?;
    writeln!(out, "s_e,{:.12}", r.s_e)?;
    writeln!(out, "margin_prep,{:.12}", r.margins[0])?;
    writeln!(out, "margin_gate,{:.12}", r.margins[1])?;
    writeln!(out, "margin_meas,{:.12}", r.margins[2])?;
    writeln!(out, "feasible,{}", u8::from(r.feasible))?;
    if r.feasible {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}

/// Config lines become flags placed before the command-line ones, so the
/// latter override them. Keys the subcommand does not know are skipped.
fn merge_config(argv: Vec<String>) -> Result<Vec<String>, Failure> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate() {
        if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else if a == "--config" {
            path = argv.get(i + 1).cloned();
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let Some(sub_pos) = argv.iter().skip(1).position(|a| !a.starts_with('-')).map(|p| p + 1) else {
        return Ok(argv);
    };
    let cmd = Cli::command();
    let Some(sub) = cmd.find_subcommand(&argv[sub_pos]) else { return Ok(argv) };
    let text = fs::read_to_string(&path).map_err(|e| usage(format!("{path}: {e}")))?;
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| usage(format!("{path}:{}: expected key = value", n + 1)))?;
        let key = k.trim().replace('_', "-");
        let v = v.trim();
        let Some(arg) = sub.get_arguments().find(|a| a.get_long() == Some(key.as_str())) else {
            continue;
        };
        if arg.get_action().takes_values() {
            extra.push(format!("--{key}"));
            extra.push(v.to_string());
        } else if matches!(v, "true" | "1" | "yes") {
            extra.push(format!("--{key}"));
        }
    }
    let mut merged = argv[..=sub_pos].to_vec();
    merged.extend(extra);
    merged.extend_from_slice(&argv[sub_pos + 1..]);
    Ok(merged)
}

fn run() -> Outcome {
    let argv = merge_config(std::env::args().collect())?;
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return Ok(());
        }
        Err(e) => return Err(usage(e.to_string().trim_end().to_string())),
    };
    let mut buf: Vec<u8> = Vec::new();
    let result = match &cli.cmd {
        Cmd::Verify(a) => verify(a, &mut buf),
        Cmd::Sweep(a) => sweep(a, &mut buf),
        Cmd::State(a) => state(a, &mut buf),
        Cmd::Bounds(a) => bounds(a, &mut buf),
        Cmd::Params(a) => params(a, &mut buf),
    };
    if let Err(Failure::Usage(_)) = result {
        return result;
    }
    match &cli.out {
        Some(p) => fs::write(p, &buf)?,
        None => io::stdout().write_all(&buf)?,
    }
    result
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(2)
        }
    }
}
