//! One PASS/FAIL line per acceptance criterion; exits non-zero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gkp_sss::circuits::{bump_envelopes, build_ft_circuit, EcParams, FtParams, QubitCircuit};
use gkp_sss::energy::{noise_bound, verify_energy_reset, BoundKind};
use gkp_sss::faultmc::{
    cross_check_trial, estimate_logical_error, fault_path_bounds, memory_circuit, mirror_circuit, threshold_params,
    FaultPathParams, NoiseAssignment, ShiftKernel,
};
use gkp_sss::ftcheck::{
    exrec_deviation, gate_deviations, random_filtered_state, random_good_params, run_all, ExRecCore, FtConfig,
};
use gkp_sss::gates::{apply_displacement, GateKind};
use gkp_sss::measurement::Basis;
use gkp_sss::states::{make_s_state_unchecked, EnvelopeSpec, LogicalTarget};
use gkp_sss::zakcore::{canonicalize, position_from_sss, sss_from_position, PositionWave};
use gkp_sss::{GridSpec, SssState, SQRT_PI};

const C: f64 = SQRT_PI;

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome { ok, detail: detail.into() }
}

fn ft_suites() -> Outcome {
    let start = Instant::now();
    let reports = match run_all(&FtConfig::default()) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let secs = start.elapsed().as_secs_f64();
    let cases: Vec<_> = reports.iter().flat_map(|r| r.cases.iter()).collect();
    let bad: Vec<String> = cases.iter().filter(|c| !c.ok()).map(|c| c.to_string()).collect();
    let fails = cases.iter().filter(|c| c.expected.to_string() == "FAIL").count();
    let ok = bad.is_empty() && fails > 0 && secs <= 600.0;
    outcome(ok, format!("{} cases, {} expected counterexamples, {secs:.1}s {}", cases.len(), fails, bad.join("; ")))
}

fn shear() -> Outcome {
    let cfg = FtConfig::default();
    let mut detail = Vec::new();
    let mut ok = true;
    for r in [0.3, 0.4, 0.5] {
        match gate_deviations(&cfg, &GateKind::Shear, &[r], 0.1) {
            Ok((deficit, _)) => {
                ok &= deficit >= 1e-3;
                detail.push(format!("r={r} deficit={deficit:.3e}"));
            }
            Err(e) => return outcome(false, e.to_string()),
        }
    }
    outcome(ok, detail.join(" "))
}

fn good_implies_correct() -> Outcome {
    let grid = GridSpec::new(16, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0xe7ec);
    let cores = [
        ExRecCore::Prep(LogicalTarget::Zero),
        ExRecCore::Prep(LogicalTarget::Y),
        ExRecCore::Prep(LogicalTarget::PiOver8),
        ExRecCore::Gate(GateKind::DisplacementX),
        ExRecCore::Gate(GateKind::DisplacementZ),
        ExRecCore::Gate(GateKind::Fourier),
        ExRecCore::Gate(GateKind::Wait),
        ExRecCore::Gate(GateKind::Sum { control: 0, target: 1 }),
        ExRecCore::Meas(Basis::Z),
        ExRecCore::Meas(Basis::X),
    ];
    let mut worst = 0.0f64;
    for core in &cores {
        for key in 0..50 {
            let p = random_good_params(core, 0.12, &mut rng);
            let radii = vec![0.4; core.arity().max(1)];
            let dev = random_filtered_state(grid, &radii, &mut rng)
                .and_then(|input| exrec_deviation(core, &p, &input, key, &mut rng));
            match dev {
                Ok(d) => worst = worst.max(d),
                Err(e) => return outcome(false, format!("{core:?}: {e}")),
            }
        }
    }
    outcome(worst <= 1e-6, format!("{} ExRecs, worst deviation {worst:.3e}", 50 * cores.len()))
}

fn energy_reset() -> Outcome {
    let g = GridSpec::new(16, 16).unwrap();
    let mk = |t, s: f64| make_s_state_unchecked(t, &EnvelopeSpec::bump(s), g).unwrap();
    let inputs: Vec<SssState> = vec![
        mk(LogicalTarget::Zero, 0.1),
        mk(LogicalTarget::Y, 0.2),
        apply_displacement(&mk(LogicalTarget::PiOver8, 0.1), 0, 3.0 * C, -2.0).unwrap(),
        apply_displacement(&mk(LogicalTarget::Y, 0.2), 0, 0.7 * C, 0.4).unwrap(),
        SssState::delta(g, 1, 3, 12),
    ];
    let p = EcParams::uniform(0.8);
    match verify_energy_reset(&p, &inputs, &bump_envelopes()) {
        Ok(r) => {
            let below = r.outputs.iter().all(|e| *e <= r.bound);
            outcome(r.passed(1e-6) && below, format!("spread={:.3e} energy={:.4} bound={:.4}", r.spread, r.outputs[0], r.bound))
        }
        Err(e) => outcome(false, e.to_string()),
    }
}

fn formulas() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ok = true;
    for _ in 0..100 {
        let v: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..0.3)).collect();
        let p = EcParams { s0: v[0], s_h: v[1], s_sum: v[2], s_x: v[3], s_z: v[4], s_i: v[5] };
        let inner = if v[2] + v[3].max(v[4]) > 2.0 * v[5] { v[2] + v[3].max(v[4]) } else { 2.0 * v[5] };
        let want = v[0] + v[0] + v[1] + v[2] + inner;
        ok &= (p.s_out() - want).abs() <= 1e-15;
    }
    let mut text = String::from("t=0 q=0 op=prep target=0\n");
    for t in 1..=48 {
        text.push_str(&format!("t={t} q=0 op=i\n"));
    }
    text.push_str("t=49 q=0 op=measure basis=z\n");
    let circ = build_ft_circuit(&QubitCircuit::parse(&text).unwrap(), FtParams::uniform(0.0, 0.0, 0.0)).unwrap();
    let fp = FaultPathParams::from_circuit(&circ, 1e-4).unwrap();
    let b = fault_path_bounds(&fp, 2);
    let eq = 10.0 * 1e-4 * fp.l_max() as f64;
    ok &= fp.l_max() == 10 && fp.locations() == 50;
    ok &= b.eps_qubit == eq && b.fault_path == eq.powi(2);
    ok &= (b.tv_bound / (50.0 * eq) - (std::f64::consts::E - 1.0)).abs() < 1e-15;
    ok &= (b.tv_bound - 0.859_140_914).abs() < 1e-8;
    let loss = noise_bound(&BoundKind::Loss { eta: 0.99, energy: 10.0 }).unwrap();
    let range = noise_bound(&BoundKind::FiniteRange { energy: 10.0, gamma: 50.0 }).unwrap();
    ok &= (loss - 0.3092).abs() <= 1e-4 && range == 21.0 / 2500.0;
    outcome(ok, format!("eps_qubit={} fault_path={:e} tv={:.6} loss={loss:.6} range={range}", b.eps_qubit, b.fault_path, b.tv_bound))
}

fn feasibility() -> Outcome {
    let at38 = threshold_params(C / 38.0, C / 38.0, C / 38.0);
    let at40 = threshold_params(C / 40.0, C / 40.0, C / 40.0);
    let ok = at38.margins[1] == 0.0 && !at38.feasible && at40.feasible;
    outcome(ok, format!("c/38 margins {:?}, c/40 margins {:?}", at38.margins, at40.margins))
}

/// Odd-bin mass of `N(0, sigma^2)` by composite Simpson quadrature.
fn simpson_tail(sigma: f64) -> f64 {
    let pdf = |x: f64| (-x * x / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let mut total = 0.0;
    let mut n = 1;
    while (n as f64 - 0.5) * C < 14.0 * sigma {
        let (a, b) = ((n as f64 - 0.5) * C, (n as f64 + 0.5) * C);
        let m = 4000;
        let h = (b - a) / m as f64;
        let mut s = pdf(a) + pdf(b);
        for i in 1..m {
            s += pdf(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        total += 2.0 * s * h / 3.0;
        n += 2;
    }
    total
}

fn calibration() -> Outcome {
    let start = Instant::now();
    let circ = memory_circuit();
    let trials = 100_000;
    let mut ok = true;
    let mut detail = Vec::new();
    for sigma in [0.1, 0.2, 0.3] {
        let est = estimate_logical_error(&circ, &NoiseAssignment::gaussian_memory(sigma), trials, 0xca1).unwrap();
        let want = simpson_tail(sigma);
        let se = (want * (1.0 - want) / trials as f64).sqrt();
        for r in [est.x, est.z] {
            ok &= (r.rate - want).abs() <= 3.0 * se.max(r.stderr);
        }
        detail.push(format!("sigma={sigma} x={:.3e} z={:.3e} oracle={want:.3e}", est.x.rate, est.z.rate));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs <= 60.0;
    outcome(ok, format!("{} ({secs:.1}s)", detail.join(" ")))
}

fn cross_backend() -> Outcome {
    let grid = GridSpec::new(16, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0de);
    let k = ShiftKernel::Uniform { s: 0.3 };
    let noise = NoiseAssignment {
        prep: k.clone(),
        gate: k.clone(),
        meas: k.clone(),
        ec_prep: k.clone(),
        ec_gate: k.clone(),
        ec_meas: k,
        ..NoiseAssignment::ideal()
    };
    let (mut kept, mut skipped, mut errors, mut key) = (0, 0, 0, 0u64);
    while kept < 200 {
        let width = rng.random_range(1..=2);
        let qc = mirror_circuit(width, 3, &mut rng);
        let circ = build_ft_circuit(&qc, FtParams::uniform(0.0, 0.3, 0.3)).unwrap();
        key += 1;
        let r = match cross_check_trial(&circ, grid, &noise, key) {
            Ok(r) => r,
            Err(e) => return outcome(false, e.to_string()),
        };
        if r.min_margin < 2.0 * grid.delta() {
            skipped += 1;
            continue;
        }
        if !r.agree() {
            return outcome(false, format!("trial key {key}: tracker {:?} exact {:?}", r.tracker, r.exact));
        }
        kept += 1;
        errors += r.tracker.iter().filter(|e| **e == 1).count();
    }
    outcome(true, format!("200 trials agree ({errors} logical errors, {skipped} near-boundary trials skipped)"))
}

fn transforms() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_rt = 0.0f64;
    for _ in 0..10 {
        let g = GridSpec::new(32, 8).unwrap();
        let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(0.8..2.0));
        let (k, ph) = (rng.random_range(-2.0..2.0), rng.random_range(0.0..6.0));
        let wave = PositionWave::from_fn(g, 8, |x| {
            let t = (x - a) / (4.0 * b);
            if t.abs() < 1.0 {
                C64::from_polar((-1.0 / (1.0 - t * t)).exp(), k * x + ph)
            } else {
                C64::new(0.0, 0.0)
            }
        })
        .normalized();
        let psi = sss_from_position(&wave).unwrap();
        let back = sss_from_position(&position_from_sss(&psi, 8).unwrap()).unwrap();
        worst_rt = worst_rt.max(back.distance(&psi).unwrap());
    }

    let g = GridSpec::new(32, 8).unwrap();
    let mut worst_phase = 0.0f64;
    let mut fixed = true;
    for _ in 0..1000 {
        let mu = rng.random_range(0..2u8);
        let (z1, z2) = (rng.random_range(-6.0 * C..6.0 * C), rng.random_range(-6.0 * C..6.0 * C));
        let c1 = canonicalize(&g, mu, z1, z2);
        let c2 = canonicalize(&g, c1.mu, g.coord(c1.j1), g.coord(c1.j2));
        fixed &= (c2.mu, c2.j1, c2.j2) == (c1.mu, c1.j1, c1.j2);
        worst_phase = worst_phase.max((c1.phase.norm() - 1.0).abs()).max((c2.phase - 1.0).norm());
    }

    let psi = random_filtered_state(g, &[C / 2.0], &mut rng).unwrap();
    let mut rebuilt = SssState::from_entries(g, 1, Vec::new()).unwrap();
    for mu in 0..2u8 {
        for j1 in 0..g.n() {
            for j2 in 0..g.n() {
                let e = SssState::delta(g, mu, j1, j2);
                let w = e.inner(&psi).unwrap();
                let entries = rebuilt.entries().iter().copied().chain(e.scaled(w).entries().iter().copied()).collect();
                rebuilt = SssState::from_entries(g, 1, entries).unwrap();
            }
        }
    }
    let completeness = rebuilt.distance(&psi).unwrap();
    let ok = worst_rt < 1e-10 && fixed && worst_phase < 1e-12 && completeness < 1e-9;
    outcome(ok, format!("round trip {worst_rt:.2e}, phase {worst_phase:.2e}, completeness {completeness:.2e}"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("FT-condition suites", ft_suites),
        ("shear gate violates Gate A", shear),
        ("good ExRecs are correct", good_implies_correct),
        ("EC energy reset", energy_reset),
        ("formula calculators", formulas),
        ("feasibility boundary", feasibility),
        ("Monte Carlo calibration", calibration),
        ("tracker and exact simulator agree", cross_backend),
        ("transform integrity", transforms),
    ];
    let mut all = true;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = f();
        all &= o.ok;
        println!(
            "criterion {}: {} {name} [{:.1}s] {}",
            i + 1,
            if o.ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
