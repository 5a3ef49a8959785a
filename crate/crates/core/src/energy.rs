//! Photon-number moments, energy propagation bounds and the closed-form
//! energy-constrained noise bounds.

use rand::Rng;

use crate::circuits::{run_knill_ec_channel, CvOp, EcParams, EnvelopeFactory, ExactSim, FtCircuit, EC_OUTPUT_DEPTH};
use crate::error::{Result, SimError};
use crate::faultmc::NoiseAssignment;
use crate::gates::GateKind;
use crate::measurement::{homodyne_distribution, Quadrature};
use crate::states::{make_s_state_unchecked, LogicalTarget};
use crate::zakcore::{GridSpec, SssState, SQRT_PI};

/// Default tail tolerance for [`mean_photon`].
pub const TAIL_TOL: f64 = 1e-8;

/// First and second quadrature moments of one mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments {
    pub q: f64,
    pub p: f64,
    pub q2: f64,
    pub p2: f64,
    /// Largest probability mass found in the two outermost periods at either
    /// end of the discrete window, over both quadratures.
    pub tail: f64,
}

impl Moments {
    pub fn mean_photon(&self) -> f64 {
        (self.q2 + self.p2 - 1.0) / 2.0
    }
}

fn one_quadrature(state: &SssState, mode: usize, quad: Quadrature) -> Result<(f64, f64, f64)> {
    let d = homodyne_distribution(state, mode, quad)?;
    let n = state.grid().n();
    let edge = 2 * n;
    let len = d.len();
    let tail: f64 = d[..edge].iter().chain(&d[len - edge..]).map(|(_, p)| p).sum();
    let m1 = d.iter().map(|(x, p)| x * p).sum();
    let m2 = d.iter().map(|(x, p)| x * x * p).sum();
    Ok((m1, m2, tail))
}

pub fn moments(state: &SssState, mode: usize) -> Result<Moments> {
    let (q, q2, tq) = one_quadrature(state, mode, Quadrature::Q)?;
    let (p, p2, tp) = one_quadrature(state, mode, Quadrature::P)?;
    Ok(Moments { q, p, q2, p2, tail: tq.max(tp) })
}

/// `<(q^2 + p^2 - 1)/2>` with an explicit tail tolerance.
pub fn mean_photon_with_tail(state: &SssState, mode: usize, tail_tol: f64) -> Result<f64> {
    let m = moments(state, mode)?;
    if m.tail > tail_tol {
        return Err(SimError::CutoffTooSmall { deviation: m.tail });
    }
    Ok(m.mean_photon())
}

pub fn mean_photon(state: &SssState, mode: usize) -> Result<f64> {
    mean_photon_with_tail(state, mode, TAIL_TOL)
}

/// Displacement bound `E + |v| sqrt(2E + 1) + |v|^2 / 2`.
pub fn gsup_displacement(e: f64, v1: f64, v2: f64) -> f64 {
    let v = v1.hypot(v2);
    e + v * (2.0 * e + 1.0).sqrt() + v * v / 2.0
}

/// Two-mode gate bound `E1 + E2 + sqrt((2E1 + 1)(2E2 + 1)) + 1/2`.
pub fn g_two_mode(e1: f64, e2: f64) -> f64 {
    e1 + e2 + ((2.0 * e1 + 1.0) * (2.0 * e2 + 1.0)).sqrt() + 0.5
}

/// `4E + c sqrt(2E + 1) + c^2 / 2`, an upper bound for every gate in the set.
pub fn gsup_default(e: f64) -> f64 {
    4.0 * e + SQRT_PI * (2.0 * e + 1.0).sqrt() + SQRT_PI * SQRT_PI / 2.0
}

/// Per-gate energy bound for a mode (or both modes of a SUM) starting at energy `e`.
pub fn gsup_apply(e: f64, gate: &GateKind) -> f64 {
    match gate {
        GateKind::DisplacementX | GateKind::DisplacementZ => gsup_displacement(e, SQRT_PI, 0.0),
        GateKind::GeneralDisplacement(a, b) => gsup_displacement(e, *a, *b),
        GateKind::Fourier | GateKind::Wait => e,
        GateKind::Sum { .. } => g_two_mode(e, e),
        // (p + q)^2 <= 2p^2 + 2q^2
        GateKind::Shear => 3.0 * e + 1.0,
    }
}

/// `gsup` applied `m` times.
pub fn gsup_iterate(e: f64, m: usize) -> f64 {
    (0..m).fold(e, |acc, _| gsup_default(acc))
}

#[derive(Clone, Copy, Debug)]
pub struct EnergyBudget {
    pub e_prep: f64,
    pub gsup: fn(f64) -> f64,
    pub ell: usize,
}

impl EnergyBudget {
    pub fn new(e_prep: f64, ell: usize) -> Self {
        Self { e_prep, gsup: gsup_default, ell }
    }

    pub fn iterate(&self, e: f64, m: usize) -> f64 {
        (0..m).fold(e, |acc, _| (self.gsup)(acc))
    }

    /// Checks `gsup(E) >= E` and monotonicity on `0, 0.1, ..., 100`.
    pub fn check_gsup(&self) -> bool {
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=1000 {
            let e = i as f64 * 0.1;
            let v = (self.gsup)(e);
            if v < e || v < prev {
                return false;
            }
            prev = v;
        }
        true
    }
}

/// `gsup(gsup^{l-1}(E_prep) / eps^2)`.
pub fn e_max(eps: f64, budget: &EnergyBudget) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(SimError::Domain(format!("eps = {eps} outside (0, 1)")));
    }
    if budget.ell == 0 {
        return Err(SimError::Domain("l must be positive".into()));
    }
    let inner = budget.iterate(budget.e_prep, budget.ell - 1);
    Ok((budget.gsup)(inner / (eps * eps)))
}

#[derive(Clone, Debug, PartialEq)]
pub enum RotationKernel {
    Delta { theta: f64 },
    /// Uniform on `[-theta_max, theta_max]`.
    Uniform { theta_max: f64 },
    /// Discrete distribution of `(theta, weight)` pairs.
    Weighted(Vec<(f64, f64)>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum BoundKind {
    Loss { eta: f64, energy: f64 },
    Rotation { kernel: RotationKernel, energy: f64 },
    FiniteRange { energy: f64, gamma: f64 },
    /// Detector resolution `b`, reported as the `s` part of the noise parameters.
    Resolution { b: f64 },
    /// `10 eps ||Phi||`, where the caller evaluates `||Phi||` at energy [`composition_energy`].
    Composition { eps: f64, norm: f64 },
}

/// Energy at which the composed channel's norm must be evaluated.
pub fn composition_energy(e: f64, eps: f64) -> f64 {
    e / (eps * eps)
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(SimError::Domain(format!("{name} = {v} must be positive")))
    }
}

pub fn noise_bound(kind: &BoundKind) -> Result<f64> {
    match kind {
        BoundKind::Loss { eta, energy } => {
            if !(*eta > 0.0 && *eta <= 1.0) {
                return Err(SimError::Domain(format!("eta = {eta} outside (0, 1]")));
            }
            positive("E", *energy)?;
            Ok((1.0 - eta.powf(*energy)).sqrt())
        }
        BoundKind::Rotation { kernel, energy } => {
            positive("E", *energy)?;
            let cube = (4.0 * energy).cbrt();
            match kernel {
                RotationKernel::Delta { theta } => Ok(cube * theta.abs().cbrt()),
                RotationKernel::Uniform { theta_max } => {
                    positive("theta_max", *theta_max)?;
                    Ok(cube * 0.75 * theta_max.cbrt())
                }
                RotationKernel::Weighted(pts) => {
                    let total: f64 = pts.iter().map(|(_, w)| w).sum();
                    if pts.iter().any(|(_, w)| *w < 0.0) || total <= 0.0 {
                        return Err(SimError::Domain("rotation weights must be a distribution".into()));
                    }
                    Ok(pts.iter().map(|(t, w)| w * t.abs().cbrt()).sum::<f64>() * cube / total)
                }
            }
        }
        BoundKind::FiniteRange { energy, gamma } => {
            positive("E", *energy)?;
            positive("Gamma", *gamma)?;
            Ok((2.0 * energy + 1.0) / (gamma * gamma))
        }
        BoundKind::Resolution { b } => {
            if *b < 0.0 {
                return Err(SimError::Domain(format!("b = {b} must be nonnegative")));
            }
            Ok(*b)
        }
        BoundKind::Composition { eps, norm } => {
            if !(*eps > 0.0 && *eps < 1.0) {
                return Err(SimError::Domain(format!("eps = {eps} outside (0, 1)")));
            }
            if *norm < 0.0 {
                return Err(SimError::Domain(format!("norm = {norm} must be nonnegative")));
            }
            Ok(10.0 * eps * norm)
        }
    }
}

/// Tail tolerance of the energy-reset checks; coarse grids cannot reach [`TAIL_TOL`].
pub const RESET_TAIL_TOL: f64 = 1e-4;

/// Relative rounding allowance when an energy meets its bound with equality.
const BOUND_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyViolation {
    pub step: usize,
    pub mode: usize,
    pub energy: f64,
    pub bound: f64,
}

#[derive(Clone, Debug)]
pub struct EnergyResetReport {
    pub e_prep: f64,
    /// `gsup^4(E_prep)`.
    pub bound: f64,
    /// Output-mode energy for each input.
    pub outputs: Vec<f64>,
    /// `(max - min) / max` over the outputs.
    pub spread: f64,
    pub tail: f64,
    pub violations: Vec<EnergyViolation>,
}

impl EnergyResetReport {
    pub fn passed(&self, rel_tol: f64) -> bool {
        self.violations.is_empty() && self.spread <= rel_tol && self.tail <= RESET_TAIL_TOL
    }
}

fn prep_energy(target: LogicalTarget, s: f64, grid: GridSpec, envelope: &EnvelopeFactory) -> Result<(f64, f64)> {
    let st = make_s_state_unchecked(target, &envelope(s.max(0.5 * grid.delta())), grid)?;
    let m = moments(&st, 0)?;
    Ok((m.mean_photon(), m.tail))
}

/// Run the channel form of the Knill EC on each input (data in mode 0) and
/// compare the output-mode energies with each other and with `gsup^4(E_prep)`.
pub fn verify_energy_reset(params: &EcParams, inputs: &[SssState], envelope: &EnvelopeFactory) -> Result<EnergyResetReport> {
    let first = inputs.first().ok_or_else(|| SimError::Domain("no inputs".into()))?;
    let grid = *first.grid();
    let (e_prep, mut tail) = prep_energy(LogicalTarget::Zero, params.s0, grid, envelope)?;
    let bound = gsup_iterate(e_prep, EC_OUTPUT_DEPTH);
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut violations = Vec::new();
    for inp in inputs {
        let mix = run_knill_ec_channel(inp, 0, params, envelope)?;
        let out = inp.modes() + 1;
        let (mut e, mut t) = (0.0, 0.0);
        for (w, m) in &mix.members {
            let mo = moments(m, out)?;
            e += w * mo.mean_photon();
            t += w * mo.tail;
        }
        tail = tail.max(t);
        if e > bound * (1.0 + BOUND_SLACK) {
            violations.push(EnergyViolation { step: outputs.len(), mode: out, energy: e, bound });
        }
        outputs.push(e);
    }
    let hi = outputs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = outputs.iter().cloned().fold(f64::INFINITY, f64::min);
    let spread = if hi.abs() > 0.0 { (hi - lo) / hi.abs() } else { 0.0 };
    Ok(EnergyResetReport { e_prep, bound, outputs, spread, tail, violations })
}

#[derive(Clone, Debug)]
pub struct CircuitEnergyReport {
    pub e_prep: f64,
    pub ell: usize,
    pub checks: usize,
    /// Largest `energy / gsup^depth(E_prep)` seen.
    pub max_ratio: f64,
    pub tail: f64,
    pub violations: Vec<EnergyViolation>,
}

/// Walk one trajectory of `circuit` and check every mode touched by a gate
/// against `gsup^depth(E_prep)`, with `E_prep` the largest preparation energy.
pub fn verify_circuit_energy<R: Rng + ?Sized>(
    circuit: &FtCircuit,
    grid: GridSpec,
    noise: NoiseAssignment,
    key: u64,
    envelope: EnvelopeFactory,
    rng: &mut R,
) -> Result<CircuitEnergyReport> {
    let mut e_prep: f64 = 0.0;
    let mut tail: f64 = 0.0;
    for loc in &circuit.ops {
        if let CvOp::Prep { target, s, .. } = &loc.op {
            let (e, t) = prep_energy(*target, *s, grid, &envelope)?;
            e_prep = e_prep.max(e);
            tail = tail.max(t);
        }
    }
    let depths = circuit.depths();
    let mut sim = ExactSim::new(grid, noise, key).with_envelope(envelope);
    let mut report = CircuitEnergyReport { e_prep, ell: circuit.ell(), checks: 0, max_ratio: 0.0, tail, violations: Vec::new() };
    for (i, loc) in circuit.ops.iter().enumerate() {
        sim.step(i, loc, rng)?;
        for (mode, depth) in &depths[i] {
            let st = sim.state().ok_or_else(|| SimError::Domain("no live modes".into()))?;
            let m = moments(st, sim.pos(*mode)?)?;
            let e = m.mean_photon();
            let bound = gsup_iterate(e_prep, *depth);
            report.checks += 1;
            report.tail = report.tail.max(m.tail);
            report.max_ratio = report.max_ratio.max(e / bound);
            if e > bound * (1.0 + BOUND_SLACK) {
                report.violations.push(EnergyViolation { step: i, mode: *mode, energy: e, bound });
            }
        }
    }
    Ok(report)
}
