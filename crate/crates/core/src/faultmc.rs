//! Shift-tracking Monte Carlo over FT-GKP circuits, and the fault-path and
//! threshold calculators.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use statrs::distribution::ContinuousCDF;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::circuits::{build_ft_circuit, run_exact, CvLoc, CvOp, EcParams, FtCircuit, FtParams, PauliFrame, QubitCircuit};
use crate::error::{Result, SimError};
use crate::gates::{snap_inside, GateKind};
use crate::measurement::{bin_residual, gkp_bin, Basis};
use crate::zakcore::{GridSpec, SQRT_PI};

/// Which family of location a noise draw belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocKind {
    Prep,
    Gate,
    Meas,
}

/// Displacement distribution of one location.
#[derive(Clone, Debug, PartialEq)]
pub enum ShiftKernel {
    None,
    /// Uniform inside `(-s, s)^2` with the location's own declared `s`.
    /// Preparations carry their `s` in the envelope and get no extra shift.
    Declared,
    Uniform { s: f64 },
    /// Unbounded; outside the bounded-support noise class.
    Gaussian { sigma: f64 },
    Fixed { w1: f64, w2: f64 },
    /// The extreme point of the declared support in the given sign direction
    /// (signs in `{-1, 0, 1}`); adversarial probes.
    Edge { sign1: f64, sign2: f64 },
    /// Edge displacement with signs chosen per `(op index, sub-mode)`; absent keys draw zero.
    EdgeTable(BTreeMap<(usize, usize), (f64, f64)>),
}

/// One realized displacement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shift {
    pub w1: f64,
    pub w2: f64,
    pub rare: bool,
}

/// Per-location-kind kernels for data locations and EC internals, plus the
/// rare tier: with probability `eps` a location's kernel is replaced by `rare`.
#[derive(Clone, Debug)]
pub struct NoiseAssignment {
    pub prep: ShiftKernel,
    pub gate: ShiftKernel,
    pub meas: ShiftKernel,
    pub ec_prep: ShiftKernel,
    pub ec_gate: ShiftKernel,
    pub ec_meas: ShiftKernel,
    pub eps: f64,
    pub rare: ShiftKernel,
    /// Extra `(op index, w1, w2)` displacements applied to the op's first
    /// mode just before the op runs.
    pub injections: Vec<(usize, f64, f64)>,
    /// Snap draws to grid offsets so a tracker matches the exact simulator.
    pub snap: Option<GridSpec>,
}

impl NoiseAssignment {
    pub fn ideal() -> Self {
        Self {
            prep: ShiftKernel::None,
            gate: ShiftKernel::None,
            meas: ShiftKernel::None,
            ec_prep: ShiftKernel::None,
            ec_gate: ShiftKernel::None,
            ec_meas: ShiftKernel::None,
            eps: 0.0,
            rare: ShiftKernel::None,
            injections: Vec::new(),
            snap: None,
        }
    }

    /// Every location draws uniformly within its declared `s`.
    pub fn declared() -> Self {
        Self {
            prep: ShiftKernel::Declared,
            gate: ShiftKernel::Declared,
            meas: ShiftKernel::Declared,
            ec_prep: ShiftKernel::Declared,
            ec_gate: ShiftKernel::Declared,
            ec_meas: ShiftKernel::Declared,
            ..Self::ideal()
        }
    }

    /// Gaussian displacements on data gates (waits included); EC internals ideal.
    pub fn gaussian_memory(sigma: f64) -> Self {
        Self { gate: ShiftKernel::Gaussian { sigma }, ..Self::ideal() }
    }

    pub fn with_snap(mut self, grid: GridSpec) -> Self {
        self.snap = Some(grid);
        self
    }

    pub fn inject(mut self, op: usize, w1: f64, w2: f64) -> Self {
        self.injections.push((op, w1, w2));
        self
    }

    fn kernel(&self, kind: LocKind, in_ec: bool) -> &ShiftKernel {
        match (kind, in_ec) {
            (LocKind::Prep, false) => &self.prep,
            (LocKind::Gate, false) => &self.gate,
            (LocKind::Meas, false) => &self.meas,
            (LocKind::Prep, true) => &self.ec_prep,
            (LocKind::Gate, true) => &self.ec_gate,
            (LocKind::Meas, true) => &self.ec_meas,
        }
    }

    /// Draw for location `loc` (op index), sub-mode `sub`, within trial `key`.
    /// Depends only on those three numbers, so every backend sees the same draw.
    pub fn draw(&self, key: u64, loc: usize, sub: usize, kind: LocKind, in_ec: bool, s: f64) -> Shift {
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        rng.set_stream((loc as u64) << 2 | sub as u64);
        let rare = self.eps > 0.0 && rng.random::<f64>() < self.eps;
        let kernel = if rare { &self.rare } else { self.kernel(kind, in_ec) };
        let (w1, w2, bound) = match kernel {
            ShiftKernel::None => (0.0, 0.0, None),
            ShiftKernel::Declared if kind == LocKind::Prep => (0.0, 0.0, None),
            ShiftKernel::Declared => uniform_pair(&mut rng, s),
            ShiftKernel::Uniform { s } => uniform_pair(&mut rng, *s),
            ShiftKernel::Gaussian { sigma } => {
                let nd = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
                (nd.sample(&mut rng), nd.sample(&mut rng), None)
            }
            ShiftKernel::Fixed { w1, w2 } => (*w1, *w2, None),
            ShiftKernel::Edge { sign1, sign2 } => {
                let e = s * (1.0 - 1e-9);
                (sign1 * e, sign2 * e, Some(s))
            }
            ShiftKernel::EdgeTable(t) => {
                let (a, b) = t.get(&(loc, sub)).copied().unwrap_or((0.0, 0.0));
                let e = s * (1.0 - 1e-9);
                (a * e, b * e, Some(s))
            }
        };
        let (w1, w2) = match (&self.snap, bound) {
            (Some(g), Some(s)) => (snap_inside(g, w1, s) as f64 * g.delta(), snap_inside(g, w2, s) as f64 * g.delta()),
            (Some(g), None) => (g.offset_of(w1) as f64 * g.delta(), g.offset_of(w2) as f64 * g.delta()),
            (None, _) => (w1, w2),
        };
        Shift { w1, w2, rare }
    }
}

fn uniform_pair(rng: &mut ChaCha8Rng, s: f64) -> (f64, f64, Option<f64>) {
    if s <= 0.0 {
        return (0.0, 0.0, None);
    }
    (rng.random_range(-s..s), rng.random_range(-s..s), Some(s))
}

// ---------------------------------------------------------------- shift tracker

/// Accumulated error displacement `(u, v)` of each live mode, plus the frame
/// of wrong corrections. The ideal codeword never enters: every gate acts
/// linearly on shifts, so only the error part is tracked.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShiftState {
    pub shifts: BTreeMap<usize, (f64, f64)>,
    pub frame: PauliFrame,
    pub key: u64,
}

impl ShiftState {
    pub fn new(key: u64) -> Self {
        Self { key, ..Self::default() }
    }

    pub fn get(&self, mode: usize) -> (f64, f64) {
        self.shifts.get(&mode).copied().unwrap_or((0.0, 0.0))
    }

    pub fn displace(&mut self, mode: usize, w1: f64, w2: f64) {
        let e = self.shifts.entry(mode).or_insert((0.0, 0.0));
        e.0 += w1;
        e.1 += w2;
    }
}

/// Conjugate the shifts and frame through `gate` on virtual `modes`.
/// Displacement gates move the codeword only, so they leave the error alone.
pub fn propagate_shift(state: &mut ShiftState, gate: &GateKind, modes: &[usize]) {
    match gate {
        GateKind::Fourier => {
            let (u, v) = state.get(modes[0]);
            state.shifts.insert(modes[0], (-v, u));
        }
        GateKind::Shear => {
            let (u, v) = state.get(modes[0]);
            state.shifts.insert(modes[0], (u, v + u));
        }
        GateKind::Sum { .. } => {
            let (uc, vc) = state.get(modes[0]);
            let (ut, vt) = state.get(modes[1]);
            state.shifts.insert(modes[0], (uc, vc - vt));
            state.shifts.insert(modes[1], (ut + uc, vt));
        }
        GateKind::DisplacementX | GateKind::DisplacementZ | GateKind::GeneralDisplacement(..) | GateKind::Wait => {}
    }
    state.frame.propagate(gate, modes);
}

/// What one Knill EC did in a trial.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EcTrace {
    /// Data shift entering the gadget.
    pub input: (f64, f64),
    /// The Z-basis syndrome bit disagrees with the incoming frame: the
    /// gadget added a logical X.
    pub flip_x: bool,
    /// Same for the X-basis syndrome bit and logical Z.
    pub flip_z: bool,
    /// Shift of the output mode after the frame update.
    pub output: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialResult {
    /// Per data measurement (in [`FtCircuit::measurements`] order): 1 when the
    /// corrected outcome differs from the noiseless one.
    pub errors: Vec<u8>,
    pub ecs: Vec<EcTrace>,
    /// Op indices whose draw came from the rare tier.
    pub rare_ops: Vec<usize>,
    /// Smallest distance of any binned quadrature to a bin edge.
    pub min_margin: f64,
    /// A conditional gate fired on a wrong classical bit.
    pub misfire: bool,
}

impl TrialResult {
    pub fn any_error(&self) -> bool {
        self.errors.iter().any(|e| *e == 1)
    }
}

/// Run one trial of `circuit` under `noise`, with draws keyed by `key` exactly
/// as [`crate::circuits::ExactSim`] keys them.
pub fn run_trial(circuit: &FtCircuit, noise: &NoiseAssignment, key: u64) -> TrialResult {
    let mut st = ShiftState::new(key);
    let mut cond_rng = ChaCha8Rng::seed_from_u64(key);
    cond_rng.set_stream(u64::MAX);
    // Per slot: (bit error, bit value as seen by conditional gates).
    let mut slots: Vec<(u8, u8)> = vec![(0, 0); circuit.n_slots];
    let ec_at: BTreeMap<usize, usize> = circuit.ecs.iter().enumerate().map(|(i, ec)| (ec.ops.start, i)).collect();
    let ec_end: BTreeMap<usize, usize> = circuit.ecs.iter().enumerate().map(|(i, ec)| (ec.ops.end, i)).collect();
    let mut ecs = vec![EcTrace { input: (0.0, 0.0), flip_x: false, flip_z: false, output: (0.0, 0.0) }; circuit.ecs.len()];
    let mut ec_frame = vec![(false, false); circuit.ecs.len()];
    let mut rare_ops = Vec::new();
    let mut min_margin = f64::INFINITY;
    let mut misfire = false;

    let draw = |st: &mut ShiftState, rare_ops: &mut Vec<usize>, idx: usize, loc: &CvLoc, sub: usize, mode: usize, s: f64| {
        let kind = loc.kind().expect("physical location");
        let sh = noise.draw(key, idx, sub, kind, loc.in_ec, s);
        if sh.rare && rare_ops.last() != Some(&idx) {
            rare_ops.push(idx);
        }
        st.displace(mode, sh.w1, sh.w2);
    };

    for (idx, loc) in circuit.ops.iter().enumerate() {
        if let Some(e) = ec_at.get(&idx) {
            ecs[*e].input = st.get(circuit.ecs[*e].input_mode);
            ec_frame[*e] = st.frame.get(circuit.ecs[*e].input_mode);
        }
        if let Some(m) = loc.modes().first() {
            if st.shifts.contains_key(m) {
                for (_, a, b) in noise.injections.iter().filter(|(o, ..)| *o == idx) {
                    st.displace(*m, *a, *b);
                }
            }
        }
        match &loc.op {
            CvOp::Prep { mode, s, .. } => {
                st.shifts.insert(*mode, (0.0, 0.0));
                st.frame.clear(*mode);
                draw(&mut st, &mut rare_ops, idx, loc, 0, *mode, *s);
            }
            CvOp::Gate { gate, modes, s, cond } => {
                let active = match cond {
                    Some(k) => {
                        let (err, _) = slots[*k];
                        if err == 1 {
                            misfire = true;
                        }
                        slots[*k].1 == 1
                    }
                    None => true,
                };
                if active {
                    propagate_shift(&mut st, gate, modes);
                }
                for (k, m) in modes.iter().enumerate() {
                    draw(&mut st, &mut rare_ops, idx, loc, k, *m, *s);
                }
            }
            CvOp::Meas { mode, basis, s, slot } => {
                draw(&mut st, &mut rare_ops, idx, loc, 0, *mode, *s);
                let (u, v) = st.get(*mode);
                let x = match basis {
                    Basis::Z => u,
                    Basis::X => v,
                };
                min_margin = min_margin.min(SQRT_PI / 2.0 - bin_residual(x).abs());
                let err = st.frame.correct(*mode, *basis, gkp_bin(x));
                let ideal: u8 = cond_rng.random_range(0..2);
                slots[*slot] = (err, ideal ^ err);
                st.shifts.remove(mode);
                st.frame.clear(*mode);
            }
            CvOp::Frame { mode, x_slot, z_slot } => {
                st.frame.flip(*mode, slots[*x_slot].0 == 1, slots[*z_slot].0 == 1);
            }
        }
        if let Some(e) = ec_end.get(&(idx + 1)) {
            let ec = &circuit.ecs[*e];
            ecs[*e].flip_x = (slots[ec.slot_z].0 == 1) != ec_frame[*e].0;
            ecs[*e].flip_z = (slots[ec.slot_x].0 == 1) != ec_frame[*e].1;
            ecs[*e].output = st.get(ec.output_mode);
        }
    }
    let errors = circuit.measurements.iter().map(|m| slots[m.slot].0).collect();
    TrialResult { errors, ecs, rare_ops, min_margin, misfire }
}

// ---------------------------------------------------------------- Monte Carlo

/// Key of trial `index` under `seed` (splitmix64 finalizer).
pub fn trial_key(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Binomial rate with its standard error and 95% Wilson interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateEstimate {
    pub hits: u64,
    pub trials: u64,
    pub rate: f64,
    pub stderr: f64,
    pub wilson: (f64, f64),
}

impl RateEstimate {
    pub fn new(hits: u64, trials: u64) -> Self {
        let n = trials.max(1) as f64;
        let p = hits as f64 / n;
        let z = 1.96f64;
        let denom = 1.0 + z * z / n;
        let centre = (p + z * z / (2.0 * n)) / denom;
        let half = z / denom * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt();
        Self {
            hits,
            trials,
            rate: p,
            stderr: (p * (1.0 - p) / n).sqrt(),
            wilson: ((centre - half).max(0.0), (centre + half).min(1.0)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogicalErrorEstimate {
    pub trials: u64,
    pub seed: u64,
    /// Trials in which some EC left a logical X behind.
    pub x: RateEstimate,
    /// Trials in which some EC left a logical Z behind.
    pub z: RateEstimate,
    /// Trials with a wrong data measurement outcome.
    pub outcome: RateEstimate,
    pub rare_trials: u64,
    pub misfires: u64,
}

#[derive(Clone, Copy, Default)]
struct Tally {
    x: u64,
    z: u64,
    outcome: u64,
    rare: u64,
    misfire: u64,
}

impl Tally {
    fn add(self, o: Self) -> Self {
        Self {
            x: self.x + o.x,
            z: self.z + o.z,
            outcome: self.outcome + o.outcome,
            rare: self.rare + o.rare,
            misfire: self.misfire + o.misfire,
        }
    }
}

/// Run `trials` independent trials in parallel on the current rayon pool.
/// Counts are integers, so the result does not depend on scheduling.
pub fn estimate_logical_error(circuit: &FtCircuit, noise: &NoiseAssignment, trials: u64, seed: u64) -> Result<LogicalErrorEstimate> {
    if trials == 0 {
        return Err(SimError::Domain("trials must be at least 1".into()));
    }
    let t = (0..trials)
        .into_par_iter()
        .map(|i| {
            let r = run_trial(circuit, noise, trial_key(seed, i));
            Tally {
                x: u64::from(r.ecs.iter().any(|e| e.flip_x)),
                z: u64::from(r.ecs.iter().any(|e| e.flip_z)),
                outcome: u64::from(r.any_error()),
                rare: u64::from(!r.rare_ops.is_empty()),
                misfire: u64::from(r.misfire),
            }
        })
        .reduce(Tally::default, Tally::add);
    Ok(LogicalErrorEstimate {
        trials,
        seed,
        x: RateEstimate::new(t.x, trials),
        z: RateEstimate::new(t.z, trials),
        outcome: RateEstimate::new(t.outcome, trials),
        rare_trials: t.rare,
        misfires: t.misfire,
    })
}

/// Probability that a centred Gaussian of width `sigma` lands in an odd bin.
pub fn gaussian_bin_tail(sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return 0.0;
    }
    let nd = statrs::distribution::Normal::new(0.0, sigma).expect("positive sigma");
    let half = SQRT_PI / 2.0;
    let reach = (12.0 * sigma / SQRT_PI).ceil() as i64 + 1;
    let mut total = 0.0;
    let mut n = 1;
    while n <= reach {
        let centre = n as f64 * SQRT_PI;
        // Both signs contribute equally.
        total += 2.0 * (nd.cdf(centre + half) - nd.cdf(centre - half));
        n += 2;
    }
    total
}

/// Memory benchmark: one qubit prepared in `|0>`, one wait, and a Z measurement.
/// Under [`NoiseAssignment::gaussian_memory`] only the wait is noisy, so the
/// single EC that follows it sees exactly one Gaussian draw per quadrature.
pub fn memory_circuit() -> FtCircuit {
    let qc = QubitCircuit::parse("t=0 q=0 op=prep target=0\nt=1 q=0 op=i\nt=2 q=0 op=measure basis=z\n")
        .expect("fixed circuit text");
    build_ft_circuit(&qc, FtParams::uniform(0.0, 0.0, 0.0)).expect("fixed circuit")
}

// ---------------------------------------------------------------- calculators

/// Counts for the level-reduction bound. Built only from a circuit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaultPathParams {
    l_max: usize,
    locations: usize,
    eps: f64,
}

impl FaultPathParams {
    pub fn from_circuit(circuit: &FtCircuit, eps: f64) -> Result<Self> {
        let p = Self { l_max: circuit.l_max(), locations: circuit.location_count(), eps };
        if !(eps.is_finite() && (0.0..1.0).contains(&eps)) {
            return Err(SimError::Domain(format!("eps {eps} must lie in [0, 1)")));
        }
        if p.l_max == 0 || p.locations == 0 {
            return Err(SimError::Domain("circuit has no locations".into()));
        }
        Ok(p)
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn locations(&self) -> usize {
        self.locations
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaultPathBounds {
    pub eps_qubit: f64,
    /// `eps_qubit^|R|`.
    pub fault_path: f64,
    /// `(e - 1) |I| eps_qubit`.
    pub tv_bound: f64,
    /// `eps_qubit <= 1 / |I|`.
    pub valid: bool,
}

pub fn fault_path_bounds(p: &FaultPathParams, r: usize) -> FaultPathBounds {
    let eps_qubit = 10.0 * p.eps * p.l_max as f64;
    let i = p.locations as f64;
    FaultPathBounds {
        eps_qubit,
        fault_path: eps_qubit.powi(r as i32),
        tv_bound: (std::f64::consts::E - 1.0) * i * eps_qubit,
        valid: eps_qubit <= 1.0 / i,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdReport {
    pub s_e: f64,
    /// `c/2` minus `s_p + s_e`, `3 s_e + s_g` and `s_e + s_m`, each snapped
    /// to 0 within `1e-12 c`.
    pub margins: [f64; 3],
    pub feasible: bool,
}

pub fn threshold_params(s_p: f64, s_g: f64, s_m: f64) -> ThresholdReport {
    let s_e = EcParams::from_psm(s_p, s_g, s_m).s_out();
    let half = SQRT_PI / 2.0;
    let margins = [s_p + s_e, 3.0 * s_e + s_g, s_e + s_m].map(|x| {
        let m = half - x;
        if m.abs() < 1e-12 * SQRT_PI {
            0.0
        } else {
            m
        }
    });
    let sane = [s_p, s_g, s_m].iter().all(|s| s.is_finite() && *s >= 0.0);
    ThresholdReport { s_e, margins, feasible: sane && margins.iter().all(|m| *m > 0.0) }
}

/// Op indices of the truncated ExRec `e`: its leading ECs and its core.
pub fn exrec_ops(circuit: &FtCircuit, e: usize) -> Vec<usize> {
    let ex = &circuit.exrecs[e];
    let mut ops: Vec<usize> = ex.leading.iter().flat_map(|k| circuit.ecs[*k].ops.clone()).collect();
    ops.extend(ex.core_ops.clone());
    ops
}

/// Greedy groups of `size` truncated ExRecs with pairwise disjoint ops.
pub fn disjoint_exrec_sets(circuit: &FtCircuit, size: usize) -> Vec<Vec<usize>> {
    let mut sets = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut used = std::collections::BTreeSet::new();
    for e in 0..circuit.exrecs.len() {
        let ops = exrec_ops(circuit, e);
        if ops.iter().any(|o| used.contains(o)) {
            continue;
        }
        used.extend(ops);
        cur.push(e);
        if cur.len() == size {
            sets.push(std::mem::take(&mut cur));
            used.clear();
        }
    }
    sets
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarkovCheck {
    pub set: Vec<usize>,
    pub observed: RateEstimate,
    pub bound: f64,
    pub ok: bool,
}

/// Frequency with which every ExRec of each set holds a rare event, against
/// `(10 eps L_max)^|R|` plus three standard errors.
pub fn local_markov_check(
    circuit: &FtCircuit,
    noise: &NoiseAssignment,
    sets: &[Vec<usize>],
    trials: u64,
    seed: u64,
) -> Result<Vec<MarkovCheck>> {
    let p = FaultPathParams::from_circuit(circuit, noise.eps)?;
    let op_sets: Vec<Vec<Vec<usize>>> = sets.iter().map(|s| s.iter().map(|e| exrec_ops(circuit, *e)).collect()).collect();
    let hits = (0..trials)
        .into_par_iter()
        .map(|i| {
            let r = run_trial(circuit, noise, trial_key(seed, i));
            op_sets
                .iter()
                .map(|set| u64::from(set.iter().all(|ops| ops.iter().any(|o| r.rare_ops.contains(o)))))
                .collect::<Vec<_>>()
        })
        .reduce(|| vec![0; sets.len()], |a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect());
    Ok(sets
        .iter()
        .zip(hits)
        .map(|(set, h)| {
            let observed = RateEstimate::new(h, trials);
            let bound = fault_path_bounds(&p, set.len()).fault_path;
            MarkovCheck { set: set.clone(), observed, bound, ok: observed.rate <= bound + 3.0 * observed.stderr }
        })
        .collect())
}

// ---------------------------------------------------------------- cross-check

/// Random Clifford circuit followed by its inverse, so every `|0>` input
/// returns to `|0>` and the ideal outcomes are all zero.
pub fn mirror_circuit<R: Rng + ?Sized>(width: usize, gates: usize, rng: &mut R) -> QubitCircuit {
    let mut seq: Vec<(&str, Vec<usize>)> = Vec::with_capacity(gates);
    for _ in 0..gates {
        let q = rng.random_range(0..width);
        let pick = rng.random_range(0..if width > 1 { 5 } else { 4 });
        seq.push(match pick {
            0 => ("x", vec![q]),
            1 => ("z", vec![q]),
            2 => ("h", vec![q]),
            3 => ("i", vec![q]),
            _ => {
                let t = (q + rng.random_range(1..width)) % width;
                ("cnot", vec![q, t])
            }
        });
    }
    let mut text = String::new();
    for q in 0..width {
        text.push_str(&format!("t=0 q={q} op=prep target=0\n"));
    }
    let mut t = 1;
    for (op, qs) in seq.iter().chain(seq.iter().rev()) {
        let names: Vec<String> = qs.iter().map(|q| q.to_string()).collect();
        text.push_str(&format!("t={t} q={} op={op}\n", names.join(",")));
        for q in (0..width).filter(|q| !qs.contains(q)) {
            text.push_str(&format!("t={t} q={q} op=i\n"));
        }
        t += 1;
    }
    for q in 0..width {
        text.push_str(&format!("t={t} q={q} op=measure basis=z\n"));
    }
    QubitCircuit::parse(&text).expect("generated circuit text")
}

/// Outcome errors of one trial under both backends.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossCheck {
    pub tracker: Vec<u8>,
    pub exact: Vec<u8>,
    pub min_margin: f64,
}

impl CrossCheck {
    pub fn agree(&self) -> bool {
        self.tracker == self.exact
    }
}

/// Run trial `key` through the tracker and the exact simulator on `grid`.
/// The circuit must have a deterministic ideal outcome.
pub fn cross_check_trial(circuit: &FtCircuit, grid: GridSpec, noise: &NoiseAssignment, key: u64) -> Result<CrossCheck> {
    let dist = circuit.source.ideal_distribution();
    let ideal = dist
        .iter()
        .position(|p| *p > 1.0 - 1e-9)
        .ok_or_else(|| SimError::Domain("ideal outcome is not deterministic".into()))?;
    let k = circuit.measurements.len();
    let ideal_bits: Vec<u8> = (0..k).map(|i| ((ideal >> (k - 1 - i)) & 1) as u8).collect();
    let mut noise = noise.clone();
    noise.snap.get_or_insert(grid);
    let t = run_trial(circuit, &noise, key);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let run = run_exact(circuit, grid, noise, key, &mut rng)?;
    let exact = run.outcomes.iter().zip(&ideal_bits).map(|(a, b)| a ^ b).collect();
    Ok(CrossCheck { tracker: t.errors, exact, min_margin: t.min_margin })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::states::LogicalTarget;
    use crate::ftcheck::point_state;
    use crate::gates::apply_gate;

    const C: f64 = SQRT_PI;

    fn close(a: (f64, f64), b: (f64, f64)) -> bool {
        (a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12
    }

    #[test]
    fn shift_rules() {
        let mut st = ShiftState::new(0);
        st.shifts.insert(0, (0.1, 0.2));
        propagate_shift(&mut st, &GateKind::Fourier, &[0]);
        assert!(close(st.get(0), (-0.2, 0.1)));

        let mut st = ShiftState::new(0);
        st.shifts.insert(0, (0.1, 0.0));
        st.shifts.insert(1, (0.0, 0.2));
        propagate_shift(&mut st, &GateKind::Sum { control: 0, target: 1 }, &[0, 1]);
        assert!(close(st.get(0), (0.1, -0.2)));
        assert!(close(st.get(1), (0.1, 0.2)));

        for g in [GateKind::Wait, GateKind::DisplacementX, GateKind::GeneralDisplacement(0.3, 0.1)] {
            let mut st = ShiftState::new(0);
            st.shifts.insert(0, (0.1, 0.2));
            propagate_shift(&mut st, &g, &[0]);
            assert!(close(st.get(0), (0.1, 0.2)));
        }
    }

    fn circ_dist(a: f64, b: f64) -> f64 {
        let d = (a - b).rem_euclid(C);
        d.min(C - d)
    }

    #[test]
    fn shift_motion_matches_exact_trajectory() {
        let grid = GridSpec::new(16, 12).unwrap();
        let d = grid.delta();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let k: Vec<i64> = (0..4).map(|_| rng.random_range(-8..8)).collect();
            let mut state = point_state(grid, LogicalTarget::Zero, k[0], k[1])
                .unwrap()
                .tensor(&point_state(grid, LogicalTarget::Zero, k[2], k[3]).unwrap())
                .unwrap();
            let mut st = ShiftState::new(0);
            st.shifts.insert(0, (k[0] as f64 * d, k[1] as f64 * d));
            st.shifts.insert(1, (k[2] as f64 * d, k[3] as f64 * d));
            for _ in 0..rng.random_range(1..12) {
                let m = rng.random_range(0..2usize);
                let (g, modes) = match rng.random_range(0..6) {
                    0 => (GateKind::Fourier, vec![m]),
                    1 => (GateKind::Shear, vec![m]),
                    2 => (GateKind::DisplacementX, vec![m]),
                    3 => (GateKind::DisplacementZ, vec![m]),
                    _ => (GateKind::Sum { control: m, target: 1 - m }, vec![m, 1 - m]),
                };
                state = apply_gate(&state, &g, modes[0]).unwrap();
                propagate_shift(&mut st, &g, &modes);
            }
            for (label, _) in state.entries() {
                for m in 0..2 {
                    let (_, z1, z2) = grid.coords(label[m]);
                    let (u, v) = st.get(m);
                    assert!(circ_dist(z1, u) < d / 2.0 && circ_dist(z2, v) < d / 2.0, "mode {m}: ({z1}, {z2}) vs ({u}, {v})");
                }
            }
        }
    }

    #[test]
    fn zero_noise_zero_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let qc = mirror_circuit(2, 6, &mut rng);
        let circ = build_ft_circuit(&qc, FtParams::uniform(0.1, 0.1, 0.1)).unwrap();
        for key in 0..20 {
            let r = run_trial(&circ, &NoiseAssignment::ideal(), key);
            assert!(!r.any_error());
            assert!(r.ecs.iter().all(|e| !e.flip_x && !e.flip_z));
            assert!((r.min_margin - C / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn injected_shift_flips_one_ec() {
        let circ = memory_circuit();
        let target = circ.ecs.iter().position(|e| circ.ops[e.ops.start + 4].modes()[0] == e.input_mode).unwrap();
        let at = circ.ecs[target].ops.start + 4;
        for (w1, w2, fx, fz) in [(0.9 * C, 0.0, true, false), (0.0, 0.9 * C, false, true), (0.4 * C, -0.4 * C, false, false)] {
            let noise = NoiseAssignment::ideal().inject(at, w1, w2);
            let r = run_trial(&circ, &noise, 1);
            let flips: Vec<(bool, bool)> = r.ecs.iter().map(|e| (e.flip_x, e.flip_z)).collect();
            for (i, f) in flips.iter().enumerate() {
                let want = if i == target { (fx, fz) } else { (false, false) };
                assert_eq!(*f, want, "ec {i} for ({w1}, {w2})");
            }
            assert_eq!(r.errors, vec![u8::from(fx)]);
        }
    }

    #[test]
    fn teleportation_resets_output_shift() {
        let circ = memory_circuit();
        let noise = NoiseAssignment::gaussian_memory(0.3);
        for key in 0..50 {
            let r = run_trial(&circ, &noise, key);
            for e in &r.ecs {
                assert_eq!(e.output, (0.0, 0.0));
            }
        }
    }

    /// Composite Simpson integral of the odd-bin mass, independent of the library's cdf sum.
    fn simpson_tail(sigma: f64) -> f64 {
        let pdf = |x: f64| (-x * x / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        let mut total = 0.0;
        let mut n = 1;
        while (n as f64 - 0.5) * C < 14.0 * sigma {
            let (a, b) = ((n as f64 - 0.5) * C, (n as f64 + 0.5) * C);
            let m = 2000;
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

    #[test]
    fn bin_tail_matches_quadrature() {
        for sigma in [0.1, 0.2, 0.3, 0.5, 1.0] {
            assert!((gaussian_bin_tail(sigma) - simpson_tail(sigma)).abs() < 1e-10, "sigma {sigma}");
        }
        assert_eq!(gaussian_bin_tail(0.0), 0.0);
    }

    #[test]
    fn memory_rate_calibrates() {
        let circ = memory_circuit();
        for sigma in [0.2, 0.3] {
            let est = estimate_logical_error(&circ, &NoiseAssignment::gaussian_memory(sigma), 20_000, 9).unwrap();
            let want = simpson_tail(sigma);
            for r in [est.x, est.z] {
                let se = (want * (1.0 - want) / r.trials as f64).sqrt();
                assert!((r.rate - want).abs() < 3.0 * se, "sigma {sigma}: {} vs {want}", r.rate);
                assert!(r.wilson.0 <= r.rate && r.rate <= r.wilson.1);
            }
            assert_eq!(est.outcome.hits, est.x.hits);
        }
    }

    #[test]
    fn estimate_is_deterministic_and_scales() {
        let circ = memory_circuit();
        let noise = NoiseAssignment::gaussian_memory(0.4);
        let a = estimate_logical_error(&circ, &noise, 4000, 5).unwrap();
        let b = estimate_logical_error(&circ, &noise, 4000, 5).unwrap();
        assert_eq!(a, b);
        let big = estimate_logical_error(&circ, &noise, 8000, 5).unwrap();
        let ratio = a.x.stderr / big.x.stderr;
        assert!((ratio - 2f64.sqrt()).abs() < 0.1, "ratio {ratio}");
        assert!((0.0..=1.0).contains(&a.x.rate));
        assert!(estimate_logical_error(&circ, &noise, 0, 5).is_err());
    }

    #[test]
    fn wilson_interval_edges() {
        let r = RateEstimate::new(0, 100);
        assert_eq!(r.rate, 0.0);
        assert_eq!(r.wilson.0, 0.0);
        assert!(r.wilson.1 > 0.0 && r.wilson.1 < 0.05);
        let r = RateEstimate::new(100, 100);
        assert!(r.wilson.1 > 1.0 - 1e-12 && r.wilson.0 > 0.95);
    }

    fn chain(len: usize) -> FtCircuit {
        let mut text = String::from("t=0 q=0 op=prep target=0\n");
        for t in 1..=len {
            text.push_str(&format!("t={t} q=0 op=i\n"));
        }
        text.push_str(&format!("t={} q=0 op=measure basis=z\n", len + 1));
        build_ft_circuit(&QubitCircuit::parse(&text).unwrap(), FtParams::uniform(0.0, 0.0, 0.0)).unwrap()
    }

    #[test]
    fn fault_path_examples() {
        let circ = chain(48);
        assert_eq!(circ.location_count(), 50);
        assert_eq!(circ.l_max(), 10);
        let p = FaultPathParams::from_circuit(&circ, 1e-4).unwrap();
        let b = fault_path_bounds(&p, 2);
        assert_eq!(b.eps_qubit, 10.0 * 1e-4 * 10.0);
        assert!((b.eps_qubit - 0.01).abs() < 1e-17);
        assert_eq!(b.fault_path, b.eps_qubit * b.eps_qubit);
        assert!((b.fault_path - 1e-4).abs() < 1e-18);
        assert!((b.tv_bound - 0.859140914).abs() < 1e-8);
        assert!(b.valid);
        let b = fault_path_bounds(&FaultPathParams::from_circuit(&circ, 1e-3).unwrap(), 1);
        assert!((b.eps_qubit - 0.1).abs() < 1e-16);
        assert!(!b.valid);
        assert!(FaultPathParams::from_circuit(&circ, 1.0).is_err());
        assert!(FaultPathParams::from_circuit(&circ, -0.1).is_err());
    }

    #[test]
    fn threshold_examples() {
        let r = threshold_params(C / 40.0, C / 40.0, C / 40.0);
        assert!((r.s_e - 6.0 * C / 40.0).abs() < 1e-15);
        assert!(r.feasible && r.margins.iter().all(|m| *m > 0.0));
        let r = threshold_params(C / 38.0, C / 38.0, C / 38.0);
        assert_eq!(r.margins[1], 0.0);
        assert!(!r.feasible);
        let r = threshold_params(0.0, 0.0, 0.0);
        assert_eq!(r.s_e, 0.0);
        assert!(r.feasible);
    }

    #[test]
    fn rare_events_respect_markov_bound() {
        let circ = chain(6);
        let noise = NoiseAssignment { eps: 0.02, rare: ShiftKernel::Fixed { w1: 0.5, w2: 0.5 }, ..NoiseAssignment::ideal() };
        for size in [1, 2] {
            let sets = disjoint_exrec_sets(&circ, size);
            assert!(!sets.is_empty());
            let checks = local_markov_check(&circ, &noise, &sets, 4000, 17).unwrap();
            for c in checks {
                assert!(c.ok, "{c:?}");
                assert!(c.observed.hits > 0);
            }
        }
    }

    #[test]
    fn tracker_matches_exact_simulator() {
        let grid = GridSpec::new(16, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let noise = NoiseAssignment {
            prep: ShiftKernel::Uniform { s: 0.3 },
            gate: ShiftKernel::Uniform { s: 0.3 },
            meas: ShiftKernel::Uniform { s: 0.3 },
            ec_prep: ShiftKernel::Uniform { s: 0.3 },
            ec_gate: ShiftKernel::Uniform { s: 0.3 },
            ec_meas: ShiftKernel::Uniform { s: 0.3 },
            ..NoiseAssignment::ideal()
        };
        let (mut kept, mut errors) = (0, 0);
        let mut key = 0;
        while kept < 30 {
            let qc = mirror_circuit(2, 3, &mut rng);
            let circ = build_ft_circuit(&qc, FtParams::uniform(0.0, 0.3, 0.3)).unwrap();
            key += 1;
            let r = cross_check_trial(&circ, grid, &noise, key).unwrap();
            if r.min_margin < 2.0 * grid.delta() {
                continue;
            }
            kept += 1;
            errors += r.tracker.iter().filter(|e| **e == 1).count();
            assert!(r.agree(), "key {key}: {r:?}");
        }
        assert!(errors > 0);
    }
}
