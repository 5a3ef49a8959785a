//! Numerical checks of the gadget fault-tolerance conditions, and a brute-force
//! position-space reference for the Gaussian gates.
//!
//! Every check runs a fixed probe family (four logical states times three
//! envelopes), a few random filtered states and random bounded kernels, and an
//! adversarial corner search with point states and edge displacements. The
//! reported deviation is the largest one seen; a case passes when it stays
//! under the tolerance.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::circuits::{
    bump_envelopes, knill_ec_ops, logical_density, CvLoc, CvOp, EcParams, EnvelopeFactory, ExactSim, FtParams,
};
use crate::error::{Result, SimError};
use crate::faultmc::{NoiseAssignment, ShiftKernel};
use crate::gates::{apply_displacement, apply_gate, offsets_inside, GateKind, KrausGrid};
use crate::measurement::{gkp_bin, homodyne_distribution, to_p_frame, Basis, Quadrature};
use crate::states::{make_s_state_unchecked, EnvelopeSpec, LogicalTarget};
use crate::zakcore::{
    full_k_lo, full_wave, ideal_decode, plan_fft, qubit, single_label, GridSpec, Label, Qubit2, QubitDensity,
    SssState, MAX_MODES, SQRT_PI,
};

const HALF_C: f64 = SQRT_PI / 2.0;

#[derive(Clone, Debug)]
pub struct FtConfig {
    pub n_single: usize,
    pub n_two: usize,
    /// Grid of the three-mode EC gadget.
    pub n_ec: usize,
    pub tol: f64,
    /// Random inputs per case on top of the fixed probes.
    pub trials: usize,
    pub seed: u64,
}

impl Default for FtConfig {
    fn default() -> Self {
        Self { n_single: 64, n_two: 32, n_ec: 16, tol: 1e-6, trials: 4, seed: 0x5eed }
    }
}

fn grid(n: usize) -> Result<GridSpec> {
    GridSpec::new(n, 12)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
        })
    }
}

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub suite: String,
    pub case: String,
    /// `c/2` minus the support sum the condition constrains.
    pub margin: f64,
    pub verdict: Verdict,
    pub expected: Verdict,
    pub deviation: f64,
    pub seed: u64,
}

impl CaseReport {
    fn new(suite: &str, case: String, margin: f64, deviation: f64, expected: Verdict, cfg: &FtConfig) -> Self {
        let verdict = if deviation <= cfg.tol { Verdict::Pass } else { Verdict::Fail };
        Self { suite: suite.into(), case, margin, verdict, expected, deviation, seed: cfg.seed }
    }

    pub fn ok(&self) -> bool {
        self.verdict == self.expected
    }
}

impl fmt::Display for CaseReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "suite={} case={} margin={:+.6} verdict={} expected={} deviation={:.3e} seed={}",
            self.suite, self.case, self.margin, self.verdict, self.expected, self.deviation, self.seed
        )
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: String,
    pub cases: Vec<CaseReport>,
}

impl SuiteReport {
    pub fn ok(&self) -> bool {
        self.cases.iter().all(CaseReport::ok)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.cases {
            writeln!(f, "{c}")?;
        }
        Ok(())
    }
}

/// Strict-inequality margin, with rounding noise at the boundary counted as zero.
fn margin(sum: f64) -> f64 {
    let m = HALF_C - sum;
    if m.abs() <= 1e-12 * SQRT_PI {
        0.0
    } else {
        m
    }
}

fn expect(m: f64) -> Verdict {
    if m > 0.0 {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

// ---------------------------------------------------------------------------
// inputs and kernels

/// Offsets `k` of one axis with `k delta` in `[-r, r)`, clipped to the cell.
pub fn filter_offsets(grid: &GridSpec, r: f64) -> Vec<i64> {
    let d = grid.delta();
    let h = (grid.n() / 2) as i64;
    let eps = 1e-9 * d;
    (-h..h)
        .filter(|k| {
            let z = *k as f64 * d;
            z >= -r - eps && z < r - eps
        })
        .collect()
}

/// `(cos 0.4, e^{0.7 i} sin 0.4)`; sensitive to both X and Z errors.
pub fn generic_target() -> LogicalTarget {
    LogicalTarget::General(C64::new(0.4f64.cos(), 0.0), C64::from_polar(0.4f64.sin(), 0.7))
}

/// Single-mode state whose syndrome is the grid point `(k1, k2) delta`.
pub fn point_state(grid: GridSpec, target: LogicalTarget, k1: i64, k2: i64) -> Result<SssState> {
    let (a, b) = target.amplitudes();
    let mut entries = Vec::with_capacity(2);
    for (mu, amp) in [(0u8, a), (1u8, b)] {
        if amp.norm_sqr() > 0.0 {
            let (l, t) = grid.reduce(mu, k1, k2);
            entries.push((single_label(l), amp * grid.root(t)));
        }
    }
    SssState::from_entries(grid, 1, entries)
}

/// The twelve probes: `|0>, |1>, |+>, |+i>` times bump, flat and tilted
/// complex envelopes of half-width `r` (at least half a cell).
pub fn probe_states(grid: GridSpec, r: f64) -> Result<Vec<(String, SssState)>> {
    let w = r.max(0.5 * grid.delta());
    let targets = [
        ("0", LogicalTarget::Zero),
        ("1", LogicalTarget::one()),
        ("+", LogicalTarget::plus()),
        ("+i", LogicalTarget::Y),
    ];
    let envs = [
        ("bump", EnvelopeSpec::bump(w)),
        ("box", EnvelopeSpec::Custom { s: w, profile: Arc::new(|_| C64::new(1.0, 0.0)) }),
        ("tilted", EnvelopeSpec::Custom { s: w, profile: Arc::new(move |x| C64::from_polar(1.0 + 0.5 * x / w, 3.0 * x)) }),
    ];
    let mut out = Vec::with_capacity(12);
    for (tn, t) in &targets {
        for (en, e) in &envs {
            out.push((format!("{tn}/{en}"), make_s_state_unchecked(*t, e, grid)?));
        }
    }
    Ok(out)
}

/// Random normalized state on `radii.len()` modes supported in `prod [-r_i, r_i)^2`.
pub fn random_filtered_state<R: Rng + ?Sized>(grid: GridSpec, radii: &[f64], rng: &mut R) -> Result<SssState> {
    let n2 = grid.n() as i64 / 2;
    let per_mode: Vec<Vec<u16>> = radii
        .iter()
        .map(|r| {
            let ks = filter_offsets(&grid, *r);
            let mut ls = Vec::new();
            for mu in 0..2u8 {
                for k1 in &ks {
                    for k2 in &ks {
                        ls.push(grid.pack(mu, (k1 + n2) as usize, (k2 + n2) as usize));
                    }
                }
            }
            ls
        })
        .collect();
    let mut entries = Vec::new();
    let mut label: Label = [0; MAX_MODES];
    fill(&per_mode, 0, &mut label, &mut |l| {
        entries.push((*l, C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)));
    });
    SssState::from_entries(grid, radii.len(), entries)?
        .normalized()
        .ok_or_else(|| SimError::Domain("empty filter support".into()))
}

fn fill(per_mode: &[Vec<u16>], m: usize, label: &mut Label, f: &mut impl FnMut(&Label)) {
    if m == per_mode.len() {
        f(label);
        return;
    }
    for l in &per_mode[m] {
        label[m] = *l;
        fill(per_mode, m + 1, label, f);
    }
}

/// Largest offset strictly inside `(-s, s)`.
fn edge_offset(grid: &GridSpec, s: f64) -> i64 {
    offsets_inside(grid, s).into_iter().max().unwrap_or(0)
}

/// A random mixture of displacements including the four corners, plus two
/// coherent kernels reaching the corners.
pub fn random_kernels<R: Rng + ?Sized>(grid: &GridSpec, s: f64, rng: &mut R) -> Result<Vec<KrausGrid>> {
    let ks = offsets_inside(grid, s);
    let e = edge_offset(grid, s);
    let mut pts = vec![(0, 0), (e, e), (e, -e), (-e, e), (-e, -e)];
    for _ in 0..3 {
        pts.push((ks[rng.random_range(0..ks.len())], ks[rng.random_range(0..ks.len())]));
    }
    pts.sort_unstable();
    pts.dedup();
    let w: Vec<f64> = pts.iter().map(|_| rng.random::<f64>() + 0.1).collect();
    let tot: f64 = w.iter().sum();
    let probs: Vec<f64> = w.iter().map(|x| x / tot).collect();
    let mut out = vec![KrausGrid::random_unitary(grid, s, pts, &probs)?];
    if e > 0 {
        for a in [(e, e), (e, -e)] {
            let x = C64::from_polar(0.2, rng.random::<f64>() * 2.0 * PI);
            out.push(KrausGrid::coherent_triple(grid, s, a, x)?);
        }
    }
    Ok(out)
}

/// The four single-point kernels at the corners of `(-s, s)^2`.
fn corner_kernels(grid: &GridSpec, s: f64) -> Result<Vec<KrausGrid>> {
    let e = edge_offset(grid, s);
    let mut pts = vec![(e, e), (e, -e), (-e, e), (-e, -e)];
    pts.dedup();
    pts.into_iter().map(|p| KrausGrid::random_unitary(grid, s, vec![p], &[1.0])).collect()
}

/// Extreme offsets `(low, high)` of the filter `[-r, r)`.
fn filter_corners(grid: &GridSpec, r: f64) -> Vec<i64> {
    let ks = filter_offsets(grid, r);
    match (ks.first(), ks.last()) {
        (Some(a), Some(b)) if a != b => vec![*a, *b],
        (Some(a), _) => vec![*a],
        _ => Vec::new(),
    }
}

/// Point states at the corners of the filter `[-r, r)^2`.
fn corner_states(grid: GridSpec, r: f64) -> Result<Vec<SssState>> {
    let cs = filter_corners(&grid, r);
    let mut out = Vec::new();
    for a in &cs {
        for b in &cs {
            out.push(point_state(grid, generic_target(), *a, *b)?);
        }
    }
    Ok(out)
}

fn branches(state: &SssState, kernels: &[(usize, &KrausGrid)]) -> Result<Vec<SssState>> {
    let mut cur = vec![state.clone()];
    for (m, k) in kernels {
        let mut next = Vec::with_capacity(cur.len() * k.ops.len());
        for s in &cur {
            next.extend(k.branches(s, *m)?);
        }
        cur = next;
    }
    Ok(cur)
}

fn filtered(state: &SssState, radii: &[(usize, f64)]) -> SssState {
    let mut s = state.clone();
    for (m, r) in radii {
        s = s.filter_radius(*m, *r);
    }
    s
}

/// `1 - |Pi psi|^2 / |psi|^2` summed over an ensemble of unnormalized branches.
pub fn filter_deficit(branches: &[SssState], radii: &[(usize, f64)]) -> f64 {
    let total: f64 = branches.iter().map(SssState::norm_sqr).sum();
    if total == 0.0 {
        return 0.0;
    }
    let kept: f64 = branches.iter().map(|b| filtered(b, radii).norm_sqr()).sum();
    ((total - kept) / total).max(0.0)
}

fn decode_sum(branches: &[SssState], mode: usize) -> Result<QubitDensity> {
    let mut rho = QubitDensity::zero();
    for b in branches {
        rho.add_scaled(&ideal_decode(b, mode)?, 1.0);
    }
    Ok(rho)
}

// ---------------------------------------------------------------------------
// measurement

fn homodyne_bits(branches: &[SssState], basis: Basis) -> Result<[f64; 2]> {
    let quad = match basis {
        Basis::Z => Quadrature::Q,
        Basis::X => Quadrature::P,
    };
    let mut p = [0.0; 2];
    for b in branches {
        let w = b.norm_sqr();
        if w == 0.0 {
            continue;
        }
        for (x, q) in homodyne_distribution(b, 0, quad)? {
            p[gkp_bin(x) as usize] += w * q;
        }
    }
    Ok(p)
}

fn qubit_bits(rho: &QubitDensity, basis: Basis) -> [f64; 2] {
    let r = match basis {
        Basis::Z => *rho,
        Basis::X => rho.conjugate(&qubit::h()),
    };
    [r.prob(0), r.prob(1)]
}

/// Largest outcome-probability gap between the noisy homodyne measurement of
/// `Pi_r psi` and the ideal decode followed by a qubit measurement.
fn meas_deviation(state: &SssState, r: f64, kernel: &KrausGrid) -> Result<f64> {
    let f = state.filter_radius(0, r);
    let n = f.norm_sqr();
    if n == 0.0 {
        return Ok(0.0);
    }
    let rho = ideal_decode(&f, 0)?;
    let br = kernel.branches(&f, 0)?;
    let mut dev: f64 = 0.0;
    for basis in [Basis::Z, Basis::X] {
        let noisy = homodyne_bits(&br, basis)?;
        let ideal = qubit_bits(&rho, basis);
        for b in 0..2 {
            dev = dev.max((noisy[b] - ideal[b]).abs() / n);
        }
    }
    Ok(dev)
}

/// Noisy binned homodyne after `Pi_r` versus decode-then-measure, both bases.
pub fn check_meas_ft(cfg: &FtConfig, r: f64, s: f64) -> Result<CaseReport> {
    let g = grid(cfg.n_single)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut inputs: Vec<SssState> = probe_states(g, r)?.into_iter().map(|(_, s)| s).collect();
    for _ in 0..cfg.trials {
        if !filter_offsets(&g, r).is_empty() {
            inputs.push(random_filtered_state(g, &[r], &mut rng)?);
        }
    }
    let kernels = random_kernels(&g, s, &mut rng)?;
    let mut dev: f64 = 0.0;
    for st in &inputs {
        for k in &kernels {
            dev = dev.max(meas_deviation(st, r, k)?);
        }
    }
    let corners = corner_kernels(&g, s)?;
    for st in corner_states(g, r)? {
        for k in &corners {
            dev = dev.max(meas_deviation(&st, r, k)?);
        }
    }
    let m = margin(r + s);
    Ok(CaseReport::new("meas", format!("r={r:.4},s={s:.4}"), m, dev, expect(m), cfg))
}

// ---------------------------------------------------------------------------
// preparation

/// Prep A (the output sits inside `Pi_s`) and Prep B (it decodes to the target)
/// over the probe envelopes plus a point envelope at the edge of the support.
pub fn check_prep_ft(cfg: &FtConfig, s: f64) -> Result<CaseReport> {
    let g = grid(cfg.n_single)?;
    let d = g.delta();
    let w = s.max(0.5 * d);
    let edge = edge_offset(&g, w) as f64 * d;
    let envs = [
        EnvelopeSpec::bump(w),
        EnvelopeSpec::Custom { s: w, profile: Arc::new(|_| C64::new(1.0, 0.0)) },
        EnvelopeSpec::Custom { s: w, profile: Arc::new(move |x| C64::from_polar(1.0 - 0.4 * x / w, -2.0 * x)) },
        EnvelopeSpec::Custom {
            s: w,
            profile: Arc::new(move |x| C64::new(if (x - edge).abs() < 0.5 * d { 1.0 } else { 0.0 }, 0.0)),
        },
    ];
    let targets = [LogicalTarget::Zero, LogicalTarget::one(), LogicalTarget::plus(), LogicalTarget::Y, generic_target()];
    let mut dev: f64 = 0.0;
    for t in &targets {
        let (a, b) = t.amplitudes();
        let want = QubitDensity::pure(a, b);
        for e in &envs {
            let st = make_s_state_unchecked(*t, e, g)?;
            let prep_a = filter_deficit(std::slice::from_ref(&st), &[(0, s)]);
            let prep_b = ideal_decode(&st, 0)?.distance(&want);
            dev = dev.max(prep_a).max(prep_b);
        }
    }
    let m = margin(s);
    Ok(CaseReport::new("prep", format!("s={s:.4}"), m, dev, expect(m), cfg))
}

// ---------------------------------------------------------------------------
// gates

/// Logical action of a physical gate; the shear is compared against `S`.
fn logical_unitary(gate: &GateKind) -> Result<Qubit2> {
    Ok(match gate {
        GateKind::DisplacementX => qubit::x(),
        GateKind::DisplacementZ => qubit::z(),
        GateKind::Fourier => qubit::h(),
        GateKind::Shear => qubit::s(),
        GateKind::Wait => qubit::id(),
        other => return Err(SimError::UnsupportedGate(format!("no single-mode logical action for {other:?}"))),
    })
}

/// Largest Gate A filter deficit and Gate B decode deviation of a gate case.
pub fn gate_deviations(cfg: &FtConfig, gate: &GateKind, r: &[f64], s: f64) -> Result<(f64, f64)> {
    match gate {
        GateKind::Sum { .. } => {
            if r.len() != 2 {
                return Err(SimError::Domain("SUM takes two radii".into()));
            }
            sum_deviations(cfg, r[0], r[1], s)
        }
        _ => {
            if r.len() != 1 {
                return Err(SimError::Domain("single-mode gate takes one radius".into()));
            }
            single_gate_deviations(cfg, gate, r[0], s)
        }
    }
}

fn single_gate_deviations(cfg: &FtConfig, gate: &GateKind, r: f64, s: f64) -> Result<(f64, f64)> {
    let g = grid(cfg.n_single)?;
    let u = logical_unitary(gate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut inputs: Vec<SssState> = probe_states(g, r)?.into_iter().map(|(_, s)| s).collect();
    for _ in 0..cfg.trials {
        inputs.push(random_filtered_state(g, &[r], &mut rng)?);
    }
    let kernels = random_kernels(&g, s, &mut rng)?;
    let corners = corner_kernels(&g, s)?;
    let mut cases: Vec<(SssState, &KrausGrid)> = Vec::new();
    for st in &inputs {
        for k in &kernels {
            cases.push((st.clone(), k));
        }
    }
    for st in corner_states(g, r)? {
        for k in &corners {
            cases.push((st.clone(), k));
        }
    }
    let (mut da, mut db): (f64, f64) = (0.0, 0.0);
    for (st, k) in &cases {
        let f = st.filter_radius(0, r);
        let n = f.norm_sqr();
        if n == 0.0 {
            continue;
        }
        let out = apply_gate(&f, gate, 0)?;
        let br = k.branches(&out, 0)?;
        da = da.max(filter_deficit(&br, &[(0, r + s)]));
        let want = ideal_decode(&f, 0)?.conjugate(&u);
        db = db.max(decode_sum(&br, 0)?.distance(&want) / n);
    }
    Ok((da, db))
}

fn cnot_conjugate(rho: &DMatrix<C64>) -> DMatrix<C64> {
    let p = |i: usize| if i >= 2 { i ^ 1 } else { i };
    DMatrix::from_fn(4, 4, |i, j| rho[(p(i), p(j))])
}

fn max_entry(m: &DMatrix<C64>) -> f64 {
    m.iter().map(|v| v.norm()).fold(0.0, f64::max)
}

fn sum_deviations(cfg: &FtConfig, rj: f64, rk: f64, s: f64) -> Result<(f64, f64)> {
    let g = grid(cfg.n_two)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pj = probe_states(g, rj)?;
    let pk = probe_states(g, rk)?;
    let mut inputs = Vec::new();
    for i in 0..pj.len() {
        inputs.push(pj[i].1.tensor(&pk[(5 * i + 3) % pk.len()].1)?);
    }
    for _ in 0..cfg.trials {
        inputs.push(random_filtered_state(g, &[rj, rk], &mut rng)?);
    }
    // one-sided mixtures and a coherent pair keep the branch count small
    let kernels = random_kernels(&g, s, &mut rng)?;
    let id = KrausGrid::random_unitary(&g, s, vec![(0, 0)], &[1.0])?;
    let last = kernels.len() - 1;
    let pairs = [[&kernels[0], &id], [&id, &kernels[0]], [&kernels[last.min(1)], &kernels[last]]];
    let mut cases: Vec<(SssState, [&KrausGrid; 2])> = Vec::new();
    for (i, st) in inputs.iter().enumerate() {
        cases.push((st.clone(), pairs[i % 3]));
    }
    let corners = corner_kernels(&g, s)?;
    let (cj, ck) = (corner_states(g, rj)?, corner_states(g, rk)?);
    for a in &cj {
        for b in &ck {
            let st = a.tensor(b)?;
            for k1 in &corners {
                for k2 in &corners {
                    cases.push((st.clone(), [k1, k2]));
                }
            }
        }
    }
    let radius = rj + rk + s;
    let gate = GateKind::Sum { control: 0, target: 1 };
    let (mut da, mut db): (f64, f64) = (0.0, 0.0);
    for (st, [k1, k2]) in &cases {
        let f = filtered(st, &[(0, rj), (1, rk)]);
        let n = f.norm_sqr();
        if n == 0.0 {
            continue;
        }
        let out = apply_gate(&f, &gate, 0)?;
        let br = branches(&out, &[(0, *k1), (1, *k2)])?;
        da = da.max(filter_deficit(&br, &[(0, radius), (1, radius)]));
        let mut rho = DMatrix::from_element(4, 4, C64::new(0.0, 0.0));
        for b in &br {
            rho += logical_density(b, &[0, 1])?;
        }
        let want = cnot_conjugate(&logical_density(&f, &[0, 1])?);
        db = db.max(max_entry(&(rho - want)) / n);
    }
    Ok((da, db))
}

/// Gate A and Gate B together; the shear is always expected to fail.
pub fn check_gate_ft(cfg: &FtConfig, gate: &GateKind, r: &[f64], s: f64) -> Result<CaseReport> {
    let (da, db) = gate_deviations(cfg, gate, r, s)?;
    let m = margin(r.iter().sum::<f64>() + s);
    let expected = if *gate == GateKind::Shear { Verdict::Fail } else { expect(m) };
    let radii: Vec<String> = r.iter().map(|x| format!("{x:.4}")).collect();
    let case = format!("{}:r={},s={s:.4}", gate.name(), radii.join("+"));
    Ok(CaseReport::new("gate", case, m, da.max(db), expected, cfg))
}

// ---------------------------------------------------------------------------
// error correction

/// Knill EC on mode 0 for one noise realization, with both measurement
/// outcomes averaged: the measured modes stay as registers, each parity branch
/// gets its frame, and the frame-corrected output decodes are summed. Also
/// returns the output's deficit under `Pi_{s'}`.
pub fn ec_channel(
    state: &SssState,
    params: &EcParams,
    noise: &NoiseAssignment,
    key: u64,
    envelope: &EnvelopeFactory,
) -> Result<(QubitDensity, f64)> {
    if state.modes() != 1 {
        return Err(SimError::UnsupportedSize("EC channel takes a single-mode input".into()));
    }
    let g = *state.grid();
    let noise = noise.clone().with_snap(g);
    let (ops, out) = knill_ec_ops(0, 1, params);
    let mut st = state.clone();
    let mut slot_mode: BTreeMap<usize, usize> = BTreeMap::new();
    let mut frame = None;
    for (i, loc) in ops.iter().enumerate() {
        let kind = loc.kind();
        let shift = |st: SssState, sub: usize, mode: usize, s: f64| -> Result<SssState> {
            let Some(kind) = kind else { return Ok(st) };
            let sh = noise.draw(key, i, sub, kind, loc.in_ec, s);
            apply_displacement(&st, mode, sh.w1, sh.w2)
        };
        match &loc.op {
            CvOp::Prep { mode, target, s } => {
                let fresh = make_s_state_unchecked(*target, &envelope(s.max(0.5 * g.delta())), g)?;
                st = shift(st.tensor(&fresh)?, 0, *mode, *s)?;
            }
            CvOp::Gate { gate, modes, s, .. } => {
                st = apply_gate(&st, gate, modes[0])?;
                for (k, m) in modes.iter().enumerate() {
                    st = shift(st, k, *m, *s)?;
                }
            }
            CvOp::Meas { mode, basis, s, slot } => {
                st = shift(st, 0, *mode, *s)?;
                if *basis == Basis::X {
                    st = to_p_frame(&st, *mode)?;
                }
                slot_mode.insert(*slot, *mode);
            }
            CvOp::Frame { x_slot, z_slot, .. } => frame = Some((*x_slot, *z_slot)),
        }
    }
    let (xs, zs) = frame.ok_or_else(|| SimError::Domain("EC without a frame update".into()))?;
    let (mx, mz) = (slot_mode[&xs], slot_mode[&zs]);
    let mut rho = QubitDensity::zero();
    let mut br = Vec::with_capacity(4);
    for bx in 0..2u8 {
        let px = st.project_bit(mx, bx);
        for bz in 0..2u8 {
            let b = px.project_bit(mz, bz);
            rho.add_scaled(&ideal_decode(&b, out)?.pauli(bx == 1, bz == 1), 1.0);
            br.push(b);
        }
    }
    Ok((rho, filter_deficit(&br, &[(out, params.s_out())])))
}

/// EC B decode gap and EC A deficit of one noise realization on `Pi_r psi`.
fn ec_deviation(state: &SssState, r: f64, params: &EcParams, noise: &NoiseAssignment, key: u64) -> Result<(f64, f64)> {
    let Some(f) = state.filter_radius(0, r).normalized() else { return Ok((0.0, 0.0)) };
    let (rho, a) = ec_channel(&f, params, noise, key, &bump_envelopes())?;
    Ok((a, rho.distance(&ideal_decode(&f, 0)?)))
}

/// `(op, sub-mode)` noise draws of the EC ops that carry a nonzero support.
fn ec_draws(params: &EcParams) -> Vec<(usize, usize)> {
    let (ops, _) = knill_ec_ops(0, 1, params);
    let mut out = Vec::new();
    for (i, loc) in ops.iter().enumerate() {
        match &loc.op {
            CvOp::Gate { modes, s, .. } if *s > 0.0 => out.extend((0..modes.len()).map(|k| (i, k))),
            CvOp::Meas { s, .. } if *s > 0.0 => out.push((i, 0)),
            _ => {}
        }
    }
    out
}

/// EC A and EC B over declared-noise trajectories and an exhaustive search of
/// edge-displacement sign patterns in each quadrature.
pub fn check_ec_ft(cfg: &FtConfig, r: f64, params: &EcParams) -> Result<CaseReport> {
    params.validate()?;
    let g = grid(cfg.n_ec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut inputs: Vec<SssState> = probe_states(g, r)?.into_iter().map(|(_, s)| s).collect();
    for _ in 0..cfg.trials {
        inputs.push(random_filtered_state(g, &[r], &mut rng)?);
    }
    let declared = NoiseAssignment::declared();
    let mut dev: f64 = 0.0;
    let mut key = cfg.seed;
    for st in &inputs {
        for _ in 0..2 {
            key = key.wrapping_add(0x9e37_79b9_7f4a_7c15);
            let (a, b) = ec_deviation(st, r, params, &declared, key)?;
            dev = dev.max(a).max(b);
        }
    }
    let draws = ec_draws(params);
    let kc = filter_corners(&g, r);
    for quad in 0..2 {
        for k in &kc {
            let (k1, k2) = if quad == 0 { (*k, 0) } else { (0, *k) };
            let st = point_state(g, generic_target(), k1, k2)?;
            for mask in 0u32..(1 << draws.len()) {
                let table: BTreeMap<(usize, usize), (f64, f64)> = draws
                    .iter()
                    .enumerate()
                    .map(|(i, d)| {
                        let sg = if mask >> i & 1 == 1 { 1.0 } else { -1.0 };
                        (*d, if quad == 0 { (sg, 0.0) } else { (0.0, sg) })
                    })
                    .collect();
                let noise = NoiseAssignment {
                    ec_gate: ShiftKernel::EdgeTable(table.clone()),
                    ec_meas: ShiftKernel::EdgeTable(table),
                    ..NoiseAssignment::ideal()
                };
                let (a, b) = ec_deviation(&st, r, params, &noise, cfg.seed)?;
                dev = dev.max(a).max(b);
            }
        }
    }
    let m = margin(r + params.s_out());
    let case = format!(
        "r={r:.4},s0={:.4},sH={:.4},sSUM={:.4},sX={:.4},sZ={:.4},sI={:.4}",
        params.s0, params.s_h, params.s_sum, params.s_x, params.s_z, params.s_i
    );
    Ok(CaseReport::new("ec", case, m, dev, expect(m), cfg))
}

// ---------------------------------------------------------------------------
// good ExRecs are correct

/// Core gadget of an ExRec under test. Gates act on data modes in order, so
/// `Sum` uses mode 0 as control.
#[derive(Clone, Debug, PartialEq)]
pub enum ExRecCore {
    Prep(LogicalTarget),
    Gate(GateKind),
    Meas(Basis),
}

impl ExRecCore {
    pub fn arity(&self) -> usize {
        match self {
            ExRecCore::Prep(_) => 0,
            ExRecCore::Gate(GateKind::Sum { .. }) => 2,
            _ => 1,
        }
    }

    /// Goodness margin of the ExRec with every EC built from `p`.
    pub fn margin(&self, p: &FtParams) -> f64 {
        let se = p.ec.s_out();
        margin(match self {
            ExRecCore::Prep(_) => p.s_p + se,
            ExRecCore::Meas(_) => se + p.s_m,
            ExRecCore::Gate(GateKind::Sum { .. }) => 3.0 * se + p.s_g,
            ExRecCore::Gate(_) => 2.0 * se + p.s_g,
        })
    }

    fn unitary(&self) -> Result<DMatrix<C64>> {
        let one = |u: Qubit2| DMatrix::from_fn(2, 2, |i, j| u[i][j]);
        Ok(match self {
            ExRecCore::Gate(GateKind::DisplacementX) => one(qubit::x()),
            ExRecCore::Gate(GateKind::DisplacementZ) => one(qubit::z()),
            ExRecCore::Gate(GateKind::Fourier) => one(qubit::h()),
            ExRecCore::Gate(GateKind::Wait) => one(qubit::id()),
            ExRecCore::Gate(GateKind::Sum { .. }) => {
                let mut u = DMatrix::zeros(4, 4);
                for (a, b) in [(0, 0), (1, 1), (2, 3), (3, 2)] {
                    u[(b, a)] = C64::new(1.0, 0.0);
                }
                u
            }
            other => return Err(SimError::UnsupportedGate(format!("{other:?} has no qubit action here"))),
        })
    }
}

/// Run leading ECs, the core and trailing ECs on `input` (one mode per data
/// line; ignored for preparations) with declared noise under `key`, and
/// return the largest entry of `decode(ExRec) - U decode(leading ECs) U^dagger`.
/// The leading ECs follow one sampled trajectory; the decode after the
/// ExRec averages over every homodyne outcome of the core and trailing ECs.
/// For measurements the outcome probabilities are compared instead, and for
/// preparations the output decode is compared with the target.
pub fn exrec_deviation<R: Rng + ?Sized>(
    core: &ExRecCore,
    params: &FtParams,
    input: &SssState,
    key: u64,
    rng: &mut R,
) -> Result<f64> {
    let grid = *input.grid();
    let noise = NoiseAssignment::declared();
    let mut sim = match core {
        ExRecCore::Prep(_) => ExactSim::new(grid, noise, key),
        _ => ExactSim::from_state(input.clone(), noise, key),
    };
    let mut next = input.modes();
    let mut base = 0;
    let mut data: Vec<usize> = (0..core.arity()).collect();
    let ec_ops = |data: &mut Vec<usize>, next: &mut usize| -> Vec<CvLoc> {
        let mut all = Vec::new();
        for d in data.iter_mut() {
            let (ops, out) = knill_ec_ops(*d, *next, &params.ec);
            all.extend(ops);
            *next += 2;
            *d = out;
        }
        all
    };
    let leading = ec_ops(&mut data, &mut next);
    sim.run(&leading, base, rng)?;
    base += leading.len();
    let mut rest = Vec::new();
    let expected = match core {
        ExRecCore::Prep(t) => {
            let mode = next;
            next += 1;
            rest.push(CvLoc { op: CvOp::Prep { mode, target: *t, s: params.s_p }, in_ec: false });
            data.push(mode);
            let (a, b) = t.amplitudes();
            let psi = [a, b];
            DMatrix::from_fn(2, 2, |i, j| psi[i] * psi[j].conj())
        }
        ExRecCore::Meas(basis) => {
            let rho = sim.decode_joint(&data)?;
            let want = match basis {
                Basis::Z => [rho[(0, 0)].re, rho[(1, 1)].re],
                Basis::X => [0.5 + rho[(0, 1)].re, 0.5 - rho[(0, 1)].re],
            };
            let loc = CvLoc { op: CvOp::Meas { mode: data[0], basis: *basis, s: params.s_m, slot: 2 }, in_ec: false };
            let got = sim.outcome_probabilities(base, &loc)?;
            return Ok((got[0] - want[0]).abs().max((got[1] - want[1]).abs()));
        }
        ExRecCore::Gate(g) => {
            let rho = sim.decode_joint(&data)?;
            let u = core.unitary()?;
            rest.push(CvLoc { op: CvOp::Gate { gate: g.clone(), modes: data.clone(), s: params.s_g, cond: None }, in_ec: false });
            &u * rho * u.adjoint()
        }
    };
    rest.extend(ec_ops(&mut data, &mut next));
    sim.coherent_measurements = true;
    sim.run(&rest, base, rng)?;
    let got = sim.decode_joint(&data)?;
    Ok((got - expected).iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Draw `(s_p, s_g, s_m)` in `[0, s_max)` until the ExRec is good.
pub fn random_good_params<R: Rng + ?Sized>(core: &ExRecCore, s_max: f64, rng: &mut R) -> FtParams {
    loop {
        let p = FtParams::uniform(rng.random_range(0.0..s_max), rng.random_range(0.0..s_max), rng.random_range(0.0..s_max));
        if core.margin(&p) > 0.0 {
            return p;
        }
    }
}

// ---------------------------------------------------------------------------
// boundary probes and the full run

/// `(r, s)` with `r + s = c/2 + cells * delta`, `s` just above `k` cells, so the
/// extreme lattice points of the filter and the kernel sum to within a cell of it.
pub fn boundary_pair(grid: &GridSpec, k: i64, cells: f64) -> (f64, f64) {
    let d = grid.delta();
    let s = k as f64 * d + 1e-6 * d;
    (HALF_C + cells * d - s, s)
}

/// EC parameters with four noisy locations at just above `k` cells and
/// ideal ancillas and waits; `s' = 4 (k delta + eps)`.
pub fn boundary_ec_params(grid: &GridSpec, k: i64) -> EcParams {
    let a = k as f64 * grid.delta() + 1e-6 * grid.delta();
    EcParams { s0: 0.0, s_h: a, s_sum: a, s_x: a, s_z: a, s_i: 0.0 }
}

/// Suite names accepted by [`run_suite`].
pub const SUITES: [&str; 4] = ["meas", "prep", "gate", "ec"];

pub fn run_suite(cfg: &FtConfig, suite: &str) -> Result<SuiteReport> {
    let cases = match suite {
        "meas" => meas_cases(cfg)?,
        "prep" => prep_cases(cfg)?,
        "gate" => gate_cases(cfg)?,
        "ec" => ec_cases(cfg)?,
        other => return Err(SimError::Domain(format!("unknown suite '{other}'"))),
    };
    Ok(SuiteReport { suite: suite.into(), cases })
}

pub fn run_all(cfg: &FtConfig) -> Result<Vec<SuiteReport>> {
    SUITES.iter().map(|s| run_suite(cfg, s)).collect()
}

fn meas_cases(cfg: &FtConfig) -> Result<Vec<CaseReport>> {
    let g1 = grid(cfg.n_single)?;
    let mut meas = Vec::new();
    for (r, s) in [(0.3, 0.3), (0.0, 0.0), (0.6, 0.4)] {
        meas.push(check_meas_ft(cfg, r, s)?);
    }
    for cells in [-2.0, 2.0] {
        let (r, s) = boundary_pair(&g1, 11, cells);
        meas.push(check_meas_ft(cfg, r, s)?);
    }
    Ok(meas)
}

fn prep_cases(cfg: &FtConfig) -> Result<Vec<CaseReport>> {
    let d1 = grid(cfg.n_single)?.delta();
    [0.3, HALF_C - 2.0 * d1, HALF_C + 2.0 * d1].iter().map(|s| check_prep_ft(cfg, *s)).collect()
}

fn gate_cases(cfg: &FtConfig) -> Result<Vec<CaseReport>> {
    let g1 = grid(cfg.n_single)?;
    let g2 = grid(cfg.n_two)?;
    let mut gate = Vec::new();
    for gk in [GateKind::DisplacementX, GateKind::DisplacementZ, GateKind::Fourier, GateKind::Wait] {
        gate.push(check_gate_ft(cfg, &gk, &[0.3], 0.2)?);
        for cells in [-2.0, 2.0] {
            let (r, s) = boundary_pair(&g1, 7, cells);
            gate.push(check_gate_ft(cfg, &gk, &[r], s)?);
        }
    }
    let sum = GateKind::Sum { control: 0, target: 1 };
    gate.push(check_gate_ft(cfg, &sum, &[0.2, 0.2], 0.1)?);
    for cells in [-2.0, 2.0] {
        let (r, s) = boundary_pair(&g2, 3, cells);
        gate.push(check_gate_ft(cfg, &sum, &[r / 2.0, r / 2.0], s)?);
    }
    for r in [0.3, 0.4] {
        gate.push(check_gate_ft(cfg, &GateKind::Shear, &[r], 0.1)?);
    }
    Ok(gate)
}

fn ec_cases(cfg: &FtConfig) -> Result<Vec<CaseReport>> {
    let ge = grid(cfg.n_ec)?;
    let mut ec = Vec::new();
    let p = EcParams { s0: 0.05, s_h: 0.12, s_sum: 0.12, s_x: 0.12, s_z: 0.12, s_i: 0.06 };
    ec.push(check_ec_ft(cfg, 0.2, &p)?);
    let bp = boundary_ec_params(&ge, 1);
    for cells in [-2.0, 2.0] {
        let r = HALF_C + cells * ge.delta() - bp.s_out();
        ec.push(check_ec_ft(cfg, r, &bp)?);
    }
    Ok(ec)
}

// ---------------------------------------------------------------------------
// position-space reference

/// Brute-force position-space operations on the full discrete period.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleOp {
    Fourier(usize),
    Shear(usize),
    Sum { control: usize, target: usize },
    /// `V(k1 delta, k2 delta)`.
    Displacement { mode: usize, k1: i64, k2: i64 },
}

/// Position samples of a one- or two-mode state over the full period of
/// `L = 2 N^2` points per mode, row-major with mode 0 slowest.
#[derive(Clone, Debug)]
pub struct PositionTensor {
    pub grid: GridSpec,
    pub modes: usize,
    pub data: Vec<C64>,
}

impl PositionTensor {
    pub fn from_sss(state: &SssState) -> Result<Self> {
        let g = *state.grid();
        let l = g.labels_per_mode();
        match state.modes() {
            1 => Ok(Self { grid: g, modes: 1, data: full_wave(&g, &state.to_dense()?) }),
            2 => {
                let mut cols: BTreeMap<u16, Vec<C64>> = BTreeMap::new();
                for (lab, a) in state.entries() {
                    cols.entry(lab[1]).or_insert_with(|| vec![C64::new(0.0, 0.0); l])[lab[0] as usize] = *a;
                }
                let mut mid = vec![C64::new(0.0, 0.0); l * l];
                for (l1, col) in &cols {
                    for (k0, v) in full_wave(&g, col).into_iter().enumerate() {
                        mid[k0 * l + *l1 as usize] = v;
                    }
                }
                let mut data = vec![C64::new(0.0, 0.0); l * l];
                for k0 in 0..l {
                    let row = &mid[k0 * l..(k0 + 1) * l];
                    if row.iter().all(|v| v.norm_sqr() == 0.0) {
                        continue;
                    }
                    data[k0 * l..(k0 + 1) * l].copy_from_slice(&full_wave(&g, row));
                }
                Ok(Self { grid: g, modes: 2, data })
            }
            m => Err(SimError::UnsupportedSize(format!("position tensor of {m} modes"))),
        }
    }

    fn len(&self) -> usize {
        self.grid.labels_per_mode()
    }

    fn check(&self, mode: usize) -> Result<()> {
        if mode >= self.modes {
            return Err(SimError::ModeOutOfRange(mode));
        }
        Ok(())
    }

    /// Run `f` on every line of samples along `mode`.
    fn lines(&mut self, mode: usize, mut f: impl FnMut(&mut [C64])) {
        let l = self.len();
        if self.modes == 1 {
            f(&mut self.data);
        } else if mode == 1 {
            for row in self.data.chunks_mut(l) {
                f(row);
            }
        } else {
            let mut buf = vec![C64::new(0.0, 0.0); l];
            for j in 0..l {
                for i in 0..l {
                    buf[i] = self.data[i * l + j];
                }
                f(&mut buf);
                for i in 0..l {
                    self.data[i * l + j] = buf[i];
                }
            }
        }
    }

    /// `e^{2 pi i a / L}`, reduced exactly before the float conversion.
    fn phase(l: usize, a: i64) -> C64 {
        C64::from_polar(1.0, 2.0 * PI * a.rem_euclid(l as i64) as f64 / l as f64)
    }

    pub fn apply(&mut self, op: &OracleOp) -> Result<()> {
        let l = self.len();
        let li = l as i64;
        let k_lo = full_k_lo(&self.grid);
        match *op {
            OracleOp::Fourier(m) => {
                self.check(m)?;
                // (F psi)(x) = int e^{ixy} psi(y) dy / sqrt(2 pi) on the lattice
                let fft = plan_fft(l, true);
                let scale = 1.0 / (l as f64).sqrt();
                self.lines(m, |line| {
                    for (i, v) in line.iter_mut().enumerate() {
                        *v *= Self::phase(l, k_lo * i as i64);
                    }
                    fft.process(line);
                    for (j, v) in line.iter_mut().enumerate() {
                        *v *= Self::phase(l, k_lo * j as i64) * scale;
                    }
                });
            }
            OracleOp::Shear(m) => {
                self.check(m)?;
                // e^{i x^2 / 2} = e^{i pi k^2 / L}
                self.lines(m, |line| {
                    for (i, v) in line.iter_mut().enumerate() {
                        let k = k_lo + i as i64;
                        let t = (k * k).rem_euclid(2 * li);
                        *v *= C64::from_polar(1.0, PI * t as f64 / l as f64);
                    }
                });
            }
            OracleOp::Displacement { mode, k1, k2 } => {
                self.check(mode)?;
                self.lines(mode, |line| {
                    let old = line.to_vec();
                    for (i, v) in line.iter_mut().enumerate() {
                        let src = (i as i64 - k1).rem_euclid(li) as usize;
                        *v = old[src] * Self::phase(l, k2 * (k_lo + i as i64));
                    }
                });
            }
            OracleOp::Sum { control, target } => {
                self.check(control)?;
                self.check(target)?;
                if control == target {
                    return Err(SimError::Domain("SUM needs two distinct modes".into()));
                }
                // psi'(x_c, x_t) = psi(x_c, x_t - x_c)
                let old = self.data.clone();
                for ic in 0..l {
                    let kc = k_lo + ic as i64;
                    for it in 0..l {
                        let src = (it as i64 - kc).rem_euclid(li) as usize;
                        let (dst, from) = if control == 0 { (ic * l + it, ic * l + src) } else { (it * l + ic, src * l + ic) };
                        self.data[dst] = old[from];
                    }
                }
            }
        }
        Ok(())
    }

    /// `|| a/|a| - e^{i phi} b/|b| ||` minimized over the global phase.
    pub fn distance(&self, other: &Self) -> Result<f64> {
        if self.modes != other.modes || self.grid != other.grid {
            return Err(SimError::Domain("position tensors of different shape".into()));
        }
        let na: f64 = self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let nb: f64 = other.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(SimError::Domain("zero position tensor".into()));
        }
        let ov: C64 = self.data.iter().zip(&other.data).map(|(a, b)| a.conj() * b).sum();
        Ok((2.0 * (1.0 - (ov.norm() / (na * nb)).min(1.0))).sqrt())
    }
}

/// Reference output of `ops` applied to `input` in position space.
pub fn oracle_position_channel(input: &SssState, ops: &[OracleOp]) -> Result<PositionTensor> {
    let mut t = PositionTensor::from_sss(input)?;
    for op in ops {
        t.apply(op)?;
    }
    Ok(t)
}

/// Distance between the reference output and a state computed some other way.
pub fn oracle_distance(input: &SssState, ops: &[OracleOp], output: &SssState) -> Result<f64> {
    oracle_position_channel(input, ops)?.distance(&PositionTensor::from_sss(output)?)
}
