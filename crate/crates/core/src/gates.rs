//! Physical gate set acting on SSS labels, and the s-parameterized noise channel.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64 as C64;
use rand::Rng;

use crate::error::{Result, SimError};
use crate::zakcore::{GridSpec, MixedState, SssState, SQRT_PI};

#[derive(Clone, Debug, PartialEq)]
pub enum GateKind {
    /// `V(c, 0)`, logical X.
    DisplacementX,
    /// `V(0, c)`, logical Z.
    DisplacementZ,
    GeneralDisplacement(f64, f64),
    /// `exp(i pi n / 2)`, logical Hadamard.
    Fourier,
    /// `exp(i q^2 / 2)`; not fault tolerant.
    Shear,
    /// `exp(-i q_control p_target)`, logical CNOT.
    Sum { control: usize, target: usize },
    Wait,
}

impl GateKind {
    /// Modes touched when the single-mode variants act on `mode`.
    pub fn modes(&self, mode: usize) -> Vec<usize> {
        match self {
            GateKind::Sum { control, target } => vec![*control, *target],
            _ => vec![mode],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GateKind::DisplacementX => "X",
            GateKind::DisplacementZ => "Z",
            GateKind::GeneralDisplacement(..) => "V",
            GateKind::Fourier => "F",
            GateKind::Shear => "shear",
            GateKind::Sum { .. } => "SUM",
            GateKind::Wait => "I",
        }
    }
}

/// The finite set of displacement amounts a device may apply.
#[derive(Clone, Debug)]
pub struct DisplacementSet {
    pub amounts: Vec<(f64, f64)>,
}

impl Default for DisplacementSet {
    fn default() -> Self {
        Self { amounts: vec![(SQRT_PI, 0.0), (0.0, SQRT_PI)] }
    }
}

impl DisplacementSet {
    pub fn contains(&self, v1: f64, v2: f64) -> bool {
        self.amounts.iter().any(|(a, b)| (a - v1).abs() < 1e-12 && (b - v2).abs() < 1e-12)
    }

    pub fn check(&self, gate: &GateKind) -> Result<()> {
        match gate {
            GateKind::GeneralDisplacement(a, b) if !self.contains(*a, *b) => {
                Err(SimError::UnsupportedGate(format!("displacement ({a}, {b}) not in the declared set")))
            }
            _ => Ok(()),
        }
    }
}

/// Largest component of the snap error when `(v1, v2)` is rounded to the grid.
pub fn displacement_rounding(grid: &GridSpec, v1: f64, v2: f64) -> f64 {
    let d = grid.delta();
    let e1 = (v1 - grid.offset_of(v1) as f64 * d).abs();
    let e2 = (v2 - grid.offset_of(v2) as f64 * d).abs();
    e1.max(e2)
}

/// `V(k1 delta, k2 delta)` on one mode.
pub fn apply_displacement_grid(state: &SssState, mode: usize, kv1: i64, kv2: i64) -> Result<SssState> {
    state.check_mode(mode)?;
    let g = *state.grid();
    if kv1 == 0 && kv2 == 0 {
        return Ok(state.clone());
    }
    Ok(state.map_mode(mode, |l, out| {
        let (mu, k1, k2) = g.offsets(l);
        let (nl, t) = g.reduce(mu, k1 + kv1, k2 + kv2);
        out.push((nl, g.root(t + kv2 * k1 - kv1 * k2)));
    }))
}

/// `V(v1, v2)` with the amounts snapped to the nearest cell.
pub fn apply_displacement(state: &SssState, mode: usize, v1: f64, v2: f64) -> Result<SssState> {
    let g = state.grid();
    apply_displacement_grid(state, mode, g.offset_of(v1), g.offset_of(v2))
}

/// Same as [`apply_displacement`] and also returns the snap error (at most `delta/2`).
pub fn apply_displacement_reported(state: &SssState, mode: usize, v1: f64, v2: f64) -> Result<(SssState, f64)> {
    let err = displacement_rounding(state.grid(), v1, v2);
    Ok((apply_displacement(state, mode, v1, v2)?, err))
}

pub fn apply_fourier(state: &SssState, mode: usize) -> Result<SssState> {
    state.check_mode(mode)?;
    let g = *state.grid();
    let h = std::f64::consts::FRAC_1_SQRT_2;
    Ok(state.map_mode(mode, |l, out| {
        let (mu, k1, k2) = g.offsets(l);
        for nu in 0..2u8 {
            let (nl, t) = g.reduce(nu, -k2, k1);
            let sign = if mu & nu == 1 { -h } else { h };
            out.push((nl, g.root(t) * sign));
        }
    }))
}

pub fn apply_shear(state: &SssState, mode: usize) -> Result<SssState> {
    state.check_mode(mode)?;
    let g = *state.grid();
    let nn = (g.n() * g.n()) as i64;
    Ok(state.map_mode(mode, |l, out| {
        let (mu, k1, k2) = g.offsets(l);
        let (nl, t) = g.reduce(mu, k1, k1 + k2);
        out.push((nl, g.root(t + mu as i64 * nn)));
    }))
}

pub fn apply_sum(state: &SssState, control: usize, target: usize) -> Result<SssState> {
    state.check_mode(control)?;
    state.check_mode(target)?;
    if control == target {
        return Err(SimError::UnsupportedGate("SUM needs two distinct modes".into()));
    }
    let g = *state.grid();
    Ok(state.map_pair(control, target, |a, b| {
        let (mu, k1, k2) = g.offsets(a);
        let (nu, q1, q2) = g.offsets(b);
        let (la, ta) = g.reduce(mu, k1, k2 - q2);
        let (lb, tb) = g.reduce(mu ^ nu, q1 + k1, q2);
        (la, lb, g.root(ta + tb))
    }))
}

pub fn apply_gate(state: &SssState, gate: &GateKind, mode: usize) -> Result<SssState> {
    let n = state.grid().n() as i64;
    match gate {
        GateKind::DisplacementX => apply_displacement_grid(state, mode, n, 0),
        GateKind::DisplacementZ => apply_displacement_grid(state, mode, 0, n),
        GateKind::GeneralDisplacement(a, b) => apply_displacement(state, mode, *a, *b),
        GateKind::Fourier => apply_fourier(state, mode),
        GateKind::Shear => apply_shear(state, mode),
        GateKind::Sum { control, target } => apply_sum(state, *control, *target),
        GateKind::Wait => {
            state.check_mode(mode)?;
            Ok(state.clone())
        }
    }
}

/// Signed cell offsets `k` with `|k delta| < s`; just `{0}` when `s = 0`.
pub fn offsets_inside(grid: &GridSpec, s: f64) -> Vec<i64> {
    if s <= 0.0 {
        return vec![0];
    }
    let kmax = (s / grid.delta()).ceil() as i64 + 1;
    (-kmax..=kmax).filter(|k| (*k as f64 * grid.delta()).abs() < s - 1e-12).collect()
}

/// Nearest offset to `w` that stays strictly inside `(-s, s)`.
pub fn snap_inside(grid: &GridSpec, w: f64, s: f64) -> i64 {
    let mut k = grid.offset_of(w);
    while k != 0 && (k as f64 * grid.delta()).abs() >= s - 1e-12 {
        k -= k.signum();
    }
    k
}

/// Displacement sampler over the grid points strictly inside `(-s, s)^2`.
#[derive(Clone, Debug, PartialEq)]
pub enum DisplacementSampler {
    Uniform { s: f64 },
    /// Always the same displacement; used for adversarial probes.
    Fixed { s: f64, w1: f64, w2: f64 },
}

impl DisplacementSampler {
    pub fn s(&self) -> f64 {
        match self {
            DisplacementSampler::Uniform { s } | DisplacementSampler::Fixed { s, .. } => *s,
        }
    }

    /// Grid offsets of one draw.
    pub fn sample<R: Rng + ?Sized>(&self, grid: &GridSpec, rng: &mut R) -> (i64, i64) {
        match self {
            DisplacementSampler::Uniform { s } => {
                let ks = offsets_inside(grid, *s);
                (ks[rng.random_range(0..ks.len())], ks[rng.random_range(0..ks.len())])
            }
            DisplacementSampler::Fixed { s, w1, w2 } => (snap_inside(grid, *w1, *s), snap_inside(grid, *w2, *s)),
        }
    }
}

/// Coherent displacement channel `rho -> sum_a K_a rho K_a^dagger` with
/// `K_a = sum_w v_a(w) V(w)` over grid offsets `w` inside `(-s, s)^2`.
#[derive(Clone, Debug)]
pub struct KrausGrid {
    pub s: f64,
    pub points: Vec<(i64, i64)>,
    pub ops: Vec<Vec<C64>>,
}

impl KrausGrid {
    pub fn from_kraus(grid: &GridSpec, s: f64, points: Vec<(i64, i64)>, ops: Vec<Vec<C64>>) -> Result<Self> {
        let k = Self { s, points, ops };
        k.validate(grid)?;
        Ok(k)
    }

    /// Build from a positive semidefinite kernel matrix over `points`.
    pub fn from_kernel(grid: &GridSpec, s: f64, points: Vec<(i64, i64)>, kernel: &[Vec<C64>]) -> Result<Self> {
        let n = points.len();
        if kernel.len() != n || kernel.iter().any(|r| r.len() != n) {
            return Err(SimError::Domain("kernel shape does not match the point list".into()));
        }
        let m = DMatrix::from_fn(n, n, |i, j| kernel[i][j]);
        let eig = SymmetricEigen::new(m);
        let mut ops = Vec::new();
        for (idx, lam) in eig.eigenvalues.iter().enumerate() {
            if *lam < -1e-10 {
                return Err(SimError::Domain(format!("kernel has negative eigenvalue {lam}")));
            }
            if *lam > 1e-14 {
                let col = eig.eigenvectors.column(idx);
                ops.push(col.iter().map(|v| v * lam.sqrt()).collect());
            }
        }
        Self::from_kraus(grid, s, points, ops)
    }

    /// Mixture of displacements with the given probabilities.
    pub fn random_unitary(grid: &GridSpec, s: f64, points: Vec<(i64, i64)>, probs: &[f64]) -> Result<Self> {
        let n = points.len();
        let ops = (0..n)
            .map(|i| {
                let mut v = vec![C64::new(0.0, 0.0); n];
                v[i] = C64::new(probs[i].sqrt(), 0.0);
                v
            })
            .collect();
        Self::from_kraus(grid, s, points, ops)
    }

    /// Trace-preserving kernel on the collinear points `{-a, 0, a}` with
    /// off-diagonal coherences `x` (requires `|x| <= 1/(3 sqrt 2)`).
    pub fn coherent_triple(grid: &GridSpec, s: f64, a: (i64, i64), x: C64) -> Result<Self> {
        let third = C64::new(1.0 / 3.0, 0.0);
        let z = C64::new(0.0, 0.0);
        let kernel = vec![vec![third, x, z], vec![x.conj(), third, -x], vec![z, -x.conj(), third]];
        let points = vec![(-a.0, -a.1), (0, 0), a];
        Self::from_kernel(grid, s, points, &kernel)
    }

    /// Largest deviation of `sum_a K_a^dagger K_a` from the identity, expanded in displacements.
    pub fn trace_deviation(&self, grid: &GridSpec) -> f64 {
        let mut coef: std::collections::HashMap<(i64, i64), C64> = std::collections::HashMap::new();
        for v in &self.ops {
            for (i, w) in self.points.iter().enumerate() {
                for (j, wp) in self.points.iter().enumerate() {
                    let phase = grid.root(wp.0 * w.1 - w.0 * wp.1);
                    *coef.entry((w.0 - wp.0, w.1 - wp.1)).or_insert(C64::new(0.0, 0.0)) +=
                        v[j].conj() * v[i] * phase;
                }
            }
        }
        coef.iter()
            .map(|(d, c)| if *d == (0, 0) { (c - 1.0).norm() } else { c.norm() })
            .fold(0.0, f64::max)
    }

    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        let d = grid.delta();
        for (k1, k2) in &self.points {
            let inside = |k: i64| k == 0 || (k as f64 * d).abs() < self.s - 1e-12;
            if !inside(*k1) || !inside(*k2) {
                return Err(SimError::Domain(format!("kernel point ({k1}, {k2}) outside the support")));
            }
        }
        if self.ops.iter().any(|v| v.len() != self.points.len()) {
            return Err(SimError::Domain("Kraus vector length mismatch".into()));
        }
        let dev = self.trace_deviation(grid);
        if dev > 1e-8 {
            return Err(SimError::Domain(format!("kernel is not trace preserving (deviation {dev:.3e})")));
        }
        Ok(())
    }

    /// Branches `K_a |psi>` on one mode, unnormalized.
    pub fn branches(&self, state: &SssState, mode: usize) -> Result<Vec<SssState>> {
        let shifted: Vec<SssState> = self
            .points
            .iter()
            .map(|(k1, k2)| apply_displacement_grid(state, mode, *k1, *k2))
            .collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(self.ops.len());
        for v in &self.ops {
            let mut entries = Vec::new();
            for (w, s) in v.iter().zip(&shifted) {
                entries.extend(s.entries().iter().map(|(l, a)| (*l, a * w)));
            }
            out.push(SssState::from_entries(*state.grid(), state.modes(), entries)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub enum NoiseKernel {
    None,
    StochasticDisplacement(DisplacementSampler),
    KrausGrid(KrausGrid),
}

impl NoiseKernel {
    pub fn uniform(s: f64) -> Self {
        NoiseKernel::StochasticDisplacement(DisplacementSampler::Uniform { s })
    }

    pub fn fixed(s: f64, w1: f64, w2: f64) -> Result<Self> {
        if w1.abs() >= s && w1 != 0.0 || w2.abs() >= s && w2 != 0.0 {
            return Err(SimError::Domain(format!("fixed shift ({w1}, {w2}) outside (-{s}, {s})")));
        }
        Ok(NoiseKernel::StochasticDisplacement(DisplacementSampler::Fixed { s, w1, w2 }))
    }

    pub fn s(&self) -> f64 {
        match self {
            NoiseKernel::None => 0.0,
            NoiseKernel::StochasticDisplacement(d) => d.s(),
            NoiseKernel::KrausGrid(k) => k.s,
        }
    }
}

#[derive(Clone, Debug)]
pub enum NoiseOutcome {
    Trajectory(SssState),
    Channel(MixedState),
}

impl NoiseOutcome {
    pub fn into_mixed(self) -> MixedState {
        match self {
            NoiseOutcome::Trajectory(s) => MixedState::pure(s),
            NoiseOutcome::Channel(m) => m,
        }
    }
}

/// Apply the noise channel independently to each listed mode.
pub fn apply_noise<R: Rng + ?Sized>(
    state: &SssState,
    modes: &[usize],
    kernel: &NoiseKernel,
    rng: &mut R,
) -> Result<NoiseOutcome> {
    for m in modes {
        state.check_mode(*m)?;
    }
    let g = *state.grid();
    match kernel {
        NoiseKernel::None => Ok(NoiseOutcome::Trajectory(state.clone())),
        NoiseKernel::StochasticDisplacement(sampler) => {
            let mut s = state.clone();
            for m in modes {
                let (k1, k2) = sampler.sample(&g, rng);
                s = apply_displacement_grid(&s, *m, k1, k2)?;
            }
            Ok(NoiseOutcome::Trajectory(s))
        }
        NoiseKernel::KrausGrid(k) => {
            if state.modes() > 1 && g.n() > 16 {
                return Err(SimError::UnsupportedSize(format!(
                    "Kraus kernel on {} modes at N = {}",
                    state.modes(),
                    g.n()
                )));
            }
            let mut current = vec![state.clone()];
            for m in modes {
                let mut next = Vec::new();
                for s in &current {
                    next.extend(k.branches(s, *m)?);
                }
                current = next;
            }
            let members = current
                .into_iter()
                .filter_map(|s| {
                    let w = s.norm_sqr();
                    s.normalized().map(|n| (w, n))
                })
                .collect();
            Ok(NoiseOutcome::Channel(MixedState { grid: g, modes: state.modes(), members }))
        }
    }
}
