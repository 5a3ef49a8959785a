//! Discretized Zak / stabilizer-subsystem representation.
//!
//! A single mode is labelled by a logical bit `mu` and a syndrome grid point
//! `(z1, z2) = (j1 - N/2, j2 - N/2) * delta` inside the square `[-c/2, c/2)^2`
//! with `c = sqrt(pi)` and `delta = c / N`. Multi-mode states are sparse lists of
//! labels with unit-normalized coefficients; the measure-weighted amplitude of
//! the convention `sum |a|^2 delta^(2m) = 1` is `coefficient / delta^m`.
//!
//! On this grid the position lattice is `x_k = k * delta` with period `2 N c`
//! (`M = 2 N^2` samples), and every Gaussian gate acts on labels as a
//! permutation with phases that are `4 N^2`-th roots of unity.

use std::cell::RefCell;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::Arc;

use num_complex::Complex64 as C64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Result, SimError};

/// `c = sqrt(pi)`.
pub const SQRT_PI: f64 = 1.772_453_850_905_516;
/// Largest number of modes a [`SssState`] label can carry.
pub const MAX_MODES: usize = 8;
/// Coefficients with squared modulus below this are dropped from storage.
const DROP_NORM_SQR: f64 = 1e-30;

/// Per-mode packed labels `mu * N^2 + j1 * N + j2`; unused slots are zero.
pub type Label = [u16; MAX_MODES];

const DUMP_MAGIC: &[u8; 4] = b"GKPS";
const DUMP_VERSION: u32 = 1;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub(crate) fn plan_fft(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    n: usize,
    cutoff: usize,
    delta: f64,
}

impl GridSpec {
    /// `n` points per syndrome axis (even, at most 128) and a position cutoff of
    /// `cutoff` periods on each side of the origin.
    pub fn new(n: usize, cutoff: usize) -> Result<Self> {
        if n < 2 || n % 2 != 0 {
            return Err(SimError::InvalidGrid(format!("N = {n} must be even and >= 2")));
        }
        if n > 128 {
            return Err(SimError::InvalidGrid(format!("N = {n} exceeds 128")));
        }
        if cutoff == 0 {
            return Err(SimError::InvalidGrid("cutoff K must be positive".into()));
        }
        Ok(Self { n, cutoff, delta: SQRT_PI / n as f64 })
    }

    /// N = 64, K = 12.
    pub fn single_mode_default() -> Self {
        Self::new(64, 12).expect("valid default grid")
    }

    /// N = 32, K = 12.
    pub fn two_mode_default() -> Self {
        Self::new(32, 12).expect("valid default grid")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn with_cutoff(&self, cutoff: usize) -> Result<Self> {
        Self::new(self.n, cutoff)
    }

    /// Number of labels per mode, `2 N^2`; also the discrete position period in samples.
    pub fn labels_per_mode(&self) -> usize {
        2 * self.n * self.n
    }

    /// Coordinate of grid index `j`.
    pub fn coord(&self, j: usize) -> f64 {
        (j as f64 - (self.n / 2) as f64) * self.delta
    }

    /// Signed cell offset nearest to `z` (ties round up).
    pub fn offset_of(&self, z: f64) -> i64 {
        (z / self.delta + 0.5).floor() as i64
    }

    /// `exp(i pi t / (2 N^2))`.
    pub fn root(&self, t: i64) -> C64 {
        let m = 4 * (self.n * self.n) as i64;
        let t = t.rem_euclid(m);
        C64::from_polar(1.0, std::f64::consts::PI * t as f64 / (2 * self.n * self.n) as f64)
    }

    pub fn pack(&self, mu: u8, j1: usize, j2: usize) -> u16 {
        debug_assert!(mu < 2 && j1 < self.n && j2 < self.n);
        (mu as usize * self.n * self.n + j1 * self.n + j2) as u16
    }

    pub fn unpack(&self, l: u16) -> (u8, usize, usize) {
        let l = l as usize;
        let nn = self.n * self.n;
        ((l / nn) as u8, (l % nn) / self.n, l % self.n)
    }

    /// Label as `(mu, k1, k2)` with signed offsets `k = j - N/2`.
    pub fn offsets(&self, l: u16) -> (u8, i64, i64) {
        let (mu, j1, j2) = self.unpack(l);
        let h = (self.n / 2) as i64;
        (mu, j1 as i64 - h, j2 as i64 - h)
    }

    /// Syndrome coordinates of a label.
    pub fn coords(&self, l: u16) -> (u8, f64, f64) {
        let (mu, j1, j2) = self.unpack(l);
        (mu, self.coord(j1), self.coord(j2))
    }

    /// Wrap the grid point `(k1, k2) * delta` with logical bit `mu` into the
    /// canonical square. Returns the label and the exponent `t` of the phase
    /// `exp(i pi t / (2 N^2))` picked up from the quasi-periodic conditions.
    pub fn reduce(&self, mu: u8, k1: i64, k2: i64) -> (u16, i64) {
        let n = self.n as i64;
        let h = n / 2;
        let a1 = k1 + h;
        let n1 = a1.div_euclid(n);
        let j1 = a1.rem_euclid(n);
        let a2 = k2 + h;
        let n2 = a2.div_euclid(n);
        let j2 = a2.rem_euclid(n);
        // exp(i n2 c z1 / 2) (-1)^(mu n2) exp(-i n1 c r2 / 2)
        let t = n2 * k1 * n + mu as i64 * n2 * 2 * n * n - n1 * (j2 - h) * n;
        let mu2 = mu ^ ((n1 & 1) as u8);
        (self.pack(mu2, j1 as usize, j2 as usize), t)
    }

    pub(crate) fn check_same(&self, other: &GridSpec) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(SimError::GridMismatch)
        }
    }
}

/// Result of [`canonicalize`].
#[derive(Clone, Copy, Debug)]
pub struct Canonical {
    pub mu: u8,
    pub j1: usize,
    pub j2: usize,
    pub phase: C64,
}

impl Canonical {
    pub fn label(&self, grid: &GridSpec) -> u16 {
        grid.pack(self.mu, self.j1, self.j2)
    }
}

/// Map an arbitrary `|mu; z1, z2>` onto a canonical grid label and unit phase.
///
/// The phase follows the quasi-periodic conditions exactly for the continuous
/// reduction; the remainder is then snapped to the nearest grid point.
pub fn canonicalize(grid: &GridSpec, mu: u8, z1: f64, z2: f64) -> Canonical {
    let c = SQRT_PI;
    let n1 = (z1 / c + 0.5).floor();
    let n2 = (z2 / c + 0.5).floor();
    let r2 = z2 - n2 * c;
    let r1 = z1 - n1 * c;
    let sign = if mu == 1 && (n2 as i64).rem_euclid(2) == 1 { -1.0 } else { 1.0 };
    let phase = C64::from_polar(sign, n2 * c * z1 / 2.0 - n1 * c * r2 / 2.0);
    let mu1 = mu ^ ((n1 as i64).rem_euclid(2) as u8);
    let (label, t) = grid.reduce(mu1, grid.offset_of(r1), grid.offset_of(r2));
    let (mu2, j1, j2) = grid.unpack(label);
    Canonical { mu: mu2, j1, j2, phase: phase * grid.root(t) }
}

/// Dense 2x2 logical density operator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QubitDensity(pub [[C64; 2]; 2]);

pub type Qubit2 = [[C64; 2]; 2];

impl QubitDensity {
    pub fn zero() -> Self {
        Self([[C64::new(0.0, 0.0); 2]; 2])
    }

    pub fn pure(alpha: C64, beta: C64) -> Self {
        let v = [alpha, beta];
        let mut m = [[C64::new(0.0, 0.0); 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                m[i][j] = v[i] * v[j].conj();
            }
        }
        Self(m)
    }

    pub fn trace(&self) -> C64 {
        self.0[0][0] + self.0[1][1]
    }

    /// `u rho u^dagger`.
    pub fn conjugate(&self, u: &Qubit2) -> Self {
        let mut tmp = [[C64::new(0.0, 0.0); 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    tmp[i][j] += u[i][k] * self.0[k][j];
                }
            }
        }
        let mut out = [[C64::new(0.0, 0.0); 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    out[i][j] += tmp[i][k] * u[j][k].conj();
                }
            }
        }
        Self(out)
    }

    /// Apply the Pauli `X^x Z^z`.
    pub fn pauli(&self, x: bool, z: bool) -> Self {
        let mut r = *self;
        if z {
            r = r.conjugate(&qubit::z());
        }
        if x {
            r = r.conjugate(&qubit::x());
        }
        r
    }

    pub fn add_scaled(&mut self, other: &Self, w: f64) {
        for i in 0..2 {
            for j in 0..2 {
                self.0[i][j] += other.0[i][j] * w;
            }
        }
    }

    pub fn scaled(&self, w: f64) -> Self {
        let mut r = Self::zero();
        r.add_scaled(self, w);
        r
    }

    /// Largest entrywise modulus of the difference.
    pub fn distance(&self, other: &Self) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                d = d.max((self.0[i][j] - other.0[i][j]).norm());
            }
        }
        d
    }

    pub fn prob(&self, bit: u8) -> f64 {
        self.0[bit as usize][bit as usize].re
    }
}

/// Qubit unitaries used to express logical actions.
pub mod qubit {
    use super::{Qubit2, C64};

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    pub fn id() -> Qubit2 {
        [[c(1., 0.), c(0., 0.)], [c(0., 0.), c(1., 0.)]]
    }
    pub fn x() -> Qubit2 {
        [[c(0., 0.), c(1., 0.)], [c(1., 0.), c(0., 0.)]]
    }
    pub fn z() -> Qubit2 {
        [[c(1., 0.), c(0., 0.)], [c(0., 0.), c(-1., 0.)]]
    }
    pub fn h() -> Qubit2 {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        [[c(s, 0.), c(s, 0.)], [c(s, 0.), c(-s, 0.)]]
    }
    pub fn s() -> Qubit2 {
        [[c(1., 0.), c(0., 0.)], [c(0., 0.), c(0., 1.)]]
    }
    pub fn t() -> Qubit2 {
        [[c(1., 0.), c(0., 0.)], [c(0., 0.), C64::from_polar(1.0, std::f64::consts::FRAC_PI_4)]]
    }
}

/// Multi-mode state over `(logical bits) x (syndrome grid points)`.
#[derive(Clone, Debug)]
pub struct SssState {
    grid: GridSpec,
    modes: usize,
    entries: Vec<(Label, C64)>,
}

fn consolidate(mut v: Vec<(Label, C64)>) -> Vec<(Label, C64)> {
    v.sort_unstable_by(|a, b| a.0.cmp(&b.0));
    let mut out: Vec<(Label, C64)> = Vec::with_capacity(v.len());
    for (l, a) in v {
        match out.last_mut() {
            Some(last) if last.0 == l => last.1 += a,
            _ => out.push((l, a)),
        }
    }
    out.retain(|(_, a)| a.norm_sqr() > DROP_NORM_SQR);
    out
}

pub(crate) fn single_label(l: u16) -> Label {
    let mut lab = [0u16; MAX_MODES];
    lab[0] = l;
    lab
}

impl SssState {
    /// Build from unit-normalized coefficients; duplicate labels are summed.
    pub fn from_entries(grid: GridSpec, modes: usize, entries: Vec<(Label, C64)>) -> Result<Self> {
        if modes == 0 || modes > MAX_MODES {
            return Err(SimError::UnsupportedSize(format!("{modes} modes")));
        }
        Ok(Self { grid, modes, entries: consolidate(entries) })
    }

    /// Single-mode grid delta `|mu; z_j1, z_j2>` (measure-weighted amplitude `1/delta`).
    pub fn delta(grid: GridSpec, mu: u8, j1: usize, j2: usize) -> Self {
        Self {
            grid,
            modes: 1,
            entries: vec![(single_label(grid.pack(mu, j1, j2)), C64::new(1.0, 0.0))],
        }
    }

    /// Single-mode state from a measure-weighted amplitude function `a(mu, z1, z2)`.
    pub fn from_fn(grid: GridSpec, f: impl Fn(u8, f64, f64) -> C64) -> Self {
        let d = grid.delta();
        let mut v = Vec::new();
        for mu in 0..2u8 {
            for j1 in 0..grid.n() {
                for j2 in 0..grid.n() {
                    let a = f(mu, grid.coord(j1), grid.coord(j2)) * d;
                    v.push((single_label(grid.pack(mu, j1, j2)), a));
                }
            }
        }
        Self { grid, modes: 1, entries: consolidate(v) }
    }

    /// Single-mode state from a dense coefficient vector indexed by packed label.
    pub fn from_dense(grid: GridSpec, dense: &[C64]) -> Result<Self> {
        if dense.len() != grid.labels_per_mode() {
            return Err(SimError::Format(format!(
                "dense vector of length {} for {} labels",
                dense.len(),
                grid.labels_per_mode()
            )));
        }
        let v = dense
            .iter()
            .enumerate()
            .filter(|(_, a)| a.norm_sqr() > DROP_NORM_SQR)
            .map(|(l, a)| (single_label(l as u16), *a))
            .collect();
        Ok(Self { grid, modes: 1, entries: v })
    }

    /// Dense unit-normalized coefficients of a single-mode state.
    pub fn to_dense(&self) -> Result<Vec<C64>> {
        if self.modes != 1 {
            return Err(SimError::UnsupportedSize(format!("dense view of {} modes", self.modes)));
        }
        let mut d = vec![C64::new(0.0, 0.0); self.grid.labels_per_mode()];
        for (l, a) in &self.entries {
            d[l[0] as usize] = *a;
        }
        Ok(d)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn entries(&self) -> &[(Label, C64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Measure-weighted amplitude `a(label)`.
    pub fn amplitude(&self, label: &Label) -> C64 {
        match self.entries.binary_search_by(|e| e.0.cmp(label)) {
            Ok(i) => self.entries[i].1 / self.grid.delta().powi(self.modes as i32),
            Err(_) => C64::new(0.0, 0.0),
        }
    }

    /// `sum |a|^2 delta^(2m)`.
    pub fn norm_sqr(&self) -> f64 {
        self.entries.iter().map(|(_, a)| a.norm_sqr()).sum()
    }

    pub fn scaled(&self, w: C64) -> Self {
        let entries = self.entries.iter().map(|(l, a)| (*l, a * w)).collect();
        Self { grid: self.grid, modes: self.modes, entries }
    }

    /// Rescale to unit norm; `None` for the zero vector.
    pub fn normalized(&self) -> Option<Self> {
        let n = self.norm_sqr();
        if n <= 0.0 {
            return None;
        }
        Some(self.scaled(C64::new(1.0 / n.sqrt(), 0.0)))
    }

    pub fn inner(&self, other: &Self) -> Result<C64> {
        self.grid.check_same(&other.grid)?;
        if self.modes != other.modes {
            return Err(SimError::GridMismatch);
        }
        let (mut i, mut j) = (0, 0);
        let mut acc = C64::new(0.0, 0.0);
        while i < self.entries.len() && j < other.entries.len() {
            match self.entries[i].0.cmp(&other.entries[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += self.entries[i].1.conj() * other.entries[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        Ok(acc)
    }

    /// `|| self - other ||`.
    pub fn distance(&self, other: &Self) -> Result<f64> {
        self.grid.check_same(&other.grid)?;
        if self.modes != other.modes {
            return Err(SimError::GridMismatch);
        }
        let (x, y) = (&self.entries, &other.entries);
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        while i < x.len() || j < y.len() {
            if j == y.len() || (i < x.len() && x[i].0 < y[j].0) {
                acc += x[i].1.norm_sqr();
                i += 1;
            } else if i == x.len() || y[j].0 < x[i].0 {
                acc += y[j].1.norm_sqr();
                j += 1;
            } else {
                acc += (x[i].1 - y[j].1).norm_sqr();
                i += 1;
                j += 1;
            }
        }
        Ok(acc.sqrt())
    }

    pub fn tensor(&self, other: &Self) -> Result<Self> {
        self.grid.check_same(&other.grid)?;
        let modes = self.modes + other.modes;
        if modes > MAX_MODES {
            return Err(SimError::UnsupportedSize(format!("{modes} modes")));
        }
        let mut v = Vec::with_capacity(self.entries.len() * other.entries.len());
        for (la, a) in &self.entries {
            for (lb, b) in &other.entries {
                let mut l = *la;
                l[self.modes..modes].copy_from_slice(&lb[..other.modes]);
                v.push((l, a * b));
            }
        }
        // lexicographic order is preserved by construction
        Ok(Self { grid: self.grid, modes, entries: v })
    }

    pub(crate) fn check_mode(&self, mode: usize) -> Result<()> {
        if mode < self.modes {
            Ok(())
        } else {
            Err(SimError::ModeOutOfRange(mode))
        }
    }

    /// Apply a per-label linear map on one mode.
    pub fn map_mode(&self, mode: usize, mut f: impl FnMut(u16, &mut Vec<(u16, C64)>)) -> Self {
        let mut v = Vec::with_capacity(self.entries.len() * 2);
        let mut buf = Vec::with_capacity(4);
        for (l, a) in &self.entries {
            buf.clear();
            f(l[mode], &mut buf);
            for (nl, w) in &buf {
                let mut l2 = *l;
                l2[mode] = *nl;
                v.push((l2, a * w));
            }
        }
        Self { grid: self.grid, modes: self.modes, entries: consolidate(v) }
    }

    /// Apply a monomial map on a pair of modes.
    pub fn map_pair(&self, j: usize, k: usize, f: impl Fn(u16, u16) -> (u16, u16, C64)) -> Self {
        let v = self
            .entries
            .iter()
            .map(|(l, a)| {
                let (a2, b2, w) = f(l[j], l[k]);
                let mut l2 = *l;
                l2[j] = a2;
                l2[k] = b2;
                (l2, a * w)
            })
            .collect();
        Self { grid: self.grid, modes: self.modes, entries: consolidate(v) }
    }

    /// Keep only labels satisfying the predicate.
    pub fn retain(&self, pred: impl Fn(&Label) -> bool) -> Self {
        let entries = self.entries.iter().filter(|(l, _)| pred(l)).cloned().collect();
        Self { grid: self.grid, modes: self.modes, entries }
    }

    /// Remove `mode` from every label after it was fixed to a single value.
    pub(crate) fn remove_mode_label(l: &Label, mode: usize, modes: usize) -> Label {
        let mut out = [0u16; MAX_MODES];
        let mut t = 0;
        for (i, v) in l.iter().enumerate().take(modes) {
            if i != mode {
                out[t] = *v;
                t += 1;
            }
        }
        out
    }

    /// Group the amplitudes by the labels of all modes except `mode`.
    /// Each slice lists `(label of mode, coefficient)` for one fixed remainder.
    pub fn slices(&self, mode: usize) -> Vec<(Label, Vec<(u16, C64)>)> {
        let mut map: HashMap<Label, Vec<(u16, C64)>> = HashMap::new();
        for (l, a) in &self.entries {
            let rest = Self::remove_mode_label(l, mode, self.modes);
            map.entry(rest).or_default().push((l[mode], *a));
        }
        let mut out: Vec<_> = map.into_iter().collect();
        out.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Reduced state on the remaining modes as an ensemble of pure slices.
    pub fn partial_trace(&self, mode: usize) -> Result<MixedState> {
        self.check_mode(mode)?;
        if self.modes == 1 {
            return Err(SimError::UnsupportedSize("cannot trace out the only mode".into()));
        }
        let mut map: HashMap<u16, Vec<(Label, C64)>> = HashMap::new();
        for (l, a) in &self.entries {
            let rest = Self::remove_mode_label(l, mode, self.modes);
            map.entry(l[mode]).or_default().push((rest, *a));
        }
        let mut keys: Vec<u16> = map.keys().copied().collect();
        keys.sort_unstable();
        let mut members = Vec::with_capacity(keys.len());
        for k in keys {
            let s = SssState::from_entries(self.grid, self.modes - 1, map.remove(&k).unwrap())?;
            let w = s.norm_sqr();
            if let Some(n) = s.normalized() {
                members.push((w, n));
            }
        }
        Ok(MixedState { grid: self.grid, modes: self.modes - 1, members })
    }

    /// Drop every label whose syndrome on `mode` lies outside `[-r, r)^2`.
    pub fn filter_radius(&self, mode: usize, r: f64) -> Self {
        let g = self.grid;
        let eps = 1e-9 * g.delta();
        let inside = |z: f64| z >= -r - eps && z < r - eps;
        self.retain(|l| {
            let (_, z1, z2) = g.coords(l[mode]);
            inside(z1) && inside(z2)
        })
    }

    /// Fix the logical bit of `mode` to `mu` (unnormalized projection).
    pub fn project_bit(&self, mode: usize, mu: u8) -> Self {
        let g = self.grid;
        self.retain(|l| g.unpack(l[mode]).0 == mu)
    }

    /// Probability that the logical bit of `mode` is `mu`.
    pub fn bit_probability(&self, mode: usize, mu: u8) -> f64 {
        let g = self.grid;
        self.entries
            .iter()
            .filter(|(l, _)| g.unpack(l[mode]).0 == mu)
            .map(|(_, a)| a.norm_sqr())
            .sum()
    }

    /// Maximum syndrome coordinate magnitude carried by `mode`.
    pub fn support_radius(&self, mode: usize) -> f64 {
        let g = self.grid;
        self.entries
            .iter()
            .map(|(l, _)| {
                let (_, z1, z2) = g.coords(l[mode]);
                z1.abs().max(z2.abs())
            })
            .fold(0.0, f64::max)
    }

    /// Binary dump: magic, version, m, N, K, then measure-weighted complex64
    /// amplitudes in row-major `(mu_1..mu_m, g_1..g_m)` order.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        let nn = (self.grid.n() * self.grid.n()) as u64;
        let total = (2 * nn).checked_pow(self.modes as u32).unwrap_or(u64::MAX);
        if total > 1 << 26 {
            return Err(SimError::UnsupportedSize(format!("dense dump of {total} entries")));
        }
        w.write_all(DUMP_MAGIC)?;
        for v in [DUMP_VERSION, self.modes as u32, self.grid.n() as u32, self.grid.cutoff() as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut dense = vec![C64::new(0.0, 0.0); total as usize];
        let scale = 1.0 / self.grid.delta().powi(self.modes as i32);
        for (l, a) in &self.entries {
            dense[self.dense_index(l)] = a * scale;
        }
        let mut buf = Vec::with_capacity(dense.len() * 8);
        for a in dense {
            buf.extend_from_slice(&(a.re as f32).to_le_bytes());
            buf.extend_from_slice(&(a.im as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    fn dense_index(&self, l: &Label) -> usize {
        let nn = self.grid.n() * self.grid.n();
        let mut mu_idx = 0usize;
        let mut g_idx = 0usize;
        for &x in l.iter().take(self.modes) {
            let x = x as usize;
            mu_idx = mu_idx * 2 + x / nn;
            g_idx = g_idx * nn + x % nn;
        }
        mu_idx * nn.pow(self.modes as u32) + g_idx
    }

    pub fn read_dump<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(SimError::Format("bad magic".into()));
        }
        let mut hdr = [0u32; 4];
        for h in hdr.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *h = u32::from_le_bytes(b);
        }
        let [version, modes, n, k] = hdr;
        if version != DUMP_VERSION {
            return Err(SimError::Format(format!("unknown version {version}")));
        }
        let grid = GridSpec::new(n as usize, k as usize)?;
        let modes = modes as usize;
        if modes == 0 || modes > MAX_MODES {
            return Err(SimError::Format(format!("{modes} modes")));
        }
        let nn = grid.n() * grid.n();
        let total = (2 * nn).pow(modes as u32);
        let mut raw = vec![0u8; total * 8];
        r.read_exact(&mut raw)?;
        let scale = grid.delta().powi(modes as i32);
        let mut v = Vec::new();
        for idx in 0..total {
            let re = f32::from_le_bytes(raw[idx * 8..idx * 8 + 4].try_into().unwrap());
            let im = f32::from_le_bytes(raw[idx * 8 + 4..idx * 8 + 8].try_into().unwrap());
            if re == 0.0 && im == 0.0 {
                continue;
            }
            let mut mu_idx = idx / nn.pow(modes as u32);
            let mut g_idx = idx % nn.pow(modes as u32);
            let mut l = [0u16; MAX_MODES];
            for m in (0..modes).rev() {
                let mu = mu_idx % 2;
                let g = g_idx % nn;
                mu_idx /= 2;
                g_idx /= nn;
                l[m] = (mu * nn + g) as u16;
            }
            v.push((l, C64::new(re as f64, im as f64) * scale));
        }
        SssState::from_entries(grid, modes, v)
    }
}

/// Weighted ensemble of pure states.
#[derive(Clone, Debug)]
pub struct MixedState {
    pub grid: GridSpec,
    pub modes: usize,
    pub members: Vec<(f64, SssState)>,
}

impl MixedState {
    pub fn pure(state: SssState) -> Self {
        Self { grid: state.grid, modes: state.modes, members: vec![(1.0, state)] }
    }

    pub fn total_weight(&self) -> f64 {
        self.members.iter().map(|(w, _)| w).sum()
    }

    /// `Tr rho^2`.
    pub fn purity(&self) -> Result<f64> {
        let mut p = 0.0;
        for (wa, a) in &self.members {
            for (wb, b) in &self.members {
                p += wa * wb * a.inner(b)?.norm_sqr();
            }
        }
        Ok(p)
    }

    /// The single pure state this ensemble represents, if its purity is within `tol` of one.
    pub fn as_pure(&self, tol: f64) -> Result<Option<SssState>> {
        let total = self.total_weight();
        if (self.purity()? / (total * total) - 1.0).abs() > tol {
            return Ok(None);
        }
        let (_, reference) = self
            .members
            .iter()
            .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
            .ok_or_else(|| SimError::Domain("empty ensemble".into()))?;
        Ok(Some(reference.clone()))
    }

    pub fn decode(&self, mode: usize) -> Result<QubitDensity> {
        let mut out = QubitDensity::zero();
        for (w, s) in &self.members {
            out.add_scaled(&ideal_decode(s, mode)?, *w);
        }
        Ok(out)
    }
}

/// Projector onto syndrome support `[-r, r)^2` of `mode`.
pub fn sss_r_filter(state: &SssState, r: f64, mode: usize) -> Result<SssState> {
    state.check_mode(mode)?;
    if !(r > 0.0 && r <= SQRT_PI / 2.0 + 1e-12) {
        return Err(SimError::InvalidRadius(r));
    }
    Ok(state.filter_radius(mode, r))
}

/// Explicit marker for the decoder that keeps the syndrome subsystem.
pub fn star_decode(state: &SssState, mode: usize) -> Result<SssState> {
    state.check_mode(mode)?;
    Ok(state.clone())
}

/// Trace out everything except the logical bit of `mode`.
pub fn trace_syndrome(state: &SssState, mode: usize) -> Result<QubitDensity> {
    state.check_mode(mode)?;
    let nn = (state.grid.n() * state.grid.n()) as u16;
    let mut map: HashMap<Label, [C64; 2]> = HashMap::new();
    for (l, a) in &state.entries {
        let mu = (l[mode] / nn) as usize;
        let mut key = *l;
        key[mode] %= nn;
        map.entry(key).or_insert([C64::new(0.0, 0.0); 2])[mu] += a;
    }
    let mut rho = QubitDensity::zero();
    for v in map.values() {
        for i in 0..2 {
            for j in 0..2 {
                rho.0[i][j] += v[i] * v[j].conj();
            }
        }
    }
    Ok(rho)
}

/// Logical density operator of `mode` (ideal GKP decoder).
pub fn ideal_decode(state: &SssState, mode: usize) -> Result<QubitDensity> {
    trace_syndrome(&star_decode(state, mode)?, mode)
}

/// Position samples over the periods `n_lo .. n_lo + n_periods` (each period
/// spans `[n c - c/2, n c + c/2)`), measure-weighted so that `sum |psi|^2 delta = 1`.
#[derive(Clone, Debug)]
pub struct PositionWave {
    pub grid: GridSpec,
    pub n_lo: i64,
    pub n_periods: usize,
    pub samples: Vec<C64>,
}

impl PositionWave {
    /// Symmetric window of `2K + 1` periods, or the full period `2N` when that is smaller.
    pub fn window(grid: GridSpec, cutoff: usize) -> (i64, usize) {
        let n = grid.n();
        if 2 * cutoff + 1 >= 2 * n {
            (-(n as i64), 2 * n)
        } else {
            (-(cutoff as i64), 2 * cutoff + 1)
        }
    }

    /// Sample `f(x)` on the lattice of the given window.
    pub fn from_fn(grid: GridSpec, cutoff: usize, f: impl Fn(f64) -> C64) -> Self {
        let (n_lo, n_periods) = Self::window(grid, cutoff);
        let mut w = Self { grid, n_lo, n_periods, samples: Vec::new() };
        let len = n_periods * grid.n();
        w.samples = (0..len).map(|i| f(w.x(i))).collect();
        w
    }

    pub fn first_offset(&self) -> i64 {
        self.n_lo * self.grid.n() as i64 - (self.grid.n() / 2) as i64
    }

    pub fn x(&self, i: usize) -> f64 {
        (self.first_offset() + i as i64) as f64 * self.grid.delta()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.samples.iter().map(|a| a.norm_sqr()).sum::<f64>() * self.grid.delta()
    }

    pub fn normalized(&self) -> Self {
        let s = 1.0 / self.norm_sqr().sqrt();
        Self { samples: self.samples.iter().map(|a| a * s).collect(), ..self.clone() }
    }

    /// `(x, |psi(x)|^2)` pairs.
    pub fn density(&self) -> Vec<(f64, f64)> {
        self.samples.iter().enumerate().map(|(i, a)| (self.x(i), a.norm_sqr())).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,density")?;
        for (x, p) in self.density() {
            writeln!(w, "{x:.12},{p:.12e}")?;
        }
        Ok(())
    }

    /// Embed into the full discrete period as unit-normalized samples `beta`.
    fn to_full(&self) -> Vec<C64> {
        let g = self.grid;
        let m = g.labels_per_mode() as i64;
        let k_lo = full_k_lo(&g);
        let mut beta = vec![C64::new(0.0, 0.0); m as usize];
        let s = g.delta().sqrt();
        for (i, a) in self.samples.iter().enumerate() {
            let k = self.first_offset() + i as i64;
            beta[(k - k_lo).rem_euclid(m) as usize] += a * s;
        }
        beta
    }
}

/// First lattice offset of the full discrete period (period index `-N`).
pub(crate) fn full_k_lo(g: &GridSpec) -> i64 {
    -((g.n() * g.n()) as i64) - (g.n() / 2) as i64
}

fn index_phase(g: &GridSpec, mu: usize, j1: usize, j2: usize) -> C64 {
    let n = g.n() as i64;
    let h = n / 2;
    let (j1, j2) = (j1 as i64, j2 as i64);
    g.root((j2 - h) * (j1 - h) + 2 * n * j2 * mu as i64)
}

/// Position amplitudes of one `(mu, j1)` column `col[j2]`: pairs `(n, psi)` for the
/// `N` periods `n = mu (mod 2)` in `[-N, N)`, where `psi` is the unit-normalized
/// sample at `x = z_j1 + n c`.
pub(crate) fn column_periods(g: &GridSpec, mu: usize, j1: usize, col: &[C64], out: &mut Vec<(i64, C64)>) {
    let n = g.n();
    let fft = plan_fft(n, true);
    let mut buf: Vec<C64> = col.iter().enumerate().map(|(j2, a)| a * index_phase(g, mu, j1, j2)).collect();
    fft.process(&mut buf);
    let inv_sqrt_n = 1.0 / (n as f64).sqrt();
    out.clear();
    for (t, v) in buf.iter().enumerate() {
        let nn = (mu + 2 * t) as i64;
        let phase = g.root(-nn * (n * n) as i64);
        let nrep = if nn >= n as i64 { nn - 2 * n as i64 } else { nn };
        out.push((nrep, v * phase * inv_sqrt_n));
    }
}

/// Unit-normalized position samples over the full period from dense coefficients.
pub(crate) fn full_wave(g: &GridSpec, alpha: &[C64]) -> Vec<C64> {
    let n = g.n();
    let h = (n / 2) as i64;
    let k_lo = full_k_lo(g);
    let mut beta = vec![C64::new(0.0, 0.0); g.labels_per_mode()];
    let mut out = Vec::with_capacity(n);
    for mu in 0..2 {
        for j1 in 0..n {
            let base = mu * n * n + j1 * n;
            let col = &alpha[base..base + n];
            if col.iter().all(|a| a.norm_sqr() == 0.0) {
                continue;
            }
            column_periods(g, mu, j1, col, &mut out);
            for (nrep, v) in &out {
                let k = (j1 as i64 - h) + nrep * n as i64;
                beta[(k - k_lo) as usize] = *v;
            }
        }
    }
    beta
}

/// Inverse of [`full_wave`].
pub(crate) fn dense_from_full_wave(g: &GridSpec, beta: &[C64]) -> Vec<C64> {
    let n = g.n();
    let h = (n / 2) as i64;
    let k_lo = full_k_lo(g);
    let fft = plan_fft(n, false);
    let mut alpha = vec![C64::new(0.0, 0.0); g.labels_per_mode()];
    let mut buf = vec![C64::new(0.0, 0.0); n];
    let inv_sqrt_n = 1.0 / (n as f64).sqrt();
    for mu in 0..2 {
        for j1 in 0..n {
            let mut any = false;
            for (t, b) in buf.iter_mut().enumerate() {
                let nn = (mu + 2 * t) as i64;
                let nrep = if nn >= n as i64 { nn - 2 * n as i64 } else { nn };
                let k = (j1 as i64 - h) + nrep * n as i64;
                let v = beta[(k - k_lo) as usize];
                any |= v.norm_sqr() != 0.0;
                *b = v * g.root(nn * (n * n) as i64);
            }
            if !any {
                continue;
            }
            fft.process(&mut buf);
            let base = mu * n * n + j1 * n;
            for j2 in 0..n {
                alpha[base + j2] = buf[j2] * inv_sqrt_n * index_phase(g, mu, j1, j2).conj();
            }
        }
    }
    alpha
}

/// Position wave of a single-mode state without the truncation check.
pub fn position_from_sss_unchecked(state: &SssState, cutoff: usize) -> Result<PositionWave> {
    let g = *state.grid();
    let beta = full_wave(&g, &state.to_dense()?);
    let (n_lo, n_periods) = PositionWave::window(g, cutoff);
    let k_lo = full_k_lo(&g);
    let first = n_lo * g.n() as i64 - (g.n() / 2) as i64;
    let m = g.labels_per_mode() as i64;
    let s = 1.0 / g.delta().sqrt();
    let samples = (0..n_periods * g.n())
        .map(|i| beta[(first + i as i64 - k_lo).rem_euclid(m) as usize] * s)
        .collect();
    Ok(PositionWave { grid: g, n_lo, n_periods, samples })
}

/// Position wave over `2K + 1` periods; errors when the retained norm deviates
/// from the state's norm by more than `1e-6`.
pub fn position_from_sss(state: &SssState, cutoff: usize) -> Result<PositionWave> {
    let w = position_from_sss_unchecked(state, cutoff)?;
    let deviation = (w.norm_sqr() - state.norm_sqr()).abs();
    if deviation > 1e-6 {
        return Err(SimError::CutoffTooSmall { deviation });
    }
    Ok(w)
}

/// Inverse transform; samples outside the window are taken as zero.
pub fn sss_from_position(wave: &PositionWave) -> Result<SssState> {
    let deviation = (wave.norm_sqr() - 1.0).abs();
    if deviation > 1e-6 {
        return Err(SimError::CutoffTooSmall { deviation });
    }
    let g = wave.grid;
    SssState::from_dense(g, &dense_from_full_wave(&g, &wave.to_full()))
}

/// `|psi(x)|^2 delta` summed over slices, on the full period, for one mode.
pub(crate) fn mode_position_probabilities(state: &SssState, mode: usize) -> Result<Vec<f64>> {
    state.check_mode(mode)?;
    let g = *state.grid();
    let mut probs = vec![0.0; g.labels_per_mode()];
    let mut dense = vec![C64::new(0.0, 0.0); g.labels_per_mode()];
    for (_, slice) in state.slices(mode) {
        for (l, a) in &slice {
            dense[*l as usize] = *a;
        }
        let beta = full_wave(&g, &dense);
        for (p, b) in probs.iter_mut().zip(&beta) {
            *p += b.norm_sqr();
        }
        for (l, _) in &slice {
            dense[*l as usize] = C64::new(0.0, 0.0);
        }
    }
    Ok(probs)
}
