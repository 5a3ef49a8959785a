//! Homodyne detection, GKP binning and the logical measurement.

use std::collections::HashMap;

use num_complex::Complex64 as C64;
use rand::Rng;

use crate::error::{Result, SimError};
use crate::gates::{apply_fourier, apply_noise, NoiseKernel};
use crate::zakcore::{column_periods, full_k_lo, mode_position_probabilities, GridSpec, Label, MixedState, SssState, SQRT_PI};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Quadrature {
    Q,
    P,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Basis {
    Z,
    X,
}

/// `floor(t/c + 1/2)`, the nearest multiple index with ties rounded up.
/// Values within `1e-12` (relative) of a tie count as the tie, so lattice
/// points on a cell edge bin the same way as their exact coordinates.
pub fn round_to_c(t: f64) -> i64 {
    let q = t / SQRT_PI + 0.5;
    let r = q.round();
    if (q - r).abs() <= 1e-12 * r.abs().max(1.0) {
        r as i64
    } else {
        q.floor() as i64
    }
}

/// Parity of the nearest multiple of `c`.
pub fn gkp_bin(t: f64) -> u8 {
    round_to_c(t).rem_euclid(2) as u8
}

/// Signed distance from `t` to its bin centre, in `[-c/2, c/2)`.
pub fn bin_residual(t: f64) -> f64 {
    t - round_to_c(t) as f64 * SQRT_PI
}

/// `F^3 = F^dagger`; the q-statistics of `F^dagger psi` are the p-statistics of `psi`.
pub(crate) fn to_p_frame(state: &SssState, mode: usize) -> Result<SssState> {
    let mut s = apply_fourier(state, mode)?;
    s = apply_fourier(&s, mode)?;
    apply_fourier(&s, mode)
}

/// `(x, |psi(x)|^2 delta)` over the full discrete period of one mode, other modes traced out.
pub fn homodyne_distribution(state: &SssState, mode: usize, quad: Quadrature) -> Result<Vec<(f64, f64)>> {
    let rotated;
    let st = match quad {
        Quadrature::Q => state,
        Quadrature::P => {
            rotated = to_p_frame(state, mode)?;
            &rotated
        }
    };
    let g = *st.grid();
    let norm = st.norm_sqr();
    let k_lo = full_k_lo(&g);
    let probs = mode_position_probabilities(st, mode)?;
    Ok(probs
        .into_iter()
        .enumerate()
        .map(|(i, p)| ((k_lo + i as i64) as f64 * g.delta(), p / norm))
        .collect())
}

/// Outcome statistics and post-measurement ensembles of a logical measurement.
/// The measured mode stays in the tensor as a classical register.
#[derive(Clone, Debug)]
pub struct MeasureResult {
    pub probs: [f64; 2],
    pub post: [Option<MixedState>; 2],
}

impl MeasureResult {
    pub fn conditional(&self, bit: u8) -> Result<&MixedState> {
        self.post[bit as usize].as_ref().ok_or(SimError::ZeroProbabilityBranch(bit))
    }
}

/// Binned homodyne measurement in the Z (q) or X (p) basis after `pre_noise`.
pub fn logical_measure<R: Rng + ?Sized>(
    state: &SssState,
    mode: usize,
    basis: Basis,
    pre_noise: &NoiseKernel,
    rng: &mut R,
) -> Result<MeasureResult> {
    let noisy = apply_noise(state, &[mode], pre_noise, rng)?.into_mixed();
    let mut probs = [0.0; 2];
    let mut post: [Vec<(f64, SssState)>; 2] = [Vec::new(), Vec::new()];
    for (w, s) in &noisy.members {
        let s = match basis {
            Basis::Z => s.clone(),
            Basis::X => to_p_frame(s, mode)?,
        };
        let total = s.norm_sqr();
        for mu in 0..2u8 {
            let proj = s.project_bit(mode, mu);
            let p = proj.norm_sqr() / total;
            probs[mu as usize] += w * p;
            if let Some(n) = proj.normalized() {
                post[mu as usize].push((w * p, n));
            }
        }
    }
    let tot = probs[0] + probs[1];
    let g = *state.grid();
    let m = state.modes();
    let mk = |members: Vec<(f64, SssState)>, p: f64| {
        if p > 0.0 {
            Some(MixedState {
                grid: g,
                modes: m,
                members: members.into_iter().map(|(w, s)| (w / p, s)).collect(),
            })
        } else {
            None
        }
    };
    let [p0, p1] = post;
    let (q0, q1) = (probs[0] / tot, probs[1] / tot);
    Ok(MeasureResult { probs: [q0, q1], post: [mk(p0, probs[0]), mk(p1, probs[1])] })
}

/// One sampled homodyne outcome. `remaining` is the normalized state of the
/// other modes, or `None` when the measured mode was the only one.
#[derive(Clone, Debug)]
pub struct HomodyneSample {
    pub value: f64,
    pub bit: u8,
    pub remaining: Option<SssState>,
}

struct HomodyneTable {
    grid: GridSpec,
    modes: usize,
    keys: Vec<(u8, usize, Label)>,
    waves: Vec<Vec<(i64, C64)>>,
    /// `((j1, nrep), weight)` sorted by outcome.
    outcomes: Vec<((usize, i64), f64)>,
}

impl HomodyneTable {
    fn new(state: &SssState, mode: usize, quad: Quadrature) -> Result<Self> {
        let rotated;
        let st = match quad {
            Quadrature::Q => {
                state.check_mode(mode)?;
                state
            }
            Quadrature::P => {
                rotated = to_p_frame(state, mode)?;
                &rotated
            }
        };
        let g: GridSpec = *st.grid();
        let n = g.n();
        let modes = st.modes();
        // columns keyed by (mu, j1, rest) hold the j2 profile
        let mut cols: HashMap<(u8, usize, Label), Vec<C64>> = HashMap::new();
        for (l, a) in st.entries() {
            let (mu, j1, j2) = g.unpack(l[mode]);
            let rest = SssState::remove_mode_label(l, mode, modes);
            cols.entry((mu, j1, rest)).or_insert_with(|| vec![C64::new(0.0, 0.0); n])[j2] = *a;
        }
        let mut keys: Vec<(u8, usize, Label)> = cols.keys().copied().collect();
        keys.sort_unstable();
        let mut waves: Vec<Vec<(i64, C64)>> = Vec::with_capacity(keys.len());
        let mut table: HashMap<(usize, i64), f64> = HashMap::new();
        let mut buf = Vec::with_capacity(n);
        for key in &keys {
            column_periods(&g, key.0 as usize, key.1, &cols[key], &mut buf);
            for (nrep, v) in &buf {
                *table.entry((key.1, *nrep)).or_insert(0.0) += v.norm_sqr();
            }
            waves.push(buf.clone());
        }
        let mut outcomes: Vec<((usize, i64), f64)> = table.into_iter().collect();
        outcomes.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        if outcomes.iter().map(|(_, p)| p).sum::<f64>() <= 0.0 {
            return Err(SimError::Domain("measuring the zero vector".into()));
        }
        Ok(Self { grid: g, modes, keys, waves, outcomes })
    }

    fn total(&self) -> f64 {
        self.outcomes.iter().map(|(_, p)| p).sum()
    }

    fn sample(&self, (j1, nrep): (usize, i64)) -> Result<HomodyneSample> {
        let g = self.grid;
        let value = (j1 as i64 - (g.n() / 2) as i64) as f64 * g.delta() + nrep as f64 * SQRT_PI;
        let bit = nrep.rem_euclid(2) as u8;
        let remaining = if self.modes == 1 {
            None
        } else {
            let mut entries = Vec::new();
            for (key, wave) in self.keys.iter().zip(&self.waves) {
                if key.1 != j1 {
                    continue;
                }
                if let Some((_, v)) = wave.iter().find(|(r, _)| *r == nrep) {
                    entries.push((key.2, *v));
                }
            }
            let s = SssState::from_entries(g, self.modes - 1, entries)?;
            Some(s.normalized().ok_or(SimError::ZeroProbabilityBranch(bit))?)
        };
        Ok(HomodyneSample { value, bit, remaining })
    }
}

/// Draw a full homodyne outcome of `mode` in the given quadrature and drop the mode.
pub fn sample_homodyne<R: Rng + ?Sized>(
    state: &SssState,
    mode: usize,
    quad: Quadrature,
    rng: &mut R,
) -> Result<HomodyneSample> {
    let t = HomodyneTable::new(state, mode, quad)?;
    let mut u = rng.random::<f64>() * t.total();
    let mut pick = t.outcomes[t.outcomes.len() - 1].0;
    for (o, p) in &t.outcomes {
        if u < *p {
            pick = *o;
            break;
        }
        u -= p;
    }
    t.sample(pick)
}

/// Every homodyne outcome of `mode` with its probability; outcomes below `min_prob` are dropped.
pub fn homodyne_branches(
    state: &SssState,
    mode: usize,
    quad: Quadrature,
    min_prob: f64,
) -> Result<Vec<(f64, HomodyneSample)>> {
    let t = HomodyneTable::new(state, mode, quad)?;
    let total = t.total();
    t.outcomes
        .iter()
        .filter(|(_, p)| *p / total > min_prob)
        .map(|(o, p)| Ok((*p / total, t.sample(*o)?)))
        .collect()
}
