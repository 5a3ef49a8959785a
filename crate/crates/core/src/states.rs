//! s-parameterized GKP states built from compactly supported envelopes, and
//! the Gaussian-comb (theta function) approximate codeword.

use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64 as C64;

use crate::error::{Result, SimError};
use crate::zakcore::{position_from_sss, single_label, GridSpec, PositionWave, SssState, SQRT_PI};

/// `exp(-1 / (1 - (x/s)^2))` on `|x| < s`, zero elsewhere.
pub fn bump(s: f64, x: f64) -> f64 {
    generalized_bump(s, 1.0, 1.0, x)
}

/// `exp(-c2 / (1 - (x/s)^2)^c1)` on `|x| < s`, zero elsewhere.
pub fn generalized_bump(s: f64, c1: f64, c2: f64, x: f64) -> f64 {
    let u = x / s;
    if s <= 0.0 || u.abs() >= 1.0 {
        return 0.0;
    }
    (-c2 / (1.0 - u * u).powf(c1)).exp()
}

pub type Profile = Arc<dyn Fn(f64) -> C64 + Send + Sync>;

/// Syndrome envelope `f`; the state is `f(z1) f(z2)` on the syndrome square.
#[derive(Clone)]
pub enum EnvelopeSpec {
    Bump { s: f64 },
    GeneralizedBump { s: f64, c1: f64, c2: f64 },
    /// Arbitrary profile; values at `|x| >= s` are ignored.
    Custom { s: f64, profile: Profile },
}

impl fmt::Debug for EnvelopeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvelopeSpec::Bump { s } => write!(f, "Bump({s})"),
            EnvelopeSpec::GeneralizedBump { s, c1, c2 } => write!(f, "GeneralizedBump({s}, {c1}, {c2})"),
            EnvelopeSpec::Custom { s, .. } => write!(f, "Custom({s})"),
        }
    }
}

impl EnvelopeSpec {
    pub fn bump(s: f64) -> Self {
        EnvelopeSpec::Bump { s }
    }

    pub fn s(&self) -> f64 {
        match self {
            EnvelopeSpec::Bump { s } | EnvelopeSpec::GeneralizedBump { s, .. } | EnvelopeSpec::Custom { s, .. } => *s,
        }
    }

    pub fn value(&self, x: f64) -> C64 {
        match self {
            EnvelopeSpec::Bump { s } => C64::new(bump(*s, x), 0.0),
            EnvelopeSpec::GeneralizedBump { s, c1, c2 } => C64::new(generalized_bump(*s, *c1, *c2, x), 0.0),
            EnvelopeSpec::Custom { s, profile } => {
                if x.abs() < *s {
                    profile(x)
                } else {
                    C64::new(0.0, 0.0)
                }
            }
        }
    }

    /// `int f(z) e^{ikz} dz` by composite Simpson quadrature.
    pub fn fourier(&self, k: f64) -> C64 {
        let s = self.s();
        let n = 4000;
        let h = 2.0 * s / n as f64;
        let mut acc = C64::new(0.0, 0.0);
        for i in 0..=n {
            let z = -s + i as f64 * h;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += self.value(z) * C64::from_polar(w, k * z);
        }
        acc * h / 3.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LogicalTarget {
    Zero,
    /// `(|0> + i|1>) / sqrt 2`
    Y,
    /// `T|+> = (|0> + e^{i pi/4}|1>) / sqrt 2`
    PiOver8,
    General(C64, C64),
}

impl LogicalTarget {
    pub fn one() -> Self {
        LogicalTarget::General(C64::new(0.0, 0.0), C64::new(1.0, 0.0))
    }

    pub fn plus() -> Self {
        LogicalTarget::General(C64::new(FRAC_1_SQRT_2, 0.0), C64::new(FRAC_1_SQRT_2, 0.0))
    }

    pub fn amplitudes(&self) -> (C64, C64) {
        let h = FRAC_1_SQRT_2;
        match self {
            LogicalTarget::Zero => (C64::new(1.0, 0.0), C64::new(0.0, 0.0)),
            LogicalTarget::Y => (C64::new(h, 0.0), C64::new(0.0, h)),
            LogicalTarget::PiOver8 => (C64::new(h, 0.0), C64::from_polar(h, std::f64::consts::FRAC_PI_4)),
            LogicalTarget::General(a, b) => {
                let n = (a.norm_sqr() + b.norm_sqr()).sqrt();
                (a / n, b / n)
            }
        }
    }
}

/// `|psi>_L (x) sum f(z1) f(z2) |z1, z2>_S`, normalized; requires `s < c/2`.
pub fn make_s_state(target: LogicalTarget, env: &EnvelopeSpec, grid: GridSpec) -> Result<SssState> {
    let s = env.s();
    if s >= SQRT_PI / 2.0 {
        return Err(SimError::SupportTooWide { s });
    }
    make_s_state_unchecked(target, env, grid)
}

/// Same construction with no bound on `s`: envelope points outside the cell
/// are folded back with the quasi-periodic phases, which mixes the logical bit.
pub fn make_s_state_unchecked(target: LogicalTarget, env: &EnvelopeSpec, grid: GridSpec) -> Result<SssState> {
    let s = env.s();
    if s <= 0.0 {
        return Err(SimError::Domain(format!("envelope half-width {s} must be positive")));
    }
    let (a, b) = target.amplitudes();
    let d = grid.delta();
    let kmax = (s / d).ceil() as i64;
    let ks: Vec<(i64, C64)> = (-kmax..=kmax)
        .map(|k| (k, env.value(k as f64 * d)))
        .filter(|(_, f)| f.norm_sqr() > 0.0)
        .collect();
    let mut entries = Vec::with_capacity(2 * ks.len() * ks.len());
    for (mu, amp) in [(0u8, a), (1u8, b)] {
        if amp.norm_sqr() == 0.0 {
            continue;
        }
        for (k1, f1) in &ks {
            for (k2, f2) in &ks {
                let (l, t) = grid.reduce(mu, *k1, *k2);
                entries.push((single_label(l), amp * f1 * f2 * grid.root(t)));
            }
        }
    }
    SssState::from_entries(grid, 1, entries)?
        .normalized()
        .ok_or_else(|| SimError::Domain("envelope vanishes on every grid point".into()))
}

/// Position wave of a single-mode state over the grid's cutoff window.
pub fn position_profile(state: &SssState) -> Result<PositionWave> {
    position_from_sss(state, state.grid().cutoff())
}

/// Closed-form position profile `sum_n gamma(n) f(x - nc) F((x + nc)/2)` of an
/// s-state, with `F` evaluated by quadrature; normalized over the window.
pub fn closed_form_profile(target: LogicalTarget, env: &EnvelopeSpec, grid: GridSpec, cutoff: usize) -> PositionWave {
    let (a, b) = target.amplitudes();
    let s = env.s();
    let w = PositionWave::from_fn(grid, cutoff, |x| {
        let n_lo = ((x - s) / SQRT_PI).floor() as i64;
        let n_hi = ((x + s) / SQRT_PI).ceil() as i64;
        let mut acc = C64::new(0.0, 0.0);
        for n in n_lo..=n_hi {
            let f = env.value(x - n as f64 * SQRT_PI);
            if f.norm_sqr() == 0.0 {
                continue;
            }
            let gamma = if n.rem_euclid(2) == 0 { a } else { b };
            acc += gamma * f * env.fourier((x + n as f64 * SQRT_PI) / 2.0);
        }
        acc
    });
    w.normalized()
}

/// Gaussian-comb codeword with peak weights `exp(-4 c^2 sigma^2 m^2)` and
/// spacing `2c sqrt(1 - 4 sigma^4)`, summed over `|m| <= m_trunc`.
pub fn make_theta_state(sigma2: f64, grid: GridSpec, m_trunc: usize) -> Result<PositionWave> {
    if !(sigma2 > 0.0 && sigma2 < 0.5) {
        return Err(SimError::Domain(format!("sigma^2 = {sigma2} outside (0, 1/2)")));
    }
    let c2 = SQRT_PI * SQRT_PI;
    let m1 = (m_trunc + 1) as f64;
    let dropped = (-4.0 * c2 * sigma2 * m1 * m1).exp();
    if dropped >= 1e-15 {
        return Err(SimError::TruncationError { dropped });
    }
    let spacing = 2.0 * SQRT_PI * (1.0 - 4.0 * sigma2 * sigma2).sqrt();
    let m = m_trunc as i64;
    let w = PositionWave::from_fn(grid, grid.cutoff(), |x| {
        let mut acc = 0.0;
        for j in -m..=m {
            let jf = j as f64;
            let t = x - spacing * jf;
            acc += (-4.0 * c2 * sigma2 * jf * jf - t * t / (4.0 * sigma2)).exp();
        }
        C64::new(acc, 0.0)
    });
    Ok(w.normalized())
}

/// Smallest comb truncation meeting the `1e-15` dropped-term bound.
pub fn theta_truncation(sigma2: f64) -> usize {
    let c2 = SQRT_PI * SQRT_PI;
    let m = (15.0 * std::f64::consts::LN_10 / (4.0 * c2 * sigma2)).sqrt();
    m.ceil() as usize
}

/// Overlap of two position waves over their common window.
pub fn wave_overlap(a: &PositionWave, b: &PositionWave) -> Result<C64> {
    if a.grid != b.grid {
        return Err(SimError::GridMismatch);
    }
    let lo = a.first_offset().max(b.first_offset());
    let hi = (a.first_offset() + a.samples.len() as i64).min(b.first_offset() + b.samples.len() as i64);
    let mut acc = C64::new(0.0, 0.0);
    for k in lo..hi {
        acc += a.samples[(k - a.first_offset()) as usize].conj() * b.samples[(k - b.first_offset()) as usize];
    }
    Ok(acc * a.grid.delta())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zakcore::{ideal_decode, sss_r_filter};

    #[test]
    fn bump_values() {
        assert!((bump(0.2, 0.0) - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(bump(0.2, 0.2), 0.0);
        assert_eq!(bump(0.2, -0.25), 0.0);
        assert!((generalized_bump(0.3, 2.0, 0.5, 0.0) - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn zero_state_decodes_and_is_supported() {
        let g = GridSpec::single_mode_default();
        let st = make_s_state(LogicalTarget::Zero, &EnvelopeSpec::bump(0.2), g).unwrap();
        assert!((st.norm_sqr() - 1.0).abs() < 1e-12);
        let rho = ideal_decode(&st, 0).unwrap();
        assert!((rho.prob(0) - 1.0).abs() < 1e-9);
        let f = sss_r_filter(&st, 0.2, 0).unwrap();
        assert_eq!(f.entries(), st.entries());
        let f = sss_r_filter(&st, 0.19, 0).unwrap();
        assert!(f.len() < st.len());
        assert!(f.norm_sqr() < st.norm_sqr());
    }

    #[test]
    fn y_state_decodes() {
        let g = GridSpec::single_mode_default();
        let st = make_s_state(LogicalTarget::Y, &EnvelopeSpec::bump(0.4), g).unwrap();
        let rho = ideal_decode(&st, 0).unwrap();
        // (I + sigma_Y)/2 = [[1/2, -i/2], [i/2, 1/2]]
        assert!((rho.0[0][1] - C64::new(0.0, -0.5)).norm() < 1e-9);
        assert!((rho.0[1][0] - C64::new(0.0, 0.5)).norm() < 1e-9);
        assert!((rho.0[0][0].re - 0.5).abs() < 1e-9);
    }

    #[test]
    fn wide_support_rejected_or_folded() {
        let g = GridSpec::single_mode_default();
        assert!(matches!(
            make_s_state(LogicalTarget::Zero, &EnvelopeSpec::bump(0.9), g),
            Err(SimError::SupportTooWide { .. })
        ));
        let wide = make_s_state_unchecked(LogicalTarget::Zero, &EnvelopeSpec::bump(1.6), g).unwrap();
        let rho = ideal_decode(&wide, 0).unwrap();
        assert!(rho.prob(1) > 1e-3);
    }

    #[test]
    fn profile_matches_closed_form() {
        let g = GridSpec::new(64, 12).unwrap();
        for target in [LogicalTarget::Zero, LogicalTarget::Y] {
            let env = EnvelopeSpec::bump(0.6);
            let st = make_s_state(target, &env, g).unwrap();
            let w = position_from_sss(&st, 64).unwrap().normalized();
            let oracle = closed_form_profile(target, &env, g, 64);
            let ov = wave_overlap(&w, &oracle).unwrap();
            assert!((ov.norm() - 1.0).abs() < 1e-6, "overlap {ov}");
            assert!((ov - 1.0).norm() < 1e-3, "phase convention {ov}");
        }
    }

    #[test]
    fn zero_profile_peaks_at_even_multiples() {
        let g = GridSpec::new(64, 12).unwrap();
        let st = make_s_state(LogicalTarget::Zero, &EnvelopeSpec::bump(0.3), g).unwrap();
        let w = position_from_sss(&st, 64).unwrap();
        for (i, a) in w.samples.iter().enumerate() {
            if a.norm() > 1e-12 {
                let x = w.x(i);
                let n = (x / SQRT_PI).round();
                assert!((x - n * SQRT_PI).abs() < 0.3);
                assert_eq!((n as i64).rem_euclid(2), 0);
            }
        }
    }

    #[test]
    fn tails_decay_faster_than_quartic() {
        let g = GridSpec::new(64, 12).unwrap();
        let st = make_s_state(LogicalTarget::Zero, &EnvelopeSpec::bump(0.6), g).unwrap();
        let w = position_from_sss(&st, 64).unwrap();
        let peak = |p: i64| -> f64 {
            let mut best: f64 = 0.0;
            for (i, a) in w.samples.iter().enumerate() {
                if (w.x(i) / SQRT_PI).round() as i64 == p {
                    best = best.max(a.norm_sqr());
                }
            }
            best
        };
        // tail mass beyond P periods, times P^4, keeps falling
        let scaled: Vec<f64> = (1..8)
            .map(|b| (8 * b..64).map(peak).sum::<f64>() * ((8 * b) as f64).powi(4))
            .collect();
        for w in scaled.windows(2) {
            assert!(w[1] < w[0], "{scaled:?}");
        }
        assert!(scaled[6] < scaled[0] / 50.0);
    }

    #[test]
    fn theta_state_basics() {
        let g = GridSpec::new(64, 12).unwrap();
        let m = theta_truncation(0.05);
        let w = make_theta_state(0.05, g, m).unwrap();
        assert!((w.norm_sqr() - 1.0).abs() < 1e-8);
        assert!(matches!(make_theta_state(0.05, g, 1), Err(SimError::TruncationError { .. })));
        assert!(make_theta_state(0.6, g, m).is_err());
        let spacing = |s2: f64| 2.0 * SQRT_PI * (1.0 - 4.0 * s2 * s2).sqrt();
        assert!((spacing(1e-6) - 2.0 * SQRT_PI).abs() < 1e-10);
    }

    #[test]
    fn theta_overlap_improves_as_sigma_shrinks() {
        let g = GridSpec::new(64, 12).unwrap();
        let best = |s2: f64| -> f64 {
            let theta = make_theta_state(s2, g, theta_truncation(s2)).unwrap();
            let mut best = 0.0f64;
            for i in 4..=17 {
                let s = 0.05 * i as f64;
                let st = make_s_state(LogicalTarget::Zero, &EnvelopeSpec::bump(s), g).unwrap();
                let w = position_from_sss(&st, 64).unwrap();
                let ov = wave_overlap(&theta, &w).unwrap();
                assert!(ov.re > 0.0 && ov.im.abs() < 1e-9 * ov.re.max(1.0));
                best = best.max(ov.re);
            }
            best
        };
        let a = best(0.12);
        let b = best(0.06);
        let c = best(0.03);
        assert!(a < b && b < c, "{a} {b} {c}");
    }
}
