use gkp_sss::circuits::{EcParams, PauliFrame};
use gkp_sss::faultmc::{propagate_shift, RateEstimate, ShiftState};
use gkp_sss::ftcheck::random_filtered_state;
use gkp_sss::gates::{apply_displacement_grid, apply_fourier, GateKind};
use gkp_sss::measurement::{bin_residual, gkp_bin, round_to_c};
use gkp_sss::zakcore::{ideal_decode, position_from_sss, sss_from_position};
use gkp_sss::{GridSpec, SssState, SQRT_PI};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const C: f64 = SQRT_PI;

fn random_state(n: usize, seed: u64, r: f64) -> SssState {
    let g = GridSpec::new(n, 4).unwrap();
    random_filtered_state(g, &[r], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn overlap(a: &SssState, b: &SssState) -> f64 {
    a.inner(b).unwrap().norm()
}

fn gate_strategy() -> impl Strategy<Value = GateKind> {
    prop_oneof![
        Just(GateKind::Fourier),
        Just(GateKind::Shear),
        Just(GateKind::Sum { control: 0, target: 1 }),
        Just(GateKind::Wait),
        Just(GateKind::DisplacementX),
    ]
}

fn modes_for(g: &GateKind, a: usize, b: usize) -> Vec<usize> {
    match g {
        GateKind::Sum { .. } => vec![a, b],
        _ => vec![a],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn bins_have_period_two_c(t in -50.0f64..50.0, k in -5i64..5) {
        let r = bin_residual(t);
        prop_assume!(r.abs() < 0.49 * C);
        prop_assert_eq!(gkp_bin(t), gkp_bin(t + 2.0 * k as f64 * C));
        prop_assert_ne!(gkp_bin(t), gkp_bin(t + C));
        prop_assert!((t - r - round_to_c(t) as f64 * C).abs() < 1e-9);
    }

    #[test]
    fn residual_lies_in_half_open_cell(t in -50.0f64..50.0) {
        let r = bin_residual(t);
        prop_assert!(r >= -0.5 * C - 1e-12 && r < 0.5 * C + 1e-12);
    }

    #[test]
    fn wilson_interval_brackets_rate(trials in 1u64..100_000, frac in 0.0f64..=1.0) {
        let hits = ((trials as f64) * frac).floor() as u64;
        let e = RateEstimate::new(hits, trials);
        prop_assert!(e.wilson.0 >= 0.0 && e.wilson.1 <= 1.0);
        prop_assert!(e.wilson.0 <= e.rate + 1e-12 && e.rate <= e.wilson.1 + 1e-12);
        prop_assert!(e.stderr >= 0.0);
    }

    #[test]
    fn s_out_is_monotone(base in prop::array::uniform6(0.0f64..0.3), which in 0usize..6, bump in 0.0f64..0.2) {
        let mk = |v: [f64; 6]| EcParams { s0: v[0], s_h: v[1], s_sum: v[2], s_x: v[3], s_z: v[4], s_i: v[5] };
        let mut up = base;
        up[which] += bump;
        prop_assert!(mk(up).s_out() >= mk(base).s_out());
    }

    #[test]
    fn frame_inverse_sequences(x0 in any::<bool>(), z0 in any::<bool>(), x1 in any::<bool>(), z1 in any::<bool>()) {
        let mut f = PauliFrame::default();
        f.set(0, x0, z0);
        f.set(1, x1, z1);
        let start = f.clone();
        for _ in 0..4 {
            f.propagate(&GateKind::Fourier, &[0]);
        }
        for _ in 0..2 {
            f.propagate(&GateKind::Sum { control: 0, target: 1 }, &[0, 1]);
        }
        prop_assert_eq!(f, start);
    }

    #[test]
    fn shift_propagation_is_linear(
        gates in prop::collection::vec((gate_strategy(), any::<bool>()), 1..12),
        a in prop::array::uniform4(-1.0f64..1.0),
        b in prop::array::uniform4(-1.0f64..1.0),
    ) {
        let run = |v: [f64; 4]| {
            let mut s = ShiftState::new(0);
            s.displace(0, v[0], v[1]);
            s.displace(1, v[2], v[3]);
            for (g, swap) in &gates {
                let (m0, m1) = if *swap { (1, 0) } else { (0, 1) };
                propagate_shift(&mut s, g, &modes_for(g, m0, m1));
            }
            [s.get(0).0, s.get(0).1, s.get(1).0, s.get(1).1]
        };
        let sum = run([a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]]);
        let (ra, rb) = (run(a), run(b));
        for i in 0..4 {
            prop_assert!((sum[i] - ra[i] - rb[i]).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn displacements_compose(seed in any::<u64>(), k in prop::array::uniform4(-40i64..40)) {
        let s = random_state(8, seed, 0.5);
        let two = apply_displacement_grid(&apply_displacement_grid(&s, 0, k[0], k[1]).unwrap(), 0, k[2], k[3]).unwrap();
        let one = apply_displacement_grid(&s, 0, k[0] + k[2], k[1] + k[3]).unwrap();
        prop_assert!((two.norm_sqr() - 1.0).abs() < 1e-12);
        prop_assert!((overlap(&one, &two) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fourier_has_order_four(seed in any::<u64>()) {
        let s = random_state(8, seed, 0.6);
        let mut t = s.clone();
        for _ in 0..4 {
            t = apply_fourier(&t, 0).unwrap();
        }
        prop_assert!((s.inner(&t).unwrap() - 1.0).norm() < 1e-10);
    }

    #[test]
    fn position_round_trip(seed in any::<u64>()) {
        let s = random_state(8, seed, 0.6);
        let back = sss_from_position(&position_from_sss(&s, 8).unwrap()).unwrap();
        prop_assert!((s.inner(&back).unwrap() - 1.0).norm() < 1e-10);
    }

    #[test]
    fn decode_is_a_density(seed in any::<u64>(), r in 0.1f64..0.88) {
        let rho = ideal_decode(&random_state(8, seed, r), 0).unwrap().0;
        prop_assert!((rho[0][0].re + rho[1][1].re - 1.0).abs() < 1e-12);
        prop_assert!((rho[0][1] - rho[1][0].conj()).norm() < 1e-12);
        prop_assert!(rho[0][0].re >= -1e-12 && rho[1][1].re >= -1e-12);
        prop_assert!(rho[0][1].norm_sqr() <= rho[0][0].re * rho[1][1].re + 1e-12);
    }
}
