use proptest::prelude::*;
use spqr_core::fixtures::{outlier_fixture, FixtureSpec};
use spqr_core::format::{decode, encode, measure_actual_bits, read_spqr, write_spqr};
use spqr_core::hessian::HessianAccumulator;
use spqr_core::kernel::{dequantize_full, matvec, naive_matvec, relative_l2};
use spqr_core::solver::{
    count_outliers, prepare, quantize_layer, SolverConfig, SolverError, MAX_OUTLIER_RATE, RAW_STATS_BITS,
};
use spqr_core::tensor_io::{load_tensor, save_tensor, DenseTensor};

fn small_spec(rows: usize, cols: usize) -> FixtureSpec {
    FixtureSpec {
        rows,
        cols,
        outlier_rate: 0.01,
        outlier_sigma: 20.0,
        samples: 64,
        factors: 3,
        loading: 0.5,
    }
}

fn config_strategy() -> impl Strategy<Value = SolverConfig> {
    (
        2u8..=4,
        prop::sample::select(vec![2u8, 3, RAW_STATS_BITS]),
        prop::sample::select(vec![2u8, 3, RAW_STATS_BITS]),
        prop::sample::select(vec![3usize, 4, 8, 16]),
        prop::sample::select(vec![2usize, 5, 16]),
        prop::sample::select(vec![0.3, 1.0, f64::INFINITY]),
        any::<bool>(),
    )
        .prop_map(|(wbits, sbits, zbits, beta1, beta2, tau, act_order)| SolverConfig {
            wbits,
            sbits,
            zbits,
            beta1,
            beta2,
            tau,
            act_order,
            outliers_enabled: tau.is_finite(),
            ..SolverConfig::default()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn solver_outputs_are_self_consistent(
        seed in 0u64..1000,
        rows in 2usize..40,
        cols in 2usize..40,
        config in config_strategy(),
    ) {
        let fx = outlier_fixture(seed, &small_spec(rows, cols));
        let out = match quantize_layer(&fx.weight, &fx.hessian, &config) {
            Ok(out) => out,
            Err(SolverError::OutlierCapExceeded { rate, .. }) => {
                prop_assert!(rate > MAX_OUTLIER_RATE);
                return Ok(());
            }
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        let t = &out.tensor;
        prop_assert!(t.codes.codes.iter().all(|&c| (c as u32) < (1u32 << config.wbits)));
        prop_assert!(t.outliers.rate() <= MAX_OUTLIER_RATE);
        prop_assert_eq!(dequantize_full(t), out.reconstruction.clone());
        prop_assert!(out.sensitivity.iter().all(|s| s.is_finite() && *s >= 0.0));

        let bytes = encode(t).unwrap();
        prop_assert_eq!(&decode(&bytes).unwrap(), t);
        prop_assert_eq!(measure_actual_bits(t).total_bytes, bytes.len());

        let x: Vec<f32> = (0..cols).map(|j| ((j * 7 + 3) % 11) as f32 - 5.0).collect();
        let tiled = matvec(t, &x).unwrap();
        let naive = naive_matvec(t, &x).unwrap();
        prop_assert!(relative_l2(&tiled, &naive) <= 1e-6);
    }

    #[test]
    fn split_calibration_matches_single_pass(
        seed in 0u64..1000,
        n in 1usize..12,
        a in 1usize..20,
        b in 1usize..20,
    ) {
        let fx = outlier_fixture(seed, &FixtureSpec { rows: 1, cols: n, samples: a + b, ..small_spec(1, n) });
        let x = &fx.inputs;
        let slab = |lo: usize, hi: usize| {
            let data = (0..n).flat_map(|j| x.row(j)[lo..hi].to_vec()).collect();
            DenseTensor::new(n, hi - lo, data).unwrap()
        };
        let mut first = HessianAccumulator::new(n);
        first.accumulate(&slab(0, a)).unwrap();
        let mut second = HessianAccumulator::new(n);
        second.accumulate(&slab(a, a + b)).unwrap();
        first.merge(&second).unwrap();
        prop_assert_eq!(first.samples_seen(), a + b);
        for (u, v) in first.hessian().iter().zip(fx.hessian.hessian()) {
            prop_assert!((u - v).abs() <= 1e-9 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn outlier_count_is_monotone_in_tau(seed in 0u64..1000) {
        let fx = outlier_fixture(seed, &small_spec(32, 32));
        let config = SolverConfig::default();
        let prepared = prepare(&fx.hessian, &config).unwrap();
        let counts: Vec<usize> = [0.1, 0.3, 0.5, 0.9]
            .iter()
            .map(|&tau| {
                count_outliers(&fx.weight, &fx.hessian, &prepared, &SolverConfig { tau, ..config.clone() }).unwrap()
            })
            .collect();
        prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{:?}", counts);
    }
}

#[test]
fn files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let fx = outlier_fixture(11, &small_spec(20, 24));
    save_tensor(&fx.weight, dir.path().join("w.dtns")).unwrap();
    assert_eq!(load_tensor(dir.path().join("w.dtns")).unwrap(), fx.weight);

    let config = SolverConfig { tau: 1.0, ..SolverConfig::default() };
    let out = quantize_layer(&fx.weight, &fx.hessian, &config).unwrap();
    let path = dir.path().join("w.spqr");
    write_spqr(&out.tensor, &path).unwrap();
    let back = read_spqr(&path).unwrap();
    assert_eq!(back, out.tensor);
    assert_eq!(dequantize_full(&back), out.reconstruction);
}

#[test]
fn tuned_run_flags_planted_weights() {
    let fx = outlier_fixture(5, &FixtureSpec::default());
    let config = SolverConfig {
        target_outlier_rate: Some(0.015),
        ..SolverConfig::default()
    };
    let out = quantize_layer(&fx.weight, &fx.hessian, &config).unwrap();
    assert!(out.report.outlier_rate <= 0.015);
    let tau = out.report.tau.unwrap();
    assert!((0.1..=1.0).contains(&tau));
    let flagged = fx
        .planted
        .iter()
        .filter(|&&(r, c)| out.tensor.outliers.contains(r, c))
        .count();
    assert!(flagged * 10 >= fx.planted.len() * 9, "{flagged}/{}", fx.planted.len());
}

/// The example in docs/format.md.
#[test]
fn documented_example_bytes() {
    #[rustfmt::skip]
    let w = DenseTensor::new(4, 8, vec![
        0.0, 1.0, 2.0, 3.0, 0.5, 1.5, 2.5, 1.0,
        -1.0, 0.5, 2.0, 1.0, 0.0, -0.5, 40.0, 1.5,
        0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 0.5, 0.0,
        -2.0, -1.0, 0.0, 1.0, 2.0, 1.0, 0.0, -1.0,
    ])
    .unwrap();
    let h: Vec<f64> = (0..64).map(|k| if k % 9 == 0 { 2.0 } else { 0.0 }).collect();
    let acc = HessianAccumulator::from_hessian(8, h, 1).unwrap();
    let config = SolverConfig {
        wbits: 2,
        sbits: 3,
        zbits: 3,
        beta1: 8,
        beta2: 4,
        tau: 0.5,
        ..SolverConfig::default()
    };
    let out = quantize_layer(&w, &acc, &config).unwrap();
    let bytes = encode(&out.tensor).unwrap();
    assert_eq!(bytes.len(), 100);
    assert_eq!(
        bytes[56..],
        [
            0x9e, 0x2b, 0xb4, 0xcb, 0xdb, 0x32, 0x00, 0x00, 0x09, 0x0e, 0x28, 0x0e, 0xe4, 0x79, 0xb8, 0xf5,
            0x94, 0x1e, 0x94, 0x5b, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0x06, 0x00,
            0xc4, 0x50,
        ]
    );
    assert_eq!(measure_actual_bits(&out.tensor).bits_per_param, 11.0);
}

#[test]
fn tuning_reports_an_unreachable_target() {
    let spec = FixtureSpec { outlier_rate: 0.01, ..FixtureSpec::default() };
    let fx = outlier_fixture(0, &spec);
    let config = SolverConfig {
        target_outlier_rate: Some(0.01),
        ..SolverConfig::default()
    };
    match quantize_layer(&fx.weight, &fx.hessian, &config) {
        Err(SolverError::TargetUnreachable { target, achieved }) => {
            assert_eq!(target, 0.01);
            assert!(achieved > 0.01 && achieved < MAX_OUTLIER_RATE);
        }
        other => panic!("expected TargetUnreachable, got {other:?}"),
    }
}

#[test]
fn tuning_smooth_weights_stays_within_target() {
    let spec = FixtureSpec { outlier_rate: 0.0, ..FixtureSpec::default() };
    let fx = outlier_fixture(1, &spec);
    let config = SolverConfig {
        target_outlier_rate: Some(0.01),
        ..SolverConfig::default()
    };
    let out = quantize_layer(&fx.weight, &fx.hessian, &config).unwrap();
    assert!(out.report.outlier_rate <= 0.01);
    let tau = out.report.tau.unwrap();
    let below = SolverConfig { tau: tau - 0.05, target_outlier_rate: None, ..config };
    let prepared = prepare(&fx.hessian, &below).unwrap();
    let count = count_outliers(&fx.weight, &fx.hessian, &prepared, &below).unwrap();
    assert!(count as f64 / (256.0 * 256.0) > 0.01);
}
