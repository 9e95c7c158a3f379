mod oracles;

use std::f64::consts::{PI, TAU};

use kinebench::signal::{resample_linear, ButterworthLowpass, TimeSeries};
use proptest::prelude::*;

fn signal(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0..10.0f64, len)
}

fn filter() -> impl Strategy<Value = ButterworthLowpass> {
    (prop::sample::select(vec![2usize, 4, 6]), 50.0..250.0f64, 0.02..0.4f64)
        .prop_map(|(order, rate, frac)| ButterworthLowpass::design(order, frac * rate, rate).unwrap())
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn filtfilt_is_linear(f in filter(), x in signal(120), y in signal(120), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let lhs = f.filtfilt(&mix);
        let (fx, fy) = (f.filtfilt(&x), f.filtfilt(&y));
        for i in 0..lhs.len() {
            prop_assert!((lhs[i] - (a * fx[i] + b * fy[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn filtfilt_does_not_add_energy(f in filter(), x in signal(200)) {
        prop_assert!(energy(&f.filtfilt(&x)) <= energy(&x) * (1.0 + 1e-12));
    }

    #[test]
    fn band_limited_signal_has_zero_lag(
        amps in prop::collection::vec(0.2..2.0f64, 3),
        freqs in prop::collection::vec(0.3..4.0f64, 3),
        phases in prop::collection::vec(0.0..TAU, 3),
    ) {
        let rate = 100.0;
        let f = ButterworthLowpass::design(4, 12.0, rate).unwrap();
        let x: Vec<f64> = (0..600)
            .map(|i| {
                let t = i as f64 / rate;
                (0..3).map(|k| amps[k] * (2.0 * PI * freqs[k] * t + phases[k]).sin()).sum()
            })
            .collect();
        let y = f.filtfilt(&x);
        let xcorr = |lag: i64| -> f64 {
            let shifted = |i: usize| y[(i as i64 + lag) as usize];
            let dot: f64 = (100..500).map(|i| x[i] * shifted(i)).sum();
            let norm: f64 = (100..500).map(|i| shifted(i) * shifted(i)).sum();
            dot / norm.sqrt()
        };
        let best = (-20..=20).max_by(|a, b| xcorr(*a).total_cmp(&xcorr(*b))).unwrap();
        prop_assert_eq!(best, 0);
    }

    #[test]
    fn magnitude_matches_analytic_response(f in filter(), frac in 0.0..0.49f64) {
        let freq = frac * f.rate();
        let single = f.magnitude(freq);
        let dual = oracles::butterworth_dual_pass_gain(f.order(), f.cutoff(), f.rate(), freq);
        prop_assert!((single * single - dual).abs() < 1e-9, "{} vs {}", single * single, dual);
    }

    #[test]
    fn upsample_then_downsample_is_identity(
        rate in prop::sample::select(vec![30.0, 50.0, 60.0, 100.0, 120.0]),
        slope in -5.0..5.0f64,
        offset in -5.0..5.0f64,
        n in 2usize..200,
    ) {
        let ramp: Vec<f64> = (0..n).map(|i| offset + slope * i as f64 / rate).collect();
        let flat = vec![offset; n];
        let ts = TimeSeries::from_columns(rate, vec!["ramp".into(), "flat".into()], &[ramp.clone(), flat.clone()]).unwrap();
        let back = resample_linear(&resample_linear(&ts, 2.0 * rate).unwrap(), rate).unwrap();
        prop_assert_eq!(back.frame_count(), n);
        for (col, orig) in back.columns().iter().zip([&ramp, &flat]) {
            for (a, b) in col.iter().zip(orig.iter()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn dc_cutoff_and_stopband_gains() {
    let rate = 200.0;
    let cutoff = 10.0;
    let f = ButterworthLowpass::design(4, cutoff, rate).unwrap();

    let dc = f.filtfilt(&vec![3.5; 400]);
    assert!(dc.iter().all(|v| (v / 3.5 - 1.0).abs() < 1e-9));

    let n = 4000;
    for (freq, expect, tol) in [(cutoff, 0.5, 0.005), (4.0 * cutoff, 0.0, 1e-3)] {
        let x: Vec<f64> = (0..n).map(|i| (2.0 * PI * freq * i as f64 / rate).sin()).collect();
        let gain = oracles::sinusoid_amplitude(&f.filtfilt(&x), rate, freq, 500..n - 500);
        assert!((gain - expect).abs() < tol, "{freq} Hz: gain {gain}");
        let analytic = oracles::butterworth_dual_pass_gain(4, cutoff, rate, freq);
        assert!((gain - analytic).abs() < 1e-3, "{freq} Hz: measured {gain}, analytic {analytic}");
    }
}
