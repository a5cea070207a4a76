use fedquant::quant::{
    self, build_spec, dequantize, level_for_demand, quantize, ErrorDemand, QuantizedPayload,
    WeightVector, HEADER_BYTES,
};
use fedquant::rng::stream;
use fedquant::Error;
use proptest::prelude::*;
use rand::Rng;

fn weights() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1e3f64..1e3, 1..200)
}

fn grid(lo: f64, hi: f64, levels: u32) -> Vec<f64> {
    (0..levels)
        .map(|i| lo + (hi - lo) * f64::from(i) / f64::from(levels - 1))
        .collect()
}

proptest! {
    #[test]
    fn codec_round_trip(w in weights(), bits in 1u32..=16, seed: u64) {
        let w = WeightVector::new(w).unwrap();
        let spec = build_spec(&w, 1 << bits).unwrap();
        let p = quantize(&w, &spec, seed);
        let bytes = p.to_bytes();
        prop_assert_eq!(bytes.len(), HEADER_BYTES + (w.len() * bits as usize).div_ceil(8));
        let back = QuantizedPayload::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &p);
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(p.payload_bits(), w.len() as u64 * u64::from(bits));
    }

    #[test]
    fn dequantized_values_are_adjacent_grid_points(w in weights(), bits in 1u32..=12, seed: u64) {
        let w = WeightVector::new(w).unwrap();
        let levels = 1u32 << bits;
        let spec = build_spec(&w, levels).unwrap();
        let q = dequantize(&quantize(&w, &spec, seed)).unwrap();
        let m = w.max_abs();
        let g = grid(-m, m, levels);
        let step = 2.0 * m / f64::from(levels - 1);
        for (x, y) in w.as_slice().iter().zip(q.as_slice()) {
            prop_assert!((x - y).abs() <= step * (1.0 + 1e-9));
            prop_assert!(g.iter().any(|p| (p - y).abs() <= 1e-9 * m.max(1.0)));
        }
    }

    #[test]
    fn same_seed_same_payload(w in weights(), seed: u64) {
        let w = WeightVector::new(w).unwrap();
        let spec = build_spec(&w, 64).unwrap();
        prop_assert_eq!(quantize(&w, &spec, seed).to_bytes(), quantize(&w, &spec, seed).to_bytes());
    }

    #[test]
    fn level_is_smallest_power_of_two_above_target(log_delta in -3.0f64..3.0, log_tol in -9.0f64..-1.0) {
        let (delta, tol) = (10f64.powf(log_delta), 10f64.powf(log_tol));
        let l = level_for_demand(ErrorDemand::new(delta, tol).unwrap()).unwrap();
        let target = (delta / (2.0 * tol)).sqrt();
        let mut want = 2u64;
        while (want as f64) < target {
            want *= 2;
        }
        prop_assert_eq!(u64::from(l.levels), want);
        prop_assert_eq!(1u64 << l.bits, want);
    }
}

/// Monte Carlo error against `sum (x - g_l)(g_{l+1} - x)`.
#[test]
fn mean_squared_error_matches_analytic_variance() {
    let mut rng = stream(31, &[0]);
    for levels in [2u32, 8, 64] {
        let vals: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w = WeightVector::new(vals.clone()).unwrap();
        let spec = build_spec(&w, levels).unwrap();
        let m = w.max_abs();
        let g = grid(-m, m, levels);
        let analytic: f64 = vals
            .iter()
            .map(|&x| {
                let l = g
                    .iter()
                    .rposition(|&p| p <= x)
                    .unwrap()
                    .min(levels as usize - 2);
                (x - g[l]) * (g[l + 1] - x)
            })
            .sum();
        let trials = 20_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for t in 0..trials {
            let q = dequantize(&quantize(&w, &spec, t)).unwrap();
            let e = w.squared_distance(&q);
            sum += e;
            sum_sq += e * e;
        }
        let mean = sum / trials as f64;
        let se = ((sum_sq / trials as f64 - mean * mean) / trials as f64).sqrt();
        assert!(
            (mean - analytic).abs() <= 5.0 * se + 1e-12,
            "L={levels}: {mean} vs {analytic} (se {se})"
        );
        let report = quant::empirical_error_report(&w, &spec, 5000, 9);
        assert!((report.mse - analytic).abs() <= 0.1 * analytic);
        assert!(report.mse <= vals.len() as f64 * spec.step().powi(2) / 4.0 * 1.05);
    }
}

#[test]
fn bias_report_is_small_for_random_vectors() {
    let mut rng = stream(3, &[1]);
    let vals: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = WeightVector::new(vals).unwrap();
    let spec = build_spec(&w, 16).unwrap();
    let b = quant::bias_report(&w, &spec, 20_000, 4);
    assert!(b.aggregate_z.abs() < 4.0);
    // Of 50 coordinates, the largest |z| stays well inside the normal tail.
    assert!(b.max_abs_z() < 5.0);
}

#[test]
fn corrupted_payloads_are_rejected() {
    let w = WeightVector::new(vec![0.5, -0.25, 1.0]).unwrap();
    let spec = build_spec(&w, 8).unwrap();
    let bytes = quantize(&w, &spec, 1).to_bytes();
    assert!(matches!(
        QuantizedPayload::from_bytes(&bytes[..bytes.len() - 1]),
        Err(Error::CorruptPayload(_))
    ));
    // 3 params x 3 bits = 9 bits; the top 7 bits of the last byte are padding.
    let mut padded = bytes.clone();
    *padded.last_mut().unwrap() |= 0x80;
    assert!(matches!(
        QuantizedPayload::from_bytes(&padded),
        Err(Error::CorruptPayload(_))
    ));
    let mut extra = bytes;
    extra.push(0);
    assert!(QuantizedPayload::from_bytes(&extra).is_err());
}
