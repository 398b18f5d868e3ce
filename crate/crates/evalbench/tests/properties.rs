use std::path::Path;

use proptest::collection::vec;
use proptest::prelude::*;

use evalbench::active::{
    boltzmann_proposal, enumerate_moments, pool_risk, sample_trajectory, stable_sum, Estimator,
    ProposalKind,
};
use evalbench::cli::{parse_seeds, read_records, summarize, write_records, ExperimentRecord};
use evalbench::geometry::{analytic_cov_recursive, LayerStack};
use evalbench::numcore::{inv_softplus, softplus, RngStream, Tensor};

fn losses_and_affinity() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..=5).prop_flat_map(|n| (vec(0.0f64..10.0, n), vec(0.01f64..1.0, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weighted_estimators_are_unbiased((losses, affinity) in losses_and_affinity(), m_frac in 0.0f64..1.0) {
        let n = losses.len();
        let m = 1 + ((n - 1) as f64 * m_frac) as usize;
        let rule = |acq: &[usize], rem: &[usize]| {
            let w: Vec<f64> = rem.iter().map(|&i| affinity[i] * (1.0 + acq.len() as f64 * affinity[i])).collect();
            let z: f64 = w.iter().sum();
            Ok(w.into_iter().map(|v| v / z).collect())
        };
        let mo = enumerate_moments(&losses, rule, m, &[Estimator::Pure, Estimator::Lure]).unwrap();
        let r = pool_risk(&losses);
        prop_assert!((mo[0].mean - r).abs() < 1e-11, "pure {} vs {r}", mo[0].mean);
        prop_assert!((mo[1].mean - r).abs() < 1e-11, "lure {} vs {r}", mo[1].mean);
        prop_assert!((mo[0].total_probability - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_trajectory_lure_is_the_pool_mean(losses in vec(0.0f64..100.0, 1..60), qs_raw in vec(0.001f64..1.0, 60), seed in any::<u64>()) {
        let n = losses.len();
        let mut order: Vec<usize> = (0..n).collect();
        RngStream::new(seed, 0).shuffle(&mut order);
        let l: Vec<f64> = order.iter().map(|&i| losses[i]).collect();
        let est = Estimator::Lure.estimate(&l, &qs_raw[..n], n).unwrap();
        prop_assert_eq!(est.value, pool_risk(&losses));
    }

    #[test]
    fn uniform_masses_make_lure_equal_r_tilde(losses in vec(0.0f64..100.0, 2..80), m_frac in 0.0f64..1.0) {
        let n = losses.len();
        let m = 1 + ((n - 1) as f64 * m_frac) as usize;
        let qs: Vec<f64> = (0..m).map(|i| 1.0 / (n - i) as f64).collect();
        let lure = Estimator::Lure.estimate(&losses[..m], &qs, n).unwrap().value;
        let tilde = Estimator::RTilde.estimate(&losses[..m], &qs, n).unwrap().value;
        prop_assert_eq!(lure, tilde);
    }

    #[test]
    fn stable_sum_ignores_order(xs in vec(-1e6f64..1e6, 0..50), seed in any::<u64>()) {
        let mut ys = xs.clone();
        RngStream::new(seed, 1).shuffle(&mut ys);
        prop_assert_eq!(stable_sum(&xs), stable_sum(&ys));
    }

    #[test]
    fn boltzmann_masses_are_a_distribution(scores in vec(-5.0f64..5.0, 1..40), log_t in -9.0f64..5.0) {
        let q = boltzmann_proposal(&scores, 10f64.powf(log_t)).unwrap();
        prop_assert!(q.iter().all(|v| *v > 0.0 && v.is_finite()));
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trajectories_never_repeat_a_point(n in 2usize..40, m_frac in 0.0f64..=1.0, kind in 0usize..3, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 2);
        let x = Tensor::matrix(n, 2, rng.normals(2 * n)).unwrap();
        let proposal = [
            ProposalKind::Uniform,
            ProposalKind::EpsilonGreedy { epsilon: 0.1 },
            ProposalKind::DistanceBoltzmann { beta: 1.0 },
        ][kind];
        let m = ((n as f64) * m_frac) as usize;
        let t = sample_trajectory(&x, &proposal, None, m, &mut rng).unwrap();
        let mut seen = t.indices.clone();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), m);
        prop_assert!(t.masses.iter().all(|q| *q > 0.0 && *q <= 1.0));
    }

    #[test]
    fn covariance_table_is_symmetric(dims in vec(1usize..4, 3..6), seed in any::<u64>()) {
        let stack = LayerStack::random(&dims, (0.1, 1.0), &mut RngStream::new(seed, 3)).unwrap();
        let t = analytic_cov_recursive(&stack).unwrap();
        for (a, b, c, d) in t.indices() {
            prop_assert_eq!(t.get(a, b, c, d), t.get(c, d, a, b));
            if (a, b) == (c, d) {
                prop_assert!(t.get(a, b, c, d) >= 0.0);
            }
        }
    }

    #[test]
    fn softplus_round_trips(rho in -20.0f64..40.0) {
        let s = softplus(rho);
        prop_assert!(s > 0.0);
        prop_assert!((inv_softplus(s) - rho).abs() < 1e-9 * rho.abs().max(1.0));
    }

    #[test]
    fn rng_streams_are_reproducible(seed in any::<u64>(), stream in any::<u64>(), tag in any::<u64>()) {
        let a: Vec<u64> = { let mut r = RngStream::new(seed, stream).derive(tag); (0..4).map(|_| r.next_u64()).collect() };
        let b: Vec<u64> = { let mut r = RngStream::new(seed, stream).derive(tag); (0..4).map(|_| r.next_u64()).collect() };
        let c: Vec<u64> = { let mut r = RngStream::new(seed, stream).derive(tag.wrapping_add(1)); (0..4).map(|_| r.next_u64()).collect() };
        prop_assert_eq!(&a, &b);
        prop_assert_ne!(a, c);
    }

    #[test]
    fn records_round_trip_through_csv(values in vec(-1e300f64..1e300, 0..30)) {
        let rows: Vec<ExperimentRecord> = values
            .iter()
            .enumerate()
            .map(|(i, v)| ExperimentRecord::new("e", "m,with comma", "p", i, "x", *v, i as u64 % 3).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_records(&rows, &mut buf).unwrap();
        prop_assert_eq!(read_records(&buf[..], Path::new("t.csv")).unwrap(), rows.clone());
        let s = summarize(&rows);
        prop_assert_eq!(s.iter().map(|r| r.n).sum::<usize>(), rows.len());
    }

    #[test]
    fn seed_ranges_expand(a in 0u64..1000, len in 0u64..50) {
        let b = a + len;
        prop_assert_eq!(parse_seeds(&format!("{a}..{b}")).unwrap().len() as u64, len);
        prop_assert_eq!(parse_seeds(&format!("{a}..={b}")).unwrap().len() as u64, len + 1);
    }
}
