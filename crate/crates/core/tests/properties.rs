use hetvae::data::{fit_normalizer, split_condition_target, split_sizes, Channel, IrregularSeries};
use hetvae::eval::{interpolation_trace, mean_std, mixture_nll_point, CaseMetrics, EvalMetrics};
use hetvae::model::{reparameterize, Hetvae, HetvaeConfig};
use hetvae::numgrad::Array;
use hetvae::objective::{batch_indices, gaussian_logpdf, kl_diag_standard};
use hetvae::rng::stream;
use hetvae::untan::{softmax_value, UnionTimeSet};
use proptest::prelude::*;

fn series_strategy(max_obs: usize) -> impl Strategy<Value = IrregularSeries> {
    prop::collection::btree_map(0u32..1000, -5.0f64..5.0, 1..=max_obs).prop_map(|pts| {
        let times = pts.keys().map(|&k| k as f64 / 1000.0).collect();
        let values = pts.values().copied().collect();
        IrregularSeries::new("p", vec![Channel::new(times, values)])
    })
}

fn small_model() -> Hetvae {
    let cfg = HetvaeConfig {
        n_ref: 4,
        embed_dim: 8,
        untan_dim: 8,
        latent_dim: 4,
        mlp_width: 8,
        ..HetvaeConfig::default()
    };
    let grid: Vec<f64> = (0..21).map(|i| i as f64 / 20.0).collect();
    Hetvae::new(cfg, UnionTimeSet::uniform(1, &grid), 5).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn kl_is_non_negative(pairs in prop::collection::vec((-4.0f64..4.0, 1e-3f64..10.0), 1..8)) {
        let (mu, var): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assert!(kl_diag_standard(&mu, &var).unwrap() >= 0.0);
    }

    #[test]
    fn kl_vanishes_only_at_the_prior(mu in -2.0f64..2.0, var in 0.1f64..4.0) {
        prop_assume!(mu.abs() > 1e-3 || (var - 1.0).abs() > 1e-3);
        prop_assert!(kl_diag_standard(&[mu], &[var]).unwrap() > 0.0);
        prop_assert_eq!(kl_diag_standard(&[0.0], &[1.0]).unwrap(), 0.0);
    }

    #[test]
    fn logpdf_peaks_at_the_mean(mu in -3.0f64..3.0, var in 0.01f64..5.0, dx in 1e-3f64..2.0) {
        let at = gaussian_logpdf(mu, mu, var).unwrap();
        prop_assert!(at > gaussian_logpdf(mu + dx, mu, var).unwrap());
        prop_assert!((gaussian_logpdf(mu + dx, mu, var).unwrap() - gaussian_logpdf(mu - dx, mu, var).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn mixture_is_symmetric_in_components(
        comps in prop::collection::vec((-3.0f64..3.0, 0.01f64..3.0), 1..6),
        x in -4.0f64..4.0,
        rot in 0usize..6,
    ) {
        let (mu, var): (Vec<f64>, Vec<f64>) = comps.iter().copied().unzip();
        let a = mixture_nll_point(x, &mu, &var).unwrap();
        let mut rotated = comps.clone();
        rotated.rotate_left(rot % comps.len());
        rotated.reverse();
        let (mu2, var2): (Vec<f64>, Vec<f64>) = rotated.into_iter().unzip();
        let b = mixture_nll_point(x, &mu2, &var2).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        // A single repeated component is that Gaussian.
        let single = mixture_nll_point(x, &[mu[0]; 3], &[var[0]; 3]).unwrap();
        prop_assert!((single + gaussian_logpdf(x, mu[0], var[0]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn softmax_value_is_a_convex_combination(
        pairs in prop::collection::vec((-60.0f64..60.0, -10.0f64..10.0), 1..10),
    ) {
        let (scores, values): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let v = softmax_value(&scores, &values).unwrap();
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
    }

    #[test]
    fn reparameterize_with_zero_noise_is_the_mean(
        pairs in prop::collection::vec((-3.0f64..3.0, 1e-3f64..3.0), 1..8),
        eps in -3.0f64..3.0,
    ) {
        let n = pairs.len();
        let (mu, var): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let mu_a = Array::new(vec![n], mu.clone()).unwrap();
        let var_a = Array::new(vec![n], var.clone()).unwrap();
        let z = reparameterize(&mu_a, &var_a, &Array::new(vec![n], vec![0.0; n]).unwrap()).unwrap();
        prop_assert_eq!(z.data(), &mu[..]);
        let z = reparameterize(&mu_a, &var_a, &Array::new(vec![n], vec![eps; n]).unwrap()).unwrap();
        for i in 0..n {
            prop_assert!((z.data()[i] - (mu[i] + var[i].sqrt() * eps)).abs() < 1e-12);
        }
    }

    #[test]
    fn condition_and_target_partition_the_case(case in series_strategy(30), fraction in 0.05f64..0.95, seed in 0u64..1000) {
        let (cond, target) = split_condition_target(&case, fraction, &mut stream(seed, 0)).unwrap();
        let n = case.n_obs();
        prop_assert_eq!(cond.n_obs(), ((fraction * n as f64).ceil() as usize).clamp(1, n));
        prop_assert_eq!(cond.n_obs() + target.n_obs(), n);
        let mut merged: Vec<(u64, u64)> = cond.channels[0].times.iter().zip(&cond.channels[0].values)
            .chain(target.channels[0].times.iter().zip(&target.channels[0].values))
            .map(|(t, x)| (t.to_bits(), x.to_bits()))
            .collect();
        merged.sort_unstable();
        let mut orig: Vec<(u64, u64)> = case.channels[0].times.iter().zip(&case.channels[0].values)
            .map(|(t, x)| (t.to_bits(), x.to_bits()))
            .collect();
        orig.sort_unstable();
        prop_assert_eq!(merged, orig);
    }

    #[test]
    fn split_sizes_cover_every_case(n in 0usize..500) {
        let (train, val, test) = split_sizes(n);
        prop_assert_eq!(train + val + test, n);
        prop_assert_eq!(test, n.div_ceil(5));
    }

    #[test]
    fn each_epoch_visits_every_case_once(n in 1usize..60, b in 1usize..20, seed in 0u64..50) {
        let b = b.min(n);
        let per_epoch = n / b;
        let mut seen = Vec::new();
        for i in 0..per_epoch as u64 {
            let idx = batch_indices(n, b, seed, i);
            prop_assert_eq!(idx.len(), b);
            seen.extend(idx);
        }
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), per_epoch * b);
    }

    #[test]
    fn normalizer_round_trips(cases in prop::collection::vec(series_strategy(12), 2..8)) {
        let cases: Vec<IrregularSeries> = cases.into_iter().enumerate()
            .map(|(i, c)| IrregularSeries::new(format!("c{i}"), c.channels))
            .collect();
        let norm = fit_normalizer(&cases, 0.0).unwrap();
        for c in &cases {
            let back = norm.invert(&norm.apply(c).unwrap()).unwrap();
            for (a, b) in c.channels[0].values.iter().zip(&back.channels[0].values) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            for (a, b) in c.channels[0].times.iter().zip(&back.channels[0].times) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregation_weights_by_observation(
        cases in prop::collection::vec(prop::option::of((0.0f64..50.0, 0.0f64..50.0, 0.0f64..50.0, 1usize..20)), 1..10),
    ) {
        let cms: Vec<Option<CaseMetrics>> = cases.iter().map(|c| c.map(|(a, b, s, n)| CaseMetrics {
            nll_sum: a, abs_sum: b, sq_sum: s, n_targets: n,
        })).collect();
        let m = EvalMetrics::from_cases(0, &cms);
        let scored: Vec<_> = cases.iter().flatten().collect();
        prop_assert_eq!(m.n_cases, scored.len());
        prop_assert_eq!(m.skipped, cases.len() - scored.len());
        if !scored.is_empty() {
            let n: usize = scored.iter().map(|c| c.3).sum();
            let nll: f64 = scored.iter().map(|c| c.0).sum::<f64>() / n as f64;
            prop_assert!((m.nll - nll).abs() < 1e-12);
            prop_assert_eq!(m.n_targets, n);
        }
    }

    #[test]
    fn mean_std_matches_two_pass(xs in prop::collection::vec(-100.0f64..100.0, 1..20)) {
        let (m, s) = mean_std(&xs);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| x * x).sum::<f64>() / n - mean * mean;
        prop_assert!((m - mean).abs() < 1e-9);
        prop_assert!((s * s - var).abs() < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn trace_variance_is_at_least_the_smallest_component(case in series_strategy(10), seed in 0u64..100) {
        let model = small_model();
        let grid = [0.0, 0.3, 0.55, 1.0];
        let samples = 4;
        let trace = interpolation_trace(&model, &case, &grid, samples, &mut stream(seed, 1)).unwrap();
        let pred = model.predict(&case, &grid, samples, &mut stream(seed, 1)).unwrap();
        for q in 0..grid.len() {
            let min_var = (0..samples).map(|s| pred.at(s, q, 0).1).fold(f64::INFINITY, f64::min);
            let (_, sd) = trace.get(q, 0);
            prop_assert!(sd * sd >= min_var * (1.0 - 1e-12));
            prop_assert!(min_var >= hetvae::model::VARIANCE_FLOOR);
        }
    }

    #[test]
    fn observation_order_does_not_change_predictions(case in series_strategy(10), seed in 0u64..100) {
        let model = small_model();
        let c = &case.channels[0];
        let reversed = IrregularSeries::new(
            case.id.clone(),
            vec![Channel::new(c.times.iter().rev().copied().collect(), c.values.iter().rev().copied().collect())],
        );
        let grid = [0.1, 0.7];
        let a = model.predict(&case, &grid, 2, &mut stream(seed, 2)).unwrap();
        let b = model.predict(&reversed, &grid, 2, &mut stream(seed, 2)).unwrap();
        prop_assert_eq!(a, b);
    }
}
