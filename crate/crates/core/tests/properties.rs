use ndarray::Array2;
use proptest::prelude::*;

use warmstart::data::{self, gen_synthetic, parse_csv, SyntheticSpec};
use warmstart::nn::{self, init_params, Activation, NetworkSpec};
use warmstart::reinit::{scale_params, shrink_perturb, Initializer, ReinitScope, ShrinkPerturbConfig};
use warmstart::stats;

fn activation() -> impl Strategy<Value = Activation> {
    prop_oneof![
        Just(Activation::Relu),
        Just(Activation::Tanh),
        Just(Activation::Sigmoid),
        Just(Activation::None)
    ]
}

fn spec() -> impl Strategy<Value = NetworkSpec> {
    (prop::collection::vec(1usize..9, 2..6), activation(), any::<bool>()).prop_map(|(mut widths, act, bias)| {
        let last = widths.len() - 1;
        widths[last] = widths[last].max(2);
        NetworkSpec::new(widths, act, bias).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shrink_perturb_endpoints(spec in spec(), seed in any::<u64>(), fresh_seed in any::<u64>(), s in 0.1f64..3.0) {
        let trained = scale_params(&init_params(&spec, seed), s).unwrap();
        let warm = shrink_perturb(&trained, &ShrinkPerturbConfig::new(1.0, 0.0), fresh_seed).unwrap();
        prop_assert_eq!(&warm, &trained);
        let fresh = shrink_perturb(&trained, &ShrinkPerturbConfig::new(0.0, 1.0), fresh_seed).unwrap();
        prop_assert_eq!(fresh, init_params(&spec, fresh_seed));
    }

    #[test]
    fn shrink_perturb_is_affine(spec in spec(), seed in any::<u64>(), lambda in 0.0f64..1.0, gamma in 0.0f64..0.5) {
        let prev = init_params(&spec, seed);
        let noise = init_params(&spec, seed ^ 0x55);
        let out = shrink_perturb(&prev, &ShrinkPerturbConfig::new(lambda, gamma), seed ^ 0x55).unwrap();
        for ((o, p), n) in out.flatten().iter().zip(prev.flatten()).zip(noise.flatten()) {
            prop_assert!((o - (lambda * p + gamma * n)).abs() <= 1e-15 * (1.0 + o.abs()));
        }
    }

    #[test]
    fn last_layer_scope_leaves_earlier_layers(spec in spec(), seed in any::<u64>()) {
        let prev = init_params(&spec, seed);
        let cfg = ShrinkPerturbConfig { lambda: 0.5, noise_scale: 0.1, scope: ReinitScope::LastLayerOnly };
        let out = shrink_perturb(&prev, &cfg, seed.wrapping_add(1)).unwrap();
        let l = prev.layers.len();
        prop_assert_eq!(&out.layers[..l - 1], &prev.layers[..l - 1]);
    }

    #[test]
    fn random_initializer_ignores_previous(spec in spec(), a in any::<u64>(), b in any::<u64>()) {
        let x = Initializer::Random.apply(&init_params(&spec, a), 9).unwrap();
        let y = Initializer::Random.apply(&init_params(&spec, b), 9).unwrap();
        prop_assert_eq!(x, y);
    }

    #[test]
    fn relu_no_bias_logits_scale(depth in 1usize..5, seed in any::<u64>(), lambda in 0.05f64..4.0) {
        let mut widths = vec![4];
        widths.extend(std::iter::repeat_n(6, depth - 1));
        widths.push(3);
        let spec = NetworkSpec::new(widths, Activation::Relu, false).unwrap();
        let params = init_params(&spec, seed);
        let x = Array2::from_shape_fn((16, 4), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0);
        let base = nn::logits(&params, x.view()).unwrap();
        let out = nn::logits(&scale_params(&params, lambda).unwrap(), x.view()).unwrap();
        let f = lambda.powi(depth as i32);
        let scale = base.iter().fold(0.0f64, |m, v| m.max(v.abs())) * f;
        for (a, b) in out.iter().zip(base.iter()) {
            prop_assert!((a - f * b).abs() <= 1e-10 * scale.max(f64::MIN_POSITIVE));
        }
    }

    #[test]
    fn softmax_gradient_rows_sum_to_zero(logits in prop::collection::vec(-30.0f64..30.0, 12), beta in 0.0f64..1.0) {
        let z = Array2::from_shape_vec((3, 4), logits).unwrap();
        let (loss, d) = nn::softmax_xent(&z, &[0, 3, 1], beta).unwrap();
        prop_assert!(loss.is_finite());
        for row in d.rows() {
            prop_assert!(row.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn holdout_partitions_indices(n in 3usize..400, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let n_val = (frac * n as f64).round() as usize;
        prop_assume!(n_val > 0 && n_val < n);
        let (train, val) = data::holdout_indices(n, frac, seed).unwrap();
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(!train.is_empty() && !val.is_empty());
    }

    #[test]
    fn stream_rounds_partition_training_set(n in 1usize..300, k in 1usize..50, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let train: Vec<usize> = (100..100 + n).collect();
        let stream = data::make_stream(&train, k, seed).unwrap();
        let mut seen: Vec<usize> = stream.rounds.iter().flatten().copied().collect();
        prop_assert!(stream.rounds.iter().rev().skip(1).all(|r| r.len() == k));
        seen.sort_unstable();
        prop_assert_eq!(seen, train);
        prop_assert_eq!(stream.full_rounds(), n / k);
    }

    #[test]
    fn minibatches_cover_each_index_once(n in 1usize..200, b in 1usize..64, seed in any::<u64>(), epoch in 0u64..10) {
        let idx: Vec<usize> = (0..n).map(|i| i * 3).collect();
        let batches = data::minibatches(&idx, b, seed, epoch);
        prop_assert_eq!(batches.len(), n.div_ceil(b));
        let mut flat: Vec<usize> = batches.concat();
        flat.sort_unstable();
        prop_assert_eq!(flat, idx);
    }

    #[test]
    fn csv_round_trip_is_lossless(n in 1usize..60, d in 1usize..6, seed in any::<u64>()) {
        let data = gen_synthetic(&SyntheticSpec::gaussian_mixture(n, d, 3, 0.2, seed)).unwrap();
        let back = parse_csv(&data.to_csv_string(), false, "mem").unwrap();
        prop_assert_eq!(back.features, data.features);
        prop_assert_eq!(back.labels, data.labels);
    }

    #[test]
    fn ranks_sum_and_spearman_bounds(xs in prop::collection::vec(-5i32..5, 2..40)) {
        let xs: Vec<f64> = xs.into_iter().map(f64::from).collect();
        let n = xs.len() as f64;
        let r = stats::ranks(&xs);
        prop_assert!((r.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
        let ys: Vec<f64> = (0..xs.len()).map(|i| i as f64).collect();
        if let Some(rho) = stats::spearman(&xs, &ys) {
            prop_assert!((-1.0..=1.0).contains(&rho));
        }
    }
}
