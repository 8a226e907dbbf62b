mod common;

use std::collections::BTreeMap;

use common::{regression, rng};
use gdkl::gp::{softplus, softplus_inverse, Dataset};
use gdkl::harness::{aggregate, ece_mce, kfold, normalize, read_csv, write_csv, FoldRecord};
use gdkl::likelihoods::{dirichlet_transform, predictive_class_probs};
use gdkl::objectives::kl_gaussians;
use gdkl::train::{gdkl_loss, GdklModel, TrainConfig};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn gaussian() -> impl Strategy<Value = (f64, f64)> {
    (-5.0..5.0f64, 1e-3..10.0f64)
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_zero_on_the_diagonal(q in gaussian(), p in gaussian()) {
        prop_assert!(kl_gaussians(q, p).unwrap() >= -1e-12);
        prop_assert!(kl_gaussians(q, q).unwrap().abs() < 1e-12);
    }

    #[test]
    fn softplus_round_trips(x in -30.0..30.0f64) {
        let y = softplus(x);
        prop_assert!(y > 0.0);
        prop_assert!((softplus_inverse(y) - x).abs() < 1e-9 * x.abs().max(1.0));
    }

    #[test]
    fn calibration_errors_are_ordered_and_bounded(
        rows in prop::collection::vec((prop::collection::vec(0.01..1.0f64, 3), 0usize..3), 1..60),
        bins in 1usize..20,
    ) {
        let n = rows.len();
        let probs = DMatrix::from_fn(n, 3, |i, c| rows[i].0[c] / rows[i].0.iter().sum::<f64>());
        let labels: Vec<usize> = rows.iter().map(|r| r.1).collect();
        let cal = ece_mce(&probs, &labels, bins).unwrap();
        prop_assert!(cal.ece <= cal.mce + 1e-12);
        prop_assert!((0.0..=1.0).contains(&cal.ece) && (0.0..=1.0).contains(&cal.mce));
        prop_assert_eq!(cal.bins.iter().map(|b| b.count).sum::<usize>(), n);
    }

    #[test]
    fn normalization_round_trips(seed in 0u64..1000, n in 2usize..40, shift in -100.0..100.0f64, scale in 0.01..100.0f64) {
        let base = regression(n, 2, 0.5, seed);
        let data = Dataset::new(base.inputs.map(|v| v * scale + shift), base.targets.map(|v| v * scale + shift)).unwrap();
        let (train, _, scaler) = normalize(&data, &[]);
        for col in train.inputs.column_iter().chain(train.targets.column_iter()) {
            let mean = col.mean();
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            prop_assert!(mean.abs() <= 1e-10);
            prop_assert!((sd - 1.0).abs() <= 1e-10);
        }
        let back = scaler.inverse_targets(&train.targets);
        for (a, b) in back.iter().zip(data.targets.iter()) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn kfold_partitions_every_index(n in 2usize..200, k in 2usize..12, seed in 0u64..1000) {
        prop_assume!(k <= n);
        let folds = kfold(n, k, &mut rng(seed)).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut seen = vec![0; n];
        for f in &folds {
            prop_assert!(f.test.len() == n / k || f.test.len() == n / k + 1);
            prop_assert_eq!(f.train.len() + f.test.len(), n);
            for &i in &f.test {
                seen[i] += 1;
                prop_assert!(!f.train.contains(&i));
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn aggregate_obeys_leave_one_out(values in prop::collection::vec(-50.0..50.0f64, 2..20), drop in 0usize..20) {
        let drop = drop % values.len();
        let record = |fold: usize, v: f64| FoldRecord {
            seed: 0,
            fold,
            train_size: 1,
            test_size: 1,
            metrics: BTreeMap::from([("rmse".to_string(), v)]),
            calibration: None,
            error: None,
            wall_clock_seconds: None,
        };
        let all: Vec<FoldRecord> = values.iter().enumerate().map(|(i, &v)| record(i, v)).collect();
        let mut rest = all.clone();
        rest.remove(drop);
        let n = values.len() as f64;
        let full = aggregate(&all)["rmse"].mean;
        let loo = aggregate(&rest)["rmse"].mean;
        prop_assert!((loo - (n * full - values[drop]) / (n - 1.0)).abs() < 1e-9);
    }

    #[test]
    fn class_probabilities_are_normalized(
        latent in prop::collection::vec(-8.0..8.0f64, 4 * 3),
        variance in prop::collection::vec(1e-4..5.0f64, 4 * 3),
        seed in 0u64..100,
    ) {
        let post = gdkl::gp::GaussianPosterior {
            mean: DMatrix::from_vec(4, 3, latent),
            variance: DMatrix::from_vec(4, 3, variance),
        };
        let p = predictive_class_probs(&post, 64, &mut rng(seed)).unwrap();
        for row in p.row_iter() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn dirichlet_targets_rank_the_true_class_first(labels in prop::collection::vec(0usize..4, 1..30)) {
        let t = dirichlet_transform(&labels, 4, 0.01).unwrap();
        for (i, &l) in labels.iter().enumerate() {
            for c in 0..4 {
                if c != l {
                    prop_assert!(t.targets[(i, l)] > t.targets[(i, c)]);
                    prop_assert!(t.noise_var[(i, l)] < t.noise_var[(i, c)]);
                }
            }
        }
    }

    #[test]
    fn csv_round_trips_exactly(rows in prop::collection::vec(prop::collection::vec(-1e6..1e6f64, 3), 1..20)) {
        let n = rows.len();
        let data = Dataset::new(
            DMatrix::from_fn(n, 2, |i, j| rows[i][j]),
            DMatrix::from_fn(n, 1, |i, _| rows[i][2]),
        ).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &data).unwrap();
        let back = read_csv(buf.as_slice(), 1).unwrap();
        prop_assert_eq!(back.inputs, data.inputs);
        prop_assert_eq!(back.targets, data.targets);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gdkl_loss_is_monotone_in_beta(b1 in 0.0..5.0f64, b2 in 0.0..5.0f64, seed in 0u64..50) {
        let config = TrainConfig {
            hidden: vec![6, 2],
            pretrain_steps: 20,
            seed,
            ..TrainConfig::default()
        };
        let mut model = GdklModel::init(&config, regression(16, 2, 0.2, seed)).unwrap();
        let idx1: Vec<usize> = (0..8).collect();
        let idx2: Vec<usize> = (8..16).collect();
        let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        let a = gdkl_loss(&mut model, &idx1, &idx2, lo).unwrap().value;
        let b = gdkl_loss(&mut model, &idx1, &idx2, hi).unwrap().value;
        prop_assert!(b >= a - 1e-12);
    }
}
