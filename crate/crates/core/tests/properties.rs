use mixdiff::clustering::{clamp_inverse, set_partitions, ClusteringFunction, ComponentEstimate, PartitionPair, oracle_thresholds};
use mixdiff::evaluation::{kl_gaussian, wasserstein1_sorted};
use mixdiff::io::{read_samples_csv, read_samples_gmms, write_samples_csv, write_samples_gmms, ArtifactHeader};
use mixdiff::linalg::sym_op_norm;
use mixdiff::mixture::{random_covariance, random_mixture, score_gap, GaussianMixture};
use mixdiff::parallel::{add_into, chunked_reduce};
use mixdiff::rng::SeedTree;
use mixdiff::sampler::{build_schedule, reverse_step_with_noise, RhoMode};
use mixdiff::score_model::{feature_count, FeatureMap};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn mixture_from(seed: u64, d: usize, k: usize) -> GaussianMixture {
    random_mixture(d, k, 0.5, 2.0, 3.0, &mut SeedTree::new(seed).rng())
}

fn binomial(n: u64, r: u64) -> u64 {
    (1..=r).fold(1, |acc, i| acc * (n - r + i) / i)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn posterior_is_a_distribution(seed in any::<u64>(), d in 1usize..5, k in 1usize..4, x in prop::collection::vec(-6.0f64..6.0, 4)) {
        let mix = mixture_from(seed, d, k);
        let p = mix.posterior(&x[..d]);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noising_composes(seed in any::<u64>(), s in 0.0f64..2.0, t in 0.0f64..2.0) {
        let mix = mixture_from(seed, 3, 2);
        let two = mix.noised(s).noised(t);
        let one = mix.noised(s + t);
        for (a, b) in two.components().iter().zip(one.components()) {
            prop_assert!((a.mean() - b.mean()).amax() < 1e-12);
            prop_assert!((a.covariance() - b.covariance()).amax() < 1e-12);
        }
    }

    #[test]
    fn noised_covariance_stays_in_band(seed in any::<u64>(), t in 0.0f64..5.0) {
        let mix = mixture_from(seed, 3, 2).noised(t);
        for c in mix.components() {
            let eig = c.covariance().clone().symmetric_eigenvalues();
            prop_assert!(eig.min() >= 0.5 - 1e-12 && eig.max() <= 2.0 + 1e-12);
        }
    }

    #[test]
    fn restricting_to_everything_changes_nothing(seed in any::<u64>(), k in 1usize..4, x in prop::collection::vec(-5.0f64..5.0, 2)) {
        let mix = mixture_from(seed, 2, k);
        let all: Vec<usize> = (0..k).collect();
        prop_assert!(score_gap(&mix, &all, &x).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn schedule_meets_step_invariant(horizon in 1.5f64..12.0, delta in 1e-3f64..0.5, half in 2usize..256) {
        let n = 2 * half;
        if let Ok(s) = build_schedule(horizon, delta, n, None) {
            prop_assert_eq!(s.times.len(), n + 1);
            prop_assert_eq!(s.times[0], 0.0);
            prop_assert!((s.times[n] - (horizon - delta)).abs() < 1e-12);
            prop_assert!(s.times.windows(2).all(|w| w[1] > w[0]));
            prop_assert!(s.validate().is_ok());
            prop_assert!(s.query_times().iter().all(|&q| q >= delta - 1e-12 && q <= horizon));
        }
    }

    #[test]
    fn clamped_inverse_is_bounded(seed in any::<u64>(), alpha in 0.1f64..2.0) {
        let mut rng = SeedTree::new(seed).rng();
        let q = random_covariance(4, 0.01, 3.0, &mut rng);
        let k = clamp_inverse(&q, alpha);
        prop_assert!(sym_op_norm(&k) <= 2.0 / alpha * (1.0 + 1e-12));
    }

    #[test]
    fn w1_is_a_symmetric_distance(a in prop::collection::vec(-10.0f64..10.0, 1..60), b in prop::collection::vec(-10.0f64..10.0, 1..60), shift in -3.0f64..3.0) {
        let mut a = a;
        let mut b = b;
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let ab = wasserstein1_sorted(&a, &b);
        prop_assert!((ab - wasserstein1_sorted(&b, &a)).abs() < 1e-9);
        prop_assert!(ab >= 0.0);
        prop_assert!(wasserstein1_sorted(&a, &a).abs() < 1e-12);
        let moved: Vec<f64> = a.iter().map(|v| v + shift).collect();
        prop_assert!((wasserstein1_sorted(&a, &moved) - shift.abs()).abs() < 1e-9);
    }

    #[test]
    fn kl_is_nonnegative(seed in any::<u64>()) {
        let mix = mixture_from(seed, 3, 2);
        let [p, q] = [&mix.components()[0], &mix.components()[1]];
        let kl = kl_gaussian(p.mean().as_slice(), p.covariance(), q.mean().as_slice(), q.covariance()).unwrap();
        prop_assert!(kl >= -1e-12);
        let same = kl_gaussian(p.mean().as_slice(), p.covariance(), p.mean().as_slice(), p.covariance()).unwrap();
        prop_assert!(same.abs() < 1e-10);
    }

    #[test]
    fn reverse_step_is_affine(y in prop::collection::vec(-5.0f64..5.0, 3), s in prop::collection::vec(-5.0f64..5.0, 3), z in prop::collection::vec(-3.0f64..3.0, 3), gap in 1e-4f64..1.0) {
        for mode in [RhoMode::Full, RhoMode::Half] {
            let rho = mode.rho(gap);
            let out = reverse_step_with_noise(&y, &s, gap, mode, &z);
            let zero = vec![0.0; 3];
            let drift_only = reverse_step_with_noise(&y, &zero, gap, mode, &zero);
            for i in 0..3 {
                prop_assert!((drift_only[i] - rho * y[i]).abs() < 1e-12);
                let want = rho * y[i] + 2.0 * (rho - 1.0) * s[i] + (rho * rho - 1.0).sqrt() * z[i];
                prop_assert!((out[i] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn chunked_sums_do_not_depend_on_pool_size(values in prop::collection::vec(-1e6f64..1e6, 0..3000), chunk in 1usize..257, threads in 1usize..5) {
        let sum = |v: &[f64]| chunked_reduce(v.len(), chunk, |r| vec![v[r].iter().sum::<f64>()], add_into);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let a = sum(&values);
        let b = pool.install(|| sum(&values));
        prop_assert_eq!(a.map(|v| v[0].to_bits()), b.map(|v| v[0].to_bits()));
    }

    #[test]
    fn sample_files_round_trip_exactly(seed in any::<u64>(), n in 0usize..40, d in 1usize..5) {
        let mut rng = SeedTree::new(seed).rng();
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random::<f64>() * 1e3 - 5e2).collect()).collect();
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("x.gmms");
        write_samples_gmms(&bin, &pts).unwrap();
        prop_assert_eq!(&read_samples_gmms(&bin).unwrap(), &pts);
        if n > 0 {
            let text = dir.path().join("x.csv");
            write_samples_csv(&text, &pts, &ArtifactHeader::new(Some(seed))).unwrap();
            prop_assert_eq!(&read_samples_csv(&text).unwrap(), &pts);
        }
    }

    #[test]
    fn classification_is_pure_and_in_range(seed in any::<u64>(), x in prop::collection::vec(-8.0f64..8.0, 2)) {
        let mix = mixture_from(seed, 2, 3);
        let est: Vec<ComponentEstimate> = mix.components().iter().map(|c| ComponentEstimate::new(c.mean().clone(), c.covariance().clone(), 0.5)).collect();
        let covs: Vec<DMatrix<f64>> = est.iter().map(|e| e.covariance.clone()).collect();
        let precs: Vec<DMatrix<f64>> = est.iter().map(|e| e.precision.clone()).collect();
        let pair = PartitionPair::new(vec![vec![0, 1], vec![2]], vec![vec![0], vec![1, 2]], 3).unwrap();
        let cf = ClusteringFunction::new(pair, est, oracle_thresholds(&covs, &precs, 0.5), 0.01, 0.5).unwrap();
        let piece = cf.classify(&x);
        prop_assert!(piece < cf.num_pieces());
        prop_assert_eq!(piece, cf.classify(&x));
    }
}

#[test]
fn set_partition_counts_are_bell_numbers() {
    let bell = [1, 1, 2, 5, 15, 52, 203];
    for (k, &b) in bell.iter().enumerate().skip(1) {
        let parts = set_partitions(k);
        assert_eq!(parts.len(), b, "k = {k}");
        for p in &parts {
            let mut seen: Vec<usize> = p.iter().flatten().copied().collect();
            seen.sort();
            assert_eq!(seen, (0..k).collect::<Vec<_>>());
        }
    }
}

#[test]
fn feature_counts_are_binomial() {
    for d in 1..6 {
        for l in 0..7 {
            let want = binomial((d + l) as u64, l as u64) as usize;
            assert_eq!(feature_count(d, l), want);
            assert_eq!(FeatureMap::new(d, l).len(), want);
        }
    }
}
