//! Acceptance checks. Runs every criterion in order, prints one PASS/FAIL
//! line each and exits nonzero if any failed. Arguments filter by name.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mixdiff::clustering::{margin_eta, oracle_thresholds, ClusteringFunction, ComponentEstimate, PartitionPair};
use mixdiff::config::ExperimentConfig;
use mixdiff::evaluation::{
    correlation_bound_check, distribution_diagnostics, fourth_moment_check, misclassification_rates,
    score_l2_error, score_simplification_error,
};
use mixdiff::learning::{make_denoising_batch, polynomial_regression, learn_score, LearnConfig, TrainingData};
use mixdiff::mixture::{random_covariance, random_mixture, random_orthogonal, GaussianComponent, GaussianMixture};
use mixdiff::pipeline::run_pipeline;
use mixdiff::rng::SeedTree;
use mixdiff::sampler::{build_schedule, generate_samples, ExactScoreField, RhoMode, SamplerConfig};
use mixdiff::score_model::FeatureMap;
use mixdiff::spectral::{topk_subspace, CandidateList};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

fn verdict(criterion: u32, title: &str, pass: bool, detail: &str, elapsed: Duration, budget: Duration) -> bool {
    let in_time = elapsed <= budget;
    let ok = pass && in_time;
    println!(
        "{} criterion {criterion} {title}: {detail}; {:.2} s (budget {} s){}",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs(),
        if in_time { "" } else { " over budget" },
    );
    ok
}

fn gaussian_vec(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn central_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let at = |s: f64| {
                let mut y = x.to_vec();
                y[i] += s * h;
                f(&y)
            };
            (-at(2.0) + 8.0 * at(1.0) - 8.0 * at(-1.0) + at(-2.0)) / (12.0 * h)
        })
        .collect()
}

fn criterion_01_score_matches_finite_differences() -> bool {
    let start = Instant::now();
    let mut rng = SeedTree::new(101).rng();
    let times = [0.0, 0.1, 1.0];
    let mut worst = 0.0f64;
    for case in 0..100 {
        let d = rng.random_range(1..=4);
        let k = rng.random_range(1..=3);
        let mix = random_mixture(d, k, 0.5, 2.0, 3.0, &mut rng);
        let noised = mix.noised(times[case % 3]);
        let x = noised.sample_points(1, &SeedTree::new(case as u64)).remove(0);
        let s = noised.score(&x);
        let fd = central_gradient(&|y| noised.log_density(y), &x, 1e-3);
        let err: f64 = s.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(err / norm);
    }
    verdict(
        1,
        "score vs finite differences",
        worst <= 1e-5,
        &format!("worst relative error {worst:.2e} over 100 cases (limit 1e-5)"),
        start.elapsed(),
        Duration::from_secs(5),
    )
}

fn criterion_02_top_k_subspace_captures_vectors() -> bool {
    let start = Instant::now();
    let mut rng = SeedTree::new(202).rng();
    let d = 20;
    let mut violations = 0;
    let mut worst_margin = f64::NEG_INFINITY;
    for case in 0..50 {
        let k = 1 + case % 4;
        let eps = if case % 2 == 0 { 0.01 } else { 0.1 };
        let vs: Vec<DVector<f64>> = if case % 3 == 0 {
            let o = random_orthogonal(d, &mut rng);
            (0..k).map(|i| o.column(i).into_owned()).collect()
        } else {
            (0..k)
                .map(|_| {
                    let v = DVector::from_vec(gaussian_vec(d, &mut rng));
                    let len = 0.3 + 1.7 * rng.random::<f64>();
                    v.normalize() * len
                })
                .collect()
        };
        let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let sym = (&g + g.transpose()) * 0.5;
        let op = sym.symmetric_eigenvalues().amax();
        let e = sym * (eps / op);
        let mut a = e;
        for v in &vs {
            a += v * v.transpose();
        }
        let basis = topk_subspace(&a, k).unwrap();
        for v in &vs {
            let p = basis.project(v.as_slice());
            let miss: f64 = v.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum();
            worst_margin = worst_margin.max(miss - 2.0 * eps);
            if miss > 2.0 * eps + 1e-9 {
                violations += 1;
            }
        }
    }
    verdict(
        2,
        "top-k subspace recovery",
        violations == 0,
        &format!("{violations} violations in 50 instances; largest |v - Pv|^2 - 2eps = {worst_margin:.3e}"),
        start.elapsed(),
        Duration::from_secs(5),
    )
}

fn criterion_03_fourth_moment_closed_form() -> bool {
    let start = Instant::now();
    let mut rng = SeedTree::new(303).rng();
    let d = 4;
    let mut failures = 0;
    let mut worst_z = 0.0f64;
    for case in 0..20 {
        let mean = gaussian_vec(d, &mut rng);
        let cov = random_covariance(d, 0.5, 2.0, &mut rng);
        let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let r = fourth_moment_check(&a, &mean, &cov, 1_000_000, &SeedTree::new(3000 + case)).unwrap();
        worst_z = worst_z.max((r.estimate - r.bound.unwrap()).abs() / r.std_error);
        if !r.pass {
            failures += 1;
        }
    }
    verdict(
        3,
        "fourth moment closed form",
        failures == 0,
        &format!("{failures}/20 outside 4 SE; worst |MC - closed|/SE = {worst_z:.2}"),
        start.elapsed(),
        Duration::from_secs(60),
    )
}

fn criterion_04_correlation_bound() -> bool {
    let start = Instant::now();
    let mut rng = SeedTree::new(404).rng();
    let (alpha, beta) = (0.5, 2.0);
    let mut literal_failures = 0;
    let mut derived_failures = 0;
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    for case in 0..20 {
        let d = 1 + case % 3;
        let c1 = GaussianComponent::new(
            DVector::from_vec(gaussian_vec(d, &mut rng)) * 1.5,
            random_covariance(d, alpha, beta, &mut rng),
        )
        .unwrap();
        let c2 = GaussianComponent::new(
            DVector::from_vec(gaussian_vec(d, &mut rng)) * 1.5,
            random_covariance(d, alpha, beta, &mut rng),
        )
        .unwrap();
        let r = correlation_bound_check(&c1, &c2, alpha, beta, 200_000, &SeedTree::new(4000 + case as u64));
        if !r.report.pass {
            literal_failures += 1;
            let literal = r.report.bound.unwrap();
            if r.report.estimate / literal > worst.0 / worst.1.max(1e-300) {
                worst = (r.report.estimate, literal, r.derived_bound);
            }
        }
        if r.report.estimate > r.derived_bound + 3.0 * r.report.std_error {
            derived_failures += 1;
        }
    }
    verdict(
        4,
        "correlation bound",
        literal_failures == 0,
        &format!(
            "{literal_failures}/20 exceed the stated bound (worst: estimate {:.3e} vs bound {:.3e}); \
             {derived_failures}/20 exceed the bound carried through the proof (there {:.3e})",
            worst.0, worst.1, worst.2
        ),
        start.elapsed(),
        Duration::from_secs(60),
    )
}

fn criterion_05_score_simplification_decays() -> bool {
    let start = Instant::now();
    let mut estimates = Vec::new();
    for &sep in &[4.0, 6.0, 8.0, 10.0] {
        let means = [DVector::from_element(1, -sep), DVector::from_element(1, sep)];
        let covs = [DMatrix::identity(1, 1), DMatrix::identity(1, 1)];
        let mix = GaussianMixture::from_parameters(&means, &covs, vec![0.5, 0.5], 1.0, 1.0, sep).unwrap();
        let r = score_simplification_error(&mix, &[0], 200_000, &SeedTree::new(505), None).unwrap();
        estimates.push(r.estimate);
    }
    let decreasing = estimates.windows(2).all(|w| w[1] < w[0]);
    verdict(
        5,
        "score simplification decay",
        decreasing && estimates[3] <= 1e-6,
        &format!("estimates at D = 4, 6, 8, 10: {}", estimates.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>().join(", ")),
        start.elapsed(),
        Duration::from_secs(30),
    )
}

fn criterion_06_denoising_targets_match_score_targets() -> bool {
    let start = Instant::now();
    let mut rng = SeedTree::new(606).rng();
    let mean = DVector::from_vec(vec![0.7, -1.2]);
    let cov = random_covariance(2, 0.5, 2.0, &mut rng);
    let mix = GaussianMixture::from_parameters(&[mean], &[cov], vec![1.0], 0.5, 2.0, 4.0).unwrap();
    let t = 0.5;
    let batch = make_denoising_batch(&mix, t, 1_000_000, &SeedTree::new(6060)).unwrap();
    let noised = mix.noised(t);
    let exact: Vec<Vec<f64>> = batch.inputs.iter().map(|x| noised.score(x)).collect();
    let fm = FeatureMap::new(2, 1);
    let den = polynomial_regression(&batch.inputs, &batch.targets, &fm, 0.0).unwrap();
    let ora = polynomial_regression(&batch.inputs, &exact, &fm, 0.0).unwrap();
    let mut worst = 0.0f64;
    for a in 0..fm.len() {
        for c in 0..2 {
            let se = (den.standard_errors[(a, c)].powi(2) + ora.standard_errors[(a, c)].powi(2)).sqrt();
            worst = worst.max((den.coefficients[(a, c)] - ora.coefficients[(a, c)]).abs() / se);
        }
    }
    verdict(
        6,
        "denoising vs score regression",
        worst <= 3.0,
        &format!("largest coefficient gap {worst:.2} combined SE over {} coefficients (limit 3)", 2 * fm.len()),
        start.elapsed(),
        Duration::from_secs(60),
    )
}

fn criterion_07_reverse_sampler_with_exact_scores() -> bool {
    let start = Instant::now();
    let mix = mixdiff::config::preset("two-cluster-2d", None).unwrap();
    let cfg = SamplerConfig {
        schedule: build_schedule(6.0, 0.005, 256, None).unwrap(),
        n_samples: 20_000,
        seed: 707,
        rho_mode: RhoMode::Full,
    };
    let generated = generate_samples(&ExactScoreField { mixture: &mix }, &cfg).unwrap();
    let right: Vec<&Vec<f64>> = generated.iter().filter(|p| p[0] > 0.0).collect();
    let left: Vec<&Vec<f64>> = generated.iter().filter(|p| p[0] <= 0.0).collect();
    let share = right.len() as f64 / generated.len() as f64;
    let mean_of = |pts: &[&Vec<f64>]| {
        let n = pts.len() as f64;
        [pts.iter().map(|p| p[0]).sum::<f64>() / n, pts.iter().map(|p| p[1]).sum::<f64>() / n]
    };
    let (mr, ml) = (mean_of(&right), mean_of(&left));
    let gap_r = ((mr[0] - 3.0).powi(2) + mr[1].powi(2)).sqrt();
    let gap_l = ((ml[0] + 3.0).powi(2) + ml[1].powi(2)).sqrt();
    let eval = SeedTree::new(7070);
    let fresh = mix.sample_points(20_000, &eval.split("fresh"));
    let calibration = mix.sample_points(20_000, &eval.split("calibration"));
    let diag = distribution_diagnostics(&generated, &fresh, 64, &eval.split("projections")).unwrap();
    let base = distribution_diagnostics(&calibration, &fresh, 64, &eval.split("projections")).unwrap();
    let pass = (share - 0.5).abs() <= 0.02 && gap_r <= 0.1 && gap_l <= 0.1 && diag.sliced_w1 <= 0.1;
    verdict(
        7,
        "reverse sampler with exact scores",
        pass,
        &format!(
            "right share {share:.4}; mean gaps {gap_r:.4} / {gap_l:.4}; sliced W1 {:.4} ± {:.4} (baseline {:.4})",
            diag.sliced_w1, diag.sliced_w1_se, base.sliced_w1
        ),
        start.elapsed(),
        Duration::from_secs(300),
    )
}

const PAIR_PIPELINE: &str = r#"seed = 808
oracle = true
[mixture]
preset = "symmetric-pair-1d"
[data]
n_samples = 250000
[schedule]
horizon = 6.0
delta = 0.005
steps = 128
[learn]
degree = 6
n_train = 200000
n_val = 50000
[sampler]
n_samples = 20000
[eval]
score_times = [0.1]
reference_samples = 20000
projections = 64
w1_bound = 0.1
"#;

fn criterion_08_learned_score_end_to_end() -> bool {
    let start = Instant::now();
    let mix = mixdiff::config::preset("symmetric-pair-1d", None).unwrap();
    let t = 0.1;
    let mut lc = LearnConfig::new(2, 1.0, 1.0, 8080);
    lc.degree = 6;
    lc.n_train = 200_000;
    lc.n_val = 50_000;
    let outcome = learn_score(TrainingData::Mixture(&mix), t, &CandidateList::from_mixture(&mix), &lc).unwrap();
    let model = outcome.model;
    let score = |x: &[f64]| model.eval(x);
    let err = score_l2_error(&score, &mix, t, 100_000, &SeedTree::new(8081), 0.05);

    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(PAIR_PIPELINE, dir.path()).unwrap();
    let run = run_pipeline(&cfg, PAIR_PIPELINE, dir.path()).unwrap();
    let find = |name: &str| run.reports.iter().find(|r| r.name.starts_with(name)).unwrap();
    let w1 = find("sliced_w1[generated");
    let base = find("sliced_w1[calibration");
    let pipeline_score = find("score_l2_error");
    let pass = err.report.pass && w1.pass;
    verdict(
        8,
        "learned score end to end",
        pass,
        &format!(
            "relative score error {:.4} ± {:.4} (limit 0.05, pipeline model {:.4}); \
             pipeline sliced W1 {:.4} ± {:.4} (limit 0.1, baseline {:.4})",
            err.relative,
            err.relative_se,
            pipeline_score.estimate / pipeline_score.bound.unwrap() * 0.05,
            w1.estimate,
            w1.std_error,
            base.estimate
        ),
        start.elapsed(),
        Duration::from_secs(600),
    )
}

fn oracle_clustering(mix: &GaussianMixture, pair: PartitionPair) -> ClusteringFunction {
    let alpha = mix.conditioning().alpha;
    let beta = mix.conditioning().beta;
    let est: Vec<ComponentEstimate> = mix
        .components()
        .iter()
        .map(|c| ComponentEstimate::new(c.mean().clone(), c.covariance().clone(), alpha))
        .collect();
    let covs: Vec<DMatrix<f64>> = est.iter().map(|e| e.covariance.clone()).collect();
    let precs: Vec<DMatrix<f64>> = est.iter().map(|e| e.precision.clone()).collect();
    let eta = margin_eta(&est, &pair.cov_partition, beta);
    ClusteringFunction::new(pair, est, oracle_thresholds(&covs, &precs, 0.5), eta, alpha).unwrap()
}

fn criterion_09_clustering_accuracy() -> bool {
    let start = Instant::now();
    let mean_split = GaussianMixture::from_parameters(
        &[DVector::from_vec(vec![-4.0, 0.0, 0.0]), DVector::from_vec(vec![4.0, 0.0, 0.0])],
        &[DMatrix::identity(3, 3), DMatrix::identity(3, 3)],
        vec![0.5, 0.5],
        1.0,
        1.0,
        4.0,
    )
    .unwrap();
    let d = 128;
    let cov_split = GaussianMixture::from_parameters(
        &[DVector::zeros(d), DVector::zeros(d)],
        &[DMatrix::identity(d, d), DMatrix::identity(d, d) * 4.0],
        vec![0.5, 0.5],
        1.0,
        4.0,
        40.0,
    )
    .unwrap();
    let by_mean = oracle_clustering(&mean_split, PartitionPair::new(vec![vec![0], vec![1]], vec![vec![0, 1]], 2).unwrap());
    let by_cov = oracle_clustering(&cov_split, PartitionPair::new(vec![vec![0, 1]], vec![vec![0], vec![1]], 2).unwrap());
    let mut rates = misclassification_rates(&by_mean, &mean_split, 10_000, &SeedTree::new(909), 0.01);
    rates.extend(misclassification_rates(&by_cov, &cov_split, 10_000, &SeedTree::new(910), 0.01));
    let pass = rates.iter().all(|r| r.pass);
    let shown: Vec<String> = rates.iter().map(|r| format!("{:.4}", r.estimate)).collect();
    verdict(
        9,
        "clustering accuracy",
        pass,
        &format!("misclassification mean-split [{}], covariance-split d=128 [{}] (limit 0.01)", shown[..2].join(", "), shown[2..].join(", ")),
        start.elapsed(),
        Duration::from_secs(30),
    )
}

const SMALL_PIPELINE: &str = r#"seed = 1010
oracle = true
[mixture]
preset = "three-cov-3d"
[data]
n_samples = 20000
[schedule]
horizon = 4.0
delta = 0.01
steps = 16
[learn]
degree = 3
n_train = 15000
n_val = 5000
[sampler]
n_samples = 2000
format = "gmms"
[eval]
score_times = [0.5]
score_samples = 5000
reference_samples = 2000
projections = 8
w1_bound = 10.0
"#;

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn criterion_10_pipeline_is_deterministic() -> bool {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(SMALL_PIPELINE, dir.path()).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_pipeline(&cfg, SMALL_PIPELINE, &a).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    pool.install(|| run_pipeline(&cfg, SMALL_PIPELINE, &b)).unwrap();
    let (fa, fb) = (files_under(&a), files_under(&b));
    let differing: Vec<String> = fa
        .iter()
        .filter(|p| std::fs::read(a.join(p)).unwrap() != std::fs::read(b.join(p)).ok().unwrap_or_default())
        .map(|p| p.display().to_string())
        .collect();
    verdict(
        10,
        "pipeline determinism",
        fa == fb && differing.is_empty() && !fa.is_empty(),
        &format!("{} artifacts compared across thread counts, {} differ {differing:?}", fa.len(), differing.len()),
        start.elapsed(),
        Duration::from_secs(300),
    )
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> bool); 10] = [
        ("criterion_01_score_matches_finite_differences", criterion_01_score_matches_finite_differences),
        ("criterion_02_top_k_subspace_captures_vectors", criterion_02_top_k_subspace_captures_vectors),
        ("criterion_03_fourth_moment_closed_form", criterion_03_fourth_moment_closed_form),
        ("criterion_04_correlation_bound", criterion_04_correlation_bound),
        ("criterion_05_score_simplification_decays", criterion_05_score_simplification_decays),
        ("criterion_06_denoising_targets_match_score_targets", criterion_06_denoising_targets_match_score_targets),
        ("criterion_07_reverse_sampler_with_exact_scores", criterion_07_reverse_sampler_with_exact_scores),
        ("criterion_08_learned_score_end_to_end", criterion_08_learned_score_end_to_end),
        ("criterion_09_clustering_accuracy", criterion_09_clustering_accuracy),
        ("criterion_10_pipeline_is_deterministic", criterion_10_pipeline_is_deterministic),
    ];
    let mut failed = Vec::new();
    let mut ran = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        if !check() {
            failed.push(name);
        }
    }
    println!("acceptance: {ran} criteria run, {} failed {failed:?}", failed.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
