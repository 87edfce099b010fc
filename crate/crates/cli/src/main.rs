use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mixdiff::clustering::{linkage_partition_pair, margin_eta, oracle_thresholds, ClusteringFunction, ComponentEstimate};
use mixdiff::config::{preset, CustomMixture, ExperimentConfig, LearnSection};
use mixdiff::evaluation::{
    correlation_bound_check, distribution_diagnostics, fourth_moment_check, hanson_wright_tail_check, kl_components,
    misclassification_rates, score_l2_error, score_simplification_error, MCReport,
};
use mixdiff::io::{self, ArtifactHeader};
use mixdiff::learning::{learn_score, LearnConfig, ThresholdMode, TrainingData};
use mixdiff::mixture::GaussianMixture;
use mixdiff::rng::SeedTree;
use mixdiff::sampler::{build_schedule, generate_samples, ExactScoreField, LearnedScoreField, RhoMode, SamplerConfig, ScoreField};
use mixdiff::spectral::{crude_estimate, CandidateList, CrudeConfig};

#[derive(Parser)]
#[command(name = "mixdiff", version, about = "Learn Gaussian mixtures with piecewise polynomial scores and reverse diffusion")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Use the true mixture parameters where an estimate would be used.
    #[arg(long, global = true)]
    oracle: bool,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a named mixture and print its conditioning.
    GenMixture {
        /// symmetric-pair-1d, two-cluster-2d, three-cov-3d or custom.
        preset: String,
        /// TOML file with alpha, beta, radius, weights, means, covariances (custom only).
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Draw unlabeled samples from a mixture file.
    SampleData {
        #[arg(long)]
        mixture: PathBuf,
        #[arg(long, short)]
        n: usize,
        /// .csv or .gmms
        #[arg(long, default_value = "data.csv")]
        file: String,
    },
    /// Build the candidate parameter list from samples.
    Estimate {
        #[arg(long)]
        data: PathBuf,
        /// Mixture file supplying k, β and R (and the true parameters with --oracle).
        #[arg(long)]
        mixture: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        mean_step: f64,
        #[arg(long, default_value_t = 0.25)]
        cov_step: f64,
        #[arg(long, default_value_t = 100_000)]
        max_candidates: usize,
    },
    /// Misclassification rates of the clustering function built from true parameters.
    ClusterTest {
        #[arg(long)]
        mixture: PathBuf,
        #[arg(long, short, default_value_t = 10_000)]
        n: usize,
        /// Noise time of the forward process.
        #[arg(long, default_value_t = 0.0)]
        t: f64,
        #[arg(long, default_value_t = 0.5)]
        slack: f64,
        #[arg(long, default_value_t = 1.0)]
        mean_cut: f64,
        #[arg(long, default_value_t = 0.5)]
        cov_cut: f64,
        #[arg(long, default_value_t = 0.01)]
        max_rate: f64,
    },
    /// Fit a piecewise polynomial score at one noise time.
    Learn {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        mixture: PathBuf,
        #[arg(long)]
        t: f64,
        #[command(flatten)]
        learn: LearnFlags,
    },
    /// Run the reverse sampler with learned models (a directory of step_*.json) or exact scores (--oracle).
    Generate {
        #[arg(long)]
        mixture: Option<PathBuf>,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long, default_value_t = 6.0)]
        horizon: f64,
        #[arg(long, default_value_t = 0.005)]
        delta: f64,
        #[arg(long, default_value_t = 256)]
        steps: usize,
        #[arg(long)]
        kappa: Option<f64>,
        #[arg(long, short, default_value_t = 10_000)]
        n: usize,
        #[arg(long)]
        half_rho: bool,
        #[arg(long, default_value = "generated.csv")]
        file: String,
    },
    /// Run one evaluation check; exits nonzero when it fails.
    Eval(EvalArgs),
    /// Run every stage from a config file.
    Pipeline,
}

#[derive(Args)]
struct LearnFlags {
    #[arg(long, default_value_t = 4)]
    degree: usize,
    #[arg(long, default_value_t = 50_000)]
    n_train: usize,
    #[arg(long, default_value_t = 10_000)]
    n_val: usize,
    #[arg(long, value_enum, default_value_t = ThresholdArg::Oracle)]
    thresholds: ThresholdArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ThresholdArg {
    Oracle,
    Grid,
}

#[derive(Clone, Copy, ValueEnum)]
enum Check {
    ScoreError,
    Simplification,
    FourthMoment,
    Correlation,
    HansonWright,
    Kl,
    Diagnostics,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(value_enum)]
    check: Check,
    #[arg(long)]
    mixture: Option<PathBuf>,
    /// Learned model for score-error (exact scores with --oracle).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    t: f64,
    #[arg(long, short, default_value_t = 100_000)]
    n: usize,
    /// Component indices kept by the simplification check, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    subset: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    component: usize,
    #[arg(long, default_value_t = 1)]
    other: usize,
    /// Sample files compared by the diagnostics check.
    #[arg(long)]
    a: Option<PathBuf>,
    #[arg(long)]
    b: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    tolerance: f64,
    #[arg(long, default_value_t = 0.1)]
    w1_bound: f64,
    #[arg(long, default_value_t = 64)]
    projections: usize,
    #[arg(long, default_value = "report.csv")]
    file: String,
}

type Fallible<T> = Result<T, String>;

fn err<E: ToString>(e: E) -> String {
    e.to_string()
}

fn out_dir(cli: &Cli, cfg: Option<&ExperimentConfig>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os(mixdiff::config::OUT_DIR_ENV).map(PathBuf::from))
        .or_else(|| cfg.and_then(|c| c.out_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn header(cli: &Cli, inputs: &[(&str, &Path)]) -> Fallible<ArtifactHeader> {
    let mut h = ArtifactHeader::new(Some(cli.seed));
    for (name, p) in inputs {
        h = h.with_input(name, io::file_sha256(p).map_err(err)?);
    }
    Ok(h)
}

fn print_conditioning(mix: &GaussianMixture) {
    let c = mix.conditioning();
    println!(
        "d={} k={} alpha={} beta={} R={} tau={} lambda_min={}",
        mix.dim(),
        mix.num_components(),
        c.alpha,
        c.beta,
        c.radius,
        c.tau,
        c.lambda_min
    );
}

fn learn_config(flags: &LearnFlags, mix: &GaussianMixture, seed: u64) -> LearnConfig {
    let c = mix.conditioning();
    let mut lc = LearnConfig::new(mix.num_components(), c.alpha, c.beta, seed);
    let defaults = LearnSection::default();
    lc.degree = flags.degree;
    lc.n_train = flags.n_train;
    lc.n_val = flags.n_val;
    lc.threshold_mode = match flags.thresholds {
        ThresholdArg::Oracle => ThresholdMode::Oracle { slack: defaults.slack },
        ThresholdArg::Grid => ThresholdMode::Grid,
    };
    lc
}

fn write_reports(dir: &Path, file: &str, reports: &[MCReport], h: &ArtifactHeader) -> Fallible<bool> {
    let path = dir.join(file);
    io::write_report_csv(&path, reports, h).map_err(err)?;
    print!("{}", io::report_summary(reports));
    println!("report: {}", path.display());
    Ok(reports.iter().all(|r| r.pass))
}

fn run(cli: &Cli) -> Fallible<bool> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global().map_err(err)?;
    }
    let cfg = match (&cli.config, &cli.command) {
        (Some(p), _) => Some(ExperimentConfig::load(p).map_err(err)?),
        (None, Command::Pipeline) => return Err("pipeline requires --config".into()),
        _ => None,
    };
    let dir = out_dir(cli, cfg.as_ref());
    std::fs::create_dir_all(&dir).map_err(err)?;
    let root = SeedTree::new(cli.seed);
    match &cli.command {
        Command::GenMixture { preset: name, spec } => {
            let custom: Option<CustomMixture> = match spec {
                Some(p) => Some(toml::from_str(&std::fs::read_to_string(p).map_err(err)?).map_err(err)?),
                None => None,
            };
            let mix = preset(name, custom.as_ref()).map_err(err)?;
            let path = dir.join("mixture.json");
            io::write_mixture(&path, &mix, header(cli, &[])?).map_err(err)?;
            print_conditioning(&mix);
            println!("mixture: {}", path.display());
        }
        Command::SampleData { mixture, n, file } => {
            let mix = io::read_mixture(mixture).map_err(err)?;
            let pts = mix.sample_points(*n, &root.split("data"));
            let path = dir.join(file);
            io::write_samples(&path, &pts, &header(cli, &[("mixture", mixture)])?).map_err(err)?;
            println!("samples: {} ({} rows)", path.display(), pts.len());
        }
        Command::Estimate { data, mixture, mean_step, cov_step, max_candidates } => {
            let mix = io::read_mixture(mixture).map_err(err)?;
            let list = if cli.oracle {
                CandidateList::from_mixture(&mix)
            } else {
                let pts = io::read_samples(data).map_err(err)?;
                let mut cfg = CrudeConfig {
                    radius: mix.conditioning().radius,
                    beta: mix.conditioning().beta,
                    mean_net_step: *mean_step,
                    max_mean_candidates: *max_candidates,
                    max_mean_tuples: *max_candidates,
                    covariance: Default::default(),
                    max_candidates: *max_candidates,
                };
                cfg.covariance.step = *cov_step;
                crude_estimate(&pts, mix.num_components(), &cfg).map_err(err)?
            };
            let path = dir.join("candidates.json");
            io::write_candidates(&path, &list, header(cli, &[("data", data), ("mixture", mixture)])?).map_err(err)?;
            println!("candidates: {} ({} entries)", path.display(), list.len());
        }
        Command::ClusterTest { mixture, n, t, slack, mean_cut, cov_cut, max_rate } => {
            let mix = io::read_mixture(mixture).map_err(err)?;
            let alpha = mix.conditioning().alpha;
            let est: Vec<ComponentEstimate> =
                mix.components().iter().map(|c| ComponentEstimate::noised(c.mean(), c.covariance(), *t, alpha)).collect();
            let pair = linkage_partition_pair(&est, *mean_cut, *cov_cut);
            let covs: Vec<_> = est.iter().map(|e| e.covariance.clone()).collect();
            let precs: Vec<_> = est.iter().map(|e| e.precision.clone()).collect();
            let eta = margin_eta(&est, &pair.cov_partition, mix.conditioning().beta);
            println!("mean partition {:?}, covariance partition {:?}", pair.mean_partition, pair.cov_partition);
            let cf = ClusteringFunction::new(pair, est, oracle_thresholds(&covs, &precs, *slack), eta, alpha).map_err(err)?;
            let target = mix.noised(*t);
            let reports = misclassification_rates(&cf, &target, *n, &root.split("cluster-test"), *max_rate);
            return write_reports(&dir, "cluster_test.csv", &reports, &header(cli, &[("mixture", mixture)])?);
        }
        Command::Learn { data, candidates, mixture, t, learn } => {
            let mix = io::read_mixture(mixture).map_err(err)?;
            let pts = io::read_samples(data).map_err(err)?;
            let list = if cli.oracle { CandidateList::from_mixture(&mix) } else { io::read_candidates(candidates).map_err(err)? };
            let lc = learn_config(learn, &mix, root.split("learn").seed_u64());
            let outcome = learn_score(TrainingData::Samples(&pts), *t, &list, &lc).map_err(err)?;
            let h = header(cli, &[("data", data), ("candidates", candidates)])?;
            let model_path = dir.join("model.json");
            io::write_model(&model_path, &outcome.model, h.clone()).map_err(err)?;
            io::write_fit_report(&dir.join("fit.csv"), &outcome.report, &h).map_err(err)?;
            println!(
                "model: {} (train loss {:e}, validation loss {:e}, {} configurations)",
                model_path.display(),
                outcome.train_loss,
                outcome.validation_loss,
                outcome.report.len()
            );
        }
        Command::Generate { mixture, models, horizon, delta, steps, kappa, n, half_rho, file } => {
            let schedule = build_schedule(*horizon, *delta, *steps, *kappa).map_err(err)?;
            let config = SamplerConfig {
                schedule,
                n_samples: *n,
                seed: root.split("generate").seed_u64(),
                rho_mode: if *half_rho { RhoMode::Half } else { RhoMode::Full },
            };
            let loaded;
            let mix;
            let field: Box<dyn ScoreField> = if cli.oracle {
                let p = mixture.as_ref().ok_or("--oracle generation needs --mixture")?;
                mix = io::read_mixture(p).map_err(err)?;
                Box::new(ExactScoreField { mixture: &mix })
            } else {
                let d = models.as_ref().ok_or("generation needs --models DIR (or --oracle --mixture)")?;
                let mut paths: Vec<PathBuf> = std::fs::read_dir(d)
                    .map_err(err)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| {
                        let name = p.file_name().and_then(|s| s.to_str()).unwrap_or("");
                        name.starts_with("step_") && name.ends_with(".json")
                    })
                    .collect();
                paths.sort();
                loaded = paths.iter().map(|p| io::read_model(p)).collect::<Result<Vec<_>, _>>().map_err(err)?;
                Box::new(LearnedScoreField { models: &loaded, tolerance: 1e-9 })
            };
            let pts = generate_samples(field.as_ref(), &config).map_err(err)?;
            let path = dir.join(file);
            io::write_samples(&path, &pts, &header(cli, &[])?).map_err(err)?;
            println!("samples: {} ({} rows)", path.display(), pts.len());
        }
        Command::Eval(args) => return eval(cli, args, &dir, &root),
        Command::Pipeline => {
            let cfg = cfg.expect("checked above");
            let text = std::fs::read_to_string(cli.config.as_ref().unwrap()).map_err(err)?;
            let outcome = mixdiff::pipeline::run_pipeline(&cfg, &text, &dir).map_err(err)?;
            print!("{}", io::report_summary(&outcome.reports));
            println!("artifacts: {} files in {}", outcome.artifacts.len(), dir.display());
            return Ok(outcome.all_pass);
        }
    }
    Ok(true)
}

fn eval(cli: &Cli, args: &EvalArgs, dir: &Path, root: &SeedTree) -> Fallible<bool> {
    let seed = root.split("eval");
    let need_mix = || -> Fallible<GaussianMixture> {
        let p = args.mixture.as_ref().ok_or("this check needs --mixture")?;
        io::read_mixture(p).map_err(err)
    };
    let mut inputs: Vec<(&str, &Path)> = Vec::new();
    if let Some(p) = &args.mixture {
        inputs.push(("mixture", p));
    }
    let reports = match args.check {
        Check::ScoreError => {
            let mix = need_mix()?;
            let report = if cli.oracle {
                let noised = mix.noised(args.t);
                score_l2_error(&move |x: &[f64]| noised.score(x), &mix, args.t, args.n, &seed, args.tolerance)
            } else {
                let p = args.model.as_ref().ok_or("score-error needs --model (or --oracle)")?;
                inputs.push(("model", p));
                let model = io::read_model(p).map_err(err)?;
                score_l2_error(&move |x: &[f64]| model.eval(x), &mix, args.t, args.n, &seed, args.tolerance)
            };
            println!("relative error {} (jackknife se {})", report.relative, report.relative_se);
            vec![report.report]
        }
        Check::Simplification => vec![score_simplification_error(&need_mix()?, &args.subset, args.n, &seed, None).map_err(err)?],
        Check::FourthMoment => {
            let mix = need_mix()?;
            let c = mix.components().get(args.component).ok_or("component index out of range")?;
            let d = mix.dim();
            let mut rng = seed.split("matrix").rng();
            let a = nalgebra::DMatrix::from_fn(d, d, |_, _| rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal));
            let a = &a / a.norm();
            vec![fourth_moment_check(&a, c.mean().as_slice(), c.covariance(), args.n, &seed).map_err(err)?]
        }
        Check::Correlation => {
            let mix = need_mix()?;
            let a = mix.components().get(args.component).ok_or("component index out of range")?;
            let b = mix.components().get(args.other).ok_or("other index out of range")?;
            let c = mix.conditioning();
            let r = correlation_bound_check(a, b, c.alpha, c.beta, args.n, &seed);
            println!("derived bound {:e}, MC {} (se {})", r.derived_bound, r.mc_estimate, r.mc_std_error);
            vec![r.report]
        }
        Check::HansonWright => {
            let mix = need_mix()?;
            let c = mix.components().get(args.component).ok_or("component index out of range")?;
            hanson_wright_tail_check(c.covariance(), &[0.5, 1.0, 2.0, 5.0, 10.0], args.n, &seed)
        }
        Check::Kl => {
            let mix = need_mix()?;
            let a = mix.components().get(args.component).ok_or("component index out of range")?;
            let b = mix.components().get(args.other).ok_or("other index out of range")?;
            let kl = kl_components(a, b).map_err(err)?;
            vec![MCReport { name: "kl_gaussian".into(), criterion: "exact, reported only".into(), estimate: kl, std_error: 0.0, n: 0, bound: None, pass: true }]
        }
        Check::Diagnostics => {
            let (pa, pb) = (args.a.as_ref().ok_or("diagnostics needs --a")?, args.b.as_ref().ok_or("diagnostics needs --b")?);
            inputs.push(("a", pa));
            inputs.push(("b", pb));
            let a = io::read_samples(pa).map_err(err)?;
            let b = io::read_samples(pb).map_err(err)?;
            let r = distribution_diagnostics(&a, &b, args.projections, &seed).map_err(err)?;
            println!("mean gap {}, covariance gap {}", r.mean_gap, r.cov_gap);
            vec![r.to_report("sliced_w1", args.w1_bound, a.len())]
        }
    };
    write_reports(dir, &args.file, &reports, &header(cli, &inputs)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
