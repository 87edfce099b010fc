//! End-to-end run: mixture → data → candidates → schedule → per-step score
//! models → reverse samples → evaluation, with every artifact on disk.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, RhoChoice, SampleFormat, ThresholdChoice};
use crate::evaluation::{distribution_diagnostics, score_l2_error, MCReport};
use crate::io::{self, ArtifactHeader};
use crate::learning::{learn_score, LearnConfig, ThresholdMode, TrainingData};
use crate::mixture::GaussianMixture;
use crate::rng::SeedTree;
use crate::sampler::{build_schedule, generate_samples, LearnedScoreField, RhoMode, SamplerConfig};
use crate::spectral::{crude_estimate, CandidateList, CovarianceNetConfig, CrudeConfig};

#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed: {message} (artifacts so far: {})", .artifacts.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
pub struct PipelineError {
    pub stage: String,
    pub message: String,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub header: ArtifactHeader,
    pub artifacts: Vec<ManifestEntry>,
    pub all_pass: bool,
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub out_dir: PathBuf,
    pub artifacts: Vec<PathBuf>,
    pub reports: Vec<MCReport>,
    pub all_pass: bool,
}

struct Run<'a> {
    out: &'a Path,
    artifacts: Vec<PathBuf>,
    stage: &'static str,
}

impl Run<'_> {
    fn fail(&self, e: impl ToString) -> PipelineError {
        PipelineError { stage: self.stage.into(), message: e.to_string(), artifacts: self.artifacts.clone() }
    }
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
    fn record(&mut self, p: PathBuf) {
        self.artifacts.push(p);
    }
}

pub fn learn_config(cfg: &ExperimentConfig, k: usize, seed: u64, mix: &GaussianMixture) -> LearnConfig {
    let l = &cfg.learn;
    let c = mix.conditioning();
    let mut lc = LearnConfig::new(k, c.alpha, c.beta, seed);
    lc.degree = l.degree;
    lc.ridge = l.ridge;
    lc.n_train = l.n_train;
    lc.n_val = l.n_val;
    lc.boundary_c1 = l.boundary_c1;
    lc.boundary_c2 = l.boundary_c2;
    lc.confidence_delta = l.confidence_delta;
    lc.threshold_mode = match l.thresholds {
        ThresholdChoice::Oracle => ThresholdMode::Oracle { slack: l.slack },
        ThresholdChoice::Grid => ThresholdMode::Grid,
    };
    lc.threshold_cap = l.threshold_cap;
    lc.threshold_range = l.threshold_range;
    lc.max_tuples = l.max_tuples;
    lc.max_configurations = l.max_configurations;
    lc
}

/// Runs every stage into `out_dir`; reruns with the same config are byte-identical.
pub fn run_pipeline(cfg: &ExperimentConfig, config_text: &str, out_dir: &Path) -> Result<PipelineOutcome, PipelineError> {
    let mut run = Run { out: out_dir, artifacts: Vec::new(), stage: "setup" };
    std::fs::create_dir_all(out_dir.join("models")).map_err(|e| run.fail(e))?;
    let root = SeedTree::new(cfg.seed);
    let config_hash = io::sha256_hex(config_text.as_bytes());
    let header = |inputs: &[(&str, &Path)]| -> Result<ArtifactHeader, io::IoError> {
        let mut h = ArtifactHeader::new(Some(cfg.seed)).with_input("config", config_hash.clone());
        for (name, p) in inputs {
            h = h.with_input(name, io::file_sha256(p)?);
        }
        Ok(h)
    };

    run.stage = "mixture";
    let mix = cfg.resolve_mixture().map_err(|e| run.fail(e))?;
    let mix_path = run.path("mixture.json");
    io::write_mixture(&mix_path, &mix, header(&[]).map_err(|e| run.fail(e))?).map_err(|e| run.fail(e))?;
    run.record(mix_path.clone());

    run.stage = "sample-data";
    let data = mix.sample_points(cfg.data.n_samples, &root.split("data"));
    let data_path = run.path("data.csv");
    io::write_samples_csv(&data_path, &data, &header(&[("mixture", &mix_path)]).map_err(|e| run.fail(e))?).map_err(|e| run.fail(e))?;
    run.record(data_path.clone());

    run.stage = "estimate";
    let k = mix.num_components();
    let candidates = if cfg.oracle {
        CandidateList::from_mixture(&mix)
    } else {
        let e = &cfg.estimate;
        let crude = CrudeConfig {
            radius: mix.conditioning().radius,
            beta: mix.conditioning().beta,
            mean_net_step: e.mean_net_step,
            max_mean_candidates: e.max_mean_candidates,
            max_mean_tuples: e.max_mean_tuples,
            covariance: CovarianceNetConfig {
                step: e.covariance_net_step,
                max_candidates: e.max_covariance_candidates,
                dim_cap: e.moment_dim_cap,
                ..CovarianceNetConfig::default()
            },
            max_candidates: e.max_candidates,
        };
        crude_estimate(&data, k, &crude).map_err(|e| run.fail(e))?
    };
    let cand_path = run.path("candidates.json");
    io::write_candidates(&cand_path, &candidates, header(&[("data", &data_path)]).map_err(|e| run.fail(e))?).map_err(|e| run.fail(e))?;
    run.record(cand_path.clone());

    run.stage = "schedule";
    let s = &cfg.schedule;
    let schedule = build_schedule(s.horizon, s.delta, s.steps, s.kappa).map_err(|e| run.fail(e))?;
    let sched_path = run.path("schedule.csv");
    let mut text = format!("# tool: {}\n# version: {}\n# seed: {}\nstep,t,gap,noise_time\n", io::TOOL, io::VERSION, cfg.seed);
    for (i, w) in schedule.times.windows(2).enumerate() {
        text += &format!("{i},{:?},{:?},{:?}\n", w[0], w[1] - w[0], schedule.horizon - w[0]);
    }
    text += &format!("{},{:?},,\n", schedule.num_steps(), schedule.times[schedule.num_steps()]);
    std::fs::write(&sched_path, text).map_err(|e| run.fail(e))?;
    run.record(sched_path);

    run.stage = "learn";
    let learn_seed = root.split("learn");
    let mut models = Vec::with_capacity(schedule.num_steps());
    let learn_header = header(&[("data", &data_path), ("candidates", &cand_path)]).map_err(|e| run.fail(e))?;
    for (step, t) in schedule.query_times().into_iter().enumerate() {
        let lc = learn_config(cfg, k, learn_seed.split_index(step as u64).seed_u64(), &mix);
        let outcome = learn_score(TrainingData::Samples(&data), t, &candidates, &lc).map_err(|e| run.fail(format!("step {step}: {e}")))?;
        let model_path = run.path(&format!("models/step_{step:04}.json"));
        io::write_model(&model_path, &outcome.model, learn_header.clone()).map_err(|e| run.fail(e))?;
        run.record(model_path);
        let fit_path = run.path(&format!("models/step_{step:04}_fit.csv"));
        io::write_fit_report(&fit_path, &outcome.report, &learn_header).map_err(|e| run.fail(e))?;
        run.record(fit_path);
        models.push(outcome.model);
    }

    run.stage = "generate";
    let field = LearnedScoreField { models: &models, tolerance: 1e-9 };
    let sampler = SamplerConfig {
        schedule: schedule.clone(),
        n_samples: cfg.sampler.n_samples,
        seed: root.split("generate").seed_u64(),
        rho_mode: match cfg.sampler.rho {
            RhoChoice::Full => RhoMode::Full,
            RhoChoice::Half => RhoMode::Half,
        },
    };
    let generated = generate_samples(&field, &sampler).map_err(|e| run.fail(e))?;
    let gen_path = run.path(match cfg.sampler.format {
        SampleFormat::Csv => "generated.csv",
        SampleFormat::Gmms => "generated.gmms",
    });
    io::write_samples(&gen_path, &generated, &header(&[("mixture", &mix_path)]).map_err(|e| run.fail(e))?).map_err(|e| run.fail(e))?;
    run.record(gen_path.clone());

    run.stage = "evaluate";
    let eval_seed = root.split("evaluate");
    let mut reports = Vec::new();
    for (i, &t) in cfg.eval.score_times.iter().enumerate() {
        let lc = learn_config(cfg, k, eval_seed.split("learn").split_index(i as u64).seed_u64(), &mix);
        let outcome = learn_score(TrainingData::Samples(&data), t, &candidates, &lc).map_err(|e| run.fail(format!("t = {t}: {e}")))?;
        let model_path = run.path(&format!("models/eval_{i:02}.json"));
        io::write_model(&model_path, &outcome.model, learn_header.clone()).map_err(|e| run.fail(e))?;
        run.record(model_path);
        let model = outcome.model;
        let score = move |x: &[f64]| model.eval(x);
        let mut r = score_l2_error(&score, &mix, t, cfg.eval.score_samples, &eval_seed.split("score").split_index(i as u64), cfg.eval.relative_tolerance);
        r.report.name = format!("score_l2_error[t={t}]");
        reports.push(r.report);
    }
    let reference = mix.sample_points(cfg.eval.reference_samples, &eval_seed.split("reference"));
    let diag = distribution_diagnostics(&generated, &reference, cfg.eval.projections, &eval_seed.split("projections")).map_err(|e| run.fail(e))?;
    reports.push(diag.to_report("sliced_w1[generated,reference]", cfg.eval.w1_bound, generated.len()));
    let calibration = mix.sample_points(cfg.eval.reference_samples, &eval_seed.split("calibration"));
    let base = distribution_diagnostics(&calibration, &reference, cfg.eval.projections, &eval_seed.split("projections")).map_err(|e| run.fail(e))?;
    let mut cal = base.to_report("sliced_w1[calibration,reference]", f64::INFINITY, calibration.len());
    cal.bound = None;
    cal.criterion = "self-distance baseline, reported only".into();
    cal.pass = true;
    reports.push(cal);
    reports.push(MCReport {
        name: "mean_gap[generated,reference]".into(),
        criterion: "reported only".into(),
        estimate: diag.mean_gap,
        std_error: 0.0,
        n: generated.len(),
        bound: None,
        pass: true,
    });
    reports.push(MCReport {
        name: "cov_gap[generated,reference]".into(),
        criterion: "reported only".into(),
        estimate: diag.cov_gap,
        std_error: 0.0,
        n: generated.len(),
        bound: None,
        pass: true,
    });

    let report_header = header(&[("generated", &gen_path), ("mixture", &mix_path)]).map_err(|e| run.fail(e))?;
    let report_path = run.path("report.csv");
    io::write_report_csv(&report_path, &reports, &report_header).map_err(|e| run.fail(e))?;
    run.record(report_path);
    let summary_path = run.path("summary.txt");
    std::fs::write(&summary_path, io::report_summary(&reports)).map_err(|e| run.fail(e))?;
    run.record(summary_path);

    run.stage = "manifest";
    let all_pass = reports.iter().all(|r| r.pass);
    let artifacts = run
        .artifacts
        .iter()
        .map(|p| {
            Ok(ManifestEntry {
                path: p.strip_prefix(out_dir).unwrap_or(p).display().to_string(),
                sha256: io::file_sha256(p)?,
            })
        })
        .collect::<Result<Vec<_>, io::IoError>>()
        .map_err(|e| run.fail(e))?;
    let manifest = Manifest { header: ArtifactHeader::new(Some(cfg.seed)).with_input("config", config_hash.clone()), artifacts, all_pass };
    let manifest_path = run.path("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| run.fail(e))? + "\n";
    std::fs::write(&manifest_path, text).map_err(|e| run.fail(e))?;
    run.record(manifest_path);

    Ok(PipelineOutcome { out_dir: out_dir.to_path_buf(), artifacts: run.artifacts, reports, all_pass })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
seed = 5
oracle = true
[mixture]
preset = "symmetric-pair-1d"
[data]
n_samples = 6000
[schedule]
horizon = 3.0
delta = 0.05
steps = 6
[learn]
degree = 3
n_train = 4000
n_val = 1000
[sampler]
n_samples = 500
[eval]
score_times = [0.5]
score_samples = 2000
reference_samples = 500
projections = 4
"#;

    #[test]
    fn small_run_is_reproducible() {
        let cfg = ExperimentConfig::parse(SMALL, Path::new(".")).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = run_pipeline(&cfg, SMALL, a.path()).unwrap();
        let rb = run_pipeline(&cfg, SMALL, b.path()).unwrap();
        assert_eq!(ra.artifacts.len(), rb.artifacts.len());
        for (pa, pb) in ra.artifacts.iter().zip(&rb.artifacts) {
            assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap(), "{}", pa.display());
        }
        let parsed = io::read_report_csv(&a.path().join("report.csv")).unwrap();
        assert_eq!(parsed, ra.reports);
        let model = io::read_model(&a.path().join("models/step_0000.json")).unwrap();
        assert_eq!(model.pieces.len(), model.clustering.num_pieces());
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let text = SMALL.replace("steps = 6", "steps = 5");
        let cfg = ExperimentConfig::parse(&text, Path::new(".")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = run_pipeline(&cfg, &text, dir.path()).unwrap_err();
        assert_eq!(err.stage, "schedule");
        assert_eq!(err.artifacts.len(), 3);
    }
}
