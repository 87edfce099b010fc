//! Time schedule and exponential-integrator reverse sampler.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::mixture::GaussianMixture;
use crate::rng::SeedTree;
use crate::score_model::PiecewiseScoreModel;

const SCHEDULE_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("invalid schedule parameters: {0}")]
    Parameters(String),
    #[error("geometric steps overshoot T - delta: last point before forcing is at distance {remaining} from T but delta = {delta}")]
    Overshoot { remaining: f64, delta: f64 },
    #[error("step {step}: gap {gap} exceeds kappa * min(1, T - t) = {limit}")]
    StepTooLarge { step: usize, gap: f64, limit: f64 },
    #[error("no score model covers time {0}")]
    MissingModel(f64),
    #[error("n_samples must be at least 1")]
    NoSamples,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeSchedule {
    pub times: Vec<f64>,
    pub horizon: f64,
    pub delta: f64,
    pub kappa: f64,
}

impl TimeSchedule {
    pub fn num_steps(&self) -> usize {
        self.times.len() - 1
    }
    pub fn gaps(&self) -> Vec<f64> {
        self.times.windows(2).map(|w| w[1] - w[0]).collect()
    }
    /// Noise levels T − t_ℓ at which scores are queried, ℓ = 0..N−1.
    pub fn query_times(&self) -> Vec<f64> {
        self.times[..self.times.len() - 1].iter().map(|t| self.horizon - t).collect()
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        for (step, w) in self.times.windows(2).enumerate() {
            let gap = w[1] - w[0];
            let limit = self.kappa * (self.horizon - w[0]).min(1.0) + SCHEDULE_TOL;
            if !(gap > 0.0) || gap > limit {
                return Err(SamplerError::StepTooLarge { step, gap, limit });
            }
        }
        Ok(())
    }
}

/// Uniform steps on [0, T − 1], then T − t_{N/2+ℓ} = (1+κ)^{−ℓ}, with the
/// last point moved to T − δ. Without κ the geometric ratio is chosen so the
/// series would reach δ exactly one step past the end.
pub fn build_schedule(horizon: f64, delta: f64, n: usize, kappa: Option<f64>) -> Result<TimeSchedule, SamplerError> {
    if n < 4 || n % 2 != 0 {
        return Err(SamplerError::Parameters(format!("N must be even and at least 4, got {n}")));
    }
    if !(delta > 0.0 && delta < 1.0 && horizon > 1.0) {
        return Err(SamplerError::Parameters(format!("need 0 < delta < 1 < T, got delta = {delta}, T = {horizon}")));
    }
    let half = n / 2;
    let uniform = (horizon - 1.0) / half as f64;
    let geometric = match kappa {
        Some(k) if !(k > 0.0 && k.is_finite()) => {
            return Err(SamplerError::Parameters(format!("kappa must be positive, got {k}")))
        }
        Some(k) => k,
        None => delta.powf(-2.0 / n as f64) - 1.0,
    };
    let remaining = (1.0 + geometric).powi(-(half as i32 - 1));
    if remaining <= delta {
        return Err(SamplerError::Overshoot { remaining, delta });
    }
    let mut times = Vec::with_capacity(n + 1);
    for i in 0..half {
        times.push((horizon - 1.0) * i as f64 / half as f64);
    }
    times.push(horizon - 1.0);
    for l in 1..half {
        times.push(horizon - (1.0 + geometric).powi(-(l as i32)));
    }
    times.push(horizon - delta);
    let schedule = TimeSchedule { times, horizon, delta, kappa: kappa.unwrap_or(uniform.max(geometric)) };
    schedule.validate()?;
    Ok(schedule)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RhoMode {
    /// ρ = e^{γ}, the exact integrator of the linear part.
    #[default]
    Full,
    /// ρ = e^{γ/2}.
    Half,
}

impl RhoMode {
    pub fn rho(self, gap: f64) -> f64 {
        match self {
            RhoMode::Full => gap.exp(),
            RhoMode::Half => (gap / 2.0).exp(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub schedule: TimeSchedule,
    pub n_samples: usize,
    pub seed: u64,
    pub rho_mode: RhoMode,
}

/// A score function of (x, noise time) that can be frozen at one time.
pub trait ScoreField: Sync {
    fn dim(&self) -> usize;
    fn at_time(&self, t: f64) -> Result<Box<dyn Fn(&[f64]) -> Vec<f64> + Sync + '_>, SamplerError>;
}

/// Exact score of a known mixture under the forward process.
pub struct ExactScoreField<'a> {
    pub mixture: &'a GaussianMixture,
}

impl ScoreField for ExactScoreField<'_> {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }
    fn at_time(&self, t: f64) -> Result<Box<dyn Fn(&[f64]) -> Vec<f64> + Sync + '_>, SamplerError> {
        let noised = self.mixture.noised(t);
        Ok(Box::new(move |x: &[f64]| noised.score(x)))
    }
}

/// Learned models, one per query time; lookup picks the closest model time.
pub struct LearnedScoreField<'a> {
    pub models: &'a [PiecewiseScoreModel],
    /// Largest accepted |model time − query time|.
    pub tolerance: f64,
}

impl ScoreField for LearnedScoreField<'_> {
    fn dim(&self) -> usize {
        self.models.first().map_or(0, |m| m.dim())
    }
    fn at_time(&self, t: f64) -> Result<Box<dyn Fn(&[f64]) -> Vec<f64> + Sync + '_>, SamplerError> {
        let best = self
            .models
            .iter()
            .min_by(|a, b| (a.time - t).abs().total_cmp(&(b.time - t).abs()))
            .filter(|m| (m.time - t).abs() <= self.tolerance)
            .ok_or(SamplerError::MissingModel(t))?;
        Ok(Box::new(move |x: &[f64]| best.eval(x)))
    }
}

/// Any closure of (x, t).
pub struct FnScoreField<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64], f64) -> Vec<f64> + Sync> ScoreField for FnScoreField<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn at_time(&self, t: f64) -> Result<Box<dyn Fn(&[f64]) -> Vec<f64> + Sync + '_>, SamplerError> {
        Ok(Box::new(move |x: &[f64]| (self.f)(x, t)))
    }
}

/// ρy + 2(ρ − 1)s + √(ρ² − 1)z with the score s already evaluated.
pub fn reverse_step_with_noise(y: &[f64], score: &[f64], gap: f64, mode: RhoMode, z: &[f64]) -> Vec<f64> {
    let rho = mode.rho(gap);
    let drift = 2.0 * (rho - 1.0);
    let spread = (rho * rho - 1.0).max(0.0).sqrt();
    y.iter().zip(score).zip(z).map(|((y, s), z)| rho * y + drift * s + spread * z).collect()
}

/// One reverse step from t_lo to t_hi; the score is queried at noise time T − t_lo
/// through `score` already frozen there.
pub fn reverse_step(y: &[f64], score: &dyn Fn(&[f64]) -> Vec<f64>, t_lo: f64, t_hi: f64, mode: RhoMode, rng: &mut impl Rng) -> Vec<f64> {
    assert!(t_hi > t_lo, "reverse step needs t_hi > t_lo");
    let z: Vec<f64> = (0..y.len()).map(|_| rng.sample(StandardNormal)).collect();
    reverse_step_with_noise(y, &score(y), t_hi - t_lo, mode, &z)
}

/// Runs every trajectory from y₀ ~ N(0, I) through the schedule.
/// Trajectory i draws all its randomness from its own stream.
pub fn generate_samples(field: &dyn ScoreField, config: &SamplerConfig) -> Result<Vec<Vec<f64>>, SamplerError> {
    if config.n_samples == 0 {
        return Err(SamplerError::NoSamples);
    }
    let d = field.dim();
    let seed = SeedTree::new(config.seed).split("reverse");
    let mut state: Vec<(Vec<f64>, ChaCha8Rng)> = (0..config.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed.stream(i as u64);
            let y = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            (y, rng)
        })
        .collect();
    let sched = &config.schedule;
    for w in sched.times.windows(2) {
        let score = field.at_time(sched.horizon - w[0])?;
        state.par_iter_mut().for_each(|(y, rng)| {
            *y = reverse_step(y, &*score, w[0], w[1], config.rho_mode, rng);
        });
    }
    Ok(state.into_iter().map(|(y, _)| y).collect())
}
