//! Well-conditioned Gaussian mixtures: construction, sampling, densities,
//! exact scores and the forward (Ornstein–Uhlenbeck) noising process.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::{self, mat_vec, quad_form};
use crate::rng::{SeedTree, CHUNK};

/// Slack allowed when checking eigenvalues against [α, β].
const EIGEN_SLACK: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MixtureError {
    #[error("mixture has no components")]
    Empty,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error("component {component}: eigenvalue {eigenvalue} outside [{alpha}, {beta}]")]
    Eigenvalue { component: usize, eigenvalue: f64, alpha: f64, beta: f64 },
    #[error("component {component}: covariance is not positive definite (smallest eigenvalue {eigenvalue})")]
    NotPositiveDefinite { component: usize, eigenvalue: f64 },
    #[error("component {component}: ||mean|| + ||cov - I||_F = {value} exceeds R = {radius}")]
    Radius { component: usize, value: f64, radius: f64 },
    #[error("invalid conditioning parameters: {0}")]
    Conditioning(String),
    #[error("non-finite parameter in component {0}")]
    NonFinite(usize),
    #[error("noise time must be positive, got {0}")]
    Time(f64),
    #[error("index set must be a nonempty subset of 0..{k}")]
    Subset { k: usize },
}

/// One Gaussian N(µ, Q) with cached Cholesky factor, inverse and log-determinant.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianComponent {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    cholesky: DMatrix<f64>,
    log_det: f64,
    precision: DMatrix<f64>,
}

impl GaussianComponent {
    /// Symmetrizes the covariance and caches its factorizations.
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self, MixtureError> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(MixtureError::Dimension { expected: d, got: covariance.nrows() });
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(MixtureError::NonFinite(0));
        }
        let covariance = linalg::symmetrize(&covariance);
        let chol = match covariance.clone().cholesky() {
            Some(c) => c,
            None => {
                let eigenvalue = linalg::eigenvalues(&covariance)[0];
                return Err(MixtureError::NotPositiveDefinite { component: 0, eigenvalue });
            }
        };
        let cholesky = chol.l();
        let log_det = 2.0 * (0..d).map(|i| cholesky[(i, i)].ln()).sum::<f64>();
        let precision = linalg::symmetrize(&chol.inverse());
        Ok(GaussianComponent { mean, covariance, cholesky, log_det, precision })
    }

    pub fn from_slices(mean: &[f64], covariance_rows: &[f64]) -> Result<Self, MixtureError> {
        let d = mean.len();
        if covariance_rows.len() != d * d {
            return Err(MixtureError::Dimension { expected: d * d, got: covariance_rows.len() });
        }
        Self::new(DVector::from_row_slice(mean), DMatrix::from_row_slice(d, d, covariance_rows))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }
    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }
    /// Lower-triangular L with L Lᵀ = Q.
    pub fn cholesky(&self) -> &DMatrix<f64> {
        &self.cholesky
    }
    pub fn log_det(&self) -> f64 {
        self.log_det
    }
    /// Q⁻¹.
    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let diff: Vec<f64> = x.iter().zip(self.mean.iter()).map(|(a, b)| a - b).collect();
        let d = self.dim() as f64;
        -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + self.log_det + quad_form(&self.precision, &diff))
    }

    /// Score of this single Gaussian, −Q⁻¹(x − µ).
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let diff: Vec<f64> = x.iter().zip(self.mean.iter()).map(|(a, b)| a - b).collect();
        mat_vec(&self.precision, &diff).into_iter().map(|v| -v).collect()
    }

    /// µ + L z.
    pub fn transform_standard(&self, z: &[f64]) -> Vec<f64> {
        let mut out = mat_vec(&self.cholesky, z);
        for (o, m) in out.iter_mut().zip(self.mean.iter()) {
            *o += m;
        }
        out
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.transform_standard(&z)
    }

    /// Component of the forward process at time t: N(e^{−t}µ, e^{−2t}Q + (1 − e^{−2t})I).
    pub fn noised(&self, t: f64) -> GaussianComponent {
        if t == 0.0 {
            return self.clone();
        }
        let decay = (-t).exp();
        let var_decay = (-2.0 * t).exp();
        let d = self.dim();
        let mean = &self.mean * decay;
        let cov = &self.covariance * var_decay + DMatrix::identity(d, d) * (-(-2.0 * t).exp_m1());
        GaussianComponent::new(mean, cov).expect("noised covariance stays positive definite")
    }
}

/// ‖µ_a − µ_b‖₂ + ‖Q_a − Q_b‖_F.
pub fn parameter_distance(a: &GaussianComponent, b: &GaussianComponent) -> f64 {
    (a.mean() - b.mean()).norm() + linalg::frobenius(&(a.covariance() - b.covariance()))
}

/// Conditioning bounds: eigenvalues in [α, β], parameters within radius R.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditioningParams {
    pub alpha: f64,
    pub beta: f64,
    pub radius: f64,
    pub tau: f64,
    pub lambda_min: f64,
}

impl ConditioningParams {
    pub fn new(alpha: f64, beta: f64, radius: f64, lambda_min: f64) -> Result<Self, MixtureError> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(MixtureError::Conditioning(format!("alpha must lie in (0, 1], got {alpha}")));
        }
        if !(beta >= 1.0 && beta.is_finite()) {
            return Err(MixtureError::Conditioning(format!("beta must be >= 1, got {beta}")));
        }
        if !(radius >= 1.0 && radius.is_finite()) {
            return Err(MixtureError::Conditioning(format!("R must be >= 1, got {radius}")));
        }
        Ok(ConditioningParams { alpha, beta, radius, tau: beta / alpha * radius.ln(), lambda_min })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub component: usize,
    pub point: Vec<f64>,
}

/// One draw of the forward process: clean point, noised point and the noise used.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardSample {
    pub x0: Vec<f64>,
    pub xt: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    components: Vec<GaussianComponent>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    conditioning: ConditioningParams,
}

impl GaussianMixture {
    /// Validates every well-conditioning requirement. Weights must sum to one
    /// within 1e-9; sums off by more than 1e-12 are renormalized.
    pub fn new(
        components: Vec<GaussianComponent>,
        weights: Vec<f64>,
        alpha: f64,
        beta: f64,
        radius: f64,
    ) -> Result<Self, MixtureError> {
        if components.is_empty() {
            return Err(MixtureError::Empty);
        }
        if weights.len() != components.len() {
            return Err(MixtureError::Weights(format!(
                "{} weights for {} components",
                weights.len(),
                components.len()
            )));
        }
        if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(MixtureError::Weights("every weight must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(MixtureError::Weights(format!("weights sum to {total}, not 1")));
        }
        let weights: Vec<f64> =
            if (total - 1.0).abs() > 1e-12 { weights.iter().map(|w| w / total).collect() } else { weights };
        let lambda_min = weights.iter().cloned().fold(f64::INFINITY, f64::min);
        let conditioning = ConditioningParams::new(alpha, beta, radius, lambda_min)?;
        let d = components[0].dim();
        for (i, c) in components.iter().enumerate() {
            if c.dim() != d {
                return Err(MixtureError::Dimension { expected: d, got: c.dim() });
            }
            let eig = linalg::eigenvalues(c.covariance());
            let tol = EIGEN_SLACK * beta.max(1.0);
            for &e in &eig {
                if e < alpha - tol || e > beta + tol {
                    return Err(MixtureError::Eigenvalue { component: i, eigenvalue: e, alpha, beta });
                }
            }
            let value = c.mean().norm() + linalg::frobenius(&(c.covariance() - DMatrix::identity(d, d)));
            if value > radius * (1.0 + 1e-12) {
                return Err(MixtureError::Radius { component: i, value, radius });
            }
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(GaussianMixture { components, weights, log_weights, conditioning })
    }

    /// Builds components from raw parameters, tagging errors with the component index.
    pub fn from_parameters(
        means: &[DVector<f64>],
        covariances: &[DMatrix<f64>],
        weights: Vec<f64>,
        alpha: f64,
        beta: f64,
        radius: f64,
    ) -> Result<Self, MixtureError> {
        if means.len() != covariances.len() {
            return Err(MixtureError::Weights(format!(
                "{} means but {} covariances",
                means.len(),
                covariances.len()
            )));
        }
        let mut comps = Vec::with_capacity(means.len());
        for (i, (m, q)) in means.iter().zip(covariances).enumerate() {
            let c = GaussianComponent::new(m.clone(), q.clone()).map_err(|e| match e {
                MixtureError::NotPositiveDefinite { eigenvalue, .. } => {
                    MixtureError::NotPositiveDefinite { component: i, eigenvalue }
                }
                MixtureError::NonFinite(_) => MixtureError::NonFinite(i),
                other => other,
            })?;
            comps.push(c);
        }
        Self::new(comps, weights, alpha, beta, radius)
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }
    pub fn num_components(&self) -> usize {
        self.components.len()
    }
    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn conditioning(&self) -> &ConditioningParams {
        &self.conditioning
    }

    /// log(λ_i N(x; µ_i, Q_i)) for every component.
    pub fn log_joint(&self, x: &[f64]) -> Vec<f64> {
        self.components.iter().zip(&self.log_weights).map(|(c, lw)| lw + c.log_pdf(x)).collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.log_joint(x))
    }

    /// Posterior component probabilities w_i(x).
    pub fn posterior(&self, x: &[f64]) -> Vec<f64> {
        let lj = self.log_joint(x);
        let lse = log_sum_exp(&lj);
        lj.iter().map(|v| (v - lse).exp()).collect()
    }

    /// ∇ log density = −Σ w_i(x) Q_i⁻¹(x − µ_i).
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d];
        let lj = self.log_joint(x);
        let lse = log_sum_exp(&lj);
        for (c, l) in self.components.iter().zip(&lj) {
            let w = (l - lse).exp();
            if w == 0.0 {
                continue;
            }
            let g = c.score(x);
            for (o, gi) in out.iter_mut().zip(&g) {
                *o += w * gi;
            }
        }
        out
    }

    /// Law of the forward process at time t.
    pub fn noised(&self, t: f64) -> GaussianMixture {
        assert!(t >= 0.0, "noise time must be nonnegative");
        if t == 0.0 {
            return self.clone();
        }
        let components: Vec<GaussianComponent> = self.components.iter().map(|c| c.noised(t)).collect();
        let keep = (-2.0 * t).exp();
        let alpha = keep * self.conditioning.alpha - (-2.0 * t).exp_m1();
        let beta = keep * self.conditioning.beta - (-2.0 * t).exp_m1();
        let conditioning = ConditioningParams {
            alpha: alpha.min(1.0),
            beta: beta.max(1.0),
            radius: self.conditioning.radius,
            tau: beta.max(1.0) / alpha.min(1.0) * self.conditioning.radius.ln(),
            lambda_min: self.conditioning.lambda_min,
        };
        GaussianMixture {
            components,
            weights: self.weights.clone(),
            log_weights: self.log_weights.clone(),
            conditioning,
        }
    }

    /// Sub-mixture on the components listed in `subset`, weights renormalized.
    pub fn restrict(&self, subset: &[usize]) -> Result<GaussianMixture, MixtureError> {
        let k = self.num_components();
        let mut idx = subset.to_vec();
        idx.sort_unstable();
        idx.dedup();
        if idx.is_empty() || idx.iter().any(|&i| i >= k) {
            return Err(MixtureError::Subset { k });
        }
        if idx.len() == k {
            return Ok(self.clone());
        }
        let total: f64 = idx.iter().map(|&i| self.weights[i]).sum();
        let weights: Vec<f64> = idx.iter().map(|&i| self.weights[i] / total).collect();
        let mut conditioning = self.conditioning;
        conditioning.lambda_min = weights.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(GaussianMixture {
            components: idx.iter().map(|&i| self.components[i].clone()).collect(),
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            weights,
            conditioning,
        })
    }

    fn draw_component<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.weights.len() - 1
    }

    /// `n` labeled draws; chunk c uses stream c of `seed`.
    pub fn sample(&self, n: usize, seed: &SeedTree) -> Vec<LabeledSample> {
        let chunks = n.div_ceil(CHUNK);
        (0..chunks)
            .into_par_iter()
            .flat_map_iter(|c| {
                let mut rng = seed.stream(c as u64);
                let len = CHUNK.min(n - c * CHUNK);
                (0..len)
                    .map(|_| {
                        let i = self.draw_component(&mut rng);
                        LabeledSample { component: i, point: self.components[i].sample(&mut rng) }
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    pub fn sample_points(&self, n: usize, seed: &SeedTree) -> Vec<Vec<f64>> {
        self.sample(n, seed).into_iter().map(|s| s.point).collect()
    }

    /// Draws (x₀, x_t, z) with x_t = e^{−t}x₀ + √(1 − e^{−2t}) z.
    pub fn forward_sample(&self, t: f64, n: usize, seed: &SeedTree) -> Result<Vec<ForwardSample>, MixtureError> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(MixtureError::Time(t));
        }
        let decay = (-t).exp();
        let sigma = (-(-2.0 * t).exp_m1()).sqrt();
        let d = self.dim();
        let chunks = n.div_ceil(CHUNK);
        Ok((0..chunks)
            .into_par_iter()
            .flat_map_iter(|c| {
                let mut rng = seed.stream(c as u64);
                let len = CHUNK.min(n - c * CHUNK);
                (0..len)
                    .map(|_| {
                        let i = self.draw_component(&mut rng);
                        let x0 = self.components[i].sample(&mut rng);
                        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                        let xt = x0.iter().zip(&z).map(|(a, b)| decay * a + sigma * b).collect();
                        ForwardSample { x0, xt, z }
                    })
                    .collect::<Vec<_>>()
            })
            .collect())
    }

    /// Mean and second moment E[xxᵀ] in closed form.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim();
        let mut mean = DVector::zeros(d);
        let mut second = DMatrix::zeros(d, d);
        for (c, w) in self.components.iter().zip(&self.weights) {
            mean += c.mean() * *w;
            second += (c.covariance() + c.mean() * c.mean().transpose()) * *w;
        }
        (mean, second)
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Draws a mixture with eigenvalues uniform on [α, β], random orientations and
/// means uniform in a ball of radius `mean_radius`; R is the smallest valid radius.
pub fn random_mixture<R: Rng + ?Sized>(
    d: usize,
    k: usize,
    alpha: f64,
    beta: f64,
    mean_radius: f64,
    rng: &mut R,
) -> GaussianMixture {
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    let mut radius = 1.0f64;
    for _ in 0..k {
        let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = linalg::norm(&dir).max(1e-300);
        let r = mean_radius * rng.random::<f64>().powf(1.0 / d as f64);
        let mean = DVector::from_iterator(d, dir.iter().map(|v| v / n * r));
        let cov = random_covariance(d, alpha, beta, rng);
        radius = radius.max(mean.norm() + linalg::frobenius(&(&cov - DMatrix::identity(d, d))));
        means.push(mean);
        covs.push(cov);
    }
    let raw: Vec<f64> = (0..k).map(|_| 0.2 + rng.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / total).collect();
    GaussianMixture::from_parameters(&means, &covs, weights, alpha, beta, radius * (1.0 + 1e-9))
        .expect("random mixture satisfies its own conditioning")
}

/// Uniformly oriented covariance with eigenvalues uniform on [α, β].
pub fn random_covariance<R: Rng + ?Sized>(d: usize, alpha: f64, beta: f64, rng: &mut R) -> DMatrix<f64> {
    let o = random_orthogonal(d, rng);
    let eig = DVector::from_iterator(d, (0..d).map(|_| alpha + (beta - alpha) * rng.random::<f64>()));
    linalg::symmetrize(&(&o * DMatrix::from_diagonal(&eig) * o.transpose()))
}

pub fn random_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            for i in 0..d {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// Stable s(x; M) − s(x; M(U)) using log-space posterior mass outside U.
pub fn score_gap(mix: &GaussianMixture, subset: &[usize], x: &[f64]) -> Vec<f64> {
    let d = mix.dim();
    let lj = mix.log_joint(x);
    let inside: Vec<usize> = subset.to_vec();
    let outside: Vec<usize> = (0..mix.num_components()).filter(|i| !inside.contains(i)).collect();
    let mut out = vec![0.0; d];
    if outside.is_empty() {
        return out;
    }
    let lse_all = log_sum_exp(&lj);
    let lin: Vec<f64> = inside.iter().map(|&i| lj[i]).collect();
    let lse_in = log_sum_exp(&lin);
    let lout: Vec<f64> = outside.iter().map(|&i| lj[i]).collect();
    let mass_out = (log_sum_exp(&lout) - lse_all).exp();
    // s_M − s_U = Σ_{j∉U} w_j g_j − W_out·Σ_{i∈U} w_i^U g_i  with g = component scores.
    for &i in &inside {
        let w = (lj[i] - lse_in).exp() * mass_out;
        if w == 0.0 {
            continue;
        }
        let g = mix.components()[i].score(x);
        for (o, gi) in out.iter_mut().zip(&g) {
            *o -= w * gi;
        }
    }
    for &j in &outside {
        let w = (lj[j] - lse_all).exp();
        if w == 0.0 {
            continue;
        }
        let g = mix.components()[j].score(x);
        for (o, gj) in out.iter_mut().zip(&g) {
            *o += w * gj;
        }
    }
    out
}
