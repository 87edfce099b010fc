//! Fitting piecewise polynomial scores to the denoising objective.
//!
//! Given a clustering, every piece is an ordinary ridge regression of the
//! target −z/√(1 − e^{−2t}) on polynomial features of x_t. The outer loop
//! brute-forces candidate parameter tuples, partition pairs and threshold
//! assignments, keeping the configuration with the smallest clipped
//! validation loss.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::clustering::{
    enumerate_partition_pairs, margin_eta, oracle_thresholds, threshold_grid, ClusteringError, ClusteringFunction,
    ComponentEstimate, PartitionPair,
};
use crate::mixture::{GaussianMixture, MixtureError};
use crate::parallel::{add_into, chunked_reduce};
use crate::rng::SeedTree;
use crate::score_model::{boundary_thresholds, FeatureMap, PieceModel, PiecewiseScoreModel, ScoreModelError};
use crate::spectral::CandidateList;

const ROW_CHUNK: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnError {
    #[error("noise time must be positive, got {0}")]
    Time(f64),
    #[error("piece {piece}: normal equations are singular ({rows} usable rows); add ridge or more data")]
    Singular { piece: usize, rows: usize },
    #[error("{what}: {size} configurations exceed the cap of {cap}")]
    Cap { what: String, size: u128, cap: usize },
    #[error("candidate list has {have} entries but {need} components are required")]
    Candidates { have: usize, need: usize },
    #[error("training data is empty")]
    NoData,
    #[error(transparent)]
    Mixture(#[from] MixtureError),
    #[error(transparent)]
    Clustering(#[from] ClusteringError),
    #[error(transparent)]
    Model(#[from] ScoreModelError),
}

/// Rows (x_t, −z/σ_t) of the denoising regression at time t.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoisingBatch {
    pub time: f64,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub noise_norms: Vec<f64>,
}

impl DenoisingBatch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }
    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, |x| x.len())
    }

    fn from_noise(time: f64, inputs: Vec<Vec<f64>>, noise: Vec<Vec<f64>>) -> Self {
        let sigma = noise_scale(time);
        let noise_norms = noise.iter().map(|z| crate::linalg::norm(z)).collect();
        let targets = noise.into_iter().map(|z| z.into_iter().map(|v| -v / sigma).collect()).collect();
        DenoisingBatch { time, inputs, targets, noise_norms }
    }

    /// Rows concatenated with another batch at the same time.
    pub fn concat(&self, other: &DenoisingBatch) -> DenoisingBatch {
        let mut out = self.clone();
        out.inputs.extend(other.inputs.iter().cloned());
        out.targets.extend(other.targets.iter().cloned());
        out.noise_norms.extend(other.noise_norms.iter().cloned());
        out
    }
}

/// √(1 − e^{−2t}).
pub fn noise_scale(t: f64) -> f64 {
    (-(-2.0 * t).exp_m1()).sqrt()
}

pub fn make_denoising_batch(mix: &GaussianMixture, t: f64, n: usize, seed: &SeedTree) -> Result<DenoisingBatch, LearnError> {
    if !(t > 0.0) {
        return Err(LearnError::Time(t));
    }
    let draws = mix.forward_sample(t, n, seed)?;
    let (inputs, noise) = draws.into_iter().map(|f| (f.xt, f.z)).unzip();
    Ok(DenoisingBatch::from_noise(t, inputs, noise))
}

/// Noises given clean points with the forward process.
pub fn denoising_batch_from_points(points: &[Vec<f64>], t: f64, seed: &SeedTree) -> Result<DenoisingBatch, LearnError> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    use rayon::prelude::*;
    if !(t > 0.0) {
        return Err(LearnError::Time(t));
    }
    let decay = (-t).exp();
    let sigma = noise_scale(t);
    let chunks: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = points
        .par_chunks(crate::rng::CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut rng = seed.stream(c as u64);
            chunk
                .iter()
                .map(|x0| {
                    let z: Vec<f64> = x0.iter().map(|_| rng.sample(StandardNormal)).collect();
                    let xt = x0.iter().zip(&z).map(|(a, b)| decay * a + sigma * b).collect();
                    (xt, z)
                })
                .unzip()
        })
        .collect();
    let mut inputs = Vec::with_capacity(points.len());
    let mut noise = Vec::with_capacity(points.len());
    for (x, z) in chunks {
        inputs.extend(x);
        noise.extend(z);
    }
    Ok(DenoisingBatch::from_noise(t, inputs, noise))
}

/// Rows with ‖x_t‖ > R_x or ‖z‖ > R_z are dropped from the loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipConfig {
    pub r_x: f64,
    pub r_z: f64,
}

impl ClipConfig {
    /// Twice the largest input and noise norms of the batch.
    pub fn from_batch(batch: &DenoisingBatch) -> Self {
        let r_x = batch.inputs.iter().map(|x| crate::linalg::norm(x)).fold(0.0, f64::max);
        let r_z = batch.noise_norms.iter().cloned().fold(0.0, f64::max);
        ClipConfig { r_x: 2.0 * r_x, r_z: 2.0 * r_z }
    }

    pub fn keeps(&self, batch: &DenoisingBatch, row: usize) -> bool {
        crate::linalg::norm(&batch.inputs[row]) <= self.r_x && batch.noise_norms[row] <= self.r_z
    }
}

/// Per-piece boundary thresholds from the clustering estimates.
pub fn piece_boundaries(clustering: &ClusteringFunction, beta: f64, delta: f64, c1: f64, c2: f64) -> Vec<(f64, f64)> {
    clustering
        .refinement()
        .pieces
        .iter()
        .map(|members| {
            let est: Vec<&ComponentEstimate> = members.iter().map(|&i| &clustering.estimates()[i]).collect();
            boundary_thresholds(&est, clustering.alpha(), beta, delta, c1, c2)
        })
        .collect()
}

/// Solves (G + ridge·tr(G)/p·I) B = R by Cholesky; an all-zero Gram uses ridge as is.
fn solve_ridge(gram: &DMatrix<f64>, rhs: &DMatrix<f64>, ridge: f64) -> Option<DMatrix<f64>> {
    let p = gram.nrows();
    let tr = gram.trace();
    let lam = if tr > 0.0 { ridge * tr / p as f64 } else { ridge };
    let mut a = gram.clone();
    for i in 0..p {
        a[(i, i)] += lam;
    }
    let chol = a.cholesky()?;
    let sol = chol.solve(rhs);
    sol.iter().all(|v| v.is_finite()).then_some(sol)
}

/// Least-squares fit of every piece on the rows it owns in the polynomial branch.
pub fn fit_pieces(
    batch: &DenoisingBatch,
    clustering: &ClusteringFunction,
    feature_map: &FeatureMap,
    boundaries: &[(f64, f64)],
    ridge: f64,
    clip: &ClipConfig,
) -> Result<Vec<PieceModel>, LearnError> {
    let n_pieces = clustering.num_pieces();
    let p = feature_map.len();
    let d = feature_map.dim();
    let block = p * p + p * d + 1;
    let members: Vec<Vec<&ComponentEstimate>> = clustering
        .refinement()
        .pieces
        .iter()
        .map(|m| m.iter().map(|&i| &clustering.estimates()[i]).collect())
        .collect();
    let sums = chunked_reduce(
        batch.len(),
        ROW_CHUNK,
        |r| {
            let mut acc = vec![0.0; n_pieces * block];
            let mut phi = vec![0.0; p];
            for row in r {
                if !clip.keeps(batch, row) {
                    continue;
                }
                let x = &batch.inputs[row];
                let piece = clustering.classify(x);
                let (t1, t2) = boundaries[piece];
                if !crate::score_model::boundary_indicator(x, &members[piece], t1, t2) {
                    continue;
                }
                feature_map.eval_into(x, &mut phi);
                let acc = &mut acc[piece * block..(piece + 1) * block];
                for a in 0..p {
                    let pa = phi[a];
                    let g = &mut acc[a * p..(a + 1) * p];
                    for b in a..p {
                        g[b] += pa * phi[b];
                    }
                }
                let y = &batch.targets[row];
                for a in 0..p {
                    for c in 0..d {
                        acc[p * p + a * d + c] += phi[a] * y[c];
                    }
                }
                acc[block - 1] += 1.0;
            }
            acc
        },
        add_into,
    )
    .unwrap_or_else(|| vec![0.0; n_pieces * block]);

    let mut out = Vec::with_capacity(n_pieces);
    for (piece, members) in clustering.refinement().pieces.iter().enumerate() {
        let s = &sums[piece * block..(piece + 1) * block];
        let gram = DMatrix::from_fn(p, p, |a, b| if a <= b { s[a * p + b] } else { s[b * p + a] });
        let rhs = DMatrix::from_fn(p, d, |a, c| s[p * p + a * d + c]);
        let rows = s[block - 1] as usize;
        let coefficients = solve_ridge(&gram, &rhs, ridge).ok_or(LearnError::Singular { piece, rows })?;
        let (theta1, theta2) = boundaries[piece];
        out.push(PieceModel { piece_index: piece, members: members.clone(), anchor: members[0], coefficients, theta1, theta2 });
    }
    Ok(out)
}

/// Mean over all rows of ‖ŝ(x_t) − target‖², counting clipped rows as zero.
pub fn clipped_loss(model: &PiecewiseScoreModel, batch: &DenoisingBatch, clip: &ClipConfig) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let total = chunked_reduce(
        batch.len(),
        ROW_CHUNK,
        |r| {
            let mut acc = 0.0;
            for row in r {
                if !clip.keeps(batch, row) {
                    continue;
                }
                let s = model.eval(&batch.inputs[row]);
                acc += s.iter().zip(&batch.targets[row]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            acc
        },
        |a, b| a + b,
    )
    .unwrap();
    total / batch.len() as f64
}

/// Ordinary polynomial regression on a whole batch, with coefficient
/// standard errors from the residual variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionFit {
    pub coefficients: DMatrix<f64>,
    pub standard_errors: DMatrix<f64>,
    pub residual_variance: Vec<f64>,
}

pub fn polynomial_regression(
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    feature_map: &FeatureMap,
    ridge: f64,
) -> Result<RegressionFit, LearnError> {
    let p = feature_map.len();
    let d = targets.first().ok_or(LearnError::NoData)?.len();
    let sums = chunked_reduce(
        inputs.len(),
        ROW_CHUNK,
        |r| {
            let mut acc = vec![0.0; p * p + p * d];
            let mut phi = vec![0.0; p];
            for row in r {
                feature_map.eval_into(&inputs[row], &mut phi);
                for a in 0..p {
                    for b in a..p {
                        acc[a * p + b] += phi[a] * phi[b];
                    }
                    for c in 0..d {
                        acc[p * p + a * d + c] += phi[a] * targets[row][c];
                    }
                }
            }
            acc
        },
        add_into,
    )
    .ok_or(LearnError::NoData)?;
    let gram = DMatrix::from_fn(p, p, |a, b| if a <= b { sums[a * p + b] } else { sums[b * p + a] });
    let rhs = DMatrix::from_fn(p, d, |a, c| sums[p * p + a * d + c]);
    let coefficients = solve_ridge(&gram, &rhs, ridge).ok_or(LearnError::Singular { piece: 0, rows: inputs.len() })?;
    let rss = chunked_reduce(
        inputs.len(),
        ROW_CHUNK,
        |r| {
            let mut acc = vec![0.0; d];
            let mut phi = vec![0.0; p];
            for row in r {
                feature_map.eval_into(&inputs[row], &mut phi);
                for c in 0..d {
                    let pred: f64 = (0..p).map(|a| phi[a] * coefficients[(a, c)]).sum();
                    acc[c] += (targets[row][c] - pred).powi(2);
                }
            }
            acc
        },
        add_into,
    )
    .unwrap();
    let dof = (inputs.len().saturating_sub(p)).max(1) as f64;
    let residual_variance: Vec<f64> = rss.iter().map(|v| v / dof).collect();
    let inv = solve_ridge(&gram, &DMatrix::identity(p, p), ridge).ok_or(LearnError::Singular { piece: 0, rows: inputs.len() })?;
    let standard_errors = DMatrix::from_fn(p, d, |a, c| (residual_variance[c] * inv[(a, a)]).max(0.0).sqrt());
    Ok(RegressionFit { coefficients, standard_errors, residual_variance })
}

/// How thresholds t_ij are chosen in the brute-force loop.
#[derive(Clone, Debug, PartialEq)]
pub enum ThresholdMode {
    /// Enumerate a uniform grid per cross-group pair.
    Grid,
    /// Treat the candidate tuple as exact parameters and use the threshold
    /// `slack` of the way between the two conditional means of the statistic.
    Oracle { slack: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearnConfig {
    pub components: usize,
    pub degree: usize,
    pub ridge: f64,
    pub clip: Option<ClipConfig>,
    pub n_train: usize,
    pub n_val: usize,
    pub alpha: f64,
    pub beta: f64,
    pub boundary_c1: f64,
    pub boundary_c2: f64,
    pub confidence_delta: f64,
    pub threshold_mode: ThresholdMode,
    pub threshold_cap: usize,
    pub threshold_range: f64,
    pub max_tuples: usize,
    pub max_configurations: usize,
    /// Restrict the partition pairs searched; all pairs when `None`.
    pub partition_pairs: Option<Vec<PartitionPair>>,
    pub seed: u64,
}

impl LearnConfig {
    pub fn new(components: usize, alpha: f64, beta: f64, seed: u64) -> Self {
        LearnConfig {
            components,
            degree: 4,
            ridge: 1e-8,
            clip: None,
            n_train: 100_000,
            n_val: 20_000,
            alpha,
            beta,
            boundary_c1: 8.0,
            boundary_c2: 8.0,
            confidence_delta: 0.01,
            threshold_mode: ThresholdMode::Oracle { slack: 0.5 },
            threshold_cap: 3,
            threshold_range: 2.0,
            max_tuples: 64,
            max_configurations: 20_000,
            partition_pairs: None,
            seed,
        }
    }
}

/// One row of the fit report.
#[derive(Clone, Debug, PartialEq)]
pub struct FitRecord {
    pub candidate_id: usize,
    pub partition_id: usize,
    pub threshold_id: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct LearnOutcome {
    pub model: PiecewiseScoreModel,
    pub validation_loss: f64,
    pub train_loss: f64,
    pub report: Vec<FitRecord>,
}

/// Where denoising rows come from.
#[derive(Clone, Copy, Debug)]
pub enum TrainingData<'a> {
    /// Fresh draws from a known mixture.
    Mixture(&'a GaussianMixture),
    /// A fixed pool of clean samples, split into training and validation parts.
    Samples(&'a [Vec<f64>]),
}

/// Training and validation batches at time t for a learning run.
pub fn learning_batches(data: TrainingData<'_>, t: f64, config: &LearnConfig) -> Result<(DenoisingBatch, DenoisingBatch), LearnError> {
    let seed = SeedTree::new(config.seed).split("learn");
    match data {
        TrainingData::Mixture(mix) => Ok((
            make_denoising_batch(mix, t, config.n_train, &seed.split("train"))?,
            make_denoising_batch(mix, t, config.n_val, &seed.split("validation"))?,
        )),
        TrainingData::Samples(points) => {
            if points.len() < 2 {
                return Err(LearnError::NoData);
            }
            let want = config.n_train + config.n_val;
            let cut = if points.len() >= want {
                config.n_train
            } else {
                ((points.len() as u128 * config.n_train as u128 / want.max(1) as u128) as usize).clamp(1, points.len() - 1)
            };
            let end = want.min(points.len());
            Ok((
                denoising_batch_from_points(&points[..cut], t, &seed.split("train"))?,
                denoising_batch_from_points(&points[cut..end], t, &seed.split("validation"))?,
            ))
        }
    }
}

/// k-combinations of 0..n in lexicographic order.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut c: Vec<usize> = (0..k).collect();
    loop {
        out.push(c.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if c[i] < n - k + i {
                c[i] += 1;
                for j in i + 1..k {
                    c[j] = c[j - 1] + 1;
                }
                break;
            }
        }
    }
}

fn cross_pairs(pair: &PartitionPair, k: usize) -> Vec<(usize, usize)> {
    let mut group = vec![0; k];
    for (b, block) in pair.cov_partition.iter().enumerate() {
        for &i in block {
            group[i] = b;
        }
    }
    let mut out = Vec::new();
    for i in 0..k {
        for j in 0..k {
            if group[i] != group[j] {
                out.push((i, j));
            }
        }
    }
    out
}

/// Brute force over (candidate tuple × partition pair × thresholds) with
/// validation selection, on given batches. Ties go to the earliest configuration.
pub fn learn_score_on_batches(
    train: &DenoisingBatch,
    val: &DenoisingBatch,
    candidates: &CandidateList,
    config: &LearnConfig,
) -> Result<LearnOutcome, LearnError> {
    let t = train.time;
    let k = config.components;
    if train.is_empty() {
        return Err(LearnError::NoData);
    }
    if candidates.len() < k {
        return Err(LearnError::Candidates { have: candidates.len(), need: k });
    }
    let tuples = combinations(candidates.len(), k);
    if tuples.len() > config.max_tuples {
        return Err(LearnError::Cap { what: "candidate tuples".into(), size: tuples.len() as u128, cap: config.max_tuples });
    }
    let pairs = match &config.partition_pairs {
        Some(p) => p.clone(),
        None => enumerate_partition_pairs(k)?,
    };
    let grid_size = |pair: &PartitionPair| -> u128 {
        match config.threshold_mode {
            ThresholdMode::Grid => (config.threshold_cap as u128).saturating_pow(cross_pairs(pair, k).len() as u32),
            ThresholdMode::Oracle { .. } => 1,
        }
    };
    let per_tuple: u128 = pairs.iter().map(|p| grid_size(p)).sum();
    let total = per_tuple.saturating_mul(tuples.len() as u128);
    if total > config.max_configurations as u128 {
        return Err(LearnError::Cap {
            what: "candidate tuples x partition pairs x threshold assignments".into(),
            size: total,
            cap: config.max_configurations,
        });
    }

    let clip = config.clip.unwrap_or_else(|| ClipConfig::from_batch(train));
    let feature_map = FeatureMap::fitted(train.dim(), config.degree, &train.inputs);
    let mut best: Option<(f64, f64, PiecewiseScoreModel)> = None;
    let mut report = Vec::new();
    for (candidate_id, tuple) in tuples.iter().enumerate() {
        let estimates: Vec<ComponentEstimate> = tuple
            .iter()
            .map(|&i| {
                let c = &candidates.entries[i];
                ComponentEstimate::noised(&c.mean, &c.covariance, t, config.alpha)
            })
            .collect();
        for (partition_id, pair) in pairs.iter().enumerate() {
            let eta = margin_eta(&estimates, &pair.cov_partition, config.beta);
            let cross = cross_pairs(pair, k);
            let assignments: Vec<DMatrix<f64>> = match config.threshold_mode {
                ThresholdMode::Oracle { slack } => {
                    let covs: Vec<_> = estimates.iter().map(|e| e.covariance.clone()).collect();
                    let precs: Vec<_> = estimates.iter().map(|e| e.precision.clone()).collect();
                    vec![oracle_thresholds(&covs, &precs, slack)]
                }
                ThresholdMode::Grid => {
                    let grid = threshold_grid(config.beta, config.alpha, train.dim(), eta, config.threshold_cap, config.threshold_range);
                    let count = grid.len().pow(cross.len() as u32);
                    (0..count)
                        .map(|mut idx| {
                            let mut m = DMatrix::zeros(k, k);
                            for &(i, j) in cross.iter().rev() {
                                m[(i, j)] = grid[idx % grid.len()];
                                idx /= grid.len();
                            }
                            m
                        })
                        .collect()
                }
            };
            for (threshold_id, thresholds) in assignments.into_iter().enumerate() {
                let cf = ClusteringFunction::new(pair.clone(), estimates.clone(), thresholds, eta, config.alpha)?;
                let bounds = piece_boundaries(&cf, config.beta, config.confidence_delta, config.boundary_c1, config.boundary_c2);
                let (train_loss, val_loss, model) = match fit_pieces(train, &cf, &feature_map, &bounds, config.ridge, &clip) {
                    Ok(pieces) => {
                        let model = PiecewiseScoreModel::new(t, cf, pieces, feature_map.clone())?;
                        (clipped_loss(&model, train, &clip), clipped_loss(&model, val, &clip), Some(model))
                    }
                    Err(LearnError::Singular { .. }) => (f64::INFINITY, f64::INFINITY, None),
                    Err(e) => return Err(e),
                };
                report.push(FitRecord { candidate_id, partition_id, threshold_id, train_loss, val_loss });
                if let Some(model) = model {
                    let better = match &best {
                        None => true,
                        Some((v, _, _)) => val_loss < *v,
                    };
                    if better {
                        best = Some((val_loss, train_loss, model));
                    }
                }
            }
        }
    }
    let (validation_loss, train_loss, model) = best.ok_or(LearnError::Singular { piece: 0, rows: 0 })?;
    Ok(LearnOutcome { model, validation_loss, train_loss, report })
}

pub fn learn_score(data: TrainingData<'_>, t: f64, candidates: &CandidateList, config: &LearnConfig) -> Result<LearnOutcome, LearnError> {
    if !(t > 0.0) {
        return Err(LearnError::Time(t));
    }
    let (train, val) = learning_batches(data, t, config)?;
    learn_score_on_batches(&train, &val, candidates, config)
}

/// ∇ log q_t for a known mixture.
pub fn exact_score_oracle(mix: &GaussianMixture, t: f64) -> impl Fn(&[f64]) -> Vec<f64> + Sync + Send {
    let noised = mix.noised(t);
    move |x: &[f64]| noised.score(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::PartitionPair;
    use crate::mixture::{random_mixture, GaussianComponent};
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian_2d() -> GaussianMixture {
        GaussianMixture::from_parameters(
            &[DVector::from_vec(vec![0.5, -1.0])],
            &[DMatrix::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 0.8])],
            vec![1.0],
            0.5,
            2.0,
            2.0,
        )
        .unwrap()
    }

    fn single_clustering(mix: &GaussianMixture, t: f64) -> ClusteringFunction {
        let c = &mix.components()[0];
        let est = vec![ComponentEstimate::noised(c.mean(), c.covariance(), t, mix.conditioning().alpha)];
        ClusteringFunction::new(PartitionPair::trivial(1), est, DMatrix::zeros(1, 1), 1.0, mix.conditioning().alpha).unwrap()
    }

    #[test]
    fn batch_rejects_zero_time_and_is_deterministic() {
        let mix = gaussian_2d();
        assert!(make_denoising_batch(&mix, 0.0, 10, &SeedTree::new(1)).is_err());
        let a = make_denoising_batch(&mix, 0.5, 1000, &SeedTree::new(1)).unwrap();
        assert_eq!(a, make_denoising_batch(&mix, 0.5, 1000, &SeedTree::new(1)).unwrap());
    }

    #[test]
    fn large_time_targets_have_unit_variance() {
        let mix = gaussian_2d();
        let t = 5.0;
        let b = make_denoising_batch(&mix, t, 100_000, &SeedTree::new(2)).unwrap();
        let expected = 1.0 / (1.0 - (-2.0 * t).exp());
        for c in 0..2 {
            let m = b.targets.iter().map(|y| y[c]).sum::<f64>() / b.len() as f64;
            let v = b.targets.iter().map(|y| (y[c] - m).powi(2)).sum::<f64>() / b.len() as f64;
            assert!((v / expected - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn linear_targets_recover_exact_score() {
        let mix = gaussian_2d();
        let t = 1.0;
        let batch = make_denoising_batch(&mix, t, 100_000, &SeedTree::new(3)).unwrap();
        let cf = single_clustering(&mix, t);
        let fm = FeatureMap::new(2, 1);
        let clip = ClipConfig::from_batch(&batch);
        let bounds = piece_boundaries(&cf, 2.0, 0.01, 8.0, 8.0);
        let pieces = fit_pieces(&batch, &cf, &fm, &bounds, 0.0, &clip).unwrap();
        let noised = mix.noised(t);
        let k = noised.components()[0].precision().clone();
        let mu = noised.components()[0].mean().clone();
        let coef = &pieces[0].coefficients;
        let intercept = &k * &mu;
        for c in 0..2 {
            assert!((coef[(0, c)] - intercept[c]).abs() < 0.02);
            for a in 0..2 {
                assert!((coef[(1 + a, c)] + k[(c, a)]).abs() < 0.02);
            }
        }
    }

    #[test]
    fn ridge_limit_and_duplicated_rows() {
        let mix = gaussian_2d();
        let batch = make_denoising_batch(&mix, 0.5, 5_000, &SeedTree::new(4)).unwrap();
        let cf = single_clustering(&mix, 0.5);
        let fm = FeatureMap::fitted(2, 2, &batch.inputs);
        let clip = ClipConfig::from_batch(&batch);
        let bounds = piece_boundaries(&cf, 2.0, 0.01, 8.0, 8.0);
        let huge = fit_pieces(&batch, &cf, &fm, &bounds, 1e12, &clip).unwrap();
        assert!(huge[0].coefficients.abs().max() < 1e-8);
        let once = fit_pieces(&batch, &cf, &fm, &bounds, 0.0, &clip).unwrap();
        let twice = fit_pieces(&batch.concat(&batch), &cf, &fm, &bounds, 0.0, &clip).unwrap();
        assert!((&once[0].coefficients - &twice[0].coefficients).abs().max() < 1e-9);
    }

    #[test]
    fn empty_region_without_ridge_is_singular() {
        let mix = gaussian_2d();
        let batch = make_denoising_batch(&mix, 0.5, 100, &SeedTree::new(5)).unwrap();
        let cf = single_clustering(&mix, 0.5);
        let fm = FeatureMap::new(2, 1);
        let nothing = ClipConfig { r_x: 0.0, r_z: 0.0 };
        let bounds = piece_boundaries(&cf, 2.0, 0.01, 8.0, 8.0);
        let err = fit_pieces(&batch, &cf, &fm, &bounds, 0.0, &nothing).unwrap_err();
        assert_eq!(err, LearnError::Singular { piece: 0, rows: 0 });
    }

    #[test]
    fn clipped_loss_edge_cases_and_noise_floor() {
        let mix = gaussian_2d();
        let t = 0.4;
        let batch = make_denoising_batch(&mix, t, 50_000, &SeedTree::new(6)).unwrap();
        let cf = single_clustering(&mix, t);
        let fm = FeatureMap::new(2, 1);
        let noised = mix.noised(t);
        let comp: &GaussianComponent = &noised.components()[0];
        let k = comp.precision();
        let mu = comp.mean();
        let intercept = k * mu;
        let coefficients = DMatrix::from_fn(3, 2, |a, c| if a == 0 { intercept[c] } else { -k[(c, a - 1)] });
        let piece = PieceModel { piece_index: 0, members: vec![0], anchor: 0, coefficients, theta1: 1e-12, theta2: 1e-12 };
        let model = PiecewiseScoreModel::new(t, cf, vec![piece], fm).unwrap();
        let clip = ClipConfig::from_batch(&batch);
        let loss = clipped_loss(&model, &batch, &clip);
        assert_eq!(clipped_loss(&model, &batch, &ClipConfig { r_x: 0.0, r_z: 0.0 }), 0.0);

        let direct: Vec<f64> = batch
            .inputs
            .iter()
            .zip(&batch.targets)
            .map(|(x, y)| comp.score(x).iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum())
            .collect();
        let n = direct.len() as f64;
        let mean = direct.iter().sum::<f64>() / n;
        let sd = (direct.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((loss - mean).abs() <= 2.0 * sd / n.sqrt());

        let mut reversed = batch.clone();
        reversed.inputs.reverse();
        reversed.targets.reverse();
        reversed.noise_norms.reverse();
        assert!((clipped_loss(&model, &reversed, &clip) - loss).abs() <= 1e-12 * loss);
    }

    #[test]
    fn combinations_in_lexicographic_order() {
        assert_eq!(combinations(4, 2), vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]);
        assert_eq!(combinations(2, 2), vec![vec![0, 1]]);
        assert!(combinations(1, 2).is_empty());
    }

    #[test]
    fn degenerate_loop_matches_direct_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mix = random_mixture(2, 2, 0.5, 2.0, 3.0, &mut rng);
        let t = 0.3;
        let mut config = LearnConfig::new(2, 0.5, 2.0, 11);
        config.n_train = 5_000;
        config.n_val = 1_000;
        config.degree = 2;
        let pair = PartitionPair::new(vec![vec![0], vec![1]], vec![vec![0, 1]], 2).unwrap();
        config.partition_pairs = Some(vec![pair.clone()]);
        config.max_tuples = 1;
        let cands = CandidateList::from_mixture(&mix);
        let (train, val) = learning_batches(TrainingData::Mixture(&mix), t, &config).unwrap();
        let outcome = learn_score_on_batches(&train, &val, &cands, &config).unwrap();
        assert_eq!(outcome.report.len(), 1);

        let est: Vec<ComponentEstimate> =
            mix.components().iter().map(|c| ComponentEstimate::noised(c.mean(), c.covariance(), t, 0.5)).collect();
        let covs: Vec<_> = est.iter().map(|e| e.covariance.clone()).collect();
        let precs: Vec<_> = est.iter().map(|e| e.precision.clone()).collect();
        let eta = margin_eta(&est, &pair.cov_partition, 2.0);
        let cf = ClusteringFunction::new(pair, est, oracle_thresholds(&covs, &precs, 0.5), eta, 0.5).unwrap();
        let fm = FeatureMap::fitted(2, 2, &train.inputs);
        let bounds = piece_boundaries(&cf, 2.0, 0.01, 8.0, 8.0);
        let pieces = fit_pieces(&train, &cf, &fm, &bounds, config.ridge, &ClipConfig::from_batch(&train)).unwrap();
        assert_eq!(outcome.model.pieces, pieces);
    }

    #[test]
    fn selection_is_minimal_and_caps_are_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mix = random_mixture(1, 2, 0.5, 2.0, 3.0, &mut rng);
        let mut config = LearnConfig::new(2, 0.5, 2.0, 12);
        config.n_train = 4_000;
        config.n_val = 1_000;
        config.degree = 3;
        config.threshold_mode = ThresholdMode::Grid;
        let cands = CandidateList::from_mixture(&mix);
        let out = learn_score(TrainingData::Mixture(&mix), 0.2, &cands, &config).unwrap();
        assert_eq!(out.report.len(), 2 + 2 * 9);
        assert!(out.report.iter().all(|r| out.validation_loss <= r.val_loss));
        config.max_configurations = 5;
        assert!(matches!(learn_score(TrainingData::Mixture(&mix), 0.2, &cands, &config), Err(LearnError::Cap { .. })));
    }

    #[test]
    fn nested_degrees_never_increase_training_loss() {
        let mix = GaussianMixture::from_parameters(
            &[DVector::from_vec(vec![-2.0]), DVector::from_vec(vec![2.0])],
            &[DMatrix::identity(1, 1), DMatrix::identity(1, 1)],
            vec![0.5, 0.5],
            1.0,
            1.0,
            2.0,
        )
        .unwrap();
        let t = 0.2;
        let batch = make_denoising_batch(&mix, t, 20_000, &SeedTree::new(9)).unwrap();
        let est: Vec<ComponentEstimate> =
            mix.components().iter().map(|c| ComponentEstimate::noised(c.mean(), c.covariance(), t, 1.0)).collect();
        let cf = ClusteringFunction::new(PartitionPair::trivial(2), est, DMatrix::zeros(2, 2), 1.0, 1.0).unwrap();
        let clip = ClipConfig::from_batch(&batch);
        let bounds = vec![(f64::INFINITY, f64::INFINITY)];
        let mut last = f64::INFINITY;
        for degree in 2..=8 {
            let fm = FeatureMap::fitted(1, degree, &batch.inputs);
            let pieces = fit_pieces(&batch, &cf, &fm, &bounds, 0.0, &clip).unwrap();
            let model = PiecewiseScoreModel::new(t, cf.clone(), pieces, fm).unwrap();
            let loss = clipped_loss(&model, &batch, &clip);
            assert!(loss <= last * (1.0 + 1e-9), "degree {degree}: {loss} > {last}");
            last = loss;
        }
    }

    #[test]
    fn oracle_handle_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mix = random_mixture(2, 2, 0.5, 2.0, 3.0, &mut rng);
        let s0 = exact_score_oracle(&mix, 0.0);
        assert_eq!(s0(&[0.2, 0.1]), mix.score(&[0.2, 0.1]));
        let far = exact_score_oracle(&mix, 30.0);
        let v = far(&[1.0, -2.0]);
        assert!((v[0] + 1.0).abs() < 1e-8 && (v[1] - 2.0).abs() < 1e-8);
    }
}
