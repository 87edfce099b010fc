//! Monte Carlo and quadrature checks of score error, score simplification,
//! Gaussian moment identities, tail bounds and sample quality.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::ClusteringFunction;
use crate::linalg::{frobenius, frobenius_inner, inverse_spd, log_det_spd, mat_vec, quad_form, sqrt_psd, sym_op_norm, symmetrize};
use crate::mixture::{score_gap, GaussianComponent, GaussianMixture, MixtureError};
use crate::parallel::chunked_reduce;
use crate::quadrature::integrate_line;
use crate::rng::{SeedTree, CHUNK};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("covariance is not positive definite")]
    Singular,
    #[error("sample set is empty")]
    Empty,
    #[error(transparent)]
    Mixture(#[from] MixtureError),
}

/// One estimate with its standard error and the criterion it was judged by.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MCReport {
    pub name: String,
    pub criterion: String,
    pub estimate: f64,
    pub std_error: f64,
    pub n: usize,
    pub bound: Option<f64>,
    pub pass: bool,
}

/// n draws of f, each chunk of `CHUNK` draws from its own stream.
pub fn mc_values<F>(n: usize, seed: &SeedTree, f: F) -> Vec<f64>
where
    F: Fn(&mut ChaCha8Rng) -> f64 + Sync,
{
    let chunks: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut rng = seed.stream(c as u64);
            (c * CHUNK..((c + 1) * CHUNK).min(n)).map(|_| f(&mut rng)).collect()
        })
        .collect();
    chunks.concat()
}

/// Sample mean and its standard error (the jackknife SE of a mean is sd/√n).
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let sum = chunked_reduce(n, CHUNK, |r| values[r].iter().sum::<f64>(), |a, b| a + b).unwrap();
    let mean = sum / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss = chunked_reduce(n, CHUNK, |r| values[r].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>(), |a, b| a + b).unwrap();
    (mean, (ss / (n - 1) as f64 / n as f64).sqrt())
}

/// Ratio of means with a delete-one-block jackknife standard error.
pub fn ratio_jackknife(num: &[f64], den: &[f64], blocks: usize) -> (f64, f64) {
    let n = num.len();
    let blocks = blocks.clamp(2, n.max(2));
    let bounds: Vec<(usize, usize)> = (0..blocks).map(|b| (b * n / blocks, (b + 1) * n / blocks)).collect();
    let sums: Vec<(f64, f64)> = bounds.iter().map(|&(lo, hi)| (num[lo..hi].iter().sum(), den[lo..hi].iter().sum())).collect();
    let total_num: f64 = sums.iter().map(|s| s.0).sum();
    let total_den: f64 = sums.iter().map(|s| s.1).sum();
    let ratio = total_num / total_den;
    let leave: Vec<f64> = sums.iter().map(|s| (total_num - s.0) / (total_den - s.1)).collect();
    let m = leave.iter().sum::<f64>() / blocks as f64;
    let var = (blocks - 1) as f64 / blocks as f64 * leave.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    (ratio, var.sqrt())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreErrorReport {
    pub report: MCReport,
    /// E‖∇log q_t‖².
    pub reference: f64,
    pub relative: f64,
    pub relative_se: f64,
}

/// E‖ŝ − ∇log q_t‖² over x_t ~ q_t; passes when the error relative to
/// E‖∇log q_t‖² is at most `relative_tolerance`.
pub fn score_l2_error(
    score: &(dyn Fn(&[f64]) -> Vec<f64> + Sync),
    mix: &GaussianMixture,
    t: f64,
    n: usize,
    seed: &SeedTree,
    relative_tolerance: f64,
) -> ScoreErrorReport {
    let noised = mix.noised(t);
    let points = noised.sample_points(n, seed);
    let pairs: Vec<(f64, f64)> = points
        .par_iter()
        .map(|x| {
            let truth = noised.score(x);
            (sq_dist(&score(x), &truth), truth.iter().map(|v| v * v).sum())
        })
        .collect();
    let (err, den): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let (estimate, std_error) = mean_and_se(&err);
    let (reference, _) = mean_and_se(&den);
    let (relative, relative_se) = ratio_jackknife(&err, &den, 100);
    ScoreErrorReport {
        report: MCReport {
            name: "score_l2_error".into(),
            criterion: format!("E|s_hat - s|^2 / E|s|^2 <= {relative_tolerance}"),
            estimate,
            std_error,
            n,
            bound: Some(relative_tolerance * reference),
            pass: relative <= relative_tolerance,
        },
        reference,
        relative,
        relative_se,
    }
}

/// E_{x~M(U)}‖s(x; M) − s(x; M(U))‖².
pub fn score_simplification_error(
    mix: &GaussianMixture,
    subset: &[usize],
    n: usize,
    seed: &SeedTree,
    bound: Option<f64>,
) -> Result<MCReport, EvalError> {
    let restricted = mix.restrict(subset)?;
    let points = restricted.sample_points(n, seed);
    let values: Vec<f64> = points.par_iter().map(|x| score_gap(mix, subset, x).iter().map(|v| v * v).sum()).collect();
    let (estimate, std_error) = mean_and_se(&values);
    Ok(MCReport {
        name: "score_simplification_error".into(),
        criterion: match bound {
            Some(b) => format!("E|s(x;M) - s(x;M(U))|^2 <= {b:e}"),
            None => "E|s(x;M) - s(x;M(U))|^2 reported".into(),
        },
        estimate,
        std_error,
        n,
        bound,
        pass: bound.map_or(true, |b| estimate <= b),
    })
}

/// E[(xᵀAx)²] for x ~ N(µ, Q), evaluated on the symmetric part S of A:
/// ⟨S,Q⟩² + 2‖Q^{1/2}SQ^{1/2}‖²_F + 4‖Q^{1/2}Sµ‖² + (µᵀSµ)² + 2µᵀSµ⟨S,Q⟩.
pub fn fourth_moment_closed_form(a: &DMatrix<f64>, mean: &[f64], cov: &DMatrix<f64>) -> f64 {
    let s = symmetrize(a);
    let root = sqrt_psd(cov);
    let inner = frobenius_inner(&s, cov);
    let sandwich = frobenius(&(&root * &s * &root)).powi(2);
    let smu = mat_vec(&s, mean);
    let cross = quad_form(cov, &smu);
    let center = quad_form(&s, mean);
    inner * inner + 2.0 * sandwich + 4.0 * cross + center * center + 2.0 * center * inner
}

pub fn fourth_moment_check(a: &DMatrix<f64>, mean: &[f64], cov: &DMatrix<f64>, n: usize, seed: &SeedTree) -> Result<MCReport, EvalError> {
    let d = mean.len();
    if a.shape() != (d, d) || cov.shape() != (d, d) {
        return Err(EvalError::Dimension(format!("A {:?}, Q {:?}, mean {}", a.shape(), cov.shape(), d)));
    }
    let comp = GaussianComponent::new(DVector::from_column_slice(mean), cov.clone()).map_err(|_| EvalError::Singular)?;
    let s = symmetrize(a);
    let values = mc_values(n, seed, |rng| {
        let x = comp.sample(rng);
        quad_form(&s, &x).powi(2)
    });
    let (estimate, std_error) = mean_and_se(&values);
    let closed = fourth_moment_closed_form(a, mean, cov);
    Ok(MCReport {
        name: "fourth_moment".into(),
        criterion: "|MC - closed form| <= 4 SE".into(),
        estimate,
        std_error,
        n,
        bound: Some(closed),
        pass: (estimate - closed).abs() <= 4.0 * std_error,
    })
}

/// The two correlation bounds for a pair of components:
/// `literal` = exp(−‖Δµ‖²/β − ‖ΔQ‖²_F/c) and
/// `derived` = ½·exp(−‖Δµ‖²/(8β) − ‖ΔQ‖²_F/c), c = 16(1 + β/α)²β².
pub fn correlation_bounds(c1: &GaussianComponent, c2: &GaussianComponent, alpha: f64, beta: f64) -> (f64, f64) {
    let dmu = (c1.mean() - c2.mean()).norm_squared();
    let dq = (c1.covariance() - c2.covariance()).norm_squared();
    let c = 16.0 * (1.0 + beta / alpha).powi(2) * beta * beta;
    ((-dmu / beta - dq / c).exp(), 0.5 * (-dmu / (8.0 * beta) - dq / c).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// Judged against the literal bound.
    pub report: MCReport,
    pub derived_bound: f64,
    pub mc_estimate: f64,
    pub mc_std_error: f64,
    /// Exact value by quadrature when d = 1.
    pub quadrature: Option<f64>,
}

fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// E_{x~N₁}[N₂(x)/(N₁(x)+N₂(x))] by MC, and by quadrature in one dimension.
pub fn correlation_bound_check(
    c1: &GaussianComponent,
    c2: &GaussianComponent,
    alpha: f64,
    beta: f64,
    n: usize,
    seed: &SeedTree,
) -> CorrelationReport {
    let ratio = |x: &[f64]| {
        let gap = c1.log_pdf(x) - c2.log_pdf(x);
        (-softplus(gap)).exp()
    };
    let values = mc_values(n, seed, |rng| ratio(&c1.sample(rng)));
    let (mc_estimate, mc_std_error) = mean_and_se(&values);
    let quadrature = (c1.mean().len() == 1).then(|| {
        let f = |x: f64| {
            let p = [x];
            let gap = c1.log_pdf(&p) - c2.log_pdf(&p);
            (c1.log_pdf(&p) - softplus(gap)).exp()
        };
        integrate_line(&f, c1.mean()[0], c1.covariance()[(0, 0)].sqrt(), 1e-15)
    });
    let (literal, derived_bound) = correlation_bounds(c1, c2, alpha, beta);
    let (estimate, std_error) = match quadrature {
        Some(q) => (q, 0.0),
        None => (mc_estimate, mc_std_error),
    };
    CorrelationReport {
        report: MCReport {
            name: "correlation_bound".into(),
            criterion: "estimate <= exp(-|dmu|^2/beta - |dQ|_F^2/c) + 3 SE".into(),
            estimate,
            std_error,
            n,
            bound: Some(literal),
            pass: estimate <= literal + 3.0 * std_error,
        },
        derived_bound,
        mc_estimate,
        mc_std_error,
        quadrature,
    }
}

/// Empirical Pr[xᵀAx − tr A > s‖A‖_F] for x ~ N(0, I), judged against
/// exp(−0.1·min(s√r, s²)) with r the stable rank ‖A‖²_F/‖A‖²_op.
pub fn hanson_wright_tail_check(a: &DMatrix<f64>, s_values: &[f64], n: usize, seed: &SeedTree) -> Vec<MCReport> {
    let d = a.nrows();
    let s = symmetrize(a);
    let trace = a.trace();
    let fro = frobenius(a);
    let op = a.clone().singular_values().max();
    let r = if op > 0.0 { fro * fro / (op * op) } else { 1.0 };
    let stats = mc_values(n, seed, |rng| {
        let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        (quad_form(&s, &x) - trace) / fro
    });
    s_values
        .iter()
        .map(|&level| {
            let hits = stats.iter().filter(|&&v| v > level).count();
            let p = hits as f64 / n as f64;
            let bound = (-0.1 * (level * r.sqrt()).min(level * level)).exp();
            MCReport {
                name: format!("hanson_wright_tail[s={level}]"),
                criterion: "Pr[x'Ax - tr A > s|A|_F] <= exp(-0.1 min(s sqrt(r), s^2))".into(),
                estimate: p,
                std_error: (p * (1.0 - p) / n as f64).sqrt(),
                n,
                bound: Some(bound),
                pass: p <= bound,
            }
        })
        .collect()
}

/// KL(N(µ₁,Q₁) ‖ N(µ₂,Q₂)).
pub fn kl_gaussian(mean1: &[f64], cov1: &DMatrix<f64>, mean2: &[f64], cov2: &DMatrix<f64>) -> Result<f64, EvalError> {
    let d = mean1.len();
    if mean2.len() != d || cov1.shape() != (d, d) || cov2.shape() != (d, d) {
        return Err(EvalError::Dimension("KL arguments disagree in dimension".into()));
    }
    let inv2 = inverse_spd(cov2).ok_or(EvalError::Singular)?;
    let ld2 = log_det_spd(cov2).ok_or(EvalError::Singular)?;
    let ld1 = log_det_spd(cov1).ok_or(EvalError::Singular)?;
    let diff: Vec<f64> = mean2.iter().zip(mean1).map(|(a, b)| a - b).collect();
    let trace = frobenius_inner(&inv2, cov1);
    Ok(0.5 * (trace - d as f64 + quad_form(&inv2, &diff) + ld2 - ld1))
}

pub fn kl_components(c1: &GaussianComponent, c2: &GaussianComponent) -> Result<f64, EvalError> {
    kl_gaussian(c1.mean().as_slice(), c1.covariance(), c2.mean().as_slice(), c2.covariance())
}

/// W1 between two 1-D empirical distributions (sorted inputs).
pub fn wasserstein1_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut last = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - last);
        last = next;
        while i < a.len() && a[i] == next {
            i += 1;
        }
        while j < b.len() && b[j] == next {
            j += 1;
        }
    }
    total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub sliced_w1: f64,
    /// Spread of the per-projection W1 values over √(projections).
    pub sliced_w1_se: f64,
    pub mean_gap: f64,
    pub cov_gap: f64,
    pub n_projections: usize,
}

impl DistributionReport {
    pub fn to_report(&self, name: &str, bound: f64, n: usize) -> MCReport {
        MCReport {
            name: name.into(),
            criterion: format!("sliced W1 <= {bound}"),
            estimate: self.sliced_w1,
            std_error: self.sliced_w1_se,
            n,
            bound: Some(bound),
            pass: self.sliced_w1 <= bound,
        }
    }
}

fn empirical_moments(points: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = points[0].len();
    let n = points.len() as f64;
    let mut mean = DVector::zeros(d);
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for p in points {
        let c = DVector::from_iterator(d, p.iter().zip(mean.iter()).map(|(a, b)| a - b));
        cov += &c * c.transpose();
    }
    (mean, cov / n)
}

/// Sliced W1 over random unit directions, mean gap and covariance Frobenius gap.
pub fn distribution_diagnostics(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    n_projections: usize,
    seed: &SeedTree,
) -> Result<DistributionReport, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::Empty);
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|p| p.len() != d) {
        return Err(EvalError::Dimension("sample sets disagree in dimension".into()));
    }
    let per: Vec<f64> = (0..n_projections)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed.stream(i as u64);
            let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = crate::linalg::norm(&dir);
            dir.iter_mut().for_each(|v| *v /= norm);
            let project = |pts: &[Vec<f64>]| {
                let mut v: Vec<f64> = pts.iter().map(|p| crate::linalg::dot(p, &dir)).collect();
                v.sort_by(f64::total_cmp);
                v
            };
            wasserstein1_sorted(&project(a), &project(b))
        })
        .collect();
    let (sliced_w1, sliced_w1_se) = if per.len() > 1 { mean_and_se(&per) } else { (per[0], 0.0) };
    let (ma, ca) = empirical_moments(a);
    let (mb, cb) = empirical_moments(b);
    Ok(DistributionReport {
        sliced_w1,
        sliced_w1_se,
        mean_gap: (ma - mb).norm(),
        cov_gap: frobenius(&(ca - cb)),
        n_projections,
    })
}

/// Per-component rate at which the clustering function sends a draw from
/// component i to a piece that does not contain i.
pub fn misclassification_rates(cf: &ClusteringFunction, mix: &GaussianMixture, n: usize, seed: &SeedTree, max_rate: f64) -> Vec<MCReport> {
    let k = mix.num_components();
    let pieces = &cf.refinement().pieces;
    let home: Vec<usize> = (0..k).map(|i| pieces.iter().position(|p| p.contains(&i)).unwrap_or(usize::MAX)).collect();
    let draws = mix.sample(n, seed);
    let wrong: Vec<(usize, bool)> = draws.par_iter().map(|s| (s.component, cf.classify(&s.point) != home[s.component])).collect();
    (0..k)
        .map(|i| {
            let total = wrong.iter().filter(|w| w.0 == i).count();
            let bad = wrong.iter().filter(|w| w.0 == i && w.1).count();
            let p = if total == 0 { 0.0 } else { bad as f64 / total as f64 };
            MCReport {
                name: format!("misclassification[component={i}]"),
                criterion: format!("rate <= {max_rate}"),
                estimate: p,
                std_error: if total == 0 { 0.0 } else { (p * (1.0 - p) / total as f64).sqrt() },
                n: total,
                bound: Some(max_rate),
                pass: p <= max_rate,
            }
        })
        .collect()
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Kolmogorov–Smirnov distance between a 1-D sample and a CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Largest absolute eigenvalue, for reports.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    sym_op_norm(&symmetrize(a))
}
