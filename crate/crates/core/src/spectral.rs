//! Crude parameter estimation by the method of moments.
//!
//! Means come from the top-k eigenspace of the second moment, covariances
//! from the top-k eigenspaces of three flattened fourth-moment matrices
//! (split by the projector onto the span of the mean estimates). Each
//! recovered subspace is covered by a lattice net, and every net point is a
//! candidate.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{self, sym_eigen};
use crate::mixture::GaussianMixture;
use crate::parallel::{add_into, chunked_reduce};

const REDUCE_CHUNK: usize = 2048;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("requested rank {k} exceeds dimension {dim}")]
    Rank { k: usize, dim: usize },
    #[error("sample set is empty")]
    NoSamples,
    #[error("samples have inconsistent dimensions")]
    Dimension,
    #[error("dimension {d} exceeds the fourth-moment cap {cap}: the moment matrices need d^4 = {entries} entries each")]
    MomentCap { d: usize, cap: usize, entries: usize },
    #[error("{what} has {size} points, above the cap of {cap}; use a coarser net step")]
    NetTooLarge { what: String, size: u128, cap: usize },
    #[error("net step must be positive, got {0}")]
    Step(f64),
}

/// Orthonormal vectors spanning a subspace of ℝ^n.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceBasis {
    basis: Vec<DVector<f64>>,
    ambient_dim: usize,
}

impl SubspaceBasis {
    pub fn new(basis: Vec<DVector<f64>>, ambient_dim: usize) -> Self {
        debug_assert!(basis.iter().all(|v| v.len() == ambient_dim));
        SubspaceBasis { basis, ambient_dim }
    }

    pub fn full(dim: usize) -> Self {
        let basis = (0..dim).map(|i| DVector::from_fn(dim, |r, _| if r == i { 1.0 } else { 0.0 })).collect();
        SubspaceBasis { basis, ambient_dim: dim }
    }

    /// Orthonormal basis of span(vectors); near-dependent directions dropped.
    pub fn span_of(vectors: &[DVector<f64>], dim: usize) -> Self {
        SubspaceBasis { basis: linalg::span_basis(vectors, dim, 1e-10), ambient_dim: dim }
    }

    pub fn rank(&self) -> usize {
        self.basis.len()
    }
    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }
    pub fn vectors(&self) -> &[DVector<f64>] {
        &self.basis
    }

    /// Coordinates ⟨v_i, x⟩.
    pub fn coords(&self, x: &[f64]) -> Vec<f64> {
        self.basis.iter().map(|v| linalg::dot(v.as_slice(), x)).collect()
    }

    /// Σ c_i v_i.
    pub fn combine(&self, coords: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.ambient_dim);
        for (v, c) in self.basis.iter().zip(coords) {
            out.axpy(*c, v, 1.0);
        }
        out
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.combine(&self.coords(x)).as_slice().to_vec()
    }

    pub fn projector(&self) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(self.ambient_dim, self.ambient_dim);
        for v in &self.basis {
            p += v * v.transpose();
        }
        p
    }

    /// Largest deviation of the Gram matrix from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, a) in self.basis.iter().enumerate() {
            for (j, b) in self.basis.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((a.dot(b) - target).abs());
            }
        }
        worst
    }
}

fn check_symmetric(a: &DMatrix<f64>) -> Result<(), SpectralError> {
    let asym = linalg::asymmetry(a);
    if asym > 1e-9 * linalg::max_abs(a).max(1.0) {
        return Err(SpectralError::NotSymmetric(asym));
    }
    Ok(())
}

/// Eigenpairs ordered by |λ| descending, ties by λ descending then position.
fn ranked_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>, Vec<usize>) {
    let (vals, vecs) = sym_eigen(&linalg::symmetrize(a));
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&i, &j| {
        vals[j].abs().total_cmp(&vals[i].abs()).then(vals[j].total_cmp(&vals[i])).then(i.cmp(&j))
    });
    (vals, vecs, order)
}

/// Span of the top-k eigenvectors of a symmetric matrix, ranked by |eigenvalue|.
pub fn topk_subspace(a: &DMatrix<f64>, k: usize) -> Result<SubspaceBasis, SpectralError> {
    check_symmetric(a)?;
    let n = a.nrows();
    if k > n {
        return Err(SpectralError::Rank { k, dim: n });
    }
    let (_, vecs, order) = ranked_eigen(a);
    Ok(SubspaceBasis::new(order[..k].iter().map(|&i| vecs.column(i).into_owned()).collect(), n))
}

/// Like [`topk_subspace`] but drops directions whose eigenvalue is at most
/// `rel_tol` times the largest in magnitude; a zero matrix yields an empty basis.
pub fn topk_subspace_truncated(a: &DMatrix<f64>, k: usize, rel_tol: f64) -> Result<SubspaceBasis, SpectralError> {
    check_symmetric(a)?;
    let n = a.nrows();
    if k > n {
        return Err(SpectralError::Rank { k, dim: n });
    }
    let (vals, vecs, order) = ranked_eigen(a);
    let top = order.first().map(|&i| vals[i].abs()).unwrap_or(0.0);
    let basis = order[..k]
        .iter()
        .filter(|&&i| top > 0.0 && vals[i].abs() > rel_tol * top)
        .map(|&i| vecs.column(i).into_owned())
        .collect();
    Ok(SubspaceBasis::new(basis, n))
}

/// Integer multiples of `step` in ℝ^dim with Euclidean norm ≤ radius, in
/// lexicographic order. The origin is always included.
pub fn lattice_net(dim: usize, radius: f64, step: f64, cap: usize, what: &str) -> Result<Vec<Vec<f64>>, SpectralError> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(SpectralError::Step(step));
    }
    let m = (radius / step).floor().max(0.0) as i64;
    let r2 = (radius / step) * (radius / step) * (1.0 + 1e-12);
    let size = count_lattice(dim, m, r2, cap as u128 + 1);
    if size > cap as u128 {
        let bound = (2 * m as u128 + 1).saturating_pow(dim as u32);
        return Err(SpectralError::NetTooLarge { what: what.to_string(), size: bound.max(size), cap });
    }
    let mut out = Vec::with_capacity(size as usize);
    let mut current = vec![0i64; dim];
    fill_lattice(0, dim, m, r2, &mut current, &mut out, step);
    Ok(out)
}

fn count_lattice(dim: usize, m: i64, budget: f64, stop: u128) -> u128 {
    if dim == 0 {
        return 1;
    }
    let mut total = 0u128;
    for n in -m..=m {
        let rest = budget - (n * n) as f64;
        if rest < 0.0 {
            continue;
        }
        total += count_lattice(dim - 1, m, rest, stop);
        if total >= stop {
            return total;
        }
    }
    total
}

fn fill_lattice(pos: usize, dim: usize, m: i64, budget: f64, cur: &mut Vec<i64>, out: &mut Vec<Vec<f64>>, step: f64) {
    if pos == dim {
        out.push(cur.iter().map(|&n| n as f64 * step).collect());
        return;
    }
    for n in -m..=m {
        let rest = budget - (n * n) as f64;
        if rest < 0.0 {
            continue;
        }
        cur[pos] = n;
        fill_lattice(pos + 1, dim, m, rest, cur, out, step);
    }
    cur[pos] = 0;
}

fn sample_dim(samples: &[Vec<f64>]) -> Result<usize, SpectralError> {
    let d = samples.first().ok_or(SpectralError::NoSamples)?.len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(SpectralError::Dimension);
    }
    Ok(d)
}

/// M̂ = (1/N) Σ x xᵀ.
pub fn second_moment(samples: &[Vec<f64>]) -> Result<DMatrix<f64>, SpectralError> {
    let d = sample_dim(samples)?;
    let sum = chunked_reduce(
        samples.len(),
        REDUCE_CHUNK,
        |r| {
            let mut acc = vec![0.0; d * d];
            for x in &samples[r] {
                for a in 0..d {
                    for b in a..d {
                        acc[a * d + b] += x[a] * x[b];
                    }
                }
            }
            acc
        },
        add_into,
    )
    .unwrap();
    let n = samples.len() as f64;
    Ok(DMatrix::from_fn(d, d, |a, b| if a <= b { sum[a * d + b] / n } else { sum[b * d + a] / n }))
}

/// Mean candidates: net points in the top-k eigenspace of M̂.
#[derive(Clone, Debug)]
pub struct MeanCandidates {
    pub subspace: SubspaceBasis,
    pub means: Vec<DVector<f64>>,
}

pub fn crude_estimate_means(
    samples: &[Vec<f64>],
    k: usize,
    radius: f64,
    net_step: f64,
    cap: usize,
) -> Result<MeanCandidates, SpectralError> {
    if samples.is_empty() {
        return Err(SpectralError::NoSamples);
    }
    let m2 = second_moment(samples)?;
    let subspace = topk_subspace(&m2, k)?;
    let net = lattice_net(subspace.rank(), 2.0 * radius, net_step, cap, "mean net")?;
    let means = net.iter().map(|c| subspace.combine(c)).collect();
    Ok(MeanCandidates { subspace, means })
}

/// Index of the mean closest to Π̂x (ties to the lowest index) and x − µ̂(x).
pub fn nearest_center(x: &[f64], means: &[DVector<f64>], subspace: &SubspaceBasis) -> (usize, Vec<f64>) {
    let px = subspace.project(x);
    let j = nearest_to_projection(&px, means);
    (j, x.iter().zip(means[j].iter()).map(|(a, b)| a - b).collect())
}

fn nearest_to_projection(px: &[f64], means: &[DVector<f64>]) -> usize {
    assert!(!means.is_empty(), "at least one mean is required");
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, m) in means.iter().enumerate() {
        let dj = px.iter().zip(m.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        if dj < best_d {
            best_d = dj;
            best = j;
        }
    }
    best
}

/// Second moment M̂ and the three flattened fourth-moment matrices.
#[derive(Clone, Debug)]
pub struct MomentAccumulators {
    pub m2: DMatrix<f64>,
    pub c00: DMatrix<f64>,
    pub c01: DMatrix<f64>,
    pub c11: DMatrix<f64>,
    pub sample_count: usize,
}

/// Default cap on the ambient dimension for fourth-moment accumulation.
pub const DEFAULT_MOMENT_DIM_CAP: usize = 8;

/// Ĉ_s = (1/N) Σ Ψ_s(x − µ̂(x)) for s ∈ {00, 01, 11}.
///
/// With a = Π̂(x − µ̂) and b = Π̂⊥(x − µ̂), Ψ_00, Ψ_01 and Ψ_11 are the outer
/// products of vec(a aᵀ), vec(a bᵀ) and vec(b bᵀ) (row-major flattening).
/// Means are projected onto the subspace before recentering, so b = x − Π̂x
/// does not depend on the means at all.
pub fn psi_moments(
    samples: &[Vec<f64>],
    means: &[DVector<f64>],
    subspace: &SubspaceBasis,
    dim_cap: usize,
) -> Result<MomentAccumulators, SpectralError> {
    let d = sample_dim(samples)?;
    if d > dim_cap {
        return Err(SpectralError::MomentCap { d, cap: dim_cap, entries: d.pow(4) });
    }
    let dd = d * d;
    let proj = subspace.projector();
    let proj_means: Vec<Vec<f64>> = means.iter().map(|m| linalg::mat_vec(&proj, m.as_slice())).collect();
    let sum = chunked_reduce(
        samples.len(),
        REDUCE_CHUNK / 4,
        |r| {
            let mut acc = vec![0.0; d * d + 3 * dd * dd];
            let (m2, rest) = acc.split_at_mut(d * d);
            let (c00, rest) = rest.split_at_mut(dd * dd);
            let (c01, c11) = rest.split_at_mut(dd * dd);
            let mut u = vec![0.0; dd];
            for x in &samples[r] {
                for a in 0..d {
                    for b in a..d {
                        m2[a * d + b] += x[a] * x[b];
                    }
                }
                let px = linalg::mat_vec(&proj, x);
                let (j, _) = nearest_center(x, means, subspace);
                let a: Vec<f64> = px.iter().zip(&proj_means[j]).map(|(p, m)| p - m).collect();
                let b: Vec<f64> = x.iter().zip(&px).map(|(xi, p)| xi - p).collect();
                outer_flat(&a, &a, &mut u);
                rank_one_upper(c00, &u);
                outer_flat(&a, &b, &mut u);
                rank_one_upper(c01, &u);
                outer_flat(&b, &b, &mut u);
                rank_one_upper(c11, &u);
            }
            acc
        },
        add_into,
    )
    .unwrap();
    let n = samples.len() as f64;
    let m2 = DMatrix::from_fn(d, d, |a, b| if a <= b { sum[a * d + b] / n } else { sum[b * d + a] / n });
    let block = |offset: usize| {
        let s = &sum[offset..offset + dd * dd];
        DMatrix::from_fn(dd, dd, |p, q| if p <= q { s[p * dd + q] / n } else { s[q * dd + p] / n })
    };
    Ok(MomentAccumulators {
        m2,
        c00: block(d * d),
        c01: block(d * d + dd * dd),
        c11: block(d * d + 2 * dd * dd),
        sample_count: samples.len(),
    })
}

fn outer_flat(a: &[f64], b: &[f64], out: &mut [f64]) {
    let d = b.len();
    for (p, ap) in a.iter().enumerate() {
        for (q, bq) in b.iter().enumerate() {
            out[p * d + q] = ap * bq;
        }
    }
}

fn rank_one_upper(acc: &mut [f64], u: &[f64]) {
    let n = u.len();
    for p in 0..n {
        let up = u[p];
        if up == 0.0 {
            continue;
        }
        let row = &mut acc[p * n..(p + 1) * n];
        for q in p..n {
            row[q] += up * u[q];
        }
    }
}

/// Knobs for the covariance nets.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceNetConfig {
    pub step: f64,
    pub max_candidates: usize,
    pub dim_cap: usize,
    /// Eigen-directions below this fraction of the top eigenvalue are not netted.
    pub rank_tol: f64,
}

impl Default for CovarianceNetConfig {
    fn default() -> Self {
        CovarianceNetConfig { step: 0.25, max_candidates: 100_000, dim_cap: DEFAULT_MOMENT_DIM_CAP, rank_tol: 1e-9 }
    }
}

/// Covariance candidates Q⁰⁰ + Q⁰¹ + (Q⁰¹)ᵀ + Q¹¹ over the cross product of the
/// three nets (norm cap β√d each), symmetrized.
pub fn crude_estimate_covariances(
    samples: &[Vec<f64>],
    means: &[DVector<f64>],
    k: usize,
    beta: f64,
    config: &CovarianceNetConfig,
) -> Result<Vec<DMatrix<f64>>, SpectralError> {
    let d = sample_dim(samples)?;
    let subspace = SubspaceBasis::span_of(means, d);
    let acc = psi_moments(samples, means, &subspace, config.dim_cap)?;
    let cap_norm = beta * (d as f64).sqrt();
    let mut blocks: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(3);
    for (name, c) in [("00", &acc.c00), ("01", &acc.c01), ("11", &acc.c11)] {
        let basis = topk_subspace_truncated(c, k.min(d * d), config.rank_tol)?;
        let net = lattice_net(basis.rank(), cap_norm, config.step, config.max_candidates, &format!("covariance net {name}"))?;
        blocks.push(net.iter().map(|coords| unflatten(&basis.combine(coords), d)).collect());
    }
    let total = blocks.iter().map(|b| b.len() as u128).product::<u128>();
    if total > config.max_candidates as u128 {
        return Err(SpectralError::NetTooLarge {
            what: "covariance candidate cross product".into(),
            size: total,
            cap: config.max_candidates,
        });
    }
    let mut out = Vec::with_capacity(total as usize);
    for q00 in &blocks[0] {
        for q01 in &blocks[1] {
            let partial = q00 + q01 + q01.transpose();
            for q11 in &blocks[2] {
                out.push(linalg::symmetrize(&(&partial + q11)));
            }
        }
    }
    Ok(out)
}

fn unflatten(v: &DVector<f64>, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |a, b| v[a * d + b])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub provenance: String,
}

/// The candidate parameter list W.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct CandidateList {
    pub entries: Vec<Candidate>,
}

impl CandidateList {
    /// The true parameters of a mixture, in component order.
    pub fn from_mixture(mix: &GaussianMixture) -> Self {
        CandidateList {
            entries: mix
                .components()
                .iter()
                .enumerate()
                .map(|(i, c)| Candidate {
                    mean: c.mean().clone(),
                    covariance: c.covariance().clone(),
                    provenance: format!("oracle:component={i}"),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrudeConfig {
    pub radius: f64,
    pub beta: f64,
    pub mean_net_step: f64,
    pub max_mean_candidates: usize,
    pub max_mean_tuples: usize,
    pub covariance: CovarianceNetConfig,
    pub max_candidates: usize,
}

/// Full crude estimate: every k-tuple (with repetition) of mean candidates
/// yields covariance candidates, and each tuple member is paired with each of them.
pub fn crude_estimate(samples: &[Vec<f64>], k: usize, config: &CrudeConfig) -> Result<CandidateList, SpectralError> {
    let means = crude_estimate_means(samples, k, config.radius, config.mean_net_step, config.max_mean_candidates)?;
    let m = means.means.len();
    let tuples = (m as u128).saturating_pow(k as u32);
    if tuples > config.max_mean_tuples as u128 {
        return Err(SpectralError::NetTooLarge { what: "mean tuple set".into(), size: tuples, cap: config.max_mean_tuples });
    }
    let mut list = CandidateList::default();
    let mut digits = vec![0usize; k];
    for tuple in 0..tuples as usize {
        let chosen: Vec<DVector<f64>> = digits.iter().map(|&i| means.means[i].clone()).collect();
        let covs = crude_estimate_covariances(samples, &chosen, k, config.beta, &config.covariance)?;
        let size = list.len() as u128 + (k * covs.len()) as u128;
        if size > config.max_candidates as u128 {
            return Err(SpectralError::NetTooLarge { what: "candidate list".into(), size, cap: config.max_candidates });
        }
        for (member, mean) in chosen.iter().enumerate() {
            for (ci, q) in covs.iter().enumerate() {
                list.entries.push(Candidate {
                    mean: mean.clone(),
                    covariance: q.clone(),
                    provenance: format!("crude:tuple={tuple}:member={member}:cov={ci}"),
                });
            }
        }
        for pos in (0..k).rev() {
            digits[pos] += 1;
            if digits[pos] < m {
                break;
            }
            digits[pos] = 0;
        }
    }
    Ok(list)
}
