//! Deterministic clustering of points into refinement pieces.
//!
//! A point is first assigned to the mean group of its nearest mean estimate
//! (after projecting onto the span of the estimates), then to the first
//! covariance group that has a member beating every outside component in a
//! pairwise likelihood-ratio-style quadratic test. The piece is the
//! intersection of the two groups.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{self, frobenius, frobenius_inner, quad_form};
use crate::spectral::SubspaceBasis;

/// Largest k for which partition pairs are enumerated.
pub const MAX_PARTITION_K: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusteringError {
    #[error("invalid partition: {0}")]
    Partition(String),
    #[error("partition enumeration supports k <= {max}, got {k}")]
    TooManyComponents { k: usize, max: usize },
    #[error("margin eta must be positive, got {0}")]
    Eta(f64),
    #[error("estimates and thresholds disagree: {0}")]
    Shape(String),
}

/// Mean partition S and covariance partition T of the component indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PartitionPair {
    pub mean_partition: Vec<Vec<usize>>,
    pub cov_partition: Vec<Vec<usize>>,
}

fn validate_partition(p: &[Vec<usize>], k: usize, name: &str) -> Result<(), ClusteringError> {
    let mut seen = vec![false; k];
    for block in p {
        if block.is_empty() {
            return Err(ClusteringError::Partition(format!("{name} has an empty block")));
        }
        for &i in block {
            if i >= k || seen[i] {
                return Err(ClusteringError::Partition(format!("{name}: index {i} repeated or out of range")));
            }
            seen[i] = true;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(ClusteringError::Partition(format!("{name} does not cover 0..{k}")));
    }
    Ok(())
}

impl PartitionPair {
    pub fn new(mean_partition: Vec<Vec<usize>>, cov_partition: Vec<Vec<usize>>, k: usize) -> Result<Self, ClusteringError> {
        validate_partition(&mean_partition, k, "mean partition")?;
        validate_partition(&cov_partition, k, "covariance partition")?;
        Ok(PartitionPair { mean_partition, cov_partition })
    }

    /// Both partitions a single block.
    pub fn trivial(k: usize) -> Self {
        PartitionPair { mean_partition: vec![(0..k).collect()], cov_partition: vec![(0..k).collect()] }
    }

    pub fn num_components(&self) -> usize {
        self.mean_partition.iter().map(|b| b.len()).sum()
    }
}

/// Nonempty intersections S_a ∩ T_b, ordered by (a, b).
#[derive(Clone, Debug, PartialEq)]
pub struct Refinement {
    pub pieces: Vec<Vec<usize>>,
    lookup: Vec<Vec<Option<usize>>>,
}

impl Refinement {
    pub fn new(pair: &PartitionPair) -> Self {
        let mut pieces = Vec::new();
        let mut lookup = vec![vec![None; pair.cov_partition.len()]; pair.mean_partition.len()];
        for (a, s) in pair.mean_partition.iter().enumerate() {
            for (b, t) in pair.cov_partition.iter().enumerate() {
                let mut inter: Vec<usize> = s.iter().copied().filter(|i| t.contains(i)).collect();
                if !inter.is_empty() {
                    inter.sort_unstable();
                    lookup[a][b] = Some(pieces.len());
                    pieces.push(inter);
                }
            }
        }
        Refinement { pieces, lookup }
    }

    pub fn piece_of(&self, mean_group: usize, cov_group: usize) -> Option<usize> {
        self.lookup[mean_group][cov_group]
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }
}

/// Inverse of Q̂ after lifting eigenvalues below α/2 to α/2; ‖K̂‖_op ≤ 2/α.
pub fn clamp_inverse(q: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    let floor = alpha / 2.0;
    linalg::spectral_map(&linalg::symmetrize(q), |v| 1.0 / v.max(floor))
}

/// Parameter estimate (µ̂, Q̂) with its clamped inverse K̂.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentEstimate {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub precision: DMatrix<f64>,
}

impl ComponentEstimate {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>, alpha: f64) -> Self {
        let covariance = linalg::symmetrize(&covariance);
        let precision = clamp_inverse(&covariance, alpha);
        ComponentEstimate { mean, covariance, precision }
    }

    /// Estimate transported to noise time t: (e^{−t}µ̂, e^{−2t}Q̂ + (1 − e^{−2t})I).
    pub fn noised(mean: &DVector<f64>, covariance: &DMatrix<f64>, t: f64, alpha: f64) -> Self {
        if t == 0.0 {
            return Self::new(mean.clone(), covariance.clone(), alpha);
        }
        let d = mean.len();
        let m = mean * (-t).exp();
        let q = covariance * (-2.0 * t).exp() + DMatrix::identity(d, d) * (-(-2.0 * t).exp_m1());
        Self::new(m, q, alpha)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// log det of the covariance whose inverse is K̂.
    pub fn log_det_covariance(&self) -> f64 {
        -linalg::log_det_spd(&self.precision).expect("clamped precision is positive definite")
    }
}

/// D_p between two estimates.
pub fn estimate_distance(a: &ComponentEstimate, b: &ComponentEstimate) -> f64 {
    (&a.mean - &b.mean).norm() + frobenius(&(&a.covariance - &b.covariance))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeanAssignment {
    pub group: usize,
    pub component: usize,
    pub recentered: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusteringFunction {
    pair: PartitionPair,
    refinement: Refinement,
    estimates: Vec<ComponentEstimate>,
    thresholds: DMatrix<f64>,
    eta: f64,
    alpha: f64,
    mean_subspace: SubspaceBasis,
    projected_means: Vec<Vec<f64>>,
    mean_group: Vec<usize>,
    cov_group: Vec<usize>,
}

impl ClusteringFunction {
    pub fn new(
        pair: PartitionPair,
        estimates: Vec<ComponentEstimate>,
        thresholds: DMatrix<f64>,
        eta: f64,
        alpha: f64,
    ) -> Result<Self, ClusteringError> {
        let k = estimates.len();
        if k == 0 {
            return Err(ClusteringError::Shape("no estimates".into()));
        }
        validate_partition(&pair.mean_partition, k, "mean partition")?;
        validate_partition(&pair.cov_partition, k, "covariance partition")?;
        if thresholds.shape() != (k, k) {
            return Err(ClusteringError::Shape(format!("thresholds are {:?}, expected {k}x{k}", thresholds.shape())));
        }
        if !(eta > 0.0) {
            return Err(ClusteringError::Eta(eta));
        }
        let d = estimates[0].dim();
        let means: Vec<DVector<f64>> = estimates.iter().map(|e| e.mean.clone()).collect();
        let mean_subspace = SubspaceBasis::span_of(&means, d);
        let projected_means = means.iter().map(|m| mean_subspace.project(m.as_slice())).collect();
        let mut mean_group = vec![0; k];
        for (a, block) in pair.mean_partition.iter().enumerate() {
            for &i in block {
                mean_group[i] = a;
            }
        }
        let mut cov_group = vec![0; k];
        for (b, block) in pair.cov_partition.iter().enumerate() {
            for &i in block {
                cov_group[i] = b;
            }
        }
        let refinement = Refinement::new(&pair);
        Ok(ClusteringFunction {
            pair,
            refinement,
            estimates,
            thresholds,
            eta,
            alpha,
            mean_subspace,
            projected_means,
            mean_group,
            cov_group,
        })
    }

    pub fn pair(&self) -> &PartitionPair {
        &self.pair
    }
    pub fn refinement(&self) -> &Refinement {
        &self.refinement
    }
    pub fn estimates(&self) -> &[ComponentEstimate] {
        &self.estimates
    }
    pub fn thresholds(&self) -> &DMatrix<f64> {
        &self.thresholds
    }
    pub fn eta(&self) -> f64 {
        self.eta
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn num_pieces(&self) -> usize {
        self.refinement.len()
    }

    /// Nearest mean estimate to Π̂x (ties to the lowest index) and its group.
    pub fn cluster_mean(&self, x: &[f64]) -> MeanAssignment {
        let px = self.mean_subspace.project(x);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, m) in self.estimates.iter().enumerate() {
            let di = px.iter().zip(m.mean.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            if di < best_d {
                best_d = di;
                best = i;
            }
        }
        let recentered = x.iter().zip(self.estimates[best].mean.iter()).map(|(a, b)| a - b).collect();
        MeanAssignment { group: self.mean_group[best], component: best, recentered }
    }

    /// Smallest covariance group containing a witness i with
    /// zᵀ(K̂_i − K̂_j)z < t_ij − η for every j outside the group; `None` otherwise.
    pub fn cluster_cov(&self, recentered: &[f64]) -> Option<usize> {
        let quad: Vec<f64> = self.estimates.iter().map(|e| quad_form(&e.precision, recentered)).collect();
        self.cov_group_from_quadratics(&quad)
    }

    fn cov_group_from_quadratics(&self, quad: &[f64]) -> Option<usize> {
        for (b, block) in self.pair.cov_partition.iter().enumerate() {
            let wins = block.iter().any(|&i| {
                (0..quad.len())
                    .filter(|j| self.cov_group[*j] != b)
                    .all(|j| quad[i] - quad[j] < self.thresholds[(i, j)] - self.eta)
            });
            if wins {
                return Some(b);
            }
        }
        None
    }

    /// Refinement piece of x; falls back to piece 0 when no covariance group
    /// wins or the groups do not intersect.
    pub fn classify(&self, x: &[f64]) -> usize {
        let m = self.cluster_mean(x);
        match self.cluster_cov(&m.recentered) {
            Some(b) => self.refinement.piece_of(m.group, b).unwrap_or(0),
            None => 0,
        }
    }

    pub fn projected_mean(&self, i: usize) -> &[f64] {
        &self.projected_means[i]
    }
}

/// Thresholds from known parameters:
/// t_ij = ⟨Q_i, K̂_i − K̂_j⟩ + (1 − slack)·⟨Q_j − Q_i, Q_i⁻¹ − Q_j⁻¹⟩.
///
/// The first term is the mean of zᵀ(K̂_i − K̂_j)z under component i and the
/// full expression at slack 0 is its mean under component j, so slack = ½
/// puts the threshold halfway between the two.
pub fn oracle_thresholds(covariances: &[DMatrix<f64>], precisions: &[DMatrix<f64>], slack: f64) -> DMatrix<f64> {
    let k = covariances.len();
    let inv: Vec<DMatrix<f64>> = covariances
        .iter()
        .map(|q| linalg::inverse_spd(q).expect("oracle covariance is positive definite"))
        .collect();
    DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            return 0.0;
        }
        let base = frobenius_inner(&covariances[i], &(&precisions[i] - &precisions[j]));
        let gap = frobenius_inner(&(&covariances[j] - &covariances[i]), &(&inv[i] - &inv[j]));
        base + (1.0 - slack) * gap
    })
}

/// η = Δ_out / (100 β²) with Δ_out the smallest Frobenius gap between
/// covariance estimates in different groups. Without cross-group pairs the
/// margin is irrelevant and 1.0 is returned; it is floored at 1e-12.
pub fn margin_eta(estimates: &[ComponentEstimate], cov_partition: &[Vec<usize>], beta: f64) -> f64 {
    let mut group = vec![0; estimates.len()];
    for (b, block) in cov_partition.iter().enumerate() {
        for &i in block {
            group[i] = b;
        }
    }
    let mut delta = f64::INFINITY;
    for i in 0..estimates.len() {
        for j in (i + 1)..estimates.len() {
            if group[i] != group[j] {
                delta = delta.min(frobenius(&(&estimates[i].covariance - &estimates[j].covariance)));
            }
        }
    }
    if delta.is_infinite() {
        return 1.0;
    }
    (delta / (100.0 * beta * beta)).max(1e-12)
}

/// Grid on [−cβd/α, cβd/α] with spacing at most η. When the full grid has more
/// than `cap` points, the `cap` points closest to zero (same spacing, symmetric)
/// are kept.
pub fn threshold_grid(beta: f64, alpha: f64, d: usize, eta: f64, cap: usize, range_factor: f64) -> Vec<f64> {
    assert!(eta > 0.0 && cap >= 1);
    let half = range_factor * beta * d as f64 / alpha;
    let steps = (half / eta).ceil().max(1.0);
    let spacing = half / steps;
    let full = 2 * steps as usize + 1;
    if full <= cap {
        return (0..full).map(|i| -half + i as f64 * spacing).collect();
    }
    let centre = (cap as f64 - 1.0) / 2.0;
    (0..cap).map(|i| (i as f64 - centre) * spacing).collect()
}

/// All set partitions of 0..k as blocks, in lexicographic restricted-growth order.
pub fn set_partitions(k: usize) -> Vec<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    if k == 0 {
        return out;
    }
    let mut rgs = vec![0usize; k];
    loop {
        let blocks = rgs.iter().max().unwrap() + 1;
        let mut p = vec![Vec::new(); blocks];
        for (i, &b) in rgs.iter().enumerate() {
            p[b].push(i);
        }
        out.push(p);
        // Next restricted-growth string: bump the rightmost position that can grow.
        let mut pos = k;
        loop {
            if pos <= 1 {
                return out;
            }
            pos -= 1;
            let prefix_max = rgs[..pos].iter().copied().max().unwrap();
            if rgs[pos] <= prefix_max {
                rgs[pos] += 1;
                for r in rgs.iter_mut().skip(pos + 1) {
                    *r = 0;
                }
                break;
            }
        }
    }
}

/// Every (S, T) pair, S in the outer loop.
pub fn enumerate_partition_pairs(k: usize) -> Result<Vec<PartitionPair>, ClusteringError> {
    if k == 0 || k > MAX_PARTITION_K {
        return Err(ClusteringError::TooManyComponents { k, max: MAX_PARTITION_K });
    }
    let parts = set_partitions(k);
    let mut out = Vec::with_capacity(parts.len() * parts.len());
    for s in &parts {
        for t in &parts {
            out.push(PartitionPair { mean_partition: s.clone(), cov_partition: t.clone() });
        }
    }
    Ok(out)
}

/// Single-linkage grouping: i and j share a block when connected by a chain
/// of pairwise distances at most `cut`.
pub fn linkage_partition(distances: &DMatrix<f64>, cut: f64) -> Vec<Vec<usize>> {
    let k = distances.nrows();
    let mut label: Vec<usize> = (0..k).collect();
    let mut changed = true;
    while changed {
        changed = false;
        for i in 0..k {
            for j in 0..k {
                if distances[(i, j)] <= cut && label[j] < label[i] {
                    label[i] = label[j];
                    changed = true;
                }
            }
        }
    }
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    let mut roots: Vec<usize> = Vec::new();
    for (i, l) in label.iter().enumerate() {
        match roots.iter().position(|r| r == l) {
            Some(p) => blocks[p].push(i),
            None => {
                roots.push(*l);
                blocks.push(vec![i]);
            }
        }
    }
    blocks
}

/// Partition pair from known parameters: means closer than `mean_cut` and
/// covariances closer than `cov_cut` (Frobenius) are linked.
pub fn linkage_partition_pair(estimates: &[ComponentEstimate], mean_cut: f64, cov_cut: f64) -> PartitionPair {
    let k = estimates.len();
    let md = DMatrix::from_fn(k, k, |i, j| (&estimates[i].mean - &estimates[j].mean).norm());
    let qd = DMatrix::from_fn(k, k, |i, j| frobenius(&(&estimates[i].covariance - &estimates[j].covariance)));
    PartitionPair { mean_partition: linkage_partition(&md, mean_cut), cov_partition: linkage_partition(&qd, cov_cut) }
}
