//! Piecewise polynomial score model.
//!
//! Each refinement piece carries a polynomial in standardized coordinates,
//! used where the boundary indicator holds, and falls back to the linear
//! score of its anchor component elsewhere.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::clustering::{estimate_distance, ClusteringFunction, ComponentEstimate};
use crate::linalg::{self, frobenius_inner, mat_vec, quad_form};
use crate::mixture::ConditioningParams;

/// Lower bound applied to the boundary thresholds so they stay positive.
pub const THETA_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreModelError {
    #[error("standardization scale must be positive and finite (coordinate {0})")]
    Scale(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Monomials of total degree ≤ ℓ in standardized coordinates, graded-lex order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    degree: usize,
    dim: usize,
    exponents: Vec<Vec<u32>>,
    shift: Vec<f64>,
    scale: Vec<f64>,
}

fn graded_lex(dim: usize, degree: usize) -> Vec<Vec<u32>> {
    fn fill(pos: usize, remaining: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if pos + 1 == cur.len() {
            cur[pos] = remaining;
            out.push(cur.clone());
            return;
        }
        for e in (0..=remaining).rev() {
            cur[pos] = e;
            fill(pos + 1, remaining - e, cur, out);
        }
    }
    let mut out = Vec::new();
    let mut cur = vec![0u32; dim];
    for g in 0..=degree as u32 {
        fill(0, g, &mut cur, &mut out);
    }
    out
}

impl FeatureMap {
    pub fn new(dim: usize, degree: usize) -> Self {
        FeatureMap { degree, dim, exponents: graded_lex(dim, degree), shift: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    pub fn with_standardization(dim: usize, degree: usize, shift: Vec<f64>, scale: Vec<f64>) -> Result<Self, ScoreModelError> {
        if shift.len() != dim || scale.len() != dim {
            return Err(ScoreModelError::Shape(format!("standardization must have length {dim}")));
        }
        if let Some(i) = scale.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(ScoreModelError::Scale(i));
        }
        Ok(FeatureMap { degree, dim, exponents: graded_lex(dim, degree), shift, scale })
    }

    /// Standardization from the sample mean and per-coordinate standard deviation.
    pub fn fitted(dim: usize, degree: usize, points: &[Vec<f64>]) -> Self {
        let n = points.len().max(1) as f64;
        let shift: Vec<f64> = (0..dim).map(|a| points.iter().map(|p| p[a]).sum::<f64>() / n).collect();
        let scale = (0..dim)
            .map(|a| {
                let v = points.iter().map(|p| (p[a] - shift[a]).powi(2)).sum::<f64>() / n;
                if v > 0.0 && v.is_finite() {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        FeatureMap { degree, dim, exponents: graded_lex(dim, degree), shift, scale }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn len(&self) -> usize {
        self.exponents.len()
    }
    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }
    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }
    pub fn shift(&self) -> &[f64] {
        &self.shift
    }
    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let l = self.degree + 1;
        let mut powers = vec![1.0; self.dim * l];
        for a in 0..self.dim {
            let u = (x[a] - self.shift[a]) / self.scale[a];
            for e in 1..l {
                powers[a * l + e] = powers[a * l + e - 1] * u;
            }
        }
        for (o, ex) in out.iter_mut().zip(&self.exponents) {
            let mut v = 1.0;
            for (a, &e) in ex.iter().enumerate() {
                if e > 0 {
                    v *= powers[a * l + e as usize];
                }
            }
            *o = v;
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(x, &mut out);
        out
    }
}

/// Number of monomials of degree ≤ ℓ in d variables, C(d+ℓ, ℓ).
pub fn feature_count(dim: usize, degree: usize) -> usize {
    let mut c: u128 = 1;
    for i in 1..=degree as u128 {
        c = c * (dim as u128 + i) / i;
    }
    c as usize
}

/// Softmax inputs relative to the anchor `members[0]`:
/// r_j(x) = −½‖x−µ_j‖²_{K_j} + ½‖x−µ_1‖²_{K_1} + ½⟨Q_1, K_j − K_1⟩ and
/// θ_j = log(λ_j/λ_1) − ½⟨Q_1, K_j − K_1⟩ + ½ log(det Q_1 / det Q_j).
pub fn softmax_inputs(x: &[f64], members: &[&ComponentEstimate], weights: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let anchor = members[0];
    let q1 = mahalanobis(anchor, x);
    let ld1 = anchor.log_det_covariance();
    let mut r = vec![0.0; members.len()];
    let mut theta = vec![0.0; members.len()];
    for (j, e) in members.iter().enumerate().skip(1) {
        let inner = frobenius_inner(&anchor.covariance, &(&e.precision - &anchor.precision));
        r[j] = -0.5 * mahalanobis(e, x) + 0.5 * q1 + 0.5 * inner;
        theta[j] = (weights[j] / weights[0]).ln() - 0.5 * inner + 0.5 * (ld1 - e.log_det_covariance());
    }
    (r, theta)
}

fn mahalanobis(e: &ComponentEstimate, x: &[f64]) -> f64 {
    let diff: Vec<f64> = x.iter().zip(e.mean.iter()).map(|(a, b)| a - b).collect();
    quad_form(&e.precision, &diff)
}

/// 1 iff for every member j: |V₁ʲ(x)| ≤ θ₁ and V₂ʲ(x) ≤ θ₂, where
/// V₁ʲ = ‖x−µ_j‖²_{K_j} − ‖x−µ_1‖²_{K_1} − ⟨Q_1, K_j − K_1⟩ and
/// V₂ʲ = ‖(K_j − K_1)(x − µ_j)‖².
pub fn boundary_indicator(x: &[f64], members: &[&ComponentEstimate], theta1: f64, theta2: f64) -> bool {
    let anchor = members[0];
    let q1 = mahalanobis(anchor, x);
    for e in members.iter() {
        let dk = &e.precision - &anchor.precision;
        let v1 = mahalanobis(e, x) - q1 - frobenius_inner(&anchor.covariance, &dk);
        let diff: Vec<f64> = x.iter().zip(e.mean.iter()).map(|(a, b)| a - b).collect();
        let v2 = linalg::norm(&mat_vec(&dk, &diff)).powi(2);
        if v1.abs() > theta1 || v2 > theta2 {
            return false;
        }
    }
    true
}

/// Boundary thresholds θ₁ = c₁βΔ²/α²·log(m/δ) and θ₂ = c₂√βΔ²/α²·log(m/δ),
/// Δ the largest parameter distance inside the piece and m its size.
pub fn boundary_thresholds(members: &[&ComponentEstimate], alpha: f64, beta: f64, delta: f64, c1: f64, c2: f64) -> (f64, f64) {
    let mut spread = 0.0f64;
    for i in 0..members.len() {
        for j in (i + 1)..members.len() {
            spread = spread.max(estimate_distance(members[i], members[j]));
        }
    }
    let log_term = (members.len() as f64 / delta).ln().max(0.0);
    let base = spread * spread / (alpha * alpha) * log_term;
    ((c1 * beta * base).max(THETA_FLOOR), (c2 * beta.sqrt() * base).max(THETA_FLOOR))
}

/// Polynomial coefficients and boundary thresholds for one refinement piece.
#[derive(Clone, Debug, PartialEq)]
pub struct PieceModel {
    pub piece_index: usize,
    pub members: Vec<usize>,
    /// Component whose linear score is the fallback (lowest index in the piece).
    pub anchor: usize,
    /// features × d.
    pub coefficients: DMatrix<f64>,
    pub theta1: f64,
    pub theta2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseScoreModel {
    pub time: f64,
    pub clustering: ClusteringFunction,
    pub pieces: Vec<PieceModel>,
    pub feature_map: FeatureMap,
}

/// Which branch produced a score value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Branch {
    pub piece: usize,
    pub polynomial: bool,
}

impl PiecewiseScoreModel {
    pub fn new(
        time: f64,
        clustering: ClusteringFunction,
        pieces: Vec<PieceModel>,
        feature_map: FeatureMap,
    ) -> Result<Self, ScoreModelError> {
        if pieces.len() != clustering.num_pieces() {
            return Err(ScoreModelError::Shape(format!(
                "{} piece models for {} refinement pieces",
                pieces.len(),
                clustering.num_pieces()
            )));
        }
        let d = feature_map.dim();
        for p in &pieces {
            if p.coefficients.shape() != (feature_map.len(), d) {
                return Err(ScoreModelError::Shape(format!("piece {} coefficients {:?}", p.piece_index, p.coefficients.shape())));
            }
        }
        Ok(PiecewiseScoreModel { time, clustering, pieces, feature_map })
    }

    pub fn dim(&self) -> usize {
        self.feature_map.dim()
    }

    pub fn members(&self, piece: usize) -> Vec<&ComponentEstimate> {
        self.pieces[piece].members.iter().map(|&i| &self.clustering.estimates()[i]).collect()
    }

    /// Piece and branch for x.
    pub fn branch(&self, x: &[f64]) -> Branch {
        let piece = self.clustering.classify(x);
        let p = &self.pieces[piece];
        Branch { piece, polynomial: boundary_indicator(x, &self.members(piece), p.theta1, p.theta2) }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let b = self.branch(x);
        self.eval_branch(x, b)
    }

    pub fn eval_branch(&self, x: &[f64], b: Branch) -> Vec<f64> {
        let p = &self.pieces[b.piece];
        if b.polynomial {
            let phi = self.feature_map.eval(x);
            let d = self.dim();
            let mut out = vec![0.0; d];
            for (f, v) in phi.iter().enumerate() {
                for (c, o) in out.iter_mut().enumerate() {
                    *o += v * p.coefficients[(f, c)];
                }
            }
            out
        } else {
            let e = &self.clustering.estimates()[p.anchor];
            let diff: Vec<f64> = x.iter().zip(e.mean.iter()).map(|(a, b)| a - b).collect();
            mat_vec(&e.precision, &diff).into_iter().map(|v| -v).collect()
        }
    }
}

/// Advisory degree β²m²ν⁵Δ⁶/(α⁶ε) with unit constants, clamped to [1, max].
pub fn suggest_degree(params: &ConditioningParams, m: usize, delta_in: f64, nu: f64, eps: f64, max: usize) -> usize {
    assert!(eps > 0.0, "target error must be positive");
    let raw = params.beta.powi(2) * (m as f64).powi(2) * nu.powi(5) * delta_in.powi(6) / (params.alpha.powi(6) * eps);
    if !raw.is_finite() || raw >= max as f64 {
        return max.max(1);
    }
    (raw.ceil() as usize).clamp(1, max.max(1))
}
