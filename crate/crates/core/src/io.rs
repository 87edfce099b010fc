//! Artifact files: JSON documents for mixtures, candidates and score models,
//! CSV and GMMS binary for samples, CSV for reports.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clustering::{ClusteringError, ClusteringFunction, ComponentEstimate, PartitionPair};
use crate::evaluation::MCReport;
use crate::learning::FitRecord;
use crate::mixture::{GaussianMixture, MixtureError};
use crate::score_model::{FeatureMap, PieceModel, PiecewiseScoreModel, ScoreModelError};
use crate::spectral::{Candidate, CandidateList};

pub const TOOL: &str = "mixdiff";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
const GMMS_MAGIC: &[u8; 4] = b"GMMS";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Mixture(#[from] MixtureError),
    #[error(transparent)]
    Clustering(#[from] ClusteringError),
    #[error(transparent)]
    Model(#[from] ScoreModelError),
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File { path: path.display().to_string(), source }
}

fn format_err(path: &Path, message: impl ToString) -> IoError {
    IoError::Format { path: path.display().to_string(), message: message.to_string() }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String, IoError> {
    Ok(sha256_hex(&std::fs::read(path).map_err(file_err(path))?))
}

/// Provenance carried by every artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub tool: String,
    pub version: String,
    pub seed: Option<u64>,
    /// Input name → sha256 of its bytes.
    pub inputs: BTreeMap<String, String>,
}

impl ArtifactHeader {
    pub fn new(seed: Option<u64>) -> Self {
        ArtifactHeader { tool: TOOL.into(), version: VERSION.into(), seed, inputs: BTreeMap::new() }
    }
    pub fn with_input(mut self, name: &str, digest: String) -> Self {
        self.inputs.insert(name.into(), digest);
        self
    }
    fn comment_lines(&self) -> String {
        let mut s = format!("# tool: {}\n# version: {}\n", self.tool, self.version);
        if let Some(seed) = self.seed {
            s += &format!("# seed: {seed}\n");
        }
        for (k, v) in &self.inputs {
            s += &format!("# input {k}: {v}\n");
        }
        s
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
}

fn from_rows(r: &[Vec<f64>], path: &Path) -> Result<DMatrix<f64>, IoError> {
    let n = r.len();
    let m = r.first().map_or(0, |x| x.len());
    if r.iter().any(|x| x.len() != m) {
        return Err(format_err(path, "ragged matrix"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| r[i][j]))
}

fn write_json<T: Serialize>(path: &Path, doc: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(doc).map_err(|e| format_err(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(file_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = std::fs::read_to_string(path).map_err(file_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentDoc {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureDoc {
    pub header: ArtifactHeader,
    pub alpha: f64,
    pub beta: f64,
    pub radius: f64,
    pub components: Vec<ComponentDoc>,
}

impl MixtureDoc {
    pub fn from_mixture(mix: &GaussianMixture, header: ArtifactHeader) -> Self {
        let c = mix.conditioning();
        MixtureDoc {
            header,
            alpha: c.alpha,
            beta: c.beta,
            radius: c.radius,
            components: mix
                .components()
                .iter()
                .zip(mix.weights())
                .map(|(comp, &weight)| ComponentDoc { weight, mean: comp.mean().iter().cloned().collect(), covariance: rows(comp.covariance()) })
                .collect(),
        }
    }

    pub fn to_mixture(&self, path: &Path) -> Result<GaussianMixture, IoError> {
        let means: Vec<DVector<f64>> = self.components.iter().map(|c| DVector::from_vec(c.mean.clone())).collect();
        let covs = self.components.iter().map(|c| from_rows(&c.covariance, path)).collect::<Result<Vec<_>, _>>()?;
        let weights = self.components.iter().map(|c| c.weight).collect();
        Ok(GaussianMixture::from_parameters(&means, &covs, weights, self.alpha, self.beta, self.radius)?)
    }
}

pub fn write_mixture(path: &Path, mix: &GaussianMixture, header: ArtifactHeader) -> Result<(), IoError> {
    write_json(path, &MixtureDoc::from_mixture(mix, header))
}

pub fn read_mixture(path: &Path) -> Result<GaussianMixture, IoError> {
    read_json::<MixtureDoc>(path)?.to_mixture(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateDoc {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub provenance: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidatesDoc {
    pub header: ArtifactHeader,
    pub entries: Vec<CandidateDoc>,
}

pub fn write_candidates(path: &Path, list: &CandidateList, header: ArtifactHeader) -> Result<(), IoError> {
    let entries = list
        .entries
        .iter()
        .map(|c| CandidateDoc { mean: c.mean.iter().cloned().collect(), covariance: rows(&c.covariance), provenance: c.provenance.clone() })
        .collect();
    write_json(path, &CandidatesDoc { header, entries })
}

pub fn read_candidates(path: &Path) -> Result<CandidateList, IoError> {
    let doc: CandidatesDoc = read_json(path)?;
    let entries = doc
        .entries
        .iter()
        .map(|c| {
            Ok(Candidate { mean: DVector::from_vec(c.mean.clone()), covariance: from_rows(&c.covariance, path)?, provenance: c.provenance.clone() })
        })
        .collect::<Result<Vec<_>, IoError>>()?;
    Ok(CandidateList { entries })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PieceDoc {
    pub piece_index: usize,
    pub members: Vec<usize>,
    pub anchor: usize,
    pub coefficients: Vec<Vec<f64>>,
    pub theta1: f64,
    pub theta2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDoc {
    pub header: ArtifactHeader,
    pub time: f64,
    pub alpha: f64,
    pub eta: f64,
    pub mean_partition: Vec<Vec<usize>>,
    pub cov_partition: Vec<Vec<usize>>,
    pub estimate_means: Vec<Vec<f64>>,
    pub estimate_covariances: Vec<Vec<Vec<f64>>>,
    pub thresholds: Vec<Vec<f64>>,
    pub degree: usize,
    pub feature_shift: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub pieces: Vec<PieceDoc>,
}

impl ModelDoc {
    pub fn from_model(model: &PiecewiseScoreModel, header: ArtifactHeader) -> Self {
        let cf = &model.clustering;
        ModelDoc {
            header,
            time: model.time,
            alpha: cf.alpha(),
            eta: cf.eta(),
            mean_partition: cf.pair().mean_partition.clone(),
            cov_partition: cf.pair().cov_partition.clone(),
            estimate_means: cf.estimates().iter().map(|e| e.mean.iter().cloned().collect()).collect(),
            estimate_covariances: cf.estimates().iter().map(|e| rows(&e.covariance)).collect(),
            thresholds: rows(cf.thresholds()),
            degree: model.feature_map.degree(),
            feature_shift: model.feature_map.shift().to_vec(),
            feature_scale: model.feature_map.scale().to_vec(),
            pieces: model
                .pieces
                .iter()
                .map(|p| PieceDoc {
                    piece_index: p.piece_index,
                    members: p.members.clone(),
                    anchor: p.anchor,
                    coefficients: rows(&p.coefficients),
                    theta1: p.theta1,
                    theta2: p.theta2,
                })
                .collect(),
        }
    }

    pub fn to_model(&self, path: &Path) -> Result<PiecewiseScoreModel, IoError> {
        let k = self.estimate_means.len();
        let pair = PartitionPair::new(self.mean_partition.clone(), self.cov_partition.clone(), k)?;
        let estimates = self
            .estimate_means
            .iter()
            .zip(&self.estimate_covariances)
            .map(|(m, q)| Ok(ComponentEstimate::new(DVector::from_vec(m.clone()), from_rows(q, path)?, self.alpha)))
            .collect::<Result<Vec<_>, IoError>>()?;
        let thresholds = if k == 0 { DMatrix::zeros(0, 0) } else { from_rows(&self.thresholds, path)? };
        let cf = ClusteringFunction::new(pair, estimates, thresholds, self.eta, self.alpha)?;
        let d = self.feature_shift.len();
        let fm = FeatureMap::with_standardization(d, self.degree, self.feature_shift.clone(), self.feature_scale.clone())?;
        let pieces = self
            .pieces
            .iter()
            .map(|p| {
                Ok(PieceModel {
                    piece_index: p.piece_index,
                    members: p.members.clone(),
                    anchor: p.anchor,
                    coefficients: from_rows(&p.coefficients, path)?,
                    theta1: p.theta1,
                    theta2: p.theta2,
                })
            })
            .collect::<Result<Vec<_>, IoError>>()?;
        Ok(PiecewiseScoreModel::new(self.time, cf, pieces, fm)?)
    }
}

pub fn write_model(path: &Path, model: &PiecewiseScoreModel, header: ArtifactHeader) -> Result<(), IoError> {
    write_json(path, &ModelDoc::from_model(model, header))
}

pub fn read_model(path: &Path) -> Result<PiecewiseScoreModel, IoError> {
    read_json::<ModelDoc>(path)?.to_model(path)
}

/// Shortest text that parses back to the same f64.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Comma-separated rows of d values under '#' header lines.
pub fn write_samples_csv(path: &Path, points: &[Vec<f64>], header: &ArtifactHeader) -> Result<(), IoError> {
    let file = File::create(path).map_err(file_err(path))?;
    let mut w = BufWriter::new(file);
    let mut text = header.comment_lines();
    for p in points {
        text += &p.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",");
        text.push('\n');
    }
    w.write_all(text.as_bytes()).map_err(file_err(path))?;
    w.flush().map_err(file_err(path))
}

pub fn read_samples_csv(path: &Path) -> Result<Vec<Vec<f64>>, IoError> {
    let file = File::open(path).map_err(file_err(path))?;
    let mut out: Vec<Vec<f64>> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(file_err(path))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|e| format_err(path, format!("line {}: {e}", i + 1))))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(first) = out.first() {
            if first.len() != row.len() {
                return Err(format_err(path, format!("line {}: {} columns, expected {}", i + 1, row.len(), first.len())));
            }
        }
        out.push(row);
    }
    Ok(out)
}

/// "GMMS", u32 d, u64 n, then n·d little-endian f64 in row-major order.
pub fn write_samples_gmms(path: &Path, points: &[Vec<f64>]) -> Result<(), IoError> {
    let d = points.first().map_or(0, |p| p.len());
    let mut bytes = Vec::with_capacity(16 + 8 * d * points.len());
    bytes.extend_from_slice(GMMS_MAGIC);
    bytes.extend_from_slice(&(d as u32).to_le_bytes());
    bytes.extend_from_slice(&(points.len() as u64).to_le_bytes());
    for p in points {
        if p.len() != d {
            return Err(format_err(path, "rows differ in dimension"));
        }
        for v in p {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(file_err(path))
}

pub fn read_samples_gmms(path: &Path) -> Result<Vec<Vec<f64>>, IoError> {
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(file_err(path))?;
    if bytes.len() < 16 || &bytes[..4] != GMMS_MAGIC {
        return Err(format_err(path, "missing GMMS magic"));
    }
    let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != 8 * n * d {
        return Err(format_err(path, format!("expected {} payload bytes, found {}", 8 * n * d, body.len())));
    }
    Ok((0..n)
        .map(|i| (0..d).map(|j| f64::from_le_bytes(body[8 * (i * d + j)..8 * (i * d + j + 1)].try_into().unwrap())).collect())
        .collect())
}

/// Samples by extension: `.gmms` binary, anything else CSV.
pub fn read_samples(path: &Path) -> Result<Vec<Vec<f64>>, IoError> {
    if path.extension().is_some_and(|e| e == "gmms") {
        read_samples_gmms(path)
    } else {
        read_samples_csv(path)
    }
}

pub fn write_samples(path: &Path, points: &[Vec<f64>], header: &ArtifactHeader) -> Result<(), IoError> {
    if path.extension().is_some_and(|e| e == "gmms") {
        write_samples_gmms(path, points)
    } else {
        write_samples_csv(path, points, header)
    }
}

fn csv_writer(path: &Path, header: &ArtifactHeader) -> Result<csv::Writer<File>, IoError> {
    let mut file = File::create(path).map_err(file_err(path))?;
    file.write_all(header.comment_lines().as_bytes()).map_err(file_err(path))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>, IoError> {
    let file = File::open(path).map_err(file_err(path))?;
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file))
}

pub const REPORT_COLUMNS: [&str; 7] = ["name", "criterion", "estimate", "std_error", "n", "bound", "pass"];

pub fn write_report_csv(path: &Path, reports: &[MCReport], header: &ArtifactHeader) -> Result<(), IoError> {
    let mut w = csv_writer(path, header)?;
    let wrap = |e: csv::Error| format_err(path, e);
    w.write_record(REPORT_COLUMNS).map_err(wrap)?;
    for r in reports {
        w.write_record([
            r.name.clone(),
            r.criterion.clone(),
            fmt_f64(r.estimate),
            fmt_f64(r.std_error),
            r.n.to_string(),
            r.bound.map(fmt_f64).unwrap_or_default(),
            r.pass.to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(file_err(path))
}

pub fn read_report_csv(path: &Path) -> Result<Vec<MCReport>, IoError> {
    let mut r = csv_reader(path)?;
    let wrap = |e: String| format_err(path, e);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| wrap(e.to_string()))?;
        if rec.len() != REPORT_COLUMNS.len() {
            return Err(wrap(format!("{} columns, expected {}", rec.len(), REPORT_COLUMNS.len())));
        }
        let num = |i: usize| rec[i].parse::<f64>().map_err(|e| wrap(format!("{}: {e}", REPORT_COLUMNS[i])));
        out.push(MCReport {
            name: rec[0].to_string(),
            criterion: rec[1].to_string(),
            estimate: num(2)?,
            std_error: num(3)?,
            n: rec[4].parse().map_err(|e| wrap(format!("n: {e}")))?,
            bound: if rec[5].is_empty() { None } else { Some(num(5)?) },
            pass: rec[6].parse().map_err(|e| wrap(format!("pass: {e}")))?,
        });
    }
    Ok(out)
}

/// Plain-text block, one line per report.
pub fn report_summary(reports: &[MCReport]) -> String {
    let mut s = String::new();
    for r in reports {
        s += &format!(
            "{} {}: estimate={} se={} n={}{} [{}]\n",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            fmt_f64(r.estimate),
            fmt_f64(r.std_error),
            r.n,
            r.bound.map(|b| format!(" bound={}", fmt_f64(b))).unwrap_or_default(),
            r.criterion
        );
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    s += &format!("{} checks, {} failed\n", reports.len(), failed);
    s
}

pub fn write_fit_report(path: &Path, rows: &[FitRecord], header: &ArtifactHeader) -> Result<(), IoError> {
    let mut w = csv_writer(path, header)?;
    let wrap = |e: csv::Error| format_err(path, e);
    w.write_record(["candidate_id", "partition_id", "threshold_id", "train_loss", "val_loss"]).map_err(wrap)?;
    for r in rows {
        w.write_record([
            r.candidate_id.to_string(),
            r.partition_id.to_string(),
            r.threshold_id.to_string(),
            fmt_f64(r.train_loss),
            fmt_f64(r.val_loss),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(file_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::random_mixture;
    use crate::rng::SeedTree;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mixture_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mix = random_mixture(3, 2, 0.5, 2.0, 3.0, &mut rng);
        write_mixture(&path, &mix, ArtifactHeader::new(Some(1))).unwrap();
        let back = read_mixture(&path).unwrap();
        assert_eq!(back.weights(), mix.weights());
        for (a, b) in back.components().iter().zip(mix.components()) {
            assert_eq!(a.mean(), b.mean());
            assert_eq!(a.covariance(), b.covariance());
        }
    }

    #[test]
    fn samples_round_trip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mix = random_mixture(2, 2, 0.5, 2.0, 3.0, &mut rng);
        let pts = mix.sample_points(100, &SeedTree::new(1));
        for name in ["s.csv", "s.gmms"] {
            let p = dir.path().join(name);
            write_samples(&p, &pts, &ArtifactHeader::new(Some(3))).unwrap();
            assert_eq!(read_samples(&p).unwrap(), pts);
        }
        let bad = dir.path().join("bad.gmms");
        std::fs::write(&bad, b"NOPE").unwrap();
        assert!(read_samples(&bad).is_err());
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let reports = vec![
            MCReport { name: "a".into(), criterion: "x <= min(1, 2)".into(), estimate: 0.1, std_error: 0.01, n: 10, bound: Some(0.2), pass: true },
            MCReport { name: "b".into(), criterion: "y".into(), estimate: 1e-300, std_error: 0.0, n: 5, bound: None, pass: false },
        ];
        write_report_csv(&p, &reports, &ArtifactHeader::new(None)).unwrap();
        assert_eq!(read_report_csv(&p).unwrap(), reports);
        assert!(report_summary(&reports).contains("2 checks, 1 failed"));
    }
}
