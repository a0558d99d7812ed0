//! Retrieval mAP, pseudo-embedding fidelity, PCA projection and ablation
//! orchestration.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diffnet::{encode, ParameterStore};
use crate::error::{Error, Result};
use crate::linalg::{dot, svd, EmbeddingMatrix, Matrix};
use crate::synthgen::{reveal_ground_truth, DataConfig, MultiModalDataset};
use crate::trainer::{self, Arm, ExperimentConfig, TrainState, TwoDatasetRoles};
use crate::xtrap::pseudo_pair;
use crate::{DatasetId, ModalityId};

/// `begin → pivots… → target`, written `"te-vi-ta"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityFlow {
    pub begin: ModalityId,
    pub pivots: Vec<ModalityId>,
    pub target: ModalityId,
    /// Datasets traversed, e.g. `["d2", "d1"]`; informational.
    #[serde(default)]
    pub datasets: Vec<DatasetId>,
}

/// A flow string that could not be parsed. `position` is the character
/// offset of the offending token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowParseError {
    pub position: usize,
    pub message: String,
}

impl core::fmt::Display for FlowParseError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "invalid flow at position {}: {}", self.position, self.message)
    }
}

impl ModalityFlow {
    /// Tokens are separated by `-`, `>`, `->` or `→`; each token is a
    /// nonempty run of ASCII alphanumerics or `_`.
    pub fn parse(s: &str) -> core::result::Result<Self, FlowParseError> {
        let chars: Vec<char> = s.chars().collect();
        let mut tokens: Vec<(usize, String)> = Vec::new();
        let mut i = 0;
        let mut expect_token = true;
        while i < chars.len() {
            let c = chars[i];
            if c.is_ascii_alphanumeric() || c == '_' {
                if !expect_token {
                    return Err(FlowParseError { position: i, message: "missing separator".into() });
                }
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                tokens.push((start, chars[start..i].iter().collect()));
                expect_token = false;
            } else if c == '-' || c == '>' || c == '→' {
                if expect_token {
                    return Err(FlowParseError { position: i, message: "empty modality name".into() });
                }
                i += if c == '-' && chars.get(i + 1) == Some(&'>') { 2 } else { 1 };
                expect_token = true;
            } else {
                return Err(FlowParseError { position: i, message: alloc::format!("unexpected character {c:?}") });
            }
        }
        if expect_token {
            return Err(FlowParseError { position: chars.len(), message: "flow ends without a target modality".into() });
        }
        if tokens.len() < 2 {
            return Err(FlowParseError { position: 0, message: "a flow needs at least a begin and a target modality".into() });
        }
        let (tpos, target) = tokens.pop().expect("nonempty");
        let begin = tokens.remove(0).1;
        if begin == target {
            return Err(FlowParseError { position: tpos, message: "begin and target modality coincide".into() });
        }
        Ok(ModalityFlow {
            begin: ModalityId(begin),
            pivots: tokens.into_iter().map(|(_, t)| ModalityId(t)).collect(),
            target: ModalityId(target),
            datasets: Vec::new(),
        })
    }
}

impl core::fmt::Display for ModalityFlow {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}", self.begin)?;
        for p in &self.pivots {
            write!(f, "-{p}")?;
        }
        write!(f, "-{}", self.target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub flow: String,
    pub map_score: f64,
    pub num_queries: usize,
    /// Indices of scored queries, aligned with `per_query_ap`.
    pub query_indices: Vec<usize>,
    pub per_query_ap: Vec<f64>,
    /// Queries dropped for having no relevant gallery item.
    pub excluded_queries: Vec<usize>,
    pub relevance: String,
}

/// Average precision of one ranking. `relevant` is in ranked order.
pub fn average_precision(relevant_in_rank_order: impl IntoIterator<Item = bool>) -> Option<f64> {
    let (mut hits, mut sum) = (0usize, 0.0);
    for (k, rel) in relevant_in_rank_order.into_iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Gallery indices by descending similarity; equal scores keep index order.
pub fn rank(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    order
}

/// mAP of cosine retrieval from `queries` into `gallery`. Queries without
/// any relevant item are listed in `excluded_queries`, not scored.
pub fn retrieval_map(
    queries: &EmbeddingMatrix,
    gallery: &EmbeddingMatrix,
    relevant: impl Fn(usize, usize) -> bool,
    flow: &str,
    relevance: &str,
) -> Result<RetrievalReport> {
    if queries.cols() != gallery.cols() {
        return Err(Error::shape("retrieval_map", alloc::format!("widths {} vs {}", queries.cols(), gallery.cols())));
    }
    let sims = queries.as_matrix().matmul_nt(gallery.as_matrix())?;
    let mut report = RetrievalReport {
        flow: flow.into(),
        map_score: 0.0,
        num_queries: 0,
        query_indices: Vec::new(),
        per_query_ap: Vec::new(),
        excluded_queries: Vec::new(),
        relevance: relevance.into(),
    };
    for q in 0..queries.rows() {
        let order = rank(sims.row(q));
        match average_precision(order.iter().map(|&g| relevant(q, g))) {
            Some(ap) => {
                report.query_indices.push(q);
                report.per_query_ap.push(ap);
            }
            None => report.excluded_queries.push(q),
        }
    }
    report.num_queries = report.per_query_ap.len();
    if report.num_queries > 0 {
        report.map_score = report.per_query_ap.iter().sum::<f64>() / report.num_queries as f64;
    }
    Ok(report)
}

/// Encodes one modality of `d` (hidden or observable) with its trained encoder.
pub fn encode_modality(cfg: &ExperimentConfig, store: &ParameterStore, d: &MultiModalDataset, m: &ModalityId) -> Result<EmbeddingMatrix> {
    let raw = reveal_ground_truth(d, m)?;
    encode(cfg.encoder(m)?, store, &raw)
}

/// Queries are the begin modality of `test`, the gallery is the target
/// modality's ground truth; relevance is a shared class label.
pub fn evaluate_flow(cfg: &ExperimentConfig, store: &ParameterStore, flow: &ModalityFlow, test: &MultiModalDataset) -> Result<RetrievalReport> {
    let q = encode_modality(cfg, store, test, &flow.begin)?;
    let g = encode_modality(cfg, store, test, &flow.target)?;
    let labels = test.labels();
    retrieval_map(&q, &g, |i, j| labels[i] == labels[j], &alloc::format!("{flow}"), "class")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub mean_cosine: f64,
    /// 25th, 50th and 75th percentiles of the per-instance cosines.
    pub quartiles: [f64; 3],
    pub num_instances: usize,
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// X-data pseudo embeddings of the target modality c for D1. Both test
/// splits are cut into consecutive blocks of `block` rows (remainders
/// dropped); each block of D1 is paired with the same block of D2. Row `r`
/// of the result belongs to D1 instance `r` (the first `rows()` instances).
pub fn pseudo_targets(
    cfg: &ExperimentConfig,
    store: &ParameterStore,
    roles: &TwoDatasetRoles,
    d1: &MultiModalDataset,
    d2: &MultiModalDataset,
    block: usize,
) -> Result<Matrix> {
    if block == 0 {
        return Err(Error::Config("fidelity block size must be positive".into()));
    }
    let b1 = encode_modality(cfg, store, d1, &roles.b)?;
    let b2 = encode_modality(cfg, store, d2, &roles.b)?;
    let c2 = encode_modality(cfg, store, d2, &roles.c)?;
    let n_blocks = (d1.len() / block).min(d2.len() / block);
    if n_blocks == 0 {
        return Err(Error::Data("test splits too small for one fidelity block".into()));
    }
    let mut out = Matrix::zeros(n_blocks * block, c2.cols());
    for k in 0..n_blocks {
        let idx: Vec<usize> = (k * block..(k + 1) * block).collect();
        let (_, x_data) = pseudo_pair(
            &b1.as_matrix().select_rows(&idx),
            &b2.as_matrix().select_rows(&idx),
            &c2.as_matrix().select_rows(&idx),
        )?;
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(x_data.row(r));
        }
    }
    Ok(out)
}

/// Cosine between the [`pseudo_targets`] rows and the encoder outputs on
/// D1's revealed c data.
pub fn pseudo_fidelity(
    cfg: &ExperimentConfig,
    store: &ParameterStore,
    roles: &TwoDatasetRoles,
    d1: &MultiModalDataset,
    d2: &MultiModalDataset,
    block: usize,
) -> Result<FidelityReport> {
    let pseudo = pseudo_targets(cfg, store, roles, d1, d2, block)?;
    let truth = encode_modality(cfg, store, d1, &roles.c)?;
    let mut cosines: Vec<f64> = pseudo
        .row_iter()
        .enumerate()
        .map(|(i, p)| {
            let n = libm::sqrt(dot(p, p));
            if n > 0.0 { dot(p, truth.as_matrix().row(i)) / n } else { 0.0 }
        })
        .collect();
    let mean_cosine = cosines.iter().sum::<f64>() / cosines.len() as f64;
    cosines.sort_by(f64::total_cmp);
    Ok(FidelityReport {
        mean_cosine,
        quartiles: [quantile(&cosines, 0.25), quantile(&cosines, 0.5), quantile(&cosines, 0.75)],
        num_instances: cosines.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// `n × 2`.
    pub coords: Matrix,
    /// Fraction of total variance on each component.
    pub variance_explained: [f64; 2],
    /// Unit principal axes (rows), `2 × d`.
    pub components: Matrix,
    /// Set when all points coincide; coordinates are then zero.
    pub degenerate: bool,
}

/// Top-two principal components of the pooled, mean-centered rows of
/// `sets`. Each axis is signed so its largest-magnitude entry is positive.
pub fn project_2d(sets: &[&Matrix]) -> Result<Projection> {
    let d = sets.first().map(|m| m.cols()).unwrap_or(0);
    if sets.iter().any(|m| m.cols() != d) {
        return Err(Error::shape("project_2d", "all sets must share one width"));
    }
    let n: usize = sets.iter().map(|m| m.rows()).sum();
    if n < 3 || d == 0 {
        return Err(Error::contract("project_2d", alloc::format!("need at least 3 points, got {n}")));
    }
    let mut mean = alloc::vec![0.0; d];
    for m in sets {
        for r in m.row_iter() {
            for (a, x) in mean.iter_mut().zip(r) {
                *a += x;
            }
        }
    }
    mean.iter_mut().for_each(|a| *a /= n as f64);
    let mut centered = Matrix::zeros(n, d);
    let mut i = 0;
    for m in sets {
        for r in m.row_iter() {
            for (j, (x, mu)) in r.iter().zip(&mean).enumerate() {
                centered.row_mut(i)[j] = x - mu;
            }
            i += 1;
        }
    }
    let total: f64 = centered.data().iter().map(|x| x * x).sum();
    if total == 0.0 {
        return Ok(Projection {
            coords: Matrix::zeros(n, 2),
            variance_explained: [0.0, 0.0],
            components: Matrix::zeros(2, d),
            degenerate: true,
        });
    }
    let f = svd(&centered)?;
    let mut components = Matrix::zeros(2, d);
    let mut variance_explained = [0.0; 2];
    for k in 0..2.min(f.singular_values.len()) {
        let axis = f.vt.row(k);
        let lead = axis.iter().copied().enumerate().fold((0, 0.0f64), |best, (j, v)| if v.abs() > best.1.abs() { (j, v) } else { best });
        let sign = if lead.1 < 0.0 { -1.0 } else { 1.0 };
        for (c, v) in components.row_mut(k).iter_mut().zip(axis) {
            *c = sign * v;
        }
        variance_explained[k] = f.singular_values[k] * f.singular_values[k] / total;
    }
    let coords = centered.matmul_nt(&components)?;
    Ok(Projection { coords, variance_explained, components, degenerate: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub arm: Arm,
    pub seed: u64,
    pub map: f64,
    pub fidelity: f64,
    pub report: RetrievalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub mean: f64,
    /// Sample standard deviation; zero for a single seed.
    pub std: f64,
    pub maps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub runs: Vec<AblationRun>,
    pub summary: Vec<ArmSummary>,
}

impl AblationTable {
    pub fn summary_for(&self, arm: Arm) -> Option<&ArmSummary> {
        self.summary.iter().find(|s| s.arm == arm)
    }

    pub fn map_for(&self, arm: Arm, seed: u64) -> Option<f64> {
        self.runs.iter().find(|r| r.arm == arm && r.seed == seed).map(|r| r.map)
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    (m, libm::sqrt(v))
}

/// The two datasets of a two-dataset scenario, with their test splits.
pub struct TwoDatasetData {
    pub d1_train: MultiModalDataset,
    pub d2_train: MultiModalDataset,
    pub d1_test: MultiModalDataset,
    pub d2_test: MultiModalDataset,
}

impl TwoDatasetData {
    pub fn generate(data: &DataConfig, seed: u64) -> Result<Self> {
        let mut g = data.generate(seed)?;
        if g.len() != 2 {
            return Err(Error::Config(alloc::format!("expected two datasets, config declares {}", g.len())));
        }
        let d2 = g.pop().expect("two");
        let d1 = g.pop().expect("two");
        Ok(TwoDatasetData { d1_train: d1.train, d2_train: d2.train, d1_test: d1.test, d2_test: d2.test })
    }
}

/// Trains `cfg` (with `cfg.seed`) on `data` and scores `flow` on D1's test
/// split plus the pseudo fidelity.
pub fn train_and_score(cfg: &ExperimentConfig, data: &TwoDatasetData, flow: &ModalityFlow, block: usize) -> Result<(TrainState, RetrievalReport, FidelityReport)> {
    let state = trainer::train(cfg, &data.d1_train, &data.d2_train)?;
    let roles = TwoDatasetRoles::infer(&data.d1_train, &data.d2_train)?;
    let report = evaluate_flow(cfg, &state.store, flow, &data.d1_test)?;
    let fid = pseudo_fidelity(cfg, &state.store, &roles, &data.d1_test, &data.d2_test, block)?;
    Ok((state, report, fid))
}

/// One training run per (arm, seed). Each seed regenerates the data and
/// reinitializes the encoders.
pub fn run_ablation(
    base: &ExperimentConfig,
    data: &DataConfig,
    arms: &[Arm],
    seeds: &[u64],
    flow: &ModalityFlow,
    block: usize,
) -> Result<AblationTable> {
    let mut runs = Vec::new();
    for &seed in seeds {
        let ds = TwoDatasetData::generate(data, seed)?;
        for &arm in arms {
            let cfg = ExperimentConfig { seed, ..arm.apply(base) };
            let (_, report, fid) = train_and_score(&cfg, &ds, flow, block)?;
            runs.push(AblationRun { arm, seed, map: report.map_score, fidelity: fid.mean_cosine, report });
        }
    }
    Ok(summarize(runs, arms))
}

pub fn summarize(runs: Vec<AblationRun>, arms: &[Arm]) -> AblationTable {
    let summary = arms
        .iter()
        .map(|&arm| {
            let maps: Vec<f64> = runs.iter().filter(|r| r.arm == arm).map(|r| r.map).collect();
            let (mean, std) = mean_std(&maps);
            ArmSummary { arm, mean, std, maps }
        })
        .collect();
    AblationTable { runs, summary }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rows: usize, cols: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EmbeddingMatrix::normalized(&Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn flow_parsing() {
        let f = ModalityFlow::parse("te-vi-ta").unwrap();
        assert_eq!((f.begin.as_str(), f.pivots[0].as_str(), f.target.as_str()), ("te", "vi", "ta"));
        assert_eq!(f.to_string(), "te-vi-ta");
        assert_eq!(ModalityFlow::parse("te→vi→ta").unwrap(), f);
        assert_eq!(ModalityFlow::parse("te->vi->ta").unwrap(), f);
        assert_eq!(ModalityFlow::parse("te-vi-t@").unwrap_err().position, 7);
        assert_eq!(ModalityFlow::parse("te--ta").unwrap_err().position, 3);
        assert_eq!(ModalityFlow::parse("te-").unwrap_err().position, 3);
        assert!(ModalityFlow::parse("te").is_err());
        assert!(ModalityFlow::parse("te-vi-te").is_err());
    }

    #[test]
    fn ap_closed_forms() {
        assert_eq!(average_precision([false, true]), Some(0.5));
        assert_eq!(average_precision([true, true, false]), Some(1.0));
        assert_eq!(average_precision([false, false]), None);
        for r in 1..10 {
            let ranked = (0..12).map(|k| k + 1 == r);
            assert_eq!(average_precision(ranked), Some(1.0 / r as f64));
        }
    }

    #[test]
    fn perfect_ranking_and_exclusion() {
        let q = EmbeddingMatrix::new(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap()).unwrap();
        let g = EmbeddingMatrix::new(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]).unwrap()).unwrap();
        let labels_q = [0, 1];
        let labels_g = [0, 1, 1];
        let r = retrieval_map(&q, &g, |i, j| labels_q[i] == labels_g[j], "x-y", "class").unwrap();
        assert_eq!(r.map_score, 1.0);
        let r = retrieval_map(&q, &g, |i, j| i == 0 && j == 2, "x-y", "class").unwrap();
        assert_eq!(r.excluded_queries, vec![1]);
        assert_eq!(r.num_queries, 1);
        assert_eq!(r.map_score, 0.5);
    }

    fn brute_force_map(q: &Matrix, g: &Matrix, lq: &[usize], lg: &[usize]) -> f64 {
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..q.rows() {
            let sims: Vec<f64> = (0..g.rows()).map(|j| dot(q.row(i), g.row(j))).collect();
            let rel: Vec<usize> = (0..g.rows()).filter(|&j| lg[j] == lq[i]).collect();
            if rel.is_empty() {
                continue;
            }
            // rank of j = 1 + #items strictly ahead of it
            let rank_of = |j: usize| 1 + (0..g.rows()).filter(|&k| sims[k] > sims[j] || (sims[k] == sims[j] && k < j)).count();
            let mut ap = 0.0;
            for &j in &rel {
                let rj = rank_of(j);
                let ahead_rel = rel.iter().filter(|&&k| rank_of(k) <= rj).count();
                ap += ahead_rel as f64 / rj as f64;
            }
            total += ap / rel.len() as f64;
            count += 1;
        }
        total / count as f64
    }

    #[test]
    fn matches_brute_force() {
        let (q, g) = (unit(20, 6, 1), unit(50, 6, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lq: Vec<usize> = (0..20).map(|_| rng.random_range(0..5)).collect();
        let lg: Vec<usize> = (0..50).map(|_| rng.random_range(0..5)).collect();
        let r = retrieval_map(&q, &g, |i, j| lq[i] == lg[j], "f", "class").unwrap();
        assert!((r.map_score - brute_force_map(q.as_matrix(), g.as_matrix(), &lq, &lg)).abs() < 1e-12);
    }

    #[test]
    fn invariant_under_rotation_and_gallery_shuffle() {
        let (q, g) = (unit(10, 4, 4), unit(30, 4, 5));
        let lq: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let lg: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let base = retrieval_map(&q, &g, |i, j| lq[i] == lg[j], "f", "class").unwrap().map_score;

        let f = svd(&Matrix::from_fn(4, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 + if i == j { 3.0 } else { 0.0 })).unwrap();
        let rot = f.u;
        let q2 = EmbeddingMatrix::normalized(&q.as_matrix().matmul(&rot).unwrap()).unwrap();
        let g2 = EmbeddingMatrix::normalized(&g.as_matrix().matmul(&rot).unwrap()).unwrap();
        let rotated = retrieval_map(&q2, &g2, |i, j| lq[i] == lg[j], "f", "class").unwrap().map_score;
        assert!((rotated - base).abs() < 1e-12);

        let mut perm: Vec<usize> = (0..30).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(6));
        let g3 = EmbeddingMatrix::new(g.as_matrix().select_rows(&perm)).unwrap();
        let lg3: Vec<usize> = perm.iter().map(|&p| lg[p]).collect();
        let shuffled = retrieval_map(&q, &g3, |i, j| lq[i] == lg3[j], "f", "class").unwrap().map_score;
        assert!((shuffled - base).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_index() {
        assert_eq!(rank(&[0.5, 0.9, 0.5, 0.9]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn pca_planar_and_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let basis = svd(&Matrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0))).unwrap().vt;
        let pts = Matrix::from_fn(40, 6, |i, j| {
            let (s, t) = (libm::sin(i as f64), libm::cos(1.7 * i as f64));
            s * basis[(0, j)] + 0.5 * t * basis[(1, j)] + 3.0
        });
        let p = project_2d(&[&pts]).unwrap();
        assert!((p.variance_explained[0] + p.variance_explained[1] - 1.0).abs() < 1e-10);

        let line = Matrix::from_fn(10, 3, |i, j| i as f64 * [1.0, 2.0, -1.0][j]);
        let p = project_2d(&[&line]).unwrap();
        assert!(p.variance_explained[1].abs() < 1e-12);
        assert!(p.coords.row_iter().all(|r| r[1].abs() < 1e-10));
        // sign convention: largest coordinate of the first axis (index 1) is positive
        assert!(p.components[(0, 1)] > 0.0);
    }

    #[test]
    fn pca_random_cloud_and_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts = Matrix::from_fn(30, 5, |_, j| rng.random_range(-1.0..1.0) * (j + 1) as f64);
        let p = project_2d(&[&pts]).unwrap();
        let c = &p.components;
        assert!((dot(c.row(0), c.row(0)) - 1.0).abs() < 1e-12);
        assert!(dot(c.row(0), c.row(1)).abs() < 1e-12);
        assert!(p.variance_explained[0] >= p.variance_explained[1]);
        // oracle: Rayleigh quotient of the covariance along axis 0 is maximal
        // over random probe directions
        let ctr = {
            let mut m = pts.clone();
            for j in 0..5 {
                let mu = (0..30).map(|i| pts[(i, j)]).sum::<f64>() / 30.0;
                (0..30).for_each(|i| m.row_mut(i)[j] -= mu);
            }
            m
        };
        let var_along = |v: &[f64]| ctr.row_iter().map(|r| dot(r, v).powi(2)).sum::<f64>() / dot(v, v);
        let top = var_along(c.row(0));
        for _ in 0..200 {
            let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert!(var_along(&v) <= top + 1e-9);
        }
        let shifted = pts.map(|x| x + 10.0);
        let q = project_2d(&[&shifted]).unwrap();
        assert!(q.coords.sub(&p.coords).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn pca_degenerate_and_small() {
        let same = Matrix::from_fn(4, 3, |_, j| j as f64);
        assert!(project_2d(&[&same]).unwrap().degenerate);
        assert!(project_2d(&[&Matrix::zeros(2, 3)]).is_err());
    }

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.25), 2.0);
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, libm::sqrt(2.0)));
    }
}
