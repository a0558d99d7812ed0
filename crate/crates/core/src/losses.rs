//! Objective terms.
//!
//! Every term is recorded on a [`Tape`] so the same code produces loss values
//! and gradients. The free functions at the bottom evaluate single terms on
//! plain matrices.
//!
//! CLIP side for anchor `A`, within-dataset positive `P`, and the embeddings
//! `O₁..O_R` of every other dataset (n = R + 1 terms, n = 3 for two datasets):
//!
//! ```text
//! −1/(nB) Σᵢ log softmax_j(⟨Aᵢ,Pⱼ⟩/τ)ᵢ  +  Σ_r 1/(nB) Σᵢ log Σ_k exp(⟨Aᵢ,O_r,k⟩/τ)
//! ```
//!
//! MOX for one target with given modalities `G₁..G_n` and pseudo embeddings
//! `F̃` (x-data path, cosine-normalized per pair):
//!
//! ```text
//! −1/(nB) Σ_g Σᵢ log softmax_j(⟨G_g,i, F̃ⱼ⟩/τ)ᵢ  +  w_fro·‖F̃_xmod − F̃_xdata‖²_F
//! ```

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diffnet::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::linalg::{EmbeddingMatrix, Matrix};
use crate::{DatasetId, ModalityId};

/// Global temperature default.
pub const DEFAULT_TAU: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_clip: f64,
    pub w_sym: f64,
    pub w_mox: f64,
    pub w_fro: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_clip: 1.0, w_sym: 1.0, w_mox: 1.0, w_fro: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_clip, self.w_sym, self.w_mox, self.w_fro];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(alloc::format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideLoss {
    pub modality: ModalityId,
    pub dataset: DatasetId,
    pub clip: f64,
}

/// Unweighted components plus the weighted total.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub clip: f64,
    pub sym_cross_modal: f64,
    pub sym_cross_data: f64,
    pub mox_contrastive: f64,
    pub fro_reg: f64,
    pub total: f64,
    pub per_side: Vec<SideLoss>,
}

impl LossReport {
    /// Recomputes the weighted total from the components.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.w_clip * self.clip
            + w.w_sym * (self.sym_cross_modal + self.sym_cross_data)
            + w.w_mox * (self.mox_contrastive + w.w_fro * self.fro_reg)
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("clip", self.clip),
            ("sym_cross_modal", self.sym_cross_modal),
            ("sym_cross_data", self.sym_cross_data),
            ("mox_contrastive", self.mox_contrastive),
            ("fro_reg", self.fro_reg),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// One (modality, dataset) embedding matrix on the tape. Rows must be unit
/// norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Side {
    pub node: NodeId,
    pub modality: ModalityId,
    pub dataset: DatasetId,
    /// Per-modality temperature scale.
    pub scale: f64,
}

/// The observed sides of one dataset in a batch (one or two).
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSides {
    pub sides: Vec<Side>,
}

/// One MOX target: pseudo embeddings for a missing modality and the given
/// modalities they are contrasted against.
#[derive(Debug, Clone, PartialEq)]
pub struct MoxTerm {
    /// Empty for a regularizer-only term.
    pub givens: Vec<Side>,
    pub x_mod: NodeId,
    pub x_data: NodeId,
    pub target_scale: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ObjectiveNodes {
    pub clip: NodeId,
    pub sym_cross_modal: NodeId,
    pub sym_cross_data: NodeId,
    pub mox_contrastive: Option<NodeId>,
    pub fro_reg: Option<NodeId>,
    pub total: NodeId,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::contract("loss", alloc::format!("tau must be positive, got {tau}")));
    }
    Ok(())
}

fn zero(tape: &mut Tape) -> NodeId {
    tape.constant(Matrix::zeros(1, 1))
}

fn sum_nodes(tape: &mut Tape, nodes: &[NodeId]) -> Result<NodeId> {
    let Some((&first, rest)) = nodes.split_first() else { return Ok(zero(tape)) };
    rest.iter().try_fold(first, |acc, &n| tape.add(acc, n))
}

fn check_width(tape: &Tape, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
    let (x, y) = (tape.value(a), tape.value(b));
    if x.cols() != y.cols() {
        return Err(Error::shape(op, alloc::format!("embedding widths {} vs {}", x.cols(), y.cols())));
    }
    Ok(())
}

/// `Σᵢ (lse_j Sᵢⱼ − Sᵢᵢ)`, i.e. the summed negative log-softmax of matched
/// pairs.
fn matched_nll_sum(tape: &mut Tape, logits: NodeId) -> Result<NodeId> {
    let lse = tape.row_log_sum_exp(logits)?;
    let diag = tape.diag(logits)?;
    let diff = tape.sub(lse, diag)?;
    tape.sum(diff)
}

fn logits(tape: &mut Tape, a: NodeId, b: NodeId, factor: f64) -> Result<NodeId> {
    let s = tape.matmul_nt(a, b)?;
    tape.scale(s, factor)
}

/// One CLIP side. `others` are every embedding matrix of the other datasets.
pub fn record_clip_side(tape: &mut Tape, anchor: &Side, positive: &Side, others: &[Side], tau: f64) -> Result<NodeId> {
    check_tau(tau)?;
    let b = tape.value(anchor.node).rows();
    if tape.value(positive.node).shape() != tape.value(anchor.node).shape() {
        return Err(Error::shape(
            "clip_loss",
            alloc::format!("anchor {:?} vs positive {:?}", tape.value(anchor.node).shape(), tape.value(positive.node).shape()),
        ));
    }
    let norm = 1.0 / ((others.len() + 1) as f64 * b as f64);
    let s = logits(tape, anchor.node, positive.node, anchor.scale * positive.scale / tau)?;
    let mut terms = Vec::with_capacity(others.len() + 1);
    let nll = matched_nll_sum(tape, s)?;
    terms.push(tape.scale(nll, norm)?);
    for o in others {
        check_width(tape, anchor.node, o.node, "clip_loss")?;
        let s = logits(tape, anchor.node, o.node, anchor.scale * o.scale / tau)?;
        let lse = tape.row_log_sum_exp(s)?;
        let total = tape.sum(lse)?;
        terms.push(tape.scale(total, norm)?);
    }
    sum_nodes(tape, &terms)
}

/// `(1/B) Σᵢⱼ (⟨aᵢ,bⱼ⟩ − ⟨aⱼ,bᵢ⟩)²`
pub fn record_sym_cross_modal(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(Error::shape("sym_cross_modal", alloc::format!("{:?} vs {:?}", tape.value(a).shape(), tape.value(b).shape())));
    }
    let n = tape.value(a).rows() as f64;
    let s = tape.matmul_nt(a, b)?;
    let st = tape.matmul_nt(b, a)?;
    let d = tape.sub(s, st)?;
    let sq = tape.square(d)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / n)
}

/// `(1/B) Σᵢⱼ (⟨aᵢ,aⱼ⟩ − ⟨bᵢ,bⱼ⟩)²`
pub fn record_sym_cross_data(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    if tape.value(a).rows() != tape.value(b).rows() {
        return Err(Error::shape("sym_cross_data", alloc::format!("{:?} vs {:?}", tape.value(a).shape(), tape.value(b).shape())));
    }
    let n = tape.value(a).rows() as f64;
    let ga = tape.matmul_nt(a, a)?;
    let gb = tape.matmul_nt(b, b)?;
    let d = tape.sub(ga, gb)?;
    let sq = tape.square(d)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / n)
}

/// Contrastive part of one MOX target; returns `None` when there are no
/// given modalities.
pub fn record_mox_contrast(tape: &mut Tape, term: &MoxTerm, tau: f64) -> Result<Option<NodeId>> {
    check_tau(tau)?;
    if term.givens.is_empty() {
        return Ok(None);
    }
    let pseudo = tape.normalize_rows(term.x_data)?;
    let b = tape.value(pseudo).rows();
    let norm = 1.0 / (term.givens.len() as f64 * b as f64);
    let mut parts = Vec::with_capacity(term.givens.len());
    for g in &term.givens {
        if tape.value(g.node).shape() != tape.value(pseudo).shape() {
            return Err(Error::shape(
                "mox_loss",
                alloc::format!("given {:?} vs pseudo {:?}", tape.value(g.node).shape(), tape.value(pseudo).shape()),
            ));
        }
        let s = logits(tape, g.node, pseudo, g.scale * term.target_scale / tau)?;
        let nll = matched_nll_sum(tape, s)?;
        parts.push(tape.scale(nll, norm)?);
    }
    sum_nodes(tape, &parts).map(Some)
}

/// `‖x_mod − x_data‖²_F`
pub fn record_fro(tape: &mut Tape, x_mod: NodeId, x_data: NodeId) -> Result<NodeId> {
    let d = tape.sub(x_mod, x_data).map_err(|_| {
        Error::shape("fro_reg", alloc::format!("{:?} vs {:?}", tape.value(x_mod).shape(), tape.value(x_data).shape()))
    })?;
    let sq = tape.square(d)?;
    tape.sum(sq)
}

/// Records the whole objective. CLIP and symmetry terms are built for every
/// dataset that observes a pair of modalities; `mox` is empty when modality
/// extrapolation is off.
///
/// Components whose weight is zero are still recorded (for reporting) but
/// do not reach `total`, so they contribute no gradient.
pub fn record_objective(
    tape: &mut Tape,
    datasets: &[DatasetSides],
    mox: &[MoxTerm],
    tau: f64,
    weights: &LossWeights,
) -> Result<(ObjectiveNodes, Vec<(usize, usize, NodeId)>)> {
    check_tau(tau)?;
    weights.validate()?;
    let mut clip_terms = Vec::new();
    let mut per_side = Vec::new();
    let mut xm_terms = Vec::new();
    let mut xd_terms = Vec::new();
    for (di, ds) in datasets.iter().enumerate() {
        if ds.sides.len() > 2 {
            return Err(Error::contract("objective", "a dataset contributes at most two modalities per batch"));
        }
        if ds.sides.len() < 2 {
            continue;
        }
        let others: Vec<Side> = datasets
            .iter()
            .enumerate()
            .filter(|(dj, _)| *dj != di)
            .flat_map(|(_, d)| d.sides.iter().cloned())
            .collect();
        for (si, anchor) in ds.sides.iter().enumerate() {
            let positive = &ds.sides[1 - si];
            let node = record_clip_side(tape, anchor, positive, &others, tau)?;
            clip_terms.push(node);
            per_side.push((di, si, node));
        }
        xm_terms.push(record_sym_cross_modal(tape, ds.sides[0].node, ds.sides[1].node)?);
        xd_terms.push(record_sym_cross_data(tape, ds.sides[0].node, ds.sides[1].node)?);
    }
    let clip = sum_nodes(tape, &clip_terms)?;
    let sym_cross_modal = sum_nodes(tape, &xm_terms)?;
    let sym_cross_data = sum_nodes(tape, &xd_terms)?;

    let (mut mox_terms, mut fro_terms) = (Vec::new(), Vec::new());
    for term in mox {
        if let Some(n) = record_mox_contrast(tape, term, tau)? {
            mox_terms.push(n);
        }
        fro_terms.push(record_fro(tape, term.x_mod, term.x_data)?);
    }
    let (mox_contrastive, fro_reg) = if mox.is_empty() {
        (None, None)
    } else {
        (Some(sum_nodes(tape, &mox_terms)?), Some(sum_nodes(tape, &fro_terms)?))
    };

    let mut parts = Vec::new();
    if weights.w_clip != 0.0 {
        parts.push(tape.scale(clip, weights.w_clip)?);
    }
    if weights.w_sym != 0.0 {
        let s = tape.add(sym_cross_modal, sym_cross_data)?;
        parts.push(tape.scale(s, weights.w_sym)?);
    }
    if weights.w_mox != 0.0 {
        let mut inner = Vec::new();
        if let Some(m) = mox_contrastive {
            inner.push(m);
        }
        if let (Some(f), true) = (fro_reg, weights.w_fro != 0.0) {
            inner.push(tape.scale(f, weights.w_fro)?);
        }
        if !inner.is_empty() {
            let s = sum_nodes(tape, &inner)?;
            parts.push(tape.scale(s, weights.w_mox)?);
        }
    }
    let total = sum_nodes(tape, &parts)?;
    Ok((ObjectiveNodes { clip, sym_cross_modal, sym_cross_data, mox_contrastive, fro_reg, total }, per_side))
}

/// Reads a [`LossReport`] off an evaluated tape.
pub fn report_from_tape(
    tape: &Tape,
    nodes: &ObjectiveNodes,
    per_side: &[(usize, usize, NodeId)],
    datasets: &[DatasetSides],
) -> LossReport {
    LossReport {
        clip: tape.scalar(nodes.clip),
        sym_cross_modal: tape.scalar(nodes.sym_cross_modal),
        sym_cross_data: tape.scalar(nodes.sym_cross_data),
        mox_contrastive: nodes.mox_contrastive.map_or(0.0, |n| tape.scalar(n)),
        fro_reg: nodes.fro_reg.map_or(0.0, |n| tape.scalar(n)),
        total: tape.scalar(nodes.total),
        per_side: per_side
            .iter()
            .map(|&(d, s, n)| {
                let side = &datasets[d].sides[s];
                SideLoss { modality: side.modality.clone(), dataset: side.dataset.clone(), clip: tape.scalar(n) }
            })
            .collect(),
    }
}

fn unit_side(tape: &mut Tape, m: &EmbeddingMatrix, modality: &str, dataset: &str) -> Side {
    Side {
        node: tape.input(m.as_matrix().clone()),
        modality: ModalityId::new(modality),
        dataset: DatasetId::new(dataset),
        scale: 1.0,
    }
}

/// One CLIP side on plain matrices.
pub fn clip_loss_one_side(
    anchor: &EmbeddingMatrix,
    positive: &EmbeddingMatrix,
    other_dataset_mods: &[&EmbeddingMatrix],
    tau: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let a = unit_side(&mut tape, anchor, "anchor", "self");
    let p = unit_side(&mut tape, positive, "positive", "self");
    let others: Vec<Side> = other_dataset_mods.iter().map(|o| unit_side(&mut tape, o, "other", "other")).collect();
    let n = record_clip_side(&mut tape, &a, &p, &others, tau)?;
    Ok(tape.scalar(n))
}

/// The four sides of a two-dataset batch: D1 = (a, b), D2 = (b, c).
#[derive(Debug, Clone, Copy)]
pub struct FourSides<'a> {
    pub a1: &'a EmbeddingMatrix,
    pub b1: &'a EmbeddingMatrix,
    pub b2: &'a EmbeddingMatrix,
    pub c2: &'a EmbeddingMatrix,
}

impl<'a> FourSides<'a> {
    fn record(&self, tape: &mut Tape) -> [DatasetSides; 2] {
        let d1 = DatasetSides { sides: alloc::vec![unit_side(tape, self.a1, "a", "d1"), unit_side(tape, self.b1, "b", "d1")] };
        let d2 = DatasetSides { sides: alloc::vec![unit_side(tape, self.b2, "b", "d2"), unit_side(tape, self.c2, "c", "d2")] };
        [d1, d2]
    }
}

/// `L_CLIP(a1) + L_CLIP(b1) + L_CLIP(b2) + L_CLIP(c2)`.
pub fn total_clip_loss(sides: FourSides<'_>, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let ds = sides.record(&mut tape);
    let w = LossWeights { w_clip: 1.0, w_sym: 0.0, w_mox: 0.0, w_fro: 0.0 };
    let (nodes, _) = record_objective(&mut tape, &ds, &[], tau, &w)?;
    Ok(tape.scalar(nodes.clip))
}

pub fn sym_cross_modal(fa: &EmbeddingMatrix, fb: &EmbeddingMatrix) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = (tape.input(fa.as_matrix().clone()), tape.input(fb.as_matrix().clone()));
    let n = record_sym_cross_modal(&mut tape, a, b)?;
    Ok(tape.scalar(n))
}

pub fn sym_cross_data(fa: &EmbeddingMatrix, fb: &EmbeddingMatrix) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = (tape.input(fa.as_matrix().clone()), tape.input(fb.as_matrix().clone()));
    let n = record_sym_cross_data(&mut tape, a, b)?;
    Ok(tape.scalar(n))
}

/// `L_X-mod(a1,b1) + L_X-data(a1,b1) + L_X-mod(b2,c2) + L_X-data(b2,c2)`.
pub fn total_sym_loss(sides: FourSides<'_>) -> Result<f64> {
    Ok(sym_cross_modal(sides.a1, sides.b1)?
        + sym_cross_data(sides.a1, sides.b1)?
        + sym_cross_modal(sides.b2, sides.c2)?
        + sym_cross_data(sides.b2, sides.c2)?)
}

/// MOX loss of one target on plain matrices; `pseudo` is the x-data path and
/// `fro_pair` holds (x-mod, x-data) for the regularizer.
pub fn mox_loss_one_target(
    given1: &EmbeddingMatrix,
    given2: &EmbeddingMatrix,
    pseudo: &Matrix,
    fro_pair: (&Matrix, &Matrix),
    tau: f64,
    w_fro: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let g1 = unit_side(&mut tape, given1, "g1", "d");
    let g2 = unit_side(&mut tape, given2, "g2", "d");
    let x_data = tape.input(pseudo.clone());
    let term = MoxTerm { givens: alloc::vec![g1, g2], x_mod: x_data, x_data, target_scale: 1.0 };
    let contrast = record_mox_contrast(&mut tape, &term, tau)?.expect("two givens");
    let (fm, fd) = (tape.input(fro_pair.0.clone()), tape.input(fro_pair.1.clone()));
    let fro = record_fro(&mut tape, fm, fd)?;
    Ok(tape.scalar(contrast) + w_fro * tape.scalar(fro))
}

/// Pseudo embeddings for both targets: (x-mod, x-data) for c in D1 and for a
/// in D2.
#[derive(Debug, Clone, Copy)]
pub struct TwoTargets<'a> {
    pub c1: (&'a Matrix, &'a Matrix),
    pub a2: (&'a Matrix, &'a Matrix),
}

/// Full two-dataset objective on plain matrices.
pub fn total_objective(
    sides: FourSides<'_>,
    pseudo: Option<TwoTargets<'_>>,
    tau: f64,
    weights: &LossWeights,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let ds = sides.record(&mut tape);
    let mut mox = Vec::new();
    if let Some(p) = pseudo {
        let (cm, cd) = (tape.input(p.c1.0.clone()), tape.input(p.c1.1.clone()));
        let (am, ad) = (tape.input(p.a2.0.clone()), tape.input(p.a2.1.clone()));
        mox.push(MoxTerm { givens: alloc::vec![ds[0].sides[1].clone(), ds[0].sides[0].clone()], x_mod: cm, x_data: cd, target_scale: 1.0 });
        mox.push(MoxTerm { givens: alloc::vec![ds[1].sides[0].clone(), ds[1].sides[1].clone()], x_mod: am, x_data: ad, target_scale: 1.0 });
    }
    let (nodes, per_side) = record_objective(&mut tape, &ds, &mox, tau, weights)?;
    Ok(report_from_tape(&tape, &nodes, &per_side, &ds))
}

/// Label for a side, e.g. `"a@d1"`.
pub fn side_label(modality: &ModalityId, dataset: &DatasetId) -> String {
    alloc::format!("{modality}@{dataset}")
}
