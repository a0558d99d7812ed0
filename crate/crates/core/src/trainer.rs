//! Training loop.
//!
//! Each step encodes every observable side of a batch, builds pseudo
//! embeddings through frozen pseudo-inverses of the pivot embeddings,
//! records the objective, backpropagates and takes one AdamW step.
//! Epochs before `pretrain_epochs` skip extrapolation entirely; epochs
//! before `stage1_epochs` train only the final layer of each encoder.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diffnet::{AdamW, EncoderSpec, Nonlinearity, ParameterStore, Tape};
use crate::error::{Error, Result};
use crate::losses::{self, DatasetSides, LossReport, LossWeights, MoxTerm, Side};
use crate::synthgen::{make_batches, MultiModalBatch, MultiModalDataset};
use crate::xtrap::record_pseudo;
use crate::{DatasetId, ModalityId};

fn default_epochs() -> usize {
    50
}
fn default_pretrain() -> usize {
    25
}
fn default_stage1() -> usize {
    5
}
fn default_batch() -> usize {
    16
}
fn default_tau() -> f64 {
    losses::DEFAULT_TAU
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_pretrain")]
    pub pretrain_epochs: usize,
    /// Leading epochs during which only each encoder's final layer trains.
    #[serde(default = "default_stage1")]
    pub stage1_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamW,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub weights: LossWeights,
    pub encoders: Vec<EncoderSpec>,
    /// Evaluate every this many epochs; 0 disables periodic evaluation.
    #[serde(default)]
    pub eval_every: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.pretrain_epochs > self.epochs {
            return bad(alloc::format!("pretrain_epochs {} exceeds epochs {}", self.pretrain_epochs, self.epochs));
        }
        if self.stage1_epochs > self.epochs {
            return bad(alloc::format!("stage1_epochs {} exceeds epochs {}", self.stage1_epochs, self.epochs));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(alloc::format!("tau must be positive, got {}", self.tau));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.weight_decay >= 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return bad(alloc::format!("invalid optimizer settings {o:?}"));
        }
        self.weights.validate()?;
        for (i, e) in self.encoders.iter().enumerate() {
            e.validate()?;
            if self.encoders[..i].iter().any(|p| p.modality == e.modality) {
                return bad(alloc::format!("two encoders for modality {}", e.modality));
            }
        }
        let dims: Vec<usize> = self.encoders.iter().map(|e| e.embed_dim()).collect();
        if dims.windows(2).any(|w| w[0] != w[1]) {
            return bad("all encoders must share one embedding dimension".into());
        }
        Ok(())
    }

    pub fn encoder(&self, m: &ModalityId) -> Result<&EncoderSpec> {
        self.encoders
            .iter()
            .find(|e| &e.modality == m)
            .ok_or_else(|| Error::Config(alloc::format!("no encoder configured for modality {m}")))
    }
}

/// `input → hidden → embed` encoders, one per `(modality, input_dim, temperature_scale)`.
pub fn mlp_encoders(inputs: &[(ModalityId, usize, f64)], hidden: usize, embed: usize, nonlinearity: Nonlinearity) -> Vec<EncoderSpec> {
    inputs
        .iter()
        .map(|(m, d, s)| {
            let mut e = EncoderSpec::new(m.clone(), alloc::vec![*d, hidden, embed], nonlinearity);
            e.temperature_scale = *s;
            e
        })
        .collect()
}

/// Which parameter slices train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainability {
    All,
    FinalLayerOnly,
}

impl Trainability {
    /// Per-slice mask for `store`, or `None` when everything trains.
    pub fn mask(&self, encoders: &[EncoderSpec], store: &ParameterStore) -> Option<Vec<bool>> {
        match self {
            Trainability::All => None,
            Trainability::FinalLayerOnly => {
                let mut mask = alloc::vec![false; store.slices().len()];
                for e in encoders {
                    let last = e.num_layers() - 1;
                    for name in [EncoderSpec::weight_name(&e.modality, last), EncoderSpec::bias_name(&e.modality, last)] {
                        if let Some(k) = store.slice_index(&name) {
                            mask[k] = true;
                        }
                    }
                }
                Some(mask)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub weights: LossWeights,
    pub trainability: Trainability,
}

impl Phase {
    pub fn mox_enabled(&self) -> bool {
        self.weights.w_mox != 0.0
    }
}

/// Effective weights and trainability for `epoch`.
pub fn phase_schedule(epoch: usize, cfg: &ExperimentConfig) -> Phase {
    let mut weights = cfg.weights;
    if epoch < cfg.pretrain_epochs {
        weights.w_mox = 0.0;
    }
    let trainability = if epoch < cfg.stage1_epochs { Trainability::FinalLayerOnly } else { Trainability::All };
    Phase { weights, trainability }
}

/// Ablation settings, each a projection of the configured weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Full,
    NoFro,
    NoCons,
    NoMox,
    ClipOnly,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::Full, Arm::NoFro, Arm::NoCons, Arm::NoMox, Arm::ClipOnly];

    pub fn name(&self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoFro => "no_fro",
            Arm::NoCons => "no_cons",
            Arm::NoMox => "no_mox",
            Arm::ClipOnly => "clip_only",
        }
    }

    pub fn parse(s: &str) -> Result<Arm> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(alloc::format!("unknown arm {s:?}; expected one of full, no_fro, no_cons, no_mox, clip_only")))
    }

    pub fn project(&self, w: LossWeights) -> LossWeights {
        match self {
            Arm::Full => w,
            Arm::NoFro => LossWeights { w_fro: 0.0, ..w },
            Arm::NoCons => LossWeights { w_sym: 0.0, ..w },
            Arm::NoMox => LossWeights { w_mox: 0.0, ..w },
            Arm::ClipOnly => LossWeights { w_sym: 0.0, w_mox: 0.0, ..w },
        }
    }

    pub fn apply(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        ExperimentConfig { weights: self.project(cfg.weights), ..cfg.clone() }
    }
}

impl core::fmt::Display for Arm {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Modality roles of the two-dataset setting: D1 observes (a, b), D2
/// observes (b, c); b is the pivot and c is missing from D1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TwoDatasetRoles {
    pub a: ModalityId,
    pub b: ModalityId,
    pub c: ModalityId,
}

impl TwoDatasetRoles {
    pub fn infer(d1: &MultiModalDataset, d2: &MultiModalDataset) -> Result<Self> {
        let (o1, o2) = (&d1.spec().observable_modalities, &d2.spec().observable_modalities);
        let mismatch = |why: &str| {
            Err(Error::Data(alloc::format!(
                "two-dataset setting needs D1 = (a, b) and D2 = (b, c) with one shared pivot: {why} ({:?} vs {:?})",
                o1.iter().map(|m| m.as_str()).collect::<Vec<_>>(),
                o2.iter().map(|m| m.as_str()).collect::<Vec<_>>()
            )))
        };
        if o1.len() != 2 || o2.len() != 2 {
            return mismatch("each dataset must observe exactly two modalities");
        }
        let shared: Vec<&ModalityId> = o1.iter().filter(|m| o2.contains(m)).collect();
        if shared.len() != 1 {
            return mismatch("exactly one modality must be shared");
        }
        let b = shared[0].clone();
        let a = o1.iter().find(|m| **m != b).expect("two modalities").clone();
        let c = o2.iter().find(|m| **m != b).expect("two modalities").clone();
        Ok(TwoDatasetRoles { a, b, c })
    }
}

/// Roles of the three-dataset setting: D1 observes a, D2 observes (a, b),
/// D3 observes (b, c); c is missing from D1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreeDatasetRoles {
    pub a: ModalityId,
    pub b: ModalityId,
    pub c: ModalityId,
}

impl ThreeDatasetRoles {
    pub fn infer(d1: &MultiModalDataset, d2: &MultiModalDataset, d3: &MultiModalDataset) -> Result<Self> {
        let (o1, o2, o3) = (
            &d1.spec().observable_modalities,
            &d2.spec().observable_modalities,
            &d3.spec().observable_modalities,
        );
        let err = || {
            Err(Error::Data(alloc::format!(
                "three-dataset setting needs D1 = (a), D2 = (a, b), D3 = (b, c); got {:?}, {:?}, {:?}",
                o1.iter().map(|m| m.as_str()).collect::<Vec<_>>(),
                o2.iter().map(|m| m.as_str()).collect::<Vec<_>>(),
                o3.iter().map(|m| m.as_str()).collect::<Vec<_>>()
            )))
        };
        if o1.len() != 1 || o2.len() != 2 || o3.len() != 2 || !o2.contains(&o1[0]) {
            return err();
        }
        let a = o1[0].clone();
        let b = o2.iter().find(|m| **m != a).expect("two").clone();
        if !o3.contains(&b) || o3.contains(&a) {
            return err();
        }
        let c = o3.iter().find(|m| **m != b).expect("two").clone();
        Ok(ThreeDatasetRoles { a, b, c })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// `"main"` for two datasets, `"A"`/`"B"` for the three-dataset stages.
    pub stage: String,
    pub epoch: usize,
    pub steps: u64,
    pub mox_enabled: bool,
    pub trainability: Trainability,
    /// Mean of the per-batch reports.
    pub loss: LossReport,
    #[serde(default)]
    pub eval: BTreeMap<String, f64>,
}

/// Everything needed to continue a run bitwise. Batch order is a pure
/// function of `(seed, epoch)`, so no RNG state is carried.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub seed: u64,
    /// Index of the next stage to run (three-dataset runs have two).
    pub stage: usize,
    /// Next epoch to run within `stage`.
    pub epoch: usize,
    pub step: u64,
    pub store: ParameterStore,
    pub log: Vec<EpochLog>,
}

impl TrainState {
    pub fn fresh(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(TrainState { seed: cfg.seed, stage: 0, epoch: 0, step: 0, store: ParameterStore::init(&cfg.encoders, cfg.seed)?, log: Vec::new() })
    }
}

/// Called after every epoch with the state; returns metrics for the log.
pub type EpochHook<'h> = dyn FnMut(&TrainState) -> Result<BTreeMap<String, f64>> + 'h;

/// How a batch's sides map onto the objective.
#[derive(Debug, Clone)]
enum Layout {
    Two(TwoDatasetRoles),
    /// Stage A of the three-dataset run: datasets (D1, D2) only.
    ThreeA(ThreeDatasetRoles),
    ThreeB(ThreeDatasetRoles),
}

fn side(tape: &mut Tape, cfg: &ExperimentConfig, store: &ParameterStore, batch: &MultiModalBatch, part: usize, m: &ModalityId) -> Result<Side> {
    let p = &batch.parts[part];
    let raw = p
        .modalities
        .get(m)
        .ok_or_else(|| Error::Data(alloc::format!("batch from {} lacks modality {m}", p.dataset)))?;
    let enc = cfg.encoder(m)?;
    let x = tape.input(raw.clone());
    let node = enc.record(tape, store, x)?;
    Ok(Side { node, modality: m.clone(), dataset: p.dataset.clone(), scale: enc.temperature_scale })
}

fn scale_of(cfg: &ExperimentConfig, m: &ModalityId) -> Result<f64> {
    Ok(cfg.encoder(m)?.temperature_scale)
}

struct Recorded {
    tape: Tape,
    nodes: losses::ObjectiveNodes,
    per_side: Vec<(usize, usize, crate::diffnet::NodeId)>,
    datasets: Vec<DatasetSides>,
}

fn record_batch(cfg: &ExperimentConfig, store: &ParameterStore, batch: &MultiModalBatch, layout: &Layout, phase: &Phase) -> Result<Recorded> {
    let mut tape = Tape::new();
    let mox_on = phase.mox_enabled();
    let (datasets, mox) = match layout {
        Layout::Two(r) => {
            let a1 = side(&mut tape, cfg, store, batch, 0, &r.a)?;
            let b1 = side(&mut tape, cfg, store, batch, 0, &r.b)?;
            let b2 = side(&mut tape, cfg, store, batch, 1, &r.b)?;
            let c2 = side(&mut tape, cfg, store, batch, 1, &r.c)?;
            let mut mox = Vec::new();
            if mox_on {
                let c1 = record_pseudo(&mut tape, b1.node, b2.node, c2.node)?;
                let a2 = record_pseudo(&mut tape, b2.node, b1.node, a1.node)?;
                mox.push(MoxTerm { givens: alloc::vec![b1.clone(), a1.clone()], x_mod: c1.x_mod, x_data: c1.x_data, target_scale: scale_of(cfg, &r.c)? });
                mox.push(MoxTerm { givens: alloc::vec![b2.clone(), c2.clone()], x_mod: a2.x_mod, x_data: a2.x_data, target_scale: scale_of(cfg, &r.a)? });
            }
            (alloc::vec![DatasetSides { sides: alloc::vec![a1, b1] }, DatasetSides { sides: alloc::vec![b2, c2] }], mox)
        }
        Layout::ThreeA(r) => {
            let a1 = side(&mut tape, cfg, store, batch, 0, &r.a)?;
            let a2 = side(&mut tape, cfg, store, batch, 1, &r.a)?;
            let b2 = side(&mut tape, cfg, store, batch, 1, &r.b)?;
            let mut mox = Vec::new();
            if mox_on {
                let b1 = record_pseudo(&mut tape, a1.node, a2.node, b2.node)?;
                mox.push(MoxTerm { givens: alloc::vec![a1.clone()], x_mod: b1.x_mod, x_data: b1.x_data, target_scale: scale_of(cfg, &r.b)? });
            }
            (alloc::vec![DatasetSides { sides: alloc::vec![a1] }, DatasetSides { sides: alloc::vec![a2, b2] }], mox)
        }
        Layout::ThreeB(r) => {
            let a1 = side(&mut tape, cfg, store, batch, 0, &r.a)?;
            let a2 = side(&mut tape, cfg, store, batch, 1, &r.a)?;
            let b2 = side(&mut tape, cfg, store, batch, 1, &r.b)?;
            let b3 = side(&mut tape, cfg, store, batch, 2, &r.b)?;
            let c3 = side(&mut tape, cfg, store, batch, 2, &r.c)?;
            let mut mox = Vec::new();
            if mox_on {
                let b1 = record_pseudo(&mut tape, a1.node, a2.node, b2.node)?;
                let c1 = record_pseudo(&mut tape, b1.x_data, b3.node, c3.node)?;
                mox.push(MoxTerm { givens: Vec::new(), x_mod: b1.x_mod, x_data: b1.x_data, target_scale: scale_of(cfg, &r.b)? });
                mox.push(MoxTerm { givens: alloc::vec![a1.clone()], x_mod: c1.x_mod, x_data: c1.x_data, target_scale: scale_of(cfg, &r.c)? });
            }
            (
                alloc::vec![
                    DatasetSides { sides: alloc::vec![a1] },
                    DatasetSides { sides: alloc::vec![a2, b2] },
                    DatasetSides { sides: alloc::vec![b3, c3] },
                ],
                mox,
            )
        }
    };
    let (nodes, per_side) = losses::record_objective(&mut tape, &datasets, &mox, cfg.tau, &phase.weights)?;
    Ok(Recorded { tape, nodes, per_side, datasets })
}

/// Objective and gradient for one batch, without touching the store.
pub fn batch_loss_and_grad(
    cfg: &ExperimentConfig,
    store: &ParameterStore,
    batch: &MultiModalBatch,
    roles: &TwoDatasetRoles,
    phase: &Phase,
) -> Result<(LossReport, Vec<f64>)> {
    let rec = record_batch(cfg, store, batch, &Layout::Two(roles.clone()), phase)?;
    let report = losses::report_from_tape(&rec.tape, &rec.nodes, &rec.per_side, &rec.datasets);
    let grads = rec.tape.backward(rec.nodes.total, store.len())?;
    Ok((report, grads))
}

fn accumulate(sum: &mut LossReport, r: &LossReport) {
    sum.clip += r.clip;
    sum.sym_cross_modal += r.sym_cross_modal;
    sum.sym_cross_data += r.sym_cross_data;
    sum.mox_contrastive += r.mox_contrastive;
    sum.fro_reg += r.fro_reg;
    sum.total += r.total;
    if sum.per_side.is_empty() {
        sum.per_side = r.per_side.clone();
    } else {
        for (s, x) in sum.per_side.iter_mut().zip(&r.per_side) {
            s.clip += x.clip;
        }
    }
}

fn mean(mut sum: LossReport, n: usize) -> LossReport {
    let k = 1.0 / n.max(1) as f64;
    sum.clip *= k;
    sum.sym_cross_modal *= k;
    sum.sym_cross_data *= k;
    sum.mox_contrastive *= k;
    sum.fro_reg *= k;
    sum.total *= k;
    for s in &mut sum.per_side {
        s.clip *= k;
    }
    sum
}

/// Runs one epoch of `layout` over `datasets`, updating `state`.
fn run_epoch(
    cfg: &ExperimentConfig,
    datasets: &[&MultiModalDataset],
    layout: &Layout,
    stage_name: &str,
    state: &mut TrainState,
) -> Result<EpochLog> {
    let epoch = state.epoch;
    let phase = phase_schedule(epoch, cfg);
    let mask = phase.trainability.mask(&cfg.encoders, &state.store);
    // stage index folds into the batching stream so stages see different orders
    let seed = crate::synthgen::derive_seed(cfg.seed, 100 + state.stage as u64, 0);
    let batches = make_batches(datasets, cfg.batch_size, seed, epoch as u64)?;
    if batches.is_empty() {
        return Err(Error::Data(alloc::format!("batch size {} leaves no full batch", cfg.batch_size)));
    }
    let mut sum = LossReport::default();
    for (bi, batch) in batches.iter().enumerate() {
        let at = |e: Error| match e {
            Error::Numerical { op, detail } => Error::Numerical {
                op,
                detail: alloc::format!("{detail} (stage {stage_name}, epoch {epoch}, batch {bi})"),
            },
            Error::DegenerateEmbedding { modality, row } => Error::Numerical {
                op: "encode",
                detail: alloc::format!(
                    "modality {modality} produced a zero or non-finite embedding at row {row} (stage {stage_name}, epoch {epoch}, batch {bi})"
                ),
            },
            other => other,
        };
        let rec = record_batch(cfg, &state.store, batch, layout, &phase).map_err(at)?;
        let report = losses::report_from_tape(&rec.tape, &rec.nodes, &rec.per_side, &rec.datasets);
        if let Some(term) = report.non_finite_term() {
            return Err(Error::Numerical {
                op: "train",
                detail: alloc::format!("non-finite {term} loss at stage {stage_name}, epoch {epoch}, batch {bi}"),
            });
        }
        let grads = rec.tape.backward(rec.nodes.total, state.store.len()).map_err(at)?;
        cfg.optimizer.step(&mut state.store, &grads, mask.as_deref())?;
        state.step += 1;
        accumulate(&mut sum, &report);
    }
    Ok(EpochLog {
        stage: String::from(stage_name),
        epoch,
        steps: batches.len() as u64,
        mox_enabled: phase.mox_enabled(),
        trainability: phase.trainability,
        loss: mean(sum, batches.len()),
        eval: BTreeMap::new(),
    })
}

fn run_stage(
    cfg: &ExperimentConfig,
    datasets: &[&MultiModalDataset],
    layout: &Layout,
    stage_name: &str,
    state: &mut TrainState,
    stop_after: Option<usize>,
    hook: &mut EpochHook<'_>,
) -> Result<bool> {
    while state.epoch < cfg.epochs {
        if stop_after.is_some_and(|k| state.log.len() >= k) {
            return Ok(false);
        }
        let mut entry = run_epoch(cfg, datasets, layout, stage_name, state)?;
        state.epoch += 1;
        if cfg.eval_every > 0 && (state.epoch % cfg.eval_every == 0 || state.epoch == cfg.epochs) {
            entry.eval = hook(state)?;
        }
        state.log.push(entry);
    }
    Ok(true)
}

/// Two-dataset training from `state` until `cfg.epochs`, or until the log
/// holds `stop_after` epochs (for checkpointing mid-run).
pub fn train_two(
    cfg: &ExperimentConfig,
    d1: &MultiModalDataset,
    d2: &MultiModalDataset,
    state: &mut TrainState,
    stop_after: Option<usize>,
    hook: &mut EpochHook<'_>,
) -> Result<()> {
    cfg.validate()?;
    let roles = TwoDatasetRoles::infer(d1, d2)?;
    check_encoders(cfg, d1, &[&roles.a, &roles.b, &roles.c])?;
    check_resume(cfg, state)?;
    run_stage(cfg, &[d1, d2], &Layout::Two(roles), "main", state, stop_after, hook)?;
    Ok(())
}

/// Fresh two-dataset run without evaluation.
pub fn train(cfg: &ExperimentConfig, d1: &MultiModalDataset, d2: &MultiModalDataset) -> Result<TrainState> {
    let mut state = TrainState::fresh(cfg)?;
    train_two(cfg, d1, d2, &mut state, None, &mut |_| Ok(BTreeMap::new()))?;
    Ok(state)
}

/// Three-dataset run: stage A binds the intermediate modality b into D1
/// using (D1, D2); stage B extrapolates c into D1 through the chain
/// D1 ← D2 ← D3. Each stage runs the full epoch schedule.
pub fn run_three_dataset(
    cfg: &ExperimentConfig,
    d1: &MultiModalDataset,
    d2: &MultiModalDataset,
    d3: &MultiModalDataset,
    state: &mut TrainState,
    stop_after: Option<usize>,
    hook: &mut EpochHook<'_>,
) -> Result<()> {
    cfg.validate()?;
    let roles = ThreeDatasetRoles::infer(d1, d2, d3)?;
    check_encoders(cfg, d1, &[&roles.a, &roles.b, &roles.c])?;
    if cfg.batch_size % 3 != 0 {
        return Err(Error::Config(alloc::format!("three-dataset batch_size {} must be divisible by 3", cfg.batch_size)));
    }
    check_resume(cfg, state)?;
    // Stage A batches D1 and D2 with the same per-dataset row count as stage B.
    let stage_a_cfg = ExperimentConfig { batch_size: cfg.batch_size / 3 * 2, ..cfg.clone() };
    if state.stage == 0 {
        if !run_stage(&stage_a_cfg, &[d1, d2], &Layout::ThreeA(roles.clone()), "A", state, stop_after, hook)? {
            return Ok(());
        }
        state.stage = 1;
        state.epoch = 0;
    }
    run_stage(cfg, &[d1, d2, d3], &Layout::ThreeB(roles), "B", state, stop_after, hook)?;
    Ok(())
}

fn check_encoders(cfg: &ExperimentConfig, d: &MultiModalDataset, mods: &[&ModalityId]) -> Result<()> {
    for m in mods {
        cfg.encoder(m)?;
    }
    for (m, x) in d.observed_modalities() {
        let e = cfg.encoder(m)?;
        if e.input_dim() != x.cols() {
            return Err(Error::Config(alloc::format!("encoder {m} expects {} inputs, data has {}", e.input_dim(), x.cols())));
        }
    }
    Ok(())
}

fn check_resume(cfg: &ExperimentConfig, state: &TrainState) -> Result<()> {
    if state.seed != cfg.seed {
        return Err(Error::Config(alloc::format!("checkpoint seed {} differs from config seed {}", state.seed, cfg.seed)));
    }
    let fresh = ParameterStore::init(&cfg.encoders, cfg.seed)?;
    if fresh.slices() != state.store.slices() {
        return Err(Error::Config("checkpoint parameter layout does not match the configured encoders".into()));
    }
    Ok(())
}

/// Dataset ids in the order a layout expects, for diagnostics.
pub fn dataset_ids(ds: &[&MultiModalDataset]) -> Vec<DatasetId> {
    ds.iter().map(|d| d.id().clone()).collect()
}
