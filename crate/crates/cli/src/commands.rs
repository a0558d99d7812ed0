//! The subcommands. Each writes its outputs into one directory and ends by
//! writing `manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use brokenbind_core::diffnet::ParameterStore;
use brokenbind_core::eval::{
    evaluate_flow, encode_modality, mean_std, project_2d, pseudo_fidelity, pseudo_targets, summarize, AblationRun, AblationTable,
    FidelityReport, ModalityFlow, RetrievalReport, TwoDatasetData,
};
use brokenbind_core::synthgen::MultiModalDataset;
use brokenbind_core::trainer::{self, Arm, ExperimentConfig, ThreeDatasetRoles, TrainState, TwoDatasetRoles};
use brokenbind_core::Matrix;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::formats::{self, write_file};
use crate::manifest::RunManifest;

pub const CHECKPOINT: &str = "checkpoint.bbckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

pub fn train_file(id: &str) -> String {
    format!("{id}.train.bbdata")
}

pub fn test_file(id: &str) -> String {
    format!("{id}.test.bbdata")
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, v: &T, m: &mut RunManifest) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(v).expect("serializable");
    text.push('\n');
    write_file(&dir.join(name), text.as_bytes())?;
    m.add(dir, name)
}

fn write_csv(dir: &Path, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>, m: &mut RunManifest) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Data(format!("csv: {e}")))?;
    write_file(&dir.join(name), &bytes)?;
    m.add(dir, name)
}

/// Threads for `ablate` and `sweep`, from `BB_THREADS` (default 1).
/// Results do not depend on it: every job is independent and the output
/// order is fixed.
pub fn threads_from_env() -> CliResult<usize> {
    match std::env::var("BB_THREADS") {
        Err(_) => Ok(1),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!("BB_THREADS: expected a positive integer, got {s:?}"))),
        },
    }
}

// generate

pub fn cmd_generate(cfg: &RunConfig, seed: u64, out: &Path) -> CliResult<()> {
    ensure_dir(out)?;
    let mut man = RunManifest::begin("generate", cfg.hash(), seed);
    for g in cfg.data.generate(seed)? {
        let id = g.train.id().as_str().to_string();
        info!("{}", brokenbind_core::synthgen::describe(&g.train));
        for (name, d) in [(train_file(&id), &g.train), (test_file(&id), &g.test)] {
            write_file(&out.join(&name), &formats::encode_dataset(d))?;
            man.add(out, &name)?;
        }
    }
    man.finish(out)
}

/// Train and test splits of every configured dataset, in config order.
pub struct LoadedData {
    pub train: Vec<MultiModalDataset>,
    pub test: Vec<MultiModalDataset>,
}

impl LoadedData {
    pub fn train_refs(&self) -> Vec<&MultiModalDataset> {
        self.train.iter().collect()
    }
}

/// Loads `<id>.{train,test}.bbdata` and checks each dataset's modality
/// pattern against the config before anything trains.
pub fn load_data(cfg: &RunConfig, dir: &Path) -> CliResult<LoadedData> {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for dc in &cfg.data.datasets {
        let id = dc.id.as_str();
        for (name, dst) in [(train_file(id), &mut train), (test_file(id), &mut test)] {
            let d = formats::load_dataset(&dir.join(&name))?;
            let spec = d.spec();
            if spec.id != dc.id || spec.observable_modalities != dc.observable || spec.hidden_target_modality != dc.hidden_target {
                return Err(CliError::Data(format!(
                    "{name}: modality pattern (observable {:?}, hidden {:?}) does not match config dataset {id} (observable {:?}, hidden {:?})",
                    names(&spec.observable_modalities),
                    spec.hidden_target_modality.as_ref().map(|m| m.as_str()),
                    names(&dc.observable),
                    dc.hidden_target.as_ref().map(|m| m.as_str()),
                )));
            }
            dst.push(d);
        }
    }
    let refs: Vec<&MultiModalDataset> = train.iter().collect();
    match refs.as_slice() {
        [a, b] => {
            TwoDatasetRoles::infer(a, b)?;
        }
        [a, b, c] => {
            ThreeDatasetRoles::infer(a, b, c)?;
        }
        _ => return Err(CliError::Config(format!("expected 2 or 3 datasets, config declares {}", refs.len()))),
    }
    Ok(LoadedData { train, test })
}

fn names(ms: &[brokenbind_core::ModalityId]) -> Vec<&str> {
    ms.iter().map(|m| m.as_str()).collect()
}

// train

pub struct TrainOptions {
    pub arm: Arm,
    pub resume: bool,
    /// Stop once the log holds this many epochs (across stages).
    pub stop_after: Option<usize>,
}

pub fn cmd_train(cfg: &RunConfig, seed: u64, data_dir: &Path, out: &Path, opts: &TrainOptions) -> CliResult<TrainState> {
    let data = load_data(cfg, data_dir)?;
    let exp = opts.arm.apply(&cfg.experiment(seed));
    let flow = cfg.flow()?;
    ensure_dir(out)?;
    let mut man = RunManifest::begin("train", cfg.hash(), seed);
    let ckpt = out.join(CHECKPOINT);
    let mut state = if opts.resume && ckpt.exists() {
        let st = formats::load_checkpoint(&ckpt)?;
        info!("resuming from {} at stage {} epoch {}", ckpt.display(), st.stage, st.epoch);
        st
    } else {
        if opts.resume {
            warn!("--resume given but {} does not exist; starting fresh", ckpt.display());
        }
        TrainState::fresh(&exp)?
    };
    let block = cfg.eval.fidelity_block;
    let mut hook = |st: &TrainState| -> brokenbind_core::Result<BTreeMap<String, f64>> {
        let mut m = BTreeMap::new();
        m.insert("map".into(), evaluate_flow(&exp, &st.store, &flow, &data.test[0])?.map_score);
        if data.test.len() == 2 {
            let roles = TwoDatasetRoles::infer(&data.train[0], &data.train[1])?;
            m.insert("fidelity".into(), pseudo_fidelity(&exp, &st.store, &roles, &data.test[0], &data.test[1], block)?.mean_cosine);
        }
        if let Some(e) = st.log.last() {
            info!("stage {} epoch {} loss {:.5} {:?}", e.stage, e.epoch, e.loss.total, m);
        }
        Ok(m)
    };
    match data.train_refs().as_slice() {
        [a, b] => trainer::train_two(&exp, a, b, &mut state, opts.stop_after, &mut hook)?,
        [a, b, c] => trainer::run_three_dataset(&exp, a, b, c, &mut state, opts.stop_after, &mut hook)?,
        _ => unreachable!("load_data checks the count"),
    }
    write_file(&ckpt, &formats::encode_checkpoint(&state))?;
    man.add(out, CHECKPOINT)?;
    let mut log = String::new();
    for e in &state.log {
        log.push_str(&serde_json::to_string(e).expect("serializable"));
        log.push('\n');
    }
    write_file(&out.join(TRAIN_LOG), log.as_bytes())?;
    man.add(out, TRAIN_LOG)?;
    man.finish(out)?;
    Ok(state)
}

// eval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetRange {
    pub name: String,
    /// Half-open row range in `projection.csv`.
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub flow: String,
    pub map: f64,
    pub n_queries: usize,
    pub excluded_queries: usize,
    pub seed: u64,
    pub arm: String,
    pub fidelity: Option<FidelityReport>,
    pub projection_sets: Vec<SetRange>,
    pub variance_explained: [f64; 2],
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data_dir: &Path, flow: &ModalityFlow, arm: Arm, out: &Path) -> CliResult<EvalSummary> {
    let data = load_data(cfg, data_dir)?;
    let state = formats::load_checkpoint(checkpoint)?;
    let exp = arm.apply(&cfg.experiment(state.seed));
    if ParameterStore::init(&exp.encoders, 0)?.slices() != state.store.slices() {
        return Err(CliError::Config("checkpoint parameter layout does not match the configured encoders".into()));
    }
    ensure_dir(out)?;
    let mut man = RunManifest::begin("eval", cfg.hash(), state.seed);
    let test = &data.test[0];
    let report = evaluate_flow(&exp, &state.store, flow, test)?;
    if !report.excluded_queries.is_empty() {
        warn!("{} queries had no relevant gallery item and were excluded", report.excluded_queries.len());
    }
    write_retrieval(out, &report, test.labels(), &mut man)?;

    let queries = encode_modality(&exp, &state.store, test, &flow.begin)?.into_matrix();
    let gallery = encode_modality(&exp, &state.store, test, &flow.target)?.into_matrix();
    let mut sets: Vec<(&str, Matrix)> = vec![("queries", queries), ("gallery", gallery)];
    let mut fidelity = None;
    if data.train.len() == 2 {
        let roles = TwoDatasetRoles::infer(&data.train[0], &data.train[1])?;
        if roles.c == flow.target {
            let block = cfg.eval.fidelity_block;
            fidelity = Some(pseudo_fidelity(&exp, &state.store, &roles, test, &data.test[1], block)?);
            sets.push(("pseudo", pseudo_targets(&exp, &state.store, &roles, test, &data.test[1], block)?));
        }
    }
    let proj = project_2d(&sets.iter().map(|(_, m)| m).collect::<Vec<_>>())?;
    let mut ranges = Vec::new();
    let mut rows = Vec::new();
    let mut start = 0;
    for (name, m) in &sets {
        for i in 0..m.rows() {
            let c = proj.coords.row(start + i);
            rows.push(vec![c[0].to_string(), c[1].to_string(), test.labels()[i].to_string()]);
        }
        ranges.push(SetRange { name: name.to_string(), start, end: start + m.rows() });
        start += m.rows();
    }
    write_csv(out, "projection.csv", &["x", "y", "label"], rows, &mut man)?;
    let summary = EvalSummary {
        flow: flow.to_string(),
        map: report.map_score,
        n_queries: report.num_queries,
        excluded_queries: report.excluded_queries.len(),
        seed: state.seed,
        arm: arm.name().into(),
        fidelity,
        projection_sets: ranges,
        variance_explained: proj.variance_explained,
    };
    write_json(out, "summary.json", &summary, &mut man)?;
    man.finish(out)?;
    Ok(summary)
}

fn write_retrieval(out: &Path, r: &RetrievalReport, labels: &[usize], man: &mut RunManifest) -> CliResult<()> {
    let rows = r.query_indices.iter().zip(&r.per_query_ap).map(|(&q, ap)| vec![q.to_string(), labels[q].to_string(), ap.to_string()]);
    write_csv(out, "retrieval.csv", &["query_index", "label", "ap"], rows, man)
}

// ablate and sweep

/// One training job of an ablation or sweep.
#[derive(Debug, Clone)]
pub struct Job {
    pub arm: Arm,
    pub seed: u64,
    pub cfg: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub arm: Arm,
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub map: f64,
    pub fidelity: f64,
    /// Fidelity of the same seed's untrained encoders.
    pub fidelity_init: f64,
    pub report: RetrievalReport,
}

/// Runs `jobs` on up to `threads` workers. Data are generated once per
/// seed; results come back in job order.
pub fn run_jobs(cfg: &RunConfig, jobs: &[Job], threads: usize) -> CliResult<Vec<JobResult>> {
    let flow = cfg.flow()?;
    let block = cfg.eval.fidelity_block;
    let mut seeds: Vec<u64> = jobs.iter().map(|j| j.seed).collect();
    seeds.sort();
    seeds.dedup();
    let mut data = BTreeMap::new();
    for &s in &seeds {
        data.insert(s, TwoDatasetData::generate(&cfg.data, s)?);
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CliResult<JobResult>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let work = || loop {
        let k = next.fetch_add(1, Ordering::SeqCst);
        let Some(job) = jobs.get(k) else { break };
        let r = run_job(job, &data[&job.seed], &flow, block);
        match &r {
            Ok(r) => info!("{} seed {} pretrain {}: mAP {:.4} fidelity {:.4}", r.arm, r.seed, r.pretrain_epochs, r.map, r.fidelity),
            Err(e) => warn!("{} seed {}: {e}", job.arm, job.seed),
        }
        results.lock().expect("no poisoned workers")[k] = Some(r);
    };
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            s.spawn(work);
        }
    });
    results.into_inner().expect("no poisoned workers").into_iter().map(|r| r.expect("every job ran")).collect()
}

fn run_job(job: &Job, data: &TwoDatasetData, flow: &ModalityFlow, block: usize) -> CliResult<JobResult> {
    let roles = TwoDatasetRoles::infer(&data.d1_train, &data.d2_train)?;
    let init = ParameterStore::init(&job.cfg.encoders, job.cfg.seed)?;
    let fidelity_init = pseudo_fidelity(&job.cfg, &init, &roles, &data.d1_test, &data.d2_test, block)?.mean_cosine;
    let (_, report, fid) = brokenbind_core::eval::train_and_score(&job.cfg, data, flow, block)?;
    Ok(JobResult {
        arm: job.arm,
        seed: job.seed,
        pretrain_epochs: job.cfg.pretrain_epochs,
        map: report.map_score,
        fidelity: fid.mean_cosine,
        fidelity_init,
        report,
    })
}

pub fn ablation_jobs(cfg: &RunConfig, arms: &[Arm], seeds: &[u64]) -> Vec<Job> {
    let mut jobs = Vec::new();
    for &seed in seeds {
        for &arm in arms {
            jobs.push(Job { arm, seed, cfg: arm.apply(&cfg.experiment(seed)) });
        }
    }
    jobs
}

pub fn sweep_jobs(cfg: &RunConfig, points: &[usize], seeds: &[u64]) -> Vec<Job> {
    let mut jobs = Vec::new();
    for &p in points {
        for &seed in seeds {
            jobs.push(Job { arm: Arm::Full, seed, cfg: ExperimentConfig { pretrain_epochs: p, ..cfg.experiment(seed) } });
        }
    }
    jobs
}

fn require_two(cfg: &RunConfig, what: &str) -> CliResult<()> {
    if cfg.data.datasets.len() != 2 {
        return Err(CliError::Config(format!("{what} needs a two-dataset config")));
    }
    Ok(())
}

pub fn table_of(results: &[JobResult], arms: &[Arm]) -> AblationTable {
    let runs = results
        .iter()
        .map(|r| AblationRun { arm: r.arm, seed: r.seed, map: r.map, fidelity: r.fidelity, report: r.report.clone() })
        .collect();
    summarize(runs, arms)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationDoc {
    pub flow: String,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmRow>,
    pub runs: Vec<RunRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRow {
    pub arm: String,
    pub mean: f64,
    pub std: f64,
    pub maps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub arm: String,
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub map: f64,
    pub n_queries: usize,
    pub fidelity: f64,
    pub fidelity_init: f64,
}

fn run_rows(results: &[JobResult]) -> Vec<RunRow> {
    results
        .iter()
        .map(|r| RunRow {
            arm: r.arm.name().into(),
            seed: r.seed,
            pretrain_epochs: r.pretrain_epochs,
            map: r.map,
            n_queries: r.report.num_queries,
            fidelity: r.fidelity,
            fidelity_init: r.fidelity_init,
        })
        .collect()
}

fn write_runs_csv(out: &Path, name: &str, rows: &[RunRow], man: &mut RunManifest) -> CliResult<()> {
    let body = rows.iter().map(|r| {
        vec![
            r.arm.clone(),
            r.seed.to_string(),
            r.pretrain_epochs.to_string(),
            r.map.to_string(),
            r.n_queries.to_string(),
            r.fidelity.to_string(),
            r.fidelity_init.to_string(),
        ]
    });
    write_csv(out, name, &["arm", "seed", "pretrain_epochs", "map", "n_queries", "fidelity", "fidelity_init"], body, man)
}

pub fn cmd_ablate(cfg: &RunConfig, arms: &[Arm], seeds: &[u64], threads: usize, out: &Path) -> CliResult<AblationDoc> {
    require_two(cfg, "ablate")?;
    ensure_dir(out)?;
    let mut man = RunManifest::begin("ablate", cfg.hash(), cfg.seed);
    let results = run_jobs(cfg, &ablation_jobs(cfg, arms, seeds), threads)?;
    let table = table_of(&results, arms);
    let doc = AblationDoc {
        flow: cfg.flow()?.to_string(),
        seeds: seeds.to_vec(),
        arms: table.summary.iter().map(|s| ArmRow { arm: s.arm.name().into(), mean: s.mean, std: s.std, maps: s.maps.clone() }).collect(),
        runs: run_rows(&results),
    };
    write_runs_csv(out, "ablation_runs.csv", &doc.runs, &mut man)?;
    let summary = doc.arms.iter().map(|a| vec![a.arm.clone(), a.mean.to_string(), a.std.to_string(), a.maps.len().to_string()]);
    write_csv(out, "ablation_summary.csv", &["arm", "mean_map", "std_map", "n_seeds"], summary, &mut man)?;
    write_json(out, "ablation.json", &doc, &mut man)?;
    man.finish(out)?;
    Ok(doc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub pretrain_epochs: usize,
    pub mean: f64,
    pub std: f64,
    pub maps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepDoc {
    pub flow: String,
    pub seeds: Vec<u64>,
    pub points: Vec<SweepPoint>,
    /// Whether the interior point's mean is at least every other point's.
    pub interior_is_best: bool,
    /// Mean of the best point minus the interior point's mean (0 when the shape holds).
    pub interior_shortfall: f64,
    pub runs: Vec<RunRow>,
}

/// Groups sweep results by pretraining length and checks whether the
/// middle point (by position in `points`) has the highest mean.
pub fn sweep_doc(flow: &str, seeds: &[u64], points: &[usize], results: &[JobResult]) -> SweepDoc {
    let pts: Vec<SweepPoint> = points
        .iter()
        .map(|&p| {
            let maps: Vec<f64> = results.iter().filter(|r| r.pretrain_epochs == p).map(|r| r.map).collect();
            let (mean, std) = mean_std(&maps);
            SweepPoint { pretrain_epochs: p, mean, std, maps }
        })
        .collect();
    let best = pts.iter().map(|p| p.mean).fold(f64::NEG_INFINITY, f64::max);
    let mid = pts.get(pts.len() / 2).map(|p| p.mean).unwrap_or(f64::NAN);
    SweepDoc {
        flow: flow.into(),
        seeds: seeds.to_vec(),
        interior_is_best: mid >= best,
        interior_shortfall: (best - mid).max(0.0),
        points: pts,
        runs: run_rows(results),
    }
}

pub fn write_sweep(out: &Path, doc: &SweepDoc, man: &mut RunManifest) -> CliResult<()> {
    write_runs_csv(out, "sweep_runs.csv", &doc.runs, man)?;
    let body = doc.points.iter().map(|p| vec![p.pretrain_epochs.to_string(), p.mean.to_string(), p.std.to_string(), p.maps.len().to_string()]);
    write_csv(out, "sweep_summary.csv", &["pretrain_epochs", "mean_map", "std_map", "n_seeds"], body, man)?;
    write_json(out, "sweep.json", doc, man)
}

pub fn cmd_sweep(cfg: &RunConfig, points: &[usize], seeds: &[u64], threads: usize, out: &Path) -> CliResult<SweepDoc> {
    require_two(cfg, "sweep")?;
    if points.is_empty() {
        return Err(CliError::Config("eval.pretrain_sweep: no points".into()));
    }
    for &p in points {
        if p > cfg.train.epochs {
            return Err(CliError::Config(format!("eval.pretrain_sweep: {p} exceeds train.epochs {}", cfg.train.epochs)));
        }
    }
    ensure_dir(out)?;
    let mut man = RunManifest::begin("sweep", cfg.hash(), cfg.seed);
    let results = run_jobs(cfg, &sweep_jobs(cfg, points, seeds), threads)?;
    let doc = sweep_doc(&cfg.flow()?.to_string(), seeds, points, &results);
    if !doc.interior_is_best {
        warn!("pretraining sweep: interior point trails the best point by {:.4} mAP", doc.interior_shortfall);
    }
    write_sweep(out, &doc, &mut man)?;
    man.finish(out)?;
    Ok(doc)
}

// export

/// CSV copies of every dataset file, for inspection.
pub fn cmd_export(cfg: &RunConfig, data_dir: &Path, out: &Path) -> CliResult<Vec<PathBuf>> {
    let data = load_data(cfg, data_dir)?;
    ensure_dir(out)?;
    let mut man = RunManifest::begin("export", cfg.hash(), cfg.seed);
    let mut written = Vec::new();
    for (d, split) in data.train.iter().map(|d| (d, "train")).chain(data.test.iter().map(|d| (d, "test"))) {
        let name = format!("{}.{split}.csv", d.id());
        write_file(&out.join(&name), &formats::dataset_csv(d)?)?;
        man.add(out, &name)?;
        written.push(out.join(name));
    }
    man.finish(out)?;
    Ok(written)
}
