//! On-disk formats. All integers and floats are little-endian.
//!
//! Checkpoint (`.bbckpt`):
//!
//! ```text
//! "BBCKPT1\0"
//! u64 seed, u64 stage, u64 epoch, u64 step
//! u64 slice count, then per slice:
//!   u32 name length, name bytes (UTF-8)
//!   u64 element count n, u64 rows, u64 cols, u64 optimizer steps
//!   n × f64 parameters, n × f64 first moment, n × f64 second moment
//! u64 log length, training log as JSON
//! ```
//!
//! Dataset (`.bbdata`):
//!
//! ```text
//! "BBDATA1\0"
//! u64 header length, header as JSON (dataset spec, sample count,
//!   latent_dim, and the modality column layout)
//! per sample: u64 label, latent_dim × f64 latent, then for each header
//!   modality in order its cols × f64
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use brokenbind_core::diffnet::{ParamSlice, ParameterStore};
use brokenbind_core::synthgen::{DatasetSpec, MultiModalDataset};
use brokenbind_core::trainer::{EpochLog, TrainState};
use brokenbind_core::{Matrix, ModalityId};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const CKPT_MAGIC: &[u8; 8] = b"BBCKPT1\0";
pub const DATA_MAGIC: &[u8; 8] = b"BBDATA1\0";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> CliResult<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(CliError::Data(format!("{}: truncated at byte {}", self.what, self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> CliResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> CliResult<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| CliError::Data(format!("{}: length {v} out of range", self.what)))
    }

    fn f64s(&mut self, n: usize) -> CliResult<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| CliError::Data(format!("{}: length overflow", self.what)))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn json<T: for<'de> Deserialize<'de>>(&mut self) -> CliResult<T> {
        let n = self.usize()?;
        let bytes = self.take(n)?;
        serde_json::from_slice(bytes).map_err(|e| CliError::Data(format!("{}: bad JSON block: {e}", self.what)))
    }

    fn magic(&mut self, want: &[u8; 8]) -> CliResult<()> {
        if self.take(8)? != want {
            return Err(CliError::Data(format!("{}: bad magic, expected {:?}", self.what, String::from_utf8_lossy(want))));
        }
        Ok(())
    }

    fn finish(&self) -> CliResult<()> {
        if self.pos != self.buf.len() {
            return Err(CliError::Data(format!("{}: {} trailing bytes", self.what, self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_json<T: Serialize>(out: &mut Vec<u8>, v: &T) {
    let s = serde_json::to_vec(v).expect("serializable");
    put_u64(out, s.len() as u64);
    out.extend_from_slice(&s);
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    for v in [state.seed, state.stage as u64, state.epoch as u64, state.step] {
        put_u64(&mut out, v);
    }
    let store = &state.store;
    put_u64(&mut out, store.slices().len() as u64);
    for (k, s) in store.slices().iter().enumerate() {
        out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        for v in [s.len() as u64, s.rows as u64, s.cols as u64, store.steps()[k]] {
            put_u64(&mut out, v);
        }
        let r = s.range();
        put_f64s(&mut out, &store.theta()[r.clone()]);
        put_f64s(&mut out, &store.first_moment()[r.clone()]);
        put_f64s(&mut out, &store.second_moment()[r]);
    }
    put_json(&mut out, &state.log);
    out
}

pub fn decode_checkpoint(buf: &[u8]) -> CliResult<TrainState> {
    let mut r = Reader { buf, pos: 0, what: "checkpoint" };
    r.magic(CKPT_MAGIC)?;
    let seed = r.u64()?;
    let stage = r.usize()?;
    let epoch = r.usize()?;
    let step = r.u64()?;
    let n_slices = r.usize()?;
    let (mut slices, mut theta, mut m, mut v, mut steps) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n_slices {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| CliError::Data("checkpoint: slice name is not UTF-8".into()))?;
        let n = r.usize()?;
        let (rows, cols) = (r.usize()?, r.usize()?);
        if rows.checked_mul(cols) != Some(n) {
            return Err(CliError::Data(format!("checkpoint: slice {name} is {rows}×{cols} but holds {n} values")));
        }
        steps.push(r.u64()?);
        slices.push(ParamSlice { name, offset: theta.len(), rows, cols });
        theta.extend(r.f64s(n)?);
        m.extend(r.f64s(n)?);
        v.extend(r.f64s(n)?);
    }
    let log: Vec<EpochLog> = r.json()?;
    r.finish()?;
    let store = ParameterStore::from_parts(slices, theta, m, v, steps).map_err(|e| CliError::Data(format!("checkpoint: {e}")))?;
    Ok(TrainState { seed, stage, epoch, step, store, log })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnBlock {
    pub modality: ModalityId,
    pub cols: usize,
    /// Hidden-target data: stored for evaluation, never batched.
    pub hidden: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataHeader {
    pub spec: DatasetSpec,
    pub num_samples: usize,
    pub latent_dim: usize,
    pub blocks: Vec<ColumnBlock>,
}

fn blocks_of(d: &MultiModalDataset) -> Vec<(ColumnBlock, &Matrix)> {
    let obs = d.observed_modalities().map(|(k, x)| (ColumnBlock { modality: k.clone(), cols: x.cols(), hidden: false }, x));
    let hid = d.hidden_modalities().map(|(k, x)| (ColumnBlock { modality: k.clone(), cols: x.cols(), hidden: true }, x));
    obs.chain(hid).collect()
}

pub fn encode_dataset(d: &MultiModalDataset) -> Vec<u8> {
    let blocks = blocks_of(d);
    let header = DataHeader {
        spec: d.spec().clone(),
        num_samples: d.len(),
        latent_dim: d.latents().cols(),
        blocks: blocks.iter().map(|(b, _)| b.clone()).collect(),
    };
    let mut out = Vec::new();
    out.extend_from_slice(DATA_MAGIC);
    put_json(&mut out, &header);
    for i in 0..d.len() {
        put_u64(&mut out, d.labels()[i] as u64);
        put_f64s(&mut out, d.latents().row(i));
        for (_, x) in &blocks {
            put_f64s(&mut out, x.row(i));
        }
    }
    out
}

pub fn decode_dataset(buf: &[u8]) -> CliResult<MultiModalDataset> {
    let mut r = Reader { buf, pos: 0, what: "dataset" };
    r.magic(DATA_MAGIC)?;
    let h: DataHeader = r.json()?;
    let n = h.num_samples;
    let mut labels = Vec::with_capacity(n);
    let mut latents = Vec::with_capacity(n * h.latent_dim);
    let mut cols: Vec<Vec<f64>> = h.blocks.iter().map(|b| Vec::with_capacity(n * b.cols)).collect();
    for _ in 0..n {
        labels.push(r.usize()?);
        latents.extend(r.f64s(h.latent_dim)?);
        for (b, c) in h.blocks.iter().zip(cols.iter_mut()) {
            c.extend(r.f64s(b.cols)?);
        }
    }
    r.finish()?;
    let (mut observed, mut hidden) = (BTreeMap::new(), BTreeMap::new());
    for (b, c) in h.blocks.iter().zip(cols) {
        let m = Matrix::new(n, b.cols, c).map_err(|e| CliError::Data(format!("dataset: {e}")))?;
        if b.hidden { &mut hidden } else { &mut observed }.insert(b.modality.clone(), m);
    }
    let latents = Matrix::new(n, h.latent_dim, latents).map_err(|e| CliError::Data(format!("dataset: {e}")))?;
    Ok(MultiModalDataset::from_parts(h.spec, labels, latents, observed, hidden)?)
}

/// Plain-text view: one row per sample with label, latent and modality
/// columns named `z0..`, `<modality>_<k>` (hidden modalities prefixed `hidden_`).
pub fn dataset_csv(d: &MultiModalDataset) -> CliResult<Vec<u8>> {
    let blocks = blocks_of(d);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut head = vec!["label".to_string()];
    head.extend((0..d.latents().cols()).map(|k| format!("z{k}")));
    for (b, _) in &blocks {
        let pre = if b.hidden { "hidden_" } else { "" };
        head.extend((0..b.cols).map(|k| format!("{pre}{}_{k}", b.modality)));
    }
    w.write_record(&head)?;
    for i in 0..d.len() {
        let mut row = vec![d.labels()[i].to_string()];
        row.extend(d.latents().row(i).iter().map(|x| x.to_string()));
        for (_, x) in &blocks {
            row.extend(x.row(i).iter().map(|v| v.to_string()));
        }
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| CliError::Data(format!("csv: {e}")))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut f = std::fs::File::create(path).map_err(CliError::io(path))?;
    f.write_all(bytes).map_err(CliError::io(path))
}

pub fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(CliError::io(path))?;
    Ok(buf)
}

pub fn load_checkpoint(path: &Path) -> CliResult<TrainState> {
    decode_checkpoint(&read_file(path)?).map_err(|e| match e {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn load_dataset(path: &Path) -> CliResult<MultiModalDataset> {
    decode_dataset(&read_file(path)?).map_err(|e| match e {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}
