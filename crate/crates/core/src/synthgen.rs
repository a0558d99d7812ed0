//! Synthetic mismatched multi-modal datasets.
//!
//! Every instance draws a class label and a latent vector
//! `z = center[label] + shift + std·ε`. Each modality observes `z` through
//! its own fixed view `g(z·W + bias) + noise`. Datasets share the class
//! centers and views but not instances, and each one hides some modalities
//! from training.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};
use crate::{DatasetId, ModalityId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub latent_dim: usize,
    pub num_classes: usize,
    /// `num_classes × latent_dim`.
    pub class_centers: Matrix,
    pub within_class_std: f64,
}

impl LatentSpec {
    /// Class centers drawn i.i.d. `N(0, center_scale²)`, then recentered so
    /// their mean is zero (with more than one class).
    pub fn random(latent_dim: usize, num_classes: usize, center_scale: f64, within_class_std: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut class_centers =
            Matrix::from_fn(num_classes, latent_dim, |_, _| center_scale * rng.sample::<f64, _>(StandardNormal));
        if num_classes > 1 {
            for j in 0..latent_dim {
                let mu = (0..num_classes).map(|i| class_centers[(i, j)]).sum::<f64>() / num_classes as f64;
                (0..num_classes).for_each(|i| class_centers.row_mut(i)[j] -= mu);
            }
        }
        let spec = LatentSpec { latent_dim, num_classes, class_centers, within_class_std };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config("latent_dim and num_classes must be positive".into()));
        }
        if self.class_centers.shape() != (self.num_classes, self.latent_dim) {
            return Err(Error::Config(alloc::format!(
                "class_centers is {:?}, expected {}x{}",
                self.class_centers.shape(),
                self.num_classes,
                self.latent_dim
            )));
        }
        if !(self.within_class_std > 0.0 && self.within_class_std.is_finite()) {
            return Err(Error::Config(alloc::format!("within_class_std must be positive, got {}", self.within_class_std)));
        }
        for i in 0..self.num_classes {
            for j in 0..i {
                if self.class_centers.row(i) == self.class_centers.row(j) {
                    return Err(Error::Config(alloc::format!("class centers {j} and {i} coincide")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ViewNonlinearity {
    #[default]
    Identity,
    Tanh,
}

/// Fixed map from latent space to one modality's raw feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityViewSpec {
    pub modality: ModalityId,
    /// `latent_dim × raw_dim`.
    pub weight: Matrix,
    /// `raw_dim` offsets added after the linear map.
    pub bias: Vec<f64>,
    pub nonlinearity: ViewNonlinearity,
    pub noise_std: f64,
}

impl ModalityViewSpec {
    /// Gaussian weights scaled by `1/√latent_dim`, zero bias.
    pub fn random(
        modality: ModalityId,
        latent_dim: usize,
        raw_dim: usize,
        nonlinearity: ViewNonlinearity,
        noise_std: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / libm::sqrt(latent_dim as f64);
        let weight = Matrix::from_fn(latent_dim, raw_dim, |_, _| s * rng.sample::<f64, _>(StandardNormal));
        let spec = ModalityViewSpec { modality, weight, bias: alloc::vec![0.0; raw_dim], nonlinearity, noise_std };
        spec.validate()?;
        Ok(spec)
    }

    pub fn raw_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn latent_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Shapes agree, noise is nonnegative, and the linear part has full rank
    /// in the latent dimension.
    pub fn validate(&self) -> Result<()> {
        let name = &self.modality;
        if self.bias.len() != self.raw_dim() {
            return Err(Error::Config(alloc::format!("view {name}: bias has {} entries for raw_dim {}", self.bias.len(), self.raw_dim())));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(alloc::format!("view {name}: noise_std must be nonnegative")));
        }
        if self.raw_dim() < self.latent_dim() {
            return Err(Error::Config(alloc::format!("view {name}: raw_dim {} below latent_dim {}", self.raw_dim(), self.latent_dim())));
        }
        let f = svd(&self.weight)?;
        if f.rank(1e-10) < self.latent_dim() {
            return Err(Error::Config(alloc::format!("view {name}: map is rank deficient in the latent dimension")));
        }
        Ok(())
    }

    /// Noiseless view of latent rows.
    pub fn apply(&self, latents: &Matrix) -> Result<Matrix> {
        let mut out = latents.matmul(&self.weight)?;
        for r in 0..out.rows() {
            for (v, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
                if self.nonlinearity == ViewNonlinearity::Tanh {
                    *v = libm::tanh(*v);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub id: DatasetId,
    pub num_samples: usize,
    /// Added to every class center.
    pub latent_shift: Vec<f64>,
    pub observable_modalities: Vec<ModalityId>,
    /// Generated but kept out of training batches.
    pub hidden_target_modality: Option<ModalityId>,
    /// Extra per-dataset view noise, combined in quadrature with each view's own.
    pub extra_noise_std: f64,
}

impl DatasetSpec {
    pub fn validate(&self, latent_dim: usize) -> Result<()> {
        if self.latent_shift.len() != latent_dim {
            return Err(Error::Config(alloc::format!("dataset {}: latent_shift has {} entries, latent_dim is {latent_dim}", self.id, self.latent_shift.len())));
        }
        if self.observable_modalities.is_empty() {
            return Err(Error::Config(alloc::format!("dataset {}: no observable modalities", self.id)));
        }
        let mut seen = self.observable_modalities.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.observable_modalities.len() {
            return Err(Error::Config(alloc::format!("dataset {}: duplicate observable modality", self.id)));
        }
        if let Some(h) = &self.hidden_target_modality {
            if self.observable_modalities.contains(h) {
                return Err(Error::Config(alloc::format!("dataset {}: hidden target {h} is also observable", self.id)));
            }
        }
        if !(self.extra_noise_std >= 0.0 && self.extra_noise_std.is_finite()) {
            return Err(Error::Config(alloc::format!("dataset {}: extra_noise_std must be nonnegative", self.id)));
        }
        Ok(())
    }

    /// Observable modalities followed by the hidden one, in generation order.
    pub fn generated_modalities(&self) -> Vec<ModalityId> {
        let mut all = self.observable_modalities.clone();
        all.extend(self.hidden_target_modality.iter().cloned());
        all
    }
}

/// One generated dataset. Hidden-target data sit in a separate map that
/// batching never reads; use [`reveal_ground_truth`] for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiModalDataset {
    spec: DatasetSpec,
    labels: Vec<usize>,
    latents: Matrix,
    observed: BTreeMap<ModalityId, Matrix>,
    hidden: BTreeMap<ModalityId, Matrix>,
}

impl MultiModalDataset {
    /// Reassembles a dataset, e.g. after loading from disk.
    pub fn from_parts(
        spec: DatasetSpec,
        labels: Vec<usize>,
        latents: Matrix,
        observed: BTreeMap<ModalityId, Matrix>,
        hidden: BTreeMap<ModalityId, Matrix>,
    ) -> Result<Self> {
        let n = labels.len();
        let bad_rows = latents.rows() != n || observed.values().chain(hidden.values()).any(|m| m.rows() != n);
        if bad_rows {
            return Err(Error::Data(alloc::format!("dataset {}: row counts disagree with {n} labels", spec.id)));
        }
        let obs_keys: Vec<&ModalityId> = observed.keys().collect();
        let mut want: Vec<&ModalityId> = spec.observable_modalities.iter().collect();
        want.sort();
        if obs_keys != want {
            return Err(Error::Data(alloc::format!("dataset {}: observed modalities do not match spec", spec.id)));
        }
        let hid_keys: Vec<&ModalityId> = hidden.keys().collect();
        if hid_keys != spec.hidden_target_modality.iter().collect::<Vec<_>>() {
            return Err(Error::Data(alloc::format!("dataset {}: hidden modality does not match spec", spec.id)));
        }
        Ok(MultiModalDataset { spec, labels, latents, observed, hidden })
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn id(&self) -> &DatasetId {
        &self.spec.id
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Oracle channel; never an encoder input.
    pub fn latents(&self) -> &Matrix {
        &self.latents
    }

    pub fn observed(&self, modality: &ModalityId) -> Option<&Matrix> {
        self.observed.get(modality)
    }

    pub fn observed_modalities(&self) -> impl Iterator<Item = (&ModalityId, &Matrix)> {
        self.observed.iter()
    }

    pub fn hidden_modalities(&self) -> impl Iterator<Item = (&ModalityId, &Matrix)> {
        self.hidden.iter()
    }

    /// Leading `len − n_test` instances and the trailing `n_test`.
    pub fn split(&self, n_test: usize) -> Result<(MultiModalDataset, MultiModalDataset)> {
        if n_test == 0 || n_test >= self.len() {
            return Err(Error::Config(alloc::format!("dataset {}: cannot hold out {n_test} of {} samples", self.id(), self.len())));
        }
        let cut = self.len() - n_test;
        let part = |range: core::ops::Range<usize>| {
            let idx: Vec<usize> = range.collect();
            let pick = |m: &BTreeMap<ModalityId, Matrix>| -> BTreeMap<ModalityId, Matrix> {
                m.iter().map(|(k, v)| (k.clone(), v.select_rows(&idx))).collect()
            };
            let mut spec = self.spec.clone();
            spec.num_samples = idx.len();
            MultiModalDataset {
                spec,
                labels: idx.iter().map(|&i| self.labels[i]).collect(),
                latents: self.latents.select_rows(&idx),
                observed: pick(&self.observed),
                hidden: pick(&self.hidden),
            }
        };
        Ok((part(0..cut), part(cut..self.len())))
    }
}

/// Draws `spec.num_samples` instances. Labels are uniform over classes.
pub fn generate_dataset(
    latent: &LatentSpec,
    views: &[ModalityViewSpec],
    spec: &DatasetSpec,
    seed: u64,
) -> Result<MultiModalDataset> {
    latent.validate()?;
    spec.validate(latent.latent_dim)?;
    let modalities = spec.generated_modalities();
    let mut chosen = Vec::with_capacity(modalities.len());
    for m in &modalities {
        let v = views
            .iter()
            .find(|v| &v.modality == m)
            .ok_or_else(|| Error::Config(alloc::format!("dataset {}: no view spec for modality {m}", spec.id)))?;
        if v.latent_dim() != latent.latent_dim {
            return Err(Error::Config(alloc::format!("view {m}: latent_dim {} vs {}", v.latent_dim(), latent.latent_dim)));
        }
        v.validate()?;
        chosen.push(v);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.num_samples;
    let d = latent.latent_dim;
    let mut labels = Vec::with_capacity(n);
    let mut z = Matrix::zeros(n, d);
    for i in 0..n {
        let y = rng.random_range(0..latent.num_classes);
        labels.push(y);
        for j in 0..d {
            let eps: f64 = rng.sample(StandardNormal);
            z.row_mut(i)[j] = latent.class_centers[(y, j)] + spec.latent_shift[j] + latent.within_class_std * eps;
        }
    }

    let mut observed = BTreeMap::new();
    let mut hidden = BTreeMap::new();
    for v in chosen {
        let mut raw = v.apply(&z)?;
        let sigma = libm::sqrt(v.noise_std * v.noise_std + spec.extra_noise_std * spec.extra_noise_std);
        if sigma > 0.0 {
            for x in raw.data_mut() {
                *x += sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        if spec.hidden_target_modality.as_ref() == Some(&v.modality) {
            hidden.insert(v.modality.clone(), raw);
        } else {
            observed.insert(v.modality.clone(), raw);
        }
    }
    Ok(MultiModalDataset { spec: spec.clone(), labels, latents: z, observed, hidden })
}

/// Evaluation-only access to a generated modality, hidden or observable.
pub fn reveal_ground_truth(d: &MultiModalDataset, modality: &ModalityId) -> Result<Matrix> {
    d.hidden
        .get(modality)
        .or_else(|| d.observed.get(modality))
        .cloned()
        .ok_or_else(|| Error::Data(alloc::format!("dataset {} never generated modality {modality}", d.id())))
}

/// Rows drawn from one dataset for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPart {
    pub dataset: DatasetId,
    pub indices: Vec<usize>,
    /// Observable modalities only.
    pub modalities: BTreeMap<ModalityId, Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalBatch {
    pub parts: Vec<BatchPart>,
}

fn mix_seed(seed: u64, epoch: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the packed words
    let mut x = seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives an independent stream seed from a base seed and two labels.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    mix_seed(seed, a, b)
}

/// Splits every epoch into batches holding `batch_size / datasets.len()`
/// rows of each dataset. Each dataset is shuffled independently per
/// `(seed, epoch)`; trailing partial batches are dropped.
pub fn make_batches(datasets: &[&MultiModalDataset], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<MultiModalBatch>> {
    if datasets.is_empty() {
        return Err(Error::Config("make_batches needs at least one dataset".into()));
    }
    if batch_size == 0 || batch_size % datasets.len() != 0 {
        return Err(Error::Config(alloc::format!(
            "batch_size {batch_size} is not divisible across {} datasets",
            datasets.len()
        )));
    }
    let k = batch_size / datasets.len();
    let orders: Vec<Vec<usize>> = datasets
        .iter()
        .enumerate()
        .map(|(s, d)| {
            let mut idx: Vec<usize> = (0..d.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch, s as u64)));
            idx
        })
        .collect();
    let n_batches = datasets.iter().map(|d| d.len() / k).min().unwrap_or(0);
    Ok((0..n_batches)
        .map(|b| MultiModalBatch {
            parts: datasets
                .iter()
                .zip(&orders)
                .map(|(d, order)| {
                    let indices = order[b * k..(b + 1) * k].to_vec();
                    let modalities = d.observed.iter().map(|(m, x)| (m.clone(), x.select_rows(&indices))).collect();
                    BatchPart { dataset: d.id().clone(), indices, modalities }
                })
                .collect(),
        })
        .collect())
}

/// Unit vector in a seeded random direction scaled to `magnitude`.
pub fn random_shift(latent_dim: usize, magnitude: f64, seed: u64) -> Vec<f64> {
    if magnitude == 0.0 {
        return alloc::vec![0.0; latent_dim];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..latent_dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    v.into_iter().map(|x| magnitude * x / n).collect()
}

/// Human-readable label for diagnostics.
pub fn describe(d: &MultiModalDataset) -> String {
    let obs: Vec<&str> = d.spec.observable_modalities.iter().map(|m| m.as_str()).collect();
    alloc::format!(
        "{} ({} samples, observes {:?}, hides {:?})",
        d.id(),
        d.len(),
        obs,
        d.spec.hidden_target_modality.as_ref().map(|m| m.as_str())
    )
}

/// One modality's view, before the random map is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewConfig {
    pub modality: ModalityId,
    pub raw_dim: usize,
    #[serde(default)]
    pub nonlinearity: ViewNonlinearity,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub id: DatasetId,
    pub observable: Vec<ModalityId>,
    #[serde(default)]
    pub hidden_target: Option<ModalityId>,
    /// Norm of the latent mean shift, in units of `within_class_std`.
    #[serde(default)]
    pub shift: f64,
    #[serde(default)]
    pub extra_noise_std: f64,
}

/// Everything needed to draw a scenario from one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub latent_dim: usize,
    pub num_classes: usize,
    /// Standard deviation of the class-center draws.
    pub center_scale: f64,
    pub within_class_std: f64,
    /// Training instances per dataset.
    pub num_samples: usize,
    /// Held-out instances per dataset, drawn from the same distribution.
    pub test_samples: usize,
    pub views: Vec<ViewConfig>,
    pub datasets: Vec<DatasetConfig>,
}

/// Train and test splits of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDataset {
    pub train: MultiModalDataset,
    pub test: MultiModalDataset,
}

/// Concrete specs drawn from a [`DataConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub latent: LatentSpec,
    pub views: Vec<ModalityViewSpec>,
    pub datasets: Vec<DatasetSpec>,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 || self.test_samples == 0 {
            return Err(Error::Config("num_samples and test_samples must be positive".into()));
        }
        if self.datasets.is_empty() {
            return Err(Error::Config("no datasets declared".into()));
        }
        for (k, v) in self.views.iter().enumerate() {
            if self.views[..k].iter().any(|p| p.modality == v.modality) {
                return Err(Error::Config(alloc::format!("views[{k}].modality: {} declared twice", v.modality)));
            }
            if v.raw_dim < self.latent_dim {
                return Err(Error::Config(alloc::format!("views[{k}].raw_dim: {} is below latent_dim {}", v.raw_dim, self.latent_dim)));
            }
        }
        for (i, d) in self.datasets.iter().enumerate() {
            if self.datasets[..i].iter().any(|p| p.id == d.id) {
                return Err(Error::Config(alloc::format!("datasets[{i}].id: {} declared twice", d.id)));
            }
            for m in &d.observable {
                if !self.views.iter().any(|v| &v.modality == m) {
                    return Err(Error::Config(alloc::format!("datasets[{i}].observable ({}): no view declared for modality {m}", d.id)));
                }
            }
            if let Some(m) = &d.hidden_target {
                if !self.views.iter().any(|v| &v.modality == m) {
                    return Err(Error::Config(alloc::format!("datasets[{i}].hidden_target ({}): no view declared for modality {m}", d.id)));
                }
            }
            if !(d.shift >= 0.0 && d.shift.is_finite()) {
                return Err(Error::Config(alloc::format!("datasets[{i}].shift ({}): must be nonnegative", d.id)));
            }
        }
        Ok(())
    }

    /// Draws centers, view maps and shift directions.
    pub fn scenario(&self, seed: u64) -> Result<Scenario> {
        self.validate()?;
        let latent = LatentSpec::random(
            self.latent_dim,
            self.num_classes,
            self.center_scale,
            self.within_class_std,
            derive_seed(seed, 1, 0),
        )?;
        let views = self
            .views
            .iter()
            .enumerate()
            .map(|(k, v)| {
                ModalityViewSpec::random(
                    v.modality.clone(),
                    self.latent_dim,
                    v.raw_dim,
                    v.nonlinearity,
                    v.noise_std,
                    derive_seed(seed, 2, k as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let datasets = self
            .datasets
            .iter()
            .enumerate()
            .map(|(i, d)| DatasetSpec {
                id: d.id.clone(),
                num_samples: self.num_samples + self.test_samples,
                latent_shift: random_shift(self.latent_dim, d.shift * self.within_class_std, derive_seed(seed, 3, i as u64)),
                observable_modalities: d.observable.clone(),
                hidden_target_modality: d.hidden_target.clone(),
                extra_noise_std: d.extra_noise_std,
            })
            .collect();
        Ok(Scenario { latent, views, datasets })
    }

    /// Generates every dataset and splits off the test instances.
    pub fn generate(&self, seed: u64) -> Result<Vec<GeneratedDataset>> {
        let sc = self.scenario(seed)?;
        sc.datasets
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let full = generate_dataset(&sc.latent, &sc.views, spec, derive_seed(seed, 4, i as u64))?;
                let (train, test) = full.split(self.test_samples)?;
                Ok(GeneratedDataset { train, test })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn latent() -> LatentSpec {
        LatentSpec::random(4, 3, 2.0, 0.5, 1).unwrap()
    }

    fn identity_view(m: &str, d: usize) -> ModalityViewSpec {
        ModalityViewSpec {
            modality: m.into(),
            weight: Matrix::identity(d),
            bias: vec![0.0; d],
            nonlinearity: ViewNonlinearity::Identity,
            noise_std: 0.0,
        }
    }

    fn dspec(id: &str, n: usize, shift: Vec<f64>, obs: &[&str], hidden: Option<&str>) -> DatasetSpec {
        DatasetSpec {
            id: id.into(),
            num_samples: n,
            latent_shift: shift,
            observable_modalities: obs.iter().map(|&m| m.into()).collect(),
            hidden_target_modality: hidden.map(Into::into),
            extra_noise_std: 0.0,
        }
    }

    #[test]
    fn noiseless_identity_view_returns_latents() {
        let views = [identity_view("a", 4), identity_view("b", 4)];
        let d = generate_dataset(&latent(), &views, &dspec("d1", 50, vec![0.0; 4], &["a", "b"], None), 3).unwrap();
        assert_eq!(d.observed(&"a".into()).unwrap(), d.latents());
        assert_eq!(d.observed(&"b".into()).unwrap(), d.latents());
    }

    #[test]
    fn deterministic_per_seed() {
        let l = latent();
        let views = [
            ModalityViewSpec::random("a".into(), 4, 6, ViewNonlinearity::Tanh, 0.1, 5).unwrap(),
            ModalityViewSpec::random("b".into(), 4, 5, ViewNonlinearity::Identity, 0.1, 6).unwrap(),
        ];
        let s = dspec("d1", 40, vec![0.0; 4], &["a"], Some("b"));
        assert_eq!(generate_dataset(&l, &views, &s, 7).unwrap(), generate_dataset(&l, &views, &s, 7).unwrap());
        assert_ne!(generate_dataset(&l, &views, &s, 7).unwrap(), generate_dataset(&l, &views, &s, 8).unwrap());
    }

    #[test]
    fn shift_moves_pivot_mean() {
        // Mean difference of raw pivot vectors ≈ δ·W within 3 standard errors.
        let l = LatentSpec::random(3, 4, 1.0, 1.0, 2).unwrap();
        let view = ModalityViewSpec::random("b".into(), 3, 5, ViewNonlinearity::Identity, 0.3, 3).unwrap();
        let delta = vec![1.0, -0.5, 0.25];
        let n = 4000;
        let d1 = generate_dataset(&l, core::slice::from_ref(&view), &dspec("d1", n, vec![0.0; 3], &["b"], None), 10).unwrap();
        let d2 = generate_dataset(&l, core::slice::from_ref(&view), &dspec("d2", n, delta.clone(), &["b"], None), 11).unwrap();
        let want = Matrix::from_rows(&[[delta[0], delta[1], delta[2]]]).unwrap().matmul(&view.weight).unwrap();
        let (x1, x2) = (d1.observed(&"b".into()).unwrap(), d2.observed(&"b".into()).unwrap());
        for j in 0..5 {
            let col = |x: &Matrix| -> (f64, f64) {
                let m = (0..n).map(|i| x[(i, j)]).sum::<f64>() / n as f64;
                let v = (0..n).map(|i| (x[(i, j)] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
                (m, v)
            };
            let ((m1, v1), (m2, v2)) = (col(x1), col(x2));
            let se = libm::sqrt(v1 / n as f64 + v2 / n as f64);
            assert!(((m2 - m1) - want[(0, j)]).abs() < 3.0 * se, "coord {j}");
        }
    }

    #[test]
    fn missing_view_is_an_error() {
        let err = generate_dataset(&latent(), &[identity_view("a", 4)], &dspec("d", 5, vec![0.0; 4], &["a"], Some("z")), 0);
        assert!(matches!(err, Err(Error::Config(m)) if m.contains("z")));
    }

    #[test]
    fn rank_deficient_view_rejected() {
        let mut v = identity_view("a", 4);
        v.weight = Matrix::from_fn(4, 6, |i, j| if i < 3 && i == j { 1.0 } else { 0.0 });
        v.bias = vec![0.0; 6];
        assert!(v.validate().is_err());
    }

    #[test]
    fn batches_split_evenly_and_drop_remainder() {
        let views = [identity_view("a", 4), identity_view("b", 4), identity_view("c", 4)];
        let d1 = generate_dataset(&latent(), &views, &dspec("d1", 35, vec![0.0; 4], &["a", "b"], Some("c")), 1).unwrap();
        let d2 = generate_dataset(&latent(), &views, &dspec("d2", 50, vec![0.0; 4], &["b", "c"], Some("a")), 2).unwrap();
        let batches = make_batches(&[&d1, &d2], 16, 9, 0).unwrap();
        assert_eq!(batches.len(), 4);
        for b in &batches {
            assert_eq!(b.parts[0].indices.len(), 8);
            assert_eq!(b.parts[1].indices.len(), 8);
            // hidden modalities never leak
            assert!(!b.parts[0].modalities.contains_key(&ModalityId::new("c")));
            assert!(!b.parts[1].modalities.contains_key(&ModalityId::new("a")));
        }
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.parts[0].indices.clone()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 32);
        assert_eq!(batches, make_batches(&[&d1, &d2], 16, 9, 0).unwrap());
        assert_ne!(batches, make_batches(&[&d1, &d2], 16, 9, 1).unwrap());
        assert!(make_batches(&[&d1, &d2], 15, 9, 0).is_err());
    }

    #[test]
    fn paired_modalities_share_latents_and_datasets_do_not() {
        let views = [identity_view("a", 4), identity_view("b", 4)];
        let d1 = generate_dataset(&latent(), &views, &dspec("d1", 30, vec![0.0; 4], &["a", "b"], None), 1).unwrap();
        let d2 = generate_dataset(&latent(), &views, &dspec("d2", 30, vec![0.0; 4], &["a", "b"], None), 2).unwrap();
        let batch = &make_batches(&[&d1], 6, 0, 0).unwrap()[0].parts[0];
        assert_eq!(batch.modalities[&ModalityId::new("a")], batch.modalities[&ModalityId::new("b")]);
        for r1 in d1.latents().row_iter() {
            assert!(d2.latents().row_iter().all(|r2| r1 != r2));
        }
    }

    #[test]
    fn reveal_and_split() {
        let views = [identity_view("a", 4), identity_view("b", 4)];
        let d = generate_dataset(&latent(), &views, &dspec("d1", 20, vec![0.0; 4], &["a"], Some("b")), 4).unwrap();
        assert_eq!(reveal_ground_truth(&d, &"b".into()).unwrap(), *d.latents());
        assert_eq!(reveal_ground_truth(&d, &"a".into()).unwrap(), *d.observed(&"a".into()).unwrap());
        assert!(reveal_ground_truth(&d, &"q".into()).is_err());
        let (tr, te) = d.split(5).unwrap();
        assert_eq!((tr.len(), te.len()), (15, 5));
        assert_eq!(te.latents().row(0), d.latents().row(15));
        assert!(d.split(20).is_err());
    }

    #[test]
    fn random_shift_has_requested_norm() {
        let s = random_shift(8, 1.5, 3);
        assert!((libm::sqrt(s.iter().map(|x| x * x).sum::<f64>()) - 1.5).abs() < 1e-12);
        assert_eq!(random_shift(3, 0.0, 1), vec![0.0; 3]);
    }
}
