//! Seeded synthetic conditional datasets standing in for a speech corpus,
//! plus batch iteration. Every generator is a pure function of its spec:
//! the same spec yields bit-identical samples.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::CoreError;
use crate::math;
use crate::rng::SeedRng;
use crate::tensor::Tensor;
use crate::Result;

/// Mixture components sit on a circle of this radius.
pub const MIXTURE_RADIUS: f64 = 4.0;
/// Isotropic mixture component spread.
pub const MIXTURE_SIGMA: f64 = 0.3;
/// Two-moons coordinate noise.
pub const MOONS_SIGMA: f64 = 0.05;
/// Toy-sequence channels per frame.
pub const SEQUENCE_CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    GaussMixture,
    TwoMoons,
    ToySequence,
    Csv,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::GaussMixture => "gauss-mixture",
            DatasetKind::TwoMoons => "two-moons",
            DatasetKind::ToySequence => "toy-sequence",
            DatasetKind::Csv => "csv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gauss-mixture" => Ok(DatasetKind::GaussMixture),
            "two-moons" => Ok(DatasetKind::TwoMoons),
            "toy-sequence" => Ok(DatasetKind::ToySequence),
            "csv" => Ok(DatasetKind::Csv),
            other => Err(CoreError::InvalidConfig(format!("unknown dataset kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub d_data: usize,
    pub conditions: usize,
    pub size: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn gauss_mixture(conditions: usize, size: usize, seed: u64) -> Self {
        DatasetSpec { kind: DatasetKind::GaussMixture, d_data: 2, conditions, size, seed }
    }

    pub fn two_moons(size: usize, seed: u64) -> Self {
        DatasetSpec { kind: DatasetKind::TwoMoons, d_data: 2, conditions: 2, size, seed }
    }

    /// `d_data` must be `frames * SEQUENCE_CHANNELS`.
    pub fn toy_sequence(conditions: usize, frames: usize, size: usize, seed: u64) -> Self {
        DatasetSpec {
            kind: DatasetKind::ToySequence,
            d_data: frames * SEQUENCE_CHANNELS,
            conditions,
            size,
            seed,
        }
    }
}

/// One training example: data point, condition id, and the noise draw it is
/// paired with for flow matching.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalSample {
    pub x1: Vec<f64>,
    pub cond: usize,
    pub z: Vec<f64>,
}

impl ConditionalSample {
    /// Embedding-ready one-hot with exactly one 1.
    pub fn one_hot(&self, conditions: usize) -> Vec<f64> {
        let mut v = vec![0.0; conditions];
        v[self.cond] = 1.0;
        v
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<ConditionalSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn d_data(&self) -> usize {
        self.spec.d_data
    }

    /// Assembles `(x1, z, conds)` batch tensors for the given sample indices.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(CoreError::EmptyBatch);
        }
        let d = self.d_data();
        let mut x1 = Tensor::zeros(indices.len(), d);
        let mut z = Tensor::zeros(indices.len(), d);
        let mut conds = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            let s = &self.samples[i];
            for c in 0..d {
                x1.set(r, c, s.x1[c]);
                z.set(r, c, s.z[c]);
            }
            conds.push(s.cond);
        }
        Ok((x1, z, conds))
    }

    /// All `x1` rows stacked into a matrix (for metric computations).
    pub fn data_matrix(&self) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = self.samples.iter().map(|s| s.x1.clone()).collect();
        Tensor::from_rows(&rows)
    }
}

/// Component mean for the Gaussian mixture: condition `c` selects a point on
/// a circle of radius [`MIXTURE_RADIUS`] (embedded in the first two dims).
pub fn mixture_mean(cond: usize, conditions: usize, d_data: usize) -> Vec<f64> {
    let angle = 2.0 * PI * cond as f64 / conditions as f64;
    let mut mu = vec![0.0; d_data];
    mu[0] = MIXTURE_RADIUS * math::cos(angle);
    if d_data > 1 {
        mu[1] = MIXTURE_RADIUS * math::sin(angle);
    }
    mu
}

pub fn gen_gauss_mixture(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.conditions == 0 {
        return Err(CoreError::InvalidConfig("gauss-mixture needs >= 1 condition".into()));
    }
    if spec.d_data < 2 {
        return Err(CoreError::InvalidConfig("gauss-mixture needs d_data >= 2".into()));
    }
    let mut rng = SeedRng::new(SeedRng::derive_seed(spec.seed, "gauss-mixture"));
    let mut samples = Vec::with_capacity(spec.size);
    for _ in 0..spec.size {
        let cond = rng.below(spec.conditions);
        let mu = mixture_mean(cond, spec.conditions, spec.d_data);
        let x1: Vec<f64> = mu.iter().map(|&m| m + MIXTURE_SIGMA * rng.normal()).collect();
        let z = rng.normal_vec(spec.d_data);
        samples.push(ConditionalSample { x1, cond, z });
    }
    Ok(Dataset { spec: spec.clone(), samples })
}

pub fn gen_two_moons(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.d_data != 2 || spec.conditions != 2 {
        return Err(CoreError::InvalidConfig("two-moons is 2-D with 2 conditions".into()));
    }
    let mut rng = SeedRng::new(SeedRng::derive_seed(spec.seed, "two-moons"));
    let mut samples = Vec::with_capacity(spec.size);
    for _ in 0..spec.size {
        let cond = if rng.uniform() < 0.5 { 0 } else { 1 };
        let theta = rng.uniform_in(0.0, PI);
        let (mut x, mut y) = if cond == 0 {
            (math::cos(theta), math::sin(theta))
        } else {
            (1.0 - math::cos(theta), 0.5 - math::sin(theta))
        };
        x += MOONS_SIGMA * rng.normal();
        y += MOONS_SIGMA * rng.normal();
        let z = rng.normal_vec(2);
        samples.push(ConditionalSample { x1: vec![x, y], cond, z });
    }
    Ok(Dataset { spec: spec.clone(), samples })
}

/// Base frequency (cycles over the window) for a toy-sequence condition.
pub fn sequence_frequency(cond: usize) -> f64 {
    1.0 + cond as f64
}

/// Nominal per-condition amplitude before the per-sample jitter.
pub fn sequence_amplitude(cond: usize) -> f64 {
    1.0 + 0.5 * cond as f64
}

/// Short sinusoid-plus-noise feature tracks; frequency and amplitude are
/// functions of the condition. Samples are `frames x channels` flattened
/// row-major (frame-major).
pub fn gen_toy_sequence(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.conditions == 0 {
        return Err(CoreError::InvalidConfig("toy-sequence needs >= 1 condition".into()));
    }
    if spec.d_data % SEQUENCE_CHANNELS != 0 || spec.d_data == 0 {
        return Err(CoreError::InvalidConfig(format!(
            "toy-sequence d_data must be a positive multiple of {SEQUENCE_CHANNELS}"
        )));
    }
    let frames = spec.d_data / SEQUENCE_CHANNELS;
    let mut rng = SeedRng::new(SeedRng::derive_seed(spec.seed, "toy-sequence"));
    let mut samples = Vec::with_capacity(spec.size);
    for _ in 0..spec.size {
        let cond = rng.below(spec.conditions);
        let freq = sequence_frequency(cond);
        let amp = sequence_amplitude(cond) * (1.0 + 0.1 * (rng.uniform() - 0.5));
        let phase = rng.uniform_in(0.0, 2.0 * PI);
        let mut x1 = Vec::with_capacity(spec.d_data);
        for f in 0..frames {
            for ch in 0..SEQUENCE_CHANNELS {
                let t = f as f64 / frames as f64;
                let channel_shift = ch as f64 * PI / 8.0;
                let v = amp * math::sin(2.0 * PI * freq * t + phase + channel_shift)
                    + 0.1 * rng.normal();
                x1.push(v);
            }
        }
        let z = rng.normal_vec(spec.d_data);
        samples.push(ConditionalSample { x1, cond, z });
    }
    Ok(Dataset { spec: spec.clone(), samples })
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    match spec.kind {
        DatasetKind::GaussMixture => gen_gauss_mixture(spec),
        DatasetKind::TwoMoons => gen_two_moons(spec),
        DatasetKind::ToySequence => gen_toy_sequence(spec),
        DatasetKind::Csv => Err(CoreError::InvalidConfig(
            String::from("csv datasets are loaded from files, not generated"),
        )),
    }
}

/// Builds a dataset from externally supplied rows (the CSV path), pairing
/// each point with a fresh seeded noise draw.
pub fn from_rows(
    rows: Vec<(Vec<f64>, usize)>,
    d_data: usize,
    conditions: usize,
    seed: u64,
) -> Result<Dataset> {
    if rows.is_empty() {
        return Err(CoreError::EmptyBatch);
    }
    let mut rng = SeedRng::new(SeedRng::derive_seed(seed, "csv-noise"));
    let mut samples = Vec::with_capacity(rows.len());
    for (x1, cond) in rows {
        if x1.len() != d_data {
            return Err(CoreError::ShapeMismatch {
                op: "datasets::from_rows",
                detail: format!("row has {} features, expected {d_data}", x1.len()),
            });
        }
        if cond >= conditions {
            return Err(CoreError::ConditionOutOfRange { id: cond, conditions });
        }
        let z = rng.normal_vec(d_data);
        samples.push(ConditionalSample { x1, cond, z });
    }
    let size = samples.len();
    Ok(Dataset {
        spec: DatasetSpec { kind: DatasetKind::Csv, d_data, conditions, size, seed },
        samples,
    })
}

/// Seeded epoch-shuffled batch stream. The last partial batch of each epoch
/// is kept; a batch size larger than the dataset yields one batch per epoch.
pub struct BatchIter {
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    rng: SeedRng,
}

impl BatchIter {
    pub fn new(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        if dataset.is_empty() {
            return Err(CoreError::EmptyBatch);
        }
        if batch_size == 0 {
            return Err(CoreError::InvalidConfig("batch size must be >= 1".into()));
        }
        let mut it = BatchIter {
            order: (0..dataset.len()).collect(),
            batch_size,
            cursor: 0,
            rng: SeedRng::new(SeedRng::derive_seed(seed, "batch-iter")),
        };
        it.reshuffle();
        Ok(it)
    }

    fn reshuffle(&mut self) {
        self.rng.shuffle(&mut self.order);
        self.cursor = 0;
    }

    /// Next batch of sample indices; reshuffles at epoch boundaries.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.reshuffle();
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }

    /// All batches of exactly one epoch, in order, from a fresh iterator.
    pub fn one_epoch(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
        let mut it = Self::new(dataset, batch_size, seed)?;
        let mut out = Vec::new();
        let mut seen = 0;
        while seen < dataset.len() {
            let b = it.next_batch();
            seen += b.len();
            out.push(b);
        }
        Ok(out)
    }
}
