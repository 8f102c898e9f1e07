//! Synthetic datasets and their on-disk cache.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::fields::linspace;
use crate::io::write_atomic;
use crate::rng::{substream, SeededRng};
use crate::tensor::Tensor;

/// Number of symbols in the copy-memory alphabet (0 = blank, 1..=8 digits, 9 = marker).
pub const COPY_CLASSES: usize = 10;
const COPY_DIGITS: usize = 10;

/// Offset separating test-sample streams from training-sample streams.
pub const TEST_STREAM_OFFSET: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    FunctionFit,
    CopyMemory,
    Adding,
    ResolutionShift,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldTarget {
    Gaussian,
    Step,
    Sawtooth,
    SineMixture,
    Noise,
}

/// What a dataset's targets mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TargetLayout {
    /// `[n, L]` class indices, one per step.
    PerStepClasses { classes: usize },
    /// `[n, O]` values read at the last step.
    LastStep,
    /// `[n, O, L]` values at every step.
    PerStep,
}

/// Inputs `[n, C, L]` with targets laid out per [`TargetLayout`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub layout: TargetLayout,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn seq_len(&self) -> usize {
        self.inputs.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Samples `idx` in the given order.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Tensor) {
        (select_rows(&self.inputs, idx), select_rows(&self.targets, idx))
    }
}

/// Rows of `t` along the first axis, in the order of `idx`.
pub fn select_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let row: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    Tensor::new(&shape, data).expect("row selection keeps the row shape")
}

fn sample_rng(seed: u64, index: u64) -> SeededRng {
    substream(seed, index)
}

/// Copy memory for samples `first..first+n`: ten digits, `T−1` blanks, eleven markers.
/// Inputs are one-hot `[n, 10, T+20]`; targets are blanks except the last ten steps, which
/// repeat the leading digits.
pub fn make_copy_memory_range(t: usize, first: u64, n: usize, seed: u64) -> Result<Dataset> {
    if t < 1 || n == 0 {
        return Err(config_err!("copy memory needs T ≥ 1 and n ≥ 1 (T={t}, n={n})"));
    }
    let len = t + 20;
    let mut inputs = vec![0.0; n * COPY_CLASSES * len];
    let mut targets = vec![0.0; n * len];
    for s in 0..n {
        let mut rng = sample_rng(seed, first + s as u64);
        let mut seq = vec![0usize; len];
        for v in seq.iter_mut().take(COPY_DIGITS) {
            *v = rng.gen_range(1..=8);
        }
        for v in seq.iter_mut().skip(t + 9) {
            *v = 9;
        }
        for (pos, &sym) in seq.iter().enumerate() {
            inputs[(s * COPY_CLASSES + sym) * len + pos] = 1.0;
        }
        for i in 0..COPY_DIGITS {
            targets[s * len + len - COPY_DIGITS + i] = seq[i] as f64;
        }
    }
    Ok(Dataset {
        inputs: Tensor::new(&[n, COPY_CLASSES, len], inputs)?,
        targets: Tensor::new(&[n, len], targets)?,
        layout: TargetLayout::PerStepClasses { classes: COPY_CLASSES },
    })
}

pub fn make_copy_memory(t: usize, n: usize, seed: u64) -> Result<Dataset> {
    make_copy_memory_range(t, 0, n, seed)
}

/// Adding problem for samples `first..first+n`: values in channel 0, two markers in channel 1,
/// target the sum of the marked values.
pub fn make_adding_range(t: usize, first: u64, n: usize, seed: u64) -> Result<Dataset> {
    if t < 2 || n == 0 {
        return Err(config_err!("adding problem needs T ≥ 2 and n ≥ 1 (T={t}, n={n})"));
    }
    let mut inputs = vec![0.0; n * 2 * t];
    let mut targets = vec![0.0; n];
    for s in 0..n {
        let mut rng = sample_rng(seed, first + s as u64);
        for i in 0..t {
            inputs[s * 2 * t + i] = rng.gen_range(0.0..1.0);
        }
        let a = rng.gen_range(0..t);
        let mut b = rng.gen_range(0..t - 1);
        if b >= a {
            b += 1;
        }
        inputs[(s * 2 + 1) * t + a] = 1.0;
        inputs[(s * 2 + 1) * t + b] = 1.0;
        targets[s] = inputs[s * 2 * t + a] + inputs[s * 2 * t + b];
    }
    Ok(Dataset {
        inputs: Tensor::new(&[n, 2, t], inputs)?,
        targets: Tensor::new(&[n, 1], targets)?,
        layout: TargetLayout::LastStep,
    })
}

pub fn make_adding(t: usize, n: usize, seed: u64) -> Result<Dataset> {
    make_adding_range(t, 0, n, seed)
}

/// Target function of the requested family on `linspace(n)`.
pub fn make_field_targets(kind: FieldTarget, n: usize, seed: u64) -> Result<Vec<f64>> {
    if n < 8 {
        return Err(config_err!("field targets need at least 8 points, got {n}"));
    }
    let x = linspace(n);
    let centre = x[n / 2];
    let mut rng = sample_rng(seed, 0);
    Ok(match kind {
        FieldTarget::Gaussian => x.iter().map(|&v| (-(v - centre).powi(2) / (2.0 * 0.15f64.powi(2))).exp()).collect(),
        FieldTarget::Step => x.iter().map(|&v| if v >= centre { 1.0 } else { 0.0 }).collect(),
        FieldTarget::Sawtooth => x.iter().map(|&v| (2.0 * (v + 1.0)).rem_euclid(1.0)).collect(),
        FieldTarget::SineMixture => {
            let comps: Vec<(f64, f64, f64)> = [1.0, 2.5, 4.0]
                .iter()
                .map(|&f| (rng.gen_range(0.5..1.0), f, rng.gen_range(0.0..2.0 * PI)))
                .collect();
            x.iter().map(|&v| comps.iter().map(|&(a, f, ph)| a * (2.0 * PI * f * v + ph).sin()).sum()).collect()
        }
        FieldTarget::Noise => (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    })
}

/// Band-limited inputs and their exact first-order low-pass response.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolutionTask {
    /// Samples per unit time.
    pub sample_rate: f64,
    /// Duration in time units.
    pub duration: f64,
    /// Highest input frequency, cycles per unit time.
    pub max_freq: f64,
    /// Low-pass time constant.
    pub time_constant: f64,
}

impl Default for ResolutionTask {
    fn default() -> Self {
        Self { sample_rate: 1.0, duration: 128.0, max_freq: 0.04, time_constant: 4.0 }
    }
}

impl ResolutionTask {
    pub fn len(&self) -> usize {
        (self.sample_rate * self.duration).round() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn at_rate(&self, sample_rate: f64) -> Self {
        Self { sample_rate, ..*self }
    }

    /// Samples `first..first+n`. Each input is a sum of three sines; the target is the
    /// steady-state output of `τ y' + y = x`.
    pub fn make_range(&self, first: u64, n: usize, seed: u64) -> Result<Dataset> {
        let len = self.len();
        if len < 2 || n == 0 || !(self.sample_rate > 0.0) || !(self.max_freq > 0.0) {
            return Err(config_err!("resolution task needs ≥ 2 samples, n ≥ 1 and positive rates"));
        }
        let mut inputs = vec![0.0; n * len];
        let mut targets = vec![0.0; n * len];
        for s in 0..n {
            let mut rng = sample_rng(seed, first + s as u64);
            for _ in 0..3 {
                let f = rng.gen_range(0.1..1.0) * self.max_freq;
                let a = rng.gen_range(0.3..1.0);
                let ph = rng.gen_range(0.0..2.0 * PI);
                let w = 2.0 * PI * f;
                let gain = 1.0 / (1.0 + (w * self.time_constant).powi(2)).sqrt();
                let lag = (w * self.time_constant).atan();
                for i in 0..len {
                    let t = i as f64 / self.sample_rate;
                    inputs[s * len + i] += a * (w * t + ph).sin();
                    targets[s * len + i] += a * gain * (w * t + ph - lag).sin();
                }
            }
        }
        Ok(Dataset {
            inputs: Tensor::new(&[n, 1, len], inputs)?,
            targets: Tensor::new(&[n, 1, len], targets)?,
            layout: TargetLayout::PerStep,
        })
    }
}

/// Header stored next to a cached dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub dtype: String,
    pub inputs_shape: Vec<usize>,
    pub targets_shape: Vec<usize>,
    pub layout: TargetLayout,
    pub seed: u64,
    /// Free-form description of the generating request.
    pub spec: String,
}

const DTYPE: &str = "f64le";

fn header_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    p.into()
}

/// Write `ds` as flat little-endian `f64` (inputs then targets) plus a JSON header.
pub fn save_dataset(path: &Path, ds: &Dataset, seed: u64, spec: &str) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 * (ds.inputs.numel() + ds.targets.numel()));
    for v in ds.inputs.data().iter().chain(ds.targets.data()) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)?;
    let header = CacheHeader {
        dtype: DTYPE.into(),
        inputs_shape: ds.inputs.shape().to_vec(),
        targets_shape: ds.targets.shape().to_vec(),
        layout: ds.layout,
        seed,
        spec: spec.into(),
    };
    let text = serde_json::to_string_pretty(&header).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&header_path(path), text.as_bytes())
}

/// Load a cached dataset, verifying that its header matches the request.
pub fn load_dataset(path: &Path, seed: u64, spec: &str) -> Result<Dataset> {
    let hp = header_path(path);
    let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let h: CacheHeader = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", hp.display())))?;
    if h.dtype != DTYPE || h.seed != seed || h.spec != spec {
        return Err(Error::Format(format!(
            "cache {} was written for seed {} / '{}' ({}), requested seed {seed} / '{spec}'",
            path.display(),
            h.seed,
            h.spec,
            h.dtype
        )));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (ni, nt): (usize, usize) = (h.inputs_shape.iter().product(), h.targets_shape.iter().product());
    if bytes.len() != 8 * (ni + nt) {
        return Err(Error::Format(format!("cache {} holds {} bytes, header implies {}", path.display(), bytes.len(), 8 * (ni + nt))));
    }
    let vals: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Dataset {
        inputs: Tensor::new(&h.inputs_shape, vals[..ni].to_vec())?,
        targets: Tensor::new(&h.targets_shape, vals[ni..].to_vec())?,
        layout: h.layout,
    })
}

/// Load from `path` when a matching cache exists, otherwise build and store.
pub fn cached(path: &Path, seed: u64, spec: &str, build: impl FnOnce() -> Result<Dataset>) -> Result<Dataset> {
    if path.exists() && header_path(path).exists() {
        if let Ok(ds) = load_dataset(path, seed, spec) {
            return Ok(ds);
        }
    }
    let ds = build()?;
    save_dataset(path, &ds, seed, spec)?;
    Ok(ds)
}
