//! Procedural stand-in for an image classification dataset.
//!
//! Classes are spread over three pattern families (class `c` belongs to
//! family `c % 3`): oriented gratings whose angle encodes the class, a
//! Gaussian blob whose position encodes the class, and concentric rings
//! whose frequency encodes the class. Every sample draws its own phase,
//! jitter, contrast, per-channel tint and pixel noise.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub image_size: usize,
    pub classes: usize,
    pub samples: usize,
    pub seed: u64,
    /// Standard deviation of the per-pixel noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_noise() -> f64 {
    0.3
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            image_size: 32,
            classes: 10,
            samples: 2000,
            seed: 0,
            noise: default_noise(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub spec: DatasetSpec,
}

impl SynthDataset {
    pub fn new(spec: DatasetSpec) -> Result<Self> {
        if spec.classes == 0 || spec.samples < spec.classes {
            return Err(Error::config(format!(
                "dataset: need at least one sample per class (classes={}, samples={})",
                spec.classes, spec.samples
            )));
        }
        if spec.image_size == 0 || spec.image_size % 4 != 0 {
            return Err(Error::config(format!(
                "dataset.image_size: {} is not a positive multiple of 4",
                spec.image_size
            )));
        }
        if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
            return Err(Error::config("dataset.noise: must be a finite non-negative number"));
        }
        Ok(SynthDataset { spec })
    }

    pub fn len(&self) -> usize {
        self.spec.samples
    }

    pub fn is_empty(&self) -> bool {
        self.spec.samples == 0
    }

    /// Labels cycle through the classes, so every class gets ⌊n/classes⌋ or
    /// ⌈n/classes⌉ samples.
    pub fn label(&self, index: usize) -> usize {
        index % self.spec.classes
    }

    /// Sample `index` as a `[3, S, S]` row-major image.
    pub fn render(&self, index: usize) -> Vec<f32> {
        let s = self.spec.image_size;
        let classes = self.spec.classes;
        let c = self.label(index);
        let family = c % 3;
        let variant = c / 3;
        let variants = (classes - family).div_ceil(3).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(index as u64);
        let jitter = Normal::new(0.0, 1.0).expect("unit normal");
        let phase = rng.gen_range(0.0..2.0 * PI);
        let contrast = rng.gen_range(0.7..1.3);
        let tint: [f64; CHANNELS] = std::array::from_fn(|_| 1.0 + 0.2 * jitter.sample(&mut rng));
        let (dx, dy) = (0.1 * jitter.sample(&mut rng), 0.1 * jitter.sample(&mut rng));
        let angle_noise = 0.08 * jitter.sample(&mut rng);
        let freq_noise = 0.1 * jitter.sample(&mut rng);

        let mut pattern = vec![0.0f64; s * s];
        for (i, row) in pattern.chunks_exact_mut(s).enumerate() {
            for (j, out) in row.iter_mut().enumerate() {
                let u = 2.0 * (j as f64 + 0.5) / s as f64 - 1.0;
                let v = 2.0 * (i as f64 + 0.5) / s as f64 - 1.0;
                *out = match family {
                    0 => {
                        let theta = PI * variant as f64 / variants as f64 + angle_noise;
                        let f = 2.0 + freq_noise;
                        (2.0 * PI * f * (u * theta.cos() + v * theta.sin()) + phase).sin()
                    }
                    1 => {
                        let a = 2.0 * PI * variant as f64 / variants as f64 + PI / 4.0;
                        let (cx, cy) = (0.5 * a.cos() + dx, 0.5 * a.sin() + dy);
                        let r2 = (u - cx).powi(2) + (v - cy).powi(2);
                        2.5 * (-r2 / (2.0 * 0.3f64.powi(2))).exp() - 0.5
                    }
                    _ => {
                        let r = ((u - dx).powi(2) + (v - dy).powi(2)).sqrt();
                        let f = 1.0 + variant as f64 + freq_noise;
                        (2.0 * PI * f * r + phase).sin()
                    }
                };
            }
        }
        let noise = Normal::new(0.0, self.spec.noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
        let mut image = Vec::with_capacity(CHANNELS * s * s);
        for t in tint {
            for &p in &pattern {
                let n = if self.spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                image.push((contrast * t * p + n) as f32);
            }
        }
        image
    }

    /// Images `[B, 3, S, S]` and labels for the given sample indices.
    pub fn batch<T: Element>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let raw = self.raw_batch(indices);
        raw.into_tensor(self.spec.image_size)
    }

    fn raw_batch(&self, indices: &[usize]) -> RawBatch {
        let mut images = Vec::with_capacity(indices.len() * CHANNELS * self.spec.image_size.pow(2));
        for &i in indices {
            images.extend(self.render(i));
        }
        RawBatch {
            images,
            labels: indices.iter().map(|&i| self.label(i)).collect(),
        }
    }

    /// Writes `images.f32` (little-endian `[N, 3, S, S]`), `labels.u32`
    /// (little-endian) and `meta.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<DatasetMeta> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..self.len() {
            for v in self.render(i) {
                images.extend_from_slice(&v.to_le_bytes());
            }
            labels.extend_from_slice(&(self.label(i) as u32).to_le_bytes());
        }
        let meta = DatasetMeta {
            spec: self.spec,
            channels: CHANNELS,
            images_sha256: hex(&Sha256::digest(&images)),
            labels_sha256: hex(&Sha256::digest(&labels)),
        };
        for (name, bytes) in [("images.f32", images), ("labels.u32", labels)] {
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join("meta.json");
        let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(meta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub spec: DatasetSpec,
    pub channels: usize,
    pub images_sha256: String,
    pub labels_sha256: String,
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Indices of batch `k` (0-based): the stream of per-epoch shuffles of
/// `0..len`, cut into consecutive chunks of `batch`.
pub fn batch_indices(len: usize, batch: usize, seed: u64, k: usize) -> Vec<usize> {
    let start = k * batch;
    let mut out = Vec::with_capacity(batch);
    let mut epoch = start / len;
    let mut offset = start % len;
    let mut perm = epoch_order(len, seed, epoch);
    while out.len() < batch {
        if offset == len {
            epoch += 1;
            offset = 0;
            perm = epoch_order(len, seed, epoch);
        }
        out.push(perm[offset]);
        offset += 1;
    }
    out
}

fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

struct RawBatch {
    images: Vec<f32>,
    labels: Vec<usize>,
}

impl RawBatch {
    fn into_tensor<T: Element>(self, size: usize) -> (Tensor<T>, Vec<usize>) {
        let b = self.labels.len();
        let data = self.images.into_iter().map(|v| T::lit(v as f64)).collect();
        let t = Tensor::from_vec(data, &[b, CHANNELS, size, size]).expect("batch shape");
        (t, self.labels)
    }
}

/// Ordered stream of training batches, optionally rendered ahead of time
/// on a worker thread through a bounded queue.
pub struct BatchStream {
    dataset: SynthDataset,
    batch: usize,
    seed: u64,
    next: usize,
    worker: Option<(Receiver<RawBatch>, JoinHandle<()>)>,
}

impl BatchStream {
    /// `prefetch = 0` renders synchronously; otherwise up to `prefetch`
    /// batches are queued ahead. Both produce the same sequence.
    pub fn new(dataset: SynthDataset, batch: usize, seed: u64, steps: usize, prefetch: usize) -> Self {
        let worker = (prefetch > 0).then(|| {
            let (tx, rx) = sync_channel(prefetch);
            let ds = dataset.clone();
            let handle = std::thread::spawn(move || {
                for k in 0..steps {
                    let idx = batch_indices(ds.len(), batch, seed, k);
                    if tx.send(ds.raw_batch(&idx)).is_err() {
                        return;
                    }
                }
            });
            (rx, handle)
        });
        BatchStream {
            dataset,
            batch,
            seed,
            next: 0,
            worker,
        }
    }

    pub fn next_batch<T: Element>(&mut self) -> (Tensor<T>, Vec<usize>) {
        let raw = match &self.worker {
            Some((rx, _)) => rx.recv().ok(),
            None => None,
        };
        let raw = raw.unwrap_or_else(|| {
            let idx = batch_indices(self.dataset.len(), self.batch, self.seed, self.next);
            self.dataset.raw_batch(&idx)
        });
        self.next += 1;
        raw.into_tensor(self.dataset.spec.image_size)
    }
}

impl Drop for BatchStream {
    fn drop(&mut self) {
        if let Some((rx, handle)) = self.worker.take() {
            drop(rx);
            let _ = handle.join();
        }
    }
}
