//! Named parameter storage, deterministic initialization, checksums,
//! serialization, and the Adam optimizer.

use crate::scalar::Scalar;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng as _;
use rand::SeedableRng;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

/// The one RNG used everywhere. All draws happen in f64 and are converted
/// to the model scalar afterwards, so f32 and f64 runs see the same stream.
pub type SeedRng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> SeedRng {
    SeedRng::seed_from_u64(seed)
}

/// Uniform draw in `[lo, hi)`.
pub fn uniform_f64(rng: &mut SeedRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Standard normal via Box-Muller; two uniform draws per sample keeps the
/// stream layout platform independent.
pub fn normal_f64(rng: &mut SeedRng, mean: f64, std: f64) -> f64 {
    let u1 = 1.0 - rng.gen::<f64>();
    let u2 = rng.gen::<f64>();
    let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    mean + std * z
}

pub fn normal_array<S: Scalar>(rng: &mut SeedRng, shape: &[usize], mean: f64, std: f64) -> ArrayD<S> {
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n).map(|_| S::from_f64(normal_f64(rng, mean, std))).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn uniform_array<S: Scalar>(rng: &mut SeedRng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<S> {
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n).map(|_| S::from_f64(uniform_f64(rng, lo, hi))).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn zeros_array<S: Scalar>(shape: &[usize]) -> ArrayD<S> {
    ArrayD::zeros(IxDyn(shape))
}

const STORE_MAGIC: &[u8; 6] = b"AGPS1\n";

/// Ordered map from parameter name to tensor. Insertion order is part of
/// the contract: iteration, checksums, and serialization all follow it.
#[derive(Clone)]
pub struct ParamStore<S: Scalar> {
    params: IndexMap<String, ArrayD<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: IndexMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<S>) {
        assert!(
            self.params.insert(name.to_string(), value).is_none(),
            "duplicate parameter name {name:?}"
        );
    }

    pub fn get(&self, name: &str) -> &ArrayD<S> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<S> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|v| v.len()).sum()
    }

    /// SHA-256 over every parameter whose name passes the filter, in
    /// insertion order. Values are hashed as f64 little-endian bits, so
    /// the digest is stable across scalar types and reruns.
    pub fn checksum_filtered(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, value) in &self.params {
            if !keep(name) {
                continue;
            }
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update((value.ndim() as u64).to_le_bytes());
            for d in value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in value.iter() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn checksum(&self) -> String {
        self.checksum_filtered(|_| true)
    }

    pub fn checksum_prefix(&self, prefix: &str) -> String {
        self.checksum_filtered(|n| n.starts_with(prefix))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(STORE_MAGIC)?;
        w.write_u64::<LittleEndian>(self.params.len() as u64)?;
        for (name, value) in &self.params {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(value.ndim() as u32)?;
            for d in value.shape() {
                w.write_u64::<LittleEndian>(*d as u64)?;
            }
            for v in value.iter() {
                w.write_f64::<LittleEndian>(v.as_f64())?;
            }
        }
        w.flush()
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != STORE_MAGIC {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "not a parameter store file",
            ));
        }
        let count = r.read_u64::<LittleEndian>()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = r.read_u32::<LittleEndian>()? as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)?;
            let name = String::from_utf8(name_buf)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            let ndim = r.read_u32::<LittleEndian>()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u64::<LittleEndian>()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(S::from_f64(r.read_f64::<LittleEndian>()?));
            }
            store.insert(&name, ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap());
        }
        Ok(store)
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// Adam with per-parameter first/second moment state keyed by name.
/// Only names present in the gradient map are touched, so freezing is
/// simply "do not hand the optimizer a gradient".
pub struct Adam<S: Scalar> {
    pub config: AdamConfig,
    state: IndexMap<String, (ArrayD<S>, ArrayD<S>)>,
    step_count: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, state: IndexMap::new(), step_count: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step_count
    }

    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &IndexMap<String, ArrayD<S>>) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = S::from_f64(self.config.beta1);
        let b2 = S::from_f64(self.config.beta2);
        let one = S::one();
        let bc1 = S::from_f64(1.0 - self.config.beta1.powi(t));
        let bc2 = S::from_f64(1.0 - self.config.beta2.powi(t));
        let lr = S::from_f64(self.config.lr);
        let eps = S::from_f64(self.config.eps);
        for (name, g) in grads {
            let p = store.get_mut(name);
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for {name:?}");
            let (m, v) = self
                .state
                .entry(name.clone())
                .or_insert_with(|| (ArrayD::zeros(g.raw_dim()), ArrayD::zeros(g.raw_dim())));
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|pi, mi, vi, &gi| {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi = *pi - lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}
