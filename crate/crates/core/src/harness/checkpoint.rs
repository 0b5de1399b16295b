//! Versioned checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "HCKP" | u32 version | u32 element bytes (4 or 8) | u64 header length
//! | header (UTF-8 JSON) | tensor data in header order
//! ```
//!
//! The header carries the run kind, step and epoch counters, the sampling
//! state, a free-form `meta` object (config snapshot) and the name and shape
//! of every tensor. Tensors are stored in the run's precision, so a
//! save, load, save cycle reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::numerics::{ParamStore, Real, Tensor};

use super::optim::AdamW;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

const PARAM: &str = "param/";
const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";

/// Position of the counter-based sampler: every per-sample draw derives
/// from `seed` and the position, so this is the full random state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: u64,
    /// Index of the next sample within the epoch's permutation.
    pub cursor: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    step: u64,
    optimizer_step: u64,
    rng: RngState,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub kind: String,
    pub step: u64,
    pub optimizer_step: u64,
    pub rng: RngState,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Checkpoint<T> {
    /// Snapshot of a model and, if given, its optimizer.
    pub fn capture(
        kind: &str,
        step: u64,
        rng: RngState,
        meta: serde_json::Value,
        store: &ParamStore<T>,
        optimizer: Option<&AdamW<T>>,
    ) -> Self {
        let mut tensors: Vec<(String, Tensor<T>)> =
            store.specs().iter().zip(store.values()).map(|(s, v)| (format!("{PARAM}{}", s.name), v.clone())).collect();
        if let Some(opt) = optimizer {
            for (prefix, moments) in [(MOMENT1, &opt.m), (MOMENT2, &opt.v)] {
                tensors.extend(store.specs().iter().zip(moments).map(|(s, m)| (format!("{prefix}{}", s.name), m.clone())));
            }
        }
        Self {
            kind: kind.to_string(),
            step,
            optimizer_step: optimizer.map_or(0, |o| o.step),
            rng,
            meta,
            tensors,
        }
    }

    fn find(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every parameter of `store` from the checkpoint; all must be
    /// present with matching shapes.
    pub fn restore(&self, store: &mut ParamStore<T>, optimizer: Option<&mut AdamW<T>>) -> Result<()> {
        let names: Vec<String> = store.specs().iter().map(|s| s.name.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            let Some(t) = self.find(&format!("{PARAM}{name}")) else {
                bail!(Format, "checkpoint has no parameter {name}");
            };
            store.set(store.id_at(i), t.clone()).map_err(|e| Error::Format(e.to_string()))?;
        }
        if let Some(opt) = optimizer {
            for (i, name) in names.iter().enumerate() {
                for (prefix, slot) in [(MOMENT1, &mut opt.m[i]), (MOMENT2, &mut opt.v[i])] {
                    let Some(t) = self.find(&format!("{prefix}{name}")) else {
                        bail!(Format, "checkpoint has no optimizer state for {name}");
                    };
                    if t.shape() != slot.shape() {
                        bail!(Format, "optimizer state for {name} has shape {:?}", t.shape());
                    }
                    *slot = t.clone();
                }
            }
            opt.step = self.optimizer_step;
        }
        Ok(())
    }

    /// Copies the parameters whose names and shapes match, leaving the rest
    /// untouched. Returns the names copied.
    pub fn restore_matching(&self, store: &mut ParamStore<T>) -> Vec<String> {
        let mut copied = Vec::new();
        for i in 0..store.len() {
            let id = store.id_at(i);
            let name = store.name(id).to_string();
            if let Some(t) = self.find(&format!("{PARAM}{name}")) {
                if store.set(id, t.clone()).is_ok() {
                    copied.push(name);
                }
            }
        }
        copied
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            step: self.step,
            optimizer_step: self.optimizer_step,
            rng: self.rng,
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let body: usize = self.tensors.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + body * T::BYTES);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    /// Decodes a checkpoint, converting elements if it was written in the
    /// other precision.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != CHECKPOINT_MAGIC {
            bail!(Format, "not a checkpoint file");
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != CHECKPOINT_VERSION {
            bail!(Format, "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})");
        }
        let width = u32_at(8) as usize;
        if width != 4 && width != 8 {
            bail!(Format, "checkpoint element width {width} is invalid");
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let Some(json) = bytes.get(20..20usize.saturating_add(header_len)) else {
            bail!(Format, "checkpoint header is truncated");
        };
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut offset = 20 + header_len;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let Some(raw) = bytes.get(offset..offset + n * width) else {
                bail!(Format, "checkpoint data for {} is truncated", entry.name);
            };
            let data: Vec<T> = if width == T::BYTES {
                raw.chunks_exact(width).map(T::read_le).collect()
            } else if width == 4 {
                raw.chunks_exact(4).map(|c| T::c(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect()
            } else {
                raw.chunks_exact(8).map(|c| T::c(f64::from_le_bytes(c.try_into().unwrap()))).collect()
            };
            let tensor = Tensor::new(&entry.shape, data).map_err(|e| Error::Format(format!("{}: {e}", entry.name)))?;
            tensors.push((entry.name, tensor));
            offset += n * width;
        }
        if offset != bytes.len() {
            bail!(Format, "checkpoint has {} trailing bytes", bytes.len() - offset);
        }
        Ok(Self {
            kind: header.kind,
            step: header.step,
            optimizer_step: header.optimizer_step,
            rng: header.rng,
            meta: header.meta,
            tensors,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn
    /// checkpoint behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

/// Element width of a checkpoint file, without decoding it.
pub fn stored_width(path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        bail!(Format, "{} is not a checkpoint file", path.display());
    }
    Ok(u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::OptimConfig;
    use crate::numerics::Init;

    fn sample() -> (ParamStore<f64>, AdamW<f64>) {
        let mut store = ParamStore::new();
        store.declare("a.w", &[3, 2], Init::Normal(1.0));
        store.declare("a.b", &[2], Init::Normal(1.0));
        store.initialize(9);
        let mut opt = AdamW::new(&store, OptimConfig::pretrain());
        let grads: Vec<_> = store.values().iter().map(|t| t.map(|v| v * 0.3 + 0.1)).collect();
        opt.update(&mut store, &grads, 1e-3).unwrap();
        (store, opt)
    }

    fn meta() -> serde_json::Value {
        serde_json::json!({ "lambda": 0.0025, "temperature": 0.07, "name": "run" })
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (store, opt) = sample();
        let rng = RngState { seed: 3, epoch: 2, cursor: 5 };
        let ck = Checkpoint::capture("pretrain", 17, rng, meta(), &store, Some(&opt));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.hckp");
        ck.save(&path).unwrap();
        let again = Checkpoint::<f64>::load(&path).unwrap();
        assert_eq!(again.to_bytes().unwrap(), bytes);
        assert_eq!(stored_width(&path).unwrap(), 8);
    }

    #[test]
    fn restore_reproduces_store_and_optimizer() {
        let (store, opt) = sample();
        let ck = Checkpoint::capture("pretrain", 1, RngState::default(), meta(), &store, Some(&opt));
        let mut fresh = ParamStore::new();
        fresh.declare("a.w", &[3, 2], Init::Zeros);
        fresh.declare("a.b", &[2], Init::Zeros);
        fresh.initialize(0);
        let mut fresh_opt = AdamW::new(&fresh, OptimConfig::pretrain());
        ck.restore(&mut fresh, Some(&mut fresh_opt)).unwrap();
        assert_eq!(fresh.values(), store.values());
        assert_eq!(fresh_opt.m, opt.m);
        assert_eq!(fresh_opt.v, opt.v);
        assert_eq!(fresh_opt.step, opt.step);
    }

    #[test]
    fn partial_restore_by_name() {
        let (store, _) = sample();
        let ck = Checkpoint::capture("pretrain", 1, RngState::default(), meta(), &store, None);
        let mut other = ParamStore::<f64>::new();
        other.declare("a.w", &[3, 2], Init::Zeros);
        other.declare("a.b", &[3], Init::Zeros);
        other.declare("head.w", &[2, 2], Init::Zeros);
        other.initialize(0);
        assert_eq!(ck.restore_matching(&mut other), vec!["a.w".to_string()]);
        assert_eq!(other.values()[0], store.values()[0]);
        assert!(matches!(ck.restore(&mut other, None), Err(Error::Format(_))));
    }

    #[test]
    fn cross_precision_load_converts() {
        let (store, _) = sample();
        let ck = Checkpoint::capture("pretrain", 1, RngState::default(), meta(), &store, None);
        let single = Checkpoint::<f32>::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        for ((_, a), (_, b)) in single.tensors.iter().zip(&ck.tensors) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, *y as f32);
            }
        }
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let (store, _) = sample();
        let bytes = Checkpoint::capture("pretrain", 1, RngState::default(), meta(), &store, None).to_bytes().unwrap();
        let cases: Vec<Vec<u8>> = vec![
            b"NOPE".to_vec(),
            bytes[..bytes.len() - 3].to_vec(),
            [bytes.as_slice(), &[0u8]].concat(),
            { let mut b = bytes.clone(); b[4] = 9; b },
            { let mut b = bytes.clone(); b[8] = 2; b },
            { let mut b = bytes.clone(); b[21] = b'!'; b },
        ];
        for case in cases {
            assert!(matches!(Checkpoint::<f64>::from_bytes(&case), Err(Error::Format(_))));
        }
    }
}
