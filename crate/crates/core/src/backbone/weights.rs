//! Weight sources for the backbone. Every tensor handed out is recorded so
//! the full weight set can be checksummed. None of them are `Var`s, so
//! autograd never accumulates gradients into the backbone.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

pub type WeightRegistry = Arc<Mutex<BTreeMap<String, Tensor>>>;

enum Source {
    /// Deterministic per-name initialization.
    Seeded(u64),
    Safetensors(candle_core::safetensors::MmapedSafetensors),
}

struct RecordingBackend {
    source: Source,
    registry: WeightRegistry,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(name.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn seeded_tensor(seed: u64, name: &str, shape: &Shape, init: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
    let n = shape.elem_count();
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
    let values: Vec<f64> = match init {
        Init::Const(c) => vec![c; n],
        Init::Uniform { lo, up } => {
            let d = Uniform::new_inclusive(lo, up);
            (0..n).map(|_| d.sample(&mut rng)).collect()
        }
        Init::Randn { mean, stdev } => {
            let d = Normal::new(mean, stdev).expect("valid normal");
            (0..n).map(|_| d.sample(&mut rng)).collect()
        }
        Init::Kaiming { .. } => {
            // unit-gain fan-in scaling keeps activations of the random
            // network near unit variance
            let dims = shape.dims();
            let fan_in: usize = dims.iter().skip(1).product::<usize>().max(1);
            let d = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid normal");
            (0..n).map(|_| d.sample(&mut rng)).collect()
        }
    };
    Tensor::from_vec(values, shape.clone(), dev)?.to_dtype(dtype)
}

impl SimpleBackend for RecordingBackend {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let t = match &self.source {
            Source::Seeded(seed) => seeded_tensor(*seed, name, &s, h, dtype, dev)?,
            Source::Safetensors(st) => {
                let t = st.load(name, dev)?.to_dtype(dtype)?;
                if t.shape() != &s {
                    return Err(candle_core::Error::UnexpectedShape {
                        msg: format!("shape mismatch for {name}"),
                        expected: s,
                        got: t.shape().clone(),
                    }
                    .bt());
                }
                t
            }
        };
        self.registry
            .lock()
            .expect("weight registry poisoned")
            .insert(name.to_string(), t.clone());
        Ok(t)
    }

    fn get_unchecked(&self, name: &str, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        match &self.source {
            Source::Seeded(_) => Err(candle_core::Error::CannotFindTensor {
                path: name.to_string(),
            }
            .bt()),
            Source::Safetensors(st) => st.load(name, dev)?.to_dtype(dtype),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        match &self.source {
            Source::Seeded(_) => true,
            Source::Safetensors(st) => st.get(name).is_ok(),
        }
    }
}

pub fn seeded_var_builder(seed: u64, dtype: DType, dev: &Device) -> (VarBuilder<'static>, WeightRegistry) {
    let registry = WeightRegistry::default();
    let backend = RecordingBackend {
        source: Source::Seeded(seed),
        registry: Arc::clone(&registry),
    };
    (
        VarBuilder::from_backend(Box::new(backend), dtype, dev.clone()),
        registry,
    )
}

pub fn safetensors_var_builder(
    path: &Path,
    dtype: DType,
    dev: &Device,
) -> candle_core::Result<(VarBuilder<'static>, WeightRegistry)> {
    // SAFETY: the file is memory-mapped read-only and must not be modified
    // while the backbone is alive.
    let st = unsafe { candle_core::safetensors::MmapedSafetensors::new(path)? };
    let registry = WeightRegistry::default();
    let backend = RecordingBackend {
        source: Source::Safetensors(st),
        registry: Arc::clone(&registry),
    };
    Ok((
        VarBuilder::from_backend(Box::new(backend), dtype, dev.clone()),
        registry,
    ))
}

/// SHA-256 over every registered tensor, in name order.
pub fn checksum(registries: &[&WeightRegistry]) -> candle_core::Result<String> {
    let mut hasher = Sha256::new();
    for registry in registries {
        let map = registry.lock().expect("weight registry poisoned");
        for (name, t) in map.iter() {
            hasher.update(name.as_bytes());
            for v in t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                hasher.update(v.to_le_bytes());
            }
        }
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

pub fn parameter_count(registry: &WeightRegistry) -> usize {
    registry
        .lock()
        .expect("weight registry poisoned")
        .values()
        .map(Tensor::elem_count)
        .sum()
}
