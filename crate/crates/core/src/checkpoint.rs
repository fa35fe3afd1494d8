//! Named-tensor archive used for every model checkpoint.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  content
//! 0       5     magic "RAEG1"
//! 5       8     u64 manifest length N
//! 13      N     UTF-8 JSON manifest
//! 13+N    ...   tensor payload; each tensor is a contiguous row-major run of
//!               f32 or f64 values at manifest offset (relative to payload start)
//! ```
//!
//! The manifest holds `format_version`, the model `kind`, its `config`,
//! free-form `metadata`, an optional `optimizer_step` and the tensor table
//! (`name`, `dtype`, `shape`, `offset`). Optimizer moments are stored as
//! ordinary tensors under the `optim/` prefix.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use raeg_autograd::{Adam, Float, ParamStore, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{RaegError, Result};

pub const MAGIC: &[u8; 5] = b"RAEG1";
pub const FORMAT_VERSION: u32 = 1;
pub const OPTIM_PREFIX: &str = "optim/";

/// A model whose parameters can be rebuilt from its config alone.
pub trait Architecture: Sized {
    type Config: Serialize + DeserializeOwned + Clone;
    const KIND: &'static str;

    fn build<T: Float, R: Rng + ?Sized>(config: &Self::Config, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self>;
    fn config(&self) -> &Self::Config;
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: String,
    config: Value,
    #[serde(default)]
    metadata: Value,
    #[serde(default)]
    optimizer_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

/// In-memory form of an archive file.
#[derive(Clone, Debug)]
pub struct Archive<T: Float> {
    pub kind: String,
    pub config: Value,
    pub metadata: Value,
    pub optimizer_step: Option<u64>,
    pub tensors: Vec<(String, Tensor<T>)>,
}

fn dtype_size(dtype: &str) -> Option<usize> {
    match dtype {
        "f32" => Some(4),
        "f64" => Some(8),
        _ => None,
    }
}

impl<T: Float> Archive<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let width = dtype_size(T::DTYPE).expect("supported dtype");
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: T::DTYPE.to_string(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
            });
            payload.reserve(t.len() * width);
            for &v in t.data() {
                if width == 4 {
                    payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
                } else {
                    payload.extend_from_slice(&v.as_f64().to_le_bytes());
                }
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            metadata: self.metadata.clone(),
            optimizer_step: self.optimizer_step,
            tensors: entries,
        };
        let header = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(13 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// `path` is only used to label errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |reason: String| RaegError::Checkpoint { path: path.to_path_buf(), reason };
        if bytes.len() < 13 || &bytes[..5] != MAGIC {
            return Err(fail("not a RAEG1 archive (bad magic)".into()));
        }
        let n = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
        let header = bytes.get(13..13usize.saturating_add(n)).ok_or_else(|| fail("truncated manifest".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(header).map_err(|e| fail(format!("corrupt manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(fail(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let payload = &bytes[13 + n..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let width = dtype_size(&e.dtype).ok_or_else(|| fail(format!("tensor `{}` has unknown dtype {}", e.name, e.dtype)))?;
            let count: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let raw = start
                .checked_add(count * width)
                .and_then(|end| payload.get(start..end))
                .ok_or_else(|| fail(format!("tensor `{}` runs past the end of the payload", e.name)))?;
            let data: Vec<T> = if width == 4 {
                raw.chunks_exact(4).map(|c| T::of_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect()
            } else {
                raw.chunks_exact(8).map(|c| T::of_f64(f64::from_le_bytes(c.try_into().unwrap()))).collect()
            };
            tensors.push((e.name.clone(), Tensor::from_vec(e.shape.clone(), data)?));
        }
        Ok(Self {
            kind: manifest.kind,
            config: manifest.config,
            metadata: manifest.metadata,
            optimizer_step: manifest.optimizer_step,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| RaegError::Checkpoint { path: path.to_path_buf(), reason: e.to_string() })?;
        Self::from_bytes(&bytes, path)
    }

    /// Model tensors only, i.e. without optimizer state.
    pub fn parameter_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str()).filter(|n| !n.starts_with(OPTIM_PREFIX))
    }
}

/// A model restored from disk together with its parameters.
pub struct Checkpoint<M, T: Float> {
    pub model: M,
    pub store: ParamStore<T>,
    pub metadata: Value,
    /// Step count and moment buffers, if the archive was written with an optimizer.
    pub optimizer: Option<(u64, Vec<(String, Tensor<T>)>)>,
}

impl<M, T: Float> Checkpoint<M, T> {
    /// Restore optimizer state into `adam`; no-op if none was saved.
    pub fn restore_optimizer(&self, adam: &mut Adam<T>) {
        if let Some((step, tensors)) = &self.optimizer {
            adam.import(&self.store, *step, tensors);
        }
    }
}

pub fn archive_model<M: Architecture, T: Float>(
    model: &M,
    store: &ParamStore<T>,
    metadata: Value,
    optimizer: Option<&Adam<T>>,
) -> Result<Archive<T>> {
    let mut tensors: Vec<(String, Tensor<T>)> = store.iter().map(|(_, n, t, _)| (n.to_string(), t.clone())).collect();
    let mut optimizer_step = None;
    if let Some(adam) = optimizer {
        let (step, moments) = adam.export(store);
        optimizer_step = Some(step);
        tensors.extend(moments.into_iter().map(|(n, t)| (format!("{OPTIM_PREFIX}{n}"), t)));
    }
    Ok(Archive {
        kind: M::KIND.to_string(),
        config: serde_json::to_value(model.config())?,
        metadata,
        optimizer_step,
        tensors,
    })
}

pub fn save_model<M: Architecture, T: Float>(
    path: &Path,
    model: &M,
    store: &ParamStore<T>,
    metadata: Value,
    optimizer: Option<&Adam<T>>,
) -> Result<()> {
    archive_model(model, store, metadata, optimizer)?.write(path)
}

/// First differing leaf between two JSON values, as a dotted path.
pub(crate) fn first_difference(expected: &Value, found: &Value, path: &str) -> Option<(String, String, String)> {
    match (expected, found) {
        (Value::Object(a), Value::Object(b)) => {
            let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
            keys.sort();
            keys.dedup();
            keys.into_iter().find_map(|k| {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                first_difference(a.get(k).unwrap_or(&Value::Null), b.get(k).unwrap_or(&Value::Null), &sub)
            })
        }
        (Value::Array(a), Value::Array(b)) if a.len() == b.len() => a
            .iter()
            .zip(b)
            .enumerate()
            .find_map(|(i, (x, y))| first_difference(x, y, &format!("{path}[{i}]"))),
        _ if numbers_equal(expected, found) || expected == found => None,
        _ => Some((path.to_string(), expected.to_string(), found.to_string())),
    }
}

fn numbers_equal(a: &Value, b: &Value) -> bool {
    matches!((a.as_f64(), b.as_f64()), (Some(x), Some(y)) if x == y)
}

pub fn model_from_archive<M: Architecture, T: Float>(
    archive: Archive<T>,
    path: &Path,
    expected: Option<&M::Config>,
) -> Result<Checkpoint<M, T>> {
    let fail = |reason: String| RaegError::Checkpoint { path: path.to_path_buf(), reason };
    if archive.kind != M::KIND {
        return Err(fail(format!("archive holds a `{}`, expected a `{}`", archive.kind, M::KIND)));
    }
    if let Some(expected) = expected {
        if let Some((field, expected, found)) = first_difference(&serde_json::to_value(expected)?, &archive.config, "") {
            return Err(RaegError::ConfigMismatch { field, expected, found });
        }
    }
    let config: M::Config =
        serde_json::from_value(archive.config.clone()).map_err(|e| fail(format!("corrupt config block: {e}")))?;
    let mut store = ParamStore::new();
    let model = M::build(&config, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut assigned = vec![false; store.len()];
    let mut moments = Vec::new();
    for (name, tensor) in archive.tensors {
        if let Some(rest) = name.strip_prefix(OPTIM_PREFIX) {
            moments.push((rest.to_string(), tensor));
            continue;
        }
        let id = store.id(&name).ok_or_else(|| fail(format!("unexpected tensor `{name}`")))?;
        store.set(id, tensor).map_err(|e| fail(format!("tensor `{name}`: {e}")))?;
        assigned[id.index()] = true;
    }
    if let Some(id) = store.ids().find(|id| !assigned[id.index()]) {
        return Err(fail(format!("missing tensor `{}`", store.name(id))));
    }
    let optimizer = archive.optimizer_step.map(|step| (step, moments));
    Ok(Checkpoint { model, store, metadata: archive.metadata, optimizer })
}

/// Load a model, failing with [`RaegError::ConfigMismatch`] if `expected` differs from the stored config.
pub fn load_model<M: Architecture, T: Float>(path: &Path, expected: Option<&M::Config>) -> Result<Checkpoint<M, T>> {
    model_from_archive(Archive::read(path)?, path, expected)
}

pub fn default_path(dir: &Path, kind: &str) -> PathBuf {
    dir.join(format!("{kind}.raeg"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{Generator, GeneratorConfig};
    use raeg_autograd::{AdamConfig, Binding, ParamKind, Tape};

    fn tiny() -> GeneratorConfig {
        GeneratorConfig { scales: 1, blocks_per_scale: 1, subnet_width: 4, clamp: 2.0, input_channels: 3 }
    }

    fn perturbed(seed: u64) -> (Generator, ParamStore<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let g = Generator::new(tiny(), &mut store, &mut rng).unwrap();
        let ids: Vec<_> = store.ids().filter(|&i| store.kind(i) == ParamKind::Trainable).collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::randn(shape, 0.1, &mut rng)).unwrap();
        }
        for _ in 0..20 {
            g.power_iteration(&mut store);
        }
        (g, store)
    }

    #[test]
    fn roundtrip_is_parameter_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.raeg");
        let (g, store) = perturbed(1);
        save_model(&path, &g, &store, serde_json::json!({"step": 7}), None).unwrap();
        let ck: Checkpoint<Generator, f32> = load_model(&path, Some(&tiny())).unwrap();
        assert_eq!(ck.metadata["step"], 7);
        assert!(ck.optimizer.is_none());
        assert_eq!(ck.store.len(), store.len());
        for (id, name, t, kind) in store.iter() {
            let other = ck.store.id(name).unwrap();
            assert_eq!(ck.store.get(other), t, "{name}");
            assert_eq!(ck.store.kind(other), kind);
            let _ = id;
        }
        let x = Tensor::<f32>::from_fn(vec![1, 3, 4, 4], |i| (i % 7) as f32 / 7.0);
        assert_eq!(g.protect_tensor(&store, &x).unwrap(), ck.model.protect_tensor(&ck.store, &x).unwrap());
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes, archive_model(&g, &store, serde_json::json!({"step": 7}), None).unwrap().to_bytes().unwrap());
    }

    #[test]
    fn manifest_counts_tensors_per_subnet() {
        let (g, store) = perturbed(2);
        let a = archive_model(&g, &store, Value::Null, None).unwrap();
        let cfg = tiny();
        let subnets = 4 * cfg.scales * 2 * cfg.blocks_per_scale;
        assert_eq!(a.parameter_names().count(), subnets * crate::coupling::Subnet::tensor_count());
    }

    #[test]
    fn wrong_config_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.raeg");
        let (g, store) = perturbed(3);
        save_model(&path, &g, &store, Value::Null, None).unwrap();
        let wrong = GeneratorConfig { scales: 2, ..tiny() };
        match load_model::<Generator, f32>(&path, Some(&wrong)) {
            Err(RaegError::ConfigMismatch { field, expected, found }) => {
                assert_eq!(field, "scales");
                assert_eq!((expected.as_str(), found.as_str()), ("2", "1"));
            }
            other => panic!("unexpected {:?}", other.err()),
        }
    }

    #[test]
    fn corrupt_archives_rejected() {
        let (g, store) = perturbed(4);
        let good = archive_model(&g, &store, Value::Null, None).unwrap().to_bytes().unwrap();
        let p = Path::new("mem");
        let reason = |bytes: &[u8]| match Archive::<f32>::from_bytes(bytes, p) {
            Err(RaegError::Checkpoint { reason, .. }) => reason,
            other => panic!("expected checkpoint error, got {:?}", other.map(|a| a.kind)),
        };
        assert!(reason(b"NOPE1xxxxxxxxxxxx").contains("magic"));
        let mut bad_json = good.clone();
        bad_json[13] = b'#';
        assert!(reason(&bad_json).contains("corrupt manifest"));
        assert!(reason(&good[..good.len() - 4]).contains("past the end"));

        let mut a = archive_model(&g, &store, Value::Null, None).unwrap();
        let mut bytes = a.to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes).replace("\"format_version\":1", "\"format_version\":9");
        bytes = text.into_bytes();
        assert!(reason(&bytes).contains("version"));

        a.tensors.pop();
        match model_from_archive::<Generator, f32>(a, p, None) {
            Err(RaegError::Checkpoint { reason, .. }) => assert!(reason.contains("missing tensor"), "{reason}"),
            _ => panic!("missing tensor accepted"),
        }
    }

    #[test]
    fn optimizer_state_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.raeg");
        let (g, mut store) = perturbed(5);
        let mut adam = Adam::new(AdamConfig { lr: 1e-3, ..Default::default() });
        let x = Tensor::<f32>::from_fn(vec![1, 3, 4, 4], |i| (i % 5) as f32 / 5.0);
        let step = |g: &Generator, store: &mut ParamStore<f32>, adam: &mut Adam<f32>| {
            let tape = Tape::new();
            let bind = Binding::new(&tape, store, true);
            let loss = g.protect(&bind, tape.constant(x.clone())).unwrap().sub(tape.constant(x.clone())).add_scalar(0.1).abs().mean();
            let grads = bind.gradients(&tape.backward(loss));
            adam.step(store, &grads);
        };
        step(&g, &mut store, &mut adam);
        save_model(&path, &g, &store, Value::Null, Some(&adam)).unwrap();
        let ck: Checkpoint<Generator, f32> = load_model(&path, None).unwrap();
        let mut adam2 = Adam::new(adam.config);
        ck.restore_optimizer(&mut adam2);
        assert_eq!(adam2.steps(), 1);
        let mut store2 = ck.store;
        step(&g, &mut store, &mut adam);
        step(&ck.model, &mut store2, &mut adam2);
        for (_, name, t, _) in store.iter() {
            assert_eq!(store2.get(store2.id(name).unwrap()), t, "{name}");
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]
        #[test]
        fn any_generator_roundtrips_bit_exactly(
            scales in 1usize..3,
            blocks in 1usize..3,
            width in 1usize..5,
            seed in proptest::prelude::any::<u64>(),
        ) {
            let config = GeneratorConfig { scales, blocks_per_scale: blocks, subnet_width: width, ..tiny() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::<f32>::new();
            let g = Generator::new(config.clone(), &mut store, &mut rng).unwrap();
            let ids: Vec<_> = store.ids().collect();
            for id in ids {
                let shape = store.get(id).shape().to_vec();
                store.set(id, Tensor::randn(shape, 1.0, &mut rng)).unwrap();
            }
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("g.raeg");
            save_model(&path, &g, &store, serde_json::json!({}), None).unwrap();
            let ck: Checkpoint<Generator, f32> = load_model(&path, Some(&config)).unwrap();
            for (_, name, t, _) in store.iter() {
                let u = ck.store.get(ck.store.id(name).unwrap());
                proptest::prop_assert!(t.data().iter().zip(u.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "{}", name);
            }
        }
    }
}
