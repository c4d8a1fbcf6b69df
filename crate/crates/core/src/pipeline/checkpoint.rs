//! Checkpoint files: a JSON index followed by concatenated TEN1 tensors.
//!
//! Layout: `TKCK`, a little-endian u32 version, a little-endian u64 index
//! length, the UTF-8 JSON index, then the tensor blob. The index holds free
//! form metadata and, for every tensor, its byte offset into the blob and its
//! shape.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::audio::PitchStats;
use crate::error::{Error, Result};
use crate::io::tensor::Tensor;
use crate::models::{DurationModel, MelModel, ModelConfig, ModelKind, Network, PitchModel};
use crate::nn::optim::Moments;
use crate::nn::{AdamConfig, OptimizerState, ParamStore};
use crate::text::Vocab;

pub const MAGIC: [u8; 4] = *b"TKCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub offset: u64,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Index {
    meta: serde_json::Value,
    tensors: BTreeMap<String, TensorEntry>,
}

/// Named tensors plus metadata, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = BTreeMap::new();
        let mut blob = Vec::new();
        for (name, t) in &self.tensors {
            let entry = TensorEntry { offset: blob.len() as u64, shape: t.dims.clone() };
            if tensors.insert(name.clone(), entry).is_some() {
                return Err(Error::CorruptCheckpoint(format!("duplicate tensor {name}")));
            }
            t.write(&mut blob)?;
        }
        let index = serde_json::to_vec(&Index { meta: self.meta.clone(), tensors })?;
        let mut out = Vec::with_capacity(16 + index.len() + blob.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(index.len() as u64).to_le_bytes());
        out.extend_from_slice(&index);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < 16 || bytes[..4] != MAGIC {
            return Err(corrupt("missing header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
        }
        let index_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let index_end = 16usize.checked_add(index_len).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("index runs past end of file"))?;
        let index: Index = serde_json::from_slice(&bytes[16..index_end]).map_err(|e| Error::CorruptCheckpoint(format!("index: {e}")))?;
        let blob = &bytes[index_end..];
        let mut entries: Vec<_> = index.tensors.into_iter().collect();
        entries.sort_by_key(|(_, e)| e.offset);
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, entry) in entries {
            let start = usize::try_from(entry.offset).ok().filter(|&s| s <= blob.len());
            let start = start.ok_or_else(|| Error::CorruptCheckpoint(format!("{name}: offset {} outside file", entry.offset)))?;
            let t = Tensor::read(&blob[start..]).map_err(|e| Error::CorruptCheckpoint(format!("{name}: {e}")))?;
            if t.dims != entry.shape {
                return Err(Error::CorruptCheckpoint(format!("{name}: index shape {:?}, tensor shape {:?}", entry.shape, t.dims)));
            }
            tensors.push((name, t));
        }
        Ok(Self { meta: index.meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        // Write then rename so a crash never leaves a half-written checkpoint.
        let path = path.as_ref();
        let tmp = path.with_extension("partial");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::CheckpointMissing(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Metadata stored with every model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub vocab: Vec<String>,
    pub vocab_hash: String,
    #[serde(default)]
    pub pitch_stats: Option<PitchStats>,
    pub step: u64,
    #[serde(default)]
    pub val_loss: Option<f64>,
}

impl CheckpointMeta {
    pub fn vocab(&self) -> Result<Vocab> {
        let v = Vocab::new(self.vocab.clone())?;
        if v.hash() != self.vocab_hash {
            return Err(Error::VocabMismatch("stored vocabulary does not match its hash".into()));
        }
        Ok(v)
    }
}

/// A trained network of any kind, as stored on disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub net: Network<f32>,
}

fn store_tensors(store: &ParamStore<f32>) -> Vec<(String, Tensor)> {
    store.entries().iter().map(|e| (e.name.clone(), Tensor::from_arrayd(&e.value))).collect()
}

fn fill_store(store: &mut ParamStore<f32>, c: &Container, prefix: &str) -> Result<()> {
    let expected = store.entries().len();
    let present = c.tensors.iter().filter(|(n, _)| n.starts_with(prefix)).count();
    if present != expected {
        return Err(Error::CorruptCheckpoint(format!("expected {expected} tensors, found {present}")));
    }
    for e in store.entries_mut() {
        let name = format!("{prefix}{}", e.name);
        let t = c.get(&name).ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {name}")))?;
        if t.dims != e.value.shape() {
            return Err(Error::CorruptCheckpoint(format!("{name}: shape {:?}, model expects {:?}", t.dims, e.value.shape())));
        }
        e.value = ArrayD::from_shape_vec(e.value.raw_dim(), t.data.clone()).expect("shape checked");
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(net: Network<f32>, vocab: &Vocab, pitch_stats: Option<PitchStats>, step: u64, val_loss: Option<f64>) -> Self {
        let meta = CheckpointMeta {
            kind: net.config.kind,
            config: net.config.clone(),
            vocab: vocab.symbols().to_vec(),
            vocab_hash: vocab.hash(),
            pitch_stats,
            step,
            val_loss,
        };
        Self { meta, net }
    }

    pub fn to_container(&self) -> Result<Container> {
        Ok(Container { meta: serde_json::to_value(&self.meta)?, tensors: store_tensors(&self.net.store) })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(c.meta.clone()).map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))?;
        let vocab = meta.vocab()?;
        let mut net = Network::<f32>::build(&meta.config, vocab.len(), 0)?;
        fill_store(&mut net.store, c, "")?;
        Ok(Self { meta, net })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// Loads and checks that the checkpoint was trained on `vocab`.
    pub fn load_for(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Self> {
        let ckpt = Self::load(path.as_ref())?;
        if ckpt.meta.vocab_hash != vocab.hash() {
            return Err(Error::VocabMismatch(format!(
                "{} was trained on vocabulary {}, expected {}",
                path.as_ref().display(),
                &ckpt.meta.vocab_hash[..12],
                &vocab.hash()[..12]
            )));
        }
        Ok(ckpt)
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.meta.kind != kind {
            return Err(Error::ConfigInvalid(format!("checkpoint holds a {} network, not {kind}", self.meta.kind)));
        }
        Ok(())
    }

    pub fn into_duration(self) -> Result<DurationModel> {
        self.expect_kind(ModelKind::Duration)?;
        Ok(DurationModel { net: self.net })
    }

    pub fn into_pitch(self) -> Result<(PitchModel, PitchStats)> {
        self.expect_kind(ModelKind::Pitch)?;
        let stats = self.meta.pitch_stats.ok_or_else(|| Error::CorruptCheckpoint("pitch checkpoint lacks pitch statistics".into()))?;
        Ok((PitchModel { net: self.net }, stats))
    }

    pub fn into_mel(self) -> Result<MelModel> {
        self.expect_kind(ModelKind::Mel)?;
        Ok(MelModel { net: self.net })
    }
}

/// Adam moments and step count, stored next to a model checkpoint.
pub fn save_optimizer(path: impl AsRef<Path>, state: &OptimizerState<f32>, config: &AdamConfig) -> Result<()> {
    let mut tensors = Vec::with_capacity(2 * state.moments.len());
    for m in &state.moments {
        tensors.push((format!("m.{}", m.name), Tensor::from_arrayd(&m.m)));
        tensors.push((format!("v.{}", m.name), Tensor::from_arrayd(&m.v)));
    }
    let meta = serde_json::json!({ "step": state.step, "adam": config, "order": state.moments.iter().map(|m| &m.name).collect::<Vec<_>>() });
    Container { meta, tensors }.save(path)
}

pub fn load_optimizer(path: impl AsRef<Path>, store: &ParamStore<f32>) -> Result<(OptimizerState<f32>, AdamConfig)> {
    let c = Container::load(path)?;
    let bad = |m: String| Error::CorruptCheckpoint(m);
    let step = c.meta.get("step").and_then(|s| s.as_u64()).ok_or_else(|| bad("optimizer step missing".into()))?;
    let config: AdamConfig = serde_json::from_value(c.meta.get("adam").cloned().unwrap_or_default()).map_err(|e| bad(format!("adam config: {e}")))?;
    let mut state = OptimizerState::new(store);
    state.step = step;
    for Moments { name, m, v } in &mut state.moments {
        for (prefix, buf) in [("m.", &mut *m), ("v.", &mut *v)] {
            let key = format!("{prefix}{name}");
            let t = c.get(&key).ok_or_else(|| bad(format!("missing {key}")))?;
            if t.dims != buf.shape() {
                return Err(bad(format!("{key}: shape {:?}, expected {:?}", t.dims, buf.shape())));
            }
            *buf = ArrayD::from_shape_vec(buf.raw_dim(), t.data.clone()).expect("shape checked");
        }
    }
    Ok((state, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::TokenBatch;
    use crate::nn::Ctx;
    use crate::text::TokenSeq;

    fn vocab() -> Vocab {
        Vocab::from_corpus(["abc de"]).unwrap()
    }

    fn duration_ckpt() -> Checkpoint {
        let v = vocab();
        let net = Network::<f32>::build(&ModelConfig::duration().scaled(1.0 / 16.0), v.len(), 9).unwrap();
        Checkpoint::new(net, &v, None, 12, Some(0.5))
    }

    #[test]
    fn container_roundtrip() {
        let c = Container {
            meta: serde_json::json!({"a": 1}),
            tensors: vec![
                ("x".into(), Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()),
                ("b".into(), Tensor::new(vec![3], vec![0.5, -1.0, 7.0]).unwrap()),
            ],
        };
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.meta, c.meta);
        assert_eq!(back.get("x"), c.get("x"));
        assert_eq!(back.get("b"), c.get("b"));
    }

    #[test]
    fn model_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("duration.ckpt");
        let ckpt = duration_ckpt();
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.meta, ckpt.meta);
        let seq = TokenSeq::blanked(vec![0, 1, 0, 2, 0]).unwrap();
        let batch = TokenBatch::single(&seq).unwrap();
        let (a, _) = ckpt.net.forward(&batch, None, &mut Ctx::eval()).unwrap();
        let (b, _) = loaded.net.forward(&batch, None, &mut Ctx::eval()).unwrap();
        assert_eq!(a, b);
        // Saving again produces the same bytes.
        assert_eq!(loaded.to_container().unwrap().to_bytes().unwrap(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = duration_ckpt().to_container().unwrap().to_bytes().unwrap();
        for cut in [3, 15, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = Container::from_bytes(&bytes[..cut]).and_then(|c| Checkpoint::from_container(&c)).unwrap_err();
            assert!(matches!(err, Error::CorruptCheckpoint(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn vocabulary_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        duration_ckpt().save(&path).unwrap();
        let other = Vocab::from_corpus(["xyz"]).unwrap();
        assert!(matches!(Checkpoint::load_for(&path, &other), Err(Error::VocabMismatch(_))));
        Checkpoint::load_for(&path, &vocab()).unwrap();
        assert!(matches!(Checkpoint::load(dir.path().join("none.ckpt")), Err(Error::CheckpointMissing(_))));
    }

    #[test]
    fn optimizer_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = duration_ckpt();
        let mut state = OptimizerState::new(&ckpt.net.store);
        state.step = 7;
        for (i, m) in state.moments.iter_mut().enumerate() {
            m.m.fill(i as f32 * 0.5);
            m.v.fill(i as f32 * 0.25);
        }
        let path = dir.path().join("d.opt");
        save_optimizer(&path, &state, &AdamConfig::default()).unwrap();
        let (back, cfg) = load_optimizer(&path, &ckpt.net.store).unwrap();
        assert_eq!(back, state);
        assert_eq!(cfg, AdamConfig::default());
    }
}
