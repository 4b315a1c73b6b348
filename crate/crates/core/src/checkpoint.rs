//! Single-file model container.
//!
//! Layout: magic `CRGC`, u32 LE format version, u64 LE metadata length, JSON
//! metadata, then every tensor's little-endian payload in metadata order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{Architecture, DiscriminatorModel, EncoderModel, GeneratorModel, ModelKind};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"CRGC";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// SHA-256 over names, shapes and little-endian f64 values of named tensors.
pub fn tensors_digest<T: Real>(named: &[(String, Tensor<T>)]) -> String {
    let mut h = Sha256::new();
    for (name, t) in named {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.as_f64().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub architecture: Architecture,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    pub training_config: serde_json::Value,
    pub rng_state_digest: String,
    pub payload_sha256: String,
}

/// Models that can be written to and restored from a checkpoint.
pub trait Checkpointable<T: Real>: Sized {
    fn kind() -> ModelKind;
    fn architecture(&self) -> &Architecture;
    fn named_tensors(&self) -> Vec<(String, Tensor<T>)>;
    fn from_named(arch: Architecture, tensors: Vec<(String, Tensor<T>)>) -> Result<Self>;
}

fn restore<T: Real>(
    tensors: Vec<(String, Tensor<T>)>,
    mut set: impl FnMut(&str, Tensor<T>) -> Result<()>,
    expected: Vec<(String, Tensor<T>)>,
) -> Result<()> {
    if tensors.len() != expected.len() {
        return Err(Error::CheckpointCorrupt(format!(
            "{} tensors stored, architecture has {}",
            tensors.len(),
            expected.len()
        )));
    }
    for ((name, t), (want, shape)) in tensors.into_iter().zip(expected) {
        if name != want || t.shape() != shape.shape() {
            return Err(Error::CheckpointCorrupt(format!(
                "tensor {name} {:?} where architecture expects {want} {:?}",
                t.shape(),
                shape.shape()
            )));
        }
        set(&name, t)?;
    }
    Ok(())
}

fn build_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

impl<T: Real> Checkpointable<T> for GeneratorModel<T> {
    fn kind() -> ModelKind {
        ModelKind::Generator
    }
    fn architecture(&self) -> &Architecture {
        &self.arch
    }
    fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        self.net.named_tensors()
    }
    fn from_named(arch: Architecture, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut m = GeneratorModel::new(arch, &mut build_rng())?;
        let expected = m.net.named_tensors();
        restore(tensors, |n, t| m.net.set_named_tensor(n, t), expected)?;
        Ok(m)
    }
}

impl<T: Real> Checkpointable<T> for EncoderModel<T> {
    fn kind() -> ModelKind {
        ModelKind::Encoder
    }
    fn architecture(&self) -> &Architecture {
        &self.arch
    }
    fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        self.net.named_tensors()
    }
    fn from_named(arch: Architecture, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut m = EncoderModel::new(arch, &mut build_rng())?;
        let expected = m.net.named_tensors();
        restore(tensors, |n, t| m.net.set_named_tensor(n, t), expected)?;
        Ok(m)
    }
}

impl<T: Real> Checkpointable<T> for DiscriminatorModel<T> {
    fn kind() -> ModelKind {
        ModelKind::Discriminator
    }
    fn architecture(&self) -> &Architecture {
        &self.arch
    }
    fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        DiscriminatorModel::named_tensors(self)
    }
    fn from_named(arch: Architecture, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut m = DiscriminatorModel::new(arch, &mut build_rng())?;
        let expected = DiscriminatorModel::named_tensors(&m);
        restore(tensors, |n, t| m.set_named_tensor(n, t), expected)?;
        Ok(m)
    }
}

fn encode_values<T: Real>(dtype: &str, data: &[T], out: &mut Vec<u8>) {
    for v in data {
        if dtype == "f32" {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        } else {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
}

/// Serialize a model to bytes.
pub fn checkpoint_bytes<T: Real, M: Checkpointable<T>>(
    model: &M,
    training_config: &serde_json::Value,
    rng_state_digest: &str,
) -> Result<Vec<u8>> {
    let named = model.named_tensors();
    let dtype = T::DTYPE.to_string();
    let mut payload = Vec::new();
    for (_, t) in &named {
        encode_values(&dtype, t.data(), &mut payload);
    }
    let meta = CheckpointMeta {
        kind: M::kind(),
        architecture: model.architecture().clone(),
        dtype,
        tensors: named
            .iter()
            .map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() })
            .collect(),
        training_config: training_config.clone(),
        rng_state_digest: rng_state_digest.to_string(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let meta_bytes = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(HEADER_LEN + meta_bytes.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Write a checkpoint file and return the SHA-256 of its bytes.
pub fn save_checkpoint<T: Real, M: Checkpointable<T>>(
    model: &M,
    training_config: &serde_json::Value,
    rng_state_digest: &str,
    path: &Path,
) -> Result<String> {
    let bytes = checkpoint_bytes(model, training_config, rng_state_digest)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// A parsed checkpoint: metadata plus raw tensors (not yet bound to a model).
#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

impl ModelCheckpoint {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::CheckpointTruncated(format!("{} byte file has no header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::CheckpointCorrupt("missing CRGC magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion { expected: FORMAT_VERSION, found: version });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::CheckpointTruncated("header cut short".into()));
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let meta_end = HEADER_LEN
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::CheckpointTruncated("metadata cut short".into()))?;
        let meta: CheckpointMeta = serde_json::from_slice(&bytes[HEADER_LEN..meta_end])
            .map_err(|e| Error::CheckpointCorrupt(format!("metadata: {e}")))?;
        let width = match meta.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::CheckpointCorrupt(format!("unknown dtype {other}"))),
        };
        let total: usize = meta.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        let payload = &bytes[meta_end..];
        if payload.len() < total * width {
            return Err(Error::CheckpointTruncated(format!(
                "payload has {} bytes, metadata declares {}",
                payload.len(),
                total * width
            )));
        }
        if payload.len() > total * width {
            return Err(Error::CheckpointCorrupt("trailing bytes after payload".into()));
        }
        let actual = hex::encode(Sha256::digest(payload));
        if actual != meta.payload_sha256 {
            return Err(Error::CheckpointDigest { expected: meta.payload_sha256.clone(), actual });
        }
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        let mut off = 0;
        for entry in &meta.tensors {
            let n: usize = entry.shape.iter().product();
            let data = payload[off..off + n * width]
                .chunks_exact(width)
                .map(|c| {
                    if width == 4 {
                        f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    } else {
                        f64::from_le_bytes(c.try_into().expect("8 bytes"))
                    }
                })
                .collect();
            off += n * width;
            tensors.push((entry.name.clone(), Tensor::from_vec(&entry.shape, data)?));
        }
        Ok(Self { meta, tensors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Bind to a model type, checking the stored kind.
    pub fn into_model<T: Real, M: Checkpointable<T>>(self) -> Result<M> {
        if self.meta.kind != M::kind() {
            return Err(Error::CheckpointKind {
                expected: M::kind().to_string(),
                found: self.meta.kind.to_string(),
            });
        }
        let tensors = self.tensors.into_iter().map(|(n, t)| (n, t.cast::<T>())).collect();
        M::from_named(self.meta.architecture, tensors)
    }
}

/// Load a checkpoint file directly into a model of the expected kind.
pub fn load_checkpoint<T: Real, M: Checkpointable<T>>(path: &Path) -> Result<M> {
    ModelCheckpoint::load(path)?.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{
        discriminator_architecture, encoder_architecture, generator_architecture, sample_latents,
        LatentGenerator,
    };

    fn generator() -> GeneratorModel<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        GeneratorModel::new(generator_architecture(8, 16, &[8, 8, 4]).unwrap(), &mut rng).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical_and_forward_exact() {
        let dir = tempfile::tempdir().unwrap();
        let g = generator();
        let cfg = serde_json::json!({"lr": 1e-4, "steps": 3});
        let p1 = dir.path().join("a.crgc");
        let d1 = save_checkpoint(&g, &cfg, "abc", &p1).unwrap();
        let back: GeneratorModel<f32> = load_checkpoint(&p1).unwrap();
        let p2 = dir.path().join("b.crgc");
        let d2 = save_checkpoint(&back, &cfg, "abc", &p2).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let z = sample_latents::<f32>(2, 8, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(g.generate(&z).unwrap(), back.generate(&z).unwrap());
    }

    #[test]
    fn encoder_and_discriminator_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = EncoderModel::<f32>::new(encoder_architecture(8, 16, &[4, 8], 0.5).unwrap(), &mut rng).unwrap();
        let bytes = checkpoint_bytes(&e, &serde_json::Value::Null, "").unwrap();
        let e2: EncoderModel<f32> = ModelCheckpoint::from_bytes(&bytes).unwrap().into_model().unwrap();
        let x = Tensor::full(&[1, 1, 16, 16], 0.25f32);
        assert_eq!(e.encode(&x).unwrap(), e2.encode(&x).unwrap());

        let d = DiscriminatorModel::<f32>::new(discriminator_architecture(16, &[4, 8, 8], 16).unwrap(), &mut rng).unwrap();
        let bytes = checkpoint_bytes(&d, &serde_json::Value::Null, "").unwrap();
        let d2: DiscriminatorModel<f32> = ModelCheckpoint::from_bytes(&bytes).unwrap().into_model().unwrap();
        assert_eq!(d.logits(&x).unwrap(), d2.logits(&x).unwrap());
    }

    #[test]
    fn corruption_cases_give_distinct_errors() {
        let g = generator();
        let bytes = checkpoint_bytes(&g, &serde_json::Value::Null, "").unwrap();

        let mut v = bytes.clone();
        v[4] ^= 0xff;
        assert!(matches!(ModelCheckpoint::from_bytes(&v), Err(Error::CheckpointVersion { .. })));

        let mut d = bytes.clone();
        let last = d.len() - 1;
        d[last] ^= 0x01;
        assert!(matches!(ModelCheckpoint::from_bytes(&d), Err(Error::CheckpointDigest { .. })));

        let t = &bytes[..bytes.len() - 10];
        assert!(matches!(ModelCheckpoint::from_bytes(t), Err(Error::CheckpointTruncated(_))));
        assert!(matches!(ModelCheckpoint::from_bytes(&bytes[..6]), Err(Error::CheckpointTruncated(_))));

        let wrong = ModelCheckpoint::from_bytes(&bytes).unwrap().into_model::<f32, EncoderModel<f32>>();
        assert!(matches!(wrong, Err(Error::CheckpointKind { .. })));
    }

    #[test]
    fn digest_tracks_every_value() {
        let g = generator();
        let a = g.parameter_digest();
        let mut h = g.clone();
        h.net.params_mut()[0].data_mut()[0] += 1e-3;
        assert_ne!(a, h.parameter_digest());
        assert_eq!(a, g.clone().parameter_digest());
    }
}
