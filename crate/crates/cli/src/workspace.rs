//! Workspace directory layout, digest-addressed artifacts and the provenance log.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use crg_core::checkpoint::{checkpoint_bytes, load_checkpoint, Checkpointable, ModelCheckpoint};
use crg_core::models::{EncoderModel, GeneratorModel, ModelKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SUBDIRS: [&str; 5] = ["datasets", "checkpoints", "directions", "reports", "logs"];
const PROVENANCE_LOG: &str = "provenance.jsonl";

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `<name>-<first 12 digest characters>`, the stem every artifact is stored under.
pub fn artifact_stem(name: &str, digest: &str) -> String {
    format!("{name}-{}", &digest[..12.min(digest.len())])
}

/// A referenced dataset, checkpoint, direction or model pair does not exist.
#[derive(Debug)]
pub struct MissingArtifact(pub String);

impl std::fmt::Display for MissingArtifact {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "missing artifact: {}", self.0)
    }
}

impl std::error::Error for MissingArtifact {}

fn missing(msg: String) -> anyhow::Error {
    anyhow::Error::new(MissingArtifact(msg))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Written {
    Created,
    /// An identical artifact was already present.
    Unchanged,
}

/// Write `bytes` unless the file exists; an existing file with different content is
/// an error rather than an overwrite.
pub fn write_new(path: &Path, bytes: &[u8]) -> Result<Written> {
    if path.exists() {
        let existing = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        if existing == bytes {
            return Ok(Written::Unchanged);
        }
        bail!("refusing to overwrite {} with different content", path.display());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("moving into {}", path.display()))?;
    Ok(Written::Created)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub kind: String,
    pub path: String,
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub unix_time: f64,
    pub command: String,
    pub argv: Vec<String>,
    pub config_digest: String,
    pub artifacts: Vec<ArtifactRecord>,
    pub exit_code: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// A generator/encoder checkpoint pair, identified by the encoder's stem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelPairInfo {
    pub id: String,
    pub encoder: String,
    pub encoder_digest: String,
    pub generator: String,
    pub generator_digest: String,
    pub latent_dim: usize,
    pub resolution: usize,
}

#[derive(Clone, Debug)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    /// Use `root`, creating it and its subdirectories when missing.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in SUBDIRS {
            let d = root.join(sub);
            fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn datasets(&self) -> PathBuf {
        self.root.join("datasets")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn directions(&self) -> PathBuf {
        self.root.join("directions")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn append_provenance(&self, record: &ProvenanceRecord) -> Result<()> {
        let path = self.logs().join(PROVENANCE_LOG);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .with_context(|| format!("opening {}", path.display()))?;
        writeln!(f, "{}", serde_json::to_string(record)?)?;
        Ok(())
    }

    pub fn provenance(&self) -> Result<Vec<ProvenanceRecord>> {
        let path = self.logs().join(PROVENANCE_LOG);
        if !path.exists() {
            return Ok(Vec::new());
        }
        fs::read_to_string(&path)?
            .lines()
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }

    /// Resolve `reference` as an existing path, an exact stem in `dir`, or a unique
    /// stem prefix or digest prefix.
    fn resolve(&self, dir: &Path, what: &str, reference: &str, ext: Option<&str>) -> Result<PathBuf> {
        let direct = PathBuf::from(reference);
        if direct.exists() {
            return Ok(direct);
        }
        let mut candidates = Vec::new();
        if dir.exists() {
            for entry in fs::read_dir(dir)? {
                let path = entry?.path();
                if ext.is_some_and(|e| path.extension().and_then(|x| x.to_str()) != Some(e)) {
                    continue;
                }
                let Some(stem) = path.file_stem().and_then(|s| s.to_str()).map(str::to_owned) else {
                    continue;
                };
                if stem == reference {
                    return Ok(path);
                }
                let digest_part = stem.rsplit('-').next().unwrap_or("");
                if stem.starts_with(reference)
                    || (reference.len() >= 6 && digest_part.starts_with(reference))
                {
                    candidates.push(path);
                }
            }
        }
        candidates.sort();
        // A bare name ("gan") prefers `gan-<digest>` over longer names like `gan-disc-<digest>`.
        let named: Vec<&PathBuf> = candidates
            .iter()
            .filter(|p| {
                let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("");
                stem.rsplit_once('-').is_some_and(|(name, _)| name == reference)
            })
            .collect();
        if named.len() == 1 {
            return Ok(named[0].clone());
        }
        match candidates.len() {
            1 => Ok(candidates.remove(0)),
            0 => Err(missing(format!("no {what} matching '{reference}' in {}", dir.display()))),
            n => Err(crg_core::Error::Config(format!("ambiguous {what} reference '{reference}' matches {n} artifacts")).into()),
        }
    }

    pub fn dataset_dir(&self, reference: &str) -> Result<PathBuf> {
        self.resolve(&self.datasets(), "dataset", reference, None)
    }

    pub fn checkpoint_path(&self, reference: &str) -> Result<PathBuf> {
        self.resolve(&self.checkpoints(), "checkpoint", reference, Some("crgc"))
    }

    pub fn direction_path(&self, reference: &str) -> Result<PathBuf> {
        self.resolve(&self.directions(), "direction", reference, Some("json"))
    }

    /// Store a model checkpoint under `<name>-<digest>.crgc` and return (stem, file digest).
    pub fn save_model<M: Checkpointable<f32>>(
        &self,
        name: &str,
        model: &M,
        training_config: &serde_json::Value,
        rng_state_digest: &str,
    ) -> Result<(String, String)> {
        let bytes = checkpoint_bytes(model, training_config, rng_state_digest)?;
        let digest = sha256_hex(&bytes);
        let stem = artifact_stem(name, &digest);
        write_new(&self.checkpoints().join(format!("{stem}.crgc")), &bytes)?;
        Ok((stem, digest))
    }

    pub fn load_model<M: Checkpointable<f32>>(&self, reference: &str) -> Result<M> {
        let path = self.checkpoint_path(reference)?;
        load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))
    }

    /// Every encoder checkpoint whose recorded generator is also present.
    pub fn model_pairs(&self) -> Result<Vec<ModelPairInfo>> {
        let mut out = Vec::new();
        let mut paths: Vec<PathBuf> = fs::read_dir(self.checkpoints())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|x| x.to_str()) == Some("crgc"))
            .collect();
        paths.sort();
        for path in paths {
            let bytes = fs::read(&path)?;
            let Ok(ckpt) = ModelCheckpoint::from_bytes(&bytes) else { continue };
            if ckpt.meta.kind != ModelKind::Encoder {
                continue;
            }
            let Some(generator) = ckpt.meta.training_config.get("generator").and_then(|v| v.as_str()) else {
                continue;
            };
            let Ok(gen_path) = self.checkpoint_path(generator) else { continue };
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            out.push(ModelPairInfo {
                id: stem.clone(),
                encoder: stem,
                encoder_digest: sha256_hex(&bytes),
                generator: generator.to_string(),
                generator_digest: sha256_hex(&fs::read(gen_path)?),
                latent_dim: ckpt.meta.architecture.latent_dim,
                resolution: ckpt.meta.architecture.resolution,
            });
        }
        Ok(out)
    }

    /// Resolve a model pair; without a reference the workspace must hold exactly one.
    pub fn model_pair(&self, reference: Option<&str>) -> Result<ModelPairInfo> {
        let pairs = self.model_pairs()?;
        match reference {
            Some(r) => {
                let mut matches: Vec<_> = pairs.into_iter().filter(|p| p.id.starts_with(r)).collect();
                let named = |p: &ModelPairInfo| p.id == r || p.id.rsplit_once('-').is_some_and(|(name, _)| name == r);
                if matches.iter().filter(|p| named(p)).count() == 1 {
                    matches.retain(named);
                }
                match matches.len() {
                    1 => Ok(matches.into_iter().next().expect("one")),
                    0 => Err(missing(format!("no model pair '{r}' in {}", self.checkpoints().display()))),
                    n => Err(crg_core::Error::Config(format!("ambiguous model reference '{r}' matches {n} pairs")).into()),
                }
            }
            None => match pairs.len() {
                1 => Ok(pairs.into_iter().next().expect("one")),
                0 => Err(missing("no trained encoder/generator pair in the workspace".into())),
                n => Err(crg_core::Error::Config(format!("{n} model pairs in the workspace; choose one with --model")).into()),
            },
        }
    }

    pub fn load_pair(&self, info: &ModelPairInfo) -> Result<(GeneratorModel<f32>, EncoderModel<f32>)> {
        Ok((self.load_model(&info.generator)?, self.load_model(&info.encoder)?))
    }
}

pub fn unix_time() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}
