use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{check_resolution, render_sample, AttributeConfig, RegionMasks};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Per-attribute sampling distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Uniform { lo: f64, hi: f64 },
    Constant { value: f64 },
}

impl Distribution {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            Distribution::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            Distribution::Constant { value } => value,
        }
    }
}

/// Forces the first `ceil(n * fraction)` samples to draw eyewear from `attributed`;
/// those samples are labelled attributed, the rest neutral.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EyewearSplit {
    pub fraction: f64,
    pub attributed: Distribution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSampler {
    pub face_size: Distribution,
    pub hair_shade: Distribution,
    pub mouth_curve: Distribution,
    pub eyewear: Distribution,
    #[serde(default)]
    pub eyewear_split: Option<EyewearSplit>,
    /// Without a split, a sample is labelled attributed when eyewear >= this value.
    pub attributed_threshold: f64,
}

impl Default for AttributeSampler {
    fn default() -> Self {
        Self {
            face_size: Distribution::Uniform { lo: 0.0, hi: 1.0 },
            hair_shade: Distribution::Uniform { lo: 0.0, hi: 1.0 },
            mouth_curve: Distribution::Uniform { lo: -1.0, hi: 1.0 },
            eyewear: Distribution::Uniform { lo: 0.0, hi: 1.0 },
            eyewear_split: None,
            attributed_threshold: 0.5,
        }
    }
}

impl AttributeSampler {
    fn attributed_count(&self, n: usize) -> Option<usize> {
        self.eyewear_split
            .map(|s| ((n as f64) * s.fraction).ceil() as usize)
    }

    fn validate(&self) -> Result<()> {
        if let Some(s) = self.eyewear_split {
            if !(0.0..=1.0).contains(&s.fraction) {
                return Err(Error::Config(format!("split fraction {} outside [0, 1]", s.fraction)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub file: String,
    pub attributes: AttributeConfig,
    pub attributed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub sample_count: usize,
    pub resolution: usize,
    pub seed: u64,
    pub sampler: AttributeSampler,
    pub region_masks: RegionMasks,
    pub records: Vec<SampleRecord>,
    /// SHA-256 over the stored 8-bit pixels of every sample in order.
    pub digest: String,
}

/// A manifest with its images held in memory (images are in their stored, quantized form).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<ImageTensor>,
}

impl Dataset {
    pub fn labels(&self) -> Vec<bool> {
        self.manifest.records.iter().map(|r| r.attributed).collect()
    }
}

fn content_digest(images: &[ImageTensor]) -> String {
    let mut h = Sha256::new();
    for img in images {
        h.update(img.quantized());
    }
    hex::encode(h.finalize())
}

/// Sample attributes and render every image without touching the filesystem.
pub fn render_dataset(
    n: usize,
    seed: u64,
    sampler: &AttributeSampler,
    resolution: usize,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset needs at least one sample".into()));
    }
    check_resolution(resolution)?;
    sampler.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = sampler.attributed_count(n);
    let mut records = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    for index in 0..n {
        let face = sampler.face_size.sample(&mut rng);
        let hair = sampler.hair_shade.sample(&mut rng);
        let mouth = sampler.mouth_curve.sample(&mut rng);
        let mut eye = sampler.eyewear.sample(&mut rng);
        let nuisance: u64 = rng.random();
        let attributed = match (split, sampler.eyewear_split) {
            (Some(k), Some(s)) => {
                if index < k {
                    eye = s.attributed.sample(&mut rng);
                }
                index < k
            }
            _ => eye >= sampler.attributed_threshold,
        };
        let attributes = AttributeConfig::new(face, hair, mouth, eye, nuisance)?;
        images.push(render_sample(&attributes, resolution)?.requantized());
        records.push(SampleRecord {
            index,
            file: format!("images/{index:06}.png"),
            attributes,
            attributed,
        });
    }
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        sample_count: n,
        resolution,
        seed,
        sampler: sampler.clone(),
        region_masks: RegionMasks::new(resolution),
        records,
        digest: content_digest(&images),
    };
    Ok(Dataset { manifest, images })
}

/// Render and store a dataset under `dir` (`manifest.json` plus `images/*.png`).
pub fn generate_dataset(
    n: usize,
    seed: u64,
    sampler: &AttributeSampler,
    resolution: usize,
    dir: &Path,
) -> Result<Dataset> {
    let ds = render_dataset(n, seed, sampler, resolution)?;
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for (rec, img) in ds.manifest.records.iter().zip(&ds.images) {
        img.save_png(&dir.join(&rec.file))?;
    }
    let path = dir.join("manifest.json");
    let json = serde_json::to_vec_pretty(&ds.manifest)?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(ds)
}

/// Load a stored dataset and check its images against the manifest digest.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "manifest schema {} unsupported (expected {MANIFEST_SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    if manifest.records.len() != manifest.sample_count {
        return Err(Error::Config(format!(
            "manifest lists {} records for {} samples",
            manifest.records.len(),
            manifest.sample_count
        )));
    }
    let images = manifest
        .records
        .iter()
        .map(|r| ImageTensor::load_png(&dir.join(&r.file)))
        .collect::<Result<Vec<_>>>()?;
    let actual = content_digest(&images);
    if actual != manifest.digest {
        return Err(Error::InvalidValue(format!(
            "dataset digest {actual} does not match manifest {}",
            manifest.digest
        )));
    }
    Ok(Dataset { manifest, images })
}

impl DatasetManifest {
    /// Re-render every record and compare against the stored digest.
    pub fn verify_render(&self) -> Result<bool> {
        let images = self
            .records
            .iter()
            .map(|r| render_sample(&r.attributes, self.resolution).map(|i| i.requantized()))
            .collect::<Result<Vec<_>>>()?;
        Ok(content_digest(&images) == self.digest)
    }
}
