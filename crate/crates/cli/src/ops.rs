//! Operations shared by the command line and the HTTP service.

use anyhow::{bail, Context, Result};
use crg_core::editing::{
    analyze_attribute, attribute_direction, average_direction, edit_latent, encode_all, AttributeAnalysis,
    AttributeDirection,
};
use crg_core::image::ImageTensor;
use crg_core::models::{EncoderModel, GeneratorModel, LatentGenerator, LatentVector};
use crg_core::synthdata::{load_dataset, Dataset};

use crate::workspace::{artifact_stem, sha256_hex, write_new, ModelPairInfo, Workspace, Written};

/// A generator/encoder pair held in memory. Never mutated once loaded.
pub struct LoadedPair {
    pub info: ModelPairInfo,
    pub generator: GeneratorModel<f32>,
    pub encoder: EncoderModel<f32>,
}

impl LoadedPair {
    pub fn load(ws: &Workspace, info: ModelPairInfo) -> Result<Self> {
        let (generator, encoder) = ws.load_pair(&info)?;
        Ok(Self { info, generator, encoder })
    }

    fn check_image(&self, img: &ImageTensor) -> Result<()> {
        let r = self.info.resolution;
        if (img.height(), img.width()) != (r, r) {
            return Err(crg_core::Error::Shape(format!(
                "image is {}x{}, model {} works at {r}x{r}",
                img.height(),
                img.width(),
                self.info.id
            ))
            .into());
        }
        Ok(())
    }

    pub fn check_latent(&self, z: &LatentVector) -> Result<()> {
        if z.dim() != self.info.latent_dim {
            return Err(crg_core::Error::Shape(format!(
                "latent has {} components, model {} uses {}",
                z.dim(),
                self.info.id,
                self.info.latent_dim
            ))
            .into());
        }
        Ok(())
    }

    pub fn encode(&self, img: &ImageTensor) -> Result<LatentVector> {
        self.check_image(img)?;
        let mut zs = encode_all(&self.encoder, &ImageTensor::stack(std::slice::from_ref(img))?)?;
        Ok(zs.remove(0))
    }

    pub fn encode_many(&self, imgs: &[ImageTensor]) -> Result<Vec<LatentVector>> {
        for img in imgs {
            self.check_image(img)?;
        }
        Ok(encode_all(&self.encoder, &ImageTensor::stack(imgs)?)?)
    }

    pub fn render(&self, z: &LatentVector) -> Result<ImageTensor> {
        Ok(self.render_many(std::slice::from_ref(z))?.remove(0))
    }

    /// One generator call per latent, so a frame never depends on its batch-mates.
    pub fn render_many(&self, zs: &[LatentVector]) -> Result<Vec<ImageTensor>> {
        let mut out = Vec::with_capacity(zs.len());
        for z in zs {
            self.check_latent(z)?;
            let x = self.generator.generate(&LatentVector::batch::<f32>(std::slice::from_ref(z))?)?;
            out.extend(ImageTensor::unstack(&x)?);
        }
        Ok(out)
    }

    /// Reject directions recorded against another model pair.
    pub fn check_direction(&self, d: &AttributeDirection) -> Result<()> {
        if let Some(m) = &d.model {
            if *m != self.info.id {
                return Err(crg_core::Error::InvalidValue(format!(
                    "direction belongs to model {m}, not {}",
                    self.info.id
                ))
                .into());
            }
        }
        if d.dimension != self.info.latent_dim {
            return Err(crg_core::Error::Shape(format!(
                "direction has {} components, model {} uses {}",
                d.dimension, self.info.id, self.info.latent_dim
            ))
            .into());
        }
        Ok(())
    }

    /// Direction from reference pairs (averaged when there is more than one).
    pub fn direction(
        &self,
        neutral: &[ImageTensor],
        attributed: &[ImageTensor],
        attribute: &str,
        labels: &[String],
    ) -> Result<AttributeDirection> {
        if neutral.len() != attributed.len() || neutral.is_empty() {
            bail!("need matching neutral and attributed references, got {} and {}", neutral.len(), attributed.len());
        }
        let zn = self.encode_many(neutral)?;
        let za = self.encode_many(attributed)?;
        let mut per_pair = Vec::with_capacity(zn.len());
        for (i, (a, b)) in zn.iter().zip(&za).enumerate() {
            let tag = labels.get(i).cloned().unwrap_or_else(|| format!("pair-{i}"));
            per_pair.push(attribute_direction(a, b)?.with_provenance(tag));
        }
        let d = if per_pair.len() == 1 { per_pair.remove(0) } else { average_direction(&per_pair)? };
        Ok(d.with_attribute(attribute).with_model(self.info.id.clone()))
    }

    /// Apply `(direction, k)` edits in order.
    pub fn apply_edits(&self, z: &LatentVector, edits: &[(&AttributeDirection, f64)], use_unit: bool) -> Result<LatentVector> {
        self.check_latent(z)?;
        let mut z = z.clone();
        for (d, k) in edits {
            self.check_direction(d)?;
            z = edit_latent(&z, d, *k, use_unit)?;
        }
        Ok(z)
    }

    pub fn analyze(&self, dataset: &Dataset, d: &AttributeDirection, bins: usize) -> Result<AttributeAnalysis> {
        self.check_direction(d)?;
        if dataset.manifest.resolution != self.info.resolution {
            return Err(crg_core::Error::Shape(format!(
                "dataset is {}px, model {} works at {}px",
                dataset.manifest.resolution, self.info.id, self.info.resolution
            ))
            .into());
        }
        let x = ImageTensor::stack(&dataset.images)?;
        Ok(analyze_attribute(&self.encoder, &x, &dataset.labels(), d, bins)?)
    }
}

/// Store a direction under `<attribute>-<digest>.json`; returns its id.
pub fn save_direction(ws: &Workspace, d: &AttributeDirection) -> Result<(String, Written)> {
    let json = d.to_json()?;
    let name = if d.attribute.is_empty() { "direction" } else { d.attribute.as_str() };
    let id = artifact_stem(name, &sha256_hex(json.as_bytes()));
    let written = write_new(&ws.directions().join(format!("{id}.json")), json.as_bytes())?;
    Ok((id, written))
}

pub fn load_direction(ws: &Workspace, reference: &str) -> Result<(String, AttributeDirection)> {
    let path = ws.direction_path(reference)?;
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let d = AttributeDirection::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or(reference).to_string();
    Ok((id, d))
}

/// Load a dataset by reference and return it with its stem.
pub fn load_workspace_dataset(ws: &Workspace, reference: &str) -> Result<(String, Dataset)> {
    let dir = ws.dataset_dir(reference)?;
    let ds = load_dataset(&dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    let stem = dir.file_name().and_then(|s| s.to_str()).unwrap_or(reference).to_string();
    Ok((stem, ds))
}

pub fn read_png(path: &std::path::Path) -> Result<ImageTensor> {
    ImageTensor::load_png(path).with_context(|| format!("reading image {}", path.display()))
}

/// A latent stored as a JSON array of numbers.
pub fn read_latent(path: &std::path::Path) -> Result<LatentVector> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading latent {}", path.display()))?;
    let v: Vec<f64> = serde_json::from_str(&text).with_context(|| format!("parsing latent {}", path.display()))?;
    Ok(LatentVector::new(v)?)
}
