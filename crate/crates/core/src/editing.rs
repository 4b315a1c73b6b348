//! Attribute directions from reference pairs, latent edits along them, and the
//! projection analysis that yields per-class statistics and safe edit ranges.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{EncoderModel, LatentVector};
use crate::stats::{mean, sample_std};
use crate::tensor::{Real, Tensor};

const DEGENERATE_PAIR: f64 = 1e-12;
const DEGENERATE_AVERAGE: f64 = 1e-9;
const UNIT_TOLERANCE: f64 = 1e-9;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("latent dimension {a} vs direction dimension {b}")));
    }
    Ok(())
}

/// A latent direction for one attribute. `raw` is `(z2 - z1) / |z2 - z1|^2`; `unit`
/// is `raw / |raw|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeDirection {
    pub dimension: usize,
    pub raw: LatentVector,
    pub unit: LatentVector,
    /// Reference pair identifiers, or `average-of-N`.
    pub provenance: String,
    pub attribute: String,
    /// Identifier of the encoder/generator pair whose latent space this lives in.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

pub fn attribute_direction(z1: &LatentVector, z2: &LatentVector) -> Result<AttributeDirection> {
    check_dims(z1.dim(), z2.dim())?;
    let (a, b) = (z1.as_slice(), z2.as_slice());
    if a.iter().zip(b).all(|(x, y)| (x - y).abs() <= DEGENERATE_PAIR) {
        return Err(Error::DegeneratePair);
    }
    let delta: Vec<f64> = b.iter().zip(a).map(|(y, x)| y - x).collect();
    let sq = dot(&delta, &delta);
    let raw: Vec<f64> = delta.iter().map(|v| v / sq).collect();
    let n = dot(&raw, &raw).sqrt();
    let unit = raw.iter().map(|v| v / n).collect();
    Ok(AttributeDirection {
        dimension: z1.dim(),
        raw: LatentVector::new(raw)?,
        unit: LatentVector::new(unit)?,
        provenance: "pair".into(),
        attribute: String::new(),
        model: None,
    })
}

/// Mean of the unit forms, renormalized; `raw` equals the result.
pub fn average_direction(directions: &[AttributeDirection]) -> Result<AttributeDirection> {
    let first = directions.first().ok_or_else(|| Error::Empty("no directions to average".into()))?;
    let d = first.dimension;
    let mut acc = vec![0.0; d];
    for dir in directions {
        check_dims(dir.dimension, d)?;
        for (a, v) in acc.iter_mut().zip(dir.unit.as_slice()) {
            *a += v;
        }
    }
    let n = directions.len() as f64;
    let acc: Vec<f64> = acc.iter().map(|v| v / n).collect();
    let norm = dot(&acc, &acc).sqrt();
    if norm < DEGENERATE_AVERAGE {
        return Err(Error::DegenerateAverage(norm));
    }
    let unit = LatentVector::new(acc.iter().map(|v| v / norm).collect())?;
    let same_tag = directions.iter().all(|x| x.attribute == first.attribute);
    Ok(AttributeDirection {
        dimension: d,
        raw: unit.clone(),
        unit,
        provenance: format!("average-of-{}", directions.len()),
        attribute: if same_tag { first.attribute.clone() } else { String::new() },
        model: directions.iter().all(|x| x.model == first.model).then(|| first.model.clone()).flatten(),
    })
}

impl AttributeDirection {
    pub fn with_attribute(mut self, tag: impl Into<String>) -> Self {
        self.attribute = tag.into();
        self
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }

    pub fn with_model(mut self, model: impl Into<String>) -> Self {
        self.model = Some(model.into());
        self
    }

    pub fn raw_norm(&self) -> f64 {
        self.raw.norm()
    }

    /// The edit vector: `unit` when `use_unit`, else `raw`.
    pub fn step(&self, use_unit: bool) -> &LatentVector {
        if use_unit {
            &self.unit
        } else {
            &self.raw
        }
    }

    /// Check the stored invariants (after deserialization, for instance).
    pub fn validate(&self) -> Result<()> {
        if self.raw.dim() != self.dimension || self.unit.dim() != self.dimension {
            return Err(Error::Shape(format!(
                "direction declares {} dimensions, raw has {}, unit has {}",
                self.dimension,
                self.raw.dim(),
                self.unit.dim()
            )));
        }
        if (self.unit.norm() - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::InvalidValue(format!("unit direction has norm {}", self.unit.norm())));
        }
        let scale = dot(self.raw.as_slice(), self.unit.as_slice());
        let parallel = self
            .raw
            .as_slice()
            .iter()
            .zip(self.unit.as_slice())
            .all(|(r, u)| (r - scale * u).abs() <= UNIT_TOLERANCE * scale.abs().max(1.0));
        if scale <= 0.0 || !parallel {
            return Err(Error::InvalidValue("raw is not a positive multiple of unit".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let d: Self = serde_json::from_str(s)?;
        d.validate()?;
        Ok(d)
    }
}

/// `z + k * raw` (or `k * unit` with `use_unit`).
pub fn edit_latent(z: &LatentVector, d: &AttributeDirection, k: f64, use_unit: bool) -> Result<LatentVector> {
    check_dims(z.dim(), d.dimension)?;
    if !k.is_finite() {
        return Err(Error::InvalidValue(format!("edit strength {k}")));
    }
    LatentVector::new(
        z.as_slice()
            .iter()
            .zip(d.step(use_unit).as_slice())
            .map(|(a, s)| a + k * s)
            .collect(),
    )
}

/// `<z, unit>`.
pub fn project_onto_direction(z: &LatentVector, d: &AttributeDirection) -> Result<f64> {
    check_dims(z.dim(), d.dimension)?;
    Ok(dot(z.as_slice(), d.unit.as_slice()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionStats {
    /// Unit direction the projections were taken on, when known.
    pub direction: Option<LatentVector>,
    pub mu_n: f64,
    pub sigma_n: f64,
    pub mu_a: f64,
    pub sigma_a: f64,
    pub count_neutral: usize,
    pub count_attributed: usize,
    /// `|mu_a - mu_n| / max(sigma_a, sigma_n)`.
    pub separation: f64,
}

/// Per-class mean and unbiased standard deviation.
pub fn fit_two_gaussians(neutral: &[f64], attributed: &[f64]) -> Result<ProjectionStats> {
    for (name, xs) in [("neutral", neutral), ("attributed", attributed)] {
        if xs.len() < 2 {
            return Err(Error::InvalidValue(format!(
                "{name} class has {} projections, at least 2 needed",
                xs.len()
            )));
        }
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!("{name} class has a non-finite projection")));
        }
    }
    let (mu_n, sigma_n) = (mean(neutral), sample_std(neutral));
    let (mu_a, sigma_a) = (mean(attributed), sample_std(attributed));
    if !(sigma_n > 0.0 && sigma_a > 0.0) {
        return Err(Error::InvalidValue(format!(
            "degenerate class spread (sigma_n = {sigma_n}, sigma_a = {sigma_a})"
        )));
    }
    Ok(ProjectionStats {
        direction: None,
        mu_n,
        sigma_n,
        mu_a,
        sigma_a,
        count_neutral: neutral.len(),
        count_attributed: attributed.len(),
        separation: (mu_a - mu_n).abs() / sigma_a.max(sigma_n),
    })
}

impl ProjectionStats {
    /// `[mu_n - 3 sigma_n, mu_a + 3 sigma_a]`.
    pub fn band(&self) -> (f64, f64) {
        (self.mu_n - 3.0 * self.sigma_n, self.mu_a + 3.0 * self.sigma_a)
    }
}

/// Edit strengths that keep `project(edit(z_p, d, k))` inside [`ProjectionStats::band`].
pub fn k_range(
    z_p: &LatentVector,
    d: &AttributeDirection,
    stats: &ProjectionStats,
    use_unit: bool,
) -> Result<(f64, f64)> {
    if stats.mu_a <= stats.mu_n {
        return Err(Error::Orientation { mu_n: stats.mu_n, mu_a: stats.mu_a });
    }
    if let Some(u) = &stats.direction {
        check_dims(u.dim(), d.dimension)?;
        if u.as_slice().iter().zip(d.unit.as_slice()).any(|(a, b)| (a - b).abs() > UNIT_TOLERANCE) {
            return Err(Error::InvalidValue("statistics were computed on a different direction".into()));
        }
    }
    let p = project_onto_direction(z_p, d)?;
    let speed = if use_unit { 1.0 } else { d.raw_norm() };
    let (lo, hi) = stats.band();
    Ok(((lo - p) / speed, (hi - p) / speed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count_neutral: usize,
    pub count_attributed: usize,
}

/// Equal-width bins over the combined range of both classes.
pub fn projection_histogram(neutral: &[f64], attributed: &[f64], bins: usize) -> Result<Vec<HistogramBin>> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let all = neutral.iter().chain(attributed);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Empty("no finite projections to bin".into()));
    }
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            bin_lo: lo + i as f64 * width,
            bin_hi: if i + 1 == bins { lo + bins as f64 * width } else { lo + (i + 1) as f64 * width },
            count_neutral: 0,
            count_attributed: 0,
        })
        .collect();
    let index = |v: f64| (((v - lo) / width) as usize).min(bins - 1);
    for &v in neutral {
        out[index(v)].count_neutral += 1;
    }
    for &v in attributed {
        out[index(v)].count_attributed += 1;
    }
    Ok(out)
}

pub fn histogram_csv(bins: &[HistogramBin]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for b in bins {
        w.serialize(b).map_err(|e| Error::InvalidValue(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidValue(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidValue(format!("csv: {e}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeAnalysis {
    pub stats: ProjectionStats,
    pub histogram: Vec<HistogramBin>,
    pub neutral_projections: Vec<f64>,
    pub attributed_projections: Vec<f64>,
}

pub const DEFAULT_HISTOGRAM_BINS: usize = 30;

/// Encode every image (inference mode), project onto `d`, and fit per-class statistics.
pub fn analyze_attribute<T: Real>(
    encoder: &EncoderModel<T>,
    images: &Tensor<T>,
    labels: &[bool],
    d: &AttributeDirection,
    bins: usize,
) -> Result<AttributeAnalysis> {
    if images.batch() != labels.len() {
        return Err(Error::Shape(format!("{} images but {} labels", images.batch(), labels.len())));
    }
    let n_attr = labels.iter().filter(|l| **l).count();
    if n_attr == 0 || n_attr == labels.len() {
        return Err(Error::Empty("analysis needs both neutral and attributed images".into()));
    }
    let latents = encode_all(encoder, images)?;
    let (mut neutral, mut attributed) = (Vec::new(), Vec::new());
    for (z, &l) in latents.iter().zip(labels) {
        let p = project_onto_direction(z, d)?;
        if l {
            attributed.push(p);
        } else {
            neutral.push(p);
        }
    }
    let mut stats = fit_two_gaussians(&neutral, &attributed)?;
    stats.direction = Some(d.unit.clone());
    let histogram = projection_histogram(&neutral, &attributed, bins)?;
    Ok(AttributeAnalysis { stats, histogram, neutral_projections: neutral, attributed_projections: attributed })
}

/// Inference-mode encoding in fixed-size chunks.
pub fn encode_all<T: Real>(encoder: &EncoderModel<T>, images: &Tensor<T>) -> Result<Vec<LatentVector>> {
    let mut out = Vec::with_capacity(images.batch());
    for s in (0..images.batch()).step_by(256) {
        let chunk = images.slice_rows(s, (s + 256).min(images.batch()));
        out.extend(LatentVector::unbatch(&encoder.encode(&chunk)?)?);
    }
    Ok(out)
}

/// Pairwise cosine similarities of unit directions (upper triangle).
pub fn pairwise_cosines(directions: &[AttributeDirection]) -> Vec<f64> {
    let mut out = Vec::new();
    for (i, a) in directions.iter().enumerate() {
        for b in &directions[i + 1..] {
            out.push(dot(a.unit.as_slice(), b.unit.as_slice()));
        }
    }
    out
}
