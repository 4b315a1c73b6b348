//! The desk-scale eyewear experiment: a labelled dataset, a direction averaged over
//! rendered reference pairs, projection statistics, k sweeps scored by the attribute
//! oracle, and reconstruction quality against the mean-image baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::editing::{
    analyze_attribute, attribute_direction, average_direction, edit_latent, encode_all, k_range,
    pairwise_cosines, AttributeDirection, ProjectionStats, DEFAULT_HISTOGRAM_BINS,
};
use crate::error::{Error, Result};
use crate::evaluation::evaluate_reconstructions;
use crate::image::ImageTensor;
use crate::metrics::MetricsReport;
use crate::models::{EncoderModel, LatentGenerator, LatentVector};
use crate::stats::{median, spearman};
use crate::synthdata::{
    measure_attributes, render_sample, AttributeConfig, AttributeSampler, Distribution, EyewearSplit,
};

pub const EYEWEAR: usize = 3;

/// Neutral faces wear almost nothing in the eye band, attributed ones a clear bar.
pub fn eyewear_sampler(attributed_fraction: f64) -> AttributeSampler {
    AttributeSampler {
        eyewear: Distribution::Uniform { lo: 0.0, hi: 0.2 },
        eyewear_split: Some(EyewearSplit {
            fraction: attributed_fraction,
            attributed: Distribution::Uniform { lo: 0.8, hi: 1.0 },
        }),
        ..Default::default()
    }
}

/// Pairs rendered with identical attributes and nuisance seed except eyewear 0 vs 1.
pub fn eyewear_reference_pairs(n: usize, seed: u64, resolution: usize) -> Result<Vec<(ImageTensor, ImageTensor)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (face, hair, mouth) = (rng.random::<f64>(), rng.random::<f64>(), rng.random_range(-1.0..=1.0));
            let nuisance: u64 = rng.random();
            let neutral = AttributeConfig::new(face, hair, mouth, 0.0, nuisance)?;
            let attributed = AttributeConfig::new(face, hair, mouth, 1.0, nuisance)?;
            Ok((
                render_sample(&neutral, resolution)?.requantized(),
                render_sample(&attributed, resolution)?.requantized(),
            ))
        })
        .collect()
}

/// One direction per reference pair, from the encoder's latents.
pub fn pair_directions(
    encoder: &EncoderModel<f32>,
    pairs: &[(ImageTensor, ImageTensor)],
) -> Result<Vec<AttributeDirection>> {
    let neutral: Vec<ImageTensor> = pairs.iter().map(|p| p.0.clone()).collect();
    let attributed: Vec<ImageTensor> = pairs.iter().map(|p| p.1.clone()).collect();
    let zn = encode_all(encoder, &ImageTensor::stack(&neutral)?)?;
    let za = encode_all(encoder, &ImageTensor::stack(&attributed)?)?;
    zn.iter()
        .zip(&za)
        .enumerate()
        .map(|(i, (a, b))| Ok(attribute_direction(a, b)?.with_provenance(format!("reference-pair-{i}"))))
        .collect()
}

/// Oracle measurements along an edit sweep of one source latent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub k_lo: f64,
    pub k_hi: f64,
    pub ks: Vec<f64>,
    /// (face_size, hair_shade, mouth_curve, eyewear) per k.
    pub measurements: Vec<[f64; 4]>,
    pub low_confidence: usize,
}

impl Sweep {
    /// Rank correlation between k and the eyewear measurement.
    pub fn eyewear_spearman(&self) -> Result<f64> {
        let eye: Vec<f64> = self.measurements.iter().map(|m| m[EYEWEAR]).collect();
        spearman(&self.ks, &eye)
    }

    /// Largest minus smallest measurement of each attribute across the sweep.
    pub fn ranges(&self) -> [f64; 4] {
        [0, 1, 2, 3].map(|j| {
            let v = self.measurements.iter().map(|m| m[j]);
            v.clone().fold(f64::NEG_INFINITY, f64::max) - v.fold(f64::INFINITY, f64::min)
        })
    }
}

/// `points` evenly spaced k over the safe range of `z_p`, each rendered and measured.
pub fn attribute_sweep<G: LatentGenerator<f32>>(
    generator: &G,
    z_p: &LatentVector,
    direction: &AttributeDirection,
    stats: &ProjectionStats,
    points: usize,
    use_unit: bool,
) -> Result<Sweep> {
    if points < 2 {
        return Err(Error::Config(format!("a sweep needs at least 2 points, got {points}")));
    }
    let (k_lo, k_hi) = k_range(z_p, direction, stats, use_unit)?;
    let ks: Vec<f64> = (0..points).map(|i| k_lo + (k_hi - k_lo) * i as f64 / (points - 1) as f64).collect();
    let zs = ks
        .iter()
        .map(|&k| edit_latent(z_p, direction, k, use_unit))
        .collect::<Result<Vec<_>>>()?;
    let images = ImageTensor::unstack(&generator.generate(&LatentVector::batch(&zs)?)?)?;
    let mut measurements = Vec::with_capacity(points);
    let mut low_confidence = 0;
    for img in &images {
        let m = measure_attributes(img)?;
        low_confidence += usize::from(m.low_confidence);
        measurements.push(m.as_array());
    }
    Ok(Sweep { k_lo, k_hi, ks, measurements, low_confidence })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditingSettings {
    pub reference_pairs: usize,
    pub reference_seed: u64,
    pub sweep_points: usize,
    pub sweep_sources: usize,
    pub use_unit: bool,
}

impl Default for EditingSettings {
    fn default() -> Self {
        Self { reference_pairs: 50, reference_seed: 17, sweep_points: 11, sweep_sources: 20, use_unit: false }
    }
}

/// Everything measured on held-out data for a trained generator/encoder pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditingReport {
    pub direction: AttributeDirection,
    pub stats: ProjectionStats,
    /// Cosines between the first five per-pair directions.
    pub pair_cosines: Vec<f64>,
    pub sweeps: Vec<Sweep>,
    pub spearman: Vec<f64>,
    /// Per off-target attribute (face_size, hair_shade, mouth_curve): median over
    /// sources of the measurement range along the sweep.
    pub median_drift: [f64; 3],
    pub low_confidence: usize,
    pub reconstruction: MetricsReport,
}

impl EditingReport {
    pub fn median_spearman(&self) -> f64 {
        median(&self.spearman)
    }
}

/// Direction from reference pairs, projection statistics on `heldout`, sweeps from its
/// first neutral images, and reconstruction scores on all of it.
pub fn evaluate_editing<G: LatentGenerator<f32>>(
    generator: &G,
    encoder: &EncoderModel<f32>,
    heldout: &[ImageTensor],
    labels: &[bool],
    mean_reference: &[ImageTensor],
    dataset_digest: &str,
    settings: &EditingSettings,
) -> Result<EditingReport> {
    let pairs = eyewear_reference_pairs(settings.reference_pairs, settings.reference_seed, encoder.resolution())?;
    let per_pair = pair_directions(encoder, &pairs)?;
    let direction = average_direction(&per_pair)?.with_attribute("eyewear");
    let pair_cosines = pairwise_cosines(&per_pair[..per_pair.len().min(5)]);

    let x = ImageTensor::stack(heldout)?;
    let analysis = analyze_attribute(encoder, &x, labels, &direction, DEFAULT_HISTOGRAM_BINS)?;
    let stats = analysis.stats;

    let sources: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| !l)
        .map(|(i, _)| i)
        .take(settings.sweep_sources)
        .collect();
    let source_images: Vec<ImageTensor> = sources.iter().map(|&i| heldout[i].clone()).collect();
    let latents = encode_all(encoder, &ImageTensor::stack(&source_images)?)?;
    let mut sweeps = Vec::with_capacity(latents.len());
    let mut spearman_values = Vec::with_capacity(latents.len());
    for z in &latents {
        let sweep = attribute_sweep(generator, z, &direction, &stats, settings.sweep_points, settings.use_unit)?;
        // A flat eyewear response has no rank order; count it as no correlation.
        spearman_values.push(sweep.eyewear_spearman().unwrap_or(0.0));
        sweeps.push(sweep);
    }
    let median_drift = [0, 1, 2].map(|j| median(&sweeps.iter().map(|s| s.ranges()[j]).collect::<Vec<_>>()));
    let low_confidence = sweeps.iter().map(|s| s.low_confidence).sum();
    let reconstruction =
        evaluate_reconstructions("crg", encoder, generator, dataset_digest, heldout, mean_reference)?;
    Ok(EditingReport {
        direction,
        stats,
        pair_cosines,
        sweeps,
        spearman: spearman_values,
        median_drift,
        low_confidence,
        reconstruction,
    })
}
