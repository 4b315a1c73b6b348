//! Procedural face-like images with continuously parameterized attributes, plus
//! an analytic oracle that reads the attributes back from pixels.

mod dataset;
mod render;

pub use dataset::{
    generate_dataset, load_dataset, render_dataset, AttributeSampler, Dataset, DatasetManifest,
    Distribution, EyewearSplit, SampleRecord, MANIFEST_SCHEMA_VERSION,
};
pub use render::{Dual4, RegionMasks, Rect, Scalar};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use render::*;

pub const SUPPORTED_RESOLUTIONS: [usize; 2] = [16, 32];

/// Names of the four continuous attributes in their canonical order.
pub const ATTRIBUTE_NAMES: [&str; 4] = ["face_size", "hair_shade", "mouth_curve", "eyewear"];

pub fn check_resolution(resolution: usize) -> Result<()> {
    if SUPPORTED_RESOLUTIONS.contains(&resolution) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "resolution {resolution} not supported (use 16 or 32)"
        )))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeConfig {
    face_size: f64,
    hair_shade: f64,
    mouth_curve: f64,
    eyewear: f64,
    nuisance_seed: u64,
}

impl AttributeConfig {
    pub fn new(
        face_size: f64,
        hair_shade: f64,
        mouth_curve: f64,
        eyewear: f64,
        nuisance_seed: u64,
    ) -> Result<Self> {
        let a = Self { face_size, hair_shade, mouth_curve, eyewear, nuisance_seed };
        a.validate()?;
        Ok(a)
    }

    /// Midpoint of every range.
    pub fn neutral(nuisance_seed: u64) -> Self {
        Self { face_size: 0.5, hair_shade: 0.5, mouth_curve: 0.0, eyewear: 0.5, nuisance_seed }
    }

    pub fn from_array(v: [f64; 4], nuisance_seed: u64) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3], nuisance_seed)
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [(0.0, 1.0), (0.0, 1.0), (-1.0, 1.0), (0.0, 1.0)];
        for ((name, v), (lo, hi)) in ATTRIBUTE_NAMES.iter().zip(self.as_array()).zip(ranges) {
            if !(lo..=hi).contains(&v) {
                return Err(Error::InvalidValue(format!("{name} = {v} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn face_size(&self) -> f64 {
        self.face_size
    }
    pub fn hair_shade(&self) -> f64 {
        self.hair_shade
    }
    pub fn mouth_curve(&self) -> f64 {
        self.mouth_curve
    }
    pub fn eyewear(&self) -> f64 {
        self.eyewear
    }
    pub fn nuisance_seed(&self) -> u64 {
        self.nuisance_seed
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.face_size, self.hair_shade, self.mouth_curve, self.eyewear]
    }
}

pub fn render_sample(attrs: &AttributeConfig, resolution: usize) -> Result<ImageTensor> {
    check_resolution(resolution)?;
    attrs.validate()?;
    let px = render_unit(attrs.as_array(), attrs.nuisance_seed, resolution);
    let data = px.into_iter().map(|v| (2.0 * v - 1.0) as f32).collect();
    ImageTensor::from_clamped(resolution, resolution, data)
}

/// Render with forward-mode derivatives: per pixel value in [-1, 1] and its gradient
/// with respect to (face_size, hair_shade, mouth_curve, eyewear).
pub fn render_with_gradient(
    attrs: [f64; 4],
    nuisance_seed: u64,
    resolution: usize,
) -> Result<Vec<Dual4>> {
    check_resolution(resolution)?;
    let vars = [0, 1, 2, 3].map(|i| Dual4::var(attrs[i], i));
    Ok(render_unit(vars, nuisance_seed, resolution)
        .into_iter()
        .map(|p| p.scale(2.0) - Dual4::c(1.0))
        .collect())
}

/// Attribute values read back from pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeEstimate {
    pub face_size: f64,
    pub hair_shade: f64,
    pub mouth_curve: f64,
    pub eyewear: f64,
    /// Set when the image does not look like a rendered face (skin region off by more
    /// than [`SKIN_TOLERANCE`]); estimates are then reported at their range minima.
    pub low_confidence: bool,
}

impl AttributeEstimate {
    pub fn as_array(&self) -> [f64; 4] {
        [self.face_size, self.hair_shade, self.mouth_curve, self.eyewear]
    }

    fn minimum() -> Self {
        Self { face_size: 0.0, hair_shade: 0.0, mouth_curve: -1.0, eyewear: 0.0, low_confidence: true }
    }
}

pub const SKIN_TOLERANCE: f64 = 0.15;

pub fn measure_attributes(img: &ImageTensor) -> Result<AttributeEstimate> {
    let res = img.height();
    if img.width() != res {
        return Err(Error::Config(format!("image is {}x{}, expected square", res, img.width())));
    }
    check_resolution(res)?;
    let m = RegionMasks::new(res);

    let skin_err = m
        .skin
        .pixels()
        .map(|(r, c)| img.unit(r, c) - skin(res, r, c))
        .sum::<f64>()
        / m.skin.area() as f64;
    if skin_err.abs() > SKIN_TOLERANCE {
        return Ok(AttributeEstimate::minimum());
    }

    let [face, hair, mouth, eyewear] = raw_estimates(res, &m, |r, c| img.unit(r, c));
    Ok(AttributeEstimate {
        face_size: face.clamp(0.0, 1.0),
        hair_shade: hair.clamp(0.0, 1.0),
        mouth_curve: mouth.clamp(-1.0, 1.0),
        eyewear: eyewear.clamp(0.0, 1.0),
        low_confidence: false,
    })
}

/// Unclamped attribute estimates from `[0, 1]` pixel values. Every estimate is an
/// affine function of the pixels, exact on rendered images.
fn raw_estimates(res: usize, m: &RegionMasks, unit: impl Fn(usize, usize) -> f64) -> [f64; 4] {
    let hair = m.hair.pixels().map(|(r, c)| unit(r, c)).sum::<f64>() / m.hair.area() as f64;

    let face_area: usize = m.face_size.iter().map(Rect::area).sum();
    let face = m
        .face_size
        .iter()
        .flat_map(Rect::pixels)
        .map(|(r, c)| {
            let bg = BACKGROUND + light(res, c);
            (unit(r, c) - bg) / (skin(res, r, c) - bg)
        })
        .sum::<f64>()
        / face_area as f64;

    // Eyewear blends each eye-band pixel from its bare value toward the bar intensity.
    let bare = render_unit([0.5, 0.5, 0.0, 0.0], 0, res);
    let (mut num, mut den) = (0.0, 0.0);
    for (r, c) in m.eye_band.pixels() {
        let base = bare[r * res + c];
        num += base - unit(r, c);
        den += base - (BAR + light(res, c));
    }
    let eyewear = num / den;

    // Stroke darkness above the midline gives the stroke center per column; the curve
    // is the least-squares amplitude of the known vertical profile.
    let mid = m.mouth_mid();
    let thick = MOUTH_THICKNESS * res as f64;
    let amp = MOUTH_AMPLITUDE * res as f64;
    let (mut pc, mut pp) = (0.0, 0.0);
    for c in m.mouth.c0..m.mouth.c1 {
        let upper: f64 = (m.mouth.r0..mid as usize)
            .map(|r| {
                let face = skin(res, r, c);
                (face - unit(r, c)) / (face - (MOUTH + light(res, c)))
            })
            .sum();
        let offset = thick / 2.0 - upper;
        let p = mouth_profile(res, c);
        pc += p * offset;
        pp += p * p;
    }
    let mouth = pc / (amp * pp);
    [face, hair, mouth, eyewear]
}

/// The attribute measurement as an explicit affine map on `[-1, 1]` pixels, with the
/// mouth curve rescaled to `[0, 1]`: `p = W x + b` gives (face_size, hair_shade,
/// (mouth_curve + 1) / 2, eyewear) for any rendered image.
#[derive(Clone, Debug)]
pub struct AttributeReadout {
    pub resolution: usize,
    /// Row-major `4 x (resolution * resolution)`.
    pub weights: Vec<f64>,
    pub bias: [f64; 4],
}

pub fn attribute_readout(resolution: usize) -> Result<AttributeReadout> {
    check_resolution(resolution)?;
    let m = RegionMasks::new(resolution);
    let pixels = resolution * resolution;
    let rescale = |v: [f64; 4]| [v[0], v[1], (v[2] + 1.0) / 2.0, v[3]];
    let bias = rescale(raw_estimates(resolution, &m, |_, _| 0.5));
    let mut weights = vec![0.0; 4 * pixels];
    for j in 0..pixels {
        let probe = rescale(raw_estimates(resolution, &m, |r, c| {
            if r * resolution + c == j { 1.0 } else { 0.5 }
        }));
        for k in 0..4 {
            weights[k * pixels + j] = probe[k] - bias[k];
        }
    }
    Ok(AttributeReadout { resolution, weights, bias })
}

impl AttributeReadout {
    pub fn apply(&self, img: &ImageTensor) -> Result<[f64; 4]> {
        if img.height() != self.resolution || img.width() != self.resolution {
            return Err(Error::Shape(format!(
                "readout for {}px applied to a {}x{} image",
                self.resolution,
                img.height(),
                img.width()
            )));
        }
        let n = self.resolution * self.resolution;
        Ok([0, 1, 2, 3].map(|k| {
            self.bias[k]
                + self.weights[k * n..(k + 1) * n]
                    .iter()
                    .zip(img.data())
                    .map(|(w, &x)| w * x as f64)
                    .sum::<f64>()
        }))
    }
}
