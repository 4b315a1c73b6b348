//! Reconstruction scoring: encode, regenerate, and compare against the originals.

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::metrics::{mean_image, score_pairs, MetricsReport, MetricsRow};
use crate::models::{EncoderModel, LatentGenerator};
use crate::tensor::Real;

pub const MEAN_IMAGE_BASELINE: &str = "mean-image";

const CHUNK: usize = 128;

/// `g(e(x))` for every image, in order.
pub fn reconstruct<T: Real, G: LatentGenerator<T>>(
    encoder: &EncoderModel<T>,
    generator: &G,
    images: &[ImageTensor],
) -> Result<Vec<ImageTensor>> {
    let first = images.first().ok_or_else(|| Error::Empty("no images to reconstruct".into()))?;
    let res = encoder.resolution();
    if (first.height(), first.width()) != (res, res) || generator.image_shape() != (res, res) {
        return Err(Error::Shape(format!(
            "images are {}x{}, encoder takes {res}px, generator makes {:?}",
            first.height(),
            first.width(),
            generator.image_shape()
        )));
    }
    if encoder.latent_dim() != generator.latent_dim() {
        return Err(Error::Shape(format!(
            "encoder emits {} latents, generator takes {}",
            encoder.latent_dim(),
            generator.latent_dim()
        )));
    }
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let x = ImageTensor::stack(chunk)?.cast::<T>();
        let y = generator.generate(&encoder.encode(&x)?)?;
        out.extend(ImageTensor::unstack(&y.cast::<f32>())?);
    }
    Ok(out)
}

/// Score the encoder/generator pipeline and the mean-image baseline on `images`. The
/// baseline reconstructs every image as the pixelwise mean of `mean_reference`.
pub fn evaluate_reconstructions<T: Real, G: LatentGenerator<T>>(
    model_name: &str,
    encoder: &EncoderModel<T>,
    generator: &G,
    dataset_digest: &str,
    images: &[ImageTensor],
    mean_reference: &[ImageTensor],
) -> Result<MetricsReport> {
    let recon = reconstruct(encoder, generator, images)?;
    let rows = vec![score_pairs(model_name, images, &recon)?, mean_image_baseline(mean_reference, images)?];
    Ok(MetricsReport::new(dataset_digest, rows))
}

pub fn mean_image_baseline(mean_reference: &[ImageTensor], images: &[ImageTensor]) -> Result<MetricsRow> {
    let m = mean_image(mean_reference)?;
    score_pairs(MEAN_IMAGE_BASELINE, images, &vec![m; images.len()])
}
