//! Fixtures shared by the benchmarks.

use crg_core::image::ImageTensor;
use crg_core::models::{generator_architecture, GeneratorModel};
use crg_core::synthdata::{render_sample, AttributeConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A rendered face with mid-range attributes.
pub fn face(resolution: usize) -> ImageTensor {
    let attrs = AttributeConfig::new(0.5, 0.4, 0.3, 0.6, 11).expect("valid attributes");
    render_sample(&attrs, resolution).expect("supported resolution")
}

/// A randomly initialised generator with the default 32px widths.
pub fn generator(latent_dim: usize) -> GeneratorModel<f32> {
    let arch = generator_architecture(latent_dim, 32, &[64, 32, 16, 8]).expect("valid architecture");
    GeneratorModel::new(arch, &mut ChaCha8Rng::seed_from_u64(1)).expect("generator")
}
