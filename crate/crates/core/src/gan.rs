//! Adversarial pretraining of the generator/discriminator pair.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result};
use crate::models::{
    discriminator_architecture, generator_architecture, sample_latents, DiscriminatorModel,
    GeneratorModel, LatentGenerator,
};
use crate::nn::{softplus, softplus_grad, OptimizerKind};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanTrainConfig {
    pub latent_dim: usize,
    /// Generator channel widths from 4x4 up to full resolution.
    pub generator_widths: Vec<usize>,
    /// Discriminator channel widths from full resolution down to 4x4.
    pub discriminator_widths: Vec<usize>,
    pub feature_dim: usize,
    pub generator_lr: f64,
    pub discriminator_lr: f64,
    /// Discriminator updates per generator update.
    pub d_steps_per_g_step: usize,
    pub batch_size: usize,
    /// Number of generator updates.
    pub total_steps: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Generator steps between log records (each carries the proxy).
    pub monitor_every: usize,
    /// Samples per side for the Frechet proxy and the accuracy check.
    pub monitor_samples: usize,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            generator_widths: vec![64, 32, 16, 8],
            discriminator_widths: vec![8, 16, 32, 64],
            feature_dim: 64,
            generator_lr: 1e-4,
            discriminator_lr: 2e-4,
            d_steps_per_g_step: 2,
            batch_size: 64,
            total_steps: 20_000,
            seed: 0,
            optimizer: OptimizerKind::Adam { beta1: 0.0, beta2: 0.99, eps: 1e-8 },
            monitor_every: 500,
            monitor_samples: 256,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, lr) in [("generator_lr", self.generator_lr), ("discriminator_lr", self.discriminator_lr)] {
            if !lr.is_finite() || lr < 0.0 {
                return bad(format!("{name} = {lr} must be finite and non-negative"));
            }
        }
        if self.discriminator_lr < self.generator_lr {
            return bad(format!(
                "discriminator_lr {} is below generator_lr {}",
                self.discriminator_lr, self.generator_lr
            ));
        }
        if self.d_steps_per_g_step < 1 {
            return bad("d_steps_per_g_step must be at least 1".into());
        }
        if self.batch_size < 1 || self.total_steps < 1 || self.monitor_every < 1 {
            return bad("batch_size, total_steps and monitor_every must be at least 1".into());
        }
        if self.monitor_samples < 2 {
            return bad("monitor_samples must be at least 2".into());
        }
        if self.latent_dim < 1 || self.feature_dim < 1 {
            return bad("latent_dim and feature_dim must be at least 1".into());
        }
        Ok(())
    }
}

/// Non-saturating logistic losses:
/// `d = mean(softplus(-real)) + mean(softplus(fake))`, `g = mean(softplus(-fake))`.
pub fn adversarial_losses(real_logits: &[f64], fake_logits: &[f64]) -> Result<(f64, f64)> {
    if real_logits.is_empty() || fake_logits.is_empty() {
        return Err(Error::Empty("adversarial loss over an empty batch".into()));
    }
    if real_logits.iter().chain(fake_logits).any(|v| !v.is_finite()) {
        return Err(Error::InvalidValue("non-finite logit".into()));
    }
    let mean = |xs: &[f64], f: &dyn Fn(f64) -> f64| xs.iter().map(|&x| f(x)).sum::<f64>() / xs.len() as f64;
    let d = mean(real_logits, &|x| softplus(-x)) + mean(fake_logits, &softplus);
    let g = mean(fake_logits, &|x| softplus(-x));
    Ok((g, d))
}

/// Frechet distance between Gaussians fitted to two feature sets `[n, f]`:
/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`, covariances loaded with `1e-6 I`.
pub fn frechet_distance(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.batch() < 2 || b.batch() < 2 {
        return Err(Error::InvalidValue(format!(
            "Frechet distance needs at least 2 samples per side (got {} and {})",
            a.batch(),
            b.batch()
        )));
    }
    if a.row_len() != b.row_len() {
        return Err(Error::Shape(format!("feature widths {} and {}", a.row_len(), b.row_len())));
    }
    let (mu1, s1) = gaussian_fit(a);
    let (mu2, s2) = gaussian_fit(b);
    let root1 = sym_sqrt(&s1);
    let middle = &root1 * &s2 * &root1;
    let middle = (&middle + middle.transpose()) * 0.5;
    let cross: f64 = middle.symmetric_eigenvalues().iter().map(|&l| l.max(0.0).sqrt()).sum();
    Ok(((mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross).max(0.0))
}

fn gaussian_fit(x: &Tensor<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, f) = (x.batch(), x.row_len());
    let m = DMatrix::from_row_slice(n, f, x.data());
    let mu = DVector::from_iterator(f, m.column_iter().map(|c| c.mean()));
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    for i in 0..f {
        cov[(i, i)] += 1e-6;
    }
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Frechet distance on the discriminator's feature tap.
pub fn desk_fid_proxy<T: Real>(
    real: &Tensor<T>,
    fake: &Tensor<T>,
    discriminator: &DiscriminatorModel<T>,
) -> Result<f64> {
    if real.batch() < 2 || fake.batch() < 2 {
        return Err(Error::InvalidValue("the proxy needs at least 2 samples per side".into()));
    }
    let fa = discriminator.features(real)?.cast::<f64>();
    let fb = discriminator.features(fake)?.cast::<f64>();
    frechet_distance(&fa, &fb)
}

/// Fraction of real images with a positive logit and fake images with a negative one.
pub fn discriminator_accuracy<T: Real>(
    real: &Tensor<T>,
    fake: &Tensor<T>,
    discriminator: &DiscriminatorModel<T>,
) -> Result<f64> {
    let lr = discriminator.logits(real)?;
    let lf = discriminator.logits(fake)?;
    let hits = lr.data().iter().filter(|v| **v > T::zero()).count()
        + lf.data().iter().filter(|v| **v < T::zero()).count();
    Ok(hits as f64 / (lr.len() + lf.len()) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanLogRecord {
    /// Generator steps completed.
    pub step: usize,
    /// Mean losses since the previous record.
    pub g_loss: f64,
    pub d_loss: f64,
    pub proxy: f64,
    pub d_accuracy: f64,
    pub wall_time: f64,
}

pub struct GanOutcome {
    pub generator: GeneratorModel<f32>,
    pub discriminator: DiscriminatorModel<f32>,
    pub g_steps: usize,
    pub d_steps: usize,
    pub log: Vec<GanLogRecord>,
}

/// Shuffled passes over the dataset, reshuffled each pass.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(n: usize) -> Self {
        Self { order: (0..n).collect(), pos: n }
    }

    fn next(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..k)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { step, what: format!("{what} = {v}") })
    }
}

/// Train a generator/discriminator pair on `images` (`[n, 1, r, r]`).
///
/// Each generator update follows `d_steps_per_g_step` discriminator updates. A
/// discriminator update runs one training forward over reals and fakes together, so the
/// spectral power iteration advances exactly once per update. On a non-finite loss both
/// networks are written to `snapshot_dir` (when given) before the error is returned.
pub fn train_gan(
    images: &Tensor<f32>,
    config: &GanTrainConfig,
    snapshot_dir: Option<&Path>,
    mut on_record: impl FnMut(&GanLogRecord),
) -> Result<GanOutcome> {
    config.validate()?;
    let (n, _, res, w) = images.dims4()?;
    if res != w {
        return Err(Error::Shape(format!("images are {res}x{w}, expected square")));
    }
    if n < 2 {
        return Err(Error::Empty("GAN training needs at least 2 images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut generator = GeneratorModel::<f32>::new(
        generator_architecture(config.latent_dim, res, &config.generator_widths)?,
        &mut rng,
    )?;
    let mut discriminator = DiscriminatorModel::<f32>::new(
        discriminator_architecture(res, &config.discriminator_widths, config.feature_dim)?,
        &mut rng,
    )?;
    let mut g_opt = config.optimizer.build::<f32>(config.generator_lr);
    let mut d_opt = config.optimizer.build::<f32>(config.discriminator_lr);

    let mut monitor_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6d6f_6e69_746f_72);
    let monitor_z = sample_latents::<f32>(config.monitor_samples, config.latent_dim, &mut monitor_rng);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut monitor_rng);
    idx.truncate(config.monitor_samples.min(n));
    let monitor_real = images.select(&idx);

    let snapshot = |g: &GeneratorModel<f32>, d: &DiscriminatorModel<f32>, step: usize| -> Result<()> {
        if let Some(dir) = snapshot_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let cfg = serde_json::to_value(config)?;
            save_checkpoint(g, &cfg, "", &dir.join(format!("nan-step-{step}.generator.crgc")))?;
            save_checkpoint(d, &cfg, "", &dir.join(format!("nan-step-{step}.discriminator.crgc")))?;
        }
        Ok(())
    };

    let start = Instant::now();
    let mut sampler = BatchSampler::new(n);
    let (mut g_steps, mut d_steps) = (0, 0);
    let (mut g_acc, mut d_acc, mut since) = (0.0, 0.0, 0usize);
    let mut log = Vec::new();
    let b = config.batch_size;
    while g_steps < config.total_steps {
        let mut d_loss_sum = 0.0;
        for _ in 0..config.d_steps_per_g_step {
            let real = images.select(&sampler.next(b, &mut rng));
            let z = sample_latents::<f32>(b, config.latent_dim, &mut rng);
            let (fake, _) = generator.net.forward_train(&z, &mut rng, false)?;
            let both = Tensor::concat(&[&real, &fake])?;
            let (logits, trace) = discriminator.logits_train(&both, &mut rng, true)?;
            let l: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
            let d_loss = adversarial_losses(&l[..b], &l[b..])
                .map(|(_, d)| d)
                .unwrap_or(f64::NAN);
            if let Err(e) = check_finite(g_steps, "discriminator loss", d_loss) {
                snapshot(&generator, &discriminator, g_steps)?;
                return Err(e);
            }
            let grad: Vec<f32> = l
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let g = if i < b { -softplus_grad(-x) } else { softplus_grad(x) };
                    (g / b as f64) as f32
                })
                .collect();
            let grad = Tensor::from_vec(&[2 * b, 1], grad)?;
            let (_, grads) = discriminator.backward(&trace, &grad, true)?;
            d_opt.step(discriminator.params_mut(), &grads.expect("requested"))?;
            d_steps += 1;
            d_loss_sum += d_loss;
        }

        let z = sample_latents::<f32>(b, config.latent_dim, &mut rng);
        let (fake, g_trace) = generator.net.forward_train(&z, &mut rng, true)?;
        let (logits, d_trace) = discriminator.logits_traced(&fake)?;
        let l: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
        let g_loss = l.iter().map(|&x| softplus(-x)).sum::<f64>() / b as f64;
        if let Err(e) = check_finite(g_steps, "generator loss", g_loss) {
            snapshot(&generator, &discriminator, g_steps)?;
            return Err(e);
        }
        let grad: Vec<f32> = l.iter().map(|&x| (-softplus_grad(-x) / b as f64) as f32).collect();
        let (gx, _) = discriminator.backward(&d_trace, &Tensor::from_vec(&[b, 1], grad)?, false)?;
        let (_, grads) = generator.net.backward(&g_trace, &gx, true)?;
        g_opt.step(generator.net.params_mut(), &grads.expect("requested"))?;
        g_steps += 1;

        g_acc += g_loss;
        d_acc += d_loss_sum / config.d_steps_per_g_step as f64;
        since += 1;
        if g_steps % config.monitor_every == 0 || g_steps == config.total_steps {
            let fake = generator.generate(&monitor_z)?;
            let record = GanLogRecord {
                step: g_steps,
                g_loss: g_acc / since as f64,
                d_loss: d_acc / since as f64,
                proxy: desk_fid_proxy(&monitor_real, &fake, &discriminator)?,
                d_accuracy: discriminator_accuracy(&monitor_real, &fake, &discriminator)?,
                wall_time: start.elapsed().as_secs_f64(),
            };
            on_record(&record);
            log.push(record);
            (g_acc, d_acc, since) = (0.0, 0.0, 0);
        }
    }
    Ok(GanOutcome { generator, discriminator, g_steps, d_steps, log })
}
