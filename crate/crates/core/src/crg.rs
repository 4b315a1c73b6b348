//! Encoder training as the inverse of a generator: each iteration descends the latent
//! cycle loss `mse(z, e(g(z)))` and then the image cycle loss `mae(x, g(e(x)))`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{encoder_architecture, sample_latents, EncoderModel, LatentGenerator};
use crate::nn::{mae, mae_grad, mse, mse_grad, Optimizer, OptimizerKind};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrgMode {
    /// Only the encoder learns; generator parameters never change.
    Fixed,
    /// Both objectives also update the generator.
    CoTrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augmentation {
    /// Rotations are drawn uniformly from `[-max, max]` degrees.
    pub max_rotation_deg: f64,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self { max_rotation_deg: 30.0, horizontal_flip: true, vertical_flip: true }
    }
}

impl Augmentation {
    pub fn none() -> Self {
        Self { max_rotation_deg: 0.0, horizontal_flip: false, vertical_flip: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrgTrainConfig {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before the learning rate halves.
    pub lr_patience: usize,
    /// Epochs without validation improvement before training stops.
    pub early_stop_patience: usize,
    pub dropout: f64,
    pub augmentation: Augmentation,
    pub mode: CrgMode,
    pub encoder_widths: Vec<usize>,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for CrgTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            rho: 0.9,
            eps: 1e-8,
            batch_size: 128,
            max_epochs: 200,
            lr_patience: 10,
            early_stop_patience: 20,
            dropout: 0.5,
            augmentation: Augmentation::default(),
            mode: CrgMode::Fixed,
            encoder_widths: vec![8, 16, 32, 64],
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl CrgTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.lr.is_finite() || self.lr < 0.0 {
            return bad(format!("lr = {} must be finite and non-negative", self.lr));
        }
        if !(0.0..1.0).contains(&self.rho) || !(self.eps > 0.0) {
            return bad("rho must be in [0, 1) and eps positive".into());
        }
        if self.early_stop_patience <= self.lr_patience {
            return bad(format!(
                "early_stop_patience {} must exceed lr_patience {}",
                self.early_stop_patience, self.lr_patience
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..=30.0).contains(&self.augmentation.max_rotation_deg) {
            return bad(format!(
                "rotation bound {} outside [0, 30] degrees",
                self.augmentation.max_rotation_deg
            ));
        }
        if self.batch_size < 1 || self.max_epochs < 1 {
            return bad("batch_size and max_epochs must be at least 1".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction {} outside (0, 1)", self.val_fraction));
        }
        Ok(())
    }

    fn optimizer(&self) -> OptimizerKind {
        OptimizerKind::RmsProp { rho: self.rho, eps: self.eps }
    }
}

/// Mean squared componentwise error over batch and dimensions.
pub fn latent_cycle_loss<T: Real>(z: &Tensor<T>, z_hat: &Tensor<T>) -> Result<f64> {
    Ok(mse(z, z_hat)?.as_f64())
}

/// Mean absolute error over batch and pixels.
pub fn image_cycle_loss<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<f64> {
    Ok(mae(x, x_hat)?.as_f64())
}

/// Optimizer state for one CRG run.
pub struct CrgOptimizers<T> {
    pub encoder: Optimizer<T>,
    /// Present only in co-trained mode.
    pub generator: Option<Optimizer<T>>,
}

impl<T: Real> CrgOptimizers<T> {
    pub fn new(config: &CrgTrainConfig) -> Self {
        Self {
            encoder: config.optimizer().build(config.lr),
            generator: (config.mode == CrgMode::CoTrained).then(|| config.optimizer().build(config.lr)),
        }
    }

    fn set_lr(&mut self, lr: f64) {
        self.encoder.set_lr(lr);
        if let Some(g) = self.generator.as_mut() {
            g.set_lr(lr);
        }
    }
}

fn non_finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { step: 0, what: format!("{what} = {v}") })
    }
}

/// One CRG iteration: update 1 on the latent cycle, then update 2 on the image cycle
/// with the already-updated encoder. The generator runs in inference mode throughout;
/// in co-trained mode its parameters also receive both updates. On a non-finite loss
/// the step is abandoned before any parameter changes for that update.
pub fn crg_train_step<T: Real, G: LatentGenerator<T>>(
    generator: &mut G,
    encoder: &mut EncoderModel<T>,
    optimizers: &mut CrgOptimizers<T>,
    z: &Tensor<T>,
    x: &Tensor<T>,
    rng: &mut dyn RngCore,
) -> Result<(f64, f64)> {
    if encoder.latent_dim() != generator.latent_dim() {
        return Err(Error::Config(format!(
            "encoder outputs {} latent dimensions, generator takes {}",
            encoder.latent_dim(),
            generator.latent_dim()
        )));
    }
    let co_train = optimizers.generator.is_some();

    let (xg, g_trace) = generator.generate_traced(z)?;
    let (z_hat, e_trace) = encoder.encode_train(&xg, rng, true)?;
    let loss_z = latent_cycle_loss(z, &z_hat)?;
    non_finite("latent cycle loss", loss_z)?;
    let dz = mse_grad(z, &z_hat)?;
    let (dx, e_grads) = encoder.net.backward(&e_trace, &dz, true)?;
    let g_grads = if co_train { generator.backward(&g_trace, &dx, true)?.1 } else { None };
    optimizers.encoder.step(encoder.net.params_mut(), &e_grads.expect("requested"))?;
    if let (Some(opt), Some(gr)) = (optimizers.generator.as_mut(), g_grads) {
        opt.step(generator.params_mut().expect("trainable generator"), &gr)?;
    }

    let (zx, e_trace) = encoder.encode_train(x, rng, true)?;
    let (x_hat, g_trace) = generator.generate_traced(&zx)?;
    let loss_x = image_cycle_loss(x, &x_hat)?;
    non_finite("image cycle loss", loss_x)?;
    let dxh = mae_grad(x, &x_hat)?;
    let (dzx, g_grads) = generator.backward(&g_trace, &dxh, co_train)?;
    let (_, e_grads) = encoder.net.backward(&e_trace, &dzx, true)?;
    optimizers.encoder.step(encoder.net.params_mut(), &e_grads.expect("requested"))?;
    if let (Some(opt), Some(gr)) = (optimizers.generator.as_mut(), g_grads) {
        opt.step(generator.params_mut().expect("trainable generator"), &gr)?;
    }
    Ok((loss_z, loss_x))
}

/// Rotate each image about its center by a random angle and flip it at random.
/// Bilinear sampling; samples falling outside the image take the nearest edge value.
pub fn augment<T: Real>(x: &Tensor<T>, aug: &Augmentation, rng: &mut dyn RngCore) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let mut out = x.clone();
    for i in 0..n {
        let angle = if aug.max_rotation_deg > 0.0 {
            rng.random_range(-aug.max_rotation_deg..=aug.max_rotation_deg).to_radians()
        } else {
            0.0
        };
        let hflip = aug.horizontal_flip && rng.random_bool(0.5);
        let vflip = aug.vertical_flip && rng.random_bool(0.5);
        let (sin, cos) = angle.sin_cos();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let src = x.row(i).to_vec();
        let dst = out.row_mut(i);
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for r in 0..h {
                for col in 0..w {
                    let rr = if vflip { h - 1 - r } else { r } as f64 - cy;
                    let cc = if hflip { w - 1 - col } else { col } as f64 - cx;
                    let sy = (cos * rr - sin * cc + cy).clamp(0.0, h as f64 - 1.0);
                    let sx = (sin * rr + cos * cc + cx).clamp(0.0, w as f64 - 1.0);
                    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                    let p = |y: usize, xx: usize| plane[y * w + xx].as_f64();
                    let v = (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1))
                        + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1));
                    dst[ch * h * w + r * w + col] = T::lit(v);
                }
            }
        }
    }
    Ok(out)
}

/// What the plateau schedule decided after an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlateauDecision {
    pub improved: bool,
    pub halve_lr: bool,
    pub stop: bool,
}

/// Learning-rate halving after `lr_patience` epochs without improvement (the count
/// restarts after each halving) and early stopping after `stop_patience` epochs
/// without improvement.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    lr_patience: usize,
    stop_patience: usize,
    best: f64,
    since_best: usize,
    since_change: usize,
}

impl PlateauSchedule {
    pub fn new(lr_patience: usize, stop_patience: usize) -> Self {
        Self { lr_patience, stop_patience, best: f64::INFINITY, since_best: 0, since_change: 0 }
    }

    pub fn observe(&mut self, val_loss: f64) -> PlateauDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.since_best = 0;
            self.since_change = 0;
            return PlateauDecision { improved: true, halve_lr: false, stop: false };
        }
        self.since_best += 1;
        self.since_change += 1;
        let halve_lr = self.since_change >= self.lr_patience;
        if halve_lr {
            self.since_change = 0;
        }
        PlateauDecision { improved: false, halve_lr, stop: self.since_best >= self.stop_patience }
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss_z: f64,
    pub train_loss_x: f64,
    pub val_loss_z: f64,
    pub val_loss_x: f64,
    pub lr: f64,
    pub improved: bool,
    pub wall_time: f64,
}

pub struct CrgOutcome<T: Real, G> {
    /// Encoder from the epoch with the lowest validation loss.
    pub encoder: EncoderModel<T>,
    /// Generator from that same epoch (differs from the input only when co-trained).
    pub generator: G,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub log: Vec<EpochRecord>,
}

/// Deterministic train/validation split: a seeded permutation, the first
/// `ceil(n * fraction)` indices go to validation.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n.saturating_sub(1).max(1));
    let train = idx.split_off(k);
    (train, idx)
}

fn eval_losses<T: Real, G: LatentGenerator<T>>(
    generator: &G,
    encoder: &EncoderModel<T>,
    z: &Tensor<T>,
    x: &Tensor<T>,
    batch: usize,
) -> Result<(f64, f64)> {
    let mut lz = 0.0;
    for s in (0..z.batch()).step_by(batch) {
        let zb = z.slice_rows(s, (s + batch).min(z.batch()));
        lz += latent_cycle_loss(&zb, &encoder.encode(&generator.generate(&zb)?)?)? * zb.batch() as f64;
    }
    let mut lx = 0.0;
    for s in (0..x.batch()).step_by(batch) {
        let xb = x.slice_rows(s, (s + batch).min(x.batch()));
        lx += image_cycle_loss(&xb, &generator.generate(&encoder.encode(&xb)?)?)? * xb.batch() as f64;
    }
    Ok((lz / z.batch() as f64, lx / x.batch() as f64))
}

/// Train an encoder against `generator` on `images` (`[n, 1, r, r]`).
///
/// Validation uses a seeded split of the images plus a fixed set of latents of the
/// same size; the validation loss is the sum of both cycle losses in inference mode.
/// `initial` replaces the freshly built encoder when given.
pub fn train_encoder<T: Real, G: LatentGenerator<T> + Clone>(
    generator: G,
    images: &Tensor<T>,
    config: &CrgTrainConfig,
    initial: Option<EncoderModel<T>>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<CrgOutcome<T, G>> {
    config.validate()?;
    let (n, _, h, w) = images.dims4()?;
    let (gh, gw) = generator.image_shape();
    if (h, w) != (gh, gw) {
        return Err(Error::Config(format!(
            "dataset images are {h}x{w}, generator produces {gh}x{gw}"
        )));
    }
    if n < 2 {
        return Err(Error::Empty("encoder training needs at least 2 images".into()));
    }
    let mut generator = generator;
    if config.mode == CrgMode::CoTrained && generator.params_mut().is_none() {
        return Err(Error::Config("co-trained mode needs a generator with parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut encoder = match initial {
        Some(e) => e,
        None => EncoderModel::new(
            encoder_architecture(generator.latent_dim(), h, &config.encoder_widths, config.dropout)?,
            &mut rng,
        )?,
    };
    if encoder.latent_dim() != generator.latent_dim() || encoder.resolution() != h {
        return Err(Error::Config(format!(
            "encoder ({} dims, {}px) does not match generator ({} dims, {h}px)",
            encoder.latent_dim(),
            encoder.resolution(),
            generator.latent_dim()
        )));
    }
    if generator.param_count() > 0 {
        encoder.check_capacity(generator.param_count())?;
    }

    let (train_idx, val_idx) = split_indices(n, config.val_fraction, config.seed);
    let val_x = images.select(&val_idx);
    let val_z = sample_latents::<T>(val_idx.len(), generator.latent_dim(), &mut rng);
    let mut optimizers = CrgOptimizers::new(config);
    let mut schedule = PlateauSchedule::new(config.lr_patience, config.early_stop_patience);
    let mut best = (encoder.clone(), generator.clone(), 0usize);
    let mut log = Vec::new();
    let mut lr = config.lr;
    let mut order = train_idx;
    let start = Instant::now();
    let mut epochs_run = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let (mut sz, mut sx, mut batches) = (0.0, 0.0, 0);
        for chunk in order.chunks(config.batch_size) {
            let x = augment(&images.select(chunk), &config.augmentation, &mut rng)?;
            let z = sample_latents::<T>(chunk.len(), generator.latent_dim(), &mut rng);
            let (lz, lx) = crg_train_step(&mut generator, &mut encoder, &mut optimizers, &z, &x, &mut rng)
                .map_err(|e| match e {
                    Error::NonFinite { what, .. } => Error::NonFinite { step: epoch, what },
                    other => other,
                })?;
            sz += lz;
            sx += lx;
            batches += 1;
        }
        let (vz, vx) = eval_losses(&generator, &encoder, &val_z, &val_x, config.batch_size)?;
        let decision = schedule.observe(vz + vx);
        if decision.improved {
            best = (encoder.clone(), generator.clone(), epoch);
        }
        let record = EpochRecord {
            epoch,
            train_loss_z: sz / batches as f64,
            train_loss_x: sx / batches as f64,
            val_loss_z: vz,
            val_loss_x: vx,
            lr,
            improved: decision.improved,
            wall_time: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.push(record);
        epochs_run = epoch;
        if decision.stop {
            break;
        }
        if decision.halve_lr {
            lr /= 2.0;
            optimizers.set_lr(lr);
        }
    }
    let (encoder, generator, best_epoch) = best;
    Ok(CrgOutcome { encoder, generator, best_epoch, epochs_run, log })
}
