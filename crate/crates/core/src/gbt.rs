//! Latent inversion by plain gradient descent on `z` against an image loss, optionally
//! initialized from an encoder estimate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{EncoderModel, LatentGenerator, LatentVector};
use crate::nn::{mae, mae_grad, mse, mse_grad};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageLoss {
    #[default]
    Mse,
    Mae,
}

impl ImageLoss {
    fn value<T: Real>(self, target: &Tensor<T>, pred: &Tensor<T>) -> Result<f64> {
        Ok(match self {
            ImageLoss::Mse => mse(target, pred)?,
            ImageLoss::Mae => mae(target, pred)?,
        }
        .as_f64())
    }

    fn grad<T: Real>(self, target: &Tensor<T>, pred: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            ImageLoss::Mse => mse_grad(target, pred),
            ImageLoss::Mae => mae_grad(target, pred),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GbtInit {
    /// Standard-normal draw from this seed.
    Seed(u64),
    Provided(LatentVector),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbtConfig {
    pub steps: usize,
    pub step_size: f64,
    pub init: GbtInit,
    #[serde(default)]
    pub loss: ImageLoss,
    /// Stop as soon as the loss is at or below this value.
    #[serde(default)]
    pub early_exit: Option<f64>,
}

impl Default for GbtConfig {
    fn default() -> Self {
        Self { steps: 500, step_size: 0.05, init: GbtInit::Seed(0), loss: ImageLoss::Mse, early_exit: None }
    }
}

impl GbtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("gradient inversion needs at least one step".into()));
        }
        self.validate_step_size()
    }

    fn validate_step_size(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step size {} must be positive", self.step_size)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbtRecord {
    pub step: usize,
    pub loss: f64,
    pub z_norm: f64,
    pub best_loss: f64,
}

/// One JSON object per line, in step order.
pub fn trajectory_jsonl(trajectory: &[GbtRecord]) -> Result<String> {
    let mut out = String::new();
    for r in trajectory {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GbtStatus {
    Completed,
    EarlyExit,
    /// The loss became non-finite at this step; the best earlier iterate is returned.
    NonFinite { step: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbtResult {
    /// Lowest-loss iterate seen (not necessarily the last).
    pub z_best: LatentVector,
    pub loss_best: f64,
    pub best_step: usize,
    pub status: GbtStatus,
    pub trajectory: Vec<GbtRecord>,
}

fn check_target<T: Real, G: LatentGenerator<T>>(generator: &G, target: &Tensor<T>) -> Result<()> {
    let (n, c, h, w) = target.dims4()?;
    let (gh, gw) = generator.image_shape();
    if (n, c, h, w) != (1, 1, gh, gw) {
        return Err(Error::Shape(format!("target {:?} vs generator output [1, 1, {gh}, {gw}]", target.shape())));
    }
    Ok(())
}

/// Descend the image loss in latent space for `config.steps` updates. The trajectory
/// has one record per evaluated iterate, starting with the initialization at step 0.
pub fn invert_latent_gbt<T: Real, G: LatentGenerator<T>>(
    generator: &G,
    target: &Tensor<T>,
    config: &GbtConfig,
) -> Result<GbtResult> {
    config.validate()?;
    descend(generator, target, config)
}

fn descend<T: Real, G: LatentGenerator<T>>(
    generator: &G,
    target: &Tensor<T>,
    config: &GbtConfig,
) -> Result<GbtResult> {
    config.validate_step_size()?;
    check_target(generator, target)?;
    let d = generator.latent_dim();
    let mut z: Vec<f64> = match &config.init {
        GbtInit::Seed(s) => LatentVector::sample(d, &mut ChaCha8Rng::seed_from_u64(*s)).into_vec(),
        GbtInit::Provided(z) => {
            if z.dim() != d {
                return Err(Error::Shape(format!("initial latent has {} dimensions, generator takes {d}", z.dim())));
            }
            z.as_slice().to_vec()
        }
    };
    let mut best: Option<(Vec<f64>, f64, usize)> = None;
    let mut trajectory = Vec::new();
    let mut status = GbtStatus::Completed;
    for step in 0..=config.steps {
        let zt = Tensor::from_vec(&[1, d], z.iter().map(|&v| T::lit(v)).collect())?;
        let (x, trace) = generator.generate_traced(&zt)?;
        let loss = config.loss.value(target, &x)?;
        if !loss.is_finite() {
            status = GbtStatus::NonFinite { step };
            break;
        }
        if best.as_ref().is_none_or(|b| loss < b.1) {
            best = Some((z.clone(), loss, step));
        }
        let best_loss = best.as_ref().expect("set above").1;
        trajectory.push(GbtRecord { step, loss, z_norm: z.iter().map(|v| v * v).sum::<f64>().sqrt(), best_loss });
        if config.early_exit.is_some_and(|t| loss <= t) {
            status = GbtStatus::EarlyExit;
            break;
        }
        if step == config.steps {
            break;
        }
        let (gz, _) = generator.backward(&trace, &config.loss.grad(target, &x)?, false)?;
        for (v, g) in z.iter_mut().zip(gz.data()) {
            *v -= config.step_size * g.as_f64();
        }
    }
    let (zb, loss_best, best_step) = best.ok_or(Error::NonFinite {
        step: 0,
        what: "loss at the initial latent".into(),
    })?;
    Ok(GbtResult { z_best: LatentVector::new(zb)?, loss_best, best_step, status, trajectory })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridResult {
    pub encoder_z: LatentVector,
    pub encoder_loss: f64,
    pub refined: GbtResult,
}

/// Gradient inversion started from the encoder's estimate; `config.init` is ignored.
/// Zero steps returns the encoder estimate unchanged.
pub fn invert_hybrid<T: Real, G: LatentGenerator<T>>(
    generator: &G,
    encoder: &EncoderModel<T>,
    target: &Tensor<T>,
    config: &GbtConfig,
) -> Result<HybridResult> {
    check_target(generator, target)?;
    let z = LatentVector::unbatch(&encoder.encode(target)?)?.remove(0);
    let cfg = GbtConfig { init: GbtInit::Provided(z.clone()), ..config.clone() };
    let refined = descend(generator, target, &cfg)?;
    let encoder_loss = refined.trajectory.first().map(|r| r.loss).unwrap_or(f64::NAN);
    Ok(HybridResult { encoder_z: z, encoder_loss, refined })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{encoder_architecture, LinearGenerator, OracleGenerator};
    use rand::Rng;

    fn linear(seed: u64) -> (LinearGenerator, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Identity plus a small perturbation keeps the conditioning mild.
        let a: Vec<f64> = (0..64 * 4)
            .map(|i| if i % 4 == (i / 4) % 4 && i / 4 < 4 { 1.0 } else { 0.0 } + rng.random_range(-0.1..0.1))
            .collect();
        let z0: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        (LinearGenerator::new(a, 4, (8, 8)).unwrap(), z0)
    }

    fn target_of(g: &LinearGenerator, z: &[f64]) -> Tensor<f64> {
        g.generate(&Tensor::from_vec(&[1, z.len()], z.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn config_rules() {
        assert!(GbtConfig { steps: 0, ..Default::default() }.validate().is_err());
        assert!(GbtConfig { step_size: 0.0, ..Default::default() }.validate().is_err());
        assert!(GbtConfig::default().validate().is_ok());
    }

    #[test]
    fn fixed_point_returns_init_at_zero_loss() {
        let (g, z0) = linear(1);
        let x = target_of(&g, &z0);
        let cfg = GbtConfig { steps: 20, init: GbtInit::Provided(LatentVector::new(z0.clone()).unwrap()), ..Default::default() };
        let r = invert_latent_gbt(&g, &x, &cfg).unwrap();
        assert_eq!(r.trajectory[0].loss, 0.0);
        assert_eq!(r.z_best.as_slice(), z0.as_slice());
        assert_eq!(r.best_step, 0);
        let lines = trajectory_jsonl(&r.trajectory).unwrap();
        assert_eq!(lines.lines().count(), 21);
        let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
        assert_eq!(first["step"], 0);
        assert!(first["z_norm"].as_f64().unwrap() > 0.0);
    }

    #[test]
    fn best_so_far_never_increases_and_is_returned() {
        let (g, z0) = linear(2);
        let x = target_of(&g, &z0);
        // An oversized step makes the raw loss oscillate and grow.
        let cfg = GbtConfig { steps: 30, step_size: 200.0, init: GbtInit::Seed(3), ..Default::default() };
        let r = invert_latent_gbt(&g, &x, &cfg).unwrap();
        assert!(r.trajectory.windows(2).all(|w| w[1].best_loss <= w[0].best_loss));
        let min = r.trajectory.iter().map(|t| t.loss).fold(f64::INFINITY, f64::min);
        assert_eq!(r.loss_best, min);
        assert!(r.trajectory.last().unwrap().loss > r.loss_best);
    }

    #[test]
    fn tiny_steps_barely_move() {
        let (g, z0) = linear(4);
        let x = target_of(&g, &z0);
        let cfg = GbtConfig { steps: 10, step_size: 1e-8, init: GbtInit::Seed(5), ..Default::default() };
        let r = invert_latent_gbt(&g, &x, &cfg).unwrap();
        let start = LatentVector::sample(4, &mut ChaCha8Rng::seed_from_u64(5));
        let moved: f64 = r.z_best.as_slice().iter().zip(start.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(moved < 1e-6);
    }

    #[test]
    fn early_exit_stops_at_threshold() {
        let (g, z0) = linear(6);
        let x = target_of(&g, &z0);
        let cfg = GbtConfig { steps: 5000, step_size: 2.0, init: GbtInit::Seed(1), early_exit: Some(1e-6), ..Default::default() };
        let r = invert_latent_gbt(&g, &x, &cfg).unwrap();
        assert_eq!(r.status, GbtStatus::EarlyExit);
        assert!(r.loss_best <= 1e-6);
        assert!(r.trajectory.len() < 5001);
    }

    #[test]
    fn seeds_on_a_nonlinear_generator_both_finish() {
        let g = OracleGenerator::new(4, 16).unwrap();
        let x = LatentGenerator::<f64>::generate(&g, &Tensor::from_vec(&[1, 4], vec![0.3, -0.5, 1.0, 0.2]).unwrap()).unwrap();
        for seed in [1, 2] {
            let cfg = GbtConfig { steps: 50, step_size: 1.0, init: GbtInit::Seed(seed), loss: ImageLoss::Mae, ..Default::default() };
            let r = invert_latent_gbt(&g, &x, &cfg).unwrap();
            assert!(r.loss_best.is_finite());
            assert_eq!(r.status, GbtStatus::Completed);
        }
    }

    #[test]
    fn hybrid_with_zero_steps_is_the_encoder_estimate() {
        let g = OracleGenerator::new(4, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = EncoderModel::<f64>::new(encoder_architecture(4, 16, &[4], 0.5).unwrap(), &mut rng).unwrap();
        let x = LatentGenerator::<f64>::generate(&g, &Tensor::from_vec(&[1, 4], vec![0.3, -0.5, 1.0, 0.2]).unwrap()).unwrap();
        let want = LatentVector::unbatch(&e.encode(&x).unwrap()).unwrap().remove(0);
        let cfg = GbtConfig { steps: 0, ..Default::default() };
        let h = invert_hybrid(&g, &e, &x, &cfg).unwrap();
        assert_eq!(h.refined.z_best, want);
        assert_eq!(h.encoder_z, want);
        let h = invert_hybrid(&g, &e, &x, &GbtConfig { steps: 25, step_size: 2.0, ..Default::default() }).unwrap();
        assert!(h.refined.loss_best <= h.encoder_loss);
    }

    #[test]
    fn target_shape_is_checked() {
        let (g, _) = linear(7);
        assert!(invert_latent_gbt(&g, &Tensor::<f64>::zeros(&[1, 1, 4, 4]), &GbtConfig::default()).is_err());
    }
}
