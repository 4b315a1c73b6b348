//! Generator, encoder and discriminator networks, plus two analytic test generators.

use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Grads, LayerSpec, Network, Trace};
use crate::stats::{normal_cdf, normal_pdf};
use crate::synthdata::render_with_gradient;
use crate::tensor::{Real, Tensor};

/// Power iterations run at construction; training then adds one per step.
pub const SPECTRAL_WARMUP: usize = 50;

/// A point in latent space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentVector(Vec<f64>);

impl LatentVector {
    pub fn new(components: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Empty("latent vector".into()));
        }
        if components.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("latent vector has a non-finite component".into()));
        }
        Ok(Self(components))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn sample(dim: usize, rng: &mut dyn RngCore) -> Self {
        Self((0..dim).map(|_| StandardNormal.sample(rng)).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Stack into an `[n, D]` tensor.
    pub fn batch<T: Real>(zs: &[LatentVector]) -> Result<Tensor<T>> {
        let d = zs.first().ok_or_else(|| Error::Empty("latent batch".into()))?.dim();
        if let Some(z) = zs.iter().find(|z| z.dim() != d) {
            return Err(Error::Shape(format!("latent dims {d} and {} in one batch", z.dim())));
        }
        let data = zs.iter().flat_map(|z| z.0.iter().map(|&v| T::lit(v))).collect();
        Tensor::from_vec(&[zs.len(), d], data)
    }

    pub fn unbatch<T: Real>(t: &Tensor<T>) -> Result<Vec<LatentVector>> {
        if t.shape().len() != 2 {
            return Err(Error::Shape(format!("latent batch has shape {:?}", t.shape())));
        }
        (0..t.batch())
            .map(|i| LatentVector::new(t.row(i).iter().map(|v| v.as_f64()).collect()))
            .collect()
    }
}

/// `[n, dim]` standard-normal latents.
pub fn sample_latents<T: Real>(n: usize, dim: usize, rng: &mut dyn RngCore) -> Tensor<T> {
    let data = (0..n * dim)
        .map(|_| T::lit(StandardNormal.sample(rng)))
        .collect();
    Tensor::from_vec(&[n, dim], data).expect("shape")
}

fn check_latents<T: Real>(z: &Tensor<T>, dim: usize) -> Result<()> {
    if z.shape().len() != 2 || z.shape()[1] != dim {
        return Err(Error::Shape(format!("expected latents [N, {dim}], got {:?}", z.shape())));
    }
    if z.batch() == 0 {
        return Err(Error::Empty("latent batch".into()));
    }
    if !z.is_finite() {
        return Err(Error::InvalidValue("latent batch has a non-finite component".into()));
    }
    Ok(())
}

fn check_images<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Result<()> {
    let (n, c, xh, xw) = x.dims4()?;
    if (c, xh, xw) != (1, h, w) {
        return Err(Error::Shape(format!("expected images [N, 1, {h}, {w}], got {:?}", x.shape())));
    }
    if n == 0 {
        return Err(Error::Empty("image batch".into()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Generator,
    Encoder,
    Discriminator,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Generator => "generator",
            ModelKind::Encoder => "encoder",
            ModelKind::Discriminator => "discriminator",
        })
    }
}

/// Serializable architecture descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: ModelKind,
    pub latent_dim: usize,
    pub resolution: usize,
    /// Channel widths the layer list was built from (informational).
    pub widths: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// Discriminator only: layers before this index form the feature tap.
    #[serde(default)]
    pub feature_tap: Option<usize>,
}

fn stages(resolution: usize) -> Result<usize> {
    if resolution < 4 || !resolution.is_power_of_two() {
        return Err(Error::Config(format!("resolution {resolution} must be a power of two >= 4")));
    }
    Ok(resolution.trailing_zeros() as usize - 2)
}

/// Dense projection to a 4x4 map, then (upsample, 3x3 conv, batch norm, leaky ReLU)
/// per doubling, a 3x3 conv to one channel and tanh. Every conv and dense layer is
/// spectrally normalized. `widths` has one entry per spatial size from 4x4 upward.
pub fn generator_architecture(
    latent_dim: usize,
    resolution: usize,
    widths: &[usize],
) -> Result<Architecture> {
    let ups = stages(resolution)?;
    if widths.len() != ups + 1 {
        return Err(Error::Config(format!(
            "generator at {resolution}px needs {} widths, got {}",
            ups + 1,
            widths.len()
        )));
    }
    let lrelu = LayerSpec::LeakyRelu { slope: 0.2 };
    let mut layers = vec![
        LayerSpec::Dense { inputs: latent_dim, outputs: 16 * widths[0], spectral_norm: true },
        LayerSpec::Reshape { shape: vec![widths[0], 4, 4] },
        LayerSpec::BatchNorm { channels: widths[0] },
        lrelu.clone(),
    ];
    for w in widths.windows(2) {
        layers.extend([
            LayerSpec::Upsample2x,
            conv3(w[0], w[1], 1, true),
            LayerSpec::BatchNorm { channels: w[1] },
            lrelu.clone(),
        ]);
    }
    layers.extend([conv3(*widths.last().expect("nonempty"), 1, 1, true), LayerSpec::Tanh]);
    Ok(Architecture {
        kind: ModelKind::Generator,
        latent_dim,
        resolution,
        widths: widths.to_vec(),
        layers,
        feature_tap: None,
    })
}

fn conv3(cin: usize, cout: usize, stride: usize, sn: bool) -> LayerSpec {
    LayerSpec::Conv2d {
        in_channels: cin,
        out_channels: cout,
        kernel: 3,
        stride,
        padding: 1,
        spectral_norm: sn,
    }
}

/// Blocks of (conv, ReLU, conv, ReLU, batch norm, spatial dropout, 2x max pool), one
/// per width, then global max pooling and a dense layer to the latent dimension.
pub fn encoder_architecture(
    latent_dim: usize,
    resolution: usize,
    widths: &[usize],
    dropout: f64,
) -> Result<Architecture> {
    if widths.is_empty() || resolution >> widths.len() == 0 {
        return Err(Error::Config(format!(
            "{} pooling blocks do not fit a {resolution}px input",
            widths.len()
        )));
    }
    let mut layers = Vec::new();
    let mut cin = 1;
    for &w in widths {
        layers.extend([
            conv3(cin, w, 1, false),
            LayerSpec::Relu,
            conv3(w, w, 1, false),
            LayerSpec::Relu,
            LayerSpec::BatchNorm { channels: w },
            LayerSpec::SpatialDropout { rate: dropout },
            LayerSpec::MaxPool2,
        ]);
        cin = w;
    }
    layers.extend([
        LayerSpec::GlobalMaxPool,
        LayerSpec::Dense { inputs: cin, outputs: latent_dim, spectral_norm: false },
    ]);
    Ok(Architecture {
        kind: ModelKind::Encoder,
        latent_dim,
        resolution,
        widths: widths.to_vec(),
        layers,
        feature_tap: None,
    })
}

/// A 3x3 conv at full resolution, stride-2 3x3 convs down to 4x4, a dense feature
/// layer (the feature tap) and a dense logit. All weights spectrally normalized.
/// `widths` has one entry per spatial size from full resolution down to 4x4.
pub fn discriminator_architecture(
    resolution: usize,
    widths: &[usize],
    features: usize,
) -> Result<Architecture> {
    let downs = stages(resolution)?;
    if widths.len() != downs + 1 {
        return Err(Error::Config(format!(
            "discriminator at {resolution}px needs {} widths, got {}",
            downs + 1,
            widths.len()
        )));
    }
    let lrelu = LayerSpec::LeakyRelu { slope: 0.2 };
    let mut layers = vec![conv3(1, widths[0], 1, true), lrelu.clone()];
    for w in widths.windows(2) {
        layers.extend([conv3(w[0], w[1], 2, true), lrelu.clone()]);
    }
    let last = *widths.last().expect("nonempty");
    layers.extend([
        LayerSpec::Reshape { shape: vec![last * 16] },
        LayerSpec::Dense { inputs: last * 16, outputs: features, spectral_norm: true },
        lrelu,
    ]);
    let tap = layers.len();
    layers.push(LayerSpec::Dense { inputs: features, outputs: 1, spectral_norm: true });
    Ok(Architecture {
        kind: ModelKind::Discriminator,
        latent_dim: 0,
        resolution,
        widths: widths.to_vec(),
        layers,
        feature_tap: Some(tap),
    })
}

/// Anything that maps latents `[n, D]` to images `[n, 1, h, w]` differentiably.
pub trait LatentGenerator<T: Real>: Send + Sync {
    type Trace;

    fn latent_dim(&self) -> usize;
    fn image_shape(&self) -> (usize, usize);
    fn generate(&self, z: &Tensor<T>) -> Result<Tensor<T>>;
    fn generate_traced(&self, z: &Tensor<T>) -> Result<(Tensor<T>, Self::Trace)>;

    /// Gradient with respect to the latents, plus parameter gradients when requested
    /// and the generator has parameters.
    fn backward(
        &self,
        trace: &Self::Trace,
        grad_images: &Tensor<T>,
        param_grads: bool,
    ) -> Result<(Tensor<T>, Option<Grads<T>>)>;

    /// Trainable parameters, if any, aligned with the gradients from [`Self::backward`].
    fn params_mut(&mut self) -> Option<Vec<&mut Tensor<T>>> {
        None
    }

    /// Digest of every parameter and buffer (empty-input digest when there are none).
    fn parameter_digest(&self) -> String;

    fn param_count(&self) -> usize {
        0
    }
}

fn network_digest<T: Real>(net: &Network<T>) -> String {
    crate::checkpoint::tensors_digest(&net.named_tensors())
}

#[derive(Clone, Debug)]
pub struct GeneratorModel<T: Real = f32> {
    pub arch: Architecture,
    pub net: Network<T>,
}

impl<T: Real> GeneratorModel<T> {
    pub fn new(arch: Architecture, rng: &mut dyn RngCore) -> Result<Self> {
        if arch.kind != ModelKind::Generator {
            return Err(Error::Config(format!("{} architecture used for a generator", arch.kind)));
        }
        let mut net = Network::new(arch.layers.clone(), rng)?;
        net.refresh_spectral(SPECTRAL_WARMUP)?;
        Ok(Self { arch, net })
    }

    pub fn resolution(&self) -> usize {
        self.arch.resolution
    }

    pub fn cast<U: Real>(&self) -> GeneratorModel<U> {
        GeneratorModel { arch: self.arch.clone(), net: self.net.cast() }
    }
}

impl<T: Real> LatentGenerator<T> for GeneratorModel<T> {
    type Trace = Trace<T>;

    fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    fn image_shape(&self) -> (usize, usize) {
        (self.arch.resolution, self.arch.resolution)
    }

    fn generate(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        check_latents(z, self.arch.latent_dim)?;
        self.net.forward(z)
    }

    fn generate_traced(&self, z: &Tensor<T>) -> Result<(Tensor<T>, Trace<T>)> {
        check_latents(z, self.arch.latent_dim)?;
        self.net.forward_traced(z)
    }

    fn backward(
        &self,
        trace: &Trace<T>,
        grad_images: &Tensor<T>,
        param_grads: bool,
    ) -> Result<(Tensor<T>, Option<Grads<T>>)> {
        self.net.backward(trace, grad_images, param_grads)
    }

    fn params_mut(&mut self) -> Option<Vec<&mut Tensor<T>>> {
        Some(self.net.params_mut())
    }

    fn parameter_digest(&self) -> String {
        network_digest(&self.net)
    }

    fn param_count(&self) -> usize {
        self.net.param_count()
    }
}

#[derive(Clone, Debug)]
pub struct EncoderModel<T: Real = f32> {
    pub arch: Architecture,
    pub net: Network<T>,
}

impl<T: Real> EncoderModel<T> {
    pub fn new(arch: Architecture, rng: &mut dyn RngCore) -> Result<Self> {
        if arch.kind != ModelKind::Encoder {
            return Err(Error::Config(format!("{} architecture used for an encoder", arch.kind)));
        }
        let net = Network::new(arch.layers.clone(), rng)?;
        Ok(Self { arch, net })
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn resolution(&self) -> usize {
        self.arch.resolution
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    /// The encoder must have strictly more parameters than the generator it inverts.
    pub fn check_capacity(&self, generator_params: usize) -> Result<()> {
        if self.param_count() <= generator_params {
            return Err(Error::Config(format!(
                "encoder has {} parameters, not more than the generator's {generator_params}",
                self.param_count()
            )));
        }
        Ok(())
    }

    /// Inference encoding (dropout off, running batch-norm statistics).
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_images(x, self.arch.resolution, self.arch.resolution)?;
        self.net.forward(x)
    }

    pub fn encode_traced(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Trace<T>)> {
        check_images(x, self.arch.resolution, self.arch.resolution)?;
        self.net.forward_traced(x)
    }

    /// Training-mode encoding (dropout and batch statistics active).
    pub fn encode_train(
        &mut self,
        x: &Tensor<T>,
        rng: &mut dyn RngCore,
        update_state: bool,
    ) -> Result<(Tensor<T>, Trace<T>)> {
        check_images(x, self.arch.resolution, self.arch.resolution)?;
        self.net.forward_train(x, rng, update_state)
    }

    pub fn cast<U: Real>(&self) -> EncoderModel<U> {
        EncoderModel { arch: self.arch.clone(), net: self.net.cast() }
    }
}

/// Discriminator split at the feature tap: `head(body(x))` is the logit.
#[derive(Clone, Debug)]
pub struct DiscriminatorModel<T: Real = f32> {
    pub arch: Architecture,
    pub body: Network<T>,
    pub head: Network<T>,
}

pub struct DiscriminatorTrace<T> {
    body: Trace<T>,
    head: Trace<T>,
}

impl<T: Real> DiscriminatorModel<T> {
    pub fn new(arch: Architecture, rng: &mut dyn RngCore) -> Result<Self> {
        if arch.kind != ModelKind::Discriminator {
            return Err(Error::Config(format!("{} architecture used for a discriminator", arch.kind)));
        }
        let tap = arch
            .feature_tap
            .filter(|&t| t < arch.layers.len())
            .ok_or_else(|| Error::Config("discriminator needs a feature tap".into()))?;
        let mut body = Network::new(arch.layers[..tap].to_vec(), rng)?;
        let mut head = Network::new(arch.layers[tap..].to_vec(), rng)?;
        body.refresh_spectral(SPECTRAL_WARMUP)?;
        head.refresh_spectral(SPECTRAL_WARMUP)?;
        Ok(Self { arch, body, head })
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        check_images(x, self.arch.resolution, self.arch.resolution)
    }

    /// Feature-tap activations `[n, features]`.
    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        self.body.forward(x)
    }

    /// Logits `[n, 1]` (inference mode, frozen spectral state).
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        self.head.forward(&self.body.forward(x)?)
    }

    pub fn logits_traced(&self, x: &Tensor<T>) -> Result<(Tensor<T>, DiscriminatorTrace<T>)> {
        self.check(x)?;
        let (f, body) = self.body.forward_traced(x)?;
        let (y, head) = self.head.forward_traced(&f)?;
        Ok((y, DiscriminatorTrace { body, head }))
    }

    /// Training forward; with `update_state` the spectral power iteration advances once.
    pub fn logits_train(
        &mut self,
        x: &Tensor<T>,
        rng: &mut dyn RngCore,
        update_state: bool,
    ) -> Result<(Tensor<T>, DiscriminatorTrace<T>)> {
        self.check(x)?;
        let (f, body) = self.body.forward_train(x, rng, update_state)?;
        let (y, head) = self.head.forward_train(&f, rng, update_state)?;
        Ok((y, DiscriminatorTrace { body, head }))
    }

    pub fn backward(
        &self,
        trace: &DiscriminatorTrace<T>,
        grad_logits: &Tensor<T>,
        param_grads: bool,
    ) -> Result<(Tensor<T>, Option<Grads<T>>)> {
        let (gf, gh) = self.head.backward(&trace.head, grad_logits, param_grads)?;
        let (gx, gb) = self.body.backward(&trace.body, &gf, param_grads)?;
        let grads = match (gb, gh) {
            (Some(mut b), Some(h)) => {
                b.0.extend(h.0);
                Some(b)
            }
            _ => None,
        };
        Ok((gx, grads))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.body.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    pub fn param_count(&self) -> usize {
        self.body.param_count() + self.head.param_count()
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<_> = self
            .body
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (format!("body.{n}"), t))
            .collect();
        out.extend(self.head.named_tensors().into_iter().map(|(n, t)| (format!("head.{n}"), t)));
        out
    }

    pub fn set_named_tensor(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if let Some(rest) = name.strip_prefix("body.") {
            self.body.set_named_tensor(rest, value)
        } else if let Some(rest) = name.strip_prefix("head.") {
            self.head.set_named_tensor(rest, value)
        } else {
            Err(Error::CheckpointCorrupt(format!("bad discriminator tensor name {name}")))
        }
    }
}

/// Generator whose pixels are the synthetic renderer applied to squashed latents:
/// face_size = Phi(z0), hair_shade = Phi(z1), mouth_curve = 2 Phi(z2) - 1,
/// eyewear = Phi(z3), with Phi the standard normal CDF. Components past the fourth
/// do not affect pixels.
#[derive(Clone, Debug)]
pub struct OracleGenerator {
    latent_dim: usize,
    resolution: usize,
    nuisance_seed: u64,
}

/// Per-sample pixel Jacobians with respect to the first four latent components.
pub struct OracleTrace {
    jacobians: Vec<Vec<[f64; 4]>>,
}

impl OracleGenerator {
    pub fn new(latent_dim: usize, resolution: usize) -> Result<Self> {
        if latent_dim < 4 {
            return Err(Error::Config(format!(
                "oracle generator needs at least 4 latent dimensions, got {latent_dim}"
            )));
        }
        crate::synthdata::check_resolution(resolution)?;
        Ok(Self { latent_dim, resolution, nuisance_seed: 0 })
    }

    /// Attribute values (face_size, hair_shade, mouth_curve, eyewear) for a latent.
    pub fn attributes(z: &[f64]) -> [f64; 4] {
        [
            normal_cdf(z[0]),
            normal_cdf(z[1]),
            2.0 * normal_cdf(z[2]) - 1.0,
            normal_cdf(z[3]),
        ]
    }

    /// Encoder that inverts this generator exactly: the affine attribute readout of the
    /// renderer followed by the inverse normal CDF. Only defined for four latents.
    pub fn inverse_encoder<T: Real>(&self) -> Result<EncoderModel<T>> {
        if self.latent_dim != 4 {
            return Err(Error::Config(format!(
                "the exact inverse recovers 4 latents, generator has {}",
                self.latent_dim
            )));
        }
        let pixels = self.resolution * self.resolution;
        let arch = Architecture {
            kind: ModelKind::Encoder,
            latent_dim: 4,
            resolution: self.resolution,
            widths: vec![],
            layers: vec![
                LayerSpec::Reshape { shape: vec![pixels] },
                LayerSpec::Dense { inputs: pixels, outputs: 4, spectral_norm: false },
                LayerSpec::Probit,
            ],
            feature_tap: None,
        };
        let mut e = EncoderModel::<T>::new(arch, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        let readout = crate::synthdata::attribute_readout(self.resolution)?;
        let w = readout.weights.iter().map(|&v| T::lit(v)).collect();
        e.net.set_named_tensor("layers.1.weight", Tensor::from_vec(&[4, pixels], w)?)?;
        let b = readout.bias.iter().map(|&v| T::lit(v)).collect();
        e.net.set_named_tensor("layers.1.bias", Tensor::from_vec(&[4], b)?)?;
        Ok(e)
    }

    fn squash_slopes(z: &[f64]) -> [f64; 4] {
        [normal_pdf(z[0]), normal_pdf(z[1]), 2.0 * normal_pdf(z[2]), normal_pdf(z[3])]
    }

    fn render_batch<T: Real>(&self, z: &Tensor<T>, keep: bool) -> Result<(Tensor<T>, OracleTrace)> {
        check_latents(z, self.latent_dim)?;
        let r = self.resolution;
        let mut out = Vec::with_capacity(z.batch() * r * r);
        let mut jacobians = Vec::new();
        for i in 0..z.batch() {
            let zi: Vec<f64> = z.row(i).iter().map(|v| v.as_f64()).collect();
            let attrs = Self::attributes(&zi);
            let slopes = Self::squash_slopes(&zi);
            let px = render_with_gradient(attrs, self.nuisance_seed, r)?;
            out.extend(px.iter().map(|p| T::lit(p.v)));
            if keep {
                jacobians.push(
                    px.iter()
                        .map(|p| [0, 1, 2, 3].map(|k| p.d[k] * slopes[k]))
                        .collect(),
                );
            }
        }
        Ok((Tensor::from_vec(&[z.batch(), 1, r, r], out)?, OracleTrace { jacobians }))
    }
}

impl<T: Real> LatentGenerator<T> for OracleGenerator {
    type Trace = OracleTrace;

    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn image_shape(&self) -> (usize, usize) {
        (self.resolution, self.resolution)
    }

    fn generate(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.render_batch(z, false)?.0)
    }

    fn generate_traced(&self, z: &Tensor<T>) -> Result<(Tensor<T>, OracleTrace)> {
        self.render_batch(z, true)
    }

    fn backward(
        &self,
        trace: &OracleTrace,
        grad_images: &Tensor<T>,
        _param_grads: bool,
    ) -> Result<(Tensor<T>, Option<Grads<T>>)> {
        let n = trace.jacobians.len();
        if grad_images.batch() != n || grad_images.row_len() != self.resolution * self.resolution {
            return Err(Error::Shape(format!("image gradient {:?} vs trace of {n}", grad_images.shape())));
        }
        let mut gz = Tensor::zeros(&[n, self.latent_dim]);
        for (i, jac) in trace.jacobians.iter().enumerate() {
            let mut acc = [0.0f64; 4];
            for (g, j) in grad_images.row(i).iter().zip(jac) {
                for k in 0..4 {
                    acc[k] += g.as_f64() * j[k];
                }
            }
            for k in 0..4 {
                gz.row_mut(i)[k] = T::lit(acc[k]);
            }
        }
        Ok((gz, None))
    }

    fn parameter_digest(&self) -> String {
        crate::checkpoint::tensors_digest::<f32>(&[])
    }
}

/// `g(z) = A z`, reshaped to an `h x w` image. A fixed analytic generator.
#[derive(Clone, Debug)]
pub struct LinearGenerator {
    a: Vec<f64>,
    latent_dim: usize,
    shape: (usize, usize),
}

impl LinearGenerator {
    /// `a` is row-major `(h * w) x latent_dim`.
    pub fn new(a: Vec<f64>, latent_dim: usize, shape: (usize, usize)) -> Result<Self> {
        if a.len() != shape.0 * shape.1 * latent_dim || latent_dim == 0 {
            return Err(Error::Shape(format!(
                "{} matrix entries for {}x{} outputs and {latent_dim} inputs",
                a.len(),
                shape.0,
                shape.1
            )));
        }
        Ok(Self { a, latent_dim, shape })
    }

    pub fn matrix(&self) -> &[f64] {
        &self.a
    }
}

impl<T: Real> LatentGenerator<T> for LinearGenerator {
    type Trace = ();

    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn image_shape(&self) -> (usize, usize) {
        self.shape
    }

    fn generate(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        check_latents(z, self.latent_dim)?;
        let p = self.shape.0 * self.shape.1;
        let d = self.latent_dim;
        let mut out = Vec::with_capacity(z.batch() * p);
        for i in 0..z.batch() {
            let zi = z.row(i);
            for r in 0..p {
                let s: f64 = (0..d).map(|k| self.a[r * d + k] * zi[k].as_f64()).sum();
                out.push(T::lit(s));
            }
        }
        Tensor::from_vec(&[z.batch(), 1, self.shape.0, self.shape.1], out)
    }

    fn generate_traced(&self, z: &Tensor<T>) -> Result<(Tensor<T>, ())> {
        Ok((self.generate(z)?, ()))
    }

    fn backward(&self, _: &(), grad_images: &Tensor<T>, _: bool) -> Result<(Tensor<T>, Option<Grads<T>>)> {
        let p = self.shape.0 * self.shape.1;
        let d = self.latent_dim;
        if grad_images.row_len() != p {
            return Err(Error::Shape(format!("image gradient {:?}", grad_images.shape())));
        }
        let n = grad_images.batch();
        let mut gz = Tensor::zeros(&[n, d]);
        for i in 0..n {
            let g = grad_images.row(i);
            for k in 0..d {
                let s: f64 = (0..p).map(|r| self.a[r * d + k] * g[r].as_f64()).sum();
                gz.row_mut(i)[k] = T::lit(s);
            }
        }
        Ok((gz, None))
    }

    fn parameter_digest(&self) -> String {
        let t = Tensor::from_vec(&[self.a.len()], self.a.clone()).expect("shape");
        crate::checkpoint::tensors_digest(&[("a".to_string(), t)])
    }
}
