//! Conditional denoising diffusion in pixel space, from scratch.
//!
//! The forward process follows the closed form `x_t = √ᾱ_t·x_0 + √(1-ᾱ_t)·ε`;
//! the reverse process is ancestral sampling with the ε-prediction mean and
//! fixed variance `β_t`. The denoiser is a small fully-connected network over
//! `flatten(x_t) ⊕ sinusoidal-time-embedding(t) ⊕ clothes-code(y)`, trained
//! by minimizing the mean squared error between drawn and predicted noise
//! with hand-written backpropagation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;

#[allow(unused_imports)]
use num_traits::Float as _;

use crate::grid::{Image, Mask};
use crate::guidance::GuidanceSource;
use crate::nn::{self, Mlp, MlpGrads, Real, SgdMomentum};
use crate::rng::Rng;
use crate::synth::ClothesDescriptor;
use crate::{Error, Result};

pub const DEFAULT_STEPS: usize = 200;
pub const DEFAULT_BETA_START: f32 = 1e-4;
pub const DEFAULT_BETA_END: f32 = 0.03;
pub const DEFAULT_TIME_EMBED_DIM: usize = 32;

/// β_t, α_t, ᾱ_t and σ_t = √(1-ᾱ_t) tables, 1-indexed by timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f32>,
    alpha: Vec<f32>,
    alpha_bar: Vec<f32>,
    sigma: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ScheduleKind {
    Linear,
}

impl NoiseSchedule {
    /// Builds the derived tables from explicit per-step β values. The
    /// cumulative product runs in f64 before rounding to storage precision.
    pub fn from_betas(betas: &[f32]) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config(String::from("schedule needs at least one step")));
        }
        if !betas.iter().all(|&b| b > 0.0 && b < 1.0) {
            return Err(Error::Config(String::from("every beta must lie in (0, 1)")));
        }
        let mut alpha = Vec::with_capacity(betas.len());
        let mut alpha_bar = Vec::with_capacity(betas.len());
        let mut sigma = Vec::with_capacity(betas.len());
        let mut product = 1.0f64;
        for &b in betas {
            let a = 1.0 - b;
            product *= a as f64;
            let ab = product as f32;
            if ab >= 1.0 {
                return Err(Error::Config(String::from(
                    "beta too small to resolve at storage precision (alpha_bar rounds to 1)",
                )));
            }
            alpha.push(a);
            alpha_bar.push(ab);
            sigma.push((1.0 - ab).sqrt());
        }
        Ok(Self { beta: betas.to_vec(), alpha, alpha_bar, sigma })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn idx(&self, t: usize) -> usize {
        assert!(t >= 1 && t <= self.steps(), "timestep {t} outside 1..={}", self.steps());
        t - 1
    }

    pub fn beta(&self, t: usize) -> f32 {
        self.beta[self.idx(t)]
    }

    pub fn alpha(&self, t: usize) -> f32 {
        self.alpha[self.idx(t)]
    }

    pub fn alpha_bar(&self, t: usize) -> f32 {
        self.alpha_bar[self.idx(t)]
    }

    /// Standard deviation of `q(x_t | x_0)`.
    pub fn sigma(&self, t: usize) -> f32 {
        self.sigma[self.idx(t)]
    }
}

/// Builds a noise schedule; `Linear` interpolates β from `beta_start` to
/// `beta_end` over `t_count` steps.
pub fn make_schedule(
    t_count: usize,
    beta_start: f32,
    beta_end: f32,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if t_count == 0 {
        return Err(Error::Config(String::from("schedule needs at least one step")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "invalid beta range [{beta_start}, {beta_end}]; need 0 < start <= end < 1"
        )));
    }
    let betas: Vec<f32> = match kind {
        ScheduleKind::Linear => (0..t_count)
            .map(|i| {
                if t_count == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f32 / (t_count - 1) as f32
                }
            })
            .collect(),
    };
    NoiseSchedule::from_betas(&betas)
}

/// The default desk-scale schedule: T=200, linear β.
pub fn default_schedule() -> NoiseSchedule {
    make_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END, ScheduleKind::Linear)
        .expect("default schedule parameters are valid")
}

/// Draws an H×W image of i.i.d. standard normal values.
pub fn standard_normal_image(h: usize, w: usize, rng: &mut Rng) -> Image {
    let pixels = (0..h * w).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Image::from_vec(h, w, pixels)
}

/// Single-step forward noising: `√ᾱ_t·x0 + √(1-ᾱ_t)·eps`.
pub fn forward_sample(x0: &Image, t: usize, eps: &Image, schedule: &NoiseSchedule) -> Image {
    assert!(x0.same_shape(eps), "noise shape must match the image");
    x0.lin_comb(schedule.alpha_bar(t).sqrt(), eps, schedule.sigma(t))
}

/// Posterior mean `μ = (x_t - (β_t/σ_t)·ε̂) / √α_t`.
pub fn predict_mean(eps_hat: &Image, x_t: &Image, t: usize, schedule: &NoiseSchedule) -> Image {
    assert!(eps_hat.same_shape(x_t), "prediction shape must match the image");
    let coef = schedule.beta(t) / schedule.sigma(t);
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    x_t.lin_comb(inv_sqrt_alpha, eps_hat, -coef * inv_sqrt_alpha)
}

/// Anything that predicts the noise content of `x_t` at timestep `t` under a
/// conditioning code.
pub trait EpsModel {
    fn image_shape(&self) -> (usize, usize);
    fn predict_eps(
        &self,
        x_t: &Image,
        t: usize,
        y: &ClothesDescriptor,
        schedule: &NoiseSchedule,
    ) -> Image;
}

/// How the network output maps to the noise estimate.
///
/// `Residual` adds a fixed `σ_t·x_t` skip: the network predicts
/// `ε - σ_t·x_t = ᾱ_t·ε - σ_t√ᾱ_t·x_0`, a target that is bounded for every
/// timestep and shrinks to zero as `t → T`. The skip carries the dominant
/// linear structure of `E[ε|x_t]`, which a small network otherwise spends
/// most of its capacity approximating; the training objective is still the
/// plain noise-prediction squared error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Parameterization {
    Eps,
    Residual,
}

/// The learned conditional denoiser ε_θ(x_t, t, y).
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub mlp: Mlp<f32>,
    pub height: usize,
    pub width: usize,
    pub t_embed_dim: usize,
    pub cond_dim: usize,
    /// Input gain on the conditioning code, balancing the one-hot signal
    /// against the image values.
    pub cond_gain: f32,
    pub parameterization: Parameterization,
}

pub const DEFAULT_COND_GAIN: f32 = 3.0;

impl Denoiser {
    /// `hidden` lists the hidden-layer widths (default `[256, 256]`).
    pub fn new(
        height: usize,
        width: usize,
        cond_dim: usize,
        hidden: &[usize],
        t_embed_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let image_dim = height * width;
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(image_dim + t_embed_dim + cond_dim);
        dims.extend_from_slice(hidden);
        dims.push(image_dim);
        Self {
            mlp: Mlp::new(&dims, rng),
            height,
            width,
            t_embed_dim,
            cond_dim,
            cond_gain: DEFAULT_COND_GAIN,
            parameterization: Parameterization::Residual,
        }
    }

    /// `flatten(x_t) ⊕ time-embedding(t) ⊕ gain·code`.
    pub fn assemble_input(&self, x_t: &Image, t: usize, code: &[f32]) -> Vec<f32> {
        assert_eq!((x_t.h(), x_t.w()), (self.height, self.width), "image shape mismatch");
        assert_eq!(code.len(), self.cond_dim, "conditioning code length mismatch");
        let mut input = Vec::with_capacity(self.mlp.input_dim());
        input.extend_from_slice(x_t.pixels());
        input.extend(nn::time_embedding::<f32>(t, self.t_embed_dim));
        input.extend(code.iter().map(|c| c * self.cond_gain));
        input
    }
}

impl EpsModel for Denoiser {
    fn image_shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn predict_eps(
        &self,
        x_t: &Image,
        t: usize,
        y: &ClothesDescriptor,
        schedule: &NoiseSchedule,
    ) -> Image {
        let input = self.assemble_input(x_t, t, &y.code);
        let out = Image::from_vec(self.height, self.width, self.mlp.forward(&input));
        match self.parameterization {
            Parameterization::Eps => out,
            Parameterization::Residual => out.lin_comb(1.0, x_t, schedule.sigma(t)),
        }
    }
}

/// Optimizer choice for the small trainers.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum OptimizerKind {
    Sgd,
    Momentum { momentum: f32 },
}

impl OptimizerKind {
    pub fn build(self, lr: f32) -> SgdMomentum<f32> {
        match self {
            OptimizerKind::Sgd => SgdMomentum::new(lr, 0.0),
            OptimizerKind::Momentum { momentum } => SgdMomentum::new(lr, momentum),
        }
    }
}

/// Hyper-parameters for denoiser / discriminator training.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TrainConfig {
    pub lr: f32,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Items per gradient work unit; reductions run in fixed chunk order, so
    /// the result is independent of how many worker threads execute chunks.
    pub microbatch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.003,
            batch: 32,
            steps: 3000,
            seed: 11,
            optimizer: OptimizerKind::Momentum { momentum: 0.9 },
            microbatch: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(String::from("learning rate must be positive")));
        }
        if self.batch == 0 || self.steps == 0 || self.microbatch == 0 {
            return Err(Error::Config(String::from("batch, steps and microbatch must be >= 1")));
        }
        Ok(())
    }
}

/// One training example for the noise-prediction loss. The network output
/// maps into noise space through the affine `ε̂ = out_scale·out + offset`,
/// which is the identity for direct ε-prediction and
/// `(-√ᾱ_t/σ_t)·x̂0 + x_t/σ_t` for the x̂0 parameterization.
#[derive(Debug, Clone)]
pub struct DenoiseItem<F> {
    pub input: Vec<F>,
    pub eps: Vec<F>,
    pub out_scale: F,
    pub offset: Vec<F>,
}

/// `L_simple` (squared noise-prediction error summed over cells, averaged
/// over items) with parameter gradients.
pub fn denoise_loss_grads<F: Real>(
    mlp: &Mlp<F>,
    items: &[DenoiseItem<F>],
    microbatch: usize,
) -> (F, MlpGrads<F>) {
    let scale = F::one() / nn::real::<F>(items.len() as f64);
    let partials = nn::map_chunks(items, microbatch, |_, chunk| {
        let mut grads = MlpGrads::zeros_like(mlp);
        let mut loss = F::zero();
        for item in chunk {
            let tape = mlp.forward_tape(&item.input);
            let mut d_out = Vec::with_capacity(item.eps.len());
            for ((o, e), b) in tape.output().iter().zip(&item.eps).zip(&item.offset) {
                let diff = item.out_scale * *o + *b - *e;
                loss += diff * diff * scale;
                d_out.push(nn::real::<F>(2.0) * diff * scale * item.out_scale);
            }
            mlp.backward(&tape, &d_out, &mut grads);
        }
        (loss, grads)
    });
    let mut total_loss = F::zero();
    let mut total_grads = MlpGrads::zeros_like(mlp);
    for (loss, grads) in partials {
        total_loss += loss;
        total_grads.add_assign(&grads);
    }
    (total_loss, total_grads)
}

fn draw_training_item(
    denoiser: &Denoiser,
    image: &Image,
    code: &[f32],
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> DenoiseItem<f32> {
    let t = rng.gen_range(1..=schedule.steps());
    let eps = standard_normal_image(image.h(), image.w(), rng);
    let x_t = forward_sample(image, t, &eps, schedule);
    let input = denoiser.assemble_input(&x_t, t, code);
    let (out_scale, offset) = match denoiser.parameterization {
        Parameterization::Eps => (1.0, alloc::vec![0.0; x_t.len()]),
        Parameterization::Residual => {
            let sigma = schedule.sigma(t);
            (1.0, x_t.pixels().iter().map(|p| p * sigma).collect())
        }
    };
    DenoiseItem { input, eps: eps.pixels().to_vec(), out_scale, offset }
}

/// One optimization step of `L_simple`: draws `t ~ U{1..T}` and ε per item,
/// noises the batch, updates the parameters, and returns the pre-update loss.
pub fn train_step(
    denoiser: &mut Denoiser,
    opt: &mut SgdMomentum<f32>,
    batch: &[(&Image, &ClothesDescriptor)],
    schedule: &NoiseSchedule,
    microbatch: usize,
    rng: &mut Rng,
) -> Result<f32> {
    if batch.is_empty() {
        return Err(Error::Config(String::from("training batch is empty")));
    }
    let items: Vec<DenoiseItem<f32>> = batch
        .iter()
        .map(|(image, desc)| draw_training_item(denoiser, image, &desc.code, schedule, rng))
        .collect();
    let (loss, grads) = denoise_loss_grads(&denoiser.mlp, &items, microbatch);
    if !loss.is_finite() {
        return Err(Error::Numerical(format!(
            "denoiser loss is not finite ({loss}); lower the learning rate"
        )));
    }
    opt.step(&mut denoiser.mlp, &grads);
    Ok(loss)
}

/// Evaluation-only counterpart of [`train_step`] for any ε-model; used for
/// monitoring and for oracle tests.
pub fn batch_loss<M: EpsModel>(
    model: &M,
    batch: &[(&Image, &ClothesDescriptor)],
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> f32 {
    let mut loss = 0.0;
    for (image, desc) in batch {
        let t = rng.gen_range(1..=schedule.steps());
        let eps = standard_normal_image(image.h(), image.w(), rng);
        let x_t = forward_sample(image, t, &eps, schedule);
        let eps_hat = model.predict_eps(&x_t, t, desc, schedule);
        loss += eps_hat
            .pixels()
            .iter()
            .zip(eps.pixels())
            .map(|(p, e)| (p - e) * (p - e))
            .sum::<f32>();
    }
    loss / batch.len() as f32
}

/// Runs `cfg.steps` SGD steps over batches drawn from `data` and returns the
/// per-step loss trace.
pub fn train_denoiser(
    denoiser: &mut Denoiser,
    data: &[(&Image, &ClothesDescriptor)],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<f32>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data(String::from("no training samples provided")));
    }
    let mut opt = cfg.optimizer.build(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<(&Image, &ClothesDescriptor)> =
            (0..cfg.batch).map(|_| data[rng.gen_range(0..data.len())]).collect();
        let loss = train_step(denoiser, &mut opt, &batch, schedule, cfg.microbatch, rng)
            .map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("step {step}: {msg}")),
                other => other,
            })?;
        losses.push(loss);
    }
    Ok(losses)
}

/// One ancestral reverse step: `predict_mean(ε̂) + √β_t·z`, with `z = 0` at
/// `t = 1`. Guidance, when present, corrects ε̂ before the mean is formed.
pub fn reverse_step<M: EpsModel, G: GuidanceSource>(
    model: &M,
    x_t: &Image,
    t: usize,
    y: &ClothesDescriptor,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
    guidance: Option<&G>,
) -> Image {
    let mut eps_hat = model.predict_eps(x_t, t, y, schedule);
    if let Some(g) = guidance {
        g.apply_correction(&mut eps_hat, x_t, t, schedule);
    }
    let mut x_prev = predict_mean(&eps_hat, x_t, t, schedule);
    if t > 1 {
        let scale = schedule.beta(t).sqrt();
        let z = standard_normal_image(x_t.h(), x_t.w(), rng);
        x_prev = x_prev.lin_comb(1.0, &z, scale);
    }
    x_prev
}

/// No-op guidance, for the unguided sampling paths.
pub struct NoGuidance;

impl GuidanceSource for NoGuidance {
    fn apply_correction(&self, _: &mut Image, _: &Image, _: usize, _: &NoiseSchedule) {}
}

/// Ancestral sampling from pure noise, conditioned on `y`; the result is
/// clamped to `[-1, 1]`.
pub fn sample<M: EpsModel>(
    model: &M,
    y: &ClothesDescriptor,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Image> {
    sample_guided::<M, NoGuidance>(model, y, schedule, rng, None)
}

/// [`sample`] with an optional guidance correction in every reverse step.
pub fn sample_guided<M: EpsModel, G: GuidanceSource>(
    model: &M,
    y: &ClothesDescriptor,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
    guidance: Option<&G>,
) -> Result<Image> {
    let (h, w) = model.image_shape();
    let mut x = standard_normal_image(h, w, rng);
    for t in (1..=schedule.steps()).rev() {
        x = reverse_step(model, &x, t, y, schedule, rng, guidance);
        if !x.is_finite() {
            return Err(Error::Numerical(format!("non-finite sample state at timestep {t}")));
        }
    }
    x.clamp_unit();
    Ok(x)
}

/// Mask-conditioned inpainting: at every reverse step the known region is
/// replaced by the forward-noised original, and the final output is the hard
/// composite `(1-m)∘x + m∘x̂_0`, so the unmasked region of the output equals
/// `x` exactly.
pub fn inpaint<M: EpsModel>(
    model: &M,
    x: &Image,
    mask: &Mask,
    y: &ClothesDescriptor,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Image> {
    inpaint_guided::<M, NoGuidance>(model, x, mask, y, schedule, rng, None)
}

/// [`inpaint`] with an optional guidance correction in every reverse step.
pub fn inpaint_guided<M: EpsModel, G: GuidanceSource>(
    model: &M,
    x: &Image,
    mask: &Mask,
    y: &ClothesDescriptor,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
    guidance: Option<&G>,
) -> Result<Image> {
    assert!(mask.matches_shape(x), "mask shape must match the image");
    let mut x_t = standard_normal_image(x.h(), x.w(), rng);
    for t in (1..=schedule.steps()).rev() {
        let eps = standard_normal_image(x.h(), x.w(), rng);
        let known_t = forward_sample(x, t, &eps, schedule);
        x_t = mask.compose(&known_t, &x_t);
        x_t = reverse_step(model, &x_t, t, y, schedule, rng, guidance);
        if !x_t.is_finite() {
            return Err(Error::Numerical(format!("non-finite inpainting state at timestep {t}")));
        }
    }
    x_t.clamp_unit();
    Ok(mask.compose(x, &x_t))
}
