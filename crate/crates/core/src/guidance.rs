//! Discriminator-guided sampling.
//!
//! A timestep-conditioned classifier is trained to tell real from generated
//! examples after forward noising. Its input-gradient score
//! `h_φ = ∇_x log(d/(1-d))` — exactly the gradient of the pre-sigmoid logit —
//! converts to a noise correction `ε_φ = -σ_t·h_φ` that is added to the
//! denoiser prediction with weight `w` during reverse steps.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;

#[allow(unused_imports)]
use num_traits::Float as _;

use crate::diffusion::{forward_sample, standard_normal_image, EpsModel, NoiseSchedule, TrainConfig};
use crate::grid::Image;
use crate::nn::{self, Mlp, MlpGrads, Real};
use crate::rng::Rng;
use crate::synth::ClothesDescriptor;
use crate::{Error, Result};

/// A correction applied to the predicted noise inside a reverse step.
pub trait GuidanceSource {
    fn apply_correction(&self, eps: &mut Image, x_t: &Image, t: usize, schedule: &NoiseSchedule);
}

/// Real-vs-generated classifier `d_φ(x_t, t)`; the network outputs the
/// pre-sigmoid logit, so probabilities stay in (0, 1) by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub mlp: Mlp<f32>,
    pub height: usize,
    pub width: usize,
    pub t_embed_dim: usize,
}

impl Discriminator {
    pub fn new(
        height: usize,
        width: usize,
        hidden: &[usize],
        t_embed_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(height * width + t_embed_dim);
        dims.extend_from_slice(hidden);
        dims.push(1);
        Self { mlp: Mlp::new(&dims, rng), height, width, t_embed_dim }
    }

    pub fn assemble_input(&self, x: &Image, t: usize) -> Vec<f32> {
        assert_eq!((x.h(), x.w()), (self.height, self.width), "image shape mismatch");
        let mut input = Vec::with_capacity(self.mlp.input_dim());
        input.extend_from_slice(x.pixels());
        input.extend(nn::time_embedding::<f32>(t, self.t_embed_dim));
        input
    }

    /// Pre-sigmoid output; `log(d/(1-d))` equals this value exactly.
    pub fn logit(&self, x: &Image, t: usize) -> f32 {
        self.mlp.forward(&self.assemble_input(x, t))[0]
    }

    /// `d_φ(x_t, t) = sigmoid(logit)`.
    pub fn probability(&self, x: &Image, t: usize) -> f32 {
        nn::sigmoid(self.logit(x, t))
    }
}

/// Gradient of a scalar-output network w.r.t. its input.
pub fn logit_input_grad<F: Real>(mlp: &Mlp<F>, input: &[F]) -> Vec<F> {
    assert_eq!(mlp.output_dim(), 1, "input gradients are defined for scalar outputs");
    let tape = mlp.forward_tape(input);
    let mut scratch = MlpGrads::zeros_like(mlp);
    mlp.backward(&tape, &[F::one()], &mut scratch)
}

/// Score `h_φ = ∇_{x_t} log(d/(1-d))`, computed by backpropagating the logit
/// to the image part of the input.
pub fn disc_score(disc: &Discriminator, x_t: &Image, t: usize) -> Image {
    let input = disc.assemble_input(x_t, t);
    let grad = logit_input_grad(&disc.mlp, &input);
    Image::from_vec(disc.height, disc.width, grad[..x_t.len()].to_vec())
}

/// Noise-space correction `ε_φ = -σ_t · h_φ`.
pub fn guidance_noise(
    disc: &Discriminator,
    x_t: &Image,
    t: usize,
    schedule: &NoiseSchedule,
) -> Image {
    disc_score(disc, x_t, t).scaled(-schedule.sigma(t))
}

/// A trained discriminator plus its guidance weight.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceHook {
    pub discriminator: Discriminator,
    pub weight: f32,
}

impl GuidanceSource for GuidanceHook {
    fn apply_correction(&self, eps: &mut Image, x_t: &Image, t: usize, schedule: &NoiseSchedule) {
        // w = 0 must be bit-identical to unguided sampling, so skip entirely.
        if self.weight == 0.0 {
            return;
        }
        let correction = guidance_noise(&self.discriminator, x_t, t, schedule);
        let corrected = eps.lin_comb(1.0, &correction, self.weight);
        *eps = corrected;
    }
}

/// `ε_θ^φ = ε_θ(x_t, t, y) + w·ε_φ(x_t, t)`.
pub fn guided_eps<M: EpsModel>(
    model: &M,
    hook: &GuidanceHook,
    x_t: &Image,
    t: usize,
    y: &ClothesDescriptor,
    schedule: &NoiseSchedule,
) -> Image {
    let mut eps = model.predict_eps(x_t, t, y, schedule);
    hook.apply_correction(&mut eps, x_t, t, schedule);
    eps
}

/// Binary cross-entropy with logits over paired (real, generated) inputs;
/// the loss is per pair: `softplus(-z_real) + softplus(z_fake)`, averaged
/// over pairs. Gradients accumulate into `grads`.
pub fn disc_loss_grads<F: Real>(
    mlp: &Mlp<F>,
    pairs: &[(Vec<F>, Vec<F>)],
    microbatch: usize,
) -> (F, MlpGrads<F>) {
    let scale = F::one() / nn::real::<F>(pairs.len() as f64);
    let partials = nn::map_chunks(pairs, microbatch, |_, chunk| {
        let mut grads = MlpGrads::zeros_like(mlp);
        let mut loss = F::zero();
        for (real_input, fake_input) in chunk {
            let tape = mlp.forward_tape(real_input);
            let z_real = tape.output()[0];
            loss += nn::softplus(-z_real) * scale;
            mlp.backward(&tape, &[(nn::sigmoid(z_real) - F::one()) * scale], &mut grads);

            let tape = mlp.forward_tape(fake_input);
            let z_fake = tape.output()[0];
            loss += nn::softplus(z_fake) * scale;
            mlp.backward(&tape, &[nn::sigmoid(z_fake) * scale], &mut grads);
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

pub const DEFAULT_DISC_HIDDEN: [usize; 2] = [128, 128];

/// Trains a discriminator to separate forward-noised real images from
/// forward-noised generated ones, with `t ~ U{1..T}` per item. Returns the
/// model and the per-step loss trace (the last entry is the final loss).
pub fn train_discriminator(
    real: &[Image],
    generated: &[Image],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(Discriminator, Vec<f32>)> {
    cfg.validate()?;
    if real.is_empty() || generated.is_empty() {
        return Err(Error::Data(String::from("both real and generated sets must be nonempty")));
    }
    let (h, w) = (real[0].h(), real[0].w());
    let mut disc = Discriminator::new(h, w, &DEFAULT_DISC_HIDDEN, 32, rng);
    let mut opt = cfg.optimizer.build(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    fn noisy(
        disc: &Discriminator,
        img: &Image,
        schedule: &NoiseSchedule,
        rng: &mut Rng,
    ) -> Vec<f32> {
        let t = rng.gen_range(1..=schedule.steps());
        let eps = standard_normal_image(img.h(), img.w(), rng);
        let x_t = forward_sample(img, t, &eps, schedule);
        disc.assemble_input(&x_t, t)
    }
    for step in 0..cfg.steps {
        let pairs: Vec<(Vec<f32>, Vec<f32>)> = (0..cfg.batch)
            .map(|_| {
                let real_img = &real[rng.gen_range(0..real.len())];
                let fake_img = &generated[rng.gen_range(0..generated.len())];
                let ri = noisy(&disc, real_img, schedule, rng);
                let fi = noisy(&disc, fake_img, schedule, rng);
                (ri, fi)
            })
            .collect();
        let (loss, grads) = disc_loss_grads(&disc.mlp, &pairs, cfg.microbatch);
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("discriminator loss diverged at step {step}")));
        }
        opt.step(&mut disc.mlp, &grads);
        losses.push(loss);
    }
    Ok((disc, losses))
}
