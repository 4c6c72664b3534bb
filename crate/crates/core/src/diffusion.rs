//! Variance schedules, forward noising, ε-parameterised reverse steps, the
//! noise-prediction loss and ancestral sampling.
//!
//! Timesteps are 1-based: `t ∈ 1..=T`, with `ᾱ_0 ≡ 1` for the clean latent.
//! Schedule quantities are kept in `f64`.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LddmError, Result};
use crate::video::SeedImage;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `σ_t² = β_t`
    #[default]
    Beta,
    /// `σ_t² = β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`
    BetaTilde,
}

/// Serializable description of a linear schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(default)]
    pub sigma_mode: SigmaMode,
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.beta_start, self.beta_end, self.steps, self.sigma_mode)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
    sigma_mode: SigmaMode,
}

/// Linear β schedule including both endpoints.
pub fn make_linear_schedule(
    beta_start: f64,
    beta_end: f64,
    steps: usize,
    sigma_mode: SigmaMode,
) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(LddmError::InvalidSchedule(format!(
            "need at least 2 steps, got {steps}"
        )));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(LddmError::InvalidSchedule(format!(
            "require 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let betas = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
        .collect();
    NoiseSchedule::from_betas(betas, sigma_mode)
}

impl NoiseSchedule {
    /// Builds a schedule from explicit variances. Accepts the degenerate
    /// endpoints `β = 0` and `β = 1`; requires a non-decreasing sequence.
    pub fn from_betas(betas: Vec<f64>, sigma_mode: SigmaMode) -> Result<Self> {
        if betas.is_empty() {
            return Err(LddmError::InvalidSchedule("empty schedule".into()));
        }
        if betas.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(LddmError::InvalidSchedule("betas must lie in [0, 1]".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(LddmError::InvalidSchedule("betas must be non-decreasing".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = (0..betas.len())
            .map(|i| match sigma_mode {
                SigmaMode::Beta => betas[i].sqrt(),
                SigmaMode::BetaTilde => {
                    let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                    let denom = 1.0 - alpha_bars[i];
                    if denom <= 0.0 {
                        0.0
                    } else {
                        ((1.0 - prev) / denom * betas[i]).sqrt()
                    }
                }
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
            sigma_mode,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn sigma_mode(&self) -> SigmaMode {
        self.sigma_mode
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Signal-to-noise ratio `ᾱ_t / (1 − ᾱ_t)`.
    pub fn snr(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        ab / (1.0 - ab)
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(LddmError::StepOutOfRange {
                step: t,
                max: self.steps(),
            });
        }
        Ok(())
    }
}

/// A latent tensor tagged with its diffusion step. Values use the
/// `[Γ/r, H/r, W/r, C/r]` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub values: Vec<f64>,
    pub shape: [usize; 4],
    pub step: usize,
}

impl LatentState {
    pub fn new(values: Vec<f64>, shape: [usize; 4], step: usize) -> Result<Self> {
        let n: usize = shape.iter().product();
        if values.len() != n {
            return Err(LddmError::ShapeMismatch {
                expected: shape.to_vec(),
                found: vec![values.len()],
            });
        }
        Ok(Self {
            values,
            shape,
            step,
        })
    }

    pub fn clean(values: Vec<f64>, shape: [usize; 4]) -> Result<Self> {
        Self::new(values, shape, 0)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// One forward transition `z_t = √(1−β_t)·z_{t−1} + √β_t·ε`.
pub fn forward_step<R: Rng + ?Sized>(
    z_prev: &LatentState,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<LatentState> {
    if z_prev.step >= schedule.steps() {
        return Err(LddmError::StepOutOfRange {
            step: z_prev.step + 1,
            max: schedule.steps(),
        });
    }
    let t = z_prev.step + 1;
    let (keep, noise) = (schedule.alpha(t).sqrt(), schedule.beta(t).sqrt());
    let eps = standard_normal(z_prev.len(), rng);
    let values = z_prev
        .values
        .iter()
        .zip(&eps)
        .map(|(z, e)| keep * z + noise * e)
        .collect();
    LatentState::new(values, z_prev.shape, t)
}

/// Closed-form marginal `z_t = √ᾱ_t·z_0 + √(1−ᾱ_t)·ε`; returns `ε` too.
pub fn forward_marginal<R: Rng + ?Sized>(
    z0: &LatentState,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(LatentState, Vec<f64>)> {
    if z0.step != 0 {
        return Err(LddmError::InvalidArgument(format!(
            "forward_marginal expects a clean latent, got step {}",
            z0.step
        )));
    }
    if t > schedule.steps() {
        return Err(LddmError::StepOutOfRange {
            step: t,
            max: schedule.steps(),
        });
    }
    let eps = standard_normal(z0.len(), rng);
    let values = noised(&z0.values, &eps, t, schedule);
    Ok((LatentState::new(values, z0.shape, t)?, eps))
}

/// Deterministic core of [`forward_marginal`] for a given `ε`.
pub fn noised(z0: &[f64], eps: &[f64], t: usize, schedule: &NoiseSchedule) -> Vec<f64> {
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect()
}

/// One ancestral reverse step
/// `z_{t−1} = (z_t − β_t/√(1−ᾱ_t)·ε̂) / √α_t + σ_t·ξ`, with no noise at `t = 1`.
pub fn reverse_step<R: Rng + ?Sized>(
    z_t: &LatentState,
    eps_pred: &[f64],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<LatentState> {
    let t = z_t.step;
    schedule.check_step(t)?;
    if eps_pred.len() != z_t.len() {
        return Err(LddmError::ShapeMismatch {
            expected: z_t.shape.to_vec(),
            found: vec![eps_pred.len()],
        });
    }
    let beta = schedule.beta(t);
    let coef = if beta == 0.0 {
        0.0
    } else {
        beta / (1.0 - schedule.alpha_bar(t)).sqrt()
    };
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let sigma = if t > 1 { schedule.sigma(t) } else { 0.0 };
    let values = z_t
        .values
        .iter()
        .zip(eps_pred)
        .map(|(z, e)| {
            let mean = inv_sqrt_alpha * (z - coef * e);
            if sigma > 0.0 {
                mean + sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                mean
            }
        })
        .collect();
    LatentState::new(values, z_t.shape, t - 1)
}

/// Mean squared error between true and predicted noise.
pub fn diffusion_loss(eps: &[f64], eps_pred: &[f64]) -> Result<f64> {
    if eps.len() != eps_pred.len() {
        return Err(LddmError::ShapeMismatch {
            expected: vec![eps.len()],
            found: vec![eps_pred.len()],
        });
    }
    if eps.is_empty() {
        return Ok(0.0);
    }
    Ok(eps
        .iter()
        .zip(eps_pred)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / eps.len() as f64)
}

/// Anything that predicts the injected noise `ε_θ(z_t, t, x0)`.
pub trait NoisePredictor {
    fn latent_shape(&self) -> [usize; 4];

    /// Predicts noise for a batch of states that all sit at step `t`.
    fn predict_noise_batch(
        &self,
        z_t: &[LatentState],
        t: usize,
        seeds: &[&SeedImage],
    ) -> Result<Vec<Vec<f64>>>;
}

/// Ancestral sampling of one latent conditioned on `condition`.
pub fn sample_latent<P: NoisePredictor + ?Sized, R: RngCore>(
    denoiser: &P,
    condition: &SeedImage,
    shape: [usize; 4],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<LatentState> {
    let mut out = sample_latents(denoiser, &[condition], shape, schedule, std::slice::from_mut(rng))?;
    Ok(out.pop().expect("one sample"))
}

/// Batched ancestral sampling; item `i` draws all of its noise from `rngs[i]`,
/// so results match serial [`sample_latent`] calls with the same streams.
pub fn sample_latents<P: NoisePredictor + ?Sized, R: RngCore>(
    denoiser: &P,
    conditions: &[&SeedImage],
    shape: [usize; 4],
    schedule: &NoiseSchedule,
    rngs: &mut [R],
) -> Result<Vec<LatentState>> {
    if conditions.len() != rngs.len() {
        return Err(LddmError::InvalidArgument(
            "one rng stream per condition required".into(),
        ));
    }
    if shape != denoiser.latent_shape() {
        return Err(LddmError::ShapeMismatch {
            expected: denoiser.latent_shape().to_vec(),
            found: shape.to_vec(),
        });
    }
    let n: usize = shape.iter().product();
    let big_t = schedule.steps();
    let mut states = rngs
        .iter_mut()
        .map(|r| LatentState::new(standard_normal(n, r), shape, big_t))
        .collect::<Result<Vec<_>>>()?;
    for t in (1..=big_t).rev() {
        let eps = denoiser.predict_noise_batch(&states, t, conditions)?;
        states = states
            .iter()
            .zip(&eps)
            .zip(rngs.iter_mut())
            .map(|((z, e), r)| reverse_step(z, e, schedule, r))
            .collect::<Result<Vec<_>>>()?;
    }
    Ok(states)
}
