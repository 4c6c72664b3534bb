//! The conditional noise predictor `ε_θ(z_t, t, x0)` and its training loop.
//!
//! A small 3D convolutional network over the latent. The sinusoidal time
//! embedding and the pooled seed-image features modulate every block with a
//! per-channel `(1 + scale, shift)` pair; the seed features also enter
//! spatially, added to the input projection at every latent frame.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autoencoder::{load_params, seeds_to_tensor};
use crate::checkpoint::Checkpoint;
use crate::diffusion::{noised, LatentState, NoisePredictor, NoiseSchedule};
use crate::error::{LddmError, Result};
use crate::graph::{Graph, Var};
use crate::nn::{
    conv, init_conv, init_linear, linear, timestep_embedding, Adam, BatchSampler, Bound,
    ParamStore, TrainConfig, TrainingLog,
};
use crate::tensor::Tensor;
use crate::video::{channels_first_to_last, channels_last_to_first, Geometry, LatentDynamic, SeedImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub geometry: Geometry,
    /// Number of diffusion steps `T` the model is trained for.
    pub steps: usize,
    pub features: usize,
    pub time_dim: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
}

fn default_blocks() -> usize {
    2
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.features == 0 || self.time_dim < 2 || self.steps == 0 {
            return Err(LddmError::Config(
                "denoiser needs positive features and steps and time_dim >= 2".into(),
            ));
        }
        Ok(())
    }
}

/// Scalar standardisation applied to latents before diffusion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentNorm {
    pub mean: f64,
    pub std: f64,
}

impl Default for LatentNorm {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl LatentNorm {
    pub fn fit(latents: &[&LatentDynamic]) -> Self {
        let all: Vec<f64> = latents.iter().flat_map(|l| l.values.iter().copied()).collect();
        if all.is_empty() {
            return Self::default();
        }
        let (mean, std) = crate::graph::mean_std(&all);
        Self {
            mean,
            std: if std > 1e-8 { std } else { 1.0 },
        }
    }

    pub fn normalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter().map(|x| (x - self.mean) / self.std).collect()
    }

    pub fn denormalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter().map(|x| x * self.std + self.mean).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    params: ParamStore,
    norm: LatentNorm,
}

const K3: [usize; 3] = [3, 3, 3];
const S1: [usize; 3] = [1, 1, 1];
const P1: [usize; 3] = [1, 1, 1];

impl DenoiserModel {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let geo = config.geometry;
        let cz = geo.latent_shape()[3];
        let f = config.features;
        let mut p = ParamStore::new();
        init_linear(&mut p, "den.time", config.time_dim, f, 1.0, rng);
        init_conv(&mut p, "den.seed_stem", geo.channels, f, [1, 3, 3], rng);
        init_linear(&mut p, "den.seed_vec", f, f, 1.0, rng);
        init_conv(&mut p, "den.in", cz, f, K3, rng);
        for b in 0..config.blocks {
            init_conv(&mut p, &format!("den.b{b}.a"), f, f, K3, rng);
            init_linear(&mut p, &format!("den.b{b}.scale"), f, f, 0.1, rng);
            init_linear(&mut p, &format!("den.b{b}.shift"), f, f, 0.1, rng);
            init_conv(&mut p, &format!("den.b{b}.b"), f, f, K3, rng);
        }
        init_conv(&mut p, "den.out", f, cz, K3, rng);
        Ok(Self {
            config,
            params: p,
            norm: LatentNorm::default(),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn latent_norm(&self) -> LatentNorm {
        self.norm
    }

    pub fn set_latent_norm(&mut self, norm: LatentNorm) {
        self.norm = norm;
    }

    /// `z: [N, C/r, Γ/r, H/r, W/r]`, `seed: [N, C, 1, H, W]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, z: Var, ts: &[usize], seed: Var) -> Result<Var> {
        let geo = self.config.geometry;
        let r = geo.r;
        let emb = g.constant(timestep_embedding(ts, self.config.time_dim));
        let temb = linear(g, p, "den.time", emb)?;
        let temb = g.silu(temb);

        let s = g.avg_pool(seed, [1, r, r])?;
        let s = conv(g, p, "den.seed_stem", s, S1, [0, 1, 1])?;
        let s = g.silu(s);
        let s_vec = g.global_mean(s)?;
        let s_vec = linear(g, p, "den.seed_vec", s_vec)?;
        let cond = g.add(temb, s_vec)?;

        let h = conv(g, p, "den.in", z, S1, P1)?;
        let s_rep = g.repeat_time(s, geo.frames / r)?;
        let mut h = g.add(h, s_rep)?;
        for b in 0..self.config.blocks {
            let a = conv(g, p, &format!("den.b{b}.a"), h, S1, P1)?;
            let sc = linear(g, p, &format!("den.b{b}.scale"), cond)?;
            let sc = g.add_scalar(sc, 1.0);
            let sh = linear(g, p, &format!("den.b{b}.shift"), cond)?;
            let a = g.mul_channel(a, sc)?;
            let a = g.add_channel(a, sh)?;
            let a = g.silu(a);
            let a = conv(g, p, &format!("den.b{b}.b"), a, S1, P1)?;
            let sum = g.add(h, a)?;
            h = g.silu(sum);
        }
        conv(g, p, "den.out", h, S1, P1)
    }

    fn check_inputs(&self, z_t: &[&[f64]], ts: &[usize], seeds: &[&SeedImage]) -> Result<()> {
        if z_t.is_empty() {
            return Err(LddmError::EmptyInput("denoiser batch"));
        }
        if z_t.len() != ts.len() || z_t.len() != seeds.len() {
            return Err(LddmError::InvalidArgument(
                "latents, timesteps and seeds must have equal counts".into(),
            ));
        }
        let geo = self.config.geometry;
        for &t in ts {
            if t == 0 || t > self.config.steps {
                return Err(LddmError::StepOutOfRange {
                    step: t,
                    max: self.config.steps,
                });
            }
        }
        for z in z_t {
            if z.len() != geo.latent_len() {
                return Err(LddmError::Geometry(format!(
                    "latent of {} values, expected {:?}",
                    z.len(),
                    geo.latent_shape()
                )));
            }
        }
        for s in seeds {
            if s.shape() != [geo.height, geo.width, geo.channels] {
                return Err(LddmError::Geometry(format!(
                    "seed image {:?} does not match [{}, {}, {}]",
                    s.shape(),
                    geo.height,
                    geo.width,
                    geo.channels
                )));
            }
        }
        Ok(())
    }

    fn inputs(&self, g: &mut Graph, z_t: &[&[f64]], seeds: &[&SeedImage]) -> Result<(Var, Var)> {
        let shape = self.config.geometry.latent_shape();
        let [d, h, w, c] = shape;
        let items: Vec<Vec<f64>> = z_t.iter().map(|z| channels_last_to_first(z, shape)).collect();
        let z = g.input(Tensor::stack(&items, &[c, d, h, w])?);
        let s = g.constant(seeds_to_tensor(seeds)?);
        Ok((z, s))
    }

    /// Noise prediction for latents in normalized space, layout
    /// `[Γ/r, H/r, W/r, C/r]` per item; `ts[i]` is the step of item `i`.
    pub fn predict(&self, z_t: &[&[f64]], ts: &[usize], seeds: &[&SeedImage]) -> Result<Vec<Vec<f64>>> {
        self.check_inputs(z_t, ts, seeds)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let (z, s) = self.inputs(&mut g, z_t, seeds)?;
        let out = self.forward(&mut g, &p, z, ts, s)?;
        let shape = self.config.geometry.latent_shape();
        let out = g.value(out);
        Ok((0..z_t.len())
            .map(|i| channels_first_to_last(&out.item(i), shape))
            .collect())
    }

    /// MSE between `eps` and the prediction, plus parameter gradients.
    pub fn loss_and_grads(
        &self,
        z_t: &[&[f64]],
        ts: &[usize],
        seeds: &[&SeedImage],
        eps: &[&[f64]],
    ) -> Result<(f64, Vec<Tensor>)> {
        self.check_inputs(z_t, ts, seeds)?;
        if eps.len() != z_t.len() {
            return Err(LddmError::InvalidArgument("one noise target per latent".into()));
        }
        let shape = self.config.geometry.latent_shape();
        let [d, h, w, c] = shape;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let (z, s) = self.inputs(&mut g, z_t, seeds)?;
        let out = self.forward(&mut g, &p, z, ts, s)?;
        let items: Vec<Vec<f64>> = eps.iter().map(|e| channels_last_to_first(e, shape)).collect();
        let target = g.constant(Tensor::stack(&items, &[c, d, h, w])?);
        let loss = g.mse(out, target)?;
        let grads = g.backward(loss)?;
        Ok((g.value(loss).data()[0], self.params.collect_grads(&p, &grads)))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(
            "denoiser",
            serde_json::to_value(self.config).expect("config serializes"),
            self.params.clone(),
        );
        c.extra.insert(
            "latent_norm".into(),
            serde_json::to_value(self.norm).expect("norm serializes"),
        );
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.kind != "denoiser" {
            return Err(LddmError::MalformedHeader(format!(
                "expected a denoiser checkpoint, found {}",
                c.kind
            )));
        }
        let config: DenoiserConfig = c.arch_as()?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Self::new(config, &mut rng)?;
        model.params = load_params(&model.params, &c.params)?;
        if let Some(v) = c.extra.get("latent_norm") {
            model.norm = serde_json::from_value(v.clone())
                .map_err(|e| LddmError::MalformedHeader(format!("latent_norm: {e}")))?;
        }
        Ok(model)
    }
}

impl NoisePredictor for DenoiserModel {
    fn latent_shape(&self) -> [usize; 4] {
        self.config.geometry.latent_shape()
    }

    fn predict_noise_batch(
        &self,
        z_t: &[LatentState],
        t: usize,
        seeds: &[&SeedImage],
    ) -> Result<Vec<Vec<f64>>> {
        let zs: Vec<&[f64]> = z_t.iter().map(|z| z.values.as_slice()).collect();
        self.predict(&zs, &vec![t; z_t.len()], seeds)
    }
}

/// `ε_θ(z_t, t, x0)` for one latent state.
pub fn predict_noise(
    z_t: &LatentState,
    t: usize,
    seed: &SeedImage,
    model: &DenoiserModel,
) -> Result<Vec<f64>> {
    if z_t.shape != model.latent_shape() {
        return Err(LddmError::Geometry(format!(
            "latent {:?} does not match {:?}",
            z_t.shape,
            model.latent_shape()
        )));
    }
    Ok(model.predict(&[&z_t.values], &[t], &[seed])?.remove(0))
}

/// `n` timesteps drawn uniformly from `1..=steps`.
pub fn sample_timesteps<R: Rng + ?Sized>(n: usize, steps: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(1..=steps)).collect()
}

/// Stage-2 training on precomputed latents. Latents are standardised with a
/// scalar fit stored in the returned model.
pub fn train_diffusion<R: RngCore>(
    latents: &[(LatentDynamic, SeedImage)],
    schedule: &NoiseSchedule,
    config: DenoiserConfig,
    train: &TrainConfig,
    rng: &mut R,
) -> Result<(DenoiserModel, TrainingLog)> {
    train.validate()?;
    let first = latents.first().ok_or(LddmError::EmptyInput("latent dataset"))?;
    if config.steps != schedule.steps() {
        return Err(LddmError::Config(format!(
            "denoiser configured for T = {}, schedule has T = {}",
            config.steps,
            schedule.steps()
        )));
    }
    if latents.iter().any(|(l, _)| l.shape != first.0.shape) {
        return Err(LddmError::Geometry("latents differ in geometry".into()));
    }
    if first.0.shape != config.geometry.latent_shape() {
        return Err(LddmError::Geometry(format!(
            "latents {:?} do not match configured {:?}",
            first.0.shape,
            config.geometry.latent_shape()
        )));
    }
    let mut model = DenoiserModel::new(config, rng)?;
    let refs: Vec<&LatentDynamic> = latents.iter().map(|(l, _)| l).collect();
    model.norm = LatentNorm::fit(&refs);
    let normed: Vec<Vec<f64>> = refs.iter().map(|l| model.norm.normalize(&l.values)).collect();

    let n = config.geometry.latent_len();
    let mut opt = Adam::new(train.learning_rate, &model.params);
    let mut sampler = BatchSampler::new(latents.len(), train.batch_size);
    let mut log = TrainingLog::default();
    for step in 0..train.total_steps(latents.len()) {
        let batch = sampler.next_batch(rng);
        let ts = sample_timesteps(batch.len(), schedule.steps(), rng);
        let eps: Vec<Vec<f64>> = batch
            .iter()
            .map(|_| (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect())
            .collect();
        let z_t: Vec<Vec<f64>> = batch
            .iter()
            .zip(&ts)
            .zip(&eps)
            .map(|((&i, &t), e)| noised(&normed[i], e, t, schedule))
            .collect();
        let zr: Vec<&[f64]> = z_t.iter().map(Vec::as_slice).collect();
        let er: Vec<&[f64]> = eps.iter().map(Vec::as_slice).collect();
        let seeds: Vec<&SeedImage> = batch.iter().map(|&i| &latents[i].1).collect();
        let (loss, grads) = model.loss_and_grads(&zr, &ts, &seeds, &er)?;
        if !loss.is_finite() {
            return Err(LddmError::NonFiniteLoss { step, value: loss });
        }
        log.losses.push(loss);
        opt.step(&mut model.params, &grads);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            geometry: Geometry {
                frames: 4,
                height: 4,
                width: 4,
                channels: 2,
                r: 2,
            },
            steps: 10,
            features: 4,
            time_dim: 4,
            blocks: 1,
        }
    }

    fn seed() -> SeedImage {
        SeedImage::new((0..32).map(|i| i as f32 / 32.0).collect(), [4, 4, 2]).unwrap()
    }

    #[test]
    fn time_embedding_changes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = DenoiserModel::new(tiny(), &mut rng).unwrap();
        let z = LatentState::new(vec![0.3; 8], [2, 2, 2, 1], 1).unwrap();
        let a = predict_noise(&z, 1, &seed(), &m).unwrap();
        let b = predict_noise(&z, 10, &seed(), &m).unwrap();
        assert_eq!(a.len(), 8);
        assert_ne!(a, b);
        assert_eq!(a, predict_noise(&z, 1, &seed(), &m).unwrap());
    }

    #[test]
    fn step_and_geometry_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = DenoiserModel::new(tiny(), &mut rng).unwrap();
        let z = LatentState::new(vec![0.3; 8], [2, 2, 2, 1], 1).unwrap();
        assert!(matches!(
            predict_noise(&z, 0, &seed(), &m),
            Err(LddmError::StepOutOfRange { .. })
        ));
        assert!(predict_noise(&z, 11, &seed(), &m).is_err());
        let wrong = LatentState::new(vec![0.3; 16], [2, 2, 2, 2], 1).unwrap();
        assert!(matches!(predict_noise(&wrong, 1, &seed(), &m), Err(LddmError::Geometry(_))));
    }

    #[test]
    fn checkpoint_round_trip_keeps_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = DenoiserModel::new(tiny(), &mut rng).unwrap();
        m.set_latent_norm(LatentNorm { mean: 0.5, std: 2.0 });
        let bytes = m.to_checkpoint().to_bytes();
        let back = DenoiserModel::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.latent_norm(), m.latent_norm());
        assert_eq!(back.to_checkpoint().to_bytes(), bytes);
    }
}
