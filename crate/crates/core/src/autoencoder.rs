//! Video autoencoder: a 3D-convolutional residual encoder `E` mapping a clip to
//! the latent dynamic embedding, and a decoder `D` that rebuilds the clip from
//! that latent plus the first frame, modulated by AdaIN at every scale.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{LddmError, Result};
use crate::graph::{Graph, Var};
use crate::nn::{conv, init_conv, init_linear, linear, Adam, BatchSampler, Bound, ParamStore, TrainConfig, TrainingLog};
use crate::tensor::Tensor;
use crate::video::{Geometry, LatentDynamic, SeedImage, VideoClip};

/// Numerical guard in the AdaIN denominator `σ_c + ε`.
pub const ADAIN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub geometry: Geometry,
    /// Hidden channel width of both networks.
    pub features: usize,
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.features == 0 {
            return Err(LddmError::Config("autoencoder features must be positive".into()));
        }
        Ok(())
    }

    fn latent_channels(&self) -> usize {
        self.geometry.channels / self.geometry.r
    }
}

/// Per-channel AdaIN modulation.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaInParams {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

/// `scale_c · (x_c − μ_c) / (σ_c + ε) + shift_c` for `features: [C, ...]`,
/// with `μ_c`, `σ_c` the mean and (population) standard deviation of channel `c`.
pub fn adain(features: &Tensor, params: &AdaInParams) -> Result<Tensor> {
    let c = *features
        .shape()
        .first()
        .ok_or(LddmError::EmptyInput("adain features"))?;
    if params.scale.len() != c || params.shift.len() != c {
        return Err(LddmError::ShapeMismatch {
            expected: vec![c],
            found: vec![params.scale.len(), params.shift.len()],
        });
    }
    let mut shape = vec![1];
    shape.extend_from_slice(features.shape());
    if shape.len() < 3 {
        shape.push(1);
    }
    let mut g = Graph::new();
    let x = g.constant(features.clone().reshape(&shape)?);
    let s = g.constant(Tensor::new(vec![1, c], params.scale.clone())?);
    let b = g.constant(Tensor::new(vec![1, c], params.shift.clone())?);
    let y = adain_node(&mut g, x, s, b)?;
    g.value(y).clone().reshape(features.shape())
}

/// Graph form of [`adain`] for `x: [N, C, ...]` with `scale, shift: [N, C]`.
pub fn adain_node(g: &mut Graph, x: Var, scale: Var, shift: Var) -> Result<Var> {
    let n = g.instance_norm(x, ADAIN_EPS)?;
    let m = g.mul_channel(n, scale)?;
    g.add_channel(m, shift)
}

/// Stacks clips into a channel-first batch `[N, C, Γ, H, W]`.
pub fn clips_to_tensor(clips: &[&VideoClip]) -> Result<Tensor> {
    let first = clips.first().ok_or(LddmError::EmptyInput("clip batch"))?;
    let [d, h, w, c] = first.shape();
    let items: Vec<Vec<f64>> = clips
        .iter()
        .map(|cl| {
            if cl.shape() != first.shape() {
                return Err(LddmError::Geometry(format!(
                    "clip geometry {:?} differs from {:?}",
                    cl.shape(),
                    first.shape()
                )));
            }
            Ok(cl.to_channel_first())
        })
        .collect::<Result<_>>()?;
    Tensor::stack(&items, &[c, d, h, w])
}

/// Stacks seed images into `[N, C, 1, H, W]`.
pub fn seeds_to_tensor(seeds: &[&SeedImage]) -> Result<Tensor> {
    let first = seeds.first().ok_or(LddmError::EmptyInput("seed batch"))?;
    let [h, w, c] = first.shape();
    let items: Vec<Vec<f64>> = seeds
        .iter()
        .map(|s| {
            if s.shape() != first.shape() {
                return Err(LddmError::Geometry("seed geometry differs within batch".into()));
            }
            Ok(s.to_channel_first())
        })
        .collect::<Result<_>>()?;
    Tensor::stack(&items, &[c, 1, h, w])
}

/// Stacks latents into `[N, C/r, Γ/r, H/r, W/r]`.
pub fn latents_to_tensor(latents: &[&LatentDynamic]) -> Result<Tensor> {
    let first = latents.first().ok_or(LddmError::EmptyInput("latent batch"))?;
    let [d, h, w, c] = first.shape;
    let items: Vec<Vec<f64>> = latents.iter().map(|l| l.to_channel_first()).collect();
    Tensor::stack(&items, &[c, d, h, w])
}

fn check_clip(geometry: &Geometry, clip: &VideoClip) -> Result<()> {
    if clip.shape() != geometry.clip_shape() {
        return Err(LddmError::Geometry(format!(
            "clip {:?} does not match configured {:?}",
            clip.shape(),
            geometry.clip_shape()
        )));
    }
    Ok(())
}

fn check_seed(geometry: &Geometry, seed: &SeedImage) -> Result<()> {
    let s = geometry.clip_shape();
    if seed.shape() != [s[1], s[2], s[3]] {
        return Err(LddmError::Geometry(format!(
            "seed image {:?} does not match frame geometry {:?}",
            seed.shape(),
            &s[1..]
        )));
    }
    Ok(())
}

const K3: [usize; 3] = [3, 3, 3];
const P1: [usize; 3] = [1, 1, 1];
const S1: [usize; 3] = [1, 1, 1];

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: AutoencoderConfig,
    params: ParamStore,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(config: AutoencoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (c, f) = (config.geometry.channels, config.features);
        let mut p = ParamStore::new();
        init_conv(&mut p, "enc.stem", c, f, K3, rng);
        init_conv(&mut p, "enc.res1.a", f, f, K3, rng);
        init_conv(&mut p, "enc.res1.b", f, f, K3, rng);
        init_conv(&mut p, "enc.down", f, f, K3, rng);
        init_conv(&mut p, "enc.res2.a", f, f, K3, rng);
        init_conv(&mut p, "enc.res2.b", f, f, K3, rng);
        init_conv(&mut p, "enc.head", f, config.latent_channels(), [1, 1, 1], rng);
        Ok(Self { config, params: p })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// `x: [N, C, Γ, H, W]` → `[N, C/r, Γ/r, H/r, W/r]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let r = self.config.geometry.r;
        let h = conv(g, p, "enc.stem", x, S1, P1)?;
        let h = g.silu(h);
        let h = residual(g, p, "enc.res1", h)?;
        let h = conv(g, p, "enc.down", h, [r, r, r], P1)?;
        let h = g.silu(h);
        let h = residual(g, p, "enc.res2", h)?;
        conv(g, p, "enc.head", h, S1, [0, 0, 0])
    }

    pub fn encode(&self, clip: &VideoClip) -> Result<LatentDynamic> {
        Ok(self.encode_batch(&[clip])?.remove(0))
    }

    pub fn encode_batch(&self, clips: &[&VideoClip]) -> Result<Vec<LatentDynamic>> {
        for c in clips {
            check_clip(&self.config.geometry, c)?;
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.constant(clips_to_tensor(clips)?);
        let z = self.forward(&mut g, &p, x)?;
        let shape = self.config.geometry.latent_shape();
        let out = g.value(z);
        (0..clips.len())
            .map(|i| LatentDynamic::from_channel_first(&out.item(i), shape))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            "encoder",
            serde_json::to_value(self.config).expect("config serializes"),
            self.params.clone(),
        )
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let config: AutoencoderConfig = c.arch_as()?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Self::new(config, &mut rng)?;
        model.params = load_params(&model.params, &c.params)?;
        Ok(model)
    }
}

fn residual(g: &mut Graph, p: &Bound, name: &str, h: Var) -> Result<Var> {
    let r = conv(g, p, &format!("{name}.a"), h, S1, P1)?;
    let r = g.silu(r);
    let r = conv(g, p, &format!("{name}.b"), r, S1, P1)?;
    let s = g.add(h, r)?;
    Ok(g.silu(s))
}

/// Copies tensors from `loaded` after checking names and shapes against `template`.
pub(crate) fn load_params(template: &ParamStore, loaded: &ParamStore) -> Result<ParamStore> {
    if template.len() != loaded.len() {
        return Err(LddmError::MalformedHeader(format!(
            "checkpoint holds {} tensors, architecture expects {}",
            loaded.len(),
            template.len()
        )));
    }
    let mut out = ParamStore::new();
    for (name, t) in template.iter() {
        let l = loaded
            .get(name)
            .ok_or_else(|| LddmError::MalformedHeader(format!("missing tensor {name}")))?;
        if l.shape() != t.shape() {
            return Err(LddmError::MalformedHeader(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                l.shape(),
                t.shape()
            )));
        }
        out.insert(name, l.clone());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    config: AutoencoderConfig,
    params: ParamStore,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(config: AutoencoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let geo = config.geometry;
        let (c, f, cz) = (geo.channels, config.features, config.latent_channels());
        let style_dim = cz * geo.frames / geo.r;
        let mut p = ParamStore::new();
        init_conv(&mut p, "dec.seed_stem", c, f, [1, 3, 3], rng);
        init_conv(&mut p, "dec.latent_in", cz, f, K3, rng);
        for scale in ["low", "high"] {
            init_conv(&mut p, &format!("dec.{scale}.conv"), f, f, K3, rng);
            init_linear(&mut p, &format!("dec.{scale}.style_scale"), style_dim, f, 0.1, rng);
            init_linear(&mut p, &format!("dec.{scale}.style_shift"), style_dim, f, 0.1, rng);
        }
        init_conv(&mut p, "dec.out", f, c, K3, rng);
        Ok(Self { config, params: p })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// AdaIN parameters for one decoder scale, derived from the spatially
    /// pooled latent: `scale = 1 + A·s`, `shift = B·s`.
    fn style(&self, g: &mut Graph, p: &Bound, name: &str, pooled: Var) -> Result<(Var, Var)> {
        let s = linear(g, p, &format!("dec.{name}.style_scale"), pooled)?;
        let s = g.add_scalar(s, 1.0);
        let b = linear(g, p, &format!("dec.{name}.style_shift"), pooled)?;
        Ok((s, b))
    }

    /// `z: [N, C/r, Γ/r, H/r, W/r]`, `seed: [N, C, 1, H, W]` → clip batch in `(0, 1)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, z: Var, seed: Var) -> Result<Var> {
        let geo = self.config.geometry;
        let r = geo.r;
        let pooled = g.pool_spatial(z)?;

        let s_full = conv(g, p, "dec.seed_stem", seed, S1, [0, 1, 1])?;
        let s_full = g.silu(s_full);
        let s_low = g.avg_pool(s_full, [1, r, r])?;

        let h = conv(g, p, "dec.latent_in", z, S1, P1)?;
        let s_rep = g.repeat_time(s_low, geo.frames / r)?;
        let h = g.add(h, s_rep)?;
        let h = g.silu(h);

        let h = conv(g, p, "dec.low.conv", h, S1, P1)?;
        let (sc, sh) = self.style(g, p, "low", pooled)?;
        let h = adain_node(g, h, sc, sh)?;
        let h = g.silu(h);

        let h = g.upsample(h, [r, r, r])?;
        let s_rep = g.repeat_time(s_full, geo.frames)?;
        let h = g.add(h, s_rep)?;
        let h = conv(g, p, "dec.high.conv", h, S1, P1)?;
        let (sc, sh) = self.style(g, p, "high", pooled)?;
        let h = adain_node(g, h, sc, sh)?;
        let h = g.silu(h);

        let out = conv(g, p, "dec.out", h, S1, P1)?;
        Ok(g.sigmoid(out))
    }

    pub fn decode(&self, latent: &LatentDynamic, seed: &SeedImage) -> Result<VideoClip> {
        Ok(self.decode_batch(&[latent], &[seed])?.remove(0))
    }

    pub fn decode_batch(
        &self,
        latents: &[&LatentDynamic],
        seeds: &[&SeedImage],
    ) -> Result<Vec<VideoClip>> {
        if latents.len() != seeds.len() {
            return Err(LddmError::InvalidArgument(
                "one seed image per latent required".into(),
            ));
        }
        let geo = self.config.geometry;
        for (l, s) in latents.iter().zip(seeds) {
            if l.shape != geo.latent_shape() {
                return Err(LddmError::Geometry(format!(
                    "latent {:?} does not match {:?}",
                    l.shape,
                    geo.latent_shape()
                )));
            }
            check_seed(&geo, s)?;
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let z = g.constant(latents_to_tensor(latents)?);
        let x0 = g.constant(seeds_to_tensor(seeds)?);
        let y = self.forward(&mut g, &p, z, x0)?;
        let out = g.value(y);
        (0..latents.len())
            .map(|i| VideoClip::from_channel_first(&out.item(i), geo.clip_shape()))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            "decoder",
            serde_json::to_value(self.config).expect("config serializes"),
            self.params.clone(),
        )
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let config: AutoencoderConfig = c.arch_as()?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Self::new(config, &mut rng)?;
        model.params = load_params(&model.params, &c.params)?;
        Ok(model)
    }
}

/// Mean squared error over all elements of two equally shaped clips.
pub fn reconstruction_loss(original: &VideoClip, reconstructed: &VideoClip) -> Result<f64> {
    if original.shape() != reconstructed.shape() {
        return Err(LddmError::Geometry(format!(
            "cannot compare {:?} with {:?}",
            original.shape(),
            reconstructed.shape()
        )));
    }
    let n = original.data().len() as f64;
    Ok(original
        .data()
        .iter()
        .zip(reconstructed.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / n)
}

/// Encoder and decoder trained jointly on `MSE(D(E(v), v[0]), v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// Loss plus parameter gradients for one batch.
pub struct AutoencoderGrads {
    pub loss: f64,
    pub encoder: Vec<Tensor>,
    pub decoder: Vec<Tensor>,
}

impl Autoencoder {
    pub fn new<R: Rng + ?Sized>(config: AutoencoderConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            encoder: Encoder::new(config, rng)?,
            decoder: Decoder::new(config, rng)?,
        })
    }

    fn build(&self, g: &mut Graph, clips: &[&VideoClip]) -> Result<(Bound, Bound, Var)> {
        let geo = self.encoder.config.geometry;
        for c in clips {
            check_clip(&geo, c)?;
        }
        let pe = self.encoder.params.bind(g);
        let pd = self.decoder.params.bind(g);
        let x = g.constant(clips_to_tensor(clips)?);
        let seeds: Vec<SeedImage> = clips.iter().map(|c| c.seed_image()).collect();
        let seed_refs: Vec<&SeedImage> = seeds.iter().collect();
        let x0 = g.constant(seeds_to_tensor(&seed_refs)?);
        let z = self.encoder.forward(g, &pe, x)?;
        let y = self.decoder.forward(g, &pd, z, x0)?;
        let loss = g.mse(y, x)?;
        Ok((pe, pd, loss))
    }

    pub fn loss(&self, clips: &[&VideoClip]) -> Result<f64> {
        let mut g = Graph::new();
        let (_, _, loss) = self.build(&mut g, clips)?;
        Ok(g.value(loss).data()[0])
    }

    pub fn loss_and_grads(&self, clips: &[&VideoClip]) -> Result<AutoencoderGrads> {
        let mut g = Graph::new();
        let (pe, pd, loss) = self.build(&mut g, clips)?;
        let grads = g.backward(loss)?;
        Ok(AutoencoderGrads {
            loss: g.value(loss).data()[0],
            encoder: self.encoder.params.collect_grads(&pe, &grads),
            decoder: self.decoder.params.collect_grads(&pd, &grads),
        })
    }
}

/// Stage-1 training. The loss log records the pre-update batch loss of every step.
pub fn train_autoencoder<R: Rng + ?Sized>(
    clips: &[VideoClip],
    config: AutoencoderConfig,
    train: &TrainConfig,
    rng: &mut R,
) -> Result<(Encoder, Decoder, TrainingLog)> {
    train.validate()?;
    if clips.is_empty() {
        return Err(LddmError::EmptyInput("autoencoder training set"));
    }
    for c in clips {
        check_clip(&config.geometry, c)?;
    }
    let mut model = Autoencoder::new(config, rng)?;
    let mut opt_e = Adam::new(train.learning_rate, &model.encoder.params);
    let mut opt_d = Adam::new(train.learning_rate, &model.decoder.params);
    let mut sampler = BatchSampler::new(clips.len(), train.batch_size);
    let mut log = TrainingLog::default();
    for step in 0..train.total_steps(clips.len()) {
        let batch: Vec<&VideoClip> = sampler.next_batch(rng).into_iter().map(|i| &clips[i]).collect();
        let out = model.loss_and_grads(&batch)?;
        if !out.loss.is_finite() {
            return Err(LddmError::NonFiniteLoss {
                step,
                value: out.loss,
            });
        }
        log.losses.push(out.loss);
        opt_e.step(&mut model.encoder.params, &out.encoder);
        opt_d.step(&mut model.decoder.params, &out.decoder);
    }
    Ok((model.encoder, model.decoder, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> AutoencoderConfig {
        AutoencoderConfig {
            geometry: Geometry {
                frames: 4,
                height: 4,
                width: 4,
                channels: 2,
                r: 2,
            },
            features: 3,
        }
    }

    fn clip(seed: u64) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..4 * 4 * 4 * 2).map(|_| rng.gen::<f32>()).collect();
        VideoClip::new(v, [4, 4, 4, 2]).unwrap()
    }

    #[test]
    fn adain_identity_params_normalize() {
        let x = Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 8.0]).unwrap();
        let y = adain(&x, &AdaInParams { scale: vec![1.0; 2], shift: vec![0.0; 2] }).unwrap();
        for ch in y.data().chunks(4) {
            let (m, s) = crate::graph::mean_std(ch);
            assert!(m.abs() < 1e-12);
            assert!((s - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn adain_constant_channel_yields_shift() {
        let x = Tensor::full(&[1, 5], 0.7);
        let y = adain(&x, &AdaInParams { scale: vec![3.0], shift: vec![-2.0] }).unwrap();
        assert!(y.data().iter().all(|&v| v == -2.0));
    }

    #[test]
    fn adain_scale_shift_example() {
        let x = Tensor::new(vec![1, 2], vec![0.0, 2.0]).unwrap();
        let y = adain(&x, &AdaInParams { scale: vec![2.0], shift: vec![3.0] }).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-3 && (y.data()[1] - 5.0).abs() < 1e-3);
    }

    #[test]
    fn adain_restores_input_with_its_own_statistics() {
        let x = Tensor::new(vec![2, 3], vec![0.2, 0.9, 0.4, 5.0, 1.0, -3.0]).unwrap();
        let stats: Vec<(f64, f64)> = x.data().chunks(3).map(crate::graph::mean_std).collect();
        let params = AdaInParams {
            scale: stats.iter().map(|s| s.1).collect(),
            shift: stats.iter().map(|s| s.0).collect(),
        };
        let y = adain(&x, &params).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-4);
        }
        assert!(adain(&x, &AdaInParams { scale: vec![1.0], shift: vec![0.0] }).is_err());
    }

    #[test]
    fn shapes_and_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ae = Autoencoder::new(tiny(), &mut rng).unwrap();
        let c = clip(1);
        let z = ae.encoder.encode(&c).unwrap();
        assert_eq!(z.shape, [2, 2, 2, 1]);
        assert!(z.values.iter().all(|v| v.is_finite()));
        let y = ae.decoder.decode(&z, &c.seed_image()).unwrap();
        assert_eq!(y.shape(), c.shape());
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(ae.decoder.decode(&z, &c.seed_image()).unwrap(), y);
        assert_eq!(ae.encoder.encode(&c).unwrap(), z);
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ae = Autoencoder::new(tiny(), &mut rng).unwrap();
        let wrong = VideoClip::new(vec![0.5; 8 * 4 * 4 * 2], [8, 4, 4, 2]).unwrap();
        assert!(matches!(ae.encoder.encode(&wrong), Err(LddmError::Geometry(_))));
    }

    #[test]
    fn reconstruction_loss_examples() {
        let zeros = VideoClip::new(vec![0.0; 8], [2, 2, 2, 1]).unwrap();
        let ones = VideoClip::new(vec![1.0; 8], [2, 2, 2, 1]).unwrap();
        assert_eq!(reconstruction_loss(&zeros, &zeros).unwrap(), 0.0);
        assert_eq!(reconstruction_loss(&zeros, &ones).unwrap(), 1.0);
        let a = VideoClip::new(vec![0.25; 8], [2, 2, 2, 1]).unwrap();
        let b = VideoClip::new(vec![0.35; 8], [2, 2, 2, 1]).unwrap();
        assert!((reconstruction_loss(&a, &b).unwrap() - 0.01).abs() < 1e-7);
        let other = VideoClip::new(vec![0.0; 4], [1, 2, 2, 1]).unwrap();
        assert!(reconstruction_loss(&zeros, &other).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ae = Autoencoder::new(tiny(), &mut rng).unwrap();
        let ck = ae.decoder.to_checkpoint();
        let loaded = Decoder::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(loaded.to_checkpoint().to_bytes(), ck.to_bytes());
        assert!(Encoder::from_checkpoint(&ck).is_err());
    }
}
