#![allow(dead_code)]

use lddm::autoencoder::{latents_to_tensor, seeds_to_tensor, Autoencoder, AutoencoderConfig};
use lddm::denoiser::{DenoiserConfig, DenoiserModel};
use lddm::graph::Graph;
use lddm::checkpoint::Checkpoint;
use lddm::nn::{init_conv, init_linear, ParamStore};
use lddm::tensor::Tensor;
use lddm::video::{Geometry, LatentDynamic, SeedImage, VideoClip};
use lddm::LddmError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `|a − n| / max(|a|, |n|, 1e-6)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares every element of `grads` against central finite differences of
/// `loss` with respect to the matching element of `store`. Returns the worst
/// relative error and the parameter index / element where it occurred.
pub fn gradcheck(
    store: &mut ParamStore,
    grads: &[Tensor],
    h: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> (f64, usize, usize) {
    let mut worst = (0.0, 0, 0);
    let n = store.len();
    assert_eq!(grads.len(), n);
    for k in 0..n {
        let len = grads[k].len();
        for i in 0..len {
            let orig = nth(store, k).data()[i];
            nth(store, k).data_mut()[i] = orig + h;
            let up = loss(store);
            nth(store, k).data_mut()[i] = orig - h;
            let down = loss(store);
            nth(store, k).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let e = relative_error(grads[k].data()[i], numeric);
            if e > worst.0 {
                worst = (e, k, i);
            }
        }
    }
    worst
}

fn nth(store: &mut ParamStore, k: usize) -> &mut Tensor {
    store.tensors_mut().nth(k).expect("parameter index in range")
}

/// Finite-difference step used by the model gradient checks.
pub const H: f64 = 1e-5;

pub fn mini_geometry() -> Geometry {
    Geometry {
        frames: 4,
        height: 4,
        width: 4,
        channels: 2,
        r: 2,
    }
}

pub fn random_clip(rng: &mut ChaCha8Rng, g: Geometry) -> VideoClip {
    let shape = g.clip_shape();
    let n: usize = shape.iter().product();
    VideoClip::new((0..n).map(|_| rng.gen_range(0.05..0.95)).collect(), shape).unwrap()
}

/// Worst relative gradient error of a miniature encoder: `(error, tensor, element)`.
pub fn encoder_gradcheck() -> (f64, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = AutoencoderConfig {
        geometry: mini_geometry(),
        features: 3,
    };
    let mut ae = Autoencoder::new(cfg, &mut rng).unwrap();
    let clips: Vec<VideoClip> = (0..2).map(|_| random_clip(&mut rng, cfg.geometry)).collect();
    let refs: Vec<&VideoClip> = clips.iter().collect();
    let grads = ae.loss_and_grads(&refs).unwrap().encoder;
    let template = ae.clone();
    gradcheck(ae.encoder.params_mut(), &grads, H, |p| {
        let mut m = template.clone();
        *m.encoder.params_mut() = p.clone();
        m.loss(&refs).unwrap()
    })
}

/// Worst relative gradient error of a miniature decoder: `(error, tensor, element)`.
pub fn decoder_gradcheck() -> (f64, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = AutoencoderConfig {
        geometry: mini_geometry(),
        features: 3,
    };
    let mut decoder = lddm::autoencoder::Decoder::new(cfg, &mut rng).unwrap();
    let ls = cfg.geometry.latent_shape();
    let latents: Vec<LatentDynamic> = (0..2)
        .map(|_| LatentDynamic::new((0..cfg.geometry.latent_len()).map(|_| rng.gen_range(-1.0..1.0)).collect(), ls).unwrap())
        .collect();
    let targets: Vec<VideoClip> = (0..2).map(|_| random_clip(&mut rng, cfg.geometry)).collect();
    let seeds: Vec<SeedImage> = targets.iter().map(|c| c.seed_image()).collect();

    let eval = |d: &lddm::autoencoder::Decoder, want_grads: bool| {
        let mut g = Graph::new();
        let p = d.params().bind(&mut g);
        let lr: Vec<&LatentDynamic> = latents.iter().collect();
        let sr: Vec<&SeedImage> = seeds.iter().collect();
        let tr: Vec<&VideoClip> = targets.iter().collect();
        let z = g.constant(latents_to_tensor(&lr).unwrap());
        let s = g.constant(seeds_to_tensor(&sr).unwrap());
        let y = d.forward(&mut g, &p, z, s).unwrap();
        let t = g.constant(lddm::autoencoder::clips_to_tensor(&tr).unwrap());
        let loss = g.mse(y, t).unwrap();
        let value = g.value(loss).data()[0];
        let grads = want_grads.then(|| {
            let gr = g.backward(loss).unwrap();
            d.params().collect_grads(&p, &gr)
        });
        (value, grads)
    };
    let grads = eval(&decoder, true).1.unwrap();
    let template = decoder.clone();
    gradcheck(decoder.params_mut(), &grads, H, |p| {
        let mut d = template.clone();
        *d.params_mut() = p.clone();
        eval(&d, false).0
    })
}

/// Worst relative gradient error of a miniature denoiser: `(error, tensor, element)`.
pub fn denoiser_gradcheck() -> (f64, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = DenoiserConfig {
        geometry: mini_geometry(),
        steps: 10,
        features: 3,
        time_dim: 4,
        blocks: 1,
    };
    let mut model = DenoiserModel::new(cfg, &mut rng).unwrap();
    let n = cfg.geometry.latent_len();
    let z: Vec<Vec<f64>> = (0..2).map(|_| (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect();
    let eps: Vec<Vec<f64>> = (0..2).map(|_| (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect();
    let seeds: Vec<SeedImage> = (0..2).map(|_| random_clip(&mut rng, cfg.geometry).seed_image()).collect();
    let zr: Vec<&[f64]> = z.iter().map(Vec::as_slice).collect();
    let er: Vec<&[f64]> = eps.iter().map(Vec::as_slice).collect();
    let sr: Vec<&SeedImage> = seeds.iter().collect();
    let ts = [3, 9];

    let (_, grads) = model.loss_and_grads(&zr, &ts, &sr, &er).unwrap();
    let template = model.clone();
    gradcheck(model.params_mut(), &grads, H, |p| {
        let mut m = template.clone();
        *m.params_mut() = p.clone();
        m.loss_and_grads(&zr, &ts, &sr, &er).unwrap().0
    })
}

/// Errors a container decoder may legitimately report.
pub fn is_format_error(e: &LddmError) -> bool {
    matches!(
        e,
        LddmError::BadMagic { .. }
            | LddmError::UnsupportedVersion(_)
            | LddmError::MalformedHeader(_)
            | LddmError::TruncatedPayload { .. }
            | LddmError::Geometry(_)
            | LddmError::ShapeMismatch { .. }
            | LddmError::InvalidValue { .. }
    )
}

/// Applies one random corruption to the fixed prefix or JSON header.
pub fn mutate(bytes: &[u8], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let header_end = 9 + header_len;
    let mut out = bytes.to_vec();
    match rng.gen_range(0..7) {
        0 => {
            let i = rng.gen_range(0..header_end);
            out[i] = rng.gen();
        }
        1 => {
            let i = rng.gen_range(0..header_end);
            out[i] ^= 1 << rng.gen_range(0..8);
        }
        2 => out.truncate(rng.gen_range(0..header_end + 8)),
        3 => {
            let len = rng.gen_range(0..(header_len as u32 * 2));
            out[5..9].copy_from_slice(&len.to_le_bytes());
        }
        4 => {
            // Replace one digit in the header with another digit.
            let digits: Vec<usize> = (9..header_end).filter(|&i| out[i].is_ascii_digit()).collect();
            if let Some(&i) = digits.get(rng.gen_range(0..digits.len().max(1))) {
                out[i] = b'0' + rng.gen_range(0..10);
            }
        }
        5 => {
            let i = rng.gen_range(9..header_end);
            let junk: Vec<u8> = (0..rng.gen_range(1..6)).map(|_| rng.gen()).collect();
            out.splice(i..i, junk);
            let new_len = (header_len + out.len() - bytes.len()) as u32;
            out[5..9].copy_from_slice(&new_len.to_le_bytes());
        }
        _ => {
            for _ in 0..rng.gen_range(2..8) {
                let i = rng.gen_range(0..header_end);
                out[i] = rng.gen();
            }
        }
    }
    out
}


/// A small clip with random pixels and a frame rate.
pub fn sample_clip(rng: &mut ChaCha8Rng) -> VideoClip {
    let shape = [5, 4, 3, 2];
    let n: usize = shape.iter().product();
    VideoClip::new((0..n).map(|_| rng.gen::<f32>()).collect(), shape)
        .unwrap()
        .with_fps(Some(12.5))
}

pub fn sample_checkpoint(rng: &mut ChaCha8Rng) -> Checkpoint {
    let mut p = ParamStore::new();
    init_conv(&mut p, "conv", 2, 3, [3, 3, 3], rng);
    init_linear(&mut p, "fc", 3, 2, 1.0, rng);
    let mut c = Checkpoint::new("classifier", serde_json::json!({"features": 3}), p);
    c.extra.insert("note".into(), serde_json::json!([1, 2, 3]));
    c
}

