//! Browser bindings for three small views of the library: the noise schedule,
//! forward noising of a single frame, and the two-class toy generator.

use lddm::data::{generate_toy_dataset, ToyGenParams};
use lddm::diffusion::{forward_marginal, make_linear_schedule, LatentState, NoiseSchedule, SigmaMode};
use lddm::video::VideoClip;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

pub const SIDE: usize = 32;
pub const FRAMES: usize = 48;

fn js_err(e: lddm::LddmError) -> JsError {
    JsError::new(&e.to_string())
}

fn schedule(beta_start: f64, beta_end: f64, steps: usize) -> Result<NoiseSchedule, JsError> {
    make_linear_schedule(beta_start, beta_end, steps, SigmaMode::Beta).map_err(js_err)
}

/// `ᾱ_t` for `t = 1..=steps`.
#[wasm_bindgen]
pub fn alpha_bar_curve(beta_start: f64, beta_end: f64, steps: usize) -> Result<Vec<f64>, JsError> {
    let s = schedule(beta_start, beta_end, steps)?;
    Ok((1..=steps).map(|t| s.alpha_bar(t)).collect())
}

/// `log10 SNR(t)` for `t = 1..=steps`.
#[wasm_bindgen]
pub fn log_snr_curve(beta_start: f64, beta_end: f64, steps: usize) -> Result<Vec<f64>, JsError> {
    let s = schedule(beta_start, beta_end, steps)?;
    Ok((1..=steps).map(|t| s.snr(t).log10()).collect())
}

fn toy_clip(label: u8, seed: u64, noise_std: f64) -> Result<VideoClip, JsError> {
    let p = ToyGenParams {
        videos_per_class: 1,
        frames: FRAMES,
        height: SIDE,
        width: SIDE,
        channels: 2,
        class0_motion: Default::default(),
        class1_motion: Default::default(),
        blob_size: 2.0,
        speed: 0.3,
        amplitude: 6.0,
        period: 24.0,
        noise_std,
        seed,
    };
    let ds = generate_toy_dataset(&p).map_err(js_err)?;
    let item = ds.items().iter().find(|i| i.label == label).ok_or_else(|| JsError::new("no item for label"))?;
    Ok(item.clip.clone())
}

fn first_channel(pixels: &[f32], channels: usize) -> impl Iterator<Item = f64> + '_ {
    pixels.iter().step_by(channels).map(|&v| v as f64)
}

/// Grey RGBA bytes for one `SIDE × SIDE` frame with values in `[lo, hi]`.
fn rgba(values: impl Iterator<Item = f64>, lo: f64, hi: f64) -> Vec<u8> {
    values
        .flat_map(|v| {
            let g = ((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0;
            let g = g.round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

/// Every frame of a toy video as concatenated RGBA images of `SIDE × SIDE`.
#[wasm_bindgen]
pub fn toy_video_rgba(label: u8, seed: u64, noise_std: f64) -> Result<Vec<u8>, JsError> {
    let clip = toy_clip(label, seed, noise_std)?;
    let c = clip.shape()[3];
    Ok((0..clip.frame_count())
        .flat_map(|f| rgba(first_channel(clip.frame(f), c), 0.0, 1.0))
        .collect())
}

/// First toy frame, rescaled to `[-1, 1]` and pushed through the closed-form
/// forward marginal at step `t`. Displayed over `[-3, 3]`.
#[wasm_bindgen]
pub fn noised_frame_rgba(
    label: u8,
    seed: u64,
    beta_start: f64,
    beta_end: f64,
    steps: usize,
    t: usize,
) -> Result<Vec<u8>, JsError> {
    let s = schedule(beta_start, beta_end, steps)?;
    let clip = toy_clip(label, seed, 0.0)?;
    let c = clip.shape()[3];
    let z0: Vec<f64> = first_channel(clip.frame(0), c).map(|v| 2.0 * v - 1.0).collect();
    let z0 = LatentState::clean(z0, [1, SIDE, SIDE, 1]).map_err(js_err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ t as u64);
    let zt = if t == 0 {
        z0
    } else {
        forward_marginal(&z0, t, &s, &mut rng).map_err(js_err)?.0
    };
    Ok(rgba(zt.values.iter().copied(), -3.0, 3.0))
}
