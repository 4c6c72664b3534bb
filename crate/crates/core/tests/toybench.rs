//! The toy generator's labels are recoverable by a hand-written rule that
//! tracks the blob and looks for reversals of its horizontal velocity.

use lddm::data::{generate_toy_dataset, prepare_clips, ToyGenParams, TOY_BACKGROUND};
use lddm::video::VideoClip;

fn params(noise_std: f64, seed: u64) -> ToyGenParams {
    ToyGenParams {
        videos_per_class: 40,
        frames: 48,
        height: 16,
        width: 16,
        channels: 2,
        class0_motion: Default::default(),
        class1_motion: Default::default(),
        blob_size: 1.2,
        speed: 0.2,
        amplitude: 2.5,
        period: 24.0,
        noise_std,
        seed,
    }
}

/// Intensity-weighted column of the blob in each frame, ignoring pixels near
/// the background level.
fn column_track(clip: &VideoClip) -> Vec<f64> {
    let [frames, h, w, c] = clip.shape();
    (0..frames)
        .map(|f| {
            let px = clip.frame(f);
            let (mut sum, mut wsum) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let v = px[(y * w + x) * c] as f64 - TOY_BACKGROUND - 0.15;
                    if v > 0.0 {
                        sum += v * x as f64;
                        wsum += v;
                    }
                }
            }
            sum / wsum
        })
        .collect()
}

/// 1 when the lagged velocity changes sign (beyond a dead band), else 0.
fn oracle_label(clip: &VideoClip, lag: usize, dead_band: f64) -> u8 {
    let track = column_track(clip);
    let mut last_sign = 0.0f64;
    for i in 0..track.len() - lag {
        let v = track[i + lag] - track[i];
        if v.abs() < dead_band {
            continue;
        }
        let s = v.signum();
        if last_sign != 0.0 && s != last_sign {
            return 1;
        }
        last_sign = s;
    }
    0
}

#[test]
fn oracle_recovers_every_label_on_raw_videos() {
    for noise in [0.0, 0.02, 0.05] {
        for seed in [1, 2, 3] {
            let ds = generate_toy_dataset(&params(noise, seed)).unwrap();
            for it in ds.items() {
                assert_eq!(
                    oracle_label(&it.clip, 6, 0.5),
                    it.label,
                    "noise {noise} seed {seed} item {}",
                    it.source_id
                );
            }
        }
    }
}

#[test]
fn oracle_recovers_every_label_on_sampled_clips() {
    for noise in [0.0, 0.05] {
        let ds = prepare_clips(&generate_toy_dataset(&params(noise, 9)).unwrap(), 48, 16, None).unwrap();
        assert_eq!(ds.geometry(), Some([16, 16, 16, 2]));
        for it in ds.items() {
            assert_eq!(oracle_label(&it.clip, 2, 0.5), it.label, "noise {noise} item {}", it.source_id);
        }
    }
}
