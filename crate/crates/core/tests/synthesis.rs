//! Synthesis with small untrained models: contracts that hold regardless of
//! training quality.

use lddm::autoencoder::{AutoencoderConfig, Decoder};
use lddm::data::load_dataset;
use lddm::denoiser::{DenoiserConfig, DenoiserModel};
use lddm::diffusion::{make_linear_schedule, SigmaMode};
use lddm::synthesis::{batch_synthesize, derived_rng, save_synthetic, synthesize_video, PerImage, SourceImage, SynthesisBundle, SynthesisRecord};
use lddm::video::{Geometry, SeedImage};
use lddm::LddmError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GEO: Geometry = Geometry {
    frames: 4,
    height: 4,
    width: 4,
    channels: 2,
    r: 2,
};

fn bundle(steps: usize) -> SynthesisBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let decoder = Decoder::new(AutoencoderConfig { geometry: GEO, features: 3 }, &mut rng).unwrap();
    let denoiser = DenoiserModel::new(
        DenoiserConfig {
            geometry: GEO,
            steps,
            features: 3,
            time_dim: 4,
            blocks: 1,
        },
        &mut rng,
    )
    .unwrap();
    SynthesisBundle::new(decoder, denoiser, make_linear_schedule(1e-3, 0.2, steps, SigmaMode::Beta).unwrap()).unwrap()
}

fn images(sizes: [usize; 2]) -> Vec<SourceImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    (0..sizes[0] + sizes[1])
        .map(|i| SourceImage {
            image: SeedImage::new((0..32).map(|_| rng.gen()).collect(), [4, 4, 2]).unwrap(),
            label: u8::from(i >= sizes[0]),
            id: format!("img-{i}"),
        })
        .collect()
}

#[test]
fn labels_follow_their_seed_images_and_clips_are_valid() {
    let b = bundle(8);
    let imgs = images([3, 5]);
    let out = batch_synthesize(&imgs, PerImage::Balanced { target: 20 }, &b, 5).unwrap();
    assert_eq!(out.len(), 40);
    let counts = out.iter().fold([0, 0], |mut c, s| {
        c[s.label as usize] += 1;
        c
    });
    assert_eq!(counts, [20, 20]);
    for s in &out {
        let src = imgs.iter().find(|i| i.id == s.source_image_id).unwrap();
        assert_eq!(s.label, src.label);
        assert_eq!(s.clip.shape(), GEO.clip_shape());
        assert!(s.clip.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }
}

#[test]
fn batching_does_not_change_results() {
    let b = bundle(6);
    let imgs = images([20, 20]);
    let out = batch_synthesize(&imgs, PerImage::Fixed(1), &b, 77).unwrap();
    assert_eq!(out.len(), 40);
    for i in [0usize, 13, 31, 32, 39] {
        let mut rng = derived_rng(77, i as u64);
        let single = synthesize_video(&imgs[i].image, &b, &mut rng).unwrap();
        assert_eq!(single, out[i].clip, "clip {i}");
        assert_eq!(out[i].rng_key.index, i as u64);
    }
    let again = batch_synthesize(&imgs, PerImage::Fixed(1), &b, 77).unwrap();
    assert_eq!(out, again);
}

#[test]
fn mismatched_components_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let decoder = Decoder::new(AutoencoderConfig { geometry: GEO, features: 3 }, &mut rng).unwrap();
    let other = Geometry { frames: 8, ..GEO };
    let denoiser = DenoiserModel::new(
        DenoiserConfig {
            geometry: other,
            steps: 5,
            features: 3,
            time_dim: 4,
            blocks: 1,
        },
        &mut rng,
    )
    .unwrap();
    let sched = make_linear_schedule(1e-3, 0.2, 5, SigmaMode::Beta).unwrap();
    assert!(matches!(SynthesisBundle::new(decoder.clone(), denoiser, sched), Err(LddmError::Geometry(_))));

    let denoiser = DenoiserModel::new(
        DenoiserConfig {
            geometry: GEO,
            steps: 5,
            features: 3,
            time_dim: 4,
            blocks: 1,
        },
        &mut rng,
    )
    .unwrap();
    let sched = make_linear_schedule(1e-3, 0.2, 7, SigmaMode::Beta).unwrap();
    assert!(SynthesisBundle::new(decoder, denoiser, sched).is_err());

    let b = bundle(4);
    let wrong = SeedImage::new(vec![0.5; 18], [3, 3, 2]).unwrap();
    assert!(matches!(synthesize_video(&wrong, &b, &mut derived_rng(0, 0)), Err(LddmError::Geometry(_))));
}

#[test]
fn saved_synthetic_sets_reload_with_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let b = bundle(4);
    let imgs = images([2, 2]);
    let out = batch_synthesize(&imgs, PerImage::Fixed(2), &b, 3).unwrap();
    let manifest = save_synthetic(&out, dir.path()).unwrap();
    let ds = load_dataset(&manifest).unwrap();
    assert_eq!(ds.len(), 8);
    assert_eq!(ds.provenance(), lddm::data::Provenance::Synthetic);
    for (item, s) in ds.items().iter().zip(&out) {
        assert_eq!(item.clip, s.clip);
        assert_eq!(item.label, s.label);
    }
    let records: Vec<SynthesisRecord> = std::fs::read_to_string(dir.path().join("synthesis.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 8);
    for (r, s) in records.iter().zip(&out) {
        assert_eq!(r.source_image_id, s.source_image_id);
        assert_eq!(r.rng_key, s.rng_key);
        assert!(dir.path().join(&r.path).exists());
    }
}
