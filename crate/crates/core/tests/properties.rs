//! Property tests over the invariants of schedules, data handling and metrics.

use std::collections::HashSet;

use lddm::data::{segment_and_sample, split_dataset, LabeledItem, LabeledVideoDataset, Provenance};
use lddm::denoiser::sample_timesteps;
use lddm::diffusion::{diffusion_loss, forward_marginal, make_linear_schedule, LatentState, SigmaMode};
use lddm::metrics::{corpus_distance, diversity_score, frechet_distance, FeatureExtractor, GaussianStats};
use lddm::video::VideoClip;
use lddm::Result;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_clip(value: f32) -> VideoClip {
    VideoClip::new(vec![value; 2], [1, 1, 1, 2]).unwrap()
}

fn dataset(n0: usize, n1: usize) -> LabeledVideoDataset {
    let items = (0..n0 + n1)
        .map(|i| LabeledItem {
            clip: tiny_clip(0.5),
            label: u8::from(i >= n0),
            source_id: format!("v{i}"),
        })
        .collect();
    LabeledVideoDataset::new(items, Provenance::Toy).unwrap()
}

fn ids(ds: &LabeledVideoDataset) -> Vec<String> {
    ds.items().iter().map(|i| i.source_id.clone()).collect()
}

/// Per-clip frame means and spatial means per channel.
struct MeanFeatures {
    scale: f64,
}

impl FeatureExtractor for MeanFeatures {
    fn descriptor(&self) -> String {
        format!("frame means x{}", self.scale)
    }

    fn dim(&self) -> usize {
        4
    }

    fn extract(&self, clips: &[&VideoClip]) -> Result<Vec<Vec<f64>>> {
        Ok(clips
            .iter()
            .map(|c| {
                let [f, ..] = c.shape();
                let mean = |i: usize| {
                    let fr = c.frame(i);
                    fr.iter().map(|&v| v as f64).sum::<f64>() / fr.len() as f64
                };
                let first = mean(0);
                let last = mean(f - 1);
                let all = c.data().iter().map(|&v| v as f64).sum::<f64>() / c.data().len() as f64;
                let max = c.data().iter().fold(0.0f64, |m, &v| m.max(v as f64));
                vec![first, last, all, max].into_iter().map(|v| v * self.scale).collect()
            })
            .collect())
    }
}

fn clip_corpus(values: &[Vec<f32>]) -> Vec<VideoClip> {
    values
        .iter()
        .map(|v| VideoClip::new(v.clone(), [3, 2, 2, 1]).unwrap())
        .collect()
}

fn corpus_strategy(min: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(prop::collection::vec(0.0f32..1.0, 12), min..min + 8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_algebra_and_decreasing_snr(start in 1e-5f64..0.05, span in 1e-4f64..0.5, steps in 2usize..300) {
        let s = make_linear_schedule(start, start + span, steps, SigmaMode::Beta).unwrap();
        for t in 1..=steps {
            let rec = s.alpha_bar(t - 1) * (1.0 - s.beta(t));
            prop_assert!((s.alpha_bar(t) - rec).abs() < 1e-12);
            if t > 1 {
                prop_assert!(s.snr(t) < s.snr(t - 1));
            }
        }
    }

    #[test]
    fn diffusion_loss_is_a_symmetric_nonnegative_discrepancy(
        a in prop::collection::vec(-5.0f64..5.0, 1..40),
        shift in prop::collection::vec(-1.0f64..1.0, 40),
    ) {
        let b: Vec<f64> = a.iter().zip(&shift).map(|(x, d)| x + d).collect();
        let ab = diffusion_loss(&a, &b).unwrap();
        prop_assert_eq!(ab, diffusion_loss(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(diffusion_loss(&a, &a).unwrap(), 0.0);
        if a != b {
            prop_assert!(ab > 0.0);
        }
    }

    #[test]
    fn forward_marginal_is_reproducible(seed in any::<u64>(), t in 1usize..=50) {
        let s = make_linear_schedule(1e-3, 0.2, 50, SigmaMode::Beta).unwrap();
        let z0 = LatentState::clean(vec![0.3, -1.2, 2.0], [1, 1, 1, 3]).unwrap();
        let a = forward_marginal(&z0, t, &s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = forward_marginal(&z0, t, &s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn split_is_deterministic_disjoint_and_exhaustive(
        n0 in 2usize..40,
        n1 in 2usize..40,
        fraction in 0.01f64..0.99,
        seed in any::<u64>(),
    ) {
        let ds = dataset(n0, n1);
        let (train, test) = split_dataset(&ds, fraction, seed).unwrap();
        let (train2, test2) = split_dataset(&ds, fraction, seed).unwrap();
        prop_assert_eq!(&train, &train2);
        prop_assert_eq!(&test, &test2);

        let a: HashSet<String> = ids(&train).into_iter().collect();
        let b: HashSet<String> = ids(&test).into_iter().collect();
        prop_assert!(a.is_disjoint(&b));
        let all: HashSet<String> = ids(&ds).into_iter().collect();
        prop_assert_eq!(a.union(&b).cloned().collect::<HashSet<_>>(), all);

        for (class, n) in [(0usize, n0), (1, n1)] {
            let k = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
            prop_assert_eq!(train.class_counts()[class], k);
            prop_assert_eq!(test.class_counts()[class], n - k);
        }
    }

    #[test]
    fn frame_sampling_keeps_order_and_count(len in 1usize..200, clip_len in 1usize..64, sampled_raw in 1usize..64) {
        let sampled = sampled_raw.min(clip_len);
        let frames: Vec<f32> = (0..len).map(|i| i as f32 / len as f32).collect();
        let video = VideoClip::new(frames, [len, 1, 1, 1]).unwrap();
        let clips = segment_and_sample(&video, clip_len, sampled).unwrap();
        prop_assert_eq!(clips.len(), (len / clip_len).max(1));
        for (w, c) in clips.iter().enumerate() {
            prop_assert_eq!(c.frame_count(), sampled);
            let v = c.data();
            prop_assert!(v.windows(2).all(|p| p[0] <= p[1]));
            if len >= clip_len {
                for (i, &x) in v.iter().enumerate() {
                    let expect = w * clip_len + i * clip_len / sampled;
                    prop_assert_eq!(x, expect as f32 / len as f32);
                }
            }
        }
    }

    #[test]
    fn frechet_is_zero_on_self_symmetric_and_nonnegative(a in corpus_strategy(2), b in corpus_strategy(2)) {
        let ex = MeanFeatures { scale: 1.0 };
        let fa = GaussianStats::fit(&ex.extract(&clip_corpus(&a).iter().collect::<Vec<_>>()).unwrap()).unwrap();
        let fb = GaussianStats::fit(&ex.extract(&clip_corpus(&b).iter().collect::<Vec<_>>()).unwrap()).unwrap();
        let self_d = frechet_distance(&fa, &fa).unwrap();
        prop_assert!(self_d.abs() < 1e-6, "self distance {}", self_d);
        let ab = frechet_distance(&fa, &fb).unwrap();
        let ba = frechet_distance(&fb, &fa).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-6 * (1.0 + ab.abs()), "{} vs {}", ab, ba);
    }

    #[test]
    fn corpus_distance_ignores_clip_order(a in corpus_strategy(3), b in corpus_strategy(3), rot in 0usize..8) {
        let ex = MeanFeatures { scale: 1.0 };
        let ca = clip_corpus(&a);
        let cb = clip_corpus(&b);
        let ra: Vec<&VideoClip> = ca.iter().collect();
        let rb: Vec<&VideoClip> = cb.iter().collect();
        let mut pa = ra.clone();
        let k = rot % pa.len();
        pa.rotate_left(k);
        let mut pb = rb.clone();
        pb.reverse();
        let d = corpus_distance(&ra, &rb, &ex).unwrap();
        let p = corpus_distance(&pa, &pb, &ex).unwrap();
        prop_assert!((d - p).abs() <= 1e-9 * (1.0 + d.abs()), "{} vs {}", d, p);
    }

    #[test]
    fn diversity_is_permutation_invariant_and_scales(a in corpus_strategy(2), c in -4.0f64..4.0, rot in 0usize..8) {
        let ca = clip_corpus(&a);
        let refs: Vec<&VideoClip> = ca.iter().collect();
        let base = diversity_score(&refs, &MeanFeatures { scale: 1.0 }).unwrap();
        let mut perm = refs.clone();
        let n = perm.len();
        perm.rotate_left(rot % n);
        perm.swap(0, n - 1);
        let p = diversity_score(&perm, &MeanFeatures { scale: 1.0 }).unwrap();
        prop_assert!((base - p).abs() <= 1e-12 * (1.0 + base));
        let scaled = diversity_score(&refs, &MeanFeatures { scale: c }).unwrap();
        prop_assert!((scaled - c.abs() * base).abs() <= 1e-9 * (1.0 + base * c.abs()));
    }
}

/// Chi-square goodness of fit of sampled timesteps against the uniform law on
/// `1..=50` over 10⁵ draws; 74.919 is the 0.99 quantile with 49 degrees of freedom.
#[test]
fn timestep_sampling_is_uniform() {
    let steps = 50;
    let n = 100_000;
    let ts = sample_timesteps(n, steps, &mut ChaCha8Rng::seed_from_u64(2024));
    let mut counts = vec![0usize; steps];
    for t in ts {
        assert!((1..=steps).contains(&t));
        counts[t - 1] += 1;
    }
    let expected = n as f64 / steps as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < 74.919, "chi-square statistic {chi2}");
}
