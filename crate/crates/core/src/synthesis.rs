//! Image-to-video synthesis: Gaussian noise → conditional reverse diffusion →
//! latent → decoder together with the seed image.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::Decoder;
use crate::data::{save_dataset, LabeledItem, LabeledVideoDataset, Provenance};
use crate::denoiser::DenoiserModel;
use crate::diffusion::{sample_latents, NoisePredictor, NoiseSchedule};
use crate::error::{LddmError, Result};
use crate::video::{Geometry, LatentDynamic, SeedImage, VideoClip};

/// Everything needed to synthesize. There is deliberately no encoder.
#[derive(Clone, Debug)]
pub struct SynthesisBundle {
    decoder: Decoder,
    denoiser: DenoiserModel,
    schedule: NoiseSchedule,
}

impl SynthesisBundle {
    pub fn new(decoder: Decoder, denoiser: DenoiserModel, schedule: NoiseSchedule) -> Result<Self> {
        let dg = decoder.config().geometry;
        let ng = denoiser.config().geometry;
        if dg != ng {
            return Err(LddmError::Geometry(format!(
                "decoder geometry {dg:?} differs from denoiser geometry {ng:?}"
            )));
        }
        if denoiser.config().steps != schedule.steps() {
            return Err(LddmError::Config(format!(
                "denoiser trained for T = {}, schedule has T = {}",
                denoiser.config().steps,
                schedule.steps()
            )));
        }
        Ok(Self {
            decoder,
            denoiser,
            schedule,
        })
    }

    pub fn geometry(&self) -> Geometry {
        self.decoder.config().geometry
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        self.denoiser.latent_shape()
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn check_image(&self, image: &SeedImage) -> Result<()> {
        let g = self.geometry();
        if image.shape() != [g.height, g.width, g.channels] {
            return Err(LddmError::Geometry(format!(
                "seed image {:?} does not match bundle frame geometry [{}, {}, {}]",
                image.shape(),
                g.height,
                g.width,
                g.channels
            )));
        }
        Ok(())
    }

    /// Synthesizes one clip per image; clip `i` uses only `rngs[i]`.
    pub fn synthesize_many(&self, images: &[&SeedImage], rngs: &mut [ChaCha8Rng]) -> Result<Vec<VideoClip>> {
        for im in images {
            self.check_image(im)?;
        }
        let states = sample_latents(&self.denoiser, images, self.latent_shape(), &self.schedule, rngs)?;
        let norm = self.denoiser.latent_norm();
        let latents = states
            .iter()
            .map(|s| LatentDynamic::new(norm.denormalize(&s.values), s.shape))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&LatentDynamic> = latents.iter().collect();
        self.decoder.decode_batch(&refs, images)
    }
}

pub fn synthesize_video(image: &SeedImage, bundle: &SynthesisBundle, rng: &mut ChaCha8Rng) -> Result<VideoClip> {
    Ok(bundle
        .synthesize_many(&[image], std::slice::from_mut(rng))?
        .remove(0))
}

/// Stream `index` of a ChaCha generator seeded with `seed`.
pub fn derived_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index);
    r
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceImage {
    pub image: SeedImage,
    pub label: u8,
    pub id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerImage {
    /// The same number of clips for every image.
    Fixed(usize),
    /// Enough clips per class to reach `target` clips in each class.
    Balanced { target: usize },
}

/// Per-class clips per image needed to reach `target`: `⌈target / size⌉`.
pub fn balanced_per_image(class_sizes: [usize; 2], target: usize) -> Result<[usize; 2]> {
    if class_sizes.contains(&0) || target == 0 {
        return Err(LddmError::InvalidArgument(format!(
            "balancing needs images in both classes and a positive target, got {class_sizes:?} / {target}"
        )));
    }
    Ok(class_sizes.map(|n| target.div_ceil(n)))
}

/// Clip counts per input image. In balanced mode each class receives exactly
/// `target` clips, spread as evenly as possible over its images.
pub fn clips_per_image(images: &[SourceImage], mode: PerImage) -> Result<Vec<usize>> {
    match mode {
        PerImage::Fixed(0) => Err(LddmError::InvalidArgument("per_image must be at least 1".into())),
        PerImage::Fixed(k) => Ok(vec![k; images.len()]),
        PerImage::Balanced { target } => {
            let mut sizes = [0usize; 2];
            for im in images {
                if im.label > 1 {
                    return Err(LddmError::InvalidArgument(format!("label {} is not binary", im.label)));
                }
                sizes[im.label as usize] += 1;
            }
            balanced_per_image(sizes, target)?;
            let mut seen = [0usize; 2];
            Ok(images
                .iter()
                .map(|im| {
                    let c = im.label as usize;
                    let k = target / sizes[c] + usize::from(seen[c] < target % sizes[c]);
                    seen[c] += 1;
                    k
                })
                .collect())
        }
    }
}

/// Key of the random stream that produced a synthetic clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngKey {
    pub seed: u64,
    pub index: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub clip: VideoClip,
    pub label: u8,
    pub source_image_id: String,
    pub rng_key: RngKey,
}

const SYNTH_CHUNK: usize = 32;

/// Synthesizes clips for every image. Output `i` uses stream `i` of `seed`,
/// so the result does not depend on batching.
pub fn batch_synthesize(
    images: &[SourceImage],
    per_image: PerImage,
    bundle: &SynthesisBundle,
    seed: u64,
) -> Result<Vec<SyntheticClip>> {
    if images.is_empty() {
        return Err(LddmError::EmptyInput("seed image collection"));
    }
    let counts = clips_per_image(images, per_image)?;
    let jobs: Vec<&SourceImage> = images
        .iter()
        .zip(&counts)
        .flat_map(|(im, &k)| std::iter::repeat(im).take(k))
        .collect();
    let mut out = Vec::with_capacity(jobs.len());
    for (c, chunk) in jobs.chunks(SYNTH_CHUNK).enumerate() {
        let base = (c * SYNTH_CHUNK) as u64;
        let mut rngs: Vec<ChaCha8Rng> = (0..chunk.len() as u64).map(|i| derived_rng(seed, base + i)).collect();
        let seeds: Vec<&SeedImage> = chunk.iter().map(|j| &j.image).collect();
        let clips = bundle.synthesize_many(&seeds, &mut rngs)?;
        for (i, (clip, job)) in clips.into_iter().zip(chunk).enumerate() {
            out.push(SyntheticClip {
                clip,
                label: job.label,
                source_image_id: job.id.clone(),
                rng_key: RngKey {
                    seed,
                    index: base + i as u64,
                },
            });
        }
    }
    Ok(out)
}

/// Synthetic clips as a labeled dataset with ids `syn-{index}`.
pub fn synthetic_dataset(clips: &[SyntheticClip]) -> Result<LabeledVideoDataset> {
    let items = clips
        .iter()
        .map(|s| LabeledItem {
            clip: s.clip.clone(),
            label: s.label,
            source_id: format!("syn-{:06}", s.rng_key.index),
        })
        .collect();
    LabeledVideoDataset::new(items, Provenance::Synthetic)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisRecord {
    pub path: String,
    pub label: u8,
    pub source_image_id: String,
    pub rng_key: RngKey,
}

/// Writes the clips plus the dataset manifest and `synthesis.jsonl`
/// (path, label, source image id, rng key). Returns the dataset manifest path.
pub fn save_synthetic(clips: &[SyntheticClip], dir: &Path) -> Result<PathBuf> {
    let ds = synthetic_dataset(clips)?;
    let manifest = save_dataset(&ds, dir)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join("synthesis.jsonl"))?);
    for (i, s) in clips.iter().enumerate() {
        let rec = SynthesisRecord {
            path: format!("{i:05}_syn-{:06}.lddv", s.rng_key.index),
            label: s.label,
            source_image_id: s.source_image_id.clone(),
            rng_key: s.rng_key,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(sizes: [usize; 2]) -> Vec<SourceImage> {
        let im = SeedImage::new(vec![0.5; 2], [1, 1, 2]).unwrap();
        (0..sizes[0] + sizes[1])
            .map(|i| SourceImage {
                image: im.clone(),
                label: u8::from(i >= sizes[0]),
                id: format!("img{i}"),
            })
            .collect()
    }

    #[test]
    fn balancing_arithmetic() {
        assert_eq!(balanced_per_image([10, 5], 20).unwrap(), [2, 4]);
        let counts = clips_per_image(&images([10, 5]), PerImage::Balanced { target: 20 }).unwrap();
        assert!(counts[..10].iter().all(|&k| k == 2));
        assert!(counts[10..].iter().all(|&k| k == 4));
        let uneven = clips_per_image(&images([3, 4]), PerImage::Balanced { target: 10 }).unwrap();
        assert_eq!(uneven[..3].iter().sum::<usize>(), 10);
        assert_eq!(uneven[3..].iter().sum::<usize>(), 10);
    }

    #[test]
    fn fixed_counts() {
        let c = clips_per_image(&images([3, 2]), PerImage::Fixed(3)).unwrap();
        assert_eq!(c.iter().sum::<usize>(), 15);
        assert!(clips_per_image(&images([3, 2]), PerImage::Fixed(0)).is_err());
        assert!(clips_per_image(&images([3, 0]), PerImage::Balanced { target: 4 }).is_err());
    }

    #[test]
    fn derived_streams_differ() {
        use rand::RngCore;
        let a = derived_rng(7, 0).next_u64();
        assert_eq!(a, derived_rng(7, 0).next_u64());
        assert_ne!(a, derived_rng(7, 1).next_u64());
    }
}
