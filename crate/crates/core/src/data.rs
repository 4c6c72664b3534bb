//! Labeled video datasets, clip segmentation with uniform frame sampling,
//! stratified splitting, manifests, and the deterministic toy-video generator.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LddmError, Result};
use crate::video::{read_video, resize_clip, write_video, VideoClip};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthetic,
    Toy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledItem {
    pub clip: VideoClip,
    pub label: u8,
    pub source_id: String,
}

/// A collection of equally shaped clips with binary labels and unique ids.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVideoDataset {
    items: Vec<LabeledItem>,
    provenance: Provenance,
}

impl LabeledVideoDataset {
    pub fn new(items: Vec<LabeledItem>, provenance: Provenance) -> Result<Self> {
        if let Some(first) = items.first() {
            let shape = first.clip.shape();
            let mut ids = HashSet::new();
            for it in &items {
                if it.clip.shape() != shape {
                    return Err(LddmError::Geometry(format!(
                        "item {} has geometry {:?}, dataset uses {:?}",
                        it.source_id,
                        it.clip.shape(),
                        shape
                    )));
                }
                if it.label > 1 {
                    return Err(LddmError::InvalidArgument(format!(
                        "label {} of {} is not binary",
                        it.label, it.source_id
                    )));
                }
                if !ids.insert(it.source_id.as_str()) {
                    return Err(LddmError::InvalidArgument(format!(
                        "duplicate source id {}",
                        it.source_id
                    )));
                }
            }
        }
        Ok(Self { items, provenance })
    }

    pub fn items(&self) -> &[LabeledItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// `[Γ, H, W, C]` of every clip, if non-empty.
    pub fn geometry(&self) -> Option<[usize; 4]> {
        self.items.first().map(|i| i.clip.shape())
    }

    pub fn clips(&self) -> Vec<VideoClip> {
        self.items.iter().map(|i| i.clip.clone()).collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.items.iter().map(|i| i.label).collect()
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let mut c = [0, 0];
        for it in &self.items {
            c[it.label as usize] += 1;
        }
        c
    }

    /// Concatenation; the result keeps this dataset's provenance when both
    /// agree and is marked synthetic otherwise.
    pub fn merged(&self, other: &Self) -> Result<Self> {
        let mut items = self.items.clone();
        items.extend(other.items.iter().cloned());
        let prov = if self.provenance == other.provenance {
            self.provenance
        } else {
            Provenance::Synthetic
        };
        Self::new(items, prov)
    }
}

/// Splits a video into consecutive `clip_len` windows and samples `sampled`
/// frames from each at indices `⌊i·clip_len/sampled⌋`. A trailing partial
/// window is dropped; a video shorter than one window is padded by repeating
/// its last frame.
pub fn segment_and_sample(
    video: &VideoClip,
    clip_len: usize,
    sampled: usize,
) -> Result<Vec<VideoClip>> {
    if sampled == 0 || clip_len == 0 || sampled > clip_len {
        return Err(LddmError::InvalidArgument(format!(
            "need 0 < sampled ({sampled}) <= clip_len ({clip_len})"
        )));
    }
    let n = video.frame_count();
    let offsets: Vec<usize> = (0..sampled).map(|i| i * clip_len / sampled).collect();
    if n < clip_len {
        let idx: Vec<usize> = offsets.iter().map(|&o| o.min(n - 1)).collect();
        return Ok(vec![video.select_frames(&idx)?]);
    }
    (0..n / clip_len)
        .map(|w| {
            let idx: Vec<usize> = offsets.iter().map(|&o| w * clip_len + o).collect();
            video.select_frames(&idx)
        })
        .collect()
}

/// Applies [`segment_and_sample`] (and an optional bilinear resize) to every
/// item; derived ids are `{source_id}#{window}`.
pub fn prepare_clips(
    dataset: &LabeledVideoDataset,
    clip_len: usize,
    sampled: usize,
    resize: Option<(usize, usize)>,
) -> Result<LabeledVideoDataset> {
    let mut items = Vec::new();
    for it in dataset.items() {
        let video = match resize {
            Some((h, w)) => resize_clip(&it.clip, h, w)?,
            None => it.clip.clone(),
        };
        for (k, clip) in segment_and_sample(&video, clip_len, sampled)?.into_iter().enumerate() {
            items.push(LabeledItem {
                clip,
                label: it.label,
                source_id: format!("{}#{k}", it.source_id),
            });
        }
    }
    LabeledVideoDataset::new(items, dataset.provenance())
}

/// Stratified random split. Per class, `round(fraction · n)` items (at least
/// one, leaving at least one) go to the training side. Both sides keep the
/// dataset's original item order.
pub fn split_dataset(
    dataset: &LabeledVideoDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(LabeledVideoDataset, LabeledVideoDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(LddmError::InvalidArgument(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    for class in 0..2u8 {
        let mut idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.items[i].label == class)
            .collect();
        if idx.len() < 2 {
            return Err(LddmError::InvalidArgument(format!(
                "class {class} has {} items; need at least 2 to split",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let k = ((train_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        train_idx.extend_from_slice(&idx[..k]);
    }
    let train_set: HashSet<usize> = train_idx.into_iter().collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, it) in dataset.items.iter().enumerate() {
        if train_set.contains(&i) {
            train.push(it.clone());
        } else {
            test.push(it.clone());
        }
    }
    Ok((
        LabeledVideoDataset::new(train, dataset.provenance)?,
        LabeledVideoDataset::new(test, dataset.provenance)?,
    ))
}

/// One line of a dataset manifest (JSON lines).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub label: u8,
    pub source_id: String,
    pub provenance: Provenance,
}

fn file_stem_for(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes each clip as `{dir}/{id}.lddv` plus `{dir}/manifest.jsonl`; returns
/// the manifest path.
pub fn save_dataset(dataset: &LabeledVideoDataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let manifest = dir.join("manifest.jsonl");
    let mut out = std::io::BufWriter::new(std::fs::File::create(&manifest)?);
    for (i, it) in dataset.items.iter().enumerate() {
        let name = format!("{i:05}_{}.lddv", file_stem_for(&it.source_id));
        write_video(&dir.join(&name), &it.clip)?;
        let entry = ManifestEntry {
            path: name,
            label: it.label,
            source_id: it.source_id.clone(),
            provenance: dataset.provenance,
        };
        serde_json::to_writer(&mut out, &entry)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(manifest)
}

/// Reads a manifest; relative paths resolve against the manifest's directory.
pub fn load_dataset(manifest: &Path) -> Result<LabeledVideoDataset> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let file = std::fs::File::open(manifest)?;
    let mut items = Vec::new();
    let mut provenance = None;
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(&line)?;
        let path = base.join(&e.path);
        items.push(LabeledItem {
            clip: read_video(&path)?,
            label: e.label,
            source_id: e.source_id,
        });
        provenance.get_or_insert(e.provenance);
    }
    LabeledVideoDataset::new(items, provenance.unwrap_or(Provenance::Real))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class0Motion {
    #[default]
    HorizontalDrift,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class1Motion {
    #[default]
    Oscillation,
}

/// Parameters of the two-class toy task: class 0 drifts right at constant
/// speed, class 1 oscillates horizontally around its start column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyGenParams {
    pub videos_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Must be even; extra channels duplicate the intensity.
    pub channels: usize,
    #[serde(default)]
    pub class0_motion: Class0Motion,
    #[serde(default)]
    pub class1_motion: Class1Motion,
    /// Gaussian blob standard deviation in pixels.
    pub blob_size: f64,
    /// Drift speed in pixels per frame.
    pub speed: f64,
    /// Oscillation amplitude in pixels.
    pub amplitude: f64,
    /// Oscillation period in frames.
    pub period: f64,
    pub noise_std: f64,
    pub seed: u64,
}

pub const TOY_BACKGROUND: f64 = 0.1;
pub const TOY_PEAK: f64 = 0.8;

impl ToyGenParams {
    fn margin(&self) -> f64 {
        2.0 * self.blob_size
    }

    /// Allowed start columns for each class.
    pub fn start_column_range(&self, label: u8) -> (f64, f64) {
        let m = self.margin();
        let right = self.width as f64 - 1.0 - m;
        match label {
            0 => (m, right - self.speed * (self.frames as f64 - 1.0)),
            _ => (m + self.amplitude, right - self.amplitude),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.videos_per_class == 0 || self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(LddmError::Geometry("toy geometry must be non-empty".into()));
        }
        if self.channels == 0 || self.channels % 2 != 0 {
            return Err(LddmError::Geometry(format!(
                "toy channel count must be even, got {}",
                self.channels
            )));
        }
        if !(self.blob_size > 0.0 && self.noise_std >= 0.0 && self.period > 0.0) {
            return Err(LddmError::InvalidArgument(
                "blob size and period must be positive, noise non-negative".into(),
            ));
        }
        if self.speed < 0.0 || self.amplitude < 0.0 {
            return Err(LddmError::InvalidArgument("speed and amplitude must be non-negative".into()));
        }
        let m = self.margin();
        if self.height as f64 - 1.0 - m < m {
            return Err(LddmError::Geometry("blob does not fit vertically".into()));
        }
        for label in 0..2 {
            let (lo, hi) = self.start_column_range(label);
            if hi < lo {
                return Err(LddmError::Geometry(format!(
                    "class {label} trajectory cannot stay inside a width of {}",
                    self.width
                )));
            }
        }
        Ok(())
    }
}

/// Blob centre `(row, col)` at `frame` for a trajectory starting at `start`.
pub fn blob_center(params: &ToyGenParams, label: u8, start: (f64, f64), frame: usize) -> (f64, f64) {
    let t = frame as f64;
    match label {
        0 => (start.0, start.1 + params.speed * t),
        _ => (
            start.0,
            start.1 + params.amplitude * (2.0 * PI * t / params.period).sin(),
        ),
    }
}

/// Renders one toy video with the blob starting at `start`.
pub fn render_toy_video<R: Rng + ?Sized>(
    params: &ToyGenParams,
    label: u8,
    start: (f64, f64),
    rng: &mut R,
) -> Result<VideoClip> {
    let (h, w, c) = (params.height, params.width, params.channels);
    let two_s2 = 2.0 * params.blob_size * params.blob_size;
    let mut data = Vec::with_capacity(params.frames * h * w * c);
    for f in 0..params.frames {
        let (cy, cx) = blob_center(params, label, start, f);
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let mut v = TOY_BACKGROUND + TOY_PEAK * (-d2 / two_s2).exp();
                if params.noise_std > 0.0 {
                    v += params.noise_std * rng.sample::<f64, _>(StandardNormal);
                }
                let v = v.clamp(0.0, 1.0) as f32;
                data.extend(std::iter::repeat(v).take(c));
            }
        }
    }
    VideoClip::new(data, [params.frames, h, w, c])
}

/// Deterministic toy dataset, classes interleaved (`toy-000000`, ...).
pub fn generate_toy_dataset(params: &ToyGenParams) -> Result<LabeledVideoDataset> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let m = params.margin();
    let row_range = (m, params.height as f64 - 1.0 - m);
    let mut items = Vec::with_capacity(2 * params.videos_per_class);
    for i in 0..params.videos_per_class {
        for label in 0..2u8 {
            let (lo, hi) = params.start_column_range(label);
            let row = row_range.0 + rng.gen::<f64>() * (row_range.1 - row_range.0);
            let col = lo + rng.gen::<f64>() * (hi - lo);
            let clip = render_toy_video(params, label, (row, col), &mut rng)?;
            items.push(LabeledItem {
                clip,
                label,
                source_id: format!("toy-{:06}", 2 * i + label as usize),
            });
        }
    }
    LabeledVideoDataset::new(items, Provenance::Toy)
}
