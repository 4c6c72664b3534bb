//! Video clips, seed images, latent embeddings and the `LDDV` container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! offset 0   4 bytes   magic "LDDV"
//! offset 4   1 byte    version (1)
//! offset 5   4 bytes   u32 header length L
//! offset 9   L bytes   UTF-8 JSON {frames, height, width, channels, fps, dtype}
//! offset 9+L ...       f32le payload, frame-major [Γ, H, W, C]
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LddmError, Result};

pub const VIDEO_MAGIC: &[u8; 4] = b"LDDV";
pub const VIDEO_VERSION: u8 = 1;

/// Clip geometry plus the latent downsampling factor `r`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub r: usize,
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.frames, self.height, self.width, self.channels];
        if dims.contains(&0) || self.r == 0 {
            return Err(LddmError::Geometry(format!("zero-sized geometry {self:?}")));
        }
        if dims.iter().any(|d| d % self.r != 0) {
            return Err(LddmError::Geometry(format!(
                "r = {} must divide frames, height, width and channels ({:?})",
                self.r, dims
            )));
        }
        Ok(())
    }

    /// `[Γ, H, W, C]`
    pub fn clip_shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    /// `[Γ/r, H/r, W/r, C/r]`
    pub fn latent_shape(&self) -> [usize; 4] {
        let r = self.r;
        [
            self.frames / r,
            self.height / r,
            self.width / r,
            self.channels / r,
        ]
    }

    pub fn latent_len(&self) -> usize {
        self.latent_shape().iter().product()
    }
}

fn validate_pixels(values: &[f32]) -> Result<()> {
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() || !(0.0..=1.0).contains(&v) {
            return Err(LddmError::InvalidValue {
                index: i,
                value: v as f64,
            });
        }
    }
    Ok(())
}

/// A clip `[Γ, H, W, C]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Vec<f32>,
    shape: [usize; 4],
    fps: Option<f64>,
}

impl VideoClip {
    pub fn new(frames: Vec<f32>, shape: [usize; 4]) -> Result<Self> {
        if shape.contains(&0) {
            return Err(LddmError::Geometry(format!("zero-sized clip {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if frames.len() != n {
            return Err(LddmError::ShapeMismatch {
                expected: shape.to_vec(),
                found: vec![frames.len()],
            });
        }
        validate_pixels(&frames)?;
        Ok(Self {
            frames,
            shape,
            fps: None,
        })
    }

    /// Clamps into `[0, 1]`; still rejects NaN and infinities.
    pub fn from_f64_clamped(values: &[f64], shape: [usize; 4]) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(LddmError::InvalidValue {
                index: i,
                value: values[i],
            });
        }
        Self::new(
            values.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
            shape,
        )
    }

    pub fn with_fps(mut self, fps: Option<f64>) -> Self {
        self.fps = fps;
        self
    }

    pub fn fps(&self) -> Option<f64> {
        self.fps
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn frame_count(&self) -> usize {
        self.shape[0]
    }

    pub fn frame_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[f32] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.frame_len();
        &self.frames[i * n..(i + 1) * n]
    }

    /// Frame 0 as the conditioning image `x0`.
    pub fn seed_image(&self) -> SeedImage {
        SeedImage {
            pixels: self.frame(0).to_vec(),
            shape: [self.shape[1], self.shape[2], self.shape[3]],
        }
    }

    /// Builds a clip from a subset of frames, in the given order.
    pub fn select_frames(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(LddmError::EmptyInput("frame selection"));
        }
        let mut out = Vec::with_capacity(indices.len() * self.frame_len());
        for &i in indices {
            if i >= self.frame_count() {
                return Err(LddmError::InvalidArgument(format!(
                    "frame index {i} out of range for {} frames",
                    self.frame_count()
                )));
            }
            out.extend_from_slice(self.frame(i));
        }
        let mut shape = self.shape;
        shape[0] = indices.len();
        Ok(Self {
            frames: out,
            shape,
            fps: self.fps,
        })
    }

    /// Channel-first `[C, Γ, H, W]` copy in `f64`.
    pub fn to_channel_first(&self) -> Vec<f64> {
        let [d, h, w, c] = self.shape;
        let mut out = vec![0.0; self.frames.len()];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        out[((ch * d + z) * h + y) * w + x] =
                            self.frames[((z * h + y) * w + x) * c + ch] as f64;
                    }
                }
            }
        }
        out
    }

    pub fn from_channel_first(values: &[f64], shape: [usize; 4]) -> Result<Self> {
        let [d, h, w, c] = shape;
        if values.len() != d * h * w * c {
            return Err(LddmError::ShapeMismatch {
                expected: shape.to_vec(),
                found: vec![values.len()],
            });
        }
        let mut out = vec![0.0; values.len()];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        out[((z * h + y) * w + x) * c + ch] = values[((ch * d + z) * h + y) * w + x];
                    }
                }
            }
        }
        Self::from_f64_clamped(&out, shape)
    }
}

/// A single conditioning frame `[H, W, C]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedImage {
    pixels: Vec<f32>,
    shape: [usize; 3],
}

impl SeedImage {
    pub fn new(pixels: Vec<f32>, shape: [usize; 3]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if pixels.len() != n || n == 0 {
            return Err(LddmError::ShapeMismatch {
                expected: shape.to_vec(),
                found: vec![pixels.len()],
            });
        }
        validate_pixels(&pixels)?;
        Ok(Self { pixels, shape })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Channel-first `[C, H, W]` copy in `f64`.
    pub fn to_channel_first(&self) -> Vec<f64> {
        let [h, w, c] = self.shape;
        let mut out = vec![0.0; self.pixels.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = self.pixels[(y * w + x) * c + ch] as f64;
                }
            }
        }
        out
    }

    /// The static-repeat baseline: this image held for `frames` frames.
    pub fn repeat(&self, frames: usize) -> Result<VideoClip> {
        let mut data = Vec::with_capacity(frames * self.pixels.len());
        for _ in 0..frames {
            data.extend_from_slice(&self.pixels);
        }
        VideoClip::new(data, [frames, self.shape[0], self.shape[1], self.shape[2]])
    }

    /// Wraps the image as a one-frame clip, e.g. for storage.
    pub fn as_clip(&self) -> VideoClip {
        VideoClip {
            frames: self.pixels.clone(),
            shape: [1, self.shape[0], self.shape[1], self.shape[2]],
            fps: None,
        }
    }
}

/// The latent dynamic embedding `z`, layout `[Γ/r, H/r, W/r, C/r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDynamic {
    pub values: Vec<f64>,
    pub shape: [usize; 4],
}

impl LatentDynamic {
    pub fn new(values: Vec<f64>, shape: [usize; 4]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if values.len() != n {
            return Err(LddmError::ShapeMismatch {
                expected: shape.to_vec(),
                found: vec![values.len()],
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(LddmError::InvalidValue {
                index: i,
                value: values[i],
            });
        }
        Ok(Self { values, shape })
    }

    /// Channel-first `[C/r, Γ/r, H/r, W/r]` copy.
    pub fn to_channel_first(&self) -> Vec<f64> {
        channels_last_to_first(&self.values, self.shape)
    }

    pub fn from_channel_first(values: &[f64], shape: [usize; 4]) -> Result<Self> {
        Self::new(channels_first_to_last(values, shape), shape)
    }
}

pub(crate) fn channels_last_to_first(v: &[f64], shape: [usize; 4]) -> Vec<f64> {
    let [d, h, w, c] = shape;
    let mut out = vec![0.0; v.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[((ch * d + z) * h + y) * w + x] = v[((z * h + y) * w + x) * c + ch];
                }
            }
        }
    }
    out
}

pub(crate) fn channels_first_to_last(v: &[f64], shape: [usize; 4]) -> Vec<f64> {
    let [d, h, w, c] = shape;
    let mut out = vec![0.0; v.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[((z * h + y) * w + x) * c + ch] = v[((ch * d + z) * h + y) * w + x];
                }
            }
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VideoHeader {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    fps: Option<f64>,
    dtype: String,
}

/// Upper bound on elements accepted from a header, to refuse absurd allocations.
const MAX_ELEMENTS: usize = 1 << 30;

pub fn encode_video(clip: &VideoClip) -> Vec<u8> {
    let [frames, height, width, channels] = clip.shape;
    let header = serde_json::to_vec(&VideoHeader {
        frames,
        height,
        width,
        channels,
        fps: clip.fps,
        dtype: "f32le".into(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(9 + header.len() + clip.frames.len() * 4);
    out.extend_from_slice(VIDEO_MAGIC);
    out.push(VIDEO_VERSION);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in &clip.frames {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Splits `magic | version | u32 len | header` off `bytes`.
pub(crate) fn split_container<'a>(
    bytes: &'a [u8],
    magic: &'static [u8; 4],
    magic_name: &'static str,
    version: u8,
) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(LddmError::BadMagic {
            expected: magic_name,
        });
    }
    if bytes.len() < 9 {
        return Err(LddmError::MalformedHeader("file shorter than fixed prefix".into()));
    }
    if bytes[4] != version {
        return Err(LddmError::UnsupportedVersion(bytes[4]));
    }
    let len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let rest = &bytes[9..];
    if len > rest.len() {
        return Err(LddmError::MalformedHeader(format!(
            "header length {len} exceeds file size"
        )));
    }
    Ok((&rest[..len], &rest[len..]))
}

pub(crate) fn read_f32_payload(payload: &[u8], count: usize) -> Result<Vec<f32>> {
    let expected = count
        .checked_mul(4)
        .ok_or_else(|| LddmError::MalformedHeader("payload size overflows".into()))?;
    if payload.len() < expected {
        return Err(LddmError::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(LddmError::Geometry(format!(
            "payload has {} bytes, header declares {expected}",
            payload.len()
        )));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

pub fn decode_video(bytes: &[u8]) -> Result<VideoClip> {
    let (header, payload) = split_container(bytes, VIDEO_MAGIC, "LDDV", VIDEO_VERSION)?;
    let h: VideoHeader = serde_json::from_slice(header)
        .map_err(|e| LddmError::MalformedHeader(e.to_string()))?;
    if h.dtype != "f32le" {
        return Err(LddmError::MalformedHeader(format!("unsupported dtype {}", h.dtype)));
    }
    if let Some(fps) = h.fps {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(LddmError::MalformedHeader(format!("invalid fps {fps}")));
        }
    }
    let shape = [h.frames, h.height, h.width, h.channels];
    if shape.contains(&0) {
        return Err(LddmError::Geometry(format!("zero-sized clip {shape:?}")));
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= MAX_ELEMENTS)
        .ok_or_else(|| LddmError::Geometry(format!("declared geometry {shape:?} too large")))?;
    let frame_bytes = h.height * h.width * h.channels * 4;
    if payload.len() != count * 4 && payload.len() % frame_bytes == 0 {
        return Err(LddmError::Geometry(format!(
            "payload holds {} frames, header declares {}",
            payload.len() / frame_bytes,
            h.frames
        )));
    }
    let data = read_f32_payload(payload, count)?;
    Ok(VideoClip::new(data, shape)?.with_fps(h.fps))
}

pub fn write_video(path: &Path, clip: &VideoClip) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_video(clip))?;
    Ok(())
}

pub fn read_video(path: &Path) -> Result<VideoClip> {
    decode_video(&std::fs::read(path)?)
}

/// Bilinear resize of every frame to `(height, width)`; aspect ratio is not kept.
pub fn resize_clip(clip: &VideoClip, height: usize, width: usize) -> Result<VideoClip> {
    let [d, h, w, c] = clip.shape;
    if height == 0 || width == 0 {
        return Err(LddmError::Geometry("resize target must be non-empty".into()));
    }
    let mut out = Vec::with_capacity(d * height * width * c);
    let src = |y: f64, len: usize, out_len: usize| -> (usize, usize, f64) {
        // align pixel centres
        let pos = ((y + 0.5) * len as f64 / out_len as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, pos - lo as f64)
    };
    for z in 0..d {
        let frame = clip.frame(z);
        for y in 0..height {
            let (y0, y1, fy) = src(y as f64, h, height);
            for x in 0..width {
                let (x0, x1, fx) = src(x as f64, w, width);
                for ch in 0..c {
                    let p = |yy: usize, xx: usize| frame[(yy * w + xx) * c + ch] as f64;
                    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                    let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                    out.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    Ok(VideoClip::from_f64_clamped(&out, [d, height, width, c])?.with_fps(clip.fps))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip() -> VideoClip {
        let shape = [3, 2, 4, 2];
        let n: usize = shape.iter().product();
        VideoClip::new((0..n).map(|i| i as f32 / n as f32).collect(), shape).unwrap()
    }

    #[test]
    fn rejects_out_of_range_and_nan() {
        assert!(VideoClip::new(vec![1.5], [1, 1, 1, 1]).is_err());
        assert!(VideoClip::new(vec![f32::NAN], [1, 1, 1, 1]).is_err());
        assert!(VideoClip::from_f64_clamped(&[f64::INFINITY], [1, 1, 1, 1]).is_err());
        let c = VideoClip::from_f64_clamped(&[1.5, -0.2], [2, 1, 1, 1]).unwrap();
        assert_eq!(c.data(), &[1.0, 0.0]);
    }

    #[test]
    fn channel_layout_round_trip() {
        let c = clip();
        let cf = c.to_channel_first();
        assert_eq!(VideoClip::from_channel_first(&cf, c.shape()).unwrap(), c);
        let l = LatentDynamic::new(cf.clone(), [3, 2, 4, 2]).unwrap();
        let back = LatentDynamic::from_channel_first(&l.to_channel_first(), l.shape).unwrap();
        assert_eq!(back, l);
    }

    #[test]
    fn container_round_trip_is_bit_exact() {
        let c = clip().with_fps(Some(25.0));
        let bytes = encode_video(&c);
        assert_eq!(&bytes[..4], b"LDDV");
        assert_eq!(decode_video(&bytes).unwrap(), c);
    }

    #[test]
    fn truncated_payload_is_reported() {
        let bytes = encode_video(&clip());
        let err = decode_video(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, LddmError::TruncatedPayload { .. }), "{err}");
    }

    #[test]
    fn header_geometry_must_match_payload() {
        let small = VideoClip::new(vec![0.5; 8 * 16 * 16 * 2], [8, 16, 16, 2]).unwrap();
        let bytes = encode_video(&small);
        let (header, payload) = split_container(&bytes, VIDEO_MAGIC, "LDDV", 1).unwrap();
        let text = String::from_utf8(header.to_vec()).unwrap().replace("\"frames\":8", "\"frames\":16");
        let mut forged = b"LDDV\x01".to_vec();
        forged.extend_from_slice(&(text.len() as u32).to_le_bytes());
        forged.extend_from_slice(text.as_bytes());
        forged.extend_from_slice(payload);
        // declared [16,16,16,2] but payload only covers 8 frames
        assert!(matches!(decode_video(&forged), Err(LddmError::Geometry(_))));
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0u8; 4]);
        assert!(matches!(decode_video(&extra), Err(LddmError::Geometry(_))));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_video(&clip());
        bytes[4] = 9;
        assert!(matches!(decode_video(&bytes), Err(LddmError::UnsupportedVersion(9))));
        bytes[0] = b'X';
        assert!(matches!(decode_video(&bytes), Err(LddmError::BadMagic { .. })));
    }

    #[test]
    fn resize_constant_and_identity() {
        let c = clip();
        assert_eq!(resize_clip(&c, 2, 4).unwrap(), c);
        let flat = VideoClip::new(vec![0.25; 2 * 3 * 5], [2, 3, 5, 1]).unwrap();
        let r = resize_clip(&flat, 7, 4).unwrap();
        assert_eq!(r.shape(), [2, 7, 4, 1]);
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn geometry_requires_divisibility() {
        let g = Geometry {
            frames: 16,
            height: 16,
            width: 16,
            channels: 2,
            r: 2,
        };
        g.validate().unwrap();
        assert_eq!(g.latent_shape(), [8, 8, 8, 1]);
        let bad = Geometry { channels: 1, ..g };
        assert!(bad.validate().is_err());
    }
}
