//! Frame loading, preprocessing, synthetic benchmark generation and model
//! persistence.

mod checkpoint;
mod image;
mod keyvalue;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

pub use checkpoint::{decode_model, encode_model, load_model, save_model, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use image::{encode_pgm, read_image, write_pgm, RawImage};
pub use keyvalue::{parse_key_values, read_key_values};
pub use synth::{synth_generate, write_sequence, SynthConfig};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::segmentation::Mask;

/// Default side length frames are resized to before entering the model.
pub const DEFAULT_IMAGE_SIZE: usize = 64;

/// A normalized image: planar `C × H × W` values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl Frame {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height * channels {
            return Err(Error::dim(format!(
                "frame {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("frame value {v} outside [-1, 1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    /// Normalize an 8-bit image without resizing.
    pub fn from_raw(raw: &RawImage) -> Self {
        let mut pixels = vec![0.0; raw.data.len()];
        let plane = raw.width * raw.height;
        for (i, &v) in raw.data.iter().enumerate() {
            let (p, c) = (i / raw.channels, i % raw.channels);
            pixels[c * plane + p] = normalize(v as f32);
        }
        Self {
            width: raw.width,
            height: raw.height,
            channels: raw.channels,
            pixels,
        }
    }

    /// Inverse of the normalization, rounded to the nearest 8-bit value.
    pub fn to_raw(&self) -> RawImage {
        let plane = self.width * self.height;
        let mut data = vec![0u8; self.pixels.len()];
        for (i, d) in data.iter_mut().enumerate() {
            let (p, c) = (i / self.channels, i % self.channels);
            *d = denormalize(self.pixels[c * plane + p]);
        }
        RawImage {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data,
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [n, c, h, w] = t.dims4()?;
        if n != 1 {
            return Err(Error::dim(format!(
                "expected a single image, got batch {:?}",
                t.shape()
            )));
        }
        Self::new(w, h, c, t.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.channels, self.height, self.width], self.pixels.clone())
            .expect("frame invariant guarantees the length")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }
}

/// `[0, 255] → [-1, 1]` via `v / 127.5 - 1`.
pub fn normalize(v: f32) -> f32 {
    (v / 127.5 - 1.0).clamp(-1.0, 1.0)
}

pub fn denormalize(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Bilinear resize to `target × target` (pixel-center aligned) followed by
/// normalization to `[-1, 1]`.
pub fn preprocess(raw: &RawImage, target: usize) -> Result<Frame> {
    if target < 8 {
        return Err(Error::contract(format!("target size must be >= 8, got {target}")));
    }
    if raw.width == target && raw.height == target {
        return Ok(Frame::from_raw(raw));
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f32 / out as f32;
        (0..out)
            .map(|o| {
                let src = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f32);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f32)
            })
            .collect()
    };
    let xs = taps(target, raw.width);
    let ys = taps(target, raw.height);
    let plane = target * target;
    let mut pixels = vec![0.0; plane * raw.channels];
    for c in 0..raw.channels {
        for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let p = |xx, yy| raw.at(xx, yy, c) as f32;
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                pixels[c * plane + y * target + x] = normalize(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Frame::new(target, target, raw.channels, pixels)
}

/// How ground truth is laid out next to a frame directory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SequenceLayout {
    /// `gt/` masks share the frame's file stem.
    FlatFrames,
    /// `gt/` holds sparse hand-segmented masks matched to frames by the
    /// trailing number in the file name (`b00247.bmp` ↔ `hand_segmented_00247.bmp`).
    WallflowerStyle,
}

impl std::str::FromStr for SequenceLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" | "flat-frames" => Ok(Self::FlatFrames),
            "wallflower" | "wallflower-style" => Ok(Self::WallflowerStyle),
            other => Err(Error::contract(format!("unknown sequence layout `{other}`"))),
        }
    }
}

/// Ordered frames with optional per-frame ground truth.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Sequence {
    pub frames: Vec<Frame>,
    /// File stems (or generated identifiers), one per frame.
    pub names: Vec<String>,
    /// Ground-truth mask per frame; `None` where the frame is not annotated.
    pub gt: Vec<Option<Mask>>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn has_gt(&self) -> bool {
        self.gt.iter().any(Option::is_some)
    }
}

/// Image files (`.pgm`, `.png`) directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("pgm") || e.eq_ignore_ascii_case("png"));
        if is_image && path.is_file() {
            out.push(path);
        }
    }
    out.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(out)
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Trailing decimal digits of a file stem, used to pair Wallflower-style files.
pub fn trailing_index(stem: &str) -> Option<u64> {
    let digits: String = stem
        .chars()
        .rev()
        .take_while(char::is_ascii_digit)
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok()
}

/// Load every frame in `dir`, resized and normalized to `target`×`target`
/// when given, otherwise normalized at native resolution.
///
/// The channel count of the first frame is enforced on the rest. Masks in a
/// `gt/` subdirectory are attached according to `layout`.
pub fn load_sequence(dir: &Path, layout: SequenceLayout, target: Option<usize>) -> Result<Sequence> {
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(Error::contract(format!("no PGM/PNG frames in {}", dir.display())));
    }
    let mut seq = Sequence::default();
    let mut dims: Option<(usize, usize, usize)> = None;
    for path in &files {
        let raw = read_image(path)?;
        let d = (raw.width, raw.height, raw.channels);
        match dims {
            None => dims = Some(d),
            Some(first) if first != d => {
                return Err(Error::Format(format!(
                    "{}: {}x{}x{} differs from the sequence's {}x{}x{}",
                    path.display(),
                    d.0,
                    d.1,
                    d.2,
                    first.0,
                    first.1,
                    first.2
                )))
            }
            Some(_) => {}
        }
        let frame = match target {
            Some(t) => preprocess(&raw, t)?,
            None => Frame::from_raw(&raw),
        };
        seq.frames.push(frame);
        seq.names.push(file_stem(path));
    }
    seq.gt = vec![None; seq.frames.len()];
    let gt_dir = dir.join("gt");
    if gt_dir.is_dir() {
        let (fw, fh) = (seq.frames[0].width(), seq.frames[0].height());
        for path in list_images(&gt_dir)? {
            let stem = file_stem(&path);
            let slot = match layout {
                SequenceLayout::FlatFrames => seq.names.iter().position(|n| *n == stem),
                SequenceLayout::WallflowerStyle => {
                    trailing_index(&stem).and_then(|idx| seq.names.iter().position(|n| trailing_index(n) == Some(idx)))
                }
            };
            let Some(slot) = slot else {
                continue;
            };
            let mask = Mask::from_raw(&read_image(&path)?)?;
            let mask = if (mask.width(), mask.height()) != (fw, fh) {
                if target.is_none() {
                    return Err(Error::Format(format!(
                        "{}: mask {}x{} does not match frames {}x{}",
                        path.display(),
                        mask.width(),
                        mask.height(),
                        fw,
                        fh
                    )));
                }
                mask.resize_nearest(fw, fh)
            } else {
                mask
            };
            seq.gt[slot] = Some(mask);
        }
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_endpoints_and_midpoint() {
        assert_eq!(normalize(0.0), -1.0);
        assert_eq!(normalize(255.0), 1.0);
        assert!((normalize(128.0) - 0.003_921_6).abs() < 1e-6);
        for v in 0..=255u8 {
            assert_eq!(denormalize(normalize(v as f32)), v);
        }
    }

    #[test]
    fn trailing_index_parses_wallflower_names() {
        assert_eq!(trailing_index("b00247"), Some(247));
        assert_eq!(trailing_index("hand_segmented_00247"), Some(247));
        assert_eq!(trailing_index("frame"), None);
    }

    #[test]
    fn layout_parses() {
        assert_eq!("flat".parse::<SequenceLayout>().unwrap(), SequenceLayout::FlatFrames);
        assert_eq!(
            "wallflower-style".parse::<SequenceLayout>().unwrap(),
            SequenceLayout::WallflowerStyle
        );
        assert!("video".parse::<SequenceLayout>().is_err());
    }

    #[test]
    fn frame_rejects_out_of_range_values() {
        assert!(Frame::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Frame::new(2, 1, 1, vec![0.0]).is_err());
    }
}
