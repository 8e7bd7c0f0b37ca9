//! Synthetic dynamic-background benchmark.
//!
//! Background luminance at pixel `(x, y)` and time `t` is
//! `base + A·sin(2πx/Px + 2πt/Pt) + ramp·t + noise`, clamped to `[0, 255]`
//! and quantized to 8 bits. Training frames use `t = 0, 1, …`; test frame
//! `k` uses `t = (k + 0.5)·n_background/n_test`, so test backgrounds fall
//! between training frames. Test frames additionally carry a square object
//! that follows a seeded random walk; its ground-truth mask marks exactly the
//! composited pixels.

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{denormalize, normalize, write_pgm, Frame, Sequence};
use crate::error::{Error, Result};
use crate::segmentation::Mask;

/// Largest per-frame displacement of the object along each axis.
const WALK_STEP: i64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_background: usize,
    pub n_test: usize,
    pub size: usize,
    pub base_luminance: f32,
    pub wave_amplitude: f32,
    pub wave_period_px: f32,
    pub wave_period_frames: f32,
    /// Luminance added per frame.
    pub illum_ramp: f32,
    pub noise_sigma: f32,
    pub object_size_px: usize,
    /// 0 leaves the object invisible, 1 pushes it fully to the far extreme.
    pub object_contrast: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_background: 500,
            n_test: 50,
            size: 64,
            base_luminance: 64.0,
            wave_amplitude: 24.0,
            wave_period_px: 16.0,
            wave_period_frames: 40.0,
            illum_ramp: 0.2,
            noise_sigma: 2.0,
            object_size_px: 16,
            object_contrast: 0.75,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub const KEYS: [&'static str; 12] = [
        "n_background",
        "n_test",
        "size",
        "base_luminance",
        "wave_amplitude",
        "wave_period_px",
        "wave_period_frames",
        "illum_ramp",
        "noise_sigma",
        "object_size_px",
        "object_contrast",
        "seed",
    ];

    /// Set one field from its textual value. Keys may use `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        let bad = |_| Error::contract(format!("synthetic config: invalid value `{value}` for `{key}`"));
        match key.as_str() {
            "n_background" => self.n_background = value.parse().map_err(bad)?,
            "n_test" => self.n_test = value.parse().map_err(bad)?,
            "size" => self.size = value.parse().map_err(bad)?,
            "object_size_px" => self.object_size_px = value.parse().map_err(bad)?,
            "seed" => self.seed = value.parse().map_err(bad)?,
            _ => {
                let v: f32 = value
                    .parse()
                    .map_err(|_| Error::contract(format!("synthetic config: invalid value `{value}` for `{key}`")))?;
                match key.as_str() {
                    "base_luminance" => self.base_luminance = v,
                    "wave_amplitude" => self.wave_amplitude = v,
                    "wave_period_px" => self.wave_period_px = v,
                    "wave_period_frames" => self.wave_period_frames = v,
                    "illum_ramp" => self.illum_ramp = v,
                    "noise_sigma" => self.noise_sigma = v,
                    "object_contrast" => self.object_contrast = v,
                    _ => return Err(Error::contract(format!("unknown synthetic config key `{key}`"))),
                }
            }
        }
        Ok(())
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::contract(format!("size must be >= 8, got {}", self.size)));
        }
        if self.object_size_px == 0 || self.object_size_px >= self.size {
            return Err(Error::contract(format!(
                "object_size_px {} must lie in [1, size={})",
                self.object_size_px, self.size
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::contract("noise_sigma must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.object_contrast) {
            return Err(Error::contract("object_contrast must lie in [0, 1]"));
        }
        if !(self.wave_period_px > 0.0 && self.wave_period_frames > 0.0) {
            return Err(Error::contract("wave periods must be > 0"));
        }
        Ok(())
    }

    /// Noise-free background luminance.
    fn luminance(&self, x: usize, t: f32) -> f32 {
        self.base_luminance
            + self.wave_amplitude
                * (2.0 * PI * x as f32 / self.wave_period_px + 2.0 * PI * t / self.wave_period_frames).sin()
            + self.illum_ramp * t
    }
}

fn background(cfg: &SynthConfig, t: f32, noise: &Option<Normal<f32>>, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let n = cfg.size;
    let mut px = Vec::with_capacity(n * n);
    for _y in 0..n {
        for x in 0..n {
            let mut v = cfg.luminance(x, t);
            if let Some(d) = noise {
                v += d.sample(rng);
            }
            px.push(v.clamp(0.0, 255.0).round() as u8);
        }
    }
    px
}

fn to_frame(size: usize, px: &[u8]) -> Frame {
    Frame::new(size, size, 1, px.iter().map(|&v| normalize(v as f32)).collect()).expect("synthetic frame geometry")
}

/// Generate `(train, test)` sequences. The training sequence has no ground
/// truth; every test frame has a mask.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(Sequence, Sequence)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = (cfg.noise_sigma > 0.0).then(|| Normal::new(0.0, cfg.noise_sigma).expect("sigma checked"));
    let n = cfg.size;

    let mut train = Sequence::default();
    for t in 0..cfg.n_background {
        let px = background(cfg, t as f32, &noise, &mut rng);
        train.frames.push(to_frame(n, &px));
        train.names.push(format!("bg_{t:05}"));
        train.gt.push(None);
    }

    let mut test = Sequence::default();
    let s = cfg.object_size_px;
    let limit = (n - s) as i64;
    let mut pos = (rng.random_range(0..=limit), rng.random_range(0..=limit));
    let spacing = cfg.n_background.max(1) as f32 / cfg.n_test.max(1) as f32;
    for k in 0..cfg.n_test {
        if k > 0 {
            let step = |p: i64, rng: &mut ChaCha8Rng| {
                let q = p + rng.random_range(-WALK_STEP..=WALK_STEP);
                if q < 0 {
                    -q
                } else if q > limit {
                    2 * limit - q
                } else {
                    q
                }
            };
            pos = (step(pos.0, &mut rng), step(pos.1, &mut rng));
        }
        let t = (k as f32 + 0.5) * spacing;
        let mut px = background(cfg, t, &noise, &mut rng);
        // Push toward whichever extreme is farther from the mean background.
        let target = if cfg.base_luminance + cfg.illum_ramp * t < 127.5 {
            255.0
        } else {
            0.0
        };
        let mut bits = vec![false; n * n];
        let (ox, oy) = (pos.0 as usize, pos.1 as usize);
        for y in oy..oy + s {
            for x in ox..ox + s {
                let i = y * n + x;
                let bg = px[i] as f32;
                px[i] = (bg + cfg.object_contrast * (target - bg)).clamp(0.0, 255.0).round() as u8;
                bits[i] = true;
            }
        }
        test.frames.push(to_frame(n, &px));
        test.names.push(format!("frame_{k:05}"));
        test.gt.push(Some(Mask::new(n, n, bits)?));
    }
    Ok((train, test))
}

/// Write frames as `<name>.pgm` and masks as `gt/<name>.pgm`. Returns every
/// path written.
pub fn write_sequence(dir: &Path, seq: &Sequence) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (frame, name) in seq.frames.iter().zip(&seq.names) {
        if frame.channels() != 1 {
            return Err(Error::contract("only single-channel frames are written as PGM"));
        }
        let path = dir.join(format!("{name}.pgm"));
        let bytes: Vec<u8> = frame.pixels().iter().map(|&v| denormalize(v)).collect();
        write_pgm(&path, frame.width(), frame.height(), &bytes)?;
        written.push(path);
    }
    if seq.has_gt() {
        let gt_dir = dir.join("gt");
        fs::create_dir_all(&gt_dir).map_err(|e| Error::io(&gt_dir, e))?;
        for (mask, name) in seq.gt.iter().zip(&seq.names) {
            if let Some(mask) = mask {
                let path = gt_dir.join(format!("{name}.pgm"));
                write_pgm(&path, mask.width(), mask.height(), &mask.to_gray())?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
