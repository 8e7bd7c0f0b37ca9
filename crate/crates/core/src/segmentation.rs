//! Residual maps, thresholding and mask cleanup.

use crate::dataio::RawImage;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::gan::GanModel;
use crate::inversion::{invert, InversionConfig, InversionResult};

/// Binary mask, row-major, `true` = foreground.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::dim(format!(
                "mask {width}x{height} needs {} bits, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of foreground pixels.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.bits.len() as f64
        }
    }

    /// Foreground 255, background 0.
    pub fn to_gray(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect()
    }

    /// Pixels whose channel mean is at least 128 are foreground.
    pub fn from_raw(raw: &RawImage) -> Result<Self> {
        let bits = raw
            .data
            .chunks_exact(raw.channels.max(1))
            .map(|px| px.iter().map(|&v| v as usize).sum::<usize>() >= 128 * px.len())
            .collect();
        Self::new(raw.width, raw.height, bits)
    }

    pub fn resize_nearest(&self, width: usize, height: usize) -> Mask {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            for x in 0..width {
                let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
                bits.push(self.get(sx, sy));
            }
        }
        Mask { width, height, bits }
    }

    /// Intersection over union; two empty masks score 1.
    pub fn iou(&self, other: &Mask) -> Result<f64> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::dim("iou: masks differ in size"));
        }
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThresholdMode {
    Fixed { tau: f32 },
    Otsu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ChannelReduce {
    #[default]
    MeanAbs,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegConfig {
    pub threshold_mode: ThresholdMode,
    pub channel_reduce: ChannelReduce,
    pub median_radius: usize,
    /// Lower bound applied to the Otsu threshold.
    pub min_tau: f32,
}

pub const DEFAULT_MIN_TAU: f32 = 0.4;

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            threshold_mode: ThresholdMode::Otsu,
            channel_reduce: ChannelReduce::MeanAbs,
            median_radius: 1,
            min_tau: DEFAULT_MIN_TAU,
        }
    }
}

impl SegConfig {
    pub fn fixed(tau: f32) -> Self {
        Self {
            threshold_mode: ThresholdMode::Fixed { tau },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let ThresholdMode::Fixed { tau } = self.threshold_mode {
            if !(tau > 0.0 && tau <= 2.0) {
                return Err(Error::contract(format!("fixed tau must lie in (0, 2], got {tau}")));
            }
        }
        if !(0.0..=2.0).contains(&self.min_tau) {
            return Err(Error::contract(format!(
                "min_tau must lie in [0, 2], got {}",
                self.min_tau
            )));
        }
        Ok(())
    }
}

/// Per-pixel residual magnitude, row-major `H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

fn image_dims(t: &Tensor) -> Result<[usize; 3]> {
    match *t.shape() {
        [1, c, h, w] | [c, h, w] => Ok([c, h, w]),
        _ => Err(Error::dim(format!(
            "expected a [1, C, H, W] image, got {:?}",
            t.shape()
        ))),
    }
}

/// Mean over channels of `|x − bg|`.
pub fn subtract(x: &Tensor, bg: &Tensor) -> Result<ResidualMap> {
    let [c, h, w] = image_dims(x)?;
    if image_dims(bg)? != [c, h, w] {
        return Err(Error::dim(format!("subtract: {:?} vs {:?}", x.shape(), bg.shape())));
    }
    let plane = h * w;
    let mut values = vec![0.0f32; plane];
    for ch in 0..c {
        let xs = &x.data()[ch * plane..(ch + 1) * plane];
        let bs = &bg.data()[ch * plane..(ch + 1) * plane];
        for ((v, a), b) in values.iter_mut().zip(xs).zip(bs) {
            *v += (a - b).abs();
        }
    }
    for v in &mut values {
        *v /= c as f32;
    }
    Ok(ResidualMap {
        width: w,
        height: h,
        values,
    })
}

pub const OTSU_BINS: usize = 256;

/// Otsu's threshold over a 256-bin histogram spanning `[min, max]` of the
/// values. Returns `None` for a constant map. When several cuts reach the
/// maximal between-class variance, the midpoint of the first and last is used.
pub fn otsu_threshold(values: &[f32]) -> Option<f32> {
    let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    if values.is_empty() || !(hi > lo) {
        return None;
    }
    let width = (hi - lo) as f64 / OTSU_BINS as f64;
    let mut hist = [0u64; OTSU_BINS];
    for &v in values {
        let b = (((v - lo) as f64 / width) as usize).min(OTSU_BINS - 1);
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let center = |b: usize| lo as f64 + (b as f64 + 0.5) * width;
    let sum_all: f64 = (0..OTSU_BINS).map(|b| hist[b] as f64 * center(b)).sum();
    let (mut w0, mut sum0) = (0.0f64, 0.0f64);
    let mut best = f64::NEG_INFINITY;
    let (mut first, mut last) = (0usize, 0usize);
    for t in 0..OTSU_BINS - 1 {
        w0 += hist[t] as f64;
        sum0 += hist[t] as f64 * center(t);
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        let tol = 1e-9 * between.abs().max(1e-300);
        if between > best + tol {
            best = between;
            first = t;
            last = t;
        } else if (between - best).abs() <= tol {
            last = t;
        }
    }
    let cut = (first + last) as f64 / 2.0 + 1.0;
    Some((lo as f64 + cut * width) as f32)
}

/// Binary mask `res > τ`.
pub fn threshold(res: &ResidualMap, cfg: &SegConfig) -> Result<Mask> {
    if let Some(v) = res.values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::contract(format!(
            "residual value {v} is not finite and non-negative"
        )));
    }
    let tau = match cfg.threshold_mode {
        ThresholdMode::Fixed { tau } => tau,
        ThresholdMode::Otsu => match otsu_threshold(&res.values) {
            Some(t) => t.max(cfg.min_tau),
            None => return Ok(Mask::empty(res.width, res.height)),
        },
    };
    Mask::new(res.width, res.height, res.values.iter().map(|&v| v > tau).collect())
}

/// Median filter over a `(2r+1)²` window truncated at the border.
/// A pixel is foreground iff foreground is a strict majority of its window.
pub fn postprocess(m: &Mask, cfg: &SegConfig) -> Mask {
    median_filter(m, cfg.median_radius)
}

pub fn median_filter(m: &Mask, radius: usize) -> Mask {
    if radius == 0 || m.bits.is_empty() {
        return m.clone();
    }
    let (w, h) = (m.width, m.height);
    // Summed-area table of foreground counts.
    let mut sat = vec![0u32; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0u32;
        for x in 0..w {
            row += m.bits[y * w + x] as u32;
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let mut bits = Vec::with_capacity(w * h);
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(radius), (y + radius + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(radius), (x + radius + 1).min(w));
            let fg = sat[y1 * (w + 1) + x1] + sat[y0 * (w + 1) + x0] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0];
            let n = ((y1 - y0) * (x1 - x0)) as u32;
            bits.push(2 * fg > n);
        }
    }
    Mask {
        width: w,
        height: h,
        bits,
    }
}

/// Invert the frame, subtract the synthesized background, threshold and clean up.
pub fn segment_frame(
    model: &GanModel,
    x: &Tensor,
    icfg: &InversionConfig,
    scfg: &SegConfig,
) -> Result<(Mask, InversionResult)> {
    let inv = invert(model, x, icfg)?;
    let mask = mask_from_background(x, &inv.background, scfg)?;
    Ok((mask, inv))
}

/// The same subtract, threshold and filter chain against a static reference frame.
pub fn frame_difference_baseline(x: &Tensor, reference: &Tensor, scfg: &SegConfig) -> Result<Mask> {
    mask_from_background(x, reference, scfg)
}

pub fn mask_from_background(x: &Tensor, bg: &Tensor, scfg: &SegConfig) -> Result<Mask> {
    let res = subtract(x, bg)?;
    Ok(postprocess(&threshold(&res, scfg)?, scfg))
}
