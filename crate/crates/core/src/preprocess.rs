//! Event streams to binned count frames, plus frame-level augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::event_io::EventStream;

/// Default bin width in microseconds.
pub const DEFAULT_BIN_US: u64 = 2000;

/// Square spatial crop, centered at `(cx, cy)` in sensor pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crop {
    pub cx: u32,
    pub cy: u32,
    pub side: u32,
}

impl Crop {
    /// Largest centered crop of `side` pixels for a sensor.
    pub fn centered(width: u16, height: u16, side: u32) -> Self {
        Crop {
            cx: width as u32 / 2,
            cy: height as u32 / 2,
            side,
        }
    }

    fn origin(&self) -> (i64, i64) {
        (
            self.cx as i64 - self.side as i64 / 2,
            self.cy as i64 - self.side as i64 / 2,
        )
    }
}

/// Per-polarity event counts, laid out `[T, 2, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameSequence {
    pub bins: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u32>,
    pub bin_us: u64,
    pub origin_us: u64,
    /// Set when the source stream was shorter than the encoded window.
    pub padded: bool,
}

impl FrameSequence {
    pub fn zeros(bins: usize, height: usize, width: usize, bin_us: u64) -> Self {
        FrameSequence {
            bins,
            height,
            width,
            data: vec![0; bins * 2 * height * width],
            bin_us,
            origin_us: 0,
            padded: false,
        }
    }

    #[inline]
    pub fn index(&self, t: usize, p: usize, y: usize, x: usize) -> usize {
        ((t * 2 + p) * self.height + y) * self.width + x
    }

    pub fn get(&self, t: usize, p: usize, y: usize, x: usize) -> u32 {
        self.data[self.index(t, p, y, x)]
    }

    pub fn frame_len(&self) -> usize {
        2 * self.height * self.width
    }

    pub fn total(&self) -> u64 {
        self.data.iter().map(|&c| c as u64).sum()
    }

    /// Totals per polarity channel `[off, on]`.
    pub fn polarity_totals(&self) -> [u64; 2] {
        let plane = self.height * self.width;
        let mut out = [0u64; 2];
        for (i, &c) in self.data.iter().enumerate() {
            out[(i / plane) % 2] += c as u64;
        }
        out
    }

    /// Bins `[start, start + len)`, zero-filled past the end.
    pub fn window(&self, start: usize, len: usize) -> FrameSequence {
        let fl = self.frame_len();
        let mut out = FrameSequence::zeros(len, self.height, self.width, self.bin_us);
        out.origin_us = self.origin_us + start as u64 * self.bin_us;
        let avail = self.bins.saturating_sub(start).min(len);
        out.data[..avail * fl].copy_from_slice(&self.data[start * fl..(start + avail) * fl]);
        out.padded = self.padded || avail < len;
        out
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.bins, 2, self.height, self.width],
            self.data.iter().map(|&c| c as f32).collect(),
        )
        .expect("frame layout")
    }
}

/// Bin a stream into count frames.
///
/// Events inside the crop and in `[t_start, t_end)` land in bin
/// `(t − t_start) / bin_us`, cell `((y − y0)·H/side, (x − x0)·W/side)`.
pub fn encode(
    stream: &EventStream,
    crop: Crop,
    out_size: (usize, usize),
    bin_us: u64,
    t_start_us: u64,
    t_end_us: u64,
) -> Result<FrameSequence> {
    let (h, w) = out_size;
    if h == 0 || w == 0 || crop.side == 0 {
        return Err(Error::arg("empty crop or output size"));
    }
    if !(crop.side as usize).is_multiple_of(h) || !(crop.side as usize).is_multiple_of(w) {
        return Err(Error::arg(format!(
            "crop side {} is not divisible by output {h}x{w}",
            crop.side
        )));
    }
    if bin_us == 0 {
        return Err(Error::arg("bin width must be positive"));
    }
    if t_end_us <= t_start_us {
        return Err(Error::arg("empty time range"));
    }
    let (by, bx) = (crop.side as i64 / h as i64, crop.side as i64 / w as i64);
    let (x0, y0) = crop.origin();
    let bins = (t_end_us - t_start_us).div_ceil(bin_us) as usize;
    let mut seq = FrameSequence::zeros(bins, h, w, bin_us);
    seq.origin_us = t_start_us;
    seq.padded = stream.duration_us < t_end_us;
    for e in &stream.events {
        if e.t < t_start_us || e.t >= t_end_us {
            continue;
        }
        let lx = e.x as i64 - x0;
        let ly = e.y as i64 - y0;
        if lx < 0 || ly < 0 || lx >= crop.side as i64 || ly >= crop.side as i64 {
            continue;
        }
        let t = ((e.t - t_start_us) / bin_us) as usize;
        let i = seq.index(t, e.p as usize, (ly / by) as usize, (lx / bx) as usize);
        seq.data[i] += 1;
    }
    Ok(seq)
}

/// A training time window. `padded` marks streams shorter than the window;
/// those are encoded from 0 with trailing empty bins.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeWindow {
    pub t_start: u64,
    pub t_end: u64,
    pub padded: bool,
}

/// Uniformly random `window_us` slice of the stream.
pub fn random_crop_window(stream: &EventStream, window_us: u64, rng_seed: u64) -> TimeWindow {
    let duration = stream.duration_us;
    if duration < window_us {
        return TimeWindow {
            t_start: 0,
            t_end: window_us,
            padded: true,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let start = rng.gen_range(0..=duration - window_us);
    TimeWindow {
        t_start: start,
        t_end: start + window_us,
        padded: false,
    }
}

/// Random augmentation ranges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    /// Maximum absolute shift in cells, drawn independently per axis.
    pub shift_px: u32,
    /// Zoom factor range `[lo, hi]`.
    pub zoom: (f64, f64),
    pub hflip_prob: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            shift_px: 10,
            zoom: (0.9, 1.1),
            hflip_prob: 0.5,
        }
    }
}

impl AugmentSpec {
    pub fn identity() -> Self {
        AugmentSpec {
            shift_px: 0,
            zoom: (1.0, 1.0),
            hflip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.zoom;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::arg(format!("invalid zoom range ({lo}, {hi})")));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::arg("hflip_prob must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn sample(&self, rng_seed: u64) -> Transform {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let s = self.shift_px as i64;
        let dx = if s > 0 { rng.gen_range(-s..=s) } else { 0 };
        let dy = if s > 0 { rng.gen_range(-s..=s) } else { 0 };
        let (lo, hi) = self.zoom;
        let zoom = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let hflip = self.hflip_prob > 0.0 && rng.gen_bool(self.hflip_prob);
        Transform { dx, dy, zoom, hflip }
    }
}

/// Concrete spatial transform: flip, then zoom about the center, then shift.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub dx: i64,
    pub dy: i64,
    pub zoom: f64,
    pub hflip: bool,
}

impl Transform {
    pub fn identity() -> Self {
        Transform {
            dx: 0,
            dy: 0,
            zoom: 1.0,
            hflip: false,
        }
    }

    /// Source cell of output cell `(y, x)`, if any.
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> Option<(usize, usize)> {
        let sy = y as i64 - self.dy;
        let sx = x as i64 - self.dx;
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let zy = ((sy as f64 - cy) / self.zoom + cy).round() as i64;
        let mut zx = ((sx as f64 - cx) / self.zoom + cx).round() as i64;
        if zy < 0 || zx < 0 || zy >= h as i64 || zx >= w as i64 {
            return None;
        }
        if self.hflip {
            zx = w as i64 - 1 - zx;
        }
        Some((zy as usize, zx as usize))
    }

    /// Apply to every bin and polarity plane identically; uncovered cells are zero.
    pub fn apply(&self, seq: &FrameSequence) -> FrameSequence {
        let (h, w) = (seq.height, seq.width);
        let map: Vec<Option<usize>> = (0..h * w)
            .map(|i| self.source(i / w, i % w, h, w).map(|(y, x)| y * w + x))
            .collect();
        let mut out = seq.clone();
        let plane = h * w;
        for (dst, src) in out.data.chunks_mut(plane).zip(seq.data.chunks(plane)) {
            for (d, m) in dst.iter_mut().zip(&map) {
                *d = m.map_or(0, |j| src[j]);
            }
        }
        out
    }
}

pub fn augment(seq: &FrameSequence, spec: &AugmentSpec, rng_seed: u64) -> FrameSequence {
    spec.sample(rng_seed).apply(seq)
}
