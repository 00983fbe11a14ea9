//! Event data model, the `EEVA` binary container and synthetic streams.
//!
//! File layout (little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "EEVA"
//! 4       2     version (1)
//! 6       2     sensor width
//! 8       2     sensor height
//! 10      4     event count
//! 14      2     reserved (0)
//! 16      13·n  records {t: u64 µs, x: u16, y: u16, p: u8}
//! ```
//!
//! The container stores geometry and events only. Labels and nominal
//! durations travel in the dataset manifest.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EEVA";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;
pub const RECORD_LEN: usize = 13;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Event {
    /// Timestamp in microseconds.
    pub t: u64,
    pub x: u16,
    pub y: u16,
    /// 1 for a brightness increase, 0 for a decrease.
    pub p: u8,
}

/// A time-sorted event recording with its sensor geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    pub width: u16,
    pub height: u16,
    pub events: Vec<Event>,
    pub label: Option<usize>,
    /// Nominal recording length; never shorter than the last timestamp.
    pub duration_us: u64,
}

impl EventStream {
    /// Validates geometry, polarity, ordering and duration.
    pub fn new(
        width: u16,
        height: u16,
        events: Vec<Event>,
        duration_us: u64,
        label: Option<usize>,
    ) -> Result<Self> {
        let stream = EventStream {
            width,
            height,
            events,
            label,
            duration_us,
        };
        stream.validate()?;
        Ok(stream)
    }

    pub fn empty(width: u16, height: u16) -> Self {
        EventStream {
            width,
            height,
            events: Vec::new(),
            label: None,
            duration_us: 0,
        }
    }

    pub fn event_count(&self) -> usize {
        self.events.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.events.iter().enumerate() {
            check_event(e, self.width, self.height, i)?;
        }
        if self.events.windows(2).any(|w| w[1].t < w[0].t) {
            return Err(Error::Validation("events are not time-sorted".into()));
        }
        if let Some(last) = self.events.last() {
            if last.t > self.duration_us {
                return Err(Error::Validation(format!(
                    "last event at {} µs exceeds duration {} µs",
                    last.t, self.duration_us
                )));
            }
        }
        Ok(())
    }

    /// Mirror the x axis.
    pub fn hflip(&self) -> Self {
        let w = self.width;
        let mut out = self.clone();
        for e in &mut out.events {
            e.x = w - 1 - e.x;
        }
        out
    }

    /// Per-polarity totals `[off, on]`.
    pub fn polarity_counts(&self) -> [usize; 2] {
        let on = self.events.iter().filter(|e| e.p == 1).count();
        [self.events.len() - on, on]
    }
}

fn check_event(e: &Event, width: u16, height: u16, index: usize) -> Result<()> {
    if e.x >= width || e.y >= height {
        return Err(Error::Validation(format!(
            "event {index} at ({}, {}) outside {width}x{height} sensor",
            e.x, e.y
        )));
    }
    if e.p > 1 {
        return Err(Error::Validation(format!(
            "event {index} has polarity {}",
            e.p
        )));
    }
    Ok(())
}

/// Result of [`read_stream`]. `resorted` is set when the file was not time-ordered.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedStream {
    pub stream: EventStream,
    pub resorted: bool,
}

pub fn encode_stream(stream: &EventStream) -> Result<Vec<u8>> {
    let count = u32::try_from(stream.events.len())
        .map_err(|_| Error::arg("too many events for the container"))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + RECORD_LEN * stream.events.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&stream.width.to_le_bytes());
    buf.extend_from_slice(&stream.height.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    for e in &stream.events {
        buf.extend_from_slice(&e.t.to_le_bytes());
        buf.extend_from_slice(&e.x.to_le_bytes());
        buf.extend_from_slice(&e.y.to_le_bytes());
        buf.push(e.p);
    }
    Ok(buf)
}

pub fn decode_stream(bytes: &[u8]) -> Result<LoadedStream> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing EEVA magic".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Corrupt(format!(
            "header truncated at {} bytes",
            bytes.len()
        )));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let version = u16_at(4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let width = u16_at(6);
    let height = u16_at(8);
    let count = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() != count * RECORD_LEN {
        return Err(Error::Corrupt(format!(
            "header declares {count} records ({} bytes) but body has {} bytes",
            count * RECORD_LEN,
            body.len()
        )));
    }
    let mut events = Vec::with_capacity(count);
    for (i, rec) in body.chunks_exact(RECORD_LEN).enumerate() {
        let e = Event {
            t: u64::from_le_bytes(rec[..8].try_into().unwrap()),
            x: u16::from_le_bytes([rec[8], rec[9]]),
            y: u16::from_le_bytes([rec[10], rec[11]]),
            p: rec[12],
        };
        check_event(&e, width, height, i)?;
        events.push(e);
    }
    let resorted = events.windows(2).any(|w| w[1].t < w[0].t);
    if resorted {
        events.sort_by_key(|e| e.t);
    }
    let duration_us = events.last().map_or(0, |e| e.t);
    Ok(LoadedStream {
        stream: EventStream {
            width,
            height,
            events,
            label: None,
            duration_us,
        },
        resorted,
    })
}

pub fn read_stream(path: impl AsRef<Path>) -> Result<LoadedStream> {
    decode_stream(&fs::read(path)?)
}

pub fn write_stream(stream: &EventStream, path: impl AsRef<Path>) -> Result<()> {
    stream.validate()?;
    let bytes = encode_stream(stream)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Motion patterns of the synthetic generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// Vertical bar sweeping right to left.
    BarLeft,
    /// Vertical bar sweeping left to right.
    BarRight,
    /// Blob orbiting clockwise (image coordinates, y down).
    DotCw,
    DotCcw,
    Noise,
}

impl Pattern {
    pub const ALL: [Pattern; 5] = [
        Pattern::BarLeft,
        Pattern::BarRight,
        Pattern::DotCw,
        Pattern::DotCcw,
        Pattern::Noise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::BarLeft => "bar_left",
            Pattern::BarRight => "bar_right",
            Pattern::DotCw => "dot_cw",
            Pattern::DotCcw => "dot_ccw",
            Pattern::Noise => "noise",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pattern::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown pattern '{s}'")))
    }
}

/// Fraction of generated events that are uniform background activity.
const BACKGROUND_FRACTION: f64 = 0.1;

/// Per-stream random motion parameters, drawn before any event.
struct Motion {
    phase: f64,
    speed: f64,
    thickness: f64,
    y_lo: f64,
    y_hi: f64,
    radius: f64,
    center: (f64, f64),
}

impl Motion {
    fn draw(rng: &mut ChaCha8Rng, w: f64, h: f64) -> Self {
        let span = rng.gen_range(0.5..0.9) * h;
        let y_lo = rng.gen_range(0.0..(h - span).max(1e-9));
        let radius = rng.gen_range(0.2..0.35) * w.min(h);
        Motion {
            phase: rng.gen_range(0.0..1.0),
            // frame widths (bars) or revolutions (dots) per second
            speed: rng.gen_range(1.0..2.5),
            thickness: rng.gen_range(0.08..0.15) * w,
            y_lo,
            y_hi: y_lo + span,
            radius,
            center: (
                w / 2.0 + rng.gen_range(-0.1..0.1) * w,
                h / 2.0 + rng.gen_range(-0.1..0.1) * h,
            ),
        }
    }
}

/// Deterministic synthetic event stream.
///
/// Timing is a Poisson process of the given rate. Moving patterns emit ON
/// events on their leading edge and OFF events on the trailing edge, plus
/// uniform background activity. `bar_left` / `dot_ccw` are exact horizontal
/// mirrors of `bar_right` / `dot_cw` for the same seed.
pub fn generate_synthetic(
    pattern: Pattern,
    geometry: (u16, u16),
    duration_us: u64,
    rate: f64,
    seed: u64,
) -> Result<EventStream> {
    let (width, height) = geometry;
    if duration_us == 0 {
        return Err(Error::arg("duration must be positive"));
    }
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::arg("rate must be positive"));
    }
    if width == 0 || height == 0 {
        return Err(Error::arg("sensor geometry must be non-empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    let motion = Motion::draw(&mut rng, w, h);
    let gap = Exp::new(rate).map_err(|e| Error::arg(e.to_string()))?;
    let jitter = Normal::new(0.0, 0.6).unwrap();
    let mirrored = matches!(pattern, Pattern::BarLeft | Pattern::DotCcw);

    let mut events = Vec::new();
    let mut t = 0.0f64;
    loop {
        t += gap.sample(&mut rng) * 1e6;
        if t >= duration_us as f64 {
            break;
        }
        let secs = t * 1e-6;
        let background = pattern == Pattern::Noise || rng.gen_bool(BACKGROUND_FRACTION);
        let (x, y, p) = if background {
            (rng.gen_range(0.0..w), rng.gen_range(0.0..h), rng.gen_range(0..2u8))
        } else {
            match pattern {
                Pattern::BarLeft | Pattern::BarRight => {
                    let center = (motion.phase + motion.speed * secs) * w;
                    let on = rng.gen_bool(0.5);
                    let half = motion.thickness / 2.0;
                    let edge = if on { center + half } else { center - half };
                    let x = (edge + jitter.sample(&mut rng)).rem_euclid(w);
                    let y = rng.gen_range(motion.y_lo..motion.y_hi);
                    (x, y, on as u8)
                }
                Pattern::DotCw | Pattern::DotCcw => {
                    let angle = std::f64::consts::TAU * (motion.phase + motion.speed * secs);
                    let (cx, cy) = (
                        motion.center.0 + motion.radius * angle.cos(),
                        motion.center.1 + motion.radius * angle.sin(),
                    );
                    let dx = jitter.sample(&mut rng) * 2.0;
                    let dy = jitter.sample(&mut rng) * 2.0;
                    // velocity direction of increasing angle
                    let (vx, vy) = (-angle.sin(), angle.cos());
                    let on = dx * vx + dy * vy >= 0.0;
                    (cx + dx, cy + dy, on as u8)
                }
                Pattern::Noise => unreachable!(),
            }
        };
        let mut xi = (x.floor() as i64).clamp(0, width as i64 - 1) as u16;
        let yi = (y.floor() as i64).clamp(0, height as i64 - 1) as u16;
        if mirrored {
            xi = width - 1 - xi;
        }
        events.push(Event {
            t: t as u64,
            x: xi,
            y: yi,
            p,
        });
    }
    EventStream::new(width, height, events, duration_us, None)
}

/// Labelled synthetic set: `per_class` streams for every pattern, labelled
/// by its position in `patterns`, interleaved by class.
pub fn synthetic_dataset(
    patterns: &[Pattern],
    per_class: usize,
    geometry: (u16, u16),
    duration_us: u64,
    rate: f64,
    seed: u64,
) -> Result<Vec<EventStream>> {
    if patterns.is_empty() {
        return Err(Error::arg("no patterns given"));
    }
    let mut out = Vec::with_capacity(per_class * patterns.len());
    for i in 0..per_class {
        for (label, &pattern) in patterns.iter().enumerate() {
            let sample_seed = seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add((i * patterns.len() + label) as u64);
            let mut s = generate_synthetic(pattern, geometry, duration_us, rate, sample_seed)?;
            s.label = Some(label);
            out.push(s);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::HashSet;

    #[test]
    fn empty_stream_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.eeva");
        write_stream(&EventStream::empty(100, 100), &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 16);
        let loaded = read_stream(&path).unwrap();
        assert_eq!(loaded.stream.event_count(), 0);
        assert_eq!(loaded.stream.duration_us, 0);
        assert_eq!((loaded.stream.width, loaded.stream.height), (100, 100));
        assert!(!loaded.resorted);
    }

    #[test]
    fn single_event_round_trip() {
        let e = Event { t: 5, x: 3, y: 4, p: 1 };
        let s = EventStream::new(100, 100, vec![e], 5, None).unwrap();
        let back = decode_stream(&encode_stream(&s).unwrap()).unwrap();
        assert_eq!(back.stream, s);
    }

    #[test]
    fn two_events_give_header_plus_two_records() {
        let s = EventStream::new(
            10,
            10,
            vec![Event { t: 1, x: 0, y: 0, p: 0 }, Event { t: 2, x: 9, y: 9, p: 1 }],
            2,
            None,
        )
        .unwrap();
        assert_eq!(encode_stream(&s).unwrap().len(), 16 + 2 * 13);
    }

    fn raw_file(width: u16, height: u16, events: &[Event]) -> Vec<u8> {
        let s = EventStream {
            width,
            height,
            events: events.to_vec(),
            label: None,
            duration_us: u64::MAX,
        };
        encode_stream(&s).unwrap()
    }

    #[test]
    fn unsorted_file_is_resorted_with_flag() {
        let bytes = raw_file(
            10,
            10,
            &[Event { t: 10, x: 1, y: 1, p: 0 }, Event { t: 7, x: 2, y: 2, p: 1 }],
        );
        let loaded = decode_stream(&bytes).unwrap();
        assert!(loaded.resorted);
        let ts: Vec<u64> = loaded.stream.events.iter().map(|e| e.t).collect();
        assert_eq!(ts, vec![7, 10]);
    }

    #[test]
    fn format_errors() {
        let good = raw_file(10, 10, &[Event { t: 1, x: 1, y: 1, p: 1 }]);
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_stream(&bad_magic), Err(Error::Format(_))));
        assert!(matches!(
            decode_stream(&good[..good.len() - 3]),
            Err(Error::Corrupt(_))
        ));
        assert!(matches!(decode_stream(&good[..10]), Err(Error::Corrupt(_))));
        let outside = raw_file(10, 10, &[Event { t: 1, x: 10, y: 1, p: 1 }]);
        assert!(matches!(decode_stream(&outside), Err(Error::Validation(_))));
        let polarity = raw_file(10, 10, &[Event { t: 1, x: 1, y: 1, p: 2 }]);
        assert!(matches!(decode_stream(&polarity), Err(Error::Validation(_))));
    }

    #[test]
    fn write_to_missing_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nope").join("x.eeva");
        assert!(matches!(
            write_stream(&EventStream::empty(4, 4), path),
            Err(Error::Io(_))
        ));
    }

    proptest! {
        #[test]
        fn random_permutations_sort_like_the_oracle(
            ts in proptest::collection::vec(0u64..1000, 0..200),
        ) {
            let events: Vec<Event> = ts
                .iter()
                .enumerate()
                .map(|(i, &t)| Event { t, x: (i % 7) as u16, y: (i % 5) as u16, p: (i % 2) as u8 })
                .collect();
            let loaded = decode_stream(&raw_file(8, 8, &events)).unwrap();
            let mut oracle = events.clone();
            oracle.sort_by_key(|e| e.t);
            prop_assert_eq!(&loaded.stream.events, &oracle);
            prop_assert_eq!(loaded.resorted, events.windows(2).any(|w| w[1].t < w[0].t));
        }

        #[test]
        fn write_then_read_is_identity(seed in any::<u64>(), n in 0usize..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut events: Vec<Event> = (0..n)
                .map(|_| Event {
                    t: rng.gen_range(0..1_000_000),
                    x: rng.gen_range(0..640),
                    y: rng.gen_range(0..480),
                    p: rng.gen_range(0..2),
                })
                .collect();
            events.sort_by_key(|e| e.t);
            let duration = events.last().map_or(0, |e| e.t);
            let s = EventStream::new(640, 480, events, duration, None).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("s.eeva");
            write_stream(&s, &path).unwrap();
            let back = read_stream(&path).unwrap();
            prop_assert!(!back.resorted);
            prop_assert_eq!(back.stream, s);
        }
    }

    #[test]
    fn generator_is_deterministic() {
        for p in Pattern::ALL {
            let a = generate_synthetic(p, (32, 32), 200_000, 5000.0, 9).unwrap();
            let b = generate_synthetic(p, (32, 32), 200_000, 5000.0, 9).unwrap();
            assert_eq!(a, b);
            a.validate().unwrap();
        }
    }

    #[test]
    fn left_bar_is_mirror_of_right_bar() {
        for seed in 0..5 {
            let left = generate_synthetic(Pattern::BarLeft, (40, 30), 300_000, 8000.0, seed).unwrap();
            let right =
                generate_synthetic(Pattern::BarRight, (40, 30), 300_000, 8000.0, seed).unwrap();
            let a: HashSet<Event> = left.events.into_iter().collect();
            let b: HashSet<Event> = right.hflip().events.into_iter().collect();
            assert_eq!(a, b);
            let ccw = generate_synthetic(Pattern::DotCcw, (40, 30), 300_000, 8000.0, seed).unwrap();
            let cw = generate_synthetic(Pattern::DotCw, (40, 30), 300_000, 8000.0, seed).unwrap();
            assert_eq!(ccw, cw.hflip());
        }
    }

    #[test]
    fn event_count_tracks_rate() {
        for seed in 0..20 {
            let s = generate_synthetic(Pattern::Noise, (32, 32), 1_000_000, 1000.0, seed).unwrap();
            let n = s.event_count() as f64;
            assert!((900.0..=1100.0).contains(&n), "seed {seed}: {n} events");
        }
    }

    #[test]
    fn generator_argument_errors() {
        assert!("spiral".parse::<Pattern>().is_err());
        assert_eq!("dot_cw".parse::<Pattern>().unwrap(), Pattern::DotCw);
        assert!(generate_synthetic(Pattern::Noise, (8, 8), 0, 10.0, 0).is_err());
        assert!(generate_synthetic(Pattern::Noise, (8, 8), 10, 0.0, 0).is_err());
    }
}
