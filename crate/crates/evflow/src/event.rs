//! Event representation, stream partitioning, and count images.
//!
//! A stream is cut into *input partitions* of `dt_input_us` each; `R`
//! consecutive input partitions form one *training window*. All warping and
//! loss math downstream runs in partition-index units τ ∈ [0, R], so flow is
//! expressed in px/partition throughout the crate.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Event polarity: the sign of the brightness change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    /// Decode the file representation (0 = negative, 1 = positive).
    pub fn from_bit(bit: u8) -> Result<Self> {
        match bit {
            0 => Ok(Polarity::Negative),
            1 => Ok(Polarity::Positive),
            other => Err(Error::Config(format!("polarity must be 0 or 1, got {other}"))),
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Polarity::Negative => 0,
            Polarity::Positive => 1,
        }
    }

    /// Channel index for two-channel images: negative = 0, positive = 1.
    #[inline]
    pub fn index(self) -> usize {
        self.bit() as usize
    }

    pub fn sign(self) -> f64 {
        match self {
            Polarity::Negative => -1.0,
            Polarity::Positive => 1.0,
        }
    }
}

/// A single camera event.
///
/// Raw events have integer pixel coordinates; the float fields exist so that
/// warped copies can live off-grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub t_us: u64,
    pub x: f32,
    pub y: f32,
    pub polarity: Polarity,
}

/// Sensor frame size in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CameraGeometry {
    pub width: u32,
    pub height: u32,
}

impl CameraGeometry {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::Config(format!(
                "camera geometry must be at least 2x2, got {width}x{height}"
            )));
        }
        Ok(CameraGeometry { width, height })
    }

    pub fn npixels(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// True when the (possibly fractional) point lies inside the frame,
    /// i.e. within [0, width-1] x [0, height-1].
    #[inline]
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64
    }

    /// True when (x, y) is an integer pixel within the frame.
    pub fn contains_pixel(&self, x: f32, y: f32) -> bool {
        x.fract() == 0.0
            && y.fract() == 0.0
            && x >= 0.0
            && y >= 0.0
            && x < self.width as f32
            && y < self.height as f32
    }
}

/// How a stream is cut into input partitions and training windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionScheme {
    /// Duration of one input partition, microseconds.
    pub dt_input_us: u64,
    /// Input partitions per training window.
    pub r: usize,
    /// Stream start time, microseconds.
    pub t0_us: u64,
}

impl PartitionScheme {
    pub fn new(dt_input_us: u64, r: usize, t0_us: u64) -> Result<Self> {
        if dt_input_us < 1 {
            return Err(Error::Config("dt_input_us must be at least 1".into()));
        }
        if r < 1 {
            return Err(Error::Config("R must be at least 1".into()));
        }
        Ok(PartitionScheme { dt_input_us, r, t0_us })
    }

    /// Training-window length in microseconds: dt_input_us x R.
    pub fn window_len_us(&self) -> u64 {
        self.dt_input_us * self.r as u64
    }

    pub fn window_begin_us(&self, window_index: usize) -> u64 {
        self.t0_us + window_index as u64 * self.window_len_us()
    }
}

/// One training window: R input partitions of time-sorted events.
#[derive(Clone, Debug)]
pub struct EventWindow {
    events: Vec<Event>,
    scheme: PartitionScheme,
    window_index: usize,
}

impl EventWindow {
    /// Wrap a sorted event slice belonging to window `window_index`.
    pub fn new(events: Vec<Event>, scheme: PartitionScheme, window_index: usize) -> Result<Self> {
        validate_sorted(&events)?;
        let begin = scheme.window_begin_us(window_index);
        let end = begin + scheme.window_len_us();
        for e in &events {
            if e.t_us < begin || e.t_us >= end {
                return Err(Error::OutsideWindow { t_us: e.t_us, begin_us: begin, end_us: end });
            }
        }
        Ok(EventWindow { events, scheme, window_index })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn scheme(&self) -> PartitionScheme {
        self.scheme
    }

    pub fn window_index(&self) -> usize {
        self.window_index
    }

    pub fn t_begin_us(&self) -> u64 {
        self.scheme.window_begin_us(self.window_index)
    }

    pub fn t_end_us(&self) -> u64 {
        self.t_begin_us() + self.scheme.window_len_us()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn duration_ms(&self) -> f64 {
        self.scheme.window_len_us() as f64 / 1e3
    }

    /// Event time in partition-index units: τ = (t_us − t_begin)/dt ∈ [0, R).
    pub fn normalized_time(&self, e: &Event) -> Result<f64> {
        let begin = self.t_begin_us();
        let end = self.t_end_us();
        if e.t_us < begin || e.t_us >= end {
            return Err(Error::OutsideWindow { t_us: e.t_us, begin_us: begin, end_us: end });
        }
        Ok((e.t_us - begin) as f64 / self.scheme.dt_input_us as f64)
    }

    /// Index of the input partition containing `e`, in [0, R).
    pub fn partition_of(&self, e: &Event) -> Result<usize> {
        let tau = self.normalized_time(e)?;
        Ok((tau as usize).min(self.scheme.r - 1))
    }
}

/// Result of cutting a stream into training windows.
#[derive(Clone, Debug)]
pub struct Partitioned {
    /// All windows of the tiling, in order; windows may be empty of events.
    pub windows: Vec<EventWindow>,
    /// Events outside the tiled span (before t0 or past the last full window).
    pub dropped_events: usize,
}

/// Cut a time-sorted stream into consecutive training windows of R input
/// partitions each.
///
/// The stream is considered to reach input partition ⌊(t_last − t0)/dt⌋; a
/// trailing window whose partitions are not all reached is incomplete and its
/// events are dropped (and counted), as are events before `t0_us`.
pub fn partition_stream(events: &[Event], scheme: PartitionScheme) -> Result<Partitioned> {
    validate_sorted(events)?;
    let first_inside = events.partition_point(|e| e.t_us < scheme.t0_us);
    let dropped_before = first_inside;
    let inside = &events[first_inside..];
    let Some(last) = inside.last() else {
        return Ok(Partitioned { windows: Vec::new(), dropped_events: dropped_before });
    };
    let partitions_reached = (last.t_us - scheme.t0_us) / scheme.dt_input_us + 1;
    let n_windows = (partitions_reached / scheme.r as u64) as usize;
    let span_end = scheme.window_begin_us(n_windows);
    let in_span = inside.partition_point(|e| e.t_us < span_end);
    let dropped_after = inside.len() - in_span;

    let mut windows = Vec::with_capacity(n_windows);
    let mut lo = 0usize;
    for w in 0..n_windows {
        let end = scheme.window_begin_us(w + 1);
        let hi = lo + inside[lo..in_span].partition_point(|e| e.t_us < end);
        windows.push(EventWindow::new(inside[lo..hi].to_vec(), scheme, w)?);
        lo = hi;
    }
    Ok(Partitioned { windows, dropped_events: dropped_before + dropped_after })
}

/// Two-channel per-pixel event counts (negative, positive).
#[derive(Clone, Debug, PartialEq)]
pub struct CountImage {
    pub neg: Array2<u32>,
    pub pos: Array2<u32>,
}

impl CountImage {
    pub fn total(&self) -> u64 {
        self.neg.iter().map(|&c| c as u64).sum::<u64>()
            + self.pos.iter().map(|&c| c as u64).sum::<u64>()
    }
}

/// Count raw (integer-pixel) events per pixel and polarity.
pub fn count_image(events: &[Event], geometry: CameraGeometry) -> Result<CountImage> {
    let shape = (geometry.height as usize, geometry.width as usize);
    let mut neg = Array2::zeros(shape);
    let mut pos = Array2::zeros(shape);
    for e in events {
        if !geometry.contains_pixel(e.x, e.y) {
            return Err(Error::EventOutOfFrame {
                x: e.x,
                y: e.y,
                width: geometry.width,
                height: geometry.height,
            });
        }
        let (yi, xi) = (e.y as usize, e.x as usize);
        match e.polarity {
            Polarity::Negative => neg[(yi, xi)] += 1,
            Polarity::Positive => pos[(yi, xi)] += 1,
        }
    }
    Ok(CountImage { neg, pos })
}

/// Reject streams that are not sorted by timestamp, naming the first inversion.
pub fn validate_sorted(events: &[Event]) -> Result<()> {
    for (i, pair) in events.windows(2).enumerate() {
        if pair[1].t_us < pair[0].t_us {
            return Err(Error::UnsortedEvents { index: i + 1 });
        }
    }
    Ok(())
}
