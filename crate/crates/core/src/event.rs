//! Event-stream data model and voxel-grid construction.
//!
//! Events are accumulated into a `B x H x W` grid by splatting each event's
//! polarity over the two temporal bins nearest to its normalized timestamp.
//! Windows are half-open, `[t_start, t_end)`, so consecutive windows
//! partition a stream.

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of temporal bins.
pub const DEFAULT_BINS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Negative => -1.0,
            Polarity::Positive => 1.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::Negative => Polarity::Positive,
            Polarity::Positive => Polarity::Negative,
        }
    }

    /// Maps the `{0, 1}` file encoding onto `{-1, +1}`.
    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            0 => Some(Polarity::Negative),
            1 => Some(Polarity::Positive),
            _ => None,
        }
    }

    pub fn from_sign(sign: i8) -> Option<Self> {
        match sign {
            -1 => Some(Polarity::Negative),
            1 => Some(Polarity::Positive),
            _ => None,
        }
    }

    pub fn as_bit(self) -> u8 {
        match self {
            Polarity::Negative => 0,
            Polarity::Positive => 1,
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Polarity::Negative => -1,
            Polarity::Positive => 1,
        }
    }
}

/// A single brightness-change event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    /// Microseconds since the stream epoch.
    pub t: u64,
    /// Pixel column.
    pub x: u16,
    /// Pixel row.
    pub y: u16,
    pub polarity: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, polarity: Polarity) -> Self {
        Self { t, x, y, polarity }
    }
}

/// Events of one camera over a half-open time window.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    events: Vec<Event>,
    width: usize,
    height: usize,
    t_start: u64,
    t_end: u64,
}

impl EventStream {
    /// Builds a stream, checking ordering, bounds and window membership.
    pub fn new(
        events: Vec<Event>,
        width: usize,
        height: usize,
        t_start: u64,
        t_end: u64,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Parameter(format!(
                "sensor size must be positive, got {width}x{height}"
            )));
        }
        if t_end < t_start {
            return Err(Error::InvalidWindow(format!(
                "window end {t_end} precedes start {t_start}"
            )));
        }
        for (i, e) in events.iter().enumerate() {
            if e.x as usize >= width || e.y as usize >= height {
                return Err(Error::Stream(format!(
                    "event {i} at ({}, {}) outside {width}x{height} sensor",
                    e.x, e.y
                )));
            }
            if e.t < t_start || e.t >= t_end {
                return Err(Error::Stream(format!(
                    "event {i} at t={} outside window [{t_start}, {t_end})",
                    e.t
                )));
            }
            if i > 0 && events[i - 1].t > e.t {
                return Err(Error::Stream(format!(
                    "event {i} at t={} precedes event {} at t={}",
                    e.t,
                    i - 1,
                    events[i - 1].t
                )));
            }
        }
        Ok(Self {
            events,
            width,
            height,
            t_start,
            t_end,
        })
    }

    pub fn empty(width: usize, height: usize, t_start: u64, t_end: u64) -> Result<Self> {
        Self::new(Vec::new(), width, height, t_start, t_end)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn t_start(&self) -> u64 {
        self.t_start
    }

    pub fn t_end(&self) -> u64 {
        self.t_end
    }

    pub fn duration(&self) -> u64 {
        self.t_end - self.t_start
    }

    /// Same window and sensor, different events. Events are re-validated.
    pub fn with_events(&self, events: Vec<Event>) -> Result<Self> {
        Self::new(events, self.width, self.height, self.t_start, self.t_end)
    }

    /// Copy of the stream with every polarity inverted.
    pub fn reversed_polarity(&self) -> Self {
        let mut out = self.clone();
        for e in &mut out.events {
            e.polarity = e.polarity.flipped();
        }
        out
    }
}

/// Discretized event tensor, `bins x height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub data: Array3<f64>,
    /// Downsample factor relative to the sensor, 1 at full resolution.
    pub scale: usize,
}

impl VoxelGrid {
    pub fn zeros(bins: usize, height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((bins, height, width)),
            scale: 1,
        }
    }

    pub fn bins(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }
}

/// Temporal bilinear splat of a stream into `bins` bins.
pub fn voxelize(stream: &EventStream, bins: usize) -> Result<VoxelGrid> {
    if bins == 0 {
        return Err(Error::Parameter("voxel grid needs at least one bin".into()));
    }
    let duration = stream.duration();
    if duration == 0 && bins > 1 {
        return Err(Error::InvalidWindow(
            "zero-duration window cannot be split into temporal bins".into(),
        ));
    }
    let mut grid = VoxelGrid::zeros(bins, stream.height(), stream.width());
    let span = (bins - 1) as f64;
    for e in stream.events() {
        let (x, y) = (e.x as usize, e.y as usize);
        let sign = e.polarity.sign();
        if bins == 1 {
            grid.data[[0, y, x]] += sign;
            continue;
        }
        let t_norm = (e.t - stream.t_start()) as f64 / duration as f64 * span;
        let lower = t_norm.floor();
        let frac = t_norm - lower;
        let b0 = lower as usize;
        grid.data[[b0, y, x]] += sign * (1.0 - frac);
        if frac > 0.0 && b0 + 1 < bins {
            grid.data[[b0 + 1, y, x]] += sign * frac;
        }
    }
    Ok(grid)
}

/// Block-average pooling of every bin by `factor`.
pub fn downsample_grid(grid: &VoxelGrid, factor: usize) -> Result<VoxelGrid> {
    let data = block_mean3(&grid.data, factor)?;
    Ok(VoxelGrid {
        data,
        scale: grid.scale * factor,
    })
}

/// Mean over non-overlapping `factor x factor` blocks of each plane.
pub(crate) fn block_mean3(data: &Array3<f64>, factor: usize) -> Result<Array3<f64>> {
    let (planes, h, w) = data.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Dimension(format!(
            "downsample factor {factor} does not divide {h}x{w}"
        )));
    }
    if factor == 1 {
        return Ok(data.clone());
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = Array3::zeros((planes, oh, ow));
    for (src, mut dst) in data.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        for oy in 0..oh {
            for ox in 0..ow {
                let block = src.slice(ndarray::s![
                    oy * factor..(oy + 1) * factor,
                    ox * factor..(ox + 1) * factor
                ]);
                dst[[oy, ox]] = block.sum() * norm;
            }
        }
    }
    Ok(out)
}
