//! Event streams, their file formats, voxelization and a frame-pair simulator.

mod io;
mod simulate;
mod voxel;

pub use io::{decode_csv, decode_evst, encode_evst, read_events, write_events, LoadedEvents, EVST_MAGIC};
pub use simulate::{simulate_events, SIM_LOG_EPS};
pub use voxel::{transform_grid, voxelize, VoxelGrid, DEFAULT_BINS};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    /// Microseconds.
    pub t: u64,
    pub x: u16,
    pub y: u16,
    /// `+1` or `-1`.
    pub p: i8,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, p: i8) -> Self {
        Self { t, x, y, p }
    }
}

/// Time-ordered events from a `width × height` sensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    width: u16,
    height: u16,
    events: Vec<Event>,
}

impl EventStream {
    /// Validates bounds, polarity and time order.
    pub fn new(width: u16, height: u16, events: Vec<Event>) -> Result<Self> {
        Self::check(width, height, &events)?;
        if let Some(i) = events.windows(2).position(|w| w[1].t < w[0].t) {
            return Err(Error::invalid(format!("event {} is earlier than its predecessor", i + 1)));
        }
        Ok(Self { width, height, events })
    }

    /// Like [`EventStream::new`] but stably sorts by time; the flag reports whether sorting changed anything.
    pub fn from_unsorted(width: u16, height: u16, mut events: Vec<Event>) -> Result<(Self, bool)> {
        Self::check(width, height, &events)?;
        let sorted = events.windows(2).all(|w| w[0].t <= w[1].t);
        if !sorted {
            events.sort_by_key(|e| e.t);
        }
        Ok((Self { width, height, events }, !sorted))
    }

    pub fn empty(width: u16, height: u16) -> Self {
        Self {
            width,
            height,
            events: Vec::new(),
        }
    }

    fn check(width: u16, height: u16, events: &[Event]) -> Result<()> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("sensor extent must be positive"));
        }
        for (i, e) in events.iter().enumerate() {
            if e.x >= width || e.y >= height {
                return Err(Error::invalid(format!(
                    "event {i} at ({}, {}) outside {width}x{height} sensor",
                    e.x, e.y
                )));
            }
            if e.p != 1 && e.p != -1 {
                return Err(Error::invalid(format!("event {i} has polarity {}", e.p)));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn polarity_sum(&self) -> i64 {
        self.events.iter().map(|e| e.p as i64).sum()
    }
}
