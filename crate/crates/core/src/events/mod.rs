//! Address-event streams: representation, binary file format, spike-frame
//! encoding and a simulated event camera.

mod aer;
mod encode;
mod synth;

pub use aer::{decode_events, encode_events, read_event_file, write_event_file, AER_MAGIC, RECORD_BYTES};
pub use encode::{encode_spike_input, SpikeInputSequence, CHANNELS};
pub use synth::{synthesize_events, SynthOutput, INTENSITY_FLOOR};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Direction of the brightness change that triggered an event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Polarity {
    On,
    Off,
}

impl Polarity {
    pub fn as_i8(self) -> i8 {
        match self {
            Polarity::On => 1,
            Polarity::Off => -1,
        }
    }

    pub fn from_i8(v: i8) -> Option<Self> {
        match v {
            1 => Some(Polarity::On),
            -1 => Some(Polarity::Off),
            _ => None,
        }
    }
}

/// One sensor event `{x, y, t, p}`; `t` is in microseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub t: u64,
    pub p: Polarity,
}

/// Time-sorted events of one sensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    width: u16,
    height: u16,
    events: Vec<Event>,
}

impl EventStream {
    /// Validates coordinates and time ordering.
    pub fn new(width: u16, height: u16, events: Vec<Event>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::contract("sensor dimensions must be positive"));
        }
        for (i, e) in events.iter().enumerate() {
            if e.x >= width || e.y >= height {
                return Err(Error::Data {
                    index: i as u64,
                    detail: format!("event at ({}, {}) outside {width}x{height} sensor", e.x, e.y),
                });
            }
            if i > 0 && e.t < events[i - 1].t {
                return Err(Error::Data {
                    index: i as u64,
                    detail: format!("timestamp {} precedes {}", e.t, events[i - 1].t),
                });
            }
        }
        Ok(EventStream { width, height, events })
    }

    pub fn empty(width: u16, height: u16) -> Result<Self> {
        Self::new(width, height, Vec::new())
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

    /// Events with `t_start <= t <= t_end`.
    pub fn in_window(&self, t_start: u64, t_end: u64) -> impl Iterator<Item = &Event> {
        let lo = self.events.partition_point(|e| e.t < t_start);
        let hi = self.events.partition_point(|e| e.t <= t_end);
        self.events[lo..hi.max(lo)].iter()
    }
}

/// Grayscale frames at the start and end of an event window, each
/// `[1,1,H,W]` with intensities in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImagePair<S = f64> {
    pub first: Tensor<S>,
    pub second: Tensor<S>,
    pub t_first: u64,
    pub t_second: u64,
}

impl<S: Scalar> GrayImagePair<S> {
    pub fn new(first: Tensor<S>, second: Tensor<S>, t_first: u64, t_second: u64) -> Result<Self> {
        let (b, c, _, _) = first.dims4("image_pair")?;
        if b != 1 || c != 1 {
            return Err(Error::dim("image_pair", format!("images must be [1,1,H,W], got {:?}", first.shape())));
        }
        first.expect_same_shape(&second, "image_pair")?;
        let in_range = |t: &Tensor<S>| t.data().iter().all(|&v| v >= S::zero() && v <= S::one());
        if !in_range(&first) || !in_range(&second) {
            return Err(Error::contract("image intensities must lie in [0, 1]"));
        }
        Ok(GrayImagePair { first, second, t_first, t_second })
    }

    pub fn height(&self) -> usize {
        self.first.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.first.shape()[3]
    }

    pub fn cast<T: Scalar>(&self) -> GrayImagePair<T> {
        GrayImagePair {
            first: self.first.cast(),
            second: self.second.cast(),
            t_first: self.t_first,
            t_second: self.t_second,
        }
    }
}
