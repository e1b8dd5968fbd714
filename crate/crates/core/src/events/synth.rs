//! Simulated event camera: a texture translated at constant velocity, with
//! per-pixel log-intensity change detection.

use super::{Event, EventStream, GrayImagePair, Polarity};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::ops;
use crate::tensor::Tensor;

/// Intensities are floored here before taking logarithms.
pub const INTENSITY_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub events: EventStream,
    pub images: GrayImagePair,
    /// Constant ground-truth flow, `[1,2,H,W]`.
    pub flow: FlowField,
}

/// Frame of `texture` displaced by `(dx, dy)`: `I(x, y) = T(x - dx, y - dy)`.
fn translated(texture: &Tensor<f64>, dx: f64, dy: f64) -> Result<Tensor<f64>> {
    let (_, _, h, w) = texture.dims4("synthesize_events")?;
    let cx = Tensor::from_fn(&[1, h, w], |i| (i % w) as f64 - dx);
    let cy = Tensor::from_fn(&[1, h, w], |i| (i / w) as f64 - dy);
    ops::bilinear_sample(texture, &cx, &cy)
}

/// Moves `texture` (`[1,1,H,W]`, values in `[0,1]`) by `flow` pixels over
/// `window`, split into `timesteps` equal sub-steps.
///
/// Each pixel keeps a reference log intensity. After every sub-step, while
/// the current log intensity differs from the reference by at least
/// `threshold`, one event of the sign of the difference is emitted at the
/// sub-step's timestamp and the reference moves by `threshold` towards the
/// current value; the remainder carries into later sub-steps.
pub fn synthesize_events(
    texture: &Tensor<f64>,
    flow: (f64, f64),
    window: (u64, u64),
    threshold: f64,
    timesteps: usize,
) -> Result<SynthOutput> {
    let (b, c, h, w) = texture.dims4("synthesize_events")?;
    if b != 1 || c != 1 {
        return Err(Error::contract(format!("texture must be [1,1,H,W], got {:?}", texture.shape())));
    }
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::contract("texture exceeds the 16-bit sensor address range"));
    }
    if !(threshold > 0.0) {
        return Err(Error::contract(format!("threshold must be positive, got {threshold}")));
    }
    if timesteps == 0 {
        return Err(Error::contract("timesteps must be at least 1"));
    }
    let (t0, t1) = window;
    if t0 >= t1 {
        return Err(Error::contract(format!("empty window [{t0}, {t1}]")));
    }
    if !flow.0.is_finite() || !flow.1.is_finite() {
        return Err(Error::contract("flow must be finite"));
    }
    if texture.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::contract("texture intensities must lie in [0, 1]"));
    }

    let log = |v: f64| v.max(INTENSITY_FLOOR).ln();
    let mut reference: Vec<f64> = texture.data().iter().map(|&v| log(v)).collect();
    let mut events = Vec::new();
    let mut last = texture.clone();
    for k in 1..=timesteps {
        let frac = k as f64 / timesteps as f64;
        let frame = translated(texture, flow.0 * frac, flow.1 * frac)?;
        let t = t0 + ((t1 - t0) as u128 * k as u128 / timesteps as u128) as u64;
        for (i, (r, &v)) in reference.iter_mut().zip(frame.data()).enumerate() {
            let current = log(v);
            while (current - *r).abs() >= threshold {
                let p = if current > *r { Polarity::On } else { Polarity::Off };
                *r += if p == Polarity::On { threshold } else { -threshold };
                events.push(Event { x: (i % w) as u16, y: (i / w) as u16, t, p });
            }
        }
        last = frame;
    }
    Ok(SynthOutput {
        events: EventStream::new(w as u16, h as u16, events)?,
        images: GrayImagePair::new(texture.clone(), last, t0, t1)?,
        flow: FlowField::constant(1, h, w, flow.0, flow.1),
    })
}
