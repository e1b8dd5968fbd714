//! Dense optical-flow fields and their file formats.
//!
//! Flow file layout (little-endian): `"FLO1" | width u32 | height u32`,
//! then `H*W` pairs of `f32` `(u, v)` in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::formats;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FLO_MAGIC: &[u8; 4] = b"FLO1";

/// `[B,2,H,W]` flow: channel 0 is horizontal `u`, channel 1 vertical `v`,
/// both in pixels of the field's own grid per event window.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<S = f64>(Tensor<S>);

impl<S: Scalar> FlowField<S> {
    pub fn new(t: Tensor<S>) -> Result<Self> {
        let (_, c, _, _) = t.dims4("flow")?;
        if c != 2 {
            return Err(Error::dim("flow", format!("flow needs 2 channels, got {c}")));
        }
        if !t.all_finite() {
            return Err(Error::Numeric("flow field contains non-finite values".into()));
        }
        Ok(FlowField(t))
    }

    pub fn constant(batch: usize, height: usize, width: usize, u: S, v: S) -> Self {
        let hw = height * width;
        FlowField(Tensor::from_fn(&[batch, 2, height, width], |i| if (i / hw).is_multiple_of(2) { u } else { v }))
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    pub fn u(&self, b: usize, y: usize, x: usize) -> S {
        self.0.at4(b, 0, y, x)
    }

    pub fn v(&self, b: usize, y: usize, x: usize) -> S {
        self.0.at4(b, 1, y, x)
    }

    /// Batch entry `b` as a single-sample field.
    pub fn sample(&self, b: usize) -> Result<Self> {
        let t = self.0.index_outer(b)?;
        let shape = [1, 2, self.height(), self.width()];
        Ok(FlowField(t.reshape(&shape)?))
    }

    pub fn cast<T: Scalar>(&self) -> FlowField<T> {
        FlowField(self.0.cast())
    }
}

/// Serializes the first batch entry of a flow field.
pub fn encode_flow(flow: &FlowField<f64>) -> Vec<u8> {
    let (h, w) = (flow.height(), flow.width());
    let mut out = Vec::with_capacity(12 + 8 * h * w);
    out.extend_from_slice(FLO_MAGIC);
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    for y in 0..h {
        for x in 0..w {
            out.extend_from_slice(&(flow.u(0, y, x) as f32).to_le_bytes());
            out.extend_from_slice(&(flow.v(0, y, x) as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_flow(bytes: &[u8]) -> Result<FlowField<f64>> {
    if bytes.len() < 12 || &bytes[..4] != FLO_MAGIC {
        return Err(Error::format("flow file does not start with \"FLO1\""));
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if w == 0 || h == 0 {
        return Err(Error::format("flow file with zero dimension"));
    }
    let body = &bytes[12..];
    if body.len() != 8 * w * h {
        return Err(Error::format(format!("flow body is {} bytes, expected {}", body.len(), 8 * w * h)));
    }
    let mut t = Tensor::zeros(&[1, 2, h, w]);
    for (i, pair) in body.chunks_exact(8).enumerate() {
        let u = f32::from_le_bytes(pair[..4].try_into().expect("4 bytes"));
        let v = f32::from_le_bytes(pair[4..].try_into().expect("4 bytes"));
        t.set4(0, 0, i / w, i % w, u as f64);
        t.set4(0, 1, i / w, i % w, v as f64);
    }
    FlowField::new(t)
}

pub fn read_flow_file(path: impl AsRef<Path>) -> Result<FlowField<f64>> {
    decode_flow(&fs::read(path)?)
}

pub fn write_flow_file(path: impl AsRef<Path>, flow: &FlowField<f64>) -> Result<()> {
    fs::write(path, encode_flow(flow))?;
    Ok(())
}

/// Flow magnitude of the first batch entry as a PGM, scaled so that
/// `max_magnitude` maps to white.
pub fn magnitude_pgm(flow: &FlowField<f64>, max_magnitude: f64) -> Result<Vec<u8>> {
    let (h, w) = (flow.height(), flow.width());
    let scale = if max_magnitude > 0.0 { 1.0 / max_magnitude } else { 0.0 };
    let img = Tensor::from_fn(&[1, 1, h, w], |i| {
        let (y, x) = (i / w, i % w);
        flow.u(0, y, x).hypot(flow.v(0, y, x)) * scale
    });
    formats::encode_pgm(&img)
}

/// Direction-coded colour image: hue follows the flow angle, brightness
/// its magnitude relative to `max_magnitude`.
pub fn direction_ppm(flow: &FlowField<f64>, max_magnitude: f64) -> Result<Vec<u8>> {
    let (h, w) = (flow.height(), flow.width());
    let mut rgb = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (flow.u(0, y, x), flow.v(0, y, x));
            let mag = if max_magnitude > 0.0 { (u.hypot(v) / max_magnitude).min(1.0) } else { 0.0 };
            let hue = (v.atan2(u).to_degrees() + 360.0) % 360.0;
            rgb.push(hsv_to_rgb(hue, 1.0, mag));
        }
    }
    formats::encode_ppm(w, h, &rgb)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_layout() {
        let f = FlowField::<f64>::constant(2, 2, 3, 1.5, -0.5);
        assert_eq!(f.u(1, 1, 2), 1.5);
        assert_eq!(f.v(0, 0, 0), -0.5);
    }

    #[test]
    fn flow_file_round_trip() {
        let f = FlowField::new(Tensor::from_fn(&[1, 2, 3, 4], |i| i as f64 * 0.25 - 2.0)).unwrap();
        let bytes = encode_flow(&f);
        assert_eq!(bytes.len(), 12 + 8 * 12);
        let back = decode_flow(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(encode_flow(&back), bytes);
    }

    #[test]
    fn bad_flow_magic() {
        let mut bytes = encode_flow(&FlowField::constant(1, 1, 1, 0.0, 0.0));
        bytes[0] = b'X';
        assert!(matches!(decode_flow(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn visualizations_have_netpbm_headers() {
        let f = FlowField::constant(1, 2, 2, 1.0, 0.0);
        assert!(magnitude_pgm(&f, 1.0).unwrap().starts_with(b"P5\n2 2\n255\n"));
        let ppm = direction_ppm(&f, 1.0).unwrap();
        assert!(ppm.starts_with(b"P6\n2 2\n255\n"));
        // pure +u is hue 0: red
        assert_eq!(&ppm[ppm.len() - 3..], &[255, 0, 0]);
    }
}
