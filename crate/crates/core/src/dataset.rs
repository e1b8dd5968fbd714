//! Training and evaluation samples, on disk and synthetic.
//!
//! A dataset directory holds one subdirectory per sample (visited in name
//! order) with `events.aer`, `frame0.pgm`, `frame1.pgm`, `meta.txt` and
//! optionally `flow.flo`. `meta.txt` holds `t_start = <us>` and
//! `t_end = <us>`, the window the events are encoded over.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::events::{
    encode_spike_input, read_event_file, synthesize_events, write_event_file, EventStream, GrayImagePair,
};
use crate::flow::{read_flow_file, write_flow_file, FlowField};
use crate::formats::{read_pgm, write_pgm};
use crate::tensor::Tensor;

/// Ground-truth values at or beyond this magnitude mark unknown flow.
pub const UNKNOWN_FLOW: f64 = 1e9;

#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    pub events: EventStream,
    pub images: GrayImagePair,
    pub flow: Option<FlowField>,
    pub window: (u64, u64),
}

/// A sample encoded for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    /// One `[1,4,H,W]` binary frame per time-step.
    pub steps: Vec<Tensor<f64>>,
    pub first: Tensor<f64>,
    pub second: Tensor<f64>,
    /// `[1,2,H,W]`; unknown where no ground truth exists.
    pub flow: Option<Tensor<f64>>,
}

impl Prepared {
    pub fn height(&self) -> usize {
        self.first.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.first.shape()[3]
    }

    /// Pixels with at least one event in any frame or channel.
    pub fn event_mask(&self) -> Vec<bool> {
        let (h, w) = (self.height(), self.width());
        let mut mask = vec![false; h * w];
        for s in &self.steps {
            for (i, &v) in s.data().iter().enumerate() {
                if v != 0.0 {
                    mask[i % (h * w)] = true;
                }
            }
        }
        mask
    }
}

impl Sample {
    pub fn prepare(&self, n_frames: usize) -> Result<Prepared> {
        let seq = encode_spike_input::<f64>(&self.events, self.window, n_frames)?;
        if (seq.height(), seq.width()) != (self.images.height(), self.images.width()) {
            return Err(Error::dim(
                "prepare",
                format!(
                    "sample `{}`: events are {}x{}, images {}x{}",
                    self.name,
                    seq.height(),
                    seq.width(),
                    self.images.height(),
                    self.images.width()
                ),
            ));
        }
        let steps = (0..n_frames).map(|n| seq.step(n)).collect::<Result<Vec<_>>>()?;
        Ok(Prepared {
            steps,
            first: self.images.first.clone(),
            second: self.images.second.clone(),
            flow: self.flow.as_ref().map(|f| f.tensor().clone()),
        })
    }
}

fn parse_meta(text: &str) -> Result<(u64, u64)> {
    let mut start = None;
    let mut end = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) =
            line.split_once('=').ok_or_else(|| Error::format(format!("meta line `{line}` is not key = value")))?;
        let v: u64 =
            v.trim().parse().map_err(|_| Error::format(format!("meta value `{}` is not an integer", v.trim())))?;
        match k.trim() {
            "t_start" => start = Some(v),
            "t_end" => end = Some(v),
            other => return Err(Error::format(format!("unknown meta key `{other}`"))),
        }
    }
    match (start, end) {
        (Some(s), Some(e)) if s < e => Ok((s, e)),
        (Some(_), Some(_)) => Err(Error::format("meta window is empty")),
        _ => Err(Error::format("meta needs t_start and t_end")),
    }
}

pub fn load_sample(dir: &Path) -> Result<Sample> {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let window = parse_meta(&fs::read_to_string(dir.join("meta.txt"))?)?;
    let events = read_event_file(dir.join("events.aer"))?;
    let images =
        GrayImagePair::new(read_pgm(dir.join("frame0.pgm"))?, read_pgm(dir.join("frame1.pgm"))?, window.0, window.1)?;
    let flow_path = dir.join("flow.flo");
    let flow = if flow_path.exists() { Some(read_flow_file(flow_path)?) } else { None };
    Ok(Sample { name, events, images, flow, window })
}

/// Loads every sample subdirectory of `dir`, sorted by name.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let mut subdirs = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            subdirs.push(entry.path());
        }
    }
    subdirs.sort();
    subdirs.iter().map(|d| load_sample(d)).collect()
}

pub fn write_sample(dir: impl AsRef<Path>, sample: &Sample) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_event_file(dir.join("events.aer"), &sample.events)?;
    write_pgm(dir.join("frame0.pgm"), &sample.images.first)?;
    write_pgm(dir.join("frame1.pgm"), &sample.images.second)?;
    fs::write(dir.join("meta.txt"), format!("t_start = {}\nt_end = {}\n", sample.window.0, sample.window.1))?;
    if let Some(f) = &sample.flow {
        write_flow_file(dir.join("flow.flo"), f)?;
    }
    Ok(())
}

/// Smooth random texture in `[0.1, 0.9]`: a contrast-stretched sum of
/// `waves` plane sinusoids with periods between 8 and 24 pixels.
pub fn random_texture(height: usize, width: usize, waves: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let params: Vec<(f64, f64, f64, f64)> = (0..waves.max(1))
        .map(|_| {
            let period = rng.random_range(8.0..24.0);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let k = std::f64::consts::TAU / period;
            (k * angle.cos(), k * angle.sin(), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.5..1.0))
        })
        .collect();
    let norm = params.iter().map(|p| p.3 * p.3).sum::<f64>().sqrt();
    Tensor::from_fn(&[1, 1, height, width], |i| {
        let (y, x) = ((i / width) as f64, (i % width) as f64);
        let s: f64 = params.iter().map(|&(kx, ky, ph, a)| a * (kx * x + ky * y + ph).sin()).sum();
        0.5 + 0.4 * (2.0 * s / norm).tanh()
    })
}

/// Parameters of a translating-texture dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    /// Flow components are drawn so that the magnitude stays at or below
    /// this many pixels.
    pub max_flow: f64,
    pub threshold: f64,
    pub substeps: usize,
    pub window_us: u64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            samples: 8,
            height: 64,
            width: 64,
            max_flow: 3.0,
            threshold: 0.15,
            substeps: 20,
            window_us: 10_000,
            seed: 0,
        }
    }
}

/// Textures with uniformly random direction and magnitude of motion.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let texture = random_texture(spec.height, spec.width, 4, &mut rng);
        let mag = rng.random_range(0.25 * spec.max_flow..=spec.max_flow);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let flow = (mag * angle.cos(), mag * angle.sin());
        let window = (0, spec.window_us);
        let s = synthesize_events(&texture, flow, window, spec.threshold, spec.substeps)?;
        out.push(Sample {
            name: format!("sample{i:04}"),
            events: s.events,
            images: s.images,
            flow: Some(s.flow),
            window,
        });
    }
    Ok(out)
}
