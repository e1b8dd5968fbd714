use super::{EventStream, Polarity};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Channel order of every encoded frame.
pub const CHANNELS: [&str; 4] = ["former-on", "former-off", "latter-on", "latter-off"];

/// `N` binary four-channel event frames covering one window.
///
/// Frame `i` carries the ON/OFF presence maps of sub-interval `i` of the
/// window's first half (channels 0-1) and of sub-interval `i` of its second
/// half (channels 2-3).
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeInputSequence<S = f64> {
    frames: Tensor<S>,
    window: (u64, u64),
}

impl<S: Scalar> SpikeInputSequence<S> {
    /// Wraps an `[N,4,H,W]` tensor of zeros and ones.
    pub fn from_frames(frames: Tensor<S>, window: (u64, u64)) -> Result<Self> {
        let (_, c, _, _) = frames.dims4("spike_input")?;
        if c != 4 {
            return Err(Error::dim("spike_input", format!("expected 4 channels, got {c}")));
        }
        if frames.data().iter().any(|&v| v != S::zero() && v != S::one()) {
            return Err(Error::contract("spike input frames must be binary"));
        }
        Ok(SpikeInputSequence { frames, window })
    }

    pub fn frames(&self) -> &Tensor<S> {
        &self.frames
    }

    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    pub fn window(&self) -> (u64, u64) {
        self.window
    }

    /// Frame `n` as a `[1,4,H,W]` tensor.
    pub fn step(&self, n: usize) -> Result<Tensor<S>> {
        let f = self.frames.index_outer(n)?;
        let shape = [1, 4, self.height(), self.width()];
        f.reshape(&shape)
    }

    /// Stacks frame `n` of every sequence into a `[B,4,H,W]` batch.
    pub fn batch_step(seqs: &[Self], n: usize) -> Result<Tensor<S>> {
        let steps = seqs.iter().map(|s| s.step(n)).collect::<Result<Vec<_>>>()?;
        Tensor::concat_batch(&steps.iter().collect::<Vec<_>>())
    }

    /// Pixels with at least one event in any frame or channel, `[H,W]`.
    pub fn event_mask(&self) -> Vec<bool> {
        let (n, _, h, w) = (self.n_frames(), 4, self.height(), self.width());
        let mut mask = vec![false; h * w];
        for f in 0..n {
            for c in 0..4 {
                let base = (f * 4 + c) * h * w;
                for (m, v) in mask.iter_mut().zip(&self.frames.data()[base..base + h * w]) {
                    *m |= !v.is_zero();
                }
            }
        }
        mask
    }

    pub fn cast<T: Scalar>(&self) -> SpikeInputSequence<T> {
        SpikeInputSequence { frames: self.frames.cast(), window: self.window }
    }

    /// Applies the same spatial transform to every frame.
    pub fn map_frames(&self, frames: Tensor<S>) -> Result<Self> {
        Self::from_frames(frames, self.window)
    }
}

/// Encodes the events of `window` into `n_frames` presence frames per half.
///
/// The window is cut into `2 * n_frames` equal sub-intervals. An event on a
/// sub-interval boundary belongs to the later one, except an event exactly
/// at `t_end`, which closes the last sub-interval. Events outside the window
/// are ignored.
pub fn encode_spike_input<S: Scalar>(
    stream: &EventStream,
    window: (u64, u64),
    n_frames: usize,
) -> Result<SpikeInputSequence<S>> {
    let (t0, t1) = window;
    if t0 >= t1 {
        return Err(Error::contract(format!("empty window [{t0}, {t1}]")));
    }
    if n_frames == 0 {
        return Err(Error::contract("n_frames must be at least 1"));
    }
    let (h, w) = (stream.height() as usize, stream.width() as usize);
    let slots = 2 * n_frames as u128;
    let span = (t1 - t0) as u128;
    let mut frames = Tensor::zeros(&[n_frames, 4, h, w]);
    for e in stream.in_window(t0, t1) {
        let slot = (((e.t - t0) as u128 * slots) / span).min(slots - 1) as usize;
        let (frame, half) = (slot % n_frames, slot / n_frames);
        let channel = 2 * half + usize::from(e.p == Polarity::Off);
        frames.set4(frame, channel, e.y as usize, e.x as usize, S::one());
    }
    Ok(SpikeInputSequence { frames, window })
}
