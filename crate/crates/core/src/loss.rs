//! Self-supervised flow objective: Charbonnier photometric loss on the
//! inversely warped second image plus an L1 smoothness penalty, summed over
//! every predicted scale.

use crate::error::{Error, Result};
use crate::events::GrayImagePair;
use crate::flow::FlowField;
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub r: f64,
    pub eta: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { r: 0.45, eta: 1e-3, lambda: 10.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.r <= 1.0) {
            return Err(Error::Config { key: "r".into(), detail: format!("{} is outside (0, 1]", self.r) });
        }
        if !(self.eta > 0.0) {
            return Err(Error::Config { key: "eta".into(), detail: "must be positive".into() });
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config { key: "lambda".into(), detail: "must be non-negative".into() });
        }
        Ok(())
    }
}

/// Elementwise `(x^2 + eta^2)^r`.
pub fn charbonnier<S: Scalar>(x: &Tensor<S>, r: f64, eta: f64) -> Tensor<S> {
    let (r, e2) = (S::lit(r), S::lit(eta * eta));
    x.map(|t| (t * t + e2).powf(r))
}

/// Pixel-centre coordinates `x` (or `y` when `rows`) for a `[B,H,W]` grid.
fn grid<S: Scalar>(b: usize, h: usize, w: usize, rows: bool) -> Tensor<S> {
    Tensor::from_fn(&[b, h, w], |i| {
        let (y, x) = ((i / w) % h, i % w);
        S::lit(if rows { y } else { x } as f64)
    })
}

/// Records the photometric term for `flow` (`[B,2,H,W]`) against image
/// tensors `first` and `second` (`[B,1,H,W]`).
pub fn photometric_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    flow: Var,
    first: &Tensor<S>,
    second: &Tensor<S>,
    cfg: &LossConfig,
) -> Result<Var> {
    let (b, c, h, w) = tape.value(flow).dims4("photometric_loss")?;
    if c != 2 {
        return Err(Error::dim("photometric_loss", format!("flow has {c} channels")));
    }
    for img in [first, second] {
        if img.shape() != [b, 1, h, w] {
            return Err(Error::dim(
                "photometric_loss",
                format!("image {:?} does not match flow {:?}", img.shape(), tape.value(flow).shape()),
            ));
        }
    }
    let u = tape.channel(flow, 0)?;
    let u = tape.reshape(u, &[b, h, w])?;
    let cx = tape.add_const(u, &grid(b, h, w, false))?;
    let v = tape.channel(flow, 1)?;
    let v = tape.reshape(v, &[b, h, w])?;
    let cy = tape.add_const(v, &grid(b, h, w, true))?;
    let img = tape.constant(second.clone());
    let warped = tape.bilinear_sample(img, cx, cy)?;
    let neg = tape.scale(warped, -S::one())?;
    let residual = tape.add_const(neg, first)?;
    let pen = tape.charbonnier(residual, S::lit(cfg.r), S::lit(cfg.eta))?;
    tape.sum(pen)
}

/// Records the smoothness term: absolute 4-neighbour differences of both
/// flow components, summed and divided by `H * W`.
pub fn smoothness_on_tape<S: Scalar>(tape: &mut Tape<S>, flow: Var) -> Result<Var> {
    let (_, _, h, w) = tape.value(flow).dims4("smoothness_loss")?;
    if h < 2 || w < 2 {
        return Err(Error::contract(format!("smoothness needs at least 2x2 pixels, got {h}x{w}")));
    }
    let mut total = None;
    for axis in [2, 3] {
        let d = tape.neighbor_diff(flow, axis)?;
        let a = tape.abs(d)?;
        let s = tape.sum(a)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let total = total.expect("two axes");
    tape.scale(total, S::one() / S::lit((h * w) as f64))
}

/// Loss terms recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub photometric: Var,
    /// `None` when the smoothness weight is zero.
    pub smoothness: Option<Var>,
}

/// Images average-pooled down to `h x w`.
fn pooled<S: Scalar>(img: &Tensor<S>, h: usize, w: usize) -> Result<Tensor<S>> {
    let mut out = img.clone();
    loop {
        let (_, _, ih, iw) = out.dims4("total_loss")?;
        if (ih, iw) == (h, w) {
            return Ok(out);
        }
        if ih < 2 * h || iw < 2 * w || ih % 2 != 0 || iw % 2 != 0 {
            return Err(Error::dim(
                "total_loss",
                format!("images {:?} cannot be pooled to flow resolution {h}x{w}", img.shape()),
            ));
        }
        out = ops::avg_pool2(&out)?;
    }
}

/// Records the multi-scale objective over `flows` (any order).
pub fn total_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    flows: &[Var],
    first: &Tensor<S>,
    second: &Tensor<S>,
    cfg: &LossConfig,
) -> Result<LossVars> {
    cfg.validate()?;
    if flows.is_empty() {
        return Err(Error::contract("total_loss needs at least one flow"));
    }
    let mut photo: Option<Var> = None;
    let mut smooth: Option<Var> = None;
    for &f in flows {
        let (_, _, h, w) = tape.value(f).dims4("total_loss")?;
        let p = photometric_on_tape(tape, f, &pooled(first, h, w)?, &pooled(second, h, w)?, cfg)?;
        photo = Some(match photo {
            Some(acc) => tape.add(acc, p)?,
            None => p,
        });
        if cfg.lambda != 0.0 {
            let s = smoothness_on_tape(tape, f)?;
            smooth = Some(match smooth {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
    }
    let photometric = photo.expect("nonempty");
    let total = match smooth {
        Some(s) => {
            let weighted = tape.scale(s, S::lit(cfg.lambda))?;
            tape.add(photometric, weighted)?
        }
        None => photometric,
    };
    Ok(LossVars { total, photometric, smoothness: smooth })
}

/// Photometric loss of a flow against an image pair.
pub fn photometric_loss<S: Scalar>(flow: &FlowField<S>, images: &GrayImagePair<S>, cfg: &LossConfig) -> Result<S> {
    let mut tape = Tape::new();
    let f = tape.constant(flow.tensor().clone());
    let l = photometric_on_tape(&mut tape, f, &images.first, &images.second, cfg)?;
    Ok(tape.value(l).item())
}

pub fn smoothness_loss<S: Scalar>(flow: &FlowField<S>) -> Result<S> {
    let mut tape = Tape::new();
    let f = tape.constant(flow.tensor().clone());
    let l = smoothness_on_tape(&mut tape, f)?;
    Ok(tape.value(l).item())
}

/// Multi-scale total loss; images are pooled to each flow's resolution.
pub fn total_loss<S: Scalar>(flows: &[FlowField<S>], images: &GrayImagePair<S>, cfg: &LossConfig) -> Result<S> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = flows.iter().map(|f| tape.constant(f.tensor().clone())).collect();
    let l = total_on_tape(&mut tape, &vars, &images.first, &images.second, cfg)?;
    Ok(tape.value(l.total).item())
}
