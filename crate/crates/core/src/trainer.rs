//! Self-supervised training loop.
//!
//! One iteration encodes a batch, runs the hybrid forward pass over all
//! time-steps, evaluates the multi-scale loss once, back-propagates through
//! the analog block on the tape and then through the spiking block by
//! BPTT, and applies one Adam step.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ann::{hybrid_forward, init_params, HybridVariant, NetworkConfig};
use crate::checkpoint::{self, write_checkpoint};
use crate::dataset::{Prepared, Sample};
use crate::error::{Error, Result};
use crate::loss::{total_on_tape, LossConfig};
use crate::optim::{adam_step, lr_schedule, OptimizerState};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DtMode {
    Dt1,
    Dt4,
}

impl DtMode {
    /// `(n_frames, lambda, threshold)` defaults.
    pub fn defaults(self) -> (usize, f64, f64) {
        match self {
            DtMode::Dt1 => (5, 10.0, 0.75),
            DtMode::Dt4 => (20, 1.0, 0.5),
        }
    }
}

impl fmt::Display for DtMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DtMode::Dt1 => "dt1",
            DtMode::Dt4 => "dt4",
        })
    }
}

impl FromStr for DtMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dt1" => Ok(DtMode::Dt1),
            "dt4" => Ok(DtMode::Dt4),
            other => {
                Err(Error::Config { key: "dt_mode".into(), detail: format!("expected dt1 or dt4, got `{other}`") })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// Decay by 0.7 at epochs 5, 10, 20, 30, ...
    Step,
    Constant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dt_mode: DtMode,
    pub n_frames: usize,
    pub lambda: f64,
    pub threshold: f64,
    pub lr: f64,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many iterations in total, if set.
    pub max_iterations: Option<usize>,
    pub seed: u64,
    /// Side of the square random crop; `None` keeps the full image.
    pub crop_size: Option<usize>,
    pub flip_probability: f64,
    pub base_width: usize,
    pub variant: HybridVariant,
    pub flow_head_kernel: usize,
    pub leaky_slope: f64,
    pub snn_bias: bool,
    pub snn_init_gain: f64,
    pub strict: bool,
}

impl TrainConfig {
    pub fn for_mode(dt_mode: DtMode) -> Self {
        let (n_frames, lambda, threshold) = dt_mode.defaults();
        let net = NetworkConfig::default();
        TrainConfig {
            dt_mode,
            n_frames,
            lambda,
            threshold,
            lr: 5e-5,
            schedule: Schedule::Step,
            batch_size: 8,
            epochs: 30,
            max_iterations: None,
            seed: 0,
            crop_size: None,
            flip_probability: 0.5,
            base_width: net.base_width,
            variant: net.variant,
            flow_head_kernel: net.flow_head_kernel,
            leaky_slope: net.leaky_slope,
            snn_bias: net.snn_bias,
            snn_init_gain: net.snn_init_gain,
            strict: true,
        }
    }

    /// Desk-scale defaults: base width 4, batch 2.
    pub fn desk(dt_mode: DtMode) -> Self {
        TrainConfig { base_width: 4, batch_size: 2, ..Self::for_mode(dt_mode) }
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            base_width: self.base_width,
            flow_head_kernel: self.flow_head_kernel,
            variant: self.variant,
            leaky_slope: self.leaky_slope,
            threshold: self.threshold,
            snn_bias: self.snn_bias,
            snn_init_gain: self.snn_init_gain,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { lambda: self.lambda, ..LossConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: &str| Err(Error::Config { key: key.into(), detail: detail.into() });
        if self.n_frames == 0 {
            return bad("n_frames", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.lr > 0.0) {
            return bad("lr", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return bad("flip_probability", "must lie in [0, 1]");
        }
        if let Some(c) = self.crop_size {
            if c == 0 || c % 16 != 0 {
                return bad("crop_size", "must be a positive multiple of 16");
            }
        }
        self.network().validate()?;
        self.loss().validate()
    }

    /// Parses `key = value` lines. `dt_mode` sets the defaults for
    /// `n_frames`, `lambda` and `threshold` wherever it appears; other keys
    /// override them.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.to_string(),
                detail: format!("line {} is not `key = value`", lineno + 1),
            })?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mode = match entries.iter().rev().find(|(k, _)| k == "dt_mode") {
            Some((_, v)) => v.parse()?,
            None => DtMode::Dt1,
        };
        let mut cfg = TrainConfig::desk(mode);
        for (k, v) in &entries {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config { key: key.into(), detail: format!("cannot parse `{v}`") })
        }
        match key {
            "dt_mode" => self.dt_mode = value.parse()?,
            "n_frames" => self.n_frames = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "threshold" => self.threshold = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "schedule" => {
                self.schedule = match value {
                    "step" => Schedule::Step,
                    "constant" => Schedule::Constant,
                    _ => {
                        return Err(Error::Config {
                            key: key.into(),
                            detail: format!("expected step or constant, got `{value}`"),
                        })
                    }
                }
            }
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "max_iterations" => self.max_iterations = Some(num(key, value)?),
            "seed" => self.seed = num(key, value)?,
            "crop_size" => self.crop_size = Some(num(key, value)?),
            "flip_probability" => self.flip_probability = num(key, value)?,
            "base_width" => self.base_width = num(key, value)?,
            "hybrid_variant" => self.variant = value.parse()?,
            "flow_head_kernel" => self.flow_head_kernel = num(key, value)?,
            "leaky_slope" => self.leaky_slope = num(key, value)?,
            "snn_bias" => self.snn_bias = num(key, value)?,
            "snn_init_gain" => self.snn_init_gain = num(key, value)?,
            "strict" => self.strict = num(key, value)?,
            other => return Err(Error::Config { key: other.into(), detail: "unknown key".into() }),
        }
        Ok(())
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Step => lr_schedule(self.lr, epoch),
            Schedule::Constant => self.lr,
        }
    }
}

fn flip_last_axis(t: &Tensor<f64>) -> Tensor<f64> {
    let w = *t.shape().last().expect("rank >= 1");
    let src = t.data();
    Tensor::new(t.shape().to_vec(), (0..t.len()).map(|i| src[i - i % w + (w - 1 - i % w)]).collect())
        .expect("same shape")
}

fn flip_rows(t: &Tensor<f64>) -> Tensor<f64> {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let src = t.data();
    let data = (0..t.len())
        .map(|i| {
            let (plane, y, x) = (i / (h * w), (i / w) % h, i % w);
            src[plane * h * w + (h - 1 - y) * w + x]
        })
        .collect();
    Tensor::new(s.to_vec(), data).expect("same shape")
}

fn crop(t: &Tensor<f64>, y0: usize, x0: usize, size: usize) -> Tensor<f64> {
    let (b, c, _, _) = t.dims4("crop").expect("rank 4");
    Tensor::from_fn(&[b, c, size, size], |i| {
        let (bc, y, x) = (i / (size * size), (i / size) % size, i % size);
        t.at4(bc / c, bc % c, y0 + y, x0 + x)
    })
}

/// Spatial transform applied to every tensor of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    /// `(y0, x0, size)`.
    pub crop: Option<(usize, usize, usize)>,
}

impl Augmentation {
    pub fn draw(cfg: &TrainConfig, height: usize, width: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let flip_horizontal = rng.random_bool(cfg.flip_probability);
        let flip_vertical = rng.random_bool(cfg.flip_probability);
        let crop = match cfg.crop_size {
            None => None,
            Some(c) if c > height || c > width => {
                return Err(Error::contract(format!("crop {c} exceeds image {height}x{width}")))
            }
            Some(c) => Some((rng.random_range(0..=height - c), rng.random_range(0..=width - c), c)),
        };
        Ok(Augmentation { flip_horizontal, flip_vertical, crop })
    }

    pub fn apply(&self, s: &Prepared) -> Result<Prepared> {
        let spatial = |t: &Tensor<f64>| {
            let mut t = t.clone();
            if self.flip_horizontal {
                t = flip_last_axis(&t);
            }
            if self.flip_vertical {
                t = flip_rows(&t);
            }
            if let Some((y0, x0, size)) = self.crop {
                t = crop(&t, y0, x0, size);
            }
            t
        };
        if let Some((y0, x0, size)) = self.crop {
            if y0 + size > s.height() || x0 + size > s.width() {
                return Err(Error::contract(format!(
                    "crop {size} at ({y0},{x0}) exceeds {}x{}",
                    s.height(),
                    s.width()
                )));
            }
        }
        let flow = s.flow.as_ref().map(|f| {
            let mut f = spatial(f);
            let hw = f.shape()[2] * f.shape()[3];
            let data = f.data_mut();
            if self.flip_horizontal {
                data[..hw].iter_mut().for_each(|u| *u = -*u);
            }
            if self.flip_vertical {
                data[hw..].iter_mut().for_each(|v| *v = -*v);
            }
            f
        });
        Ok(Prepared {
            steps: s.steps.iter().map(spatial).collect(),
            first: spatial(&s.first),
            second: spatial(&s.second),
            flow,
        })
    }
}

/// Randomly flips and crops a sample with the configured probabilities.
pub fn augment(sample: &Prepared, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Prepared> {
    Augmentation::draw(cfg, sample.height(), sample.width(), rng)?.apply(sample)
}

/// One row of the loss curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub total: f64,
    pub photometric: f64,
    pub smoothness: f64,
    pub lr: f64,
}

pub const LOSS_CSV_HEADER: &str = "epoch,iteration,total,photometric,smoothness,lr";

impl LossRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e}",
            self.epoch, self.iteration, self.total, self.photometric, self.smoothness, self.lr
        )
    }
}

/// Loss terms and parameter gradients of one batch.
#[derive(Clone, Debug)]
pub struct BatchResult {
    pub total: f64,
    pub photometric: f64,
    pub smoothness: f64,
    pub grads: ParamStore<f64>,
}

/// Batched spike steps plus the stacked first and second images.
type Stacked = (Vec<Tensor<f64>>, Tensor<f64>, Tensor<f64>);

fn stack_batch(batch: &[Prepared]) -> Result<Stacked> {
    let n = batch[0].steps.len();
    let steps = (0..n)
        .map(|i| Tensor::concat_batch(&batch.iter().map(|p| &p.steps[i]).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let first = Tensor::concat_batch(&batch.iter().map(|p| &p.first).collect::<Vec<_>>())?;
    let second = Tensor::concat_batch(&batch.iter().map(|p| &p.second).collect::<Vec<_>>())?;
    Ok((steps, first, second))
}

/// Forward pass, loss and full backward pass over a batch.
pub fn batch_gradients(
    batch: &[Prepared],
    params: &ParamStore<f64>,
    net: &NetworkConfig,
    loss: &LossConfig,
    strict: bool,
) -> Result<BatchResult> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let (steps, first, second) = stack_batch(batch)?;
    let mut graph = hybrid_forward(&steps, params, net, strict)?;
    let flows = graph.flows.clone();
    let terms = total_on_tape(&mut graph.tape, &flows, &first, &second, loss)?;
    let value = |v| graph.tape.value(v).item();
    let (total, photometric) = (value(terms.total), value(terms.photometric));
    let smoothness = terms.smoothness.map_or(0.0, value);
    if strict && !total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {total}")));
    }
    graph.tape.backward(terms.total)?;
    let grads = graph.parameter_grads(params)?;
    Ok(BatchResult { total, photometric, smoothness, grads })
}

/// Loss of the whole dataset without augmentation, batched in order.
pub fn dataset_loss(samples: &[Prepared], params: &ParamStore<f64>, cfg: &TrainConfig) -> Result<f64> {
    let (net, loss) = (cfg.network(), cfg.loss());
    let mut total = 0.0;
    for chunk in samples.chunks(cfg.batch_size) {
        let (steps, first, second) = stack_batch(chunk)?;
        let mut graph = hybrid_forward(&steps, params, &net, false)?;
        let flows = graph.flows.clone();
        let terms = total_on_tape(&mut graph.tape, &flows, &first, &second, &loss)?;
        total += graph.tape.value(terms.total).item();
    }
    Ok(total)
}

/// Parameters, optimizer state and position of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore<f64>,
    pub optimizer: OptimizerState<f64>,
    /// Epochs completed so far.
    pub epoch: usize,
    pub iteration: usize,
    pub best_loss: f64,
}

impl TrainState {
    pub fn fresh(cfg: &TrainConfig) -> Result<Self> {
        let params = init_params(&cfg.network(), cfg.seed)?;
        let optimizer = OptimizerState::new(&params);
        Ok(TrainState { params, optimizer, epoch: 0, iteration: 0, best_loss: f64::INFINITY })
    }
}

/// RNG driving shuffling and augmentation in `epoch`; derived from the seed
/// so a resumed run draws the same numbers.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Runs one epoch, appending to `log`. Returns `false` once the iteration
/// cap is reached.
pub fn train_epoch(
    samples: &[Prepared],
    state: &mut TrainState,
    cfg: &TrainConfig,
    log: &mut Vec<LossRecord>,
) -> Result<bool> {
    let (net, loss) = (cfg.network(), cfg.loss());
    let mut rng = epoch_rng(cfg.seed, state.epoch);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let lr = cfg.learning_rate(state.epoch);
    for idx in order.chunks(cfg.batch_size) {
        if cfg.max_iterations.is_some_and(|m| state.iteration >= m) {
            return Ok(false);
        }
        let batch = idx.iter().map(|&i| augment(&samples[i], cfg, &mut rng)).collect::<Result<Vec<_>>>()?;
        let at_iteration = |e: Error| match e {
            Error::Numeric(msg) => Error::Numeric(format!("iteration {}: {msg}", state.iteration)),
            other => other,
        };
        let r = batch_gradients(&batch, &state.params, &net, &loss, cfg.strict).map_err(at_iteration)?;
        adam_step(&mut state.params, &r.grads, &mut state.optimizer, lr, cfg.strict).map_err(at_iteration)?;
        log.push(LossRecord {
            epoch: state.epoch,
            iteration: state.iteration,
            total: r.total,
            photometric: r.photometric,
            smoothness: r.smoothness,
            lr,
        });
        state.iteration += 1;
    }
    state.epoch += 1;
    Ok(!cfg.max_iterations.is_some_and(|m| state.iteration >= m))
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn loss_csv(&self) -> PathBuf {
        self.dir.join("loss.csv")
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch{epoch:04}.sfn"))
    }

    pub fn epoch_optimizer(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch{epoch:04}.adam"))
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.dir.join("best.sfn")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.sfn")
    }
}

/// Serialises optimizer moments, step and run position in checkpoint form.
fn optimizer_store(state: &TrainState) -> Result<ParamStore<f64>> {
    let mut s = ParamStore::new();
    s.insert("state.step", Tensor::scalar(state.optimizer.step as f64))?;
    s.insert("state.epoch", Tensor::scalar(state.epoch as f64))?;
    s.insert("state.iteration", Tensor::scalar(state.iteration as f64))?;
    s.insert("state.best_loss", Tensor::scalar(state.best_loss))?;
    for (n, t) in state.optimizer.m.iter() {
        s.insert(format!("m.{n}"), t.clone())?;
    }
    for (n, t) in state.optimizer.v.iter() {
        s.insert(format!("v.{n}"), t.clone())?;
    }
    Ok(s)
}

/// Restores the state saved after `epoch` by [`train`].
pub fn resume_state(files: &RunFiles, cfg: &TrainConfig, epoch: usize) -> Result<TrainState> {
    let net = cfg.network();
    let layout = init_params::<f64>(&net, cfg.seed)?;
    let params = checkpoint::load_for(files.epoch_checkpoint(epoch), &net.digest(), &layout)?;
    let opt = checkpoint::read_checkpoint(files.epoch_optimizer(epoch))?;
    if opt.digest != net.digest() {
        return Err(Error::Checkpoint("optimizer state belongs to another configuration".into()));
    }
    let scalar = |n: &str| opt.params.get(n).map(|t| t.item()).map_err(|e| Error::Checkpoint(e.to_string()));
    let mut m = ParamStore::new();
    let mut v = ParamStore::new();
    for (n, _) in layout.iter() {
        m.insert(n, opt.params.get(&format!("m.{n}")).map_err(|e| Error::Checkpoint(e.to_string()))?.clone())?;
        v.insert(n, opt.params.get(&format!("v.{n}")).map_err(|e| Error::Checkpoint(e.to_string()))?.clone())?;
    }
    layout.expect_compatible(&m).map_err(|e| Error::Checkpoint(e.to_string()))?;
    layout.expect_compatible(&v).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(TrainState {
        params,
        optimizer: OptimizerState { m, v, step: scalar("state.step")? as u64 },
        epoch: scalar("state.epoch")? as usize,
        iteration: scalar("state.iteration")? as usize,
        best_loss: scalar("state.best_loss")?,
    })
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub state: TrainState,
    pub log: Vec<LossRecord>,
    pub final_checkpoint: PathBuf,
    /// Loss of the whole dataset under the final parameters, without
    /// augmentation.
    pub final_loss: f64,
}

/// Trains from `state` until the configured epoch count or iteration cap,
/// writing the loss curve, a checkpoint (with optimizer state) after every
/// epoch, the best-so-far checkpoint by mean epoch loss, and a final
/// checkpoint.
pub fn train_from(
    samples: &[Sample],
    cfg: &TrainConfig,
    out_dir: impl AsRef<Path>,
    mut state: TrainState,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::contract("dataset is empty"));
    }
    let prepared = samples.iter().map(|s| s.prepare(cfg.n_frames)).collect::<Result<Vec<_>>>()?;
    let files = RunFiles { dir: out_dir.as_ref().to_path_buf() };
    fs::create_dir_all(&files.dir)?;
    let digest = cfg.network().digest();
    let mut log = Vec::new();
    let mut csv = format!("{LOSS_CSV_HEADER}\n");
    if state.epoch > 0 && files.loss_csv().exists() {
        // keep rows of the epochs already completed
        let previous = fs::read_to_string(files.loss_csv())?;
        csv = previous
            .lines()
            .filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_none_or(|e| e < state.epoch))
            .map(|l| format!("{l}\n"))
            .collect();
    }
    while state.epoch < cfg.epochs {
        let start = log.len();
        let more = train_epoch(&prepared, &mut state, cfg, &mut log)?;
        let rows = &log[start..];
        for r in rows {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
        fs::write(files.loss_csv(), &csv)?;
        if !rows.is_empty() {
            let mean = rows.iter().map(|r| r.total).sum::<f64>() / rows.len() as f64;
            let finished = state.epoch;
            if mean < state.best_loss {
                state.best_loss = mean;
                write_checkpoint(files.best_checkpoint(), &digest, &state.params)?;
            }
            write_checkpoint(files.epoch_checkpoint(finished), &digest, &state.params)?;
            write_checkpoint(files.epoch_optimizer(finished), &digest, &optimizer_store(&state)?)?;
        }
        if !more {
            break;
        }
    }
    write_checkpoint(files.final_checkpoint(), &digest, &state.params)?;
    let final_loss = dataset_loss(&prepared, &state.params, cfg)?;
    Ok(TrainSummary { state, log, final_checkpoint: files.final_checkpoint(), final_loss })
}

/// Trains from freshly initialised parameters.
pub fn train(samples: &[Sample], cfg: &TrainConfig, out_dir: impl AsRef<Path>) -> Result<TrainSummary> {
    train_from(samples, cfg, out_dir, TrainState::fresh(cfg)?)
}
