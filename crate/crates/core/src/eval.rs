//! Masked endpoint error, spike activity and synaptic-operation accounting.
//!
//! Operation counts follow the event-driven view: layer `l` has `M_l` input
//! neurons and each active input triggers `C_l = k*k*C_out / s^2`
//! accumulates on average. Per time-step the spiking layer costs
//! `M_l * C_l * F_l`, where `F_l` is the activity of its input. The dense
//! analog equivalent costs `M_l * C_l`, which equals the usual MAC count
//! `H_out * W_out * C_out * k*k*C_in` whenever the input extent is a
//! multiple of the stride.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::ann::{init_params, predict, NetworkConfig, DECODER_STAGES};
use crate::checkpoint;
use crate::dataset::{Prepared, Sample, UNKNOWN_FLOW};
use crate::error::{Error, Result};
use crate::flow::{direction_ppm, magnitude_pgm, FlowField};
use crate::loss::{total_on_tape, LossConfig};
use crate::ops;
use crate::params::ParamStore;
use crate::snn::{self, EncoderConfig, EncoderOutput, SnnRecord, Source};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

/// Energy of a multiply-accumulate relative to an accumulate.
pub const DEFAULT_ENERGY_RATIO: f64 = 5.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AeeResult {
    pub aee: f64,
    pub masked_pixels: usize,
    /// No pixel passed both masks; `aee` is reported as 0.
    pub empty: bool,
}

/// True where ground truth is finite and not marked unknown.
pub fn valid_flow_mask(gt: &FlowField) -> Vec<bool> {
    let (b, h, w) = (gt.batch(), gt.height(), gt.width());
    (0..b * h * w)
        .map(|i| {
            let (bi, y, x) = (i / (h * w), (i / w) % h, i % w);
            let (u, v) = (gt.u(bi, y, x), gt.v(bi, y, x));
            u.is_finite() && v.is_finite() && u.abs() < UNKNOWN_FLOW && v.abs() < UNKNOWN_FLOW
        })
        .collect()
}

/// Mean endpoint error over pixels set in both masks (`B*H*W` entries
/// each, row-major).
pub fn aee(pred: &FlowField, gt: &FlowField, event_mask: &[bool], gt_mask: &[bool]) -> Result<AeeResult> {
    if pred.tensor().shape() != gt.tensor().shape() {
        return Err(Error::dim(
            "aee",
            format!("prediction {:?} vs ground truth {:?}", pred.tensor().shape(), gt.tensor().shape()),
        ));
    }
    let (b, h, w) = (pred.batch(), pred.height(), pred.width());
    for (m, what) in [(event_mask, "event"), (gt_mask, "ground-truth")] {
        if m.len() != b * h * w {
            return Err(Error::dim("aee", format!("{what} mask has {} entries, expected {}", m.len(), b * h * w)));
        }
    }
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..b * h * w {
        if event_mask[i] && gt_mask[i] {
            let (bi, y, x) = (i / (h * w), (i / w) % h, i % w);
            let du = pred.u(bi, y, x) - gt.u(bi, y, x);
            let dv = pred.v(bi, y, x) - gt.v(bi, y, x);
            sum += du.hypot(dv);
            count += 1;
        }
    }
    Ok(AeeResult { aee: if count == 0 { 0.0 } else { sum / count as f64 }, masked_pixels: count, empty: count == 0 })
}

/// Geometry of one layer for operation counting.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerOps {
    pub name: String,
    /// Input neurons `M` per sample.
    pub neurons: f64,
    /// Mean accumulates per active input, `C`.
    pub fan_out: f64,
    /// Input is binary spikes; otherwise the layer is counted as dense.
    pub event_driven: bool,
}

impl LayerOps {
    pub fn dense_ops(&self) -> f64 {
        self.neurons * self.fan_out
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_ops(
    name: String,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    cout: usize,
    stride: usize,
    event_driven: bool,
) -> LayerOps {
    LayerOps {
        name,
        neurons: (cin * h * w) as f64,
        fan_out: (k * k * cout) as f64 / (stride * stride) as f64,
        event_driven,
    }
}

/// Layers of the spiking block for an `h x w` input.
pub fn encoder_layer_ops(cfg: &EncoderConfig, h: usize, w: usize) -> Result<Vec<LayerOps>> {
    let shapes = snn::layer_shapes(cfg, &[1, 4, h, w])?;
    Ok(cfg
        .layers
        .iter()
        .map(|l| {
            let (ih, iw, event_driven) = match l.source {
                Source::Input => (h, w, true),
                Source::Layer(j) => (shapes[j][2], shapes[j][3], cfg.layers[j].fires),
            };
            conv_ops(l.name.clone(), l.in_channels, ih, iw, l.kernel, l.out_channels, l.stride, event_driven)
        })
        .collect())
}

/// Every layer of the network counted as a dense analog layer: encoder,
/// residual blocks, and per decoder stage the upsampling transposed
/// convolution, the flow head and the fixed flow upsampler.
pub fn network_layer_ops(net: &NetworkConfig, h: usize, w: usize) -> Result<Vec<LayerOps>> {
    if !h.is_multiple_of(16) || !w.is_multiple_of(16) {
        return Err(Error::dim("network_layer_ops", format!("input {h}x{w} is not a multiple of 16")));
    }
    let mut out = encoder_layer_ops(
        &NetworkConfig { variant: crate::ann::HybridVariant::Standard, ..net.clone() }.encoder_config(1),
        h,
        w,
    )?;
    for l in &mut out {
        l.event_driven = false;
    }
    let deep = 8 * net.base_width;
    let (dh, dw) = (h / 16, w / 16);
    for r in 1..=2 {
        for k in 1..=2 {
            out.push(conv_ops(format!("res{r}.conv{k}"), deep, dh, dw, 3, deep, 1, false));
        }
    }
    let widths = net.decoder_widths();
    let enc = net.encoder_widths();
    let skips = [enc[2], enc[1], enc[0], 4];
    let mut cin = deep;
    for s in 0..DECODER_STAGES {
        let (ih, iw) = (dh << s, dw << s);
        let stage = s + 1;
        out.push(conv_ops(format!("dec{stage}.up"), cin, ih, iw, 4, widths[s], 1, false));
        let cat = widths[s] + skips[s] + if s > 0 { 2 } else { 0 };
        if s > 0 {
            // depthwise: each flow input reaches 16 outputs of its own channel
            out.push(conv_ops(format!("dec{stage}.flow_up"), 2, ih, iw, 4, 1, 1, false));
        }
        let k = net.flow_head_kernel;
        out.push(conv_ops(format!("dec{stage}.flow"), cat, 2 * ih, 2 * iw, k, 2, 1, false));
        cin = cat;
    }
    Ok(out)
}

/// Dense operation counts of the default-width network at 256x256:
/// `(encoder, whole network)`.
pub fn reference_geometry_ops() -> Result<(f64, f64)> {
    let net = NetworkConfig::default();
    let layers = network_layer_ops(&net, 256, 256)?;
    let enc: f64 = layers[..4].iter().map(LayerOps::dense_ops).sum();
    let total: f64 = layers.iter().map(LayerOps::dense_ops).sum();
    Ok((enc, total))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerOpCount {
    pub name: String,
    pub neurons: f64,
    pub fan_out: f64,
    pub input_rate: f64,
    pub snn_ops: f64,
    pub ann_ops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpCountReport {
    pub layers: Vec<LayerOpCount>,
    pub n_timesteps: usize,
    pub snn_total_ops: f64,
    pub ann_equivalent_ops: f64,
    pub normalized_ops_percent: f64,
    pub energy_ratio: f64,
    /// `None` when the spiking block performed no operations.
    pub encoder_energy_benefit: Option<f64>,
    pub zero_snn_ops: bool,
    /// Share of the whole network's dense operations spent in the block.
    pub encoder_share: f64,
    pub network_ann_ops: f64,
    pub overall_energy_reduction_percent: f64,
}

/// Builds the report from layer geometry and per-layer input activity.
/// `network_ann_ops` is the dense cost of the whole network the block sits
/// in; the overall reduction scales the block's saving by its share.
pub fn count_ops(
    layers: &[LayerOps],
    rates: &[f64],
    n_timesteps: usize,
    energy_ratio: f64,
    network_ann_ops: f64,
) -> Result<OpCountReport> {
    if layers.len() != rates.len() {
        return Err(Error::contract(format!("{} rates for {} layers", rates.len(), layers.len())));
    }
    if let Some(r) = rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::contract(format!("activity {r} outside [0, 1]")));
    }
    if !(energy_ratio > 0.0) {
        return Err(Error::contract("energy ratio must be positive"));
    }
    let counts: Vec<LayerOpCount> = layers
        .iter()
        .zip(rates)
        .map(|(l, &f)| LayerOpCount {
            name: l.name.clone(),
            neurons: l.neurons,
            fan_out: l.fan_out,
            input_rate: f,
            snn_ops: l.neurons * l.fan_out * f * n_timesteps as f64,
            ann_ops: l.dense_ops(),
        })
        .collect();
    let snn: f64 = counts.iter().map(|c| c.snn_ops).sum();
    let ann: f64 = counts.iter().map(|c| c.ann_ops).sum();
    let benefit = (snn > 0.0).then(|| energy_ratio * ann / snn);
    let share = if network_ann_ops > 0.0 { ann / network_ann_ops } else { 0.0 };
    let overall = match benefit {
        Some(b) => 100.0 * share * (1.0 - 1.0 / b),
        None => 100.0 * share,
    };
    Ok(OpCountReport {
        layers: counts,
        n_timesteps,
        snn_total_ops: snn,
        ann_equivalent_ops: ann,
        normalized_ops_percent: if ann > 0.0 { 100.0 * snn / ann } else { 0.0 },
        energy_ratio,
        encoder_energy_benefit: benefit,
        zero_snn_ops: benefit.is_none(),
        encoder_share: share,
        network_ann_ops,
        overall_energy_reduction_percent: overall,
    })
}

/// Activity of each layer's input: event density for the first layer,
/// the source's firing rate for the others, and 1 for analog sources.
pub fn layer_input_rates(record: &SnnRecord<f64>, cfg: &EncoderConfig) -> Result<Vec<f64>> {
    let firing = snn::measure_spike_activity(record, cfg)?;
    let firing_index = |j: usize| (0..j).filter(|&i| cfg.is_firing(i)).count();
    Ok(cfg
        .layers
        .iter()
        .map(|l| match l.source {
            Source::Input => snn::input_activity(record),
            Source::Layer(j) if cfg.is_firing(j) => firing[firing_index(j)],
            Source::Layer(_) => 1.0,
        })
        .collect())
}

/// Event-driven convolution: every nonzero input scatters its weighted
/// value into the outputs it reaches. Returns the output and the number of
/// accumulates performed.
pub fn scatter_conv2d(
    input: &Tensor<f64>,
    weight: &Tensor<f64>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<f64>, u64)> {
    let (b, cin, h, w) = input.dims4("scatter_conv2d")?;
    let (cout, wcin, kh, kw) = weight.dims4("scatter_conv2d")?;
    if wcin != cin {
        return Err(Error::dim("scatter_conv2d", format!("input has {cin} channels on axis 1, weight expects {wcin}")));
    }
    let oh =
        ops::conv_out_len(h, kh, stride, padding).ok_or_else(|| Error::dim("scatter_conv2d", "input too small"))?;
    let ow =
        ops::conv_out_len(w, kw, stride, padding).ok_or_else(|| Error::dim("scatter_conv2d", "input too small"))?;
    let mut out = Tensor::zeros(&[b, cout, oh, ow]);
    let mut accumulates = 0u64;
    let target = |i: usize, k: usize, n: usize| {
        let p = i + padding;
        (p >= k && (p - k).is_multiple_of(stride) && (p - k) / stride < n).then(|| (p - k) / stride)
    };
    for bi in 0..b {
        for ci in 0..cin {
            for y in 0..h {
                for x in 0..w {
                    let v = input.at4(bi, ci, y, x);
                    if v == 0.0 {
                        continue;
                    }
                    for ky in 0..kh {
                        let Some(oy) = target(y, ky, oh) else { continue };
                        for kx in 0..kw {
                            let Some(ox) = target(x, kx, ow) else { continue };
                            for co in 0..cout {
                                let cur = out.at4(bi, co, oy, ox);
                                out.set4(bi, co, oy, ox, cur + v * weight.at4(co, ci, ky, kx));
                            }
                            accumulates += cout as u64;
                        }
                    }
                }
            }
        }
    }
    Ok((out, accumulates))
}

/// Forward pass of the spiking block with per-layer operation counters.
#[derive(Clone, Debug)]
pub struct InstrumentedRun {
    pub output: EncoderOutput<f64>,
    /// Per layer and per sample: `C_l` for every active input, or the full
    /// dense cost for analog-input layers, summed over steps.
    pub counted_ops: Vec<f64>,
    /// Accumulates actually performed by the event-driven convolutions
    /// (padding taps excluded), summed over the batch.
    pub performed_accumulates: Vec<u64>,
}

pub fn instrumented_encoder_forward(
    steps: &[Tensor<f64>],
    params: &ParamStore<f64>,
    cfg: &EncoderConfig,
) -> Result<InstrumentedRun> {
    let first = steps.first().ok_or_else(|| Error::contract("no input frames"))?;
    let (b, _, h, w) = first.dims4("instrumented_encoder_forward")?;
    let geometry = encoder_layer_ops(cfg, h, w)?;
    let mut counted = vec![0.0; cfg.layers.len()];
    let mut performed = vec![0u64; cfg.layers.len()];
    let mut conv = |l: usize, x: &Tensor<f64>, wt: &Tensor<f64>| -> Result<Tensor<f64>> {
        let spec = &cfg.layers[l];
        if geometry[l].event_driven {
            let (out, n) = scatter_conv2d(x, wt, spec.stride, spec.padding)?;
            counted[l] += x.count_nonzero() as f64 * geometry[l].fan_out / b as f64;
            performed[l] += n;
            Ok(out)
        } else {
            counted[l] += geometry[l].dense_ops();
            ops::conv2d(x, wt, spec.stride, spec.padding)
        }
    };
    let output = snn::encoder_forward_with(steps, params, cfg, &mut conv)?;
    Ok(InstrumentedRun { output, counted_ops: counted, performed_accumulates: performed })
}

/// Largest centred crop whose sides are multiples of 16.
pub fn center_crop(p: &Prepared) -> Result<Prepared> {
    let (h, w) = (p.height(), p.width());
    let (ch, cw) = (h / 16 * 16, w / 16 * 16);
    if ch == 0 || cw == 0 {
        return Err(Error::dim("center_crop", format!("image {h}x{w} is smaller than 16x16")));
    }
    let (y0, x0) = ((h - ch) / 2, (w - cw) / 2);
    let crop = |t: &Tensor<f64>| {
        let (b, c, _, _) = t.dims4("center_crop").expect("rank 4");
        Tensor::from_fn(&[b, c, ch, cw], |i| {
            let (bc, y, x) = (i / (ch * cw), (i / cw) % ch, i % cw);
            t.at4(bc / c, bc % c, y0 + y, x0 + x)
        })
    };
    Ok(Prepared {
        steps: p.steps.iter().map(crop).collect(),
        first: crop(&p.first),
        second: crop(&p.second),
        flow: p.flow.as_ref().map(crop),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleEval {
    pub name: String,
    pub aee: Option<AeeResult>,
    pub loss: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub samples: Vec<SampleEval>,
    /// Pooled over every masked pixel of every sample with ground truth.
    pub aee: Option<AeeResult>,
    pub total_loss: f64,
    pub spike_rates: Vec<(String, f64)>,
    pub ops: OpCountReport,
    #[serde(skip)]
    pub predictions: Vec<FlowField>,
}

/// Evaluates `params` on `samples` (centre-cropped to multiples of 16).
pub fn evaluate_params(
    params: &ParamStore<f64>,
    samples: &[Sample],
    cfg: &TrainConfig,
    energy_ratio: f64,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::contract("no samples to evaluate"));
    }
    let net = cfg.network();
    let enc_cfg = net.encoder_config(cfg.n_frames);
    let loss_cfg: LossConfig = cfg.loss();
    let mut rows = Vec::new();
    let mut predictions = Vec::new();
    let (mut err_sum, mut err_count, mut any_gt) = (0.0, 0usize, false);
    let mut total_loss = 0.0;
    let mut rate_sum = vec![0.0; enc_cfg.layers.len()];
    let mut firing_sum: Vec<f64> = Vec::new();
    let mut size = (0, 0);
    for s in samples {
        let p = center_crop(&s.prepare(cfg.n_frames)?)?;
        size = (p.height(), p.width());
        let flows = predict(&p.steps, params, &net)?;
        let finest = flows.last().expect("four stages").clone();
        let mut tape = Tape::new();
        let vars: Vec<_> = flows.iter().map(|f| tape.constant(f.tensor().clone())).collect();
        let l = total_on_tape(&mut tape, &vars, &p.first, &p.second, &loss_cfg)?;
        let loss = tape.value(l.total).item();
        total_loss += loss;
        let aee_res = match &p.flow {
            Some(gt) => {
                let gt = FlowField::new(gt.clone())?;
                let r = aee(&finest, &gt, &p.event_mask(), &valid_flow_mask(&gt))?;
                err_sum += r.aee * r.masked_pixels as f64;
                err_count += r.masked_pixels;
                any_gt = true;
                Some(r)
            }
            None => None,
        };
        let enc = snn::encoder_forward(&p.steps, params, &enc_cfg)?;
        for (acc, r) in rate_sum.iter_mut().zip(layer_input_rates(&enc.record, &enc_cfg)?) {
            *acc += r;
        }
        let firing = snn::measure_spike_activity(&enc.record, &enc_cfg)?;
        if firing_sum.is_empty() {
            firing_sum = vec![0.0; firing.len()];
        }
        for (acc, r) in firing_sum.iter_mut().zip(firing) {
            *acc += r;
        }
        rows.push(SampleEval { name: s.name.clone(), aee: aee_res, loss });
        predictions.push(finest);
    }
    let n = samples.len() as f64;
    let rates: Vec<f64> = rate_sum.iter().map(|r| r / n).collect();
    let layers = encoder_layer_ops(&enc_cfg, size.0, size.1)?;
    let network: f64 = network_layer_ops(&net, size.0, size.1)?.iter().map(LayerOps::dense_ops).sum();
    let ops = count_ops(&layers, &rates, cfg.n_frames, energy_ratio, network)?;
    let firing_names = enc_cfg.layers.iter().filter(|l| l.fires).map(|l| l.name.clone());
    let spike_rates = firing_names.zip(firing_sum.iter().map(|r| r / n)).collect();
    let pooled = any_gt.then(|| AeeResult {
        aee: if err_count == 0 { 0.0 } else { err_sum / err_count as f64 },
        masked_pixels: err_count,
        empty: err_count == 0,
    });
    Ok(EvalReport { samples: rows, aee: pooled, total_loss, spike_rates, ops, predictions })
}

/// Loads a checkpoint written for `cfg`'s network and evaluates it.
pub fn evaluate(
    checkpoint_path: impl AsRef<Path>,
    samples: &[Sample],
    cfg: &TrainConfig,
    energy_ratio: f64,
) -> Result<EvalReport> {
    let net = cfg.network();
    let layout = init_params::<f64>(&net, 0)?;
    let params = checkpoint::load_for(checkpoint_path, &net.digest(), &layout)?;
    evaluate_params(&params, samples, cfg, energy_ratio)
}

pub fn ops_json(ops: &OpCountReport) -> Result<String> {
    serde_json::to_string_pretty(ops).map(|s| s + "\n").map_err(|e| Error::format(e.to_string()))
}

/// Writes `aee.csv`, `summary.json` and per-sample flow images
/// (`<name>_magnitude.pgm`, `<name>_direction.ppm`) into `dir`.
pub fn write_reports(report: &EvalReport, dir: impl AsRef<Path>, max_magnitude: f64) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut csv = String::from("sample,aee,masked_pixels,loss\n");
    for s in &report.samples {
        match &s.aee {
            Some(a) => csv.push_str(&format!("{},{:.6},{},{:e}\n", s.name, a.aee, a.masked_pixels, s.loss)),
            None => csv.push_str(&format!("{},,0,{:e}\n", s.name, s.loss)),
        }
    }
    fs::write(dir.join("aee.csv"), csv)?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::format(e.to_string()))?;
    fs::write(dir.join("summary.json"), json + "\n")?;
    for (s, f) in report.samples.iter().zip(&report.predictions) {
        fs::write(dir.join(format!("{}_magnitude.pgm", s.name)), magnitude_pgm(f, max_magnitude)?)?;
        fs::write(dir.join(format!("{}_direction.ppm", s.name)), direction_ppm(f, max_magnitude)?)?;
    }
    Ok(())
}
