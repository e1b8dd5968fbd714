//! Analog half of the hybrid network and the full forward pass.
//!
//! The spiking encoder's accumulators go through two residual blocks and
//! four decoder stages. Each decoder stage upsamples with a stride-2
//! transposed convolution, concatenates the matching encoder skip and the
//! upsampled previous flow, and predicts a flow at its own resolution with a
//! linear convolution head. Stage `s` (1-based) works at `1 / 2^(4-s)` of
//! the input resolution.

use std::fmt;
use std::str::FromStr;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::params::{fan_in_uniform, ParamStore};
use crate::scalar::Scalar;
use crate::snn::{self, EncoderConfig, EncoderOutput, SnnLayerSpec, Source};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DECODER_STAGES: usize = 4;
const UPSAMPLE_KERNEL: usize = 4;

/// Which residual blocks run as spiking layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HybridVariant {
    Standard,
    OneResidualSnn,
    TwoResidualSnn,
}

impl HybridVariant {
    pub const ALL: [HybridVariant; 3] =
        [HybridVariant::Standard, HybridVariant::OneResidualSnn, HybridVariant::TwoResidualSnn];

    pub fn spiking_residual_blocks(self) -> usize {
        match self {
            HybridVariant::Standard => 0,
            HybridVariant::OneResidualSnn => 1,
            HybridVariant::TwoResidualSnn => 2,
        }
    }
}

impl fmt::Display for HybridVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HybridVariant::Standard => "standard",
            HybridVariant::OneResidualSnn => "one_residual_snn",
            HybridVariant::TwoResidualSnn => "two_residual_snn",
        })
    }
}

impl FromStr for HybridVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(HybridVariant::Standard),
            "one_residual_snn" => Ok(HybridVariant::OneResidualSnn),
            "two_residual_snn" => Ok(HybridVariant::TwoResidualSnn),
            other => Err(Error::Config { key: "hybrid_variant".into(), detail: format!("unknown variant `{other}`") }),
        }
    }
}

/// Architecture of the hybrid network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Width of the first encoder layer; later layers double it.
    pub base_width: usize,
    pub flow_head_kernel: usize,
    pub variant: HybridVariant,
    /// Negative slope of the leaky rectifier used in analog layers.
    pub leaky_slope: f64,
    /// Firing threshold of every spiking layer.
    pub threshold: f64,
    pub snn_bias: bool,
    /// Gain on the fan-in uniform initialisation of spiking layers.
    pub snn_init_gain: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_width: 64,
            flow_head_kernel: 3,
            variant: HybridVariant::Standard,
            leaky_slope: 0.1,
            threshold: 0.75,
            snn_bias: false,
            snn_init_gain: 1.0,
        }
    }
}

impl NetworkConfig {
    pub fn encoder_widths(&self) -> [usize; 4] {
        let b = self.base_width;
        [b, 2 * b, 4 * b, 8 * b]
    }

    /// Output channels of the four decoder upsampling layers.
    pub fn decoder_widths(&self) -> [usize; 4] {
        let b = self.base_width;
        [2 * b, b, (b / 2).max(1), (b / 2).max(1)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::Config { key: "base_width".into(), detail: "must be positive".into() });
        }
        if self.flow_head_kernel.is_multiple_of(2) {
            return Err(Error::Config { key: "flow_head_kernel".into(), detail: "must be odd".into() });
        }
        if !(self.threshold > 0.0) {
            return Err(Error::Config { key: "threshold".into(), detail: "must be positive".into() });
        }
        if !(self.leaky_slope >= 0.0) {
            return Err(Error::Config { key: "leaky_slope".into(), detail: "must be non-negative".into() });
        }
        Ok(())
    }

    /// Stable textual form of every field that affects parameter shapes or
    /// semantics.
    pub fn canonical(&self) -> String {
        format!(
            "base_width={};flow_head_kernel={};variant={};leaky_slope={:?};threshold={:?};snn_bias={};snn_init_gain={:?}",
            self.base_width, self.flow_head_kernel, self.variant, self.leaky_slope, self.threshold, self.snn_bias, self.snn_init_gain
        )
    }

    /// SHA-256 of [`NetworkConfig::canonical`].
    pub fn digest(&self) -> [u8; 32] {
        let mut out = [0u8; 32];
        out.copy_from_slice(&Sha256::digest(self.canonical().as_bytes()));
        out
    }

    /// Spiking block for this variant: the four encoder layers, plus any
    /// residual blocks run in spiking form. A spiking residual block fires in
    /// its first layer and integrates in its second, whose current also
    /// receives the block input unweighted.
    pub fn encoder_config(&self, n_timesteps: usize) -> EncoderConfig {
        let mut cfg = EncoderConfig::standard(self.base_width, self.threshold, n_timesteps);
        for l in &mut cfg.layers {
            l.bias = self.snn_bias;
        }
        let deep = 8 * self.base_width;
        for r in 0..self.variant.spiking_residual_blocks() {
            let block_in = cfg.layers.len() - 1;
            for (k, shortcut) in [(1, None), (2, Some(Source::Layer(block_in)))] {
                let src = cfg.layers.len() - 1;
                cfg.layers.push(SnnLayerSpec {
                    name: format!("res{}.conv{k}", r + 1),
                    source: Source::Layer(src),
                    in_channels: deep,
                    out_channels: deep,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    shortcut,
                    bias: self.snn_bias,
                    fires: k == 1,
                });
            }
        }
        cfg
    }

    /// Encoder layer whose accumulator feeds decoder stage `s` (0-based) as a
    /// skip connection; `None` means the summed input frames.
    fn skip_layer(stage: usize) -> Option<usize> {
        match stage {
            0 => Some(2),
            1 => Some(1),
            2 => Some(0),
            _ => None,
        }
    }

    fn skip_channels(&self, stage: usize) -> usize {
        match Self::skip_layer(stage) {
            Some(l) => self.encoder_widths()[l],
            None => 4,
        }
    }

    /// Input channels of decoder stage `s` (0-based).
    fn decoder_in_channels(&self, stage: usize) -> usize {
        if stage == 0 {
            8 * self.base_width
        } else {
            self.concat_channels(stage - 1)
        }
    }

    /// Channels of the concatenation built at stage `s`.
    fn concat_channels(&self, stage: usize) -> usize {
        self.decoder_widths()[stage] + self.skip_channels(stage) + if stage > 0 { 2 } else { 0 }
    }
}

/// Freshly initialised parameters for `config`.
///
/// Spiking and analog weights use fan-in-scaled uniform initialisation;
/// analog biases start at zero.
pub fn init_params<S: Scalar>(config: &NetworkConfig, seed: u64) -> Result<ParamStore<S>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let enc = config.encoder_config(1);
    for spec in &enc.layers {
        let shape = spec.weight_shape();
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        p.insert(spec.weight_name(), fan_in_uniform(&shape, fan_in, config.snn_init_gain, &mut rng))?;
        if spec.bias {
            p.insert(spec.bias_name(), Tensor::zeros(&[spec.out_channels]))?;
        }
    }
    let deep = 8 * config.base_width;
    for r in config.variant.spiking_residual_blocks()..2 {
        for k in 1..=2 {
            let shape = [deep, deep, 3, 3];
            p.insert(format!("res{}.conv{k}.weight", r + 1), fan_in_uniform(&shape, deep * 9, 1.0, &mut rng))?;
            p.insert(format!("res{}.conv{k}.bias", r + 1), Tensor::zeros(&[deep]))?;
        }
    }
    let widths = config.decoder_widths();
    for (s, &width) in widths.iter().enumerate().take(DECODER_STAGES) {
        let cin = config.decoder_in_channels(s);
        let shape = [cin, width, UPSAMPLE_KERNEL, UPSAMPLE_KERNEL];
        // each output of a stride-2 4x4 transposed conv sees 4 taps per input channel
        p.insert(format!("dec{}.up.weight", s + 1), fan_in_uniform(&shape, cin * 4, 1.0, &mut rng))?;
        p.insert(format!("dec{}.up.bias", s + 1), Tensor::zeros(&[width]))?;
        let ccat = config.concat_channels(s);
        let k = config.flow_head_kernel;
        p.insert(format!("dec{}.flow.weight", s + 1), fan_in_uniform(&[2, ccat, k, k], ccat * k * k, 0.1, &mut rng))?;
        p.insert(format!("dec{}.flow.bias", s + 1), Tensor::zeros(&[2]))?;
    }
    Ok(p)
}

/// Fixed 4x4 stride-2 bilinear upsampling kernel applied per flow channel.
pub fn bilinear_upsample_kernel<S: Scalar>() -> Tensor<S> {
    let taps = [0.25, 0.75, 0.75, 0.25];
    let mut w = Tensor::zeros(&[2, 2, 4, 4]);
    for c in 0..2 {
        for (ky, a) in taps.iter().enumerate() {
            for (kx, b) in taps.iter().enumerate() {
                w.set4(c, c, ky, kx, S::lit(a * b));
            }
        }
    }
    w
}

/// Parameter leaves of the analog layers recorded on a tape.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: Vec<(String, Var)>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::contract(format!("parameter `{name}` not on tape")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Records every analog parameter of `params` as a trainable leaf.
    pub fn record<S: Scalar>(tape: &mut Tape<S>, params: &ParamStore<S>, skip: &[String]) -> Self {
        let vars = params
            .iter()
            .filter(|(n, _)| !skip.iter().any(|s| s == n))
            .map(|(n, t)| (n.to_string(), tape.param(t.clone())))
            .collect();
        ParamVars { vars }
    }
}

/// Analog residual block: `x + lrelu(conv2(lrelu(conv1(x))))`.
pub fn residual_block<S: Scalar>(tape: &mut Tape<S>, x: Var, pv: &ParamVars, block: usize, slope: S) -> Result<Var> {
    let name = |k: usize, what: &str| format!("res{block}.conv{k}.{what}");
    let (_, c, _, _) = tape.value(x).dims4("residual_block")?;
    let wc = tape.value(pv.get(&name(1, "weight"))?).shape()[1];
    if wc != c {
        return Err(Error::dim("residual_block", format!("input has {c} channels, block expects {wc}")));
    }
    let mut h = tape.conv2d(x, pv.get(&name(1, "weight"))?, 1, 1)?;
    h = tape.add_bias(h, pv.get(&name(1, "bias"))?)?;
    h = tape.leaky_relu(h, slope)?;
    h = tape.conv2d(h, pv.get(&name(2, "weight"))?, 1, 1)?;
    h = tape.add_bias(h, pv.get(&name(2, "bias"))?)?;
    h = tape.leaky_relu(h, slope)?;
    tape.add(h, x)
}

/// Runs the four decoder stages on `deepest`, with `skips[s]` concatenated
/// at stage `s`. Returns the flow of every stage, coarsest first.
pub fn decoder_forward<S: Scalar>(
    tape: &mut Tape<S>,
    deepest: Var,
    skips: &[Var],
    pv: &ParamVars,
    config: &NetworkConfig,
) -> Result<Vec<Var>> {
    if skips.len() != DECODER_STAGES {
        return Err(Error::contract(format!("{} skips for {DECODER_STAGES} decoder stages", skips.len())));
    }
    let slope = S::lit(config.leaky_slope);
    let upsampler = tape.constant(bilinear_upsample_kernel());
    let pad = config.flow_head_kernel / 2;
    let mut x = deepest;
    let mut prev_flow: Option<Var> = None;
    let mut flows = Vec::with_capacity(DECODER_STAGES);
    for (s, &skip) in skips.iter().enumerate() {
        let stage = s + 1;
        let mut up = tape.conv_transpose2d(x, pv.get(&format!("dec{stage}.up.weight"))?, 2, 1)?;
        up = tape.add_bias(up, pv.get(&format!("dec{stage}.up.bias"))?)?;
        up = tape.leaky_relu(up, slope)?;
        let mut parts = vec![up, skip];
        if let Some(f) = prev_flow {
            parts.push(tape.conv_transpose2d(f, upsampler, 2, 1)?);
        }
        let (us, ss) = (tape.value(up).shape().to_vec(), tape.value(skip).shape().to_vec());
        if us[0] != ss[0] || us[2..] != ss[2..] {
            return Err(Error::dim(
                "decoder_forward",
                format!("stage {stage}: upsampled activations {us:?} do not align with skip {ss:?}"),
            ));
        }
        let cat = tape.concat_channels(&parts)?;
        let mut flow = tape.conv2d(cat, pv.get(&format!("dec{stage}.flow.weight"))?, 1, pad)?;
        flow = tape.add_bias(flow, pv.get(&format!("dec{stage}.flow.bias"))?)?;
        flows.push(flow);
        prev_flow = Some(flow);
        x = cat;
    }
    Ok(flows)
}

/// A recorded forward pass: the spiking block ran eagerly and its
/// accumulators entered the tape as leaves, so their gradients can seed
/// the BPTT backward pass.
pub struct HybridGraph<S> {
    pub tape: Tape<S>,
    /// Flow of each decoder stage, coarsest first.
    pub flows: Vec<Var>,
    /// Tape leaf per encoder accumulator (`None` if unused downstream).
    pub accumulator_vars: Vec<Option<Var>>,
    pub param_vars: ParamVars,
    pub encoder: EncoderOutput<S>,
    pub encoder_config: EncoderConfig,
}

impl<S: Scalar> HybridGraph<S> {
    pub fn flow_fields(&self) -> Result<Vec<FlowField<S>>> {
        self.flows.iter().map(|&f| FlowField::new(self.tape.value(f).clone())).collect()
    }

    /// Gradients of every parameter after `tape.backward`: analog ones from
    /// the tape, spiking ones by BPTT from the accumulator gradients.
    pub fn parameter_grads(&self, params: &ParamStore<S>) -> Result<ParamStore<S>> {
        let upstream: Vec<Option<Tensor<S>>> =
            self.accumulator_vars.iter().map(|v| v.and_then(|v| self.tape.grad(v).cloned())).collect();
        let snn_grads = snn::encoder_backward(&upstream, &self.encoder.record, params, &self.encoder_config)?;
        let mut out = ParamStore::new();
        for (name, t) in params.iter() {
            let g = if snn_grads.contains(name) {
                snn_grads.get(name)?.clone()
            } else {
                let v = self.param_vars.get(name)?;
                self.tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))
            };
            out.insert(name, g)?;
        }
        Ok(out)
    }
}

/// Full hybrid forward pass over `steps` (`[B,4,H,W]` binary frames, one
/// per time-step). `H` and `W` must be multiples of 16.
pub fn hybrid_forward<S: Scalar>(
    steps: &[Tensor<S>],
    params: &ParamStore<S>,
    config: &NetworkConfig,
    strict: bool,
) -> Result<HybridGraph<S>> {
    config.validate()?;
    let first = steps.first().ok_or_else(|| Error::contract("no input frames"))?;
    let (_, c, h, w) = first.dims4("hybrid_forward")?;
    if c != 4 {
        return Err(Error::dim("hybrid_forward", format!("input has {c} channels, expected 4")));
    }
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::dim("hybrid_forward", format!("input {h}x{w} is not a multiple of 16")));
    }
    let enc_cfg = config.encoder_config(steps.len());
    let encoder = snn::encoder_forward(steps, params, &enc_cfg)?;

    let mut tape = Tape::new().with_strict(strict);
    let n_layers = enc_cfg.layers.len();
    let mut accumulator_vars = vec![None; n_layers];
    let mut acc_var = |tape: &mut Tape<S>, l: usize| -> Var {
        *accumulator_vars[l].get_or_insert_with(|| tape.leaf(encoder.accumulators[l].clone(), true))
    };
    let deepest = acc_var(&mut tape, n_layers - 1);
    let mut skips = Vec::with_capacity(DECODER_STAGES);
    for s in 0..DECODER_STAGES {
        skips.push(match NetworkConfig::skip_layer(s) {
            Some(l) => acc_var(&mut tape, l),
            None => tape.constant(encoder.input_accumulator.clone()),
        });
    }

    let snn_names: Vec<String> = enc_cfg.layers.iter().flat_map(|l| [l.weight_name(), l.bias_name()]).collect();
    let param_vars = ParamVars::record(&mut tape, params, &snn_names);
    let slope = S::lit(config.leaky_slope);
    let mut x = deepest;
    for block in config.variant.spiking_residual_blocks() + 1..=2 {
        x = residual_block(&mut tape, x, &param_vars, block, slope)?;
    }
    let flows = decoder_forward(&mut tape, x, &skips, &param_vars, config)?;
    Ok(HybridGraph { tape, flows, accumulator_vars, param_vars, encoder, encoder_config: enc_cfg })
}

/// Convenience wrapper returning only the flow values.
pub fn predict<S: Scalar>(
    steps: &[Tensor<S>],
    params: &ParamStore<S>,
    config: &NetworkConfig,
) -> Result<Vec<FlowField<S>>> {
    hybrid_forward(steps, params, config, false)?.flow_fields()
}
