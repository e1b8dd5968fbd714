//! Integrate-and-fire encoder.
//!
//! Each hidden layer convolves the spikes of its source, integrates the
//! result into its membrane potential and fires where the potential is
//! strictly above threshold, resetting those neurons to zero. Integrating
//! layers (always including the last one) never fire; their per-step output
//! is the input current itself. Per-layer output accumulators (spike counts
//! for firing layers, the integrated membrane otherwise) feed the analog
//! decoder.
//!
//! Training uses back-propagation through time with the surrogate
//! derivative `d o / d V = (1 / V_th) * [o > 0]`. Membrane carry-over
//! between steps has derivative 1 where the neuron did not fire and 0
//! through a reset.

use crate::error::{Error, Result};
use crate::ops;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Where a layer takes its presynaptic spikes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    /// The binary event frames.
    Input,
    /// Spike output of an earlier layer (0-based index).
    Layer(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnnLayerSpec {
    pub name: String,
    pub source: Source,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Output of this source is added unweighted to the input current.
    pub shortcut: Option<Source>,
    pub bias: bool,
    /// Integrate-and-fire when true; pure integration otherwise.
    pub fires: bool,
}

impl SnnLayerSpec {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }
}

/// Layer graph, firing threshold and number of time-steps of the spiking
/// block. The last layer must not fire.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: Vec<SnnLayerSpec>,
    pub threshold: f64,
    pub n_timesteps: usize,
}

impl EncoderConfig {
    /// Four stride-2 3x3 layers with widths `b, 2b, 4b, 8b` on a 4-channel
    /// event input.
    pub fn standard(base_width: usize, threshold: f64, n_timesteps: usize) -> Self {
        let widths = [base_width, 2 * base_width, 4 * base_width, 8 * base_width];
        let mut layers = Vec::new();
        let mut cin = 4;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(SnnLayerSpec {
                name: format!("enc{}", i + 1),
                source: if i == 0 { Source::Input } else { Source::Layer(i - 1) },
                in_channels: cin,
                out_channels: w,
                kernel: 3,
                stride: 2,
                padding: 1,
                shortcut: None,
                bias: false,
                fires: i + 1 < widths.len(),
            });
            cin = w;
        }
        EncoderConfig { layers, threshold, n_timesteps }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::contract("spiking block needs at least one layer"));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::contract(format!("threshold must be positive, got {}", self.threshold)));
        }
        if self.n_timesteps == 0 {
            return Err(Error::contract("n_timesteps must be at least 1"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.stride == 0 {
                return Err(Error::contract(format!("layer {} has zero stride", l.name)));
            }
            for src in [Some(l.source), l.shortcut].into_iter().flatten() {
                if let Source::Layer(j) = src {
                    if j >= i {
                        return Err(Error::contract(format!("layer {} reads from later layer {j}", l.name)));
                    }
                }
            }
            if let Some(Source::Layer(j)) = l.shortcut {
                if self.layers[j].out_channels != l.out_channels {
                    return Err(Error::dim(
                        "snn",
                        format!("shortcut from {} changes channel count", self.layers[j].name),
                    ));
                }
            }
        }
        if self.layers[self.last()].fires {
            return Err(Error::contract("the last spiking-block layer must only integrate"));
        }
        Ok(())
    }

    pub fn last(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn is_firing(&self, layer: usize) -> bool {
        self.layers[layer].fires
    }

    /// Source channel count.
    fn source_channels(&self, src: Source) -> usize {
        match src {
            Source::Input => 4,
            Source::Layer(j) => self.layers[j].out_channels,
        }
    }
}

/// Membrane potentials and recorded spikes of one firing layer.
#[derive(Clone, Debug)]
pub struct IFLayerState<S> {
    pub membrane: Tensor<S>,
    pub spikes_per_step: Vec<Tensor<S>>,
    pub threshold: S,
}

impl<S: Scalar> IFLayerState<S> {
    /// Zero membrane of the given shape.
    pub fn new(shape: &[usize], threshold: S) -> Self {
        IFLayerState { membrane: Tensor::zeros(shape), spikes_per_step: Vec::new(), threshold }
    }

    /// Integrates `input_current`, fires where the membrane exceeds the
    /// threshold (strictly) and resets those neurons to zero.
    pub fn if_step(&mut self, input_current: &Tensor<S>) -> Result<Tensor<S>> {
        self.membrane.add_assign(input_current).map_err(|_| {
            Error::dim("if_step", format!("input {:?} vs membrane {:?}", input_current.shape(), self.membrane.shape()))
        })?;
        let th = self.threshold;
        let mut spikes = Tensor::zeros(self.membrane.shape());
        for (v, o) in self.membrane.data_mut().iter_mut().zip(spikes.data_mut()) {
            if *v > th {
                *o = S::one();
                *v = S::zero();
            }
        }
        self.spikes_per_step.push(spikes.clone());
        Ok(spikes)
    }

    pub fn n_steps(&self) -> usize {
        self.spikes_per_step.len()
    }
}

/// Everything the backward pass needs from a forward run.
#[derive(Clone, Debug)]
pub struct SnnRecord<S> {
    /// Input frames per step, `[B,4,H,W]`.
    pub inputs: Vec<Tensor<S>>,
    /// One state per layer; `spikes_per_step` is empty for integrating
    /// layers.
    pub states: Vec<IFLayerState<S>>,
    /// Per-step input current of integrating layers (empty for firing ones).
    pub currents: Vec<Vec<Tensor<S>>>,
}

impl<S: Scalar> SnnRecord<S> {
    pub fn n_steps(&self) -> usize {
        self.inputs.len()
    }

    /// Output of `src` at step `n`: spikes of a firing layer, current of an
    /// integrating one.
    pub fn source_at(&self, src: Source, n: usize) -> Result<&Tensor<S>> {
        let missing = || Error::contract(format!("no recorded output for {src:?} at step {n}"));
        match src {
            Source::Input => self.inputs.get(n).ok_or_else(missing),
            Source::Layer(j) => {
                let spikes = self.states.get(j).and_then(|s| s.spikes_per_step.get(n));
                spikes.or_else(|| self.currents.get(j).and_then(|c| c.get(n))).ok_or_else(missing)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOutput<S> {
    /// Per layer: summed spikes over all steps, or for integrating layers
    /// the integrated membrane.
    pub accumulators: Vec<Tensor<S>>,
    /// Sum of the input frames over all steps, `[B,4,H,W]`.
    pub input_accumulator: Tensor<S>,
    pub record: SnnRecord<S>,
}

/// Convolution used for a layer's synaptic input: `(layer index, presyn,
/// weight) -> current`.
pub(crate) type SynapseFn<'a, S> = dyn FnMut(usize, &Tensor<S>, &Tensor<S>) -> Result<Tensor<S>> + 'a;

fn current<S: Scalar>(
    l: usize,
    spec: &SnnLayerSpec,
    params: &ParamStore<S>,
    presyn: &Tensor<S>,
    shortcut: Option<&Tensor<S>>,
    conv: &mut SynapseFn<'_, S>,
) -> Result<Tensor<S>> {
    let mut i = conv(l, presyn, params.get(&spec.weight_name())?)?;
    if spec.bias {
        i = ops::add_bias(&i, params.get(&spec.bias_name())?)?;
    }
    if let Some(s) = shortcut {
        i.add_assign(s)
            .map_err(|_| Error::dim("snn", format!("shortcut into {} has shape {:?}", spec.name, s.shape())))?;
    }
    Ok(i)
}

/// Runs the spiking block over the `[B,4,H,W]` frames in `steps`.
pub fn encoder_forward<S: Scalar>(
    steps: &[Tensor<S>],
    params: &ParamStore<S>,
    config: &EncoderConfig,
) -> Result<EncoderOutput<S>> {
    let mut dense = |l: usize, x: &Tensor<S>, w: &Tensor<S>| {
        let spec = &config.layers[l];
        ops::conv2d(x, w, spec.stride, spec.padding)
    };
    encoder_forward_with(steps, params, config, &mut dense)
}

pub(crate) fn encoder_forward_with<S: Scalar>(
    steps: &[Tensor<S>],
    params: &ParamStore<S>,
    config: &EncoderConfig,
    conv: &mut SynapseFn<'_, S>,
) -> Result<EncoderOutput<S>> {
    config.validate()?;
    if steps.len() != config.n_timesteps {
        return Err(Error::contract(format!("{} input frames for a {}-step encoder", steps.len(), config.n_timesteps)));
    }
    for f in steps {
        if f.data().iter().any(|&v| v != S::zero() && v != S::one()) {
            return Err(Error::contract("encoder input must be binary"));
        }
    }
    let threshold = S::lit(config.threshold);
    let n_layers = config.layers.len();
    let mut states: Vec<Option<IFLayerState<S>>> = vec![None; n_layers];
    let mut currents: Vec<Vec<Tensor<S>>> = vec![Vec::new(); n_layers];

    for n in 0..steps.len() {
        for (l, spec) in config.layers.iter().enumerate() {
            let output_of = |src: Source| -> &Tensor<S> {
                match src {
                    Source::Input => &steps[n],
                    Source::Layer(j) => match &states[j] {
                        Some(st) => &st.spikes_per_step[n],
                        None => &currents[j][n],
                    },
                }
            };
            let i = current(l, spec, params, output_of(spec.source), spec.shortcut.map(output_of), conv)?;
            if spec.fires {
                states[l].get_or_insert_with(|| IFLayerState::new(i.shape(), threshold)).if_step(&i)?;
            } else {
                currents[l].push(i);
            }
        }
    }

    let mut accumulators = Vec::with_capacity(n_layers);
    let mut final_states = Vec::with_capacity(n_layers);
    for (st, cur) in states.into_iter().zip(&currents) {
        match st {
            Some(st) => {
                let mut acc = Tensor::zeros(st.membrane.shape());
                for s in &st.spikes_per_step {
                    acc.add_assign(s)?;
                }
                accumulators.push(acc);
                final_states.push(st);
            }
            None => {
                let mut membrane = Tensor::zeros(cur[0].shape());
                for c in cur {
                    membrane.add_assign(c)?;
                }
                accumulators.push(membrane.clone());
                final_states.push(IFLayerState { membrane, spikes_per_step: Vec::new(), threshold });
            }
        }
    }
    let mut input_accumulator = Tensor::zeros(steps[0].shape());
    for f in steps {
        input_accumulator.add_assign(f)?;
    }
    let record = SnnRecord { inputs: steps.to_vec(), states: final_states, currents };
    Ok(EncoderOutput { accumulators, input_accumulator, record })
}

/// Surrogate-gradient BPTT through the spiking block.
///
/// `upstream[l]` is the loss gradient with respect to accumulator `l`
/// (`None` when the accumulator does not reach the loss). Returns the
/// gradient of every parameter of the block, summed over time-steps.
pub fn encoder_backward<S: Scalar>(
    upstream: &[Option<Tensor<S>>],
    record: &SnnRecord<S>,
    params: &ParamStore<S>,
    config: &EncoderConfig,
) -> Result<ParamStore<S>> {
    config.validate()?;
    let n_layers = config.layers.len();
    let n_steps = record.n_steps();
    if n_steps == 0 || record.states.len() != n_layers {
        return Err(Error::contract("backward needs the recorded states of a forward pass"));
    }
    if upstream.len() != n_layers {
        return Err(Error::contract(format!("{} upstream gradients for {n_layers} layers", upstream.len())));
    }
    for (l, st) in record.states.iter().enumerate() {
        let recorded =
            if config.is_firing(l) { st.spikes_per_step.len() } else { record.currents.get(l).map_or(0, Vec::len) };
        if recorded != n_steps {
            return Err(Error::contract(format!(
                "layer {} recorded {recorded} of {n_steps} steps",
                config.layers[l].name
            )));
        }
        if let Some(g) = &upstream[l] {
            g.expect_same_shape(&st.membrane, "encoder_backward")?;
        }
    }

    let inv_th = S::one() / S::lit(config.threshold);
    let mut grads = ParamStore::new();
    for spec in &config.layers {
        grads.insert(spec.weight_name(), Tensor::zeros(&spec.weight_shape()))?;
        if spec.bias {
            grads.insert(spec.bias_name(), Tensor::zeros(&[spec.out_channels]))?;
        }
    }
    let zeros = |l: usize| Tensor::<S>::zeros(record.states[l].membrane.shape());
    // loss gradient w.r.t. the membrane carried out of step n (into n+1)
    let mut carry: Vec<Tensor<S>> = (0..n_layers).map(zeros).collect();

    for n in (0..n_steps).rev() {
        let mut d_out: Vec<Tensor<S>> =
            (0..n_layers).map(|l| upstream[l].clone().unwrap_or_else(|| zeros(l))).collect();
        for l in (0..n_layers).rev() {
            let spec = &config.layers[l];
            let d_current = if config.is_firing(l) {
                let o = &record.states[l].spikes_per_step[n];
                let mut dv = Tensor::zeros(o.shape());
                for (((dv, &o), &g_o), &g_c) in
                    dv.data_mut().iter_mut().zip(o.data()).zip(d_out[l].data()).zip(carry[l].data())
                {
                    *dv = if o > S::zero() { g_o * inv_th } else { g_c };
                }
                carry[l] = dv.clone();
                dv
            } else {
                d_out[l].clone()
            };

            let presyn = record.source_at(spec.source, n)?;
            let gw = ops::conv2d_grad_weight(presyn, &d_current, &spec.weight_shape(), spec.stride, spec.padding)?;
            grads.get_mut(&spec.weight_name())?.add_assign(&gw)?;
            if spec.bias {
                grads.get_mut(&spec.bias_name())?.add_assign(&ops::bias_grad(&d_current)?)?;
            }
            if let Source::Layer(j) = spec.source {
                let w = params.get(&spec.weight_name())?;
                let gin = ops::conv2d_grad_input(&d_current, w, presyn.shape(), spec.stride, spec.padding)?;
                d_out[j].add_assign(&gin)?;
            }
            if let Some(Source::Layer(j)) = spec.shortcut {
                d_out[j].add_assign(&d_current)?;
            }
        }
    }
    Ok(grads)
}

/// Mean firing rate of every firing layer: spikes over
/// `neurons * steps * batch`.
pub fn measure_spike_activity<S: Scalar>(record: &SnnRecord<S>, config: &EncoderConfig) -> Result<Vec<f64>> {
    if record.n_steps() == 0 || record.states.is_empty() {
        return Err(Error::contract("no recorded spikes"));
    }
    let mut rates = Vec::new();
    for (l, st) in record.states.iter().enumerate() {
        if !config.is_firing(l) {
            continue;
        }
        if st.spikes_per_step.is_empty() {
            return Err(Error::contract(format!("layer {l} has no recorded spikes")));
        }
        let total: usize = st.spikes_per_step.iter().map(|s| s.count_nonzero()).sum();
        rates.push(total as f64 / (st.membrane.len() * st.spikes_per_step.len()) as f64);
    }
    Ok(rates)
}

/// Input density of the event frames (fraction of nonzero entries).
pub fn input_activity<S: Scalar>(record: &SnnRecord<S>) -> f64 {
    let total: usize = record.inputs.iter().map(|t| t.count_nonzero()).sum();
    let size: usize = record.inputs.iter().map(|t| t.len()).sum();
    if size == 0 {
        0.0
    } else {
        total as f64 / size as f64
    }
}

/// Shapes each layer's membrane takes for an `[B,4,H,W]` input.
pub fn layer_shapes(config: &EncoderConfig, input_shape: &[usize]) -> Result<Vec<[usize; 4]>> {
    let [b, _, h, w] = input_shape else {
        return Err(Error::dim("snn", format!("input shape {input_shape:?}")));
    };
    let mut shapes: Vec<[usize; 4]> = Vec::new();
    for spec in &config.layers {
        let (sh, sw) = match spec.source {
            Source::Input => (*h, *w),
            Source::Layer(j) => (shapes[j][2], shapes[j][3]),
        };
        if config.source_channels(spec.source) != spec.in_channels {
            return Err(Error::dim("snn", format!("layer {} expects {} input channels", spec.name, spec.in_channels)));
        }
        let oh = ops::conv_out_len(sh, spec.kernel, spec.stride, spec.padding)
            .ok_or_else(|| Error::dim("snn", format!("layer {} input {sh}x{sw} too small", spec.name)))?;
        let ow = ops::conv_out_len(sw, spec.kernel, spec.stride, spec.padding)
            .ok_or_else(|| Error::dim("snn", format!("layer {} input {sh}x{sw} too small", spec.name)))?;
        shapes.push([*b, spec.out_channels, oh, ow]);
    }
    Ok(shapes)
}
