#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spikeflow::ann::{self, HybridVariant, NetworkConfig, ParamVars};
use spikeflow::dataset::{synthetic_dataset, Prepared, SyntheticSpec};
use spikeflow::loss::{total_on_tape, LossConfig};
use spikeflow::params::ParamStore;
use spikeflow::snn::{self, EncoderConfig, SnnLayerSpec, Source};
use spikeflow::tensor::Tensor;
use spikeflow::trainer::{batch_gradients, DtMode, Schedule, TrainConfig};
use spikeflow::{Result, Tape, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn binary(shape: &[usize], density: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| if rng.random_bool(density) { 1.0 } else { 0.0 })
}

fn norm(t: &[f64]) -> f64 {
    t.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `|a - b| / max(|a|, |b|)` over whole vectors; zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&d) / scale
    }
}

/// Largest central-difference error over every entry of every input of a
/// scalar-valued tape function.
pub fn fd_check<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut numeric = vec![0.0; input.len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            *n = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(analytic.data(), &numeric));
    }
    worst
}

/// `sum(weights * x)`: reduces an op output to a scalar with a generic
/// upstream gradient.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed);
    let w = uniform(tape.value(x).shape(), -1.0, 1.0, &mut r);
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

/// Finite-difference errors of every differentiable tape op, by name.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    let mut r = rng(11);
    let a = uniform(&[2, 3, 4, 5], -1.0, 1.0, &mut r);
    let b = uniform(&[2, 3, 4, 5], -1.0, 1.0, &mut r);
    // keep entries away from the kinks of abs and leaky relu
    let signed = a.map(|v| if v.abs() < 0.1 { v + 0.2 } else { v });
    let mask = binary(&[2, 3, 4, 5], 0.5, &mut r);
    let konst = uniform(&[2, 3, 4, 5], -1.0, 1.0, &mut r);
    let mut out = Vec::new();
    let mut check = |name, inputs: &[Tensor<f64>], f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>| {
        out.push((name, fd_check(inputs, |t, v| f(t, v))));
    };
    check("add", &[a.clone(), b.clone()], &|t, v| {
        let y = t.add(v[0], v[1])?;
        weighted_sum(t, y, 1)
    });
    check("sub", &[a.clone(), b.clone()], &|t, v| {
        let y = t.sub(v[0], v[1])?;
        weighted_sum(t, y, 2)
    });
    check("mul", &[a.clone(), b.clone()], &|t, v| {
        let y = t.mul(v[0], v[1])?;
        weighted_sum(t, y, 3)
    });
    check("scale", std::slice::from_ref(&a), &|t, v| {
        let y = t.scale(v[0], -1.7)?;
        weighted_sum(t, y, 4)
    });
    check("add_scalar", std::slice::from_ref(&a), &|t, v| {
        let y = t.add_scalar(v[0], 0.3)?;
        let y = t.mul(y, y)?;
        weighted_sum(t, y, 5)
    });
    let kc = konst.clone();
    check("add_const", std::slice::from_ref(&a), &move |t, v| {
        let y = t.add_const(v[0], &kc)?;
        let y = t.mul(y, y)?;
        weighted_sum(t, y, 6)
    });
    let mc = mask.clone();
    check("mask_mul", std::slice::from_ref(&a), &move |t, v| {
        let y = t.mask_mul(v[0], mc.clone())?;
        weighted_sum(t, y, 7)
    });
    check("leaky_relu", std::slice::from_ref(&signed), &|t, v| {
        let y = t.leaky_relu(v[0], 0.1)?;
        weighted_sum(t, y, 8)
    });
    check("abs", std::slice::from_ref(&signed), &|t, v| {
        let y = t.abs(v[0])?;
        weighted_sum(t, y, 9)
    });
    check("charbonnier", std::slice::from_ref(&a), &|t, v| {
        let y = t.charbonnier(v[0], 0.45, 1e-3)?;
        weighted_sum(t, y, 10)
    });
    check("sum", std::slice::from_ref(&a), &|t, v| {
        let y = t.mul(v[0], v[0])?;
        t.sum(y)
    });
    check("reshape", std::slice::from_ref(&a), &|t, v| {
        let y = t.reshape(v[0], &[6, 20])?;
        weighted_sum(t, y, 11)
    });
    check("channel", std::slice::from_ref(&a), &|t, v| {
        let y = t.channel(v[0], 1)?;
        weighted_sum(t, y, 12)
    });
    let c = uniform(&[2, 2, 4, 5], -1.0, 1.0, &mut r);
    check("concat", &[a.clone(), c], &|t, v| {
        let y = t.concat_channels(&[v[0], v[1]])?;
        weighted_sum(t, y, 13)
    });
    for axis in [2, 3] {
        check(
            if axis == 2 { "neighbor_diff_rows" } else { "neighbor_diff_cols" },
            std::slice::from_ref(&a),
            &move |t, v| {
                let y = t.neighbor_diff(v[0], axis)?;
                weighted_sum(t, y, 14)
            },
        );
    }
    let x = uniform(&[2, 3, 7, 6], -1.0, 1.0, &mut r);
    for (name, k, stride, pad) in [
        ("conv2d_k3_s1_p1", 3, 1, 1),
        ("conv2d_k3_s2_p1", 3, 2, 1),
        ("conv2d_k1_s1_p0", 1, 1, 0),
        ("conv2d_k5_s2_p2", 5, 2, 2),
    ] {
        let w = uniform(&[4, 3, k, k], -1.0, 1.0, &mut r);
        check(name, &[x.clone(), w], &move |t, v| {
            let y = t.conv2d(v[0], v[1], stride, pad)?;
            weighted_sum(t, y, 15)
        });
    }
    let xt = uniform(&[2, 3, 4, 3], -1.0, 1.0, &mut r);
    for (name, k, stride, pad) in [("conv_transpose2d_k4_s2_p1", 4, 2, 1), ("conv_transpose2d_k3_s1_p1", 3, 1, 1)] {
        let w = uniform(&[3, 2, k, k], -1.0, 1.0, &mut r);
        check(name, &[xt.clone(), w], &move |t, v| {
            let y = t.conv_transpose2d(v[0], v[1], stride, pad)?;
            weighted_sum(t, y, 16)
        });
    }
    let bias = uniform(&[3], -1.0, 1.0, &mut r);
    check("add_bias", &[a.clone(), bias], &|t, v| {
        let y = t.add_bias(v[0], v[1])?;
        let y = t.mul(y, y)?;
        weighted_sum(t, y, 17)
    });
    // sample points strictly inside cells and inside the image
    let img = uniform(&[2, 2, 6, 7], 0.0, 1.0, &mut r);
    let cx = Tensor::from_fn(&[2, 6, 7], |_| r.random_range(0..6) as f64 + r.random_range(0.1..0.9));
    let cy = Tensor::from_fn(&[2, 6, 7], |_| r.random_range(0..5) as f64 + r.random_range(0.1..0.9));
    check("bilinear_sample", &[img.clone(), cx, cy], &|t, v| {
        let y = t.bilinear_sample(v[0], v[1], v[2])?;
        weighted_sum(t, y, 18)
    });
    // clamped lookups: coordinates beyond the border in x, inside in y
    let cx = Tensor::from_fn(&[2, 6, 7], |i| if i % 2 == 0 { -1.3 } else { 8.4 });
    let cy = Tensor::from_fn(&[2, 6, 7], |_| r.random_range(0..5) as f64 + r.random_range(0.1..0.9));
    check("bilinear_sample_clamped", &[img, cx, cy], &|t, v| {
        let y = t.bilinear_sample(v[0], v[1], v[2])?;
        weighted_sum(t, y, 19)
    });
    check("avg_pool2", &[uniform(&[2, 3, 6, 5], -1.0, 1.0, &mut r)], &|t, v| {
        let y = t.avg_pool2(v[0])?;
        weighted_sum(t, y, 20)
    });
    out
}

pub fn small_net(variant: HybridVariant) -> NetworkConfig {
    NetworkConfig { base_width: 2, variant, ..NetworkConfig::default() }
}

/// Random network input: `n` binary frames of `[1,4,16,16]`.
pub fn frames(n: usize, density: f64, seed: u64) -> Vec<Tensor<f64>> {
    let mut r = rng(seed);
    (0..n).map(|_| binary(&[1, 4, 16, 16], density, &mut r)).collect()
}

/// Images for the 16x16 fixtures.
pub fn image_pair(seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut r = rng(seed);
    (uniform(&[1, 1, 16, 16], 0.1, 0.9, &mut r), uniform(&[1, 1, 16, 16], 0.1, 0.9, &mut r))
}

/// Parameters with flow biases that keep every warp coordinate away from
/// integer positions, so the loss is smooth around them.
pub fn smooth_params(net: &NetworkConfig, seed: u64) -> ParamStore<f64> {
    let mut p = ann::init_params::<f64>(net, seed).unwrap();
    for s in 1..=4 {
        *p.get_mut(&format!("dec{s}.flow.bias")).unwrap() = Tensor::new(vec![2], vec![0.37, -0.29]).unwrap();
    }
    p
}

/// Directional finite-difference errors of the analog parameter gradients of
/// the full network loss, one per parameter tensor.
pub fn ann_path_errors(variant: HybridVariant) -> Vec<(String, f64)> {
    let net = small_net(variant);
    let steps = frames(2, 0.3, 6);
    let params = (5..)
        .map(|seed| smooth_params(&net, seed))
        .find(|p| kink_margin(&ann::predict(&steps, p, &net).unwrap()) > 1e-4)
        .unwrap();
    let (first, second) = image_pair(7);
    let loss = LossConfig::default();
    let prepared = Prepared { steps: steps.clone(), first: first.clone(), second: second.clone(), flow: None };
    let base = batch_gradients(std::slice::from_ref(&prepared), &params, &net, &loss, true).unwrap();
    let enc_names: Vec<String> =
        net.encoder_config(2).layers.iter().flat_map(|l| [l.weight_name(), l.bias_name()]).collect();
    let value =
        |p: &ParamStore<f64>| batch_gradients(std::slice::from_ref(&prepared), p, &net, &loss, false).unwrap().total;
    let mut r = rng(8);
    let mut out = Vec::new();
    for (name, t) in params.iter() {
        if enc_names.iter().any(|n| n == name) {
            continue;
        }
        let dir = uniform(t.shape(), -1.0, 1.0, &mut r);
        let dir = dir.scale(1.0 / dir.dot(&dir).unwrap().sqrt());
        let analytic = base.grads.get(name).unwrap().dot(&dir).unwrap();
        let shifted = |sign: f64| {
            let mut p = params.clone();
            let w = p.get_mut(name).unwrap();
            for (v, d) in w.data_mut().iter_mut().zip(dir.data()) {
                *v += sign * FD_STEP * d;
            }
            value(&p)
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * FD_STEP);
        out.push((name.to_string(), rel_err(&[analytic], &[numeric])));
    }
    out
}

/// Distance of a prediction from the loss's non-differentiable points: equal
/// neighbouring flow values (smoothness) and integer displacements (warp).
pub fn kink_margin(flows: &[spikeflow::FlowField]) -> f64 {
    let mut m = f64::INFINITY;
    for f in flows {
        let t = f.tensor();
        for v in t.data() {
            m = m.min((v - v.round()).abs());
        }
        let (h, w) = (f.height(), f.width());
        for c in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    if x + 1 < w {
                        m = m.min((t.at4(0, c, y, x) - t.at4(0, c, y, x + 1)).abs());
                    }
                    if y + 1 < h {
                        m = m.min((t.at4(0, c, y, x) - t.at4(0, c, y + 1, x)).abs());
                    }
                }
            }
        }
    }
    m
}

/// Finite-difference error of the decoder gradient with respect to the
/// accumulators it reads (deepest activation and every skip).
pub fn decoder_input_error() -> f64 {
    let net = small_net(HybridVariant::Standard);
    let params = smooth_params(&net, 9);
    let mut r = rng(10);
    let inputs = vec![
        uniform(&[1, 16, 1, 1], 0.0, 3.0, &mut r),
        uniform(&[1, 8, 2, 2], 0.0, 3.0, &mut r),
        uniform(&[1, 4, 4, 4], 0.0, 3.0, &mut r),
        uniform(&[1, 2, 8, 8], 0.0, 3.0, &mut r),
        uniform(&[1, 4, 16, 16], 0.0, 3.0, &mut r),
    ];
    let (first, second) = image_pair(12);
    fd_check(&inputs, |t, v| {
        let pv = ParamVars::record(t, &params, &[]);
        let mut x = v[0];
        for block in 1..=2 {
            x = ann::residual_block(t, x, &pv, block, 0.1)?;
        }
        let flows = ann::decoder_forward(t, x, &v[1..], &pv, &net)?;
        Ok(total_on_tape(t, &flows, &first, &second, &LossConfig::default())?.total)
    })
}

/// A toy spiking block with a strided 3x3 layer and an integrating output.
pub fn toy_strided(threshold: f64, n: usize) -> EncoderConfig {
    let layer = |name: &str, source, cin, cout, k, stride, fires| SnnLayerSpec {
        name: name.into(),
        source,
        in_channels: cin,
        out_channels: cout,
        kernel: k,
        stride,
        padding: k / 2,
        shortcut: None,
        bias: true,
        fires,
    };
    EncoderConfig {
        layers: vec![layer("a", Source::Input, 4, 2, 3, 1, true), layer("b", Source::Layer(0), 2, 1, 3, 2, false)],
        threshold,
        n_timesteps: n,
    }
}

/// A toy block of 1x1 layers shaped like a spiking residual block.
pub fn toy_residual(threshold: f64, n: usize) -> EncoderConfig {
    let layer = |name: &str, source, cin, fires, shortcut| SnnLayerSpec {
        name: name.into(),
        source,
        in_channels: cin,
        out_channels: 2,
        kernel: 1,
        stride: 1,
        padding: 0,
        shortcut,
        bias: false,
        fires,
    };
    EncoderConfig {
        layers: vec![
            layer("p", Source::Input, 4, true, None),
            layer("q", Source::Layer(0), 2, true, None),
            layer("r", Source::Layer(1), 2, false, Some(Source::Layer(0))),
        ],
        threshold,
        n_timesteps: n,
    }
}

pub fn toy_params(cfg: &EncoderConfig, seed: u64) -> ParamStore<f64> {
    let mut r = rng(seed);
    let mut p = ParamStore::new();
    for l in &cfg.layers {
        p.insert(l.weight_name(), uniform(&l.weight_shape(), -0.4, 1.0, &mut r)).unwrap();
        if l.bias {
            p.insert(l.bias_name(), uniform(&[l.out_channels], -0.1, 0.3, &mut r)).unwrap();
        }
    }
    p
}

/// The spiking block unrolled over time on a tape, with the spike function's
/// surrogate rule and reset gating written out explicitly. Returns the loss
/// `sum_l <upstream_l, accumulator_l>`, the parameter gradients and the
/// accumulators.
pub fn unrolled_oracle(
    steps: &[Tensor<f64>],
    params: &ParamStore<f64>,
    cfg: &EncoderConfig,
    upstream: &[Tensor<f64>],
) -> (ParamStore<f64>, Vec<Tensor<f64>>) {
    let mut t = Tape::new();
    let pvars: Vec<(String, Var)> = params.iter().map(|(n, v)| (n.to_string(), t.param(v.clone()))).collect();
    let pv = |n: &str| pvars.iter().find(|(m, _)| m == n).unwrap().1;
    let inputs: Vec<Var> = steps.iter().map(|s| t.constant(s.clone())).collect();
    let th = cfg.threshold;
    let n_layers = cfg.layers.len();
    let mut carry: Vec<Option<Var>> = vec![None; n_layers];
    let mut acc: Vec<Option<Var>> = vec![None; n_layers];
    for &input in &inputs {
        let mut outs: Vec<Var> = Vec::new();
        for l in &cfg.layers {
            let src = |s: Source| match s {
                Source::Input => input,
                Source::Layer(j) => outs[j],
            };
            let mut i = t.conv2d(src(l.source), pv(&l.weight_name()), l.stride, l.padding).unwrap();
            if l.bias {
                i = t.add_bias(i, pv(&l.bias_name())).unwrap();
            }
            if let Some(s) = l.shortcut {
                i = t.add(i, src(s)).unwrap();
            }
            let k = outs.len();
            let out = if l.fires {
                let v = match carry[k] {
                    Some(c) => t.add(c, i).unwrap(),
                    None => i,
                };
                let o = t.spike(v, th).unwrap();
                let keep = t.value(o).map(|s| 1.0 - s);
                carry[k] = Some(t.mask_mul(v, keep).unwrap());
                o
            } else {
                i
            };
            acc[k] = Some(match acc[k] {
                Some(a) => t.add(a, out).unwrap(),
                None => out,
            });
            outs.push(out);
        }
    }
    let mut loss = None;
    for (a, u) in acc.iter().zip(upstream) {
        let u = t.constant(u.clone());
        let p = t.mul(a.unwrap(), u).unwrap();
        let s = t.sum(p).unwrap();
        loss = Some(match loss {
            Some(l) => t.add(l, s).unwrap(),
            None => s,
        });
    }
    t.backward(loss.unwrap()).unwrap();
    let mut grads = ParamStore::new();
    for (n, v) in &pvars {
        grads.insert(n.clone(), t.grad(*v).unwrap().clone()).unwrap();
    }
    let accs = acc.iter().map(|a| t.value(a.unwrap()).clone()).collect();
    (grads, accs)
}

/// Largest relative disagreement between BPTT and the unrolled oracle over
/// random fixtures of both toy blocks, together with the fraction of fixtures
/// where any neuron spiked.
pub fn bptt_oracle_error(trials: usize) -> (f64, f64) {
    let mut worst: f64 = 0.0;
    let mut spiking = 0;
    for trial in 0..trials {
        let n = 1 + trial % 4;
        let th = [0.75, 0.5, 1.0][trial % 3];
        let cfg = if trial % 2 == 0 { toy_strided(th, n) } else { toy_residual(th, n) };
        let side = if trial % 2 == 0 { 2 } else { 1 };
        let params = toy_params(&cfg, 100 + trial as u64);
        let mut r = rng(200 + trial as u64);
        let steps: Vec<Tensor<f64>> = (0..n).map(|_| binary(&[1, 4, side, side], 0.6, &mut r)).collect();
        let out = snn::encoder_forward(&steps, &params, &cfg).unwrap();
        let upstream: Vec<Tensor<f64>> =
            out.accumulators.iter().map(|a| uniform(a.shape(), -1.0, 1.0, &mut r)).collect();
        let (oracle, oracle_acc) = unrolled_oracle(&steps, &params, &cfg, &upstream);
        for (a, b) in out.accumulators.iter().zip(&oracle_acc) {
            worst = worst.max(rel_err(a.data(), b.data()));
        }
        let up: Vec<Option<Tensor<f64>>> = upstream.into_iter().map(Some).collect();
        let grads = snn::encoder_backward(&up, &out.record, &params, &cfg).unwrap();
        for (name, g) in grads.iter() {
            worst = worst.max(rel_err(g.data(), oracle.get(name).unwrap().data()));
        }
        if out.record.states.iter().any(|s| s.spikes_per_step.iter().any(|o| o.count_nonzero() > 0)) {
            spiking += 1;
        }
    }
    (worst, spiking as f64 / trials as f64)
}

/// Halving the threshold together with the firing layers' weights leaves
/// the spikes unchanged and doubles the surrogate gradient of those layers.
/// Returns the largest deviation from that scaling and whether the spikes
/// matched.
pub fn threshold_halving_error() -> (f64, bool) {
    let mut worst: f64 = 0.0;
    let mut same_spikes = true;
    for (trial, cfg) in [toy_strided(0.75, 4), toy_residual(0.75, 3)].into_iter().enumerate() {
        let params = toy_params(&cfg, 300 + trial as u64);
        let side = if trial == 0 { 2 } else { 1 };
        let mut r = rng(400 + trial as u64);
        let steps: Vec<Tensor<f64>> = (0..cfg.n_timesteps).map(|_| binary(&[1, 4, side, side], 0.6, &mut r)).collect();
        let mut half_cfg = cfg.clone();
        half_cfg.threshold = cfg.threshold / 2.0;
        let mut half = params.clone();
        for l in cfg.layers.iter().filter(|l| l.fires) {
            for name in [l.weight_name(), l.bias_name()] {
                if let Ok(t) = half.get_mut(&name) {
                    *t = t.scale(0.5);
                }
            }
        }
        let a = snn::encoder_forward(&steps, &params, &cfg).unwrap();
        let b = snn::encoder_forward(&steps, &half, &half_cfg).unwrap();
        for (sa, sb) in a.record.states.iter().zip(&b.record.states) {
            same_spikes &= sa.spikes_per_step == sb.spikes_per_step;
        }
        let upstream: Vec<Option<Tensor<f64>>> =
            a.accumulators.iter().map(|t| Some(uniform(t.shape(), -1.0, 1.0, &mut r))).collect();
        let ga = snn::encoder_backward(&upstream, &a.record, &params, &cfg).unwrap();
        let gb = snn::encoder_backward(&upstream, &b.record, &half, &half_cfg).unwrap();
        let (oracle_b, _) =
            unrolled_oracle(&steps, &half, &half_cfg, &upstream.iter().map(|u| u.clone().unwrap()).collect::<Vec<_>>());
        for l in &cfg.layers {
            let factor = if l.fires { 2.0 } else { 1.0 };
            for name in [l.weight_name(), l.bias_name()] {
                let (Ok(x), Ok(y)) = (ga.get(&name), gb.get(&name)) else { continue };
                worst = worst.max(rel_err(&x.scale(factor).into_data(), y.data()));
                worst = worst.max(rel_err(y.data(), oracle_b.get(&name).unwrap().data()));
            }
        }
    }
    (worst, same_spikes)
}

/// Spike steps (1-based) of a single neuron driven by a constant current.
pub fn constant_current_spikes(current: f64, threshold: f64, steps: usize) -> Vec<usize> {
    let mut st = snn::IFLayerState::new(&[1], threshold);
    let i = Tensor::full(&[1], current);
    (1..=steps).filter(|_| st.if_step(&i).unwrap().item() == 1.0).collect()
}

/// The same fixture pushed through the encoder: one input pixel, a 1x1
/// weight equal to the current, and an integrating readout.
pub fn encoder_spike_steps(current: f64, threshold: f64, steps: usize) -> Vec<usize> {
    let mut cfg = toy_residual(threshold, steps);
    cfg.layers.truncate(2);
    cfg.layers[1].fires = false;
    let mut p = ParamStore::new();
    let mut w = Tensor::zeros(&[2, 4, 1, 1]);
    w.data_mut()[0] = current;
    p.insert("p.weight", w).unwrap();
    p.insert("q.weight", Tensor::zeros(&[2, 2, 1, 1])).unwrap();
    let mut frame = Tensor::zeros(&[1, 4, 1, 1]);
    frame.data_mut()[0] = 1.0;
    let out = snn::encoder_forward(&vec![frame; steps], &p, &cfg).unwrap();
    let spikes = &out.record.states[0].spikes_per_step;
    (1..=steps).filter(|&n| spikes[n - 1].data()[0] == 1.0).collect()
}

/// The dataset and configuration of the learning smoke run.
pub fn smoke_setup() -> (Vec<spikeflow::dataset::Sample>, TrainConfig) {
    let data = synthetic_dataset(&SyntheticSpec { samples: 16, ..SyntheticSpec::default() }).unwrap();
    let mut cfg = TrainConfig::desk(DtMode::Dt1);
    cfg.lr = 3e-3;
    cfg.schedule = Schedule::Constant;
    cfg.batch_size = 8;
    cfg.flip_probability = 0.0;
    cfg.snn_init_gain = 3.0;
    cfg.max_iterations = Some(200);
    cfg.epochs = 200;
    (data, cfg)
}

/// A small, quick training configuration on 32x32 synthetic data.
pub fn tiny_setup(samples: usize, seed: u64) -> (Vec<spikeflow::dataset::Sample>, TrainConfig) {
    let data =
        synthetic_dataset(&SyntheticSpec { samples, height: 32, width: 32, seed, ..SyntheticSpec::default() }).unwrap();
    let mut cfg = TrainConfig::desk(DtMode::Dt1);
    cfg.batch_size = 2;
    cfg.epochs = 2;
    cfg.lr = 1e-3;
    cfg.snn_init_gain = 3.0;
    cfg.crop_size = None;
    (data, cfg)
}

/// A random spiking block on a random input, run with the instrumented
/// forward pass. Returns per-layer `(formula, instrumented)` operation
/// counts and whether the instrumented outputs matched the dense pass.
pub fn op_count_trial(seed: u64) -> (Vec<(f64, f64)>, bool) {
    use spikeflow::eval::{count_ops, encoder_layer_ops, instrumented_encoder_forward, layer_input_rates};
    let mut r = rng(seed);
    let n_layers = r.random_range(2..=4);
    let mut layers = Vec::new();
    let mut cin = 4;
    for l in 0..n_layers {
        let k = [1, 3, 5][r.random_range(0..3)];
        let cout = r.random_range(1..=4);
        layers.push(SnnLayerSpec {
            name: format!("l{l}"),
            source: if l == 0 { Source::Input } else { Source::Layer(l - 1) },
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride: r.random_range(1..=2),
            padding: k / 2,
            shortcut: None,
            bias: false,
            fires: l + 1 < n_layers && r.random_bool(0.8),
        });
        cin = cout;
    }
    let n = r.random_range(1..=4);
    let cfg = EncoderConfig { layers, threshold: r.random_range(0.3..1.5), n_timesteps: n };
    let params = toy_params(&cfg, seed ^ 0x5eed);
    let (b, h, w) = (r.random_range(1..=3), r.random_range(6..=12), r.random_range(6..=12));
    let density = r.random_range(0.05..0.6);
    let steps: Vec<Tensor<f64>> = (0..n).map(|_| binary(&[b, 4, h, w], density, &mut r)).collect();
    let run = instrumented_encoder_forward(&steps, &params, &cfg).unwrap();
    let dense = snn::encoder_forward(&steps, &params, &cfg).unwrap();
    let same =
        run.output.accumulators.iter().zip(&dense.accumulators).all(|(a, d)| rel_err(a.data(), d.data()) < 1e-12);
    let rates = layer_input_rates(&run.output.record, &cfg).unwrap();
    let report = count_ops(&encoder_layer_ops(&cfg, h, w).unwrap(), &rates, n, 5.1, 1.0).unwrap();
    let pairs = report.layers.iter().zip(&run.counted_ops).map(|(l, &c)| (l.snn_ops, c)).collect();
    (pairs, same)
}

/// Largest relative gap between formula and instrumented counts over
/// `trials` random networks, and whether all instrumented outputs matched.
pub fn op_count_agreement(trials: u64) -> (f64, bool) {
    let mut worst: f64 = 0.0;
    let mut all_same = true;
    for t in 0..trials {
        let (pairs, same) = op_count_trial(1000 + t);
        all_same &= same;
        let formula: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let counted: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        worst = worst.max(rel_err(&formula, &counted));
        worst = worst.max(rel_err(&[formula.iter().sum()], &[counted.iter().sum()]));
    }
    (worst, all_same)
}
