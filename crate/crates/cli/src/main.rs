use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spikeflow::checkpoint::{hex, read_checkpoint};
use spikeflow::dataset::{load_dataset, random_texture, synthetic_dataset, write_sample, Sample, SyntheticSpec};
use spikeflow::eval::{
    aee, evaluate, ops_json, reference_geometry_ops, valid_flow_mask, write_reports, OpCountReport,
    DEFAULT_ENERGY_RATIO,
};
use spikeflow::events::{encode_spike_input, read_event_file, synthesize_events, CHANNELS};
use spikeflow::flow::read_flow_file;
use spikeflow::formats::{read_pgm, write_pgm};
use spikeflow::trainer::{train, DtMode, TrainConfig};
use spikeflow::{Error, Result};

/// Hybrid spiking/analog optical flow for event cameras.
#[derive(Parser, Debug)]
#[command(name = "spikeflow", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate an event camera watching a translating texture.
    Synth(SynthArgs),
    /// Encode an event file into binary spike frames.
    Encode(EncodeArgs),
    /// Train a network on a dataset directory.
    Train(TrainArgs),
    /// Report masked endpoint error of a checkpoint.
    Eval(EvalArgs),
    /// Report spike activity and synaptic-operation energy of a checkpoint.
    Energy(EnergyArgs),
    /// Print the header and parameters of a checkpoint.
    InspectCheckpoint(InspectArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// 8-bit PGM texture; random textures are generated when omitted.
    #[arg(long)]
    texture: Option<PathBuf>,
    /// Horizontal flow in pixels per window (random when omitted).
    #[arg(long, allow_hyphen_values = true)]
    flow_u: Option<f64>,
    /// Vertical flow in pixels per window (random when omitted).
    #[arg(long, allow_hyphen_values = true)]
    flow_v: Option<f64>,
    /// Log-intensity contrast threshold.
    #[arg(long, default_value_t = 0.15)]
    theta: f64,
    /// Simulation sub-steps per window.
    #[arg(long, default_value_t = 20)]
    steps: usize,
    /// Window length in microseconds.
    #[arg(long, default_value_t = 10_000)]
    window_us: u64,
    /// Number of samples to write.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Side length of random textures.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Largest random flow magnitude in pixels.
    #[arg(long, default_value_t = 3.0)]
    max_flow: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset directory; one subdirectory per sample.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[arg(long)]
    events: PathBuf,
    /// Frames per half window.
    #[arg(long, default_value_t = 5)]
    frames: usize,
    /// Window start in microseconds (default: first event).
    #[arg(long)]
    t_start: Option<u64>,
    /// Window end in microseconds (default: last event).
    #[arg(long)]
    t_end: Option<u64>,
    /// Write one PGM per frame and channel here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training config (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    data_dir: PathBuf,
    /// Config the checkpoint was trained with.
    #[arg(long)]
    config: Option<PathBuf>,
    /// dt1 or dt4; selects desk defaults when no config is given.
    #[arg(long)]
    dt_mode: Option<String>,
    /// Energy of a MAC relative to an AC.
    #[arg(long, default_value_t = DEFAULT_ENERGY_RATIO)]
    energy_ratio: f64,
    /// Write reports here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, required_unless_present = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Score stored predictions (`<sample>.flo`) instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    predictions: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Flow magnitude mapped to full brightness in visualisations.
    #[arg(long, default_value_t = 4.0)]
    max_magnitude: f64,
}

#[derive(Args, Debug)]
struct EnergyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Verify the checkpoint digest against this config.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    TrainConfig::parse(&fs::read_to_string(path)?)
}

fn model_config(m: &ModelArgs) -> Result<TrainConfig> {
    let mode: Option<DtMode> = m.dt_mode.as_deref().map(str::parse).transpose()?;
    match (&m.config, mode) {
        (Some(path), mode) => {
            let cfg = read_config(path)?;
            if mode.is_some_and(|d| d != cfg.dt_mode) {
                return Err(Error::Config { key: "dt_mode".into(), detail: "conflicts with the config file".into() });
            }
            Ok(cfg)
        }
        (None, mode) => Ok(TrainConfig::desk(mode.unwrap_or(DtMode::Dt1))),
    }
}

fn synth(a: &SynthArgs) -> Result<()> {
    let samples: Vec<Sample> = match (&a.texture, a.flow_u, a.flow_v) {
        (texture, Some(u), Some(v)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let mut out = Vec::new();
            for i in 0..a.count {
                let tex = match texture {
                    Some(p) => read_pgm(p)?,
                    None => random_texture(a.size, a.size, 4, &mut rng),
                };
                let window = (0, a.window_us);
                let s = synthesize_events(&tex, (u, v), window, a.theta, a.steps)?;
                out.push(Sample {
                    name: format!("sample{i:04}"),
                    events: s.events,
                    images: s.images,
                    flow: Some(s.flow),
                    window,
                });
            }
            out
        }
        (None, None, None) => synthetic_dataset(&SyntheticSpec {
            samples: a.count,
            height: a.size,
            width: a.size,
            max_flow: a.max_flow,
            threshold: a.theta,
            substeps: a.steps,
            window_us: a.window_us,
            seed: a.seed,
        })?,
        _ => return Err(Error::Contract("give both --flow-u and --flow-v (required with --texture)".into())),
    };
    for s in &samples {
        write_sample(a.out_dir.join(&s.name), s)?;
        println!("{}: {} events", s.name, s.events.len());
    }
    Ok(())
}

fn encode(a: &EncodeArgs) -> Result<()> {
    let stream = read_event_file(&a.events)?;
    let first = stream.events().first().map_or(0, |e| e.t);
    let last = stream.events().last().map_or(1, |e| e.t);
    let window = (a.t_start.unwrap_or(first), a.t_end.unwrap_or(last.max(first + 1)));
    let seq = encode_spike_input::<f64>(&stream, window, a.frames)?;
    println!("window {}..{} us, {} frames of {}x{}", window.0, window.1, a.frames, seq.width(), seq.height());
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir)?;
    }
    for n in 0..a.frames {
        let step = seq.step(n)?;
        let counts: Vec<String> = (0..4)
            .map(|c| step.channel(c).map(|t| format!("{}={}", CHANNELS[c], t.count_nonzero())))
            .collect::<Result<_>>()?;
        println!("frame {n}: {}", counts.join(" "));
        if let Some(dir) = &a.out_dir {
            for (c, name) in CHANNELS.iter().enumerate() {
                write_pgm(dir.join(format!("frame{n}_{name}.pgm")), &step.channel(c)?)?;
            }
        }
    }
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut cfg = read_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let samples = load_dataset(&a.data_dir)?;
    let summary = train(&samples, &cfg, &a.out_dir)?;
    println!(
        "trained {} iterations over {} epochs; final loss {:.6e}; checkpoint {}",
        summary.state.iteration,
        summary.state.epoch,
        summary.final_loss,
        summary.final_checkpoint.display()
    );
    Ok(())
}

fn print_ops(ops: &OpCountReport) {
    for l in &ops.layers {
        println!(
            "layer {}: neurons {} fan_out {} input_rate {:.6} snn_ops {:.6e} ann_ops {:.6e}",
            l.name, l.neurons, l.fan_out, l.input_rate, l.snn_ops, l.ann_ops
        );
    }
    println!("snn ops {:.6e} ann ops {:.6e}", ops.snn_total_ops, ops.ann_equivalent_ops);
    println!("normalized ops {:.3}%", ops.normalized_ops_percent);
    match ops.encoder_energy_benefit {
        Some(b) => println!("encoder energy benefit {b:.3}x at MAC/AC ratio {}", ops.energy_ratio),
        None => println!("encoder energy benefit unbounded (no spiking operations)"),
    }
    println!("overall energy reduction {:.3}%", ops.overall_energy_reduction_percent);
}

/// AEE of stored flow files against each sample's ground truth.
fn eval_predictions(dir: &Path, samples: &[Sample], cfg: &TrainConfig) -> Result<()> {
    let (mut sum, mut count) = (0.0, 0);
    for s in samples {
        let p = s.prepare(cfg.n_frames)?;
        let pred = read_flow_file(dir.join(format!("{}.flo", s.name)))?;
        let Some(gt) = &s.flow else {
            println!("{}: no ground truth", s.name);
            continue;
        };
        let r = aee(&pred, gt, &p.event_mask(), &valid_flow_mask(gt))?;
        println!("{}: aee {:.3} over {} pixels", s.name, r.aee, r.masked_pixels);
        sum += r.aee * r.masked_pixels as f64;
        count += r.masked_pixels;
    }
    println!("aee {:.3} masked_pixels {count}", if count == 0 { 0.0 } else { sum / count as f64 });
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let cfg = model_config(&a.model)?;
    let samples = load_dataset(&a.model.data_dir)?;
    let checkpoint = match (&a.predictions, &a.checkpoint) {
        (Some(dir), _) => return eval_predictions(dir, &samples, &cfg),
        (None, Some(c)) => c,
        (None, None) => return Err(Error::Contract("give --checkpoint or --predictions".into())),
    };
    let report = evaluate(checkpoint, &samples, &cfg, a.model.energy_ratio)?;
    for s in &report.samples {
        match &s.aee {
            Some(r) => println!("{}: aee {:.3} over {} pixels", s.name, r.aee, r.masked_pixels),
            None => println!("{}: no ground truth", s.name),
        }
    }
    match &report.aee {
        Some(r) => println!("aee {:.3} masked_pixels {}", r.aee, r.masked_pixels),
        None => println!("aee n/a"),
    }
    if let Some(dir) = &a.model.out_dir {
        write_reports(&report, dir, a.max_magnitude)?;
    }
    Ok(())
}

fn energy_cmd(a: &EnergyArgs) -> Result<()> {
    let cfg = model_config(&a.model)?;
    let samples = load_dataset(&a.model.data_dir)?;
    let report = evaluate(&a.checkpoint, &samples, &cfg, a.model.energy_ratio)?;
    for (name, rate) in &report.spike_rates {
        println!("spike activity {name}: {:.3}%", 100.0 * rate);
    }
    print_ops(&report.ops);
    let (enc, total) = reference_geometry_ops()?;
    println!("reference geometry at 256x256: encoder {enc:.4e} ops, network {total:.4e} ops");
    if let Some(dir) = &a.model.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("energy.json"), ops_json(&report.ops)?)?;
    }
    Ok(())
}

fn inspect(a: &InspectArgs) -> Result<()> {
    let ck = read_checkpoint(&a.checkpoint)?;
    println!("digest {}", hex(&ck.digest));
    if let Some(path) = &a.config {
        let expected = read_config(path)?.network().digest();
        if expected != ck.digest {
            return Err(Error::Checkpoint(format!("digest does not match config (expected {})", hex(&expected))));
        }
        println!("digest matches config");
    }
    for (name, t) in ck.params.iter() {
        println!("{name} {:?}", t.shape());
    }
    println!("{} tensors, {} values", ck.params.len(), ck.params.num_elements());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Encode(a) => encode(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Energy(a) => energy_cmd(a),
        Command::InspectCheckpoint(a) => inspect(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io_or_format() { 2 } else { 1 })
        }
    }
}
