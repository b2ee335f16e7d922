//! Command-line front end: similarity grids, probes, and toy training
//! runs, each writing its artifacts under a required `--out` directory.
//!
//! Every run is seeded (`--seed`, default 0) and fully deterministic, so
//! identical invocations produce byte-identical artifacts. Errors print a
//! single diagnostic line to stderr and exit nonzero; successful runs
//! print a one-line `key=value` summary to stdout.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use layerscope_core::cka::{
    self_similarity_with, similarity_matrix_with, CkaConfig, GridOptions, SimilarityMatrix,
};
use layerscope_core::actvstore::{load_activation_set, save_activation_set, ActivationSet};
use layerscope_core::pgm::render_bar_strip;
use layerscope_core::probe::{train_probe, ProbeResult, ProbeTask, ProbeTrainConfig};
use layerscope_core::toylab::dino::{train_dino_toy, DinoTrainConfig};
use layerscope_core::toylab::{gen_probe_dataset, ProbeDatasetConfig};

/// Pixel height of the contribution bar strip.
const BAR_HEIGHT_PX: usize = 48;
/// Pixel width of one contribution bar.
const BAR_CELL_PX: usize = 12;
/// Collapse verdict threshold as a fraction of `ln K`.
const COLLAPSE_FRACTION: f64 = 0.2;

#[derive(Parser)]
#[command(
    name = "layerscope",
    about = "Layer-similarity grids, weighted-sum probes, and toy training runs",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cross-model similarity grid between two activation sets.
    Cka(CkaArgs),
    /// Within-model similarity grid of one activation set.
    Selfsim(SelfsimArgs),
    /// Weighted-sum linear probe over a labeled activation set.
    Probe(ProbeArgs),
    /// Generate a planted-signal toy activation corpus plus labels.
    Toygen(ToygenArgs),
    /// Train toy self-distillation and dump its collapse trace.
    DinoDemo(DinoDemoArgs),
}

#[derive(Args)]
struct CkaArgs {
    /// Activation-set directory for the row model.
    #[arg(long)]
    acts_a: PathBuf,
    /// Activation-set directory for the column model.
    #[arg(long)]
    acts_b: PathBuf,
    /// Utterances pooled into one similarity batch.
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    /// Leave segment-level layers out of the grid instead of broadcasting
    /// them.
    #[arg(long)]
    exclude_segment_level: bool,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct SelfsimArgs {
    /// Activation-set directory.
    #[arg(long)]
    acts: PathBuf,
    /// Utterances pooled into one similarity batch.
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    /// Leave segment-level layers out of the grid instead of broadcasting
    /// them.
    #[arg(long)]
    exclude_segment_level: bool,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args)]
struct ProbeArgs {
    /// Activation-set directory.
    #[arg(long)]
    acts: PathBuf,
    /// Labels file: one `utterance_id, class` line per utterance.
    #[arg(long)]
    labels: PathBuf,
    /// Per-layer trainable projections; `off` requires homogeneous layer
    /// dims.
    #[arg(long, value_enum, default_value_t = OnOff::On)]
    projections: OnOff,
    /// Training steps.
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// Gradient-descent step size.
    #[arg(long, default_value_t = 0.5)]
    learning_rate: f64,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct ToygenArgs {
    /// Comma-separated per-layer dims, e.g. `6,8,6,10`.
    #[arg(long, default_value = "6,8,6,10")]
    layers: String,
    /// Layer carrying the class signal.
    #[arg(long, default_value_t = 0)]
    planted_layer: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 60)]
    utterances: usize,
    /// Frames per utterance.
    #[arg(long, default_value_t = 6)]
    frames: usize,
    /// Distance scale of the planted class means.
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    /// Per-frame noise standard deviation.
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct DinoDemoArgs {
    /// Training steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Gradient-descent step size.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Prototype count K.
    #[arg(long)]
    prototypes: Option<usize>,
    /// Freeze the center at zero.
    #[arg(long)]
    no_centering: bool,
    /// Run the teacher at temperature 1 instead of the sharpening
    /// temperature.
    #[arg(long)]
    no_sharpening: bool,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct CommonArgs {
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Run seed; every source of randomness derives from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Cka(args) => cmd_cka(args),
        Command::Selfsim(args) => cmd_selfsim(args),
        Command::Probe(args) => cmd_probe(args),
        Command::Toygen(args) => cmd_toygen(args),
        Command::DinoDemo(args) => cmd_dino_demo(args),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_acts(path: &Path) -> Result<ActivationSet> {
    load_activation_set(path).with_context(|| format!("loading activations from {}", path.display()))
}

/// Writes the CSV, heatmap, and metadata artifacts of one similarity grid
/// and returns the shared part of the summary line.
fn write_similarity(out: &Path, sim: &SimilarityMatrix) -> Result<String> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("similarity.csv"), sim.to_csv())
        .context("writing similarity.csv")?;
    let (image, clamp) = sim.render_heatmap();
    image
        .write_to(&out.join("similarity.pgm"))
        .context("writing similarity.pgm")?;
    fs::write(out.join("meta.txt"), sim.meta_text(Some(clamp)))
        .context("writing meta.txt")?;
    let values = sim.values();
    Ok(format!(
        "rows={} cols={} out={}",
        values.nrows(),
        values.ncols(),
        out.display()
    ))
}

fn cmd_cka(args: CkaArgs) -> Result<String> {
    let a = load_acts(&args.acts_a)?;
    let b = load_acts(&args.acts_b)?;
    let cfg = CkaConfig {
        batch_size_utterances: args.batch_size,
        ..CkaConfig::default()
    };
    let opts = GridOptions {
        include_segment_level: !args.exclude_segment_level,
    };
    let sim = similarity_matrix_with(&a, &b, &cfg, &opts)?;
    let tail = write_similarity(&args.common.out, &sim)?;
    Ok(format!(
        "model_a={} model_b={} batch_size={} seed={} {tail}",
        a.model_name(),
        b.model_name(),
        args.batch_size,
        args.common.seed
    ))
}

fn cmd_selfsim(args: SelfsimArgs) -> Result<String> {
    let a = load_acts(&args.acts)?;
    let cfg = CkaConfig {
        batch_size_utterances: args.batch_size,
        ..CkaConfig::default()
    };
    let opts = GridOptions {
        include_segment_level: !args.exclude_segment_level,
    };
    let sim = self_similarity_with(&a, &cfg, &opts)?;
    let tail = write_similarity(&args.common.out, &sim)?;
    Ok(format!(
        "model={} batch_size={} seed={} {tail}",
        a.model_name(),
        args.batch_size,
        args.common.seed
    ))
}

/// Parses `utterance_id, class` lines into per-utterance labels ordered
/// like `ids`.
fn parse_labels(text: &str, ids: &[String], path: &Path) -> Result<Vec<usize>> {
    let mut by_id = std::collections::HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (id, class) = line.split_once(',').with_context(|| {
            format!("{}:{}: expected `utterance_id, class`", path.display(), lineno + 1)
        })?;
        let id = id.trim();
        let class: usize = class.trim().parse().with_context(|| {
            format!("{}:{}: class is not a nonnegative integer", path.display(), lineno + 1)
        })?;
        if by_id.insert(id.to_string(), class).is_some() {
            bail!("{}:{}: duplicate utterance id {id:?}", path.display(), lineno + 1);
        }
    }
    let mut labels = Vec::with_capacity(ids.len());
    for id in ids {
        match by_id.remove(id) {
            Some(class) => labels.push(class),
            None => bail!("{}: no label for utterance {id:?}", path.display()),
        }
    }
    if let Some(extra) = by_id.keys().next() {
        bail!(
            "{}: label for unknown utterance {extra:?} ({} unmatched in total)",
            path.display(),
            by_id.len()
        );
    }
    Ok(labels)
}

fn write_probe_report(
    out: &Path,
    args: &ProbeArgs,
    task_layers: usize,
    utterances: usize,
    num_classes: usize,
    result: &ProbeResult,
    argmax: usize,
) -> Result<()> {
    let weights = result.combiner.weights();
    let mut report = String::new();
    let _ = writeln!(report, "task=utterance-classification");
    let _ = writeln!(report, "acts={}", args.acts.display());
    let _ = writeln!(report, "utterances={utterances}");
    let _ = writeln!(report, "layers={task_layers}");
    let _ = writeln!(report, "classes={num_classes}");
    let _ = writeln!(
        report,
        "projections={}",
        if args.projections == OnOff::On { "on" } else { "off" }
    );
    let _ = writeln!(report, "steps={}", args.steps);
    let _ = writeln!(report, "learning_rate={}", args.learning_rate);
    let _ = writeln!(report, "seed={}", args.common.seed);
    let _ = writeln!(report, "accuracy={}", result.accuracy);
    let _ = writeln!(report, "argmax_layer={argmax}");
    let _ = writeln!(report, "final_loss={}", result.loss_trace.last().copied().unwrap_or(f64::NAN));
    let _ = writeln!(report);
    let _ = writeln!(report, "layer softmax_weight contribution");
    for l in 0..task_layers {
        let _ = writeln!(report, "{l} {} {}", weights[l], result.contribution[l]);
    }
    fs::write(out.join("probe_report.txt"), report).context("writing probe_report.txt")?;

    // Softmax weights are already in [0,1]; contributions are scaled by
    // their maximum so the strip stays in bar range.
    let mut contrib_csv = String::from("layer,softmax_weight,contribution\n");
    for l in 0..task_layers {
        let _ = writeln!(contrib_csv, "{l},{},{}", weights[l], result.contribution[l]);
    }
    fs::write(out.join("contrib.csv"), contrib_csv).context("writing contrib.csv")?;

    let peak = result
        .contribution
        .iter()
        .fold(0.0f64, |m, v| m.max(*v))
        .max(f64::MIN_POSITIVE);
    let bars: Vec<f64> = result.contribution.iter().map(|v| v / peak).collect();
    let (image, _) = render_bar_strip(&bars, BAR_CELL_PX, BAR_HEIGHT_PX);
    image
        .write_to(&out.join("contrib.pgm"))
        .context("writing contrib.pgm")?;
    Ok(())
}

fn cmd_probe(args: ProbeArgs) -> Result<String> {
    let set = load_acts(&args.acts)?;
    let text = fs::read_to_string(&args.labels)
        .with_context(|| format!("reading labels from {}", args.labels.display()))?;
    let labels = parse_labels(&text, set.utterance_ids(), &args.labels)?;
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let utterances = set.num_utterances();
    let task = ProbeTask::utterance_classification(set, labels, num_classes)?;
    let cfg = ProbeTrainConfig {
        steps: args.steps,
        learning_rate: args.learning_rate,
        use_projections: args.projections == OnOff::On,
        ..ProbeTrainConfig::default()
    };
    let result = train_probe(&task, &cfg, args.common.seed)?;
    let argmax = result
        .contribution
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite contribution scores"))
        .expect("at least one layer")
        .0;

    let out = &args.common.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let layers = result.contribution.len();
    write_probe_report(out, &args, layers, utterances, num_classes, &result, argmax)?;
    Ok(format!(
        "accuracy={} argmax_layer={argmax} layers={layers} seed={} out={}",
        result.accuracy,
        args.common.seed,
        out.display()
    ))
}

fn cmd_toygen(args: ToygenArgs) -> Result<String> {
    let dims: Vec<usize> = args
        .layers
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .with_context(|| format!("bad layer dim {part:?} in --layers"))
        })
        .collect::<Result<_>>()?;
    let cfg = ProbeDatasetConfig {
        dims,
        planted_layer: args.planted_layer,
        classes: args.classes,
        utterances: args.utterances,
        frames: args.frames,
        separation: args.separation,
        noise: args.noise,
    };
    let (set, labels) = gen_probe_dataset(&cfg, args.common.seed)?;
    let out = &args.common.out;
    save_activation_set(&set, out)
        .with_context(|| format!("writing activation set to {}", out.display()))?;
    let mut label_text = String::new();
    for (id, class) in set.utterance_ids().iter().zip(&labels) {
        let _ = writeln!(label_text, "{id}, {class}");
    }
    fs::write(out.join("labels.csv"), label_text).context("writing labels.csv")?;
    Ok(format!(
        "model={} layers={} utterances={} classes={} planted_layer={} seed={} out={}",
        set.model_name(),
        set.num_layers(),
        args.utterances,
        args.classes,
        args.planted_layer,
        args.common.seed,
        out.display()
    ))
}

fn cmd_dino_demo(args: DinoDemoArgs) -> Result<String> {
    let mut cfg = DinoTrainConfig {
        centering: !args.no_centering,
        sharpening: !args.no_sharpening,
        ..DinoTrainConfig::default()
    };
    if let Some(steps) = args.steps {
        cfg.steps = steps;
    }
    if let Some(lr) = args.learning_rate {
        cfg.learning_rate = lr;
    }
    if let Some(k) = args.prototypes {
        cfg.prototypes = k;
    }
    let state = train_dino_toy(&cfg, args.common.seed)?;

    let out = &args.common.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut trace_csv = String::from("step,entropy\n");
    for (step, entropy) in state.collapse_trace.iter().enumerate() {
        let _ = writeln!(trace_csv, "{step},{entropy}");
    }
    fs::write(out.join("collapse_trace.csv"), trace_csv).context("writing collapse_trace.csv")?;

    let ln_k = (cfg.prototypes as f64).ln();
    let final_entropy = state.collapse_trace.last().copied().unwrap_or(f64::NAN);
    Ok(format!(
        "final_entropy={final_entropy} ln_k={ln_k} collapse_threshold={} collapsed={} \
         prototypes={} steps={} centering={} sharpening={} seed={} out={}",
        COLLAPSE_FRACTION * ln_k,
        final_entropy < COLLAPSE_FRACTION * ln_k,
        cfg.prototypes,
        cfg.steps,
        if cfg.centering { "on" } else { "off" },
        if cfg.sharpening { "on" } else { "off" },
        args.common.seed,
        out.display()
    ))
}
