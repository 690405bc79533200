//! `rmfn`: generate the synthetic lesion dataset, train and evaluate
//! region-fused classifiers, validate grid geometry, and export heatmap
//! overlays. Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use config::{Overrides, RunConfig};
use rmfn_core::metrics::MetricsReport;
use rmfn_core::model::{build_model, RmfnVariant};
use rmfn_core::region::{validate_overlap, GridSpec, OverlapCheck};
use rmfn_core::synth::{self, Split, MANIFEST_NAME};
use rmfn_core::tensor::Tensor;
use rmfn_core::train::{evaluate, train, write_trace};
use rmfn_core::{checkpoint, heatmap, pgm};

#[derive(Parser)]
#[command(name = "rmfn", version, about = "Region-fused classifier toolkit")]
struct Cli {
    /// run configuration file (TOML); defaults apply when omitted
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// override both the dataset seed and the training seed
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// model variant: original, a, b or c
    #[arg(long, global = true)]
    variant: Option<String>,
    /// width multiplier for conv and hidden FC layers
    #[arg(long, global = true, value_name = "F")]
    channel_scale: Option<f64>,
    #[arg(long, global = true, value_name = "N")]
    epochs: Option<usize>,
    /// minibatch size
    #[arg(long, global = true, value_name = "N")]
    batch: Option<usize>,
    /// output directory for run artifacts
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic dataset and its manifest to the dataset dir
    Gen,
    /// Train a model on a generated dataset; writes trace and checkpoint
    Train,
    /// Score the checkpoint on the test split and print a metrics table
    Eval,
    /// Report grid-closure residuals, divisibility and slice tables
    CheckGeometry {
        /// scale-1 grid count (regions per axis)
        g1: usize,
        /// scale-1 region side in pixels
        l1: usize,
        /// scale-2 grid count
        g2: usize,
        /// scale-2 region side in pixels
        l2: usize,
        /// scale-2 overlap in pixels (scale 1 never overlaps)
        epsilon: usize,
        /// input image side in pixels
        l0: usize,
    },
    /// Blend a trained model's attention over one image into a PGM overlay
    Heatmap {
        /// input image (PGM, must match the checkpoint's input side)
        image: PathBuf,
        /// blend weight of the heatmap against the image
        #[arg(long, default_value_t = 0.5)]
        weight: f64,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprint!("{e}");
            return 1;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: usage: {msg}");
            1
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: runtime: {msg}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    if let Cmd::CheckGeometry { g1, l1, g2, l2, epsilon, l0 } = cli.cmd {
        return cmd_check_geometry(g1, l1, g2, l2, epsilon, l0);
    }

    let overrides = Overrides {
        seed: cli.seed,
        variant: cli.variant,
        channel_scale: cli.channel_scale,
        epochs: cli.epochs,
        batch: cli.batch,
        out: cli.out,
    };
    let config = RunConfig::load(cli.config.as_deref(), &overrides).map_err(Failure::Usage)?;

    let out_dir = config.paths.out_dir.clone();
    std::fs::create_dir_all(&out_dir).map_err(runtime)?;
    let _out_lock = Lock::acquire(&out_dir)?;
    let _data_lock = match cli.cmd {
        Cmd::Gen if config.paths.dataset_dir != out_dir => {
            std::fs::create_dir_all(&config.paths.dataset_dir).map_err(runtime)?;
            Some(Lock::acquire(&config.paths.dataset_dir)?)
        }
        _ => None,
    };
    config.echo(&out_dir).map_err(runtime)?;

    let (verb, result) = match cli.cmd {
        Cmd::Gen => ("gen", cmd_gen(&config)),
        Cmd::Train => ("train", cmd_train(&config)),
        Cmd::Eval => ("eval", cmd_eval(&config)),
        Cmd::Heatmap { ref image, weight } => ("heatmap", cmd_heatmap(&config, image, weight)),
        Cmd::CheckGeometry { .. } => unreachable!("handled above"),
    };
    match &result {
        Ok(()) => log_line(&out_dir, &format!("{verb}: ok")),
        Err(Failure::Usage(m)) | Err(Failure::Runtime(m)) => {
            log_line(&out_dir, &format!("{verb}: FAILED, outputs may be partial: {m}"));
        }
    }
    result
}

/// Guards an output directory against concurrent runs. The file is
/// removed on drop; a crash can leave it behind, in which case the error
/// names the path to delete.
struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Lock, Failure> {
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Lock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Failure::Runtime(
                format!(
                    "{} exists: another run is using this directory (delete the file if that run is dead)",
                    path.display()
                ),
            )),
            Err(e) => Err(runtime(format!("cannot lock {}: {e}", path.display()))),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

/// Timestamps live only here so every other artifact is byte-reproducible.
fn log_line(out_dir: &Path, msg: &str) {
    let ts = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    if let Ok(mut f) = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join("run.log"))
    {
        let _ = writeln!(f, "[{ts}] {msg}");
    }
}

fn variant_label(variant: RmfnVariant) -> &'static str {
    match variant {
        RmfnVariant::Original => "original",
        RmfnVariant::A => "rmfn_a",
        RmfnVariant::B => "rmfn_b",
        RmfnVariant::C => "rmfn_c",
    }
}

fn cmd_gen(config: &RunConfig) -> Result<(), Failure> {
    let manifest = synth::generate(&config.dataset, &config.paths.dataset_dir).map_err(runtime)?;
    println!(
        "wrote {} images ({} per class, side {}) to {}",
        manifest.entries.len(),
        config.dataset.n_per_class,
        config.dataset.image_side,
        config.paths.dataset_dir.display()
    );
    Ok(())
}

fn load_dataset(config: &RunConfig) -> Result<synth::Dataset, Failure> {
    let data = synth::load(&config.paths.dataset_dir.join(MANIFEST_NAME)).map_err(runtime)?;
    if data.image_side() != config.dataset.image_side {
        return Err(Failure::Runtime(format!(
            "dataset at {} has side {}, config expects {}",
            config.paths.dataset_dir.display(),
            data.image_side(),
            config.dataset.image_side
        )));
    }
    Ok(data)
}

fn cmd_train(config: &RunConfig) -> Result<(), Failure> {
    let data = load_dataset(config)?;
    let model_config = config.model_config().map_err(Failure::Usage)?;
    let mut model = build_model(&model_config, config.training.seed).map_err(runtime)?;
    println!(
        "training {} at side {}, {} parameters, {} epochs",
        variant_label(model_config.variant),
        model_config.input_side,
        model.params.num_values(),
        config.training.epochs
    );
    let stats = train(&mut model, &data, &config.training, |s| {
        println!(
            "epoch {:3}: loss {:.4}, train acc {:.3}, test acc {:.3}",
            s.epoch, s.train_loss, s.train_acc, s.test_acc
        );
    })
    .map_err(runtime)?;

    let trace = config.paths.out_dir.join("trace.tsv");
    write_trace(&trace, &stats).map_err(runtime)?;
    checkpoint::save(&model, config.checkpoint_path()).map_err(runtime)?;
    println!(
        "wrote {} and {}",
        trace.display(),
        config.checkpoint_path().display()
    );
    Ok(())
}

fn percent(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:.2}", v * 100.0),
        None => "n/a".into(),
    }
}

fn cmd_eval(config: &RunConfig) -> Result<(), Failure> {
    let data = load_dataset(config)?;
    let model = checkpoint::load(config.checkpoint_path()).map_err(runtime)?;
    if model.config.input_side != data.image_side() {
        return Err(Failure::Runtime(format!(
            "checkpoint expects side {}, dataset has side {}",
            model.config.input_side,
            data.image_side()
        )));
    }
    let report = evaluate(&model, &data, Split::Test).map_err(runtime)?;
    print_metrics_table(variant_label(model.config.variant), &report);
    let path = config.paths.out_dir.join("metrics.txt");
    std::fs::write(&path, report.to_text()).map_err(runtime)?;
    Ok(())
}

fn print_metrics_table(label: &str, report: &MetricsReport) {
    println!(
        "{:<10} {:>12} {:>10} {:>8} {:>12}",
        "model", "precision(%)", "recall(%)", "F1(%)", "accuracy(%)"
    );
    println!(
        "{:<10} {:>12} {:>10} {:>8} {:>12}",
        label,
        percent(report.precision),
        percent(report.recall),
        percent(report.f1),
        percent(report.accuracy)
    );
}

fn cmd_heatmap(config: &RunConfig, image: &Path, weight: f64) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(Failure::Usage(format!(
            "--weight must be in [0, 1], got {weight}"
        )));
    }
    let model = checkpoint::load(config.checkpoint_path()).map_err(runtime)?;
    let side = model.config.input_side;
    let (w, h, pixels) = pgm::read_pgm(image).map_err(runtime)?;
    if w != side || h != side {
        return Err(Failure::Runtime(format!(
            "{} is {w}x{h}, checkpoint expects {side}x{side}",
            image.display()
        )));
    }
    let values: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let tensor = Tensor::from_vec(&[1, side, side], values).map_err(runtime)?;
    let heat = heatmap::render(&model, &tensor).map_err(runtime)?;
    let blended = heatmap::overlay(&pixels, &heat, weight).map_err(runtime)?;

    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let out = config.paths.out_dir.join(format!("{stem}-heatmap.pgm"));
    pgm::write_pgm(&out, side, side, &blended).map_err(runtime)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_check_geometry(
    g1: usize,
    l1: usize,
    g2: usize,
    l2: usize,
    epsilon: usize,
    l0: usize,
) -> Result<(), Failure> {
    for (name, v) in [("G1", g1), ("L1", l1), ("G2", g2), ("L2", l2), ("L0", l0)] {
        if v == 0 {
            return Err(Failure::Usage(format!("{name} must be a positive integer")));
        }
    }
    println!("input side {l0}");
    scale_report(1, g1, l1, 0, l0, 2);
    scale_report(2, g2, l2, epsilon, l0, 4);
    Ok(())
}

/// One scale's report: closure residual, divisibility by the feature
/// divisor, and the per-region feature-slice table when both hold.
fn scale_report(which: usize, g: usize, l: usize, eps: usize, l0: usize, d: usize) {
    match validate_overlap(g, l, eps, l0) {
        OverlapCheck::Valid => println!(
            "scale {which}: {g}x{g} regions of side {l}, overlap {eps} -> residual 0 (valid)"
        ),
        OverlapCheck::Residual(r) => println!(
            "scale {which}: {g}x{g} regions of side {l}, overlap {eps} -> residual {r} (invalid)"
        ),
    }
    if eps >= l && g > 1 {
        println!("  divisibility by {d}: overlap {eps} >= region side {l}, no valid stride");
        return;
    }
    let stride = l - eps;
    println!(
        "  divisibility by {d}: region side {l} % {d} = {}, stride {stride} % {d} = {}, input {l0} % {d} = {}",
        l % d,
        stride % d,
        l0 % d
    );
    let spec = GridSpec::new(g, l, eps, l0, d);
    match spec.validate() {
        Ok(()) => {
            let starts: Vec<String> = (0..g).map(|m| (m * stride / d).to_string()).collect();
            println!(
                "  feature map side {}: slice length {}, row starts {}",
                spec.fm_side(),
                spec.slice_len(),
                starts.join(",")
            );
        }
        Err(e) => println!("  no slice table: {e}"),
    }
}
