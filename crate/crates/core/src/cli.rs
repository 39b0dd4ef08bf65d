//! Command-line front end. [`run`] returns the process exit code.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{RunConfig, ABLATION_KEYS};
use crate::databench::{read_dataset, write_dataset, DatasetPlan, Split, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::imaging::pnm::{encode_pgm, quantize, write_pgm, write_ppm};
use crate::io::{create_dir, write_atomic};
use crate::model::checkpoint::Checkpoint;
use crate::model::predict;
use crate::pseudo::{thresholds, ClassPriorState};
use crate::sampler::SamplerState;
use crate::tensor::Tensor;
use crate::trainer::{self, adapt, evaluate, pretrain_abn, EvalReport, RunOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const EVAL_CSV: &str = "eval.csv";
pub const THRESHOLD_CSV: &str = "threshold_curve.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const CONFIG_TXT: &str = "config.txt";

pub const SWEEP_ZETA: [f64; 3] = [0.7, 0.75, 0.8];
pub const SWEEP_BETA: [f64; 3] = [1e-4, 1e-3, 1e-2];

/// Upper end of the sampled prior range of the threshold curve.
pub const CURVE_CHI_MAX: f64 = 0.05;
pub const CURVE_STEPS: usize = 500;

#[derive(Parser, Debug)]
#[command(name = "shiftseg", version, about = "Self-training domain adaptation for semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the ShiftShapes benchmark.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised source training with target batch-norm statistics.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-supervised adaptation from a pretrained checkpoint.
    Adapt {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, required_unless_present = "list_ablations")]
        data: Option<PathBuf>,
        #[arg(long, required_unless_present = "list_ablations")]
        checkpoint: Option<PathBuf>,
        #[arg(long, required_unless_present = "list_ablations")]
        out: Option<PathBuf>,
        /// Print the ablation flags and exit.
        #[arg(long)]
        list_ablations: bool,
    },
    /// Per-class IoU of a checkpoint on a labeled split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// source, target or target_val.
        #[arg(long, default_value = "target_val")]
        split: String,
    },
    /// Threshold curve samples and optional prediction dumps.
    Inspect {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        data: Option<PathBuf>,
        /// Number of validation images to dump.
        #[arg(long, default_value_t = 4)]
        dump: usize,
    },
    /// Adaptation over the zeta x beta grid.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.merge_text(&text, &path.display().to_string())?;
    }
    for assignment in &args.set {
        cfg.apply_override(assignment)?;
    }
    cfg.finalize()?;
    Ok(cfg)
}

fn save_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    create_dir(out)?;
    write_atomic(&out.join(CONFIG_TXT), cfg.to_text().as_bytes())
}

fn parse_split(name: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|s| s.dir_name() == name)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown split `{name}`")))
}

pub fn class_names(k: usize) -> Vec<String> {
    if k == CLASS_NAMES.len() {
        CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..k).map(|c| format!("class_{c}")).collect()
    }
}

/// One header row of class names plus `mIoU`, then one row of values; classes
/// absent from both prediction and ground truth are left blank.
pub fn eval_csv(report: &EvalReport) -> String {
    let mut out = class_names(report.iou.len()).join(",");
    out.push_str(",mIoU\n");
    for v in &report.iou {
        if let Some(v) = v {
            let _ = write!(out, "{v}");
        }
        out.push(',');
    }
    let _ = writeln!(out, "{}", report.miou);
    out
}

/// `θ/m*` for a single class as its prior sweeps `[0, CURVE_CHI_MAX]`.
pub fn threshold_curve(zeta: f64, beta: f64) -> Vec<(f64, f64)> {
    (0..=CURVE_STEPS)
        .map(|i| {
            let chi = CURVE_CHI_MAX * i as f64 / CURVE_STEPS as f64;
            let state = ClassPriorState::with_chi(vec![chi], 0.0, beta, zeta);
            (chi, thresholds(&state, &[1.0])[0])
        })
        .collect()
}

fn threshold_csv(curve: &[(f64, f64)]) -> String {
    let mut out = String::from("chi,theta_over_peak\n");
    for (chi, t) in curve {
        let _ = writeln!(out, "{chi},{t}");
    }
    out
}

fn load_trained(path: &Path, cfg: &RunConfig) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.params.num_classes() != cfg.num_classes {
        return Err(Error::format(
            path,
            format!(
                "checkpoint has {} classes, config {}",
                ckpt.params.num_classes(),
                cfg.num_classes
            ),
        ));
    }
    Ok(ckpt)
}

fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let plan = DatasetPlan {
        height: cfg.image_h,
        width: cfg.image_w,
        base_seed: cfg.seed,
        source_count: cfg.source_count,
        target_count: cfg.target_count,
        val_count: cfg.val_count,
    };
    let manifest = write_dataset(out, &plan)?;
    save_config(out, cfg)?;
    println!("wrote {} images to {}", manifest.len(), out.display());
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let source = read_dataset(data, Split::Source)?;
    let target = read_dataset(data, Split::Target)?;
    let val = read_dataset(data, Split::TargetVal)?;
    save_config(out, cfg)?;
    let opts = RunOptions {
        out_dir: Some(out),
        val: (!val.is_empty()).then_some(&val),
        ..Default::default()
    };
    let trained = pretrain_abn(cfg, &source, &target, opts)?;
    if let Some(m) = trained.metrics.last().and_then(|r| r.miou_val) {
        println!("target mIoU {m:.4}");
    }
    Ok(())
}

fn run_adapt(cfg: &RunConfig, data: &Path, checkpoint: &Path, out: &Path) -> Result<f64> {
    let source = read_dataset(data, Split::Source)?;
    let target = read_dataset(data, Split::Target)?;
    let val = read_dataset(data, Split::TargetVal)?;
    let ckpt = load_trained(checkpoint, cfg)?;
    save_config(out, cfg)?;
    let sidecar = checkpoint.with_file_name(trainer::SAMPLER_SIDECAR);
    let sampler = if sidecar.exists() && !cfg.ablation.no_importance_sampling {
        Some(SamplerState::load(&sidecar)?)
    } else {
        None
    };
    let opts = RunOptions {
        out_dir: Some(out),
        val: (!val.is_empty()).then_some(&val),
        ..Default::default()
    };
    let state = adapt(cfg, (&ckpt.params, &ckpt.bn), &source, &target, sampler, opts)?;
    let miou = if val.is_empty() {
        f64::NAN
    } else {
        evaluate(&state.phi, &state.bn_phi, &val)?.miou
    };
    Ok(miou)
}

fn cmd_eval(cfg: &RunConfig, data: &Path, checkpoint: &Path, out: &Path, split: &str) -> Result<()> {
    let split = parse_split(split)?;
    let set = read_dataset(data, split)?;
    if set.is_empty() {
        return Err(Error::InvalidArgument(format!("split `{}` is empty", split.dir_name())));
    }
    let ckpt = load_trained(checkpoint, cfg)?;
    let report = evaluate(&ckpt.params, &ckpt.bn, &set)?;
    create_dir(out)?;
    let csv = eval_csv(&report);
    write_atomic(&out.join(EVAL_CSV), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn cmd_inspect(cfg: &RunConfig, out: &Path, model: Option<(&Path, &Path)>, dump: usize) -> Result<()> {
    create_dir(out)?;
    let curve = threshold_curve(cfg.zeta, cfg.beta);
    write_atomic(&out.join(THRESHOLD_CSV), threshold_csv(&curve).as_bytes())?;
    let Some((checkpoint, data)) = model else {
        return Ok(());
    };
    let ckpt = load_trained(checkpoint, cfg)?;
    let val = read_dataset(data, Split::TargetVal)?;
    for (i, (img, gt)) in val.images.iter().zip(&val.labels).take(dump).enumerate() {
        let batch = Tensor::new(vec![1, 3, img.height(), img.width()], img.data().to_vec())?;
        let map = predict(&ckpt.params, &ckpt.bn, &batch)?.remove(0);
        let (h, w) = (map.height(), map.width());
        let labels: Vec<u8> = (0..map.pixels()).map(|p| map.argmax(p) as u8).collect();
        write_ppm(&out.join(format!("{i:03}_input.ppm")), img)?;
        write_pgm(&out.join(format!("{i:03}_truth.pgm")), gt)?;
        write_atomic(&out.join(format!("{i:03}_pred.pgm")), &encode_pgm(w, h, &labels))?;
        for (c, name) in class_names(map.num_classes()).iter().enumerate() {
            let probs: Vec<u8> = map.plane(c).iter().map(|&p| quantize(p)).collect();
            write_atomic(&out.join(format!("{i:03}_prob_{name}.pgm")), &encode_pgm(w, h, &probs))?;
        }
    }
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, data: &Path, checkpoint: &Path, out: &Path) -> Result<()> {
    create_dir(out)?;
    let mut csv = String::from("zeta");
    for b in SWEEP_BETA {
        let _ = write!(csv, ",beta={b}");
    }
    csv.push('\n');
    for z in SWEEP_ZETA {
        let _ = write!(csv, "{z}");
        for b in SWEEP_BETA {
            let mut cell = cfg.clone();
            cell.zeta = z;
            cell.beta = b;
            cell.finalize()?;
            let miou = run_adapt(&cell, data, checkpoint, &out.join(format!("zeta={z}_beta={b}")))?;
            println!("zeta={z} beta={b} mIoU {miou:.4}");
            let _ = write!(csv, ",{miou}");
        }
        csv.push('\n');
        write_atomic(&out.join(SWEEP_CSV), csv.as_bytes())?;
    }
    Ok(())
}

fn list_ablations() -> String {
    let mut out = String::new();
    for (name, description) in ABLATION_KEYS {
        let _ = writeln!(out, "ablation.{name}\t{description}");
    }
    out
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData { cfg, out } => cmd_gen_data(&load_config(&cfg)?, &out),
        Command::Pretrain { cfg, data, out } => cmd_pretrain(&load_config(&cfg)?, &data, &out),
        Command::Adapt { cfg, data, checkpoint, out, list_ablations: list } => {
            let cfg = load_config(&cfg)?;
            if list {
                print!("{}", list_ablations());
                return Ok(());
            }
            // clap enforces presence when not listing
            let (data, checkpoint, out) = (data.unwrap(), checkpoint.unwrap(), out.unwrap());
            let miou = run_adapt(&cfg, &data, &checkpoint, &out)?;
            if miou.is_finite() {
                println!("target mIoU {miou:.4}");
            }
            Ok(())
        }
        Command::Eval { cfg, data, checkpoint, out, split } => {
            cmd_eval(&load_config(&cfg)?, &data, &checkpoint, &out, &split)
        }
        Command::Inspect { cfg, out, checkpoint, data, dump } => {
            let model = checkpoint.as_deref().zip(data.as_deref());
            cmd_inspect(&load_config(&cfg)?, &out, model, dump)
        }
        Command::Sweep { cfg, data, checkpoint, out } => {
            cmd_sweep(&load_config(&cfg)?, &data, &checkpoint, &out)
        }
    }
}

/// Parses `argv` (program name first), runs the command and maps the outcome
/// to an exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            }
        }
    }
}
