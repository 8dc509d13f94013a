//! `maskgrasp` command line: dataset generation, training, evaluation,
//! gradient checking, and a rotated-IoU calculator.
//!
//! Every command writes line-delimited JSON records to `out` unless
//! `--pretty` is given. Exit codes: 0 success, 1 usage error, 2 runtime
//! error, 3 failed check.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::attention::QueryMode;
use crate::data::{generate_dataset, read_dataset, write_dataset, GeneratorConfig, SceneExample};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geometry::{angle_diff, passes_thresholds, rotated_iou, EvalReport, GraspRect};
use crate::gradcheck_suite::run_suite;
use crate::json;
use crate::losses::LossConfig;
use crate::train::{evaluate_model, train, visual_features, Checkpoint, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

/// File names inside a dataset directory written by `gen`.
pub const TRAIN_FILE: &str = "train.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";

#[derive(Parser, Debug)]
#[command(name = "maskgrasp", version, about = "Mask-guided attention grasp detection on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    Gen(GenArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run the gradient-check suite.
    Gradcheck(GradcheckArgs),
    /// Rotated IoU, angle difference, and success verdict for two rects.
    Iou(IouArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Training scenes.
    #[arg(long, default_value_t = 3000)]
    scenes: usize,
    #[arg(long, default_value_t = 500)]
    eval_seen: usize,
    #[arg(long, default_value_t = 500)]
    eval_unseen: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    proposals: usize,
    #[arg(long, default_value_t = 4)]
    tokens: usize,
    #[arg(long, default_value_t = 20)]
    categories: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true", action = ArgAction::Set)]
    occlusion: bool,
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    pretty: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    TextQuery,
    RegionQuery,
}

impl From<ModeArg> for QueryMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::TextQuery => QueryMode::TextQuery,
            ModeArg::RegionQuery => QueryMode::RegionQuery,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory, or a single dataset file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.8)]
    lambda_cor: f64,
    #[arg(long, default_value_t = 1.4)]
    beta: f64,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Expected feature width; must match the dataset.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, value_enum, default_value_t = ModeArg::TextQuery)]
    mode: ModeArg,
    #[arg(long)]
    no_seg: bool,
    #[arg(long)]
    no_cor: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip per-epoch evaluation.
    #[arg(long)]
    no_eval: bool,
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    pretty: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory (uses its eval file) or a single dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Write one z_vis row per (scene, proposal) to this file.
    #[arg(long)]
    dump_features: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    pretty: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    pretty: bool,
    /// Corrupt the analytic gradient of the named check.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args, Debug)]
struct IouArgs {
    /// x,y,w,h,theta
    #[arg(long, allow_hyphen_values = true)]
    rect1: String,
    #[arg(long, allow_hyphen_values = true)]
    rect2: String,
    #[arg(long)]
    pretty: bool,
}

fn exec_for(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let sink: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = sink.write_all(rendered.as_bytes());
            return code;
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
        Command::Iou(a) => cmd_iou(&a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

/// Hex SHA-256 of the configuration's canonical JSON.
pub fn config_hash(cfg: &GeneratorConfig) -> Result<String> {
    let digest = Sha256::digest(json::to_string(cfg)?.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn cmd_gen(a: &GenArgs, out: &mut dyn Write) -> Result<i32> {
    if a.scenes == 0 {
        return Err(Error::Config("--scenes must be at least 1".into()));
    }
    let cfg = GeneratorConfig {
        d: a.dim,
        m: a.proposals,
        k: a.tokens,
        num_categories: a.categories,
        noise_sigma: a.noise,
        occlusion_mode: a.occlusion,
        seed: a.seed,
    };
    cfg.validate()?;
    let ds = generate_dataset(&cfg, a.scenes, a.eval_seen, a.eval_unseen, exec_for(a.sequential))?;
    fs::create_dir_all(&a.out)?;
    write_dataset(&a.out.join(TRAIN_FILE), &cfg, &ds.train)?;
    write_dataset(&a.out.join(EVAL_FILE), &cfg, &ds.eval())?;
    let hash = config_hash(&cfg)?;
    if a.pretty {
        writeln!(
            out,
            "wrote {} train, {} seen eval, {} unseen eval scenes to {} (config {})",
            ds.train.len(),
            ds.eval_seen.len(),
            ds.eval_unseen.len(),
            a.out.display(),
            hash
        )?;
    } else {
        json::write_record(
            out,
            &json!({
                "record_type": "gen",
                "train": ds.train.len(),
                "eval_seen": ds.eval_seen.len(),
                "eval_unseen": ds.eval_unseen.len(),
                "config_hash": hash,
            }),
        )?;
    }
    Ok(EXIT_OK)
}

/// Resolves a dataset path: a directory selects `file` inside it.
fn load_scenes(path: &Path, file: &str) -> Result<(GeneratorConfig, Vec<SceneExample>)> {
    if path.is_dir() {
        read_dataset(&path.join(file))
    } else {
        read_dataset(path)
    }
}

fn fmt_rate(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    if let Some(d) = a.dim {
        if a.heads == 0 || !d.is_multiple_of(a.heads) {
            return Err(Error::Config(format!(
                "--dim {d} is not divisible by --heads {}",
                a.heads
            )));
        }
    }
    let cfg = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        loss: LossConfig {
            alpha: a.alpha,
            beta: a.beta,
            lambda_c: a.lambda_cor,
            ..LossConfig::default()
        },
        mode: a.mode.into(),
        heads: a.heads,
        seed: a.seed,
        disable_seg_stream: a.no_seg,
        disable_correspondence_loss: a.no_cor,
        ..TrainConfig::default()
    };
    cfg.validate()?;

    let (gen_cfg, scenes) = load_scenes(&a.data, TRAIN_FILE)?;
    if let Some(d) = a.dim {
        if d != gen_cfg.d {
            return Err(Error::contract(format!("--dim {d} but the dataset has width {}", gen_cfg.d)));
        }
    }
    if gen_cfg.d % a.heads != 0 {
        return Err(Error::Config(format!(
            "dataset width {} is not divisible by --heads {}",
            gen_cfg.d, a.heads
        )));
    }
    let eval = if a.no_eval || !a.data.is_dir() {
        Vec::new()
    } else {
        load_scenes(&a.data, EVAL_FILE)?.1
    };

    if a.pretty {
        writeln!(out, "{:>5}  {:>10}  {:>6}  {:>6}  {:>6}", "epoch", "loss", "seen", "unseen", "h")?;
    }
    let mut write_err = None;
    let ckpt = train(&cfg, &scenes, &eval, exec_for(a.sequential), |r| {
        let res = if a.pretty {
            writeln!(
                out,
                "{:>5}  {:>10.6}  {:>6}  {:>6}  {:>6}",
                r.epoch,
                r.loss,
                fmt_rate(r.seen),
                fmt_rate(r.unseen),
                fmt_rate(r.h)
            )
            .map_err(Error::from)
        } else {
            json::write_record(
                out,
                &json!({
                    "record_type": "epoch",
                    "epoch": r.epoch,
                    "loss": r.loss,
                    "seen": r.seen,
                    "unseen": r.unseen,
                    "h": r.h,
                }),
            )
        };
        if let Err(e) = res.and_then(|_| out.flush().map_err(Error::from)) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    ckpt.save(&a.ckpt)?;
    Ok(EXIT_OK)
}

fn report_record(r: &EvalReport) -> serde_json::Value {
    json!({
        "record_type": "eval",
        "seen": r.seen_success(),
        "unseen": r.unseen_success(),
        "h": r.harmonic,
        "seen_successes": r.seen.map(|s| s.successes),
        "seen_count": r.seen.map(|s| s.count),
        "unseen_successes": r.unseen.map(|s| s.successes),
        "unseen_count": r.unseen.map(|s| s.count),
    })
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let (_, scenes) = load_scenes(&a.data, EVAL_FILE)?;
    let exec = exec_for(a.sequential);
    let mode = ckpt.config.mode;
    let report = evaluate_model(&ckpt.model, mode, &scenes, exec)?;

    if let Some(path) = &a.dump_features {
        let feats = exec.map(&scenes, |s| visual_features(&ckpt.model, s, mode));
        let mut w = std::io::BufWriter::new(fs::File::create(path)?);
        for (s, z) in scenes.iter().zip(feats) {
            let z = z?;
            for i in 0..z.rows() {
                json::write_record(
                    &mut w,
                    &json!({
                        "scene_id": s.scene_id,
                        "proposal": i,
                        "category_id": s.category_id,
                        "unseen": s.is_unseen,
                        "positive": s.labels[i],
                        "z_vis": z.row(i),
                    }),
                )?;
            }
        }
        w.flush()?;
    }

    if a.pretty {
        let count = |s: Option<crate::geometry::SplitScore>| {
            s.map_or_else(|| "-".to_string(), |s| format!("{}/{}", s.successes, s.count))
        };
        writeln!(out, "seen    {}  ({})", fmt_rate(report.seen_success()), count(report.seen))?;
        writeln!(out, "unseen  {}  ({})", fmt_rate(report.unseen_success()), count(report.unseen))?;
        writeln!(out, "H       {}", fmt_rate(report.harmonic))?;
    } else {
        json::write_record(out, &report_record(&report))?;
    }
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let report = run_suite(a.inject_fault.as_deref())?;
    for c in &report.checks {
        if a.pretty {
            writeln!(
                out,
                "{:<40} {:>10.3e}  tol {:.0e}  {}",
                c.name,
                c.max_rel_error,
                c.tolerance,
                if c.passed { "ok" } else { "FAIL" }
            )?;
        } else {
            let mut v = serde_json::to_value(c)?;
            v["record_type"] = json!("gradcheck");
            json::write_record(out, &v)?;
        }
    }
    let worst = report.worst().expect("suite is never empty");
    if a.pretty {
        writeln!(
            out,
            "{}: worst offender {} ({:.3e}, analytic {:.6e}, numeric {:.6e})",
            if report.passed() { "PASS" } else { "FAIL" },
            worst.name,
            worst.max_rel_error,
            worst.analytic,
            worst.numeric
        )?;
    } else {
        json::write_record(
            out,
            &json!({
                "record_type": "gradcheck_summary",
                "passed": report.passed(),
                "checks": report.checks.len(),
                "max_rel_error": report.max_rel_error(),
                "worst": worst.name,
                "worst_rel_error": worst.max_rel_error,
            }),
        )?;
    }
    Ok(if report.passed() { EXIT_OK } else { EXIT_CHECK_FAILED })
}

/// Parses `x,y,w,h,theta`.
pub fn parse_rect(s: &str) -> Result<GraspRect> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 5 {
        return Err(Error::Config(format!("expected 5 comma-separated numbers, got `{s}`")));
    }
    let mut v = [0.0; 5];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p
            .parse()
            .map_err(|_| Error::Config(format!("`{p}` is not a number in `{s}`")))?;
    }
    GraspRect::new(v[0], v[1], v[2], v[3], v[4]).map_err(|e| Error::Config(e.to_string()))
}

fn cmd_iou(a: &IouArgs, out: &mut dyn Write) -> Result<i32> {
    let r1 = parse_rect(&a.rect1)?;
    let r2 = parse_rect(&a.rect2)?;
    let iou = rotated_iou(&r1, &r2);
    let diff = angle_diff(r1.theta, r2.theta);
    let success = passes_thresholds(iou, diff);
    if a.pretty {
        writeln!(out, "IoU {iou:.6}, diff {diff:.1}, success {success}")?;
    } else {
        json::write_record(
            out,
            &json!({"record_type": "iou", "iou": iou, "angle_diff": diff, "success": success}),
        )?;
    }
    Ok(EXIT_OK)
}
