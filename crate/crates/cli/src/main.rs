//! `kdx`: train teachers, distill students across the M1-M6 objective grid,
//! evaluate checkpoints, extract routing trees, and compare runs.
//!
//! Exit codes: 0 on success, 2 on configuration errors (bad flags, bad
//! config keys, inconsistent variant/mode), 3 on data errors (missing or
//! malformed files, stale logit caches).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kdx_core::data::{load_dataset, Split};
use kdx_core::train::{
    cache_teacher_logits, compare_objectives, distill, evaluate, load_model, load_run,
    train_teacher, RunConfig,
};
use kdx_core::tree::{entropy_report, extract_tree, snapshot_leaf_count, to_dot, to_json};
use kdx_core::{AttentionSnapshot, Error};

#[derive(Parser)]
#[command(
    name = "kdx",
    version,
    about = "Knowledge-distillation explainability toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a plain cross-entropy teacher and write its checkpoint.
    TrainTeacher(TrainTeacherArgs),
    /// Train a student with one of the M1-M6 objectives.
    Distill(ConfigArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Extract the hardened routing tree from an attention snapshot.
    ExtractTree(ExtractTreeArgs),
    /// Compare finished runs side by side.
    Compare(CompareArgs),
}

/// Config assembly shared by the training subcommands: defaults, then the
/// `--config` file, then named flags, then `--set` pairs; later layers win.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Student mode: plain | explainer | vam.
    #[arg(long)]
    mode: Option<String>,
    /// Objective variant: M1..M6.
    #[arg(long)]
    variant: Option<String>,
    /// Student family (tiny-cnn, vgg8-like, wrn-16-2-like, wrn-40-1-like,
    /// resnet18-like).
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    /// Label-smoothing epsilon for CE-only variants (0 disables).
    #[arg(long)]
    smoothing: Option<String>,
    #[arg(long)]
    channels_per_block: Option<String>,
    /// Comma-separated experts per explainer stage, e.g. 1,2,2,2.
    #[arg(long)]
    experts: Option<String>,
    #[arg(long)]
    teacher_checkpoint: Option<String>,
    #[arg(long)]
    teacher_cache: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    /// Extra key = value override; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainTeacherArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Also cache the teacher's train-split logits into
    /// OUT_DIR/teacher_logits.json.
    #[arg(long)]
    cache_logits: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset split: train | test.
    #[arg(long, default_value = "test")]
    split: String,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ExtractTreeArgs {
    /// Attention snapshot JSON (written by distill as snapshot.json).
    #[arg(long)]
    snapshot: PathBuf,
    /// Leaf count; defaults to the number of records at the deepest stage.
    #[arg(long)]
    k: Option<usize>,
    /// Write the tree as DOT here.
    #[arg(long)]
    dot: Option<PathBuf>,
    /// Write the tree as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Run directories written by distill (at least two).
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Directory for compare.txt and per-run DOT trees.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for configuration problems, 3 for data problems, 1 otherwise.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::ShapeMismatch(_) => 2,
        Error::Ingestion { .. }
        | Error::Io(_)
        | Error::Json(_)
        | Error::StaleCache(_)
        | Error::Validation(_) => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::TrainTeacher(args) => cmd_train_teacher(args),
        Command::Distill(args) => cmd_distill(args),
        Command::Eval(args) => cmd_eval(args),
        Command::ExtractTree(args) => cmd_extract_tree(args),
        Command::Compare(args) => cmd_compare(args),
    }
}

impl ConfigArgs {
    /// Layered key-value assembly; `RunConfig::from_pairs` applies mode
    /// defaults first and rejects unknown keys.
    fn build(&self) -> Result<RunConfig, Error> {
        let mut layers: Vec<(String, String)> = Vec::new();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)?;
            layers.extend(kdx_core::train::config::parse_pairs(&text)?);
        }
        let named: [(&str, &Option<String>); 15] = [
            ("mode", &self.mode),
            ("variant", &self.variant),
            ("family", &self.family),
            ("seed", &self.seed),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("alpha", &self.alpha),
            ("tau", &self.tau),
            ("gamma", &self.gamma),
            ("smoothing", &self.smoothing),
            ("channels_per_block", &self.channels_per_block),
            ("experts", &self.experts),
            ("teacher_checkpoint", &self.teacher_checkpoint),
            ("teacher_cache", &self.teacher_cache),
            ("out_dir", &self.out_dir),
        ];
        for (key, value) in named {
            if let Some(v) = value {
                layers.push((key.to_string(), v.clone()));
            }
        }
        for pair in &self.set {
            let Some((k, v)) = pair.split_once('=') else {
                return Err(Error::config(format!(
                    "--set expects KEY=VALUE, got '{pair}'"
                )));
            };
            layers.push((k.trim().to_string(), v.trim().to_string()));
        }
        // Later layers win; keep the last occurrence of each key.
        let mut merged: Vec<(String, String)> = Vec::new();
        for (k, v) in layers {
            if let Some(slot) = merged.iter_mut().find(|(mk, _)| *mk == k) {
                slot.1 = v;
            } else {
                merged.push((k, v));
            }
        }
        RunConfig::from_pairs(&merged)
    }
}

fn print_final(metrics: &kdx_core::train::MetricsLog) {
    if let Some(row) = metrics.last() {
        let mut line = format!(
            "final: epoch={} train_acc={:.4} test_acc={:.4} loss_total={:.6}",
            row.epoch, row.train_acc, row.test_acc, row.loss_total
        );
        if let Some(h) = row.attention_entropy {
            line.push_str(&format!(" attention_entropy={h:.4}"));
        }
        println!("{line}");
    }
}

fn cmd_train_teacher(args: TrainTeacherArgs) -> Result<(), Error> {
    let cfg = args.config.build()?;
    if args.cache_logits && cfg.out_dir.as_os_str().is_empty() {
        return Err(Error::config("--cache-logits needs an out_dir"));
    }
    let mut artifacts = train_teacher(&cfg)?;
    print_final(&artifacts.metrics);
    if !cfg.out_dir.as_os_str().is_empty() {
        println!("artifacts: {}", cfg.out_dir.display());
    }
    if args.cache_logits {
        let train = load_dataset(&cfg.data, Split::Train)?;
        let cache = cache_teacher_logits(&mut artifacts.model, &train, cfg.batch_size)?;
        let path = cfg.out_dir.join("teacher_logits.json");
        cache.save(&path)?;
        println!("logit cache: {}", path.display());
    }
    Ok(())
}

fn cmd_distill(args: ConfigArgs) -> Result<(), Error> {
    let cfg = args.build()?;
    let artifacts = distill(&cfg)?;
    print_final(&artifacts.metrics);
    if !cfg.out_dir.as_os_str().is_empty() {
        println!("artifacts: {}", cfg.out_dir.display());
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let cfg = args.config.build()?;
    let split = match args.split.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        other => {
            return Err(Error::config(format!(
                "unknown split '{other}' (expected train | test)"
            )));
        }
    };
    let data = load_dataset(&cfg.data, split)?;
    let mut model = load_model(&args.checkpoint)?;
    let report = evaluate(&mut model, &data, cfg.batch_size)?;
    println!(
        "accuracy: {:.4} ({}/{})",
        report.accuracy, report.correct, report.n
    );
    for (c, acc) in report.per_class.iter().enumerate() {
        println!("class {c}: {acc:.4}");
    }
    Ok(())
}

fn cmd_extract_tree(args: ExtractTreeArgs) -> Result<(), Error> {
    let snapshot = AttentionSnapshot::from_json(&std::fs::read_to_string(&args.snapshot)?)?;
    let k = args.k.unwrap_or_else(|| snapshot_leaf_count(&snapshot));
    let tree = extract_tree(&snapshot, k)?;
    let report = entropy_report(&snapshot)?;
    println!("true_tree: {}", if tree.is_true_tree { "yes" } else { "no" });
    println!("retained_blocks: {}", tree.retained_count());
    println!("total_entropy: {:.4}", report.total_entropy);
    for (class, branch) in &report.branch_assignment {
        println!("class {class} -> {branch}");
    }
    if let Some(path) = &args.dot {
        std::fs::write(path, to_dot(&tree))?;
        println!("dot: {}", path.display());
    }
    if let Some(path) = &args.json {
        std::fs::write(path, to_json(&tree)?)?;
        println!("json: {}", path.display());
    }
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<(), Error> {
    let runs = args
        .runs
        .iter()
        .map(|dir| load_run(dir))
        .collect::<Result<Vec<_>, _>>()?;
    let report = compare_objectives(&runs)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("compare.txt"), &text)?;
        for row in &report.rows {
            if let Some(dot) = &row.tree_dot {
                std::fs::write(out.join(format!("{}.dot", row.label)), dot)?;
            }
        }
        println!("report: {}", out.join("compare.txt").display());
    }
    Ok(())
}
