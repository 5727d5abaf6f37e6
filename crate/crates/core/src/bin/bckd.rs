use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bckd_lab::harness::commands::{
    ablation_csv, cmd_ablate, cmd_demo_inconsistency, cmd_distill, cmd_eval, cmd_gen_data, cmd_score_gap, cmd_train, output_root,
    TrainMode, VAL_SPLIT,
};
use bckd_lab::harness::config::ExperimentConfig;
use bckd_lab::losses::Normalization;

#[derive(Parser, Debug)]
#[command(name = "bckd", version, about = "Binary classification and IoU localization distillation on synthetic dense detection")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON experiment config; flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root directory for default input and output locations.
    #[arg(long, global = true, env = "BCKD_OUTPUT_ROOT")]
    output_root: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run per-scene work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the train and val scene sets.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        train_scenes: Option<usize>,
        #[arg(long)]
        val_scenes: Option<usize>,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Supervised training of the wide teacher.
    TrainTeacher(TrainArgs),
    /// Supervised training of the baseline student.
    TrainStudent(TrainArgs),
    /// Train a student with distillation from a frozen teacher.
    Distill(DistillArgs),
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (defaults to the val split).
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Show that softmax KL can be zero while sigmoid scores differ.
    DemoInconsistency {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distill once per (alpha1, alpha2) grid point.
    Ablate {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.5, 1.0, 2.0])]
        alpha1_grid: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [2.0, 4.0, 8.0])]
        alpha2_grid: Vec<f64>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-anchor sigmoid score gap maps between two checkpoints.
    ScoreGap {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct DistillArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    alpha1: Option<f64>,
    #[arg(long)]
    alpha2: Option<f64>,
    /// Classification distillation only.
    #[arg(long, conflicts_with = "loc_only")]
    cls_only: bool,
    /// Localization distillation only.
    #[arg(long)]
    loc_only: bool,
    /// The teacher shares the student architecture.
    #[arg(long)]
    self_kd: bool,
    /// Start the student from the teacher's weights.
    #[arg(long)]
    init_from_teacher: bool,
    #[arg(long, value_parser = parse_normalization)]
    loss_normalization: Option<Normalization>,
}

fn parse_normalization(s: &str) -> Result<Normalization, String> {
    match s {
        "mean" => Ok(Normalization::Mean),
        "sum" => Ok(Normalization::Sum),
        other => Err(format!("expected mean or sum, got {other}")),
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(root) = &common.output_root {
        cfg.output_dir = root.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.sequential {
        cfg.parallel = false;
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn train_cmd(mut cfg: ExperimentConfig, root: &Path, args: TrainArgs, mode: TrainMode) -> Result<()> {
    if let Some(e) = args.epochs {
        match mode {
            TrainMode::Teacher => cfg.teacher_epochs = e,
            TrainMode::StudentBaseline => cfg.student_epochs = e,
        }
    }
    let data = args.data.unwrap_or_else(|| root.join("data"));
    let default_out = match mode {
        TrainMode::Teacher => "teacher",
        TrainMode::StudentBaseline => "student_baseline",
    };
    let out = args.out.unwrap_or_else(|| root.join(default_out));
    let rec = cmd_train(&cfg, &data, &out, mode).context("training failed")?;
    eprintln!("wrote {}", out.display());
    print_json(&rec.final_report)
}

fn distill_cmd(mut cfg: ExperimentConfig, root: &Path, args: DistillArgs) -> Result<()> {
    if let Some(e) = args.epochs {
        cfg.student_epochs = e;
    }
    if let Some(a) = args.alpha1 {
        cfg.distill.alpha1 = a;
    }
    if let Some(a) = args.alpha2 {
        cfg.distill.alpha2 = a;
    }
    if let Some(n) = args.loss_normalization {
        cfg.distill.loss_normalization = n;
    }
    if args.cls_only {
        cfg.distill.use_loc = false;
    }
    if args.loc_only {
        cfg.distill.use_cls = false;
    }
    cfg.distill.self_kd |= args.self_kd;
    cfg.distill.init_from_teacher |= args.init_from_teacher;
    let data = args.data.unwrap_or_else(|| root.join("data"));
    let out = args.out.unwrap_or_else(|| root.join("distill"));
    let rec = cmd_distill(&cfg, &data, &args.teacher, &out).context("distillation failed")?;
    eprintln!("wrote {}", out.display());
    print_json(&rec.final_report)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = load_config(&cli.common)?;
    // clap has already folded the environment variable into the flag.
    let root = match &cli.common.output_root {
        Some(r) => r.clone(),
        None => output_root(&cfg),
    };
    match cli.command {
        Command::GenData {
            out,
            train_scenes,
            val_scenes,
            force,
        } => {
            if let Some(n) = train_scenes {
                cfg.data.train_scenes = n;
            }
            if let Some(n) = val_scenes {
                cfg.data.val_scenes = n;
            }
            let out = out.unwrap_or_else(|| root.join("data"));
            cmd_gen_data(&cfg, &out, force).with_context(|| format!("generating data in {}", out.display()))?;
            eprintln!(
                "wrote {} ({} train, {} val scenes)",
                out.display(),
                cfg.data.train_scenes,
                cfg.data.val_scenes
            );
        }
        Command::TrainTeacher(args) => train_cmd(cfg, &root, args, TrainMode::Teacher)?,
        Command::TrainStudent(args) => train_cmd(cfg, &root, args, TrainMode::StudentBaseline)?,
        Command::Distill(args) => distill_cmd(cfg, &root, args)?,
        Command::Eval { checkpoint, dataset, out } => {
            let dataset = dataset.unwrap_or_else(|| root.join("data").join(VAL_SPLIT));
            let out = out.unwrap_or_else(|| root.join("eval"));
            let report = cmd_eval(&cfg, &checkpoint, &dataset, &out).context("evaluation failed")?;
            print_json(&report)?;
        }
        Command::DemoInconsistency { out } => {
            let out = out.unwrap_or_else(|| root.join("demo_inconsistency.json"));
            let report = cmd_demo_inconsistency(&out)?;
            print_json(&report)?;
        }
        Command::Ablate {
            teacher,
            alpha1_grid,
            alpha2_grid,
            data,
            out,
        } => {
            if alpha1_grid.is_empty() || alpha2_grid.is_empty() {
                bail!("alpha grids must be non-empty");
            }
            let data = data.unwrap_or_else(|| root.join("data"));
            let out = out.unwrap_or_else(|| root.join("ablate"));
            let rows = cmd_ablate(&cfg, &data, &teacher, &alpha1_grid, &alpha2_grid, &out).context("ablation failed")?;
            print!("{}", ablation_csv(&rows));
        }
        Command::ScoreGap {
            teacher,
            student,
            dataset,
            out,
        } => {
            let dataset = dataset.unwrap_or_else(|| root.join("data").join(VAL_SPLIT));
            let out = out.unwrap_or_else(|| root.join("score_gap"));
            let summary = cmd_score_gap(&cfg, &teacher, &student, &dataset, &out).context("score gap failed")?;
            println!("mean_gap {}", summary.mean_gap);
        }
    }
    Ok(())
}
