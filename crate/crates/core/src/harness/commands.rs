//! File-level entry points behind each CLI subcommand.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{load_checkpoint, save_checkpoint, Architecture, DetectorParams, Prediction};
use crate::error::{Error, Result};
use crate::evaluation::{score_gap_map, write_gap_map_csv, EvalImage, EvalReport};
use crate::losses::bc_distill_loss;
use crate::numerics::Grid2;
use crate::protocols::{inconsistency_demo, DemoReport};
use crate::synthdata::{read_dataset, write_dataset, Dataset, ANNOTATIONS_FILE};

use super::config::ExperimentConfig;
use super::train::{
    eval_images, evaluate_predictions, predict_all, train, DistillSignal, EpochRecord, PreparedData, RunRecord,
    TrainSettings,
};

/// When set, replaces the configured output root.
pub const OUTPUT_ROOT_ENV: &str = "BCKD_OUTPUT_ROOT";

pub const TRAIN_SPLIT: &str = "train";
pub const VAL_SPLIT: &str = "val";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RUN_FILE: &str = "run.json";
pub const REPORT_FILE: &str = "eval_report.json";
pub const DETECTIONS_FILE: &str = "detections.json";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const GAP_SUMMARY_FILE: &str = "gap_summary.json";

pub fn output_root(cfg: &ExperimentConfig) -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.output_dir.clone())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn is_nonempty_dir(dir: &Path) -> Result<bool> {
    match fs::read_dir(dir) {
        Ok(mut entries) => Ok(entries.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(dir, e)),
    }
}

/// Removes files this tool would have written into a dataset split.
fn clear_split(dir: &Path) -> Result<()> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(dir, e)),
    };
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if name == ANNOTATIONS_FILE || (name.starts_with("scene_") && name.ends_with(".ppm")) {
            fs::remove_file(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        }
    }
    Ok(())
}

/// Writes the train and val splits under `out`.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    cfg.data.spec.validate()?;
    if cfg.data.train_scenes == 0 || cfg.data.val_scenes == 0 {
        return Err(Error::InvalidSpec("scene counts must be ≥ 1".into()));
    }
    if !force && is_nonempty_dir(out)? {
        return Err(Error::NonEmptyOutput(out.to_path_buf()));
    }
    for (split, seed, count) in [
        (TRAIN_SPLIT, cfg.data.train_seed, cfg.data.train_scenes),
        (VAL_SPLIT, cfg.data.val_seed, cfg.data.val_scenes),
    ] {
        let dir = out.join(split);
        clear_split(&dir)?;
        write_dataset(&dir, &Dataset::generate(&cfg.data.spec, seed, count)?)?;
    }
    Ok(())
}

/// Reads both splits and checks they match the configured scene spec.
pub fn load_splits(cfg: &ExperimentConfig, data_dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = read_dataset(&data_dir.join(TRAIN_SPLIT))?;
    let val = read_dataset(&data_dir.join(VAL_SPLIT))?;
    for (name, ds) in [(TRAIN_SPLIT, &train), (VAL_SPLIT, &val)] {
        if ds.spec.width != cfg.data.spec.width
            || ds.spec.height != cfg.data.spec.height
            || ds.spec.stride != cfg.data.spec.stride
            || ds.spec.num_classes != cfg.data.spec.num_classes
        {
            return Err(Error::Config(format!(
                "{name} split geometry {:?} does not match the config",
                ds.spec
            )));
        }
    }
    Ok((train, val))
}

/// Appends one JSON line per epoch; truncated when a run starts.
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        File::create(path).map_err(|e| Error::io(path, e))?;
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, record: &EpochRecord) -> Result<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

fn run_settings(cfg: &ExperimentConfig, name: &str, arch: Architecture, epochs: usize) -> TrainSettings<'static> {
    TrainSettings {
        name: name.to_string(),
        arch,
        epochs,
        optim: cfg.optim,
        focal_gamma: cfg.focal_gamma,
        seed: cfg.seed,
        distill: None,
        init: None,
        eval: cfg.eval,
        exec: cfg.execution(),
    }
}

/// Trains and, when `out` is given, writes config, metrics, run summary and
/// checkpoint there.
pub fn run_and_save(
    cfg: &ExperimentConfig,
    train_data: &PreparedData,
    val_data: &PreparedData,
    settings: &TrainSettings<'_>,
    out: Option<&Path>,
) -> Result<(DetectorParams, RunRecord)> {
    let Some(out) = out else {
        return train(train_data, val_data, settings, |_| Ok(()));
    };
    create_dir(out)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    let mut metrics = MetricsWriter::create(&out.join(METRICS_FILE))?;
    let (params, record) = train(train_data, val_data, settings, |r| metrics.append(r))?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &params, settings.seed, settings.epochs)?;
    write_json(&out.join(RUN_FILE), &record)?;
    Ok((params, record))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Teacher,
    StudentBaseline,
}

/// Supervised training of the teacher or the baseline student.
pub fn cmd_train(cfg: &ExperimentConfig, data_dir: &Path, out: &Path, mode: TrainMode) -> Result<RunRecord> {
    cfg.validate()?;
    let (train_ds, val_ds) = load_splits(cfg, data_dir)?;
    let (name, arch, epochs) = match mode {
        TrainMode::Teacher => ("teacher", cfg.teacher_arch(), cfg.teacher_epochs),
        TrainMode::StudentBaseline => ("student_baseline", cfg.student_arch(), cfg.student_epochs),
    };
    let exec = cfg.execution();
    let train_data = PreparedData::new(&train_ds, arch.patch, exec)?;
    let val_data = PreparedData::new(&val_ds, arch.patch, exec)?;
    let settings = run_settings(cfg, name, arch, epochs);
    Ok(run_and_save(cfg, &train_data, &val_data, &settings, Some(out))?.1)
}

/// Checks a loaded teacher against the config and the data geometry.
pub fn check_teacher(cfg: &ExperimentConfig, teacher: &DetectorParams) -> Result<()> {
    let student = cfg.student_arch();
    if teacher.arch.stride != student.stride || teacher.arch.num_classes != student.num_classes {
        return Err(Error::ArchitectureMismatch {
            expected: format!("stride={} K={}", student.stride, student.num_classes),
            found: teacher.arch.to_string(),
        });
    }
    let needs_same = cfg.distill.self_kd || cfg.distill.init_from_teacher;
    if needs_same && teacher.arch != student {
        return Err(Error::Config(format!(
            "self-distillation needs the teacher to share the student architecture ({student}), got {}",
            teacher.arch
        )));
    }
    Ok(())
}

/// Frozen teacher outputs on every training scene.
pub fn teacher_predictions(
    teacher: &DetectorParams,
    train_ds: &Dataset,
    student_train: &PreparedData,
    cfg: &ExperimentConfig,
) -> Result<Vec<Prediction>> {
    if teacher.arch.patch == student_train.patch {
        predict_all(teacher, student_train, cfg.execution())
    } else {
        let data = PreparedData::new(train_ds, teacher.arch.patch, cfg.execution())?;
        predict_all(teacher, &data, cfg.execution())
    }
}

/// One distilled-student run against precomputed teacher outputs.
pub fn distill_run(
    cfg: &ExperimentConfig,
    train_data: &PreparedData,
    val_data: &PreparedData,
    teacher: &DetectorParams,
    teacher_preds: &[Prediction],
    out: Option<&Path>,
) -> Result<(DetectorParams, RunRecord)> {
    cfg.validate()?;
    check_teacher(cfg, teacher)?;
    let name = match (cfg.distill.self_kd, cfg.distill.use_cls, cfg.distill.use_loc) {
        (true, _, _) => "self_kd",
        (false, true, false) => "distill_cls_only",
        (false, false, true) => "distill_loc_only",
        _ => "distill",
    };
    let mut settings = run_settings(cfg, name, cfg.student_arch(), cfg.student_epochs);
    settings.distill = Some(DistillSignal {
        teacher: teacher_preds,
        weights: cfg.distill.weights(),
    });
    if cfg.distill.init_from_teacher {
        settings.init = Some(teacher.clone());
    }
    run_and_save(cfg, train_data, val_data, &settings, out)
}

/// Trains a student under the frozen teacher in `teacher_ckpt`.
pub fn cmd_distill(cfg: &ExperimentConfig, data_dir: &Path, teacher_ckpt: &Path, out: &Path) -> Result<RunRecord> {
    cfg.validate()?;
    let teacher = load_checkpoint(teacher_ckpt)?.params;
    check_teacher(cfg, &teacher)?;
    let (train_ds, val_ds) = load_splits(cfg, data_dir)?;
    let exec = cfg.execution();
    let patch = cfg.student.patch;
    let train_data = PreparedData::new(&train_ds, patch, exec)?;
    let val_data = PreparedData::new(&val_ds, patch, exec)?;
    let preds = teacher_predictions(&teacher, &train_ds, &train_data, cfg)?;
    Ok(distill_run(cfg, &train_data, &val_data, &teacher, &preds, Some(out))?.1)
}

#[derive(Debug, Clone, Serialize)]
struct ImageDetections<'a> {
    image: usize,
    #[serde(flatten)]
    content: &'a EvalImage,
}

/// Evaluates a checkpoint on one dataset directory; writes the report and
/// the per-image detections.
pub fn cmd_eval(cfg: &ExperimentConfig, ckpt: &Path, dataset_dir: &Path, out: &Path) -> Result<EvalReport> {
    let params = load_checkpoint(ckpt)?.params;
    let ds = read_dataset(dataset_dir)?;
    let data = PreparedData::new(&ds, params.arch.patch, cfg.execution())?;
    let preds = predict_all(&params, &data, cfg.execution())?;
    let report = evaluate_predictions(&preds, &data, &cfg.eval)?;
    create_dir(out)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    let images = eval_images(&preds, &data, &cfg.eval);
    let per_image: Vec<ImageDetections<'_>> = images
        .iter()
        .enumerate()
        .map(|(image, content)| ImageDetections { image, content })
        .collect();
    write_json(&out.join(DETECTIONS_FILE), &per_image)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InconsistencyReport {
    pub teacher_logits: Vec<Vec<f64>>,
    pub shift: Vec<f64>,
    #[serde(flatten)]
    pub demo: DemoReport,
    pub sigmoid_l1_gap: f64,
    pub bckd_loss: f64,
}

/// Teacher logits `[[2, 0]]`, student = teacher shifted by −2: softmax
/// scores agree exactly while sigmoid scores do not.
pub fn inconsistency_example() -> Result<InconsistencyReport> {
    let teacher = Grid2::from_rows(&[[2.0, 0.0]])?;
    let shift = vec![-2.0];
    let demo = inconsistency_demo(&teacher, &shift)?;
    let student = crate::protocols::shift_rows(&teacher, &shift)?;
    let bckd = bc_distill_loss(&student, &teacher)?;
    Ok(InconsistencyReport {
        teacher_logits: teacher.iter_rows().map(<[f64]>::to_vec).collect(),
        shift,
        sigmoid_l1_gap: demo.total_sigmoid_gap(),
        demo,
        bckd_loss: bckd.value,
    })
}

pub fn cmd_demo_inconsistency(out: &Path) -> Result<InconsistencyReport> {
    let report = inconsistency_example()?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(out, &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub alpha1: f64,
    pub alpha2: f64,
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("alpha1,alpha2,mAP,AP50,AP75\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.alpha1, r.alpha2, r.map, r.ap50, r.ap75));
    }
    out
}

/// One distillation run per `(α₁, α₂)` grid point, sharing data, teacher
/// and seed. Rows come back sorted by `(α₁, α₂)`.
#[allow(clippy::too_many_arguments)]
pub fn ablate_prepared(
    cfg: &ExperimentConfig,
    train_data: &PreparedData,
    val_data: &PreparedData,
    teacher: &DetectorParams,
    teacher_preds: &[Prediction],
    alpha1_grid: &[f64],
    alpha2_grid: &[f64],
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    if alpha1_grid.is_empty() || alpha2_grid.is_empty() {
        return Err(Error::Config("ablation grids must be non-empty".into()));
    }
    let mut points: Vec<(f64, f64)> = alpha1_grid
        .iter()
        .flat_map(|&a1| alpha2_grid.iter().map(move |&a2| (a1, a2)))
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut rows = Vec::with_capacity(points.len());
    for (a1, a2) in points {
        let mut point_cfg = cfg.clone();
        point_cfg.distill.alpha1 = a1;
        point_cfg.distill.alpha2 = a2;
        let dir = out.map(|o| o.join(format!("alpha1_{a1}_alpha2_{a2}")));
        let (_, rec) = distill_run(&point_cfg, train_data, val_data, teacher, teacher_preds, dir.as_deref())?;
        let r = &rec.final_report;
        rows.push(AblationRow {
            alpha1: a1,
            alpha2: a2,
            map: r.map,
            ap50: r.ap50,
            ap75: r.ap75,
        });
    }
    Ok(rows)
}

pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    teacher_ckpt: &Path,
    alpha1_grid: &[f64],
    alpha2_grid: &[f64],
    out: &Path,
) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let teacher = load_checkpoint(teacher_ckpt)?.params;
    check_teacher(cfg, &teacher)?;
    let (train_ds, val_ds) = load_splits(cfg, data_dir)?;
    let exec = cfg.execution();
    let train_data = PreparedData::new(&train_ds, cfg.student.patch, exec)?;
    let val_data = PreparedData::new(&val_ds, cfg.student.patch, exec)?;
    let preds = teacher_predictions(&teacher, &train_ds, &train_data, cfg)?;
    create_dir(out)?;
    let rows = ablate_prepared(
        cfg,
        &train_data,
        &val_data,
        &teacher,
        &preds,
        alpha1_grid,
        alpha2_grid,
        Some(out),
    )?;
    let path = out.join(ABLATION_FILE);
    fs::write(&path, ablation_csv(&rows)).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub mean_gap: f64,
    pub per_image_mean: Vec<f64>,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

/// Per-image score-gap maps between two sets of predictions.
pub fn gap_maps(teacher: &[Prediction], student: &[Prediction]) -> Result<Vec<Vec<f64>>> {
    if teacher.len() != student.len() {
        return Err(Error::invalid(format!(
            "{} teacher vs {} student predictions",
            teacher.len(),
            student.len()
        )));
    }
    teacher.iter().zip(student).map(|(t, s)| score_gap_map(t, s)).collect()
}

pub fn summarize_gaps(maps: &[Vec<f64>], grid: (usize, usize)) -> GapSummary {
    let per_image_mean: Vec<f64> = maps
        .iter()
        .map(|m| m.iter().sum::<f64>() / m.len().max(1) as f64)
        .collect();
    GapSummary {
        mean_gap: per_image_mean.iter().sum::<f64>() / per_image_mean.len().max(1) as f64,
        per_image_mean,
        grid_rows: grid.0,
        grid_cols: grid.1,
    }
}

/// Writes `gap_<idx>.csv` for every image plus a JSON summary.
pub fn cmd_score_gap(
    cfg: &ExperimentConfig,
    teacher_ckpt: &Path,
    student_ckpt: &Path,
    dataset_dir: &Path,
    out: &Path,
) -> Result<GapSummary> {
    let teacher = load_checkpoint(teacher_ckpt)?.params;
    let student = load_checkpoint(student_ckpt)?.params;
    let ds = read_dataset(dataset_dir)?;
    let exec = cfg.execution();
    let t_data = PreparedData::new(&ds, teacher.arch.patch, exec)?;
    let t_preds = predict_all(&teacher, &t_data, exec)?;
    let s_preds = if student.arch.patch == teacher.arch.patch {
        predict_all(&student, &t_data, exec)?
    } else {
        predict_all(&student, &PreparedData::new(&ds, student.arch.patch, exec)?, exec)?
    };
    let maps = gap_maps(&t_preds, &s_preds)?;
    let grid = t_data.anchors.grid_shape();
    create_dir(out)?;
    for (idx, m) in maps.iter().enumerate() {
        write_gap_map_csv(&out.join(format!("gap_{idx}.csv")), m, grid)?;
    }
    let summary = summarize_gaps(&maps, grid);
    write_json(&out.join(GAP_SUMMARY_FILE), &summary)?;
    Ok(summary)
}
