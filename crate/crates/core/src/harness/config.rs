use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::Architecture;
use crate::error::{Error, Result};
use crate::evaluation::{BG_IOU, DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESH, FG_IOU};
use crate::losses::{DistillWeights, Normalization};
use crate::parallel::Execution;
use crate::synthdata::{SceneSpec, VAL_BASE_SEED};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub spec: SceneSpec,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub train_seed: u64,
    pub val_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            spec: SceneSpec::default(),
            train_scenes: 200,
            val_scenes: 100,
            train_seed: 0,
            val_seed: VAL_BASE_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub patch: usize,
    pub hidden: Vec<usize>,
}

impl ModelConfig {
    pub fn architecture(&self, stride: usize, num_classes: usize) -> Architecture {
        Architecture {
            patch: self.patch,
            stride,
            hidden: self.hidden.clone(),
            num_classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Step decay points as fractions of the epoch budget; the learning rate
    /// is multiplied by `lr_gamma` after each one.
    pub lr_milestones: [f64; 2],
    pub lr_gamma: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
            lr_milestones: [8.0 / 12.0, 11.0 / 12.0],
            lr_gamma: 0.1,
        }
    }
}

impl OptimConfig {
    /// Learning rate for 1-based `epoch` out of `epochs`.
    pub fn learning_rate_at(&self, epoch: usize, epochs: usize) -> f64 {
        let passed = self
            .lr_milestones
            .iter()
            .filter(|&&m| epoch as f64 > (m * epochs as f64).round())
            .count();
        self.learning_rate * self.lr_gamma.powi(passed as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub use_cls: bool,
    pub use_loc: bool,
    pub loss_normalization: Normalization,
    /// The teacher has the student's architecture.
    pub self_kd: bool,
    /// Start the student from the teacher's weights instead of a fresh init.
    pub init_from_teacher: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 4.0,
            use_cls: true,
            use_loc: true,
            loss_normalization: Normalization::Mean,
            self_kd: false,
            init_from_teacher: false,
        }
    }
}

impl DistillConfig {
    pub fn weights(&self) -> DistillWeights {
        DistillWeights {
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            use_cls: self.use_cls,
            use_loc: self.use_loc,
            normalization: self.loss_normalization,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub fg_iou: f64,
    pub bg_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_thresh: DEFAULT_SCORE_THRESH,
            nms_iou: DEFAULT_NMS_IOU,
            fg_iou: FG_IOU,
            bg_iou: BG_IOU,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub optim: OptimConfig,
    pub student_epochs: usize,
    pub teacher_epochs: usize,
    /// Focusing exponent of the supervised classification loss.
    pub focal_gamma: f64,
    /// Seeds parameter initialization and minibatch order.
    pub seed: u64,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
    /// Use the rayon pool for per-scene work when the feature is compiled in.
    pub parallel: bool,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            teacher: ModelConfig { patch: 16, hidden: vec![64, 64] },
            student: ModelConfig { patch: 16, hidden: vec![16] },
            optim: OptimConfig::default(),
            student_epochs: 30,
            teacher_epochs: 60,
            focal_gamma: 2.0,
            seed: 0,
            distill: DistillConfig::default(),
            eval: EvalConfig::default(),
            parallel: true,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::parse("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.spec.validate()?;
        let d = &self.distill;
        if !(d.alpha1 >= 0.0 && d.alpha2 >= 0.0 && d.alpha1.is_finite() && d.alpha2.is_finite()) {
            return Err(Error::Config(format!(
                "alpha1 and alpha2 must be finite and ≥ 0, got {} and {}",
                d.alpha1, d.alpha2
            )));
        }
        if self.student_epochs == 0 || self.teacher_epochs == 0 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        if self.optim.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        let o = &self.optim;
        if !(o.learning_rate > 0.0 && (0.0..1.0).contains(&o.momentum) && o.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "need learning_rate > 0, 0 ≤ momentum < 1, weight_decay ≥ 0; got {}, {}, {}",
                o.learning_rate, o.momentum, o.weight_decay
            )));
        }
        if !(o.lr_gamma > 0.0 && o.lr_gamma <= 1.0 && o.lr_milestones.iter().all(|m| (0.0..=1.0).contains(m))) {
            return Err(Error::Config(format!(
                "need 0 < lr_gamma ≤ 1 and milestones in [0, 1], got {} and {:?}",
                o.lr_gamma, o.lr_milestones
            )));
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return Err(Error::Config(format!("focal_gamma must be ≥ 0, got {}", self.focal_gamma)));
        }
        let e = &self.eval;
        for (name, v) in [("score_thresh", e.score_thresh), ("nms_iou", e.nms_iou)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if !(0.0 < e.bg_iou && e.bg_iou < e.fg_iou && e.fg_iou < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < bg_iou < fg_iou < 1, got {} and {}",
                e.bg_iou, e.fg_iou
            )));
        }
        self.teacher_arch().validate()?;
        self.student_arch().validate()?;
        Ok(())
    }

    pub fn teacher_arch(&self) -> Architecture {
        self.teacher.architecture(self.data.spec.stride, self.data.spec.num_classes)
    }

    pub fn student_arch(&self) -> Architecture {
        self.student.architecture(self.data.spec.stride, self.data.spec.num_classes)
    }

    pub fn execution(&self) -> Execution {
        if self.parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}
