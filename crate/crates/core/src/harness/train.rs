//! Minibatch training for supervised and distilled detectors, plus the
//! prediction and evaluation helpers every command shares.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{
    backward, extract_patches, forward_features, sgd_step, Architecture, DetectorParams, Gradients, OptimizerState,
    Prediction,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_with, postprocess, EvalImage, EvalReport};
use crate::geometry::{build_anchor_grid, AnchorGrid};
use crate::losses::{distill_loss, supervised_cls_loss, supervised_loc_loss, DistillWeights};
use crate::parallel::{map_ordered, Execution};
use crate::synthdata::{assign_labels, AssignedTargets, Dataset, SceneObject};

use super::config::{EvalConfig, OptimConfig};

/// A scene with its patch features and assigned targets precomputed.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub features: Array2<f64>,
    pub targets: AssignedTargets,
    pub objects: Vec<SceneObject>,
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub anchors: AnchorGrid,
    pub patch: usize,
    pub num_classes: usize,
    pub scenes: Vec<PreparedScene>,
}

impl PreparedData {
    pub fn new(dataset: &Dataset, patch: usize, exec: Execution) -> Result<Self> {
        let spec = &dataset.spec;
        let anchors = build_anchor_grid(spec.width, spec.height, spec.stride)?;
        let scenes = map_ordered(&dataset.scenes, exec, |_, scene| {
            Ok(PreparedScene {
                features: extract_patches(&scene.image, &anchors, patch)?,
                targets: assign_labels(scene, &anchors, spec.num_classes)?,
                objects: scene.objects.clone(),
            })
        })
        .into_iter()
        .collect::<Result<_>>()?;
        Ok(Self {
            anchors,
            patch,
            num_classes: spec.num_classes,
            scenes,
        })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    fn check(&self, arch: &Architecture) -> Result<()> {
        if arch.patch != self.patch || arch.stride as f64 != self.anchors.stride() || arch.num_classes != self.num_classes {
            return Err(Error::ArchitectureMismatch {
                expected: format!(
                    "patch={} stride={} K={}",
                    self.patch,
                    self.anchors.stride(),
                    self.num_classes
                ),
                found: arch.to_string(),
            });
        }
        Ok(())
    }
}

pub fn predict_all(params: &DetectorParams, data: &PreparedData, exec: Execution) -> Result<Vec<Prediction>> {
    data.check(&params.arch)?;
    map_ordered(&data.scenes, exec, |_, s| forward_features(params, &s.features).map(|(p, _)| p))
        .into_iter()
        .collect()
}

pub fn eval_images(preds: &[Prediction], data: &PreparedData, eval: &EvalConfig) -> Vec<EvalImage> {
    preds
        .iter()
        .zip(&data.scenes)
        .map(|(p, s)| EvalImage {
            detections: postprocess(p, &data.anchors, eval.score_thresh, eval.nms_iou),
            ground_truth: s.objects.clone(),
        })
        .collect()
}

pub fn evaluate_predictions(preds: &[Prediction], data: &PreparedData, eval: &EvalConfig) -> Result<EvalReport> {
    evaluate_with(&eval_images(preds, data, eval), eval.fg_iou, eval.bg_iou)
}

pub fn evaluate_model(
    params: &DetectorParams,
    data: &PreparedData,
    eval: &EvalConfig,
    exec: Execution,
) -> Result<EvalReport> {
    evaluate_predictions(&predict_all(params, data, exec)?, data, eval)
}

/// Unweighted loss terms of one scene or averaged over many.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub sup_cls: f64,
    pub sup_loc: f64,
    pub distill_cls: f64,
    pub distill_loc: f64,
}

impl LossTerms {
    fn add(&mut self, o: &LossTerms) {
        self.sup_cls += o.sup_cls;
        self.sup_loc += o.sup_loc;
        self.distill_cls += o.distill_cls;
        self.distill_loc += o.distill_loc;
    }

    fn scaled(&self, f: f64) -> Self {
        Self {
            sup_cls: self.sup_cls * f,
            sup_loc: self.sup_loc * f,
            distill_cls: self.distill_cls * f,
            distill_loc: self.distill_loc * f,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.sup_cls, self.sup_loc, self.distill_cls, self.distill_loc]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Frozen teacher outputs for every training scene, plus loss weights.
#[derive(Debug, Clone, Copy)]
pub struct DistillSignal<'a> {
    pub teacher: &'a [Prediction],
    pub weights: DistillWeights,
}

/// Loss terms and parameter gradients of one scene. The objective is
/// `sup_cls + sup_loc + α₁·distill_cls + α₂·distill_loc`.
pub fn scene_step(
    params: &DetectorParams,
    scene: &PreparedScene,
    anchors: &AnchorGrid,
    focal_gamma: f64,
    teacher: Option<(&Prediction, &DistillWeights)>,
) -> Result<(LossTerms, Gradients)> {
    let (pred, cache) = forward_features(params, &scene.features)?;
    let cls = supervised_cls_loss(&pred.logits, &scene.targets.labels, focal_gamma)?;
    let loc = supervised_loc_loss(&pred.offsets, anchors, &scene.targets.box_targets)?;
    let mut grad_logits = cls.grad_logits.expect("cls loss has logit gradients");
    let mut grad_offsets = loc.grad_offsets.expect("loc loss has offset gradients");
    let mut terms = LossTerms {
        sup_cls: cls.value,
        sup_loc: loc.value,
        ..LossTerms::default()
    };
    if let Some((t, weights)) = teacher {
        let d = distill_loss(&pred, t, anchors, weights)?;
        terms.distill_cls = d.cls;
        terms.distill_loc = d.loc;
        if let Some(g) = &d.total.grad_logits {
            grad_logits.add_scaled(g, 1.0)?;
        }
        if let Some(g) = &d.total.grad_offsets {
            grad_offsets.add_scaled(g, 1.0)?;
        }
    }
    let grads = backward(params, &cache, &grad_logits, &grad_offsets)?;
    Ok((terms, grads))
}

/// Mean gradient and mean loss terms over `indices`, reduced in index order.
pub fn batch_gradient(
    params: &DetectorParams,
    data: &PreparedData,
    indices: &[usize],
    focal_gamma: f64,
    distill: Option<&DistillSignal<'_>>,
    exec: Execution,
) -> Result<(LossTerms, Gradients)> {
    if indices.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let per_scene = map_ordered(indices, exec, |_, &i| {
        let teacher = distill.map(|d| (&d.teacher[i], &d.weights));
        scene_step(params, &data.scenes[i], &data.anchors, focal_gamma, teacher)
    });
    let mut terms = LossTerms::default();
    let mut grads = params.zeros_like();
    for r in per_scene {
        let (t, g) = r?;
        terms.add(&t);
        grads.add_scaled(&g, 1.0)?;
    }
    let inv = 1.0 / indices.len() as f64;
    grads.scale(inv);
    Ok((terms.scaled(inv), grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub run: String,
    pub seed: u64,
    pub epoch: usize,
    pub train: LossTerms,
    pub val: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub final_report: EvalReport,
    pub best_map: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSettings<'a> {
    pub name: String,
    pub arch: Architecture,
    pub epochs: usize,
    pub optim: OptimConfig,
    pub focal_gamma: f64,
    pub seed: u64,
    pub distill: Option<DistillSignal<'a>>,
    /// Start from these parameters instead of a seeded initialization.
    pub init: Option<DetectorParams>,
    pub eval: EvalConfig,
    pub exec: Execution,
}

/// Order in which epoch `epoch` visits the training scenes.
fn epoch_order(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Trains from `settings`, evaluating on `val` after every epoch.
/// `on_epoch` sees each record as soon as it exists.
pub fn train(
    train_data: &PreparedData,
    val_data: &PreparedData,
    settings: &TrainSettings<'_>,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<(DetectorParams, RunRecord)> {
    let start = Instant::now();
    train_data.check(&settings.arch)?;
    val_data.check(&settings.arch)?;
    if train_data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if settings.epochs == 0 || settings.optim.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be ≥ 1".into()));
    }
    if let Some(d) = &settings.distill {
        if d.teacher.len() != train_data.len() {
            return Err(Error::invalid(format!(
                "{} teacher predictions for {} training scenes",
                d.teacher.len(),
                train_data.len()
            )));
        }
    }
    let mut params = match &settings.init {
        Some(p) if p.arch != settings.arch => {
            return Err(Error::ArchitectureMismatch {
                expected: settings.arch.to_string(),
                found: p.arch.to_string(),
            })
        }
        Some(p) => p.clone(),
        None => DetectorParams::init(&settings.arch, settings.seed)?,
    };
    let o = settings.optim;
    let mut state = OptimizerState::new(&params, o.learning_rate, o.momentum, o.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    rng.set_stream(1);

    let mut epochs = Vec::with_capacity(settings.epochs);
    for epoch in 1..=settings.epochs {
        state.learning_rate = o.learning_rate_at(epoch, settings.epochs);
        let order = epoch_order(&mut rng, train_data.len());
        let mut sum = LossTerms::default();
        for batch in order.chunks(o.batch_size) {
            let (terms, grads) = batch_gradient(
                &params,
                train_data,
                batch,
                settings.focal_gamma,
                settings.distill.as_ref(),
                settings.exec,
            )?;
            if !terms.is_finite() {
                return Err(Error::invalid(format!("non-finite loss in epoch {epoch}")));
            }
            sum.add(&terms.scaled(batch.len() as f64));
            sgd_step(&mut params, &grads, &mut state)?;
        }
        if !params.is_finite() {
            return Err(Error::invalid(format!("parameters diverged in epoch {epoch}")));
        }
        let record = EpochRecord {
            run: settings.name.clone(),
            seed: settings.seed,
            epoch,
            train: sum.scaled(1.0 / train_data.len() as f64),
            val: evaluate_model(&params, val_data, &settings.eval, settings.exec)?,
        };
        on_epoch(&record)?;
        epochs.push(record);
    }
    let final_report = epochs.last().expect("at least one epoch").val.clone();
    let best_map = epochs.iter().map(|e| e.val.map).fold(f64::NEG_INFINITY, f64::max);
    Ok((
        params,
        RunRecord {
            run: settings.name.clone(),
            seed: settings.seed,
            epochs,
            final_report,
            best_map,
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    ))
}
