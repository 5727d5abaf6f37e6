//! Supervised and distillation losses with analytic gradients with respect
//! to the student's outputs.
//!
//! The distillation losses follow one fixed recipe per image:
//!
//! 1. `p_t = σ(l_t)`, `p_s = σ(l_s)` under the sigmoid protocol;
//! 2. `w = |p_t - p_s|`, held constant during differentiation;
//! 3. classification: `Σ_ij w_ij · BCE(p_s_ij, p_t_ij)`;
//! 4. localization: `Σ_i max_j(w_ij) · (1 - IoU(b_s_i, b_t_i))`;
//! 5. total: `α₁ · cls + α₂ · loc`.
//!
//! Sums are divided by the number of positions `n` unless
//! [`Normalization::Sum`] is requested.

use serde::{Deserialize, Serialize};

use crate::detector::Prediction;
use crate::error::{Error, Result};
use crate::geometry::{iou_grad_student, iou_grad_wrt_offsets, AnchorGrid, BBox};
use crate::numerics::{log_sigmoid, sigmoid, Grid2};
use crate::protocols::{log_softmax_row, sigmoid_protocol, Protocol, ScoreMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Divide by the number of positions.
    #[default]
    Mean,
    /// Plain sums.
    Sum,
}

impl Normalization {
    fn divisor(self, n: usize) -> f64 {
        match self {
            Normalization::Mean => n.max(1) as f64,
            Normalization::Sum => 1.0,
        }
    }
}

/// One-hot rows for positives, all-zero rows for background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap(Grid2);

impl LabelMap {
    pub fn new(grid: Grid2) -> Result<Self> {
        for (i, row) in grid.iter_rows().enumerate() {
            if row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::invalid(format!("label row {i} has non-binary entries")));
            }
            if row.iter().filter(|&&v| v == 1.0).count() > 1 {
                return Err(Error::invalid(format!("label row {i} is not one-hot")));
            }
        }
        Ok(Self(grid))
    }

    /// Builds labels from an optional class per position.
    pub fn from_classes(num_classes: usize, classes: &[Option<usize>]) -> Result<Self> {
        let mut g = Grid2::zeros(classes.len(), num_classes);
        for (i, c) in classes.iter().enumerate() {
            if let Some(c) = *c {
                if c >= num_classes {
                    return Err(Error::invalid(format!("class {c} out of range at row {i}")));
                }
                g.set(i, c, 1.0);
            }
        }
        Ok(Self(g))
    }

    pub fn grid(&self) -> &Grid2 {
        &self.0
    }

    pub fn positive_rows(&self) -> usize {
        self.0.iter_rows().filter(|r| r.contains(&1.0)).count()
    }
}

/// Frozen importance weights `|σ(l_t) - σ(l_s)|`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap(Grid2);

impl WeightMap {
    pub fn grid(&self) -> &Grid2 {
        &self.0
    }

    /// `max_j w_ij` for every position.
    pub fn row_max(&self) -> Vec<f64> {
        self.0
            .iter_rows()
            .map(|r| r.iter().copied().fold(0.0, f64::max))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad_logits: Option<Grid2>,
    pub grad_offsets: Option<Grid2>,
}

impl LossResult {
    fn zero(pred_shape: Option<(usize, usize)>, off_shape: Option<(usize, usize)>) -> Self {
        Self {
            value: 0.0,
            grad_logits: pred_shape.map(|(r, c)| Grid2::zeros(r, c)),
            grad_offsets: off_shape.map(|(r, c)| Grid2::zeros(r, c)),
        }
    }
}

fn same_shape(a: &Grid2, b: &Grid2, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "{what}: student {:?} vs teacher {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Focal-modulated binary cross-entropy against one-hot/zero labels,
/// normalized by `max(1, #positive rows)`. `focal_gamma = 0` is plain BCE.
/// The modulating factor `|y - p|^γ` is treated as a constant.
pub fn supervised_cls_loss(logits: &Grid2, labels: &LabelMap, focal_gamma: f64) -> Result<LossResult> {
    same_shape(logits, labels.grid(), "supervised classification")?;
    if focal_gamma.is_nan() || focal_gamma < 0.0 {
        return Err(Error::invalid(format!("focal gamma {focal_gamma} must be ≥ 0")));
    }
    let norm = labels.positive_rows().max(1) as f64;
    let mut grad = Grid2::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (idx, (&l, &y)) in logits.data().iter().zip(labels.grid().data()).enumerate() {
        let p = sigmoid(l);
        let modulator = if focal_gamma == 0.0 { 1.0 } else { (y - p).abs().powf(focal_gamma) };
        let bce = -y * log_sigmoid(l) - (1.0 - y) * log_sigmoid(-l);
        total += modulator * bce;
        grad.data_mut()[idx] = modulator * (p - y) / norm;
    }
    Ok(LossResult {
        value: total / norm,
        grad_logits: Some(grad),
        grad_offsets: None,
    })
}

/// `Σ_pos (1 - IoU(decode(o_i), target_i))` over positives, normalized by
/// `max(1, #positives)`.
pub fn supervised_loc_loss(
    offsets: &Grid2,
    anchors: &AnchorGrid,
    targets: &[Option<BBox>],
) -> Result<LossResult> {
    if offsets.cols() != 4 || offsets.rows() != anchors.len() || targets.len() != anchors.len() {
        return Err(Error::invalid(format!(
            "supervised localization: offsets {:?}, {} anchors, {} targets",
            offsets.shape(),
            anchors.len(),
            targets.len()
        )));
    }
    let norm = targets.iter().filter(|t| t.is_some()).count().max(1) as f64;
    let mut grad = Grid2::zeros(offsets.rows(), 4);
    let mut total = 0.0;
    for (i, target) in targets.iter().enumerate() {
        let Some(target) = target else { continue };
        let (u, g) = iou_grad_wrt_offsets(anchors.points()[i], anchors.stride(), offsets.row(i), target);
        total += 1.0 - u;
        for (dst, gk) in grad.row_mut(i).iter_mut().zip(g) {
            *dst = -gk / norm;
        }
    }
    Ok(LossResult {
        value: total / norm,
        grad_logits: None,
        grad_offsets: Some(grad),
    })
}

/// Mean over positions of `KL(softmax(l_t) ‖ softmax(l_s))`.
pub fn kl_distill_loss(student_logits: &Grid2, teacher_logits: &Grid2) -> Result<LossResult> {
    same_shape(student_logits, teacher_logits, "KL distillation")?;
    if student_logits.cols() < 2 {
        return Err(Error::invalid("KL distillation needs at least two classes"));
    }
    let n = student_logits.rows();
    let norm = n.max(1) as f64;
    let mut grad = Grid2::zeros(n, student_logits.cols());
    let mut total = 0.0;
    for i in 0..n {
        let log_pt = log_softmax_row(teacher_logits.row(i));
        let log_ps = log_softmax_row(student_logits.row(i));
        let mut row_kl = 0.0;
        for (j, (&lt, &ls)) in log_pt.iter().zip(&log_ps).enumerate() {
            let pt = lt.exp();
            row_kl += pt * (lt - ls);
            grad.set(i, j, (ls.exp() - pt) / norm);
        }
        total += row_kl;
    }
    Ok(LossResult {
        value: (total / norm).max(0.0),
        grad_logits: Some(grad),
        grad_offsets: None,
    })
}

pub fn build_weight_map(teacher: &ScoreMap, student: &ScoreMap) -> Result<WeightMap> {
    if teacher.protocol() != Protocol::Sigmoid || student.protocol() != Protocol::Sigmoid {
        return Err(Error::invalid(format!(
            "weight map needs sigmoid scores, got teacher {:?} and student {:?}",
            teacher.protocol(),
            student.protocol()
        )));
    }
    same_shape(student.scores(), teacher.scores(), "weight map")?;
    let data = teacher
        .scores()
        .data()
        .iter()
        .zip(student.scores().data())
        .map(|(t, s)| (t - s).abs())
        .collect();
    Ok(WeightMap(Grid2::from_vec(
        teacher.scores().rows(),
        teacher.scores().cols(),
        data,
    )?))
}

/// Binary classification distillation, returning the weight map used.
pub fn bc_distill_loss_weighted(
    student_logits: &Grid2,
    teacher_logits: &Grid2,
    normalization: Normalization,
) -> Result<(LossResult, WeightMap)> {
    same_shape(student_logits, teacher_logits, "binary distillation")?;
    let pt = sigmoid_protocol(teacher_logits)?;
    let ps = sigmoid_protocol(student_logits)?;
    let weights = build_weight_map(&pt, &ps)?;
    let norm = normalization.divisor(student_logits.rows());

    let mut grad = Grid2::zeros(student_logits.rows(), student_logits.cols());
    let mut total = 0.0;
    let iter = student_logits
        .data()
        .iter()
        .zip(pt.scores().data())
        .zip(ps.scores().data())
        .zip(weights.grid().data());
    for (idx, (((&ls, &t), &s), &w)) in iter.enumerate() {
        let bce = -(1.0 - t) * log_sigmoid(-ls) - t * log_sigmoid(ls);
        total += w * bce;
        grad.data_mut()[idx] = w * (s - t) / norm;
    }
    Ok((
        LossResult {
            value: total / norm,
            grad_logits: Some(grad),
            grad_offsets: None,
        },
        weights,
    ))
}

/// Binary classification distillation, averaged over positions.
pub fn bc_distill_loss(student_logits: &Grid2, teacher_logits: &Grid2) -> Result<LossResult> {
    bc_distill_loss_weighted(student_logits, teacher_logits, Normalization::Mean).map(|(r, _)| r)
}

/// IoU localization distillation with a per-position weight `max_j w_ij`.
pub fn iou_distill_loss_normalized(
    student_offsets: &Grid2,
    teacher_offsets: &Grid2,
    anchors: &AnchorGrid,
    weights: &WeightMap,
    normalization: Normalization,
) -> Result<LossResult> {
    same_shape(student_offsets, teacher_offsets, "IoU distillation")?;
    let n = student_offsets.rows();
    if student_offsets.cols() != 4 || anchors.len() != n || weights.grid().rows() != n {
        return Err(Error::invalid(format!(
            "IoU distillation: offsets {:?}, {} anchors, weights {:?}",
            student_offsets.shape(),
            anchors.len(),
            weights.grid().shape()
        )));
    }
    let norm = normalization.divisor(n);
    let mut grad = Grid2::zeros(n, 4);
    let mut total = 0.0;
    for (i, m) in weights.row_max().into_iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let (u, g) = iou_grad_student(
            anchors.points()[i],
            anchors.stride(),
            teacher_offsets.row(i),
            student_offsets.row(i),
        );
        total += m * (1.0 - u);
        for (dst, gk) in grad.row_mut(i).iter_mut().zip(g) {
            *dst = -m * gk / norm;
        }
    }
    Ok(LossResult {
        value: total / norm,
        grad_logits: None,
        grad_offsets: Some(grad),
    })
}

pub fn iou_distill_loss(
    student_offsets: &Grid2,
    teacher_offsets: &Grid2,
    anchors: &AnchorGrid,
    weights: &WeightMap,
) -> Result<LossResult> {
    iou_distill_loss_normalized(student_offsets, teacher_offsets, anchors, weights, Normalization::Mean)
}

/// Weights and switches for the combined distillation objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub use_cls: bool,
    pub use_loc: bool,
    pub normalization: Normalization,
}

impl DistillWeights {
    pub fn new(alpha1: f64, alpha2: f64) -> Self {
        Self {
            alpha1,
            alpha2,
            use_cls: true,
            use_loc: true,
            normalization: Normalization::Mean,
        }
    }
}

impl Default for DistillWeights {
    fn default() -> Self {
        Self::new(1.0, 4.0)
    }
}

/// The combined objective plus its unweighted parts.
#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub cls: f64,
    pub loc: f64,
    pub total: LossResult,
}

pub fn distill_loss(
    student: &Prediction,
    teacher: &Prediction,
    anchors: &AnchorGrid,
    weights: &DistillWeights,
) -> Result<DistillOutcome> {
    if !(weights.alpha1 >= 0.0 && weights.alpha2 >= 0.0) {
        return Err(Error::invalid(format!(
            "loss weights must be ≥ 0, got α1={} α2={}",
            weights.alpha1, weights.alpha2
        )));
    }
    let a1 = if weights.use_cls { weights.alpha1 } else { 0.0 };
    let a2 = if weights.use_loc { weights.alpha2 } else { 0.0 };
    let mut total = LossResult::zero(Some(student.logits.shape()), Some(student.offsets.shape()));
    if a1 == 0.0 && a2 == 0.0 {
        same_shape(&student.logits, &teacher.logits, "distillation")?;
        same_shape(&student.offsets, &teacher.offsets, "distillation")?;
        return Ok(DistillOutcome { cls: 0.0, loc: 0.0, total });
    }

    let (cls, w) = bc_distill_loss_weighted(&student.logits, &teacher.logits, weights.normalization)?;
    let loc = iou_distill_loss_normalized(
        &student.offsets,
        &teacher.offsets,
        anchors,
        &w,
        weights.normalization,
    )?;
    total.value = a1 * cls.value + a2 * loc.value;
    if let (Some(dst), Some(g)) = (total.grad_logits.as_mut(), cls.grad_logits.as_ref()) {
        dst.add_scaled(g, a1)?;
    }
    if let (Some(dst), Some(g)) = (total.grad_offsets.as_mut(), loc.grad_offsets.as_ref()) {
        dst.add_scaled(g, a2)?;
    }
    Ok(DistillOutcome {
        cls: cls.value,
        loc: loc.value,
        total,
    })
}

/// `α₁ · L_cls + α₂ · L_loc`, averaged over positions.
pub fn total_distill_loss(
    student: &Prediction,
    teacher: &Prediction,
    anchors: &AnchorGrid,
    alpha1: f64,
    alpha2: f64,
) -> Result<LossResult> {
    distill_loss(student, teacher, anchors, &DistillWeights::new(alpha1, alpha2)).map(|o| o.total)
}
