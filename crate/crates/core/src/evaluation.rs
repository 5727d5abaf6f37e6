//! Detection post-processing and COCO-style metrics: greedy per-class NMS,
//! 101-point interpolated AP pooled over a whole image set, the per-anchor
//! teacher/student score gap, and a reduced TIDE analysis that measures how
//! much AP classification and localization false positives cost.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::Prediction;
use crate::error::{Error, Result};
use crate::geometry::{decode_one, iou, AnchorGrid, BBox};
use crate::numerics::sigmoid;
use crate::synthdata::SceneObject;

pub const DEFAULT_SCORE_THRESH: f64 = 0.05;
pub const DEFAULT_NMS_IOU: f64 = 0.6;
pub const FG_IOU: f64 = 0.5;
pub const BG_IOU: f64 = 0.1;

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Detections and ground truth of one image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalImage {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<SceneObject>,
}

/// Per class: threshold sigmoid scores, decode and clip boxes, then greedy
/// NMS in descending score order (lower anchor index first on ties).
pub fn postprocess(pred: &Prediction, anchors: &AnchorGrid, score_thresh: f64, nms_iou: f64) -> Vec<Detection> {
    let (w, h) = anchors.image_size();
    let mut out = Vec::new();
    for class_id in 0..pred.logits.cols() {
        let mut candidates: Vec<(usize, Detection)> = (0..pred.logits.rows())
            .filter_map(|i| {
                let score = sigmoid(pred.logits.get(i, class_id));
                if score < score_thresh {
                    return None;
                }
                let bbox = decode_one(anchors.points()[i], anchors.stride(), pred.offsets.row(i))
                    .clip(w as f64, h as f64)?;
                Some((i, Detection { bbox, class_id, score }))
            })
            .collect();
        candidates.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
        let mut kept: Vec<Detection> = Vec::new();
        for (_, det) in candidates {
            if kept.iter().all(|k| iou(&k.bbox, &det.bbox) <= nms_iou) {
                kept.push(det);
            }
        }
        out.extend(kept);
    }
    out
}

fn gt_classes(images: &[EvalImage]) -> BTreeSet<usize> {
    images
        .iter()
        .flat_map(|im| im.ground_truth.iter().map(|g| g.class_id))
        .collect()
}

/// Greedy COCO matching for one class over all images. Returns, in ranked
/// order, `(image, detection, is_tp)` and the class's ground-truth count.
fn match_class(images: &[EvalImage], class_id: usize, iou_thresh: f64) -> (Vec<(usize, usize, bool)>, usize) {
    let mut ranked: Vec<(usize, usize, f64)> = images
        .iter()
        .enumerate()
        .flat_map(|(ii, im)| {
            im.detections
                .iter()
                .enumerate()
                .filter(|(_, d)| d.class_id == class_id)
                .map(move |(di, d)| (ii, di, d.score))
        })
        .collect();
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

    let mut taken: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.ground_truth.len()]).collect();
    let num_gt = images
        .iter()
        .map(|im| im.ground_truth.iter().filter(|g| g.class_id == class_id).count())
        .sum();

    let flags = ranked
        .into_iter()
        .map(|(ii, di, _)| {
            let det = &images[ii].detections[di];
            let best = images[ii]
                .ground_truth
                .iter()
                .enumerate()
                .filter(|(gi, g)| g.class_id == class_id && !taken[ii][*gi])
                .map(|(gi, g)| (gi, iou(&det.bbox, &g.bbox)))
                .filter(|&(_, u)| u >= iou_thresh)
                .fold(None::<(usize, f64)>, |best, cur| match best {
                    Some(b) if b.1 >= cur.1 => Some(b),
                    _ => Some(cur),
                });
            if let Some((gi, _)) = best {
                taken[ii][gi] = true;
            }
            (ii, di, best.is_some())
        })
        .collect();
    (flags, num_gt)
}

/// 101-point interpolated AP of a ranked TP/FP sequence.
pub fn interpolated_ap(tp_ranked: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || tp_ranked.is_empty() {
        return 0.0;
    }
    let mut tp_cum = Vec::with_capacity(tp_ranked.len());
    let mut precision = Vec::with_capacity(tp_ranked.len());
    let mut tp = 0usize;
    for (k, &hit) in tp_ranked.iter().enumerate() {
        tp += usize::from(hit);
        tp_cum.push(tp);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for step in 0..=100usize {
        // recall ≥ step/100  ⇔  100·tp ≥ step·num_gt, compared in integers.
        while k < tp_cum.len() && 100 * tp_cum[k] < step * num_gt {
            k += 1;
        }
        if k == tp_cum.len() {
            break;
        }
        sum += precision[k];
    }
    sum / 101.0
}

/// AP for every class that has ground truth somewhere in `images`.
pub fn per_class_ap(images: &[EvalImage], iou_thresh: f64) -> Result<BTreeMap<usize, f64>> {
    let classes = gt_classes(images);
    if classes.is_empty() {
        return Err(Error::UndefinedAp("no ground-truth objects".into()));
    }
    Ok(classes
        .into_iter()
        .map(|c| {
            let (flags, num_gt) = match_class(images, c, iou_thresh);
            let tp: Vec<bool> = flags.iter().map(|f| f.2).collect();
            (c, interpolated_ap(&tp, num_gt))
        })
        .collect())
}

/// Mean over ground-truth classes of the interpolated AP at one IoU threshold.
pub fn average_precision(images: &[EvalImage], iou_thresh: f64) -> Result<f64> {
    let per_class = per_class_ap(images, iou_thresh)?;
    Ok(per_class.values().sum::<f64>() / per_class.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorDecomposition {
    pub cls_dap: f64,
    pub loc_dap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub per_class_ap: BTreeMap<usize, f64>,
    pub error_decomposition: ErrorDecomposition,
}

pub fn evaluate(images: &[EvalImage]) -> Result<EvalReport> {
    evaluate_with(images, FG_IOU, BG_IOU)
}

/// Full report with the error decomposition at the given IoU bounds.
pub fn evaluate_with(images: &[EvalImage], fg_iou: f64, bg_iou: f64) -> Result<EvalReport> {
    let thresholds = coco_iou_thresholds();
    let per_threshold: Vec<BTreeMap<usize, f64>> = thresholds
        .iter()
        .map(|&t| per_class_ap(images, t))
        .collect::<Result<_>>()?;
    let mean_of = |m: &BTreeMap<usize, f64>| m.values().sum::<f64>() / m.len() as f64;
    let aps: Vec<f64> = per_threshold.iter().map(mean_of).collect();
    let classes: Vec<usize> = per_threshold[0].keys().copied().collect();
    let per_class_ap = classes
        .into_iter()
        .map(|c| (c, per_threshold.iter().map(|m| m[&c]).sum::<f64>() / thresholds.len() as f64))
        .collect();
    Ok(EvalReport {
        map: aps.iter().sum::<f64>() / aps.len() as f64,
        ap50: aps[0],
        ap75: aps[5],
        per_class_ap,
        error_decomposition: error_decomposition(images, fg_iou, bg_iou)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum FpKind {
    Cls { class_id: usize },
    Loc { bbox: BBox },
    Other,
}

fn classify_fp(det: &Detection, gts: &[SceneObject], fg_iou: f64, bg_iou: f64) -> FpKind {
    let best_other = gts
        .iter()
        .filter(|g| g.class_id != det.class_id)
        .map(|g| (g, iou(&det.bbox, &g.bbox)))
        .fold(None::<(&SceneObject, f64)>, |b, c| match b {
            Some(b) if b.1 >= c.1 => Some(b),
            _ => Some(c),
        });
    if let Some((g, u)) = best_other {
        if u >= fg_iou {
            return FpKind::Cls { class_id: g.class_id };
        }
    }
    let best_same = gts
        .iter()
        .filter(|g| g.class_id == det.class_id)
        .map(|g| (g, iou(&det.bbox, &g.bbox)))
        .fold(None::<(&SceneObject, f64)>, |b, c| match b {
            Some(b) if b.1 >= c.1 => Some(b),
            _ => Some(c),
        });
    match best_same {
        Some((g, u)) if u >= bg_iou && u < fg_iou => FpKind::Loc { bbox: g.bbox },
        _ => FpKind::Other,
    }
}

/// AP at `fg_iou` after correcting one error type, minus the baseline AP.
fn fixed_ap(images: &[EvalImage], fixes: &[Vec<Option<Detection>>], fg_iou: f64) -> Result<f64> {
    let mut patched: Vec<EvalImage> = images.to_vec();
    let mut fixed_flags: Vec<Vec<bool>> = Vec::with_capacity(images.len());
    for (im, fx) in patched.iter_mut().zip(fixes) {
        let mut flags = vec![false; im.detections.len()];
        for (di, f) in fx.iter().enumerate() {
            if let Some(d) = f {
                im.detections[di] = *d;
                flags[di] = true;
            }
        }
        fixed_flags.push(flags);
    }
    // A corrected detection that still ends up unmatched duplicates a
    // ground truth some higher-scored detection already claimed: drop it.
    let mut drop: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); images.len()];
    for c in gt_classes(&patched) {
        let (flags, _) = match_class(&patched, c, fg_iou);
        for (ii, di, tp) in flags {
            if fixed_flags[ii][di] && !tp {
                drop[ii].insert(di);
            }
        }
    }
    for (im, d) in patched.iter_mut().zip(&drop) {
        let mut idx = 0;
        im.detections.retain(|_| {
            let keep = !d.contains(&idx);
            idx += 1;
            keep
        });
    }
    average_precision(&patched, fg_iou)
}

/// Reduced TIDE: the AP gained at `fg_iou` by relabeling classification
/// errors (IoU ≥ `fg_iou` with a ground truth of another class) and by
/// snapping localization errors (same-class IoU in `[bg_iou, fg_iou)`) onto
/// their ground-truth box.
pub fn error_decomposition(images: &[EvalImage], fg_iou: f64, bg_iou: f64) -> Result<ErrorDecomposition> {
    if !(0.0 < bg_iou && bg_iou < fg_iou && fg_iou < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < bg_iou < fg_iou < 1, got bg={bg_iou} fg={fg_iou}"
        )));
    }
    let baseline = average_precision(images, fg_iou)?;
    let mut is_tp: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.detections.len()]).collect();
    for c in 0..=images
        .iter()
        .flat_map(|im| im.detections.iter().map(|d| d.class_id))
        .max()
        .unwrap_or(0)
    {
        for (ii, di, tp) in match_class(images, c, fg_iou).0 {
            is_tp[ii][di] = tp;
        }
    }

    let mut cls_fixes = Vec::with_capacity(images.len());
    let mut loc_fixes = Vec::with_capacity(images.len());
    for (ii, im) in images.iter().enumerate() {
        let mut cf = vec![None; im.detections.len()];
        let mut lf = vec![None; im.detections.len()];
        for (di, det) in im.detections.iter().enumerate() {
            if is_tp[ii][di] {
                continue;
            }
            match classify_fp(det, &im.ground_truth, fg_iou, bg_iou) {
                FpKind::Cls { class_id } => cf[di] = Some(Detection { class_id, ..*det }),
                FpKind::Loc { bbox } => lf[di] = Some(Detection { bbox, ..*det }),
                FpKind::Other => {}
            }
        }
        cls_fixes.push(cf);
        loc_fixes.push(lf);
    }
    Ok(ErrorDecomposition {
        cls_dap: fixed_ap(images, &cls_fixes, fg_iou)? - baseline,
        loc_dap: fixed_ap(images, &loc_fixes, fg_iou)? - baseline,
    })
}

/// Per anchor: `Σ_j |σ(l_t) - σ(l_s)|`.
pub fn score_gap_map(teacher: &Prediction, student: &Prediction) -> Result<Vec<f64>> {
    if teacher.logits.shape() != student.logits.shape() {
        return Err(Error::invalid(format!(
            "score gap: teacher {:?} vs student {:?}",
            teacher.logits.shape(),
            student.logits.shape()
        )));
    }
    Ok(teacher
        .logits
        .iter_rows()
        .zip(student.logits.iter_rows())
        .map(|(t, s)| t.iter().zip(s).map(|(a, b)| (sigmoid(*a) - sigmoid(*b)).abs()).sum())
        .collect())
}

/// Writes a gap map as a `rows × cols` CSV grid matching the anchor lattice.
pub fn gap_map_csv(gaps: &[f64], grid_shape: (usize, usize)) -> Result<String> {
    let (rows, cols) = grid_shape;
    if gaps.len() != rows * cols {
        return Err(Error::invalid(format!(
            "{} gap values for a {rows}x{cols} grid",
            gaps.len()
        )));
    }
    let mut out = String::new();
    for r in 0..rows {
        let line: Vec<String> = gaps[r * cols..(r + 1) * cols].iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(",")).expect("writing to a String");
    }
    Ok(out)
}

pub fn write_gap_map_csv(path: &Path, gaps: &[f64], grid_shape: (usize, usize)) -> Result<()> {
    let text = gap_map_csv(gaps, grid_shape)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
