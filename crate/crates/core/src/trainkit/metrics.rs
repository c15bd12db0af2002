use crate::error::{Error, Result};
use crate::geometry::{sq_dist, Point};

/// Distance under which a predicted keypoint matches a ground-truth one.
pub const KEYPOINT_THRESHOLD: f64 = 0.01;

fn check_len(pred: usize, truth: usize) -> Result<()> {
    if pred == truth {
        Ok(())
    } else {
        Err(Error::Dimension {
            op: "metrics",
            lhs: vec![pred],
            rhs: vec![truth],
        })
    }
}

/// Fraction of positions where `pred` equals `truth` (0 for empty input).
pub fn overall_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_len(pred.len(), truth.len())?;
    if truth.is_empty() {
        return Ok(0.0);
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Unweighted mean of per-class accuracies over classes that occur in
/// `truth`. Classes below `num_classes` with no samples are skipped with
/// a warning.
pub fn mean_class_accuracy(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<f64> {
    check_len(pred.len(), truth.len())?;
    let mut hits = vec![0usize; num_classes];
    let mut totals = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if t >= num_classes {
            return Err(Error::Index { index: t, extent: num_classes });
        }
        totals[t] += 1;
        hits[t] += usize::from(p == t);
    }
    let empty: Vec<usize> = (0..num_classes).filter(|&c| totals[c] == 0).collect();
    if !empty.is_empty() {
        log::warn!("classes {empty:?} have no samples and are left out of mAcc");
    }
    let accs: Vec<f64> = (0..num_classes)
        .filter(|&c| totals[c] > 0)
        .map(|c| hits[c] as f64 / totals[c] as f64)
        .collect();
    Ok(if accs.is_empty() {
        0.0
    } else {
        accs.iter().sum::<f64>() / accs.len() as f64
    })
}

/// Mean IoU of one shape over the parts present in its prediction or
/// ground truth.
pub fn shape_part_iou(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_len(pred.len(), truth.len())?;
    let mut parts: Vec<usize> = pred.iter().chain(truth).copied().collect();
    parts.sort_unstable();
    parts.dedup();
    if parts.is_empty() {
        return Ok(1.0);
    }
    let mut total = 0.0;
    for &part in &parts {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&p, &t) in pred.iter().zip(truth) {
            let (a, b) = (p == part, t == part);
            inter += usize::from(a && b);
            union += usize::from(a || b);
        }
        total += inter as f64 / union as f64;
    }
    Ok(total / parts.len() as f64)
}

/// Instance mIoU: mean over shapes of [`shape_part_iou`].
pub fn instance_miou(shapes: &[(Vec<usize>, Vec<usize>)]) -> Result<f64> {
    if shapes.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (p, t) in shapes {
        sum += shape_part_iou(p, t)?;
    }
    Ok(sum / shapes.len() as f64)
}

fn within(a: &Point, b: &Point, thr: f64) -> bool {
    sq_dist(a, b) <= thr * thr
}

/// `TP / (TP + FP + FN)` where a prediction is a true positive when it
/// lies within `thr` of some ground-truth keypoint, and a ground-truth
/// keypoint is missed when no prediction lies within `thr`. Both sets
/// empty count as a perfect match.
pub fn keypoint_iou(pred: &[Point], truth: &[Point], thr: f64) -> f64 {
    let tp = pred.iter().filter(|p| truth.iter().any(|t| within(p, t, thr))).count();
    let fp = pred.len() - tp;
    let fn_ = truth.iter().filter(|t| !pred.iter().any(|p| within(p, t, thr))).count();
    let denom = tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        tp as f64 / denom as f64
    }
}

/// Average precision of scored keypoint predictions. Predictions are
/// visited by descending score (ties by position) and each one claims the
/// nearest unclaimed ground-truth keypoint within `thr`. AP is the mean
/// of the precision at every claim, divided over all ground truth.
pub fn keypoint_ap(scored: &[(f64, Point)], truth: &[Point], thr: f64) -> f64 {
    if truth.is_empty() {
        return if scored.is_empty() { 1.0 } else { 0.0 };
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0).then(a.cmp(&b)));
    let mut claimed = vec![false; truth.len()];
    let (mut tp, mut ap) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        let p = &scored[i].1;
        let hit = (0..truth.len())
            .filter(|&t| !claimed[t] && within(p, &truth[t], thr))
            .min_by(|&a, &b| sq_dist(p, &truth[a]).total_cmp(&sq_dist(p, &truth[b])));
        if let Some(t) = hit {
            claimed[t] = true;
            tp += 1;
            ap += tp as f64 / (rank + 1) as f64;
        }
    }
    ap / truth.len() as f64
}
