//! IoU, AP50 and the per-object tile-count statistic.

use serde::Serialize;

use crate::bbox::{Annotation, BBox};
use crate::error::{Error, Result};
use crate::teacher::PseudoLabel;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) as f64 - a.x_min.max(b.x_min) as f64).max(0.0);
    let ih = (a.y_max.min(b.y_max) as f64 - a.y_min.max(b.y_min) as f64).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    /// AP50 per class; `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes that have ground truth; 0 when there is none at all.
    pub mean_ap50: f64,
    /// Raw precision/recall points per class, in score order.
    pub pr_curves: Vec<Vec<PrPoint>>,
    pub n_images: usize,
}

pub const AP_IOU_THRESHOLD: f64 = 0.5;

/// AP at IoU 0.5 with all-point interpolation.
///
/// Predictions of a class are visited by descending score (ties: image index,
/// then position within the image). Each one matches the unmatched ground
/// truth box of the same class and image with the highest IoU, if that IoU is
/// at least 0.5.
pub fn ap50(preds: &[Vec<PseudoLabel>], gts: &[Vec<Annotation>], num_classes: usize) -> Result<EvalResult> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(format!(
            "{} prediction lists for {} ground-truth lists",
            preds.len(),
            gts.len()
        )));
    }
    let out_of_range = preds
        .iter()
        .flatten()
        .map(|p| p.class_id)
        .chain(gts.iter().flatten().map(|g| g.class_id))
        .find(|&c| c >= num_classes);
    if let Some(c) = out_of_range {
        return Err(Error::invalid(format!("class id {c} >= num_classes {num_classes}")));
    }

    let mut per_class = Vec::with_capacity(num_classes);
    let mut pr_curves = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let n_gt: usize = gts.iter().map(|g| g.iter().filter(|a| a.class_id == class).count()).sum();
        let mut cands: Vec<(usize, usize, &PseudoLabel)> = preds
            .iter()
            .enumerate()
            .flat_map(|(img, ps)| ps.iter().enumerate().map(move |(k, p)| (img, k, p)))
            .filter(|(_, _, p)| p.class_id == class)
            .collect();
        cands.sort_by(|a, b| {
            b.2.score
                .total_cmp(&a.2.score)
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });

        let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0usize;
        let mut curve = Vec::with_capacity(cands.len());
        for (k, (img, _, p)) in cands.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts[*img].iter().enumerate() {
                if g.class_id != class || matched[*img][gi] {
                    continue;
                }
                let o = iou(&p.bbox, &g.bbox);
                if o >= AP_IOU_THRESHOLD && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((gi, o));
                }
            }
            if let Some((gi, _)) = best {
                matched[*img][gi] = true;
                tp += 1;
            }
            if n_gt > 0 {
                curve.push(PrPoint {
                    recall: tp as f64 / n_gt as f64,
                    precision: tp as f64 / (k + 1) as f64,
                });
            }
        }
        per_class.push((n_gt > 0).then(|| all_point_ap(&curve)));
        pr_curves.push(curve);
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean_ap50 = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(EvalResult {
        per_class,
        mean_ap50,
        pr_curves,
        n_images: gts.len(),
    })
}

/// Area under the precision envelope, summed at every recall change.
fn all_point_ap(curve: &[PrPoint]) -> f64 {
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, pt) in curve.iter().enumerate() {
        if pt.recall > prev_recall {
            let envelope = curve[k..].iter().map(|p| p.precision).fold(0.0, f64::max);
            ap += (pt.recall - prev_recall) * envelope;
            prev_recall = pt.recall;
        }
    }
    ap
}

/// Average number of tiles each box overlaps with strictly positive area.
pub fn compute_no(boxes: &[BBox], image_size: (u32, u32), tiles_per_axis: usize) -> Result<f64> {
    if tiles_per_axis == 0 {
        return Err(Error::invalid("tiles_per_axis must be positive"));
    }
    if boxes.is_empty() {
        return Err(Error::invalid("cannot average over zero boxes"));
    }
    let (w, h) = (image_size.0 as f64, image_size.1 as f64);
    if w <= 0.0 || h <= 0.0 {
        return Err(Error::invalid("image size must be positive"));
    }
    let spans = |lo: f64, hi: f64, extent: f64| -> usize {
        let t = extent / tiles_per_axis as f64;
        (0..tiles_per_axis)
            .filter(|&i| hi.min((i + 1) as f64 * t) - lo.max(i as f64 * t) > 0.0)
            .count()
    };
    let mut total = 0usize;
    for (k, b) in boxes.iter().enumerate() {
        b.validate()?;
        if !b.within(image_size.0 as f32, image_size.1 as f32) {
            return Err(Error::invalid(format!("box {k} lies outside the {}x{} image", image_size.0, image_size.1)));
        }
        total += spans(b.x_min as f64, b.x_max as f64, w) * spans(b.y_min as f64, b.y_max as f64, h);
    }
    Ok(total as f64 / boxes.len() as f64)
}
