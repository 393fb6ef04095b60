//! Focal classification loss and smooth-L1 box regression over the dense map.
//!
//! A feature cell is positive for a target when the cell center lies inside
//! the box (half-open on the max side); when several boxes contain it the
//! smallest-area one wins, ties to the earlier target. Box targets are
//! `((bx - cx) / s, (by - cy) / s, ln(bw / s), ln(bh / s))` for cell center
//! `(cx, cy)` and stride `s`. Both terms are normalized by the number of
//! positive cells in the batch, or 1 when there are none, unless the config
//! fixes the normalizer.

use crate::bbox::{Annotation, BBox};
use crate::error::{Error, Result};
use crate::teacher::PseudoLabel;
use crate::tensor::{Scalar, Tensor4};

use super::model::DenseDetections;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
    /// Divide both terms by this instead of the positive-cell count.
    pub fixed_normalizer: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            smooth_l1_beta: 1.0,
            fixed_normalizer: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub l_cls: f64,
    pub l_reg: f64,
    pub n_pos: usize,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.l_cls + self.l_reg
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellTarget {
    pub class_id: usize,
    pub deltas: [f64; 4],
}

impl From<PseudoLabel> for Annotation {
    fn from(p: PseudoLabel) -> Self {
        Annotation {
            class_id: p.class_id,
            bbox: p.bbox,
        }
    }
}

pub fn cell_center(row: usize, col: usize, stride: usize) -> (f64, f64) {
    let s = stride as f64;
    ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
}

pub fn encode_box(b: &BBox, center: (f64, f64), stride: usize) -> [f64; 4] {
    let s = stride as f64;
    let bx = 0.5 * (b.x_min as f64 + b.x_max as f64);
    let by = 0.5 * (b.y_min as f64 + b.y_max as f64);
    [
        (bx - center.0) / s,
        (by - center.1) / s,
        (b.width() as f64 / s).ln(),
        (b.height() as f64 / s).ln(),
    ]
}

/// Target per cell, row-major over the `side x side` grid.
pub fn assign_targets(targets: &[Annotation], side: usize, stride: usize) -> Vec<Option<CellTarget>> {
    let mut out = vec![None; side * side];
    for row in 0..side {
        for col in 0..side {
            let (cx, cy) = cell_center(row, col, stride);
            let mut best: Option<(f64, &Annotation)> = None;
            for t in targets {
                let b = &t.bbox;
                let inside = b.x_min as f64 <= cx && cx < b.x_max as f64 && b.y_min as f64 <= cy && cy < b.y_max as f64;
                if inside && best.is_none_or(|(area, _)| b.area() < area) {
                    best = Some((b.area(), t));
                }
            }
            out[row * side + col] = best.map(|(_, t)| CellTarget {
                class_id: t.class_id,
                deltas: encode_box(&t.bbox, (cx, cy), stride),
            });
        }
    }
    out
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Focal loss of one logit and its derivative.
fn focal(z: f64, positive: bool, cfg: &LossConfig) -> (f64, f64) {
    let g = cfg.focal_gamma;
    let p = sigmoid(z);
    let q = sigmoid(-z);
    if positive {
        let log_p = -softplus(-z);
        let loss = -cfg.focal_alpha * q.powf(g) * log_p;
        let grad = cfg.focal_alpha * q.powf(g) * (g * p * log_p - q);
        (loss, grad)
    } else {
        let log_q = -softplus(z);
        let loss = -(1.0 - cfg.focal_alpha) * p.powf(g) * log_q;
        let grad = (1.0 - cfg.focal_alpha) * p.powf(g) * (p - g * q * log_q);
        (loss, grad)
    }
}

fn smooth_l1(d: f64, beta: f64) -> (f64, f64) {
    if d.abs() < beta {
        (0.5 * d * d / beta, d / beta)
    } else {
        (d.abs() - 0.5 * beta, d.signum())
    }
}

fn check_targets<T: Scalar, A: AsRef<[Annotation]>>(pred: &DenseDetections<T>, targets: &[A]) -> Result<()> {
    if targets.len() != pred.map.batch() {
        return Err(Error::invalid(format!(
            "{} target lists for a batch of {}",
            targets.len(),
            pred.map.batch()
        )));
    }
    for (i, ts) in targets.iter().enumerate() {
        for t in ts.as_ref() {
            if t.class_id >= pred.num_classes {
                return Err(Error::invalid(format!(
                    "image {i}: class id {} >= num_classes {}",
                    t.class_id, pred.num_classes
                )));
            }
            t.bbox.validate()?;
        }
    }
    Ok(())
}

fn loss_impl<T: Scalar, A: AsRef<[Annotation]>>(
    pred: &DenseDetections<T>,
    targets: &[A],
    cfg: &LossConfig,
    mut grad: Option<(&mut Tensor4<T>, f64, f64)>,
) -> Result<LossTerms> {
    check_targets(pred, targets)?;
    let map = &pred.map;
    let side = pred.side();
    let k = pred.num_classes;
    let assigned: Vec<Vec<Option<CellTarget>>> = targets
        .iter()
        .map(|t| assign_targets(t.as_ref(), side, pred.stride))
        .collect();
    let n_pos: usize = assigned.iter().flatten().filter(|c| c.is_some()).count();
    let norm = match cfg.fixed_normalizer {
        Some(v) if v > 0.0 && v.is_finite() => v,
        Some(v) => return Err(Error::invalid(format!("loss normalizer {v} must be positive"))),
        None => n_pos.max(1) as f64,
    };
    let mut cls_sum = 0.0;
    let mut reg_sum = 0.0;
    for (n, cells) in assigned.iter().enumerate() {
        for (cell, target) in cells.iter().enumerate() {
            let (row, col) = (cell / side, cell % side);
            for c in 0..k {
                let z = map.get(n, c, row, col).as_f64();
                let positive = target.is_some_and(|t| t.class_id == c);
                let (l, g) = focal(z, positive, cfg);
                cls_sum += l;
                if let Some((dmap, w_cls, _)) = grad.as_mut() {
                    let o = dmap.offset(n, c, row, col);
                    dmap.data_mut()[o] = T::from_f64_lossy(*w_cls * g / norm);
                }
            }
            if let Some(t) = target {
                for (d, &goal) in t.deltas.iter().enumerate() {
                    let v = map.get(n, k + d, row, col).as_f64();
                    let (l, g) = smooth_l1(v - goal, cfg.smooth_l1_beta);
                    reg_sum += l;
                    if let Some((dmap, _, w_reg)) = grad.as_mut() {
                        let o = dmap.offset(n, k + d, row, col);
                        dmap.data_mut()[o] = T::from_f64_lossy(*w_reg * g / norm);
                    }
                }
            }
        }
    }
    Ok(LossTerms {
        l_cls: cls_sum / norm,
        l_reg: reg_sum / norm,
        n_pos,
    })
}

/// Classification and regression loss of a prediction map against per-image targets.
pub fn detection_loss<T: Scalar, A: AsRef<[Annotation]>>(
    pred: &DenseDetections<T>,
    targets: &[A],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    loss_impl(pred, targets, cfg, None)
}

/// Loss plus the gradient of `cls_weight * l_cls + reg_weight * l_reg` with respect to the map.
pub fn detection_loss_grad<T: Scalar, A: AsRef<[Annotation]>>(
    pred: &DenseDetections<T>,
    targets: &[A],
    cfg: &LossConfig,
    cls_weight: f64,
    reg_weight: f64,
) -> Result<(LossTerms, Tensor4<T>)> {
    let mut dmap = Tensor4::zeros(pred.map.shape());
    let terms = loss_impl(pred, targets, cfg, Some((&mut dmap, cls_weight, reg_weight)))?;
    Ok((terms, dmap))
}
