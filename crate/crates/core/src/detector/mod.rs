//! Small one-stage detector: conv backbone, dense head, losses and decoding.

mod arch;
mod conv;
mod decode;
mod loss;
mod model;

pub use arch::{LayerSlot, ParamLayout, ToyDetArch};
pub use decode::decode_detections;
pub use loss::{
    assign_targets, cell_center, detection_loss, detection_loss_grad, encode_box, CellTarget, LossConfig, LossTerms,
};
pub use model::{
    backward as backward_pass, backward_backbone, backward_head, forward, forward_backbone, forward_backbone_cached,
    forward_head, BackboneCache, DenseDetections, ForwardPass,
};

use crate::augment::GroupLayout;
use crate::bbox::Annotation;
use crate::error::Result;
use crate::tensor::{Scalar, Tensor4};

/// Loss terms and the parameter gradient of `cls_weight * l_cls + reg_weight * l_reg`.
///
/// With a layout, the images are tile-mixed before the backbone and the
/// features unmixed before the head.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grad<T: Scalar, A: AsRef<[Annotation]>>(
    arch: &ToyDetArch,
    params: &[T],
    batch: &Tensor4<T>,
    targets: &[A],
    layout: Option<&GroupLayout>,
    cfg: &LossConfig,
    cls_weight: f64,
    reg_weight: f64,
) -> Result<(LossTerms, Vec<T>)> {
    let pass = forward(arch, params, batch, layout)?;
    let (terms, dpred) = detection_loss_grad(&pass.pred, targets, cfg, cls_weight, reg_weight)?;
    let grad = backward_pass(arch, params, &pass, &dpred)?;
    Ok((terms, grad))
}

/// Forward-only counterpart of [`loss_and_grad`].
pub fn loss_only<T: Scalar, A: AsRef<[Annotation]>>(
    arch: &ToyDetArch,
    params: &[T],
    batch: &Tensor4<T>,
    targets: &[A],
    layout: Option<&GroupLayout>,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let pass = forward(arch, params, batch, layout)?;
    detection_loss(&pass.pred, targets, cfg)
}

/// Gradient of `l_cls + l_reg` with respect to every parameter.
pub fn backward<T: Scalar, A: AsRef<[Annotation]>>(
    arch: &ToyDetArch,
    params: &[T],
    batch: &Tensor4<T>,
    targets: &[A],
) -> Result<Vec<T>> {
    loss_and_grad(arch, params, batch, targets, None, &LossConfig::default(), 1.0, 1.0).map(|(_, g)| g)
}
