//! Forward and reverse passes of the backbone and head.

use crate::augment::{mix_tiles, unmix_tiles, GroupLayout};
use crate::error::{Error, Result};
use crate::tensor::{matmul, Scalar, Tensor4};

use super::arch::{LayerSlot, ToyDetArch, KERNEL, PADDING, STRIDE};
use super::conv::{col2im, im2col, ConvGeom};

/// Dense per-cell head output: `num_classes` logits then `(dx, dy, dw, dh)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseDetections<T: Scalar = f32> {
    pub map: Tensor4<T>,
    pub num_classes: usize,
    /// Input pixels per feature cell.
    pub stride: usize,
}

impl<T: Scalar> DenseDetections<T> {
    pub fn new(map: Tensor4<T>, num_classes: usize, stride: usize) -> Result<Self> {
        if map.channels() != num_classes + 4 {
            return Err(Error::shape(format!(
                "prediction map has {} channels, expected {} classes + 4",
                map.channels(),
                num_classes
            )));
        }
        Ok(Self {
            map,
            num_classes,
            stride,
        })
    }

    pub fn side(&self) -> usize {
        self.map.height()
    }

    pub fn image_size(&self) -> usize {
        self.map.height() * self.stride
    }
}

fn check_params<T>(arch: &ToyDetArch, params: &[T]) -> Result<()> {
    if params.len() != arch.param_count() {
        return Err(Error::invalid(format!(
            "expected {} parameters for {}, got {}",
            arch.param_count(),
            arch.arch_id(),
            params.len()
        )));
    }
    Ok(())
}

fn check_input<T: Scalar>(arch: &ToyDetArch, x: &Tensor4<T>) -> Result<()> {
    let want = [arch.in_channels, arch.input_size, arch.input_size];
    if x.shape()[1..] != want {
        return Err(Error::shape(format!(
            "input shape {:?} does not match architecture (n, {}, {}, {})",
            x.shape(),
            want[0],
            want[1],
            want[2]
        )));
    }
    Ok(())
}

struct ConvLayerCache<T> {
    geom: ConvGeom,
    /// Column matrices of every image, concatenated.
    cols: Vec<T>,
    /// Post-ReLU output; its positive entries mark the active units.
    output: Tensor4<T>,
}

/// Intermediate values kept by [`forward_backbone_cached`] for the reverse pass.
pub struct BackboneCache<T> {
    layers: Vec<ConvLayerCache<T>>,
}

impl<T: Scalar> BackboneCache<T> {
    /// Which ReLU units are active, layer by layer, in storage order.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.layers
            .iter()
            .flat_map(|l| l.output.data().iter().map(|&v| v > T::zero()))
            .collect()
    }
}

fn conv_relu_forward<T: Scalar>(slot: &LayerSlot, params: &[T], x: &Tensor4<T>) -> ConvLayerCache<T> {
    let geom = ConvGeom {
        channels: x.channels(),
        height: x.height(),
        width: x.width(),
        kernel: KERNEL,
        stride: STRIDE,
        padding: PADDING,
    };
    let (rows, ncols) = (geom.col_rows(), geom.col_cols());
    let n = x.batch();
    let cout = slot.out_channels;
    let weight = &params[slot.weight.clone()];
    let bias = &params[slot.bias.clone()];
    let mut cols = vec![T::zero(); n * rows * ncols];
    let mut output = Tensor4::zeros([n, cout, geom.out_height(), geom.out_width()]);
    for k in 0..n {
        let c = &mut cols[k * rows * ncols..(k + 1) * rows * ncols];
        im2col(x.image(k), geom, c);
        let out = output.image_mut(k);
        for (o, b) in out.chunks_exact_mut(ncols).zip(bias) {
            o.fill(*b);
        }
        matmul(false, false, cout, rows, ncols, weight, c, T::one(), out);
        for v in out.iter_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
    }
    ConvLayerCache { geom, cols, output }
}

/// Returns the gradient with respect to the layer input when `want_input_grad`.
fn conv_relu_backward<T: Scalar>(
    slot: &LayerSlot,
    params: &[T],
    cache: &ConvLayerCache<T>,
    dout: &Tensor4<T>,
    grad: &mut [T],
    want_input_grad: bool,
) -> Option<Tensor4<T>> {
    let geom = cache.geom;
    let (rows, ncols) = (geom.col_rows(), geom.col_cols());
    let n = dout.batch();
    let cout = slot.out_channels;
    let weight = &params[slot.weight.clone()];
    let mut dz = dout.clone();
    for (g, &y) in dz.data_mut().iter_mut().zip(cache.output.data()) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
    let mut dx = want_input_grad.then(|| Tensor4::zeros([n, geom.channels, geom.height, geom.width]));
    let mut dcols = vec![T::zero(); if want_input_grad { rows * ncols } else { 0 }];
    let (wgrad, rest) = grad[slot.weight.start..].split_at_mut(slot.weight.len());
    let bgrad = &mut rest[slot.bias.start - slot.weight.end..][..cout];
    for k in 0..n {
        let dzk = dz.image(k);
        let colk = &cache.cols[k * rows * ncols..(k + 1) * rows * ncols];
        // dW += dz * cols^T
        matmul(false, true, cout, ncols, rows, dzk, colk, T::one(), wgrad);
        for (b, row) in bgrad.iter_mut().zip(dzk.chunks_exact(ncols)) {
            *b += row.iter().copied().sum::<T>();
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = W^T * dz
            matmul(true, false, rows, cout, ncols, weight, dzk, T::zero(), &mut dcols);
            col2im(&dcols, geom, dx.image_mut(k));
        }
    }
    dx
}

/// Backbone features `(n, channels[2], H/8, W/8)` plus the cache for [`backward_backbone`].
pub fn forward_backbone_cached<T: Scalar>(
    arch: &ToyDetArch,
    params: &[T],
    batch: &Tensor4<T>,
) -> Result<(Tensor4<T>, BackboneCache<T>)> {
    check_params(arch, params)?;
    check_input(arch, batch)?;
    let layout = arch.layout();
    let mut layers: Vec<ConvLayerCache<T>> = Vec::with_capacity(layout.convs.len());
    for slot in &layout.convs {
        let input = layers.last().map_or(batch, |l| &l.output);
        let next = conv_relu_forward(slot, params, input);
        layers.push(next);
    }
    let features = layers.last().expect("three conv layers").output.clone();
    Ok((features, BackboneCache { layers }))
}

pub fn forward_backbone<T: Scalar>(arch: &ToyDetArch, params: &[T], batch: &Tensor4<T>) -> Result<Tensor4<T>> {
    forward_backbone_cached(arch, params, batch).map(|(f, _)| f)
}

/// Accumulates backbone parameter gradients for the feature cotangent `dfeatures`.
pub fn backward_backbone<T: Scalar>(
    arch: &ToyDetArch,
    params: &[T],
    cache: &BackboneCache<T>,
    dfeatures: &Tensor4<T>,
    grad: &mut [T],
) -> Result<()> {
    check_params(arch, params)?;
    check_params(arch, grad)?;
    let last = &cache.layers.last().expect("three conv layers").output;
    if dfeatures.shape() != last.shape() {
        return Err(Error::shape(format!(
            "feature gradient shape {:?} does not match features {:?}",
            dfeatures.shape(),
            last.shape()
        )));
    }
    let layout = arch.layout();
    let mut upstream = dfeatures.clone();
    for (idx, (slot, lc)) in layout.convs.iter().zip(&cache.layers).enumerate().rev() {
        match conv_relu_backward(slot, params, lc, &upstream, grad, idx > 0) {
            Some(dx) => upstream = dx,
            None => break,
        }
    }
    Ok(())
}

/// 1x1 conv from features to the dense prediction map.
pub fn forward_head<T: Scalar>(arch: &ToyDetArch, params: &[T], features: &Tensor4<T>) -> Result<DenseDetections<T>> {
    check_params(arch, params)?;
    if features.channels() != arch.feature_channels() {
        return Err(Error::shape(format!(
            "head expects {} feature channels, got {}",
            arch.feature_channels(),
            features.channels()
        )));
    }
    let slot = arch.layout().head;
    let [n, c, h, w] = features.shape();
    let hw = h * w;
    let k = slot.out_channels;
    let weight = &params[slot.weight.clone()];
    let bias = &params[slot.bias.clone()];
    let mut out = Tensor4::zeros([n, k, h, w]);
    for i in 0..n {
        let o = out.image_mut(i);
        for (row, b) in o.chunks_exact_mut(hw).zip(bias) {
            row.fill(*b);
        }
        matmul(false, false, k, c, hw, weight, features.image(i), T::one(), o);
    }
    DenseDetections::new(out, arch.num_classes, arch.total_stride())
}

/// Accumulates head parameter gradients and returns the feature cotangent.
pub fn backward_head<T: Scalar>(
    arch: &ToyDetArch,
    params: &[T],
    features: &Tensor4<T>,
    dpred: &Tensor4<T>,
    grad: &mut [T],
) -> Result<Tensor4<T>> {
    check_params(arch, params)?;
    check_params(arch, grad)?;
    let slot = arch.layout().head;
    let [n, c, h, w] = features.shape();
    let k = slot.out_channels;
    if dpred.shape() != [n, k, h, w] {
        return Err(Error::shape(format!(
            "prediction gradient shape {:?} does not match ({n}, {k}, {h}, {w})",
            dpred.shape()
        )));
    }
    let hw = h * w;
    let weight = &params[slot.weight.clone()];
    let mut dfeat = Tensor4::zeros(features.shape());
    for i in 0..n {
        let dp = dpred.image(i);
        let (wgrad, bgrad) = grad[slot.weight.start..slot.bias.end].split_at_mut(slot.weight.len());
        matmul(false, true, k, hw, c, dp, features.image(i), T::one(), wgrad);
        for (b, row) in bgrad.iter_mut().zip(dp.chunks_exact(hw)) {
            *b += row.iter().copied().sum::<T>();
        }
        matmul(true, false, c, k, hw, weight, dp, T::zero(), dfeat.image_mut(i));
    }
    Ok(dfeat)
}

/// Everything the reverse pass of the full detector needs.
pub struct ForwardPass<T: Scalar> {
    pub backbone: BackboneCache<T>,
    /// Features as fed to the head (unmixed when a layout was used).
    head_input: Tensor4<T>,
    layout: Option<GroupLayout>,
    pub pred: DenseDetections<T>,
}

/// Full detector forward. With a layout the input tiles are mixed before the
/// backbone and the feature tiles unmixed before the head.
pub fn forward<T: Scalar>(
    arch: &ToyDetArch,
    params: &[T],
    batch: &Tensor4<T>,
    layout: Option<&GroupLayout>,
) -> Result<ForwardPass<T>> {
    let (backbone, head_input) = match layout {
        Some(l) => {
            arch.check_tiles(l.tiles_per_axis())?;
            let mixed = mix_tiles(batch, l)?;
            let (f, cache) = forward_backbone_cached(arch, params, &mixed)?;
            (cache, unmix_tiles(&f, l)?)
        }
        None => {
            let (f, cache) = forward_backbone_cached(arch, params, batch)?;
            (cache, f)
        }
    };
    let pred = forward_head(arch, params, &head_input)?;
    Ok(ForwardPass {
        backbone,
        head_input,
        layout: layout.cloned(),
        pred,
    })
}

/// Parameter gradient for the prediction cotangent `dpred`.
///
/// The unmix step is a tile permutation, so its adjoint is mixing with the same layout.
pub fn backward<T: Scalar>(arch: &ToyDetArch, params: &[T], pass: &ForwardPass<T>, dpred: &Tensor4<T>) -> Result<Vec<T>> {
    let mut grad = vec![T::zero(); arch.param_count()];
    let dhead_in = backward_head(arch, params, &pass.head_input, dpred, &mut grad)?;
    let dfeatures = match &pass.layout {
        Some(l) => mix_tiles(&dhead_in, l)?,
        None => dhead_in,
    };
    backward_backbone(arch, params, &pass.backbone, &dfeatures, &mut grad)?;
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    fn random_batch(n: usize, size: usize, seed: u64) -> Tensor4<f32> {
        let mut rng = rng_from_seed(seed);
        Tensor4::from_fn([n, 3, size, size], |_| rng.gen::<f32>())
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let arch = ToyDetArch::desk(32);
        let params = vec![0.0f32; arch.param_count()];
        let f = forward_backbone(&arch, &params, &random_batch(2, 32, 0)).unwrap();
        assert_eq!(f.shape(), [2, 64, 4, 4]);
        assert!(f.data().iter().all(|&v| v == 0.0));
        let p = forward_head(&arch, &params, &f).unwrap();
        assert_eq!(p.map.shape(), [2, 7, 4, 4]);
        assert!(p.map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_images_give_identical_outputs() {
        let arch = ToyDetArch::desk(64);
        let params = arch.init_params(&mut rng_from_seed(3));
        let one = random_batch(1, 64, 5);
        let two = Tensor4::concat(&[&one, &one]).unwrap();
        let f = forward_backbone(&arch, &params, &two).unwrap();
        assert_eq!(f.shape(), [2, 64, 8, 8]);
        assert_eq!(f.image(0), f.image(1));
        let p = forward_head(&arch, &params, &f).unwrap();
        assert_eq!(p.map.image(0), p.map.image(1));
        assert_eq!(p.map.shape(), [2, 7, 8, 8]);
    }

    #[test]
    fn shape_mismatches_are_errors() {
        let arch = ToyDetArch::desk(64);
        let params = arch.init_params(&mut rng_from_seed(3));
        assert!(matches!(
            forward_backbone(&arch, &params, &random_batch(1, 32, 0)),
            Err(Error::Shape(_))
        ));
        assert!(forward_backbone(&arch, &params[1..], &random_batch(1, 64, 0)).is_err());
        let f = Tensor4::<f32>::zeros([1, 32, 8, 8]);
        assert!(matches!(forward_head(&arch, &params, &f), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let arch = ToyDetArch::tiny(16);
        let params: Vec<f64> = arch.init_params(&mut rng_from_seed(8)).iter().map(|&v| v as f64).collect();
        let x = random_batch(1, 16, 1).cast::<f64>();
        let slot = &arch.layout().convs[0];
        let lc = conv_relu_forward(slot, &params, &x);
        let w = &params[slot.weight.clone()];
        let b = &params[slot.bias.clone()];
        for co in 0..4 {
            for oy in 0..8 {
                for ox in 0..8 {
                    let mut s = b[co];
                    for ci in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..16).contains(&iy) && (0..16).contains(&ix) {
                                    s += w[((co * 3 + ci) * 3 + ky) * 3 + kx] * x.get(0, ci, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    assert!((lc.output.get(0, co, oy, ox) - s.max(0.0)).abs() < 1e-12);
                }
            }
        }
    }
}
