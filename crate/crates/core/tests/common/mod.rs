#![allow(dead_code)]

use mum_core::augment::GroupLayout;
use mum_core::bbox::{Annotation, BBox};
use mum_core::detector::{forward, loss_and_grad, loss_only, LossConfig, ToyDetArch};
use mum_core::rng::rng_from_seed;
use mum_core::Tensor4;
use rand::Rng;

/// Central finite differences of `f` at `x`, one coordinate at a time.
pub fn central_differences(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let plus = f(&probe);
            probe[i] = orig - eps;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

pub fn random_images(n: usize, size: usize, seed: u64) -> Tensor4<f64> {
    let mut rng = rng_from_seed(seed);
    Tensor4::from_fn([n, 3, size, size], |_| rng.gen::<f64>())
}

pub fn random_targets(n: usize, size: usize, seed: u64) -> Vec<Vec<Annotation>> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| {
            (0..rng.gen_range(1..=2))
                .map(|_| {
                    let w = rng.gen_range(8.0..size as f32 / 2.0);
                    let h = rng.gen_range(8.0..size as f32 / 2.0);
                    let x0 = rng.gen_range(0.0..size as f32 - w);
                    let y0 = rng.gen_range(0.0..size as f32 - h);
                    Annotation {
                        class_id: rng.gen_range(0..3),
                        bbox: BBox::new(x0, y0, x0 + w, y0 + h).unwrap(),
                    }
                })
                .collect()
        })
        .collect()
}

pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    /// Worst `|a - n| / max(|a|, |n|)`, counting exact agreement as zero.
    pub fn max_relative_error(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| {
                let d = (a - n).abs();
                if d == 0.0 { 0.0 } else { d / a.abs().max(n.abs()) }
            })
            .fold(0.0, f64::max)
    }
}

/// Analytic gradient of `l_cls + l_reg` through mix -> backbone -> unmix -> head against central differences.
pub fn check_detector_gradient(
    arch: &ToyDetArch,
    params: &[f64],
    images: &Tensor4<f64>,
    targets: &[Vec<Annotation>],
    layout: Option<&GroupLayout>,
    eps: f64,
) -> GradCheck {
    let cfg = LossConfig::default();
    let (_, analytic) = loss_and_grad(arch, params, images, targets, layout, &cfg, 1.0, 1.0).unwrap();
    let numeric = central_differences(params, eps, |p| {
        loss_only(arch, p, images, targets, layout, &cfg).unwrap().total()
    });
    GradCheck { analytic, numeric }
}

/// Small conv weights with biases well away from zero, so most ReLU units sit
/// far from their kink while some channels stay dead.
pub fn smooth_check_params(arch: &ToyDetArch, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    let layout = arch.layout();
    let mut p = vec![0.0; layout.total];
    for slot in &layout.convs {
        for v in &mut p[slot.weight.clone()] {
            *v = rng.gen_range(-0.1..0.1);
        }
        for v in &mut p[slot.bias.clone()] {
            let mag = rng.gen_range(0.3..0.6);
            *v = if rng.gen_bool(0.75) { mag } else { -mag };
        }
    }
    for v in &mut p[layout.head.weight.clone()] {
        *v = rng.gen_range(-0.3..0.3);
    }
    for v in &mut p[layout.head.bias.clone()] {
        *v = rng.gen_range(-0.5..0.5);
    }
    p
}

/// Number of `(coordinate, sign)` probes at `params +- eps * e_i` whose ReLU
/// activation pattern differs from the one at `params`. Central differences
/// are only an oracle for the gradient when this is zero.
pub fn stencil_kink_crossings(
    arch: &ToyDetArch,
    params: &[f64],
    images: &Tensor4<f64>,
    layout: Option<&GroupLayout>,
    eps: f64,
) -> usize {
    let pattern = |p: &[f64]| forward(arch, p, images, layout).unwrap().backbone.activation_pattern();
    let base = pattern(params);
    let mut probe = params.to_vec();
    let mut crossings = 0;
    for i in 0..params.len() {
        for step in [eps, -eps] {
            probe[i] = params[i] + step;
            if pattern(&probe) != base {
                crossings += 1;
            }
        }
        probe[i] = params[i];
    }
    crossings
}

pub fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor4<f32> {
    let mut rng = rng_from_seed(seed);
    Tensor4::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// 3x3, stride 1, zero-padded convolution with fixed pseudo-random weights.
pub fn conv3x3(x: &Tensor4<f64>, cout: usize, seed: u64) -> Tensor4<f64> {
    let [n, cin, h, w] = x.shape();
    let mut rng = rng_from_seed(seed);
    let weights: Vec<f64> = (0..cout * cin * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor4::from_fn([n, cout, h, w], |[b, o, y, xx]| {
        let mut acc = 0.0;
        for c in 0..cin {
            for ky in 0..3 {
                for kx in 0..3 {
                    let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                        acc += weights[((o * cin + c) * 3 + ky) * 3 + kx] * x.get(b, c, iy as usize, ix as usize);
                    }
                }
            }
        }
        acc
    })
}

pub fn random_boxes(n: usize, size: u32, seed: u64) -> Vec<BBox> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| {
            let x0 = rng.gen_range(0..size - 1);
            let y0 = rng.gen_range(0..size - 1);
            let x1 = rng.gen_range(x0 + 1..=size);
            let y1 = rng.gen_range(y0 + 1..=size);
            BBox::new(x0 as f32, y0 as f32, x1 as f32, y1 as f32).unwrap()
        })
        .collect()
}

/// Tiles touched by the box, found by visiting every pixel it covers.
pub fn raster_tiles(b: &BBox, size: u32, nt: usize) -> usize {
    let tile = size as usize / nt;
    let mut hit = vec![false; nt * nt];
    for y in b.y_min as usize..b.y_max as usize {
        for x in b.x_min as usize..b.x_max as usize {
            hit[(y / tile) * nt + x / tile] = true;
        }
    }
    hit.iter().filter(|&&h| h).count()
}
