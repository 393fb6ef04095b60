//! Batched tile mixing / unmixing kernels and the photometric augmentations.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{generate_masks, invert_masks, MixingMaskSet, UnmixingMaskSet};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor4};

/// One mixing group: a contiguous batch range and its masks.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSpec {
    pub start: usize,
    pub len: usize,
    pub mixing: MixingMaskSet,
    pub unmixing: UnmixingMaskSet,
}

/// Partition of a batch into mixing groups.
///
/// Full groups have `group_size` members. A trailing remainder of two or more
/// images forms its own smaller group; a single leftover image gets the
/// identity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupLayout {
    group_size: usize,
    tiles_per_axis: usize,
    batch: usize,
    groups: Vec<GroupSpec>,
}

/// `(start, len)` of every group for a batch of `batch` images.
pub fn group_ranges(batch: usize, group_size: usize) -> Vec<(usize, usize)> {
    (0..batch)
        .step_by(group_size.max(1))
        .map(|s| (s, group_size.min(batch - s)))
        .collect()
}

impl GroupLayout {
    /// Builds a layout from one mask set per group, in batch order.
    pub fn new(
        batch: usize,
        group_size: usize,
        tiles_per_axis: usize,
        masks: Vec<MixingMaskSet>,
    ) -> Result<Self> {
        if batch == 0 || group_size == 0 || tiles_per_axis == 0 {
            return Err(Error::invalid(format!(
                "batch, group_size and tiles_per_axis must be positive (got {batch}, {group_size}, {tiles_per_axis})"
            )));
        }
        let ranges = group_ranges(batch, group_size);
        if masks.len() != ranges.len() {
            return Err(Error::invalid(format!(
                "batch of {batch} with group size {group_size} needs {} mask sets, got {}",
                ranges.len(),
                masks.len()
            )));
        }
        let mut groups = Vec::with_capacity(ranges.len());
        for (k, ((start, len), mixing)) in ranges.into_iter().zip(masks).enumerate() {
            if mixing.group_size() != len || mixing.tiles_per_axis() != tiles_per_axis {
                return Err(Error::invalid(format!(
                    "group {k} has {len} images and {tiles_per_axis} tiles per axis but its mask is {}x{}",
                    mixing.group_size(),
                    mixing.tiles_per_axis()
                )));
            }
            let unmixing = invert_masks(&mixing)?;
            groups.push(GroupSpec {
                start,
                len,
                mixing,
                unmixing,
            });
        }
        Ok(Self {
            group_size,
            tiles_per_axis,
            batch,
            groups,
        })
    }

    /// Fresh random masks, drawn independently for every group.
    pub fn random(rng: &mut Rng, batch: usize, group_size: usize, tiles_per_axis: usize) -> Result<Self> {
        if group_size == 0 {
            return Err(Error::invalid("group_size must be positive"));
        }
        let masks = group_ranges(batch, group_size)
            .into_iter()
            .map(|(_, len)| generate_masks(rng, len, tiles_per_axis))
            .collect::<Result<Vec<_>>>()?;
        Self::new(batch, group_size, tiles_per_axis, masks)
    }

    pub fn identity(batch: usize, group_size: usize, tiles_per_axis: usize) -> Result<Self> {
        if group_size == 0 {
            return Err(Error::invalid("group_size must be positive"));
        }
        let masks = group_ranges(batch, group_size)
            .into_iter()
            .map(|(_, len)| MixingMaskSet::identity(len, tiles_per_axis))
            .collect();
        Self::new(batch, group_size, tiles_per_axis, masks)
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn tiles_per_axis(&self) -> usize {
        self.tiles_per_axis
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn groups(&self) -> &[GroupSpec] {
        &self.groups
    }

    fn check<T: Scalar>(&self, t: &Tensor4<T>, what: &str) -> Result<(usize, usize)> {
        if t.batch() != self.batch {
            return Err(Error::invalid(format!(
                "{what} batch of {} does not match layout batch of {}",
                t.batch(),
                self.batch
            )));
        }
        let nt = self.tiles_per_axis;
        if !t.height().is_multiple_of(nt) {
            return Err(Error::shape(format!(
                "{what} height {} is not divisible by tiles_per_axis {nt}",
                t.height()
            )));
        }
        if !t.width().is_multiple_of(nt) {
            return Err(Error::shape(format!(
                "{what} width {} is not divisible by tiles_per_axis {nt}",
                t.width()
            )));
        }
        Ok((t.height() / nt, t.width() / nt))
    }
}

/// `out[start + g][.][tile (i,j)] = x[start + pick(g, i, j)][.][tile (i,j)]` for each group.
fn gather_tiles<T: Scalar>(
    x: &Tensor4<T>,
    layout: &GroupLayout,
    tile: (usize, usize),
    pick: impl Fn(&GroupSpec, usize, usize, usize) -> usize,
) -> Tensor4<T> {
    let (th, tw) = tile;
    let [_, c, h, w] = x.shape();
    let mut out = Tensor4::zeros(x.shape());
    let src = x.data();
    let nt = layout.tiles_per_axis;
    for grp in &layout.groups {
        for g in 0..grp.len {
            let dst_n = grp.start + g;
            for i in 0..nt {
                for j in 0..nt {
                    let src_n = grp.start + pick(grp, g, i, j);
                    for ch in 0..c {
                        for y in i * th..(i + 1) * th {
                            let d = ((dst_n * c + ch) * h + y) * w + j * tw;
                            let s = ((src_n * c + ch) * h + y) * w + j * tw;
                            out.data_mut()[d..d + tw].copy_from_slice(&src[s..s + tw]);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Moves every tile to the mixed image named by the mixing mask, keeping its position.
pub fn mix_tiles<T: Scalar>(batch: &Tensor4<T>, layout: &GroupLayout) -> Result<Tensor4<T>> {
    let tile = layout.check(batch, "image")?;
    Ok(gather_tiles(batch, layout, tile, |grp, g, i, j| grp.mixing.cell(g, i, j)))
}

/// Returns mixed feature tiles to their original images.
///
/// Works at any resolution whose sides are divisible by `tiles_per_axis`.
/// It is also the adjoint of [`mix_tiles`] at the same resolution.
pub fn unmix_tiles<T: Scalar>(features: &Tensor4<T>, layout: &GroupLayout) -> Result<Tensor4<T>> {
    let tile = layout.check(features, "feature")?;
    Ok(gather_tiles(features, layout, tile, |grp, g, i, j| {
        grp.unmixing.cell(g, i, j)
    }))
}

/// Transform settings for the weak and strong views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub contrast_range: (f32, f32),
    pub brightness_range: (f32, f32),
    pub cutout_count: (usize, usize),
    pub cutout_size: (f64, f64),
    pub cutout_fill: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            contrast_range: (0.6, 1.4),
            brightness_range: (-0.1, 0.1),
            cutout_count: (1, 3),
            cutout_size: (0.05, 0.2),
            cutout_fill: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid(format!("flip_prob {} not in [0, 1]", self.flip_prob)));
        }
        if self.contrast_range.0 > self.contrast_range.1 || self.brightness_range.0 > self.brightness_range.1 {
            return Err(Error::invalid("jitter ranges must have min <= max"));
        }
        if self.cutout_count.0 > self.cutout_count.1 {
            return Err(Error::invalid("cutout count range must have min <= max"));
        }
        validate_size_range(self.cutout_size)
    }
}

fn validate_size_range(r: (f64, f64)) -> Result<()> {
    if !(r.0 > 0.0 && r.0 <= r.1 && r.1 <= 1.0) {
        return Err(Error::invalid(format!(
            "cutout size range ({}, {}) must satisfy 0 < min <= max <= 1",
            r.0, r.1
        )));
    }
    Ok(())
}

fn cutout_image<T: Scalar>(
    img: &mut [T],
    chw: [usize; 3],
    rng: &mut Rng,
    count: usize,
    size_range: (f64, f64),
    fill: T,
) {
    let [c, h, w] = chw;
    for _ in 0..count {
        let fh = rng.gen_range(size_range.0..=size_range.1);
        let fw = rng.gen_range(size_range.0..=size_range.1);
        let rh = ((fh * h as f64).round() as usize).clamp(1, h);
        let rw = ((fw * w as f64).round() as usize).clamp(1, w);
        let y0 = rng.gen_range(0..=h - rh);
        let x0 = rng.gen_range(0..=w - rw);
        for ch in 0..c {
            for y in y0..y0 + rh {
                let row = (ch * h + y) * w;
                img[row + x0..row + x0 + rw].fill(fill);
            }
        }
    }
}

/// Overwrites `count` random rectangles per image with `fill`.
///
/// Rectangle sides are drawn as fractions of the image height and width from `size_range`.
pub fn cutout<T: Scalar>(
    batch: &Tensor4<T>,
    rng: &mut Rng,
    count: usize,
    size_range: (f64, f64),
    fill: T,
) -> Result<Tensor4<T>> {
    validate_size_range(size_range)?;
    let mut out = batch.clone();
    let [n, c, h, w] = batch.shape();
    for k in 0..n {
        cutout_image(out.image_mut(k), [c, h, w], rng, count, size_range, fill);
    }
    Ok(out)
}

/// Mirrors the selected images left to right.
pub fn flip_horizontal<T: Scalar>(batch: &Tensor4<T>, which: &[bool]) -> Result<Tensor4<T>> {
    if which.len() != batch.batch() {
        return Err(Error::invalid(format!(
            "flip mask has {} entries for a batch of {}",
            which.len(),
            batch.batch()
        )));
    }
    let mut out = batch.clone();
    let [_, c, h, w] = batch.shape();
    for (k, &flip) in which.iter().enumerate() {
        if !flip {
            continue;
        }
        let img = out.image_mut(k);
        for row in img.chunks_exact_mut(w).take(c * h) {
            row.reverse();
        }
    }
    Ok(out)
}

/// Output of an augmentation together with the geometric change it made.
#[derive(Debug, Clone)]
pub struct Augmented<T: Scalar = f32> {
    pub images: Tensor4<T>,
    /// Per image: whether it was mirrored horizontally.
    pub flipped: Vec<bool>,
}

/// Horizontal flip with probability `cfg.flip_prob`.
pub fn weak_augment<T: Scalar>(batch: &Tensor4<T>, rng: &mut Rng, cfg: &AugmentConfig) -> Result<Augmented<T>> {
    let flipped: Vec<bool> = (0..batch.batch()).map(|_| rng.gen_bool(cfg.flip_prob)).collect();
    Ok(Augmented {
        images: flip_horizontal(batch, &flipped)?,
        flipped,
    })
}

/// Per-channel contrast/brightness jitter clamped to `[0, 1]`, then cutout.
///
/// This is the strong view minus its flip, so it can be layered on an already
/// weakly augmented batch without changing geometry.
pub fn photometric_augment<T: Scalar>(batch: &Tensor4<T>, rng: &mut Rng, cfg: &AugmentConfig) -> Result<Tensor4<T>> {
    cfg.validate()?;
    let mut out = batch.clone();
    let [n, c, h, w] = batch.shape();
    let plane = h * w;
    for k in 0..n {
        let img = out.image_mut(k);
        for ch in 0..c {
            let a = T::from_f64_lossy(rng.gen_range(cfg.contrast_range.0..=cfg.contrast_range.1) as f64);
            let b = T::from_f64_lossy(rng.gen_range(cfg.brightness_range.0..=cfg.brightness_range.1) as f64);
            for v in &mut img[ch * plane..(ch + 1) * plane] {
                *v = (*v * a + b).max(T::zero()).min(T::one());
            }
        }
        let count = rng.gen_range(cfg.cutout_count.0..=cfg.cutout_count.1);
        cutout_image(
            img,
            [c, h, w],
            rng,
            count,
            cfg.cutout_size,
            T::from_f64_lossy(cfg.cutout_fill as f64),
        );
    }
    Ok(out)
}

/// Weak augmentation followed by [`photometric_augment`].
pub fn strong_augment<T: Scalar>(batch: &Tensor4<T>, rng: &mut Rng, cfg: &AugmentConfig) -> Result<Augmented<T>> {
    let weak = weak_augment(batch, rng, cfg)?;
    Ok(Augmented {
        images: photometric_augment(&weak.images, rng, cfg)?,
        flipped: weak.flipped,
    })
}
