//! Synthetic shape scenes: rectangles, circles and triangles on a textured background.

use rand::Rng as _;

use crate::bbox::{Annotation, BBox};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, Rng};
use crate::tensor::Tensor4;

pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["rectangle", "circle", "triangle"];

const MIN_SIDE: usize = 9;
const MAX_SIDE: usize = 14;
const MAX_OBJECTS: usize = 3;
const PLACEMENT_TRIES: usize = 50;
/// Minimum summed per-channel distance between an object color and the background base.
const MIN_CONTRAST: f32 = 0.6;

const TAG_LABELED: u64 = 1;
const TAG_UNLABELED: u64 = 2;
const TAG_EVAL: u64 = 3;

/// One rendered image (`3 x size x size`, values in `[0, 1]`) and its objects.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub size: usize,
    pub pixels: Vec<f32>,
    pub annotations: Vec<Annotation>,
}

/// An image whose labels the trainer never reads; kept for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledScene {
    pub size: usize,
    pub pixels: Vec<f32>,
    pub hidden: Vec<Annotation>,
}

impl From<SyntheticScene> for UnlabeledScene {
    fn from(s: SyntheticScene) -> Self {
        Self {
            size: s.size,
            pixels: s.pixels,
            hidden: s.annotations,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub labeled: Vec<SyntheticScene>,
    pub unlabeled: Vec<UnlabeledScene>,
}

/// Renders `n_labeled + n_unlabeled` scenes; each scene has its own derived seed.
pub fn generate_dataset(rng: &mut Rng, n_labeled: usize, n_unlabeled: usize, image_size: usize) -> Result<Dataset> {
    let base: u64 = rng.gen();
    Ok(Dataset {
        labeled: render_split(base, TAG_LABELED, n_labeled, image_size)?,
        unlabeled: render_split(base, TAG_UNLABELED, n_unlabeled, image_size)?
            .into_iter()
            .map(UnlabeledScene::from)
            .collect(),
    })
}

/// Held-out scenes, disjoint in seed space from [`generate_dataset`] with the same rng state.
pub fn generate_eval_set(rng: &mut Rng, n: usize, image_size: usize) -> Result<Vec<SyntheticScene>> {
    let base: u64 = rng.gen();
    render_split(base, TAG_EVAL, n, image_size)
}

fn render_split(base: u64, tag: u64, n: usize, size: usize) -> Result<Vec<SyntheticScene>> {
    (0..n as u64)
        .map(|i| render_scene(&mut derive_rng(base, &[tag, i]), size))
        .collect()
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect,
    Circle,
    Triangle,
}

impl Shape {
    fn of_class(c: usize) -> Self {
        match c {
            0 => Shape::Rect,
            1 => Shape::Circle,
            _ => Shape::Triangle,
        }
    }

    /// Whether the point `(u, v)`, relative to the shape's `w x h` frame, is inside.
    fn contains(self, u: f32, v: f32, w: f32, h: f32) -> bool {
        match self {
            Shape::Rect => true,
            Shape::Circle => {
                let (dx, dy) = (u / w - 0.5, v / h - 0.5);
                dx * dx + dy * dy <= 0.25
            }
            // apex at top center, base along the bottom edge
            Shape::Triangle => {
                let half = 0.5 * w * (v / h);
                (u - 0.5 * w).abs() <= half
            }
        }
    }
}

/// Draws one scene. Objects never overlap and always lie fully inside the image.
pub fn render_scene(rng: &mut Rng, size: usize) -> Result<SyntheticScene> {
    if size < MAX_SIDE + 2 {
        return Err(Error::invalid(format!(
            "image size {size} is too small for objects up to {MAX_SIDE} px"
        )));
    }
    let plane = size * size;
    let mut pixels = vec![0.0f32; 3 * plane];
    let base: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.2..0.8));
    let grad: [(f32, f32); 3] = std::array::from_fn(|_| (rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)));
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f32 / size as f32 - 0.5, y as f32 / size as f32 - 0.5);
                let noise: f32 = rng.gen_range(-0.05..0.05);
                pixels[c * plane + y * size + x] = (base[c] + grad[c].0 * fx + grad[c].1 * fy + noise).clamp(0.0, 1.0);
            }
        }
    }

    let count = rng.gen_range(1..=MAX_OBJECTS);
    let mut placed: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut annotations = Vec::new();
    for _ in 0..count {
        let class_id = rng.gen_range(0..NUM_CLASSES);
        let shape = Shape::of_class(class_id);
        let w = rng.gen_range(MIN_SIDE..=MAX_SIDE);
        let h = match shape {
            Shape::Circle => w,
            _ => rng.gen_range(MIN_SIDE..=MAX_SIDE),
        };
        let color = loop {
            let c: [f32; 3] = std::array::from_fn(|_| rng.gen());
            let dist: f32 = c.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum();
            if dist >= MIN_CONTRAST {
                break c;
            }
        };
        let spot = (0..PLACEMENT_TRIES).find_map(|_| {
            let x0 = rng.gen_range(1..size - w);
            let y0 = rng.gen_range(1..size - h);
            // two pixels of clearance between objects
            let clear = placed
                .iter()
                .all(|&(px, py, pw, ph)| x0 >= px + pw + 2 || px >= x0 + w + 2 || y0 >= py + ph + 2 || py >= y0 + h + 2);
            clear.then_some((x0, y0))
        });
        let Some((x0, y0)) = spot else { continue };
        placed.push((x0, y0, w, h));

        let (mut x_lo, mut y_lo, mut x_hi, mut y_hi) = (usize::MAX, usize::MAX, 0, 0);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let (u, v) = ((x - x0) as f32 + 0.5, (y - y0) as f32 + 0.5);
                if !shape.contains(u, v, w as f32, h as f32) {
                    continue;
                }
                for c in 0..3 {
                    pixels[c * plane + y * size + x] = color[c];
                }
                x_lo = x_lo.min(x);
                y_lo = y_lo.min(y);
                x_hi = x_hi.max(x + 1);
                y_hi = y_hi.max(y + 1);
            }
        }
        annotations.push(Annotation {
            class_id,
            bbox: BBox::new(x_lo as f32, y_lo as f32, x_hi as f32, y_hi as f32)?,
        });
    }
    Ok(SyntheticScene {
        size,
        pixels,
        annotations,
    })
}

/// Stacks the chosen images into a batch.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a [f32]>, size: usize) -> Result<Tensor4<f32>> {
    let list: Vec<&[f32]> = images.into_iter().collect();
    Tensor4::stack(&list, [3, size, size])
}
