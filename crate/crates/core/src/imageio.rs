//! 8-bit PNG in and out, as `[0, 1]` float tensors.

use std::path::Path;

use image::{ImageError, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

fn image_error(path: &Path, e: ImageError) -> Error {
    match e {
        ImageError::IoError(io) => Error::Io(io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Loads an RGB PNG as a `1 x 3 x h x w` tensor with values `v / 255`.
pub fn load_png(path: &Path) -> Result<Tensor4<f32>> {
    let img = image::open(path).map_err(|e| image_error(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor4::from_fn([1, 3, h, w], |[_, c, y, x]| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

/// Loads several same-sized PNGs into one batch.
pub fn load_batch<P: AsRef<Path>>(paths: &[P]) -> Result<Tensor4<f32>> {
    let images = paths.iter().map(|p| load_png(p.as_ref())).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor4<f32>> = images.iter().collect();
    Tensor4::concat(&refs).map_err(|e| Error::invalid(format!("input images differ in size: {e}")))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One batch entry as an 8-bit RGB image. Single-channel tensors are shown as gray.
pub fn to_rgb<T: Scalar>(batch: &Tensor4<T>, n: usize) -> Result<RgbImage> {
    let [_, c, h, w] = batch.shape();
    if c != 1 && c != 3 {
        return Err(Error::shape(format!("cannot render {c} channels as an image")));
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| to_u8(batch.get(n, ch.min(c - 1), y as usize, x as usize).as_f64());
        Rgb([px(0), px(1), px(2)])
    }))
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

/// Writes entry `n` of `batch` to `path`.
pub fn save_tensor_png<T: Scalar>(batch: &Tensor4<T>, n: usize, path: &Path) -> Result<()> {
    save_png(&to_rgb(batch, n)?, path)
}

/// Lays batches out as rows of a contact sheet, `gap` pixels apart on a white
/// background. With `grid = Some(nt)`, each image gets its tile boundaries
/// drawn in red.
pub fn contact_sheet<T: Scalar>(rows: &[&Tensor4<T>], gap: usize, grid: Option<usize>) -> Result<RgbImage> {
    let first = rows.first().ok_or_else(|| Error::invalid("contact sheet needs at least one row"))?;
    let [_, _, h, w] = first.shape();
    let cols = rows.iter().map(|r| r.batch()).max().unwrap_or(0);
    if rows.iter().any(|r| r.height() != h || r.width() != w) {
        return Err(Error::shape("contact sheet rows must share one image size"));
    }
    let sheet_w = cols * w + (cols + 1) * gap;
    let sheet_h = rows.len() * h + (rows.len() + 1) * gap;
    let mut sheet = RgbImage::from_pixel(sheet_w as u32, sheet_h as u32, Rgb([255, 255, 255]));
    for (r, batch) in rows.iter().enumerate() {
        for n in 0..batch.batch() {
            let img = to_rgb(batch, n)?;
            let (ox, oy) = (gap + n * (w + gap), gap + r * (h + gap));
            for (x, y, px) in img.enumerate_pixels() {
                sheet.put_pixel((ox + x as usize) as u32, (oy + y as usize) as u32, *px);
            }
            if let Some(nt) = grid.filter(|&nt| nt > 1) {
                let red = Rgb([255, 0, 0]);
                for k in 1..nt {
                    let (lx, ly) = (ox + k * w / nt, oy + k * h / nt);
                    for t in 0..h {
                        sheet.put_pixel(lx as u32, (oy + t) as u32, red);
                    }
                    for t in 0..w {
                        sheet.put_pixel((ox + t) as u32, ly as u32, red);
                    }
                }
            }
        }
    }
    Ok(sheet)
}
