use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in image pixels, `[x_min, y_min, x_max, y_max]`.
///
/// Serialized as a four-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f32; 4]", into = "[f32; 4]")]
pub struct BBox {
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
}

impl BBox {
    pub fn new(x_min: f32, y_min: f32, x_max: f32, y_max: f32) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("box has non-finite coordinate: {coords:?}")));
        }
        if !(self.x_min < self.x_max && self.y_min < self.y_max) {
            return Err(Error::invalid(format!("box is empty or inverted: {coords:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() as f64 * self.height() as f64
    }

    pub fn center(&self) -> (f32, f32) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Mirror about the vertical axis of an image `image_width` pixels wide.
    pub fn flip_horizontal(&self, image_width: f32) -> Self {
        Self {
            x_min: image_width - self.x_max,
            y_min: self.y_min,
            x_max: image_width - self.x_min,
            y_max: self.y_max,
        }
    }

    pub fn within(&self, width: f32, height: f32) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }
}

impl TryFrom<[f32; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f32; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f32; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

/// A ground-truth object: class and box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(2.0, 0.0, 1.0, 1.0).is_err());
        assert!(serde_json::from_str::<BBox>("[0, 0, 1, 1]").is_ok());
        assert!(serde_json::from_str::<BBox>("[0, 0, 0, 1]").is_err());
    }

    #[test]
    fn flip_is_an_involution() {
        let b = BBox::new(3.0, 4.0, 10.0, 9.0).unwrap();
        let f = b.flip_horizontal(64.0);
        assert_eq!(f, BBox::new(54.0, 4.0, 61.0, 9.0).unwrap());
        assert_eq!(f.flip_horizontal(64.0), b);
    }
}
