use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::{CameraIntrinsics, GeometryError};

/// Axis-aligned image box, top-left and bottom-right corners in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox2D {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox2D {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(GeometryError::InvalidBox)
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max && self.as_array().iter().all(|v| v.is_finite())
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self, GeometryError> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    pub fn intersection_area(&self, other: &BBox2D) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Clips to the image rectangle; `None` when nothing remains.
    pub fn clamp_to(&self, intr: &CameraIntrinsics) -> Option<BBox2D> {
        let b = BBox2D {
            x_min: self.x_min.clamp(0.0, intr.width),
            y_min: self.y_min.clamp(0.0, intr.height),
            x_max: self.x_max.clamp(0.0, intr.width),
            y_max: self.y_max.clamp(0.0, intr.height),
        };
        b.is_valid().then_some(b)
    }

    pub fn within(&self, intr: &CameraIntrinsics) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= intr.width && self.y_max <= intr.height
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox2D, b: &BBox2D) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BBox2D {
        BBox2D::new(a, b, c, d).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &bx(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
        // touching edges share no area
        assert_eq!(iou(&a, &bx(2.0, 0.0, 3.0, 2.0)), 0.0);
    }

    #[test]
    fn rejects_degenerate_box() {
        assert!(BBox2D::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BBox2D::new(0.0, 3.0, 1.0, 2.0).is_err());
        assert!(BBox2D::new(0.0, 0.0, f64::NAN, 2.0).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox2D> {
        (0.0..500.0f64, 0.0..500.0f64, 0.5..200.0f64, 0.5..200.0f64).prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }
    }
}
