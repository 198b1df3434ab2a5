//! Axis-aligned boxes, intersection-over-union and the sliding-window patch grid.
//!
//! Boxes use real-valued pixel coordinates with a half-open extent, so the
//! area of `[x_min, y_min, x_max, y_max]` is `(x_max - x_min) * (y_max - y_min)`.

use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::Error;

/// Axis-aligned rectangle in pixel coordinates.
///
/// Serializes as the 4-element array `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, Error> {
        let all_finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !all_finite || x_min >= x_max || y_min >= y_max {
            return Err(Error::InvalidBox([x_min, y_min, x_max, y_max]));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Square box with its top-left corner at `(x, y)`.
    pub fn square(x: f64, y: f64, side: f64) -> Result<Self, Error> {
        Self::new(x, y, x + side, y + side)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Side of the square with the same area.
    pub fn side(&self) -> f64 {
        libm::sqrt(self.area())
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Multiplies every coordinate by `factor`.
    pub fn scaled(&self, factor: f64) -> BBox {
        BBox {
            x_min: self.x_min * factor,
            y_min: self.y_min * factor,
            x_max: self.x_max * factor,
            y_max: self.y_max * factor,
        }
    }

    pub fn contained_in(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}, {}, {}, {}]",
            self.x_min, self.y_min, self.x_max, self.y_max
        )
    }
}

/// Intersection over union of two valid boxes.
///
/// Symmetric, in `[0, 1]`, exactly `1.0` for identical boxes and `0.0` for
/// boxes that do not overlap (touching edges included).
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Sliding-window layout over an `image_height x image_width` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub image_height: usize,
    pub image_width: usize,
    pub window: usize,
    pub stride: usize,
}

impl GridSpec {
    pub fn new(
        image_height: usize,
        image_width: usize,
        window: usize,
        stride: usize,
    ) -> Result<Self, Error> {
        let spec = Self {
            image_height,
            image_width,
            window,
            stride,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn square(side: usize, window: usize, stride: usize) -> Result<Self, Error> {
        Self::new(side, side, window, stride)
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::InvalidGrid("window and stride must be at least 1"));
        }
        if self.window > self.image_height || self.window > self.image_width {
            return Err(Error::InvalidGrid("window larger than the image"));
        }
        Ok(())
    }

    /// Window positions along an axis of length `extent`: `ceil((extent - K) / d) + 1`.
    pub fn positions_along(&self, extent: usize) -> usize {
        (extent - self.window).div_ceil(self.stride) + 1
    }

    pub fn rows(&self) -> usize {
        self.positions_along(self.image_height)
    }

    pub fn cols(&self) -> usize {
        self.positions_along(self.image_width)
    }

    pub fn len(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn window_origins(extent: usize, window: usize, stride: usize, count: usize) -> Vec<usize> {
    // The last window is clamped flush to the image edge.
    (0..count)
        .map(|i| (i * stride).min(extent - window))
        .collect()
}

/// `K x K` windows in row-major order (row index outer, column index inner).
pub fn patch_grid(spec: &GridSpec) -> Result<Vec<BBox>, Error> {
    spec.validate()?;
    let ys = window_origins(spec.image_height, spec.window, spec.stride, spec.rows());
    let xs = window_origins(spec.image_width, spec.window, spec.stride, spec.cols());
    let k = spec.window as f64;
    let mut boxes = Vec::with_capacity(ys.len() * xs.len());
    for &y in &ys {
        for &x in &xs {
            boxes.push(BBox::square(x as f64, y as f64, k)?);
        }
    }
    Ok(boxes)
}

/// Concatenation of several grids over the same image, in the given order.
pub fn multi_scale_grid(specs: &[GridSpec]) -> Result<Vec<BBox>, Error> {
    let mut out = Vec::new();
    for spec in specs {
        out.extend(patch_grid(spec)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    /// Pixel-count oracle for integer boxes.
    fn raster_iou(a: &BBox, c: &BBox) -> f64 {
        let (mut inter, mut union) = (0u64, 0u64);
        let hi = a.x_max().max(c.x_max()).max(a.y_max()).max(c.y_max()) as i64;
        for y in 0..hi {
            for x in 0..hi {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let ina = px > a.x_min() && px < a.x_max() && py > a.y_min() && py < a.y_max();
                let inc = px > c.x_min() && px < c.x_max() && py > c.y_min() && py < c.y_max();
                inter += (ina && inc) as u64;
                union += (ina || inc) as u64;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&b(0.0, 0.0, 1.0, 1.0), &b(5.0, 5.0, 6.0, 6.0)), 0.0);
        let c = b(1.0, 0.0, 3.0, 2.0);
        let expected = raster_iou(&a, &c);
        assert!((expected - 1.0 / 3.0).abs() < 1e-12);
        assert!((iou(&a, &c) - expected).abs() < 1e-12);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        assert_eq!(iou(&b(0.0, 0.0, 1.0, 1.0), &b(1.0, 0.0, 2.0, 1.0)), 0.0);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 3.0, 1.0, 2.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn grid_examples() {
        let g = patch_grid(&GridSpec::square(100, 50, 25).unwrap()).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], b(0.0, 0.0, 50.0, 50.0));
        assert_eq!(g[1], b(25.0, 0.0, 75.0, 50.0));
        assert_eq!(g[8], b(50.0, 50.0, 100.0, 100.0));

        for d in [1, 3, 7] {
            let one = patch_grid(&GridSpec::square(40, 40, d).unwrap()).unwrap();
            assert_eq!(one, [b(0.0, 0.0, 40.0, 40.0)]);
        }
        assert_eq!(patch_grid(&GridSpec::square(1000, 256, 128).unwrap()).unwrap().len(), 49);
    }

    #[test]
    fn overrunning_window_is_clamped() {
        let spec = GridSpec::new(10, 11, 4, 3).unwrap();
        let g = patch_grid(&spec).unwrap();
        assert_eq!((spec.rows(), spec.cols()), (3, 4));
        assert_eq!(g.last().unwrap(), &b(7.0, 6.0, 11.0, 10.0));
        assert!(g.iter().all(|p| p.contained_in(11.0, 10.0)));
    }

    #[test]
    fn oversized_window_errors() {
        assert!(GridSpec::new(10, 20, 11, 1).is_err());
        assert!(GridSpec::new(10, 10, 4, 0).is_err());
    }

    #[test]
    fn bbox_serializes_as_array() {
        let v: [f64; 4] = b(1.0, 2.0, 3.0, 4.0).into();
        assert_eq!(v, [1.0, 2.0, 3.0, 4.0]);
        assert!(BBox::try_from([3.0, 0.0, 1.0, 1.0]).is_err());
    }
}
