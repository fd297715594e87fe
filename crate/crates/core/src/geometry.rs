//! Axis-aligned box arithmetic: overlap, union regions, context expansion,
//! relative size and separation distance.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("box has non-positive size ({w} x {h})")]
    Degenerate { w: f64, h: f64 },
    #[error("box origin ({x}, {y}) is negative")]
    NegativeOrigin { x: f64, y: f64 },
    #[error("box coordinate is not finite")]
    NotFinite,
}

/// Axis-aligned box, top-left origin, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[T; 4]", into = "[T; 4]")]
#[serde(bound = "T: Scalar")]
pub struct BBox<T> {
    pub x: T,
    pub y: T,
    pub w: T,
    pub h: T,
}

impl<T: Scalar> From<[T; 4]> for BBox<T> {
    fn from(v: [T; 4]) -> Self {
        Self { x: v[0], y: v[1], w: v[2], h: v[3] }
    }
}

impl<T: Scalar> From<BBox<T>> for [T; 4] {
    fn from(b: BBox<T>) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl<T: Scalar> BBox<T> {
    /// Checked constructor: positive size, non-negative origin.
    pub fn new(x: T, y: T, w: T, h: T) -> Result<Self, GeometryError> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    /// Builds a box from corner coordinates without validation.
    pub fn from_corners(x0: T, y0: T, x1: T, y1: T) -> Self {
        Self { x: x0, y: y0, w: x1 - x0, h: y1 - y0 }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()) {
            return Err(GeometryError::NotFinite);
        }
        if self.w <= T::zero() || self.h <= T::zero() {
            return Err(GeometryError::Degenerate { w: self.w.to_f64_lossy(), h: self.h.to_f64_lossy() });
        }
        if self.x < T::zero() || self.y < T::zero() {
            return Err(GeometryError::NegativeOrigin { x: self.x.to_f64_lossy(), y: self.y.to_f64_lossy() });
        }
        Ok(())
    }

    #[inline]
    pub fn x1(&self) -> T {
        self.x + self.w
    }

    #[inline]
    pub fn y1(&self) -> T {
        self.y + self.h
    }

    #[inline]
    pub fn area(&self) -> T {
        self.w.max(T::zero()) * self.h.max(T::zero())
    }

    /// Overlap region, `None` when the boxes share no interior.
    pub fn intersection(&self, other: &Self) -> Option<Self> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.x1().min(other.x1());
        let y1 = self.y1().min(other.y1());
        (x1 > x0 && y1 > y0).then(|| Self::from_corners(x0, y0, x1, y1))
    }

    pub fn contains(&self, other: &Self) -> bool {
        self.x <= other.x && self.y <= other.y && self.x1() >= other.x1() && self.y1() >= other.y1()
    }

    /// Clips the box to `[0, w] x [0, h]`. The result may be degenerate.
    pub fn clamp_to(&self, image_w: T, image_h: T) -> Self {
        let x0 = self.x.max(T::zero()).min(image_w);
        let y0 = self.y.max(T::zero()).min(image_h);
        let x1 = self.x1().max(T::zero()).min(image_w);
        let y1 = self.y1().max(T::zero()).min(image_h);
        Self::from_corners(x0, y0, x1, y1)
    }

    /// Integer pixel rectangle `(x, y, w, h)` covering the box, clipped to the
    /// image and at least one pixel wide and tall.
    pub fn pixel_rect(&self, image_w: u32, image_h: u32) -> (u32, u32, u32, u32) {
        let iw = image_w.max(1);
        let ih = image_h.max(1);
        let x0 = self.x.floor().to_f64_lossy().max(0.0) as u32;
        let y0 = self.y.floor().to_f64_lossy().max(0.0) as u32;
        let x0 = x0.min(iw - 1);
        let y0 = y0.min(ih - 1);
        let x1 = (self.x1().ceil().to_f64_lossy().max(0.0) as u32).clamp(x0 + 1, iw);
        let y1 = (self.y1().ceil().to_f64_lossy().max(0.0) as u32).clamp(y0 + 1, ih);
        (x0, y0, x1 - x0, y1 - y0)
    }

    pub fn cast<U: Scalar>(&self) -> BBox<U> {
        BBox {
            x: U::lit(self.x.to_f64_lossy()),
            y: U::lit(self.y.to_f64_lossy()),
            w: U::lit(self.w.to_f64_lossy()),
            h: U::lit(self.h.to_f64_lossy()),
        }
    }
}

/// Intersection over union; symmetric, in `[0, 1]`.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let inter = match a.intersection(b) {
        Some(i) => i.area(),
        None => return T::zero(),
    };
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        return T::zero();
    }
    (inter / union).min(T::one())
}

/// Smallest axis-aligned box containing both inputs.
pub fn union_box<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> BBox<T> {
    BBox::from_corners(a.x.min(b.x), a.y.min(b.y), a.x1().max(b.x1()), a.y1().max(b.y1()))
}

/// Grows each dimension by `fraction` of its length, half on either edge,
/// then clips to the image.
pub fn expand_and_clamp<T: Scalar>(b: &BBox<T>, fraction: T, image_w: u32, image_h: u32) -> BBox<T> {
    let fraction = fraction.max(T::zero());
    let half = T::lit(0.5);
    let dx = b.w * fraction * half;
    let dy = b.h * fraction * half;
    let grown = BBox::from_corners(b.x - dx, b.y - dy, b.x1() + dx, b.y1() + dy);
    grown.clamp_to(T::from_count(image_w as usize), T::from_count(image_h as usize))
}

/// `min(area) / max(area)`, in `(0, 1]` for valid boxes.
pub fn size_ratio<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let (aa, ab) = (a.area(), b.area());
    let hi = aa.max(ab);
    if hi <= T::zero() {
        return T::zero();
    }
    aa.min(ab) / hi
}

/// Euclidean gap between the closest edges, normalised by the longer image
/// side. Zero when the boxes overlap or touch.
pub fn separation<T: Scalar>(a: &BBox<T>, b: &BBox<T>, image_w: u32, image_h: u32) -> T {
    let dx = (a.x.max(b.x) - a.x1().min(b.x1())).max(T::zero());
    let dy = (a.y.max(b.y) - a.y1().min(b.y1())).max(T::zero());
    let norm = T::from_count(image_w.max(image_h).max(1) as usize);
    (dx * dx + dy * dy).sqrt() / norm
}

/// The region a relation is judged against: the union of subject and object
/// boxes grown for context and clipped to the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RegionCropSpec<T: Scalar> {
    pub source_image_id: String,
    pub crop_box: BBox<T>,
    pub subject_box: BBox<T>,
    pub object_box: BBox<T>,
    pub expansion_fraction: T,
}

impl<T: Scalar> RegionCropSpec<T> {
    pub fn new(
        source_image_id: impl Into<String>,
        subject_box: BBox<T>,
        object_box: BBox<T>,
        expansion_fraction: T,
        image_w: u32,
        image_h: u32,
    ) -> Self {
        let crop_box = expand_and_clamp(&union_box(&subject_box, &object_box), expansion_fraction, image_w, image_h);
        Self {
            source_image_id: source_image_id.into(),
            crop_box,
            subject_box,
            object_box,
            expansion_fraction: expansion_fraction.max(T::zero()),
        }
    }
}
