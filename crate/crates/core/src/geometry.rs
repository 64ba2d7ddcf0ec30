//! Bounding-box algebra for layout/token matching: format
//! standardization, cross-resolution interpolation, IoU, containment, and
//! corner distances.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub type GeometryResult<T> = Result<T, GeometryError>;

#[derive(Debug, Clone, PartialEq)]
pub enum GeometryError {
    NegativeExtent { width: f64, height: f64 },
    ZeroDimension { width: f64, height: f64 },
    NonFinite { label: &'static str },
}

impl fmt::Display for GeometryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeometryError::NegativeExtent { width, height } => {
                write!(f, "xywh box has negative extent: w={width}, h={height}")
            }
            GeometryError::ZeroDimension { width, height } => {
                write!(f, "image dimensions must be > 0, got {width}x{height}")
            }
            GeometryError::NonFinite { label } => write!(f, "non-finite coordinate in {label}"),
        }
    }
}

impl std::error::Error for GeometryError {}

/// Axis-aligned box in pixel coordinates with ordered corners
/// (`x1 <= x2`, `y1 <= y2`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Input corner conventions accepted by [`standardize_bbox`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BBoxFormat {
    /// `(x1, y1, x2, y2)`, corners in any order.
    Xyxy,
    /// `(x, y, w, h)` with non-negative extent.
    Xywh,
}

/// Which corner pair a distance is measured between.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corner {
    TopLeft,
    BottomRight,
}

/// Norm for corner distances. The default is L1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CornerNorm {
    #[default]
    L1,
    L2,
}

impl CornerNorm {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Some(CornerNorm::L1),
            "l2" => Some(CornerNorm::L2),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            CornerNorm::L1 => "l1",
            CornerNorm::L2 => "l2",
        }
    }
}

impl BBox {
    /// Build with corners reordered to canonical form.
    pub fn ordered(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox {
            x1: x1.min(x2),
            y1: y1.min(y2),
            x2: x1.max(x2),
            y2: y1.max(y2),
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn corner(&self, which: Corner) -> (f64, f64) {
        match which {
            Corner::TopLeft => (self.x1, self.y1),
            Corner::BottomRight => (self.x2, self.y2),
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Clamp all coordinates into `[0, width] x [0, height]`; reports
    /// whether anything moved.
    pub fn clamp_to(&self, width: f64, height: f64) -> (BBox, bool) {
        let clamped = BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        };
        let moved = clamped != *self;
        (clamped, moved)
    }
}

/// One document layout detection: box, class label, confidence, free-form
/// metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutRegion {
    pub bbox: BBox,
    pub class_label: String,
    pub score: f64,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

/// Bring a raw 4-float box into canonical corner-ordered xyxy form.
pub fn standardize_bbox(raw: [f64; 4], format: BBoxFormat) -> GeometryResult<BBox> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite { label: "bbox" });
    }
    match format {
        BBoxFormat::Xyxy => Ok(BBox::ordered(raw[0], raw[1], raw[2], raw[3])),
        BBoxFormat::Xywh => {
            let [x, y, w, h] = raw;
            if w < 0.0 || h < 0.0 {
                return Err(GeometryError::NegativeExtent {
                    width: w,
                    height: h,
                });
            }
            Ok(BBox {
                x1: x,
                y1: y,
                x2: x + w,
                y2: y + h,
            })
        }
    }
}

/// Rescale a box from one image resolution to another, per axis.
pub fn interpolate_bbox(
    b: &BBox,
    from_dims: (f64, f64),
    to_dims: (f64, f64),
) -> GeometryResult<BBox> {
    let (fw, fh) = from_dims;
    let (tw, th) = to_dims;
    if fw <= 0.0 || fh <= 0.0 {
        return Err(GeometryError::ZeroDimension {
            width: fw,
            height: fh,
        });
    }
    if tw <= 0.0 || th <= 0.0 {
        return Err(GeometryError::ZeroDimension {
            width: tw,
            height: th,
        });
    }
    let (sx, sy) = (tw / fw, th / fh);
    Ok(BBox {
        x1: b.x1 * sx,
        y1: b.y1 * sy,
        x2: b.x2 * sx,
        y2: b.y2 * sy,
    })
}

/// Intersection over union; 0 when the union has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Boundary-inclusive containment of `inner` within `outer`.
pub fn fully_contains(outer: &BBox, inner: &BBox) -> bool {
    outer.x1 <= inner.x1 && outer.y1 <= inner.y1 && inner.x2 <= outer.x2 && inner.y2 <= outer.y2
}

/// Distance between the same-named corners of two boxes under the chosen
/// norm.
pub fn corner_distance(region: &BBox, token: &BBox, corner: Corner, norm: CornerNorm) -> f64 {
    let (rx, ry) = region.corner(corner);
    let (tx, ty) = token.corner(corner);
    let (dx, dy) = ((rx - tx).abs(), (ry - ty).abs());
    match norm {
        CornerNorm::L1 => dx + dy,
        CornerNorm::L2 => (dx * dx + dy * dy).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn standardize_xywh() {
        let b = standardize_bbox([10.0, 20.0, 30.0, 40.0], BBoxFormat::Xywh).unwrap();
        assert_eq!(b, BBox { x1: 10.0, y1: 20.0, x2: 40.0, y2: 60.0 });
    }

    #[test]
    fn standardize_xyxy_identity_and_reorder() {
        let b = standardize_bbox([10.0, 20.0, 40.0, 60.0], BBoxFormat::Xyxy).unwrap();
        assert_eq!(b, BBox { x1: 10.0, y1: 20.0, x2: 40.0, y2: 60.0 });
        let swapped = standardize_bbox([40.0, 60.0, 10.0, 20.0], BBoxFormat::Xyxy).unwrap();
        assert_eq!(swapped, b);
    }

    #[test]
    fn standardize_rejects_negative_extent() {
        assert!(matches!(
            standardize_bbox([0.0, 0.0, -1.0, 5.0], BBoxFormat::Xywh),
            Err(GeometryError::NegativeExtent { .. })
        ));
    }

    #[test]
    fn interpolate_examples() {
        let b = BBox { x1: 10.0, y1: 20.0, x2: 40.0, y2: 60.0 };
        let same = interpolate_bbox(&b, (100.0, 100.0), (100.0, 100.0)).unwrap();
        assert_eq!(same, b);

        let doubled = interpolate_bbox(&b, (100.0, 100.0), (200.0, 200.0)).unwrap();
        assert_eq!(doubled, BBox { x1: 20.0, y1: 40.0, x2: 80.0, y2: 120.0 });

        let aniso = interpolate_bbox(&b, (100.0, 200.0), (300.0, 100.0)).unwrap();
        assert_eq!(aniso, BBox { x1: 30.0, y1: 10.0, x2: 120.0, y2: 30.0 });
    }

    #[test]
    fn interpolate_rejects_zero_source() {
        let b = BBox { x1: 0.0, y1: 0.0, x2: 1.0, y2: 1.0 };
        assert!(interpolate_bbox(&b, (0.0, 100.0), (10.0, 10.0)).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = BBox { x1: 0.0, y1: 0.0, x2: 10.0, y2: 10.0 };
        assert_eq!(iou(&a, &a), 1.0);

        let disjoint = BBox { x1: 20.0, y1: 20.0, x2: 30.0, y2: 30.0 };
        assert_eq!(iou(&a, &disjoint), 0.0);

        let half = BBox { x1: 5.0, y1: 0.0, x2: 15.0, y2: 10.0 };
        assert_close(iou(&a, &half), 1.0 / 3.0, 1e-12);
    }

    #[test]
    fn containment_is_boundary_inclusive() {
        let outer = BBox { x1: 0.0, y1: 0.0, x2: 10.0, y2: 10.0 };
        assert!(fully_contains(&outer, &outer));
        let inner = BBox { x1: 2.0, y1: 2.0, x2: 3.0, y2: 3.0 };
        assert!(fully_contains(&outer, &inner));
        let protruding = BBox { x1: 2.0, y1: 2.0, x2: 11.0, y2: 3.0 };
        assert!(!fully_contains(&outer, &protruding));
    }

    #[test]
    fn corner_distance_examples() {
        let region = BBox { x1: 0.0, y1: 0.0, x2: 5.0, y2: 5.0 };
        assert_eq!(
            corner_distance(&region, &region, Corner::TopLeft, CornerNorm::L1),
            0.0
        );
        let token = BBox { x1: 3.0, y1: 4.0, x2: 6.0, y2: 7.0 };
        assert_eq!(
            corner_distance(&region, &token, Corner::TopLeft, CornerNorm::L1),
            7.0
        );
        assert_close(
            corner_distance(&region, &token, Corner::TopLeft, CornerNorm::L2),
            5.0,
            1e-12,
        );
    }

    #[test]
    fn containment_implies_iou_area_ratio() {
        let outer = BBox { x1: 0.0, y1: 0.0, x2: 10.0, y2: 8.0 };
        let inner = BBox { x1: 1.0, y1: 1.0, x2: 4.0, y2: 3.0 };
        assert!(fully_contains(&outer, &inner));
        assert_close(iou(&outer, &inner), inner.area() / outer.area(), 1e-12);
    }
}
