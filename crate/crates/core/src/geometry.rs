//! Axis-aligned boxes in absolute pixel coordinates.
//!
//! Boxes are stored in center form because the pairwise spatial encoding is
//! expressed in terms of centers; interchange files use corner form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A box with strictly positive width and height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl BBox {
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite center form ({cx}, {cy}, {w}, {h})"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "width and height must be positive, got w={w} h={h}"
            )));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite corners [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::InvalidBox(format!(
                "corners [{x1}, {y1}, {x2}, {y2}] need x2 > x1 and y2 > y1"
            )));
        }
        Self::from_center((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn x1(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn x2(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y2(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    /// `[x1, y1, x2, y2]`
    pub fn corners(&self) -> [f64; 4] {
        [self.x1(), self.y1(), self.x2(), self.y2()]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    /// Scales about the origin, so centers move too.
    pub fn scale(&self, s: f64) -> Result<Self> {
        Self::from_center(self.cx * s, self.cy * s, self.w * s, self.h * s)
    }

    /// Mirror about the vertical line `x = width / 2`.
    pub fn flip_horizontal(&self, width: f64) -> Self {
        Self {
            cx: width - self.cx,
            ..*self
        }
    }

    /// True when `other` lies entirely inside `self`.
    pub fn contains(&self, other: &BBox) -> bool {
        other.x1() >= self.x1()
            && other.y1() >= self.y1()
            && other.x2() <= self.x2()
            && other.y2() <= self.y2()
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.x2().min(other.x2()) - self.x1().max(other.x1());
        let ih = self.y2().min(other.y2()) - self.y1().max(other.y1());
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BBox::from_corners(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.corners()
    }
}

/// Intersection over union.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    // Corner-based areas, so that iou(a, a) is exactly 1.
    let area = |r: &BBox| (r.x2() - r.x1()) * (r.y2() - r.y1());
    let union = area(a) + area(b) - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Counts grid cells whose centers fall inside each box.
    fn raster_iou(a: &BBox, b: &BBox, cell: f64) -> f64 {
        let x0 = a.x1().min(b.x1());
        let y0 = a.y1().min(b.y1());
        let x1 = a.x2().max(b.x2());
        let y1 = a.y2().max(b.y2());
        let nx = ((x1 - x0) / cell).ceil() as usize;
        let ny = ((y1 - y0) / cell).ceil() as usize;
        let inside = |bx: &BBox, x: f64, y: f64| x >= bx.x1() && x < bx.x2() && y >= bx.y1() && y < bx.y2();
        let (mut inter, mut union) = (0usize, 0usize);
        for j in 0..ny {
            for i in 0..nx {
                let x = x0 + (i as f64 + 0.5) * cell;
                let y = y0 + (j as f64 + 0.5) * cell;
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += (ia && ib) as usize;
                union += (ia || ib) as usize;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn identical_boxes() {
        let a = BBox::from_center(3.0, 4.0, 2.0, 5.0).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn disjoint_boxes() {
        let a = BBox::from_corners(0.0, 0.0, 1.0, 1.0).unwrap();
        let b = BBox::from_corners(1.0, 0.0, 2.0, 1.0).unwrap();
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn half_shifted_boxes() {
        let a = BBox::from_center(1.0, 1.0, 2.0, 2.0).unwrap();
        let b = BBox::from_center(2.0, 1.0, 2.0, 2.0).unwrap();
        let raster = raster_iou(&a, &b, 0.01);
        assert!((raster - 1.0 / 3.0).abs() < 1e-3, "raster oracle {raster}");
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate() {
        assert!(BBox::from_corners(10.0, 10.0, 5.0, 5.0).is_err());
        assert!(BBox::from_center(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::from_center(0.0, 0.0, 1.0, -1.0).is_err());
        assert!(BBox::from_center(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn serde_uses_corner_form() {
        let b = BBox::from_corners(1.0, 2.0, 5.0, 10.0).unwrap();
        let json = serde_json::to_string(&b).unwrap();
        assert_eq!(json, "[1.0,2.0,5.0,10.0]");
        let back: BBox = serde_json::from_str(&json).unwrap();
        assert_eq!(back, b);
        assert!(serde_json::from_str::<BBox>("[10,10,5,5]").is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-100.0..100.0f64, -100.0..100.0f64, 0.1..50.0f64, 0.1..50.0f64)
            .prop_map(|(cx, cy, w, h)| BBox::from_center(cx, cy, w, h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn iou_translation_invariant(a in arb_box(), b in arb_box(), dx in -50.0..50.0f64, dy in -50.0..50.0f64) {
            let moved = iou(&a.translate(dx, dy), &b.translate(dx, dy));
            prop_assert!((moved - iou(&a, &b)).abs() < 1e-9);
        }

        #[test]
        fn corner_round_trip(a in arb_box()) {
            let [x1, y1, x2, y2] = a.corners();
            let back = BBox::from_corners(x1, y1, x2, y2).unwrap();
            prop_assert!((back.cx() - a.cx()).abs() < 1e-9);
            prop_assert!((back.cy() - a.cy()).abs() < 1e-9);
            prop_assert!((back.w() - a.w()).abs() < 1e-9);
            prop_assert!((back.h() - a.h()).abs() < 1e-9);
        }
    }
}
