//! Axis-aligned boxes in normalized center format and their overlap measures.

use serde::{Deserialize, Serialize};

/// Box as (cx, cy, w, h), normalized to the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_xyxy(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: 0.5 * (x1 + x2),
            cy: 0.5 * (y1 + y2),
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn xyxy(&self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Inside the unit square with positive extents (tolerates rounding at the edges).
    pub fn is_normalized(&self) -> bool {
        let [x1, y1, x2, y2] = self.xyxy();
        let tol = 1e-9;
        self.w > 0.0
            && self.h > 0.0
            && x1 >= -tol
            && y1 >= -tol
            && x2 <= 1.0 + tol
            && y2 <= 1.0 + tol
    }

    pub fn l1(&self, other: &BBox) -> f64 {
        self.as_array()
            .iter()
            .zip(other.as_array())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

fn inter_union(a: &BBox, b: &BBox) -> (f64, f64) {
    let [ax1, ay1, ax2, ay2] = a.xyxy();
    let [bx1, by1, bx2, by2] = b.xyxy();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    (inter, a.area() + b.area() - inter)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (inter, union) = inter_union(a, b);
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: IoU minus the fraction of the enclosing box not covered by the union.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let (inter, union) = inter_union(a, b);
    let [ax1, ay1, ax2, ay2] = a.xyxy();
    let [bx1, by1, bx2, by2] = b.xyxy();
    let enclosing = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    if union <= 0.0 || enclosing <= 0.0 {
        return 0.0;
    }
    inter / union - (enclosing - union) / enclosing
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn giou_hand_values() {
        let a = BBox::from_xyxy(0., 0., 1., 1.);
        assert_eq!(giou(&a, &a), 1.0);
        let touching = BBox::from_xyxy(1., 0., 2., 1.);
        assert!(giou(&a, &touching).abs() < 1e-15);
        let apart = BBox::from_xyxy(2., 0., 3., 1.);
        assert!((giou(&a, &apart) + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn iou_hand_value() {
        let a = BBox::from_xyxy(0., 0., 1., 1.);
        let b = BBox::from_xyxy(0.9, 0., 1.9, 1.);
        assert!((iou(&a, &b) - 0.1 / 1.9).abs() < 1e-12);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-2.0..2.0f64, -2.0..2.0f64, 0.01..3.0f64, 0.01..3.0f64)
            .prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
    }

    proptest! {
        #[test]
        fn giou_bounded_and_below_iou(a in arb_box(), b in arb_box()) {
            let g = giou(&a, &b);
            prop_assert!((-1.0..=1.0 + 1e-12).contains(&g));
            prop_assert!(g <= iou(&a, &b) + 1e-12);
        }

        #[test]
        fn giou_equals_iou_for_aligned_touching(x in -1.0..1.0f64, w1 in 0.1..1.0f64, w2 in 0.1..1.0f64) {
            let a = BBox::from_xyxy(x, 0.0, x + w1, 1.0);
            let b = BBox::from_xyxy(x + w1, 0.0, x + w1 + w2, 1.0);
            prop_assert!((giou(&a, &b) - iou(&a, &b)).abs() < 1e-12);
        }
    }
}
