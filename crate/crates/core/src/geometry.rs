use serde::{Deserialize, Serialize};

/// Axis-aligned box in corner form `(x1, y1, x2, y2)`, pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    /// From COCO `[x, y, w, h]`.
    pub fn from_xywh(xywh: [f64; 4]) -> Self {
        let [x, y, w, h] = xywh;
        BBox::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn scale(&self, sx: f64, sy: f64) -> Self {
        BBox::new(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        BBox::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Strict interior test.
    pub fn contains_strict(&self, x: f64, y: f64) -> bool {
        self.x1 < x && x < self.x2 && self.y1 < y && y < self.y2
    }
}

pub const IOU_EPS: f64 = 1e-12;

/// Intersection over union; 0 for disjoint or degenerate pairs.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union.max(IOU_EPS)).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_cases() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(20.0, 20.0, 30.0, 30.0)), 0.0);
        let b = BBox::new(5.0, 5.0, 15.0, 15.0);
        assert!((iou(&a, &b) - 25.0 / 175.0).abs() < 1e-12);
    }

    #[test]
    fn xywh_conversion() {
        assert_eq!(BBox::from_xywh([10.0, 20.0, 30.0, 40.0]), BBox::new(10.0, 20.0, 40.0, 60.0));
    }

    proptest! {
        #[test]
        fn corner_xywh_round_trip(x in -500i32..500, y in -500i32..500, w in 1i32..400, h in 1i32..400, q in 0u32..4) {
            // quarter-pixel lattice keeps the arithmetic exact
            let f = 0.25 * q as f64;
            let b = BBox::new(x as f64 + f, y as f64, (x + w) as f64, (y + h) as f64 + f);
            prop_assert_eq!(BBox::from_xywh(b.to_xywh()), b);
        }

        #[test]
        fn iou_is_symmetric_and_bounded(a in 0.0f64..50.0, b in 0.0f64..50.0, w in 0.5f64..40.0, h in 0.5f64..40.0,
                                        c in 0.0f64..50.0, d in 0.0f64..50.0) {
            let p = BBox::new(a, b, a + w, b + h);
            let q = BBox::new(c, d, c + h, d + w);
            let v = iou(&p, &q);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!((v - iou(&q, &p)).abs() < 1e-12);
        }
    }
}
