use serde::{Deserialize, Serialize};

/// Axis-aligned box in pixels, `(x_min, y_min, w, h)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, w: f64, h: f64) -> Self {
        Self { x_min, y_min, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, w, h)
    }

    pub fn x_max(&self) -> f64 {
        self.x_min + self.w
    }

    pub fn y_max(&self) -> f64 {
        self.y_min + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x_min + 0.5 * self.w, self.y_min + 0.5 * self.h)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// `(cx, cy, w, h)`, the layout used on the tape.
    pub fn to_cxcywh(&self) -> [f64; 4] {
        let (cx, cy) = self.center();
        [cx, cy, self.w, self.h]
    }

    pub fn from_cxcywh(v: [f64; 4]) -> Self {
        Self::from_center(v[0], v[1], v[2], v[3])
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.x_min.is_finite() && self.y_min.is_finite()
    }

    /// Intersection with `[0, width] x [0, height]`; `None` if nothing is left.
    pub fn clip(&self, width: f64, height: f64) -> Option<Self> {
        let x0 = self.x_min.clamp(0.0, width);
        let y0 = self.y_min.clamp(0.0, height);
        let x1 = self.x_max().clamp(0.0, width);
        let y1 = self.y_max().clamp(0.0, height);
        (x1 > x0 && y1 > y0).then(|| Self::new(x0, y0, x1 - x0, y1 - y0))
    }
}

/// Intersection over union; 0 for disjoint boxes. Symmetric.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max().min(b.x_max()) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max().min(b.y_max()) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}
