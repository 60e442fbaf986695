//! Axis-aligned boxes and the overlap measures built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in image pixels, `(x_min, y_min, x_max, y_max)`.
///
/// The max sides are exclusive when the box is derived from a pixel mask: a
/// mask covering columns `c0..=c1` has `x_min = c0`, `x_max = c1 + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    /// Box spanned by the distances `(l, t, r, b)` around the point `(px, py)`.
    pub fn from_distances(px: f64, py: f64, ltrb: [f64; 4]) -> Self {
        Self::new(px - ltrb[0], py - ltrb[1], px + ltrb[2], py + ltrb[3])
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

    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        ]
    }

    pub fn is_well_ordered(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    /// Strict interior test.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x > self.x_min && x < self.x_max && y > self.y_min && y < self.y_max
    }

    /// Signed distances `(l, t, r, b)` from a point to the four sides.
    pub fn distances_from(&self, x: f64, y: f64) -> [f64; 4] {
        [x - self.x_min, y - self.y_min, self.x_max - x, self.y_max - y]
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let ih = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        iw.max(0.0) * ih.max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// Generalized IoU of two boxes, in `[-1, 1]`.
///
/// Both boxes must have positive area.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    for (name, bx) in [("first", a), ("second", b)] {
        if !bx.is_well_ordered() {
            return Err(Error::Precondition(format!(
                "giou: {name} box {:?} has zero or negative area",
                bx.to_array()
            )));
        }
    }
    Ok(giou_with_grad(a, b).0)
}

/// GIoU and its gradient with respect to the first box's four coordinates.
///
/// Subgradients at the max/min switching points follow the convention that
/// ties belong to the second box.
pub fn giou_with_grad(p: &BBox, g: &BBox) -> (f64, [f64; 4]) {
    let pw = p.x_max - p.x_min;
    let ph = p.y_max - p.y_min;
    let area_p = pw * ph;
    let area_g = g.area();

    let iw = p.x_max.min(g.x_max) - p.x_min.max(g.x_min);
    let ih = p.y_max.min(g.y_max) - p.y_min.max(g.y_min);
    let overlapping = iw > 0.0 && ih > 0.0;
    let inter = if overlapping { iw * ih } else { 0.0 };
    let union = area_p + area_g - inter;

    let cw = p.x_max.max(g.x_max) - p.x_min.min(g.x_min);
    let ch = p.y_max.max(g.y_max) - p.y_min.min(g.y_min);
    let enclose = cw * ch;

    let value = inter / union - 1.0 + union / enclose;

    // dg/dI, dg/dA, dg/dC
    let d_inter = 1.0 / union + inter / (union * union) - 1.0 / enclose;
    let d_area = -inter / (union * union) + 1.0 / enclose;
    let d_enclose = -union / (enclose * enclose);

    let d_area_dp = [-ph, -pw, ph, pw];
    let mut d_inter_dp = [0.0; 4];
    if overlapping {
        if p.x_min > g.x_min {
            d_inter_dp[0] = -ih;
        }
        if p.y_min > g.y_min {
            d_inter_dp[1] = -iw;
        }
        if p.x_max < g.x_max {
            d_inter_dp[2] = ih;
        }
        if p.y_max < g.y_max {
            d_inter_dp[3] = iw;
        }
    }
    let mut d_enclose_dp = [0.0; 4];
    if p.x_min < g.x_min {
        d_enclose_dp[0] = -ch;
    }
    if p.y_min < g.y_min {
        d_enclose_dp[1] = -cw;
    }
    if p.x_max > g.x_max {
        d_enclose_dp[2] = ch;
    }
    if p.y_max > g.y_max {
        d_enclose_dp[3] = cw;
    }

    let mut grad = [0.0; 4];
    for k in 0..4 {
        grad[k] = d_inter * d_inter_dp[k] + d_area * d_area_dp[k] + d_enclose * d_enclose_dp[k];
    }
    (value, grad)
}
