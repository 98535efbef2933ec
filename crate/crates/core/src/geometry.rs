//! Axis-aligned boxes in normalised centre/size form.

use serde::{Deserialize, Serialize};

/// Lower bound applied to widths and heights on differentiable paths.
pub const MIN_EXTENT: f64 = 1e-8;

/// Normalised `(cx, cy, w, h)` rectangle; coordinates are fractions of the image extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Corner form `(x1, y1, x2, y2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corners {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Corners {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Corners { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_corners(c: Corners) -> Self {
        BBox {
            cx: 0.5 * (c.x1 + c.x2),
            cy: 0.5 * (c.y1 + c.y2),
            w: c.x2 - c.x1,
            h: c.y2 - c.y1,
        }
    }

    pub fn from_array(v: &[f64]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn to_corners(self) -> Corners {
        Corners {
            x1: self.cx - 0.5 * self.w,
            y1: self.cy - 0.5 * self.h,
            x2: self.cx + 0.5 * self.w,
            y2: self.cy + 0.5 * self.h,
        }
    }

    pub fn area(self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Negative extents become 0 and the centre is pulled into the unit square.
    pub fn clamped(self) -> Self {
        BBox {
            cx: self.cx.clamp(0.0, 1.0),
            cy: self.cy.clamp(0.0, 1.0),
            w: self.w.max(0.0),
            h: self.h.max(0.0),
        }
    }

    /// True when all four corners lie inside the unit square (with tolerance).
    pub fn inside_unit(self, tol: f64) -> bool {
        let c = self.to_corners();
        c.x1 >= -tol && c.y1 >= -tol && c.x2 <= 1.0 + tol && c.y2 <= 1.0 + tol
    }

    /// Mean absolute coordinate difference over `(cx, cy, w, h)`.
    pub fn l1(self, other: BBox) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 4.0
    }
}

fn intersection(a: &Corners, b: &Corners) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    iw * ih
}

fn enclosing(a: &Corners, b: &Corners) -> f64 {
    (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1))
}

pub fn iou_corners(a: &Corners, b: &Corners) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn giou_corners(a: &Corners, b: &Corners) -> f64 {
    let (aa, ab) = (a.area(), b.area());
    if aa <= 0.0 && ab <= 0.0 {
        return 0.0;
    }
    let inter = intersection(a, b);
    let union = aa + ab - inter;
    let enc = enclosing(a, b);
    if enc <= 0.0 {
        return 0.0;
    }
    inter / union - (enc - union) / enc
}

pub fn iou(a: BBox, b: BBox) -> f64 {
    iou_corners(&a.to_corners(), &b.to_corners())
}

pub fn giou(a: BBox, b: BBox) -> f64 {
    giou_corners(&a.to_corners(), &b.to_corners())
}

/// GIoU together with its gradient w.r.t. the `(cx, cy, w, h)` of both boxes.
///
/// Widths and heights are floored at [`MIN_EXTENT`]; at a floor, or where
/// `min`/`max` ties, the first argument's branch is taken.
pub fn giou_with_grad(a: BBox, b: BBox) -> (f64, [f64; 4], [f64; 4]) {
    let wa = a.w.max(MIN_EXTENT);
    let ha = a.h.max(MIN_EXTENT);
    let wb = b.w.max(MIN_EXTENT);
    let hb = b.h.max(MIN_EXTENT);
    let ca = BBox::new(a.cx, a.cy, wa, ha).to_corners();
    let cb = BBox::new(b.cx, b.cy, wb, hb).to_corners();

    let area_a = wa * ha;
    let area_b = wb * hb;

    // Intersection extents, remembering which box supplied each edge.
    let (ix1, ix1_a) = if ca.x1 >= cb.x1 { (ca.x1, true) } else { (cb.x1, false) };
    let (ix2, ix2_a) = if ca.x2 <= cb.x2 { (ca.x2, true) } else { (cb.x2, false) };
    let (iy1, iy1_a) = if ca.y1 >= cb.y1 { (ca.y1, true) } else { (cb.y1, false) };
    let (iy2, iy2_a) = if ca.y2 <= cb.y2 { (ca.y2, true) } else { (cb.y2, false) };
    let iw_raw = ix2 - ix1;
    let ih_raw = iy2 - iy1;
    let iw = iw_raw.max(0.0);
    let ih = ih_raw.max(0.0);
    let inter = iw * ih;
    let union = area_a + area_b - inter;

    let (ex1, ex1_a) = if ca.x1 <= cb.x1 { (ca.x1, true) } else { (cb.x1, false) };
    let (ex2, ex2_a) = if ca.x2 >= cb.x2 { (ca.x2, true) } else { (cb.x2, false) };
    let (ey1, ey1_a) = if ca.y1 <= cb.y1 { (ca.y1, true) } else { (cb.y1, false) };
    let (ey2, ey2_a) = if ca.y2 >= cb.y2 { (ca.y2, true) } else { (cb.y2, false) };
    let ew = ex2 - ex1;
    let eh = ey2 - ey1;
    let enc = ew * eh;

    let value = inter / union - (enc - union) / enc;

    // value = I/U + U/E - 1 with U = Aa + Ab - I.
    let d_inter = 1.0 / union + inter / (union * union) - 1.0 / enc;
    let d_area = -inter / (union * union) + 1.0 / enc;
    let d_enc = -union / (enc * enc);

    // Gradients w.r.t. corners (x1, y1, x2, y2) of each box.
    let mut ga = [0.0; 4];
    let mut gb = [0.0; 4];
    let mut route = |is_a: bool, k: usize, v: f64| {
        if is_a {
            ga[k] += v;
        } else {
            gb[k] += v;
        }
    };

    if iw_raw > 0.0 && ih_raw > 0.0 {
        let dix = d_inter * ih; // d/d iw
        let diy = d_inter * iw;
        route(ix2_a, 2, dix);
        route(ix1_a, 0, -dix);
        route(iy2_a, 3, diy);
        route(iy1_a, 1, -diy);
    }
    let dex = d_enc * eh;
    let dey = d_enc * ew;
    route(ex2_a, 2, dex);
    route(ex1_a, 0, -dex);
    route(ey2_a, 3, dey);
    route(ey1_a, 1, -dey);

    // Areas: Aa = (x2 - x1)(y2 - y1).
    ga[2] += d_area * ha;
    ga[0] -= d_area * ha;
    ga[3] += d_area * wa;
    ga[1] -= d_area * wa;
    gb[2] += d_area * hb;
    gb[0] -= d_area * hb;
    gb[3] += d_area * wb;
    gb[1] -= d_area * wb;

    let to_cxcywh = |g: [f64; 4], w_live: bool, h_live: bool| {
        [
            g[0] + g[2],
            g[1] + g[3],
            if w_live { 0.5 * (g[2] - g[0]) } else { 0.0 },
            if h_live { 0.5 * (g[3] - g[1]) } else { 0.0 },
        ]
    };
    (
        value,
        to_cxcywh(ga, a.w >= MIN_EXTENT, a.h >= MIN_EXTENT),
        to_cxcywh(gb, b.w >= MIN_EXTENT, b.h >= MIN_EXTENT),
    )
}
