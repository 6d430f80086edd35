/// Axis-aligned box in centre form, pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// `(x1, y1, x2, y2)`
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// A box with its class and confidence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub score: f64,
}

impl Detection {
    /// `<image> <class> <score> <cx> <cy> <w> <h>`, six decimals.
    pub fn to_record(&self, image: &str) -> String {
        let b = self.bbox;
        format!(
            "{image} {} {:.6} {:.6} {:.6} {:.6} {:.6}",
            self.class_id, self.score, b.cx, b.cy, b.w, b.h
        )
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// IoU minus squared centre distance over the squared enclosing diagonal.
pub fn diou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    diou_with_grad(a, b).0
}

/// DIoU and its gradient with respect to `a`'s `(cx, cy, w, h)`.
pub fn diou_with_grad(a: &BoundingBox, b: &BoundingBox) -> (f64, [f64; 4]) {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();

    // gradients are first taken w.r.t. the corners of a, then mapped
    let mut g_corner = [0.0; 4];
    let mut g_wh = [0.0; 2];

    let iw_raw = ax2.min(bx2) - ax1.max(bx1);
    let ih_raw = ay2.min(by2) - ay1.max(by1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let mut value = 0.0;
    if union > 0.0 {
        value = inter / union;
        let d_inter = 1.0 / union + inter / (union * union);
        let d_area = -inter / (union * union);
        g_wh[0] += d_area * a.h;
        g_wh[1] += d_area * a.w;
        if iw_raw > 0.0 && ih_raw > 0.0 {
            let (dx1, dx2) = (
                if ax1 >= bx1 { -1.0 } else { 0.0 },
                if ax2 <= bx2 { 1.0 } else { 0.0 },
            );
            let (dy1, dy2) = (
                if ay1 >= by1 { -1.0 } else { 0.0 },
                if ay2 <= by2 { 1.0 } else { 0.0 },
            );
            g_corner[0] += d_inter * ih * dx1;
            g_corner[2] += d_inter * ih * dx2;
            g_corner[1] += d_inter * iw * dy1;
            g_corner[3] += d_inter * iw * dy2;
        }
    }

    let cw = ax2.max(bx2) - ax1.min(bx1);
    let ch = ay2.max(by2) - ay1.min(by1);
    let c2 = cw * cw + ch * ch;
    let (dcx, dcy) = (a.cx - b.cx, a.cy - b.cy);
    let rho2 = dcx * dcx + dcy * dcy;
    let mut g_centre = [0.0; 2];
    if c2 > 0.0 {
        value -= rho2 / c2;
        g_centre[0] -= 2.0 * dcx / c2;
        g_centre[1] -= 2.0 * dcy / c2;
        let k = rho2 / (c2 * c2);
        g_corner[0] += k * 2.0 * cw * if ax1 <= bx1 { -1.0 } else { 0.0 };
        g_corner[2] += k * 2.0 * cw * if ax2 >= bx2 { 1.0 } else { 0.0 };
        g_corner[1] += k * 2.0 * ch * if ay1 <= by1 { -1.0 } else { 0.0 };
        g_corner[3] += k * 2.0 * ch * if ay2 >= by2 { 1.0 } else { 0.0 };
    }

    let grad = [
        g_centre[0] + g_corner[0] + g_corner[2],
        g_centre[1] + g_corner[1] + g_corner[3],
        g_wh[0] + 0.5 * (g_corner[2] - g_corner[0]),
        g_wh[1] + 0.5 * (g_corner[3] - g_corner[1]),
    ];
    (value, grad)
}
