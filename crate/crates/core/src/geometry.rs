//! Box algebra in continuous pixel coordinates.
//!
//! Boxes are stored as center/width/height; the corner form `[x1, y1, x2, y2]`
//! is a derived view. A pixel `i` covers the interval `[i, i + 1)`, so an
//! image of width `W` spans `[0, W]`.

use serde::{Deserialize, Serialize};

use crate::error::{AodError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoundingBox { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new((x1 + x2) * 0.5, (y1 + y2) * 0.5, x2 - x1, y2 - y1)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite();
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(AodError::InvalidBox(format!(
                "cx={} cy={} w={} h={}",
                self.cx, self.cy, self.w, self.h
            )));
        }
        Ok(())
    }

    /// `[x1, y1, x2, y2]`.
    pub fn corners(&self) -> [f64; 4] {
        let hw = self.w * 0.5;
        let hh = self.h * 0.5;
        [self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh]
    }

    pub fn area(&self) -> f64 {
        let [x1, y1, x2, y2] = self.corners();
        (x2 - x1) * (y2 - y1)
    }

    /// True when the box lies inside `[0, width] x [0, height]`.
    pub fn within(&self, width: f64, height: f64) -> bool {
        let [x1, y1, x2, y2] = self.corners();
        x1 >= 0.0 && y1 >= 0.0 && x2 <= width && y2 <= height
    }

    /// Box with the same center, each side multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> BoundingBox {
        BoundingBox {
            cx: self.cx,
            cy: self.cy,
            w: self.w * factor,
            h: self.h * factor,
        }
    }
}

/// Scale-invariant shift of a box relative to an anchor: translation in units
/// of the anchor size and log-space width/height ratios.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GlimpseDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl GlimpseDelta {
    pub const ZERO: GlimpseDelta = GlimpseDelta {
        dx: 0.0,
        dy: 0.0,
        dw: 0.0,
        dh: 0.0,
    };

    pub fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        GlimpseDelta { dx, dy, dw, dh }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        GlimpseDelta::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.to_array().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl std::ops::Add for GlimpseDelta {
    type Output = GlimpseDelta;

    fn add(self, rhs: GlimpseDelta) -> GlimpseDelta {
        GlimpseDelta::new(self.dx + rhs.dx, self.dy + rhs.dy, self.dw + rhs.dw, self.dh + rhs.dh)
    }
}

impl std::ops::Sub for GlimpseDelta {
    type Output = GlimpseDelta;

    fn sub(self, rhs: GlimpseDelta) -> GlimpseDelta {
        GlimpseDelta::new(self.dx - rhs.dx, self.dy - rhs.dy, self.dw - rhs.dw, self.dh - rhs.dh)
    }
}

/// Encodes `target` relative to `anchor`:
/// `((gx - px) / pw, (gy - py) / ph, ln(gw / pw), ln(gh / ph))`.
pub fn encode_glimpse(target: &BoundingBox, anchor: &BoundingBox) -> Result<GlimpseDelta> {
    target.validate()?;
    anchor.validate()?;
    Ok(GlimpseDelta {
        dx: (target.cx - anchor.cx) / anchor.w,
        dy: (target.cy - anchor.cy) / anchor.h,
        dw: (target.w / anchor.w).ln(),
        dh: (target.h / anchor.h).ln(),
    })
}

/// Inverse of [`encode_glimpse`].
pub fn decode_glimpse(delta: &GlimpseDelta, anchor: &BoundingBox) -> Result<BoundingBox> {
    anchor.validate()?;
    if !delta.is_finite() {
        return Err(AodError::NonFinite("glimpse delta".into()));
    }
    BoundingBox::new(
        anchor.cx + delta.dx * anchor.w,
        anchor.cy + delta.dy * anchor.h,
        anchor.w * delta.dw.exp(),
        anchor.h * delta.dh.exp(),
    )
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = ax2.min(bx2) - ax1.max(bx1);
    let ih = ay2.min(by2) - ay1.max(by1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Intersects one axis interval with `[0, extent]`. Intervals shorter than one
/// pixel after intersection become the nearest in-bounds unit interval.
fn clip_interval(lo: f64, hi: f64, extent: f64) -> (f64, f64) {
    let a = lo.max(0.0);
    let b = hi.min(extent);
    if b - a >= 1.0 {
        return (a, b);
    }
    let unit = extent.min(1.0);
    let center = if b <= a {
        // empty: snap to the border closest to the original interval
        if hi <= 0.0 {
            0.0
        } else {
            extent
        }
    } else {
        (a + b) * 0.5
    };
    let start = (center - unit * 0.5).clamp(0.0, extent - unit);
    (start, start + unit)
}

/// Clips a box to a `width x height` image. Never fails: a box that misses
/// the image (or keeps less than a pixel of it) becomes a 1x1 box at the
/// nearest in-bounds location.
pub fn clip_box(b: &BoundingBox, width: f64, height: f64) -> BoundingBox {
    let [x1, y1, x2, y2] = b.corners();
    let (x1, x2) = clip_interval(x1, x2, width);
    let (y1, y2) = clip_interval(y1, y2, height);
    BoundingBox {
        cx: (x1 + x2) * 0.5,
        cy: (y1 + y2) * 0.5,
        w: x2 - x1,
        h: y2 - y1,
    }
}
