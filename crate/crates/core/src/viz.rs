//! Glimpse renderings: proposal in white, glimpses in step order (blue,
//! yellow, then cycling), final localization in red.

use std::fmt::Write as _;

use crate::aodnet::Rollout;
use crate::diffcore::{Real, Tensor};
use crate::error::{AodError, Result};
use crate::geometry::{decode_glimpse, BoundingBox};

pub type Rgb = [u8; 3];

pub const WHITE: Rgb = [255, 255, 255];
pub const RED: Rgb = [255, 0, 0];
/// Glimpse colors, cycled from the second step on.
pub const GLIMPSE_COLORS: [Rgb; 4] = [[0, 96, 255], [255, 220, 0], [0, 200, 120], [200, 0, 200]];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Overlay {
    pub bbox: BoundingBox,
    pub color: Rgb,
    pub label: &'static str,
}

/// The boxes drawn for one rollout, in drawing order.
pub fn rollout_overlays<R: Real>(rollout: &Rollout<R>) -> Result<Vec<Overlay>> {
    let mut out = vec![Overlay {
        bbox: rollout.proposal,
        color: WHITE,
        label: "proposal",
    }];
    for (i, b) in rollout.glimpse_boxes().iter().skip(1).enumerate() {
        out.push(Overlay {
            bbox: *b,
            color: GLIMPSE_COLORS[i % GLIMPSE_COLORS.len()],
            label: "glimpse",
        });
    }
    // Best foreground class, even when background wins.
    let fg = &rollout.output.class_probs[..rollout.output.background()];
    let c = (0..fg.len()).fold(0, |best, i| if fg[i] > fg[best] { i } else { best });
    out.push(Overlay {
        bbox: decode_glimpse(&rollout.output.bbox_deltas[c], &rollout.proposal)?,
        color: RED,
        label: "final",
    });
    Ok(out)
}

/// RGB raster of a `[C, H, W]` image (first channel, or the first three)
/// magnified by `scale`.
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub scale: usize,
    pub px: Vec<Rgb>,
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Raster {
    pub fn from_image(image: &Tensor<f32>, scale: usize) -> Result<Self> {
        let shape = image.shape();
        if shape.len() != 3 || scale == 0 {
            return Err(AodError::Shape(format!("expected a [C, H, W] image, got {shape:?}")));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let d = image.data();
        let (width, height) = (w * scale, h * scale);
        let mut px = vec![[0u8; 3]; width * height];
        for y in 0..height {
            for x in 0..width {
                let at = |ch: usize| d[(ch.min(c - 1) * h + y / scale) * w + x / scale];
                px[y * width + x] = if c >= 3 {
                    [to_byte(at(0)), to_byte(at(1)), to_byte(at(2))]
                } else {
                    [to_byte(at(0)); 3]
                };
            }
        }
        Ok(Raster {
            width,
            height,
            scale,
            px,
        })
    }

    fn set(&mut self, x: i64, y: i64, color: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.px[y as usize * self.width + x as usize] = color;
        }
    }

    /// One-pixel outline in image coordinates (clipped to the canvas).
    pub fn draw_box(&mut self, b: &BoundingBox, color: Rgb) {
        let s = self.scale as f64;
        let [x1, y1, x2, y2] = b.corners();
        let (x1, y1) = ((x1 * s).round() as i64, (y1 * s).round() as i64);
        let (x2, y2) = ((x2 * s).round() as i64 - 1, (y2 * s).round() as i64 - 1);
        for x in x1..=x2 {
            self.set(x, y1, color);
            self.set(x, y2, color);
        }
        for y in y1..=y2 {
            self.set(x1, y, color);
            self.set(x2, y, color);
        }
    }

    /// Binary P6 PPM.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(self.px.len() * 3);
        for p in &self.px {
            out.extend_from_slice(p);
        }
        out
    }
}

pub fn render_ppm(image: &Tensor<f32>, overlays: &[Overlay], scale: usize) -> Result<Vec<u8>> {
    let mut r = Raster::from_image(image, scale)?;
    for o in overlays {
        r.draw_box(&o.bbox, o.color);
    }
    Ok(r.to_ppm())
}

/// SVG with the image embedded as a grid of rects (grayscale) and the
/// overlays as stroked rectangles, in image pixel units.
pub fn render_svg(image: &Tensor<f32>, overlays: &[Overlay], scale: usize) -> Result<String> {
    let r = Raster::from_image(image, 1)?;
    let (w, h) = (r.width, r.height);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {w} {h}" shape-rendering="crispEdges">"#,
        w * scale,
        h * scale
    );
    for y in 0..h {
        for x in 0..w {
            let [cr, cg, cb] = r.px[y * w + x];
            let _ = writeln!(s, r#"<rect x="{x}" y="{y}" width="1" height="1" fill="rgb({cr},{cg},{cb})"/>"#);
        }
    }
    for o in overlays {
        let [x1, y1, x2, y2] = o.bbox.corners();
        let [cr, cg, cb] = o.color;
        let _ = writeln!(
            s,
            r#"<rect class="{}" x="{x1:.3}" y="{y1:.3}" width="{:.3}" height="{:.3}" fill="none" stroke="rgb({cr},{cg},{cb})" stroke-width="0.4"/>"#,
            o.label,
            x2 - x1,
            y2 - y1
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}
