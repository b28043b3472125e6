use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, GroundTruth};
use crate::diffcore::Tensor;
use crate::error::{AodError, Result};
use crate::geometry::{clip_box, BoundingBox};
use crate::rng::{derive_seed, stream_rng, tags, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Silhouette {
    Square,
    Disc,
    Triangle,
    Ring,
    Cross,
}

impl Silhouette {
    /// Coverage test in box-normalized coordinates `u, v` in `[-1, 1]`
    /// (`v` grows downwards).
    fn covers(self, u: f64, v: f64) -> bool {
        match self {
            Silhouette::Square => true,
            Silhouette::Disc => u * u + v * v <= 1.0,
            Silhouette::Triangle => u.abs() <= (v + 1.0) / 2.0,
            Silhouette::Ring => {
                let r2 = u * u + v * v;
                (0.3..=1.0).contains(&r2)
            }
            Silhouette::Cross => u.abs() <= 0.34 || v.abs() <= 0.34,
        }
    }
}

const ALL_SILHOUETTES: [Silhouette; 5] = [
    Silhouette::Square,
    Silhouette::Disc,
    Silhouette::Triangle,
    Silhouette::Ring,
    Silhouette::Cross,
];

/// With the context cue, classes 0/1 and 2/3 share a silhouette.
pub fn silhouette_of(class: usize, context_cue: bool) -> Silhouette {
    if !context_cue {
        return ALL_SILHOUETTES[class % 5];
    }
    match class {
        0 | 1 => Silhouette::Square,
        2 | 3 => Silhouette::Triangle,
        c => [Silhouette::Disc, Silhouette::Ring, Silhouette::Cross][(c - 4) % 3],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    pub jitter_per_gt: usize,
    /// Jitter magnitudes (std of the relative center shift and log-scale
    /// noise), cycled over the copies of each gt.
    pub jitter_levels: Vec<f64>,
    pub random_per_image: usize,
    /// Side range of the uniform random boxes, pixels.
    pub random_size: [f64; 2],
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            jitter_per_gt: 24,
            jitter_levels: vec![0.05, 0.1, 0.2, 0.3, 0.45],
            random_per_image: 16,
            random_size: [8.0, 32.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub image_size: usize,
    #[serde(rename = "K")]
    pub num_classes: usize,
    pub channels: usize,
    pub objects_per_image: [usize; 2],
    /// Object side range, pixels.
    pub scale_range: [usize; 2],
    /// Expected number of clutter strokes per image.
    pub clutter_density: f64,
    pub context_cue: bool,
    /// Gap between the object edge and the cue marker, as a fraction of the
    /// object height.
    pub cue_gap: [f64; 2],
    pub noise_level: f64,
    pub seed: u64,
    pub proposals: ProposalConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: 48,
            num_classes: 5,
            channels: 1,
            objects_per_image: [1, 2],
            scale_range: [16, 20],
            clutter_density: 2.0,
            context_cue: false,
            cue_gap: [0.3, 0.5],
            noise_level: 0.05,
            seed: 0,
            proposals: ProposalConfig::default(),
        }
    }
}

const MARKER: usize = 3;
const PLACEMENT_TRIES: usize = 64;
/// Object side must span this many backbone strides.
const MIN_OBJECT: usize = 16;

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.objects_per_image;
        if lo == 0 || lo > hi {
            return Err(AodError::config("SceneConfig.objects_per_image", "need 1 <= min <= max"));
        }
        let [smin, smax] = self.scale_range;
        if smin < MIN_OBJECT || smin > smax || smax > self.image_size {
            return Err(AodError::config(
                "SceneConfig.scale_range",
                format!("need {MIN_OBJECT} <= min <= max <= image_size"),
            ));
        }
        if self.num_classes == 0 {
            return Err(AodError::config("SceneConfig.K", "must be >= 1"));
        }
        if self.channels == 0 {
            return Err(AodError::config("SceneConfig.channels", "must be >= 1"));
        }
        if !(self.cue_gap[0] >= 0.0 && self.cue_gap[0] <= self.cue_gap[1]) {
            return Err(AodError::config("SceneConfig.cue_gap", "need 0 <= min <= max"));
        }
        if !(self.noise_level >= 0.0 && self.clutter_density >= 0.0) {
            return Err(AodError::config("SceneConfig.noise_level", "must be >= 0"));
        }
        let p = &self.proposals;
        if p.jitter_per_gt > 0 && p.jitter_levels.is_empty() {
            return Err(AodError::config("SceneConfig.proposals.jitter_levels", "must not be empty"));
        }
        if !(p.random_size[0] >= 1.0 && p.random_size[0] <= p.random_size[1]) {
            return Err(AodError::config("SceneConfig.proposals.random_size", "need 1 <= min <= max"));
        }
        Ok(())
    }
}

/// Integer pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug)]
struct Rect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Rect {
    fn overlaps(&self, o: &Rect, gap: usize) -> bool {
        self.x0 < o.x1 + gap && o.x0 < self.x1 + gap && self.y0 < o.y1 + gap && o.y0 < self.y1 + gap
    }

    fn union(&self, o: &Rect) -> Rect {
        Rect {
            x0: self.x0.min(o.x0),
            y0: self.y0.min(o.y0),
            x1: self.x1.max(o.x1),
            y1: self.y1.max(o.y1),
        }
    }
}

struct Canvas {
    size: usize,
    px: Vec<f32>,
}

impl Canvas {
    fn paint(&mut self, x: usize, y: usize, v: f32) {
        if x < self.size && y < self.size {
            let p = &mut self.px[y * self.size + x];
            *p = p.max(v);
        }
    }

    fn silhouette(&mut self, r: &Rect, s: Silhouette, v: f32) {
        let (w, h) = ((r.x1 - r.x0) as f64, (r.y1 - r.y0) as f64);
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                let u = 2.0 * (x - r.x0) as f64 / w + 1.0 / w - 1.0;
                let vv = 2.0 * (y - r.y0) as f64 / h + 1.0 / h - 1.0;
                if s.covers(u, vv) {
                    self.paint(x, y, v);
                }
            }
        }
    }
}

struct Placed {
    object: Rect,
    footprint: Rect,
    class: usize,
    marker: Option<Rect>,
}

fn place_object(cfg: &SceneConfig, class: usize, rng: &mut Rng, taken: &[Placed]) -> Option<Placed> {
    let n = cfg.image_size;
    for _ in 0..PLACEMENT_TRIES {
        let w = rng.random_range(cfg.scale_range[0]..=cfg.scale_range[1]);
        let h = rng.random_range(cfg.scale_range[0]..=cfg.scale_range[1]);
        // The cue side is fixed by the class inside a confusable pair and
        // random otherwise, so marker placement alone carries no class signal.
        let above = match (cfg.context_cue, class) {
            (false, _) => None,
            (true, c) if c < 4 => Some(c % 2 == 0),
            (true, _) => Some(rng.random_bool(0.5)),
        };
        let gap = above.map(|_| {
            let f = rng.random_range(cfg.cue_gap[0]..=cfg.cue_gap[1]);
            (f * h as f64).round() as usize
        });
        let extra = gap.map_or(0, |g| g + MARKER);
        if w > n || h + extra > n {
            continue;
        }
        let x0 = rng.random_range(0..=n - w);
        let top = rng.random_range(0..=n - h - extra);
        let y0 = if above == Some(true) { top + extra } else { top };
        let object = Rect {
            x0,
            y0,
            x1: x0 + w,
            y1: y0 + h,
        };
        let marker = match (above, gap) {
            (Some(up), Some(g)) => {
                let slack = (w as f64 * 0.3) as i64;
                let off = rng.random_range(-slack..=slack);
                let mx = (x0 as i64 + w as i64 / 2 + off - MARKER as i64 / 2).clamp(0, (n - MARKER) as i64) as usize;
                let my = if up { y0 - g - MARKER } else { y0 + h + g };
                Some(Rect {
                    x0: mx,
                    y0: my,
                    x1: mx + MARKER,
                    y1: my + MARKER,
                })
            }
            _ => None,
        };
        let footprint = marker.map_or(object, |m| object.union(&m));
        if taken.iter().any(|p| p.footprint.overlaps(&footprint, 2)) {
            continue;
        }
        return Some(Placed {
            object,
            footprint,
            class,
            marker,
        });
    }
    None
}

fn draw_clutter(canvas: &mut Canvas, rng: &mut Rng, count: usize, taken: &[Placed]) {
    let n = canvas.size;
    for _ in 0..count {
        for _ in 0..PLACEMENT_TRIES {
            let len = rng.random_range(4..=8usize).min(n);
            let horizontal = rng.random_bool(0.5);
            let (w, h) = if horizontal { (len, 1) } else { (1, len) };
            let x0 = rng.random_range(0..=n - w);
            let y0 = rng.random_range(0..=n - h);
            let r = Rect {
                x0,
                y0,
                x1: x0 + w,
                y1: y0 + h,
            };
            if taken.iter().any(|p| p.footprint.overlaps(&r, 2)) {
                continue;
            }
            let v = rng.random_range(0.35..0.65f32);
            for y in r.y0..r.y1 {
                for x in r.x0..r.x1 {
                    canvas.paint(x, y, v);
                }
            }
            break;
        }
    }
}

/// Renders scene `index`. Pure in `(cfg, index)`.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Result<AnnotatedImage> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, &[tags::SCENE, index]);
    let n = cfg.image_size;
    let count = rng.random_range(cfg.objects_per_image[0]..=cfg.objects_per_image[1]);
    let mut placed: Vec<Placed> = Vec::new();
    for _ in 0..count {
        let class = rng.random_range(0..cfg.num_classes);
        if let Some(p) = place_object(cfg, class, &mut rng, &placed) {
            placed.push(p);
        }
    }
    let mut canvas = Canvas {
        size: n,
        px: vec![0.0; n * n],
    };
    for p in &placed {
        let v = rng.random_range(0.75..1.0f32);
        canvas.silhouette(&p.object, silhouette_of(p.class, cfg.context_cue), v);
        if let Some(m) = &p.marker {
            canvas.silhouette(m, Silhouette::Square, v);
        }
    }
    let whole = cfg.clutter_density.floor();
    let clutter = whole as usize + usize::from(rng.random_bool(cfg.clutter_density - whole));
    draw_clutter(&mut canvas, &mut rng, clutter, &placed);

    let mut data = Vec::with_capacity(cfg.channels * n * n);
    let noise = Normal::new(0.0, cfg.noise_level.max(f64::MIN_POSITIVE)).expect("finite std");
    for _ in 0..cfg.channels {
        for &v in &canvas.px {
            let e = if cfg.noise_level > 0.0 { noise.sample(&mut rng) as f32 } else { 0.0 };
            data.push((v + e).clamp(0.0, 1.0));
        }
    }
    let image = Tensor::new(vec![cfg.channels, n, n], data)?;
    let gts: Vec<GroundTruth> = placed
        .iter()
        .map(|p| {
            let r = &p.object;
            let bbox = BoundingBox::from_corners(r.x0 as f64, r.y0 as f64, r.x1 as f64, r.y1 as f64)?;
            Ok(GroundTruth { bbox, label: p.class })
        })
        .collect::<Result<_>>()?;
    let proposals = generate_proposals(
        &gts,
        &cfg.proposals,
        (n, n),
        derive_seed(cfg.seed, &[tags::PROPOSALS, index]),
    )?;
    Ok(AnnotatedImage {
        id: format!("img_{index:06}"),
        image,
        gts,
        proposals,
    })
}

/// Jittered copies of every gt plus uniform random boxes, all clipped to the
/// image. Deterministic in `seed`.
pub fn generate_proposals(
    gts: &[GroundTruth],
    cfg: &ProposalConfig,
    image_size: (usize, usize),
    seed: u64,
) -> Result<Vec<BoundingBox>> {
    let mut rng = stream_rng(seed, &[]);
    let (ih, iw) = (image_size.0 as f64, image_size.1 as f64);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(gts.len() * cfg.jitter_per_gt + cfg.random_per_image);
    for gt in gts {
        for j in 0..cfg.jitter_per_gt {
            let m = cfg.jitter_levels[j % cfg.jitter_levels.len()];
            let mut z = [0.0; 4];
            z.iter_mut().for_each(|v| *v = std.sample(&mut rng) * m);
            let b = &gt.bbox;
            let cand = BoundingBox {
                cx: b.cx + z[0] * b.w,
                cy: b.cy + z[1] * b.h,
                w: b.w * z[2].exp(),
                h: b.h * z[3].exp(),
            };
            let c = clip_box(&cand, iw, ih);
            if c.w >= 1.0 && c.h >= 1.0 {
                out.push(c);
            }
        }
    }
    let [lo, hi] = cfg.random_size;
    for _ in 0..cfg.random_per_image {
        let w = rng.random_range(lo..=hi).min(iw);
        let h = rng.random_range(lo..=hi).min(ih);
        let x0 = rng.random_range(0.0..=iw - w);
        let y0 = rng.random_range(0.0..=ih - h);
        out.push(BoundingBox::from_corners(x0, y0, x0 + w, y0 + h)?);
    }
    Ok(out)
}

/// Scenes `0..count` of `cfg`, generated in parallel.
pub fn generate_dataset(cfg: &SceneConfig, count: usize) -> Result<super::Dataset> {
    use rayon::prelude::*;
    cfg.validate()?;
    let images = (0..count as u64)
        .into_par_iter()
        .map(|i| generate_scene(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(super::Dataset {
        scene_config: cfg.clone(),
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;

    #[test]
    fn single_clean_object() {
        let cfg = SceneConfig {
            objects_per_image: [1, 1],
            clutter_density: 0.0,
            noise_level: 0.0,
            ..SceneConfig::default()
        };
        for i in 0..20 {
            let s = generate_scene(&cfg, i).unwrap();
            assert_eq!(s.gts.len(), 1);
            let b = s.gts[0].bbox;
            let [x1, y1, x2, y2] = b.corners();
            let lit = s.image.data().iter().filter(|&&v| v > 0.0).count();
            assert!(lit > 0);
            // every lit pixel lies inside the gt box
            for (k, &v) in s.image.data().iter().enumerate() {
                if v > 0.0 {
                    let (x, y) = ((k % 48) as f64 + 0.5, (k / 48) as f64 + 0.5);
                    assert!(x > x1 && x < x2 && y > y1 && y < y2);
                }
            }
        }
    }

    #[test]
    fn deterministic_and_in_bounds() {
        let cfg = SceneConfig {
            context_cue: true,
            ..SceneConfig::default()
        };
        for i in 0..30 {
            let a = generate_scene(&cfg, i).unwrap();
            assert_eq!(a, generate_scene(&cfg, i).unwrap());
            for g in &a.gts {
                assert!(g.bbox.within(48.0, 48.0) && g.label < 5);
            }
            for p in &a.proposals {
                assert!(p.within(48.0, 48.0));
            }
        }
    }

    #[test]
    fn cue_markers_sit_outside_the_box_on_the_class_side() {
        let cfg = SceneConfig {
            objects_per_image: [1, 1],
            clutter_density: 0.0,
            noise_level: 0.0,
            context_cue: true,
            ..SceneConfig::default()
        };
        let mut seen = [0usize; 4];
        for i in 0..200 {
            let s = generate_scene(&cfg, i).unwrap();
            let g = s.gts[0];
            if g.label >= 4 {
                continue;
            }
            seen[g.label] += 1;
            let [x1, y1, x2, y2] = g.bbox.corners();
            let outside: Vec<(f64, f64)> = s
                .image
                .data()
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > 0.0)
                .map(|(k, _)| ((k % 48) as f64 + 0.5, (k / 48) as f64 + 0.5))
                .filter(|&(x, y)| !(x > x1 && x < x2 && y > y1 && y < y2))
                .collect();
            assert_eq!(outside.len(), MARKER * MARKER);
            for (_, y) in outside {
                if g.label % 2 == 0 {
                    assert!(y < y1);
                } else {
                    assert!(y > y2);
                }
            }
        }
        assert!(seen.iter().all(|&c| c > 10));
    }

    #[test]
    fn zero_jitter_reproduces_the_gt() {
        let gt = GroundTruth {
            bbox: BoundingBox::new(20.0, 20.0, 16.0, 18.0).unwrap(),
            label: 0,
        };
        let cfg = ProposalConfig {
            jitter_per_gt: 3,
            jitter_levels: vec![0.0],
            random_per_image: 0,
            ..ProposalConfig::default()
        };
        let ps = generate_proposals(&[gt], &cfg, (48, 48), 5).unwrap();
        assert_eq!(ps.len(), 3);
        for p in ps {
            assert_eq!(iou(&p, &gt.bbox), 1.0);
        }
    }
}
