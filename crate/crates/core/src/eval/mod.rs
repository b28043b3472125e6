//! Test-time detection and VOC-protocol average precision.

mod ap;

pub use ap::{average_precision, class_name, evaluate, mean_ap, ApProtocol, ClassAp, EvalGt, EvalResults};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aodnet::{forward_rollout, Actions, AodConfig, AodParams};
use crate::backbone::{extract_features, FeatureMap};
use crate::data::AnnotatedImage;
use crate::diffcore::{Real, Tensor};
use crate::error::Result;
use crate::geometry::{clip_box, decode_glimpse, iou, BoundingBox};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: usize,
    pub class: usize,
    /// The network's probability for `class`.
    pub score: f64,
    pub bbox: BoundingBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub score_thresh: f64,
    pub nms_thresh: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            score_thresh: 0.05,
            nms_thresh: 0.3,
        }
    }
}

/// Greedy NMS. Order: score descending, then smaller area, then input order;
/// a box is dropped when its IoU with any kept box exceeds `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .total_cmp(&dets[a].score)
            .then(dets[a].bbox.area().total_cmp(&dets[b].bbox.area()))
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_thresh) {
            kept.push(d);
        }
    }
    kept
}

/// One eval-mode noiseless rollout per proposal, thresholded per class,
/// decoded, clipped and suppressed per class.
#[allow(clippy::too_many_arguments)]
pub fn detect_image<R: Real>(
    fm: &FeatureMap<R>,
    image_size: (usize, usize),
    proposals: &[BoundingBox],
    params: &AodParams<R>,
    cfg: &AodConfig,
    det: &DetectConfig,
    image_id: usize,
) -> Result<Vec<Detection>> {
    let k = cfg.num_classes;
    let mut per_class: Vec<Vec<Detection>> = vec![Vec::new(); k];
    let (h, w) = (image_size.0 as f64, image_size.1 as f64);
    for p in proposals {
        let r = forward_rollout(fm, image_size, p, params, cfg, Actions::Mean, None)?;
        for (c, dets) in per_class.iter_mut().enumerate() {
            let score = r.output.class_probs[c];
            if score < det.score_thresh {
                continue;
            }
            let b = clip_box(&decode_glimpse(&r.output.bbox_deltas[c], p)?, w, h);
            if b.validate().is_err() {
                continue;
            }
            dets.push(Detection {
                image_id,
                class: c,
                score,
                bbox: b,
            });
        }
    }
    Ok(per_class.iter().flat_map(|d| nms(d, det.nms_thresh)).collect())
}

/// Runs [`detect_image`] over every image (in parallel; output order is the
/// image order).
pub fn detect_all<R: Real>(
    images: &[AnnotatedImage],
    params: &AodParams<R>,
    cfg: &AodConfig,
    det: &DetectConfig,
) -> Result<Vec<Detection>> {
    let per_image = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let pixels: Tensor<R> = img.image.cast();
            let (fm, _) = extract_features(&pixels, &cfg.backbone, &params.backbone)?;
            detect_image(&fm, img.size(), &img.proposals, params, cfg, det, i)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

/// Ground truth of a synthetic dataset in evaluator form (none difficult).
pub fn dataset_gts(images: &[AnnotatedImage]) -> Vec<Vec<EvalGt>> {
    images
        .iter()
        .map(|img| {
            img.gts
                .iter()
                .map(|g| EvalGt {
                    bbox: g.bbox,
                    class: g.label,
                    difficult: false,
                })
                .collect()
        })
        .collect()
}
