use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Detection;
use crate::error::{AodError, Result};
use crate::geometry::{iou, BoundingBox};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApProtocol {
    /// Mean of the interpolated precision at recall 0, 0.1, ..., 1.
    #[serde(rename = "voc2007_11pt")]
    Voc07ElevenPoint,
    /// Area under the monotone precision envelope.
    #[serde(rename = "all_point")]
    AllPoint,
}

impl std::str::FromStr for ApProtocol {
    type Err = AodError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "voc2007_11pt" | "11pt" => Ok(ApProtocol::Voc07ElevenPoint),
            "all_point" | "all-point" => Ok(ApProtocol::AllPoint),
            _ => Err(AodError::config("protocol", format!("unknown protocol `{s}`"))),
        }
    }
}

impl ApProtocol {
    pub fn name(self) -> &'static str {
        match self {
            ApProtocol::Voc07ElevenPoint => "voc2007_11pt",
            ApProtocol::AllPoint => "all_point",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalGt {
    pub bbox: BoundingBox,
    pub class: usize,
    pub difficult: bool,
}

/// AP of one class. `dets` are that class's detections over the whole set;
/// `gts[image_id]` lists the image's boxes of that class. Returns 0 when
/// there are no non-difficult ground truths.
///
/// Each detection, in descending score order (ties keep input order), takes
/// the highest-IoU unmatched non-difficult box of its image: a TP when the
/// IoU reaches `iou_thresh`. Otherwise it is ignored if it reaches a
/// difficult box and counted FP if not.
pub fn average_precision(dets: &[Detection], gts: &[Vec<EvalGt>], iou_thresh: f64, protocol: ApProtocol) -> f64 {
    let npos: usize = gts.iter().map(|g| g.iter().filter(|b| !b.difficult).count()).sum();
    if npos == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(dets.len());
    let mut precision = Vec::with_capacity(dets.len());
    for i in order {
        let d = &dets[i];
        let boxes = gts.get(d.image_id).map(Vec::as_slice).unwrap_or(&[]);
        let mut best: Option<(usize, f64)> = None;
        let mut hits_difficult = false;
        for (j, g) in boxes.iter().enumerate() {
            let o = iou(&d.bbox, &g.bbox);
            if g.difficult {
                hits_difficult |= o >= iou_thresh;
                continue;
            }
            if matched[d.image_id][j] {
                continue;
            }
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        match best {
            Some((j, o)) if o >= iou_thresh => {
                matched[d.image_id][j] = true;
                tp += 1;
            }
            _ if hits_difficult => continue,
            _ => fp += 1,
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    match protocol {
        ApProtocol::Voc07ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let r = t as f64 / 10.0;
                    recall
                        .iter()
                        .zip(&precision)
                        .filter(|(&rc, _)| rc >= r)
                        .map(|(_, &p)| p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
        ApProtocol::AllPoint => {
            let mut env = precision.clone();
            for i in (0..env.len().saturating_sub(1)).rev() {
                env[i] = env[i].max(env[i + 1]);
            }
            let mut prev_r = 0.0;
            let mut area = 0.0;
            for (r, p) in recall.iter().zip(&env) {
                area += (r - prev_r) * p;
                prev_r = *r;
            }
            area
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    pub ap: f64,
    pub num_gt: usize,
}

/// Unweighted mean over classes that have ground truth.
pub fn mean_ap(per_class: &[ClassAp]) -> Result<f64> {
    let used: Vec<f64> = per_class.iter().filter(|c| c.num_gt > 0).map(|c| c.ap).collect();
    if used.is_empty() {
        return Err(AodError::Empty("classes with ground truth"));
    }
    for c in per_class.iter().filter(|c| c.num_gt == 0) {
        eprintln!("note: class {} has no ground truth and is excluded from mAP", c.class);
    }
    Ok(used.iter().sum::<f64>() / used.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResults {
    pub per_class: BTreeMap<String, f64>,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub protocol: ApProtocol,
    pub iou_thresh: f64,
}

pub fn class_name(c: usize) -> String {
    format!("class{c}")
}

/// Per-class AP and mAP for `dets` against `gts` (indexed by image).
pub fn evaluate(
    dets: &[Detection],
    gts: &[Vec<EvalGt>],
    num_classes: usize,
    iou_thresh: f64,
    protocol: ApProtocol,
) -> Result<(Vec<ClassAp>, EvalResults)> {
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let cd: Vec<Detection> = dets.iter().filter(|d| d.class == c).copied().collect();
        let cg: Vec<Vec<EvalGt>> = gts
            .iter()
            .map(|g| g.iter().filter(|b| b.class == c).copied().collect())
            .collect();
        let num_gt = cg.iter().map(|g| g.iter().filter(|b| !b.difficult).count()).sum();
        per_class.push(ClassAp {
            class: c,
            ap: average_precision(&cd, &cg, iou_thresh, protocol),
            num_gt,
        });
    }
    let map = mean_ap(&per_class)?;
    let results = EvalResults {
        per_class: per_class
            .iter()
            .filter(|c| c.num_gt > 0)
            .map(|c| (class_name(c.class), c.ap))
            .collect(),
        map,
        protocol,
        iou_thresh,
    };
    Ok((per_class, results))
}

impl EvalResults {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// One header row of class names and one row of AP values in percent.
    pub fn to_csv(&self, method: &str) -> String {
        let mut head = vec!["method".to_string()];
        let mut row = vec![method.to_string()];
        for (k, v) in &self.per_class {
            head.push(k.clone());
            row.push(format!("{:.2}", 100.0 * v));
        }
        head.push("mAP".into());
        row.push(format!("{:.2}", 100.0 * self.map));
        format!("{}\n{}\n", head.join(","), row.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64) -> BoundingBox {
        BoundingBox::new(x, 10.0, 8.0, 8.0).unwrap()
    }

    fn det(img: usize, score: f64, x: f64) -> Detection {
        Detection {
            image_id: img,
            class: 0,
            score,
            bbox: b(x),
        }
    }

    fn gt(x: f64) -> EvalGt {
        EvalGt {
            bbox: b(x),
            class: 0,
            difficult: false,
        }
    }

    #[test]
    fn hand_fixtures() {
        let gts = vec![vec![gt(10.0)], vec![gt(30.0)]];
        let dets = [det(0, 0.9, 10.0), det(1, 0.8, 30.0)];
        assert_eq!(average_precision(&dets, &gts, 0.5, ApProtocol::Voc07ElevenPoint), 1.0);

        let gts = vec![vec![gt(10.0)]];
        let dets = [det(0, 0.9, 40.0), det(0, 0.8, 10.0)];
        assert_eq!(average_precision(&dets, &gts, 0.5, ApProtocol::Voc07ElevenPoint), 0.5);

        assert_eq!(average_precision(&[], &gts, 0.5, ApProtocol::Voc07ElevenPoint), 0.0);
    }

    #[test]
    fn difficult_boxes_are_neutral() {
        let gts = vec![vec![gt(10.0), EvalGt { difficult: true, ..gt(40.0) }]];
        let dets = [det(0, 0.95, 40.0), det(0, 0.9, 10.0)];
        assert_eq!(average_precision(&dets, &gts, 0.5, ApProtocol::Voc07ElevenPoint), 1.0);
    }

    #[test]
    fn mean_ap_examples() {
        let c = |class, ap, num_gt| ClassAp { class, ap, num_gt };
        assert_eq!(mean_ap(&[c(0, 1.0, 3), c(1, 0.0, 2)]).unwrap(), 0.5);
        assert_eq!(mean_ap(&[c(0, 0.3, 1)]).unwrap(), 0.3);
        assert_eq!(mean_ap(&[c(0, 0.3, 1), c(1, 0.0, 0)]).unwrap(), 0.3);
        assert!(mean_ap(&[c(0, 0.0, 0)]).is_err());
    }

    #[test]
    fn all_point_on_two_step_curve() {
        let gts = vec![vec![gt(10.0), gt(30.0)]];
        let dets = [det(0, 0.9, 10.0), det(0, 0.8, 60.0), det(0, 0.7, 30.0)];
        // PR: (0.5, 1), (0.5, 0.5), (1, 2/3) -> 0.5 * 1 + 0.5 * 2/3
        let ap = average_precision(&dets, &gts, 0.5, ApProtocol::AllPoint);
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    }
}
