use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, GroundTruth, SceneConfig};
use crate::diffcore::{Real, Tensor};
use crate::error::{AodError, Result};
use crate::geometry::BoundingBox;

pub const DATASET_SCHEMA_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scene_config: SceneConfig,
    pub images: Vec<AnnotatedImage>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.scene_config.num_classes
    }
}

#[derive(Serialize, Deserialize)]
struct GtRecord {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    label: usize,
}

#[derive(Serialize, Deserialize)]
struct ImageRecord {
    id: String,
    shape: [usize; 3],
    /// Row-major little-endian `f32`.
    pixels_b64: String,
    gts: Vec<GtRecord>,
    proposals: Vec<BoundingBox>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    schema_version: u64,
    scene_config: SceneConfig,
    images: Vec<ImageRecord>,
}

fn to_record(img: &AnnotatedImage) -> ImageRecord {
    let mut bytes = Vec::with_capacity(img.image.len() * 4);
    for &v in img.image.data() {
        v.write_le(&mut bytes);
    }
    let s = img.image.shape();
    ImageRecord {
        id: img.id.clone(),
        shape: [s[0], s[1], s[2]],
        pixels_b64: B64.encode(bytes),
        gts: img
            .gts
            .iter()
            .map(|g| GtRecord {
                cx: g.bbox.cx,
                cy: g.bbox.cy,
                w: g.bbox.w,
                h: g.bbox.h,
                label: g.label,
            })
            .collect(),
        proposals: img.proposals.clone(),
    }
}

fn from_record(r: ImageRecord, k: usize, path: &str) -> Result<AnnotatedImage> {
    let at = |field: &str| format!("{path}: images[{}].{field}", r.id);
    let bytes = B64.decode(&r.pixels_b64).map_err(|e| AodError::parse(at("pixels_b64"), e.to_string()))?;
    let n: usize = r.shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(AodError::parse(at("pixels_b64"), format!("expected {} bytes, got {}", 4 * n, bytes.len())));
    }
    let data: Vec<f32> = bytes.chunks_exact(4).map(f32::read_le).collect();
    let image = Tensor::new(r.shape.to_vec(), data)?;
    let (h, w) = (r.shape[1] as f64, r.shape[2] as f64);
    let mut gts = Vec::with_capacity(r.gts.len());
    for g in &r.gts {
        let bbox = BoundingBox::new(g.cx, g.cy, g.w, g.h)?;
        if !bbox.within(w, h) {
            return Err(AodError::parse(at("gts"), "ground-truth box outside the image"));
        }
        if g.label >= k {
            return Err(AodError::parse(at("gts"), format!("label {} >= K = {k}", g.label)));
        }
        gts.push(GroundTruth { bbox, label: g.label });
    }
    for p in &r.proposals {
        p.validate()?;
    }
    Ok(AnnotatedImage {
        id: r.id,
        image,
        gts,
        proposals: r.proposals,
    })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let file = DatasetFile {
        schema_version: DATASET_SCHEMA_VERSION,
        scene_config: ds.scene_config.clone(),
        images: ds.images.iter().map(to_record).collect(),
    };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let shown = path.display().to_string();
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| AodError::parse(&shown, e.to_string()))?;
    let version = value.get("schema_version").and_then(|v| v.as_u64());
    match version {
        Some(DATASET_SCHEMA_VERSION) => {}
        Some(found) => {
            return Err(AodError::SchemaVersion {
                found,
                expected: DATASET_SCHEMA_VERSION,
            })
        }
        None => return Err(AodError::parse(shown, "missing schema_version")),
    }
    let file: DatasetFile = serde_json::from_value(value).map_err(|e| AodError::parse(&shown, e.to_string()))?;
    let k = file.scene_config.num_classes;
    let images = file
        .images
        .into_iter()
        .map(|r| from_record(r, k, &shown))
        .collect::<Result<_>>()?;
    Ok(Dataset {
        scene_config: file.scene_config,
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;

    #[test]
    fn round_trip_and_regeneration() {
        let cfg = SceneConfig {
            context_cue: true,
            seed: 3,
            ..SceneConfig::default()
        };
        let ds = generate_dataset(&cfg, 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(generate_dataset(&back.scene_config, back.images.len()).unwrap(), back);
    }

    #[test]
    fn unknown_schema_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        std::fs::write(&path, r#"{"schema_version": 7, "scene_config": {}, "images": []}"#).unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(AodError::SchemaVersion { found: 7, expected: 1 })
        ));
    }
}
