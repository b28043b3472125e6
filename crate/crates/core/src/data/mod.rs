//! Synthetic detection scenes, stand-in proposals, dataset files and VOC
//! annotation parsing.

mod dataset;
mod scene;
mod voc;

pub use dataset::{load_dataset, save_dataset, Dataset, DATASET_SCHEMA_VERSION};
pub use scene::{
    generate_dataset, generate_proposals, generate_scene, silhouette_of, ProposalConfig, SceneConfig, Silhouette,
};
pub use voc::{parse_voc_xml, render_voc_xml, VocAnnotation, VocObject};

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::geometry::BoundingBox;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BoundingBox,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    /// `C x H x W`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub gts: Vec<GroundTruth>,
    pub proposals: Vec<BoundingBox>,
}

impl AnnotatedImage {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height(), self.width())
    }
}
