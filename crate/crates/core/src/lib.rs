//! Attentional object detection (AOD) at desk scale.
//!
//! A recurrent glimpse network places a short sequence of boxes around each
//! object proposal, pools convolutional features from every glimpse, fuses
//! them with an element-wise max and classifies/regresses the proposal. The
//! glimpse generator has no supervision; it is trained with REINFORCE using a
//! reward built from the class probability and localization IoU, while the
//! rest of the network is trained with the usual detection losses.
//!
//! Module map:
//!
//! * [`geometry`]: boxes, the glimpse/bbox-target codec, IoU, clipping.
//! * [`diffcore`]: tensors, the closed set of differentiable ops, SGD,
//!   finite-difference checking and checkpoints.
//! * [`backbone`]: small convolutional feature extractor and ROI pooling.
//! * [`aodnet`]: the recurrent network, rollouts and BPTT.
//! * [`reinforce`]: rewards, baselines and the policy-gradient estimator.
//! * [`trainer`]: label assignment, minibatches, the joint training step.
//! * [`data`]: synthetic scenes, stand-in proposals, dataset files, VOC XML.
//! * [`eval`]: detection, NMS and VOC average precision.
//! * [`cli`]: the `aod` command-line front end.

pub mod aodnet;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod reinforce;
pub mod rng;
pub mod trainer;
pub mod viz;

pub use error::{AodError, Result};
pub use geometry::{BoundingBox, GlimpseDelta};
