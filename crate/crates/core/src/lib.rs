//! Viewpoint-independent vessel re-identification.
//!
//! Modules:
//! - [`numerics`]: distances, normalisation, finite-difference gradient checks
//! - [`masks`]: grayscale images, binary masks, PGM I/O and view area ratios
//! - [`synthgen`]: procedural vessels, silhouette renders and synthetic backbone features
//! - [`segnet`]: encoder-decoder foreground segmenter trained from scratch
//! - [`head`]: four-space embedding head with ArcFace and triplet losses
//! - [`gallery`]: the dynamic identity database and area-ratio-weighted ranking
//! - [`assoc`]: two-round detection-to-tracklet association
//! - [`metrics`]: CMC, mAP, MOTA and IDF1
//! - [`experiment`]: end-to-end re-identification runs on synthetic data

pub mod assoc;
pub mod error;
pub mod experiment;
pub mod gallery;
pub mod head;
pub mod masks;
pub mod metrics;
pub mod numerics;
pub mod segnet;
pub mod synthgen;

pub use assoc::{AssocConfig, Detection, Tracker, Tracklet};
pub use error::{Error, Result};
pub use experiment::ExperimentConfig;
pub use gallery::{FusionMode, GalleryDB, GalleryEntry, RankedList, ReidDecision};
pub use head::{ArcFaceConfig, HeadParams, HeadTrainConfig, LossConfig, Space, SpaceEmbeddings};
pub use masks::{AreaRatios, BitMask, GrayImage, ProbMap, ViewMaskSet};
pub use synthgen::{BackboneConfig, DatasetConfig, Manifest, RenderedSample, Split, SyntheticBackbone, VesselShape};
