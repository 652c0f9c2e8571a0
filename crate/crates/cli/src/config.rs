//! Flat per-command configuration.
//!
//! Each command has one config struct and a matching clap argument struct
//! generated from a single field list. A run starts from the defaults, applies
//! the JSON file given with `--config`, then applies any flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

macro_rules! command_config {
    (
        $cfg:ident, $args:ident {
            $( $(#[doc = $doc:literal])* $field:ident : $ty:ty = $default:expr, )*
        }
        optional {
            $( $(#[doc = $odoc:literal])* $ofield:ident : $oty:ty, )*
        }
    ) => {
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields, default)]
        pub struct $cfg {
            $( pub $field: $ty, )*
            $( pub $ofield: Option<$oty>, )*
        }

        impl Default for $cfg {
            fn default() -> Self {
                Self {
                    $( $field: $default, )*
                    $( $ofield: None, )*
                }
            }
        }

        #[derive(Debug, Clone, clap::Args, Serialize)]
        pub struct $args {
            /// JSON file with flat config keys; flags take precedence
            #[arg(long)]
            #[serde(skip)]
            pub config: Option<PathBuf>,
            $(
                $(#[doc = $doc])*
                #[arg(long)]
                #[serde(skip_serializing_if = "Option::is_none")]
                pub $field: Option<$ty>,
            )*
            $(
                $(#[doc = $odoc])*
                #[arg(long)]
                #[serde(skip_serializing_if = "Option::is_none")]
                pub $ofield: Option<$oty>,
            )*
        }

        impl $args {
            pub fn resolve(&self) -> Result<$cfg> {
                resolve(self.config.as_deref(), self)
            }
        }
    };
}

/// Merges the config file and flag overrides into a typed config.
pub fn resolve<C: DeserializeOwned, A: Serialize>(file: Option<&Path>, args: &A) -> Result<C> {
    let mut map = match file {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            match serde_json::from_str::<Value>(&text).with_context(|| format!("parsing config {}", path.display()))? {
                Value::Object(m) => m,
                _ => bail!("config {} must contain a JSON object", path.display()),
            }
        }
        None => Map::new(),
    };
    if let Value::Object(flags) = serde_json::to_value(args)? {
        map.extend(flags);
    }
    serde_json::from_value(Value::Object(map)).context("invalid configuration")
}

command_config! {
    SynthConfig, SynthArgs {
        /// Number of vessel identities
        identities: usize = 20,
        /// Views rendered per identity, spread over [0, 180) degrees
        azimuths_per_identity: usize = 8,
        /// Square image side in pixels
        image_size: usize = 192,
        /// Gaussian intensity noise of the renders
        image_noise: f64 = 6.0,
        /// Dataset seed
        seed: u64 = 0,
    }
    optional {
        /// Output directory
        out: PathBuf,
    }
}

command_config! {
    TrainSegConfig, TrainSegArgs {
        learning_rate: f64 = 0.02,
        momentum: f64 = 0.9,
        epochs: usize = 30,
        batch_size: usize = 4,
        /// Initialisation and shuffling seed
        seed: u64 = 1,
        /// Probability threshold for the reported IoU
        binarize_threshold: f64 = 0.5,
    }
    optional {
        /// Dataset manifest (manifest.tsv)
        manifest: PathBuf,
        /// Output directory
        out: PathBuf,
    }
}

command_config! {
    TrainHeadConfig, TrainHeadArgs {
        /// Synthetic backbone feature dimension
        feature_dim: usize = 384,
        /// Synthetic backbone feature noise
        feature_sigma: f64 = 0.15,
        azimuth_bucket_deg: f64 = 22.5,
        projection_seed: u64 = 0xB0C5,
        binarize_threshold: f64 = 0.5,
        d_space: usize = 128,
        learning_rate: f64 = 0.05,
        momentum: f64 = 0.9,
        epochs: usize = 50,
        batch_size: usize = 16,
        /// Initialisation and sampling seed
        seed: u64 = 7,
        arcface_scale: f64 = 30.0,
        /// ArcFace margin in radians
        arcface_margin: f64 = 0.5,
        lambda_id: f64 = 1.0,
        lambda_triplet: f64 = 1.0,
        triplet_margin: f64 = 0.3,
        /// Weight each space's triplet term by the anchor's area ratio
        area_weighted_triplet: bool = false,
    }
    optional {
        /// Dataset manifest (manifest.tsv)
        manifest: PathBuf,
        /// Segmentation parameters; foreground masks from the manifest are used when absent
        segnet: PathBuf,
        /// Output directory
        out: PathBuf,
    }
}

command_config! {
    EnrollConfig, EnrollArgs {
        feature_dim: usize = 384,
        feature_sigma: f64 = 0.15,
        azimuth_bucket_deg: f64 = 22.5,
        projection_seed: u64 = 0xB0C5,
        binarize_threshold: f64 = 0.5,
        /// Manifest split to enroll
        split: String = "train".into(),
        /// Accepted for uniformity; enrollment is deterministic
        seed: u64 = 0,
    }
    optional {
        manifest: PathBuf,
        /// Head parameters (REIDHD1)
        head: PathBuf,
        /// Existing gallery to extend; it is copied, never modified
        gallery: PathBuf,
        segnet: PathBuf,
        out: PathBuf,
    }
}

command_config! {
    QueryConfig, QueryArgs {
        feature_dim: usize = 384,
        feature_sigma: f64 = 0.15,
        azimuth_bucket_deg: f64 = 22.5,
        projection_seed: u64 = 0xB0C5,
        binarize_threshold: f64 = 0.5,
        /// all_views, largest_view or global_only
        fusion: String = "all_views".into(),
        /// Number of ranked identities to write
        top_k: usize = 5,
        /// Match or enroll the query against the gallery
        reid: bool = false,
        enroll_threshold: f64 = 0.35,
        /// Accepted for uniformity; querying is deterministic
        seed: u64 = 0,
    }
    optional {
        manifest: PathBuf,
        /// Image path as listed in the manifest
        image: PathBuf,
        head: PathBuf,
        gallery: PathBuf,
        segnet: PathBuf,
        out: PathBuf,
    }
}

command_config! {
    EvalReidConfig, EvalReidArgs {
        feature_dim: usize = 384,
        feature_sigma: f64 = 0.15,
        azimuth_bucket_deg: f64 = 22.5,
        projection_seed: u64 = 0xB0C5,
        binarize_threshold: f64 = 0.5,
        fusion: String = "all_views".into(),
        /// Manifest split used as queries
        split: String = "test".into(),
        d_space: usize = 128,
        learning_rate: f64 = 0.05,
        momentum: f64 = 0.9,
        epochs: usize = 50,
        batch_size: usize = 16,
        /// Head training seed when no head is given
        seed: u64 = 7,
        arcface_scale: f64 = 30.0,
        arcface_margin: f64 = 0.5,
        lambda_id: f64 = 1.0,
        lambda_triplet: f64 = 1.0,
        triplet_margin: f64 = 0.3,
        area_weighted_triplet: bool = false,
    }
    optional {
        manifest: PathBuf,
        /// Head parameters; trained on the train split when absent
        head: PathBuf,
        /// Gallery; built from the train split when absent
        gallery: PathBuf,
        segnet: PathBuf,
        out: PathBuf,
    }
}

command_config! {
    EvalTrackConfig, EvalTrackArgs {
        /// Round-1 gating radius in pixels
        radius: f64 = 50.0,
        /// Round-2 minimum cosine similarity
        cosine_threshold: f64 = 0.5,
        max_age: u64 = 10,
        min_confidence: f64 = 0.3,
        /// Enable appearance matching for detections left over by round 1
        second_round: bool = true,
        iou_threshold: f64 = 0.5,
        /// Accepted for uniformity; tracking is deterministic
        seed: u64 = 0,
    }
    optional {
        /// Detection TSV
        detections: PathBuf,
        /// Ground-truth track TSV
        ground_truth: PathBuf,
        /// Built-in scripted scene instead of files: crossing or linear
        scene: String,
        out: PathBuf,
    }
}
