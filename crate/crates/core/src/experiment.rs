//! End-to-end re-identification on synthetic data.
//!
//! Training-split views are enrolled in the gallery and held-out azimuths
//! are used as queries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gallery::{FusionMode, GalleryDB, GalleryEntry};
use crate::head::{
    map_to_spaces, train_head, HeadParams, HeadSample, HeadTrainConfig, HeadTrainOutcome, SpaceEmbeddings,
};
use crate::masks::AreaRatios;
use crate::metrics::{cmc, mean_average_precision, ReidEvalCase};
use crate::synthgen::{generate_samples, BackboneConfig, DatasetConfig, Split, SyntheticBackbone};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub backbone: BackboneConfig,
    pub head: HeadTrainConfig,
}

impl ExperimentConfig {
    /// Uses `seed` for the dataset, feature noise and head training alike.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.dataset.seed = seed;
        self.head.seed = seed;
        self
    }
}

/// A sample reduced to what the head and gallery consume.
#[derive(Debug, Clone)]
pub struct FeatureSample {
    pub identity_id: u64,
    pub azimuth_deg: f64,
    pub split: Split,
    pub feature: Vec<f64>,
    pub area_ratios: AreaRatios,
}

impl FeatureSample {
    pub fn head_sample(&self) -> HeadSample {
        HeadSample {
            feature: self.feature.clone(),
            area_ratios: self.area_ratios,
            identity_id: self.identity_id,
            azimuth_deg: self.azimuth_deg,
        }
    }

    pub fn source_tag(&self) -> String {
        format!("id{:04}_az{:06.2}", self.identity_id, self.azimuth_deg)
    }
}

/// Renders the dataset and extracts features; area ratios come from the
/// ground-truth view masks.
pub fn feature_samples(cfg: &ExperimentConfig) -> Result<Vec<FeatureSample>> {
    let backbone = SyntheticBackbone::new(cfg.backbone)?;
    let shapes = cfg.dataset.shapes();
    generate_samples(&cfg.dataset)?
        .into_iter()
        .map(|g| {
            let s = &g.sample;
            Ok(FeatureSample {
                identity_id: s.identity_id,
                azimuth_deg: s.azimuth_deg,
                split: g.split,
                feature: backbone.features(&shapes[s.identity_id as usize], s.azimuth_deg, cfg.dataset.seed),
                area_ratios: s.area_ratios()?,
            })
        })
        .collect()
}

/// An embedded query with its true identity.
#[derive(Debug, Clone)]
pub struct Query {
    pub identity_id: u64,
    pub embeddings: SpaceEmbeddings,
    pub area_ratios: AreaRatios,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReidScores {
    pub fusion: FusionMode,
    pub top1: f64,
    pub top5: f64,
    pub map: f64,
    pub queries: usize,
}

/// Top-1, Top-5 and image-level mAP of `queries` against `gallery`.
///
/// For mAP every gallery image is a ranked item, ordered by fused distance
/// with ties broken by identity id and then enrollment order.
pub fn evaluate(gallery: &GalleryDB, queries: &[Query], fusion: FusionMode) -> Result<ReidScores> {
    if queries.is_empty() {
        return Err(Error::InvalidInput("no queries to evaluate".into()));
    }
    let mut cases = Vec::with_capacity(queries.len());
    let mut relevance = Vec::with_capacity(queries.len());
    for q in queries {
        cases.push(ReidEvalCase {
            query_id: q.identity_id,
            ranking: gallery.rank_with(&q.embeddings, &q.area_ratios, fusion)?,
        });
        let mut items = gallery.entry_distances(&q.embeddings, &q.area_ratios, fusion)?;
        items.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        relevance.push(items.iter().map(|&(id, _)| id == q.identity_id).collect::<Vec<_>>());
    }
    let c = cmc(&cases)?;
    Ok(ReidScores {
        fusion,
        top1: c.top1,
        top5: c.top5,
        map: mean_average_precision(&relevance)?,
        queries: queries.len(),
    })
}

pub fn build_gallery(params: &HeadParams, samples: &[FeatureSample]) -> Result<GalleryDB> {
    let mut db = GalleryDB::new(params.d_space);
    for s in samples {
        db.insert(GalleryEntry {
            identity_id: s.identity_id,
            embeddings: map_to_spaces(params, &s.feature)?,
            area_ratios: s.area_ratios,
            source: s.source_tag(),
        })?;
    }
    Ok(db)
}

pub fn embed_queries(params: &HeadParams, samples: &[FeatureSample]) -> Result<Vec<Query>> {
    samples
        .iter()
        .map(|s| {
            Ok(Query {
                identity_id: s.identity_id,
                embeddings: map_to_spaces(params, &s.feature)?,
                area_ratios: s.area_ratios,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ReidRun {
    pub head: HeadTrainOutcome,
    pub gallery: GalleryDB,
    /// One entry per [`FusionMode::ALL`] mode.
    pub scores: Vec<ReidScores>,
}

impl ReidRun {
    pub fn score(&self, mode: FusionMode) -> &ReidScores {
        self.scores.iter().find(|s| s.fusion == mode).expect("all modes evaluated")
    }
}

/// Trains the head on the training split, enrolls it, and scores the held-out split.
pub fn run_reid(cfg: &ExperimentConfig) -> Result<ReidRun> {
    let samples = feature_samples(cfg)?;
    let (train, test): (Vec<_>, Vec<_>) = samples.into_iter().partition(|s| s.split == Split::Train);
    let head = train_head(&train.iter().map(FeatureSample::head_sample).collect::<Vec<_>>(), &cfg.head)?;
    let gallery = build_gallery(&head.params, &train)?;
    let queries = embed_queries(&head.params, &test)?;
    let scores = FusionMode::ALL.into_iter().map(|m| evaluate(&gallery, &queries, m)).collect::<Result<_>>()?;
    Ok(ReidRun { head, gallery, scores })
}
