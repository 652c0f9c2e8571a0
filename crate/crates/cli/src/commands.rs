use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use thermreid_core::assoc::{self, scenes, Tracker};
use thermreid_core::experiment::{build_gallery, embed_queries, evaluate, FeatureSample};
use thermreid_core::gallery::{FusionMode, GalleryDB, ReidDecision};
use thermreid_core::head::{
    decode_head, encode_head, map_to_spaces, train_head, ArcFaceConfig, HeadParams, HeadTrainConfig, LossConfig,
};
use thermreid_core::masks::{clip_views, compute_area_ratios, load_pgm, AreaRatios};
use thermreid_core::metrics::{format_report, idf1, mota};
use thermreid_core::segnet::{self, SegNetParams, SegTrainConfig};
use thermreid_core::synthgen::{
    make_dataset, BackboneConfig, DatasetConfig, Manifest, ManifestRecord, Split, SyntheticBackbone,
    DATASET_CONFIG_FILE,
};
use thermreid_core::AssocConfig;

use crate::config::*;

/// Output directory guarded against overwriting any of the run's inputs.
struct Outputs {
    dir: PathBuf,
    inputs: Vec<PathBuf>,
}

impl Outputs {
    fn create(out: &Option<PathBuf>, inputs: &[&Option<PathBuf>]) -> Result<Self> {
        let dir = out.clone().ok_or_else(|| anyhow!("missing required key `out` (--out)"))?;
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let inputs = inputs.iter().filter_map(|p| p.as_ref()).filter_map(|p| fs::canonicalize(p).ok()).collect();
        Ok(Self { dir, inputs })
    }

    fn add_input(&mut self, path: &Path) {
        if let Ok(p) = fs::canonicalize(path) {
            self.inputs.push(p);
        }
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.dir.join(name);
        if let Ok(p) = fs::canonicalize(&path) {
            if self.inputs.contains(&p) {
                bail!("refusing to overwrite input file {}", path.display());
            }
        }
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
    }

    fn write_config<C: Serialize>(&self, cfg: &C) -> Result<()> {
        self.write("config.json", serde_json::to_string_pretty(cfg)? + "\n")
    }
}

fn required<'a, T>(value: &'a Option<T>, key: &str) -> Result<&'a T> {
    value.as_ref().ok_or_else(|| anyhow!("missing required key `{key}` (--{})", key.replace('_', "-")))
}

fn report(rows: &[(&str, String)]) -> String {
    format_report(&rows.iter().map(|(k, v)| (k.to_string(), v.clone())).collect::<Vec<_>>())
}

fn parse_fusion(s: &str) -> Result<FusionMode> {
    s.parse().map_err(|e| anyhow!("{e}"))
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse().map_err(|e| anyhow!("{e}"))
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

/// Turns manifest records into backbone features and area ratios.
///
/// Area ratios come from the stored foreground masks, or from the segmenter's
/// foreground when one is given; view masks are always clipped to that foreground.
struct FeatureSource<'a> {
    manifest: &'a Manifest,
    dataset: DatasetConfig,
    backbone: SyntheticBackbone,
    segnet: Option<SegNetParams>,
    threshold: f64,
}

impl<'a> FeatureSource<'a> {
    fn new(
        manifest: &'a Manifest,
        backbone: BackboneConfig,
        segnet: Option<&Path>,
        threshold: f64,
        outputs: &mut Outputs,
    ) -> Result<Self> {
        let ds_path = manifest.root.join(DATASET_CONFIG_FILE);
        let dataset: DatasetConfig = serde_json::from_str(
            &fs::read_to_string(&ds_path).with_context(|| format!("reading {}", ds_path.display()))?,
        )
        .with_context(|| format!("parsing {}", ds_path.display()))?;
        outputs.add_input(&ds_path);
        let segnet = match segnet {
            Some(p) => {
                outputs.add_input(p);
                Some(segnet::load_params(p).with_context(|| format!("loading segnet {}", p.display()))?)
            }
            None => None,
        };
        Ok(Self { manifest, dataset, backbone: SyntheticBackbone::new(backbone)?, segnet, threshold })
    }

    fn area_ratios(&self, r: &ManifestRecord) -> Result<AreaRatios> {
        let (fg, views) = self.manifest.load_masks(r)?;
        let fg = match &self.segnet {
            Some(p) => segnet::segment(p, &load_pgm(self.manifest.resolve(&r.image_path))?, self.threshold)?,
            None => fg,
        };
        Ok(compute_area_ratios(&fg, &clip_views(&views, &fg)?)?)
    }

    fn sample(&self, r: &ManifestRecord) -> Result<FeatureSample> {
        let shape = self.dataset.shape(r.identity_id);
        Ok(FeatureSample {
            identity_id: r.identity_id,
            azimuth_deg: r.azimuth_deg,
            split: r.split,
            feature: self.backbone.features(&shape, r.azimuth_deg, self.dataset.seed),
            area_ratios: self.area_ratios(r)?,
        })
    }

    fn split(&self, split: Split) -> Result<Vec<FeatureSample>> {
        let samples = self
            .manifest
            .records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| self.sample(r))
            .collect::<Result<Vec<_>>>()?;
        if samples.is_empty() {
            bail!("manifest has no `{}` records", split.as_str());
        }
        Ok(samples)
    }
}

fn backbone_config(dim: usize, sigma: f64, bucket: f64, projection_seed: u64) -> BackboneConfig {
    BackboneConfig { dim, sigma, azimuth_bucket_deg: bucket, projection_seed }
}

fn load_head(path: &Path) -> Result<HeadParams> {
    let bytes = fs::read(path).with_context(|| format!("reading head {}", path.display()))?;
    decode_head(&bytes).map(|(p, _)| p).with_context(|| format!("decoding head {}", path.display()))
}

fn load_gallery(path: &Path, d_space: usize) -> Result<GalleryDB> {
    GalleryDB::load_expecting(path, d_space).with_context(|| format!("loading gallery {}", path.display()))
}

fn losses_tsv(history: &[thermreid_core::head::EpochLosses]) -> String {
    let mut s = String::from("epoch\tl_id\tl_triplet\tl_total\n");
    for (i, e) in history.iter().enumerate() {
        s += &format!("{}\t{}\t{}\t{}\n", i + 1, e.id, e.triplet, e.total);
    }
    s
}

pub fn synth(cfg: &SynthConfig) -> Result<()> {
    let out = Outputs::create(&cfg.out, &[])?;
    out.write_config(cfg)?;
    let dataset = DatasetConfig {
        identities: cfg.identities,
        azimuths_per_identity: cfg.azimuths_per_identity,
        image_size: cfg.image_size,
        image_noise: cfg.image_noise,
        seed: cfg.seed,
    };
    let manifest = make_dataset(&dataset, &out.dir)?;
    out.write(DATASET_CONFIG_FILE, serde_json::to_string_pretty(&dataset)? + "\n")?;
    let train = manifest.records.iter().filter(|r| r.split == Split::Train).count();
    out.write(
        "report.tsv",
        report(&[
            ("identities", cfg.identities.to_string()),
            ("images", manifest.records.len().to_string()),
            ("train", train.to_string()),
            ("test", (manifest.records.len() - train).to_string()),
        ]),
    )
}

pub fn train_seg(cfg: &TrainSegConfig) -> Result<()> {
    let out = Outputs::create(&cfg.out, &[&cfg.manifest])?;
    out.write_config(cfg)?;
    let manifest = load_manifest(required(&cfg.manifest, "manifest")?)?;
    let seg_cfg = SegTrainConfig {
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        binarize_threshold: cfg.binarize_threshold,
    };
    let outcome = segnet::train_from_manifest(&manifest, &seg_cfg)?;
    out.write("segnet.bin", segnet::encode_params(&outcome.params))?;
    let mut losses = String::from("epoch\tloss\n");
    for (i, l) in outcome.epoch_losses.iter().enumerate() {
        losses += &format!("{}\t{}\n", i + 1, l);
    }
    out.write("losses.tsv", losses)?;

    let mut test = Vec::new();
    for r in manifest.records.iter().filter(|r| r.split == Split::Test) {
        test.push((load_pgm(manifest.resolve(&r.image_path))?, manifest.load_masks(r)?.0));
    }
    let mut rows = vec![
        ("epochs", cfg.epochs.to_string()),
        ("final_loss", outcome.epoch_losses.last().copied().unwrap_or(f64::NAN).to_string()),
    ];
    if !test.is_empty() {
        rows.push(("test_iou", segnet::mean_iou(&outcome.params, &test, cfg.binarize_threshold)?.to_string()));
    }
    out.write("report.tsv", report(&rows))
}

/// Head training settings from any config carrying the head keys.
macro_rules! head_train_config {
    ($cfg:expr) => {
        HeadTrainConfig {
            d_space: $cfg.d_space,
            learning_rate: $cfg.learning_rate,
            momentum: $cfg.momentum,
            epochs: $cfg.epochs,
            batch_size: $cfg.batch_size,
            seed: $cfg.seed,
            arcface: ArcFaceConfig { scale: $cfg.arcface_scale, margin: $cfg.arcface_margin },
            loss: LossConfig {
                lambda_id: $cfg.lambda_id,
                lambda_triplet: $cfg.lambda_triplet,
                triplet_margin: $cfg.triplet_margin,
                area_weighted_triplet: $cfg.area_weighted_triplet,
            },
        }
    };
}

pub fn train_head_cmd(cfg: &TrainHeadConfig) -> Result<()> {
    let mut out = Outputs::create(&cfg.out, &[&cfg.manifest, &cfg.segnet])?;
    out.write_config(cfg)?;
    let manifest = load_manifest(required(&cfg.manifest, "manifest")?)?;
    let bb = backbone_config(cfg.feature_dim, cfg.feature_sigma, cfg.azimuth_bucket_deg, cfg.projection_seed);
    let src = FeatureSource::new(&manifest, bb, cfg.segnet.as_deref(), cfg.binarize_threshold, &mut out)?;
    let train = src.split(Split::Train)?;
    let head_cfg = head_train_config!(cfg);
    let outcome = train_head(&train.iter().map(FeatureSample::head_sample).collect::<Vec<_>>(), &head_cfg)?;
    out.write("head.bin", encode_head(&outcome.params, &outcome.class_ids)?)?;
    out.write("losses.tsv", losses_tsv(&outcome.history))
}

pub fn enroll(cfg: &EnrollConfig) -> Result<()> {
    let mut out = Outputs::create(&cfg.out, &[&cfg.manifest, &cfg.head, &cfg.gallery, &cfg.segnet])?;
    out.write_config(cfg)?;
    let manifest = load_manifest(required(&cfg.manifest, "manifest")?)?;
    let params = load_head(required(&cfg.head, "head")?)?;
    let bb = backbone_config(cfg.feature_dim, cfg.feature_sigma, cfg.azimuth_bucket_deg, cfg.projection_seed);
    let src = FeatureSource::new(&manifest, bb, cfg.segnet.as_deref(), cfg.binarize_threshold, &mut out)?;
    let samples = src.split(parse_split(&cfg.split)?)?;
    let mut db = match &cfg.gallery {
        Some(p) => load_gallery(p, params.d_space)?,
        None => GalleryDB::new(params.d_space),
    };
    let added = build_gallery(&params, &samples)?;
    for e in added.entries() {
        db.insert(e.clone())?;
    }
    out.write("gallery.bin", db.encode())?;
    out.write(
        "report.tsv",
        report(&[
            ("enrolled", samples.len().to_string()),
            ("entries", db.num_entries().to_string()),
            ("identities", db.num_identities().to_string()),
        ]),
    )
}

pub fn query(cfg: &QueryConfig) -> Result<()> {
    let mut out = Outputs::create(&cfg.out, &[&cfg.manifest, &cfg.head, &cfg.gallery, &cfg.segnet])?;
    out.write_config(cfg)?;
    let manifest = load_manifest(required(&cfg.manifest, "manifest")?)?;
    let image = required(&cfg.image, "image")?;
    let record = manifest
        .records
        .iter()
        .find(|r| r.image_path == *image || manifest.resolve(&r.image_path) == *image)
        .ok_or_else(|| anyhow!("image {} is not listed in the manifest", image.display()))?;
    let params = load_head(required(&cfg.head, "head")?)?;
    let mut db = load_gallery(required(&cfg.gallery, "gallery")?, params.d_space)?;
    let fusion = parse_fusion(&cfg.fusion)?;
    let bb = backbone_config(cfg.feature_dim, cfg.feature_sigma, cfg.azimuth_bucket_deg, cfg.projection_seed);
    let src = FeatureSource::new(&manifest, bb, cfg.segnet.as_deref(), cfg.binarize_threshold, &mut out)?;
    let sample = src.sample(record)?;
    let emb = map_to_spaces(&params, &sample.feature)?;

    let ranked = db.rank_with(&emb, &sample.area_ratios, fusion)?;
    let mut tsv = String::from("rank\tidentity_id\tdistance\n");
    for (i, (id, d)) in ranked.0.iter().take(cfg.top_k).enumerate() {
        tsv += &format!("{}\t{}\t{}\n", i + 1, id, d);
    }
    out.write("ranked.tsv", tsv)?;

    let ar = sample.area_ratios;
    let mut rows = vec![
        ("image", image.display().to_string()),
        ("ar_front", ar.front.to_string()),
        ("ar_side", ar.side.to_string()),
        ("ar_rear", ar.rear.to_string()),
    ];
    if cfg.reid {
        let decision = db.reid(&emb, &ar, cfg.enroll_threshold, &sample.source_tag())?;
        let kind = match decision {
            ReidDecision::Matched(_) => "matched",
            ReidDecision::Enrolled(_) => "enrolled",
        };
        rows.push(("decision", kind.into()));
        rows.push(("identity_id", decision.identity_id().to_string()));
        out.write("gallery.bin", db.encode())?;
    }
    out.write("report.tsv", report(&rows))
}

pub fn eval_reid(cfg: &EvalReidConfig) -> Result<()> {
    let mut out = Outputs::create(&cfg.out, &[&cfg.manifest, &cfg.head, &cfg.gallery, &cfg.segnet])?;
    out.write_config(cfg)?;
    let fusion = parse_fusion(&cfg.fusion)?;
    let split = parse_split(&cfg.split)?;
    let manifest = load_manifest(required(&cfg.manifest, "manifest")?)?;
    let bb = backbone_config(cfg.feature_dim, cfg.feature_sigma, cfg.azimuth_bucket_deg, cfg.projection_seed);
    let src = FeatureSource::new(&manifest, bb, cfg.segnet.as_deref(), cfg.binarize_threshold, &mut out)?;

    let mut train = None;
    let params = match &cfg.head {
        Some(p) => load_head(p)?,
        None => {
            let samples = src.split(Split::Train)?;
            let head_cfg = head_train_config!(cfg);
            let outcome = train_head(&samples.iter().map(FeatureSample::head_sample).collect::<Vec<_>>(), &head_cfg)?;
            out.write("head.bin", encode_head(&outcome.params, &outcome.class_ids)?)?;
            out.write("losses.tsv", losses_tsv(&outcome.history))?;
            train = Some(samples);
            outcome.params
        }
    };
    let gallery = match &cfg.gallery {
        Some(p) => load_gallery(p, params.d_space)?,
        None => {
            let samples = match train {
                Some(s) => s,
                None => src.split(Split::Train)?,
            };
            let db = build_gallery(&params, &samples)?;
            out.write("gallery.bin", db.encode())?;
            db
        }
    };
    let queries = embed_queries(&params, &src.split(split)?)?;
    let s = evaluate(&gallery, &queries, fusion)?;
    out.write(
        "report.tsv",
        report(&[
            ("fusion", fusion.as_str().into()),
            ("split", split.as_str().into()),
            ("queries", s.queries.to_string()),
            ("gallery_entries", gallery.num_entries().to_string()),
            ("Top1", s.top1.to_string()),
            ("Top5", s.top5.to_string()),
            ("mAP", s.map.to_string()),
        ]),
    )?;
    out.write(
        "summary.json",
        serde_json::to_string_pretty(&json!({ "Top1": s.top1, "Top5": s.top5, "mAP": s.map }))? + "\n",
    )
}

pub fn eval_track(cfg: &EvalTrackConfig) -> Result<()> {
    let out = Outputs::create(&cfg.out, &[&cfg.detections, &cfg.ground_truth])?;
    out.write_config(cfg)?;
    let (detections, ground_truth) = match (&cfg.scene, &cfg.detections) {
        (Some(_), Some(_)) => bail!("`scene` and `detections` are mutually exclusive"),
        (Some(name), None) => {
            let scene = match name.as_str() {
                "crossing" => scenes::crossing(),
                "linear" => scenes::linear(100),
                other => bail!("unknown scene `{other}` (expected crossing or linear)"),
            };
            out.write("detections.tsv", assoc::format_detections(&scene.detections, false))?;
            out.write("ground_truth.tsv", assoc::format_tracks(&scene.ground_truth))?;
            (scene.detections, Some(scene.ground_truth))
        }
        (None, Some(path)) => {
            let dets = assoc::load_detections(path).with_context(|| format!("loading {}", path.display()))?;
            let gt = match &cfg.ground_truth {
                Some(p) => Some(assoc::parse_tracks(
                    &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
                )?),
                None => None,
            };
            (dets, gt)
        }
        (None, None) => bail!("missing required key `detections` (--detections) or `scene` (--scene)"),
    };
    let mut tracker = Tracker::new(AssocConfig {
        radius: cfg.radius,
        cosine_threshold: cfg.cosine_threshold,
        max_age: cfg.max_age,
        min_confidence: cfg.min_confidence,
        second_round: cfg.second_round,
        ..AssocConfig::default()
    })?;
    let tracks = tracker.run(&detections)?;
    out.write("tracks.tsv", assoc::format_tracks(&tracks))?;

    let mut ids: Vec<u64> = tracks.iter().map(|t| t.track_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut rows = vec![("tracks", ids.len().to_string())];
    if let Some(gt) = ground_truth {
        let frames = assoc::eval_frames(&gt, &tracks);
        let m = mota(&frames, cfg.iou_threshold)?;
        let i = idf1(&frames, cfg.iou_threshold)?;
        rows.extend([
            ("MOTA", m.mota.to_string()),
            ("IDF1", i.idf1.to_string()),
            ("FP", m.false_positives.to_string()),
            ("FN", m.false_negatives.to_string()),
            ("IDS", m.id_switches.to_string()),
            ("GT", m.num_gt.to_string()),
            ("IDTP", i.idtp.to_string()),
            ("IDFP", i.idfp.to_string()),
            ("IDFN", i.idfn.to_string()),
        ]);
        out.write(
            "summary.json",
            serde_json::to_string_pretty(&json!({ "MOTA": m.mota, "IDF1": i.idf1, "IDS": m.id_switches }))? + "\n",
        )?;
    }
    out.write("report.tsv", report(&rows))
}
