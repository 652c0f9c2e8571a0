//! Four-space embedding head.
//!
//! A backbone feature is projected by four parallel linear maps into the
//! global, front, side and rear spaces and L2-normalised. Training combines an
//! ArcFace identity loss, whose per-space logits are fused with the sample's
//! area ratios, and a per-space triplet loss.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::AreaRatios;
use crate::numerics::{dot, l2_distance_unchecked, norm};
use crate::segnet::ByteReader;

/// Latent spaces in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Global,
    Front,
    Side,
    Rear,
}

impl Space {
    pub const ALL: [Space; 4] = [Space::Global, Space::Front, Space::Side, Space::Rear];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Space::Global => "global",
            Space::Front => "front",
            Space::Side => "side",
            Space::Rear => "rear",
        }
    }

    /// Fusion weight of this space: 1 for global, the matching area ratio otherwise.
    pub fn weight(self, ar: &AreaRatios) -> f64 {
        match self {
            Space::Global => 1.0,
            Space::Front => ar.front,
            Space::Side => ar.side,
            Space::Rear => ar.rear,
        }
    }
}

/// One unit-norm embedding per latent space, indexed by [`Space::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceEmbeddings(pub [Vec<f64>; 4]);

impl SpaceEmbeddings {
    pub fn get(&self, s: Space) -> &[f64] {
        &self.0[s.index()]
    }

    pub fn dim(&self) -> usize {
        self.0[0].len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || self.0.iter().any(|v| v.len() != d) {
            return Err(Error::ShapeMismatch("space embeddings must share a nonzero dimension".into()));
        }
        if self.0.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(())
    }
}

/// Linear map and ArcFace class weights of one space.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceParams {
    /// Row-major `d_space × d_in`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    /// Row-major `num_classes × d_space`; each row is a unit class centre.
    pub class_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub d_in: usize,
    pub d_space: usize,
    pub num_classes: usize,
    pub spaces: [SpaceParams; 4],
}

impl HeadParams {
    pub fn zeros(d_in: usize, d_space: usize, num_classes: usize) -> Self {
        let sp = || SpaceParams {
            weight: vec![0.0; d_space * d_in],
            bias: vec![0.0; d_space],
            class_weights: vec![0.0; num_classes * d_space],
        };
        Self { d_in, d_space, num_classes, spaces: [sp(), sp(), sp(), sp()] }
    }

    /// Xavier-uniform projections, zero biases, random unit class centres.
    pub fn init(d_in: usize, d_space: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(d_in, d_space, num_classes);
        let bound = (6.0 / (d_in + d_space) as f64).sqrt();
        for s in &mut p.spaces {
            s.weight.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
            s.class_weights.iter_mut().for_each(|w| *w = StandardNormal.sample(&mut rng));
        }
        p.normalize_class_weights();
        p
    }

    pub fn normalize_class_weights(&mut self) {
        let d = self.d_space;
        for s in &mut self.spaces {
            for row in s.class_weights.chunks_mut(d) {
                let n = norm(row);
                if n > 0.0 {
                    row.iter_mut().for_each(|x| *x /= n);
                }
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.spaces.iter().map(|s| s.weight.len() + s.bias.len() + s.class_weights.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for s in &self.spaces {
            v.extend_from_slice(&s.weight);
            v.extend_from_slice(&s.bias);
            v.extend_from_slice(&s.class_weights);
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch { expected: self.num_params(), actual: flat.len() });
        }
        let mut off = 0;
        for s in &mut self.spaces {
            for part in [&mut s.weight, &mut s.bias, &mut s.class_weights] {
                let n = part.len();
                part.copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    fn add_scaled(&mut self, other: &HeadParams, scale: f64) {
        for (a, b) in self.spaces.iter_mut().zip(&other.spaces) {
            a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += scale * y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += scale * y);
            a.class_weights.iter_mut().zip(&b.class_weights).for_each(|(x, y)| *x += scale * y);
        }
    }

    fn scale(&mut self, f: f64) {
        for s in &mut self.spaces {
            for x in s.weight.iter_mut().chain(&mut s.bias).chain(&mut s.class_weights) {
                *x *= f;
            }
        }
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.d_in, self.d_space, self.num_classes)
    }
}

/// Pre-normalisation projection of one space: `(h, e = h/|h|, |h|)`.
struct Projection {
    embedding: Vec<f64>,
    norm: f64,
}

fn project(p: &SpaceParams, d_space: usize, feature: &[f64]) -> Result<Projection> {
    let d_in = feature.len();
    let h: Vec<f64> = (0..d_space).map(|r| p.bias[r] + dot(&p.weight[r * d_in..(r + 1) * d_in], feature)).collect();
    let n = norm(&h);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(Projection { embedding: h.iter().map(|x| x / n).collect(), norm: n })
}

/// Backpropagates `d_embedding` through normalisation and the linear map.
fn project_backward(proj: &Projection, feature: &[f64], d_emb: &[f64], grad: &mut SpaceParams) {
    let e = &proj.embedding;
    let ed = dot(e, d_emb);
    let d_in = feature.len();
    for r in 0..e.len() {
        let dh = (d_emb[r] - e[r] * ed) / proj.norm;
        if dh == 0.0 {
            continue;
        }
        grad.bias[r] += dh;
        for (g, x) in grad.weight[r * d_in..(r + 1) * d_in].iter_mut().zip(feature) {
            *g += dh * x;
        }
    }
}

fn check_feature(params: &HeadParams, feature: &[f64]) -> Result<()> {
    if feature.len() != params.d_in {
        return Err(Error::DimensionMismatch { expected: params.d_in, actual: feature.len() });
    }
    Ok(())
}

/// `e_s = normalize(W_s x + b_s)` for every space.
pub fn map_to_spaces(params: &HeadParams, feature: &[f64]) -> Result<SpaceEmbeddings> {
    check_feature(params, feature)?;
    let mut out: [Vec<f64>; 4] = Default::default();
    for (o, sp) in out.iter_mut().zip(&params.spaces) {
        *o = project(sp, params.d_space, feature)?.embedding;
    }
    Ok(SpaceEmbeddings(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArcFaceConfig {
    pub scale: f64,
    /// Additive angular margin in radians.
    pub margin: f64,
}

impl Default for ArcFaceConfig {
    fn default() -> Self {
        Self { scale: 30.0, margin: 0.5 }
    }
}

impl ArcFaceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::InvalidConfig("ArcFace scale must be positive".into()));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::InvalidConfig("ArcFace margin must be in [0, pi/2)".into()));
        }
        Ok(())
    }
}

const ACOS_EPS: f64 = 1e-7;

/// Margin-adjusted target cosine and its derivative with respect to the raw cosine.
///
/// Past `theta + m > pi` the curve `cos(theta) - m sin(m)` is used instead so
/// that a larger margin never raises the target logit.
fn margin_cos(cos: f64, margin: f64) -> (f64, f64) {
    let lo = -1.0 + ACOS_EPS;
    let hi = 1.0 - ACOS_EPS;
    let clamped = cos.clamp(lo, hi);
    let inside = cos > lo && cos < hi;
    let theta = clamped.acos();
    if theta + margin <= std::f64::consts::PI {
        let v = (theta + margin).cos();
        let d = if inside { (theta + margin).sin() / theta.sin() } else { 0.0 };
        (v, d)
    } else {
        (clamped - margin * margin.sin(), if inside { 1.0 } else { 0.0 })
    }
}

/// ArcFace logits of `embedding` against row-major unit class centres.
///
/// With a target the margin is applied to that class only; without one the
/// logits are plain scaled cosines.
pub fn arcface_logits(
    class_weights: &[f64],
    embedding: &[f64],
    cfg: &ArcFaceConfig,
    target: Option<usize>,
) -> Result<Vec<f64>> {
    Ok(arcface_forward(class_weights, embedding, cfg, target)?.0)
}

/// Logits and `d logit_k / d cos_k`.
fn arcface_forward(
    class_weights: &[f64],
    embedding: &[f64],
    cfg: &ArcFaceConfig,
    target: Option<usize>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = embedding.len();
    if d == 0 || !class_weights.len().is_multiple_of(d) {
        return Err(Error::ShapeMismatch("class weights are not a multiple of the embedding size".into()));
    }
    let k = class_weights.len() / d;
    if let Some(t) = target {
        if t >= k {
            return Err(Error::InvalidInput(format!("target class {t} out of range 0..{k}")));
        }
    }
    let mut logits = Vec::with_capacity(k);
    let mut dlogit = Vec::with_capacity(k);
    for (c, row) in class_weights.chunks(d).enumerate() {
        let cos = dot(embedding, row);
        if Some(c) == target {
            let (v, dv) = margin_cos(cos, cfg.margin);
            logits.push(cfg.scale * v);
            dlogit.push(cfg.scale * dv);
        } else {
            logits.push(cfg.scale * cos);
            dlogit.push(cfg.scale);
        }
    }
    Ok((logits, dlogit))
}

fn softmax_ce(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = -(logits[target] - m - sum.ln());
    let grad = exps.iter().enumerate().map(|(k, e)| e / sum - if k == target { 1.0 } else { 0.0 }).collect();
    (loss, grad)
}

/// Cross-entropy over fused logits `z_k = (z_k^g + AR_f z_k^f + AR_s z_k^s + AR_r z_k^r) / 2`
/// with the ArcFace margin applied to the target in every space.
///
/// Area ratios are treated as constants.
pub fn id_loss(
    params: &HeadParams,
    feature: &[f64],
    ar: &AreaRatios,
    target: usize,
    cfg: &ArcFaceConfig,
) -> Result<(f64, HeadParams)> {
    check_feature(params, feature)?;
    let mut grads = params.zeros_like();
    id_loss_accumulate(params, feature, ar, target, cfg, 1.0, &mut grads).map(|l| (l, grads))
}

fn id_loss_accumulate(
    params: &HeadParams,
    feature: &[f64],
    ar: &AreaRatios,
    target: usize,
    cfg: &ArcFaceConfig,
    scale: f64,
    grads: &mut HeadParams,
) -> Result<f64> {
    let k = params.num_classes;
    let d = params.d_space;
    let mut projections = Vec::with_capacity(4);
    let mut fused = vec![0.0; k];
    let mut dlogits = Vec::with_capacity(4);
    for space in Space::ALL {
        let sp = &params.spaces[space.index()];
        let proj = project(sp, d, feature)?;
        let (logits, dl) = arcface_forward(&sp.class_weights, &proj.embedding, cfg, Some(target))?;
        let w = 0.5 * space.weight(ar);
        fused.iter_mut().zip(&logits).for_each(|(f, z)| *f += w * z);
        projections.push(proj);
        dlogits.push(dl);
    }
    let (loss, g) = softmax_ce(&fused, target);
    for space in Space::ALL {
        let w = 0.5 * space.weight(ar);
        if w == 0.0 {
            continue;
        }
        let i = space.index();
        let sp = &params.spaces[i];
        let proj = &projections[i];
        let mut d_emb = vec![0.0; d];
        let gs = &mut grads.spaces[i];
        for c in 0..k {
            let dcos = scale * w * g[c] * dlogits[i][c];
            if dcos == 0.0 {
                continue;
            }
            let row = &sp.class_weights[c * d..(c + 1) * d];
            for j in 0..d {
                d_emb[j] += dcos * row[j];
                gs.class_weights[c * d + j] += dcos * proj.embedding[j];
            }
        }
        project_backward(proj, feature, &d_emb, gs);
    }
    Ok(loss)
}

/// Per-space triplet hinge and embedding gradients `(d_anchor, d_positive, d_negative)`.
///
/// `weights` scales each space's term; the default is all ones.
pub fn triplet_loss(
    anchor: &SpaceEmbeddings,
    positive: &SpaceEmbeddings,
    negative: &SpaceEmbeddings,
    margin: f64,
    weights: [f64; 4],
) -> Result<(f64, [SpaceEmbeddings; 3])> {
    for e in [anchor, positive, negative] {
        e.validate()?;
        if e.dim() != anchor.dim() {
            return Err(Error::DimensionMismatch { expected: anchor.dim(), actual: e.dim() });
        }
    }
    let d = anchor.dim();
    let zero = || SpaceEmbeddings(std::array::from_fn(|_| vec![0.0; d]));
    let mut grads = [zero(), zero(), zero()];
    let mut loss = 0.0;
    for s in Space::ALL {
        let i = s.index();
        let (a, p, n) = (&anchor.0[i], &positive.0[i], &negative.0[i]);
        let d_ap = l2_distance_unchecked(a, p);
        let d_an = l2_distance_unchecked(a, n);
        let term = d_ap - d_an + margin;
        if term <= 0.0 || weights[i] == 0.0 {
            continue;
        }
        loss += weights[i] * term;
        for j in 0..d {
            let gp = if d_ap > 0.0 { weights[i] * (a[j] - p[j]) / d_ap } else { 0.0 };
            let gn = if d_an > 0.0 { weights[i] * (a[j] - n[j]) / d_an } else { 0.0 };
            grads[0].0[i][j] += gp - gn;
            grads[1].0[i][j] -= gp;
            grads[2].0[i][j] += gn;
        }
    }
    Ok((loss, grads))
}

/// Triplet loss of three backbone features through the head, with parameter gradients.
pub fn triplet_loss_params(
    params: &HeadParams,
    features: [&[f64]; 3],
    margin: f64,
    weights: [f64; 4],
) -> Result<(f64, HeadParams)> {
    let mut grads = params.zeros_like();
    let loss = triplet_accumulate(params, features, margin, weights, 1.0, &mut grads)?;
    Ok((loss, grads))
}

fn triplet_accumulate(
    params: &HeadParams,
    features: [&[f64]; 3],
    margin: f64,
    weights: [f64; 4],
    scale: f64,
    grads: &mut HeadParams,
) -> Result<f64> {
    let mut projections: Vec<Vec<Projection>> = Vec::with_capacity(3);
    for f in features {
        check_feature(params, f)?;
        projections.push(params.spaces.iter().map(|sp| project(sp, params.d_space, f)).collect::<Result<_>>()?);
    }
    let emb = |b: usize| SpaceEmbeddings(std::array::from_fn(|s| projections[b][s].embedding.clone()));
    let (loss, egrads) = triplet_loss(&emb(0), &emb(1), &emb(2), margin, weights)?;
    if loss > 0.0 {
        for (b, eg) in egrads.iter().enumerate() {
            for s in 0..4 {
                if eg.0[s].iter().all(|&x| x == 0.0) {
                    continue;
                }
                let d: Vec<f64> = eg.0[s].iter().map(|x| x * scale).collect();
                project_backward(&projections[b][s], features[b], &d, &mut grads.spaces[s]);
            }
        }
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_id: f64,
    pub lambda_triplet: f64,
    pub triplet_margin: f64,
    /// Weight each space's triplet term by the anchor's area ratio.
    pub area_weighted_triplet: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_id: 1.0, lambda_triplet: 1.0, triplet_margin: 0.3, area_weighted_triplet: false }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_id >= 0.0) || !(self.lambda_triplet >= 0.0) {
            return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
        }
        if self.lambda_id == 0.0 && self.lambda_triplet == 0.0 {
            return Err(Error::InvalidConfig("lambda_id and lambda_triplet cannot both be zero".into()));
        }
        if !(self.triplet_margin >= 0.0) {
            return Err(Error::InvalidConfig("triplet margin must be non-negative".into()));
        }
        Ok(())
    }

    fn triplet_weights(&self, anchor_ar: &AreaRatios) -> [f64; 4] {
        if self.area_weighted_triplet {
            Space::ALL.map(|s| s.weight(anchor_ar))
        } else {
            [1.0; 4]
        }
    }
}

/// `λ_ID · L_ID + λ_Triplet · L_Triplet`.
pub fn total_loss(id_loss: f64, triplet_loss: f64, cfg: &LossConfig) -> f64 {
    cfg.lambda_id * id_loss + cfg.lambda_triplet * triplet_loss
}

/// One training example for the head.
#[derive(Debug, Clone)]
pub struct HeadSample {
    pub feature: Vec<f64>,
    pub area_ratios: AreaRatios,
    pub identity_id: u64,
    pub azimuth_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadTrainConfig {
    pub d_space: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub arcface: ArcFaceConfig,
    pub loss: LossConfig,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self {
            d_space: 128,
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 50,
            batch_size: 16,
            seed: 7,
            arcface: ArcFaceConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl HeadTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arcface.validate()?;
        self.loss.validate()?;
        if self.d_space == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("d_space, epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("need learning_rate >= 0 and momentum in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Mean losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub id: f64,
    pub triplet: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct HeadTrainOutcome {
    pub params: HeadParams,
    /// Identity id of each ArcFace class.
    pub class_ids: Vec<u64>,
    pub history: Vec<EpochLosses>,
}

/// Trains the head with momentum SGD on `λ_ID L_ID + λ_Triplet L_Triplet`.
///
/// Each anchor is paired with a random same-identity sample at a different
/// azimuth and a random sample of another identity. Class centres are
/// renormalised after every step.
pub fn train_head(samples: &[HeadSample], cfg: &HeadTrainConfig) -> Result<HeadTrainOutcome> {
    cfg.validate()?;
    let mut class_ids: Vec<u64> = samples.iter().map(|s| s.identity_id).collect();
    class_ids.sort_unstable();
    class_ids.dedup();
    if class_ids.len() < 2 {
        return Err(Error::InvalidInput("head training needs at least 2 identities".into()));
    }
    let d_in = samples[0].feature.len();
    if samples.iter().any(|s| s.feature.len() != d_in) {
        return Err(Error::InvalidInput("inconsistent feature dimensions".into()));
    }
    let labels: Vec<usize> =
        samples.iter().map(|s| class_ids.binary_search(&s.identity_id).expect("known id")).collect();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_ids.len()];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let positives: Vec<Vec<usize>> = (0..samples.len())
        .map(|i| {
            by_class[labels[i]].iter().copied().filter(|&j| samples[j].azimuth_deg != samples[i].azimuth_deg).collect()
        })
        .collect();
    if let Some(i) = positives.iter().position(Vec::is_empty) {
        return Err(Error::InvalidInput(format!(
            "identity {} has fewer than 2 distinct views",
            samples[i].identity_id
        )));
    }

    let mut params = HeadParams::init(d_in, cfg.d_space, class_ids.len(), cfg.seed);
    let mut velocity = params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EAD);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_id, mut sum_trip) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = params.zeros_like();
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = &samples[i];
                if cfg.loss.lambda_id > 0.0 {
                    sum_id += id_loss_accumulate(
                        &params,
                        &s.feature,
                        &s.area_ratios,
                        labels[i],
                        &cfg.arcface,
                        cfg.loss.lambda_id * inv,
                        &mut grads,
                    )?;
                }
                let p = *positives[i].choose(&mut rng).expect("nonempty");
                let neg_class = loop {
                    let c = rng.random_range(0..class_ids.len());
                    if c != labels[i] {
                        break c;
                    }
                };
                let n = *by_class[neg_class].choose(&mut rng).expect("nonempty");
                if cfg.loss.lambda_triplet > 0.0 {
                    sum_trip += triplet_accumulate(
                        &params,
                        [&s.feature, &samples[p].feature, &samples[n].feature],
                        cfg.loss.triplet_margin,
                        cfg.loss.triplet_weights(&s.area_ratios),
                        cfg.loss.lambda_triplet * inv,
                        &mut grads,
                    )?;
                }
            }
            velocity.scale(cfg.momentum);
            velocity.add_scaled(&grads, -cfg.learning_rate);
            params.add_scaled(&velocity, 1.0);
            params.normalize_class_weights();
        }
        let n = samples.len() as f64;
        let (id, triplet) = (sum_id / n, sum_trip / n);
        if !id.is_finite() || !triplet.is_finite() {
            return Err(Error::NonFinite("head training diverged".into()));
        }
        history.push(EpochLosses { id, triplet, total: total_loss(id, triplet, &cfg.loss) });
    }
    Ok(HeadTrainOutcome { params, class_ids, history })
}

const HEAD_MAGIC: &[u8; 8] = b"REIDHD1\0";
const HEAD_VERSION: u32 = 1;
const HEAD_FORMAT: &str = "head";

/// Serialises parameters and the class identity ids.
///
/// Header: magic, version, `d_in`, `d_space`, `K`, the four space names in
/// order, then `K` identity ids. Records follow as length-prefixed name,
/// four `u32` shape entries and `f32` payload.
pub fn encode_head(params: &HeadParams, class_ids: &[u64]) -> Result<Vec<u8>> {
    if class_ids.len() != params.num_classes {
        return Err(Error::DimensionMismatch { expected: params.num_classes, actual: class_ids.len() });
    }
    let mut out = HEAD_MAGIC.to_vec();
    for v in [HEAD_VERSION, params.d_in as u32, params.d_space as u32, params.num_classes as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let put_str = |out: &mut Vec<u8>, s: &str| {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        out.extend_from_slice(s.as_bytes());
    };
    for s in Space::ALL {
        put_str(&mut out, s.name());
    }
    for id in class_ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    for s in Space::ALL {
        let sp = &params.spaces[s.index()];
        for (part, shape, values) in head_records(params, sp) {
            put_str(&mut out, &format!("{}.{part}", s.name()));
            for d in shape {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn head_records<'a>(p: &HeadParams, sp: &'a SpaceParams) -> [(&'static str, [u32; 4], &'a [f64]); 3] {
    let (i, d, k) = (p.d_in as u32, p.d_space as u32, p.num_classes as u32);
    [
        ("weight", [d, i, 1, 1], &sp.weight),
        ("bias", [d, 1, 1, 1], &sp.bias),
        ("class_weights", [k, d, 1, 1], &sp.class_weights),
    ]
}

pub fn decode_head(bytes: &[u8]) -> Result<(HeadParams, Vec<u64>)> {
    if bytes.len() < 8 || &bytes[..8] != HEAD_MAGIC {
        return Err(Error::BadMagic { format: HEAD_FORMAT, reason: "expected REIDHD1 header".into() });
    }
    let mut r = ByteReader::new(bytes, 8, HEAD_FORMAT);
    let version = r.u32()?;
    if version != HEAD_VERSION {
        return Err(Error::BadMagic {
            format: HEAD_FORMAT,
            reason: format!("version {version}, expected {HEAD_VERSION}"),
        });
    }
    let (d_in, d_space, k) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if d_in == 0 || d_space == 0 || k == 0 {
        return Err(r.err(12, "zero dimension in header".into()));
    }
    let read_str = |r: &mut ByteReader| -> Result<String> {
        let at = r.pos;
        let n = r.u32()? as usize;
        String::from_utf8(r.bytes(n)?.to_vec()).map_err(|_| r.err(at, "invalid UTF-8".into()))
    };
    for s in Space::ALL {
        let at = r.pos;
        let name = read_str(&mut r)?;
        if name != s.name() {
            return Err(r.err(at, format!("space order: expected {}, found {name}", s.name())));
        }
    }
    let class_ids = (0..k).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let mut params = HeadParams::zeros(d_in, d_space, k);
    let shapes: Vec<_> = {
        let sp = &params.spaces[0];
        head_records(&params, sp).map(|(part, shape, _)| (part, shape)).to_vec()
    };
    for s in Space::ALL {
        for (idx, (part, shape)) in shapes.iter().enumerate() {
            let at = r.pos;
            let name = read_str(&mut r)?;
            let want = format!("{}.{part}", s.name());
            if name != want {
                return Err(r.err(at, format!("expected record {want}, found {name}")));
            }
            let at = r.pos;
            let got = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
            if got != *shape {
                return Err(r.err(at, format!("{want} shape {got:?}, expected {shape:?}")));
            }
            let sp = &mut params.spaces[s.index()];
            let dst = match idx {
                0 => &mut sp.weight,
                1 => &mut sp.bias,
                _ => &mut sp.class_weights,
            };
            for v in dst.iter_mut() {
                *v = r.f32()? as f64;
            }
        }
    }
    if r.remaining() != 0 {
        return Err(r.err(r.pos, "trailing bytes".into()));
    }
    Ok((params, class_ids))
}

pub fn save_head(params: &HeadParams, class_ids: &[u64], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_head(params, class_ids)?).map_err(|e| Error::io(path, e))
}

pub fn load_head(path: impl AsRef<Path>) -> Result<(HeadParams, Vec<u64>)> {
    let path = path.as_ref();
    decode_head(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
