//! Two-round detection-to-tracklet association.
//!
//! Round 1 greedily maps detections to the nearest predicted tracklet centre
//! within a radius; round 2 matches what remains by embedding cosine
//! similarity. Motion uses a constant-velocity model.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{BBox, TrackEvalFrame};
use crate::numerics::cosine_similarity;

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame: u64,
    pub center: [f64; 2],
    pub size: [f64; 2],
    pub confidence: f64,
    pub embedding: Vec<f64>,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        if !(self.size[0] > 0.0 && self.size[1] > 0.0) {
            return Err(Error::InvalidInput(format!("detection in frame {} has non-positive size", self.frame)));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::InvalidInput(format!("confidence {} outside [0, 1]", self.confidence)));
        }
        if self.center.iter().chain(&self.embedding).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("detection in frame {}", self.frame)));
        }
        Ok(())
    }

    pub fn bbox(&self) -> BBox {
        BBox::new(self.center[0], self.center[1], self.size[0], self.size[1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub track_id: u64,
    pub last_center: [f64; 2],
    pub last_size: [f64; 2],
    /// Pixels per frame.
    pub velocity: [f64; 2],
    pub embedding: Vec<f64>,
    pub age_since_seen: u64,
    /// `(frame, center, size)` of every matched detection.
    pub history: Vec<(u64, [f64; 2], [f64; 2])>,
}

impl Tracklet {
    /// Expected centre in the next frame: the last centre advanced by the
    /// velocity once per frame since it was last seen.
    pub fn predict(&self) -> [f64; 2] {
        let steps = (self.age_since_seen + 1) as f64;
        [self.last_center[0] + self.velocity[0] * steps, self.last_center[1] + self.velocity[1] * steps]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssocConfig {
    /// Round-1 gating radius in pixels.
    pub radius: f64,
    /// Round-2 minimum cosine similarity.
    pub cosine_threshold: f64,
    pub max_age: u64,
    pub min_confidence: f64,
    /// Disable to get the distance-only baseline.
    pub second_round: bool,
    /// Weight of the previous embedding in the running mean.
    pub embedding_momentum: f64,
}

impl Default for AssocConfig {
    fn default() -> Self {
        Self {
            radius: 50.0,
            cosine_threshold: 0.5,
            max_age: 10,
            min_confidence: 0.3,
            second_round: true,
            embedding_momentum: 0.9,
        }
    }
}

impl AssocConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(Error::InvalidConfig("radius must be positive".into()));
        }
        if !(self.cosine_threshold > -1.0 && self.cosine_threshold < 1.0) {
            return Err(Error::InvalidConfig("cosine_threshold must be in (-1, 1)".into()));
        }
        if self.max_age < 1 {
            return Err(Error::InvalidConfig("max_age must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.min_confidence) || !(0.0..=1.0).contains(&self.embedding_momentum) {
            return Err(Error::InvalidConfig("min_confidence and embedding_momentum must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Round {
    Distance,
    Appearance,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignment {
    /// `(tracklet index, detection index, round)`.
    pub matches: Vec<(usize, usize, Round)>,
    pub unmatched_tracklets: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// Two-round greedy assignment of one frame's detections to tracklets.
///
/// Round 1 admits pairs in ascending centre distance up to `radius`; round 2
/// admits remaining pairs in descending cosine similarity down to
/// `cosine_threshold`. Ties go to the lower track id, then detection index.
pub fn associate(tracklets: &[Tracklet], detections: &[Detection], cfg: &AssocConfig) -> Assignment {
    let mut track_used = vec![false; tracklets.len()];
    let mut det_used = vec![false; detections.len()];
    let mut matches = Vec::new();

    let mut pairs = Vec::new();
    for (ti, t) in tracklets.iter().enumerate() {
        let p = t.predict();
        for (di, d) in detections.iter().enumerate() {
            let dist = ((p[0] - d.center[0]).powi(2) + (p[1] - d.center[1]).powi(2)).sqrt();
            if dist <= cfg.radius {
                pairs.push((dist, t.track_id, di, ti));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for (_, _, di, ti) in pairs {
        if !track_used[ti] && !det_used[di] {
            track_used[ti] = true;
            det_used[di] = true;
            matches.push((ti, di, Round::Distance));
        }
    }

    if cfg.second_round {
        let mut pairs = Vec::new();
        for (ti, t) in tracklets.iter().enumerate().filter(|(i, _)| !track_used[*i]) {
            for (di, d) in detections.iter().enumerate().filter(|(i, _)| !det_used[*i]) {
                // zero or mismatched embeddings cannot match by appearance
                if let Ok(sim) = cosine_similarity(&t.embedding, &d.embedding) {
                    if sim >= cfg.cosine_threshold {
                        pairs.push((sim, t.track_id, di, ti));
                    }
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for (_, _, di, ti) in pairs {
            if !track_used[ti] && !det_used[di] {
                track_used[ti] = true;
                det_used[di] = true;
                matches.push((ti, di, Round::Appearance));
            }
        }
    }

    Assignment {
        matches,
        unmatched_tracklets: (0..tracklets.len()).filter(|&i| !track_used[i]).collect(),
        unmatched_detections: (0..detections.len()).filter(|&i| !det_used[i]).collect(),
    }
}

/// A track reported for one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackOutput {
    pub frame: u64,
    pub track_id: u64,
    pub center: [f64; 2],
    pub size: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: AssocConfig,
    tracklets: Vec<Tracklet>,
    next_id: u64,
}

impl Tracker {
    pub fn new(cfg: AssocConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, tracklets: Vec::new(), next_id: 0 })
    }

    pub fn tracklets(&self) -> &[Tracklet] {
        &self.tracklets
    }

    pub fn config(&self) -> &AssocConfig {
        &self.cfg
    }

    /// Processes one frame and returns the tracks matched or born in it.
    pub fn step(&mut self, frame: u64, detections: &[Detection]) -> Result<Vec<TrackOutput>> {
        for d in detections {
            d.validate()?;
        }
        let dets: Vec<&Detection> = detections.iter().filter(|d| d.confidence >= self.cfg.min_confidence).collect();
        let owned: Vec<Detection> = dets.iter().map(|d| (*d).clone()).collect();
        let a = associate(&self.tracklets, &owned, &self.cfg);
        let m = self.cfg.embedding_momentum;
        let mut out = Vec::new();
        for &(ti, di, _) in &a.matches {
            let d = &owned[di];
            let t = &mut self.tracklets[ti];
            let elapsed = (t.age_since_seen + 1) as f64;
            t.velocity = [(d.center[0] - t.last_center[0]) / elapsed, (d.center[1] - t.last_center[1]) / elapsed];
            t.last_center = d.center;
            t.last_size = d.size;
            t.age_since_seen = 0;
            if t.embedding.len() == d.embedding.len() {
                t.embedding.iter_mut().zip(&d.embedding).for_each(|(e, x)| *e = m * *e + (1.0 - m) * x);
            } else {
                t.embedding = d.embedding.clone();
            }
            t.history.push((frame, d.center, d.size));
            out.push(TrackOutput { frame, track_id: t.track_id, center: d.center, size: d.size });
        }
        for &ti in &a.unmatched_tracklets {
            self.tracklets[ti].age_since_seen += 1;
        }
        let max_age = self.cfg.max_age;
        self.tracklets.retain(|t| t.age_since_seen <= max_age);
        for &di in &a.unmatched_detections {
            let d = &owned[di];
            let id = self.next_id;
            self.next_id += 1;
            self.tracklets.push(Tracklet {
                track_id: id,
                last_center: d.center,
                last_size: d.size,
                velocity: [0.0, 0.0],
                embedding: d.embedding.clone(),
                age_since_seen: 0,
                history: vec![(frame, d.center, d.size)],
            });
            out.push(TrackOutput { frame, track_id: id, center: d.center, size: d.size });
        }
        out.sort_by_key(|o| o.track_id);
        Ok(out)
    }

    /// Runs every frame from the first to the last detection frame.
    pub fn run(&mut self, detections: &[Detection]) -> Result<Vec<TrackOutput>> {
        let mut sorted: Vec<&Detection> = detections.iter().collect();
        sorted.sort_by_key(|d| d.frame);
        let (Some(first), Some(last)) = (sorted.first(), sorted.last()) else {
            return Ok(Vec::new());
        };
        let (first, last) = (first.frame, last.frame);
        let mut out = Vec::new();
        let mut i = 0;
        for frame in first..=last {
            let start = i;
            while i < sorted.len() && sorted[i].frame == frame {
                i += 1;
            }
            let frame_dets: Vec<Detection> = sorted[start..i].iter().map(|d| (*d).clone()).collect();
            out.extend(self.step(frame, &frame_dets)?);
        }
        Ok(out)
    }
}

/// Parses detection TSV: `frame x y w h confidence` followed either by one
/// column per embedding value or a single `hex:` column of little-endian
/// `f32`s. `(x, y)` is the box centre. Lines starting with `#` are skipped.
pub fn parse_detections(text: &str) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |why: String| Error::InvalidInput(format!("detections line {}: {why}", ln + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 6 {
            return Err(bad(format!("expected at least 6 columns, found {}", cols.len())));
        }
        let num =
            |i: usize| cols[i].trim().parse::<f64>().map_err(|_| bad(format!("column {} is not a number", i + 1)));
        let frame = cols[0].trim().parse::<u64>().map_err(|_| bad("frame is not an integer".into()))?;
        let embedding = match cols.get(6) {
            Some(c) if cols.len() == 7 && c.starts_with("hex:") => decode_hex_f32(&c[4..]).map_err(bad)?,
            _ => (6..cols.len()).map(num).collect::<Result<_>>()?,
        };
        let d =
            Detection { frame, center: [num(1)?, num(2)?], size: [num(3)?, num(4)?], confidence: num(5)?, embedding };
        d.validate().map_err(|e| bad(e.to_string()))?;
        out.push(d);
    }
    Ok(out)
}

fn decode_hex_f32(s: &str) -> std::result::Result<Vec<f64>, String> {
    if !s.len().is_multiple_of(8) {
        return Err("hex embedding length is not a multiple of 8".into());
    }
    (0..s.len() / 8)
        .map(|i| {
            let mut b = [0u8; 4];
            for (k, byte) in b.iter_mut().enumerate() {
                let at = i * 8 + k * 2;
                *byte = u8::from_str_radix(s.get(at..at + 2).ok_or("bad hex")?, 16)
                    .map_err(|_| "bad hex digit".to_string())?;
            }
            Ok(f32::from_le_bytes(b) as f64)
        })
        .collect()
}

fn encode_hex_f32(v: &[f64]) -> String {
    let mut s = String::with_capacity(v.len() * 8);
    for &x in v {
        for b in (x as f32).to_le_bytes() {
            let _ = write!(s, "{b:02x}");
        }
    }
    s
}

pub fn format_detections(dets: &[Detection], hex: bool) -> String {
    let mut s = String::new();
    for d in dets {
        let _ =
            write!(s, "{}\t{}\t{}\t{}\t{}\t{}", d.frame, d.center[0], d.center[1], d.size[0], d.size[1], d.confidence);
        if hex {
            let _ = write!(s, "\thex:{}", encode_hex_f32(&d.embedding));
        } else {
            for x in &d.embedding {
                let _ = write!(s, "\t{x}");
            }
        }
        s.push('\n');
    }
    s
}

pub fn load_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    parse_detections(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Track TSV: `frame track_id x y w h` with `(x, y)` the box centre.
pub fn format_tracks(tracks: &[TrackOutput]) -> String {
    let mut s = String::new();
    for t in tracks {
        let _ =
            writeln!(s, "{}\t{}\t{}\t{}\t{}\t{}", t.frame, t.track_id, t.center[0], t.center[1], t.size[0], t.size[1]);
    }
    s
}

pub fn parse_tracks(text: &str) -> Result<Vec<TrackOutput>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::InvalidInput(format!("tracks line {}: expected frame, id, x, y, w, h", ln + 1));
        let cols: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
        if cols.len() != 6 {
            return Err(bad());
        }
        let f = |i: usize| cols[i].trim().parse::<f64>().map_err(|_| bad());
        out.push(TrackOutput {
            frame: cols[0].trim().parse().map_err(|_| bad())?,
            track_id: cols[1].trim().parse().map_err(|_| bad())?,
            center: [f(2)?, f(3)?],
            size: [f(4)?, f(5)?],
        });
    }
    Ok(out)
}

/// Groups ground-truth and hypothesis tracks into per-frame evaluation records.
pub fn eval_frames(gt: &[TrackOutput], hyp: &[TrackOutput]) -> Vec<TrackEvalFrame> {
    let last = gt.iter().chain(hyp).map(|t| t.frame).max();
    let first = gt.iter().chain(hyp).map(|t| t.frame).min();
    let (Some(first), Some(last)) = (first, last) else {
        return Vec::new();
    };
    let mut frames = vec![TrackEvalFrame::default(); (last - first + 1) as usize];
    let bb = |t: &TrackOutput| BBox::new(t.center[0], t.center[1], t.size[0], t.size[1]);
    for t in gt {
        frames[(t.frame - first) as usize].gt.push((t.track_id, bb(t)));
    }
    for t in hyp {
        frames[(t.frame - first) as usize].hyp.push((t.track_id, bb(t)));
    }
    frames
}

/// Scripted scenes with known ground truth.
pub mod scenes {
    use super::*;

    /// Ground-truth objects and the detections observed of them.
    #[derive(Debug, Clone)]
    pub struct Scene {
        pub ground_truth: Vec<TrackOutput>,
        pub detections: Vec<Detection>,
    }

    fn one_hot(dim: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    /// Two objects approach each other along a line, disappear for eight
    /// frames while veering apart vertically, and reappear 100 px from where
    /// constant-velocity prediction expects them. Their embeddings are orthogonal.
    pub fn crossing() -> Scene {
        let size = [20.0, 20.0];
        let pos = |obj: usize, t: u64| -> [f64; 2] {
            let tf = t as f64;
            let (x0, vx, y_end) = if obj == 0 { (100.0, 5.0, 200.0) } else { (400.0, -5.0, 0.0) };
            let ramp = ((tf - 19.0) / 9.0).clamp(0.0, 1.0);
            [x0 + vx * tf, 100.0 + (y_end - 100.0) * ramp]
        };
        let hidden = 20..28;
        let mut gt = Vec::new();
        let mut detections = Vec::new();
        for t in 0..50u64 {
            for obj in 0..2 {
                let c = pos(obj, t);
                gt.push(TrackOutput { frame: t, track_id: obj as u64, center: c, size });
                if !hidden.contains(&t) {
                    detections.push(Detection {
                        frame: t,
                        center: c,
                        size,
                        confidence: 0.9,
                        embedding: one_hot(8, obj),
                    });
                }
            }
        }
        Scene { ground_truth: gt, detections }
    }

    /// Four objects in noiseless constant-velocity motion for 100 frames,
    /// always at least 60 px apart.
    pub fn linear(frames: u64) -> Scene {
        let starts = [
            ([50.0, 50.0], [2.0, 0.5]),
            ([50.0, 400.0], [2.0, -0.5]),
            ([500.0, 120.0], [-1.5, 1.0]),
            ([300.0, 600.0], [0.0, -1.0]),
        ];
        let size = [24.0, 16.0];
        let mut gt = Vec::new();
        let mut detections = Vec::new();
        for t in 0..frames {
            for (i, (p0, v)) in starts.iter().enumerate() {
                let c = [p0[0] + v[0] * t as f64, p0[1] + v[1] * t as f64];
                gt.push(TrackOutput { frame: t, track_id: i as u64, center: c, size });
                detections.push(Detection { frame: t, center: c, size, confidence: 1.0, embedding: one_hot(4, i) });
            }
        }
        Scene { ground_truth: gt, detections }
    }
}
