//! Re-identification (CMC, mAP) and tracking (MOTA, IDF1) metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gallery::RankedList;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Axis-aligned box given by its centre and size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = ((self.x + self.w / 2.0).min(other.x + other.w / 2.0)
            - (self.x - self.w / 2.0).max(other.x - other.w / 2.0))
        .max(0.0);
        let iy = ((self.y + self.h / 2.0).min(other.y + other.h / 2.0)
            - (self.y - self.h / 2.0).max(other.y - other.h / 2.0))
        .max(0.0);
        let inter = ix * iy;
        let union = self.w * self.h + other.w * other.h - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

/// One re-identification query: its true identity and the gallery ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct ReidEvalCase {
    pub query_id: u64,
    pub ranking: RankedList,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cmc {
    pub top1: f64,
    pub top5: f64,
}

/// Fraction of cases whose true identity is within the first `k` ranks.
pub fn top_k(cases: &[ReidEvalCase], k: usize) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::InvalidInput("no evaluation cases".into()));
    }
    let mut hits = 0usize;
    for c in cases {
        let pos = c
            .ranking
            .0
            .iter()
            .position(|&(id, _)| id == c.query_id)
            .ok_or_else(|| Error::InvalidInput(format!("identity {} missing from its ranking", c.query_id)))?;
        if pos < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / cases.len() as f64)
}

pub fn cmc(cases: &[ReidEvalCase]) -> Result<Cmc> {
    Ok(Cmc { top1: top_k(cases, 1)?, top5: top_k(cases, 5)? })
}

/// Non-interpolated average precision of one ranked relevance list.
pub fn average_precision(ranked_relevance: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::InvalidInput("query has no relevant gallery items".into()));
    }
    Ok(sum / hits as f64)
}

/// Mean of per-query average precision.
pub fn mean_average_precision(queries: &[Vec<bool>]) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::InvalidInput("no evaluation queries".into()));
    }
    let mut sum = 0.0;
    for q in queries {
        sum += average_precision(q)?;
    }
    Ok(sum / queries.len() as f64)
}

/// Ground-truth and hypothesis boxes of one frame, keyed by object / track id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackEvalFrame {
    pub gt: Vec<(u64, BBox)>,
    pub hyp: Vec<(u64, BBox)>,
}

impl TrackEvalFrame {
    fn validate(&self) -> Result<()> {
        for side in [&self.gt, &self.hyp] {
            let ids: BTreeSet<u64> = side.iter().map(|e| e.0).collect();
            if ids.len() != side.len() {
                return Err(Error::InvalidInput("duplicate id within a frame".into()));
            }
        }
        Ok(())
    }
}

/// Matching outcome of one frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameMatches {
    /// `(gt_id, hyp_id)` pairs.
    pub matches: Vec<(u64, u64)>,
    pub false_positives: Vec<u64>,
    pub misses: Vec<u64>,
    /// Ground-truth ids whose matched hypothesis changed.
    pub switches: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotResult {
    pub mota: f64,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub id_switches: usize,
    pub num_gt: usize,
    pub frames: Vec<FrameMatches>,
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::InvalidConfig("IoU threshold must be in (0, 1)".into()));
    }
    Ok(())
}

/// CLEAR-MOT accuracy.
///
/// Pairs from the previous frame are kept while their IoU stays at or above
/// the threshold; the rest are matched greedily by descending IoU (ties by
/// ascending gt id, then hypothesis id). A switch is counted when a gt object
/// is matched to a hypothesis other than the one it was last matched to.
pub fn mota(frames: &[TrackEvalFrame], iou_threshold: f64) -> Result<MotResult> {
    check_threshold(iou_threshold)?;
    let mut previous: BTreeMap<u64, u64> = BTreeMap::new();
    let mut last_match: BTreeMap<u64, u64> = BTreeMap::new();
    let mut out = Vec::with_capacity(frames.len());
    let (mut fp, mut fnn, mut ids, mut num_gt) = (0, 0, 0, 0);
    for f in frames {
        f.validate()?;
        num_gt += f.gt.len();
        let hyp: BTreeMap<u64, BBox> = f.hyp.iter().copied().collect();
        let mut used_gt = BTreeSet::new();
        let mut used_hyp = BTreeSet::new();
        let mut fm = FrameMatches::default();
        for &(g, gb) in &f.gt {
            if let Some(&h) = previous.get(&g) {
                if let Some(hb) = hyp.get(&h) {
                    if gb.iou(hb) >= iou_threshold {
                        used_gt.insert(g);
                        used_hyp.insert(h);
                        fm.matches.push((g, h));
                    }
                }
            }
        }
        let mut candidates = Vec::new();
        for &(g, gb) in f.gt.iter().filter(|(g, _)| !used_gt.contains(g)) {
            for &(h, hb) in f.hyp.iter().filter(|(h, _)| !used_hyp.contains(h)) {
                let iou = gb.iou(&hb);
                if iou >= iou_threshold {
                    candidates.push((iou, g, h));
                }
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for (_, g, h) in candidates {
            if used_gt.contains(&g) || used_hyp.contains(&h) {
                continue;
            }
            used_gt.insert(g);
            used_hyp.insert(h);
            fm.matches.push((g, h));
        }
        for &(g, h) in &fm.matches {
            if last_match.get(&g).is_some_and(|&prev| prev != h) {
                fm.switches.push(g);
            }
            last_match.insert(g, h);
        }
        fm.misses = f.gt.iter().map(|e| e.0).filter(|g| !used_gt.contains(g)).collect();
        fm.false_positives = f.hyp.iter().map(|e| e.0).filter(|h| !used_hyp.contains(h)).collect();
        fp += fm.false_positives.len();
        fnn += fm.misses.len();
        ids += fm.switches.len();
        previous = fm.matches.iter().copied().collect();
        out.push(fm);
    }
    if num_gt == 0 {
        return Err(Error::InvalidInput("MOTA is undefined without ground truth".into()));
    }
    Ok(MotResult {
        mota: 1.0 - (fp + fnn + ids) as f64 / num_gt as f64,
        false_positives: fp,
        false_negatives: fnn,
        id_switches: ids,
        num_gt,
        frames: out,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdResult {
    pub idf1: f64,
    pub idtp: usize,
    pub idfp: usize,
    pub idfn: usize,
    /// Optimal `(gt_id, hyp_id)` track pairs.
    pub assignment: Vec<(u64, u64)>,
}

/// Per track pair, the number of frames both are present with IoU at or above the threshold.
pub fn idtp_matrix(frames: &[TrackEvalFrame], iou_threshold: f64) -> Result<(Vec<u64>, Vec<u64>, Vec<Vec<usize>>)> {
    check_threshold(iou_threshold)?;
    let mut gt_ids = BTreeSet::new();
    let mut hyp_ids = BTreeSet::new();
    for f in frames {
        f.validate()?;
        gt_ids.extend(f.gt.iter().map(|e| e.0));
        hyp_ids.extend(f.hyp.iter().map(|e| e.0));
    }
    let gt_ids: Vec<u64> = gt_ids.into_iter().collect();
    let hyp_ids: Vec<u64> = hyp_ids.into_iter().collect();
    let mut m = vec![vec![0usize; hyp_ids.len()]; gt_ids.len()];
    for f in frames {
        for (g, gb) in &f.gt {
            let gi = gt_ids.binary_search(g).expect("collected");
            for (h, hb) in &f.hyp {
                if gb.iou(hb) >= iou_threshold {
                    m[gi][hyp_ids.binary_search(h).expect("collected")] += 1;
                }
            }
        }
    }
    Ok((gt_ids, hyp_ids, m))
}

/// Identity F1 under the track bijection that maximises identity true positives.
pub fn idf1(frames: &[TrackEvalFrame], iou_threshold: f64) -> Result<IdResult> {
    let (gt_ids, hyp_ids, m) = idtp_matrix(frames, iou_threshold)?;
    let total_gt: usize = frames.iter().map(|f| f.gt.len()).sum();
    let total_hyp: usize = frames.iter().map(|f| f.hyp.len()).sum();
    if total_gt + total_hyp == 0 {
        return Err(Error::InvalidInput("IDF1 is undefined for an empty scene".into()));
    }
    let n = gt_ids.len().max(hyp_ids.len());
    let weight = |i: usize, j: usize| {
        if i < gt_ids.len() && j < hyp_ids.len() {
            m[i][j]
        } else {
            0
        }
    };
    let max_w = m.iter().flatten().copied().max().unwrap_or(0) as i64;
    let cost: Vec<Vec<i64>> = (0..n).map(|i| (0..n).map(|j| max_w - weight(i, j) as i64).collect()).collect();
    let cols = hungarian_min(&cost);
    let mut idtp = 0;
    let mut assignment = Vec::new();
    for (i, &j) in cols.iter().enumerate() {
        let w = weight(i, j);
        if w > 0 {
            idtp += w;
            assignment.push((gt_ids[i], hyp_ids[j]));
        }
    }
    Ok(IdResult {
        idf1: 2.0 * idtp as f64 / (total_gt + total_hyp) as f64,
        idtp,
        idfp: total_hyp - idtp,
        idfn: total_gt - idtp,
        assignment,
    })
}

/// Minimum-cost perfect assignment on a square matrix; returns the column of each row.
pub fn hungarian_min(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // potentials over 1-based rows/columns; column 0 is a sentinel
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut min_v = vec![i64::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = i64::MAX;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < min_v[j] {
                        min_v[j] = cur;
                        way[j] = j0;
                    }
                    if min_v[j] < delta {
                        delta = min_v[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        out[row_of[j] - 1] = j - 1;
    }
    out
}

/// Formats `key\tvalue` report lines.
pub fn format_report(rows: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in rows {
        let _ = writeln!(s, "{k}\t{v}");
    }
    s
}

/// Parses `key\tvalue` lines, ignoring blank lines.
pub fn parse_report(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_once('\t')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::InvalidInput(format!("report line {} has no tab", i + 1)))
        })
        .collect()
}
