//! Identity gallery, view-weighted distance fusion and ranking.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::{Arc, PoisonError, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{Space, SpaceEmbeddings};
use crate::masks::AreaRatios;
use crate::numerics::l2_distance_unchecked;
use crate::segnet::ByteReader;

pub const DEFAULT_ENROLL_THRESHOLD: f64 = 0.35;

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryEntry {
    pub identity_id: u64,
    pub embeddings: SpaceEmbeddings,
    /// Area ratios of the gallery image; stored but not used for ranking.
    pub area_ratios: AreaRatios,
    pub source: String,
}

/// How per-space distances are combined into one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// `(D_g + AR_f D_f + AR_s D_s + AR_r D_r) / 2`.
    #[default]
    AllViews,
    /// `(D_g + AR_x D_x) / 2` for the query's largest view `x` only.
    LargestView,
    /// `D_g / 2`.
    GlobalOnly,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::AllViews, FusionMode::LargestView, FusionMode::GlobalOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::AllViews => "all_views",
            FusionMode::LargestView => "largest_view",
            FusionMode::GlobalOnly => "global_only",
        }
    }

    /// Fuses `[D_global, D_front, D_side, D_rear]` with the query's area ratios.
    pub fn fuse(self, d: [f64; 4], ar: &AreaRatios) -> f64 {
        match self {
            FusionMode::AllViews => (d[0] + d[1] * ar.front + d[2] * ar.side + d[3] * ar.rear) / 2.0,
            FusionMode::LargestView => {
                let a = ar.as_array();
                // first maximum wins: front, then side, then rear
                let mut x = 0;
                for i in 1..3 {
                    if a[i] > a[x] {
                        x = i;
                    }
                }
                (d[0] + d[x + 1] * a[x]) / 2.0
            }
            FusionMode::GlobalOnly => d[0] / 2.0,
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown fusion mode {s:?}")))
    }
}

/// Identities in ascending fused distance; ties broken by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList(pub Vec<(u64, f64)>);

impl RankedList {
    pub fn best(&self) -> Option<(u64, f64)> {
        self.0.first().copied()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.0.iter().map(|&(id, _)| id).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReidDecision {
    Matched(u64),
    Enrolled(u64),
}

impl ReidDecision {
    pub fn identity_id(self) -> u64 {
        match self {
            ReidDecision::Matched(id) | ReidDecision::Enrolled(id) => id,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryDB {
    d_space: usize,
    groups: BTreeMap<u64, Vec<GalleryEntry>>,
}

fn per_space_distances(q: &SpaceEmbeddings, e: &SpaceEmbeddings) -> [f64; 4] {
    Space::ALL.map(|s| l2_distance_unchecked(q.get(s), e.get(s)))
}

impl GalleryDB {
    pub fn new(d_space: usize) -> Self {
        Self { d_space, groups: BTreeMap::new() }
    }

    pub fn d_space(&self) -> usize {
        self.d_space
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        self.groups.len()
    }

    pub fn num_entries(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }

    pub fn identities(&self) -> impl Iterator<Item = u64> + '_ {
        self.groups.keys().copied()
    }

    /// Entries grouped by ascending identity id, in insertion order within a group.
    pub fn entries(&self) -> impl Iterator<Item = &GalleryEntry> {
        self.groups.values().flatten()
    }

    pub fn entries_of(&self, id: u64) -> Option<&[GalleryEntry]> {
        self.groups.get(&id).map(Vec::as_slice)
    }

    fn check_query(&self, q: &SpaceEmbeddings) -> Result<()> {
        q.validate()?;
        if q.dim() != self.d_space {
            return Err(Error::DimensionMismatch { expected: self.d_space, actual: q.dim() });
        }
        Ok(())
    }

    pub fn insert(&mut self, entry: GalleryEntry) -> Result<()> {
        self.check_query(&entry.embeddings)?;
        for s in Space::ALL {
            let n = crate::numerics::norm(entry.embeddings.get(s));
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidInput(format!("{} embedding has norm {n}, expected 1", s.name())));
            }
        }
        AreaRatios::new(entry.area_ratios.front, entry.area_ratios.side, entry.area_ratios.rear)?;
        self.groups.entry(entry.identity_id).or_default().push(entry);
        Ok(())
    }

    pub fn remove_identity(&mut self, id: u64) -> Result<Vec<GalleryEntry>> {
        self.groups.remove(&id).ok_or(Error::UnknownIdentity(id))
    }

    /// Smallest id strictly greater than every enrolled id.
    pub fn next_identity_id(&self) -> u64 {
        self.groups.keys().next_back().map_or(0, |m| m + 1)
    }

    /// Per-space identity distances `D_s(ID) = min_entries ‖q_s − e_s‖`.
    pub fn identity_space_distances(&self, q: &SpaceEmbeddings, id: u64) -> Result<[f64; 4]> {
        self.check_query(q)?;
        let entries = self.groups.get(&id).ok_or(Error::UnknownIdentity(id))?;
        Ok(Self::min_distances(q, entries))
    }

    fn min_distances(q: &SpaceEmbeddings, entries: &[GalleryEntry]) -> [f64; 4] {
        let mut best = [f64::INFINITY; 4];
        for e in entries {
            let d = per_space_distances(q, &e.embeddings);
            for i in 0..4 {
                best[i] = best[i].min(d[i]);
            }
        }
        best
    }

    /// `{D_g + D_f AR_f + D_s AR_s + D_r AR_r} / 2` with the query's area ratios.
    pub fn distance_total(&self, q: &SpaceEmbeddings, q_ar: &AreaRatios, id: u64) -> Result<f64> {
        self.distance_with(q, q_ar, id, FusionMode::AllViews)
    }

    pub fn distance_with(&self, q: &SpaceEmbeddings, q_ar: &AreaRatios, id: u64, mode: FusionMode) -> Result<f64> {
        Ok(mode.fuse(self.identity_space_distances(q, id)?, q_ar))
    }

    pub fn rank(&self, q: &SpaceEmbeddings, q_ar: &AreaRatios) -> Result<RankedList> {
        self.rank_with(q, q_ar, FusionMode::AllViews)
    }

    pub fn rank_with(&self, q: &SpaceEmbeddings, q_ar: &AreaRatios, mode: FusionMode) -> Result<RankedList> {
        self.check_query(q)?;
        if self.groups.is_empty() {
            return Err(Error::EmptyGallery);
        }
        let mut out: Vec<(u64, f64)> =
            self.groups.iter().map(|(&id, entries)| (id, mode.fuse(Self::min_distances(q, entries), q_ar))).collect();
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        Ok(RankedList(out))
    }

    /// Fused distance to every individual entry, in [`Self::entries`] order.
    pub fn entry_distances(&self, q: &SpaceEmbeddings, q_ar: &AreaRatios, mode: FusionMode) -> Result<Vec<(u64, f64)>> {
        self.check_query(q)?;
        Ok(self.entries().map(|e| (e.identity_id, mode.fuse(per_space_distances(q, &e.embeddings), q_ar))).collect())
    }

    /// Matches the query if the best fused distance is within `threshold`,
    /// otherwise enrolls it under a fresh identity id.
    pub fn reid(
        &mut self,
        q: &SpaceEmbeddings,
        q_ar: &AreaRatios,
        threshold: f64,
        source: &str,
    ) -> Result<ReidDecision> {
        if !(threshold > 0.0) {
            return Err(Error::InvalidConfig("enroll threshold must be positive".into()));
        }
        self.check_query(q)?;
        if !self.is_empty() {
            let (id, d) = self.rank(q, q_ar)?.best().expect("nonempty");
            if d <= threshold {
                return Ok(ReidDecision::Matched(id));
            }
        }
        let id = self.next_identity_id();
        self.insert(GalleryEntry {
            identity_id: id,
            embeddings: q.clone(),
            area_ratios: *q_ar,
            source: source.to_string(),
        })?;
        Ok(ReidDecision::Enrolled(id))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = GALLERY_MAGIC.to_vec();
        out.extend_from_slice(&GALLERY_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.d_space as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_entries() as u64).to_le_bytes());
        for e in self.entries() {
            out.extend_from_slice(&e.identity_id.to_le_bytes());
            for s in Space::ALL {
                for &v in e.embeddings.get(s) {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            for v in e.area_ratios.as_array() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
            out.extend_from_slice(&(e.source.len() as u32).to_le_bytes());
            out.extend_from_slice(e.source.as_bytes());
        }
        out
    }

    /// Decodes a gallery file. Stored values are `f32`, so entries are
    /// validated for finiteness and ratio range but not renormalised.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != GALLERY_MAGIC {
            return Err(Error::BadMagic { format: GALLERY_FORMAT, reason: "expected REIDGAL1 header".into() });
        }
        let mut r = ByteReader::new(bytes, 8, GALLERY_FORMAT);
        let version = r.u32()?;
        if version != GALLERY_VERSION {
            return Err(Error::BadMagic {
                format: GALLERY_FORMAT,
                reason: format!("version {version}, expected {GALLERY_VERSION}"),
            });
        }
        let d = r.u32()? as usize;
        if d == 0 {
            return Err(r.err(12, "zero D_space".into()));
        }
        let count = r.u64()?;
        let mut db = GalleryDB::new(d);
        for _ in 0..count {
            let at = r.pos;
            let identity_id = r.u64()?;
            let mut emb: [Vec<f64>; 4] = Default::default();
            for v in &mut emb {
                *v = (0..d).map(|_| r.f32().map(f64::from)).collect::<Result<_>>()?;
            }
            let ar = [r.f32()?, r.f32()?, r.f32()?].map(f64::from);
            let area_ratios = AreaRatios::new(ar[0], ar[1], ar[2]).map_err(|e| r.err(at, e.to_string()))?;
            let n = r.u32()? as usize;
            let tag_at = r.pos;
            let source =
                String::from_utf8(r.bytes(n)?.to_vec()).map_err(|_| r.err(tag_at, "invalid UTF-8 tag".into()))?;
            let embeddings = SpaceEmbeddings(emb);
            embeddings.validate().map_err(|e| r.err(at, e.to_string()))?;
            db.groups.entry(identity_id).or_default().push(GalleryEntry {
                identity_id,
                embeddings,
                area_ratios,
                source,
            });
        }
        if r.remaining() != 0 {
            return Err(r.err(r.pos, "trailing bytes".into()));
        }
        Ok(db)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Loads a gallery and requires a specific embedding dimension.
    pub fn load_expecting(path: impl AsRef<Path>, d_space: usize) -> Result<Self> {
        let db = Self::load(path)?;
        if db.d_space != d_space {
            return Err(Error::DimensionMismatch { expected: d_space, actual: db.d_space });
        }
        Ok(db)
    }
}

const GALLERY_MAGIC: &[u8; 8] = b"REIDGAL1";
const GALLERY_VERSION: u32 = 1;
const GALLERY_FORMAT: &str = "gallery";

/// Snapshot-based shared gallery: readers clone an `Arc` of the current
/// database, writers replace it under an exclusive lock.
#[derive(Debug)]
pub struct SharedGallery {
    current: RwLock<Arc<GalleryDB>>,
}

impl SharedGallery {
    pub fn new(db: GalleryDB) -> Self {
        Self { current: RwLock::new(Arc::new(db)) }
    }

    pub fn snapshot(&self) -> Arc<GalleryDB> {
        self.current.read().unwrap_or_else(PoisonError::into_inner).clone()
    }

    /// Applies `f` to a copy of the current database and publishes the result atomically.
    pub fn update<T>(&self, f: impl FnOnce(&mut GalleryDB) -> Result<T>) -> Result<T> {
        let mut guard = self.current.write().unwrap_or_else(PoisonError::into_inner);
        let mut next = (**guard).clone();
        let out = f(&mut next)?;
        *guard = Arc::new(next);
        Ok(out)
    }

    pub fn reid(&self, q: &SpaceEmbeddings, q_ar: &AreaRatios, threshold: f64, source: &str) -> Result<ReidDecision> {
        self.update(|db| db.reid(q, q_ar, threshold, source))
    }
}
