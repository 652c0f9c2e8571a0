//! Deterministic fixtures shared by the criterion benchmarks in `benches/`.

use thermreid_core::head::{map_to_spaces, HeadParams};
use thermreid_core::{
    AreaRatios, BackboneConfig, DatasetConfig, GalleryDB, GalleryEntry, SpaceEmbeddings, SyntheticBackbone,
};

/// Training azimuths enrolled per identity.
pub const GALLERY_AZIMUTHS: [f64; 4] = [0.0, 45.0, 90.0, 135.0];

/// A gallery of `identities × 4` views embedded by an untrained head, plus a held-out query.
pub struct GalleryFixture {
    pub gallery: GalleryDB,
    pub query: SpaceEmbeddings,
    pub query_ar: AreaRatios,
}

pub fn gallery_fixture(identities: usize, d_space: usize) -> GalleryFixture {
    let ds = DatasetConfig { identities, ..Default::default() };
    let backbone = SyntheticBackbone::new(BackboneConfig::default()).expect("default backbone");
    let params = HeadParams::init(backbone.dim(), d_space, 2, 3);
    let embed = |id: u64, az: f64| {
        map_to_spaces(&params, &backbone.features(&ds.shape(id), az, ds.seed)).expect("matching dims")
    };
    let mut gallery = GalleryDB::new(d_space);
    for id in 0..identities as u64 {
        for az in GALLERY_AZIMUTHS {
            gallery
                .insert(GalleryEntry {
                    identity_id: id,
                    embeddings: embed(id, az),
                    area_ratios: AreaRatios::default(),
                    source: String::new(),
                })
                .expect("unit embeddings");
        }
    }
    GalleryFixture { gallery, query: embed(0, 67.5), query_ar: AreaRatios { front: 0.5, side: 0.5, rear: 0.0 } }
}

/// Dense pseudo-random integer cost matrix for the assignment solver.
pub fn cost_matrix(n: usize) -> Vec<Vec<i64>> {
    (0..n).map(|i| (0..n).map(|j| ((i * 37 + j * 101) % 97) as i64).collect()).collect()
}
