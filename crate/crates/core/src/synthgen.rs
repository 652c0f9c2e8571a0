//! Deterministic procedural vessels, silhouette renders with ground-truth
//! foreground/view masks, and a synthetic stand-in for a pretrained backbone.
//!
//! Vessel frame: `+x` points to the bow, `y` across the beam, `z` up. The
//! camera is orthographic at a small fixed elevation. Azimuth 0° looks at the
//! bow, 90° is beam-on and 180° looks at the stern.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{compute_area_ratios, load_mask, save_mask, save_pgm, AreaRatios, BitMask, GrayImage, ViewMaskSet};

/// Deck-house box standing on the hull top.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuperBox {
    /// Centre along the hull (`x`).
    pub offset: f64,
    /// Length, width and height.
    pub size: [f64; 3],
}

/// Rectangular cutout in the sheer line spanning the full beam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Notch {
    pub offset: f64,
    pub width: f64,
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselShape {
    pub identity_id: u64,
    pub hull_length: f64,
    pub hull_beam: f64,
    pub hull_height: f64,
    pub superstructure: Vec<SuperBox>,
    pub bow_rake_deg: f64,
    pub notches: Vec<Notch>,
}

const LENGTH_RANGE: (f64, f64) = (8.0, 12.0);
const BEAM_RANGE: (f64, f64) = (2.5, 4.0);
const HEIGHT_RANGE: (f64, f64) = (1.0, 1.8);
const RAKE_RANGE: (f64, f64) = (10.0, 40.0);
const MAX_BOXES: usize = 4;
const MAX_NOTCHES: usize = 4;

/// Length of [`VesselShape::descriptor`].
pub const DESCRIPTOR_LEN: usize = 5 + 4 * MAX_BOXES + 3 * MAX_NOTCHES;
/// The leading descriptor entries that are visible from any viewpoint.
pub const COARSE_DESCRIPTOR_LEN: usize = 4;

fn unit(v: f64, (lo, hi): (f64, f64)) -> f64 {
    2.0 * (v - lo) / (hi - lo) - 1.0
}

/// Builds a random vessel from `seed`. The identity id is the seed itself.
pub fn make_identity(seed: u64) -> VesselShape {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |(lo, hi): (f64, f64)| rng.random_range(lo..hi);
    let hull_length = r(LENGTH_RANGE);
    let hull_beam = r(BEAM_RANGE);
    let hull_height = r(HEIGHT_RANGE);
    let bow_rake_deg = r(RAKE_RANGE);
    let n_boxes = r((1.0, MAX_BOXES as f64 + 1.0)) as usize;
    let half = hull_length / 2.0;
    let superstructure = (0..n_boxes)
        .map(|_| {
            let len = r((0.8, 2.8));
            let offset = r((-half + len / 2.0 + 0.3, half - len / 2.0 - 0.8));
            let width = r((0.45, 0.9)) * hull_beam;
            let height = r((0.5, 1.8));
            SuperBox { offset, size: [len, width, height] }
        })
        .collect();
    let n_notches = r((1.0, MAX_NOTCHES as f64 + 1.0)) as usize;
    let notches = (0..n_notches)
        .map(|_| {
            let width = r((0.3, 1.0));
            Notch { offset: r((-half + 0.5, half - 1.0)), width, depth: r((0.2, 0.5)) * hull_height }
        })
        .collect();
    VesselShape { identity_id: seed, hull_length, hull_beam, hull_height, superstructure, bow_rake_deg, notches }
}

/// Seed for identity `index` of a dataset generated with `dataset_seed`.
pub fn identity_seed(dataset_seed: u64, index: u64) -> u64 {
    splitmix(dataset_seed ^ splitmix(index.wrapping_add(0x5EED)))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl VesselShape {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.hull_length, self.hull_beam, self.hull_height];
        if dims.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::InvalidInput("hull dimensions must be positive".into()));
        }
        if self.superstructure.is_empty() || self.superstructure.len() > MAX_BOXES {
            return Err(Error::InvalidInput(format!(
                "{} superstructure boxes, expected 1..={MAX_BOXES}",
                self.superstructure.len()
            )));
        }
        if self.notches.len() > MAX_NOTCHES {
            return Err(Error::InvalidInput("too many notches".into()));
        }
        if self.superstructure.iter().any(|b| b.size.iter().any(|s| !(*s > 0.0))) {
            return Err(Error::InvalidInput("superstructure sizes must be positive".into()));
        }
        Ok(())
    }

    /// Fixed-length shape descriptor with entries roughly in `[-1, 1]`.
    /// Absent boxes and notches are zero-padded.
    pub fn descriptor(&self) -> Vec<f64> {
        let mut d = Vec::with_capacity(DESCRIPTOR_LEN);
        d.push(unit(self.hull_length, LENGTH_RANGE));
        d.push(unit(self.hull_beam, BEAM_RANGE));
        d.push(unit(self.hull_height, HEIGHT_RANGE));
        d.push(unit(self.bow_rake_deg, RAKE_RANGE));
        d.push(unit(self.superstructure.len() as f64, (1.0, MAX_BOXES as f64)));
        let half = self.hull_length / 2.0;
        for i in 0..MAX_BOXES {
            match self.superstructure.get(i) {
                Some(b) => d.extend([
                    b.offset / half,
                    unit(b.size[0], (0.8, 2.8)),
                    unit(b.size[1] / self.hull_beam, (0.45, 0.9)),
                    unit(b.size[2], (0.5, 1.8)),
                ]),
                None => d.extend([0.0; 4]),
            }
        }
        for i in 0..MAX_NOTCHES {
            match self.notches.get(i) {
                Some(n) => {
                    d.extend([n.offset / half, unit(n.width, (0.3, 1.0)), unit(n.depth / self.hull_height, (0.2, 0.5))])
                }
                None => d.extend([0.0; 3]),
            }
        }
        d
    }
}

type V3 = [f64; 3];

fn dot3(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize3(a: V3) -> V3 {
    let n = dot3(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Convex solid as an intersection of half-spaces `n·p <= d`.
#[derive(Debug, Clone)]
struct Convex {
    planes: Vec<(V3, f64)>,
}

/// Ray interval through a convex solid with the entering and exiting normals.
struct Span {
    t_in: f64,
    n_in: V3,
    t_out: f64,
    n_out: V3,
}

impl Convex {
    fn aabb(min: V3, max: V3) -> Self {
        Convex {
            planes: vec![
                ([1.0, 0.0, 0.0], max[0]),
                ([-1.0, 0.0, 0.0], -min[0]),
                ([0.0, 1.0, 0.0], max[1]),
                ([0.0, -1.0, 0.0], -min[1]),
                ([0.0, 0.0, 1.0], max[2]),
                ([0.0, 0.0, -1.0], -min[2]),
            ],
        }
    }

    fn intersect(&self, origin: V3, dir: V3) -> Option<Span> {
        let mut t_in = f64::NEG_INFINITY;
        let mut t_out = f64::INFINITY;
        let mut n_in = [0.0; 3];
        let mut n_out = [0.0; 3];
        for &(n, d) in &self.planes {
            let denom = dot3(n, dir);
            let num = d - dot3(n, origin);
            if denom == 0.0 {
                if num < 0.0 {
                    return None;
                }
            } else {
                let t = num / denom;
                if denom < 0.0 {
                    if t > t_in {
                        t_in = t;
                        n_in = n;
                    }
                } else if t < t_out {
                    t_out = t;
                    n_out = n;
                }
            }
        }
        (t_in < t_out).then_some(Span { t_in, n_in, t_out, n_out })
    }
}

/// Which view class a surface belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewClass {
    Front,
    Side,
    Rear,
}

/// Classifies by the horizontal direction of `v` relative to the bow axis.
fn classify_horizontal(vx: f64, vy: f64) -> ViewClass {
    if vx > vy.abs() {
        ViewClass::Front
    } else if -vx > vy.abs() {
        ViewClass::Rear
    } else {
        ViewClass::Side
    }
}

struct Scene {
    hull: Convex,
    notches: Vec<Convex>,
    boxes: Vec<Convex>,
}

impl Scene {
    fn build(shape: &VesselShape) -> Scene {
        let (l, b, h) = (shape.hull_length, shape.hull_beam, shape.hull_height);
        let mut hull = Convex::aabb([-l / 2.0, -b / 2.0, 0.0], [l / 2.0, b / 2.0, h]);
        // raked bow replaces the forward plane: x - z tan(r) <= l/2 - h tan(r)
        let tan = shape.bow_rake_deg.to_radians().tan();
        let n = [1.0, 0.0, -tan];
        let len = dot3(n, n).sqrt();
        hull.planes[0] = ([n[0] / len, n[1] / len, n[2] / len], (l / 2.0 - h * tan) / len);
        let notches = shape
            .notches
            .iter()
            .map(|nt| {
                Convex::aabb([nt.offset - nt.width / 2.0, -b, h - nt.depth], [nt.offset + nt.width / 2.0, b, h + 1.0])
            })
            .collect();
        let boxes = shape
            .superstructure
            .iter()
            .map(|sb| {
                let [sl, sw, sh] = sb.size;
                Convex::aabb([sb.offset - sl / 2.0, -sw / 2.0, h], [sb.offset + sl / 2.0, sw / 2.0, h + sh])
            })
            .collect();
        Scene { hull, notches, boxes }
    }

    /// Nearest surface hit as `(t, outward normal)`.
    fn trace(&self, origin: V3, dir: V3) -> Option<(f64, V3)> {
        let mut best: Option<(f64, V3)> = None;
        let mut consider = |t: f64, n: V3| {
            if t > 0.0 && best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, n));
            }
        };
        if let Some(span) = self.hull.intersect(origin, dir) {
            // step through notch cavities carved out of the hull
            let (mut t, mut n) = (span.t_in, span.n_in);
            let spans: Vec<Span> = self.notches.iter().filter_map(|c| c.intersect(origin, dir)).collect();
            loop {
                let mut moved = false;
                for s in &spans {
                    if s.t_in <= t && t < s.t_out {
                        t = s.t_out;
                        n = [-s.n_out[0], -s.n_out[1], -s.n_out[2]];
                        moved = true;
                    }
                }
                if !moved {
                    break;
                }
            }
            if t < span.t_out {
                consider(t, n);
            }
        }
        for b in &self.boxes {
            if let Some(span) = b.intersect(origin, dir) {
                consider(span.t_in, span.n_in);
            }
        }
        best
    }
}

/// Rendering parameters beyond the azimuth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub image_size: usize,
    pub elevation_deg: f64,
    /// Width of the world window covered by the image.
    pub world_extent: f64,
    /// Standard deviation of the per-pixel intensity noise.
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl RenderOptions {
    pub fn new(image_size: usize) -> Self {
        Self { image_size, elevation_deg: 10.0, world_extent: 15.0, noise_sigma: 6.0, noise_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedSample {
    pub image: GrayImage,
    pub fg: BitMask,
    pub views: ViewMaskSet,
    pub identity_id: u64,
    pub azimuth_deg: f64,
}

impl RenderedSample {
    pub fn area_ratios(&self) -> Result<AreaRatios> {
        compute_area_ratios(&self.fg, &self.views)
    }
}

/// Maps an azimuth to `(-180, 180]` so that mirrored azimuths are exact negations.
fn wrap_azimuth(deg: f64) -> f64 {
    let mut a = deg.rem_euclid(360.0);
    if a > 180.0 {
        a -= 360.0;
    }
    a
}

/// Renders `shape` at `azimuth_deg` with default options.
pub fn render_view(shape: &VesselShape, azimuth_deg: f64, image_size: usize) -> Result<RenderedSample> {
    let mut opts = RenderOptions::new(image_size);
    opts.noise_seed = splitmix(shape.identity_id ^ azimuth_deg.to_bits());
    render_view_with(shape, azimuth_deg, &opts)
}

pub fn render_view_with(shape: &VesselShape, azimuth_deg: f64, opts: &RenderOptions) -> Result<RenderedSample> {
    shape.validate()?;
    if opts.image_size < 64 {
        return Err(Error::InvalidConfig(format!("image size must be at least 64, got {}", opts.image_size)));
    }
    let size = opts.image_size;
    let az = wrap_azimuth(azimuth_deg).to_radians();
    let el = opts.elevation_deg.to_radians();
    // unit vector from the target towards the camera
    let to_cam = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
    let dir = [-to_cam[0], -to_cam[1], -to_cam[2]];
    let right = [-az.sin(), az.cos(), 0.0];
    let up = normalize3(cross3(right, dir));
    let target = [0.0, 0.0, 1.6];
    let scale = opts.world_extent / size as f64;
    let light = normalize3([0.4, 0.5, 0.8]);
    let tint = (splitmix(shape.identity_id) % 21) as f64 - 10.0;

    let scene = Scene::build(shape);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.noise_seed);
    let mut pixels = Vec::with_capacity(size * size);
    let mut fg = BitMask::empty(size, size)?;
    let mut front = fg.clone();
    let mut side = fg.clone();
    let mut rear = fg.clone();
    let half = size as f64 / 2.0;
    for py in 0..size {
        let v = (half - (py as f64 + 0.5)) * scale;
        for px in 0..size {
            let u = (px as f64 + 0.5 - half) * scale;
            let origin = [
                target[0] + u * right[0] + v * up[0] + 100.0 * to_cam[0],
                target[1] + u * right[1] + v * up[1] + 100.0 * to_cam[1],
                target[2] + u * right[2] + v * up[2] + 100.0 * to_cam[2],
            ];
            let noise: f64 = StandardNormal.sample(&mut rng);
            let shade = match scene.trace(origin, dir) {
                Some((_, n)) => {
                    fg.set(px, py, true);
                    let class = if n[0].abs() < 1e-9 && n[1].abs() < 1e-9 {
                        classify_horizontal(to_cam[0], to_cam[1])
                    } else {
                        classify_horizontal(n[0], n[1])
                    };
                    match class {
                        ViewClass::Front => front.set(px, py, true),
                        ViewClass::Side => side.set(px, py, true),
                        ViewClass::Rear => rear.set(px, py, true),
                    }
                    150.0 + tint + 70.0 * dot3(n, light).max(0.0)
                }
                None => 45.0 + 25.0 * (py as f64 / size as f64),
            };
            pixels.push((shade + opts.noise_sigma * noise).round().clamp(0.0, 255.0) as u8);
        }
    }
    if fg.count() == 0 {
        return Err(Error::DegenerateRender(format!(
            "vessel {} is outside the frame at azimuth {azimuth_deg}",
            shape.identity_id
        )));
    }
    Ok(RenderedSample {
        image: GrayImage::new(size, size, pixels)?,
        fg,
        views: ViewMaskSet::new(front, side, rear)?,
        identity_id: shape.identity_id,
        azimuth_deg,
    })
}

/// Configuration of the synthetic feature provider.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub dim: usize,
    /// Standard deviation of the additive Gaussian feature noise.
    pub sigma: f64,
    pub azimuth_bucket_deg: f64,
    pub projection_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { dim: 384, sigma: 0.15, azimuth_bucket_deg: 22.5, projection_seed: 0xB0C5 }
    }
}

/// Fixed random-projection feature extractor standing in for a pretrained
/// vision backbone.
///
/// Output layout: a view-independent block driven by the coarse hull
/// parameters, one block per view class whose magnitude follows that view's
/// visibility, and a smooth pose block shared by all identities.
#[derive(Debug, Clone)]
pub struct SyntheticBackbone {
    cfg: BackboneConfig,
    blocks: [std::ops::Range<usize>; 5],
    global_proj: Vec<f64>,
    view_proj: [Vec<f64>; 3],
    pose_basis: Vec<Vec<f64>>,
}

const POSE_HARMONICS: usize = 3;
const GLOBAL_GAIN: f64 = 2.0;
const VIEW_GAIN: f64 = 1.0;
const POSE_GAIN: f64 = 1.0;

impl SyntheticBackbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        if cfg.dim < 16 {
            return Err(Error::InvalidConfig(format!("feature dim {} < 16", cfg.dim)));
        }
        if !(cfg.sigma >= 0.0) || !(cfg.azimuth_bucket_deg > 0.0) {
            return Err(Error::InvalidConfig("sigma >= 0 and bucket > 0 required".into()));
        }
        let pose = cfg.dim / 6;
        let block = (cfg.dim - pose) / 4;
        let b = |i: usize| i * block..(i + 1) * block;
        let blocks = [b(0), b(1), b(2), 3 * block..cfg.dim - pose, cfg.dim - pose..cfg.dim];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.projection_seed);
        let mut gaussian = |n: usize, rows: usize| -> Vec<f64> {
            let s = 1.0 / (rows as f64).sqrt();
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    s * z
                })
                .collect()
        };
        let global_proj = gaussian(blocks[0].len() * COARSE_DESCRIPTOR_LEN, blocks[0].len());
        let view_proj = [
            gaussian(blocks[1].len() * DESCRIPTOR_LEN, blocks[1].len()),
            gaussian(blocks[2].len() * DESCRIPTOR_LEN, blocks[2].len()),
            gaussian(blocks[3].len() * DESCRIPTOR_LEN, blocks[3].len()),
        ];
        let pose_basis = (0..2 * POSE_HARMONICS).map(|_| gaussian(pose, pose)).collect();
        Ok(Self { cfg, blocks, global_proj, view_proj, pose_basis })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    /// Azimuth rounded to the centre of its bucket, in degrees.
    pub fn bucket(&self, azimuth_deg: f64) -> (i64, f64) {
        let w = self.cfg.azimuth_bucket_deg;
        let idx = (azimuth_deg.rem_euclid(360.0) / w).round() as i64;
        (idx, idx as f64 * w)
    }

    /// Visibility weights `(front, side, rear)` of a bucketed azimuth.
    pub fn view_weights(azimuth_deg: f64) -> [f64; 3] {
        let a = azimuth_deg.to_radians();
        [a.cos().max(0.0), a.sin().abs(), (-a.cos()).max(0.0)]
    }

    /// Features of `shape` seen from `azimuth_deg`; noise is seeded by
    /// `(seed, identity, azimuth bucket)`.
    pub fn features(&self, shape: &VesselShape, azimuth_deg: f64, seed: u64) -> Vec<f64> {
        let (bucket_idx, bucket_deg) = self.bucket(azimuth_deg);
        let desc = shape.descriptor();
        let mut out = vec![0.0; self.cfg.dim];

        project(&self.global_proj, &desc[..COARSE_DESCRIPTOR_LEN], GLOBAL_GAIN, &mut out[self.blocks[0].clone()]);
        let w = Self::view_weights(bucket_deg);
        for v in 0..3 {
            project(&self.view_proj[v], &desc, VIEW_GAIN * w[v], &mut out[self.blocks[v + 1].clone()]);
        }
        let a = bucket_deg.to_radians();
        let pose = &mut out[self.blocks[4].clone()];
        for k in 0..POSE_HARMONICS {
            let f = (k + 1) as f64;
            let (c, s) = ((f * a).cos(), (f * a).sin());
            for (i, p) in pose.iter_mut().enumerate() {
                *p += POSE_GAIN * (c * self.pose_basis[2 * k][i] + s * self.pose_basis[2 * k + 1][i]);
            }
        }
        if self.cfg.sigma > 0.0 {
            let noise_seed = splitmix(seed ^ splitmix(shape.identity_id) ^ splitmix(bucket_idx as u64 ^ 0xA11CE));
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            for x in &mut out {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += self.cfg.sigma * z;
            }
        }
        out
    }
}

fn project(matrix: &[f64], input: &[f64], gain: f64, out: &mut [f64]) {
    let cols = input.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &matrix[r * cols..(r + 1) * cols];
        *o = gain * row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Train/test membership of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub identities: usize,
    pub azimuths_per_identity: usize,
    pub image_size: usize,
    /// Intensity noise of the rendered images.
    pub image_noise: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { identities: 20, azimuths_per_identity: 8, image_size: 192, image_noise: 6.0, seed: 0 }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(Error::InvalidConfig("at least 2 identities required".into()));
        }
        if self.azimuths_per_identity < 1 {
            return Err(Error::InvalidConfig("at least 1 azimuth required".into()));
        }
        Ok(())
    }

    /// Azimuths evenly spaced over `[0, 180)`; even indices are training views,
    /// odd indices are held out.
    pub fn azimuths(&self) -> Vec<(f64, Split)> {
        let step = 180.0 / self.azimuths_per_identity as f64;
        (0..self.azimuths_per_identity)
            .map(|k| {
                let split = if k % 2 == 0 { Split::Train } else { Split::Test };
                (k as f64 * step, split)
            })
            .collect()
    }

    pub fn shape(&self, identity_id: u64) -> VesselShape {
        VesselShape { identity_id, ..make_identity(identity_seed(self.seed, identity_id)) }
    }

    pub fn shapes(&self) -> Vec<VesselShape> {
        (0..self.identities as u64).map(|i| self.shape(i)).collect()
    }

    pub fn render(&self, shape: &VesselShape, azimuth_deg: f64) -> Result<RenderedSample> {
        let mut opts = RenderOptions::new(self.image_size);
        opts.noise_sigma = self.image_noise;
        opts.noise_seed = splitmix(self.seed ^ splitmix(shape.identity_id) ^ azimuth_deg.to_bits());
        render_view_with(shape, azimuth_deg, &opts)
    }
}

/// One dataset sample held in memory.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub sample: RenderedSample,
    pub split: Split,
}

/// Renders every `(identity, azimuth)` pair of `cfg` in memory.
pub fn generate_samples(cfg: &DatasetConfig) -> Result<Vec<GeneratedSample>> {
    cfg.validate()?;
    let azimuths = cfg.azimuths();
    let mut out = Vec::with_capacity(cfg.identities * azimuths.len());
    for shape in cfg.shapes() {
        for &(az, split) in &azimuths {
            out.push(GeneratedSample { sample: cfg.render(&shape, az)?, split });
        }
    }
    Ok(out)
}

/// One row of `manifest.tsv`. Paths are relative to the manifest directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub image_path: PathBuf,
    pub fg_path: PathBuf,
    pub front_path: PathBuf,
    pub side_path: PathBuf,
    pub rear_path: PathBuf,
    pub identity_id: u64,
    pub azimuth_deg: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const DATASET_CONFIG_FILE: &str = "dataset.json";

impl Manifest {
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.image_path.display(),
                r.fg_path.display(),
                r.front_path.display(),
                r.side_path.display(),
                r.rear_path.display(),
                r.identity_id,
                r.azimuth_deg,
                r.split.as_str()
            );
        }
        s
    }

    pub fn parse(root: impl Into<PathBuf>, text: &str) -> Result<Self> {
        let mut records = Vec::new();
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len() as u64;
            let line = line.trim_end_matches(['\n', '\r']);
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| Error::Malformed { format: "manifest", offset: start, reason };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 8 {
                return Err(bad(format!("expected 8 fields, got {}", f.len())));
            }
            records.push(ManifestRecord {
                image_path: f[0].into(),
                fg_path: f[1].into(),
                front_path: f[2].into(),
                side_path: f[3].into(),
                rear_path: f[4].into(),
                identity_id: f[5].parse().map_err(|_| bad(format!("bad identity {:?}", f[5])))?,
                azimuth_deg: f[6].parse().map_err(|_| bad(format!("bad azimuth {:?}", f[6])))?,
                split: f[7].parse().map_err(|e: Error| bad(e.to_string()))?,
            });
        }
        Ok(Manifest { root: root.into(), records })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(root, &text)
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    /// Loads the foreground and clipped view masks of a record.
    pub fn load_masks(&self, r: &ManifestRecord) -> Result<(BitMask, ViewMaskSet)> {
        let fg = load_mask(self.resolve(&r.fg_path))?;
        let views = ViewMaskSet::new(
            load_mask(self.resolve(&r.front_path))?,
            load_mask(self.resolve(&r.side_path))?,
            load_mask(self.resolve(&r.rear_path))?,
        )?;
        Ok((fg.clone(), crate::masks::clip_views(&views, &fg)?))
    }
}

/// Renders the dataset to `out_dir` and writes `manifest.tsv`.
pub fn make_dataset(cfg: &DatasetConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    cfg.validate()?;
    let out = out_dir.as_ref();
    for sub in ["images", "masks"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut records = Vec::new();
    for shape in cfg.shapes() {
        for (az, split) in cfg.azimuths() {
            let s = cfg.render(&shape, az)?;
            let stem = format!("id{:04}_az{:06.2}", shape.identity_id, az);
            let image_path = PathBuf::from(format!("images/{stem}.pgm"));
            save_pgm(&s.image, out.join(&image_path))?;
            let mask_path = |kind: &str, m: &BitMask| -> Result<PathBuf> {
                let p = PathBuf::from(format!("masks/{stem}_{kind}.pgm"));
                save_mask(m, out.join(&p))?;
                Ok(p)
            };
            records.push(ManifestRecord {
                fg_path: mask_path("fg", &s.fg)?,
                front_path: mask_path("front", &s.views.front)?,
                side_path: mask_path("side", &s.views.side)?,
                rear_path: mask_path("rear", &s.views.rear)?,
                image_path,
                identity_id: shape.identity_id,
                azimuth_deg: az,
                split,
            });
        }
    }
    let manifest = Manifest { root: out.to_path_buf(), records };
    let mpath = out.join(MANIFEST_FILE);
    fs::write(&mpath, manifest.to_tsv()).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}
