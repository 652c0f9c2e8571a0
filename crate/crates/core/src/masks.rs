//! Grayscale images, binary masks, binary PGM I/O and view area ratios.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_shape(width, height, data.len())?;
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.data[y * self.width + x] = value;
    }
}

/// Binary mask with the same shape contract as [`GrayImage`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BitMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        check_shape(width, height, bits.len())?;
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![false; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn same_shape(&self, other: &BitMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn and(&self, other: &BitMask) -> Result<BitMask> {
        if !self.same_shape(other) {
            return Err(shape_err(self, other));
        }
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect();
        BitMask::new(self.width, self.height, bits)
    }

    /// Intersection over union; two empty masks give 1.
    pub fn iou(&self, other: &BitMask) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(shape_err(self, other));
        }
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.bits.iter().zip(&other.bits) {
            inter += (*a && *b) as usize;
            union += (*a || *b) as usize;
        }
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&self, factor: usize) -> BitMask {
        let (w, h) = (self.width * factor, self.height * factor);
        let mut bits = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                bits.push(self.get(x / factor, y / factor));
            }
        }
        BitMask { width: w, height: h, bits }
    }

    /// Mask as a `{0, 255}` grayscale image.
    pub fn to_image(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
    }

    /// Pixels at or above 128 are set.
    pub fn from_image(image: &GrayImage) -> BitMask {
        BitMask { width: image.width, height: image.height, bits: image.data.iter().map(|&v| v >= 128).collect() }
    }
}

fn shape_err(a: &BitMask, b: &BitMask) -> Error {
    Error::ShapeMismatch(format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height))
}

fn check_shape(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::ShapeMismatch(format!("image dimensions must be positive, got {width}x{height}")));
    }
    if width * height != len {
        return Err(Error::ShapeMismatch(format!("{width}x{height} needs {} pixels, got {len}", width * height)));
    }
    Ok(())
}

/// Real-valued per-pixel field, e.g. a foreground probability map.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

/// Sets every pixel whose value is `>= threshold`.
pub fn binarize(prob: &ProbMap, threshold: f64) -> BitMask {
    BitMask { width: prob.width, height: prob.height, bits: prob.data.iter().map(|&p| p >= threshold).collect() }
}

pub const DEFAULT_BINARIZE_THRESHOLD: f64 = 0.5;

/// Front, side and rear view masks of one vessel image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewMaskSet {
    pub front: BitMask,
    pub side: BitMask,
    pub rear: BitMask,
}

impl ViewMaskSet {
    pub fn new(front: BitMask, side: BitMask, rear: BitMask) -> Result<Self> {
        if !front.same_shape(&side) {
            return Err(shape_err(&front, &side));
        }
        if !front.same_shape(&rear) {
            return Err(shape_err(&front, &rear));
        }
        Ok(Self { front, side, rear })
    }
}

/// Intersects each view mask with the foreground.
pub fn clip_views(views: &ViewMaskSet, fg: &BitMask) -> Result<ViewMaskSet> {
    Ok(ViewMaskSet { front: views.front.and(fg)?, side: views.side.and(fg)?, rear: views.rear.and(fg)? })
}

/// Fraction of the foreground covered by each view mask.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AreaRatios {
    pub front: f64,
    pub side: f64,
    pub rear: f64,
}

impl AreaRatios {
    pub fn new(front: f64, side: f64, rear: f64) -> Result<Self> {
        for (name, v) in [("front", front), ("side", side), ("rear", rear)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidInput(format!("area ratio {name}={v} outside [0, 1]")));
            }
        }
        Ok(Self { front, side, rear })
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.front, self.side, self.rear]
    }

    pub fn sum(&self) -> f64 {
        self.front + self.side + self.rear
    }
}

/// `AR_x = |view_x| / |fg|` for each view. Views are expected to be clipped to `fg`.
pub fn compute_area_ratios(fg: &BitMask, views: &ViewMaskSet) -> Result<AreaRatios> {
    for v in [&views.front, &views.side, &views.rear] {
        if !v.same_shape(fg) {
            return Err(shape_err(v, fg));
        }
    }
    let total = fg.count();
    if total == 0 {
        return Err(Error::EmptyForeground);
    }
    let ratio = |m: &BitMask| m.count() as f64 / total as f64;
    Ok(AreaRatios { front: ratio(&views.front), side: ratio(&views.side), rear: ratio(&views.rear) })
}

const PGM: &str = "PGM";

fn malformed(offset: usize, reason: impl Into<String>) -> Error {
    Error::Malformed { format: PGM, offset: offset as u64, reason: reason.into() }
}

/// Parses a binary (P5) PGM with maxval 255.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(malformed(0, "expected P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(malformed(start, format!("expected header field {i}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| malformed(start, format!("header field {text} out of range")))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(malformed(pos, format!("maxval {maxval} unsupported, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(malformed(pos, "zero image dimension"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(malformed(pos, "missing whitespace after header")),
    }
    let need = width * height;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(malformed(bytes.len(), format!("truncated payload: need {need} bytes, found {}", payload.len())));
    }
    GrayImage::new(width, height, payload[..need].to_vec())
}

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

pub fn save_pgm(image: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(image)).map_err(|e| Error::io(path, e))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<BitMask> {
    Ok(BitMask::from_image(&load_pgm(path)?))
}

pub fn save_mask(mask: &BitMask, path: impl AsRef<Path>) -> Result<()> {
    save_pgm(&mask.to_image(), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_from(width: usize, height: usize, f: impl Fn(usize) -> bool) -> BitMask {
        BitMask::new(width, height, (0..width * height).map(f).collect()).unwrap()
    }

    #[test]
    fn pgm_round_trip_is_bit_exact() {
        let img = GrayImage::new(2, 2, vec![0, 255, 128, 7]).unwrap();
        let bytes = encode_pgm(&img);
        let back = decode_pgm(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(encode_pgm(&back), bytes);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        save_pgm(&img, &p).unwrap();
        assert_eq!(load_pgm(&p).unwrap().data(), &[0, 255, 128, 7]);
    }

    #[test]
    fn pgm_rejects_16_bit_and_truncation() {
        let err = decode_pgm(b"P5\n2 2\n65535\n\0\0\0\0\0\0\0\0").unwrap_err();
        assert!(err.to_string().contains("maxval 65535"), "{err}");
        let err = decode_pgm(b"P5\n2 2\n255\n\x01\x02").unwrap_err();
        match err {
            Error::Malformed { offset, .. } => assert_eq!(offset, 13),
            e => panic!("unexpected {e}"),
        }
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pgm(b"P5\n# comment\n1 1\n255\n\x09").is_ok());
    }

    #[test]
    fn binarize_cases() {
        let all = |v: f64| ProbMap { width: 3, height: 2, data: vec![v; 6] };
        assert_eq!(binarize(&all(0.9), 0.5).count(), 6);
        assert_eq!(binarize(&all(0.5), 0.5).count(), 6);
        let checker = ProbMap {
            width: 4,
            height: 4,
            data: (0..16).map(|i| if (i % 4 + i / 4) % 2 == 0 { 0.8 } else { 0.2 }).collect(),
        };
        let m = binarize(&checker, 0.5);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(m.get(x, y), (x + y) % 2 == 0);
            }
        }
    }

    #[test]
    fn clipping_cases() {
        let fg = mask_from(4, 4, |i| i < 8);
        let inside = mask_from(4, 4, |i| i < 3);
        let outside = mask_from(4, 4, |i| i >= 8);
        let set = ViewMaskSet::new(inside.clone(), outside.clone(), inside.clone()).unwrap();
        let clipped = clip_views(&set, &fg).unwrap();
        assert_eq!(clipped.front, inside);
        assert_eq!(clipped.side.count(), 0);
        let other = BitMask::empty(2, 2).unwrap();
        assert!(clip_views(&set, &other).is_err());
    }

    #[test]
    fn area_ratio_substitution() {
        // 1000 foreground pixels in a 50x40 frame
        let fg = mask_from(50, 40, |i| i < 1000);
        let front = mask_from(50, 40, |i| i < 250);
        let side = mask_from(50, 40, |i| (250..1000).contains(&i));
        let rear = BitMask::empty(50, 40).unwrap();
        let ar = compute_area_ratios(&fg, &ViewMaskSet::new(front, side, rear).unwrap()).unwrap();
        assert_eq!(ar, AreaRatios { front: 0.25, side: 0.75, rear: 0.0 });

        let empty = BitMask::empty(50, 40).unwrap();
        let full_side = ViewMaskSet::new(empty.clone(), fg.clone(), empty.clone()).unwrap();
        let ar = compute_area_ratios(&fg, &full_side).unwrap();
        assert_eq!(ar, AreaRatios { front: 0.0, side: 1.0, rear: 0.0 });

        assert!(matches!(compute_area_ratios(&empty, &full_side), Err(Error::EmptyForeground)));
    }

    fn random_views() -> impl Strategy<Value = (BitMask, ViewMaskSet)> {
        (proptest::collection::vec(any::<bool>(), 48), proptest::collection::vec(0u8..4, 48)).prop_filter_map(
            "nonempty fg",
            |(fg, labels)| {
                let fg = BitMask::new(8, 6, fg).ok()?;
                if fg.count() == 0 {
                    return None;
                }
                let view = |k: u8| BitMask::new(8, 6, labels.iter().map(|&l| l == k).collect()).unwrap();
                let views = ViewMaskSet::new(view(0), view(1), view(2)).unwrap();
                Some((fg.clone(), clip_views(&views, &fg).unwrap()))
            },
        )
    }

    proptest! {
        #[test]
        fn clip_equals_per_pixel_and(fg in proptest::collection::vec(any::<bool>(), 30),
                                     v in proptest::collection::vec(any::<bool>(), 30)) {
            let fg = BitMask::new(6, 5, fg).unwrap();
            let v = BitMask::new(6, 5, v).unwrap();
            let set = ViewMaskSet::new(v.clone(), v.clone(), v.clone()).unwrap();
            let c = clip_views(&set, &fg).unwrap();
            for y in 0..5 {
                for x in 0..6 {
                    prop_assert_eq!(c.side.get(x, y), v.get(x, y) && fg.get(x, y));
                }
            }
        }

        #[test]
        fn swapping_front_and_rear_swaps_ratios((fg, views) in random_views()) {
            let a = compute_area_ratios(&fg, &views).unwrap();
            let swapped = ViewMaskSet::new(views.rear.clone(), views.side.clone(), views.front.clone()).unwrap();
            let b = compute_area_ratios(&fg, &swapped).unwrap();
            prop_assert_eq!(a.front, b.rear);
            prop_assert_eq!(a.rear, b.front);
            prop_assert_eq!(a.side, b.side);
            // disjoint views clipped to fg never exceed the foreground
            prop_assert!(a.sum() <= 1.0 + 1e-12);
        }

        #[test]
        fn upsampling_preserves_ratios((fg, views) in random_views(), k in 1usize..4) {
            let a = compute_area_ratios(&fg, &views).unwrap();
            let up = ViewMaskSet::new(views.front.upsample(k), views.side.upsample(k), views.rear.upsample(k)).unwrap();
            let b = compute_area_ratios(&fg.upsample(k), &up).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
