//! Encoder-decoder foreground segmenter.
//!
//! Nine 3×3 "same" convolutions, four 2×2 max-pools, four 2× nearest
//! upsamplings and three additive encoder→decoder skips:
//!
//! ```text
//! conv2d(3→16) pool conv2d_1(16→8) pool conv2d_2(8→8) pool conv2d_3(8→8) pool
//! conv2d_4(8→8) up +conv2d_3 conv2d_5 up +conv2d_2 conv2d_6 up +conv2d_1
//! conv2d_7(8→16) up conv2d_8(16→1) sigmoid
//! ```
//!
//! ReLU follows every convolution except the last. Training minimises mean
//! per-pixel binary cross-entropy with momentum SGD.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{binarize, BitMask, GrayImage, ProbMap, DEFAULT_BINARIZE_THRESHOLD};

/// Network input side length.
pub const INPUT_SIZE: usize = 192;
/// Input side lengths must be divisible by this (four pooling stages).
pub const SIZE_MULTIPLE: usize = 16;

/// `(name, in_channels, out_channels)` of every convolution, in order.
pub const CONV_LAYERS: [(&str, usize, usize); 9] = [
    ("conv2d", 3, 16),
    ("conv2d_1", 16, 8),
    ("conv2d_2", 8, 8),
    ("conv2d_3", 8, 8),
    ("conv2d_4", 8, 8),
    ("conv2d_5", 8, 8),
    ("conv2d_6", 8, 8),
    ("conv2d_7", 8, 16),
    ("conv2d_8", 16, 1),
];

const K: usize = 3;
const KK: usize = K * K;
const P_CLAMP: f64 = 1e-7;

/// Channel-major feature map of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    fn plane(&self, c: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.h * self.w;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Grayscale image scaled to `[-1, 1]` and replicated into three channels.
    pub fn from_gray(image: &GrayImage) -> Self {
        let plane: Vec<f64> = image.data().iter().map(|&v| v as f64 / 127.5 - 1.0).collect();
        let mut data = Vec::with_capacity(3 * plane.len());
        for _ in 0..3 {
            data.extend_from_slice(&plane);
        }
        Self { c: 3, h: image.height(), w: image.width(), data }
    }

    /// Shape in `(B, H, W, C)` order with `B = 1`.
    pub fn nhwc(&self) -> [usize; 4] {
        [1, self.h, self.w, self.c]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    /// `[out][in][ky][kx]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(name: &str, in_ch: usize, out_ch: usize) -> Self {
        Self { name: name.to_string(), in_ch, out_ch, weight: vec![0.0; out_ch * in_ch * KK], bias: vec![0.0; out_ch] }
    }
}

/// Trainable parameters of all nine convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct SegNetParams {
    pub layers: Vec<ConvLayer>,
}

impl SegNetParams {
    pub fn zeros() -> Self {
        Self { layers: CONV_LAYERS.iter().map(|&(n, i, o)| ConvLayer::zeros(n, i, o)).collect() }
    }

    /// He-uniform initialisation `U(±sqrt(6 / fan_in))`, zero biases.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros();
        for layer in &mut p.layers {
            let bound = (6.0 / (layer.in_ch * KK) as f64).sqrt();
            for w in &mut layer.weight {
                *w = rng.random_range(-bound..bound);
            }
        }
        p
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            v.extend_from_slice(&l.weight);
            v.extend_from_slice(&l.bias);
        }
        v
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros();
        if flat.len() != p.num_params() {
            return Err(Error::DimensionMismatch { expected: p.num_params(), actual: flat.len() });
        }
        let mut off = 0;
        for l in &mut p.layers {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(p)
    }

    fn add_scaled(&mut self, other: &SegNetParams, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += scale * y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += scale * y);
        }
    }

    fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|x| *x *= s);
            l.bias.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.iter().chain(&l.bias).all(|x| x.is_finite()))
    }
}

/// Layer primitives with explicit backward passes.
pub mod layers {
    use super::{ConvLayer, Tensor, K, KK};

    /// 3×3 stride-1 convolution with zero padding.
    pub fn conv_forward(layer: &ConvLayer, x: &Tensor) -> Tensor {
        assert_eq!(x.c, layer.in_ch, "conv {} input channels", layer.name);
        let (h, w) = (x.h, x.w);
        let mut out = Tensor::zeros(layer.out_ch, h, w);
        for o in 0..layer.out_ch {
            let bias = layer.bias[o];
            let plane = out.plane_mut(o);
            plane.iter_mut().for_each(|v| *v = bias);
            for i in 0..layer.in_ch {
                let inp = x.plane(i);
                let kw = &layer.weight[(o * layer.in_ch + i) * KK..][..KK];
                for y in 0..h {
                    let row = &mut plane[y * w..(y + 1) * w];
                    for ky in 0..K {
                        let Some(sy) = (y + ky).checked_sub(1).filter(|&s| s < h) else {
                            continue;
                        };
                        let src = &inp[sy * w..(sy + 1) * w];
                        axpy_shifted(row, src, kw[ky * K], kw[ky * K + 1], kw[ky * K + 2]);
                    }
                }
            }
        }
        out
    }

    /// `row[x] += a*src[x-1] + b*src[x] + c*src[x+1]` with zero padding.
    #[inline]
    fn axpy_shifted(row: &mut [f64], src: &[f64], a: f64, b: f64, c: f64) {
        let w = row.len();
        for x in 0..w {
            row[x] += b * src[x];
        }
        for x in 1..w {
            row[x] += a * src[x - 1];
        }
        for x in 0..w - 1 {
            row[x] += c * src[x + 1];
        }
    }

    /// Returns the input gradient and accumulates weight/bias gradients into `grad`.
    pub fn conv_backward(layer: &ConvLayer, x: &Tensor, dout: &Tensor, grad: &mut ConvLayer) -> Tensor {
        let (h, w) = (x.h, x.w);
        let mut dx = Tensor::zeros(layer.in_ch, h, w);
        for o in 0..layer.out_ch {
            let g = dout.plane(o);
            grad.bias[o] += g.iter().sum::<f64>();
            for i in 0..layer.in_ch {
                let inp = x.plane(i);
                let base = (o * layer.in_ch + i) * KK;
                let kw: [f64; KK] = layer.weight[base..base + KK].try_into().unwrap();
                let mut dw = [0.0; KK];
                let dxp = dx.plane_mut(i);
                for y in 0..h {
                    let grow = &g[y * w..(y + 1) * w];
                    for ky in 0..K {
                        let Some(sy) = (y + ky).checked_sub(1).filter(|&s| s < h) else {
                            continue;
                        };
                        let src = &inp[sy * w..(sy + 1) * w];
                        // kx = 0 pairs out[x] with in[x-1]
                        let mut s0 = 0.0;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for xx in 1..w {
                            s0 += grow[xx] * src[xx - 1];
                        }
                        for xx in 0..w {
                            s1 += grow[xx] * src[xx];
                        }
                        for xx in 0..w - 1 {
                            s2 += grow[xx] * src[xx + 1];
                        }
                        dw[ky * K] += s0;
                        dw[ky * K + 1] += s1;
                        dw[ky * K + 2] += s2;
                        let drow = &mut dxp[sy * w..(sy + 1) * w];
                        let (a, b, c) = (kw[ky * K], kw[ky * K + 1], kw[ky * K + 2]);
                        for xx in 0..w {
                            drow[xx] += b * grow[xx];
                        }
                        for xx in 1..w {
                            drow[xx - 1] += a * grow[xx];
                        }
                        for xx in 0..w - 1 {
                            drow[xx + 1] += c * grow[xx];
                        }
                    }
                }
                for (acc, d) in grad.weight[base..base + KK].iter_mut().zip(dw) {
                    *acc += d;
                }
            }
        }
        dx
    }

    pub fn relu_inplace(x: &mut Tensor) {
        x.data.iter_mut().for_each(|v| *v = v.max(0.0));
    }

    /// Zeroes gradient entries where the post-activation value is not positive.
    pub fn relu_backward_inplace(activated: &Tensor, dout: &mut Tensor) {
        for (g, a) in dout.data.iter_mut().zip(&activated.data) {
            if *a <= 0.0 {
                *g = 0.0;
            }
        }
    }

    /// 2×2 max pooling; also returns the flat input index of each maximum.
    pub fn maxpool_forward(x: &Tensor) -> (Tensor, Vec<u32>) {
        let (oh, ow) = (x.h / 2, x.w / 2);
        let mut out = Tensor::zeros(x.c, oh, ow);
        let mut arg = vec![0u32; x.c * oh * ow];
        for c in 0..x.c {
            let base = c * x.h * x.w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * x.w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * x.w + 2 * xx + dx;
                        if x.data[idx] > x.data[best] {
                            best = idx;
                        }
                    }
                    let o = (c * oh + y) * ow + xx;
                    out.data[o] = x.data[best];
                    arg[o] = best as u32;
                }
            }
        }
        (out, arg)
    }

    pub fn maxpool_backward(input_shape: (usize, usize, usize), arg: &[u32], dout: &Tensor) -> Tensor {
        let (c, h, w) = input_shape;
        let mut dx = Tensor::zeros(c, h, w);
        for (g, &a) in dout.data.iter().zip(arg) {
            dx.data[a as usize] += g;
        }
        dx
    }

    /// 2× nearest-neighbour upsampling.
    pub fn upsample_forward(x: &Tensor) -> Tensor {
        let (oh, ow) = (x.h * 2, x.w * 2);
        let mut out = Tensor::zeros(x.c, oh, ow);
        for c in 0..x.c {
            let src = x.plane(c);
            let dst = out.plane_mut(c);
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / 2) * x.w + xx / 2];
                }
            }
        }
        out
    }

    pub fn upsample_backward(dout: &Tensor) -> Tensor {
        let (h, w) = (dout.h / 2, dout.w / 2);
        let mut dx = Tensor::zeros(dout.c, h, w);
        for c in 0..dout.c {
            let g = dout.plane(c);
            let d = dx.plane_mut(c);
            for y in 0..dout.h {
                for xx in 0..dout.w {
                    d[(y / 2) * w + xx / 2] += g[y * dout.w + xx];
                }
            }
        }
        dx
    }

    pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!((a.c, a.h, a.w), (b.c, b.h, b.w), "add shape mismatch");
        let mut out = a.clone();
        out.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        out
    }

    pub fn sigmoid(z: f64) -> f64 {
        1.0 / (1.0 + (-z).exp())
    }

    /// Mean clamped BCE of `sigmoid(logits)` against `target` and its gradient
    /// with respect to the logits.
    pub fn sigmoid_bce(logits: &[f64], target: &[bool]) -> (f64, Vec<f64>) {
        let n = logits.len() as f64;
        let mut loss = 0.0;
        let mut grad = Vec::with_capacity(logits.len());
        for (&z, &t) in logits.iter().zip(target) {
            let p = sigmoid(z);
            let pc = p.clamp(super::P_CLAMP, 1.0 - super::P_CLAMP);
            loss -= if t { pc.ln() } else { (1.0 - pc).ln() };
            let inside = p > super::P_CLAMP && p < 1.0 - super::P_CLAMP;
            grad.push(if inside { (p - t as u8 as f64) / n } else { 0.0 });
        }
        (loss / n, grad)
    }
}

use layers::*;

/// One row of the forward shape trace, shapes in `(B, H, W, C)` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeRow {
    pub kind: &'static str,
    pub name: String,
    pub inputs: Vec<[usize; 4]>,
    pub output: [usize; 4],
}

/// Intermediate activations kept for the backward pass.
struct Cache {
    input: Tensor,
    /// Post-ReLU outputs of conv2d .. conv2d_7.
    act: Vec<Tensor>,
    /// Pool inputs are act[0..4]; argmax per pool.
    pool_arg: Vec<Vec<u32>>,
    pooled: Vec<Tensor>,
    /// Decoder conv inputs (after add) for conv2d_5..conv2d_7.
    sums: Vec<Tensor>,
    /// Input to conv2d_8.
    last_in: Tensor,
    logits: Tensor,
}

fn check_input(x: &Tensor) -> Result<()> {
    if x.c != 3 {
        return Err(Error::ShapeMismatch(format!("expected 3 input channels, got {}", x.c)));
    }
    if x.h == 0 || x.w == 0 || !x.h.is_multiple_of(SIZE_MULTIPLE) || !x.w.is_multiple_of(SIZE_MULTIPLE) {
        return Err(Error::ShapeMismatch(format!(
            "input {}x{} is not a positive multiple of {SIZE_MULTIPLE}",
            x.h, x.w
        )));
    }
    Ok(())
}

fn forward_cached(params: &SegNetParams, x: &Tensor, mut trace: Option<&mut Vec<ShapeRow>>) -> Cache {
    let l = &params.layers;
    let mut row = |kind: &'static str, name: &str, inputs: Vec<[usize; 4]>, out: &Tensor| {
        if let Some(t) = trace.as_deref_mut() {
            t.push(ShapeRow { kind, name: name.to_string(), inputs, output: out.nhwc() });
        }
    };
    row("InputLayer", "-", vec![x.nhwc()], x);

    let mut act = Vec::with_capacity(8);
    let mut pool_arg = Vec::with_capacity(4);
    let mut pooled = Vec::with_capacity(4);
    let pool_names = ["max_pooling2d", "max_pooling2d_1", "max_pooling2d_2", "max_pooling2d_3"];
    let mut cur = x.clone();
    for stage in 0..4 {
        let mut a = conv_forward(&l[stage], &cur);
        relu_inplace(&mut a);
        row("Conv2D", &l[stage].name, vec![cur.nhwc()], &a);
        let (p, arg) = maxpool_forward(&a);
        row("MaxPooling2D", pool_names[stage], vec![a.nhwc()], &p);
        act.push(a);
        pool_arg.push(arg);
        pooled.push(p.clone());
        cur = p;
    }
    let mut a4 = conv_forward(&l[4], &cur);
    relu_inplace(&mut a4);
    row("Conv2D", &l[4].name, vec![cur.nhwc()], &a4);
    act.push(a4);

    let up_names = ["up_sampling2d", "up_sampling2d_1", "up_sampling2d_2", "up_sampling2d_3"];
    let add_names = ["add", "add_1", "add_2"];
    let mut sums = Vec::with_capacity(3);
    for d in 0..3 {
        let prev = &act[4 + d];
        let u = upsample_forward(prev);
        row("UpSampling2D", up_names[d], vec![prev.nhwc()], &u);
        let skip = &act[3 - d];
        let s = add(&u, skip);
        row("Add", add_names[d], vec![u.nhwc(), skip.nhwc()], &s);
        let mut a = conv_forward(&l[5 + d], &s);
        relu_inplace(&mut a);
        row("Conv2D", &l[5 + d].name, vec![s.nhwc()], &a);
        sums.push(s);
        act.push(a);
    }
    let last_in = upsample_forward(&act[7]);
    row("UpSampling2D", up_names[3], vec![act[7].nhwc()], &last_in);
    let logits = conv_forward(&l[8], &last_in);
    row("Conv2D", &l[8].name, vec![last_in.nhwc()], &logits);
    Cache { input: x.clone(), act, pool_arg, pooled, sums, last_in, logits }
}

/// Forward shape trace for a 3-channel input of side `size`.
pub fn shape_trace(params: &SegNetParams, size: usize) -> Result<Vec<ShapeRow>> {
    let x = Tensor::zeros(3, size, size);
    check_input(&x)?;
    let mut rows = Vec::new();
    forward_cached(params, &x, Some(&mut rows));
    Ok(rows)
}

/// Foreground probabilities for an already preprocessed 3-channel tensor.
pub fn forward_tensor(params: &SegNetParams, x: &Tensor) -> Result<ProbMap> {
    check_input(x)?;
    let cache = forward_cached(params, x, None);
    Ok(ProbMap { width: x.w, height: x.h, data: cache.logits.data.iter().map(|&z| sigmoid(z)).collect() })
}

/// Forward pass on a `INPUT_SIZE`-square grayscale image.
pub fn forward(params: &SegNetParams, image: &GrayImage) -> Result<ProbMap> {
    if image.width() != INPUT_SIZE || image.height() != INPUT_SIZE {
        return Err(Error::ShapeMismatch(format!(
            "network input must be {INPUT_SIZE}x{INPUT_SIZE}, got {}x{}; letterbox first",
            image.width(),
            image.height()
        )));
    }
    forward_tensor(params, &Tensor::from_gray(image))
}

/// BCE loss of one sample and its parameter gradient.
pub fn bce_loss_and_grads(params: &SegNetParams, x: &Tensor, target: &BitMask) -> Result<(f64, SegNetParams)> {
    check_input(x)?;
    if target.width() != x.w || target.height() != x.h {
        return Err(Error::ShapeMismatch(format!(
            "target {}x{} vs input {}x{}",
            target.width(),
            target.height(),
            x.w,
            x.h
        )));
    }
    let c = forward_cached(params, x, None);
    let (loss, dlogits) = sigmoid_bce(&c.logits.data, target.bits());
    let l = &params.layers;
    let mut grads = SegNetParams::zeros();
    let g = &mut grads.layers;

    let dz = Tensor { c: 1, h: x.h, w: x.w, data: dlogits };
    let dlast_in = conv_backward(&l[8], &c.last_in, &dz, &mut g[8]);
    let mut dcur = upsample_backward(&dlast_in); // grad wrt act[7]
    let mut skip_grads: [Option<Tensor>; 4] = [None, None, None, None];
    for d in (0..3).rev() {
        relu_backward_inplace(&c.act[5 + d], &mut dcur);
        let ds = conv_backward(&l[5 + d], &c.sums[d], &dcur, &mut g[5 + d]);
        skip_grads[3 - d] = Some(ds.clone());
        dcur = upsample_backward(&ds); // grad wrt act[4 + d]
    }
    // bottleneck
    relu_backward_inplace(&c.act[4], &mut dcur);
    let mut dpooled = conv_backward(&l[4], &c.pooled[3], &dcur, &mut g[4]);
    for stage in (0..4).rev() {
        let a = &c.act[stage];
        let mut da = maxpool_backward((a.c, a.h, a.w), &c.pool_arg[stage], &dpooled);
        if let Some(s) = &skip_grads[stage] {
            da.data.iter_mut().zip(&s.data).for_each(|(x, y)| *x += y);
        }
        relu_backward_inplace(a, &mut da);
        let input = if stage == 0 { &c.input } else { &c.pooled[stage - 1] };
        dpooled = conv_backward(&l[stage], input, &da, &mut g[stage]);
    }
    Ok((loss, grads))
}

/// Aspect-preserving resize into a square canvas with zero padding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Letterbox {
    pub src_w: usize,
    pub src_h: usize,
    pub size: usize,
    pub scale: f64,
    pub offset_x: usize,
    pub offset_y: usize,
    pub inner_w: usize,
    pub inner_h: usize,
}

impl Letterbox {
    pub fn new(src_w: usize, src_h: usize, size: usize) -> Self {
        let scale = size as f64 / src_w.max(src_h) as f64;
        let inner_w = ((src_w as f64 * scale).round() as usize).clamp(1, size);
        let inner_h = ((src_h as f64 * scale).round() as usize).clamp(1, size);
        Self {
            src_w,
            src_h,
            size,
            scale,
            offset_x: (size - inner_w) / 2,
            offset_y: (size - inner_h) / 2,
            inner_w,
            inner_h,
        }
    }

    pub fn apply(&self, image: &GrayImage) -> GrayImage {
        let mut out = vec![0u8; self.size * self.size];
        for y in 0..self.inner_h {
            let sy = (((y as f64 + 0.5) / self.scale) as usize).min(self.src_h - 1);
            for x in 0..self.inner_w {
                let sx = (((x as f64 + 0.5) / self.scale) as usize).min(self.src_w - 1);
                out[(y + self.offset_y) * self.size + x + self.offset_x] = image.get(sx, sy);
            }
        }
        GrayImage::new(self.size, self.size, out).expect("letterbox canvas")
    }

    /// Samples a canvas-sized map back onto the source pixel grid.
    pub fn invert(&self, prob: &ProbMap) -> ProbMap {
        let mut data = Vec::with_capacity(self.src_w * self.src_h);
        for y in 0..self.src_h {
            let cy = (((y as f64 + 0.5) * self.scale) as usize).min(self.inner_h - 1) + self.offset_y;
            for x in 0..self.src_w {
                let cx = (((x as f64 + 0.5) * self.scale) as usize).min(self.inner_w - 1) + self.offset_x;
                data.push(prob.data[cy * prob.width + cx]);
            }
        }
        ProbMap { width: self.src_w, height: self.src_h, data }
    }
}

/// Foreground probabilities on the source grid of an arbitrary-size image.
pub fn predict(params: &SegNetParams, image: &GrayImage) -> Result<ProbMap> {
    if image.width() == INPUT_SIZE && image.height() == INPUT_SIZE {
        return forward(params, image);
    }
    let lb = Letterbox::new(image.width(), image.height(), INPUT_SIZE);
    let prob = forward(params, &lb.apply(image))?;
    Ok(lb.invert(&prob))
}

pub fn segment(params: &SegNetParams, image: &GrayImage, threshold: f64) -> Result<BitMask> {
    Ok(binarize(&predict(params, image)?, threshold))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegTrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub binarize_threshold: f64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            momentum: 0.9,
            epochs: 30,
            batch_size: 4,
            seed: 1,
            binarize_threshold: DEFAULT_BINARIZE_THRESHOLD,
        }
    }
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning_rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SegTrainOutcome {
    pub params: SegNetParams,
    /// Mean training BCE of each epoch, measured during the epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch momentum SGD on `(input, target)` pairs.
///
/// Sample order is shuffled per epoch from `cfg.seed`; updates are applied
/// serially so results are reproducible.
pub fn train(samples: &[(Tensor, BitMask)], cfg: &SegTrainConfig) -> Result<SegTrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidInput("empty segmentation training set".into()));
    }
    let mut params = SegNetParams::init(cfg.seed);
    let mut velocity = SegNetParams::zeros();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5E6);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = SegNetParams::zeros();
            for &i in batch {
                let (x, t) = &samples[i];
                let (loss, g) = bce_loss_and_grads(&params, x, t)?;
                total += loss;
                grad.add_scaled(&g, 1.0 / batch.len() as f64);
            }
            velocity.scale(cfg.momentum);
            velocity.add_scaled(&grad, -cfg.learning_rate);
            params.add_scaled(&velocity, 1.0);
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("segmentation parameters diverged".into()));
        }
        epoch_losses.push(total / samples.len() as f64);
    }
    Ok(SegTrainOutcome { params, epoch_losses })
}

/// Mean BCE of `params` over a set of samples.
pub fn mean_loss(params: &SegNetParams, samples: &[(Tensor, BitMask)]) -> Result<f64> {
    let mut total = 0.0;
    for (x, t) in samples {
        total += bce_loss_and_grads(params, x, t)?.0;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Letterboxes a grayscale image and mask to the network input size.
pub fn prepare_sample(image: &GrayImage, fg: &BitMask) -> (Tensor, BitMask) {
    if image.width() == INPUT_SIZE && image.height() == INPUT_SIZE {
        return (Tensor::from_gray(image), fg.clone());
    }
    let lb = Letterbox::new(image.width(), image.height(), INPUT_SIZE);
    let target = BitMask::from_image(&lb.apply(&fg.to_image()));
    (Tensor::from_gray(&lb.apply(image)), target)
}

/// Trains on the `(image, fg)` pairs of a manifest's training split.
pub fn train_from_manifest(manifest: &crate::synthgen::Manifest, cfg: &SegTrainConfig) -> Result<SegTrainOutcome> {
    let mut samples = Vec::new();
    for r in manifest.records.iter().filter(|r| r.split == crate::synthgen::Split::Train) {
        let image = crate::masks::load_pgm(manifest.resolve(&r.image_path))?;
        let fg = crate::masks::load_mask(manifest.resolve(&r.fg_path))?;
        samples.push(prepare_sample(&image, &fg));
    }
    train(&samples, cfg)
}

/// Mean per-image IoU of `segment` against ground truth.
pub fn mean_iou(params: &SegNetParams, samples: &[(GrayImage, BitMask)], threshold: f64) -> Result<f64> {
    let mut total = 0.0;
    for (image, fg) in samples {
        total += segment(params, image, threshold)?.iou(fg)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

const SEG_MAGIC: &[u8; 8] = b"SEGNET1\0";
const SEG_FORMAT: &str = "segnet";

pub fn encode_params(params: &SegNetParams) -> Vec<u8> {
    let mut out = SEG_MAGIC.to_vec();
    let mut record = |name: String, shape: [u32; 4], values: &[f64]| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for d in shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    };
    for l in &params.layers {
        let (o, i) = (l.out_ch as u32, l.in_ch as u32);
        record(format!("{}.weight", l.name), [o, i, K as u32, K as u32], &l.weight);
        record(format!("{}.bias", l.name), [o, 1, 1, 1], &l.bias);
    }
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<SegNetParams> {
    if bytes.len() < 8 || &bytes[..8] != SEG_MAGIC {
        return Err(Error::BadMagic { format: SEG_FORMAT, reason: "expected SEGNET1 header".into() });
    }
    let mut r = ByteReader::new(bytes, 8, SEG_FORMAT);
    let mut params = SegNetParams::zeros();
    for l in &mut params.layers {
        let (o, i) = (l.out_ch as u32, l.in_ch as u32);
        let expected =
            [(format!("{}.weight", l.name), [o, i, K as u32, K as u32]), (format!("{}.bias", l.name), [o, 1, 1, 1])];
        for (idx, (name, shape)) in expected.into_iter().enumerate() {
            let at = r.pos;
            let len = r.u32()? as usize;
            let got_name = r.bytes(len)?;
            if got_name != name.as_bytes() {
                return Err(r.err(at, format!("expected record {name}")));
            }
            let at = r.pos;
            let got_shape = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
            if got_shape != shape {
                return Err(r.err(at, format!("{name} has shape {got_shape:?}, expected {shape:?}")));
            }
            let dst = if idx == 0 { &mut l.weight } else { &mut l.bias };
            for v in dst.iter_mut() {
                *v = r.f32()? as f64;
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(r.err(r.pos, "trailing bytes".into()));
    }
    Ok(params)
}

pub fn save_params(params: &SegNetParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_params(params)).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<SegNetParams> {
    let path = path.as_ref();
    decode_params(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Little-endian cursor reporting malformed data with byte offsets.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub pos: usize,
    format: &'static str,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8], pos: usize, format: &'static str) -> Self {
        Self { bytes, pos, format }
    }

    pub fn err(&self, offset: usize, reason: String) -> Error {
        Error::Malformed { format: self.format, offset: offset as u64, reason }
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(self.pos, format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
