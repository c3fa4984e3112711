//! The miniature hyper-feature detector.
//!
//! ```text
//! image [in, S, S]
//!   conv3x3(c1) + ReLU -> maxpool2                      -> skip  [c1, S/2, S/2]
//!   conv3x3(c2) + ReLU -> maxpool2                              [c2, S/4, S/4]
//!   4 x (dilated conv3x3(c2) + ReLU), rates r1..r4              [c2, S/4, S/4]
//!   deconv2x2 stride 2 (c1) + skip, ReLU   (hyper feature map)  [c1, S/2, S/2]
//!   head conv3x3 stride s: A*(C+1) class + A*4 offset channels  [.., G, G]
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::anchors::{self, AnchorConfig};
use super::layers::{
    self, conv2d, conv2d_backward, conv_out_size, conv_transpose2d_backward,
    maxpool2, maxpool2_backward, relu_backward_inplace, relu_inplace,
};
use crate::error::{Error, Result};
use crate::geometry::{nms, Box, Detection};
use crate::loss::softmax;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub dilation_rates: [usize; 4],
    pub head_stride: usize,
    pub num_classes: usize,
    pub anchors: AnchorConfig,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            image_size: 64,
            in_channels: 1,
            conv1_channels: 8,
            conv2_channels: 16,
            dilation_rates: [1, 2, 4, 8],
            head_stride: 2,
            num_classes: 3,
            anchors: AnchorConfig::default(),
        }
    }
}

/// Feature-map sizes implied by a [`NetConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub full: usize,
    pub half: usize,
    pub quarter: usize,
    pub grid: usize,
    pub boxes_per_location: usize,
    pub head_channels: usize,
}

impl NetConfig {
    pub fn validate(&self) -> Result<Layout> {
        let s = self.image_size;
        if s == 0 || !s.is_multiple_of(4) {
            return Err(Error::config("image_size must be a positive multiple of 4"));
        }
        if self.in_channels == 0 || self.conv1_channels == 0 || self.conv2_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be >= 1"));
        }
        if self.dilation_rates.contains(&0) {
            return Err(Error::config("dilation rates must be positive"));
        }
        if self.head_stride == 0 {
            return Err(Error::config("head_stride must be >= 1"));
        }
        let a = self.anchors.boxes_per_location();
        if a == 0 {
            return Err(Error::config("at least one anchor scale and aspect ratio required"));
        }
        if self.anchors.scales.iter().chain(&self.anchors.aspect_ratios).any(|v| !(*v > 0.0)) {
            return Err(Error::config("anchor scales and ratios must be positive"));
        }
        let half = s / 2;
        let grid = conv_out_size(half, 3, self.head_stride, 1)
            .ok_or_else(|| Error::config("head does not fit the hyper feature map"))?;
        Ok(Layout {
            full: s,
            half,
            quarter: s / 4,
            grid,
            boxes_per_location: a,
            head_channels: a * (self.num_classes + 5),
        })
    }
}

/// Parameter tensor slots, in storage order.
pub const PARAM_NAMES: [&str; 16] = [
    "conv1.w", "conv1.b", "conv2.w", "conv2.b", "dil1.w", "dil1.b", "dil2.w", "dil2.b", "dil3.w",
    "dil3.b", "dil4.w", "dil4.b", "deconv.w", "deconv.b", "head.w", "head.b",
];

const CONV1: usize = 0;
const CONV2: usize = 2;
const DIL: usize = 4;
const DECONV: usize = 12;
const HEAD: usize = 14;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub config: NetConfig,
    pub seed: u64,
    pub tensors: Vec<Tensor>,
}

fn param_shapes(cfg: &NetConfig, layout: &Layout) -> Vec<Vec<usize>> {
    let (c0, c1, c2) = (cfg.in_channels, cfg.conv1_channels, cfg.conv2_channels);
    let hc = layout.head_channels;
    let mut v = vec![vec![c1, c0, 3, 3], vec![c1], vec![c2, c1, 3, 3], vec![c2]];
    for _ in 0..4 {
        v.push(vec![c2, c2, 3, 3]);
        v.push(vec![c2]);
    }
    v.push(vec![c2, c1, 2, 2]);
    v.push(vec![c1]);
    v.push(vec![hc, c1, 3, 3]);
    v.push(vec![hc]);
    v
}

impl NetworkParams {
    /// He-uniform weights drawn from `seed`; biases start at zero.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        let layout = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = param_shapes(&config, &layout)
            .iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(shape);
                }
                // fan-in taken as the product of the trailing three dims
                let fan_in = shape[1] * shape[2] * shape[3];
                let bound = (6.0 / fan_in as f64).sqrt();
                let n = shape.iter().product();
                Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
                    .expect("shape product")
            })
            .collect();
        Ok(NetworkParams {
            config,
            seed,
            tensors,
        })
    }

    pub fn zeros(config: NetConfig) -> Result<Self> {
        let layout = config.validate()?;
        let tensors = param_shapes(&config, &layout).iter().map(|s| Tensor::zeros(s)).collect();
        Ok(NetworkParams {
            config,
            seed: 0,
            tensors,
        })
    }

    pub fn layout(&self) -> Layout {
        self.config.validate().expect("validated at construction")
    }

    /// Checks tensor count and shapes against the config.
    pub fn check_shapes(&self) -> Result<()> {
        let layout = self.config.validate()?;
        let want = param_shapes(&self.config, &layout);
        if want.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, found {}",
                want.len(),
                self.tensors.len()
            )));
        }
        for ((w, t), name) in want.iter().zip(&self.tensors).zip(PARAM_NAMES) {
            if t.shape() != w.as_slice() {
                return Err(Error::Shape(format!(
                    "{name}: expected {w:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    fn w(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    fn b(&self, slot: usize) -> &[f64] {
        self.tensors[slot + 1].data()
    }
}

/// Per-default-box predictions of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// `[G*G*A, C+1]`, rows in default-box order.
    pub cls_logits: Tensor,
    /// `[G*G*A, 4]`.
    pub loc_offsets: Tensor,
    pub default_boxes: Vec<Box>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Tensor,
    a1: Tensor,
    p1: Tensor,
    idx1: Vec<u32>,
    a2: Tensor,
    p2: Tensor,
    idx2: Vec<u32>,
    dil: Vec<Tensor>,
    hyper: Tensor,
}

impl ForwardCache {
    /// ReLU on/off states and max-pool winners. Two forward passes with equal
    /// fingerprints lie on the same smooth piece of the network.
    pub fn activation_fingerprint(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for t in [&self.a1, &self.a2].into_iter().chain(&self.dil).chain([&self.hyper]) {
            out.extend(t.data().iter().map(|&v| u32::from(v > 0.0)));
        }
        out.extend(&self.idx1);
        out.extend(&self.idx2);
        out
    }
}

fn rearrange_head(raw: &Tensor, layout: &Layout, k: usize) -> (Tensor, Tensor) {
    let (g, a) = (layout.grid, layout.boxes_per_location);
    let gg = g * g;
    let mut cls = Tensor::zeros(&[gg * a, k]);
    let mut loc = Tensor::zeros(&[gg * a, 4]);
    let rd = raw.data();
    for cell in 0..gg {
        for anc in 0..a {
            let row = cell * a + anc;
            for c in 0..k {
                cls.data_mut()[row * k + c] = rd[(anc * k + c) * gg + cell];
            }
            for l in 0..4 {
                loc.data_mut()[row * 4 + l] = rd[(a * k + anc * 4 + l) * gg + cell];
            }
        }
    }
    (cls, loc)
}

/// Inverse of the head rearrangement for gradients.
fn scatter_head_grad(g_cls: &Tensor, g_loc: &Tensor, layout: &Layout, k: usize) -> Tensor {
    let (g, a) = (layout.grid, layout.boxes_per_location);
    let gg = g * g;
    let mut raw = Tensor::zeros(&[layout.head_channels, g, g]);
    let rd = raw.data_mut();
    for cell in 0..gg {
        for anc in 0..a {
            let row = cell * a + anc;
            for c in 0..k {
                rd[(anc * k + c) * gg + cell] = g_cls.data()[row * k + c];
            }
            for l in 0..4 {
                rd[(a * k + anc * 4 + l) * gg + cell] = g_loc.data()[row * 4 + l];
            }
        }
    }
    raw
}

pub fn forward_cached(params: &NetworkParams, image: &Tensor) -> Result<(HeadOutput, ForwardCache)> {
    let cfg = &params.config;
    let layout = cfg.validate()?;
    if image.shape() != [cfg.in_channels, layout.full, layout.full] {
        return Err(Error::Shape(format!(
            "image must be {:?}, got {:?}",
            [cfg.in_channels, layout.full, layout.full],
            image.shape()
        )));
    }
    let mut a1 = conv2d(image, params.w(CONV1), Some(params.b(CONV1)), 1, 1, 1)?;
    relu_inplace(&mut a1);
    let (p1, idx1) = maxpool2(&a1)?;
    let mut a2 = conv2d(&p1, params.w(CONV2), Some(params.b(CONV2)), 1, 1, 1)?;
    relu_inplace(&mut a2);
    let (p2, idx2) = maxpool2(&a2)?;
    let block = layers::build_dilated_block(cfg.conv2_channels, cfg.dilation_rates)?;
    let dil = block.forward(
        &p2,
        &(0..4).map(|l| params.w(DIL + 2 * l)).collect::<Vec<_>>(),
        &(0..4).map(|l| params.b(DIL + 2 * l)).collect::<Vec<_>>(),
    )?;
    let hyper = layers::deconv_skip_forward(&dil[3], &p1, params.w(DECONV), params.b(DECONV))?;
    let raw = conv2d(&hyper, params.w(HEAD), Some(params.b(HEAD)), cfg.head_stride, 1, 1)?;
    let k = cfg.num_classes + 1;
    let (cls_logits, loc_offsets) = rearrange_head(&raw, &layout, k);
    let head = HeadOutput {
        cls_logits,
        loc_offsets,
        default_boxes: anchors::default_boxes(&cfg.anchors, layout.grid, layout.full),
    };
    let cache = ForwardCache {
        input: image.clone(),
        a1,
        p1,
        idx1,
        a2,
        p2,
        idx2,
        dil,
        hyper,
    };
    Ok((head, cache))
}

pub fn forward(params: &NetworkParams, image: &Tensor) -> Result<HeadOutput> {
    forward_cached(params, image).map(|(h, _)| h)
}

/// Gradients for every parameter tensor, aligned with `params.tensors`.
pub fn backward(
    params: &NetworkParams,
    cache: &ForwardCache,
    grad_cls: &Tensor,
    grad_loc: &Tensor,
) -> Result<Vec<Tensor>> {
    let cfg = &params.config;
    let layout = cfg.validate()?;
    let k = cfg.num_classes + 1;
    let rows = layout.grid * layout.grid * layout.boxes_per_location;
    if grad_cls.shape() != [rows, k] || grad_loc.shape() != [rows, 4] {
        return Err(Error::Shape("head gradient shape mismatch".into()));
    }
    let mut grads: Vec<Tensor> = params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut put = |slot: usize, g: layers::ConvGrads| -> Option<Tensor> {
        grads[slot] = g.weight;
        grads[slot + 1] = Tensor::from_vec(&[g.bias.len()], g.bias).expect("bias length");
        g.input
    };

    let g_raw = scatter_head_grad(grad_cls, grad_loc, &layout, k);
    let mut g_hyper = put(
        HEAD,
        conv2d_backward(&cache.hyper, params.w(HEAD), &g_raw, cfg.head_stride, 1, 1, true)?,
    )
    .expect("input grad requested");
    relu_backward_inplace(&mut g_hyper, &cache.hyper);
    // hyper = relu(deconv(dil4) + p1): the skip branch receives g_hyper unchanged
    let mut g_p1 = g_hyper.clone();
    let mut g_x = put(
        DECONV,
        conv_transpose2d_backward(&cache.dil[3], params.w(DECONV), &g_hyper, 2, 0)?,
    )
    .expect("input grad requested");
    let block = layers::build_dilated_block(cfg.conv2_channels, cfg.dilation_rates)?;
    for l in (0..4).rev() {
        relu_backward_inplace(&mut g_x, &cache.dil[l]);
        let x = if l == 0 { &cache.p2 } else { &cache.dil[l - 1] };
        let slot = DIL + 2 * l;
        g_x = put(
            slot,
            conv2d_backward(x, params.w(slot), &g_x, 1, block.padding(l), cfg.dilation_rates[l], true)?,
        )
        .expect("input grad requested");
    }
    let mut g_a2 = maxpool2_backward(&g_x, &cache.idx2, cache.a2.shape());
    relu_backward_inplace(&mut g_a2, &cache.a2);
    let g = conv2d_backward(&cache.p1, params.w(CONV2), &g_a2, 1, 1, 1, true)?;
    g_p1.add_assign(g.input.as_ref().expect("input grad requested"));
    put(CONV2, g);
    let mut g_a1 = maxpool2_backward(&g_p1, &cache.idx1, cache.a1.shape());
    relu_backward_inplace(&mut g_a1, &cache.a1);
    put(CONV1, conv2d_backward(&cache.input, params.w(CONV1), &g_a1, 1, 1, 1, false)?);
    Ok(grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    /// Cap on detections kept per image after suppression.
    pub max_detections: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            score_threshold: 0.05,
            nms_threshold: 0.45,
            max_detections: 100,
        }
    }
}

/// Softmax scores per object class, box offsets decoded against the default
/// boxes, thresholded, then per-class NMS.
pub fn decode_detections(head: &HeadOutput, variances: [f64; 2], cfg: &DecodeConfig) -> Vec<Detection> {
    let k = head.cls_logits.shape()[1];
    let mut dets = Vec::new();
    for (i, anchor) in head.default_boxes.iter().enumerate() {
        let p = softmax(head.cls_logits.row(i));
        let mut decoded = None;
        for (c, &score) in p.iter().enumerate().take(k).skip(1) {
            if score > cfg.score_threshold {
                let bbox = *decoded
                    .get_or_insert_with(|| anchors::decode(head.loc_offsets.row(i), anchor, variances));
                if bbox.is_valid() {
                    dets.push(Detection { cls: c, score, bbox });
                }
            }
        }
    }
    let mut kept = nms(&dets, cfg.nms_threshold);
    kept.truncate(cfg.max_detections);
    kept
}

/// Forward pass plus decoding.
pub fn detect(params: &NetworkParams, image: &Tensor, cfg: &DecodeConfig) -> Result<Vec<Detection>> {
    let head = forward(params, image)?;
    Ok(decode_detections(&head, params.config.anchors.variances, cfg))
}
