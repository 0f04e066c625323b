//! Tiny one-stage anchor detector.
//!
//! The network is split at a junction: the feature extractor (a stack of
//! strided conv blocks) and the detection part (per-level heads plus the
//! extra downsampling blocks feeding the coarser levels). Gradients that
//! cross the junction can be reversed and scaled per loss stream, which is
//! how the adversarial min-max is trained with one backward pass.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxops::{decode_box, nms, AnchorLevel, AnchorSet, AnchorShape, Detection};
use crate::error::{Error, Result};
use crate::nn::{conv_backward, conv_forward, ConvCache, ConvShape};
use crate::par::{self, Exec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Foreground classes K; outputs have K+1 scores.
    pub num_classes: usize,
    /// Feature extractor blocks.
    pub backbone: Vec<Block>,
    /// Downsampling blocks between consecutive detection levels.
    pub extra: Vec<Block>,
    pub levels: Vec<AnchorLevel>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let shape = |size| AnchorShape { size, aspect: 1.0 };
        ArchConfig {
            image_size: 64,
            in_channels: 3,
            num_classes: 3,
            backbone: vec![
                Block { channels: 12, stride: 2 },
                Block { channels: 24, stride: 2 },
                Block { channels: 32, stride: 2 },
                Block { channels: 32, stride: 1 },
            ],
            extra: vec![Block { channels: 32, stride: 2 }],
            levels: vec![
                AnchorLevel {
                    grid: 8,
                    shapes: [0.1, 0.13, 0.16, 0.2, 0.25, 0.3].map(shape).to_vec(),
                },
                AnchorLevel {
                    grid: 4,
                    shapes: [0.3, 0.36, 0.43, 0.52, 0.62, 0.75].map(shape).to_vec(),
                },
            ],
        }
    }
}

/// Where a layer sits relative to the junction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Features,
    Head,
}

#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub name: String,
    pub shape: ConvShape,
    pub offset: usize,
    pub part: Part,
}

/// Resolved layer table for an [`ArchConfig`].
#[derive(Debug, Clone)]
pub struct Layout {
    pub layers: Vec<LayerSpec>,
    pub backbone: Vec<usize>,
    pub heads: Vec<usize>,
    pub extra: Vec<usize>,
    pub feature_len: usize,
    pub total_len: usize,
    /// Spatial size of each level's map.
    pub level_sizes: Vec<usize>,
    pub feature_size: usize,
    pub feature_channels: usize,
}

impl ArchConfig {
    pub fn classes_with_background(&self) -> usize {
        self.num_classes + 1
    }

    pub fn num_anchors(&self) -> usize {
        self.levels.iter().map(|l| l.grid * l.grid * l.shapes.len()).sum()
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.image_size * self.image_size
    }

    pub fn anchors(&self) -> Result<AnchorSet> {
        AnchorSet::generate(&self.levels)
    }

    pub fn layout(&self) -> Result<Layout> {
        if self.backbone.is_empty() || self.levels.is_empty() || self.num_classes == 0 {
            return Err(Error::InvalidConfig("empty backbone, levels or classes".into()));
        }
        if self.extra.len() + 1 != self.levels.len() {
            return Err(Error::InvalidConfig(format!(
                "{} levels need {} extra blocks, got {}",
                self.levels.len(),
                self.levels.len() - 1,
                self.extra.len()
            )));
        }
        let mut layers = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: ConvShape, part: Part, layers: &mut Vec<LayerSpec>| {
            layers.push(LayerSpec {
                name,
                shape,
                offset,
                part,
            });
            offset += shape.param_len();
            layers.len() - 1
        };

        let mut size = self.image_size;
        let mut ch = self.in_channels;
        let mut backbone = Vec::new();
        for (i, b) in self.backbone.iter().enumerate() {
            let shape = ConvShape {
                cin: ch,
                cout: b.channels,
                stride: b.stride.max(1),
                relu: true,
            };
            backbone.push(push(format!("features.conv{i}"), shape, Part::Features, &mut layers));
            size = shape.out_size(size);
            ch = b.channels;
        }
        let feature_size = size;
        let feature_channels = ch;
        let feature_len = layers.iter().map(|l| l.shape.param_len()).sum();

        let mut heads = Vec::new();
        let mut extra = Vec::new();
        let mut level_sizes = Vec::new();
        for (l, level) in self.levels.iter().enumerate() {
            if l > 0 {
                let b = self.extra[l - 1];
                let shape = ConvShape {
                    cin: ch,
                    cout: b.channels,
                    stride: b.stride.max(1),
                    relu: true,
                };
                extra.push(push(format!("head.extra{}", l - 1), shape, Part::Head, &mut layers));
                size = shape.out_size(size);
                ch = b.channels;
            }
            if level.grid != size {
                return Err(Error::InvalidConfig(format!(
                    "level {l} grid {} does not match feature map size {size}",
                    level.grid
                )));
            }
            level_sizes.push(size);
            let shape = ConvShape {
                cin: ch,
                cout: level.shapes.len() * (self.classes_with_background() + 4),
                stride: 1,
                relu: false,
            };
            heads.push(push(format!("head.det{l}"), shape, Part::Head, &mut layers));
        }
        let total_len = offset;
        Ok(Layout {
            layers,
            backbone,
            heads,
            extra,
            feature_len,
            total_len,
            level_sizes,
            feature_size,
            feature_channels,
        })
    }
}

/// All detector parameters in one flat vector; feature-extractor layers come first.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub arch: ArchConfig,
    pub values: Vec<f64>,
}

/// Per-anchor raw network output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct RawOutput {
    pub num_classes: usize,
    /// `n × (K+1)`, row-major.
    pub class_logits: Vec<f64>,
    /// `n × 4`, row-major.
    pub box_offsets: Vec<f64>,
}

impl RawOutput {
    pub fn len(&self) -> usize {
        self.box_offsets.len() / 4
    }

    pub fn is_empty(&self) -> bool {
        self.box_offsets.is_empty()
    }

    pub fn logits(&self, i: usize) -> &[f64] {
        &self.class_logits[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn offsets(&self, i: usize) -> [f64; 4] {
        let o = &self.box_offsets[i * 4..i * 4 + 4];
        [o[0], o[1], o[2], o[3]]
    }

    /// Row-wise softmax of the class logits.
    pub fn class_probs(&self) -> Vec<f64> {
        let mut p = self.class_logits.clone();
        for row in p.chunks_mut(self.num_classes) {
            softmax_in_place(row);
        }
        p
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// What happens to a gradient stream when it crosses from the head into the
/// feature extractor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Junction {
    Plain,
    /// Gradient reversal: multiply by `-lambda`. Identity in the forward pass.
    Reversed { lambda: f64 },
}

impl Junction {
    fn factor(self) -> f64 {
        match self {
            Junction::Plain => 1.0,
            Junction::Reversed { lambda } => -lambda,
        }
    }
}

/// Upstream gradient w.r.t. one image's raw output.
#[derive(Debug, Clone, Copy)]
pub struct HeadGrad<'a> {
    pub dlogits: &'a [f64],
    pub doffsets: &'a [f64],
    pub junction: Junction,
}

/// Saved activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    backbone: Vec<ConvCache>,
    heads: Vec<ConvCache>,
    extra: Vec<ConvCache>,
}

impl Tape {
    /// Feature-extractor output (CHW).
    pub fn features(&self) -> &[f64] {
        self.backbone.last().expect("non-empty backbone").output()
    }
}

impl DetectorParams {
    /// He-style fan-in initialization; biases start at zero.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        let layout = arch.layout()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; layout.total_len];
        for layer in &layout.layers {
            let fan_in = (layer.shape.cin * 9) as f64;
            let gain = if layer.shape.relu { 2.0 } else { 1.0 };
            let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("positive std");
            for v in &mut values[layer.offset..layer.offset + layer.shape.weight_len()] {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(DetectorParams { arch, values })
    }

    pub fn zeros(arch: ArchConfig) -> Result<Self> {
        let n = arch.layout()?.total_len;
        Ok(DetectorParams {
            arch,
            values: vec![0.0; n],
        })
    }

    pub fn layout(&self) -> Layout {
        self.arch.layout().expect("validated at construction")
    }

    fn layer_params<'a>(&'a self, spec: &LayerSpec) -> &'a [f64] {
        &self.values[spec.offset..spec.offset + spec.shape.param_len()]
    }

    /// Per-parameter flag: true for the box-offset outputs of every head.
    pub fn localization_mask(&self) -> Vec<bool> {
        let layout = self.layout();
        let k1 = self.arch.classes_with_background();
        let mut mask = vec![false; layout.total_len];
        for (l, &hi) in layout.heads.iter().enumerate() {
            let spec = &layout.layers[hi];
            let a = self.arch.levels[l].shapes.len();
            let per_out = spec.shape.cin * 9;
            for o in a * k1..a * (k1 + 4) {
                mask[spec.offset + o * per_out..spec.offset + (o + 1) * per_out].fill(true);
                mask[spec.offset + spec.shape.weight_len() + o] = true;
            }
        }
        mask
    }

    /// Forward one image, keeping activations for [`DetectorParams::backward`].
    pub fn forward(&self, image: &[f64]) -> Result<(RawOutput, Tape)> {
        let arch = &self.arch;
        if image.len() != arch.input_len() {
            return Err(Error::ShapeMismatch {
                expected: format!(
                    "{}x{}x{} = {}",
                    arch.in_channels,
                    arch.image_size,
                    arch.image_size,
                    arch.input_len()
                ),
                got: image.len().to_string(),
            });
        }
        let layout = self.layout();
        let mut size = arch.image_size;
        let mut backbone = Vec::with_capacity(layout.backbone.len());
        let mut cur: &[f64] = image;
        for &li in &layout.backbone {
            let spec = &layout.layers[li];
            backbone.push(conv_forward(spec.shape, self.layer_params(spec), cur, size, size));
            size = spec.shape.out_size(size);
            cur = backbone.last().unwrap().output();
        }

        let k1 = arch.classes_with_background();
        let n = arch.num_anchors();
        let mut class_logits = vec![0.0; n * k1];
        let mut box_offsets = vec![0.0; n * 4];
        let mut heads = Vec::with_capacity(layout.heads.len());
        let mut extra: Vec<ConvCache> = Vec::with_capacity(layout.extra.len());
        let mut base = 0;
        for (l, &hi) in layout.heads.iter().enumerate() {
            if l > 0 {
                let spec = &layout.layers[layout.extra[l - 1]];
                let input: &[f64] = if l == 1 {
                    backbone.last().unwrap().output()
                } else {
                    extra.last().unwrap().output()
                };
                extra.push(conv_forward(spec.shape, self.layer_params(spec), input, size, size));
                size = spec.shape.out_size(size);
            }
            let input: &[f64] = if l == 0 {
                backbone.last().unwrap().output()
            } else {
                extra.last().unwrap().output()
            };
            let spec = &layout.layers[hi];
            let cache = conv_forward(spec.shape, self.layer_params(spec), input, size, size);
            let a = arch.levels[l].shapes.len();
            let cells = size * size;
            let out = cache.output();
            for cell in 0..cells {
                for s in 0..a {
                    let anchor = base + cell * a + s;
                    for k in 0..k1 {
                        class_logits[anchor * k1 + k] = out[(s * k1 + k) * cells + cell];
                    }
                    for j in 0..4 {
                        box_offsets[anchor * 4 + j] = out[(a * k1 + s * 4 + j) * cells + cell];
                    }
                }
            }
            base += cells * a;
            heads.push(cache);
        }
        Ok((
            RawOutput {
                num_classes: k1,
                class_logits,
                box_offsets,
            },
            Tape {
                backbone,
                heads,
                extra,
            },
        ))
    }

    /// Forward without keeping activations.
    pub fn forward_batch(&self, exec: Exec, images: &[Vec<f64>]) -> Result<Vec<RawOutput>> {
        par::map(exec, images, |_, img| self.forward(img).map(|(raw, _)| raw))
            .into_iter()
            .collect()
    }

    /// Backward through the head for one gradient stream. Accumulates head
    /// parameter gradients into `grad` and returns the gradient w.r.t. the
    /// feature-extractor output, before the junction factor is applied.
    fn head_backward(&self, layout: &Layout, tape: &Tape, g: &HeadGrad, grad: &mut [f64]) -> Vec<f64> {
        let k1 = self.arch.classes_with_background();
        let mut base_of = Vec::with_capacity(layout.heads.len());
        let mut base = 0;
        for (l, level) in self.arch.levels.iter().enumerate() {
            base_of.push(base);
            base += layout.level_sizes[l] * layout.level_sizes[l] * level.shapes.len();
        }
        let mut carry: Option<Vec<f64>> = None;
        for l in (0..layout.heads.len()).rev() {
            let spec = &layout.layers[layout.heads[l]];
            let a = self.arch.levels[l].shapes.len();
            let cells = layout.level_sizes[l] * layout.level_sizes[l];
            let mut dout = vec![0.0; spec.shape.cout * cells];
            for cell in 0..cells {
                for s in 0..a {
                    let anchor = base_of[l] + cell * a + s;
                    for k in 0..k1 {
                        dout[(s * k1 + k) * cells + cell] = g.dlogits[anchor * k1 + k];
                    }
                    for j in 0..4 {
                        dout[(a * k1 + s * 4 + j) * cells + cell] = g.doffsets[anchor * 4 + j];
                    }
                }
            }
            let range = spec.offset..spec.offset + spec.shape.param_len();
            let mut dmap = conv_backward(
                spec.shape,
                &self.values[range.clone()],
                &tape.heads[l],
                dout,
                &mut grad[range],
                true,
            )
            .unwrap();
            if let Some(c) = carry.take() {
                for (d, v) in dmap.iter_mut().zip(c) {
                    *d += v;
                }
            }
            if l == 0 {
                return dmap;
            }
            let espec = &layout.layers[layout.extra[l - 1]];
            let range = espec.offset..espec.offset + espec.shape.param_len();
            carry = conv_backward(
                espec.shape,
                &self.values[range.clone()],
                &tape.extra[l - 1],
                dmap,
                &mut grad[range],
                true,
            );
        }
        unreachable!("at least one level")
    }

    /// Accumulate parameter gradients for one image into `grad`.
    ///
    /// Each stream runs through the head separately; its feature gradient is
    /// multiplied by the stream's junction factor before the streams are
    /// summed and sent through the feature extractor. `feature_grad` adds a
    /// gradient w.r.t. the features from outside the detector (already scaled).
    pub fn backward(
        &self,
        tape: &Tape,
        streams: &[HeadGrad],
        feature_grad: Option<&[f64]>,
        grad: &mut [f64],
    ) -> Result<()> {
        let layout = self.layout();
        if grad.len() != layout.total_len {
            return Err(Error::ShapeMismatch {
                expected: layout.total_len.to_string(),
                got: grad.len().to_string(),
            });
        }
        let n = self.arch.num_anchors();
        let k1 = self.arch.classes_with_background();
        let flen = tape.features().len();
        let mut dfeat = vec![0.0; flen];
        let mut any = false;
        for s in streams {
            if s.dlogits.len() != n * k1 || s.doffsets.len() != n * 4 {
                return Err(Error::ShapeMismatch {
                    expected: format!("{}x{} logits and {}x4 offsets", n, k1, n),
                    got: format!("{} and {}", s.dlogits.len(), s.doffsets.len()),
                });
            }
            let d = self.head_backward(&layout, tape, s, grad);
            let f = s.junction.factor();
            for (a, v) in dfeat.iter_mut().zip(d) {
                *a += f * v;
            }
            any = true;
        }
        if let Some(extra) = feature_grad {
            if extra.len() != flen {
                return Err(Error::ShapeMismatch {
                    expected: flen.to_string(),
                    got: extra.len().to_string(),
                });
            }
            for (a, v) in dfeat.iter_mut().zip(extra) {
                *a += v;
            }
            any = true;
        }
        if !any {
            return Ok(());
        }
        let mut d = dfeat;
        for (bi, &li) in layout.backbone.iter().enumerate().rev() {
            let spec = &layout.layers[li];
            let range = spec.offset..spec.offset + spec.shape.param_len();
            match conv_backward(
                spec.shape,
                &self.values[range.clone()],
                &tape.backbone[bi],
                d,
                &mut grad[range],
                bi > 0,
            ) {
                Some(next) => d = next,
                None => break,
            }
        }
        Ok(())
    }

}

/// Decode all anchors into detections (boxes clipped to the unit square).
pub fn decode_detections(anchors: &AnchorSet, raw: &RawOutput) -> Vec<Detection> {
        let probs = raw.class_probs();
        let k1 = raw.num_classes;
        (0..raw.len())
            .map(|i| {
                let mut off = raw.offsets(i);
                // exp() of the size terms is bounded so decoding stays finite.
                off[2] = off[2].clamp(-8.0, 8.0);
                off[3] = off[3].clamp(-8.0, 8.0);
                let bbox = decode_box(&anchors.boxes[i], &off)
                    .map(|b| b.clip_unit())
                    .unwrap_or(anchors.boxes[i]);
                Detection::new(bbox, probs[i * k1..(i + 1) * k1].to_vec(), i)
            })
            .collect()
}

impl DetectorParams {
    /// All detections O and the post-NMS finals O* for each image.
    pub fn predict(
        &self,
        exec: Exec,
        images: &[Vec<f64>],
        conf_thresh: f64,
        nms_iou: f64,
    ) -> Result<Vec<Prediction>> {
        let anchors = self.arch.anchors()?;
        par::map(exec, images, |_, img| {
            let (raw, _) = self.forward(img)?;
            postprocess(&anchors, &raw, conf_thresh, nms_iou)
        })
        .into_iter()
        .collect()
    }
}

/// Decode a raw output into O and O*.
pub fn postprocess(anchors: &AnchorSet, raw: &RawOutput, conf_thresh: f64, nms_iou: f64) -> Result<Prediction> {
    let all = decode_detections(anchors, raw);
    let finals = nms(&all, nms_iou, conf_thresh)?;
    Ok(Prediction { all, finals })
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub all: Vec<Detection>,
    pub finals: Vec<Detection>,
}

/// Domain classifier for the feature-alignment baseline: global average pool
/// of the features, one hidden ReLU layer, one logit.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainClassifier {
    pub channels: usize,
    pub hidden: usize,
    pub values: Vec<f64>,
}

pub struct DomainTape {
    pooled: Vec<f64>,
    hidden: Vec<f64>,
    spatial: usize,
}

impl DomainClassifier {
    pub fn init(channels: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD0_4A1A);
        let len = hidden * channels + hidden + hidden + 1;
        let mut values = vec![0.0; len];
        let n1 = Normal::new(0.0, (2.0 / channels as f64).sqrt()).unwrap();
        for v in &mut values[..hidden * channels] {
            *v = n1.sample(&mut rng);
        }
        let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).unwrap();
        let off = hidden * channels + hidden;
        for v in &mut values[off..off + hidden] {
            *v = n2.sample(&mut rng);
        }
        DomainClassifier {
            channels,
            hidden,
            values,
        }
    }

    pub fn forward(&self, features: &[f64]) -> (f64, DomainTape) {
        let spatial = features.len() / self.channels;
        let pooled: Vec<f64> = features
            .chunks(spatial)
            .map(|c| c.iter().sum::<f64>() / spatial as f64)
            .collect();
        let (w1, rest) = self.values.split_at(self.hidden * self.channels);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.hidden);
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|h| {
                let z = b1[h]
                    + w1[h * self.channels..(h + 1) * self.channels]
                        .iter()
                        .zip(&pooled)
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                z.max(0.0)
            })
            .collect();
        let logit = b2[0] + w2.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>();
        (
            logit,
            DomainTape {
                pooled,
                hidden,
                spatial,
            },
        )
    }

    /// Accumulates parameter gradients and returns dL/dfeatures.
    pub fn backward(&self, tape: &DomainTape, dlogit: f64, grad: &mut [f64]) -> Vec<f64> {
        let hc = self.hidden * self.channels;
        let w2 = &self.values[hc + self.hidden..hc + 2 * self.hidden];
        let w1 = &self.values[..hc];
        grad[hc + 2 * self.hidden] += dlogit;
        let mut dpooled = vec![0.0; self.channels];
        for h in 0..self.hidden {
            grad[hc + self.hidden + h] += dlogit * tape.hidden[h];
            if tape.hidden[h] <= 0.0 {
                continue;
            }
            let dz = dlogit * w2[h];
            grad[hc + h] += dz;
            for c in 0..self.channels {
                grad[h * self.channels + c] += dz * tape.pooled[c];
                dpooled[c] += dz * w1[h * self.channels + c];
            }
        }
        let mut dfeat = Vec::with_capacity(self.channels * tape.spatial);
        for d in dpooled {
            dfeat.extend(std::iter::repeat(d / tape.spatial as f64).take(tape.spatial));
        }
        dfeat
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"UDADCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const BYTE_ORDER_TAG: &[u8; 4] = b"f32l";

impl DetectorParams {
    /// Binary checkpoint: magic, version, byte-order tag, architecture JSON,
    /// then one named little-endian f32 array per layer.
    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(BYTE_ORDER_TAG);
        let arch = serde_json::to_vec(&self.arch)?;
        buf.extend_from_slice(&(arch.len() as u32).to_le_bytes());
        buf.extend_from_slice(&arch);
        let layout = self.layout();
        buf.extend_from_slice(&(layout.layers.len() as u32).to_le_bytes());
        for spec in &layout.layers {
            let name = spec.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name);
            let vals = self.layer_params(spec);
            buf.extend_from_slice(&(vals.len() as u64).to_le_bytes());
            for v in vals {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        let mut r = ByteReader {
            buf: &buf,
            pos: 0,
            path,
        };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        if r.take(4)? != BYTE_ORDER_TAG {
            return Err(Error::format(path, "unsupported byte order tag"));
        }
        let alen = r.u32()? as usize;
        let arch: ArchConfig = serde_json::from_slice(r.take(alen)?)?;
        let mut params = DetectorParams::zeros(arch)?;
        let layout = params.layout();
        let count = r.u32()? as usize;
        if count != layout.layers.len() {
            return Err(Error::format(path, "layer count mismatch"));
        }
        for spec in &layout.layers {
            let nlen = r.u32()? as usize;
            if r.take(nlen)? != spec.name.as_bytes() {
                return Err(Error::format(path, format!("expected layer {}", spec.name)));
            }
            let len = r.u64()? as usize;
            if len != spec.shape.param_len() {
                return Err(Error::format(path, format!("size mismatch in {}", spec.name)));
            }
            for i in 0..len {
                let b = r.take(4)?;
                params.values[spec.offset + i] = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
            }
        }
        if params.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(path, "non-finite parameter"));
        }
        Ok(params)
    }

    /// Round every parameter through f32, matching what a checkpoint stores.
    pub fn quantized(&self) -> Self {
        DetectorParams {
            arch: self.arch.clone(),
            values: self.values.iter().map(|v| *v as f32 as f64).collect(),
        }
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, "truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}
