//! Two-stage convolutional embedder with a parallel spatial-attention branch.
//!
//! ```text
//! image ─ stem ─ down1 ─┬─ down2 ─ res2 ──────────────┐ (stage-2 map, C2 x G x G)
//!        (stage 1, C1)  │                             ⊙ ── head conv ─ GAP ─ fc ─ fc ─ L2
//!                       └─ 3 bottlenecks ─ SE ─ mean ─ σ ┘ (G x G mask)
//! ```
//!
//! Stage 1 runs at stride 8, stage 2 at stride 16, so the mask grid is
//! `input_side / 16`. The mask is single-channel and multiplies every channel
//! of the stage-2 map. The pooled head-conv output is the transferable
//! feature vector; the two dense layers are the projection head.

mod checkpoint;
pub mod tensor;

pub use checkpoint::{init_model, parameter_hash, CheckpointError, CheckpointMeta, ModelCheckpoint, META_FILE, WEIGHTS_FILE};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::ImageBuffer;
use tensor::{
    global_avg_pool, global_avg_pool_backward, relu_backward, relu_vec, relu_vec_backward, sigmoid,
    Conv2d, Init, Linear, ParamLayout, Tensor,
};

/// Downsampling factor between the input image and the stage-2 grid.
pub const TOTAL_STRIDE: usize = 16;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("invalid embedder config: {0}")]
    InvalidConfig(String),
    #[error("image is {actual:?}, model expects {expected}x{expected}")]
    ShapeMismatch { expected: usize, actual: (usize, usize) },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub input_side: usize,
    pub stage1_channels: usize,
    pub stage2_channels: usize,
    pub stage2_grid: usize,
    pub attention_blocks: usize,
    pub se_reduction: usize,
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub head_hidden: usize,
    /// When false the model is the plain `g(f2(f1(x)))` embedder.
    pub use_attention: bool,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            input_side: 256,
            stage1_channels: 16,
            stage2_channels: 32,
            stage2_grid: 16,
            attention_blocks: 3,
            se_reduction: 4,
            embed_dim: 64,
            feature_dim: 256,
            head_hidden: 128,
            use_attention: true,
            seed: 0,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        let bad = |msg: String| Err(EmbedError::InvalidConfig(msg));
        if self.stage2_grid == 0 || self.stage2_grid * TOTAL_STRIDE != self.input_side {
            return bad(format!(
                "stage2_grid {} x stride {TOTAL_STRIDE} must equal input_side {}",
                self.stage2_grid, self.input_side
            ));
        }
        if !(32..=512).contains(&self.embed_dim) {
            return bad(format!("embed_dim {} outside 32..=512", self.embed_dim));
        }
        if self.stage1_channels < 2 || self.stage1_channels % 2 != 0 {
            return bad("stage1_channels must be even and at least 2".into());
        }
        if self.stage2_channels == 0 || self.feature_dim == 0 || self.head_hidden == 0 {
            return bad("channel and layer widths must be positive".into());
        }
        if self.attention_blocks == 0 {
            return bad("attention branch needs at least one block".into());
        }
        if self.se_reduction == 0 || self.stage1_channels / self.se_reduction == 0 {
            return bad(format!(
                "se_reduction {} leaves no squeeze units for {} channels",
                self.se_reduction, self.stage1_channels
            ));
        }
        Ok(())
    }
}

/// Unit-norm embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Sigmoid-valued spatial mask over the stage-2 grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMask {
    pub side: usize,
    pub values: Vec<f64>,
}

impl AttentionMask {
    pub fn ones(side: usize) -> Self {
        Self {
            side,
            values: vec![1.0; side * side],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.side + x]
    }
}

/// Which mask multiplies the stage-2 map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Output of the attention branch.
    Learned,
    /// Constant ones; the attention branch is skipped.
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
struct Bottleneck {
    reduce: Conv2d,
    spatial: Conv2d,
    expand: Conv2d,
    shortcut: Option<Conv2d>,
}

#[derive(Debug, Clone, PartialEq)]
struct Architecture {
    stem: Conv2d,
    down1: Conv2d,
    down2: Conv2d,
    res2: Conv2d,
    blocks: Vec<Bottleneck>,
    se_squeeze: Linear,
    se_excite: Linear,
    /// `[gain, bias]` applied to the channel mean before the sigmoid.
    mask_affine: std::ops::Range<usize>,
    head_conv: Conv2d,
    fc1: Linear,
    fc2: Linear,
}

impl Architecture {
    fn build(cfg: &EmbedderConfig, layout: &mut ParamLayout) -> Self {
        let c1 = cfg.stage1_channels;
        let c2 = cfg.stage2_channels;
        let stem = Conv2d::new(layout, "stem", 1, c1 / 2, 4, 4, 0);
        let down1 = Conv2d::new(layout, "stage1.down", c1 / 2, c1, 3, 2, 1);
        let down2 = Conv2d::new(layout, "stage2.down", c1, c2, 3, 2, 1);
        let res2 = Conv2d::new(layout, "stage2.res", c2, c2, 3, 1, 1);
        let mid = (c1 / 2).max(1);
        let blocks = (0..cfg.attention_blocks)
            .map(|i| {
                let stride = if i == 0 { 2 } else { 1 };
                let name = format!("attention.block{i}");
                Bottleneck {
                    reduce: Conv2d::new(layout, &format!("{name}.reduce"), c1, mid, 1, 1, 0),
                    spatial: Conv2d::new(layout, &format!("{name}.spatial"), mid, mid, 3, stride, 1),
                    expand: Conv2d::new(layout, &format!("{name}.expand"), mid, c1, 1, 1, 0),
                    shortcut: (stride != 1)
                        .then(|| Conv2d::new(layout, &format!("{name}.shortcut"), c1, c1, 1, stride, 0)),
                }
            })
            .collect();
        let squeeze = c1 / cfg.se_reduction;
        let se_squeeze = Linear::new(layout, "attention.se.squeeze", c1, squeeze);
        let se_excite = Linear::new(layout, "attention.se.excite", squeeze, c1);
        let gain = layout.alloc("attention.mask.gain", 1, Init::Constant(1.0));
        let bias = layout.alloc("attention.mask.bias", 1, Init::Constant(0.0));
        let mask_affine = gain.start..bias.end;
        let head_conv = Conv2d::new(layout, "head.conv", c2, cfg.feature_dim, 1, 1, 0);
        let fc1 = Linear::new(layout, "head.fc1", cfg.feature_dim, cfg.head_hidden);
        let fc2 = Linear::new(layout, "head.fc2", cfg.head_hidden, cfg.embed_dim);
        Self {
            stem,
            down1,
            down2,
            res2,
            blocks,
            se_squeeze,
            se_excite,
            mask_affine,
            head_conv,
            fc1,
            fc2,
        }
    }
}

#[derive(Debug, Clone)]
struct BlockTrace {
    input: Tensor,
    h1: Tensor,
    h2: Tensor,
    out: Tensor,
}

#[derive(Debug, Clone)]
struct AttentionTrace {
    blocks: Vec<BlockTrace>,
    se_hidden: Vec<f64>,
    se_scale: Vec<f64>,
    channel_mean: Vec<f64>,
    mask: Vec<f64>,
}

/// Intermediate activations of one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Tensor,
    a0: Tensor,
    a1: Tensor,
    b1: Tensor,
    z: Tensor,
    attention: Option<AttentionTrace>,
    zm: Tensor,
    hc: Tensor,
    features: Vec<f64>,
    hidden: Vec<f64>,
    norm: f64,
    embedding: Vec<f64>,
}

impl ForwardTrace {
    pub fn embedding(&self) -> EmbeddingVector {
        EmbeddingVector(self.embedding.clone())
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn mask(&self) -> Option<&[f64]> {
        self.attention.as_ref().map(|a| a.mask.as_slice())
    }
}

/// The embedding network: configuration, layout and the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    config: EmbedderConfig,
    layout: ParamLayout,
    arch: Architecture,
    params: Vec<f64>,
}

impl Embedder {
    /// He-normal weights and zero biases drawn from `cfg.seed`.
    pub fn new(cfg: EmbedderConfig) -> Result<Self, EmbedError> {
        cfg.validate()?;
        let mut layout = ParamLayout::default();
        let arch = Architecture::build(&cfg, &mut layout);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = vec![0.0; layout.len];
        for block in &layout.blocks {
            match block.init {
                Init::He { fan_in } => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    for p in &mut params[block.range.clone()] {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *p = z * std;
                    }
                }
                Init::Constant(v) => params[block.range.clone()].fill(v),
            }
        }
        Ok(Self {
            config: cfg,
            layout,
            arch,
            params,
        })
    }

    /// Rebuilds a model around previously saved parameters.
    pub fn from_params(cfg: EmbedderConfig, params: Vec<f64>) -> Result<Self, EmbedError> {
        let mut model = Self::new(cfg)?;
        if params.len() != model.params.len() {
            return Err(EmbedError::InvalidConfig(format!(
                "parameter count {} does not match architecture ({})",
                params.len(),
                model.params.len()
            )));
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn default_mask_mode(&self) -> MaskMode {
        if self.config.use_attention {
            MaskMode::Learned
        } else {
            MaskMode::Ones
        }
    }

    fn to_input(&self, image: &ImageBuffer) -> Result<Tensor, EmbedError> {
        let side = self.config.input_side;
        if image.shape() != (side, side) {
            return Err(EmbedError::ShapeMismatch {
                expected: side,
                actual: image.shape(),
            });
        }
        Ok(Tensor::from_vec(
            1,
            side,
            side,
            image.pixels.iter().map(|&v| v as f64).collect(),
        ))
    }

    fn attention_forward(&self, a1: &Tensor) -> AttentionTrace {
        let p = &self.params;
        let mut blocks = Vec::with_capacity(self.arch.blocks.len());
        let mut x = a1.clone();
        for b in &self.arch.blocks {
            let mut h1 = b.reduce.forward(p, &x);
            h1.relu_inplace();
            let mut h2 = b.spatial.forward(p, &h1);
            h2.relu_inplace();
            let mut out = b.expand.forward(p, &h2);
            match &b.shortcut {
                Some(sc) => out.add_inplace(&sc.forward(p, &x)),
                None => out.add_inplace(&x),
            }
            out.relu_inplace();
            let next = out.clone();
            blocks.push(BlockTrace { input: x, h1, h2, out });
            x = next;
        }
        let pooled = global_avg_pool(&x);
        let mut se_hidden = self.arch.se_squeeze.forward(p, &pooled);
        relu_vec(&mut se_hidden);
        let se_scale: Vec<f64> = self
            .arch
            .se_excite
            .forward(p, &se_hidden)
            .into_iter()
            .map(sigmoid)
            .collect();
        let plane = x.plane();
        let mut channel_mean = vec![0.0; plane];
        for (c, chunk) in x.data.chunks(plane).enumerate() {
            let s = se_scale[c];
            for (m, &v) in channel_mean.iter_mut().zip(chunk) {
                *m += v * s;
            }
        }
        let inv_c = 1.0 / x.c as f64;
        let gain = p[self.arch.mask_affine.start];
        let bias = p[self.arch.mask_affine.start + 1];
        for m in &mut channel_mean {
            *m *= inv_c;
        }
        let mask = channel_mean.iter().map(|&m| sigmoid(gain * m + bias)).collect();
        AttentionTrace {
            blocks,
            se_hidden,
            se_scale,
            channel_mean,
            mask,
        }
    }

    /// Full forward pass from a preprocessed `input_side` square image.
    pub fn forward(&self, image: &ImageBuffer, mode: MaskMode) -> Result<ForwardTrace, EmbedError> {
        let input = self.to_input(image)?;
        Ok(self.forward_tensor(input, mode))
    }

    fn forward_tensor(&self, input: Tensor, mode: MaskMode) -> ForwardTrace {
        let p = &self.params;
        let a = &self.arch;
        let mut a0 = a.stem.forward(p, &input);
        a0.relu_inplace();
        let mut a1 = a.down1.forward(p, &a0);
        a1.relu_inplace();
        let mut b1 = a.down2.forward(p, &a1);
        b1.relu_inplace();
        let mut z = a.res2.forward(p, &b1);
        z.add_inplace(&b1);
        z.relu_inplace();

        let attention = match mode {
            MaskMode::Learned => Some(self.attention_forward(&a1)),
            MaskMode::Ones => None,
        };
        let mut zm = z.clone();
        if let Some(att) = &attention {
            let plane = zm.plane();
            for chunk in zm.data.chunks_mut(plane) {
                for (v, &m) in chunk.iter_mut().zip(&att.mask) {
                    *v *= m;
                }
            }
        }
        let mut hc = a.head_conv.forward(p, &zm);
        hc.relu_inplace();
        let features = global_avg_pool(&hc);
        let mut hidden = a.fc1.forward(p, &features);
        relu_vec(&mut hidden);
        let out = a.fc2.forward(p, &hidden);
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let embedding = out.iter().map(|v| v / norm).collect();
        ForwardTrace {
            input,
            a0,
            a1,
            b1,
            z,
            attention,
            zm,
            hc,
            features,
            hidden,
            norm,
            embedding,
        }
    }

    /// Backpropagates `d_embedding` (gradient w.r.t. the unit-norm output)
    /// and accumulates into `grads`, which must have `param_count()` entries.
    pub fn backward(&self, trace: &ForwardTrace, d_embedding: &[f64], grads: &mut [f64]) {
        assert_eq!(grads.len(), self.params.len());
        let p = &self.params;
        let a = &self.arch;
        let e = &trace.embedding;
        let dot: f64 = e.iter().zip(d_embedding).map(|(a, b)| a * b).sum();
        let d_out: Vec<f64> = e
            .iter()
            .zip(d_embedding)
            .map(|(&ei, &gi)| (gi - ei * dot) / trace.norm)
            .collect();
        let mut d_hidden = a.fc2.backward(p, &trace.hidden, &d_out, grads);
        relu_vec_backward(&trace.hidden, &mut d_hidden);
        let d_features = a.fc1.backward(p, &trace.features, &d_hidden, grads);
        let mut d_hc = global_avg_pool_backward(&d_features, trace.hc.c, trace.hc.h, trace.hc.w);
        relu_backward(&trace.hc, &mut d_hc);
        let d_zm = a
            .head_conv
            .backward(p, &trace.zm, &d_hc, grads, true)
            .expect("input grad requested");

        let mut d_z = d_zm.clone();
        let mut d_a1 = Tensor::zeros(trace.a1.c, trace.a1.h, trace.a1.w);
        if let Some(att) = &trace.attention {
            let plane = d_z.plane();
            let mut d_mask = vec![0.0; plane];
            for (c, chunk) in d_z.data.chunks_mut(plane).enumerate() {
                let zc = &trace.z.data[c * plane..(c + 1) * plane];
                for j in 0..plane {
                    d_mask[j] += chunk[j] * zc[j];
                    chunk[j] *= att.mask[j];
                }
            }
            self.attention_backward(att, &d_mask, grads, &mut d_a1);
        }

        relu_backward(&trace.z, &mut d_z);
        let mut d_b1 = a
            .res2
            .backward(p, &trace.b1, &d_z, grads, true)
            .expect("input grad requested");
        d_b1.add_inplace(&d_z);
        relu_backward(&trace.b1, &mut d_b1);
        let d = a
            .down2
            .backward(p, &trace.a1, &d_b1, grads, true)
            .expect("input grad requested");
        d_a1.add_inplace(&d);
        relu_backward(&trace.a1, &mut d_a1);
        let mut d_a0 = a
            .down1
            .backward(p, &trace.a0, &d_a1, grads, true)
            .expect("input grad requested");
        relu_backward(&trace.a0, &mut d_a0);
        a.stem.backward(p, &trace.input, &d_a0, grads, false);
    }

    fn attention_backward(&self, att: &AttentionTrace, d_mask: &[f64], grads: &mut [f64], d_a1: &mut Tensor) {
        let p = &self.params;
        let a = &self.arch;
        let gi = a.mask_affine.start;
        let gain = p[gi];
        let last = &att.blocks.last().expect("at least one block").out;
        let plane = last.plane();
        let channels = last.c;

        let mut d_mean = vec![0.0; plane];
        for j in 0..plane {
            let m = att.mask[j];
            let d_pre = d_mask[j] * m * (1.0 - m);
            grads[gi] += d_pre * att.channel_mean[j];
            grads[gi + 1] += d_pre;
            d_mean[j] = d_pre * gain;
        }
        let inv_c = 1.0 / channels as f64;
        let mut d_out = Tensor::zeros(channels, last.h, last.w);
        let mut d_scale = vec![0.0; channels];
        for c in 0..channels {
            let s = att.se_scale[c];
            let oc = &last.data[c * plane..(c + 1) * plane];
            let dc = &mut d_out.data[c * plane..(c + 1) * plane];
            let mut acc = 0.0;
            for j in 0..plane {
                let dv = d_mean[j] * inv_c;
                dc[j] = dv * s;
                acc += dv * oc[j];
            }
            d_scale[c] = acc;
        }
        let d_excite: Vec<f64> = d_scale
            .iter()
            .zip(&att.se_scale)
            .map(|(&d, &s)| d * s * (1.0 - s))
            .collect();
        let mut d_hidden = a.se_excite.backward(p, &att.se_hidden, &d_excite, grads);
        relu_vec_backward(&att.se_hidden, &mut d_hidden);
        let pooled = global_avg_pool(last);
        let d_pooled = a.se_squeeze.backward(p, &pooled, &d_hidden, grads);
        d_out.add_inplace(&global_avg_pool_backward(&d_pooled, channels, last.h, last.w));

        let mut d = d_out;
        for (b, t) in a.blocks.iter().zip(&att.blocks).rev() {
            relu_backward(&t.out, &mut d);
            let mut d_h2 = b.expand.backward(p, &t.h2, &d, grads, true).expect("input grad");
            relu_backward(&t.h2, &mut d_h2);
            let mut d_h1 = b.spatial.backward(p, &t.h1, &d_h2, grads, true).expect("input grad");
            relu_backward(&t.h1, &mut d_h1);
            let mut d_in = b.reduce.backward(p, &t.input, &d_h1, grads, true).expect("input grad");
            match &b.shortcut {
                Some(sc) => d_in.add_inplace(&sc.backward(p, &t.input, &d, grads, true).expect("input grad")),
                None => d_in.add_inplace(&d),
            }
            d = d_in;
        }
        d_a1.add_inplace(&d);
    }

    /// Attention-masked embedding (or the plain one for models configured
    /// without attention).
    pub fn embed(&self, image: &ImageBuffer) -> Result<EmbeddingVector, EmbedError> {
        Ok(self.forward(image, self.default_mask_mode())?.embedding())
    }

    /// Embedding with the attention branch bypassed (mask fixed to ones).
    pub fn embed_no_attention(&self, image: &ImageBuffer) -> Result<EmbeddingVector, EmbedError> {
        Ok(self.forward(image, MaskMode::Ones)?.embedding())
    }

    /// Embedding with an externally supplied mask instead of the learned one.
    pub fn embed_with_mask(&self, image: &ImageBuffer, mask: &AttentionMask) -> Result<EmbeddingVector, EmbedError> {
        let grid = self.config.stage2_grid;
        if mask.side != grid {
            return Err(EmbedError::ShapeMismatch {
                expected: grid,
                actual: (mask.side, mask.side),
            });
        }
        let mut trace = self.forward(image, MaskMode::Ones)?;
        let p = &self.params;
        let a = &self.arch;
        let plane = trace.z.plane();
        let mut zm = trace.z.clone();
        for chunk in zm.data.chunks_mut(plane) {
            for (v, &m) in chunk.iter_mut().zip(&mask.values) {
                *v *= m;
            }
        }
        let mut hc = a.head_conv.forward(p, &zm);
        hc.relu_inplace();
        let features = global_avg_pool(&hc);
        let mut hidden = a.fc1.forward(p, &features);
        relu_vec(&mut hidden);
        let out = a.fc2.forward(p, &hidden);
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        trace.embedding = out.iter().map(|v| v / norm).collect();
        Ok(trace.embedding())
    }

    /// The attention branch output for `image`.
    pub fn attention_map(&self, image: &ImageBuffer) -> Result<AttentionMask, EmbedError> {
        let input = self.to_input(image)?;
        let p = &self.params;
        let mut a0 = self.arch.stem.forward(p, &input);
        a0.relu_inplace();
        let mut a1 = self.arch.down1.forward(p, &a0);
        a1.relu_inplace();
        let att = self.attention_forward(&a1);
        Ok(AttentionMask {
            side: self.config.stage2_grid,
            values: att.mask,
        })
    }

    /// Pooled backbone features before the projection head, unnormalized.
    pub fn features(&self, image: &ImageBuffer) -> Result<Vec<f64>, EmbedError> {
        Ok(self.forward(image, self.default_mask_mode())?.features)
    }
}
