//! Per-modality residual feature extractors.
//!
//! Vibration and acoustic images go through 2-D residual networks; current
//! waveforms through a 1-D one (run as a 2-D network with unit height).
//! Layout inside the graph is `[N, C, H, W]`; prepared samples are stored
//! channels-last and transposed on batching.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Graph, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Binding, ConvBn, ForwardCtx, Linear, ParamStore};
use crate::preprocess::{self, PreparedSample};
use crate::rng::Rng;
use crate::Modality;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub channels: usize,
    pub stride: usize,
}

/// Width and stride settings shared by the three encoders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub widths: [usize; 4],
    pub strides: [usize; 4],
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub feature_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { widths: [16, 32, 64, 128], strides: [1, 2, 2, 2], stem_kernel: 3, stem_stride: 1, feature_dim: 256 }
    }
}

impl EncoderConfig {
    /// Narrower network with a strided stem, sized for single-core training.
    pub fn desk() -> Self {
        EncoderConfig { widths: [8, 16, 32, 64], strides: [1, 2, 2, 2], stem_kernel: 5, stem_stride: 4, feature_dim: 256 }
    }

    pub fn spec(&self, modality: Modality) -> EncoderSpec {
        let input_shape = preprocess::prepared_shapes()
            .into_iter()
            .find(|(m, _)| *m == modality)
            .map(|(_, s)| s)
            .expect("every modality has a prepared shape");
        EncoderSpec {
            modality,
            input_shape,
            stem: StemSpec { kernel: self.stem_kernel, stride: self.stem_stride, channels: self.widths[0] },
            blocks: self
                .widths
                .iter()
                .zip(&self.strides)
                .map(|(&channels, &stride)| BlockSpec { channels, stride })
                .collect(),
            feature_dim: self.feature_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub modality: Modality,
    /// Channels-last shape of one prepared sample.
    pub input_shape: Vec<usize>,
    pub stem: StemSpec,
    pub blocks: Vec<BlockSpec>,
    pub feature_dim: usize,
}

impl EncoderSpec {
    pub fn is_1d(&self) -> bool {
        self.input_shape.len() == 2
    }

    /// `[C, H, W]` of one sample as laid out in the graph.
    pub fn chw(&self) -> [usize; 3] {
        match self.input_shape[..] {
            [l, c] => [c, 1, l],
            [h, w, c] => [c, h, w],
            _ => unreachable!("validated rank"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() != 4 {
            return Err(Error::InvalidArgument(format!("encoder needs exactly 4 residual blocks, got {}", self.blocks.len())));
        }
        if !matches!(self.input_shape.len(), 2 | 3) {
            return Err(Error::InvalidArgument(format!("unsupported input rank {}", self.input_shape.len())));
        }
        if self.stem.kernel % 2 == 0 || self.stem.stride == 0 || self.stem.channels == 0 {
            return Err(Error::InvalidArgument("stem kernel must be odd, stride and channels positive".into()));
        }
        if self.blocks.iter().any(|b| b.channels == 0 || b.stride == 0) || self.feature_dim == 0 {
            return Err(Error::InvalidArgument("block widths, strides and feature_dim must be positive".into()));
        }
        Ok(())
    }

    fn geom(&self, kernel: usize, stride: usize) -> ConvGeom {
        if self.is_1d() {
            ConvGeom { kernel: (1, kernel), stride: (1, stride), pad: (0, kernel / 2) }
        } else {
            ConvGeom { kernel: (kernel, kernel), stride: (stride, stride), pad: (kernel / 2, kernel / 2) }
        }
    }
}

fn conv_bn(
    store: &mut ParamStore,
    rng: &mut Rng,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    geom: ConvGeom,
) -> ConvBn {
    let mut layer = ConvBn::new(store, rng, name, in_ch, out_ch, geom.kernel, geom.stride);
    layer.geom = geom;
    layer
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: Option<ConvBn>,
}

impl ResidualBlock {
    fn forward(&self, g: &mut Graph, bind: &Binding, store: &ParamStore, ctx: &mut ForwardCtx, x: Var) -> Var {
        let y = self.conv1.forward(g, bind, store, ctx, x);
        let y = g.relu(y);
        let y = self.conv2.forward(g, bind, store, ctx, y);
        let skip = match &self.shortcut {
            Some(p) => p.forward(g, bind, store, ctx, x),
            None => x,
        };
        let sum = g.add(y, skip);
        g.relu(sum)
    }
}

/// Stem, four residual blocks, global average pooling and a linear head.
#[derive(Debug, Clone)]
pub struct Encoder {
    spec: EncoderSpec,
    stem: ConvBn,
    blocks: Vec<ResidualBlock>,
    head: Linear,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, spec: EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let [in_ch, _, _] = spec.chw();
        let stem = conv_bn(
            store,
            rng,
            &format!("{prefix}.stem"),
            in_ch,
            spec.stem.channels,
            spec.geom(spec.stem.kernel, spec.stem.stride),
        );
        let mut ch = spec.stem.channels;
        let mut blocks = Vec::with_capacity(4);
        for (i, b) in spec.blocks.iter().enumerate() {
            let name = format!("{prefix}.block{}", i + 1);
            let conv1 = conv_bn(store, rng, &format!("{name}.conv1"), ch, b.channels, spec.geom(3, b.stride));
            let conv2 = conv_bn(store, rng, &format!("{name}.conv2"), b.channels, b.channels, spec.geom(3, 1));
            let shortcut = (b.stride != 1 || ch != b.channels)
                .then(|| conv_bn(store, rng, &format!("{name}.proj"), ch, b.channels, spec.geom(1, b.stride)));
            blocks.push(ResidualBlock { conv1, conv2, shortcut });
            ch = b.channels;
        }
        let head = Linear::new(store, rng, &format!("{prefix}.head"), ch, spec.feature_dim);
        Ok(Encoder { spec, stem, blocks, head })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn modality(&self) -> Modality {
        self.spec.modality
    }

    /// `x: [N, C, H, W]` (see [`EncoderSpec::chw`]) to `[N, feature_dim]`.
    pub fn forward(&self, g: &mut Graph, bind: &Binding, store: &ParamStore, ctx: &mut ForwardCtx, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        let chw = self.spec.chw();
        if shape.len() != 4 || shape[1..] != chw {
            let n = shape.first().copied().unwrap_or(0);
            return Err(shape_err([n, chw[0], chw[1], chw[2]], shape));
        }
        let y = self.stem.forward(g, bind, store, ctx, x);
        let mut y = g.relu(y);
        for b in &self.blocks {
            y = b.forward(g, bind, store, ctx, y);
        }
        let pooled = g.global_avg_pool(y);
        Ok(self.head.forward(g, bind, pooled))
    }

    /// Evaluation-mode features `[N, feature_dim]` for prepared samples.
    pub fn encode(&self, store: &ParamStore, samples: &[&PreparedSample]) -> Result<Tensor> {
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let x = g.constant(batch_input(self.spec.modality, samples)?);
        let mut ctx = ForwardCtx::eval();
        let y = self.forward(&mut g, &bind, store, &mut ctx, x)?;
        Ok(g.value(y).clone())
    }
}

/// Stacks one modality of `samples` into an `[N, C, H, W]` tensor.
pub fn batch_input(m: Modality, samples: &[&PreparedSample]) -> Result<Tensor> {
    let shape = preprocess::prepared_shapes()
        .into_iter()
        .find(|(mm, _)| *mm == m)
        .map(|(_, s)| s)
        .expect("every modality has a prepared shape");
    let (c, h, w) = match shape[..] {
        [l, c] => (c, 1, l),
        [h, w, c] => (c, h, w),
        _ => unreachable!(),
    };
    let n = samples.len();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, c, h, w]));
    let dst = out.as_slice_mut().expect("fresh array");
    for (i, s) in samples.iter().enumerate() {
        let src = s.modality_slice(m);
        if src.len() != c * h * w {
            return Err(shape_err(&shape, [src.len()]));
        }
        let base = i * c * h * w;
        // Source is channels-last: element (pixel p, channel ch) at p * c + ch.
        for (p, px) in src.chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                dst[base + ch * h * w + p] = v as f64;
            }
        }
    }
    Ok(out)
}
