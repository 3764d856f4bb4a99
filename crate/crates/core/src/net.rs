//! The base fully-convolutional model and the K-stage stack.
//!
//! One stage is
//!
//! ```text
//! x -> conv1 7x7 -> relu -> pool2 -> conv2 7x7 -> relu -> pool2
//!   -> conv3 5x5 -> relu -> deconv x4 -> relu = features
//! side      = 1x1 conv(features)          (density map, 1 channel)
//! converted = 1x1 conv(features)          (input of the next stage)
//! ```
//!
//! Stage 1 reads the image; stage `s >= 2` reads the converted features of
//! stage `s - 1`. Every stage emits a side output and the last one is the
//! prediction.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{read_file, write_file, Error, Result};
use crate::tensor::{
    conv2d_backward, conv2d_forward, deconv4_backward, deconv4_forward, maxpool2_backward,
    maxpool2_forward, relu_backward, relu_forward, ConvParams, PoolIndices, Real, Shape, Tensor,
};

const CKPT_MAGIC: &[u8; 4] = b"CMSN";
const CKPT_VERSION: u32 = 1;

/// Channel widths of the stack.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    /// Output channels of conv1, conv2, conv3 (the deconv keeps conv3's width).
    pub widths: [usize; 3],
    pub conversion_channels: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            widths: [32, 64, 128],
            conversion_channels: 64,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.conversion_channels == 0 || self.widths.contains(&0) {
            return Err(Error::invalid(format!("all channel counts must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageParams<T> {
    pub conv1: ConvParams<T>,
    pub conv2: ConvParams<T>,
    pub conv3: ConvParams<T>,
    pub deconv: ConvParams<T>,
    pub convert: ConvParams<T>,
    pub side: ConvParams<T>,
}

pub const LAYER_NAMES: [&str; 6] = ["conv1", "conv2", "conv3", "deconv", "convert", "side"];

impl<T: Real> StageParams<T> {
    /// He-normal convolutions, bilinear deconvolution, zero biases.
    pub fn init<R: Rng + ?Sized>(in_channels: usize, cfg: &NetConfig, rng: &mut R) -> Self {
        let [w1, w2, w3] = cfg.widths;
        Self {
            conv1: ConvParams::he_normal(w1, in_channels, 7, 1, 3, rng),
            conv2: ConvParams::he_normal(w2, w1, 7, 1, 3, rng),
            conv3: ConvParams::he_normal(w3, w2, 5, 1, 2, rng),
            deconv: ConvParams::bilinear_upsample(w3, 4),
            convert: ConvParams::he_normal(cfg.conversion_channels, w3, 1, 1, 0, rng),
            side: ConvParams::he_normal(1, w3, 1, 1, 0, rng),
        }
    }

    pub fn layers(&self) -> [&ConvParams<T>; 6] {
        [
            &self.conv1,
            &self.conv2,
            &self.conv3,
            &self.deconv,
            &self.convert,
            &self.side,
        ]
    }

    pub fn layers_mut(&mut self) -> [&mut ConvParams<T>; 6] {
        [
            &mut self.conv1,
            &mut self.conv2,
            &mut self.conv3,
            &mut self.deconv,
            &mut self.convert,
            &mut self.side,
        ]
    }

    fn from_layers(layers: Vec<ConvParams<T>>) -> Self {
        let mut it = layers.into_iter();
        let mut next = || it.next().expect("six layers");
        Self {
            conv1: next(),
            conv2: next(),
            conv3: next(),
            deconv: next(),
            convert: next(),
            side: next(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::from_layers(self.layers().iter().map(|l| l.zeros_like()).collect())
    }

    pub fn cast<U: Real>(&self) -> StageParams<U> {
        StageParams::from_layers(self.layers().iter().map(|l| l.cast()).collect())
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|l| l.num_params()).sum()
    }

    /// Checks the internal channel chain conv1 -> ... -> side/convert.
    pub fn validate(&self) -> Result<()> {
        let chain = [
            ("conv2", &self.conv2, self.conv1.out_channels()),
            ("conv3", &self.conv3, self.conv2.out_channels()),
            ("deconv", &self.deconv, self.conv3.out_channels()),
            ("convert", &self.convert, self.deconv.out_channels()),
            ("side", &self.side, self.deconv.out_channels()),
        ];
        for (name, layer, expected) in chain {
            if layer.in_channels() != expected {
                return Err(Error::invalid(format!(
                    "{name} expects {} input channels, previous layer produces {expected}",
                    layer.in_channels()
                )));
            }
        }
        if self.side.out_channels() != 1 {
            return Err(Error::invalid(format!(
                "side output must have 1 channel, has {}",
                self.side.out_channels()
            )));
        }
        Ok(())
    }
}

/// The K-stage stack. The same type carries gradients ([`ParamGrads`]) and
/// optimizer velocities.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub stages: Vec<StageParams<T>>,
    pub conversion_channels: usize,
}

/// Gradients w.r.t. every parameter, shaped like the model.
pub type ParamGrads<T> = ModelParams<T>;

impl<T: Real> ModelParams<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &NetConfig, stages: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if stages == 0 {
            return Err(Error::invalid("a model needs at least one stage"));
        }
        let stages = (0..stages)
            .map(|s| {
                let in_c = if s == 0 {
                    cfg.in_channels
                } else {
                    cfg.conversion_channels
                };
                StageParams::init(in_c, cfg, rng)
            })
            .collect();
        Ok(Self {
            stages,
            conversion_channels: cfg.conversion_channels,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn layers(&self) -> impl Iterator<Item = &ConvParams<T>> {
        self.stages.iter().flat_map(|s| s.layers())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut ConvParams<T>> {
        self.stages.iter_mut().flat_map(|s| s.layers_mut())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            stages: self.stages.iter().map(|s| s.zeros_like()).collect(),
            conversion_channels: self.conversion_channels,
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            stages: self.stages.iter().map(|s| s.cast()).collect(),
            conversion_channels: self.conversion_channels,
        }
    }

    pub fn num_params(&self) -> usize {
        self.stages.iter().map(|s| s.num_params()).sum()
    }

    /// Recovers the channel configuration from the parameter shapes.
    pub fn net_config(&self) -> NetConfig {
        let s = &self.stages[0];
        NetConfig {
            in_channels: s.in_channels(),
            widths: [
                s.conv1.out_channels(),
                s.conv2.out_channels(),
                s.conv3.out_channels(),
            ],
            conversion_channels: self.conversion_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::invalid("a model needs at least one stage"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.validate()
                .map_err(|e| Error::invalid(format!("stage {}: {e}", i + 1)))?;
            if s.convert.out_channels() != self.conversion_channels {
                return Err(Error::invalid(format!(
                    "stage {}: convert emits {} channels, model declares {}",
                    i + 1,
                    s.convert.out_channels(),
                    self.conversion_channels
                )));
            }
            if i > 0 && s.in_channels() != self.conversion_channels {
                return Err(Error::invalid(format!(
                    "stage {}: conv1 takes {} channels but the conversion block emits {}",
                    i + 1,
                    s.in_channels(),
                    self.conversion_channels
                )));
            }
        }
        Ok(())
    }

    /// `CMSN` checkpoint: magic, u32 version, u32 K, u32 conversion channels,
    /// then per stage six layers of (u32 x4 kernel shape, f32 kernels, f32 bias),
    /// all little-endian.
    pub fn encode_checkpoint(&self) -> Vec<u8> {
        encode_layers(CKPT_MAGIC, self)
    }

    pub fn decode_checkpoint(bytes: &[u8]) -> Result<Self> {
        let m = decode_layers(CKPT_MAGIC, bytes)?;
        m.validate().map_err(|e| Error::parse(0, e.to_string()))?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode_checkpoint(&read_file(path)?)
    }
}

/// Stride and padding are implied by a layer's position in the stage.
fn geometry_for(layer: usize, kernel: usize) -> (usize, usize) {
    match layer {
        3 => (4, 2),
        _ => (1, (kernel.saturating_sub(1)) / 2),
    }
}

/// Shared writer for checkpoints and optimizer-state files.
pub(crate) fn encode_layers<T: Real>(magic: &[u8; 4], m: &ModelParams<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.stages.len() as u32).to_le_bytes());
    out.extend_from_slice(&(m.conversion_channels as u32).to_le_bytes());
    for layer in m.layers() {
        let s = layer.kernels.shape();
        for d in [s.n, s.c, s.h, s.w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in layer.kernels.data().iter().chain(&layer.bias) {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(
                self.bytes.len(),
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s<T: Real>(&mut self, n: usize, what: &str) -> Result<Vec<T>> {
        let raw = self.take(4 * n, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect())
    }
}

pub(crate) fn decode_layers<T: Real>(magic: &[u8; 4], bytes: &[u8]) -> Result<ModelParams<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != magic {
        return Err(Error::parse(
            0,
            format!("bad magic, expected {}", String::from_utf8_lossy(magic)),
        ));
    }
    let version = r.u32("version")?;
    if version != CKPT_VERSION {
        return Err(Error::parse(4, format!("unsupported version {version}")));
    }
    let k = r.u32("stage count")? as usize;
    if k == 0 {
        return Err(Error::parse(8, "stage count must be >= 1"));
    }
    let conversion_channels = r.u32("conversion channels")? as usize;
    let mut stages = Vec::with_capacity(k);
    for s in 0..k {
        let mut layers = Vec::with_capacity(6);
        for (li, name) in LAYER_NAMES.iter().enumerate() {
            let at = r.pos;
            let what = format!("stage {} {name}", s + 1);
            let dims: Vec<usize> = (0..4)
                .map(|_| r.u32(&what).map(|d| d as usize))
                .collect::<Result<_>>()?;
            let shape = Shape::try_new(dims[0], dims[1], dims[2], dims[3])
                .map_err(|e| Error::parse(at, format!("{what}: {e}")))?;
            let kernels = Tensor::from_vec(shape, r.f32s(shape.len(), &what)?)?;
            let bias = r.f32s(shape.n, &what)?;
            let (stride, pad) = geometry_for(li, shape.h);
            layers.push(ConvParams::new(kernels, bias, stride, pad)?);
        }
        stages.push(StageParams::from_layers(layers));
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(
            r.pos,
            format!("{} trailing bytes after the last stage", bytes.len() - r.pos),
        ));
    }
    Ok(ModelParams {
        stages,
        conversion_channels,
    })
}

/// Cached activations of one stage, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct StageTrace<T> {
    pub input: Tensor<T>,
    a1: Tensor<T>,
    pool1: PoolIndices,
    p1: Tensor<T>,
    a2: Tensor<T>,
    pool2: PoolIndices,
    p2: Tensor<T>,
    a3: Tensor<T>,
    r3: Tensor<T>,
    up: Tensor<T>,
    /// 128-channel (by default) full-resolution features after the deconv ReLU.
    pub features: Tensor<T>,
    /// Side-output density map, (n, 1, H, W).
    pub side: Tensor<T>,
    /// Conversion-block output fed to the next stage.
    pub converted: Tensor<T>,
}

/// Runs one base model plus its conversion block.
pub fn base_forward<T: Real>(x: &Tensor<T>, s: &StageParams<T>) -> Result<StageTrace<T>> {
    let xs = x.shape();
    if !xs.h.is_multiple_of(4) || !xs.w.is_multiple_of(4) {
        return Err(Error::invalid(format!(
            "input spatial dims {}x{} must be divisible by 4 (pad first)",
            xs.h, xs.w
        )));
    }
    let a1 = conv2d_forward(x, &s.conv1)?;
    let (p1, pool1) = maxpool2_forward(&relu_forward(&a1))?;
    let a2 = conv2d_forward(&p1, &s.conv2)?;
    let (p2, pool2) = maxpool2_forward(&relu_forward(&a2))?;
    let a3 = conv2d_forward(&p2, &s.conv3)?;
    let r3 = relu_forward(&a3);
    let up = deconv4_forward(&r3, &s.deconv)?;
    let features = relu_forward(&up);
    let side = conv2d_forward(&features, &s.side)?;
    let converted = conv2d_forward(&features, &s.convert)?;
    Ok(StageTrace {
        input: x.clone(),
        a1,
        pool1,
        p1,
        a2,
        pool2,
        p2,
        a3,
        r3,
        up,
        features,
        side,
        converted,
    })
}

/// Backward through one stage. `d_side` and `d_converted` are the upstream
/// gradients of the two heads (either may be absent). Returns the parameter
/// gradients and, if requested, the gradient w.r.t. the stage input.
pub fn base_backward<T: Real>(
    trace: &StageTrace<T>,
    s: &StageParams<T>,
    d_side: Option<&Tensor<T>>,
    d_converted: Option<&Tensor<T>>,
    want_input_grad: bool,
) -> Result<(StageParams<T>, Option<Tensor<T>>)> {
    let mut grads = s.zeros_like();
    let mut d_features = Tensor::zeros(trace.features.shape());
    if let Some(d) = d_side {
        let g = conv2d_backward(&trace.features, &s.side, d)?;
        d_features.add_assign(&g.d_input)?;
        grads.side.kernels = g.d_kernels;
        grads.side.bias = g.d_bias;
    }
    if let Some(d) = d_converted {
        let g = conv2d_backward(&trace.features, &s.convert, d)?;
        d_features.add_assign(&g.d_input)?;
        grads.convert.kernels = g.d_kernels;
        grads.convert.bias = g.d_bias;
    }

    let d_up = relu_backward(&trace.up, &d_features)?;
    let g = deconv4_backward(&trace.r3, &s.deconv, &d_up)?;
    grads.deconv.kernels = g.d_kernels;
    grads.deconv.bias = g.d_bias;

    let d_a3 = relu_backward(&trace.a3, &g.d_input)?;
    let g = conv2d_backward(&trace.p2, &s.conv3, &d_a3)?;
    grads.conv3.kernels = g.d_kernels;
    grads.conv3.bias = g.d_bias;

    let d_a2 = relu_backward(&trace.a2, &maxpool2_backward(&trace.pool2, &g.d_input)?)?;
    let g = conv2d_backward(&trace.p1, &s.conv2, &d_a2)?;
    grads.conv2.kernels = g.d_kernels;
    grads.conv2.bias = g.d_bias;

    let d_a1 = relu_backward(&trace.a1, &maxpool2_backward(&trace.pool1, &g.d_input)?)?;
    let g = conv2d_backward(&trace.input, &s.conv1, &d_a1)?;
    grads.conv1.kernels = g.d_kernels;
    grads.conv1.bias = g.d_bias;

    Ok((grads, want_input_grad.then_some(g.d_input)))
}

#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub stages: Vec<StageTrace<T>>,
}

impl<T: Real> ForwardTrace<T> {
    pub fn sides(&self) -> Vec<&Tensor<T>> {
        self.stages.iter().map(|s| &s.side).collect()
    }

    /// Side output of the last stage.
    pub fn prediction(&self) -> &Tensor<T> {
        &self.stages.last().expect("at least one stage").side
    }
}

pub fn model_forward<T: Real>(x: &Tensor<T>, m: &ModelParams<T>) -> Result<ForwardTrace<T>> {
    if m.stages.is_empty() {
        return Err(Error::invalid("model has no stages"));
    }
    let mut stages: Vec<StageTrace<T>> = Vec::with_capacity(m.stages.len());
    for params in &m.stages {
        let input = stages.last().map_or(x, |prev| &prev.converted);
        let trace = base_forward(input, params)?;
        stages.push(trace);
    }
    Ok(ForwardTrace { stages })
}

/// Backpropagates one gradient per side output through the whole stack,
/// accumulating side-branch and through-stage paths.
pub fn model_backward<T: Real>(
    trace: &ForwardTrace<T>,
    d_sides: &[Tensor<T>],
    m: &ModelParams<T>,
) -> Result<ParamGrads<T>> {
    let k = m.stages.len();
    if trace.stages.len() != k || d_sides.len() != k {
        return Err(Error::invalid(format!(
            "model has {k} stages, trace {} and side gradients {}",
            trace.stages.len(),
            d_sides.len()
        )));
    }
    let mut stage_grads = Vec::with_capacity(k);
    let mut d_converted: Option<Tensor<T>> = None;
    for s in (0..k).rev() {
        let (g, d_in) = base_backward(
            &trace.stages[s],
            &m.stages[s],
            Some(&d_sides[s]),
            d_converted.as_ref(),
            s > 0,
        )?;
        stage_grads.push(g);
        d_converted = d_in;
    }
    stage_grads.reverse();
    Ok(ModelParams {
        stages: stage_grads,
        conversion_channels: m.conversion_channels,
    })
}

/// Original spatial dims recorded by [`pad_to_mult4`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OriginalDims {
    pub h: usize,
    pub w: usize,
}

/// Zero-pads bottom and right to the next multiple of 4.
pub fn pad_to_mult4<T: Real>(x: &Tensor<T>) -> (Tensor<T>, OriginalDims) {
    let s = x.shape();
    let dims = OriginalDims { h: s.h, w: s.w };
    let (ph, pw) = (s.h.div_ceil(4) * 4, s.w.div_ceil(4) * 4);
    if (ph, pw) == (s.h, s.w) {
        return (x.clone(), dims);
    }
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, ph, pw));
    for b in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(b, c);
            let dst = out.plane_mut(b, c);
            for r in 0..s.h {
                dst[r * pw..r * pw + s.w].copy_from_slice(&src[r * s.w..(r + 1) * s.w]);
            }
        }
    }
    (out, dims)
}

pub fn crop_back<T: Real>(y: &Tensor<T>, dims: OriginalDims) -> Result<Tensor<T>> {
    let s = y.shape();
    if dims.h > s.h || dims.w > s.w || dims.h == 0 || dims.w == 0 {
        return Err(Error::invalid(format!(
            "cannot crop {s} back to {}x{}",
            dims.h, dims.w
        )));
    }
    if (dims.h, dims.w) == (s.h, s.w) {
        return Ok(y.clone());
    }
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, dims.h, dims.w));
    for b in 0..s.n {
        for c in 0..s.c {
            let src = y.plane(b, c);
            let dst = out.plane_mut(b, c);
            for r in 0..dims.h {
                dst[r * dims.w..(r + 1) * dims.w].copy_from_slice(&src[r * s.w..r * s.w + dims.w]);
            }
        }
    }
    Ok(out)
}

/// Pads an arbitrary-size image, runs the stack and crops the prediction back.
pub fn predict<T: Real>(image: &Tensor<T>, m: &ModelParams<T>) -> Result<Tensor<T>> {
    let (padded, dims) = pad_to_mult4(image);
    let trace = model_forward(&padded, m)?;
    crop_back(trace.prediction(), dims)
}
