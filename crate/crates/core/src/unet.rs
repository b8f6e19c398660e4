//! U-Net assembled from the kernels in [`crate::tensor`].
//!
//! Layer order (and therefore parameter order everywhere: gradients, optimizer
//! moments, checkpoints) is:
//!
//! 1. encoder level `l = 0..depth`: two 3×3 convs
//! 2. bottleneck: two 3×3 convs
//! 3. decoder level `l = depth-1..=0`: 2×2 up-conv, then two 3×3 convs
//! 4. final 1×1 conv
//!
//! giving `5·depth + 3` convolutional layers, 23 at depth 4.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{
    concat_channels, concat_channels_backward, conv2d_backward, conv2d_forward, maxpool2x2_backward,
    maxpool2x2_forward, relu_backward, relu_forward, sigmoid_forward, upconv2x2_backward, upconv2x2_forward,
    ConvKernel, Padding, PoolIndices, Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input {axis} extent {extent} is not divisible by {divisor}")]
    IndivisibleExtent {
        axis: &'static str,
        extent: usize,
        divisor: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub padding: Padding,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            out_channels: 1,
            base_channels: 32,
            depth: 4,
            padding: Padding::Same,
        }
    }
}

/// What a layer does in the network; determines its kernel size and activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv3x3,
    UpConv2x2,
    Conv1x1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
}

impl LayerSpec {
    pub fn kernel_size(&self) -> usize {
        match self.kind {
            LayerKind::Conv3x3 => 3,
            LayerKind::UpConv2x2 => 2,
            LayerKind::Conv1x1 => 1,
        }
    }

    pub fn parameter_count(&self) -> usize {
        let k = self.kernel_size();
        k * k * self.c_in * self.c_out + self.c_out
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(ModelError::InvalidConfig(msg.to_string()));
        if self.in_channels == 0 {
            return bad("in_channels must be at least 1");
        }
        if self.out_channels == 0 {
            return bad("out_channels must be at least 1");
        }
        if self.base_channels == 0 {
            return bad("base_channels must be at least 1");
        }
        if self.depth == 0 {
            return bad("depth must be at least 1");
        }
        if self.depth > 16 || self.base_channels.checked_shl(self.depth as u32).is_none() {
            return bad("depth too large");
        }
        Ok(())
    }

    /// Channel width at encoder level `level` (the bottleneck is `level == depth`).
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Input extents must be divisible by this.
    pub fn size_divisor(&self) -> usize {
        1 << self.depth
    }

    pub fn layer_count(&self) -> usize {
        5 * self.depth + 3
    }

    /// The ordered layer plan.
    pub fn layer_plan(&self) -> Vec<LayerSpec> {
        let conv = |c_in, c_out| LayerSpec {
            kind: LayerKind::Conv3x3,
            c_in,
            c_out,
        };
        let mut plan = Vec::with_capacity(self.layer_count());
        let mut c = self.in_channels;
        for level in 0..=self.depth {
            let w = self.width(level);
            plan.push(conv(c, w));
            plan.push(conv(w, w));
            c = w;
        }
        for level in (0..self.depth).rev() {
            let w = self.width(level);
            plan.push(LayerSpec {
                kind: LayerKind::UpConv2x2,
                c_in: c,
                c_out: w,
            });
            plan.push(conv(2 * w, w));
            plan.push(conv(w, w));
            c = w;
        }
        plan.push(LayerSpec {
            kind: LayerKind::Conv1x1,
            c_in: c,
            c_out: self.out_channels,
        });
        plan
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_plan().iter().map(LayerSpec::parameter_count).sum()
    }

    fn encoder_layer(&self, level: usize, j: usize) -> usize {
        2 * level + j
    }

    /// Index of the up-conv for decoder `level`; its two convs follow it.
    fn decoder_layer(&self, level: usize) -> usize {
        2 * (self.depth + 1) + 3 * (self.depth - 1 - level)
    }

    fn final_layer(&self) -> usize {
        5 * self.depth + 2
    }
}

/// He-normal weights with `std = sqrt(2 / fan_in)`, where `fan_in` is the product
/// of every axis after the first (`c_in · kh · kw` for a conv kernel).
///
/// Draws come from PCG-64 seeded with `seed`, so values are reproducible across
/// platforms.
pub fn init_weights(shape: &[usize], seed: u64) -> Tensor {
    let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
    let std = (2.0 / fan_in as f64).sqrt();
    let mut rng = Pcg64::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * std
    })
}

fn layer_seed(seed: u64, layer: usize) -> u64 {
    // splitmix64 finaliser over (seed, layer)
    let mut z = seed ^ (layer as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNetModel {
    pub config: UNetConfig,
    pub seed: u64,
    pub layers: Vec<ConvKernel>,
}

/// Per-layer parameter gradients, laid out exactly like [`UNetModel::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<ConvKernel>,
}

impl Gradients {
    pub fn zeros_like(model: &UNetModel) -> Self {
        Self {
            layers: model.layers.iter().map(ConvKernel::zeros_like).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.add_assign(&b.weights)?;
            a.bias.add_assign(&b.bias)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.scale(factor);
            l.bias.scale(factor);
        }
    }

    /// Flattened view in parameter order.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.data().iter().chain(l.bias.data()).copied())
    }
}

pub fn build_unet(config: UNetConfig, seed: u64) -> Result<UNetModel> {
    config.validate()?;
    let layers = config
        .layer_plan()
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let k = spec.kernel_size();
            ConvKernel {
                weights: init_weights(&[spec.c_out, spec.c_in, k, k], layer_seed(seed, i)),
                bias: Tensor::zeros(&[spec.c_out]),
            }
        })
        .collect();
    Ok(UNetModel { config, seed, layers })
}

/// Intermediate values kept by [`UNetModel::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    /// Input to each layer, in layer order.
    inputs: Vec<Tensor>,
    /// Post-activation output of each layer (raw logits for the final layer).
    outputs: Vec<Tensor>,
    pools: Vec<PoolIndices>,
    probabilities: Tensor,
}

impl ActivationCache {
    pub fn logits(&self) -> &Tensor {
        self.outputs.last().expect("cache holds every layer")
    }

    pub fn probabilities(&self) -> &Tensor {
        &self.probabilities
    }
}

impl UNetModel {
    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(ConvKernel::parameter_count).sum()
    }

    pub fn conv_layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Flattened parameters in layer order.
    pub fn parameters(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.data().iter().chain(l.bias.data()).copied())
    }

    pub fn check_input(&self, image: &Tensor) -> Result<()> {
        let (c, h, w) = image.dims3()?;
        if c != self.config.in_channels {
            return Err(TensorError::ShapeMismatch {
                axis: "in_channels",
                expected: self.config.in_channels,
                found: c,
            }
            .into());
        }
        let divisor = self.config.size_divisor();
        if h % divisor != 0 {
            return Err(ModelError::IndivisibleExtent {
                axis: "height",
                extent: h,
                divisor,
            });
        }
        if w % divisor != 0 {
            return Err(ModelError::IndivisibleExtent {
                axis: "width",
                extent: w,
                divisor,
            });
        }
        Ok(())
    }

    /// Runs the network on one `[in_channels, H, W]` image and returns per-pixel
    /// foreground probabilities together with the cache for [`Self::backward`].
    pub fn forward(&self, image: &Tensor) -> Result<(Tensor, ActivationCache)> {
        self.check_input(image)?;
        let cfg = &self.config;
        let pad = cfg.padding;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut outputs = Vec::with_capacity(n);
        let mut pools = Vec::with_capacity(cfg.depth);

        let mut x = image.clone();
        let mut skips = Vec::with_capacity(cfg.depth);
        for level in 0..cfg.depth {
            let i = cfg.encoder_layer(level, 0);
            let a = conv_relu(x, &self.layers[i], pad, &mut inputs, &mut outputs)?;
            let b = conv_relu(a, &self.layers[i + 1], pad, &mut inputs, &mut outputs)?;
            let (pooled, idx) = maxpool2x2_forward(&b)?;
            pools.push(idx);
            skips.push(b);
            x = pooled;
        }
        let i = cfg.encoder_layer(cfg.depth, 0);
        x = conv_relu(x, &self.layers[i], pad, &mut inputs, &mut outputs)?;
        x = conv_relu(x, &self.layers[i + 1], pad, &mut inputs, &mut outputs)?;

        for level in (0..cfg.depth).rev() {
            let u = cfg.decoder_layer(level);
            let up = upconv2x2_forward(&x, &self.layers[u])?;
            let cat = concat_channels(&up, &skips[level])?;
            inputs.push(x);
            outputs.push(up);
            let a = conv_relu(cat, &self.layers[u + 1], pad, &mut inputs, &mut outputs)?;
            x = conv_relu(a, &self.layers[u + 2], pad, &mut inputs, &mut outputs)?;
        }

        let logits = conv2d_forward(&x, &self.layers[cfg.final_layer()], Padding::Same)?;
        inputs.push(x);
        outputs.push(logits);
        let probabilities = sigmoid_forward(outputs.last().expect("just pushed"));
        let cache = ActivationCache {
            inputs,
            outputs,
            pools,
            probabilities: probabilities.clone(),
        };
        Ok((probabilities, cache))
    }

    /// Backpropagates a gradient on the probability map.
    pub fn backward(&self, cache: &ActivationCache, grad_probabilities: &Tensor) -> Result<Gradients> {
        let grad_logits = crate::tensor::sigmoid_backward(&cache.probabilities, grad_probabilities)?;
        self.backward_from_logits(cache, &grad_logits)
    }

    /// Backpropagates a gradient on the pre-sigmoid logits.
    pub fn backward_from_logits(&self, cache: &ActivationCache, grad_logits: &Tensor) -> Result<Gradients> {
        let cfg = &self.config;
        let pad = cfg.padding;
        let mut grads: Vec<Option<ConvKernel>> = vec![None; self.layers.len()];

        let conv_step =
            |grads: &mut [Option<ConvKernel>], i: usize, g: &Tensor, relu: bool, padding: Padding| -> Result<Tensor> {
                let g = if relu {
                    relu_backward(&cache.outputs[i], g)?
                } else {
                    g.clone()
                };
                let (gi, gw, gb) = conv2d_backward(&cache.inputs[i], &self.layers[i], &g, padding)?;
                grads[i] = Some(ConvKernel { weights: gw, bias: gb });
                Ok(gi)
            };

        let mut g = conv_step(&mut grads, cfg.final_layer(), grad_logits, false, Padding::Same)?;

        let mut skip_grads: Vec<Tensor> = Vec::with_capacity(cfg.depth);
        for level in 0..cfg.depth {
            let u = cfg.decoder_layer(level);
            g = conv_step(&mut grads, u + 2, &g, true, pad)?;
            let g_cat = conv_step(&mut grads, u + 1, &g, true, pad)?;
            let up_channels = cache.outputs[u].shape()[0];
            let skip = &cache.outputs[cfg.encoder_layer(level, 1)];
            let skip_shape = [skip.shape()[0], skip.shape()[1], skip.shape()[2]];
            let (g_up, g_skip) = concat_channels_backward(&g_cat, up_channels, skip_shape)?;
            skip_grads.push(g_skip);
            let (gi, gw, gb) = upconv2x2_backward(&cache.inputs[u], &self.layers[u], &g_up)?;
            grads[u] = Some(ConvKernel { weights: gw, bias: gb });
            g = gi;
        }

        let b = cfg.encoder_layer(cfg.depth, 0);
        g = conv_step(&mut grads, b + 1, &g, true, pad)?;
        g = conv_step(&mut grads, b, &g, true, pad)?;

        for level in (0..cfg.depth).rev() {
            let mut g_skip = maxpool2x2_backward(&cache.pools[level], &g)?;
            g_skip.add_assign(&skip_grads[level])?;
            let e = cfg.encoder_layer(level, 0);
            g = conv_step(&mut grads, e + 1, &g_skip, true, pad)?;
            g = conv_step(&mut grads, e, &g, true, pad)?;
        }

        Ok(Gradients {
            layers: grads.into_iter().map(|g| g.expect("every layer visited")).collect(),
        })
    }
}

fn conv_relu(
    x: Tensor,
    layer: &ConvKernel,
    padding: Padding,
    inputs: &mut Vec<Tensor>,
    outputs: &mut Vec<Tensor>,
) -> Result<Tensor> {
    let y = relu_forward(&conv2d_forward(&x, layer, padding)?);
    inputs.push(x);
    outputs.push(y.clone());
    Ok(y)
}

/// Convenience wrapper matching the pipeline's naming.
pub fn unet_forward(model: &UNetModel, image: &Tensor) -> Result<(Tensor, ActivationCache)> {
    model.forward(image)
}

pub fn unet_backward(model: &UNetModel, cache: &ActivationCache, grad: &Tensor) -> Result<Gradients> {
    model.backward(cache, grad)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PTVSEGCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Binary checkpoint, little-endian throughout:
///
/// ```text
/// magic "PTVSEGCK" | version u32 | in u32 | out u32 | base u32 | depth u32
/// | padding u8 (0 same, 1 valid) | seed u64 | layer count u32
/// | per layer: weights (rank u32, dims u32.., values f64..), bias (same)
/// ```
pub fn encode_checkpoint(model: &UNetModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * model.parameter_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = &model.config;
    for v in [cfg.in_channels, cfg.out_channels, cfg.base_channels, cfg.depth] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(match cfg.padding {
        Padding::Same => 0,
        Padding::Valid => 1,
    });
    out.extend_from_slice(&model.seed.to_le_bytes());
    out.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    for layer in &model.layers {
        for t in [&layer.weights, &layer.bias] {
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ModelError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(ModelError::Checkpoint(format!("bad tensor rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| ModelError::Checkpoint("tensor too large".into()))?;
        let raw = self.take(
            len.checked_mul(8)
                .ok_or_else(|| ModelError::Checkpoint("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Tensor::new(shape, data)?)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<UNetModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let in_channels = r.u32()? as usize;
    let out_channels = r.u32()? as usize;
    let base_channels = r.u32()? as usize;
    let depth = r.u32()? as usize;
    let padding = match r.take(1)?[0] {
        0 => Padding::Same,
        1 => Padding::Valid,
        other => return Err(ModelError::Checkpoint(format!("bad padding tag {other}"))),
    };
    let config = UNetConfig {
        in_channels,
        out_channels,
        base_channels,
        depth,
        padding,
    };
    config.validate()?;
    let seed = r.u64()?;
    let count = r.u32()? as usize;
    let plan = config.layer_plan();
    if count != plan.len() {
        return Err(ModelError::Checkpoint(format!(
            "expected {} layers, found {count}",
            plan.len()
        )));
    }
    let mut layers = Vec::with_capacity(count);
    for (i, spec) in plan.iter().enumerate() {
        let weights = r.tensor()?;
        let bias = r.tensor()?;
        let k = spec.kernel_size();
        if weights.shape() != [spec.c_out, spec.c_in, k, k] || bias.shape() != [spec.c_out] {
            return Err(ModelError::Checkpoint(format!("layer {i} has unexpected shape")));
        }
        layers.push(ConvKernel { weights, bias });
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Checkpoint("trailing bytes".into()));
    }
    Ok(UNetModel { config, seed, layers })
}

pub fn save_checkpoint(model: &UNetModel, path: &std::path::Path) -> std::io::Result<()> {
    std::fs::write(path, encode_checkpoint(model))
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<UNetModel> {
    let bytes = std::fs::read(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UNetConfig {
        UNetConfig {
            base_channels: 2,
            depth: 2,
            ..UNetConfig::default()
        }
    }

    #[test]
    fn default_plan_has_23_layers() {
        let cfg = UNetConfig::default();
        assert_eq!(cfg.layer_plan().len(), 23);
        assert_eq!(cfg.layer_count(), 23);
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            UNetConfig {
                base_channels: 0,
                ..tiny()
            },
            UNetConfig { depth: 0, ..tiny() },
            UNetConfig {
                in_channels: 0,
                ..tiny()
            },
        ] {
            assert!(matches!(build_unet(cfg, 0), Err(ModelError::InvalidConfig(_))));
        }
    }

    #[test]
    fn widths_double_then_halve() {
        let plan = UNetConfig::default().layer_plan();
        let outs: Vec<usize> = plan.iter().map(|l| l.c_out).collect();
        assert_eq!(
            outs,
            vec![32, 32, 64, 64, 128, 128, 256, 256, 512, 512, 256, 256, 256, 128, 128, 128, 64, 64, 64, 32, 32, 32, 1]
        );
    }

    #[test]
    fn forward_shape_and_range() {
        let model = build_unet(tiny(), 3).unwrap();
        let img = Tensor::from_fn(&[1, 8, 12], |i| (i as f64 * 0.37).sin());
        let (p, cache) = model.forward(&img).unwrap();
        assert_eq!(p.shape(), &[1, 8, 12]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(cache.logits().shape(), &[1, 8, 12]);
    }

    #[test]
    fn forward_rejects_indivisible() {
        let model = build_unet(tiny(), 3).unwrap();
        let err = model.forward(&Tensor::zeros(&[1, 8, 6])).unwrap_err();
        assert!(matches!(err, ModelError::IndivisibleExtent { axis: "width", .. }));
    }

    #[test]
    fn zero_model_outputs_half() {
        let mut model = build_unet(tiny(), 3).unwrap();
        for l in &mut model.layers {
            *l = l.zeros_like();
        }
        let (p, _) = model.forward(&Tensor::full(&[1, 8, 8], 0.7)).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_upstream_grad_gives_zero_grads() {
        let model = build_unet(tiny(), 5).unwrap();
        let img = Tensor::from_fn(&[1, 8, 8], |i| i as f64 / 64.0);
        let (p, cache) = model.forward(&img).unwrap();
        let g = model.backward(&cache, &Tensor::zeros(p.shape())).unwrap();
        assert!(g.values().all(|v| v == 0.0));
    }

    #[test]
    fn init_is_seeded_and_bias_is_zero() {
        let a = build_unet(tiny(), 11).unwrap();
        let b = build_unet(tiny(), 11).unwrap();
        let c = build_unet(tiny(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.layers.iter().all(|l| l.bias.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let model = build_unet(tiny(), 1).unwrap();
        let bytes = encode_checkpoint(&model);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }
}
