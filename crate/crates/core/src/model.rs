//! The VGG16-UNET graph.
//!
//! Encoder: the thirteen VGG16 3x3 convolutions in five blocks
//! (64, 64 | 128, 128 | 256 x 3 | 512 x 3 | 512 x 3), each block followed by
//! a 2x2 max pool. A single 3x3 convolution sits at the bottleneck where
//! VGG16's dense layers used to be. The decoder has five stages of
//! (2x upsample, optional skip concat, 3x3 conv) with widths
//! 512, 256, 128, 64, 32, then a 1x1 convolution and a sigmoid.
//!
//! Skips carry the pre-pool output of encoder blocks 4, 3, 2, 1 into decoder
//! stages 2, 3, 4, 5 respectively (the stage whose resolution matches); the
//! deepest decoder stage has none. All channel counts are multiplied by the
//! width multiplier for small variants.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::layers::{self, ConvCache, ConvParams, PoolCache};
use crate::rng;
use crate::tensor::Tensor;

/// Standard deviation of the Gaussian used for randomly initialised encoder
/// kernels.
pub const ENCODER_INIT_STDDEV: f32 = 0.05;

const ENCODER_BLOCKS: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
const CENTER_CHANNELS: usize = 512;
const DECODER_CHANNELS: [usize; 5] = [512, 256, 128, 64, 32];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub width_multiplier: f64,
}

impl ModelConfig {
    pub fn new(height: usize, width: usize, width_multiplier: f64) -> Result<Self> {
        if height == 0 || width == 0 || height % 32 != 0 || width % 32 != 0 {
            return Err(shape_err!(
                "input size {height}x{width} must be a positive multiple of 32"
            ));
        }
        if !(width_multiplier > 0.0 && width_multiplier <= 1.0) {
            return Err(Error::Parameter(format!(
                "width multiplier {width_multiplier} outside (0, 1]"
            )));
        }
        Ok(ModelConfig {
            height,
            width,
            width_multiplier,
        })
    }

    /// Reference configuration: 224x224, full width.
    pub fn reference() -> Self {
        ModelConfig {
            height: 224,
            width: 224,
            width_multiplier: 1.0,
        }
    }

    fn channels(&self, c: usize) -> usize {
        ((c as f64 * self.width_multiplier).round() as usize).max(1)
    }
}

/// Whether a layer belongs to the (transferable) encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Section {
    Encoder,
    Center,
    Decoder,
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub section: Section,
    pub params: ConvParams,
}

/// One step of the forward program.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    /// Convolution `layers[index]`, followed by ReLU when `relu` is set.
    Conv { index: usize, relu: bool },
    MaxPool,
    /// Remember the current activation as skip source `slot`.
    SaveSkip(usize),
    Upsample,
    /// Concatenate skip source `slot` after the current channels.
    ConcatSkip(usize),
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    ops: Vec<Op>,
    layers: Vec<ConvLayer>,
}

/// Per-layer gradients, in the same order as [`Model::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<ConvParams>,
}

enum OpCache {
    Conv { cache: ConvCache, output: Option<Tensor> },
    Pool(PoolCache),
    Concat { main_channels: usize },
    Sigmoid(Tensor),
    None,
}

/// Activations retained by [`Model::forward`] for the backward pass.
pub struct ForwardTrace {
    caches: Vec<OpCache>,
}

/// Parameter counts by section.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParameterReport {
    pub encoder: usize,
    pub center: usize,
    pub decoder: usize,
    pub head: usize,
}

impl ParameterReport {
    pub fn total(&self) -> usize {
        self.encoder + self.center + self.decoder + self.head
    }
}

struct Builder {
    ops: Vec<Op>,
    layers: Vec<ConvLayer>,
    seed: u64,
}

impl Builder {
    fn conv(&mut self, name: String, section: Section, k: usize, cin: usize, cout: usize, relu: bool) -> Result<()> {
        let index = self.layers.len();
        let shape = [k, k, cin, cout];
        let stddev = match section {
            Section::Encoder => ENCODER_INIT_STDDEV,
            // He initialisation for the randomly initialised upper layers
            _ => (2.0 / (k * k * cin) as f32).sqrt(),
        };
        let kernels = Tensor::gaussian(&shape, 0.0, stddev, self.seed ^ rng_key(index))?;
        let params = ConvParams::new(kernels, Tensor::zeros(&[cout])?)?;
        self.layers.push(ConvLayer {
            name,
            section,
            params,
        });
        self.ops.push(Op::Conv { index, relu });
        Ok(())
    }
}

fn rng_key(index: usize) -> u64 {
    use rand::RngCore;
    rng::stream(index as u64, &[0x0d5e]).next_u64()
}

impl Model {
    /// Builds the network with freshly initialised weights.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let config = ModelConfig::new(config.height, config.width, config.width_multiplier)?;
        let mut b = Builder {
            ops: Vec::new(),
            layers: Vec::new(),
            seed,
        };
        let mut channels = 3;
        let mut skip_channels = Vec::new();
        for (block, &(width, convs)) in ENCODER_BLOCKS.iter().enumerate() {
            let out = config.channels(width);
            for n in 0..convs {
                b.conv(format!("enc{}_conv{}", block + 1, n + 1), Section::Encoder, 3, channels, out, true)?;
                channels = out;
            }
            if block < 4 {
                b.ops.push(Op::SaveSkip(block));
                skip_channels.push(channels);
            }
            b.ops.push(Op::MaxPool);
        }
        let center = config.channels(CENTER_CHANNELS);
        b.conv("center_conv".into(), Section::Center, 3, channels, center, true)?;
        channels = center;
        for (stage, &width) in DECODER_CHANNELS.iter().enumerate() {
            b.ops.push(Op::Upsample);
            if stage > 0 {
                let slot = 4 - stage;
                b.ops.push(Op::ConcatSkip(slot));
                channels += skip_channels[slot];
            }
            let out = config.channels(width);
            b.conv(format!("dec{}_conv", stage + 1), Section::Decoder, 3, channels, out, true)?;
            channels = out;
        }
        b.conv("head_conv".into(), Section::Head, 1, channels, 1, false)?;
        b.ops.push(Op::Sigmoid);
        Ok(Model {
            config,
            ops: b.ops,
            layers: b.layers,
        })
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&ConvLayer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn count_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.params.parameter_count()).sum()
    }

    pub fn parameter_report(&self) -> ParameterReport {
        let mut r = ParameterReport::default();
        for l in &self.layers {
            let n = l.params.parameter_count();
            match l.section {
                Section::Encoder => r.encoder += n,
                Section::Center => r.center += n,
                Section::Decoder => r.decoder += n,
                Section::Head => r.head += n,
            }
        }
        r
    }

    /// Mutable views of every parameter tensor: kernel then bias, layer by
    /// layer in graph order.
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.params.kernels, &mut l.params.biases])
            .collect()
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let (_, h, w, c) = batch.dims4()?;
        if h % 32 != 0 || w % 32 != 0 || c != 3 {
            return Err(shape_err!(
                "model input must be [B, H, W, 3] with H, W multiples of 32, got {:?}",
                batch.shape()
            ));
        }
        Ok(())
    }

    /// Predicted disc probabilities `[B, H, W, 1]` without retaining
    /// activations.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        self.run(batch, false).map(|(out, _)| out)
    }

    /// Forward pass retaining what [`Model::backward`] needs.
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, ForwardTrace)> {
        self.run(batch, true)
    }

    fn run(&self, batch: &Tensor, keep: bool) -> Result<(Tensor, ForwardTrace)> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        let mut skips: Vec<Option<Tensor>> = vec![None; 4];
        let mut caches = Vec::with_capacity(if keep { self.ops.len() } else { 0 });
        for op in &self.ops {
            let cache = match *op {
                Op::Conv { index, relu } => {
                    let (y, cache) = layers::conv2d_forward(&x, &self.layers[index].params)?;
                    x = if relu { layers::relu(&y) } else { y };
                    OpCache::Conv {
                        cache,
                        output: relu.then(|| x.clone()),
                    }
                }
                Op::MaxPool => {
                    let (y, cache) = layers::maxpool2_forward(&x)?;
                    x = y;
                    OpCache::Pool(cache)
                }
                Op::SaveSkip(slot) => {
                    skips[slot] = Some(x.clone());
                    OpCache::None
                }
                Op::Upsample => {
                    x = layers::upsample2_forward(&x)?;
                    OpCache::None
                }
                Op::ConcatSkip(slot) => {
                    let skip = skips[slot]
                        .take()
                        .ok_or_else(|| shape_err!("skip slot {slot} used before it was saved"))?;
                    let main_channels = x.dims4()?.3;
                    x = layers::concat_channels(&x, &skip)?;
                    OpCache::Concat { main_channels }
                }
                Op::Sigmoid => {
                    x = layers::sigmoid(&x);
                    OpCache::Sigmoid(x.clone())
                }
            };
            if keep {
                caches.push(cache);
            }
        }
        Ok((x, ForwardTrace { caches }))
    }

    /// Gradients of a scalar loss with respect to every parameter, given the
    /// loss gradient with respect to the predictions.
    pub fn backward(&self, trace: ForwardTrace, loss_grad: &Tensor) -> Result<Gradients> {
        if trace.caches.len() != self.ops.len() {
            return Err(shape_err!("trace does not belong to this model"));
        }
        let mut grads: Vec<Option<ConvParams>> = vec![None; self.layers.len()];
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; 4];
        let mut g = loss_grad.clone();
        for (op, cache) in self.ops.iter().zip(trace.caches).rev() {
            match (*op, cache) {
                (Op::Sigmoid, OpCache::Sigmoid(out)) => {
                    g = layers::sigmoid_backward(&out, &g)?;
                }
                (Op::Conv { index, .. }, OpCache::Conv { cache, output }) => {
                    if let Some(out) = output {
                        g = layers::relu_backward(&out, &g)?;
                    }
                    let cg = layers::conv2d_backward(&cache, &self.layers[index].params, &g)?;
                    grads[index] = Some(ConvParams {
                        kernels: cg.kernels,
                        biases: cg.biases,
                    });
                    g = cg.input;
                }
                (Op::MaxPool, OpCache::Pool(cache)) => {
                    g = layers::maxpool2_backward(&cache, &g)?;
                }
                (Op::Upsample, _) => {
                    g = layers::upsample2_backward(&g)?;
                }
                (Op::ConcatSkip(slot), OpCache::Concat { main_channels }) => {
                    let (main, skip) = layers::split_channels(&g, main_channels)?;
                    skip_grads[slot] = Some(skip);
                    g = main;
                }
                (Op::SaveSkip(slot), _) => {
                    if let Some(sg) = skip_grads[slot].take() {
                        g.add_assign(&sg)?;
                    }
                }
                _ => return Err(shape_err!("trace does not belong to this model")),
            }
        }
        Ok(Gradients {
            layers: grads
                .into_iter()
                .map(|g| g.expect("every conv layer appears in the op list"))
                .collect(),
        })
    }
}

impl Gradients {
    /// Gradient tensors in the order of [`Model::parameters_mut`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.kernels, &l.biases])
            .collect()
    }
}
