//! Backbone assembly, forward/backward over the layer stack, and the
//! checkpoint file format.
//!
//! Two canned backbones are provided. The image variant is the smallest
//! stack exercising every architecture adjustment:
//! IN -> Conv(3x3, s2) -> IN -> PReLU -> [Dropout] -> Conv(3x3, s2) ->
//! PReLU -> GlobalDepthwisePool -> Affine(->N) -> L2 head.
//! The vector variant is an Affine/PReLU stack for non-image data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::layers::{FeatureMap, Layer, LayerCache, LayerGrads, Mode, Tensor};
use crate::numkit::{Matrix, Rng};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"RMCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputShape {
    Vector { dim: usize },
    Image { channels: usize, height: usize, width: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input: InputShape,
    /// Hidden widths of the vector backbone; conv channel widths of the
    /// image backbone (exactly two convolutions).
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    pub num_classes: usize,
    #[serde(default = "default_prelu_init")]
    pub prelu_init: f64,
    #[serde(default)]
    pub use_dropout: bool,
    #[serde(default = "default_dropout_mu")]
    pub dropout_mu: f64,
    #[serde(default = "default_dropout_sigma")]
    pub dropout_sigma: f64,
}

fn default_hidden() -> Vec<usize> {
    vec![64]
}
fn default_embedding_dim() -> usize {
    256
}
fn default_prelu_init() -> f64 {
    0.25
}
fn default_dropout_mu() -> f64 {
    0.1
}
fn default_dropout_sigma() -> f64 {
    0.03
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 1 || self.num_classes < 1 {
            return Err(Error::Config("embedding_dim and num_classes must be >= 1".into()));
        }
        if self.dropout_sigma < 0.0 {
            return Err(Error::Config("dropout_sigma must be >= 0".into()));
        }
        if let InputShape::Image { .. } = self.input {
            if self.hidden.len() != 2 {
                return Err(Error::Config(
                    "image backbone expects exactly two conv widths in `hidden`".into(),
                ));
            }
        }
        Ok(())
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub layers: Vec<Layer>,
}

fn glorot_uniform(rng: &mut Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.uniform_in(-bound, bound)).collect()
}

fn conv_out(dim: usize, k: usize, stride: usize, pad: usize) -> usize {
    (dim + 2 * pad - k) / stride + 1
}

impl Model {
    /// Build and randomly initialize the configured backbone.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        match config.input {
            InputShape::Vector { dim } => {
                let mut prev = dim;
                for (i, &h) in config.hidden.iter().enumerate() {
                    layers.push(Layer::Affine {
                        weights: Matrix::from_vec(prev, h, glorot_uniform(rng, prev, h, prev * h))?,
                        bias: vec![0.0; h],
                    });
                    layers.push(Layer::PRelu { slope: [config.prelu_init] });
                    if i == 0 && config.use_dropout {
                        layers.push(Layer::ContinuousDropout {
                            mu: config.dropout_mu,
                            sigma: config.dropout_sigma,
                        });
                    }
                    prev = h;
                }
                let n = config.embedding_dim;
                layers.push(Layer::Affine {
                    weights: Matrix::from_vec(prev, n, glorot_uniform(rng, prev, n, prev * n))?,
                    bias: vec![0.0; n],
                });
                layers.push(Layer::L2NormalizeHead);
            }
            InputShape::Image { channels, height, width } => {
                let (c1, c2) = (config.hidden[0], config.hidden[1]);
                let k = 3;
                layers.push(Layer::InstanceNorm { eps: 1e-5 });
                layers.push(Layer::Conv2d {
                    kernel: glorot_uniform(rng, channels * k * k, c1 * k * k, c1 * channels * k * k),
                    bias: vec![0.0; c1],
                    out_channels: c1,
                    in_channels: channels,
                    ksize: k,
                    stride: 2,
                    padding: 1,
                });
                layers.push(Layer::InstanceNorm { eps: 1e-5 });
                layers.push(Layer::PRelu { slope: [config.prelu_init] });
                if config.use_dropout {
                    layers.push(Layer::ContinuousDropout {
                        mu: config.dropout_mu,
                        sigma: config.dropout_sigma,
                    });
                }
                layers.push(Layer::Conv2d {
                    kernel: glorot_uniform(rng, c1 * k * k, c2 * k * k, c2 * c1 * k * k),
                    bias: vec![0.0; c2],
                    out_channels: c2,
                    in_channels: c1,
                    ksize: k,
                    stride: 2,
                    padding: 1,
                });
                layers.push(Layer::PRelu { slope: [config.prelu_init] });
                let h2 = conv_out(conv_out(height, k, 2, 1), k, 2, 1);
                let w2 = conv_out(conv_out(width, k, 2, 1), k, 2, 1);
                // average-pooling start
                layers.push(Layer::GlobalDepthwisePool {
                    weights: vec![1.0 / (h2 * w2) as f64; c2 * h2 * w2],
                    channels: c2,
                    height: h2,
                    width: w2,
                });
                let n = config.embedding_dim;
                layers.push(Layer::Affine {
                    weights: Matrix::from_vec(c2, n, glorot_uniform(rng, c2, n, c2 * n))?,
                    bias: vec![0.0; n],
                });
                layers.push(Layer::L2NormalizeHead);
            }
        }
        Ok(Model { config, layers })
    }

    /// Layers trained during warm-up: the depthwise pool and the final
    /// affine projection (the classifier lives outside the model).
    pub fn head_layer_indices(&self) -> Vec<usize> {
        let last_affine = self
            .layers
            .iter()
            .rposition(|l| matches!(l, Layer::Affine { .. }));
        let mut idx: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::GlobalDepthwisePool { .. }))
            .map(|(i, _)| i)
            .collect();
        if let Some(i) = last_affine {
            idx.push(i);
        }
        idx
    }

    pub fn forward(&self, input: &Tensor, mode: Mode, rng: &mut Rng) -> Result<(Vec<f64>, ModelCache)> {
        self.check_input(input)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut current = input.clone();
        for layer in &self.layers {
            let (out, cache) = layer.forward(&current, mode, rng)?;
            caches.push(cache);
            current = out;
        }
        let embedding = current.as_vector()?.clone();
        Ok((embedding, ModelCache { caches }))
    }

    /// Reverse-mode pass; returns per-layer parameter grads (aligned with
    /// `layers`) and the gradient with respect to the input.
    pub fn backward(&self, cache: &ModelCache, grad_embedding: &[f64]) -> Result<(Vec<LayerGrads>, Tensor)> {
        if cache.caches.len() != self.layers.len() {
            return Err(Error::StaleCache(format!(
                "cache has {} entries for {} layers",
                cache.caches.len(),
                self.layers.len()
            )));
        }
        let mut grads: Vec<LayerGrads> = Vec::with_capacity(self.layers.len());
        let mut g = Tensor::Vector(grad_embedding.to_vec());
        for (layer, lc) in self.layers.iter().zip(&cache.caches).rev() {
            let (gin, lg) = layer.backward(lc, &g)?;
            grads.push(lg);
            g = gin;
        }
        grads.reverse();
        Ok((grads, g))
    }

    /// Pre-normalization feature recovered from a forward cache (the
    /// input of the final L2 head).
    pub fn pre_norm_feature(&self, cache: &ModelCache) -> Result<Vec<f64>> {
        match cache.caches.last() {
            Some(LayerCache::L2NormalizeHead { output, norm }) => {
                Ok(output.iter().map(|v| v * norm).collect())
            }
            _ => Err(Error::StaleCache("model does not end in an L2 head".into())),
        }
    }

    /// Reverse-mode pass injecting the gradient below the final L2 head.
    /// Used by objectives that train on unnormalized features; the head
    /// still applies at evaluation time.
    pub fn backward_pre_norm(&self, cache: &ModelCache, grad_feature: &[f64]) -> Result<(Vec<LayerGrads>, Tensor)> {
        if cache.caches.len() != self.layers.len() {
            return Err(Error::StaleCache(format!(
                "cache has {} entries for {} layers",
                cache.caches.len(),
                self.layers.len()
            )));
        }
        let head = self.layers.len() - 1;
        if !matches!(self.layers[head], Layer::L2NormalizeHead) {
            return Err(Error::StaleCache("model does not end in an L2 head".into()));
        }
        let mut grads: Vec<LayerGrads> = vec![LayerGrads(Vec::new())];
        let mut g = Tensor::Vector(grad_feature.to_vec());
        for (layer, lc) in self.layers[..head].iter().zip(&cache.caches[..head]).rev() {
            let (gin, lg) = layer.backward(lc, &g)?;
            grads.push(lg);
            g = gin;
        }
        grads.reverse();
        Ok((grads, g))
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        match (&self.config.input, input) {
            (InputShape::Vector { dim }, Tensor::Vector(v)) if v.len() == *dim => Ok(()),
            (InputShape::Image { channels, height, width }, Tensor::Map(m))
                if m.channels == *channels && m.height == *height && m.width == *width =>
            {
                Ok(())
            }
            _ => Err(Error::ShapeMismatch("input does not match model config".into())),
        }
    }

    /// Input tensor of the configured shape built from a flat payload.
    pub fn input_from_flat(&self, flat: &[f64]) -> Result<Tensor> {
        match self.config.input {
            InputShape::Vector { dim } => {
                if flat.len() != dim {
                    return Err(Error::ShapeMismatch(format!(
                        "payload len {} vs input dim {}",
                        flat.len(),
                        dim
                    )));
                }
                Ok(Tensor::Vector(flat.to_vec()))
            }
            InputShape::Image { channels, height, width } => Ok(Tensor::Map(
                FeatureMap::from_vec(channels, height, width, flat.to_vec())?,
            )),
        }
    }
}

pub struct ModelCache {
    pub caches: Vec<LayerCache>,
}

/// FNV-1a over the canonical JSON form of the config.
pub fn config_digest(config: &ModelConfig) -> u64 {
    let json = serde_json::to_string(config).expect("config serializes");
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in json.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Checkpoint layout: magic, config digest (u64 LE), config JSON
/// (u32 length + bytes), per-layer parameter blocks (u32 length + f64 LE
/// values, in `params()` order), classifier matrix (u32 rows, u32 cols,
/// f64 LE values).
pub fn write_checkpoint(path: &Path, model: &Model, classifier: &Matrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&config_digest(&model.config).to_le_bytes())?;
    let json = serde_json::to_vec(&model.config).expect("config serializes");
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for layer in &model.layers {
        for block in layer.params() {
            w.write_all(&(block.len() as u32).to_le_bytes())?;
            for v in block {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.write_all(&(classifier.rows() as u32).to_le_bytes())?;
    w.write_all(&(classifier.cols() as u32).to_le_bytes())?;
    for v in classifier.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

pub fn read_checkpoint(path: &Path) -> Result<(Model, Matrix)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let mut digest_bytes = [0u8; 8];
    r.read_exact(&mut digest_bytes)?;
    let digest = u64::from_le_bytes(digest_bytes);
    let json_len = read_u32(&mut r)? as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json)?;
    let config: ModelConfig = serde_json::from_slice(&json)
        .map_err(|e| Error::Format(format!("bad checkpoint config: {e}")))?;
    if config_digest(&config) != digest {
        return Err(Error::Format("checkpoint digest does not match config".into()));
    }
    // Rebuild the layer skeleton, then overwrite parameters.
    let mut rng = Rng::new(0);
    let mut model = Model::init(config, &mut rng)?;
    for layer in &mut model.layers {
        for block in layer.params_mut() {
            let len = read_u32(&mut r)? as usize;
            if len != block.len() {
                return Err(Error::Format(format!(
                    "parameter block length {} vs expected {}",
                    len,
                    block.len()
                )));
            }
            block.copy_from_slice(&read_f64s(&mut r, len)?);
        }
    }
    let rows = read_u32(&mut r)? as usize;
    let cols = read_u32(&mut r)? as usize;
    let classifier = Matrix::from_vec(rows, cols, read_f64s(&mut r, rows * cols)?)?;
    Ok((model, classifier))
}
