//! Differentiable layers with explicit forward and backward passes.
//!
//! Every backward pass is validated against the central finite-difference
//! oracle in `numkit` (see the tests here and the `gradcheck` command).

use crate::numkit::{self, Rng};
use crate::{Error, Result};

/// C x H x W feature map, row-major within each channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "feature map {}x{}x{} needs {} entries, got {}",
                channels,
                height,
                width,
                channels * height * width,
                data.len()
            )));
        }
        Ok(FeatureMap { channels, height, width, data })
    }

    #[inline]
    pub fn idx(&self, c: usize, h: usize, w: usize) -> usize {
        (c * self.height + h) * self.width + w
    }

    #[inline]
    pub fn get(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.idx(c, h, w)]
    }
}

/// Activation flowing between layers: a flat vector or a spatial map.
#[derive(Clone, Debug, PartialEq)]
pub enum Tensor {
    Vector(Vec<f64>),
    Map(FeatureMap),
}

impl Tensor {
    pub fn as_vector(&self) -> Result<&Vec<f64>> {
        match self {
            Tensor::Vector(v) => Ok(v),
            Tensor::Map(_) => Err(Error::ShapeMismatch("expected vector, got map".into())),
        }
    }

    pub fn as_map(&self) -> Result<&FeatureMap> {
        match self {
            Tensor::Map(m) => Ok(m),
            Tensor::Vector(_) => Err(Error::ShapeMismatch("expected map, got vector".into())),
        }
    }

    pub fn flat(&self) -> &[f64] {
        match self {
            Tensor::Vector(v) => v,
            Tensor::Map(m) => &m.data,
        }
    }

    fn flat_mut(&mut self) -> &mut [f64] {
        match self {
            Tensor::Vector(v) => v,
            Tensor::Map(m) => &mut m.data,
        }
    }

    /// Zero tensor with the same shape.
    pub fn zeros_like(&self) -> Tensor {
        match self {
            Tensor::Vector(v) => Tensor::Vector(vec![0.0; v.len()]),
            Tensor::Map(m) => Tensor::Map(FeatureMap::zeros(m.channels, m.height, m.width)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Layer with parameters. Input/output orientation for `Affine` is
/// output_j = sum_i W[i][j] x_i + b_j (weights stored in-by-out).
#[derive(Clone, Debug)]
pub enum Layer {
    Affine {
        /// in x out
        weights: numkit::Matrix,
        bias: Vec<f64>,
    },
    Conv2d {
        /// oc * ic * k * k, row-major
        kernel: Vec<f64>,
        bias: Vec<f64>,
        out_channels: usize,
        in_channels: usize,
        ksize: usize,
        stride: usize,
        padding: usize,
    },
    PRelu {
        slope: [f64; 1],
    },
    InstanceNorm {
        eps: f64,
    },
    GlobalDepthwisePool {
        /// same shape as the incoming map (C*H*W)
        weights: Vec<f64>,
        channels: usize,
        height: usize,
        width: usize,
    },
    L2NormalizeHead,
    ContinuousDropout {
        mu: f64,
        sigma: f64,
    },
}

/// Forward intermediates needed by the matching backward call.
#[derive(Clone, Debug)]
pub enum LayerCache {
    Affine { input: Vec<f64> },
    Conv2d { input: FeatureMap },
    PRelu { input: Tensor },
    InstanceNorm { normalized: FeatureMap, inv_std: Vec<f64> },
    GlobalDepthwisePool { input: FeatureMap },
    L2NormalizeHead { output: Vec<f64>, norm: f64 },
    ContinuousDropout { noise: Vec<f64> },
}

/// Gradients aligned with `Layer::params()` ordering.
#[derive(Clone, Debug)]
pub struct LayerGrads(pub Vec<Vec<f64>>);

impl LayerGrads {
    pub fn zeros_for(layer: &Layer) -> Self {
        LayerGrads(layer.params().iter().map(|p| vec![0.0; p.len()]).collect())
    }

    pub fn accumulate(&mut self, other: &LayerGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

impl Layer {
    /// Trainable parameter blocks (possibly empty).
    pub fn params(&self) -> Vec<&[f64]> {
        match self {
            Layer::Affine { weights, bias } => vec![weights.data(), bias],
            Layer::Conv2d { kernel, bias, .. } => vec![kernel, bias],
            Layer::PRelu { slope } => vec![&slope[..]],
            Layer::GlobalDepthwisePool { weights, .. } => vec![weights],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Layer::Affine { weights, bias } => vec![weights.data_mut(), bias],
            Layer::Conv2d { kernel, bias, .. } => vec![kernel, bias],
            Layer::PRelu { slope } => vec![&mut slope[..]],
            Layer::GlobalDepthwisePool { weights, .. } => vec![weights],
            _ => vec![],
        }
    }

    pub fn forward(&self, input: &Tensor, mode: Mode, rng: &mut Rng) -> Result<(Tensor, LayerCache)> {
        match self {
            Layer::Affine { weights, bias } => {
                let x = input.as_vector()?;
                if x.len() != weights.rows() || bias.len() != weights.cols() {
                    return Err(Error::ShapeMismatch(format!(
                        "affine {}x{} with input {} bias {}",
                        weights.rows(),
                        weights.cols(),
                        x.len(),
                        bias.len()
                    )));
                }
                let mut out = bias.clone();
                for (i, xi) in x.iter().enumerate() {
                    let wrow = weights.row(i);
                    for (o, w) in out.iter_mut().zip(wrow) {
                        *o += w * xi;
                    }
                }
                Ok((Tensor::Vector(out), LayerCache::Affine { input: x.clone() }))
            }
            Layer::Conv2d { kernel, bias, out_channels, in_channels, ksize, stride, padding } => {
                let x = input.as_map()?;
                if x.channels != *in_channels {
                    return Err(Error::ShapeMismatch(format!(
                        "conv expects {} input channels, got {}",
                        in_channels, x.channels
                    )));
                }
                let oh = (x.height + 2 * padding).checked_sub(*ksize).map(|d| d / stride + 1);
                let ow = (x.width + 2 * padding).checked_sub(*ksize).map(|d| d / stride + 1);
                let (oh, ow) = match (oh, ow) {
                    (Some(h), Some(w)) if h >= 1 && w >= 1 => (h, w),
                    _ => {
                        return Err(Error::ShapeMismatch(format!(
                            "conv output would be empty for input {}x{} kernel {}",
                            x.height, x.width, ksize
                        )))
                    }
                };
                let mut out = FeatureMap::zeros(*out_channels, oh, ow);
                for oc in 0..*out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = bias[oc];
                            for ic in 0..*in_channels {
                                for ky in 0..*ksize {
                                    for kx in 0..*ksize {
                                        let iy = (oy * stride + ky) as isize - *padding as isize;
                                        let ix = (ox * stride + kx) as isize - *padding as isize;
                                        if iy < 0
                                            || ix < 0
                                            || iy >= x.height as isize
                                            || ix >= x.width as isize
                                        {
                                            continue;
                                        }
                                        let k = kernel
                                            [((oc * in_channels + ic) * ksize + ky) * ksize + kx];
                                        acc += k * x.get(ic, iy as usize, ix as usize);
                                    }
                                }
                            }
                            let i = out.idx(oc, oy, ox);
                            out.data[i] = acc;
                        }
                    }
                }
                Ok((Tensor::Map(out), LayerCache::Conv2d { input: x.clone() }))
            }
            Layer::PRelu { slope } => {
                let a = slope[0];
                let mut out = input.clone();
                for v in out.flat_mut() {
                    if *v < 0.0 {
                        *v *= a;
                    }
                }
                Ok((out, LayerCache::PRelu { input: input.clone() }))
            }
            Layer::InstanceNorm { eps } => {
                let x = input.as_map()?;
                let n = (x.height * x.width) as f64;
                let mut out = x.clone();
                let mut inv_stds = Vec::with_capacity(x.channels);
                for c in 0..x.channels {
                    let base = c * x.height * x.width;
                    let slice = &x.data[base..base + x.height * x.width];
                    let mean = slice.iter().sum::<f64>() / n;
                    let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    for (o, v) in out.data[base..base + x.height * x.width]
                        .iter_mut()
                        .zip(slice)
                    {
                        *o = (v - mean) * inv_std;
                    }
                    inv_stds.push(inv_std);
                }
                let cache = LayerCache::InstanceNorm { normalized: out.clone(), inv_std: inv_stds };
                Ok((Tensor::Map(out), cache))
            }
            Layer::GlobalDepthwisePool { weights, channels, height, width } => {
                let x = input.as_map()?;
                if x.channels != *channels || x.height != *height || x.width != *width {
                    return Err(Error::ShapeMismatch(format!(
                        "pool weights {}x{}x{} vs input {}x{}x{}",
                        channels, height, width, x.channels, x.height, x.width
                    )));
                }
                let hw = height * width;
                let out: Vec<f64> = (0..*channels)
                    .map(|c| numkit::dot(&weights[c * hw..(c + 1) * hw], &x.data[c * hw..(c + 1) * hw]))
                    .collect();
                Ok((Tensor::Vector(out), LayerCache::GlobalDepthwisePool { input: x.clone() }))
            }
            Layer::L2NormalizeHead => {
                let x = input.as_vector()?;
                let norm = numkit::norm2(x);
                if norm <= numkit::EPS_NORM {
                    return Err(Error::DegenerateNorm(norm));
                }
                let out: Vec<f64> = x.iter().map(|v| v / norm).collect();
                let cache = LayerCache::L2NormalizeHead { output: out.clone(), norm };
                Ok((Tensor::Vector(out), cache))
            }
            Layer::ContinuousDropout { mu, sigma } => {
                let flat = input.flat();
                let noise: Vec<f64> = match mode {
                    Mode::Train => flat
                        .iter()
                        .map(|_| if *sigma == 0.0 { *mu } else { rng.normal_scaled(*mu, *sigma) })
                        .collect(),
                    Mode::Eval => vec![*mu; flat.len()],
                };
                let mut out = input.clone();
                for (o, xi) in out.flat_mut().iter_mut().zip(&noise) {
                    *o *= xi;
                }
                Ok((out, LayerCache::ContinuousDropout { noise }))
            }
        }
    }

    /// Reverse-mode step: returns (grad wrt input, grads wrt params).
    pub fn backward(&self, cache: &LayerCache, grad_out: &Tensor) -> Result<(Tensor, LayerGrads)> {
        match (self, cache) {
            (Layer::Affine { weights, .. }, LayerCache::Affine { input }) => {
                let g = grad_out.as_vector()?;
                if g.len() != weights.cols() {
                    return Err(Error::StaleCache(format!(
                        "affine grad len {} vs {} outputs",
                        g.len(),
                        weights.cols()
                    )));
                }
                let mut gx = vec![0.0; input.len()];
                let mut gw = numkit::Matrix::zeros(weights.rows(), weights.cols());
                for (i, xi) in input.iter().enumerate() {
                    let wrow = weights.row(i);
                    gx[i] = numkit::dot(wrow, g);
                    let grow = gw.row_mut(i);
                    for (go, gj) in grow.iter_mut().zip(g) {
                        *go = xi * gj;
                    }
                }
                let gb = g.clone();
                Ok((
                    Tensor::Vector(gx),
                    LayerGrads(vec![gw.data().to_vec(), gb]),
                ))
            }
            (
                Layer::Conv2d { kernel, out_channels, in_channels, ksize, stride, padding, .. },
                LayerCache::Conv2d { input },
            ) => {
                let g = grad_out.as_map()?;
                let mut gx = FeatureMap::zeros(input.channels, input.height, input.width);
                let mut gk = vec![0.0; kernel.len()];
                let mut gb = vec![0.0; *out_channels];
                for oc in 0..*out_channels {
                    for oy in 0..g.height {
                        for ox in 0..g.width {
                            let go = g.get(oc, oy, ox);
                            gb[oc] += go;
                            for ic in 0..*in_channels {
                                for ky in 0..*ksize {
                                    for kx in 0..*ksize {
                                        let iy = (oy * stride + ky) as isize - *padding as isize;
                                        let ix = (ox * stride + kx) as isize - *padding as isize;
                                        if iy < 0
                                            || ix < 0
                                            || iy >= input.height as isize
                                            || ix >= input.width as isize
                                        {
                                            continue;
                                        }
                                        let ki =
                                            ((oc * in_channels + ic) * ksize + ky) * ksize + kx;
                                        let xi = input.idx(ic, iy as usize, ix as usize);
                                        gk[ki] += go * input.data[xi];
                                        gx.data[xi] += go * kernel[ki];
                                    }
                                }
                            }
                        }
                    }
                }
                Ok((Tensor::Map(gx), LayerGrads(vec![gk, gb])))
            }
            (Layer::PRelu { slope }, LayerCache::PRelu { input }) => {
                let a = slope[0];
                let mut gx = grad_out.clone();
                let mut ga = 0.0;
                for (g, x) in gx.flat_mut().iter_mut().zip(input.flat()) {
                    if *x < 0.0 {
                        ga += *g * *x;
                        *g *= a;
                    }
                }
                Ok((gx, LayerGrads(vec![vec![ga]])))
            }
            (Layer::InstanceNorm { .. }, LayerCache::InstanceNorm { normalized, inv_std }) => {
                let g = grad_out.as_map()?;
                let n = (normalized.height * normalized.width) as f64;
                let mut gx = FeatureMap::zeros(normalized.channels, normalized.height, normalized.width);
                let hw = normalized.height * normalized.width;
                for c in 0..normalized.channels {
                    let gs = &g.data[c * hw..(c + 1) * hw];
                    let xh = &normalized.data[c * hw..(c + 1) * hw];
                    let mean_g = gs.iter().sum::<f64>() / n;
                    let mean_gx = gs.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, gi), xi) in gx.data[c * hw..(c + 1) * hw]
                        .iter_mut()
                        .zip(gs)
                        .zip(xh)
                    {
                        *o = inv_std[c] * (gi - mean_g - xi * mean_gx);
                    }
                }
                Ok((Tensor::Map(gx), LayerGrads(vec![])))
            }
            (
                Layer::GlobalDepthwisePool { weights, channels, height, width },
                LayerCache::GlobalDepthwisePool { input },
            ) => {
                let g = grad_out.as_vector()?;
                let hw = height * width;
                let mut gx = FeatureMap::zeros(*channels, *height, *width);
                let mut gw = vec![0.0; weights.len()];
                for c in 0..*channels {
                    let gc = g[c];
                    for i in 0..hw {
                        gx.data[c * hw + i] = gc * weights[c * hw + i];
                        gw[c * hw + i] = gc * input.data[c * hw + i];
                    }
                }
                Ok((Tensor::Map(gx), LayerGrads(vec![gw])))
            }
            (Layer::L2NormalizeHead, LayerCache::L2NormalizeHead { output, norm }) => {
                // Jacobian of v/||v|| is (I - y y^T) / ||v||.
                let g = grad_out.as_vector()?;
                let proj = numkit::dot(output, g);
                let gx: Vec<f64> = g
                    .iter()
                    .zip(output)
                    .map(|(gi, yi)| (gi - yi * proj) / norm)
                    .collect();
                Ok((Tensor::Vector(gx), LayerGrads(vec![])))
            }
            (Layer::ContinuousDropout { .. }, LayerCache::ContinuousDropout { noise }) => {
                let mut gx = grad_out.clone();
                for (g, xi) in gx.flat_mut().iter_mut().zip(noise) {
                    *g *= xi;
                }
                Ok((gx, LayerGrads(vec![])))
            }
            _ => Err(Error::StaleCache("cache does not match layer kind".into())),
        }
    }
}
