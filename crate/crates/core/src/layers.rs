//! Differentiable layer primitives with hand-written backward passes.
//!
//! Spatial layers take `[N, C, H, W]` batches; `Linear` takes `[N, F]`.
//! A forward call returns the output together with a [`Cache`] that holds
//! whatever the backward pass needs. Calling [`Layer::backward`] with that
//! cache returns the input gradient and accumulates parameter gradients
//! into the layer's [`LayerParams`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gemm::sgemm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        /// Edge-replicated padding on each side.
        padding: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    BatchNorm2d {
        channels: usize,
        momentum: f32,
        eps: f32,
    },
    Dropout {
        rate: f32,
    },
    BilinearUpsample {
        height: usize,
        width: usize,
    },
}

/// Trainable tensors of one layer. Parameterless layers hold empty tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weights: Tensor,
    pub bias: Tensor,
    pub grad_weights: Tensor,
    pub grad_bias: Tensor,
}

impl LayerParams {
    fn new(weights: Tensor, bias: Tensor) -> Self {
        let grad_weights = Tensor::zeros(weights.shape());
        let grad_bias = Tensor::zeros(bias.shape());
        LayerParams {
            weights,
            bias,
            grad_weights,
            grad_bias,
        }
    }

    fn empty() -> Self {
        Self::new(Tensor::zeros(&[0]), Tensor::zeros(&[0]))
    }

    pub fn zero_grad(&mut self) {
        self.grad_weights.fill(0.0);
        self.grad_bias.fill(0.0);
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// State saved by a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub enum Cache {
    Conv { input: Tensor },
    Linear { input: Tensor },
    Relu { active: Vec<bool> },
    BatchNorm { xhat: Vec<f32>, inv_std: Vec<f32>, batch_stats: bool, shape: Vec<usize> },
    Dropout { scale: Option<Vec<f32>> },
    Upsample { in_shape: Vec<usize> },
}

#[derive(Clone, Debug)]
pub struct Layer {
    kind: LayerKind,
    pub params: LayerParams,
    running: Option<RunningStats>,
    rng: ChaCha8Rng,
    fixed_mask: Option<Vec<f32>>,
}

fn he_std(fan_in: usize) -> f32 {
    (2.0 / fan_in as f32).sqrt()
}

impl Layer {
    fn with_params(kind: LayerKind, params: LayerParams) -> Self {
        Layer {
            kind,
            params,
            running: None,
            rng: ChaCha8Rng::seed_from_u64(0),
            fixed_mask: None,
        }
    }

    /// Square convolution with He-initialized weights and zero bias.
    pub fn conv2d<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = Tensor::randn(&[out_channels, in_channels, kernel, kernel], he_std(fan_in), rng);
        Self::with_params(
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding: kernel / 2,
            },
            LayerParams::new(w, Tensor::zeros(&[out_channels])),
        )
    }

    pub fn linear<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let w = Tensor::randn(&[out_features, in_features], he_std(in_features), rng);
        Self::with_params(
            LayerKind::Linear {
                in_features,
                out_features,
            },
            LayerParams::new(w, Tensor::zeros(&[out_features])),
        )
    }

    pub fn relu() -> Self {
        Self::with_params(LayerKind::Relu, LayerParams::empty())
    }

    pub fn batch_norm2d(channels: usize) -> Self {
        Self::with_params(
            LayerKind::BatchNorm2d {
                channels,
                momentum: 0.1,
                eps: 1e-5,
            },
            LayerParams::new(Tensor::full(&[channels], 1.0), Tensor::zeros(&[channels])),
        )
    }

    pub fn dropout(rate: f32, seed: u64) -> Self {
        let mut l = Self::with_params(LayerKind::Dropout { rate }, LayerParams::empty());
        l.rng = ChaCha8Rng::seed_from_u64(seed);
        l
    }

    pub fn bilinear_upsample(height: usize, width: usize) -> Self {
        Self::with_params(LayerKind::BilinearUpsample { height, width }, LayerParams::empty())
    }

    /// Rebuilds a layer from its topology and stored tensors.
    pub fn from_parts(kind: LayerKind, weights: Tensor, bias: Tensor, running: Option<RunningStats>) -> Result<Self> {
        let expected_w: Vec<usize> = match &kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![*out_channels, *in_channels, *kernel, *kernel],
            LayerKind::Linear {
                in_features,
                out_features,
            } => vec![*out_features, *in_features],
            LayerKind::BatchNorm2d { channels, .. } => vec![*channels],
            _ => vec![0],
        };
        if weights.shape() != expected_w.as_slice() {
            return Err(Error::dim(format!(
                "{kind:?} expects weights {expected_w:?}, got {:?}",
                weights.shape()
            )));
        }
        let mut l = Self::with_params(kind, LayerParams::new(weights, bias));
        l.running = running;
        Ok(l)
    }

    pub fn kind(&self) -> &LayerKind {
        &self.kind
    }

    pub fn running_stats(&self) -> Option<&RunningStats> {
        self.running.as_ref()
    }

    pub fn has_params(&self) -> bool {
        self.params.num_params() > 0
    }

    /// Reseeds the dropout mask generator.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Forces a dropout layer to use `mask` (0 or 1 per element) in train
    /// mode instead of sampling one.
    pub fn set_fixed_mask(&mut self, mask: Option<Vec<f32>>) {
        self.fixed_mask = mask;
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<(Tensor, Cache)> {
        match (&self.kind, mode) {
            (LayerKind::BatchNorm2d { .. }, Mode::Train) => self.batch_norm_train(input),
            (LayerKind::Dropout { rate }, Mode::Train) => {
                let rate = *rate;
                self.dropout_train(input, rate)
            }
            _ => self.forward_eval(input),
        }
    }

    /// Eval-mode forward; needs only shared access so a frozen layer can
    /// serve concurrent callers.
    pub fn forward_eval(&self, input: &Tensor) -> Result<(Tensor, Cache)> {
        match &self.kind {
            LayerKind::Conv2d { .. } => self.conv_forward(input),
            LayerKind::Linear { .. } => self.linear_forward(input),
            LayerKind::Relu => {
                let active: Vec<bool> = input.data().iter().map(|&v| v > 0.0).collect();
                let out = input.map(|v| v.max(0.0));
                Ok((out, Cache::Relu { active }))
            }
            LayerKind::BatchNorm2d { .. } => self.batch_norm_eval(input),
            LayerKind::Dropout { .. } => Ok((input.clone(), Cache::Dropout { scale: None })),
            LayerKind::BilinearUpsample { height, width } => {
                let out = bilinear_upsample(input, *height, *width)?;
                Ok((
                    out,
                    Cache::Upsample {
                        in_shape: input.shape().to_vec(),
                    },
                ))
            }
        }
    }

    pub fn backward(&mut self, cache: &Cache, grad_out: &Tensor) -> Result<Tensor> {
        match (&self.kind, cache) {
            (LayerKind::Conv2d { .. }, Cache::Conv { input }) => self.conv_backward(input, grad_out),
            (LayerKind::Linear { .. }, Cache::Linear { input }) => self.linear_backward(input, grad_out),
            (LayerKind::Relu, Cache::Relu { active }) => {
                check_len(grad_out, active.len())?;
                let mut g = grad_out.clone();
                g.data_mut()
                    .iter_mut()
                    .zip(active)
                    .for_each(|(v, &a)| {
                        if !a {
                            *v = 0.0
                        }
                    });
                Ok(g)
            }
            (
                LayerKind::BatchNorm2d { .. },
                Cache::BatchNorm {
                    xhat,
                    inv_std,
                    batch_stats,
                    shape,
                },
            ) => self.batch_norm_backward(xhat, inv_std, *batch_stats, shape, grad_out),
            (LayerKind::Dropout { .. }, Cache::Dropout { scale }) => match scale {
                None => Ok(grad_out.clone()),
                Some(s) => {
                    check_len(grad_out, s.len())?;
                    let mut g = grad_out.clone();
                    g.data_mut().iter_mut().zip(s).for_each(|(v, m)| *v *= m);
                    Ok(g)
                }
            },
            (LayerKind::BilinearUpsample { .. }, Cache::Upsample { in_shape }) => {
                bilinear_upsample_backward(grad_out, in_shape)
            }
            (kind, _) => Err(Error::dim(format!("cache does not belong to a {kind:?} layer"))),
        }
    }

    fn conv_geometry(&self, input: &Tensor) -> Result<ConvGeom> {
        let LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } = self.kind
        else {
            unreachable!()
        };
        if input.ndim() != 4 || input.dim(1) != in_channels {
            return Err(Error::dim(format!(
                "conv2d expects [N, {in_channels}, H, W], got {:?}",
                input.shape()
            )));
        }
        let (h, w) = (input.dim(2), input.dim(3));
        if h + 2 * padding < kernel || w + 2 * padding < kernel {
            return Err(Error::dim(format!("input {h}x{w} smaller than kernel {kernel}")));
        }
        Ok(ConvGeom {
            cin: in_channels,
            cout: out_channels,
            k: kernel,
            stride,
            pad: padding,
            h,
            w,
            ho: (h + 2 * padding - kernel) / stride + 1,
            wo: (w + 2 * padding - kernel) / stride + 1,
        })
    }

    fn conv_forward(&self, input: &Tensor) -> Result<(Tensor, Cache)> {
        let g = self.conv_geometry(input)?;
        let n = input.dim(0);
        let in_sz = g.cin * g.h * g.w;
        let out_sz = g.cout * g.ho * g.wo;
        let mut out = vec![0f32; n * out_sz];
        let weights = self.params.weights.data();
        let bias = self.params.bias.data();
        out.par_chunks_mut(out_sz)
            .zip(input.data().par_chunks(in_sz))
            .for_each(|(o, x)| {
                let cols = im2col(x, &g);
                let hw = g.ho * g.wo;
                for (c, b) in bias.iter().enumerate() {
                    o[c * hw..(c + 1) * hw].fill(*b);
                }
                sgemm(g.cout, g.cin * g.k * g.k, hw, 1.0, weights, false, &cols, false, 1.0, o);
            });
        let out = Tensor::new(vec![n, g.cout, g.ho, g.wo], out)?;
        Ok((
            out,
            Cache::Conv {
                input: input.clone(),
            },
        ))
    }

    fn conv_backward(&mut self, input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let g = self.conv_geometry(input)?;
        let n = input.dim(0);
        if grad_out.shape() != [n, g.cout, g.ho, g.wo] {
            return Err(Error::dim(format!(
                "conv2d grad {:?} does not match output [{n}, {}, {}, {}]",
                grad_out.shape(),
                g.cout,
                g.ho,
                g.wo
            )));
        }
        let in_sz = g.cin * g.h * g.w;
        let hw = g.ho * g.wo;
        let ckk = g.cin * g.k * g.k;
        let weights = self.params.weights.data();
        let per_image: Vec<(Vec<f32>, Vec<f32>, Vec<f32>)> = input
            .data()
            .par_chunks(in_sz)
            .zip(grad_out.data().par_chunks(g.cout * hw))
            .map(|(x, go)| {
                let cols = im2col(x, &g);
                let mut gw = vec![0f32; g.cout * ckk];
                sgemm(g.cout, hw, ckk, 1.0, go, false, &cols, true, 0.0, &mut gw);
                let gb: Vec<f32> = (0..g.cout)
                    .map(|c| go[c * hw..(c + 1) * hw].iter().map(|&v| v as f64).sum::<f64>() as f32)
                    .collect();
                let mut gcols = vec![0f32; ckk * hw];
                sgemm(ckk, g.cout, hw, 1.0, weights, true, go, false, 0.0, &mut gcols);
                (gw, gb, col2im(&gcols, &g))
            })
            .collect();
        let mut grad_in = Vec::with_capacity(n * in_sz);
        let gw_acc = self.params.grad_weights.data_mut();
        for (gw, _, gx) in &per_image {
            gw_acc.iter_mut().zip(gw).for_each(|(a, b)| *a += b);
            grad_in.extend_from_slice(gx);
        }
        let gb_acc = self.params.grad_bias.data_mut();
        for (_, gb, _) in &per_image {
            gb_acc.iter_mut().zip(gb).for_each(|(a, b)| *a += b);
        }
        Tensor::new(input.shape().to_vec(), grad_in)
    }

    fn linear_dims(&self, input: &Tensor) -> Result<(usize, usize, usize)> {
        let LayerKind::Linear {
            in_features,
            out_features,
        } = self.kind
        else {
            unreachable!()
        };
        if input.ndim() != 2 || input.dim(1) != in_features {
            return Err(Error::dim(format!(
                "linear expects [N, {in_features}], got {:?}",
                input.shape()
            )));
        }
        Ok((input.dim(0), in_features, out_features))
    }

    fn linear_forward(&self, input: &Tensor) -> Result<(Tensor, Cache)> {
        let (n, fin, fout) = self.linear_dims(input)?;
        let mut out = vec![0f32; n * fout];
        for row in out.chunks_mut(fout) {
            row.copy_from_slice(self.params.bias.data());
        }
        sgemm(n, fin, fout, 1.0, input.data(), false, self.params.weights.data(), true, 1.0, &mut out);
        Ok((
            Tensor::new(vec![n, fout], out)?,
            Cache::Linear {
                input: input.clone(),
            },
        ))
    }

    fn linear_backward(&mut self, input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let (n, fin, fout) = self.linear_dims(input)?;
        if grad_out.shape() != [n, fout] {
            return Err(Error::dim(format!(
                "linear grad {:?}, expected [{n}, {fout}]",
                grad_out.shape()
            )));
        }
        sgemm(
            fout,
            n,
            fin,
            1.0,
            grad_out.data(),
            true,
            input.data(),
            false,
            1.0,
            self.params.grad_weights.data_mut(),
        );
        let gb = self.params.grad_bias.data_mut();
        for j in 0..fout {
            let s: f64 = (0..n).map(|i| grad_out.data()[i * fout + j] as f64).sum();
            gb[j] += s as f32;
        }
        let mut gx = vec![0f32; n * fin];
        sgemm(n, fout, fin, 1.0, grad_out.data(), false, self.params.weights.data(), false, 0.0, &mut gx);
        Tensor::new(vec![n, fin], gx)
    }

    fn bn_dims(&self, input: &Tensor) -> Result<(usize, usize, usize, f32, f32)> {
        let LayerKind::BatchNorm2d {
            channels,
            momentum,
            eps,
        } = self.kind
        else {
            unreachable!()
        };
        if input.ndim() != 4 || input.dim(1) != channels {
            return Err(Error::dim(format!(
                "batch_norm2d expects [N, {channels}, H, W], got {:?}",
                input.shape()
            )));
        }
        Ok((input.dim(0), channels, input.dim(2) * input.dim(3), momentum, eps))
    }

    fn batch_norm_train(&mut self, input: &Tensor) -> Result<(Tensor, Cache)> {
        let (n, c, hw, momentum, eps) = self.bn_dims(input)?;
        let count = (n * hw) as f64;
        let x = input.data();
        let mut mean = vec![0f64; c];
        let mut var = vec![0f64; c];
        for ch in 0..c {
            let mut s = 0f64;
            for b in 0..n {
                let off = (b * c + ch) * hw;
                s += x[off..off + hw].iter().map(|&v| v as f64).sum::<f64>();
            }
            let m = s / count;
            let mut v = 0f64;
            for b in 0..n {
                let off = (b * c + ch) * hw;
                v += x[off..off + hw].iter().map(|&t| (t as f64 - m).powi(2)).sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = v / count;
        }
        let inv_std: Vec<f32> = var.iter().map(|&v| (1.0 / (v + eps as f64).sqrt()) as f32).collect();
        let running = self.running.get_or_insert_with(|| RunningStats {
            mean: vec![0.0; c],
            var: vec![1.0; c],
        });
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for ch in 0..c {
            running.mean[ch] = ((1.0 - momentum as f64) * running.mean[ch] as f64 + momentum as f64 * mean[ch]) as f32;
            running.var[ch] =
                ((1.0 - momentum as f64) * running.var[ch] as f64 + momentum as f64 * var[ch] * unbias) as f32;
        }
        let mean32: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
        let (out, xhat) = self.bn_apply(input, &mean32, &inv_std, n, c, hw);
        Ok((
            out,
            Cache::BatchNorm {
                xhat,
                inv_std,
                batch_stats: true,
                shape: input.shape().to_vec(),
            },
        ))
    }

    fn batch_norm_eval(&self, input: &Tensor) -> Result<(Tensor, Cache)> {
        let (n, c, hw, _, eps) = self.bn_dims(input)?;
        let running = self.running.as_ref().ok_or(Error::UninitializedStatistics)?;
        let inv_std: Vec<f32> = running
            .var
            .iter()
            .map(|&v| (1.0 / (v as f64 + eps as f64).sqrt()) as f32)
            .collect();
        let (out, xhat) = self.bn_apply(input, &running.mean, &inv_std, n, c, hw);
        Ok((
            out,
            Cache::BatchNorm {
                xhat,
                inv_std,
                batch_stats: false,
                shape: input.shape().to_vec(),
            },
        ))
    }

    fn bn_apply(&self, input: &Tensor, mean: &[f32], inv_std: &[f32], n: usize, c: usize, hw: usize) -> (Tensor, Vec<f32>) {
        let gamma = self.params.weights.data();
        let beta = self.params.bias.data();
        let x = input.data();
        let mut xhat = vec![0f32; x.len()];
        let mut out = vec![0f32; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gamma[ch] * xh + beta[ch];
                }
            }
        }
        (Tensor::new(input.shape().to_vec(), out).expect("same shape"), xhat)
    }

    fn batch_norm_backward(
        &mut self,
        xhat: &[f32],
        inv_std: &[f32],
        batch_stats: bool,
        shape: &[usize],
        grad_out: &Tensor,
    ) -> Result<Tensor> {
        if grad_out.shape() != shape {
            return Err(Error::dim(format!(
                "batch_norm grad {:?}, expected {shape:?}",
                grad_out.shape()
            )));
        }
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let count = (n * hw) as f64;
        let dy = grad_out.data();
        let gamma = self.params.weights.data().to_vec();
        let mut dx = vec![0f32; dy.len()];
        for ch in 0..c {
            let mut sum_dy = 0f64;
            let mut sum_dy_xhat = 0f64;
            for b in 0..n {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    sum_dy += dy[i] as f64;
                    sum_dy_xhat += dy[i] as f64 * xhat[i] as f64;
                }
            }
            self.params.grad_weights.data_mut()[ch] += sum_dy_xhat as f32;
            self.params.grad_bias.data_mut()[ch] += sum_dy as f32;
            let g = gamma[ch] as f64 * inv_std[ch] as f64;
            for b in 0..n {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    dx[i] = if batch_stats {
                        (g * (dy[i] as f64 - sum_dy / count - xhat[i] as f64 * sum_dy_xhat / count)) as f32
                    } else {
                        (g * dy[i] as f64) as f32
                    };
                }
            }
        }
        Tensor::new(shape.to_vec(), dx)
    }

    fn dropout_train(&mut self, input: &Tensor, rate: f32) -> Result<(Tensor, Cache)> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let keep = 1.0 - rate;
        let scale: Vec<f32> = match &self.fixed_mask {
            Some(m) => {
                check_len(input, m.len())?;
                m.iter().map(|&v| v / keep).collect()
            }
            None => (0..input.len())
                .map(|_| if self.rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
                .collect(),
        };
        let mut out = input.clone();
        out.data_mut().iter_mut().zip(&scale).for_each(|(v, s)| *v *= s);
        Ok((out, Cache::Dropout { scale: Some(scale) }))
    }
}

fn check_len(t: &Tensor, n: usize) -> Result<()> {
    if t.len() != n {
        return Err(Error::dim(format!("expected {n} elements, got {:?}", t.shape())));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

/// Input row or column read by output position `o` and tap `t`; taps that
/// fall into the padding repeat the nearest edge pixel.
fn tap(o: usize, t: usize, stride: usize, pad: usize, n: usize) -> usize {
    ((o * stride + t) as isize - pad as isize).clamp(0, n as isize - 1) as usize
}

/// Unfolds one `[Cin, H, W]` image into `[Cin*k*k, Ho*Wo]` patches with
/// edge-replicated padding.
fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let hw = g.ho * g.wo;
    let mut cols = vec![0f32; g.cin * g.k * g.k * hw];
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * hw;
                let xs: Vec<usize> = (0..g.wo).map(|ox| tap(ox, kx, g.stride, g.pad, g.w)).collect();
                for oy in 0..g.ho {
                    let iy = tap(oy, ky, g.stride, g.pad, g.h);
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    for (d, &ix) in dst.iter_mut().zip(&xs) {
                        *d = src[ix];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im(cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let hw = g.ho * g.wo;
    let mut x = vec![0f32; g.cin * g.h * g.w];
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * hw;
                let xs: Vec<usize> = (0..g.wo).map(|ox| tap(ox, kx, g.stride, g.pad, g.w)).collect();
                for oy in 0..g.ho {
                    let iy = tap(oy, ky, g.stride, g.pad, g.h);
                    let src = &cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for (s, &ix) in src.iter().zip(&xs) {
                        dst[ix] += s;
                    }
                }
            }
        }
    }
    x
}

/// Source coordinate and blend weight for corner-aligned resampling of
/// `out` positions onto `inp` positions.
fn align_corners_taps(out: usize, inp: usize) -> Vec<(usize, usize, f32)> {
    (0..out)
        .map(|o| {
            let src = if out > 1 {
                o as f64 * (inp - 1) as f64 / (out - 1) as f64
            } else {
                0.0
            };
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

/// Corner-aligned bilinear resize of the trailing two axes of a
/// `[..., h, w]` tensor to `[..., height, width]`.
pub fn bilinear_upsample(input: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    if input.ndim() < 2 || height == 0 || width == 0 {
        return Err(Error::dim(format!(
            "bilinear upsample of {:?} to {height}x{width}",
            input.shape()
        )));
    }
    let nd = input.ndim();
    let (h, w) = (input.dim(nd - 2), input.dim(nd - 1));
    let planes = input.len() / (h * w);
    let ty = align_corners_taps(height, h);
    let tx = align_corners_taps(width, w);
    let mut out = vec![0f32; planes * height * width];
    for p in 0..planes {
        let src = &input.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * height * width..(p + 1) * height * width];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
                let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
                dst[oy * width + ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    let mut shape = input.shape().to_vec();
    shape[nd - 2] = height;
    shape[nd - 1] = width;
    Tensor::new(shape, out)
}

fn bilinear_upsample_backward(grad_out: &Tensor, in_shape: &[usize]) -> Result<Tensor> {
    let nd = in_shape.len();
    let (h, w) = (in_shape[nd - 2], in_shape[nd - 1]);
    let (height, width) = (grad_out.dim(nd - 2), grad_out.dim(nd - 1));
    let planes: usize = in_shape[..nd - 2].iter().product();
    if grad_out.len() != planes * height * width {
        return Err(Error::dim(format!(
            "upsample grad {:?} incompatible with input {in_shape:?}",
            grad_out.shape()
        )));
    }
    let ty = align_corners_taps(height, h);
    let tx = align_corners_taps(width, w);
    let mut gx = vec![0f32; planes * h * w];
    for p in 0..planes {
        let src = &grad_out.data()[p * height * width..(p + 1) * height * width];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let g = src[oy * width + ox];
                dst[y0 * w + x0] += g * (1.0 - wy) * (1.0 - wx);
                dst[y0 * w + x1] += g * (1.0 - wy) * wx;
                dst[y1 * w + x0] += g * wy * (1.0 - wx);
                dst[y1 * w + x1] += g * wy * wx;
            }
        }
    }
    Tensor::new(in_shape.to_vec(), gx)
}

/// Hash of the ReLU on/off patterns recorded in `caches`. Two forward
/// passes with equal signatures ran through the same linear pieces.
pub fn activation_signature(caches: &[Cache]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for c in caches {
        if let Cache::Relu { active } = c {
            for &a in active {
                h = (h ^ a as u64).wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

/// An ordered stack of layers.
#[derive(Clone, Debug, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<(Tensor, Vec<Cache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &mut self.layers {
            let (y, c) = layer.forward(&x, mode)?;
            caches.push(c);
            x = y;
        }
        Ok((x, caches))
    }

    /// Eval-mode forward without caches.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.forward_eval(&x)?.0;
        }
        Ok(x)
    }

    pub fn backward(&mut self, caches: &[Cache], grad_out: &Tensor) -> Result<Tensor> {
        if caches.len() != self.layers.len() {
            return Err(Error::dim(format!(
                "{} caches for {} layers",
                caches.len(),
                self.layers.len()
            )));
        }
        let mut g = grad_out.clone();
        for (layer, cache) in self.layers.iter_mut().zip(caches).rev() {
            g = layer.backward(cache, &g)?;
        }
        Ok(g)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut LayerParams> {
        self.layers.iter_mut().filter(|l| l.has_params()).map(|l| &mut l.params)
    }

    pub fn params(&self) -> impl Iterator<Item = &LayerParams> {
        self.layers.iter().filter(|l| l.has_params()).map(|l| &l.params)
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(LayerParams::zero_grad);
    }
}
