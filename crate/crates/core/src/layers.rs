//! Small building blocks over candle tensors, initialised from a [`ParamBuilder`].

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::GroupNorm;

use crate::params::{Init, ParamBuilder};
use crate::Result;

pub fn linear(pb: &mut ParamBuilder<'_>, in_dim: usize, out_dim: usize, bias: bool) -> Result<candle_nn::Linear> {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let w = pb.get("weight", (out_dim, in_dim), Init::Uniform(bound))?;
    let b = if bias {
        Some(pb.get("bias", out_dim, Init::Zeros)?)
    } else {
        None
    };
    Ok(candle_nn::Linear::new(w, b))
}

/// A linear layer starting at exactly zero output.
pub fn linear_zeros(pb: &mut ParamBuilder<'_>, in_dim: usize, out_dim: usize) -> Result<candle_nn::Linear> {
    let w = pb.get("weight", (out_dim, in_dim), Init::Zeros)?;
    let b = pb.get("bias", out_dim, Init::Zeros)?;
    Ok(candle_nn::Linear::new(w, Some(b)))
}

/// A convolution starting at exactly zero output.
pub fn conv2d_zeros(pb: &mut ParamBuilder<'_>, in_ch: usize, out_ch: usize, kernel: usize, padding: usize) -> Result<Conv2d> {
    Ok(Conv2d {
        weight: pb.get("weight", (out_ch, in_ch, kernel, kernel), Init::Zeros)?,
        bias: pb.get("bias", out_ch, Init::Zeros)?,
        stride: 1,
        padding,
    })
}

pub fn conv2d(
    pb: &mut ParamBuilder<'_>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Conv2d> {
    let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
    let weight = pb.get("weight", (out_ch, in_ch, kernel, kernel), Init::Uniform(bound))?;
    let bias = pb.get("bias", out_ch, Init::Zeros)?;
    Ok(Conv2d {
        weight,
        bias,
        stride,
        padding,
    })
}

/// Square-kernel convolution with bias, lowered to patch extraction and a
/// matmul so both passes run on the matmul kernels.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = conv2d_unfold(x, &self.weight, self.stride, self.padding)?;
        y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

/// Bias-free convolution of (N, C, H, W) with (O, C, k, k).
pub fn conv2d_unfold(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, ci, k, k2) = w.dims4()?;
    if ci != c || k != k2 || stride == 0 || h + 2 * padding < k || wd + 2 * padding < k {
        candle_core::bail!("conv2d: input {:?} kernel {:?} stride {stride} padding {padding}", x.dims(), w.dims());
    }
    let (s, p) = (stride, padding);
    let (oh, ow) = ((h + 2 * p - k) / s + 1, (wd + 2 * p - k) / s + 1);
    if k == 1 && s == 1 && p == 0 {
        let y = w.reshape((o, c))?.broadcast_matmul(&x.reshape((n, c, h * wd))?)?;
        return y.reshape((n, o, h, wd));
    }
    // Pad (or crop) so that each axis splits into blocks of `s`; tap `ky`
    // then sits at block offset ky / s, phase ky % s.
    let (hp, wp) = (s * (oh + (k - 1) / s), s * (ow + (k - 1) / s));
    let fit = |t: Tensor, dim: usize, len: usize, total: usize| -> candle_core::Result<Tensor> {
        let t = t.pad_with_zeros(dim, p, p)?;
        if total > len {
            t.pad_with_zeros(dim, 0, total - len)
        } else {
            t.narrow(dim, 0, total)
        }
    };
    let xp = fit(fit(x.clone(), 2, h + 2 * p, hp)?, 3, wd + 2 * p, wp)?;
    let xr = xp.reshape((n, c, hp / s, s, wp / s, s))?;
    let mut taps = Vec::with_capacity(k * k);
    for ky in 0..k {
        for kx in 0..k {
            let t = xr
                .narrow(2, ky / s, oh)?
                .narrow(3, ky % s, 1)?
                .narrow(4, kx / s, ow)?
                .narrow(5, kx % s, 1)?
                .reshape((n, c, 1, oh * ow))?;
            taps.push(t);
        }
    }
    let cols = Tensor::cat(&taps, 2)?.reshape((n, c * k * k, oh * ow))?;
    let y = w.reshape((o, c * k * k))?.broadcast_matmul(&cols)?;
    y.reshape((n, o, oh, ow))
}

pub fn group_norm(pb: &mut ParamBuilder<'_>, groups: usize, channels: usize) -> Result<GroupNorm> {
    let w = pb.get("weight", channels, Init::Ones)?;
    let b = pb.get("bias", channels, Init::Zeros)?;
    Ok(GroupNorm::new(w, b, channels, groups, 1e-5)?)
}

/// Layer norm over the last axis built from differentiable primitives.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.get("weight", dim, Init::Ones)?,
            bias: pb.get("bias", dim, Init::Zeros)?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

/// Scaled dot-product attention over (B, heads, N, dh) tensors.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let dh = q.dim(D::Minus1)?;
    let scores = (q.matmul(&k.t()?)? * (1.0 / (dh as f64).sqrt()))?;
    let weights = softmax_last_dim(&scores)?;
    Ok(weights.matmul(v)?)
}

struct Softmax;

impl candle_core::CustomOp1 for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage;
        macro_rules! rows {
            ($src:expr, $n:expr, $t:ty) => {{
                let mut out = $src.to_vec();
                for row in out.chunks_mut($n) {
                    let max = row.iter().fold(<$t>::NEG_INFINITY, |m, &v| m.max(v));
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
                out
            }};
        }
        let Some((start, end)) = layout.contiguous_offsets() else {
            candle_core::bail!("softmax input must be contiguous");
        };
        let n = *layout.dims().last().unwrap_or(&1);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(rows!(&v[start..end], n, f32)),
            CpuStorage::F64(v) => CpuStorage::F64(rows!(&v[start..end], n, f64)),
            _ => candle_core::bail!("softmax supports f32 and f64"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dot = (grad * res)?.sum_keepdim(D::Minus1)?;
        Ok(Some((grad.broadcast_sub(&dot)? * res)?))
    }
}

/// Softmax over the last axis with an analytic backward pass.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Softmax)?)
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Debug, Clone)]
pub struct Attention {
    pub to_q: candle_nn::Linear,
    pub to_k: candle_nn::Linear,
    pub to_v: candle_nn::Linear,
    pub to_out: candle_nn::Linear,
    heads: usize,
}

impl Attention {
    pub fn new(pb: &mut ParamBuilder<'_>, query_dim: usize, kv_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            to_q: linear(&mut pb.pp("to_q"), query_dim, query_dim, false)?,
            to_k: linear(&mut pb.pp("to_k"), kv_dim, query_dim, false)?,
            to_v: linear(&mut pb.pp("to_v"), kv_dim, query_dim, false)?,
            to_out: linear(&mut pb.pp("to_out"), query_dim, query_dim, true)?,
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    fn split(&self, t: &Tensor) -> Result<Tensor> {
        let (b, n, c) = t.dims3()?;
        Ok(t
            .reshape((b, n, self.heads, c / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Queries from `x` (B, Nq, C); keys and values from `kv` (B, Nk, Ckv).
    pub fn forward(&self, x: &Tensor, kv: &Tensor) -> Result<Tensor> {
        let (b, nq, c) = x.dims3()?;
        let q = self.split(&self.to_q.forward(x)?)?;
        let k = self.split(&self.to_k.forward(kv)?)?;
        let v = self.split(&self.to_v.forward(kv)?)?;
        let out = attend(&q, &k, &v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, nq, c))?;
        Ok(self.to_out.forward(&out)?)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    fc1: candle_nn::Linear,
    fc2: candle_nn::Linear,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, mult: usize) -> Result<Self> {
        Ok(Self {
            fc1: linear(&mut pb.pp("fc1"), dim, dim * mult, true)?,
            fc2: linear(&mut pb.pp("fc2"), dim * mult, dim, true)?,
        })
    }
}

impl Module for FeedForward {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Sinusoidal embedding of scalar positions: (N,) -> (N, dim).
pub fn sinusoidal_embedding(positions: &[f64], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            out.push((p * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            out.push((p * freq).cos());
        }
        if dim % 2 == 1 {
            out.push(0.0);
        }
    }
    Ok(Tensor::from_vec(out, (positions.len(), dim), device)?.to_dtype(dtype)?)
}

/// (F, C, H, W) -> (F, H*W, C)
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (f, c, h, w) = x.dims4()?;
    Ok(x.reshape((f, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// (F, H*W, C) -> (F, C, H, W)
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (f, _, c) = x.dims3()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((f, c, h, w))?)
}
