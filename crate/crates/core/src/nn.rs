//! Layers shared by the teacher and the diffusion backbone.
//!
//! Layers only hold [`ParamId`]s; the values live in a [`ParameterSet`] so
//! that the same architecture can be evaluated in `f32` or `f64`.

use gf_numerics::{Bound, Graph, ParamBuilder, ParamId, Real, Tensor, Var};
use rand::Rng;

use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(b: &mut ParamBuilder<'_, T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Self> {
        Self::with_std(b, name, fan_in, fan_out, (1.0 / fan_in as f64).sqrt(), rng)
    }

    /// Zero weights and bias.
    pub fn zeros<T: Real, R: Rng>(b: &mut ParamBuilder<'_, T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Self> {
        Self::with_std(b, name, fan_in, fan_out, 0.0, rng)
    }

    pub fn with_std<T: Real, R: Rng>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut s = b.scope(name);
        let weight = s.add("weight", Tensor::randn(&[fan_in, fan_out], std, rng))?;
        let bias = s.add("bias", Tensor::zeros(&[fan_out]))?;
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    /// `x[.., fan_in] → [.., fan_out]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        Ok(g.add(y, p[self.bias])?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(b: &mut ParamBuilder<'_, T>, name: &str, dim: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            gain: s.add("gain", Tensor::ones(&[dim]))?,
            bias: s.add("bias", Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.layer_norm(x, p[self.gain], p[self.bias], LN_EPS)?)
    }
}

/// `Linear → GELU → Linear`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real, R: Rng>(b: &mut ParamBuilder<'_, T>, name: &str, dims: [usize; 3], rng: &mut R) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            fc1: Linear::new(&mut s, "fc1", dims[0], dims[1], rng)?,
            fc2: Linear::new(&mut s, "fc2", dims[1], dims[2], rng)?,
        })
    }

    /// Second layer starts at zero.
    pub fn zero_out<T: Real, R: Rng>(b: &mut ParamBuilder<'_, T>, name: &str, dims: [usize; 3], rng: &mut R) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            fc1: Linear::new(&mut s, "fc1", dims[0], dims[1], rng)?,
            fc2: Linear::zeros(&mut s, "fc2", dims[1], dims[2], rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, p, h)
    }
}

/// Multi-head self-attention over `x[B, S, D]`.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new<T: Real, R: Rng>(b: &mut ParamBuilder<'_, T>, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(crate::Error::Config(format!("width {dim} is not divisible by {heads} heads")));
        }
        let mut s = b.scope(name);
        Ok(Self {
            q: Linear::new(&mut s, "q", dim, dim, rng)?,
            k: Linear::new(&mut s, "k", dim, dim, rng)?,
            v: Linear::new(&mut s, "v", dim, dim, rng)?,
            out: Linear::new(&mut s, "out", dim, dim, rng)?,
            heads,
            dim,
        })
    }

    fn split_heads<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let x = g.reshape(x, &[s[0], s[1], self.heads, self.dim / self.heads])?;
        Ok(g.permute(x, &[0, 2, 1, 3])?)
    }

    /// `mask` is an additive `[S, S]` constant (0 or a large negative).
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, mask: Option<Var>) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, x)?;
        let v = self.v.forward(g, p, x)?;
        let (q, k, v) = (self.split_heads(g, q)?, self.split_heads(g, k)?, self.split_heads(g, v)?);
        let scores = g.matmul_t(q, k)?;
        let mut scores = g.scale(scores, 1.0 / ((self.dim / self.heads) as f64).sqrt())?;
        if let Some(m) = mask {
            scores = g.add(scores, m)?;
        }
        let attn = g.softmax_lastdim(scores)?;
        let ctx = g.matmul(attn, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &s)?;
        self.out.forward(g, p, ctx)
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<T: Real, R: Rng>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            norm1: LayerNorm::new(&mut s, "norm1", dim)?,
            attn: Attention::new(&mut s, "attn", dim, heads, rng)?,
            norm2: LayerNorm::new(&mut s, "norm2", dim)?,
            mlp: Mlp::new(&mut s, "mlp", [dim, dim * mlp_ratio, dim], rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, mask: Option<Var>) -> Result<Var> {
        let h = self.norm1.forward(g, p, x)?;
        let h = self.attn.forward(g, p, h, mask)?;
        let x = g.add(x, h)?;
        let h = self.norm2.forward(g, p, x)?;
        let h = self.mlp.forward(g, p, h)?;
        Ok(g.add(x, h)?)
    }
}

/// `[N, H, W, C]` pixels to `[N, P, patch·patch·C]` tokens, row-major patches.
pub fn patchify<T: Real>(x: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || patch == 0 || s[1] % patch != 0 || s[2] % patch != 0 {
        return Err(crate::Error::invalid(format!("cannot patchify {s:?} with patch {patch}")));
    }
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / patch, w / patch);
    let tok = patch * patch * c;
    let src = x.data();
    let mut out = vec![T::ZERO; x.len()];
    for f in 0..n {
        for py in 0..gh {
            for px in 0..gw {
                let base = ((f * gh + py) * gw + px) * tok;
                for dy in 0..patch {
                    for dx in 0..patch {
                        let si = ((f * h + py * patch + dy) * w + px * patch + dx) * c;
                        let di = base + (dy * patch + dx) * c;
                        out[di..di + c].copy_from_slice(&src[si..si + c]);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[n, gh * gw, tok], out)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(tokens: &Tensor<T>, patch: usize, height: usize, width: usize, channels: usize) -> Result<Tensor<T>> {
    let s = tokens.shape();
    let (gh, gw) = (height / patch, width / patch);
    if s.len() != 3 || s[1] != gh * gw || s[2] != patch * patch * channels || height % patch != 0 || width % patch != 0 {
        return Err(crate::Error::invalid(format!("cannot unpatchify {s:?} to {height}x{width}x{channels}")));
    }
    let n = s[0];
    let tok = s[2];
    let src = tokens.data();
    let mut out = vec![T::ZERO; tokens.len()];
    for f in 0..n {
        for py in 0..gh {
            for px in 0..gw {
                let base = ((f * gh + py) * gw + px) * tok;
                for dy in 0..patch {
                    for dx in 0..patch {
                        let di = ((f * height + py * patch + dy) * width + px * patch + dx) * channels;
                        let si = base + (dy * patch + dx) * channels;
                        out[di..di + channels].copy_from_slice(&src[si..si + channels]);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[n, height, width, channels], out)?)
}

/// Additive mask letting token `i` see token `j` only if
/// `frame(j) <= frame(i)`; `tokens_per_frame` consecutive tokens per frame.
pub fn frame_causal_mask<T: Real>(frames: usize, tokens_per_frame: usize) -> Tensor<T> {
    let s = frames * tokens_per_frame;
    let mut m = vec![T::ZERO; s * s];
    for i in 0..s {
        for j in 0..s {
            if j / tokens_per_frame > i / tokens_per_frame {
                m[i * s + j] = T::of(-1e9);
            }
        }
    }
    Tensor::from_vec(&[s, s], m).expect("square mask")
}
