use serde::{Deserialize, Serialize};

use super::FeaturePyramid;
use crate::nn::{Conv2d, ConvOpts, Ctx, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    /// Token width at each of the five levels (patch embedding first).
    pub widths: [usize; 5],
    /// Attention blocks per stage, stages 2..5.
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub window: usize,
    pub patch: usize,
    pub mlp_ratio: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            widths: [32, 48, 64, 96, 128],
            depths: [2, 2, 2, 2],
            heads: [2, 2, 4, 4],
            window: 16,
            patch: 2,
            mlp_ratio: 2,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self, input_size: usize) -> Result<()> {
        if self.patch != 2 {
            return Err(Error::Config(format!("patch size must be 2, got {}", self.patch)));
        }
        if self.window == 0 || input_size % (self.patch << 4) != 0 {
            return Err(Error::Config(format!("input {input_size} not divisible by {}", self.patch << 4)));
        }
        for s in 0..4 {
            let size = input_size >> (s + 2);
            if self.window > size {
                return Err(Error::Config(format!("window {} larger than the {size}x{size} map of stage {}", self.window, s + 2)));
            }
            if self.heads[s] == 0 || self.widths[s + 1] % self.heads[s] != 0 {
                return Err(Error::Config(format!("width {} not divisible by {} heads", self.widths[s + 1], self.heads[s])));
            }
        }
        Ok(())
    }
}

/// Multi-head self-attention inside square windows with a learned relative
/// position bias.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    pub rel_bias: ParamId,
    rel_index: Vec<usize>,
    heads: usize,
    dim: usize,
    window: usize,
}

impl WindowAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, window: usize) -> Self {
        let span = 2 * window - 1;
        let rel_bias = ps.register(&format!("{name}.rel_bias"), &[span * span, heads], Init::Normal(0.02));
        let n = window * window;
        let mut rel_index = Vec::with_capacity(n * n);
        for a in 0..n {
            for b in 0..n {
                let di = (a / window) as isize - (b / window) as isize + window as isize - 1;
                let dj = (a % window) as isize - (b % window) as isize + window as isize - 1;
                rel_index.push(di as usize * span + dj as usize);
            }
        }
        WindowAttention {
            qkv: Linear::new(ps, &format!("{name}.qkv"), dim, 3 * dim, true),
            proj: Linear::new(ps, &format!("{name}.proj"), dim, dim, true),
            rel_bias,
            rel_index,
            heads,
            dim,
            window,
        }
    }

    /// `x`: `[B·nW, N, C]` window tokens; `mask`: `[nW, N, N]` additive.
    pub fn forward<T: Float>(&self, ctx: &Ctx<T>, x: &Tensor<T>, mask: Option<&Tensor<T>>) -> Tensor<T> {
        let (bn, n, c) = (x.dim(0), x.dim(1), x.dim(2));
        assert_eq!(c, self.dim);
        assert_eq!(n, self.window * self.window, "token count must fill the window");
        let (h, d) = (self.heads, c / self.heads);
        let qkv = self.qkv.forward(ctx, x).reshape(&[bn, n, 3, h, d]).permute(&[2, 0, 3, 1, 4]);
        let part = |i: usize| qkv.narrow(0, i, 1).reshape(&[bn * h, n, d]);
        let (q, k, v) = (part(0), part(1), part(2));
        let attn = q.mul_scalar(1.0 / (d as f64).sqrt()).matmul(&k.transpose(1, 2));
        let bias = ctx.param(self.rel_bias).index_select0(&self.rel_index).reshape(&[n, n, h]).permute(&[2, 0, 1]);
        let mut attn = attn.reshape(&[bn, h, n, n]).add(&bias.unsqueeze(0));
        if let Some(m) = mask {
            let nw = m.dim(0);
            attn = attn.reshape(&[bn / nw, nw, h, n, n]).add(&m.reshape(&[1, nw, 1, n, n]));
        }
        let out = attn.reshape(&[bn * h, n, n]).softmax_last().matmul(&v);
        let out = out.reshape(&[bn, h, n, d]).permute(&[0, 2, 1, 3]).reshape(&[bn, n, c]);
        self.proj.forward(ctx, &out)
    }
}

#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    window: usize,
    shifted: bool,
}

fn pad_to<T: Float>(x: &Tensor<T>, axis: usize, len: usize) -> Tensor<T> {
    let n = x.dim(axis);
    if n == len {
        return x.clone();
    }
    let mut s = x.shape().to_vec();
    s[axis] = len - n;
    Tensor::cat(&[x.clone(), Tensor::zeros(&s)], axis)
}

fn partition<T: Float>(x: &Tensor<T>, w: usize) -> Tensor<T> {
    let (b, h, wd, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    x.reshape(&[b, h / w, w, wd / w, w, c]).permute(&[0, 1, 3, 2, 4, 5]).reshape(&[b * (h / w) * (wd / w), w * w, c])
}

fn unpartition<T: Float>(x: &Tensor<T>, w: usize, b: usize, h: usize, wd: usize) -> Tensor<T> {
    let c = x.dim(2);
    x.reshape(&[b, h / w, wd / w, w, w, c]).permute(&[0, 1, 3, 2, 4, 5]).reshape(&[b, h, wd, c])
}

/// Additive mask that stops attention across the seams a cyclic shift
/// introduces.
fn shift_mask<T: Float>(h: usize, wd: usize, w: usize, s: usize) -> Tensor<T> {
    let region = |i: usize, n: usize| if i < n - w { 0 } else if i < n - s { 1 } else { 2 };
    let (nh, nw) = (h / w, wd / w);
    let n = w * w;
    let mut m = vec![T::zero(); nh * nw * n * n];
    let label = |wi: usize, wj: usize, t: usize| region(wi * w + t / w, h) * 3 + region(wj * w + t % w, wd);
    for wi in 0..nh {
        for wj in 0..nw {
            let base = (wi * nw + wj) * n * n;
            for a in 0..n {
                for b in 0..n {
                    if label(wi, wj, a) != label(wi, wj, b) {
                        m[base + a * n + b] = T::cast(-100.0);
                    }
                }
            }
        }
    }
    Tensor::new(m, &[nh * nw, n, n])
}

impl Block {
    fn forward<T: Float>(&self, ctx: &Ctx<T>, x: &Tensor<T>) -> Tensor<T> {
        let (b, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
        let w = self.window;
        let (hp, wp) = (h.div_ceil(w) * w, wd.div_ceil(w) * w);
        let mut y = pad_to(&pad_to(&self.norm1.forward(ctx, x), 1, hp), 2, wp);
        let shift = if self.shifted && hp > w && wp > w { w / 2 } else { 0 };
        let mask = (shift > 0).then(|| shift_mask::<T>(hp, wp, w, shift));
        if shift > 0 {
            y = y.roll(1, -(shift as isize)).roll(2, -(shift as isize));
        }
        let att = self.attn.forward(ctx, &partition(&y, w), mask.as_ref());
        let mut y = unpartition(&att, w, b, hp, wp);
        if shift > 0 {
            y = y.roll(1, shift as isize).roll(2, shift as isize);
        }
        if hp != h || wp != wd {
            y = y.narrow(1, 0, h).narrow(2, 0, wd);
        }
        let x = x.add(&y);
        let m = self.fc2.forward(ctx, &self.fc1.forward(ctx, &self.norm2.forward(ctx, &x)).gelu());
        x.add(&m)
    }
}

#[derive(Clone, Debug)]
struct Merge {
    norm: LayerNorm,
    reduce: Linear,
}

impl Merge {
    fn forward<T: Float>(&self, ctx: &Ctx<T>, x: &Tensor<T>) -> Tensor<T> {
        let (b, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let m = x.reshape(&[b, h / 2, 2, w / 2, 2, c]).permute(&[0, 1, 3, 2, 4, 5]).reshape(&[b, h / 2, w / 2, 4 * c]);
        self.reduce.forward(ctx, &self.norm.forward(ctx, &m))
    }
}

/// Shifted-window attention encoder: a stride-2 patch embedding gives the
/// first level, then four merge-and-attend stages give the rest.
#[derive(Clone, Debug)]
pub struct AttentionEncoder {
    embed: Conv2d,
    embed_norm: LayerNorm,
    stages: Vec<(Merge, Vec<Block>)>,
    widths: [usize; 5],
}

impl AttentionEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &AttentionConfig, in_channels: usize) -> Self {
        let mut opts = ConvOpts::default().stride(cfg.patch);
        opts.padding = Some(0);
        let embed = Conv2d::new(ps, &format!("{name}.embed"), in_channels, cfg.widths[0], cfg.patch, opts);
        let embed_norm = LayerNorm::new(ps, &format!("{name}.embed_norm"), cfg.widths[0]);
        let stages = (0..4)
            .map(|s| {
                let (ci, co) = (cfg.widths[s], cfg.widths[s + 1]);
                let n = format!("{name}.stage{}", s + 2);
                let merge = Merge {
                    norm: LayerNorm::new(ps, &format!("{n}.merge_norm"), 4 * ci),
                    reduce: Linear::new(ps, &format!("{n}.merge"), 4 * ci, co, false),
                };
                let blocks = (0..cfg.depths[s])
                    .map(|j| {
                        let bn = format!("{n}.block{j}");
                        Block {
                            norm1: LayerNorm::new(ps, &format!("{bn}.norm1"), co),
                            attn: WindowAttention::new(ps, &format!("{bn}.attn"), co, cfg.heads[s], cfg.window),
                            norm2: LayerNorm::new(ps, &format!("{bn}.norm2"), co),
                            fc1: Linear::new(ps, &format!("{bn}.fc1"), co, cfg.mlp_ratio * co, true),
                            fc2: Linear::new(ps, &format!("{bn}.fc2"), cfg.mlp_ratio * co, co, true),
                            window: cfg.window,
                            shifted: j % 2 == 1,
                        }
                    })
                    .collect();
                (merge, blocks)
            })
            .collect();
        AttentionEncoder { embed, embed_norm, stages, widths: cfg.widths }
    }

    pub fn out_channels(&self) -> Vec<usize> {
        self.widths.to_vec()
    }

    pub fn forward<T: Float>(&self, ctx: &Ctx<T>, x: &Tensor<T>) -> FeaturePyramid<T> {
        let e = self.embed.forward(ctx, x).permute(&[0, 2, 3, 1]);
        let mut h = self.embed_norm.forward(ctx, &e);
        let mut levels = vec![h.permute(&[0, 3, 1, 2])];
        for (merge, blocks) in &self.stages {
            h = merge.forward(ctx, &h);
            for b in blocks {
                h = b.forward(ctx, &h);
            }
            levels.push(h.permute(&[0, 3, 1, 2]));
        }
        FeaturePyramid { levels }
    }
}
