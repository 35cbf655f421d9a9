use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::{Ctx, Init, ParamId, ParamStore};
use crate::tensor::{ConvGeometry, Float, Rulebook, SparseConvKind, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Silu,
    Gelu,
    Identity,
}

impl Activation {
    pub fn apply<T: Float>(self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Silu => x.silu(),
            Activation::Gelu => x.gelu(),
            Activation::Identity => x.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let weight = ps.register(&format!("{name}.weight"), &[in_dim, out_dim], Init::Fan { fan_in: in_dim, gain: 1.0 });
        let bias = bias.then(|| ps.register(&format!("{name}.bias"), &[out_dim], Init::Zeros));
        Linear { weight, bias, in_dim, out_dim }
    }

    /// `[..., in] -> [..., out]`
    pub fn forward<T: Float>(&self, ctx: &Ctx<T>, x: &Tensor<T>) -> Tensor<T> {
        let s = x.shape().to_vec();
        let rows: usize = s[..s.len() - 1].iter().product();
        let y = x.reshape(&[rows, self.in_dim]).matmul(&ctx.param(self.weight));
        let y = match self.bias {
            Some(b) => y.add(&ctx.param(b)),
            None => y,
        };
        let mut os = s;
        *os.last_mut().unwrap() = self.out_dim;
        y.reshape(&os)
    }
}

/// Options for 2-D convolutions; `padding: None` means "same" for odd kernels.
#[derive(Clone, Copy, Debug)]
pub struct ConvOpts {
    pub stride: usize,
    pub padding: Option<usize>,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
    pub gain: f32,
}

impl Default for ConvOpts {
    fn default() -> Self {
        ConvOpts { stride: 1, padding: None, dilation: 1, groups: 1, bias: true, gain: 1.0 }
    }
}

impl ConvOpts {
    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn gain(mut self, g: f32) -> Self {
        self.gain = g;
        self
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Conv2d {
    pub fn new(ps: &mut ParamStore, name: &str, ci: usize, co: usize, k: usize, o: ConvOpts) -> Self {
        assert!(ci % o.groups == 0 && co % o.groups == 0, "{name}: channels not divisible by groups");
        let fan_in = ci / o.groups * k * k;
        let weight = ps.register(&format!("{name}.weight"), &[co, ci / o.groups, k, k], Init::Fan { fan_in, gain: o.gain });
        let bias = o.bias.then(|| ps.register(&format!("{name}.bias"), &[co], Init::Zeros));
        let padding = o.padding.unwrap_or(o.dilation * (k - 1) / 2);
        Conv2d { weight, bias, k, stride: o.stride, padding, dilation: o.dilation, groups: o.groups }
    }

    pub fn forward<T: Float>(&self, ctx: &Ctx<T>, x: &Tensor<T>) -> Tensor<T> {
        let b = self.bias.map(|b| ctx.param(b));
        x.conv2d(&ctx.param(self.weight), b.as_ref(), self.stride, self.padding, self.dilation, self.groups)
    }
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geo: ConvGeometry,
}

impl Conv3d {
    pub fn new(ps: &mut ParamStore, name: &str, ci: usize, co: usize, geo: ConvGeometry, bias: bool, gain: f32) -> Self {
        let g = geo.groups;
        assert!(ci % g == 0 && co % g == 0, "{name}: channels not divisible by groups");
        let [a, b, c] = geo.kernel;
        let weight = ps.register(&format!("{name}.weight"), &[co, ci / g, a, b, c], Init::Fan { fan_in: ci / g * a * b * c, gain });
        let bias = bias.then(|| ps.register(&format!("{name}.bias"), &[co], Init::Zeros));
        Conv3d { weight, bias, geo }
    }

    pub fn forward<T: Float>(&self, ctx: &Ctx<T>, x: &Tensor<T>) -> Tensor<T> {
        let b = self.bias.map(|b| ctx.param(b));
        x.conv3d(&ctx.param(self.weight), b.as_ref(), &self.geo)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geo: ConvGeometry,
    pub output_padding: [usize; 3],
}

impl ConvTranspose3d {
    pub fn new(ps: &mut ParamStore, name: &str, ci: usize, co: usize, geo: ConvGeometry, bias: bool, gain: f32) -> Self {
        let g = geo.groups;
        assert!(ci % g == 0 && co % g == 0, "{name}: channels not divisible by groups");
        let [a, b, c] = geo.kernel;
        // each output sees about (ci/g)·k / stride inputs
        let fan_in = (ci / g * a * b * c) / geo.stride.iter().product::<usize>().max(1);
        let weight = ps.register(&format!("{name}.weight"), &[ci, co / g, a, b, c], Init::Fan { fan_in, gain });
        let bias = bias.then(|| ps.register(&format!("{name}.bias"), &[co], Init::Zeros));
        ConvTranspose3d { weight, bias, geo, output_padding: [0; 3] }
    }

    pub fn forward<T: Float>(&self, ctx: &Ctx<T>, x: &Tensor<T>) -> Tensor<T> {
        let b = self.bias.map(|b| ctx.param(b));
        x.conv_transpose3d(&ctx.param(self.weight), b.as_ref(), &self.geo, self.output_padding)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub weight: ParamId,
    pub bias: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, groups: usize, c: usize) -> Self {
        Self::with_init(ps, name, groups, c, Init::Ones)
    }

    /// Group norm whose affine scale starts at zero, so a residual branch
    /// ending in it starts as the identity.
    pub fn zero_init(ps: &mut ParamStore, name: &str, groups: usize, c: usize) -> Self {
        Self::with_init(ps, name, groups, c, Init::Zeros)
    }

    fn with_init(ps: &mut ParamStore, name: &str, groups: usize, c: usize, init: Init) -> Self {
        let g = largest_divisor_at_most(c, groups);
        let weight = ps.register(&format!("{name}.weight"), &[c], init);
        let bias = ps.register(&format!("{name}.bias"), &[c], Init::Zeros);
        GroupNorm { weight, bias, groups: g, eps: 1e-5 }
    }

    pub fn forward<T: Float>(&self, ctx: &Ctx<T>, x: &Tensor<T>) -> Tensor<T> {
        x.group_norm(self.groups, &ctx.param(self.weight), &ctx.param(self.bias), self.eps)
    }
}

pub(crate) fn largest_divisor_at_most(c: usize, g: usize) -> usize {
    (1..=g.min(c)).rev().find(|d| c % d == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub weight: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize) -> Self {
        let weight = ps.register(&format!("{name}.weight"), &[c], Init::Ones);
        let bias = ps.register(&format!("{name}.bias"), &[c], Init::Zeros);
        LayerNorm { weight, bias, eps: 1e-5 }
    }

    pub fn forward<T: Float>(&self, ctx: &Ctx<T>, x: &Tensor<T>) -> Tensor<T> {
        x.layer_norm(&ctx.param(self.weight), &ctx.param(self.bias), self.eps)
    }
}

/// Sparse 3-D convolution layer; the rulebook is built per input.
#[derive(Clone, Debug)]
pub struct SparseConv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geo: ConvGeometry,
    pub kind: SparseConvKind,
    pub ci: usize,
    pub co: usize,
}

impl SparseConv3d {
    pub fn new(ps: &mut ParamStore, name: &str, ci: usize, co: usize, geo: ConvGeometry, kind: SparseConvKind, bias: bool) -> Self {
        let kv = geo.kernel_volume();
        let weight = ps.register(&format!("{name}.weight"), &[kv, ci, co], Init::Fan { fan_in: ci * kv, gain: 1.0 });
        let bias = bias.then(|| ps.register(&format!("{name}.bias"), &[co], Init::Zeros));
        SparseConv3d { weight, bias, geo, kind, ci, co }
    }

    pub fn forward<T: Float>(&self, ctx: &Ctx<T>, feats: &Tensor<T>, rb: &Rc<Rulebook>) -> Tensor<T> {
        let y = feats.sparse_conv(&ctx.param(self.weight), rb);
        match self.bias {
            Some(b) if rb.n_out() > 0 => y.add(&ctx.param(b)),
            _ => y,
        }
    }
}
