use serde::{Deserialize, Serialize};

use crate::encoders::FeaturePyramid;
use crate::nn::{Conv2d, ConvOpts, Ctx, GroupNorm, Init, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BifpnConfig {
    pub width: usize,
    pub layers: usize,
    pub norm_groups: usize,
    /// Adds a sixth level by stride-2 pooling of the fifth.
    pub extra_level: bool,
    pub fusion_eps: f64,
}

impl Default for BifpnConfig {
    fn default() -> Self {
        BifpnConfig { width: 96, layers: 3, norm_groups: 8, extra_level: true, fusion_eps: 1e-4 }
    }
}

impl BifpnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.norm_groups == 0 {
            return Err(Error::Config("bifpn width and norm groups must be positive".into()));
        }
        if self.fusion_eps <= 0.0 {
            return Err(Error::Config("bifpn fusion eps must be positive".into()));
        }
        Ok(())
    }
}

/// Fast normalized fusion coefficients `relu(w_i) / (eps + sum_j relu(w_j))`.
pub fn normalized_weights(w: &[f32], eps: f64) -> Vec<f32> {
    let r: Vec<f64> = w.iter().map(|&v| f64::from(v).max(0.0)).collect();
    let s = eps + r.iter().sum::<f64>();
    r.iter().map(|v| (v / s) as f32).collect()
}

#[derive(Clone, Debug)]
struct Node {
    weights: ParamId,
    depthwise: Conv2d,
    pointwise: Conv2d,
    norm: GroupNorm,
    eps: f64,
}

impl Node {
    fn new(ps: &mut ParamStore, name: &str, inputs: usize, c: usize, groups: usize, eps: f64) -> Self {
        Node {
            weights: ps.register(&format!("{name}.fusion"), &[inputs], Init::Ones),
            depthwise: Conv2d::new(ps, &format!("{name}.dw"), c, c, 3, ConvOpts::default().groups(c).no_bias()),
            pointwise: Conv2d::new(ps, &format!("{name}.pw"), c, c, 1, ConvOpts::default().no_bias()),
            norm: GroupNorm::new(ps, &format!("{name}.norm"), groups, c),
            eps,
        }
    }

    fn forward<T: Float>(&self, ctx: &Ctx<T>, inputs: &[Tensor<T>]) -> Tensor<T> {
        let w = ctx.param(self.weights).relu();
        let coeff = w.div(&w.sum_all().add_scalar(self.eps));
        let mut fused = inputs[0].mul(&coeff.narrow(0, 0, 1));
        for (i, x) in inputs.iter().enumerate().skip(1) {
            fused = fused.add(&x.mul(&coeff.narrow(0, i, 1)));
        }
        let h = self.depthwise.forward(ctx, &fused.silu());
        self.norm.forward(ctx, &self.pointwise.forward(ctx, &h))
    }
}

#[derive(Clone, Debug)]
struct Layer {
    top_down: Vec<Node>,
    bottom_up: Vec<Node>,
}

/// Repeated top-down then bottom-up weighted fusion across all levels.
#[derive(Clone, Debug)]
pub struct Bifpn {
    lateral: Vec<(Conv2d, GroupNorm)>,
    layers: Vec<Layer>,
    extra_level: bool,
    pub width: usize,
}

impl Bifpn {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &BifpnConfig, in_channels: &[usize]) -> Self {
        let c = cfg.width;
        let lateral = in_channels
            .iter()
            .enumerate()
            .map(|(i, &ci)| {
                (
                    Conv2d::new(ps, &format!("{name}.lateral{}", i + 1), ci, c, 1, ConvOpts::default().no_bias()),
                    GroupNorm::new(ps, &format!("{name}.lateral{}_norm", i + 1), cfg.norm_groups, c),
                )
            })
            .collect();
        let n = in_channels.len() + usize::from(cfg.extra_level);
        let layers = (0..cfg.layers)
            .map(|l| {
                let node = |ps: &mut ParamStore, tag: String, k| Node::new(ps, &format!("{name}.layer{l}.{tag}"), k, c, cfg.norm_groups, cfg.fusion_eps);
                let top_down = (0..n.saturating_sub(1)).map(|i| node(ps, format!("td{}", i + 1), 2)).collect();
                let bottom_up = (1..n).map(|i| node(ps, format!("bu{}", i + 1), if i + 1 < n { 3 } else { 2 })).collect();
                Layer { top_down, bottom_up }
            })
            .collect();
        Bifpn { lateral, layers, extra_level: cfg.extra_level, width: c }
    }

    pub fn n_levels(&self) -> usize {
        self.lateral.len() + usize::from(self.extra_level)
    }

    pub fn forward<T: Float>(&self, ctx: &Ctx<T>, pyr: &FeaturePyramid<T>) -> Result<FeaturePyramid<T>> {
        if pyr.levels.len() != self.lateral.len() {
            return Err(Error::Shape(format!("bifpn expects {} levels, got {}", self.lateral.len(), pyr.levels.len())));
        }
        let mut p: Vec<Tensor<T>> = pyr.levels.iter().zip(&self.lateral).map(|(x, (conv, norm))| norm.forward(ctx, &conv.forward(ctx, x))).collect();
        if self.extra_level {
            let last = p.last().expect("at least one level");
            if last.dim(2) % 2 != 0 || last.dim(3) % 2 != 0 {
                return Err(Error::Shape(format!("cannot pool a {:?} level", &last.shape()[2..])));
            }
            let p6 = last.avg_pool(2);
            p.push(p6);
        }
        for w in p.windows(2) {
            if w[0].dim(2) != 2 * w[1].dim(2) || w[0].dim(3) != 2 * w[1].dim(3) {
                return Err(Error::Shape("adjacent pyramid levels must differ by a factor of 2".into()));
            }
        }
        let n = p.len();
        for layer in &self.layers {
            if n < 2 {
                break;
            }
            let mut td = p.clone();
            for i in (0..n - 1).rev() {
                td[i] = layer.top_down[i].forward(ctx, &[p[i].clone(), td[i + 1].upsample_nearest(2)]);
            }
            let mut out = td.clone();
            for i in 1..n {
                let down = out[i - 1].avg_pool(2);
                let inputs = if i + 1 < n { vec![p[i].clone(), td[i].clone(), down] } else { vec![p[i].clone(), down] };
                out[i] = layer.bottom_up[i - 1].forward(ctx, &inputs);
            }
            p = out;
        }
        Ok(FeaturePyramid { levels: p })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::rand_vec;

    fn pyramid(b: usize, c: &[usize], top: usize) -> FeaturePyramid<f64> {
        FeaturePyramid {
            levels: c
                .iter()
                .enumerate()
                .map(|(i, &ch)| {
                    let s = top >> i;
                    Tensor::new(rand_vec(b * ch * s * s, i as u64), &[b, ch, s, s])
                })
                .collect(),
        }
    }

    #[test]
    fn fusion_weights() {
        let w = normalized_weights(&[1.0, 1.0], 1e-4);
        let d = 0.5 - w[0];
        assert!(d > 0.0 && d < 1e-4);
        assert_eq!(w[0], w[1]);
        let w = normalized_weights(&[-3.0, 2.0, 2.0], 1e-4);
        assert_eq!(w[0], 0.0);
        assert!(w.iter().all(|&v| v >= 0.0) && w.iter().sum::<f32>() < 1.0);
    }

    #[test]
    fn six_levels_at_configured_width() {
        let mut ps = ParamStore::new(1);
        let cfg = BifpnConfig { width: 8, layers: 2, norm_groups: 4, ..Default::default() };
        let b = Bifpn::new(&mut ps, "bifpn", &cfg, &[3, 4, 5, 6, 7]);
        let ctx: Ctx<f64> = Ctx::eval(&ps);
        let out = b.forward(&ctx, &pyramid(2, &[3, 4, 5, 6, 7], 32)).unwrap();
        assert_eq!(out.sizes(), vec![32, 16, 8, 4, 2, 1]);
        assert!(out.channels().iter().all(|&c| c == 8));
        assert!(out.all_finite());
        assert!(b.forward(&ctx, &pyramid(2, &[3, 4, 5, 6], 32)).is_err());
    }

    #[test]
    fn single_level_passes_through() {
        let mut ps = ParamStore::new(2);
        let cfg = BifpnConfig { width: 4, layers: 3, norm_groups: 2, extra_level: false, ..Default::default() };
        let b = Bifpn::new(&mut ps, "bifpn", &cfg, &[4]);
        let ctx: Ctx<f64> = Ctx::eval(&ps);
        let x = pyramid(1, &[4], 8);
        let out = b.forward(&ctx, &x).unwrap();
        let (conv, norm) = &b.lateral[0];
        let direct = norm.forward(&ctx, &conv.forward(&ctx, &x.levels[0]));
        assert_eq!(out.levels[0].data(), direct.data());
    }

    #[test]
    fn fusion_weights_receive_gradients() {
        let mut ps = ParamStore::new(3);
        let cfg = BifpnConfig { width: 4, layers: 1, norm_groups: 2, ..Default::default() };
        let b = Bifpn::new(&mut ps, "bifpn", &cfg, &[2, 2]);
        let ctx: Ctx<f64> = Ctx::train(&ps);
        let out = b.forward(&ctx, &pyramid(1, &[2, 2], 8)).unwrap();
        let loss = out.levels.iter().map(|l| l.sqr().mean_all()).reduce(|a, c| a.add(&c)).unwrap();
        let g = ctx.param_grads(&loss.backward());
        let id = ps.id("bifpn.layer0.td1.fusion").unwrap();
        assert!(g[id.index()].as_ref().unwrap().iter().any(|v| v.abs() > 0.0));
    }
}
