use serde::{Deserialize, Serialize};

use super::FeaturePyramid;
use crate::nn::{Conv2d, ConvOpts, Ctx, GroupNorm, ParamStore};
use crate::tensor::{Float, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnConfig {
    /// Width of each of the five stages.
    pub widths: [usize; 5],
    /// Residual blocks per stage after the strided entry conv.
    pub depths: [usize; 5],
    pub norm_groups: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig { widths: [32, 48, 64, 96, 128], depths: [1, 1, 2, 2, 1], norm_groups: 8 }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w == 0) || self.norm_groups == 0 {
            return Err(Error::Config("cnn widths and norm groups must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvNorm {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvNorm {
    fn forward<T: Float>(&self, ctx: &Ctx<T>, x: &Tensor<T>) -> Tensor<T> {
        self.norm.forward(ctx, &self.conv.forward(ctx, x))
    }
}

/// conv-norm-act-conv-norm with an identity skip; the last norm starts at
/// zero so the block is the identity (up to the final activation) at init.
#[derive(Clone, Debug)]
struct ResidualBlock {
    a: ConvNorm,
    b: ConvNorm,
}

impl ResidualBlock {
    fn new(ps: &mut ParamStore, name: &str, c: usize, groups: usize) -> Self {
        let opts = ConvOpts::default().no_bias();
        ResidualBlock {
            a: ConvNorm {
                conv: Conv2d::new(ps, &format!("{name}.conv1"), c, c, 3, opts),
                norm: GroupNorm::new(ps, &format!("{name}.norm1"), groups, c),
            },
            b: ConvNorm {
                conv: Conv2d::new(ps, &format!("{name}.conv2"), c, c, 3, opts),
                norm: GroupNorm::zero_init(ps, &format!("{name}.norm2"), groups, c),
            },
        }
    }

    fn forward<T: Float>(&self, ctx: &Ctx<T>, x: &Tensor<T>) -> Tensor<T> {
        let h = self.a.forward(ctx, x).silu();
        self.b.forward(ctx, &h).add(x).silu()
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: ConvNorm,
    blocks: Vec<ResidualBlock>,
}

/// Residual convolutional encoder over the dense 2-D raster, one stride-2
/// stage per pyramid level.
#[derive(Clone, Debug)]
pub struct CnnEncoder {
    stages: Vec<Stage>,
    widths: [usize; 5],
}

impl CnnEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &CnnConfig, in_channels: usize) -> Self {
        let mut prev = in_channels;
        let stages = (0..5)
            .map(|i| {
                let w = cfg.widths[i];
                let n = format!("{name}.stage{}", i + 1);
                let down = ConvNorm {
                    conv: Conv2d::new(ps, &format!("{n}.down"), prev, w, 3, ConvOpts::default().stride(2).no_bias()),
                    norm: GroupNorm::new(ps, &format!("{n}.down_norm"), cfg.norm_groups, w),
                };
                let blocks = (0..cfg.depths[i])
                    .map(|j| ResidualBlock::new(ps, &format!("{n}.block{j}"), w, cfg.norm_groups))
                    .collect();
                prev = w;
                Stage { down, blocks }
            })
            .collect();
        CnnEncoder { stages, widths: cfg.widths }
    }

    pub fn out_channels(&self) -> Vec<usize> {
        self.widths.to_vec()
    }

    pub fn forward<T: Float>(&self, ctx: &Ctx<T>, x: &Tensor<T>) -> FeaturePyramid<T> {
        let mut h = x.clone();
        let mut levels = Vec::with_capacity(5);
        for s in &self.stages {
            h = s.down.forward(ctx, &h).silu();
            for b in &s.blocks {
                h = b.forward(ctx, &h);
            }
            levels.push(h.clone());
        }
        FeaturePyramid { levels }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CnnConfig {
        CnnConfig { widths: [4, 4, 8, 8, 8], depths: [1, 0, 1, 0, 1], norm_groups: 2 }
    }

    #[test]
    fn pyramid_contract() {
        let mut ps = ParamStore::new(3);
        let enc = CnnEncoder::new(&mut ps, "cnn", &small(), 5);
        let ctx: Ctx<f32> = Ctx::eval(&ps);
        let x = Tensor::from_f32(&vec![0.5; 2 * 5 * 64 * 64], &[2, 5, 64, 64]);
        let p = enc.forward(&ctx, &x);
        assert_eq!(p.sizes(), vec![32, 16, 8, 4, 2]);
        assert_eq!(p.channels(), vec![4, 4, 8, 8, 8]);
        assert!(p.check_contract(64).is_ok());
    }

    #[test]
    fn zero_input_is_finite() {
        let mut ps = ParamStore::new(4);
        let enc = CnnEncoder::new(&mut ps, "cnn", &small(), 3);
        let ctx: Ctx<f32> = Ctx::eval(&ps);
        let p = enc.forward(&ctx, &Tensor::zeros(&[1, 3, 32, 32]));
        assert!(p.all_finite());
    }

    #[test]
    fn zero_init_block_is_identity_before_activation() {
        let mut ps = ParamStore::new(5);
        let b = ResidualBlock::new(&mut ps, "b", 4, 2);
        let ctx: Ctx<f64> = Ctx::eval(&ps);
        let x = Tensor::<f64>::new(crate::tensor::testutil::rand_vec(4 * 16, 2), &[1, 4, 4, 4]);
        let y = b.forward(&ctx, &x);
        for (a, b) in x.silu().data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
