//! Multi-scale encoders producing `C1..C5` and their per-scale fusion.

mod attention;
mod cnn;
mod st3d;

use serde::{Deserialize, Serialize};

use crate::nn::{Conv2d, ConvOpts, Ctx, ParamStore};
use crate::raster::SparseRaster;
use crate::tensor::{Float, Tensor};
use crate::{Error, Result};

pub use attention::{AttentionConfig, AttentionEncoder, WindowAttention};
pub use cnn::{CnnConfig, CnnEncoder};
pub use st3d::{St3dConfig, St3dEncoder};

/// Feature maps `[B, C, H/2^i, W/2^i]`; `levels[0]` is scale 1.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T: Float = f32> {
    pub levels: Vec<Tensor<T>>,
}

impl<T: Float> FeaturePyramid<T> {
    pub fn channels(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.dim(1)).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.dim(2)).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.levels.iter().all(Tensor::all_finite)
    }

    /// Checks that level `i` has spatial size `input / 2^(i+1)`.
    pub fn check_contract(&self, input: usize) -> Result<()> {
        for (i, l) in self.levels.iter().enumerate() {
            let want = input >> (i + 1);
            if l.dim(2) != want || l.dim(3) != want {
                return Err(Error::Shape(format!("level {} is {:?}, expected {want}x{want}", i + 1, &l.shape()[2..])));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtraEncoder {
    None,
    WindowedAttention,
    St3d,
}

/// The CNN encoder is always active; at most one extra encoder joins it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub extra: ExtraEncoder,
    pub cnn: CnnConfig,
    pub attention: AttentionConfig,
    pub st3d: St3dConfig,
    /// Per-level width after fusion.
    pub fused_widths: [usize; 5],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            extra: ExtraEncoder::None,
            cnn: CnnConfig::default(),
            attention: AttentionConfig::default(),
            st3d: St3dConfig::default(),
            fused_widths: [32, 48, 64, 96, 128],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, input_size: usize) -> Result<()> {
        if input_size % 32 != 0 {
            return Err(Error::Config(format!("input size {input_size} is not divisible by 32")));
        }
        if self.fused_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("fused widths must be positive".into()));
        }
        self.cnn.validate()?;
        match self.extra {
            ExtraEncoder::WindowedAttention => self.attention.validate(input_size)?,
            ExtraEncoder::St3d => self.st3d.validate()?,
            ExtraEncoder::None => {}
        }
        Ok(())
    }
}

/// Per-level channel concatenation followed by a 1x1 projection.
#[derive(Clone, Debug)]
pub struct Fuse {
    pub proj: Vec<Conv2d>,
    pub in_channels: Vec<usize>,
}

impl Fuse {
    pub fn new(ps: &mut ParamStore, name: &str, in_channels: &[usize], out: &[usize]) -> Self {
        let proj = in_channels
            .iter()
            .zip(out)
            .enumerate()
            .map(|(i, (&ci, &co))| Conv2d::new(ps, &format!("{name}.proj{}", i + 1), ci, co, 1, ConvOpts::default()))
            .collect();
        Fuse { proj, in_channels: in_channels.to_vec() }
    }

    pub fn forward<T: Float>(&self, ctx: &Ctx<T>, pyramids: &[FeaturePyramid<T>]) -> Result<FeaturePyramid<T>> {
        let first = pyramids.first().ok_or_else(|| Error::Shape("fuse needs at least one pyramid".into()))?;
        let mut levels = Vec::with_capacity(self.proj.len());
        for (i, proj) in self.proj.iter().enumerate() {
            let parts: Vec<Tensor<T>> = pyramids.iter().map(|p| p.levels[i].clone()).collect();
            let size = &first.levels[i].shape()[2..];
            if parts.iter().any(|p| &p.shape()[2..] != size) {
                return Err(Error::Shape(format!("level {} spatial sizes differ across encoders", i + 1)));
            }
            let cat = Tensor::cat(&parts, 1);
            if cat.dim(1) != self.in_channels[i] {
                return Err(Error::Shape(format!("level {} has {} channels, expected {}", i + 1, cat.dim(1), self.in_channels[i])));
            }
            levels.push(proj.forward(ctx, &cat));
        }
        Ok(FeaturePyramid { levels })
    }
}

/// The active encoders plus their fusion.
#[derive(Clone, Debug)]
pub struct Encoders {
    pub cnn: CnnEncoder,
    pub attention: Option<AttentionEncoder>,
    pub st3d: Option<St3dEncoder>,
    pub fuse: Fuse,
}

impl Encoders {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &EncoderConfig, in_channels: usize) -> Self {
        let cnn = CnnEncoder::new(ps, &format!("{name}.cnn"), &cfg.cnn, in_channels);
        let mut chans = cnn.out_channels();
        let attention = (cfg.extra == ExtraEncoder::WindowedAttention).then(|| {
            let a = AttentionEncoder::new(ps, &format!("{name}.attention"), &cfg.attention, in_channels);
            chans.iter_mut().zip(a.out_channels()).for_each(|(c, a)| *c += a);
            a
        });
        let st3d = (cfg.extra == ExtraEncoder::St3d).then(|| {
            let s = St3dEncoder::new(ps, &format!("{name}.st3d"), &cfg.st3d);
            chans.iter_mut().zip(s.out_channels()).for_each(|(c, a)| *c += a);
            s
        });
        let fuse = Fuse::new(ps, &format!("{name}.fuse"), &chans, &cfg.fused_widths);
        Encoders { cnn, attention, st3d, fuse }
    }

    /// `dense`: `[B, 98, H, W]`; `sparse`: one raster per batch element
    /// (required only when the spatio-temporal encoder is active).
    pub fn forward<T: Float>(&self, ctx: &Ctx<T>, dense: &Tensor<T>, sparse: Option<&[&SparseRaster]>) -> Result<FeaturePyramid<T>> {
        let mut pyramids = vec![self.cnn.forward(ctx, dense)];
        if let Some(a) = &self.attention {
            pyramids.push(a.forward(ctx, dense));
        }
        if let Some(s) = &self.st3d {
            let sp = sparse.ok_or_else(|| Error::Data("spatio-temporal encoder needs sparse inputs".into()))?;
            pyramids.push(s.forward(ctx, sp)?);
        }
        let input = dense.dim(2);
        for p in &pyramids {
            p.check_contract(input)?;
        }
        self.fuse.forward(ctx, &pyramids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    #[test]
    fn fuse_concat_arithmetic_and_identity() {
        let mut ps = ParamStore::new(0);
        let fuse = Fuse::new(&mut ps, "f", &[3 + 2], &[3]);
        // identity on the first pyramid's channels
        let mut w = vec![0f32; 3 * 5];
        for c in 0..3 {
            w[c * 5 + c] = 1.0;
        }
        ps.set(fuse.proj[0].weight, &w);
        let ctx: Ctx<f64> = Ctx::eval(&ps);
        let a = Tensor::<f64>::new((0..3 * 16).map(|v| v as f64 * 0.1).collect(), &[1, 3, 4, 4]);
        let z = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let out = fuse
            .forward(&ctx, &[FeaturePyramid { levels: vec![a.clone()] }, FeaturePyramid { levels: vec![z] }])
            .unwrap();
        assert_eq!(out.levels[0].data(), a.data());
        let bad = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
        assert!(fuse.forward(&ctx, &[FeaturePyramid { levels: vec![a] }, FeaturePyramid { levels: vec![bad] }]).is_err());
    }

    #[test]
    fn single_pyramid_is_projection_only() {
        let mut ps = ParamStore::new(0);
        let fuse = Fuse::new(&mut ps, "f", &[4], &[6]);
        let ctx: Ctx<f64> = Ctx::eval(&ps);
        let a = Tensor::<f64>::full(&[2, 4, 2, 2], 1.0);
        let out = fuse.forward(&ctx, &[FeaturePyramid { levels: vec![a.clone()] }]).unwrap();
        let direct = fuse.proj[0].forward(&ctx, &a);
        assert_eq!(out.levels[0].data(), direct.data());
    }

    #[test]
    fn config_validation() {
        let cfg = EncoderConfig::default();
        assert!(cfg.validate(128).is_ok());
        assert!(cfg.validate(100).is_err());
    }
}
