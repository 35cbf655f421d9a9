use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::FeaturePyramid;
use crate::nn::{Ctx, LayerNorm, ParamStore, SparseConv3d};
use crate::raster::{SparseRaster, N_HISTORY, ST_FEATURES};
use crate::tensor::{ConvGeometry, Float, Rulebook, Site, SparseConvKind, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct St3dConfig {
    /// Per-site feature width of each stage.
    pub widths: [usize; 5],
    /// Stages whose entry convolution also halves time.
    pub temporal_down: [bool; 5],
    /// Submanifold convolutions after each stage's entry convolution.
    pub submanifold_layers: usize,
}

impl Default for St3dConfig {
    fn default() -> Self {
        St3dConfig { widths: [8, 16, 16, 24, 32], temporal_down: [false, true, false, true, false], submanifold_layers: 2 }
    }
}

impl St3dConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("st3d widths must be positive".into()));
        }
        Ok(())
    }

    /// Temporal extent entering each stage.
    pub fn temporal_extents(&self) -> [usize; 5] {
        let mut t = N_HISTORY;
        let mut out = [0; 5];
        for (o, &down) in out.iter_mut().zip(&self.temporal_down) {
            *o = t;
            if down {
                t = t.div_ceil(2);
            }
        }
        out
    }

    /// Temporal extent leaving each stage.
    pub fn temporal_outputs(&self) -> [usize; 5] {
        let ins = self.temporal_extents();
        let mut out = [0; 5];
        for i in 0..5 {
            out[i] = if self.temporal_down[i] { ins[i].div_ceil(2) } else { ins[i] };
        }
        out
    }
}

#[derive(Clone, Debug)]
struct Layer {
    conv: SparseConv3d,
    norm: LayerNorm,
}

impl Layer {
    fn forward<T: Float>(&self, ctx: &Ctx<T>, x: &Tensor<T>, rb: &Rc<Rulebook>) -> Tensor<T> {
        self.norm.forward(ctx, &self.conv.forward(ctx, x, rb)).relu()
    }

    /// Same layer on a dense `[B, C, T, H, W]` grid, masked to the active set.
    fn forward_dense<T: Float>(&self, ctx: &Ctx<T>, x: &Tensor<T>, mask: &Tensor<T>) -> Tensor<T> {
        let (ci, co) = (self.conv.ci, self.conv.co);
        let [a, b, c] = self.conv.geo.kernel;
        let w = ctx.param(self.conv.weight).reshape(&[a * b * c, ci, co]).permute(&[2, 1, 0]).reshape(&[co, ci, a, b, c]);
        let bias = self.conv.bias.map(|b| ctx.param(b));
        let y = x.conv3d(&w, bias.as_ref(), &self.conv.geo);
        let y = self.norm.forward(ctx, &y.permute(&[0, 2, 3, 4, 1])).relu().permute(&[0, 4, 1, 2, 3]);
        y.mul(mask)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    entry: Layer,
    rest: Vec<Layer>,
}

/// Sparse spatio-temporal encoder over the `(t, y, x)` history volume. Each
/// stage halves space; time is folded into channels at every output level.
#[derive(Clone, Debug)]
pub struct St3dEncoder {
    stages: Vec<Stage>,
    cfg: St3dConfig,
}

fn submanifold_geo() -> ConvGeometry {
    ConvGeometry::new([3, 3, 3]).same()
}

fn entry_geo(temporal_down: bool) -> ConvGeometry {
    ConvGeometry::new([3, 3, 3]).with_stride([if temporal_down { 2 } else { 1 }, 2, 2]).with_padding([1, 1, 1])
}

impl St3dEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &St3dConfig) -> Self {
        let mut prev = ST_FEATURES;
        let stages = (0..5)
            .map(|i| {
                let w = cfg.widths[i];
                let n = format!("{name}.stage{}", i + 1);
                let layer = |ps: &mut ParamStore, tag: &str, ci: usize, geo, kind| Layer {
                    conv: SparseConv3d::new(ps, &format!("{n}.{tag}"), ci, w, geo, kind, true),
                    norm: LayerNorm::new(ps, &format!("{n}.{tag}_norm"), w),
                };
                let entry = layer(ps, "entry", prev, entry_geo(cfg.temporal_down[i]), SparseConvKind::Regular);
                let rest = (0..cfg.submanifold_layers)
                    .map(|j| layer(ps, &format!("sub{j}"), w, submanifold_geo(), SparseConvKind::Submanifold))
                    .collect();
                prev = w;
                Stage { entry, rest }
            })
            .collect();
        St3dEncoder { stages, cfg: cfg.clone() }
    }

    pub fn out_channels(&self) -> Vec<usize> {
        let t = self.cfg.temporal_outputs();
        (0..5).map(|i| self.cfg.widths[i] * t[i]).collect()
    }

    pub fn forward<T: Float>(&self, ctx: &Ctx<T>, inputs: &[&SparseRaster]) -> Result<FeaturePyramid<T>> {
        let b = inputs.len();
        let first = inputs.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        let mut extent = first.extent;
        if extent[0] != N_HISTORY {
            return Err(Error::Shape(format!("temporal extent {} != {N_HISTORY}", extent[0])));
        }
        let mut sites: Vec<Site> = Vec::new();
        let mut feats: Vec<T> = Vec::new();
        for (bi, r) in inputs.iter().enumerate() {
            if r.extent != extent {
                return Err(Error::Shape("sparse rasters in a batch differ in extent".into()));
            }
            for (s, f) in r.sites.iter().zip(&r.features) {
                sites.push([bi, s[0], s[1], s[2]]);
                feats.extend(f.iter().map(|&v| T::cast(v as f64)));
            }
        }
        let mut x = Tensor::new(feats, &[sites.len(), ST_FEATURES]);
        let mut levels = Vec::with_capacity(5);
        for (i, st) in self.stages.iter().enumerate() {
            let geo = entry_geo(self.cfg.temporal_down[i]);
            let rb = Rc::new(
                Rulebook::build(&sites, extent, &geo, SparseConvKind::Regular)
                    .ok_or_else(|| Error::Shape(format!("stage {} cannot downsample {extent:?}", i + 1)))?,
            );
            x = st.entry.forward(ctx, &x, &rb);
            sites = rb.out_sites.clone();
            extent = rb.out_extent;
            if !st.rest.is_empty() {
                let sub = Rc::new(Rulebook::build(&sites, extent, &submanifold_geo(), SparseConvKind::Submanifold).expect("same geometry"));
                for l in &st.rest {
                    x = l.forward(ctx, &x, &sub);
                }
            }
            let dense = x.sparse_to_dense(&sites, b, extent);
            levels.push(dense.reshape(&[b, self.cfg.widths[i] * extent[0], extent[1], extent[2]]));
        }
        Ok(FeaturePyramid { levels })
    }

    /// Dense evaluation of the same network on `[B, 6, T, H, W]`, keeping
    /// outputs only where the sparse path has active sites.
    pub fn forward_dense_reference<T: Float>(&self, ctx: &Ctx<T>, x: &Tensor<T>) -> FeaturePyramid<T> {
        let b = x.dim(0);
        let mut x = x.clone();
        let occ: Vec<T> = {
            let (c, vol) = (x.dim(1), x.numel() / (b * x.dim(1)));
            let d = x.data();
            (0..b * vol)
                .map(|i| {
                    let (bi, v) = (i / vol, i % vol);
                    if (0..c).any(|ch| d[(bi * c + ch) * vol + v] != T::zero()) { T::one() } else { T::zero() }
                })
                .collect()
        };
        let mut mask = Tensor::new(occ, &[b, 1, x.dim(2), x.dim(3), x.dim(4)]);
        let mut levels = Vec::with_capacity(5);
        for (i, st) in self.stages.iter().enumerate() {
            let geo = entry_geo(self.cfg.temporal_down[i]);
            let ones = Tensor::full(&[1, 1, 3, 3, 3], T::one());
            let reach = mask.conv3d(&ones, None, &geo);
            mask = Tensor::new(reach.data().iter().map(|&v| if v > T::zero() { T::one() } else { T::zero() }).collect(), reach.shape());
            x = st.entry.forward_dense(ctx, &x, &mask);
            for l in &st.rest {
                x = l.forward_dense(ctx, &x, &mask);
            }
            let s = x.shape().to_vec();
            levels.push(x.reshape(&[b, s[1] * s[2], s[3], s[4]]));
        }
        FeaturePyramid { levels }
    }
}
