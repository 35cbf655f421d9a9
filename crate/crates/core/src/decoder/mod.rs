//! Spatio-temporal decoder: the aggregated pyramid is lifted to a temporal
//! axis, unrolled coarse-to-fine with 3-D convolutions, refined at the
//! finest level by a convolutional LSTM and read out by a shared head.

mod blocks;
mod lstm;

use serde::{Deserialize, Serialize};

use crate::encoders::FeaturePyramid;
use crate::nn::{Conv2d, ConvOpts, Ctx, GroupNorm, ParamStore};
use crate::tensor::{ConvGeometry, Float, Tensor};
use crate::{Error, Result};

pub use blocks::Bottleneck3d;
pub use lstm::ConvLstmCell;

/// Output channel order of the head.
pub mod channels {
    pub const OBSERVED: usize = 0;
    pub const OCCLUDED: usize = 1;
    pub const FLOW_DX: usize = 2;
    pub const FLOW_DY: usize = 3;
    pub const COUNT: usize = 4;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// Temporal unrolling with convolutional LSTM refinement.
    Recursive,
    /// All waypoints predicted at once from a 2-D top-down pathway.
    OneShot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    pub width: usize,
    /// Width reduction inside each bottleneck.
    pub bottleneck_ratio: usize,
    pub groups: usize,
    pub norm_groups: usize,
    /// Spatial dilations of the blocks at each level (temporal dilation is 1).
    pub dilations: Vec<usize>,
    pub lstm_input: usize,
    pub lstm_hidden: usize,
    pub head_hidden: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            kind: DecoderKind::Recursive,
            width: 64,
            bottleneck_ratio: 2,
            groups: 4,
            norm_groups: 8,
            dilations: vec![1, 2, 4],
            lstm_input: 16,
            lstm_hidden: 32,
            head_hidden: 32,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, waypoints: usize) -> Result<()> {
        if !waypoints.is_power_of_two() || waypoints > 16 {
            return Err(Error::Config(format!("waypoints must be a power of two up to 16, got {waypoints}")));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::Config("decoder dilations must be non-empty and positive".into()));
        }
        let nonzero = [self.width, self.bottleneck_ratio, self.groups, self.norm_groups, self.lstm_input, self.lstm_hidden, self.head_hidden];
        if nonzero.contains(&0) || self.width < self.bottleneck_ratio {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        Ok(())
    }
}

/// Shared conv readout `[B, C, H, W] -> [B, 4, H, W]`.
#[derive(Clone, Debug)]
pub struct Head {
    hidden: Conv2d,
    out: Conv2d,
}

impl Head {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize, hidden: usize, out: usize) -> Self {
        Head {
            hidden: Conv2d::new(ps, &format!("{name}.hidden"), c, hidden, 3, ConvOpts::default()),
            out: Conv2d::new(ps, &format!("{name}.out"), hidden, out, 1, ConvOpts::default()),
        }
    }

    pub fn forward<T: Float>(&self, ctx: &Ctx<T>, x: &Tensor<T>) -> Tensor<T> {
        self.out.forward(ctx, &self.hidden.forward(ctx, x).silu())
    }
}

#[derive(Clone, Debug)]
pub struct RecursiveDecoder {
    lateral: Vec<Conv2d>,
    /// Block stacks for levels 6 down to 2.
    stacks: Vec<Vec<Bottleneck3d>>,
    to_lstm: crate::nn::Conv3d,
    h0: Conv2d,
    c0: Conv2d,
    cell: ConvLstmCell,
    head: Head,
    waypoints: usize,
}

impl RecursiveDecoder {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &DecoderConfig, in_width: usize, waypoints: usize) -> Self {
        let c = cfg.width;
        let mid = (c / cfg.bottleneck_ratio).max(1);
        let lateral = (2..=6).map(|l| Conv2d::new(ps, &format!("{name}.lateral{l}"), in_width, c, 1, ConvOpts::default())).collect();
        let doublings = waypoints.trailing_zeros() as usize;
        let stacks = (2..=6usize)
            .rev()
            .map(|l| {
                // levels 5, 4, ... each double the temporal extent once
                let transposed = l <= 5 && 5 - l < doublings;
                cfg.dilations
                    .iter()
                    .enumerate()
                    .map(|(j, &d)| Bottleneck3d::new(ps, &format!("{name}.level{l}.block{j}"), c, mid, cfg.groups, d, transposed && j == 0, cfg.norm_groups))
                    .collect()
            })
            .collect();
        RecursiveDecoder {
            lateral,
            stacks,
            to_lstm: crate::nn::Conv3d::new(ps, &format!("{name}.to_lstm"), c, cfg.lstm_input, ConvGeometry::new([1, 1, 1]), true, 1.0),
            h0: Conv2d::new(ps, &format!("{name}.h0"), in_width, cfg.lstm_hidden, 1, ConvOpts::default()),
            c0: Conv2d::new(ps, &format!("{name}.c0"), in_width, cfg.lstm_hidden, 1, ConvOpts::default()),
            cell: ConvLstmCell::new(ps, &format!("{name}.lstm"), cfg.lstm_input, cfg.lstm_hidden),
            head: Head::new(ps, &format!("{name}.head"), cfg.lstm_hidden, cfg.head_hidden, channels::COUNT),
            waypoints,
        }
    }

    /// Coarse spatio-temporal volume `[B, C, T, H/4·.., ..]` at level 2.
    pub fn temporal_unroll<T: Float>(&self, ctx: &Ctx<T>, pyr: &FeaturePyramid<T>) -> Tensor<T> {
        let lat = |l: usize| self.lateral[l - 2].forward(ctx, &pyr.levels[l - 1]).unsqueeze(2);
        let mut x = lat(6);
        for b in &self.stacks[0] {
            x = b.forward(ctx, &x);
        }
        for (k, l) in (2..=5usize).rev().enumerate() {
            x = x.upsample_nearest(2).add(&lat(l));
            for b in &self.stacks[k + 1] {
                x = b.forward(ctx, &x);
            }
        }
        x
    }

    /// ConvLSTM over the upsampled coarse slices, with hidden and cell
    /// states projected from `p1`. Returns the hidden state of every step.
    pub fn refine<T: Float>(&self, ctx: &Ctx<T>, coarse: &Tensor<T>, p1: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        if coarse.dim(2) != self.waypoints {
            return Err(Error::Shape(format!("unrolled {} steps, expected {}", coarse.dim(2), self.waypoints)));
        }
        let (ch, cw) = (2 * coarse.dim(3), 2 * coarse.dim(4));
        if (ch, cw) != (p1.dim(2), p1.dim(3)) {
            return Err(Error::Shape(format!("upsampled coarse features are {ch}x{cw}, P1 is {}x{}", p1.dim(2), p1.dim(3))));
        }
        let inputs = self.to_lstm.forward(ctx, coarse);
        let (mut h, mut c) = (self.h0.forward(ctx, p1), self.c0.forward(ctx, p1));
        let mut out = Vec::with_capacity(self.waypoints);
        for t in 0..self.waypoints {
            let x = inputs.narrow(2, t, 1).squeeze(2).upsample_nearest(2);
            (h, c) = self.cell.forward(ctx, &x, &h, &c);
            out.push(h.clone());
        }
        Ok(out)
    }

    pub fn forward<T: Float>(&self, ctx: &Ctx<T>, pyr: &FeaturePyramid<T>) -> Result<Tensor<T>> {
        if pyr.levels.len() != 6 {
            return Err(Error::Shape(format!("decoder needs 6 levels, got {}", pyr.levels.len())));
        }
        let coarse = self.temporal_unroll(ctx, pyr);
        let refined = self.refine(ctx, &coarse, &pyr.levels[0])?;
        let outs: Vec<_> = refined.iter().map(|h| self.head.forward(ctx, h).unsqueeze(1)).collect();
        Ok(Tensor::cat(&outs, 1))
    }
}

/// Non-recursive baseline: FPN-style 2-D merge to level 1 and a head that
/// emits every waypoint's channels at once.
#[derive(Clone, Debug)]
pub struct OneShotDecoder {
    lateral: Vec<Conv2d>,
    smooth: Vec<(Conv2d, GroupNorm)>,
    head: Head,
    waypoints: usize,
}

impl OneShotDecoder {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize, norm_groups: usize, in_width: usize, waypoints: usize) -> Self {
        let lateral = (1..=6).map(|l| Conv2d::new(ps, &format!("{name}.lateral{l}"), in_width, width, 1, ConvOpts::default())).collect();
        let smooth = (1..=5)
            .map(|l| {
                (
                    Conv2d::new(ps, &format!("{name}.smooth{l}"), width, width, 3, ConvOpts::default().no_bias()),
                    GroupNorm::new(ps, &format!("{name}.smooth{l}_norm"), norm_groups, width),
                )
            })
            .collect();
        let head = Head::new(ps, &format!("{name}.head"), width, width, channels::COUNT * waypoints);
        OneShotDecoder { lateral, smooth, head, waypoints }
    }

    /// Picks the width whose parameter count is closest to `budget`.
    pub fn width_for_budget(budget: usize, norm_groups: usize, in_width: usize, waypoints: usize) -> usize {
        let count = |w: usize| {
            let mut ps = ParamStore::new(0);
            OneShotDecoder::new(&mut ps, "probe", w, norm_groups, in_width, waypoints);
            ps.num_scalars()
        };
        (1..=512).min_by_key(|&w| count(w).abs_diff(budget)).expect("non-empty range")
    }

    pub fn forward<T: Float>(&self, ctx: &Ctx<T>, pyr: &FeaturePyramid<T>) -> Result<Tensor<T>> {
        if pyr.levels.len() != 6 {
            return Err(Error::Shape(format!("decoder needs 6 levels, got {}", pyr.levels.len())));
        }
        let mut x = self.lateral[5].forward(ctx, &pyr.levels[5]);
        for l in (0..5).rev() {
            x = x.upsample_nearest(2).add(&self.lateral[l].forward(ctx, &pyr.levels[l]));
            let (conv, norm) = &self.smooth[l];
            x = norm.forward(ctx, &conv.forward(ctx, &x)).silu();
        }
        let y = self.head.forward(ctx, &x);
        let (b, h, w) = (y.dim(0), y.dim(2), y.dim(3));
        Ok(y.reshape(&[b, self.waypoints, channels::COUNT, h, w]))
    }
}

#[derive(Clone, Debug)]
pub enum Decoder {
    Recursive(RecursiveDecoder),
    OneShot(OneShotDecoder),
}

impl Decoder {
    /// `budget` fixes the one-shot width by parameter count; `None` uses the
    /// configured width.
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &DecoderConfig, in_width: usize, waypoints: usize, budget: Option<usize>) -> Self {
        match cfg.kind {
            DecoderKind::Recursive => Decoder::Recursive(RecursiveDecoder::new(ps, name, cfg, in_width, waypoints)),
            DecoderKind::OneShot => {
                let w = budget.map_or(cfg.width, |b| OneShotDecoder::width_for_budget(b, cfg.norm_groups, in_width, waypoints));
                Decoder::OneShot(OneShotDecoder::new(ps, name, w, cfg.norm_groups, in_width, waypoints))
            }
        }
    }

    /// Pyramid of 6 levels → `[B, T, 4, H1, W1]` raw outputs.
    pub fn forward<T: Float>(&self, ctx: &Ctx<T>, pyr: &FeaturePyramid<T>) -> Result<Tensor<T>> {
        match self {
            Decoder::Recursive(d) => d.forward(ctx, pyr),
            Decoder::OneShot(d) => d.forward(ctx, pyr),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::rand_vec;

    fn pyramid(c: usize, top: usize) -> FeaturePyramid<f64> {
        FeaturePyramid {
            levels: (0..6)
                .map(|i| {
                    let s = top >> i;
                    Tensor::new(rand_vec(c * s * s, i as u64 + 1), &[1, c, s, s])
                })
                .collect(),
        }
    }

    fn small() -> DecoderConfig {
        DecoderConfig { width: 8, groups: 2, norm_groups: 2, dilations: vec![1, 2], lstm_input: 4, lstm_hidden: 4, head_hidden: 4, ..Default::default() }
    }

    #[test]
    fn temporal_unroll_reaches_level_two_with_eight_steps() {
        let mut ps = ParamStore::new(0);
        let d = RecursiveDecoder::new(&mut ps, "dec", &small(), 6, 8);
        let ctx: Ctx<f64> = Ctx::eval(&ps);
        let p = pyramid(6, 32);
        let coarse = d.temporal_unroll(&ctx, &p);
        assert_eq!(coarse.shape(), &[1, 8, 8, 16, 16]);
        let out = d.forward(&ctx, &p).unwrap();
        assert_eq!(out.shape(), &[1, 8, 4, 32, 32]);
        assert!(out.all_finite());
    }

    #[test]
    fn fewer_waypoints_use_fewer_doublings() {
        let mut ps = ParamStore::new(1);
        let d = RecursiveDecoder::new(&mut ps, "dec", &small(), 6, 4);
        let ctx: Ctx<f64> = Ctx::eval(&ps);
        assert_eq!(d.forward(&ctx, &pyramid(6, 32)).unwrap().shape(), &[1, 4, 4, 32, 32]);
        assert!(small().validate(6).is_err());
        assert!(small().validate(8).is_ok());
    }

    #[test]
    fn one_shot_matches_budget_and_shape() {
        let mut ps = ParamStore::new(2);
        RecursiveDecoder::new(&mut ps, "dec", &small(), 6, 8);
        let budget = ps.num_scalars();
        let cfg = DecoderConfig { kind: DecoderKind::OneShot, ..small() };
        let mut ps2 = ParamStore::new(3);
        let d = Decoder::new(&mut ps2, "dec", &cfg, 6, 8, Some(budget));
        let ratio = ps2.num_scalars() as f64 / budget as f64;
        assert!((ratio - 1.0).abs() < 0.1, "one-shot has {} params vs {budget}", ps2.num_scalars());
        let ctx: Ctx<f64> = Ctx::eval(&ps2);
        assert_eq!(d.forward(&ctx, &pyramid(6, 32)).unwrap().shape(), &[1, 8, 4, 32, 32]);
    }

    #[test]
    fn decoder_gradients_reach_every_level() {
        let mut ps = ParamStore::new(4);
        let d = RecursiveDecoder::new(&mut ps, "dec", &small(), 6, 2);
        let ctx: Ctx<f64> = Ctx::train(&ps);
        let out = d.forward(&ctx, &pyramid(6, 32)).unwrap();
        let g = ctx.param_grads(&out.sqr().mean_all().backward());
        for l in 2..=6 {
            let id = ps.id(&format!("dec.lateral{l}.weight")).unwrap();
            assert!(g[id.index()].as_ref().unwrap().iter().any(|v| v.abs() > 0.0), "level {l}");
        }
    }

    #[test]
    fn short_pyramids_are_rejected() {
        let mut ps = ParamStore::new(5);
        let d = Decoder::new(&mut ps, "dec", &small(), 6, 8, None);
        let ctx: Ctx<f64> = Ctx::eval(&ps);
        let mut p = pyramid(6, 32);
        p.levels.pop();
        assert!(matches!(d.forward(&ctx, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn refinement_is_causal() {
        let mut ps = ParamStore::new(6);
        let d = RecursiveDecoder::new(&mut ps, "dec", &small(), 6, 8);
        let ctx: Ctx<f64> = Ctx::eval(&ps);
        let p = pyramid(6, 32);
        let coarse = d.temporal_unroll(&ctx, &p);
        let base = d.refine(&ctx, &coarse, &p.levels[0]).unwrap();
        // perturb slice 5 of 8 (index 4)
        let mut v = coarse.to_vec();
        let plane = 16 * 16;
        for ch in 0..8 {
            let at = (ch * 8 + 4) * plane;
            v[at..at + plane].iter_mut().for_each(|x| *x += 1.0);
        }
        let moved = d.refine(&ctx, &Tensor::new(v, coarse.shape()), &p.levels[0]).unwrap();
        for t in 0..4 {
            assert_eq!(base[t].data(), moved[t].data(), "step {t}");
        }
        assert!((4..8).all(|t| base[t].data() != moved[t].data()));
    }

    #[test]
    fn refinement_rejects_mismatched_p1() {
        let mut ps = ParamStore::new(7);
        let d = RecursiveDecoder::new(&mut ps, "dec", &small(), 6, 8);
        let ctx: Ctx<f64> = Ctx::eval(&ps);
        let p = pyramid(6, 32);
        let coarse = d.temporal_unroll(&ctx, &p);
        let wrong = Tensor::new(rand_vec(6 * 24 * 24, 9), &[1, 6, 24, 24]);
        assert!(matches!(d.refine(&ctx, &coarse, &wrong), Err(Error::Shape(_))));
        assert!(matches!(d.refine(&ctx, &coarse.narrow(2, 0, 4), &p.levels[0]), Err(Error::Shape(_))));
    }

    #[test]
    fn waypoints_share_one_head() {
        let mut ps = ParamStore::new(8);
        let d = RecursiveDecoder::new(&mut ps, "dec", &small(), 6, 2);
        let ctx: Ctx<f64> = Ctx::eval(&ps);
        let h = Tensor::new(rand_vec(4 * 32 * 32, 10), &[1, 4, 32, 32]);
        let a = d.head.forward(&ctx, &h);
        let b = d.head.forward(&ctx, &h.clone());
        assert_eq!(a.data(), b.data());
        assert_eq!(a.shape(), &[1, channels::COUNT, 32, 32]);
        // one hidden and one output convolution, weight and bias each
        assert_eq!(ps.params().iter().filter(|p| p.name.contains(".head.")).count(), 4);
    }
}
