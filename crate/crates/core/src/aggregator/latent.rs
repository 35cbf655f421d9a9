use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoders::FeaturePyramid;
use crate::nn::{Conv2d, ConvOpts, Ctx, GroupNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleFrom {
    Future,
    Present,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatentConfig {
    pub enabled: bool,
    /// Latent channels per scale.
    pub channels: usize,
    /// 1-based pyramid levels that receive a spatial latent.
    pub scales: Vec<usize>,
    /// Adds a single pooled latent vector broadcast to every scale.
    pub global: bool,
    /// Distribution sampled during training.
    pub sample_from: SampleFrom,
    /// Width of the encoder over future ground truth.
    pub future_width: usize,
}

impl Default for LatentConfig {
    fn default() -> Self {
        LatentConfig { enabled: true, channels: 32, scales: (1..=6).collect(), global: true, sample_from: SampleFrom::Future, future_width: 16 }
    }
}

impl LatentConfig {
    pub fn validate(&self, n_levels: usize) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        if self.channels == 0 || self.future_width == 0 {
            return Err(Error::Config("latent channels and future width must be positive".into()));
        }
        if self.scales.iter().any(|&s| s == 0 || s > n_levels) {
            return Err(Error::Config(format!("latent scales {:?} outside 1..={n_levels}", self.scales)));
        }
        if self.scales.is_empty() && !self.global {
            return Err(Error::Config("latent enabled without any scale or global latent".into()));
        }
        Ok(())
    }
}

/// Diagonal Gaussian parameterized by mean and log-variance.
#[derive(Clone, Debug)]
pub struct Gaussian<T: Float = f32> {
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
}

impl<T: Float> Gaussian<T> {
    fn from_stats(stats: &Tensor<T>, c: usize) -> Self {
        Gaussian { mu: stats.narrow(1, 0, c), logvar: stats.narrow(1, c, c).clamp(-10.0, 10.0) }
    }

    pub fn std(&self) -> Tensor<T> {
        self.logvar.mul_scalar(0.5).exp()
    }

    /// Reparameterized draw `mu + std * noise`.
    pub fn sample(&self, rng: &mut impl Rng) -> Tensor<T> {
        let noise: Vec<T> = (0..self.mu.numel()).map(|_| T::cast(rng.sample::<f64, _>(StandardNormal))).collect();
        self.mu.add(&self.std().mul(&Tensor::new(noise, self.mu.shape())))
    }
}

/// Distributions produced in one pass; the last entry is the global latent
/// when enabled.
#[derive(Clone, Debug)]
pub struct LatentOutput<T: Float = f32> {
    pub present: Vec<Gaussian<T>>,
    pub future: Option<Vec<Gaussian<T>>>,
}

#[derive(Clone, Debug)]
struct ScaleHeads {
    level: usize,
    present: Conv2d,
    future: Conv2d,
    inject: Conv2d,
}

/// Present and future latent heads plus injection into the pyramid.
#[derive(Clone, Debug)]
pub struct LatentModule {
    cfg: LatentConfig,
    width: usize,
    future_enc: Vec<(Conv2d, GroupNorm)>,
    scales: Vec<ScaleHeads>,
    global: Option<(Linear, Linear)>,
    /// Identity block of each injection weight, for inspection in tests.
    pub inject_weights: Vec<ParamId>,
}

impl LatentModule {
    /// `width`: aggregated pyramid width; `future_channels`: channels of the
    /// future ground-truth context at the finest level.
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &LatentConfig, width: usize, n_levels: usize, future_channels: usize) -> Self {
        let (c, f) = (cfg.channels, cfg.future_width);
        let max_level = cfg.scales.iter().copied().max().unwrap_or(0).max(if cfg.global { n_levels } else { 0 });
        let future_enc = (0..max_level)
            .map(|i| {
                let (ci, stride) = if i == 0 { (future_channels, 1) } else { (f, 2) };
                (
                    Conv2d::new(ps, &format!("{name}.future_enc{}", i + 1), ci, f, 3, ConvOpts::default().stride(stride).no_bias()),
                    GroupNorm::new(ps, &format!("{name}.future_enc{}_norm", i + 1), 4, f),
                )
            })
            .collect();
        let zero = ConvOpts::default().gain(0.0);
        let gc = if cfg.global { c } else { 0 };
        let mut inject_weights = Vec::new();
        let scales = cfg
            .scales
            .iter()
            .map(|&level| {
                let n = format!("{name}.scale{level}");
                let inject = Conv2d::new(ps, &format!("{n}.inject"), width + c + gc, width, 1, ConvOpts::default().gain(0.1));
                // start from the identity on the feature channels
                let iw = &mut ps.get_mut(inject.weight).value;
                for o in 0..width {
                    for i in 0..width {
                        iw[o * (width + c + gc) + i] = if o == i { 1.0 } else { 0.0 };
                    }
                }
                inject_weights.push(inject.weight);
                ScaleHeads {
                    level,
                    present: Conv2d::new(ps, &format!("{n}.present"), width, 2 * c, 3, zero),
                    future: Conv2d::new(ps, &format!("{n}.future"), width + f, 2 * c, 3, zero),
                    inject,
                }
            })
            .collect();
        let global = cfg.global.then(|| {
            let p = Linear::new(ps, &format!("{name}.global.present"), width, 2 * c, true);
            let q = Linear::new(ps, &format!("{name}.global.future"), width + f, 2 * c, true);
            for id in [p.weight, q.weight] {
                ps.get_mut(id).value.iter_mut().for_each(|v| *v = 0.0);
            }
            (p, q)
        });
        LatentModule { cfg: cfg.clone(), width, future_enc, scales, global, inject_weights }
    }

    fn global_pool<T: Float>(x: &Tensor<T>) -> Tensor<T> {
        let (b, c) = (x.dim(0), x.dim(1));
        x.reshape(&[b, c, x.dim(2) * x.dim(3)]).mean_axis(2, false)
    }

    /// Returns the pyramid with latents injected and the distributions.
    /// During training with `future` context the configured distribution
    /// is sampled; otherwise the present mean is used.
    pub fn forward<T: Float>(
        &self,
        ctx: &Ctx<T>,
        pyr: &FeaturePyramid<T>,
        future: Option<&Tensor<T>>,
        rng: &mut impl Rng,
    ) -> Result<(FeaturePyramid<T>, LatentOutput<T>)> {
        let c = self.cfg.channels;
        let n = pyr.levels.len();
        if let Some(s) = self.scales.iter().find(|s| s.level > n) {
            return Err(Error::Shape(format!("latent level {} but pyramid has {n} levels", s.level)));
        }
        let top = pyr.levels.last().ok_or_else(|| Error::Shape("empty pyramid".into()))?;
        let mut present: Vec<Gaussian<T>> = self.scales.iter().map(|s| Gaussian::from_stats(&s.present.forward(ctx, &pyr.levels[s.level - 1]), c)).collect();
        if let Some((p, _)) = &self.global {
            present.push(Gaussian::from_stats(&p.forward(ctx, &Self::global_pool(top)), c));
        }
        let future = match future {
            Some(f) => {
                if f.dim(2) != pyr.levels[0].dim(2) || f.dim(3) != pyr.levels[0].dim(3) {
                    return Err(Error::Shape(format!("future context {:?} does not match level 1 {:?}", f.shape(), pyr.levels[0].shape())));
                }
                let mut feats = Vec::with_capacity(self.future_enc.len());
                let mut h = f.clone();
                for (conv, norm) in &self.future_enc {
                    h = norm.forward(ctx, &conv.forward(ctx, &h)).silu();
                    feats.push(h.clone());
                }
                let mut dists: Vec<Gaussian<T>> = self
                    .scales
                    .iter()
                    .map(|s| {
                        let x = Tensor::cat(&[pyr.levels[s.level - 1].clone(), feats[s.level - 1].clone()], 1);
                        Gaussian::from_stats(&s.future.forward(ctx, &x), c)
                    })
                    .collect();
                if let Some((_, q)) = &self.global {
                    let x = Tensor::cat(&[Self::global_pool(top), Self::global_pool(&feats[n - 1])], 1);
                    dists.push(Gaussian::from_stats(&q.forward(ctx, &x), c));
                }
                Some(dists)
            }
            None => None,
        };
        let z: Vec<Tensor<T>> = match (&future, ctx.is_train()) {
            (Some(f), true) if self.cfg.sample_from == SampleFrom::Future => f.iter().map(|g| g.sample(rng)).collect(),
            (_, true) => present.iter().map(|g| g.sample(rng)).collect(),
            (_, false) => present.iter().map(|g| g.mu.clone()).collect(),
        };
        let levels = self.inject(ctx, pyr, &z);
        Ok((FeaturePyramid { levels }, LatentOutput { present, future }))
    }

    /// Concatenates latent maps (and the broadcast global latent) with each
    /// configured level and projects back to the pyramid width.
    pub fn inject<T: Float>(&self, ctx: &Ctx<T>, pyr: &FeaturePyramid<T>, z: &[Tensor<T>]) -> Vec<Tensor<T>> {
        let c = self.cfg.channels;
        let mut levels = pyr.levels.clone();
        let global = self.global.as_ref().map(|_| z.last().expect("global latent").clone());
        for (s, zs) in self.scales.iter().zip(z) {
            let x = &pyr.levels[s.level - 1];
            let (b, h, w) = (x.dim(0), x.dim(2), x.dim(3));
            let mut parts = vec![x.clone(), zs.clone()];
            if let Some(g) = &global {
                parts.push(g.reshape(&[b, c, 1, 1]).broadcast_to(&[b, c, h, w]));
            }
            levels[s.level - 1] = s.inject.forward(ctx, &Tensor::cat(&parts, 1));
        }
        debug_assert!(levels.iter().all(|l| l.dim(1) == self.width));
        levels
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::rand_vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pyramid(c: usize, top: usize, n: usize) -> FeaturePyramid<f64> {
        FeaturePyramid {
            levels: (0..n)
                .map(|i| {
                    let s = top >> i;
                    Tensor::new(rand_vec(c * s * s, i as u64 + 5), &[1, c, s, s])
                })
                .collect(),
        }
    }

    fn cfg() -> LatentConfig {
        LatentConfig { channels: 3, scales: vec![1, 2, 3], global: true, future_width: 4, ..Default::default() }
    }

    #[test]
    fn zero_init_heads_give_standard_normal() {
        let mut ps = ParamStore::new(0);
        let m = LatentModule::new(&mut ps, "lat", &cfg(), 4, 3, 5);
        let ctx: Ctx<f64> = Ctx::eval(&ps);
        let p = pyramid(4, 8, 3);
        let fut = Tensor::new(rand_vec(5 * 64, 9), &[1, 5, 8, 8]);
        let (_, out) = m.forward(&ctx, &p, Some(&fut), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.present.len(), 4);
        for g in out.present.iter().chain(out.future.as_ref().unwrap()) {
            assert!(g.mu.data().iter().all(|&v| v == 0.0));
            assert!(g.std().data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        }
        assert_eq!(out.present[1].mu.shape(), &[1, 3, 4, 4]);
        assert_eq!(out.present[3].mu.shape(), &[1, 3]);
    }

    #[test]
    fn identity_injection_with_zero_latent_weights() {
        let mut ps = ParamStore::new(1);
        let m = LatentModule::new(&mut ps, "lat", &cfg(), 4, 3, 5);
        for &id in &m.inject_weights.clone() {
            let v = &mut ps.get_mut(id).value;
            let cols = 4 + 3 + 3;
            for o in 0..4 {
                for i in 4..cols {
                    v[o * cols + i] = 0.0;
                }
            }
        }
        let ctx: Ctx<f64> = Ctx::eval(&ps);
        let p = pyramid(4, 8, 3);
        let z: Vec<Tensor<f64>> = [8usize, 4, 2].iter().map(|&s| Tensor::full(&[1, 3, s, s], 7.0)).chain([Tensor::full(&[1, 3], -2.0)]).collect();
        let out = m.inject(&ctx, &p, &z);
        for (a, b) in out.iter().zip(&p.levels) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn eval_is_deterministic_and_train_samples() {
        let mut ps = ParamStore::new(2);
        let m = LatentModule::new(&mut ps, "lat", &cfg(), 4, 3, 5);
        let p = pyramid(4, 8, 3);
        let fut = Tensor::new(rand_vec(5 * 64, 3), &[1, 5, 8, 8]);
        let eval: Ctx<f64> = Ctx::eval(&ps);
        let a = m.forward(&eval, &p, Some(&fut), &mut ChaCha8Rng::seed_from_u64(1)).unwrap().0;
        let b = m.forward(&eval, &p, None, &mut ChaCha8Rng::seed_from_u64(2)).unwrap().0;
        assert_eq!(a.levels[0].data(), b.levels[0].data());
        let train: Ctx<f64> = Ctx::train(&ps);
        let c = m.forward(&train, &p, Some(&fut), &mut ChaCha8Rng::seed_from_u64(1)).unwrap().0;
        assert_ne!(a.levels[0].data(), c.levels[0].data());
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate(6).is_ok());
        assert!(LatentConfig { scales: vec![7], ..cfg() }.validate(6).is_err());
        assert!(LatentConfig { scales: vec![], global: false, ..cfg() }.validate(6).is_err());
        assert!(LatentConfig { enabled: false, scales: vec![], global: false, ..cfg() }.validate(6).is_ok());
    }
}
