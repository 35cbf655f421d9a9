//! Occupancy, flow, flow-traced and latent KL losses and their weighted sum.
//!
//! Every loss is mean-reduced over batch, waypoints and cells.

mod pointwise;
mod warp;

use serde::{Deserialize, Serialize};

use crate::aggregator::{Gaussian, LatentOutput};
use crate::decoder::channels;
use crate::scenario::GroundTruth;
use crate::tensor::{Float, Tensor};
use crate::{Error, Result};

pub use pointwise::{bce, focal, weighted_smooth_l1};
pub use warp::warp;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub occ: f64,
    pub flow: f64,
    pub traced: f64,
    pub prob: f64,
    pub observed: f64,
    pub occluded: f64,
    pub ce: f64,
    pub focal: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub eps: f64,
    pub smooth_l1_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            occ: 500.0,
            flow: 1.0,
            traced: 500.0,
            prob: 1.0,
            observed: 1.0,
            occluded: 1.0,
            ce: 1.0,
            focal: 1.0,
            alpha: 0.25,
            gamma: 2.0,
            eps: 1e-6,
            smooth_l1_beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.occ, self.flow, self.traced, self.prob, self.observed, self.occluded, self.ce, self.focal, self.alpha, self.gamma];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) || self.smooth_l1_beta <= 0.0 || self.alpha > 1.0 {
            return Err(Error::Config("loss eps must lie in (0, 0.5), beta > 0 and alpha <= 1".into()));
        }
        Ok(())
    }
}

/// Scalar values of each weighted part of the training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub occ: f64,
    pub flow: f64,
    pub traced: f64,
    pub prob: f64,
    pub total: f64,
}

/// Unweighted loss parts before combination.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub occ: f64,
    pub flow: f64,
    pub traced: f64,
    pub prob: f64,
}

/// Weighted sum of the parts; fails on a non-finite part, naming it.
pub fn total_loss(parts: LossParts, w: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("occupancy", parts.occ), ("flow", parts.flow), ("traced", parts.traced), ("kl", parts.prob)] {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("{name} loss is {v}")));
        }
    }
    let total = w.occ * parts.occ + w.flow * parts.flow + w.traced * parts.traced + w.prob * parts.prob;
    Ok(LossBreakdown { occ: parts.occ, flow: parts.flow, traced: parts.traced, prob: parts.prob, total })
}

/// Raw decoder output `[B, T, 4, H, W]`.
#[derive(Clone, Debug)]
pub struct WaypointPredictions<T: Float = f32> {
    pub raw: Tensor<T>,
}

impl<T: Float> WaypointPredictions<T> {
    pub fn new(raw: Tensor<T>) -> Self {
        assert_eq!(raw.rank(), 5, "predictions are [B, T, 4, H, W]");
        assert_eq!(raw.dim(2), channels::COUNT);
        WaypointPredictions { raw }
    }

    pub fn batch(&self) -> usize {
        self.raw.dim(0)
    }

    pub fn waypoints(&self) -> usize {
        self.raw.dim(1)
    }

    pub fn size(&self) -> (usize, usize) {
        (self.raw.dim(3), self.raw.dim(4))
    }

    fn channel(&self, c: usize) -> Tensor<T> {
        self.raw.narrow(2, c, 1).squeeze(2)
    }

    /// `[B, T, H, W]` logits.
    pub fn observed_logits(&self) -> Tensor<T> {
        self.channel(channels::OBSERVED)
    }

    pub fn occluded_logits(&self) -> Tensor<T> {
        self.channel(channels::OCCLUDED)
    }

    pub fn observed(&self) -> Tensor<T> {
        self.observed_logits().sigmoid()
    }

    pub fn occluded(&self) -> Tensor<T> {
        self.occluded_logits().sigmoid()
    }

    /// `[B, T, 2, H, W]` backward flow in cells.
    pub fn flow(&self) -> Tensor<T> {
        self.raw.narrow(2, channels::FLOW_DX, 2)
    }
}

/// Ground truth of a batch in dense layouts matching the predictions.
#[derive(Clone, Debug)]
pub struct Targets<T: Float = f32> {
    pub batch: usize,
    pub waypoints: usize,
    pub h: usize,
    pub w: usize,
    /// `[B, T + 1, H, W]`, waypoint 0 is the current frame.
    pub observed: Vec<T>,
    pub occluded: Vec<T>,
    /// `[B, T, 2, H, W]`
    pub flow: Vec<T>,
}

impl<T: Float> Targets<T> {
    pub fn from_ground_truth(gts: &[&GroundTruth]) -> Result<Self> {
        let first = gts.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        let (t, n) = (first.n_waypoints, first.size());
        let mut out = Targets { batch: gts.len(), waypoints: t, h: n, w: n, observed: Vec::new(), occluded: Vec::new(), flow: Vec::new() };
        let cast = |v: &[f32]| v.iter().map(|&x| T::cast(x as f64)).collect::<Vec<_>>();
        for g in gts {
            if g.n_waypoints != t || g.size() != n {
                return Err(Error::Shape("ground truth grids in a batch differ".into()));
            }
            out.observed.extend(cast(&g.observed));
            out.occluded.extend(cast(&g.occluded));
            out.flow.extend(cast(&g.flow));
        }
        Ok(out)
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn future(&self, v: &[T]) -> Vec<T> {
        let (p, t) = (self.plane(), self.waypoints);
        (0..self.batch).flat_map(|b| v[(b * (t + 1) + 1) * p..(b + 1) * (t + 1) * p].iter().copied()).collect()
    }

    fn past(&self, v: &[T]) -> Vec<T> {
        let (p, t) = (self.plane(), self.waypoints);
        (0..self.batch).flat_map(|b| v[b * (t + 1) * p..(b * (t + 1) + t) * p].iter().copied()).collect()
    }

    /// Observed occupancy at waypoints `1..=T`, `[B, T, H, W]`.
    pub fn future_observed(&self) -> Vec<T> {
        self.future(&self.observed)
    }

    pub fn future_occluded(&self) -> Vec<T> {
        self.future(&self.occluded)
    }

    /// Union of observed and occluded future occupancy, the flow weight.
    pub fn future_union(&self) -> Vec<T> {
        self.future_observed().iter().zip(self.future_occluded()).map(|(&a, b)| a.max(b)).collect()
    }

    /// Future context for the posterior latent: `[B, 4T, H, W]` with
    /// observed, occluded, dx, dy for each waypoint.
    pub fn future_context(&self) -> Tensor<T> {
        let (p, t) = (self.plane(), self.waypoints);
        let (obs, occ) = (self.future_observed(), self.future_occluded());
        let mut out = Vec::with_capacity(self.batch * 4 * t * p);
        for b in 0..self.batch {
            for k in 0..t {
                let i = (b * t + k) * p;
                out.extend_from_slice(&obs[i..i + p]);
                out.extend_from_slice(&occ[i..i + p]);
                out.extend_from_slice(&self.flow[(b * t + k) * 2 * p..(b * t + k + 1) * 2 * p]);
            }
        }
        Tensor::new(out, &[self.batch, 4 * t, self.h, self.w])
    }

    fn check(&self, pred: &WaypointPredictions<T>) -> Result<()> {
        let (h, w) = pred.size();
        if pred.batch() != self.batch || pred.waypoints() != self.waypoints || h != self.h || w != self.w {
            return Err(Error::Shape(format!(
                "predictions {:?} vs targets [{}, {}, 4, {}, {}]",
                pred.raw.shape(),
                self.batch,
                self.waypoints,
                self.h,
                self.w
            )));
        }
        Ok(())
    }
}

/// Focal loss on the observed and occluded channels.
pub fn occupancy_loss<T: Float>(pred: &WaypointPredictions<T>, gt: &Targets<T>, w: &LossWeights) -> Result<Tensor<T>> {
    gt.check(pred)?;
    let mut loss = Tensor::scalar(T::zero());
    if w.observed > 0.0 {
        loss = loss.add(&focal(&pred.observed(), &gt.future_observed(), w.alpha, w.gamma, w.eps)?.mul_scalar(w.observed));
    }
    if w.occluded > 0.0 {
        loss = loss.add(&focal(&pred.occluded(), &gt.future_occluded(), w.alpha, w.gamma, w.eps)?.mul_scalar(w.occluded));
    }
    Ok(loss)
}

/// Smooth-L1 flow regression weighted by ground-truth vehicle occupancy.
pub fn flow_loss<T: Float>(pred: &WaypointPredictions<T>, gt: &Targets<T>, w: &LossWeights) -> Result<Tensor<T>> {
    gt.check(pred)?;
    let flow = pred.flow();
    let n = gt.batch * gt.waypoints;
    weighted_smooth_l1(&flow.reshape(&[n, 2, gt.h * gt.w]), &gt.flow, &gt.future_union(), 2, w.smooth_l1_beta)
}

/// Warps the previous ground-truth occupancy with the predicted flow and
/// scores it against the predicted observed occupancy.
pub fn traced_loss<T: Float>(pred: &WaypointPredictions<T>, gt: &Targets<T>, w: &LossWeights) -> Result<Tensor<T>> {
    gt.check(pred)?;
    let n = gt.batch * gt.waypoints;
    let (h, wd) = (gt.h, gt.w);
    let prev = Tensor::new(gt.past(&gt.observed), &[n, h, wd]);
    let warped = warp(&prev, &pred.flow().reshape(&[n, 2, h, wd]))?;
    let score = warped.mul(&pred.observed().reshape(&[n, h, wd])).clamp(w.eps, 1.0 - w.eps);
    let target = gt.future_observed();
    let mut loss = Tensor::scalar(T::zero());
    if w.ce > 0.0 {
        loss = loss.add(&bce(&score, &target, w.eps)?.mul_scalar(w.ce));
    }
    if w.focal > 0.0 {
        loss = loss.add(&focal(&score, &target, w.alpha, w.gamma, w.eps)?.mul_scalar(w.focal));
    }
    Ok(loss)
}

/// Closed-form KL(future || present) between diagonal Gaussians, summed over
/// channels, averaged over pixels and then over scales.
pub fn kl_loss<T: Float>(present: &[Gaussian<T>], future: &[Gaussian<T>]) -> Result<Tensor<T>> {
    if present.len() != future.len() || present.is_empty() {
        return Err(Error::Shape(format!("{} present vs {} future distributions", present.len(), future.len())));
    }
    let mut total = Tensor::scalar(T::zero());
    for (p, q) in present.iter().zip(future) {
        if p.mu.shape() != q.mu.shape() {
            return Err(Error::Shape(format!("latent shapes {:?} vs {:?}", p.mu.shape(), q.mu.shape())));
        }
        let diff = q.mu.sub(&p.mu);
        let kl = p
            .logvar
            .sub(&q.logvar)
            .add(&q.logvar.exp().add(&diff.sqr()).div(&p.logvar.exp()))
            .add_scalar(-1.0)
            .mul_scalar(0.5);
        let channels = p.mu.dim(1);
        total = total.add(&kl.mean_all().mul_scalar(channels as f64));
    }
    Ok(total.mul_scalar(1.0 / present.len() as f64))
}

/// Full objective for one batch: the differentiable total and its breakdown.
/// A latent without future distributions contributes no KL term.
pub fn compute_losses<T: Float>(
    pred: &WaypointPredictions<T>,
    gt: &Targets<T>,
    latent: Option<&LatentOutput<T>>,
    w: &LossWeights,
) -> Result<(Tensor<T>, LossBreakdown)> {
    let occ = occupancy_loss(pred, gt, w)?;
    let flow = flow_loss(pred, gt, w)?;
    let traced = if w.traced > 0.0 { traced_loss(pred, gt, w)? } else { Tensor::scalar(T::zero()) };
    let prob = match latent {
        Some(LatentOutput { present, future: Some(future) }) if w.prob > 0.0 => kl_loss(present, future)?,
        _ => Tensor::scalar(T::zero()),
    };
    let val = |t: &Tensor<T>| t.item().to_f64().unwrap_or(f64::NAN);
    let parts = LossParts { occ: val(&occ), flow: val(&flow), traced: val(&traced), prob: val(&prob) };
    let breakdown = total_loss(parts, w)?;
    let total = occ
        .mul_scalar(w.occ)
        .add(&flow.mul_scalar(w.flow))
        .add(&traced.mul_scalar(w.traced))
        .add(&prob.mul_scalar(w.prob));
    Ok((total, breakdown))
}
