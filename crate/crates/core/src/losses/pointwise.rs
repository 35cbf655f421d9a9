use crate::tensor::{Float, Tensor};
use crate::{Error, Result};

fn check_len<T: Float>(p: &Tensor<T>, y: &[T], what: &str) -> Result<()> {
    if p.numel() != y.len() {
        return Err(Error::Shape(format!("{what}: {} predictions vs {} targets", p.numel(), y.len())));
    }
    Ok(())
}

/// Mean focal loss of probabilities `p` against targets `y`; `p` is clamped
/// to `[eps, 1 - eps]` (zero gradient outside).
pub fn focal<T: Float>(p: &Tensor<T>, y: &[T], alpha: f64, gamma: f64, eps: f64) -> Result<Tensor<T>> {
    check_len(p, y, "focal")?;
    let n = y.len().max(1) as f64;
    let (a, g, e) = (T::cast(alpha), T::cast(gamma), T::cast(eps));
    let one = T::one();
    let clamp = |v: T| v.max(e).min(one - e);
    let pd = p.data_rc();
    let mut total = T::zero();
    for (&pv, &yv) in pd.iter().zip(y) {
        let q = clamp(pv);
        total -= yv * a * (one - q).powf(g) * q.ln() + (one - yv) * (one - a) * q.powf(g) * (one - q).ln();
    }
    let yv = y.to_vec();
    let inv_n = T::cast(1.0 / n);
    Ok(Tensor::custom(vec![total * inv_n], &[], vec![p.clone()], move |go, _| {
        let s = go[0] * inv_n;
        let grad = pd
            .iter()
            .zip(&yv)
            .map(|(&pv, &t)| {
                if pv < e || pv > one - e {
                    return T::zero();
                }
                let q = pv;
                let pos = t * a * (-g * (one - q).powf(g - one) * q.ln() + (one - q).powf(g) / q);
                let neg = (one - t) * (one - a) * (g * q.powf(g - one) * (one - q).ln() - q.powf(g) / (one - q));
                -(pos + neg) * s
            })
            .collect();
        vec![Some(grad)]
    }))
}

/// Mean binary cross-entropy with the same clamping as [`focal`].
pub fn bce<T: Float>(p: &Tensor<T>, y: &[T], eps: f64) -> Result<Tensor<T>> {
    focal(p, y, 0.5, 0.0, eps).map(|l| l.mul_scalar(2.0))
}

/// `sum(smoothL1(pred - gt) * w) / max(sum(w_cells), 1)` where `w` has one
/// weight per cell and `pred`/`gt` carry `k` components per cell laid out as
/// `[N, k, cells]`.
pub fn weighted_smooth_l1<T: Float>(pred: &Tensor<T>, gt: &[T], w: &[T], k: usize, beta: f64) -> Result<Tensor<T>> {
    check_len(pred, gt, "flow")?;
    if k == 0 || w.len() * k != gt.len() {
        return Err(Error::Shape(format!("flow weights {} do not match {} values", w.len(), gt.len())));
    }
    let cells = w.len() / pred.dim(0).max(1);
    let denom = T::cast(w.iter().map(|v| v.to_f64().unwrap_or(0.0)).sum::<f64>().max(1.0));
    let b = T::cast(beta);
    let half = T::cast(0.5);
    let pd = pred.data_rc();
    let weight_of = move |i: usize| {
        let n = i / (k * cells);
        let c = i % cells;
        n * cells + c
    };
    let mut total = T::zero();
    for (i, (&p, &g)) in pd.iter().zip(gt).enumerate() {
        let wv = w[weight_of(i)];
        if wv == T::zero() {
            continue;
        }
        let d = (p - g).abs();
        total += wv * if d < b { half * d * d / b } else { d - half * b };
    }
    let (gt, w) = (gt.to_vec(), w.to_vec());
    Ok(Tensor::custom(vec![total / denom], &[], vec![pred.clone()], move |go, _| {
        let s = go[0] / denom;
        let grad = pd
            .iter()
            .zip(&gt)
            .enumerate()
            .map(|(i, (&p, &g))| {
                let wv = w[weight_of(i)];
                let d = p - g;
                let dd = if d.abs() < b { d / b } else { d.signum() };
                wv * dd * s
            })
            .collect();
        vec![Some(grad)]
    }))
}
