use super::{Float, Tensor};

/// Normalizes `rows` slices of length `len` whose affine parameters are
/// indexed by `chan(row, i)`; shared by group and layer norm.
struct NormPlan {
    rows: usize,
    len: usize,
}

fn normalize<T: Float>(x: &[T], plan: &NormPlan, eps: f64) -> (Vec<T>, Vec<T>) {
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); plan.rows];
    let inv_n = T::cast(1.0 / plan.len as f64);
    for r in 0..plan.rows {
        let xs = &x[r * plan.len..(r + 1) * plan.len];
        let mean = xs.iter().copied().sum::<T>() * inv_n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let rs = T::one() / (var + T::cast(eps)).sqrt();
        rstd[r] = rs;
        for (o, &v) in xhat[r * plan.len..(r + 1) * plan.len].iter_mut().zip(xs) {
            *o = (v - mean) * rs;
        }
    }
    (xhat, rstd)
}

/// dx for y = xhat given dxhat, per normalized row.
fn normalize_backward<T: Float>(dxhat: &[T], xhat: &[T], rstd: &[T], plan: &NormPlan) -> Vec<T> {
    let mut dx = vec![T::zero(); dxhat.len()];
    let inv_n = T::cast(1.0 / plan.len as f64);
    for r in 0..plan.rows {
        let s = r * plan.len..(r + 1) * plan.len;
        let (dh, xh) = (&dxhat[s.clone()], &xhat[s.clone()]);
        let m1 = dh.iter().copied().sum::<T>() * inv_n;
        let m2 = dh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
        for ((o, &d), &h) in dx[s].iter_mut().zip(dh).zip(xh) {
            *o = rstd[r] * (d - m1 - h * m2);
        }
    }
    dx
}

impl<T: Float> Tensor<T> {
    /// Group normalization over `[B, C, ...]` with per-channel affine.
    pub fn group_norm(&self, groups: usize, weight: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Tensor<T> {
        let shape = self.shape().to_vec();
        let (b, c) = (shape[0], shape[1]);
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels not divisible by {groups}");
        assert_eq!(weight.numel(), c);
        assert_eq!(bias.numel(), c);
        let spatial: usize = shape[2..].iter().product();
        let cpg = c / groups;
        let plan = NormPlan { rows: b * groups, len: cpg * spatial };
        let (xhat, rstd) = normalize(self.data(), &plan, eps);
        let (w, bi) = (weight.data_rc(), bias.data_rc());
        let mut y = vec![T::zero(); xhat.len()];
        for bc in 0..b * c {
            let ch = bc % c;
            let s = bc * spatial..(bc + 1) * spatial;
            for (o, &h) in y[s.clone()].iter_mut().zip(&xhat[s]) {
                *o = h * w[ch] + bi[ch];
            }
        }
        Tensor::custom(y, &shape, vec![self.clone(), weight.clone(), bias.clone()], move |g, needs| {
            let mut gw = needs[1].then(|| vec![T::zero(); c]);
            let mut gb = needs[2].then(|| vec![T::zero(); c]);
            let mut dxhat = needs[0].then(|| vec![T::zero(); g.len()]);
            for bc in 0..b * c {
                let ch = bc % c;
                let s = bc * spatial..(bc + 1) * spatial;
                let (gs, hs) = (&g[s.clone()], &xhat[s.clone()]);
                if let Some(gw) = gw.as_mut() {
                    gw[ch] += gs.iter().zip(hs).map(|(&a, &b)| a * b).sum::<T>();
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ch] += gs.iter().copied().sum::<T>();
                }
                if let Some(d) = dxhat.as_mut() {
                    for (o, &gv) in d[s].iter_mut().zip(gs) {
                        *o = gv * w[ch];
                    }
                }
            }
            let gx = dxhat.map(|d| normalize_backward(&d, &xhat, &rstd, &plan));
            vec![gx, gw, gb]
        })
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, weight: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Tensor<T> {
        let shape = self.shape().to_vec();
        let c = *shape.last().expect("layer_norm of scalar");
        assert_eq!(weight.numel(), c);
        assert_eq!(bias.numel(), c);
        let plan = NormPlan { rows: self.numel() / c, len: c };
        let (xhat, rstd) = normalize(self.data(), &plan, eps);
        let (w, bi) = (weight.data_rc(), bias.data_rc());
        let y: Vec<T> = xhat.iter().enumerate().map(|(i, &h)| h * w[i % c] + bi[i % c]).collect();
        Tensor::custom(y, &shape, vec![self.clone(), weight.clone(), bias.clone()], move |g, needs| {
            let mut gw = needs[1].then(|| vec![T::zero(); c]);
            let mut gb = needs[2].then(|| vec![T::zero(); c]);
            for (i, (&gv, &h)) in g.iter().zip(xhat.iter()).enumerate() {
                if let Some(gw) = gw.as_mut() {
                    gw[i % c] += gv * h;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[i % c] += gv;
                }
            }
            let gx = needs[0].then(|| {
                let d: Vec<T> = g.iter().enumerate().map(|(i, &gv)| gv * w[i % c]).collect();
                normalize_backward(&d, &xhat, &rstd, &plan)
            });
            vec![gx, gw, gb]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;

    #[test]
    fn group_norm_normalizes() {
        let x = Tensor::<f64>::new(rand_vec(2 * 4 * 9, 1), &[2, 4, 3, 3]);
        let y = x.group_norm(2, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), 1e-12);
        let chunk = &y.data()[..18];
        let m: f64 = chunk.iter().sum::<f64>() / 18.0;
        let v: f64 = chunk.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 18.0;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn norm_grads() {
        let w = Tensor::<f64>::new(rand_vec(4, 2), &[4]);
        let b = Tensor::<f64>::new(rand_vec(4, 3), &[4]);
        check_op(&[2, 4, 3], 41, |x| x.group_norm(2, &w, &b, 1e-5));
        check_op(&[4], 42, |w| {
            Tensor::new(rand_vec(24, 9), &[2, 4, 3]).group_norm(4, w, &b, 1e-5)
        });
        check_op(&[3, 4], 43, |x| x.layer_norm(&w, &b, 1e-5));
        check_op(&[4], 44, |b| Tensor::new(rand_vec(12, 8), &[3, 4]).layer_norm(&w, b, 1e-5));
    }
}
