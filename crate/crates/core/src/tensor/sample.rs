use super::{Float, Tensor};

impl<T: Float> Tensor<T> {
    /// Repeats every element `k` times along `axis` (nearest-neighbour
    /// upsampling along that axis).
    pub fn repeat_interleave(&self, axis: usize, k: usize) -> Tensor<T> {
        assert!(k >= 1, "repeat factor must be positive");
        if k == 1 {
            return self.clone();
        }
        let shape = self.shape().to_vec();
        let outer: usize = shape[..=axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = Vec::with_capacity(self.numel() * k);
        for o in 0..outer {
            let row = &x[o * inner..(o + 1) * inner];
            for _ in 0..k {
                out.extend_from_slice(row);
            }
        }
        let mut oshape = shape;
        oshape[axis] *= k;
        Tensor::custom(out, &oshape, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); outer * inner];
            for o in 0..outer {
                let dst = &mut gx[o * inner..(o + 1) * inner];
                for r in 0..k {
                    let src = &g[(o * k + r) * inner..(o * k + r + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Nearest-neighbour upsampling of the two trailing (H, W) axes.
    pub fn upsample_nearest(&self, factor: usize) -> Tensor<T> {
        let r = self.rank();
        assert!(r >= 2, "upsample_nearest needs rank >= 2");
        self.repeat_interleave(r - 2, factor).repeat_interleave(r - 1, factor)
    }

    /// Non-overlapping `k×k` average pooling over the two trailing axes.
    pub fn avg_pool(&self, k: usize) -> Tensor<T> {
        let shape = self.shape().to_vec();
        let r = shape.len();
        assert!(r >= 2, "avg_pool needs rank >= 2");
        let (h, w) = (shape[r - 2], shape[r - 1]);
        assert!(h % k == 0 && w % k == 0, "avg_pool: {h}x{w} not divisible by {k}");
        let (oh, ow) = (h / k, w / k);
        let planes: usize = shape[..r - 2].iter().product();
        let scale = T::cast(1.0 / (k * k) as f64);
        let x = self.data();
        let mut out = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            for i in 0..h {
                for j in 0..w {
                    out[(p * oh + i / k) * ow + j / k] += x[(p * h + i) * w + j] * scale;
                }
            }
        }
        let mut oshape = shape;
        oshape[r - 2] = oh;
        oshape[r - 1] = ow;
        Tensor::custom(out, &oshape, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                for i in 0..h {
                    for j in 0..w {
                        gx[(p * h + i) * w + j] = g[(p * oh + i / k) * ow + j / k] * scale;
                    }
                }
            }
            vec![Some(gx)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;

    #[test]
    fn upsample_values() {
        let x = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 4.0], &[1, 2, 2]);
        let y = x.upsample_nearest(2);
        assert_eq!(y.shape(), &[1, 4, 4]);
        assert_eq!(&y.data()[..8], &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn pool_inverts_upsample() {
        let x = Tensor::<f64>::new(rand_vec(18, 1), &[2, 3, 3]);
        let y = x.upsample_nearest(2).avg_pool(2);
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_grads() {
        check_op(&[2, 3, 2], 51, |x| x.upsample_nearest(2));
        check_op(&[1, 2, 3, 2, 2], 52, |x| x.repeat_interleave(2, 3));
        check_op(&[2, 4, 6], 53, |x| x.avg_pool(2));
    }
}
