use super::{Float, Tensor};

impl<T: Float> Tensor<T> {
    pub fn sum_all(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::custom(vec![s], &[], vec![self.clone()], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.numel().max(1);
        self.sum_all().mul_scalar(1.0 / n as f64)
    }

    /// Sum over `axis`; the axis is kept with extent 1 when `keepdim`.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Tensor<T> {
        let shape = self.shape().to_vec();
        assert!(axis < shape.len(), "sum_axis: axis {axis} out of range for {shape:?}");
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for k in 0..n {
                let src = &x[(o * n + k) * inner..(o * n + k + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
            }
        }
        let mut oshape = shape.clone();
        if keepdim {
            oshape[axis] = 1;
        } else {
            oshape.remove(axis);
        }
        Tensor::custom(out, &oshape, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                let src = &g[o * inner..(o + 1) * inner];
                for k in 0..n {
                    gx[(o * n + k) * inner..(o * n + k + 1) * inner].copy_from_slice(src);
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Tensor<T> {
        let n = self.shape()[axis].max(1);
        self.sum_axis(axis, keepdim).mul_scalar(1.0 / n as f64)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor<T> {
        if self.shape() == shape {
            return self.clone();
        }
        self.add(&Tensor::zeros(shape))
    }
}
