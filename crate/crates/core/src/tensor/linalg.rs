use super::{gemm, Float, Mat, Tensor};

impl<T: Float> Tensor<T> {
    /// Batched matrix product `[..., m, k] x [..., k, n]`. The right operand
    /// may also be a plain `[k, n]` matrix shared across the batch.
    pub fn matmul(&self, other: &Tensor<T>) -> Tensor<T> {
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul needs rank >= 2");
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        assert_eq!(k, k2, "matmul inner dims {sa:?} x {sb:?}");
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared_b = sb.len() == 2;
        if !shared_b {
            assert_eq!(&sa[..sa.len() - 2], &sb[..sb.len() - 2], "matmul batch dims");
        }
        let a = self.data_rc();
        let b = other.data_rc();
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let bo = if shared_b { 0 } else { i * k * n };
            gemm(
                Mat::new(&a[i * m * k..], m, k),
                Mat::new(&b[bo..], k, n),
                &mut out[i * m * n..(i + 1) * m * n],
                T::zero(),
            );
        }
        let mut oshape = sa[..sa.len() - 2].to_vec();
        oshape.extend([m, n]);
        Tensor::custom(out, &oshape, vec![self.clone(), other.clone()], move |g, needs| {
            let mut ga = needs[0].then(|| vec![T::zero(); a.len()]);
            let mut gb = needs[1].then(|| vec![T::zero(); b.len()]);
            for i in 0..batch {
                let gi = Mat::new(&g[i * m * n..], m, n);
                let bo = if shared_b { 0 } else { i * k * n };
                if let Some(ga) = ga.as_mut() {
                    gemm(gi, Mat::new(&b[bo..], k, n).t(), &mut ga[i * m * k..(i + 1) * m * k], T::zero());
                }
                if let Some(gb) = gb.as_mut() {
                    gemm(Mat::new(&a[i * m * k..], m, k).t(), gi, &mut gb[bo..bo + k * n], T::one());
                }
            }
            vec![ga, gb]
        })
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor<T> {
        let c = *self.shape().last().expect("softmax of scalar");
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        for (xr, yr) in x.chunks(c).zip(y.chunks_mut(c)) {
            let mx = xr.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (o, &v) in yr.iter_mut().zip(xr) {
                *o = (v - mx).exp();
                s += *o;
            }
            yr.iter_mut().for_each(|o| *o /= s);
        }
        let yr = std::rc::Rc::new(y);
        let yc = std::rc::Rc::clone(&yr);
        Tensor::with_shared(yr, self.shape().to_vec(), vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); g.len()];
            for ((gr, yrow), out) in g.chunks(c).zip(yc.chunks(c)).zip(gx.chunks_mut(c)) {
                let dot: T = gr.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yrow) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(gx)]
        })
    }
}
