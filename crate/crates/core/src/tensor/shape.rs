use super::{numel, Float, Tensor};

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` laid out with `src_strides` into a contiguous buffer of
/// `shape` (row-major).
fn gather_strided<T: Float>(src: &[T], shape: &[usize], src_strides: &[usize]) -> Vec<T> {
    let n = numel(shape);
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let r = shape.len();
    if r == 0 {
        out.push(src[0]);
        return out;
    }
    let inner = shape[r - 1];
    let is = src_strides[r - 1];
    let mut idx = vec![0usize; r - 1];
    let mut base = 0usize;
    for _ in 0..n / inner {
        let mut p = base;
        for _ in 0..inner {
            out.push(src[p]);
            p += is;
        }
        for d in (0..r - 1).rev() {
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            base -= src_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
    out
}

impl<T: Float> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        assert_eq!(
            numel(shape),
            self.numel(),
            "reshape {:?} -> {:?} changes element count",
            self.shape(),
            shape
        );
        Tensor::with_shared(self.data_rc(), shape.to_vec(), vec![self.clone()], |g, _| {
            vec![Some(g.to_vec())]
        })
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Tensor<T> {
        let shape = self.shape();
        assert_eq!(perm.len(), shape.len(), "permute rank mismatch");
        let st = strides_of(shape);
        let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let ostr: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
        let out = gather_strided(self.data(), &oshape, &ostr);
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let oshape2 = oshape.clone();
        Tensor::custom(out, &oshape, vec![self.clone()], move |g, _| {
            let gs = strides_of(&oshape2);
            let ishape: Vec<usize> = inv.iter().map(|&p| oshape2[p]).collect();
            let istr: Vec<usize> = inv.iter().map(|&p| gs[p]).collect();
            vec![Some(gather_strided(g, &ishape, &istr))]
        })
    }

    pub fn transpose(&self, a: usize, b: usize) -> Tensor<T> {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    pub fn unsqueeze(&self, axis: usize) -> Tensor<T> {
        let mut s = self.shape().to_vec();
        s.insert(axis, 1);
        self.reshape(&s)
    }

    pub fn squeeze(&self, axis: usize) -> Tensor<T> {
        let mut s = self.shape().to_vec();
        assert_eq!(s[axis], 1, "squeeze of non-unit axis");
        s.remove(axis);
        self.reshape(&s)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor<T> {
        let shape = self.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range on {shape:?}");
        if start == 0 && len == shape[axis] {
            return self.clone();
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        Tensor::custom(out, &oshape, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                gx[(o * n + start) * inner..(o * n + start + len) * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        })
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn cat(parts: &[Tensor<T>], axis: usize) -> Tensor<T> {
        assert!(!parts.is_empty(), "cat of nothing");
        if parts.len() == 1 {
            return parts[0].clone();
        }
        let base = parts[0].shape().to_vec();
        for p in parts {
            assert_eq!(p.rank(), base.len(), "cat rank mismatch");
            for (d, (&a, &b)) in p.shape().iter().zip(&base).enumerate() {
                assert!(d == axis || a == b, "cat shape mismatch {:?} vs {:?}", p.shape(), base);
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &n) in parts.iter().zip(&sizes) {
                out.extend_from_slice(&p.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut oshape = base;
        oshape[axis] = total;
        let sizes2 = sizes.clone();
        Tensor::custom(out, &oshape, parts.to_vec(), move |g, needs| {
            let mut grads: Vec<Option<Vec<T>>> = sizes2
                .iter()
                .zip(needs)
                .map(|(&n, &need)| need.then(|| Vec::with_capacity(outer * n * inner)))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &n) in grads.iter_mut().zip(&sizes2) {
                    if let Some(gp) = gp {
                        gp.extend_from_slice(&g[off..off + n * inner]);
                    }
                    off += n * inner;
                }
            }
            grads
        })
    }

    /// Reverses the listed axes.
    pub fn flip(&self, axes: &[usize]) -> Tensor<T> {
        let shape = self.shape().to_vec();
        let idx = flip_index(&shape, axes);
        let out: Vec<T> = idx.iter().map(|&i| self.data()[i]).collect();
        Tensor::custom(out, &shape, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); g.len()];
            for (o, &i) in idx.iter().enumerate() {
                gx[i] = g[o];
            }
            vec![Some(gx)]
        })
    }

    /// Cyclic shift by `shift` along `axis` (torch.roll semantics).
    pub fn roll(&self, axis: usize, shift: isize) -> Tensor<T> {
        let shape = self.shape().to_vec();
        let n = shape[axis];
        if n == 0 || shift.rem_euclid(n as isize) == 0 {
            return self.clone();
        }
        let s = shift.rem_euclid(n as isize) as usize;
        // out[i] = in[(i - s) mod n]
        let a = self.narrow(axis, n - s, s);
        let b = self.narrow(axis, 0, n - s);
        Tensor::cat(&[a, b], axis)
    }

    /// Selects rows of axis 0.
    pub fn index_select0(&self, indices: &[usize]) -> Tensor<T> {
        let shape = self.shape().to_vec();
        let row: usize = shape[1..].iter().product();
        let x = self.data();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            assert!(i < shape[0], "index_select0 index {i} out of range");
            out.extend_from_slice(&x[i * row..(i + 1) * row]);
        }
        let mut oshape = shape.clone();
        oshape[0] = indices.len();
        let idx = indices.to_vec();
        let nrows = shape[0];
        Tensor::custom(out, &oshape, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); nrows * row];
            for (k, &i) in idx.iter().enumerate() {
                gx[i * row..(i + 1) * row]
                    .iter_mut()
                    .zip(&g[k * row..(k + 1) * row])
                    .for_each(|(a, b)| *a += *b);
            }
            vec![Some(gx)]
        })
    }
}

fn flip_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let st = strides_of(shape);
    let n = numel(shape);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let mut src = 0;
        for d in 0..shape.len() {
            let i = if axes.contains(&d) { shape[d] - 1 - idx[d] } else { idx[d] };
            src += i * st[d];
        }
        out.push(src);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;

    #[test]
    fn permute_values() {
        let x = Tensor::<f64>::new((0..6).map(f64::from).collect(), &[2, 3]);
        let y = x.transpose(0, 1);
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn roll_matches_torch() {
        let x = Tensor::<f64>::new((0..5).map(f64::from).collect(), &[5]);
        assert_eq!(x.roll(0, 2).data(), &[3.0, 4.0, 0.0, 1.0, 2.0]);
        assert_eq!(x.roll(0, -1).data(), &[1.0, 2.0, 3.0, 4.0, 0.0]);
    }

    #[test]
    fn cat_and_narrow_invert() {
        let a = Tensor::<f64>::new(rand_vec(12, 1), &[2, 2, 3]);
        let b = Tensor::<f64>::new(rand_vec(6, 2), &[2, 1, 3]);
        let c = Tensor::cat(&[a.clone(), b.clone()], 1);
        assert_eq!(c.shape(), &[2, 3, 3]);
        assert_eq!(c.narrow(1, 0, 2).data(), a.data());
        assert_eq!(c.narrow(1, 2, 1).data(), b.data());
    }

    #[test]
    fn shape_grads() {
        check_op(&[2, 3, 4], 21, |x| x.permute(&[2, 0, 1]));
        check_op(&[2, 5, 3], 22, |x| x.narrow(1, 1, 3));
        check_op(&[2, 3, 2], 23, |x| Tensor::cat(&[x.narrow(1, 1, 2), x.sqr()], 1));
        check_op(&[3, 4], 24, |x| x.flip(&[0, 1]).roll(1, 1));
        check_op(&[4, 2], 25, |x| x.index_select0(&[3, 0, 3, 1]));
    }

    #[test]
    fn flip_is_involution() {
        let x = Tensor::<f64>::new(rand_vec(24, 3), &[2, 3, 4]);
        assert_eq!(x.flip(&[1, 2]).flip(&[1, 2]).data(), x.data());
    }
}
