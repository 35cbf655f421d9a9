//! Grouped, strided, dilated 3-D convolution and its transpose via
//! im2col + GEMM. 2-D convolution is the `T = 1` special case.

use super::{gemm, Float, Mat, Tensor};

/// Kernel geometry in (T, H, W) order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub dilation: [usize; 3],
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(kernel: [usize; 3]) -> Self {
        Self { kernel, stride: [1; 3], padding: [0; 3], dilation: [1; 3], groups: 1 }
    }

    /// Spatial-only 2-D geometry (`kT = 1`).
    pub fn planar(k: usize, stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        Self {
            kernel: [1, k, k],
            stride: [1, stride, stride],
            padding: [0, padding, padding],
            dilation: [1, dilation, dilation],
            groups,
        }
    }

    pub fn with_stride(mut self, s: [usize; 3]) -> Self {
        self.stride = s;
        self
    }

    pub fn with_padding(mut self, p: [usize; 3]) -> Self {
        self.padding = p;
        self
    }

    pub fn with_dilation(mut self, d: [usize; 3]) -> Self {
        self.dilation = d;
        self
    }

    pub fn with_groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    /// "Same" padding for odd kernels at stride 1.
    pub fn same(mut self) -> Self {
        for i in 0..3 {
            self.padding[i] = self.dilation[i] * (self.kernel[i] - 1) / 2;
        }
        self
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output extents of a forward convolution, or `None` if any would be < 1.
    pub fn output_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for i in 0..3 {
            out[i] = conv_out_dim(input[i], self.kernel[i], self.stride[i], self.padding[i], self.dilation[i])?;
        }
        Some(out)
    }

    /// Output extents of the transposed convolution.
    pub fn transposed_output_dims(&self, input: [usize; 3], output_padding: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for i in 0..3 {
            let full = (input[i].checked_sub(1)?) * self.stride[i]
                + self.dilation[i] * (self.kernel[i] - 1)
                + 1
                + output_padding[i];
            out[i] = full.checked_sub(2 * self.padding[i]).filter(|&v| v > 0)?;
        }
        Some(out)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.padding == [0; 3]
    }
}

/// Forward convolution output extent along one axis.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize, dil: usize) -> Option<usize> {
    let eff = dil * (k - 1) + 1;
    let padded = input + 2 * pad;
    if padded < eff || stride == 0 {
        None
    } else {
        Some((padded - eff) / stride + 1)
    }
}

/// One unfolding problem: `c` channels of extent `inp` producing `out`.
struct Unfold {
    c: usize,
    inp: [usize; 3],
    out: [usize; 3],
    geo: ConvGeometry,
}

impl Unfold {
    fn vin(&self) -> usize {
        self.inp.iter().product()
    }

    fn lout(&self) -> usize {
        self.out.iter().product()
    }

    fn rows(&self) -> usize {
        self.c * self.geo.kernel_volume()
    }

    /// Valid output range `[lo, hi)` along W for kernel tap offset `off`.
    #[inline]
    fn w_range(&self, off: isize) -> (usize, usize) {
        let s = self.geo.stride[2] as isize;
        let (i2, o2) = (self.inp[2] as isize, self.out[2] as isize);
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = if i2 - off <= 0 { 0 } else { ((i2 - off + s - 1) / s).min(o2) };
        (lo.min(o2) as usize, hi.max(lo.min(o2)) as usize)
    }

    /// Visits every (column-row slice, source-row) pair; `f(dst_range,
    /// src_offset_or_none, w_lo, w_hi, w_off)`.
    #[inline]
    fn walk(&self, mut f: impl FnMut(usize, Option<usize>, usize, usize, isize)) {
        let g = &self.geo;
        let [k0, k1, k2] = g.kernel;
        let [i0, i1, i2] = self.inp;
        let [o0, o1, o2] = self.out;
        let l = self.lout();
        for ci in 0..self.c {
            for kt in 0..k0 {
                for kh in 0..k1 {
                    for kw in 0..k2 {
                        let row = ((ci * k0 + kt) * k1 + kh) * k2 + kw;
                        let woff = (kw * g.dilation[2]) as isize - g.padding[2] as isize;
                        let (lo, hi) = self.w_range(woff);
                        for ot in 0..o0 {
                            let it = (ot * g.stride[0] + kt * g.dilation[0]) as isize - g.padding[0] as isize;
                            for oh in 0..o1 {
                                let dst = row * l + (ot * o1 + oh) * o2;
                                let ih = (oh * g.stride[1] + kh * g.dilation[1]) as isize - g.padding[1] as isize;
                                if it < 0 || it >= i0 as isize || ih < 0 || ih >= i1 as isize {
                                    f(dst, None, lo, hi, woff);
                                } else {
                                    let src = ((ci * i0 + it as usize) * i1 + ih as usize) * i2;
                                    f(dst, Some(src), lo, hi, woff);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Float>(&self, src: &[T], col: &mut [T]) {
        let o2 = self.out[2];
        let s2 = self.geo.stride[2];
        self.walk(|dst, src_off, lo, hi, woff| {
            let d = &mut col[dst..dst + o2];
            match src_off {
                None => d.fill(T::zero()),
                Some(so) => {
                    d[..lo].fill(T::zero());
                    d[hi..].fill(T::zero());
                    if lo == hi {
                    } else if s2 == 1 {
                        let a = (so as isize + lo as isize + woff) as usize;
                        d[lo..hi].copy_from_slice(&src[a..a + (hi - lo)]);
                    } else {
                        for ow in lo..hi {
                            d[ow] = src[(so as isize + (ow * s2) as isize + woff) as usize];
                        }
                    }
                }
            }
        });
    }

    fn col2im<T: Float>(&self, col: &[T], dst_vol: &mut [T]) {
        let o2 = self.out[2];
        let s2 = self.geo.stride[2];
        self.walk(|dst, src_off, lo, hi, woff| {
            let Some(so) = src_off else { return };
            if lo == hi {
                return;
            }
            let c = &col[dst..dst + o2];
            if s2 == 1 {
                let a = (so as isize + lo as isize + woff) as usize;
                for (v, &x) in dst_vol[a..a + (hi - lo)].iter_mut().zip(&c[lo..hi]) {
                    *v += x;
                }
            } else {
                for ow in lo..hi {
                    dst_vol[(so as isize + (ow * s2) as isize + woff) as usize] += c[ow];
                }
            }
        });
    }
}

fn dims5(t: &[usize], what: &str) -> [usize; 5] {
    assert_eq!(t.len(), 5, "{what}: expected rank 5, got {t:?}");
    [t[0], t[1], t[2], t[3], t[4]]
}

impl<T: Float> Tensor<T> {
    /// 3-D convolution. `self`: `[B, Ci, T, H, W]`, `weight`:
    /// `[Co, Ci/groups, kT, kH, kW]`, `bias`: `[Co]`.
    pub fn conv3d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, geo: &ConvGeometry) -> Tensor<T> {
        let [b, ci, t, h, w] = dims5(self.shape(), "conv3d input");
        let [co, cig, k0, k1, k2] = dims5(weight.shape(), "conv3d weight");
        let groups = geo.groups;
        assert!(ci % groups == 0 && co % groups == 0, "conv3d: channels not divisible by groups");
        assert_eq!(cig, ci / groups, "conv3d: weight expects {} input channels per group", cig);
        assert_eq!([k0, k1, k2], geo.kernel, "conv3d: weight kernel mismatch");
        let out = geo
            .output_dims([t, h, w])
            .unwrap_or_else(|| panic!("conv3d: input {:?} too small for {:?}", [t, h, w], geo));
        let cog = co / groups;
        let uf = Unfold { c: cig, inp: [t, h, w], out, geo: *geo };
        let (vin, l, kk) = (uf.vin(), uf.lout(), uf.rows());
        let pointwise = geo.is_pointwise();
        let x = self.data_rc();
        let wt = weight.data_rc();
        let mut y = vec![T::zero(); b * co * l];
        let mut col = if pointwise { Vec::new() } else { vec![T::zero(); kk * l] };
        for bi in 0..b {
            for g in 0..groups {
                let xs = &x[(bi * ci + g * cig) * vin..(bi * ci + (g + 1) * cig) * vin];
                let cm: &[T] = if pointwise {
                    xs
                } else {
                    uf.im2col(xs, &mut col);
                    &col
                };
                let ys = &mut y[(bi * co + g * cog) * l..(bi * co + (g + 1) * cog) * l];
                gemm(Mat::new(&wt[g * cog * kk..], cog, kk), Mat::new(cm, kk, l), ys, T::zero());
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(bs) = bias {
            assert_eq!(bs.numel(), co, "conv3d bias size");
            let bd = bs.data();
            for (i, v) in y.iter_mut().enumerate() {
                *v += bd[(i / l) % co];
            }
            parents.push(bs.clone());
        }
        let oshape = [b, co, out[0], out[1], out[2]];
        Tensor::custom(y, &oshape, parents, move |gout, needs| {
            let mut gx = needs[0].then(|| vec![T::zero(); x.len()]);
            let mut gw = needs[1].then(|| vec![T::zero(); wt.len()]);
            let mut col = vec![T::zero(); if pointwise { 0 } else { kk * l }];
            let mut dcol = vec![T::zero(); kk * l];
            for bi in 0..b {
                for g in 0..groups {
                    let gs = &gout[(bi * co + g * cog) * l..(bi * co + (g + 1) * cog) * l];
                    let xr = (bi * ci + g * cig) * vin..(bi * ci + (g + 1) * cig) * vin;
                    if let Some(gw) = gw.as_mut() {
                        let cm: &[T] = if pointwise {
                            &x[xr.clone()]
                        } else {
                            uf.im2col(&x[xr.clone()], &mut col);
                            &col
                        };
                        gemm(Mat::new(gs, cog, l), Mat::new(cm, kk, l).t(), &mut gw[g * cog * kk..(g + 1) * cog * kk], T::one());
                    }
                    if let Some(gx) = gx.as_mut() {
                        let wg = Mat::new(&wt[g * cog * kk..], cog, kk).t();
                        if pointwise {
                            gemm(wg, Mat::new(gs, cog, l), &mut gx[xr], T::one());
                        } else {
                            gemm(wg, Mat::new(gs, cog, l), &mut dcol, T::zero());
                            uf.col2im(&dcol, &mut gx[xr]);
                        }
                    }
                }
            }
            let mut res = vec![gx, gw];
            if needs.len() > 2 {
                res.push(needs[2].then(|| {
                    let mut gb = vec![T::zero(); co];
                    for (i, &v) in gout.iter().enumerate() {
                        gb[(i / l) % co] += v;
                    }
                    gb
                }));
            }
            res
        })
    }

    /// Transposed 3-D convolution. `self`: `[B, Ci, T, H, W]`, `weight`:
    /// `[Ci, Co/groups, kT, kH, kW]`.
    pub fn conv_transpose3d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        geo: &ConvGeometry,
        output_padding: [usize; 3],
    ) -> Tensor<T> {
        let [b, ci, t, h, w] = dims5(self.shape(), "conv_transpose3d input");
        let [wci, cog, k0, k1, k2] = dims5(weight.shape(), "conv_transpose3d weight");
        let groups = geo.groups;
        assert_eq!(wci, ci, "conv_transpose3d: weight input channels");
        assert!(ci % groups == 0, "conv_transpose3d: channels not divisible by groups");
        assert_eq!([k0, k1, k2], geo.kernel);
        let out = geo
            .transposed_output_dims([t, h, w], output_padding)
            .unwrap_or_else(|| panic!("conv_transpose3d: degenerate output for {:?}", geo));
        let cig = ci / groups;
        let co = cog * groups;
        // the adjoint problem: a forward conv from `out` back to the input extents
        let uf = Unfold { c: cog, inp: out, out: [t, h, w], geo: *geo };
        assert_eq!(geo.output_dims(out), Some([t, h, w]), "conv_transpose3d: inconsistent geometry");
        let (vout, lin, kk) = (uf.vin(), uf.lout(), uf.rows());
        let x = self.data_rc();
        let wt = weight.data_rc();
        let mut y = vec![T::zero(); b * co * vout];
        let mut col = vec![T::zero(); kk * lin];
        for bi in 0..b {
            for g in 0..groups {
                let xs = &x[(bi * ci + g * cig) * lin..(bi * ci + (g + 1) * cig) * lin];
                gemm(Mat::new(&wt[g * cig * kk..], cig, kk).t(), Mat::new(xs, cig, lin), &mut col, T::zero());
                uf.col2im(&col, &mut y[(bi * co + g * cog) * vout..(bi * co + (g + 1) * cog) * vout]);
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(bs) = bias {
            assert_eq!(bs.numel(), co, "conv_transpose3d bias size");
            let bd = bs.data();
            for (i, v) in y.iter_mut().enumerate() {
                *v += bd[(i / vout) % co];
            }
            parents.push(bs.clone());
        }
        let oshape = [b, co, out[0], out[1], out[2]];
        Tensor::custom(y, &oshape, parents, move |gout, needs| {
            let mut gx = needs[0].then(|| vec![T::zero(); x.len()]);
            let mut gw = needs[1].then(|| vec![T::zero(); wt.len()]);
            let mut dcol = vec![T::zero(); kk * lin];
            for bi in 0..b {
                for g in 0..groups {
                    let gs = &gout[(bi * co + g * cog) * vout..(bi * co + (g + 1) * cog) * vout];
                    uf.im2col(gs, &mut dcol);
                    let xr = (bi * ci + g * cig) * lin..(bi * ci + (g + 1) * cig) * lin;
                    if let Some(gx) = gx.as_mut() {
                        gemm(Mat::new(&wt[g * cig * kk..], cig, kk), Mat::new(&dcol, kk, lin), &mut gx[xr.clone()], T::one());
                    }
                    if let Some(gw) = gw.as_mut() {
                        gemm(
                            Mat::new(&x[xr], cig, lin),
                            Mat::new(&dcol, kk, lin).t(),
                            &mut gw[g * cig * kk..(g + 1) * cig * kk],
                            T::one(),
                        );
                    }
                }
            }
            let mut res = vec![gx, gw];
            if needs.len() > 2 {
                res.push(needs[2].then(|| {
                    let mut gb = vec![T::zero(); co];
                    for (i, &v) in gout.iter().enumerate() {
                        gb[(i / vout) % co] += v;
                    }
                    gb
                }));
            }
            res
        })
    }

    /// 2-D convolution on `[B, Ci, H, W]` with weight `[Co, Ci/groups, kH, kW]`.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
        dilation: usize,
        groups: usize,
    ) -> Tensor<T> {
        let s = self.shape();
        assert_eq!(s.len(), 4, "conv2d input must be rank 4, got {s:?}");
        let ws = weight.shape();
        assert_eq!(ws.len(), 4, "conv2d weight must be rank 4");
        assert_eq!(ws[2], ws[3], "conv2d: square kernels only");
        let geo = ConvGeometry::planar(ws[2], stride, padding, dilation, groups);
        let x5 = self.reshape(&[s[0], s[1], 1, s[2], s[3]]);
        let w5 = weight.reshape(&[ws[0], ws[1], 1, ws[2], ws[3]]);
        let y = x5.conv3d(&w5, bias, &geo);
        let ys = y.shape().to_vec();
        y.reshape(&[ys[0], ys[1], ys[3], ys[4]])
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;

    /// Direct nested-loop reference convolution.
    fn conv3d_ref(x: &[f64], xs: [usize; 5], w: &[f64], ws: [usize; 5], geo: &ConvGeometry) -> (Vec<f64>, [usize; 3]) {
        let [b, ci, t, h, wd] = xs;
        let [co, cig, k0, k1, k2] = ws;
        let out = geo.output_dims([t, h, wd]).unwrap();
        let cog = co / geo.groups;
        let mut y = vec![0.0; b * co * out[0] * out[1] * out[2]];
        for bi in 0..b {
            for o in 0..co {
                let g = o / cog;
                for ot in 0..out[0] {
                    for oh in 0..out[1] {
                        for ow in 0..out[2] {
                            let mut acc = 0.0;
                            for c in 0..cig {
                                let cin = g * cig + c;
                                for a in 0..k0 {
                                    for bb in 0..k1 {
                                        for cc in 0..k2 {
                                            let it = (ot * geo.stride[0] + a * geo.dilation[0]) as isize - geo.padding[0] as isize;
                                            let ih = (oh * geo.stride[1] + bb * geo.dilation[1]) as isize - geo.padding[1] as isize;
                                            let iw = (ow * geo.stride[2] + cc * geo.dilation[2]) as isize - geo.padding[2] as isize;
                                            if it < 0 || ih < 0 || iw < 0 || it >= t as isize || ih >= h as isize || iw >= wd as isize {
                                                continue;
                                            }
                                            let xi = (((bi * ci + cin) * t + it as usize) * h + ih as usize) * wd + iw as usize;
                                            let wi = (((o * cig + c) * k0 + a) * k1 + bb) * k2 + cc;
                                            acc += x[xi] * w[wi];
                                        }
                                    }
                                }
                            }
                            y[(((bi * co + o) * out[0] + ot) * out[1] + oh) * out[2] + ow] = acc;
                        }
                    }
                }
            }
        }
        (y, out)
    }

    fn cases() -> Vec<([usize; 5], [usize; 5], ConvGeometry)> {
        vec![
            ([2, 4, 3, 5, 6], [6, 2, 3, 3, 3], ConvGeometry::new([3, 3, 3]).same().with_groups(2)),
            ([1, 3, 4, 7, 7], [2, 3, 3, 3, 3], ConvGeometry::new([3, 3, 3]).with_stride([2, 2, 2]).with_padding([1, 1, 1])),
            ([1, 2, 2, 9, 9], [4, 2, 1, 3, 3], ConvGeometry::new([1, 3, 3]).with_dilation([1, 3, 2]).with_padding([0, 3, 2])),
            ([2, 3, 1, 4, 4], [5, 3, 1, 1, 1], ConvGeometry::new([1, 1, 1])),
            ([1, 4, 5, 6, 5], [4, 1, 3, 3, 3], ConvGeometry::new([3, 3, 3]).with_dilation([2, 1, 1]).same().with_groups(4)),
            ([1, 2, 1, 2, 1], [2, 2, 3, 3, 3], ConvGeometry::new([3, 3, 3]).with_dilation([1, 2, 2]).with_padding([1, 2, 2])),
        ]
    }

    #[test]
    fn conv3d_matches_reference() {
        for (i, (xs, ws, geo)) in cases().into_iter().enumerate() {
            let x = rand_vec(xs.iter().product(), i as u64);
            let w = rand_vec(ws.iter().product(), 100 + i as u64);
            let (yr, _) = conv3d_ref(&x, xs, &w, ws, &geo);
            let y = Tensor::new(x, &xs).conv3d(&Tensor::new(w, &ws), None, &geo);
            for (a, b) in y.data().iter().zip(&yr) {
                assert!((a - b).abs() < 1e-12, "case {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv3d_grads() {
        for (i, (xs, ws, geo)) in cases().into_iter().enumerate() {
            let w = Tensor::<f64>::new(rand_vec(ws.iter().product(), 7 + i as u64), &ws);
            let bias = Tensor::<f64>::new(rand_vec(ws[0], 3), &[ws[0]]);
            check_op(&xs, 50 + i as u64, |x| x.conv3d(&w, Some(&bias), &geo));
            let x = Tensor::<f64>::new(rand_vec(xs.iter().product(), 9 + i as u64), &xs);
            check_op(&ws, 60 + i as u64, |w| x.conv3d(w, None, &geo));
            let wc = w.clone();
            check_op(&[ws[0]], 70 + i as u64, |b| x.conv3d(&wc, Some(b), &geo));
        }
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_t(y)> for matching geometries
        let geo = ConvGeometry::new([2, 3, 3]).with_stride([2, 1, 2]).with_padding([0, 1, 1]).with_groups(2);
        let xs = [1, 4, 4, 6, 7];
        let ws = [6, 2, 2, 3, 3];
        let x = Tensor::<f64>::new(rand_vec(xs.iter().product(), 1), &xs);
        let w = Tensor::<f64>::new(rand_vec(ws.iter().product(), 2), &ws);
        let y = x.conv3d(&w, None, &geo);
        let ys = y.shape().to_vec();
        let z = Tensor::<f64>::new(rand_vec(y.numel(), 3), &ys);
        // conv weight [Co, Ci/g, k] reinterpreted as transposed weight [Ci', Co'/g, k]
        // with Ci' = Co, Co' = Ci.
        let wt = w.reshape(&[6, 2, 2, 3, 3]);
        let base = geo.transposed_output_dims([ys[2], ys[3], ys[4]], [0; 3]).unwrap();
        let op = [xs[2] - base[0], xs[3] - base[1], xs[4] - base[2]];
        let back = z.conv_transpose3d(&wt, None, &geo, op);
        assert_eq!(back.shape(), &xs);
        let lhs: f64 = y.data().iter().zip(z.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn conv_transpose_grads() {
        let geo = ConvGeometry::new([2, 3, 3]).with_stride([2, 1, 1]).with_padding([0, 1, 1]).with_groups(2);
        let ws = [4, 3, 2, 3, 3];
        let w = Tensor::<f64>::new(rand_vec(ws.iter().product(), 5), &ws);
        let bias = Tensor::<f64>::new(rand_vec(6, 6), &[6]);
        check_op(&[1, 4, 2, 4, 3], 80, |x| x.conv_transpose3d(&w, Some(&bias), &geo, [0; 3]));
        let x = Tensor::<f64>::new(rand_vec(96, 7), &[1, 4, 2, 4, 3]);
        check_op(&ws, 81, |w| x.conv_transpose3d(w, None, &geo, [0; 3]));
    }

    #[test]
    fn transposed_temporal_doubling() {
        let geo = ConvGeometry::new([2, 3, 3]).with_stride([2, 1, 1]).with_padding([0, 1, 1]);
        assert_eq!(geo.transposed_output_dims([2, 8, 8], [0; 3]), Some([4, 8, 8]));
        assert_eq!(geo.transposed_output_dims([1, 8, 8], [0; 3]), Some([2, 8, 8]));
    }

    #[test]
    fn conv2d_wrapper() {
        let x = Tensor::<f64>::new(rand_vec(2 * 3 * 6 * 6, 1), &[2, 3, 6, 6]);
        let w = Tensor::<f64>::new(rand_vec(4 * 3 * 9, 2), &[4, 3, 3, 3]);
        let y = x.conv2d(&w, None, 2, 1, 1, 1);
        assert_eq!(y.shape(), &[2, 4, 3, 3]);
        check_op(&[2, 3, 6, 6], 90, |x| x.conv2d(&w, None, 2, 1, 1, 1));
    }
}
