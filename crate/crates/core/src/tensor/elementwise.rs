use super::{numel, Float, Tensor};

/// Broadcast result shape (numpy rules, aligned on trailing dims).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            panic!("cannot broadcast {a:?} with {b:?}");
        };
    }
    out
}

/// Element strides of `shape` viewed at `out` rank; broadcast dims get 0.
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let off = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + off] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Iteration plan over a broadcast pair with adjacent compatible dims merged.
struct Plan {
    dims: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
}

impl Plan {
    fn new(a: &[usize], b: &[usize], out: &[usize]) -> Plan {
        let sa = bcast_strides(a, out);
        let sb = bcast_strides(b, out);
        let mut dims: Vec<usize> = Vec::new();
        let mut pa: Vec<usize> = Vec::new();
        let mut pb: Vec<usize> = Vec::new();
        for i in 0..out.len() {
            if out[i] == 1 {
                continue;
            }
            if let Some(last) = dims.len().checked_sub(1) {
                // merge dim i into the previous (outer) one when contiguous
                if pa[last] == sa[i] * out[i] && pb[last] == sb[i] * out[i] {
                    dims[last] *= out[i];
                    pa[last] = sa[i];
                    pb[last] = sb[i];
                    continue;
                }
            }
            dims.push(out[i]);
            pa.push(sa[i]);
            pb.push(sb[i]);
        }
        if dims.is_empty() {
            dims.push(1);
            pa.push(0);
            pb.push(0);
        }
        Plan { dims, sa: pa, sb: pb }
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element in
    /// row-major order.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let r = self.dims.len();
        let inner = self.dims[r - 1];
        let (ia_s, ib_s) = (self.sa[r - 1], self.sb[r - 1]);
        let outer: usize = self.dims[..r - 1].iter().product();
        let mut idx = vec![0usize; r - 1];
        let (mut ba, mut bb) = (0usize, 0usize);
        let mut o = 0;
        for _ in 0..outer {
            let (mut ia, mut ib) = (ba, bb);
            for _ in 0..inner {
                f(o, ia, ib);
                o += 1;
                ia += ia_s;
                ib += ib_s;
            }
            // odometer increment over the outer dims
            for d in (0..r - 1).rev() {
                idx[d] += 1;
                ba += self.sa[d];
                bb += self.sb[d];
                if idx[d] < self.dims[d] {
                    break;
                }
                ba -= self.sa[d] * self.dims[d];
                bb -= self.sb[d] * self.dims[d];
                idx[d] = 0;
            }
        }
    }
}

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl<T: Float> Tensor<T> {
    fn binary(&self, other: &Tensor<T>, kind: BinKind) -> Tensor<T> {
        let out_shape = broadcast_shape(self.shape(), other.shape());
        let n = numel(&out_shape);
        let a = self.data_rc();
        let b = other.data_rc();
        let mut out = vec![T::zero(); n];
        let same = self.shape() == other.shape();
        let op = move |x: T, y: T| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        if same {
            for i in 0..n {
                out[i] = op(a[i], b[i]);
            }
        } else {
            let plan = Plan::new(self.shape(), other.shape(), &out_shape);
            plan.for_each(|o, ia, ib| out[o] = op(a[ia], b[ib]));
        }
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        let os = out_shape.clone();
        Tensor::custom(out, &out_shape, vec![self.clone(), other.clone()], move |g, needs| {
            let (na, nb) = (a.len(), b.len());
            let mut ga = needs[0].then(|| vec![T::zero(); na]);
            let mut gb = needs[1].then(|| vec![T::zero(); nb]);
            let mut visit = |o: usize, ia: usize, ib: usize| {
                let gv = g[o];
                let (x, y) = (a[ia], b[ib]);
                let (dx, dy) = match kind {
                    BinKind::Add => (gv, gv),
                    BinKind::Sub => (gv, -gv),
                    BinKind::Mul => (gv * y, gv * x),
                    BinKind::Div => (gv / y, -gv * x / (y * y)),
                };
                if let Some(ga) = ga.as_mut() {
                    ga[ia] += dx;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] += dy;
                }
            };
            if sa == sb {
                for i in 0..g.len() {
                    visit(i, i, i);
                }
            } else {
                Plan::new(&sa, &sb, &os).for_each(visit);
            }
            vec![ga, gb]
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        self.binary(other, BinKind::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        self.binary(other, BinKind::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        self.binary(other, BinKind::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Tensor<T> {
        self.binary(other, BinKind::Div)
    }

    /// Elementwise map with derivative `df(x, y)` expressed through the
    /// input `x` and output `y`.
    pub fn map(
        &self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Tensor<T> {
        let x = self.data_rc();
        let y: Vec<T> = x.iter().map(|&v| f(v)).collect();
        if !self.requires_grad() {
            return Tensor::new(y, self.shape());
        }
        let y = std::rc::Rc::new(y);
        let yc = std::rc::Rc::clone(&y);
        Tensor::with_shared(y, self.shape().to_vec(), vec![self.clone()], move |g, _| {
            vec![Some(g.iter().zip(x.iter().zip(yc.iter())).map(|(&g, (&x, &y))| g * df(x, y)).collect())]
        })
    }

    pub fn neg(&self) -> Tensor<T> {
        self.map(|x| -x, |_, _| -T::one())
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor<T> {
        let s = T::cast(s);
        self.map(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor<T> {
        let s = T::cast(s);
        self.map(move |x| x + s, |_, _| T::one())
    }

    pub fn relu(&self) -> Tensor<T> {
        self.map(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.map(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.map(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn exp(&self) -> Tensor<T> {
        self.map(|x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor<T> {
        self.map(|x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sqr(&self) -> Tensor<T> {
        self.map(|x| x * x, |x, _| x + x)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        self.map(|x| x.sqrt(), |_, y| T::cast(0.5) / y)
    }

    /// x · sigmoid(x)
    pub fn silu(&self) -> Tensor<T> {
        self.map(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&self) -> Tensor<T> {
        let c = T::cast((2.0 / std::f64::consts::PI).sqrt());
        let k = T::cast(0.044715);
        let half = T::cast(0.5);
        self.map(
            move |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()),
            move |x, _| {
                let u = c * (x + k * x * x * x);
                let t = u.tanh();
                let du = c * (T::one() + T::cast(3.0) * k * x * x);
                half * (T::one() + t) + half * x * (T::one() - t * t) * du
            },
        )
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<T> {
        let (lo, hi) = (T::cast(lo), T::cast(hi));
        self.map(
            move |x| x.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }
}

#[inline]
pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[3, 1]), vec![2, 3, 4]);
        assert_eq!(broadcast_shape(&[1, 5], &[4, 1]), vec![4, 5]);
    }

    #[test]
    fn broadcast_bias_values() {
        let x = Tensor::<f64>::new((0..12).map(f64::from).collect(), &[1, 3, 2, 2]);
        let b = Tensor::new(vec![10.0, 20.0, 30.0], &[1, 3, 1, 1]);
        let y = x.add(&b);
        assert_eq!(&y.data()[..5], &[10.0, 11.0, 12.0, 13.0, 24.0]);
    }

    #[test]
    fn binary_grads_with_broadcast() {
        let b = Tensor::<f64>::new(rand_vec(6, 3), &[3, 1, 2]);
        check_op(&[2, 3, 4, 2], 1, |x| x.mul(&b).add(&b).div(&b.add_scalar(3.0)));
        let a = Tensor::<f64>::new(rand_vec(48, 4), &[2, 3, 4, 2]);
        check_op(&[3, 1, 2], 2, |b| a.sub(b).mul(b));
    }

    #[test]
    fn unary_grads() {
        check_op(&[3, 5], 5, |x| x.sigmoid().add(&x.tanh()).add(&x.silu()).add(&x.gelu()));
        check_op(&[7], 6, |x| x.sqr().add_scalar(1.0).sqrt().ln().add(&x.exp()));
        check_op(&[2, 4], 7, |x| x.mul_scalar(2.5).neg().relu());
    }
}
