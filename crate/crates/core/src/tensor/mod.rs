//! A small reverse-mode autodiff tensor engine.
//!
//! Tensors are immutable, reference counted, row-major buffers. Every op
//! that has at least one gradient-tracking input records a closure that maps
//! the output gradient to input gradients; [`Tensor::backward`] replays those
//! closures in reverse topological order. The element type is generic so the
//! same network code runs in `f32` for training and in `f64` for
//! finite-difference checks.

mod conv;
mod elementwise;
mod linalg;
mod norm;
mod reduce;
mod sample;
mod shape;
mod sparse;

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

pub use conv::{conv_out_dim, ConvGeometry};
pub use sparse::{dense_to_sparse_weight, Rulebook, Site, SparseConvKind};

/// Scalar element of a [`Tensor`].
pub trait Float:
    num_traits::Float
    + Default
    + fmt::Debug
    + fmt::Display
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + 'static
{
    fn cast(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` with arbitrary element strides.
    ///
    /// # Safety
    /// The pointers and strides must describe valid `m×k`, `k×n` and `m×n`
    /// matrices, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_float {
    ($t:ty, $gemm:path) => {
        impl Float for $t {
            #[inline]
            fn cast(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
            unsafe fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_float!(f32, matrixmultiply::sgemm);
impl_float!(f64, matrixmultiply::dgemm);

/// Row-major matrix view used by [`gemm`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    /// Interpret the stored `rows×cols` buffer as its transpose.
    pub transposed: bool,
}

impl<'a, T: Float> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Self { data, rows, cols, transposed: false }
    }

    pub fn t(self) -> Self {
        Self { transposed: !self.transposed, ..self }
    }

    fn logical(&self) -> (usize, usize, isize, isize) {
        if self.transposed {
            (self.cols, self.rows, 1, self.cols as isize)
        } else {
            (self.rows, self.cols, self.cols as isize, 1)
        }
    }
}

/// `out = beta * out + a · b` for row-major buffers.
pub(crate) fn gemm<T: Float>(a: Mat<'_, T>, b: Mat<'_, T>, out: &mut [T], beta: T) {
    let (m, k, rsa, csa) = a.logical();
    let (k2, n, rsb, csb) = b.logical();
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    assert!(out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut out[..m * n] {
            *v = if beta == T::zero() { T::zero() } else { *v * beta };
        }
        return;
    }
    if small_gemm(&a, &b, m, k, n, out, beta) {
        return;
    }
    // SAFETY: dimensions and strides were derived from slices checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const SMALL_DIM: usize = 8;

/// Direct loops for products with a tiny outer or inner dimension, where
/// packing would dominate. Returns false when the shape is not handled.
fn small_gemm<T: Float>(a: &Mat<'_, T>, b: &Mat<'_, T>, m: usize, k: usize, n: usize, out: &mut [T], beta: T) -> bool {
    let scale = |row: &mut [T]| {
        if beta == T::zero() {
            row.fill(T::zero());
        } else if beta != T::one() {
            row.iter_mut().for_each(|v| *v *= beta);
        }
    };
    let at = |i: usize, p: usize| if a.transposed { a.data[p * a.cols + i] } else { a.data[i * a.cols + p] };
    if !b.transposed && (m <= SMALL_DIM || k <= SMALL_DIM) {
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            scale(row);
            for p in 0..k {
                let w = at(i, p);
                if w != T::zero() {
                    for (o, &x) in row.iter_mut().zip(&b.data[p * n..(p + 1) * n]) {
                        *o += w * x;
                    }
                }
            }
        }
        return true;
    }
    if b.transposed && !a.transposed && m <= SMALL_DIM {
        // out[i, j] = <a[i, :], b_stored[j, :]>
        for i in 0..m {
            let ar = &a.data[i * k..(i + 1) * k];
            let row = &mut out[i * n..(i + 1) * n];
            scale(row);
            for (j, o) in row.iter_mut().enumerate() {
                *o += dot(ar, &b.data[j * k..(j + 1) * k]);
            }
        }
        return true;
    }
    false
}

#[inline]
fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = acc.iter().fold(T::zero(), |s, &v| s + v);
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

struct GradFn<T: Float> {
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Float> {
    id: usize,
    shape: Vec<usize>,
    data: Rc<Vec<T>>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

/// An immutable n-dimensional array that records its provenance for
/// reverse-mode differentiation.
pub struct Tensor<T: Float = f32> {
    node: Rc<Node<T>>,
}

impl<T: Float> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self { node: Rc::clone(&self.node) }
    }
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Float> Tensor<T> {
    fn build(
        shape: Vec<usize>,
        data: Rc<Vec<T>>,
        requires_grad: bool,
        grad_fn: Option<GradFn<T>>,
    ) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad_fn,
            }),
        }
    }

    /// A constant (non-tracked) tensor.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), Rc::new(data), false, None)
    }

    /// A gradient-tracking leaf.
    pub fn leaf(data: Vec<T>, shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), Rc::new(data), true, None)
    }

    pub fn from_f32(data: &[f32], shape: &[usize]) -> Self {
        Self::new(data.iter().map(|&v| T::cast(v as f64)).collect(), shape)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(vec![T::zero(); numel(shape)], shape)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::new(vec![v; numel(shape)], shape)
    }

    pub fn scalar(v: T) -> Self {
        Self::new(vec![v], &[])
    }

    /// Records a custom differentiable op. `backward` receives the output
    /// gradient and a mask of which parents need gradients, and returns one
    /// optional gradient per parent with the parent's element count.
    pub fn custom(
        data: Vec<T>,
        shape: &[usize],
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Self {
        let rg = parents.iter().any(|p| p.requires_grad());
        let grad_fn = rg.then(|| GradFn { parents, backward: Box::new(backward) });
        Self::build(shape.to_vec(), Rc::new(data), rg, grad_fn)
    }

    /// Shares `data` with a new shape; used by reshape-like ops.
    fn with_shared(
        data: Rc<Vec<T>>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Self {
        let rg = parents.iter().any(|p| p.requires_grad());
        let grad_fn = rg.then(|| GradFn { parents, backward: Box::new(backward) });
        Self::build(shape, data, rg, grad_fn)
    }

    pub fn id(&self) -> usize {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn dim(&self, i: usize) -> usize {
        self.node.shape[i]
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<T>> {
        Rc::clone(&self.node.data)
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.as_ref().clone()
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.node.data.iter().map(|v| v.as_f64() as f32).collect()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data[0]
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.node.shape.clone(), self.data_rc(), false, None)
    }

    pub fn all_finite(&self) -> bool {
        self.node.data.iter().all(|v| v.is_finite())
    }

    /// Reverse-mode gradients of this tensor (seeded with ones) with
    /// respect to every gradient-tracking leaf reachable from it.
    pub fn backward(&self) -> Gradients<T> {
        let order = self.topo_order();
        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        let mut leaves = HashMap::new();
        if !self.requires_grad() {
            return Gradients { grads: leaves };
        }
        grads.insert(self.id(), vec![T::one(); self.numel()]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else { continue };
            match &t.node.grad_fn {
                None => {
                    leaves.insert(t.id(), g);
                }
                Some(gf) => {
                    let needs: Vec<bool> = gf.parents.iter().map(|p| p.requires_grad()).collect();
                    let pgrads = (gf.backward)(&g, &needs);
                    debug_assert_eq!(pgrads.len(), gf.parents.len());
                    for (p, pg) in gf.parents.iter().zip(pgrads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "gradient size mismatch");
                        match grads.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Gradients { grads: leaves }
    }

    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen = std::collections::HashSet::new();
        // (tensor, children expanded?)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.node.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && !seen.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Gradients of a scalar with respect to leaf tensors, keyed by tensor id.
#[derive(Debug, Default)]
pub struct Gradients<T: Float = f32> {
    grads: HashMap<usize, Vec<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.grads.get(&t.id()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_accumulates_shared_uses() {
        let x = Tensor::<f64>::leaf(vec![2.0, 3.0], &[2]);
        let y = x.mul(&x).add(&x).sum_all();
        let g = y.backward();
        assert_eq!(g.get(&x).unwrap(), &[5.0, 7.0]);
    }

    #[test]
    fn constants_do_not_record() {
        let x = Tensor::<f32>::new(vec![1.0, 2.0], &[2]);
        let y = x.mul_scalar(3.0).sum_all();
        assert!(!y.requires_grad());
        assert!(y.backward().is_empty());
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(Mat::new(&a, 2, 2).t(), Mat::new(&b, 2, 2), &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(Mat::new(&a, 2, 2), Mat::new(&b, 2, 2).t(), &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn small_paths_match_packed_gemm() {
        let v = testutil::rand_vec(40 * 40, 3);
        for (m, k, n) in [(3, 40, 17), (20, 5, 33), (7, 9, 2), (12, 12, 12)] {
            for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
                let (ar, ac) = if ta { (k, m) } else { (m, k) };
                let (br, bc) = if tb { (n, k) } else { (k, n) };
                let mk = |r, c, t: bool| {
                    let x = Mat::new(&v[..r * c], r, c);
                    if t {
                        x.t()
                    } else {
                        x
                    }
                };
                let init: Vec<f64> = v[..m * n].iter().map(|x| x * 0.5).collect();
                let mut got = init.clone();
                gemm(mk(ar, ac, ta), mk(br, bc, tb), &mut got, 0.5);
                let mut want = init;
                unsafe {
                    let (a, b) = (mk(ar, ac, ta).logical(), mk(br, bc, tb).logical());
                    f64::gemm_raw(m, k, n, 1.0, v.as_ptr(), a.2, a.3, v.as_ptr(), b.2, b.3, 0.5, want.as_mut_ptr(), n as isize, 1);
                }
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() < 1e-10, "{m}x{k}x{n} {ta} {tb}");
                }
            }
        }
    }
}
