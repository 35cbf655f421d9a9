use crate::nn::{Conv3d, ConvTranspose3d, Ctx, GroupNorm, ParamStore};
use crate::tensor::{ConvGeometry, Float, Tensor};

#[derive(Clone, Debug)]
enum Middle {
    Conv(Conv3d),
    Transposed(ConvTranspose3d),
}

/// Reduce → grouped (dilated or transposed) 3-D conv → expand, each followed
/// by group norm, with a skip connection. The transposed form doubles the
/// temporal extent and its skip repeats frames.
#[derive(Clone, Debug)]
pub struct Bottleneck3d {
    reduce: Conv3d,
    norm1: GroupNorm,
    middle: Middle,
    norm2: GroupNorm,
    expand: Conv3d,
    norm3: GroupNorm,
}

impl Bottleneck3d {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize, mid: usize, groups: usize, dilation: usize, transposed: bool, norm_groups: usize) -> Self {
        let point = ConvGeometry::new([1, 1, 1]);
        let groups = crate::nn::largest_divisor_at_most(mid, groups);
        let middle = if transposed {
            let geo = ConvGeometry::new([2, 3, 3]).with_stride([2, 1, 1]).with_padding([0, 1, 1]).with_groups(groups);
            Middle::Transposed(ConvTranspose3d::new(ps, &format!("{name}.tconv"), mid, mid, geo, false, 1.0))
        } else {
            let geo = ConvGeometry::new([3, 3, 3]).with_dilation([1, dilation, dilation]).with_padding([1, dilation, dilation]).with_groups(groups);
            Middle::Conv(Conv3d::new(ps, &format!("{name}.conv"), mid, mid, geo, false, 1.0))
        };
        Bottleneck3d {
            reduce: Conv3d::new(ps, &format!("{name}.reduce"), c, mid, point, false, 1.0),
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), norm_groups, mid),
            middle,
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), norm_groups, mid),
            expand: Conv3d::new(ps, &format!("{name}.expand"), mid, c, point, false, 1.0),
            norm3: GroupNorm::zero_init(ps, &format!("{name}.norm3"), norm_groups, c),
        }
    }

    pub fn is_transposed(&self) -> bool {
        matches!(self.middle, Middle::Transposed(_))
    }

    /// `[B, C, T, H, W] -> [B, C, T', H, W]` with `T' = 2T` when transposed.
    pub fn forward<T: Float>(&self, ctx: &Ctx<T>, x: &Tensor<T>) -> Tensor<T> {
        let h = self.norm1.forward(ctx, &self.reduce.forward(ctx, x)).silu();
        let (h, skip) = match &self.middle {
            Middle::Conv(c) => (c.forward(ctx, &h), x.clone()),
            Middle::Transposed(t) => (t.forward(ctx, &h), x.repeat_interleave(2, 2)),
        };
        let h = self.norm2.forward(ctx, &h).silu();
        self.norm3.forward(ctx, &self.expand.forward(ctx, &h)).add(&skip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::rand_vec;

    #[test]
    fn zero_init_is_identity() {
        let mut ps = ParamStore::new(0);
        let b = Bottleneck3d::new(&mut ps, "b", 8, 4, 2, 2, false, 2);
        let ctx: Ctx<f64> = Ctx::eval(&ps);
        let x = Tensor::<f64>::new(rand_vec(8 * 2 * 5 * 5, 1), &[1, 8, 2, 5, 5]);
        assert_eq!(b.forward(&ctx, &x).data(), x.data());
    }

    #[test]
    fn transposed_doubles_time() {
        let mut ps = ParamStore::new(1);
        let b = Bottleneck3d::new(&mut ps, "b", 8, 4, 2, 1, true, 2);
        let ctx: Ctx<f64> = Ctx::eval(&ps);
        for t in [1, 2, 4] {
            let x = Tensor::<f64>::new(rand_vec(8 * t * 16, t as u64), &[1, 8, t, 4, 4]);
            let y = b.forward(&ctx, &x);
            assert_eq!(y.shape(), &[1, 8, 2 * t, 4, 4]);
            // zero-initialized expansion norm leaves the repeated skip
            assert_eq!(y.data(), x.repeat_interleave(2, 2).data());
        }
    }

    #[test]
    fn residual_path_learns() {
        let mut ps = ParamStore::new(2);
        let b = Bottleneck3d::new(&mut ps, "b", 4, 4, 2, 1, false, 2);
        let ctx: Ctx<f64> = Ctx::train(&ps);
        let x = Tensor::<f64>::new(rand_vec(4 * 2 * 9, 3), &[1, 4, 2, 3, 3]);
        let g = ctx.param_grads(&b.forward(&ctx, &x).sqr().sum_all().backward());
        let id = ps.id("b.norm3.weight").unwrap();
        assert!(g[id.index()].as_ref().unwrap().iter().any(|v| v.abs() > 0.0));
    }

    #[test]
    fn dilated_taps_skip_neighbors() {
        for d in [1, 2, 3] {
            let mut ps = ParamStore::new(3);
            let geo = ConvGeometry::new([3, 3, 3]).with_dilation([1, d, d]).with_padding([1, d, d]);
            let conv = Conv3d::new(&mut ps, "c", 1, 1, geo, false, 1.0);
            let w = ps.id("c.weight").unwrap();
            ps.get_mut(w).value.fill(1.0);
            let ctx: Ctx<f64> = Ctx::eval(&ps);
            let n = 9;
            let mut x = vec![0.0; 3 * n * n];
            x[n * n + 4 * n + 4] = 1.0;
            let y = conv.forward(&ctx, &Tensor::new(x, &[1, 1, 3, n, n]));
            let y = y.data();
            for r in 0..n {
                for c in 0..n {
                    let hit = [r, c].iter().all(|&v| v.abs_diff(4) == 0 || v.abs_diff(4) == d);
                    assert_eq!(y[n * n + r * n + c] != 0.0, hit, "dilation {d} at ({r}, {c})");
                }
            }
        }
    }
}
