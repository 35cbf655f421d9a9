use crate::tensor::{Float, Tensor};
use crate::{Error, Result};

/// Bilinear backward warp: `out[n, y, x] = occ[n](x + fx, y + fy)` with
/// zeros outside the grid. `occ`: `[N, H, W]`, `flow`: `[N, 2, H, W]` holding
/// `(dx, dy)` in cells. Differentiable in both inputs.
pub fn warp<T: Float>(occ: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    let s = occ.shape().to_vec();
    if s.len() != 3 || flow.shape() != [s[0], 2, s[1], s[2]] {
        return Err(Error::Shape(format!("warp: occupancy {:?} vs flow {:?}", s, flow.shape())));
    }
    let (n, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let (od, fd) = (occ.data_rc(), flow.data_rc());
    if fd.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("warp: non-finite flow".into()));
    }
    let read = move |od: &[T], b: usize, yi: isize, xi: isize| -> T {
        if yi < 0 || xi < 0 || yi >= h as isize || xi >= w as isize {
            T::zero()
        } else {
            od[b * plane + yi as usize * w + xi as usize]
        }
    };
    // (x0, y0, wx, wy) per output cell
    let mut taps = Vec::with_capacity(n * plane);
    let mut out = vec![T::zero(); n * plane];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let sx = T::cast(x as f64) + fd[(b * 2) * plane + i];
                let sy = T::cast(y as f64) + fd[(b * 2 + 1) * plane + i];
                let (x0, y0) = (sx.floor(), sy.floor());
                let (wx, wy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0.to_isize().unwrap_or(isize::MIN / 2), y0.to_isize().unwrap_or(isize::MIN / 2));
                let one = T::one();
                out[b * plane + i] = (one - wy) * ((one - wx) * read(&od, b, y0, x0) + wx * read(&od, b, y0, x0 + 1))
                    + wy * ((one - wx) * read(&od, b, y0 + 1, x0) + wx * read(&od, b, y0 + 1, x0 + 1));
                taps.push((x0, y0, wx, wy));
            }
        }
    }
    Ok(Tensor::custom(out, &[n, h, w], vec![occ.clone(), flow.clone()], move |g, needs| {
        let one = T::one();
        let mut go = needs[0].then(|| vec![T::zero(); n * plane]);
        let mut gf = needs[1].then(|| vec![T::zero(); n * 2 * plane]);
        for b in 0..n {
            for i in 0..plane {
                let gv = g[b * plane + i];
                let (x0, y0, wx, wy) = taps[b * plane + i];
                if let Some(go) = go.as_mut() {
                    for (dy, dx, wt) in [(0, 0, (one - wy) * (one - wx)), (0, 1, (one - wy) * wx), (1, 0, wy * (one - wx)), (1, 1, wy * wx)] {
                        let (yi, xi) = (y0 + dy, x0 + dx);
                        if yi >= 0 && xi >= 0 && yi < h as isize && xi < w as isize {
                            go[b * plane + yi as usize * w + xi as usize] += gv * wt;
                        }
                    }
                }
                if let Some(gf) = gf.as_mut() {
                    let (v00, v01) = (read(&od, b, y0, x0), read(&od, b, y0, x0 + 1));
                    let (v10, v11) = (read(&od, b, y0 + 1, x0), read(&od, b, y0 + 1, x0 + 1));
                    gf[(b * 2) * plane + i] = gv * ((one - wy) * (v01 - v00) + wy * (v11 - v10));
                    gf[(b * 2 + 1) * plane + i] = gv * ((one - wx) * (v10 - v00) + wx * (v11 - v01));
                }
            }
        }
        vec![go, gf]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::*;

    fn grid(h: usize, w: usize, cells: &[(usize, usize)]) -> Vec<f64> {
        let mut v = vec![0.0; h * w];
        for &(y, x) in cells {
            v[y * w + x] = 1.0;
        }
        v
    }

    #[test]
    fn zero_flow_is_identity() {
        let occ = Tensor::<f64>::new(rand_vec(2 * 25, 1), &[2, 5, 5]);
        let out = warp(&occ, &Tensor::zeros(&[2, 2, 5, 5])).unwrap();
        assert_eq!(out.data(), occ.data());
    }

    #[test]
    fn integer_shift_recovers_footprint() {
        let prev = grid(6, 8, &[(2, 1), (2, 2), (3, 1), (3, 2)]);
        let mut flow = vec![0.0; 2 * 48];
        flow[..48].iter_mut().for_each(|v| *v = -2.0);
        let out = warp(&Tensor::new(prev, &[1, 6, 8]), &Tensor::new(flow, &[1, 2, 6, 8])).unwrap();
        assert_eq!(out.data(), grid(6, 8, &[(2, 3), (2, 4), (3, 3), (3, 4)]).as_slice());
    }

    #[test]
    fn half_cell_splits_impulse() {
        let prev = grid(4, 4, &[(1, 2)]);
        let mut flow = vec![0.0; 32];
        flow[..16].iter_mut().for_each(|v| *v = 0.5);
        let out = warp(&Tensor::new(prev, &[1, 4, 4]), &Tensor::new(flow, &[1, 2, 4, 4])).unwrap();
        let expect = {
            let mut g = vec![0.0; 16];
            g[4 + 1] = 0.5;
            g[4 + 2] = 0.5;
            g
        };
        assert_eq!(out.data(), expect.as_slice());
    }

    #[test]
    fn warp_grads() {
        let occ = Tensor::<f64>::new(rand_vec(2 * 36, 2).iter().map(|v| v.abs()).collect(), &[2, 6, 6]);
        // offsets away from integer kinks
        check_op(&[2, 2, 6, 6], 7, |f| warp(&occ, &f.mul_scalar(0.9).add_scalar(0.31)).unwrap());
        let flow = Tensor::<f64>::new(rand_vec(2 * 72, 3).iter().map(|v| v * 1.3 + 0.17).collect(), &[2, 2, 6, 6]);
        check_op(&[2, 6, 6], 8, |o| warp(o, &flow).unwrap());
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(warp(&Tensor::<f64>::zeros(&[1, 4, 4]), &Tensor::zeros(&[1, 2, 4, 5])).is_err());
    }
}
