//! Sparse 3-D convolution over active voxel sites using a gather/GEMM/scatter
//! rulebook.

use std::collections::HashMap;
use std::rc::Rc;

use super::{gemm, ConvGeometry, Float, Mat, Tensor};

/// Whether a sparse layer may grow the active set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparseConvKind {
    /// Output sites are every site reached by some active input.
    Regular,
    /// Output sites are exactly the active input sites.
    Submanifold,
}

/// Active site in `(batch, t, y, x)` order.
pub type Site = [usize; 4];

/// Index pairs mapping input rows to output rows for each kernel tap.
#[derive(Debug, Clone)]
pub struct Rulebook {
    pub out_sites: Vec<Site>,
    pub out_extent: [usize; 3],
    n_in: usize,
    /// `pairs[k]` holds `(input row, output row)` for kernel tap `k`.
    pairs: Vec<Vec<(u32, u32)>>,
}

fn key(s: &Site) -> u64 {
    ((s[0] as u64) << 48) | ((s[1] as u64) << 32) | ((s[2] as u64) << 16) | s[3] as u64
}

impl Rulebook {
    /// Builds the rulebook for `geo` over `sites` living in a grid of `extent`.
    /// Submanifold rulebooks require stride 1 and a geometry that preserves
    /// the extent. Returns `None` when the geometry is inconsistent.
    pub fn build(sites: &[Site], extent: [usize; 3], geo: &ConvGeometry, kind: SparseConvKind) -> Option<Rulebook> {
        assert_eq!(geo.groups, 1, "sparse conv has no groups");
        let out_extent = geo.output_dims(extent)?;
        for s in sites {
            if s[1] >= extent[0] || s[2] >= extent[1] || s[3] >= extent[2] {
                return None;
            }
        }
        let kvol = geo.kernel_volume();
        let [k0, k1, k2] = geo.kernel;
        let taps: Vec<[isize; 3]> = (0..k0)
            .flat_map(|a| (0..k1).flat_map(move |b| (0..k2).map(move |c| [a, b, c])))
            .map(|[a, b, c]| {
                [
                    (a * geo.dilation[0]) as isize - geo.padding[0] as isize,
                    (b * geo.dilation[1]) as isize - geo.padding[1] as isize,
                    (c * geo.dilation[2]) as isize - geo.padding[2] as isize,
                ]
            })
            .collect();
        let mut pairs = vec![Vec::new(); kvol];
        let out_sites = match kind {
            SparseConvKind::Submanifold => {
                if geo.stride != [1; 3] || out_extent != extent {
                    return None;
                }
                let index: HashMap<u64, u32> = sites.iter().enumerate().map(|(i, s)| (key(s), i as u32)).collect();
                for (o, s) in sites.iter().enumerate() {
                    for (k, off) in taps.iter().enumerate() {
                        let p = [s[1] as isize + off[0], s[2] as isize + off[1], s[3] as isize + off[2]];
                        if (0..3).any(|d| p[d] < 0 || p[d] >= extent[d] as isize) {
                            continue;
                        }
                        if let Some(&i) = index.get(&key(&[s[0], p[0] as usize, p[1] as usize, p[2] as usize])) {
                            pairs[k].push((i, o as u32));
                        }
                    }
                }
                sites.to_vec()
            }
            SparseConvKind::Regular => {
                let mut hits: Vec<(Site, usize, u32)> = Vec::new();
                for (i, s) in sites.iter().enumerate() {
                    for (k, off) in taps.iter().enumerate() {
                        // o * stride + off == i  =>  o = (i - off) / stride
                        let mut o = [0usize; 3];
                        let mut ok = true;
                        for d in 0..3 {
                            let num = s[d + 1] as isize - off[d];
                            let st = geo.stride[d] as isize;
                            if num < 0 || num % st != 0 || num / st >= out_extent[d] as isize {
                                ok = false;
                                break;
                            }
                            o[d] = (num / st) as usize;
                        }
                        if ok {
                            hits.push(([s[0], o[0], o[1], o[2]], k, i as u32));
                        }
                    }
                }
                let mut outs: Vec<Site> = hits.iter().map(|h| h.0).collect();
                outs.sort_unstable();
                outs.dedup();
                let index: HashMap<u64, u32> = outs.iter().enumerate().map(|(i, s)| (key(s), i as u32)).collect();
                for (site, k, i) in hits {
                    pairs[k].push((i, index[&key(&site)]));
                }
                outs
            }
        };
        Some(Rulebook { out_sites, out_extent, n_in: sites.len(), pairs })
    }

    pub fn n_out(&self) -> usize {
        self.out_sites.len()
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn kernel_volume(&self) -> usize {
        self.pairs.len()
    }
}

fn gather_rows<T: Float>(src: &[T], c: usize, rows: impl Iterator<Item = usize>, dst: &mut Vec<T>) {
    dst.clear();
    for r in rows {
        dst.extend_from_slice(&src[r * c..(r + 1) * c]);
    }
}

impl<T: Float> Tensor<T> {
    /// Sparse convolution of site features `[N_in, Ci]` with weight
    /// `[K, Ci, Co]` (K kernel taps) following `rb`; returns `[N_out, Co]`.
    pub fn sparse_conv(&self, weight: &Tensor<T>, rb: &Rc<Rulebook>) -> Tensor<T> {
        let s = self.shape();
        assert_eq!(s.len(), 2, "sparse_conv features must be [N, C]");
        assert_eq!(s[0], rb.n_in, "sparse_conv: feature rows do not match rulebook");
        let ws = weight.shape();
        assert_eq!(ws.len(), 3, "sparse_conv weight must be [K, Ci, Co]");
        assert_eq!(ws[0], rb.kernel_volume(), "sparse_conv: kernel volume mismatch");
        assert_eq!(ws[1], s[1], "sparse_conv: input channels mismatch");
        let (ci, co) = (ws[1], ws[2]);
        let (x, w) = (self.data_rc(), weight.data_rc());
        let n_out = rb.n_out();
        let mut y = vec![T::zero(); n_out * co];
        let mut gbuf = Vec::new();
        let mut obuf = Vec::new();
        for (k, pr) in rb.pairs.iter().enumerate() {
            if pr.is_empty() {
                continue;
            }
            gather_rows(&x, ci, pr.iter().map(|p| p.0 as usize), &mut gbuf);
            obuf.resize(pr.len() * co, T::zero());
            gemm(Mat::new(&gbuf, pr.len(), ci), Mat::new(&w[k * ci * co..], ci, co), &mut obuf, T::zero());
            for (j, p) in pr.iter().enumerate() {
                let o = p.1 as usize;
                y[o * co..(o + 1) * co].iter_mut().zip(&obuf[j * co..(j + 1) * co]).for_each(|(a, b)| *a += *b);
            }
        }
        let rb = Rc::clone(rb);
        Tensor::custom(y, &[n_out, co], vec![self.clone(), weight.clone()], move |g, needs| {
            let mut gx = needs[0].then(|| vec![T::zero(); x.len()]);
            let mut gw = needs[1].then(|| vec![T::zero(); w.len()]);
            let mut gg = Vec::new();
            let mut xb = Vec::new();
            let mut db = Vec::new();
            for (k, pr) in rb.pairs.iter().enumerate() {
                if pr.is_empty() {
                    continue;
                }
                gather_rows(g, co, pr.iter().map(|p| p.1 as usize), &mut gg);
                if let Some(gw) = gw.as_mut() {
                    gather_rows(&x, ci, pr.iter().map(|p| p.0 as usize), &mut xb);
                    gemm(
                        Mat::new(&xb, pr.len(), ci).t(),
                        Mat::new(&gg, pr.len(), co),
                        &mut gw[k * ci * co..(k + 1) * ci * co],
                        T::one(),
                    );
                }
                if let Some(gx) = gx.as_mut() {
                    db.resize(pr.len() * ci, T::zero());
                    gemm(Mat::new(&gg, pr.len(), co), Mat::new(&w[k * ci * co..], ci, co).t(), &mut db, T::zero());
                    for (j, p) in pr.iter().enumerate() {
                        let i = p.0 as usize;
                        gx[i * ci..(i + 1) * ci].iter_mut().zip(&db[j * ci..(j + 1) * ci]).for_each(|(a, b)| *a += *b);
                    }
                }
            }
            vec![gx, gw]
        })
    }

    /// Scatters site features `[N, C]` into a dense `[B, C, T, H, W]` grid
    /// (zeros at inactive sites).
    pub fn sparse_to_dense(&self, sites: &[Site], batch: usize, extent: [usize; 3]) -> Tensor<T> {
        let c = self.dim(1);
        assert_eq!(self.dim(0), sites.len(), "sparse_to_dense: site count mismatch");
        let vol: usize = extent.iter().product();
        let flat: Vec<usize> = sites
            .iter()
            .map(|s| {
                assert!(s[0] < batch, "site batch index out of range");
                (s[1] * extent[1] + s[2]) * extent[2] + s[3]
            })
            .collect();
        let bidx: Vec<usize> = sites.iter().map(|s| s[0]).collect();
        let x = self.data();
        let mut out = vec![T::zero(); batch * c * vol];
        for (n, (&f, &b)) in flat.iter().zip(&bidx).enumerate() {
            for ch in 0..c {
                out[(b * c + ch) * vol + f] = x[n * c + ch];
            }
        }
        let shape = [batch, c, extent[0], extent[1], extent[2]];
        Tensor::custom(out, &shape, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); flat.len() * c];
            for (n, (&f, &b)) in flat.iter().zip(&bidx).enumerate() {
                for ch in 0..c {
                    gx[n * c + ch] = g[(b * c + ch) * vol + f];
                }
            }
            vec![Some(gx)]
        })
    }
}

/// Rearranges a dense conv weight `[Co, Ci, kT, kH, kW]` into the sparse
/// layout `[K, Ci, Co]`.
pub fn dense_to_sparse_weight<T: Copy + Default>(w: &[T], co: usize, ci: usize, kvol: usize) -> Vec<T> {
    let mut out = vec![T::default(); kvol * ci * co];
    for o in 0..co {
        for i in 0..ci {
            for k in 0..kvol {
                out[(k * ci + i) * co + o] = w[(o * ci + i) * kvol + k];
            }
        }
    }
    out
}
