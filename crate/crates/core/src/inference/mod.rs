//! Test-time augmentation, ensembling and the prediction archive.

mod archive;

pub use archive::{ArchiveManifest, PredictionArchive};

use crate::model::Prediction;
use crate::raster::{rotate180_dense, rotate180_sparse, RasterStack};
use crate::{Error, Result};

/// Default weight of the rotated pass in the flow average.
pub const TTA_WEIGHT: f64 = 0.25;

pub fn rotate180_inputs(r: &RasterStack) -> RasterStack {
    RasterStack { size: r.size, dense2d: rotate180_dense(&r.dense2d, r.size), sparse_st: rotate180_sparse(&r.sparse_st) }
}

fn rotate_planes(v: &[f32], plane: usize, negate: bool) -> Vec<f32> {
    let mut out = vec![0f32; v.len()];
    for (src, dst) in v.chunks(plane).zip(out.chunks_mut(plane)) {
        for (i, &x) in src.iter().enumerate() {
            dst[plane - 1 - i] = if negate { -x } else { x };
        }
    }
    out
}

/// Maps a prediction made in the π-rotated frame back to the original
/// frame: every plane is index-reversed and flow vectors change sign.
pub fn rotate180_prediction(p: &Prediction) -> Prediction {
    let plane = p.grid.cells();
    Prediction {
        grid: p.grid,
        observed: rotate_planes(&p.observed, plane, false),
        occluded: rotate_planes(&p.occluded, plane, false),
        flow: rotate_planes(&p.flow, plane, true),
    }
}

/// Blends the flow of the rotated pass into the base prediction with
/// `weight`; occupancy is the base occupancy unchanged.
pub fn tta_predict(
    mut predict: impl FnMut(&[&RasterStack]) -> Result<Vec<Prediction>>,
    inputs: &[&RasterStack],
    weight: f64,
) -> Result<Vec<Prediction>> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::Config(format!("TTA weight must lie in [0, 1], got {weight}")));
    }
    let base = predict(inputs)?;
    if weight == 0.0 {
        return Ok(base);
    }
    let rotated: Vec<RasterStack> = inputs.iter().map(|r| rotate180_inputs(r)).collect();
    let refs: Vec<&RasterStack> = rotated.iter().collect();
    let aug = predict(&refs)?;
    if aug.len() != base.len() {
        return Err(Error::Shape("augmented pass returned a different batch size".into()));
    }
    let (wb, wa) = ((1.0 - weight) as f32, weight as f32);
    Ok(base
        .into_iter()
        .zip(&aug)
        .map(|(mut b, a)| {
            let d = rotate180_prediction(a);
            b.flow.iter_mut().zip(&d.flow).for_each(|(f, g)| *f = wb * *f + wa * g);
            b
        })
        .collect())
}

/// Per-cell weighted average of occupancy and flow.
pub fn ensemble(preds: &[Prediction], weights: &[f64]) -> Result<Prediction> {
    if preds.is_empty() || preds.len() != weights.len() {
        return Err(Error::Config(format!("{} ensemble members with {} weights", preds.len(), weights.len())));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || weights.iter().any(|&w| w < 0.0) {
        return Err(Error::Config(format!("ensemble weights must be non-negative and sum to 1, got {weights:?}")));
    }
    let first = &preds[0];
    if preds.iter().any(|p| p.grid != first.grid || p.observed.len() != first.observed.len() || p.flow.len() != first.flow.len()) {
        return Err(Error::Shape("ensemble members differ in grid or waypoint count".into()));
    }
    let mix = |pick: fn(&Prediction) -> &Vec<f32>| -> Vec<f32> {
        let n = pick(first).len();
        (0..n).map(|i| preds.iter().zip(weights).map(|(p, &w)| w * pick(p)[i] as f64).sum::<f64>() as f32).collect()
    };
    let mut out = Prediction { grid: first.grid, observed: mix(|p| &p.observed), occluded: mix(|p| &p.occluded), flow: mix(|p| &p.flow) };
    // guard against rounding just outside [0, 1]
    out.observed.iter_mut().chain(out.occluded.iter_mut()).for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{GridSpec, SparseRaster};
    use crate::tensor::testutil::rand_vec;

    fn pred(seed: u64, n: usize, t: usize) -> Prediction {
        let grid = GridSpec::centered(n as f64, 1.0).unwrap();
        let c = t * n * n;
        let p = |s| rand_vec(c, s).iter().map(|v| ((v + 1.0) / 2.0) as f32).collect();
        Prediction { grid, observed: p(seed), occluded: p(seed + 1), flow: rand_vec(2 * c, seed + 2).iter().map(|&v| v as f32 * 3.0).collect() }
    }

    fn stack(n: usize) -> RasterStack {
        RasterStack {
            size: n,
            dense2d: rand_vec(crate::raster::DENSE_CHANNELS * n * n, 4).iter().map(|&v| v as f32).collect(),
            sparse_st: SparseRaster { extent: [11, n, n], sites: vec![[0, 1, 2]], features: vec![[1.0; 6]] },
        }
    }

    #[test]
    fn prediction_rotation_is_an_involution() {
        let p = pred(1, 6, 2);
        assert_eq!(rotate180_prediction(&rotate180_prediction(&p)), p);
        let r = stack(4);
        let back = rotate180_inputs(&rotate180_inputs(&r));
        assert_eq!(back.dense2d, r.dense2d);
        assert_eq!(back.sparse_st, r.sparse_st);
    }

    #[test]
    fn zero_weight_returns_base_and_occupancy_is_untouched() {
        let r = stack(4);
        let mut calls = 0;
        let mut f = |x: &[&RasterStack]| {
            calls += 1;
            Ok(vec![pred(x[0].dense2d[0].to_bits() as u64 % 97, 4, 2)])
        };
        let base = f(&[&r]).unwrap();
        let out = tta_predict(&mut f, &[&r], 0.0).unwrap();
        assert_eq!(out, base);
        let out = tta_predict(&mut f, &[&r], TTA_WEIGHT).unwrap();
        assert_eq!(out[0].observed, base[0].observed);
        assert_eq!(out[0].occluded, base[0].occluded);
        assert_ne!(out[0].flow, base[0].flow);
        assert_eq!(calls, 4);
    }

    #[test]
    fn equivariant_model_is_a_fixed_point() {
        // a model that is exactly π-equivariant: its output for rotated
        // input is the rotation of its output
        let core = pred(7, 4, 2);
        let r = stack(4);
        let f = |x: &[&RasterStack]| {
            let rotated = x[0].dense2d == rotate180_inputs(&r).dense2d;
            Ok(vec![if rotated { rotate180_prediction(&core) } else { core.clone() }])
        };
        let out = tta_predict(f, &[&r], 0.25).unwrap();
        for (a, b) in out[0].flow.iter().zip(&core.flow) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn ensemble_arithmetic() {
        let (a, b) = (pred(1, 3, 1), pred(5, 3, 1));
        assert_eq!(ensemble(&[a.clone(), a.clone()], &[0.5, 0.5]).unwrap().flow, a.flow);
        assert_eq!(ensemble(&[a.clone(), b.clone()], &[1.0, 0.0]).unwrap(), a);
        let mut x = a.clone();
        let mut y = a.clone();
        x.observed[0] = 0.2;
        y.observed[0] = 0.6;
        assert!((ensemble(&[x, y], &[0.5, 0.5]).unwrap().observed[0] - 0.4).abs() < 1e-7);
        assert!(ensemble(&[a.clone(), b.clone()], &[0.5, 0.6]).is_err());
        assert!(ensemble(&[a, pred(1, 4, 1)], &[0.5, 0.5]).is_err());
    }
}
