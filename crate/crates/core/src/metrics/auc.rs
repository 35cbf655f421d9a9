use crate::{Error, Result};

/// Pooled confusion counts at `n` linearly spaced thresholds
/// `τ_i = i / (n - 1)`; a cell is predicted positive at `τ_i` iff `p > τ_i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrCounts {
    n_thresholds: usize,
    /// `hist[k]`: cells predicted positive at exactly the first `k` thresholds.
    pos_hist: Vec<u64>,
    neg_hist: Vec<u64>,
}

impl PrCounts {
    pub fn new(n_thresholds: usize) -> Result<Self> {
        if n_thresholds < 2 {
            return Err(Error::Config(format!("need at least 2 thresholds, got {n_thresholds}")));
        }
        Ok(PrCounts { n_thresholds, pos_hist: vec![0; n_thresholds + 1], neg_hist: vec![0; n_thresholds + 1] })
    }

    pub fn n_thresholds(&self) -> usize {
        self.n_thresholds
    }

    pub fn threshold(&self, i: usize) -> f64 {
        i as f64 / (self.n_thresholds - 1) as f64
    }

    /// Number of thresholds strictly below `p`.
    fn bucket(&self, p: f64) -> usize {
        let n = self.n_thresholds;
        let mut k = (p * (n - 1) as f64).ceil().clamp(0.0, n as f64) as usize;
        while k > 0 && self.threshold(k - 1) >= p {
            k -= 1;
        }
        while k < n && self.threshold(k) < p {
            k += 1;
        }
        k
    }

    pub fn add(&mut self, pred: &[f64], gt: &[f64]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!("pr_auc: {} predictions vs {} labels", pred.len(), gt.len())));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g != 0.0 && g != 1.0 {
                return Err(Error::Data(format!("pr_auc: ground truth must be binary, got {g}")));
            }
            if !p.is_finite() {
                return Err(Error::Numerical("pr_auc: non-finite prediction".into()));
            }
            let k = self.bucket(p);
            if g == 1.0 {
                self.pos_hist[k] += 1;
            } else {
                self.neg_hist[k] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &PrCounts) {
        assert_eq!(self.n_thresholds, other.n_thresholds, "merging counts with different thresholds");
        self.pos_hist.iter_mut().zip(&other.pos_hist).for_each(|(a, b)| *a += b);
        self.neg_hist.iter_mut().zip(&other.neg_hist).for_each(|(a, b)| *a += b);
    }

    pub fn positives(&self) -> u64 {
        self.pos_hist.iter().sum()
    }

    /// `(tp, fp)` at each threshold in ascending order.
    pub fn confusion(&self) -> Vec<(u64, u64)> {
        let n = self.n_thresholds;
        let (mut tp, mut fp) = (0u64, 0u64);
        let mut out = vec![(0, 0); n];
        for i in (0..n).rev() {
            tp += self.pos_hist[i + 1];
            fp += self.neg_hist[i + 1];
            out[i] = (tp, fp);
        }
        out
    }

    /// Area under the precision-recall curve; `None` without positives.
    pub fn auc(&self) -> Option<f64> {
        let pos = self.positives();
        if pos == 0 {
            return None;
        }
        let mut conf = self.confusion();
        conf.reverse();
        Some(curve_area(conf, pos))
    }
}

/// Trapezoidal PR area from `(tp, fp)` pairs ordered by decreasing
/// threshold. Thresholds with no predicted positives are skipped and the
/// curve is extended to recall 0 at the maximum precision.
pub(crate) fn curve_area(points: impl IntoIterator<Item = (u64, u64)>, positives: u64) -> f64 {
    let pts: Vec<(f64, f64)> = points
        .into_iter()
        .filter(|&(tp, fp)| tp + fp > 0)
        .map(|(tp, fp)| (tp as f64 / positives as f64, tp as f64 / (tp + fp) as f64))
        .collect();
    let Some(max_p) = pts.iter().map(|p| p.1).reduce(f64::max) else {
        return 0.0;
    };
    let mut area = 0.0;
    let mut prev = (0.0, max_p);
    for p in pts {
        area += (p.0 - prev.0) * (p.1 + prev.1) / 2.0;
        prev = p;
    }
    area
}

/// Linear-threshold PR-AUC; 0 when the ground truth has no positives.
pub fn pr_auc(pred: &[f64], gt: &[f64], n_thresholds: usize) -> Result<f64> {
    let mut c = PrCounts::new(n_thresholds)?;
    c.add(pred, gt)?;
    Ok(c.auc().unwrap_or(0.0))
}

/// PR-AUC with a threshold at 0 and at every distinct prediction value
/// (rule `p > v`), i.e. the limit of infinitely many thresholds.
pub fn pr_auc_exhaustive(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("pr_auc: {} predictions vs {} labels", pred.len(), gt.len())));
    }
    let pos = gt.iter().filter(|&&g| g == 1.0).count() as u64;
    if pos == 0 {
        return Ok(0.0);
    }
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[b].total_cmp(&pred[a]));
    let mut pts = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let v = pred[order[i]];
        if v < 0.0 {
            break;
        }
        // threshold v: everything strictly above it is positive
        pts.push((tp, fp));
        while i < order.len() && pred[order[i]] == v {
            if gt[order[i]] == 1.0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if v == 0.0 {
            break;
        }
    }
    if pred.iter().all(|&p| p > 0.0) {
        pts.push((tp, fp));
    }
    Ok(curve_area(pts, pos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::rand_vec;

    fn labels(n: usize, seed: u64) -> Vec<f64> {
        rand_vec(n, seed).iter().map(|&v| f64::from(v > 0.3)).collect()
    }

    fn probs(n: usize, seed: u64) -> Vec<f64> {
        rand_vec(n, seed).iter().map(|&v| (v + 1.0) / 2.0).collect()
    }

    #[test]
    fn perfect_and_zero_predictions() {
        let g = labels(64, 1);
        assert_eq!(pr_auc(&g, &g, 100).unwrap(), 1.0);
        assert_eq!(pr_auc(&vec![0.0; 64], &g, 100).unwrap(), 0.0);
        assert_eq!(pr_auc_exhaustive(&g, &g).unwrap(), 1.0);
        assert_eq!(pr_auc(&probs(64, 2), &vec![0.0; 64], 100).unwrap(), 0.0);
    }

    #[test]
    fn bucket_matches_strict_comparison() {
        let c = PrCounts::new(100).unwrap();
        for p in [0.0, 1e-12, 1.0 / 99.0, 0.5, 0.999, 1.0, 2.0 / 99.0 + 1e-15] {
            let k = c.bucket(p);
            assert_eq!(k, (0..100).filter(|&i| p > c.threshold(i)).count(), "p = {p}");
        }
    }

    #[test]
    fn hand_computed_curve() {
        // thresholds 0 and 1 only; at 0 the three nonzero cells are positive
        let (p, g) = ([0.2, 0.7, 0.9, 0.0], [1.0, 0.0, 1.0, 1.0]);
        let auc = pr_auc(&p, &g, 2).unwrap();
        // one point (recall 2/3, precision 2/3) extended flat to recall 0
        assert!((auc - 4.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn exhaustive_is_rank_statistic() {
        let (p, g) = (probs(200, 3), labels(200, 4));
        let a = pr_auc_exhaustive(&p, &g).unwrap();
        let q: Vec<f64> = p.iter().map(|v| v.powi(3)).collect();
        assert!((a - pr_auc_exhaustive(&q, &g).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn merged_counts_pool_cells() {
        let (p, g) = (probs(100, 5), labels(100, 6));
        let mut a = PrCounts::new(100).unwrap();
        a.add(&p[..40], &g[..40]).unwrap();
        let mut b = PrCounts::new(100).unwrap();
        b.add(&p[40..], &g[40..]).unwrap();
        a.merge(&b);
        assert_eq!(a.auc().unwrap(), pr_auc(&p, &g, 100).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(pr_auc(&[0.5], &[0.5], 100).is_err());
        assert!(pr_auc(&[0.5, 0.1], &[1.0], 100).is_err());
        assert!(PrCounts::new(1).is_err());
    }
}
