//! Occupancy and flow evaluation: PR-AUC, Soft-IoU, end-point error and the
//! flow-grounded occupancy metrics.

mod auc;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use auc::{pr_auc, pr_auc_exhaustive, PrCounts};

use crate::losses::warp;
use crate::model::Prediction;
use crate::scenario::GroundTruth;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const DEFAULT_THRESHOLDS: usize = 100;

/// Soft-IoU averaged over the `waypoints` equal chunks of `pred`/`gt`.
pub fn soft_iou(pred: &[f64], gt: &[f64], waypoints: usize) -> Result<f64> {
    Ok(soft_iou_per_waypoint(pred, gt, waypoints)?.iter().sum::<f64>() / waypoints as f64)
}

pub fn soft_iou_per_waypoint(pred: &[f64], gt: &[f64], waypoints: usize) -> Result<Vec<f64>> {
    if pred.len() != gt.len() || waypoints == 0 || pred.len() % waypoints != 0 {
        return Err(Error::Shape(format!("soft_iou: {} vs {} values over {waypoints} waypoints", pred.len(), gt.len())));
    }
    let n = pred.len() / waypoints;
    Ok(pred
        .chunks(n)
        .zip(gt.chunks(n))
        .map(|(p, g)| {
            let (mut i, mut sp, mut sg) = (0.0, 0.0, 0.0);
            for (&p, &g) in p.iter().zip(g) {
                i += p * g;
                sp += p;
                sg += g;
            }
            let u = sp + sg - i;
            if u > 0.0 {
                i / u
            } else {
                0.0
            }
        })
        .collect())
}

/// Sum of flow errors and the occupied-cell count for one waypoint.
/// `flow`: `[2, cells]`; `occ`: `[cells]`.
fn epe_sums(pred: &[f64], gt: &[f64], occ: &[f64]) -> (f64, usize) {
    let n = occ.len();
    let (mut s, mut k) = (0.0, 0);
    for i in 0..n {
        if occ[i] > 0.0 {
            s += (pred[i] - gt[i]).hypot(pred[n + i] - gt[n + i]);
            k += 1;
        }
    }
    (s, k)
}

/// Mean L2 flow error over occupied cells pooled across waypoints.
/// `flow`: `[T, 2, cells]`, `occ`: `[T, cells]`.
pub fn epe(pred_flow: &[f64], gt_flow: &[f64], gt_occ: &[f64], waypoints: usize) -> Result<f64> {
    let per = epe_parts(pred_flow, gt_flow, gt_occ, waypoints)?;
    let (s, k) = per.iter().fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(if k == 0 { 0.0 } else { s / k as f64 })
}

fn epe_parts(pred_flow: &[f64], gt_flow: &[f64], gt_occ: &[f64], waypoints: usize) -> Result<Vec<(f64, usize)>> {
    if waypoints == 0 || pred_flow.len() != gt_flow.len() || gt_flow.len() != 2 * gt_occ.len() || gt_occ.len() % waypoints != 0 {
        return Err(Error::Shape(format!(
            "epe: flows {} / {} vs occupancy {} over {waypoints} waypoints",
            pred_flow.len(),
            gt_flow.len(),
            gt_occ.len()
        )));
    }
    let n = gt_occ.len() / waypoints;
    Ok((0..waypoints)
        .map(|t| epe_sums(&pred_flow[2 * t * n..2 * (t + 1) * n], &gt_flow[2 * t * n..2 * (t + 1) * n], &gt_occ[t * n..(t + 1) * n]))
        .collect())
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn check_pair(pred: &Prediction, gt: &GroundTruth) -> Result<()> {
    if pred.grid != gt.grid {
        return Err(Error::Shape(format!("prediction grid {:?} differs from ground truth {:?}", pred.grid, gt.grid)));
    }
    if pred.waypoints() != gt.n_waypoints {
        return Err(Error::Shape(format!("{} predicted waypoints vs {} in ground truth", pred.waypoints(), gt.n_waypoints)));
    }
    pred.validate()
}

/// Flow-grounded scores `[T, cells]`: the ground-truth observed occupancy
/// of the previous waypoint warped by the predicted flow, times the
/// predicted observed occupancy.
pub fn grounded_scores(pred: &Prediction, gt: &GroundTruth) -> Result<Vec<f64>> {
    check_pair(pred, gt)?;
    let (t, h) = (gt.n_waypoints, gt.size());
    let cells = h * h;
    let prev = Tensor::<f64>::new(to_f64(&gt.observed[..t * cells]), &[t, h, h]);
    let flow = Tensor::<f64>::new(to_f64(&pred.flow), &[t, 2, h, h]);
    let w = warp(&prev, &flow)?;
    Ok(w.data().iter().zip(&pred.observed).map(|(&w, &o)| w * o as f64).collect())
}

/// `(auc, soft_iou)` of the flow-grounded scores against future observed
/// occupancy.
pub fn flow_grounded(pred: &Prediction, gt: &GroundTruth, n_thresholds: usize) -> Result<(f64, f64)> {
    let s = grounded_scores(pred, gt)?;
    let g = to_f64(gt.future_observed());
    Ok((pr_auc(&s, &g, n_thresholds)?, soft_iou(&s, &g, gt.n_waypoints)?))
}

pub const METRIC_NAMES: [&str; 7] = [
    "observed_auc",
    "observed_soft_iou",
    "occluded_auc",
    "occluded_soft_iou",
    "flow_epe",
    "flow_grounded_auc",
    "flow_grounded_soft_iou",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaypointMetrics {
    pub observed_auc: f64,
    pub observed_soft_iou: f64,
    pub occluded_auc: f64,
    pub occluded_soft_iou: f64,
    pub flow_epe: f64,
    pub flow_grounded_auc: f64,
    pub flow_grounded_soft_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub observed_auc: f64,
    pub observed_soft_iou: f64,
    pub occluded_auc: f64,
    pub occluded_soft_iou: f64,
    pub flow_epe: f64,
    pub flow_grounded_auc: f64,
    pub flow_grounded_soft_iou: f64,
    pub n_scenarios: usize,
    pub per_waypoint: Vec<WaypointMetrics>,
    /// Conditions under which a metric fell back to its defined default.
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn check_metric_name(name: &str) -> Result<()> {
        if METRIC_NAMES.contains(&name) {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown metric `{name}`; expected one of {}", METRIC_NAMES.join(", "))))
        }
    }

    pub fn metric(&self, name: &str) -> Result<f64> {
        Self::check_metric_name(name)?;
        Ok(match name {
            "observed_auc" => self.observed_auc,
            "observed_soft_iou" => self.observed_soft_iou,
            "occluded_auc" => self.occluded_auc,
            "occluded_soft_iou" => self.occluded_soft_iou,
            "flow_epe" => self.flow_epe,
            "flow_grounded_auc" => self.flow_grounded_auc,
            _ => self.flow_grounded_soft_iou,
        })
    }

    /// A score where larger is better (EPE is negated).
    pub fn score(&self, name: &str) -> Result<f64> {
        let v = self.metric(name)?;
        Ok(if name == "flow_epe" { -v } else { v })
    }

    pub fn to_text(&self, per_waypoint: bool) -> String {
        let mut s = String::new();
        for name in METRIC_NAMES {
            let _ = writeln!(s, "{name:<24} {:.6}", self.metric(name).expect("known name"));
        }
        let _ = writeln!(s, "{:<24} {}", "n_scenarios", self.n_scenarios);
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        if per_waypoint {
            let _ = writeln!(s, "\n{:>3} {}", "t", METRIC_NAMES.map(|n| format!("{n:>23}")).join(""));
            for (t, m) in self.per_waypoint.iter().enumerate() {
                let v = [m.observed_auc, m.observed_soft_iou, m.occluded_auc, m.occluded_soft_iou, m.flow_epe, m.flow_grounded_auc, m.flow_grounded_soft_iou];
                let _ = writeln!(s, "{:>3} {}", t + 1, v.map(|x| format!("{x:>23.6}")).join(""));
            }
        }
        s
    }
}

/// Per-waypoint statistics of one scenario.
struct ScenarioStats {
    obs: Vec<PrCounts>,
    occl: Vec<PrCounts>,
    grounded: Vec<PrCounts>,
    obs_iou: Vec<f64>,
    occl_iou: Vec<f64>,
    grounded_iou: Vec<f64>,
    epe: Vec<(f64, usize)>,
}

fn scenario_stats(pred: &Prediction, gt: &GroundTruth, n_thresholds: usize) -> Result<ScenarioStats> {
    check_pair(pred, gt)?;
    let t = gt.n_waypoints;
    let cells = gt.grid.cells();
    let (po, pc) = (to_f64(&pred.observed), to_f64(&pred.occluded));
    let (go, gc) = (to_f64(gt.future_observed()), to_f64(gt.future_occluded()));
    let grounded = grounded_scores(pred, gt)?;
    let counts = |p: &[f64], g: &[f64]| -> Result<Vec<PrCounts>> {
        (0..t)
            .map(|k| {
                let mut c = PrCounts::new(n_thresholds)?;
                c.add(&p[k * cells..(k + 1) * cells], &g[k * cells..(k + 1) * cells])?;
                Ok(c)
            })
            .collect()
    };
    let union: Vec<f64> = go.iter().zip(&gc).map(|(a, b)| a.max(*b)).collect();
    Ok(ScenarioStats {
        obs: counts(&po, &go)?,
        occl: counts(&pc, &gc)?,
        grounded: counts(&grounded, &go)?,
        obs_iou: soft_iou_per_waypoint(&po, &go, t)?,
        occl_iou: soft_iou_per_waypoint(&pc, &gc, t)?,
        grounded_iou: soft_iou_per_waypoint(&grounded, &go, t)?,
        epe: epe_parts(&to_f64(&pred.flow), &to_f64(&gt.flow), &union, t)?,
    })
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |a, x| (a.0 + x, a.1 + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Evaluates matched predictions and ground truths keyed by scenario id.
/// AUCs pool cells over all scenarios and waypoints; Soft-IoU and EPE are
/// computed per scenario and averaged.
pub fn evaluate(preds: &BTreeMap<String, Prediction>, gts: &BTreeMap<String, GroundTruth>, n_thresholds: usize) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    if let Some(id) = preds.keys().find(|k| !gts.contains_key(*k)) {
        return Err(Error::Data(format!("prediction for unknown scenario `{id}`")));
    }
    if let Some(id) = gts.keys().find(|k| !preds.contains_key(*k)) {
        return Err(Error::Data(format!("no prediction for scenario `{id}`")));
    }
    let stats: Vec<ScenarioStats> = preds.iter().map(|(id, p)| scenario_stats(p, &gts[id], n_thresholds)).collect::<Result<_>>()?;
    let t = stats[0].obs.len();
    if stats.iter().any(|s| s.obs.len() != t) {
        return Err(Error::Shape("scenarios disagree on the waypoint count".into()));
    }
    let mut warnings = Vec::new();
    let mut pooled = |name: &str, pick: &dyn Fn(&ScenarioStats) -> &Vec<PrCounts>| -> Result<(f64, Vec<f64>)> {
        let mut total = PrCounts::new(n_thresholds)?;
        let mut per = Vec::with_capacity(t);
        for k in 0..t {
            let mut c = PrCounts::new(n_thresholds)?;
            for s in &stats {
                c.merge(&pick(s)[k]);
            }
            per.push(c.auc().unwrap_or(0.0));
            total.merge(&c);
        }
        let auc = total.auc().unwrap_or_else(|| {
            warnings.push(format!("{name}: ground truth has no positive cells; AUC set to 0"));
            0.0
        });
        Ok((auc, per))
    };
    let (observed_auc, obs_w) = pooled("observed_auc", &|s| &s.obs)?;
    let (occluded_auc, occl_w) = pooled("occluded_auc", &|s| &s.occl)?;
    let (flow_grounded_auc, gr_w) = pooled("flow_grounded_auc", &|s| &s.grounded)?;
    let iou = |pick: &dyn Fn(&ScenarioStats) -> &Vec<f64>| -> (f64, Vec<f64>) {
        let per: Vec<f64> = (0..t).map(|k| mean(stats.iter().map(|s| pick(s)[k]))).collect();
        (mean(stats.iter().map(|s| mean(pick(s).iter().copied()))), per)
    };
    let (observed_soft_iou, obs_iou_w) = iou(&|s| &s.obs_iou);
    let (occluded_soft_iou, occl_iou_w) = iou(&|s| &s.occl_iou);
    let (flow_grounded_soft_iou, gr_iou_w) = iou(&|s| &s.grounded_iou);
    let ratio = |(s, k): (f64, usize)| if k == 0 { 0.0 } else { s / k as f64 };
    let flow_epe = mean(stats.iter().map(|s| ratio(s.epe.iter().fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1)))));
    let per_waypoint = (0..t)
        .map(|k| WaypointMetrics {
            observed_auc: obs_w[k],
            observed_soft_iou: obs_iou_w[k],
            occluded_auc: occl_w[k],
            occluded_soft_iou: occl_iou_w[k],
            flow_epe: mean(stats.iter().map(|s| ratio(s.epe[k]))),
            flow_grounded_auc: gr_w[k],
            flow_grounded_soft_iou: gr_iou_w[k],
        })
        .collect();
    Ok(EvalReport {
        observed_auc,
        observed_soft_iou,
        occluded_auc,
        occluded_soft_iou,
        flow_epe,
        flow_grounded_auc,
        flow_grounded_soft_iou,
        n_scenarios: stats.len(),
        per_waypoint,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GridSpec;
    use crate::tensor::testutil::rand_vec;

    /// A square translating by `v` cells per waypoint on a `n`-cell grid.
    fn moving_square(n: usize, t: usize, v: (i64, i64)) -> GroundTruth {
        let grid = GridSpec::centered(n as f64, 1.0).unwrap();
        let cells = n * n;
        let mut observed = vec![0f32; (t + 1) * cells];
        let mut flow = vec![0f32; 2 * t * cells];
        for k in 0..=t {
            for y in 0..4 {
                for x in 0..4 {
                    let (yy, xx) = (4 + y + k as i64 * v.1, 4 + x + k as i64 * v.0);
                    if (0..n as i64).contains(&yy) && (0..n as i64).contains(&xx) {
                        let i = yy as usize * n + xx as usize;
                        observed[k * cells + i] = 1.0;
                        if k > 0 {
                            flow[(k - 1) * 2 * cells + i] = -v.0 as f32;
                            flow[((k - 1) * 2 + 1) * cells + i] = -v.1 as f32;
                        }
                    }
                }
            }
        }
        GroundTruth { grid, n_waypoints: t, observed, occluded: vec![0.0; (t + 1) * cells], flow }
    }

    #[test]
    fn soft_iou_closed_forms() {
        let g = [1.0, 1.0, 0.0, 0.0];
        assert_eq!(soft_iou(&g, &g, 1).unwrap(), 1.0);
        assert_eq!(soft_iou(&[0.0, 0.0, 1.0, 1.0], &g, 1).unwrap(), 0.0);
        assert!((soft_iou(&[0.5, 0.5, 0.0, 0.0], &g, 1).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(soft_iou(&[0.0; 4], &[0.0; 4], 2).unwrap(), 0.0);
        let (p, q) = (rand_vec(32, 1), rand_vec(32, 2));
        let (p, q): (Vec<f64>, Vec<f64>) = (p.iter().map(|v| v.abs()).collect(), q.iter().map(|v| v.abs()).collect());
        assert_eq!(soft_iou(&p, &q, 4).unwrap(), soft_iou(&q, &p, 4).unwrap());
    }

    #[test]
    fn epe_three_four_five() {
        let occ = [1.0, 0.0, 1.0, 0.0];
        let gt = vec![0.0; 8];
        let pred = [3.0, 9.0, 3.0, 9.0, 4.0, 9.0, 4.0, 9.0];
        assert_eq!(epe(&pred, &gt, &occ, 1).unwrap(), 5.0);
        assert_eq!(epe(&gt, &gt, &occ, 1).unwrap(), 0.0);
        assert_eq!(epe(&pred, &gt, &[0.0; 4], 1).unwrap(), 0.0);
    }

    #[test]
    fn grounded_perfect_vs_zero_flow() {
        let gt = moving_square(24, 4, (2, 1));
        let perfect = Prediction::from_ground_truth(&gt);
        let (auc, iou) = flow_grounded(&perfect, &gt, 100).unwrap();
        assert!(auc >= 0.99 && iou > 0.99, "{auc} {iou}");
        let mut still = perfect.clone();
        still.flow.iter_mut().for_each(|f| *f = 0.0);
        let (auc0, _) = flow_grounded(&still, &gt, 100).unwrap();
        assert!(auc0 < auc);
        let mut empty = perfect.clone();
        empty.observed.iter_mut().for_each(|p| *p = 0.0);
        assert_eq!(flow_grounded(&empty, &gt, 100).unwrap().0, 0.0);
    }

    #[test]
    fn grounded_reduces_to_occupancy_auc_without_motion() {
        let gt = moving_square(16, 3, (0, 0));
        let mut p = Prediction::from_ground_truth(&gt);
        let noise = rand_vec(p.observed.len(), 9);
        p.observed.iter_mut().zip(noise).for_each(|(o, n)| *o = (*o * 0.6 + 0.2 + 0.2 * n as f32).clamp(0.0, 1.0));
        let plain = pr_auc(&to_f64(&p.observed), &to_f64(gt.future_observed()), 100).unwrap();
        let s = grounded_scores(&p, &gt).unwrap();
        // zero motion: the warped previous occupancy equals the target mask
        let masked = pr_auc(&s, &to_f64(gt.future_observed()), 100).unwrap();
        assert!(masked >= plain);
        assert_eq!(masked, 1.0);
    }

    #[test]
    fn evaluate_pooling_and_errors() {
        let gt = moving_square(16, 2, (1, 0));
        let mut p = Prediction::from_ground_truth(&gt);
        p.observed.iter_mut().for_each(|v| *v = *v * 0.7 + 0.1);
        p.flow.iter_mut().for_each(|f| *f += 0.5);
        let one_p = BTreeMap::from([("a".to_string(), p.clone())]);
        let one_g = BTreeMap::from([("a".to_string(), gt.clone())]);
        let r1 = evaluate(&one_p, &one_g, 100).unwrap();
        let (a, i) = flow_grounded(&p, &gt, 100).unwrap();
        assert_eq!((r1.flow_grounded_auc, r1.flow_grounded_soft_iou), (a, i));
        assert_eq!(r1.occluded_auc, 0.0);
        assert_eq!(r1.warnings.len(), 1);
        let two_p = BTreeMap::from([("a".to_string(), p.clone()), ("b".to_string(), p.clone())]);
        let two_g = BTreeMap::from([("a".to_string(), gt.clone()), ("b".to_string(), gt.clone())]);
        let r2 = evaluate(&two_p, &two_g, 100).unwrap();
        assert_eq!(r2.per_waypoint, r1.per_waypoint);
        assert_eq!(r2.observed_auc, r1.observed_auc);
        assert_eq!(r2.flow_epe, r1.flow_epe);
        assert!(evaluate(&BTreeMap::new(), &one_g, 100).is_err());
        assert!(evaluate(&two_p, &one_g, 100).is_err());
        assert!(evaluate(&one_p, &two_g, 100).is_err());
        assert!(r1.to_text(true).contains("flow_grounded_auc"));
        assert_eq!(r1.metric("flow_epe").unwrap(), -r1.score("flow_epe").unwrap());
    }
}
