//! Optimization loop, checkpoints and greedy weight averaging.

mod checkpoint;
mod optim;
mod swa;

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, LoadReport, NamedArray};
pub use optim::{clip_grad_norm, cosine_lr, global_norm, AdamW};
pub use swa::{running_average, swa_greedy, SwaOutcome};

use crate::config::{ExperimentConfig, RasterConfig};
use crate::losses::{compute_losses, LossBreakdown, Targets};
use crate::metrics::{evaluate, EvalReport, DEFAULT_THRESHOLDS};
use crate::model::{OccFlowModel, Prediction};
use crate::nn::{Ctx, ParamStore};
use crate::raster::{build_inputs, GridSpec, RasterStack};
use crate::scenario::{derive_ground_truth, generate_scenario, GeneratorConfig, GroundTruth, Scenario};
use crate::{Error, Result};

pub struct Sample {
    pub scenario: Scenario,
    pub gt: GroundTruth,
    inputs: Option<RasterStack>,
}

impl Sample {
    pub fn id(&self) -> &str {
        &self.scenario.id
    }
}

/// Scenarios with their ground truth. Network inputs are either cached or
/// rasterized on demand.
pub struct Dataset {
    pub samples: Vec<Sample>,
    input_grid: GridSpec,
    with_sparse: bool,
}

impl Dataset {
    pub fn from_scenarios(scenarios: Vec<Scenario>, raster: &RasterConfig, with_sparse: bool, cache: bool) -> Result<Self> {
        let input_grid = raster.input_grid()?;
        let output_grid = raster.output_grid()?;
        let samples = scenarios
            .into_iter()
            .map(|s| {
                let gt = derive_ground_truth(&s, &output_grid)?;
                let inputs = if cache { Some(build_inputs(&s, &input_grid, with_sparse)?) } else { None };
                Ok(Sample { scenario: s, gt, inputs })
            })
            .collect::<Result<_>>()?;
        let d = Dataset { samples, input_grid, with_sparse };
        d.check_unique_ids()?;
        Ok(d)
    }

    pub fn generate(seeds: &[u64], gen: &GeneratorConfig, raster: &RasterConfig, with_sparse: bool, cache: bool) -> Result<Self> {
        let scenarios = seeds.iter().map(|&s| generate_scenario(s, gen)).collect::<Result<_>>()?;
        Self::from_scenarios(scenarios, raster, with_sparse, cache)
    }

    fn check_unique_ids(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.samples {
            if !seen.insert(s.id()) {
                return Err(Error::Data(format!("duplicate scenario id `{}`", s.id())));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn inputs(&self, i: usize) -> Result<Cow<'_, RasterStack>> {
        let s = &self.samples[i];
        match &s.inputs {
            Some(r) => Ok(Cow::Borrowed(r)),
            None => Ok(Cow::Owned(build_inputs(&s.scenario, &self.input_grid, self.with_sparse)?)),
        }
    }

    pub fn ground_truths(&self) -> BTreeMap<String, GroundTruth> {
        self.samples.iter().map(|s| (s.id().to_string(), s.gt.clone())).collect()
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub model: OccFlowModel,
    pub params: ParamStore,
    pub opt: AdamW,
    pub step: u64,
    rng: ChaCha8Rng,
    log: Option<std::io::BufWriter<std::fs::File>>,
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new(cfg.model.seed);
        let model = OccFlowModel::new(&mut params, &cfg.model, &cfg.raster)?;
        let opt = AdamW::new(&params, &cfg.train);
        Ok(Trainer { cfg: cfg.clone(), model, params, opt, step: 0, rng: ChaCha8Rng::seed_from_u64(cfg.train.seed), log: None })
    }

    /// Appends one JSON record per step to `path`.
    pub fn log_to(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        self.log = Some(std::io::BufWriter::new(f));
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        self.cfg.fingerprint()
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.cfg.train.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        match self.cfg.train.max_steps {
            0 => self.cfg.train.epochs * self.steps_per_epoch(n),
            m => m,
        }
    }

    /// Forward with future-conditioned latents, loss, backward and one
    /// optimizer update at learning rate `lr`.
    pub fn train_step(&mut self, data: &Dataset, batch: &[usize], lr: f64) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let inputs: Vec<Cow<'_, RasterStack>> = batch.iter().map(|&i| data.inputs(i)).collect::<Result<_>>()?;
        let refs: Vec<&RasterStack> = inputs.iter().map(|c| c.as_ref()).collect();
        let gts: Vec<&GroundTruth> = batch.iter().map(|&i| &data.samples[i].gt).collect();
        let targets = Targets::<f32>::from_ground_truth(&gts)?;
        let step = self.step + 1;
        let (mut grads, loss) = {
            let ctx: Ctx<f32> = Ctx::train(&self.params);
            let future = self.model.has_latent().then(|| targets.future_context());
            let out = self.model.forward(&ctx, &refs, future.as_ref(), &mut self.rng).map_err(|e| diagnose(step, e))?;
            let (total, loss) = compute_losses(&out.pred, &targets, out.latent.as_ref(), &self.cfg.loss).map_err(|e| diagnose(step, e))?;
            let g = total.backward();
            (ctx.param_grads(&g), loss)
        };
        if grads.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("step {step}: non-finite gradient (loss {:?})", loss)));
        }
        let grad_norm = clip_grad_norm(&mut grads, self.cfg.train.grad_clip);
        self.opt.step(&mut self.params, &grads, lr)?;
        self.step = step;
        let rec = StepRecord { step, epoch: 0, lr, loss, grad_norm };
        Ok(rec)
    }

    fn record(&mut self, rec: &StepRecord) -> Result<()> {
        if let Some(w) = &mut self.log {
            serde_json::to_writer(&mut *w, rec)?;
            writeln!(w)?;
            w.flush()?;
        }
        Ok(())
    }

    /// Epoch order for `epoch`, determined by the training seed.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(self.cfg.train.seed.wrapping_add(1 + epoch as u64)));
        idx
    }

    /// Cosine-annealed training over `data`. `on_step` sees every record.
    pub fn fit(&mut self, data: &Dataset, mut on_step: impl FnMut(&Trainer, &StepRecord)) -> Result<Vec<StepRecord>> {
        self.fit_until(data, |t, r| {
            on_step(t, r);
            Ok(ControlFlow::Continue(()))
        })
    }

    /// Like [`Trainer::fit`], but `on_step` may stop training early. The
    /// schedule still spans the full step budget.
    pub fn fit_until(
        &mut self,
        data: &Dataset,
        mut on_step: impl FnMut(&Trainer, &StepRecord) -> Result<ControlFlow<()>>,
    ) -> Result<Vec<StepRecord>> {
        if data.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let total = self.total_steps(data.len());
        let per_epoch = self.steps_per_epoch(data.len());
        let bs = self.cfg.train.batch_size;
        let mut out = Vec::with_capacity(total);
        let start = self.step as usize;
        for k in start..total {
            let (epoch, j) = (k / per_epoch, k % per_epoch);
            let order = self.epoch_order(data.len(), epoch);
            let batch = &order[j * bs..((j + 1) * bs).min(order.len())];
            let lr = cosine_lr(k, total, self.cfg.train.lr_init, self.cfg.train.min_lr)?;
            let mut rec = self.train_step(data, batch, lr)?;
            rec.epoch = epoch;
            self.record(&rec)?;
            let flow = on_step(self, &rec)?;
            out.push(rec);
            if flow.is_break() {
                break;
            }
        }
        Ok(out)
    }

    /// One extra epoch at a constant reduced learning rate, snapshotting
    /// equally spaced weights, then greedy averaging on `val`.
    pub fn fit_swa(&mut self, data: &Dataset, val: &Dataset) -> Result<SwaOutcome> {
        let per_epoch = self.steps_per_epoch(data.len());
        let n_snap = self.cfg.swa.n_snapshots.clamp(1, per_epoch);
        let lr = self.cfg.train.lr_init * self.cfg.swa.lr_factor;
        let epoch = self.cfg.train.epochs;
        let order = self.epoch_order(data.len(), epoch);
        let bs = self.cfg.train.batch_size;
        let mut candidates = Vec::with_capacity(n_snap);
        for j in 0..per_epoch {
            let batch = &order[j * bs..((j + 1) * bs).min(order.len())];
            let mut rec = self.train_step(data, batch, lr)?;
            rec.epoch = epoch;
            self.record(&rec)?;
            // snapshot at the end of each 1/n_snap of the epoch
            if (j + 1) * n_snap / per_epoch > candidates.len() {
                candidates.push(self.params.flat());
            }
        }
        let metric = self.cfg.swa.selection_metric.clone();
        let base = self.params.clone();
        let outcome = swa_greedy(&candidates, |flat| {
            let mut ps = base.clone();
            ps.load_flat(flat);
            self.evaluate_with(&ps, val)?.score(&metric)
        })?;
        self.params.load_flat(&outcome.params);
        Ok(outcome)
    }

    pub fn predict(&self, data: &Dataset) -> Result<BTreeMap<String, Prediction>> {
        predict_dataset(&self.model, &self.params, data, self.cfg.train.batch_size)
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<EvalReport> {
        self.evaluate_with(&self.params, data)
    }

    fn evaluate_with(&self, ps: &ParamStore, data: &Dataset) -> Result<EvalReport> {
        let preds = predict_dataset(&self.model, ps, data, self.cfg.train.batch_size)?;
        evaluate(&preds, &data.ground_truths(), DEFAULT_THRESHOLDS)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.params, Some(&self.opt), self.step, &self.fingerprint())
    }

    pub fn restore(&mut self, ck: &Checkpoint, allow_mismatch: bool) -> Result<LoadReport> {
        let fp = self.fingerprint();
        let r = ck.restore(&mut self.params, Some(&mut self.opt), &fp, allow_mismatch)?;
        self.step = ck.step;
        Ok(r)
    }
}

fn diagnose(step: u64, e: Error) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("step {step}: {m}")),
        other => other,
    }
}

/// Eval-mode predictions for every scenario, in batches.
pub fn predict_dataset(model: &OccFlowModel, ps: &ParamStore, data: &Dataset, batch_size: usize) -> Result<BTreeMap<String, Prediction>> {
    let mut out = BTreeMap::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let inputs: Vec<Cow<'_, RasterStack>> = chunk.iter().map(|&i| data.inputs(i)).collect::<Result<_>>()?;
        let refs: Vec<&RasterStack> = inputs.iter().map(|c| c.as_ref()).collect();
        for (&i, p) in chunk.iter().zip(model.predict(ps, &refs)?) {
            out.insert(data.samples[i].id().to_string(), p);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ExperimentConfig {
        let mut c = ExperimentConfig::desk();
        c.raster.extent_m = 20.0;
        c.train.batch_size = 2;
        c.train.max_steps = 2;
        c.data.generator.n_vehicles = [3, 3];
        c
    }

    fn data(c: &ExperimentConfig, n: u64) -> Dataset {
        Dataset::generate(&(0..n).collect::<Vec<_>>(), &c.data.generator, &c.raster, false, true).unwrap()
    }

    #[test]
    fn descent_on_repeated_batch() {
        let c = toy();
        let d = data(&c, 2);
        let mut t = Trainer::new(&c).unwrap();
        let a = t.train_step(&d, &[0, 1], 1e-3).unwrap();
        let b = t.train_step(&d, &[0, 1], 1e-3).unwrap();
        assert!(b.loss.total <= a.loss.total, "{} then {}", a.loss.total, b.loss.total);
        assert!(a.grad_norm > 0.0 && a.grad_norm.is_finite());
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut c = toy();
        c.train.weight_decay = 0.0;
        let d = data(&c, 2);
        let mut t = Trainer::new(&c).unwrap();
        let before = t.params.flat();
        t.train_step(&d, &[0], 0.0).unwrap();
        assert_eq!(t.params.flat(), before);
    }

    #[test]
    fn fit_is_deterministic_and_logs() {
        let c = toy();
        let d = data(&c, 3);
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("m.jsonl");
        let mut a = Trainer::new(&c).unwrap();
        a.log_to(&log).unwrap();
        let ra = a.fit(&d, |_, _| ()).unwrap();
        let rb = Trainer::new(&c).unwrap().fit(&d, |_, _| ()).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(ra.len(), 2);
        let lines: Vec<StepRecord> = std::fs::read_to_string(&log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines, ra);
    }

    #[test]
    fn early_stop_keeps_the_schedule() {
        let mut c = toy();
        c.train.max_steps = 4;
        let d = data(&c, 2);
        let full = Trainer::new(&c).unwrap().fit(&d, |_, _| ()).unwrap();
        let cut = Trainer::new(&c)
            .unwrap()
            .fit_until(&d, |_, r| Ok(if r.step == 2 { ControlFlow::Break(()) } else { ControlFlow::Continue(()) }))
            .unwrap();
        assert_eq!(cut[..], full[..2]);
    }

    #[test]
    fn checkpoint_round_trip_preserves_eval() {
        let c = toy();
        let d = data(&c, 2);
        let mut t = Trainer::new(&c).unwrap();
        t.fit(&d, |_, _| ()).unwrap();
        let before = t.predict(&d).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        t.checkpoint().save(&path).unwrap();
        let mut fresh = Trainer::new(&c).unwrap();
        fresh.restore(&Checkpoint::load(&path).unwrap(), false).unwrap();
        assert_eq!(fresh.step, 2);
        assert_eq!(fresh.opt, t.opt);
        assert_eq!(fresh.predict(&d).unwrap(), before);
    }

    #[test]
    fn swa_epoch_never_underperforms_candidates() {
        let mut c = toy();
        c.swa.enabled = true;
        c.swa.n_snapshots = 2;
        let d = data(&c, 4);
        let mut t = Trainer::new(&c).unwrap();
        t.fit(&d, |_, _| ()).unwrap();
        let out = t.fit_swa(&d, &d).unwrap();
        assert_eq!(out.candidate_scores.len(), 2);
        assert!(out.score >= out.candidate_scores.iter().copied().fold(f64::MIN, f64::max));
        let got = t.evaluate(&d).unwrap().score("flow_grounded_auc").unwrap();
        assert_eq!(got, out.score);
    }
}
