//! The full network: encoders, center crop, BiFPN, latent injection and
//! decoder.

use rand::{Rng, SeedableRng};

use crate::aggregator::{Bifpn, LatentModule, LatentOutput};
use crate::config::{ModelConfig, RasterConfig};
use crate::decoder::{channels, Decoder, DecoderKind, RecursiveDecoder};
use crate::encoders::{Encoders, ExtraEncoder};
use crate::losses::WaypointPredictions;
use crate::nn::{Ctx, ParamStore};
use crate::raster::{crop_pyramid, GridSpec, RasterStack, SparseRaster};
use crate::scenario::GroundTruth;
use crate::tensor::{Float, Tensor};
use crate::{Error, Result};

pub const INPUT_CHANNELS: usize = crate::raster::DENSE_CHANNELS;

pub struct ModelOutput<T: Float = f32> {
    pub pred: WaypointPredictions<T>,
    pub latent: Option<LatentOutput<T>>,
}

#[derive(Clone, Debug)]
pub struct OccFlowModel {
    pub cfg: ModelConfig,
    pub raster: RasterConfig,
    encoders: Encoders,
    bifpn: Bifpn,
    latent: Option<LatentModule>,
    decoder: Decoder,
}

impl OccFlowModel {
    /// Registers all parameters in `ps`. A one-shot decoder is sized to the
    /// parameter count of the recursive decoder it replaces.
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, raster: &RasterConfig) -> Result<Self> {
        raster.validate()?;
        let input = raster.input_grid()?.size_px();
        cfg.encoders.validate(input)?;
        cfg.bifpn.validate()?;
        cfg.decoder.validate(cfg.waypoints)?;
        let encoders = Encoders::new(ps, "enc", &cfg.encoders, INPUT_CHANNELS);
        let bifpn = Bifpn::new(ps, "bifpn", &cfg.bifpn, &cfg.encoders.fused_widths);
        let levels = bifpn.n_levels();
        if levels != 6 {
            return Err(Error::Config(format!("the decoder needs 6 pyramid levels, BiFPN yields {levels}")));
        }
        let width = cfg.bifpn.width;
        let latent = if cfg.latent.enabled {
            cfg.latent.validate(levels)?;
            Some(LatentModule::new(ps, "latent", &cfg.latent, width, levels, channels::COUNT * cfg.waypoints))
        } else {
            None
        };
        let budget = (cfg.decoder.kind == DecoderKind::OneShot).then(|| {
            let mut scratch = ParamStore::new(0);
            RecursiveDecoder::new(&mut scratch, "probe", &cfg.decoder, width, cfg.waypoints);
            scratch.num_scalars()
        });
        let decoder = Decoder::new(ps, "dec", &cfg.decoder, width, cfg.waypoints, budget);
        Ok(OccFlowModel { cfg: cfg.clone(), raster: *raster, encoders, bifpn, latent, decoder })
    }

    pub fn input_grid(&self) -> GridSpec {
        self.raster.input_grid().expect("validated")
    }

    pub fn output_grid(&self) -> GridSpec {
        self.raster.output_grid().expect("validated")
    }

    pub fn needs_sparse(&self) -> bool {
        self.cfg.encoders.extra == ExtraEncoder::St3d
    }

    pub fn has_latent(&self) -> bool {
        self.latent.is_some()
    }

    /// Stacks dense inputs into `[B, 98, H, W]`.
    pub fn batch_inputs<T: Float>(&self, inputs: &[&RasterStack]) -> Result<Tensor<T>> {
        let n = self.input_grid().size_px();
        if inputs.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut data = Vec::with_capacity(inputs.len() * INPUT_CHANNELS * n * n);
        for r in inputs {
            if r.size != n || r.dense2d.len() != INPUT_CHANNELS * n * n {
                return Err(Error::Shape(format!("raster of side {} does not match the {n} px input grid", r.size)));
            }
            data.extend(r.dense2d.iter().map(|&v| T::cast(v as f64)));
        }
        Ok(Tensor::new(data, &[inputs.len(), INPUT_CHANNELS, n, n]))
    }

    /// `future`: `[B, 4T, H, W]` ground-truth context on the output grid,
    /// used by the latent posterior during training.
    pub fn forward<T: Float>(
        &self,
        ctx: &Ctx<T>,
        inputs: &[&RasterStack],
        future: Option<&Tensor<T>>,
        rng: &mut impl Rng,
    ) -> Result<ModelOutput<T>> {
        let dense = self.batch_inputs(inputs)?;
        let sparse: Option<Vec<&SparseRaster>> = self.needs_sparse().then(|| inputs.iter().map(|r| &r.sparse_st).collect());
        let pyr = self.encoders.forward(ctx, &dense, sparse.as_deref())?;
        let pyr = crop_pyramid(&pyr, self.raster.crop_ratio)?;
        let pyr = self.bifpn.forward(ctx, &pyr)?;
        let (pyr, latent) = match &self.latent {
            Some(l) => {
                let (p, out) = l.forward(ctx, &pyr, future, rng)?;
                (p, Some(out))
            }
            None => (pyr, None),
        };
        let raw = self.decoder.forward(ctx, &pyr)?;
        let n = self.output_grid().size_px();
        if raw.dim(3) != n || raw.dim(4) != n || raw.dim(1) != self.cfg.waypoints {
            return Err(Error::Shape(format!("decoder output {:?} does not match the {n} px output grid", raw.shape())));
        }
        if !raw.all_finite() {
            return Err(Error::Numerical("non-finite network output".into()));
        }
        Ok(ModelOutput { pred: WaypointPredictions::new(raw), latent })
    }

    /// Eval-mode probabilities and flow per scenario.
    pub fn predict(&self, ps: &ParamStore, inputs: &[&RasterStack]) -> Result<Vec<Prediction>> {
        let ctx: Ctx<f32> = Ctx::eval(ps);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&ctx, inputs, None, &mut rng)?;
        Ok(Prediction::split(&out.pred, self.output_grid()))
    }
}

/// One scenario's decoded outputs on the output grid: probabilities
/// `[T, H, W]` and backward flow `[T, 2, H, W]` in cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub grid: GridSpec,
    pub observed: Vec<f32>,
    pub occluded: Vec<f32>,
    pub flow: Vec<f32>,
}

impl Prediction {
    pub fn waypoints(&self) -> usize {
        self.observed.len() / self.grid.cells()
    }

    pub fn split(pred: &WaypointPredictions<f32>, grid: GridSpec) -> Vec<Prediction> {
        let (b, t) = (pred.batch(), pred.waypoints());
        let obs = pred.observed();
        let occl = pred.occluded();
        let flow = pred.flow();
        let per = t * grid.cells();
        (0..b)
            .map(|i| Prediction {
                grid,
                observed: obs.data()[i * per..(i + 1) * per].to_vec(),
                occluded: occl.data()[i * per..(i + 1) * per].to_vec(),
                flow: flow.data()[2 * i * per..2 * (i + 1) * per].to_vec(),
            })
            .collect()
    }

    /// The prediction a perfect model would make for `gt`.
    pub fn from_ground_truth(gt: &GroundTruth) -> Prediction {
        Prediction {
            grid: gt.grid,
            observed: gt.future_observed().to_vec(),
            occluded: gt.future_occluded().to_vec(),
            flow: gt.flow.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cells = self.grid.cells();
        let t = self.waypoints();
        if self.observed.len() != t * cells || self.occluded.len() != t * cells || self.flow.len() != 2 * t * cells {
            return Err(Error::Shape("prediction planes disagree on the waypoint count".into()));
        }
        if self.observed.iter().chain(&self.occluded).any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Data("occupancy probabilities must lie in [0, 1]".into()));
        }
        if self.flow.iter().any(|f| !f.is_finite()) {
            return Err(Error::Data("non-finite flow".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::raster::build_inputs;
    use crate::scenario::generate_scenario;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::desk();
        c.raster.extent_m = 20.0;
        c
    }

    #[test]
    fn forward_shapes_on_desk_config() {
        let c = tiny();
        let mut ps = ParamStore::new(0);
        let m = OccFlowModel::new(&mut ps, &c.model, &c.raster).unwrap();
        let s = generate_scenario(3, &c.data.generator).unwrap();
        let r = build_inputs(&s, &m.input_grid(), false).unwrap();
        let p = m.predict(&ps, &[&r, &r]).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0], p[1]);
        assert_eq!(p[0].waypoints(), 8);
        assert_eq!(p[0].grid.size_px(), 32);
        p[0].validate().unwrap();
    }

    #[test]
    fn crop_shrinks_output_grid() {
        let mut c = ExperimentConfig::desk();
        c.raster.crop_ratio = 0.5;
        let mut ps = ParamStore::new(0);
        let m = OccFlowModel::new(&mut ps, &c.model, &c.raster).unwrap();
        let s = generate_scenario(1, &c.data.generator).unwrap();
        let r = build_inputs(&s, &m.input_grid(), false).unwrap();
        let ctx: Ctx<f32> = Ctx::eval(&ps);
        let out = m.forward(&ctx, &[&r], None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.pred.size(), (32, 32));
        assert_eq!(m.output_grid().size_px(), 32);
    }

    #[test]
    fn one_shot_matches_recursive_budget() {
        let c = tiny();
        let mut a = ParamStore::new(0);
        OccFlowModel::new(&mut a, &c.model, &c.raster).unwrap();
        let mut o = c.model.clone();
        o.decoder.kind = DecoderKind::OneShot;
        let mut b = ParamStore::new(0);
        OccFlowModel::new(&mut b, &o, &c.raster).unwrap();
        let (na, nb) = (a.num_scalars() as f64, b.num_scalars() as f64);
        assert!((na - nb).abs() / na < 0.05, "{na} vs {nb}");
    }

    #[test]
    fn st3d_path_and_rejects_wrong_grid() {
        let mut c = tiny();
        c.model.encoders.extra = ExtraEncoder::St3d;
        let mut ps = ParamStore::new(0);
        let m = OccFlowModel::new(&mut ps, &c.model, &c.raster).unwrap();
        let s = generate_scenario(2, &c.data.generator).unwrap();
        let r = build_inputs(&s, &m.input_grid(), true).unwrap();
        m.predict(&ps, &[&r]).unwrap()[0].validate().unwrap();
        let other = build_inputs(&s, &GridSpec::centered(40.0, 0.3125).unwrap(), true).unwrap();
        assert!(matches!(m.predict(&ps, &[&other]), Err(Error::Shape(_))));
    }
}
