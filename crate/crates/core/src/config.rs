//! Experiment configuration: one TOML document with `data`, `raster`,
//! `model`, `loss`, `train` and `swa` tables.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregator::{BifpnConfig, LatentConfig, SampleFrom};
use crate::decoder::DecoderConfig;
use crate::encoders::{CnnConfig, EncoderConfig};
use crate::losses::LossWeights;
use crate::raster::GridSpec;
use crate::scenario::GeneratorConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    /// Scenario `i` of the training split uses seed `seed + i`; validation
    /// scenarios follow after the training block.
    pub seed: u64,
    pub generator: GeneratorConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n_train: 200, n_val: 50, seed: 0, generator: GeneratorConfig::default() }
    }
}

impl DataConfig {
    pub fn train_seeds(&self) -> Vec<u64> {
        (0..self.n_train as u64).map(|i| self.seed + i).collect()
    }

    pub fn val_seeds(&self) -> Vec<u64> {
        (0..self.n_val as u64).map(|i| self.seed + self.n_train as u64 + i).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RasterConfig {
    pub extent_m: f64,
    /// Input raster resolution; the output grid has twice the cell size.
    pub resolution_mpp: f64,
    /// Fraction of the output side kept by the center crop.
    pub crop_ratio: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig { extent_m: 40.0, resolution_mpp: 0.3125, crop_ratio: 1.0 }
    }
}

impl RasterConfig {
    pub fn input_grid(&self) -> Result<GridSpec> {
        GridSpec::centered(self.extent_m, self.resolution_mpp)
    }

    pub fn output_grid(&self) -> Result<GridSpec> {
        self.input_grid()?.with_resolution(2.0 * self.resolution_mpp)?.center_crop(self.crop_ratio)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.crop_ratio > 0.0 && self.crop_ratio <= 1.0) {
            return Err(Error::Config(format!("raster.crop_ratio must lie in (0, 1], got {}", self.crop_ratio)));
        }
        let n = self.input_grid()?.size_px();
        if n % 32 != 0 {
            return Err(Error::Config(format!("input grid side {n} px must be a multiple of 32")));
        }
        self.output_grid()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub waypoints: usize,
    pub seed: u64,
    pub encoders: EncoderConfig,
    pub bifpn: BifpnConfig,
    pub latent: LatentConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            waypoints: 8,
            seed: 0,
            encoders: EncoderConfig::default(),
            bifpn: BifpnConfig::default(),
            latent: LatentConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Hard cap on optimizer steps; 0 means `epochs` full passes.
    pub max_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 2.5e-4,
            min_lr: 0.0,
            weight_decay: 0.01,
            epochs: 5,
            batch_size: 4,
            seed: 0,
            grad_clip: 0.0,
            max_steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr >= 0.0 && self.lr_init > self.min_lr) {
            return Err(Error::Config(format!("need lr_init > min_lr >= 0, got {} and {}", self.lr_init, self.min_lr)));
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Config("weight_decay and grad_clip must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("invalid Adam moments".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwaConfig {
    pub enabled: bool,
    /// Constant learning rate of the extra epoch as a fraction of `lr_init`.
    pub lr_factor: f64,
    /// Snapshots taken at equal intervals through the extra epoch.
    pub n_snapshots: usize,
    pub selection_metric: String,
}

impl Default for SwaConfig {
    fn default() -> Self {
        SwaConfig { enabled: false, lr_factor: 0.1, n_snapshots: 8, selection_metric: "flow_grounded_auc".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub raster: RasterConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub swa: SwaConfig,
}

impl ExperimentConfig {
    /// Full-width model at the reference widths.
    pub fn paper() -> Self {
        Self::default()
    }

    /// Narrow model sized for single-core CPU training on the 128×128 grid.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.model.encoders.cnn = CnnConfig { widths: [16, 24, 32, 48, 64], depths: [1, 1, 1, 1, 1], norm_groups: 4 };
        c.model.encoders.fused_widths = [16, 24, 32, 48, 64];
        c.model.bifpn = BifpnConfig { width: 32, layers: 2, norm_groups: 4, ..BifpnConfig::default() };
        c.model.latent =
            LatentConfig { channels: 8, scales: vec![1, 2, 3, 4, 5, 6], future_width: 8, sample_from: SampleFrom::Present, ..LatentConfig::default() };
        c.model.decoder = DecoderConfig {
            width: 32,
            groups: 4,
            norm_groups: 4,
            lstm_input: 8,
            lstm_hidden: 8,
            head_hidden: 8,
            ..DecoderConfig::default()
        };
        c.train.lr_init = 2e-3;
        c.train.weight_decay = 0.01;
        c.train.grad_clip = 5.0;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.data.generator.validate()?;
        self.raster.validate()?;
        let n = self.raster.input_grid()?.size_px();
        let m = &self.model;
        if m.waypoints != self.data.generator.horizon.n_future_waypoints {
            return Err(Error::Config(format!(
                "model.waypoints = {} but the scenario horizon has {} waypoints",
                m.waypoints, self.data.generator.horizon.n_future_waypoints
            )));
        }
        m.encoders.validate(n)?;
        m.bifpn.validate()?;
        let levels = 5 + usize::from(m.bifpn.extra_level);
        if m.latent.enabled {
            m.latent.validate(levels)?;
        }
        m.decoder.validate(m.waypoints)?;
        if levels < 6 && m.decoder.kind == crate::decoder::DecoderKind::Recursive {
            return Err(Error::Config("the recursive decoder needs the extra pyramid level".into()));
        }
        self.loss.validate()?;
        self.train.validate()?;
        if self.swa.enabled && self.swa.n_snapshots == 0 {
            return Err(Error::Config("swa.n_snapshots must be positive".into()));
        }
        if !(self.swa.lr_factor > 0.0) {
            return Err(Error::Config("swa.lr_factor must be positive".into()));
        }
        crate::metrics::EvalReport::check_metric_name(&self.swa.selection_metric)?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().replace('\n', " ")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        Self::from_toml(&text)
    }

    /// Every settable dotted key, in document order.
    pub fn keys(&self) -> Vec<String> {
        let v = toml::Value::try_from(self).expect("config serializes");
        let mut out = Vec::new();
        flatten("", &v, &mut out);
        out
    }

    /// Applies one `key=value` override. Values are parsed as TOML and fall
    /// back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Serde(e.to_string()))?;
        let slot = lookup_mut(&mut root, key).ok_or_else(|| {
            Error::Config(format!("unknown config key `{key}`; valid keys: {}", self.keys().join(", ")))
        })?;
        if slot.is_table() {
            return Err(Error::Config(format!("`{key}` is a table; set one of its fields instead")));
        }
        *slot = parse_value(raw);
        let next: ExperimentConfig =
            root.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{key}: {}", e.message().replace('\n', " "))))?;
        *self = next;
        Ok(())
    }

    pub fn apply_overrides<S: AsRef<str>>(&mut self, assignments: &[S]) -> Result<()> {
        for a in assignments {
            self.apply_override(a.as_ref())?;
        }
        Ok(())
    }

    /// Hex digest of everything that determines parameter shapes and the
    /// meaning of predictions.
    pub fn fingerprint(&self) -> String {
        let mut m = self.model.clone();
        m.seed = 0;
        let text = serde_json::to_string(&(&m, &self.raster)).expect("config serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

fn lookup_mut<'a>(v: &'a mut toml::Value, key: &str) -> Option<&'a mut toml::Value> {
    key.split('.').try_fold(v, |cur, part| cur.as_table_mut()?.get_mut(part))
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        for c in [ExperimentConfig::paper(), ExperimentConfig::desk()] {
            let text = c.to_toml().unwrap();
            assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
            c.validate().unwrap();
        }
    }

    #[test]
    fn defaults_match_reference_settings() {
        let c = ExperimentConfig::default();
        assert_eq!(c.train.lr_init, 2.5e-4);
        assert_eq!(c.train.weight_decay, 0.01);
        assert_eq!(c.model.waypoints, 8);
        assert_eq!(c.raster.input_grid().unwrap().size_px(), 128);
        assert_eq!(c.raster.output_grid().unwrap().size_px(), 64);
    }

    #[test]
    fn overrides_apply_and_typecheck() {
        let mut c = ExperimentConfig::desk();
        c.apply_overrides(&["train.lr_init=1e-3", "model.decoder.kind=one_shot", "model.latent.scales=[1, 2]"]).unwrap();
        assert_eq!(c.train.lr_init, 1e-3);
        assert_eq!(c.model.decoder.kind, crate::decoder::DecoderKind::OneShot);
        assert_eq!(c.model.latent.scales, vec![1, 2]);
        assert!(c.apply_override("train.batch_size=abc").is_err());
        assert!(c.apply_override("train").is_err());
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let mut c = ExperimentConfig::default();
        let e = c.apply_override("train.learning_rate=1").unwrap_err().to_string();
        assert!(e.contains("train.learning_rate") && e.contains("train.lr_init") && e.contains("swa.selection_metric"));
        assert!(ExperimentConfig::from_toml("[train]\nlearning_rate = 1").is_err());
    }

    #[test]
    fn fingerprint_tracks_model_shape() {
        let a = ExperimentConfig::desk();
        let mut b = a.clone();
        b.train.lr_init = 1.0;
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.model.bifpn.width = 40;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn validation_catches_cross_field_errors() {
        let mut c = ExperimentConfig::desk();
        c.model.waypoints = 4;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::desk();
        c.train.min_lr = 1.0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::desk();
        c.swa.selection_metric = "accuracy".into();
        assert!(c.validate().is_err());
    }
}
