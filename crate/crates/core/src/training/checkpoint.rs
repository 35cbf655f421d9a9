use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::AdamW;
use crate::nn::ParamStore;
use crate::{Error, Result};

const OPT_M: &str = "opt.m.";
const OPT_V: &str = "opt.v.";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Named parameter arrays, optional optimizer moments, the step counter and
/// the configuration fingerprint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: BTreeMap<String, NamedArray>,
    pub opt_m: BTreeMap<String, NamedArray>,
    pub opt_v: BTreeMap<String, NamedArray>,
    pub opt_t: u64,
    pub step: u64,
    pub fingerprint: String,
}

/// How a checkpoint was applied to a store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub fingerprint_mismatch: Option<(String, String)>,
    /// Checkpoint entries with no matching parameter.
    pub unexpected: Vec<String>,
}

impl Checkpoint {
    pub fn capture(ps: &ParamStore, opt: Option<&AdamW>, step: u64, fingerprint: &str) -> Self {
        let arrays = |vals: &mut dyn Iterator<Item = (&str, &[usize], &[f32])>| -> BTreeMap<String, NamedArray> {
            vals.map(|(n, s, d)| (n.to_string(), NamedArray { shape: s.to_vec(), data: d.to_vec() })).collect()
        };
        let params = arrays(&mut ps.params().iter().map(|p| (p.name.as_str(), p.shape.as_slice(), p.value.as_slice())));
        let (opt_m, opt_v, opt_t) = match opt {
            Some(o) => (
                arrays(&mut ps.params().iter().zip(&o.m).map(|(p, m)| (p.name.as_str(), p.shape.as_slice(), m.as_slice()))),
                arrays(&mut ps.params().iter().zip(&o.v).map(|(p, v)| (p.name.as_str(), p.shape.as_slice(), v.as_slice()))),
                o.t,
            ),
            None => (BTreeMap::new(), BTreeMap::new(), 0),
        };
        Checkpoint { params, opt_m, opt_v, opt_t, step, fingerprint: fingerprint.to_string() }
    }

    pub fn flat_params(&self, ps: &ParamStore) -> Result<Vec<f32>> {
        self.missing(ps)?;
        Ok(ps.params().iter().flat_map(|p| self.params[&p.name].data.iter().copied()).collect())
    }

    fn missing(&self, ps: &ParamStore) -> Result<()> {
        let missing: Vec<&str> = ps.params().iter().map(|p| p.name.as_str()).filter(|n| !self.params.contains_key(*n)).collect();
        if !missing.is_empty() {
            return Err(Error::Data(format!("checkpoint is missing {} parameter(s): {}", missing.len(), missing.join(", "))));
        }
        for p in ps.params() {
            let a = &self.params[&p.name];
            if a.shape != p.shape {
                return Err(Error::Shape(format!("checkpoint {} has shape {:?}, model expects {:?}", p.name, a.shape, p.shape)));
            }
        }
        Ok(())
    }

    /// Copies parameters (and optimizer state when both sides have it) into
    /// `ps`. A fingerprint mismatch is an error unless `allow_mismatch`.
    pub fn restore(&self, ps: &mut ParamStore, opt: Option<&mut AdamW>, fingerprint: &str, allow_mismatch: bool) -> Result<LoadReport> {
        let mut report = LoadReport::default();
        if self.fingerprint != fingerprint {
            if !allow_mismatch {
                return Err(Error::Config(format!(
                    "checkpoint fingerprint {} does not match configuration {fingerprint}",
                    self.fingerprint
                )));
            }
            log::warn!("loading checkpoint with fingerprint {} into configuration {fingerprint}", self.fingerprint);
            report.fingerprint_mismatch = Some((self.fingerprint.clone(), fingerprint.to_string()));
        }
        self.missing(ps)?;
        report.unexpected = self.params.keys().filter(|k| ps.id(k).is_none()).cloned().collect();
        for id in ps.ids().collect::<Vec<_>>() {
            let name = ps.get(id).name.clone();
            ps.set(id, &self.params[&name].data);
        }
        if let Some(o) = opt {
            if !self.opt_m.is_empty() {
                for (i, p) in ps.params().iter().enumerate() {
                    let (m, v) = (self.opt_m.get(&p.name), self.opt_v.get(&p.name));
                    let (Some(m), Some(v)) = (m, v) else {
                        return Err(Error::Data(format!("checkpoint optimizer state lacks {}", p.name)));
                    };
                    o.m[i].copy_from_slice(&m.data);
                    o.v[i].copy_from_slice(&v.data);
                }
                o.t = self.opt_t;
            }
        }
        Ok(report)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut bufs: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (prefix, map) in [("", &self.params), (OPT_M, &self.opt_m), (OPT_V, &self.opt_v)] {
            for (k, a) in map {
                bufs.push((format!("{prefix}{k}"), a.shape.clone(), a.data.iter().flat_map(|v| v.to_le_bytes()).collect()));
            }
        }
        let views = bufs
            .iter()
            .map(|(n, s, b)| Ok((n.clone(), TensorView::new(Dtype::F32, s.clone(), b).map_err(|e| Error::Serde(e.to_string()))?)))
            .collect::<Result<Vec<_>>>()?;
        let meta = HashMap::from([
            ("step".to_string(), self.step.to_string()),
            ("opt_t".to_string(), self.opt_t.to_string()),
            ("fingerprint".to_string(), self.fingerprint.clone()),
        ]);
        safetensors::serialize(views, &Some(meta)).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |e: String| Error::Data(format!("corrupt checkpoint: {e}"));
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| corrupt(e.to_string()))?;
        let meta = header.metadata().clone().unwrap_or_default();
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| corrupt(format!("metadata lacks `{k}`")));
        let step = field("step")?.parse().map_err(|_| corrupt("bad step".into()))?;
        let opt_t = field("opt_t")?.parse().map_err(|_| corrupt("bad opt_t".into()))?;
        let fingerprint = field("fingerprint")?;
        let st = SafeTensors::deserialize(bytes).map_err(|e| corrupt(e.to_string()))?;
        let mut ck = Checkpoint { params: BTreeMap::new(), opt_m: BTreeMap::new(), opt_v: BTreeMap::new(), opt_t, step, fingerprint };
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(corrupt(format!("{name} is not f32")));
            }
            let data: Vec<f32> = view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let a = NamedArray { shape: view.shape().to_vec(), data };
            if let Some(k) = name.strip_prefix(OPT_M) {
                ck.opt_m.insert(k.to_string(), a);
            } else if let Some(k) = name.strip_prefix(OPT_V) {
                ck.opt_v.insert(k.to_string(), a);
            } else {
                ck.params.insert(name, a);
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::nn::Init;

    fn store() -> ParamStore {
        let mut ps = ParamStore::new(4);
        ps.register("enc.w", &[2, 3], Init::Normal(1.0));
        ps.register("head.b", &[3], Init::Normal(1.0));
        ps
    }

    #[test]
    fn bytes_round_trip_is_lossless() {
        let ps = store();
        let mut opt = AdamW::new(&ps, &TrainConfig::default());
        opt.m[0][1] = 0.25;
        opt.v[1][2] = 1e-30;
        opt.t = 7;
        let ck = Checkpoint::capture(&ps, Some(&opt), 42, "abc");
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let mut ps2 = ParamStore::new(99);
        ps2.register("enc.w", &[2, 3], Init::Zeros);
        ps2.register("head.b", &[3], Init::Zeros);
        let mut opt2 = AdamW::new(&ps2, &TrainConfig::default());
        back.restore(&mut ps2, Some(&mut opt2), "abc", false).unwrap();
        assert_eq!(ps2.flat(), ps.flat());
        assert_eq!(opt2, opt);
    }

    #[test]
    fn fingerprint_and_missing_keys() {
        let ps = store();
        let mut ck = Checkpoint::capture(&ps, None, 0, "abc");
        let mut target = store();
        assert!(matches!(ck.restore(&mut target, None, "xyz", false), Err(Error::Config(_))));
        let r = ck.restore(&mut target, None, "xyz", true).unwrap();
        assert!(r.fingerprint_mismatch.is_some());
        ck.params.remove("head.b");
        let e = ck.restore(&mut target, None, "abc", false).unwrap_err().to_string();
        assert!(e.contains("missing 1") && e.contains("head.b"), "{e}");
    }

    #[test]
    fn corrupt_bytes_rejected() {
        let bytes = Checkpoint::capture(&store(), None, 1, "f").to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
    }
}
