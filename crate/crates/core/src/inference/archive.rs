use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array3, Array4};
use ndarray_npy::{ReadNpyExt, WriteNpyExt};
use serde::{Deserialize, Serialize};
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, ZipArchive, ZipWriter};

use crate::model::Prediction;
use crate::raster::GridSpec;
use crate::{Error, Result};

const MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub version: u32,
    pub grid: GridSpec,
    pub waypoints: usize,
    pub fingerprints: Vec<String>,
    pub scenarios: Vec<String>,
    /// Array shapes keyed by array name.
    pub shapes: BTreeMap<String, Vec<usize>>,
}

/// Predictions for a set of scenarios on one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionArchive {
    pub grid: GridSpec,
    pub waypoints: usize,
    pub fingerprints: Vec<String>,
    pub predictions: BTreeMap<String, Prediction>,
}

fn zip_err(e: zip::result::ZipError) -> Error {
    Error::Data(format!("archive: {e}"))
}

fn npy_err(e: impl std::fmt::Display) -> Error {
    Error::Data(format!("archive array: {e}"))
}

impl PredictionArchive {
    pub fn new(grid: GridSpec, waypoints: usize, fingerprints: Vec<String>, predictions: BTreeMap<String, Prediction>) -> Result<Self> {
        let a = PredictionArchive { grid, waypoints, fingerprints, predictions };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        for (id, p) in &self.predictions {
            if p.grid != self.grid {
                return Err(Error::Shape(format!("{id}: prediction grid differs from the archive grid")));
            }
            if p.waypoints() != self.waypoints {
                return Err(Error::Shape(format!("{id}: {} waypoints, archive declares {}", p.waypoints(), self.waypoints)));
            }
            p.validate().map_err(|e| Error::Data(format!("{id}: {e}")))?;
        }
        Ok(())
    }

    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let n = self.grid.size_px();
        let t = self.waypoints;
        let mut zw = ZipWriter::new(File::create(path)?);
        let opts = SimpleFileOptions::default().compression_method(CompressionMethod::Deflated).last_modified_time(zip::DateTime::default());
        let mut shapes = BTreeMap::new();
        shapes.insert("occ_obs".to_string(), vec![t, n, n]);
        shapes.insert("occ_occl".to_string(), vec![t, n, n]);
        shapes.insert("flow".to_string(), vec![t, 2, n, n]);
        for (id, p) in &self.predictions {
            let mut put = |name: &str, write: &dyn Fn(&mut Vec<u8>) -> Result<()>| -> Result<()> {
                let mut buf = Vec::new();
                write(&mut buf)?;
                zw.start_file(format!("{id}/{name}.npy"), opts).map_err(zip_err)?;
                zw.write_all(&buf)?;
                Ok(())
            };
            let plane3 = |v: &[f32]| Array3::from_shape_vec((t, n, n), v.to_vec()).map_err(npy_err);
            let obs = plane3(&p.observed)?;
            let occl = plane3(&p.occluded)?;
            let flow = Array4::from_shape_vec((t, 2, n, n), p.flow.clone()).map_err(npy_err)?;
            put("occ_obs", &|b| obs.write_npy(b).map_err(npy_err))?;
            put("occ_occl", &|b| occl.write_npy(b).map_err(npy_err))?;
            put("flow", &|b| flow.write_npy(b).map_err(npy_err))?;
        }
        let manifest = ArchiveManifest {
            version: FORMAT_VERSION,
            grid: self.grid,
            waypoints: t,
            fingerprints: self.fingerprints.clone(),
            scenarios: self.predictions.keys().cloned().collect(),
            shapes,
        };
        zw.start_file(MANIFEST, opts).map_err(zip_err)?;
        zw.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        zw.finish().map_err(zip_err)?;
        Ok(())
    }

    /// Reads an archive. With `expect`, the stored grid and waypoint count
    /// must match exactly.
    pub fn import(path: impl AsRef<Path>, expect: Option<(GridSpec, usize)>) -> Result<Self> {
        let mut za = ZipArchive::new(File::open(path)?).map_err(zip_err)?;
        let mut text = String::new();
        za.by_name(MANIFEST).map_err(zip_err)?.read_to_string(&mut text)?;
        let m: ArchiveManifest = serde_json::from_str(&text).map_err(|e| Error::Data(format!("archive manifest: {e}")))?;
        if m.version != FORMAT_VERSION {
            return Err(Error::Data(format!("unsupported archive version {}", m.version)));
        }
        if let Some((grid, t)) = expect {
            if m.grid != grid {
                return Err(Error::Shape(format!("archive grid {:?} does not match expected {:?}", m.grid, grid)));
            }
            if m.waypoints != t {
                return Err(Error::Shape(format!("archive has {} waypoints, expected {t}", m.waypoints)));
            }
        }
        let (n, t) = (m.grid.size_px(), m.waypoints);
        let mut predictions = BTreeMap::new();
        for id in &m.scenarios {
            let mut raw = |name: &str| -> Result<Vec<u8>> {
                let mut buf = Vec::new();
                za.by_name(&format!("{id}/{name}.npy")).map_err(zip_err)?.read_to_end(&mut buf)?;
                Ok(buf)
            };
            let plane3 = |buf: Vec<u8>, name: &str| -> Result<Vec<f32>> {
                let a = Array3::<f32>::read_npy(&buf[..]).map_err(npy_err)?;
                if a.shape() != [t, n, n] {
                    return Err(Error::Shape(format!("{id}/{name}: shape {:?}, manifest implies {:?}", a.shape(), [t, n, n])));
                }
                Ok(a.into_raw_vec_and_offset().0)
            };
            let observed = plane3(raw("occ_obs")?, "occ_obs")?;
            let occluded = plane3(raw("occ_occl")?, "occ_occl")?;
            let f = Array4::<f32>::read_npy(&raw("flow")?[..]).map_err(npy_err)?;
            if f.shape() != [t, 2, n, n] {
                return Err(Error::Shape(format!("{id}/flow: shape {:?}, manifest implies {:?}", f.shape(), [t, 2, n, n])));
            }
            let flow = f.into_raw_vec_and_offset().0;
            predictions.insert(id.clone(), Prediction { grid: m.grid, observed, occluded, flow });
        }
        Self::new(m.grid, t, m.fingerprints, predictions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::rand_vec;

    fn archive(t: usize) -> PredictionArchive {
        let grid = GridSpec::centered(8.0, 1.0).unwrap();
        let c = t * 64;
        let prob = |s| rand_vec(c, s).iter().map(|v| ((v + 1.0) / 2.0) as f32).collect::<Vec<_>>();
        let preds = (0..2)
            .map(|i| {
                let p = Prediction { grid, observed: prob(i), occluded: prob(i + 10), flow: rand_vec(2 * c, i + 20).iter().map(|&v| v as f32).collect() };
                (format!("s{i}"), p)
            })
            .collect();
        PredictionArchive::new(grid, t, vec!["abc".into()], preds).unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.zip");
        let a = archive(8);
        a.export(&path).unwrap();
        assert_eq!(PredictionArchive::import(&path, Some((a.grid, 8))).unwrap(), a);
        let bytes = std::fs::read(&path).unwrap();
        a.export(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
    }

    #[test]
    fn grid_and_waypoint_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.zip");
        archive(8).export(&path).unwrap();
        let other = GridSpec::centered(8.0, 0.5).unwrap();
        assert!(matches!(PredictionArchive::import(&path, Some((other, 8))), Err(Error::Shape(_))));
        archive(7).export(&path).unwrap();
        let e = PredictionArchive::import(&path, Some((archive(7).grid, 8))).unwrap_err();
        assert!(e.to_string().contains("7 waypoints"), "{e}");
    }

    #[test]
    fn truncated_array_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.zip");
        let a = archive(8);
        a.export(&path).unwrap();
        // rewrite one flow array with a truncated waypoint axis
        let mut src = ZipArchive::new(File::open(&path).unwrap()).unwrap();
        let out = dir.path().join("q.zip");
        let mut zw = ZipWriter::new(File::create(&out).unwrap());
        for i in 0..src.len() {
            let mut f = src.by_index(i).unwrap();
            let name = f.name().to_string();
            let mut buf = Vec::new();
            f.read_to_end(&mut buf).unwrap();
            if name == "s0/flow.npy" {
                buf.clear();
                Array4::<f32>::zeros((7, 2, 8, 8)).write_npy(&mut buf).unwrap();
            }
            zw.start_file(name, SimpleFileOptions::default()).unwrap();
            zw.write_all(&buf).unwrap();
        }
        zw.finish().unwrap();
        let e = PredictionArchive::import(&out, None).unwrap_err();
        assert!(e.to_string().contains("s0/flow"), "{e}");
    }
}
