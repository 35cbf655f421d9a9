use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use log::info;
use occflow::inference::PredictionArchive;
use occflow::model::Prediction;
use occflow::{Error, Result};

use crate::layout;

/// HSV with value 1 to RGB; `h` in [0, 1).
fn hsv(h: f32, s: f32) -> [u8; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let f = h6 - h6.floor();
    let (p, q, t) = (1.0 - s, 1.0 - s * f, 1.0 - s * (1.0 - f));
    let (r, g, b) = match h6 as u32 % 6 {
        0 => (1.0, t, p),
        1 => (q, 1.0, p),
        2 => (p, 1.0, t),
        3 => (p, q, 1.0),
        4 => (t, p, 1.0),
        _ => (1.0, p, q),
    };
    [r, g, b].map(|c: f32| (c * 255.0).round() as u8)
}

/// Observed or occluded score above `threshold` is white.
pub fn occupancy_image(p: &Prediction, t: usize, threshold: f32) -> GrayImage {
    let n = p.grid.size_px();
    let (o, c) = (&p.observed[t * n * n..(t + 1) * n * n], &p.occluded[t * n * n..(t + 1) * n * n]);
    GrayImage::from_fn(n as u32, n as u32, |x, y| {
        let i = y as usize * n + x as usize;
        Luma([if o[i].max(c[i]) > threshold { 255 } else { 0 }])
    })
}

/// Direction as hue, magnitude relative to `max_mag` as saturation.
pub fn flow_image(p: &Prediction, t: usize, max_mag: f32) -> RgbImage {
    let n = p.grid.size_px();
    let plane = n * n;
    let base = t * 2 * plane;
    let (fx, fy) = (&p.flow[base..base + plane], &p.flow[base + plane..base + 2 * plane]);
    RgbImage::from_fn(n as u32, n as u32, |x, y| {
        let i = y as usize * n + x as usize;
        let mag = fx[i].hypot(fy[i]);
        let hue = fy[i].atan2(fx[i]) / std::f32::consts::TAU;
        Rgb(hsv(hue, if max_mag > 0.0 { (mag / max_mag).min(1.0) } else { 0.0 }))
    })
}

pub fn render(archive: &Path, scenario: &str, threshold: f32, out: &Path, force: bool) -> Result<()> {
    if !threshold.is_finite() {
        return Err(Error::Config(format!("threshold must be finite, got {threshold}")));
    }
    let a = PredictionArchive::import(archive, None)?;
    let p = a.predictions.get(scenario).ok_or_else(|| {
        Error::Data(format!("scenario `{scenario}` is not in {}; it holds {} scenarios", archive.display(), a.predictions.len()))
    })?;
    layout::ensure_empty_dir(out, force)?;
    let max_mag = p.flow.chunks(p.grid.cells()).collect::<Vec<_>>().chunks(2).flat_map(|c| c[0].iter().zip(c[1]).map(|(x, y)| x.hypot(*y))).fold(0f32, f32::max);
    let img_err = |e: image::ImageError| Error::Data(format!("writing image: {e}"));
    for t in 0..a.waypoints {
        occupancy_image(p, t, threshold).save(out.join(format!("occupancy_t{}.png", t + 1))).map_err(img_err)?;
        flow_image(p, t, max_mag).save(out.join(format!("flow_t{}.png", t + 1))).map_err(img_err)?;
    }
    info!("wrote {} images to {}", 2 * a.waypoints, out.display());
    Ok(())
}
