//! Binary PPM heatmaps of loudness fields and prediction/reference/error
//! triptychs. Images put +y at the top.

use std::fs;
use std::path::Path;

use crate::encoder::LoudnessField;
use crate::error::{Error, Result};
use crate::geometry::OccupancyGrid;

pub type Rgb = [u8; 3];

const COLD: Rgb = [59, 76, 192];
const NEUTRAL: Rgb = [247, 247, 247];
const WARM: Rgb = [180, 4, 38];
const ERROR_STOPS: [Rgb; 3] = [[0, 0, 0], [200, 30, 30], [255, 230, 80]];
pub const OBJECT_COLOR: Rgb = [128, 128, 128];
const GAP_COLOR: Rgb = [64, 64, 64];

fn lerp(a: Rgb, b: Rgb, t: f64) -> Rgb {
    let t = t.clamp(0.0, 1.0);
    std::array::from_fn(|i| (a[i] as f64 + (b[i] as f64 - a[i] as f64) * t).round() as u8)
}

/// Diverging map: `lo` is fully cold, 0 dB neutral, `hi` fully warm.
pub fn diverging(value: f32, (lo, hi): (f32, f32)) -> Rgb {
    let v = value.clamp(lo, hi) as f64;
    if v < 0.0 {
        lerp(NEUTRAL, COLD, if lo < 0.0 { v / lo as f64 } else { 1.0 })
    } else {
        lerp(NEUTRAL, WARM, if hi > 0.0 { v / hi as f64 } else { 1.0 })
    }
}

/// Sequential map for absolute errors in `[0, max]`: black at zero.
pub fn sequential(value: f32, max: f32) -> Rgb {
    let t = if max > 0.0 { (value / max).clamp(0.0, 1.0) as f64 } else { 0.0 };
    if t < 0.5 {
        lerp(ERROR_STOPS[0], ERROR_STOPS[1], 2.0 * t)
    } else {
        lerp(ERROR_STOPS[1], ERROR_STOPS[2], 2.0 * t - 1.0)
    }
}

/// RGB raster, row 0 at the top.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl Image {
    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        Self { width, height, pixels: vec![color; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    fn blit(&mut self, other: &Image, x0: usize) {
        for y in 0..other.height {
            let dst = y * self.width + x0;
            self.pixels[dst..dst + other.width].copy_from_slice(&other.pixels[y * other.width..(y + 1) * other.width]);
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm())?;
        Ok(())
    }
}

/// Maps a row-major plane (rows along +y) to an image, each cell drawn as a
/// `scale` x `scale` block; object cells take `OBJECT_COLOR` when given.
pub fn plane_image(
    values: &[f32],
    resolution: usize,
    scale: usize,
    object: Option<&OccupancyGrid>,
    color: impl Fn(f32) -> Rgb,
) -> Result<Image> {
    if values.len() != resolution * resolution || scale == 0 {
        return Err(Error::Config(format!("cannot render {} values at {resolution}x{resolution}", values.len())));
    }
    let side = resolution * scale;
    let mut img = Image::filled(side, side, NEUTRAL);
    for row in 0..resolution {
        for col in 0..resolution {
            let c = match object {
                Some(o) if o.get(col, row) => OBJECT_COLOR,
                _ => color(values[row * resolution + col]),
            };
            let y0 = (resolution - 1 - row) * scale;
            for y in y0..y0 + scale {
                img.pixels[y * side + col * scale..y * side + (col + 1) * scale].fill(c);
            }
        }
    }
    Ok(img)
}

pub fn heatmap(field: &LoudnessField, band: usize, scale: usize, show_object: bool) -> Result<Image> {
    if band >= field.band_count() {
        return Err(Error::Config(format!("band {band} out of range")));
    }
    let object = show_object.then_some(&field.object_mask);
    plane_image(field.band(band), field.spec.resolution, scale, object, |v| diverging(v, field.clamp_db))
}

/// Reference, prediction and absolute error side by side; errors saturate at
/// `error_max_db`.
pub fn triptych(
    reference: &LoudnessField,
    prediction: &LoudnessField,
    band: usize,
    scale: usize,
    error_max_db: f32,
) -> Result<Image> {
    if reference.spec != prediction.spec || reference.band_count() != prediction.band_count() {
        return Err(Error::Config("reference and prediction grids differ".into()));
    }
    let a = heatmap(reference, band, scale, true)?;
    let b = heatmap(prediction, band, scale, true)?;
    let err: Vec<f32> = reference.band(band).iter().zip(prediction.band(band)).map(|(r, p)| (r - p).abs()).collect();
    let c = plane_image(&err, reference.spec.resolution, scale, None, |v| sequential(v, error_max_db))?;
    let gap = scale.max(2);
    let mut img = Image::filled(3 * a.width + 2 * gap, a.height, GAP_COLOR);
    img.blit(&a, 0);
    img.blit(&b, a.width + gap);
    img.blit(&c, 2 * (a.width + gap));
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::BandSet;
    use crate::geometry::GridSpec;

    fn field(value: f32) -> LoudnessField {
        let spec = GridSpec::new(8, 4.0).unwrap();
        LoudnessField::constant(spec, BandSet::octaves(2).unwrap(), value, OccupancyGrid::empty(spec))
    }

    #[test]
    fn zero_db_is_uniform_neutral() {
        let img = heatmap(&field(0.0), 1, 2, true).unwrap();
        assert_eq!((img.width, img.height), (16, 16));
        assert!(img.pixels.iter().all(|&p| p == NEUTRAL));
    }

    #[test]
    fn floor_and_ceiling_hit_the_ends() {
        let img = heatmap(&field(-40.0), 0, 1, true).unwrap();
        assert!(img.pixels.iter().all(|&p| p == COLD));
        assert_eq!(diverging(20.0, (-40.0, 20.0)), WARM);
        assert_eq!(diverging(-100.0, (-40.0, 20.0)), COLD);
    }

    #[test]
    fn identical_triptych_has_zero_error_panel() {
        let mut f = field(-3.0);
        f.values.iter_mut().enumerate().for_each(|(i, v)| *v = (i % 13) as f32 - 6.0);
        f.object_mask.set(2, 3, true);
        let img = triptych(&f, &f, 1, 2, 10.0).unwrap();
        let side = 16;
        let gap = 2;
        for y in 0..side {
            for x in 0..side {
                assert_eq!(img.get(x, y), img.get(x + side + gap, y));
                assert_eq!(img.get(x + 2 * (side + gap), y), ERROR_STOPS[0]);
            }
        }
        // Object cell (2, 3) lands at image row 8 - 1 - 3 = 4.
        assert_eq!(img.get(2 * 2, 4 * 2), OBJECT_COLOR);
    }

    #[test]
    fn rendering_is_deterministic() {
        let mut f = field(0.0);
        f.values.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f32 * 0.37).sin() * 30.0);
        let a = triptych(&f, &field(1.0), 0, 3, 20.0).unwrap().to_ppm();
        let b = triptych(&f, &field(1.0), 0, 3, 20.0).unwrap().to_ppm();
        assert_eq!(a, b);
        assert!(a.starts_with(b"P6\n"));
    }
}
