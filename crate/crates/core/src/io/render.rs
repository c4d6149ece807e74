//! Binary PPM rasters of effect maps and predictive-check curves.

use std::fmt::Write as _;

use crate::diagnostics::PpcResult;
use crate::error::{Result, SimbaError};
use crate::kernel::SpatialDomain;
use crate::summaries::EffectMap;

use super::Provenance;

pub const BACKGROUND: [u8; 3] = [128, 128, 128];
const NEG: [f64; 3] = [59.0, 76.0, 192.0];
const POS: [f64; 3] = [180.0, 4.0, 38.0];
/// Opacity of a sub-threshold voxel is this fraction of |E_s|.
pub const FADE: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub rgb: Vec<u8>,
}

impl Raster {
    pub fn filled(width: usize, height: usize, c: [u8; 3]) -> Self {
        Raster { width, height, rgb: c.repeat(width * height) }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let o = 3 * (row * self.width + col);
        [self.rgb[o], self.rgb[o + 1], self.rgb[o + 2]]
    }

    fn set(&mut self, row: usize, col: usize, c: [u8; 3]) {
        let o = 3 * (row * self.width + col);
        self.rgb[o..o + 3].copy_from_slice(&c);
    }

    /// P6 bytes with the provenance as a header comment.
    pub fn to_ppm(&self, prov: &Provenance) -> Vec<u8> {
        let mut out = format!("P6\n{}\n{} {}\n255\n", prov.line(), self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }
}

/// Diverging blue-white-red color for t ∈ [-1, 1].
pub fn diverging(t: f64) -> [f64; 3] {
    let t = t.clamp(-1.0, 1.0);
    let end = if t < 0.0 { NEG } else { POS };
    let a = t.abs();
    [0, 1, 2].map(|k| 255.0 * (1.0 - a) + end[k] * a)
}

fn blend(c: [f64; 3], alpha: f64) -> [u8; 3] {
    [0, 1, 2].map(|k| (alpha * c[k] + (1.0 - alpha) * BACKGROUND[k] as f64).round().clamp(0.0, 255.0) as u8)
}

/// Grid rows, columns and the flat positions of one 2D slice.
fn slice_layout(domain: &SpatialDomain, slice: usize) -> Result<(usize, usize, Vec<Option<usize>>)> {
    let (shape, flat) = match (&domain.mask_shape, domain.grid_positions()) {
        (Some(s), Some(f)) => (s, f),
        _ => return Err(SimbaError::data("rendering needs a grid-backed domain")),
    };
    let (rows, cols, depth) = match shape.as_slice() {
        [r, c] => (*r, *c, 1),
        [r, c, d] => (*r, *c, *d),
        _ => return Err(SimbaError::data("rendering supports 2D and 3D grids")),
    };
    if slice >= depth {
        return Err(SimbaError::config(format!("slice {slice} out of range (depth {depth})")));
    }
    let mut cell = vec![None; rows * cols];
    for (v, &f) in flat.iter().enumerate() {
        if f % depth == slice {
            cell[f / depth] = Some(v);
        }
    }
    Ok((rows, cols, cell))
}

/// Color by the effect mean scaled to its largest magnitude; voxels beyond
/// the threshold are opaque, the rest fade with |E_s|.
pub fn render_effect_map(map: &EffectMap, domain: &SpatialDomain, slice: usize) -> Result<Raster> {
    if map.n_voxels() != domain.n_voxels() {
        return Err(SimbaError::data("map and domain differ in voxel count"));
    }
    let (rows, cols, cell) = slice_layout(domain, slice)?;
    let scale = map.mean.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut img = Raster::filled(cols, rows, BACKGROUND);
    for (pos, v) in cell.iter().enumerate() {
        if let Some(v) = *v {
            let t = if scale > 0.0 { map.mean[v] / scale } else { 0.0 };
            let alpha = if map.e_s[v].abs() > map.threshold { 1.0 } else { FADE * map.e_s[v].abs() };
            img.set(pos / cols, pos % cols, blend(diverging(t), alpha));
        }
    }
    Ok(img)
}

/// Effect means on the slice grid, `nan` outside the mask.
pub fn effect_grid_csv(map: &EffectMap, domain: &SpatialDomain, slice: usize) -> Result<String> {
    let (rows, cols, cell) = slice_layout(domain, slice)?;
    let mut s = String::new();
    for r in 0..rows {
        let line: Vec<String> = (0..cols)
            .map(|c| cell[r * cols + c].map_or("nan".to_string(), |v| map.mean[v].to_string()))
            .collect();
        let _ = writeln!(s, "{}", line.join(","));
    }
    Ok(s)
}

/// Replicated densities in light blue, observed density in black.
pub fn render_ppc(ppc: &PpcResult, height: usize) -> Raster {
    let width = ppc.observed.len();
    let mut img = Raster::filled(width, height, [255, 255, 255]);
    let top = ppc
        .replicated
        .iter()
        .flatten()
        .chain(ppc.observed.iter())
        .fold(0.0f64, |m, x| m.max(*x));
    if top <= 0.0 || height < 2 {
        return img;
    }
    let y = |d: f64| height - 1 - ((d / top) * (height - 1) as f64).round() as usize;
    let draw = |img: &mut Raster, curve: &[f64], c: [u8; 3]| {
        for b in 0..width {
            let (a, e) = (y(curve[b]), y(curve[if b + 1 < width { b + 1 } else { b }]));
            for r in a.min(e)..=a.max(e) {
                img.set(r, b, c);
            }
        }
    };
    for rep in &ppc.replicated {
        draw(&mut img, rep, [150, 190, 235]);
    }
    draw(&mut img, &ppc.observed, [0, 0, 0]);
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn domain() -> SpatialDomain {
        SpatialDomain::from_mask(&[3, 4], &[false, true, true, true, true, true, true, true, true, true, true, false]).unwrap()
    }

    fn map(mean: Vec<f64>, e_s: Vec<f64>) -> EffectMap {
        let v = mean.len();
        EffectMap {
            covariate: 0,
            mean: DVector::from_vec(mean),
            lower: DVector::zeros(v),
            upper: DVector::zeros(v),
            p_plus: DVector::from_element(v, 0.5),
            e_s: DVector::from_vec(e_s),
            active: vec![false; v],
            threshold: 0.95,
        }
    }

    #[test]
    fn zero_map_is_uniform_background() {
        let d = domain();
        let img = render_effect_map(&map(vec![0.0; 10], vec![0.0; 10]), &d, 0).unwrap();
        assert_eq!((img.height, img.width), (3, 4));
        assert_eq!(img, Raster::filled(4, 3, BACKGROUND));
    }

    #[test]
    fn active_voxels_opaque_inactive_faded() {
        let d = domain();
        let mut mean = vec![0.0; 10];
        let mut e = vec![0.0; 10];
        mean[0] = 2.0;
        e[0] = 0.99; // grid (0,1): full red
        mean[1] = -2.0;
        e[1] = -0.5; // grid (0,2): faded blue
        let img = render_effect_map(&map(mean, e), &d, 0).unwrap();
        assert_eq!(img.pixel(0, 1), [180, 4, 38]);
        let faded = img.pixel(0, 2);
        let a = FADE * 0.5;
        assert_eq!(faded[2], (a * 192.0 + (1.0 - a) * 128.0).round() as u8);
        assert_eq!(img.pixel(0, 0), BACKGROUND);
        let ppm = img.to_ppm(&Provenance { config_hash: "h".into(), seed: 1 });
        assert!(ppm.starts_with(b"P6\n# simba config_hash=h seed=1\n4 3\n255\n"));
        assert_eq!(ppm.len(), "P6\n# simba config_hash=h seed=1\n4 3\n255\n".len() + 36);
    }

    #[test]
    fn grid_csv_marks_outside() {
        let d = domain();
        let s = effect_grid_csv(&map((0..10).map(|x| x as f64).collect(), vec![0.0; 10]), &d, 0).unwrap();
        let first = s.lines().next().unwrap();
        assert_eq!(first, "nan,0,1,2");
        assert_eq!(s.lines().count(), 3);
        assert!(s.lines().last().unwrap().ends_with("nan"));
    }

    #[test]
    fn three_d_slices() {
        let mask = vec![true; 2 * 2 * 3];
        let d = SpatialDomain::from_mask(&[2, 2, 3], &mask).unwrap();
        let m = map((0..12).map(|x| x as f64 - 6.0).collect(), vec![1.0; 12]);
        let img = render_effect_map(&m, &d, 2).unwrap();
        assert_eq!((img.height, img.width), (2, 2));
        assert!(render_effect_map(&m, &d, 3).is_err());
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(diverging(0.0), [255.0; 3]);
        assert_eq!(diverging(1.0), POS);
        assert_eq!(diverging(-3.0), NEG);
    }
}
