//! Response, covariate and spatial-layout files.
//!
//! Voxel order is row-major over the mask grid in every format.
//!
//! * mask grid: text with a `shape <d1> <d2> [<d3>]` line followed by the
//!   integer grid values (nonzero = in mask)
//! * coordinates: CSV with a header, one row per voxel
//! * responses: either a dense CSV/TSV (header, one row per participant) or a
//!   directory holding one whitespace-separated value file per participant,
//!   read in file-name order
//! * covariates: CSV with a header; an intercept column is prepended when no
//!   column is identically one
//! * NIfTI-1 (`.nii`) masks and per-participant volumes with the `nifti` feature

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use super::{atomic_write, csv_reader, parse_f64, read_text, Provenance};
use crate::error::{Result, SimbaError};
use crate::kernel::SpatialDomain;
use crate::model::Dataset;

fn data_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> SimbaError {
    SimbaError::data(format!("{}:{line}: {msg}", path.display()))
}

fn is_nifti(path: &Path) -> bool {
    let s = path.to_string_lossy();
    s.ends_with(".nii") || s.ends_with(".nii.gz")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    pub shape: Vec<usize>,
    pub mask: Vec<bool>,
}

impl MaskGrid {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "shape {}", self.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" "));
        let last = *self.shape.last().unwrap_or(&1);
        for row in self.mask.chunks(last.max(1)) {
            let line: Vec<&str> = row.iter().map(|b| if *b { "1" } else { "0" }).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }
}

pub fn parse_mask(text: &str, path: &Path) -> Result<MaskGrid> {
    let mut shape: Option<Vec<usize>> = None;
    let mut mask = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("shape") {
            let dims: Vec<usize> = rest
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| data_err(path, n + 1, format!("bad dimension '{t}'"))))
                .collect::<Result<_>>()?;
            if !(2..=3).contains(&dims.len()) || dims.iter().any(|&d| d == 0) {
                return Err(data_err(path, n + 1, "mask shape needs 2 or 3 positive dimensions"));
            }
            shape = Some(dims);
            continue;
        }
        if shape.is_none() {
            return Err(data_err(path, n + 1, "mask values before the 'shape' line"));
        }
        for t in line.split_whitespace() {
            let v: i64 = t.parse().map_err(|_| data_err(path, n + 1, format!("mask value '{t}' is not an integer")))?;
            mask.push(v != 0);
        }
    }
    let shape = shape.ok_or_else(|| data_err(path, 1, "missing 'shape' line"))?;
    let want: usize = shape.iter().product();
    if mask.len() != want {
        return Err(data_err(path, text.lines().count(), format!("mask has {} values, shape needs {want}", mask.len())));
    }
    Ok(MaskGrid { shape, mask })
}

/// Reads a mask grid, a NIfTI mask or a coordinate CSV.
pub fn load_domain(path: &Path) -> Result<SpatialDomain> {
    if is_nifti(path) {
        #[cfg(feature = "nifti")]
        {
            let vol = super::nifti::read_nifti(path)?;
            let mask: Vec<bool> = vol.data.iter().map(|x| *x != 0.0).collect();
            return SpatialDomain::from_mask(&vol.dims, &mask);
        }
        #[cfg(not(feature = "nifti"))]
        return Err(SimbaError::config("NIfTI input needs the 'nifti' feature"));
    }
    let text = read_text(path)?;
    let first = text.lines().map(str::trim).find(|l| !l.is_empty() && !l.starts_with('#')).unwrap_or("");
    if first.starts_with("shape") {
        let g = parse_mask(&text, path)?;
        return SpatialDomain::from_mask(&g.shape, &g.mask)
            .map_err(|e| SimbaError::data(format!("{}: {e}", path.display())));
    }
    let rows = read_numeric_csv(&text, path)?.1;
    let d = rows.first().map_or(0, Vec::len);
    let raw = DMatrix::from_fn(rows.len(), d, |i, k| rows[i][k]);
    SpatialDomain::from_coords(raw).map_err(|e| SimbaError::data(format!("{}: {e}", path.display())))
}

/// Header and numeric rows of a CSV (or TSV) file; every row must have the
/// header's width.
fn read_numeric_csv(text: &str, path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let tab = path.extension().is_some_and(|e| e == "tsv")
        || text.lines().find(|l| !l.starts_with('#')).is_some_and(|l| l.contains('\t'));
    let mut rdr = csv_reader(text, true);
    if tab {
        rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .delimiter(b'\t')
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(text.as_bytes());
    }
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| data_err(path, 1, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| data_err(path, 0, e))?;
        let line = rec.position().map_or(0, |p| p.line()) as usize;
        if rec.len() != header.len() {
            return Err(data_err(path, line, format!("expected {} columns, found {}", header.len(), rec.len())));
        }
        rows.push(rec.iter().map(|t| parse_f64(t, path, line as u64)).collect::<Result<Vec<f64>>>()?);
    }
    if rows.is_empty() {
        return Err(data_err(path, 1, "no data rows"));
    }
    Ok((header, rows))
}

fn load_responses(path: &Path, domain: &SpatialDomain) -> Result<DMatrix<f64>> {
    let v = domain.n_voxels();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| SimbaError::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(SimbaError::data(format!("{}: no participant files", path.display())));
        }
        let mut y = DMatrix::zeros(files.len(), v);
        for (i, f) in files.iter().enumerate() {
            let vals = if is_nifti(f) { participant_volume(f, domain)? } else { participant_flat(f)? };
            if vals.len() != v {
                return Err(SimbaError::data(format!("{}: {} values, expected {v}", f.display(), vals.len())));
            }
            for (k, x) in vals.into_iter().enumerate() {
                y[(i, k)] = x;
            }
        }
        return Ok(y);
    }
    let (_, rows) = read_numeric_csv(&read_text(path)?, path)?;
    if rows[0].len() != v {
        return Err(data_err(path, 1, format!("{} response columns but the domain has {v} voxels", rows[0].len())));
    }
    Ok(DMatrix::from_fn(rows.len(), v, |i, k| rows[i][k]))
}

fn participant_flat(f: &Path) -> Result<Vec<f64>> {
    let text = read_text(f)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        for t in line.split_whitespace() {
            out.push(parse_f64(t, f, n as u64 + 1)?);
        }
    }
    Ok(out)
}

fn participant_volume(f: &Path, domain: &SpatialDomain) -> Result<Vec<f64>> {
    #[cfg(feature = "nifti")]
    {
        let vol = super::nifti::read_nifti(f)?;
        let (shape, flat) = match (&domain.mask_shape, domain.grid_positions()) {
            (Some(s), Some(g)) => (s, g),
            _ => return Err(SimbaError::data(format!("{}: volumes need a grid mask", f.display()))),
        };
        if &vol.dims != shape {
            return Err(SimbaError::data(format!("{}: volume shape {:?} differs from mask {:?}", f.display(), vol.dims, shape)));
        }
        Ok(flat.iter().map(|&g| vol.data[g]).collect())
    }
    #[cfg(not(feature = "nifti"))]
    {
        let _ = domain;
        Err(SimbaError::config(format!("{}: NIfTI input needs the 'nifti' feature", f.display())))
    }
}

/// Covariate matrix with a leading intercept, plus column names.
pub fn load_covariates(path: &Path) -> Result<(DMatrix<f64>, Vec<String>)> {
    let (mut names, rows) = read_numeric_csv(&read_text(path)?, path)?;
    let (n, p) = (rows.len(), names.len());
    let mut x = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
    match (0..p).find(|&j| x.column(j).iter().all(|&c| c == 1.0)) {
        Some(0) => {}
        Some(j) => {
            x.swap_columns(0, j);
            names.swap(0, j);
        }
        None => {
            x = x.insert_column(0, 1.0);
            names.insert(0, "intercept".into());
        }
    }
    Ok((x, names))
}

pub fn load_dataset(responses: &Path, covariates: &Path, coords_or_mask: &Path) -> Result<Dataset> {
    let domain = load_domain(coords_or_mask)?;
    let y = load_responses(responses, &domain)?;
    let (x, names) = load_covariates(covariates)?;
    if x.nrows() != y.nrows() {
        return Err(SimbaError::data(format!(
            "{} has {} rows but {} has {} participants",
            covariates.display(),
            x.nrows(),
            responses.display(),
            y.nrows()
        )));
    }
    Dataset::with_names(y, x, domain, names)
}

/// Paths written by [`save_dataset`].
#[derive(Debug, Clone)]
pub struct DatasetFiles {
    pub responses: PathBuf,
    pub covariates: PathBuf,
    pub layout: PathBuf,
}

/// Writes `responses.csv`, `covariates.csv` and either `mask.txt` (grid
/// domains) or `coords.csv`.
pub fn save_dataset(dir: &Path, data: &Dataset, prov: &Provenance) -> Result<DatasetFiles> {
    let files = DatasetFiles {
        responses: dir.join("responses.csv"),
        covariates: dir.join("covariates.csv"),
        layout: match (&data.domain.mask_shape, data.domain.grid_positions()) {
            (Some(_), Some(_)) => dir.join("mask.txt"),
            _ => dir.join("coords.csv"),
        },
    };
    let matrix_csv = |m: &DMatrix<f64>, header: Vec<String>| {
        let mut s = prov.line();
        s.push('\n');
        s.push_str(&header.join(","));
        s.push('\n');
        for r in m.row_iter() {
            let vals: Vec<String> = r.iter().map(|x| x.to_string()).collect();
            s.push_str(&vals.join(","));
            s.push('\n');
        }
        s
    };
    let vh = (0..data.n_voxels()).map(|v| format!("v{v}")).collect();
    atomic_write(&files.responses, matrix_csv(&data.y, vh).as_bytes())?;
    atomic_write(&files.covariates, matrix_csv(&data.x, data.covariate_names.clone()).as_bytes())?;
    let layout = match (&data.domain.mask_shape, data.domain.grid_positions()) {
        (Some(shape), Some(flat)) => {
            let mut mask = vec![false; shape.iter().product()];
            flat.iter().for_each(|&f| mask[f] = true);
            format!("{}\n{}", prov.line(), MaskGrid { shape: shape.clone(), mask }.to_text())
        }
        _ => matrix_csv(&data.domain.coords, (0..data.domain.dim()).map(|k| format!("coord{k}")).collect()),
    };
    atomic_write(&files.layout, layout.as_bytes())?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn prov() -> Provenance {
        Provenance { config_hash: "h".into(), seed: 1 }
    }

    #[test]
    fn mask_grid_and_flat_files() {
        let dir = tempfile::tempdir().unwrap();
        let mask = dir.path().join("mask.txt");
        fs::write(&mask, "# 2x2 grid\nshape 2 2\n1 0\n1 1\n").unwrap();
        let resp = dir.path().join("subjects");
        fs::create_dir(&resp).unwrap();
        fs::write(resp.join("s01.txt"), "1.5 2.5\n3.5\n").unwrap();
        fs::write(resp.join("s02.txt"), "-1 0 1").unwrap();
        let cov = dir.path().join("cov.csv");
        fs::write(&cov, "age\n0.3\n-0.3\n").unwrap();
        let d = load_dataset(&resp, &cov, &mask).unwrap();
        assert_eq!((d.n(), d.n_voxels()), (2, 3));
        assert_eq!(d.y.row(0).iter().copied().collect::<Vec<_>>(), vec![1.5, 2.5, 3.5]);
        // grid indices (0,0), (1,0), (1,1) scaled by the common span
        assert_eq!(d.domain.coords, DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 1.0, 1.0]));
        assert_eq!(d.covariate_names, vec!["intercept", "age"]);
        assert_eq!(d.x.column(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0]);
    }

    #[test]
    fn ones_column_moves_to_front() {
        let dir = tempfile::tempdir().unwrap();
        let cov = dir.path().join("cov.csv");
        fs::write(&cov, "age,const\n2,1\n3,1\n").unwrap();
        let (x, names) = load_covariates(&cov).unwrap();
        assert_eq!(names, vec!["const", "age"]);
        assert_eq!(x, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 3.0]));
    }

    #[test]
    fn save_load_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let dom = SpatialDomain::from_mask(&[3, 4], &[true, true, false, true, true, true, true, false, true, true, true, true]).unwrap();
        let y = DMatrix::from_fn(3, dom.n_voxels(), |i, v| ((i * 31 + v * 7) as f64).sin() / 3.0);
        let x = DMatrix::from_fn(3, 2, |i, j| if j == 0 { 1.0 } else { (i as f64 + 0.1).ln() });
        let d = Dataset::new(y, x, dom).unwrap();
        let f = save_dataset(dir.path(), &d, &prov()).unwrap();
        let back = load_dataset(&f.responses, &f.covariates, &f.layout).unwrap();
        assert_eq!(back.y, d.y);
        assert_eq!(back.x, d.x);
        assert_eq!(back.domain, d.domain);
        assert_eq!(back.covariate_names, d.covariate_names);
    }

    #[test]
    fn coordinate_csv_and_tsv() {
        let dir = tempfile::tempdir().unwrap();
        let c = dir.path().join("c.tsv");
        fs::write(&c, "x\ty\n0\t0\n2\t0\n0\t1\n").unwrap();
        let dom = load_domain(&c).unwrap();
        assert_eq!(dom.coords[(1, 0)], 1.0);
        assert_eq!(dom.coords[(2, 1)], 0.5);
        let r = dir.path().join("r.csv");
        fs::write(&r, "a,b,c\n1,2,3\n4,5,6\n").unwrap();
        let cov = dir.path().join("cov.csv");
        fs::write(&cov, "intercept\n1\n1\n").unwrap();
        assert_eq!(load_dataset(&r, &cov, &c).unwrap().n_voxels(), 3);
    }

    #[test]
    fn errors_carry_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let c = dir.path().join("c.csv");
        fs::write(&c, "x,y\n0,0\n1,1\n0,0\n").unwrap();
        assert!(load_domain(&c).unwrap_err().to_string().contains("duplicate"));
        let r = dir.path().join("r.csv");
        fs::write(&r, "a,b\n1,2\n3,oops\n").unwrap();
        let dom = dir.path().join("m.txt");
        fs::write(&dom, "shape 1 2\n1 1\n").unwrap();
        let cov = dir.path().join("cov.csv");
        fs::write(&cov, "z\n1\n2\n").unwrap();
        let e = load_dataset(&r, &cov, &dom).unwrap_err().to_string();
        assert!(e.contains("r.csv:3"), "{e}");
        fs::write(&r, "a,b\n1,2\n3,inf\n").unwrap();
        assert!(load_dataset(&r, &cov, &dom).unwrap_err().to_string().contains("non-finite"));
        fs::write(&r, "a,b,c\n1,2,3\n3,4,5\n").unwrap();
        assert!(matches!(load_dataset(&r, &cov, &dom), Err(SimbaError::Data(_))));
        fs::write(&dom, "shape 2 2\n1 1 1\n").unwrap();
        assert!(load_domain(&dom).unwrap_err().to_string().contains("m.txt"));
        fs::write(&cov, "z\n1\n").unwrap();
        fs::write(&dom, "shape 1 2\n1 1\n").unwrap();
        fs::write(&r, "a,b\n1,2\n3,4\n").unwrap();
        assert!(load_dataset(&r, &cov, &dom).is_err());
    }

    #[cfg(feature = "nifti")]
    #[test]
    fn nifti_mask_and_volumes() {
        use crate::io::nifti::write_nifti;
        let dir = tempfile::tempdir().unwrap();
        let mask = dir.path().join("mask.nii");
        write_nifti(&mask, &[2, 3], &[1.0, 0.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
        let vols = dir.path().join("vols");
        fs::create_dir(&vols).unwrap();
        for s in 0..3 {
            let data: Vec<f64> = (0..6).map(|k| (10 * s + k) as f64).collect();
            write_nifti(&vols.join(format!("sub{s}.nii")), &[2, 3], &data).unwrap();
        }
        let cov = dir.path().join("cov.csv");
        fs::write(&cov, "g\n0\n1\n0\n").unwrap();
        let d = load_dataset(&vols, &cov, &mask).unwrap();
        assert_eq!(d.n_voxels(), 4);
        assert_eq!(d.y.row(1).iter().copied().collect::<Vec<_>>(), vec![10.0, 12.0, 13.0, 14.0]);
    }
}
