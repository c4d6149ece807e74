//! Self-describing columnar effect-map files.
//!
//! ```text
//! # simba config_hash=<hex> seed=<u64>
//! # simba-map version=1
//! # V=<voxels> d=<dims> threshold=<t>
//! # covariates=<name>,<name>
//! # fields=mean,lower,upper,p_plus,e_s,active
//! voxel_id,coord0,...,<covariate>.<field>,...
//! ```

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{atomic_write, parse_f64, read_text, Provenance};
use crate::error::{Result, SimbaError};
use crate::summaries::EffectMap;

pub const MAP_FIELDS: [&str; 6] = ["mean", "lower", "upper", "p_plus", "e_s", "active"];

#[derive(Debug, Clone, PartialEq)]
pub struct MapFile {
    pub provenance: Option<Provenance>,
    pub voxel_ids: Vec<usize>,
    /// V×d.
    pub coords: DMatrix<f64>,
    pub covariate_names: Vec<String>,
    pub maps: Vec<EffectMap>,
}

impl MapFile {
    pub fn n_voxels(&self) -> usize {
        self.voxel_ids.len()
    }

    pub fn threshold(&self) -> f64 {
        self.maps.first().map_or(crate::summaries::DEFAULT_THRESHOLD, |m| m.threshold)
    }

    pub fn to_text(&self) -> Result<String> {
        let v = self.voxel_ids.len();
        let d = self.coords.ncols();
        if self.coords.nrows() != v || self.maps.len() != self.covariate_names.len() {
            return Err(SimbaError::data("map file parts disagree in size"));
        }
        if self.maps.iter().any(|m| m.n_voxels() != v) {
            return Err(SimbaError::data("effect map length differs from the voxel count"));
        }
        if self.covariate_names.iter().any(|n| n.contains(',') || n.contains('.')) {
            return Err(SimbaError::data("covariate names may not contain ',' or '.'"));
        }
        let mut s = String::new();
        if let Some(p) = &self.provenance {
            s.push_str(&p.line());
            s.push('\n');
        }
        let _ = writeln!(s, "# simba-map version=1");
        let _ = writeln!(s, "# V={v} d={d} threshold={}", self.threshold());
        let _ = writeln!(s, "# covariates={}", self.covariate_names.join(","));
        let _ = writeln!(s, "# fields={}", MAP_FIELDS.join(","));
        let mut head = vec!["voxel_id".to_string()];
        head.extend((0..d).map(|k| format!("coord{k}")));
        for n in &self.covariate_names {
            head.extend(MAP_FIELDS.iter().map(|f| format!("{n}.{f}")));
        }
        let _ = writeln!(s, "{}", head.join(","));
        for i in 0..v {
            let _ = write!(s, "{}", self.voxel_ids[i]);
            for k in 0..d {
                let _ = write!(s, ",{}", self.coords[(i, k)]);
            }
            for m in &self.maps {
                let _ = write!(
                    s,
                    ",{},{},{},{},{},{}",
                    m.mean[i], m.lower[i], m.upper[i], m.p_plus[i], m.e_s[i], m.active[i] as u8
                );
            }
            s.push('\n');
        }
        Ok(s)
    }
}

pub fn write_map_file(path: &Path, map: &MapFile) -> Result<()> {
    atomic_write(path, map.to_text()?.as_bytes())
}

pub fn read_map_file(path: &Path) -> Result<MapFile> {
    parse_map_text(&read_text(path)?, path)
}

pub fn parse_map_text(text: &str, path: &Path) -> Result<MapFile> {
    let err = |line: usize, msg: &str| SimbaError::data(format!("{}:{line}: {msg}", path.display()));
    let mut provenance = None;
    let (mut v, mut d, mut threshold) = (None, None, None);
    let mut names: Option<Vec<String>> = None;
    let mut fields: Option<Vec<String>> = None;
    let mut lines = text.lines().enumerate().peekable();
    while let Some((n, line)) = lines.peek().copied() {
        if !line.starts_with('#') {
            break;
        }
        lines.next();
        if let Some(p) = Provenance::parse(line) {
            provenance = Some(p);
        } else if let Some(rest) = line.strip_prefix("# covariates=") {
            names = Some(rest.split(',').map(str::to_string).collect());
        } else if let Some(rest) = line.strip_prefix("# fields=") {
            fields = Some(rest.split(',').map(str::to_string).collect());
        } else if line.starts_with("# V=") {
            for tok in line[2..].split_whitespace() {
                let (k, val) = tok.split_once('=').ok_or_else(|| err(n + 1, "malformed size line"))?;
                match k {
                    "V" => v = val.parse::<usize>().ok(),
                    "d" => d = val.parse::<usize>().ok(),
                    "threshold" => threshold = val.parse::<f64>().ok(),
                    _ => {}
                }
            }
        } else if line.starts_with("# simba-map") && !line.contains("version=1") {
            return Err(err(n + 1, "unsupported map file version"));
        }
    }
    let (v, d, threshold) = match (v, d, threshold) {
        (Some(v), Some(d), Some(t)) => (v, d, t),
        _ => return Err(err(1, "missing 'V= d= threshold=' header")),
    };
    let names = names.ok_or_else(|| err(1, "missing covariates header"))?;
    let fields = fields.ok_or_else(|| err(1, "missing fields header"))?;
    if fields != MAP_FIELDS {
        return Err(err(1, "field list does not match this reader"));
    }
    let (hn, header) = lines.next().ok_or_else(|| err(1, "missing column header"))?;
    let cols: Vec<&str> = header.split(',').collect();
    let width = 1 + d + names.len() * MAP_FIELDS.len();
    if cols.len() != width {
        return Err(err(hn + 1, "column header does not match the declared fields"));
    }
    let p = names.len();
    let mut ids = Vec::with_capacity(v);
    let mut coords = DMatrix::zeros(v, d);
    let mut vals = vec![DMatrix::<f64>::zeros(v, MAP_FIELDS.len()); p];
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let i = ids.len();
        if i >= v {
            return Err(err(n + 1, "more rows than declared voxels"));
        }
        let toks: Vec<&str> = line.split(',').collect();
        if toks.len() != width {
            return Err(err(n + 1, &format!("expected {width} columns, found {}", toks.len())));
        }
        ids.push(toks[0].trim().parse().map_err(|_| err(n + 1, "bad voxel id"))?);
        for k in 0..d {
            coords[(i, k)] = parse_f64(toks[1 + k], path, n as u64 + 1)?;
        }
        for (j, m) in vals.iter_mut().enumerate() {
            for f in 0..MAP_FIELDS.len() {
                m[(i, f)] = parse_f64(toks[1 + d + j * MAP_FIELDS.len() + f], path, n as u64 + 1)?;
            }
        }
    }
    if ids.len() != v {
        return Err(err(text.lines().count(), &format!("expected {v} rows, found {}", ids.len())));
    }
    let maps = vals
        .into_iter()
        .enumerate()
        .map(|(j, m)| {
            let col = |f: usize| DVector::from_iterator(v, m.column(f).iter().copied());
            EffectMap {
                covariate: j,
                mean: col(0),
                lower: col(1),
                upper: col(2),
                p_plus: col(3),
                e_s: col(4),
                active: m.column(5).iter().map(|x| *x != 0.0).collect(),
                threshold,
            }
        })
        .collect();
    Ok(MapFile { provenance, voxel_ids: ids, coords, covariate_names: names, maps })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MapFile {
        let v = 4;
        let map = |j: usize, s: f64| EffectMap {
            covariate: j,
            mean: DVector::from_fn(v, |i, _| s * (i as f64 - 1.3) / 3.0),
            lower: DVector::from_fn(v, |i, _| s * i as f64 - 0.1),
            upper: DVector::from_fn(v, |i, _| s * i as f64 + 0.1),
            p_plus: DVector::from_vec(vec![0.1, 0.5, 0.975, 1.0]),
            e_s: DVector::from_vec(vec![-0.8, 0.0, 0.95, 1.0]),
            active: vec![false, false, false, true],
            threshold: 0.95,
        };
        MapFile {
            provenance: Some(Provenance { config_hash: "00ff".into(), seed: 7 }),
            voxel_ids: vec![0, 1, 2, 3],
            coords: DMatrix::from_fn(v, 2, |i, k| (i * 2 + k) as f64 / 7.0),
            covariate_names: vec!["intercept".into(), "age".into()],
            maps: vec![map(0, 1.0), map(1, -std::f64::consts::PI)],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let m = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.map");
        write_map_file(&p, &m).unwrap();
        let back = read_map_file(&p).unwrap();
        assert_eq!(back, m);
        let text = m.to_text().unwrap();
        let header = text.lines().find(|l| !l.starts_with('#')).unwrap();
        assert_eq!(header.split(',').count(), 1 + 2 + 2 * MAP_FIELDS.len());
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1 + m.n_voxels());
    }

    #[test]
    fn rejects_inconsistent_files() {
        let text = sample().to_text().unwrap();
        let p = Path::new("x.map");
        let short: String = text.lines().take(text.lines().count() - 1).map(|l| format!("{l}\n")).collect();
        assert!(matches!(parse_map_text(&short, p), Err(SimbaError::Data(_))));
        let bad = text.replacen("0.975", "abc", 1);
        let e = parse_map_text(&bad, p).unwrap_err().to_string();
        assert!(e.contains("x.map:"), "{e}");
        let fields = text.replace("fields=mean", "fields=avg");
        assert!(parse_map_text(&fields, p).is_err());
    }
}
