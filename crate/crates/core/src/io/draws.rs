//! Text artifacts for posterior draws, trace files and variational states.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{parse_f64, read_text, write_text, Provenance};
use crate::error::{Result, SimbaError};
use crate::model::ParameterState;
use crate::vi::{IgFactor, VariationalState};

fn join(it: impl Iterator<Item = f64>) -> String {
    let mut s = String::new();
    for (k, x) in it.enumerate() {
        if k > 0 {
            s.push(',');
        }
        let _ = write!(s, "{x}");
    }
    s
}

fn header_value(text: &str, key: &str) -> Option<usize> {
    text.lines()
        .filter(|l| l.starts_with('#'))
        .flat_map(|l| l.split_whitespace())
        .find_map(|t| t.strip_prefix(&format!("{key}=")).and_then(|v| v.parse().ok()))
}

/// One row per stored draw: chain id, variances, α, shift, then θ_β row-major.
/// Participant effects are not written.
pub fn write_draws(path: &Path, prov: &Provenance, chains: &[Vec<ParameterState>]) -> Result<()> {
    let first = chains
        .iter()
        .find_map(|c| c.first())
        .ok_or_else(|| SimbaError::data("no draws to write"))?;
    let (p, l) = first.theta_beta.shape();
    let mut s = format!("# simba-draws version=1 p={p} l={l} chains={}\n", chains.len());
    let mut head = vec!["chain".to_string()];
    head.extend(["sigma2_eps", "sigma2_eta", "sigma2_beta", "sigma2_alpha"].map(String::from));
    head.extend((0..p).map(|j| format!("alpha{j}")));
    head.extend((0..p).map(|j| format!("shift{j}")));
    for j in 0..p {
        head.extend((0..l).map(|c| format!("theta{j}_{c}")));
    }
    let _ = writeln!(s, "{}", head.join(","));
    for (c, draws) in chains.iter().enumerate() {
        for d in draws {
            let tb = d.theta_beta.transpose();
            let vals = [d.sigma2_eps, d.sigma2_eta, d.sigma2_beta, d.sigma2_alpha]
                .into_iter()
                .chain(d.alpha.iter().copied())
                .chain(d.beta_shift.iter().copied())
                .chain(tb.iter().copied());
            let _ = writeln!(s, "{c},{}", join(vals));
        }
    }
    write_text(path, prov, &s)
}

pub fn read_draws(path: &Path) -> Result<Vec<Vec<ParameterState>>> {
    let text = read_text(path)?;
    let (p, l, k) = match (header_value(&text, "p"), header_value(&text, "l"), header_value(&text, "chains")) {
        (Some(p), Some(l), Some(k)) => (p, l, k),
        _ => return Err(SimbaError::data(format!("{}: missing draws header", path.display()))),
    };
    let width = 1 + 4 + 2 * p + p * l;
    let mut chains = vec![Vec::new(); k];
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.starts_with('#')).skip(1) {
        let t: Vec<&str> = line.split(',').collect();
        if t.len() != width {
            return Err(SimbaError::data(format!("{}:{}: expected {width} columns", path.display(), n + 1)));
        }
        let c: usize = t[0]
            .parse()
            .ok()
            .filter(|c| *c < k)
            .ok_or_else(|| SimbaError::data(format!("{}:{}: bad chain id", path.display(), n + 1)))?;
        let v: Vec<f64> = t[1..].iter().map(|x| parse_f64(x, path, n as u64 + 1)).collect::<Result<_>>()?;
        let mut d = ParameterState::zeros(0, p, l, 0);
        d.sigma2_eps = v[0];
        d.sigma2_eta = v[1];
        d.sigma2_beta = v[2];
        d.sigma2_alpha = v[3];
        d.alpha = DVector::from_column_slice(&v[4..4 + p]);
        d.beta_shift = DVector::from_column_slice(&v[4 + p..4 + 2 * p]);
        d.theta_beta = DMatrix::from_row_slice(p, l, &v[4 + 2 * p..]);
        chains[c].push(d);
    }
    Ok(chains)
}

/// Columns are chains, rows are iterations.
pub fn write_traces(path: &Path, prov: &Provenance, traces: &[Vec<f64>]) -> Result<()> {
    let len = traces.iter().map(Vec::len).max().unwrap_or(0);
    let mut s = String::new();
    let head: Vec<String> = (0..traces.len()).map(|c| format!("chain{c}")).collect();
    let _ = writeln!(s, "iteration,{}", head.join(","));
    for i in 0..len {
        let row: Vec<String> = traces.iter().map(|t| t.get(i).map_or(String::new(), |x| x.to_string())).collect();
        let _ = writeln!(s, "{i},{}", row.join(","));
    }
    write_text(path, prov, &s)
}

pub fn read_traces(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.starts_with('#'));
    let (_, head) = lines.next().ok_or_else(|| SimbaError::data(format!("{}: empty trace file", path.display())))?;
    let k = head.split(',').count() - 1;
    let mut out = vec![Vec::new(); k];
    for (n, line) in lines {
        for (c, tok) in line.split(',').skip(1).enumerate().take(k) {
            if !tok.is_empty() {
                out[c].push(parse_f64(tok, path, n as u64 + 1)?);
            }
        }
    }
    Ok(out)
}

/// Tagged rows: `<name>,<values>`; matrices are written one row per line.
pub fn write_vstate(path: &Path, prov: &Provenance, q: &VariationalState) -> Result<()> {
    let (p, l) = q.beta_mean.shape();
    let (n, le) = q.eta_mean.shape();
    let mut s = format!("# simba-vstate version=1 p={p} l={l} n={n} le={le}\n");
    let mut row = |tag: String, it: &mut dyn Iterator<Item = f64>| {
        let _ = writeln!(s, "{tag},{}", join(it));
    };
    row("alpha_mean".into(), &mut q.alpha_mean.iter().copied());
    row("alpha_var".into(), &mut q.alpha_var.iter().copied());
    row("beta_var".into(), &mut q.beta_var.iter().copied());
    row("beta_shift".into(), &mut q.beta_shift.iter().copied());
    for j in 0..p {
        row(format!("beta_mean{j}"), &mut q.beta_mean.row(j).iter().copied());
    }
    for i in 0..n {
        row(format!("eta_mean{i}"), &mut q.eta_mean.row(i).iter().copied());
    }
    for i in 0..le {
        row(format!("eta_cov{i}"), &mut q.eta_cov.row(i).iter().copied());
    }
    for (tag, f) in [
        ("q_sigma2_eps", q.q_sigma2_eps),
        ("q_sigma2_eta", q.q_sigma2_eta),
        ("q_sigma2_beta", q.q_sigma2_beta),
        ("q_sigma2_alpha", q.q_sigma2_alpha),
        ("q_a_eps", q.q_a_eps),
        ("q_a_eta", q.q_a_eta),
        ("q_a_beta", q.q_a_beta),
        ("q_a_alpha", q.q_a_alpha),
    ] {
        row(tag.into(), &mut [f.shape, f.rate].into_iter());
    }
    write_text(path, prov, &s)
}

pub fn read_vstate(path: &Path) -> Result<VariationalState> {
    let text = read_text(path)?;
    let dims = ["p", "l", "n", "le"].map(|k| header_value(&text, k));
    let [p, l, n, le] = match dims {
        [Some(a), Some(b), Some(c), Some(d)] => [a, b, c, d],
        _ => return Err(SimbaError::data(format!("{}: missing variational state header", path.display()))),
    };
    let mut rows: HashMap<String, Vec<f64>> = HashMap::new();
    for (k, line) in text.lines().enumerate().filter(|(_, l)| !l.starts_with('#') && !l.is_empty()) {
        let mut it = line.split(',');
        let tag = it.next().unwrap_or_default().to_string();
        let vals = it.map(|x| parse_f64(x, path, k as u64 + 1)).collect::<Result<Vec<f64>>>()?;
        rows.insert(tag, vals);
    }
    let get = |tag: &str, len: usize| -> Result<Vec<f64>> {
        match rows.get(tag) {
            Some(v) if v.len() == len => Ok(v.clone()),
            _ => Err(SimbaError::data(format!("{}: missing or malformed '{tag}'", path.display()))),
        }
    };
    let mat = |prefix: &str, r: usize, c: usize| -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(r, c);
        for i in 0..r {
            let v = get(&format!("{prefix}{i}"), c)?;
            for (k, x) in v.into_iter().enumerate() {
                m[(i, k)] = x;
            }
        }
        Ok(m)
    };
    let ig = |tag: &str| -> Result<IgFactor> {
        let v = get(tag, 2)?;
        Ok(IgFactor { shape: v[0], rate: v[1] })
    };
    Ok(VariationalState {
        alpha_mean: DVector::from_vec(get("alpha_mean", p)?),
        alpha_var: DVector::from_vec(get("alpha_var", p)?),
        beta_mean: mat("beta_mean", p, l)?,
        beta_var: DVector::from_vec(get("beta_var", p)?),
        eta_mean: mat("eta_mean", n, le)?,
        eta_cov: mat("eta_cov", le, le)?,
        beta_shift: DVector::from_vec(get("beta_shift", p)?),
        q_sigma2_eps: ig("q_sigma2_eps")?,
        q_sigma2_eta: ig("q_sigma2_eta")?,
        q_sigma2_beta: ig("q_sigma2_beta")?,
        q_sigma2_alpha: ig("q_sigma2_alpha")?,
        q_a_eps: ig("q_a_eps")?,
        q_a_eta: ig("q_a_eta")?,
        q_a_beta: ig("q_a_beta")?,
        q_a_alpha: ig("q_a_alpha")?,
    })
}
