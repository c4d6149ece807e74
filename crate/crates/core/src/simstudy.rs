//! Synthetic image-on-scalar data with known effect maps, and the metrics
//! used to score fitted maps against them.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::baselines::bml::{bml_fit_with, BmlOptions};
use crate::baselines::glm::glm_fit;
use crate::diagnostics::{select_num_basis, LoocvConfig, SelectConfig};
use crate::error::{Result, SimbaError};
use crate::gibbs::{pooled_draws, run_gibbs, GibbsConfig};
use crate::kernel::{build_basis_system, default_l_eta, BasisSystem, InducingStrategy, KernelConfig, SpatialDomain};
use crate::model::{transform_dataset, Dataset, PriorConfig};
use crate::rng::{derive_seed, std_normal, stream, stream_rng};
use crate::summaries::{summarize_gibbs, summarize_vi, EffectMap, DEFAULT_THRESHOLD};
use crate::vi::{run_vi, VIConfig};

pub const PHANTOM_SHAPE: [usize; 2] = [48, 56];

/// Elliptical slice with two small elliptical holes, row-major.
pub fn phantom_mask(rows: usize, cols: usize) -> Vec<bool> {
    let cy = (rows as f64 - 1.0) / 2.0;
    let cx = (cols as f64 - 1.0) / 2.0;
    let ry = rows as f64 / 2.0 - 1.0;
    let rx = cols as f64 / 2.0 - 1.0;
    let mut m = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (y, x) = (r as f64 - cy, c as f64 - cx);
            let inside = (y / ry).powi(2) + (x / rx).powi(2) <= 1.0;
            let hole = [-5.0, 5.0]
                .iter()
                .any(|dx| ((y + 2.0) / 6.0).powi(2) + ((x - dx) / 2.5).powi(2) <= 1.0);
            m.push(inside && !hole);
        }
    }
    m
}

pub fn phantom_domain() -> Result<SpatialDomain> {
    let [r, c] = PHANTOM_SHAPE;
    SpatialDomain::from_mask(&PHANTOM_SHAPE, &phantom_mask(r, c))
}

/// 0.5(1 + cos(πt²)) on [0, 1), zero beyond.
pub fn taper(t: f64) -> f64 {
    if t < 1.0 {
        0.5 * (1.0 + (std::f64::consts::PI * t * t).cos())
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Disk { radius: f64 },
    Rect { half: [f64; 2] },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub center: [f64; 2],
    pub shape: Shape,
    pub sign: f64,
}

impl Region {
    pub fn disk(center: [f64; 2], radius: f64, sign: f64) -> Self {
        Region { center, shape: Shape::Disk { radius }, sign }
    }

    pub fn rect(center: [f64; 2], half: [f64; 2], sign: f64) -> Self {
        Region { center, shape: Shape::Rect { half }, sign }
    }

    fn profile(&self, p: [f64; 2]) -> f64 {
        let (dy, dx) = (p[0] - self.center[0], p[1] - self.center[1]);
        match self.shape {
            Shape::Disk { radius } => taper((dy * dy + dx * dx).sqrt() / radius),
            Shape::Rect { half } => taper(dy.abs() / half[0]) * taper(dx.abs() / half[1]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthConfig {
    /// Regions of each map; map j is the effect of covariate j.
    pub maps: Vec<Vec<Region>>,
    /// Mean of β² over each map's nonzero support.
    pub mean_square: f64,
}

impl Default for TruthConfig {
    fn default() -> Self {
        TruthConfig {
            maps: vec![
                vec![
                    Region::disk([0.27, 0.30], 0.2, 1.0),
                    Region::rect([0.58, 0.68], [0.17, 0.22], -1.0),
                ],
                vec![
                    Region::rect([0.27, 0.70], [0.17, 0.18], 1.0),
                    Region::disk([0.60, 0.30], 0.2, -1.0),
                ],
            ],
            mean_square: 1.2,
        }
    }
}

/// Effect maps that vanish outside their regions. Fails when a region center
/// falls outside the mask, a region covers too few voxels, or two regions of
/// one map overlap.
pub fn make_truth(domain: &SpatialDomain, cfg: &TruthConfig) -> Result<Vec<DVector<f64>>> {
    if domain.dim() != 2 {
        return Err(SimbaError::config("truth regions are defined on 2D domains"));
    }
    let v = domain.n_voxels();
    let spacing = grid_spacing(domain);
    let point = |i: usize| [domain.coords[(i, 0)], domain.coords[(i, 1)]];
    let mut out = Vec::with_capacity(cfg.maps.len());
    for (j, regions) in cfg.maps.iter().enumerate() {
        let mut map = DVector::zeros(v);
        let mut owner = vec![usize::MAX; v];
        for (k, reg) in regions.iter().enumerate() {
            let nearest = (0..v)
                .map(|i| {
                    let p = point(i);
                    ((p[0] - reg.center[0]).powi(2) + (p[1] - reg.center[1]).powi(2)).sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            if nearest > spacing {
                return Err(SimbaError::config(format!("map {j} region {k}: center lies outside the mask")));
            }
            let mut count = 0;
            for i in 0..v {
                let w = reg.profile(point(i));
                if w > 0.0 {
                    if owner[i] != usize::MAX {
                        return Err(SimbaError::config(format!("map {j}: regions {} and {k} overlap", owner[i])));
                    }
                    owner[i] = k;
                    map[i] = reg.sign * w;
                    count += 1;
                }
            }
            if count < 5 {
                return Err(SimbaError::config(format!("map {j} region {k} covers only {count} voxels")));
            }
        }
        let support: Vec<f64> = map.iter().filter(|b| **b != 0.0).map(|b| b * b).collect();
        let ms = support.iter().sum::<f64>() / support.len() as f64;
        map *= (cfg.mean_square / ms).sqrt();
        out.push(map);
    }
    Ok(out)
}

fn grid_spacing(domain: &SpatialDomain) -> f64 {
    match &domain.mask_shape {
        Some(shape) => 1.0 / (shape.iter().map(|s| s.saturating_sub(1)).max().unwrap_or(1).max(1) as f64),
        None => 1.0 / (domain.n_voxels() as f64).sqrt(),
    }
}

/// Mean over maps of (mean β² over the map's support) / σ²_ε.
pub fn signal_to_noise(truth: &[DVector<f64>], sigma_eps: f64) -> f64 {
    let per_map: Vec<f64> = truth
        .iter()
        .map(|b| {
            let s: Vec<f64> = b.iter().filter(|x| **x != 0.0).map(|x| x * x).collect();
            s.iter().sum::<f64>() / s.len().max(1) as f64
        })
        .collect();
    per_map.iter().sum::<f64>() / per_map.len() as f64 / (sigma_eps * sigma_eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseModel {
    /// Independent across voxels.
    Iid,
    /// ΨΛ^{1/2}z·σ_ε from the fitting basis.
    Spatial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimScenario {
    pub n: usize,
    pub sigma_eps: f64,
    pub n_replicates: usize,
    pub seed: u64,
    pub noise: NoiseModel,
}

impl SimScenario {
    pub fn new(n: usize, sigma_eps: f64, n_replicates: usize, seed: u64) -> Self {
        SimScenario { n, sigma_eps, n_replicates, seed, noise: NoiseModel::Iid }
    }

    /// N ∈ {50, 200} × σ_ε ∈ {2, 5}.
    pub fn standard(n_replicates: usize, seed: u64) -> Vec<SimScenario> {
        let mut out = Vec::new();
        for (k, (n, s)) in [(200, 2.0), (200, 5.0), (50, 2.0), (50, 5.0)].into_iter().enumerate() {
            out.push(SimScenario::new(n, s, n_replicates, derive_seed(seed, k as u64)));
        }
        out
    }

    pub fn label(&self) -> String {
        format!("N={} sigma={}", self.n, self.sigma_eps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 3 {
            return Err(SimbaError::config("scenario needs at least 3 participants"));
        }
        if !(self.sigma_eps >= 0.0 && self.sigma_eps.is_finite()) {
            return Err(SimbaError::config("sigma_eps must be finite and non-negative"));
        }
        if self.n_replicates == 0 {
            return Err(SimbaError::config("scenario needs at least one replicate"));
        }
        Ok(())
    }

    pub fn replicate_seed(&self, replicate: usize) -> u64 {
        derive_seed(self.seed, replicate as u64)
    }
}

#[derive(Debug, Clone)]
pub struct SimDataset {
    pub data: Dataset,
    pub truth: Vec<DVector<f64>>,
}

/// y_i = Σ_j x_ij β_j + η_i + ε_i with x_i1 ~ N(0,1), η_i(v) ~ N(0,1) i.i.d.
/// and zero intercept surface.
pub fn simulate_dataset(
    domain: &SpatialDomain,
    truth: &[DVector<f64>],
    scenario: &SimScenario,
    replicate: usize,
    noise_basis: Option<&BasisSystem>,
) -> Result<SimDataset> {
    scenario.validate()?;
    let v = domain.n_voxels();
    if truth.is_empty() || truth.iter().any(|b| b.len() != v) {
        return Err(SimbaError::data("truth maps do not match the domain"));
    }
    let mut rng = stream_rng(scenario.replicate_seed(replicate), stream::SIMULATE);
    let (n, p) = (scenario.n, truth.len());
    let x = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { std_normal(&mut rng) });
    let b = DMatrix::from_fn(p, v, |j, k| truth[j][k]);
    let mut y = &x * &b;
    for e in y.iter_mut() {
        *e += std_normal(&mut rng);
    }
    match scenario.noise {
        NoiseModel::Iid => {
            for e in y.iter_mut() {
                *e += scenario.sigma_eps * std_normal(&mut rng);
            }
        }
        NoiseModel::Spatial => {
            let basis = noise_basis.ok_or_else(|| SimbaError::config("spatial noise needs a basis"))?;
            let z = DMatrix::from_fn(n, basis.l(), |_, _| scenario.sigma_eps * std_normal(&mut rng));
            y += z * basis.psi_sqrt_lambda().transpose();
        }
    }
    let names = (0..p).map(|j| if j == 0 { "intercept".to_string() } else { format!("x{j}") }).collect();
    Ok(SimDataset {
        data: Dataset::with_names(y, x, domain.clone(), names)?,
        truth: truth.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// Percent: 100 × mean squared error over voxels and maps.
    pub mse: f64,
    pub tpr: f64,
    pub fdr: f64,
    pub coverage: f64,
}

/// Scores maps against the truth, pooling all maps; rates in percent.
pub fn evaluate_replicate(truth: &[DVector<f64>], maps: &[EffectMap], threshold: f64) -> Result<Metrics> {
    if truth.len() != maps.len() {
        return Err(SimbaError::data(format!("{} truth maps but {} estimates", truth.len(), maps.len())));
    }
    let (mut sq, mut count, mut pos, mut tp, mut det, mut fp, mut cov) = (0.0, 0usize, 0usize, 0usize, 0usize, 0usize, 0usize);
    for (b, m) in truth.iter().zip(maps) {
        if b.len() != m.mean.len() {
            return Err(SimbaError::data("truth and estimate differ in voxel count"));
        }
        for v in 0..b.len() {
            sq += (m.mean[v] - b[v]).powi(2);
            count += 1;
            let active = m.e_s[v].abs() > threshold;
            let nonzero = b[v] != 0.0;
            pos += nonzero as usize;
            det += active as usize;
            tp += (active && nonzero) as usize;
            fp += (active && !nonzero) as usize;
            cov += (m.lower[v] <= b[v] && b[v] <= m.upper[v]) as usize;
        }
    }
    Ok(Metrics {
        mse: 100.0 * sq / count as f64,
        tpr: if pos == 0 { 0.0 } else { 100.0 * tp as f64 / pos as f64 },
        fdr: 100.0 * fp as f64 / det.max(1) as f64,
        coverage: 100.0 * cov as f64 / count as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    SimbaGibbs,
    SimbaVi,
    Glm,
    Bml,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::SimbaGibbs, Method::SimbaVi, Method::Bml, Method::Glm];

    pub fn is_simba(self) -> bool {
        matches!(self, Method::SimbaGibbs | Method::SimbaVi)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::SimbaGibbs => "simba-gibbs",
            Method::SimbaVi => "simba-vi",
            Method::Glm => "glm",
            Method::Bml => "bml",
        })
    }
}

impl FromStr for Method {
    type Err = SimbaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simba-gibbs" => Ok(Method::SimbaGibbs),
            "simba-vi" => Ok(Method::SimbaVi),
            "glm" => Ok(Method::Glm),
            "bml" => Ok(Method::Bml),
            _ => Err(SimbaError::config(format!(
                "unknown method '{s}' (expected simba-gibbs, simba-vi, glm or bml)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudySettings {
    pub kernel: KernelConfig,
    pub strategy: InducingStrategy,
    pub basis_seed: u64,
    /// Basis size; chosen per scenario by LOOCV when absent.
    pub fixed_l: Option<usize>,
    pub l_max: usize,
    pub loocv: LoocvConfig,
    pub prior: PriorConfig,
    pub gibbs: GibbsConfig,
    pub vi: VIConfig,
    pub bml: GibbsConfig,
    pub level: f64,
    pub threshold: f64,
    pub truth: TruthConfig,
}

impl Default for StudySettings {
    fn default() -> Self {
        StudySettings {
            kernel: KernelConfig::matern(0.5, 0.3),
            strategy: InducingStrategy::FarthestPoint,
            basis_seed: 0,
            fixed_l: None,
            l_max: 300,
            loocv: LoocvConfig::default(),
            prior: PriorConfig::default(),
            gibbs: GibbsConfig { parallel: false, ..Default::default() },
            vi: VIConfig { max_iter: 3000, tol: 1e-6, ..Default::default() },
            bml: GibbsConfig { n_iter: 2000, n_burnin: 1000, n_chains: 1, parallel: false, ..Default::default() },
            level: 0.95,
            threshold: DEFAULT_THRESHOLD,
            truth: TruthConfig::default(),
        }
    }
}

/// Fits one method and returns one effect map per covariate.
pub fn fit_maps(method: Method, data: &Dataset, basis: Option<&BasisSystem>, cfg: &StudySettings, seed: u64) -> Result<Vec<EffectMap>> {
    let need_basis = || basis.ok_or_else(|| SimbaError::config(format!("{method} needs a basis")));
    match method {
        Method::SimbaGibbs => {
            let basis = need_basis()?;
            let t = transform_dataset(data, basis)?;
            let g = GibbsConfig { seed, ..cfg.gibbs.clone() };
            let chains = run_gibbs(&t, &cfg.prior, basis, &g)?;
            summarize_gibbs(&pooled_draws(&chains), basis, cfg.level, cfg.threshold)
        }
        Method::SimbaVi => {
            let basis = need_basis()?;
            let t = transform_dataset(data, basis)?;
            let v = VIConfig { seed, ..cfg.vi.clone() };
            let r = run_vi(&t, &cfg.prior, basis, &v)?;
            summarize_vi(&r.state, basis, cfg.level, cfg.threshold)
        }
        Method::Glm => Ok(glm_fit(data)?.effect_maps(cfg.threshold)),
        Method::Bml => {
            let b = GibbsConfig { seed, ..cfg.bml.clone() };
            let opts = BmlOptions { fixed_tau2: None, threshold: Some(cfg.threshold) };
            Ok(bml_fit_with(data, &b, &cfg.prior, &opts)?.maps)
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReplicateRecord {
    pub scenario: usize,
    pub replicate: usize,
    pub method: Method,
    pub result: std::result::Result<Metrics, String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanSd { mean: f64::NAN, sd: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        MeanSd { mean, sd }
    }
}

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub scenario: String,
    pub method: Method,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mse: MeanSd,
    pub tpr: MeanSd,
    pub fdr: MeanSd,
    pub coverage: MeanSd,
}

#[derive(Debug, Clone, Default)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn from_records(scenarios: &[SimScenario], methods: &[Method], records: &[ReplicateRecord]) -> Self {
        let mut rows = Vec::new();
        for (s, sc) in scenarios.iter().enumerate() {
            for &m in methods {
                let ok: Vec<Metrics> = records
                    .iter()
                    .filter(|r| r.scenario == s && r.method == m)
                    .filter_map(|r| r.result.as_ref().ok().copied())
                    .collect();
                let failed = records
                    .iter()
                    .filter(|r| r.scenario == s && r.method == m && r.result.is_err())
                    .count();
                let col = |f: fn(&Metrics) -> f64| MeanSd::of(&ok.iter().map(f).collect::<Vec<_>>());
                rows.push(MetricsRow {
                    scenario: sc.label(),
                    method: m,
                    n_ok: ok.len(),
                    n_failed: failed,
                    mse: col(|x| x.mse),
                    tpr: col(|x| x.tpr),
                    fdr: col(|x| x.fdr),
                    coverage: col(|x| x.coverage),
                });
            }
        }
        MetricsTable { rows }
    }

    pub fn get(&self, scenario: &str, method: Method) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.scenario == scenario && r.method == method)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| SimbaError::numerical(format!("csv encoding failed: {e}"));
        w.write_record([
            "scenario", "method", "n_ok", "n_failed", "mse_mean", "mse_sd", "tpr_mean", "tpr_sd", "fdr_mean", "fdr_sd",
            "coverage_mean", "coverage_sd",
        ])
        .map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.scenario.clone(), r.method.to_string(), r.n_ok.to_string(), r.n_failed.to_string()];
            for m in [r.mse, r.tpr, r.fdr, r.coverage] {
                rec.push(format!("{:.6}", m.mean));
                rec.push(format!("{:.6}", m.sd));
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| SimbaError::numerical(format!("csv encoding failed: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Fixed-width table, one block per scenario, values as mean (sd).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut last = None;
        for r in &self.rows {
            if last != Some(&r.scenario) {
                let _ = writeln!(s, "\n{}", r.scenario);
                let _ = writeln!(s, "{:<12} {:>14} {:>14} {:>14} {:>14}", "method", "MSE(%)", "TPR(%)", "FDR(%)", "coverage(%)");
                last = Some(&r.scenario);
            }
            let f = |m: MeanSd| format!("{:.2} ({:.2})", m.mean, m.sd);
            let _ = writeln!(
                s,
                "{:<12} {:>14} {:>14} {:>14} {:>14}",
                r.method.to_string(),
                f(r.mse),
                f(r.tpr),
                f(r.fdr),
                f(r.coverage)
            );
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct StudyOutput {
    pub table: MetricsTable,
    pub records: Vec<ReplicateRecord>,
    /// Basis size used per scenario (None when no SIMBA method ran).
    pub chosen_l: Vec<Option<usize>>,
    /// (L, PMSE) curves from per-scenario selection.
    pub selection_curves: Vec<Vec<(usize, f64)>>,
}

impl StudyOutput {
    pub fn records_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| SimbaError::numerical(format!("csv encoding failed: {e}"));
        w.write_record(["scenario", "replicate", "method", "mse", "tpr", "fdr", "coverage", "seconds", "error"])
            .map_err(csv_err)?;
        for r in &self.records {
            let (vals, err) = match &r.result {
                Ok(m) => ([m.mse, m.tpr, m.fdr, m.coverage].map(|x| format!("{x:.6}")), String::new()),
                Err(e) => (std::array::from_fn(|_| String::new()), e.clone()),
            };
            let mut rec = vec![r.scenario.to_string(), r.replicate.to_string(), r.method.to_string()];
            rec.extend(vals);
            rec.push(format!("{:.3}", r.seconds));
            rec.push(err);
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| SimbaError::numerical(format!("csv encoding failed: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Replicates × methods for every scenario. Per-replicate failures are
/// recorded and do not stop the study.
pub fn run_study(domain: &SpatialDomain, scenarios: &[SimScenario], methods: &[Method], cfg: &StudySettings) -> Result<StudyOutput> {
    let truth = make_truth(domain, &cfg.truth)?;
    let mut records = Vec::new();
    let mut chosen_l = Vec::with_capacity(scenarios.len());
    let mut curves = Vec::with_capacity(scenarios.len());
    for (s, sc) in scenarios.iter().enumerate() {
        sc.validate()?;
        let (basis, l, curve) = if methods.iter().any(|m| m.is_simba()) {
            let (l, curve) = match cfg.fixed_l {
                Some(l) => (l, Vec::new()),
                None => {
                    let first = simulate_dataset(domain, &truth, sc, 0, None)?;
                    let sel = SelectConfig {
                        kernel: cfg.kernel.clone(),
                        l_max: cfg.l_max,
                        strategy: cfg.strategy,
                        seed: cfg.basis_seed,
                        prior: cfg.prior,
                        loocv: cfg.loocv.clone(),
                        ..Default::default()
                    };
                    let r = select_num_basis(&first.data, domain, &sel)?;
                    (r.chosen, r.curve)
                }
            };
            info!("{}: L = {l}", sc.label());
            let b = build_basis_system(domain, &cfg.kernel, l, default_l_eta(l), cfg.strategy, cfg.basis_seed)?;
            (Some(b), Some(l), curve)
        } else {
            (None, None, Vec::new())
        };
        chosen_l.push(l);
        curves.push(curve);
        let rep: Vec<Vec<ReplicateRecord>> = (0..sc.n_replicates)
            .into_par_iter()
            .map(|r| {
                let sim = simulate_dataset(domain, &truth, sc, r, basis.as_ref());
                methods
                    .iter()
                    .enumerate()
                    .map(|(k, &m)| {
                        let start = Instant::now();
                        let seed = derive_seed(sc.replicate_seed(r), 100 + k as u64);
                        let result = sim
                            .as_ref()
                            .map_err(|e| SimbaError::data(e.to_string()))
                            .and_then(|d| {
                                let maps = fit_maps(m, &d.data, basis.as_ref(), cfg, seed)?;
                                evaluate_replicate(&d.truth, &maps, cfg.threshold)
                            })
                            .map_err(|e| {
                                warn!("{} replicate {r} {m}: {e}", sc.label());
                                e.to_string()
                            });
                        ReplicateRecord { scenario: s, replicate: r, method: m, result, seconds: start.elapsed().as_secs_f64() }
                    })
                    .collect()
            })
            .collect();
        records.extend(rep.into_iter().flatten());
    }
    let table = MetricsTable::from_records(scenarios, methods, &records);
    Ok(StudyOutput { table, records, chosen_l, selection_curves: curves })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn setup() -> (SpatialDomain, Vec<DVector<f64>>) {
        let d = phantom_domain().unwrap();
        let t = make_truth(&d, &TruthConfig::default()).unwrap();
        (d, t)
    }

    fn exact_map(b: &DVector<f64>, j: usize) -> EffectMap {
        EffectMap {
            covariate: j,
            mean: b.clone(),
            lower: b.clone(),
            upper: b.clone(),
            p_plus: b.map(|x| if x > 0.0 { 1.0 } else if x < 0.0 { 0.0 } else { 0.5 }),
            e_s: b.map(|x| x.signum() * (x != 0.0) as u8 as f64),
            active: b.iter().map(|x| *x != 0.0).collect(),
            threshold: 0.95,
        }
    }

    #[test]
    fn phantom_size_and_holes() {
        let m = phantom_mask(48, 56);
        let v = m.iter().filter(|b| **b).count();
        assert!((1000..=5000).contains(&v), "{v}");
        // center row between the holes is in the mask, hole centers are not
        let idx = |r: usize, c: usize| r * 56 + c;
        assert!(m[idx(22, 28)]);
        assert!(!m[idx(21, 32)] && !m[idx(22, 33)] && !m[idx(21, 23)]);
        assert!(!m[idx(0, 0)]);
    }

    #[test]
    fn truth_sparse_peaks_and_scaled() {
        let (d, t) = setup();
        assert_eq!(t.len(), 2);
        for (j, b) in t.iter().enumerate() {
            let nz: Vec<f64> = b.iter().filter(|x| **x != 0.0).cloned().collect();
            assert!(nz.len() > 50 && nz.len() < b.len() / 2);
            let ms = nz.iter().map(|x| x * x).sum::<f64>() / nz.len() as f64;
            assert!((ms - 1.2).abs() < 1e-12);
            // the largest magnitude sits at the voxel nearest a region center
            let cfg = TruthConfig::default();
            let imax = b.iamax();
            let p = [d.coords[(imax, 0)], d.coords[(imax, 1)]];
            let near = cfg.maps[j].iter().any(|r| ((p[0] - r.center[0]).powi(2) + (p[1] - r.center[1]).powi(2)).sqrt() < 0.05);
            assert!(near, "map {j} peak at {p:?}");
        }
        // both signs present in each map
        assert!(t.iter().all(|b| b.max() > 0.0 && b.min() < 0.0));
    }

    #[test]
    fn snr_calibration() {
        let (_, t) = setup();
        assert!((signal_to_noise(&t, 2.0) - 0.3).abs() < 0.03);
        assert!((signal_to_noise(&t, 5.0) - 0.05).abs() < 0.005);
    }

    #[test]
    fn truth_errors() {
        let d = phantom_domain().unwrap();
        let outside = TruthConfig { maps: vec![vec![Region::disk([0.02, 0.02], 0.1, 1.0)]], mean_square: 1.0 };
        assert!(make_truth(&d, &outside).is_err());
        let overlap = TruthConfig {
            maps: vec![vec![Region::disk([0.4, 0.5], 0.2, 1.0), Region::disk([0.45, 0.5], 0.2, -1.0)]],
            mean_square: 1.0,
        };
        assert!(make_truth(&d, &overlap).is_err());
        let tiny = TruthConfig { maps: vec![vec![Region::disk([0.4, 0.5], 0.01, 1.0)]], mean_square: 1.0 };
        assert!(make_truth(&d, &tiny).is_err());
    }

    #[test]
    fn simulation_deterministic_and_noiseless_structure() {
        let (d, t) = setup();
        let sc = SimScenario::new(20, 0.0, 1, 5);
        let a = simulate_dataset(&d, &t, &sc, 3, None).unwrap();
        let b = simulate_dataset(&d, &t, &sc, 3, None).unwrap();
        assert_eq!(a.data.y, b.data.y);
        let c = simulate_dataset(&d, &t, &sc, 4, None).unwrap();
        assert_ne!(a.data.y, c.data.y);
        // σ_ε = 0: y − Xβ is the η field alone, i.i.d. N(0, 1)
        let bm = DMatrix::from_fn(2, d.n_voxels(), |j, k| t[j][k]);
        let eta = &a.data.y - &a.data.x * bm;
        let var = eta.norm_squared() / eta.len() as f64;
        assert!((var - 1.0).abs() < 0.05, "{var}");
        assert!(a.data.x.column(0).iter().all(|x| *x == 1.0));
    }

    #[test]
    fn noise_variance_moment() {
        let (d, t) = setup();
        let sc = SimScenario::new(200, 2.0, 1, 6);
        let s = simulate_dataset(&d, &t, &sc, 0, None).unwrap();
        let bm = DMatrix::from_fn(2, d.n_voxels(), |j, k| t[j][k]);
        let r = &s.data.y - &s.data.x * bm;
        // η and ε are both i.i.d. per voxel: total variance 1 + σ²
        let var = r.norm_squared() / r.len() as f64;
        assert!(((var - 1.0) / 4.0 - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn spatial_noise_requires_basis() {
        let (d, t) = setup();
        let mut sc = SimScenario::new(5, 1.0, 1, 7);
        sc.noise = NoiseModel::Spatial;
        assert!(simulate_dataset(&d, &t, &sc, 0, None).is_err());
        let b = build_basis_system(&d, &KernelConfig::matern(0.5, 0.3), 20, 2, InducingStrategy::FarthestPoint, 0).unwrap();
        assert!(simulate_dataset(&d, &t, &sc, 0, Some(&b)).is_ok());
    }

    #[test]
    fn exact_estimate_scores_perfectly() {
        let (_, t) = setup();
        let maps: Vec<EffectMap> = t.iter().enumerate().map(|(j, b)| exact_map(b, j)).collect();
        let m = evaluate_replicate(&t, &maps, 0.95).unwrap();
        assert_eq!(m, Metrics { mse: 0.0, tpr: 100.0, fdr: 0.0, coverage: 100.0 });
    }

    #[test]
    fn hand_counted_metrics() {
        // truth [1, 0, -1, 0]; detections at voxels 0 and 1; voxel 2 missed
        let truth = vec![DVector::from_vec(vec![1.0, 0.0, -1.0, 0.0])];
        let mean = DVector::from_vec(vec![0.8, 0.3, -0.5, 0.0]);
        let map = EffectMap {
            covariate: 0,
            mean: mean.clone(),
            lower: DVector::from_vec(vec![0.5, 0.1, -0.9, -0.1]),
            upper: DVector::from_vec(vec![1.1, 0.5, -0.1, 0.1]),
            p_plus: DVector::from_vec(vec![0.99, 0.99, 0.1, 0.5]),
            e_s: DVector::from_vec(vec![0.98, 0.98, -0.8, 0.0]),
            active: vec![true, true, false, false],
            threshold: 0.95,
        };
        let m = evaluate_replicate(&truth, &[map.clone()], 0.95).unwrap();
        // squared errors 0.04, 0.09, 0.25, 0 → mean 0.095
        assert!((m.mse - 9.5).abs() < 1e-9);
        assert_eq!(m.tpr, 50.0);
        assert_eq!(m.fdr, 50.0);
        // voxel 1 interval [0.1, 0.5] misses 0, voxel 2 [-0.9,-0.1] misses -1
        assert_eq!(m.coverage, 50.0);
        let quiet = EffectMap { e_s: DVector::zeros(4), ..map };
        let q = evaluate_replicate(&truth, &[quiet], 0.95).unwrap();
        assert_eq!((q.tpr, q.fdr), (0.0, 0.0));
    }

    proptest! {
        #[test]
        fn metrics_permutation_invariant(seed in 0u64..200, rot in 1usize..30) {
            let mut rng = stream_rng(seed, 0);
            let v = 30;
            let t = DVector::from_fn(v, |i, _| if i % 3 == 0 { 0.0 } else { std_normal(&mut rng) });
            let mean = DVector::from_fn(v, |_, _| std_normal(&mut rng));
            let e_s = DVector::from_fn(v, |_, _| 2.0 * std_normal(&mut rng).tanh());
            let lo = &mean - DVector::from_element(v, 0.7);
            let hi = &mean + DVector::from_element(v, 0.7);
            let mk = |t: &DVector<f64>, m: &DVector<f64>, e: &DVector<f64>, l: &DVector<f64>, h: &DVector<f64>| EffectMap {
                covariate: 0, mean: m.clone(), lower: l.clone(), upper: h.clone(),
                p_plus: e.map(|x| 0.5 * (1.0 + x)), e_s: e.clone(), active: vec![false; t.len()], threshold: 0.95,
            };
            let a = evaluate_replicate(&[t.clone()], &[mk(&t, &mean, &e_s, &lo, &hi)], 0.95).unwrap();
            let r = |x: &DVector<f64>| { let mut s = x.as_slice().to_vec(); s.rotate_left(rot); DVector::from_vec(s) };
            let b = evaluate_replicate(&[r(&t)], &[mk(&r(&t), &r(&mean), &r(&e_s), &r(&lo), &r(&hi))], 0.95).unwrap();
            prop_assert!((a.mse - b.mse).abs() < 1e-9);
            prop_assert_eq!((a.tpr, a.fdr, a.coverage), (b.tpr, b.fdr, b.coverage));
            for x in [a.tpr, a.fdr, a.coverage] {
                prop_assert!((0.0..=100.0).contains(&x));
            }
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("lasso".parse::<Method>().is_err());
    }

    #[test]
    fn small_study_runs_and_tabulates() {
        let (d, _) = setup();
        let cfg = StudySettings {
            fixed_l: Some(30),
            gibbs: GibbsConfig { n_iter: 300, n_burnin: 150, n_chains: 2, parallel: false, ..Default::default() },
            vi: VIConfig { max_iter: 300, ..Default::default() },
            bml: GibbsConfig { n_iter: 300, n_burnin: 150, n_chains: 1, parallel: false, ..Default::default() },
            ..Default::default()
        };
        let sc = vec![SimScenario::new(12, 2.0, 2, 1)];
        let out = run_study(&d, &sc, &Method::ALL, &cfg).unwrap();
        assert_eq!(out.records.len(), 8);
        assert!(out.records.iter().all(|r| r.result.is_ok()));
        assert_eq!(out.table.rows.len(), 4);
        assert_eq!(out.chosen_l, vec![Some(30)]);
        let csv = out.table.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(out.table.to_text().contains("simba-gibbs"));
        let again = run_study(&d, &sc, &Method::ALL, &cfg).unwrap();
        assert_eq!(again.table.to_csv().unwrap(), csv);
        assert_eq!(out.records_csv().unwrap().lines().count(), 9);
    }
}
