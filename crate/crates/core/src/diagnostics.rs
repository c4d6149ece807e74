//! Convergence, predictive checks, leave-one-out error and basis-size selection.

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::baselines::glm::{glm_fit, glm_predict};
use crate::error::{Result, SimbaError};
use crate::gibbs::{run_gibbs, sample_inv_gamma, GibbsConfig};
use crate::kernel::{
    build_basis_system, default_l_eta, nystrom_decompose, select_inducing, BasisSystem, InducingStrategy,
    KernelConfig, SpatialDomain,
};
use crate::model::{transform_dataset, Dataset, ParameterState, PriorConfig, TransformedDataset};
use crate::rng::{std_normal, stream, stream_rng, SimRng};
use crate::vi::{run_vi, run_vi_from, VIConfig, VariationalState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RHat {
    pub r_hat: f64,
    /// Set when the pooled within-chain variance is zero.
    pub degenerate: bool,
}

/// Split-chain potential scale reduction factor.
pub fn gelman_rubin(traces: &[Vec<f64>]) -> Result<RHat> {
    if traces.len() < 2 {
        return Err(SimbaError::config("R-hat needs at least two chains"));
    }
    let len = traces[0].len();
    if len < 10 || traces.iter().any(|t| t.len() != len) {
        return Err(SimbaError::config("R-hat needs equal-length chains of at least 10 values"));
    }
    let half = len / 2;
    // drop the middle value of odd-length chains
    let halves: Vec<&[f64]> = traces
        .iter()
        .flat_map(|t| [&t[..half], &t[len - half..]])
        .collect();
    let m = halves.len() as f64;
    let n = half as f64;
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    if !(w > 0.0) {
        return Ok(RHat { r_hat: 1.0, degenerate: true });
    }
    let var_plus = w * (n - 1.0) / n + b / n;
    Ok(RHat { r_hat: (var_plus / w).sqrt(), degenerate: false })
}

pub const PPC_BINS: usize = 512;

#[derive(Debug, Clone)]
pub struct PpcResult {
    /// Bin edges, length PPC_BINS + 1.
    pub edges: Vec<f64>,
    pub observed: Vec<f64>,
    pub replicated: Vec<Vec<f64>>,
}

impl PpcResult {
    pub fn bin_width(&self) -> f64 {
        self.edges[1] - self.edges[0]
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// Fraction of bins where the observed density lies inside the pointwise
    /// min/max envelope of the replicates.
    pub fn envelope_coverage(&self) -> f64 {
        if self.replicated.is_empty() {
            return 0.0;
        }
        let inside = (0..self.observed.len())
            .filter(|&b| {
                let (lo, hi) = self
                    .replicated
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[b]), hi.max(r[b])));
                lo <= self.observed[b] && self.observed[b] <= hi
            })
            .count();
        inside as f64 / self.observed.len() as f64
    }
}

/// Where replicated data come from.
pub enum PpcSource<'a> {
    Draws(&'a [&'a ParameterState]),
    Variational(&'a VariationalState),
}

fn histogram(values: impl Iterator<Item = f64>, lo: f64, width: f64, total: usize) -> Vec<f64> {
    let mut h = vec![0.0; PPC_BINS];
    for x in values {
        let b = ((x - lo) / width).floor();
        if b >= 0.0 && (b as usize) < PPC_BINS {
            h[b as usize] += 1.0;
        }
    }
    let norm = 1.0 / (total as f64 * width);
    h.iter_mut().for_each(|c| *c *= norm);
    h
}

/// Posterior predictive densities of all voxel values pooled over participants.
///
/// Participant effects are redrawn from their prior unless the source carries
/// them for every participant. Noise is ΨΛ^{1/2}z·σ_ε.
pub fn ppc_draw(source: PpcSource<'_>, basis: &BasisSystem, data: &Dataset, n_rep: usize, seed: u64) -> Result<PpcResult> {
    if data.n_voxels() != basis.n_voxels() {
        return Err(SimbaError::data("PPC needs voxel-space responses matching the basis"));
    }
    let (lo_obs, hi_obs) = data
        .y
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let pad = 0.1 * (hi_obs - lo_obs).max(1e-12);
    let (lo, hi) = (lo_obs - pad, hi_obs + pad);
    let width = (hi - lo) / PPC_BINS as f64;
    let edges: Vec<f64> = (0..=PPC_BINS).map(|b| lo + b as f64 * width).collect();
    let total = data.y.len();
    let observed = histogram(data.y.iter().copied(), lo, width, total);

    let mut rng = stream_rng(seed, stream::PPC);
    let psl = basis.psi_sqrt_lambda();
    let pesl = basis.psi_eta_sqrt_lambda();
    let (n, le, l) = (data.n(), basis.l_eta(), basis.l());
    let mut replicated = Vec::with_capacity(n_rep);
    for r in 0..n_rep {
        let state = match &source {
            PpcSource::Draws(d) => {
                if d.is_empty() {
                    return Err(SimbaError::data("PPC needs at least one posterior draw"));
                }
                let k = if n_rep > 1 { r * (d.len() - 1) / (n_rep - 1) } else { d.len() - 1 };
                d[k].clone()
            }
            PpcSource::Variational(q) => sample_variational(q, &mut rng),
        };
        let theta_eta = if state.theta_eta.nrows() == n {
            state.theta_eta.clone()
        } else {
            let s = state.sigma2_eta.sqrt();
            DMatrix::from_fn(n, le, |_, _| s * std_normal(&mut rng))
        };
        let se = state.sigma2_eps.sqrt();
        let noise = DMatrix::from_fn(n, l, |_, _| se * std_normal(&mut rng));
        let a = &data.x * state.alpha_effective();
        let coef = &data.x * &state.theta_beta + noise;
        let mut yrep = &coef * psl.transpose() + &theta_eta * pesl.transpose();
        for (i, mut row) in yrep.row_iter_mut().enumerate() {
            row.add_scalar_mut(a[i]);
        }
        replicated.push(histogram(yrep.iter().copied(), lo, width, total));
    }
    Ok(PpcResult { edges, observed, replicated })
}

fn sample_variational(q: &VariationalState, rng: &mut SimRng) -> ParameterState {
    let (p, l) = q.beta_mean.shape();
    let mut s = q.mean_state();
    for j in 0..p {
        s.alpha[j] += q.alpha_var[j].sqrt() * std_normal(rng);
        let sd = q.beta_var[j].sqrt();
        for c in 0..l {
            s.theta_beta[(j, c)] += sd * std_normal(rng);
        }
    }
    s.sigma2_eps = sample_inv_gamma(rng, q.q_sigma2_eps.shape, q.q_sigma2_eps.rate);
    s.sigma2_eta = sample_inv_gamma(rng, q.q_sigma2_eta.shape, q.q_sigma2_eta.rate);
    s.theta_eta = DMatrix::zeros(0, q.eta_mean.ncols());
    s
}

/// Population-level fit used for prediction: ŷ_i = x_iᵀα·1 + ΨΛ^{1/2}θ_βᵀx_i.
#[derive(Debug, Clone)]
pub struct PopulationFit {
    /// α − shift.
    pub alpha_eff: DVector<f64>,
    pub theta_beta: DMatrix<f64>,
}

impl PopulationFit {
    pub fn from_state(s: &ParameterState) -> Self {
        PopulationFit { alpha_eff: s.alpha_effective(), theta_beta: s.theta_beta.clone() }
    }

    pub fn from_vi(q: &VariationalState) -> Self {
        PopulationFit { alpha_eff: &q.alpha_mean - &q.beta_shift, theta_beta: q.beta_mean.clone() }
    }

    pub fn posterior_mean(draws: &[&ParameterState]) -> Self {
        let d = draws.len().max(1) as f64;
        let (p, l) = draws[0].theta_beta.shape();
        let mut a = DVector::zeros(p);
        let mut t = DMatrix::zeros(p, l);
        for s in draws {
            a += s.alpha_effective();
            t += &s.theta_beta;
        }
        PopulationFit { alpha_eff: a / d, theta_beta: t / d }
    }

    /// Σ_v (y_i(v) − ŷ_i(v))² for participant i, computed in the projected
    /// space; exact because Ψ has orthonormal columns.
    pub fn sq_error(&self, t: &TransformedDataset, basis: &BasisSystem, i: usize) -> f64 {
        let x = t.x.row(i).transpose();
        let a = x.dot(&self.alpha_eff);
        let b = self.theta_beta.tr_mul(&x);
        let v = t.n_voxels as f64;
        let mut cross_y = 0.0;
        let mut cross_one = 0.0;
        let mut quad = 0.0;
        for c in 0..b.len() {
            let lb = basis.lambda[c] * b[c];
            cross_y += t.y_tilde[(i, c)] * lb;
            cross_one += basis.ones_phi[c] * lb;
            quad += lb * b[c];
        }
        let e = t.row_sqnorm[i] - 2.0 * a * t.row_sum[i] - 2.0 * cross_y + a * a * v + 2.0 * a * cross_one + quad;
        e.max(0.0)
    }

    pub fn pmse(&self, t: &TransformedDataset, basis: &BasisSystem) -> f64 {
        let total: f64 = (0..t.n()).map(|i| self.sq_error(t, basis, i)).sum();
        total / (t.n() * t.n_voxels) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoocvInference {
    Vi,
    /// One short Gibbs chain per fold.
    GibbsShort,
}

impl std::str::FromStr for LoocvInference {
    type Err = SimbaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vi" => Ok(LoocvInference::Vi),
            "gibbs_short" | "gibbs-short" => Ok(LoocvInference::GibbsShort),
            _ => Err(SimbaError::config(format!("unknown LOOCV inference '{s}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoocvConfig {
    pub inference: LoocvInference,
    /// Fit on all participants (warm start source).
    pub full_vi: VIConfig,
    /// Per-fold refinement.
    pub fold_vi: VIConfig,
    /// Start folds from the full-data fit instead of a fresh initialization.
    pub warm_start: bool,
    pub gibbs_iters: usize,
    pub seed: u64,
}

impl Default for LoocvConfig {
    fn default() -> Self {
        LoocvConfig {
            inference: LoocvInference::Vi,
            full_vi: VIConfig { max_iter: 3000, tol: 1e-5, ..Default::default() },
            fold_vi: VIConfig { max_iter: 300, tol: 1e-4, ..Default::default() },
            warm_start: true,
            gibbs_iters: 500,
            seed: 0,
        }
    }
}

/// Leave-one-participant-out predictive MSE with population terms only.
pub fn loocv_pmse(data: &Dataset, basis: &BasisSystem, prior: &PriorConfig, cfg: &LoocvConfig) -> Result<f64> {
    if data.n() < 3 {
        return Err(SimbaError::data("LOOCV needs at least three participants"));
    }
    let t = transform_dataset(data, basis)?;
    let full = match cfg.inference {
        LoocvInference::Vi if cfg.warm_start => {
            let c = VIConfig { seed: cfg.seed, ..cfg.full_vi.clone() };
            Some(run_vi(&t, prior, basis, &c)?.state)
        }
        _ => None,
    };
    let fold = |i: usize| -> Result<f64> {
        let train = t.without_row(i);
        let fit = match cfg.inference {
            LoocvInference::Vi => {
                let c = VIConfig { seed: cfg.seed, ..cfg.fold_vi.clone() };
                let q = match &full {
                    Some(q) => run_vi_from(&train, prior, basis, &c, q.without_participant(i))?,
                    None => run_vi(&train, prior, basis, &c)?,
                };
                PopulationFit::from_vi(&q.state)
            }
            LoocvInference::GibbsShort => {
                let g = GibbsConfig {
                    n_iter: cfg.gibbs_iters,
                    n_burnin: cfg.gibbs_iters / 2,
                    n_chains: 1,
                    seed: cfg.seed,
                    parallel: false,
                    ..Default::default()
                };
                let chains = run_gibbs(&train, prior, basis, &g)?;
                let draws: Vec<&ParameterState> = chains[0].draws.iter().collect();
                PopulationFit::posterior_mean(&draws)
            }
        };
        Ok(fit.sq_error(&t, basis, i))
    };
    let errs: Vec<Result<f64>> = (0..t.n()).into_par_iter().map(fold).collect();
    let total: f64 = errs.into_iter().sum::<Result<f64>>()?;
    Ok(total / (t.n() * t.n_voxels) as f64)
}

#[derive(Debug, Clone)]
pub struct SelectConfig {
    pub kernel: KernelConfig,
    pub l_max: usize,
    pub strategy: InducingStrategy,
    pub seed: u64,
    pub prior: PriorConfig,
    pub loocv: LoocvConfig,
    pub lower_frac: f64,
    pub upper_frac: f64,
    pub max_grid: usize,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig {
            kernel: KernelConfig::default(),
            l_max: 300,
            strategy: InducingStrategy::FarthestPoint,
            seed: 0,
            prior: PriorConfig::default(),
            loocv: LoocvConfig::default(),
            lower_frac: 0.80,
            upper_frac: 0.98,
            max_grid: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BasisSelection {
    pub chosen: usize,
    /// (L, PMSE) over the evaluated grid.
    pub curve: Vec<(usize, f64)>,
    /// Eigenvalues of the L_max decomposition.
    pub eigenvalues: DVector<f64>,
    pub candidate_range: (usize, usize),
}

/// Smallest and largest L whose cumulative eigenvalue fraction lies in
/// [lower, upper].
pub fn candidate_range(eigenvalues: &DVector<f64>, lower: f64, upper: f64) -> Option<(usize, usize)> {
    let total: f64 = eigenvalues.sum();
    let mut cum = 0.0;
    let mut range: Option<(usize, usize)> = None;
    for (k, lam) in eigenvalues.iter().enumerate() {
        cum += lam;
        let f = cum / total;
        if f >= lower - 1e-12 && f <= upper + 1e-12 {
            range = Some(match range {
                None => (k + 1, k + 1),
                Some((a, _)) => (a, k + 1),
            });
        }
    }
    range
}

/// Up to `max` evenly spaced integers covering [a, b] including both ends.
pub fn subsample_grid(a: usize, b: usize, max: usize) -> Vec<usize> {
    let count = b - a + 1;
    if count <= max {
        return (a..=b).collect();
    }
    let mut g: Vec<usize> = (0..max)
        .map(|k| a + ((k as f64) * (b - a) as f64 / (max - 1) as f64).round() as usize)
        .collect();
    g.dedup();
    g
}

pub fn select_num_basis(data: &Dataset, domain: &SpatialDomain, cfg: &SelectConfig) -> Result<BasisSelection> {
    if cfg.l_max == 0 || cfg.l_max > domain.n_voxels() {
        return Err(SimbaError::config(format!(
            "L_max must lie in [1, V={}], got {}",
            domain.n_voxels(),
            cfg.l_max
        )));
    }
    let ind = select_inducing(domain, cfg.l_max, cfg.strategy, cfg.seed)?;
    let eig = nystrom_decompose(domain, &ind, &cfg.kernel, cfg.l_max)?.lambda;
    let (a, b) = candidate_range(&eig, cfg.lower_frac, cfg.upper_frac).ok_or_else(|| {
        SimbaError::config("no basis size explains 80-98% of the kernel variance; increase L_max")
    })?;
    let grid = subsample_grid(a, b, cfg.max_grid.max(1));
    info!("basis selection: candidates {a}..={b}, evaluating {grid:?}");
    let mut curve = Vec::with_capacity(grid.len());
    for &l in &grid {
        let basis = build_basis_system(domain, &cfg.kernel, l, default_l_eta(l), cfg.strategy, cfg.seed)?;
        let pmse = loocv_pmse(data, &basis, &cfg.prior, &cfg.loocv)?;
        debug!("L = {l}: PMSE {pmse:.6}");
        curve.push((l, pmse));
    }
    // first minimum wins ties
    let chosen = curve
        .iter()
        .fold(None::<(usize, f64)>, |best, &(l, e)| match best {
            Some((_, be)) if be <= e => best,
            _ => Some((l, e)),
        })
        .map(|(l, _)| l)
        .expect("non-empty grid");
    Ok(BasisSelection { chosen, curve, eigenvalues: eig, candidate_range: (a, b) })
}

#[derive(Debug, Clone)]
pub struct CrossSiteConfig {
    pub kernel: KernelConfig,
    pub l: usize,
    pub strategy: InducingStrategy,
    pub seed: u64,
    pub prior: PriorConfig,
    pub vi: VIConfig,
}

#[derive(Debug, Clone)]
pub struct CrossSiteResult {
    /// Entry (train, test); diagonal entries are in-sample.
    pub simba: DMatrix<f64>,
    pub glm: DMatrix<f64>,
}

fn off_diagonal_means(m: &DMatrix<f64>) -> Vec<f64> {
    let k = m.nrows();
    (0..k)
        .map(|r| (0..k).filter(|&c| c != r).map(|c| m[(r, c)]).sum::<f64>() / (k - 1) as f64)
        .collect()
}

impl CrossSiteResult {
    pub fn simba_out_of_site(&self) -> Vec<f64> {
        off_diagonal_means(&self.simba)
    }

    pub fn glm_out_of_site(&self) -> Vec<f64> {
        off_diagonal_means(&self.glm)
    }
}

/// Fits on each site and predicts every site with population terms.
pub fn cross_site_pmse(sites: &[Dataset], cfg: &CrossSiteConfig) -> Result<CrossSiteResult> {
    if sites.len() < 2 {
        return Err(SimbaError::config("cross-site prediction needs at least two sites"));
    }
    let domain = &sites[0].domain;
    let p = sites[0].n_covariates();
    for (s, d) in sites.iter().enumerate().skip(1) {
        if d.domain.coords != domain.coords {
            return Err(SimbaError::data(format!("site {s} has a different spatial domain")));
        }
        if d.n_covariates() != p {
            return Err(SimbaError::data(format!("site {s} has a different covariate count")));
        }
    }
    let basis = build_basis_system(domain, &cfg.kernel, cfg.l, default_l_eta(cfg.l), cfg.strategy, cfg.seed)?;
    let tsites: Vec<TransformedDataset> = sites.iter().map(|d| transform_dataset(d, &basis)).collect::<Result<_>>()?;
    let k = sites.len();
    let rows: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..k)
        .into_par_iter()
        .map(|train| {
            let q = run_vi(&tsites[train], &cfg.prior, &basis, &cfg.vi)?;
            let fit = PopulationFit::from_vi(&q.state);
            let glm = glm_fit(&sites[train])?;
            let simba_row = tsites.iter().map(|t| fit.pmse(t, &basis)).collect();
            let glm_row = sites
                .iter()
                .map(|d| {
                    let pred = glm_predict(&glm, &d.x);
                    (&d.y - pred).norm_squared() / d.y.len() as f64
                })
                .collect();
            Ok((simba_row, glm_row))
        })
        .collect();
    let mut simba = DMatrix::zeros(k, k);
    let mut glm = DMatrix::zeros(k, k);
    for (r, row) in rows.into_iter().enumerate() {
        let (s, g) = row?;
        for c in 0..k {
            simba[(r, c)] = s[c];
            glm[(r, c)] = g[c];
        }
    }
    Ok(CrossSiteResult { simba, glm })
}
