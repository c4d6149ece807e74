//! Mean-field coordinate-ascent variational inference.
//!
//! Gaussian factors for α_j, θ_βj (isotropic) and θ_ηi (shared covariance),
//! inverse-gamma factors for the variances and their auxiliaries.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use statrs::function::gamma::digamma;

use crate::error::{Result, SimbaError};
use crate::gibbs::cholesky_in_place;
use crate::kernel::BasisSystem;
use crate::model::{ParameterState, PriorConfig, TransformedDataset};
use crate::rng::{stream, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IgFactor {
    pub shape: f64,
    pub rate: f64,
}

impl IgFactor {
    /// E[1/σ²].
    pub fn mean_inv(&self) -> f64 {
        self.shape / self.rate
    }

    /// E[σ²], infinite when shape ≤ 1.
    pub fn mean(&self) -> f64 {
        if self.shape > 1.0 {
            self.rate / (self.shape - 1.0)
        } else {
            f64::INFINITY
        }
    }

    pub fn mean_log(&self) -> f64 {
        self.rate.ln() - digamma(self.shape)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub alpha_mean: DVector<f64>,
    pub alpha_var: DVector<f64>,
    /// (J+1)×L means; each row has covariance beta_var[j]·I_L.
    pub beta_mean: DMatrix<f64>,
    pub beta_var: DVector<f64>,
    /// N×L_η means sharing one L_η×L_η covariance.
    pub eta_mean: DMatrix<f64>,
    pub eta_cov: DMatrix<f64>,
    pub beta_shift: DVector<f64>,
    pub q_sigma2_eps: IgFactor,
    pub q_sigma2_eta: IgFactor,
    pub q_sigma2_beta: IgFactor,
    pub q_sigma2_alpha: IgFactor,
    pub q_a_eps: IgFactor,
    pub q_a_eta: IgFactor,
    pub q_a_beta: IgFactor,
    pub q_a_alpha: IgFactor,
}

impl VariationalState {
    /// Means from the Gibbs initialization scheme, small Gaussian variances,
    /// IG factors at their posterior shapes with E[1/σ²] = 1.
    pub fn init(tdata: &TransformedDataset, basis: &BasisSystem, seed: u64) -> Self {
        let mut rng = stream_rng(seed, stream::VI_INIT);
        let nd = Normal::new(0.0, 0.1).expect("valid normal");
        let (n, p, l, le) = (tdata.n(), tdata.n_covariates(), basis.l(), basis.l_eta());
        let (nf, pf, lf, lef) = (n as f64, p as f64, l as f64, le as f64);
        let ig = |shape: f64| IgFactor { shape, rate: shape };
        let aux = IgFactor { shape: 1.0, rate: 1.0 };
        VariationalState {
            alpha_mean: DVector::from_fn(p, |_, _| nd.sample(&mut rng)),
            alpha_var: DVector::from_element(p, 0.01),
            beta_mean: DMatrix::from_fn(p, l, |_, _| nd.sample(&mut rng)),
            beta_var: DVector::from_element(p, 0.01),
            eta_mean: DMatrix::from_fn(n, le, |_, _| nd.sample(&mut rng)),
            eta_cov: DMatrix::identity(le, le) * 0.01,
            beta_shift: DVector::zeros(p),
            q_sigma2_eps: ig((1.0 + nf * lf) / 2.0),
            q_sigma2_eta: ig((1.0 + nf * lef) / 2.0),
            q_sigma2_beta: ig((1.0 + pf * lf) / 2.0),
            q_sigma2_alpha: ig((1.0 + pf) / 2.0),
            q_a_eps: aux,
            q_a_eta: aux,
            q_a_beta: aux,
            q_a_alpha: aux,
        }
    }

    /// Sets each IG factor so that E[1/σ²] = 1/σ² exactly.
    pub fn pin_variances(&mut self, eps: f64, eta: f64, beta: f64, alpha: f64) {
        for (q, s2) in [
            (&mut self.q_sigma2_eps, eps),
            (&mut self.q_sigma2_eta, eta),
            (&mut self.q_sigma2_beta, beta),
            (&mut self.q_sigma2_alpha, alpha),
        ] {
            q.rate = q.shape * s2;
        }
    }

    pub fn n(&self) -> usize {
        self.eta_mean.nrows()
    }

    /// Point state at the variational means; variances at E[σ²] when finite,
    /// otherwise 1/E[1/σ²].
    pub fn mean_state(&self) -> ParameterState {
        let v = |q: &IgFactor| {
            let m = q.mean();
            if m.is_finite() {
                m
            } else {
                1.0 / q.mean_inv()
            }
        };
        ParameterState {
            alpha: self.alpha_mean.clone(),
            theta_beta: self.beta_mean.clone(),
            theta_eta: self.eta_mean.clone(),
            sigma2_alpha: v(&self.q_sigma2_alpha),
            sigma2_beta: v(&self.q_sigma2_beta),
            sigma2_eta: v(&self.q_sigma2_eta),
            sigma2_eps: v(&self.q_sigma2_eps),
            a_alpha: v(&self.q_a_alpha),
            a_beta: v(&self.q_a_beta),
            a_eta: v(&self.q_a_eta),
            a_eps: v(&self.q_a_eps),
            beta_shift: self.beta_shift.clone(),
        }
    }

    /// Same centering convention as the Gibbs draws, applied to the means.
    pub fn center(&mut self, basis: &BasisSystem) {
        let c = basis.voxel_mean_readout();
        for j in 0..self.alpha_mean.len() {
            let m = self.beta_mean.row(j).transpose().dot(&c) - self.beta_shift[j];
            self.alpha_mean[j] += m;
            self.beta_shift[j] += m;
        }
        let n = self.eta_mean.nrows();
        if n > 0 {
            for mut col in self.eta_mean.column_iter_mut() {
                let mean = col.sum() / n as f64;
                col.add_scalar_mut(-mean);
            }
        }
    }

    /// Drops participant `i` (for leave-one-out warm starts).
    pub fn without_participant(&self, i: usize) -> Self {
        let mut s = self.clone();
        s.eta_mean = s.eta_mean.remove_row(i);
        s
    }

    fn is_valid(&self) -> bool {
        let ig_ok = [
            self.q_sigma2_eps,
            self.q_sigma2_eta,
            self.q_sigma2_beta,
            self.q_sigma2_alpha,
            self.q_a_eps,
            self.q_a_eta,
            self.q_a_beta,
            self.q_a_alpha,
        ]
        .iter()
        .all(|q| q.shape > 0.0 && q.rate > 0.0 && q.rate.is_finite());
        ig_ok
            && self.alpha_var.iter().all(|&v| v > 0.0)
            && self.beta_var.iter().all(|&v| v > 0.0)
            && (0..self.eta_cov.nrows()).all(|i| self.eta_cov[(i, i)] > 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VIConfig {
    pub max_iter: usize,
    /// Threshold on the largest absolute change of any variational mean.
    pub tol: f64,
    pub seed: u64,
    /// Keep the IG factors fixed.
    pub fixed_variances: bool,
}

impl Default for VIConfig {
    fn default() -> Self {
        VIConfig {
            max_iter: 500,
            tol: 1e-6,
            seed: 0,
            fixed_variances: false,
        }
    }
}

impl VIConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(SimbaError::config("VI tolerance must be positive"));
        }
        if self.max_iter == 0 {
            return Err(SimbaError::config("VI max_iter must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct VIResult {
    /// Centered final state.
    pub state: VariationalState,
    /// Largest absolute mean change per sweep.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Residual and constants for CAVI sweeps.
pub struct CaviWorkspace<'a> {
    tdata: &'a TransformedDataset,
    prior: PriorConfig,
    ones_phi: DVector<f64>,
    ones_phi_sq: f64,
    phi_eta: DMatrix<f64>,
    phi_eta_t: DMatrix<f64>,
    g_eta: DMatrix<f64>,
    x_sq: DVector<f64>,
    resid: DMatrix<f64>,
    buf_n: DVector<f64>,
    buf_l: DVector<f64>,
    buf_ne: DMatrix<f64>,
    delta_ne: DMatrix<f64>,
}

impl<'a> CaviWorkspace<'a> {
    pub fn new(tdata: &'a TransformedDataset, basis: &BasisSystem, prior: PriorConfig) -> Result<Self> {
        if basis.l() != tdata.l() {
            return Err(SimbaError::data("basis and transformed data disagree on L"));
        }
        let (n, l, le) = (tdata.n(), tdata.l(), basis.l_eta());
        Ok(CaviWorkspace {
            tdata,
            prior,
            ones_phi: basis.ones_phi.clone(),
            ones_phi_sq: basis.ones_phi.norm_squared(),
            phi_eta: basis.phi_eta.clone(),
            phi_eta_t: basis.phi_eta.transpose(),
            g_eta: &basis.phi_eta * basis.phi_eta.transpose(),
            x_sq: DVector::from_iterator(tdata.n_covariates(), tdata.x.column_iter().map(|c| c.norm_squared())),
            resid: DMatrix::zeros(n, l),
            buf_n: DVector::zeros(n),
            buf_l: DVector::zeros(l),
            buf_ne: DMatrix::zeros(n, le),
            delta_ne: DMatrix::zeros(n, le),
        })
    }

    pub fn refresh(&mut self, q: &VariationalState) {
        let x = &self.tdata.x;
        self.resid.copy_from(&self.tdata.y_tilde);
        self.buf_n.gemv(1.0, x, &q.alpha_mean, 0.0);
        self.resid.ger(-1.0, &self.buf_n, &self.ones_phi, 1.0);
        self.resid.gemm(-1.0, x, &q.beta_mean, 1.0);
        self.resid.gemm(-1.0, &q.eta_mean, &self.phi_eta, 1.0);
    }

    /// One full coordinate-ascent sweep; returns the largest mean change.
    pub fn sweep(&mut self, q: &mut VariationalState, fixed_variances: bool) -> Result<f64> {
        let e_eps = q.q_sigma2_eps.mean_inv();
        let p = q.alpha_mean.len();
        let l = self.resid.ncols();
        let mut max_change = 0.0f64;

        // q(α_j)
        for j in 0..p {
            let prec = self.x_sq[j] * self.ones_phi_sq * e_eps + q.q_sigma2_alpha.mean_inv();
            let var = 1.0 / prec;
            self.buf_n.gemv(1.0, &self.resid, &self.ones_phi, 0.0);
            let xr = self.tdata.x.column(j).dot(&self.buf_n)
                + q.alpha_mean[j] * self.x_sq[j] * self.ones_phi_sq;
            let new = var * e_eps * xr;
            let delta = new - q.alpha_mean[j];
            max_change = max_change.max(delta.abs());
            q.alpha_mean[j] = new;
            q.alpha_var[j] = var;
            let xj = self.tdata.x.column(j);
            self.resid.ger(-delta, &xj, &self.ones_phi, 1.0);
        }

        // q(θ_βj)
        for j in 0..p {
            let var = 1.0 / (self.x_sq[j] * e_eps + q.q_sigma2_beta.mean_inv());
            let xj = self.tdata.x.column(j);
            self.buf_l.gemv_tr(1.0, &self.resid, &xj, 0.0);
            for k in 0..l {
                let new = var * e_eps * (self.buf_l[k] + self.x_sq[j] * q.beta_mean[(j, k)]);
                let d = new - q.beta_mean[(j, k)];
                max_change = max_change.max(d.abs());
                self.buf_l[k] = d;
                q.beta_mean[(j, k)] = new;
            }
            q.beta_var[j] = var;
            self.resid.ger(-1.0, &xj, &self.buf_l, 1.0);
        }

        // q(θ_ηi): shared covariance (Φ_ηΦ_ηᵀE[1/σ²_ε] + E[1/σ²_η] I)^{-1}
        let le = self.g_eta.nrows();
        let mut prec = &self.g_eta * e_eps;
        for i in 0..le {
            prec[(i, i)] += q.q_sigma2_eta.mean_inv();
        }
        if !cholesky_in_place(&mut prec) {
            return Err(SimbaError::numerical("q(θ_η): precision not positive definite"));
        }
        for i in 0..le {
            for k in (i + 1)..le {
                prec[(i, k)] = 0.0;
            }
        }
        let chol = nalgebra::Cholesky::pack_dirty(prec);
        q.eta_cov = chol.inverse();
        self.buf_ne.gemm(e_eps, &self.resid, &self.phi_eta_t, 0.0);
        self.buf_ne.gemm(e_eps, &q.eta_mean, &self.g_eta, 1.0);
        let new_eta = &self.buf_ne * &q.eta_cov;
        self.delta_ne.copy_from(&new_eta);
        self.delta_ne -= &q.eta_mean;
        max_change = max_change.max(self.delta_ne.amax());
        self.resid.gemm(-1.0, &self.delta_ne, &self.phi_eta, 1.0);
        q.eta_mean = new_eta;

        if !fixed_variances {
            self.update_ig(q);
        }
        if !max_change.is_finite() {
            return Err(SimbaError::numerical("non-finite variational mean"));
        }
        if !q.is_valid() {
            return Err(SimbaError::numerical("variational factor lost positivity"));
        }
        Ok(max_change)
    }

    /// E_q‖Ỹ − fitted‖² using second moments of independent factors.
    pub fn expected_rss(&self, q: &VariationalState) -> f64 {
        let l = self.resid.ncols() as f64;
        let n = self.resid.nrows() as f64;
        let mut s = self.resid.norm_squared();
        for j in 0..q.alpha_mean.len() {
            s += self.x_sq[j] * (q.alpha_var[j] * self.ones_phi_sq + l * q.beta_var[j]);
        }
        s + n * q.eta_cov.component_mul(&self.g_eta).sum()
    }

    fn update_ig(&mut self, q: &mut VariationalState) {
        let n = self.resid.nrows() as f64;
        let l = self.resid.ncols() as f64;
        let erss = self.expected_rss(q);
        q.q_sigma2_eps.rate = 0.5 * erss + q.q_a_eps.mean_inv();
        let eta_sq = q.eta_mean.norm_squared() + n * q.eta_cov.trace();
        q.q_sigma2_eta.rate = 0.5 * eta_sq + q.q_a_eta.mean_inv();
        let beta_sq = q.beta_mean.norm_squared() + l * q.beta_var.sum();
        q.q_sigma2_beta.rate = 0.5 * beta_sq + q.q_a_beta.mean_inv();
        let alpha_sq = q.alpha_mean.norm_squared() + q.alpha_var.sum();
        q.q_sigma2_alpha.rate = 0.5 * alpha_sq + q.q_a_alpha.mean_inv();
        let inv_a2 = self.prior.inv_a2();
        q.q_a_eps.rate = inv_a2 + q.q_sigma2_eps.mean_inv();
        q.q_a_eta.rate = inv_a2 + q.q_sigma2_eta.mean_inv();
        q.q_a_beta.rate = inv_a2 + q.q_sigma2_beta.mean_inv();
        q.q_a_alpha.rate = inv_a2 + q.q_sigma2_alpha.mean_inv();
    }

    /// Expected log-likelihood plus Gaussian-factor entropies. This is a
    /// debugging monitor, not the full ELBO (prior terms are omitted).
    pub fn partial_elbo(&self, q: &VariationalState) -> f64 {
        let (n, l) = self.resid.shape();
        let nl = (n * l) as f64;
        let ln2pie = (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        let ell = -0.5 * nl * ((2.0 * std::f64::consts::PI).ln() + q.q_sigma2_eps.mean_log())
            - 0.5 * q.q_sigma2_eps.mean_inv() * self.expected_rss(q);
        let mut ent = 0.0;
        for j in 0..q.alpha_mean.len() {
            ent += 0.5 * (ln2pie + q.alpha_var[j].ln());
            ent += 0.5 * l as f64 * (ln2pie + q.beta_var[j].ln());
        }
        let le = q.eta_cov.nrows() as f64;
        let logdet = q
            .eta_cov
            .clone()
            .cholesky()
            .map(|c| 2.0 * c.l_dirty().diagonal().map(f64::ln).sum())
            .unwrap_or(f64::NAN);
        ent += n as f64 * 0.5 * (le * ln2pie + logdet);
        ell + ent
    }
}

/// One sweep on a fresh workspace (convenience form of [`CaviWorkspace::sweep`]).
pub fn cavi_update(
    q: &VariationalState,
    tdata: &TransformedDataset,
    prior: &PriorConfig,
    basis: &BasisSystem,
) -> Result<VariationalState> {
    let mut ws = CaviWorkspace::new(tdata, basis, *prior)?;
    let mut out = q.clone();
    uncenter(&mut out);
    ws.refresh(&out);
    ws.sweep(&mut out, false)?;
    Ok(out)
}

// fold the shift into α so sweeps work on the effective intercepts
fn uncenter(q: &mut VariationalState) {
    q.alpha_mean -= &q.beta_shift;
    q.beta_shift.fill(0.0);
}

pub fn run_vi(
    tdata: &TransformedDataset,
    prior: &PriorConfig,
    basis: &BasisSystem,
    cfg: &VIConfig,
) -> Result<VIResult> {
    let init = VariationalState::init(tdata, basis, cfg.seed);
    run_vi_from(tdata, prior, basis, cfg, init)
}

pub fn run_vi_from(
    tdata: &TransformedDataset,
    prior: &PriorConfig,
    basis: &BasisSystem,
    cfg: &VIConfig,
    mut q: VariationalState,
) -> Result<VIResult> {
    cfg.validate()?;
    prior.validate()?;
    let p = tdata.n_covariates();
    if q.alpha_mean.len() != p
        || q.beta_mean.shape() != (p, basis.l())
        || q.eta_mean.shape() != (tdata.n(), basis.l_eta())
    {
        return Err(SimbaError::data("variational state shape does not match the data"));
    }
    uncenter(&mut q);
    let mut ws = CaviWorkspace::new(tdata, basis, *prior)?;
    ws.refresh(&q);
    let mut trace = Vec::with_capacity(cfg.max_iter.min(10_000));
    let mut converged = false;
    for it in 0..cfg.max_iter {
        if it % 64 == 63 {
            ws.refresh(&q);
        }
        let change = ws.sweep(&mut q, cfg.fixed_variances)?;
        trace.push(change);
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!(
            "VI did not converge in {} sweeps (last change {:.3e})",
            cfg.max_iter,
            trace.last().copied().unwrap_or(f64::NAN)
        );
    }
    q.center(basis);
    Ok(VIResult {
        iterations: trace.len(),
        state: q,
        trace,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{build_basis_system, InducingStrategy, KernelConfig, SpatialDomain};
    use crate::model::{transform_dataset, Dataset};
    use crate::rng::std_normal;

    fn toy(n: usize, l: usize, le: usize) -> (TransformedDataset, BasisSystem) {
        let side = 6;
        let raw = DMatrix::from_fn(side * side, 2, |i, k| if k == 0 { (i / side) as f64 } else { (i % side) as f64 });
        let dom = SpatialDomain::from_coords(raw).unwrap();
        let b = build_basis_system(&dom, &KernelConfig::default(), l, le, InducingStrategy::FarthestPoint, 0).unwrap();
        let mut rng = stream_rng(2, 0);
        let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { std_normal(&mut rng) });
        let y = DMatrix::from_fn(n, 36, |i, v| 0.5 + x[(i, 1)] * (v as f64 / 36.0) + std_normal(&mut rng) * 0.3);
        let d = Dataset::new(y, x, dom).unwrap();
        (transform_dataset(&d, &b).unwrap(), b)
    }

    #[test]
    fn fixed_point_at_generating_means() {
        let (mut t, b) = toy(5, 6, 2);
        let mut q = VariationalState::init(&t, &b, 1);
        // Ỹ equal to the fitted surface at the current means
        t.y_tilde = (&t.x * &q.alpha_mean) * b.ones_phi.transpose() + &t.x * &q.beta_mean + &q.eta_mean * &b.phi_eta;
        q.pin_variances(1e-9, 1e12, 1e12, 1e12);
        let mut ws = CaviWorkspace::new(&t, &b, PriorConfig::default()).unwrap();
        let before = q.clone();
        ws.refresh(&q);
        ws.sweep(&mut q, true).unwrap();
        assert!((q.alpha_mean - before.alpha_mean).amax() < 1e-10);
        assert!((q.beta_mean - before.beta_mean).amax() < 1e-10);
        assert!((q.eta_mean - before.eta_mean).amax() < 1e-10);
    }

    #[test]
    fn dummy_covariate_reverts_to_prior() {
        let (mut t, b) = toy(6, 5, 1);
        for i in 0..6 {
            t.x[(i, 1)] = 0.0;
        }
        let mut q = VariationalState::init(&t, &b, 0);
        q.pin_variances(0.5, 1.0, 2.0, 3.0);
        let cfg = VIConfig { max_iter: 5000, tol: 1e-12, fixed_variances: true, ..Default::default() };
        let r = run_vi_from(&t, &PriorConfig::default(), &b, &cfg, q).unwrap();
        assert!(r.converged);
        assert!(r.state.beta_mean.row(1).amax() < 1e-10);
        assert!((r.state.beta_var[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic_and_positive() {
        let (t, b) = toy(8, 8, 2);
        let cfg = VIConfig { max_iter: 300, ..Default::default() };
        let a = run_vi(&t, &PriorConfig::default(), &b, &cfg).unwrap();
        let a2 = run_vi(&t, &PriorConfig::default(), &b, &cfg).unwrap();
        assert_eq!(a.state, a2.state);
        assert!(a.state.is_valid());
        assert_eq!(a.iterations, a.trace.len());
        let c = b.voxel_mean_readout();
        for j in 0..2 {
            let m = a.state.beta_mean.row(j).transpose().dot(&c) - a.state.beta_shift[j];
            assert!(m.abs() < 1e-10);
        }
    }

    #[test]
    fn single_sweep_matches_workspace() {
        let (t, b) = toy(5, 4, 1);
        let q = VariationalState::init(&t, &b, 3);
        let one = cavi_update(&q, &t, &PriorConfig::default(), &b).unwrap();
        let r = run_vi_from(&t, &PriorConfig::default(), &b, &VIConfig { max_iter: 1, ..Default::default() }, q).unwrap();
        let mut centered = one.clone();
        centered.center(&b);
        assert!((centered.alpha_mean - r.state.alpha_mean).amax() < 1e-12);
        assert_eq!(one.q_sigma2_eps, r.state.q_sigma2_eps);
    }

    #[test]
    fn ig_factor_moments() {
        let q = IgFactor { shape: 3.0, rate: 4.0 };
        assert_eq!(q.mean_inv(), 0.75);
        assert_eq!(q.mean(), 2.0);
        assert!(IgFactor { shape: 1.0, rate: 1.0 }.mean().is_infinite());
        assert!((q.mean_log() - (4f64.ln() - digamma(3.0))).abs() < 1e-15);
    }

    #[test]
    fn monitor_is_finite() {
        let (t, b) = toy(5, 4, 2);
        let mut q = VariationalState::init(&t, &b, 3);
        let mut ws = CaviWorkspace::new(&t, &b, PriorConfig::default()).unwrap();
        ws.refresh(&q);
        for _ in 0..3 {
            ws.sweep(&mut q, false).unwrap();
        }
        assert!(ws.partial_elbo(&q).is_finite());
    }
}
