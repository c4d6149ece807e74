//! Conjugate Gibbs sampler on the projected model.
//!
//! One sweep updates θ_β, α, θ_η, the variances, then the auxiliaries. The
//! residual Ỹ − fitted is kept in a preallocated buffer and updated in place,
//! so a sweep costs O(N·L·L_η) and allocates nothing.

use std::time::Instant;

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;

use crate::error::{Result, SimbaError};
use crate::kernel::BasisSystem;
use crate::model::{center_in_place, init_state, ParameterState, PriorConfig, TransformedDataset};
use crate::rng::{derive_seed, stream, stream_rng, SimRng};

#[derive(Debug, Clone, PartialEq)]
pub struct GibbsConfig {
    /// Total iterations including burn-in.
    pub n_iter: usize,
    pub n_burnin: usize,
    pub thin: usize,
    pub n_chains: usize,
    pub seed: u64,
    pub store_eta: bool,
    /// Hold all variances and auxiliaries at their initial values.
    pub fixed_variances: bool,
    pub parallel: bool,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        GibbsConfig {
            n_iter: 5000,
            n_burnin: 4000,
            thin: 1,
            n_chains: 3,
            seed: 0,
            store_eta: false,
            fixed_variances: false,
            parallel: true,
        }
    }
}

impl GibbsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_burnin >= self.n_iter {
            return Err(SimbaError::config(format!(
                "burn-in ({}) must be smaller than the iteration count ({})",
                self.n_burnin, self.n_iter
            )));
        }
        if self.thin == 0 {
            return Err(SimbaError::config("thin must be at least 1"));
        }
        if self.n_chains == 0 {
            return Err(SimbaError::config("need at least one chain"));
        }
        Ok(())
    }

    pub fn n_draws(&self) -> usize {
        (self.n_iter - self.n_burnin) / self.thin
    }
}

#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub chain_id: usize,
    /// Post burn-in, thinned, centered draws.
    pub draws: Vec<ParameterState>,
    pub cond_loglik_trace: Vec<f64>,
    /// Wall-clock seconds for each completed block of 1,000 iterations.
    pub timing: Vec<f64>,
    pub seconds_per_iter: f64,
    /// Mean of the centered θ_η over stored draws (N×L_η).
    pub eta_mean: DMatrix<f64>,
}

/// Draw from IG(shape, rate).
pub fn sample_inv_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> f64 {
    let g = Gamma::new(shape, 1.0 / rate).expect("positive gamma parameters");
    1.0 / g.sample(rng)
}

/// In-place lower Cholesky factor of a small SPD matrix; upper part is left
/// untouched. Returns false if the matrix is not positive definite.
pub(crate) fn cholesky_in_place(m: &mut DMatrix<f64>) -> bool {
    let n = m.nrows();
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= m[(j, k)] * m[(j, k)];
        }
        if !(d > 0.0) {
            return false;
        }
        let d = d.sqrt();
        m[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= m[(i, k)] * m[(j, k)];
            }
            m[(i, j)] = s / d;
        }
    }
    true
}

// R −= θ Φ_η column by column; matrix products would allocate packing buffers
fn sub_eta_term(resid: &mut DMatrix<f64>, theta: &DMatrix<f64>, phi_eta: &DMatrix<f64>) {
    for c in 0..resid.ncols() {
        let mut col = resid.column_mut(c);
        for k in 0..theta.ncols() {
            col.axpy(-phi_eta[(k, c)], &theta.column(k), 1.0);
        }
    }
}

/// Mutable sampler over one chain.
pub struct GibbsSampler<'a> {
    tdata: &'a TransformedDataset,
    prior: PriorConfig,
    fixed_variances: bool,
    pub state: ParameterState,
    ones_phi: DVector<f64>,
    ones_phi_sq: f64,
    phi_eta: DMatrix<f64>,
    phi_eta_t: DMatrix<f64>,
    g_eta: DMatrix<f64>,
    x_sq: DVector<f64>,
    resid: DMatrix<f64>,
    buf_l: DVector<f64>,
    buf_l2: DVector<f64>,
    buf_n: DVector<f64>,
    buf_ne: DMatrix<f64>,
    eta_new: DMatrix<f64>,
    prec: DMatrix<f64>,
    rss: f64,
    since_refresh: usize,
}

const REFRESH_EVERY: usize = 64;

impl<'a> GibbsSampler<'a> {
    pub fn new(
        tdata: &'a TransformedDataset,
        basis: &BasisSystem,
        prior: PriorConfig,
        mut state: ParameterState,
        fixed_variances: bool,
    ) -> Result<Self> {
        let (n, l, p, le) = (tdata.n(), tdata.l(), tdata.n_covariates(), basis.l_eta());
        if basis.l() != l {
            return Err(SimbaError::data("basis and transformed data disagree on L"));
        }
        if state.theta_beta.shape() != (p, l) || state.theta_eta.shape() != (n, le) || state.alpha.len() != p {
            return Err(SimbaError::data("initial state shape does not match the data"));
        }
        if !state.is_valid() {
            return Err(SimbaError::numerical("initial state has non-positive variances"));
        }
        // the chain runs on α_eff; centering happens on stored copies only
        state.alpha -= &state.beta_shift;
        state.beta_shift.fill(0.0);
        let x_sq = DVector::from_iterator(p, tdata.x.column_iter().map(|c| c.norm_squared()));
        let g_eta = &basis.phi_eta * basis.phi_eta.transpose();
        let mut s = GibbsSampler {
            tdata,
            prior,
            fixed_variances,
            state,
            ones_phi: basis.ones_phi.clone(),
            ones_phi_sq: basis.ones_phi.norm_squared(),
            phi_eta: basis.phi_eta.clone(),
            phi_eta_t: basis.phi_eta.transpose(),
            g_eta,
            x_sq,
            resid: DMatrix::zeros(n, l),
            buf_l: DVector::zeros(l),
            buf_l2: DVector::zeros(l),
            buf_n: DVector::zeros(n),
            buf_ne: DMatrix::zeros(n, le),
            eta_new: DMatrix::zeros(n, le),
            prec: DMatrix::zeros(le, le),
            rss: 0.0,
            since_refresh: 0,
        };
        s.refresh_residual();
        Ok(s)
    }

    /// Recomputes R = Ỹ − (Xα)Φ̃ᵀ − Xθ_β − θ_ηΦ_η from scratch.
    pub fn refresh_residual(&mut self) {
        let x = &self.tdata.x;
        self.resid.copy_from(&self.tdata.y_tilde);
        self.buf_n.gemv(1.0, x, &self.state.alpha, 0.0);
        self.resid.ger(-1.0, &self.buf_n, &self.ones_phi, 1.0);
        for c in 0..self.resid.ncols() {
            let mut col = self.resid.column_mut(c);
            for j in 0..x.ncols() {
                col.axpy(-self.state.theta_beta[(j, c)], &x.column(j), 1.0);
            }
        }
        sub_eta_term(&mut self.resid, &self.state.theta_eta, &self.phi_eta);
        self.since_refresh = 0;
    }

    pub fn residual(&self) -> &DMatrix<f64> {
        &self.resid
    }

    /// Full-conditional (mean, variance) of α_j given the current state.
    pub fn alpha_conditional(&mut self, j: usize) -> (f64, f64) {
        let s = &self.state;
        let prec = self.x_sq[j] * self.ones_phi_sq / s.sigma2_eps + 1.0 / s.sigma2_alpha;
        let var = 1.0 / prec;
        self.buf_n.gemv(1.0, &self.resid, &self.ones_phi, 0.0);
        let xr = self.tdata.x.column(j).dot(&self.buf_n) + s.alpha[j] * self.x_sq[j] * self.ones_phi_sq;
        (var * xr / s.sigma2_eps, var)
    }

    /// Full-conditional mean (into an owned vector) and scalar variance of θ_βj.
    pub fn theta_beta_conditional(&mut self, j: usize) -> (DVector<f64>, f64) {
        self.theta_beta_moments(j);
        let s = &self.state;
        let var = 1.0 / (self.x_sq[j] / s.sigma2_eps + 1.0 / s.sigma2_beta);
        (self.buf_l.clone(), var)
    }

    // leaves the conditional mean of θ_βj in buf_l
    fn theta_beta_moments(&mut self, j: usize) -> f64 {
        let s = &self.state;
        let var = 1.0 / (self.x_sq[j] / s.sigma2_eps + 1.0 / s.sigma2_beta);
        let xj = self.tdata.x.column(j);
        self.buf_l.gemv_tr(1.0, &self.resid, &xj, 0.0);
        for l in 0..self.buf_l.len() {
            self.buf_l[l] = var / s.sigma2_eps * (self.buf_l[l] + self.x_sq[j] * s.theta_beta[(j, l)]);
        }
        var
    }

    /// Shared posterior covariance of every θ_ηi and the N×L_η conditional means.
    pub fn theta_eta_conditional(&mut self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.eta_precision()?;
        let le = self.prec.nrows();
        let mut lfac = self.prec.clone();
        for i in 0..le {
            for k in (i + 1)..le {
                lfac[(i, k)] = 0.0;
            }
        }
        let cov = (&lfac * lfac.transpose())
            .try_inverse()
            .ok_or_else(|| SimbaError::numerical("η precision not invertible"))?;
        self.eta_rhs();
        let means = &self.buf_ne * &cov;
        Ok((means, cov))
    }

    // Cholesky factor of Φ_ηΦ_ηᵀ/σ²_ε + I/σ²_η into self.prec
    fn eta_precision(&mut self) -> Result<()> {
        let s = &self.state;
        self.prec.copy_from(&self.g_eta);
        self.prec /= s.sigma2_eps;
        for i in 0..self.prec.nrows() {
            self.prec[(i, i)] += 1.0 / s.sigma2_eta;
        }
        if cholesky_in_place(&mut self.prec) {
            Ok(())
        } else {
            Err(SimbaError::numerical("Cholesky of the θ_η precision failed"))
        }
    }

    // buf_ne = (R + θ_ηΦ_η)Φ_ηᵀ / σ²_ε
    fn eta_rhs(&mut self) {
        let inv = 1.0 / self.state.sigma2_eps;
        for k in 0..self.buf_ne.ncols() {
            let mut col = self.buf_ne.column_mut(k);
            col.gemv(inv, &self.resid, &self.phi_eta_t.column(k), 0.0);
            col.gemv(inv, &self.state.theta_eta, &self.g_eta.column(k), 1.0);
        }
    }

    pub fn sample_theta_beta(&mut self, rng: &mut SimRng) {
        for j in 0..self.state.alpha.len() {
            let var = self.theta_beta_moments(j);
            let sd = var.sqrt();
            for l in 0..self.buf_l.len() {
                let z: f64 = StandardNormal.sample(rng);
                let new = self.buf_l[l] + sd * z;
                self.buf_l2[l] = new - self.state.theta_beta[(j, l)];
                self.state.theta_beta[(j, l)] = new;
            }
            let xj = self.tdata.x.column(j);
            self.resid.ger(-1.0, &xj, &self.buf_l2, 1.0);
        }
    }

    pub fn sample_alpha(&mut self, rng: &mut SimRng) {
        for j in 0..self.state.alpha.len() {
            let (mean, var) = self.alpha_conditional(j);
            let z: f64 = StandardNormal.sample(rng);
            let new = mean + var.sqrt() * z;
            let delta = new - self.state.alpha[j];
            self.state.alpha[j] = new;
            let xj = self.tdata.x.column(j);
            self.resid.ger(-delta, &xj, &self.ones_phi, 1.0);
        }
    }

    pub fn sample_theta_eta(&mut self, rng: &mut SimRng) -> Result<()> {
        self.eta_precision()?;
        self.eta_rhs();
        let (n, le) = self.buf_ne.shape();
        let lf = &self.prec;
        for i in 0..n {
            // forward solve L w = b_i (in place in buf_ne row i)
            for r in 0..le {
                let mut s = self.buf_ne[(i, r)];
                for k in 0..r {
                    s -= lf[(r, k)] * self.buf_ne[(i, k)];
                }
                self.buf_ne[(i, r)] = s / lf[(r, r)];
            }
            for r in 0..le {
                let z: f64 = StandardNormal.sample(rng);
                self.buf_ne[(i, r)] += z;
            }
            // back solve Lᵀ θ = w + z
            for r in (0..le).rev() {
                let mut s = self.buf_ne[(i, r)];
                for k in (r + 1)..le {
                    s -= lf[(k, r)] * self.eta_new[(i, k)];
                }
                self.eta_new[(i, r)] = s / lf[(r, r)];
            }
        }
        // buf_ne ← Δθ_η; R −= Δθ_η Φ_η
        self.buf_ne.copy_from(&self.eta_new);
        self.buf_ne -= &self.state.theta_eta;
        sub_eta_term(&mut self.resid, &self.buf_ne, &self.phi_eta);
        self.state.theta_eta.copy_from(&self.eta_new);
        Ok(())
    }

    pub fn sample_variances(&mut self, rng: &mut SimRng) {
        let (n, l) = self.resid.shape();
        let le = self.phi_eta.nrows() as f64;
        let p = self.state.alpha.len() as f64;
        let (n, l) = (n as f64, l as f64);
        self.rss = self.resid.norm_squared();
        if self.fixed_variances {
            return;
        }
        let s = &mut self.state;
        s.sigma2_eps = sample_inv_gamma(rng, (1.0 + n * l) / 2.0, 0.5 * self.rss + 1.0 / s.a_eps);
        s.sigma2_eta = sample_inv_gamma(
            rng,
            (1.0 + n * le) / 2.0,
            0.5 * s.theta_eta.norm_squared() + 1.0 / s.a_eta,
        );
        s.sigma2_beta = sample_inv_gamma(
            rng,
            (1.0 + p * l) / 2.0,
            0.5 * s.theta_beta.norm_squared() + 1.0 / s.a_beta,
        );
        s.sigma2_alpha = sample_inv_gamma(rng, (1.0 + p) / 2.0, 0.5 * s.alpha.norm_squared() + 1.0 / s.a_alpha);
        let inv_a2 = self.prior.inv_a2();
        s.a_eps = sample_inv_gamma(rng, 1.0, inv_a2 + 1.0 / s.sigma2_eps);
        s.a_eta = sample_inv_gamma(rng, 1.0, inv_a2 + 1.0 / s.sigma2_eta);
        s.a_beta = sample_inv_gamma(rng, 1.0, inv_a2 + 1.0 / s.sigma2_beta);
        s.a_alpha = sample_inv_gamma(rng, 1.0, inv_a2 + 1.0 / s.sigma2_alpha);
    }

    /// log p(Ỹ | state) from the current residual.
    pub fn cond_loglik(&self) -> f64 {
        let (n, l) = self.resid.shape();
        let nl = (n * l) as f64;
        let s2 = self.state.sigma2_eps;
        -0.5 * nl * (2.0 * std::f64::consts::PI * s2).ln() - 0.5 * self.rss / s2
    }

    /// One full sweep; returns the conditional log-likelihood afterwards.
    pub fn step(&mut self, rng: &mut SimRng) -> Result<f64> {
        if self.since_refresh >= REFRESH_EVERY {
            self.refresh_residual();
        }
        self.since_refresh += 1;
        self.sample_theta_beta(rng);
        self.sample_alpha(rng);
        self.sample_theta_eta(rng)?;
        self.sample_variances(rng);
        Ok(self.cond_loglik())
    }
}

pub fn run_chain(
    tdata: &TransformedDataset,
    prior: &PriorConfig,
    basis: &BasisSystem,
    cfg: &GibbsConfig,
    chain_id: usize,
) -> Result<ChainOutput> {
    let init = init_state(tdata, basis, derive_seed(cfg.seed, chain_id as u64));
    run_chain_from(tdata, prior, basis, cfg, chain_id, init)
}

pub fn run_chain_from(
    tdata: &TransformedDataset,
    prior: &PriorConfig,
    basis: &BasisSystem,
    cfg: &GibbsConfig,
    chain_id: usize,
    init: ParameterState,
) -> Result<ChainOutput> {
    cfg.validate()?;
    prior.validate()?;
    let mut rng = stream_rng(cfg.seed, stream::CHAIN + chain_id as u64);
    let mut sampler = GibbsSampler::new(tdata, basis, *prior, init, cfg.fixed_variances)?;
    let mut trace = Vec::with_capacity(cfg.n_iter);
    let mut draws = Vec::with_capacity(cfg.n_draws());
    let mut timing = Vec::with_capacity(cfg.n_iter / 1000 + 1);
    let mut eta_sum = DMatrix::zeros(tdata.n(), basis.l_eta());
    let start = Instant::now();
    let mut block = Instant::now();
    for it in 0..cfg.n_iter {
        let ll = sampler.step(&mut rng).map_err(|e| {
            SimbaError::numerical(format!("chain {chain_id}, iteration {it}: {e}"))
        })?;
        if !ll.is_finite() {
            return Err(SimbaError::numerical(format!(
                "chain {chain_id}: non-finite conditional log-likelihood at iteration {it}"
            )));
        }
        trace.push(ll);
        if it >= cfg.n_burnin && (it - cfg.n_burnin + 1) % cfg.thin == 0 && draws.len() < cfg.n_draws() {
            let mut d = sampler.state.clone();
            center_in_place(&mut d, basis);
            eta_sum += &d.theta_eta;
            if !cfg.store_eta {
                d.theta_eta = DMatrix::zeros(0, basis.l_eta());
            }
            draws.push(d);
        }
        if (it + 1) % 1000 == 0 {
            let secs = block.elapsed().as_secs_f64();
            timing.push(secs);
            block = Instant::now();
            debug!("chain {chain_id}: {} iterations, {secs:.3}s per 1000", it + 1);
        }
    }
    let total = start.elapsed().as_secs_f64();
    let nd = draws.len().max(1) as f64;
    info!(
        "chain {chain_id}: {} iterations in {total:.2}s ({:.3}s per 1000)",
        cfg.n_iter,
        1000.0 * total / cfg.n_iter as f64
    );
    Ok(ChainOutput {
        chain_id,
        draws,
        cond_loglik_trace: trace,
        timing,
        seconds_per_iter: total / cfg.n_iter as f64,
        eta_mean: eta_sum / nd,
    })
}

/// Runs `cfg.n_chains` chains with per-chain seeds; parallel when requested.
pub fn run_gibbs(
    tdata: &TransformedDataset,
    prior: &PriorConfig,
    basis: &BasisSystem,
    cfg: &GibbsConfig,
) -> Result<Vec<ChainOutput>> {
    cfg.validate()?;
    let run = |c: usize| {
        run_chain(tdata, prior, basis, cfg, c)
            .map_err(|e| SimbaError::numerical(format!("chain {c} aborted: {e}")))
    };
    let outs: Vec<Result<ChainOutput>> = if cfg.parallel {
        (0..cfg.n_chains).into_par_iter().map(run).collect()
    } else {
        (0..cfg.n_chains).map(run).collect()
    };
    outs.into_iter().collect()
}

/// All draws of all chains in chain order.
pub fn pooled_draws(chains: &[ChainOutput]) -> Vec<&ParameterState> {
    chains.iter().flat_map(|c| c.draws.iter()).collect()
}
