//! Voxelwise hierarchical model without spatial structure:
//! y_i(v) = Σ_j x_ij b_j(v) + u_i + ε, b_j(v) ~ N(γ_j, τ²_j), u_i ~ N(0, τ²_u),
//! with half-Cauchy variances written as IG mixtures and γ_j ~ N(0, A²).
//! Every sweep works from sufficient statistics, so its cost is O(V(J+1)²).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Result, SimbaError};
use crate::gibbs::{sample_inv_gamma, GibbsConfig};
use crate::model::{Dataset, PriorConfig};
use crate::rng::{std_normal, stream, stream_rng};
use crate::summaries::{summarize_samples, EffectMap, DEFAULT_THRESHOLD};

#[derive(Debug, Clone, Default)]
pub struct BmlOptions {
    /// Pins every τ²_j at this value.
    pub fixed_tau2: Option<f64>,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BmlResult {
    pub maps: Vec<EffectMap>,
    /// Per-iteration τ²_j (rows) for the first chain.
    pub tau2_trace: Vec<DVector<f64>>,
    pub tau2_u_trace: Vec<f64>,
    pub sigma2_trace: Vec<f64>,
    pub gamma_mean: DVector<f64>,
}

struct Suff {
    xtx: DMatrix<f64>,
    xty: DMatrix<f64>,
    row_sum: DVector<f64>,
    y_sq: f64,
}

struct ChainDraws {
    /// One (J+1)×V matrix per stored draw.
    b: Vec<DMatrix<f64>>,
    tau2: Vec<DVector<f64>>,
    tau2_u: Vec<f64>,
    sigma2: Vec<f64>,
    gamma_sum: DVector<f64>,
}

pub fn bml_fit(data: &Dataset, cfg: &GibbsConfig) -> Result<BmlResult> {
    bml_fit_with(data, cfg, &PriorConfig::default(), &BmlOptions::default())
}

pub fn bml_fit_with(data: &Dataset, cfg: &GibbsConfig, prior: &PriorConfig, opts: &BmlOptions) -> Result<BmlResult> {
    cfg.validate()?;
    prior.validate()?;
    let xtx = data.x.tr_mul(&data.x);
    if xtx.clone().cholesky().is_none() {
        return Err(SimbaError::data("covariate matrix is rank deficient"));
    }
    let suff = Suff {
        xtx,
        xty: data.x.tr_mul(&data.y),
        row_sum: DVector::from_iterator(data.n(), data.y.row_iter().map(|r| r.sum())),
        y_sq: data.y.norm_squared(),
    };
    let run = |c: usize| run_bml_chain(data, &suff, cfg, prior, opts, c);
    let chains: Vec<Result<ChainDraws>> = if cfg.parallel {
        (0..cfg.n_chains).into_par_iter().map(run).collect()
    } else {
        (0..cfg.n_chains).map(run).collect()
    };
    let chains: Vec<ChainDraws> = chains.into_iter().collect::<Result<_>>()?;
    let p = data.n_covariates();
    let v = data.n_voxels();
    let total: usize = chains.iter().map(|c| c.b.len()).sum();
    let threshold = opts.threshold.unwrap_or(DEFAULT_THRESHOLD);
    let mut maps = Vec::with_capacity(p);
    for j in 0..p {
        let mut s = DMatrix::zeros(v, total);
        let mut k = 0;
        for c in &chains {
            for b in &c.b {
                s.column_mut(k).copy_from(&b.row(j).transpose());
                k += 1;
            }
        }
        maps.push(summarize_samples(&s, j, 0.95, threshold)?);
    }
    let gamma_mean = chains.iter().fold(DVector::zeros(p), |acc, c| acc + &c.gamma_sum) / total.max(1) as f64;
    let first = chains.into_iter().next().expect("at least one chain");
    Ok(BmlResult {
        maps,
        tau2_trace: first.tau2,
        tau2_u_trace: first.tau2_u,
        sigma2_trace: first.sigma2,
        gamma_mean,
    })
}

fn run_bml_chain(
    data: &Dataset,
    suff: &Suff,
    cfg: &GibbsConfig,
    prior: &PriorConfig,
    opts: &BmlOptions,
    chain: usize,
) -> Result<ChainDraws> {
    let mut rng = stream_rng(cfg.seed, stream::BML + chain as u64);
    let (n, p) = data.x.shape();
    let v = data.n_voxels();
    let (nf, vf) = (n as f64, v as f64);
    let inv_a2 = prior.inv_a2();

    // start at the least-squares fit
    let mut b = suff
        .xtx
        .clone()
        .cholesky()
        .expect("checked full rank")
        .solve(&suff.xty);
    let mut u = DVector::<f64>::zeros(n);
    let mut gamma = DVector::from_iterator(p, b.row_iter().map(|r| r.mean()));
    let mut tau2 = DVector::from_element(p, opts.fixed_tau2.unwrap_or(1.0));
    let mut a_tau = DVector::from_element(p, 1.0);
    let (mut tau2_u, mut a_u, mut sigma2, mut a_sigma) = (1.0, 1.0, 1.0, 1.0);

    let mut out = ChainDraws {
        b: Vec::with_capacity(cfg.n_draws()),
        tau2: Vec::with_capacity(cfg.n_iter),
        tau2_u: Vec::with_capacity(cfg.n_iter),
        sigma2: Vec::with_capacity(cfg.n_iter),
        gamma_sum: DVector::zeros(p),
    };
    let mut rhs = DMatrix::zeros(p, v);
    for it in 0..cfg.n_iter {
        // b_v | rest, shared precision XᵀX/σ² + diag(1/τ²)
        let mut prec = &suff.xtx / sigma2;
        for j in 0..p {
            prec[(j, j)] += 1.0 / tau2[j];
        }
        let chol = prec
            .cholesky()
            .ok_or_else(|| SimbaError::numerical(format!("BML chain {chain}: precision not SPD at iteration {it}")))?;
        let xtu = data.x.tr_mul(&u);
        for k in 0..v {
            for j in 0..p {
                rhs[(j, k)] = (suff.xty[(j, k)] - xtu[j]) / sigma2 + gamma[j] / tau2[j];
            }
        }
        let mean = chol.solve(&rhs);
        let z = DMatrix::from_fn(p, v, |_, _| std_normal(&mut rng));
        let noise = chol
            .l_dirty()
            .transpose()
            .solve_upper_triangular(&z)
            .ok_or_else(|| SimbaError::numerical("BML triangular solve failed"))?;
        b = mean + noise;

        // u_i | rest
        let sum_b = DVector::from_iterator(p, b.row_iter().map(|r| r.sum()));
        let u_prec = vf / sigma2 + 1.0 / tau2_u;
        let xsb = &data.x * &sum_b;
        for i in 0..n {
            let m = (suff.row_sum[i] - xsb[i]) / sigma2 / u_prec;
            u[i] = m + std_normal(&mut rng) / u_prec.sqrt();
        }

        // γ_j, τ²_j and their auxiliaries
        for j in 0..p {
            let g_prec = vf / tau2[j] + inv_a2;
            gamma[j] = sum_b[j] / tau2[j] / g_prec + std_normal(&mut rng) / g_prec.sqrt();
            if opts.fixed_tau2.is_none() {
                let ss: f64 = b.row(j).iter().map(|x| (x - gamma[j]).powi(2)).sum();
                tau2[j] = sample_inv_gamma(&mut rng, (1.0 + vf) / 2.0, 0.5 * ss + 1.0 / a_tau[j]);
                a_tau[j] = sample_inv_gamma(&mut rng, 1.0, inv_a2 + 1.0 / tau2[j]);
            }
        }
        tau2_u = sample_inv_gamma(&mut rng, (1.0 + nf) / 2.0, 0.5 * u.norm_squared() + 1.0 / a_u);
        a_u = sample_inv_gamma(&mut rng, 1.0, inv_a2 + 1.0 / tau2_u);

        // residual sum of squares from sufficient statistics
        let xtu = data.x.tr_mul(&u);
        let xtx_b = &suff.xtx * &b;
        let sse = suff.y_sq - 2.0 * b.component_mul(&suff.xty).sum() - 2.0 * u.dot(&suff.row_sum)
            + b.component_mul(&xtx_b).sum()
            + 2.0 * sum_b.dot(&xtu)
            + vf * u.norm_squared();
        let sse = sse.max(0.0);
        sigma2 = sample_inv_gamma(&mut rng, (1.0 + nf * vf) / 2.0, 0.5 * sse + 1.0 / a_sigma);
        a_sigma = sample_inv_gamma(&mut rng, 1.0, inv_a2 + 1.0 / sigma2);
        if !sigma2.is_finite() {
            return Err(SimbaError::numerical(format!("BML chain {chain}: non-finite noise variance")));
        }

        out.tau2.push(tau2.clone());
        out.tau2_u.push(tau2_u);
        out.sigma2.push(sigma2);
        if it >= cfg.n_burnin && (it - cfg.n_burnin + 1) % cfg.thin == 0 {
            out.b.push(b.clone());
            out.gamma_sum += &gamma;
        }
    }
    Ok(out)
}
