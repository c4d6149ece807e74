//! Voxel-level effect maps from posterior draws or variational factors.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erf;

use crate::error::{Result, SimbaError};
use crate::kernel::BasisSystem;
use crate::model::ParameterState;
use crate::vi::VariationalState;

pub const DEFAULT_THRESHOLD: f64 = 0.95;
pub const MIN_DRAWS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct EffectMap {
    pub covariate: usize,
    pub mean: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub p_plus: DVector<f64>,
    pub e_s: DVector<f64>,
    pub active: Vec<bool>,
    pub threshold: f64,
}

impl EffectMap {
    pub fn n_voxels(&self) -> usize {
        self.mean.len()
    }

    /// Re-thresholds the activation mask.
    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.active = self.e_s.iter().map(|e| e.abs() > threshold).collect();
        self.threshold = threshold;
        self
    }
}

/// α_j·1 + ΨΛ^{1/2}θ_βj (minus any centering shift).
pub fn reconstruct_effect(draw: &ParameterState, basis: &BasisSystem, j: usize) -> DVector<f64> {
    draw.effect_map(basis, j)
}

pub fn evidence_score(p_value: f64, sign: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_value) {
        return Err(SimbaError::data(format!("p-value {p_value} outside [0, 1]")));
    }
    if sign != 1.0 && sign != -1.0 {
        return Err(SimbaError::data(format!("sign must be ±1, got {sign}")));
    }
    Ok(sign * (1.0 - p_value))
}

pub fn evidence_from_pplus(p_plus: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_plus) {
        return Err(SimbaError::data(format!("P+ {p_plus} outside [0, 1]")));
    }
    Ok(2.0 * (p_plus - 0.5))
}

/// 1-based nearest-rank index ⌈q·n⌉, clamped to [1, n].
pub fn nearest_rank(q: f64, n: usize) -> usize {
    let k = (q * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1, n)
}

/// Empirical summary of per-voxel samples given as a V×D matrix.
pub fn summarize_samples(samples: &DMatrix<f64>, covariate: usize, level: f64, threshold: f64) -> Result<EffectMap> {
    let (v, d) = samples.shape();
    if d < MIN_DRAWS {
        return Err(SimbaError::data(format!(
            "need at least {MIN_DRAWS} draws for empirical summaries, got {d}"
        )));
    }
    check_level(level)?;
    let tail = (1.0 - level) / 2.0;
    let lo_k = nearest_rank(tail, d) - 1;
    let hi_k = nearest_rank(1.0 - tail, d) - 1;
    let mut mean = DVector::zeros(v);
    let mut lower = DVector::zeros(v);
    let mut upper = DVector::zeros(v);
    let mut p_plus = DVector::zeros(v);
    let mut e_s = DVector::zeros(v);
    let mut row = vec![0.0; d];
    for i in 0..v {
        let mut pos = 0usize;
        let mut s = 0.0;
        for k in 0..d {
            let x = samples[(i, k)];
            row[k] = x;
            s += x;
            if x > 0.0 {
                pos += 1;
            }
        }
        let neg = row.iter().filter(|&&x| x < 0.0).count();
        row.sort_by(f64::total_cmp);
        mean[i] = s / d as f64;
        lower[i] = row[lo_k];
        upper[i] = row[hi_k];
        p_plus[i] = pos as f64 / d as f64;
        // (pos − neg)/D equals 2(P⁺ − 1/2) for draws without exact zeros and
        // is exactly antisymmetric under negation
        e_s[i] = if pos + neg == d {
            (pos as f64 - neg as f64) / d as f64
        } else {
            2.0 * (p_plus[i] - 0.5)
        };
    }
    Ok(EffectMap {
        covariate,
        active: e_s.iter().map(|e: &f64| e.abs() > threshold).collect(),
        mean,
        lower,
        upper,
        p_plus,
        e_s,
        threshold,
    })
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(SimbaError::config(format!("credible level must be in (0, 1), got {level}")))
    }
}

/// Voxel samples of α_j + β_j(s_v) for all draws (V×D).
pub fn effect_samples(draws: &[&ParameterState], basis: &BasisSystem, j: usize) -> DMatrix<f64> {
    let d = draws.len();
    let theta = DMatrix::from_fn(basis.l(), d, |l, k| draws[k].theta_beta[(j, l)]);
    let mut out = basis.psi_sqrt_lambda() * theta;
    for (k, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(draws[k].alpha[j] - draws[k].beta_shift[j]);
    }
    out
}

pub fn summarize_gibbs(
    draws: &[&ParameterState],
    basis: &BasisSystem,
    level: f64,
    threshold: f64,
) -> Result<Vec<EffectMap>> {
    if draws.len() < MIN_DRAWS {
        return Err(SimbaError::data(format!(
            "need at least {MIN_DRAWS} draws, got {}",
            draws.len()
        )));
    }
    let p = draws[0].alpha.len();
    (0..p)
        .map(|j| summarize_samples(&effect_samples(draws, basis, j), j, level, threshold))
        .collect()
}

/// Gaussian summary from per-voxel means and variances.
pub fn summarize_gaussian(
    mean: DVector<f64>,
    var: &DVector<f64>,
    covariate: usize,
    level: f64,
    threshold: f64,
) -> Result<EffectMap> {
    check_level(level)?;
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    let v = mean.len();
    let mut lower = DVector::zeros(v);
    let mut upper = DVector::zeros(v);
    let mut p_plus = DVector::zeros(v);
    let mut e_s = DVector::zeros(v);
    for i in 0..v {
        let sd = var[i].max(0.0).sqrt();
        let m = mean[i];
        lower[i] = m - z * sd;
        upper[i] = m + z * sd;
        let e = if sd > 0.0 {
            erf(m / (sd * std::f64::consts::SQRT_2))
        } else {
            m.signum() * (m != 0.0) as i32 as f64
        };
        e_s[i] = e;
        p_plus[i] = 0.5 * (1.0 + e);
    }
    Ok(EffectMap {
        covariate,
        active: e_s.iter().map(|e: &f64| e.abs() > threshold).collect(),
        mean,
        lower,
        upper,
        p_plus,
        e_s,
        threshold,
    })
}

/// Effect at voxel v is Gaussian with mean α̂_j + (ΨΛ^{1/2}μ_βj)_v and
/// variance ν_αj + s²_j Σ_l Ψ²_vl λ_l.
pub fn summarize_vi(q: &VariationalState, basis: &BasisSystem, level: f64, threshold: f64) -> Result<Vec<EffectMap>> {
    let lev = basis.psi.map(|x| x * x) * &basis.lambda;
    let p = q.alpha_mean.len();
    (0..p)
        .map(|j| {
            let theta = q.beta_mean.row(j).transpose();
            let mean = basis.reconstruct(&theta).add_scalar(q.alpha_mean[j] - q.beta_shift[j]);
            let var = lev.map(|x| q.alpha_var[j] + q.beta_var[j] * x);
            summarize_gaussian(mean, &var, j, level, threshold)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{std_normal, stream_rng};
    use proptest::prelude::*;

    fn unit_basis(v: usize) -> BasisSystem {
        let psi = DMatrix::from_fn(v, 1, |_, _| 1.0 / (v as f64).sqrt());
        let lam = DVector::from_element(1, 4.0);
        BasisSystem::from_parts(psi.clone(), lam.clone(), psi, lam, vec![0], vec![0]).unwrap()
    }

    #[test]
    fn reconstruct_examples() {
        let b = unit_basis(4);
        let mut s = ParameterState::zeros(1, 1, 1, 1);
        s.alpha[0] = 0.7;
        assert_eq!(reconstruct_effect(&s, &b, 0), DVector::from_element(4, 0.7));
        s.alpha[0] = 0.0;
        s.theta_beta[(0, 0)] = 1.0;
        let m = reconstruct_effect(&s, &b, 0);
        assert!((m - b.psi.column(0) * 2.0).amax() < 1e-15);
    }

    #[test]
    fn reconstruct_matches_dense_product() {
        use crate::kernel::*;
        let raw = DMatrix::from_fn(30, 2, |i, k| if k == 0 { (i / 6) as f64 } else { (i % 6) as f64 });
        let dom = SpatialDomain::from_coords(raw).unwrap();
        let b = build_basis_system(&dom, &KernelConfig::default(), 9, 2, InducingStrategy::FarthestPoint, 0).unwrap();
        let mut rng = stream_rng(1, 1);
        let mut s = ParameterState::zeros(1, 2, 9, 2);
        s.alpha = DVector::from_fn(2, |_, _| std_normal(&mut rng));
        s.theta_beta = DMatrix::from_fn(2, 9, |_, _| std_normal(&mut rng));
        let lam_half = DMatrix::from_diagonal(&b.lambda.map(f64::sqrt));
        let dense = &b.psi * lam_half * s.theta_beta.row(1).transpose();
        let got = reconstruct_effect(&s, &b, 1);
        assert!((got - dense.add_scalar(s.alpha[1])).amax() < 1e-10);
    }

    #[test]
    fn evidence_examples() {
        assert!((evidence_score(0.05, 1.0).unwrap() - 0.95).abs() < 1e-15);
        assert_eq!(evidence_from_pplus(0.5).unwrap(), 0.0);
        assert!((evidence_from_pplus(0.975).unwrap() - 0.95).abs() < 1e-15);
        assert!(evidence_score(1.5, 1.0).is_err());
        assert!(evidence_from_pplus(-0.1).is_err());
    }

    #[test]
    fn nearest_rank_order_statistics() {
        assert_eq!(nearest_rank(0.025, 1000), 25);
        assert_eq!(nearest_rank(0.975, 1000), 975);
        let samples = DMatrix::from_fn(1, 1000, |_, k| (k + 1) as f64);
        let m = summarize_samples(&samples, 0, 0.95, 0.95).unwrap();
        assert_eq!(m.lower[0], 25.0);
        assert_eq!(m.upper[0], 975.0);
    }

    #[test]
    fn all_positive_and_symmetric_draws() {
        let pos = DMatrix::from_fn(1, 200, |_, k| 1.0 + k as f64);
        let m = summarize_samples(&pos, 0, 0.95, 0.95).unwrap();
        assert_eq!((m.p_plus[0], m.e_s[0]), (1.0, 1.0));
        assert!(m.active[0]);
        let mut rng = stream_rng(4, 0);
        let sym = DMatrix::from_fn(1, 1000, |_, _| std_normal(&mut rng));
        let m = summarize_samples(&sym, 0, 0.95, 0.95).unwrap();
        assert!((m.p_plus[0] - 0.5).abs() < 0.05);
        assert!(m.e_s[0].abs() < 0.1);
        assert!(summarize_samples(&DMatrix::zeros(1, 50), 0, 0.95, 0.95).is_err());
    }

    #[test]
    fn vi_degenerate_cases() {
        let b = unit_basis(3);
        let mut q = VariationalState {
            alpha_mean: DVector::from_element(1, 0.0),
            alpha_var: DVector::from_element(1, 1e-300),
            beta_mean: DMatrix::zeros(1, 1),
            beta_var: DVector::from_element(1, 1e-300),
            eta_mean: DMatrix::zeros(2, 1),
            eta_cov: DMatrix::identity(1, 1),
            beta_shift: DVector::zeros(1),
            q_sigma2_eps: crate::vi::IgFactor { shape: 1.0, rate: 1.0 },
            q_sigma2_eta: crate::vi::IgFactor { shape: 1.0, rate: 1.0 },
            q_sigma2_beta: crate::vi::IgFactor { shape: 1.0, rate: 1.0 },
            q_sigma2_alpha: crate::vi::IgFactor { shape: 1.0, rate: 1.0 },
            q_a_eps: crate::vi::IgFactor { shape: 1.0, rate: 1.0 },
            q_a_eta: crate::vi::IgFactor { shape: 1.0, rate: 1.0 },
            q_a_beta: crate::vi::IgFactor { shape: 1.0, rate: 1.0 },
            q_a_alpha: crate::vi::IgFactor { shape: 1.0, rate: 1.0 },
        };
        q.alpha_mean[0] = 1.5;
        q.alpha_var[0] = 0.0;
        q.beta_var[0] = 0.0;
        let m = &summarize_vi(&q, &b, 0.95, 0.95).unwrap()[0];
        assert_eq!(m.lower, m.mean);
        assert_eq!(m.upper, m.mean);
        q.alpha_mean[0] = 0.0;
        q.alpha_var[0] = 2.0;
        let m = &summarize_vi(&q, &b, 0.95, 0.95).unwrap()[0];
        assert_eq!(m.p_plus[0], 0.5);
    }

    #[test]
    fn vi_variance_hand_instance() {
        // V=2, L=1: Ψ = (0.6, 0.8)ᵀ, λ = 4, ν_α = 0.1, s² = 0.5
        let psi = DMatrix::from_row_slice(2, 1, &[0.6, 0.8]);
        let lam = DVector::from_element(1, 4.0);
        let b = BasisSystem::from_parts(psi.clone(), lam.clone(), psi, lam, vec![0], vec![0]).unwrap();
        let mean = DVector::from_vec(vec![0.0, 0.0]);
        let var_oracle = DVector::from_vec(vec![0.1 + 0.5 * 0.36 * 4.0, 0.1 + 0.5 * 0.64 * 4.0]);
        let lev = b.psi.map(|x| x * x) * &b.lambda;
        let var = lev.map(|x| 0.1 + 0.5 * x);
        assert!((var - &var_oracle).amax() < 1e-15);
        let m = summarize_gaussian(mean, &var_oracle, 0, 0.95, 0.95).unwrap();
        let z = 1.959963984540054;
        assert!((m.upper[1] - z * var_oracle[1].sqrt()).abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn evidence_antisymmetric(seed in 0u64..10_000, shift in -1.0f64..1.0) {
            let mut rng = stream_rng(seed, 3);
            let s = DMatrix::from_fn(3, 150, |_, _| std_normal(&mut rng) + shift);
            let a = summarize_samples(&s, 0, 0.95, 0.95).unwrap();
            let b = summarize_samples(&(-s), 0, 0.95, 0.95).unwrap();
            prop_assert_eq!(a.e_s.clone(), -b.e_s.clone());
            for i in 0..3 {
                prop_assert!(a.lower[i] <= a.mean[i] && a.mean[i] <= a.upper[i]);
                prop_assert!((a.e_s[i] - 2.0 * (a.p_plus[i] - 0.5)).abs() < 1e-15);
            }
        }

        #[test]
        fn gaussian_evidence_antisymmetric(m in -5.0f64..5.0, v in 0.01f64..4.0) {
            let a = summarize_gaussian(DVector::from_element(1, m), &DVector::from_element(1, v), 0, 0.95, 0.95).unwrap();
            let b = summarize_gaussian(DVector::from_element(1, -m), &DVector::from_element(1, v), 0, 0.95, 0.95).unwrap();
            prop_assert_eq!(a.e_s[0], -b.e_s[0]);
            prop_assert!((a.e_s[0] - 2.0 * (a.p_plus[0] - 0.5)).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&a.p_plus[0]));
        }
    }
}
