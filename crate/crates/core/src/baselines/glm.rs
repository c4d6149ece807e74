use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Result, SimbaError};
use crate::model::Dataset;
use crate::summaries::EffectMap;

pub const DEFAULT_FDR: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct GlmCovariate {
    pub coef: DVector<f64>,
    pub se: DVector<f64>,
    pub t: DVector<f64>,
    pub p: DVector<f64>,
    pub p_adj: DVector<f64>,
    pub sign: DVector<f64>,
    pub e_s: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct GlmResult {
    pub covariates: Vec<GlmCovariate>,
    pub df: usize,
}

impl GlmResult {
    /// Effect map view; P⁺ is set to (1 + E_s)/2 so the map invariants hold.
    pub fn effect_map(&self, j: usize, threshold: f64) -> EffectMap {
        let c = &self.covariates[j];
        EffectMap {
            covariate: j,
            mean: c.coef.clone(),
            lower: c.lower.clone(),
            upper: c.upper.clone(),
            p_plus: c.e_s.map(|e| 0.5 * (1.0 + e)),
            e_s: c.e_s.clone(),
            active: c.e_s.iter().map(|e| e.abs() > threshold).collect(),
            threshold,
        }
    }

    pub fn effect_maps(&self, threshold: f64) -> Vec<EffectMap> {
        (0..self.covariates.len()).map(|j| self.effect_map(j, threshold)).collect()
    }
}

/// Benjamini–Hochberg step-up adjustment. Returns adjusted p-values (in input
/// order) and the rejection mask at level `q`. NaN inputs are treated as 1.
pub fn bh_adjust(p_values: &[f64], q: f64) -> (Vec<f64>, Vec<bool>) {
    let m = p_values.len();
    let clean: Vec<f64> = p_values
        .iter()
        .map(|&p| if p.is_nan() { 1.0 } else { p.clamp(0.0, 1.0) })
        .collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| clean[a].total_cmp(&clean[b]));
    let mut adj = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (0..m).rev() {
        let i = order[rank];
        running = running.min(clean[i] * (m as f64 / (rank + 1) as f64));
        adj[i] = running.min(1.0);
    }
    let reject = adj.iter().map(|&a| a <= q).collect();
    (adj, reject)
}

/// Ordinary least squares at every voxel with t-based inference.
pub fn glm_fit(data: &Dataset) -> Result<GlmResult> {
    let (n, p) = data.x.shape();
    if n <= p {
        return Err(SimbaError::data(format!(
            "GLM needs more participants ({n}) than covariates ({p})"
        )));
    }
    let xtx = data.x.tr_mul(&data.x);
    let chol = xtx
        .cholesky()
        .ok_or_else(|| SimbaError::data("covariate matrix is rank deficient"))?;
    let xtx_inv = chol.inverse();
    let b = chol.solve(&data.x.tr_mul(&data.y));
    let resid = &data.y - &data.x * &b;
    let df = n - p;
    let s2: DVector<f64> = DVector::from_iterator(
        resid.ncols(),
        resid.column_iter().map(|c| c.norm_squared() / df as f64),
    );
    let tdist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| SimbaError::numerical(e.to_string()))?;
    let tcrit = tdist.inverse_cdf(0.975);
    let mut covariates = Vec::with_capacity(p);
    for j in 0..p {
        let coef = b.row(j).transpose();
        let se = s2.map(|s| (s * xtx_inv[(j, j)]).sqrt());
        let t = coef.zip_map(&se, |c, s| if s > 0.0 { c / s } else if c == 0.0 { 0.0 } else { c.signum() * f64::INFINITY });
        let pv = t.map(|t| {
            if t.is_infinite() {
                0.0
            } else {
                (2.0 * (1.0 - tdist.cdf(t.abs()))).clamp(0.0, 1.0)
            }
        });
        let (adj, _) = bh_adjust(pv.as_slice(), DEFAULT_FDR);
        let p_adj = DVector::from_vec(adj);
        let sign = coef.map(|c| if c < 0.0 { -1.0 } else { 1.0 });
        let e_s = sign.zip_map(&p_adj, |s, a| s * (1.0 - a));
        let lower = coef.zip_map(&se, |c, s| c - tcrit * s);
        let upper = coef.zip_map(&se, |c, s| c + tcrit * s);
        covariates.push(GlmCovariate { coef, se, t, p: pv, p_adj, sign, e_s, lower, upper });
    }
    Ok(GlmResult { covariates, df })
}

/// x_iᵀB̂ at every voxel (N×V).
pub fn glm_predict(fit: &GlmResult, x: &DMatrix<f64>) -> DMatrix<f64> {
    let p = fit.covariates.len();
    let v = fit.covariates[0].coef.len();
    let b = DMatrix::from_fn(p, v, |j, k| fit.covariates[j].coef[k]);
    x * b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::SpatialDomain;
    use crate::rng::{std_normal, stream_rng};
    use proptest::prelude::*;

    fn line(v: usize) -> SpatialDomain {
        SpatialDomain::from_coords(DMatrix::from_fn(v, 1, |i, _| i as f64)).unwrap()
    }

    #[test]
    fn bh_examples() {
        let (adj, rej) = bh_adjust(&[0.01, 0.02, 0.03, 0.04], 0.05);
        assert!(rej.iter().all(|&r| r));
        assert!(adj.iter().all(|&a| (a - 0.04).abs() < 1e-15));
        let (adj, rej) = bh_adjust(&[1.0, 1.0, 1.0], 0.05);
        assert_eq!(adj, vec![1.0; 3]);
        assert!(rej.iter().all(|&r| !r));
        let (adj, rej) = bh_adjust(&[0.03], 0.05);
        assert_eq!(adj, vec![0.03]);
        assert!(rej[0]);
    }

    #[test]
    fn exact_linear_data() {
        let n = 6;
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let y = DMatrix::from_fn(n, 2, |i, v| 2.0 + (v as f64 + 1.0) * i as f64);
        let d = Dataset::new(y, x, line(2)).unwrap();
        let g = glm_fit(&d).unwrap();
        assert!((g.covariates[1].coef[1] - 2.0).abs() < 1e-10);
        assert!((g.covariates[0].coef[0] - 2.0).abs() < 1e-10);
        assert!(g.covariates[1].p[0] < 1e-10);
    }

    #[test]
    fn hand_normal_equations() {
        // N=4, J=1: x = (0,1,2,3), y = (1,3,2,5)
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let y = DMatrix::from_row_slice(4, 1, &[1.0, 3.0, 2.0, 5.0]);
        let g = glm_fit(&Dataset::new(y, x, line(1)).unwrap()).unwrap();
        // XᵀX = [[4,6],[6,14]], Xᵀy = (11, 22): slope = (4·22 − 6·11)/(4·14 − 36) = 1.1, intercept = 1.1
        assert!((g.covariates[1].coef[0] - 1.1).abs() < 1e-10);
        assert!((g.covariates[0].coef[0] - 1.1).abs() < 1e-10);
    }

    #[test]
    fn null_p_values_uniform() {
        let (n, v) = (20, 10_000);
        let mut rng = stream_rng(7, 0);
        let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { std_normal(&mut rng) });
        let y = DMatrix::from_fn(n, v, |_, _| std_normal(&mut rng));
        let g = glm_fit(&Dataset::new(y, x, line(v)).unwrap()).unwrap();
        let mut p: Vec<f64> = g.covariates[1].p.iter().copied().collect();
        p.sort_by(f64::total_cmp);
        let ks = p
            .iter()
            .enumerate()
            .map(|(i, &pi)| ((i + 1) as f64 / v as f64 - pi).abs().max((pi - i as f64 / v as f64).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "KS {ks}");
    }

    #[test]
    fn ci_coverage_on_model_data() {
        let (n, v) = (30, 10_000);
        let mut rng = stream_rng(8, 0);
        let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { std_normal(&mut rng) });
        let beta: Vec<f64> = (0..v).map(|k| (k as f64 * 0.01).sin()).collect();
        let y = DMatrix::from_fn(n, v, |i, k| 0.5 + x[(i, 1)] * beta[k] + 2.0 * std_normal(&mut rng));
        let g = glm_fit(&Dataset::new(y, x, line(v)).unwrap()).unwrap();
        let c = &g.covariates[1];
        let cover = (0..v).filter(|&k| c.lower[k] <= beta[k] && beta[k] <= c.upper[k]).count() as f64 / v as f64;
        assert!((0.92..=0.98).contains(&cover), "coverage {cover}");
        for k in 0..v {
            assert!(c.p_adj[k] >= c.p[k]);
            assert!((c.e_s[k] - c.sign[k] * (1.0 - c.p_adj[k])).abs() < 1e-15);
        }
    }

    #[test]
    fn rank_deficient_rejected() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let d = Dataset::new(DMatrix::zeros(4, 1), x, line(1)).unwrap();
        assert!(matches!(glm_fit(&d), Err(SimbaError::Data(_))));
    }

    proptest! {
        #[test]
        fn bh_permutation_invariant(p in proptest::collection::vec(0.0f64..=1.0, 1..40), rot in 0usize..40) {
            let (adj, _) = bh_adjust(&p, 0.05);
            let k = rot % p.len();
            let mut q = p.clone();
            q.rotate_left(k);
            let (adj_q, _) = bh_adjust(&q, 0.05);
            let mut adj_rot = adj.clone();
            adj_rot.rotate_left(k);
            prop_assert_eq!(adj_rot, adj_q);
            for (a, b) in adj.iter().zip(&p) {
                prop_assert!(a >= b);
            }
        }
    }
}
