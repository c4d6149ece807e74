//! Data containers, the parameter state and the identifiability convention.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};

use crate::error::{Result, SimbaError};
use crate::kernel::{BasisSystem, SpatialDomain};
use crate::rng::{stream, stream_rng};

#[derive(Debug, Clone)]
pub struct Dataset {
    /// N×V responses.
    pub y: DMatrix<f64>,
    /// N×(J+1) covariates; column 0 is the intercept.
    pub x: DMatrix<f64>,
    pub domain: SpatialDomain,
    pub covariate_names: Vec<String>,
}

impl Dataset {
    pub fn new(y: DMatrix<f64>, x: DMatrix<f64>, domain: SpatialDomain) -> Result<Self> {
        let names = (0..x.ncols())
            .map(|j| if j == 0 { "intercept".to_string() } else { format!("x{j}") })
            .collect();
        Self::with_names(y, x, domain, names)
    }

    pub fn with_names(
        y: DMatrix<f64>,
        x: DMatrix<f64>,
        domain: SpatialDomain,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let (n, v) = y.shape();
        if n < 2 {
            return Err(SimbaError::data(format!("need at least 2 participants, got {n}")));
        }
        if x.nrows() != n {
            return Err(SimbaError::data(format!(
                "covariates have {} rows but responses have {n}",
                x.nrows()
            )));
        }
        if v != domain.n_voxels() {
            return Err(SimbaError::data(format!(
                "responses have {v} voxels but the domain has {}",
                domain.n_voxels()
            )));
        }
        if x.ncols() == 0 || x.column(0).iter().any(|&c| c != 1.0) {
            return Err(SimbaError::data("first covariate column must be identically 1"));
        }
        if covariate_names.len() != x.ncols() {
            return Err(SimbaError::data("covariate name count does not match columns"));
        }
        if let Some(p) = y.iter().position(|t| !t.is_finite()) {
            return Err(SimbaError::data(format!(
                "non-finite response at participant {}, voxel {}",
                p % n,
                p / n
            )));
        }
        if let Some(p) = x.iter().position(|t| !t.is_finite()) {
            return Err(SimbaError::data(format!("non-finite covariate at row {}", p % n)));
        }
        Ok(Dataset {
            y,
            x,
            domain,
            covariate_names,
        })
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_voxels(&self) -> usize {
        self.y.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    /// Rows `idx` as a new dataset sharing the domain.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let y = DMatrix::from_fn(idx.len(), self.n_voxels(), |i, v| self.y[(idx[i], v)]);
        let x = DMatrix::from_fn(idx.len(), self.n_covariates(), |i, j| self.x[(idx[i], j)]);
        Dataset::with_names(y, x, self.domain.clone(), self.covariate_names.clone())
    }
}

/// Responses projected onto the basis: row i is y_iᵀΦ.
#[derive(Debug, Clone)]
pub struct TransformedDataset {
    pub y_tilde: DMatrix<f64>,
    pub x: DMatrix<f64>,
    /// ‖y_i‖² in voxel space, kept for voxel-space prediction error.
    pub row_sqnorm: DVector<f64>,
    /// Σ_v y_i(v).
    pub row_sum: DVector<f64>,
    pub n_voxels: usize,
}

impl TransformedDataset {
    pub fn n(&self) -> usize {
        self.y_tilde.nrows()
    }

    pub fn l(&self) -> usize {
        self.y_tilde.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    /// Drops participant `i`.
    pub fn without_row(&self, i: usize) -> TransformedDataset {
        TransformedDataset {
            y_tilde: self.y_tilde.clone().remove_row(i),
            x: self.x.clone().remove_row(i),
            row_sqnorm: self.row_sqnorm.clone().remove_row(i),
            row_sum: self.row_sum.clone().remove_row(i),
            n_voxels: self.n_voxels,
        }
    }
}

pub fn transform_dataset(data: &Dataset, basis: &BasisSystem) -> Result<TransformedDataset> {
    if data.n_voxels() != basis.n_voxels() {
        return Err(SimbaError::data(format!(
            "dataset has {} voxels but basis has {}",
            data.n_voxels(),
            basis.n_voxels()
        )));
    }
    Ok(TransformedDataset {
        y_tilde: &data.y * &basis.phi,
        x: data.x.clone(),
        row_sqnorm: DVector::from_iterator(data.n(), data.y.row_iter().map(|r| r.norm_squared())),
        row_sum: DVector::from_iterator(data.n(), data.y.row_iter().map(|r| r.sum())),
        n_voxels: data.n_voxels(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorConfig {
    /// Half-Cauchy scale.
    pub a: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig { a: 100.0 }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.a > 0.0 && self.a.is_finite() {
            Ok(())
        } else {
            Err(SimbaError::config(format!("prior scale A must be positive, got {}", self.a)))
        }
    }

    pub fn inv_a2(&self) -> f64 {
        1.0 / (self.a * self.a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterState {
    pub alpha: DVector<f64>,
    /// (J+1)×L.
    pub theta_beta: DMatrix<f64>,
    /// N×L_η; empty (0×L_η) when participant effects are not stored.
    pub theta_eta: DMatrix<f64>,
    pub sigma2_alpha: f64,
    pub sigma2_beta: f64,
    pub sigma2_eta: f64,
    pub sigma2_eps: f64,
    pub a_alpha: f64,
    pub a_beta: f64,
    pub a_eta: f64,
    pub a_eps: f64,
    /// Constant removed from each β_j map by centering; the map is
    /// ΨΛ^{1/2}θ_βj − shift_j.
    pub beta_shift: DVector<f64>,
}

impl ParameterState {
    pub fn zeros(n: usize, p: usize, l: usize, l_eta: usize) -> Self {
        ParameterState {
            alpha: DVector::zeros(p),
            theta_beta: DMatrix::zeros(p, l),
            theta_eta: DMatrix::zeros(n, l_eta),
            sigma2_alpha: 1.0,
            sigma2_beta: 1.0,
            sigma2_eta: 1.0,
            sigma2_eps: 1.0,
            a_alpha: 1.0,
            a_beta: 1.0,
            a_eta: 1.0,
            a_eps: 1.0,
            beta_shift: DVector::zeros(p),
        }
    }

    /// α − shift: the coefficient on Φ̃ in the projected likelihood.
    pub fn alpha_effective(&self) -> DVector<f64> {
        &self.alpha - &self.beta_shift
    }

    pub fn is_valid(&self) -> bool {
        [
            self.sigma2_alpha,
            self.sigma2_beta,
            self.sigma2_eta,
            self.sigma2_eps,
            self.a_alpha,
            self.a_beta,
            self.a_eta,
            self.a_eps,
        ]
        .iter()
        .all(|&s| s > 0.0 && s.is_finite())
    }

    /// Voxel map of α_j + β_j(s_v).
    pub fn effect_map(&self, basis: &BasisSystem, j: usize) -> DVector<f64> {
        let theta = self.theta_beta.row(j).transpose();
        basis.reconstruct(&theta).add_scalar(self.alpha[j] - self.beta_shift[j])
    }
}

/// Coefficients drawn i.i.d. N(0, 0.1²), variances and auxiliaries at 1.
pub fn init_state(tdata: &TransformedDataset, basis: &BasisSystem, seed: u64) -> ParameterState {
    let mut rng = stream_rng(seed, stream::INIT);
    let nd = Normal::new(0.0, 0.1).expect("valid normal");
    let (n, p, l, le) = (tdata.n(), tdata.n_covariates(), basis.l(), basis.l_eta());
    let mut s = ParameterState::zeros(n, p, l, le);
    s.alpha = DVector::from_fn(p, |_, _| nd.sample(&mut rng));
    s.theta_beta = DMatrix::from_fn(p, l, |_, _| nd.sample(&mut rng));
    s.theta_eta = DMatrix::from_fn(n, le, |_, _| nd.sample(&mut rng));
    s
}

/// Moves each β_j voxel mean into α_j and centers participant effects.
///
/// Leaves x_iᵀα·1 + ΨΛ^{1/2}θ_βᵀx_i − x_iᵀshift unchanged and is idempotent.
pub fn apply_identifiability(state: &ParameterState, basis: &BasisSystem) -> ParameterState {
    let mut out = state.clone();
    center_in_place(&mut out, basis);
    out
}

pub fn center_in_place(state: &mut ParameterState, basis: &BasisSystem) {
    let c = basis.voxel_mean_readout();
    for j in 0..state.alpha.len() {
        let m = state.theta_beta.row(j).transpose().dot(&c) - state.beta_shift[j];
        state.alpha[j] += m;
        state.beta_shift[j] += m;
    }
    let n = state.theta_eta.nrows();
    if n > 0 {
        for mut col in state.theta_eta.column_iter_mut() {
            let mean = col.sum() / n as f64;
            col.add_scalar_mut(-mean);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{build_basis_system, select_inducing, nystrom_decompose, InducingStrategy, KernelConfig};
    use proptest::prelude::*;

    fn grid(n: usize) -> SpatialDomain {
        let raw = DMatrix::from_fn(n * n, 2, |i, k| if k == 0 { (i / n) as f64 } else { (i % n) as f64 });
        SpatialDomain::from_coords(raw).unwrap()
    }

    fn small_basis() -> BasisSystem {
        build_basis_system(&grid(6), &KernelConfig::default(), 12, 3, InducingStrategy::FarthestPoint, 0).unwrap()
    }

    fn ones_x(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { i as f64 - 1.0 })
    }

    #[test]
    fn zero_responses_project_to_zero() {
        let b = small_basis();
        let d = Dataset::new(DMatrix::zeros(3, 36), ones_x(3), grid(6)).unwrap();
        let t = transform_dataset(&d, &b).unwrap();
        assert_eq!(t.y_tilde, DMatrix::zeros(3, 12));
    }

    #[test]
    fn hand_computed_projection() {
        let psi = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let lam = DVector::from_vec(vec![4.0, 1.0]);
        let pe = DMatrix::from_row_slice(3, 1, &[1.0, 0.0, 0.0]);
        let b = BasisSystem::from_parts(psi, lam, pe, DVector::from_vec(vec![1.0]), vec![0, 1], vec![0]).unwrap();
        let dom = SpatialDomain::from_coords(DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0])).unwrap();
        let y = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let d = Dataset::new(y, DMatrix::from_element(2, 1, 1.0), dom).unwrap();
        let t = transform_dataset(&d, &b).unwrap();
        assert_eq!(t.y_tilde, DMatrix::from_row_slice(2, 2, &[0.5, 2.0, 2.0, 5.0]));
        assert_eq!(t.row_sqnorm.as_slice(), &[14.0, 77.0]);
        assert_eq!(t.row_sum.as_slice(), &[6.0, 15.0]);
    }

    #[test]
    fn full_rank_round_trip() {
        let dom = grid(5);
        let cfg = KernelConfig::matern(1.5, 0.3);
        let all: Vec<usize> = (0..25).collect();
        let r = nystrom_decompose(&dom, &all, &cfg, 25).unwrap();
        let b = BasisSystem::from_parts(r.psi.clone(), r.lambda.clone(), r.psi, r.lambda, all.clone(), all).unwrap();
        let z = DVector::from_fn(b.l(), |i, _| (i as f64 * 0.7).sin());
        let y = b.reconstruct(&z);
        let yt = b.phi.tr_mul(&y);
        let back = b.reconstruct(&yt);
        assert!((&back - &y).norm() / y.norm() < 1e-5);
    }

    #[test]
    fn round_trip_in_span() {
        let b = small_basis();
        let z = DVector::from_fn(b.l(), |i, _| 1.0 / (1.0 + i as f64));
        let y = &b.psi * &z;
        let back = b.reconstruct(&b.phi.tr_mul(&y));
        assert!((back - y).norm() < 1e-10);
    }

    #[test]
    fn dataset_validation() {
        let dom = grid(2);
        assert!(Dataset::new(DMatrix::zeros(1, 4), DMatrix::from_element(1, 1, 1.0), dom.clone()).is_err());
        assert!(Dataset::new(DMatrix::zeros(2, 4), DMatrix::from_element(2, 1, 2.0), dom.clone()).is_err());
        assert!(Dataset::new(DMatrix::zeros(2, 3), DMatrix::from_element(2, 1, 1.0), dom.clone()).is_err());
        let mut y = DMatrix::zeros(2, 4);
        y[(1, 2)] = f64::NAN;
        assert!(matches!(
            Dataset::new(y, DMatrix::from_element(2, 1, 1.0), dom),
            Err(SimbaError::Data(_))
        ));
    }

    #[test]
    fn init_is_seeded_and_valid() {
        let b = small_basis();
        let d = Dataset::new(DMatrix::zeros(4, 36), ones_x(4), grid(6)).unwrap();
        let t = transform_dataset(&d, &b).unwrap();
        let a = init_state(&t, &b, 3);
        assert_eq!(a, init_state(&t, &b, 3));
        assert_ne!(a, init_state(&t, &b, 4));
        assert!(a.is_valid());
        assert_eq!(a.theta_eta.shape(), (4, 3));
    }

    #[test]
    fn centering_examples() {
        let b = small_basis();
        let mut s = ParameterState::zeros(4, 2, b.l(), b.l_eta());
        s.theta_beta = DMatrix::from_fn(2, b.l(), |j, l| (j + l) as f64 * 0.1);
        s.theta_eta = DMatrix::from_fn(4, b.l_eta(), |i, l| (i * l) as f64).add_scalar(3.0);
        let c = apply_identifiability(&s, &b);
        for col in c.theta_eta.column_iter() {
            assert!(col.sum().abs() < 1e-12);
        }
        for j in 0..2 {
            let beta = b.reconstruct(&c.theta_beta.row(j).transpose()).add_scalar(-c.beta_shift[j]);
            assert!(beta.mean().abs() < 1e-8);
        }
        let again = apply_identifiability(&c, &b);
        assert!((again.alpha - &c.alpha).amax() < 1e-12);
        assert!((again.beta_shift - &c.beta_shift).amax() < 1e-12);
        assert!((again.theta_eta - &c.theta_eta).amax() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn centering_preserves_surface(vals in proptest::collection::vec(-3.0f64..3.0, 26), x1 in -2.0f64..2.0) {
            let dom = grid(6);
            let ind = select_inducing(&dom, 12, InducingStrategy::FarthestPoint, 0).unwrap();
            let r = nystrom_decompose(&dom, &ind, &KernelConfig::default(), 12).unwrap();
            let b = BasisSystem::from_parts(r.psi.clone(), r.lambda.clone(), r.psi, r.lambda, ind.clone(), ind).unwrap();
            let mut s = ParameterState::zeros(2, 2, 12, 12);
            s.alpha = DVector::from_vec(vals[..2].to_vec());
            s.theta_beta = DMatrix::from_row_slice(2, 12, &vals[2..]);
            let c = apply_identifiability(&s, &b);
            let surf = |st: &ParameterState| st.effect_map(&b, 0) + st.effect_map(&b, 1) * x1;
            prop_assert!((surf(&c) - surf(&s)).amax() < 1e-8);
            let cc = apply_identifiability(&c, &b);
            prop_assert!((cc.alpha - c.alpha).amax() < 1e-12);
        }
    }
}
