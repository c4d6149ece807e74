//! Matérn kernels, inducing-point selection and the Nyström spectral basis.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Result, SimbaError};
use crate::rng::{stream, stream_rng};

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialDomain {
    /// V×d, normalized so every component lies in [0, 1].
    pub coords: DMatrix<f64>,
    pub mask_shape: Option<Vec<usize>>,
    pub voxel_ids: Vec<usize>,
    /// Row-major flat grid index of each voxel when built from a mask.
    pub grid_flat: Option<Vec<usize>>,
}

impl SpatialDomain {
    /// Builds a domain from raw coordinates, shifting by the per-axis minimum
    /// and dividing by the largest axis span (aspect ratio is preserved).
    pub fn from_coords(raw: DMatrix<f64>) -> Result<Self> {
        Self::from_coords_with_shape(raw, None)
    }

    pub fn from_coords_with_shape(raw: DMatrix<f64>, mask_shape: Option<Vec<usize>>) -> Result<Self> {
        let (v, d) = raw.shape();
        if v == 0 || d == 0 {
            return Err(SimbaError::data("empty coordinate set"));
        }
        if let Some(pos) = raw.iter().position(|x| !x.is_finite()) {
            return Err(SimbaError::data(format!(
                "non-finite coordinate at row {}",
                pos % v
            )));
        }
        check_duplicates(&raw)?;
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for k in 0..d {
            for x in raw.column(k).iter() {
                lo[k] = lo[k].min(*x);
                hi[k] = hi[k].max(*x);
            }
        }
        let span = (0..d).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
        let scale = if span > 0.0 { 1.0 / span } else { 1.0 };
        let coords = DMatrix::from_fn(v, d, |i, k| (raw[(i, k)] - lo[k]) * scale);
        Ok(SpatialDomain {
            coords,
            mask_shape,
            voxel_ids: (0..v).collect(),
            grid_flat: None,
        })
    }

    /// In-mask voxels of a row-major grid, coordinates taken from grid indices.
    pub fn from_mask(shape: &[usize], mask: &[bool]) -> Result<Self> {
        let total: usize = shape.iter().product();
        if mask.len() != total {
            return Err(SimbaError::data(format!(
                "mask has {} entries but grid shape {:?} needs {}",
                mask.len(),
                shape,
                total
            )));
        }
        let d = shape.len();
        let flat: Vec<usize> = (0..total).filter(|&f| mask[f]).collect();
        if flat.is_empty() {
            return Err(SimbaError::data("mask has no in-mask voxels"));
        }
        let raw = DMatrix::from_fn(flat.len(), d, |i, k| grid_index(flat[i], shape)[k] as f64);
        let mut d = Self::from_coords_with_shape(raw, Some(shape.to_vec()))?;
        d.grid_flat = Some(flat);
        Ok(d)
    }

    pub fn n_voxels(&self) -> usize {
        self.coords.nrows()
    }

    pub fn dim(&self) -> usize {
        self.coords.ncols()
    }

    /// Flat row-major grid positions of the in-mask voxels, if grid-backed.
    pub fn grid_positions(&self) -> Option<&[usize]> {
        self.grid_flat.as_deref()
    }
}

fn grid_index(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for k in (0..shape.len()).rev() {
        idx[k] = flat % shape[k];
        flat /= shape[k];
    }
    idx
}

fn check_duplicates(raw: &DMatrix<f64>) -> Result<()> {
    let (v, d) = raw.shape();
    let mut order: Vec<usize> = (0..v).collect();
    let cmp = |a: &usize, b: &usize| {
        for k in 0..d {
            let c = raw[(*a, k)].total_cmp(&raw[(*b, k)]);
            if c != std::cmp::Ordering::Equal {
                return c;
            }
        }
        std::cmp::Ordering::Equal
    };
    order.sort_by(cmp);
    for w in order.windows(2) {
        if cmp(&w[0], &w[1]) == std::cmp::Ordering::Equal {
            return Err(SimbaError::data(format!(
                "duplicate coordinates at rows {} and {}",
                w[0].min(w[1]),
                w[0].max(w[1])
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    Matern,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelConfig {
    pub family: KernelFamily,
    pub nu: f64,
    pub length_scale: f64,
    pub nugget: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            family: KernelFamily::Matern,
            nu: 1.5,
            length_scale: 0.3,
            nugget: 1e-6,
        }
    }
}

impl KernelConfig {
    pub fn matern(nu: f64, length_scale: f64) -> Self {
        KernelConfig {
            nu,
            length_scale,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length_scale > 0.0) || !self.length_scale.is_finite() {
            return Err(SimbaError::config(format!(
                "kernel length scale must be positive, got {}",
                self.length_scale
            )));
        }
        if ![0.5, 1.5, 2.5].contains(&self.nu) {
            return Err(SimbaError::config(format!(
                "Matérn smoothness must be one of 0.5, 1.5, 2.5, got {}",
                self.nu
            )));
        }
        if !(self.nugget >= 0.0) {
            return Err(SimbaError::config("kernel nugget must be nonnegative"));
        }
        Ok(())
    }

    /// Kernel value at distance `r`; assumes a validated config.
    #[inline]
    fn eval(&self, r: f64) -> f64 {
        let t = r / self.length_scale;
        if self.nu == 0.5 {
            (-t).exp()
        } else if self.nu == 1.5 {
            let a = 3f64.sqrt() * t;
            (1.0 + a) * (-a).exp()
        } else {
            let a = 5f64.sqrt() * t;
            (1.0 + a + a * a / 3.0) * (-a).exp()
        }
    }
}

pub fn matern_kernel(r: f64, cfg: &KernelConfig) -> Result<f64> {
    cfg.validate()?;
    if !(r >= 0.0) {
        return Err(SimbaError::data(format!("distance must be nonnegative, got {r}")));
    }
    Ok(cfg.eval(r))
}

/// Cross-covariance matrix between two coordinate sets (rows are points).
pub fn gram(a: &DMatrix<f64>, b: &DMatrix<f64>, cfg: &KernelConfig) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    if a.ncols() != b.ncols() {
        return Err(SimbaError::data(format!(
            "coordinate dimension mismatch: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let (m, p, d) = (a.nrows(), b.nrows(), a.ncols());
    let mut data = vec![0.0; m * p];
    data.par_chunks_mut(m.max(1)).enumerate().for_each(|(j, col)| {
        for (i, out) in col.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in 0..d {
                let diff = a[(i, k)] - b[(j, k)];
                s += diff * diff;
            }
            *out = cfg.eval(s.sqrt());
        }
    });
    Ok(DMatrix::from_vec(m, p, data))
}

fn rows(coords: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), coords.ncols(), |i, k| coords[(idx[i], k)])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InducingStrategy {
    FarthestPoint,
    UniformRandom,
}

impl std::str::FromStr for InducingStrategy {
    type Err = SimbaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "farthest_point" | "farthest-point" => Ok(InducingStrategy::FarthestPoint),
            "uniform_random" | "uniform-random" => Ok(InducingStrategy::UniformRandom),
            other => Err(SimbaError::config(format!("unknown inducing strategy '{other}'"))),
        }
    }
}

impl std::fmt::Display for InducingStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InducingStrategy::FarthestPoint => "farthest_point",
            InducingStrategy::UniformRandom => "uniform_random",
        })
    }
}

/// Picks `l` distinct inducing locations.
///
/// Farthest-point: the voxel nearest the centroid anchors the search and is
/// the answer for `l = 1`. For `l >= 2` the first pick is the voxel farthest
/// from the anchor, then each pick maximizes the distance to the chosen set.
/// Ties go to the lowest index.
pub fn select_inducing(
    domain: &SpatialDomain,
    l: usize,
    strategy: InducingStrategy,
    seed: u64,
) -> Result<Vec<usize>> {
    let v = domain.n_voxels();
    if l == 0 || l > v {
        return Err(SimbaError::config(format!(
            "inducing count must be in 1..={v}, got {l}"
        )));
    }
    match strategy {
        InducingStrategy::UniformRandom => {
            let mut rng = stream_rng(seed, stream::INDUCING);
            Ok(rand::seq::index::sample(&mut rng, v, l).into_vec())
        }
        InducingStrategy::FarthestPoint => Ok(farthest_point(&domain.coords, l)),
    }
}

fn sqdist_to(coords: &DMatrix<f64>, i: usize, p: &[f64]) -> f64 {
    p.iter()
        .enumerate()
        .map(|(k, x)| (coords[(i, k)] - x).powi(2))
        .sum()
}

fn argmax(d: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in d.iter().enumerate() {
        if x > d[best] {
            best = i;
        }
    }
    best
}

fn farthest_point(coords: &DMatrix<f64>, l: usize) -> Vec<usize> {
    let (v, dim) = coords.shape();
    let centroid: Vec<f64> = (0..dim).map(|k| coords.column(k).mean()).collect();
    let dc: Vec<f64> = (0..v).map(|i| sqdist_to(coords, i, &centroid)).collect();
    let anchor = dc
        .iter()
        .enumerate()
        .fold(0, |b, (i, &x)| if x < dc[b] { i } else { b });
    if l == 1 {
        return vec![anchor];
    }
    let row = |i: usize| -> Vec<f64> { (0..dim).map(|k| coords[(i, k)]).collect() };
    let pa = row(anchor);
    let da: Vec<f64> = (0..v).map(|i| sqdist_to(coords, i, &pa)).collect();
    let first = argmax(&da);
    let mut chosen = vec![first];
    let pf = row(first);
    let mut d: Vec<f64> = (0..v).map(|i| sqdist_to(coords, i, &pf)).collect();
    while chosen.len() < l {
        let k = argmax(&d);
        chosen.push(k);
        let pk = row(k);
        for (i, di) in d.iter_mut().enumerate() {
            let dk = sqdist_to(coords, i, &pk);
            if dk < *di {
                *di = dk;
            }
        }
    }
    chosen
}

#[derive(Debug, Clone)]
pub struct NystromResult {
    pub psi: DMatrix<f64>,
    pub lambda: DVector<f64>,
    /// Number of rank-deficient directions removed.
    pub dropped: usize,
    pub jitter: f64,
}

const MAX_JITTER: f64 = 1e-4;
const RANK_TOL: f64 = 1e-12;

pub fn nystrom_decompose(
    domain: &SpatialDomain,
    inducing: &[usize],
    cfg: &KernelConfig,
    l: usize,
) -> Result<NystromResult> {
    if inducing.len() != l {
        return Err(SimbaError::config(format!(
            "expected {l} inducing indices, got {}",
            inducing.len()
        )));
    }
    if l == 0 || inducing.iter().any(|&i| i >= domain.n_voxels()) {
        return Err(SimbaError::config("inducing indices out of range"));
    }
    let sub = rows(&domain.coords, inducing);
    let k_l = gram(&sub, &sub, cfg)?;
    let k_vl = gram(&domain.coords, &sub, cfg)?;

    let mut jitter = cfg.nugget.max(1e-6);
    let chol = loop {
        let mut m = k_l.clone();
        for i in 0..l {
            m[(i, i)] += jitter;
        }
        if let Some(c) = m.cholesky() {
            break c;
        }
        if jitter >= MAX_JITTER * (1.0 - 1e-9) {
            return Err(SimbaError::numerical(format!(
                "Cholesky of the inducing Gram matrix failed at jitter {jitter:e}; inducing set {:?}",
                inducing
            )));
        }
        jitter *= 10.0;
    };
    if jitter > cfg.nugget.max(1e-6) {
        warn!("inducing Gram matrix needed jitter {jitter:e}");
    }

    // K̃ = K_VL R^{-T}  <=>  K̃ᵀ = R^{-1} K_LV
    let kt_t = chol
        .l_dirty()
        .solve_lower_triangular(&k_vl.transpose())
        .ok_or_else(|| SimbaError::numerical("triangular solve failed"))?;
    let kt = kt_t.transpose();

    // thin SVD via QR: K̃ = Q R, R = U D Wᵀ, Ψ = Q U
    let qr = kt.qr();
    let q = qr.q();
    let r = qr.r();
    let svd = r.svd(true, false);
    let u = svd
        .u
        .ok_or_else(|| SimbaError::numerical("SVD did not return left vectors"))?;
    let sv = svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));
    let lam_max = sv[order[0]].powi(2);
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&k| {
            let lam = sv[k].powi(2);
            lam > 0.0 && lam >= RANK_TOL * lam_max
        })
        .collect();
    let dropped = l - keep.len();
    if dropped > 0 {
        warn!("dropped {dropped} rank-deficient Nyström directions; L reduced to {}", keep.len());
    }
    let u_keep = DMatrix::from_fn(u.nrows(), keep.len(), |i, c| u[(i, keep[c])]);
    let mut psi = q * u_keep;
    // sign convention: largest-magnitude entry of each column positive
    for mut col in psi.column_iter_mut() {
        let m = col.iter().fold(0.0f64, |b, &x| if x.abs() > b.abs() { x } else { b });
        if m < 0.0 {
            col.neg_mut();
        }
    }
    let lambda = DVector::from_iterator(keep.len(), keep.iter().map(|&k| sv[k].powi(2)));
    Ok(NystromResult {
        psi,
        lambda,
        dropped,
        jitter,
    })
}

/// Low-rank spectral objects shared by both inference backends.
#[derive(Debug, Clone)]
pub struct BasisSystem {
    pub psi: DMatrix<f64>,
    pub lambda: DVector<f64>,
    pub psi_eta: DMatrix<f64>,
    pub lambda_eta: DVector<f64>,
    /// Φ = ΨΛ^{-1/2}, V×L.
    pub phi: DMatrix<f64>,
    /// Φ_η = Λ̃^{1/2}Ψ̃ᵀΨΛ^{-1/2}, L_η×L.
    pub phi_eta: DMatrix<f64>,
    /// 1ᵀΦ as a length-L vector.
    pub ones_phi: DVector<f64>,
    pub inducing_indices: Vec<usize>,
    pub inducing_indices_eta: Vec<usize>,
}

impl BasisSystem {
    /// Assembles the projections from precomputed spectra.
    pub fn from_parts(
        psi: DMatrix<f64>,
        lambda: DVector<f64>,
        psi_eta: DMatrix<f64>,
        lambda_eta: DVector<f64>,
        inducing_indices: Vec<usize>,
        inducing_indices_eta: Vec<usize>,
    ) -> Result<Self> {
        let l = lambda.len();
        let le = lambda_eta.len();
        if psi.ncols() != l || psi_eta.ncols() != le || psi.nrows() != psi_eta.nrows() {
            return Err(SimbaError::data("basis shape mismatch"));
        }
        if le > l {
            return Err(SimbaError::config(format!("L_eta ({le}) exceeds L ({l})")));
        }
        if lambda.iter().chain(lambda_eta.iter()).any(|&x| !(x > 0.0)) {
            return Err(SimbaError::numerical("eigenvalues must be strictly positive"));
        }
        let inv_sqrt = lambda.map(|x| 1.0 / x.sqrt());
        let mut phi = psi.clone();
        for (c, mut col) in phi.column_iter_mut().enumerate() {
            col *= inv_sqrt[c];
        }
        let mut phi_eta = psi_eta.tr_mul(&phi);
        for (r, mut row) in phi_eta.row_iter_mut().enumerate() {
            row *= lambda_eta[r].sqrt();
        }
        let ones_phi = DVector::from_iterator(l, phi.column_iter().map(|c| c.sum()));
        Ok(BasisSystem {
            psi,
            lambda,
            psi_eta,
            lambda_eta,
            phi,
            phi_eta,
            ones_phi,
            inducing_indices,
            inducing_indices_eta,
        })
    }

    pub fn n_voxels(&self) -> usize {
        self.psi.nrows()
    }

    pub fn l(&self) -> usize {
        self.lambda.len()
    }

    pub fn l_eta(&self) -> usize {
        self.lambda_eta.len()
    }

    /// Vector c with c·θ = mean over voxels of ΨΛ^{1/2}θ.
    pub fn voxel_mean_readout(&self) -> DVector<f64> {
        let v = self.n_voxels() as f64;
        self.lambda.component_mul(&self.ones_phi) / v
    }

    /// ΨΛ^{1/2}θ for a length-L coefficient vector.
    pub fn reconstruct(&self, theta: &DVector<f64>) -> DVector<f64> {
        let scaled = theta.component_mul(&self.lambda.map(f64::sqrt));
        &self.psi * scaled
    }

    /// Ψ Λ^{1/2} as a dense V×L matrix.
    pub fn psi_sqrt_lambda(&self) -> DMatrix<f64> {
        let mut m = self.psi.clone();
        for (c, mut col) in m.column_iter_mut().enumerate() {
            col *= self.lambda[c].sqrt();
        }
        m
    }

    /// Ψ̃ Λ̃^{1/2} as a dense V×L_η matrix.
    pub fn psi_eta_sqrt_lambda(&self) -> DMatrix<f64> {
        let mut m = self.psi_eta.clone();
        for (c, mut col) in m.column_iter_mut().enumerate() {
            col *= self.lambda_eta[c].sqrt();
        }
        m
    }
}

/// L_η = ⌊0.1 L⌋, at least 1.
pub fn default_l_eta(l: usize) -> usize {
    (l / 10).max(1)
}

pub fn build_basis_system(
    domain: &SpatialDomain,
    cfg: &KernelConfig,
    l: usize,
    l_eta: usize,
    strategy: InducingStrategy,
    seed: u64,
) -> Result<BasisSystem> {
    cfg.validate()?;
    if l_eta == 0 || l_eta > l || l > domain.n_voxels() {
        return Err(SimbaError::config(format!(
            "need 1 <= L_eta <= L <= V, got L_eta={l_eta}, L={l}, V={}",
            domain.n_voxels()
        )));
    }
    let ind = select_inducing(domain, l, strategy, seed)?;
    let ind_eta = select_inducing(domain, l_eta, strategy, seed ^ stream::INDUCING_ETA)?;
    let main = nystrom_decompose(domain, &ind, cfg, l)?;
    let eta = nystrom_decompose(domain, &ind_eta, cfg, l_eta)?;
    if eta.lambda.len() > main.lambda.len() {
        return Err(SimbaError::numerical(
            "η basis retained more directions than the main basis",
        ));
    }
    BasisSystem::from_parts(main.psi, main.lambda, eta.psi, eta.lambda, ind, ind_eta)
}
