//! Shared fixtures for the benchmarks.

use simba_core::kernel::{build_basis_system, default_l_eta, BasisSystem, InducingStrategy, KernelConfig};
use simba_core::model::{transform_dataset, TransformedDataset};
use simba_core::simstudy::{make_truth, phantom_domain, simulate_dataset, SimScenario, TruthConfig};

/// Phantom data with N participants projected on an L-dimensional basis.
pub fn phantom_fixture(n: usize, l: usize) -> (BasisSystem, TransformedDataset) {
    let domain = phantom_domain().expect("phantom domain");
    let truth = make_truth(&domain, &TruthConfig::default()).expect("truth");
    let sc = SimScenario::new(n, 2.0, 1, 7);
    let sim = simulate_dataset(&domain, &truth, &sc, 0, None).expect("simulated data");
    let basis = build_basis_system(
        &domain,
        &KernelConfig::matern(0.5, 0.3),
        l,
        default_l_eta(l),
        InducingStrategy::FarthestPoint,
        1,
    )
    .expect("basis");
    let t = transform_dataset(&sim.data, &basis).expect("projection");
    (basis, t)
}
