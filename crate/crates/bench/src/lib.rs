//! Fixtures shared by the benchmarks.

use grasp_core::identify::ProbePair;
use grasp_core::rng;
use grasp_core::{Matrix, ProjectionPlan};

/// Gaussian matrix with a dominant planted rank-1 term, so power iteration
/// converges at a realistic rate.
pub fn spiked_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = rng::substream(seed, "bench-matrix");
    let mut m = rng::gaussian_matrix(&mut r, rows, cols, 1.0);
    let u = rng::unit_vector(&mut r, rows);
    let v = rng::unit_vector(&mut r, cols);
    let spike = 4.0 * ((rows * cols) as f64).sqrt();
    m.axpy(1.0, &Matrix::outer(u.as_slice(), v.as_slice(), spike))
        .expect("same shape");
    m
}

pub fn random_probe(rows: usize, cols: usize, site: usize, seed: u64) -> ProbePair {
    let mut r = rng::keyed(seed, "bench-probe", site as u64);
    ProbePair::new(
        rng::unit_vector(&mut r, rows),
        rng::unit_vector(&mut r, cols),
        1.0,
        site,
    )
    .expect("valid probe")
}

/// One probe per site, all sites `dim × dim`.
pub fn per_site_plan(sites: usize, dim: usize, seed: u64) -> ProjectionPlan {
    let probes = (0..sites).map(|l| random_probe(dim, dim, l, seed)).collect();
    ProjectionPlan::per_site(probes).expect("disjoint sites")
}
