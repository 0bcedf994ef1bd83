//! Unsupervised probe extraction and the identification bound.
//!
//! The probe is the top singular pair of an accumulated update. Against a
//! planted truth its quality is `|u·u_S|·|v·v_S|`, which is bounded below by
//! `1 − 2‖μ_T‖_F/(ᾱ√r_T) − c·τ/(ᾱ√N)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{top1_svd, Matrix, SvdTriple, UnitVector, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::synthgrad::{accumulate_stream, SpuriousSpec, SynthConfig};

/// Default constant on the noise term of the bound.
pub const DEFAULT_NOISE_CONST: f64 = 3.0;

/// A frozen top-1 singular pair for one adapter site.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbePair {
    u: UnitVector,
    v: UnitVector,
    sigma: f64,
    site_id: usize,
}

impl ProbePair {
    pub fn new(u: UnitVector, v: UnitVector, sigma: f64, site_id: usize) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::Parameter(format!(
                "probe sigma must be non-negative, got {sigma}"
            )));
        }
        Ok(ProbePair { u, v, sigma, site_id })
    }

    pub fn from_triple(t: SvdTriple, site_id: usize) -> Self {
        ProbePair {
            u: t.u,
            v: t.v,
            sigma: t.sigma,
            site_id,
        }
    }

    pub fn u(&self) -> &UnitVector {
        &self.u
    }

    pub fn v(&self) -> &UnitVector {
        &self.v
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn site_id(&self) -> usize {
        self.site_id
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.u.dim(), self.v.dim())
    }

    /// `u vᵀ`
    pub fn direction(&self) -> Matrix {
        Matrix::outer(self.u.as_slice(), self.v.as_slice(), 1.0)
    }

    /// Same subspace, opposite orientation.
    pub fn flipped(&self) -> Self {
        ProbePair {
            u: self.u.negated(),
            v: self.v.negated(),
            ..self.clone()
        }
    }
}

pub fn extract_probe(delta_w: &Matrix, site_id: usize) -> Result<ProbePair> {
    let t = top1_svd(delta_w, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    Ok(ProbePair::from_triple(t, site_id))
}

/// `|u·u_S| · |v·v_S|`
pub fn alignment(probe: &ProbePair, truth: &SpuriousSpec) -> Result<f64> {
    let (u_dot, v_dot) = overlaps(probe, truth)?;
    Ok(u_dot * v_dot)
}

/// Per-vector absolute overlaps `(|u·u_S|, |v·v_S|)`.
pub fn overlaps(probe: &ProbePair, truth: &SpuriousSpec) -> Result<(f64, f64)> {
    if probe.shape() != truth.shape() {
        return Err(Error::Parameter(format!(
            "probe is {:?} but truth is {:?}",
            probe.shape(),
            truth.shape()
        )));
    }
    Ok((probe.u.dot(&truth.u_s).abs(), probe.v.dot(&truth.v_s).abs()))
}

/// The two error sources of the identification bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub structural_term: f64,
    pub noise_term: f64,
    pub noise_const: f64,
    pub bound_value: f64,
    pub n: usize,
}

pub fn alignment_bound(
    alpha_mean: f64,
    mu_frob: f64,
    r_t: usize,
    tau: f64,
    n: usize,
    noise_const: f64,
) -> Result<BoundReport> {
    if !(alpha_mean > 0.0) || !(mu_frob >= 0.0) || !(tau >= 0.0) || !(noise_const >= 0.0) || r_t == 0 || n == 0 {
        return Err(Error::Parameter(format!(
            "invalid bound inputs: alpha_mean={alpha_mean} mu_frob={mu_frob} r_t={r_t} tau={tau} n={n} c={noise_const}"
        )));
    }
    let structural_term = 2.0 * mu_frob / (alpha_mean * (r_t as f64).sqrt());
    let noise_term = tau / (alpha_mean * (n as f64).sqrt());
    Ok(BoundReport {
        structural_term,
        noise_term,
        noise_const,
        bound_value: 1.0 - structural_term - noise_const * noise_term,
        n,
    })
}

/// Cartesian grid for [`identification_sweep`]. `ratio` is `ᾱ/‖μ_T‖_F`;
/// `ᾱ` stays at the base value and `‖μ_T‖_F` is derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentifyGrid {
    pub base: SynthConfig,
    pub n: Vec<usize>,
    pub r_t: Vec<usize>,
    pub ratio: Vec<f64>,
    pub tau: Vec<f64>,
    pub noise_const: f64,
}

impl Default for IdentifyGrid {
    fn default() -> Self {
        let base = SynthConfig::default();
        IdentifyGrid {
            base,
            n: vec![base.n],
            r_t: vec![base.r_t],
            ratio: vec![base.alpha_mean / base.mu_frob],
            tau: vec![base.tau],
            noise_const: DEFAULT_NOISE_CONST,
        }
    }
}

impl IdentifyGrid {
    /// Grid points in deterministic order (n outermost, tau innermost).
    pub fn points(&self) -> Result<Vec<SynthConfig>> {
        let mut out = Vec::new();
        for &n in &self.n {
            for &r_t in &self.r_t {
                for &ratio in &self.ratio {
                    for &tau in &self.tau {
                        out.push(SynthConfig {
                            n,
                            r_t,
                            tau,
                            mu_frob: self.base.alpha_mean / ratio,
                            ..self.base
                        });
                    }
                }
            }
        }
        if out.is_empty() {
            return Err(Error::Parameter("sweep grid is empty".into()));
        }
        for p in &out {
            p.validate()?;
            if !p.surprise_valid() {
                return Err(Error::NotSurpriseValid(format!(
                    "grid point n={} r_t={} alpha_mean={} mu_frob={} tau={} violates alpha_mean >= 10*mu_frob and alpha_mean >= 10*tau/sqrt(n)",
                    p.n, p.r_t, p.alpha_mean, p.mu_frob, p.tau
                )));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifyRow {
    pub d_out: usize,
    pub d_in: usize,
    pub n: usize,
    pub r_t: usize,
    pub alpha_mean: f64,
    pub mu_frob: f64,
    pub tau: f64,
    pub seed: u64,
    pub alignment: f64,
    pub bound_value: f64,
    pub surprise_valid: bool,
    pub u_overlap: f64,
    pub v_overlap: f64,
}

impl IdentifyRow {
    pub fn misalignment(&self) -> f64 {
        1.0 - self.alignment
    }
}

/// Measured alignment and bound for one configuration and seed.
pub fn identify_once(cfg: &SynthConfig, seed: u64, noise_const: f64) -> Result<IdentifyRow> {
    let (spurious, task) = cfg.build(seed)?;
    let delta = accumulate_stream(&spurious, &task, seed, cfg.n)?;
    let probe = extract_probe(&delta, 0)?;
    let (u_overlap, v_overlap) = overlaps(&probe, &spurious)?;
    let bound = alignment_bound(cfg.alpha_mean, cfg.mu_frob, cfg.r_t, cfg.tau, cfg.n, noise_const)?;
    Ok(IdentifyRow {
        d_out: cfg.d_out,
        d_in: cfg.d_in,
        n: cfg.n,
        r_t: cfg.r_t,
        alpha_mean: cfg.alpha_mean,
        mu_frob: cfg.mu_frob,
        tau: cfg.tau,
        seed,
        alignment: u_overlap * v_overlap,
        bound_value: bound.bound_value,
        surprise_valid: cfg.surprise_valid(),
        u_overlap,
        v_overlap,
    })
}

/// One row per (grid point, seed), grid-major. Jobs run in parallel; the
/// output order does not depend on scheduling.
pub fn identification_sweep(grid: &IdentifyGrid, seeds: &[u64]) -> Result<Vec<IdentifyRow>> {
    if seeds.is_empty() {
        return Err(Error::Parameter("no seeds given".into()));
    }
    let points = grid.points()?;
    let jobs: Vec<(SynthConfig, u64)> = points
        .iter()
        .flat_map(|p| seeds.iter().map(move |&s| (*p, s)))
        .collect();
    jobs.par_iter()
        .map(|(cfg, seed)| identify_once(cfg, *seed, grid.noise_const))
        .collect()
}

/// Smallest noise constant that would make every row satisfy the bound.
/// Rows with `τ = 0` carry no information about the constant.
pub fn fit_noise_const(rows: &[IdentifyRow]) -> f64 {
    rows.iter()
        .filter(|r| r.tau > 0.0)
        .map(|r| {
            let structural = 2.0 * r.mu_frob / (r.alpha_mean * (r.r_t as f64).sqrt());
            let noise = r.tau / (r.alpha_mean * (r.n as f64).sqrt());
            (1.0 - structural - r.alignment) / noise
        })
        .fold(0.0, f64::max)
}

/// Seed-averaged misalignment `1 − alignment` per grid point, in grid order.
pub fn mean_misalignment_by_point(rows: &[IdentifyRow], seeds_per_point: usize) -> Vec<f64> {
    rows.chunks(seeds_per_point)
        .map(|c| c.iter().map(IdentifyRow::misalignment).sum::<f64>() / c.len() as f64)
        .collect()
}
