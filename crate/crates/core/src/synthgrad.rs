//! Synthetic per-example gradient streams with a planted rank-1 spurious
//! factor.
//!
//! Each sample is `g = α u_S v_Sᵀ + μ_T + ξ`, where `α` is drawn uniformly
//! from `ᾱ(1 ± jitter)`, `μ_T` is a fixed task mean with `r_T` equal singular
//! values, and `ξ` has iid Gaussian entries with `E‖ξ‖²_F = τ²`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix, UnitVector};
use crate::rng;

/// Orientation of the task mean relative to the planted spurious direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskOverlap {
    /// Task modes drawn independently of `(u_S, v_S)`.
    #[default]
    Independent,
    /// Every task mode orthogonal to `u_S` (left) and `v_S` (right).
    Orthogonal,
    /// The leading task mode is tilted 45° toward `u_S` and `v_S`; the rest
    /// are orthogonal. This is the worst case the operator-norm term of the
    /// identification bound describes.
    Tilted,
}

/// Planted ground truth for the spurious factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SpuriousSpec {
    pub u_s: UnitVector,
    pub v_s: UnitVector,
    pub alpha_mean: f64,
    pub alpha_jitter: f64,
}

impl SpuriousSpec {
    pub fn new(u_s: UnitVector, v_s: UnitVector, alpha_mean: f64, alpha_jitter: f64) -> Result<Self> {
        if !(alpha_mean > 0.0) || !alpha_mean.is_finite() {
            return Err(Error::Parameter(format!(
                "alpha_mean must be positive, got {alpha_mean}"
            )));
        }
        if !(0.0..1.0).contains(&alpha_jitter) {
            return Err(Error::Parameter(format!(
                "alpha_jitter must lie in [0, 1), got {alpha_jitter}"
            )));
        }
        Ok(SpuriousSpec {
            u_s,
            v_s,
            alpha_mean,
            alpha_jitter,
        })
    }

    /// Random spurious directions from the `spurious` sub-stream of `seed`.
    pub fn random(d_out: usize, d_in: usize, alpha_mean: f64, alpha_jitter: f64, seed: u64) -> Result<Self> {
        let mut r = rng::substream(seed, "spurious");
        let u_s = rng::unit_vector(&mut r, d_out);
        let v_s = rng::unit_vector(&mut r, d_in);
        SpuriousSpec::new(u_s, v_s, alpha_mean, alpha_jitter)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.u_s.dim(), self.v_s.dim())
    }

    /// `u_S v_Sᵀ`
    pub fn direction(&self) -> Matrix {
        Matrix::outer(self.u_s.as_slice(), self.v_s.as_slice(), 1.0)
    }
}

/// Task mean plus noise scale.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub mu_t: Matrix,
    pub r_t: usize,
    pub mu_frob: f64,
    pub tau: f64,
}

impl TaskSpec {
    pub fn new(mu_t: Matrix, r_t: usize, mu_frob: f64, tau: f64) -> Result<Self> {
        if !(tau >= 0.0) || !tau.is_finite() {
            return Err(Error::Parameter(format!("tau must be non-negative, got {tau}")));
        }
        let frob = mu_t.frobenius_norm();
        if (frob - mu_frob).abs() > 1e-9 * mu_frob {
            return Err(Error::Parameter(format!(
                "task mean has Frobenius norm {frob}, expected {mu_frob}"
            )));
        }
        Ok(TaskSpec {
            mu_t,
            r_t,
            mu_frob,
            tau,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mu_t.shape()
    }
}

/// One per-example gradient with its known decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSample {
    pub g: Matrix,
    pub g_spurious: Matrix,
    pub g_task: Matrix,
    pub alpha: f64,
}

/// Full description of a synthetic stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub d_out: usize,
    pub d_in: usize,
    pub n: usize,
    pub alpha_mean: f64,
    pub alpha_jitter: f64,
    pub mu_frob: f64,
    pub r_t: usize,
    pub tau: f64,
    pub overlap: TaskOverlap,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            d_out: 64,
            d_in: 64,
            n: 1000,
            alpha_mean: 100.0,
            alpha_jitter: 0.2,
            mu_frob: 1.0,
            r_t: 16,
            tau: 1.0,
            overlap: TaskOverlap::Independent,
        }
    }
}

impl SynthConfig {
    /// The surprise regime: `ᾱ ≥ 10‖μ_T‖_F` and `ᾱ ≥ 10τ/√N`.
    pub fn surprise_valid(&self) -> bool {
        surprise_valid(self.alpha_mean, self.mu_frob, self.tau, self.n)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_out == 0 || self.d_in == 0 || self.n == 0 {
            return Err(Error::Parameter("dimensions and n must be positive".into()));
        }
        if self.r_t == 0 || self.r_t > self.d_out.min(self.d_in) {
            return Err(Error::Parameter(format!(
                "r_t = {} outside [1, {}]",
                self.r_t,
                self.d_out.min(self.d_in)
            )));
        }
        if !(self.mu_frob > 0.0) {
            return Err(Error::Parameter(format!(
                "mu_frob must be positive, got {}",
                self.mu_frob
            )));
        }
        Ok(())
    }

    /// Planted truth for `seed`: spurious directions and task mean.
    pub fn build(&self, seed: u64) -> Result<(SpuriousSpec, TaskSpec)> {
        self.validate()?;
        let spurious = SpuriousSpec::random(self.d_out, self.d_in, self.alpha_mean, self.alpha_jitter, seed)?;
        let mu = match self.overlap {
            TaskOverlap::Independent => make_task_mean(self.d_out, self.d_in, self.r_t, self.mu_frob, seed)?,
            overlap => make_task_mean_relative(&spurious, self.r_t, self.mu_frob, overlap, seed)?,
        };
        let task = TaskSpec::new(mu, self.r_t, self.mu_frob, self.tau)?;
        Ok((spurious, task))
    }
}

pub fn surprise_valid(alpha_mean: f64, mu_frob: f64, tau: f64, n: usize) -> bool {
    alpha_mean >= 10.0 * mu_frob && alpha_mean >= 10.0 * tau / (n as f64).sqrt()
}

/// Orthonormal vectors by Gram–Schmidt on Gaussian draws, each also
/// orthogonal to everything in `against`.
fn orthonormal_set<R: Rng + ?Sized>(r: &mut R, dim: usize, count: usize, against: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = against.to_vec();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut x = rng::gaussian_vec(r, dim);
        // two passes for numerical orthogonality
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&x, b);
                for (xi, bi) in x.iter_mut().zip(b) {
                    *xi -= c * bi;
                }
            }
        }
        let n = norm(&x);
        if n < 1e-8 {
            continue;
        }
        x.iter_mut().for_each(|xi| *xi /= n);
        basis.push(x.clone());
        out.push(x);
    }
    out
}

fn sum_of_modes(a: &[Vec<f64>], b: &[Vec<f64>], sigma: f64) -> Matrix {
    let mut mu = Matrix::zeros(a[0].len(), b[0].len());
    for (ak, bk) in a.iter().zip(b) {
        mu.axpy(1.0, &Matrix::outer(ak, bk, sigma)).expect("shapes agree");
    }
    mu
}

/// `μ_T = Σ_k (‖μ‖/√r_T) a_k b_kᵀ` with random orthonormal `{a_k}`, `{b_k}`.
pub fn make_task_mean(d_out: usize, d_in: usize, r_t: usize, mu_frob: f64, seed: u64) -> Result<Matrix> {
    if r_t == 0 || r_t > d_out.min(d_in) {
        return Err(Error::Parameter(format!(
            "r_t = {r_t} outside [1, {}]",
            d_out.min(d_in)
        )));
    }
    if !(mu_frob > 0.0) || !mu_frob.is_finite() {
        return Err(Error::Parameter(format!("mu_frob must be positive, got {mu_frob}")));
    }
    let mut r = rng::substream(seed, "task-mean");
    let a = orthonormal_set(&mut r, d_out, r_t, &[]);
    let b = orthonormal_set(&mut r, d_in, r_t, &[]);
    Ok(sum_of_modes(&a, &b, mu_frob / (r_t as f64).sqrt()))
}

/// Task mean with prescribed orientation against the spurious direction.
/// `Independent` falls back to [`make_task_mean`].
pub fn make_task_mean_relative(
    spurious: &SpuriousSpec,
    r_t: usize,
    mu_frob: f64,
    overlap: TaskOverlap,
    seed: u64,
) -> Result<Matrix> {
    let (d_out, d_in) = spurious.shape();
    if overlap == TaskOverlap::Independent {
        return make_task_mean(d_out, d_in, r_t, mu_frob, seed);
    }
    // one dimension is reserved for the spurious direction itself
    if r_t == 0 || r_t >= d_out.min(d_in) {
        return Err(Error::Parameter(format!(
            "r_t = {r_t} outside [1, {}) for a constrained orientation",
            d_out.min(d_in)
        )));
    }
    if !(mu_frob > 0.0) || !mu_frob.is_finite() {
        return Err(Error::Parameter(format!("mu_frob must be positive, got {mu_frob}")));
    }
    let mut r = rng::substream(seed, "task-mean");
    let us = spurious.u_s.as_slice().to_vec();
    let vs = spurious.v_s.as_slice().to_vec();
    let mut a = orthonormal_set(&mut r, d_out, r_t, std::slice::from_ref(&us));
    let mut b = orthonormal_set(&mut r, d_in, r_t, std::slice::from_ref(&vs));
    if overlap == TaskOverlap::Tilted {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        a[0] = a[0].iter().zip(&us).map(|(x, u)| h * (x + u)).collect();
        b[0] = b[0].iter().zip(&vs).map(|(x, v)| h * (x + v)).collect();
    }
    Ok(sum_of_modes(&a, &b, mu_frob / (r_t as f64).sqrt()))
}

/// Sample `index` of the stream keyed by `seed`.
pub fn sample_gradient(spurious: &SpuriousSpec, task: &TaskSpec, seed: u64, index: u64) -> Result<GradientSample> {
    let (d_out, d_in) = task.shape();
    if spurious.shape() != (d_out, d_in) {
        return Err(Error::Parameter(format!(
            "spurious factor is {:?} but task mean is {:?}",
            spurious.shape(),
            task.shape()
        )));
    }
    let mut r = rng::keyed(seed, "gradient", index);
    let unit: f64 = r.random_range(-1.0..=1.0);
    let alpha = spurious.alpha_mean * (1.0 + spurious.alpha_jitter * unit);
    let std = task.tau / ((d_out * d_in) as f64).sqrt();
    let noise = rng::gaussian_matrix(&mut r, d_out, d_in, std);

    let g_spurious = Matrix::outer(spurious.u_s.as_slice(), spurious.v_s.as_slice(), alpha);
    let g_task = task.mu_t.add(&noise)?;
    let g = g_spurious.add(&g_task)?;
    Ok(GradientSample {
        g,
        g_spurious,
        g_task,
        alpha,
    })
}

/// Samples `start..start + count` of a stream.
pub fn sample_stream(
    spurious: &SpuriousSpec,
    task: &TaskSpec,
    seed: u64,
    start: u64,
    count: usize,
) -> Result<Vec<GradientSample>> {
    (start..start + count as u64)
        .map(|i| sample_gradient(spurious, task, seed, i))
        .collect()
}

/// `ΔW = Σ_i g_i` (proportionality constant one).
pub fn accumulate_delta(samples: &[GradientSample]) -> Result<Matrix> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Parameter("cannot accumulate an empty stream".into()))?;
    let mut acc = first.g.clone();
    for s in &samples[1..] {
        acc.axpy(1.0, &s.g)?;
    }
    Ok(acc)
}

/// Same as [`accumulate_delta`] but draws samples on the fly instead of
/// holding the whole stream in memory.
pub fn accumulate_stream(spurious: &SpuriousSpec, task: &TaskSpec, seed: u64, n: usize) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::Parameter("cannot accumulate an empty stream".into()));
    }
    let mut acc = sample_gradient(spurious, task, seed, 0)?.g;
    for i in 1..n as u64 {
        acc.axpy(1.0, &sample_gradient(spurious, task, seed, i)?.g)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{frobenius_norm, full_svd_oracle, inner_product};

    fn small(overlap: TaskOverlap, tau: f64, jitter: f64) -> (SpuriousSpec, TaskSpec) {
        SynthConfig {
            d_out: 12,
            d_in: 10,
            r_t: 4,
            tau,
            alpha_jitter: jitter,
            overlap,
            ..SynthConfig::default()
        }
        .build(5)
        .unwrap()
    }

    #[test]
    fn task_mean_rank_one() {
        let mu = make_task_mean(6, 5, 1, 1.0, 1).unwrap();
        let s = full_svd_oracle(&mu).unwrap();
        assert!((s[0].sigma - 1.0).abs() < 1e-12);
        assert!(s[1].sigma < 1e-12);
    }

    #[test]
    fn task_mean_full_rank_equal_split() {
        let mu = make_task_mean(4, 4, 4, 2.0, 2).unwrap();
        for t in full_svd_oracle(&mu).unwrap() {
            assert!((t.sigma - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn task_mean_spectrum_64() {
        let mu = make_task_mean(64, 64, 16, 1.0, 3).unwrap();
        let s = full_svd_oracle(&mu).unwrap();
        for t in &s[..16] {
            assert!((t.sigma - 0.25).abs() <= 1e-9 * 0.25);
        }
        assert!(s[16..].iter().all(|t| t.sigma <= 1e-12));
        assert!((frobenius_norm(&mu) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn task_mean_rejects_bad_rank() {
        assert!(make_task_mean(4, 3, 0, 1.0, 0).is_err());
        assert!(make_task_mean(4, 3, 4, 1.0, 0).is_err());
        assert!(make_task_mean(4, 3, 2, 0.0, 0).is_err());
    }

    #[test]
    fn oriented_task_means() {
        let (sp, task) = small(TaskOverlap::Orthogonal, 0.0, 0.0);
        assert!(inner_product(&task.mu_t, &sp.direction()).unwrap().abs() < 1e-14);
        assert!(task
            .mu_t
            .tmatvec(sp.u_s.as_slice())
            .unwrap()
            .iter()
            .all(|x| x.abs() < 1e-14));

        let (sp, task) = small(TaskOverlap::Tilted, 0.0, 0.0);
        // leading mode σ·(1/√2)² along u_S v_Sᵀ
        let expected = 1.0 / 2.0 / 2.0;
        assert!((inner_product(&task.mu_t, &sp.direction()).unwrap() - expected).abs() < 1e-12);
        let s = full_svd_oracle(&task.mu_t).unwrap();
        assert!(s[..4].iter().all(|t| (t.sigma - 0.5).abs() < 1e-12));
    }

    #[test]
    fn noiseless_samples_are_identical() {
        let (sp, task) = small(TaskOverlap::Independent, 0.0, 0.0);
        let expected = Matrix::outer(sp.u_s.as_slice(), sp.v_s.as_slice(), sp.alpha_mean)
            .add(&task.mu_t)
            .unwrap();
        for i in 0..5 {
            let s = sample_gradient(&sp, &task, 9, i).unwrap();
            assert_eq!(s.g, expected);
            assert_eq!(s.alpha, sp.alpha_mean);
        }
    }

    #[test]
    fn orthogonal_construction_reads_alpha() {
        let (sp, task) = small(TaskOverlap::Orthogonal, 0.0, 0.0);
        let s = sample_gradient(&sp, &task, 1, 0).unwrap();
        let c = inner_product(&s.g, &sp.direction()).unwrap();
        assert!((c - sp.alpha_mean).abs() < 1e-12 * sp.alpha_mean);
    }

    #[test]
    fn decomposition_is_exact() {
        let (sp, task) = small(TaskOverlap::Independent, 1.0, 0.5);
        for i in 0..10 {
            let s = sample_gradient(&sp, &task, 4, i).unwrap();
            assert_eq!(s.g, s.g_spurious.add(&s.g_task).unwrap());
            assert!(s.alpha > 0.0);
            let rank1 = sp.direction().scaled(s.alpha);
            assert!(frobenius_norm(&rank1.sub(&s.g_spurious).unwrap()) <= 1e-12 * s.alpha);
        }
    }

    #[test]
    fn noise_energy_matches_tau() {
        let cfg = SynthConfig {
            d_out: 16,
            d_in: 16,
            ..SynthConfig::default()
        };
        let (sp, task) = cfg.build(11).unwrap();
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|i| {
                let s = sample_gradient(&sp, &task, 11, i).unwrap();
                frobenius_norm(&s.g_task.sub(&task.mu_t).unwrap()).powi(2)
            })
            .sum::<f64>()
            / n as f64;
        assert!((mean - cfg.tau.powi(2)).abs() <= 0.03 * cfg.tau.powi(2), "{mean}");
    }

    #[test]
    fn alpha_mean_is_unbiased() {
        let (sp, task) = small(TaskOverlap::Independent, 0.0, 0.5);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|i| sample_gradient(&sp, &task, 3, i).unwrap().alpha)
            .sum::<f64>()
            / n as f64;
        assert!((mean - sp.alpha_mean).abs() <= 0.01 * sp.alpha_mean);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let (sp, _) = small(TaskOverlap::Independent, 0.0, 0.0);
        let task = TaskSpec::new(make_task_mean(3, 3, 1, 1.0, 0).unwrap(), 1, 1.0, 0.0).unwrap();
        assert!(matches!(sample_gradient(&sp, &task, 0, 0), Err(Error::Parameter(_))));
        assert!(SpuriousSpec::new(sp.u_s.clone(), sp.v_s.clone(), 1.0, 1.0).is_err());
        assert!(SpuriousSpec::new(sp.u_s.clone(), sp.v_s.clone(), -1.0, 0.0).is_err());
    }

    #[test]
    fn accumulate_examples() {
        let (sp, task) = small(TaskOverlap::Independent, 0.0, 0.0);
        let one = sample_stream(&sp, &task, 1, 0, 1).unwrap();
        assert_eq!(accumulate_delta(&one).unwrap(), one[0].g);

        let two = sample_stream(&sp, &task, 1, 0, 2).unwrap();
        let expected = sp
            .direction()
            .scaled(sp.alpha_mean)
            .add(&task.mu_t)
            .unwrap()
            .scaled(2.0);
        assert!(frobenius_norm(&accumulate_delta(&two).unwrap().sub(&expected).unwrap()) < 1e-12);

        assert!(accumulate_delta(&[]).is_err());
    }

    #[test]
    fn accumulate_matches_loop_sum() {
        let (sp, task) = SynthConfig::default().build(2).unwrap();
        let samples = sample_stream(&sp, &task, 2, 0, 1000).unwrap();
        let acc = accumulate_delta(&samples).unwrap();
        let (r, c) = task.shape();
        let mut oracle = vec![0.0; r * c];
        for s in &samples {
            for i in 0..r {
                for j in 0..c {
                    oracle[i * c + j] += s.g[(i, j)];
                }
            }
        }
        assert!((frobenius_norm(&acc) - norm(&oracle)).abs() < 1e-9);
        assert_eq!(accumulate_stream(&sp, &task, 2, 1000).unwrap(), acc);
    }

    #[test]
    fn streams_replay_bitwise() {
        let (sp, task) = small(TaskOverlap::Independent, 1.0, 0.3);
        let a = sample_stream(&sp, &task, 8, 0, 20).unwrap();
        let b = sample_stream(&sp, &task, 8, 0, 20).unwrap();
        assert_eq!(a, b);
        // partitioned generation equals serial generation
        let mut c = sample_stream(&sp, &task, 8, 0, 7).unwrap();
        c.extend(sample_stream(&sp, &task, 8, 7, 13).unwrap());
        assert_eq!(a, c);
    }

    #[test]
    fn surprise_flag() {
        assert!(SynthConfig::default().surprise_valid());
        assert!(!surprise_valid(5.0, 1.0, 0.0, 10));
        assert!(!surprise_valid(100.0, 1.0, 1000.0, 100));
        assert!(surprise_valid(100.0, 10.0, 100.0, 100));
    }
}
