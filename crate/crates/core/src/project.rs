//! Rank-1 constraint projection.
//!
//! The statistic `h_l(θ) = u_lᵀ W_l v_l` is held fixed by removing from every
//! update its component along `u_l v_lᵀ`. [`project_site_gradient`] is the
//! per-site fast path used in training. [`general_projector`] builds the full
//! constraint Jacobian and solves the Lagrange system explicitly; it exists to
//! check the fast path and to catch dependent constraints.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identify::ProbePair;
use crate::linalg::{bilinear, Matrix};

/// Frozen probes plus the shapes of the sites they constrain. Parameters are
/// laid out site by site, each site row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPlan {
    probes: Vec<ProbePair>,
    site_shapes: Vec<(usize, usize)>,
}

impl ProjectionPlan {
    pub fn new(probes: Vec<ProbePair>, site_shapes: Vec<(usize, usize)>) -> Result<Self> {
        for (k, p) in probes.iter().enumerate() {
            let shape = site_shapes.get(p.site_id()).ok_or_else(|| {
                Error::Parameter(format!("probe {k} names site {} of {}", p.site_id(), site_shapes.len()))
            })?;
            if p.shape() != *shape {
                return Err(Error::Dimension(format!(
                    "probe {k} is {:?} but site {} is {:?}",
                    p.shape(),
                    p.site_id(),
                    shape
                )));
            }
        }
        Ok(ProjectionPlan { probes, site_shapes })
    }

    /// One probe per site, site `l` taking `probes[l]`'s shape.
    pub fn per_site(probes: Vec<ProbePair>) -> Result<Self> {
        if let Some((l, _)) = probes.iter().enumerate().find(|(l, p)| p.site_id() != *l) {
            return Err(Error::Parameter(format!("probe {l} is tagged for a different site")));
        }
        let shapes = probes.iter().map(ProbePair::shape).collect();
        ProjectionPlan::new(probes, shapes)
    }

    pub fn probes(&self) -> &[ProbePair] {
        &self.probes
    }

    pub fn site_shapes(&self) -> &[(usize, usize)] {
        &self.site_shapes
    }

    pub fn num_constraints(&self) -> usize {
        self.probes.len()
    }

    /// First probe attached to `site`.
    pub fn probe_for_site(&self, site: usize) -> Option<&ProbePair> {
        self.probes.iter().find(|p| p.site_id() == site)
    }

    fn site_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.site_shapes.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for (r, c) in &self.site_shapes {
            acc += r * c;
            offsets.push(acc);
        }
        offsets
    }

    pub fn flat_len(&self) -> usize {
        self.site_shapes.iter().map(|(r, c)| r * c).sum()
    }

    /// `J_h` as an `L × D` matrix; row `k` is `vec(u_k v_kᵀ)` placed in its
    /// site's block.
    pub fn jacobian(&self) -> Matrix {
        let offsets = self.site_offsets();
        let d = self.flat_len();
        let mut rows = Vec::with_capacity(self.probes.len() * d);
        for p in &self.probes {
            let mut row = vec![0.0; d];
            let start = offsets[p.site_id()];
            let (u, v) = (p.u().as_slice(), p.v().as_slice());
            for i in 0..u.len() {
                for j in 0..v.len() {
                    row[start + i * v.len() + j] = u[i] * v[j];
                }
            }
            rows.extend(row);
        }
        Matrix::from_vec_unchecked(self.probes.len().max(1), d.max(1), pad(rows, self.probes.len(), d))
    }

    /// `J_h J_hᵀ`, computed from the explicit Jacobian.
    pub fn gram(&self) -> Matrix {
        let j = self.jacobian();
        if self.probes.is_empty() {
            return Matrix::zeros(1, 1);
        }
        j.matmul(&j.transpose()).expect("square by construction")
    }

    /// Split a flat parameter vector into per-site matrices.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Vec<Matrix>> {
        if flat.len() != self.flat_len() {
            return Err(Error::Dimension(format!(
                "flat vector has length {}, plan expects {}",
                flat.len(),
                self.flat_len()
            )));
        }
        let offsets = self.site_offsets();
        self.site_shapes
            .iter()
            .enumerate()
            .map(|(l, &(r, c))| Matrix::new(r, c, flat[offsets[l]..offsets[l + 1]].to_vec()))
            .collect()
    }

    pub fn flatten(&self, sites: &[Matrix]) -> Result<Vec<f64>> {
        if sites.len() != self.site_shapes.len() || sites.iter().zip(&self.site_shapes).any(|(m, s)| m.shape() != *s) {
            return Err(Error::Dimension("site matrices do not match plan shapes".into()));
        }
        Ok(sites.iter().flat_map(|m| m.as_slice().iter().copied()).collect())
    }
}

// an empty plan still yields a 1x1 placeholder so Matrix stays non-empty
fn pad(mut rows: Vec<f64>, l: usize, d: usize) -> Vec<f64> {
    if l == 0 || d == 0 {
        rows = vec![0.0];
    }
    rows
}

/// `h_l = uᵀ W v = ⟨W, u vᵀ⟩`
pub fn spurious_component(w: &Matrix, probe: &ProbePair) -> Result<f64> {
    if w.shape() != probe.shape() {
        return Err(Error::Parameter(format!(
            "matrix is {:?} but probe is {:?}",
            w.shape(),
            probe.shape()
        )));
    }
    bilinear(probe.u().as_slice(), w, probe.v().as_slice())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGradient {
    pub g_projected: Matrix,
    /// `⟨g, u vᵀ⟩`
    pub removed_coefficient: f64,
}

/// `g − ⟨g, u vᵀ⟩ u vᵀ`. Returns `g` untouched when the coefficient is zero.
pub fn project_site_gradient(g: &Matrix, probe: &ProbePair) -> Result<ProjectedGradient> {
    let coef = spurious_component(g, probe)?;
    if coef == 0.0 {
        return Ok(ProjectedGradient {
            g_projected: g.clone(),
            removed_coefficient: 0.0,
        });
    }
    let (u, v) = (probe.u().as_slice(), probe.v().as_slice());
    let mut out = g.clone();
    let cols = g.cols();
    for (i, row) in out.as_mut_slice().chunks_mut(cols).enumerate() {
        let cu = coef * u[i];
        for (x, vj) in row.iter_mut().zip(v) {
            *x -= cu * vj;
        }
    }
    Ok(ProjectedGradient {
        g_projected: out,
        removed_coefficient: coef,
    })
}

/// Pivot threshold (relative to the diagonal) below which the Gram matrix is
/// treated as singular.
const GRAM_SINGULAR_TOL: f64 = 1e-10;

/// `(I − J_hᵀ (J_h J_hᵀ)⁻¹ J_h) v` through an explicit Cholesky solve of the
/// Gram system.
pub fn general_projector(plan: &ProjectionPlan, v_flat: &[f64]) -> Result<Vec<f64>> {
    if v_flat.len() != plan.flat_len() {
        return Err(Error::Dimension(format!(
            "flat vector has length {}, plan expects {}",
            v_flat.len(),
            plan.flat_len()
        )));
    }
    let l = plan.num_constraints();
    if l == 0 {
        return Ok(v_flat.to_vec());
    }
    let j = plan.jacobian();
    let gram = plan.gram();
    let rhs = j.matvec(v_flat)?;
    let chol = cholesky(&gram).map_err(|k| dependent_pair(plan, &gram, k))?;
    let lambda = cholesky_solve(&chol, &rhs);
    let correction = j.tmatvec(&lambda)?;
    Ok(v_flat.iter().zip(&correction).map(|(a, b)| a - b).collect())
}

/// Lower-triangular factor, or the index of the first failing pivot.
fn cholesky(a: &Matrix) -> std::result::Result<Matrix, usize> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for k in 0..n {
        let mut d = a[(k, k)];
        for p in 0..k {
            d -= l[(k, p)] * l[(k, p)];
        }
        if !(d > GRAM_SINGULAR_TOL * a[(k, k)].max(f64::MIN_POSITIVE)) {
            return Err(k);
        }
        let d = d.sqrt();
        l[(k, k)] = d;
        for i in k + 1..n {
            let mut s = a[(i, k)];
            for p in 0..k {
                s -= l[(i, p)] * l[(k, p)];
            }
            l[(i, k)] = s / d;
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|p| l[(i, p)] * y[p]).sum();
        y[i] = (b[i] - s) / l[(i, i)];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|p| l[(p, i)] * x[p]).sum();
        x[i] = (y[i] - s) / l[(i, i)];
    }
    x
}

/// Names the earlier constraint most collinear with constraint `k`.
fn dependent_pair(plan: &ProjectionPlan, gram: &Matrix, k: usize) -> Error {
    let first = (0..k)
        .max_by(|&a, &b| {
            let ca = gram[(a, k)].abs() / (gram[(a, a)] * gram[(k, k)]).sqrt();
            let cb = gram[(b, k)].abs() / (gram[(b, b)] * gram[(k, k)]).sqrt();
            ca.total_cmp(&cb)
        })
        .unwrap_or(k);
    Error::RankDeficient {
        first,
        second: k,
        first_site: plan.probes[first].site_id(),
        second_site: plan.probes[k].site_id(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GramReport {
    pub max_deviation: f64,
    pub at: (usize, usize),
    pub constraints: usize,
}

/// Largest `|(J_h J_hᵀ − I)_{ij}|`.
pub fn verify_gram_identity(plan: &ProjectionPlan) -> GramReport {
    let l = plan.num_constraints();
    let mut report = GramReport {
        max_deviation: 0.0,
        at: (0, 0),
        constraints: l,
    };
    if l == 0 {
        return report;
    }
    let gram = plan.gram();
    for i in 0..l {
        for j in 0..l {
            let target = if i == j { 1.0 } else { 0.0 };
            let dev = (gram[(i, j)] - target).abs();
            if dev > report.max_deviation {
                report.max_deviation = dev;
                report.at = (i, j);
            }
        }
    }
    report
}

/// Per-site fast path over a whole model: projects every site that has a
/// probe.
pub fn project_all(plan: &ProjectionPlan, grads: &[Matrix]) -> Result<Vec<Matrix>> {
    grads
        .iter()
        .enumerate()
        .map(|(l, g)| match plan.probe_for_site(l) {
            Some(p) => Ok(project_site_gradient(g, p)?.g_projected),
            None => Ok(g.clone()),
        })
        .collect()
}
