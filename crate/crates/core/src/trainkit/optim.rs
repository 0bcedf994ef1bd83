use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::project::{project_all, ProjectionPlan};
use crate::trainkit::model::ToyModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimizerKind::Adamw,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            epochs: 40,
            batch_size: 64,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter("learning rate must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Parameter("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Parameter(
                "eps must be positive and weight decay non-negative".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimConfig,
    pub step_count: u64,
    first_moment: Vec<Matrix>,
    second_moment: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(config: OptimConfig) -> Self {
        OptimizerState {
            config,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.config.kind
    }

    pub fn moments(&self) -> (&[Matrix], &[Matrix]) {
        (&self.first_moment, &self.second_moment)
    }

    /// One update of `params` with `grads` (already projected, if at all).
    pub fn apply(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.shape() != g.shape()) {
            return Err(Error::Dimension("parameters and gradients differ in layout".into()));
        }
        self.step_count += 1;
        let lr = self.config.lr;
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.axpy(-lr, g)?;
                }
            }
            OptimizerKind::Adamw => {
                if self.first_moment.is_empty() {
                    self.first_moment = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
                    self.second_moment = self.first_moment.clone();
                }
                let OptimConfig {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                    ..
                } = self.config;
                let t = self.step_count as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = self.first_moment[k].as_mut_slice();
                    let v = self.second_moment[k].as_mut_slice();
                    for (((x, gi), mi), vi) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *x -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *x);
                    }
                }
            }
        }
        Ok(())
    }
}

/// W-space gradients, optionally projected per site, mapped to the model's
/// trainable tensors.
fn model_grads(model: &ToyModel, w_grads: &[Matrix], plan: Option<&ProjectionPlan>) -> Result<Vec<Matrix>> {
    match plan {
        Some(plan) => {
            if plan.site_shapes() != model.site_shapes().as_slice() {
                return Err(Error::Dimension("projection plan does not match model sites".into()));
            }
            model.param_grads(&project_all(plan, w_grads)?)
        }
        None => model.param_grads(w_grads),
    }
}

pub fn sgd_step(
    state: &mut OptimizerState,
    model: &mut ToyModel,
    w_grads: &[Matrix],
    plan: Option<&ProjectionPlan>,
) -> Result<()> {
    if state.kind() != OptimizerKind::Sgd {
        return Err(Error::Parameter("sgd_step needs an SGD optimizer".into()));
    }
    let grads = model_grads(model, w_grads, plan)?;
    state.apply(&mut model.params_mut(), &grads)
}

/// Projection, when given, happens before the moment updates.
pub fn adamw_step(
    state: &mut OptimizerState,
    model: &mut ToyModel,
    w_grads: &[Matrix],
    plan: Option<&ProjectionPlan>,
) -> Result<()> {
    if state.kind() != OptimizerKind::Adamw {
        return Err(Error::Parameter("adamw_step needs an AdamW optimizer".into()));
    }
    let grads = model_grads(model, w_grads, plan)?;
    state.apply(&mut model.params_mut(), &grads)
}

pub fn step(
    state: &mut OptimizerState,
    model: &mut ToyModel,
    w_grads: &[Matrix],
    plan: Option<&ProjectionPlan>,
) -> Result<()> {
    match state.kind() {
        OptimizerKind::Sgd => sgd_step(state, model, w_grads, plan),
        OptimizerKind::Adamw => adamw_step(state, model, w_grads, plan),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identify::ProbePair;
    use crate::project::spurious_component;
    use crate::rng;
    use crate::trainkit::model::{Activation, AdapterMode, ModelConfig};

    fn adam(lr: f64, wd: f64) -> OptimizerState {
        OptimizerState::new(OptimConfig {
            kind: OptimizerKind::Adamw,
            lr,
            weight_decay: wd,
            ..OptimConfig::default()
        })
    }

    fn scalar(x: f64) -> Matrix {
        Matrix::new(1, 1, vec![x]).unwrap()
    }

    #[test]
    fn adamw_first_step_by_hand() {
        let mut s = adam(0.1, 0.0);
        let mut p = scalar(0.0);
        s.apply(&mut [&mut p], &[scalar(1.0)]).unwrap();
        // m̂ = 1, v̂ = 1
        let expect = -0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p[(0, 0)] - expect).abs() < 1e-16);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn adamw_zero_gradient_cases() {
        let mut s = adam(0.1, 0.0);
        let mut p = scalar(2.5);
        s.apply(&mut [&mut p], &[scalar(0.0)]).unwrap();
        assert_eq!(p[(0, 0)], 2.5);

        let mut s = adam(0.1, 0.01);
        let mut p = scalar(2.5);
        s.apply(&mut [&mut p], &[scalar(0.0)]).unwrap();
        assert!((p[(0, 0)] - 2.5 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn adamw_second_step_matches_recurrence() {
        let mut s = adam(0.01, 0.0);
        let mut p = scalar(0.0);
        s.apply(&mut [&mut p], &[scalar(2.0)]).unwrap();
        s.apply(&mut [&mut p], &[scalar(-1.0)]).unwrap();
        let (b1, b2) = (0.9f64, 0.999f64);
        let m = b1 * (1.0 - b1) * 2.0 + -(1.0 - b1);
        let v = b2 * (1.0 - b2) * 4.0 + (1.0 - b2) * 1.0;
        let first = -0.01 * (2.0 / (2.0 + 1e-8));
        let second = -0.01 * ((m / (1.0 - b1 * b1)) / ((v / (1.0 - b2 * b2)).sqrt() + 1e-8));
        assert!((p[(0, 0)] - (first + second)).abs() < 1e-15);
    }

    fn toy(mode: AdapterMode) -> ToyModel {
        let cfg = ModelConfig {
            d_in: 6,
            d_out: 6,
            sites: 2,
            rank: 3,
            activation: Activation::Tanh,
            adapter_mode: mode,
            ..ModelConfig::default()
        };
        ToyModel::init(&cfg, 3).unwrap()
    }

    fn grads(seed: u64) -> Vec<Matrix> {
        let mut g = rng::substream(seed, "grads");
        (0..2).map(|_| rng::gaussian_matrix(&mut g, 6, 6, 1.0)).collect()
    }

    #[test]
    fn zero_lr_leaves_model_bitwise() {
        for mode in [AdapterMode::Joint, AdapterMode::Factored] {
            let mut model = toy(mode);
            let before = model.clone();
            let mut s = OptimizerState::new(OptimConfig {
                kind: OptimizerKind::Sgd,
                lr: 0.0,
                ..OptimConfig::default()
            });
            sgd_step(&mut s, &mut model, &grads(1), None).unwrap();
            assert_eq!(model, before);
        }
    }

    #[test]
    fn projected_sgd_preserves_constraint_and_naive_grows_linearly() {
        let mut model = toy(AdapterMode::Joint);
        let mut r = rng::substream(4, "probes");
        let probes: Vec<_> = (0..2)
            .map(|l| ProbePair::new(rng::unit_vector(&mut r, 6), rng::unit_vector(&mut r, 6), 1.0, l).unwrap())
            .collect();
        let plan = ProjectionPlan::per_site(probes.clone()).unwrap();
        let h0: Vec<f64> = (0..2)
            .map(|l| spurious_component(&model.effective_weight(l), &probes[l]).unwrap())
            .collect();
        let mut s = OptimizerState::new(OptimConfig {
            kind: OptimizerKind::Sgd,
            lr: 0.05,
            ..OptimConfig::default()
        });
        for t in 0..200 {
            sgd_step(&mut s, &mut model, &grads(100 + t), Some(&plan)).unwrap();
            for l in 0..2 {
                let w = model.effective_weight(l);
                let h = spurious_component(&w, &probes[l]).unwrap();
                assert!((h - h0[l]).abs() <= 1e-9 * (1.0 + w.frobenius_norm()));
            }
        }

        // a constant pure-spurious gradient accumulates linearly without projection
        let mut model = toy(AdapterMode::Joint);
        let pure: Vec<Matrix> = probes.iter().map(|p| p.direction()).collect();
        let mut s = OptimizerState::new(OptimConfig {
            kind: OptimizerKind::Sgd,
            lr: 0.05,
            ..OptimConfig::default()
        });
        for t in 1..=10 {
            sgd_step(&mut s, &mut model, &pure, None).unwrap();
            let h = spurious_component(&model.delta_w(0), &probes[0]).unwrap();
            assert!((h + 0.05 * t as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let mut model = toy(AdapterMode::Joint);
        let mut s = adam(0.1, 0.0);
        assert!(sgd_step(&mut s, &mut model, &grads(2), None).is_err());
        let mut s = OptimizerState::new(OptimConfig {
            kind: OptimizerKind::Sgd,
            ..OptimConfig::default()
        });
        assert!(adamw_step(&mut s, &mut model, &grads(2), None).is_err());
    }

    #[test]
    fn factored_mode_moves_both_factors_after_warmup() {
        let mut model = toy(AdapterMode::Factored);
        let mut s = OptimizerState::new(OptimConfig {
            kind: OptimizerKind::Sgd,
            lr: 0.1,
            ..OptimConfig::default()
        });
        sgd_step(&mut s, &mut model, &grads(5), None).unwrap();
        sgd_step(&mut s, &mut model, &grads(6), None).unwrap();
        assert!(model.delta_w(0).frobenius_norm() > 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::default().validate().is_ok());
        assert!(OptimConfig {
            beta1: 1.0,
            ..OptimConfig::default()
        }
        .validate()
        .is_err());
        assert!(OptimConfig {
            lr: -1.0,
            ..OptimConfig::default()
        }
        .validate()
        .is_err());
        assert!(OptimConfig {
            batch_size: 0,
            ..OptimConfig::default()
        }
        .validate()
        .is_err());
    }
}
