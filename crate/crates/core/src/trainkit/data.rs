use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng;
use crate::synthgrad::{make_task_mean, SpuriousSpec};
use crate::trainkit::model::ToyModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_eval: usize,
    /// Rank of the genuine task improvement.
    pub task_rank: usize,
    /// Frobenius norm of the genuine task improvement.
    pub task_norm: f64,
    /// Strength of the planted spurious output term (may be zero or negative).
    pub beta: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 2048,
            n_eval: 1024,
            task_rank: 8,
            task_norm: 2.0,
            beta: 5.0,
        }
    }
}

/// Inputs and targets, one example per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SpuriousDataset {
    pub train_inputs: Matrix,
    pub train_targets: Matrix,
    pub eval_inputs: Matrix,
    pub eval_targets: Matrix,
    pub spurious_strength: f64,
    /// Planted output direction `u_S` and input direction `v_S`; `alpha_mean`
    /// carries the strength.
    pub spurious_dirs: SpuriousSpec,
    /// Genuine improvement over the pretrained map, `d_out × d_in`.
    pub task: Matrix,
}

/// Train targets are `f₀(x) + T x + β (v_S·x) u_S`, eval targets omit the
/// last term. `f₀` is the frozen pretrained model, so with identity
/// activation the clean target map is `W₀ + T`.
pub fn make_dataset(pretrained: &ToyModel, cfg: &DataConfig, seed: u64) -> Result<SpuriousDataset> {
    let (d_in, d_out) = (pretrained.d_in(), pretrained.d_out());
    if cfg.n_train == 0 || cfg.n_eval == 0 {
        return Err(Error::Parameter("dataset sizes must be positive".into()));
    }
    if cfg.task_rank == 0 || cfg.task_rank > d_in.min(d_out) {
        return Err(Error::Parameter(format!(
            "task rank {} must be in 1..={}",
            cfg.task_rank,
            d_in.min(d_out)
        )));
    }
    if !cfg.beta.is_finite() || !(cfg.task_norm >= 0.0) {
        return Err(Error::Parameter(
            "beta must be finite and task_norm non-negative".into(),
        ));
    }
    let unit = SpuriousSpec::random(d_out, d_in, 1.0, 0.0, seed)?;
    let spurious_dirs = SpuriousSpec {
        alpha_mean: cfg.beta,
        ..unit
    };
    let task = if cfg.task_norm > 0.0 {
        make_task_mean(d_out, d_in, cfg.task_rank, cfg.task_norm, seed)?
    } else {
        Matrix::zeros(d_out, d_in)
    };

    let split = |label: &str, n: usize, beta: f64| -> Result<(Matrix, Matrix)> {
        let x = rng::gaussian_matrix(&mut rng::substream(seed, label), n, d_in, 1.0);
        let mut y = pretrained.forward_batch(&x)?.add(&x.matmul(&task.transpose())?)?;
        if beta != 0.0 {
            let (u, v) = (spurious_dirs.u_s.as_slice(), spurious_dirs.v_s.as_slice());
            for i in 0..n {
                let c = beta * crate::linalg::dot(v, x.row(i));
                let row = &mut y.as_mut_slice()[i * d_out..(i + 1) * d_out];
                row.iter_mut().zip(u).for_each(|(t, ui)| *t += c * ui);
            }
        }
        Ok((x, y))
    };
    let (train_inputs, train_targets) = split("data-train", cfg.n_train, cfg.beta)?;
    let (eval_inputs, eval_targets) = split("data-eval", cfg.n_eval, 0.0)?;
    Ok(SpuriousDataset {
        train_inputs,
        train_targets,
        eval_inputs,
        eval_targets,
        spurious_strength: cfg.beta,
        spurious_dirs,
        task,
    })
}

impl SpuriousDataset {
    /// Rows `idx` of the training split.
    pub fn train_batch(&self, idx: &[usize]) -> (Matrix, Matrix) {
        (gather(&self.train_inputs, idx), gather(&self.train_targets, idx))
    }
}

fn gather(m: &Matrix, idx: &[usize]) -> Matrix {
    let data = idx.iter().flat_map(|&i| m.row(i).iter().copied()).collect();
    Matrix::new(idx.len(), m.cols(), data).expect("gathered rows are finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainkit::model::ModelConfig;

    fn base(seed: u64) -> ToyModel {
        ToyModel::init(&ModelConfig::default(), seed).unwrap()
    }

    #[test]
    fn zero_beta_train_and_eval_share_the_map() {
        let model = base(1);
        let cfg = DataConfig {
            beta: 0.0,
            n_train: 50,
            n_eval: 50,
            ..DataConfig::default()
        };
        let data = make_dataset(&model, &cfg, 1).unwrap();
        // same clean map on both splits
        let clean = |x: &Matrix| {
            model
                .forward_batch(x)
                .unwrap()
                .add(&x.matmul(&data.task.transpose()).unwrap())
                .unwrap()
        };
        assert_eq!(clean(&data.train_inputs), data.train_targets);
        assert_eq!(clean(&data.eval_inputs), data.eval_targets);
    }

    #[test]
    fn train_targets_carry_the_spurious_term() {
        let model = base(2);
        let data = make_dataset(&model, &DataConfig::default(), 2).unwrap();
        let (u, v) = (data.spurious_dirs.u_s.as_slice(), data.spurious_dirs.v_s.as_slice());
        let clean = model
            .forward_batch(&data.train_inputs)
            .unwrap()
            .add(&data.train_inputs.matmul(&data.task.transpose()).unwrap())
            .unwrap();
        for i in 0..20 {
            let c = 5.0 * crate::linalg::dot(v, data.train_inputs.row(i));
            for ((t, cl), ui) in data.train_targets.row(i).iter().zip(clean.row(i)).zip(u) {
                assert!((t - cl - c * ui).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gaussian_moment_recovers_input_direction() {
        let model = base(3);
        let cfg = DataConfig {
            n_train: 10_000,
            ..DataConfig::default()
        };
        let data = make_dataset(&model, &cfg, 3).unwrap();
        let v = data.spurious_dirs.v_s.as_slice();
        let mut acc = vec![0.0; v.len()];
        for i in 0..cfg.n_train {
            let x = data.train_inputs.row(i);
            let c = crate::linalg::dot(v, x);
            acc.iter_mut()
                .zip(x)
                .for_each(|(a, xi)| *a += c * xi / cfg.n_train as f64);
        }
        let along = crate::linalg::dot(&acc, v);
        let cos = along / crate::linalg::norm(&acc);
        assert!((along - 1.0).abs() < 0.05, "component along v_S {along}");
        assert!(cos > 0.95, "cosine {cos}");
    }

    #[test]
    fn task_has_requested_norm_and_validation() {
        let model = base(4);
        let data = make_dataset(&model, &DataConfig::default(), 4).unwrap();
        assert!((data.task.frobenius_norm() - 2.0).abs() < 1e-12);
        assert!(make_dataset(
            &model,
            &DataConfig {
                task_rank: 0,
                ..DataConfig::default()
            },
            4
        )
        .is_err());
        assert!(make_dataset(
            &model,
            &DataConfig {
                n_eval: 0,
                ..DataConfig::default()
            },
            4
        )
        .is_err());
        assert!(make_dataset(
            &model,
            &DataConfig {
                beta: f64::NAN,
                ..DataConfig::default()
            },
            4
        )
        .is_err());
    }

    #[test]
    fn same_seed_same_data() {
        let model = base(5);
        let a = make_dataset(&model, &DataConfig::default(), 9).unwrap();
        let b = make_dataset(&model, &DataConfig::default(), 9).unwrap();
        assert_eq!(a, b);
    }
}
