use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identify::{extract_probe, ProbePair};
use crate::linalg::Matrix;
use crate::project::{spurious_component, ProjectionPlan};
use crate::rng;
use crate::trainkit::checkpoint::{Checkpoint, Stage};
use crate::trainkit::data::{make_dataset, DataConfig, SpuriousDataset};
use crate::trainkit::model::{ModelConfig, ToyModel};
use crate::trainkit::optim::{step, OptimConfig, OptimizerState};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub optim: OptimConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()
    }

    pub fn fingerprint(&self) -> Result<String> {
        crate::config::fingerprint(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub eval_loss: f64,
}

/// `h_l = u_lᵀ W_l v_l` and `‖W_l‖_F` after every optimizer step; row 0 is
/// the starting point.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConstraintTrace {
    pub h: Vec<Vec<f64>>,
    pub w_norm: Vec<Vec<f64>>,
}

impl ConstraintTrace {
    fn record(&mut self, model: &ToyModel, plan: &ProjectionPlan) -> Result<()> {
        let mut h = Vec::with_capacity(model.num_sites());
        let mut n = Vec::with_capacity(model.num_sites());
        for l in 0..model.num_sites() {
            let w = model.effective_weight(l);
            h.push(match plan.probe_for_site(l) {
                Some(p) => spurious_component(&w, p)?,
                None => 0.0,
            });
            n.push(w.frobenius_norm());
        }
        self.h.push(h);
        self.w_norm.push(n);
        Ok(())
    }

    /// Largest `|h_l(t) − h_l(0)| / (1 + ‖W_l(t)‖_F)` over steps and sites.
    pub fn max_scaled_drift(&self) -> f64 {
        let Some(h0) = self.h.first() else { return 0.0 };
        self.h
            .iter()
            .zip(&self.w_norm)
            .flat_map(|(h, n)| h.iter().zip(h0).zip(n).map(|((a, b), w)| (a - b).abs() / (1.0 + w)))
            .fold(0.0, f64::max)
    }

    /// Largest `|h_l(T) − h_l(0)|` per site at the final step.
    pub fn final_drift(&self) -> Vec<f64> {
        match (self.h.first(), self.h.last()) {
            (Some(a), Some(b)) => a.iter().zip(b).map(|(x, y)| (y - x).abs()).collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub model: ToyModel,
    pub history: Vec<EvalPoint>,
    pub trace: Option<ConstraintTrace>,
}

/// Everything a run depends on besides its stage: pretrained model and data.
#[derive(Debug, Clone)]
pub struct Lab {
    pub config: TrainConfig,
    pub fingerprint: String,
    pub base: ToyModel,
    pub data: SpuriousDataset,
}

impl Lab {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let base = ToyModel::init(&config.model, config.seed)?;
        let data = make_dataset(&base, &config.data, config.seed)?;
        Ok(Lab {
            config: config.clone(),
            fingerprint: config.fingerprint()?,
            base,
            data,
        })
    }

    /// Pretrained model with freshly initialised adapters.
    pub fn fresh_model(&self) -> Result<ToyModel> {
        let mut m = self.base.clone();
        m.reset_adapters(&self.config.model, self.config.seed)?;
        Ok(m)
    }

    /// Model carrying a checkpoint's adapters.
    pub fn model_from(&self, ckpt: &Checkpoint) -> Result<ToyModel> {
        let mut m = self.base.clone();
        ckpt.load_into(&mut m)?;
        Ok(m)
    }

    /// Trains from fresh adapters. `plan` projects every step; `track`
    /// records the constraint statistic against its probes without
    /// projecting.
    pub fn run(&self, plan: Option<&ProjectionPlan>, track: Option<&ProjectionPlan>) -> Result<TrainRun> {
        let mut model = self.fresh_model()?;
        let (history, trace, steps) = train_loop(
            &mut model,
            &self.data,
            &self.config.optim,
            plan,
            track,
            self.config.seed,
        )?;
        let (stage, probes) = match plan {
            Some(p) => (Stage::Projected, Some(p.probes().to_vec())),
            None => (Stage::Naive, None),
        };
        let checkpoint = Checkpoint::new(&self.fingerprint, stage, steps, &model, probes)?;
        Ok(TrainRun {
            checkpoint,
            model,
            history,
            trace,
        })
    }

    pub fn train_naive(&self) -> Result<TrainRun> {
        self.run(None, None)
    }

    /// `probes` must hold one frozen probe per site.
    pub fn train_projected(&self, probes: &[ProbePair]) -> Result<TrainRun> {
        let plan = ProjectionPlan::per_site(probes.to_vec())?;
        if plan.site_shapes() != self.base.site_shapes().as_slice() {
            return Err(Error::Dimension("probes do not match model sites".into()));
        }
        self.run(Some(&plan), None)
    }

    /// Top-1 singular pair of every site's accumulated update.
    pub fn extract_probes(&self, ckpt: &Checkpoint) -> Result<Vec<ProbePair>> {
        ckpt.deltas()
            .iter()
            .enumerate()
            .map(|(l, d)| extract_probe(d, l))
            .collect()
    }
}

pub fn train_naive(config: &TrainConfig) -> Result<TrainRun> {
    Lab::new(config)?.train_naive()
}

pub fn train_projected(config: &TrainConfig, probes: &[ProbePair]) -> Result<TrainRun> {
    Lab::new(config)?.train_projected(probes)
}

/// One fixed seeded permutation of the training rows, reused every epoch.
pub fn shuffle_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::substream(seed, "shuffle"));
    order
}

type LoopOutput = (Vec<EvalPoint>, Option<ConstraintTrace>, u64);

/// Minibatch training in place. Records an evaluation point before the first
/// step and after every epoch.
pub fn train_loop(
    model: &mut ToyModel,
    data: &SpuriousDataset,
    optim: &OptimConfig,
    plan: Option<&ProjectionPlan>,
    track: Option<&ProjectionPlan>,
    seed: u64,
) -> Result<LoopOutput> {
    optim.validate()?;
    let order = shuffle_order(data.train_inputs.rows(), seed);
    let batches: Vec<(Matrix, Matrix)> = order
        .chunks(optim.batch_size)
        .map(|idx| data.train_batch(idx))
        .collect();
    let mut state = OptimizerState::new(optim.clone());
    let watch = plan.or(track);
    let mut trace = watch.map(|_| ConstraintTrace::default());
    if let (Some(t), Some(p)) = (trace.as_mut(), watch) {
        t.record(model, p)?;
    }
    let evaluate = |m: &ToyModel, epoch: usize, step: u64| -> Result<EvalPoint> {
        Ok(EvalPoint {
            epoch,
            step,
            train_loss: m.loss(&data.train_inputs, &data.train_targets)?,
            eval_loss: m.loss(&data.eval_inputs, &data.eval_targets)?,
        })
    };
    let mut history = vec![evaluate(model, 0, 0)?];
    for epoch in 1..=optim.epochs {
        for (x, y) in &batches {
            let (loss, grads) = model.site_gradients(x, y)?;
            let diverged = !loss.is_finite() || grads.iter().any(|g| !g.is_finite());
            if diverged {
                return Err(Error::Diverged {
                    step: state.step_count as usize,
                    loss,
                });
            }
            step(&mut state, model, &grads, plan)?;
            if let (Some(t), Some(p)) = (trace.as_mut(), watch) {
                t.record(model, p)?;
            }
        }
        let point = evaluate(model, epoch, state.step_count)?;
        if !point.train_loss.is_finite() {
            return Err(Error::Diverged {
                step: state.step_count as usize,
                loss: point.train_loss,
            });
        }
        history.push(point);
    }
    Ok((history, trace, state.step_count))
}
