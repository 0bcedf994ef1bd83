use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// How adapters are stored and updated.
///
/// `Joint` keeps a full `ΔW` per site and applies W-space updates to it
/// directly. `Factored` keeps `B · A` and maps the W-space gradient onto the
/// factors by the product rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    #[default]
    Joint,
    Factored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub sites: usize,
    /// Adapter rank, used in factored mode.
    pub rank: usize,
    pub activation: Activation,
    pub lora_scale: f64,
    pub adapter_mode: AdapterMode,
    /// Spread of the pretrained weights around identity.
    pub pretrained_noise: f64,
    /// Std of the initial `A` factor in factored mode.
    pub factor_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_in: 32,
            d_out: 32,
            sites: 4,
            rank: 8,
            activation: Activation::Identity,
            lora_scale: 1.0,
            adapter_mode: AdapterMode::Joint,
            pretrained_noise: 0.1,
            factor_init_std: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_out == 0 || self.sites == 0 {
            return Err(Error::Parameter(
                "model dimensions and site count must be positive".into(),
            ));
        }
        if self.rank == 0 || self.rank > self.d_in.min(self.d_out) {
            return Err(Error::Parameter(format!(
                "adapter rank {} must be in 1..={}",
                self.rank,
                self.d_in.min(self.d_out)
            )));
        }
        if !(self.lora_scale > 0.0 && self.lora_scale.is_finite()) {
            return Err(Error::Parameter("lora_scale must be positive".into()));
        }
        if !(self.pretrained_noise >= 0.0 && self.factor_init_std >= 0.0) {
            return Err(Error::Parameter("init spreads must be non-negative".into()));
        }
        Ok(())
    }

    /// Site `0` maps `d_in → d_out`; later sites are `d_out × d_out`.
    pub fn site_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.sites)
            .map(|l| {
                if l == 0 {
                    (self.d_out, self.d_in)
                } else {
                    (self.d_out, self.d_out)
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    Joint {
        delta: Matrix,
    },
    /// `ΔW = scale · b · a`, `a` is `r × d_in`, `b` is `d_out × r`.
    Factored {
        a: Matrix,
        b: Matrix,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Site {
    pub w0: Matrix,
    pub adapter: Adapter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    sites: Vec<Site>,
    activation: Activation,
    lora_scale: f64,
    mode: AdapterMode,
}

/// Per-site activations kept for the backward pass.
struct Trace {
    // inputs to each site, n × d
    inputs: Vec<Matrix>,
    // pre-activations of each site
    pre: Vec<Matrix>,
}

impl ToyModel {
    /// Pretrained weights `I + noise · G / √d` from the `pretrained` stream,
    /// adapters at their zero-product start.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let sites = cfg
            .site_shapes()
            .into_iter()
            .enumerate()
            .map(|(l, (r, c))| {
                let mut g = rng::keyed(seed, "pretrained", l as u64);
                let noise = rng::gaussian_matrix(&mut g, r, c, cfg.pretrained_noise / (c as f64).sqrt());
                let w0 = Matrix::from_fn(r, c, |i, j| if i == j { 1.0 } else { 0.0 }).add(&noise)?;
                Ok(Site {
                    w0,
                    adapter: Adapter::Joint {
                        delta: Matrix::zeros(r, c),
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut model = ToyModel {
            sites,
            activation: cfg.activation,
            lora_scale: cfg.lora_scale,
            mode: cfg.adapter_mode,
        };
        model.reset_adapters(cfg, seed)?;
        Ok(model)
    }

    pub fn from_sites(sites: Vec<Site>, activation: Activation, lora_scale: f64) -> Result<Self> {
        if sites.is_empty() {
            return Err(Error::Parameter("model needs at least one site".into()));
        }
        let mode = match sites[0].adapter {
            Adapter::Joint { .. } => AdapterMode::Joint,
            Adapter::Factored { .. } => AdapterMode::Factored,
        };
        for (l, s) in sites.iter().enumerate() {
            if l > 0 && sites[l - 1].w0.rows() != s.w0.cols() {
                return Err(Error::Dimension(format!(
                    "site {l} input does not match site {} output",
                    l - 1
                )));
            }
            let ok = match &s.adapter {
                Adapter::Joint { delta } => mode == AdapterMode::Joint && delta.shape() == s.w0.shape(),
                Adapter::Factored { a, b } => {
                    mode == AdapterMode::Factored
                        && a.cols() == s.w0.cols()
                        && b.rows() == s.w0.rows()
                        && a.rows() == b.cols()
                }
            };
            if !ok {
                return Err(Error::Dimension(format!("site {l} adapter does not fit its weight")));
            }
        }
        Ok(ToyModel {
            sites,
            activation,
            lora_scale,
            mode,
        })
    }

    /// Zero the adapter product: `ΔW = 0` in joint mode, `B = 0` with a small
    /// Gaussian `A` in factored mode.
    pub fn reset_adapters(&mut self, cfg: &ModelConfig, seed: u64) -> Result<()> {
        if cfg.site_shapes().len() != self.sites.len() {
            return Err(Error::Dimension("config does not match model".into()));
        }
        self.mode = cfg.adapter_mode;
        self.lora_scale = cfg.lora_scale;
        for (l, site) in self.sites.iter_mut().enumerate() {
            let (r, c) = site.w0.shape();
            site.adapter = match cfg.adapter_mode {
                AdapterMode::Joint => Adapter::Joint {
                    delta: Matrix::zeros(r, c),
                },
                AdapterMode::Factored => {
                    let mut g = rng::keyed(seed, "adapter-init", l as u64);
                    Adapter::Factored {
                        a: rng::gaussian_matrix(&mut g, cfg.rank, c, cfg.factor_init_std),
                        b: Matrix::zeros(r, cfg.rank),
                    }
                }
            };
        }
        Ok(())
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn num_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_scale
    }

    pub fn adapter_mode(&self) -> AdapterMode {
        self.mode
    }

    pub fn d_in(&self) -> usize {
        self.sites[0].w0.cols()
    }

    pub fn d_out(&self) -> usize {
        self.sites[self.sites.len() - 1].w0.rows()
    }

    pub fn site_shapes(&self) -> Vec<(usize, usize)> {
        self.sites.iter().map(|s| s.w0.shape()).collect()
    }

    /// Adapter contribution `ΔW_l` of site `l`.
    pub fn delta_w(&self, l: usize) -> Matrix {
        match &self.sites[l].adapter {
            Adapter::Joint { delta } => delta.clone(),
            Adapter::Factored { a, b } => b.matmul(a).expect("adapter shapes checked").scaled(self.lora_scale),
        }
    }

    pub fn deltas(&self) -> Vec<Matrix> {
        (0..self.sites.len()).map(|l| self.delta_w(l)).collect()
    }

    /// `W_l = W0_l + ΔW_l`
    pub fn effective_weight(&self, l: usize) -> Matrix {
        self.sites[l].w0.add(&self.delta_w(l)).expect("same shape")
    }

    /// Trainable tensors in a fixed order: `ΔW_l` per site, or `A_l, B_l`.
    pub fn params(&self) -> Vec<&Matrix> {
        self.sites
            .iter()
            .flat_map(|s| match &s.adapter {
                Adapter::Joint { delta } => vec![delta],
                Adapter::Factored { a, b } => vec![a, b],
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.sites
            .iter_mut()
            .flat_map(|s| match &mut s.adapter {
                Adapter::Joint { delta } => vec![delta],
                Adapter::Factored { a, b } => vec![a, b],
            })
            .collect()
    }

    /// Maps per-site W-space gradients onto the trainable tensors, matching
    /// the order of [`ToyModel::params`]. Factored: `∂A = s Bᵀ G`, `∂B = s G Aᵀ`.
    pub fn param_grads(&self, w_grads: &[Matrix]) -> Result<Vec<Matrix>> {
        if w_grads.len() != self.sites.len() {
            return Err(Error::Dimension(format!(
                "{} gradients for {} sites",
                w_grads.len(),
                self.sites.len()
            )));
        }
        let mut out = Vec::new();
        for (site, g) in self.sites.iter().zip(w_grads) {
            if g.shape() != site.w0.shape() {
                return Err(Error::Dimension("gradient does not match site shape".into()));
            }
            match &site.adapter {
                Adapter::Joint { .. } => out.push(g.clone()),
                Adapter::Factored { a, b } => {
                    out.push(b.transpose().matmul(g)?.scaled(self.lora_scale));
                    out.push(g.matmul(&a.transpose())?.scaled(self.lora_scale));
                }
            }
        }
        Ok(out)
    }

    fn run(&self, x: &Matrix, keep: bool) -> Result<(Matrix, Option<Trace>)> {
        if x.cols() != self.d_in() {
            return Err(Error::Dimension(format!(
                "input has {} features, model expects {}",
                x.cols(),
                self.d_in()
            )));
        }
        let last = self.sites.len() - 1;
        let mut trace = keep.then(|| Trace {
            inputs: Vec::new(),
            pre: Vec::new(),
        });
        let mut h = x.clone();
        for l in 0..self.sites.len() {
            let z = h.matmul(&self.effective_weight(l).transpose())?;
            let next = if l < last {
                let mut a = z.clone();
                a.as_mut_slice().iter_mut().for_each(|v| *v = self.activation.apply(*v));
                a
            } else {
                z.clone()
            };
            if let Some(t) = trace.as_mut() {
                t.inputs.push(h);
                t.pre.push(z);
            }
            h = next;
        }
        Ok((h, trace))
    }

    /// Output for one input vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = Matrix::new(1, x.len(), x.to_vec())?;
        Ok(self.run(&m, false)?.0.into_vec())
    }

    /// Outputs for a batch laid out one example per row.
    pub fn forward_batch(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.run(x, false)?.0)
    }

    /// `(1 / 2n) Σ ‖ŷ − y‖²`
    pub fn loss(&self, x: &Matrix, y: &Matrix) -> Result<f64> {
        let out = self.forward_batch(x)?;
        mse(&out, y)
    }

    /// Loss and its gradient with respect to every effective site weight.
    pub fn site_gradients(&self, x: &Matrix, y: &Matrix) -> Result<(f64, Vec<Matrix>)> {
        if x.rows() == 0 || x.rows() != y.rows() {
            return Err(Error::Dimension("batch must be nonempty with matching targets".into()));
        }
        if y.cols() != self.d_out() {
            return Err(Error::Dimension(format!(
                "targets have {} features, model outputs {}",
                y.cols(),
                self.d_out()
            )));
        }
        let (out, trace) = self.run(x, true)?;
        let trace = trace.expect("kept");
        let loss = mse(&out, y)?;
        let n = x.rows() as f64;
        let mut dz = out.sub(y)?.scaled(1.0 / n);
        let mut grads = vec![Matrix::zeros(1, 1); self.sites.len()];
        for l in (0..self.sites.len()).rev() {
            grads[l] = dz.transpose().matmul(&trace.inputs[l])?;
            if l > 0 {
                let mut dh = dz.matmul(&self.effective_weight(l))?;
                for (d, z) in dh.as_mut_slice().iter_mut().zip(trace.pre[l - 1].as_slice()) {
                    *d *= self.activation.derivative(*z);
                }
                dz = dh;
            }
        }
        Ok((loss, grads))
    }
}

pub fn mse(out: &Matrix, y: &Matrix) -> Result<f64> {
    if out.shape() != y.shape() {
        return Err(Error::Dimension("outputs and targets differ in shape".into()));
    }
    let n = out.rows().max(1) as f64;
    let ss: f64 = out
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(0.5 * ss / n)
}
