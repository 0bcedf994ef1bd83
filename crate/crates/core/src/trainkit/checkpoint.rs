use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::identify::ProbePair;
use crate::linalg::{Matrix, UnitVector};
use crate::trainkit::model::{Adapter, AdapterMode, ToyModel};

pub const CHECKPOINT_KIND: &str = "checkpoint";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Naive,
    Projected,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Naive => "naive",
            Stage::Projected => "projected",
        }
    }

    fn parse(s: &str) -> Option<Stage> {
        match s {
            "naive" => Some(Stage::Naive),
            "projected" => Some(Stage::Projected),
            _ => None,
        }
    }
}

/// Adapters of a finished run. Pretrained weights are not stored; they are
/// regenerated from the config seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    fingerprint: String,
    stage: Stage,
    step_count: u64,
    adapter_mode: AdapterMode,
    lora_scale: f64,
    adapters: Vec<Adapter>,
    probes: Option<Vec<ProbePair>>,
}

impl Checkpoint {
    pub fn new(
        fingerprint: &str,
        stage: Stage,
        step_count: u64,
        model: &ToyModel,
        probes: Option<Vec<ProbePair>>,
    ) -> Result<Self> {
        let sites = model.num_sites();
        match (stage, &probes) {
            (Stage::Naive, Some(_)) => return Err(Error::Parameter("naive checkpoints carry no probes".into())),
            (Stage::Projected, None) => return Err(Error::Parameter("projected checkpoints need probes".into())),
            (Stage::Projected, Some(p)) if p.len() != sites => {
                return Err(Error::Parameter(format!("{} probes for {sites} sites", p.len())))
            }
            _ => {}
        }
        if let Some(p) = &probes {
            for (l, probe) in p.iter().enumerate() {
                if probe.site_id() != l || probe.shape() != model.sites()[l].w0.shape() {
                    return Err(Error::Dimension(format!("probe {l} does not fit site {l}")));
                }
            }
        }
        Ok(Checkpoint {
            fingerprint: fingerprint.to_string(),
            stage,
            step_count,
            adapter_mode: model.adapter_mode(),
            lora_scale: model.lora_scale(),
            adapters: model.sites().iter().map(|s| s.adapter.clone()).collect(),
            probes,
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn adapter_mode(&self) -> AdapterMode {
        self.adapter_mode
    }

    pub fn num_sites(&self) -> usize {
        self.adapters.len()
    }

    pub fn adapters(&self) -> &[Adapter] {
        &self.adapters
    }

    pub fn probes(&self) -> Option<&[ProbePair]> {
        self.probes.as_deref()
    }

    pub fn delta_w(&self, l: usize) -> Matrix {
        match &self.adapters[l] {
            Adapter::Joint { delta } => delta.clone(),
            Adapter::Factored { a, b } => b.matmul(a).expect("adapter shapes checked").scaled(self.lora_scale),
        }
    }

    pub fn deltas(&self) -> Vec<Matrix> {
        (0..self.adapters.len()).map(|l| self.delta_w(l)).collect()
    }

    /// Copies the stored adapters into a model with matching pretrained sites.
    pub fn load_into(&self, model: &mut ToyModel) -> Result<()> {
        if model.num_sites() != self.adapters.len() {
            return Err(Error::Dimension("checkpoint and model differ in site count".into()));
        }
        let sites = model
            .sites()
            .iter()
            .zip(&self.adapters)
            .map(|(s, a)| crate::trainkit::model::Site {
                w0: s.w0.clone(),
                adapter: a.clone(),
            })
            .collect();
        *model = ToyModel::from_sites(sites, model.activation(), self.lora_scale)?;
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(CHECKPOINT_KIND, &self.fingerprint);
        let mode = match self.adapter_mode {
            AdapterMode::Joint => "joint",
            AdapterMode::Factored => "factored",
        };
        c.meta.insert("stage".into(), self.stage.as_str().into());
        c.meta
            .insert("step_count".into(), toml::Value::Integer(self.step_count as i64));
        c.meta.insert("adapter_mode".into(), mode.into());
        c.meta.insert("lora_scale".into(), self.lora_scale.into());
        c.meta
            .insert("sites".into(), toml::Value::Integer(self.adapters.len() as i64));
        c.meta.insert("has_probes".into(), self.probes.is_some().into());
        for (l, a) in self.adapters.iter().enumerate() {
            match a {
                Adapter::Joint { delta } => c.push(format!("site{l}/delta"), delta.clone()),
                Adapter::Factored { a, b } => {
                    c.push(format!("site{l}/a"), a.clone());
                    c.push(format!("site{l}/b"), b.clone());
                }
            }
        }
        if let Some(probes) = &self.probes {
            for p in probes {
                let l = p.site_id();
                c.push(format!("probe{l}/u"), row(p.u().as_slice()));
                c.push(format!("probe{l}/v"), row(p.v().as_slice()));
                c.push(format!("probe{l}/sigma"), row(&[p.sigma()]));
            }
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let bad = |message: String| Error::Format { offset: 0, message };
        if c.kind != CHECKPOINT_KIND {
            return Err(bad(format!("expected a checkpoint, found `{}`", c.kind)));
        }
        let get = |k: &str| {
            c.meta
                .get(k)
                .ok_or_else(|| bad(format!("checkpoint manifest lacks `{k}`")))
        };
        let stage = get("stage")?
            .as_str()
            .and_then(Stage::parse)
            .ok_or_else(|| bad("unknown stage".into()))?;
        let step_count = get("step_count")?
            .as_integer()
            .filter(|v| *v >= 0)
            .ok_or_else(|| bad("step_count must be a non-negative integer".into()))? as u64;
        let adapter_mode = match get("adapter_mode")?.as_str() {
            Some("joint") => AdapterMode::Joint,
            Some("factored") => AdapterMode::Factored,
            _ => return Err(bad("unknown adapter_mode".into())),
        };
        let lora_scale = get("lora_scale")?
            .as_float()
            .ok_or_else(|| bad("lora_scale must be a float".into()))?;
        let sites = get("sites")?
            .as_integer()
            .filter(|v| *v > 0)
            .ok_or_else(|| bad("sites must be a positive integer".into()))? as usize;
        let has_probes = get("has_probes")?
            .as_bool()
            .ok_or_else(|| bad("has_probes must be a bool".into()))?;

        let adapters = (0..sites)
            .map(|l| {
                Ok(match adapter_mode {
                    AdapterMode::Joint => Adapter::Joint {
                        delta: c.tensor(&format!("site{l}/delta"))?.clone(),
                    },
                    AdapterMode::Factored => Adapter::Factored {
                        a: c.tensor(&format!("site{l}/a"))?.clone(),
                        b: c.tensor(&format!("site{l}/b"))?.clone(),
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let probes = if has_probes {
            Some(
                (0..sites)
                    .map(|l| {
                        let u = UnitVector::new(c.tensor(&format!("probe{l}/u"))?.as_slice().to_vec())?;
                        let v = UnitVector::new(c.tensor(&format!("probe{l}/v"))?.as_slice().to_vec())?;
                        let sigma = c.tensor(&format!("probe{l}/sigma"))?.as_slice()[0];
                        ProbePair::new(u, v, sigma, l)
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        if (stage == Stage::Projected) != probes.is_some() {
            return Err(bad("probe presence does not match stage".into()));
        }
        Ok(Checkpoint {
            fingerprint: c.fingerprint.clone(),
            stage,
            step_count,
            adapter_mode,
            lora_scale,
            adapters,
            probes,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Checkpoint::from_container(&Container::from_bytes(bytes)?)
    }

    pub fn save(&self, path: &Path, force: bool) -> Result<()> {
        self.to_container().write(path, force)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_container(&Container::read(path)?)
    }
}

fn row(v: &[f64]) -> Matrix {
    Matrix::new(1, v.len(), v.to_vec()).expect("finite vector")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::trainkit::model::ModelConfig;

    fn model(mode: AdapterMode) -> ToyModel {
        let cfg = ModelConfig {
            d_in: 4,
            d_out: 3,
            sites: 2,
            rank: 2,
            adapter_mode: mode,
            ..ModelConfig::default()
        };
        let mut m = ToyModel::init(&cfg, 1).unwrap();
        let mut g = rng::substream(1, "fill");
        for p in m.params_mut() {
            *p = rng::gaussian_matrix(&mut g, p.rows(), p.cols(), 1.0);
        }
        m
    }

    fn probes(m: &ToyModel) -> Vec<ProbePair> {
        let mut g = rng::substream(2, "probes");
        m.site_shapes()
            .iter()
            .enumerate()
            .map(|(l, &(r, c))| {
                ProbePair::new(rng::unit_vector(&mut g, r), rng::unit_vector(&mut g, c), 0.5, l).unwrap()
            })
            .collect()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for mode in [AdapterMode::Joint, AdapterMode::Factored] {
            let m = model(mode);
            for ck in [
                Checkpoint::new("abc", Stage::Naive, 7, &m, None).unwrap(),
                Checkpoint::new("abc", Stage::Projected, 9, &m, Some(probes(&m))).unwrap(),
            ] {
                let bytes = ck.to_bytes().unwrap();
                let back = Checkpoint::from_bytes(&bytes).unwrap();
                assert_eq!(back, ck);
                assert_eq!(back.to_bytes().unwrap(), bytes);
            }
        }
    }

    #[test]
    fn stage_and_probe_invariants() {
        let m = model(AdapterMode::Joint);
        assert!(Checkpoint::new("x", Stage::Naive, 0, &m, Some(probes(&m))).is_err());
        assert!(Checkpoint::new("x", Stage::Projected, 0, &m, None).is_err());
        let mut short = probes(&m);
        short.pop();
        assert!(Checkpoint::new("x", Stage::Projected, 0, &m, Some(short)).is_err());
    }

    #[test]
    fn load_into_restores_adapters() {
        let m = model(AdapterMode::Factored);
        let ck = Checkpoint::new("x", Stage::Naive, 3, &m, None).unwrap();
        let cfg = ModelConfig {
            d_in: 4,
            d_out: 3,
            sites: 2,
            rank: 2,
            adapter_mode: AdapterMode::Factored,
            ..ModelConfig::default()
        };
        let mut fresh = ToyModel::init(&cfg, 1).unwrap();
        ck.load_into(&mut fresh).unwrap();
        assert_eq!(fresh, m);
        assert_eq!(ck.deltas(), m.deltas());
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let c = Container::new("gradient_stream", "x");
        assert!(matches!(Checkpoint::from_container(&c), Err(Error::Format { .. })));
    }
}
