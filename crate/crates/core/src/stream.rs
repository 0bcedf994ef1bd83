//! Gradient streams on disk: the planted truth plus every sample.

use std::path::Path;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, UnitVector};
use crate::synthgrad::{sample_stream, GradientSample, SpuriousSpec, SynthConfig, TaskSpec};

pub const STREAM_KIND: &str = "gradient_stream";

#[derive(Debug, Clone, PartialEq)]
pub struct GradientStream {
    pub config: SynthConfig,
    pub seed: u64,
    pub spurious: SpuriousSpec,
    pub task: TaskSpec,
    pub samples: Vec<GradientSample>,
}

impl GradientStream {
    pub fn generate(config: &SynthConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (spurious, task) = config.build(seed)?;
        let samples = sample_stream(&spurious, &task, seed, 0, config.n)?;
        Ok(GradientStream {
            config: *config,
            seed,
            spurious,
            task,
            samples,
        })
    }

    /// `Σ_i g_i`.
    pub fn accumulated(&self) -> Result<Matrix> {
        crate::synthgrad::accumulate_delta(&self.samples)
    }

    /// Samples are stored as one `N × (d_out·d_in)` tensor of full
    /// gradients plus the per-sample α; both parts are rebuilt on load.
    pub fn to_container(&self, fingerprint: &str) -> Result<Container> {
        let mut c = Container::new(STREAM_KIND, fingerprint);
        let synth = toml::Value::try_from(self.config).map_err(|e| Error::Config(e.to_string()))?;
        c.meta.insert("synth".into(), synth);
        c.meta.insert("seed".into(), toml::Value::String(self.seed.to_string()));
        c.meta
            .insert("samples".into(), toml::Value::Integer(self.samples.len() as i64));
        let (d_out, d_in) = self.task.shape();
        c.push("truth/u_s", row(self.spurious.u_s.as_slice()));
        c.push("truth/v_s", row(self.spurious.v_s.as_slice()));
        c.push("task/mu_t", self.task.mu_t.clone());
        let mut g = Vec::with_capacity(self.samples.len() * d_out * d_in);
        for s in &self.samples {
            g.extend_from_slice(s.g.as_slice());
        }
        c.push("g", Matrix::new(self.samples.len(), d_out * d_in, g)?);
        c.push("alpha", row(&self.samples.iter().map(|s| s.alpha).collect::<Vec<_>>()));
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let bad = |message: String| Error::Format { offset: 0, message };
        if c.kind != STREAM_KIND {
            return Err(bad(format!("expected a gradient stream, found `{}`", c.kind)));
        }
        let config: SynthConfig = c
            .meta
            .get("synth")
            .cloned()
            .ok_or_else(|| bad("stream manifest lacks `synth`".into()))?
            .try_into()
            .map_err(|e: toml::de::Error| bad(format!("synth: {}", e.message())))?;
        let seed: u64 = c
            .meta
            .get("seed")
            .and_then(|v| v.as_str())
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("stream manifest lacks a valid `seed`".into()))?;
        let u_s = UnitVector::new(c.tensor("truth/u_s")?.as_slice().to_vec())?;
        let v_s = UnitVector::new(c.tensor("truth/v_s")?.as_slice().to_vec())?;
        let spurious = SpuriousSpec::new(u_s, v_s, config.alpha_mean, config.alpha_jitter)?;
        let task = TaskSpec::new(c.tensor("task/mu_t")?.clone(), config.r_t, config.mu_frob, config.tau)?;
        let (d_out, d_in) = task.shape();
        if spurious.shape() != (d_out, d_in) {
            return Err(bad("truth and task mean shapes differ".into()));
        }
        let g = c.tensor("g")?;
        let alpha = c.tensor("alpha")?;
        if g.cols() != d_out * d_in || alpha.as_slice().len() != g.rows() {
            return Err(bad("sample tensors do not match the stream shape".into()));
        }
        let direction = spurious.direction();
        let samples = (0..g.rows())
            .map(|i| {
                let a = alpha.as_slice()[i];
                let g = Matrix::new(d_out, d_in, g.row(i).to_vec())?;
                let g_spurious = direction.scaled(a);
                Ok(GradientSample {
                    g_task: g.sub(&g_spurious)?,
                    g,
                    g_spurious,
                    alpha: a,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GradientStream {
            config,
            seed,
            spurious,
            task,
            samples,
        })
    }

    pub fn save(&self, path: &Path, fingerprint: &str, force: bool) -> Result<()> {
        self.to_container(fingerprint)?.write(path, force)
    }

    pub fn load(path: &Path) -> Result<Self> {
        GradientStream::from_container(&Container::read(path)?)
    }
}

fn row(v: &[f64]) -> Matrix {
    Matrix::new(1, v.len(), v.to_vec()).expect("finite vector")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SynthConfig {
        SynthConfig {
            d_out: 6,
            d_in: 5,
            n: 7,
            r_t: 2,
            tau: 0.5,
            alpha_jitter: 0.2,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let s = GradientStream::generate(&cfg(), 3).unwrap();
        let bytes = s.to_container("fp").unwrap().to_bytes().unwrap();
        let back = GradientStream::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.to_container("fp").unwrap().to_bytes().unwrap(), bytes);
        assert_eq!(back.config, s.config);
        assert_eq!(back.seed, 3);
        for (a, b) in back.samples.iter().zip(&s.samples) {
            assert_eq!(a.g, b.g);
            assert_eq!(a.alpha, b.alpha);
            assert!(a.g_spurious.sub(&b.g_spurious).unwrap().frobenius_norm() < 1e-12);
        }
        assert_eq!(back.accumulated().unwrap(), s.accumulated().unwrap());
    }

    #[test]
    fn large_seed_survives() {
        let s = GradientStream::generate(&SynthConfig { n: 1, ..cfg() }, u64::MAX).unwrap();
        let c = s.to_container("fp").unwrap();
        assert_eq!(GradientStream::from_container(&c).unwrap().seed, u64::MAX);
        assert_eq!(GradientStream::from_container(&c).unwrap().samples.len(), 1);
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let c = Container::new("checkpoint", "x");
        assert!(matches!(GradientStream::from_container(&c), Err(Error::Format { .. })));
    }
}
