//! Diagnostics: rank-1 alignment ratios, removal fractions, selectivity,
//! spurious drift, and report files.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identify::{extract_probe, IdentifyRow, ProbePair};
use crate::linalg::{bilinear, inner_product, Matrix};
use crate::project::project_site_gradient;
use crate::synthgrad::{accumulate_stream, sample_gradient, GradientSample, SpuriousSpec, SynthConfig};
use crate::trainkit::{Checkpoint, EvalPoint, ToyModel};

/// Denominators at or below this are treated as zero.
pub const SATURATION_FLOOR: f64 = 1e-15;

/// ρ values below this count as numerically zero when forming reductions.
pub const RHO_FLOOR: f64 = 1e-12;

/// `|⟨ΔW, u vᵀ⟩| / ‖ΔW‖_F`.
pub fn rank1_alignment_ratio(delta_w: &Matrix, probe: &ProbePair) -> Result<f64> {
    if delta_w.shape() != probe.shape() {
        return Err(Error::Dimension(format!(
            "update is {:?} but probe is {:?}",
            delta_w.shape(),
            probe.shape()
        )));
    }
    let norm = delta_w.frobenius_norm();
    if norm == 0.0 {
        return Err(Error::Degenerate("alignment ratio of a zero update".into()));
    }
    let c = bilinear(probe.u().as_slice(), delta_w, probe.v().as_slice())?;
    // rounding can push |c| a hair past the norm
    Ok((c.abs() / norm).min(1.0))
}

/// A ratio `num / den` that stays finite when the denominator is at the
/// numerical floor. When saturated, `value` is `num / floor`, a lower bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub value: f64,
    pub saturated: bool,
}

impl Reduction {
    pub fn of(num: f64, den: f64, floor: f64) -> Self {
        if den <= floor {
            Reduction {
                value: if num <= floor { 1.0 } else { num / floor },
                saturated: num > floor,
            }
        } else {
            Reduction {
                value: num / den,
                saturated: false,
            }
        }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.saturated {
            write!(f, ">= {:.3e}x", self.value)
        } else {
            write!(f, "{:.2}x", self.value)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoSummary {
    pub mean: f64,
    pub median: f64,
    pub max: f64,
}

impl RhoSummary {
    pub fn of(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        RhoSummary {
            mean: sorted.iter().sum::<f64>() / n as f64,
            median,
            max: sorted[n - 1],
        }
    }
}

/// Naive vs projected leakage, measured against the projected run's probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub rho_naive: Vec<f64>,
    pub rho_projected: Vec<f64>,
    pub naive: RhoSummary,
    pub projected: RhoSummary,
    pub site_reductions: Vec<Reduction>,
    /// Mean ρ (naive) over mean ρ (projected).
    pub mean_reduction: Reduction,
    /// Median ρ (naive) over median ρ (projected).
    pub median_reduction: Reduction,
    pub max_reduction: Reduction,
}

impl AlignmentReport {
    pub fn from_rhos(rho_naive: Vec<f64>, rho_projected: Vec<f64>) -> Result<Self> {
        if rho_naive.is_empty() || rho_naive.len() != rho_projected.len() {
            return Err(Error::Dimension(format!(
                "{} naive sites vs {} projected sites",
                rho_naive.len(),
                rho_projected.len()
            )));
        }
        let naive = RhoSummary::of(&rho_naive);
        let projected = RhoSummary::of(&rho_projected);
        let site_reductions = rho_naive
            .iter()
            .zip(&rho_projected)
            .map(|(&n, &p)| Reduction::of(n, p, RHO_FLOOR))
            .collect();
        Ok(AlignmentReport {
            mean_reduction: Reduction::of(naive.mean, projected.mean, RHO_FLOOR),
            median_reduction: Reduction::of(naive.median, projected.median, RHO_FLOOR),
            max_reduction: Reduction::of(naive.max, projected.max, RHO_FLOOR),
            site_reductions,
            naive,
            projected,
            rho_naive,
            rho_projected,
        })
    }

    /// Both sets of updates are scored against the same per-site probes.
    pub fn compare(naive: &[Matrix], projected: &[Matrix], probes: &[ProbePair]) -> Result<Self> {
        if naive.len() != probes.len() || projected.len() != probes.len() {
            return Err(Error::Dimension("site counts differ".into()));
        }
        let rho = |ds: &[Matrix]| -> Result<Vec<f64>> {
            ds.iter()
                .zip(probes)
                .map(|(d, p)| rank1_alignment_ratio(d, p))
                .collect()
        };
        AlignmentReport::from_rhos(rho(naive)?, rho(projected)?)
    }

    /// Uses the probes stored in `projected`; if it has none (two naive
    /// checkpoints), probes are extracted from `naive`.
    pub fn from_checkpoints(naive: &Checkpoint, projected: &Checkpoint) -> Result<Self> {
        let probes = match projected.probes() {
            Some(p) => p.to_vec(),
            None => naive
                .deltas()
                .iter()
                .enumerate()
                .map(|(l, d)| extract_probe(d, l))
                .collect::<Result<Vec<_>>>()?,
        };
        AlignmentReport::compare(&naive.deltas(), &projected.deltas(), &probes)
    }

    pub fn site_rows(&self, seed: u64) -> Vec<LeakageRow> {
        (0..self.rho_naive.len())
            .map(|l| LeakageRow {
                seed,
                site: l,
                rho_naive: self.rho_naive[l],
                rho_projected: self.rho_projected[l],
                reduction: self.site_reductions[l].value,
                saturated: self.site_reductions[l].saturated,
            })
            .collect()
    }

    /// Naive and projected rows, then one row of column-wise ratios.
    pub fn summary_rows(&self) -> Vec<LeakageSummaryRow> {
        let row = |label: &str, s: &RhoSummary| LeakageSummaryRow {
            row: label.into(),
            mean: s.mean,
            median: s.median,
            max: s.max,
            saturated: false,
        };
        let r = [&self.mean_reduction, &self.median_reduction, &self.max_reduction];
        vec![
            row("naive", &self.naive),
            row("projected", &self.projected),
            LeakageSummaryRow {
                row: "reduction".into(),
                mean: r[0].value,
                median: r[1].value,
                max: r[2].value,
                saturated: r.iter().any(|x| x.saturated),
            },
        ]
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<12} {:>10} {:>10} {:>10}\n", "", "mean", "median", "max");
        for (label, r) in [("naive", &self.naive), ("projected", &self.projected)] {
            s += &format!("{label:<12} {:>10.4} {:>10.4} {:>10.4}\n", r.mean, r.median, r.max);
        }
        s += &format!("reduction (mean ratio)   {}\n", self.mean_reduction);
        s += &format!("reduction (median ratio) {}\n", self.median_reduction);
        for (l, r) in self.site_reductions.iter().enumerate() {
            s += &format!(
                "site {l}: naive {:.4} projected {:.3e} reduction {r}\n",
                self.rho_naive[l], self.rho_projected[l]
            );
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectivityReport {
    pub spurious_removed_fraction: f64,
    pub task_removed_fraction: f64,
    /// Magnitude of the rank-1 piece taken out of each part.
    pub removed_spurious: f64,
    pub removed_task: f64,
    /// `None` when the task part lost less than the saturation floor.
    pub selectivity_ratio: Option<f64>,
    pub saturated: bool,
}

/// Splits what the probe removes from `sample.g` into spurious and task
/// parts. The projection is linear, so the two coefficients sum to the one
/// removed from `g`.
pub fn removal_fractions(sample: &GradientSample, probe: &ProbePair) -> Result<SelectivityReport> {
    let spur = project_site_gradient(&sample.g_spurious, probe)?
        .removed_coefficient
        .abs();
    let task = project_site_gradient(&sample.g_task, probe)?.removed_coefficient.abs();
    let frac = |removed: f64, whole: f64| {
        if whole <= SATURATION_FLOOR {
            (0.0, true)
        } else {
            ((removed / whole).min(1.0), false)
        }
    };
    let (spurious_removed_fraction, s_sat) = frac(spur, sample.g_spurious.frobenius_norm());
    let (task_removed_fraction, t_sat) = frac(task, sample.g_task.frobenius_norm());
    let ratio_sat = task <= SATURATION_FLOOR;
    Ok(SelectivityReport {
        spurious_removed_fraction,
        task_removed_fraction,
        removed_spurious: spur,
        removed_task: task,
        selectivity_ratio: (!ratio_sat).then(|| spur / task),
        saturated: s_sat || t_sat || ratio_sat,
    })
}

/// One seed's probe scored on future gradients of the same stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectivityTrial {
    pub seed: u64,
    pub spurious_removed_fraction: f64,
    pub task_removed_fraction: f64,
    pub removed_spurious: f64,
    pub removed_task: f64,
}

/// Builds the probe from samples `0..N` and evaluates it on
/// `N..N + samples`.
pub fn selectivity_trial(cfg: &SynthConfig, seed: u64, samples: usize) -> Result<SelectivityTrial> {
    if samples == 0 {
        return Err(Error::Parameter("need at least one evaluation sample".into()));
    }
    let (spurious, task) = cfg.build(seed)?;
    let delta = accumulate_stream(&spurious, &task, seed, cfg.n)?;
    let probe = extract_probe(&delta, 0)?;
    let mut acc = [0.0; 4];
    for k in 0..samples as u64 {
        let s = sample_gradient(&spurious, &task, seed, cfg.n as u64 + k)?;
        let r = removal_fractions(&s, &probe)?;
        acc[0] += r.spurious_removed_fraction;
        acc[1] += r.task_removed_fraction;
        acc[2] += r.removed_spurious;
        acc[3] += r.removed_task;
    }
    let m = samples as f64;
    Ok(SelectivityTrial {
        seed,
        spurious_removed_fraction: acc[0] / m,
        task_removed_fraction: acc[1] / m,
        removed_spurious: acc[2] / m,
        removed_task: acc[3] / m,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectivityRow {
    pub r_t: usize,
    pub alpha_mean: f64,
    pub mu_frob: f64,
    pub n: usize,
    pub tau: f64,
    pub seeds: usize,
    pub samples: usize,
    pub spurious_removed_fraction: f64,
    pub task_removed_fraction: f64,
    /// Mean removed spurious magnitude over mean removed task magnitude.
    pub selectivity_ratio: f64,
    pub saturated: bool,
    /// `r_T = 1`: the task mean is a single mode and the margin vanishes.
    pub degenerate: bool,
}

/// Seed-averaged selectivity per `r_T`, in the order given.
pub fn selectivity_sweep(
    base: &SynthConfig,
    r_ts: &[usize],
    seeds: &[u64],
    samples: usize,
) -> Result<Vec<SelectivityRow>> {
    if r_ts.is_empty() || seeds.is_empty() {
        return Err(Error::Parameter("empty selectivity grid".into()));
    }
    let configs = r_ts
        .iter()
        .map(|&r_t| {
            let cfg = SynthConfig { r_t, ..*base };
            cfg.validate()?;
            if !cfg.surprise_valid() {
                return Err(Error::NotSurpriseValid(format!(
                    "r_T = {r_t}: alpha_mean {} vs mu_frob {} and tau {} at N = {}",
                    cfg.alpha_mean, cfg.mu_frob, cfg.tau, cfg.n
                )));
            }
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let trials = jobs
        .par_iter()
        .map(|&(i, s)| selectivity_trial(&configs[i], s, samples))
        .collect::<Result<Vec<_>>>()?;
    Ok(configs
        .iter()
        .zip(trials.chunks(seeds.len()))
        .map(|(cfg, ts)| {
            let k = ts.len() as f64;
            let mean = |f: fn(&SelectivityTrial) -> f64| ts.iter().map(f).sum::<f64>() / k;
            let spur = mean(|t| t.removed_spurious);
            let task = mean(|t| t.removed_task);
            let saturated = task <= SATURATION_FLOOR;
            SelectivityRow {
                r_t: cfg.r_t,
                alpha_mean: cfg.alpha_mean,
                mu_frob: cfg.mu_frob,
                n: cfg.n,
                tau: cfg.tau,
                seeds: ts.len(),
                samples,
                spurious_removed_fraction: mean(|t| t.spurious_removed_fraction),
                task_removed_fraction: mean(|t| t.task_removed_fraction),
                selectivity_ratio: if saturated {
                    spur / SATURATION_FLOOR
                } else {
                    spur / task
                },
                saturated,
                degenerate: cfg.r_t == 1,
            }
        })
        .collect())
}

/// `⟨ΔW_l, u_S v_Sᵀ⟩` per site. Sites whose shape differs from the truth
/// are a dimension error.
pub fn spurious_drift(ckpt: &Checkpoint, truth: &SpuriousSpec) -> Result<Vec<f64>> {
    let dir = truth.direction();
    ckpt.deltas().iter().map(|d| inner_product(d, &dir)).collect()
}

/// Mean squared residual along `u_S` on the given inputs and targets.
pub fn spurious_output_energy(model: &ToyModel, inputs: &Matrix, targets: &Matrix, u_s: &[f64]) -> Result<f64> {
    let out = model.forward_batch(inputs)?;
    if out.shape() != targets.shape() || u_s.len() != out.cols() {
        return Err(Error::Dimension("outputs, targets and direction disagree".into()));
    }
    let mut e = 0.0;
    for i in 0..out.rows() {
        let r: f64 = out
            .row(i)
            .iter()
            .zip(targets.row(i))
            .zip(u_s)
            .map(|((a, b), u)| (a - b) * u)
            .sum();
        e += r * r;
    }
    Ok(e / out.rows() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageRow {
    pub seed: u64,
    pub site: usize,
    pub rho_naive: f64,
    pub rho_projected: f64,
    pub reduction: f64,
    pub saturated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageSummaryRow {
    pub row: String,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub saturated: bool,
}

/// A flat record type with a fixed column order, so an empty table still
/// gets a header.
pub trait Record: Serialize + DeserializeOwned {
    const COLUMNS: &'static [&'static str];
}

impl Record for IdentifyRow {
    const COLUMNS: &'static [&'static str] = &[
        "d_out",
        "d_in",
        "n",
        "r_t",
        "alpha_mean",
        "mu_frob",
        "tau",
        "seed",
        "alignment",
        "bound_value",
        "surprise_valid",
        "u_overlap",
        "v_overlap",
    ];
}

impl Record for SelectivityRow {
    const COLUMNS: &'static [&'static str] = &[
        "r_t",
        "alpha_mean",
        "mu_frob",
        "n",
        "tau",
        "seeds",
        "samples",
        "spurious_removed_fraction",
        "task_removed_fraction",
        "selectivity_ratio",
        "saturated",
        "degenerate",
    ];
}

impl Record for SelectivityTrial {
    const COLUMNS: &'static [&'static str] = &[
        "seed",
        "spurious_removed_fraction",
        "task_removed_fraction",
        "removed_spurious",
        "removed_task",
    ];
}

impl Record for LeakageRow {
    const COLUMNS: &'static [&'static str] = &["seed", "site", "rho_naive", "rho_projected", "reduction", "saturated"];
}

impl Record for EvalPoint {
    const COLUMNS: &'static [&'static str] = &["epoch", "step", "train_loss", "eval_loss"];
}

impl Record for LeakageSummaryRow {
    const COLUMNS: &'static [&'static str] = &["row", "mean", "median", "max", "saturated"];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Text,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Text => "toml",
        }
    }
}

/// `<dir>/<experiment>_<seed>.<ext>`
pub fn report_path(dir: &Path, experiment: &str, seed: u64, format: ReportFormat) -> PathBuf {
    dir.join(format!("{experiment}_{seed}.{}", format.extension()))
}

#[derive(Serialize, Deserialize)]
struct TextReport<T> {
    #[serde(rename = "record", default = "Vec::new")]
    records: Vec<T>,
}

pub fn render_csv<T: Record>(records: &[T]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(T::COLUMNS)?;
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn render_text<T: Record>(records: &[T]) -> Result<String> {
    toml::to_string(&TextReport {
        records: records.iter().collect(),
    })
    .map_err(|e| Error::Config(e.to_string()))
}

pub fn render<T: Record>(records: &[T], format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Csv => render_csv(records),
        ReportFormat::Text => render_text(records),
    }
}

pub fn parse_csv<T: Record>(text: &str) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers()?.clone();
    if header.iter().ne(T::COLUMNS.iter().copied()) {
        return Err(Error::Format {
            offset: 0,
            message: format!("unexpected CSV header {header:?}"),
        });
    }
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

pub fn parse_text<T: Record>(text: &str) -> Result<Vec<T>> {
    let doc: TextReport<T> = toml::from_str(text).map_err(|e| Error::Format {
        offset: e.span().map(|s| s.start as u64).unwrap_or(0),
        message: e.message().to_string(),
    })?;
    Ok(doc.records)
}

/// Writes the table to `path`, replacing any previous report there.
pub fn write_report<T: Record>(records: &[T], path: &Path, format: ReportFormat) -> Result<()> {
    let text = render(records, format)?;
    crate::container::write_bytes(path, text.as_bytes(), true)
}
