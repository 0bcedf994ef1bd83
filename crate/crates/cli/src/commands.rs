use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use grasp_core::container::Container;
use grasp_core::identify::{alignment_bound, extract_probe, identification_sweep, overlaps};
use grasp_core::metrics::{
    report_path, selectivity_sweep, spurious_drift, spurious_output_energy, write_report, Record,
};
use grasp_core::project::spurious_component;
use grasp_core::stream::STREAM_KIND;
use grasp_core::trainkit::{AdapterMode, Checkpoint, Lab, OptimizerKind, Stage, TrainRun, CHECKPOINT_KIND};
use grasp_core::{AlignmentReport, Error, ExperimentConfig, GradientStream, LoadedConfig, ReportFormat};

use crate::{Cli, Command, Format, Mode, SweepKind};

/// Tolerance for the projected constraint in exact (SGD, joint) runs.
const CONSTRAINT_TOL: f64 = 1e-9;

#[derive(Debug)]
pub struct CheckFailed(pub String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "check failed: {}", self.0)
    }
}

impl std::error::Error for CheckFailed {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<CheckFailed>().is_some() {
        return 6;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Parameter(_) | Error::NotSurpriseValid(_)) => 3,
        Some(
            Error::NoConvergence { .. } | Error::Diverged { .. } | Error::RankDeficient { .. } | Error::Degenerate(_),
        ) => 4,
        Some(Error::Io { .. } | Error::Format { .. } | Error::Csv(_)) => 5,
        _ => 1,
    }
}

struct Ctx {
    loaded: LoadedConfig,
    out: PathBuf,
    force: bool,
    format: ReportFormat,
    check: bool,
}

impl Ctx {
    fn config(&self) -> &ExperimentConfig {
        &self.loaded.config
    }

    fn seed(&self) -> u64 {
        self.loaded.config.seed
    }

    fn report<T: Record>(&self, experiment: &str, rows: &[T]) -> Result<PathBuf> {
        let path = report_path(&self.out, experiment, self.seed(), self.format);
        refuse_overwrite(&path, self.force)?;
        write_report(rows, &path, self.format)?;
        println!("wrote {}", path.display());
        Ok(path)
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.out.join(format!("{name}_{}.grasp", self.seed()))
    }

    fn fail(&self, message: String) -> Result<()> {
        if self.check {
            return Err(CheckFailed(message).into());
        }
        eprintln!("warning: {message}");
        Ok(())
    }
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<()> {
    if !force && path.exists() {
        let e = std::io::Error::new(std::io::ErrorKind::AlreadyExists, "exists; pass --force to replace it");
        return Err(Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into());
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?.config,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(&config.out_dir));
    let ctx = Ctx {
        loaded: config.loaded()?,
        out,
        force: cli.force,
        format: match cli.format {
            Format::Csv => ReportFormat::Csv,
            Format::Text => ReportFormat::Text,
        },
        check: cli.check,
    };
    match &cli.command {
        Command::Gen => gen(&ctx),
        Command::Identify { path } => identify(&ctx, path),
        Command::Train { mode, naive } => train(&ctx, *mode, naive.as_deref()),
        Command::Leakage { naive, projected } => leakage(&ctx, naive, projected),
        Command::Sweep { kind } => match kind {
            SweepKind::Identify => sweep_identify(&ctx),
            SweepKind::Selectivity => sweep_selectivity(&ctx),
            SweepKind::Leakage => sweep_leakage(&ctx),
        },
    }
}

fn gen(ctx: &Ctx) -> Result<()> {
    let synth = &ctx.config().synth;
    if !ctx.loaded.surprise_valid {
        eprintln!(
            "warning: config is outside the surprise regime (alpha_mean >= 10*mu_frob, alpha_mean >= 10*tau/sqrt(n))"
        );
    }
    let stream = GradientStream::generate(synth, ctx.seed())?;
    let path = ctx.artifact("stream");
    stream.save(&path, &ctx.loaded.fingerprint, ctx.force)?;
    println!("wrote {}", path.display());
    println!("samples: {}", stream.samples.len());
    println!("shape: {}x{}", synth.d_out, synth.d_in);
    println!("surprise_valid: {}", ctx.loaded.surprise_valid);
    Ok(())
}

fn identify(ctx: &Ctx, path: &Path) -> Result<()> {
    let c = Container::read(path)?;
    match c.kind.as_str() {
        STREAM_KIND => {
            let s = GradientStream::from_container(&c)?;
            let probe = extract_probe(&s.accumulated()?, 0)?;
            let (u, v) = overlaps(&probe, &s.spurious)?;
            let cfg = &s.config;
            let bound = alignment_bound(
                cfg.alpha_mean,
                cfg.mu_frob,
                cfg.r_t,
                cfg.tau,
                s.samples.len(),
                ctx.config().sweep.noise_const,
            )?;
            let alignment = u * v;
            println!("samples: {}", s.samples.len());
            println!("sigma_1: {:.6e}", probe.sigma());
            println!("u_overlap: {u:.9}");
            println!("v_overlap: {v:.9}");
            println!("alignment: {alignment:.9}");
            println!("structural_term: {:.6e}", bound.structural_term);
            println!("noise_term: {:.6e}", bound.noise_term);
            println!("bound: {:.9}", bound.bound_value);
            println!("surprise_valid: {}", cfg.surprise_valid());
            if cfg.surprise_valid() && alignment < bound.bound_value {
                ctx.fail(format!(
                    "alignment {alignment:.6} is below the bound {:.6}",
                    bound.bound_value
                ))?;
            }
        }
        CHECKPOINT_KIND => {
            let ck = Checkpoint::from_container(&c)?;
            println!("stage: {}", ck.stage().as_str());
            println!("alignment: n/a (checkpoint carries no planted truth)");
            for (l, d) in ck.deltas().iter().enumerate() {
                let norm = d.frobenius_norm();
                if norm == 0.0 {
                    println!("site {l}: zero update");
                    continue;
                }
                let p = extract_probe(d, l).with_context(|| format!("site {l}"))?;
                println!("site {l}: sigma_1 {:.6e} share {:.6}", p.sigma(), p.sigma() / norm);
            }
        }
        other => bail!(Error::Format {
            offset: 0,
            message: format!("unknown artifact kind `{other}`"),
        }),
    }
    Ok(())
}

fn summarize(lab: &Lab, run: &TrainRun) -> Result<()> {
    let last = run.history.last().expect("history has the initial point");
    let energy = spurious_output_energy(
        &run.model,
        &lab.data.eval_inputs,
        &lab.data.eval_targets,
        lab.data.spurious_dirs.u_s.as_slice(),
    )?;
    println!("  steps: {}", run.checkpoint.step_count());
    println!("  train_loss: {:.6}", last.train_loss);
    println!("  eval_loss: {:.6}", last.eval_loss);
    println!("  spurious_output_energy: {energy:.6}");
    let drift = spurious_drift(&run.checkpoint, &lab.data.spurious_dirs)?;
    let shown: Vec<String> = drift.iter().map(|d| format!("{d:.4e}")).collect();
    println!("  drift along planted direction: [{}]", shown.join(", "));
    Ok(())
}

fn train(ctx: &Ctx, mode: Mode, naive_path: Option<&Path>) -> Result<()> {
    let cfg = ctx.config();
    let lab = Lab::new(&cfg.train_config())?;
    let naive_ck = match naive_path {
        Some(p) => {
            if mode == Mode::Naive {
                bail!(Error::Config("--naive only applies to --mode grasp".into()));
            }
            let ck = Checkpoint::load(p)?;
            if ck.stage() != Stage::Naive {
                bail!(Error::Config(format!("{} is not a naive checkpoint", p.display())));
            }
            if ck.fingerprint() != lab.fingerprint {
                bail!(Error::Config(format!(
                    "{} was trained with config {} but the current config is {}",
                    p.display(),
                    ck.fingerprint(),
                    lab.fingerprint
                )));
            }
            ck
        }
        None => {
            let path = ctx.artifact("naive");
            refuse_overwrite(&path, ctx.force)?;
            let run = lab.train_naive()?;
            run.checkpoint.save(&path, ctx.force)?;
            println!("naive run -> {}", path.display());
            summarize(&lab, &run)?;
            ctx.report("history_naive", &run.history)?;
            run.checkpoint
        }
    };
    if mode == Mode::Naive {
        return Ok(());
    }

    let probes = lab.extract_probes(&naive_ck)?;
    let path = ctx.artifact("projected");
    refuse_overwrite(&path, ctx.force)?;
    let run = lab.train_projected(&probes)?;
    run.checkpoint.save(&path, ctx.force)?;
    println!("projected run -> {}", path.display());
    summarize(&lab, &run)?;
    let components = run
        .checkpoint
        .deltas()
        .iter()
        .zip(&probes)
        .map(|(d, p)| Ok(spurious_component(d, p)?))
        .collect::<Result<Vec<f64>>>()?;
    for (l, c) in components.iter().enumerate() {
        println!("  site {l}: probe component of update {c:.3e}");
    }
    let scaled = run.trace.as_ref().map(|t| t.max_scaled_drift()).unwrap_or(0.0);
    println!("  max scaled constraint drift: {scaled:.3e}");
    ctx.report("history_projected", &run.history)?;

    let report = AlignmentReport::from_checkpoints(&naive_ck, &run.checkpoint)?;
    print!("{}", report.table());

    let exact = cfg.optim.kind == OptimizerKind::Sgd && cfg.model.adapter_mode == AdapterMode::Joint;
    if exact && scaled > CONSTRAINT_TOL {
        ctx.fail(format!("constraint drift {scaled:.3e} exceeds {CONSTRAINT_TOL:e}"))?;
    }
    Ok(())
}

fn leakage(ctx: &Ctx, naive: &Path, projected: &Path) -> Result<()> {
    let a = Checkpoint::load(naive)?;
    let b = Checkpoint::load(projected)?;
    if a.fingerprint() != b.fingerprint() {
        eprintln!(
            "warning: checkpoints come from different configs ({} vs {})",
            a.fingerprint(),
            b.fingerprint()
        );
    }
    let report = AlignmentReport::from_checkpoints(&a, &b)?;
    print!("{}", report.table());
    ctx.report("leakage", &report.summary_rows())?;
    ctx.report("leakage_sites", &report.site_rows(ctx.seed()))?;
    if let Some(l) = (0..report.rho_naive.len()).find(|&l| report.rho_projected[l] > 0.1 * report.rho_naive[l]) {
        ctx.fail(format!(
            "site {l}: projected ratio {:.4} is above a tenth of naive {:.4}",
            report.rho_projected[l], report.rho_naive[l]
        ))?;
    }
    Ok(())
}

fn sweep_identify(ctx: &Ctx) -> Result<()> {
    let seeds = ctx.config().sweep_seeds();
    let grid = ctx.config().identify_grid();
    let rows = identification_sweep(&grid, &seeds)?;
    ctx.report("identify", &rows)?;
    for chunk in rows.chunks(seeds.len()) {
        let p = &chunk[0];
        let mis = chunk.iter().map(|r| r.misalignment()).sum::<f64>() / chunk.len() as f64;
        let below = chunk.iter().filter(|r| r.alignment < r.bound_value).count();
        println!(
            "n={} r_t={} mu_frob={:.4} tau={}: mean misalignment {mis:.3e}, {below}/{} below bound",
            p.n,
            p.r_t,
            p.mu_frob,
            p.tau,
            chunk.len()
        );
    }
    Ok(())
}

fn sweep_selectivity(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.config();
    let rows = selectivity_sweep(
        &cfg.synth,
        &cfg.selectivity_r_t(),
        &cfg.sweep_seeds(),
        cfg.sweep.samples,
    )?;
    ctx.report("selectivity", &rows)?;
    for r in &rows {
        println!(
            "r_t={}: spurious removed {:.4}, task removed {:.4}, ratio {:.2}{}",
            r.r_t,
            r.spurious_removed_fraction,
            r.task_removed_fraction,
            r.selectivity_ratio,
            if r.degenerate {
                " (degenerate: single task mode)"
            } else {
                ""
            }
        );
    }
    Ok(())
}

fn sweep_leakage(ctx: &Ctx) -> Result<()> {
    let seeds = ctx.config().sweep_seeds();
    if seeds.is_empty() {
        bail!(Error::Parameter("sweep.seeds must be positive".into()));
    }
    let mut rows = Vec::new();
    for &seed in &seeds {
        let mut tc = ctx.config().train_config();
        tc.seed = seed;
        let lab = Lab::new(&tc)?;
        let naive = lab.train_naive()?;
        let probes = lab.extract_probes(&naive.checkpoint)?;
        let projected = lab.train_projected(&probes)?;
        let report = AlignmentReport::compare(&naive.checkpoint.deltas(), &projected.checkpoint.deltas(), &probes)?;
        println!(
            "seed {seed}: mean ratio naive {:.4} projected {:.4}, reduction {}",
            report.naive.mean, report.projected.mean, report.mean_reduction
        );
        rows.extend(report.site_rows(seed));
    }
    ctx.report("leakage_sweep", &rows)?;
    Ok(())
}
