use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::denoiser::Denoiser;
use crate::distill::{run_distillation, DistillConfig, Method, RunHistory};
use crate::error::{Error, Result};
use crate::metrics::{Evaluator, MetricReport};
use crate::schedule::{Condition, DeltaFn, GuidanceConfig, Latent, NoiseSchedule};
use crate::toy::{held_out_batch, oracle_loss, train_denoiser, Checkpoint, GaussianOracle};
use crate::trajectory::{TimestepTrajectory, TrajectoryPair};

use super::config::LabConfig;
use super::manifest::RunManifest;
use super::verify::{run_verification, VerifyReport};

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

fn write_config(cfg: &LabConfig, dir: &Path) -> Result<()> {
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn write_points(path: &Path, points: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let dim = points.first().map_or(0, Vec::len);
    let mut header = vec!["index".to_string()];
    header.extend((0..dim).map(|k| format!("x{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for (i, p) in points.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(p.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Result of [`cmd_train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub oracle_loss: f64,
}

/// Trains the toy denoiser and writes `checkpoint.json`, `train.csv`,
/// `config.toml` and `manifest.json`.
pub fn cmd_train(cfg: &LabConfig) -> Result<TrainOutcome> {
    let start = Instant::now();
    cfg.validate()?;
    let sched = cfg.build_schedule()?;
    let ds = cfg.dataset.build()?;
    let dir = &cfg.output;
    prepare_dir(dir)?;
    write_config(cfg, dir)?;
    let trained = train_denoiser(&ds, &sched, &cfg.train)?;
    let held = held_out_batch(&ds, &sched, cfg.train.held_out, cfg.train.seed);
    let oracle = oracle_loss(&GaussianOracle::from_dataset(&ds)?, &sched, &held)?;
    let checkpoint = dir.join("checkpoint.json");
    Checkpoint::from_net(&trained.net, &sched.fingerprint()).save(&checkpoint)?;

    #[derive(Serialize)]
    struct Row {
        initial_loss: f64,
        final_loss: f64,
        oracle_loss: f64,
        loss_ratio: f64,
    }
    let ratio = trained.final_loss / oracle;
    write_csv(
        &dir.join("train.csv"),
        &[Row {
            initial_loss: trained.initial_loss,
            final_loss: trained.final_loss,
            oracle_loss: oracle,
            loss_ratio: ratio,
        }],
    )?;
    let mut m = RunManifest::new("train", cfg.hash()?);
    m.metrics
        .insert("initial_loss".into(), trained.initial_loss);
    m.metrics.insert("final_loss".into(), trained.final_loss);
    m.metrics.insert("oracle_loss".into(), oracle);
    m.metrics.insert("loss_ratio".into(), ratio);
    m.wall_clock_seconds = start.elapsed().as_secs_f64();
    m.write(dir)?;
    Ok(TrainOutcome {
        checkpoint,
        initial_loss: trained.initial_loss,
        final_loss: trained.final_loss,
        oracle_loss: oracle,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub iteration: usize,
    pub calls: u64,
    pub sliced_wasserstein: f64,
    pub mmd_rbf: f64,
    pub modes_covered: usize,
    pub median_to_mean: f64,
    pub median_to_mode: f64,
}

impl MetricRow {
    fn new(iteration: usize, calls: u64, m: &MetricReport) -> Self {
        Self {
            iteration,
            calls,
            sliced_wasserstein: m.sliced_wasserstein,
            mmd_rbf: m.mmd_rbf,
            modes_covered: m.modes_covered,
            median_to_mean: m.median_to_mean,
            median_to_mode: m.median_to_mode,
        }
    }
}

/// Metric rows of a history; iteration 0 holds the initial particles.
pub fn metric_rows(h: &RunHistory) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    if let Some(m) = &h.initial_metrics {
        rows.push(MetricRow::new(0, 0, m));
    }
    for r in &h.records {
        if let Some(m) = &r.metrics {
            rows.push(MetricRow::new(r.k + 1, r.calls, m));
        }
    }
    rows
}

fn summarize(m: &mut RunManifest, report: Option<&MetricReport>) {
    if let Some(r) = report {
        m.metrics
            .insert("sliced_wasserstein".into(), r.sliced_wasserstein);
        m.metrics.insert("mmd_rbf".into(), r.mmd_rbf);
        m.metrics
            .insert("modes_covered".into(), r.modes_covered as f64);
        m.metrics.insert("median_to_mean".into(), r.median_to_mean);
        m.metrics.insert("median_to_mode".into(), r.median_to_mode);
    }
}

fn write_run(dir: &Path, h: &RunHistory) -> Result<()> {
    h.write_jsonl(fs::File::create(dir.join("history.jsonl")).map(std::io::BufWriter::new)?)?;
    write_csv(&dir.join("metrics.csv"), &metric_rows(h))?;
    write_points(&dir.join("initial_particles.csv"), &h.initial_particles)?;
    write_points(&dir.join("final_particles.csv"), &h.final_particles)?;
    Ok(())
}

/// Noising/denoising pair for the first final particle on an evenly spaced
/// trajectory with the configured step count.
fn dump_trajectory(
    dir: &Path,
    cfg: &DistillConfig,
    h: &RunHistory,
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
) -> Result<()> {
    let tr = &cfg.trajectory;
    let traj = TimestepTrajectory::uniform(tr.steps, (tr.gap_min + tr.gap_max) / 2)?;
    let pair = TrajectoryPair::build(
        &Latent::clean(h.final_particles[0].clone())?,
        &traj,
        den,
        Condition::Class(cfg.target_class),
        GuidanceConfig::new(cfg.guidance.lambda)?,
        sched,
    )?;
    pair.write_jsonl(fs::File::create(dir.join("trajectory.jsonl")).map(std::io::BufWriter::new)?)
}

/// Runs one distillation and writes `history.jsonl`, `metrics.csv`, particle
/// CSVs, `config.toml` and `manifest.json`. A numeric failure still writes
/// every file, then returns [`Error::Numeric`].
pub fn cmd_distill(cfg: &LabConfig) -> Result<PathBuf> {
    let start = Instant::now();
    cfg.validate()?;
    let sched = cfg.build_schedule()?;
    let ds = cfg.dataset.build()?;
    let den = cfg.build_denoiser(&ds, &sched)?;
    let ev = cfg.build_evaluator(&ds)?;
    let dir = cfg.output.clone();
    prepare_dir(&dir)?;
    write_config(cfg, &dir)?;
    let h = run_distillation(&cfg.distill, den.as_ref(), &sched, Some(&ev))?;
    write_run(&dir, &h)?;
    if !h.failed() && matches!(cfg.distill.method, Method::Ge3d | Method::Ge3dNoDbc) {
        dump_trajectory(&dir, &cfg.distill, &h, den.as_ref(), &sched)?;
    }
    let mut m = RunManifest::new("distill", cfg.hash()?);
    m.denoiser_calls = h.total_calls;
    m.call_budget = cfg.distill.call_budget;
    m.metrics
        .insert("iterations".into(), h.records.len() as f64);
    m.metrics.insert(
        "calls_per_iteration".into(),
        cfg.distill.calls_per_iteration() as f64,
    );
    summarize(&mut m, h.final_metrics());
    m.failed = h.failed();
    m.failure = h.failure.clone();
    m.wall_clock_seconds = start.elapsed().as_secs_f64();
    m.write(&dir)?;
    match h.failure {
        Some(f) => Err(Error::Numeric(f)),
        None => Ok(dir),
    }
}

struct Cell {
    label: String,
    seed: u64,
    cfg: DistillConfig,
}

fn run_cells(
    cells: &[Cell],
    den: &dyn Denoiser,
    sched: &NoiseSchedule,
    ev: &Evaluator,
) -> Result<Vec<RunHistory>> {
    // collect keeps cell order, so the merge below is deterministic
    cells
        .par_iter()
        .map(|c| run_distillation(&c.cfg, den, sched, Some(ev)))
        .collect()
}

fn persist_cells(dir: &Path, cells: &[Cell], histories: &[RunHistory]) -> Result<()> {
    let runs = dir.join("runs");
    for (c, h) in cells.iter().zip(histories) {
        let d = runs.join(format!("{}_seed{}", c.label, c.seed));
        prepare_dir(&d)?;
        write_run(&d, h)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub farthest: usize,
    pub step_size: usize,
    pub steps: usize,
    pub seeds: usize,
    pub mean_sliced_wasserstein: f64,
    pub median_sliced_wasserstein: f64,
    pub mean_median_to_mode: f64,
    pub min_modes_covered: usize,
    pub failed_runs: usize,
    /// Some run missed a mode or failed.
    pub poor: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellRunRow {
    pub label: String,
    pub seed: u64,
    pub calls: u64,
    pub failed: bool,
    pub sliced_wasserstein: f64,
    pub mmd_rbf: f64,
    pub modes_covered: usize,
    pub median_to_mean: f64,
    pub median_to_mode: f64,
}

fn cell_run_row(c: &Cell, h: &RunHistory) -> CellRunRow {
    let m = h.final_metrics();
    let nan = f64::NAN;
    CellRunRow {
        label: c.label.clone(),
        seed: c.seed,
        calls: h.total_calls,
        failed: h.failed(),
        sliced_wasserstein: m.map_or(nan, |m| m.sliced_wasserstein),
        mmd_rbf: m.map_or(nan, |m| m.mmd_rbf),
        modes_covered: m.map_or(0, |m| m.modes_covered),
        median_to_mean: m.map_or(nan, |m| m.median_to_mean),
        median_to_mode: m.map_or(nan, |m| m.median_to_mode),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Result of [`cmd_ablate`].
#[derive(Debug, Clone)]
pub struct AblateOutcome {
    pub dir: PathBuf,
    pub grid: Vec<GridRow>,
    pub runs: Vec<CellRunRow>,
}

/// Farthest-timestep by step-size sweep at a fixed call budget. Writes
/// `grid.csv` (one row per cell), `runs.csv` (one row per cell and seed),
/// per-run histories, `config.toml` and `manifest.json`.
pub fn cmd_ablate(cfg: &LabConfig) -> Result<AblateOutcome> {
    let start = Instant::now();
    cfg.validate()?;
    let a = &cfg.ablate;
    if a.farthest.is_empty() || a.step_sizes.is_empty() || a.seeds.is_empty() {
        return Err(Error::Config(
            "ablate grid needs farthest, step_sizes and seeds".into(),
        ));
    }
    let sched = cfg.build_schedule()?;
    let mut cells = Vec::new();
    let mut shape = Vec::new();
    for &far in &a.farthest {
        for &size in &a.step_sizes {
            if size == 0 || far % size != 0 || far > sched.steps() {
                return Err(Error::Config(format!(
                    "farthest timestep {far} is not a multiple of step size {size} within the schedule"
                )));
            }
            let steps = far / size;
            shape.push((far, size, steps));
            for &seed in &a.seeds {
                let mut d = cfg.distill.clone();
                d.seed = seed;
                d.call_budget = Some(a.call_budget);
                d.trajectory.steps = steps;
                d.trajectory.gap_min = size;
                d.trajectory.gap_max = size;
                d.validate(&sched)?;
                cells.push(Cell {
                    label: format!("t{far}_gap{size}_{}", d.method),
                    seed,
                    cfg: d,
                });
            }
        }
    }
    let ds = cfg.dataset.build()?;
    let den = cfg.build_denoiser(&ds, &sched)?;
    let ev = cfg.build_evaluator(&ds)?;
    let dir = cfg.output.clone();
    prepare_dir(&dir)?;
    write_config(cfg, &dir)?;
    let histories = run_cells(&cells, den.as_ref(), &sched, &ev)?;
    persist_cells(&dir, &cells, &histories)?;

    let runs: Vec<CellRunRow> = cells
        .iter()
        .zip(&histories)
        .map(|(c, h)| cell_run_row(c, h))
        .collect();
    let per = a.seeds.len();
    let modes = ev.modes.len();
    let grid: Vec<GridRow> = shape
        .iter()
        .zip(runs.chunks(per))
        .map(|(&(farthest, step_size, steps), rows)| {
            let sw: Vec<f64> = rows.iter().map(|r| r.sliced_wasserstein).collect();
            let to_mode: Vec<f64> = rows.iter().map(|r| r.median_to_mode).collect();
            let failed_runs = rows.iter().filter(|r| r.failed).count();
            let min_cov = rows.iter().map(|r| r.modes_covered).min().unwrap_or(0);
            GridRow {
                farthest,
                step_size,
                steps,
                seeds: rows.len(),
                mean_sliced_wasserstein: mean(&sw),
                median_sliced_wasserstein: median(sw),
                mean_median_to_mode: mean(&to_mode),
                min_modes_covered: min_cov,
                failed_runs,
                poor: failed_runs > 0 || min_cov < modes,
            }
        })
        .collect();
    write_csv(&dir.join("grid.csv"), &grid)?;
    write_csv(&dir.join("runs.csv"), &runs)?;

    let mut m = RunManifest::new("ablate", cfg.hash()?);
    m.denoiser_calls = histories.iter().map(|h| h.total_calls).sum();
    m.call_budget = Some(a.call_budget);
    m.metrics.insert("cells".into(), grid.len() as f64);
    m.metrics.insert(
        "poor_cells".into(),
        grid.iter().filter(|g| g.poor).count() as f64,
    );
    m.failed = histories.iter().any(RunHistory::failed);
    m.wall_clock_seconds = start.elapsed().as_secs_f64();
    m.write(&dir)?;
    Ok(AblateOutcome { dir, grid, runs })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub budget: u64,
    pub method: String,
    pub seed: u64,
    pub iteration: usize,
    pub sliced_wasserstein: f64,
    pub mmd_rbf: f64,
    pub modes_covered: usize,
    pub median_to_mean: f64,
    pub median_to_mode: f64,
}

/// Result of [`cmd_compare`].
#[derive(Debug, Clone)]
pub struct CompareOutcome {
    pub dir: PathBuf,
    pub curves: Vec<CurveRow>,
    pub finals: Vec<CellRunRow>,
}

/// Runs each method at the same total denoiser-call budget for every seed.
/// Writes `curves.csv` sorted by budget, `summary.csv` with final metrics,
/// per-run histories, `config.toml` and `manifest.json`.
pub fn cmd_compare(cfg: &LabConfig) -> Result<CompareOutcome> {
    let start = Instant::now();
    cfg.validate()?;
    let c = &cfg.compare;
    if c.methods.is_empty() || c.seeds.is_empty() || c.call_budget == 0 {
        return Err(Error::Config(
            "compare needs methods, seeds and a positive call budget".into(),
        ));
    }
    let sched = cfg.build_schedule()?;
    let mut cells = Vec::new();
    for &method in &c.methods {
        for &seed in &c.seeds {
            let mut d = cfg.distill.clone();
            d.method = method;
            d.seed = seed;
            d.call_budget = Some(c.call_budget);
            let total = d.planned_iterations();
            d.snapshot_every = total
                .checked_div(c.curve_points)
                .map_or(0, |every| every.max(1));
            d.validate(&sched)?;
            cells.push(Cell {
                label: method.name().to_string(),
                seed,
                cfg: d,
            });
        }
    }
    let ds = cfg.dataset.build()?;
    let den = cfg.build_denoiser(&ds, &sched)?;
    let ev = cfg.build_evaluator(&ds)?;
    let dir = cfg.output.clone();
    prepare_dir(&dir)?;
    write_config(cfg, &dir)?;
    let histories = run_cells(&cells, den.as_ref(), &sched, &ev)?;
    persist_cells(&dir, &cells, &histories)?;

    let mut curves = Vec::new();
    for (cell, h) in cells.iter().zip(&histories) {
        for r in metric_rows(h) {
            curves.push(CurveRow {
                budget: r.calls,
                method: cell.label.clone(),
                seed: cell.seed,
                iteration: r.iteration,
                sliced_wasserstein: r.sliced_wasserstein,
                mmd_rbf: r.mmd_rbf,
                modes_covered: r.modes_covered,
                median_to_mean: r.median_to_mean,
                median_to_mode: r.median_to_mode,
            });
        }
    }
    let order = |m: &str| {
        c.methods
            .iter()
            .position(|x| x.name() == m)
            .unwrap_or(usize::MAX)
    };
    curves.sort_by(|a, b| {
        (a.budget, order(&a.method), a.seed).cmp(&(b.budget, order(&b.method), b.seed))
    });
    let finals: Vec<CellRunRow> = cells
        .iter()
        .zip(&histories)
        .map(|(c, h)| cell_run_row(c, h))
        .collect();
    write_csv(&dir.join("curves.csv"), &curves)?;
    write_csv(&dir.join("summary.csv"), &finals)?;

    let mut m = RunManifest::new("compare", cfg.hash()?);
    m.denoiser_calls = histories.iter().map(|h| h.total_calls).sum();
    m.call_budget = Some(c.call_budget);
    for &method in &c.methods {
        let sw: Vec<f64> = finals
            .iter()
            .filter(|r| r.label == method.name())
            .map(|r| r.sliced_wasserstein)
            .collect();
        m.metrics
            .insert(format!("{method}_mean_sliced_wasserstein"), mean(&sw));
        let used: Vec<u64> = finals
            .iter()
            .filter(|r| r.label == method.name())
            .map(|r| r.calls)
            .collect();
        m.metrics.insert(
            format!("{method}_max_calls"),
            used.into_iter().max().unwrap_or(0) as f64,
        );
    }
    m.failed = histories.iter().any(RunHistory::failed);
    m.wall_clock_seconds = start.elapsed().as_secs_f64();
    m.write(&dir)?;
    Ok(CompareOutcome {
        dir,
        curves,
        finals,
    })
}

/// Runs the verification suite; writes `verify.csv` and `manifest.json` into
/// the output directory.
pub fn cmd_verify(cfg: &LabConfig, delta_fn: DeltaFn) -> Result<VerifyReport> {
    let start = Instant::now();
    let report = run_verification(cfg.verify.draws, cfg.verify.seed, delta_fn)?;
    let dir = &cfg.output;
    prepare_dir(dir)?;
    write_csv(&dir.join("verify.csv"), &report.checks)?;
    let mut m = RunManifest::new("verify", cfg.hash()?);
    for c in &report.checks {
        m.metrics.insert(c.name.clone(), c.max_residual);
    }
    m.failed = !report.passed();
    m.wall_clock_seconds = start.elapsed().as_secs_f64();
    m.write(dir)?;
    Ok(report)
}
