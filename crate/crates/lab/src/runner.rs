//! Experiment drivers: single runs, grids, paired reruns and the
//! hypergradient oracle check.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde_json::{json, Value};
use t1t2_core::data::{self, Dataset, DatasetSplit};
use t1t2_core::hypergrad::{self, ReplayBatch};
use t1t2_core::network::{BatchNormState, Mode};
use t1t2_core::rng::{streams, RngStream};
use t1t2_core::trainer::{self, Clock, NullClock, Seeds, Summary, TrainMode, TrainOutcome, TrainState};
use t1t2_core::{HyperIndex, HyperParams};

use crate::config::{DataSource, ExperimentConfig, Mode as CfgMode, Preprocess, SeedPolicy};
use crate::error::{LabError, Result};
use crate::idx;
use crate::output::{self, num, Table};

/// Seconds since construction.
#[derive(Debug, Clone, Copy)]
pub struct WallClock(Instant);

impl WallClock {
    pub fn start() -> Self {
        Self(Instant::now())
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::start()
    }
}

impl Clock for WallClock {
    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

fn clock_for(cfg: &ExperimentConfig) -> Box<dyn Clock + Send + Sync> {
    if cfg.record_wallclock {
        Box::new(WallClock::start())
    } else {
        Box::new(NullClock)
    }
}

/// Output directory: `T1T2_OUT` if set, else the configured one.
pub fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    match std::env::var_os("T1T2_OUT") {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => PathBuf::from(&cfg.output_dir),
    }
}

/// Config text with data paths made absolute, so the echo reproduces the
/// run from any directory.
pub fn config_echo(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    if let DataSource::Idx { images, labels, .. } = &mut c.data.source {
        for p in [images, labels] {
            let full = cfg.resolve(p);
            *p = std::path::absolute(&full).unwrap_or(full).display().to_string();
        }
    }
    c.to_ini()
}

/// Pool → held-out test set → T1/T2 split → optional T1 cap →
/// preprocessing.
pub fn load_split(cfg: &ExperimentConfig) -> Result<DatasetSplit> {
    let d = &cfg.data;
    let pool = match &d.source {
        DataSource::Idx { images, labels, limit } => {
            let (mut x, mut y) = idx::load_idx(&cfg.resolve(images), &cfg.resolve(labels))?;
            if let Some(n) = *limit {
                if n < y.len() {
                    let rows: Vec<usize> = (0..n).collect();
                    x = x.select_rows(&rows);
                    y.truncate(n);
                }
            }
            if let Some(&bad) = y.iter().find(|&&l| l >= d.classes) {
                return Err(LabError::Config {
                    line: 0,
                    message: format!("label {bad} with classes = {}", d.classes),
                });
            }
            Dataset::new(x, y, d.classes)?
        }
        DataSource::Synth { samples, dims, noise, seed } => {
            data::synth_clusters(d.classes, *samples, *dims, *noise, *seed)?
        }
    };
    let (rest, test) = pool.carve(d.test_size, d.test_seed, streams::HARNESS)?;
    let mut split = data::split(&rest, test, d.t2_size, d.split_seed)?;
    if let Some(n) = d.t1_size {
        if n < split.t1.len() {
            let rows: Vec<usize> = (0..n).collect();
            split.t1 = split.t1.subset(&rows);
        }
    }
    Ok(match d.preprocessing {
        Preprocess::None => split,
        Preprocess::Center => data::center_features(split)?,
        Preprocess::Gcn => data::gcn(split)?,
    })
}

pub struct TrainRun {
    pub outcome: TrainOutcome,
    pub trajectory: Table,
    pub summary: Value,
}

/// One training run in `mode`, with no file output.
pub fn train_once(cfg: &ExperimentConfig, split: &DatasetSplit, mode: TrainMode) -> Result<TrainRun> {
    let tc = cfg.train_config(mode);
    let clock = clock_for(cfg);
    let outcome = trainer::train(&tc, split, clock.as_ref())?;
    let trajectory = output::trajectory_table(&tc.initial_hypers, &outcome.trajectory);
    let summary = output::summary_json(&outcome.summary, &config_echo(cfg));
    Ok(TrainRun {
        outcome,
        trajectory,
        summary,
    })
}

/// `train`: writes `trajectory.csv` and `summary.json` into `out`.
pub fn run_train(cfg: &ExperimentConfig, mode: TrainMode, out: &Path) -> Result<TrainRun> {
    let split = load_split(cfg)?;
    let run = train_once(cfg, &split, mode)?;
    run.trajectory.write(&out.join("trajectory.csv"))?;
    output::write_json(&out.join("summary.json"), &run.summary)?;
    Ok(run)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub index: usize,
    pub axis1: f64,
    pub axis2: f64,
    pub seed: u64,
}

/// Cells in `(axis1, axis2, replicate)` order.
pub fn grid_cells(cfg: &ExperimentConfig) -> Result<Vec<GridCell>> {
    let g = cfg.grid.as_ref().ok_or_else(|| LabError::Config {
        line: 0,
        message: "missing [grid] section".into(),
    })?;
    let mut cells = Vec::new();
    for &a1 in &g.axis1.values {
        for &a2 in &g.axis2.values {
            for r in 0..g.seeds {
                let index = cells.len();
                let seed = match g.seed_policy {
                    SeedPolicy::Derived => g.seed_base + index as u64,
                    SeedPolicy::Shared => g.seed_base + r as u64,
                };
                cells.push(GridCell {
                    index,
                    axis1: a1,
                    axis2: a2,
                    seed,
                });
            }
        }
    }
    Ok(cells)
}

/// Fixed-hyperparameter config for one cell.
pub fn cell_config(cfg: &ExperimentConfig, cell: &GridCell) -> Result<ExperimentConfig> {
    let g = cfg.grid.as_ref().expect("cells come from a grid");
    let mut h = cfg.initial_hypers();
    h.set(cfg.hyper_index(&g.axis1.name)?, cell.axis1);
    h.set(cfg.hyper_index(&g.axis2.name)?, cell.axis2);
    let mut c = cfg.clone();
    c.mode = CfgMode::Fixed;
    c.reg.noise = h.noise_std;
    c.reg.l2 = h.l2;
    c.seeds = Seeds::all(cell.seed);
    c.grid = None;
    Ok(c)
}

type CellResult = std::result::Result<Summary, String>;

fn run_cells(cfg: &ExperimentConfig, split: &DatasetSplit, workers: usize) -> Result<Vec<(GridCell, CellResult)>> {
    let cells = grid_cells(cfg)?;
    let configs = cells
        .iter()
        .map(|c| cell_config(cfg, c))
        .collect::<Result<Vec<_>>>()?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, cells.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(c) = configs.get(i) else { break };
                let r = train_once(c, split, TrainMode::Fixed)
                    .map(|run| run.outcome.summary)
                    .map_err(|e| e.to_string());
                results.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    let results = results.into_inner().expect("no worker panicked");
    Ok(cells
        .into_iter()
        .zip(results)
        .map(|(c, r)| (c, r.expect("every cell ran")))
        .collect())
}

pub fn grid_table(rows: &[(GridCell, CellResult)]) -> Table {
    let mut t = Table::new([
        "axis1_value",
        "axis2_value",
        "seed",
        "final_test_xent",
        "final_test_error",
        "final_val_xent",
        "final_val_error",
        "wallclock_s",
        "error",
    ]);
    let mut sorted: Vec<&(GridCell, CellResult)> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        a.0.axis1
            .total_cmp(&b.0.axis1)
            .then(a.0.axis2.total_cmp(&b.0.axis2))
            .then(a.0.seed.cmp(&b.0.seed))
    });
    for (cell, r) in sorted {
        let mut row = vec![num(cell.axis1), num(cell.axis2), cell.seed.to_string()];
        match r {
            Ok(s) => {
                let e = &s.final_eval;
                row.extend([e.test.xent, e.test.error, e.t2.xent, e.t2.error, s.wallclock_s].map(num));
                row.push(String::new());
            }
            Err(msg) => {
                row.extend(std::iter::repeat_n(String::new(), 5));
                row.push(msg.clone());
            }
        }
        t.push(row);
    }
    t
}

pub struct GridRun {
    pub cells: Vec<(GridCell, CellResult)>,
    pub table: Table,
}

/// `grid`: writes `grid.csv` and `grid_meta.json`. Failed cells are
/// recorded in the `error` column.
pub fn run_grid(cfg: &ExperimentConfig, workers: usize, out: &Path) -> Result<GridRun> {
    let g = cfg.grid.as_ref().ok_or_else(|| LabError::Config {
        line: 0,
        message: "grid needs a [grid] section".into(),
    })?;
    let split = load_split(cfg)?;
    let cells = run_cells(cfg, &split, workers)?;
    let table = grid_table(&cells);
    table.write(&out.join("grid.csv"))?;
    let failed = cells.iter().filter(|(_, r)| r.is_err()).count();
    let meta = json!({
        "axis1": { "name": g.axis1.name, "values": g.axis1.values },
        "axis2": { "name": g.axis2.name, "values": g.axis2.values },
        "seeds": g.seeds,
        "seed_base": g.seed_base,
        "seed_policy": match g.seed_policy { SeedPolicy::Derived => "derived", SeedPolicy::Shared => "shared" },
        "cells": cells.len(),
        "failed_cells": failed,
        "axis_ranges": "chosen per grid file",
        "config": config_echo(cfg),
    });
    output::write_json(&out.join("grid_meta.json"), &meta)?;
    Ok(GridRun { cells, table })
}

/// Added to the init seed of the fixed rerun.
pub const RERUN_INIT_OFFSET: u64 = 1000;

pub struct PairedSeed {
    pub seed: u64,
    pub t1t2: Summary,
    pub rerun: Summary,
}

impl PairedSeed {
    pub fn test_error_difference(&self) -> f64 {
        self.t1t2.final_eval.test.error - self.rerun.final_eval.test.error
    }
}

/// Seeds for replicate `r`: every configured seed shifted by `r`.
pub fn replicate_seeds(base: Seeds, r: u64) -> Seeds {
    Seeds {
        init: base.init + r,
        noise: base.noise + r,
        shuffle: base.shuffle + r,
    }
}

/// Phase 1 tunes from the configured start; phase 2 retrains with the
/// final hyperparameters held fixed, from init seed + `init_offset`.
pub fn paired_once(
    cfg: &ExperimentConfig,
    split: &DatasetSplit,
    seeds: Seeds,
    init_offset: u64,
) -> Result<(TrainRun, TrainRun)> {
    let mut c1 = cfg.clone();
    c1.seeds = seeds;
    let phase1 = train_once(&c1, split, TrainMode::T1T2)?;
    let mut c2 = c1.clone();
    let h = &phase1.outcome.summary.final_hypers;
    c2.reg.noise = h.noise_std.clone();
    c2.reg.l2 = h.l2.clone();
    c2.seeds.init = seeds.init + init_offset;
    c2.mode = CfgMode::Fixed;
    let phase2 = train_once(&c2, split, TrainMode::Fixed)?;
    Ok((phase1, phase2))
}

/// `paired`: writes `paired.csv` and `paired.json`.
pub fn run_paired(cfg: &ExperimentConfig, n_seeds: usize, init_offset: u64, out: &Path) -> Result<Vec<PairedSeed>> {
    if n_seeds == 0 {
        return Err(LabError::Usage("--seeds must be at least 1".into()));
    }
    let split = load_split(cfg)?;
    let mut runs = Vec::new();
    let mut entries = Vec::new();
    for r in 0..n_seeds as u64 {
        let seeds = replicate_seeds(cfg.seeds, r);
        let (p1, p2) = paired_once(cfg, &split, seeds, init_offset)?;
        let run = PairedSeed {
            seed: seeds.init,
            t1t2: p1.outcome.summary,
            rerun: p2.outcome.summary,
        };
        entries.push(json!({
            "seed": run.seed,
            "test_error_t1t2": run.t1t2.final_eval.test.error,
            "test_error_rerun": run.rerun.final_eval.test.error,
            "test_error_difference": run.test_error_difference(),
            "val_test_error_pairs": [
                [run.t1t2.final_eval.t2.error, run.t1t2.final_eval.test.error],
                [run.rerun.final_eval.t2.error, run.rerun.final_eval.test.error],
            ],
            "t1t2": p1.summary,
            "rerun": p2.summary,
        }));
        runs.push(run);
    }
    let mut t = Table::new([
        "seed",
        "t1t2_val_error",
        "t1t2_test_error",
        "rerun_val_error",
        "rerun_test_error",
        "test_error_difference",
    ]);
    for r in &runs {
        t.push(vec![
            r.seed.to_string(),
            num(r.t1t2.final_eval.t2.error),
            num(r.t1t2.final_eval.test.error),
            num(r.rerun.final_eval.t2.error),
            num(r.rerun.final_eval.test.error),
            num(r.test_error_difference()),
        ]);
    }
    t.write(&out.join("paired.csv"))?;
    output::write_json(
        &out.join("paired.json"),
        &json!({ "rerun_init_offset": init_offset, "runs": entries, "config": config_echo(cfg) }),
    )?;
    Ok(runs)
}

pub const HYPERCHECK_MAX_PARAMS: usize = 10_000;
pub const L2_TOLERANCE: f64 = 1e-8;
pub const NOISE_TOLERANCE: f64 = 1e-4;
/// `g2ᵀ∇θC̃1` is linear in each L2 strength, so a wide stencil carries no
/// truncation error and less roundoff.
pub const L2_EPS: f64 = 1e-3;
pub const NOISE_EPS: f64 = 1e-4;
/// Noise draws tried before giving up on finding one without a ReLU kink
/// inside the stencil.
pub const MAX_DRAWS: u64 = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub analytic: f64,
    pub oracle: f64,
    pub rel_error: f64,
    pub tolerance: f64,
    /// Noise draw used; draws whose stencil crossed a ReLU kink are skipped.
    pub draw: u64,
    pub pass: bool,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs()
    }
}

/// Compares the analytic hypergradient with central differences of
/// `g2ᵀ∇θC̃1` under replayed noise for every hyperparameter, at the
/// initial parameters on the first T1 batch. `corrupt_sign` flips the
/// analytic value (negative control).
pub fn hypercheck_rows(cfg: &ExperimentConfig, split: &DatasetSplit, corrupt_sign: bool) -> Result<Vec<CheckRow>> {
    let tc = cfg.train_config(TrainMode::T1T2);
    tc.validate()?;
    let state = TrainState::new(&tc, split.t1.dims(), split.t1.classes)?;
    let params = &state.params;
    if params.param_count() > HYPERCHECK_MAX_PARAMS {
        return Err(LabError::Usage(format!(
            "hypercheck needs a model with at most {HYPERCHECK_MAX_PARAMS} parameters, this one has {}",
            params.param_count()
        )));
    }
    let rows1 = data::batches(split.t1.len(), tc.batch_size, tc.seeds.shuffle, streams::SHUFFLE_T1, 0)?;
    let rows2 = data::batches(split.t2.len(), tc.batch_size, tc.seeds.shuffle, streams::SHUFFLE_T2, 0)?;
    let (x1, y1) = split.t1.batch(&rows1[0]);
    let (x2, y2) = split.t2.batch(&rows2[0]);
    let bn_state = BatchNormState::new(params);
    let t2_mode = if tc.t2_batch_stats { Mode::EvalBatchStats } else { Mode::EvalClean };
    let (_, g2) = hypergrad::validation_gradient(params, &x2, &y2, &bn_state, t2_mode)?;
    let hypers = &tc.initial_hypers;
    let all = t1t2_core::Families {
        input_noise: true,
        hidden_noise: true,
        l2: true,
    };
    let batch_for = |draw: u64| ReplayBatch {
        x: &x1,
        labels: &y1,
        noise: RngStream::new(tc.seeds.noise.wrapping_add(draw), streams::NOISE),
        bn_state: bn_state.clone(),
    };
    let pattern = |h: &HyperParams, b: &ReplayBatch| -> Result<Vec<bool>> {
        Ok(hypergrad::replay_gradient(params, h, b)?.0.activation_pattern())
    };

    let mut out = Vec::new();
    for ix in hypers.indices() {
        let is_noise = matches!(ix, HyperIndex::Noise(_));
        let (eps, tol) = if is_noise { (NOISE_EPS, NOISE_TOLERANCE) } else { (L2_EPS, L2_TOLERANCE) };
        let mut chosen = None;
        for draw in 0..MAX_DRAWS {
            let b = batch_for(draw);
            if is_noise {
                let base = pattern(hypers, &b)?;
                let mut smooth = true;
                for sign in [-1.0, 1.0] {
                    let mut h = hypers.clone();
                    h.set(ix, hypers.get(ix) + sign * eps);
                    smooth &= pattern(&h, &b)? == base;
                }
                if !smooth {
                    continue;
                }
            }
            chosen = Some((draw, b));
            break;
        }
        let Some((draw, b)) = chosen else {
            out.push(CheckRow {
                name: hypers.name(ix),
                analytic: f64::NAN,
                oracle: f64::NAN,
                rel_error: f64::INFINITY,
                tolerance: tol,
                draw: MAX_DRAWS,
                pass: false,
            });
            continue;
        };
        let g = hypergrad::analytic_on_replay(params, hypers, all, &b, &g2, tc.route)?;
        let mut analytic = g.values.get(ix);
        if corrupt_sign {
            analytic = -analytic;
        }
        let oracle = hypergrad::fd_oracle(|h| hypergrad::gradient_alignment(params, h, &b, &g2), hypers, ix, eps)?;
        let rel_error = relative_error(analytic, oracle);
        out.push(CheckRow {
            name: hypers.name(ix),
            analytic,
            oracle,
            rel_error,
            tolerance: tol,
            draw,
            pass: rel_error <= tol,
        });
    }
    Ok(out)
}

pub fn check_table(rows: &[CheckRow]) -> Table {
    let mut t = Table::new(["hyper", "analytic", "oracle", "rel_error", "tolerance", "draw", "pass"]);
    for r in rows {
        t.push(vec![
            r.name.clone(),
            num(r.analytic),
            num(r.oracle),
            num(r.rel_error),
            num(r.tolerance),
            r.draw.to_string(),
            r.pass.to_string(),
        ]);
    }
    t
}

/// `hypercheck`: writes `hypercheck.csv`; any failing row is an
/// [`LabError::Oracle`].
pub fn run_hypercheck(cfg: &ExperimentConfig, corrupt_sign: bool, out: &Path) -> Result<Vec<CheckRow>> {
    let split = load_split(cfg)?;
    let rows = hypercheck_rows(cfg, &split, corrupt_sign)?;
    check_table(&rows).write(&out.join("hypercheck.csv"))?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(LabError::Oracle(format!("hypergradient mismatch for {}", failed.join(", "))));
    }
    Ok(rows)
}
