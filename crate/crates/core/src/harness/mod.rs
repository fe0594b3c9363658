pub mod config;
pub mod report;

use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::channel::{assign_pilots, pilot_statistics, PrecoderSet};
use crate::closedform::ClosedForm;
use crate::error::{Error, Result};
use crate::receive::solve_all;
use crate::scenario::generate_network;
use crate::wmmse::{iwmmse_run, IterationRecord, McPlan, StatsProvider, WeightedProblem};
use config::{PrecoderMode, SePath, SystemConfig};

/// One UE at one optimizer iteration of one drop.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeRow {
    pub drop_seed: u64,
    pub m: usize,
    pub k_total: usize,
    pub l: usize,
    pub n: usize,
    pub combiner: String,
    pub precoder_mode: String,
    pub se_path: String,
    pub iteration: usize,
    pub ue_id: usize,
    pub se_bits_per_hz: f64,
    pub sum_se: f64,
    pub wsr: f64,
    /// Monte-Carlo realizations behind the statistics; 0 on the closed path.
    pub n_r: usize,
}

/// Per-UE optimizer record, including rolled-back updates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub drop_seed: u64,
    pub l: usize,
    pub n: usize,
    pub iteration: usize,
    pub ue_id: usize,
    pub se_bits_per_hz: f64,
    pub lambda: f64,
    pub power: f64,
    pub wsr: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct DropOutcome {
    pub rows: Vec<SeRow>,
    pub trace: Vec<TraceRow>,
    pub seconds: f64,
}

fn se_rows(cfg: &SystemConfig, seed: u64, iteration: usize, se: &[f64]) -> Vec<SeRow> {
    let mu = cfg.mu();
    let sum_se: f64 = se.iter().sum();
    let wsr: f64 = mu.iter().zip(se).map(|(m, s)| m * s).sum();
    let n_r = if cfg.se_path == SePath::Mc { cfg.n_r } else { 0 };
    se.iter()
        .enumerate()
        .map(|(ue_id, &s)| SeRow {
            drop_seed: seed,
            m: cfg.m,
            k_total: cfg.k,
            l: cfg.l,
            n: cfg.n,
            combiner: cfg.combiner.to_string(),
            precoder_mode: cfg.precoder_mode.to_string(),
            se_path: cfg.se_path.to_string(),
            iteration,
            ue_id,
            se_bits_per_hz: s,
            sum_se,
            wsr,
            n_r,
        })
        .collect()
}

fn trace_rows(cfg: &SystemConfig, seed: u64, records: &[IterationRecord]) -> Vec<TraceRow> {
    records
        .iter()
        .flat_map(|r| {
            (0..r.se.len()).map(move |k| TraceRow {
                drop_seed: seed,
                l: cfg.l,
                n: cfg.n,
                iteration: r.iteration,
                ue_id: k,
                se_bits_per_hz: r.se[k],
                lambda: r.lambda[k],
                power: r.power[k],
                wsr: r.wsr,
                accepted: r.accepted,
            })
        })
        .collect()
}

/// Full pipeline for one drop. Optimizing modes emit rows for every accepted
/// iterate, starting with the unprecoded iterate 0.
pub fn run_drop(cfg: &SystemConfig, seed: u64) -> Result<DropOutcome> {
    let start = Instant::now();
    let wrap = |e: Error| Error::Drop { seed, source: Box::new(e) };
    cfg.validate().map_err(wrap)?;
    let net = generate_network(cfg, seed);
    let plan = assign_pilots(cfg.k, cfg.n, cfg.tau_p()).map_err(wrap)?;
    let pre = PrecoderSet::scaled_identity(&cfg.powers(), cfg.n);
    let est = pilot_statistics(&net, &plan, &pre.pilot, cfg.sigma2).map_err(wrap)?;
    let cf;
    let provider = match cfg.se_path {
        SePath::Closed => {
            cf = ClosedForm::new(&net, &est, &plan, &pre.pilot);
            StatsProvider::ClosedForm(&cf)
        }
        SePath::Mc => StatsProvider::MonteCarlo(McPlan {
            net: &net,
            est: &est,
            plan: &plan,
            combiner: cfg.combiner,
            sigma2: cfg.sigma2,
            n_r: cfg.n_r,
            seed,
            common_random_numbers: cfg.common_random_numbers,
        }),
    };

    let (rows, trace) = match cfg.precoder_mode {
        PrecoderMode::None => {
            let stats = provider.stats(&pre, 0).map_err(wrap)?;
            let sol = solve_all(&stats, &pre.data, cfg.sigma2, cfg.tau_p(), cfg.tau_c).map_err(wrap)?;
            (se_rows(cfg, seed, 0, &sol.se), Vec::new())
        }
        mode => {
            let i_max = if mode == PrecoderMode::Wmmse1 { 1 } else { cfg.i_max };
            let problem = WeightedProblem::new(cfg.mu(), cfg.powers()).map_err(wrap)?;
            let state = iwmmse_run(&problem, &provider, &pre, cfg, i_max).map_err(wrap)?;
            if state.defect {
                warn!("drop {seed}: optimizer objective decreased with deterministic statistics");
            }
            let rows = state
                .records
                .iter()
                .filter(|r| r.accepted)
                .flat_map(|r| se_rows(cfg, seed, r.iteration, &r.se))
                .collect();
            (rows, trace_rows(cfg, seed, &state.records))
        }
    };
    let seconds = start.elapsed().as_secs_f64();
    info!("drop {seed} (L = {}, N = {}) finished in {seconds:.2} s", cfg.l, cfg.n);
    Ok(DropOutcome { rows, trace, seconds })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    L,
    N,
}

/// Mean and standard deviation of the final-iterate sum SE over the drops of
/// one grid point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSummary {
    pub axis_value: usize,
    pub drops: usize,
    pub mean_sum_se: f64,
    pub std_sum_se: f64,
    pub mean_ue_se: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub rows: Vec<SeRow>,
    pub trace: Vec<TraceRow>,
    pub summary: Vec<GridSummary>,
    /// `(axis value, drop seed, seconds)` per drop.
    pub timing: Vec<(usize, u64, f64)>,
    /// Axis values that were run, in order.
    pub values: Vec<usize>,
}

/// Config of one grid point, or `None` when its pilot length does not fit
/// in the coherence block.
pub fn grid_config(base: &SystemConfig, axis: Axis, value: usize) -> Option<SystemConfig> {
    let mut cfg = base.clone();
    match axis {
        Axis::L => cfg.l = value,
        Axis::N => {
            cfg.n = value;
            cfg.tau_p = None;
        }
    }
    if cfg.tau_p() > cfg.tau_c {
        warn!("skipping {axis:?} = {value}: tau_p = {} exceeds tau_c = {}", cfg.tau_p(), cfg.tau_c);
        return None;
    }
    Some(cfg)
}

fn final_rows(rows: &[SeRow]) -> &[SeRow] {
    let last = rows.iter().map(|r| r.iteration).max().unwrap_or(0);
    let first = rows.iter().position(|r| r.iteration == last).unwrap_or(rows.len());
    &rows[first..]
}

/// Runs `seeds × values` drops on a pool of `workers` threads. Output order is
/// (value, seed) regardless of scheduling.
pub fn sweep(base: &SystemConfig, axis: Axis, values: &[usize], seeds: &[u64], workers: usize) -> Result<SweepOutput> {
    let mut grid = Vec::new();
    for &v in values {
        if let Some(cfg) = grid_config(base, axis, v) {
            cfg.validate()?;
            grid.push((v, cfg));
        }
    }
    let jobs: Vec<(usize, u64)> = (0..grid.len()).flat_map(|g| seeds.iter().map(move |&s| (g, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<Result<DropOutcome>> = pool.install(|| jobs.par_iter().map(|&(g, s)| run_drop(&grid[g].1, s)).collect());

    let mut out = SweepOutput {
        rows: Vec::new(),
        trace: Vec::new(),
        summary: Vec::new(),
        timing: Vec::new(),
        values: grid.iter().map(|g| g.0).collect(),
    };
    let mut per_point: Vec<Vec<(f64, f64)>> = vec![Vec::new(); grid.len()];
    for (&(g, seed), outcome) in jobs.iter().zip(outcomes) {
        let outcome = outcome?;
        let last = final_rows(&outcome.rows);
        let sum = last.first().map_or(0.0, |r| r.sum_se);
        per_point[g].push((sum, sum / grid[g].1.k as f64));
        out.timing.push((grid[g].0, seed, outcome.seconds));
        out.rows.extend(outcome.rows);
        out.trace.extend(outcome.trace);
    }
    for (g, pts) in per_point.iter().enumerate() {
        let d = pts.len() as f64;
        let mean = pts.iter().map(|p| p.0).sum::<f64>() / d;
        let var = pts.iter().map(|p| (p.0 - mean).powi(2)).sum::<f64>() / (d - 1.0).max(1.0);
        out.summary.push(GridSummary {
            axis_value: grid[g].0,
            drops: pts.len(),
            mean_sum_se: mean,
            std_sum_se: var.sqrt(),
            mean_ue_se: pts.iter().map(|p| p.1).sum::<f64>() / d,
        });
    }
    Ok(out)
}
