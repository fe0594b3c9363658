//! Iterative weighted-MMSE design of the uplink data precoders.

use log::{debug, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::channel::{EstimationStatistics, PilotPlan, PrecoderSet};
use crate::closedform::ClosedForm;
use crate::error::{Error, Result};
use crate::harness::config::SystemConfig;
use crate::numerics::{c, hermitian_eig, hermitian_part, identity, inverse_hpd, solve_hpd, CMat};
use crate::receive::{mc_decode_stats, mc_weighted_cross_gram, solve_all, Combiner, DecodeStatistics, LsfdSolution, McSetup};
use crate::rng::{derive_seed, Stream};
use crate::scenario::Network;

/// Relative slack allowed on WSR decreases before they count as a defect.
pub const MONOTONE_SLACK: f64 = 1e-8;
const BRACKET_DOUBLINGS: usize = 60;
const BISECTION_STEPS: usize = 200;
/// Bisection stops once the power is within this fraction below the budget.
const POWER_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedProblem {
    pub mu: Vec<f64>,
    pub p: Vec<f64>,
}

impl WeightedProblem {
    pub fn new(mu: Vec<f64>, p: Vec<f64>) -> Result<Self> {
        if mu.len() != p.len() {
            return Err(Error::Dimension(format!("{} priority weights for {} budgets", mu.len(), p.len())));
        }
        if mu.iter().chain(&p).any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::Config("priority weights and power budgets must be positive".into()));
        }
        Ok(WeightedProblem { mu, p })
    }
}

/// `W = E⁻¹`.
pub fn update_weight(e: &CMat) -> Result<CMat> {
    Ok(hermitian_part(&inverse_hpd(e)?))
}

/// `F(λ) = μ (X + λI)⁻¹ E{G_kk}ᴴ A W` by a direct solve, where `X` is the
/// weighted cross Gram. Requires `X + λI` to be nonsingular.
pub fn precoder_update(cross: &CMat, g_mean: &CMat, a: &CMat, w: &CMat, mu: f64, lambda: f64) -> Result<CMat> {
    let n = cross.nrows();
    let rhs = g_mean.adjoint() * a * w * c(mu, 0.0);
    solve_hpd(&(cross + identity(n) * c(lambda, 0.0)), &rhs)
}

/// `F(λ)` through one eigendecomposition `X = U diag(d) Uᴴ`, so that
/// `tr(F Fᴴ) = Σ_j ‖[Uᴴ B]_j‖² / (d_j + λ)²` is cheap for every λ.
pub struct PrecoderEvaluator {
    u: CMat,
    d: Vec<f64>,
    ub: CMat,
    row_power: Vec<f64>,
}

impl PrecoderEvaluator {
    /// `cross` is the weighted cross Gram, `rhs = μ E{G_kk}ᴴ A W`.
    pub fn new(cross: &CMat, rhs: &CMat) -> Result<Self> {
        let (vals, u) = hermitian_eig(cross)?;
        let max = vals.iter().cloned().fold(0.0_f64, f64::max);
        let d = vals.iter().map(|&v| if v > 1e-12 * max { v } else { 0.0 }).collect();
        let ub = u.adjoint() * rhs;
        let row_power = (0..ub.nrows()).map(|j| ub.row(j).norm_squared()).collect();
        Ok(PrecoderEvaluator { u, d, ub, row_power })
    }

    /// `tr(F(λ) F(λ)ᴴ)`; infinite at λ = 0 when `rhs` reaches the null space.
    pub fn power(&self, lambda: f64) -> f64 {
        self.d
            .iter()
            .zip(&self.row_power)
            .map(|(&d, &r)| {
                if r == 0.0 {
                    0.0
                } else {
                    r / (d + lambda).powi(2)
                }
            })
            .sum()
    }

    pub fn precoder(&self, lambda: f64) -> CMat {
        let mut scaled = self.ub.clone();
        for (j, &d) in self.d.iter().enumerate() {
            let s = if self.row_power[j] == 0.0 { 0.0 } else { 1.0 / (d + lambda) };
            scaled.row_mut(j).scale_mut(s);
        }
        &self.u * scaled
    }

    /// `tr(X)/N`, the natural scale of λ.
    pub fn trace_scale(&self) -> f64 {
        self.d.iter().sum::<f64>() / self.d.len().max(1) as f64
    }
}

/// Smallest λ ≥ 0 with `power(λ) ≤ budget` for a nonincreasing `power`.
///
/// Returns 0 when the unconstrained solution is feasible. Otherwise the
/// result lies on the feasible side of the constraint, within `POWER_TOL`
/// of equality. The upper bracket doubles from `scale`.
pub fn bisect_lambda(budget: f64, scale: f64, power: impl Fn(f64) -> f64) -> Result<f64> {
    if power(0.0) <= budget {
        return Ok(0.0);
    }
    let mut hi = if scale > 0.0 && scale.is_finite() { scale } else { 1.0 };
    let mut doublings = 0;
    while power(hi) > budget {
        doublings += 1;
        if doublings > BRACKET_DOUBLINGS {
            return Err(Error::Bisection(format!("no feasible multiplier up to {hi:.3e} for budget {budget:.3e}")));
        }
        hi *= 2.0;
    }
    let mut lo = if doublings == 0 { 0.0 } else { hi / 2.0 };
    for _ in 0..BISECTION_STEPS {
        if budget - power(hi) <= POWER_TOL * budget {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if power(mid) > budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Where the optimizer gets its statistics from.
pub enum StatsProvider<'a> {
    /// Closed-form MR statistics; deterministic.
    ClosedForm(&'a ClosedForm<'a>),
    MonteCarlo(McPlan<'a>),
}

/// Monte-Carlo statistics settings. With `common_random_numbers` every
/// refresh reuses the realizations of `seed`; otherwise each iteration draws
/// from its own derived stream.
pub struct McPlan<'a> {
    pub net: &'a Network,
    pub est: &'a EstimationStatistics,
    pub plan: &'a PilotPlan,
    pub combiner: Combiner,
    pub sigma2: f64,
    pub n_r: usize,
    pub seed: u64,
    pub common_random_numbers: bool,
}

impl McPlan<'_> {
    fn setup<'b>(&'b self, pre: &'b PrecoderSet, iteration: usize) -> McSetup<'b> {
        let seed = if self.common_random_numbers {
            self.seed
        } else {
            derive_seed(self.seed, Stream::Channel, &[u64::MAX, iteration as u64])
        };
        McSetup {
            net: self.net,
            est: self.est,
            plan: self.plan,
            pre,
            combiner: self.combiner,
            sigma2: self.sigma2,
            n_r: self.n_r,
            seed,
        }
    }
}

impl StatsProvider<'_> {
    pub fn is_deterministic(&self) -> bool {
        matches!(self, StatsProvider::ClosedForm(_))
    }

    pub fn stats(&self, pre: &PrecoderSet, iteration: usize) -> Result<DecodeStatistics> {
        match self {
            StatsProvider::ClosedForm(cf) => cf.decode_stats(pre, Default::default()),
            StatsProvider::MonteCarlo(mc) => mc_decode_stats(&mc.setup(pre, iteration)),
        }
    }

    /// `Σ_l μ_l E{G_lkᴴ A_l W_l A_lᴴ G_lk}` for every k.
    pub fn cross_gram(&self, pre: &PrecoderSet, a: &[CMat], w: &[CMat], mu: &[f64], iteration: usize) -> Result<Vec<CMat>> {
        match self {
            StatsProvider::ClosedForm(cf) => {
                let a_bar: Vec<CMat> = a.iter().zip(w).map(|(a, w)| hermitian_part(&(a * w * a.adjoint()))).collect();
                Ok(cf.weighted_cross_gram(&a_bar, mu))
            }
            StatsProvider::MonteCarlo(mc) => mc_weighted_cross_gram(&mc.setup(pre, iteration), a, w, mu),
        }
    }
}

/// One row of the optimizer trace. Iteration 0 is the initial precoder.
#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub wsr: f64,
    pub se: Vec<f64>,
    pub lambda: Vec<f64>,
    pub power: Vec<f64>,
    /// False for an update that lowered the WSR and was rolled back.
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub f_u: PrecoderSet,
    pub a: Vec<CMat>,
    pub e: Vec<CMat>,
    pub w: Vec<CMat>,
    pub se: Vec<f64>,
    pub wsr_trace: Vec<f64>,
    pub iteration: usize,
    pub records: Vec<IterationRecord>,
    /// UEs without usable signal; kept at their initial precoder.
    pub degenerate: Vec<usize>,
    /// Set when a deterministic run saw the WSR drop beyond `MONOTONE_SLACK`.
    pub defect: bool,
}

fn weighted_sum(mu: &[f64], se: &[f64], skip: &[bool]) -> f64 {
    mu.iter().zip(se).zip(skip).filter(|(_, &s)| !s).map(|((m, s), _)| m * s).sum()
}

fn powers(pre: &PrecoderSet) -> Vec<f64> {
    pre.data.iter().map(|f| f.norm_squared()).collect()
}

/// Runs the alternating optimization from `initial` until the relative WSR
/// change drops to `epsilon` or `i_max` updates were made.
///
/// Each update refreshes A and E from the statistics of the current
/// precoders, sets `W = E⁻¹`, and solves every UE's precoder with the others
/// held fixed. An update that lowers the WSR is rolled back and ends the run.
pub fn iwmmse_run(
    problem: &WeightedProblem,
    provider: &StatsProvider,
    initial: &PrecoderSet,
    config: &SystemConfig,
    i_max: usize,
) -> Result<OptimizerState> {
    let (sigma2, tau_p, tau_c) = (config.sigma2, config.tau_p(), config.tau_c);
    let kk = initial.data.len();
    let n = initial.data.first().map_or(0, |f| f.nrows());
    let mu = &problem.mu;

    let mut pre = initial.clone();
    let mut stats = provider.stats(&pre, 0)?;
    let skip: Vec<bool> = (0..kk).map(|k| stats.is_degenerate(k)).collect();
    let degenerate: Vec<usize> = (0..kk).filter(|&k| skip[k]).collect();
    if !degenerate.is_empty() {
        warn!("UEs {degenerate:?} have no usable signal; keeping their initial precoders");
    }
    let mu_eff: Vec<f64> = mu.iter().zip(&skip).map(|(&m, &s)| if s { 0.0 } else { m }).collect();
    let mut sol: LsfdSolution = solve_all(&stats, &pre.data, sigma2, tau_p, tau_c)?;
    let mut wsr = weighted_sum(mu, &sol.se, &skip);
    let mut state = OptimizerState {
        f_u: pre.clone(),
        a: sol.a.clone(),
        e: sol.e.clone(),
        w: Vec::new(),
        se: sol.se.clone(),
        wsr_trace: vec![wsr],
        iteration: 0,
        records: vec![IterationRecord {
            iteration: 0,
            wsr,
            se: sol.se.clone(),
            lambda: vec![0.0; kk],
            power: powers(&pre),
            accepted: true,
        }],
        degenerate,
        defect: false,
    };

    for it in 1..=i_max {
        let w: Vec<CMat> = (0..kk)
            .map(|k| if skip[k] { Ok(identity(n)) } else { update_weight(&sol.e[k]) })
            .collect::<Result<_>>()?;
        let cross = provider.cross_gram(&pre, &sol.a, &w, &mu_eff, it - 1)?;
        let updates: Vec<(CMat, f64)> = (0..kk)
            .into_par_iter()
            .map(|k| {
                if skip[k] {
                    return Ok((pre.data[k].clone(), 0.0));
                }
                let rhs = stats.g_mean[k].adjoint() * &sol.a[k] * &w[k] * c(mu[k], 0.0);
                let eval = PrecoderEvaluator::new(&cross[k], &rhs)?;
                let lambda = bisect_lambda(problem.p[k], eval.trace_scale(), |x| eval.power(x))?;
                Ok((eval.precoder(lambda), lambda))
            })
            .collect::<Result<_>>()?;
        let lambda: Vec<f64> = updates.iter().map(|u| u.1).collect();
        let next = pre.with_data(updates.into_iter().map(|u| u.0).collect());
        let next_stats = provider.stats(&next, it)?;
        let next_sol = solve_all(&next_stats, &next.data, sigma2, tau_p, tau_c)?;
        let next_wsr = weighted_sum(mu, &next_sol.se, &skip);
        let accepted = next_wsr >= wsr * (1.0 - MONOTONE_SLACK);
        state.records.push(IterationRecord {
            iteration: it,
            wsr: next_wsr,
            se: next_sol.se.clone(),
            lambda,
            power: powers(&next),
            accepted,
        });
        if !accepted {
            if provider.is_deterministic() {
                state.defect = true;
                warn!("WSR fell from {wsr:.6} to {next_wsr:.6} at iteration {it} with deterministic statistics");
            } else {
                debug!("WSR fell from {wsr:.6} to {next_wsr:.6} at iteration {it}; keeping the previous precoders");
            }
            break;
        }
        let change = (next_wsr - wsr).abs() / wsr.abs().max(f64::MIN_POSITIVE);
        pre = next;
        stats = next_stats;
        sol = next_sol;
        wsr = next_wsr;
        state.wsr_trace.push(wsr);
        state.iteration = it;
        state.w = w;
        if change <= config.epsilon {
            break;
        }
    }
    state.f_u = pre;
    state.a = sol.a;
    state.e = sol.e;
    state.se = sol.se;
    Ok(state)
}
