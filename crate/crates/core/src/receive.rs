//! First-layer combining, Monte-Carlo decode statistics, optimal LSFD, MSE
//! matrices and the use-and-then-forget SE bound.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{sample_realization, EstimationStatistics, PilotPlan, PrecoderSet, Realization};
use crate::error::{Error, Result};
use crate::numerics::{accumulate_outer, c, frobenius, hermitian_part, identity, log2_det_hpd, solve_hpd, CMat};
use crate::scenario::Network;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Combiner {
    Mr,
    Lmmse,
}

impl std::fmt::Display for Combiner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Combiner::Mr => "mr",
            Combiner::Lmmse => "lmmse",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StatSource {
    MonteCarlo { n_r: usize },
    ClosedForm,
}

/// First- and second-order statistics of the effective channels `G_kl`.
#[derive(Debug, Clone)]
pub struct DecodeStatistics {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `E{G_kk}` per UE (MN×N).
    pub g_mean: Vec<CMat>,
    /// `E{G_kl F̄_l G_klᴴ}` indexed `k * K + l` (MN×MN).
    pub g_gram: Vec<CMat>,
    /// Block-diagonal `S_k = diag(E{V_mkᴴ V_mk})` per UE (MN×MN).
    pub s: Vec<CMat>,
    pub source: StatSource,
}

impl DecodeStatistics {
    pub fn gram(&self, k: usize, l: usize) -> &CMat {
        &self.g_gram[k * self.k + l]
    }

    /// `Σ_l E{G_kl F̄_l G_klᴴ}`.
    pub fn gram_sum(&self, k: usize) -> CMat {
        let mut acc = self.g_gram[k * self.k].clone();
        for l in 1..self.k {
            acc += self.gram(k, l);
        }
        acc
    }

    /// `Σ_l E{G_kl F̄_l G_klᴴ} + σ² S_k`.
    pub fn q(&self, k: usize, sigma2: f64) -> CMat {
        hermitian_part(&(self.gram_sum(k) + &self.s[k] * c(sigma2, 0.0)))
    }

    /// Whether UE k has (numerically) no useful signal at any AP.
    pub fn is_degenerate(&self, k: usize) -> bool {
        let g = frobenius(&self.g_mean[k]);
        g == 0.0 || !g.is_finite()
    }
}

pub fn mr_combiner(h_hat: &CMat) -> CMat {
    h_hat.clone()
}

/// `C′ = E{H̃ F̄ H̃ᴴ}` from the error covariance: `[C′]_{jq} = Σ F̄_{p2 p1} [C^{p2 p1}]_{jq}`.
pub fn cprime(cov: &CMat, f_bar: &CMat, l: usize) -> CMat {
    let n = f_bar.nrows();
    let mut out = CMat::zeros(l, l);
    for p1 in 0..n {
        for p2 in 0..n {
            let w = f_bar[(p2, p1)];
            if w == c(0.0, 0.0) {
                continue;
            }
            out += cov.view((p2 * l, p1 * l), (l, l)) * w;
        }
    }
    out
}

/// L-MMSE combiners of every UE at one AP. `h_hat`, `f_u` and `f_bar` are
/// indexed by UE, `cprime_sum = Σ_l C′_ml`.
pub fn lmmse_combiners(h_hat: &[CMat], f_u: &[CMat], f_bar: &[CMat], cprime_sum: &CMat, sigma2: f64) -> Result<Vec<CMat>> {
    let l = cprime_sum.nrows();
    let mut mat = cprime_sum + identity(l) * c(sigma2, 0.0);
    for (h, fb) in h_hat.iter().zip(f_bar) {
        mat += h * fb * h.adjoint();
    }
    let rhs: Vec<CMat> = h_hat.iter().zip(f_u).map(|(h, f)| h * f).collect();
    let n = rhs.first().map_or(0, |r| r.ncols());
    let mut stacked = CMat::zeros(l, n * rhs.len());
    for (j, r) in rhs.iter().enumerate() {
        stacked.view_mut((0, j * n), (l, n)).copy_from(r);
    }
    let sol = solve_hpd(&mat, &stacked)?;
    Ok((0..rhs.len()).map(|j| sol.view((0, j * n), (l, n)).into_owned()).collect())
}

/// `V_mk = (Σ_l (Ĥ_ml F̄_l Ĥ_mlᴴ + C′_ml) + σ² I)⁻¹ Ĥ_mk F_k` for one UE.
pub fn lmmse_combiner(h_hat: &[CMat], cprimes: &[CMat], f_u: &[CMat], sigma2: f64, k: usize) -> Result<CMat> {
    let l = h_hat[k].nrows();
    let f_bar: Vec<CMat> = f_u.iter().map(|f| f * f.adjoint()).collect();
    let mut sum = CMat::zeros(l, l);
    for cp in cprimes {
        sum += cp;
    }
    let all = lmmse_combiners(h_hat, f_u, &f_bar, &sum, sigma2)?;
    Ok(all.into_iter().nth(k).expect("k indexes a UE"))
}

/// Everything the Monte-Carlo engine needs to regenerate realizations.
pub struct McSetup<'a> {
    pub net: &'a Network,
    pub est: &'a EstimationStatistics,
    pub plan: &'a PilotPlan,
    pub pre: &'a PrecoderSet,
    pub combiner: Combiner,
    pub sigma2: f64,
    pub n_r: usize,
    pub seed: u64,
}

const CHUNK: usize = 16;

/// Sum over realizations `0..n_r` computed in fixed chunks whose partial sums
/// are merged in chunk order, so the result does not depend on scheduling.
pub(crate) fn ordered_sum<A, I, F, M>(n_r: usize, init: I, accumulate: F, merge: M) -> Result<A>
where
    A: Send,
    I: Fn() -> A + Sync,
    F: Fn(&mut A, u64) -> Result<()> + Sync,
    M: Fn(&mut A, A),
{
    let chunks = n_r.div_ceil(CHUNK);
    let batch = 4 * rayon::current_num_threads().max(1);
    let mut total = init();
    let mut start = 0;
    while start < chunks {
        let end = (start + batch).min(chunks);
        let parts: Vec<Result<A>> = (start..end)
            .into_par_iter()
            .map(|ch| {
                let mut acc = init();
                for r in ch * CHUNK..((ch + 1) * CHUNK).min(n_r) {
                    accumulate(&mut acc, r as u64)?;
                }
                Ok(acc)
            })
            .collect();
        for p in parts {
            merge(&mut total, p?);
        }
        start = end;
    }
    Ok(total)
}

/// Combiners and effective channels of one realization.
pub(crate) struct EffectiveChannels {
    /// `V_mk` indexed `m * K + k`.
    pub v: Vec<CMat>,
    /// `G_kl` (MN×N) indexed `k * K + l`.
    pub g: Vec<CMat>,
}

pub(crate) struct CombinerContext {
    f_bar: Vec<CMat>,
    /// `Σ_l C′_ml` per AP (L-MMSE only).
    cprime_sum: Vec<CMat>,
}

impl CombinerContext {
    pub fn new(setup: &McSetup) -> Self {
        let (net, est) = (setup.net, setup.est);
        let f_bar: Vec<CMat> = (0..net.k).map(|k| setup.pre.f_bar(k)).collect();
        let cprime_sum = match setup.combiner {
            Combiner::Mr => Vec::new(),
            Combiner::Lmmse => (0..net.m)
                .map(|m| {
                    let mut acc = CMat::zeros(net.l, net.l);
                    for l in 0..net.k {
                        acc += cprime(est.c(m, l), &f_bar[l], net.l);
                    }
                    acc
                })
                .collect(),
        };
        CombinerContext { f_bar, cprime_sum }
    }
}

pub(crate) fn effective_channels(setup: &McSetup, ctx: &CombinerContext, real: &Realization) -> Result<EffectiveChannels> {
    let net = setup.net;
    let (mm, kk, n) = (net.m, net.k, net.n);
    let v: Vec<CMat> = match setup.combiner {
        Combiner::Mr => real.h_hat.iter().map(mr_combiner).collect(),
        Combiner::Lmmse => {
            let mut v = Vec::with_capacity(mm * kk);
            for m in 0..mm {
                let h_hat = &real.h_hat[m * kk..(m + 1) * kk];
                v.extend(lmmse_combiners(h_hat, &setup.pre.data, &ctx.f_bar, &ctx.cprime_sum[m], setup.sigma2)?);
            }
            v
        }
    };
    let mut g = Vec::with_capacity(kk * kk);
    for k in 0..kk {
        for l in 0..kk {
            let mut gkl = CMat::zeros(mm * n, n);
            for m in 0..mm {
                let blk = v[m * kk + k].adjoint() * &real.h[m * kk + l];
                gkl.view_mut((m * n, 0), (n, n)).copy_from(&blk);
            }
            g.push(gkl);
        }
    }
    Ok(EffectiveChannels { v, g })
}

struct DecodeAccumulator {
    g_mean: Vec<CMat>,
    g_gram: Vec<CMat>,
    s: Vec<CMat>,
}

/// Sample averages of `G_kk`, `G_kl F̄_l G_klᴴ` and `V_mkᴴ V_mk` over `n_r`
/// joint channel/pilot-noise realizations.
pub fn mc_decode_stats(setup: &McSetup) -> Result<DecodeStatistics> {
    if setup.n_r == 0 {
        return Err(Error::Config("n_r must be at least 1".into()));
    }
    let net = setup.net;
    let (mm, kk, n) = (net.m, net.k, net.n);
    let ctx = CombinerContext::new(setup);
    let init = || DecodeAccumulator {
        g_mean: vec![CMat::zeros(mm * n, n); kk],
        g_gram: vec![CMat::zeros(mm * n, mm * n); kk * kk],
        s: vec![CMat::zeros(mm * n, mm * n); kk],
    };
    let accumulate = |acc: &mut DecodeAccumulator, r: u64| -> Result<()> {
        let real = sample_realization(net, setup.est, setup.plan, &setup.pre.pilot, setup.seed, r);
        let eff = effective_channels(setup, &ctx, &real)?;
        for k in 0..kk {
            acc.g_mean[k] += &eff.g[k * kk + k];
            for m in 0..mm {
                let v = &eff.v[m * kk + k];
                let mut blk = acc.s[k].view_mut((m * n, m * n), (n, n));
                blk += v.adjoint() * v;
            }
            for l in 0..kk {
                let y = &eff.g[k * kk + l] * &setup.pre.data[l];
                accumulate_outer(&mut acc.g_gram[k * kk + l], &y);
            }
        }
        Ok(())
    };
    let merge = |total: &mut DecodeAccumulator, part: DecodeAccumulator| {
        for (t, p) in total.g_mean.iter_mut().zip(part.g_mean) {
            *t += p;
        }
        for (t, p) in total.g_gram.iter_mut().zip(part.g_gram) {
            *t += p;
        }
        for (t, p) in total.s.iter_mut().zip(part.s) {
            *t += p;
        }
    };
    let sum = ordered_sum(setup.n_r, init, accumulate, merge)?;
    let scale = c(1.0 / setup.n_r as f64, 0.0);
    Ok(DecodeStatistics {
        m: mm,
        k: kk,
        n,
        g_mean: sum.g_mean.into_iter().map(|x| x * scale).collect(),
        g_gram: sum.g_gram.into_iter().map(|x| hermitian_part(&(x * scale))).collect(),
        s: sum.s.into_iter().map(|x| hermitian_part(&(x * scale))).collect(),
        source: StatSource::MonteCarlo { n_r: setup.n_r },
    })
}

/// Sample averages of `Σ_l μ_l G_lkᴴ A_l W_l A_lᴴ G_lk` for every UE k,
/// over the same realizations as [`mc_decode_stats`].
pub fn mc_weighted_cross_gram(setup: &McSetup, a: &[CMat], w: &[CMat], mu: &[f64]) -> Result<Vec<CMat>> {
    let net = setup.net;
    let (kk, n) = (net.k, net.n);
    let ctx = CombinerContext::new(setup);
    let accumulate = |acc: &mut Vec<CMat>, r: u64| -> Result<()> {
        let real = sample_realization(net, setup.est, setup.plan, &setup.pre.pilot, setup.seed, r);
        let eff = effective_channels(setup, &ctx, &real)?;
        for l in 0..kk {
            if mu[l] == 0.0 {
                continue;
            }
            let ah = a[l].adjoint();
            for k in 0..kk {
                let x = &ah * &eff.g[l * kk + k];
                acc[k] += x.adjoint() * &w[l] * &x * c(mu[l], 0.0);
            }
        }
        Ok(())
    };
    let sum = ordered_sum(
        setup.n_r,
        || vec![CMat::zeros(n, n); kk],
        accumulate,
        |t: &mut Vec<CMat>, p: Vec<CMat>| {
            for (x, y) in t.iter_mut().zip(p) {
                *x += y;
            }
        },
    )?;
    let scale = c(1.0 / setup.n_r as f64, 0.0);
    Ok(sum.into_iter().map(|x| hermitian_part(&(x * scale))).collect())
}

/// `(1 − τ_p/τ_c)`, clamped at zero.
pub fn prelog(tau_p: usize, tau_c: usize) -> f64 {
    (1.0 - tau_p as f64 / tau_c as f64).max(0.0)
}

/// `A_k = (Σ_l E{G_kl F̄_l G_klᴴ} + σ² S_k)⁻¹ E{G_kk} F_k`.
pub fn optimal_lsfd(stats: &DecodeStatistics, f_u: &CMat, sigma2: f64, k: usize) -> Result<CMat> {
    let rhs = &stats.g_mean[k] * f_u;
    if frobenius(&rhs) == 0.0 {
        return Ok(CMat::zeros(rhs.nrows(), rhs.ncols()));
    }
    solve_hpd(&stats.q(k, sigma2), &rhs)
}

/// Conditional MSE matrix for arbitrary LSFD weights `a`.
pub fn mse_matrix(stats: &DecodeStatistics, a: &CMat, f_u: &CMat, sigma2: f64, k: usize) -> CMat {
    let d = a.adjoint() * &stats.g_mean[k] * f_u;
    let quad = a.adjoint() * stats.q(k, sigma2) * a;
    hermitian_part(&(identity(f_u.ncols()) - &d - d.adjoint() + quad))
}

/// `E_opt = I − F_kᴴ E{G_kk}ᴴ A_opt`.
pub fn mse_opt(stats: &DecodeStatistics, a_opt: &CMat, f_u: &CMat, k: usize) -> CMat {
    let d = f_u.adjoint() * stats.g_mean[k].adjoint() * a_opt;
    hermitian_part(&(identity(f_u.ncols()) - d))
}

/// UatF SE of UE k for LSFD weights `a`.
pub fn uatf_se(stats: &DecodeStatistics, a: &CMat, f_u: &CMat, sigma2: f64, tau_p: usize, tau_c: usize, k: usize) -> Result<f64> {
    let pre = prelog(tau_p, tau_c);
    let d = a.adjoint() * &stats.g_mean[k] * f_u;
    if pre == 0.0 || frobenius(&d) == 0.0 {
        return Ok(0.0);
    }
    let sigma = hermitian_part(&(a.adjoint() * stats.q(k, sigma2) * a - &d * d.adjoint()));
    let inner = hermitian_part(&(identity(d.ncols()) + d.adjoint() * solve_hpd(&sigma, &d)?));
    Ok(pre * log2_det_hpd(&inner)?.max(0.0))
}

/// Maximal UatF SE of UE k, attained by the optimal LSFD weights.
pub fn optimal_se(stats: &DecodeStatistics, f_u: &CMat, sigma2: f64, tau_p: usize, tau_c: usize, k: usize) -> Result<f64> {
    let pre = prelog(tau_p, tau_c);
    let b = &stats.g_mean[k] * f_u;
    if pre == 0.0 || frobenius(&b) == 0.0 {
        return Ok(0.0);
    }
    let interference = hermitian_part(&(stats.q(k, sigma2) - &b * b.adjoint()));
    let inner = hermitian_part(&(identity(b.ncols()) + b.adjoint() * solve_hpd(&interference, &b)?));
    Ok(pre * log2_det_hpd(&inner)?.max(0.0))
}

/// Optimal LSFD weights, optimal MSE matrices and SEs of every UE.
#[derive(Debug, Clone)]
pub struct LsfdSolution {
    pub a: Vec<CMat>,
    pub e: Vec<CMat>,
    pub se: Vec<f64>,
}

pub fn solve_all(stats: &DecodeStatistics, f_u: &[CMat], sigma2: f64, tau_p: usize, tau_c: usize) -> Result<LsfdSolution> {
    let per_ue: Vec<Result<(CMat, CMat, f64)>> = (0..stats.k)
        .into_par_iter()
        .map(|k| {
            let a = optimal_lsfd(stats, &f_u[k], sigma2, k)?;
            let e = mse_opt(stats, &a, &f_u[k], k);
            let se = optimal_se(stats, &f_u[k], sigma2, tau_p, tau_c, k)?;
            Ok((a, e, se))
        })
        .collect();
    let mut out = LsfdSolution { a: Vec::new(), e: Vec::new(), se: Vec::new() };
    for item in per_ue {
        let (a, e, se) = item?;
        out.a.push(a);
        out.e.push(e);
        out.se.push(se);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{assign_pilots, pilot_statistics};
    use crate::harness::config::SystemConfig;
    use crate::numerics::{block_diag, trace};
    use crate::rng::{complex_normal_matrix, stream_rng, Stream};
    use crate::scenario::generate_network;

    struct Instance {
        net: Network,
        plan: PilotPlan,
        pre: PrecoderSet,
        est: EstimationStatistics,
        sigma2: f64,
    }

    fn instance(m: usize, k: usize, l: usize, n: usize, seed: u64) -> Instance {
        let cfg = SystemConfig { m, k, l, n, area_side: 300.0, ..Default::default() };
        let net = generate_network(&cfg, seed);
        let tau_p = n * k.div_ceil(2);
        let plan = assign_pilots(k, n, tau_p).unwrap();
        let pre = PrecoderSet::scaled_identity(&vec![0.2; k], n);
        let est = pilot_statistics(&net, &plan, &pre.pilot, cfg.sigma2).unwrap();
        Instance { net, plan, pre, est, sigma2: cfg.sigma2 }
    }

    fn setup(inst: &Instance, combiner: Combiner, n_r: usize, seed: u64) -> McSetup<'_> {
        McSetup {
            net: &inst.net,
            est: &inst.est,
            plan: &inst.plan,
            pre: &inst.pre,
            combiner,
            sigma2: inst.sigma2,
            n_r,
            seed,
        }
    }

    fn random_f(n: usize, p: f64, rng: &mut rand_chacha::ChaCha8Rng) -> CMat {
        let f = complex_normal_matrix(n, n, rng);
        let scale = (p / frobenius(&f).powi(2)).sqrt();
        f * c(scale, 0.0)
    }

    #[test]
    fn mr_is_identity_map() {
        let mut rng = stream_rng(1, Stream::Channel, &[]);
        let h = complex_normal_matrix(3, 2, &mut rng);
        assert_eq!(mr_combiner(&h), h);
        assert_eq!(mr_combiner(&CMat::zeros(3, 2)), CMat::zeros(3, 2));
    }

    #[test]
    fn cprime_identity_precoder_sums_diagonal_blocks() {
        let inst = instance(1, 1, 3, 2, 4);
        let r = inst.net.r(0, 0);
        let want = r.view((0, 0), (3, 3)) + r.view((3, 3), (3, 3));
        assert!(frobenius(&(cprime(r, &identity(2), 3) - want)) < 1e-15);
        assert_eq!(cprime(&CMat::zeros(6, 6), &identity(2), 3), CMat::zeros(3, 3));
    }

    #[test]
    fn cprime_matches_sampled_expectation() {
        let inst = instance(1, 1, 2, 2, 8);
        let cov = inst.est.c(0, 0).clone();
        let root = crate::numerics::hermitian_sqrt(&cov).unwrap();
        let mut rng = stream_rng(3, Stream::Channel, &[]);
        let f = random_f(2, 0.2, &mut rng);
        let f_bar = &f * f.adjoint();
        let want = cprime(&cov, &f_bar, 2);
        let draws = 100_000;
        let mut mean = CMat::zeros(2, 2);
        let mut sq = nalgebra::DMatrix::<f64>::zeros(2, 2);
        for _ in 0..draws {
            let z = complex_normal_matrix(4, 1, &mut rng);
            let e = &root * z;
            let ht = CMat::from_column_slice(2, 2, e.as_slice());
            let x = &ht * &f_bar * ht.adjoint();
            sq += x.map(|v| v.norm_sqr());
            mean += x;
        }
        mean /= c(draws as f64, 0.0);
        for i in 0..2 {
            for j in 0..2 {
                let se = ((sq[(i, j)] / draws as f64 - mean[(i, j)].norm_sqr()) / draws as f64).sqrt();
                assert!((mean[(i, j)] - want[(i, j)]).norm() <= 3.0 * se, "({i},{j})");
            }
        }
    }

    /// `tr E{‖x_k − Vᴴ y‖² | Ĥ}` at one AP.
    fn conditional_mse(v: &CMat, h_hat: &[CMat], cprime_sum: &CMat, f_u: &[CMat], sigma2: f64, k: usize) -> f64 {
        let l = v.nrows();
        let mut cov = cprime_sum + identity(l) * c(sigma2, 0.0);
        for (h, f) in h_hat.iter().zip(f_u) {
            cov += h * f * f.adjoint() * h.adjoint();
        }
        let cross = v.adjoint() * &h_hat[k] * &f_u[k];
        let n = f_u[k].ncols();
        let e = identity(n) - &cross - cross.adjoint() + v.adjoint() * cov * v;
        trace(&e).re
    }

    #[test]
    fn lmmse_is_locally_optimal() {
        let inst = instance(1, 3, 3, 2, 5);
        let mut rng = stream_rng(9, Stream::Channel, &[]);
        let real = sample_realization(&inst.net, &inst.est, &inst.plan, &inst.pre.pilot, 1, 0);
        let f_u: Vec<CMat> = (0..3).map(|_| random_f(2, 0.2, &mut rng)).collect();
        let cprimes: Vec<CMat> = (0..3).map(|l| cprime(inst.est.c(0, l), &(&f_u[l] * f_u[l].adjoint()), 3)).collect();
        let cp_sum = cprimes.iter().fold(CMat::zeros(3, 3), |a, b| a + b);
        for k in 0..3 {
            let v = lmmse_combiner(&real.h_hat, &cprimes, &f_u, inst.sigma2, k).unwrap();
            let best = conditional_mse(&v, &real.h_hat, &cp_sum, &f_u, inst.sigma2, k);
            let scale = frobenius(&v) / (v.len() as f64).sqrt();
            for _ in 0..100 {
                let dv = complex_normal_matrix(3, 2, &mut rng) * c(0.1 * scale, 0.0);
                let other = conditional_mse(&(&v + dv), &real.h_hat, &cp_sum, &f_u, inst.sigma2, k);
                assert!(other >= best * (1.0 - 1e-12), "{other} < {best}");
            }
        }
    }

    #[test]
    fn lmmse_noise_limit_is_scaled_mr() {
        let mut rng = stream_rng(2, Stream::Channel, &[]);
        let h = complex_normal_matrix(3, 2, &mut rng);
        let f = identity(2) * c(0.3, 0.0);
        let signal = frobenius(&h).powi(2) * 0.09;
        let sigma2 = 1e6 * signal;
        let v = lmmse_combiner(std::slice::from_ref(&h), &[CMat::zeros(3, 3)], std::slice::from_ref(&f), sigma2, 0).unwrap();
        let want = &h * &f / c(sigma2, 0.0);
        assert!(frobenius(&(v - &want)) <= 0.01 * frobenius(&want));
    }

    #[test]
    fn lmmse_scalar_reduction() {
        let h = CMat::from_element(1, 1, c(0.7, -0.4));
        let f = CMat::from_element(1, 1, c(0.5, 0.2));
        let (cp, sigma2) = (0.3, 0.1);
        let fb = f.norm_squared();
        let cprimes = [CMat::from_element(1, 1, c(cp * fb, 0.0))];
        let v = lmmse_combiner(std::slice::from_ref(&h), &cprimes, std::slice::from_ref(&f), sigma2, 0).unwrap();
        let want = h[(0, 0)] * f[(0, 0)] / (h[(0, 0)].norm_sqr() * fb + cp * fb + sigma2);
        assert!((v[(0, 0)] - want).norm() < 1e-12 * want.norm());
    }

    #[test]
    fn single_realization_average_is_that_realization() {
        let inst = instance(2, 2, 2, 2, 3);
        for combiner in [Combiner::Mr, Combiner::Lmmse] {
            let s = setup(&inst, combiner, 1, 17);
            let stats = mc_decode_stats(&s).unwrap();
            let real = sample_realization(&inst.net, &inst.est, &inst.plan, &inst.pre.pilot, 17, 0);
            let eff = effective_channels(&s, &CombinerContext::new(&s), &real).unwrap();
            for k in 0..2 {
                assert!(frobenius(&(&stats.g_mean[k] - &eff.g[k * 2 + k])) <= 1e-15 * frobenius(&stats.g_mean[k]));
                for l in 0..2 {
                    let y = &eff.g[k * 2 + l] * &inst.pre.data[l];
                    let want = &y * y.adjoint();
                    assert!(frobenius(&(stats.gram(k, l) - &want)) <= 1e-12 * frobenius(&want));
                }
                let blocks: Vec<CMat> = (0..2).map(|m| eff.v[m * 2 + k].adjoint() * &eff.v[m * 2 + k]).collect();
                let want = block_diag(&blocks);
                assert!(frobenius(&(&stats.s[k] - &want)) <= 1e-12 * frobenius(&want));
            }
        }
    }

    #[test]
    fn statistics_do_not_depend_on_thread_count() {
        let inst = instance(2, 3, 2, 2, 11);
        let s = setup(&inst, Combiner::Lmmse, 100, 5);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| mc_decode_stats(&s).unwrap())
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(a.g_gram, b.g_gram);
        assert_eq!(a.g_mean, b.g_mean);
        assert_eq!(a.s, b.s);
    }

    #[test]
    fn doubling_samples_halves_variance() {
        let inst = instance(1, 1, 2, 2, 6);
        let runs = 60;
        let var = |n_r: usize| {
            let vals: Vec<f64> = (0..runs)
                .map(|seed| {
                    let s = setup(&inst, Combiner::Mr, n_r, 1000 + seed as u64);
                    mc_decode_stats(&s).unwrap().g_mean[0][(0, 0)].re
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / runs as f64;
            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (runs - 1) as f64
        };
        let ratio = var(32) / var(64);
        // Ratio of two sample variances with 59 degrees of freedom each.
        assert!((1.2..3.4).contains(&ratio), "{ratio}");
    }

    fn mc_stats(inst: &Instance, combiner: Combiner, n_r: usize) -> DecodeStatistics {
        mc_decode_stats(&setup(inst, combiner, n_r, 23)).unwrap()
    }

    #[test]
    fn lsfd_optimality_and_mse_minimality() {
        let inst = instance(3, 4, 2, 2, 14);
        let mut rng = stream_rng(4, Stream::Channel, &[]);
        for combiner in [Combiner::Mr, Combiner::Lmmse] {
            let stats = mc_stats(&inst, combiner, 200);
            for k in 0..4 {
                let f = &inst.pre.data[k];
                let a = optimal_lsfd(&stats, f, inst.sigma2, k).unwrap();
                let se = uatf_se(&stats, &a, f, inst.sigma2, 4, 200, k).unwrap();
                let mse = trace(&mse_matrix(&stats, &a, f, inst.sigma2, k)).re;
                let scale = frobenius(&a) / (a.len() as f64).sqrt();
                for _ in 0..100 {
                    let da = complex_normal_matrix(a.nrows(), a.ncols(), &mut rng) * c(0.1 * scale, 0.0);
                    let other = &a + da;
                    assert!(uatf_se(&stats, &other, f, inst.sigma2, 4, 200, k).unwrap() <= se * (1.0 + 1e-9));
                    assert!(trace(&mse_matrix(&stats, &other, f, inst.sigma2, k)).re >= mse * (1.0 - 1e-12));
                }
            }
        }
    }

    #[test]
    fn closed_expressions_agree_at_optimum() {
        let inst = instance(3, 4, 2, 2, 15);
        let mut rng = stream_rng(5, Stream::Channel, &[]);
        let f_u: Vec<CMat> = (0..4).map(|_| random_f(2, 0.2, &mut rng)).collect();
        let pre = inst.pre.with_data(f_u.clone());
        let mut s = setup(&inst, Combiner::Lmmse, 150, 2);
        s.pre = &pre;
        let stats = mc_decode_stats(&s).unwrap();
        for k in 0..4 {
            let a = optimal_lsfd(&stats, &f_u[k], inst.sigma2, k).unwrap();
            let general = mse_matrix(&stats, &a, &f_u[k], inst.sigma2, k);
            let opt = mse_opt(&stats, &a, &f_u[k], k);
            assert!(frobenius(&(&general - &opt)) <= 1e-9 * frobenius(&opt));
            let se6 = uatf_se(&stats, &a, &f_u[k], inst.sigma2, 4, 200, k).unwrap();
            let se8 = optimal_se(&stats, &f_u[k], inst.sigma2, 4, 200, k).unwrap();
            assert!((se6 - se8).abs() <= 1e-9 * se8, "{se6} vs {se8}");
            let via_mse = -prelog(4, 200) * log2_det_hpd(&opt).unwrap();
            assert!((via_mse - se8).abs() <= 1e-9 * se8, "{via_mse} vs {se8}");
        }
    }

    #[test]
    fn trivial_cases() {
        let inst = instance(2, 2, 2, 2, 16);
        let stats = mc_stats(&inst, Combiner::Mr, 20);
        let f = &inst.pre.data[0];
        assert_eq!(mse_matrix(&stats, &CMat::zeros(4, 2), f, inst.sigma2, 0), identity(2));
        let zero = CMat::zeros(2, 2);
        let a = optimal_lsfd(&stats, &zero, inst.sigma2, 0).unwrap();
        assert_eq!(uatf_se(&stats, &a, &zero, inst.sigma2, 2, 200, 0).unwrap(), 0.0);
        let a = optimal_lsfd(&stats, f, inst.sigma2, 0).unwrap();
        assert_eq!(uatf_se(&stats, &a, f, inst.sigma2, 200, 200, 0).unwrap(), 0.0);
    }

    #[test]
    fn scalar_lsfd_reduction() {
        let stats = DecodeStatistics {
            m: 1,
            k: 1,
            n: 1,
            g_mean: vec![CMat::from_element(1, 1, c(2.0, 1.0))],
            g_gram: vec![CMat::from_element(1, 1, c(9.0, 0.0))],
            s: vec![CMat::from_element(1, 1, c(3.0, 0.0))],
            source: StatSource::ClosedForm,
        };
        let f = CMat::from_element(1, 1, c(0.5, 0.0));
        let a = optimal_lsfd(&stats, &f, 0.5, 0).unwrap();
        assert!((a[(0, 0)] - c(2.0, 1.0) * 0.5 / 10.5).norm() < 1e-12);
    }

    #[test]
    fn se_is_invariant_to_ap_order() {
        let inst = instance(3, 2, 2, 2, 18);
        let stats = mc_stats(&inst, Combiner::Mr, 50);
        let perm = [2usize, 0, 1];
        let n = 2;
        let permute_rows = |x: &CMat| {
            let mut out = x.clone();
            for (dst, &src) in perm.iter().enumerate() {
                out.view_mut((dst * n, 0), (n, x.ncols())).copy_from(&x.view((src * n, 0), (n, x.ncols())));
            }
            out
        };
        let permute_sym = |x: &CMat| {
            let rows = permute_rows(x);
            permute_rows(&rows.adjoint()).adjoint()
        };
        let permuted = DecodeStatistics {
            g_mean: stats.g_mean.iter().map(permute_rows).collect(),
            g_gram: stats.g_gram.iter().map(permute_sym).collect(),
            s: stats.s.iter().map(permute_sym).collect(),
            ..stats.clone()
        };
        for k in 0..2 {
            let f = &inst.pre.data[k];
            let a = optimal_se(&stats, f, inst.sigma2, 2, 200, k).unwrap();
            let b = optimal_se(&permuted, f, inst.sigma2, 2, 200, k).unwrap();
            assert!((a - b).abs() <= 1e-10 * a);
        }
    }

    #[test]
    fn all_se_nonnegative_and_gram_hermitian() {
        let inst = instance(2, 3, 2, 2, 19);
        let stats = mc_stats(&inst, Combiner::Lmmse, 40);
        for g in &stats.g_gram {
            assert!(crate::numerics::asymmetry(g) < 1e-12);
        }
        let sol = solve_all(&stats, &inst.pre.data, inst.sigma2, 4, 200).unwrap();
        assert!(sol.se.iter().all(|&s| s >= 0.0 && s.is_finite()));
    }
}
