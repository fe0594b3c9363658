//! Closed-form decode statistics and effective-channel second moments for MR
//! combining.
//!
//! Everything here follows from one fact: for UEs `a`, `b` sharing a pilot,
//! `ĥ_ma` and `h_mb` are jointly Gaussian with cross-covariance
//! `Ξ(m, a, b) = E{h_mb ĥ_maᴴ} = τ_p R_mb F̃_bᴴ Ψ_ma⁻¹ F̃_a R_ma`, and fourth
//! moments of jointly Gaussian vectors factor into products of second moments.

use rayon::prelude::*;

use crate::channel::{tilde, EstimationStatistics, PilotPlan, PrecoderSet};
use crate::error::{Error, Result};
use crate::numerics::{
    block_diag, block_product_trace, c, hermitian_part, hermitian_sqrt, transposed_block_traces, vstack, CMat, C64,
};
use crate::receive::{cprime, mse_opt, optimal_lsfd, uatf_se, DecodeStatistics, StatSource};
use crate::scenario::Network;

/// How same-AP fourth moments of co-pilot UEs are evaluated.
///
/// `Exact` uses the Gaussian factorization. The two square-root forms write
/// the contamination term through `P_(2)^{1/2}` and `R^{1/2}`; they are kept
/// so they can be compared against Monte-Carlo, and are exact only when
/// `S F̃ R^{1/2}` happens to be Hermitian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FourthMomentForm {
    #[default]
    Exact,
    /// Trace-product term with the `q1`/`q2` pairing `tr(P̃^{q1 n} R̃^{i′ q2})`.
    SquareRoot,
    /// Trace-product term with both factors closed over their own index.
    PairedSquareRoot,
}

/// `[Z]_{nn′} = tr(R̂^{n′n})`, i.e. `E{Ĥᴴ Ĥ}` for an estimate with covariance `r_hat`.
pub fn z_matrix(r_hat: &CMat, l: usize) -> CMat {
    transposed_block_traces(r_hat, l)
}

/// Per-(m, k, l) matrices used by the square-root forms: `xi = E{h_ml ĥ_mkᴴ}`,
/// `S_mk`, the split `R̂_mk = P_(1) + τ_p² P_(2)` and the two square roots.
#[derive(Debug, Clone)]
pub struct ClosedFormContext {
    pub xi: CMat,
    pub s_proj: CMat,
    pub p1: CMat,
    pub p2: CMat,
    pub r_sqrt: CMat,
    pub p2_sqrt: CMat,
}

/// Closed-form statistics of one network under fixed pilot precoders.
pub struct ClosedForm<'a> {
    net: &'a Network,
    est: &'a EstimationStatistics,
    plan: &'a PilotPlan,
    tildes: Vec<CMat>,
    /// `Λ(m, a, b) = E{Ĥ_maᴴ H_mb}` indexed `(m * K + a) * K + b`; zero when
    /// `a` and `b` use different pilots.
    lam: Vec<CMat>,
}

impl<'a> ClosedForm<'a> {
    pub fn new(net: &'a Network, est: &'a EstimationStatistics, plan: &'a PilotPlan, f_p: &[CMat]) -> Self {
        let (kk, l, n) = (net.k, net.l, net.n);
        let tildes: Vec<CMat> = f_p.iter().map(|f| tilde(f, l)).collect();
        let mut cf = ClosedForm { net, est, plan, tildes, lam: Vec::new() };
        cf.lam = (0..net.m * kk * kk)
            .into_par_iter()
            .map(|idx| {
                let (m, a, b) = (idx / (kk * kk), (idx / kk) % kk, idx % kk);
                if plan.shares_pilot(a, b) {
                    transposed_block_traces(&cf.xi(m, a, b), l)
                } else {
                    CMat::zeros(n, n)
                }
            })
            .collect();
        cf
    }

    pub fn network(&self) -> &Network {
        self.net
    }

    /// `Ξ(m, a, b) = E{h_mb ĥ_maᴴ} = τ_p R_mb F̃_bᴴ S_maᴴ`; zero for UEs on
    /// different pilots.
    pub fn xi(&self, m: usize, a: usize, b: usize) -> CMat {
        let dim = self.net.l * self.net.n;
        if !self.plan.shares_pilot(a, b) {
            return CMat::zeros(dim, dim);
        }
        self.net.r(m, b) * self.tildes[b].adjoint() * self.est.estimator(m, a).adjoint() * c(self.plan.tau_p as f64, 0.0)
    }

    /// `E{Ĥ_maᴴ H_mb}`, entry `(n, n′)` equal to `tr(Ξ(m, a, b)^{n′n})`.
    pub fn lambda(&self, m: usize, a: usize, b: usize) -> &CMat {
        let kk = self.net.k;
        &self.lam[(m * kk + a) * kk + b]
    }

    /// `E{G_kl}` stacked over APs (MN×N).
    pub fn pair_mean(&self, k: usize, l: usize) -> CMat {
        let blocks: Vec<CMat> = (0..self.net.m).map(|m| self.lambda(m, k, l).clone()).collect();
        vstack(&blocks)
    }

    pub fn z(&self, m: usize, k: usize) -> CMat {
        z_matrix(self.est.r_hat(m, k), self.net.l)
    }

    pub fn context(&self, m: usize, k: usize, l: usize) -> Result<ClosedFormContext> {
        if !self.plan.shares_pilot(k, l) {
            return Err(Error::Pilot(format!("UEs {k} and {l} use different pilots")));
        }
        let tau_p = c(self.plan.tau_p as f64, 0.0);
        let s = self.est.estimator(m, k);
        let r = self.net.r(m, l);
        let q = &self.tildes[l] * r * self.tildes[l].adjoint();
        let p1 = hermitian_part(&(s * (self.est.psi(m, k) - &q * tau_p) * s.adjoint() * tau_p));
        let p2 = hermitian_part(&(s * &q * s.adjoint()));
        Ok(ClosedFormContext {
            xi: self.xi(m, k, l),
            s_proj: s.clone(),
            r_sqrt: hermitian_sqrt(r)?,
            p2_sqrt: hermitian_sqrt(&p2)?,
            p1,
            p2,
        })
    }

    /// `Γ⁽¹⁾_mkl`, entry `(n, n′)` equal to `Σ_{i,i′} F̄_{i′i} tr(R_ml^{i′i} R̂_mk^{n′n})`.
    pub fn gamma1(&self, m: usize, k: usize, l: usize, f_bar: &CMat) -> CMat {
        let rp = cprime(self.net.r(m, l), f_bar, self.net.l);
        traces_against(&rp, self.est.r_hat(m, k), self.net.l)
    }

    /// Same-AP block `E{Ĥ_mkᴴ H_ml F̄ H_mlᴴ Ĥ_mk}` for co-pilot UEs.
    pub fn gamma2(&self, m: usize, k: usize, l: usize, f_bar: &CMat, form: FourthMomentForm) -> Result<CMat> {
        if !self.plan.shares_pilot(k, l) {
            return Err(Error::Pilot(format!("UEs {k} and {l} use different pilots")));
        }
        if form == FourthMomentForm::Exact {
            let lam = self.lambda(m, k, l);
            return Ok(self.gamma1(m, k, l, f_bar) + lam * f_bar * lam.adjoint());
        }
        let (ll, n) = (self.net.l, self.net.n);
        let ctx = self.context(m, k, l)?;
        let r = self.net.r(m, l);
        let tau2 = (self.plan.tau_p as f64).powi(2);
        let t = |a: usize, b: usize, cc: usize, d: usize| block_product_trace(&ctx.p2_sqrt, (a, b), &ctx.r_sqrt, (cc, d), ll);
        let mut out = CMat::zeros(n, n);
        for nn in 0..n {
            for np in 0..n {
                let mut acc = C64::new(0.0, 0.0);
                for i in 0..n {
                    for ip in 0..n {
                        let w = f_bar[(ip, i)];
                        let mut v = block_product_trace(r, (ip, i), &ctx.p1, (np, nn), ll)
                            + block_product_trace(&ctx.p2, (np, nn), r, (ip, i), ll) * tau2;
                        for q1 in 0..n {
                            for q2 in 0..n {
                                let x = if form == FourthMomentForm::SquareRoot { q2 } else { q1 };
                                v += t(q1, nn, ip, x) * t(np, q2, q2, i) * tau2;
                            }
                        }
                        acc += w * v;
                    }
                }
                out[(nn, np)] = acc;
            }
        }
        Ok(out)
    }

    /// `E{G_kl F̄ G_klᴴ}` assembled from `T_(1)` and, for co-pilot UEs, `T_(2)`.
    pub fn gram(&self, k: usize, l: usize, f_bar: &CMat, form: FourthMomentForm) -> Result<CMat> {
        let mm = self.net.m;
        let g1: Vec<CMat> = (0..mm).map(|m| self.gamma1(m, k, l, f_bar)).collect();
        let (t1, t2) = if self.plan.shares_pilot(k, l) {
            let g2 = (0..mm).map(|m| self.gamma2(m, k, l, f_bar, form)).collect::<Result<Vec<_>>>()?;
            let lams: Vec<CMat> = (0..mm).map(|m| self.lambda(m, k, l).clone()).collect();
            t_matrices(&g1, Some((&g2, &lams)), f_bar)
        } else {
            t_matrices(&g1, None, f_bar)
        };
        Ok(match t2 {
            Some(t2) => hermitian_part(&(t1 + t2)),
            None => t1,
        })
    }

    /// Decode statistics of MR combining for the data precoders in `pre`.
    pub fn decode_stats(&self, pre: &PrecoderSet, form: FourthMomentForm) -> Result<DecodeStatistics> {
        let (mm, kk, n, l) = (self.net.m, self.net.k, self.net.n, self.net.l);
        let f_bar: Vec<CMat> = (0..kk).map(|k| pre.f_bar(k)).collect();
        // R′_ml = Σ F̄_{i′i} R_ml^{i′i} is shared by every k.
        let rprime: Vec<CMat> = (0..mm * kk)
            .into_par_iter()
            .map(|idx| cprime(self.net.r(idx / kk, idx % kk), &f_bar[idx % kk], l))
            .collect();
        let per_k: Vec<Result<(CMat, Vec<CMat>, CMat)>> = (0..kk)
            .into_par_iter()
            .map(|k| {
                let z: Vec<CMat> = (0..mm).map(|m| self.z(m, k)).collect();
                let mut grams = Vec::with_capacity(kk);
                for ll in 0..kk {
                    let g1: Vec<CMat> =
                        (0..mm).map(|m| traces_against(&rprime[m * kk + ll], self.est.r_hat(m, k), l)).collect();
                    let gram = if !self.plan.shares_pilot(k, ll) {
                        block_diag(&g1)
                    } else if form == FourthMomentForm::Exact {
                        let lam = self.pair_mean(k, ll);
                        hermitian_part(&(block_diag(&g1) + &lam * &f_bar[ll] * lam.adjoint()))
                    } else {
                        self.gram(k, ll, &f_bar[ll], form)?
                    };
                    grams.push(gram);
                }
                Ok((vstack(&z), grams, block_diag(&z)))
            })
            .collect();
        let mut stats = DecodeStatistics {
            m: mm,
            k: kk,
            n,
            g_mean: Vec::with_capacity(kk),
            g_gram: Vec::with_capacity(kk * kk),
            s: Vec::with_capacity(kk),
            source: StatSource::ClosedForm,
        };
        for item in per_k {
            let (g_mean, grams, s) = item?;
            stats.g_mean.push(g_mean);
            stats.g_gram.extend(grams);
            stats.s.push(hermitian_part(&s));
        }
        Ok(stats)
    }

    /// Second moments `E{g_n g_iᴴ}` of the columns of `G_lk`, whose AP-m
    /// block is `Ĥ_mlᴴ H_mk`.
    pub fn second_moments(&self, l: usize, k: usize, form: FourthMomentForm) -> Result<GgTables> {
        let (mm, n, ll) = (self.net.m, self.net.n, self.net.l);
        let co = self.plan.shares_pilot(l, k);
        let tau2 = (self.plan.tau_p as f64).powi(2);
        let mut same = Vec::with_capacity(mm);
        for m in 0..mm {
            let r = self.net.r(m, k);
            let r_hat = self.est.r_hat(m, l);
            let ctx = match (co, form) {
                (true, FourthMomentForm::SquareRoot | FourthMomentForm::PairedSquareRoot) => Some(self.context(m, l, k)?),
                _ => None,
            };
            let (lam_lk, lam_kl) = (self.lambda(m, l, k), self.lambda(m, k, l));
            let mut table = CMat::zeros(n * n, n * n);
            for nn in 0..n {
                for i in 0..n {
                    for p in 0..n {
                        for pp in 0..n {
                            let v = match &ctx {
                                None => {
                                    let mut v = block_product_trace(r, (nn, i), r_hat, (pp, p), ll);
                                    if co {
                                        v += lam_lk[(p, nn)] * lam_kl[(i, pp)];
                                    }
                                    v
                                }
                                Some(ctx) => {
                                    let t = |a: usize, b: usize, cc: usize, d: usize| {
                                        block_product_trace(&ctx.p2_sqrt, (a, b), &ctx.r_sqrt, (cc, d), ll)
                                    };
                                    let mut v = block_product_trace(r, (nn, i), &ctx.p1, (pp, p), ll)
                                        + block_product_trace(&ctx.p2, (pp, p), r, (nn, i), ll) * tau2;
                                    for q1 in 0..n {
                                        for q2 in 0..n {
                                            let x = if form == FourthMomentForm::SquareRoot { nn } else { p };
                                            v += t(q1, x, nn, q1) * t(pp, q2, q2, i) * tau2;
                                        }
                                    }
                                    v
                                }
                            };
                            table[(nn * n + i, p * n + pp)] = v;
                        }
                    }
                }
            }
            same.push(table);
        }
        let cross_lk = (0..mm).map(|m| self.lambda(m, l, k).clone()).collect();
        let cross_kl = (0..mm).map(|m| self.lambda(m, k, l).clone()).collect();
        Ok(GgTables { m: mm, n, co_pilot: co, same, cross_lk, cross_kl })
    }

    /// `E{G_lkᴴ Ā G_lk}` for a Hermitian MN×MN weight `Ā`, via
    /// `Σ_m tr(R_mk^{in} R̂′_ml) + Ḡ_lkᴴ Ā Ḡ_lk` where `R̂′_ml` folds the AP-m
    /// diagonal block of `Ā` into `R̂_ml`.
    pub fn weighted_term(&self, l: usize, k: usize, a_bar: &CMat) -> CMat {
        let (mm, n, ll) = (self.net.m, self.net.n, self.net.l);
        let mut out = CMat::zeros(n, n);
        for m in 0..mm {
            let blk = a_bar.view((m * n, m * n), (n, n)).into_owned();
            let x = cprime(self.est.r_hat(m, l), &blk, ll);
            out += traces_against(&x, self.net.r(m, k), ll);
        }
        if self.plan.shares_pilot(l, k) {
            let g = self.pair_mean(l, k);
            out += g.adjoint() * a_bar * g;
        }
        hermitian_part(&out)
    }

    /// `Σ_l μ_l E{G_lkᴴ Ā_l G_lk}` for every UE k.
    pub fn weighted_cross_gram(&self, a_bar: &[CMat], mu: &[f64]) -> Vec<CMat> {
        let kk = self.net.k;
        let (mm, n, ll) = (self.net.m, self.net.n, self.net.l);
        // The folded R̂′_ml depends on (m, l) only.
        let folded: Vec<CMat> = (0..mm * kk)
            .into_par_iter()
            .map(|idx| {
                let (m, l) = (idx / kk, idx % kk);
                let blk = a_bar[l].view((m * n, m * n), (n, n)).into_owned();
                cprime(self.est.r_hat(m, l), &blk, ll)
            })
            .collect();
        (0..kk)
            .into_par_iter()
            .map(|k| {
                let mut acc = CMat::zeros(n, n);
                for l in 0..kk {
                    if mu[l] == 0.0 {
                        continue;
                    }
                    let mut term = CMat::zeros(n, n);
                    for m in 0..mm {
                        term += traces_against(&folded[m * kk + l], self.net.r(m, k), ll);
                    }
                    if self.plan.shares_pilot(l, k) {
                        let g = self.pair_mean(l, k);
                        term += g.adjoint() * &a_bar[l] * g;
                    }
                    acc += term * c(mu[l], 0.0);
                }
                hermitian_part(&acc)
            })
            .collect()
    }
}

/// N×N matrix whose `(a, b)` entry is `tr(X Y^{ba})`, for an L×L `x` against
/// the blocks of an LN×LN `y`.
fn traces_against(x: &CMat, y: &CMat, l: usize) -> CMat {
    let n = y.nrows() / l;
    CMat::from_fn(n, n, |a, b| block_product_trace(x, (0, 0), y, (b, a), l))
}

/// Assembles `T_(1) = diag(Γ⁽¹⁾_m)` and, given `(Γ⁽²⁾_m, Λ_m)` for co-pilot
/// UEs, `T_(2)` with diagonal blocks `Γ⁽²⁾_m − Γ⁽¹⁾_m` and off-diagonal blocks
/// `Λ_m F̄ Λ_m′ᴴ`.
pub fn t_matrices(gamma1: &[CMat], pilot_terms: Option<(&[CMat], &[CMat])>, f_bar: &CMat) -> (CMat, Option<CMat>) {
    let t1 = block_diag(gamma1);
    let Some((gamma2, lams)) = pilot_terms else {
        return (t1, None);
    };
    let mm = gamma1.len();
    let n = f_bar.nrows();
    let mut t2 = CMat::zeros(mm * n, mm * n);
    for m in 0..mm {
        for mp in 0..mm {
            let blk = if m == mp { &gamma2[m] - &gamma1[m] } else { &lams[m] * f_bar * lams[mp].adjoint() };
            t2.view_mut((m * n, mp * n), (n, n)).copy_from(&blk);
        }
    }
    (t1, Some(t2))
}

/// SE, optimal LSFD weights and optimal MSE matrix of one UE.
#[derive(Debug, Clone)]
pub struct ClosedLsfd {
    pub se: f64,
    pub a_opt: CMat,
    pub e_opt: CMat,
}

/// UatF SE at the optimal LSFD weights, from closed-form statistics.
pub fn closed_se_lsfd(stats: &DecodeStatistics, f_u: &CMat, sigma2: f64, tau_p: usize, tau_c: usize, k: usize) -> Result<ClosedLsfd> {
    let a_opt = optimal_lsfd(stats, f_u, sigma2, k)?;
    let e_opt = mse_opt(stats, &a_opt, f_u, k);
    let se = uatf_se(stats, &a_opt, f_u, sigma2, tau_p, tau_c, k)?;
    Ok(ClosedLsfd { se, a_opt, e_opt })
}

/// Source of `E{g_n g_iᴴ}` for the columns of one effective channel.
pub trait SecondMoments {
    /// Number of columns N.
    fn columns(&self) -> usize;
    fn gg(&self, n: usize, i: usize) -> CMat;
}

/// `E{Gᴴ Ā G}` assembled entrywise as `tr(Ā E{g_i g_nᴴ})`.
pub fn weighted_gram(moments: &impl SecondMoments, a_bar: &CMat) -> CMat {
    let n = moments.columns();
    let mut out = CMat::zeros(n, n);
    for nn in 0..n {
        for i in 0..n {
            out[(nn, i)] = (a_bar * moments.gg(i, nn)).trace();
        }
    }
    out
}

/// Closed-form `E{g_n g_iᴴ}` of one `G_lk`.
#[derive(Debug, Clone)]
pub struct GgTables {
    m: usize,
    n: usize,
    co_pilot: bool,
    /// Same-AP entries, row `n * N + i`, column `p * N + p′`.
    same: Vec<CMat>,
    /// `Λ(m, l, k)` and `Λ(m, k, l)` per AP.
    cross_lk: Vec<CMat>,
    cross_kl: Vec<CMat>,
}

impl GgTables {
    /// Entry `[(m, p), (m′, p′)]` of `E{g_n g_iᴴ}`.
    pub fn entry(&self, (m, p): (usize, usize), (mp, pp): (usize, usize), n: usize, i: usize) -> C64 {
        if m == mp {
            self.same[m][(n * self.n + i, p * self.n + pp)]
        } else if self.co_pilot {
            // tr(Ξ(m, l, k)^{np}) tr(Ξ(m′, k, l)^{p′i})
            self.cross_lk[m][(p, n)] * self.cross_kl[mp][(i, pp)]
        } else {
            C64::new(0.0, 0.0)
        }
    }
}

impl SecondMoments for GgTables {
    fn columns(&self) -> usize {
        self.n
    }

    fn gg(&self, n: usize, i: usize) -> CMat {
        let dim = self.m * self.n;
        CMat::from_fn(dim, dim, |o, j| self.entry((o / self.n, o % self.n), (j / self.n, j % self.n), n, i))
    }
}

/// Sample second moments of a finite ensemble of effective channels.
#[derive(Debug, Clone)]
pub struct EmpiricalMoments {
    pub samples: Vec<CMat>,
}

impl SecondMoments for EmpiricalMoments {
    fn columns(&self) -> usize {
        self.samples.first().map_or(0, |g| g.ncols())
    }

    fn gg(&self, n: usize, i: usize) -> CMat {
        let dim = self.samples.first().map_or(0, |g| g.nrows());
        let mut acc = CMat::zeros(dim, dim);
        for g in &self.samples {
            acc += g.column(n) * g.column(i).adjoint();
        }
        acc / c(self.samples.len() as f64, 0.0)
    }
}
