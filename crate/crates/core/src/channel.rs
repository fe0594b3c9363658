//! Pilot assignment, channel sampling, pilot-phase statistics and MMSE
//! channel estimation.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{c, hermitian_part, identity, kron, solve_hpd, CMat};
use crate::rng::{complex_normal, stream_rng, Stream};
use crate::scenario::{Network, PairCorrelation};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PilotPlan {
    pub tau_p: usize,
    pub n: usize,
    /// Pilot-matrix index of every UE.
    pub groups: Vec<usize>,
    /// `co_pilot[k]` lists every UE sharing UE k's pilot matrix, k included.
    pub co_pilot: Vec<Vec<usize>>,
}

impl PilotPlan {
    pub fn num_pilot_matrices(&self) -> usize {
        self.tau_p / self.n
    }

    #[inline]
    pub fn shares_pilot(&self, k: usize, l: usize) -> bool {
        self.groups[k] == self.groups[l]
    }

    /// One representative UE per occupied pilot matrix, with its members.
    pub fn occupied_groups(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); self.num_pilot_matrices()];
        for (k, &g) in self.groups.iter().enumerate() {
            out[g].push(k);
        }
        out.retain(|g| !g.is_empty());
        out
    }
}

/// Round-robin assignment: UE k uses pilot matrix `k mod (tau_p / n)`.
pub fn assign_pilots(k_total: usize, n: usize, tau_p: usize) -> Result<PilotPlan> {
    if n == 0 || tau_p == 0 || !tau_p.is_multiple_of(n) {
        return Err(Error::Pilot(format!("tau_p = {tau_p} is not a positive multiple of n = {n}")));
    }
    let matrices = tau_p / n;
    let groups: Vec<usize> = (0..k_total).map(|k| k % matrices).collect();
    let co_pilot = (0..k_total)
        .map(|k| (0..k_total).filter(|&l| groups[l] == groups[k]).collect())
        .collect();
    Ok(PilotPlan { tau_p, n, groups, co_pilot })
}

/// Pilot and data precoders of every UE with their power budgets.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecoderSet {
    pub pilot: Vec<CMat>,
    pub data: Vec<CMat>,
    pub budgets: Vec<f64>,
}

impl PrecoderSet {
    /// `F_p = F_u = √(p_k/N)·I_N` for every UE.
    pub fn scaled_identity(budgets: &[f64], n: usize) -> Self {
        let f: Vec<CMat> = budgets.iter().map(|&p| identity(n) * c((p / n as f64).sqrt(), 0.0)).collect();
        PrecoderSet { pilot: f.clone(), data: f, budgets: budgets.to_vec() }
    }

    pub fn with_data(&self, data: Vec<CMat>) -> Self {
        PrecoderSet { pilot: self.pilot.clone(), data, budgets: self.budgets.clone() }
    }

    /// `F̄_k = F_k F_kᴴ` of the data precoder.
    pub fn f_bar(&self, k: usize) -> CMat {
        &self.data[k] * self.data[k].adjoint()
    }
}

/// `F̃ = Fᵀ ⊗ I_L`, so that `F̃ vec(H) = vec(H F)`.
pub fn tilde(f: &CMat, l: usize) -> CMat {
    kron(&f.transpose(), &identity(l))
}

/// One draw of `H = U_r (Ω̃ ⊙ H_iid) U_tᴴ`.
pub fn sample_channel<R: rand::Rng + ?Sized>(pc: &PairCorrelation, rng: &mut R) -> CMat {
    let (l, n) = (pc.l(), pc.n());
    let inner = CMat::from_fn(l, n, |i, j| complex_normal(rng) * pc.omega[(i, j)].sqrt());
    &pc.u_r * inner * pc.u_t.adjoint()
}

/// Pilot-phase statistics of every AP–UE pair, indexed `m * K + k`.
#[derive(Debug, Clone)]
pub struct EstimationStatistics {
    pub m: usize,
    pub k: usize,
    pub l: usize,
    pub n: usize,
    pub tau_p: usize,
    pub sigma2: f64,
    pub psi: Vec<CMat>,
    pub r_hat: Vec<CMat>,
    pub c: Vec<CMat>,
    /// `S_mk = R_mk F̃_kᴴ Ψ_mk⁻¹`, so that `ĥ_mk = S_mk y_mk`.
    pub estimator: Vec<CMat>,
}

impl EstimationStatistics {
    #[inline]
    pub fn idx(&self, m: usize, k: usize) -> usize {
        m * self.k + k
    }

    pub fn r_hat(&self, m: usize, k: usize) -> &CMat {
        &self.r_hat[self.idx(m, k)]
    }

    pub fn c(&self, m: usize, k: usize) -> &CMat {
        &self.c[self.idx(m, k)]
    }

    pub fn psi(&self, m: usize, k: usize) -> &CMat {
        &self.psi[self.idx(m, k)]
    }

    pub fn estimator(&self, m: usize, k: usize) -> &CMat {
        &self.estimator[self.idx(m, k)]
    }
}

/// `Ψ_mk = Σ_{l∈P_k} τ_p F̃_l R_ml F̃_lᴴ + σ² I`, `R̂ = τ_p R F̃ᴴ Ψ⁻¹ F̃ R`
/// and `C = R − R̂` for every pair.
pub fn pilot_statistics(net: &Network, plan: &PilotPlan, f_p: &[CMat], sigma2: f64) -> Result<EstimationStatistics> {
    let (l, n) = (net.l, net.n);
    let tau_p = plan.tau_p as f64;
    let tildes: Vec<CMat> = f_p.iter().map(|f| tilde(f, l)).collect();
    let per_pair: Vec<Result<(CMat, CMat, CMat, CMat)>> = (0..net.m * net.k)
        .into_par_iter()
        .map(|idx| {
            let (m, k) = (idx / net.k, idx % net.k);
            let mut psi = identity(l * n) * c(sigma2, 0.0);
            for &j in &plan.co_pilot[k] {
                psi += &tildes[j] * net.r(m, j) * tildes[j].adjoint() * c(tau_p, 0.0);
            }
            let psi = hermitian_part(&psi);
            let r = net.r(m, k);
            // S = R F̃ᴴ Ψ⁻¹ = (Ψ⁻¹ F̃ R)ᴴ.
            let s = solve_hpd(&psi, &(&tildes[k] * r))
                .map_err(|e| Error::Indefinite(format!("Ψ of AP {m}, UE {k}: {e}")))?
                .adjoint();
            let r_hat = hermitian_part(&(&s * &tildes[k] * r * c(tau_p, 0.0)));
            let cov = r - &r_hat;
            Ok((psi, r_hat, cov, s))
        })
        .collect();
    let mut stats = EstimationStatistics {
        m: net.m,
        k: net.k,
        l,
        n,
        tau_p: plan.tau_p,
        sigma2,
        psi: Vec::with_capacity(per_pair.len()),
        r_hat: Vec::with_capacity(per_pair.len()),
        c: Vec::with_capacity(per_pair.len()),
        estimator: Vec::with_capacity(per_pair.len()),
    };
    for item in per_pair {
        let (psi, r_hat, cov, s) = item?;
        stats.psi.push(psi);
        stats.r_hat.push(r_hat);
        stats.c.push(cov);
        stats.estimator.push(s);
    }
    Ok(stats)
}

/// `y = Σ_{l∈P_k} τ_p vec(H_l F_l) + q` for the channels of one pilot group
/// at one AP, returned as an LN×1 column.
pub fn pilot_observation(group: &[(&CMat, &CMat)], tau_p: usize, noise: &CMat) -> CMat {
    let mut y = noise.clone();
    for (h, f) in group {
        let hf = *h * *f;
        for (dst, src) in y.iter_mut().zip(hf.iter()) {
            *dst += *src * tau_p as f64;
        }
    }
    y
}

/// `q ~ CN(0, τ_p σ² I)`: the pilot noise after despreading with a pilot
/// matrix satisfying `Φᴴ Φ = τ_p I`.
pub fn pilot_noise<R: rand::Rng + ?Sized>(dim: usize, tau_p: usize, sigma2: f64, rng: &mut R) -> CMat {
    let scale = (tau_p as f64 * sigma2).sqrt();
    CMat::from_fn(dim, 1, |_, _| complex_normal(rng) * scale)
}

/// True channel, MMSE estimate and estimation error of one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub h: CMat,
    pub h_hat: CMat,
    pub h_tilde: CMat,
}

/// `ĥ_mk = S_mk y` reshaped to L×N.
pub fn mmse_estimate(stats: &EstimationStatistics, m: usize, k: usize, y: &CMat) -> CMat {
    let v = stats.estimator(m, k) * y;
    CMat::from_column_slice(stats.l, stats.n, v.as_slice())
}

/// Estimates the channel of pair `(m, k)` from the true channels of its
/// pilot group (given in `plan.co_pilot[k]` order) and fresh pilot noise.
pub fn estimate_pair(
    stats: &EstimationStatistics,
    plan: &PilotPlan,
    f_p: &[CMat],
    m: usize,
    k: usize,
    h_group: &[CMat],
    noise_seed: u64,
) -> ChannelRealization {
    let mut rng = stream_rng(noise_seed, Stream::PilotNoise, &[m as u64, k as u64]);
    let noise = pilot_noise(stats.l * stats.n, plan.tau_p, stats.sigma2, &mut rng);
    let group: Vec<(&CMat, &CMat)> = plan.co_pilot[k].iter().zip(h_group).map(|(&j, h)| (h, &f_p[j])).collect();
    let y = pilot_observation(&group, plan.tau_p, &noise);
    let h_hat = mmse_estimate(stats, m, k, &y);
    let pos = plan.co_pilot[k].iter().position(|&j| j == k).expect("UE belongs to its own pilot group");
    let h = h_group[pos].clone();
    let h_tilde = &h - &h_hat;
    ChannelRealization { h, h_hat, h_tilde }
}

/// Every channel and channel estimate of one coherence block, indexed
/// `m * K + k`.
#[derive(Debug, Clone)]
pub struct Realization {
    pub h: Vec<CMat>,
    pub h_hat: Vec<CMat>,
}

/// Draws realization `r` of the Monte-Carlo stream `seed`: all channels from
/// per-(r, m, k) streams and pilot noise from per-(r, m, group) streams, so
/// the result is independent of evaluation order.
pub fn sample_realization(
    net: &Network,
    stats: &EstimationStatistics,
    plan: &PilotPlan,
    f_p: &[CMat],
    seed: u64,
    r: u64,
) -> Realization {
    let (mm, kk) = (net.m, net.k);
    let mut h = Vec::with_capacity(mm * kk);
    for m in 0..mm {
        for k in 0..kk {
            let mut rng = stream_rng(seed, Stream::Channel, &[r, m as u64, k as u64]);
            h.push(sample_channel(net.pair(m, k), &mut rng));
        }
    }
    let mut h_hat = vec![CMat::zeros(net.l, net.n); mm * kk];
    let groups = plan.occupied_groups();
    for m in 0..mm {
        for members in &groups {
            let g = plan.groups[members[0]];
            let mut rng = stream_rng(seed, Stream::PilotNoise, &[r, m as u64, g as u64]);
            let noise = pilot_noise(net.l * net.n, plan.tau_p, stats.sigma2, &mut rng);
            let group: Vec<(&CMat, &CMat)> = members.iter().map(|&j| (&h[m * kk + j], &f_p[j])).collect();
            let y = pilot_observation(&group, plan.tau_p, &noise);
            for &k in members {
                h_hat[m * kk + k] = mmse_estimate(stats, m, k, &y);
            }
        }
    }
    Realization { h, h_hat }
}
