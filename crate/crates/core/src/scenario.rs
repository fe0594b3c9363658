//! Network drops, large-scale fading and per-pair Weichselberger statistics.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::harness::config::SystemConfig;
use crate::numerics::{hermitian_eig, hermitian_part, kron, CMat};
use crate::rng::{complex_normal, complex_normal_matrix, stream_rng, Stream};

/// Fixed vertical AP/UE separation in metres.
pub const HEIGHT_OFFSET: f64 = 10.0;
pub const PATHLOSS_INTERCEPT_DB: f64 = -30.5;
pub const PATHLOSS_SLOPE_DB: f64 = 36.7;
pub const SHADOW_STD_DB: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDrop {
    pub area_side: f64,
    pub ap_positions: Vec<[f64; 2]>,
    pub ue_positions: Vec<[f64; 2]>,
}

/// Uniform AP and UE positions over the square `[0, area_side)²`.
pub fn drop_network(config: &SystemConfig, seed: u64) -> NetworkDrop {
    let mut rng = stream_rng(seed, Stream::Geometry, &[]);
    let side = config.area_side;
    let point = |rng: &mut rand_chacha::ChaCha8Rng| [rng.random::<f64>() * side, rng.random::<f64>() * side];
    let ap_positions = (0..config.m).map(|_| point(&mut rng)).collect();
    let ue_positions = (0..config.k).map(|_| point(&mut rng)).collect();
    NetworkDrop { area_side: side, ap_positions, ue_positions }
}

/// Wrap-around distance between AP `m` and UE `k`: the nearest of the nine
/// shifted copies of the UE, with the height offset added in quadrature.
pub fn pairwise_distance(drop: &NetworkDrop, m: usize, k: usize) -> f64 {
    let [ax, ay] = drop.ap_positions[m];
    let [ux, uy] = drop.ue_positions[k];
    let s = drop.area_side;
    let mut best = f64::INFINITY;
    for dx in [-s, 0.0, s] {
        for dy in [-s, 0.0, s] {
            let h = (ux + dx - ax).hypot(uy + dy - ay);
            best = best.min(h);
        }
    }
    best.hypot(HEIGHT_OFFSET)
}

/// Linear large-scale fading gain for a distance in metres and one
/// standard-normal shadowing draw.
pub fn large_scale_fading(distance: f64, shadow: f64) -> f64 {
    let db = PATHLOSS_INTERCEPT_DB - PATHLOSS_SLOPE_DB * distance.log10() + SHADOW_STD_DB * shadow;
    10f64.powf(db / 10.0)
}

/// Weichselberger statistics of one AP–UE pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairCorrelation {
    /// Receive eigenbasis (L×L, unitary).
    pub u_r: CMat,
    /// Transmit eigenbasis (N×N, unitary).
    pub u_t: CMat,
    /// Eigenmode coupling matrix (L×N, nonnegative powers).
    pub omega: DMatrix<f64>,
    /// Full correlation of `vec(H)` (LN×LN).
    pub r_full: CMat,
    pub beta: f64,
}

impl PairCorrelation {
    pub fn new(u_r: CMat, u_t: CMat, omega: DMatrix<f64>) -> Self {
        let r_full = full_correlation(&u_r, &u_t, &omega);
        let beta = omega.sum() / (omega.nrows() * omega.ncols()) as f64;
        PairCorrelation { u_r, u_t, omega, r_full, beta }
    }

    pub fn l(&self) -> usize {
        self.u_r.nrows()
    }

    pub fn n(&self) -> usize {
        self.u_t.nrows()
    }

    /// Uncorrelated Rayleigh fading with gain `beta`.
    pub fn iid(l: usize, n: usize, beta: f64) -> Self {
        Self::new(CMat::identity(l, l), CMat::identity(n, n), DMatrix::from_element(l, n, beta))
    }
}

/// `R = (U_t* ⊗ U_r) · diag(vec Ω) · (U_t* ⊗ U_r)ᴴ`.
pub fn full_correlation(u_r: &CMat, u_t: &CMat, omega: &DMatrix<f64>) -> CMat {
    let basis = kron(&u_t.map(|z| z.conj()), u_r);
    let mut scaled = basis.clone();
    // vec(Ω) is column-stacked, matching the column order of the Kronecker basis.
    for (j, &w) in omega.as_slice().iter().enumerate() {
        scaled.column_mut(j).scale_mut(w);
    }
    hermitian_part(&(scaled * basis.adjoint()))
}

/// Eigenvectors of a random complex Hermitian Gaussian matrix.
pub fn random_unitary<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> CMat {
    let x = complex_normal_matrix(dim, dim, rng);
    let h = hermitian_part(&x);
    hermitian_eig(&h).map(|(_, v)| v).unwrap_or_else(|_| CMat::identity(dim, dim))
}

/// Random coupling with one strong transmit eigendirection: unit-mean
/// exponential entries, one uniformly chosen column multiplied by
/// `dominance`, then rescaled so `‖Ω‖₁ = L·N·β`.
pub fn synthesize_coupling<R: Rng + ?Sized>(l: usize, n: usize, beta: f64, dominance: f64, rng: &mut R) -> PairCorrelation {
    let u_r = random_unitary(l, rng);
    let u_t = random_unitary(n, rng);
    let mut omega = DMatrix::from_fn(l, n, |_, _| complex_normal(rng).norm_sqr());
    let strong = rng.random_range(0..n);
    omega.column_mut(strong).scale_mut(dominance);
    let total = omega.sum();
    if total > 0.0 {
        omega *= (l * n) as f64 * beta / total;
    }
    PairCorrelation::new(u_r, u_t, omega)
}

/// A drop together with the statistics of every AP–UE pair.
#[derive(Debug, Clone)]
pub struct Network {
    pub m: usize,
    pub k: usize,
    pub l: usize,
    pub n: usize,
    pub drop: NetworkDrop,
    /// Pair statistics indexed `m * k_total + k`.
    pub pairs: Vec<PairCorrelation>,
}

impl Network {
    pub fn from_pairs(drop: NetworkDrop, l: usize, n: usize, pairs: Vec<PairCorrelation>) -> Self {
        let m = drop.ap_positions.len();
        let k = drop.ue_positions.len();
        assert_eq!(pairs.len(), m * k, "one statistics entry per AP–UE pair");
        Network { m, k, l, n, drop, pairs }
    }

    #[inline]
    pub fn pair(&self, m: usize, k: usize) -> &PairCorrelation {
        &self.pairs[m * self.k + k]
    }

    #[inline]
    pub fn r(&self, m: usize, k: usize) -> &CMat {
        &self.pair(m, k).r_full
    }
}

/// Full drop: geometry, shadowing and coupling, each from its own stream.
pub fn generate_network(config: &SystemConfig, seed: u64) -> Network {
    let drop = drop_network(config, seed);
    let (l, n) = (config.l, config.n);
    let dominance = config.dominance();
    let pairs: Vec<PairCorrelation> = (0..config.m * config.k)
        .into_par_iter()
        .map(|idx| {
            let (m, k) = (idx / config.k, idx % config.k);
            let mut shadow_rng = stream_rng(seed, Stream::Shadowing, &[m as u64, k as u64]);
            let shadow: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut shadow_rng);
            let beta = large_scale_fading(pairwise_distance(&drop, m, k), shadow);
            let mut rng = stream_rng(seed, Stream::Coupling, &[m as u64, k as u64]);
            synthesize_coupling(l, n, beta, dominance, &mut rng)
        })
        .collect();
    Network::from_pairs(drop, l, n, pairs)
}

/// `Σ_n R^{nn} = U_r · diag(row sums of Ω) · U_rᴴ`, the receive-side
/// correlation `E{H Hᴴ}`.
pub fn receive_correlation(pc: &PairCorrelation) -> CMat {
    let l = pc.l();
    let mut acc = CMat::zeros(l, l);
    for blk in 0..pc.n() {
        acc += pc.r_full.view((blk * l, blk * l), (l, l));
    }
    acc
}
