#![allow(dead_code)]

use cfmimo::channel::{assign_pilots, pilot_statistics, sample_realization, EstimationStatistics, PilotPlan, PrecoderSet};
use cfmimo::harness::config::SystemConfig;
use cfmimo::numerics::{c, frobenius, vstack, CMat};
use cfmimo::rng::{complex_normal_matrix, stream_rng, Stream};
use cfmimo::scenario::{generate_network, Network};
use nalgebra::DMatrix;

pub struct Instance {
    pub cfg: SystemConfig,
    pub net: Network,
    pub plan: PilotPlan,
    pub pre: PrecoderSet,
    pub est: EstimationStatistics,
}

impl Instance {
    pub fn new(cfg: SystemConfig, seed: u64) -> Self {
        let net = generate_network(&cfg, seed);
        let plan = assign_pilots(cfg.k, cfg.n, cfg.tau_p()).unwrap();
        let pre = PrecoderSet::scaled_identity(&cfg.powers(), cfg.n);
        let est = pilot_statistics(&net, &plan, &pre.pilot, cfg.sigma2).unwrap();
        Instance { cfg, net, plan, pre, est }
    }

    /// Small instance on a 300 m square with random full-power data precoders.
    pub fn small(m: usize, k: usize, l: usize, n: usize, tau_p: usize, seed: u64) -> Self {
        let cfg = SystemConfig { m, k, l, n, tau_p: Some(tau_p), area_side: 300.0, ..Default::default() };
        let mut inst = Instance::new(cfg, seed);
        let mut rng = stream_rng(seed, Stream::Coupling, &[u64::MAX]);
        let data = (0..k)
            .map(|_| {
                let f = complex_normal_matrix(n, n, &mut rng);
                let s = (inst.cfg.p_k / frobenius(&f).powi(2)).sqrt();
                f * c(s, 0.0)
            })
            .collect();
        inst.pre = inst.pre.with_data(data);
        inst
    }

    /// MR effective channels `G_kl` (AP-m block `Ĥ_mkᴴ H_ml`) of realization
    /// `r`, indexed `k * K + l`.
    pub fn mr_channels(&self, seed: u64, r: u64) -> Vec<CMat> {
        let (mm, kk) = (self.net.m, self.net.k);
        let real = sample_realization(&self.net, &self.est, &self.plan, &self.pre.pilot, seed, r);
        let mut out = Vec::with_capacity(kk * kk);
        for k in 0..kk {
            for l in 0..kk {
                let blocks: Vec<CMat> = (0..mm).map(|m| real.h_hat[m * kk + k].adjoint() * &real.h[m * kk + l]).collect();
                out.push(vstack(&blocks));
            }
        }
        out
    }
}

/// Entrywise running mean and standard error of complex random matrices.
#[derive(Clone)]
pub struct SampleMean {
    count: usize,
    sum: CMat,
    sq: DMatrix<f64>,
}

impl SampleMean {
    pub fn new(rows: usize, cols: usize) -> Self {
        SampleMean { count: 0, sum: CMat::zeros(rows, cols), sq: DMatrix::zeros(rows, cols) }
    }

    pub fn add(&mut self, x: &CMat) {
        self.count += 1;
        self.sum += x;
        self.sq += x.map(|v| v.norm_sqr());
    }

    pub fn mean(&self) -> CMat {
        &self.sum / c(self.count as f64, 0.0)
    }

    pub fn std_err(&self) -> DMatrix<f64> {
        let n = self.count as f64;
        let mean = self.mean();
        DMatrix::from_fn(self.sum.nrows(), self.sum.ncols(), |i, j| {
            ((self.sq[(i, j)] / n - mean[(i, j)].norm_sqr()).max(0.0) / n).sqrt()
        })
    }

    /// Largest `|mean − expected| / std_err` over all entries. Entries with no
    /// sampling spread must match to rounding.
    pub fn max_z(&self, expected: &CMat) -> f64 {
        let mean = self.mean();
        let se = self.std_err();
        let scale = frobenius(expected).max(frobenius(&mean));
        let mut worst: f64 = 0.0;
        for i in 0..mean.nrows() {
            for j in 0..mean.ncols() {
                let d = (mean[(i, j)] - expected[(i, j)]).norm();
                let z = if se[(i, j)] > 1e-14 * scale {
                    d / se[(i, j)]
                } else if d <= 1e-12 * scale {
                    0.0
                } else {
                    f64::INFINITY
                };
                worst = worst.max(z);
            }
        }
        worst
    }
}

/// Largest z-score of every `E{g_n g_iᴴ}` entry and of `E{Gᴴ Ā G}` (random
/// fixed Ā) against Monte-Carlo, over every ordered UE pair of `inst`, with
/// same-AP co-pilot moments evaluated in `form`.
pub fn second_moment_oracle(inst: &Instance, seed: u64, n_r: usize, form: cfmimo::closedform::FourthMomentForm) -> (f64, f64) {
    use cfmimo::closedform::{weighted_gram, ClosedForm, SecondMoments};
    let (mm, kk, n) = (inst.net.m, inst.net.k, inst.net.n);
    let dim = mm * n;
    let mut rng = stream_rng(seed, Stream::Coupling, &[u64::MAX - 1]);
    let x = complex_normal_matrix(dim, dim, &mut rng);
    let a_bar = &x * x.adjoint();
    let mut gg = vec![SampleMean::new(dim, dim); kk * kk * n * n];
    let mut wg = vec![SampleMean::new(n, n); kk * kk];
    // Rescale so the accumulated moments are O(1).
    let scale = {
        let g = inst.mr_channels(seed, 0);
        let s: f64 = g.iter().map(frobenius).fold(0.0, f64::max);
        c(1.0 / s.max(1e-300), 0.0)
    };
    for r in 0..n_r as u64 {
        let chans = inst.mr_channels(seed, r);
        for p in 0..kk * kk {
            let g = &chans[p] * scale;
            for a in 0..n {
                for b in 0..n {
                    gg[(p * n + a) * n + b].add(&(g.column(a) * g.column(b).adjoint()));
                }
            }
            wg[p].add(&(g.adjoint() * &a_bar * &g));
        }
    }
    let cf = ClosedForm::new(&inst.net, &inst.est, &inst.plan, &inst.pre.pilot);
    let s2 = scale * scale;
    let (mut worst_gg, mut worst_wg): (f64, f64) = (0.0, 0.0);
    for a in 0..kk {
        for b in 0..kk {
            let p = a * kk + b;
            let tables = cf.second_moments(a, b, form).unwrap();
            for nn in 0..n {
                for i in 0..n {
                    worst_gg = worst_gg.max(gg[(p * n + nn) * n + i].max_z(&(tables.gg(nn, i) * s2)));
                }
            }
            worst_wg = worst_wg.max(wg[p].max_z(&(weighted_gram(&tables, &a_bar) * s2)));
        }
    }
    (worst_gg, worst_wg)
}
