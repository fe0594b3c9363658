//! JSON snapshot of a drop and its pilot statistics. Complex numbers are
//! written as `[re, im]` pairs and matrices as arrays of rows.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::channel::{assign_pilots, pilot_statistics, EstimationStatistics, PrecoderSet};
use crate::error::{Error, Result};
use crate::harness::config::SystemConfig;
use crate::numerics::{c, CMat};
use crate::scenario::{generate_network, Network, NetworkDrop, PairCorrelation};

fn complex_rows(x: &CMat) -> Vec<Vec<[f64; 2]>> {
    (0..x.nrows()).map(|i| (0..x.ncols()).map(|j| [x[(i, j)].re, x[(i, j)].im]).collect()).collect()
}

fn from_complex_rows(rows: &[Vec<[f64; 2]>]) -> Result<CMat> {
    let cols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Dimension("ragged matrix in snapshot".into()));
    }
    Ok(CMat::from_fn(rows.len(), cols, |i, j| c(rows[i][j][0], rows[i][j][1])))
}

fn real_rows(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.nrows()).map(|i| (0..x.ncols()).map(|j| x[(i, j)]).collect()).collect()
}

fn from_real_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let cols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Dimension("ragged matrix in snapshot".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairSnapshot {
    pub m: usize,
    pub k: usize,
    pub beta: f64,
    pub u_r: Vec<Vec<[f64; 2]>>,
    pub u_t: Vec<Vec<[f64; 2]>>,
    pub omega: Vec<Vec<f64>>,
    pub r_full: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimationSnapshot {
    pub tau_p: usize,
    pub sigma2: f64,
    pub pilot_groups: Vec<usize>,
    /// Indexed `m * K + k` like the pair list.
    pub r_hat: Vec<Vec<Vec<[f64; 2]>>>,
    pub c: Vec<Vec<Vec<[f64; 2]>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub seed: u64,
    pub config: SystemConfig,
    pub drop: NetworkDrop,
    pub pairs: Vec<PairSnapshot>,
    pub estimation: EstimationSnapshot,
}

impl Snapshot {
    /// Generates the drop of `seed` with scaled-identity pilots and records it.
    pub fn capture(config: &SystemConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let net = generate_network(config, seed);
        let plan = assign_pilots(config.k, config.n, config.tau_p())?;
        let pre = PrecoderSet::scaled_identity(&config.powers(), config.n);
        let est = pilot_statistics(&net, &plan, &pre.pilot, config.sigma2)?;
        Ok(Self::from_parts(config, seed, &net, &est, plan.groups.clone()))
    }

    pub fn from_parts(config: &SystemConfig, seed: u64, net: &Network, est: &EstimationStatistics, pilot_groups: Vec<usize>) -> Self {
        let pairs = (0..net.m)
            .flat_map(|m| (0..net.k).map(move |k| (m, k)))
            .map(|(m, k)| {
                let p = net.pair(m, k);
                PairSnapshot {
                    m,
                    k,
                    beta: p.beta,
                    u_r: complex_rows(&p.u_r),
                    u_t: complex_rows(&p.u_t),
                    omega: real_rows(&p.omega),
                    r_full: complex_rows(&p.r_full),
                }
            })
            .collect();
        Snapshot {
            seed,
            config: config.clone(),
            drop: net.drop.clone(),
            pairs,
            estimation: EstimationSnapshot {
                tau_p: est.tau_p,
                sigma2: est.sigma2,
                pilot_groups,
                r_hat: est.r_hat.iter().map(complex_rows).collect(),
                c: est.c.iter().map(complex_rows).collect(),
            },
        }
    }

    /// Rebuilds the network from the stored eigenbases and coupling matrices.
    pub fn network(&self) -> Result<Network> {
        let (mm, kk) = (self.drop.ap_positions.len(), self.drop.ue_positions.len());
        if self.pairs.len() != mm * kk {
            return Err(Error::Dimension(format!("{} pairs for {mm} APs and {kk} UEs", self.pairs.len())));
        }
        let mut pairs = Vec::with_capacity(mm * kk);
        for (idx, p) in self.pairs.iter().enumerate() {
            if (p.m, p.k) != (idx / kk, idx % kk) {
                return Err(Error::Index(format!("pair {idx} is stored as ({}, {})", p.m, p.k)));
            }
            pairs.push(PairCorrelation::new(from_complex_rows(&p.u_r)?, from_complex_rows(&p.u_t)?, from_real_rows(&p.omega)?));
        }
        Ok(Network::from_pairs(self.drop.clone(), self.config.l, self.config.n, pairs))
    }

    pub fn r_hat(&self, m: usize, k: usize) -> Result<CMat> {
        from_complex_rows(&self.estimation.r_hat[m * self.drop.ue_positions.len() + k])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
