use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::receive::Combiner;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PrecoderMode {
    /// Scaled identity `√(p/N)·I`, no optimisation.
    None,
    /// One I-WMMSE iteration.
    Wmmse1,
    /// Full I-WMMSE run.
    Iwmmse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SePath {
    Mc,
    Closed,
}

impl std::fmt::Display for PrecoderMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PrecoderMode::None => "none",
            PrecoderMode::Wmmse1 => "wmmse1",
            PrecoderMode::Iwmmse => "iwmmse",
        })
    }
}

impl std::fmt::Display for SePath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SePath::Mc => "mc",
            SePath::Closed => "closed",
        })
    }
}

/// Converts dBm to watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Every scalar of the system plus the knobs of one experiment. The TOML
/// form uses the same field names; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    /// Number of APs.
    pub m: usize,
    /// Number of UEs.
    pub k: usize,
    /// Antennas per AP.
    pub l: usize,
    /// Antennas per UE.
    pub n: usize,
    /// Side of the square area in metres.
    pub area_side: f64,
    /// Coherence block length in channel uses.
    pub tau_c: usize,
    /// Pilot length. `None` means `N·⌈K/2⌉`, which is `K·N/2` for even K.
    pub tau_p: Option<usize>,
    /// Noise power in watts.
    pub sigma2: f64,
    /// Per-UE power budget in watts.
    pub p_k: f64,
    /// Priority weights; `None` means all ones.
    pub mu_k: Option<Vec<f64>>,
    /// Reporting only; never enters the math.
    pub bandwidth: f64,
    /// Monte-Carlo realisations per statistics refresh.
    pub n_r: usize,
    pub i_max: usize,
    pub epsilon: f64,
    pub combiner: Combiner,
    pub precoder_mode: PrecoderMode,
    pub se_path: SePath,
    pub seeds: Vec<u64>,
    /// Power multiplier of the dominant transmit eigendirection of each
    /// coupling matrix. `None` means `2·L·N`.
    pub dominance_factor: Option<f64>,
    /// Reuse the same Monte-Carlo realisations in every optimiser iteration.
    pub common_random_numbers: bool,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            m: 20,
            k: 10,
            l: 2,
            n: 4,
            area_side: 1000.0,
            tau_c: 200,
            tau_p: None,
            sigma2: dbm_to_watts(-94.0),
            p_k: 0.2,
            mu_k: None,
            bandwidth: 20e6,
            n_r: 1000,
            i_max: 20,
            epsilon: 5e-4,
            combiner: Combiner::Mr,
            precoder_mode: PrecoderMode::Iwmmse,
            se_path: SePath::Mc,
            seeds: vec![1],
            dominance_factor: None,
            common_random_numbers: true,
        }
    }
}

impl SystemConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: SystemConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn tau_p(&self) -> usize {
        self.tau_p.unwrap_or(self.n * self.k.div_ceil(2))
    }

    pub fn mu(&self) -> Vec<f64> {
        self.mu_k.clone().unwrap_or_else(|| vec![1.0; self.k])
    }

    pub fn powers(&self) -> Vec<f64> {
        vec![self.p_k; self.k]
    }

    pub fn dominance(&self) -> f64 {
        self.dominance_factor.unwrap_or(2.0 * (self.l * self.n) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.m == 0 || self.k == 0 || self.l == 0 || self.n == 0 {
            return bad(format!("m, k, l, n must be positive (got {}, {}, {}, {})", self.m, self.k, self.l, self.n));
        }
        if !(self.area_side > 0.0) {
            return bad(format!("area_side must be positive, got {}", self.area_side));
        }
        let tau_p = self.tau_p();
        if tau_p == 0 || !tau_p.is_multiple_of(self.n) {
            return bad(format!("tau_p = {tau_p} is not a positive multiple of n = {}", self.n));
        }
        if tau_p > self.tau_c {
            return bad(format!("tau_p = {tau_p} exceeds tau_c = {}", self.tau_c));
        }
        if !(self.sigma2 > 0.0) || !(self.p_k > 0.0) {
            return bad("sigma2 and p_k must be positive".into());
        }
        if let Some(mu) = &self.mu_k {
            if mu.len() != self.k || mu.iter().any(|&v| !(v > 0.0)) {
                return bad(format!("mu_k needs {} positive entries", self.k));
            }
        }
        if self.n_r == 0 || self.i_max == 0 || !(self.epsilon > 0.0) {
            return bad("n_r, i_max and epsilon must be positive".into());
        }
        if self.se_path == SePath::Closed && self.combiner != Combiner::Mr {
            return bad("the closed-form path requires MR combining".into());
        }
        if let Some(d) = self.dominance_factor {
            if !(d >= 1.0) {
                return bad(format!("dominance_factor must be at least 1, got {d}"));
            }
        }
        Ok(())
    }
}
