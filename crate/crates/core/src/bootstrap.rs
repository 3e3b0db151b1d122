//! Wild-bootstrap calibration, p-values and the rejection rule.

use std::fmt;
use std::str::FromStr;

use ndarray::Array1;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CmiError, Result};
use crate::kernels::KernelFamily;
use crate::seeds;
use crate::statistic::{off_diagonal_form, StatKernelMatrices};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MultiplierFamily {
    #[default]
    Rademacher,
    StandardNormal,
}

impl MultiplierFamily {
    pub fn name(self) -> &'static str {
        match self {
            MultiplierFamily::Rademacher => "rademacher",
            MultiplierFamily::StandardNormal => "standard_normal",
        }
    }

    /// `n` i.i.d. multipliers.
    pub fn draw<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> Vec<f64> {
        match self {
            MultiplierFamily::Rademacher => (0..n)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect(),
            MultiplierFamily::StandardNormal => (0..n).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }
}

impl fmt::Display for MultiplierFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MultiplierFamily {
    type Err = CmiError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "rademacher" => Ok(MultiplierFamily::Rademacher),
            "standard_normal" | "normal" | "gaussian" => Ok(MultiplierFamily::StandardNormal),
            other => Err(CmiError::InvalidConfig(format!("unknown multiplier family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub multiplier: MultiplierFamily,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            replicates: 1000,
            multiplier: MultiplierFamily::Rademacher,
            seed: 0,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(CmiError::InvalidConfig("bootstrap needs at least one replicate".into()));
        }
        Ok(())
    }
}

/// One replicate for a given multiplier vector over all `n` indices; fold
/// `s` uses the entries at its own positions.
pub fn replicate(h: &StatKernelMatrices, e: &[f64]) -> Result<f64> {
    if e.len() != h.n() {
        return Err(CmiError::DimensionMismatch {
            context: "multiplier vector length",
            expected: h.n(),
            got: e.len(),
        });
    }
    let w = h.normalizers();
    let mut parts = [0.0; 2];
    for (s, part) in parts.iter_mut().enumerate() {
        *part = w[s] * off_diagonal_form(&h.h[s], Some(&e[h.folds.fold(s)]));
    }
    Ok(0.5 * (parts[0] + parts[1]))
}

/// Replicates for explicitly supplied multiplier vectors.
pub fn wild_bootstrap_with(h: &StatKernelMatrices, multipliers: &[Vec<f64>]) -> Result<Vec<f64>> {
    multipliers.iter().map(|e| replicate(h, e)).collect()
}

/// `B` replicates; replicate `b` draws its multipliers from its own stream,
/// so the output does not depend on the worker count.
pub fn wild_bootstrap(h: &StatKernelMatrices, cfg: &BootstrapConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if h.h.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
        return Err(CmiError::NonFinite("statistic kernel matrix"));
    }
    let n = h.n();
    (0..cfg.replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = seeds::stream(cfg.seed, &[b as u64]);
            let e = cfg.multiplier.draw(n, &mut rng);
            replicate(h, &e)
        })
        .collect()
}

/// Fraction of replicates at or above `t`. Exact ties only arise in
/// degenerate cases (for instance `H ≡ 0`), where they count against
/// rejection.
pub fn p_value(t: f64, boot: &[f64]) -> Result<f64> {
    if boot.is_empty() {
        return Err(CmiError::InvalidConfig("empty bootstrap sample".into()));
    }
    let above = boot.iter().filter(|&&b| b >= t).count();
    Ok(above as f64 / boot.len() as f64)
}

pub fn validate_level(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(CmiError::InvalidConfig(format!("level must lie in (0, 1), got {gamma}")));
    }
    Ok(())
}

/// Reject iff `p < γ`.
pub fn decide(p: f64, gamma: f64) -> Result<bool> {
    validate_level(gamma)?;
    Ok(p < gamma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub epochs: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl TrainingSummary {
    pub fn from_losses(losses: &[f64]) -> Option<Self> {
        Some(TrainingSummary {
            epochs: losses.len(),
            initial_loss: *losses.first()?,
            final_loss: *losses.last()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedLog {
    pub master: u64,
    pub shuffle: u64,
    pub generator: [u64; 2],
    pub regressor: [u64; 2],
    pub scoring: u64,
    pub bootstrap: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub n: usize,
    pub fold_sizes: [usize; 2],
    pub mc_samples: usize,
    pub kernel: KernelFamily,
    /// Per-fold bandwidths; equal entries unless computed per fold.
    pub bandwidth_x: [f64; 2],
    pub bandwidth_z: [f64; 2],
    pub shuffled: bool,
    pub multiplier: MultiplierFamily,
    /// Entry `s` belongs to the models that score fold `s`.
    pub generator_training: Vec<TrainingSummary>,
    pub regressor_training: Vec<TrainingSummary>,
    pub seeds: SeedLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub t_hat: f64,
    pub boot: Vec<f64>,
    pub p_value: f64,
    pub level: f64,
    pub reject: bool,
    pub diagnostics: Diagnostics,
}

impl TestResult {
    /// Computes the p-value and decision from `t_hat` and `boot`.
    pub fn assemble(t_hat: f64, boot: Vec<f64>, level: f64, diagnostics: Diagnostics) -> Result<Self> {
        let p = p_value(t_hat, &boot)?;
        let reject = decide(p, level)?;
        Ok(TestResult {
            t_hat,
            boot,
            p_value: p,
            level,
            reject,
            diagnostics,
        })
    }

    /// `n · T̂`, the scale on which the statistic has a non-degenerate limit.
    pub fn scaled_statistic(&self) -> f64 {
        self.diagnostics.n as f64 * self.t_hat
    }

    pub fn boot_quantile(&self, q: f64) -> f64 {
        let mut v = Array1::from(self.boot.clone()).to_vec();
        v.sort_by(f64::total_cmp);
        let idx = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
        v[idx]
    }
}
