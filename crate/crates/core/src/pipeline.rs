//! End-to-end test: shuffle, split, cross-fit the four networks, score,
//! assemble the statistic and calibrate it.

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{
    validate_level, wild_bootstrap, BootstrapConfig, Diagnostics, SeedLog, TestResult, TrainingSummary,
};
use crate::data::Dataset;
use crate::error::{CmiError, Result};
use crate::generator::{train_generator, GeneratorModel, GeneratorTrainConfig};
use crate::kernels::{median_heuristic_seeded, KernelFamily, KernelSpec};
use crate::normalize::Standardizer;
use crate::regressor::{train_regressor, RegressorModel, RegressorTrainConfig};
use crate::seeds::{self, tag};
use crate::statistic::{
    oracle_scores, split_folds, stat_kernel_matrices_per_fold, t_hat, FoldAssignment, NuisanceScores,
};

/// Smallest fold that can train the networks.
pub const MIN_FOLD: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum BandwidthMode {
    #[default]
    MedianHeuristic,
    Fixed { x: f64, z: f64 },
}

/// Which rows feed the median heuristic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthScope {
    #[default]
    FullSample,
    PerFold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestConfig {
    pub kernel: KernelFamily,
    pub bandwidth: BandwidthMode,
    pub bandwidth_scope: BandwidthScope,
    /// Standardize `Z` (full-sample moments) before evaluating `K_Z`.
    pub standardize_z: bool,
    pub mc_samples: usize,
    pub level: f64,
    pub seed: u64,
    pub shuffle: bool,
    pub bootstrap: BootstrapConfig,
    pub generator: GeneratorTrainConfig,
    pub regressor: RegressorTrainConfig,
}

impl Default for TestConfig {
    fn default() -> Self {
        TestConfig {
            kernel: KernelFamily::Laplacian,
            bandwidth: BandwidthMode::MedianHeuristic,
            bandwidth_scope: BandwidthScope::FullSample,
            standardize_z: false,
            mc_samples: 64,
            level: 0.05,
            seed: 0,
            shuffle: true,
            bootstrap: BootstrapConfig::default(),
            generator: GeneratorTrainConfig::default(),
            regressor: RegressorTrainConfig::default(),
        }
    }
}

impl TestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_samples == 0 {
            return Err(CmiError::InvalidConfig("mc_samples must be positive".into()));
        }
        validate_level(self.level)?;
        if let BandwidthMode::Fixed { x, z } = self.bandwidth {
            KernelSpec::new(self.kernel, x)?;
            KernelSpec::new(self.kernel, z)?;
        }
        self.bootstrap.validate()?;
        self.generator.validate()?;
        self.regressor.validate()
    }
}

/// Which original rows trained the models for each fold and which rows they
/// scored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossFitAudit {
    pub trained_on: [Vec<usize>; 2],
    pub scored: [Vec<usize>; 2],
}

impl CrossFitAudit {
    /// No row was scored by a model that saw it during training.
    pub fn is_clean(&self) -> bool {
        (0..2).all(|s| self.scored[s].iter().all(|i| !self.trained_on[s].contains(i)))
    }
}

/// Shuffled data, folds and kernels, shared by the estimated and oracle
/// versions of the test.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub data: Dataset,
    /// `order[i]` is the original row at shuffled position `i`.
    pub order: Vec<usize>,
    pub folds: FoldAssignment,
    pub kx: [KernelSpec; 2],
    pub kz: [KernelSpec; 2],
    pub z_scaler: Option<Standardizer>,
    pub seeds: SeedLog,
}

impl Prepared {
    /// Seed for the draws of the row at shuffled position `i`; keyed by the
    /// original row so shuffling does not change a row's draws.
    pub fn draw_seed(&self, i: usize) -> u64 {
        seeds::derive(self.seeds.scoring, &[self.order[i] as u64])
    }
}

pub fn prepare(data: &Dataset, cfg: &TestConfig) -> Result<Prepared> {
    cfg.validate()?;
    let n = data.len();
    let master = cfg.seed;
    let seeds = SeedLog {
        master,
        shuffle: seeds::derive(master, &[tag::SHUFFLE]),
        generator: [0, 1].map(|s| seeds::derive(master, &[tag::GENERATOR, s, cfg.generator.seed])),
        regressor: [0, 1].map(|s| seeds::derive(master, &[tag::REGRESSOR, s, cfg.regressor.seed])),
        scoring: seeds::derive(master, &[tag::SCORING]),
        bootstrap: seeds::derive(master, &[tag::BOOTSTRAP, cfg.bootstrap.seed]),
    };
    let mut order: Vec<usize> = (0..n).collect();
    if cfg.shuffle {
        order.shuffle(&mut seeds::stream(seeds.shuffle, &[]));
    }
    let data = data.reorder(&order);
    let folds = split_folds(n)?;

    let z_scaler = if cfg.standardize_z {
        Some(Standardizer::fit(data.z.view())?)
    } else {
        None
    };
    let z_kernel_input = match &z_scaler {
        Some(s) => s.apply(data.z.view()),
        None => data.z.clone(),
    };
    let bw_seed = seeds::derive(master, &[tag::BANDWIDTH]);
    let pick = |m: &Array2<f64>, fixed: Option<f64>, what: &'static str| -> Result<[KernelSpec; 2]> {
        let bandwidths = match (fixed, cfg.bandwidth_scope) {
            (Some(b), _) => [b, b],
            (None, BandwidthScope::FullSample) => {
                let b = median_heuristic_seeded(m.view(), cfg.kernel, bw_seed)
                    .map_err(|e| e.in_stage(what))?;
                [b, b]
            }
            (None, BandwidthScope::PerFold) => {
                let mut out = [0.0; 2];
                for (s, b) in out.iter_mut().enumerate() {
                    let rows = m.slice(ndarray::s![folds.fold(s), ..]);
                    *b = median_heuristic_seeded(rows, cfg.kernel, bw_seed).map_err(|e| e.in_stage(what))?;
                }
                out
            }
        };
        Ok([
            KernelSpec::new(cfg.kernel, bandwidths[0])?,
            KernelSpec::new(cfg.kernel, bandwidths[1])?,
        ])
    };
    let (fx, fz) = match cfg.bandwidth {
        BandwidthMode::Fixed { x, z } => (Some(x), Some(z)),
        BandwidthMode::MedianHeuristic => (None, None),
    };
    let kx = pick(&data.x, fx, "bandwidth for X")?;
    let kz = pick(&z_kernel_input, fz, "bandwidth for Z")?;
    Ok(Prepared {
        data,
        order,
        folds,
        kx,
        kz,
        z_scaler,
        seeds,
    })
}

/// Kernel matrices, statistic, bootstrap and decision from nuisance scores
/// indexed by shuffled position.
pub fn finish(
    prep: &Prepared,
    scores: &NuisanceScores,
    cfg: &TestConfig,
    generator_training: Vec<TrainingSummary>,
    regressor_training: Vec<TrainingSummary>,
) -> Result<TestResult> {
    let scored_data;
    let data = match &prep.z_scaler {
        Some(s) => {
            scored_data = Dataset {
                z: s.apply(prep.data.z.view()),
                ..prep.data.clone()
            };
            &scored_data
        }
        None => &prep.data,
    };
    let h = stat_kernel_matrices_per_fold(
        data,
        &prep.folds,
        scores,
        [&prep.kx[0], &prep.kx[1]],
        [&prep.kz[0], &prep.kz[1]],
    )
    .map_err(|e| e.in_stage("statistic"))?;
    let t = t_hat(&h);
    let boot_cfg = BootstrapConfig {
        seed: prep.seeds.bootstrap,
        ..cfg.bootstrap.clone()
    };
    let boot = wild_bootstrap(&h, &boot_cfg).map_err(|e| e.in_stage("bootstrap"))?;
    let diagnostics = Diagnostics {
        n: prep.data.len(),
        fold_sizes: prep.folds.sizes(),
        mc_samples: cfg.mc_samples,
        kernel: cfg.kernel,
        bandwidth_x: [prep.kx[0].bandwidth, prep.kx[1].bandwidth],
        bandwidth_z: [prep.kz[0].bandwidth, prep.kz[1].bandwidth],
        shuffled: cfg.shuffle,
        multiplier: cfg.bootstrap.multiplier,
        generator_training,
        regressor_training,
        seeds: prep.seeds.clone(),
    };
    TestResult::assemble(t, boot, cfg.level, diagnostics)
}

struct FoldModels {
    generator: GeneratorModel,
    regressor: RegressorModel,
    generator_losses: Vec<f64>,
    regressor_losses: Vec<f64>,
}

fn train_fold(prep: &Prepared, cfg: &TestConfig, s: usize) -> Result<FoldModels> {
    let rows = prep.folds.training_fold(s);
    let x = prep.data.x.slice(ndarray::s![rows.clone(), ..]);
    let y = prep.data.y.slice(ndarray::s![rows.clone(), ..]);
    let z = prep.data.z.slice(ndarray::s![rows, ..]);
    let gcfg = GeneratorTrainConfig {
        seed: prep.seeds.generator[s],
        ..cfg.generator.clone()
    };
    let rcfg = RegressorTrainConfig {
        seed: prep.seeds.regressor[s],
        ..cfg.regressor.clone()
    };
    let g = train_generator(x, z, &gcfg).map_err(|e| e.in_stage("generator training"))?;
    let r = train_regressor(y, z, &rcfg).map_err(|e| e.in_stage("regressor training"))?;
    Ok(FoldModels {
        generator: g.model,
        regressor: r.model,
        generator_losses: g.epoch_losses,
        regressor_losses: r.epoch_losses,
    })
}

fn score(prep: &Prepared, cfg: &TestConfig, models: &[FoldModels; 2]) -> Result<NuisanceScores> {
    let n = prep.data.len();
    let generated: Vec<Array2<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = prep.folds.fold_of(i);
            let z = prep.data.z.row(i).to_vec();
            models[s]
                .generator
                .sample_conditional(&z, cfg.mc_samples, prep.draw_seed(i))
        })
        .collect::<Result<_>>()
        .map_err(|e| e.in_stage("generator scoring"))?;
    let mut mean = Array2::<f64>::zeros((n, prep.data.y.ncols()));
    for (s, m) in models.iter().enumerate() {
        let rows = prep.folds.fold(s);
        let pred = m
            .regressor
            .predict_mean(prep.data.z.slice(ndarray::s![rows.clone(), ..]))
            .map_err(|e| e.in_stage("regressor scoring"))?;
        mean.slice_mut(ndarray::s![rows, ..]).assign(&pred);
    }
    Ok(NuisanceScores { generated, mean })
}

/// The full test with fitted nuisances, plus the record of which rows
/// trained and which rows were scored by each fold's models.
pub fn run_cmi_test_audited(data: &Dataset, cfg: &TestConfig) -> Result<(TestResult, CrossFitAudit)> {
    let prep = prepare(data, cfg)?;
    let sizes = prep.folds.sizes();
    if sizes.iter().any(|&f| f < MIN_FOLD) {
        return Err(CmiError::InvalidConfig(format!(
            "n = {} is too small: each fold needs at least {MIN_FOLD} observations to train the networks (use n >= {})",
            prep.data.len(),
            2 * MIN_FOLD
        )));
    }
    let (m0, m1) = rayon::join(|| train_fold(&prep, cfg, 0), || train_fold(&prep, cfg, 1));
    let models = [m0?, m1?];
    let scores = score(&prep, cfg, &models)?;
    let audit = CrossFitAudit {
        trained_on: [0, 1].map(|s| prep.folds.training_fold(s).map(|i| prep.order[i]).collect()),
        scored: [0, 1].map(|s| prep.folds.fold(s).map(|i| prep.order[i]).collect()),
    };
    let summaries = |f: fn(&FoldModels) -> &Vec<f64>| -> Vec<TrainingSummary> {
        models.iter().filter_map(|m| TrainingSummary::from_losses(f(m))).collect()
    };
    let result = finish(
        &prep,
        &scores,
        cfg,
        summaries(|m| &m.generator_losses),
        summaries(|m| &m.regressor_losses),
    )?;
    Ok((result, audit))
}

pub fn run_cmi_test(data: &Dataset, cfg: &TestConfig) -> Result<TestResult> {
    run_cmi_test_audited(data, cfg).map(|(r, _)| r)
}

/// The test with supplied conditional laws instead of trained networks:
/// `mean_y(z)` stands in for `ĝ` and `sampler(z, M, seed)` for the generator.
/// Training settings in `cfg` are ignored.
pub fn run_with_nuisances<G, S>(data: &Dataset, cfg: &TestConfig, mean_y: G, sampler: S) -> Result<TestResult>
where
    G: Fn(ArrayView1<f64>) -> Vec<f64> + Sync,
    S: Fn(ArrayView1<f64>, usize, u64) -> Array2<f64> + Sync,
{
    let prep = prepare(data, cfg)?;
    let scores = oracle_scores(&prep.data, mean_y, sampler, cfg.mc_samples, |i| prep.draw_seed(i))
        .map_err(|e| e.in_stage("oracle scoring"))?;
    finish(&prep, &scores, cfg, Vec::new(), Vec::new())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simdata::{gen_example, Example, Scenario};

    fn quick_config(seed: u64) -> TestConfig {
        TestConfig {
            mc_samples: 8,
            seed,
            bootstrap: BootstrapConfig {
                replicates: 99,
                ..Default::default()
            },
            generator: GeneratorTrainConfig {
                hidden: vec![16],
                epochs: 5,
                ..Default::default()
            },
            regressor: RegressorTrainConfig {
                hidden: vec![16],
                epochs: 5,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TestConfig::default().validate().is_ok());
        let bad = TestConfig {
            level: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TestConfig {
            bandwidth: BandwidthMode::Fixed { x: 0.0, z: 1.0 },
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn deterministic_and_cross_fitted() {
        let data = gen_example(Example::A1, Scenario::Null, 40, 1).unwrap();
        let cfg = quick_config(5);
        let (a, audit) = run_cmi_test_audited(&data, &cfg).unwrap();
        let (b, _) = run_cmi_test_audited(&data, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(audit.is_clean());
        let mut all: Vec<usize> = audit.scored.concat();
        all.sort_unstable();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
        assert_eq!(a.boot.len(), 99);
        assert_eq!(a.reject, a.p_value < a.level);
    }

    #[test]
    fn too_small_for_training() {
        let data = gen_example(Example::A1, Scenario::Null, 6, 1).unwrap();
        let err = run_cmi_test(&data, &quick_config(0)).unwrap_err();
        assert!(err.to_string().contains("n >= 8"), "{err}");
    }

    #[test]
    fn constant_response_gives_zero() {
        let mut data = gen_example(Example::A1, Scenario::Null, 40, 2).unwrap();
        data.y.fill(1.5);
        let r = run_cmi_test(&data, &quick_config(1)).unwrap();
        assert_eq!(r.t_hat, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert!(!r.reject);
    }

    #[test]
    fn per_fold_bandwidths_and_fixed() {
        let data = gen_example(Example::A1, Scenario::Null, 40, 3).unwrap();
        let cfg = TestConfig {
            bandwidth_scope: BandwidthScope::PerFold,
            standardize_z: true,
            ..quick_config(2)
        };
        let p = prepare(&data, &cfg).unwrap();
        assert_ne!(p.kx[0].bandwidth, p.kx[1].bandwidth);
        let cfg = TestConfig {
            bandwidth: BandwidthMode::Fixed { x: 2.0, z: 3.0 },
            ..quick_config(2)
        };
        let p = prepare(&data, &cfg).unwrap();
        assert_eq!(p.kx[1].bandwidth, 2.0);
        assert_eq!(p.kz[0].bandwidth, 3.0);
    }

    #[test]
    fn shuffle_keeps_draws_with_rows() {
        let data = gen_example(Example::A1, Scenario::Null, 20, 4).unwrap();
        let on = prepare(&data, &quick_config(0)).unwrap();
        let off = prepare(&data, &TestConfig { shuffle: false, ..quick_config(0) }).unwrap();
        assert_ne!(on.order, off.order);
        let i = on.order.iter().position(|&o| o == 7).unwrap();
        assert_eq!(on.draw_seed(i), off.draw_seed(7));
    }
}
