//! Monte-Carlo studies: repeated tests on simulated data, empirical
//! rejection rates and size-adjusted power.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::validate_level;
use crate::error::{CmiError, Result};
use crate::pipeline::{run_cmi_test, run_with_nuisances, TestConfig};
use crate::seeds::{self, tag};
use crate::simdata::{Example, Scenario, SimModel};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Largest tolerated share of failed replications.
pub const MAX_FAILURE_RATE: f64 = 0.05;

/// How the nuisances are obtained in each replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StatisticVariant {
    /// Trained generator and regressor (the actual test).
    #[default]
    Estimated,
    /// True conditional mean and exact conditional draws.
    Oracle,
    /// Oracle nuisances perturbed by `δ = n^(-exponent)`: the mean becomes
    /// `g_Y(z) + δ(1 + z₁)` and every conditional draw is shifted by
    /// `δ(1 + z₁)/√d_X` in each coordinate.
    Contaminated { exponent: f64 },
}

impl StatisticVariant {
    pub fn name(&self) -> String {
        match self {
            StatisticVariant::Estimated => "estimated".into(),
            StatisticVariant::Oracle => "oracle".into(),
            StatisticVariant::Contaminated { exponent } => format!("contaminated({exponent})"),
        }
    }
}

impl fmt::Display for StatisticVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for StatisticVariant {
    type Err = CmiError;

    /// `estimated`, `oracle`, `contaminated` (exponent 0.3) or
    /// `contaminated:<exponent>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "estimated" => Ok(StatisticVariant::Estimated),
            "oracle" => Ok(StatisticVariant::Oracle),
            "contaminated" => Ok(StatisticVariant::Contaminated { exponent: 0.3 }),
            other => {
                let bad = || CmiError::InvalidConfig(format!("unknown statistic variant `{other}`"));
                let rest = other.strip_prefix("contaminated:").ok_or_else(bad)?;
                let exponent: f64 = rest.parse().map_err(|_| bad())?;
                if !(exponent > 0.0 && exponent.is_finite()) {
                    return Err(bad());
                }
                Ok(StatisticVariant::Contaminated { exponent })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySpec {
    pub example: Example,
    pub scenario: Scenario,
    pub n: usize,
    pub replications: usize,
    pub level: f64,
    pub variant: StatisticVariant,
    /// Per-replication settings; `seed` and `level` are overridden.
    pub test: TestConfig,
    pub seed: u64,
}

impl StudySpec {
    pub fn new(example: Example, scenario: Scenario, n: usize, replications: usize) -> Self {
        StudySpec {
            example,
            scenario,
            n,
            replications,
            level: 0.05,
            variant: StatisticVariant::Estimated,
            test: TestConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(CmiError::InvalidConfig("a study needs at least one replication".into()));
        }
        if self.n < 4 {
            return Err(CmiError::InvalidConfig(format!("n must be at least 4, got {}", self.n)));
        }
        validate_level(self.level)?;
        self.test.validate()
    }

    pub fn data_seed(&self, r: usize) -> u64 {
        seeds::derive(self.seed, &[tag::REPLICATION, r as u64, tag::DATA])
    }

    pub fn test_seed(&self, r: usize) -> u64 {
        seeds::derive(self.seed, &[tag::REPLICATION, r as u64])
    }

    /// Everything but the scenario, for pairing null and alternative studies.
    fn pairing_key(&self) -> String {
        let mut other = self.clone();
        other.scenario = Scenario::Null;
        serde_json::to_string(&other).expect("spec serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub index: usize,
    pub data_seed: u64,
    pub test_seed: u64,
    pub t_hat: Option<f64>,
    pub p_value: Option<f64>,
    pub reject: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub schema_version: u32,
    pub spec: StudySpec,
    pub completed: usize,
    pub failed: usize,
    pub rejections: usize,
    pub rejection_rate: f64,
    /// Binomial standard error of the rejection rate.
    pub standard_error: f64,
    pub replications: Vec<ReplicationRecord>,
    /// Wall-clock time; kept out of the record file so records stay
    /// reproducible.
    #[serde(skip)]
    pub elapsed_seconds: f64,
}

impl StudyReport {
    /// Statistics of the completed replications in index order.
    pub fn statistics(&self) -> Vec<f64> {
        self.replications.iter().filter_map(|r| r.t_hat).collect()
    }

    /// `rate ± 3·SE` around `target`, the band used for reduced budgets.
    pub fn within_band(&self, target: f64) -> bool {
        let se = (target * (1.0 - target) / self.completed.max(1) as f64).sqrt();
        (self.rejection_rate - target).abs() <= 3.0 * se
    }
}

fn replicate_one(spec: &StudySpec, model: &SimModel, r: usize) -> ReplicationRecord {
    let data_seed = spec.data_seed(r);
    let test_seed = spec.test_seed(r);
    let cfg = TestConfig {
        seed: test_seed,
        level: spec.level,
        ..spec.test.clone()
    };
    let outcome = model.generate(spec.n, data_seed).and_then(|data| match spec.variant {
        StatisticVariant::Estimated => run_cmi_test(&data, &cfg),
        StatisticVariant::Oracle => run_with_nuisances(
            &data,
            &cfg,
            |z| vec![model.g_y(z)],
            |z, m, seed| model.design.sample_conditional(z, m, seed),
        ),
        StatisticVariant::Contaminated { exponent } => {
            let delta = (spec.n as f64).powf(-exponent);
            let dx = model.design.x_dim() as f64;
            run_with_nuisances(
                &data,
                &cfg,
                |z| vec![model.g_y(z) + delta * (1.0 + z[0])],
                |z, m, seed| {
                    let shift = Array1::from_elem(model.design.x_dim(), delta * (1.0 + z[0]) / dx.sqrt());
                    model.design.sample_conditional_shifted(z, m, seed, Some(&shift))
                },
            )
        }
    });
    match outcome {
        Ok(res) => ReplicationRecord {
            index: r,
            data_seed,
            test_seed,
            t_hat: Some(res.t_hat),
            p_value: Some(res.p_value),
            reject: Some(res.reject),
            error: None,
        },
        Err(e) => ReplicationRecord {
            index: r,
            data_seed,
            test_seed,
            t_hat: None,
            p_value: None,
            reject: None,
            error: Some(e.to_string()),
        },
    }
}

pub fn run_study(spec: &StudySpec) -> Result<StudyReport> {
    run_study_with(spec, |_| {})
}

/// Like [`run_study`], calling `on_done` as each replication finishes.
pub fn run_study_with(spec: &StudySpec, on_done: impl Fn(&ReplicationRecord) + Sync) -> Result<StudyReport> {
    spec.validate()?;
    let start = Instant::now();
    let model = SimModel::new(spec.example, spec.scenario);
    let replications: Vec<ReplicationRecord> = (0..spec.replications)
        .into_par_iter()
        .map(|r| {
            let rec = replicate_one(spec, &model, r);
            on_done(&rec);
            rec
        })
        .collect();
    let failed = replications.iter().filter(|r| r.error.is_some()).count();
    if failed as f64 > MAX_FAILURE_RATE * spec.replications as f64 {
        let first = replications
            .iter()
            .find_map(|r| r.error.clone())
            .unwrap_or_default();
        return Err(CmiError::Degenerate(format!(
            "{failed} of {} replications failed (first error: {first})",
            spec.replications
        )));
    }
    let completed = spec.replications - failed;
    let rejections = replications.iter().filter(|r| r.reject == Some(true)).count();
    let rate = if completed == 0 {
        0.0
    } else {
        rejections as f64 / completed as f64
    };
    Ok(StudyReport {
        schema_version: REPORT_SCHEMA_VERSION,
        spec: spec.clone(),
        completed,
        failed,
        rejections,
        rejection_rate: rate,
        standard_error: (rate * (1.0 - rate) / completed.max(1) as f64).sqrt(),
        replications,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Empirical `(1 − γ)` critical value: the `⌈(1 − γ)R⌉`-th smallest null
/// statistic.
pub fn null_critical_value(null_stats: &[f64], gamma: f64) -> Result<f64> {
    validate_level(gamma)?;
    if null_stats.is_empty() {
        return Err(CmiError::InvalidConfig("empty null statistic sample".into()));
    }
    let mut sorted = null_stats.to_vec();
    sorted.sort_by(f64::total_cmp);
    let r = sorted.len();
    let idx = ((1.0 - gamma) * r as f64).ceil() as usize;
    Ok(sorted[idx.clamp(1, r) - 1])
}

/// Fraction of alternative statistics strictly above the null critical
/// value.
pub fn size_adjusted_power_from(null_stats: &[f64], alt_stats: &[f64], gamma: f64) -> Result<f64> {
    let crit = null_critical_value(null_stats, gamma)?;
    if alt_stats.is_empty() {
        return Err(CmiError::InvalidConfig("empty alternative statistic sample".into()));
    }
    Ok(alt_stats.iter().filter(|&&t| t > crit).count() as f64 / alt_stats.len() as f64)
}

/// Size-adjusted power of `alt` against the null study `null`; the two must
/// agree in everything but the scenario.
pub fn size_adjusted_power(null: &StudyReport, alt: &StudyReport, gamma: f64) -> Result<f64> {
    if null.spec.scenario != Scenario::Null {
        return Err(CmiError::InvalidConfig(format!(
            "reference study has scenario `{}`, expected `null`",
            null.spec.scenario
        )));
    }
    if null.spec.pairing_key() != alt.spec.pairing_key() {
        return Err(CmiError::InvalidConfig(
            "null and alternative studies differ in configuration (example, n, variant, settings or seed)".into(),
        ));
    }
    size_adjusted_power_from(&null.statistics(), &alt.statistics(), gamma)
}

/// One cell row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub example: Example,
    pub scenario: Scenario,
    pub n: usize,
    pub variant: String,
    pub replications: usize,
    pub rejection_rate: f64,
    pub standard_error: f64,
    /// Present for alternatives with a matching null study.
    pub size_adjusted_power: Option<f64>,
}

/// Rows ordered by example, variant, scenario and `n`; adjusted power is
/// filled in wherever a matching null study is among `reports`.
pub fn build_table(reports: &[StudyReport]) -> Vec<TableRow> {
    let mut nulls: BTreeMap<String, &StudyReport> = BTreeMap::new();
    for r in reports.iter().filter(|r| r.spec.scenario == Scenario::Null) {
        nulls.entry(r.spec.pairing_key()).or_insert(r);
    }
    let mut rows: Vec<TableRow> = reports
        .iter()
        .map(|r| {
            let adjusted = if r.spec.scenario == Scenario::Null {
                None
            } else {
                nulls
                    .get(&r.spec.pairing_key())
                    .and_then(|null| size_adjusted_power(null, r, r.spec.level).ok())
            };
            TableRow {
                example: r.spec.example,
                scenario: r.spec.scenario,
                n: r.spec.n,
                variant: r.spec.variant.name(),
                replications: r.completed,
                rejection_rate: r.rejection_rate,
                standard_error: r.standard_error,
                size_adjusted_power: adjusted,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        (a.example as u8, &a.variant, a.scenario as u8, a.n).cmp(&(b.example as u8, &b.variant, b.scenario as u8, b.n))
    });
    rows
}

/// Comma-delimited table; absent adjusted power is written as `NA`.
pub fn table_to_csv(rows: &[TableRow]) -> String {
    let mut out = String::from("example,scenario,n,variant,replications,rejection_rate,standard_error,size_adjusted_power\n");
    for r in rows {
        let adj = r
            .size_adjusted_power
            .map(|v| v.to_string())
            .unwrap_or_else(|| "NA".into());
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.example, r.scenario, r.n, r.variant, r.replications, r.rejection_rate, r.standard_error, adj
        ));
    }
    out
}
