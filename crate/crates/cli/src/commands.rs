use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cmi_core::harness::{build_table, run_study, table_to_csv, StudyReport, StudySpec, TableRow};
use cmi_core::io::{self, TestRecord};
use cmi_core::simdata::{gen_example, SimModel};
use cmi_core::{CmiError, Dataset, TestConfig, TestResult};

use crate::error::{CliError, CliResult};
use crate::manifest::{absolute, digest_file, sha256_hex, DataPaths, FileDigest, Invocation, OutputDir, RunManifest};

/// Reads the `TOML` test configuration; absent keys keep their defaults.
pub fn load_config(path: Option<&Path>) -> CliResult<TestConfig> {
    let Some(path) = path else {
        return Ok(TestConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn read_matrix(label: &str, path: &Path) -> CliResult<io::CsvMatrix> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {label} file {}: {e}", path.display())))?;
    io::parse_csv(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn load_dataset(paths: &DataPaths) -> CliResult<Dataset> {
    let x = read_matrix("x", &paths.x)?.values;
    let y = read_matrix("y", &paths.y)?.values;
    let z = read_matrix("z", &paths.z)?.values;
    for (path, m) in [(&paths.y, &y), (&paths.z, &z)] {
        if m.nrows() != x.nrows() {
            return Err(CliError::Input(format!(
                "row count mismatch: {} has {} rows but {} has {}",
                paths.x.display(),
                x.nrows(),
                path.display(),
                m.nrows()
            )));
        }
    }
    Dataset::new(x, y, z).map_err(|e| CliError::from_core("dataset", e))
}

pub fn summarize(result: &TestResult) -> String {
    let d = &result.diagnostics;
    let mut s = String::new();
    let _ = writeln!(s, "conditional mean independence test");
    let _ = writeln!(s, "n = {} (folds {} / {})", d.n, d.fold_sizes[0], d.fold_sizes[1]);
    let _ = writeln!(
        s,
        "kernel {}, bandwidth x {:.4} / {:.4}, z {:.4} / {:.4}",
        format!("{:?}", d.kernel).to_lowercase(), d.bandwidth_x[0], d.bandwidth_x[1], d.bandwidth_z[0], d.bandwidth_z[1]
    );
    let _ = writeln!(
        s,
        "Monte Carlo draws {}, bootstrap replicates {} ({})",
        d.mc_samples,
        result.boot.len(),
        d.multiplier
    );
    let _ = writeln!(s, "statistic T = {:.6e} (n T = {:.6})", result.t_hat, result.scaled_statistic());
    let _ = writeln!(
        s,
        "p-value {:.4} at level {}: {}",
        result.p_value,
        result.level,
        if result.reject { "reject H0" } else { "do not reject H0" }
    );
    s
}

fn materialize(mut cfg: TestConfig, x_dim: usize) -> TestConfig {
    if cfg.generator.noise_dim.is_none() {
        cfg.generator.noise_dim = Some(cfg.generator.resolved_noise_dim(x_dim));
    }
    cfg
}

/// Runs one test on the CSV files in `data`.
pub fn run_test(data: DataPaths, cfg: TestConfig, out: &Path) -> CliResult<PathBuf> {
    cfg.validate()?;
    let data = DataPaths {
        x: absolute(&data.x),
        y: absolute(&data.y),
        z: absolute(&data.z),
    };
    let dataset = load_dataset(&data)?;
    let cfg = materialize(cfg, dataset.x.ncols());
    let inputs = [&data.x, &data.y, &data.z]
        .into_iter()
        .map(|p| Ok(FileDigest { path: p.clone(), sha256: digest_file(p)? }))
        .collect::<CliResult<Vec<_>>>()?;
    let result = cmi_core::run_cmi_test(&dataset, &cfg).map_err(|e| CliError::from_core("test", e))?;
    let summary = summarize(&result);
    let mut dir = OutputDir::create(out)?;
    dir.write("result.json", &io::to_json(&TestRecord::new(result)))?;
    dir.write("summary.txt", &summary)?;
    print!("{summary}");
    let manifest = RunManifest::new(Invocation::Test { data, config: cfg }, inputs, absolute(dir.path()));
    dir.finish(manifest)
}

fn study_file_name(spec: &StudySpec) -> String {
    let variant: String = spec
        .variant
        .name()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
        .collect();
    format!(
        "study_{}_{}_{}_n{}.json",
        spec.example,
        spec.scenario,
        variant.trim_matches('_'),
        spec.n
    )
}

/// One study per entry of `studies`, plus the combined grid.
pub fn run_simulate(studies: Vec<StudySpec>, out: &Path) -> CliResult<PathBuf> {
    if studies.is_empty() {
        return Err(CliError::Input("nothing to simulate".into()));
    }
    let studies: Vec<StudySpec> = studies
        .into_iter()
        .map(|mut s| {
            let x_dim = SimModel::new(s.example, s.scenario).design.x_dim();
            s.test = materialize(s.test, x_dim);
            s
        })
        .collect();
    for s in &studies {
        s.validate()?;
    }
    let mut dir = OutputDir::create(out)?;
    let mut reports = Vec::new();
    for spec in &studies {
        let report = run_study(spec).map_err(|e| match e {
            CmiError::Degenerate(msg) => CliError::Numerical(msg),
            other => CliError::from_core("study", other),
        })?;
        println!(
            "{} {} n={} {}: {}/{} rejected (rate {:.4}, se {:.4}), {} failed",
            spec.example,
            spec.scenario,
            spec.n,
            spec.variant,
            report.rejections,
            report.completed,
            report.rejection_rate,
            report.standard_error,
            report.failed
        );
        dir.write(&study_file_name(spec), &io::to_json(&report))?;
        reports.push(report);
    }
    dir.write("grid.csv", &table_to_csv(&build_table(&reports)))?;
    let manifest = RunManifest::new(Invocation::Simulate { studies }, Vec::new(), absolute(dir.path()));
    dir.finish(manifest)
}

fn cell_key(spec: &StudySpec) -> String {
    format!("{}/{}/{}/n={}", spec.example, spec.scenario, spec.variant, spec.n)
}

/// Rejection rate against `n`, one series per example, variant and
/// scenario, with a normal-approximation 95% interval.
pub fn plot_csv(rows: &[TableRow]) -> String {
    let mut sorted: Vec<&TableRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        (a.example as u8, &a.variant, a.scenario as u8, a.n).cmp(&(b.example as u8, &b.variant, b.scenario as u8, b.n))
    });
    let mut out = String::from("series,n,rejection_rate,lower,upper\n");
    for r in sorted {
        let half = 1.96 * r.standard_error;
        let _ = writeln!(
            out,
            "{}/{}/{},{},{},{},{}",
            r.example,
            r.variant,
            r.scenario,
            r.n,
            r.rejection_rate,
            (r.rejection_rate - half).max(0.0),
            (r.rejection_rate + half).min(1.0)
        );
    }
    out
}

pub fn format_table(rows: &[TableRow]) -> String {
    let mut s = format!(
        "{:<8}{:<10}{:>6}  {:<20}{:>6}{:>10}{:>10}\n",
        "example", "scenario", "n", "variant", "reps", "rate", "adj.pow"
    );
    for r in rows {
        let adj = r
            .size_adjusted_power
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:<8}{:<10}{:>6}  {:<20}{:>6}{:>10.4}{:>10}",
            r.example.to_string(),
            r.scenario.to_string(),
            r.n,
            r.variant,
            r.replications,
            r.rejection_rate,
            adj
        );
    }
    s
}

/// Merges study reports into one table. Reports with identical settings
/// are kept once; two different studies claiming the same cell are an
/// error.
pub fn run_report(inputs: Vec<PathBuf>, out: &Path) -> CliResult<PathBuf> {
    if inputs.is_empty() {
        return Err(CliError::Input("report needs at least one study file".into()));
    }
    let inputs: Vec<PathBuf> = inputs.iter().map(|p| absolute(p)).collect();
    let mut digests = Vec::new();
    let mut by_digest: BTreeMap<String, StudyReport> = BTreeMap::new();
    let mut cells: BTreeMap<String, (String, PathBuf)> = BTreeMap::new();
    for path in &inputs {
        let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        digests.push(FileDigest {
            path: path.clone(),
            sha256: sha256_hex(text.as_bytes()),
        });
        let report = io::parse_study_report(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let spec_digest = sha256_hex(serde_json::to_string(&report.spec).expect("spec serializes").as_bytes());
        let key = cell_key(&report.spec);
        match cells.get(&key) {
            Some((d, other)) if *d != spec_digest => {
                return Err(CliError::Input(format!(
                    "incompatible studies for cell {key}: {} and {} were run with different settings",
                    other.display(),
                    path.display()
                )));
            }
            Some(_) => {}
            None => {
                cells.insert(key, (spec_digest.clone(), path.clone()));
            }
        }
        by_digest.entry(spec_digest).or_insert(report);
    }
    let reports: Vec<StudyReport> = by_digest.into_values().collect();
    let rows = build_table(&reports);
    let mut dir = OutputDir::create(out)?;
    dir.write("table.csv", &table_to_csv(&rows))?;
    dir.write("plot.csv", &plot_csv(&rows))?;
    print!("{}", format_table(&rows));
    let manifest = RunManifest::new(Invocation::Report { inputs }, digests, absolute(dir.path()));
    dir.finish(manifest)
}

/// Exports a simulated dataset as `x.csv`, `y.csv` and `z.csv`.
pub fn run_generate(
    example: cmi_core::simdata::Example,
    scenario: cmi_core::simdata::Scenario,
    n: usize,
    seed: u64,
    out: &Path,
) -> CliResult<PathBuf> {
    let data = gen_example(example, scenario, n, seed)?;
    let mut dir = OutputDir::create(out)?;
    for (name, m) in [("x", &data.x), ("y", &data.y), ("z", &data.z)] {
        let header: Vec<String> = (1..=m.ncols()).map(|j| format!("{name}{j}")).collect();
        dir.write(&format!("{name}.csv"), &io::matrix_to_csv(m.view(), Some(&header)))?;
    }
    let manifest = RunManifest::new(
        Invocation::Generate { example, scenario, n, seed },
        Vec::new(),
        absolute(dir.path()),
    );
    dir.finish(manifest)
}

pub fn execute(invocation: Invocation, out: &Path) -> CliResult<PathBuf> {
    match invocation {
        Invocation::Test { data, config } => run_test(data, config, out),
        Invocation::Simulate { studies } => run_simulate(studies, out),
        Invocation::Report { inputs } => run_report(inputs, out),
        Invocation::Generate { example, scenario, n, seed } => run_generate(example, scenario, n, seed, out),
    }
}

/// Re-executes a recorded run into `out` and checks every artifact against
/// its recorded digest.
pub fn replay(manifest_path: &Path, out: Option<&Path>) -> CliResult<(&'static str, usize)> {
    let manifest = RunManifest::read(manifest_path)?;
    manifest.verify_inputs()?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| manifest.output_dir.clone());
    execute(manifest.invocation.clone(), &out)?;
    let mut mismatched = Vec::new();
    for artifact in &manifest.artifacts {
        let path = out.join(&artifact.path);
        let now = fs::read(&path).map(|b| sha256_hex(&b)).unwrap_or_default();
        if now != artifact.sha256 {
            mismatched.push(artifact.path.display().to_string());
        }
    }
    if mismatched.is_empty() {
        Ok((manifest.invocation.name(), manifest.artifacts.len()))
    } else {
        Err(CliError::Mismatch(format!(
            "replay differs from the recorded run in: {}",
            mismatched.join(", ")
        )))
    }
}
