//! CSV matrices and JSON record files.
//!
//! CSV: comma-delimited, decimal point, no thousands separators, one
//! optional header row (detected when every cell of the first row is
//! non-numeric). Values are written with the shortest representation that
//! parses back to the same `f64`, so a write/read cycle is exact.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bootstrap::TestResult;
use crate::data::Dataset;
use crate::error::{CmiError, Result};
use crate::harness::{StudyReport, REPORT_SCHEMA_VERSION};

pub const TEST_RECORD_SCHEMA_VERSION: u32 = 1;

/// A parsed CSV matrix and its header, if one was present.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvMatrix {
    pub header: Option<Vec<String>>,
    pub values: Array2<f64>,
}

fn parse_error(line: u64, column: usize, message: impl Into<String>) -> CmiError {
    CmiError::Parse {
        line: line as usize,
        column,
        message: message.into(),
    }
}

/// Parses CSV text into a matrix. Columns are 1-based in error messages.
pub fn parse_csv(text: &str) -> Result<CsvMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut header = None;
    let mut width: Option<usize> = None;
    let mut values = Vec::new();
    let mut rows = 0usize;
    for (index, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_error(line, 1, format!("unreadable CSV record: {e}"))
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(index as u64 + 1);
        if index == 0 && !record.is_empty() && record.iter().all(|c| c.parse::<f64>().is_err()) {
            header = Some(record.iter().map(str::to_owned).collect());
            width = Some(record.len());
            continue;
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(parse_error(
                    line,
                    w.min(record.len()) + 1,
                    format!("expected {w} columns, found {}", record.len()),
                ));
            }
            _ => {}
        }
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_error(line, c + 1, format!("not a number: `{cell}`")))?;
            if !v.is_finite() {
                return Err(parse_error(line, c + 1, format!("non-finite value `{cell}`")));
            }
            values.push(v);
        }
        rows += 1;
    }
    let cols = width.unwrap_or(0);
    if rows == 0 || cols == 0 {
        return Err(parse_error(1, 1, "no numeric rows"));
    }
    let values = Array2::from_shape_vec((rows, cols), values).expect("rectangular by construction");
    Ok(CsvMatrix { header, values })
}

pub fn read_csv(path: &Path) -> Result<CsvMatrix> {
    let text = fs::read_to_string(path)?;
    parse_csv(&text)
}

pub fn matrix_to_csv(m: ArrayView2<f64>, header: Option<&[String]>) -> String {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&h.join(","));
        out.push('\n');
    }
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn column_names(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|j| format!("{prefix}{j}")).collect()
}

/// Writes `x.csv`, `y.csv` and `z.csv` (with `x1, x2, …` style headers) into
/// `dir` and returns their paths.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<[std::path::PathBuf; 3]> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (name, m) in [("x", &data.x), ("y", &data.y), ("z", &data.z)] {
        let path = dir.join(format!("{name}.csv"));
        fs::write(&path, matrix_to_csv(m.view(), Some(&column_names(name, m.ncols()))))?;
        paths.push(path);
    }
    Ok(paths.try_into().expect("three paths"))
}

/// Machine-readable form of a single test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestRecord {
    pub schema_version: u32,
    pub result: TestResult,
}

impl TestRecord {
    pub fn new(result: TestResult) -> Self {
        TestRecord {
            schema_version: TEST_RECORD_SCHEMA_VERSION,
            result,
        }
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("records serialize");
    s.push('\n');
    s
}

fn from_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        let full = e.to_string();
        let message = full.rsplit_once(" at line ").map_or(full.as_str(), |(m, _)| m).to_string();
        CmiError::Parse {
            line: e.line(),
            column: e.column(),
            message,
        }
    })
}

fn check_version(found: u32, expected: u32, what: &str) -> Result<()> {
    if found != expected {
        return Err(CmiError::Format(format!(
            "{what} schema version {found} is not supported (expected {expected})"
        )));
    }
    Ok(())
}

pub fn parse_test_record(text: &str) -> Result<TestRecord> {
    let rec: TestRecord = from_json(text)?;
    check_version(rec.schema_version, TEST_RECORD_SCHEMA_VERSION, "test record")?;
    Ok(rec)
}

pub fn parse_study_report(text: &str) -> Result<StudyReport> {
    let rep: StudyReport = from_json(text)?;
    check_version(rep.schema_version, REPORT_SCHEMA_VERSION, "study report")?;
    if rep.replications.len() != rep.spec.replications {
        return Err(CmiError::Format(format!(
            "study report lists {} replications but its spec asks for {}",
            rep.replications.len(),
            rep.spec.replications
        )));
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn header_detection() {
        let m = parse_csv("a,b\n1,2\n3.5,-4e-3\n").unwrap();
        assert_eq!(m.header, Some(vec!["a".to_string(), "b".to_string()]));
        assert_eq!(m.values, array![[1.0, 2.0], [3.5, -4e-3]]);
        let m = parse_csv("1, 2\n 3 ,4").unwrap();
        assert!(m.header.is_none());
        assert_eq!(m.values, array![[1.0, 2.0], [3.0, 4.0]]);
    }

    #[test]
    fn errors_carry_positions() {
        match parse_csv("1,2\n3,x\n").unwrap_err() {
            CmiError::Parse { line, column, .. } => assert_eq!((line, column), (2, 2)),
            e => panic!("{e}"),
        }
        match parse_csv("h1,h2\n1,2\n3\n").unwrap_err() {
            CmiError::Parse { line, column, .. } => assert_eq!((line, column), (3, 2)),
            e => panic!("{e}"),
        }
        assert!(parse_csv("").is_err());
        assert!(parse_csv("a,b\n").is_err());
        assert!(parse_csv("1,NaN\n").is_err());
        assert!(parse_csv("1,1,000\n2,3\n").is_err());
    }

    #[test]
    fn mixed_first_row_is_data_error() {
        assert!(parse_csv("a,1\n2,3\n").is_err());
    }

    #[test]
    fn exact_round_trip() {
        let m = array![[0.1, -1.0 / 3.0], [1e-300, 12345.678901234567]];
        let text = matrix_to_csv(m.view(), Some(&["p".into(), "q".into()]));
        assert_eq!(parse_csv(&text).unwrap().values, m);
    }

    #[test]
    fn record_version_checked() {
        let text = r#"{"schema_version": 9, "result": {}}"#;
        assert!(parse_test_record(text).is_err());
        assert!(matches!(parse_test_record("{"), Err(CmiError::Parse { .. })));
    }
}
