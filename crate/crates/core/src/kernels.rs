//! Gaussian and Laplacian kernels, Gram matrices and the median heuristic.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, CmiError, Result};
use crate::seeds;

/// Largest point set the median heuristic works on before subsampling.
pub const MEDIAN_HEURISTIC_CAP: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Gaussian,
    Laplacian,
}

impl KernelFamily {
    /// The distance the family is built on: ℓ₂ for Gaussian,
    /// ℓ₁ for Laplacian.
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            KernelFamily::Gaussian => sq_l2(a, b).sqrt(),
            KernelFamily::Laplacian => l1(a, b),
        }
    }
}

impl std::str::FromStr for KernelFamily {
    type Err = CmiError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(KernelFamily::Gaussian),
            "laplacian" => Ok(KernelFamily::Laplacian),
            other => Err(CmiError::InvalidConfig(format!(
                "unknown kernel family `{other}` (expected gaussian or laplacian)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: f64,
}

#[inline]
pub(crate) fn sq_l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub(crate) fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

impl KernelSpec {
    pub fn new(family: KernelFamily, bandwidth: f64) -> Result<Self> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(CmiError::InvalidConfig(format!(
                "kernel bandwidth must be positive and finite, got {bandwidth}"
            )));
        }
        Ok(KernelSpec { family, bandwidth })
    }

    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, bandwidth)
    }

    pub fn laplacian(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::Laplacian, bandwidth)
    }

    /// Kernel value with shape and finiteness checks.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        if a.len() != b.len() {
            return Err(CmiError::DimensionMismatch {
                context: "kernel arguments",
                expected: a.len(),
                got: b.len(),
            });
        }
        check_finite(a.iter().chain(b).copied(), "kernel argument")?;
        Ok(self.eval_unchecked(a, b))
    }

    /// Kernel value on slices already known to agree in length and be finite.
    #[inline]
    pub fn eval_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Gaussian => {
                (-sq_l2(a, b) / (2.0 * self.bandwidth * self.bandwidth)).exp()
            }
            KernelFamily::Laplacian => (-l1(a, b) / self.bandwidth).exp(),
        }
    }

    pub fn eval_view(&self, a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
        match (a.as_slice(), b.as_slice()) {
            (Some(a), Some(b)) => self.eval(a, b),
            _ => self.eval(&a.to_vec(), &b.to_vec()),
        }
    }

    /// Gram matrix with entry (i, j) = k(A_i, B_j). Rows are computed in
    /// parallel, each with a fixed inner order.
    pub fn gram(&self, a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
        if a.ncols() != b.ncols() {
            return Err(CmiError::DimensionMismatch {
                context: "gram matrix column count",
                expected: a.ncols(),
                got: b.ncols(),
            });
        }
        check_finite(a.iter().chain(b.iter()).copied(), "gram matrix input")?;
        let a = a.as_standard_layout();
        let b = b.as_standard_layout();
        let (p, q) = (a.nrows(), b.nrows());
        let mut out = Array2::<f64>::zeros((p, q));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(a.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(mut row, ai)| {
                let ai = ai.as_slice().expect("standard layout");
                for (entry, bj) in row.iter_mut().zip(b.axis_iter(Axis(0))) {
                    *entry = self.eval_unchecked(ai, bj.as_slice().expect("standard layout"));
                }
            });
        Ok(out)
    }
}

/// Median heuristic with the default subsampling seed.
pub fn median_heuristic(points: ArrayView2<f64>, family: KernelFamily) -> Result<f64> {
    median_heuristic_seeded(points, family, 0)
}

/// Lower median of all pairwise distances (ℓ₂ for Gaussian, ℓ₁ for
/// Laplacian). Point sets larger than [`MEDIAN_HEURISTIC_CAP`] are first
/// subsampled without replacement using `seed`.
pub fn median_heuristic_seeded(
    points: ArrayView2<f64>,
    family: KernelFamily,
    seed: u64,
) -> Result<f64> {
    let p = points.nrows();
    if p < 2 {
        return Err(CmiError::InvalidConfig(format!(
            "median heuristic needs at least 2 points, got {p}"
        )));
    }
    check_finite(points.iter().copied(), "median heuristic input")?;
    let rows: Vec<Vec<f64>> = if p > MEDIAN_HEURISTIC_CAP {
        let mut rng = seeds::stream(seed, &[seeds::tag::BANDWIDTH]);
        let mut picked = index::sample(&mut rng, p, MEDIAN_HEURISTIC_CAP).into_vec();
        picked.sort_unstable();
        picked.iter().map(|&i| points.row(i).to_vec()).collect()
    } else {
        points.axis_iter(Axis(0)).map(|r| r.to_vec()).collect()
    };

    let mut distances = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for (i, a) in rows.iter().enumerate() {
        for b in &rows[i + 1..] {
            distances.push(family.distance(a, b));
        }
    }
    let mid = (distances.len() - 1) / 2;
    let (_, median, _) = distances.select_nth_unstable_by(mid, f64::total_cmp);
    let median = *median;
    if median > 0.0 {
        return Ok(median);
    }
    // Ties at zero outnumber the rest: fall back to the positive distances.
    let mut positive: Vec<f64> = distances.into_iter().filter(|&d| d > 0.0).collect();
    if positive.is_empty() {
        return Err(CmiError::Degenerate("degenerate sample, zero bandwidth".into()));
    }
    let mid = (positive.len() - 1) / 2;
    let (_, median, _) = positive.select_nth_unstable_by(mid, f64::total_cmp);
    Ok(*median)
}
