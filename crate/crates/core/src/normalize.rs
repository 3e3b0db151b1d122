use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{CmiError, Result};

/// Per-coordinate affine standardization `(v - mean) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn new(mean: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if mean.len() != scale.len() {
            return Err(CmiError::DimensionMismatch {
                context: "normalizer scale length",
                expected: mean.len(),
                got: scale.len(),
            });
        }
        if mean.is_empty() {
            return Err(CmiError::InvalidConfig("normalizer has no coordinates".into()));
        }
        if mean.iter().any(|m| !m.is_finite()) || scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(CmiError::InvalidConfig(
                "normalizer means must be finite and scales positive".into(),
            ));
        }
        Ok(Standardizer { mean, scale })
    }

    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Column means and population standard deviations; a constant column
    /// keeps scale 1 so it maps to zero.
    pub fn fit(data: ArrayView2<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(CmiError::InvalidConfig("cannot fit a normalizer on an empty matrix".into()));
        }
        let mut mean = data.mean_axis(Axis(0)).expect("non-empty").to_vec();
        // exact mean for constant columns, so centering yields exact zeros
        for (j, m) in mean.iter_mut().enumerate() {
            let col = data.column(j);
            if col.iter().all(|&v| v == col[0]) {
                *m = col[0];
            }
        }
        let scale = data
            .std_axis(Axis(0), 0.0)
            .iter()
            .map(|&s| if s > 1e-12 { s } else { 1.0 })
            .collect();
        Self::new(mean, scale)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn apply(&self, data: ArrayView2<f64>) -> Array2<f64> {
        let mut out = data.to_owned();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn invert(&self, data: ArrayView2<f64>) -> Array2<f64> {
        let mut out = data.to_owned();
        self.invert_in_place(&mut out);
        out
    }

    pub fn invert_in_place(&self, data: &mut Array2<f64>) {
        for mut row in data.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = *v * s + m;
            }
        }
    }
}
