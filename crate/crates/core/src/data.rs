use ndarray::{Array2, ArrayView1, Axis};

use crate::error::{check_finite, CmiError, Result};

/// Aligned samples of `(X, Y, Z)`, one observation per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub z: Array2<f64>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Array2<f64>, z: Array2<f64>) -> Result<Self> {
        let n = x.nrows();
        for (name, m) in [("y", &y), ("z", &z)] {
            if m.nrows() != n {
                return Err(CmiError::InvalidConfig(format!(
                    "row count mismatch: x has {n} rows, {name} has {}",
                    m.nrows()
                )));
            }
        }
        if n < 4 {
            return Err(CmiError::InvalidConfig(format!(
                "at least 4 observations are required, got {n}"
            )));
        }
        if x.ncols() == 0 || y.ncols() == 0 || z.ncols() == 0 {
            return Err(CmiError::InvalidConfig("x, y and z need at least one column each".into()));
        }
        check_finite(x.iter().chain(y.iter()).chain(z.iter()).copied(), "dataset")?;
        Ok(Dataset { x, y, z })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.x.ncols(), self.y.ncols(), self.z.ncols())
    }

    /// Rows in the given order.
    pub fn reorder(&self, order: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), order),
            y: self.y.select(Axis(0), order),
            z: self.z.select(Axis(0), order),
        }
    }

    pub fn z_row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.z.row(i)
    }
}
