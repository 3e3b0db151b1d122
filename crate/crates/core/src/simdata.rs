//! Simulation designs: jointly Gaussian `(Z, X)` with AR(1)-type covariance
//! `Σ_ij = ρ^|i-j|`, linear (A1) and quadratic (A2) responses, and the
//! closed-form conditional laws used by the oracle statistic.

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{CmiError, Result};
use crate::linalg;
use crate::seeds;

pub const NOISE_SD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Example {
    A1,
    A2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Null,
    Sparse,
    Dense,
}

impl std::str::FromStr for Example {
    type Err = CmiError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a1" => Ok(Example::A1),
            "a2" => Ok(Example::A2),
            _ => Err(CmiError::InvalidConfig(format!("unknown example `{s}` (a1 or a2)"))),
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = CmiError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "null" => Ok(Scenario::Null),
            "sparse" => Ok(Scenario::Sparse),
            "dense" => Ok(Scenario::Dense),
            _ => Err(CmiError::InvalidConfig(format!(
                "unknown scenario `{s}` (null, sparse or dense)"
            ))),
        }
    }
}

impl std::fmt::Display for Example {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Example::A1 => "a1",
            Example::A2 => "a2",
        })
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scenario::Null => "null",
            Scenario::Sparse => "sparse",
            Scenario::Dense => "dense",
        })
    }
}

/// Jointly Gaussian `(Z, X)`; `Z` occupies the first `z_dim` coordinates.
#[derive(Debug, Clone)]
pub struct GaussianDesign {
    z_dim: usize,
    x_dim: usize,
    covariance: Array2<f64>,
    cholesky: Array2<f64>,
    /// `Σ_XZ Σ_ZZ⁻¹`, so the conditional mean of `X` given `z` is `A z`.
    regression: Array2<f64>,
    conditional_covariance: Array2<f64>,
    conditional_cholesky: Array2<f64>,
}

impl GaussianDesign {
    pub fn ar1(z_dim: usize, x_dim: usize, rho: f64) -> Result<Self> {
        if z_dim == 0 || x_dim == 0 || !(rho.abs() < 1.0) {
            return Err(CmiError::InvalidConfig(format!(
                "AR(1) design needs positive dimensions and |rho| < 1, got ({z_dim}, {x_dim}, {rho})"
            )));
        }
        let d = z_dim + x_dim;
        let covariance =
            Array2::from_shape_fn((d, d), |(i, j)| rho.powi((i as i32 - j as i32).abs()));
        Self::from_covariance(z_dim, covariance)
    }

    /// The 25 + 25 dimensional design with `ρ = 0.3` used by both examples.
    pub fn standard() -> Self {
        Self::ar1(25, 25, 0.3).expect("valid design")
    }

    pub fn from_covariance(z_dim: usize, covariance: Array2<f64>) -> Result<Self> {
        let d = covariance.nrows();
        if z_dim == 0 || z_dim >= d {
            return Err(CmiError::InvalidConfig("z block must be a proper sub-block".into()));
        }
        let x_dim = d - z_dim;
        let cholesky = linalg::cholesky(covariance.view())?;
        let s_zz = covariance.slice(s![..z_dim, ..z_dim]);
        let s_xz = covariance.slice(s![z_dim.., ..z_dim]);
        let s_xx = covariance.slice(s![z_dim.., z_dim..]);
        let l_zz = linalg::cholesky(s_zz)?;
        // rows of A solve Σ_ZZ a_i = (Σ_XZ)_i since Σ_ZZ is symmetric
        let mut regression = Array2::<f64>::zeros((x_dim, z_dim));
        for (i, row) in s_xz.rows().into_iter().enumerate() {
            regression
                .row_mut(i)
                .assign(&linalg::cholesky_solve(l_zz.view(), row));
        }
        let conditional_covariance = &s_xx - &regression.dot(&s_xz.t());
        let conditional_covariance =
            (&conditional_covariance + &conditional_covariance.t()) * 0.5;
        let conditional_cholesky = linalg::cholesky(conditional_covariance.view())?;
        Ok(GaussianDesign {
            z_dim,
            x_dim,
            covariance,
            cholesky,
            regression,
            conditional_covariance,
            conditional_cholesky,
        })
    }

    pub fn z_dim(&self) -> usize {
        self.z_dim
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn covariance(&self) -> &Array2<f64> {
        &self.covariance
    }

    pub fn cholesky(&self) -> &Array2<f64> {
        &self.cholesky
    }

    pub fn x_covariance(&self) -> Array2<f64> {
        self.covariance.slice(s![self.z_dim.., self.z_dim..]).to_owned()
    }

    pub fn conditional_covariance(&self) -> &Array2<f64> {
        &self.conditional_covariance
    }

    pub fn conditional_mean(&self, z: ArrayView1<f64>) -> Array1<f64> {
        self.regression.dot(&z)
    }

    /// One `(z, x)` draw from the standard normal vector stream `rng`.
    fn draw_joint(&self, rng: &mut impl Rng) -> (Array1<f64>, Array1<f64>) {
        let d = self.z_dim + self.x_dim;
        let w: Array1<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let v = self.cholesky.dot(&w);
        (v.slice(s![..self.z_dim]).to_owned(), v.slice(s![self.z_dim..]).to_owned())
    }

    /// Exact draws from the law of `X` given `Z = z`; draw `m` uses the
    /// stream keyed by `(seed, m)`.
    pub fn sample_conditional(&self, z: ArrayView1<f64>, draws: usize, seed: u64) -> Array2<f64> {
        self.sample_conditional_shifted(z, draws, seed, None)
    }

    pub(crate) fn sample_conditional_shifted(
        &self,
        z: ArrayView1<f64>,
        draws: usize,
        seed: u64,
        shift: Option<&Array1<f64>>,
    ) -> Array2<f64> {
        let mut mean = self.conditional_mean(z);
        if let Some(shift) = shift {
            mean += shift;
        }
        let mut out = Array2::<f64>::zeros((draws, self.x_dim));
        let l = &self.conditional_cholesky;
        for (m, mut row) in out.rows_mut().into_iter().enumerate() {
            let mut rng = seeds::stream(seed, &[m as u64]);
            let w: Vec<f64> = (0..self.x_dim).map(|_| rng.sample(StandardNormal)).collect();
            for i in 0..self.x_dim {
                let mut acc = mean[i];
                for k in 0..=i {
                    acc += l[[i, k]] * w[k];
                }
                row[i] = acc;
            }
        }
        out
    }
}

/// Regression coefficients of a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSpec {
    pub beta_z: Array1<f64>,
    pub beta_x: Array1<f64>,
}

impl CoefficientSpec {
    pub fn for_scenario(example: Example, scenario: Scenario, z_dim: usize, x_dim: usize) -> Self {
        let mut beta_z = Array1::<f64>::zeros(z_dim);
        beta_z.slice_mut(s![..2.min(z_dim)]).fill(1.0);
        let mut beta_x = Array1::<f64>::zeros(x_dim);
        let mut fill = |count: usize, value: f64| beta_x.slice_mut(s![..count.min(x_dim)]).fill(value);
        match (example, scenario) {
            (_, Scenario::Null) => {}
            (Example::A1, Scenario::Sparse) => fill(2, 0.2 / 2f64.sqrt()),
            (Example::A1, Scenario::Dense) => fill(x_dim, 0.2 / (x_dim as f64).sqrt()),
            (Example::A2, Scenario::Sparse) => fill(5, 10f64.powf(-0.5)),
            (Example::A2, Scenario::Dense) => fill(12, 24f64.powf(-0.5)),
        }
        CoefficientSpec { beta_z, beta_x }
    }
}

/// A simulation model: design, response shape and coefficients.
#[derive(Debug, Clone)]
pub struct SimModel {
    pub example: Example,
    pub scenario: Scenario,
    pub design: GaussianDesign,
    pub coefficients: CoefficientSpec,
}

impl SimModel {
    pub fn new(example: Example, scenario: Scenario) -> Self {
        Self::with_design(example, scenario, GaussianDesign::standard())
    }

    pub fn with_design(example: Example, scenario: Scenario, design: GaussianDesign) -> Self {
        let coefficients = CoefficientSpec::for_scenario(example, scenario, design.z_dim(), design.x_dim());
        SimModel {
            example,
            scenario,
            design,
            coefficients,
        }
    }

    /// Noise-free response `E[Y | X = x, Z = z]`.
    pub fn signal(&self, x: ArrayView1<f64>, z: ArrayView1<f64>) -> f64 {
        let bx = self.coefficients.beta_x.dot(&x);
        let base = self.coefficients.beta_z.dot(&z);
        match self.example {
            Example::A1 => base + bx,
            Example::A2 => base + bx * bx,
        }
    }

    /// `n` i.i.d. observations; observation `i` is a pure function of
    /// `(seed, i)`.
    pub fn generate(&self, n: usize, seed: u64) -> Result<Dataset> {
        let (dz, dx) = (self.design.z_dim(), self.design.x_dim());
        let mut x = Array2::<f64>::zeros((n, dx));
        let mut y = Array2::<f64>::zeros((n, 1));
        let mut z = Array2::<f64>::zeros((n, dz));
        for i in 0..n {
            let mut rng = seeds::stream(seed, &[seeds::tag::DATA, i as u64]);
            let (zi, xi) = self.design.draw_joint(&mut rng);
            let eps: f64 = rng.sample::<f64, _>(StandardNormal) * NOISE_SD;
            y[[i, 0]] = self.signal(xi.view(), zi.view()) + eps;
            x.row_mut(i).assign(&xi);
            z.row_mut(i).assign(&zi);
        }
        Dataset::new(x, y, z)
    }

    /// True conditional mean `g_Y(z) = E[Y | Z = z]`.
    pub fn g_y(&self, z: ArrayView1<f64>) -> f64 {
        let mu = self.design.conditional_mean(z);
        let b = &self.coefficients.beta_x;
        let linear = b.dot(&mu);
        let base = self.coefficients.beta_z.dot(&z);
        match self.example {
            Example::A1 => base + linear,
            Example::A2 => {
                let c = self.design.conditional_covariance();
                base + linear * linear + b.dot(&c.dot(b))
            }
        }
    }
}

/// Convenience wrapper over [`SimModel::generate`].
pub fn gen_example(example: Example, scenario: Scenario, n: usize, seed: u64) -> Result<Dataset> {
    if n < 4 {
        return Err(CmiError::InvalidConfig(format!("need n >= 4, got {n}")));
    }
    SimModel::new(example, scenario).generate(n, seed)
}
