//! The cross-fitted kernel U-statistic and its exact population counterpart.
//!
//! For observations `j ≠ k` in the same fold the statistic kernel is
//!
//! ```text
//! H_jk = Û(X_j, X_k) · V̂(Y_j, Y_k) · K_Z(Z_j, Z_k)
//! Û    = K_X(X_j,X_k) − M⁻¹Σ_m K_X(X_j, X̂_k⁽ᵐ⁾) − M⁻¹Σ_m K_X(X_k, X̂_j⁽ᵐ⁾)
//!        + M⁻¹Σ_m K_X(X̂_j⁽ᵐ⁾, X̂_k⁽ᵐ⁾)
//! V̂    = (Y_j − ĝ(Z_j))ᵀ (Y_k − ĝ(Z_k))
//! ```
//!
//! where the generated draws `X̂` and the mean estimate `ĝ` for an index come
//! from models fitted on the opposite fold. The fourth term of `Û` pairs the
//! `m`-th draws of `j` and `k`; it is a single sum over `m`, not a double sum.

use std::collections::BTreeMap;
use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{CmiError, Result};
use crate::kernels::KernelSpec;

/// Two contiguous folds: `[0, ⌊n/2⌋)` and `[⌊n/2⌋, n)` (zero-based).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub n: usize,
    pub fold1: Range<usize>,
    pub fold2: Range<usize>,
}

impl FoldAssignment {
    pub fn fold(&self, s: usize) -> Range<usize> {
        match s {
            0 => self.fold1.clone(),
            1 => self.fold2.clone(),
            _ => panic!("fold index {s} out of range"),
        }
    }

    /// The fold whose models score fold `s`: models for fold `s` are trained
    /// on this range.
    pub fn training_fold(&self, s: usize) -> Range<usize> {
        self.fold(1 - s)
    }

    pub fn sizes(&self) -> [usize; 2] {
        [self.fold1.len(), self.fold2.len()]
    }

    pub fn fold_of(&self, i: usize) -> usize {
        if self.fold1.contains(&i) {
            0
        } else {
            1
        }
    }
}

pub fn split_folds(n: usize) -> Result<FoldAssignment> {
    if n < 4 {
        return Err(CmiError::InvalidConfig(format!(
            "two-fold splitting needs n >= 4, got {n}"
        )));
    }
    let half = n / 2;
    Ok(FoldAssignment {
        n,
        fold1: 0..half,
        fold2: half..n,
    })
}

pub fn u_hat(
    kx: &KernelSpec,
    x_j: &[f64],
    x_k: &[f64],
    gen_j: ArrayView2<f64>,
    gen_k: ArrayView2<f64>,
) -> Result<f64> {
    let m = gen_j.nrows();
    if gen_k.nrows() != m {
        return Err(CmiError::DimensionMismatch {
            context: "generated draws per observation",
            expected: m,
            got: gen_k.nrows(),
        });
    }
    if m == 0 {
        return Err(CmiError::InvalidConfig("at least one generated draw is required".into()));
    }
    let mut s_jk = 0.0;
    let mut s_kj = 0.0;
    let mut s_gg = 0.0;
    for (gj, gk) in gen_j.rows().into_iter().zip(gen_k.rows()) {
        let gj = gj.to_vec();
        let gk = gk.to_vec();
        s_jk += kx.eval(x_j, &gk)?;
        s_kj += kx.eval(x_k, &gj)?;
        s_gg += kx.eval(&gj, &gk)?;
    }
    let mf = m as f64;
    Ok(kx.eval(x_j, x_k)? - s_jk / mf - s_kj / mf + s_gg / mf)
}

pub fn v_hat(y_j: &[f64], y_k: &[f64], ghat_j: &[f64], ghat_k: &[f64]) -> Result<f64> {
    let d = y_j.len();
    for (what, len) in [("y_k", y_k.len()), ("ghat_j", ghat_j.len()), ("ghat_k", ghat_k.len())] {
        if len != d {
            return Err(CmiError::DimensionMismatch {
                context: what_context(what),
                expected: d,
                got: len,
            });
        }
    }
    Ok((0..d).map(|i| (y_j[i] - ghat_j[i]) * (y_k[i] - ghat_k[i])).sum())
}

fn what_context(what: &str) -> &'static str {
    match what {
        "y_k" => "response width",
        "ghat_j" | "ghat_k" => "mean estimate width",
        _ => "vector width",
    }
}

/// Per-fold statistic kernel matrices `H⁽ˢ⁾`. The diagonal is stored but
/// never enters the statistic or its bootstrap.
#[derive(Debug, Clone, PartialEq)]
pub struct StatKernelMatrices {
    pub folds: FoldAssignment,
    pub h: [Array2<f64>; 2],
}

impl StatKernelMatrices {
    pub fn new(folds: FoldAssignment, h: [Array2<f64>; 2]) -> Result<Self> {
        for (s, m) in h.iter().enumerate() {
            let f = folds.fold(s).len();
            if m.dim() != (f, f) {
                return Err(CmiError::DimensionMismatch {
                    context: "statistic kernel matrix size",
                    expected: f,
                    got: m.nrows(),
                });
            }
            if f < 2 {
                return Err(CmiError::InvalidConfig("each fold needs at least two observations".into()));
            }
        }
        Ok(StatKernelMatrices { folds, h })
    }

    pub fn n(&self) -> usize {
        self.folds.n
    }

    /// `1 / (f(f − 1))` for each fold's actual size `f`.
    pub fn normalizers(&self) -> [f64; 2] {
        let w = |m: &Array2<f64>| {
            let f = m.nrows() as f64;
            1.0 / (f * (f - 1.0))
        };
        [w(&self.h[0]), w(&self.h[1])]
    }
}

/// Everything the statistic needs from the nuisance models, per observation
/// (indexed like the dataset rows).
#[derive(Debug, Clone)]
pub struct NuisanceScores {
    /// `M × d_X` generated draws per observation.
    pub generated: Vec<Array2<f64>>,
    /// `n × d_Y` conditional mean estimates.
    pub mean: Array2<f64>,
}

/// `H` for one fold given the fold's rows.
pub fn fold_kernel_matrix(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    z: ArrayView2<f64>,
    generated: &[Array2<f64>],
    mean: ArrayView2<f64>,
    kx: &KernelSpec,
    kz: &KernelSpec,
) -> Result<Array2<f64>> {
    let f = x.nrows();
    if generated.len() != f || y.nrows() != f || z.nrows() != f || mean.nrows() != f {
        return Err(CmiError::DimensionMismatch {
            context: "fold rows (x, y, z, draws, mean)",
            expected: f,
            got: generated.len().min(y.nrows()).min(z.nrows()).min(mean.nrows()),
        });
    }
    if mean.ncols() != y.ncols() {
        return Err(CmiError::DimensionMismatch {
            context: "mean estimate width",
            expected: y.ncols(),
            got: mean.ncols(),
        });
    }
    let m = generated.first().map(|g| g.nrows()).unwrap_or(0);
    if m == 0 || generated.iter().any(|g| g.nrows() != m || g.ncols() != x.ncols()) {
        return Err(CmiError::InvalidConfig(
            "every observation needs the same positive number of generated draws of width d_X".into(),
        ));
    }
    let x = x.as_standard_layout();
    let z = z.as_standard_layout();
    let gen: Vec<Array2<f64>> = generated.iter().map(|g| g.as_standard_layout().to_owned()).collect();
    let resid: Array2<f64> = &y - &mean;
    let mf = m as f64;

    // a[j][k] = M⁻¹ Σ_m K_X(x_j, x̂_k⁽ᵐ⁾)
    let a_rows: Vec<Vec<f64>> = (0..f)
        .into_par_iter()
        .map(|j| {
            let xj = x.row(j);
            let xj = xj.as_slice().expect("standard layout");
            gen.iter()
                .map(|gk| {
                    gk.rows()
                        .into_iter()
                        .map(|r| kx.eval_unchecked(xj, r.as_slice().expect("standard layout")))
                        .sum::<f64>()
                        / mf
                })
                .collect()
        })
        .collect();

    let rows: Vec<Vec<f64>> = (0..f)
        .into_par_iter()
        .map(|j| {
            let xj = x.row(j);
            let xj = xj.as_slice().expect("standard layout");
            let zj = z.row(j);
            let zj = zj.as_slice().expect("standard layout");
            let gj = &gen[j];
            (0..f)
                .map(|k| {
                    let xk = x.row(k);
                    let zk = z.row(k);
                    let paired: f64 = gj
                        .rows()
                        .into_iter()
                        .zip(gen[k].rows())
                        .map(|(a, b)| {
                            kx.eval_unchecked(
                                a.as_slice().expect("standard layout"),
                                b.as_slice().expect("standard layout"),
                            )
                        })
                        .sum::<f64>()
                        / mf;
                    let u = kx.eval_unchecked(xj, xk.as_slice().expect("standard layout"))
                        - a_rows[j][k]
                        - a_rows[k][j]
                        + paired;
                    let v = resid.row(j).dot(&resid.row(k));
                    u * v * kz.eval_unchecked(zj, zk.as_slice().expect("standard layout"))
                })
                .collect()
        })
        .collect();
    let mut h = Array2::<f64>::zeros((f, f));
    for (j, row) in rows.into_iter().enumerate() {
        for (k, v) in row.into_iter().enumerate() {
            h[[j, k]] = v;
        }
    }
    // exact symmetry regardless of summation order
    for j in 0..f {
        for k in j + 1..f {
            let v = 0.5 * (h[[j, k]] + h[[k, j]]);
            h[[j, k]] = v;
            h[[k, j]] = v;
        }
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(CmiError::NonFinite("statistic kernel matrix"));
    }
    Ok(h)
}

/// Assembles `H⁽¹⁾, H⁽²⁾` with shared kernels for both folds.
pub fn stat_kernel_matrices(
    data: &Dataset,
    folds: &FoldAssignment,
    scores: &NuisanceScores,
    kx: &KernelSpec,
    kz: &KernelSpec,
) -> Result<StatKernelMatrices> {
    stat_kernel_matrices_per_fold(data, folds, scores, [kx, kx], [kz, kz])
}

pub fn stat_kernel_matrices_per_fold(
    data: &Dataset,
    folds: &FoldAssignment,
    scores: &NuisanceScores,
    kx: [&KernelSpec; 2],
    kz: [&KernelSpec; 2],
) -> Result<StatKernelMatrices> {
    if folds.n != data.len() {
        return Err(CmiError::DimensionMismatch {
            context: "fold assignment size",
            expected: data.len(),
            got: folds.n,
        });
    }
    if scores.generated.len() != data.len() {
        return Err(CmiError::InvalidConfig(format!(
            "generated draws missing: have {} of {} observations",
            scores.generated.len(),
            data.len()
        )));
    }
    let build = |s: usize| {
        let r = folds.fold(s);
        fold_kernel_matrix(
            data.x.slice(ndarray::s![r.clone(), ..]),
            data.y.slice(ndarray::s![r.clone(), ..]),
            data.z.slice(ndarray::s![r.clone(), ..]),
            &scores.generated[r.clone()],
            scores.mean.slice(ndarray::s![r, ..]),
            kx[s],
            kz[s],
        )
    };
    let (h1, h2) = rayon::join(|| build(0), || build(1));
    StatKernelMatrices::new(folds.clone(), [h1?, h2?])
}

/// `Σ_{j≠k} H_jk e_j e_k`, or the plain off-diagonal sum when `e` is `None`.
/// Both cases share one summation order, so unit multipliers reproduce the
/// plain sum bit for bit.
pub(crate) fn off_diagonal_form(h: &Array2<f64>, e: Option<&[f64]>) -> f64 {
    let mut total = 0.0;
    for (j, row) in h.rows().into_iter().enumerate() {
        let mut row_sum = 0.0;
        match e {
            None => {
                for (k, v) in row.iter().enumerate() {
                    if j != k {
                        row_sum += v;
                    }
                }
                total += row_sum;
            }
            Some(e) => {
                for (k, v) in row.iter().enumerate() {
                    if j != k {
                        row_sum += v * e[k];
                    }
                }
                total += e[j] * row_sum;
            }
        }
    }
    total
}

/// Average over the two folds of the off-diagonal mean of `H⁽ˢ⁾`.
pub fn t_hat(h: &StatKernelMatrices) -> f64 {
    let w = h.normalizers();
    0.5 * (w[0] * off_diagonal_form(&h.h[0], None) + w[1] * off_diagonal_form(&h.h[1], None))
}

/// Nuisance scores from known conditional laws: `mean_y(z)` for
/// `E[Y | Z = z]` and `sampler(z, M, seed)` for draws of `X | Z = z`.
/// Draws for row `i` use the seed `seed_for(i)`.
pub fn oracle_scores<G, S>(
    data: &Dataset,
    mean_y: G,
    sampler: S,
    draws: usize,
    seed_for: impl Fn(usize) -> u64 + Sync,
) -> Result<NuisanceScores>
where
    G: Fn(ArrayView1<f64>) -> Vec<f64> + Sync,
    S: Fn(ArrayView1<f64>, usize, u64) -> Array2<f64> + Sync,
{
    let n = data.len();
    let dy = data.y.ncols();
    let generated: Vec<Array2<f64>> = (0..n)
        .into_par_iter()
        .map(|i| sampler(data.z.row(i), draws, seed_for(i)))
        .collect();
    let mut mean = Array2::<f64>::zeros((n, dy));
    for i in 0..n {
        let g = mean_y(data.z.row(i));
        if g.len() != dy {
            return Err(CmiError::DimensionMismatch {
                context: "oracle mean width",
                expected: dy,
                got: g.len(),
            });
        }
        mean.row_mut(i).assign(&Array1::from(g));
    }
    Ok(NuisanceScores { generated, mean })
}

/// The statistic with the true conditional mean of `Y` and exact draws from
/// the law of `X | Z` in place of fitted models. Returns the kernel matrices
/// so callers can bootstrap them.
#[allow(clippy::too_many_arguments)]
pub fn t_oracle_matrices<G, S>(
    data: &Dataset,
    true_g: G,
    oracle_sampler: S,
    draws: usize,
    seed: u64,
    kx: &KernelSpec,
    kz: &KernelSpec,
) -> Result<StatKernelMatrices>
where
    G: Fn(ArrayView1<f64>) -> Vec<f64> + Sync,
    S: Fn(ArrayView1<f64>, usize, u64) -> Array2<f64> + Sync,
{
    let folds = split_folds(data.len())?;
    let scores = oracle_scores(data, true_g, oracle_sampler, draws, |i| {
        crate::seeds::derive(seed, &[crate::seeds::tag::ORACLE, i as u64])
    })?;
    stat_kernel_matrices(data, &folds, &scores, kx, kz)
}

pub fn t_oracle<G, S>(
    data: &Dataset,
    true_g: G,
    oracle_sampler: S,
    draws: usize,
    seed: u64,
    kx: &KernelSpec,
    kz: &KernelSpec,
) -> Result<f64>
where
    G: Fn(ArrayView1<f64>) -> Vec<f64> + Sync,
    S: Fn(ArrayView1<f64>, usize, u64) -> Array2<f64> + Sync,
{
    Ok(t_hat(&t_oracle_matrices(data, true_g, oracle_sampler, draws, seed, kx, kz)?))
}

/// One support point of a finite joint law of `(X, Y, Z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJointSpec {
    pub atoms: Vec<Atom>,
}

impl DiscreteJointSpec {
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        let first = atoms
            .first()
            .ok_or_else(|| CmiError::InvalidConfig("distribution has no atoms".into()))?;
        let dims = (first.x.len(), first.y.len(), first.z.len());
        for a in &atoms {
            if (a.x.len(), a.y.len(), a.z.len()) != dims {
                return Err(CmiError::InvalidConfig("atoms disagree in dimension".into()));
            }
            if !(a.p >= 0.0 && a.p.is_finite()) {
                return Err(CmiError::InvalidConfig(format!("invalid probability {}", a.p)));
            }
        }
        let total: f64 = atoms.iter().map(|a| a.p).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(CmiError::InvalidConfig(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(DiscreteJointSpec { atoms })
    }
}

fn bits_key(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Exact population measure `E[U(X,X′) V(Y,Y′) K_Z(Z,Z′)]` by enumerating
/// every pair of support points.
pub fn gamma_star_oracle(dist: &DiscreteJointSpec, kx: &KernelSpec, kz: &KernelSpec) -> Result<f64> {
    // group atoms by their z value
    let mut groups: BTreeMap<Vec<u64>, Vec<usize>> = BTreeMap::new();
    for (i, a) in dist.atoms.iter().enumerate() {
        groups.entry(bits_key(&a.z)).or_default().push(i);
    }
    let group_of: Vec<usize> = {
        let keys: Vec<&Vec<u64>> = groups.keys().collect();
        dist.atoms
            .iter()
            .map(|a| keys.iter().position(|k| **k == bits_key(&a.z)).expect("grouped"))
            .collect()
    };
    let members: Vec<&Vec<usize>> = groups.values().collect();
    let mass: Vec<f64> = members
        .iter()
        .map(|idx| idx.iter().map(|&i| dist.atoms[i].p).sum())
        .collect();
    let dy = dist.atoms[0].y.len();

    // g_Y per z group
    let g_y: Vec<Vec<f64>> = members
        .iter()
        .zip(&mass)
        .map(|(idx, &pz)| {
            (0..dy)
                .map(|d| idx.iter().map(|&i| dist.atoms[i].p * dist.atoms[i].y[d]).sum::<f64>() / pz)
                .collect()
        })
        .collect();

    // E[K_X(X, x') | Z = z_g] for every group g and support point x'
    let cond_kernel_mean = |g: usize, x: &[f64]| -> Result<f64> {
        let mut s = 0.0;
        for &i in members[g] {
            s += dist.atoms[i].p * kx.eval(&dist.atoms[i].x, x)?;
        }
        Ok(s / mass[g])
    };
    let na = dist.atoms.len();
    let ng = members.len();
    let mut m_table = vec![vec![0.0; na]; ng];
    for (g, row) in m_table.iter_mut().enumerate() {
        for (a, v) in row.iter_mut().enumerate() {
            *v = cond_kernel_mean(g, &dist.atoms[a].x)?;
        }
    }
    // E[K_X(X, X') | Z = z_g, Z' = z_h] with independent conditional copies
    let mut c_table = vec![vec![0.0; ng]; ng];
    for g in 0..ng {
        for h in 0..ng {
            let mut s = 0.0;
            for &j in members[h] {
                s += dist.atoms[j].p * m_table[g][j];
            }
            c_table[g][h] = s / mass[h];
        }
    }

    let mut total = 0.0;
    for (a, atom_a) in dist.atoms.iter().enumerate() {
        let ga = group_of[a];
        let ra: Vec<f64> = atom_a.y.iter().zip(&g_y[ga]).map(|(y, g)| y - g).collect();
        for (b, atom_b) in dist.atoms.iter().enumerate() {
            let gb = group_of[b];
            let u = kx.eval(&atom_a.x, &atom_b.x)? - m_table[ga][b] - m_table[gb][a] + c_table[ga][gb];
            let v: f64 = atom_b
                .y
                .iter()
                .zip(&g_y[gb])
                .zip(&ra)
                .map(|((y, g), r)| (y - g) * r)
                .sum();
            total += atom_a.p * atom_b.p * u * v * kz.eval(&atom_a.z, &atom_b.z)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Axis};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn lap(s: f64) -> KernelSpec {
        KernelSpec::laplacian(s).unwrap()
    }

    #[test]
    fn folds() {
        let f = split_folds(4).unwrap();
        assert_eq!((f.fold1.clone(), f.fold2.clone()), (0..2, 2..4));
        let f = split_folds(5).unwrap();
        assert_eq!((f.fold1.clone(), f.fold2.clone()), (0..2, 2..5));
        assert_eq!(split_folds(800).unwrap().sizes(), [400, 400]);
        assert!(split_folds(3).is_err());
        assert_eq!(f.training_fold(0), 2..5);
        assert_eq!(f.fold_of(3), 1);
    }

    #[test]
    fn u_hat_examples() {
        let k = lap(1.0);
        let gj = Array2::from_elem((3, 1), 0.2);
        let gk = Array2::from_elem((3, 1), -0.7);
        assert!(u_hat(&k, &[0.2], &[-0.7], gj.view(), gk.view()).unwrap().abs() < 1e-15);

        let v = u_hat(&k, &[0.0], &[1.0], array![[1.0]].view(), array![[0.0]].view()).unwrap();
        let e = (-1.0f64).exp();
        assert!((v - (e - 1.0 - 1.0 + e)).abs() < 1e-15);
        assert!((v + 1.26424).abs() < 1e-5);

        assert!(u_hat(&k, &[0.0], &[1.0], gj.view(), array![[0.0]].view()).is_err());
    }

    #[test]
    fn v_hat_examples() {
        assert_eq!(v_hat(&[1.0, 2.0], &[3.0, 4.0], &[1.0, 2.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(v_hat(&[1.0, 2.0], &[1.0, 2.0], &[0.0, 0.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert!((v_hat(&[-0.3], &[0.4], &[0.0], &[0.0]).unwrap() + 0.12).abs() < 1e-15);
        assert!(v_hat(&[1.0], &[1.0, 2.0], &[0.0], &[0.0]).is_err());
    }

    fn toy(n: usize, m: usize, seed: u64) -> (Dataset, NuisanceScores) {
        let mut rng = crate::seeds::stream(seed, &[]);
        let mut normal = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| rng.sample::<f64, _>(StandardNormal));
        let data = Dataset::new(normal(n, 2), normal(n, 2), normal(n, 3)).unwrap();
        let generated = (0..n).map(|_| normal(m, 2)).collect();
        let mean = normal(n, 2) * 0.3;
        (data, NuisanceScores { generated, mean })
    }

    /// Flat triple loop straight from the definition, sharing nothing with
    /// the matrix assembly.
    fn brute_force_t(data: &Dataset, s: &NuisanceScores, kx: &KernelSpec, kz: &KernelSpec) -> f64 {
        let folds = split_folds(data.len()).unwrap();
        let mut t = 0.0;
        for f in 0..2 {
            let r = folds.fold(f);
            let size = r.len() as f64;
            let mut acc = 0.0;
            for j in r.clone() {
                for k in r.clone() {
                    if j == k {
                        continue;
                    }
                    let xj = data.x.row(j).to_vec();
                    let xk = data.x.row(k).to_vec();
                    let m = s.generated[j].nrows();
                    let mut u = kx.eval(&xj, &xk).unwrap();
                    for mm in 0..m {
                        let gj = s.generated[j].row(mm).to_vec();
                        let gk = s.generated[k].row(mm).to_vec();
                        u -= kx.eval(&xj, &gk).unwrap() / m as f64;
                        u -= kx.eval(&xk, &gj).unwrap() / m as f64;
                        u += kx.eval(&gj, &gk).unwrap() / m as f64;
                    }
                    let mut v = 0.0;
                    for d in 0..data.y.ncols() {
                        v += (data.y[[j, d]] - s.mean[[j, d]]) * (data.y[[k, d]] - s.mean[[k, d]]);
                    }
                    let kzv = kz.eval(&data.z.row(j).to_vec(), &data.z.row(k).to_vec()).unwrap();
                    acc += u * v * kzv;
                }
            }
            t += acc / (size * (size - 1.0));
        }
        t / 2.0
    }

    #[test]
    fn matrices_match_brute_force() {
        for n in [6, 7] {
            let (data, scores) = toy(n, 4, n as u64);
            let kx = lap(1.3);
            let kz = KernelSpec::gaussian(0.9).unwrap();
            let folds = split_folds(n).unwrap();
            let h = stat_kernel_matrices(&data, &folds, &scores, &kx, &kz).unwrap();
            // entries against u_hat · v_hat · K_Z
            for s in 0..2 {
                let r = folds.fold(s);
                for (a, j) in r.clone().enumerate() {
                    for (b, k) in r.clone().enumerate() {
                        let u = u_hat(
                            &kx,
                            &data.x.row(j).to_vec(),
                            &data.x.row(k).to_vec(),
                            scores.generated[j].view(),
                            scores.generated[k].view(),
                        )
                        .unwrap();
                        let v = v_hat(
                            &data.y.row(j).to_vec(),
                            &data.y.row(k).to_vec(),
                            &scores.mean.row(j).to_vec(),
                            &scores.mean.row(k).to_vec(),
                        )
                        .unwrap();
                        let z = kz.eval(&data.z.row(j).to_vec(), &data.z.row(k).to_vec()).unwrap();
                        assert!((h.h[s][[a, b]] - u * v * z).abs() < 1e-12);
                    }
                }
            }
            assert!((t_hat(&h) - brute_force_t(&data, &scores, &kx, &kz)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_residuals_or_exact_draws_give_zero() {
        let (data, mut scores) = toy(8, 3, 1);
        let k = lap(1.0);
        let folds = split_folds(8).unwrap();
        let mut exact = scores.clone();
        exact.mean = data.y.clone();
        let h = stat_kernel_matrices(&data, &folds, &exact, &k, &k).unwrap();
        assert!(h.h.iter().all(|m| m.iter().all(|&v| v == 0.0)));
        assert_eq!(t_hat(&h), 0.0);

        scores.generated = (0..8)
            .map(|i| data.x.row(i).insert_axis(Axis(0)).to_owned())
            .collect();
        let h = stat_kernel_matrices(&data, &folds, &scores, &k, &k).unwrap();
        assert!(h.h.iter().all(|m| m.iter().all(|&v| v.abs() < 1e-15)));
    }

    #[test]
    fn missing_draws_rejected() {
        let (data, mut scores) = toy(6, 2, 2);
        scores.generated.pop();
        let k = lap(1.0);
        assert!(stat_kernel_matrices(&data, &split_folds(6).unwrap(), &scores, &k, &k).is_err());
    }

    #[test]
    fn t_hat_constant_and_zero() {
        let folds = split_folds(7).unwrap();
        let h = StatKernelMatrices::new(
            folds.clone(),
            [Array2::from_elem((3, 3), 2.5), Array2::from_elem((4, 4), 2.5)],
        )
        .unwrap();
        assert!((t_hat(&h) - 2.5).abs() < 1e-15);
        let mut h0 = h.clone();
        h0.h[0].fill(0.0);
        h0.h[1].fill(0.0);
        h0.h[1][[2, 2]] = 9.0; // diagonal ignored
        assert_eq!(t_hat(&h0), 0.0);
    }

    #[test]
    fn t_hat_within_fold_permutation_invariant() {
        let (data, scores) = toy(10, 3, 3);
        let k = lap(1.0);
        let folds = split_folds(10).unwrap();
        let base = t_hat(&stat_kernel_matrices(&data, &folds, &scores, &k, &k).unwrap());
        let order: Vec<usize> = vec![4, 2, 0, 1, 3, 9, 5, 8, 6, 7];
        let permuted = data.reorder(&order);
        let pscores = NuisanceScores {
            generated: order.iter().map(|&i| scores.generated[i].clone()).collect(),
            mean: scores.mean.select(Axis(0), &order),
        };
        let moved = t_hat(&stat_kernel_matrices(&permuted, &folds, &pscores, &k, &k).unwrap());
        assert!((base - moved).abs() < 1e-12);
    }

    fn bit(v: f64) -> Vec<f64> {
        vec![v]
    }

    #[test]
    fn gamma_star_bits() {
        let k = lap(1.0);
        // X, Z independent fair bits
        let atoms = |y: fn(f64, f64) -> f64| {
            let mut out = vec![];
            for x in [0.0, 1.0] {
                for z in [0.0, 1.0] {
                    out.push(Atom { x: bit(x), y: bit(y(x, z)), z: bit(z), p: 0.25 });
                }
            }
            DiscreteJointSpec::new(out).unwrap()
        };
        let h0 = gamma_star_oracle(&atoms(|_, z| z), &k, &k).unwrap();
        assert!(h0.abs() < 1e-12);
        let h1 = gamma_star_oracle(&atoms(|x, _| x), &k, &k).unwrap();
        assert!(h1 > 1e-6);
        let constant = gamma_star_oracle(&atoms(|_, _| 3.0), &k, &k).unwrap();
        assert!(constant.abs() < 1e-15);
    }

    #[test]
    fn discrete_spec_validation() {
        let a = Atom { x: bit(0.0), y: bit(0.0), z: bit(0.0), p: 0.5 };
        assert!(DiscreteJointSpec::new(vec![a.clone()]).is_err());
        let b = Atom { x: vec![0.0, 1.0], ..a.clone() };
        assert!(DiscreteJointSpec::new(vec![a.clone(), b]).is_err());
        assert!(DiscreteJointSpec::new(vec![]).is_err());
        let c = Atom { p: 0.5, ..a.clone() };
        assert!(DiscreteJointSpec::new(vec![a, c]).is_ok());
    }

    #[test]
    fn oracle_zero_residual() {
        let (mut data, _) = toy(8, 2, 4);
        // Y is an exact function of Z
        for i in 0..8 {
            let s = data.z.row(i).sum();
            data.y.row_mut(i).fill(s);
        }
        let k = lap(1.0);
        let t = t_oracle(
            &data,
            |z| vec![z.sum(), z.sum()],
            |_, m, _| Array2::zeros((m, 2)),
            5,
            0,
            &k,
            &k,
        )
        .unwrap();
        assert_eq!(t, 0.0);
    }
}
