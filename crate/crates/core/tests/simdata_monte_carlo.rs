use cmi_core::seeds;
use cmi_core::simdata::{gen_example, Example, Scenario, SimModel};
use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

fn sample_cov(a: &Array2<f64>) -> Array2<f64> {
    let mean = a.mean_axis(Axis(0)).unwrap();
    let c = a - &mean;
    c.t().dot(&c) / (a.nrows() as f64 - 1.0)
}

#[test]
fn null_residual_uncorrelated_with_x() {
    let data = gen_example(Example::A1, Scenario::Null, 100_000, 1).unwrap();
    let resid: Array1<f64> = data.y.column(0).to_owned() - &(data.z.column(0).to_owned() + data.z.column(1));
    let r = &resid - resid.mean().unwrap();
    let rs = r.dot(&r).sqrt();
    for j in 0..data.x.ncols() {
        let x = data.x.column(j).to_owned();
        let xc = &x - x.mean().unwrap();
        let corr = r.dot(&xc) / (rs * xc.dot(&xc).sqrt());
        assert!(corr.abs() < 0.01, "coordinate {j}: correlation {corr}");
    }
}

#[test]
fn joint_covariance_matches_ar1() {
    let data = gen_example(Example::A1, Scenario::Null, 100_000, 2).unwrap();
    let mut joint = Array2::zeros((data.len(), 50));
    joint.slice_mut(s![.., ..25]).assign(&data.z);
    joint.slice_mut(s![.., 25..]).assign(&data.x);
    let cov = sample_cov(&joint);
    assert!((cov[[0, 1]] - 0.3).abs() < 0.01, "{}", cov[[0, 1]]);
    assert!((cov[[24, 25]] - 0.3).abs() < 0.01, "{}", cov[[24, 25]]);
    assert!((cov[[0, 2]] - 0.09).abs() < 0.01, "{}", cov[[0, 2]]);
    assert!((cov[[10, 10]] - 1.0).abs() < 0.02, "{}", cov[[10, 10]]);
}

#[test]
fn sparse_signal_variance_matches_quadratic_form() {
    let model = SimModel::new(Example::A1, Scenario::Sparse);
    let b = &model.coefficients.beta_x;
    let exact = b.dot(&model.design.x_covariance().dot(b));
    let data = model.generate(100_000, 3).unwrap();
    let signal = data.x.dot(b);
    let m = signal.mean().unwrap();
    let var = signal.mapv(|v| (v - m).powi(2)).sum() / (signal.len() as f64 - 1.0);
    assert!((var / exact - 1.0).abs() < 0.03, "{var} vs {exact}");
}

#[test]
fn conditional_draws_match_schur_complement() {
    let design = SimModel::new(Example::A1, Scenario::Null).design;
    let mut rng = seeds::stream(4, &[]);
    let z: Array1<f64> = (0..25).map(|_| rng.sample(StandardNormal)).collect();
    let draws = design.sample_conditional(z.view(), 1_000_000, 5);

    // Σ_XX − Σ_XZ Σ_ZZ⁻¹ Σ_ZX with an independently computed inverse.
    let sigma = design.covariance();
    let szz = nalgebra::DMatrix::from_fn(25, 25, |i, j| sigma[[i, j]]);
    let sxz = nalgebra::DMatrix::from_fn(25, 25, |i, j| sigma[[25 + i, j]]);
    let sxx = nalgebra::DMatrix::from_fn(25, 25, |i, j| sigma[[25 + i, 25 + j]]);
    let inv = szz.try_inverse().unwrap();
    let schur = &sxx - &sxz * &inv * sxz.transpose();
    let zv = nalgebra::DVector::from_iterator(25, z.iter().copied());
    let mu = &sxz * &inv * zv;

    let cov = sample_cov(&draws);
    let mean = draws.mean_axis(Axis(0)).unwrap();
    for i in 0..25 {
        assert!((mean[i] - mu[i]).abs() < 0.02, "mean {i}");
        for j in 0..25 {
            assert!((cov[[i, j]] - schur[(i, j)]).abs() < 0.01, "cov ({i},{j}) {} vs {}", cov[[i, j]], schur[(i, j)]);
        }
    }
}

#[test]
fn zero_condition_centers_draws() {
    let design = SimModel::new(Example::A1, Scenario::Null).design;
    let draws = design.sample_conditional(Array1::zeros(25).view(), 100_000, 6);
    let mean = draws.mean_axis(Axis(0)).unwrap();
    assert!(mean.iter().all(|m| m.abs() < 0.02), "{mean}");
    assert_eq!(draws, design.sample_conditional(Array1::zeros(25).view(), 100_000, 6));
}

#[test]
fn nonlinear_conditional_mean_matches_monte_carlo() {
    let model = SimModel::new(Example::A2, Scenario::Sparse);
    let mut rng = seeds::stream(7, &[]);
    let z: Array1<f64> = (0..25).map(|_| rng.sample(StandardNormal)).collect();
    let draws = model.design.sample_conditional(z.view(), 1_000_000, 8);
    let base = model.coefficients.beta_z.dot(&z);
    let vals = draws.dot(&model.coefficients.beta_x).mapv(|v| base + v * v);
    let mean = vals.mean().unwrap();
    let sd = vals.std(1.0);
    let se = sd / 1000.0;
    let oracle = model.g_y(z.view());
    assert!((mean - oracle).abs() < 3.0 * se, "{mean} vs {oracle} (se {se})");
}

#[test]
fn oracle_mean_special_cases() {
    let zero = Array1::zeros(25);
    let sparse = SimModel::new(Example::A1, Scenario::Sparse);
    assert!(sparse.g_y(zero.view()).abs() < 1e-15);
    let null = SimModel::new(Example::A2, Scenario::Null);
    let z = Array1::from_shape_fn(25, |i| i as f64 / 10.0 - 1.0);
    assert_eq!(null.g_y(z.view()), z[0] + z[1]);
}
