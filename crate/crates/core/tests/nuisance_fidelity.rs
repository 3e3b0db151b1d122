//! Trained generator and regressor against the known conditional laws of
//! the simulation designs.

use cmi_core::generator::{train_generator, GeneratorTrainConfig};
use cmi_core::kernels::{median_heuristic, KernelFamily, KernelSpec};
use cmi_core::regressor::{train_regressor, RegressorTrainConfig};
use cmi_core::seeds;
use cmi_core::simdata::{Example, Scenario, SimModel};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

/// Biased (V-statistic) MMD², which is non-negative.
fn mmd2_biased(a: ArrayView2<f64>, b: ArrayView2<f64>, k: &KernelSpec) -> f64 {
    let mean = |p: ArrayView2<f64>, q: ArrayView2<f64>| k.gram(p, q).unwrap().mean().unwrap();
    mean(a, a) + mean(b, b) - 2.0 * mean(a, b)
}

fn a1_generator(n: usize, seed: u64) -> (SimModel, cmi_core::generator::GeneratorFit) {
    let model = SimModel::new(Example::A1, Scenario::Null);
    let data = model.generate(n, seed).unwrap();
    let cfg = GeneratorTrainConfig {
        seed,
        ..Default::default()
    };
    let fit = train_generator(data.x.view(), data.z.view(), &cfg).unwrap();
    (model, fit)
}

#[test]
fn generator_learns_identity_map() {
    let mut rng = seeds::stream(1, &[]);
    let z = Array2::from_shape_fn((600, 1), |_| rng.sample::<f64, _>(StandardNormal));
    let train = z.slice(s![..500, ..]);
    // A deterministic target needs little noise input.
    let cfg = GeneratorTrainConfig {
        noise_dim: Some(4),
        seed: 2,
        ..Default::default()
    };
    let fit = train_generator(train, train, &cfg).unwrap();
    let mut err = 0.0;
    for i in 500..600 {
        let zi = z[[i, 0]];
        let draws = fit.model.sample_conditional(&[zi], 20, i as u64).unwrap();
        err += draws.iter().map(|g| (g - zi).abs()).sum::<f64>() / 20.0;
    }
    err /= 100.0;
    println!("identity map: mean |G - z| = {err:.4}");
    assert!(err < 0.15, "{err}");
}

#[test]
fn generator_matches_gaussian_conditional_law() {
    let (model, fit) = a1_generator(200, 3);
    let losses = &fit.epoch_losses;
    assert!(losses.last().unwrap() <= losses.first().unwrap());

    let mut rng = seeds::stream(4, &[]);
    let k = {
        let pooled = model.generate(400, 5).unwrap();
        KernelSpec::laplacian(median_heuristic(pooled.x.view(), KernelFamily::Laplacian).unwrap()).unwrap()
    };
    for t in 0..5u64 {
        let z: Array1<f64> = (0..25).map(|_| rng.sample(StandardNormal)).collect();
        let generated = fit.model.sample_conditional(z.as_slice().unwrap(), 200, 10 + t).unwrap();
        let oracle = model.design.sample_conditional(z.view(), 200, 20 + t);
        let reference = model.design.sample_conditional(z.view(), 200, 30 + t);
        let gen = mmd2_biased(generated.view(), oracle.view(), &k);
        let refv = mmd2_biased(reference.view(), oracle.view(), &k);
        println!("z #{t}: generated {gen:.5}, reference {refv:.5}, ratio {:.2}", gen / refv);
        assert!(gen < 5.0 * refv, "z #{t}: {gen} vs {refv}");
    }
}

#[test]
fn generator_mean_at_origin() {
    let (model, fit) = a1_generator(2000, 6);
    let zero = vec![0.0; 25];
    let draws = fit.model.sample_conditional(&zero, 10_000, 7).unwrap();
    let mean = draws.mean_axis(Axis(0)).unwrap();
    let oracle = model.design.conditional_mean(Array1::from(zero).view());
    let worst = (&mean - &oracle).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    println!("largest coordinate error of the mean at z = 0: {worst:.4}");
    assert!(worst < 0.1, "{worst}");
}

#[test]
fn generator_tracks_conditional_mean_direction() {
    let (model, fit) = a1_generator(200, 8);
    let mut za = vec![0.0; 25];
    let mut zb = vec![0.0; 25];
    za[24] = -1.5;
    zb[24] = 1.5;
    let ga = fit.model.sample_conditional(&za, 2000, 1).unwrap().mean_axis(Axis(0)).unwrap();
    let gb = fit.model.sample_conditional(&zb, 2000, 2).unwrap().mean_axis(Axis(0)).unwrap();
    let oa = model.design.conditional_mean(Array1::from(za).view());
    let ob = model.design.conditional_mean(Array1::from(zb).view());
    let direction = &ob - &oa;
    assert!((&gb - &ga).dot(&direction) > 0.0);
}

#[test]
fn regressor_reaches_noise_floor_on_null_design() {
    let model = SimModel::new(Example::A1, Scenario::Null);
    let data = model.generate(600, 9).unwrap();
    let fit = train_regressor(
        data.y.slice(s![..400, ..]),
        data.z.slice(s![..400, ..]),
        &RegressorTrainConfig { seed: 10, ..Default::default() },
    )
    .unwrap();
    let losses = &fit.epoch_losses;
    assert!(losses.last().unwrap() <= losses.first().unwrap());
    let pred = fit.model.predict_mean(data.z.slice(s![400.., ..])).unwrap();
    let resid = &data.y.slice(s![400.., ..]) - &pred;
    let rmse = resid.mapv(|v| v * v).mean().unwrap().sqrt();
    println!("held-out RMSE {rmse:.4} (noise floor 0.5)");
    assert!((rmse - 0.5).abs() <= 0.125, "{rmse}");
}

#[test]
fn regressor_fits_noiseless_line() {
    let mut rng = seeds::stream(11, &[]);
    let z = Array2::from_shape_fn((600, 1), |_| rng.sample::<f64, _>(StandardNormal));
    let y = z.mapv(|v| 2.0 * v + 1.0);
    let fit = train_regressor(
        y.slice(s![..500, ..]),
        z.slice(s![..500, ..]),
        &RegressorTrainConfig { seed: 12, ..Default::default() },
    )
    .unwrap();
    let pred = fit.model.predict_mean(z.slice(s![500.., ..])).unwrap();
    let rmse = (&pred - &y.slice(s![500.., ..])).mapv(|v| v * v).mean().unwrap().sqrt();
    println!("noiseless line held-out RMSE {rmse:.4}");
    assert!(rmse < 0.1, "{rmse}");
}
