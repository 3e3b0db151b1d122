//! Neural estimator of the conditional mean `E[Y | Z = z]`.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, CmiError, Result};
use crate::neuralnet::format::{self, LineReader};
use crate::neuralnet::{Activation, Adam, AdamConfig, Mlp};
use crate::normalize::Standardizer;
use crate::seeds;

pub const REGRESSOR_MAGIC: &str = "cmi-regressor";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressorTrainConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Share of the training rows held out for early stopping; 0 disables it.
    pub validation_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for RegressorTrainConfig {
    fn default() -> Self {
        RegressorTrainConfig {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            epochs: 300,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 3.0,
            validation_fraction: 0.2,
            patience: 20,
            seed: 0,
        }
    }
}

impl RegressorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0)
            || self.epochs == 0
            || self.batch_size == 0
            || !(self.learning_rate > 0.0 && self.learning_rate.is_finite())
            || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite())
            || !(0.0..0.9).contains(&self.validation_fraction)
        {
            return Err(CmiError::InvalidConfig(format!(
                "regressor: widths, epochs, batch size and learning rate must be positive ({self:?})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorModel {
    net: Mlp,
    z_norm: Standardizer,
    y_norm: Standardizer,
}

#[derive(Debug, Clone)]
pub struct RegressorFit {
    pub model: RegressorModel,
    /// Mean squared error on standardized targets, averaged per epoch.
    pub epoch_losses: Vec<f64>,
}

impl RegressorModel {
    pub fn new(net: Mlp, z_norm: Standardizer, y_norm: Standardizer) -> Result<Self> {
        if net.input_dim() != z_norm.dim() {
            return Err(CmiError::DimensionMismatch {
                context: "regressor input width",
                expected: z_norm.dim(),
                got: net.input_dim(),
            });
        }
        if net.output_dim() != y_norm.dim() {
            return Err(CmiError::DimensionMismatch {
                context: "regressor output width",
                expected: y_norm.dim(),
                got: net.output_dim(),
            });
        }
        Ok(RegressorModel { net, z_norm, y_norm })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn z_normalizer(&self) -> &Standardizer {
        &self.z_norm
    }

    pub fn y_normalizer(&self) -> &Standardizer {
        &self.y_norm
    }

    pub fn predict_mean(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.z_norm.dim() {
            return Err(CmiError::DimensionMismatch {
                context: "regressor input width",
                expected: self.z_norm.dim(),
                got: z.ncols(),
            });
        }
        let mut out = self.net.forward(self.z_norm.apply(z).view())?;
        self.y_norm.invert_in_place(&mut out);
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{REGRESSOR_MAGIC} {}\n", format::FORMAT_VERSION);
        format::encode_normalizer(&mut out, "z", &self.z_norm);
        format::encode_normalizer(&mut out, "y", &self.y_norm);
        format::encode_mlp(&self.net, &mut out);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut reader = LineReader::new(text);
        reader.header(REGRESSOR_MAGIC)?;
        let z_norm = reader.normalizer("z", None)?;
        let y_norm = reader.normalizer("y", None)?;
        let net = format::decode_mlp(&mut reader)?;
        reader.expect_eof()?;
        RegressorModel::new(net, z_norm, y_norm).map_err(|e| reader.error(e.to_string()))
    }
}

/// Minibatch Adam on the summed per-coordinate squared error of the
/// standardized targets.
pub fn train_regressor(
    y: ArrayView2<f64>,
    z: ArrayView2<f64>,
    cfg: &RegressorTrainConfig,
) -> Result<RegressorFit> {
    cfg.validate()?;
    let n = y.nrows();
    if z.nrows() != n {
        return Err(CmiError::DimensionMismatch {
            context: "regressor training rows (z vs y)",
            expected: n,
            got: z.nrows(),
        });
    }
    if n < 2 {
        return Err(CmiError::InvalidConfig(format!(
            "regressor training needs at least 2 rows, got {n}"
        )));
    }
    check_finite(y.iter().chain(z.iter()).copied(), "regressor training data")?;
    let z_norm = Standardizer::fit(z)?;
    if z_norm.mean().iter().enumerate().all(|(j, m)| z.column(j).iter().all(|v| v == m)) {
        return Err(CmiError::Degenerate("regressor inputs are constant".into()));
    }
    let y_norm = Standardizer::fit(y)?;
    let zs = z_norm.apply(z);
    let ys = y_norm.apply(y);

    let mut dims = vec![z.ncols()];
    dims.extend(&cfg.hidden);
    dims.push(y.ncols());
    let mut net = Mlp::init(&dims, cfg.activation, seeds::derive(cfg.seed, &[0]))?;
    // A constant target column gets a zero output row: its gradient is then
    // exactly zero, so the prediction stays at the column value.
    let last = net.layers_mut().last_mut().expect("at least one layer");
    for j in 0..y.ncols() {
        if y.column(j).iter().all(|&v| v == y[[0, j]]) {
            last.weights.row_mut(j).fill(0.0);
            last.bias[j] = 0.0;
        }
    }
    let mut adam = Adam::new(
        &net,
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::with_learning_rate(cfg.learning_rate)
        },
    )?;

    let mut rows: Vec<usize> = (0..n).collect();
    let held_out = (cfg.validation_fraction * n as f64).round() as usize;
    let validation: Vec<usize> = if held_out >= 1 && n - held_out >= 2 {
        rows.shuffle(&mut seeds::stream(cfg.seed, &[2]));
        let v = rows.split_off(n - held_out);
        rows.sort_unstable();
        v
    } else {
        Vec::new()
    };
    let z_val = zs.select(Axis(0), &validation);
    let y_val = ys.select(Axis(0), &validation);
    let mut best: Option<(f64, Mlp)> = None;
    let mut since_best = 0usize;

    let batch = cfg.batch_size.min(rows.len());
    let mut order = rows.clone();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = seeds::stream(cfg.seed, &[1, epoch as u64]);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let zb = zs.select(Axis(0), chunk);
            let yb = ys.select(Axis(0), chunk);
            let trace = net.forward_trace(zb.view())?;
            let resid = trace.output() - &yb;
            let b = chunk.len() as f64;
            let loss = resid.mapv(|r| r * r).sum() / b;
            if !loss.is_finite() {
                return Err(CmiError::Training(format!(
                    "regressor loss became non-finite at epoch {}",
                    epoch + 1
                )));
            }
            let upstream = resid * (2.0 / b);
            let grads = net.backward(&trace, upstream.view())?;
            adam.step(&mut net, &grads)?;
            total += loss * b;
        }
        epoch_losses.push(total / order.len() as f64);
        if !validation.is_empty() {
            let err = (net.forward(z_val.view())? - &y_val).mapv(|r| r * r).sum() / validation.len() as f64;
            if best.as_ref().is_none_or(|(b, _)| err < *b) {
                best = Some((err, net.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best > cfg.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, kept)) = best {
        net = kept;
    }
    Ok(RegressorFit {
        model: RegressorModel::new(net, z_norm, y_norm)?,
        epoch_losses,
    })
}
