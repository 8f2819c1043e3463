use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Forecast accuracy on one set of hours. Residuals are `forecast − actual`
/// (the prediction bias), in megawatts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// Percent.
    pub mape: f64,
    pub mae: f64,
    pub rmse: f64,
    pub max_abs_bias: f64,
    /// Population standard deviation of the residuals.
    pub bias_sd: f64,
    pub n: usize,
    pub residuals: Vec<f64>,
}

impl EvaluationReport {
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }
}

pub fn evaluate(forecasts: &[f64], actuals: &[f64]) -> Result<EvaluationReport> {
    if forecasts.len() != actuals.len() {
        return Err(Error::shape(
            "evaluate",
            &[forecasts.len()],
            &[actuals.len()],
        ));
    }
    if forecasts.is_empty() {
        return Err(Error::contract("evaluate needs at least one forecast"));
    }
    if let Some(i) = forecasts.iter().chain(actuals).position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite value at position {i} of forecasts ++ actuals"
        )));
    }
    let zeros: Vec<usize> = actuals
        .iter()
        .enumerate()
        .filter(|(_, &a)| a == 0.0)
        .map(|(i, _)| i)
        .collect();
    if !zeros.is_empty() {
        return Err(Error::MapeDomain(zeros));
    }

    let n = forecasts.len();
    let nf = n as f64;
    let residuals: Vec<f64> = forecasts.iter().zip(actuals).map(|(f, a)| f - a).collect();
    let mape = 100.0 / nf
        * residuals
            .iter()
            .zip(actuals)
            .map(|(r, a)| (r / a).abs())
            .sum::<f64>();
    let mae = residuals.iter().map(|r| r.abs()).sum::<f64>() / nf;
    let rmse = (residuals.iter().map(|r| r * r).sum::<f64>() / nf).sqrt();
    let max_abs_bias = residuals.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    let mean = residuals.iter().sum::<f64>() / nf;
    let bias_sd = (residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / nf).sqrt();
    Ok(EvaluationReport {
        mape,
        mae,
        rmse,
        max_abs_bias,
        bias_sd,
        n,
        residuals,
    })
}

/// Empirical terms of the bagging error identity `E = v/k + (k−1)c/k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceDiagnostics {
    pub k: usize,
    /// Mean squared member error.
    pub v: f64,
    /// Mean over unordered member pairs of `mean(e_i · e_j)`.
    pub c: f64,
    pub predicted_mse: f64,
    /// MSE of the averaged error.
    pub observed_mse: f64,
}

/// `member_errors[i][t]` is member i's error on sample t.
pub fn variance_diagnostics(member_errors: &[Vec<f64>]) -> Result<VarianceDiagnostics> {
    let k = member_errors.len();
    if k < 2 {
        return Err(Error::contract(format!(
            "variance diagnostics need at least 2 members, got {k}"
        )));
    }
    let n = member_errors[0].len();
    if n == 0 {
        return Err(Error::contract(
            "variance diagnostics need at least one sample",
        ));
    }
    if let Some(e) = member_errors.iter().find(|e| e.len() != n) {
        return Err(Error::shape("variance_diagnostics", &[n], &[e.len()]));
    }
    let nf = n as f64;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / nf;

    let v = member_errors.iter().map(|e| dot(e, e)).sum::<f64>() / k as f64;
    let mut c = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            c += dot(&member_errors[i], &member_errors[j]);
        }
    }
    c /= (k * (k - 1) / 2) as f64;

    let kf = k as f64;
    let observed_mse = (0..n)
        .map(|t| {
            let m = member_errors.iter().map(|e| e[t]).sum::<f64>() / kf;
            m * m
        })
        .sum::<f64>()
        / nf;
    Ok(VarianceDiagnostics {
        k,
        v,
        c,
        predicted_mse: v / kf + (kf - 1.0) * c / kf,
        observed_mse,
    })
}
