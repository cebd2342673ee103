//! Replicated simulation runs: generate, tune by cross-validation, fit,
//! and score on an independent test set.

use std::time::Instant;

use msof_core::basis::make_basis;
use msof_core::metrics::{mspe, sens_spec};
use msof_core::model::fit;
use msof_core::selection::{cross_validate, CvGrid};
use msof_core::{PenaltyMode, Result, SimScenario};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// One table cell: a scenario setting replicated `reps` times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub sim: u8,
    pub n: usize,
    pub n_test: usize,
    pub m: usize,
    pub sigma: f64,
    pub rho: f64,
    pub lag: usize,
    pub reps: usize,
    pub seed: u64,
    pub dim: usize,
}

impl BenchCell {
    /// Replicate `r` uses its own scenario seed, so every replicate draws
    /// fresh coefficient functions.
    pub fn scenario(&self, r: usize) -> Result<SimScenario> {
        SimScenario::new(
            self.sim,
            self.n,
            self.m,
            self.sigma,
            self.seed.wrapping_add(r as u64),
        )?
        .with_rho(self.rho)?
        .with_lag(self.lag)
    }

    pub fn p(&self) -> usize {
        match self.sim {
            1 | 2 => 1,
            3 => 50,
            _ => 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Replicate {
    pub mspe: f64,
    /// Sensitivity and specificity; `None` with a single predictor.
    pub support: Option<(f64, f64)>,
    pub k: usize,
    pub seconds: f64,
}

/// Runs replicate `r` of `cell` under the penalty `mode`.
pub fn run_replicate(cell: &BenchCell, mode: PenaltyMode, r: usize) -> Result<Replicate> {
    let start = Instant::now();
    let model = cell.scenario(r)?.model()?;
    let train = model.sample(cell.n, cell.sigma, 0)?;
    let test = model.sample(cell.n_test, cell.sigma, 1)?;
    let basis = make_basis(cell.dim, 3)?;
    let cv = cross_validate(
        &train,
        &basis,
        &CvGrid::for_mode(mode),
        cell.seed.wrapping_add(r as u64),
    )?;
    let fitted = fit(&train, &basis, &cv.best.config(), cv.best.k)?;
    let pred = fitted.predict(test.curves())?;
    let truth = test.truth().expect("simulated data carry the truth");
    let err = mspe(&pred, &truth.regression)?;
    let support = if cell.p() > 1 {
        Some(sens_spec(
            &fitted.selected_predictors(),
            &model.support,
            cell.p(),
        )?)
    } else {
        None
    };
    Ok(Replicate {
        mspe: err,
        support,
        k: cv.best.k,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Mean and sample standard deviation.
pub fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub method: PenaltyMode,
    pub replicates: Vec<Replicate>,
}

impl Summary {
    pub fn mspe(&self) -> (f64, f64) {
        mean_sd(&self.replicates.iter().map(|r| r.mspe).collect::<Vec<_>>())
    }

    pub fn sensitivity(&self) -> Option<(f64, f64)> {
        let v: Option<Vec<f64>> = self
            .replicates
            .iter()
            .map(|r| r.support.map(|s| s.0))
            .collect();
        v.map(|v| mean_sd(&v))
    }

    pub fn specificity(&self) -> Option<(f64, f64)> {
        let v: Option<Vec<f64>> = self
            .replicates
            .iter()
            .map(|r| r.support.map(|s| s.1))
            .collect();
        v.map(|v| mean_sd(&v))
    }

    pub fn mean_k(&self) -> f64 {
        mean_sd(
            &self
                .replicates
                .iter()
                .map(|r| r.k as f64)
                .collect::<Vec<_>>(),
        )
        .0
    }

    pub fn max_seconds(&self) -> f64 {
        self.replicates
            .iter()
            .map(|r| r.seconds)
            .fold(0.0, f64::max)
    }
}

/// Runs all replicates of a cell in parallel; results are in replicate
/// order.
pub fn run_cell(cell: &BenchCell, mode: PenaltyMode) -> Result<Summary> {
    let replicates: Vec<Result<Replicate>> = (0..cell.reps)
        .into_par_iter()
        .map(|r| run_replicate(cell, mode, r))
        .collect();
    Ok(Summary {
        method: mode,
        replicates: replicates.into_iter().collect::<Result<_>>()?,
    })
}

pub const CSV_HEADER: &str =
    "sim,method,n,n_test,m,sigma,rho,lag,reps,mspe_mean,mspe_sd,sens_mean,sens_sd,spec_mean,spec_sd,k_mean";

pub fn method_name(mode: PenaltyMode) -> &'static str {
    match mode {
        PenaltyMode::Smooth => "smooth",
        PenaltyMode::SmoothSparse => "smooth-sparse",
    }
}

/// One CSV row; timings are left out so rows are reproducible.
pub fn csv_row(cell: &BenchCell, s: &Summary) -> String {
    let (mm, ms) = s.mspe();
    let pair = |v: Option<(f64, f64)>| v.map_or("NA,NA".to_string(), |(a, b)| format!("{a},{b}"));
    format!(
        "{},{},{},{},{},{},{},{},{},{mm},{ms},{},{},{}",
        cell.sim,
        method_name(s.method),
        cell.n,
        cell.n_test,
        cell.m,
        cell.sigma,
        cell.rho,
        cell.lag,
        cell.reps,
        pair(s.sensitivity()),
        pair(s.specificity()),
        s.mean_k()
    )
}
