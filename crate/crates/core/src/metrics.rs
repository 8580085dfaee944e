//! Observables of early OCS learning: distance of the mean output to the
//! OCS, per-level correct-rejection rates, indifference and timing.

use std::io::Write;

use serde::Serialize;

use crate::error::{dim_mismatch, Error, Result};
use crate::linalg::{column_mean, Matrix, Vector};
use crate::spectral::ocs_vector;
use crate::task_data::{Dataset, LevelSlice};
use crate::trainer::TrajectorySeries;

/// Default OCS radius as a fraction of `‖ȳ‖₁`.
pub const DEFAULT_DELTA: f64 = 0.05;

/// `‖mean_i ŷ_i - ȳ‖₁`
pub fn l1_to_ocs(outputs: &Matrix, ocs: &Vector) -> Result<f64> {
    if outputs.nrows() != ocs.len() {
        return Err(dim_mismatch("OCS distance", ocs.len(), outputs.nrows()));
    }
    if outputs.ncols() == 0 {
        return Err(Error::Domain("no samples".into()));
    }
    Ok((column_mean(outputs) - ocs).lp_norm(1))
}

fn per_level(
    y_hat: &Vector,
    y: &Vector,
    slices: &[LevelSlice],
    score: impl Fn(f64, f64) -> (f64, f64),
) -> Result<Vec<Option<f64>>> {
    if y_hat.len() != y.len() {
        return Err(dim_mismatch("rate prediction", y.len(), y_hat.len()));
    }
    slices
        .iter()
        .map(|&(s, e)| {
            if e > y.len() || s >= e {
                return Err(Error::InvalidSlices(format!(
                    "slice {s}:{e} for {} outputs",
                    y.len()
                )));
            }
            let (num, den) = (s..e)
                .map(|i| score(y_hat[i], y[i]))
                .fold((0.0, 0.0), |acc, v| (acc.0 + v.0, acc.1 + v.1));
            Ok((den != 0.0).then(|| num / den))
        })
        .collect()
}

/// Correct-rejection rate per level: `(1 - ŷ)·(1 - y) / Σ(1 - y)` over the
/// level's outputs; absent for a level without zero targets.
pub fn tnr(y_hat: &Vector, y: &Vector, slices: &[LevelSlice]) -> Result<Vec<Option<f64>>> {
    per_level(y_hat, y, slices, |p, t| ((1.0 - p) * (1.0 - t), 1.0 - t))
}

/// Hit rate per level: `ŷ·y / Σ y`; absent for a level without positive targets.
pub fn tpr(y_hat: &Vector, y: &Vector, slices: &[LevelSlice]) -> Result<Vec<Option<f64>>> {
    per_level(y_hat, y, slices, |p, t| (p * t, t))
}

/// Per-level rate averaged over samples; a level is absent when no sample
/// defines it.
fn mean_rate(
    outputs: &Matrix,
    d: &Dataset,
    rate: impl Fn(&Vector, &Vector, &[LevelSlice]) -> Result<Vec<Option<f64>>>,
) -> Result<Vec<Option<f64>>> {
    if outputs.shape() != d.y.shape() {
        return Err(dim_mismatch(
            "sample rates",
            format!("{:?}", d.y.shape()),
            format!("{:?}", outputs.shape()),
        ));
    }
    let mut sums = vec![(0.0, 0usize); d.level_slices.len()];
    for i in 0..d.samples() {
        let yh = outputs.column(i).into_owned();
        let y = d.y.column(i).into_owned();
        for (acc, v) in sums.iter_mut().zip(rate(&yh, &y, &d.level_slices)?) {
            if let Some(v) = v {
                acc.0 += v;
                acc.1 += 1;
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|(s, n)| (n > 0).then(|| s / n as f64))
        .collect())
}

pub fn mean_tnr(outputs: &Matrix, d: &Dataset) -> Result<Vec<Option<f64>>> {
    mean_rate(outputs, d, tnr)
}

pub fn mean_tpr(outputs: &Matrix, d: &Dataset) -> Result<Vec<Option<f64>>> {
    mean_rate(outputs, d, tpr)
}

/// Per-level TNR of the OCS predictor, averaged over samples.
pub fn ocs_baseline_tnr(d: &Dataset) -> Result<Vec<Option<f64>>> {
    let ybar = ocs_vector(d);
    let outputs = Matrix::from_fn(d.n_out(), d.samples(), |r, _| ybar[r]);
    mean_tnr(&outputs, d)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct UnitIndifference {
    pub mean: f64,
    /// Population standard deviation across inputs.
    pub std: f64,
    pub indifferent: bool,
}

/// A unit is indifferent when its output barely depends on the input but is
/// clearly non-zero: `std <= 0.01 |mean|` and `|mean| > 0.05`.
pub fn indifference(outputs: &Matrix) -> Vec<UnitIndifference> {
    let n = outputs.ncols() as f64;
    outputs
        .row_iter()
        .map(|row| {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            UnitIndifference {
                mean,
                std,
                indifferent: mean.abs() > 0.05 && std <= 0.01 * mean.abs(),
            }
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsSeries {
    pub times: Vec<f64>,
    pub l1_to_ocs: Vec<f64>,
    /// `tnr[k][level]`, averaged over samples.
    pub tnr: Vec<Vec<Option<f64>>>,
    pub tpr: Vec<Vec<Option<f64>>>,
    /// Number of indifferent output units at each time.
    pub indifferent_units: Vec<usize>,
    /// `‖ȳ‖₁`, the scale of the OCS radius.
    pub ocs_norm: f64,
}

/// Metrics for every logged output snapshot of a training run.
pub fn metrics_series(series: &TrajectorySeries, d: &Dataset) -> Result<MetricsSeries> {
    if series.outputs.len() != series.times.len() {
        return Err(Error::InvalidConfig(
            "metrics need output snapshots at every logged step".into(),
        ));
    }
    metrics_from_outputs(&series.times, &series.outputs, d)
}

pub fn metrics_from_outputs(
    times: &[f64],
    outputs: &[Matrix],
    d: &Dataset,
) -> Result<MetricsSeries> {
    let ybar = ocs_vector(d);
    let mut m = MetricsSeries {
        ocs_norm: ybar.lp_norm(1),
        ..Default::default()
    };
    for (&t, out) in times.iter().zip(outputs) {
        m.times.push(t);
        m.l1_to_ocs.push(l1_to_ocs(out, &ybar)?);
        m.tnr.push(mean_tnr(out, d)?);
        m.tpr.push(mean_tpr(out, d)?);
        m.indifferent_units
            .push(indifference(out).iter().filter(|u| u.indifferent).count());
    }
    Ok(m)
}

impl MetricsSeries {
    /// Smallest TNR reached on `level` over the series.
    pub fn min_tnr(&self, level: usize) -> Option<f64> {
        self.tnr
            .iter()
            .filter_map(|row| row.get(level).copied().flatten())
            .reduce(f64::min)
    }

    /// Columns `t, metric, index, value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["t", "metric", "index", "value"])?;
        for (k, t) in self.times.iter().enumerate() {
            let t = format!("{t:?}");
            w.write_record([
                t.as_str(),
                "l1_to_ocs",
                "0",
                &format!("{:?}", self.l1_to_ocs[k]),
            ])?;
            for (name, rows) in [("tnr", &self.tnr), ("tpr", &self.tpr)] {
                for (level, v) in rows[k].iter().enumerate() {
                    if let Some(v) = v {
                        w.write_record([t.as_str(), name, &level.to_string(), &format!("{v:?}")])?;
                    }
                }
            }
            w.write_record([
                t.as_str(),
                "indifferent_units",
                "0",
                &self.indifferent_units[k].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct TimingSummary {
    /// First time the mean output is within `delta ‖ȳ‖₁` of the OCS.
    pub t_ocs: Option<f64>,
    /// First time the loss is at most half its initial value.
    pub t_diff: Option<f64>,
}

impl TimingSummary {
    /// `t_ocs < factor · t_diff`, with a missing `t_diff` read as never.
    pub fn ocs_precedes(&self, factor: f64) -> bool {
        match (self.t_ocs, self.t_diff) {
            (Some(o), Some(d)) => o < factor * d,
            (Some(_), None) => true,
            (None, _) => false,
        }
    }

    /// `t_ocs` absent or no earlier than `t_diff`.
    pub fn no_early_ocs(&self) -> bool {
        match (self.t_ocs, self.t_diff) {
            (None, _) => true,
            (Some(o), Some(d)) => o >= d,
            (Some(_), None) => false,
        }
    }
}

pub fn timing_summary(series: &MetricsSeries, loss: &[f64], delta: f64) -> Result<TimingSummary> {
    if loss.len() != series.times.len() {
        return Err(dim_mismatch("loss curve", series.times.len(), loss.len()));
    }
    let radius = delta * series.ocs_norm;
    let t_ocs = series
        .times
        .iter()
        .zip(&series.l1_to_ocs)
        .find(|(_, &l)| l <= radius)
        .map(|(&t, _)| t);
    let t_diff = loss.first().and_then(|&l0| {
        series
            .times
            .iter()
            .zip(loss)
            .find(|(_, &l)| l <= 0.5 * l0)
            .map(|(&t, _)| t)
    });
    Ok(TimingSummary { t_ocs, t_diff })
}
