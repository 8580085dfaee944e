//! Closed-form mode trajectories and the network function they induce.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::spectral::ModeDecomposition;
use crate::task_data::Dataset;

/// Exponent beyond which the deep trajectory is returned at its asymptote.
const SATURATION_EXPONENT: f64 = 700.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Depth {
    Shallow,
    #[default]
    Deep,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryParams {
    /// Singular value of the input-output correlation.
    pub s: f64,
    /// Input-correlation eigenvalue along the same mode.
    pub d: f64,
    /// Mode strength at `t = 0`.
    pub a0: f64,
    /// Time constant `1 / (N ε)`, in optimisation steps.
    pub tau: f64,
    pub depth: Depth,
}

impl TrajectoryParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Domain(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.d >= 0.0) {
            return Err(Error::Domain(format!(
                "d must be non-negative, got {}",
                self.d
            )));
        }
        if !(self.s >= 0.0) {
            return Err(Error::Domain(format!(
                "s must be non-negative, got {}",
                self.s
            )));
        }
        if !self.a0.is_finite() {
            return Err(Error::Domain("initial strength must be finite".into()));
        }
        Ok(())
    }

    /// Fixed point `s / d`.
    pub fn asymptote(&self) -> f64 {
        self.s / self.d
    }
}

/// Time constant for learning rate `epsilon` on `samples` samples.
pub fn time_constant(samples: usize, epsilon: f64) -> f64 {
    1.0 / (samples as f64 * epsilon)
}

/// Sigmoidal strength of one mode of a two-layer network.
pub fn deep_mode_trajectory(p: &TrajectoryParams, t: f64) -> Result<f64> {
    p.validate()?;
    if !(p.a0 > 0.0) {
        return Err(Error::Domain(format!(
            "deep trajectory needs a positive initial strength, got {}",
            p.a0
        )));
    }
    if p.s == 0.0 {
        return Ok(p.a0 / (1.0 + 2.0 * p.a0 * p.d * t / p.tau));
    }
    let exponent = 2.0 * p.s * t / p.tau;
    if p.d == 0.0 {
        return Ok(p.a0 * exponent.exp());
    }
    if exponent > SATURATION_EXPONENT {
        return Ok(p.asymptote());
    }
    let decay = (-exponent).exp();
    Ok(p.s * p.a0 / (p.d * p.a0 + (p.s - p.d * p.a0) * decay))
}

/// Exponential relaxation of one mode of a single-layer network.
pub fn shallow_mode_trajectory(p: &TrajectoryParams, t: f64) -> f64 {
    if p.d == 0.0 {
        return p.a0;
    }
    let decay = (-p.d * t / p.tau).exp();
    p.asymptote() * (1.0 - decay) + p.a0 * decay
}

pub fn mode_trajectory(p: &TrajectoryParams, t: f64) -> Result<f64> {
    match p.depth {
        Depth::Deep => deep_mode_trajectory(p, t),
        Depth::Shallow => {
            p.validate()?;
            Ok(shallow_mode_trajectory(p, t))
        }
    }
}

/// Per-mode parameters with a shared initial strength.
///
/// Needs input eigenvalues, so the decomposition must be jointly diagonal.
pub fn mode_params(
    dec: &ModeDecomposition,
    a0: f64,
    tau: f64,
    depth: Depth,
) -> Result<Vec<TrajectoryParams>> {
    let d = dec.d().ok_or(Error::MissingEigenvalues)?;
    Ok(dec
        .s
        .iter()
        .zip(d)
        .map(|(&s, &d)| TrajectoryParams {
            s,
            d,
            a0,
            tau,
            depth,
        })
        .collect())
}

fn check_aligned(dec: &ModeDecomposition, params: &[TrajectoryParams]) -> Result<()> {
    if dec.rank() != params.len() {
        return Err(dim_mismatch(
            "trajectory parameters",
            format!("{} modes", dec.rank()),
            format!("{} entries", params.len()),
        ));
    }
    Ok(())
}

pub fn mode_strengths(params: &[TrajectoryParams], t: f64) -> Result<Vec<f64>> {
    params.iter().map(|p| mode_trajectory(p, t)).collect()
}

/// `U diag(a(t)) V^T`
pub fn analytic_network(
    dec: &ModeDecomposition,
    params: &[TrajectoryParams],
    t: f64,
) -> Result<Matrix> {
    check_aligned(dec, params)?;
    let a = mode_strengths(params, t)?;
    let mut ua = dec.u.clone();
    for (j, aj) in a.iter().enumerate() {
        ua.column_mut(j).scale_mut(*aj);
    }
    Ok(ua * dec.v.transpose())
}

/// `(1/2) ‖Y - W(t) X‖_F²`
pub fn analytic_loss(
    dec: &ModeDecomposition,
    params: &[TrajectoryParams],
    d: &Dataset,
    t: f64,
) -> Result<f64> {
    let w = analytic_network(dec, params, t)?;
    if w.ncols() != d.n_in() || w.nrows() != d.n_out() {
        return Err(dim_mismatch(
            "analytic loss",
            format!("{}x{}", d.n_out(), d.n_in()),
            format!("{}x{}", w.nrows(), w.ncols()),
        ));
    }
    Ok(0.5 * (&d.y - w * &d.x).norm_squared())
}

/// Output of the OCS mode alone for input `x`: `a_ocs(t) u_ocs (v_ocs . x)`.
pub fn ocs_contribution(
    dec: &ModeDecomposition,
    params: &[TrajectoryParams],
    x: &Vector,
    t: f64,
) -> Result<Vector> {
    check_aligned(dec, params)?;
    let k = dec.ocs_index.ok_or(Error::MissingOcsMode)?;
    if x.len() != dec.v.nrows() {
        return Err(dim_mismatch(
            "OCS contribution input",
            dec.v.nrows().to_string(),
            x.len().to_string(),
        ));
    }
    let a = mode_trajectory(&params[k], t)?;
    Ok(dec.u_col(k) * (a * dec.v.column(k).dot(x)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TimeGrid {
    /// `points` values from `start` to `end`, evenly spaced in log time,
    /// preceded by `t = 0`.
    Geometric {
        start: f64,
        end: f64,
        points: usize,
    },
    Linear {
        start: f64,
        end: f64,
        points: usize,
    },
}

impl TimeGrid {
    pub fn geometric(start: f64, end: f64, points: usize) -> Self {
        TimeGrid::Geometric { start, end, points }
    }

    pub fn linear(start: f64, end: f64, points: usize) -> Self {
        TimeGrid::Linear { start, end, points }
    }

    pub fn times(&self) -> Result<Vec<f64>> {
        match *self {
            TimeGrid::Geometric { start, end, points } => {
                if !(start > 0.0 && end > start) || points < 2 {
                    return Err(Error::Domain(
                        "geometric grid needs 0 < start < end and at least 2 points".into(),
                    ));
                }
                let ratio = (end / start).ln() / (points - 1) as f64;
                let mut t = vec![0.0];
                t.extend((0..points).map(|i| start * (ratio * i as f64).exp()));
                *t.last_mut().unwrap() = end;
                Ok(t)
            }
            TimeGrid::Linear { start, end, points } => {
                if !(end > start) || start < 0.0 || points < 2 {
                    return Err(Error::Domain(
                        "linear grid needs 0 <= start < end and at least 2 points".into(),
                    ));
                }
                let step = (end - start) / (points - 1) as f64;
                Ok((0..points).map(|i| start + step * i as f64).collect())
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnalyticCurves {
    pub times: Vec<f64>,
    /// `modes[k][α]`: strength of mode `α` at `times[k]`.
    pub modes: Vec<Vec<f64>>,
    pub loss: Vec<f64>,
}

pub fn analytic_curves(
    dec: &ModeDecomposition,
    params: &[TrajectoryParams],
    d: &Dataset,
    times: &[f64],
) -> Result<AnalyticCurves> {
    let mut out = AnalyticCurves::default();
    for &t in times {
        out.times.push(t);
        out.modes.push(mode_strengths(params, t)?);
        out.loss.push(analytic_loss(dec, params, d, t)?);
    }
    Ok(out)
}

impl AnalyticCurves {
    /// Columns `t, mode, value`.
    pub fn write_modes_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["t", "mode", "value"])?;
        for (t, row) in self.times.iter().zip(&self.modes) {
            for (alpha, v) in row.iter().enumerate() {
                w.write_record([format!("{t:?}"), alpha.to_string(), format!("{v:?}")])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Columns `t, loss`.
    pub fn write_loss_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["t", "loss"])?;
        for (t, l) in self.times.iter().zip(&self.loss) {
            w.write_record([format!("{t:?}"), format!("{l:?}")])?;
        }
        w.flush()?;
        Ok(())
    }
}
