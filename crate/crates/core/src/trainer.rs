//! Full-batch gradient descent and the quantities logged along the way.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::linalg::{cosine, offdiag_norm, Matrix, Vector};
use crate::network::NetworkState;
use crate::spectral::{ocs_vector, ModeDecomposition};
use crate::task_data::Dataset;

/// Below this time constant discrete steps no longer track gradient flow.
pub const MIN_TAU: f64 = 10.0;
/// A run aborts once the loss exceeds this multiple of its initial value.
pub const DIVERGENCE_FACTOR: f64 = 1e6;
/// Outputs are not recorded when one snapshot would exceed this many entries.
pub const MAX_LOGGED_OUTPUTS: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    #[serde(default = "default_stride")]
    pub log_stride: usize,
    #[serde(default = "default_true")]
    pub record_outputs: bool,
}

fn default_stride() -> usize {
    1
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    /// Learning rate giving time constant `tau` on `samples` samples.
    pub fn from_tau(tau: f64, samples: usize, steps: usize, log_stride: usize) -> Self {
        TrainConfig {
            learning_rate: 1.0 / (tau * samples as f64),
            steps,
            log_stride,
            record_outputs: true,
        }
    }

    pub fn tau(&self, samples: usize) -> f64 {
        1.0 / (samples as f64 * self.learning_rate)
    }

    pub fn in_gradient_flow_regime(&self, samples: usize) -> bool {
        self.learning_rate == 0.0 || self.tau(samples) >= MIN_TAU
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.log_stride == 0 {
            return Err(Error::InvalidConfig("log stride must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectorySeries {
    pub steps: Vec<usize>,
    /// Continuous time of each logged step (one unit per step).
    pub times: Vec<f64>,
    pub loss: Vec<f64>,
    /// Per logged step, `diag(U^T W V)` when a decomposition was supplied.
    pub modes: Vec<Vec<f64>>,
    /// Per logged step, `‖offdiag(U^T W V)‖_F / ‖diag(U^T W V)‖_F`.
    pub leakage: Vec<f64>,
    /// Network outputs per logged step, if recorded.
    pub outputs: Vec<Matrix>,
    pub b1_norm: Vec<f64>,
    pub b2_norm: Vec<f64>,
    pub tau: f64,
    /// Set when the learning rate is too large for gradient flow.
    pub gradient_flow_warning: bool,
}

impl TrajectorySeries {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Long format: `step, series, index, value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["step", "series", "index", "value"])?;
        let mut row = |step: usize, name: &str, idx: usize, v: f64| {
            w.write_record([
                step.to_string(),
                name.to_string(),
                idx.to_string(),
                format!("{v:?}"),
            ])
        };
        for (k, &step) in self.steps.iter().enumerate() {
            row(step, "loss", 0, self.loss[k])?;
            if let Some(modes) = self.modes.get(k) {
                for (a, v) in modes.iter().enumerate() {
                    row(step, "mode", a, *v)?;
                }
            }
            if let Some(l) = self.leakage.get(k) {
                row(step, "leakage", 0, *l)?;
            }
            if let Some(b) = self.b1_norm.get(k) {
                row(step, "b1_norm", 0, *b)?;
            }
            if let Some(b) = self.b2_norm.get(k) {
                row(step, "b2_norm", 0, *b)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Train `net` in place on `d` and return the logged series.
///
/// With `dec`, effective mode strengths are logged at every logged step; for
/// a network with an input-side bias and a decomposition of the
/// bias-augmented task, the bias is folded in as the first input column.
pub fn train(
    net: &mut NetworkState,
    d: &Dataset,
    cfg: &TrainConfig,
    dec: Option<&ModeDecomposition>,
) -> Result<TrajectorySeries> {
    cfg.validate()?;
    if net.b1.is_some() && d.bias_augmented {
        return Err(Error::InvalidConfig(
            "explicit input bias on pre-augmented data; use one route or the other".into(),
        ));
    }
    let samples = d.samples();
    let mut series = TrajectorySeries {
        tau: cfg.tau(samples),
        gradient_flow_warning: !cfg.in_gradient_flow_regime(samples),
        ..Default::default()
    };
    if series.gradient_flow_warning {
        log::warn!(
            "time constant {:.3} is below {MIN_TAU}; discrete steps will not follow gradient flow",
            series.tau
        );
    }
    let record_outputs = cfg.record_outputs && d.n_out() * samples <= MAX_LOGGED_OUTPUTS;
    if cfg.record_outputs && !record_outputs {
        log::warn!(
            "output snapshots disabled: {} entries per log",
            d.n_out() * samples
        );
    }

    let (initial, mut grads) = net.loss_and_gradients(d)?;
    if !initial.is_finite() {
        return Err(Error::NonFinite("initial loss"));
    }
    let limit = DIVERGENCE_FACTOR * initial.max(f64::MIN_POSITIVE);
    let mut loss = initial;
    for step in 0..=cfg.steps {
        if step % cfg.log_stride == 0 || step == cfg.steps {
            log_state(&mut series, net, d, dec, step, loss, record_outputs)?;
        }
        if step == cfg.steps {
            break;
        }
        net.apply_gradients(&grads, cfg.learning_rate);
        let (l, g) = net.loss_and_gradients_unchecked(&d.x, &d.y);
        if !l.is_finite() || l > limit {
            return Err(Error::Diverged {
                step: step + 1,
                loss: l,
                limit,
            });
        }
        loss = l;
        grads = g;
    }
    Ok(series)
}

fn log_state(
    series: &mut TrajectorySeries,
    net: &NetworkState,
    d: &Dataset,
    dec: Option<&ModeDecomposition>,
    step: usize,
    loss: f64,
    record_outputs: bool,
) -> Result<()> {
    series.steps.push(step);
    series.times.push(step as f64);
    series.loss.push(loss);
    if let Some(dec) = dec {
        let overlap = mode_overlap(net, dec)?;
        let diag = overlap.diagonal();
        series.leakage.push(leakage_ratio(&overlap));
        series.modes.push(diag.iter().copied().collect());
    }
    if record_outputs {
        series.outputs.push(net.forward(&d.x));
    }
    if let Some(b) = &net.b1 {
        series.b1_norm.push(b.norm());
    }
    if let Some(b) = &net.b2 {
        series.b2_norm.push(b.norm());
    }
    Ok(())
}

/// `U^T W V` for the effective end-to-end map `W`.
pub fn mode_overlap(net: &NetworkState, dec: &ModeDecomposition) -> Result<Matrix> {
    let rows = dec.v.nrows();
    let w = if rows == net.n_in() {
        net.product()
    } else if rows == net.n_in() + 1 {
        net.augmented_product(1.0)?
    } else {
        return Err(dim_mismatch("mode extraction inputs", net.n_in(), rows));
    };
    if dec.u.nrows() != w.nrows() {
        return Err(dim_mismatch(
            "mode extraction outputs",
            w.nrows(),
            dec.u.nrows(),
        ));
    }
    Ok(dec.u.transpose() * w * &dec.v)
}

pub fn extract_mode_strengths(net: &NetworkState, dec: &ModeDecomposition) -> Result<Vec<f64>> {
    Ok(mode_overlap(net, dec)?.diagonal().iter().copied().collect())
}

fn leakage_ratio(overlap: &Matrix) -> f64 {
    let diag = overlap.diagonal().norm();
    let off = offdiag_norm(overlap);
    if diag == 0.0 {
        if off == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        off / diag
    }
}

/// Subspace norm of a block of modes: `‖U_B^T W V_B‖_F`.
pub fn block_norm(overlap: &Matrix, block: std::ops::Range<usize>) -> f64 {
    overlap
        .view((block.start, block.start), (block.len(), block.len()))
        .norm()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BiasGradientReport {
    /// `∂L/∂b1`, present when the network has a hidden bias.
    pub hidden_gradient: Option<Vec<f64>>,
    /// `∂L/∂b2`, present when the network has an output bias.
    pub output_gradient: Option<Vec<f64>>,
    pub hidden_norm: Option<f64>,
    pub output_norm: Option<f64>,
    /// `‖∂L/∂b1‖ / ‖∂L/∂b2‖` when both exist.
    pub ratio: Option<f64>,
    /// Cosine between `∂L/∂b2` and `-ȳ`.
    pub output_mean_cosine: Option<f64>,
    /// `b1^T R_α` for the spectral hidden basis.
    pub hidden_projections: Option<Vec<f64>>,
}

pub fn bias_gradient_diagnostics(net: &NetworkState, d: &Dataset) -> Result<BiasGradientReport> {
    if net.b1.is_none() && net.b2.is_none() {
        return Err(Error::MissingBias("hidden or output"));
    }
    let (_, g) = net.loss_and_gradients(d)?;
    let hidden_norm = g.b1.as_ref().map(Vector::norm);
    let output_norm = g.b2.as_ref().map(Vector::norm);
    let ratio = match (hidden_norm, output_norm) {
        (Some(h), Some(o)) if o > 0.0 => Some(h / o),
        _ => None,
    };
    let neg_mean = -ocs_vector(d);
    let output_mean_cosine = g.b2.as_ref().map(|gb| cosine(gb, &neg_mean));
    let hidden_projections = match (&net.b1, &net.hidden_basis) {
        (Some(b1), Some(r)) => Some((r.transpose() * b1).iter().copied().collect()),
        _ => None,
    };
    Ok(BiasGradientReport {
        hidden_gradient: g.b1.as_ref().map(|v| v.iter().copied().collect()),
        output_gradient: g.b2.as_ref().map(|v| v.iter().copied().collect()),
        hidden_norm,
        output_norm,
        ratio,
        output_mean_cosine,
        hidden_projections,
    })
}
