use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ocs_core::analytic::{analytic_curves, mode_params, AnalyticCurves, Depth};
use ocs_core::linalg::alignment;
use ocs_core::metrics::{metrics_series, timing_summary, MetricsSeries, TimingSummary};
use ocs_core::network::{init_network, InitMode};
use ocs_core::ntk::{ntk_compare, ntk_direct, ntk_output_step};
use ocs_core::response::expected_mean_tnr;
use ocs_core::spectral::{
    commutator_check, constant_mode_alignment, correlation_matrices, ocs_vector, task_svd,
    EigenAlignment, ModeDecomposition, JOINT_DIAGONAL_TOL,
};
use ocs_core::task_data::{augment_bias, save_dataset, write_matrix_csv, Dataset};
use ocs_core::trainer::{train, TrajectorySeries};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Condition, DominanceSpec, ExperimentConfig, NtkSpec};

pub const FAILED_MARKER: &str = "FAILED";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";

/// Which parts of the pipeline a command runs.
#[derive(Clone, Copy, Debug, Default)]
pub struct Stages {
    pub dataset_files: bool,
    pub spectrum: bool,
    pub simulate: bool,
    pub analytic: bool,
    pub compare: bool,
    pub metrics: bool,
    pub ntk: bool,
    pub discretize: bool,
}

impl Stages {
    /// Everything the config enables.
    pub fn full(cfg: &ExperimentConfig) -> Self {
        Stages {
            dataset_files: true,
            spectrum: true,
            simulate: true,
            analytic: true,
            compare: true,
            metrics: true,
            ntk: cfg.ntk.is_some(),
            discretize: cfg.discretization.is_some(),
        }
    }

    fn trains(&self) -> bool {
        self.simulate || self.compare || self.metrics || self.discretize
    }
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub name: String,
    pub seed: u64,
    pub conditions: Vec<ConditionReport>,
}

#[derive(Debug, Default, Serialize)]
pub struct ConditionReport {
    pub name: String,
    pub dataset: String,
    pub samples: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub augmented_task: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<SpectrumSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_tnr: Option<Vec<Option<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub analytic: Option<AnalyticSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ntk: Option<NtkSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_expected_tnr: Option<Vec<Option<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dominance: Option<DominanceSummary>,
    pub notes: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct SpectrumSummary {
    pub rank: usize,
    pub singular_values: Vec<f64>,
    pub input_eigenvalues: Option<Vec<f64>>,
    pub ocs_index: Option<usize>,
    pub jointly_diagonal: bool,
    pub joint_residual: f64,
    pub commutator_residual: f64,
    /// `|cos(u_0, ȳ)|`
    pub leading_output_alignment: f64,
    /// Leading eigenpairs of `X^T X` and their alignment with `1`.
    pub input_constant_alignment: Vec<EigenAlignment>,
}

#[derive(Debug, Serialize)]
pub struct TrainingSummary {
    pub learning_rate: f64,
    pub tau: f64,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub gradient_flow_warning: bool,
}

#[derive(Debug, Serialize)]
pub struct AnalyticSummary {
    pub initial_strength: f64,
    /// Largest `|simulated - analytic| / (s/d)` over modes and logged steps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_mode_deviation: Option<f64>,
    /// Largest `|simulated - analytic|` loss difference over the initial loss.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_loss_deviation: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct NtkSummary {
    pub sigma: f64,
    pub relative_frobenius: f64,
    pub max_abs: f64,
    pub one_step_relative_error: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct DominanceSummary {
    pub onset: Option<f64>,
    pub until: Option<f64>,
    /// Smallest `|leader| - max |followers|` over the window.
    pub min_margin: Option<f64>,
    pub holds: bool,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// Run every condition of `cfg` in parallel and write outputs under
/// `cfg.out_dir()`. On failure, the outputs written so far are kept and a
/// `FAILED` marker lists the errors.
pub fn run_experiment(cfg: &ExperimentConfig, stages: Stages) -> Result<RunReport> {
    let out = cfg.out_dir();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let marker = out.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).with_context(|| format!("removing {}", marker.display()))?;
    }
    fs::write(out.join(CONFIG_FILE), cfg.to_toml()?).context("writing config echo")?;

    let results: Vec<Result<ConditionReport>> = cfg
        .conditions
        .par_iter()
        .map(|c| {
            run_condition(cfg, c, stages, &out.join(c.dir_name()))
                .with_context(|| format!("condition `{}`", c.name))
        })
        .collect();

    let mut conditions = Vec::new();
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(c) => conditions.push(c),
            Err(e) => errors.push(format!("{e:#}")),
        }
    }
    let report = RunReport {
        name: cfg.name.clone(),
        seed: cfg.seed,
        conditions,
    };
    let mut summary = serde_json::to_string_pretty(&report)?;
    summary.push('\n');
    fs::write(out.join(SUMMARY_FILE), summary).context("writing summary")?;
    if !errors.is_empty() {
        fs::write(&marker, errors.join("\n") + "\n").context("writing failure marker")?;
        anyhow::bail!(
            "{} condition(s) failed:\n{}",
            errors.len(),
            errors.join("\n")
        );
    }
    Ok(report)
}

fn run_condition(
    cfg: &ExperimentConfig,
    c: &Condition,
    stages: Stages,
    dir: &Path,
) -> Result<ConditionReport> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let d = c
        .dataset
        .as_ref()
        .unwrap_or(&cfg.dataset)
        .build(cfg.seed)
        .context("task_data")?;
    let mut report = ConditionReport {
        name: c.name.clone(),
        dataset: d.name.clone(),
        samples: d.samples(),
        n_in: d.n_in(),
        n_out: d.n_out(),
        augmented_task: c.uses_augmented_task(),
        ..Default::default()
    };
    if stages.dataset_files {
        save_dataset(&d, dir.join("dataset.txt")).context("task_data")?;
        write_matrix_csv(&d.x, dir.join("inputs.csv")).context("task_data")?;
        write_matrix_csv(&d.y, dir.join("targets.csv")).context("task_data")?;
    }

    let task = if c.uses_augmented_task() {
        augment_bias(&d).context("task_data")?
    } else {
        d.clone()
    };
    let dec = task_svd(&correlation_matrices(&task)).context("spectral")?;
    if stages.spectrum {
        report.spectrum = Some(spectrum_summary(&d, &task, &dec, dir)?);
    }

    let train_cfg = cfg.train.train_config(d.samples()).context("trainer")?;
    let tau = train_cfg.tau(d.samples());
    let mut net = init_network(&c.network_config(&d, cfg.seed), Some(&dec)).context("trainer")?;

    if stages.ntk {
        if c.depth == Depth::Deep {
            let spec = cfg.ntk.clone().unwrap_or_default();
            report.ntk = Some(ntk_summary(&net, &d, &spec, dir)?);
        } else {
            report
                .notes
                .push("ntk: skipped for a shallow network".into());
        }
    }

    let closed_form = closed_form_params(c, &dec, tau, &mut report.notes);
    let mut series = None;
    if stages.trains() {
        let s = train(&mut net, &d, &train_cfg, Some(&dec)).context("trainer")?;
        if stages.simulate {
            s.write_csv(create(&dir.join("trajectory.csv"))?)
                .context("trainer")?;
        }
        report.training = Some(TrainingSummary {
            learning_rate: train_cfg.learning_rate,
            tau,
            steps: train_cfg.steps,
            initial_loss: s.loss[0],
            final_loss: *s.loss.last().expect("at least one logged step"),
            gradient_flow_warning: s.gradient_flow_warning,
        });
        series = Some(s);
    }

    if stages.analytic {
        if let Some(params) = &closed_form {
            let times = match &series {
                Some(s) => s.times.clone(),
                None => logged_times(train_cfg.steps, train_cfg.log_stride),
            };
            let curves =
                analytic_curves(&dec, params, &task, &times).context("analytic_dynamics")?;
            curves
                .write_modes_csv(create(&dir.join("analytic_modes.csv"))?)
                .context("analytic_dynamics")?;
            curves
                .write_loss_csv(create(&dir.join("analytic_loss.csv"))?)
                .context("analytic_dynamics")?;
            let mut summary = AnalyticSummary {
                initial_strength: c.init_scale,
                max_mode_deviation: None,
                max_loss_deviation: None,
            };
            if let (true, Some(s)) = (stages.compare, &series) {
                let (modes, loss) = write_comparison(s, &curves, &dec, dir)?;
                summary.max_mode_deviation = Some(modes);
                summary.max_loss_deviation = Some(loss);
            }
            report.analytic = Some(summary);
        }
    }

    if let Some(s) = &series {
        if stages.metrics || stages.discretize {
            let m = metrics_series(s, &d).context("ocs_metrics")?;
            let timing = timing_summary(&m, &s.loss, cfg.metrics.delta).context("ocs_metrics")?;
            if stages.metrics {
                m.write_csv(create(&dir.join("metrics.csv"))?)
                    .context("ocs_metrics")?;
                report.min_tnr = Some((0..d.level_slices.len()).map(|l| m.min_tnr(l)).collect());
                report.timing = Some(timing);
                if let Some(spec) = &cfg.dominance {
                    report.dominance = Some(dominance(spec, s, &d, &timing)?);
                }
            }
            if stages.discretize {
                let dc = cfg.discretization.unwrap_or_default();
                report.min_expected_tnr = Some(write_expected_tnr(s, &m, &d, &dc, dir)?);
            }
        }
    }
    Ok(report)
}

fn logged_times(steps: usize, stride: usize) -> Vec<f64> {
    let mut t: Vec<f64> = (0..=steps)
        .step_by(stride.max(1))
        .map(|k| k as f64)
        .collect();
    if !steps.is_multiple_of(stride.max(1)) {
        t.push(steps as f64);
    }
    t
}

fn closed_form_params(
    c: &Condition,
    dec: &ModeDecomposition,
    tau: f64,
    notes: &mut Vec<String>,
) -> Option<Vec<ocs_core::analytic::TrajectoryParams>> {
    if !c.has_closed_form() {
        notes.push("analytic: no closed form with an output bias on a deep network".into());
        return None;
    }
    if c.init != InitMode::Spectral {
        notes.push("analytic: curves assume a spectral init at the same strength".into());
    }
    match mode_params(dec, c.init_scale, tau, c.depth) {
        Ok(p) => Some(p),
        Err(e) => {
            notes.push(format!("analytic: {e}"));
            None
        }
    }
}

fn spectrum_summary(
    d: &Dataset,
    task: &Dataset,
    dec: &ModeDecomposition,
    dir: &Path,
) -> Result<SpectrumSummary> {
    dec.report()
        .write_csv(create(&dir.join("spectrum.csv"))?)
        .context("spectral")?;
    let input_constant_alignment = constant_mode_alignment(&d.input_similarity(), 3);
    let mut w = csv::Writer::from_writer(create(&dir.join("input_alignment.csv"))?);
    w.write_record(["rank", "eigenvalue", "alignment", "subspace_alignment"])?;
    for (i, e) in input_constant_alignment.iter().enumerate() {
        w.write_record([
            i.to_string(),
            format!("{:?}", e.eigenvalue),
            e.alignment.map_or(String::new(), |a| format!("{a:?}")),
            format!("{:?}", e.subspace_alignment),
        ])?;
    }
    w.flush()?;
    Ok(SpectrumSummary {
        rank: dec.rank(),
        singular_values: dec.s.clone(),
        input_eigenvalues: dec.d().map(<[f64]>::to_vec),
        ocs_index: dec.ocs_index,
        jointly_diagonal: dec.jointly_diagonal(),
        joint_residual: dec.joint_residual,
        commutator_residual: commutator_check(task, JOINT_DIAGONAL_TOL).residual,
        leading_output_alignment: if dec.rank() > 0 {
            alignment(&dec.u_col(0), &ocs_vector(task))
        } else {
            0.0
        },
        input_constant_alignment,
    })
}

fn ntk_summary(
    net: &ocs_core::network::NetworkState,
    d: &Dataset,
    spec: &NtkSpec,
    dir: &Path,
) -> Result<NtkSummary> {
    let cmp = ntk_compare(net, d, spec.output_term).context("ntk")?;
    let step = ntk_output_step(net, d, spec.step_epsilon).context("ntk")?;
    ntk_direct(net, d)
        .context("ntk")?
        .write_csv(create(&dir.join("ntk.csv"))?)
        .context("ntk")?;
    Ok(NtkSummary {
        sigma: cmp.sigma,
        relative_frobenius: cmp.relative_frobenius,
        max_abs: cmp.max_abs,
        one_step_relative_error: step.relative_error,
        warnings: cmp.warnings,
    })
}

/// Columns `step, series, index, simulated, analytic`. Returns the largest
/// mode deviation relative to `s/d` and the largest loss deviation relative
/// to the initial loss.
fn write_comparison(
    s: &TrajectorySeries,
    curves: &AnalyticCurves,
    dec: &ModeDecomposition,
    dir: &Path,
) -> Result<(f64, f64)> {
    let asymptotes: Vec<f64> = match dec.d() {
        Some(d) => dec.s.iter().zip(d).map(|(s, d)| s / d).collect(),
        None => dec.s.clone(),
    };
    let loss_scale = s.loss[0].max(f64::MIN_POSITIVE);
    let mut w = csv::Writer::from_writer(create(&dir.join("compare.csv"))?);
    w.write_record(["step", "series", "index", "simulated", "analytic"])?;
    let (mut worst_mode, mut worst_loss) = (0.0_f64, 0.0_f64);
    for (k, &step) in s.steps.iter().enumerate() {
        let row = |name: &str, i: usize, sim: f64, exact: f64| {
            [
                step.to_string(),
                name.into(),
                i.to_string(),
                format!("{sim:?}"),
                format!("{exact:?}"),
            ]
        };
        w.write_record(row("loss", 0, s.loss[k], curves.loss[k]))?;
        worst_loss = worst_loss.max((s.loss[k] - curves.loss[k]).abs() / loss_scale);
        if let Some(modes) = s.modes.get(k) {
            for (a, (&sim, &exact)) in modes.iter().zip(&curves.modes[k]).enumerate() {
                w.write_record(row("mode", a, sim, exact))?;
                worst_mode = worst_mode.max((sim - exact).abs() / asymptotes[a]);
            }
        }
    }
    w.flush()?;
    Ok((worst_mode, worst_loss))
}

fn dominance(
    spec: &DominanceSpec,
    s: &TrajectorySeries,
    d: &Dataset,
    timing: &TimingSummary,
) -> Result<DominanceSummary> {
    anyhow::ensure!(
        spec.sample < d.samples()
            && spec.leader < d.n_out()
            && spec.followers.iter().all(|&f| f < d.n_out()),
        "dominance: sample or output index out of range"
    );
    let target = d.y.column(spec.sample).norm();
    let until = timing.t_diff;
    let mut onset = None;
    let mut margin: Option<f64> = None;
    for (t, out) in s.times.iter().zip(&s.outputs) {
        if until.is_some_and(|u| *t > u) {
            break;
        }
        let col = out.column(spec.sample);
        if onset.is_none() && col.norm() >= spec.onset_fraction * target {
            onset = Some(*t);
        }
        if onset.is_some() {
            let rest = spec
                .followers
                .iter()
                .map(|&f| col[f].abs())
                .fold(0.0, f64::max);
            let m = col[spec.leader].abs() - rest;
            margin = Some(margin.map_or(m, |x| x.min(m)));
        }
    }
    Ok(DominanceSummary {
        onset,
        until,
        min_margin: margin,
        holds: until.is_some() && margin.is_some_and(|m| m > 0.0),
    })
}

/// Columns `t, level, expected_tnr`. Returns the per-level minimum.
fn write_expected_tnr(
    s: &TrajectorySeries,
    m: &MetricsSeries,
    d: &Dataset,
    cfg: &ocs_core::response::DiscretizationConfig,
    dir: &Path,
) -> Result<Vec<Option<f64>>> {
    let mut w = csv::Writer::from_writer(create(&dir.join("expected_tnr.csv"))?);
    w.write_record(["t", "level", "expected_tnr"])?;
    let mut mins: Vec<Option<f64>> = vec![None; d.level_slices.len()];
    for (t, out) in m.times.iter().zip(&s.outputs) {
        let e = expected_mean_tnr(out, d, cfg).context("response_model")?;
        for (level, v) in e.iter().enumerate() {
            if let Some(v) = v {
                w.write_record([format!("{t:?}"), level.to_string(), format!("{v:?}")])?;
                mins[level] = Some(mins[level].map_or(*v, |x: f64| x.min(*v)));
            }
        }
    }
    w.flush()?;
    Ok(mins)
}

/// Output directory for a command, honouring `--out`.
pub fn resolve_out(cfg: &mut ExperimentConfig, out: Option<PathBuf>) {
    if let Some(o) = out {
        cfg.out = Some(o);
    }
}

pub fn print_report(report: &RunReport, mut w: impl Write) -> std::io::Result<()> {
    writeln!(
        w,
        "{}: {} condition(s)",
        report.name,
        report.conditions.len()
    )?;
    for c in &report.conditions {
        let mut line = format!("  {}", c.name);
        if let Some(t) = &c.training {
            line += &format!(" final_loss={:.3e}", t.final_loss);
        }
        if let Some(t) = &c.timing {
            let f = |v: Option<f64>| v.map_or("never".to_string(), |v| format!("{v:.0}"));
            line += &format!(" t_ocs={} t_diff={}", f(t.t_ocs), f(t.t_diff));
        }
        if let Some(a) = c.analytic.as_ref().and_then(|a| a.max_mode_deviation) {
            line += &format!(" mode_dev={a:.2e}");
        }
        if let Some(n) = &c.ntk {
            line += &format!(" ntk_err={:.2e}", n.relative_frobenius);
        }
        if let Some(dm) = &c.dominance {
            line += &format!(" dominance={}", dm.holds);
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}
