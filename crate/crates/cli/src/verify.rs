use std::io::Write;

use clap::ValueEnum;
use ocs_core::analytic::{deep_mode_trajectory, Depth, TrajectoryParams};
use ocs_core::linalg::{alignment, cosine, gaussian_matrix, ones};
use ocs_core::metrics::{metrics_series, ocs_baseline_tnr, timing_summary, tnr, tpr};
use ocs_core::network::{init_network, BiasPlacement, InitMode, NetworkConfig};
use ocs_core::ntk::{ntk_compare, ntk_direct, ntk_output_step, OutputBiasTerm};
use ocs_core::response::{
    expected_tnr, sampled_tnr, subset_distribution, top_k_indicator, DiscretizationConfig,
};
use ocs_core::spectral::{
    commutator_check, constant_mode_transfer, correlation_matrices, ocs_vector, task_svd,
    ModeDecomposition,
};
use ocs_core::task_data::{augment_bias, build_hierarchy, Dataset, HierarchySpec};
use ocs_core::trainer::{train, TrainConfig, MIN_TAU};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Spectral,
    Dynamics,
    Ntk,
    Metrics,
    Response,
    All,
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    /// Step size of the dynamics trajectory check; defaults to `tau = 1000`.
    pub learning_rate: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Verdict {
    pub suite: &'static str,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    fn new(suite: &'static str, name: &'static str, pass: bool, detail: String) -> Self {
        Verdict {
            suite,
            name,
            pass,
            detail,
        }
    }
}

pub fn run(suite: Suite, opts: VerifyOptions) -> Vec<Verdict> {
    let suites: &[Suite] = match suite {
        Suite::All => &[
            Suite::Spectral,
            Suite::Dynamics,
            Suite::Ntk,
            Suite::Metrics,
            Suite::Response,
        ],
        _ => std::slice::from_ref(&suite),
    };
    let mut out = Vec::new();
    for s in suites {
        match s {
            Suite::Spectral => spectral(&mut out),
            Suite::Dynamics => dynamics(&mut out, opts),
            Suite::Ntk => ntk(&mut out),
            Suite::Metrics => metrics(&mut out),
            Suite::Response => response(&mut out, opts.seed),
            Suite::All => unreachable!(),
        }
    }
    out
}

pub fn print(verdicts: &[Verdict], mut w: impl Write) -> std::io::Result<()> {
    for v in verdicts {
        let status = if v.pass { "PASS" } else { "FAIL" };
        writeln!(w, "{status}  {}/{}: {}", v.suite, v.name, v.detail)?;
    }
    let failed = verdicts.iter().filter(|v| !v.pass).count();
    writeln!(w, "{} passed, {failed} failed", verdicts.len() - failed)
}

fn hierarchy(include_root: bool) -> Dataset {
    build_hierarchy(&HierarchySpec {
        include_root,
        ..HierarchySpec::default()
    })
    .expect("default hierarchy is valid")
}

fn decompose(d: &Dataset) -> ocs_core::Result<ModeDecomposition> {
    task_svd(&correlation_matrices(d))
}

fn deep_config(d: &Dataset, bias: BiasPlacement, init: InitMode, scale: f64) -> NetworkConfig {
    NetworkConfig {
        depth: Depth::Deep,
        n_in: d.n_in(),
        n_hid: 20,
        n_out: d.n_out(),
        bias,
        init,
        init_scale: scale,
        seed: 5,
    }
}

fn spectral(out: &mut Vec<Verdict>) {
    const S: &str = "spectral";
    let mut worst: f64 = 0.0;
    for root in [true, false] {
        let d = hierarchy(root);
        worst = worst.max(commutator_check(&d, 1e-12).residual);
        if let Ok(a) = augment_bias(&d) {
            worst = worst.max(commutator_check(&a, 1e-12).residual);
        }
    }
    out.push(Verdict::new(
        S,
        "commutator",
        worst <= 1e-12,
        format!("residual {worst:.1e} (limit 1e-12)"),
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let random = Dataset::new(
        "random",
        gaussian_matrix(6, 8, 1.0, &mut rng),
        gaussian_matrix(5, 8, 1.0, &mut rng),
        vec![(0, 5)],
        false,
    );
    let counter = random
        .map(|r| commutator_check(&r, 1e-12).residual)
        .unwrap_or(0.0);
    out.push(Verdict::new(
        S,
        "commutator_counterexample",
        counter > 1e-3,
        format!("random task residual {counter:.3} (needs > 1e-3)"),
    ));

    let d = hierarchy(true);
    let shift = augment_bias(&d).map(|a| {
        let n = d.samples() as f64;
        let u = ones(d.samples()) / n.sqrt();
        let q = |x: &ocs_core::Matrix| u.dot(&(x.transpose() * x * &u)) / n;
        q(&a.x) - q(&d.x)
    });
    match shift {
        Ok(s) => out.push(Verdict::new(
            S,
            "eigenvalue_shift",
            (s - 1.0).abs() <= 1e-10,
            format!("constant-mode shift {s:.12} (expected 1)"),
        )),
        Err(e) => out.push(Verdict::new(S, "eigenvalue_shift", false, e.to_string())),
    }

    let mut worst_align: f64 = 1.0;
    let mut worst_transfer: f64 = 0.0;
    let mut worst_reconstruct: f64 = 0.0;
    let mut failure = None;
    for root in [true, false] {
        let a = match augment_bias(&hierarchy(root)) {
            Ok(a) => a,
            Err(e) => {
                failure = Some(e.to_string());
                continue;
            }
        };
        match decompose(&a) {
            Ok(dec) => {
                worst_align = worst_align.min(alignment(&dec.u_col(0), &ocs_vector(&a)));
                let pair = correlation_matrices(&a);
                let scale = pair.sigma_yx.norm();
                worst_reconstruct =
                    worst_reconstruct.max((dec.reconstruct() - pair.sigma_yx).norm() / scale);
            }
            Err(e) => failure = Some(e.to_string()),
        }
        for m in [&a.y, &a.x] {
            let t = constant_mode_transfer(m);
            worst_transfer = worst_transfer
                .max(t.sample_residual)
                .max(t.feature_residual)
                .max(t.eigenvalue_gap());
        }
    }
    out.push(Verdict::new(
        S,
        "leading_ocs_mode",
        failure.is_none() && worst_align >= 1.0 - 1e-8,
        failure
            .clone()
            .unwrap_or(format!("alignment {worst_align:.12} (limit 1 - 1e-8)")),
    ));
    out.push(Verdict::new(
        S,
        "eigenvalue_transfer",
        worst_transfer <= 1e-10,
        format!("residual {worst_transfer:.1e} (limit 1e-10)"),
    ));
    out.push(Verdict::new(
        S,
        "reconstruction",
        failure.is_none() && worst_reconstruct <= 1e-12,
        format!("relative residual {worst_reconstruct:.1e} (limit 1e-12)"),
    ));
}

fn dynamics(out: &mut Vec<Verdict>, opts: VerifyOptions) {
    const S: &str = "dynamics";
    let d = hierarchy(true);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst: f64 = 0.0;
    let mut failure = None;
    for (depth, bias) in [
        (Depth::Deep, BiasPlacement::None),
        (Depth::Deep, BiasPlacement::Input),
        (Depth::Deep, BiasPlacement::Output),
        (Depth::Deep, BiasPlacement::Both),
        (Depth::Shallow, BiasPlacement::None),
        (Depth::Shallow, BiasPlacement::Output),
    ] {
        let cfg = NetworkConfig {
            depth,
            ..deep_config(&d, bias, InitMode::RandomSmall, 0.5)
        };
        match gradient_error(&cfg, &d, &mut rng) {
            Ok(e) => worst = worst.max(e),
            Err(e) => failure = Some(e.to_string()),
        }
    }
    out.push(Verdict::new(
        S,
        "gradients",
        failure.is_none() && worst <= 1e-6,
        failure.unwrap_or(format!(
            "worst relative error {worst:.1e} over 30 coordinates (limit 1e-6)"
        )),
    ));

    out.push(trajectory_check(&d, opts.learning_rate));

    let route = (|| -> ocs_core::Result<f64> {
        let cfg = deep_config(&d, BiasPlacement::Input, InitMode::RandomSmall, 0.5);
        let mut net = init_network(&cfg, None)?;
        let p: Vec<f64> = net
            .parameters()
            .iter()
            .map(|_| rng.random_range(-0.5..0.5))
            .collect();
        net.set_parameters(&p)?;
        let folded = net.fold_input_bias(1.0)?;
        let aug = augment_bias(&d)?;
        Ok((net.forward(&d.x) - folded.forward(&aug.x)).amax())
    })();
    out.push(match route {
        Ok(e) => Verdict::new(
            S,
            "bias_routes",
            e <= 1e-12,
            format!("explicit vs augmented output difference {e:.1e} (limit 1e-12)"),
        ),
        Err(e) => Verdict::new(S, "bias_routes", false, e.to_string()),
    });
}

fn gradient_error(cfg: &NetworkConfig, d: &Dataset, rng: &mut ChaCha8Rng) -> ocs_core::Result<f64> {
    let mut net = init_network(cfg, None)?;
    let p0: Vec<f64> = net
        .parameters()
        .iter()
        .map(|_| rng.random_range(-0.5..0.5))
        .collect();
    net.set_parameters(&p0)?;
    let (_, g) = net.loss_and_gradients(d)?;
    let g = g.flatten();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let k = rng.random_range(0..p0.len());
        let mut p = p0.clone();
        p[k] = p0[k] + h;
        net.set_parameters(&p)?;
        let up = net.loss(d)?;
        p[k] = p0[k] - h;
        net.set_parameters(&p)?;
        let down = net.loss(d)?;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((fd - g[k]).abs() / g[k].abs().max(fd.abs()).max(f64::MIN_POSITIVE));
    }
    Ok(worst)
}

/// Simulated mode strengths against the closed form over `20 tau / s0` steps.
fn trajectory_check(d: &Dataset, learning_rate: Option<f64>) -> Verdict {
    const S: &str = "dynamics";
    let samples = d.samples();
    let lr = learning_rate.unwrap_or(1.0 / (1000.0 * samples as f64));
    let probe = TrainConfig {
        learning_rate: lr,
        steps: 0,
        log_stride: 1,
        record_outputs: false,
    };
    let tau = probe.tau(samples);
    let guard = !probe.in_gradient_flow_regime(samples);
    let run = || -> ocs_core::Result<f64> {
        let dec = decompose(d)?;
        let a0 = 1e-4;
        let mut net = init_network(
            &deep_config(d, BiasPlacement::None, InitMode::Spectral, a0),
            Some(&dec),
        )?;
        let steps = ((20.0 * tau / dec.s[0]).ceil() as usize).min(200_000);
        let stride = (steps / 400).max(1);
        let cfg = TrainConfig {
            steps,
            log_stride: stride,
            ..probe.clone()
        };
        let series = train(&mut net, d, &cfg, Some(&dec))?;
        let eig = dec.d().ok_or(ocs_core::Error::MissingEigenvalues)?;
        let mut worst: f64 = 0.0;
        for (t, modes) in series.times.iter().zip(&series.modes) {
            for (a, &sim) in modes.iter().enumerate() {
                let p = TrajectoryParams {
                    s: dec.s[a],
                    d: eig[a],
                    a0,
                    tau,
                    depth: Depth::Deep,
                };
                worst = worst.max((sim - deep_mode_trajectory(&p, *t)?).abs() / p.asymptote());
            }
        }
        Ok(worst)
    };
    let guard_note =
        format!("gradient-flow guard: tau = {tau:.3e} is below {MIN_TAU}, step size too large");
    match run() {
        Ok(dev) if !guard => Verdict::new(
            S,
            "trajectory",
            dev <= 0.01,
            format!("max relative mode deviation {dev:.2e} at tau = {tau} (limit 1e-2)"),
        ),
        Ok(dev) => Verdict::new(
            S,
            "trajectory",
            false,
            format!("{guard_note}; deviation {dev:.2e}"),
        ),
        Err(e) if guard => Verdict::new(S, "trajectory", false, format!("{guard_note}; {e}")),
        Err(e) => Verdict::new(S, "trajectory", false, e.to_string()),
    }
}

fn ntk(out: &mut Vec<Verdict>) {
    const S: &str = "ntk";
    let mut worst_kernel: f64 = 0.0;
    let mut worst_step: f64 = 0.0;
    let mut worst_asym: f64 = 0.0;
    let mut min_eig = f64::INFINITY;
    let mut failure = None;
    for root in [true, false] {
        let d = hierarchy(root);
        for bias in [
            BiasPlacement::None,
            BiasPlacement::Input,
            BiasPlacement::Output,
            BiasPlacement::Both,
        ] {
            let r = (|| -> ocs_core::Result<()> {
                let net =
                    init_network(&deep_config(&d, bias, InitMode::ExactIsotropy, 1e-2), None)?;
                worst_kernel = worst_kernel
                    .max(ntk_compare(&net, &d, OutputBiasTerm::PerUnit)?.relative_frobenius);
                worst_step = worst_step.max(ntk_output_step(&net, &d, 1e-4)?.relative_error);
                let k = ntk_direct(&net, &d)?;
                worst_asym = worst_asym.max(k.asymmetry());
                min_eig = min_eig.min(k.min_eigenvalue() / k.matrix.amax());
                Ok(())
            })();
            if let Err(e) = r {
                failure = Some(e.to_string());
            }
        }
    }
    let fail_or = |msg: String| failure.clone().unwrap_or(msg);
    out.push(Verdict::new(
        S,
        "closed_form",
        failure.is_none() && worst_kernel <= 1e-10,
        fail_or(format!(
            "relative error {worst_kernel:.1e} over 4 placements (limit 1e-10)"
        )),
    ));
    out.push(Verdict::new(
        S,
        "one_step",
        failure.is_none() && worst_step <= 1e-3,
        fail_or(format!(
            "prediction error {worst_step:.1e} at step 1e-4 (limit 1e-3)"
        )),
    ));
    out.push(Verdict::new(
        S,
        "symmetric_psd",
        failure.is_none() && worst_asym <= 1e-12 && min_eig >= -1e-10,
        fail_or(format!(
            "asymmetry {worst_asym:.1e}, smallest scaled eigenvalue {min_eig:.1e}"
        )),
    ));

    let d = hierarchy(true);
    let asym = (|| -> ocs_core::Result<(f64, f64)> {
        let net = init_network(
            &deep_config(&d, BiasPlacement::Both, InitMode::ExactIsotropy, 1e-3),
            None,
        )?;
        let (_, g) = net.loss_and_gradients(&d)?;
        let (b1, b2) = (g.b1.expect("input bias"), g.b2.expect("output bias"));
        Ok((b1.norm() / b2.norm(), cosine(&b2, &(-ocs_vector(&d))).abs()))
    })();
    out.push(match asym {
        Ok((ratio, cos)) => Verdict::new(
            S,
            "bias_gradient_asymmetry",
            ratio <= 2e-3 && cos >= 1.0 - 1e-10,
            format!(
                "norm ratio {ratio:.2e} (limit 2e-3), |cos(db2, -mean target)| = 1 - {:.1e}",
                1.0 - cos
            ),
        ),
        Err(e) => Verdict::new(S, "bias_gradient_asymmetry", false, e.to_string()),
    });
}

fn metrics(out: &mut Vec<Verdict>) {
    const S: &str = "metrics";
    let d = hierarchy(false);
    let leaf = d.level_slices.len() - 1;
    let base = ocs_baseline_tnr(&d).ok().and_then(|b| b[leaf]);
    out.push(Verdict::new(
        S,
        "ocs_baseline",
        base.is_some_and(|b| (b - 0.875).abs() < 1e-12),
        format!("leaf baseline {base:?} (expected 0.875)"),
    ));

    let complement = (|| -> ocs_core::Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut worst: f64 = 0.0;
        for i in 0..d.samples() {
            let y = d.y.column(i).into_owned();
            let y_hat = y.map(|v| (v + rng.random_range(-0.3..0.3)).clamp(0.0, 1.0));
            let flip = |v: &ocs_core::Vector| v.map(|x| 1.0 - x);
            for (a, b) in tnr(&y_hat, &y, &d.level_slices)?.iter().zip(tpr(
                &flip(&y_hat),
                &flip(&y),
                &d.level_slices,
            )?) {
                if let (Some(a), Some(b)) = (a, b) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        Ok(worst)
    })();
    out.push(match complement {
        Ok(e) => Verdict::new(
            S,
            "tnr_tpr_complement",
            e <= 1e-12,
            format!("TNR vs complemented TPR difference {e:.1e}"),
        ),
        Err(e) => Verdict::new(S, "tnr_tpr_complement", false, e.to_string()),
    });

    let timing = |bias| -> ocs_core::Result<ocs_core::metrics::TimingSummary> {
        let task = if bias == BiasPlacement::Input {
            augment_bias(&d)?
        } else {
            d.clone()
        };
        let dec = decompose(&task)?;
        let mut cfg = deep_config(&d, bias, InitMode::Spectral, 1e-4);
        cfg.n_hid = 16;
        let mut net = init_network(&cfg, Some(&dec))?;
        let s = train(
            &mut net,
            &d,
            &TrainConfig::from_tau(1000.0, d.samples(), 60_000, 20),
            None,
        )?;
        timing_summary(&metrics_series(&s, &d)?, &s.loss, 0.05)
    };
    let show = |v: Option<f64>| v.map_or("never".to_string(), |v| format!("{v:.0}"));
    out.push(
        match (timing(BiasPlacement::Input), timing(BiasPlacement::None)) {
            (Ok(b), Ok(n)) => Verdict::new(
                S,
                "early_ocs_timing",
                b.ocs_precedes(0.5) && n.no_early_ocs(),
                format!(
                    "bias t_ocs {} vs t_diff {}; no bias t_ocs {} vs t_diff {}",
                    show(b.t_ocs),
                    show(b.t_diff),
                    show(n.t_ocs),
                    show(n.t_diff)
                ),
            ),
            (Err(e), _) | (_, Err(e)) => Verdict::new(S, "early_ocs_timing", false, e.to_string()),
        },
    );
}

fn response(out: &mut Vec<Verdict>, seed: u64) {
    const S: &str = "response";
    let d = hierarchy(true);
    let ybar = ocs_vector(&d);
    let target = d.y.column(5).into_owned();
    let y_hat = &ybar + (&target - &ybar) * 0.3;
    let cfg = DiscretizationConfig::default();

    let mass = subset_distribution(&y_hat, &cfg).map(|v| v.iter().map(|(_, p)| p).sum::<f64>());
    out.push(match mass {
        Ok(m) => Verdict::new(
            S,
            "probability_mass",
            (m - 1.0).abs() <= 1e-12,
            format!("total {m:.15} (tolerance 1e-12)"),
        ),
        Err(e) => Verdict::new(S, "probability_mass", false, e.to_string()),
    });

    let mc = (|| -> ocs_core::Result<f64> {
        let exact = expected_tnr(&y_hat, &target, &d.level_slices, &cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let est = sampled_tnr(&y_hat, &target, &d.level_slices, &cfg, 200_000, &mut rng)?;
        Ok(exact
            .iter()
            .zip(&est)
            .filter_map(|(e, m)| {
                Some(((*e)? - m.as_ref()?.mean).abs() / m.as_ref()?.standard_error)
            })
            .fold(0.0, f64::max))
    })();
    out.push(match mc {
        Ok(z) => Verdict::new(
            S,
            "monte_carlo",
            z <= 3.0,
            format!("sampled TNR within {z:.2} standard errors of the exact value (limit 3)"),
        ),
        Err(e) => Verdict::new(S, "monte_carlo", false, e.to_string()),
    });

    let cold = (|| -> ocs_core::Result<bool> {
        let c = DiscretizationConfig {
            temperature: 1e-9,
            ..cfg
        };
        let top = top_k_indicator(&y_hat, cfg.picks);
        Ok(expected_tnr(&y_hat, &target, &d.level_slices, &c)?
            == tnr(&top, &target, &d.level_slices)?)
    })();
    out.push(match cold {
        Ok(eq) => Verdict::new(
            S,
            "cold_limit",
            eq,
            format!("zero-temperature TNR equals top-k TNR: {eq}"),
        ),
        Err(e) => Verdict::new(S, "cold_limit", false, e.to_string()),
    });
}
