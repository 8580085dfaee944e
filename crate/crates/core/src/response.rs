//! Discrete multi-choice responses from continuous outputs: a tempered
//! softmax followed by sampling without replacement, and exact expectations
//! over all response sets.

use itertools::Itertools;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::metrics::tnr;
use crate::task_data::{Dataset, LevelSlice};

/// Largest output count for exact subset enumeration.
pub const MAX_ENUMERATION_OUTPUTS: usize = 25;
/// Largest number of ordered draws enumerated for one expectation.
pub const MAX_ORDERED_DRAWS: u128 = 50_000_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureRule {
    /// Logits are `ŷ / temperature`.
    #[default]
    Divide,
    /// Logits are `ŷ · temperature`.
    Multiply,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscretizationConfig {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_picks")]
    pub picks: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub rule: TemperatureRule,
}

fn default_temperature() -> f64 {
    0.2
}

fn default_picks() -> usize {
    3
}

impl Default for DiscretizationConfig {
    fn default() -> Self {
        DiscretizationConfig {
            temperature: default_temperature(),
            picks: default_picks(),
            seed: 0,
            rule: TemperatureRule::Divide,
        }
    }
}

impl DiscretizationConfig {
    pub fn validate(&self, n_out: usize) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.picks == 0 || self.picks > n_out {
            return Err(Error::InvalidConfig(format!(
                "picks must be in 1..={n_out}, got {}",
                self.picks
            )));
        }
        Ok(())
    }

    fn logits(&self, y_hat: &Vector) -> Result<Vec<f64>> {
        if y_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("response outputs"));
        }
        Ok(y_hat
            .iter()
            .map(|v| match self.rule {
                TemperatureRule::Divide => v / self.temperature,
                TemperatureRule::Multiply => v * self.temperature,
            })
            .collect())
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax probabilities of the full output vector.
pub fn response_probabilities(y_hat: &Vector, cfg: &DiscretizationConfig) -> Result<Vector> {
    let z = cfg.logits(y_hat)?;
    let lse = log_sum_exp(z.iter().copied());
    Ok(Vector::from_iterator(
        z.len(),
        z.iter().map(|v| (v - lse).exp()),
    ))
}

/// Draw `picks` distinct outputs, each with softmax probability renormalised
/// over the outputs not yet chosen.
pub fn discretize<R: Rng + ?Sized>(
    y_hat: &Vector,
    cfg: &DiscretizationConfig,
    rng: &mut R,
) -> Result<Vector> {
    cfg.validate(y_hat.len())?;
    let z = cfg.logits(y_hat)?;
    let mut chosen = vec![false; z.len()];
    for _ in 0..cfg.picks {
        let remaining = || z.iter().zip(&chosen).filter(|(_, &c)| !c).map(|(v, _)| *v);
        let lse = log_sum_exp(remaining());
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = None;
        for (i, v) in z.iter().enumerate() {
            if chosen[i] {
                continue;
            }
            pick = Some(i);
            acc += (v - lse).exp();
            if u < acc {
                break;
            }
        }
        // rounding can leave `acc` a hair below 1; fall back to the last candidate
        chosen[pick.expect("picks <= outputs")] = true;
    }
    Ok(Vector::from_iterator(
        z.len(),
        chosen.iter().map(|&c| if c { 1.0 } else { 0.0 }),
    ))
}

/// Probability that the response set equals `subset`, summed over every
/// order in which it can be drawn.
pub fn subset_probability(
    y_hat: &Vector,
    cfg: &DiscretizationConfig,
    subset: &[usize],
) -> Result<f64> {
    cfg.validate(y_hat.len())?;
    if subset.len() != cfg.picks {
        return Err(Error::InvalidIndexSet(format!(
            "expected {} indices, got {}",
            cfg.picks,
            subset.len()
        )));
    }
    if let Some(&bad) = subset.iter().find(|&&i| i >= y_hat.len()) {
        return Err(Error::InvalidIndexSet(format!("index {bad} out of range")));
    }
    if subset.iter().duplicates().next().is_some() {
        return Err(Error::InvalidIndexSet("duplicate indices".into()));
    }
    let z = cfg.logits(y_hat)?;
    Ok(subset_probability_from_logits(&z, subset))
}

fn subset_probability_from_logits(z: &[f64], subset: &[usize]) -> f64 {
    let mut chosen = vec![false; z.len()];
    subset
        .iter()
        .permutations(subset.len())
        .map(|order| {
            chosen.iter_mut().for_each(|c| *c = false);
            let mut log_p = 0.0;
            for &&s in &order {
                let lse = log_sum_exp(z.iter().zip(&chosen).filter(|(_, &c)| !c).map(|(v, _)| *v));
                log_p += z[s] - lse;
                chosen[s] = true;
            }
            log_p.exp()
        })
        .sum()
}

fn enumeration_guard(n_out: usize, picks: usize) -> Result<()> {
    if n_out > MAX_ENUMERATION_OUTPUTS {
        return Err(Error::SizeGuard {
            what: "response enumeration outputs",
            size: n_out,
            limit: MAX_ENUMERATION_OUTPUTS,
        });
    }
    let ordered: u128 = (0..picks as u128).map(|j| n_out as u128 - j).product();
    if ordered > MAX_ORDERED_DRAWS {
        return Err(Error::SizeGuard {
            what: "ordered response draws",
            size: usize::try_from(ordered).unwrap_or(usize::MAX),
            limit: MAX_ORDERED_DRAWS as usize,
        });
    }
    Ok(())
}

/// Every response set with its probability.
pub fn subset_distribution(
    y_hat: &Vector,
    cfg: &DiscretizationConfig,
) -> Result<Vec<(Vec<usize>, f64)>> {
    cfg.validate(y_hat.len())?;
    enumeration_guard(y_hat.len(), cfg.picks)?;
    let z = cfg.logits(y_hat)?;
    Ok((0..z.len())
        .combinations(cfg.picks)
        .map(|s| {
            let p = subset_probability_from_logits(&z, &s);
            (s, p)
        })
        .collect())
}

pub fn indicator(n: usize, subset: &[usize]) -> Vector {
    let mut v = Vector::zeros(n);
    for &i in subset {
        v[i] = 1.0;
    }
    v
}

/// Indicator of the `k` largest outputs (lowest index wins ties).
pub fn top_k_indicator(y_hat: &Vector, k: usize) -> Vector {
    let mut idx: Vec<usize> = (0..y_hat.len()).collect();
    idx.sort_by(|&a, &b| {
        y_hat[b]
            .partial_cmp(&y_hat[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    indicator(y_hat.len(), &idx[..k.min(idx.len())])
}

/// Exact expectation of the per-level TNR of the discrete response.
pub fn expected_tnr(
    y_hat: &Vector,
    y: &Vector,
    slices: &[LevelSlice],
    cfg: &DiscretizationConfig,
) -> Result<Vec<Option<f64>>> {
    if y.len() != y_hat.len() {
        return Err(dim_mismatch("expected TNR targets", y_hat.len(), y.len()));
    }
    let dist = subset_distribution(y_hat, cfg)?;
    let mut acc: Vec<Option<f64>> = tnr(y, y, slices)?.iter().map(|v| v.map(|_| 0.0)).collect();
    for (s, p) in dist {
        let rates = tnr(&indicator(y.len(), &s), y, slices)?;
        for (a, r) in acc.iter_mut().zip(rates) {
            if let (Some(a), Some(r)) = (a.as_mut(), r) {
                *a += p * r;
            }
        }
    }
    Ok(acc)
}

/// Expected TNR per level averaged over the samples of `d`.
pub fn expected_mean_tnr(
    outputs: &Matrix,
    d: &Dataset,
    cfg: &DiscretizationConfig,
) -> Result<Vec<Option<f64>>> {
    if outputs.shape() != d.y.shape() {
        return Err(dim_mismatch(
            "expected TNR outputs",
            format!("{:?}", d.y.shape()),
            format!("{:?}", outputs.shape()),
        ));
    }
    let mut sums = vec![(0.0, 0usize); d.level_slices.len()];
    for i in 0..d.samples() {
        let e = expected_tnr(
            &outputs.column(i).into_owned(),
            &d.y.column(i).into_owned(),
            &d.level_slices,
            cfg,
        )?;
        for (acc, v) in sums.iter_mut().zip(e) {
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

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub standard_error: f64,
}

/// Sampled estimate of the per-level TNR of the discrete response.
pub fn sampled_tnr<R: Rng + ?Sized>(
    y_hat: &Vector,
    y: &Vector,
    slices: &[LevelSlice],
    cfg: &DiscretizationConfig,
    draws: usize,
    rng: &mut R,
) -> Result<Vec<Option<MonteCarloEstimate>>> {
    if draws < 2 {
        return Err(Error::InvalidConfig("need at least two draws".into()));
    }
    let mut sums = vec![(0.0, 0.0); slices.len()];
    let mut defined = vec![true; slices.len()];
    for _ in 0..draws {
        let r = discretize(y_hat, cfg, rng)?;
        for (k, v) in tnr(&r, y, slices)?.into_iter().enumerate() {
            match v {
                Some(v) => {
                    sums[k].0 += v;
                    sums[k].1 += v * v;
                }
                None => defined[k] = false,
            }
        }
    }
    let n = draws as f64;
    Ok(sums
        .into_iter()
        .zip(defined)
        .map(|((s, s2), ok)| {
            ok.then(|| {
                let mean = s / n;
                let var = ((s2 - n * mean * mean) / (n - 1.0)).max(0.0);
                MonteCarloEstimate {
                    mean,
                    standard_error: (var / n).sqrt(),
                }
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task_data::{build_hierarchy, HierarchySpec};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn cfg(temperature: f64, picks: usize) -> DiscretizationConfig {
        DiscretizationConfig {
            temperature,
            picks,
            ..Default::default()
        }
    }

    fn n_choose_k(n: usize, k: usize) -> usize {
        (0..k).fold(1, |acc, j| acc * (n - j) / (j + 1))
    }

    #[test]
    fn exactly_k_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = Vector::from_fn(15, |i, _| (i as f64 * 0.37).sin());
        for _ in 0..100 {
            let r = discretize(&y, &cfg(0.2, 3), &mut rng).unwrap();
            assert_eq!(r.sum(), 3.0);
            assert!(r.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn dominant_entry_always_chosen() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut y = Vector::zeros(15);
        y[6] = 100.0;
        for _ in 0..1000 {
            assert_eq!(discretize(&y, &cfg(1.0, 3), &mut rng).unwrap()[6], 1.0);
        }
    }

    #[test]
    fn low_temperature_is_top_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = Vector::from_vec(vec![0.1, 0.5, 0.3, 0.9, 0.2, 0.6]);
        let top = top_k_indicator(&y, 3);
        for _ in 0..100 {
            assert_eq!(discretize(&y, &cfg(1e-6, 3), &mut rng).unwrap(), top);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = Vector::from_vec(vec![0.1, f64::NAN, 0.2]);
        assert!(discretize(&y, &cfg(0.2, 2), &mut rng).is_err());
        let y = Vector::from_vec(vec![0.1, 0.2]);
        assert!(discretize(&y, &cfg(0.2, 3), &mut rng).is_err());
        assert!(discretize(&y, &cfg(0.0, 1), &mut rng).is_err());
        assert!(subset_probability(&y, &cfg(0.2, 2), &[1, 1]).is_err());
        assert!(subset_probability(&y, &cfg(0.2, 2), &[0]).is_err());
        assert!(subset_probability(&y, &cfg(0.2, 2), &[0, 5]).is_err());
    }

    #[test]
    fn uniform_draws_pass_chi_square() {
        let n = 7;
        let k = 3;
        let y = Vector::zeros(n);
        let subsets: Vec<Vec<usize>> = (0..n).combinations(k).collect();
        let mut counts = vec![0usize; subsets.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = 100_000;
        for _ in 0..draws {
            let r = discretize(&y, &cfg(0.2, k), &mut rng).unwrap();
            let s: Vec<usize> = (0..n).filter(|&i| r[i] == 1.0).collect();
            counts[subsets.iter().position(|x| *x == s).unwrap()] += 1;
        }
        let expected = draws as f64 / subsets.len() as f64;
        let stat: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        let dist = ChiSquared::new((subsets.len() - 1) as f64).unwrap();
        let p = 1.0 - dist.cdf(stat);
        assert!(p > 0.001, "chi-square p = {p}");
    }

    #[test]
    fn probabilities_sum_to_one() {
        let y = Vector::from_fn(15, |i, _| 0.2 * (i as f64).cos());
        let total: f64 = subset_distribution(&y, &cfg(0.2, 3))
            .unwrap()
            .iter()
            .map(|(_, p)| p)
            .sum();
        assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn single_pick_is_softmax() {
        let y = Vector::from_vec(vec![0.3, -0.2, 0.8, 0.1]);
        let c = cfg(0.2, 1);
        let p = response_probabilities(&y, &c).unwrap();
        for i in 0..4 {
            assert!((subset_probability(&y, &c, &[i]).unwrap() - p[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_subset_probability() {
        let y = Vector::from_element(15, 0.4);
        let p = subset_probability(&y, &cfg(0.2, 3), &[2, 9, 11]).unwrap();
        assert!((p - 1.0 / 455.0).abs() < 1e-15);
        assert_eq!(n_choose_k(15, 3), 455);
    }

    #[test]
    fn enumeration_guard_applies() {
        let y = Vector::zeros(30);
        assert!(matches!(
            subset_distribution(&y, &cfg(0.2, 3)),
            Err(Error::SizeGuard { .. })
        ));
        let y = Vector::zeros(20);
        assert!(subset_distribution(&y, &cfg(0.2, 10)).is_err());
    }

    #[test]
    fn zero_temperature_limit_is_point_mass() {
        let d = build_hierarchy(&HierarchySpec::human_task()).unwrap();
        let y = d.y.column(2).into_owned();
        let yh = Vector::from_fn(14, |i, _| 0.05 * i as f64 + 0.01 * (i % 3) as f64);
        let e = expected_tnr(&yh, &y, &d.level_slices, &cfg(1e-9, 3)).unwrap();
        let direct = tnr(&top_k_indicator(&yh, 3), &y, &d.level_slices).unwrap();
        assert_eq!(e, direct);
    }

    #[test]
    fn uniform_outputs_match_hypergeometric_count() {
        // three picks uniformly among 14 outputs; a level of size m with one
        // positive target keeps m - 1 zero entries, each hit with
        // probability 3/14
        let d = build_hierarchy(&HierarchySpec::human_task()).unwrap();
        let y = d.y.column(0).into_owned();
        let e = expected_tnr(&Vector::zeros(14), &y, &d.level_slices, &cfg(0.2, 3)).unwrap();
        for v in e {
            assert!((v.unwrap() - (1.0 - 3.0 / 14.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn sampled_estimate_has_small_error() {
        let d = build_hierarchy(&HierarchySpec::human_task()).unwrap();
        let y = d.y.column(5).into_owned();
        let yh = Vector::from_fn(14, |i, _| 0.1 * ((i * 7) % 5) as f64);
        let c = cfg(0.2, 3);
        let exact = expected_tnr(&yh, &y, &d.level_slices, &c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mc = sampled_tnr(&yh, &y, &d.level_slices, &c, 20_000, &mut rng).unwrap();
        for (e, m) in exact.iter().zip(&mc) {
            let m = m.unwrap();
            assert!((e.unwrap() - m.mean).abs() <= 4.0 * m.standard_error);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn shift_invariance(
            raw in prop::collection::vec(-1.0f64..1.0, 14), shift in -5.0f64..5.0,
        ) {
            let d = build_hierarchy(&HierarchySpec::human_task()).unwrap();
            let y = d.y.column(1).into_owned();
            let yh = Vector::from_vec(raw);
            let c = cfg(0.2, 3);
            let a = expected_tnr(&yh, &y, &d.level_slices, &c).unwrap();
            let b = expected_tnr(&yh.add_scalar(shift), &y, &d.level_slices, &c).unwrap();
            for (a, b) in a.iter().zip(&b) {
                prop_assert!((a.unwrap() - b.unwrap()).abs() < 1e-10);
            }
        }

        #[test]
        fn raising_a_false_alarm_lowers_expected_tnr(
            raw in prop::collection::vec(-1.0f64..1.0, 14), bump in 0.01f64..1.0,
        ) {
            let d = build_hierarchy(&HierarchySpec::human_task()).unwrap();
            let y = d.y.column(4).into_owned();
            let yh = Vector::from_vec(raw);
            let c = cfg(0.2, 3);
            let before = expected_tnr(&yh, &y, &d.level_slices, &c).unwrap();
            for (level, &(s, e)) in d.level_slices.iter().enumerate() {
                let Some(i) = (s..e).find(|&i| y[i] == 0.0) else { continue };
                let mut up = yh.clone();
                up[i] += bump;
                let after = expected_tnr(&up, &y, &d.level_slices, &c).unwrap();
                prop_assert!(after[level].unwrap() <= before[level].unwrap() + 1e-12);
            }
        }
    }
}
