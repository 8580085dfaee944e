//! Shallow and two-layer linear networks with optional bias terms.
//!
//! Forward pass: `Ŷ = W2 (W1 X + b1 1^T) + b2 1^T` for the deep network and
//! `Ŷ = Ws X + b 1^T` for the shallow one. With `E = Ŷ - Y` and
//! `H = W1 X + b1 1^T`, the gradients of `L = ½‖E‖²_F` are
//!
//! ```text
//! dW2 = E H^T     db2 = E 1
//! dW1 = W2^T E X^T   db1 = W2^T E 1
//! dWs = E X^T     db  = E 1
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytic::Depth;
use crate::error::{dim_mismatch, Error, Result};
use crate::linalg::{gaussian_matrix, ones, random_orthonormal, Matrix, Vector};
use crate::spectral::ModeDecomposition;
use crate::task_data::Dataset;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasPlacement {
    #[default]
    None,
    /// Hidden-layer bias `b1` (the only bias of a shallow network).
    Input,
    /// Output bias `b2`.
    Output,
    Both,
}

impl BiasPlacement {
    pub fn input(self) -> bool {
        matches!(self, BiasPlacement::Input | BiasPlacement::Both)
    }

    pub fn output(self) -> bool {
        matches!(self, BiasPlacement::Output | BiasPlacement::Both)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Balanced, aligned with the task modes, every mode at strength `init_scale`.
    #[default]
    Spectral,
    /// I.i.d. Gaussian entries with variance `init_scale² / fan`.
    RandomSmall,
    /// `W1^T W1 = σ² I` and `W2 W2^T = σ² I` exactly.
    ExactIsotropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub depth: Depth,
    pub n_in: usize,
    /// Ignored for shallow networks.
    pub n_hid: usize,
    pub n_out: usize,
    #[serde(default)]
    pub bias: BiasPlacement,
    #[serde(default)]
    pub init: InitMode,
    /// Mode strength for spectral init, weight scale otherwise.
    pub init_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_in == 0 || self.n_out == 0 || (self.depth == Depth::Deep && self.n_hid == 0) {
            return Err(Error::InfeasibleNetwork(
                "layer sizes must be positive".into(),
            ));
        }
        if !(self.init_scale > 0.0) || !self.init_scale.is_finite() {
            return Err(Error::InfeasibleNetwork(format!(
                "init scale must be positive, got {}",
                self.init_scale
            )));
        }
        if self.depth == Depth::Shallow && self.bias.input() {
            return Err(Error::InfeasibleNetwork(
                "a shallow network has a single bias; use the output placement or augment the inputs"
                    .into(),
            ));
        }
        if self.depth == Depth::Shallow && self.init == InitMode::ExactIsotropy {
            return Err(Error::InfeasibleNetwork(
                "exact isotropy is defined for two-layer networks".into(),
            ));
        }
        if self.init == InitMode::ExactIsotropy && self.n_hid < self.n_in.max(self.n_out) {
            return Err(Error::InfeasibleNetwork(format!(
                "exact isotropy needs n_hid >= max(n_in, n_out) = {}, got {}",
                self.n_in.max(self.n_out),
                self.n_hid
            )));
        }
        Ok(())
    }

    /// Whether some bias acts as a constant input feature.
    fn folds_input_bias(&self) -> bool {
        match self.depth {
            Depth::Deep => self.bias.input(),
            Depth::Shallow => self.bias.output(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState {
    pub depth: Depth,
    /// First layer (`N_hid x N_in`), or the only layer `Ws` (`N_out x N_in`).
    pub w1: Matrix,
    /// Second layer (`N_out x N_hid`); absent for shallow networks.
    pub w2: Option<Matrix>,
    /// Hidden bias; for shallow networks the single bias lives in `b2`.
    pub b1: Option<Vector>,
    pub b2: Option<Vector>,
    /// Orthonormal hidden basis `R` used by spectral init.
    pub hidden_basis: Option<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub w1: Matrix,
    pub w2: Option<Matrix>,
    pub b1: Option<Vector>,
    pub b2: Option<Vector>,
}

pub fn init_network(cfg: &NetworkConfig, dec: Option<&ModeDecomposition>) -> Result<NetworkState> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sigma = cfg.init_scale;
    let b1 = (cfg.depth == Depth::Deep && cfg.bias.input()).then(|| Vector::zeros(cfg.n_hid));
    let b2 = cfg.bias.output().then(|| Vector::zeros(cfg.n_out));
    let mut net = match (cfg.init, cfg.depth) {
        (InitMode::Spectral, _) => {
            let dec = dec.ok_or_else(|| {
                Error::InfeasibleNetwork("spectral init needs a mode decomposition".into())
            })?;
            return spectral_init(cfg, dec, &mut rng);
        }
        (InitMode::RandomSmall, Depth::Deep) => {
            let std = sigma / (cfg.n_hid as f64).sqrt();
            NetworkState {
                depth: Depth::Deep,
                w1: gaussian_matrix(cfg.n_hid, cfg.n_in, std, &mut rng),
                w2: Some(gaussian_matrix(cfg.n_out, cfg.n_hid, std, &mut rng)),
                b1: None,
                b2: None,
                hidden_basis: None,
            }
        }
        (InitMode::RandomSmall, Depth::Shallow) => {
            let std = sigma / (cfg.n_in as f64).sqrt();
            NetworkState {
                depth: Depth::Shallow,
                w1: gaussian_matrix(cfg.n_out, cfg.n_in, std, &mut rng),
                w2: None,
                b1: None,
                b2: None,
                hidden_basis: None,
            }
        }
        (InitMode::ExactIsotropy, _) => NetworkState {
            depth: Depth::Deep,
            w1: random_orthonormal(cfg.n_hid, cfg.n_in, &mut rng) * sigma,
            w2: Some(random_orthonormal(cfg.n_hid, cfg.n_out, &mut rng).transpose() * sigma),
            b1: None,
            b2: None,
            hidden_basis: None,
        },
    };
    net.b1 = b1;
    net.b2 = b2;
    Ok(net)
}

/// `W2 = U √A0 R^T`, `W1 = R √A0 V^T`, or `Ws = U A0 V^T`.
///
/// When the decomposition belongs to the bias-augmented task, its first input
/// coordinate is the constant feature and initialises the bias.
fn spectral_init(
    cfg: &NetworkConfig,
    dec: &ModeDecomposition,
    rng: &mut ChaCha8Rng,
) -> Result<NetworkState> {
    let r = dec.rank();
    if dec.u.nrows() != cfg.n_out {
        return Err(dim_mismatch(
            "spectral init outputs",
            cfg.n_out,
            dec.u.nrows(),
        ));
    }
    let augmented = dec.v.nrows() == cfg.n_in + 1;
    if augmented && !cfg.folds_input_bias() {
        return Err(Error::InfeasibleNetwork(
            "decomposition has a constant input feature but the network has no matching bias"
                .into(),
        ));
    }
    if !augmented && dec.v.nrows() != cfg.n_in {
        return Err(dim_mismatch(
            "spectral init inputs",
            cfg.n_in,
            dec.v.nrows(),
        ));
    }
    let split = |full: Matrix| -> (Option<Vector>, Matrix) {
        if augmented {
            let bias = full.column(0).into_owned();
            (Some(bias), full.columns(1, cfg.n_in).into_owned())
        } else {
            (None, full)
        }
    };

    match cfg.depth {
        Depth::Deep => {
            if cfg.n_hid < r {
                return Err(Error::InfeasibleNetwork(format!(
                    "spectral init needs n_hid >= rank {r}, got {}",
                    cfg.n_hid
                )));
            }
            let root = cfg.init_scale.sqrt();
            let basis = random_orthonormal(cfg.n_hid, r, rng);
            let w2 = &dec.u * basis.transpose() * root;
            let (b1, w1) = split(&basis * dec.v.transpose() * root);
            Ok(NetworkState {
                depth: Depth::Deep,
                w1,
                w2: Some(w2),
                b1: b1.or_else(|| cfg.bias.input().then(|| Vector::zeros(cfg.n_hid))),
                b2: cfg.bias.output().then(|| Vector::zeros(cfg.n_out)),
                hidden_basis: Some(basis),
            })
        }
        Depth::Shallow => {
            let (b, ws) = split(&dec.u * dec.v.transpose() * cfg.init_scale);
            Ok(NetworkState {
                depth: Depth::Shallow,
                w1: ws,
                w2: None,
                b1: None,
                b2: b.or_else(|| cfg.bias.output().then(|| Vector::zeros(cfg.n_out))),
                hidden_basis: None,
            })
        }
    }
}

impl NetworkState {
    pub fn n_in(&self) -> usize {
        self.w1.ncols()
    }

    pub fn n_out(&self) -> usize {
        match &self.w2 {
            Some(w2) => w2.nrows(),
            None => self.w1.nrows(),
        }
    }

    pub fn bias(&self) -> BiasPlacement {
        match (self.b1.is_some(), self.b2.is_some()) {
            (false, false) => BiasPlacement::None,
            (true, false) => BiasPlacement::Input,
            (false, true) => BiasPlacement::Output,
            (true, true) => BiasPlacement::Both,
        }
    }

    /// Hidden activity `W1 X + b1 1^T` (deep networks only).
    pub fn hidden(&self, x: &Matrix) -> Matrix {
        let mut h = &self.w1 * x;
        if let Some(b1) = &self.b1 {
            for mut col in h.column_iter_mut() {
                col += b1;
            }
        }
        h
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = match &self.w2 {
            Some(w2) => w2 * self.hidden(x),
            None => &self.w1 * x,
        };
        if let Some(b2) = &self.b2 {
            for mut col in y.column_iter_mut() {
                col += b2;
            }
        }
        y
    }

    fn check_data(&self, d: &Dataset) -> Result<()> {
        if d.n_in() != self.n_in() {
            return Err(dim_mismatch("network inputs", self.n_in(), d.n_in()));
        }
        if d.n_out() != self.n_out() {
            return Err(dim_mismatch("network outputs", self.n_out(), d.n_out()));
        }
        Ok(())
    }

    pub fn loss(&self, d: &Dataset) -> Result<f64> {
        self.check_data(d)?;
        Ok(0.5 * (self.forward(&d.x) - &d.y).norm_squared())
    }

    /// Loss and exact gradients of `½ ‖Ŷ - Y‖²_F`.
    pub fn loss_and_gradients(&self, d: &Dataset) -> Result<(f64, Gradients)> {
        self.check_data(d)?;
        Ok(self.loss_and_gradients_unchecked(&d.x, &d.y))
    }

    pub(crate) fn loss_and_gradients_unchecked(&self, x: &Matrix, y: &Matrix) -> (f64, Gradients) {
        let n = x.ncols();
        let one = ones(n);
        match &self.w2 {
            Some(w2) => {
                let h = self.hidden(x);
                let mut e = w2 * &h;
                if let Some(b2) = &self.b2 {
                    for mut col in e.column_iter_mut() {
                        col += b2;
                    }
                }
                e -= y;
                let back = w2.transpose() * &e;
                let grads = Gradients {
                    w1: &back * x.transpose(),
                    w2: Some(&e * h.transpose()),
                    b1: self.b1.as_ref().map(|_| &back * &one),
                    b2: self.b2.as_ref().map(|_| &e * &one),
                };
                (0.5 * e.norm_squared(), grads)
            }
            None => {
                let e = self.forward(x) - y;
                let grads = Gradients {
                    w1: &e * x.transpose(),
                    w2: None,
                    b1: None,
                    b2: self.b2.as_ref().map(|_| &e * &one),
                };
                (0.5 * e.norm_squared(), grads)
            }
        }
    }

    /// `θ ← θ - ε ∇L`
    pub fn apply_gradients(&mut self, g: &Gradients, epsilon: f64) {
        self.w1.zip_apply(&g.w1, |w, d| *w -= epsilon * d);
        if let (Some(w), Some(gw)) = (&mut self.w2, &g.w2) {
            w.zip_apply(gw, |w, d| *w -= epsilon * d);
        }
        if let (Some(b), Some(gb)) = (&mut self.b1, &g.b1) {
            b.axpy(-epsilon, gb, 1.0);
        }
        if let (Some(b), Some(gb)) = (&mut self.b2, &g.b2) {
            b.axpy(-epsilon, gb, 1.0);
        }
    }

    /// End-to-end linear map, ignoring biases.
    pub fn product(&self) -> Matrix {
        match &self.w2 {
            Some(w2) => w2 * &self.w1,
            None => self.w1.clone(),
        }
    }

    /// End-to-end map on inputs with a leading constant feature of value
    /// `feature`, so the input-side bias becomes its first column.
    pub fn augmented_product(&self, feature: f64) -> Result<Matrix> {
        let (n_out, n_in) = (self.n_out(), self.n_in());
        let bias_col = match (&self.w2, &self.b1, &self.b2) {
            (Some(w2), Some(b1), _) => w2 * b1,
            (None, _, Some(b)) => b.clone(),
            _ => return Err(Error::MissingBias("input-side")),
        };
        let mut out = Matrix::zeros(n_out, n_in + 1);
        out.set_column(0, &(bias_col / feature));
        out.columns_mut(1, n_in).copy_from(&self.product());
        Ok(out)
    }

    /// Equivalent network without the input-side bias acting on inputs with a
    /// leading constant feature of value `feature`.
    pub fn fold_input_bias(&self, feature: f64) -> Result<NetworkState> {
        let n_in = self.n_in();
        let (rows, bias, keep_b2) = match (&self.w2, &self.b1) {
            (Some(_), Some(b1)) => (self.w1.nrows(), b1.clone(), self.b2.clone()),
            (None, _) => match &self.b2 {
                Some(b) => (self.w1.nrows(), b.clone(), None),
                None => return Err(Error::MissingBias("input-side")),
            },
            (Some(_), None) => return Err(Error::MissingBias("input")),
        };
        let mut w1 = Matrix::zeros(rows, n_in + 1);
        w1.set_column(0, &(bias / feature));
        w1.columns_mut(1, n_in).copy_from(&self.w1);
        Ok(NetworkState {
            depth: self.depth,
            w1,
            w2: self.w2.clone(),
            b1: None,
            b2: keep_b2,
            hidden_basis: self.hidden_basis.clone(),
        })
    }

    /// Flattened parameters in the order `w1, w2, b1, b2` (column-major).
    pub fn parameters(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.w1.iter().copied().collect();
        for m in self.w2.iter() {
            p.extend(m.iter());
        }
        for b in self.b1.iter().chain(self.b2.iter()) {
            p.extend(b.iter());
        }
        p
    }

    pub fn set_parameters(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.parameters().len() {
            return Err(dim_mismatch(
                "parameter vector",
                self.parameters().len(),
                p.len(),
            ));
        }
        let mut it = p.iter().copied();
        self.w1.iter_mut().for_each(|v| *v = it.next().unwrap());
        if let Some(m) = &mut self.w2 {
            m.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        for b in self.b1.iter_mut().chain(self.b2.iter_mut()) {
            b.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        Ok(())
    }
}

impl Gradients {
    /// Same ordering as [`NetworkState::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.w1.iter().copied().collect();
        for m in self.w2.iter() {
            p.extend(m.iter());
        }
        for b in self.b1.iter().chain(self.b2.iter()) {
            p.extend(b.iter());
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{correlation_matrices, task_svd};
    use crate::task_data::{augment_bias, build_hierarchy, HierarchySpec};
    use rand::Rng;

    fn task() -> Dataset {
        build_hierarchy(&HierarchySpec::default()).unwrap()
    }

    fn config(depth: Depth, bias: BiasPlacement, init: InitMode) -> NetworkConfig {
        NetworkConfig {
            depth,
            n_in: 8,
            n_hid: 16,
            n_out: 15,
            bias,
            init,
            init_scale: 0.1,
            seed: 3,
        }
    }

    fn randomize(net: &mut NetworkState, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<f64> = net
            .parameters()
            .iter()
            .map(|_| rng.random_range(-0.5..0.5))
            .collect();
        net.set_parameters(&p).unwrap();
    }

    #[test]
    fn spectral_init_is_balanced_and_aligned() {
        let d = task();
        let dec = task_svd(&correlation_matrices(&d)).unwrap();
        let cfg = NetworkConfig {
            init_scale: 1e-4,
            ..config(Depth::Deep, BiasPlacement::None, InitMode::Spectral)
        };
        let net = init_network(&cfg, Some(&dec)).unwrap();
        let w2 = net.w2.as_ref().unwrap();
        let gap = w2.transpose() * w2 - &net.w1 * net.w1.transpose();
        assert!(gap.norm() <= 1e-12);
        let overlap = dec.u.transpose() * net.product() * &dec.v;
        for a in 0..dec.rank() {
            assert!((overlap[(a, a)] - 1e-4).abs() < 1e-15);
        }
    }

    #[test]
    fn spectral_init_on_augmented_task_sets_bias() {
        let d = augment_bias(&task()).unwrap();
        let dec = task_svd(&correlation_matrices(&d)).unwrap();
        let cfg = NetworkConfig {
            init_scale: 1e-4,
            ..config(Depth::Deep, BiasPlacement::Input, InitMode::Spectral)
        };
        let net = init_network(&cfg, Some(&dec)).unwrap();
        assert_eq!(net.w1.ncols(), 8);
        let w = net.augmented_product(1.0).unwrap();
        let overlap = dec.u.transpose() * w * &dec.v;
        for a in 0..dec.rank() {
            assert!((overlap[(a, a)] - 1e-4).abs() < 1e-15);
        }
        // without a bias the augmented decomposition cannot be used
        let cfg = config(Depth::Deep, BiasPlacement::None, InitMode::Spectral);
        assert!(init_network(&cfg, Some(&dec)).is_err());
    }

    #[test]
    fn exact_isotropy_identities() {
        let cfg = config(Depth::Deep, BiasPlacement::Both, InitMode::ExactIsotropy);
        let net = init_network(&cfg, None).unwrap();
        let s2 = 0.01;
        let w2 = net.w2.as_ref().unwrap();
        assert!((w2 * w2.transpose() - Matrix::identity(15, 15) * s2).norm() <= 1e-12);
        assert!((net.w1.transpose() * &net.w1 - Matrix::identity(8, 8) * s2).norm() <= 1e-12);
        assert_eq!(net.b1.as_ref().unwrap().norm(), 0.0);
        assert_eq!(net.b2.as_ref().unwrap().norm(), 0.0);
        let small = NetworkConfig { n_hid: 10, ..cfg };
        assert!(matches!(
            init_network(&small, None),
            Err(Error::InfeasibleNetwork(_))
        ));
    }

    #[test]
    fn infeasible_configs() {
        assert!(init_network(
            &config(Depth::Deep, BiasPlacement::None, InitMode::Spectral),
            None
        )
        .is_err());
        let shallow_input = config(Depth::Shallow, BiasPlacement::Input, InitMode::RandomSmall);
        assert!(init_network(&shallow_input, None).is_err());
        let zero = NetworkConfig {
            init_scale: 0.0,
            ..config(Depth::Deep, BiasPlacement::None, InitMode::RandomSmall)
        };
        assert!(init_network(&zero, None).is_err());
    }

    #[test]
    fn random_init_is_seeded() {
        let cfg = config(Depth::Deep, BiasPlacement::None, InitMode::RandomSmall);
        let a = init_network(&cfg, None).unwrap();
        let b = init_network(&cfg, None).unwrap();
        assert_eq!(a, b);
        let c = init_network(&NetworkConfig { seed: 4, ..cfg }, None).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let d = task();
        let variants = [
            (Depth::Deep, BiasPlacement::None),
            (Depth::Deep, BiasPlacement::Input),
            (Depth::Deep, BiasPlacement::Output),
            (Depth::Deep, BiasPlacement::Both),
            (Depth::Shallow, BiasPlacement::None),
            (Depth::Shallow, BiasPlacement::Output),
        ];
        for (k, (depth, bias)) in variants.into_iter().enumerate() {
            let mut net = init_network(&config(depth, bias, InitMode::RandomSmall), None).unwrap();
            randomize(&mut net, k as u64);
            let (_, g) = net.loss_and_gradients(&d).unwrap();
            let g = g.flatten();
            let p0 = net.parameters();
            let h = 1e-5;
            for (i, gi) in g.iter().enumerate() {
                let mut p = p0.clone();
                p[i] = p0[i] + h;
                net.set_parameters(&p).unwrap();
                let up = net.loss(&d).unwrap();
                p[i] = p0[i] - h;
                net.set_parameters(&p).unwrap();
                let down = net.loss(&d).unwrap();
                let fd = (up - down) / (2.0 * h);
                assert!(
                    (fd - gi).abs() <= 1e-6 * gi.abs().max(1.0),
                    "{depth:?} {bias:?} {i}"
                );
            }
            net.set_parameters(&p0).unwrap();
        }
    }

    #[test]
    fn folded_network_matches_explicit_bias() {
        let d = task();
        let mut net = init_network(
            &config(Depth::Deep, BiasPlacement::Input, InitMode::RandomSmall),
            None,
        )
        .unwrap();
        randomize(&mut net, 9);
        let aug = augment_bias(&d).unwrap();
        let folded = net.fold_input_bias(1.0).unwrap();
        assert!((net.forward(&d.x) - folded.forward(&aug.x)).amax() < 1e-14);
        assert!((net.augmented_product(1.0).unwrap() - folded.product()).amax() < 1e-14);
    }

    #[test]
    fn parameter_round_trip() {
        let mut net = init_network(
            &config(Depth::Deep, BiasPlacement::Both, InitMode::RandomSmall),
            None,
        )
        .unwrap();
        let p: Vec<f64> = (0..net.parameters().len()).map(|i| i as f64).collect();
        net.set_parameters(&p).unwrap();
        assert_eq!(net.parameters(), p);
        assert!(net.set_parameters(&p[1..]).is_err());
    }
}
