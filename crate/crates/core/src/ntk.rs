//! Neural tangent kernel of the two-layer linear network with biases.
//!
//! The kernel is stored as an `(N_out N) x (N_out N)` matrix with
//! `(m, i) -> m N + i`, so output-space and sample-space factors combine as
//! `kron(A_out, B_sample)`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{kron, symmetric_eigen_desc, Matrix};
use crate::network::{BiasPlacement, NetworkState};
use crate::task_data::Dataset;

/// Largest `N_out N` for which the kernel is materialised.
pub const MAX_NTK_DIM: usize = 4000;

#[derive(Clone, Debug, PartialEq)]
pub struct NtkTensor {
    pub n_out: usize,
    pub samples: usize,
    pub matrix: Matrix,
}

impl NtkTensor {
    fn new(n_out: usize, samples: usize, matrix: Matrix) -> Self {
        NtkTensor {
            n_out,
            samples,
            matrix,
        }
    }

    /// `K_{m1 m2}(x_{i1}, x_{i2})`
    pub fn get(&self, m1: usize, m2: usize, i1: usize, i2: usize) -> f64 {
        self.matrix[(m1 * self.samples + i1, m2 * self.samples + i2)]
    }

    /// `max |K - K^T|`
    pub fn asymmetry(&self) -> f64 {
        (&self.matrix - self.matrix.transpose()).amax()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        symmetric_eigen_desc(&self.matrix)
            .0
            .last()
            .copied()
            .unwrap_or(0.0)
    }

    /// Smallest eigenvalue is at least `-tol · trace`.
    pub fn is_psd(&self, tol: f64) -> bool {
        self.min_eigenvalue() >= -tol * self.matrix.trace().abs()
    }

    /// Apply the kernel to an `N_out x N` output-space matrix.
    pub fn apply(&self, e: &Matrix) -> Matrix {
        unflatten(&(&self.matrix * flatten(e)), self.n_out, self.samples)
    }

    /// Rows `m1, i1, m2, i2, value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["m1", "i1", "m2", "i2", "value"])?;
        let n = self.samples;
        for r in 0..self.matrix.nrows() {
            for c in 0..self.matrix.ncols() {
                w.write_record([
                    (r / n).to_string(),
                    (r % n).to_string(),
                    (c / n).to_string(),
                    (c % n).to_string(),
                    format!("{:?}", self.matrix[(r, c)]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Output-space matrix to kernel vector, `(m, i) -> m N + i`.
fn flatten(e: &Matrix) -> crate::linalg::Vector {
    let n = e.ncols();
    crate::linalg::Vector::from_fn(e.len(), |k, _| e[(k / n, k % n)])
}

fn unflatten(v: &crate::linalg::Vector, n_out: usize, samples: usize) -> Matrix {
    Matrix::from_fn(n_out, samples, |m, i| v[m * samples + i])
}

fn guard(n_out: usize, samples: usize) -> Result<()> {
    let size = n_out * samples;
    if size > MAX_NTK_DIM {
        return Err(Error::SizeGuard {
            what: "NTK matrix view",
            size,
            limit: MAX_NTK_DIM,
        });
    }
    Ok(())
}

/// Contributions of each parameter group to the kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct NtkBlocks {
    pub w2: Matrix,
    pub w1: Matrix,
    pub b1: Option<Matrix>,
    pub b2: Option<Matrix>,
}

impl NtkBlocks {
    pub fn total(&self) -> Matrix {
        let mut k = &self.w2 + &self.w1;
        for b in self.b1.iter().chain(self.b2.iter()) {
            k += b;
        }
        k
    }
}

/// Kernel blocks from the explicit parameter gradients:
/// `I ⊗ H^T H`, `I ⊗ 11^T`, `W2 W2^T ⊗ X^T X` and `W2 W2^T ⊗ 11^T`.
pub fn ntk_blocks(net: &NetworkState, d: &Dataset) -> Result<NtkBlocks> {
    let w2 = net.w2.as_ref().ok_or_else(|| {
        Error::InfeasibleNetwork("the tangent kernel is computed for two-layer networks".into())
    })?;
    net.loss(d)?;
    let (n_out, n) = (net.n_out(), d.samples());
    guard(n_out, n)?;
    let eye = Matrix::identity(n_out, n_out);
    let all = Matrix::from_element(n, n, 1.0);
    let h = net.hidden(&d.x);
    let ww = w2 * w2.transpose();
    Ok(NtkBlocks {
        w2: kron(&eye, &(h.transpose() * &h)),
        w1: kron(&ww, &d.input_similarity()),
        b1: net.b1.as_ref().map(|_| kron(&ww, &all)),
        b2: net.b2.as_ref().map(|_| kron(&eye, &all)),
    })
}

pub fn ntk_direct(net: &NetworkState, d: &Dataset) -> Result<NtkTensor> {
    let blocks = ntk_blocks(net, d)?;
    Ok(NtkTensor::new(net.n_out(), d.samples(), blocks.total()))
}

/// How the output-bias term enters the closed form.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputBiasTerm {
    /// `I ⊗ 11^T`: each output unit has its own bias, which is what the
    /// parameter gradients give.
    #[default]
    PerUnit,
    /// `11^T ⊗ 11^T`, coupling all output units.
    AllUnits,
}

/// `σ² I ⊗ (2 X^T X + [b1] 11^T) + [b2] I ⊗ 11^T`
pub fn ntk_closed_form(
    sigma: f64,
    d: &Dataset,
    bias: BiasPlacement,
    output_term: OutputBiasTerm,
) -> Result<NtkTensor> {
    let (n_out, n) = (d.n_out(), d.samples());
    guard(n_out, n)?;
    let eye = Matrix::identity(n_out, n_out);
    let all = Matrix::from_element(n, n, 1.0);
    let mut sample = d.input_similarity() * 2.0;
    if bias.input() {
        sample += &all;
    }
    let mut k = kron(&eye, &sample) * (sigma * sigma);
    if bias.output() {
        let outer = match output_term {
            OutputBiasTerm::PerUnit => eye,
            OutputBiasTerm::AllUnits => Matrix::from_element(n_out, n_out, 1.0),
        };
        k += kron(&outer, &all);
    }
    Ok(NtkTensor::new(n_out, n, k))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockError {
    pub block: &'static str,
    pub max_abs: f64,
    pub mean_abs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NtkComparison {
    /// Weight scale inferred from `tr(W2 W2^T) / N_out`.
    pub sigma: f64,
    pub max_abs: f64,
    pub relative_frobenius: f64,
    /// Errors of each block against its closed-form counterpart.
    pub blocks: Vec<BlockError>,
    pub warnings: Vec<String>,
}

/// Compare the direct kernel of `net` with the closed form at its weight
/// scale.
pub fn ntk_compare(
    net: &NetworkState,
    d: &Dataset,
    output_term: OutputBiasTerm,
) -> Result<NtkComparison> {
    let blocks = ntk_blocks(net, d)?;
    let w2 = net.w2.as_ref().expect("checked by ntk_blocks");
    let (n_out, n_in) = (net.n_out(), net.n_in());
    let s2 = w2.norm_squared() / n_out as f64;
    let sigma = s2.sqrt();

    let mut warnings = Vec::new();
    let iso_out = (w2 * w2.transpose() - Matrix::identity(n_out, n_out) * s2).norm();
    let iso_in = (net.w1.transpose() * &net.w1 - Matrix::identity(n_in, n_in) * s2).norm();
    if iso_out.max(iso_in) > 1e-10 * s2.max(f64::MIN_POSITIVE) {
        warnings.push(format!(
            "weights are not exactly isotropic (residuals {iso_out:.3e}, {iso_in:.3e}); \
             agreement holds only approximately"
        ));
    }
    let bias_norm = net
        .b1
        .iter()
        .chain(net.b2.iter())
        .map(|b| b.norm())
        .fold(0.0, f64::max);
    if bias_norm > 0.0 {
        warnings.push(format!("biases are non-zero (max norm {bias_norm:.3e})"));
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    let closed = ntk_closed_form(sigma, d, net.bias(), output_term)?;
    let direct = blocks.total();
    let diff = &direct - &closed.matrix;
    let scale = closed.matrix.norm();

    let eye = Matrix::identity(n_out, n_out);
    let all = Matrix::from_element(d.samples(), d.samples(), 1.0);
    let xx = d.input_similarity();
    let block_err = |name, got: &Matrix, want: Matrix| {
        let e = got - want;
        BlockError {
            block: name,
            max_abs: e.amax(),
            mean_abs: e.abs().mean(),
        }
    };
    let mut per_block = vec![
        block_err("w2", &blocks.w2, kron(&eye, &xx) * s2),
        block_err("w1", &blocks.w1, kron(&eye, &xx) * s2),
    ];
    if let Some(b1) = &blocks.b1 {
        per_block.push(block_err("b1", b1, kron(&eye, &all) * s2));
    }
    if let Some(b2) = &blocks.b2 {
        let outer = match output_term {
            OutputBiasTerm::PerUnit => eye.clone(),
            OutputBiasTerm::AllUnits => Matrix::from_element(n_out, n_out, 1.0),
        };
        per_block.push(block_err("b2", b2, kron(&outer, &all)));
    }

    Ok(NtkComparison {
        sigma,
        max_abs: diff.amax(),
        relative_frobenius: if scale == 0.0 {
            diff.norm()
        } else {
            diff.norm() / scale
        },
        blocks: per_block,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputStep {
    /// `ε K (Y - Ŷ)`
    pub predicted: Matrix,
    /// Change of `Ŷ` after one gradient step with learning rate `ε`.
    pub actual: Matrix,
    /// `‖predicted - actual‖_F / ‖actual‖_F`
    pub relative_error: f64,
}

/// One-step output change predicted by the kernel against the actual step.
pub fn ntk_output_step(net: &NetworkState, d: &Dataset, epsilon: f64) -> Result<OutputStep> {
    let k = ntk_direct(net, d)?;
    let before = net.forward(&d.x);
    let predicted = k.apply(&(&d.y - &before)) * epsilon;
    let (_, g) = net.loss_and_gradients(d)?;
    let mut next = net.clone();
    next.apply_gradients(&g, epsilon);
    let actual = next.forward(&d.x) - before;
    let err = (&predicted - &actual).norm();
    let scale = actual.norm();
    let relative_error = if scale == 0.0 {
        if err == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        err / scale
    };
    Ok(OutputStep {
        predicted,
        actual,
        relative_error,
    })
}
