//! Correlation matrices, their joint SVD/eigendecomposition, and numerical
//! checks of the spectral statements about the constant mode.

use std::io::Write;
use std::ops::Range;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{
    alignment, canonical_sign, column_mean, commutator, ones, symmetric_eigen_desc, Matrix, Vector,
};
use crate::task_data::Dataset;

/// Singular values within `DEGENERACY_TOL * s0` of each other form one block.
pub const DEGENERACY_TOL: f64 = 1e-9;
/// Modes with `s <= RANK_TOL * s0` are dropped.
pub const RANK_TOL: f64 = 1e-12;
/// Relative residual below which `V` is taken to diagonalise `Σ^x`.
pub const JOINT_DIAGONAL_TOL: f64 = 1e-8;
/// Minimum `|cos(v, x̄)|` for a mode to count as the OCS mode.
pub const OCS_ALIGNMENT: f64 = 0.999;
/// Relative residual for "the ones vector is an eigenvector".
pub const EIGENVECTOR_TOL: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct CorrelationPair {
    /// `(1/N) Y X^T`
    pub sigma_yx: Matrix,
    /// `(1/N) X X^T`
    pub sigma_x: Matrix,
    /// Sample mean of the inputs, `x̄`.
    pub mean_input: Vector,
    /// Sample mean of the targets, `ȳ`.
    pub mean_output: Vector,
}

pub fn correlation_matrices(d: &Dataset) -> CorrelationPair {
    let n = d.samples() as f64;
    let sigma_x = &d.x * d.x.transpose() / n;
    // exact symmetry, independent of summation order
    let sigma_x = (&sigma_x + sigma_x.transpose()) * 0.5;
    CorrelationPair {
        sigma_yx: &d.y * d.x.transpose() / n,
        sigma_x,
        mean_input: column_mean(&d.x),
        mean_output: column_mean(&d.y),
    }
}

/// The OCS `ȳ`, the mean target.
pub fn ocs_vector(d: &Dataset) -> Vector {
    column_mean(&d.y)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CommutatorReport {
    /// `‖[Y^T Y, X^T X]‖_F / (‖Y^T Y‖_F ‖X^T X‖_F)`
    pub residual: f64,
    pub commutes: bool,
}

/// Feasibility of the closed-form dynamics: do the sample similarity
/// matrices commute?
pub fn commutator_check(d: &Dataset, tol: f64) -> CommutatorReport {
    let yy = d.output_similarity();
    let xx = d.input_similarity();
    let scale = yy.norm() * xx.norm();
    let residual = if scale == 0.0 {
        0.0
    } else {
        commutator(&yy, &xx).norm() / scale
    };
    CommutatorReport {
        residual,
        commutes: residual <= tol,
    }
}

#[derive(Clone, Debug)]
pub struct ModeDecomposition {
    /// `N_out x r`, orthonormal columns.
    pub u: Matrix,
    /// Singular values of `Σ^{yx}`, descending.
    pub s: Vec<f64>,
    /// `N_in x r`, orthonormal columns.
    pub v: Matrix,
    /// `v_α^T Σ^x v_α` for every mode.
    pub eigen: Vec<f64>,
    /// `‖Σ^x V - V diag(eigen)‖_F / ‖Σ^x‖_F`
    pub joint_residual: f64,
    /// Index of the mode aligned with the mean input, if any.
    pub ocs_index: Option<usize>,
    /// Ranges of modes with (numerically) equal singular values.
    pub blocks: Vec<Range<usize>>,
    pub mean_input: Vector,
    pub mean_output: Vector,
}

impl ModeDecomposition {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// Whether `V` diagonalises `Σ^x`.
    pub fn jointly_diagonal(&self) -> bool {
        self.joint_residual <= JOINT_DIAGONAL_TOL
    }

    /// Eigenvalues `d_α` of `Σ^x`, available only when `V` diagonalises it.
    pub fn d(&self) -> Option<&[f64]> {
        self.jointly_diagonal().then_some(self.eigen.as_slice())
    }

    pub fn u_col(&self, alpha: usize) -> Vector {
        self.u.column(alpha).into_owned()
    }

    pub fn v_col(&self, alpha: usize) -> Vector {
        self.v.column(alpha).into_owned()
    }

    /// Block containing mode `alpha`.
    pub fn block_of(&self, alpha: usize) -> Range<usize> {
        self.blocks
            .iter()
            .find(|b| b.contains(&alpha))
            .cloned()
            .unwrap_or(alpha..alpha + 1)
    }

    pub fn is_degenerate(&self, alpha: usize) -> bool {
        self.block_of(alpha).len() > 1
    }

    /// `U diag(S) V^T`
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for (j, s) in self.s.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * self.v.transpose()
    }

    pub fn report(&self) -> SpectrumReport {
        let modes = (0..self.rank())
            .map(|a| ModeSummary {
                index: a,
                singular_value: self.s[a],
                input_eigenvalue: self.eigen[a],
                block: self.blocks.iter().position(|b| b.contains(&a)).unwrap_or(a),
                input_mean_alignment: alignment(&self.v_col(a), &self.mean_input),
                output_mean_alignment: alignment(&self.u_col(a), &self.mean_output),
            })
            .collect();
        SpectrumReport {
            rank: self.rank(),
            ocs_index: self.ocs_index,
            jointly_diagonal: self.jointly_diagonal(),
            joint_residual: self.joint_residual,
            modes,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ModeSummary {
    pub index: usize,
    pub singular_value: f64,
    pub input_eigenvalue: f64,
    pub block: usize,
    pub input_mean_alignment: f64,
    pub output_mean_alignment: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SpectrumReport {
    pub rank: usize,
    pub ocs_index: Option<usize>,
    pub jointly_diagonal: bool,
    pub joint_residual: f64,
    pub modes: Vec<ModeSummary>,
}

impl SpectrumReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record([
            "mode",
            "singular_value",
            "input_eigenvalue",
            "block",
            "input_mean_alignment",
            "output_mean_alignment",
        ])?;
        for m in &self.modes {
            w.write_record([
                m.index.to_string(),
                format!("{:?}", m.singular_value),
                format!("{:?}", m.input_eigenvalue),
                m.block.to_string(),
                format!("{:?}", m.input_mean_alignment),
                format!("{:?}", m.output_mean_alignment),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// SVD of `Σ^{yx}` aligned with the eigenbasis of `Σ^x`.
///
/// Within a block of equal singular values the basis is rotated to
/// diagonalise `Σ^x`, and within a block that is still degenerate the first
/// vector is aligned with `x̄`. Columns of `V` have their largest-magnitude
/// entry positive.
pub fn task_svd(pair: &CorrelationPair) -> Result<ModeDecomposition> {
    let (n_out, n_in) = pair.sigma_yx.shape();
    let empty = |joint_residual| ModeDecomposition {
        u: Matrix::zeros(n_out, 0),
        s: Vec::new(),
        v: Matrix::zeros(n_in, 0),
        eigen: Vec::new(),
        joint_residual,
        ocs_index: None,
        blocks: Vec::new(),
        mean_input: pair.mean_input.clone(),
        mean_output: pair.mean_output.clone(),
    };
    if n_out == 0 || n_in == 0 || pair.sigma_yx.iter().all(|&v| v == 0.0) {
        return Ok(empty(0.0));
    }

    let svd = pair
        .sigma_yx
        .clone()
        .try_svd(true, true, f64::EPSILON, 10_000)
        .ok_or_else(|| {
            let fro = pair.sigma_yx.norm();
            let max = pair.sigma_yx.amax();
            Error::SvdFailed(format!(
                "{n_out}x{n_in} matrix, Frobenius norm {fro:e}, max entry {max:e}"
            ))
        })?;
    let u_full = svd.u.expect("requested U");
    let vt_full = svd.v_t.expect("requested V^T");

    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let s0 = svd.singular_values[order[0]];
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&i| svd.singular_values[i] > RANK_TOL * s0)
        .collect();
    let r = kept.len();

    let mut s: Vec<f64> = kept.iter().map(|&i| svd.singular_values[i]).collect();
    let mut u = Matrix::zeros(n_out, r);
    let mut v = Matrix::zeros(n_in, r);
    for (dst, &src) in kept.iter().enumerate() {
        u.set_column(dst, &u_full.column(src));
        v.set_column(dst, &vt_full.row(src).transpose());
    }

    let blocks = degenerate_blocks(&s, s0);
    let sx_scale = pair.sigma_x.norm().max(f64::MIN_POSITIVE);
    for block in blocks.iter().filter(|b| b.len() > 1) {
        // equalise the singular values inside the block
        let mean = s[block.clone()].iter().sum::<f64>() / block.len() as f64;
        s[block.clone()].iter_mut().for_each(|x| *x = mean);
        let rot = block_rotation(&pair.sigma_x, &pair.mean_input, &v, block.clone(), sx_scale);
        let vb = v.columns(block.start, block.len()) * &rot;
        let ub = u.columns(block.start, block.len()) * &rot;
        v.columns_mut(block.start, block.len()).copy_from(&vb);
        u.columns_mut(block.start, block.len()).copy_from(&ub);
    }

    for a in 0..r {
        let mut col = v.column(a).into_owned();
        if canonical_sign(&mut col) {
            v.set_column(a, &col);
            u.column_mut(a).neg_mut();
        }
    }

    let eigen: Vec<f64> = (0..r)
        .map(|a| {
            let va = v.column(a);
            (va.transpose() * &pair.sigma_x * va)[(0, 0)]
        })
        .collect();
    let mut vd = v.clone();
    for (a, d) in eigen.iter().enumerate() {
        vd.column_mut(a).scale_mut(*d);
    }
    let joint_residual = (&pair.sigma_x * &v - vd).norm() / sx_scale;
    if joint_residual > JOINT_DIAGONAL_TOL {
        log::warn!(
            "right singular vectors do not diagonalise the input correlation \
             (residual {joint_residual:.3e}); input eigenvalues unavailable"
        );
    }

    let ocs_index =
        (0..r).find(|&a| alignment(&v.column(a).into_owned(), &pair.mean_input) >= OCS_ALIGNMENT);

    Ok(ModeDecomposition {
        u,
        s,
        v,
        eigen,
        joint_residual,
        ocs_index,
        blocks,
        mean_input: pair.mean_input.clone(),
        mean_output: pair.mean_output.clone(),
    })
}

fn degenerate_blocks(s: &[f64], s0: f64) -> Vec<Range<usize>> {
    let mut blocks = Vec::new();
    let mut start = 0;
    for a in 1..=s.len() {
        if a == s.len() || (s[a - 1] - s[a]).abs() > DEGENERACY_TOL * s0 {
            blocks.push(start..a);
            start = a;
        }
    }
    blocks
}

/// Orthogonal rotation of a degenerate block: diagonalise `Σ^x` on the block,
/// then align the first vector of each remaining degenerate group with `x̄`.
fn block_rotation(
    sigma_x: &Matrix,
    mean_input: &Vector,
    v: &Matrix,
    block: Range<usize>,
    sx_scale: f64,
) -> Matrix {
    let vb = v.columns(block.start, block.len());
    let restricted = vb.transpose() * sigma_x * vb;
    let (vals, mut q) = symmetric_eigen_desc(&restricted);

    let coords = vb.transpose() * mean_input;
    let mut g = 0;
    while g < vals.len() {
        let mut e = g + 1;
        while e < vals.len() && (vals[e - 1] - vals[e]).abs() <= DEGENERACY_TOL * sx_scale {
            e += 1;
        }
        if e - g > 1 {
            let group = q.columns(g, e - g).into_owned();
            let proj = group.transpose() * &coords;
            if proj.norm() > 1e-12 * coords.norm().max(f64::MIN_POSITIVE) {
                let aligned = gram_schmidt_from(&group, &(&group * &proj));
                q.columns_mut(g, e - g).copy_from(&aligned);
            }
        }
        g = e;
    }
    q
}

/// Orthonormal basis of span(`basis`) whose first vector is `first` normalised.
fn gram_schmidt_from(basis: &Matrix, first: &Vector) -> Matrix {
    let k = basis.ncols();
    let mut out: Vec<Vector> = vec![first.normalize()];
    for j in 0..k {
        if out.len() == k {
            break;
        }
        let mut c = basis.column(j).into_owned();
        for o in &out {
            let p = o.dot(&c);
            c -= o * p;
        }
        let n = c.norm();
        if n > 1e-8 {
            out.push(c / n);
        }
    }
    Matrix::from_columns(&out)
}

/// Relative eigen-residual of `v` under `m`: `‖m v - λ v‖ / (|λ| ‖v‖)` with
/// `λ` the Rayleigh quotient. Returns `(λ, residual)`.
pub fn eigen_residual(m: &Matrix, v: &Vector) -> (f64, f64) {
    let vv = v.dot(v);
    if vv == 0.0 {
        return (0.0, f64::INFINITY);
    }
    let image = m * v;
    let lambda = v.dot(&image) / vv;
    let res = (image - v * lambda).norm();
    let scale = lambda.abs() * vv.sqrt();
    let rel = if scale == 0.0 {
        if res == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        res / scale
    };
    (lambda, rel)
}

/// Transfer of the constant eigenvector from sample space to feature space:
/// if `M^T M 1 = λ 1` then the mean column `m̄` satisfies `M M^T m̄ = λ m̄`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ConstantModeTransfer {
    /// Eigenvalue of `1` under `M^T M`.
    pub sample_eigenvalue: f64,
    /// Relative residual of `1` as an eigenvector of `M^T M`.
    pub sample_residual: f64,
    /// Rayleigh quotient of `m̄` under `M M^T`.
    pub feature_eigenvalue: f64,
    /// Relative residual of `m̄` as an eigenvector of `M M^T`.
    pub feature_residual: f64,
}

impl ConstantModeTransfer {
    pub fn hypothesis_holds(&self) -> bool {
        self.sample_residual <= EIGENVECTOR_TOL
    }

    /// `|λ_feature - λ_sample| / |λ_sample|`
    pub fn eigenvalue_gap(&self) -> f64 {
        (self.feature_eigenvalue - self.sample_eigenvalue).abs()
            / self.sample_eigenvalue.abs().max(f64::MIN_POSITIVE)
    }
}

pub fn constant_mode_transfer(m: &Matrix) -> ConstantModeTransfer {
    let n = m.ncols();
    let one = ones(n);
    let (sample_eigenvalue, sample_residual) = eigen_residual(&(m.transpose() * m), &one);
    let mean = column_mean(m);
    let (feature_eigenvalue, feature_residual) = eigen_residual(&(m * m.transpose()), &mean);
    ConstantModeTransfer {
        sample_eigenvalue,
        sample_residual,
        feature_eigenvalue,
        feature_residual,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SimilarityStructure {
    /// Relative residual of `1` as an eigenvector.
    pub ones_residual: f64,
    pub positive: bool,
    pub nonnegative: bool,
    pub irreducible: bool,
}

fn similarity_structure(m: &Matrix) -> SimilarityStructure {
    let (_, ones_residual) = eigen_residual(m, &ones(m.nrows()));
    SimilarityStructure {
        ones_residual,
        positive: m.iter().all(|&v| v > 0.0),
        nonnegative: m.iter().all(|&v| v >= 0.0),
        irreducible: is_irreducible(m),
    }
}

/// Connectivity of the graph with an edge wherever an entry is non-zero.
fn is_irreducible(m: &Matrix) -> bool {
    let n = m.nrows();
    if n == 0 {
        return true;
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            if !seen[j] && (m[(i, j)] != 0.0 || m[(j, i)] != 0.0) {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

#[derive(Clone, Debug, Serialize)]
pub struct LeadingModeReport {
    /// `|cos(u_0, ȳ)|`
    pub output_alignment: f64,
    /// `|cos(v_0, x̄)|`
    pub input_alignment: f64,
    /// `s_0 - s_1` (equals `s_0` for rank one).
    pub gap: f64,
    /// `‖u_0 v_0^T - ŷ x̂^T‖_F` with `ŷ`, `x̂` the normalised means (best sign).
    pub rank_one_residual: f64,
    pub output_similarity: SimilarityStructure,
    pub input_similarity: SimilarityStructure,
    pub output_transfer: ConstantModeTransfer,
    pub input_transfer: ConstantModeTransfer,
    /// `1` is a joint eigenvector, both similarity matrices are positive and
    /// the leading singular value is non-degenerate.
    pub hypothesis_holds: bool,
    /// As above but with non-negative irreducible matrices allowed.
    pub weak_hypothesis_holds: bool,
    pub warnings: Vec<String>,
}

/// Check that the OCS mode `ȳ x̄^T` carries the leading singular value.
pub fn leading_mode_check(dec: &ModeDecomposition, d: &Dataset) -> Result<LeadingModeReport> {
    if dec.rank() == 0 {
        return Err(Error::Domain("leading mode check needs rank >= 1".into()));
    }
    let ybar = ocs_vector(d);
    let xbar = column_mean(&d.x);
    let u0 = dec.u_col(0);
    let v0 = dec.v_col(0);
    let gap = dec.s[0] - dec.s.get(1).copied().unwrap_or(0.0);

    let rank_one_residual = if ybar.norm() == 0.0 || xbar.norm() == 0.0 {
        f64::INFINITY
    } else {
        let model = &u0 * v0.transpose();
        let target = ybar.normalize() * xbar.normalize().transpose();
        (&model - &target).norm().min((&model + &target).norm())
    };

    let output_similarity = similarity_structure(&d.output_similarity());
    let input_similarity = similarity_structure(&d.input_similarity());
    let output_transfer = constant_mode_transfer(&d.y);
    let input_transfer = constant_mode_transfer(&d.x);

    let joint = output_similarity.ones_residual <= EIGENVECTOR_TOL
        && input_similarity.ones_residual <= EIGENVECTOR_TOL;
    let nondegenerate = dec.block_of(0).len() == 1;
    let hypothesis_holds =
        joint && nondegenerate && output_similarity.positive && input_similarity.positive;
    let weak_hypothesis_holds = joint
        && nondegenerate
        && output_similarity.nonnegative
        && output_similarity.irreducible
        && input_similarity.nonnegative
        && input_similarity.irreducible;

    let mut warnings = Vec::new();
    if output_similarity.ones_residual > EIGENVECTOR_TOL {
        warnings.push(format!(
            "hypothesis not satisfied: Y^T Y 1 is not proportional to 1 (residual {:.3e})",
            output_similarity.ones_residual
        ));
    }
    if input_similarity.ones_residual > EIGENVECTOR_TOL {
        warnings.push(format!(
            "hypothesis not satisfied: X^T X 1 is not proportional to 1 (residual {:.3e})",
            input_similarity.ones_residual
        ));
    }
    if !nondegenerate {
        warnings.push("leading singular value is degenerate".into());
    }
    if joint && !hypothesis_holds && weak_hypothesis_holds {
        warnings.push(
            "similarity matrices have zero entries but are irreducible; \
             leading-mode status is reported, not guaranteed"
                .into(),
        );
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    Ok(LeadingModeReport {
        output_alignment: alignment(&u0, &ybar),
        input_alignment: alignment(&v0, &xbar),
        gap,
        rank_one_residual,
        output_similarity,
        input_similarity,
        output_transfer,
        input_transfer,
        hypothesis_holds,
        weak_hypothesis_holds,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EigenAlignment {
    pub eigenvalue: f64,
    /// `|v . 1| / (‖v‖ ‖1‖)`; absent for a degenerate eigenvalue, where the
    /// eigenvector is basis dependent.
    pub alignment: Option<f64>,
    pub degenerate: bool,
    /// `‖P 1‖ / ‖1‖` with `P` the projector onto the whole eigenspace.
    pub subspace_alignment: f64,
}

/// Top-`k` eigenpairs of a symmetric similarity matrix and their alignment
/// with the constant vector.
pub fn constant_mode_alignment(similarity: &Matrix, k: usize) -> Vec<EigenAlignment> {
    let n = similarity.nrows();
    if n == 0 {
        return Vec::new();
    }
    let (vals, vecs) = symmetric_eigen_desc(similarity);
    let scale = vals
        .iter()
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let one = ones(n) / (n as f64).sqrt();
    let group_of = |i: usize| -> Range<usize> {
        let mut s = i;
        while s > 0 && (vals[s - 1] - vals[s]).abs() <= DEGENERACY_TOL * scale {
            s -= 1;
        }
        let mut e = i + 1;
        while e < n && (vals[e - 1] - vals[e]).abs() <= DEGENERACY_TOL * scale {
            e += 1;
        }
        s..e
    };
    (0..k.min(n))
        .map(|i| {
            let group = group_of(i);
            let coords = vecs.columns(group.start, group.len()).transpose() * &one;
            let degenerate = group.len() > 1;
            EigenAlignment {
                eigenvalue: vals[i],
                alignment: (!degenerate).then(|| alignment(&vecs.column(i).into_owned(), &one)),
                degenerate,
                subspace_alignment: coords.norm(),
            }
        })
        .collect()
}
