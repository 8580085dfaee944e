//! Datasets used by the theory: the hierarchical category task, its
//! bias-augmented form, the class-imbalance case, synthetic correlated inputs
//! and externally supplied matrices.
//!
//! Samples are columns: `x` is `N_in x N`, `y` is `N_out x N`.

mod io;

pub use io::{load_dataset, parse_dataset, save_dataset, write_matrix_csv};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::linalg::{gaussian_matrix, Matrix};

/// Half-open row range `[start, end)` of the outputs that belong to one
/// hierarchy level.
pub type LevelSlice = (usize, usize);

/// Upper bound on generated item counts.
pub const MAX_ITEMS: usize = 1 << 14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierarchySpec {
    /// Number of levels below the root.
    pub depth: usize,
    /// Children per node.
    pub branching: usize,
    /// Emit the root property (shared by every item) as output row 0.
    pub include_root: bool,
}

impl Default for HierarchySpec {
    fn default() -> Self {
        Self {
            depth: 3,
            branching: 2,
            include_root: true,
        }
    }
}

impl HierarchySpec {
    /// The layout used in the human experiment: one property per level and
    /// no root, so every item carries exactly `depth` labels.
    pub fn human_task() -> Self {
        Self {
            include_root: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::InvalidHierarchy("depth must be >= 1".into()));
        }
        if self.branching < 2 {
            return Err(Error::InvalidHierarchy("branching must be >= 2".into()));
        }
        self.checked_items().ok_or_else(|| {
            Error::InvalidHierarchy(format!(
                "branching^depth = {}^{} exceeds {MAX_ITEMS} items",
                self.branching, self.depth
            ))
        })?;
        Ok(())
    }

    fn checked_items(&self) -> Option<usize> {
        let depth = u32::try_from(self.depth).ok()?;
        self.branching
            .checked_pow(depth)
            .filter(|&n| n <= MAX_ITEMS)
    }

    /// Number of items `N = branching^depth`.
    pub fn items(&self) -> usize {
        self.branching.pow(self.depth as u32)
    }

    /// Nodes per emitted level, top to bottom.
    pub fn level_sizes(&self) -> Vec<usize> {
        let first = if self.include_root { 0 } else { 1 };
        (first..=self.depth)
            .map(|l| self.branching.pow(l as u32))
            .collect()
    }

    pub fn outputs(&self) -> usize {
        self.level_sizes().iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub x: Matrix,
    pub y: Matrix,
    pub level_slices: Vec<LevelSlice>,
    pub bias_augmented: bool,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        x: Matrix,
        y: Matrix,
        level_slices: Vec<LevelSlice>,
        bias_augmented: bool,
    ) -> Result<Self> {
        let d = Self {
            name: name.into(),
            x,
            y,
            level_slices,
            bias_augmented,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn samples(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_in(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_out(&self) -> usize {
        self.y.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.ncols() != self.y.ncols() {
            return Err(dim_mismatch(
                "dataset sample count",
                self.x.ncols(),
                self.y.ncols(),
            ));
        }
        validate_slices(&self.level_slices, self.y.nrows())?;
        if self.bias_augmented {
            if self.x.nrows() == 0 {
                return Err(Error::InvalidConfig(
                    "bias-augmented dataset has no input rows".into(),
                ));
            }
            let first = self.x[(0, 0)];
            if first == 0.0 || self.x.row(0).iter().any(|&v| v != first) {
                return Err(Error::InvalidConfig(
                    "bias-augmented dataset must have a constant non-zero row 0".into(),
                ));
            }
        }
        if self.x.iter().chain(self.y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset"));
        }
        Ok(())
    }

    /// Similarity matrix `X^T X` over samples (no normalisation).
    pub fn input_similarity(&self) -> Matrix {
        self.x.transpose() * &self.x
    }

    /// Similarity matrix `Y^T Y` over samples (no normalisation).
    pub fn output_similarity(&self) -> Matrix {
        self.y.transpose() * &self.y
    }

    /// Drop the constant feature of a bias-augmented dataset.
    pub fn strip_bias(&self) -> Result<Dataset> {
        if !self.bias_augmented {
            return Ok(self.clone());
        }
        let x = self.x.rows(1, self.x.nrows() - 1).into_owned();
        Dataset::new(
            self.name.trim_end_matches("+bias").to_string(),
            x,
            self.y.clone(),
            self.level_slices.clone(),
            false,
        )
    }

    pub fn with_inputs(&self, name: impl Into<String>, x: Matrix) -> Result<Dataset> {
        Dataset::new(name, x, self.y.clone(), self.level_slices.clone(), false)
    }
}

/// Slices must be non-empty, ordered, disjoint and cover `0..n_out`.
pub fn validate_slices(slices: &[LevelSlice], n_out: usize) -> Result<()> {
    if slices.is_empty() {
        return Err(Error::InvalidSlices("no level slices".into()));
    }
    let mut cursor = 0;
    for (k, &(start, end)) in slices.iter().enumerate() {
        if start != cursor {
            return Err(Error::InvalidSlices(format!(
                "slice {k} starts at {start}, expected {cursor}"
            )));
        }
        if end <= start {
            return Err(Error::InvalidSlices(format!("slice {k} is empty")));
        }
        cursor = end;
    }
    if cursor != n_out {
        return Err(Error::InvalidSlices(format!(
            "slices cover {cursor} rows, outputs have {n_out}"
        )));
    }
    Ok(())
}

/// One-hot items (`X = I_N`) with every property on the item's path labelled 1.
pub fn build_hierarchy(spec: &HierarchySpec) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.items();
    let sizes = spec.level_sizes();
    let n_out: usize = sizes.iter().sum();
    let first_level = if spec.include_root { 0 } else { 1 };

    let mut y = Matrix::zeros(n_out, n);
    let mut slices = Vec::with_capacity(sizes.len());
    let mut offset = 0;
    for (k, &size) in sizes.iter().enumerate() {
        let level = first_level + k;
        // items under one node at this level
        let span = spec.branching.pow((spec.depth - level) as u32);
        for item in 0..n {
            y[(offset + item / span, item)] = 1.0;
        }
        slices.push((offset, offset + size));
        offset += size;
    }

    let name = format!(
        "hierarchy-d{}-b{}{}",
        spec.depth,
        spec.branching,
        if spec.include_root { "" } else { "-noroot" }
    );
    Dataset::new(name, Matrix::identity(n, n), y, slices, false)
}

/// Prepend a constant all-ones input feature.
pub fn augment_bias(d: &Dataset) -> Result<Dataset> {
    augment_bias_scaled(d, 1.0)
}

/// Prepend a constant input feature of the given value. A value other than 1
/// matches an explicit bias initialised at a different scale from the weights
/// (ratio of bias to weight standard deviation).
pub fn augment_bias_scaled(d: &Dataset, value: f64) -> Result<Dataset> {
    if d.bias_augmented {
        return Err(Error::AlreadyAugmented);
    }
    if value == 0.0 || !value.is_finite() {
        return Err(Error::Domain(format!("bias feature value {value}")));
    }
    let (n_in, n) = d.x.shape();
    let mut x = Matrix::from_element(n_in + 1, n, value);
    x.rows_mut(1, n_in).copy_from(&d.x);
    Dataset::new(
        format!("{}+bias", d.name),
        x,
        d.y.clone(),
        d.level_slices.clone(),
        true,
    )
}

/// Two one-hot examples; the majority example appears twice and carries a
/// single label, the minority example carries two identifying labels.
pub fn build_imbalance_case() -> Dataset {
    #[rustfmt::skip]
    let x = Matrix::from_row_slice(2, 3, &[
        1.0, 1.0, 0.0,
        0.0, 0.0, 1.0,
    ]);
    #[rustfmt::skip]
    let y = Matrix::from_row_slice(3, 3, &[
        1.0, 1.0, 0.0,
        0.0, 0.0, 1.0,
        0.0, 0.0, 1.0,
    ]);
    Dataset::new("imbalance", x, y, vec![(0, 1), (1, 3)], false)
        .expect("imbalance dataset is well formed")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelatedInputSpec {
    /// Sample count.
    pub n: usize,
    /// Input dimension. Must be a multiple of `n` when orthogonalized.
    pub n_in: usize,
    /// Magnitude of the constant direction added to every sample.
    pub shared_scale: f64,
    /// Per-coordinate standard deviation of the independent component.
    pub noise_scale: f64,
    /// Place each sample on its own coordinate block.
    pub orthogonalized: bool,
    pub seed: u64,
}

impl CorrelatedInputSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n_in == 0 {
            return Err(Error::InvalidConfig("n and n_in must be positive".into()));
        }
        if !(self.shared_scale >= 0.0) || !(self.noise_scale >= 0.0) {
            return Err(Error::InvalidConfig(
                "shared_scale and noise_scale must be >= 0".into(),
            ));
        }
        if self.orthogonalized && !self.n_in.is_multiple_of(self.n) {
            return Err(Error::InvalidConfig(format!(
                "orthogonalized inputs need n_in ({}) divisible by n ({})",
                self.n_in, self.n
            )));
        }
        Ok(())
    }
}

/// Synthetic inputs attached to the targets of `targets`.
///
/// Correlated: `x_i = c u + noise_i` with `u` the normalised ones vector, so
/// the ones vector is the dominant eigenvector of `X^T X`. Orthogonalized:
/// sample `i` lives on block `i` of the coordinates with content
/// `c u_b + noise_i`, so `X^T X` is diagonal.
pub fn build_correlated(spec: &CorrelatedInputSpec, targets: &Dataset) -> Result<Dataset> {
    spec.validate()?;
    if spec.n != targets.samples() {
        return Err(dim_mismatch(
            "correlated inputs vs targets",
            targets.samples(),
            spec.n,
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let x = if spec.orthogonalized {
        let block = spec.n_in / spec.n;
        let content = gaussian_matrix(block, spec.n, spec.noise_scale, &mut rng)
            .add_scalar(spec.shared_scale / (block as f64).sqrt());
        let mut x = Matrix::zeros(spec.n_in, spec.n);
        for i in 0..spec.n {
            x.view_mut((i * block, i), (block, 1))
                .copy_from(&content.column(i));
        }
        x
    } else {
        gaussian_matrix(spec.n_in, spec.n, spec.noise_scale, &mut rng)
            .add_scalar(spec.shared_scale / (spec.n_in as f64).sqrt())
    };
    let name = format!(
        "{}-{}-c{}-n{}",
        targets.name,
        if spec.orthogonalized { "orth" } else { "corr" },
        spec.shared_scale,
        spec.noise_scale
    );
    targets.strip_bias()?.with_inputs(name, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{ones, symmetric_eigen_desc};

    fn paper_task() -> Dataset {
        build_hierarchy(&HierarchySpec::default()).unwrap()
    }

    #[test]
    fn eight_item_task_without_root() {
        let d = build_hierarchy(&HierarchySpec::human_task()).unwrap();
        assert_eq!(d.samples(), 8);
        assert_eq!(d.n_out(), 14);
        // one label per level on every item
        for i in 0..8 {
            assert_eq!(d.y.column(i).sum(), 3.0);
            for &(s, e) in &d.level_slices {
                assert_eq!(d.y.view((s, i), (e - s, 1)).sum(), 1.0);
            }
        }
        assert_eq!(d.level_slices, vec![(0, 2), (2, 6), (6, 14)]);
    }

    #[test]
    fn eight_item_task_with_root() {
        let d = paper_task();
        assert_eq!(d.n_out(), 15);
        assert_eq!(d.level_slices[0], (0, 1));
        assert!(d.y.row(0).iter().all(|&v| v == 1.0));
        assert_eq!(d.x, Matrix::identity(8, 8));
    }

    #[test]
    fn depth_one_without_root_is_identity() {
        let spec = HierarchySpec {
            depth: 1,
            branching: 5,
            include_root: false,
        };
        let d = build_hierarchy(&spec).unwrap();
        assert_eq!(d.y, Matrix::identity(5, 5));
    }

    #[test]
    fn rejects_out_of_range_hierarchies() {
        for spec in [
            HierarchySpec {
                depth: 0,
                branching: 2,
                include_root: true,
            },
            HierarchySpec {
                depth: 3,
                branching: 1,
                include_root: true,
            },
            HierarchySpec {
                depth: 64,
                branching: 2,
                include_root: true,
            },
            HierarchySpec {
                depth: usize::MAX,
                branching: 3,
                include_root: true,
            },
        ] {
            assert!(matches!(
                build_hierarchy(&spec),
                Err(Error::InvalidHierarchy(_))
            ));
        }
    }

    #[test]
    fn rows_within_a_level_are_permutations() {
        let d = paper_task();
        for &(s, e) in &d.level_slices {
            let block = d.y.rows(s, e - s);
            let first: Vec<f64> = {
                let mut v: Vec<f64> = block.column(0).iter().copied().collect();
                v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                v
            };
            for i in 1..d.samples() {
                let mut v: Vec<f64> = block.column(i).iter().copied().collect();
                v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                assert_eq!(v, first);
            }
        }
    }

    #[test]
    fn ones_is_eigenvector_of_output_similarity() {
        for spec in [HierarchySpec::default(), HierarchySpec::human_task()] {
            let d = build_hierarchy(&spec).unwrap();
            let yy = d.output_similarity();
            let one = ones(d.samples());
            let image = &yy * &one;
            let lambda = image.dot(&one) / one.dot(&one);
            assert!(lambda > 0.0);
            assert!((image - &one * lambda).norm() <= 1e-10 * lambda);
        }
    }

    #[test]
    fn augment_identity_pair() {
        let d = Dataset::new(
            "i2",
            Matrix::identity(2, 2),
            Matrix::identity(2, 2),
            vec![(0, 2)],
            false,
        )
        .unwrap();
        let a = augment_bias(&d).unwrap();
        assert_eq!(
            a.x,
            Matrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 0.0, 0.0, 1.0])
        );
        assert!(a.bias_augmented);
        assert_eq!(a.y, d.y);
    }

    #[test]
    fn double_augmentation_is_rejected() {
        let a = augment_bias(&paper_task()).unwrap();
        assert!(matches!(augment_bias(&a), Err(Error::AlreadyAugmented)));
    }

    #[test]
    fn augmentation_shifts_constant_eigenvalue_by_one() {
        let d = paper_task();
        let n = d.samples() as f64;
        let one = ones(d.samples()) / n.sqrt();
        let before = one.dot(&(d.input_similarity() / n * &one));
        let a = augment_bias(&d).unwrap();
        let after = one.dot(&(a.input_similarity() / n * &one));
        assert!((before - 1.0 / n).abs() <= 1e-10);
        assert!((after - before - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn imbalance_case_structure() {
        let d = build_imbalance_case();
        assert_eq!(d.samples(), 3);
        assert_eq!(d.x.column(0), d.x.column(1));
        assert_eq!(d.y.column(0), d.y.column(1));
        assert_ne!(d.y.column(0), d.y.column(2));
        let ybar = d.y.column_sum() / 3.0;
        assert!(ybar[0] > ybar[1] && ybar[0] > ybar[2]);
    }

    #[test]
    fn correlated_without_noise_is_rank_one() {
        let targets = paper_task();
        let spec = CorrelatedInputSpec {
            n: 8,
            n_in: 12,
            shared_scale: 1.5,
            noise_scale: 0.0,
            orthogonalized: false,
            seed: 1,
        };
        let d = build_correlated(&spec, &targets).unwrap();
        let g = d.input_similarity();
        // every pair of samples has inner product c^2
        assert!((g - Matrix::from_element(8, 8, 2.25)).norm() < 1e-12);
    }

    #[test]
    fn orthogonalized_similarity_is_diagonal() {
        let targets = paper_task();
        let spec = CorrelatedInputSpec {
            n: 8,
            n_in: 32,
            shared_scale: 1.0,
            noise_scale: 0.3,
            orthogonalized: true,
            seed: 9,
        };
        let d = build_correlated(&spec, &targets).unwrap();
        assert_eq!(crate::linalg::max_abs_offdiag(&d.input_similarity()), 0.0);
    }

    #[test]
    fn correlated_top_eigenvector_is_constant() {
        let targets = paper_task();
        let spec = CorrelatedInputSpec {
            n: 8,
            n_in: 8,
            shared_scale: 1.0,
            noise_scale: 0.1,
            orthogonalized: false,
            seed: 4,
        };
        let d = build_correlated(&spec, &targets).unwrap();
        let (_, vecs) = symmetric_eigen_desc(&d.input_similarity());
        let top = vecs.column(0).into_owned();
        assert!(crate::linalg::alignment(&top, &ones(8)) > 0.99);
    }

    #[test]
    fn correlated_sample_count_mismatch() {
        let spec = CorrelatedInputSpec {
            n: 4,
            n_in: 8,
            shared_scale: 1.0,
            noise_scale: 0.1,
            orthogonalized: false,
            seed: 0,
        };
        assert!(build_correlated(&spec, &paper_task()).is_err());
    }

    #[test]
    fn generators_are_deterministic() {
        let spec = CorrelatedInputSpec {
            n: 8,
            n_in: 16,
            shared_scale: 1.0,
            noise_scale: 0.2,
            orthogonalized: false,
            seed: 77,
        };
        let t = paper_task();
        assert_eq!(
            build_correlated(&spec, &t).unwrap(),
            build_correlated(&spec, &t).unwrap()
        );
    }

    #[test]
    fn slice_validation() {
        assert!(validate_slices(&[(0, 2), (2, 5)], 5).is_ok());
        assert!(validate_slices(&[(0, 2), (3, 5)], 5).is_err());
        assert!(validate_slices(&[(0, 2)], 5).is_err());
        assert!(validate_slices(&[], 0).is_err());
    }
}
