//! Small dense helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Frobenius norm of `a - b`.
pub fn frobenius_distance(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).norm()
}

/// `|a . b| / (|a| |b|)`; zero when either vector vanishes.
pub fn alignment(a: &Vector, b: &Vector) -> f64 {
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        0.0
    } else {
        (a.dot(b) / denom).abs()
    }
}

/// Signed cosine similarity; zero when either vector vanishes.
pub fn cosine(a: &Vector, b: &Vector) -> f64 {
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        0.0
    } else {
        a.dot(b) / denom
    }
}

pub fn ones(n: usize) -> Vector {
    Vector::from_element(n, 1.0)
}

/// Mean over columns.
pub fn column_mean(m: &Matrix) -> Vector {
    let n = m.ncols();
    if n == 0 {
        return Vector::zeros(m.nrows());
    }
    m.column_sum() / n as f64
}

/// Kronecker product `a ⊗ b`: entry `(i*b.rows + k, j*b.cols + l) = a[i,j] * b[k,l]`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = Matrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Commutator `ab - ba`.
pub fn commutator(a: &Matrix, b: &Matrix) -> Matrix {
    a * b - b * a
}

/// Largest absolute off-diagonal entry.
pub fn max_abs_offdiag(m: &Matrix) -> f64 {
    let mut best = 0.0_f64;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j {
                best = best.max(m[(i, j)].abs());
            }
        }
    }
    best
}

/// Frobenius norm of the off-diagonal part.
pub fn offdiag_norm(m: &Matrix) -> f64 {
    let mut acc = 0.0;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j {
                acc += m[(i, j)] * m[(i, j)];
            }
        }
    }
    acc.sqrt()
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        std * z
    })
}

/// A `rows x cols` matrix with orthonormal columns (`rows >= cols`), drawn by
/// QR of a Gaussian matrix with the sign of `diag(R)` fixed positive.
pub fn random_orthonormal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    assert!(rows >= cols, "need rows >= cols for orthonormal columns");
    if cols == 0 {
        return Matrix::zeros(rows, 0);
    }
    let g = gaussian_matrix(rows, cols, 1.0, rng);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q.columns(0, cols).into_owned()
}

/// Symmetric eigendecomposition sorted by descending eigenvalue.
pub fn symmetric_eigen_desc(m: &Matrix) -> (Vec<f64>, Matrix) {
    let n = m.nrows();
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Flip the sign of `v` so that its largest-magnitude entry is positive
/// (first such entry on ties). Returns whether a flip happened.
pub fn canonical_sign(v: &mut Vector) -> bool {
    let mut idx = 0;
    let mut best = -1.0;
    for (i, x) in v.iter().enumerate() {
        // a small slack keeps near-ties from flipping on rounding noise
        if x.abs() > best + 1e-12 {
            best = x.abs();
            idx = i;
        }
    }
    if !v.is_empty() && v[idx] < 0.0 {
        v.neg_mut();
        true
    } else {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kron_layout_matches_block_definition() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = Matrix::from_row_slice(1, 2, &[5.0, 6.0]);
        let k = kron(&a, &b);
        assert_eq!(k.shape(), (2, 4));
        assert_eq!(k[(0, 3)], 12.0);
        assert_eq!(k[(1, 0)], 15.0);
    }

    #[test]
    fn random_orthonormal_has_orthonormal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_orthonormal(7, 4, &mut rng);
        let gram = q.transpose() * &q;
        assert!((gram - Matrix::identity(4, 4)).norm() < 1e-12);
    }

    #[test]
    fn canonical_sign_makes_largest_entry_positive() {
        let mut v = Vector::from_vec(vec![0.1, -0.9, 0.3]);
        assert!(canonical_sign(&mut v));
        assert!(v[1] > 0.0);
    }

    #[test]
    fn eigen_sorted_descending() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0]);
        let (vals, _) = symmetric_eigen_desc(&m);
        assert_eq!(vals, vec![3.0, 1.0]);
    }
}
