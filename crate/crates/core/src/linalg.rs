//! Small dense symmetric eigendecomposition via cyclic Jacobi rotations.
//!
//! nalgebra's `symmetric_eigen` can return eigenvectors with large
//! residuals when two eigenvalues nearly coincide (observed on plane
//! fits of square-symmetric point sets, where the spread along x and y
//! agrees to seven digits). Jacobi iteration has no such failure mode:
//! every rotation is orthogonal by construction and convergence is
//! quadratic, so for the tiny matrices used here (3×3 scatter, 6×6
//! normal equations) it delivers machine-precision eigenpairs at
//! negligible cost.

use nalgebra::{SMatrix, SVector};

/// Eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvalues ascending and
/// the matching orthonormal eigenvectors as columns. Only the upper
/// triangle of `m` is trusted; the matrix is symmetrized on entry.
pub fn jacobi_eigen<const N: usize>(
    m: &SMatrix<f64, N, N>,
) -> (SVector<f64, N>, SMatrix<f64, N, N>) {
    let mut a = (m + m.transpose()) * 0.5;
    let mut v = SMatrix::<f64, N, N>::identity();
    let frob = a.norm();
    if frob > 0.0 {
        let tol = f64::EPSILON * frob;
        for _sweep in 0..64 {
            let mut off_sq = 0.0;
            for p in 0..N {
                for q in (p + 1)..N {
                    off_sq += 2.0 * a[(p, q)] * a[(p, q)];
                }
            }
            if off_sq.sqrt() <= tol {
                break;
            }
            for p in 0..N {
                for q in (p + 1)..N {
                    let apq = a[(p, q)];
                    if apq == 0.0 {
                        continue;
                    }
                    // Rotation angle zeroing a[(p, q)] (Golub & Van Loan).
                    let tau = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                    let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    let mut j = SMatrix::<f64, N, N>::identity();
                    j[(p, p)] = c;
                    j[(q, q)] = c;
                    j[(p, q)] = s;
                    j[(q, p)] = -s;
                    a = j.transpose() * a * j;
                    // Rounding can leave the zeroed pair asymmetric at
                    // epsilon scale; restore exact symmetry.
                    a = (a + a.transpose()) * 0.5;
                    v *= j;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..N).collect();
    order.sort_by(|&i, &j| a[(i, i)].partial_cmp(&a[(j, j)]).unwrap());
    let mut values = SVector::<f64, N>::zeros();
    let mut vectors = SMatrix::<f64, N, N>::zeros();
    for (rank, &i) in order.iter().enumerate() {
        values[rank] = a[(i, i)];
        vectors.set_column(rank, &v.column(i));
    }
    (values, vectors)
}
