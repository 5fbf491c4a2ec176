//! Small dense linear-algebra helpers: cosine similarity, random rotations,
//! and a cyclic Jacobi eigensolver for symmetric matrices.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn norm(a: ArrayView1<f64>) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero for a zero-norm operand so rankings stay total.
pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Random orthogonal matrix from Gram-Schmidt over a Gaussian draw.
pub fn random_rotation(dim: usize, rng: &mut impl Rng) -> Array2<f64> {
    loop {
        let mut m = Array2::<f64>::zeros((dim, dim));
        for v in m.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        if let Some(q) = gram_schmidt(&m) {
            return q;
        }
        // Rank-deficient draw (probability zero in theory); redraw.
    }
}

fn gram_schmidt(m: &Array2<f64>) -> Option<Array2<f64>> {
    let dim = m.nrows();
    let mut q = Array2::<f64>::zeros((dim, dim));
    for col in 0..dim {
        let mut v: Array1<f64> = m.column(col).to_owned();
        for prev in 0..col {
            let proj = dot(v.view(), q.column(prev));
            v = &v - &(&q.column(prev).to_owned() * proj);
        }
        let n = norm(v.view());
        if n < 1e-10 {
            return None;
        }
        q.column_mut(col).assign(&(&v / n));
    }
    Some(q)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi sweeps.
/// Returns (eigenvalues, eigenvectors as columns), sorted by descending
/// eigenvalue with index order breaking ties.
pub fn symmetric_eigen(matrix: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = matrix.nrows();
    assert_eq!(n, matrix.ncols(), "matrix must be square");
    let mut a = matrix.clone();
    let mut v = Array2::<f64>::eye(n);

    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[[p, q]] * a[[p, q]];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[[p, p]];
                let aqq = a[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[[j, j]]
            .partial_cmp(&a[[i, i]])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let values: Vec<f64> = order.iter().map(|&i| a[[i, i]]).collect();
    let mut vectors = Array2::<f64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).assign(&v.column(src));
    }
    (values, vectors)
}
