//! Small dense helpers over row-major `Vec<f64>` matrices.

/// `y = M x` for an `rows × cols` row-major matrix.
pub fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    m.chunks_exact(cols).map(|row| dot(row, x)).collect()
}

/// `y = Mᵀ x` for an `rows × cols` row-major matrix.
pub fn matvec_t(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(x.len(), rows);
    let mut y = vec![0.0; cols];
    for (row, &xi) in m.chunks_exact(cols).zip(x) {
        for (yj, &mij) in y.iter_mut().zip(row) {
            *yj += mij * xi;
        }
    }
    y
}

/// `M += s · u vᵀ`.
pub fn add_outer(m: &mut [f64], cols: usize, s: f64, u: &[f64], v: &[f64]) {
    for (row, &ui) in m.chunks_exact_mut(cols).zip(u) {
        let k = s * ui;
        for (mij, &vj) in row.iter_mut().zip(v) {
            *mij += k * vj;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn axpy(y: &mut [f64], s: f64, x: &[f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Orthonormalize the rows of a `rows × cols` matrix in place (modified
/// Gram-Schmidt). Returns false if a row collapses.
pub fn orthonormalize_rows(m: &mut [f64], rows: usize, cols: usize) -> bool {
    for i in 0..rows {
        for j in 0..i {
            let (head, tail) = m.split_at_mut(i * cols);
            let rj = &head[j * cols..(j + 1) * cols];
            let ri = &mut tail[..cols];
            let p = dot(ri, rj);
            axpy(ri, -p, rj);
        }
        let ri = &mut m[i * cols..(i + 1) * cols];
        let n = norm(ri);
        if n < 1e-10 {
            return false;
        }
        for v in ri.iter_mut() {
            *v /= n;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transpose_product_agrees() {
        let m = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(matvec(&m, 2, 3, &[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
        assert_eq!(matvec_t(&m, 2, 3, &[1.0, -1.0]), vec![-3.0, -3.0, -3.0]);
    }

    #[test]
    fn gram_schmidt_gives_orthonormal_rows() {
        let mut m = vec![1.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        assert!(orthonormalize_rows(&mut m, 2, 3));
        assert!((dot(&m[..3], &m[..3]) - 1.0).abs() < 1e-12);
        assert!((dot(&m[3..], &m[3..]) - 1.0).abs() < 1e-12);
        assert!(dot(&m[..3], &m[3..]).abs() < 1e-12);
    }
}
