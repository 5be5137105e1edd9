//! Dense linear algebra used by the operator and solver modules.
//!
//! Matrices are stored row-major so that rows can be assembled in parallel and
//! written out without transposition. Only the few factorizations the solvers
//! need live here; full SVDs go through `nalgebra`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[inline]
pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn normalize(v: &mut [f64]) -> f64 {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Surface area of the unit sphere S^n in R^{n+1}: 2 pi^{(n+1)/2} / Gamma((n+1)/2).
///
/// Evaluated through the recursion w_n = 2 pi w_{n-2} / (n - 1), which is the
/// Gamma-function formula with the half-integer values expanded.
pub fn unit_sphere_area(n: usize) -> f64 {
    match n {
        0 => 2.0,
        1 => 2.0 * std::f64::consts::PI,
        _ => 2.0 * std::f64::consts::PI * unit_sphere_area(n - 2) / (n as f64 - 1.0),
    }
}

/// Volume of the unit ball in R^n.
pub fn unit_ball_volume(n: usize) -> f64 {
    if n == 0 {
        1.0
    } else {
        unit_sphere_area(n - 1) / n as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major buffer has wrong length");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * xi;
            }
        }
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    /// `self + shift * I`.
    pub fn shifted(&self, shift: f64) -> Self {
        let mut m = self.clone();
        for i in 0..self.rows.min(self.cols) {
            m.data[i * self.cols + i] += shift;
        }
        m
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_nalgebra(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    /// D_left * M * D_right for diagonal scalings given as vectors.
    pub fn scaled(&self, left: &[f64], right: &[f64]) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| left[i] * self.get(i, j) * right[j])
    }
}

/// LU factorization with partial pivoting, P A = L U.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    min_pivot: f64,
}

impl Lu {
    pub fn factor(a: &DenseMatrix) -> Result<Self> {
        if a.rows != a.cols {
            return Err(Error::Factorization(format!("matrix is {}x{}, not square", a.rows, a.cols)));
        }
        if !a.is_finite() {
            return Err(Error::Factorization("matrix has non-finite entries".into()));
        }
        let n = a.rows;
        let mut lu = a.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut min_pivot = f64::INFINITY;
        for k in 0..n {
            let (p, pv) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            min_pivot = min_pivot.min(pv);
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let pivot = lu[k * n + k];
            if pivot == 0.0 {
                continue;
            }
            let (head, tail) = lu.split_at_mut((k + 1) * n);
            let row_k = &head[k * n..(k + 1) * n];
            for row_i in tail.chunks_exact_mut(n) {
                let factor = row_i[k] / pivot;
                row_i[k] = factor;
                if factor != 0.0 {
                    for j in k + 1..n {
                        row_i[j] -= factor * row_k[j];
                    }
                }
            }
        }
        Ok(Self { n, lu, perm, min_pivot })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Smallest absolute pivot met during elimination.
    pub fn min_pivot(&self) -> f64 {
        self.min_pivot
    }

    pub fn is_singular(&self) -> bool {
        self.min_pivot == 0.0
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let s: f64 = (0..i).map(|j| self.lu[i * n + j] * x[j]).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| self.lu[i * n + j] * x[j]).sum();
            x[i] = (x[i] - s) / self.lu[i * n + i];
        }
        x
    }

    /// Solves A^T x = b.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        // A^T = U^T L^T P, so solve U^T z = b, L^T y = z, x = P^T y.
        let mut z = b.to_vec();
        for i in 0..n {
            let s: f64 = (0..i).map(|j| self.lu[j * n + i] * z[j]).sum();
            z[i] = (z[i] - s) / self.lu[i * n + i];
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| self.lu[j * n + i] * z[j]).sum();
            z[i] -= s;
        }
        let mut x = vec![0.0; n];
        for (k, &p) in self.perm.iter().enumerate() {
            x[p] = z[k];
        }
        x
    }
}

/// Solves A x = b with one factorization and a few steps of iterative refinement.
pub fn solve_refined(a: &DenseMatrix, lu: &Lu, b: &[f64], steps: usize) -> Vec<f64> {
    let mut x = lu.solve(b);
    for _ in 0..steps {
        let ax = a.matvec(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        if norm(&r) == 0.0 {
            break;
        }
        let dx = lu.solve(&r);
        x.iter_mut().zip(&dx).for_each(|(xi, d)| *xi += d);
    }
    x
}

pub(crate) fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        if normalize(&mut v) > 1e-3 {
            return v;
        }
    }
}

/// Largest singular value of B by power iteration on B^T B.
///
/// `apply` and `apply_t` compute B x and B^T x. Returns 0 for the zero operator.
pub fn power_iteration_sigma_max(
    dim: usize,
    apply: impl Fn(&[f64]) -> Vec<f64>,
    apply_t: impl Fn(&[f64]) -> Vec<f64>,
    rng: &mut ChaCha8Rng,
    rel_tol: f64,
    max_iter: usize,
) -> Result<f64> {
    if dim == 0 {
        return Ok(0.0);
    }
    let mut v = random_unit(rng, dim);
    let mut estimate = 0.0;
    for _ in 0..max_iter {
        let bv = apply(&v);
        let bnorm = norm(&bv);
        if bnorm == 0.0 {
            return Ok(0.0);
        }
        let mut w = apply_t(&bv);
        let wnorm = normalize(&mut w);
        if wnorm == 0.0 {
            return Ok(0.0);
        }
        // |B v| is a lower bound that converges to sigma_max.
        let next = bnorm;
        let converged = (next - estimate).abs() <= rel_tol * next;
        estimate = next;
        v = w;
        if converged {
            return Ok(estimate);
        }
    }
    Err(Error::NoConvergence { iterations: max_iter, estimate })
}

/// Smallest singular value of B via inverse iteration with B^{-1} and B^{-T}.
pub fn inverse_iteration_sigma_min(
    dim: usize,
    apply_inv: impl Fn(&[f64]) -> Vec<f64>,
    apply_inv_t: impl Fn(&[f64]) -> Vec<f64>,
    rng: &mut ChaCha8Rng,
    rel_tol: f64,
    max_iter: usize,
) -> Result<f64> {
    let inv_norm = power_iteration_sigma_max(dim, apply_inv, apply_inv_t, rng, rel_tol, max_iter)?;
    if !inv_norm.is_finite() {
        return Ok(0.0);
    }
    Ok(if inv_norm == 0.0 { f64::INFINITY } else { 1.0 / inv_norm })
}

/// Orthonormal basis of the complement of the unit vector `v` (Gram–Schmidt on
/// the coordinate axes, most transverse axes first).
pub fn orthonormal_complement(v: &[f64]) -> Vec<Vec<f64>> {
    let d = v.len();
    let mut axes: Vec<usize> = (0..d).collect();
    axes.sort_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()));
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d - 1);
    for &k in &axes {
        if basis.len() + 1 == d {
            break;
        }
        let mut e = vec![0.0; d];
        e[k] = 1.0;
        let c = dot(&e, v);
        for i in 0..d {
            e[i] -= c * v[i];
        }
        for b in &basis {
            let c = dot(&e, b);
            for i in 0..d {
                e[i] -= c * b[i];
            }
        }
        if normalize(&mut e) > 1e-8 {
            basis.push(e);
        }
    }
    basis
}

/// Nelder–Mead minimization from `x0` with initial simplex edge `step`.
pub fn nelder_mead(f: impl Fn(&[f64]) -> f64, x0: &[f64], step: f64, max_iter: usize, tol: f64) -> (Vec<f64>, f64) {
    let d = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(d + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for k in 0..d {
        let mut p = x0.to_vec();
        p[k] += step;
        let v = f(&p);
        simplex.push((p, v));
    }
    let lerp = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect() };
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if (simplex[d].1 - simplex[0].1).abs() <= tol {
            break;
        }
        let mut centroid = vec![0.0; d];
        for (p, _) in &simplex[..d] {
            for i in 0..d {
                centroid[i] += p[i] / d as f64;
            }
        }
        let worst = simplex[d].clone();
        let reflected = lerp(&centroid, &worst.0, -1.0);
        let fr = f(&reflected);
        if fr < simplex[0].1 {
            let expanded = lerp(&centroid, &worst.0, -2.0);
            let fe = f(&expanded);
            simplex[d] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[d - 1].1 {
            simplex[d] = (reflected, fr);
        } else {
            let contracted = lerp(&centroid, &worst.0, 0.5);
            let fc = f(&contracted);
            if fc < worst.1 {
                simplex[d] = (contracted, fc);
            } else {
                let best = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    let p = lerp(&best, &entry.0, 0.5);
                    let v = f(&p);
                    *entry = (p, v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0)
}

/// Eigen-decomposition of a small symmetric matrix, eigenvalues ascending.
pub fn symmetric_eigen(m: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = m.len();
    let mat = nalgebra::DMatrix::from_fn(n, n, |i, j| m[i][j]);
    let eig = nalgebra::SymmetricEigen::new(mat);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = order
        .iter()
        .map(|&k| (0..n).map(|i| eig.eigenvectors[(i, k)]).collect())
        .collect();
    (values, vectors)
}

/// Singular values of a dense matrix, nonincreasing.
pub fn singular_values(m: &DenseMatrix) -> Vec<f64> {
    if m.rows == 0 || m.cols == 0 {
        return Vec::new();
    }
    let svd = m.to_nalgebra().svd(false, false);
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn sphere_areas() {
        assert!((unit_sphere_area(1) - 2.0 * std::f64::consts::PI).abs() < 1e-15);
        assert!((unit_sphere_area(2) - 4.0 * std::f64::consts::PI).abs() < 1e-14);
        assert!((unit_sphere_area(3) - 2.0 * std::f64::consts::PI.powi(2)).abs() < 1e-13);
        assert!((unit_ball_volume(2) - std::f64::consts::PI).abs() < 1e-15);
    }

    #[test]
    fn lu_solves_and_transposed_solves() {
        let a = DenseMatrix::from_row_major(3, 3, vec![0.0, 2.0, 1.0, 1.0, -1.0, 3.0, 4.0, 0.5, 2.0]);
        let lu = Lu::factor(&a).unwrap();
        let b = [1.0, 2.0, 3.0];
        let x = lu.solve(&b);
        let ax = a.matvec(&x);
        for (l, r) in ax.iter().zip(&b) {
            assert!((l - r).abs() < 1e-13);
        }
        let y = lu.solve_transpose(&b);
        let aty = a.matvec_transpose(&y);
        for (l, r) in aty.iter().zip(&b) {
            assert!((l - r).abs() < 1e-13);
        }
    }

    #[test]
    fn singular_matrix_reports_zero_pivot() {
        let a = DenseMatrix::from_row_major(2, 2, vec![1.0, 2.0, 2.0, 4.0]);
        let lu = Lu::factor(&a).unwrap();
        assert!(lu.is_singular());
    }

    #[test]
    fn power_iteration_on_diagonal() {
        let d = [3.0, -5.0, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = power_iteration_sigma_max(
            3,
            |x| x.iter().zip(&d).map(|(a, b)| a * b).collect(),
            |x| x.iter().zip(&d).map(|(a, b)| a * b).collect(),
            &mut rng,
            1e-12,
            10_000,
        )
        .unwrap();
        assert!((s - 5.0).abs() < 1e-9);
    }
}
