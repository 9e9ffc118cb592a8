use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Pivot threshold below which a factorization is declared singular.
pub const EPS_PIVOT: f64 = 1e-12;

static LU_EVALS: AtomicU64 = AtomicU64::new(0);

/// Number of LU factorizations performed since process start. Used to
/// assert that energy training never touches a determinant.
pub fn lu_eval_count() -> u64 {
    LU_EVALS.load(Ordering::Relaxed)
}

/// Dense row-major matrix of f64. Plain value without a tape handle;
/// immutable sharing across threads is safe.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Dimension("ragged row list".into()));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = s;
        }
        m
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Matrix { rows: 1, cols: values.len(), data: values.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn require_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{what} contains non-finite entries")))
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "elementwise {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Frobenius norm over all entries.
    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// LU factorization with partial pivoting: P·A = L·U.
pub struct LuFactors {
    lu: Matrix,
    /// perm[i] = source row of row i after pivoting.
    perm: Vec<usize>,
    sign: f64,
}

/// Factor a square matrix. Fails with a singular-matrix error when a
/// pivot falls below `EPS_PIVOT`.
pub fn lu_decompose(a: &Matrix) -> Result<LuFactors> {
    if a.rows() != a.cols() {
        return Err(Error::Dimension(format!("lu_decompose on {}x{}", a.rows(), a.cols())));
    }
    LU_EVALS.fetch_add(1, Ordering::Relaxed);
    let n = a.rows();
    let mut lu = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut sign = 1.0;
    for k in 0..n {
        let mut p = k;
        let mut best = lu.get(k, k).abs();
        for i in (k + 1)..n {
            let v = lu.get(i, k).abs();
            if v > best {
                best = v;
                p = i;
            }
        }
        if best < EPS_PIVOT {
            return Err(Error::Singular(format!("pivot {best:.3e} below threshold at column {k}")));
        }
        if p != k {
            for j in 0..n {
                let t = lu.get(k, j);
                lu.set(k, j, lu.get(p, j));
                lu.set(p, j, t);
            }
            perm.swap(k, p);
            sign = -sign;
        }
        let pivot = lu.get(k, k);
        for i in (k + 1)..n {
            let f = lu.get(i, k) / pivot;
            lu.set(i, k, f);
            for j in (k + 1)..n {
                let v = lu.get(i, j) - f * lu.get(k, j);
                lu.set(i, j, v);
            }
        }
    }
    Ok(LuFactors { lu, perm, sign })
}

impl LuFactors {
    pub fn dim(&self) -> usize {
        self.lu.rows()
    }

    /// Sign of the row permutation.
    pub fn sign(&self) -> f64 {
        self.sign
    }

    /// Unit-lower-triangular factor.
    pub fn lower(&self) -> Matrix {
        let n = self.dim();
        let mut l = Matrix::identity(n);
        for i in 0..n {
            for j in 0..i {
                l.set(i, j, self.lu.get(i, j));
            }
        }
        l
    }

    /// Upper-triangular factor.
    pub fn upper(&self) -> Matrix {
        let n = self.dim();
        let mut u = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                u.set(i, j, self.lu.get(i, j));
            }
        }
        u
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn log_abs_det(&self) -> f64 {
        let n = self.dim();
        (0..n).map(|i| self.lu.get(i, i).abs().ln()).sum()
    }

    /// Solve A·x = b for a single right-hand side.
    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        if b.len() != n {
            return Err(Error::Dimension(format!("solve with rhs of length {} against dim {n}", b.len())));
        }
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 1..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu.get(i, j) * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in (i + 1)..n {
                s -= self.lu.get(i, j) * x[j];
            }
            x[i] = s / self.lu.get(i, i);
        }
        Ok(x)
    }
}

/// Solve A·X = B column by column.
pub fn lu_solve(f: &LuFactors, b: &Matrix) -> Result<Matrix> {
    let n = f.dim();
    if b.rows() != n {
        return Err(Error::Dimension(format!("lu_solve rhs {}x{} against dim {n}", b.rows(), b.cols())));
    }
    let mut out = Matrix::zeros(n, b.cols());
    let mut col = vec![0.0; n];
    for j in 0..b.cols() {
        for i in 0..n {
            col[i] = b.get(i, j);
        }
        let x = f.solve_vec(&col)?;
        for i in 0..n {
            out.set(i, j, x[i]);
        }
    }
    Ok(out)
}

/// X = A⁻¹·B without forming the inverse.
pub fn mat_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    lu_solve(&lu_decompose(a)?, b)
}

/// Inverse via LU; prefer `mat_solve` when a full inverse is not needed.
pub fn mat_inverse(a: &Matrix) -> Result<Matrix> {
    mat_solve(a, &Matrix::identity(a.rows()))
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues (ascending) and eigenvectors as matrix columns.
pub fn sym_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if a.rows() != a.cols() {
        return Err(Error::Dimension(format!("sym_eigen on {}x{}", a.rows(), a.cols())));
    }
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let max_sweeps = 100;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m.get(i, j).abs();
            }
        }
        if off < 1e-14 * (1.0 + m.max_abs()) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut pairs: Vec<(f64, usize)> = (0..n).map(|i| (m.get(i, i), i)).collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let values: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("eigensolver produced non-finite eigenvalues".into()));
    }
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &(_, src)) in pairs.iter().enumerate() {
        for k in 0..n {
            vectors.set(k, dst, v.get(k, src));
        }
    }
    Ok((values, vectors))
}

/// Symmetric PSD square root via eigendecomposition. Eigenvalues below
/// `-neg_tol` are rejected, small negatives are clamped to zero.
pub fn sym_sqrt(a: &Matrix, neg_tol: f64) -> Result<Matrix> {
    let (vals, vecs) = sym_eigen(a)?;
    let n = a.rows();
    let mut out = Matrix::zeros(n, n);
    for (k, &lam) in vals.iter().enumerate() {
        if lam < -neg_tol {
            return Err(Error::Numeric(format!("matrix square root of indefinite matrix (eigenvalue {lam:.3e})")));
        }
        let s = lam.max(0.0).sqrt();
        for i in 0..n {
            for j in 0..n {
                let v = out.get(i, j) + s * vecs.get(i, k) * vecs.get(j, k);
                out.set(i, j, v);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_hand_value() {
        let i2 = Matrix::identity(2);
        let x = Matrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap();
        assert_eq!(i2.matmul(&x).unwrap(), x);

        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ones = Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        let y = a.matmul(&ones).unwrap();
        assert_eq!(y.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&Matrix::zeros(2, 3)), Err(Error::Dimension(_))));
    }

    #[test]
    fn lu_identity_logdet_zero() {
        let f = lu_decompose(&Matrix::identity(4)).unwrap();
        assert_eq!(f.log_abs_det(), 0.0);
    }

    #[test]
    fn lu_diag_logdet() {
        let a = Matrix::from_vec(2, 2, vec![2.0, 0.0, 0.0, 3.0]).unwrap();
        let f = lu_decompose(&a).unwrap();
        assert!((f.log_abs_det() - 6.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn lu_rank_deficient_rejected() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(lu_decompose(&a), Err(Error::Singular(_))));
    }

    #[test]
    fn lu_solve_identity_and_diag() {
        let f = lu_decompose(&Matrix::identity(2)).unwrap();
        let b = Matrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap();
        assert_eq!(lu_solve(&f, &b).unwrap().data(), &[1.0, 2.0]);

        let a = Matrix::from_vec(2, 2, vec![2.0, 0.0, 0.0, 4.0]).unwrap();
        let b = Matrix::from_vec(2, 1, vec![2.0, 4.0]).unwrap();
        let x = mat_solve(&a, &b).unwrap();
        assert_eq!(x.data(), &[1.0, 1.0]);
    }

    #[test]
    fn lu_roundtrip_random_well_conditioned() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            let d = 2 + (trial % 31);
            let mut a = Matrix::scaled_identity(d, 2.0);
            for i in 0..d {
                for j in 0..d {
                    let v = a.get(i, j) + 0.3 * rng.gen_range(-1.0..1.0);
                    a.set(i, j, v);
                }
            }
            let x = Matrix::from_vec(d, 1, (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let b = a.matmul(&x).unwrap();
            let got = mat_solve(&a, &b).unwrap();
            let err = got.sub(&x).unwrap().max_abs();
            assert!(err <= 1e-9, "round-trip error {err}");
        }
    }

    #[test]
    fn jacobi_eigen_recovers_spectrum() {
        let a = Matrix::from_vec(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let (vals, vecs) = sym_eigen(&a).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-12);
        assert!((vals[1] - 3.0).abs() < 1e-12);
        // Columns are orthonormal.
        let vtv = vecs.transpose().matmul(&vecs).unwrap();
        assert!(vtv.sub(&Matrix::identity(2)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn sym_sqrt_squares_back() {
        let a = Matrix::from_vec(2, 2, vec![5.0, 2.0, 2.0, 3.0]).unwrap();
        let r = sym_sqrt(&a, 1e-8).unwrap();
        let rr = r.matmul(&r).unwrap();
        assert!(rr.sub(&a).unwrap().max_abs() < 1e-10);
    }
}
