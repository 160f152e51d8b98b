//! Dense tensor and matrix primitives.
//!
//! Everything is 64-bit real, row-major (last index fastest). The unfolding
//! column order is fixed to the Kolda-Bader convention: among the modes other
//! than the unfolding mode, the lowest mode index varies fastest along the
//! columns. The Khatri-Rao chains elsewhere in this crate (descending mode
//! order, skipping the unfolded mode) depend on exactly this ordering, so it
//! must never change.

use crate::error::{Error, Result};

/// N-dimensional array of `f64` with explicit shape, row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    /// Builds a tensor, validating that `data.len()` equals the product of extents.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::shape(
                "DenseTensor::new",
                format!("extents must all be >= 1, got {shape:?}"),
            ));
        }
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::shape(
                "DenseTensor::new",
                format!("shape {shape:?} needs {expect} entries, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![0.0; len]).expect("positive extents")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row-major strides: `stride[m] = prod(shape[m+1..])`.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.shape.len()];
        for m in (0..self.shape.len().saturating_sub(1)).rev() {
            s[m] = s[m + 1] * self.shape[m + 1];
        }
        s
    }

    /// Element access by multi-index (test and oracle use; hot paths index flat).
    pub fn get(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.shape.len());
        let strides = self.strides();
        let flat: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[flat]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        debug_assert_eq!(idx.len(), self.shape.len());
        let strides = self.strides();
        let flat: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[flat] = v;
    }

    /// `self += c * other`; shapes must match.
    pub fn add_scaled(&mut self, c: f64, other: &DenseTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "DenseTensor::add_scaled",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for a in &mut self.data {
            *a *= c;
        }
    }
}

/// Row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(
                "Matrix::new",
                format!("extents must be >= 1, got {rows}x{cols}"),
            ));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{rows}x{cols} needs {} entries, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols]).expect("positive extents")
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds from row slices; rows must be equal length. Test convenience.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows[0].len();
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Self::new(r, c, data).expect("positive extents")
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

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
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

    /// `self * b`.
    pub fn matmul(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.rows {
            return Err(Error::shape(
                "Matrix::matmul",
                format!("{}x{} * {}x{}", self.rows, self.cols, b.rows, b.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (k, &aik) in arow.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = b.row(k);
                for (o, &bkj) in orow.iter_mut().zip(brow) {
                    *o += aik * bkj;
                }
            }
        }
        Ok(out)
    }

    /// `self * b^T`; rows of both matrices are contiguous, so this is a dot per cell.
    pub fn matmul_bt(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.cols {
            return Err(Error::shape(
                "Matrix::matmul_bt",
                format!("{}x{} * ({}x{})^T", self.rows, self.cols, b.rows, b.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, b.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..b.rows {
                out.data[i * b.rows + j] = dot(arow, b.row(j));
            }
        }
        Ok(out)
    }

    /// `self * x` for a column vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape(
                "Matrix::matvec",
                format!("{}x{} * len-{} vector", self.rows, self.cols, x.len()),
            ));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `self^T * x`.
    pub fn matvec_t(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::shape(
                "Matrix::matvec_t",
                format!("({}x{})^T * len-{} vector", self.rows, self.cols, x.len()),
            ));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, &aij) in out.iter_mut().zip(self.row(i)) {
                *o += xi * aij;
            }
        }
        Ok(out)
    }

    /// Gram product `self^T * self` (R x R for an I x R factor).
    pub fn gram(&self) -> Matrix {
        let r = self.cols;
        let mut out = Matrix::zeros(r, r);
        for i in 0..self.rows {
            let row = self.row(i);
            for a in 0..r {
                let v = row[a];
                if v == 0.0 {
                    continue;
                }
                let orow = &mut out.data[a * r..(a + 1) * r];
                for (o, &w) in orow.iter_mut().zip(row) {
                    *o += v * w;
                }
            }
        }
        out
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, c: f64, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(
                "Matrix::add_scaled",
                format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for a in &mut self.data {
            *a *= c;
        }
    }

    /// Reinterprets as a 2-mode tensor (same layout, no copy of semantics).
    pub fn to_tensor(&self) -> DenseTensor {
        DenseTensor::new(vec![self.rows, self.cols], self.data.clone()).expect("valid matrix")
    }

    /// Reinterprets a 2-mode tensor as a matrix.
    pub fn from_tensor(t: &DenseTensor) -> Result<Matrix> {
        if t.ndim() != 2 {
            return Err(Error::shape(
                "Matrix::from_tensor",
                format!("expected 2 modes, got {}", t.ndim()),
            ));
        }
        Matrix::new(t.shape()[0], t.shape()[1], t.data().to_vec())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_mode(mode: usize, ndim: usize) -> Result<()> {
    if mode >= ndim {
        Err(Error::ModeOutOfRange { mode, ndim })
    } else {
        Ok(())
    }
}

/// Column strides of the mode-`n` unfolding: among the remaining modes the
/// lowest mode index varies fastest (Kolda-Bader order).
fn unfold_col_strides(shape: &[usize], mode: usize) -> Vec<usize> {
    let mut k = vec![0usize; shape.len()];
    let mut acc = 1;
    for m in 0..shape.len() {
        if m == mode {
            continue;
        }
        k[m] = acc;
        acc *= shape[m];
    }
    k
}

/// Mode-`n` unfolding: arranges mode-`n` fibers as columns of an
/// `I_n x (prod of other extents)` matrix. Modes are 0-based.
pub fn unfold(t: &DenseTensor, mode: usize) -> Result<Matrix> {
    check_mode(mode, t.ndim())?;
    let shape = t.shape();
    let rows = shape[mode];
    let cols = t.len() / rows;
    let strides = t.strides();
    let col_strides = unfold_col_strides(shape, mode);
    let mut out = Matrix::zeros(rows, cols);
    for (flat, &v) in t.data().iter().enumerate() {
        let mut row = 0;
        let mut col = 0;
        for m in 0..shape.len() {
            let im = (flat / strides[m]) % shape[m];
            if m == mode {
                row = im;
            } else {
                col += im * col_strides[m];
            }
        }
        out.data[row * cols + col] = v;
    }
    Ok(out)
}

/// Inverse of [`unfold`] with the same column convention.
pub fn fold(m: &Matrix, mode: usize, shape: &[usize]) -> Result<DenseTensor> {
    check_mode(mode, shape.len())?;
    let total: usize = shape.iter().product();
    if m.rows() != shape[mode] || m.rows() * m.cols() != total {
        return Err(Error::shape(
            "fold",
            format!(
                "matrix {}x{} does not fold to shape {:?} at mode {}",
                m.rows(),
                m.cols(),
                shape,
                mode
            ),
        ));
    }
    let mut out = DenseTensor::zeros(shape.to_vec());
    let strides = out.strides();
    let col_strides = unfold_col_strides(shape, mode);
    let cols = m.cols();
    for flat in 0..total {
        let mut row = 0;
        let mut col = 0;
        for mm in 0..shape.len() {
            let im = (flat / strides[mm]) % shape[mm];
            if mm == mode {
                row = im;
            } else {
                col += im * col_strides[mm];
            }
        }
        out.data_mut()[flat] = m.data()[row * cols + col];
    }
    Ok(out)
}

/// Khatri-Rao product: column-wise Kronecker of two matrices with equal
/// column counts. Column `r` of the result is `a[:,r] (x) b[:,r]`, with the
/// `b` index varying fastest.
pub fn khatri_rao(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::shape(
            "khatri_rao",
            format!("column counts differ: {} vs {}", a.cols(), b.cols()),
        ));
    }
    let r = a.cols();
    let mut out = Matrix::zeros(a.rows() * b.rows(), r);
    for ia in 0..a.rows() {
        let arow = a.row(ia);
        for ib in 0..b.rows() {
            let brow = b.row(ib);
            let orow = out.row_mut(ia * b.rows() + ib);
            for c in 0..r {
                orow[c] = arow[c] * brow[c];
            }
        }
    }
    Ok(out)
}

/// Kronecker product with the standard block structure.
pub fn kronecker(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows() * b.rows(), a.cols() * b.cols());
    for ia in 0..a.rows() {
        for ja in 0..a.cols() {
            let v = a.get(ia, ja);
            if v == 0.0 {
                continue;
            }
            for ib in 0..b.rows() {
                let orow = ia * b.rows() + ib;
                let base = orow * out.cols + ja * b.cols();
                let brow = b.row(ib);
                for jb in 0..b.cols() {
                    out.data[base + jb] = v * brow[jb];
                }
            }
        }
    }
    out
}

/// Elementwise (Hadamard) product.
pub fn hadamard(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::shape(
            "hadamard",
            format!("{}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Matrix::new(a.rows(), a.cols(), data)
}

/// Mode-`n` product `t x_n u`, computed through the unfolding identity
/// `Y_(n) = U * X_(n)`.
pub fn mode_n_product(t: &DenseTensor, u: &Matrix, mode: usize) -> Result<DenseTensor> {
    check_mode(mode, t.ndim())?;
    if u.cols() != t.shape()[mode] {
        return Err(Error::shape(
            "mode_n_product",
            format!(
                "matrix has {} cols but mode {} extent is {}",
                u.cols(),
                mode,
                t.shape()[mode]
            ),
        ));
    }
    let x = unfold(t, mode)?;
    let y = u.matmul(&x)?;
    let mut new_shape = t.shape().to_vec();
    new_shape[mode] = u.rows();
    fold(&y, mode, &new_shape)
}

/// Inner product of two same-shaped tensors.
pub fn inner_product(a: &DenseTensor, b: &DenseTensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "inner_product",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(dot(a.data(), b.data()))
}

/// Frobenius norm.
pub fn frobenius_norm(t: &DenseTensor) -> f64 {
    dot(t.data(), t.data()).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], seed: u64) -> DenseTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        DenseTensor::new(shape.to_vec(), data).unwrap()
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    /// Oracle: unfold by enumerating fibers straight from the definition,
    /// with the documented column order (lowest remaining mode fastest).
    fn unfold_oracle(t: &DenseTensor, mode: usize) -> Matrix {
        let shape = t.shape();
        let rows = shape[mode];
        let cols: usize = t.len() / rows;
        let mut out = Matrix::zeros(rows, cols);
        let rest: Vec<usize> = (0..shape.len()).filter(|&m| m != mode).collect();
        for col in 0..cols {
            // Decode the column into remaining-mode indices, first listed
            // (lowest) mode fastest.
            let mut idx = vec![0usize; shape.len()];
            let mut c = col;
            for &m in &rest {
                idx[m] = c % shape[m];
                c /= shape[m];
            }
            for i in 0..rows {
                idx[mode] = i;
                out.set(i, col, t.get(&idx));
            }
        }
        out
    }

    #[test]
    fn unfold_matrix_mode0_is_identity() {
        let t = DenseTensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = unfold(&t, 0).unwrap();
        assert_eq!(m.data(), t.data());
    }

    #[test]
    fn unfold_documented_example() {
        // t[i,j,k] = 100i + 10j + k, shape (2,2,2).
        let mut t = DenseTensor::zeros(vec![2, 2, 2]);
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    t.set(&[i, j, k], (100 * i + 10 * j + k) as f64);
                }
            }
        }
        let m = unfold(&t, 0).unwrap();
        let oracle = unfold_oracle(&t, 0);
        assert_eq!(m, oracle);
        // Lowest remaining mode (j) varies fastest along the columns.
        assert_eq!(m.row(0), &[0.0, 10.0, 1.0, 11.0]);
        assert_eq!(m.row(1), &[100.0, 110.0, 101.0, 111.0]);
    }

    #[test]
    fn unfold_matches_oracle_all_modes() {
        let t = random_tensor(&[2, 3, 4], 7);
        for mode in 0..3 {
            let m = unfold(&t, mode).unwrap();
            let oracle = unfold_oracle(&t, mode);
            assert_eq!(m, oracle, "mode {mode}");
        }
    }

    #[test]
    fn unfold_mode_out_of_range() {
        let t = random_tensor(&[2, 2], 1);
        assert!(matches!(
            unfold(&t, 2),
            Err(Error::ModeOutOfRange { mode: 2, ndim: 2 })
        ));
    }

    #[test]
    fn fold_unfold_round_trip_bit_exact() {
        for shape in [vec![3, 4, 5], vec![2, 3, 4], vec![2, 2, 3], vec![5]] {
            let t = random_tensor(&shape, 42);
            for mode in 0..shape.len() {
                let m = unfold(&t, mode).unwrap();
                let back = fold(&m, mode, &shape).unwrap();
                assert_eq!(back, t, "shape {shape:?} mode {mode}");
            }
        }
    }

    #[test]
    fn fold_one_column_matrix_is_vector_tensor() {
        let m = Matrix::new(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = fold(&m, 0, &[4]).unwrap();
        assert_eq!(t.shape(), &[4]);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn fold_dimension_mismatch() {
        let m = Matrix::zeros(3, 4);
        assert!(fold(&m, 0, &[3, 5]).is_err());
        assert!(fold(&m, 1, &[3, 4]).is_err());
    }

    #[test]
    fn khatri_rao_documented_example() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let kr = khatri_rao(&a, &b).unwrap();
        let expect = Matrix::from_rows(&[
            vec![0.0, 2.0],
            vec![1.0, 0.0],
            vec![0.0, 4.0],
            vec![3.0, 0.0],
        ]);
        assert_eq!(kr, expect);
    }

    #[test]
    fn khatri_rao_ones_row_identity() {
        let ones = Matrix::new(1, 3, vec![1.0; 3]).unwrap();
        let b = random_matrix(4, 3, 3);
        assert_eq!(khatri_rao(&ones, &b).unwrap(), b);
    }

    #[test]
    fn khatri_rao_single_column_is_kronecker() {
        let a = random_matrix(3, 1, 5);
        let b = random_matrix(2, 1, 6);
        assert_eq!(khatri_rao(&a, &b).unwrap(), kronecker(&a, &b));
    }

    #[test]
    fn khatri_rao_mismatch() {
        let a = Matrix::zeros(2, 2);
        let b = Matrix::zeros(2, 3);
        assert!(khatri_rao(&a, &b).is_err());
    }

    #[test]
    fn kronecker_scalar_identity() {
        let one = Matrix::new(1, 1, vec![1.0]).unwrap();
        let b = random_matrix(3, 2, 9);
        assert_eq!(kronecker(&one, &b), b);
    }

    #[test]
    fn kronecker_identity_block_diagonal() {
        let b = random_matrix(2, 2, 11);
        let k = kronecker(&Matrix::identity(2), &b);
        assert_eq!(k.rows(), 4);
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(k.get(i, j), b.get(i, j));
                assert_eq!(k.get(2 + i, 2 + j), b.get(i, j));
                assert_eq!(k.get(i, 2 + j), 0.0);
                assert_eq!(k.get(2 + i, j), 0.0);
            }
        }
    }

    #[test]
    fn kronecker_matches_quadruple_loop() {
        let a = random_matrix(2, 2, 13);
        let b = random_matrix(2, 2, 14);
        let k = kronecker(&a, &b);
        for ia in 0..2 {
            for ja in 0..2 {
                for ib in 0..2 {
                    for jb in 0..2 {
                        let expect = a.get(ia, ja) * b.get(ib, jb);
                        assert_eq!(k.get(ia * 2 + ib, ja * 2 + jb), expect);
                    }
                }
            }
        }
    }

    #[test]
    fn hadamard_identities_and_oracle() {
        let a = random_matrix(3, 3, 17);
        let ones = Matrix::new(3, 3, vec![1.0; 9]).unwrap();
        let zeros = Matrix::zeros(3, 3);
        assert_eq!(hadamard(&a, &ones).unwrap(), a);
        assert_eq!(hadamard(&a, &zeros).unwrap(), zeros);
        let b = random_matrix(3, 3, 18);
        let h = hadamard(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(h.get(i, j), a.get(i, j) * b.get(i, j));
            }
        }
        assert!(hadamard(&a, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn mode_n_product_identity_matrix() {
        let t = random_tensor(&[2, 3, 4], 19);
        for mode in 0..3 {
            let u = Matrix::identity(t.shape()[mode]);
            assert_eq!(mode_n_product(&t, &u, mode).unwrap(), t);
        }
    }

    #[test]
    fn mode_n_product_matrix_case_is_t_times_ut() {
        let t = random_tensor(&[2, 3], 21);
        let u = random_matrix(4, 3, 22);
        let y = mode_n_product(&t, &u, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4]);
        let tm = Matrix::from_tensor(&t).unwrap();
        let expect = tm.matmul_bt(&u).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                assert!((y.get(&[i, j]) - expect.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mode_n_product_vector_chain_matches_summation() {
        // Contract a (2,2,2) tensor with a vector along every mode; compare
        // with the brute-force triple sum.
        let t = random_tensor(&[2, 2, 2], 23);
        let v1 = random_matrix(1, 2, 24);
        let v2 = random_matrix(1, 2, 25);
        let v3 = random_matrix(1, 2, 26);
        let y = mode_n_product(&t, &v1, 0).unwrap();
        let y = mode_n_product(&y, &v2, 1).unwrap();
        let y = mode_n_product(&y, &v3, 2).unwrap();
        assert_eq!(y.len(), 1);
        let mut expect = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    expect += t.get(&[i, j, k]) * v1.get(0, i) * v2.get(0, j) * v3.get(0, k);
                }
            }
        }
        assert!((y.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn mode_n_product_dim_mismatch() {
        let t = random_tensor(&[2, 3], 27);
        let u = Matrix::zeros(4, 4);
        assert!(mode_n_product(&t, &u, 1).is_err());
    }

    #[test]
    fn inner_product_and_norm() {
        let t = random_tensor(&[3, 4], 29);
        let z = DenseTensor::zeros(vec![3, 4]);
        assert_eq!(inner_product(&t, &z).unwrap(), 0.0);

        let mut onehot = DenseTensor::zeros(vec![2, 2]);
        onehot.set(&[1, 0], 1.0);
        assert_eq!(frobenius_norm(&onehot), 1.0);

        let u = random_tensor(&[3, 4], 30);
        let ip = inner_product(&t, &u).unwrap();
        let flat: f64 = t.data().iter().zip(u.data()).map(|(a, b)| a * b).sum();
        assert_eq!(ip, flat);

        let n = frobenius_norm(&t);
        let ip_self = inner_product(&t, &t).unwrap();
        assert!((n * n - ip_self).abs() <= 1e-12 * ip_self.abs().max(1.0));

        assert!(inner_product(&t, &DenseTensor::zeros(vec![4, 3])).is_err());
    }

    #[test]
    fn matmul_agrees_with_naive() {
        let a = random_matrix(3, 4, 31);
        let b = random_matrix(4, 5, 32);
        let c = a.matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert!((c.get(i, j) - s).abs() < 1e-12);
            }
        }
        let cbt = a.matmul_bt(&b.transpose()).unwrap();
        assert_eq!(c, cbt);
    }

    #[test]
    fn gram_is_at_a() {
        let a = random_matrix(5, 3, 33);
        let g = a.gram();
        let expect = a.transpose().matmul(&a).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((g.get(i, j) - expect.get(i, j)).abs() < 1e-12);
            }
        }
    }
}
