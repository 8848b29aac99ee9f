//! Dense `f64` arrays of rank 0, 1 or 2, stored row-major in a flat `Vec`.
//!
//! This is the storage type underneath the autodiff tape and the plain
//! numeric helpers used by the optimizer, EMA, samplers and metrics. Shape
//! checks here are `assert!`s: callers (the tape, the network) validate
//! shapes up front and report structured errors; by the time an `Arr` kernel
//! runs, a mismatch is a bug.

/// Shape of an [`Arr`]. Rank is at most 2; matrices are row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    /// Number of stored elements.
    pub fn len(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rank(&self) -> usize {
        match *self {
            Shape::Scalar => 0,
            Shape::Vector(_) => 1,
            Shape::Matrix(_, _) => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Arr {
    shape: Shape,
    data: Vec<f64>,
}

impl Arr {
    pub fn scalar(v: f64) -> Self {
        Arr { shape: Shape::Scalar, data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Arr { shape: Shape::Vector(data.len()), data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Arr { shape: Shape::Matrix(rows, cols), data }
    }

    /// Matrix built row by row from a closure.
    pub fn from_rows(rows: usize, cols: usize, mut f: impl FnMut(usize, &mut [f64])) -> Self {
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            f(i, &mut data[i * cols..(i + 1) * cols]);
        }
        Arr { shape: Shape::Matrix(rows, cols), data }
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.len();
        Arr { shape, data: vec![0.0; n] }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
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

    /// Value of a rank-0 array.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape, Shape::Scalar, "item() on non-scalar");
        self.data[0]
    }

    /// `(rows, cols)` of a rank-2 array.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape {
            Shape::Matrix(r, c) => (r, c),
            _ => panic!("dims() on non-matrix {:?}", self.shape),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (r, c) = self.dims();
        assert!(i < r, "row index out of range");
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let (r, c) = self.dims();
        assert!(i < r, "row index out of range");
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Copy of rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Arr {
        let (r, c) = self.dims();
        assert!(start <= end && end <= r, "row range {start}..{end} out of {r}");
        Arr { shape: Shape::Matrix(end - start, c), data: self.data[start * c..end * c].to_vec() }
    }

    /// Elementwise map into a new array.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Arr {
        Arr { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// `self + k * other`, in place. Shapes must match.
    pub fn axpy(&mut self, k: f64, other: &Arr) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
    }

    /// In-place elementwise scale.
    pub fn scale(&mut self, k: f64) {
        for a in &mut self.data {
            *a *= k;
        }
    }

    /// Squared Frobenius norm.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self (m,k) . rhs (k,n) -> (m,n)`.
    pub fn matmul(&self, rhs: &Arr) -> Arr {
        let (m, k) = self.dims();
        let (k2, n) = rhs.dims();
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &a) in arow.iter().enumerate() {
                let brow = &rhs.data[kk * n..(kk + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Arr { shape: Shape::Matrix(m, n), data: out }
    }

    /// `self (m,k) . rhs^T` where `rhs` is `(n,k)`, giving `(m,n)`.
    ///
    /// Row-by-row dot products, so both operands stream in row-major order.
    pub fn matmul_nt(&self, rhs: &Arr) -> Arr {
        let (m, k) = self.dims();
        let (n, k2) = rhs.dims();
        assert_eq!(k, k2, "matmul_nt inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &rhs.data[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(a, b)| a * b).sum();
            }
        }
        Arr { shape: Shape::Matrix(m, n), data: out }
    }

    /// `self^T . rhs` where `self` is `(r,m)` and `rhs` is `(r,n)`, giving `(m,n)`.
    pub fn matmul_tn(&self, rhs: &Arr) -> Arr {
        let (r, m) = self.dims();
        let (r2, n) = rhs.dims();
        assert_eq!(r, r2, "matmul_tn outer dimension mismatch");
        let mut out = vec![0.0; m * n];
        for i in 0..r {
            let arow = &self.data[i * m..(i + 1) * m];
            let brow = &rhs.data[i * n..(i + 1) * n];
            for (kk, &a) in arow.iter().enumerate() {
                let orow = &mut out[kk * n..(kk + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Arr { shape: Shape::Matrix(m, n), data: out }
    }
}

/// Euclidean distance between two equal-length slices.
pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_known() {
        // [[1,2],[3,4]] . [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = Arr::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Arr::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]);
        assert_eq!(a.matmul(&b).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_rectangular() {
        let a = Arr::matrix(1, 3, vec![1.0, 2.0, 3.0]);
        let b = Arr::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(a.matmul(&b).data(), &[4.0, 5.0]);
    }

    #[test]
    fn transposed_variants_agree_with_plain() {
        // A.matmul_nt(B) == A . B^T and A.matmul_tn(B) == A^T . B, checked
        // against explicitly transposed copies.
        let a = Arr::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.7).sin()).collect());
        let b = Arr::matrix(2, 4, (0..8).map(|i| (i as f64 * 1.3).cos()).collect());
        let bt = transpose(&b);
        assert_eq!(a.matmul_nt(&b).data(), a.matmul(&bt).data());

        let c = Arr::matrix(3, 2, (0..6).map(|i| i as f64 - 2.5).collect());
        let at = transpose(&a);
        assert_eq!(a.matmul_tn(&c).data(), at.matmul(&c).data());
    }

    #[test]
    fn axpy_and_scale() {
        let mut a = Arr::vector(vec![1.0, 2.0]);
        a.axpy(0.5, &Arr::vector(vec![4.0, -2.0]));
        assert_eq!(a.data(), &[3.0, 1.0]);
        a.scale(2.0);
        assert_eq!(a.data(), &[6.0, 2.0]);
    }

    #[test]
    fn dist_matches_hand_value() {
        // 3-4-5 triangle
        assert_eq!(dist(&[0.0, 0.0], &[3.0, 4.0]), 5.0);
    }

    fn transpose(m: &Arr) -> Arr {
        let (r, c) = m.dims();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = m.data()[i * c + j];
            }
        }
        Arr::matrix(c, r, out)
    }
}
