//! Dense row-major f64 tensors and the reference kernels everything else
//! computes through.
//!
//! Kernels are deterministic: every output element is a sequential reduction
//! over an ascending inner index, so the rayon-parallel paths are bitwise
//! identical to the serial reference.

use std::fmt;

use rayon::prelude::*;

/// Errors from tensor and RNG kernels.
#[derive(Clone, Debug, PartialEq)]
pub enum KernelError {
    /// Shapes incompatible for the requested operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Data length does not match the product of the shape.
    DataLength { expected: usize, got: usize },
    /// A dimension that must be positive was zero.
    EmptyShape { op: &'static str },
    /// Softmax row with no unmasked entry.
    DegenerateRow { row: usize },
    /// Parameter outside its domain (negative std, p outside [0,1], ...).
    Domain { what: &'static str, value: f64 },
    /// Backward was requested from a non-scalar node.
    NonScalarLoss { shape: Vec<usize> },
    /// A non-finite value surfaced where the contract requires finite ones.
    NonFinite { context: String },
}

impl fmt::Display for KernelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch lhs={lhs:?} rhs={rhs:?}")
            }
            Self::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            Self::EmptyShape { op } => write!(f, "{op}: empty shape"),
            Self::DegenerateRow { row } => write!(f, "softmax: row {row} is fully masked"),
            Self::Domain { what, value } => write!(f, "{what} out of domain: {value}"),
            Self::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss node, got shape {shape:?}")
            }
            Self::NonFinite { context } => write!(f, "non-finite value in {context}"),
        }
    }
}

impl std::error::Error for KernelError {}

/// Dense tensor: row-major `data` with explicit `shape`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Inner size above which matmul fans rows out to the rayon pool.
const PAR_MM_THRESHOLD: usize = 1 << 15;

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, KernelError> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(KernelError::EmptyShape { op: "new" });
        }
        if expected != data.len() {
            return Err(KernelError::DataLength { expected, got: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Number of rows when viewed as 2-D (trailing dims folded into columns).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of columns when viewed as 2-D.
    pub fn cols(&self) -> usize {
        if self.shape.len() <= 1 {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<(), KernelError> {
        if self.shape != other.shape {
            return Err(KernelError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, KernelError> {
        self.check_same_shape(other, "add")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, KernelError> {
        self.check_same_shape(other, "sub")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor, KernelError> {
        self.check_same_shape(other, "hadamard")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        })
    }

    /// In-place `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Tensor) -> Result<(), KernelError> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor { shape: vec![n, m], data: out }
    }

    /// Matrix product. Each output element accumulates over the inner index in
    /// ascending order, exactly like the naive triple loop.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, KernelError> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(KernelError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        let a = &self.data;
        let b = &other.data;
        let row_job = |i: usize, out_row: &mut [f64]| {
            for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
                let b_row = &b[kk * n..(kk + 1) * n];
                for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                    *o += aik * bkj;
                }
            }
        };
        if m * k * n >= PAR_MM_THRESHOLD && m > 1 {
            out.par_chunks_mut(n).enumerate().for_each(|(i, row)| row_job(i, row));
        } else {
            for (i, row) in out.chunks_mut(n).enumerate() {
                row_job(i, row);
            }
        }
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    /// `self * other^T` via an explicit transpose so the accumulation order
    /// matches `matmul` bit for bit.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor, KernelError> {
        self.matmul(&other.transpose())
    }

    /// `self^T * other`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor, KernelError> {
        self.transpose().matmul(other)
    }
}

/// Row-wise softmax with per-row max subtraction.
///
/// `mask`, when present, flags entries that participate (`true` = keep);
/// masked entries come out exactly 0. A fully masked row is an error.
pub fn softmax_rows(x: &Tensor, mask: Option<&[bool]>) -> Result<Tensor, KernelError> {
    let (m, n) = (x.rows(), x.cols());
    if let Some(mk) = mask {
        if mk.len() != m * n {
            return Err(KernelError::DataLength { expected: m * n, got: mk.len() });
        }
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = x.row(i);
        let keep = |j: usize| mask.map_or(true, |mk| mk[i * n + j]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if keep(j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(KernelError::DegenerateRow { row: i });
        }
        let mut denom = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if keep(j) {
                let e = (v - max).exp();
                out[i * n + j] = e;
                denom += e;
            }
        }
        for j in 0..n {
            if keep(j) {
                out[i * n + j] /= denom;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    /// Naive triple-loop oracle, the semantic ground truth for matmul.
    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a.at(i, kk) * b.at(kk, j);
                }
                out.data_mut()[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let b = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let i3 = Tensor::identity(3);
        assert_eq!(i3.matmul(&b).unwrap(), b);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_naive_oracle_exactly() {
        let mut rng = Rng::new(7);
        let a = rng.gaussian(vec![8, 8], 0.0, 1.0).unwrap();
        let b = rng.gaussian(vec![8, 8], 0.0, 1.0).unwrap();
        let fast = a.matmul(&b).unwrap();
        let slow = matmul_oracle(&a, &b);
        assert_eq!(fast, slow, "optimized kernel must agree bitwise with the reference");
    }

    #[test]
    fn matmul_parallel_path_matches_oracle_exactly() {
        let mut rng = Rng::new(8);
        // Big enough to take the rayon path.
        let a = rng.gaussian(vec![64, 48], 0.0, 1.0).unwrap();
        let b = rng.gaussian(vec![48, 32], 0.0, 1.0).unwrap();
        assert_eq!(a.matmul(&b).unwrap(), matmul_oracle(&a, &b));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matches!(a.matmul(&b), Err(KernelError::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_nt_tn_match_explicit_transpose() {
        let mut rng = Rng::new(9);
        let a = rng.gaussian(vec![5, 7], 0.0, 1.0).unwrap();
        let b = rng.gaussian(vec![6, 7], 0.0, 1.0).unwrap();
        assert_eq!(
            a.matmul_nt(&b).unwrap(),
            matmul_oracle(&a, &b.transpose())
        );
        let c = rng.gaussian(vec![5, 6], 0.0, 1.0).unwrap();
        assert_eq!(
            a.matmul_tn(&c).unwrap(),
            matmul_oracle(&a.transpose(), &c)
        );
    }

    #[test]
    fn softmax_uniform_row() {
        let x = Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        let s = softmax_rows(&x, None).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_logit_no_overflow() {
        let x = Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap();
        let s = softmax_rows(&x, None).unwrap();
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_matches_high_precision_oracle() {
        // softmax([1,2,3]) evaluated with mpmath at 50 digits.
        let expected = [
            0.090030573170380457998022101484491797867930864911467,
            0.24472847105479765247295961834076279719930007483797,
            0.66524095577482188952901828017474540493276906025056,
        ];
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = softmax_rows(&x, None).unwrap();
        for (got, want) in s.data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "got {got} want {want}");
        }
    }

    #[test]
    fn softmax_masked_entries_exactly_zero() {
        let x = Tensor::new(vec![2, 3], vec![5.0, 1.0, 2.0, 0.0, 0.0, 0.0]).unwrap();
        let mask = [true, false, true, true, true, false];
        let s = softmax_rows(&x, Some(&mask)).unwrap();
        assert_eq!(s.at(0, 1), 0.0);
        assert_eq!(s.at(1, 2), 0.0);
        let r0: f64 = s.row(0).iter().sum();
        let r1: f64 = s.row(1).iter().sum();
        assert!((r0 - 1.0).abs() < 1e-12 && (r1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let mask = [false, false];
        assert!(matches!(
            softmax_rows(&x, Some(&mask)),
            Err(KernelError::DegenerateRow { row: 0 })
        ));
    }

    proptest! {
        // Rows sum to 1 and the output is invariant under per-row shifts.
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            rows in proptest::collection::vec(
                proptest::collection::vec(-30.0f64..30.0, 4), 1..6),
            shift in -100.0f64..100.0,
        ) {
            let m = rows.len();
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let x = Tensor::new(vec![m, 4], flat.clone()).unwrap();
            let shifted = Tensor::new(vec![m, 4], flat.iter().map(|v| v + shift).collect()).unwrap();
            let s = softmax_rows(&x, None).unwrap();
            let s2 = softmax_rows(&shifted, None).unwrap();
            for i in 0..m {
                let sum: f64 = s.row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
            for (a, b) in s.data().iter().zip(s2.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn matmul_matches_oracle_on_random_shapes(
            m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in 0u64..1000
        ) {
            let mut rng = Rng::new(seed);
            let a = rng.gaussian(vec![m, k], 0.0, 1.0).unwrap();
            let b = rng.gaussian(vec![k, n], 0.0, 1.0).unwrap();
            prop_assert_eq!(a.matmul(&b).unwrap(), matmul_oracle(&a, &b));
        }
    }
}
