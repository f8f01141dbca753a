//! Dense row-major f64 tensors and the arithmetic kernels shared by the
//! plain forward code and the gradient tape.
//!
//! Tensors are immutable values once created. Every kernel computes in a
//! fixed element order, so repeated calls on equal inputs are bit-identical;
//! parallel matrix products assign whole output rows to threads and never
//! split a reduction.

use crate::{Error, Result};
use rayon::prelude::*;

/// Minimum number of multiply-adds before a matrix product is worth
/// splitting across threads.
const PAR_FLOP_THRESHOLD: usize = 1 << 16;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// Identity matrix, n x n.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(|i| f(i)).collect() }
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::ShapeMismatch(format!("expected scalar, got shape {:?}", self.shape)))
        }
    }

    /// Rows/cols of a rank-2 tensor; rank-1 tensors count as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(Error::ShapeMismatch(format!("expected rank <= 2, got {:?}", self.shape))),
        }
    }

    pub fn row(&self, r: usize) -> Result<&[f64]> {
        let (rows, cols) = self.dims2()?;
        if r >= rows {
            return Err(Error::ShapeMismatch(format!("row {r} out of {rows}")));
        }
        Ok(&self.data[r * cols..(r + 1) * cols])
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        let cols = *self.shape.last().unwrap_or(&1);
        self.data[r * cols + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let cols = *self.shape.last().unwrap_or(&1);
        self.data[r * cols + c] = v;
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn assert_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("{what} contains NaN/Inf")))
        }
    }
}

fn check_same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch(format!(
            "{op}: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

/// C = A (m x k) * B (k x n).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if ka != kb {
        return Err(Error::ShapeMismatch(format!(
            "matmul: inner dims {ka} vs {kb} (shapes {:?}, {:?})",
            a.shape, b.shape
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let work = m * ka * n;
    if work >= PAR_FLOP_THRESHOLD && m > 1 {
        out.data
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, crow)| matmul_row(crow, &a.data[i * ka..(i + 1) * ka], &b.data, n));
    } else {
        for i in 0..m {
            matmul_row(
                &mut out.data[i * n..(i + 1) * n],
                &a.data[i * ka..(i + 1) * ka],
                &b.data,
                n,
            );
        }
    }
    Ok(out)
}

#[inline]
fn matmul_row(crow: &mut [f64], arow: &[f64], b: &[f64], n: usize) {
    for (k, &aik) in arow.iter().enumerate() {
        if aik == 0.0 {
            continue;
        }
        let brow = &b[k * n..(k + 1) * n];
        for (c, &bv) in crow.iter_mut().zip(brow) {
            *c += aik * bv;
        }
    }
}

/// C = A (m x k) * B^T where B is (n x k). Used by the backward sweep.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = a.dims2()?;
    let (n, kb) = b.dims2()?;
    if ka != kb {
        return Err(Error::ShapeMismatch(format!(
            "matmul_nt: inner dims {ka} vs {kb}"
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let work = m * ka * n;
    let body = |i: usize, crow: &mut [f64]| {
        let arow = &a.data[i * ka..(i + 1) * ka];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b.data[j * kb..(j + 1) * kb];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv = acc;
        }
    };
    if work >= PAR_FLOP_THRESHOLD && m > 1 {
        out.data
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, crow)| body(i, crow));
    } else {
        for i in 0..m {
            body(i, &mut out.data[i * n..(i + 1) * n]);
        }
    }
    Ok(out)
}

/// C = A^T * B where A is (m x k), B is (m x n); result is (k x n).
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ma, k) = a.dims2()?;
    let (mb, n) = b.dims2()?;
    if ma != mb {
        return Err(Error::ShapeMismatch(format!(
            "matmul_tn: outer dims {ma} vs {mb}"
        )));
    }
    let mut out = Tensor::zeros(&[k, n]);
    let work = ma * k * n;
    if work >= PAR_FLOP_THRESHOLD && k > 1 {
        out.data.par_chunks_mut(n).enumerate().for_each(|(kk, crow)| {
            for i in 0..ma {
                let av = a.data[i * k + kk];
                if av == 0.0 {
                    continue;
                }
                let brow = &b.data[i * n..(i + 1) * n];
                for (c, &bv) in crow.iter_mut().zip(brow) {
                    *c += av * bv;
                }
            }
        });
    } else {
        for i in 0..ma {
            let arow = &a.data[i * k..(i + 1) * k];
            let brow = &b.data[i * n..(i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let crow = &mut out.data[kk * n..(kk + 1) * n];
                for (c, &bv) in crow.iter_mut().zip(brow) {
                    *c += av * bv;
                }
            }
        }
    }
    Ok(out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("add", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(Tensor { shape: a.shape.clone(), data })
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("sub", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    Ok(Tensor { shape: a.shape.clone(), data })
}

/// Elementwise (Hadamard) product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("mul", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Ok(Tensor { shape: a.shape.clone(), data })
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    Tensor { shape: a.shape.clone(), data: a.data.iter().map(|x| x * c).collect() }
}

pub fn add_scalar(a: &Tensor, c: f64) -> Tensor {
    Tensor { shape: a.shape.clone(), data: a.data.iter().map(|x| x + c).collect() }
}

/// In-place a += c * b, the SGD/accumulation primitive.
pub fn axpy(a: &mut Tensor, c: f64, b: &Tensor) -> Result<()> {
    check_same_shape("axpy", a, b)?;
    for (x, y) in a.data.iter_mut().zip(&b.data) {
        *x += c * y;
    }
    Ok(())
}

/// Adds a length-n row vector to every row of an (m x n) matrix.
///
/// Broadcasting is never implicit: this is the one dedicated broadcast op
/// (bias addition) and it checks the row length exactly.
pub fn add_row_broadcast(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let (rm, rn) = row.dims2()?;
    if rm != 1 || rn != n {
        return Err(Error::ShapeMismatch(format!(
            "add_row_broadcast: row {:?} vs matrix {:?}",
            row.shape, a.shape
        )));
    }
    let mut out = a.clone();
    for i in 0..m {
        for j in 0..n {
            out.data[i * n + j] += row.data[j];
        }
    }
    Ok(out)
}

/// Column sums of an (m x n) matrix -> 1 x n. Backward of `add_row_broadcast`.
pub fn sum_rows_to_row(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let mut out = Tensor::zeros(&[1, n]);
    for i in 0..m {
        for j in 0..n {
            out.data[j] += a.data[i * n + j];
        }
    }
    Ok(out)
}

/// Balanced pairwise summation: splits at floor(n/2) recursively. Summing K
/// identical values for K a power of two is exact, which the Jensen-gap and
/// Monte Carlo averaging contracts rely on.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        2 => v[0] + v[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
        }
    }
}

/// Numerically symmetric sigmoid; never overflows exp for |s| > 700.
#[inline]
pub fn sigmoid_scalar(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^s) without overflow.
#[inline]
pub fn softplus_scalar(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    Tensor { shape: a.shape.clone(), data: a.data.iter().map(|&x| sigmoid_scalar(x)).collect() }
}

pub fn tanh(a: &Tensor) -> Tensor {
    Tensor { shape: a.shape.clone(), data: a.data.iter().map(|x| x.tanh()).collect() }
}

pub fn exp(a: &Tensor) -> Tensor {
    Tensor { shape: a.shape.clone(), data: a.data.iter().map(|x| x.exp()).collect() }
}

pub fn softplus(a: &Tensor) -> Tensor {
    Tensor { shape: a.shape.clone(), data: a.data.iter().map(|&x| softplus_scalar(x)).collect() }
}

pub fn ln(a: &Tensor) -> Result<Tensor> {
    if a.data.iter().any(|&x| x <= 0.0) {
        return Err(Error::Domain("ln of nonpositive value".into()));
    }
    Ok(Tensor { shape: a.shape.clone(), data: a.data.iter().map(|x| x.ln()).collect() })
}

/// log sum exp over all elements with max-subtraction stabilization.
/// Exact under shifts: logsumexp(s + c) = logsumexp(s) + c.
pub fn logsumexp(a: &Tensor) -> Result<f64> {
    if a.data.is_empty() {
        return Err(Error::InvalidParameter("logsumexp of empty tensor".into()));
    }
    if !a.all_finite() {
        return Err(Error::NonFinite("logsumexp input".into()));
    }
    Ok(logsumexp_slice(&a.data))
}

#[inline]
pub fn logsumexp_slice(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = v.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Per-row logsumexp of an (m x n) matrix -> (m x 1).
pub fn logsumexp_rows(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    if n == 0 {
        return Err(Error::InvalidParameter("logsumexp over zero columns".into()));
    }
    let mut out = Tensor::zeros(&[m, 1]);
    for i in 0..m {
        out.data[i] = logsumexp_slice(&a.data[i * n..(i + 1) * n]);
    }
    Ok(out)
}

/// Per-row softmax of an (m x n) matrix.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let mut out = a.clone();
    for i in 0..m {
        let row = &mut out.data[i * n..(i + 1) * n];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Ok(out)
}

/// Picks rows of `a` by index: out[i] = a[ids[i]]. Embedding lookup.
pub fn gather_rows(a: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let mut out = Tensor::zeros(&[ids.len(), n]);
    for (i, &id) in ids.iter().enumerate() {
        if id >= m {
            return Err(Error::ShapeMismatch(format!("gather_rows: id {id} out of {m}")));
        }
        out.data[i * n..(i + 1) * n].copy_from_slice(&a.data[id * n..(id + 1) * n]);
    }
    Ok(out)
}

/// out[i] = a[i, cols[i]] as an (m x 1) column. Target-logit pick.
pub fn gather_cols(a: &Tensor, cols: &[usize]) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    if cols.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "gather_cols: {} indices for {m} rows",
            cols.len()
        )));
    }
    let mut out = Tensor::zeros(&[m, 1]);
    for (i, &c) in cols.iter().enumerate() {
        if c >= n {
            return Err(Error::ShapeMismatch(format!("gather_cols: col {c} out of {n}")));
        }
        out.data[i] = a.data[i * n + c];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Naive triple-loop product; the independent oracle for the fast kernels.
    fn matmul_naive(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a.get2(i, kk) * b.get2(kk, j);
                }
                out.set2(i, j, acc);
            }
        }
        out
    }

    fn lcg_values(n: usize, seed: &mut u64) -> Vec<f64> {
        (0..n)
            .map(|_| {
                *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((*seed >> 11) as f64) / ((1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::eye(2);
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = matmul(&i2, &a).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_projector() {
        let p = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let v = Tensor::new(&[2, 1], vec![5.0, 7.0]).unwrap();
        let c = matmul(&p, &v).unwrap();
        assert_eq!(c.data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut seed = 7u64;
        let a = Tensor::new(&[3, 4], lcg_values(12, &mut seed)).unwrap();
        let b = Tensor::new(&[4, 2], lcg_values(8, &mut seed)).unwrap();
        let fast = matmul(&a, &b).unwrap();
        let slow = matmul_naive(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_shape_mismatch_is_error() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn transposed_kernels_match_explicit_transpose() {
        let mut seed = 99u64;
        let a = Tensor::new(&[5, 3], lcg_values(15, &mut seed)).unwrap();
        let b = Tensor::new(&[4, 3], lcg_values(12, &mut seed)).unwrap();
        let via_kernel = matmul_nt(&a, &b).unwrap();
        let via_transpose = matmul(&a, &b.transpose().unwrap()).unwrap();
        for (x, y) in via_kernel.data().iter().zip(via_transpose.data()) {
            assert!((x - y).abs() <= 1e-12);
        }

        let c = Tensor::new(&[5, 4], lcg_values(20, &mut seed)).unwrap();
        let tn_kernel = matmul_tn(&a, &c).unwrap();
        let tn_explicit = matmul(&a.transpose().unwrap(), &c).unwrap();
        for (x, y) in tn_kernel.data().iter().zip(tn_explicit.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn parallel_matmul_is_bit_identical_to_serial() {
        // Same inputs large enough to trip the parallel path vs a serial
        // naive sweep: row ownership keeps summation order fixed.
        let mut seed = 3u64;
        let a = Tensor::new(&[64, 64], lcg_values(64 * 64, &mut seed)).unwrap();
        let b = Tensor::new(&[64, 64], lcg_values(64 * 64, &mut seed)).unwrap();
        let fast = matmul(&a, &b).unwrap();
        // Serial reference with the same per-row k-order as matmul_row.
        let mut reference = Tensor::zeros(&[64, 64]);
        for i in 0..64 {
            matmul_row(&mut reference.data_mut()[i * 64..(i + 1) * 64], a.row(i).unwrap(), b.data(), 64);
        }
        assert_eq!(fast.data(), reference.data());
    }

    #[test]
    fn sigmoid_symmetry_and_reference_value() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert_eq!(0.0f64.tanh(), 0.0);
        // 1/(1+e^-3) evaluated in extended precision.
        let expected = 0.952574126822433_f64;
        assert!((sigmoid_scalar(3.0) - expected).abs() <= 1e-12);
        // No overflow far outside the exp range.
        assert_eq!(sigmoid_scalar(800.0), 1.0);
        assert_eq!(sigmoid_scalar(-800.0), 0.0);
    }

    #[test]
    fn logsumexp_basics() {
        let t = Tensor::new(&[2], vec![0.0, 0.0]).unwrap();
        assert!((logsumexp(&t).unwrap() - 2.0f64.ln()).abs() <= 1e-15);
        let big = Tensor::new(&[2], vec![1000.0, 1000.0]).unwrap();
        assert!((logsumexp(&big).unwrap() - (1000.0 + 2.0f64.ln())).abs() <= 1e-12);
        assert!(logsumexp(&Tensor::new(&[0], vec![]).unwrap()).is_err());
    }

    #[test]
    fn logsumexp_matches_high_precision_sum() {
        // Extended-precision oracle: direct sum of exp in u128-scaled fixed
        // point is overkill here; instead sum exp(x) exactly via two-pass
        // Kahan at f64 on values where exp() is exactly representable enough.
        let v = vec![0.11, -0.52, 0.97, 0.03, -1.4];
        let t = Tensor::new(&[5], v.clone()).unwrap();
        // Kahan-compensated direct sum.
        let (mut s, mut c) = (0.0f64, 0.0f64);
        for x in &v {
            let y = x.exp() - c;
            let tt = s + y;
            c = (tt - s) - y;
            s = tt;
        }
        assert!((logsumexp(&t).unwrap() - s.ln()).abs() <= 1e-12);
    }

    proptest! {
        #[test]
        fn logsumexp_shift_invariance(xs in proptest::collection::vec(-50.0f64..50.0, 1..8),
                                      shift in -1e6f64..1e6) {
            let t = Tensor::new(&[xs.len()], xs.clone()).unwrap();
            let shifted = Tensor::new(&[xs.len()], xs.iter().map(|x| x + shift).collect()).unwrap();
            let lhs = logsumexp(&shifted).unwrap();
            let rhs = logsumexp(&t).unwrap() + shift;
            let tol = 1e-12 * rhs.abs().max(1.0);
            prop_assert!((lhs - rhs).abs() <= tol);
        }

        #[test]
        fn add_sub_roundtrip(xs in proptest::collection::vec(-1e3f64..1e3, 1..32)) {
            let a = Tensor::new(&[xs.len()], xs.clone()).unwrap();
            let b = Tensor::new(&[xs.len()], xs.iter().map(|x| x * 0.5 - 1.0).collect()).unwrap();
            let back = sub(&add(&a, &b).unwrap(), &b).unwrap();
            for (x, y) in back.data().iter().zip(a.data()) {
                prop_assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn row_broadcast_and_column_sum() {
        let a = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let r = Tensor::new(&[1, 3], vec![10.0, 20.0, 30.0]).unwrap();
        let out = add_row_broadcast(&a, &r).unwrap();
        assert_eq!(out.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let cs = sum_rows_to_row(&a).unwrap();
        assert_eq!(cs.data(), &[5.0, 7.0, 9.0]);
    }

    #[test]
    fn gather_ops() {
        let emb = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let g = gather_rows(&emb, &[2, 0]).unwrap();
        assert_eq!(g.data(), &[5.0, 6.0, 1.0, 2.0]);
        let picks = gather_cols(&emb, &[1, 0, 1]).unwrap();
        assert_eq!(picks.data(), &[2.0, 3.0, 6.0]);
        assert!(gather_rows(&emb, &[3]).is_err());
    }

    #[test]
    fn ln_domain_error() {
        let t = Tensor::new(&[2], vec![1.0, 0.0]).unwrap();
        assert!(ln(&t).is_err());
    }
}
