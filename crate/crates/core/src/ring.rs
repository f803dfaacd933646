//! Fixed-point arithmetic over the ring `Z_{2^64}`.
//!
//! Reals are carried as two's-complement integers scaled by `2^frac_bits`.
//! Addition is exact modulo `2^64`; a product carries `2 * frac_bits`
//! fractional bits and is brought back to scale by an arithmetic right shift.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const DEFAULT_FRAC_BITS: u32 = 16;
pub const DEFAULT_MAG_BOUND: f64 = (1u64 << 20) as f64;

/// Encoding parameters shared by every party of a session.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FxConfig {
    frac_bits: u32,
    mag_bound: f64,
}

impl Default for FxConfig {
    fn default() -> Self {
        FxConfig {
            frac_bits: DEFAULT_FRAC_BITS,
            mag_bound: DEFAULT_MAG_BOUND,
        }
    }
}

impl FxConfig {
    pub fn new(frac_bits: u32, mag_bound: f64) -> Result<Self> {
        if !(1..=30).contains(&frac_bits) {
            return Err(Error::FxConfig(format!(
                "frac_bits must be in 1..=30, got {frac_bits}"
            )));
        }
        if !(mag_bound.is_finite() && mag_bound > 0.0) {
            return Err(Error::FxConfig(format!(
                "mag_bound must be positive and finite, got {mag_bound}"
            )));
        }
        // headroom for probabilistic truncation: mag_bound * 2^f < 2^62
        if mag_bound * (1u64 << frac_bits) as f64 >= 2f64.powi(62) {
            return Err(Error::FxConfig(format!(
                "mag_bound {mag_bound} * 2^{frac_bits} must stay below 2^62"
            )));
        }
        Ok(FxConfig {
            frac_bits,
            mag_bound,
        })
    }

    pub fn with_frac_bits(frac_bits: u32) -> Result<Self> {
        Self::new(frac_bits, DEFAULT_MAG_BOUND)
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn mag_bound(&self) -> f64 {
        self.mag_bound
    }

    fn scale(&self) -> f64 {
        (1u64 << self.frac_bits) as f64
    }

    /// One unit in the last place, `2^-frac_bits`.
    pub fn ulp(&self) -> f64 {
        1.0 / self.scale()
    }

    /// `round(x * 2^f)` with ties away from zero, reduced modulo `2^64`.
    pub fn encode(&self, x: f64) -> Result<RingElem> {
        if !x.is_finite() || x.abs() > self.mag_bound {
            return Err(Error::Range {
                value: x,
                bound: self.mag_bound,
            });
        }
        Ok(RingElem((x * self.scale()).round() as i64 as u64))
    }

    pub fn decode(&self, e: RingElem) -> f64 {
        e.signed() as f64 / self.scale()
    }

    /// Arithmetic right shift by `frac_bits` of the signed interpretation.
    pub fn truncate(&self, e: RingElem) -> RingElem {
        RingElem((e.signed() >> self.frac_bits) as u64)
    }
}

/// An element of `Z_{2^64}`; all arithmetic wraps.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
#[repr(transparent)]
pub struct RingElem(pub u64);

impl RingElem {
    pub const ZERO: RingElem = RingElem(0);

    pub fn signed(self) -> i64 {
        self.0 as i64
    }
}

impl fmt::Debug for RingElem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R({})", self.signed())
    }
}

impl Add for RingElem {
    type Output = RingElem;
    fn add(self, rhs: RingElem) -> RingElem {
        RingElem(self.0.wrapping_add(rhs.0))
    }
}

impl AddAssign for RingElem {
    fn add_assign(&mut self, rhs: RingElem) {
        self.0 = self.0.wrapping_add(rhs.0);
    }
}

impl Sub for RingElem {
    type Output = RingElem;
    fn sub(self, rhs: RingElem) -> RingElem {
        RingElem(self.0.wrapping_sub(rhs.0))
    }
}

impl SubAssign for RingElem {
    fn sub_assign(&mut self, rhs: RingElem) {
        self.0 = self.0.wrapping_sub(rhs.0);
    }
}

impl Mul for RingElem {
    type Output = RingElem;
    fn mul(self, rhs: RingElem) -> RingElem {
        RingElem(self.0.wrapping_mul(rhs.0))
    }
}

impl Neg for RingElem {
    type Output = RingElem;
    fn neg(self) -> RingElem {
        RingElem(self.0.wrapping_neg())
    }
}

/// Row-major matrix of ring elements.
#[derive(Clone, PartialEq, Eq)]
pub struct FxMatrix {
    rows: usize,
    cols: usize,
    data: Vec<RingElem>,
}

impl fmt::Debug for FxMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FxMatrix({}x{})", self.rows, self.cols)
    }
}

impl FxMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        FxMatrix {
            rows,
            cols,
            data: vec![RingElem::ZERO; rows * cols],
        }
    }

    pub fn from_raw(rows: usize, cols: usize, data: Vec<RingElem>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "FxMatrix::from_raw",
                format!("{} elements for {rows}x{cols}", data.len()),
            ));
        }
        Ok(FxMatrix { rows, cols, data })
    }

    pub fn from_u64(rows: usize, cols: usize, data: Vec<u64>) -> Result<Self> {
        Self::from_raw(rows, cols, data.into_iter().map(RingElem).collect())
    }

    /// Encodes a row-major slice of reals.
    pub fn encode(rows: usize, cols: usize, values: &[f64], cfg: &FxConfig) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::shape(
                "FxMatrix::encode",
                format!("{} values for {rows}x{cols}", values.len()),
            ));
        }
        let data = values
            .iter()
            .map(|&v| cfg.encode(v))
            .collect::<Result<Vec<_>>>()?;
        Ok(FxMatrix { rows, cols, data })
    }

    pub fn encode_tensor(t: &Tensor, cfg: &FxConfig) -> Result<Self> {
        Self::encode(t.rows(), t.cols(), t.data(), cfg)
    }

    pub fn decode(&self, cfg: &FxConfig) -> Vec<f64> {
        self.data.iter().map(|&e| cfg.decode(e)).collect()
    }

    pub fn decode_tensor(&self, cfg: &FxConfig) -> Result<Tensor> {
        Tensor::from_vec(self.rows, self.cols, self.decode(cfg))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[RingElem] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [RingElem] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<RingElem> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> RingElem {
        self.data[r * self.cols + c]
    }

    fn zip_with(
        &self,
        other: &FxMatrix,
        op: &'static str,
        f: impl Fn(RingElem, RingElem) -> RingElem,
    ) -> Result<FxMatrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(FxMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, other: &FxMatrix) -> Result<FxMatrix> {
        self.zip_with(other, "FxMatrix::add", |a, b| a + b)
    }

    pub fn sub(&self, other: &FxMatrix) -> Result<FxMatrix> {
        self.zip_with(other, "FxMatrix::sub", |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &FxMatrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "FxMatrix::add_assign",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn neg(&self) -> FxMatrix {
        FxMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&e| -e).collect(),
        }
    }

    /// Ring product without rescaling; the result carries `2 * frac_bits`.
    pub fn matmul_raw(&self, other: &FxMatrix) -> Result<FxMatrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "FxMatrix::matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0u64; n * m];
        ring_gemm(as_u64(&self.data), as_u64(&other.data), &mut out, k, m);
        Ok(FxMatrix {
            rows: n,
            cols: m,
            data: out.into_iter().map(RingElem).collect(),
        })
    }

    /// Element-wise arithmetic shift by `frac_bits`.
    pub fn truncate(&self, cfg: &FxConfig) -> FxMatrix {
        FxMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&e| cfg.truncate(e)).collect(),
        }
    }

    pub fn transpose(&self) -> FxMatrix {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.data[r * self.cols + c]);
            }
        }
        FxMatrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// Column-wise concatenation `[self | other]`.
    pub fn hconcat(&self, other: &FxMatrix) -> Result<FxMatrix> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "FxMatrix::hconcat",
                format!("{} rows vs {} rows", self.rows, other.rows),
            ));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(&self.data[r * self.cols..(r + 1) * self.cols]);
            data.extend_from_slice(&other.data[r * other.cols..(r + 1) * other.cols]);
        }
        Ok(FxMatrix {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Row-wise stacking `[self ; other]`.
    pub fn vconcat(&self, other: &FxMatrix) -> Result<FxMatrix> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "FxMatrix::vconcat",
                format!("{} cols vs {} cols", self.cols, other.cols),
            ));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(FxMatrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Sums every column into a `1 x cols` row.
    pub fn col_sums(&self) -> FxMatrix {
        let mut out = vec![RingElem::ZERO; self.cols];
        for r in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(&self.data[r * self.cols..(r + 1) * self.cols]) {
                *o += v;
            }
        }
        FxMatrix {
            rows: 1,
            cols: self.cols,
            data: out,
        }
    }

    /// Element-wise ring product without rescaling.
    pub fn hadamard_raw(&self, other: &FxMatrix) -> Result<FxMatrix> {
        self.zip_with(other, "FxMatrix::hadamard", |a, b| a * b)
    }

    /// Element-wise product followed by truncation; both operands at scale `f`.
    pub fn hadamard_trunc(&self, other: &FxMatrix, cfg: &FxConfig) -> Result<FxMatrix> {
        self.hadamard_raw(other).map(|m| m.truncate(cfg))
    }
}

fn as_u64(data: &[RingElem]) -> &[u64] {
    // SAFETY: RingElem is repr(transparent) over u64.
    unsafe { std::slice::from_raw_parts(data.as_ptr().cast::<u64>(), data.len()) }
}

/// Ring product of `a` and `b` followed by an arithmetic shift of every
/// signed entry by `frac_bits`. This is the plaintext reference for the
/// shared product.
pub fn fx_matmul_trunc(a: &FxMatrix, b: &FxMatrix, cfg: &FxConfig) -> Result<FxMatrix> {
    Ok(a.matmul_raw(b)?.truncate(cfg))
}

#[inline(always)]
fn gemm_body(lhs: &[u64], rhs: &[u64], out: &mut [u64], k: usize, m: usize) {
    for (row, a_row) in out.chunks_exact_mut(m).zip(lhs.chunks_exact(k)) {
        for (&a, b_row) in a_row.iter().zip(rhs.chunks_exact(m)) {
            if a == 0 {
                continue;
            }
            for (o, &b) in row.iter_mut().zip(b_row) {
                *o = o.wrapping_add(a.wrapping_mul(b));
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx512dq")]
unsafe fn gemm_avx512(lhs: &[u64], rhs: &[u64], out: &mut [u64], k: usize, m: usize) {
    gemm_body(lhs, rhs, out, k, m)
}

/// `out += lhs · rhs` over `Z_2^64`, using 64-bit vector multiplies when the CPU has them.
fn ring_gemm(lhs: &[u64], rhs: &[u64], out: &mut [u64], k: usize, m: usize) {
    if m == 0 || k == 0 {
        return;
    }
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx512dq") {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { gemm_avx512(lhs, rhs, out, k, m) };
        return;
    }
    gemm_body(lhs, rhs, out, k, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn cfg() -> FxConfig {
        FxConfig::default()
    }

    #[test]
    fn encode_examples() {
        let c = cfg();
        assert_eq!(c.encode(1.5).unwrap(), RingElem(98304));
        assert_eq!(c.encode(0.0).unwrap(), RingElem(0));
        assert_eq!(c.encode(-1.0).unwrap(), RingElem(0u64.wrapping_sub(65536)));
    }

    #[test]
    fn encode_rounds_half_away_from_zero() {
        let c = FxConfig::with_frac_bits(1).unwrap();
        assert_eq!(c.encode(0.25).unwrap().signed(), 1);
        assert_eq!(c.encode(-0.25).unwrap().signed(), -1);
    }

    #[test]
    fn encode_rejects_out_of_range() {
        let c = cfg();
        match c.encode(2e6) {
            Err(Error::Range { value, .. }) => assert_eq!(value, 2e6),
            other => panic!("expected range error, got {other:?}"),
        }
        assert!(c.encode(f64::NAN).is_err());
    }

    #[test]
    fn decode_examples() {
        let c = cfg();
        assert_eq!(c.decode(RingElem(98304)), 1.5);
        assert_eq!(c.decode(RingElem(0)), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(FxConfig::new(0, 1.0).is_err());
        assert!(FxConfig::new(31, 1.0).is_err());
        assert!(FxConfig::new(30, (1u64 << 32) as f64).is_err());
        assert!(FxConfig::new(30, (1u64 << 31) as f64).is_ok());
    }

    #[test]
    fn integer_product_is_exact() {
        let c = cfg();
        let a = FxMatrix::encode(1, 1, &[2.0], &c).unwrap();
        let b = FxMatrix::encode(1, 1, &[3.0], &c).unwrap();
        let p = fx_matmul_trunc(&a, &b, &c).unwrap();
        assert_eq!(p, FxMatrix::encode(1, 1, &[6.0], &c).unwrap());
    }

    #[test]
    fn identity_product() {
        let c = cfg();
        let a = FxMatrix::encode(2, 3, &[1.0, -2.5, 0.125, 3.0, 0.0, -7.75], &c).unwrap();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let id = FxMatrix::encode(3, 3, &eye, &c).unwrap();
        assert_eq!(fx_matmul_trunc(&a, &id, &c).unwrap(), a);
    }

    #[test]
    fn shape_mismatch() {
        let c = cfg();
        let a = FxMatrix::zeros(2, 3);
        let b = FxMatrix::zeros(2, 3);
        assert!(matches!(fx_matmul_trunc(&a, &b, &c), Err(Error::Shape { .. })));
    }

    fn real_matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for p in 0..k {
                    out[i * m + j] += a[i * k + p] * b[p * m + j];
                }
            }
        }
        out
    }

    // 3x4 . 4x2 with entries in [-4, 4], checked against direct real
    // multiplication over many seeds. The per-entry error is the sum of the
    // encoding errors (each term contributes at most (|a|+|b|)/2 ulp) plus one
    // ulp of truncation.
    #[test]
    fn random_product_matches_real_arithmetic() {
        let c = cfg();
        let ulp = c.ulp();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let fa = FxMatrix::encode(3, 4, &a, &c).unwrap();
            let fb = FxMatrix::encode(4, 2, &b, &c).unwrap();
            let got = fx_matmul_trunc(&fa, &fb, &c).unwrap().decode(&c);
            let want = real_matmul(&a, &b, 3, 4, 2);
            for (i, (g, w)) in got.iter().zip(&want).enumerate() {
                let (r, col) = (i / 2, i % 2);
                let bound: f64 = (0..4)
                    .map(|p| (a[r * 4 + p].abs() + b[p * 2 + col].abs()) * ulp / 2.0)
                    .sum::<f64>()
                    + 2.0 * ulp;
                assert!((g - w).abs() <= bound, "entry {i}: {g} vs {w}");
                worst = worst.max((g - w).abs() / ulp);
            }
        }
        assert!(worst < 17.0);
    }

    // Same shapes with entries drawn on the fixed-point grid, so encoding is
    // exact and only truncation separates the result from the real product.
    #[test]
    fn grid_product_within_four_ulp() {
        let c = cfg();
        let ulp = c.ulp();
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let grid = |rng: &mut ChaCha20Rng| (rng.gen_range(-4.0..4.0) / ulp).round() * ulp;
        for _ in 0..500 {
            let a: Vec<f64> = (0..12).map(|_| grid(&mut rng)).collect();
            let b: Vec<f64> = (0..8).map(|_| grid(&mut rng)).collect();
            let fa = FxMatrix::encode(3, 4, &a, &c).unwrap();
            let fb = FxMatrix::encode(4, 2, &b, &c).unwrap();
            let got = fx_matmul_trunc(&fa, &fb, &c).unwrap().decode(&c);
            for (g, w) in got.iter().zip(real_matmul(&a, &b, 3, 4, 2)) {
                assert!((g - w).abs() <= 4.0 * ulp, "{g} vs {w}");
            }
        }
    }

    proptest! {
        #[test]
        fn round_trip(x in -1048576.0f64..1048576.0) {
            let c = cfg();
            let back = c.decode(c.encode(x).unwrap());
            prop_assert!((back - x).abs() <= c.ulp());
        }

        #[test]
        fn addition_is_homomorphic(x in -1000.0f64..1000.0, y in -1000.0f64..1000.0) {
            let c = cfg();
            let (ex, ey) = (c.encode(x).unwrap(), c.encode(y).unwrap());
            prop_assert_eq!(c.decode(ex + ey), c.decode(ex) + c.decode(ey));
        }

        #[test]
        fn product_error_bound_unit_inputs(
            seed in any::<u64>(),
            n in 1usize..6, k in 1usize..10, m in 1usize..6,
        ) {
            let c = cfg();
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = fx_matmul_trunc(
                &FxMatrix::encode(n, k, &a, &c).unwrap(),
                &FxMatrix::encode(k, m, &b, &c).unwrap(),
                &c,
            ).unwrap().decode(&c);
            let want = real_matmul(&a, &b, n, k, m);
            let bound = (k as f64 + 1.0) * c.ulp();
            for (g, w) in got.iter().zip(&want) {
                prop_assert!((g - w).abs() <= bound);
            }
        }
    }
}

