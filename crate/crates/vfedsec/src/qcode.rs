//! Fixed-point quantization, stochastic rounding, and modular arithmetic
//! over the 32-bit residue ring used by the secure layer.
//!
//! Real values are clipped to `[-t, t]`, affinely mapped to `[0, r]`, and
//! stochastically rounded. Sums of quantized values stay decodable as long
//! as the true (pre-wraparound) sum fits below `2^32`, which the topology
//! validation guarantees; dequantizing an n-term sum subtracts `n * t`.

use crate::{Error, Result};
use rand::Rng;

/// Size of the masking/aggregation ring. All residue arithmetic wraps here.
pub const FIELD_MODULUS: u64 = 1 << 32;

/// Default quantization target range, `2^27`.
pub const DEFAULT_RANGE: u32 = 1 << 27;

/// Default clipping threshold for embeddings and updates.
pub const DEFAULT_CLIP: f64 = 4.0;

/// Quantization parameters: clip threshold `t` and target range size `r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QConfig {
    /// Clipping threshold; values are clipped to `[-t, t]`.
    pub t: f64,
    /// Target range size; quantized values land in `[0, r]` inclusive.
    pub r: u32,
}

impl Default for QConfig {
    fn default() -> Self {
        QConfig { t: DEFAULT_CLIP, r: DEFAULT_RANGE }
    }
}

impl QConfig {
    pub fn new(t: f64, r: u32) -> Result<Self> {
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::config("qcode.t", "clip threshold must be finite and > 0"));
        }
        if r == 0 || !r.is_power_of_two() {
            return Err(Error::config("qcode.r", "range must be a power of two"));
        }
        Ok(QConfig { t, r })
    }

    /// One quantization step, `2t / r`: the resolution of the code and the
    /// per-element round-trip error bound.
    pub fn step(&self) -> f64 {
        2.0 * self.t / self.r as f64
    }

    /// Checks the headroom invariant: the largest per-coordinate summand
    /// count the topology can produce must keep true sums below the ring
    /// size. Each summand is at most `r` (the range is inclusive).
    pub fn validate_summands(&self, max_summands: u32) -> Result<()> {
        if max_summands == 0 {
            return Err(Error::config("topology", "summand count must be positive"));
        }
        if (max_summands as u64) * (self.r as u64) >= FIELD_MODULUS {
            return Err(Error::config(
                "qcode.r",
                format!(
                    "{} summands of range {} overflow the 2^32 ring; reduce group sizes or r",
                    max_summands, self.r
                ),
            ));
        }
        Ok(())
    }
}

/// Row-major matrix of real values.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl RealMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        RealMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must equal rows*cols");
        RealMatrix { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        RealMatrix { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product `self * other`.
    pub fn matmul(&self, other: &RealMatrix) -> RealMatrix {
        assert_eq!(self.cols, other.rows, "inner dimensions must agree");
        let mut out = RealMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                let src = &other.data[k * other.cols..(k + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> RealMatrix {
        let mut out = RealMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    pub fn add(&self, other: &RealMatrix) -> RealMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        RealMatrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, s: f64) -> RealMatrix {
        RealMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> RealMatrix {
        RealMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies `src` into the column window starting at `col_off`.
    pub fn paste_cols(&mut self, col_off: usize, src: &RealMatrix) {
        assert_eq!(self.rows, src.rows);
        assert!(col_off + src.cols <= self.cols);
        for i in 0..self.rows {
            for j in 0..src.cols {
                self.set(i, col_off + j, src.get(i, j));
            }
        }
    }

    /// Extracts the column window `[col_off, col_off + width)`.
    pub fn slice_cols(&self, col_off: usize, width: usize) -> RealMatrix {
        assert!(col_off + width <= self.cols);
        RealMatrix::from_fn(self.rows, width, |i, j| self.get(i, col_off + j))
    }
}

/// Row-major matrix of 32-bit residues; all arithmetic wraps modulo `2^32`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u32>,
}

impl QMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        QMatrix { rows, cols, data: vec![0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<u32>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must equal rows*cols");
        QMatrix { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Element-wise wrapping sum.
    pub fn wrapping_add(&self, other: &QMatrix) -> Result<QMatrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.wrapping_add(*b))
            .collect();
        Ok(QMatrix { rows: self.rows, cols: self.cols, data })
    }

    /// Element-wise additive inverse modulo `2^32`.
    pub fn wrapping_neg(&self) -> QMatrix {
        QMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.wrapping_neg()).collect(),
        }
    }

    /// Wire encoding: `rows`, `cols`, then each residue, all little-endian
    /// 32-bit words.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.data.len() * 4);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for w in &self.data {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<QMatrix> {
        if bytes.len() < 8 {
            return Err(Error::Protocol("matrix header truncated".into()));
        }
        let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let want = 8 + rows * cols * 4;
        if bytes.len() != want {
            return Err(Error::Protocol(format!(
                "matrix body length {} does not match {}x{} header",
                bytes.len(),
                rows,
                cols
            )));
        }
        let data = bytes[8..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(QMatrix { rows, cols, data })
    }
}

/// Quantizes one real value: clip to `[-t, t]`, map affinely onto `[0, r]`,
/// and round stochastically so the result is unbiased.
pub fn quantize_scalar(x: f64, cfg: &QConfig, rng: &mut impl Rng) -> Result<u32> {
    if !x.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    let clipped = x.clamp(-cfg.t, cfg.t);
    let exact = (clipped + cfg.t) / (2.0 * cfg.t) * cfg.r as f64;
    let floor = exact.floor();
    let frac = exact - floor;
    let mut q = floor as u32;
    if frac > 0.0 {
        // Round up with probability `frac`: one 32-bit draw against a
        // threshold keeps the bias below 2^-33 per element.
        let threshold = (frac * 4_294_967_296.0) as u64;
        if (rng.next_u32() as u64) < threshold {
            q += 1;
        }
    }
    Ok(q)
}

/// Element-wise [`quantize_scalar`] preserving shape.
pub fn quantize_matrix(x: &RealMatrix, cfg: &QConfig, rng: &mut impl Rng) -> Result<QMatrix> {
    let mut data = Vec::with_capacity(x.data.len());
    for &v in &x.data {
        data.push(quantize_scalar(v, cfg, rng)?);
    }
    Ok(QMatrix { rows: x.rows, cols: x.cols, data })
}

/// Decodes a sum of `n_summands` quantized values: `(2t/r) * s - n * t`
/// element-wise. With `n_summands = 1` this is the plain dequantization;
/// each summand that encoded zero (`r/2`) contributes exactly nothing.
pub fn dequantize_sum(s: &QMatrix, n_summands: u32, cfg: &QConfig) -> Result<RealMatrix> {
    if n_summands == 0 {
        return Err(Error::Protocol("dequantize_sum requires a positive summand count".into()));
    }
    let scale = 2.0 * cfg.t / cfg.r as f64;
    let offset = n_summands as f64 * cfg.t;
    let data = s.data.iter().map(|&w| scale * w as f64 - offset).collect();
    Ok(RealMatrix { rows: s.rows, cols: s.cols, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn midpoint_maps_to_half_range() {
        let cfg = QConfig::default();
        let q = quantize_scalar(0.0, &cfg, &mut rng(1)).unwrap();
        assert_eq!(q, 67_108_864);
    }

    #[test]
    fn upper_clip_bound_maps_to_full_range() {
        let cfg = QConfig::default();
        let q = quantize_scalar(4.0, &cfg, &mut rng(1)).unwrap();
        assert_eq!(q, 134_217_728);
    }

    #[test]
    fn exact_rational_value_needs_no_randomness() {
        let cfg = QConfig::default();
        // (1 + 4) / 8 * 2^27 = 5 * 2^24, integral, so both seeds agree.
        let a = quantize_scalar(1.0, &cfg, &mut rng(1)).unwrap();
        let b = quantize_scalar(1.0, &cfg, &mut rng(2)).unwrap();
        assert_eq!(a, 83_886_080);
        assert_eq!(b, 83_886_080);
    }

    #[test]
    fn below_range_clips_to_zero() {
        let cfg = QConfig::default();
        assert_eq!(quantize_scalar(-5.0, &cfg, &mut rng(1)).unwrap(), 0);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let cfg = QConfig::default();
        assert!(matches!(
            quantize_scalar(f64::NAN, &cfg, &mut rng(1)),
            Err(Error::NonFiniteInput)
        ));
        assert!(quantize_scalar(f64::INFINITY, &cfg, &mut rng(1)).is_err());
    }

    #[test]
    fn matrix_quantization_composes_scalar_cases() {
        let cfg = QConfig::default();
        let x = RealMatrix::from_vec(2, 1, vec![0.0, 4.0]);
        let q = quantize_matrix(&x, &cfg, &mut rng(1)).unwrap();
        assert_eq!(q.data, vec![67_108_864, 134_217_728]);
    }

    #[test]
    fn all_zero_matrix_quantizes_to_half_range() {
        let cfg = QConfig::default();
        let x = RealMatrix::zeros(3, 4);
        let q = quantize_matrix(&x, &cfg, &mut rng(7)).unwrap();
        assert!(q.data.iter().all(|&w| w == cfg.r / 2));
    }

    #[test]
    fn dequantize_zero_code() {
        let cfg = QConfig::default();
        let s = QMatrix::from_vec(1, 1, vec![67_108_864]);
        let x = dequantize_sum(&s, 1, &cfg).unwrap();
        assert_eq!(x.data[0], 0.0);
    }

    #[test]
    fn dequantize_two_term_sum_exactly() {
        let cfg = QConfig::default();
        // q(1) + q(0) = 83886080 + 67108864.
        let s = QMatrix::from_vec(1, 1, vec![150_994_944]);
        let x = dequantize_sum(&s, 2, &cfg).unwrap();
        assert_eq!(x.data[0], 1.0);
    }

    #[test]
    fn dequantize_lower_bound() {
        let cfg = QConfig::default();
        let s = QMatrix::from_vec(1, 1, vec![0]);
        let x = dequantize_sum(&s, 1, &cfg).unwrap();
        assert_eq!(x.data[0], -4.0);
    }

    #[test]
    fn dequantize_rejects_zero_summands() {
        let cfg = QConfig::default();
        let s = QMatrix::zeros(1, 1);
        assert!(dequantize_sum(&s, 0, &cfg).is_err());
    }

    #[test]
    fn roundtrip_recovers_random_matrix_within_one_step() {
        let cfg = QConfig::default();
        let mut r = rng(42);
        let x = RealMatrix::from_fn(8, 5, |_, _| r.gen_range(-4.0..4.0));
        let q = quantize_matrix(&x, &cfg, &mut r).unwrap();
        let back = dequantize_sum(&q, 1, &cfg).unwrap();
        for (a, b) in x.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= cfg.step(), "|{} - {}| > step", a, b);
        }
    }

    #[test]
    fn summand_headroom_enforced() {
        let cfg = QConfig::default();
        assert!(cfg.validate_summands(31).is_ok());
        assert!(cfg.validate_summands(32).is_err());
        assert!(cfg.validate_summands(0).is_err());
    }

    #[test]
    fn stochastic_rounding_is_unbiased() {
        let cfg = QConfig::default();
        // A value with a deliberately awkward fractional code.
        let x = 1.0 + 0.37 * cfg.step();
        let n = 100_000usize;
        let mut r = rng(9);
        // Accumulate deviations from x, not raw values, so the test's own
        // floating summation cannot swamp the nano-scale signal.
        let mut sum_dev = 0.0;
        let mut sumsq_dev = 0.0;
        for _ in 0..n {
            let q = quantize_scalar(x, &cfg, &mut r).unwrap();
            let d = dequantize_sum(&QMatrix::from_vec(1, 1, vec![q]), 1, &cfg).unwrap().data[0];
            let dev = d - x;
            sum_dev += dev;
            sumsq_dev += dev * dev;
        }
        let mean_dev = sum_dev / n as f64;
        let var = (sumsq_dev / n as f64 - mean_dev * mean_dev).max(0.0);
        let se = (var / n as f64).sqrt();
        assert!(
            mean_dev.abs() <= 4.0 * se.max(f64::EPSILON),
            "bias {} exceeds 4 standard errors {}",
            mean_dev,
            se
        );
    }

    #[test]
    fn wraparound_addition() {
        let a = QMatrix::from_vec(1, 1, vec![u32::MAX]);
        let b = QMatrix::from_vec(1, 1, vec![1]);
        assert_eq!(a.wrapping_add(&b).unwrap().data[0], 0);
    }

    #[test]
    fn encode_decode_roundtrip() {
        let q = QMatrix::from_vec(2, 3, vec![1, 2, 3, 4, 5, u32::MAX]);
        let bytes = q.encode();
        assert_eq!(bytes.len(), 8 + 6 * 4);
        assert_eq!(QMatrix::decode(&bytes).unwrap(), q);
        assert!(QMatrix::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_error_bounded(x in -4.0f64..4.0, seed in 0u64..u64::MAX) {
            let cfg = QConfig::default();
            let mut r = rng(seed);
            let q = quantize_scalar(x, &cfg, &mut r).unwrap();
            prop_assert!(q <= cfg.r);
            let d = dequantize_sum(&QMatrix::from_vec(1, 1, vec![q]), 1, &cfg).unwrap().data[0];
            prop_assert!((d - x).abs() <= cfg.step() + 1e-15);
        }

        #[test]
        fn sum_linearity_and_padding_neutrality(
            vals in proptest::collection::vec(-4.0f64..4.0, 1..8),
            seed in 0u64..u64::MAX,
        ) {
            let cfg = QConfig::default();
            let mut r = rng(seed);
            let n = vals.len() as u32;
            let codes: Vec<u32> = vals
                .iter()
                .map(|&v| quantize_scalar(v, &cfg, &mut r).unwrap())
                .collect();
            let total: u32 = codes.iter().fold(0u32, |acc, &c| acc.wrapping_add(c));
            let joint = dequantize_sum(&QMatrix::from_vec(1, 1, vec![total]), n, &cfg)
                .unwrap()
                .data[0];
            let split: f64 = codes
                .iter()
                .map(|&c| {
                    dequantize_sum(&QMatrix::from_vec(1, 1, vec![c]), 1, &cfg).unwrap().data[0]
                })
                .sum();
            // 2t/r is a power of two here, so both routes are exact in f64.
            prop_assert_eq!(joint, split);

            // Appending zero codes and bumping the summand count changes nothing.
            let zero = cfg.r / 2;
            let padded = total.wrapping_add(zero.wrapping_mul(3));
            let padded_val =
                dequantize_sum(&QMatrix::from_vec(1, 1, vec![padded]), n + 3, &cfg)
                    .unwrap()
                    .data[0];
            prop_assert_eq!(padded_val, joint);
        }
    }
}
