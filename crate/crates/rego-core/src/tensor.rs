//! Dense row-major matrices, a counter-based deterministic RNG, and the
//! order-statistics helper used for importance thresholds.
//!
//! Everything downstream (training, Fisher estimation, file formats) is built
//! on these primitives, so determinism starts here: the RNG is a pure counter
//! generator and replays bit-for-bit from a seed, and no operation depends on
//! iteration order of a hash map or on platform-specific fast-math.

use crate::error::{Error, Result};

/// Dense row-major matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from row-major data. Every entry must be finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::dimension(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("matrix entry is not finite"));
        }
        Ok(Matrix { rows, cols, data })
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(v.is_finite());
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Rounds every entry through 32-bit precision. Archived state passes
    /// through this so that in-memory values match their on-disk form exactly.
    pub fn snap_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

/// Dense row-major matrix of small unsigned labels (region codes, mask bits).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ByteMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl ByteMatrix {
    pub fn zeros(rows: usize, cols: usize) -> ByteMatrix {
        ByteMatrix {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: u8) -> ByteMatrix {
        ByteMatrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<u8>) -> Result<ByteMatrix> {
        if data.len() != rows * cols {
            return Err(Error::dimension(format!(
                "label matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(ByteMatrix { rows, cols, data })
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: u8) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &ByteMatrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn count(&self, value: u8) -> usize {
        self.data.iter().filter(|&&v| v == value).count()
    }
}

/// Inner product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dimension(format!(
            "dot product of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

/// Entrywise product of two shape-congruent matrices.
pub fn hadamard(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if !a.same_shape(b) {
        return Err(Error::dimension(format!(
            "hadamard product of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("hadamard product overflowed"));
    }
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data,
    })
}

/// Nearest-rank percentile: the k-th smallest value with k = ceil(alpha * n),
/// clamped to [1, n]. alpha = 0 selects the minimum; ties at the returned
/// threshold are resolved by callers with a `>=` comparison.
pub fn percentile_threshold(values: &[f64], alpha: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::domain("percentile of an empty multiset"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::domain(format!("alpha {alpha} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((alpha * n as f64).ceil() as usize).clamp(1, n);
    Ok(sorted[rank - 1])
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based deterministic generator (SplitMix64). The state is a bare
/// counter, so a stream replays bit-for-bit from its seed on any platform and
/// independent streams can be derived for (seed, purpose) pairs.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Rng {
        Rng { state: seed }
    }

    /// Derives an independent stream for a given purpose tag.
    pub fn stream(seed: u64, tag: u64) -> Rng {
        Rng::new(mix64(seed ^ mix64(tag.wrapping_mul(GOLDEN_GAMMA) | 1)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform draw in [0, 1) with 53 bits of mantissa.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller; consumes exactly two uniform draws.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1], keeps ln() finite
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform index below `n` (multiply-shift; consumes one draw).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (((self.next_u64() as u128) * (n as u128)) >> 64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_hand_values() {
        assert_eq!(dot(&[3.0, 4.0], &[4.0, 3.0]).unwrap(), 24.0);
        assert_eq!(dot(&[2.0, 2.0], &[2.0, 2.0]).unwrap(), 8.0);
        assert_eq!(dot(&[], &[]).unwrap(), 0.0);
    }

    #[test]
    fn dot_rejects_length_mismatch() {
        assert!(matches!(
            dot(&[1.0], &[1.0, 2.0]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn hadamard_matches_hand_values() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let c = hadamard(&a, &b).unwrap();
        assert_eq!(c.data(), &[0.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn hadamard_rejects_shape_mismatch() {
        let a = Matrix::zeros(2, 2);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(hadamard(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn percentile_on_1_to_100() {
        let values: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let t = percentile_threshold(&values, 0.75).unwrap();
        assert_eq!(t, 75.0);
        let selected = values.iter().filter(|&&v| v >= t).count();
        assert_eq!(selected, 26);
    }

    #[test]
    fn percentile_edge_cases() {
        assert_eq!(percentile_threshold(&[5.0, 5.0, 5.0], 0.5).unwrap(), 5.0);
        assert_eq!(percentile_threshold(&[9.0, 1.0, 4.0], 0.0).unwrap(), 1.0);
        assert_eq!(percentile_threshold(&[9.0, 1.0, 4.0], 1.0).unwrap(), 9.0);
        assert!(matches!(
            percentile_threshold(&[], 0.5),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            percentile_threshold(&[1.0], 1.5),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn percentile_brute_force_rank_oracle() {
        // Independent oracle: count how many entries the threshold admits and
        // compare against the nearest-rank definition on random multisets.
        let mut rng = Rng::new(7);
        for n in [1usize, 2, 3, 10, 33, 100] {
            for step in 0..=16u32 {
                let alpha = f64::from(step) / 16.0; // dyadic, exact in binary
                let values: Vec<f64> =
                    (0..n).map(|_| (rng.below(50)) as f64).collect();
                let t = percentile_threshold(&values, alpha).unwrap();
                let mut sorted = values.clone();
                sorted.sort_by(f64::total_cmp);
                let rank = ((alpha * n as f64).ceil() as usize).clamp(1, n);
                assert_eq!(t, sorted[rank - 1]);
                let admitted = values.iter().filter(|&&v| v >= t).count();
                assert!(admitted >= n - rank + 1);
            }
        }
    }

    #[test]
    fn percentile_monotone_in_alpha() {
        let mut rng = Rng::new(11);
        for _ in 0..50 {
            let n = 1 + rng.below(40);
            let values: Vec<f64> = (0..n).map(|_| rng.uniform(-5.0, 5.0)).collect();
            let mut last = f64::NEG_INFINITY;
            for step in 0..=32u32 {
                let alpha = f64::from(step) / 32.0;
                let t = percentile_threshold(&values, alpha).unwrap();
                assert!(t >= last);
                last = t;
            }
        }
    }

    #[test]
    fn rng_replays_bit_for_bit() {
        let mut a = Rng::stream(42, 3);
        let mut b = Rng::stream(42, 3);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::stream(42, 4);
        assert_ne!(Rng::stream(42, 3).next_u64(), c.next_u64());
    }

    #[test]
    fn rng_uniform_range_and_normal_moments() {
        let mut rng = Rng::new(9);
        let n = 20_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let v = rng.normal();
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.05, "normal mean drifted: {mean}");
        assert!((var - 1.0).abs() < 0.06, "normal variance drifted: {var}");
        for _ in 0..1000 {
            let u = rng.next_f64();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = Rng::new(5);
        let p = rng.permutation(257);
        let mut seen = vec![false; 257];
        for i in p {
            assert!(!seen[i]);
            seen[i] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn matrix_from_vec_validates() {
        assert!(matches!(
            Matrix::from_vec(2, 2, vec![1.0; 3]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn snap_f32_is_idempotent() {
        let mut m = Matrix::from_vec(1, 3, vec![0.1, 1.0 / 3.0, -7.25]).unwrap();
        m.snap_f32();
        let once = m.clone();
        m.snap_f32();
        assert_eq!(m, once);
        assert_eq!(m.get(0, 0), 0.1f32 as f64);
    }
}
