//! Codebooks and the VQ / DQ operators.
//!
//! A [`Codebook`] is a `K x D` table with exponential-moving-average state.
//! A [`DepthwiseQuantizer`] binds `M` codebooks to the slices of a tensor
//! cut along one axis; slice `i` is only ever quantized by book `i` and the
//! quantized slices are concatenated back along the same axis.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DqError, Result};
use crate::tensor::{decompose, positions_as_vectors, reassemble, vectors_to_positions, AxisDecomposition, NdTensor};

pub const DEFAULT_GAMMA: f64 = 0.99;
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// `K` learnable `D`-dimensional codes plus EMA accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    num_codes: usize,
    dim: usize,
    codes: Vec<f64>,
    ema_counts: Vec<f64>,
    ema_sums: Vec<f64>,
    pub gamma: f64,
    pub epsilon: f64,
}

impl Codebook {
    /// All-zero codebook with empty EMA state.
    pub fn new(num_codes: usize, dim: usize, gamma: f64, epsilon: f64) -> Self {
        Self {
            num_codes,
            dim,
            codes: vec![0.0; num_codes * dim],
            ema_counts: vec![0.0; num_codes],
            ema_sums: vec![0.0; num_codes * dim],
            gamma,
            epsilon,
        }
    }

    pub fn from_codes(num_codes: usize, dim: usize, codes: Vec<f64>) -> Result<Self> {
        let mut book = Self::new(num_codes, dim, DEFAULT_GAMMA, DEFAULT_EPSILON);
        book.set_codes(codes)?;
        Ok(book)
    }

    /// Rebuilds a codebook from serialized state.
    pub fn from_state(
        num_codes: usize,
        dim: usize,
        codes: Vec<f64>,
        ema_counts: Vec<f64>,
        ema_sums: Vec<f64>,
    ) -> Result<Self> {
        let mut book = Self::from_codes(num_codes, dim, codes)?;
        book.set_ema_state(ema_counts, ema_sums)?;
        Ok(book)
    }

    pub fn with_decay(mut self, gamma: f64, epsilon: f64) -> Self {
        self.gamma = gamma;
        self.epsilon = epsilon;
        self
    }

    pub fn num_codes(&self) -> usize {
        self.num_codes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn codes(&self) -> &[f64] {
        &self.codes
    }

    pub fn code(&self, j: usize) -> &[f64] {
        &self.codes[j * self.dim..(j + 1) * self.dim]
    }

    pub fn ema_counts(&self) -> &[f64] {
        &self.ema_counts
    }

    pub fn ema_sums(&self) -> &[f64] {
        &self.ema_sums
    }

    pub fn set_codes(&mut self, codes: Vec<f64>) -> Result<()> {
        if codes.len() != self.num_codes * self.dim {
            return Err(DqError::DimensionMismatch {
                expected: self.num_codes * self.dim,
                actual: codes.len(),
            });
        }
        if let Some((index, &value)) = codes.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(DqError::NonFinite { index, value });
        }
        self.codes = codes;
        Ok(())
    }

    pub fn set_ema_state(&mut self, counts: Vec<f64>, sums: Vec<f64>) -> Result<()> {
        if counts.len() != self.num_codes {
            return Err(DqError::DimensionMismatch {
                expected: self.num_codes,
                actual: counts.len(),
            });
        }
        if sums.len() != self.num_codes * self.dim {
            return Err(DqError::DimensionMismatch {
                expected: self.num_codes * self.dim,
                actual: sums.len(),
            });
        }
        if counts.iter().any(|&n| !(n >= 0.0) || !n.is_finite()) {
            return Err(DqError::InvalidArgument(
                "EMA counts must be finite and non-negative".into(),
            ));
        }
        self.ema_counts = counts;
        self.ema_sums = sums;
        Ok(())
    }

    /// Seeds the codes with `K` distinct rows of `vectors` drawn without
    /// replacement. When fewer than `K` distinct rows exist the remainder is
    /// drawn with replacement plus a small jitter so that no two codes
    /// coincide exactly.
    pub fn init_from_samples<R: Rng + ?Sized>(&mut self, vectors: &NdTensor, rng: &mut R) -> Result<()> {
        let rows = self.check_matrix(vectors)?;
        let d = self.dim;
        // walk a random permutation, keeping rows not seen before
        let mut seen = HashSet::new();
        let mut picks: Vec<usize> = Vec::with_capacity(self.num_codes);
        for r in sample(rng, rows, rows) {
            let key: Vec<u64> = vectors.data()[r * d..(r + 1) * d].iter().map(|x| x.to_bits()).collect();
            if seen.insert(key) {
                picks.push(r);
                if picks.len() == self.num_codes {
                    break;
                }
            }
        }
        let distinct = picks.len();
        while picks.len() < self.num_codes {
            picks.push(picks[rng.random_range(0..distinct)]);
        }
        let rms = (vectors.data().iter().map(|v| v * v).sum::<f64>() / vectors.len() as f64)
            .sqrt()
            .max(1e-6);
        let jitter = Normal::new(0.0, 1e-3 * rms).expect("positive std");
        for (j, &r) in picks.iter().enumerate() {
            let src = &vectors.data()[r * d..(r + 1) * d];
            let dst = &mut self.codes[j * d..(j + 1) * d];
            dst.copy_from_slice(src);
            if j >= distinct {
                for x in dst.iter_mut() {
                    *x += jitter.sample(rng);
                }
            }
        }
        self.ema_counts.iter_mut().for_each(|n| *n = 0.0);
        self.ema_sums.iter_mut().for_each(|m| *m = 0.0);
        Ok(())
    }

    fn check_matrix(&self, vectors: &NdTensor) -> Result<usize> {
        if vectors.rank() != 2 || vectors.shape()[1] != self.dim {
            return Err(DqError::ShapeMismatch {
                expected: vec![vectors.shape()[0], self.dim],
                actual: vectors.shape().to_vec(),
            });
        }
        Ok(vectors.shape()[0])
    }

    /// Index and squared L2 distance of the closest code. Ties resolve to
    /// the lowest index.
    pub fn nearest(&self, v: &[f64]) -> Result<(usize, f64)> {
        if v.len() != self.dim {
            return Err(DqError::DimensionMismatch {
                expected: self.dim,
                actual: v.len(),
            });
        }
        Ok(self.nearest_unchecked(v))
    }

    fn nearest_unchecked(&self, v: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (j, code) in self.codes.chunks_exact(self.dim).enumerate() {
            let d: f64 = code.iter().zip(v).map(|(c, x)| (x - c) * (x - c)).sum();
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    }

    /// Quantizes every row of a `[P, D]` matrix. Zero-row input cannot be
    /// expressed as an [`NdTensor`], so there is no empty case to handle.
    pub fn vq_forward(&self, vectors: &NdTensor) -> Result<QuantizationResult> {
        let rows = self.check_matrix(vectors)?;
        let d = self.dim;
        let mut codes = Vec::with_capacity(rows);
        let mut distances = Vec::with_capacity(rows);
        let mut quantized = Vec::with_capacity(rows * d);
        for v in vectors.data().chunks_exact(d) {
            let (j, dist) = self.nearest_unchecked(v);
            codes.push(j);
            distances.push(dist);
            quantized.extend_from_slice(self.code(j));
        }
        Ok(QuantizationResult {
            num_books: 1,
            positions: rows,
            codes,
            distances,
            quantized: NdTensor::from_parts(vec![rows, d], quantized)?,
        })
    }

    /// One EMA soft-EM step:
    ///
    /// ```text
    /// n_i <- g n_i + (1 - g) count_i
    /// m_i <- g m_i + (1 - g) sum of vectors assigned to i
    /// c_i <- m_i / n^_i,  n^_i = (n_i + eps) / (sum_j n_j + K eps) * sum_j n_j
    /// ```
    ///
    /// Codes that have never received an assignment (`n_i == 0`) keep their
    /// current value.
    pub fn ema_update(&mut self, indices: &[usize], vectors: &NdTensor) -> Result<()> {
        let rows = if indices.is_empty() {
            0
        } else {
            self.check_matrix(vectors)?
        };
        if rows != indices.len() {
            return Err(DqError::DimensionMismatch {
                expected: rows,
                actual: indices.len(),
            });
        }
        let (k, d) = (self.num_codes, self.dim);
        let mut counts = vec![0.0; k];
        let mut sums = vec![0.0; k * d];
        for (&j, v) in indices.iter().zip(vectors.data().chunks_exact(d)) {
            if j >= k {
                return Err(DqError::CodeOutOfRange { index: j, codes: k });
            }
            counts[j] += 1.0;
            for (s, x) in sums[j * d..(j + 1) * d].iter_mut().zip(v) {
                *s += x;
            }
        }
        let g = self.gamma;
        for (n, c) in self.ema_counts.iter_mut().zip(&counts) {
            *n = g * *n + (1.0 - g) * c;
        }
        for (m, s) in self.ema_sums.iter_mut().zip(&sums) {
            *m = g * *m + (1.0 - g) * s;
        }
        self.refresh_codes();
        Ok(())
    }

    /// Laplace-smoothed count used to normalize the EMA sums.
    pub fn smoothed_count(&self, j: usize) -> f64 {
        let total: f64 = self.ema_counts.iter().sum();
        let k = self.num_codes as f64;
        (self.ema_counts[j] + self.epsilon) / (total + k * self.epsilon) * total
    }

    fn refresh_codes(&mut self) {
        let d = self.dim;
        for j in 0..self.num_codes {
            if self.ema_counts[j] > 0.0 {
                let n_hat = self.smoothed_count(j);
                for t in 0..d {
                    self.codes[j * d + t] = self.ema_sums[j * d + t] / n_hat;
                }
            }
        }
    }

    /// Mass each code would hold under uniform usage, `sum_j n_j / K`.
    pub fn expected_uniform_mass(&self) -> f64 {
        self.ema_counts.iter().sum::<f64>() / self.num_codes as f64
    }

    /// Overwrites every code whose EMA count is below `threshold` with a
    /// uniformly drawn row of `batch`, resetting that code's statistics to
    /// `(1, row)`. Other codes' statistics are untouched.
    pub fn reinit_dead_codes<R: Rng + ?Sized>(
        &mut self,
        batch: &NdTensor,
        threshold: f64,
        rng: &mut R,
    ) -> Result<usize> {
        let rows = self.check_matrix(batch)?;
        let d = self.dim;
        let mut reset = 0;
        for j in 0..self.num_codes {
            if self.ema_counts[j] < threshold {
                let r = rng.random_range(0..rows);
                let row = &batch.data()[r * d..(r + 1) * d];
                self.codes[j * d..(j + 1) * d].copy_from_slice(row);
                self.ema_sums[j * d..(j + 1) * d].copy_from_slice(row);
                self.ema_counts[j] = 1.0;
                reset += 1;
            }
        }
        Ok(reset)
    }
}

/// Assignments and reconstruction produced by a quantizer.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult {
    pub num_books: usize,
    /// Positions per book.
    pub positions: usize,
    /// Code indices laid out `[num_books, positions]`.
    pub codes: Vec<usize>,
    /// Squared error per position, laid out like `codes`. Padding rows do
    /// not contribute.
    pub distances: Vec<f64>,
    pub quantized: NdTensor,
}

impl QuantizationResult {
    pub fn book_codes(&self, book: usize) -> &[usize] {
        &self.codes[book * self.positions..(book + 1) * self.positions]
    }

    pub fn book_distances(&self, book: usize) -> &[f64] {
        &self.distances[book * self.positions..(book + 1) * self.positions]
    }

    /// Mean squared distance per position and book.
    pub fn mean_distance(&self) -> f64 {
        self.distances.iter().sum::<f64>() / self.distances.len() as f64
    }
}

/// When and how aggressively unused codes are re-seeded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeadCodePolicy {
    /// Codes with `n_i < fraction * expected_uniform_mass` are dead.
    pub fraction: f64,
    /// Check every this many EMA steps; zero disables re-seeding.
    pub interval: usize,
}

impl Default for DeadCodePolicy {
    fn default() -> Self {
        Self {
            fraction: 0.01,
            interval: 100,
        }
    }
}

impl DeadCodePolicy {
    pub fn threshold(&self, book: &Codebook) -> f64 {
        self.fraction * book.expected_uniform_mass()
    }

    pub fn due(&self, step: usize) -> bool {
        self.interval > 0 && step > 0 && step.is_multiple_of(self.interval)
    }
}

/// Per-slice position vectors of a tensor, ready for codebook lookup.
#[derive(Debug, Clone)]
pub struct SliceVectors {
    pub plan: AxisDecomposition,
    /// One `[P, D]` matrix per slice.
    pub vectors: Vec<NdTensor>,
}

/// `M` codebooks applied pairwise to the slices of a tensor along `axis`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseQuantizer {
    pub axis: usize,
    books: Vec<Codebook>,
    initialized: bool,
}

impl DepthwiseQuantizer {
    pub fn new(axis: usize, num_books: usize, num_codes: usize, dim: usize, gamma: f64, epsilon: f64) -> Result<Self> {
        if num_books == 0 || num_codes == 0 || dim == 0 {
            return Err(DqError::InvalidArgument(format!(
                "quantizer needs M, K, D >= 1 (got M={num_books}, K={num_codes}, D={dim})"
            )));
        }
        Ok(Self {
            axis,
            books: (0..num_books)
                .map(|_| Codebook::new(num_codes, dim, gamma, epsilon))
                .collect(),
            initialized: false,
        })
    }

    /// Wraps existing codebooks, which must share `D`.
    pub fn from_books(axis: usize, books: Vec<Codebook>) -> Result<Self> {
        let first = books.first().ok_or(DqError::Empty("quantizer without codebooks"))?;
        let (k, d) = (first.num_codes(), first.dim());
        for b in &books {
            if b.dim() != d || b.num_codes() != k {
                return Err(DqError::DimensionMismatch {
                    expected: d,
                    actual: b.dim(),
                });
            }
        }
        Ok(Self {
            axis,
            books,
            initialized: true,
        })
    }

    pub fn num_books(&self) -> usize {
        self.books.len()
    }

    pub fn num_codes(&self) -> usize {
        self.books[0].num_codes()
    }

    pub fn dim(&self) -> usize {
        self.books[0].dim()
    }

    pub fn books(&self) -> &[Codebook] {
        &self.books
    }

    pub fn books_mut(&mut self) -> &mut [Codebook] {
        &mut self.books
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Decomposes `t` and flattens each slice into position vectors.
    pub fn slice_vectors(&self, t: &NdTensor) -> Result<SliceVectors> {
        let (slices, plan) = decompose(t, self.axis, self.num_books())?;
        if plan.slice_extent != self.dim() {
            return Err(DqError::DimensionMismatch {
                expected: self.dim(),
                actual: plan.slice_extent,
            });
        }
        let vectors = slices
            .iter()
            .map(|s| positions_as_vectors(s, self.axis))
            .collect::<Result<Vec<_>>>()?;
        Ok(SliceVectors { plan, vectors })
    }

    /// Seeds every book from the matching slice of a first batch.
    pub fn init_from<R: Rng + ?Sized>(&mut self, sv: &SliceVectors, rng: &mut R) -> Result<()> {
        for (book, v) in self.books.iter_mut().zip(&sv.vectors) {
            book.init_from_samples(v, rng)?;
        }
        self.initialized = true;
        Ok(())
    }

    pub fn dq_forward(&self, t: &NdTensor) -> Result<QuantizationResult> {
        let sv = self.slice_vectors(t)?;
        self.quantize_slices(&sv)
    }

    pub fn quantize_slices(&self, sv: &SliceVectors) -> Result<QuantizationResult> {
        let plan = &sv.plan;
        let positions = sv.vectors[0].shape()[0];
        let mut codes = Vec::with_capacity(positions * self.num_books());
        let mut distances = Vec::with_capacity(positions * self.num_books());
        let mut slices = Vec::with_capacity(self.num_books());
        let slice_shape = plan.slice_shape();
        for (s, (book, v)) in self.books.iter().zip(&sv.vectors).enumerate() {
            let r = book.vq_forward(v)?;
            codes.extend_from_slice(&r.codes);
            let valid = plan.valid_extent(s);
            if valid == book.dim() {
                distances.extend_from_slice(&r.distances);
            } else {
                let d = book.dim();
                for (x, q) in v.data().chunks_exact(d).zip(r.quantized.data().chunks_exact(d)) {
                    distances.push(x[..valid].iter().zip(&q[..valid]).map(|(a, b)| (a - b) * (a - b)).sum());
                }
            }
            slices.push(vectors_to_positions(&r.quantized, &slice_shape, self.axis)?);
        }
        Ok(QuantizationResult {
            num_books: self.num_books(),
            positions,
            codes,
            distances,
            quantized: reassemble(&slices, plan)?,
        })
    }

    /// EMA step for every book using the assignments of `result`.
    pub fn ema_update(&mut self, sv: &SliceVectors, result: &QuantizationResult) -> Result<()> {
        for (s, (book, v)) in self.books.iter_mut().zip(&sv.vectors).enumerate() {
            book.ema_update(result.book_codes(s), v)?;
        }
        Ok(())
    }

    /// Applies the dead-code policy to every book; returns codes re-seeded.
    pub fn reinit_dead_codes<R: Rng + ?Sized>(
        &mut self,
        sv: &SliceVectors,
        policy: &DeadCodePolicy,
        rng: &mut R,
    ) -> Result<usize> {
        let mut total = 0;
        for (book, v) in self.books.iter_mut().zip(&sv.vectors) {
            let threshold = policy.threshold(book);
            total += book.reinit_dead_codes(v, threshold, rng)?;
        }
        Ok(total)
    }

    pub fn capacity(&self) -> CapacityReport {
        capacity(self.num_codes(), self.num_books())
    }
}

/// Cost and representation capacity of `M` books of `K` codes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub num_codes: usize,
    pub num_books: usize,
    /// Code vectors stored, `K * M`.
    pub cost: usize,
    /// `M ln K` nats.
    pub capacity_nats: f64,
    /// `ln S` for the sample space `S = K^M`.
    pub sample_space_log: f64,
    /// KL divergence to the uniform prior, constant for a fixed quantizer.
    pub kl_constant_nats: f64,
}

pub fn capacity(num_codes: usize, num_books: usize) -> CapacityReport {
    let c = num_books as f64 * (num_codes as f64).ln();
    CapacityReport {
        num_codes,
        num_books,
        cost: num_codes * num_books,
        capacity_nats: c,
        sample_space_log: c,
        kl_constant_nats: c,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reduction {
    /// Mean over elements.
    Mean,
    /// Plain sum of squared errors.
    Sum,
}

/// Values of the codebook term `|sg(z) - z^|^2` and the commitment term
/// `beta |z - sg(z^)|^2`.
pub fn quantization_loss(z: &NdTensor, z_hat: &NdTensor, beta: f64, reduction: Reduction) -> Result<(f64, f64)> {
    if z.shape() != z_hat.shape() {
        return Err(DqError::ShapeMismatch {
            expected: z.shape().to_vec(),
            actual: z_hat.shape().to_vec(),
        });
    }
    if !(beta >= 0.0) {
        return Err(DqError::InvalidArgument(format!("beta must be >= 0, got {beta}")));
    }
    let sq: f64 = z.data().iter().zip(z_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    let base = match reduction {
        Reduction::Mean => sq / z.len() as f64,
        Reduction::Sum => sq,
    };
    Ok((base, beta * base))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn book(codes: &[f64], d: usize) -> Codebook {
        Codebook::from_codes(codes.len() / d, d, codes.to_vec()).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> NdTensor {
        NdTensor::from_fn(&[rows, cols], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn nearest_code_examples() {
        let b = book(&[0.0, 0.0, 1.0, 1.0], 2);
        let (j, d) = b.nearest(&[0.9, 0.8]).unwrap();
        assert_eq!(j, 1);
        // (0.1)^2 + (0.2)^2
        assert!((d - 0.05).abs() < 1e-12);
        assert_eq!(b.nearest(&[0.0, 0.0]).unwrap(), (0, 0.0));

        let tie = book(&[0.0, 0.0, 1.0, 0.0], 2);
        assert_eq!(tie.nearest(&[0.5, 0.0]).unwrap(), (0, 0.25));
        assert!(matches!(
            tie.nearest(&[0.5]),
            Err(DqError::DimensionMismatch { expected: 2, actual: 1 })
        ));
    }

    #[test]
    fn vq_forward_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = Codebook::from_codes(4, 8, random_matrix(&mut rng, 4, 8).into_data()).unwrap();
        let x = random_matrix(&mut rng, 100, 8);
        let r = b.vq_forward(&x).unwrap();
        let mut total = 0.0;
        for (p, row) in x.data().chunks(8).enumerate() {
            let best = (0..4)
                .map(|j| row.iter().zip(b.code(j)).map(|(a, c)| (a - c) * (a - c)).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            assert_eq!(r.distances[p], best);
            total += best;
        }
        assert!((r.mean_distance() - total / 100.0).abs() < 1e-12);
        // quantized rows are copies of code rows
        for (p, q) in r.quantized.data().chunks(8).enumerate() {
            assert_eq!(q, b.code(r.codes[p]));
        }
    }

    #[test]
    fn vq_forward_on_code_rows_is_lossless() {
        let b = book(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0], 2);
        let x = NdTensor::new(vec![3, 2], vec![4.0, 5.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = b.vq_forward(&x).unwrap();
        assert_eq!(r.codes, vec![2, 0, 1]);
        assert!(r.distances.iter().all(|&d| d == 0.0));
        let single = b
            .vq_forward(&NdTensor::new(vec![1, 2], vec![1.9, 3.2]).unwrap())
            .unwrap();
        assert_eq!(single.codes[0], b.nearest(&[1.9, 3.2]).unwrap().0);
        assert!(b.vq_forward(&NdTensor::zeros(&[3, 3])).is_err());
    }

    #[test]
    fn single_book_dq_equals_vq() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = NdTensor::from_fn(&[32, 3, 4], |_| rng.random_range(-1.0..1.0));
        let mut q = DepthwiseQuantizer::new(0, 1, 32, 32, DEFAULT_GAMMA, DEFAULT_EPSILON).unwrap();
        let sv = q.slice_vectors(&t).unwrap();
        q.init_from(&sv, &mut rng).unwrap();
        let dq = q.dq_forward(&t).unwrap();
        let flat = positions_as_vectors(&t, 0).unwrap();
        let vq = q.books()[0].vq_forward(&flat).unwrap();
        assert_eq!(dq.codes, vq.codes);
        assert_eq!(dq.distances, vq.distances);
        assert_eq!(dq.quantized, vectors_to_positions(&vq.quantized, t.shape(), 0).unwrap());
    }

    #[test]
    fn dq_geometry_and_exact_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = NdTensor::from_fn(&[512, 7, 7], |_| rng.random_range(-1.0..1.0));
        let mut q = DepthwiseQuantizer::new(0, 7, 32, 74, DEFAULT_GAMMA, DEFAULT_EPSILON).unwrap();
        let sv = q.slice_vectors(&t).unwrap();
        q.init_from(&sv, &mut rng).unwrap();
        let r = q.dq_forward(&t).unwrap();
        assert_eq!(r.codes.len(), 49 * 7);
        assert_eq!(r.positions, 49);
        assert_eq!(r.quantized.shape(), t.shape());

        // a tensor built from code rows quantizes to itself
        let rebuilt = r.quantized.clone();
        let again = q.dq_forward(&rebuilt).unwrap();
        assert!(again.distances.iter().all(|&d| d == 0.0));
        assert_eq!(again.quantized, rebuilt);
    }

    #[test]
    fn padding_is_excluded_from_distances() {
        // 5 channels into 2 books of D=3; the last channel of book 1 is pad
        let t = NdTensor::from_fn(&[5, 2], |i| i as f64);
        let b0 = Codebook::from_codes(1, 3, vec![0.0; 3]).unwrap();
        let b1 = Codebook::from_codes(1, 3, vec![0.0, 0.0, 100.0]).unwrap();
        let q = DepthwiseQuantizer::from_books(0, vec![b0, b1]).unwrap();
        let r = q.dq_forward(&t).unwrap();
        // position 0 of book 1 holds channels 3,4 -> values 6, 8
        assert_eq!(r.book_distances(1)[0], 36.0 + 64.0);
        assert_eq!(r.quantized.shape(), &[5, 2]);
    }

    #[test]
    fn quantization_loss_examples() {
        let z = NdTensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let zh = NdTensor::zeros(&[2]);
        assert_eq!(quantization_loss(&z, &z, 0.25, Reduction::Mean).unwrap(), (0.0, 0.0));
        assert_eq!(quantization_loss(&z, &zh, 0.25, Reduction::Sum).unwrap(), (1.0, 0.25));
        assert_eq!(quantization_loss(&z, &zh, 0.25, Reduction::Mean).unwrap(), (0.5, 0.125));
        assert_eq!(quantization_loss(&z, &zh, 0.0, Reduction::Mean).unwrap().1, 0.0);
        assert!(quantization_loss(&z, &NdTensor::zeros(&[3]), 0.25, Reduction::Mean).is_err());
        assert!(quantization_loss(&z, &zh, -1.0, Reduction::Mean).is_err());
    }

    #[test]
    fn ema_count_update() {
        let mut b = Codebook::new(2, 1, 0.5, 0.0);
        b.set_ema_state(vec![2.0, 1.0], vec![2.0, 1.0]).unwrap();
        let x = NdTensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        b.ema_update(&[0, 0, 0, 0], &x).unwrap();
        assert_eq!(b.ema_counts()[0], 3.0);
        // unassigned code decays by gamma
        assert_eq!(b.ema_counts()[1], 0.5);
        assert_eq!(b.ema_sums()[1], 0.5);
        // with eps = 0 the smoothed count is the raw count, so code 1 keeps
        // its value up to rounding
        assert!((b.code(1)[0] - 1.0).abs() < 1e-12);
        // code 0: m = 0.5*2 + 0.5*10 = 6, n = 3
        assert!((b.code(0)[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn never_assigned_codes_stay_put() {
        let mut b = Codebook::from_codes(3, 2, vec![1.0, 1.0, 5.0, 5.0, 9.0, 9.0]).unwrap();
        let x = NdTensor::new(vec![2, 2], vec![0.0, 0.0, 2.0, 2.0]).unwrap();
        for _ in 0..10 {
            b.ema_update(&[0, 0], &x).unwrap();
        }
        assert_eq!(b.code(1), &[5.0, 5.0]);
        assert_eq!(b.code(2), &[9.0, 9.0]);
        // empty batch is a pure decay step
        let before = b.ema_counts()[0];
        b.ema_update(&[], &x).unwrap();
        assert!((b.ema_counts()[0] - 0.99 * before).abs() < 1e-15);
        assert!(matches!(
            b.ema_update(&[7, 0], &x),
            Err(DqError::CodeOutOfRange { index: 7, codes: 3 })
        ));
    }

    #[test]
    fn dead_code_reinit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_matrix(&mut rng, 10, 2);
        let mut b = Codebook::from_codes(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        b.set_ema_state(vec![5.0, 5.0], vec![0.0, 0.0, 5.0, 5.0]).unwrap();
        let untouched = b.clone();
        assert_eq!(b.reinit_dead_codes(&x, 0.1, &mut rng).unwrap(), 0);
        assert_eq!(b, untouched);

        b.set_ema_state(vec![5.0, 0.0], vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(b.reinit_dead_codes(&x, 0.1, &mut rng).unwrap(), 1);
        let new_code = b.code(1).to_vec();
        assert!(x.data().chunks(2).any(|row| row == new_code.as_slice()));
        assert_eq!(b.ema_counts()[1], 1.0);
        assert_eq!(b.ema_sums()[2..], new_code[..]);
        assert_eq!(b.code(0), &[0.0, 0.0]);

        let run = |seed| {
            let mut c = Codebook::new(4, 2, 0.99, 1e-5);
            c.reinit_dead_codes(&x, 0.5, &mut ChaCha8Rng::seed_from_u64(seed))
                .unwrap();
            c
        };
        assert_eq!(run(9), run(9));
    }

    #[test]
    fn sample_init_without_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = NdTensor::from_fn(&[20, 1], |i| i as f64);
        let mut b = Codebook::new(20, 1, 0.99, 1e-5);
        b.init_from_samples(&x, &mut rng).unwrap();
        let mut v: Vec<f64> = b.codes().to_vec();
        v.sort_by(f64::total_cmp);
        assert_eq!(v, x.data());

        // more codes than rows: duplicates get jittered apart
        let mut b = Codebook::new(8, 1, 0.99, 1e-5);
        let one = NdTensor::new(vec![1, 1], vec![3.0]).unwrap();
        b.init_from_samples(&one, &mut rng).unwrap();
        assert_eq!(b.code(0), &[3.0]);
        let mut v: Vec<f64> = b.codes().to_vec();
        v.sort_by(f64::total_cmp);
        v.dedup();
        assert_eq!(v.len(), 8);
    }

    #[test]
    fn capacity_closed_form() {
        let c = capacity(512, 10);
        assert_eq!(c.cost, 5120);
        assert!((c.capacity_nats - 62.383).abs() < 1e-3);
        assert_eq!(c.capacity_nats, c.kl_constant_nats);
        let c = capacity(32, 1);
        assert_eq!(c.cost, 32);
        assert!((c.capacity_nats - 3.466).abs() < 1e-3);
        assert_eq!(capacity(1, 7).capacity_nats, 0.0);
    }

    #[test]
    fn capacity_grows_by_log_k_per_book() {
        for k in [2usize, 3, 32, 128, 512, 1000] {
            let lnk = (k as f64).ln();
            for m in 1..64 {
                let step = capacity(k, m + 1).capacity_nats - capacity(k, m).capacity_nats;
                assert!((step - lnk).abs() <= 4.0 * f64::EPSILON * capacity(k, m + 1).capacity_nats);
                assert_eq!(capacity(k, m + 1).cost - capacity(k, m).cost, k);
            }
        }
    }
}
