//! Plug-in entropy and mutual information over discrete code streams.
//!
//! All quantities are in nats. The estimators are the maximum-likelihood
//! ones with no bias correction; with `K` codes the plug-in mutual
//! information of independent streams is biased upward by roughly
//! `(K - 1)^2 / (2 n)` nats, so `n` should be large compared with `K^2`
//! when small values are meant to be read as independence.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DqError, Result};
use crate::quantizer::{capacity, CapacityReport, DeadCodePolicy, DepthwiseQuantizer, QuantizationResult};
use crate::tensor::NdTensor;

/// Frequency count of each code over a sample set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageHistogram {
    counts: Vec<u64>,
}

impl UsageHistogram {
    pub fn new(num_codes: usize) -> Self {
        Self {
            counts: vec![0; num_codes],
        }
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        Self { counts }
    }

    pub fn from_codes(codes: &[usize], num_codes: usize) -> Result<Self> {
        let mut h = Self::new(num_codes);
        for &c in codes {
            h.add(c)?;
        }
        Ok(h)
    }

    pub fn add(&mut self, code: usize) -> Result<()> {
        let k = self.counts.len();
        *self
            .counts
            .get_mut(code)
            .ok_or(DqError::CodeOutOfRange { index: code, codes: k })? += 1;
        Ok(())
    }

    /// Adds another shard's counts.
    pub fn merge(&mut self, other: &UsageHistogram) -> Result<()> {
        if other.counts.len() != self.counts.len() {
            return Err(DqError::DimensionMismatch {
                expected: self.counts.len(),
                actual: other.counts.len(),
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn entropy(&self) -> Result<f64> {
        entropy(self)
    }
}

/// `-sum p ln p` with `0 ln 0 = 0`.
pub fn entropy(h: &UsageHistogram) -> Result<f64> {
    let n = h.total();
    if n == 0 {
        return Err(DqError::Empty("entropy of an empty histogram"));
    }
    let n = n as f64;
    let mut terms: Vec<f64> = h
        .counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .collect();
    terms.sort_by(f64::total_cmp);
    Ok(terms.iter().sum())
}

/// Joint counts of two aligned code streams, `rows x cols`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointHistogram {
    rows: usize,
    cols: usize,
    counts: Vec<u64>,
}

impl JointHistogram {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            counts: vec![0; rows * cols],
        }
    }

    pub fn from_counts(rows: usize, cols: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != rows * cols {
            return Err(DqError::DimensionMismatch {
                expected: rows * cols,
                actual: counts.len(),
            });
        }
        Ok(Self { rows, cols, counts })
    }

    pub fn from_streams(x: &[usize], y: &[usize], kx: usize, ky: usize) -> Result<Self> {
        if x.len() != y.len() {
            return Err(DqError::DimensionMismatch {
                expected: x.len(),
                actual: y.len(),
            });
        }
        let mut j = Self::new(kx, ky);
        for (&a, &b) in x.iter().zip(y) {
            if a >= kx {
                return Err(DqError::CodeOutOfRange { index: a, codes: kx });
            }
            if b >= ky {
                return Err(DqError::CodeOutOfRange { index: b, codes: ky });
            }
            j.counts[a * ky + b] += 1;
        }
        Ok(j)
    }

    pub fn merge(&mut self, other: &JointHistogram) -> Result<()> {
        if (other.rows, other.cols) != (self.rows, self.cols) {
            return Err(DqError::ShapeMismatch {
                expected: vec![self.rows, self.cols],
                actual: vec![other.rows, other.cols],
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn get(&self, x: usize, y: usize) -> u64 {
        self.counts[x * self.cols + y]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::new(self.cols, self.rows);
        for x in 0..self.rows {
            for y in 0..self.cols {
                t.counts[y * self.rows + x] = self.get(x, y);
            }
        }
        t
    }

    /// Row and column marginals.
    pub fn marginals(&self) -> (UsageHistogram, UsageHistogram) {
        let mut rx = vec![0; self.rows];
        let mut cy = vec![0; self.cols];
        for (x, r) in rx.iter_mut().enumerate() {
            for (y, col) in cy.iter_mut().enumerate() {
                let c = self.get(x, y);
                *r += c;
                *col += c;
            }
        }
        (UsageHistogram::from_counts(rx), UsageHistogram::from_counts(cy))
    }

    pub fn mutual_information(&self) -> Result<f64> {
        mutual_information(self)
    }
}

/// Plug-in `I(X;Y) = sum p(x,y) ln(p(x,y) / (p(x) p(y)))`.
///
/// Each term's ratio is formed from integer products, so a joint that is
/// exactly the outer product of its marginals gives exactly zero. Terms are
/// summed in sorted order, which makes the estimate bit-identical under
/// swapping the two streams.
pub fn mutual_information(j: &JointHistogram) -> Result<f64> {
    let n = j.total();
    if n == 0 {
        return Err(DqError::Empty("mutual information of an empty joint histogram"));
    }
    let (mx, my) = j.marginals();
    let mut terms = Vec::new();
    for x in 0..j.rows {
        for y in 0..j.cols {
            let c = j.get(x, y);
            if c == 0 {
                continue;
            }
            let num = c as u128 * n as u128;
            let den = mx.counts[x] as u128 * my.counts[y] as u128;
            let ratio = num as f64 / den as f64;
            terms.push(c as f64 / n as f64 * ratio.ln());
        }
    }
    terms.sort_by(f64::total_cmp);
    Ok(terms.iter().sum())
}

/// Upper-triangular matrix of pairwise mutual information with the
/// per-stream entropies on the diagonal. The lower triangle is not stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiMatrix {
    pub size: usize,
    /// Row-major packed upper triangle including the diagonal.
    packed: Vec<f64>,
}

impl MiMatrix {
    fn index(&self, i: usize, j: usize) -> usize {
        // rows before i hold size, size-1, ..., size-i+1 entries
        i * self.size - i * (i + 1) / 2 + j
    }

    /// `None` below the diagonal.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        (i <= j && j < self.size).then(|| self.packed[self.index(i, j)])
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.size).map(|i| self.packed[self.index(i, i)]).collect()
    }

    /// Mean over `i < j`; zero for a single stream.
    pub fn mean_off_diagonal(&self) -> f64 {
        let vals: Vec<f64> = self.off_diagonal().map(|(_, _, v)| v).collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    pub fn off_diagonal(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.size).flat_map(move |i| ((i + 1)..self.size).map(move |j| (i, j, self.packed[self.index(i, j)])))
    }

    /// Dense rows with `None` below the diagonal, for JSON output.
    pub fn rows(&self) -> Vec<Vec<Option<f64>>> {
        (0..self.size)
            .map(|i| (0..self.size).map(|j| self.get(i, j)).collect())
            .collect()
    }

    /// `book_i,book_j,mi_nats` rows over the stored triangle.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("book_i,book_j,mi_nats\n");
        for i in 0..self.size {
            for j in i..self.size {
                s.push_str(&format!("{i},{j},{}\n", self.packed[self.index(i, j)]));
            }
        }
        s
    }
}

/// Pairwise plug-in MI between `M` aligned streams over `num_codes` symbols.
pub fn pairwise_mi_matrix<S: AsRef<[usize]>>(streams: &[S], num_codes: usize) -> Result<MiMatrix> {
    let first = streams.first().ok_or(DqError::Empty("no code streams"))?.as_ref();
    if first.is_empty() {
        return Err(DqError::Empty("code streams of length zero"));
    }
    for s in streams {
        if s.as_ref().len() != first.len() {
            return Err(DqError::DimensionMismatch {
                expected: first.len(),
                actual: s.as_ref().len(),
            });
        }
    }
    let m = streams.len();
    let mut packed = Vec::with_capacity(m * (m + 1) / 2);
    for i in 0..m {
        for j in i..m {
            let v = if i == j {
                UsageHistogram::from_codes(streams[i].as_ref(), num_codes)?.entropy()?
            } else {
                JointHistogram::from_streams(streams[i].as_ref(), streams[j].as_ref(), num_codes, num_codes)?
                    .mutual_information()?
            };
            packed.push(v);
        }
    }
    Ok(MiMatrix { size: m, packed })
}

/// Code assignments of one sample: `[num_books, positions]` over a spatial
/// grid of shape `spatial`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeGrid {
    pub num_books: usize,
    pub spatial: Vec<usize>,
    pub codes: Vec<usize>,
}

impl CodeGrid {
    pub fn positions(&self) -> usize {
        self.spatial.iter().product()
    }

    pub fn book(&self, b: usize) -> &[usize] {
        let p = self.positions();
        &self.codes[b * p..(b + 1) * p]
    }

    /// Splits a batched result over `samples` equally sized samples. The
    /// result's positions must be ordered sample-major.
    pub fn split_batch(result: &QuantizationResult, samples: usize, spatial: &[usize]) -> Result<Vec<CodeGrid>> {
        let per: usize = spatial.iter().product();
        if per * samples != result.positions {
            return Err(DqError::DimensionMismatch {
                expected: result.positions,
                actual: per * samples,
            });
        }
        Ok((0..samples)
            .map(|s| {
                let mut codes = Vec::with_capacity(per * result.num_books);
                for b in 0..result.num_books {
                    codes.extend_from_slice(&result.book_codes(b)[s * per..(s + 1) * per]);
                }
                CodeGrid {
                    num_books: result.num_books,
                    spatial: spatial.to_vec(),
                    codes,
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyMap {
    pub spatial: Vec<usize>,
    pub values: Vec<f64>,
}

impl EntropyMap {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Per-position entropy of the code distribution across a stream of grids,
/// averaged over the books.
pub fn position_entropy_map(grids: &[CodeGrid], num_codes: usize) -> Result<EntropyMap> {
    let first = grids.first().ok_or(DqError::Empty("no code grids"))?;
    for g in grids {
        if g.spatial != first.spatial || g.num_books != first.num_books {
            return Err(DqError::ShapeMismatch {
                expected: first.spatial.clone(),
                actual: g.spatial.clone(),
            });
        }
    }
    let p = first.positions();
    let mut values = vec![0.0; p];
    for (pos, out) in values.iter_mut().enumerate() {
        let mut acc = 0.0;
        for b in 0..first.num_books {
            let mut h = UsageHistogram::new(num_codes);
            for g in grids {
                h.add(g.book(b)[pos])?;
            }
            acc += h.entropy()?;
        }
        *out = acc / first.num_books as f64;
    }
    Ok(EntropyMap {
        spatial: first.spatial.clone(),
        values,
    })
}

/// Entropy, pairwise MI and entropy map of a quantized sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoReport {
    /// Which sample population the statistics were computed on.
    pub split: String,
    pub num_codes: usize,
    pub per_book_entropy: Vec<f64>,
    pub mi_matrix: MiMatrix,
    pub position_entropy_map: EntropyMap,
    pub mean_entropy: f64,
    pub mean_off_diagonal_mi: f64,
}

impl InfoReport {
    pub fn from_grids(grids: &[CodeGrid], num_codes: usize, split: &str) -> Result<Self> {
        let first = grids.first().ok_or(DqError::Empty("no code grids"))?;
        let streams: Vec<Vec<usize>> = (0..first.num_books)
            .map(|b| grids.iter().flat_map(|g| g.book(b).iter().copied()).collect())
            .collect();
        let mi_matrix = pairwise_mi_matrix(&streams, num_codes)?;
        let per_book_entropy = mi_matrix.diagonal();
        let mean_entropy = per_book_entropy.iter().sum::<f64>() / per_book_entropy.len() as f64;
        Ok(Self {
            split: split.to_string(),
            num_codes,
            mean_off_diagonal_mi: mi_matrix.mean_off_diagonal(),
            per_book_entropy,
            mi_matrix,
            position_entropy_map: position_entropy_map(grids, num_codes)?,
            mean_entropy,
        })
    }
}

/// Quantizes a stream of samples (batched along a new leading axis) and
/// returns per-sample code grids plus the total squared error over real
/// (non-padding) elements.
pub fn assign_stream(q: &DepthwiseQuantizer, tensors: &[NdTensor], batch: usize) -> Result<(Vec<CodeGrid>, f64)> {
    let first = tensors.first().ok_or(DqError::Empty("no tensors"))?;
    let axis = q
        .axis
        .checked_sub(1)
        .ok_or_else(|| DqError::InvalidArgument("stream quantizer axis must skip the batch axis".into()))?;
    let mut spatial: Vec<usize> = first.shape().to_vec();
    spatial.remove(axis);
    let mut grids = Vec::with_capacity(tensors.len());
    let mut sq = 0.0;
    for chunk in tensors.chunks(batch.max(1)) {
        let x = NdTensor::stack(chunk)?;
        let r = q.dq_forward(&x)?;
        sq += r.distances.iter().sum::<f64>();
        grids.extend(CodeGrid::split_batch(&r, chunk.len(), &spatial)?);
    }
    Ok((grids, sq))
}

/// Settings for fitting a quantizer to fixed features without a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosthocConfig {
    /// Decomposition axis within one sample.
    pub axis: usize,
    pub num_books: usize,
    pub num_codes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub epsilon: f64,
    pub dead_code: DeadCodePolicy,
    pub seed: u64,
}

impl Default for PosthocConfig {
    fn default() -> Self {
        Self {
            axis: 0,
            num_books: 1,
            num_codes: 32,
            epochs: 10,
            batch_size: 32,
            gamma: crate::quantizer::DEFAULT_GAMMA,
            epsilon: crate::quantizer::DEFAULT_EPSILON,
            dead_code: DeadCodePolicy::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosthocReport {
    pub axis: usize,
    pub num_books: usize,
    pub num_codes: usize,
    pub code_dim: usize,
    /// Mean squared reconstruction error per real element.
    pub mean_l2: f64,
    /// Mean over books of the code-usage entropy, nats.
    pub mean_entropy: f64,
    pub per_book_entropy: Vec<f64>,
    pub capacity: CapacityReport,
    pub reinitialized_codes: usize,
}

/// Fits a depthwise quantizer to `tensors` by EMA updates alone and
/// reports its reconstruction error and code entropy on the same samples.
pub fn posthoc_density_estimate(
    tensors: &[NdTensor],
    cfg: &PosthocConfig,
) -> Result<(PosthocReport, DepthwiseQuantizer)> {
    let first = tensors.first().ok_or(DqError::Empty("posthoc stream"))?;
    for t in tensors {
        if t.shape() != first.shape() {
            return Err(DqError::ShapeMismatch {
                expected: first.shape().to_vec(),
                actual: t.shape().to_vec(),
            });
        }
    }
    if cfg.axis >= first.rank() {
        return Err(DqError::AxisOutOfRange {
            axis: cfg.axis,
            rank: first.rank(),
        });
    }
    let plan = crate::tensor::AxisDecomposition::plan(first.shape(), cfg.axis, cfg.num_books)?;
    let mut q = DepthwiseQuantizer::new(
        cfg.axis + 1,
        cfg.num_books,
        cfg.num_codes,
        plan.slice_extent,
        cfg.gamma,
        cfg.epsilon,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..tensors.len()).collect();
    let mut step = 0;
    let mut reinitialized = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<NdTensor> = chunk.iter().map(|&i| tensors[i].clone()).collect();
            let x = NdTensor::stack(&batch)?;
            let sv = q.slice_vectors(&x)?;
            if !q.is_initialized() {
                q.init_from(&sv, &mut rng)?;
            }
            let r = q.quantize_slices(&sv)?;
            q.ema_update(&sv, &r)?;
            step += 1;
            if cfg.dead_code.due(step) {
                reinitialized += q.reinit_dead_codes(&sv, &cfg.dead_code, &mut rng)?;
            }
        }
    }
    if !q.is_initialized() {
        // zero epochs: seed from the data so the report is still defined
        let x = NdTensor::stack(&tensors[..tensors.len().min(cfg.batch_size.max(1))])?;
        let sv = q.slice_vectors(&x)?;
        q.init_from(&sv, &mut rng)?;
    }
    let (grids, sq) = assign_stream(&q, tensors, cfg.batch_size)?;
    let elements = tensors.len() * first.len();
    let report = InfoReport::from_grids(&grids, cfg.num_codes, "fit")?;
    Ok((
        PosthocReport {
            axis: cfg.axis,
            num_books: cfg.num_books,
            num_codes: cfg.num_codes,
            code_dim: plan.slice_extent,
            mean_l2: sq / elements as f64,
            mean_entropy: report.mean_entropy,
            per_book_entropy: report.per_book_entropy,
            capacity: capacity(cfg.num_codes, cfg.num_books),
            reinitialized_codes: reinitialized,
        },
        q,
    ))
}

/// Discrete symbol streams for the slices of an already quantized tensor:
/// every distinct sub-vector in a slice gets its own id, in order of first
/// appearance. Returns the streams and the largest alphabet size.
pub fn slice_symbol_streams(quantized: &NdTensor, axis: usize, num_slices: usize) -> Result<(Vec<Vec<usize>>, usize)> {
    use std::collections::HashMap;
    let (slices, _) = crate::tensor::decompose(quantized, axis, num_slices)?;
    let mut streams = Vec::with_capacity(num_slices);
    let mut alphabet = 1;
    for s in &slices {
        let v = crate::tensor::positions_as_vectors(s, axis)?;
        let d = v.shape()[1];
        let mut ids: HashMap<Vec<u64>, usize> = HashMap::new();
        let stream: Vec<usize> = v
            .data()
            .chunks_exact(d)
            .map(|row| {
                let key: Vec<u64> = row.iter().map(|x| x.to_bits()).collect();
                let next = ids.len();
                *ids.entry(key).or_insert(next)
            })
            .collect();
        alphabet = alphabet.max(ids.len());
        streams.push(stream);
    }
    Ok((streams, alphabet))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn entropy_examples() {
        let h = UsageHistogram::from_counts(vec![25, 25, 25, 25]);
        assert!((h.entropy().unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(UsageHistogram::from_counts(vec![100, 0, 0, 0]).entropy().unwrap(), 0.0);
        let h = UsageHistogram::from_counts(vec![50, 50, 0, 0]);
        assert!((h.entropy().unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(UsageHistogram::new(3).entropy(), Err(DqError::Empty(_))));
    }

    #[test]
    fn histogram_merge_is_additive() {
        let mut a = UsageHistogram::from_codes(&[0, 1, 1], 3).unwrap();
        let b = UsageHistogram::from_codes(&[2, 1], 3).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a.counts(), &[1, 3, 1]);
        assert_eq!(a.total(), 5);
        assert!(a.merge(&UsageHistogram::new(2)).is_err());
        assert!(UsageHistogram::from_codes(&[3], 3).is_err());
    }

    #[test]
    fn mutual_information_examples() {
        let indep = JointHistogram::from_counts(2, 2, vec![1, 1, 1, 1]).unwrap();
        assert_eq!(indep.mutual_information().unwrap(), 0.0);
        let diag = JointHistogram::from_counts(2, 2, vec![2, 0, 0, 2]).unwrap();
        assert!((diag.mutual_information().unwrap() - 2f64.ln()).abs() < 1e-12);

        // [[2,1],[1,2]], n=6, marginals 3/6 each:
        // 2 * (2/6) ln((2/6)/(1/4)) + 2 * (1/6) ln((1/6)/(1/4))
        let j = JointHistogram::from_counts(2, 2, vec![2, 1, 1, 2]).unwrap();
        let hand = 2.0 * (2.0 / 6.0) * (4.0f64 / 3.0).ln() + 2.0 * (1.0 / 6.0) * (2.0f64 / 3.0).ln();
        assert!((j.mutual_information().unwrap() - hand).abs() < 1e-15);
        assert!((hand - 0.0566330).abs() < 1e-6);
        assert!(JointHistogram::new(2, 2).mutual_information().is_err());
    }

    #[test]
    fn product_joint_is_exactly_independent() {
        // outer product of [1,2,3] and [2,5]
        let counts = vec![2, 5, 4, 10, 6, 15];
        let j = JointHistogram::from_counts(3, 2, counts).unwrap();
        assert_eq!(j.mutual_information().unwrap(), 0.0);
    }

    #[test]
    fn marginals_match_row_and_column_sums() {
        let j = JointHistogram::from_streams(&[0, 0, 1, 2], &[1, 1, 0, 1], 3, 2).unwrap();
        let (mx, my) = j.marginals();
        assert_eq!(mx.counts(), &[2, 1, 1]);
        assert_eq!(my.counts(), &[1, 3]);
        assert!(JointHistogram::from_streams(&[0], &[0, 1], 2, 2).is_err());
    }

    #[test]
    fn mi_symmetry_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let x: Vec<usize> = (0..500).map(|_| rng.random_range(0..7)).collect();
            let y: Vec<usize> = x.iter().map(|&a| (a * 3 + rng.random_range(0..3)) % 5).collect();
            let j = JointHistogram::from_streams(&x, &y, 7, 5).unwrap();
            let a = j.mutual_information().unwrap();
            let b = JointHistogram::from_streams(&y, &x, 5, 7)
                .unwrap()
                .mutual_information()
                .unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
            assert_eq!(a.to_bits(), j.transpose().mutual_information().unwrap().to_bits());
            let (hx, hy) = j.marginals();
            let bound = hx.entropy().unwrap().min(hy.entropy().unwrap());
            assert!(a >= 0.0 && a <= bound + 1e-12);
        }
    }

    #[test]
    fn duplicated_stream_maximizes_mi() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<usize> = (0..2000).map(|_| rng.random_range(0..8)).collect();
        let noisy: Vec<usize> = x
            .iter()
            .map(|&a| {
                if rng.random_bool(0.3) {
                    rng.random_range(0..8)
                } else {
                    a
                }
            })
            .collect();
        let dup = x.clone();
        let m = pairwise_mi_matrix(&[x.clone(), noisy, dup], 8).unwrap();
        assert!(m.get(0, 2).unwrap() >= m.get(0, 1).unwrap());
        assert_eq!(m.get(0, 2).unwrap(), m.get(0, 0).unwrap());
    }

    #[test]
    fn mi_matrix_layout() {
        let s = vec![0, 1, 2, 3, 0, 1, 2, 3];
        let m = pairwise_mi_matrix(&[s.clone(), s.clone(), s.clone()], 4).unwrap();
        let h = m.get(0, 0).unwrap();
        assert!((h - 4f64.ln()).abs() < 1e-12);
        for (_, _, v) in m.off_diagonal() {
            assert!((v - h).abs() < 1e-12);
        }
        assert_eq!(m.get(2, 1), None);
        assert_eq!(m.rows()[1][0], None);
        assert!(m.to_csv().starts_with("book_i,book_j,mi_nats\n0,0,"));
        assert_eq!(m.to_csv().lines().count(), 1 + 6);

        let single = pairwise_mi_matrix(std::slice::from_ref(&s), 4).unwrap();
        assert_eq!(single.size, 1);
        assert_eq!(single.mean_off_diagonal(), 0.0);
        assert!(pairwise_mi_matrix(&[s.clone(), vec![0, 1]], 4).is_err());
    }

    #[test]
    fn independent_uniform_streams_have_small_mi() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let streams: Vec<Vec<usize>> = (0..4)
            .map(|_| (0..100_000).map(|_| rng.random_range(0..16)).collect())
            .collect();
        let m = pairwise_mi_matrix(&streams, 16).unwrap();
        for (_, _, v) in m.off_diagonal() {
            assert!(v < 0.05, "mi {v}");
        }
    }

    #[test]
    fn entropy_map_examples() {
        let constant: Vec<CodeGrid> = (0..10)
            .map(|_| CodeGrid {
                num_books: 2,
                spatial: vec![2, 2],
                codes: vec![3; 8],
            })
            .collect();
        let map = position_entropy_map(&constant, 4).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k = 8;
        let random: Vec<CodeGrid> = (0..20_000)
            .map(|_| CodeGrid {
                num_books: 2,
                spatial: vec![3],
                codes: (0..6).map(|_| rng.random_range(0..k)).collect(),
            })
            .collect();
        let map = position_entropy_map(&random, k).unwrap();
        for v in map.values {
            assert!((v - (k as f64).ln()).abs() / (k as f64).ln() < 0.02);
        }
        assert!(position_entropy_map(&[], 4).is_err());
    }

    #[test]
    fn posthoc_on_code_rows_is_lossless() {
        // every position vector of every tensor is one of 3 fixed patterns
        let patterns = [[1.0, 2.0], [-1.0, 0.5], [0.0, -3.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tensors: Vec<NdTensor> = (0..40)
            .map(|_| {
                let mut data = vec![0.0; 2 * 4];
                for p in 0..4 {
                    let pat = patterns[rng.random_range(0..3)];
                    data[p] = pat[0];
                    data[4 + p] = pat[1];
                }
                NdTensor::new(vec![2, 4], data).unwrap()
            })
            .collect();
        // with eps = 0 the EMA codes are exact cluster means
        let cfg = PosthocConfig {
            num_codes: 3,
            epochs: 3,
            batch_size: 40,
            epsilon: 0.0,
            ..Default::default()
        };
        let (report, _) = posthoc_density_estimate(&tensors, &cfg).unwrap();
        assert!(report.mean_l2 < 1e-24, "{}", report.mean_l2);
        assert!(report.mean_entropy > 0.9);
        assert!(posthoc_density_estimate(&[], &cfg).is_err());
        let mixed = vec![tensors[0].clone(), NdTensor::zeros(&[2, 5])];
        assert!(matches!(
            posthoc_density_estimate(&mixed, &cfg),
            Err(DqError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn symbol_streams_follow_distinct_subvectors() {
        // [4 channels, 3 positions]; slice 0 = channels 0..2
        let t = NdTensor::new(
            vec![4, 3],
            vec![1.0, 1.0, 2.0, 5.0, 5.0, 6.0, 0.0, 7.0, 0.0, 0.0, 8.0, 0.0],
        )
        .unwrap();
        let (streams, alphabet) = slice_symbol_streams(&t, 0, 2).unwrap();
        assert_eq!(streams[0], vec![0, 0, 1]);
        assert_eq!(streams[1], vec![0, 1, 0]);
        assert_eq!(alphabet, 2);
    }
}
