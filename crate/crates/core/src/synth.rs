//! Synthetic feature tensors with controlled channel redundancy.
//!
//! Each sample is `[C, H, W]`. A set of base channels are independent
//! Gaussian random fields (white noise blurred by a Gaussian of width
//! `correlation_length`, scaled to unit variance); the remaining channels are
//! copies of base channels plus independent noise. With `rectify` set, all
//! values are clamped at zero afterwards.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DqError, Result};
use crate::tensor::NdTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    /// Per-sample shape `[C, H, W]`.
    pub shape: Vec<usize>,
    /// Fraction of channels generated as noisy copies of base channels.
    pub channel_redundancy: f64,
    /// Standard deviation, in pixels, of the spatial smoothing kernel.
    pub correlation_length: f64,
    /// Standard deviation of the noise added to copied channels.
    pub noise: f64,
    pub count: usize,
    /// Clamp every value at zero, mimicking post-activation features.
    pub rectify: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            shape: vec![16, 16, 16],
            channel_redundancy: 0.9,
            correlation_length: 1.0,
            noise: 0.1,
            count: 256,
            rectify: false,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.len() != 3 || self.shape.contains(&0) {
            return Err(DqError::InvalidArgument(format!(
                "synthetic shape must be [C, H, W] with positive extents, got {:?}",
                self.shape
            )));
        }
        if !(0.0..=1.0).contains(&self.channel_redundancy) {
            return Err(DqError::InvalidArgument(format!(
                "channel_redundancy {} outside [0, 1]",
                self.channel_redundancy
            )));
        }
        if !(self.correlation_length >= 0.0 && self.correlation_length.is_finite()) {
            return Err(DqError::InvalidArgument(format!(
                "correlation_length {} must be finite and non-negative",
                self.correlation_length
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(DqError::InvalidArgument(format!(
                "noise {} must be finite and non-negative",
                self.noise
            )));
        }
        if self.count == 0 {
            return Err(DqError::InvalidArgument("count must be positive".into()));
        }
        Ok(())
    }

    /// Number of copied channels; at least one channel is always a base.
    pub fn redundant_channels(&self) -> usize {
        let c = self.shape[0];
        ((self.channel_redundancy * c as f64).round() as usize).min(c - 1)
    }

    /// Source channel of every channel (base channels map to themselves).
    pub fn channel_sources(&self) -> Vec<usize> {
        let c = self.shape[0];
        let base = c - self.redundant_channels();
        (0..c).map(|j| if j < base { j } else { (j - base) % base }).collect()
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// One unit-variance field of shape `[h, w]`, smoothed without boundary
/// effects by drawing noise on a margin and keeping the valid region.
fn random_field<R: Rng + ?Sized>(h: usize, w: usize, kernel: &[f64], rng: &mut R) -> Vec<f64> {
    let r = kernel.len() / 2;
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let noise: Vec<f64> = (0..ph * pw).map(|_| rng.sample(StandardNormal)).collect();
    let mut rows = vec![0.0; ph * w];
    for y in 0..ph {
        for x in 0..w {
            rows[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * noise[y * pw + x + k])
                .sum();
        }
    }
    let norm = kernel.iter().map(|k| k * k).sum::<f64>();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let v: f64 = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * rows[(y + k) * w + x])
                .sum();
            out[y * w + x] = v / norm;
        }
    }
    out
}

/// Deterministic sample stream for `spec` under `seed`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Vec<NdTensor>> {
    spec.validate()?;
    let (c, h, w) = (spec.shape[0], spec.shape[1], spec.shape[2]);
    let sources = spec.channel_sources();
    let base = c - spec.redundant_channels();
    let kernel = gaussian_kernel(spec.correlation_length);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let fields: Vec<Vec<f64>> = (0..base).map(|_| random_field(h, w, &kernel, &mut rng)).collect();
        let mut data = Vec::with_capacity(c * h * w);
        for (j, &src) in sources.iter().enumerate() {
            if j < base {
                data.extend_from_slice(&fields[j]);
            } else {
                for &v in &fields[src] {
                    let n: f64 = if spec.noise > 0.0 {
                        rng.sample(StandardNormal)
                    } else {
                        0.0
                    };
                    data.push(v + spec.noise * n);
                }
            }
        }
        if spec.rectify {
            data.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        out.push(NdTensor::from_parts(spec.shape.clone(), data)?);
    }
    Ok(out)
}

/// 8-bit images from the synthetic fields, see [`tensor_to_image`].
pub fn generate_images(spec: &SyntheticSpec, seed: u64) -> Result<Vec<Vec<u8>>> {
    Ok(generate_synthetic(spec, seed)?.iter().map(tensor_to_image).collect())
}

/// Maps each value `v` to `round(255 * clamp(0.5 + 0.2 v))`.
pub fn tensor_to_image(t: &NdTensor) -> Vec<u8> {
    t.data()
        .iter()
        .map(|v| (255.0 * (0.5 + 0.2 * v).clamp(0.0, 1.0)).round() as u8)
        .collect()
}

/// Network input for an 8-bit image: values scaled to `[-0.5, 0.5]`.
pub fn image_to_tensor(pixels: &[u8], shape: &[usize]) -> Result<NdTensor> {
    NdTensor::new(shape.to_vec(), pixels.iter().map(|&p| p as f64 / 255.0 - 0.5).collect())
}

/// Pearson correlation of every channel pair across samples and positions.
/// Returns the `C x C` matrix row-major.
pub fn channel_correlations(samples: &[NdTensor]) -> Result<Vec<f64>> {
    let first = samples.first().ok_or(DqError::Empty("samples"))?;
    let c = first.shape()[0];
    let per = first.len() / c;
    let mut mean = vec![0.0; c];
    let n = (samples.len() * per) as f64;
    for s in samples {
        if s.shape() != first.shape() {
            return Err(DqError::ShapeMismatch {
                expected: first.shape().to_vec(),
                actual: s.shape().to_vec(),
            });
        }
        for (j, m) in mean.iter_mut().enumerate() {
            *m += s.data()[j * per..(j + 1) * per].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![0.0; c * c];
    for s in samples {
        let d = s.data();
        for i in 0..c {
            for j in i..c {
                let mut acc = 0.0;
                for p in 0..per {
                    acc += (d[i * per + p] - mean[i]) * (d[j * per + p] - mean[j]);
                }
                cov[i * c + j] += acc;
            }
        }
    }
    let mut r = vec![0.0; c * c];
    for i in 0..c {
        for j in i..c {
            let denom = (cov[i * c + i] * cov[j * c + j]).sqrt();
            let v = if denom > 0.0 { cov[i * c + j] / denom } else { 0.0 };
            r[i * c + j] = v;
            r[j * c + i] = v;
        }
    }
    Ok(r)
}

/// Mean absolute off-diagonal channel correlation.
pub fn mean_abs_cross_correlation(samples: &[NdTensor]) -> Result<f64> {
    let r = channel_correlations(samples)?;
    let c = (r.len() as f64).sqrt() as usize;
    if c < 2 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for i in 0..c {
        for j in 0..c {
            if i != j {
                acc += r[i * c + j].abs();
            }
        }
    }
    Ok(acc / (c * (c - 1)) as f64)
}

/// Checks that redundancy levels 0, 0.5 and 0.9 of `spec` yield strictly
/// increasing mean cross-channel correlation. Returns the three values.
pub fn redundancy_self_test(spec: &SyntheticSpec, seed: u64) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for (slot, rho) in out.iter_mut().zip([0.0, 0.5, 0.9]) {
        let s = SyntheticSpec {
            channel_redundancy: rho,
            ..spec.clone()
        };
        *slot = mean_abs_cross_correlation(&generate_synthetic(&s, seed)?)?;
    }
    if !(out[0] < out[1] && out[1] < out[2]) {
        return Err(DqError::InvalidArgument(format!(
            "redundancy does not separate cross-channel correlation: {out:?}"
        )));
    }
    Ok(out)
}
