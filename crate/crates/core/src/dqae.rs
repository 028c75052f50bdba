//! Hierarchical depthwise quantized autoencoder.
//!
//! Level 0 is the bottom of the hierarchy. The encoder halves the spatial
//! extent twice before the bottom level and once more for every level
//! above it, so a `16 x 16` input with two levels has a `4 x 4` bottom grid
//! and a `2 x 2` top grid.
//!
//! Decoding runs top-down. The top level is quantized as is. Every lower
//! level quantizes a `1 x 1` projection of its encoding concatenated with the
//! running decoded stream `d`, and `d` is updated as `D_l(q_l) + up(d)`.
//! Each lower level also contributes `U_l(q_l)`, upsampled to the bottom
//! grid, to the output decoder.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{DqError, Result};
use crate::info::{CodeGrid, UsageHistogram};
use crate::nn::{Binding, Conv2d, ParamId, ParamStore, ResidualUnit};
use crate::optim::{AdamW, AdamWConfig};
use crate::quantizer::{capacity, Codebook, DeadCodePolicy, DepthwiseQuantizer, QuantizationResult, SliceVectors};
use crate::tensor::NdTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReconLoss {
    #[serde(rename = "mse")]
    Mse,
    /// 256-way softmax per channel over 8-bit targets.
    #[serde(rename = "ce-256")]
    Ce256,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DqaeConfig {
    /// Per-sample input shape `[C, H, W]`.
    pub input_shape: Vec<usize>,
    pub num_levels: usize,
    /// Codes per book for every level, listed top to bottom.
    pub num_codes: Vec<usize>,
    pub num_books: usize,
    pub code_dim: usize,
    /// Channel width of the convolutional blocks.
    pub width: usize,
    /// Commitment weight.
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
    /// Update codes by EMA; otherwise they are trained by the codebook term.
    pub ema: bool,
    pub dead_code: DeadCodePolicy,
    pub loss: ReconLoss,
    /// Also feed the upsampled top-level stream to the output decoder.
    pub top_to_output: bool,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for DqaeConfig {
    fn default() -> Self {
        Self {
            input_shape: vec![3, 32, 32],
            num_levels: 2,
            num_codes: vec![256, 128],
            num_books: 1,
            code_dim: 64,
            width: 32,
            beta: 0.25,
            gamma: crate::quantizer::DEFAULT_GAMMA,
            epsilon: crate::quantizer::DEFAULT_EPSILON,
            ema: true,
            dead_code: DeadCodePolicy::default(),
            loss: ReconLoss::Mse,
            top_to_output: false,
            optimizer: AdamWConfig {
                lr: 2e-4,
                ..AdamWConfig::default()
            },
            seed: 0,
        }
    }
}

impl DqaeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DqError::InvalidArgument(m));
        if self.input_shape.len() != 3 || self.input_shape.contains(&0) {
            return bad(format!("input_shape must be [C, H, W], got {:?}", self.input_shape));
        }
        if self.num_levels == 0 {
            return bad("num_levels must be at least 1".into());
        }
        if self.num_codes.len() != self.num_levels {
            return bad(format!(
                "num_codes lists {} levels but num_levels is {}",
                self.num_codes.len(),
                self.num_levels
            ));
        }
        if self.num_codes.contains(&0) || self.num_books == 0 || self.code_dim == 0 || self.width == 0 {
            return bad("num_codes, num_books, code_dim and width must be positive".into());
        }
        let factor = self.downsampling(self.num_levels - 1);
        let (h, w) = (self.input_shape[1], self.input_shape[2]);
        if h % factor != 0 || w % factor != 0 {
            return bad(format!(
                "input extents {h}x{w} are not divisible by {factor} as {} levels require",
                self.num_levels
            ));
        }
        for (name, v) in [
            ("beta", self.beta),
            ("epsilon", self.epsilon),
            ("lr", self.optimizer.lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if self.optimizer.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative".into());
        }
        Ok(())
    }

    /// Width of every quantized latent, `M * D`.
    pub fn latent_channels(&self) -> usize {
        self.num_books * self.code_dim
    }

    /// Spatial reduction factor of level `l`.
    pub fn downsampling(&self, level: usize) -> usize {
        1 << (level + 2)
    }

    /// Spatial grid `[h, w]` of level `l`.
    pub fn level_grid(&self, level: usize) -> [usize; 2] {
        let f = self.downsampling(level);
        [self.input_shape[1] / f, self.input_shape[2] / f]
    }

    /// Codes per book of level `l` (the list is stored top first).
    pub fn level_codes(&self, level: usize) -> usize {
        self.num_codes[self.num_levels - 1 - level]
    }

    pub fn output_channels(&self) -> usize {
        match self.loss {
            ReconLoss::Mse => self.input_shape[0],
            ReconLoss::Ce256 => 256 * self.input_shape[0],
        }
    }

    /// Data dimensions per sample.
    pub fn dims(&self) -> usize {
        self.input_shape.iter().product()
    }
}

/// `log2`-normalized negative log-likelihood.
pub fn bits_per_dim(nll_nats_total: f64, num_dims: usize) -> Result<f64> {
    if num_dims == 0 {
        return Err(DqError::InvalidArgument(
            "bits_per_dim needs at least one dimension".into(),
        ));
    }
    Ok(nll_nats_total / (num_dims as f64 * std::f64::consts::LN_2))
}

#[derive(Debug, Clone)]
struct DownBlock {
    down: Conv2d,
    residual: ResidualUnit,
}

#[derive(Debug, Clone)]
struct Level {
    blocks: Vec<DownBlock>,
    proj: Conv2d,
    cond: Option<Conv2d>,
    decoder: Option<Conv2d>,
    upsampler: Option<Conv2d>,
    codebooks: Vec<ParamId>,
    quantizer: DepthwiseQuantizer,
}

/// A mini-batch: network input `[B, C, H, W]` plus 8-bit targets for the
/// cross-entropy loss.
#[derive(Debug, Clone)]
pub struct Batch {
    pub input: NdTensor,
    pub targets: Option<Vec<u8>>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.input.shape()[0]
    }
}

/// A sample set: real-valued inputs and, for cross-entropy models, the
/// matching 8-bit images.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Vec<NdTensor>,
    pub targets: Option<Vec<Vec<u8>>>,
}

impl Dataset {
    pub fn from_tensors(inputs: Vec<NdTensor>) -> Self {
        Self { inputs, targets: None }
    }

    pub fn from_images(images: Vec<Vec<u8>>, shape: &[usize]) -> Result<Self> {
        let inputs = images
            .iter()
            .map(|im| crate::synth::image_to_tensor(im, shape))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            inputs,
            targets: Some(images),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let items: Vec<NdTensor> = indices.iter().map(|&i| self.inputs[i].clone()).collect();
        Ok(Batch {
            input: NdTensor::stack(&items)?,
            targets: self
                .targets
                .as_ref()
                .map(|t| indices.iter().flat_map(|&i| t[i].iter().copied()).collect()),
        })
    }
}

/// How quantization behaves during a forward pass.
#[derive(Debug, Clone, Default)]
pub enum QuantMode {
    /// Nearest-code assignment; uninitialized codebooks are seeded from the
    /// batch.
    #[default]
    Train,
    /// Nearest-code assignment with initialized codebooks only.
    Eval,
    /// Fixed per-level quantized targets `z_hat` and offsets `z_hat - z`
    /// recorded at a base point; the quantized value is `z + offset`, which
    /// makes the whole forward pass smooth in the parameters.
    Frozen {
        targets: Vec<NdTensor>,
        offsets: Vec<NdTensor>,
    },
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub mode: QuantMode,
    /// Levels whose quantized stream is replaced by zeros.
    pub zero_levels: Vec<usize>,
}

/// Per-level outcome of one forward pass.
#[derive(Debug, Clone)]
pub struct LevelOutput {
    pub z: NdTensor,
    pub quantized: NdTensor,
    pub result: Option<QuantizationResult>,
    pub slices: Option<SliceVectors>,
    pub codebook: f64,
    pub commitment: f64,
}

/// The recorded graph of one forward pass.
pub struct Forward {
    pub graph: Graph,
    pub binding: Binding,
    pub output: NodeId,
    pub reconstruction: NodeId,
    pub loss: NodeId,
    /// Indexed by level, bottom first.
    pub levels: Vec<LevelOutput>,
}

impl Forward {
    pub fn reconstruction_value(&self) -> f64 {
        self.graph.value(self.reconstruction).data()[0]
    }

    pub fn loss_value(&self) -> f64 {
        self.graph.value(self.loss).data()[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub level: usize,
    pub codebook: f64,
    /// Already multiplied by beta.
    pub commitment: f64,
    /// Mean over books of the code-usage entropy in this batch, nats.
    pub entropy: f64,
    pub usage: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub step: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub levels: Vec<LevelMetrics>,
    pub bits_per_dim: Option<f64>,
    pub capacity_nats: f64,
    pub reinitialized_codes: usize,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Mean reconstruction loss per dimension.
    pub reconstruction: f64,
    pub bits_per_dim: Option<f64>,
    /// Per level (bottom first), per sample.
    pub grids: Vec<Vec<CodeGrid>>,
    /// Per level, every sample's quantized latent stacked `[N, M*D, h, w]`.
    pub quantized: Vec<NdTensor>,
}

pub struct Dqae {
    config: DqaeConfig,
    store: ParamStore,
    levels: Vec<Level>,
    head: Vec<Conv2d>,
    optimizer: AdamW,
    rng: ChaCha8Rng,
    step: usize,
}

fn check_finite(value: f64, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(DqError::Divergence {
            what: what.to_string(),
            detail: format!("value is {value}"),
        })
    }
}

impl Dqae {
    pub fn new(config: DqaeConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (c, w, lat, n) = (
            config.input_shape[0],
            config.width,
            config.latent_channels(),
            config.num_levels,
        );
        let mut levels = Vec::with_capacity(n);
        for l in 0..n {
            let mut blocks = Vec::new();
            let count = if l == 0 { 2 } else { 1 };
            for b in 0..count {
                let cin = if l == 0 && b == 0 { c } else { w };
                blocks.push(DownBlock {
                    down: Conv2d::down4(&mut store, &format!("enc{l}.block{b}.down"), cin, w, &mut rng),
                    residual: ResidualUnit::new(&mut store, &format!("enc{l}.block{b}.res"), w, &mut rng),
                });
            }
            let proj = Conv2d::pointwise(&mut store, &format!("enc{l}.proj"), w, lat, &mut rng);
            let top = l == n - 1;
            let cond = (!top).then(|| Conv2d::pointwise(&mut store, &format!("q{l}.cond"), lat + w, lat, &mut rng));
            let decoder = (l > 0).then(|| Conv2d::same3(&mut store, &format!("dec{l}"), lat, w, &mut rng));
            let upsampler = (!top || config.top_to_output || n == 1)
                .then(|| Conv2d::pointwise(&mut store, &format!("up{l}"), lat, w, &mut rng));
            let k = config.level_codes(l);
            let codebooks = if config.ema {
                Vec::new()
            } else {
                (0..config.num_books)
                    .map(|m| store.add(format!("q{l}.book{m}"), NdTensor::zeros(&[k, config.code_dim])))
                    .collect()
            };
            levels.push(Level {
                blocks,
                proj,
                cond,
                decoder,
                upsampler,
                codebooks,
                quantizer: DepthwiseQuantizer::new(
                    1,
                    config.num_books,
                    k,
                    config.code_dim,
                    config.gamma,
                    config.epsilon,
                )?,
            });
        }
        let streams = levels.iter().filter(|l| l.upsampler.is_some()).count();
        let head = vec![
            Conv2d::same3(&mut store, "out.conv0", w * streams, w, &mut rng),
            Conv2d::same3(&mut store, "out.conv1", w, w, &mut rng),
            Conv2d::same3(&mut store, "out.conv2", w, w, &mut rng),
            Conv2d::pointwise(&mut store, "out.proj", w, config.output_channels(), &mut rng),
        ];
        Ok(Self {
            optimizer: AdamW::new(config.optimizer),
            config,
            store,
            levels,
            head,
            rng,
            step: 0,
        })
    }

    pub fn config(&self) -> &DqaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Quantizers bottom first.
    pub fn quantizers(&self) -> Vec<&DepthwiseQuantizer> {
        self.levels.iter().map(|l| &l.quantizer).collect()
    }

    pub fn quantizer_mut(&mut self, level: usize) -> &mut DepthwiseQuantizer {
        &mut self.levels[level].quantizer
    }

    /// Replaces a level's codebooks, e.g. from a checkpoint. Without EMA the
    /// matching code parameters are overwritten too.
    pub fn load_codebooks(&mut self, level: usize, books: Vec<Codebook>) -> Result<()> {
        if level >= self.levels.len() {
            return Err(DqError::InvalidArgument(format!("no level {level}")));
        }
        let (k, m, d) = (
            self.config.level_codes(level),
            self.config.num_books,
            self.config.code_dim,
        );
        if books.len() != m || books.iter().any(|b| b.num_codes() != k || b.dim() != d) {
            return Err(DqError::InvalidArgument(format!(
                "level {level} expects {m} books of {k} codes of dimension {d}"
            )));
        }
        let books = books
            .into_iter()
            .map(|b| b.with_decay(self.config.gamma, self.config.epsilon))
            .collect();
        let lv = &mut self.levels[level];
        lv.quantizer = DepthwiseQuantizer::from_books(1, books)?;
        for (b, &pid) in lv.codebooks.iter().enumerate() {
            self.store
                .get_mut(pid)
                .data_mut()
                .copy_from_slice(lv.quantizer.books()[b].codes());
        }
        Ok(())
    }

    /// Parameter names grouped by role: encoder, quantizer projections,
    /// level decoders, upsamplers, output decoder and (without EMA) codes.
    pub fn parameter_group(name: &str) -> &'static str {
        if name.starts_with("enc") {
            "encoder"
        } else if name.contains(".book") {
            "codebook"
        } else if name.starts_with('q') {
            "quantizer"
        } else if name.starts_with("dec") {
            "decoder"
        } else if name.starts_with("up") {
            "upsampler"
        } else {
            "output"
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let s = batch.input.shape();
        if s.len() != 4 || s[1..] != self.config.input_shape[..] {
            return Err(DqError::ShapeMismatch {
                expected: self.config.input_shape.clone(),
                actual: s.get(1..).unwrap_or(&[]).to_vec(),
            });
        }
        if self.config.loss == ReconLoss::Ce256 && batch.targets.is_none() {
            return Err(DqError::InvalidArgument(
                "cross-entropy model needs 8-bit targets".into(),
            ));
        }
        Ok(())
    }

    /// Encodings of every level, bottom first.
    pub fn encode_stack(&self, g: &mut Graph, bind: &mut Binding, x: NodeId) -> Result<Vec<NodeId>> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            for b in &level.blocks {
                h = b.down.forward(g, bind, &self.store, h)?;
                h = b.residual.forward(g, bind, &self.store, h)?;
            }
            out.push(level.proj.forward(g, bind, &self.store, h)?);
        }
        Ok(out)
    }

    fn upsample_times(g: &mut Graph, mut x: NodeId, times: usize) -> Result<NodeId> {
        for _ in 0..times {
            x = g.upsample2x(x)?;
        }
        Ok(x)
    }

    fn quantize_level(
        &mut self,
        g: &mut Graph,
        bind: &mut Binding,
        l: usize,
        z: NodeId,
        opts: &ForwardOptions,
    ) -> Result<(NodeId, NodeId, NodeId, LevelOutput)> {
        let zv = g.value(z).clone();
        let beta = self.config.beta;
        let (quantized, q, codebook_target, frozen_z, result, slices) = match &opts.mode {
            QuantMode::Frozen { targets, offsets } => {
                let (t, o) = (targets.get(l), offsets.get(l));
                let (t, o) = t
                    .zip(o)
                    .ok_or_else(|| DqError::InvalidArgument(format!("no frozen state for level {l}")))?;
                let off = g.constant(o.clone());
                let q = g.add(z, off)?;
                let tgt = g.constant(t.clone());
                // the codebook term sees the base-point encoding, so its value
                // is constant like its gradient
                let base: Vec<f64> = t.data().iter().zip(o.data()).map(|(a, b)| a - b).collect();
                let base = g.constant(NdTensor::from_parts(t.shape().to_vec(), base)?);
                (t.clone(), q, tgt, Some(base), None, None)
            }
            mode => {
                let level = &mut self.levels[l];
                let sv = level.quantizer.slice_vectors(&zv)?;
                if !level.quantizer.is_initialized() {
                    if matches!(mode, QuantMode::Eval) {
                        return Err(DqError::InvalidArgument(format!(
                            "level {l} codebooks are not initialized"
                        )));
                    }
                    level.quantizer.init_from(&sv, &mut self.rng)?;
                    for (m, &pid) in level.codebooks.iter().enumerate() {
                        let book = &level.quantizer.books()[m];
                        *self.store.get_mut(pid) =
                            NdTensor::new(vec![book.num_codes(), book.dim()], book.codes().to_vec())?;
                    }
                }
                let r = level.quantizer.quantize_slices(&sv)?;
                let zh = r.quantized.clone();
                let q = g.straight_through(z, zh.clone())?;
                let tgt = if self.config.ema {
                    g.constant(zh.clone())
                } else {
                    let books: Vec<NodeId> = level.codebooks.iter().map(|&p| bind.node(g, &self.store, p)).collect();
                    g.code_lookup(&books, &sv.plan, &r.codes)?
                };
                (zh, q, tgt, None, Some(r), Some(sv))
            }
        };
        let sz = frozen_z.unwrap_or_else(|| g.stop_gradient(z));
        let cb = g.mse(sz, codebook_target)?;
        let stgt = g.stop_gradient(codebook_target);
        let commit_raw = g.mse(z, stgt)?;
        let commit = g.scale(commit_raw, beta);
        let q = if opts.zero_levels.contains(&l) {
            g.constant(NdTensor::zeros(g.value(q).shape()))
        } else {
            q
        };
        let out = LevelOutput {
            z: zv,
            quantized,
            result,
            slices,
            codebook: g.value(cb).data()[0],
            commitment: g.value(commit).data()[0],
        };
        Ok((q, cb, commit, out))
    }

    /// Builds the full graph for `batch`.
    pub fn forward(&mut self, batch: &Batch, opts: &ForwardOptions) -> Result<Forward> {
        self.check_batch(batch)?;
        let mut g = Graph::new();
        let mut bind = Binding::new();
        let x = g.constant(batch.input.clone());
        let e_all = self.encode_stack(&mut g, &mut bind, x)?;
        let n = self.levels.len();
        let mut outs: Vec<Option<LevelOutput>> = vec![None; n];
        let mut terms = Vec::with_capacity(2 * n);
        let mut streams = Vec::new();

        let (q_top, cb, cm, o) = self.quantize_level(&mut g, &mut bind, n - 1, e_all[n - 1], opts)?;
        terms.push(cb);
        terms.push(cm);
        outs[n - 1] = Some(o);
        if let Some(u) = self.levels[n - 1].upsampler.clone() {
            let s = u.forward(&mut g, &mut bind, &self.store, q_top)?;
            streams.push(Self::upsample_times(&mut g, s, n - 1)?);
        }
        let mut d = None;
        if let Some(dec) = self.levels[n - 1].decoder.clone() {
            let h = dec.forward(&mut g, &mut bind, &self.store, q_top)?;
            let h = g.relu(h);
            d = Some(g.upsample2x(h)?);
        }
        for l in (0..n - 1).rev() {
            let d_prev = d.expect("levels above the bottom decode");
            let joined = g.concat_channels(e_all[l], d_prev)?;
            let cond = self.levels[l].cond.clone().expect("non-top level has a projection");
            let z = cond.forward(&mut g, &mut bind, &self.store, joined)?;
            let (q, cb, cm, o) = self.quantize_level(&mut g, &mut bind, l, z, opts)?;
            terms.push(cb);
            terms.push(cm);
            outs[l] = Some(o);
            let up = self.levels[l].upsampler.clone().expect("loop levels upsample");
            let s = up.forward(&mut g, &mut bind, &self.store, q)?;
            streams.push(Self::upsample_times(&mut g, s, l)?);
            d = match self.levels[l].decoder.clone() {
                Some(dec) => {
                    let h = dec.forward(&mut g, &mut bind, &self.store, q)?;
                    let h = g.relu(h);
                    let h = g.upsample2x(h)?;
                    let skip = g.upsample2x(d_prev)?;
                    Some(g.add(h, skip)?)
                }
                None => None,
            };
        }

        let mut h = streams[0];
        for &s in &streams[1..] {
            h = g.concat_channels(h, s)?;
        }
        h = self.head[0].forward(&mut g, &mut bind, &self.store, h)?;
        h = g.relu(h);
        for conv in &self.head[1..3] {
            h = g.upsample2x(h)?;
            h = conv.forward(&mut g, &mut bind, &self.store, h)?;
            h = g.relu(h);
        }
        let output = self.head[3].forward(&mut g, &mut bind, &self.store, h)?;
        let reconstruction = match self.config.loss {
            ReconLoss::Mse => {
                let target = g.constant(batch.input.clone());
                g.mse(output, target)?
            }
            ReconLoss::Ce256 => g.cross_entropy_256(output, batch.targets.as_deref().expect("checked"))?,
        };
        let mut loss = reconstruction;
        for t in terms {
            loss = g.add(loss, t)?;
        }
        Ok(Forward {
            graph: g,
            binding: bind,
            output,
            reconstruction,
            loss,
            levels: outs.into_iter().map(|o| o.expect("every level visited")).collect(),
        })
    }

    /// Records the quantized targets and offsets at `batch` for a
    /// [`QuantMode::Frozen`] pass.
    pub fn freeze_at(&mut self, batch: &Batch) -> Result<QuantMode> {
        let fwd = self.forward(
            batch,
            &ForwardOptions {
                mode: QuantMode::Eval,
                zero_levels: vec![],
            },
        )?;
        let mut targets = Vec::new();
        let mut offsets = Vec::new();
        for lv in &fwd.levels {
            let off: Vec<f64> = lv
                .quantized
                .data()
                .iter()
                .zip(lv.z.data())
                .map(|(a, b)| a - b)
                .collect();
            offsets.push(NdTensor::from_parts(lv.z.shape().to_vec(), off)?);
            targets.push(lv.quantized.clone());
        }
        Ok(QuantMode::Frozen { targets, offsets })
    }

    fn metrics(&self, fwd: &Forward, reinit: usize) -> Result<TrainMetrics> {
        let reconstruction = fwd.reconstruction_value();
        check_finite(reconstruction, "reconstruction loss")?;
        let mut levels = Vec::with_capacity(fwd.levels.len());
        let mut capacity_nats = 0.0;
        for (l, lv) in fwd.levels.iter().enumerate() {
            check_finite(lv.codebook, &format!("level {l} codebook term"))?;
            check_finite(lv.commitment, &format!("level {l} commitment term"))?;
            let k = self.config.level_codes(l);
            capacity_nats += capacity(k, self.config.num_books).capacity_nats;
            let mut usage = Vec::new();
            let mut entropy = 0.0;
            if let Some(r) = &lv.result {
                for b in 0..r.num_books {
                    let h = UsageHistogram::from_codes(r.book_codes(b), k)?;
                    entropy += h.entropy()?;
                    usage.push(h.counts().to_vec());
                }
                entropy /= r.num_books as f64;
            }
            levels.push(LevelMetrics {
                level: l,
                codebook: lv.codebook,
                commitment: lv.commitment,
                entropy,
                usage,
            });
        }
        let total = fwd.loss_value();
        check_finite(total, "total loss")?;
        let bits = match self.config.loss {
            ReconLoss::Ce256 => Some(bits_per_dim(reconstruction, 1)?),
            ReconLoss::Mse => None,
        };
        Ok(TrainMetrics {
            step: self.step,
            total,
            reconstruction,
            levels,
            bits_per_dim: bits,
            capacity_nats,
            reinitialized_codes: reinit,
        })
    }

    /// One optimizer step on `batch`, followed by EMA updates and, when
    /// due, dead-code re-seeding of every codebook.
    pub fn train_step(&mut self, batch: &Batch) -> Result<TrainMetrics> {
        let fwd = self.forward(batch, &ForwardOptions::default())?;
        // reject a diverged forward pass before touching any state
        self.metrics(&fwd, 0)?;
        let grads = fwd.graph.backward(fwd.loss)?;
        let pg = fwd.binding.param_grads(&grads);
        self.optimizer.step(&mut self.store, &pg)?;
        self.step += 1;
        let mut reinit = 0;
        let policy = self.config.dead_code;
        for (l, lv) in fwd.levels.iter().enumerate() {
            let (Some(r), Some(sv)) = (&lv.result, &lv.slices) else {
                continue;
            };
            let level = &mut self.levels[l];
            if self.config.ema {
                level.quantizer.ema_update(sv, r)?;
            } else {
                for (m, &pid) in level.codebooks.iter().enumerate() {
                    level.quantizer.books_mut()[m].set_codes(self.store.get(pid).data().to_vec())?;
                }
            }
            if policy.due(self.step) {
                reinit += level.quantizer.reinit_dead_codes(sv, &policy, &mut self.rng)?;
                for (m, &pid) in level.codebooks.iter().enumerate() {
                    let book = &level.quantizer.books()[m];
                    self.store.get_mut(pid).data_mut().copy_from_slice(book.codes());
                }
            }
        }
        let mut m = self.metrics(&fwd, reinit)?;
        m.step = self.step;
        Ok(m)
    }

    /// Trains for `steps` mini-batches drawn by reshuffling `data` each
    /// epoch with a generator seeded by `shuffle_seed`.
    pub fn fit(
        &mut self,
        data: &Dataset,
        steps: usize,
        batch_size: usize,
        shuffle_seed: u64,
    ) -> Result<Vec<TrainMetrics>> {
        self.fit_with(data, steps, batch_size, shuffle_seed, |_| {})
    }

    /// As [`Dqae::fit`], calling `on_step` after every step.
    pub fn fit_with(
        &mut self,
        data: &Dataset,
        steps: usize,
        batch_size: usize,
        shuffle_seed: u64,
        mut on_step: impl FnMut(&TrainMetrics),
    ) -> Result<Vec<TrainMetrics>> {
        if data.is_empty() {
            return Err(DqError::Empty("training set"));
        }
        let bs = batch_size.clamp(1, data.len());
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut cursor = data.len();
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            if cursor + bs > data.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let batch = data.batch(&order[cursor..cursor + bs])?;
            cursor += bs;
            let m = self.train_step(&batch)?;
            on_step(&m);
            out.push(m);
        }
        Ok(out)
    }

    /// Reconstruction loss and code assignments over `data` without any
    /// state change. `zero_levels` replaces those levels' streams by zeros.
    pub fn evaluate(&mut self, data: &Dataset, batch_size: usize, zero_levels: &[usize]) -> Result<EvalReport> {
        if data.is_empty() {
            return Err(DqError::Empty("evaluation set"));
        }
        let n = self.levels.len();
        let mut grids: Vec<Vec<CodeGrid>> = vec![Vec::new(); n];
        let mut quantized: Vec<Vec<f64>> = vec![Vec::new(); n];
        let mut shapes: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut total = 0.0;
        let idx: Vec<usize> = (0..data.len()).collect();
        let opts = ForwardOptions {
            mode: QuantMode::Eval,
            zero_levels: zero_levels.to_vec(),
        };
        for chunk in idx.chunks(batch_size.max(1)) {
            let batch = data.batch(chunk)?;
            let fwd = self.forward(&batch, &opts)?;
            total += fwd.reconstruction_value() * chunk.len() as f64;
            for (l, lv) in fwd.levels.iter().enumerate() {
                let r = lv.result.as_ref().expect("eval mode assigns codes");
                let grid = self.config.level_grid(l);
                grids[l].extend(CodeGrid::split_batch(r, chunk.len(), &grid)?);
                quantized[l].extend_from_slice(lv.quantized.data());
                shapes[l] = lv.quantized.shape()[1..].to_vec();
            }
        }
        let reconstruction = total / data.len() as f64;
        let bits = match self.config.loss {
            ReconLoss::Ce256 => Some(bits_per_dim(reconstruction, 1)?),
            ReconLoss::Mse => None,
        };
        let quantized = quantized
            .into_iter()
            .zip(shapes)
            .map(|(q, s)| {
                let mut shape = vec![data.len()];
                shape.extend(s);
                NdTensor::from_parts(shape, q)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalReport {
            reconstruction,
            bits_per_dim: bits,
            grids,
            quantized,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_images, generate_synthetic, SyntheticSpec};

    fn small(levels: usize, loss: ReconLoss) -> DqaeConfig {
        DqaeConfig {
            input_shape: vec![2, 16, 16],
            num_levels: levels,
            num_codes: vec![8; levels],
            num_books: 2,
            code_dim: 3,
            width: 4,
            loss,
            optimizer: AdamWConfig {
                lr: 2e-3,
                ..AdamWConfig::default()
            },
            ..DqaeConfig::default()
        }
    }

    fn data(count: usize, seed: u64) -> Dataset {
        let spec = SyntheticSpec {
            shape: vec![2, 16, 16],
            channel_redundancy: 0.5,
            correlation_length: 2.0,
            noise: 0.1,
            count,
            rectify: false,
        };
        Dataset::from_tensors(generate_synthetic(&spec, seed).unwrap())
    }

    #[test]
    fn bits_per_dim_examples() {
        assert!((bits_per_dim(std::f64::consts::LN_2, 1).unwrap() - 1.0).abs() < 1e-15);
        assert!((bits_per_dim(256f64.ln(), 1).unwrap() - 8.0).abs() < 1e-12);
        assert!(bits_per_dim(1.0, 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(small(2, ReconLoss::Mse).validate().is_ok());
        let mut c = small(2, ReconLoss::Mse);
        c.num_codes = vec![8];
        assert!(c.validate().is_err());
        let mut c = small(2, ReconLoss::Mse);
        c.input_shape = vec![2, 12, 12];
        assert!(c.validate().unwrap_err().to_string().contains("divisible by 8"));
        let mut c = small(1, ReconLoss::Mse);
        c.input_shape = vec![2, 12, 12];
        assert!(c.validate().is_ok());
    }

    #[test]
    fn level_shapes_follow_stride_arithmetic() {
        let mut m = Dqae::new(small(2, ReconLoss::Mse)).unwrap();
        let b = data(3, 0).batch(&[0, 1, 2]).unwrap();
        let f = m.forward(&b, &ForwardOptions::default()).unwrap();
        assert_eq!(f.levels[0].z.shape(), &[3, 6, 4, 4]);
        assert_eq!(f.levels[1].z.shape(), &[3, 6, 2, 2]);
        assert_eq!(f.graph.value(f.output).shape(), &[3, 2, 16, 16]);
        assert_eq!(m.config().level_grid(1), [2, 2]);

        let mut m = Dqae::new(small(1, ReconLoss::Mse)).unwrap();
        let f = m.forward(&b, &ForwardOptions::default()).unwrap();
        assert_eq!(f.levels.len(), 1);
        assert_eq!(f.levels[0].z.shape(), &[3, 6, 4, 4]);
        assert_eq!(f.graph.value(f.output).shape(), &[3, 2, 16, 16]);

        let mut m = Dqae::new(small(3, ReconLoss::Mse)).unwrap();
        let f = m.forward(&b, &ForwardOptions::default()).unwrap();
        let grids: Vec<&[usize]> = f.levels.iter().map(|l| &l.z.shape()[2..]).collect();
        assert_eq!(grids, vec![&[4, 4][..], &[2, 2][..], &[1, 1][..]]);
    }

    #[test]
    fn total_is_the_sum_of_its_terms() {
        let mut m = Dqae::new(small(2, ReconLoss::Mse)).unwrap();
        let d = data(8, 1);
        for s in m.fit(&d, 5, 4, 0).unwrap() {
            let sum = s.reconstruction + s.levels.iter().map(|l| l.codebook + l.commitment).sum::<f64>();
            assert!((s.total - sum).abs() <= 1e-12 * s.total.abs());
            assert!(s.levels.iter().all(|l| l.commitment >= 0.0));
            assert!(s.bits_per_dim.is_none());
        }
    }

    #[test]
    fn frozen_pass_matches_eval_and_holds_codebook_term() {
        let mut m = Dqae::new(small(2, ReconLoss::Mse)).unwrap();
        let b = data(4, 6).batch(&[0, 1, 2, 3]).unwrap();
        let eval = m.forward(&b, &ForwardOptions::default()).unwrap();
        let mode = m.freeze_at(&b).unwrap();
        let opts = ForwardOptions {
            mode,
            zero_levels: vec![],
        };
        let base = m.forward(&b, &opts).unwrap();
        assert!((base.loss_value() - eval.loss_value()).abs() < 1e-12);
        let id = m
            .params()
            .ids()
            .find(|&i| m.params().name(i).starts_with("enc0"))
            .unwrap();
        m.params_mut().get_mut(id).data_mut()[0] += 0.05;
        let moved = m.forward(&b, &opts).unwrap();
        for (x, y) in base.levels.iter().zip(&moved.levels) {
            assert_eq!(x.codebook, y.codebook);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut m = Dqae::new(small(2, ReconLoss::Mse)).unwrap();
            m.fit(&data(8, 2), 6, 4, 3).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn every_parameter_group_receives_gradient() {
        for ema in [true, false] {
            let mut cfg = small(2, ReconLoss::Mse);
            cfg.ema = ema;
            let mut m = Dqae::new(cfg).unwrap();
            let b = data(4, 3).batch(&[0, 1, 2, 3]).unwrap();
            let f = m.forward(&b, &ForwardOptions::default()).unwrap();
            let grads = f.graph.backward(f.loss).unwrap();
            let pg = f.binding.param_grads(&grads);
            let mut seen = std::collections::BTreeMap::new();
            for (id, g) in &pg {
                let group = Dqae::parameter_group(m.params().name(*id));
                let nz = g.data().iter().any(|v| *v != 0.0);
                *seen.entry(group).or_insert(false) |= nz;
            }
            let expected: &[&str] = if ema {
                &["decoder", "encoder", "output", "quantizer", "upsampler"]
            } else {
                &["codebook", "decoder", "encoder", "output", "quantizer", "upsampler"]
            };
            assert_eq!(seen.keys().copied().collect::<Vec<_>>(), expected);
            assert!(seen.values().all(|&v| v), "{seen:?}");
            assert_eq!(pg.len(), m.params().len());
        }
    }

    #[test]
    fn non_ema_codes_follow_the_optimizer() {
        let mut cfg = small(1, ReconLoss::Mse);
        cfg.ema = false;
        let mut m = Dqae::new(cfg).unwrap();
        let d = data(8, 4);
        m.fit(&d, 1, 4, 0).unwrap();
        let before = m.quantizers()[0].books()[0].codes().to_vec();
        m.fit(&d, 3, 4, 1).unwrap();
        let after = m.quantizers()[0].books()[0].codes().to_vec();
        assert_ne!(before, after);
        let pid = m.params().find("q0.book0").unwrap();
        assert_eq!(m.params().get(pid).data(), &after[..]);
    }

    #[test]
    fn cross_entropy_model_reports_bits() {
        let spec = SyntheticSpec {
            shape: vec![1, 8, 8],
            channel_redundancy: 0.0,
            correlation_length: 1.0,
            noise: 0.0,
            count: 4,
            rectify: false,
        };
        let d = Dataset::from_images(generate_images(&spec, 0).unwrap(), &[1, 8, 8]).unwrap();
        let cfg = DqaeConfig {
            input_shape: vec![1, 8, 8],
            loss: ReconLoss::Ce256,
            ..small(1, ReconLoss::Ce256)
        };
        let mut m = Dqae::new(cfg).unwrap();
        let s = m.fit(&d, 2, 4, 0).unwrap();
        let b = s[0].bits_per_dim.unwrap();
        assert!((b - s[0].reconstruction / std::f64::consts::LN_2).abs() < 1e-12);
        assert!(b > 6.0 && b < 10.0, "bits {b}");
        let e = m.evaluate(&d, 2, &[]).unwrap();
        assert!(e.bits_per_dim.is_some());
        assert_eq!(e.grids[0].len(), 4);
    }

    #[test]
    fn eval_requires_initialized_codebooks() {
        let mut m = Dqae::new(small(2, ReconLoss::Mse)).unwrap();
        assert!(m.evaluate(&data(2, 0), 2, &[]).is_err());
    }

    #[test]
    fn zeroing_a_level_changes_the_output() {
        let mut m = Dqae::new(small(2, ReconLoss::Mse)).unwrap();
        let d = data(4, 5);
        m.fit(&d, 2, 4, 0).unwrap();
        let full = m.evaluate(&d, 4, &[]).unwrap();
        let top = m.evaluate(&d, 4, &[1]).unwrap();
        let bottom = m.evaluate(&d, 4, &[0]).unwrap();
        assert_ne!(full.reconstruction, top.reconstruction);
        assert_ne!(full.reconstruction, bottom.reconstruction);
        // zeroing the bottom stream leaves its codes untouched
        assert_eq!(full.grids[0], bottom.grids[0]);
    }
}
