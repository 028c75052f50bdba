//! The experiment workflows behind each subcommand.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use dq_core::dqae::{Dataset, Dqae, ReconLoss, TrainMetrics};
use dq_core::format::{decode_codebooks, encode_codebooks, encode_params, restore_params, save_tensor, Dtype};
use dq_core::info::{posthoc_density_estimate, InfoReport, PosthocConfig as CorePosthoc};
use dq_core::quantizer::capacity;
use dq_core::synth::{generate_synthetic, mean_abs_cross_correlation, redundancy_self_test, tensor_to_image};
use dq_core::NdTensor;
use serde::Serialize;
use serde_json::json;

use crate::config::{DataSource, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::import::import_tensors;
use crate::report::{mean, median, write_file, Output};

/// Every sample the configuration describes: `count + extra` synthetic
/// samples under `seed`, or all matching files.
pub fn load_samples(cfg: &ExperimentConfig, seed: u64, extra: usize) -> CliResult<Vec<NdTensor>> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let mut spec = cfg.data.synthetic.clone();
            spec.count += extra;
            Ok(generate_synthetic(&spec, seed)?)
        }
        DataSource::Files => import_tensors(cfg.data.files.as_deref().unwrap_or_default()),
    }
}

/// Train and test sets for the autoencoder. The last `test_count` samples
/// are held out.
pub fn load_datasets(cfg: &ExperimentConfig, seed: u64) -> CliResult<(Dataset, Dataset, Vec<usize>)> {
    let mut samples = load_samples(cfg, seed, cfg.data.test_count)?;
    if samples.len() <= cfg.data.test_count {
        return Err(CliError::Config(format!(
            "{} samples leave nothing to train on after holding out data.test_count = {}",
            samples.len(),
            cfg.data.test_count
        )));
    }
    let shape = samples[0].shape().to_vec();
    if shape.len() != 3 {
        return Err(CliError::Config(format!(
            "autoencoder samples must be [C, H, W], got {shape:?}"
        )));
    }
    let test = samples.split_off(samples.len() - cfg.data.test_count);
    let wrap = |s: Vec<NdTensor>| -> CliResult<Dataset> {
        Ok(match cfg.model.loss {
            ReconLoss::Mse => Dataset::from_tensors(s),
            ReconLoss::Ce256 => Dataset::from_images(s.iter().map(tensor_to_image).collect(), &shape)?,
        })
    };
    Ok((wrap(samples)?, wrap(test)?, shape))
}

#[derive(Debug, Serialize)]
struct CapacityRow {
    num_codes: usize,
    num_books: usize,
    cost: usize,
    capacity_nats: f64,
}

pub fn capacity_cmd(cfg: &ExperimentConfig, out: &Output) -> CliResult<()> {
    let mut rows = Vec::new();
    for &k in &cfg.capacity.num_codes {
        for &m in &cfg.capacity.num_books {
            let r = capacity(k, m);
            rows.push(CapacityRow {
                num_codes: k,
                num_books: m,
                cost: r.cost,
                capacity_nats: r.capacity_nats,
            });
        }
    }
    out.write_csv("capacity.csv", &rows)?;
    out.summary("capacity", cfg.seed, json!({ "rows": rows }))
}

#[derive(Debug, Serialize)]
struct PosthocRow {
    axis: usize,
    num_codes: usize,
    num_books: usize,
    code_dim: usize,
    seed: u64,
    mean_l2: f64,
    mean_entropy: f64,
    capacity_nats: f64,
    reinitialized_codes: usize,
}

#[derive(Debug, Serialize)]
struct PosthocAggregate {
    axis: usize,
    num_codes: usize,
    num_books: usize,
    runs: usize,
    median_l2: f64,
    mean_l2: f64,
    median_entropy: f64,
    mean_entropy: f64,
}

pub fn posthoc_cmd(cfg: &ExperimentConfig, out: &Output) -> CliResult<()> {
    let p = &cfg.posthoc;
    let books = out.subdir("codebooks")?;
    let mut rows = Vec::new();
    for i in 0..p.seeds {
        let seed = cfg.seed + i as u64;
        let samples = load_samples(cfg, seed, 0)?;
        for &axis in &p.axes {
            for &k in &cfg.quantizer.num_codes {
                let run = CorePosthoc {
                    axis,
                    num_books: cfg.quantizer.num_books,
                    num_codes: k,
                    epochs: p.epochs,
                    batch_size: p.batch_size,
                    gamma: cfg.quantizer.gamma,
                    epsilon: cfg.quantizer.epsilon,
                    dead_code: cfg.dead_code(),
                    seed,
                };
                let (r, q) = posthoc_density_estimate(&samples, &run)?;
                if i == 0 {
                    let bytes = encode_codebooks(q.books(), Dtype::F64)?;
                    write_file(&books.join(format!("axis{axis}_K{k}.dqc")), &bytes)?;
                }
                rows.push(PosthocRow {
                    axis,
                    num_codes: k,
                    num_books: r.num_books,
                    code_dim: r.code_dim,
                    seed,
                    mean_l2: r.mean_l2,
                    mean_entropy: r.mean_entropy,
                    capacity_nats: r.capacity.capacity_nats,
                    reinitialized_codes: r.reinitialized_codes,
                });
            }
        }
        eprintln!("posthoc: seed {seed} done");
    }
    let mut agg = Vec::new();
    for &axis in &p.axes {
        for &k in &cfg.quantizer.num_codes {
            let sel: Vec<&PosthocRow> = rows.iter().filter(|r| r.axis == axis && r.num_codes == k).collect();
            let l2: Vec<f64> = sel.iter().map(|r| r.mean_l2).collect();
            let h: Vec<f64> = sel.iter().map(|r| r.mean_entropy).collect();
            agg.push(PosthocAggregate {
                axis,
                num_codes: k,
                num_books: cfg.quantizer.num_books,
                runs: sel.len(),
                median_l2: median(&l2),
                mean_l2: mean(&l2),
                median_entropy: median(&h),
                mean_entropy: mean(&h),
            });
        }
    }
    out.write_csv("posthoc.csv", &rows)?;
    out.write_csv("posthoc_summary.csv", &agg)?;
    out.summary("posthoc", cfg.seed, json!({ "aggregate": agg, "runs": rows }))
}

#[derive(Debug, Serialize)]
struct StepRecord {
    step: usize,
    total: f64,
    reconstruction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    bits_per_dim: Option<f64>,
    entropy: Vec<f64>,
    commitment: Vec<f64>,
    codebook: Vec<f64>,
    reinitialized_codes: usize,
}

impl From<&TrainMetrics> for StepRecord {
    fn from(m: &TrainMetrics) -> Self {
        Self {
            step: m.step,
            total: m.total,
            reconstruction: m.reconstruction,
            bits_per_dim: m.bits_per_dim,
            entropy: m.levels.iter().map(|l| l.entropy).collect(),
            commitment: m.levels.iter().map(|l| l.commitment).collect(),
            codebook: m.levels.iter().map(|l| l.codebook).collect(),
            reinitialized_codes: m.reinitialized_codes,
        }
    }
}

/// Builds and trains a model. Step records go to `log` when given.
fn train_model(
    cfg: &ExperimentConfig,
    seed: u64,
    train: &Dataset,
    shape: &[usize],
    mut log: Option<&mut crate::report::JsonLines>,
) -> CliResult<(Dqae, Option<TrainMetrics>)> {
    let mut model = Dqae::new(cfg.dqae(shape, seed)?)?;
    let steps = cfg.train.steps;
    let every = cfg.train.log_every;
    let mut sink_err = None;
    let history = model.fit_with(train, steps, cfg.train.batch_size, seed, |m| {
        if let Some(log) = log.as_deref_mut() {
            if (m.step % every == 0 || m.step == steps) && sink_err.is_none() {
                sink_err = log.push(&StepRecord::from(m)).err();
            }
        }
    })?;
    if let Some(e) = sink_err {
        return Err(e);
    }
    Ok((model, history.last().cloned()))
}

fn save_checkpoint(model: &Dqae, dir: &Path) -> CliResult<()> {
    write_file(&dir.join("params.dqp"), &encode_params(model.params(), Dtype::F64)?)?;
    for (l, q) in model.quantizers().iter().enumerate() {
        if q.is_initialized() {
            write_file(
                &dir.join(format!("level{l}.dqc")),
                &encode_codebooks(q.books(), Dtype::F64)?,
            )?;
        }
    }
    Ok(())
}

fn load_checkpoint(model: &mut Dqae, dir: &Path) -> CliResult<()> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| CliError::io(p, e));
    restore_params(model.params_mut(), &read(&dir.join("params.dqp"))?)?;
    for l in 0..model.config().num_levels {
        let books = decode_codebooks(&read(&dir.join(format!("level{l}.dqc")))?)?;
        model.load_codebooks(l, books)?;
    }
    Ok(())
}

pub fn train_cmd(cfg: &ExperimentConfig, out: &Output) -> CliResult<()> {
    let (train, test, shape) = load_datasets(cfg, cfg.seed)?;
    let mut log = out.jsonl("metrics.jsonl")?;
    let (mut model, last) = train_model(cfg, cfg.seed, &train, &shape, Some(&mut log))?;
    log.finish()?;
    save_checkpoint(&model, &out.subdir("checkpoint")?)?;
    let eval = model.evaluate(&test, cfg.train.batch_size, &[])?;
    let levels: Vec<_> = (0..model.config().num_levels)
        .map(|l| {
            let k = model.config().level_codes(l);
            let info = InfoReport::from_grids(&eval.grids[l], k, "test")?;
            Ok(json!({
                "level": l,
                "num_codes": k,
                "capacity_nats": capacity(k, cfg.quantizer.num_books).capacity_nats,
                "mean_entropy": info.mean_entropy,
                "position_entropy_mean": info.position_entropy_map.mean(),
            }))
        })
        .collect::<CliResult<_>>()?;
    out.summary(
        "train",
        cfg.seed,
        json!({
            "steps": model.steps(),
            "final_train_loss": last.as_ref().map(|m| m.total),
            "final_train_reconstruction": last.as_ref().map(|m| m.reconstruction),
            "test_reconstruction": eval.reconstruction,
            "test_bits_per_dim": eval.bits_per_dim,
            "levels": levels,
        }),
    )
}

#[derive(Debug, Serialize)]
struct InfoRow {
    level: usize,
    num_codes: usize,
    num_books: usize,
    mean_entropy: f64,
    position_entropy_mean: f64,
    mean_off_diagonal_mi: f64,
    capacity_nats: f64,
}

#[derive(Debug, Serialize)]
struct EntropyCell {
    level: usize,
    row: usize,
    col: usize,
    entropy: f64,
}

#[derive(Debug, Serialize)]
struct ZeroingRow {
    zeroed_level: String,
    reconstruction: f64,
    bits_per_dim: Option<f64>,
}

pub fn analyze_cmd(cfg: &ExperimentConfig, out: &Output, checkpoint: Option<&Path>) -> CliResult<()> {
    let (train, test, shape) = load_datasets(cfg, cfg.seed)?;
    let mut model = match checkpoint {
        Some(dir) => {
            let mut m = Dqae::new(cfg.dqae(&shape, cfg.seed)?)?;
            load_checkpoint(&mut m, dir)?;
            m
        }
        None => train_model(cfg, cfg.seed, &train, &shape, None)?.0,
    };
    let n = model.config().num_levels;
    let bs = cfg.train.batch_size;
    let base = model.evaluate(&test, bs, &[])?;
    let mut info_rows = Vec::new();
    let mut cells = Vec::new();
    for l in 0..n {
        let k = model.config().level_codes(l);
        let info = InfoReport::from_grids(&base.grids[l], k, "test")?;
        out.write(&format!("mi_level{l}.csv"), info.mi_matrix.to_csv())?;
        let map = &info.position_entropy_map;
        let cols = map.spatial[1];
        for (i, &h) in map.values.iter().enumerate() {
            cells.push(EntropyCell {
                level: l,
                row: i / cols,
                col: i % cols,
                entropy: h,
            });
        }
        info_rows.push(InfoRow {
            level: l,
            num_codes: k,
            num_books: cfg.quantizer.num_books,
            mean_entropy: info.mean_entropy,
            position_entropy_mean: map.mean(),
            mean_off_diagonal_mi: info.mean_off_diagonal_mi,
            capacity_nats: capacity(k, cfg.quantizer.num_books).capacity_nats,
        });
    }
    let mut zeroing = vec![ZeroingRow {
        zeroed_level: "none".into(),
        reconstruction: base.reconstruction,
        bits_per_dim: base.bits_per_dim,
    }];
    for l in 0..n {
        let r = model.evaluate(&test, bs, &[l])?;
        zeroing.push(ZeroingRow {
            zeroed_level: l.to_string(),
            reconstruction: r.reconstruction,
            bits_per_dim: r.bits_per_dim,
        });
    }
    out.write_csv("info.csv", &info_rows)?;
    out.write_csv("entropy_map.csv", &cells)?;
    out.write_csv("zeroing.csv", &zeroing)?;
    out.summary("analyze", cfg.seed, json!({ "levels": info_rows, "zeroing": zeroing }))
}

#[derive(Debug, Clone, Serialize)]
struct AblateRow {
    num_codes: usize,
    num_books: usize,
    code_dim: usize,
    seed: u64,
    final_train_loss: f64,
    test_reconstruction: f64,
    test_bits_per_dim: Option<f64>,
}

#[derive(Debug, Serialize)]
struct AblateAggregate {
    num_codes: usize,
    num_books: usize,
    code_dim: usize,
    runs: usize,
    mean_test_reconstruction: f64,
    median_test_reconstruction: f64,
    mean_final_train_loss: f64,
    median_final_train_loss: f64,
}

/// Trains every `(K, M, seed)` point. Points run on `jobs` threads and each
/// writes its own subdirectory; the tables are ordered independently of
/// scheduling.
pub fn ablate_cmd(cfg: &ExperimentConfig, out: &Output, jobs: usize) -> CliResult<()> {
    let a = &cfg.ablate;
    let mut points = Vec::new();
    for &k in &a.num_codes {
        for &m in &a.num_books {
            for i in 0..a.seeds {
                points.push((k, m, cfg.seed + i as u64));
            }
        }
    }
    let mut datasets = Vec::new();
    for i in 0..a.seeds {
        datasets.push(load_datasets(cfg, cfg.seed + i as u64)?);
    }
    let points_dir = out.subdir("points")?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CliResult<AblateRow>>>> = Mutex::new((0..points.len()).map(|_| None).collect());
    let run_point = |idx: usize| -> CliResult<AblateRow> {
        let (k, m, seed) = points[idx];
        let (train, test, shape) = &datasets[(seed - cfg.seed) as usize];
        let mut pc = cfg.clone();
        pc.quantizer.num_codes = vec![k];
        pc.quantizer.num_books = m;
        if let Some(width) = a.latent_channels {
            pc.quantizer.code_dim = width / m;
        }
        let (mut model, last) = train_model(&pc, seed, train, shape, None)?;
        let eval = model.evaluate(test, pc.train.batch_size, &[])?;
        let row = AblateRow {
            num_codes: k,
            num_books: m,
            code_dim: pc.quantizer.code_dim,
            seed,
            final_train_loss: last.map(|l| l.total).unwrap_or(f64::NAN),
            test_reconstruction: eval.reconstruction,
            test_bits_per_dim: eval.bits_per_dim,
        };
        let dir = points_dir.join(format!("K{k}_M{m}_seed{seed}"));
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let text = serde_json::to_string_pretty(&row).expect("row serializes");
        write_file(&dir.join("result.json"), text.as_bytes())?;
        eprintln!("ablate: K={k} M={m} seed={seed} test={:.5}", row.test_reconstruction);
        Ok(row)
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, points.len().max(1)) {
            s.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= points.len() {
                    break;
                }
                let r = run_point(idx);
                results.lock().expect("result lock")[idx] = Some(r);
            });
        }
    });
    let rows: Vec<AblateRow> = results
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every point ran"))
        .collect::<CliResult<_>>()?;
    let mut agg = Vec::new();
    for &k in &a.num_codes {
        for &m in &a.num_books {
            let sel: Vec<&AblateRow> = rows.iter().filter(|r| r.num_codes == k && r.num_books == m).collect();
            let test: Vec<f64> = sel.iter().map(|r| r.test_reconstruction).collect();
            let fin: Vec<f64> = sel.iter().map(|r| r.final_train_loss).collect();
            agg.push(AblateAggregate {
                num_codes: k,
                num_books: m,
                code_dim: sel[0].code_dim,
                runs: sel.len(),
                mean_test_reconstruction: mean(&test),
                median_test_reconstruction: median(&test),
                mean_final_train_loss: mean(&fin),
                median_final_train_loss: median(&fin),
            });
        }
    }
    out.write_csv("ablate.csv", &rows)?;
    out.write_csv("ablate_summary.csv", &agg)?;
    out.summary("ablate", cfg.seed, json!({ "aggregate": agg, "runs": rows }))
}

pub fn synth_cmd(cfg: &ExperimentConfig, out: &Output, dtype: Dtype) -> CliResult<()> {
    let spec = &cfg.data.synthetic;
    let samples = generate_synthetic(spec, cfg.seed)?;
    let dir = out.subdir("data")?;
    for (i, t) in samples.iter().enumerate() {
        save_tensor(dir.join(format!("sample_{i:05}.dqt")), t, dtype).map_err(|e| match e {
            dq_core::DqError::Io(source) => CliError::io(&dir, source),
            other => other.into(),
        })?;
    }
    let self_test = redundancy_self_test(spec, cfg.seed)?;
    out.summary(
        "synth",
        cfg.seed,
        json!({
            "count": samples.len(),
            "shape": spec.shape,
            "redundant_channels": spec.redundant_channels(),
            "mean_abs_cross_correlation": mean_abs_cross_correlation(&samples)?,
            "self_test": {
                "redundancy": [0.0, 0.5, 0.9],
                "mean_abs_cross_correlation": self_test,
                "monotone": self_test[0] < self_test[1] && self_test[1] < self_test[2],
            },
        }),
    )
}
