//! Experiment orchestration: sample selection, white-box seeding on the
//! source, the black-box attack on the target, transfer checks and result
//! persistence.

pub mod config;
pub mod records;

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{DatasetRef, ExperimentConfig, IouModel, DEFAULT_CONFIDENCE};
pub use records::{ResultRecord, SCHEMA};

use crate::dataset::Dataset;
use crate::edge_seed::{advedge_attack, SeedConfig, SeedSet};
use crate::error::{Error, Result};
use crate::interpreters::{self, Method};
use crate::metrics::{self, RunSummary};
use crate::mga::{self, MgaConfig};
use crate::model::{weights, Family, ModelHandle, ModelSpec, TrainConfig};
use crate::target::BlackBoxTarget;
use crate::tensor::Tensor;

/// Worker cap for the sample-parallel loops.
pub const THREADS_ENV: &str = "EDGEQUERY_THREADS";

/// Training settings used for the reference micro models.
pub fn standard_training(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 100,
        lr: 0.01,
        seed,
        ..TrainConfig::default()
    }
}

pub fn train_family(family: Family, data: &Dataset, cfg: &TrainConfig) -> Result<ModelHandle> {
    let shape = data
        .images
        .first()
        .ok_or_else(|| Error::Config("cannot train on an empty dataset".into()))?
        .chw()?;
    let spec = ModelSpec::MicroCnn(family.spec([shape.0, shape.1, shape.2], data.num_classes));
    Ok(ModelHandle::white_box(crate::model::train(&spec, data, cfg)?))
}

pub fn load_handle(path: &Path) -> Result<ModelHandle> {
    Ok(ModelHandle::white_box(weights::load_model(path)?))
}

/// Independent 64-bit seed for stream `stream` of `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.next_u64()
}

fn pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a count")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Indices every model labels correctly with true-class probability above
/// `confidence`, in dataset order.
pub fn eligible(data: &Dataset, models: &[&ModelHandle], confidence: f64) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    'samples: for (i, (x, &y)) in data.images.iter().zip(&data.labels).enumerate() {
        for m in models {
            let o = m.forward(x)?;
            if o.label() != y || o.probs[y] <= confidence {
                continue 'samples;
            }
        }
        out.push(i);
    }
    Ok(out)
}

/// Uniform draw from the eligible set, spread over classes round-robin so
/// that no class repeats while another one still has unused samples.
/// Returned in ascending index order.
pub fn select_samples(
    data: &Dataset,
    models: &[&ModelHandle],
    confidence: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let pool = eligible(data, models, confidence)?;
    if pool.len() < count {
        log::warn!("only {} eligible samples for the {count} requested", pool.len());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes];
    for &i in &pool {
        by_class[data.labels[i]].push(i);
    }
    for bucket in &mut by_class {
        bucket.shuffle(&mut rng);
        bucket.reverse();
    }
    let mut order: Vec<usize> = (0..data.num_classes).collect();
    order.shuffle(&mut rng);
    let mut picked = Vec::with_capacity(count.min(pool.len()));
    while picked.len() < count.min(pool.len()) {
        for &k in &order {
            if picked.len() == count {
                break;
            }
            if let Some(i) = by_class[k].pop() {
                picked.push(i);
            }
        }
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Seeding output for one sample, reusable across targets and defenses.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub index: usize,
    pub label: usize,
    pub seeds: std::result::Result<SeedSet, String>,
}

/// Benign maps and seed populations on the source for every index.
pub fn prepare(
    source: &ModelHandle,
    method: Method,
    seed_cfg: &SeedConfig,
    data: &Dataset,
    indices: &[usize],
    seed: u64,
) -> Result<Vec<Prepared>> {
    seed_cfg.validate()?;
    let run = || {
        indices
            .par_iter()
            .map(|&i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let y = data.labels[i];
                Prepared {
                    index: i,
                    label: y,
                    seeds: advedge_attack(source, method, &data.images[i], y, seed_cfg, &mut rng)
                        .map_err(|e| e.to_string()),
                }
            })
            .collect()
    };
    Ok(pool()?.install(run))
}

/// Everything fixed across the samples of one matrix cell.
#[derive(Debug, Clone)]
pub struct Cell<'a> {
    pub data: &'a Dataset,
    pub source: &'a ModelHandle,
    pub target: &'a ModelHandle,
    pub method: Method,
    pub defense: Option<crate::defenses::DefenseSpec>,
    pub epsilon: f64,
    pub mga: MgaConfig,
    pub seed: u64,
    pub iou_model: IouModel,
    pub record_timing: bool,
    pub config_hash: String,
}

impl<'a> Cell<'a> {
    pub fn from_config(
        cfg: &ExperimentConfig,
        data: &'a Dataset,
        source: &'a ModelHandle,
        target: &'a ModelHandle,
    ) -> Self {
        Self {
            data,
            source,
            target,
            method: cfg.interpreter,
            defense: cfg.defense.clone(),
            epsilon: cfg.seed_config().epsilon,
            mga: cfg.mga_cfg.clone(),
            seed: cfg.seed,
            iou_model: cfg.iou_model,
            record_timing: cfg.record_timing,
            config_hash: cfg.hash(),
        }
    }

    fn blank(&self, p: &Prepared) -> ResultRecord {
        ResultRecord {
            schema: SCHEMA.into(),
            config_hash: self.config_hash.clone(),
            sample_id: p.index,
            true_label: p.label,
            source_model: self.source.spec().name().to_string(),
            target_model: self.target.spec().name().to_string(),
            interpreter: self.method,
            defense: self.defense.as_ref().map(|d| d.name().to_string()),
            success: false,
            queries: 0,
            adv_label: None,
            adv_confidence: None,
            noise_rate: None,
            iou: None,
            gate_pixels: None,
            adv_input: None,
            error: None,
            started_unix_ms: None,
            elapsed_ms: None,
        }
    }

    fn attack_one(&self, p: &Prepared, rec: &mut ResultRecord) -> Result<()> {
        let seeds = p.seeds.as_ref().map_err(|e| Error::Config(e.clone()))?;
        rec.gate_pixels = Some(seeds.mask.n_w.sum().round() as usize);
        let x = &self.data.images[p.index];
        let y = p.label;
        let mut target = BlackBoxTarget::new(self.target, self.defense.clone(), self.mga.max_queries)?
            .with_defense_stream(p.index as u64);
        let mga_cfg = MgaConfig {
            rng_seed: derive_seed(self.seed ^ self.mga.rng_seed, p.index as u64),
            ..self.mga.clone()
        };
        let outcome = mga::run_attack(&mut target, x, y, &seeds.deltas, self.epsilon, &mga_cfg)?;
        rec.success = outcome.success;
        rec.queries = outcome.queries;
        if !outcome.success {
            return Ok(());
        }
        rec.adv_label = Some(outcome.adv_label);
        rec.adv_confidence = Some(outcome.adv_confidence);
        let x_adv = mga::materialize(x, &outcome.final_delta)?;
        rec.noise_rate = Some(metrics::noise_rate(x, &x_adv)?);
        let explainer = match self.iou_model {
            IouModel::Source => self.source,
            IouModel::Target => self.target,
        };
        let benign = match self.iou_model {
            IouModel::Source => seeds.benign_map.clone(),
            IouModel::Target => interpreters::interpret(explainer, self.method, x, y)?,
        };
        let adv_map = interpreters::interpret(explainer, self.method, &x_adv, y)?;
        rec.iou = Some(metrics::iou(&benign, &adv_map)?);
        rec.adv_input = Some(x_adv.into_data());
        Ok(())
    }

    fn record(&self, p: &Prepared) -> ResultRecord {
        let mut rec = self.blank(p);
        let started = Instant::now();
        if let Err(e) = self.attack_one(p, &mut rec) {
            log::warn!("sample {}: {e}", p.index);
            rec.error = Some(e.to_string());
        }
        if self.record_timing {
            rec.started_unix_ms = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .ok()
                .map(|d| d.as_millis());
            rec.elapsed_ms = Some(started.elapsed().as_secs_f64() * 1e3);
        }
        rec
    }

    /// Black-box phase for prepared samples. A failing sample yields a
    /// record with `error` set; it never aborts the others. Output order
    /// follows `prepared`.
    pub fn attack(&self, prepared: &[Prepared]) -> Result<Vec<ResultRecord>> {
        if let Some(d) = &self.defense {
            d.validate()?;
        }
        self.mga.validate()?;
        Ok(pool()?.install(|| prepared.par_iter().map(|p| self.record(p)).collect()))
    }
}

/// Seeds and attacks the configured samples with already-loaded models.
pub fn run_with(
    cfg: &ExperimentConfig,
    data: &Dataset,
    source: &ModelHandle,
    target: &ModelHandle,
) -> Result<Vec<ResultRecord>> {
    cfg.validate()?;
    let indices = select_samples(
        data,
        &[source, target],
        cfg.selection_confidence,
        cfg.sample_count,
        derive_seed(cfg.seed, u64::MAX),
    )?;
    let prepared = prepare(source, cfg.interpreter, &cfg.seed_config(), data, &indices, cfg.seed)?;
    Cell::from_config(cfg, data, source, target).attack(&prepared)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ResultRecord>> {
    cfg.validate()?;
    let data = cfg.dataset.load()?;
    let source = load_handle(&cfg.source_model)?;
    let target = load_handle(&cfg.target_model)?;
    run_with(cfg, &data, &source, &target)
}

pub fn summarize_records(records: &[ResultRecord]) -> Result<RunSummary> {
    metrics::summarize(&records.iter().map(ResultRecord::stats).collect::<Vec<_>>())
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.digits$}"))
}

/// Plain-text summary table.
pub fn format_summary(s: &RunSummary) -> String {
    let mut out = String::new();
    let mut row = |k: &str, v: String| out.push_str(&format!("{k:<16}{v}\n"));
    row("samples", s.total.to_string());
    row("successes", s.successes.to_string());
    row("success rate", format!("{:.4}", s.success_rate));
    row("avg queries", fmt_opt(s.avg_queries, 2));
    row("median queries", fmt_opt(s.median_queries, 1));
    row("noise rate", fmt_opt(s.noise.as_ref().map(|d| d.mean), 5));
    row("adv confidence", fmt_opt(s.confidence.as_ref().map(|d| d.mean), 4));
    row("iou", fmt_opt(s.iou.as_ref().map(|d| d.mean), 4));
    out
}

/// How successful adversarial inputs fare on a model that was not attacked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSummary {
    pub model: String,
    pub successes: usize,
    pub transferred: usize,
    /// `None` when there is nothing to transfer.
    pub rate: Option<f64>,
    /// Mean IoU of benign vs adversarial maps under the transferred model.
    pub iou: Option<f64>,
}

fn adv_tensor(rec: &ResultRecord, x: &Tensor) -> Result<Option<Tensor>> {
    match (&rec.success, &rec.adv_input) {
        (true, Some(v)) => Ok(Some(Tensor::new(x.shape().to_vec(), v.clone())?)),
        _ => Ok(None),
    }
}

/// Replays every successful adversarial input on `model` (no new attack).
/// The IoU column needs white-box access and an interpreter.
pub fn evaluate_transfer(
    records: &[ResultRecord],
    data: &Dataset,
    model: &ModelHandle,
    method: Option<Method>,
) -> Result<TransferSummary> {
    let mut successes = 0;
    let mut transferred = 0;
    let mut ious = Vec::new();
    for rec in records {
        let x = data
            .images
            .get(rec.sample_id)
            .ok_or(Error::Index {
                index: rec.sample_id,
                len: data.len(),
            })?;
        let Some(x_adv) = adv_tensor(rec, x)? else {
            continue;
        };
        successes += 1;
        if model.forward(&x_adv)?.label() != rec.true_label {
            transferred += 1;
        }
        if let Some(m) = method {
            if model.white().is_ok() {
                let benign = interpreters::interpret(model, m, x, rec.true_label)?;
                let adv = interpreters::interpret(model, m, &x_adv, rec.true_label)?;
                ious.push(metrics::iou(&benign, &adv)?.mean);
            }
        }
    }
    Ok(TransferSummary {
        model: model.spec().name().to_string(),
        successes,
        transferred,
        rate: (successes > 0).then(|| transferred as f64 / successes as f64),
        iou: (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64),
    })
}

/// Writes `benign | adversarial` map pairs for up to `limit` successful
/// records as PGM files named after the sample.
pub fn export_maps(
    records: &[ResultRecord],
    data: &Dataset,
    model: &ModelHandle,
    method: Method,
    limit: usize,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for rec in records {
        if written.len() == limit {
            break;
        }
        let Some(x) = data.images.get(rec.sample_id) else {
            continue;
        };
        let Some(x_adv) = adv_tensor(rec, x)? else {
            continue;
        };
        let benign = interpreters::interpret(model, method, x, rec.true_label)?;
        let adv = interpreters::interpret(model, method, &x_adv, rec.true_label)?;
        let path = dir.join(format!("sample{:05}_{method}.pgm", rec.sample_id));
        interpreters::write_pgm(&path, &[&benign, &adv])?;
        written.push(path);
    }
    Ok(written)
}
