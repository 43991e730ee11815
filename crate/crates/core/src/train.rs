//! Optimisation: learning-rate schedule, AdamW, checkpoints, the training loop
//! and best-checkpoint selection.

use crate::assign::Cost;
use crate::error::{Error, Result};
use crate::evalx::{self, EvalRecord, Tolerances};
use crate::infer::{self, PredictionRecord, SearchConfig};
use crate::io_util::write_atomic;
use crate::msio::{preprocess, AnnotatedSpectrum, PreprocessConfig};
use crate::neural::{LossBreakdown, MemoryMode, Model, ModelConfig, TrainingExample};
use crate::params::{Gradients, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Overrides the model's dropout rate when set.
    pub dropout: Option<f64>,
    /// Marks the small CPU profile.
    pub desk_scale: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Validation spectra decoded per epoch (0 = all).
    pub max_validation: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl TrainConfig {
    /// Full-scale settings; not runnable on a desk CPU.
    pub fn full() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            peak_lr: 5e-4,
            weight_decay: 1e-5,
            warmup_steps: 100_000,
            label_smoothing: 0.01,
            seed: 0,
            dropout: None,
            desk_scale: false,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_validation: 0,
        }
    }

    /// CPU profile. The full-scale 5e-4 peak rate learns too slowly over the
    /// few thousand steps a desk run affords, so this uses 2e-3 and 40 epochs.
    pub fn desk() -> Self {
        Self { epochs: 40, peak_lr: 2e-3, warmup_steps: 500, desk_scale: true, max_validation: 100, ..Self::full() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(self.peak_lr > 0.0) || self.warmup_steps == 0 {
            return bad("need peak_lr > 0 and warmup_steps >= 1");
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("weight_decay must be >= 0 and label_smoothing in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("betas must lie in [0, 1) and eps must be positive");
        }
        if let Some(d) = self.dropout {
            if !(0.0..1.0).contains(&d) {
                return bad("dropout must lie in [0, 1)");
            }
        }
        Ok(())
    }

    /// Optimiser steps for a training set of `n` examples.
    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch_size)
    }
}

/// Linear warm-up to `peak_lr`, then a half-cosine decay to zero at `total_steps`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig, total_steps: usize) -> Result<f64> {
    let w = cfg.warmup_steps;
    if total_steps <= w {
        return Err(Error::Config(format!("total_steps {total_steps} must exceed warmup_steps {w}")));
    }
    if step <= w {
        return Ok(cfg.peak_lr * step as f64 / w as f64);
    }
    let frac = ((step - w) as f64 / (total_steps - w) as f64).min(1.0);
    Ok((cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())).max(0.0))
}

/// First and second moment estimates for AdamW.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub step: u64,
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn for_params(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Matrix<T>> = params.iter().map(|(_, _, p)| Matrix::zeros(p.rows(), p.cols())).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }

    /// One decoupled-weight-decay update.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let f = T::from_f64_lossy;
        let (b1t, b2t, eps, lr_t, wd) = (f(b1), f(b2), f(cfg.eps), f(lr), f(cfg.weight_decay));
        let (c1t, c2t) = (f(c1), f(c2));
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let k = id.index();
            let p = params.get_mut(id).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = b1t * *m + (T::one() - b1t) * g;
                *v = b2t * *v + (T::one() - b2t) * g * g;
                let mhat = *m / c1t;
                let vhat = *v / c2t;
                *p = *p - lr_t * (mhat / (vhat.sqrt() + eps) + wd * *p);
            }
        }
    }
}

const MAGIC: &[u8; 8] = b"LIPNOVO\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    model: ModelConfig,
    train: Option<TrainConfig>,
    step: u64,
    epoch: u64,
    best_val: Option<f64>,
    adam_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

/// The element type a checkpoint was written with.
pub fn stored_dtype(bytes: &[u8]) -> Result<String> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let end = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[20..end]).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(header.dtype)
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub step: u64,
    pub epoch: u64,
    pub best_val: Option<f64>,
    pub params: ParamStore<T>,
    pub optimizer: Option<AdamState<T>>,
}

impl<T: Scalar + Cost> Checkpoint<T> {
    pub fn from_model(model: &Model<T>) -> Self {
        Self {
            model_config: model.config().clone(),
            train_config: None,
            step: 0,
            epoch: 0,
            best_val: None,
            params: model.params().clone(),
            optimizer: None,
        }
    }

    pub fn into_model(self) -> Result<Model<T>> {
        Model::with_params(self.model_config, self.params)
    }

    /// Serialises to the binary layout: magic, version, header length, JSON
    /// header, then little-endian tensor data.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut blobs: Vec<&Matrix<T>> = Vec::new();
        let mut offset = 0u64;
        let mut push = |name: String, m: &Matrix<T>, tensors: &mut Vec<TensorEntry>| {
            tensors.push(TensorEntry { name, rows: m.rows(), cols: m.cols(), offset });
            offset += (m.len() * T::BYTES) as u64;
        };
        for (_, name, p) in self.params.iter() {
            push(name.to_string(), p, &mut tensors);
            blobs.push(p);
        }
        if let Some(opt) = &self.optimizer {
            for (kind, set) in [("adam.m", &opt.m), ("adam.v", &opt.v)] {
                for ((_, name, _), t) in self.params.iter().zip(set) {
                    push(format!("{kind}/{name}"), t, &mut tensors);
                    blobs.push(t);
                }
            }
        }
        let header = Header {
            dtype: T::DTYPE.to_string(),
            model: self.model_config.clone(),
            train: self.train_config.clone(),
            step: self.step,
            epoch: self.epoch,
            best_val: self.best_val,
            adam_step: self.optimizer.as_ref().map(|o| o.step),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for m in blobs {
            for &x in m.data() {
                x.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..body]).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let data = &bytes[body..];
        let width = match header.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::Checkpoint(format!("unknown dtype {other}"))),
        };
        let read = |e: &TensorEntry| -> Result<Matrix<T>> {
            let start = e.offset as usize;
            let end = start + e.rows * e.cols * width;
            let raw = data.get(start..end).ok_or_else(|| bad("truncated tensor data"))?;
            let vals: Vec<T> = raw
                .chunks_exact(width)
                .map(|c| {
                    let x = if width == 4 {
                        f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    } else {
                        f64::from_le_bytes(c.try_into().expect("8 bytes"))
                    };
                    T::from_f64_lossy(x)
                })
                .collect();
            Ok(Matrix::from_vec(e.rows, e.cols, vals))
        };
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in &header.tensors {
            let t = read(e)?;
            if e.name.starts_with("adam.m/") {
                m.push(t);
            } else if e.name.starts_with("adam.v/") {
                v.push(t);
            } else {
                if params.id_of(&e.name).is_some() {
                    return Err(Error::Checkpoint(format!("duplicate tensor {}", e.name)));
                }
                params.add(e.name.clone(), t);
            }
        }
        let optimizer = match header.adam_step {
            Some(step) if m.len() == params.len() && v.len() == params.len() => Some(AdamState { step, m, v }),
            Some(_) => return Err(bad("optimizer state does not cover every parameter")),
            None => None,
        };
        Ok(Self {
            model_config: header.model,
            train_config: header.train,
            step: header.step,
            epoch: header.epoch,
            best_val: header.best_val,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, |w| Ok(w.write_all(&bytes)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step {
        step: usize,
        epoch: usize,
        lr: f64,
        ce_main: f64,
        ce_theory: f64,
        imputation: f64,
        total: f64,
        skipped: usize,
    },
    Epoch {
        epoch: usize,
        step: usize,
        mean_total: f64,
        val_aa_precision: Option<f64>,
        best: bool,
    },
}

/// Preprocesses annotated records into training examples, dropping records
/// without an annotation or without surviving peaks.
pub fn to_examples(records: &[AnnotatedSpectrum], cfg: &PreprocessConfig) -> (Vec<TrainingExample>, usize) {
    let out: Vec<TrainingExample> = records
        .iter()
        .filter_map(|r| {
            let peptide = r.peptide.clone()?;
            let spectrum = preprocess(&r.spectrum, cfg)?;
            Some(TrainingExample { spectrum, peptide })
        })
        .collect();
    let dropped = records.len() - out.len();
    (out, dropped)
}

/// Decodes every example with the given memory mode.
pub fn predict_examples<T: Scalar + Cost>(
    model: &Model<T>,
    examples: &[TrainingExample],
    oracle: bool,
    cfg: &SearchConfig,
) -> Result<Vec<PredictionRecord>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let id = i.to_string();
            if oracle {
                infer::decode(model, &e.spectrum, &id, MemoryMode::Oracle(&e.peptide), cfg)
            } else {
                infer::decode(model, &e.spectrum, &id, MemoryMode::Imputed, cfg)
            }
        })
        .collect()
}

/// Corpus aa precision of `predictions` (aligned with `examples`).
pub fn aa_precision(predictions: &[PredictionRecord], examples: &[TrainingExample]) -> Option<f64> {
    let recs: Vec<EvalRecord> = predictions
        .iter()
        .zip(examples)
        .map(|(p, e)| EvalRecord {
            source_id: p.source_id.clone(),
            pred: Some(p.peptide.clone()),
            confidence: p.peptide_confidence,
            truth: e.peptide.clone(),
        })
        .collect();
    evalx::aa_metrics(&recs, &Tolerances::default()).ok().and_then(|m| m.precision)
}

/// Greedy validation aa precision, the checkpoint selection metric.
pub fn validation_score<T: Scalar + Cost>(model: &Model<T>, val: &[TrainingExample], limit: usize) -> Result<Option<f64>> {
    let val = if limit > 0 && limit < val.len() { &val[..limit] } else { val };
    let cfg = SearchConfig::default().greedy();
    let preds = predict_examples(model, val, false, &cfg)?;
    Ok(aa_precision(&preds, val))
}

pub struct TrainOutcome<T: Scalar> {
    /// Parameters of the best validation epoch.
    pub best: Model<T>,
    pub best_epoch: usize,
    pub best_val: Option<f64>,
    pub log: Vec<LogRecord>,
    pub steps: usize,
}

/// Where to put checkpoints and the metrics log.
#[derive(Clone, Debug, Default)]
pub struct Outputs {
    pub dir: Option<PathBuf>,
}

impl Outputs {
    pub fn best(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("best.ckpt"))
    }

    pub fn last(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("last.ckpt"))
    }

    pub fn metrics(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("metrics.ndjson"))
    }
}

fn finite(l: &LossBreakdown) -> bool {
    [l.ce_main, l.ce_theory, l.imputation, l.total].iter().all(|x| x.is_finite())
}

/// Trains from scratch. Each epoch is shuffled with a stream derived from
/// `(seed, epoch)`; the whole run is a deterministic function of its inputs.
///
/// When `outputs.dir` is set, `last.ckpt` and `best.ckpt` are rewritten after
/// every epoch and each log record is appended to `metrics.ndjson` as it is
/// produced. A non-finite loss or gradient aborts with
/// [`Error::Diverged`], leaving the checkpoints of the last finished epoch.
pub fn train<T: Scalar + Cost>(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    train_set: &[TrainingExample],
    val_set: &[TrainingExample],
    outputs: &Outputs,
    mut progress: impl FnMut(&LogRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let mut model_cfg = model_cfg.clone();
    if let Some(d) = cfg.dropout {
        model_cfg.dropout = d;
    }
    let total = cfg.total_steps(train_set.len());
    lr_schedule(0, cfg, total)?;
    let mut model = Model::<T>::new(model_cfg, cfg.seed)?;
    let mut opt = AdamState::for_params(model.params());
    let mut log_file = match outputs.metrics() {
        Some(p) => {
            if let Some(d) = p.parent() {
                std::fs::create_dir_all(d)?;
            }
            Some(std::io::BufWriter::new(std::fs::File::create(p)?))
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut emit = |r: LogRecord, log: &mut Vec<LogRecord>| -> Result<()> {
        if let Some(f) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, &r).map_err(|e| Error::Checkpoint(e.to_string()))?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        progress(&r);
        log.push(r);
        Ok(())
    };

    let mut best: Option<(usize, Option<f64>, ParamStore<T>)> = None;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut sum_total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainingExample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            step += 1;
            let lr = lr_schedule(step, cfg, total)?;
            let dropout_seed = (model.config().dropout > 0.0).then(|| cfg.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let out = match model.forward_train(&batch, cfg.label_smoothing, dropout_seed) {
                Err(Error::NonFinite(what)) => return Err(Error::Diverged { step, detail: format!("non-finite {what}") }),
                other => other?,
            };
            if !finite(&out.losses) || !out.grads.all_finite() {
                return Err(Error::Diverged { step, detail: format!("non-finite loss or gradient: {:?}", out.losses) });
            }
            opt.update(model.params_mut(), &out.grads, lr, cfg);
            if !model.params().iter().all(|(_, _, m)| m.all_finite()) {
                return Err(Error::Diverged { step, detail: "non-finite parameters after update".into() });
            }
            let l = out.losses;
            sum_total += l.total;
            batches += 1;
            emit(
                LogRecord::Step {
                    step,
                    epoch,
                    lr,
                    ce_main: l.ce_main,
                    ce_theory: l.ce_theory,
                    imputation: l.imputation,
                    total: l.total,
                    skipped: out.skipped,
                },
                &mut log,
            )?;
        }
        let val = validation_score(&model, val_set, cfg.max_validation)?;
        let improved = match &best {
            None => true,
            Some((_, b, _)) => val.unwrap_or(-1.0) > b.unwrap_or(-1.0),
        };
        if improved {
            best = Some((epoch, val, model.params().clone()));
        }
        if let (Some(last), Some(best_path)) = (outputs.last(), outputs.best()) {
            let ck = Checkpoint {
                model_config: model.config().clone(),
                train_config: Some(cfg.clone()),
                step: step as u64,
                epoch: epoch as u64,
                best_val: val,
                params: model.params().clone(),
                optimizer: Some(opt.clone()),
            };
            ck.save(&last)?;
            if improved {
                Checkpoint { optimizer: None, ..ck }.save(&best_path)?;
            }
        }
        emit(
            LogRecord::Epoch { epoch, step, mean_total: sum_total / batches as f64, val_aa_precision: val, best: improved },
            &mut log,
        )?;
    }
    let (best_epoch, best_val, params) = best.expect("at least one epoch");
    let best_model = Model::with_params(model.config().clone(), params)?;
    Ok(TrainOutcome { best: best_model, best_epoch, best_val, log, steps: step })
}
