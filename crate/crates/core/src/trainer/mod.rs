//! Two-pass training, evaluation, probing and checkpointing.

mod ablation;
mod adam;
mod checkpoint;
mod config;

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use ablation::{
    ablation_csv, ablation_text, preset, run_ablation, AblationGrid, AblationResult, RowSpec, PRESETS,
};
pub use adam::Adam;
pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::TrainConfig;

use crate::data::{augment, random_flip, ModalSample};
use crate::error::{Error, Result};
use crate::losses::{consistency_loss, total_loss, BayesianLoss};
use crate::metrics::{relative_l1_histogram, EvalRecord, Histogram, MetricTable};
use crate::model::Model;
use crate::tensor::{Gradients, ParamStore};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "MODAL_EMU_THREADS";

/// Worker threads to use: `MODAL_EMU_THREADS` if set, else the machine's parallelism.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Applies `f` to every item on up to [`worker_threads`] threads; results keep input order.
pub fn parallel_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let threads = worker_threads().min(items.len()).max(1);
    if threads == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let f = &f;
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, t)| f(c * chunk + i, t))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Mixes several integers into one seed (splitmix64 finaliser per part).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

const TAG_SHUFFLE: u64 = 1;
const TAG_AUGMENT: u64 = 2;
const TAG_DROPOUT: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepReport {
    /// Bayesian loss summed over the batch.
    pub l_bl: f64,
    /// Consistency loss summed over the batch; 0 with prompting off.
    pub l_cl: f64,
    pub l_total: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Per-sample means over the epoch.
    pub l_bl: f64,
    pub l_cl: f64,
    pub l_total: f64,
    pub val_game0: Option<f64>,
    pub val_rmse: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,l_bl,l_cl,l_total,val_game0,val_rmse";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.l_bl,
            self.l_cl,
            self.l_total,
            opt(self.val_game0),
            opt(self.val_rmse)
        )
    }
}

struct SampleResult {
    grads: Gradients,
    l_bl: f64,
    l_cl: f64,
}

fn sample_gradients(model: &Model, bl: &BayesianLoss, s: &ModalSample, seed: u64) -> Result<SampleResult> {
    let mut g = model.graph();
    g.set_training(true);
    g.set_seed(seed);
    let out = model.forward_train(&mut g, &s.rgb, &s.aux)?;
    let l_bl = bl.loss(&mut g, out.density, &s.points)?;
    let (loss, l_cl) = match out.pseudo {
        Some((f_r_bar, f_t_bar)) => {
            let f = out.features;
            let cl = consistency_loss(&mut g, f.f_r, f_r_bar, f.f_t, f_t_bar)?;
            (total_loss(&mut g, l_bl, cl)?, g.value(cl).item())
        }
        None => {
            if !g.value(l_bl).is_finite() {
                return Err(Error::numeric("bayesian loss is not finite"));
            }
            (l_bl, 0.0)
        }
    };
    g.backward(loss)?;
    Ok(SampleResult {
        grads: g.param_grads()?,
        l_bl: g.value(l_bl).item(),
        l_cl,
    })
}

/// Training state: model, optimizer and progress counters.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
    /// Best validation GAME(0) so far.
    pub best_val: Option<f64>,
    /// Parameters that achieved `best_val` during this session; not restored
    /// from checkpoints (`best.ckpt` holds them on disk).
    pub best_params: Option<ParamStore>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model_config(), config.seed)?;
        let adam = Adam::new(&model.params, config.lr, config.beta1, config.beta2, config.eps);
        Ok(Trainer {
            config,
            model,
            adam,
            epoch: 0,
            step: 0,
            best_val: None,
            best_params: None,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(ckpt.config.clone())?;
        t.model.load_params_from(&ckpt.params()?)?;
        if let Some(adam) = ckpt.adam(&t.model.params)? {
            t.adam = adam;
        }
        t.epoch = ckpt.epoch as usize;
        t.step = ckpt.step;
        t.best_val = ckpt.best_val;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.config,
            self.epoch as u64,
            self.step,
            self.best_val,
            &self.model.params,
            Some(&self.adam),
        )
    }

    /// One optimizer step on the summed gradient of `batch`.
    pub fn train_step(&mut self, batch: &[ModalSample]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::contract("empty training batch"));
        }
        if let Err(name) = self.model.params.is_finite() {
            return Err(Error::numeric(format!("parameter {name} is not finite")));
        }
        let bl = self.config.bayesian_loss();
        let (model, seed, step) = (&self.model, self.config.seed, self.step);
        let results = parallel_map(batch, |k, s| {
            sample_gradients(model, &bl, s, derive_seed(&[seed, TAG_DROPOUT, step, k as u64]))
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("sample {}: {m}", s.id)),
                    e => e,
                })
        });
        let mut grads = Gradients::for_store(&self.model.params);
        let (mut l_bl, mut l_cl) = (0.0, 0.0);
        for r in results {
            let r = r?;
            grads.merge(&r.grads)?;
            l_bl += r.l_bl;
            l_cl += r.l_cl;
        }
        if let Some((id, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::numeric(format!(
                "gradient of {} is not finite",
                self.model.params.name(id)
            )));
        }
        let grad_norm = grads.l2_norm();
        self.adam.step(&mut self.model.params, &grads)?;
        self.step += 1;
        Ok(StepReport {
            l_bl,
            l_cl,
            l_total: l_bl + l_cl,
            grad_norm,
        })
    }

    fn prepare(&self, s: &ModalSample, index: usize) -> Result<ModalSample> {
        let seed = derive_seed(&[self.config.seed, TAG_AUGMENT, self.epoch as u64, index as u64]);
        match self.config.crop_size {
            Some(c) => augment(s, c, self.config.flip_prob, seed),
            None if self.config.flip_prob > 0.0 => random_flip(s, self.config.flip_prob, seed),
            None => Ok(s.clone()),
        }
    }

    /// One pass over `train` in a seeded shuffled order.
    pub fn run_epoch(&mut self, train: &[ModalSample]) -> Result<(Vec<StepReport>, EpochLog)> {
        if train.is_empty() {
            return Err(Error::contract("empty training split"));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            self.config.seed,
            TAG_SHUFFLE,
            self.epoch as u64,
        ]));
        order.shuffle(&mut rng);
        let mut reports = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| self.prepare(&train[i], i))
                .collect::<Result<Vec<_>>>()?;
            reports.push(self.train_step(&batch)?);
        }
        self.epoch += 1;
        let n = train.len() as f64;
        let l_bl = reports.iter().map(|r| r.l_bl).sum::<f64>() / n;
        let l_cl = reports.iter().map(|r| r.l_cl).sum::<f64>() / n;
        let log = EpochLog {
            epoch: self.epoch,
            l_bl,
            l_cl,
            l_total: l_bl + l_cl,
            val_game0: None,
            val_rmse: None,
        };
        Ok((reports, log))
    }

    /// Trains up to `config.epochs`, validating after every epoch.
    ///
    /// With `out` set, appends rows to `out/log.csv` and writes `last.ckpt`
    /// every epoch and `best.ckpt` whenever validation GAME(0) improves (or
    /// every epoch when there is no validation split).
    pub fn fit(&mut self, train: &[ModalSample], val: &[ModalSample], out: Option<&Path>) -> Result<Vec<EpochLog>> {
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut logs = Vec::new();
        while self.epoch < self.config.epochs {
            let (_, mut log) = self.run_epoch(train)?;
            let mut improved = val.is_empty();
            if !val.is_empty() {
                let table = evaluate(&self.model, val, self.config.stride)?.table;
                log.val_game0 = Some(table.game[0]);
                log.val_rmse = Some(table.rmse);
                if self.best_val.is_none_or(|b| table.game[0] < b) {
                    self.best_val = Some(table.game[0]);
                    self.best_params = Some(self.model.params.clone());
                    improved = true;
                }
            }
            if let Some(dir) = out {
                append_log(&dir.join("log.csv"), &log)?;
                let ckpt = self.checkpoint();
                ckpt.save(&dir.join("last.ckpt"))?;
                if improved {
                    ckpt.save(&dir.join("best.ckpt"))?;
                }
            }
            logs.push(log);
        }
        Ok(logs)
    }

    /// The model with the best validation parameters seen this session, or the current one.
    pub fn best_model(&self) -> Result<Model> {
        let mut m = self.model.clone();
        if let Some(p) = &self.best_params {
            m.load_params_from(p)?;
        }
        Ok(m)
    }
}

fn append_log(path: &Path, log: &EpochLog) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(LOG_HEADER);
        text.push('\n');
    }
    text.push_str(&log.csv_row());
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Metrics and per-image records of one evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub table: MetricTable,
    pub records: Vec<EvalRecord>,
}

/// Inference pass only (no crop, dropout off) over `samples`.
pub fn evaluate(model: &Model, samples: &[ModalSample], stride: usize) -> Result<Evaluation> {
    evaluate_with(model, samples, stride, false)
}

fn evaluate_with(model: &Model, samples: &[ModalSample], stride: usize, pseudo: bool) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::contract("evaluation over an empty split"));
    }
    let records = parallel_map(samples, |_, s| -> Result<EvalRecord> {
        let mut g = model.graph();
        g.set_training(false);
        let d = if pseudo {
            model.predict_with_pseudo(&mut g, &s.rgb, &s.aux)?
        } else {
            model.predict(&mut g, &s.rgb, &s.aux)?
        };
        Ok(EvalRecord::new(g.value(d).clone(), s.points.clone(), stride))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        table: MetricTable::compute(&records)?,
        records,
    })
}

/// Standard path and pseudo-feature head path, side by side.
pub fn pseudo_head_variant(model: &Model, samples: &[ModalSample], stride: usize) -> Result<(MetricTable, MetricTable)> {
    if model.prompts.is_none() {
        return Err(Error::contract("the pseudo-feature head needs prompting enabled"));
    }
    if model.pseudo_reduce.is_none() {
        return Err(Error::contract("model was built without use_pseudo_in_head"));
    }
    let standard = evaluate_with(model, samples, stride, false)?.table;
    let variant = evaluate_with(model, samples, stride, true)?.table;
    Ok((standard, variant))
}

/// Relative L1 distance histograms between real and pseudo features.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentProbe {
    pub rgb: Histogram,
    pub aux: Histogram,
}

impl AlignmentProbe {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("modality,bin_start,bin_end,percent\n");
        for (name, h) in [("rgb", &self.rgb), ("aux", &self.aux)] {
            for line in h.to_csv().lines().skip(1) {
                s.push_str(name);
                s.push(',');
                s.push_str(line);
                s.push('\n');
            }
        }
        s
    }

    pub fn to_text(&self) -> String {
        format!(
            "rgb (median {:.4})\n{}aux (median {:.4})\n{}",
            self.rgb.median(),
            self.rgb.to_text(),
            self.aux.median(),
            self.aux.to_text()
        )
    }
}

/// Runs both passes in evaluation mode and compares `F̂` with `F̄` per modality.
pub fn alignment_probe(model: &Model, samples: &[ModalSample], bin_width: f64) -> Result<AlignmentProbe> {
    if model.prompts.is_none() {
        return Err(Error::contract("alignment probe needs a model with prompts"));
    }
    if samples.is_empty() {
        return Err(Error::contract("alignment probe over an empty split"));
    }
    let feats = parallel_map(samples, |_, s| -> Result<_> {
        let mut g = model.graph();
        g.set_training(false);
        let f = model.features(&mut g, &s.rgb, &s.aux)?;
        let (pr, pt) = model.emulate(&mut g, &f)?;
        Ok([
            g.value(f.f_r).clone(),
            g.value(pr).clone(),
            g.value(f.f_t).clone(),
            g.value(pt).clone(),
        ])
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let col = |i: usize| feats.iter().map(|f| f[i].clone()).collect::<Vec<_>>();
    Ok(AlignmentProbe {
        rgb: relative_l1_histogram(&col(0), &col(1), bin_width)?,
        aux: relative_l1_histogram(&col(2), &col(3), bin_width)?,
    })
}

/// Model for evaluation from a checkpoint, built without any emulation parts.
pub fn load_for_inference(ckpt: &Checkpoint) -> Result<Model> {
    let cfg = ckpt.config.model_config().inference_only();
    let mut model = Model::new(cfg, ckpt.config.seed)?;
    model.load_params_from(&ckpt.params()?)?;
    Ok(model)
}

/// Model exactly as trained, including prompts.
pub fn load_model(ckpt: &Checkpoint) -> Result<Model> {
    let mut model = Model::new(ckpt.config.model_config(), ckpt.config.seed)?;
    model.load_params_from(&ckpt.params()?)?;
    Ok(model)
}
