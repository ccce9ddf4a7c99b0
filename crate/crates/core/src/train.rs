//! Training and continued training with Adam, a two-phase learning rate,
//! periodic checkpoints and an NDJSON metrics log.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainingState};
use crate::error::{Error, Result};
use crate::eval::{argmax_binary, confusion, metrics};
use crate::fusion::IGNORE;
use crate::loss::{total_loss, LossDiagnostics, LossWeights};
use crate::model::{ModelConfig, ModelInput, UTae};
use crate::nn::{Adam, Tape, Tensor};
use crate::sits::{NormStats, PatchSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Rate used from `decay_epoch` on.
    pub decayed_learning_rate: f64,
    pub decay_epoch: usize,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 saves only the last.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_log: Option<PathBuf>,
    /// Validate every this many epochs; 0 disables validation.
    pub validate_every: usize,
    /// Worker threads for per-sample gradients; 0 uses the global pool.
    pub jobs: usize,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            learning_rate: 1e-3,
            decayed_learning_rate: 1e-4,
            decay_epoch: 50,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
            metrics_log: None,
            validate_every: 1,
            jobs: 0,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for lr in [self.learning_rate, self.decayed_learning_rate] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("learning rate {lr} must be positive")));
            }
        }
        self.weights.validate()
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if epoch < self.decay_epoch { self.learning_rate } else { self.decayed_learning_rate }
    }
}

/// A patch prepared for the model.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub input: ModelInput,
    /// H·W fused labels.
    pub labels: Vec<u8>,
    /// H·W quality mask.
    pub mask: Vec<u8>,
}

impl TrainSample {
    pub fn from_patch(patch: &PatchSample, norm: &NormStats) -> Result<Self> {
        Ok(Self {
            input: ModelInput::from_cube(&patch.cube, norm)?,
            labels: patch.labels.iter().copied().collect(),
            mask: patch.quality_mask.iter().copied().collect(),
        })
    }
}

/// Held-out input with its reference map ({0, 1, IGNORE}).
#[derive(Clone, Debug)]
pub struct ValidationSample {
    pub input: ModelInput,
    pub reference: Array2<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub supervised: f64,
    pub unsupervised: f64,
    pub similar: f64,
    pub dissimilar: f64,
    pub neighbor: f64,
    pub mask_fraction: f64,
    pub anchors: usize,
    pub attention_fallbacks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub val_avg_f1: Option<f64>,
    pub val_oa: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogLine<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
}

struct MetricsLog(Option<BufWriter<File>>, PathBuf);

impl MetricsLog {
    fn open(path: Option<&PathBuf>) -> Result<Self> {
        match path {
            None => Ok(Self(None, PathBuf::new())),
            Some(p) => {
                let f = File::create(p).map_err(|e| Error::io(p, e))?;
                Ok(Self(Some(BufWriter::new(f)), p.clone()))
            }
        }
    }

    fn write(&mut self, line: LogLine) -> Result<()> {
        if let Some(w) = &mut self.0 {
            serde_json::to_writer(&mut *w, &line)?;
            w.write_all(b"\n").map_err(|e| Error::io(&self.1, e))?;
            w.flush().map_err(|e| Error::io(&self.1, e))?;
        }
        Ok(())
    }
}

struct SampleResult {
    grads: BTreeMap<String, Tensor>,
    diag: LossDiagnostics,
    fallbacks: usize,
}

fn sample_gradients(model: &UTae, s: &TrainSample, w: &LossWeights, seed: u64) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let f = model.forward(&mut tape, &p, &s.input)?;
    let z = if w.unsupervised_enabled() { model.feature_space(&mut tape, &f.decoder) } else { f.probs };
    let (loss, diag) = total_loss(&mut tape, f.probs, z, &s.labels, &s.mask, w, seed)?;
    let mut grads = BTreeMap::new();
    if diag.total.is_finite() {
        let mut g = tape.backward(loss);
        for (name, &var) in p.iter() {
            if let Some(t) = g.take(var) {
                grads.insert(name.clone(), t);
            }
        }
    }
    Ok(SampleResult { grads, diag, fallbacks: f.attention_fallbacks })
}

/// Mean macro F1 and OA of the model on the validation samples.
pub fn validate(model: &UTae, samples: &[ValidationSample]) -> Result<(f64, f64)> {
    let mut cm = crate::eval::ConfusionMatrix::default();
    for s in samples {
        let pred = argmax_binary(&model.predict_probs(&s.input)?);
        let valid = s.reference.mapv(|r| r != IGNORE);
        if let Ok(c) = confusion(&pred, &s.reference, &valid) {
            cm.merge(&c);
        }
    }
    let m = metrics(&cm)?;
    Ok((m.avg_f1, m.oa))
}

pub(crate) fn mix(seed: u64, a: u64) -> u64 {
    // splitmix64 step
    let mut z = seed.wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn run(
    mut model: UTae,
    norm: NormStats,
    mut state: TrainingState,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    validation: Option<&[ValidationSample]>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() && cfg.epochs > 0 {
        return Err(Error::InvalidParameter("training needs at least one patch".into()));
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let pool = if cfg.jobs > 0 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.jobs)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };
    let mut log = MetricsLog::open(cfg.metrics_log.as_ref())?;
    let mut adam = Adam::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let save = |model: &UTae, state: &TrainingState, name: &str| -> Result<()> {
        if let Some(dir) = &cfg.checkpoint_dir {
            Checkpoint { model: model.clone(), norm: norm.clone(), state: state.clone() }.save(dir.join(name))?;
        }
        Ok(())
    };

    for local_epoch in 0..cfg.epochs {
        let epoch = state.epoch;
        let lr = cfg.learning_rate_at(local_epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let step_seed: u64 = rng.random();
            let work = |i: usize, &idx: &usize| sample_gradients(&model, &samples[idx], &cfg.weights, mix(step_seed, i as u64));
            let results: Vec<Result<SampleResult>> = match &pool {
                Some(p) => p.install(|| batch.par_iter().enumerate().map(|(i, idx)| work(i, idx)).collect()),
                None => batch.par_iter().enumerate().map(|(i, idx)| work(i, idx)).collect(),
            };
            let results: Vec<SampleResult> = results.into_iter().collect::<Result<_>>()?;
            if results.iter().any(|r| !r.diag.total.is_finite()) {
                save(&model, &state, "last_good.cws")?;
                return Err(Error::Diverged { epoch, step: state.step });
            }
            let n = results.len() as f64;
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            for r in &results {
                for (k, g) in &r.grads {
                    match grads.get_mut(k) {
                        Some(acc) => acc.add_assign(g),
                        None => {
                            grads.insert(k.clone(), g.clone());
                        }
                    }
                }
            }
            for g in grads.values_mut() {
                g.scale(1.0 / n);
            }
            let mean = |f: &dyn Fn(&SampleResult) -> f64| results.iter().map(f).sum::<f64>() / n;
            let rec = StepRecord {
                epoch,
                step: state.step,
                lr,
                loss: mean(&|r| r.diag.total),
                supervised: mean(&|r| r.diag.supervised),
                unsupervised: mean(&|r| r.diag.unsupervised),
                similar: mean(&|r| r.diag.terms.similar),
                dissimilar: mean(&|r| r.diag.terms.dissimilar),
                neighbor: mean(&|r| r.diag.terms.neighbor),
                mask_fraction: mean(&|r| r.diag.mask_fraction),
                anchors: results.iter().map(|r| r.diag.anchors).sum(),
                attention_fallbacks: results.iter().map(|r| r.fallbacks).sum(),
            };
            let before = model.params.clone();
            adam.update(&mut model.params, &grads, lr);
            if model.params.values().any(|t| !t.is_finite()) {
                model.params = before;
                save(&model, &state, "last_good.cws")?;
                return Err(Error::Diverged { epoch, step: state.step });
            }
            epoch_loss += rec.loss * n;
            log.write(LogLine::Step(&rec))?;
            steps.push(rec);
            state.step += 1;
        }
        state.epoch += 1;
        let (val_avg_f1, val_oa) = match validation {
            Some(v) if cfg.validate_every > 0 && (local_epoch + 1) % cfg.validate_every == 0 && !v.is_empty() => {
                let (f1, oa) = validate(&model, v)?;
                (Some(f1), Some(oa))
            }
            _ => (None, None),
        };
        let rec = EpochRecord { epoch, lr, mean_loss: epoch_loss / samples.len() as f64, val_avg_f1, val_oa };
        log.write(LogLine::Epoch(&rec))?;
        epochs.push(rec);
        if cfg.checkpoint_every > 0 && (local_epoch + 1) % cfg.checkpoint_every == 0 {
            save(&model, &state, &format!("epoch_{:04}.cws", state.epoch))?;
        }
    }
    save(&model, &state, "last.cws")?;
    Ok(TrainOutcome { checkpoint: Checkpoint { model, norm, state }, steps, epochs })
}

/// Trains a fresh model. `norm` defaults to statistics over the patches.
pub fn train(
    patches: &[PatchSample],
    model_config: ModelConfig,
    norm: Option<NormStats>,
    cfg: &TrainConfig,
    validation: Option<&[ValidationSample]>,
) -> Result<TrainOutcome> {
    let norm = match norm {
        Some(n) => n,
        None => NormStats::from_cubes(patches.iter().map(|p| &p.cube))?,
    };
    let samples = patches.iter().map(|p| TrainSample::from_patch(p, &norm)).collect::<Result<Vec<_>>>()?;
    train_samples(&samples, UTae::new(model_config)?, norm, cfg, validation)
}

/// Trains `model` on prepared samples.
pub fn train_samples(
    samples: &[TrainSample],
    model: UTae,
    norm: NormStats,
    cfg: &TrainConfig,
    validation: Option<&[ValidationSample]>,
) -> Result<TrainOutcome> {
    run(model, norm, TrainingState::default(), samples, cfg, validation)
}

/// Resumes from a checkpoint's parameters with a fresh optimizer; the
/// checkpoint's normalization statistics are kept.
pub fn continue_train(
    checkpoint: &Checkpoint,
    patches: &[PatchSample],
    cfg: &TrainConfig,
    validation: Option<&[ValidationSample]>,
) -> Result<TrainOutcome> {
    if let Some(p) = patches.first() {
        let (t, c, _, _) = p.cube.dims();
        checkpoint.ensure_compatible(c, t)?;
    }
    let samples =
        patches.iter().map(|p| TrainSample::from_patch(p, &checkpoint.norm)).collect::<Result<Vec<_>>>()?;
    run(checkpoint.model.clone(), checkpoint.norm.clone(), checkpoint.state.clone(), &samples, cfg, validation)
}
