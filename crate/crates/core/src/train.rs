//! Adam optimization, the training loop with ground-truth scene selection,
//! argmax evaluation, and versioned checkpointing.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{ConfigError, ModelConfig, RunConfig, TrainConfig};
use crate::data::{load_image, DataError, DatasetManifest};
use crate::loss::{multiscene_loss, LossError};
use crate::model::{Model, ModelError};
use crate::nn::Mode;
use crate::pose::{angular_error_deg, position_error_m, summarize, Pose, PoseError, PoseErrorSummary, SampleError};
use crate::rng::{streams, RngState};
use crate::tensor::{backward, concat, Element, ParamSet, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("parameter {0} has no gradient; run backward before adam_step")]
    MissingGradient(String),
    #[error("dataset has {found} scenes but the model embeds {expected}")]
    SceneCountMismatch { found: usize, expected: usize },
    #[error("training requires a non-empty dataset")]
    EmptyDataset,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io { path: path.display().to_string(), source }
}

// ── Adam ────────────────────────────────────────────────────────────

/// Adam moment buffers, parallel to the parameter set order.
pub struct AdamState<E: Element> {
    pub m: Vec<Vec<E>>,
    pub v: Vec<Vec<E>>,
    pub t: u64,
}

impl<E: Element> AdamState<E> {
    pub fn new(params: &ParamSet<E>) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![E::ZERO; p.numel()]).collect(),
            v: params.iter().map(|p| vec![E::ZERO; p.numel()]).collect(),
            t: 0,
        }
    }
}

/// One Adam update with bias correction:
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
/// `p <- p - lr * m_hat / (sqrt(v_hat) + eps)`.
///
/// An optional global-norm clip rescales all gradients first.
pub fn adam_step<E: Element>(
    params: &ParamSet<E>,
    state: &mut AdamState<E>,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let mut grads: Vec<Vec<E>> = Vec::with_capacity(params.len());
    for p in params.iter() {
        grads.push(p.grad().ok_or_else(|| TrainError::MissingGradient(p.name().to_string()))?);
    }
    if cfg.grad_clip > 0.0 {
        global_norm_clip(&mut grads, cfg.grad_clip);
    }
    state.t += 1;
    let bc1 = E::from_f64(1.0 - cfg.beta1.powi(state.t as i32));
    let bc2 = E::from_f64(1.0 - cfg.beta2.powi(state.t as i32));
    let b1 = E::from_f64(cfg.beta1);
    let b2 = E::from_f64(cfg.beta2);
    let one_m_b1 = E::from_f64(1.0 - cfg.beta1);
    let one_m_b2 = E::from_f64(1.0 - cfg.beta2);
    let lr = E::from_f64(cfg.lr);
    let eps = E::from_f64(cfg.eps);
    for ((p, g), (m, v)) in
        params.iter().zip(&grads).zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        p.update_value(|theta| {
            for i in 0..theta.len() {
                m[i] = b1 * m[i] + one_m_b1 * g[i];
                v[i] = b2 * v[i] + one_m_b2 * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
    Ok(())
}

/// Rescale gradients so their joint Euclidean norm does not exceed
/// `clip`. Returns the pre-clip norm.
pub fn global_norm_clip<E: Element>(grads: &mut [Vec<E>], clip: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.to_f64() * v.to_f64())
        .sum::<f64>()
        .sqrt();
    if total > clip {
        let scale = E::from_f64(clip / total);
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    total
}

// ── data plumbing ───────────────────────────────────────────────────

/// A sample with its image decoded, cropped, resized and standardized.
pub struct LoadedSample {
    pub image: Tensor<f32>,
    pub scene_id: usize,
    pub pose: Pose,
}

/// Eagerly load every sample of a manifest at the model input size.
pub fn load_samples(
    manifest: &DatasetManifest,
    input_hw: usize,
) -> Result<Vec<LoadedSample>, DataError> {
    manifest
        .samples
        .iter()
        .map(|s| {
            Ok(LoadedSample {
                image: load_image(&s.image, input_hw, &manifest.stats)?,
                scene_id: s.scene_id,
                pose: s.pose,
            })
        })
        .collect()
}

/// Sample indices of the batch at `step`: epochs shuffle deterministically
/// under `(seed, epoch)`, batches are consecutive chunks, a trailing
/// partial batch is dropped (the whole set is one batch when smaller).
pub fn batch_indices(seed: u64, step: u64, n_samples: usize, batch_size: usize) -> Vec<usize> {
    if n_samples <= batch_size {
        return (0..n_samples).collect();
    }
    let per_epoch = (n_samples / batch_size) as u64;
    let epoch = step / per_epoch;
    let slot = (step % per_epoch) as usize;
    let mut perm: Vec<usize> = (0..n_samples).collect();
    let mut rng = RngState::new(seed).fork(&[streams::SHUFFLE, epoch]);
    rng.shuffle(&mut perm);
    perm[slot * batch_size..(slot + 1) * batch_size].to_vec()
}

// ── training ────────────────────────────────────────────────────────

/// Optional image transform applied per sample at train time.
pub type AugmentFn = Box<dyn Fn(&Tensor<f32>, &mut RngState) -> Tensor<f32>>;

pub struct Trainer {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub train_cfg: TrainConfig,
    pub step: u64,
    pub dropout_rng: RngState,
    /// Augmentation hook; none ships by default.
    pub augment: Option<AugmentFn>,
}

/// Per-step diagnostics.
pub struct StepResult {
    pub loss: f32,
    /// Scene slot actually used per sample (ground truth at train time).
    pub selected_scenes: Vec<usize>,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<Self, TrainError> {
        train_cfg.validate()?;
        let model = Model::new(model_cfg, train_cfg.seed)?;
        model.loss_params.set(train_cfg.s_x_init, train_cfg.s_q_init);
        let adam = AdamState::new(&model.params);
        let dropout_rng = RngState::new(train_cfg.seed).fork(&[streams::DROPOUT]);
        Ok(Trainer {
            model,
            adam,
            train_cfg: train_cfg.clone(),
            step: 0,
            dropout_rng,
            augment: None,
        })
    }

    pub fn resume(checkpoint: &Checkpoint, train_cfg: &TrainConfig) -> Result<Self, TrainError> {
        train_cfg.validate()?;
        let model = checkpoint.restore_model()?;
        let adam = checkpoint.restore_adam(&model)?;
        Ok(Trainer {
            model,
            adam,
            train_cfg: train_cfg.clone(),
            step: checkpoint.step,
            dropout_rng: checkpoint.rng,
            augment: None,
        })
    }

    /// One optimization step: forward every batch sample with the
    /// ground-truth scene override, average the multi-scene losses,
    /// backpropagate, apply Adam, clear gradients.
    pub fn step(&mut self, samples: &[LoadedSample]) -> Result<StepResult, TrainError> {
        if samples.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let indices = batch_indices(
            self.train_cfg.seed,
            self.step,
            samples.len(),
            self.train_cfg.batch_size,
        );
        self.model.params.clear_grads();
        let mut losses = Vec::with_capacity(indices.len());
        let mut selected = Vec::with_capacity(indices.len());
        for &i in &indices {
            let sample = &samples[i];
            let image = match &self.augment {
                Some(f) => f(&sample.image, &mut self.dropout_rng),
                None => sample.image.clone(),
            };
            let out = self.model.forward(
                &image,
                Some(sample.scene_id),
                Mode::train(),
                &mut self.dropout_rng,
            )?;
            selected.push(out.selected_scene);
            losses.push(multiscene_loss(
                &out,
                &sample.pose,
                sample.scene_id,
                &self.model.loss_params,
                Mode::train(),
            )?);
        }
        let refs: Vec<&Tensor<f32>> = losses.iter().collect();
        let batch_loss = concat(&refs, 0)?.mean_all();
        backward(&batch_loss)?;
        adam_step(&self.model.params, &mut self.adam, &self.train_cfg)?;
        self.model.params.clear_grads();
        self.step += 1;
        Ok(StepResult { loss: batch_loss.item(), selected_scenes: selected })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        save_checkpoint(path, &self.model, &self.adam, self.step, self.dropout_rng)
    }
}

/// Argmax-selection evaluation over a sample set: per-sample position and
/// orientation errors plus scene classification correctness, summarized as
/// per-scene medians.
pub fn evaluate(model: &Model<f32>, samples: &[LoadedSample]) -> Result<PoseErrorSummary, TrainError> {
    let mut errors = Vec::with_capacity(samples.len());
    let mut rng = RngState::new(0); // unused in eval mode
    for sample in samples {
        let out = model.forward(&sample.image, None, Mode::eval(), &mut rng)?;
        let x = out.x_hat.data();
        let predicted = [x[0] as f64, x[1] as f64, x[2] as f64];
        let q = out.q_hat.data();
        let q_pred = crate::pose::Quaternion::new(
            q[0] as f64,
            q[1] as f64,
            q[2] as f64,
            q[3] as f64,
        )
        .normalize()?;
        errors.push(SampleError {
            scene_id: sample.scene_id,
            position_m: position_error_m(&predicted, &sample.pose.position),
            orientation_deg: angular_error_deg(&q_pred, &sample.pose.orientation),
            scene_correct: out.selected_scene == sample.scene_id,
        });
    }
    Ok(summarize(&errors)?)
}

// ── checkpointing ───────────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 4] = b"MSCK";
const CKPT_VERSION: u32 = 1;
const ADAM_M_PREFIX: &str = "adam.m:";
const ADAM_V_PREFIX: &str = "adam.v:";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("checkpoint config echo does not parse: {0}")]
    BadConfig(#[from] ConfigError),
    #[error("checkpoint incompatible with model: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Deserialized checkpoint contents.
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub rng: RngState,
    pub adam_t: u64,
    tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model<f32>,
    adam: &AdamState<f32>,
    step: u64,
    rng: RngState,
) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let echo = model.config.to_kv();
    buf.extend_from_slice(&(echo.len() as u32).to_le_bytes());
    buf.extend_from_slice(echo.as_bytes());
    buf.extend_from_slice(&step.to_le_bytes());
    buf.extend_from_slice(&rng.seed.to_le_bytes());
    buf.extend_from_slice(&rng.counter.to_le_bytes());
    buf.extend_from_slice(&adam.t.to_le_bytes());

    let n_params = model.params.len() as u32;
    buf.extend_from_slice(&(3 * n_params).to_le_bytes());
    let mut write_tensor = |name: &str, shape: &[usize], data: &[f32]| {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (i, p) in model.params.iter().enumerate() {
        write_tensor(p.name(), p.shape(), &p.value());
        write_tensor(&format!("{ADAM_M_PREFIX}{}", p.name()), p.shape(), &adam.m[i]);
        write_tensor(&format!("{ADAM_V_PREFIX}{}", p.name()), p.shape(), &adam.v[i]);
    }
    fs::write(path, buf).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let bytes = fs::read(path).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
            let slice = bytes.get(*pos..*pos + n).ok_or(CheckpointError::Truncated)?;
            *pos += n;
            Ok(slice)
        };
        let magic = take(&mut pos, 4)?;
        if magic != CKPT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let read_u32 = |pos: &mut usize| -> Result<u32, CheckpointError> {
            let b = bytes.get(*pos..*pos + 4).ok_or(CheckpointError::Truncated)?;
            *pos += 4;
            Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        };
        let read_u64 = |pos: &mut usize| -> Result<u64, CheckpointError> {
            let b = bytes.get(*pos..*pos + 8).ok_or(CheckpointError::Truncated)?;
            *pos += 8;
            Ok(u64::from_le_bytes(b.try_into().unwrap()))
        };
        let version = read_u32(&mut pos)?;
        if version != CKPT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let echo_len = read_u32(&mut pos)? as usize;
        let echo = std::str::from_utf8(take(&mut pos, echo_len)?)
            .map_err(|_| CheckpointError::Truncated)?
            .to_string();
        let config = ModelConfig::from_kv(&echo)?;
        let step = read_u64(&mut pos)?;
        let seed = read_u64(&mut pos)?;
        let counter = read_u64(&mut pos)?;
        let adam_t = read_u64(&mut pos)?;
        let n_tensors = read_u32(&mut pos)? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name_len = read_u32(&mut pos)? as usize;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| CheckpointError::Truncated)?
                .to_string();
            let rank = read_u32(&mut pos)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut pos)? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut pos, 4 * numel)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push((name, shape, data));
        }
        if pos != bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        Ok(Checkpoint { config, step, rng: RngState::restore(seed, counter), adam_t, tensors })
    }

    fn find(&self, name: &str) -> Option<&(String, Vec<usize>, Vec<f32>)> {
        self.tensors.iter().find(|(n, _, _)| n == name)
    }

    /// Copy parameter values into an existing model; the name sets and
    /// shapes must match exactly.
    pub fn apply_to_model(&self, model: &Model<f32>) -> Result<(), CheckpointError> {
        let expected: std::collections::BTreeSet<String> = model
            .params
            .iter()
            .flat_map(|p| {
                [
                    p.name().to_string(),
                    format!("{ADAM_M_PREFIX}{}", p.name()),
                    format!("{ADAM_V_PREFIX}{}", p.name()),
                ]
            })
            .collect();
        let present: std::collections::BTreeSet<String> =
            self.tensors.iter().map(|(n, _, _)| n.clone()).collect();
        if expected != present {
            let missing: Vec<_> = expected.difference(&present).take(3).cloned().collect();
            let extra: Vec<_> = present.difference(&expected).take(3).cloned().collect();
            return Err(CheckpointError::Incompatible(format!(
                "parameter name sets differ (missing: {missing:?}, unexpected: {extra:?})"
            )));
        }
        for p in model.params.iter() {
            let (_, shape, data) = self.find(p.name()).expect("name set checked");
            if shape != p.shape() {
                return Err(CheckpointError::Incompatible(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    p.name(),
                    shape,
                    p.shape()
                )));
            }
            p.set_value(data.clone());
        }
        Ok(())
    }

    /// Rebuild the model this checkpoint was saved from.
    pub fn restore_model(&self) -> Result<Model<f32>, CheckpointError> {
        let model = Model::new(&self.config, 0)?;
        self.apply_to_model(&model)?;
        Ok(model)
    }

    pub fn restore_adam(&self, model: &Model<f32>) -> Result<AdamState<f32>, CheckpointError> {
        let mut state = AdamState::new(&model.params);
        state.t = self.adam_t;
        for (i, p) in model.params.iter().enumerate() {
            for (prefix, buf) in
                [(ADAM_M_PREFIX, &mut state.m[i]), (ADAM_V_PREFIX, &mut state.v[i])]
            {
                let name = format!("{prefix}{}", p.name());
                let (_, shape, data) = self
                    .find(&name)
                    .ok_or_else(|| CheckpointError::Incompatible(format!("missing {name}")))?;
                if shape != p.shape() {
                    return Err(CheckpointError::Incompatible(format!(
                        "optimizer tensor {name} shape mismatch"
                    )));
                }
                buf.copy_from_slice(data);
            }
        }
        Ok(state)
    }
}

// ── full training run ───────────────────────────────────────────────

pub struct TrainOutcome {
    pub steps_run: u64,
    pub final_loss: f32,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

/// Train to `max_steps`, logging `step,loss,lr` CSV rows (flushed every
/// `eval_every` steps, when the latest checkpoint is also refreshed).
/// Resuming appends to the existing log and continues the step counter.
pub fn run_training(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    if manifest.n_scenes() != cfg.model.n_scenes {
        return Err(TrainError::SceneCountMismatch {
            found: manifest.n_scenes(),
            expected: cfg.model.n_scenes,
        });
    }
    if manifest.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let samples = load_samples(manifest, cfg.model.input_hw)?;

    let mut trainer = match resume {
        Some(ckpt_path) => {
            let ckpt = Checkpoint::load(ckpt_path)?;
            if ckpt.config != cfg.model {
                return Err(TrainError::Checkpoint(CheckpointError::Incompatible(
                    "checkpoint config echo differs from the requested model config".into(),
                )));
            }
            Trainer::resume(&ckpt, &cfg.train)?
        }
        None => Trainer::new(&cfg.model, &cfg.train)?,
    };

    let log_path = out_dir.join("train_log.csv");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    if trainer.step == 0 {
        writeln!(log, "step,loss,lr").map_err(|e| io_err(&log_path, e))?;
    }

    let latest = out_dir.join("checkpoint_latest.msck");
    let mut final_loss = f32::NAN;
    while trainer.step < cfg.train.max_steps as u64 {
        let result = trainer.step(&samples)?;
        final_loss = result.loss;
        writeln!(log, "{},{},{}", trainer.step, result.loss, cfg.train.lr)
            .map_err(|e| io_err(&log_path, e))?;
        if trainer.step % cfg.train.eval_every as u64 == 0 {
            log.flush().map_err(|e| io_err(&log_path, e))?;
            trainer.save(&latest)?;
            log::info!("step {} loss {}", trainer.step, result.loss);
        }
    }
    log.flush().map_err(|e| io_err(&log_path, e))?;
    let checkpoint_path = out_dir.join("checkpoint_final.msck");
    trainer.save(&checkpoint_path)?;
    Ok(TrainOutcome {
        steps_run: trainer.step,
        final_loss,
        checkpoint_path,
        log_path,
    })
}
