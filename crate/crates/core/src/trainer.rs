//! The epoch loop: deterministic batch assembly, metrics log, periodic
//! checkpoints and bit-exact resume.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, write_atomic};
use crate::error::{Error, Result};
use crate::kinematics::Pose;
use crate::model::{Model, ModelConfig};
use crate::skeleton::SkeletonSpec;
use crate::train::{prepare_batch_item, training_step, Adam, BatchItem, LossBreakdown, TrainConfig};

pub const CHECKPOINT_FILE: &str = "model.prck";
pub const STATE_FILE: &str = "state.prts";
pub const METRICS_FILE: &str = "metrics.jsonl";

const STATE_MAGIC: &[u8; 4] = b"PRTS";
const STATE_VERSION: u32 = 1;

/// One metrics-log line: losses averaged over the logging interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: u64,
    pub wall_time_s: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StateHeader {
    step: u64,
    adam_t: u64,
    interval_sum: LossBreakdown,
    interval_count: u64,
    elapsed_s: f64,
    parameter_count: usize,
}

/// Optimizer and loop state saved beside the checkpoint.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub adam: Adam,
    interval_sum: LossBreakdown,
    interval_count: u64,
    elapsed_s: f64,
}

fn encode_state(state: &TrainState) -> Result<Vec<u8>> {
    let header = StateHeader {
        step: state.step,
        adam_t: state.adam.t,
        interval_sum: state.interval_sum,
        interval_count: state.interval_count,
        elapsed_s: state.elapsed_s,
        parameter_count: state.adam.m.len(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 16 * state.adam.m.len());
    out.extend_from_slice(STATE_MAGIC);
    out.extend_from_slice(&STATE_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in state.adam.m.iter().chain(&state.adam.v) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn decode_state(bytes: &[u8], config: &TrainConfig) -> Result<TrainState> {
    if bytes.len() < 16 || &bytes[..4] != STATE_MAGIC {
        return Err(Error::Format("not a training-state file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != STATE_VERSION {
        return Err(Error::Format(format!("unsupported training-state version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let rest = &bytes[16..];
    if rest.len() < len {
        return Err(Error::Format("truncated training state".into()));
    }
    let header: StateHeader =
        serde_json::from_slice(&rest[..len]).map_err(|e| Error::Format(format!("bad training state: {e}")))?;
    let payload = &rest[len..];
    let n = header.parameter_count;
    if payload.len() != 16 * n {
        return Err(Error::Format("training-state payload has the wrong size".into()));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut adam = Adam::new(n, config);
    adam.t = header.adam_t;
    adam.m.copy_from_slice(&values[..n]);
    adam.v.copy_from_slice(&values[n..]);
    Ok(TrainState {
        step: header.step,
        adam,
        interval_sum: header.interval_sum,
        interval_count: header.interval_count,
        elapsed_s: header.elapsed_s,
    })
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Frame order for one epoch, a pure function of `(seed, epoch)`.
fn epoch_order(seed: u64, epoch: u64, frames: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..frames).collect();
    order.shuffle(&mut stream_rng(seed ^ 0x5eed_0f_e90c, epoch));
    order
}

/// Deterministic batch assembly: every random choice for step `s` comes from
/// generators derived from `(seed, s)`, so a resumed run needs only `s`.
pub struct BatchSampler<'a> {
    poses: &'a [Pose],
    skeleton: &'a SkeletonSpec,
    config: &'a TrainConfig,
    steps_per_epoch: u64,
    cached_epoch: Option<(u64, Vec<usize>)>,
}

impl<'a> BatchSampler<'a> {
    pub fn new(poses: &'a [Pose], skeleton: &'a SkeletonSpec, config: &'a TrainConfig) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let steps_per_epoch = poses.len().div_ceil(config.batch_size) as u64;
        Ok(Self {
            poses,
            skeleton,
            config,
            steps_per_epoch,
            cached_epoch: None,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    /// Items for step `step` and the dropout generator for that step.
    pub fn batch(&mut self, step: u64) -> Result<(Vec<BatchItem>, ChaCha8Rng)> {
        let epoch = step / self.steps_per_epoch;
        let within = (step % self.steps_per_epoch) as usize;
        if self.cached_epoch.as_ref().map(|c| c.0) != Some(epoch) {
            self.cached_epoch = Some((epoch, epoch_order(self.config.seed, epoch, self.poses.len())));
        }
        let order = &self.cached_epoch.as_ref().expect("just filled").1;
        let mut rng = stream_rng(self.config.seed, 2 * step);
        let count = rng.random_range(self.config.min_effectors..=self.config.max_effectors);
        let b = self.config.batch_size;
        let jobs: Vec<(usize, u64)> = (0..b)
            .map(|k| (order[(within * b + k) % order.len()], rng.random::<u64>()))
            .collect();
        let dropout_rng = stream_rng(self.config.seed, 2 * step + 1);
        let items = jobs
            .par_iter()
            .map(|&(frame, item_seed)| {
                let mut r = ChaCha8Rng::seed_from_u64(item_seed);
                prepare_batch_item(&self.poses[frame], self.skeleton, count, self.config, &mut r)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((items, dropout_rng))
    }
}

/// Total optimizer steps implied by the config for a split of `frames`.
pub fn total_steps(config: &TrainConfig, frames: usize) -> u64 {
    config
        .max_steps
        .unwrap_or_else(|| config.epochs as u64 * frames.div_ceil(config.batch_size) as u64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub steps: u64,
    pub last_record: Option<MetricsRecord>,
    pub checkpoint: PathBuf,
}

/// Everything a run needs besides the data.
#[derive(Debug, Clone)]
pub struct TrainRun<'a> {
    pub skeleton: &'a SkeletonSpec,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub out_dir: PathBuf,
    /// Continue from `out_dir` if it holds a checkpoint and state.
    pub resume: bool,
    /// Stop after this step even if more are configured (used to simulate interrupts).
    pub stop_after: Option<u64>,
}

fn truncate_metrics(path: &Path, keep_through: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let reader = BufReader::new(fs::File::open(path)?);
    let mut kept = String::new();
    for line in reader.lines() {
        let line = line?;
        let rec: MetricsRecord = serde_json::from_str(&line)?;
        if rec.step <= keep_through {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

fn save_all(model: &Model, state: &TrainState, run: &TrainRun<'_>) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert("skeleton".to_string(), run.skeleton.name.clone());
    meta.insert("step".to_string(), state.step.to_string());
    save_checkpoint(model, &meta, run.out_dir.join(CHECKPOINT_FILE))?;
    write_atomic(&run.out_dir.join(STATE_FILE), &encode_state(state)?)
}

/// Runs the training loop over `poses`.
pub fn train(poses: &[Pose], run: &TrainRun<'_>) -> Result<TrainOutcome> {
    let mut model_config = run.model_config.clone();
    model_config.joint_count = run.skeleton.joint_count();
    model_config.validate()?;
    let config = &run.train_config;
    config.validate(run.skeleton.joint_count())?;
    fs::create_dir_all(&run.out_dir)?;
    let ckpt_path = run.out_dir.join(CHECKPOINT_FILE);
    let state_path = run.out_dir.join(STATE_FILE);
    let metrics_path = run.out_dir.join(METRICS_FILE);

    let (mut model, mut state) = if run.resume && ckpt_path.exists() && state_path.exists() {
        let (model, _) = load_checkpoint(&ckpt_path)?;
        if model.config != model_config {
            return Err(Error::Config("checkpoint config differs from the requested model config".into()));
        }
        let state = decode_state(&fs::read(&state_path)?, config)?;
        if state.adam.m.len() != model.params.parameter_count() {
            return Err(Error::Format("training state does not match the checkpoint".into()));
        }
        truncate_metrics(&metrics_path, state.step)?;
        (model, state)
    } else {
        let model = Model::new(model_config, config.seed)?;
        let n = model.params.parameter_count();
        if metrics_path.exists() {
            fs::remove_file(&metrics_path)?;
        }
        (
            model,
            TrainState {
                step: 0,
                adam: Adam::new(n, config),
                interval_sum: LossBreakdown::default(),
                interval_count: 0,
                elapsed_s: 0.0,
            },
        )
    };

    let mut sampler = BatchSampler::new(poses, run.skeleton, config)?;
    let total = total_steps(config, poses.len());
    let end = run.stop_after.map_or(total, |s| s.min(total));
    let mut log = fs::OpenOptions::new().create(true).append(true).open(&metrics_path)?;
    let started = Instant::now();
    let base_elapsed = state.elapsed_s;
    let mut last_record = None;

    while state.step < end {
        let (items, mut dropout_rng) = sampler.batch(state.step)?;
        let loss = training_step(&mut model, &mut state.adam, run.skeleton, &items, config, &mut dropout_rng)?;
        state.step += 1;
        state.interval_sum.add_scaled(&loss, 1.0);
        state.interval_count += 1;
        state.elapsed_s = base_elapsed + started.elapsed().as_secs_f64();
        if state.step % config.log_interval == 0 {
            let mut mean = LossBreakdown::default();
            mean.add_scaled(&state.interval_sum, 1.0 / state.interval_count as f64);
            let rec = MetricsRecord {
                step: state.step,
                epoch: (state.step - 1) / sampler.steps_per_epoch(),
                wall_time_s: state.elapsed_s,
                loss: mean,
            };
            writeln!(log, "{}", serde_json::to_string(&rec)?)?;
            log.flush()?;
            last_record = Some(rec);
            state.interval_sum = LossBreakdown::default();
            state.interval_count = 0;
        }
        if state.step % config.checkpoint_interval == 0 || state.step == end {
            save_all(&model, &state, run)?;
        }
    }
    if state.step == 0 || !ckpt_path.exists() {
        save_all(&model, &state, run)?;
    }
    Ok(TrainOutcome {
        model,
        steps: state.step,
        last_record,
        checkpoint: ckpt_path,
    })
}

/// Reads a metrics log.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    reader
        .lines()
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}
