//! Three-stage training: spotting-only pre-training, multi-task
//! pre-training and supervised fine-tuning, with data mixing, a resolution
//! curriculum and checkpoints.

mod checkpoint;
mod mixing;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::PromptTask;
use crate::data::TrainItem;
use crate::error::{Error, Result};
use crate::model::{Example, Model, ModelConfig};
use crate::tensor::{Adam, AdamConfig, Tape};

pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, load_checkpoint_for, read_checkpoint_info, save_checkpoint,
    CheckpointInfo, CheckpointMeta, TensorInfo, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use mixing::{mix_batches, EpochCycler, MixedBatches, WeightedStream};

/// Fine-tuning length before desk scaling.
pub const FINETUNE_STEPS: usize = 2000;

/// Piecewise-constant image side: `small` for the first `switch_fraction`
/// of the stage, `large` afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolutionSchedule {
    pub small: usize,
    pub large: usize,
    pub switch_fraction: f64,
}

impl ResolutionSchedule {
    pub fn fixed(size: usize) -> Self {
        ResolutionSchedule { small: size, large: size, switch_fraction: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    /// 1, 2 or 3.
    pub stage: u8,
    pub tasks: Vec<PromptTask>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of steps with linearly increasing learning rate.
    pub warmup_fraction: f64,
    pub resolution: ResolutionSchedule,
    pub max_seq: usize,
    /// Probability that a batch slot holds a pure-text sample.
    pub pure_text_ratio: f64,
    pub log_every: usize,
}

fn image_tasks() -> Vec<PromptTask> {
    PromptTask::ALL.into_iter().filter(|t| *t != PromptTask::PureText).collect()
}

impl StageConfig {
    /// Desk preset for `stage`; `desk_factor` scales the fine-tuning length.
    pub fn desk(stage: u8, desk_factor: f64) -> Result<Self> {
        let base = StageConfig {
            stage,
            tasks: vec![PromptTask::Spotting],
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            warmup_fraction: 0.05,
            resolution: ResolutionSchedule { small: 32, large: 64, switch_fraction: 0.5 },
            max_seq: 512,
            pure_text_ratio: 0.0,
            log_every: 50,
        };
        let cfg = match stage {
            1 => base,
            2 => StageConfig {
                tasks: image_tasks(),
                steps: 1000,
                resolution: ResolutionSchedule::fixed(64),
                pure_text_ratio: 0.1,
                ..base
            },
            3 => StageConfig::desk(2, desk_factor)?.finetune(desk_factor),
            s => return Err(Error::Config(format!("stage {s} does not exist; stages are 1, 2 and 3"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Documentation-scale preset; never executed here.
    pub fn full_scale(stage: u8) -> Result<Self> {
        let mut cfg = StageConfig::desk(stage, 1.0)?;
        cfg.max_seq = 4096;
        cfg.resolution = if stage == 1 {
            ResolutionSchedule { small: 960, large: 1600, switch_fraction: 0.5 }
        } else {
            ResolutionSchedule::fixed(1600)
        };
        Ok(cfg)
    }

    /// Stage-3 settings derived from this stage-2 configuration: every
    /// hyperparameter kept, steps set to the scaled fine-tuning length.
    pub fn finetune(&self, desk_factor: f64) -> Self {
        self.finetune_with_steps(finetune_steps(desk_factor))
    }

    pub fn finetune_with_steps(&self, steps: usize) -> Self {
        StageConfig { stage: 3, steps, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage) {
            return Err(Error::Config(format!("stage {} does not exist; stages are 1, 2 and 3", self.stage)));
        }
        if self.stage == 1 && self.tasks != [PromptTask::Spotting] {
            return Err(Error::Config("stage 1 trains the spotting task only".into()));
        }
        if self.stage == 1 && self.pure_text_ratio != 0.0 {
            return Err(Error::Config("stage 1 mixes in no pure-text samples".into()));
        }
        if self.tasks.is_empty() || self.batch_size == 0 || self.max_seq == 0 || self.log_every == 0 {
            return Err(Error::Config("stage needs tasks, a batch size, a sequence limit and a log interval".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.pure_text_ratio) {
            return Err(Error::Config("pure_text_ratio must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) || !(0.0..=1.0).contains(&self.resolution.switch_fraction) {
            return Err(Error::Config("warmup and switch fractions must lie in [0, 1]".into()));
        }
        if self.stage != 1 && self.resolution.small != self.resolution.large {
            return Err(Error::Config("only stage 1 changes resolution".into()));
        }
        Ok(())
    }

    /// Learning rate at `step` (0-based): linear warmup, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = (self.warmup_fraction * self.steps as f64).ceil() as usize;
        if warm == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / warm as f64).min(1.0)
        }
    }
}

pub fn finetune_steps(desk_factor: f64) -> usize {
    (FINETUNE_STEPS as f64 * desk_factor).round() as usize
}

/// Image side for `step` of `stage`.
pub fn resolution_schedule(step: usize, stage: &StageConfig) -> usize {
    let r = stage.resolution;
    if stage.stage == 1 && (step as f64) < r.switch_fraction * stage.steps as f64 {
        r.small
    } else {
        r.large
    }
}

/// Per-task sampling weights for image-text data. The pure-text share is
/// set per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub weights: BTreeMap<PromptTask, f64>,
}

impl MixtureSpec {
    /// Equal weight on every image task.
    pub fn uniform() -> Self {
        MixtureSpec { weights: image_tasks().into_iter().map(|t| (t, 1.0)).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.values().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("mixture weights must be finite and nonnegative".into()));
        }
        if !self.weights.values().any(|w| *w > 0.0) {
            return Err(Error::Config("mixture needs at least one positive weight".into()));
        }
        Ok(())
    }
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self::uniform()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: u8,
    pub steps: usize,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub stage: u8,
    pub step: usize,
    pub loss: f64,
    pub token_accuracy: f64,
    pub lr: f64,
    pub image_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub final_loss: Option<f64>,
    pub log: Vec<LogRow>,
    /// Samples drawn but skipped because they exceed the sequence limit.
    pub overflow_skips: usize,
    /// Whether each parameter received a gradient during the stage.
    pub touched: Vec<bool>,
}

/// Model, optimizer state and lineage carried across stages.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model<f32>,
    pub adam: Adam<f32>,
    /// Optimizer steps taken over all stages.
    pub step: u64,
    pub seed: u64,
    pub lineage: Vec<StageRecord>,
}

impl Trainer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let model = Model::new(config, seed)?;
        let adam = Adam::new(AdamConfig::default(), model.store.tensors());
        Ok(Trainer { model, adam, step: 0, seed, lineage: Vec::new() })
    }

    /// Names of parameters that never received a gradient.
    pub fn untouched<'a>(&'a self, outcome: &'a StageOutcome) -> Vec<&'a str> {
        self.model
            .store
            .iter()
            .zip(&outcome.touched)
            .filter(|(_, t)| !**t)
            .map(|((name, _), _)| name)
            .collect()
    }
}

fn stage_rng(seed: u64, stage: u8, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (u64::from(stage) << 56) ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Runs one stage on `items` and appends it to the trainer's lineage.
pub fn run_stage(trainer: &mut Trainer, stage: &StageConfig, mixture: &MixtureSpec, items: &[TrainItem]) -> Result<StageOutcome> {
    stage.validate()?;
    mixture.validate()?;
    let max_seq = stage.max_seq.min(trainer.model.config.decoder.max_seq);
    let prefix = trainer.model.config.sampler.prefix_len();
    let fits = |it: &TrainItem| {
        let plen = if it.image.is_some() { prefix } else { 0 };
        plen + it.prompt_ids.len() + it.response_ids.len() + 1 <= max_seq
    };
    let mut pools: Vec<(f64, Vec<usize>)> = Vec::new();
    for (&task, &w) in &mixture.weights {
        if task == PromptTask::PureText || w <= 0.0 || !stage.tasks.contains(&task) {
            continue;
        }
        let idx: Vec<usize> = (0..items.len()).filter(|&i| items[i].task == task && items[i].image.is_some()).collect();
        if !idx.is_empty() {
            pools.push((w, idx));
        }
    }
    if pools.is_empty() {
        return Err(Error::DegenerateBatch(format!("no image-text samples for the tasks of stage {}", stage.stage)));
    }
    let pure: Vec<usize> = (0..items.len()).filter(|&i| items[i].task == PromptTask::PureText).collect();
    let ratio = if pure.is_empty() { 0.0 } else { stage.pure_text_ratio };
    if pools.iter().all(|(_, idx)| idx.iter().all(|&i| !fits(&items[i]))) {
        return Err(Error::SequenceLength { len: max_seq + 1, max: max_seq });
    }

    let seed = trainer.seed;
    let image_stream = WeightedStream::new(
        pools.into_iter().map(|(w, idx)| (w, EpochCycler::new(idx, stage_rng(seed, stage.stage, 1)))).collect(),
        stage_rng(seed, stage.stage, 2),
    );
    let pure_stream = EpochCycler::new(pure, stage_rng(seed, stage.stage, 3));
    let mix_seed = seed ^ (u64::from(stage.stage) << 56) ^ 4;
    let mut slots = mix_batches(image_stream, pure_stream, ratio, mix_seed, 1).flatten();

    let n_params = trainer.model.store.len();
    let mut outcome = StageOutcome { final_loss: None, log: Vec::new(), overflow_skips: 0, touched: vec![false; n_params] };
    for step in 0..stage.steps {
        let size = resolution_schedule(step, stage);
        let mut batch: Vec<Example<f32>> = Vec::with_capacity(stage.batch_size);
        while batch.len() < stage.batch_size {
            let i = slots.next().ok_or_else(|| Error::DegenerateBatch("sample stream ran dry".into()))?;
            let it = &items[i];
            if !fits(it) {
                outcome.overflow_skips += 1;
                continue;
            }
            batch.push(it.example(size)?);
        }
        let model = &mut trainer.model;
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape);
        let out = model.batch_loss(&mut tape, &p, &batch)?;
        let loss = f64::from(tape.data(out.loss)[0]);
        if !loss.is_finite() {
            return Err(Error::NonFinite { stage: stage.stage, step });
        }
        let (correct, total) = model.token_hits(&tape, &out);
        tape.backward(out.loss)?;
        model.store.zero_grads();
        model.store.pull_grads(&tape, &p);
        for (flag, t) in outcome.touched.iter_mut().zip(model.store.tensors()) {
            *flag |= t.grad().is_some();
        }
        let lr = stage.lr_at(step);
        trainer.adam.step_lr(model.store.tensors_mut(), lr)?;
        model.store.zero_grads();
        trainer.step += 1;
        outcome.final_loss = Some(loss);
        if step % stage.log_every == 0 || step + 1 == stage.steps {
            outcome.log.push(LogRow {
                stage: stage.stage,
                step,
                loss,
                token_accuracy: correct as f64 / total.max(1) as f64,
                lr,
                image_size: size,
            });
        }
    }
    trainer.lineage.push(StageRecord { stage: stage.stage, steps: stage.steps, final_loss: outcome.final_loss });
    Ok(outcome)
}

/// Stage 3: the stage-2 loop restricted to the fine-tuning subset, with
/// every stage-2 hyperparameter retained.
pub fn finetune(
    trainer: &mut Trainer,
    stage2: &StageConfig,
    mixture: &MixtureSpec,
    items: &[TrainItem],
    desk_factor: f64,
) -> Result<StageOutcome> {
    run_stage(trainer, &stage2.finetune(desk_factor), mixture, items)
}

/// Teacher-forced `(correct, total)` next-token predictions over `items`
/// at image side `size`.
pub fn teacher_forced_accuracy(model: &Model<f32>, items: &[TrainItem], size: usize) -> Result<(usize, usize)> {
    let (mut c, mut n) = (0, 0);
    for chunk in items.chunks(8) {
        let batch: Vec<Example<f32>> = chunk.iter().map(|it| it.example(size)).collect::<Result<_>>()?;
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape);
        let out = model.batch_loss(&mut tape, &p, &batch)?;
        let (a, b) = model.token_hits(&tape, &out);
        c += a;
        n += b;
    }
    Ok((c, n))
}

#[cfg(test)]
mod tests;
