//! Two-stage training: maximum-likelihood pretraining of the generator and
//! critic, then adversarial fine-tuning on a styled corpus.

mod log;
mod rewards;

use std::time::Instant;

use diffcore::{Adam, AdamConfig, RmsProp, RmsPropConfig, Tape};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Example, Split, Style, Vocabulary, RESERVED, END};
use crate::discriminator::{critic_input, disc_update, CaptionScorer, CriticStep, DiscriminatorParams};
use crate::generator::{
    decode, mle_loss, teacher_forced, DecodeMode, FeatureBatch, GeneratorParams, SampledCaption,
};
use crate::metrics::{bleu, cider, rouge_l, EvalCorpus, EvalItem};
use crate::rng::{purpose, substream};
use crate::{Error, Result};

pub use log::{LogRecord, Phase, TrainLog};
pub use rewards::{combined_generator_loss, mc_rewards, pg_loss, RewardMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValMetric {
    Cider,
    Bleu1,
    Bleu4,
    RougeL,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub rollouts: usize,
    pub g_steps: usize,
    pub d_steps: usize,
    pub gen_lr: f32,
    pub critic_lr: f32,
    pub gen_batch: usize,
    /// Real and fake captions per critic update (each).
    pub critic_batch: usize,
    pub clip: f32,
    pub pretrain_epochs: usize,
    pub critic_pretrain_steps: usize,
    pub adversarial_epochs: usize,
    /// Styled corpus used by the adversarial stage.
    pub style: Style,
    pub val_metric: ValMetric,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.1,
            rollouts: 5,
            g_steps: 1,
            d_steps: 3,
            gen_lr: 1e-4,
            critic_lr: 5e-5,
            gen_batch: 64,
            critic_batch: 80,
            clip: 0.01,
            pretrain_epochs: 60,
            critic_pretrain_steps: 100,
            adversarial_epochs: 20,
            style: Style::Positive,
            val_metric: ValMetric::Cider,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || !self.lambda1.is_finite() || !self.lambda2.is_finite() {
            return Err(Error::Config("lambda1 and lambda2 must be finite and nonnegative".into()));
        }
        if self.rollouts == 0 || self.gen_batch == 0 || self.critic_batch == 0 {
            return Err(Error::Config("rollouts and batch sizes must be positive".into()));
        }
        if !(self.gen_lr > 0.0) || !(self.critic_lr > 0.0) || !(self.clip > 0.0) {
            return Err(Error::Config("learning rates and clip bound must be positive".into()));
        }
        if self.style == Style::Factual {
            return Err(Error::Config("adversarial style must be positive or negative".into()));
        }
        Ok(())
    }

    pub(crate) fn adam(&self) -> Adam {
        Adam::new(AdamConfig {
            lr: self.gen_lr,
            ..AdamConfig::default()
        })
    }

    pub(crate) fn rmsprop(&self) -> RmsProp {
        RmsProp::new(RmsPropConfig {
            lr: self.critic_lr,
            ..RmsPropConfig::default()
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    PretrainGenerator,
    PretrainCritic,
    Adversarial,
}

impl Stage {
    fn key(self) -> u64 {
        match self {
            Stage::PretrainGenerator => 1,
            Stage::PretrainCritic => 2,
            Stage::Adversarial => 3,
        }
    }
}

/// Best validation result seen so far in a stage.
#[derive(Clone, Debug, PartialEq)]
pub struct BestRecord {
    pub epoch: usize,
    pub metric: f64,
    pub generator: GeneratorParams,
}

/// Everything needed to continue a stage exactly where it stopped. Random
/// draws are keyed by the step counters, so no generator state is stored.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub stage: Stage,
    pub generator: GeneratorParams,
    pub critic: Option<DiscriminatorParams>,
    pub gen_opt: Adam,
    pub critic_opt: RmsProp,
    /// Completed epochs.
    pub epoch: usize,
    pub gen_steps: u64,
    pub critic_steps: u64,
    pub best: Option<BestRecord>,
}

impl TrainState {
    pub fn new(
        stage: Stage,
        generator: GeneratorParams,
        critic: Option<DiscriminatorParams>,
        config: &TrainConfig,
    ) -> Self {
        Self {
            stage,
            generator,
            critic,
            gen_opt: config.adam(),
            critic_opt: config.rmsprop(),
            epoch: 0,
            gen_steps: 0,
            critic_steps: 0,
            best: None,
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.gen_steps + self.critic_steps
    }

    /// The best-validation generator, or the current one when no validation
    /// ran.
    pub fn best_generator(&self) -> &GeneratorParams {
        self.best.as_ref().map_or(&self.generator, |b| &b.generator)
    }
}

/// Index of the highest metric; ties go to the earliest entry.
pub fn select_best(metrics: &[f64]) -> Result<usize> {
    if metrics.is_empty() {
        return Err(Error::Invalid("no checkpoints to select from".into()));
    }
    let mut best = 0;
    for (i, &m) in metrics.iter().enumerate() {
        if m > metrics[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Words of a decoded caption; a caption that ended immediately is
/// represented by the end token so that it stays a nonempty candidate.
pub fn candidate_tokens(vocab: &Vocabulary, ids: &[usize]) -> Vec<String> {
    let words = vocab.decode(ids);
    if words.is_empty() {
        vec![RESERVED[END].to_string()]
    } else {
        words
    }
}

/// Greedy captions for the given images.
pub fn greedy_captions(generator: &GeneratorParams, data: &Dataset, images: &[usize]) -> Result<Vec<SampledCaption>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let feats = FeatureBatch::from_sets(images.iter().map(|&i| &data.images[i].features))?;
    let prefixes: Vec<&[usize]> = vec![&[]; images.len()];
    decode(generator, &feats, &prefixes, DecodeMode::Greedy, &mut [], false)
}

/// Validation score of greedy captions of `style` images in the validation
/// split, or `None` when there are too few images to score.
pub fn validation_metric(
    generator: &GeneratorParams,
    data: &Dataset,
    vocab: &Vocabulary,
    style: Style,
    metric: ValMetric,
) -> Result<Option<f64>> {
    let images = data.images_with(style, Split::Val);
    if images.len() < 2 {
        return Ok(None);
    }
    let caps = greedy_captions(generator, data, &images)?;
    let items = images
        .iter()
        .zip(&caps)
        .map(|(&i, c)| EvalItem {
            image_id: data.images[i].image_id.clone(),
            candidate: candidate_tokens(vocab, &c.ids),
            references: data.references(i, style),
        })
        .collect();
    let corpus = EvalCorpus::new(items)?;
    Ok(Some(match metric {
        ValMetric::Cider => cider(&corpus)?,
        ValMetric::Bleu1 => bleu(&corpus, 1)[0],
        ValMetric::Bleu4 => bleu(&corpus, 4)[3],
        ValMetric::RougeL => rouge_l(&corpus),
    }))
}

fn nonfinite(what: &str, keys: &[u64]) -> Error {
    let stage = match keys.first() {
        Some(1) => "pretrain-generator",
        Some(2) => "pretrain-critic",
        Some(3) => "adversarial",
        _ => "update",
    };
    Error::NonFinite {
        what: what.into(),
        phase: stage.into(),
        step: keys.last().copied().unwrap_or(0),
    }
}

fn shuffle_key(stage: Stage, epoch: usize) -> u64 {
    (stage.key() << 32) | epoch as u64
}

/// Losses of one generator update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenStepStats {
    pub l1: Option<f64>,
    pub l2: f64,
    pub combined: f64,
    pub mean_reward: Option<f64>,
}

/// One Adam step on `lambda2 * L1 + L2`.
///
/// `L2` is the regularized likelihood of the gold captions in `batch`. `L1`
/// is the policy loss of fresh multinomial samples for the same images,
/// rewarded by `scorer`; it is skipped when `lambda2` is zero.
pub fn generator_step(
    generator: &mut GeneratorParams,
    optimizer: &mut Adam,
    batch: &[&Example],
    data: &Dataset,
    scorer: Option<&dyn CaptionScorer>,
    config: &TrainConfig,
    keys: &[u64],
) -> Result<GenStepStats> {
    let feats = FeatureBatch::from_sets(batch.iter().map(|e| &data.images[e.image].features))?;
    let policy = if config.lambda2 > 0.0 {
        let scorer = scorer.ok_or_else(|| Error::Invalid("policy loss needs a caption scorer".into()))?;
        let mut rngs: Vec<_> = (0..batch.len())
            .map(|b| {
                let mut k = vec![purpose::SAMPLE];
                k.extend_from_slice(keys);
                k.push(b as u64);
                substream(config.seed, &k)
            })
            .collect();
        let prefixes: Vec<&[usize]> = vec![&[]; batch.len()];
        let sampled = decode(generator, &feats, &prefixes, DecodeMode::Multinomial, &mut rngs, false)?;
        let rewards = mc_rewards(&sampled, &feats, generator, scorer, config.rollouts, config.seed, keys)?;
        Some((sampled, rewards))
    } else {
        None
    };

    let mut tape = Tape::new();
    let vars = generator.bind(&mut tape);
    let gold: Vec<&[usize]> = batch.iter().map(|e| e.ids.as_slice()).collect();
    let mle = mle_loss(&mut tape, &vars, &generator.config, &feats, &gold, config.lambda1)?;
    let (loss, l1, mean_reward) = match &policy {
        Some((sampled, rewards)) => {
            let targets: Vec<&[usize]> = sampled.iter().map(|s| s.ids.as_slice()).collect();
            let pass = teacher_forced(&mut tape, &vars, &generator.config, &feats, &targets)?;
            let l1 = pg_loss(&mut tape, &pass, rewards)?;
            let c = combined_generator_loss(&mut tape, l1, mle.loss, config.lambda2)?;
            (c, Some(tape.scalar(l1) as f64), Some(rewards.mean()))
        }
        None => (mle.loss, None, None),
    };
    let stats = GenStepStats {
        l1,
        l2: tape.scalar(mle.loss) as f64,
        combined: tape.scalar(loss) as f64,
        mean_reward,
    };
    if !stats.combined.is_finite() {
        return Err(nonfinite("generator loss", keys));
    }
    let grads = tape.backward(loss)?;
    generator.store.zero_grad();
    generator.store.accumulate(&vars.to_vec(), &grads)?;
    optimizer.step(&mut generator.store)?;
    if !generator.store.is_finite() {
        return Err(nonfinite("generator parameters", keys));
    }
    Ok(stats)
}

/// Draws real captions and generator samples and runs one critic update.
#[allow(clippy::too_many_arguments)]
pub fn critic_step(
    critic: &mut DiscriminatorParams,
    optimizer: &mut RmsProp,
    generator: &GeneratorParams,
    examples: &[Example],
    data: &Dataset,
    config: &TrainConfig,
    keys: &[u64],
) -> Result<CriticStep> {
    if examples.is_empty() {
        return Err(Error::Invalid("critic update needs real captions".into()));
    }
    let l = critic.config.seq_len;
    let n = config.critic_batch;
    let stream = |p: u64, extra: Option<u64>| {
        let mut k = vec![p];
        k.extend_from_slice(keys);
        k.extend(extra);
        substream(config.seed, &k)
    };
    let mut pick = stream(purpose::CRITIC_BATCH, None);
    let real: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            let e = &examples[pick.random_range(0..examples.len())];
            critic_input(&e.ids[1..], l)
        })
        .collect();
    let mut pick = stream(purpose::CRITIC_FAKE, None);
    let images: Vec<usize> = (0..n)
        .map(|_| examples[pick.random_range(0..examples.len())].image)
        .collect();
    let feats = FeatureBatch::from_sets(images.iter().map(|&i| &data.images[i].features))?;
    let mut rngs: Vec<_> = (0..n).map(|r| stream(purpose::CRITIC_FAKE, Some(r as u64 + 1))).collect();
    let prefixes: Vec<&[usize]> = vec![&[]; n];
    let fake: Vec<Vec<usize>> = decode(generator, &feats, &prefixes, DecodeMode::Multinomial, &mut rngs, false)?
        .iter()
        .map(|s| critic_input(&s.ids, l))
        .collect();
    let step = disc_update(critic, optimizer, &real, &fake, config.clip)?;
    if !step.loss.is_finite() || !critic.store.is_finite() {
        return Err(nonfinite("critic loss", keys));
    }
    Ok(step)
}

fn record(state: &TrainState, phase: Phase, epoch: usize, started: Instant) -> LogRecord {
    LogRecord {
        step: state.total_steps(),
        epoch,
        phase,
        wall_clock: started.elapsed().as_secs_f64(),
        ..LogRecord::default()
    }
}

/// Runs validation at the end of an epoch, updates the best record, and
/// attaches the metric to the epoch's last log row (adding a row if the epoch
/// made no updates).
fn finish_epoch(
    state: &mut TrainState,
    data: &Dataset,
    vocab: &Vocabulary,
    style: Style,
    config: &TrainConfig,
    log: &mut TrainLog,
    rows_before: usize,
    started: Instant,
) -> Result<()> {
    let epoch = state.epoch + 1;
    let metric = validation_metric(&state.generator, data, vocab, style, config.val_metric)?;
    if let Some(m) = metric {
        if state.best.as_ref().is_none_or(|b| m > b.metric) {
            state.best = Some(BestRecord {
                epoch,
                metric: m,
                generator: state.generator.clone(),
            });
        }
    }
    if log.records.len() == rows_before {
        log.records.push(record(state, Phase::Epoch, epoch, started));
    }
    if let Some(last) = log.records.last_mut() {
        last.val_metric = metric;
    }
    state.epoch = epoch;
    Ok(())
}

fn check_stage(state: &TrainState, stage: Stage) -> Result<()> {
    if state.stage != stage {
        return Err(Error::Invalid(format!(
            "state belongs to stage {:?}, not {stage:?}",
            state.stage
        )));
    }
    Ok(())
}

/// Maximum-likelihood pretraining on factual captions for
/// `config.pretrain_epochs` epochs, resuming from `state.epoch`. `on_epoch`
/// runs after every completed epoch (for checkpointing).
pub fn pretrain_generator(
    state: &mut TrainState,
    data: &Dataset,
    vocab: &Vocabulary,
    config: &TrainConfig,
    log: &mut TrainLog,
    on_epoch: &mut dyn FnMut(&TrainState, &TrainLog) -> Result<()>,
) -> Result<()> {
    config.validate()?;
    check_stage(state, Stage::PretrainGenerator)?;
    let examples = data.examples(Style::Factual, Split::Train, vocab, state.generator.config.max_len)?;
    if examples.is_empty() {
        return Err(Error::Invalid("no factual training captions".into()));
    }
    let mle_only = TrainConfig {
        lambda2: 0.0,
        ..config.clone()
    };
    let started = Instant::now();
    while state.epoch < config.pretrain_epochs {
        let rows_before = log.records.len();
        let key = shuffle_key(Stage::PretrainGenerator, state.epoch);
        for batch in crate::data::batches(&examples, config.gen_batch, config.seed, key) {
            let keys = [Stage::PretrainGenerator.key(), state.gen_steps];
            let stats = generator_step(&mut state.generator, &mut state.gen_opt, &batch, data, None, &mle_only, &keys)?;
            state.gen_steps += 1;
            let mut r = record(state, Phase::PretrainGenerator, state.epoch + 1, started);
            r.l2 = Some(stats.l2);
            r.combined = Some(stats.combined);
            log.records.push(r);
        }
        finish_epoch(state, data, vocab, Style::Factual, config, log, rows_before, started)?;
        on_epoch(state, log)?;
    }
    Ok(())
}

/// Critic pretraining against samples of the frozen generator on the
/// factual corpus, for `config.critic_pretrain_steps` updates in total.
pub fn pretrain_discriminator(
    state: &mut TrainState,
    data: &Dataset,
    vocab: &Vocabulary,
    config: &TrainConfig,
    log: &mut TrainLog,
) -> Result<()> {
    config.validate()?;
    check_stage(state, Stage::PretrainCritic)?;
    let examples = data.examples(Style::Factual, Split::Train, vocab, state.generator.config.max_len)?;
    let started = Instant::now();
    let critic = state
        .critic
        .as_mut()
        .ok_or_else(|| Error::Invalid("critic pretraining needs a critic".into()))?;
    while state.critic_steps < config.critic_pretrain_steps as u64 {
        let keys = [Stage::PretrainCritic.key(), state.critic_steps];
        let s = critic_step(critic, &mut state.critic_opt, &state.generator, &examples, data, config, &keys)?;
        state.critic_steps += 1;
        log.records.push(LogRecord {
            step: state.gen_steps + state.critic_steps,
            epoch: 0,
            phase: Phase::PretrainCritic,
            critic_loss: Some(s.loss),
            mean_real: Some(s.mean_real),
            mean_fake: Some(s.mean_fake),
            critic_max_abs: Some(critic.max_abs()),
            wall_clock: started.elapsed().as_secs_f64(),
            ..LogRecord::default()
        });
    }
    Ok(())
}

/// Adversarial fine-tuning on `config.style` captions.
///
/// Each iteration runs `g_steps` generator updates (one gold batch each) and
/// then `d_steps` critic updates; an epoch ends when the shuffled gold
/// batches are used up. Rewards come from `reward_override` when given,
/// otherwise from the critic in inference mode.
pub fn adversarial_train(
    state: &mut TrainState,
    data: &Dataset,
    vocab: &Vocabulary,
    config: &TrainConfig,
    reward_override: Option<&dyn CaptionScorer>,
    log: &mut TrainLog,
    on_epoch: &mut dyn FnMut(&TrainState, &TrainLog) -> Result<()>,
) -> Result<()> {
    config.validate()?;
    check_stage(state, Stage::Adversarial)?;
    let examples = data.examples(config.style, Split::Train, vocab, state.generator.config.max_len)?;
    if examples.is_empty() {
        return Err(Error::Invalid(format!("no {} training captions", config.style)));
    }
    let started = Instant::now();
    let stage = Stage::Adversarial;
    while state.epoch < config.adversarial_epochs {
        let rows_before = log.records.len();
        let batches: Vec<Vec<&Example>> =
            crate::data::batches(&examples, config.gen_batch, config.seed, shuffle_key(stage, state.epoch)).collect();
        for chunk in batches.chunks(config.g_steps.max(1)) {
            if config.g_steps > 0 {
                for batch in chunk {
                    let keys = [stage.key(), state.gen_steps];
                    let scorer: Option<&dyn CaptionScorer> = match (reward_override, &state.critic) {
                        (Some(s), _) => Some(s),
                        (None, Some(c)) => Some(c),
                        (None, None) => None,
                    };
                    let stats = generator_step(&mut state.generator, &mut state.gen_opt, batch, data, scorer, config, &keys)?;
                    state.gen_steps += 1;
                    let mut r = record(state, Phase::AdversarialGenerator, state.epoch + 1, started);
                    r.l1 = stats.l1;
                    r.l2 = Some(stats.l2);
                    r.combined = Some(stats.combined);
                    log.records.push(r);
                }
            }
            if let Some(critic) = state.critic.as_mut() {
                for _ in 0..config.d_steps {
                    let keys = [stage.key(), state.critic_steps];
                    let s = critic_step(critic, &mut state.critic_opt, &state.generator, &examples, data, config, &keys)?;
                    state.critic_steps += 1;
                    log.records.push(LogRecord {
                        step: state.gen_steps + state.critic_steps,
                        epoch: state.epoch + 1,
                        phase: Phase::AdversarialCritic,
                        critic_loss: Some(s.loss),
                        mean_real: Some(s.mean_real),
                        mean_fake: Some(s.mean_fake),
                        critic_max_abs: Some(critic.max_abs()),
                        wall_clock: started.elapsed().as_secs_f64(),
                        ..LogRecord::default()
                    });
                }
            }
        }
        finish_epoch(state, data, vocab, config.style, config, log, rows_before, started)?;
        on_epoch(state, log)?;
    }
    Ok(())
}
