//! Convolutional Wasserstein critic over token sequences.
//!
//! A caption is embedded into an `L x M` matrix; each window size `C` has `F`
//! full-width filters whose outputs go through batch normalization, ReLU and
//! max-over-time pooling. The pooled features feed one linear output.

use diffcore::{
    clip_params, BatchNormStats, NormMode, ParamStore, Real, RmsProp, Tape, Tensor, Var,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{END, PAD};
use crate::generator::check_store;
use crate::rng::{purpose, substream};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub windows: Vec<usize>,
    pub filters: usize,
    /// Fixed input length `L`; shorter captions are right-padded.
    pub seq_len: usize,
    /// Parameters start uniform in `±init_scale`; batch-norm scales start at
    /// `init_scale`.
    pub init_scale: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            embed_dim: 32,
            windows: vec![2, 3, 4, 5],
            filters: 32,
            seq_len: 15,
            init_scale: 0.01,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= END || self.embed_dim == 0 || self.filters == 0 {
            return Err(Error::Config(
                "critic vocab_size, embed_dim and filters must be positive".into(),
            ));
        }
        if self.windows.is_empty() || self.windows.contains(&0) {
            return Err(Error::Config("critic needs at least one positive window size".into()));
        }
        let widest = self.windows.iter().copied().max().unwrap_or(0);
        if self.seq_len < widest {
            return Err(Error::Config(format!(
                "critic input length {} is shorter than window {widest}",
                self.seq_len
            )));
        }
        if !(self.init_scale > 0.0) {
            return Err(Error::Config("critic init_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn shapes(&self) -> Vec<(String, [usize; 2])> {
        let (m, f) = (self.embed_dim, self.filters);
        let mut out = vec![("embed".to_string(), [self.vocab_size, m])];
        for &c in &self.windows {
            out.push((format!("conv{c}.k"), [f, c * m]));
            out.push((format!("conv{c}.b"), [1, f]));
            out.push((format!("bn{c}.gamma"), [1, f]));
            out.push((format!("bn{c}.beta"), [1, f]));
        }
        out.push(("fc.w".to_string(), [self.windows.len() * f, 1]));
        out.push(("fc.b".to_string(), [1, 1]));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams<T: Real = f32> {
    pub config: CriticConfig,
    pub store: ParamStore<T>,
    /// Running batch-norm statistics, one per window, in window order.
    pub stats: Vec<BatchNormStats<T>>,
}

struct CriticVars {
    embed: Var,
    blocks: Vec<[Var; 4]>,
    fc_w: Var,
    fc_b: Var,
}

impl CriticVars {
    fn from_slice(v: &[Var], windows: usize) -> Self {
        Self {
            embed: v[0],
            blocks: (0..windows)
                .map(|i| [v[1 + 4 * i], v[2 + 4 * i], v[3 + 4 * i], v[4 + 4 * i]])
                .collect(),
            fc_w: v[1 + 4 * windows],
            fc_b: v[2 + 4 * windows],
        }
    }
}

impl<T: Real> DiscriminatorParams<T> {
    pub fn new(config: CriticConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, &[purpose::INIT_CRITIC]);
        let s = config.init_scale;
        let mut store = ParamStore::new();
        for (name, shape) in config.shapes() {
            let t = if name.ends_with(".gamma") {
                Tensor::full(&shape, T::of(s))
            } else if name.ends_with(".beta") || name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                Tensor::from_fn(&shape, |_| T::of(rng.random_range(-s..s)))
            };
            store.insert(name, t)?;
        }
        let stats = config.windows.iter().map(|_| BatchNormStats::new(config.filters)).collect();
        Ok(Self {
            config,
            store,
            stats,
        })
    }

    pub fn from_parts(
        config: CriticConfig,
        store: ParamStore<T>,
        stats: Vec<BatchNormStats<T>>,
    ) -> Result<Self> {
        config.validate()?;
        check_store(&store, &config.shapes(), "critic")?;
        if stats.len() != config.windows.len()
            || stats.iter().any(|s| s.features() != config.filters)
        {
            return Err(Error::Checkpoint("critic batch-norm statistics do not match the config".into()));
        }
        Ok(Self {
            config,
            store,
            stats,
        })
    }

    pub fn cast<U: Real>(&self) -> DiscriminatorParams<U> {
        DiscriminatorParams {
            config: self.config.clone(),
            store: self.store.cast(),
            stats: self.stats.iter().map(BatchNormStats::cast).collect(),
        }
    }

    fn check_tokens(&self, captions: &[Vec<usize>]) -> Result<()> {
        let (l, v) = (self.config.seq_len, self.config.vocab_size);
        if captions.is_empty() {
            return Err(Error::Invalid("critic batch is empty".into()));
        }
        for c in captions {
            if c.len() != l {
                return Err(Error::Invalid(format!(
                    "critic input has {} tokens, expected {l}",
                    c.len()
                )));
            }
            if let Some(&id) = c.iter().find(|&&id| id >= v) {
                return Err(Error::Token { id, vocab: v });
            }
        }
        Ok(())
    }

    /// `L x M` embedding matrix of one padded caption.
    pub fn embed_caption(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        self.check_tokens(&[tokens.to_vec()])?;
        let mut tape = Tape::new();
        let v = self.store.bind_frozen(&mut tape);
        let e = tape.embed_lookup(v[0], tokens)?;
        Ok(tape.to_tensor(e))
    }

    /// Records the forward pass of `captions` (each exactly `seq_len` ids)
    /// and returns the `B x 1` scores. Train mode folds batch statistics into
    /// the running ones.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        vars: &[Var],
        captions: &[Vec<usize>],
        mode: NormMode,
    ) -> Result<Var> {
        self.check_tokens(captions)?;
        let cv = CriticVars::from_slice(vars, self.config.windows.len());
        let l = self.config.seq_len;
        let flat: Vec<usize> = captions.iter().flatten().copied().collect();
        let emb = tape.embed_lookup(cv.embed, &flat)?;
        let mut pooled = Vec::with_capacity(cv.blocks.len());
        for ((&c, [k, b, gamma, beta]), stats) in
            self.config.windows.iter().zip(&cv.blocks).zip(self.stats.iter_mut())
        {
            let conv = tape.conv_time(emb, *k, *b, l, c)?;
            let norm = tape.batch_norm(conv, *gamma, *beta, stats, mode)?;
            let act = tape.relu(norm);
            pooled.push(tape.max_over_time(act, l - c + 1)?);
        }
        let feats = tape.concat_cols(&pooled)?;
        let out = tape.matmul(feats, cv.fc_w)?;
        Ok(tape.add_row(out, cv.fc_b)?)
    }

    /// Scores in inference mode; running statistics are left untouched.
    pub fn score_batch(&self, captions: &[Vec<usize>]) -> Result<Vec<f64>> {
        let mut frozen = self.clone();
        let mut tape = Tape::new();
        let vars = frozen.store.bind_frozen(&mut tape);
        let s = frozen.forward(&mut tape, &vars, captions, NormMode::Infer)?;
        Ok(tape.value(s).iter().map(|v| v.as_f64()).collect())
    }

    pub fn score(&self, caption: &[usize]) -> Result<f64> {
        Ok(self.score_batch(&[caption.to_vec()])?[0])
    }

    pub fn max_abs(&self) -> f64 {
        self.store.max_abs().as_f64()
    }
}

/// Right-pads (or truncates) generated tokens to the critic's input length.
pub fn critic_input(ids: &[usize], seq_len: usize) -> Vec<usize> {
    let mut v: Vec<usize> = ids.iter().copied().take(seq_len).collect();
    v.resize(seq_len, PAD);
    v
}

/// Anything that can assign realness scores to padded captions.
pub trait CaptionScorer {
    fn seq_len(&self) -> usize;
    fn score_captions(&self, captions: &[Vec<usize>]) -> Result<Vec<f64>>;
}

impl<T: Real> CaptionScorer for DiscriminatorParams<T> {
    fn seq_len(&self) -> usize {
        self.config.seq_len
    }

    fn score_captions(&self, captions: &[Vec<usize>]) -> Result<Vec<f64>> {
        self.score_batch(captions)
    }
}

/// Critic objective `mean(fake) - mean(real)`, minimized by the critic.
pub fn wgan_loss(real: &[f64], fake: &[f64]) -> Result<f64> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::Invalid("wgan loss needs real and fake scores".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(mean(fake) - mean(real))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticStep {
    pub loss: f64,
    pub mean_real: f64,
    pub mean_fake: f64,
}

/// One RMSprop step on the critic objective followed by weight clipping.
///
/// Real and fake captions share one train-mode batch so that batch-norm sees
/// both distributions.
pub fn disc_update(
    params: &mut DiscriminatorParams<f32>,
    optimizer: &mut RmsProp,
    real: &[Vec<usize>],
    fake: &[Vec<usize>],
    clip: f32,
) -> Result<CriticStep> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::Invalid("critic update needs real and fake captions".into()));
    }
    let batch: Vec<Vec<usize>> = real.iter().chain(fake).cloned().collect();
    let mut tape = Tape::new();
    let vars = params.store.bind(&mut tape);
    let scores = params.forward(&mut tape, &vars, &batch, NormMode::Train)?;
    let (nr, nf) = (real.len() as f32, fake.len() as f32);
    let weights: Vec<f32> = (0..batch.len())
        .map(|i| if i < real.len() { -1.0 / nr } else { 1.0 / nf })
        .collect();
    let weighted = tape.scale_rows(scores, &weights)?;
    let loss = tape.sum(weighted);
    let values: Vec<f64> = tape.value(scores).iter().map(|&v| v as f64).collect();
    let step = CriticStep {
        loss: tape.scalar(loss) as f64,
        mean_real: values[..real.len()].iter().sum::<f64>() / real.len() as f64,
        mean_fake: values[real.len()..].iter().sum::<f64>() / fake.len() as f64,
    };
    let grads = tape.backward(loss)?;
    params.store.zero_grad();
    params.store.accumulate(&vars, &grads)?;
    optimizer.step(&mut params.store)?;
    clip_params(&mut params.store, clip)?;
    Ok(step)
}
