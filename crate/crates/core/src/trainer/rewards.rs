//! Monte-Carlo rollout rewards and the reward-weighted policy loss.

use diffcore::{Real, Tape, Var};

use crate::discriminator::{critic_input, CaptionScorer};
use crate::generator::{decode, DecodeMode, FeatureBatch, ForcedPass, GeneratorParams, SampledCaption};
use crate::rng::{purpose, substream};
use crate::{Error, Result};

/// Per-position rewards of a sampled batch. Row `b` has one entry per
/// emitted token; positions past a sequence's end are implicitly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardMatrix {
    pub values: Vec<Vec<f64>>,
}

impl RewardMatrix {
    pub fn batch(&self) -> usize {
        self.values.len()
    }

    /// Reward at `(b, t)`, zero outside the sequence.
    pub fn get(&self, b: usize, t: usize) -> f64 {
        self.values.get(b).and_then(|r| r.get(t)).copied().unwrap_or(0.0)
    }

    pub fn mean(&self) -> f64 {
        let n: usize = self.values.iter().map(Vec::len).sum();
        if n == 0 {
            return 0.0;
        }
        self.values.iter().flatten().sum::<f64>() / n as f64
    }
}

/// Rewards for every prefix of every sampled caption.
///
/// For a prefix `x_1..x_t` shorter than the sequence, the reward is the mean
/// critic score of `rollouts` completions sampled from the generator; for
/// the full sequence it is the critic score of the sequence itself. Rollout
/// `n` of prefix `t` in row `b` draws from the stream
/// `(seed, ROLLOUT, keys.., b, t, n)`, so results do not depend on batching.
pub fn mc_rewards<T: Real>(
    sampled: &[SampledCaption],
    features: &FeatureBatch<T>,
    generator: &GeneratorParams<T>,
    scorer: &dyn CaptionScorer,
    rollouts: usize,
    seed: u64,
    keys: &[u64],
) -> Result<RewardMatrix> {
    if rollouts == 0 {
        return Err(Error::Config("rollout count must be at least 1".into()));
    }
    if sampled.len() != features.batch() {
        return Err(Error::Invalid(format!(
            "{} sampled captions for {} feature sets",
            sampled.len(),
            features.batch()
        )));
    }
    let l = scorer.seq_len();
    let stream = |b: usize, t: usize, n: usize| {
        let mut k = vec![purpose::ROLLOUT];
        k.extend_from_slice(keys);
        k.extend([b as u64, t as u64, n as u64]);
        substream(seed, &k)
    };

    let mut rows = Vec::new();
    let mut prefixes: Vec<&[usize]> = Vec::new();
    let mut rngs = Vec::new();
    for (b, s) in sampled.iter().enumerate() {
        for t in 1..s.ids.len() {
            for n in 0..rollouts {
                rows.push(b);
                prefixes.push(&s.ids[..t]);
                rngs.push(stream(b, t, n));
            }
        }
    }
    let mut inputs: Vec<Vec<usize>> = sampled.iter().map(|s| critic_input(&s.ids, l)).collect();
    if !rows.is_empty() {
        let feats = features.select(&rows);
        let done = decode(generator, &feats, &prefixes, DecodeMode::Multinomial, &mut rngs, false)?;
        inputs.extend(done.iter().map(|c| critic_input(&c.ids, l)));
    }
    let scores = scorer.score_captions(&inputs)?;

    let mut next = sampled.len();
    let values = sampled
        .iter()
        .enumerate()
        .map(|(b, s)| {
            let mut z = Vec::with_capacity(s.ids.len());
            for _ in 1..s.ids.len() {
                // Mean as offsets from the first score, so identical scores
                // average to exactly that score.
                let chunk = &scores[next..next + rollouts];
                let spread: f64 = chunk.iter().map(|s| s - chunk[0]).sum();
                z.push(chunk[0] + spread / rollouts as f64);
                next += rollouts;
            }
            if !s.ids.is_empty() {
                z.push(scores[b]);
            }
            z
        })
        .collect();
    Ok(RewardMatrix { values })
}

/// `-(1/B) sum_b sum_t log p(x_bt) Z[b,t]` with rewards as constants.
pub fn pg_loss<T: Real>(tape: &mut Tape<T>, pass: &ForcedPass<T>, rewards: &RewardMatrix) -> Result<Var> {
    let b = rewards.batch();
    if pass.mask.first().map_or(0, Vec::len) != b {
        return Err(Error::Invalid("rewards and sampled batch disagree in size".into()));
    }
    for (row, z) in rewards.values.iter().enumerate() {
        let steps = pass.mask.iter().filter(|m| m[row] != T::zero()).count();
        if z.len() != steps {
            return Err(Error::Invalid(format!(
                "row {row} has {} rewards for {steps} sampled positions",
                z.len()
            )));
        }
    }
    let inv_b = 1.0 / b as f64;
    let mut acc = None;
    for (t, (&lp, mask)) in pass.log_probs.iter().zip(&pass.mask).enumerate() {
        let w: Vec<T> = (0..b)
            .map(|r| mask[r] * T::of(-rewards.get(r, t) * inv_b))
            .collect();
        let term = tape.scale_rows(lp, &w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    let acc = acc.ok_or_else(|| Error::Invalid("empty sampled batch".into()))?;
    Ok(tape.sum(acc))
}

/// `lambda2 * l1 + l2`.
pub fn combined_generator_loss<T: Real>(tape: &mut Tape<T>, l1: Var, l2: Var, lambda2: f64) -> Result<Var> {
    if lambda2 < 0.0 {
        return Err(Error::Config("lambda2 must be nonnegative".into()));
    }
    let scaled = tape.affine(l1, T::of(lambda2), T::zero());
    Ok(tape.add(scaled, l2)?)
}
