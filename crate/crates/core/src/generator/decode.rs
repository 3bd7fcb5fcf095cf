//! Autoregressive decoding: greedy, multinomial, and prefix-forced rollouts.

use std::fmt;
use std::str::FromStr;

use diffcore::{Real, Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{init_state, prepare, step, FeatureBatch, GeneratorParams, LstmState};
use crate::data::{RegionFeatureSet, BEGIN, END, PAD};
use crate::rng::StreamRng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Multinomial,
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMode::Greedy => "greedy",
            DecodeMode::Multinomial => "multinomial",
        })
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(DecodeMode::Greedy),
            "multinomial" => Ok(DecodeMode::Multinomial),
            _ => Err(Error::Config(format!("unknown decode mode {s:?}"))),
        }
    }
}

/// Attention weights and attended context at each emitted position.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionRecord {
    pub weights: Vec<Vec<f64>>,
    pub contexts: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledCaption {
    /// Emitted tokens, `begin` excluded, the end token included if reached.
    pub ids: Vec<usize>,
    /// Log-probability of each emitted token under the generator.
    pub log_probs: Vec<f64>,
    /// Empty unless attention recording was requested.
    pub attention: AttentionRecord,
}

impl SampledCaption {
    pub fn ended(&self) -> bool {
        self.ids.last() == Some(&END)
    }

    /// Tokens without the trailing end token.
    pub fn words(&self) -> &[usize] {
        if self.ended() {
            &self.ids[..self.ids.len() - 1]
        } else {
            &self.ids
        }
    }
}

fn choose(log_probs: &[f64], mode: DecodeMode, rng: Option<&mut StreamRng>) -> usize {
    match mode {
        DecodeMode::Greedy => {
            let mut best = 0;
            for (i, &v) in log_probs.iter().enumerate() {
                if v > log_probs[best] {
                    best = i;
                }
            }
            best
        }
        DecodeMode::Multinomial => {
            let u: f64 = rng.expect("multinomial decoding needs an rng").random();
            let mut acc = 0.0;
            let mut last = 0;
            for (i, &lp) in log_probs.iter().enumerate() {
                let p = lp.exp();
                if p > 0.0 {
                    last = i;
                }
                acc += p;
                if u < acc {
                    return i;
                }
            }
            last
        }
    }
}

fn check_prefix(prefix: &[usize], vocab: usize, max_steps: usize) -> Result<()> {
    if prefix.len() > max_steps {
        return Err(Error::Caption(format!(
            "prefix of {} tokens exceeds {max_steps} positions",
            prefix.len()
        )));
    }
    if let Some(&id) = prefix.iter().find(|&&id| id >= vocab) {
        return Err(Error::Token { id, vocab });
    }
    if prefix.iter().rev().skip(1).any(|&id| id == END) {
        return Err(Error::Caption("end token inside a prefix".into()));
    }
    Ok(())
}

/// Decodes one caption per feature set.
///
/// Row `b` first replays `prefixes[b]` token by token (recording its
/// log-probabilities), then continues by `mode` until it emits the end token
/// or fills `max_len - 1` positions. Multinomial rows draw from `rngs[b]`.
pub fn decode<T: Real>(
    params: &GeneratorParams<T>,
    features: &FeatureBatch<T>,
    prefixes: &[&[usize]],
    mode: DecodeMode,
    rngs: &mut [StreamRng],
    record_attention: bool,
) -> Result<Vec<SampledCaption>> {
    let b = features.batch();
    let cfg = &params.config;
    let max_steps = cfg.max_steps();
    if prefixes.len() != b {
        return Err(Error::Invalid(format!("{} prefixes for {b} feature sets", prefixes.len())));
    }
    if mode == DecodeMode::Multinomial && rngs.len() != b {
        return Err(Error::Invalid(format!("{} rng streams for {b} rows", rngs.len())));
    }
    if features.dim() != cfg.region_dim {
        return Err(Error::Invalid(format!(
            "region features have dimension {}, generator expects {}",
            features.dim(),
            cfg.region_dim
        )));
    }
    for p in prefixes {
        check_prefix(p, cfg.vocab_size, max_steps)?;
    }

    let mut out: Vec<SampledCaption> = (0..b)
        .map(|_| SampledCaption {
            ids: Vec::new(),
            log_probs: Vec::new(),
            attention: AttentionRecord::default(),
        })
        .collect();
    let mut done = vec![false; b];
    let hidden = cfg.hidden_dim;
    let mut h: Option<Tensor<T>> = None;
    let mut c: Option<Tensor<T>> = None;

    for t in 0..max_steps {
        // A fresh tape per step keeps memory flat; the recurrent state is
        // carried over as constants.
        let mut tape = Tape::new();
        let vars = params.bind_frozen(&mut tape);
        let ctx = prepare(&mut tape, &vars, features)?;
        let state = match (&h, &c) {
            (Some(h), Some(c)) => LstmState {
                h: tape.constant(h),
                c: tape.constant(c),
            },
            _ => init_state(&mut tape, &vars, &ctx)?,
        };
        let prev: Vec<usize> = (0..b)
            .map(|r| match t {
                0 => BEGIN,
                _ if done[r] => PAD,
                _ => out[r].ids[t - 1],
            })
            .collect();
        let s = step(&mut tape, &vars, &ctx, state, &prev)?;
        let lp = tape.value(s.log_probs);
        let v = cfg.vocab_size;
        for r in 0..b {
            if done[r] {
                continue;
            }
            let row: Vec<f64> = lp[r * v..(r + 1) * v].iter().map(|x| x.as_f64()).collect();
            let tok = match prefixes[r].get(t) {
                Some(&forced) => forced,
                None => choose(&row, mode, rngs.get_mut(r)),
            };
            out[r].ids.push(tok);
            out[r].log_probs.push(row[tok]);
            if record_attention {
                let k = features.regions;
                let d = cfg.region_dim;
                let a = tape.value(s.alpha);
                let cv = tape.value(s.context);
                out[r].attention.weights.push(a[r * k..(r + 1) * k].iter().map(|x| x.as_f64()).collect());
                out[r].attention.contexts.push(cv[r * d..(r + 1) * d].iter().map(|x| x.as_f64()).collect());
            }
            if tok == END {
                done[r] = true;
            }
        }
        if done.iter().all(|&d| d) {
            break;
        }
        h = Some(Tensor::new(vec![b, hidden], tape.value(s.state.h).to_vec())?);
        c = Some(Tensor::new(vec![b, hidden], tape.value(s.state.c).to_vec())?);
    }
    Ok(out)
}

/// Decodes a single caption from the begin token.
pub fn sample_caption<T: Real>(
    params: &GeneratorParams<T>,
    features: &RegionFeatureSet,
    mode: DecodeMode,
    rng: &mut StreamRng,
    record_attention: bool,
) -> Result<SampledCaption> {
    let batch = FeatureBatch::from_sets([features])?;
    let mut rngs = [rng.clone()];
    let mut r = decode(params, &batch, &[&[]], mode, &mut rngs, record_attention)?;
    *rng = rngs[0].clone();
    Ok(r.remove(0))
}

/// Completes `prefix` by multinomial sampling; the prefix is kept verbatim.
pub fn rollout<T: Real>(
    params: &GeneratorParams<T>,
    features: &RegionFeatureSet,
    prefix: &[usize],
    rng: &mut StreamRng,
) -> Result<Vec<usize>> {
    let batch = FeatureBatch::from_sets([features])?;
    let mut rngs = [rng.clone()];
    let mut r = decode(params, &batch, &[prefix], DecodeMode::Multinomial, &mut rngs, false)?;
    *rng = rngs[0].clone();
    Ok(r.remove(0).ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;
    use crate::rng::substream;

    fn cfg() -> GeneratorConfig {
        GeneratorConfig {
            vocab_size: 8,
            embed_dim: 4,
            region_dim: 3,
            hidden_dim: 6,
            attention_dim: 4,
            max_len: 7,
        }
    }

    fn feats() -> RegionFeatureSet {
        RegionFeatureSet::new(2, 3, vec![0.5, -0.1, 0.3, 0.9, 0.2, -0.7]).unwrap()
    }

    #[test]
    fn certain_end_token_gives_length_one() {
        let mut p = GeneratorParams::<f32>::new(cfg(), 1).unwrap();
        p.store.get_mut("out.b").unwrap().values_mut()[END] = 1000.0;
        let mut rng = substream(0, &[]);
        let s = sample_caption(&p, &feats(), DecodeMode::Multinomial, &mut rng, true).unwrap();
        assert_eq!(s.ids, vec![END]);
        assert_eq!(s.attention.weights.len(), 1);
    }

    #[test]
    fn greedy_is_deterministic_and_bounded() {
        let p = GeneratorParams::<f32>::new(cfg(), 3).unwrap();
        let mut r1 = substream(1, &[]);
        let mut r2 = substream(2, &[]);
        let a = sample_caption(&p, &feats(), DecodeMode::Greedy, &mut r1, false).unwrap();
        let b = sample_caption(&p, &feats(), DecodeMode::Greedy, &mut r2, false).unwrap();
        assert_eq!(a, b);
        assert!(a.ids.len() <= 6);
        assert!(a.log_probs.iter().all(|&l| l <= 0.0));
    }

    #[test]
    fn rollout_keeps_prefix_and_finished_prefixes() {
        let p = GeneratorParams::<f32>::new(cfg(), 3).unwrap();
        let mut rng = substream(9, &[]);
        let done = [5, 4, END];
        assert_eq!(rollout(&p, &feats(), &done, &mut rng).unwrap(), done.to_vec());
        let full = [5, 4, 6, 7, 5, 4];
        assert_eq!(rollout(&p, &feats(), &full, &mut rng).unwrap(), full.to_vec());
        let r = rollout(&p, &feats(), &[6, 6], &mut rng).unwrap();
        assert_eq!(&r[..2], &[6, 6]);
        assert!(rollout(&p, &feats(), &[END, 4], &mut rng).is_err());
        assert!(rollout(&p, &feats(), &[99], &mut rng).is_err());
    }

    #[test]
    fn multinomial_golden_run() {
        let mut p = GeneratorParams::<f32>::new(cfg(), 11).unwrap();
        p.store.get_mut("out.b").unwrap().values_mut()[END] = -1.0;
        let mut rng = substream(7, &[]);
        let s = sample_caption(&p, &feats(), DecodeMode::Multinomial, &mut rng, false).unwrap();
        let mut rng = substream(7, &[]);
        let again = sample_caption(&p, &feats(), DecodeMode::Multinomial, &mut rng, false).unwrap();
        assert_eq!(s, again);
        assert_eq!(s.ids, GOLDEN);
    }

    const GOLDEN: &[usize] = &[0, 5, 1, 6, 5, 4];
}
