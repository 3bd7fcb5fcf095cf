//! Attention LSTM caption generator.
//!
//! At each step the previous hidden state attends over the image regions,
//! the LSTM consumes the previous word together with the attended context,
//! and the output layer reads the context and the new hidden state.
//! All operations are batched: `B` captions and their `B * K` region rows are
//! processed together.

mod decode;

use diffcore::{ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{RegionFeatureSet, BEGIN, END};
use crate::rng::{purpose, substream};
use crate::{Error, Result};

pub use decode::{
    decode, rollout, sample_caption, AttentionRecord, DecodeMode, SampledCaption,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub region_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
    /// Encoded caption length including the begin and end tokens; generated
    /// captions hold at most `max_len - 1` tokens.
    pub max_len: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            embed_dim: 32,
            region_dim: 16,
            hidden_dim: 64,
            attention_dim: 32,
            max_len: 16,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("region_dim", self.region_dim),
            ("hidden_dim", self.hidden_dim),
            ("attention_dim", self.attention_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("generator {name} must be positive")));
        }
        if self.vocab_size <= END {
            return Err(Error::Config("vocabulary must contain the reserved tokens".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        Ok(())
    }

    /// Longest generated caption, end token included.
    pub fn max_steps(&self) -> usize {
        self.max_len - 1
    }

    pub fn shapes(&self) -> [(&'static str, [usize; 2]); 13] {
        let (v, m, d, h, a) = (
            self.vocab_size,
            self.embed_dim,
            self.region_dim,
            self.hidden_dim,
            self.attention_dim,
        );
        [
            ("embed", [v, m]),
            ("lstm.w", [m, 4 * h]),
            ("lstm.h", [h, 4 * h]),
            ("lstm.a", [d, 4 * h]),
            ("lstm.b", [1, 4 * h]),
            ("att.e", [a, 1]),
            ("att.a", [d, a]),
            ("att.h", [h, a]),
            ("out.a", [d, v]),
            ("out.h", [h, v]),
            ("out.b", [1, v]),
            ("init.h", [d, h]),
            ("init.c", [d, h]),
        ]
    }
}

/// Generator weights. LSTM gate blocks are stored side by side in the order
/// input, forget, modulation, output.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams<T: Real = f32> {
    pub config: GeneratorConfig,
    pub store: ParamStore<T>,
}

impl<T: Real> GeneratorParams<T> {
    /// Uniform `±1/sqrt(fan_in)` weights, zero biases except a forget-gate
    /// bias of 1.
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, &[purpose::INIT_GENERATOR]);
        let mut store = ParamStore::new();
        for (name, shape) in config.shapes() {
            let t = if name.ends_with(".b") {
                let h = config.hidden_dim;
                Tensor::from_fn(&shape, |i| {
                    if name == "lstm.b" && (h..2 * h).contains(&i) {
                        T::one()
                    } else {
                        T::zero()
                    }
                })
            } else {
                let r = if name == "embed" { 0.1 } else { 1.0 / (shape[0] as f64).sqrt() };
                Tensor::from_fn(&shape, |_| T::of(rng.random_range(-r..r)))
            };
            store.insert(name, t)?;
        }
        Ok(Self { config, store })
    }

    /// Wraps an existing store after checking names and shapes.
    pub fn from_store(config: GeneratorConfig, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        check_store(&store, &config.shapes(), "generator")?;
        Ok(Self { config, store })
    }

    pub fn cast<U: Real>(&self) -> GeneratorParams<U> {
        GeneratorParams {
            config: self.config.clone(),
            store: self.store.cast(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> GenVars {
        GenVars::from_slice(&self.store.bind(tape))
    }

    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> GenVars {
        GenVars::from_slice(&self.store.bind_frozen(tape))
    }
}

pub(crate) fn check_store<T: Real, S: AsRef<str>>(
    store: &ParamStore<T>,
    shapes: &[(S, [usize; 2])],
    what: &str,
) -> Result<()> {
    if store.len() != shapes.len() {
        return Err(Error::Checkpoint(format!(
            "{what} has {} tensors, expected {}",
            store.len(),
            shapes.len()
        )));
    }
    for (i, (name, shape)) in shapes.iter().enumerate() {
        let name = name.as_ref();
        if store.name(i) != name || store.tensor(i).shape() != shape {
            return Err(Error::Checkpoint(format!(
                "{what} tensor {i} is {} {:?}, expected {name} {shape:?}",
                store.name(i),
                store.tensor(i).shape()
            )));
        }
    }
    Ok(())
}

/// Tape handles of every generator parameter.
#[derive(Clone, Copy, Debug)]
pub struct GenVars {
    pub embed: Var,
    pub lstm_w: Var,
    pub lstm_h: Var,
    pub lstm_a: Var,
    pub lstm_b: Var,
    pub att_e: Var,
    pub att_a: Var,
    pub att_h: Var,
    pub out_a: Var,
    pub out_h: Var,
    pub out_b: Var,
    pub init_h: Var,
    pub init_c: Var,
}

impl GenVars {
    /// Rebuilds the handles from vars bound in parameter-store order.
    pub fn from_slice(v: &[Var]) -> Self {
        Self {
            embed: v[0],
            lstm_w: v[1],
            lstm_h: v[2],
            lstm_a: v[3],
            lstm_b: v[4],
            att_e: v[5],
            att_a: v[6],
            att_h: v[7],
            out_a: v[8],
            out_h: v[9],
            out_b: v[10],
            init_h: v[11],
            init_c: v[12],
        }
    }

    /// Handles in store order, for gradient accumulation.
    pub fn to_vec(&self) -> Vec<Var> {
        vec![
            self.embed,
            self.lstm_w,
            self.lstm_h,
            self.lstm_a,
            self.lstm_b,
            self.att_e,
            self.att_a,
            self.att_h,
            self.out_a,
            self.out_h,
            self.out_b,
            self.init_h,
            self.init_c,
        ]
    }
}

/// Region features of `B` images stacked as `(B * K) x D`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch<T: Real = f32> {
    pub regions: usize,
    pub tensor: Tensor<T>,
}

impl<T: Real> FeatureBatch<T> {
    pub fn from_sets<'a>(sets: impl IntoIterator<Item = &'a RegionFeatureSet>) -> Result<Self> {
        let mut shape = None;
        let mut values = Vec::new();
        let mut rows = 0;
        for s in sets {
            let this = (s.regions(), s.dim());
            if *shape.get_or_insert(this) != this {
                return Err(Error::Invalid(format!(
                    "feature sets of shapes {:?} and {this:?} in one batch",
                    shape.unwrap()
                )));
            }
            values.extend(s.values().iter().map(|&v| T::of(v as f64)));
            rows += s.regions();
        }
        let (k, d) = shape.ok_or_else(|| Error::Invalid("empty feature batch".into()))?;
        Ok(Self {
            regions: k,
            tensor: Tensor::new(vec![rows, d], values)?,
        })
    }

    pub fn batch(&self) -> usize {
        self.tensor.shape()[0] / self.regions
    }

    pub fn dim(&self) -> usize {
        self.tensor.shape()[1]
    }

    /// Each image repeated `n` times consecutively.
    pub fn repeat(&self, n: usize) -> Self {
        let block = self.regions * self.dim();
        let mut values = Vec::with_capacity(self.tensor.numel() * n);
        for img in self.tensor.values().chunks(block) {
            for _ in 0..n {
                values.extend_from_slice(img);
            }
        }
        Self {
            regions: self.regions,
            tensor: Tensor::new(vec![self.tensor.shape()[0] * n, self.dim()], values)
                .expect("consistent shape"),
        }
    }

    /// Rows selected by image index, in the given order.
    pub fn select(&self, images: &[usize]) -> Self {
        let block = self.regions * self.dim();
        let v = self.tensor.values();
        let values = images
            .iter()
            .flat_map(|&i| v[i * block..(i + 1) * block].iter().copied())
            .collect();
        Self {
            regions: self.regions,
            tensor: Tensor::new(vec![images.len() * self.regions, self.dim()], values)
                .expect("nonempty selection"),
        }
    }
}

/// Recurrent state, one row per caption.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// Per-batch values reused by every step: the region rows and their
/// attention projection.
#[derive(Clone, Copy, Debug)]
pub struct Context {
    pub features: Var,
    pub projected: Var,
    pub regions: usize,
}

pub fn prepare<T: Real>(tape: &mut Tape<T>, p: &GenVars, features: &FeatureBatch<T>) -> Result<Context> {
    let f = tape.constant(&features.tensor);
    let projected = tape.matmul(f, p.att_a)?;
    Ok(Context {
        features: f,
        projected,
        regions: features.regions,
    })
}

/// `h0 = tanh(mean_k(a_k) P_h)`, `c0 = tanh(mean_k(a_k) P_c)`.
pub fn init_state<T: Real>(tape: &mut Tape<T>, p: &GenVars, ctx: &Context) -> Result<LstmState> {
    let mean = tape.group_mean(ctx.features, ctx.regions)?;
    let h = tape.matmul(mean, p.init_h)?;
    let c = tape.matmul(mean, p.init_c)?;
    Ok(LstmState {
        h: tape.tanh(h),
        c: tape.tanh(c),
    })
}

/// Soft attention from the previous hidden state: returns the `B x K`
/// weights and the `B x D` context.
pub fn attend<T: Real>(tape: &mut Tape<T>, p: &GenVars, h_prev: Var, ctx: &Context) -> Result<(Var, Var)> {
    let b = tape.dims(h_prev).0;
    let hp = tape.matmul(h_prev, p.att_h)?;
    let hp = tape.repeat_rows(hp, ctx.regions)?;
    let s = tape.add(ctx.projected, hp)?;
    let s = tape.tanh(s);
    let e = tape.matmul(s, p.att_e)?;
    let e = tape.reshape(e, &[b, ctx.regions])?;
    let alpha = tape.softmax_rows(e)?;
    let context = tape.group_weighted_sum(alpha, ctx.features)?;
    Ok((alpha, context))
}

pub fn lstm_step<T: Real>(
    tape: &mut Tape<T>,
    p: &GenVars,
    state: LstmState,
    prev_words: &[usize],
    context: Var,
) -> Result<LstmState> {
    let hidden = tape.dims(state.h).1;
    let emb = tape.embed_lookup(p.embed, prev_words)?;
    let zw = tape.matmul(emb, p.lstm_w)?;
    let zh = tape.matmul(state.h, p.lstm_h)?;
    let za = tape.matmul(context, p.lstm_a)?;
    let z = tape.add(zw, zh)?;
    let z = tape.add(z, za)?;
    let z = tape.add_row(z, p.lstm_b)?;
    let i = tape.slice_cols(z, 0, hidden)?;
    let f = tape.slice_cols(z, hidden, hidden)?;
    let g = tape.slice_cols(z, 2 * hidden, hidden)?;
    let o = tape.slice_cols(z, 3 * hidden, hidden)?;
    let (i, f, g, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.tanh(g), tape.sigmoid(o));
    let fc = tape.mul(f, state.c)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok(LstmState { h, c })
}

/// Pre-softmax word scores `context W_a + h W_h + b_w`.
pub fn word_logits<T: Real>(tape: &mut Tape<T>, p: &GenVars, context: Var, h: Var) -> Result<Var> {
    let a = tape.matmul(context, p.out_a)?;
    let b = tape.matmul(h, p.out_h)?;
    let s = tape.add(a, b)?;
    Ok(tape.add_row(s, p.out_b)?)
}

pub fn word_distribution<T: Real>(tape: &mut Tape<T>, p: &GenVars, context: Var, h: Var) -> Result<Var> {
    let l = word_logits(tape, p, context, h)?;
    Ok(tape.softmax_rows(l)?)
}

/// Output of one decoding step.
#[derive(Clone, Copy, Debug)]
pub struct Step {
    pub alpha: Var,
    pub context: Var,
    pub state: LstmState,
    pub log_probs: Var,
}

pub fn step<T: Real>(
    tape: &mut Tape<T>,
    p: &GenVars,
    ctx: &Context,
    state: LstmState,
    prev_words: &[usize],
) -> Result<Step> {
    let (alpha, context) = attend(tape, p, state.h, ctx)?;
    let state = lstm_step(tape, p, state, prev_words, context)?;
    let logits = word_logits(tape, p, context, state.h)?;
    let log_probs = tape.log_softmax_rows(logits)?;
    Ok(Step {
        alpha,
        context,
        state,
        log_probs,
    })
}

/// The gold part of an encoded caption: tokens after `begin` up to and
/// including the first `end`.
pub fn caption_targets(encoded: &[usize]) -> Result<&[usize]> {
    if encoded.first() != Some(&BEGIN) {
        return Err(Error::Caption("encoded caption must start with the begin token".into()));
    }
    let body = &encoded[1..];
    let end = body
        .iter()
        .position(|&t| t == END)
        .ok_or_else(|| Error::Caption("encoded caption has no end token".into()))?;
    Ok(&body[..=end])
}

/// Teacher-forced pass over target sequences.
///
/// `targets[b]` lists the tokens the model should emit (the end token
/// included when present). Step `t` feeds `begin` or `targets[b][t-1]` and
/// scores `targets[b][t]`; rows whose sequence is over feed padding and are
/// masked out.
#[derive(Clone, Debug)]
pub struct ForcedPass<T> {
    /// `B x 1` log-probabilities of the target token at each step.
    pub log_probs: Vec<Var>,
    /// `B x K` attention weights at each step.
    pub attention: Vec<Var>,
    /// `mask[t][b]` is 1 while step `t` is inside sequence `b`.
    pub mask: Vec<Vec<T>>,
}

pub fn teacher_forced<T: Real>(
    tape: &mut Tape<T>,
    p: &GenVars,
    config: &GeneratorConfig,
    features: &FeatureBatch<T>,
    targets: &[&[usize]],
) -> Result<ForcedPass<T>> {
    let b = targets.len();
    if b == 0 || features.batch() != b {
        return Err(Error::Invalid(format!(
            "{} target sequences for {} feature sets",
            b,
            features.batch()
        )));
    }
    for t in targets {
        if t.is_empty() {
            return Err(Error::Caption("empty target sequence".into()));
        }
        if t.len() > config.max_steps() {
            return Err(Error::Caption(format!(
                "sequence of {} tokens exceeds the {} generated positions",
                t.len(),
                config.max_steps()
            )));
        }
        if let Some(&bad) = t.iter().find(|&&id| id >= config.vocab_size) {
            return Err(Error::Token {
                id: bad,
                vocab: config.vocab_size,
            });
        }
    }
    let steps = targets.iter().map(|t| t.len()).max().unwrap_or(0);
    let ctx = prepare(tape, p, features)?;
    let mut state = init_state(tape, p, &ctx)?;
    let mut out = ForcedPass {
        log_probs: Vec::with_capacity(steps),
        attention: Vec::with_capacity(steps),
        mask: Vec::with_capacity(steps),
    };
    for t in 0..steps {
        let prev: Vec<usize> = targets
            .iter()
            .map(|s| match t {
                0 => BEGIN,
                _ if t < s.len() => s[t - 1],
                _ => crate::data::PAD,
            })
            .collect();
        let gold: Vec<usize> = targets.iter().map(|s| s.get(t).copied().unwrap_or(0)).collect();
        let s = step(tape, p, &ctx, state, &prev)?;
        state = s.state;
        out.log_probs.push(tape.pick(s.log_probs, &gold)?);
        out.attention.push(s.alpha);
        out.mask
            .push(targets.iter().map(|s| if t < s.len() { T::one() } else { T::zero() }).collect());
    }
    Ok(out)
}

/// Terms of the regularized negative log-likelihood, all divided by `B`.
#[derive(Clone, Copy, Debug)]
pub struct MleTerms {
    pub nll: Var,
    pub attention_penalty: Var,
    pub loss: Var,
}

/// `(-sum log p(gold) + lambda1 * sum_k (1 - sum_t alpha_tk)^2) / B` over
/// unpadded steps.
pub fn mle_from_pass<T: Real>(tape: &mut Tape<T>, pass: &ForcedPass<T>, lambda1: f64) -> Result<MleTerms> {
    let b = pass.mask.first().map_or(0, Vec::len);
    if b == 0 {
        return Err(Error::Invalid("empty teacher-forced pass".into()));
    }
    let inv_b = T::one() / T::of(b as f64);
    let mut nll = None;
    let mut spent = None;
    for ((&lp, &alpha), mask) in pass.log_probs.iter().zip(&pass.attention).zip(&pass.mask) {
        let neg: Vec<T> = mask.iter().map(|&m| -m * inv_b).collect();
        let term = tape.scale_rows(lp, &neg)?;
        nll = Some(match nll {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
        let a = tape.scale_rows(alpha, mask)?;
        spent = Some(match spent {
            None => a,
            Some(acc) => tape.add(acc, a)?,
        });
    }
    let nll = tape.sum(nll.expect("at least one step"));
    let gap = tape.affine(spent.expect("at least one step"), -T::one(), T::one());
    let sq = tape.square(gap);
    let pen = tape.sum(sq);
    let attention_penalty = tape.affine(pen, inv_b, T::zero());
    let weighted = tape.affine(attention_penalty, T::of(lambda1), T::zero());
    let loss = tape.add(nll, weighted)?;
    Ok(MleTerms {
        nll,
        attention_penalty,
        loss,
    })
}

/// Regularized MLE loss of encoded gold captions.
pub fn mle_loss<T: Real>(
    tape: &mut Tape<T>,
    p: &GenVars,
    config: &GeneratorConfig,
    features: &FeatureBatch<T>,
    encoded: &[&[usize]],
    lambda1: f64,
) -> Result<MleTerms> {
    if lambda1 < 0.0 {
        return Err(Error::Config("lambda1 must be nonnegative".into()));
    }
    let targets = encoded
        .iter()
        .map(|e| caption_targets(e))
        .collect::<Result<Vec<_>>>()?;
    let pass = teacher_forced(tape, p, config, features, &targets)?;
    mle_from_pass(tape, &pass, lambda1)
}
