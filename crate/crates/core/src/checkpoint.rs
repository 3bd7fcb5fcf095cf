//! Binary checkpoints of a complete [`TrainState`].
//!
//! Layout: the 6-byte magic `ATGAN1` (the last byte doubles as the format
//! version), an 8-byte little-endian header length, a JSON header, then the
//! payload of little-endian `f32` values in manifest order. The header holds
//! the configs, vocabulary, counters and a manifest of every tensor with its
//! shape and byte range.

use std::fs;
use std::io::Write;
use std::path::Path;

use diffcore::{Adam, BatchNormStats, ParamStore, RmsProp, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::discriminator::{CriticConfig, DiscriminatorParams};
use crate::generator::{GeneratorConfig, GeneratorParams};
use crate::trainer::{BestRecord, Stage, TrainConfig, TrainState};
use crate::{Error, Result};

pub const MAGIC: &[u8; 5] = b"ATGAN";
pub const VERSION: u8 = b'1';

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    /// Length in bytes.
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    stage: Stage,
    train: TrainConfig,
    generator: GeneratorConfig,
    critic: Option<CriticConfig>,
    vocabulary: Vocabulary,
    epoch: usize,
    gen_steps: u64,
    critic_steps: u64,
    adam_steps: u64,
    /// Running-statistics momentum and epsilon per batch-norm layer.
    batch_norm: Vec<(f32, f32)>,
    best: Option<(usize, f64)>,
    /// Free-form echo of the run configuration that produced the file.
    run: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

/// A training state together with everything needed to interpret it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub train: TrainConfig,
    pub vocabulary: Vocabulary,
    pub run: serde_json::Value,
}

#[derive(Default)]
struct Writer {
    entries: Vec<ManifestEntry>,
    payload: Vec<u8>,
}

impl Writer {
    fn push(&mut self, name: String, shape: &[usize], values: &[f32]) {
        let offset = self.payload.len() as u64;
        for v in values {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
        self.entries.push(ManifestEntry {
            name,
            shape: shape.to_vec(),
            offset,
            length: (values.len() * 4) as u64,
        });
    }

    fn store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.push(format!("{prefix}/{name}"), t.shape(), t.values());
        }
    }

    fn buffers(&mut self, prefix: &str, store: &ParamStore, buffers: &[Vec<f32>]) {
        for ((name, t), b) in store.iter().zip(buffers) {
            self.push(format!("{prefix}/{name}"), t.shape(), b);
        }
    }
}

impl Checkpoint {
    pub fn new(state: TrainState, train: TrainConfig, vocabulary: Vocabulary, run: serde_json::Value) -> Self {
        Self {
            state,
            train,
            vocabulary,
            run,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let s = &self.state;
        let mut w = Writer::default();
        w.store("generator", &s.generator.store);
        w.buffers("adam.m", &s.generator.store, s.gen_opt.first_moments());
        w.buffers("adam.v", &s.generator.store, s.gen_opt.second_moments());
        let mut batch_norm = Vec::new();
        if let Some(c) = &s.critic {
            w.store("critic", &c.store);
            for (i, st) in c.stats.iter().enumerate() {
                w.push(format!("critic.bn/{i}.mean"), &[st.features()], &st.mean);
                w.push(format!("critic.bn/{i}.var"), &[st.features()], &st.var);
                batch_norm.push((st.momentum, st.eps));
            }
            w.buffers("rmsprop", &c.store, s.critic_opt.square_avg());
        }
        if let Some(b) = &s.best {
            w.store("best", &b.generator.store);
        }
        let header = Header {
            version: 1,
            stage: s.stage,
            train: self.train.clone(),
            generator: s.generator.config.clone(),
            critic: s.critic.as_ref().map(|c| c.config.clone()),
            vocabulary: self.vocabulary.clone(),
            epoch: s.epoch,
            gen_steps: s.gen_steps,
            critic_steps: s.critic_steps,
            adam_steps: s.gen_opt.steps(),
            batch_norm,
            best: s.best.as_ref().map(|b| (b.epoch, b.metric)),
            run: self.run.clone(),
            tensors: w.entries,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(14 + header.len() + w.payload.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&w.payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 || &bytes[..5] != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?}, expected \"ATGAN1\"",
                String::from_utf8_lossy(&bytes[..bytes.len().min(6)])
            )));
        }
        if bytes[5] != VERSION {
            return Err(Error::Version {
                found: (bytes[5] as char).escape_default().to_string(),
                expected: (VERSION as char).to_string(),
            });
        }
        let len = bytes
            .get(6..14)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .ok_or_else(|| Error::Checkpoint("truncated header length".into()))?;
        let end = 14usize
            .checked_add(usize::try_from(len).map_err(|_| Error::Checkpoint("header too large".into()))?)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[14..end])
            .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
        if header.version != 1 {
            return Err(Error::Version {
                found: header.version.to_string(),
                expected: "1".into(),
            });
        }
        let payload = &bytes[end..];
        let mut r = Reader::new(&header.tensors, payload)?;

        let gen_shapes = header.generator.shapes();
        let generator = GeneratorParams::from_store(header.generator.clone(), r.store("generator", &gen_shapes)?)?;
        let first = r.buffers("adam.m", &gen_shapes)?;
        let second = r.buffers("adam.v", &gen_shapes)?;
        let gen_opt = Adam::from_parts(header.train.adam().config, header.adam_steps, first, second)?;

        let (critic, critic_opt) = match &header.critic {
            Some(cfg) => {
                let shapes = cfg.shapes();
                let store = r.store("critic", &shapes)?;
                if header.batch_norm.len() != cfg.windows.len() {
                    return Err(Error::Checkpoint("batch-norm layer count disagrees with critic config".into()));
                }
                let mut stats = Vec::new();
                for (i, &(momentum, eps)) in header.batch_norm.iter().enumerate() {
                    let f = cfg.filters;
                    stats.push(BatchNormStats {
                        mean: r.take(&format!("critic.bn/{i}.mean"), &[f])?,
                        var: r.take(&format!("critic.bn/{i}.var"), &[f])?,
                        momentum,
                        eps,
                    });
                }
                let square = r.buffers("rmsprop", &shapes)?;
                let critic = DiscriminatorParams::from_parts(cfg.clone(), store, stats)?;
                (Some(critic), RmsProp::from_parts(header.train.rmsprop().config, square))
            }
            None => (None, header.train.rmsprop()),
        };
        let best = match header.best {
            Some((epoch, metric)) => Some(BestRecord {
                epoch,
                metric,
                generator: GeneratorParams::from_store(header.generator.clone(), r.store("best", &gen_shapes)?)?,
            }),
            None => None,
        };
        r.finish()?;
        let state = TrainState {
            stage: header.stage,
            generator,
            critic,
            gen_opt,
            critic_opt,
            epoch: header.epoch,
            gen_steps: header.gen_steps,
            critic_steps: header.critic_steps,
            best,
        };
        Ok(Self {
            state,
            train: header.train,
            vocabulary: header.vocabulary,
            run: header.run,
        })
    }

    /// Writes through a temporary file and renames, so an interrupted save
    /// never leaves a half-written checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Walks the manifest in order, checking that entries tile the payload.
struct Reader<'a> {
    entries: std::slice::Iter<'a, ManifestEntry>,
    payload: &'a [u8],
    cursor: u64,
}

impl<'a> Reader<'a> {
    fn new(entries: &'a [ManifestEntry], payload: &'a [u8]) -> Result<Self> {
        let total: u64 = entries.iter().map(|e| e.length).sum();
        if (payload.len() as u64) < total {
            return Err(Error::Checkpoint(format!(
                "truncated payload: {} bytes, manifest needs {total}",
                payload.len()
            )));
        }
        if payload.len() as u64 > total {
            return Err(Error::Checkpoint(format!(
                "payload has {} trailing bytes",
                payload.len() as u64 - total
            )));
        }
        Ok(Self {
            entries: entries.iter(),
            payload,
            cursor: 0,
        })
    }

    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let e = self
            .entries
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("manifest ends before tensor {name}")))?;
        if e.name != name {
            return Err(Error::Checkpoint(format!("expected tensor {name}, manifest has {}", e.name)));
        }
        if e.shape != shape {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for tensor {name}: manifest {:?}, expected {shape:?}",
                e.shape
            )));
        }
        let numel: usize = shape.iter().product();
        if e.length != (numel * 4) as u64 || e.offset != self.cursor {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has byte range {}+{}, expected {}+{}",
                e.offset,
                e.length,
                self.cursor,
                numel * 4
            )));
        }
        let start = e.offset as usize;
        let bytes = &self.payload[start..start + e.length as usize];
        self.cursor += e.length;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn store<S: AsRef<str>>(&mut self, prefix: &str, shapes: &[(S, [usize; 2])]) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, shape) in shapes {
            let name = name.as_ref();
            let values = self.take(&format!("{prefix}/{name}"), shape)?;
            store.insert(name, Tensor::new(shape.to_vec(), values)?.with_grad())?;
        }
        Ok(store)
    }

    /// Optimizer buffers are absent until the first update.
    fn buffers<S: AsRef<str>>(&mut self, prefix: &str, shapes: &[(S, [usize; 2])]) -> Result<Vec<Vec<f32>>> {
        let present = self
            .entries
            .as_slice()
            .first()
            .is_some_and(|e| e.name.starts_with(&format!("{prefix}/")));
        if !present {
            return Ok(Vec::new());
        }
        shapes
            .iter()
            .map(|(name, shape)| self.take(&format!("{prefix}/{}", name.as_ref()), shape))
            .collect()
    }

    fn finish(mut self) -> Result<()> {
        match self.entries.next() {
            Some(e) => Err(Error::Checkpoint(format!("unexpected tensor {}", e.name))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus, CorpusConfig, Split, Style, StyleLexicon};
    use crate::trainer::{critic_step, generator_step};

    fn trained_state() -> (TrainState, TrainConfig, Vocabulary) {
        let data = synth_corpus(&CorpusConfig::all_styles(12), &StyleLexicon::synthetic(), 3).unwrap();
        let vocab = data.train_vocabulary();
        let gen_cfg = GeneratorConfig {
            vocab_size: vocab.len(),
            embed_dim: 6,
            region_dim: data.feature_shape().unwrap().1,
            hidden_dim: 8,
            attention_dim: 5,
            max_len: 16,
        };
        let critic_cfg = CriticConfig {
            vocab_size: vocab.len(),
            embed_dim: 5,
            windows: vec![2, 3],
            filters: 4,
            seq_len: 15,
            ..CriticConfig::default()
        };
        let train = TrainConfig {
            gen_batch: 4,
            critic_batch: 4,
            rollouts: 2,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(
            Stage::Adversarial,
            GeneratorParams::new(gen_cfg, 1).unwrap(),
            Some(DiscriminatorParams::new(critic_cfg, 2).unwrap()),
            &train,
        );
        let examples = data.examples(Style::Positive, Split::Train, &vocab, 16).unwrap();
        let batch: Vec<_> = examples.iter().take(4).collect();
        let critic = state.critic.take().unwrap();
        generator_step(&mut state.generator, &mut state.gen_opt, &batch, &data, Some(&critic), &train, &[3, 0]).unwrap();
        state.critic = Some(critic);
        critic_step(
            state.critic.as_mut().unwrap(),
            &mut state.critic_opt,
            &state.generator,
            &examples,
            &data,
            &train,
            &[3, 0],
        )
        .unwrap();
        state.gen_steps = 1;
        state.critic_steps = 1;
        state.epoch = 1;
        state.best = Some(BestRecord {
            epoch: 1,
            metric: 12.5,
            generator: state.generator.clone(),
        });
        (state, train, vocab)
    }

    fn tensors(s: &TrainState) -> Vec<Vec<f32>> {
        let mut out: Vec<Vec<f32>> = s.generator.store.iter().map(|(_, t)| t.values().to_vec()).collect();
        out.extend(s.gen_opt.first_moments().iter().cloned());
        out.extend(s.gen_opt.second_moments().iter().cloned());
        let c = s.critic.as_ref().unwrap();
        out.extend(c.store.iter().map(|(_, t)| t.values().to_vec()));
        out.extend(c.stats.iter().flat_map(|st| [st.mean.clone(), st.var.clone()]));
        out.extend(s.critic_opt.square_avg().iter().cloned());
        out
    }

    fn bits(v: &[Vec<f32>]) -> Vec<Vec<u32>> {
        v.iter().map(|t| t.iter().map(|x| x.to_bits()).collect()).collect()
    }

    fn header_of(bytes: &[u8]) -> (usize, serde_json::Value) {
        let len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        (14 + len, serde_json::from_slice(&bytes[14..14 + len]).unwrap())
    }

    fn with_header(bytes: &[u8], header: &serde_json::Value) -> Vec<u8> {
        let (end, _) = header_of(bytes);
        let h = serde_json::to_vec(header).unwrap();
        let mut out = bytes[..6].to_vec();
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(&h);
        out.extend_from_slice(&bytes[end..]);
        out
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (state, train, vocab) = trained_state();
        let ck = Checkpoint::new(state, train, vocab, serde_json::json!({"note": "x"}));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(bits(&tensors(&back.state)), bits(&tensors(&ck.state)));
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.vocabulary, ck.vocabulary);
        assert_eq!(back.train, ck.train);
        assert_eq!(back.run, ck.run);
        assert_eq!(back.state.gen_opt.steps(), 1);
        assert_eq!(back.state.best.as_ref().unwrap().metric, 12.5);
        assert_eq!((back.state.epoch, back.state.gen_steps, back.state.critic_steps), (1, 1, 1));
    }

    #[test]
    fn manifest_partitions_the_payload() {
        let (state, train, vocab) = trained_state();
        let bytes = Checkpoint::new(state, train, vocab, serde_json::Value::Null).to_bytes().unwrap();
        let (end, header) = header_of(&bytes);
        let mut cursor = 0;
        for e in header["tensors"].as_array().unwrap() {
            assert_eq!(e["offset"].as_u64().unwrap(), cursor);
            let numel: u64 = e["shape"].as_array().unwrap().iter().map(|d| d.as_u64().unwrap()).product();
            assert_eq!(e["length"].as_u64().unwrap(), 4 * numel);
            cursor += e["length"].as_u64().unwrap();
        }
        assert_eq!(cursor as usize, bytes.len() - end);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let (state, train, vocab) = trained_state();
        let bytes = Checkpoint::new(state, train, vocab, serde_json::Value::Null).to_bytes().unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        let err = Checkpoint::from_bytes(&bad).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");

        let mut bad = bytes.clone();
        bad[5] = b'2';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Version { .. })));

        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        assert!(Checkpoint::from_bytes(&bytes[..20]).is_err());

        let (_, mut header) = header_of(&bytes);
        header["tensors"][1]["shape"] = serde_json::json!([1, 1]);
        let err = Checkpoint::from_bytes(&with_header(&bytes, &header)).unwrap_err().to_string();
        assert!(err.contains("generator/lstm.w"), "{err}");

        let (_, mut header) = header_of(&bytes);
        header["version"] = serde_json::json!(7);
        assert!(matches!(
            Checkpoint::from_bytes(&with_header(&bytes, &header)),
            Err(Error::Version { .. })
        ));
    }

    #[test]
    fn fresh_state_without_optimizer_history() {
        let (state, train, vocab) = trained_state();
        let fresh = TrainState::new(Stage::PretrainGenerator, state.generator.clone(), None, &train);
        let bytes = Checkpoint::new(fresh.clone(), train, vocab, serde_json::Value::Null).to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(back.state.critic.is_none() && back.state.best.is_none());
        assert_eq!(back.state.gen_opt, fresh.gen_opt);
    }
}
