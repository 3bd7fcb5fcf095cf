//! Command-line pipeline: synthesize data, pretrain, train adversarially,
//! sample and evaluate. Every stage reads and writes plain files so the
//! stages can run as separate processes.

mod config;

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::data::{
    synth_corpus, CorpusConfig, Dataset, Split, Style, StyleLexicon, Vocabulary,
};
use crate::discriminator::DiscriminatorParams;
use crate::generator::{decode, DecodeMode, FeatureBatch, GeneratorParams};
use crate::metrics::{evaluate_corpus, read_candidates, write_candidates, CandidateRecord, EvalCorpus};
use crate::rng::{purpose, substream};
use crate::trainer::{
    adversarial_train, candidate_tokens, pretrain_discriminator, pretrain_generator, Stage, TrainLog,
    TrainState,
};
use crate::{Error, Result};

pub use config::{ModelConfig, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "attend-gan", version, about = "Attention captioner with adversarial style fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic scene corpus as JSON lines.
    Synth(SynthArgs),
    /// Maximum-likelihood pretraining of the generator on factual captions.
    PretrainGen(PretrainGenArgs),
    /// Critic pretraining against a frozen pretrained generator.
    PretrainDisc(PretrainDiscArgs),
    /// Adversarial fine-tuning on a styled corpus.
    Adversarial(AdversarialArgs),
    /// Decode captions for a split with a trained generator.
    Sample(SampleArgs),
    /// Score candidate captions against dataset references.
    Evaluate(EvaluateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SynthStyle {
    Factual,
    Positive,
    Negative,
    All,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Scene count; with `all` this is the factual count and the styled
    /// groups keep their default proportion.
    #[arg(long, default_value_t = 500)]
    scenes: usize,
    #[arg(long, value_enum, default_value = "all")]
    style: SynthStyle,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the sentiment lexicon used for the styled captions.
    #[arg(long)]
    lexicon_out: Option<PathBuf>,
}

/// Flags shared by the training stages; each overrides the config file.
#[derive(Debug, Args)]
struct TrainFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct PretrainGenArgs {
    #[command(flatten)]
    common: TrainFlags,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    /// Continue from a checkpoint written by an earlier run of this stage.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PretrainDiscArgs {
    #[command(flatten)]
    common: TrainFlags,
    #[arg(long)]
    gen_checkpoint: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Debug, Args)]
struct AdversarialArgs {
    #[command(flatten)]
    common: TrainFlags,
    #[arg(long, required_unless_present = "resume")]
    gen_checkpoint: Option<PathBuf>,
    #[arg(long, required_unless_present = "resume")]
    disc_checkpoint: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    style: Option<Style>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "greedy")]
    mode: DecodeMode,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the checkpoint's style: factual after pretraining, the
    /// adversarial style afterwards.
    #[arg(long)]
    style: Option<Style>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    candidates: PathBuf,
    /// Dataset JSON lines holding the reference captions.
    #[arg(long)]
    references: PathBuf,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
    /// Use only references of this style.
    #[arg(long)]
    style: Option<Style>,
}

/// Runs the command line `argv` (program name first) and returns the exit
/// code. Failures are reported as one `error[<kind>]: <message>` line.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            // clap's message runs until the first blank line; fold it
            // onto one line and drop the usage hint that follows.
            let rendered = e.to_string();
            let message: Vec<&str> = rendered
                .lines()
                .map(str::trim)
                .skip_while(|l| l.is_empty())
                .take_while(|l| !l.is_empty())
                .collect();
            let line = message.join(" ");
            let line = line.trim_start_matches("error: ");
            eprintln!("error[usage]: {}", if line.is_empty() { "invalid arguments" } else { line });
            return 2;
        }
    };
    let outcome = match cli.command {
        Command::Synth(a) => synth(a),
        Command::PretrainGen(a) => pretrain_gen(a),
        Command::PretrainDisc(a) => pretrain_disc(a),
        Command::Adversarial(a) => adversarial(a),
        Command::Sample(a) => sample(a),
        Command::Evaluate(a) => evaluate(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            1
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    if a.scenes == 0 {
        return Err(Error::Config("--scenes must be positive".into()));
    }
    let config = match a.style {
        SynthStyle::All => CorpusConfig::all_styles(a.scenes),
        SynthStyle::Factual => CorpusConfig::single_style(Style::Factual, a.scenes),
        SynthStyle::Positive => CorpusConfig::single_style(Style::Positive, a.scenes),
        SynthStyle::Negative => CorpusConfig::single_style(Style::Negative, a.scenes),
    };
    let lexicon = StyleLexicon::synthetic();
    let data = synth_corpus(&config, &lexicon, a.seed)?;
    data.save_jsonl(&a.out)?;
    if let Some(p) = &a.lexicon_out {
        lexicon.save(p)?;
    }
    eprintln!("wrote {} images to {}", data.len(), a.out.display());
    Ok(())
}

/// Config file (or the config echoed in `resume`), then flags on top.
fn layered_config(flags: &TrainFlags, resume: Option<&Checkpoint>) -> Result<RunConfig> {
    let mut cfg = match (&flags.config, resume) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(ck)) => serde_json::from_value(ck.run.clone())
            .map_err(|e| Error::Config(format!("checkpoint run config: {e}")))?,
        (None, None) => RunConfig::default(),
    };
    if let Some(p) = &flags.data {
        cfg.data = Some(p.clone());
    }
    if let Some(p) = &flags.out_dir {
        cfg.out_dir = Some(p.clone());
    }
    if let Some(s) = flags.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("missing required flag {flag} (or config entry)")))
}

fn load_data(path: &Path) -> Result<Dataset> {
    let data = Dataset::load_jsonl(path)?;
    if data.is_empty() {
        return Err(Error::Invalid(format!("{}: dataset is empty", path.display())));
    }
    Ok(data)
}

fn check_vocabulary(ck: &Checkpoint, data: &Dataset) -> Result<()> {
    if ck.vocabulary != data.train_vocabulary() {
        return Err(Error::Invalid(
            "checkpoint vocabulary does not match the dataset's training captions".into(),
        ));
    }
    Ok(())
}

fn save_epoch(dir: &Path, ck: &Checkpoint) -> Result<()> {
    ck.save(&dir.join(format!("epoch-{:03}.ckpt", ck.state.epoch)))
}

/// Writes `best.ckpt`: the final state with the best-validation generator
/// in place of the last one.
fn save_best(dir: &Path, state: &TrainState, cfg: &RunConfig, vocab: &Vocabulary) -> Result<()> {
    let mut best = state.clone();
    best.generator = state.best_generator().clone();
    Checkpoint::new(best, cfg.train.clone(), vocab.clone(), cfg.echo()).save(&dir.join("best.ckpt"))
}

/// Log rows written before `epoch` ended, for continuing an interrupted run.
fn resumed_log(dir: &Path, epoch: usize) -> Result<TrainLog> {
    let path = dir.join("log.csv");
    if !path.exists() {
        return Ok(TrainLog::default());
    }
    let mut log = TrainLog::load_csv(&path)?;
    log.records.retain(|r| r.epoch <= epoch);
    Ok(log)
}

fn epoch_line(state: &TrainState, log: &TrainLog) {
    let metric = log.records.last().and_then(|r| r.val_metric);
    match metric {
        Some(m) => eprintln!("epoch {} done, {} steps, validation {m:.3}", state.epoch, state.total_steps()),
        None => eprintln!("epoch {} done, {} steps", state.epoch, state.total_steps()),
    }
}

fn pretrain_gen(a: PretrainGenArgs) -> Result<()> {
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut cfg = layered_config(&a.common, resume.as_ref())?;
    if let Some(e) = a.epochs {
        cfg.train.pretrain_epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.gen_lr = lr;
    }
    cfg.validate()?;
    let data_path = required(&cfg.data, "--data")?.to_path_buf();
    let dir = required(&cfg.out_dir, "--out-dir")?.to_path_buf();
    let data = load_data(&data_path)?;
    let vocab = data.train_vocabulary();
    let (_, region_dim) = data.feature_shape().expect("nonempty dataset");
    let (mut state, mut log) = match resume {
        Some(ck) => {
            check_vocabulary(&ck, &data)?;
            if ck.state.stage != Stage::PretrainGenerator {
                return Err(Error::Invalid("--resume needs a generator pretraining checkpoint".into()));
            }
            let log = resumed_log(&dir, ck.state.epoch)?;
            (ck.state, log)
        }
        None => {
            let gen = GeneratorParams::new(cfg.generator_config(vocab.len(), region_dim), cfg.train.seed)?;
            (TrainState::new(Stage::PretrainGenerator, gen, None, &cfg.train), TrainLog::default())
        }
    };
    fs::create_dir_all(&dir)?;
    let mut on_epoch = epoch_hook(&dir, &cfg, &vocab);
    pretrain_generator(&mut state, &data, &vocab, &cfg.train, &mut log, &mut on_epoch)?;
    log.save_csv(dir.join("log.csv"))?;
    save_best(&dir, &state, &cfg, &vocab)
}

/// Per-epoch checkpoint and log flush, so an interrupted run can resume
/// from the last completed epoch.
fn epoch_hook<'a>(
    dir: &'a Path,
    cfg: &'a RunConfig,
    vocab: &'a Vocabulary,
) -> impl FnMut(&TrainState, &TrainLog) -> Result<()> + 'a {
    move |s, log| {
        save_epoch(dir, &Checkpoint::new(s.clone(), cfg.train.clone(), vocab.clone(), cfg.echo()))?;
        log.save_csv(dir.join("log.csv"))?;
        epoch_line(s, log);
        Ok(())
    }
}

fn pretrain_disc(a: PretrainDiscArgs) -> Result<()> {
    let mut cfg = layered_config(&a.common, None)?;
    if let Some(s) = a.steps {
        cfg.train.critic_pretrain_steps = s;
    }
    cfg.validate()?;
    let data_path = required(&cfg.data, "--data")?.to_path_buf();
    let dir = required(&cfg.out_dir, "--out-dir")?.to_path_buf();
    let data = load_data(&data_path)?;
    let gen_ck = Checkpoint::load(&a.gen_checkpoint)?;
    check_vocabulary(&gen_ck, &data)?;
    let vocab = gen_ck.vocabulary.clone();
    let generator = gen_ck.state.best_generator().clone();
    let mut critic_cfg = cfg.critic_config(vocab.len());
    critic_cfg.seq_len = generator.config.max_steps();
    let critic = DiscriminatorParams::new(critic_cfg, cfg.train.seed)?;
    let mut state = TrainState::new(Stage::PretrainCritic, generator, Some(critic), &cfg.train);
    let mut log = TrainLog::default();
    fs::create_dir_all(&dir)?;
    pretrain_discriminator(&mut state, &data, &vocab, &cfg.train, &mut log)?;
    log.save_csv(dir.join("log.csv"))?;
    if let Some(r) = log.records.last() {
        eprintln!(
            "critic: {} steps, mean real {:.5}, mean fake {:.5}",
            state.critic_steps,
            r.mean_real.unwrap_or(f64::NAN),
            r.mean_fake.unwrap_or(f64::NAN)
        );
    }
    Checkpoint::new(state, cfg.train.clone(), vocab, cfg.echo()).save(&dir.join("critic.ckpt"))
}

fn adversarial(a: AdversarialArgs) -> Result<()> {
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut cfg = layered_config(&a.common, resume.as_ref())?;
    if let Some(e) = a.epochs {
        cfg.train.adversarial_epochs = e;
    }
    if let Some(s) = a.style {
        cfg.train.style = s;
    }
    if let Some(l) = a.lambda2 {
        cfg.train.lambda2 = l;
    }
    if let Some(lr) = a.lr {
        cfg.train.gen_lr = lr;
    }
    cfg.validate()?;
    let data_path = required(&cfg.data, "--data")?.to_path_buf();
    let dir = required(&cfg.out_dir, "--out-dir")?.to_path_buf();
    let data = load_data(&data_path)?;
    let (mut state, mut log, vocab) = match resume {
        Some(ck) => {
            check_vocabulary(&ck, &data)?;
            if ck.state.stage != Stage::Adversarial {
                return Err(Error::Invalid("--resume needs an adversarial checkpoint".into()));
            }
            let log = resumed_log(&dir, ck.state.epoch)?;
            (ck.state, log, ck.vocabulary)
        }
        None => {
            let gen_path = a.gen_checkpoint.as_deref().expect("required by clap");
            let disc_path = a.disc_checkpoint.as_deref().expect("required by clap");
            let gen_ck = Checkpoint::load(gen_path)?;
            let disc_ck = Checkpoint::load(disc_path)?;
            check_vocabulary(&gen_ck, &data)?;
            check_vocabulary(&disc_ck, &data)?;
            let critic = disc_ck
                .state
                .critic
                .ok_or_else(|| Error::Invalid(format!("{} holds no critic", disc_path.display())))?;
            let mut state = TrainState::new(
                Stage::Adversarial,
                gen_ck.state.best_generator().clone(),
                Some(critic),
                &cfg.train,
            );
            state.critic_opt = disc_ck.state.critic_opt;
            (state, TrainLog::default(), gen_ck.vocabulary)
        }
    };
    fs::create_dir_all(&dir)?;
    let mut on_epoch = epoch_hook(&dir, &cfg, &vocab);
    adversarial_train(&mut state, &data, &vocab, &cfg.train, None, &mut log, &mut on_epoch)?;
    log.save_csv(dir.join("log.csv"))?;
    save_best(&dir, &state, &cfg, &vocab)
}

fn sample(a: SampleArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let data = load_data(&a.data)?;
    check_vocabulary(&ck, &data)?;
    let style = a.style.unwrap_or(match ck.state.stage {
        Stage::Adversarial => ck.train.style,
        _ => Style::Factual,
    });
    let seed = a.seed.unwrap_or(ck.train.seed);
    let generator = ck.state.best_generator();
    let images = data.images_with(style, a.split);
    if images.is_empty() {
        return Err(Error::Invalid(format!("no {style} images in the {} split", a.split)));
    }
    let feats = FeatureBatch::from_sets(images.iter().map(|&i| &data.images[i].features))?;
    let prefixes: Vec<&[usize]> = vec![&[]; images.len()];
    let mut rngs: Vec<_> = match a.mode {
        DecodeMode::Greedy => Vec::new(),
        DecodeMode::Multinomial => (0..images.len())
            .map(|b| substream(seed, &[purpose::EVAL, b as u64]))
            .collect(),
    };
    let captions = decode(generator, &feats, &prefixes, a.mode, &mut rngs, false)?;
    let records: Vec<CandidateRecord> = images
        .iter()
        .zip(&captions)
        .map(|(&i, c)| CandidateRecord {
            image_id: data.images[i].image_id.clone(),
            tokens: candidate_tokens(&ck.vocabulary, &c.ids),
        })
        .collect();
    write_candidates(&a.out, &records)?;
    eprintln!("wrote {} captions to {}", records.len(), a.out.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let lexicon = match &a.lexicon {
        Some(p) => StyleLexicon::load(p)?,
        None => StyleLexicon::synthetic(),
    };
    let data = load_data(&a.references)?;
    let candidates = read_candidates(&a.candidates)?;
    let references: HashMap<String, Vec<Vec<String>>> = data
        .images
        .iter()
        .map(|r| {
            let refs = r
                .captions
                .iter()
                .filter(|c| a.style.is_none_or(|s| c.style == s))
                .map(|c| c.tokens.clone())
                .collect();
            (r.image_id.clone(), refs)
        })
        .collect();
    let corpus = EvalCorpus::align(
        candidates.into_iter().map(|c| (c.image_id, c.tokens)).collect(),
        &references,
    )?;
    let echo = serde_json::json!({
        "candidates": a.candidates,
        "references": a.references,
        "lexicon": a.lexicon,
        "style": a.style,
    });
    let report = evaluate_corpus(&corpus, &lexicon, echo)?;
    report.save(&a.report)?;
    println!("{}", report.table());
    Ok(())
}
