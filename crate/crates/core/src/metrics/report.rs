use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{bleu, cider, extract_style_adjectives, rouge_l, style_entropy, top_k_mass, EvalCorpus};
use crate::data::StyleLexicon;
use crate::{Error, Result};

/// One generated caption, as written by `sample` and read by `evaluate`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateRecord {
    pub image_id: String,
    pub tokens: Vec<String>,
}

pub fn write_candidates(path: impl AsRef<Path>, records: &[CandidateRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_candidates(path: impl AsRef<Path>) -> Result<Vec<CandidateRecord>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// All metrics of one evaluation run. Quality scores and the top-4 mass are
/// on the ×100 scale; entropy is in bits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub images: usize,
    pub references: usize,
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub adjective_uses: usize,
    pub unique_adjectives: usize,
    pub entropy: f64,
    pub top4_mass: f64,
    pub top_adjectives: Vec<(String, usize)>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl MetricReport {
    pub fn is_valid(&self) -> bool {
        [
            self.bleu_1,
            self.bleu_2,
            self.bleu_3,
            self.bleu_4,
            self.rouge_l,
            self.cider_d,
            self.entropy,
            self.top4_mass,
        ]
        .iter()
        .all(|v| v.is_finite() && *v >= 0.0)
    }

    /// Fixed-column table for terminal output.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "B-1", "B-2", "B-3", "B-4", "ROUGE-L", "CIDEr-D", "Entropy", "Top4%"
        );
        let _ = writeln!(
            s,
            "{:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.4} {:>8.2}",
            self.bleu_1,
            self.bleu_2,
            self.bleu_3,
            self.bleu_4,
            self.rouge_l,
            self.cider_d,
            self.entropy,
            self.top4_mass
        );
        let _ = writeln!(
            s,
            "images {}  references {}  adjective uses {}  unique {}",
            self.images, self.references, self.adjective_uses, self.unique_adjectives
        );
        if !self.top_adjectives.is_empty() {
            let list: Vec<String> = self
                .top_adjectives
                .iter()
                .map(|(a, c)| format!("{a}({c})"))
                .collect();
            let _ = writeln!(s, "top adjectives: {}", list.join(" "));
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

/// Runs every metric over `corpus`. `config` is echoed into the report.
pub fn evaluate_corpus(
    corpus: &EvalCorpus,
    lexicon: &StyleLexicon,
    config: serde_json::Value,
) -> Result<MetricReport> {
    let b = bleu(corpus, 4);
    let usage = extract_style_adjectives(corpus.items().iter().map(|it| &it.candidate), lexicon);
    Ok(MetricReport {
        images: corpus.len(),
        references: corpus.items().iter().map(|it| it.references.len()).sum(),
        bleu_1: b[0],
        bleu_2: b[1],
        bleu_3: b[2],
        bleu_4: b[3],
        rouge_l: rouge_l(corpus),
        cider_d: cider(corpus)?,
        adjective_uses: usage.total(),
        unique_adjectives: usage.unique(),
        entropy: style_entropy(&usage),
        top4_mass: top_k_mass(&usage, 4),
        top_adjectives: usage.top(10),
        config,
    })
}
