//! BLEU, ROUGE-L and CIDEr-D over an aligned evaluation corpus.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One image: a generated caption and its human references.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalItem {
    pub image_id: String,
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalCorpus {
    items: Vec<EvalItem>,
}

impl EvalCorpus {
    pub fn new(items: Vec<EvalItem>) -> Result<Self> {
        for it in &items {
            if it.references.is_empty() {
                return Err(Error::Invalid(format!("image {} has no references", it.image_id)));
            }
            if it.candidate.is_empty() {
                return Err(Error::Invalid(format!("image {} has an empty candidate", it.image_id)));
            }
        }
        Ok(Self { items })
    }

    /// Pairs each candidate with the references of the same image id.
    pub fn align(
        candidates: Vec<(String, Vec<String>)>,
        references: &HashMap<String, Vec<Vec<String>>>,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        let items = candidates
            .into_iter()
            .map(|(image_id, candidate)| {
                if !seen.insert(image_id.clone()) {
                    return Err(Error::Invalid(format!("duplicate candidate for image {image_id}")));
                }
                let refs = references.get(&image_id).ok_or_else(|| {
                    Error::Invalid(format!("candidate image {image_id} has no references"))
                })?;
                Ok(EvalItem {
                    image_id,
                    candidate,
                    references: refs.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(items)
    }

    pub fn items(&self) -> &[EvalItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

type Counts<'a> = HashMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> Counts<'_> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU-1..`max_n` on the ×100 scale.
///
/// Clipped n-gram matches and candidate n-gram totals are summed over the
/// corpus; the effective reference length uses the reference closest in
/// length to each candidate (shorter on ties). The brevity penalty is 1 when
/// the candidate corpus is longer than the reference corpus.
pub fn bleu(corpus: &EvalCorpus, max_n: usize) -> Vec<f64> {
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for it in corpus.items() {
        let c = it.candidate.len();
        cand_len += c;
        ref_len += it
            .references
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(c), r))
            .unwrap_or(0);
        for n in 1..=max_n {
            let cand = ngrams(&it.candidate, n);
            let mut best: Counts = HashMap::new();
            for r in &it.references {
                for (g, k) in ngrams(r, n) {
                    let e = best.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in cand {
                total[n - 1] += k;
                matched[n - 1] += k.min(best.get(g).copied().unwrap_or(0));
            }
        }
    }
    let bp = if cand_len == 0 {
        0.0
    } else if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let mut log_sum = 0.0;
    let mut out = Vec::with_capacity(max_n);
    for n in 0..max_n {
        if matched[n] == 0 || total[n] == 0 {
            log_sum = f64::NEG_INFINITY;
        } else {
            log_sum += (matched[n] as f64 / total[n] as f64).ln();
        }
        let score = if log_sum.is_finite() {
            bp * (log_sum / (n + 1) as f64).exp()
        } else {
            0.0
        };
        out.push(100.0 * score);
    }
    out
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure of one candidate against one reference.
pub fn rouge_l_pair(candidate: &[String], reference: &[String], beta: f64) -> f64 {
    let l = lcs(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean over images of the best ROUGE-L F (β = 1.2) against any reference,
/// ×100.
pub fn rouge_l(corpus: &EvalCorpus) -> f64 {
    if corpus.is_empty() {
        return 0.0;
    }
    let sum: f64 = corpus
        .items()
        .iter()
        .map(|it| {
            it.references
                .iter()
                .map(|r| rouge_l_pair(&it.candidate, r, 1.2))
                .fold(0.0, f64::max)
        })
        .sum();
    100.0 * sum / corpus.len() as f64
}

const CIDER_N: usize = 4;
const CIDER_SIGMA: f64 = 6.0;

struct TfIdf<'a> {
    vec: [HashMap<&'a [String], f64>; CIDER_N],
    norm: [f64; CIDER_N],
    length: f64,
}

fn tfidf<'a>(tokens: &'a [String], df: &HashMap<&[String], usize>, log_n: f64) -> TfIdf<'a> {
    let mut vec: [HashMap<&[String], f64>; CIDER_N] = Default::default();
    let mut norm = [0.0; CIDER_N];
    let mut length = 0.0;
    for n in 1..=CIDER_N {
        for (g, tf) in ngrams(tokens, n) {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            let v = tf as f64 * (log_n - d.ln());
            norm[n - 1] += v * v;
            if n == 2 {
                length += tf as f64;
            }
            vec[n - 1].insert(g, v);
        }
    }
    norm.iter_mut().for_each(|x| *x = x.sqrt());
    TfIdf { vec, norm, length }
}

fn cider_sim(h: &TfIdf, r: &TfIdf) -> f64 {
    let delta = h.length - r.length;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut total = 0.0;
    for n in 0..CIDER_N {
        let mut val = 0.0;
        for (g, &hv) in &h.vec[n] {
            if let Some(&rv) = r.vec[n].get(g) {
                val += hv.min(rv) * rv;
            }
        }
        if h.norm[n] != 0.0 && r.norm[n] != 0.0 {
            val /= h.norm[n] * r.norm[n];
        }
        total += val * penalty;
    }
    total / CIDER_N as f64
}

/// Per-image CIDEr-D scores on the conventional 0..~10 scale.
///
/// Document frequencies are taken over the reference sets of all images.
pub fn cider_scores(corpus: &EvalCorpus) -> Result<Vec<f64>> {
    if corpus.len() < 2 {
        return Err(Error::Invalid(format!(
            "CIDEr-D needs at least 2 images, corpus has {}",
            corpus.len()
        )));
    }
    let mut df: HashMap<&[String], usize> = HashMap::new();
    for it in corpus.items() {
        let mut grams: HashSet<&[String]> = HashSet::new();
        for r in &it.references {
            for n in 1..=CIDER_N {
                grams.extend(ngrams(r, n).into_keys());
            }
        }
        for g in grams {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_n = (corpus.len() as f64).ln();
    Ok(corpus
        .items()
        .iter()
        .map(|it| {
            let h = tfidf(&it.candidate, &df, log_n);
            let s: f64 = it
                .references
                .iter()
                .map(|r| cider_sim(&h, &tfidf(r, &df, log_n)))
                .sum();
            10.0 * s / it.references.len() as f64
        })
        .collect())
}

/// Corpus CIDEr-D reported ×100 (a unit score of 0.556 prints as 55.6).
pub fn cider(corpus: &EvalCorpus) -> Result<f64> {
    let scores = cider_scores(corpus)?;
    Ok(100.0 * scores.iter().sum::<f64>() / scores.len() as f64)
}
