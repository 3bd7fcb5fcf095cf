//! Style-adjective usage: entropy, top-k mass, and ranking.

use std::collections::BTreeMap;

use crate::data::StyleLexicon;

/// Counts of lexicon adjectives over a set of generated captions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StyleUsage {
    counts: BTreeMap<String, usize>,
}

impl StyleUsage {
    pub fn from_counts<S: Into<String>>(counts: impl IntoIterator<Item = (S, usize)>) -> Self {
        let counts = counts
            .into_iter()
            .filter(|(_, c)| *c > 0)
            .map(|(a, c)| (a.into(), c))
            .collect();
        Self { counts }
    }

    pub fn counts(&self) -> &BTreeMap<String, usize> {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// Number of distinct adjectives used.
    pub fn unique(&self) -> usize {
        self.counts.len()
    }

    pub fn probabilities(&self) -> BTreeMap<&str, f64> {
        let total = self.total() as f64;
        self.counts
            .iter()
            .map(|(a, &c)| (a.as_str(), c as f64 / total))
            .collect()
    }

    /// Adjectives by descending count, ties lexicographic.
    pub fn ranked(&self) -> Vec<(&str, usize)> {
        let mut v: Vec<(&str, usize)> = self.counts.iter().map(|(a, &c)| (a.as_str(), c)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        v
    }

    pub fn top(&self, k: usize) -> Vec<(String, usize)> {
        self.ranked()
            .into_iter()
            .take(k)
            .map(|(a, c)| (a.to_string(), c))
            .collect()
    }
}

/// Counts every token that is a lexicon adjective of either polarity.
pub fn extract_style_adjectives<'a, C>(captions: impl IntoIterator<Item = C>, lexicon: &StyleLexicon) -> StyleUsage
where
    C: IntoIterator<Item = &'a String>,
{
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for caption in captions {
        for tok in caption {
            if lexicon.is_adjective(tok) {
                *counts.entry(tok.clone()).or_insert(0) += 1;
            }
        }
    }
    StyleUsage { counts }
}

/// Shannon entropy in bits; 0 for an empty distribution.
pub fn style_entropy(usage: &StyleUsage) -> f64 {
    let total = usage.total() as f64;
    if total == 0.0 {
        return 0.0;
    }
    let h: f64 = usage
        .counts
        .values()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum();
    h.max(0.0)
}

/// Percentage of uses taken by the `k` most frequent adjectives; 100 when at
/// most `k` adjectives are used (including none).
pub fn top_k_mass(usage: &StyleUsage, k: usize) -> f64 {
    let k = k.max(1);
    if usage.unique() <= k {
        return 100.0;
    }
    let top: usize = usage.ranked().iter().take(k).map(|(_, c)| c).sum();
    100.0 * top as f64 / usage.total() as f64
}
