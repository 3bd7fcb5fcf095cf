//! Plain reimplementations of the caption metrics, keyed by joined n-gram
//! strings, shared by the metric tests and the acceptance run.
#![allow(dead_code)]

use std::collections::BTreeMap;

use attend_gan::metrics::EvalItem;

fn grams(tokens: &[String], n: usize) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for i in 0..(tokens.len() + 1).saturating_sub(n) {
        *out.entry(tokens[i..i + n].join(" ")).or_insert(0) += 1;
    }
    out
}

pub fn oracle_bleu(items: &[EvalItem], n_max: usize) -> Vec<f64> {
    let c: usize = items.iter().map(|it| it.candidate.len()).sum();
    let mut r = 0usize;
    for it in items {
        let mut lens: Vec<usize> = it.references.iter().map(Vec::len).collect();
        lens.sort();
        let cl = it.candidate.len() as i64;
        let mut best = lens[0];
        for &l in &lens {
            if (l as i64 - cl).abs() < (best as i64 - cl).abs() {
                best = l;
            }
        }
        r += best;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    let mut precisions = Vec::new();
    for n in 1..=n_max {
        let (mut hit, mut all) = (0usize, 0usize);
        for it in items {
            for (g, k) in grams(&it.candidate, n) {
                let cap = it.references.iter().map(|r| grams(r, n).get(&g).copied().unwrap_or(0)).max().unwrap();
                hit += k.min(cap);
                all += k;
            }
        }
        precisions.push(if all == 0 { 0.0 } else { hit as f64 / all as f64 });
    }
    (1..=n_max)
        .map(|n| {
            let p = &precisions[..n];
            if p.contains(&0.0) {
                0.0
            } else {
                100.0 * bp * p.iter().product::<f64>().powf(1.0 / n as f64)
            }
        })
        .collect()
}

/// Recursive LCS with a memo table.
pub fn lcs(a: &[String], b: &[String]) -> usize {
    fn go(a: &[String], b: &[String], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(v) = memo[i][j] {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo[i][j] = Some(v);
        v
    }
    go(a, b, 0, 0, &mut vec![vec![None; b.len()]; a.len()])
}

pub fn oracle_rouge(items: &[EvalItem]) -> f64 {
    let beta2 = 1.44;
    let mut sum = 0.0;
    for it in items {
        let mut best: f64 = 0.0;
        for r in &it.references {
            let l = lcs(&it.candidate, r) as f64;
            if l > 0.0 {
                let p = l / it.candidate.len() as f64;
                let rc = l / r.len() as f64;
                best = best.max((1.0 + beta2) * p * rc / (rc + beta2 * p));
            }
        }
        sum += best;
    }
    100.0 * sum / items.len() as f64
}

pub fn oracle_cider(items: &[EvalItem]) -> Vec<f64> {
    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    for it in items {
        let mut seen = std::collections::BTreeSet::new();
        for r in &it.references {
            for n in 1..=4 {
                seen.extend(grams(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let big_n = (items.len() as f64).ln();
    let vecs = |t: &[String]| -> Vec<BTreeMap<String, f64>> {
        (1..=4)
            .map(|n| {
                grams(t, n)
                    .into_iter()
                    .map(|(g, tf)| {
                        let d = (*df.get(&g).unwrap_or(&0)).max(1) as f64;
                        let v = tf as f64 * (big_n - d.ln());
                        (g, v)
                    })
                    .collect()
            })
            .collect()
    };
    let norm = |m: &BTreeMap<String, f64>| m.values().map(|v| v * v).sum::<f64>().sqrt();
    items
        .iter()
        .map(|it| {
            let h = vecs(&it.candidate);
            let hl = it.candidate.len().saturating_sub(1) as f64;
            let mut s = 0.0;
            for r in &it.references {
                let rv = vecs(r);
                let rl = r.len().saturating_sub(1) as f64;
                let pen = (-(hl - rl).powi(2) / 72.0).exp();
                for n in 0..4 {
                    let mut dot = 0.0;
                    for (g, &a) in &h[n] {
                        if let Some(&b) = rv[n].get(g) {
                            dot += a.min(b) * b;
                        }
                    }
                    let (nh, nr) = (norm(&h[n]), norm(&rv[n]));
                    if nh != 0.0 && nr != 0.0 {
                        dot /= nh * nr;
                    }
                    s += pen * dot / 4.0;
                }
            }
            10.0 * s / it.references.len() as f64
        })
        .collect()
}
