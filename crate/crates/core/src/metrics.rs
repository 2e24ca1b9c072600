//! Caption quality against a single reference: BLEU-1/4 and ROUGE-1/2/L,
//! with per-group averaging.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tokenization {
    /// Lowercase, every non-alphanumeric character becomes a separator.
    #[default]
    Normalized,
    /// Whitespace split only.
    Raw,
}

pub fn tokenize(text: &str, mode: Tokenization) -> Vec<String> {
    match mode {
        Tokenization::Raw => text.split_whitespace().map(str::to_string).collect(),
        Tokenization::Normalized => {
            let cleaned: String = text
                .chars()
                .flat_map(char::to_lowercase)
                .map(|c| if c.is_alphanumeric() { c } else { ' ' })
                .collect();
            cleaned.split_whitespace().map(str::to_string).collect()
        }
    }
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// (clipped matches, candidate n-gram total).
fn clipped(cand: &[String], refr: &[String], n: usize) -> (usize, usize) {
    let c = ngrams(cand, n);
    let r = ngrams(refr, n);
    let hits = c.iter().map(|(g, k)| (*k).min(*r.get(g).unwrap_or(&0))).sum();
    (hits, cand.len().saturating_sub(n - 1))
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

fn bleu_from_counts(counts: &[(usize, usize)], c: usize, r: usize) -> f64 {
    if c == 0 || counts.iter().any(|&(h, t)| h == 0 || t == 0) {
        return 0.0;
    }
    let log_mean =
        counts.iter().map(|&(h, t)| (h as f64 / t as f64).ln()).sum::<f64>() / counts.len() as f64;
    (brevity_penalty(c, r) * log_mean.exp()).min(1.0)
}

/// Sentence-level BLEU-n with uniform weights and no smoothing.
pub fn bleu_n(candidate: &str, reference: &str, n: usize, tok: Tokenization) -> f64 {
    let c = tokenize(candidate, tok);
    let r = tokenize(reference, tok);
    let counts: Vec<_> = (1..=n).map(|k| clipped(&c, &r, k)).collect();
    bleu_from_counts(&counts, c.len(), r.len())
}

/// Corpus-level BLEU-n: counts and lengths are pooled before combining.
pub fn corpus_bleu<'a>(
    pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    n: usize,
    tok: Tokenization,
) -> f64 {
    let mut counts = vec![(0usize, 0usize); n];
    let (mut cl, mut rl) = (0, 0);
    for (cand, refr) in pairs {
        let c = tokenize(cand, tok);
        let r = tokenize(refr, tok);
        for (k, slot) in counts.iter_mut().enumerate() {
            let (h, t) = clipped(&c, &r, k + 1);
            slot.0 += h;
            slot.1 += t;
        }
        cl += c.len();
        rl += r.len();
    }
    bleu_from_counts(&counts, cl, rl)
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn rouge_n(candidate: &str, reference: &str, n: usize, tok: Tokenization) -> f64 {
    let c = tokenize(candidate, tok);
    let r = tokenize(reference, tok);
    let (hits, ct) = clipped(&c, &r, n);
    let rt = r.len().saturating_sub(n - 1);
    if ct == 0 || rt == 0 {
        return 0.0;
    }
    f1(hits as f64 / ct as f64, hits as f64 / rt as f64)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(candidate: &str, reference: &str, tok: Tokenization) -> f64 {
    let c = tokenize(candidate, tok);
    let r = tokenize(reference, tok);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs(&c, &r) as f64;
    f1(l / c.len() as f64, l / r.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub subject: u32,
    pub variant: String,
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
}

pub fn score(
    id: &str,
    subject: u32,
    variant: &str,
    candidate: &str,
    reference: &str,
    tok: Tokenization,
) -> MetricRow {
    MetricRow {
        id: id.into(),
        subject,
        variant: variant.into(),
        bleu1: bleu_n(candidate, reference, 1, tok),
        bleu4: bleu_n(candidate, reference, 4, tok),
        rouge1: rouge_n(candidate, reference, 1, tok),
        rouge2: rouge_n(candidate, reference, 2, tok),
        rouge_l: rouge_l(candidate, reference, tok),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKey {
    Subject,
    Variant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    /// `"all"` for the overall row.
    pub subject: String,
    pub variant: String,
    pub n: usize,
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
}

fn mean_row(subject: String, variant: String, rows: &[&MetricRow]) -> AggregateRow {
    let n = rows.len() as f64;
    let m = |f: fn(&MetricRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
    AggregateRow {
        subject,
        variant,
        n: rows.len(),
        bleu1: m(|r| r.bleu1),
        bleu4: m(|r| r.bleu4),
        rouge1: m(|r| r.rouge1),
        rouge2: m(|r| r.rouge2),
        rouge_l: m(|r| r.rouge_l),
    }
}

/// Arithmetic means per group, in key order, followed by one overall row.
pub fn aggregate(rows: &[MetricRow], keys: &[GroupKey]) -> Result<Vec<AggregateRow>> {
    if rows.is_empty() {
        return Err(Error::Empty("metric rows".into()));
    }
    let all = || "all".to_string();
    let mut out = Vec::new();
    if !keys.is_empty() {
        let mut groups: BTreeMap<(Option<u32>, Option<&str>), Vec<&MetricRow>> = BTreeMap::new();
        for r in rows {
            let s = keys.contains(&GroupKey::Subject).then_some(r.subject);
            let v = keys.contains(&GroupKey::Variant).then_some(r.variant.as_str());
            groups.entry((s, v)).or_default().push(r);
        }
        for ((s, v), g) in groups {
            let s = s.map_or_else(all, |s| s.to_string());
            let v = v.map_or_else(all, str::to_string);
            out.push(mean_row(s, v, &g));
        }
    }
    let every: Vec<&MetricRow> = rows.iter().collect();
    out.push(mean_row(all(), all(), &every));
    Ok(out)
}

pub fn write_csv<T: Serialize, W: Write>(rows: &[T], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r).map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    wr.flush().map_err(|e| Error::Data(format!("csv: {e}")))
}

pub fn read_metric_csv<R: std::io::Read>(r: R) -> Result<Vec<MetricRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Data(format!("csv: {e}")))
}
