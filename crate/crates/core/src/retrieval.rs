//! Zero-shot baseline scoring, top-k Bag-of-Words selection and retrieval
//! quality metrics.
//!
//! The baseline and the refiner both score through [`CosineKernel`], so any
//! difference between them comes from the refiner alone.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{CosineKernel, Matrix, Real, Vector};
use crate::vocabulary::{TargetVector, Vocabulary};

pub const DEFAULT_TOP_K: usize = 15;

/// Cosine similarity of a raw embedding against every vocabulary row.
pub fn naive_logits(x: &[f32], kernel: &CosineKernel<f32>) -> Result<Vector<f32>> {
    kernel.logits_one(x).map_err(|e| match e {
        Error::Degenerate { row, norm, .. } => Error::Degenerate {
            what: "raw embedding x",
            row,
            norm,
        },
        other => other,
    })
}

/// Batched form of [`naive_logits`], `B × V`.
pub fn naive_logits_batch(x: &Matrix<f32>, kernel: &CosineKernel<f32>) -> Result<Matrix<f32>> {
    kernel.logits(x).map(|o| o.logits).map_err(|e| match e {
        Error::Degenerate { row, norm, .. } => Error::Degenerate {
            what: "raw embedding x",
            row,
            norm,
        },
        other => other,
    })
}

/// Descending score, then ascending index.
fn rank_order<T: Real>(logits: &[T], a: usize, b: usize) -> Ordering {
    logits[b]
        .to_f64()
        .partial_cmp(&logits[a].to_f64())
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// Indices of the `k` highest logits. The flag is set when `k` exceeded the
/// vocabulary size and was clamped.
pub fn top_k_indices<T: Real>(logits: &[T], k: usize) -> (Vec<usize>, bool) {
    let clamped = k > logits.len();
    let k = k.min(logits.len());
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(logits, a, b));
        idx.truncate(k);
    }
    idx.sort_by(|&a, &b| rank_order(logits, a, b));
    idx.truncate(k);
    (idx, clamped)
}

/// 1-based position of `j` in the ranking used by [`top_k_indices`].
pub fn rank_of<T: Real>(logits: &[T], j: usize) -> usize {
    1 + (0..logits.len())
        .filter(|&i| rank_order(logits, i, j) == Ordering::Less)
        .count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BowEntry {
    pub token: String,
    pub score: f64,
}

/// Ranked `(token, score)` pairs; serializes as a bare JSON array.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<BowEntry>", into = "Vec<BowEntry>")]
pub struct BagOfWords {
    entries: Vec<BowEntry>,
}

impl BagOfWords {
    /// Validates ordering, uniqueness and score range.
    pub fn new(entries: Vec<BowEntry>) -> Result<Self> {
        for e in &entries {
            if !(-1.0..=1.0).contains(&e.score) {
                return Err(Error::Data(format!(
                    "bag-of-words score {} for {:?} outside [-1, 1]",
                    e.score, e.token
                )));
            }
        }
        for w in entries.windows(2) {
            if w[1].score > w[0].score {
                return Err(Error::Data(format!(
                    "bag-of-words not sorted: {:?} ({}) after {:?} ({})",
                    w[1].token, w[1].score, w[0].token, w[0].score
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.token.as_str()) {
                return Err(Error::Data(format!("duplicate bag-of-words token {:?}", e.token)));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[BowEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.token.as_str())
    }
}

impl TryFrom<Vec<BowEntry>> for BagOfWords {
    type Error = Error;
    fn try_from(v: Vec<BowEntry>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<BagOfWords> for Vec<BowEntry> {
    fn from(b: BagOfWords) -> Self {
        b.entries
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopK {
    pub bow: BagOfWords,
    pub indices: Vec<usize>,
    /// `k` was larger than the vocabulary.
    pub clamped: bool,
}

pub fn top_k_bow<T: Real>(logits: &[T], vocab: &Vocabulary, k: usize) -> Result<TopK> {
    if k == 0 {
        return Err(Error::Usage("top-k must be at least 1".into()));
    }
    if logits.len() != vocab.size() {
        return Err(Error::dim("top_k_bow", vocab.size(), logits.len()));
    }
    let (indices, clamped) = top_k_indices(logits, k);
    let entries = indices
        .iter()
        .map(|&i| BowEntry {
            token: vocab.token(i).to_string(),
            score: logits[i].to_f64().clamp(-1.0, 1.0),
        })
        .collect();
    Ok(TopK {
        bow: BagOfWords::new(entries)?,
        indices,
        clamped,
    })
}

/// `(precision@k, recall@k)`, or `None` when the target has no positives
/// (such samples are left out of aggregates).
pub fn retrieval_metrics(retrieved: &[usize], target: &TargetVector, k: usize) -> Option<(f64, f64)> {
    assert!(k >= 1 && retrieved.len() <= k);
    if target.active_count() == 0 {
        return None;
    }
    let hits = retrieved.iter().filter(|&&i| target.is_set(i)).count() as f64;
    Some((hits / k as f64, hits / target.active_count() as f64))
}

/// Mean retrieval quality over a group of samples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSummary {
    /// Samples with at least one positive.
    pub samples: usize,
    pub precision_at_k: f64,
    pub recall_at_k: f64,
    /// Mean over samples of the mean 1-based rank of their positives.
    pub mean_rank: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub k: usize,
    pub overall: RetrievalSummary,
    pub by_subject: BTreeMap<u32, RetrievalSummary>,
}

#[derive(Default)]
struct Acc {
    n: usize,
    p: f64,
    r: f64,
    rank: f64,
}

impl Acc {
    fn finish(&self) -> RetrievalSummary {
        let n = self.n.max(1) as f64;
        RetrievalSummary {
            samples: self.n,
            precision_at_k: self.p / n,
            recall_at_k: self.r / n,
            mean_rank: self.rank / n,
        }
    }
}

/// Scores one logit row per sample and groups the results by subject.
pub fn summarize<'a, T: Real>(
    rows: impl IntoIterator<Item = (&'a [T], &'a TargetVector, u32)>,
    k: usize,
) -> RetrievalReport {
    let mut overall = Acc::default();
    let mut groups: BTreeMap<u32, Acc> = BTreeMap::new();
    for (logits, target, subject) in rows {
        let (top, _) = top_k_indices(logits, k);
        let Some((p, r)) = retrieval_metrics(&top, target, k) else {
            continue;
        };
        let rank = target.active().iter().map(|&j| rank_of(logits, j) as f64).sum::<f64>()
            / target.active_count() as f64;
        for acc in [&mut overall, groups.entry(subject).or_default()] {
            acc.n += 1;
            acc.p += p;
            acc.r += r;
            acc.rank += rank;
        }
    }
    RetrievalReport {
        k,
        overall: overall.finish(),
        by_subject: groups.into_iter().map(|(s, a)| (s, a.finish())).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab(n: usize) -> Vocabulary {
        Vocabulary::from_tokens((0..n).map(|i| format!("w{i}")).collect()).unwrap()
    }

    #[test]
    fn naive_logits_self_and_orthogonal() {
        let e = Matrix::new(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        let k = CosineKernel::new(&e).unwrap();
        let l = naive_logits(&[0.0, 1.0, 0.0], &k).unwrap();
        assert_eq!(l.to_f64_vec(), vec![0.0, 1.0, 0.0]);

        let e = Matrix::new(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let k = CosineKernel::new(&e).unwrap();
        assert_eq!(naive_logits(&[0.0, 0.0, 3.0], &k).unwrap().to_f64_vec(), vec![0.0, 0.0]);
        assert!(matches!(
            naive_logits(&[0.0, 0.0, 0.0], &k),
            Err(Error::Degenerate { what: "raw embedding x", .. })
        ));
    }

    #[test]
    fn naive_logits_scalar_oracle() {
        let rows = [[1.0f32, 2.0, 2.0], [0.0, -3.0, 4.0], [1.0, 1.0, 0.0]];
        let x = [2.0f32, 0.0, 1.0];
        let e = Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        let got = naive_logits(&x, &CosineKernel::new(&e).unwrap()).unwrap();
        let nx = 5f64.sqrt();
        let expect = [4.0 / (3.0 * nx), 4.0 / (5.0 * nx), 2.0 / (2f64.sqrt() * nx)];
        for (g, e) in got.iter().zip(expect) {
            assert!((*g as f64 - e).abs() < 1e-6);
        }
    }

    #[test]
    fn top_k_hand_cases() {
        let v = vocab(4);
        let t = top_k_bow(&[0.9f32, 0.1, 0.8, 0.9], &v, 2).unwrap();
        assert_eq!(t.indices, vec![0, 3]);

        let t = top_k_bow(&[0.0f32, 0.0, 1.0, 0.0], &v, 1).unwrap();
        assert_eq!(t.bow.tokens().collect::<Vec<_>>(), vec!["w2"]);

        let t = top_k_bow(&[0.5f32; 4], &v, 3).unwrap();
        assert_eq!(t.indices, vec![0, 1, 2]);
        assert!(!t.clamped);

        let t = top_k_bow(&[0.5f32, 0.2, 0.1, 0.3], &v, 15).unwrap();
        assert!(t.clamped);
        assert_eq!(t.indices, vec![0, 3, 1, 2]);

        assert!(matches!(top_k_bow(&[0.5f32; 4], &v, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn bow_json_shape() {
        let v = vocab(3);
        let t = top_k_bow(&[0.25f32, 0.75, -0.5], &v, 2).unwrap();
        let json = serde_json::to_string(&t.bow).unwrap();
        assert_eq!(json, r#"[{"token":"w1","score":0.75},{"token":"w0","score":0.25}]"#);
        let back: BagOfWords = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t.bow);
        assert!(serde_json::from_str::<BagOfWords>(r#"[{"token":"a","score":0.1},{"token":"b","score":0.2}]"#).is_err());
        assert!(serde_json::from_str::<BagOfWords>(r#"[{"token":"a","score":1.5}]"#).is_err());
    }

    #[test]
    fn metric_arithmetic() {
        let t = TargetVector::new(100, vec![1, 2, 3, 4, 5]).unwrap();
        let all: Vec<usize> = (1..16).collect();
        assert_eq!(retrieval_metrics(&all, &t, 15), Some((5.0 / 15.0, 1.0)));
        let some: Vec<usize> = vec![1, 2, 3, 50, 51, 52, 53, 54, 55, 56, 57, 58, 59, 60, 61];
        let (p, r) = retrieval_metrics(&some, &t, 15).unwrap();
        assert!((p - 0.2).abs() < 1e-15 && (r - 0.6).abs() < 1e-15);
        assert_eq!(retrieval_metrics(&[70, 71], &t, 15), Some((0.0, 0.0)));
        assert_eq!(retrieval_metrics(&[1], &TargetVector::new(100, vec![]).unwrap(), 15), None);
    }

    #[test]
    fn perfect_logits_give_full_recall() {
        let t = TargetVector::new(40, vec![3, 9, 27]).unwrap();
        let logits: Vec<f32> = t.bits().iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
        let rep = summarize([(logits.as_slice(), &t, 0)], 15);
        assert_eq!(rep.overall.recall_at_k, 1.0);
        assert_eq!(rep.overall.mean_rank, 2.0);
    }

    #[test]
    fn summary_groups_by_subject() {
        let t = TargetVector::new(4, vec![0]).unwrap();
        let empty = TargetVector::new(4, vec![]).unwrap();
        let good = [1.0f32, 0.0, 0.0, 0.0];
        let bad = [0.0f32, 1.0, 1.0, 1.0];
        let rep = summarize(
            [(&good[..], &t, 2), (&bad[..], &t, 7), (&bad[..], &empty, 7)],
            1,
        );
        assert_eq!(rep.overall.samples, 2);
        assert_eq!(rep.overall.recall_at_k, 0.5);
        assert_eq!(rep.by_subject[&2].recall_at_k, 1.0);
        assert_eq!(rep.by_subject[&7].recall_at_k, 0.0);
        assert_eq!(rep.by_subject[&7].mean_rank, 4.0);
    }

    proptest! {
        #[test]
        fn tied_scores_are_permutation_stable(
            levels in proptest::collection::vec(0u8..4, 1..60),
            k in 1usize..20,
            seed in any::<u64>(),
        ) {
            // few distinct levels force many ties
            let logits: Vec<f32> = levels.iter().map(|&l| l as f32 * 0.25).collect();
            let (base, _) = top_k_indices(&logits, k);
            // shuffle positions, then map back through the permutation
            use rand::{seq::SliceRandom, SeedableRng};
            let mut perm: Vec<usize> = (0..logits.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled: Vec<f32> = perm.iter().map(|&i| logits[i]).collect();
            let (top, _) = top_k_indices(&shuffled, k);
            let scores = |ix: &[usize], l: &[f32]| ix.iter().map(|&i| l[i]).collect::<Vec<_>>();
            prop_assert_eq!(scores(&top, &shuffled), scores(&base, &logits));
            // ties resolve by ascending index in the presented order
            for w in top.windows(2) {
                prop_assert!(shuffled[w[0]] > shuffled[w[1]] || (shuffled[w[0]] == shuffled[w[1]] && w[0] < w[1]));
            }
            // and the selection equals a full stable sort
            let mut full: Vec<usize> = (0..shuffled.len()).collect();
            full.sort_by(|&a, &b| shuffled[b].partial_cmp(&shuffled[a]).unwrap());
            full.truncate(k.min(shuffled.len()));
            prop_assert_eq!(top, full);
        }

        #[test]
        fn bow_scores_non_increasing(logits in proptest::collection::vec(-1.0f32..=1.0, 1..80), k in 1usize..20) {
            let v = vocab(logits.len());
            let t = top_k_bow(&logits, &v, k).unwrap();
            prop_assert_eq!(t.bow.len(), k.min(logits.len()));
            for w in t.bow.entries().windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
        }
    }
}
