//! Joins the caption corpus with a per-sample embedding file.
//!
//! Sample embeddings are stored as a SENSEEMB1 matrix plus a sidecar JSON
//! array of sample ids in row order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};
use crate::vocabulary::{encode_record, CaptionRecord, Split, TargetVector, Vocabulary};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub x: Vector<f32>,
    pub target: TargetVector,
    pub subject: u32,
    pub split: Split,
}

/// Counts reported alongside a join.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize)]
pub struct JoinStats {
    pub samples: usize,
    pub no_content_words: usize,
    pub empty_targets: usize,
    pub out_of_vocabulary_lemmas: usize,
}

pub fn read_ids(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn write_ids(path: &Path, ids: &[String]) -> Result<()> {
    let text = serde_json::to_string(ids)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One [`Sample`] per corpus record, in corpus order. Every record must
/// have exactly one embedding row.
pub fn join(
    records: &[CaptionRecord],
    embeddings: &Matrix<f32>,
    ids: &[String],
    vocab: &Vocabulary,
) -> Result<(Vec<Sample>, JoinStats)> {
    if ids.len() != embeddings.rows() {
        return Err(Error::RowCount {
            expected: ids.len(),
            found: embeddings.rows(),
        });
    }
    let mut row_of = HashMap::with_capacity(ids.len());
    for (row, id) in ids.iter().enumerate() {
        if row_of.insert(id.as_str(), row).is_some() {
            return Err(Error::Data(format!("duplicate embedding id {id:?}")));
        }
    }
    let mut stats = JoinStats::default();
    let mut seen = std::collections::HashSet::new();
    let mut samples = Vec::with_capacity(records.len());
    for rec in records {
        if !seen.insert(rec.id.as_str()) {
            return Err(Error::Data(format!("duplicate corpus id {:?}", rec.id)));
        }
        let row = *row_of
            .get(rec.id.as_str())
            .ok_or_else(|| Error::Data(format!("no embedding for sample {:?}", rec.id)))?;
        let enc = encode_record(rec, vocab);
        stats.no_content_words += enc.no_content_words as usize;
        stats.empty_targets += (enc.target.active_count() == 0) as usize;
        stats.out_of_vocabulary_lemmas += enc.out_of_vocabulary;
        samples.push(Sample {
            id: rec.id.clone(),
            x: Vector::new(embeddings.row(row).to_vec()),
            target: enc.target,
            subject: rec.subject,
            split: rec.split,
        });
    }
    stats.samples = samples.len();
    Ok((samples, stats))
}

pub fn split_of(samples: &[Sample], split: Split) -> Vec<&Sample> {
    samples.iter().filter(|s| s.split == split).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, split: Split, caption: &str) -> CaptionRecord {
        CaptionRecord {
            id: id.into(),
            subject: 1,
            split,
            caption: caption.into(),
            object_label: "x".into(),
            object_confidence: None,
            lemmas: None,
        }
    }

    #[test]
    fn joins_by_id_not_row_order() {
        let vocab = Vocabulary::from_tokens(vec!["cat".into(), "dog".into()]).unwrap();
        let recs = [rec("a", Split::Train, "dog"), rec("b", Split::Test, "cat cat")];
        let emb = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ids = vec!["b".to_string(), "a".to_string()];
        let (s, stats) = join(&recs, &emb, &ids, &vocab).unwrap();
        assert_eq!(s[0].x.to_vec(), vec![3.0, 4.0]);
        assert_eq!(s[0].target.active(), &[1]);
        assert_eq!(s[1].target.active(), &[0]);
        assert_eq!(stats.samples, 2);
        assert_eq!(split_of(&s, Split::Test).len(), 1);
    }

    #[test]
    fn join_errors() {
        let vocab = Vocabulary::from_tokens(vec!["cat".into()]).unwrap();
        let emb = Matrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        let recs = [rec("a", Split::Train, "cat")];
        assert!(matches!(
            join(&recs, &emb, &["a".into(), "b".into()], &vocab),
            Err(Error::RowCount { .. })
        ));
        assert!(matches!(join(&recs, &emb, &["z".into()], &vocab), Err(Error::Data(_))));
        let dup = [rec("a", Split::Train, "cat"), rec("a", Split::Val, "cat")];
        assert!(matches!(join(&dup, &emb, &["a".into()], &vocab), Err(Error::Data(_))));
    }
}
