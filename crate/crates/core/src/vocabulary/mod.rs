//! Concept vocabulary, N-hot targets and the frozen vocabulary embedding
//! matrix.

mod embfile;
pub mod lemmatize;

pub use embfile::{
    decode_embeddings, encode_embeddings, read_embeddings, write_embeddings, EMBED_DIM, EMB_MAGIC,
};

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_norm, CosineKernel, Matrix, NORM_FLOOR};

/// Dataset partition of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Usage(format!("unknown split {other:?}"))),
        }
    }
}

/// One line of the caption corpus (JSON-lines).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub subject: u32,
    pub split: Split,
    pub caption: String,
    pub object_label: String,
    /// Stage-1 confidence for `object_label`; absent in corpora that only
    /// carry the label, in which case prompting treats it as 1.0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_confidence: Option<f64>,
    /// Pre-lemmatized content words. When present these are used verbatim
    /// instead of the built-in fallback lemmatizer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lemmas: Option<Vec<String>>,
}

impl CaptionRecord {
    pub fn content_lemmas(&self) -> Vec<String> {
        match &self.lemmas {
            Some(lemmas) => lemmas
                .iter()
                .map(|l| l.trim().to_lowercase())
                .filter(|l| !l.is_empty())
                .collect(),
            None => lemmatize::content_lemmas(&self.caption),
        }
    }
}

pub fn read_corpus(path: &Path) -> Result<Vec<CaptionRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaptionRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        if let Some(c) = rec.object_confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Data(format!(
                    "{}:{}: object_confidence {c} outside [0, 1]",
                    path.display(),
                    lineno + 1
                )));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, records: &[CaptionRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Ordered, duplicate-free token list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Empty("vocabulary".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Reads a JSON array of token strings.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.tokens)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Deduplicated content lemmas of the training-split captions, sorted
/// lexicographically. Validation and test captions are never consulted.
pub fn build_vocabulary(records: &[CaptionRecord]) -> Result<Vocabulary> {
    let mut seen_train = false;
    let mut set = BTreeSet::new();
    for rec in records.iter().filter(|r| r.split == Split::Train) {
        seen_train = true;
        set.extend(rec.content_lemmas());
    }
    if !seen_train {
        return Err(Error::Usage("no training-split captions to build a vocabulary from".into()));
    }
    if set.is_empty() {
        return Err(Error::Empty("vocabulary (training captions contain no content words)".into()));
    }
    Vocabulary::from_tokens(set.into_iter().collect())
}

/// N-hot supervision vector, stored as its sorted set of active positions.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TargetVector {
    dim: usize,
    active: Vec<usize>,
}

impl TargetVector {
    pub fn new(dim: usize, mut active: Vec<usize>) -> Result<Self> {
        active.sort_unstable();
        active.dedup();
        if let Some(&bad) = active.iter().find(|&&i| i >= dim) {
            return Err(Error::dim("TargetVector::new", format!("index < {dim}"), bad));
        }
        Ok(Self { dim, active })
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        Self {
            dim: bits.len(),
            active: bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    pub fn is_set(&self, j: usize) -> bool {
        self.active.binary_search(&j).is_ok()
    }

    pub fn bits(&self) -> Vec<bool> {
        let mut bits = vec![false; self.dim];
        for &i in &self.active {
            bits[i] = true;
        }
        bits
    }
}

/// Result of encoding one caption against the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetEncoding {
    pub target: TargetVector,
    /// The caption had no content words at all.
    pub no_content_words: bool,
    /// Content lemmas that are not in the vocabulary (ignored).
    pub out_of_vocabulary: usize,
}

pub fn encode_lemmas(lemmas: &[String], vocab: &Vocabulary) -> TargetEncoding {
    let mut active = Vec::new();
    let mut oov = 0;
    for l in lemmas {
        match vocab.index_of(l) {
            Some(i) => active.push(i),
            None => oov += 1,
        }
    }
    TargetEncoding {
        target: TargetVector::new(vocab.size(), active).expect("indices come from the vocabulary"),
        no_content_words: lemmas.is_empty(),
        out_of_vocabulary: oov,
    }
}

/// Encodes free text with the fallback lemmatizer.
pub fn encode_targets(caption: &str, vocab: &Vocabulary) -> TargetEncoding {
    encode_lemmas(&lemmatize::content_lemmas(caption), vocab)
}

pub fn encode_record(rec: &CaptionRecord, vocab: &Vocabulary) -> TargetEncoding {
    encode_lemmas(&rec.content_lemmas(), vocab)
}

/// Frozen `V × D` vocabulary embedding matrix.
#[derive(Clone, Debug)]
pub struct VocabEmbeddings {
    matrix: Matrix<f32>,
    pub source_tag: String,
}

impl VocabEmbeddings {
    /// Validates row count and per-row norm.
    pub fn from_matrix(matrix: Matrix<f32>, vocab_size: usize, source_tag: impl Into<String>) -> Result<Self> {
        if matrix.rows() != vocab_size {
            return Err(Error::RowCount {
                expected: vocab_size,
                found: matrix.rows(),
            });
        }
        for r in 0..matrix.rows() {
            let norm = l2_norm(matrix.row(r));
            if !(norm >= NORM_FLOOR) {
                return Err(Error::Degenerate {
                    what: "vocabulary row",
                    row: r,
                    norm,
                });
            }
        }
        Ok(Self {
            matrix,
            source_tag: source_tag.into(),
        })
    }

    pub fn matrix(&self) -> &Matrix<f32> {
        &self.matrix
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn kernel(&self) -> CosineKernel<f32> {
        CosineKernel::new(&self.matrix).expect("rows validated at construction")
    }
}

/// Loads a 512-wide `SENSEEMB1` file whose rows align with `vocab`.
pub fn load_vocab_embeddings(path: &Path, vocab: &Vocabulary) -> Result<VocabEmbeddings> {
    load_vocab_embeddings_with_dim(path, vocab, EMBED_DIM)
}

pub fn load_vocab_embeddings_with_dim(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
) -> Result<VocabEmbeddings> {
    let matrix = read_embeddings(path, Some(dim))?;
    VocabEmbeddings::from_matrix(matrix, vocab.size(), path.display().to_string())
}
