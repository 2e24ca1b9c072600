//! Synthetic vocabulary embeddings and (embedding, target) datasets.
//!
//! Each sample embedding is `normalize(Σ active rows) + n`, where the noise
//! `n = σ · Σ_r g_r u_r` lives in a fixed, seeded `noise_rank`-dimensional
//! subspace with `g_r ~ N(0, 1)`. With `noise_rank == dim` this is plain
//! isotropic noise of per-coordinate deviation `σ`; a smaller rank gives
//! the structured corruption a trained refiner can learn to remove while
//! the raw cosine baseline cannot.

use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_ids, Sample};
use crate::error::{Error, Result};
use crate::numerics::{l2_norm, Matrix, Vector};
use crate::vocabulary::{
    write_corpus, write_embeddings, CaptionRecord, Split, TargetVector, VocabEmbeddings, Vocabulary,
};

/// Learning rate at which the refiner fits the default synthetic data
/// within 50 epochs; the trainer default of 1e-4 barely moves it.
pub const SYNTH_LR: f64 = 3e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub n_samples: usize,
    pub active_per_sample: usize,
    pub noise_sigma: f64,
    /// Rank of the noise subspace; `dim` means isotropic.
    pub noise_rank: usize,
    /// Probability of mixing one off-target row into a sample's signal.
    pub distractor_rate: f64,
    pub seed: u64,
    pub subjects: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            dim: 512,
            n_samples: 2000,
            active_per_sample: 5,
            noise_sigma: 1.0,
            noise_rank: 32,
            distractor_rate: 0.0,
            seed: 1,
            subjects: 6,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Usage(m));
        if self.vocab_size == 0 || self.dim == 0 || self.subjects == 0 {
            return bad("vocab_size, dim and subjects must be at least 1".into());
        }
        if self.active_per_sample > self.vocab_size {
            return bad(format!(
                "active_per_sample {} exceeds vocab_size {}",
                self.active_per_sample, self.vocab_size
            ));
        }
        if self.active_per_sample == 0 {
            return bad("active_per_sample must be at least 1".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be a finite value >= 0".into());
        }
        if self.noise_rank > self.dim {
            return bad(format!("noise_rank {} exceeds dim {}", self.noise_rank, self.dim));
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return bad("distractor_rate must lie in [0, 1]".into());
        }
        if self.distractor_rate > 0.0 && self.active_per_sample == self.vocab_size {
            return bad("distractors need at least one inactive token".into());
        }
        Ok(())
    }
}

// Independent ChaCha streams per concern, so changing one knob does not
// reshuffle the others.
const STREAM_VOCAB: u64 = 0;
const STREAM_NOISE_BASIS: u64 = 1;
const STREAM_SAMPLES: u64 = 2;
const STREAM_SPLITS: u64 = 3;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub fn token_name(i: usize) -> String {
    format!("tok{i:04}")
}

/// `V` unit rows drawn from an isotropic Gaussian, plus tokens
/// `tok0000, tok0001, ...`.
pub fn synth_vocab_embeddings(cfg: &SynthConfig) -> Result<(Vocabulary, VocabEmbeddings)> {
    cfg.validate()?;
    let mut r = rng(cfg.seed, STREAM_VOCAB);
    let mut data = Vec::with_capacity(cfg.vocab_size * cfg.dim);
    let mut row = vec![0.0f64; cfg.dim];
    for _ in 0..cfg.vocab_size {
        loop {
            row.iter_mut().for_each(|v| *v = r.sample(StandardNormal));
            let n = l2_norm(&row);
            // a zero draw is practically impossible but would break the floor
            if n > 1e-3 {
                data.extend(row.iter().map(|v| (v / n) as f32));
                break;
            }
        }
    }
    let vocab = Vocabulary::from_tokens((0..cfg.vocab_size).map(token_name).collect())?;
    let matrix = Matrix::new(cfg.vocab_size, cfg.dim, data)?;
    let emb = VocabEmbeddings::from_matrix(matrix, cfg.vocab_size, format!("synthetic:seed={}", cfg.seed))?;
    Ok((vocab, emb))
}

/// Orthonormal `rank × dim` basis via Gram-Schmidt on Gaussian draws.
fn noise_basis(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let mut r = rng(cfg.seed, STREAM_NOISE_BASIS);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cfg.noise_rank);
    while basis.len() < cfg.noise_rank {
        let mut v: Vec<f64> = (0..cfg.dim).map(|_| r.sample(StandardNormal)).collect();
        // two passes keep the basis orthogonal to working precision
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(b).for_each(|(a, b)| *a -= p * b);
            }
        }
        let n = l2_norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|a| *a /= n);
            basis.push(v);
        }
    }
    basis
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub vocab: Vocabulary,
    pub embeddings: VocabEmbeddings,
    pub samples: Vec<Sample>,
    /// Corpus view of the samples (captions are the active tokens).
    pub records: Vec<CaptionRecord>,
}

/// Samples drawn against `emb` (normally from [`synth_vocab_embeddings`]).
pub fn synth_dataset(cfg: &SynthConfig, vocab: &Vocabulary, emb: &VocabEmbeddings) -> Result<(Vec<Sample>, Vec<CaptionRecord>)> {
    cfg.validate()?;
    if emb.vocab_size() != cfg.vocab_size || emb.dim() != cfg.dim || vocab.size() != cfg.vocab_size {
        return Err(Error::dim(
            "synth_dataset",
            format!("{}x{}", cfg.vocab_size, cfg.dim),
            format!("{}x{}", emb.vocab_size(), emb.dim()),
        ));
    }
    let basis = noise_basis(cfg);
    let e = emb.matrix();
    let mut r = rng(cfg.seed, STREAM_SAMPLES);

    let n = cfg.n_samples;
    let n_train = (n as f64 * 0.8).round() as usize;
    let n_val = (n as f64 * 0.1).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng(cfg.seed, STREAM_SPLITS));
    let mut splits = vec![Split::Test; n];
    for (pos, &i) in order.iter().enumerate() {
        splits[i] = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let mut samples = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    let mut signal = vec![0.0f64; cfg.dim];
    for i in 0..n {
        let active = index::sample(&mut r, cfg.vocab_size, cfg.active_per_sample).into_vec();
        signal.fill(0.0);
        for &a in &active {
            signal.iter_mut().zip(e.row(a)).for_each(|(s, &v)| *s += v as f64);
        }
        if cfg.distractor_rate > 0.0 && r.random_bool(cfg.distractor_rate) {
            let d = loop {
                let d = r.random_range(0..cfg.vocab_size);
                if !active.contains(&d) {
                    break d;
                }
            };
            signal.iter_mut().zip(e.row(d)).for_each(|(s, &v)| *s += v as f64);
        }
        let norm = l2_norm(&signal);
        let mut x: Vec<f64> = signal.iter().map(|s| s / norm).collect();
        for u in &basis {
            let g: f64 = r.sample(StandardNormal);
            let g = g * cfg.noise_sigma;
            x.iter_mut().zip(u).for_each(|(xi, ui)| *xi += g * ui);
        }
        let confidence: f64 = r.random_range(0.5..1.0);

        let id = format!("syn{i:05}");
        let subject = (i as u32 % cfg.subjects) + 1;
        let tokens: Vec<String> = active.iter().map(|&a| vocab.token(a).to_string()).collect();
        records.push(CaptionRecord {
            id: id.clone(),
            subject,
            split: splits[i],
            caption: tokens.join(" "),
            object_label: tokens[0].clone(),
            object_confidence: Some(confidence),
            lemmas: Some(tokens),
        });
        samples.push(Sample {
            id,
            x: Vector::from_f64(&x),
            target: TargetVector::new(cfg.vocab_size, active)?,
            subject,
            split: splits[i],
        });
    }
    Ok((samples, records))
}

pub fn synthesize(cfg: &SynthConfig) -> Result<SynthDataset> {
    let (vocab, embeddings) = synth_vocab_embeddings(cfg)?;
    let (samples, records) = synth_dataset(cfg, &vocab, &embeddings)?;
    Ok(SynthDataset {
        config: cfg.clone(),
        vocab,
        embeddings,
        samples,
        records,
    })
}

/// File names written by [`SynthDataset::write`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthPaths {
    pub vocabulary: PathBuf,
    pub vocab_embeddings: PathBuf,
    pub corpus: PathBuf,
    pub sample_embeddings: PathBuf,
    pub sample_ids: PathBuf,
}

impl SynthPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            vocabulary: dir.join("vocab.json"),
            vocab_embeddings: dir.join("vocab_emb.bin"),
            corpus: dir.join("corpus.jsonl"),
            sample_embeddings: dir.join("sample_emb.bin"),
            sample_ids: dir.join("sample_ids.json"),
        }
    }
}

impl SynthDataset {
    /// Writes the same formats real-data ingestion reads.
    pub fn write(&self, dir: &Path) -> Result<SynthPaths> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = SynthPaths::in_dir(dir);
        self.vocab.save(&paths.vocabulary)?;
        write_embeddings(&paths.vocab_embeddings, self.embeddings.matrix())?;
        write_corpus(&paths.corpus, &self.records)?;
        let mut data = Vec::with_capacity(self.samples.len() * self.config.dim);
        for s in &self.samples {
            data.extend_from_slice(&s.x);
        }
        let m = Matrix::new(self.samples.len(), self.config.dim, data)?;
        write_embeddings(&paths.sample_embeddings, &m)?;
        let ids: Vec<String> = self.samples.iter().map(|s| s.id.clone()).collect();
        write_ids(&paths.sample_ids, &ids)?;
        Ok(paths)
    }
}
