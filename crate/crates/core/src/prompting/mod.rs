//! Zero-shot caption prompts, the outbound privacy guard and the
//! chat-completion client.

mod client;
pub mod mock;
mod privacy;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use client::{
    count_words, generate_all, generate_caption, CaptionJob, ChatMessage, ChatRequest,
    GeneratedCaption, LLMConfig,
    DEFAULT_CONCURRENCY, DEFAULT_TEMPERATURE, LENGTH_RANGE,
};
pub use privacy::{assert_privacy, PrivacyReport, PrivacyViolation, MAX_FLOAT_LITERALS};

use crate::error::{Error, Result};
use crate::retrieval::BagOfWords;

pub const MAX_BOW_LEN: usize = 15;

const WITH_OBJ_HEAD: &str = "\
You are given an object label and a noisy bag-of-words (BoW). Both object label and BoW will be accompanied with numbers, the numbers with object labels are the softmax probabilities of correctly guessing the object label, and the BoW are cosine similarities of the words to our embedding.

Your goal is to regenerate the most likely original image caption.

Instructions:
- Use the object label as a possible anchor.
- Use the similarity scores to infer which words are relevant.
- Ignore or remove garbage, irrelevant, contradictory, or low-signal words.
- Use only a small, coherent subset of the BoW plus the object label.
- Do NOT invent new objects not supported by the label or high-similarity words.

Output:
Return ONLY one natural-language caption (8\u{2013}20 words). No explanations, no lists, no formatting.

Input:
Object label: ";

const WITHOUT_OBJ_HEAD: &str = "\
You are given a noisy bag-of-words (BoW). BoW will be accompanied with numbers, the numbers with BoW are cosine similarities of the words to our embedding.

Your goal is to regenerate the most likely original image caption.

Instructions:
- Use the similarity scores to infer which words are relevant.
- Ignore or remove garbage, irrelevant, contradictory, or low-signal words.
- Use only a small, coherent subset of the BoW.
- Do NOT invent new objects not supported by the high-similarity words.

Output:
Return ONLY one natural-language caption (8\u{2013}20 words). No explanations, no lists, no formatting.

Input:
";

const BOW_HEADER: &str = "BoW tokens with scores:\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    WithObj,
    WithoutObj,
}

impl PromptVariant {
    pub fn name(self) -> &'static str {
        match self {
            PromptVariant::WithObj => "with_obj",
            PromptVariant::WithoutObj => "without_obj",
        }
    }
}

impl std::str::FromStr for PromptVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "with_obj" => Ok(PromptVariant::WithObj),
            "without_obj" => Ok(PromptVariant::WithoutObj),
            _ => Err(Error::Usage(format!(
                "unknown prompt variant {s:?} (expected with_obj or without_obj)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptInput {
    pub object_label: String,
    pub object_confidence: f64,
    pub bow: BagOfWords,
}

impl PromptInput {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.object_confidence) {
            return Err(Error::Data(format!(
                "object confidence {} outside [0, 1]",
                self.object_confidence
            )));
        }
        check_bow(&self.bow)
    }
}

fn check_bow(bow: &BagOfWords) -> Result<()> {
    if bow.len() > MAX_BOW_LEN {
        return Err(Error::Data(format!(
            "bag of words has {} entries (at most {MAX_BOW_LEN})",
            bow.len()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub variant: PromptVariant,
    pub text: String,
    /// Set when the token block is empty; the prompt is still usable.
    pub empty_bow: bool,
}

/// Fixed four-decimal rendering; negative zero prints as zero.
pub fn fmt4(v: f64) -> String {
    let s = format!("{v:.4}");
    if s == "-0.0000" {
        "0.0000".into()
    } else {
        s
    }
}

/// One `token (0.xxxx)` line per entry, no trailing newline.
pub fn words_str(bow: &BagOfWords) -> String {
    let mut out = String::new();
    for (i, e) in bow.entries().iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = write!(out, "{} ({})", e.token, fmt4(e.score));
    }
    out
}

pub fn render_prompt_with_obj(input: &PromptInput) -> Result<RenderedPrompt> {
    input.validate()?;
    let mut text = String::from(WITH_OBJ_HEAD);
    let _ = write!(
        text,
        "{} (prob: {})\n\n{BOW_HEADER}{}",
        input.object_label,
        fmt4(input.object_confidence),
        words_str(&input.bow)
    );
    Ok(RenderedPrompt {
        variant: PromptVariant::WithObj,
        text,
        empty_bow: input.bow.is_empty(),
    })
}

pub fn render_prompt_without_obj(bow: &BagOfWords) -> Result<RenderedPrompt> {
    check_bow(bow)?;
    let text = format!("{WITHOUT_OBJ_HEAD}{BOW_HEADER}{}", words_str(bow));
    Ok(RenderedPrompt {
        variant: PromptVariant::WithoutObj,
        text,
        empty_bow: bow.is_empty(),
    })
}

pub fn render(variant: PromptVariant, input: &PromptInput) -> Result<RenderedPrompt> {
    match variant {
        PromptVariant::WithObj => render_prompt_with_obj(input),
        PromptVariant::WithoutObj => render_prompt_without_obj(&input.bow),
    }
}

/// One persisted prompt/caption pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionLine {
    pub id: String,
    pub prompt_variant: PromptVariant,
    pub prompt: String,
    pub caption: Option<String>,
    pub word_count: Option<usize>,
    pub model: Option<String>,
}
