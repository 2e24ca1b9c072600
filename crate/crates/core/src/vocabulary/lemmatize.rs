//! Fallback content-word extraction for captions that arrive without a
//! pre-computed lemma list.
//!
//! This is a suffix stripper, not a tagger: every alphabetic token of at
//! least three characters that is not a stopword counts as a content word.
//! It will not reproduce a dictionary lemmatizer exactly.

use std::collections::HashMap;
use std::sync::OnceLock;

const STOPWORDS: &[&str] = &[
    "about", "above", "after", "again", "against", "all", "also", "among", "and", "another",
    "any", "are", "around", "away", "because", "been", "before", "behind", "being", "below",
    "beneath", "beside", "besides", "between", "both", "but", "can", "could", "did", "does",
    "doing", "down", "during", "each", "either", "else", "etc", "even", "ever", "every", "few",
    "for", "from", "further", "had", "has", "have", "having", "her", "here", "hers", "herself",
    "him", "himself", "his", "how", "into", "its", "itself", "just", "like", "may", "might",
    "more", "most", "much", "must", "near", "neither", "nor", "not", "now", "off", "once",
    "one", "only", "onto", "other", "our", "ours", "out", "over", "own", "same", "several",
    "she", "should", "some", "such", "than", "that", "the", "their", "theirs", "them",
    "themselves", "then", "there", "these", "they", "this", "those", "three", "through",
    "too", "toward", "towards", "two", "under", "until", "upon", "very", "via", "was", "were",
    "what", "when", "where", "which", "while", "who", "whom", "whose", "why", "will", "with",
    "within", "without", "would", "yet", "you", "your", "yours",
];

/// Irregular or otherwise misfiring forms.
const EXCEPTIONS: &[(&str, &str)] = &[
    ("living", "living"),
    ("ceiling", "ceiling"),
    ("building", "building"),
    ("clothing", "clothing"),
    ("evening", "evening"),
    ("morning", "morning"),
    ("painting", "painting"),
    ("wedding", "wedding"),
    ("king", "king"),
    ("ring", "ring"),
    ("string", "string"),
    ("wing", "wing"),
    ("bed", "bed"),
    ("red", "red"),
    ("shed", "shed"),
    ("sled", "sled"),
    ("speed", "speed"),
    ("seed", "seed"),
    ("glass", "glass"),
    ("grass", "grass"),
    ("dress", "dress"),
    ("bus", "bus"),
    ("buses", "bus"),
    ("cactus", "cactus"),
    ("lotus", "lotus"),
    ("octopus", "octopus"),
    ("walrus", "walrus"),
    ("gas", "gas"),
    ("lens", "lens"),
    ("jeans", "jeans"),
    ("glasses", "glasses"),
    ("men", "man"),
    ("women", "woman"),
    ("children", "child"),
    ("people", "person"),
    ("feet", "foot"),
    ("teeth", "tooth"),
    ("mice", "mouse"),
    ("geese", "goose"),
    ("leaves", "leaf"),
    ("knives", "knife"),
    ("wolves", "wolf"),
    ("shelves", "shelf"),
    ("loaves", "loaf"),
    ("sitting", "sit"),
    ("lying", "lie"),
    ("sat", "sit"),
    ("held", "hold"),
    ("made", "make"),
    ("flying", "fly"),
    ("dying", "die"),
];

fn stopwords() -> &'static std::collections::HashSet<&'static str> {
    static SET: OnceLock<std::collections::HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| STOPWORDS.iter().copied().collect())
}

fn exceptions() -> &'static HashMap<&'static str, &'static str> {
    static MAP: OnceLock<HashMap<&'static str, &'static str>> = OnceLock::new();
    MAP.get_or_init(|| EXCEPTIONS.iter().copied().collect())
}

fn is_vowel(c: u8) -> bool {
    matches!(c, b'a' | b'e' | b'i' | b'o' | b'u')
}

/// Repairs a stem left after removing `-ing` / `-ed`.
fn restore_stem(stem: &str) -> String {
    let b = stem.as_bytes();
    let n = b.len();
    if n >= 2 && b[n - 1] == b[n - 2] && !is_vowel(b[n - 1]) && !matches!(b[n - 1], b'l' | b's' | b'z') {
        // running -> run, stopped -> stop
        return stem[..n - 1].to_string();
    }
    if matches!(b[n - 1], b'v' | b'c' | b'z' | b'g' | b'u') && !stem.ends_with("ng") {
        // carved -> carve, danced -> dance, glued -> glue
        return format!("{stem}e");
    }
    if n == 3 && !is_vowel(b[0]) && is_vowel(b[1]) && !is_vowel(b[2]) && !matches!(b[2], b'w' | b'x' | b'y') {
        // baked -> bake
        return format!("{stem}e");
    }
    stem.to_string()
}

/// Lowercased base form of one alphabetic token.
pub fn lemmatize_word(word: &str) -> String {
    let w = word.to_ascii_lowercase();
    if let Some(&lemma) = exceptions().get(w.as_str()) {
        return lemma.to_string();
    }
    let n = w.len();
    if n > 4 && w.ends_with("ies") {
        return format!("{}y", &w[..n - 3]);
    }
    if n > 4 && w.ends_with("es") {
        let stem = &w[..n - 2];
        if stem.ends_with("ss")
            || stem.ends_with("zz")
            || stem.ends_with('x')
            || stem.ends_with("ch")
            || stem.ends_with("sh")
        {
            return stem.to_string();
        }
        if stem.ends_with('s') || stem.ends_with('z') {
            // houses -> house, prizes -> prize
            return w[..n - 1].to_string();
        }
    }
    if n > 3 && w.ends_with('s') && !w.ends_with("ss") && !w.ends_with("us") && !w.ends_with("is") {
        return w[..n - 1].to_string();
    }
    if n > 5 && w.ends_with("ing") {
        return restore_stem(&w[..n - 3]);
    }
    if n > 4 && w.ends_with("ed") && !w.ends_with("eed") {
        return restore_stem(&w[..n - 2]);
    }
    w
}

/// Content-word lemmas of `text`, in order of appearance (duplicates kept).
pub fn content_lemmas(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_ascii_alphabetic())
        .filter(|t| t.len() >= 3)
        .map(str::to_ascii_lowercase)
        .filter(|t| !stopwords().contains(t.as_str()))
        .map(|t| lemmatize_word(&t))
        .filter(|t| t.len() >= 3 && !stopwords().contains(t.as_str()))
        .collect()
}
