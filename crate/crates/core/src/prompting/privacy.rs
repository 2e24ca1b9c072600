use std::collections::HashSet;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde_json::Value;

use super::fmt4;

/// Fifteen bag-of-words scores plus one object confidence.
pub const MAX_FLOAT_LITERALS: usize = 16;

const WINDOW: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrivacyReport {
    pub float_literals: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrivacyViolation {
    pub field: &'static str,
    pub detail: String,
}

impl fmt::Display for PrivacyViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.detail)
    }
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?").unwrap())
}

fn is_float_literal(s: &str) -> bool {
    s.contains(['.', 'e', 'E'])
}

/// Numeric literals in document order, skipping the top-level
/// `temperature` field. Numbers inside strings are included.
fn literals(v: &Value, top: bool, out: &mut Vec<String>) {
    match v {
        Value::Number(n) => out.push(n.to_string()),
        Value::String(s) => out.extend(number_re().find_iter(s).map(|m| m.as_str().to_string())),
        Value::Array(a) => a.iter().for_each(|x| literals(x, false, out)),
        Value::Object(o) => {
            for (k, x) in o {
                if !(top && k == "temperature") {
                    literals(x, false, out);
                }
            }
        }
        _ => {}
    }
}

fn triples(coords: &[f32]) -> HashSet<[String; WINDOW]> {
    coords
        .windows(WINDOW)
        .map(|w| std::array::from_fn(|i| fmt4(w[i] as f64)))
        .collect()
}

/// Checks an outbound payload against the sample it was built from: no
/// three consecutive coordinates of `x` or `z` (at four decimals) may
/// appear as consecutive numbers, and at most [`MAX_FLOAT_LITERALS`]
/// floats may be present.
pub fn assert_privacy(
    payload: &[u8],
    x: &[f32],
    z: Option<&[f32]>,
) -> Result<PrivacyReport, PrivacyViolation> {
    let mut lits = Vec::new();
    match serde_json::from_slice::<Value>(payload) {
        Ok(v) => literals(&v, true, &mut lits),
        Err(_) => {
            let text = String::from_utf8_lossy(payload);
            lits.extend(number_re().find_iter(&text).map(|m| m.as_str().to_string()));
        }
    }
    let rendered: Vec<String> = lits
        .iter()
        .map(|s| s.parse::<f64>().map(fmt4).unwrap_or_else(|_| s.clone()))
        .collect();
    let mut sources = vec![("raw embedding x", x)];
    if let Some(z) = z {
        sources.push(("latent z", z));
    }
    for (field, coords) in sources {
        let set = triples(coords);
        for (i, w) in rendered.windows(WINDOW).enumerate() {
            let key: [String; WINDOW] = std::array::from_fn(|k| w[k].clone());
            if set.contains(&key) {
                return Err(PrivacyViolation {
                    field,
                    detail: format!(
                        "payload numbers {}..{} match {WINDOW} consecutive coordinates",
                        i,
                        i + WINDOW
                    ),
                });
            }
        }
    }
    let float_literals = lits.iter().filter(|s| is_float_literal(s)).count();
    if float_literals > MAX_FLOAT_LITERALS {
        return Err(PrivacyViolation {
            field: "float literals",
            detail: format!("{float_literals} floating-point literals (at most {MAX_FLOAT_LITERALS})"),
        });
    }
    Ok(PrivacyReport { float_literals })
}
