use std::fs;
use std::path::PathBuf;

use sense::prompting::{
    assert_privacy, render_prompt_with_obj, render_prompt_without_obj, ChatRequest, LLMConfig,
    PromptInput,
};
use sense::retrieval::{BagOfWords, BowEntry};

fn golden(name: &str) -> String {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    fs::read_to_string(p).unwrap()
}

fn fixture_a() -> PromptInput {
    let bow = BagOfWords::new(vec![
        BowEntry { token: "piano".into(), score: 0.8121 },
        BowEntry { token: "black".into(), score: 0.7040 },
    ])
    .unwrap();
    PromptInput {
        object_label: "piano".into(),
        object_confidence: 0.9132,
        bow,
    }
}

fn fixture_b() -> BagOfWords {
    serde_json::from_str(&golden("bow_dog.json")).unwrap()
}

#[test]
fn with_obj_matches_golden_a() {
    let text = render_prompt_with_obj(&fixture_a()).unwrap().text;
    assert_eq!(text, golden("with_obj_piano.txt"));
    assert!(text.contains("Object label: piano (prob: 0.9132)"));
}

#[test]
fn without_obj_matches_golden_b() {
    let text = render_prompt_without_obj(&fixture_b()).unwrap().text;
    assert_eq!(text, golden("without_obj_dog.txt"));
    assert!(!text.contains("Object label"));
}

#[test]
fn rendering_is_repeatable() {
    let a = render_prompt_without_obj(&fixture_b()).unwrap();
    let b = render_prompt_without_obj(&fixture_b()).unwrap();
    assert_eq!(a.text.as_bytes(), b.text.as_bytes());
}

#[test]
fn golden_requests_pass_privacy() {
    let cfg = LLMConfig::default();
    let x: Vec<f32> = (0..512).map(|i| ((i * 37 % 101) as f32 - 50.0) / 97.0).collect();
    let a = serde_json::to_vec(&ChatRequest::new(&golden("with_obj_piano.txt"), &cfg)).unwrap();
    assert_eq!(assert_privacy(&a, &x, None).unwrap().float_literals, 3);
    let b = serde_json::to_vec(&ChatRequest::new(&golden("without_obj_dog.txt"), &cfg)).unwrap();
    assert_eq!(assert_privacy(&b, &x, None).unwrap().float_literals, 15);
}

#[test]
fn appended_latent_is_caught() {
    let cfg = LLMConfig::default();
    let z: Vec<f32> = (0..512).map(|i| (i as f32 * 0.013).sin()).collect();
    let leak: Vec<String> = z[100..103].iter().map(|v| format!("{v:.4}")).collect();
    let prompt = format!("{}\n{}", golden("with_obj_piano.txt"), leak.join(" "));
    let payload = serde_json::to_vec(&ChatRequest::new(&prompt, &cfg)).unwrap();
    let x = vec![0.0f32; 512];
    let v = assert_privacy(&payload, &x, Some(&z)).unwrap_err();
    assert_eq!(v.field, "latent z");
}
