use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn sense(dir: &Path, args: &[&str], envs: &[(&str, &str)]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_sense"))
        .current_dir(dir)
        .args(args)
        .envs(envs.iter().copied())
        .output()
        .unwrap();
    let text = format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    (out.status.code().unwrap_or(-1), text)
}

const CORPUS: &str = r#"{"id":"s1_0001","subject":1,"split":"train","caption":"A black piano in a quiet room.","object_label":"piano"}
{"id":"s1_0002","subject":1,"split":"train","caption":"Two dogs run on green grass.","object_label":"dog"}
{"id":"s1_0003","subject":1,"split":"val","caption":"A zebra drinks from the river.","object_label":"zebra"}
{"id":"s1_0004","subject":1,"split":"test","caption":"A black dog sleeps by the piano.","object_label":"dog"}
"#;

#[test]
fn vocabulary_and_targets_from_a_corpus() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("corpus.jsonl"), CORPUS).unwrap();
    let (code, text) = sense(dir.path(), &["build-vocab", "--corpus", "corpus.jsonl", "--out", "out/vocab.json"], &[]);
    assert_eq!(code, 0, "{text}");
    let vocab: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/vocab.json")).unwrap()).unwrap();
    let tokens = vocab.to_string();
    assert!(tokens.contains("piano") && tokens.contains("grass"));
    assert!(!tokens.contains("zebra"), "held-out captions leaked into the vocabulary");
    assert!(dir.path().join("out/build-vocab.manifest.json").is_file());

    let (code, text) = sense(
        dir.path(),
        &["make-targets", "--corpus", "corpus.jsonl", "--vocab", "out/vocab.json", "--out", "out/targets.jsonl"],
        &[],
    );
    assert_eq!(code, 0, "{text}");
    let lines: Vec<Value> = fs::read_to_string(dir.path().join("out/targets.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[2]["active"].as_array().unwrap().len(), 0);
    let test_tokens: Vec<&str> = lines[3]["tokens"].as_array().unwrap().iter().map(|t| t.as_str().unwrap()).collect();
    assert!(test_tokens.contains(&"piano") && test_tokens.contains(&"dog"));
}

#[test]
fn missing_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = sense(dir.path(), &["build-vocab", "--corpus", "absent.jsonl", "--out", "v.json"], &[]);
    assert_eq!(code, 2, "{text}");
}

#[test]
fn gradcheck_subcommand_passes() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = sense(dir.path(), &["gradcheck", "--seed", "7"], &[]);
    assert_eq!(code, 0, "{text}");
    assert_eq!(text.lines().filter(|l| l.trim_end().ends_with("ok")).count(), 3, "{text}");
}

#[test]
fn unreachable_endpoint_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let steps: [&[&str]; 3] = [
        &["synth", "--v", "20", "--n", "40", "--dim", "16", "--active", "3", "--out-dir", "data"],
        &["retrieve", "--data-dir", "data", "--dim", "16", "--out-dir", "retrieve"],
        &["prompt", "--retrieval", "retrieve/retrieval.jsonl", "--data-dir", "data", "--variant", "without_obj", "--out-dir", "prompt"],
    ];
    for args in steps {
        let (code, text) = sense(p, args, &[]);
        assert_eq!(code, 0, "{args:?}: {text}");
    }
    let (code, text) = sense(
        p,
        &[
            "generate",
            "--prompts",
            "prompt/prompts.jsonl",
            "--data-dir",
            "data",
            "--dim",
            "16",
            "--endpoint",
            "http://127.0.0.1:1/v1/chat/completions",
            "--credential-env",
            "SENSE_CLI_TEST_TOKEN",
            "--max-retries",
            "0",
            "--timeout-secs",
            "2",
            "--out-dir",
            "generate",
        ],
        &[("SENSE_CLI_TEST_TOKEN", "x")],
    );
    assert_eq!(code, 3, "{text}");
}
