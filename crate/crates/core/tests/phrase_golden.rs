use std::path::{Path, PathBuf};

use ltrpo_core::phrases::{golden_lines, read_golden, RuleChunker};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn instructions() -> Vec<(String, String)> {
    std::fs::read_to_string(fixture("phrase_instructions.tsv"))
        .unwrap()
        .lines()
        .map(|l| {
            let (id, text) = l.split_once('\t').unwrap();
            (id.to_string(), text.to_string())
        })
        .collect()
}

/// Set `LTRPO_BLESS=1` to rewrite the golden file after an intended change.
#[test]
fn golden_output_is_byte_stable() {
    let items = instructions();
    assert_eq!(items.len(), 25);
    let got = golden_lines(&mut RuleChunker, &items).unwrap();
    let path = fixture("phrases_golden.jsonl");
    if std::env::var_os("LTRPO_BLESS").is_some() {
        std::fs::write(&path, &got).unwrap();
    }
    let want = std::fs::read_to_string(&path).unwrap();
    assert_eq!(got, want);
    assert_eq!(golden_lines(&mut RuleChunker, &items).unwrap(), got);
}

#[test]
fn golden_file_parses_back() {
    let records = read_golden(&fixture("phrases_golden.jsonl")).unwrap();
    assert_eq!(records.len(), 25);
    let first: Vec<&str> = records[0].phrases.iter().map(|p| p.text.as_str()).collect();
    assert_eq!(
        first,
        ["to the dining room", "a round table", "the bottle on it"]
    );
    for r in &records {
        assert!(!r.phrases.is_empty(), "{}", r.sample_id);
    }
}
