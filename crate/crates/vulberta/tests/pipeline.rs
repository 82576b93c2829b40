//! Fixture-driven integration tests for the lexing/extraction/tokenization
//! pipeline. Golden files live next to the fixtures; regenerate the encode
//! golden with `cargo test --test pipeline regen -- --ignored` after a
//! deliberate vocabulary change.

use std::path::PathBuf;

use vulberta::ingest::extract_functions;
use vulberta::lexer::{lex_stripped, strip_comments};
use vulberta::tokenizer::{decode, encode, tokenize, train_bpe, vocab_to_json, Vocab};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn read(name: &str) -> String {
    std::fs::read_to_string(fixture(name)).expect("fixture readable")
}

#[test]
fn comment_stripping_matches_golden() {
    let source = read("comment_fixture.c");
    let golden = read("comment_fixture.stripped.c");
    assert_eq!(strip_comments(&source), golden);
}

#[test]
fn comment_stripping_idempotent_on_fixture() {
    let stripped = strip_comments(&read("comment_fixture.c"));
    assert_eq!(strip_comments(&stripped), stripped);
}

fn fixture_function_names() -> Vec<String> {
    serde_json::from_str(&read("extract_fixture.functions.json")).expect("golden list")
}

#[test]
fn extraction_matches_annotated_functions() {
    let functions = extract_functions(&read("extract_fixture.c"));
    let expected = fixture_function_names();
    assert_eq!(
        functions.len(),
        expected.len(),
        "extracted {} functions, annotation lists {}",
        functions.len(),
        expected.len()
    );
    for (body, name) in functions.iter().zip(&expected) {
        assert!(
            body.contains(&format!("{name}(")),
            "function body does not mention {name}: {}",
            &body[..body.len().min(80)]
        );
        assert!(body.trim_end().ends_with('}'));
        let opens = body.matches('{').count();
        let closes = body.matches('}').count();
        assert_eq!(opens, closes, "unbalanced braces in {name}");
    }
}

#[test]
fn extracted_functions_relex_to_same_tokens() {
    for body in extract_functions(&read("extract_fixture.c")) {
        let once: Vec<String> = lex_stripped(&body).into_iter().map(|t| t.text).collect();
        let again: Vec<String> = lex_stripped(&body).into_iter().map(|t| t.text).collect();
        assert_eq!(once, again);
        assert!(!once.is_empty());
    }
}

/// Vocabulary trained on the extraction fixture, deterministic.
fn fixture_vocab() -> Vocab {
    let corpus = extract_functions(&read("extract_fixture.c"))
        .into_iter()
        .map(|f| lex_stripped(&f));
    train_bpe(corpus, 1200).expect("fixture vocabulary")
}

#[test]
fn fixture_vocab_training_is_reproducible() {
    let a = vocab_to_json(&fixture_vocab());
    let b = vocab_to_json(&fixture_vocab());
    assert_eq!(a, b);
}

#[test]
fn encode_golden_id_sequence() {
    let vocab = fixture_vocab();
    let function = &extract_functions(&read("comment_fixture.c"))[0];
    let subwords = tokenize(&lex_stripped(function), &vocab);
    let seq = encode(&subwords, &vocab, 256).expect("fits in 256");
    let golden: Vec<u32> =
        serde_json::from_str(&read("encode_golden.json")).expect("golden ids");
    assert_eq!(seq.ids, golden);
}

#[test]
fn round_trip_on_fixture_functions() {
    let vocab = fixture_vocab();
    for function in extract_functions(&read("extract_fixture.c")) {
        let subwords = tokenize(&lex_stripped(&function), &vocab);
        if subwords.len() > 254 {
            continue;
        }
        let seq = encode(&subwords, &vocab, 256).unwrap();
        let decoded = decode(&seq.ids, &vocab).unwrap();
        assert_eq!(decoded, subwords);
    }
}

/// Writes the encode golden from the current pipeline output.
#[test]
#[ignore]
fn regen_encode_golden() {
    let vocab = fixture_vocab();
    let function = &extract_functions(&read("comment_fixture.c"))[0];
    let subwords = tokenize(&lex_stripped(function), &vocab);
    let seq = encode(&subwords, &vocab, 256).unwrap();
    let json = serde_json::to_string(&seq.ids).unwrap();
    std::fs::write(fixture("encode_golden.json"), json + "\n").unwrap();
}
