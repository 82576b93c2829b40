//! Function-level ingestion: extracting functions from C/C++ translation
//! units, loading labeled datasets, splits and class weights.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexer::{lex_stripped, strip_comments, LexToken, TokenKind};

/// One labeled function-level sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub code: String,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<String>,
}

/// Train/validation/test fractions plus the shuffle seed.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fractions: (f64, f64, f64),
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            fractions: (0.8, 0.1, 0.1),
            seed: 0,
        }
    }
}

/// Extract the source text of each top-level function definition.
///
/// Scans the comment-stripped source for `identifier (params) {` patterns
/// followed by brace-balanced bodies; brace counting works on lexer tokens
/// so braces inside string/char literals are skipped. Preprocessor lines are
/// blanked out before scanning. Functions are returned in source order;
/// nested and local definitions are not extracted separately.
///
/// Unbalanced braces at end of input yield the functions found so far with
/// a warning.
pub fn extract_functions(source: &str) -> Vec<String> {
    let stripped = strip_comments(source);
    let scannable = blank_preprocessor_lines(&stripped);
    let tokens = lex_stripped(&scannable);

    let mut functions = Vec::new();
    // index of the first token of the declaration currently being scanned
    let mut decl_first: Option<usize> = None;
    let mut i = 0;
    while i < tokens.len() {
        let t = &tokens[i];
        match (t.kind, t.text.as_str()) {
            (TokenKind::Punctuation, "{") => {
                // a top-level brace that is not a function body (struct,
                // enum, array initializer): skip its balanced region
                match matching_brace(&tokens, i) {
                    Some(close) => {
                        i = close + 1;
                        continue;
                    }
                    None => {
                        log::warn!("unbalanced braces at end of input");
                        break;
                    }
                }
            }
            (TokenKind::Punctuation, ";" | "}") => {
                decl_first = None;
                i += 1;
                continue;
            }
            (TokenKind::Identifier, _) => {
                if let Some((body_open, _params_close)) = function_signature_at(&tokens, i) {
                    match matching_brace(&tokens, body_open) {
                        Some(close) => {
                            let start = tokens[decl_first.unwrap_or(i)].start;
                            functions.push(stripped[start..tokens[close].end].to_string());
                            decl_first = None;
                            i = close + 1;
                            continue;
                        }
                        None => {
                            log::warn!("unbalanced braces at end of input");
                            break;
                        }
                    }
                }
            }
            _ => {}
        }
        if decl_first.is_none() {
            decl_first = Some(i);
        }
        i += 1;
    }
    functions
}

/// If tokens[i] is an identifier starting `name ( ... ) {`, return the index
/// of the opening body brace and of the closing parenthesis.
fn function_signature_at(tokens: &[LexToken], i: usize) -> Option<(usize, usize)> {
    if tokens[i].kind != TokenKind::Identifier {
        return None;
    }
    let open_paren = i + 1;
    if tokens.get(open_paren)?.text != "(" {
        return None;
    }
    let mut depth = 0i64;
    let mut j = open_paren;
    let close_paren = loop {
        let t = tokens.get(j)?;
        match t.text.as_str() {
            "(" => depth += 1,
            ")" => {
                depth -= 1;
                if depth == 0 {
                    break j;
                }
            }
            _ => {}
        }
        j += 1;
    };
    if tokens.get(close_paren + 1)?.text == "{" {
        Some((close_paren + 1, close_paren))
    } else {
        None
    }
}

fn matching_brace(tokens: &[LexToken], open: usize) -> Option<usize> {
    let mut depth = 0i64;
    for (j, t) in tokens.iter().enumerate().skip(open) {
        match t.text.as_str() {
            "{" => depth += 1,
            "}" => {
                depth -= 1;
                if depth == 0 {
                    return Some(j);
                }
            }
            _ => {}
        }
    }
    None
}

/// Replace preprocessor directive lines (including `\` continuations) with
/// spaces so that macro bodies cannot unbalance brace counting. Offsets are
/// preserved.
fn blank_preprocessor_lines(source: &str) -> String {
    let bytes = source.as_bytes();
    let mut out = bytes.to_vec();
    let mut i = 0;
    while i < bytes.len() {
        let line_start = i;
        while i < bytes.len() && bytes[i] != b'\n' {
            i += 1;
        }
        let mut first = line_start;
        while first < i && (bytes[first] == b' ' || bytes[first] == b'\t') {
            first += 1;
        }
        if first < i && bytes[first] == b'#' {
            let mut end = i;
            // honor line continuations
            while end < bytes.len() {
                let mut last = end;
                while last > line_start && bytes[last - 1].is_ascii_whitespace() && bytes[last - 1] != b'\n' {
                    last -= 1;
                }
                if last > line_start && bytes[last - 1] == b'\\' {
                    end += 1;
                    while end < bytes.len() && bytes[end] != b'\n' {
                        end += 1;
                    }
                } else {
                    break;
                }
            }
            for b in out.iter_mut().take(end).skip(line_start) {
                if *b != b'\n' {
                    *b = b' ';
                }
            }
            i = end;
        }
        i += 1;
    }
    String::from_utf8(out).expect("blanking preserves UTF-8")
}

/// Dataset file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Jsonl,
    Csv,
}

/// Field mapping and validation bounds for [`load_dataset`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub format: DatasetFormat,
    pub code_field: String,
    pub label_field: String,
    pub n_classes: usize,
}

impl DatasetSchema {
    pub fn new(format: DatasetFormat, n_classes: usize) -> Self {
        DatasetSchema {
            format,
            code_field: "code".to_string(),
            label_field: "label".to_string(),
            n_classes,
        }
    }
}

/// Load a labeled dataset. Records failing validation are counted and
/// skipped; zero valid records is an error.
pub fn load_dataset(path: &Path, schema: &DatasetSchema) -> Result<(Vec<Sample>, usize)> {
    let mut samples = Vec::new();
    let mut skipped = 0usize;
    match schema.format {
        DatasetFormat::Jsonl => {
            let contents = std::fs::read_to_string(path)?;
            for (lineno, line) in contents.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<serde_json::Value>(line) {
                    Ok(value) => match sample_from_value(&value, schema, path) {
                        Some(s) => samples.push(s),
                        None => {
                            log::warn!("{}:{}: invalid record, skipped", path.display(), lineno + 1);
                            skipped += 1;
                        }
                    },
                    Err(_) => {
                        log::warn!("{}:{}: malformed JSON, skipped", path.display(), lineno + 1);
                        skipped += 1;
                    }
                }
            }
        }
        DatasetFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
            let headers = reader.headers()?.clone();
            let code_idx = headers.iter().position(|h| h == schema.code_field);
            let label_idx = headers.iter().position(|h| h == schema.label_field);
            let (Some(code_idx), Some(label_idx)) = (code_idx, label_idx) else {
                return Err(Error::Dataset(format!(
                    "{}: missing '{}' or '{}' column",
                    path.display(),
                    schema.code_field,
                    schema.label_field
                )));
            };
            for record in reader.records() {
                let record = record?;
                let code = record.get(code_idx).unwrap_or("");
                let label = record.get(label_idx).and_then(|v| v.parse::<usize>().ok());
                match validate_sample(code, label, schema, path) {
                    Some(s) => samples.push(s),
                    None => skipped += 1,
                }
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: no valid records ({} skipped)",
            path.display(),
            skipped
        )));
    }
    Ok((samples, skipped))
}

fn sample_from_value(value: &serde_json::Value, schema: &DatasetSchema, path: &Path) -> Option<Sample> {
    let code = value.get(&schema.code_field)?.as_str()?;
    let label = value.get(&schema.label_field)?.as_u64().map(|v| v as usize);
    validate_sample(code, label, schema, path)
}

fn validate_sample(code: &str, label: Option<usize>, schema: &DatasetSchema, path: &Path) -> Option<Sample> {
    let label = label?;
    if label >= schema.n_classes {
        log::warn!(
            "{}: label {} outside class range 0..{}, record skipped",
            path.display(),
            label,
            schema.n_classes
        );
        return None;
    }
    if strip_comments(code).trim().is_empty() {
        return None;
    }
    Some(Sample {
        code: code.to_string(),
        label,
        origin: Some(path.display().to_string()),
    })
}

/// Deterministic shuffled partition. Validation and test sizes are
/// `floor(fraction * n)`; the remainder goes to train.
pub fn split(samples: &[Sample], spec: &SplitSpec) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    let (ft, fv, fs) = spec.fractions;
    let sum = ft + fv + fs;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must sum to 1.0 (got {sum})"
        )));
    }
    if ft < 0.0 || fv < 0.0 || fs < 0.0 {
        return Err(Error::Config("split fractions must be non-negative".into()));
    }
    let n = samples.len();
    if n < 10 {
        return Err(Error::Config(format!(
            "at least 10 samples required for splitting, got {n}"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    indices.shuffle(&mut rng);

    let n_valid = (fv * n as f64).floor() as usize;
    let n_test = (fs * n as f64).floor() as usize;
    let n_train = n - n_valid - n_test;

    let pick = |range: std::ops::Range<usize>| -> Vec<Sample> {
        indices[range].iter().map(|&i| samples[i].clone()).collect()
    };
    Ok((
        pick(0..n_train),
        pick(n_train..n_train + n_valid),
        pick(n_train + n_valid..n),
    ))
}

/// Split manifest: explicit sample indices per part.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Honor an explicit split manifest instead of the fraction rule.
pub fn split_by_manifest(
    samples: &[Sample],
    manifest: &SplitManifest,
) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    let pick = |idxs: &[usize]| -> Result<Vec<Sample>> {
        idxs.iter()
            .map(|&i| {
                samples
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("manifest index {i} out of range")))
            })
            .collect()
    };
    Ok((pick(&manifest.train)?, pick(&manifest.valid)?, pick(&manifest.test)?))
}

/// Inverse-frequency class weights: `w_c = n / (n_classes * count_c)`.
/// Every class must be present at least once.
pub fn class_weights(train: &[Sample], n_classes: usize) -> Result<Vec<f64>> {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for s in train {
        *counts.entry(s.label).or_insert(0) += 1;
    }
    let missing: Vec<usize> = (0..n_classes).filter(|c| !counts.contains_key(c)).collect();
    if !missing.is_empty() {
        return Err(Error::Dataset(format!(
            "classes absent from training split: {missing:?}"
        )));
    }
    let n = train.len() as f64;
    Ok((0..n_classes)
        .map(|c| n / (n_classes as f64 * counts[&c] as f64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexer::lex;

    fn sample(label: usize) -> Sample {
        Sample {
            code: "int f(){return 0;}".into(),
            label,
            origin: None,
        }
    }

    #[test]
    fn extract_two_functions() {
        let src = "int f(){return 0;}\nvoid g(int a){a++;}\n";
        let fns = extract_functions(src);
        assert_eq!(fns, vec!["int f(){return 0;}", "void g(int a){a++;}"]);
    }

    #[test]
    fn extract_ignores_prototypes() {
        assert!(extract_functions("int f(int);\nextern void g(void);\n").is_empty());
    }

    #[test]
    fn extract_skips_braces_in_literals() {
        let src = "int f(){ char *s = \"}{\"; return s[0]; }";
        let fns = extract_functions(src);
        assert_eq!(fns.len(), 1);
        assert!(fns[0].contains("\"}{\""));
    }

    #[test]
    fn extract_skips_struct_and_globals() {
        let src = "struct p { int x; };\nint table[] = {1, 2, 3};\nint f(void) { return table[0]; }\n";
        let fns = extract_functions(src);
        assert_eq!(fns.len(), 1);
        assert!(fns[0].starts_with("int f(void)"));
    }

    #[test]
    fn extract_handles_preprocessor_macros() {
        let src = "#define BAD(x) { (x)++; }\nint f(int a) { BAD(a); return a; }\n";
        let fns = extract_functions(src);
        assert_eq!(fns.len(), 1);
        assert!(fns[0].starts_with("int f(int a)"));
    }

    #[test]
    fn extract_nested_blocks_stay_inside() {
        let src = "void g(int n) { if (n) { while (n--) { n += 0; } } }";
        let fns = extract_functions(src);
        assert_eq!(fns.len(), 1);
    }

    #[test]
    fn extract_unbalanced_returns_partial() {
        let src = "int f(){return 0;}\nvoid g(int a){ if (a) {";
        let fns = extract_functions(src);
        assert_eq!(fns, vec!["int f(){return 0;}"]);
    }

    #[test]
    fn extracted_functions_relex_cleanly() {
        let src = "static int add(int a, int b) { return a + b; }\nint use(void) { return add(1, 2); }";
        for f in extract_functions(src) {
            assert!(!lex(&f).is_empty());
            assert!(src.contains(&f));
        }
    }

    #[test]
    fn load_jsonl_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(
            &p,
            "{\"code\": \"int f(){}\", \"label\": 0}\n{\"code\": \"int g(){}\", \"label\": 1}\n{\"code\": \"int h(){}\", \"label\": 0}\n",
        )
        .unwrap();
        let schema = DatasetSchema::new(DatasetFormat::Jsonl, 2);
        let (samples, skipped) = load_dataset(&p, &schema).unwrap();
        assert_eq!(samples.len(), 3);
        assert_eq!(skipped, 0);
    }

    #[test]
    fn load_jsonl_skips_missing_label() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(&p, "{\"code\": \"int f(){}\"}\n{\"code\": \"int g(){}\", \"label\": 1}\n").unwrap();
        let (samples, skipped) = load_dataset(&p, &DatasetSchema::new(DatasetFormat::Jsonl, 2)).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(skipped, 1);
    }

    #[test]
    fn load_jsonl_skips_out_of_range_label() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(&p, "{\"code\": \"int f(){}\", \"label\": 7}\n{\"code\": \"int g(){}\", \"label\": 1}\n").unwrap();
        let (samples, skipped) = load_dataset(&p, &DatasetSchema::new(DatasetFormat::Jsonl, 2)).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(skipped, 1);
    }

    #[test]
    fn load_zero_valid_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(&p, "{\"nope\": 1}\n").unwrap();
        assert!(load_dataset(&p, &DatasetSchema::new(DatasetFormat::Jsonl, 2)).is_err());
    }

    #[test]
    fn load_csv_with_multiline_code() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "code,label\n\"int f() {\nreturn 0;\n}\",1\n\"int g(){}\",0\n").unwrap();
        let (samples, _) = load_dataset(&p, &DatasetSchema::new(DatasetFormat::Csv, 2)).unwrap();
        assert_eq!(samples.len(), 2);
        assert!(samples[0].code.contains('\n'));
    }

    #[test]
    fn split_exact_division() {
        let samples: Vec<Sample> = (0..100).map(|i| sample(i % 2)).collect();
        let (tr, va, te) = split(&samples, &SplitSpec::default()).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (80, 10, 10));
    }

    #[test]
    fn split_remainder_to_train() {
        let samples: Vec<Sample> = (0..103).map(|i| sample(i % 2)).collect();
        let (tr, va, te) = split(&samples, &SplitSpec::default()).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (83, 10, 10));
    }

    #[test]
    fn split_deterministic_partition() {
        let samples: Vec<Sample> = (0..57)
            .map(|i| Sample {
                code: format!("int f{i}(){{}}"),
                label: i % 2,
                origin: None,
            })
            .collect();
        let spec = SplitSpec {
            fractions: (0.8, 0.1, 0.1),
            seed: 42,
        };
        let a = split(&samples, &spec).unwrap();
        let b = split(&samples, &spec).unwrap();
        assert_eq!(a, b);
        // partition covers everything exactly once
        let mut all: Vec<&str> = a.0.iter().chain(&a.1).chain(&a.2).map(|s| s.code.as_str()).collect();
        all.sort_unstable();
        let mut expected: Vec<&str> = samples.iter().map(|s| s.code.as_str()).collect();
        expected.sort_unstable();
        assert_eq!(all, expected);
    }

    #[test]
    fn split_bad_fractions() {
        let samples: Vec<Sample> = (0..20).map(|i| sample(i % 2)).collect();
        let spec = SplitSpec {
            fractions: (0.8, 0.1, 0.2),
            seed: 0,
        };
        assert!(split(&samples, &spec).is_err());
    }

    #[test]
    fn class_weights_balanced() {
        let samples: Vec<Sample> = (0..100).map(|i| sample(i % 2)).collect();
        assert_eq!(class_weights(&samples, 2).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn class_weights_imbalanced() {
        let mut samples: Vec<Sample> = (0..90).map(|_| sample(0)).collect();
        samples.extend((0..10).map(|_| sample(1)));
        let w = class_weights(&samples, 2).unwrap();
        assert!((w[0] - 0.5556).abs() < 1e-4);
        assert!((w[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn class_weights_weighted_counts_sum_to_n() {
        let mut samples: Vec<Sample> = (0..1775 + 269).map(|_| sample(0)).collect();
        samples.extend((0..230).map(|_| sample(1)));
        let w = class_weights(&samples, 2).unwrap();
        assert!(w[1] > w[0]);
        let counts = [2044.0, 230.0];
        let total: f64 = w.iter().zip(counts).map(|(wi, c)| wi * c).sum();
        assert!((total - samples.len() as f64).abs() < 1e-9);
    }

    #[test]
    fn class_weights_missing_class() {
        let samples: Vec<Sample> = (0..10).map(|_| sample(0)).collect();
        let err = class_weights(&samples, 2).unwrap_err();
        assert!(err.to_string().contains('1'));
    }
}
