//! Token-table data files: keywords, punctuation and standard API names.
//!
//! Each table is shipped as a versioned data file (one token per line,
//! UTF-8, `#` comments allowed) and embedded at build time. SHA-256
//! checksums of the raw files are recorded in vocabulary metadata.

use std::collections::HashSet;
use std::sync::LazyLock;

use sha2::{Digest, Sha256};

pub const KEYWORDS_FILE: &str = include_str!("../../data/keywords.txt");
pub const PUNCTUATION_FILE: &str = include_str!("../../data/punctuation.txt");
pub const API_CALLS_FILE: &str = include_str!("../../data/api_calls.txt");

/// The five BPE reserved tokens, in fixed id order 0..=4.
pub const RESERVED_TOKENS: [&str; 5] = ["<s>", "<pad>", "</s>", "<unk>", "<mask>"];

pub const KEYWORD_COUNT: usize = 104;
pub const PUNCTUATION_COUNT: usize = 54;
pub const API_CALL_COUNT: usize = 288;

/// Parse a token-table file: one token per line. Lines starting with `# `
/// are comments; a bare `#` or `##` line is a token (the preprocessor
/// punctuators are table entries).
pub fn parse_table(contents: &str) -> Vec<String> {
    contents
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with("# "))
        .map(str::to_string)
        .collect()
}

fn sha256_hex(data: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(data.as_bytes());
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// The keyword, punctuation and API-call tables with lookup sets.
pub struct TokenTables {
    pub keywords: Vec<String>,
    pub punctuation: Vec<String>,
    pub api_calls: Vec<String>,
    keyword_set: HashSet<String>,
    punctuation_set: HashSet<String>,
    api_set: HashSet<String>,
    pub checksums: TableChecksums,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TableChecksums {
    pub keywords: String,
    pub punctuation: String,
    pub api_calls: String,
}

impl TokenTables {
    fn load() -> Self {
        let keywords = parse_table(KEYWORDS_FILE);
        let punctuation = parse_table(PUNCTUATION_FILE);
        let api_calls = parse_table(API_CALLS_FILE);
        assert_eq!(keywords.len(), KEYWORD_COUNT, "keyword table size");
        assert_eq!(punctuation.len(), PUNCTUATION_COUNT, "punctuation table size");
        assert_eq!(api_calls.len(), API_CALL_COUNT, "api table size");
        let keyword_set: HashSet<_> = keywords.iter().cloned().collect();
        let punctuation_set: HashSet<_> = punctuation.iter().cloned().collect();
        let api_set: HashSet<_> = api_calls.iter().cloned().collect();
        assert_eq!(keyword_set.len(), KEYWORD_COUNT, "keyword entries unique");
        assert_eq!(punctuation_set.len(), PUNCTUATION_COUNT, "punctuation entries unique");
        assert_eq!(api_set.len(), API_CALL_COUNT, "api entries unique");
        let checksums = TableChecksums {
            keywords: sha256_hex(KEYWORDS_FILE),
            punctuation: sha256_hex(PUNCTUATION_FILE),
            api_calls: sha256_hex(API_CALLS_FILE),
        };
        TokenTables {
            keywords,
            punctuation,
            api_calls,
            keyword_set,
            punctuation_set,
            api_set,
            checksums,
        }
    }

    pub fn is_keyword(&self, text: &str) -> bool {
        self.keyword_set.contains(text)
    }

    pub fn is_punctuation(&self, text: &str) -> bool {
        self.punctuation_set.contains(text)
    }

    pub fn is_api_call(&self, text: &str) -> bool {
        self.api_set.contains(text)
    }

    /// All pre-defined code tokens in canonical id order:
    /// keywords, then punctuation, then API calls.
    pub fn predefined(&self) -> impl Iterator<Item = &str> {
        self.keywords
            .iter()
            .chain(self.punctuation.iter())
            .chain(self.api_calls.iter())
            .map(String::as_str)
    }
}

static TABLES: LazyLock<TokenTables> = LazyLock::new(TokenTables::load);

pub fn token_tables() -> &'static TokenTables {
    &TABLES
}
