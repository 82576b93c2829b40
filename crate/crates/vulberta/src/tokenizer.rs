//! BPE subword tokenizer with reserved and pre-defined tokens, plus the
//! fixed-length sequence encoder.
//!
//! The vocabulary is seeded with 5 reserved tokens, the 446 pre-defined code
//! tokens (keywords, punctuation, API names) and 256 byte-level atoms.
//! Pre-defined tokens are excluded from merging: they always map to a single
//! vocabulary entry and never appear split across subwords.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexer::tables::{token_tables, TableChecksums, RESERVED_TOKENS};
use crate::lexer::{LexToken, TokenKind};

/// Default vocabulary capacity.
pub const DEFAULT_MAX_SIZE: usize = 50_000;

/// Number of vocabulary entries before any merge is learned:
/// 5 reserved + 446 pre-defined + 256 byte atoms.
pub const BASE_VOCAB_SIZE: usize = 5 + 446 + 256;

pub const BOS_ID: u32 = 0;
pub const PAD_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const MASK_ID: u32 = 4;

/// First id that is neither reserved nor pre-defined nor derived from them.
pub const FIRST_NON_RESERVED_ID: u32 = 5;

// Byte atoms live in a private character plane (U+0100 + byte value) so that
// single-character atoms can never collide with pre-defined tokens.
const ATOM_BASE: u32 = 0x100;

fn atom_char(byte: u8) -> char {
    char::from_u32(ATOM_BASE + byte as u32).expect("atom plane is valid")
}

/// Map a token's text into its byte-atom symbol sequence.
pub fn text_to_atoms(text: &str) -> Vec<String> {
    text.bytes().map(|b| atom_char(b).to_string()).collect()
}

/// Map an atom-plane subword back to the source text it covers.
/// Reserved and pre-defined entries are returned unchanged.
pub fn subword_to_text(subword: &str) -> String {
    let mut bytes = Vec::with_capacity(subword.len());
    let mut plain = String::new();
    let mut any_atom = false;
    for ch in subword.chars() {
        let code = ch as u32;
        if (ATOM_BASE..ATOM_BASE + 256).contains(&code) {
            bytes.push((code - ATOM_BASE) as u8);
            any_atom = true;
        } else {
            plain.push(ch);
        }
    }
    if !any_atom {
        return plain;
    }
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Bidirectional token/id map with the ordered merge list.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    merges: Vec<(String, String)>,
    merge_ranks: HashMap<(String, String), u32>,
    predefined: HashSet<String>,
    max_size: usize,
    pub table_checksums: TableChecksums,
}

impl Vocab {
    /// Base vocabulary with no learned merges.
    pub fn base(max_size: usize) -> Result<Vocab> {
        if max_size <= 456 {
            return Err(Error::Config(format!(
                "max_size must exceed 456 (5 reserved + 451 pre-defined entries), got {max_size}"
            )));
        }
        let tables = token_tables();
        let mut id_to_token: Vec<String> = Vec::with_capacity(BASE_VOCAB_SIZE);
        for r in RESERVED_TOKENS {
            id_to_token.push(r.to_string());
        }
        for t in tables.predefined() {
            id_to_token.push(t.to_string());
        }
        for b in 0u16..256 {
            id_to_token.push(atom_char(b as u8).to_string());
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocab {
            token_to_id,
            id_to_token,
            merges: Vec::new(),
            merge_ranks: HashMap::new(),
            predefined: tables.predefined().map(str::to_string).collect(),
            max_size,
            table_checksums: tables.checksums.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn is_predefined(&self, text: &str) -> bool {
        self.predefined.contains(text)
    }

    fn push_merge(&mut self, left: String, right: String) {
        let merged = format!("{left}{right}");
        let id = self.id_to_token.len() as u32;
        self.token_to_id.insert(merged.clone(), id);
        self.id_to_token.push(merged);
        self.merge_ranks
            .insert((left.clone(), right.clone()), self.merges.len() as u32);
        self.merges.push((left, right));
    }

    /// Split a single lexer token into subwords.
    ///
    /// Pre-defined tokens (keywords, punctuation, API names) map to their
    /// single vocabulary entry; everything else is split by applying the
    /// learned merges within the token's byte sequence.
    pub fn tokenize_token(&self, token: &LexToken) -> Vec<String> {
        if self.predefined.contains(&token.text) {
            return vec![token.text.clone()];
        }
        self.apply_bpe(&token.text)
    }

    fn apply_bpe(&self, text: &str) -> Vec<String> {
        let mut symbols = text_to_atoms(text);
        if symbols.len() < 2 {
            return symbols;
        }
        loop {
            let mut best: Option<(u32, usize)> = None;
            for i in 0..symbols.len() - 1 {
                let pair = (symbols[i].clone(), symbols[i + 1].clone());
                if let Some(&rank) = self.merge_ranks.get(&pair) {
                    if best.map_or(true, |(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((rank, _)) = best else { break };
            let (left, right) = self.merges[rank as usize].clone();
            let mut out = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
                    out.push(format!("{left}{right}"));
                    i += 2;
                } else {
                    out.push(symbols[i].clone());
                    i += 1;
                }
            }
            symbols = out;
            if symbols.len() < 2 {
                break;
            }
        }
        symbols
    }
}

/// A fixed-length id sequence with attention mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedSeq {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub true_len: usize,
}

impl EncodedSeq {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }
}

/// Whether a token's text takes part in BPE training.
/// Keyword/punctuation tokens and identifiers matching pre-defined entries
/// are never split or counted.
fn is_bpe_word(token: &LexToken, predefined: &HashSet<String>) -> bool {
    matches!(
        token.kind,
        TokenKind::Literal | TokenKind::Identifier | TokenKind::Unknown
    ) && !predefined.contains(&token.text)
}

/// Train a BPE vocabulary over the literal/identifier/unknown tokens of a
/// corpus. Merges are learned greedily by descending pair frequency, with
/// ties broken by lexicographic order of (left, right). Training stops at
/// `max_size` entries or when no pair occurs at least twice. Deterministic
/// for identical corpus and configuration.
pub fn train_bpe<I>(corpus: I, max_size: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = Vec<LexToken>>,
{
    let mut vocab = Vocab::base(max_size)?;
    let reserved: HashSet<&str> = RESERVED_TOKENS.into_iter().collect();

    // word -> frequency over the BPE input set
    let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
    for tokens in corpus {
        for t in &tokens {
            if is_bpe_word(t, &vocab.predefined) {
                *word_counts.entry(t.text.clone()).or_insert(0) += 1;
            }
        }
    }

    let mut words: Vec<(Vec<String>, u64)> = word_counts
        .into_iter()
        .map(|(w, c)| (text_to_atoms(&w), c))
        .collect();

    while vocab.len() < max_size {
        let mut pair_counts: HashMap<(String, String), u64> = HashMap::new();
        for (symbols, count) in &words {
            for window in symbols.windows(2) {
                let pair = (window[0].clone(), window[1].clone());
                *pair_counts.entry(pair).or_insert(0) += count;
            }
        }
        // best pair: max count, lexicographically smallest on ties; a merge
        // may never produce a reserved or pre-defined token
        let mut best: Option<((String, String), u64)> = None;
        for (pair, count) in pair_counts {
            if count < 2 {
                continue;
            }
            let merged_text = subword_to_text(&format!("{}{}", pair.0, pair.1));
            if reserved.contains(merged_text.as_str()) || vocab.predefined.contains(&merged_text) {
                continue;
            }
            match &best {
                None => best = Some((pair, count)),
                Some((bp, bc)) => {
                    if count > *bc || (count == *bc && pair < *bp) {
                        best = Some((pair, count));
                    }
                }
            }
        }
        let Some(((left, right), _)) = best else { break };
        for (symbols, _) in &mut words {
            let mut out = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
                    out.push(format!("{left}{right}"));
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            *symbols = out;
        }
        vocab.push_merge(left, right);
    }
    Ok(vocab)
}

/// Split a lexer token sequence into subwords in source order.
pub fn tokenize(tokens: &[LexToken], vocab: &Vocab) -> Vec<String> {
    tokens
        .iter()
        .flat_map(|t| vocab.tokenize_token(t))
        .collect()
}

/// Encode subwords into a fixed-length id sequence:
/// `<s>` + ids + `</s>`, truncated by dropping tail subwords, right-padded.
pub fn encode(subwords: &[String], vocab: &Vocab, max_len: usize) -> Result<EncodedSeq> {
    if max_len < 2 {
        return Err(Error::Config(format!("max_len must be >= 2, got {max_len}")));
    }
    let body = subwords.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS_ID);
    for sw in &subwords[..body] {
        ids.push(vocab.id_of(sw).unwrap_or(UNK_ID));
    }
    ids.push(EOS_ID);
    let true_len = ids.len();
    ids.resize(max_len, PAD_ID);
    let mut attention_mask = vec![1u8; true_len];
    attention_mask.resize(max_len, 0);
    Ok(EncodedSeq {
        ids,
        attention_mask,
        true_len,
    })
}

/// Inverse of token lookup with reserved tokens elided.
pub fn decode(ids: &[u32], vocab: &Vocab) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        match vocab.token_of(id) {
            None => {
                return Err(Error::Input(format!(
                    "id {id} out of range for vocabulary of size {}",
                    vocab.len()
                )))
            }
            Some(_) if id < FIRST_NON_RESERVED_ID => {}
            Some(tok) => out.push(tok.to_string()),
        }
    }
    Ok(out)
}

/// Serialized vocabulary document. Canonical: fields in fixed (alphabetical)
/// order, deterministic content, so byte-identity is meaningful.
#[derive(Serialize, Deserialize)]
struct VocabFile {
    atoms: Vec<String>,
    max_size: usize,
    merges: Vec<(String, String)>,
    predefined: Vec<String>,
    reserved: Vec<String>,
    table_checksums: TableChecksums,
    version: u32,
}

const VOCAB_FILE_VERSION: u32 = 1;

pub fn vocab_to_json(vocab: &Vocab) -> String {
    let file = VocabFile {
        atoms: (0u16..256).map(|b| atom_char(b as u8).to_string()).collect(),
        max_size: vocab.max_size,
        merges: vocab.merges.clone(),
        predefined: token_tables().predefined().map(str::to_string).collect(),
        reserved: RESERVED_TOKENS.iter().map(|s| s.to_string()).collect(),
        table_checksums: vocab.table_checksums.clone(),
        version: VOCAB_FILE_VERSION,
    };
    let mut out = serde_json::to_string_pretty(&file).expect("vocab serialization cannot fail");
    out.push('\n');
    out
}

pub fn save_vocab(vocab: &Vocab, path: &Path) -> Result<()> {
    std::fs::write(path, vocab_to_json(vocab))?;
    Ok(())
}

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    let contents = std::fs::read_to_string(path)?;
    let file: VocabFile = serde_json::from_str(&contents).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    let tables = token_tables();
    if file.table_checksums != tables.checksums {
        return Err(Error::Integrity(format!(
            "token table checksum mismatch in {}: vocabulary was built against different tables",
            path.display()
        )));
    }
    let expected_predefined: Vec<String> = tables.predefined().map(str::to_string).collect();
    if file.predefined != expected_predefined {
        return Err(Error::Integrity(format!(
            "pre-defined token list mismatch in {}",
            path.display()
        )));
    }
    if file.reserved != RESERVED_TOKENS {
        return Err(Error::Integrity(format!(
            "reserved token list mismatch in {}",
            path.display()
        )));
    }
    let mut vocab = Vocab::base(file.max_size)?;
    for (left, right) in file.merges {
        vocab.push_merge(left, right);
    }
    if vocab.len() > vocab.max_size {
        return Err(Error::Integrity(format!(
            "vocabulary in {} exceeds its own max_size {}",
            path.display(),
            vocab.max_size
        )));
    }
    Ok(vocab)
}

/// SHA-256 checksum of the canonical vocabulary serialization; recorded in
/// model checkpoints so embeddings and vocabulary stay paired.
pub fn vocab_checksum(vocab: &Vocab) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(vocab_to_json(vocab).as_bytes());
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexer::lex;

    fn ident(text: &str) -> LexToken {
        LexToken {
            text: text.to_string(),
            kind: TokenKind::Identifier,
            start: 0,
            end: text.len(),
        }
    }

    #[test]
    fn base_vocab_layout() {
        let v = Vocab::base(1000).unwrap();
        assert_eq!(v.len(), BASE_VOCAB_SIZE);
        assert_eq!(v.id_of("<s>"), Some(0));
        assert_eq!(v.id_of("<pad>"), Some(1));
        assert_eq!(v.id_of("</s>"), Some(2));
        assert_eq!(v.id_of("<unk>"), Some(3));
        assert_eq!(v.id_of("<mask>"), Some(4));
        // pre-defined tokens start at id 5 in canonical table order
        assert_eq!(v.id_of("alignas"), Some(5));
        let tables = crate::lexer::tables::token_tables();
        let last = tables.api_calls.last().unwrap().as_str();
        assert_eq!(v.token_of(5 + 446 - 1), Some(last));
    }

    #[test]
    fn max_size_floor_rejected() {
        let err = Vocab::base(456).unwrap_err();
        assert!(err.to_string().contains("456"));
    }

    #[test]
    fn abab_merge_order() {
        // brute-force pair counting on a 1-word corpus: (a,b) first, then (ab,ab)
        let corpus: Vec<Vec<LexToken>> = (0..10).map(|_| vec![ident("abab")]).collect();
        let vocab = train_bpe(corpus, BASE_VOCAB_SIZE + 4).unwrap();
        let a = atom_char(b'a').to_string();
        let b = atom_char(b'b').to_string();
        let ab = format!("{a}{b}");
        assert!(vocab.merges().len() >= 2);
        assert_eq!(vocab.merges()[0], (a, b));
        assert_eq!(vocab.merges()[1], (ab.clone(), ab));
    }

    #[test]
    fn keyword_only_corpus_learns_nothing() {
        let corpus = vec![lex("if else while return int void")];
        let vocab = train_bpe(corpus, 1000).unwrap();
        assert!(vocab.merges().is_empty());
        assert_eq!(vocab.len(), BASE_VOCAB_SIZE);
    }

    #[test]
    fn api_token_never_merged() {
        let corpus: Vec<Vec<LexToken>> = (0..1000)
            .map(|_| vec![ident("memcpy"), ident("memcpyx")])
            .collect();
        let vocab = train_bpe(corpus, BASE_VOCAB_SIZE + 50).unwrap();
        for (l, r) in vocab.merges() {
            assert_ne!(subword_to_text(&format!("{l}{r}")), "memcpy");
        }
        // and as a whole lexer token it is exactly one pre-defined entry
        let toks = lex("memcpy(a, b, n);");
        let sub = vocab.tokenize_token(&toks[0]);
        assert_eq!(sub, vec!["memcpy".to_string()]);
    }

    #[test]
    fn tokenize_keeps_predefined_single() {
        let vocab = Vocab::base(1000).unwrap();
        let toks = lex("int x = 10;");
        let subs = tokenize(&toks, &vocab);
        assert_eq!(subs[0], "int");
        assert_eq!(*subs.last().unwrap(), ";".to_string());
        // x and 10 are split into atom-plane symbols
        assert_eq!(subword_to_text(&subs[1]), "x");
    }

    #[test]
    fn tokenize_empty() {
        let vocab = Vocab::base(1000).unwrap();
        assert!(tokenize(&[], &vocab).is_empty());
    }

    #[test]
    fn encode_empty_sequence() {
        let vocab = Vocab::base(1000).unwrap();
        let seq = encode(&[], &vocab, 8).unwrap();
        assert_eq!(seq.ids, vec![0, 2, 1, 1, 1, 1, 1, 1]);
        assert_eq!(seq.attention_mask, vec![1, 1, 0, 0, 0, 0, 0, 0]);
        assert_eq!(seq.true_len, 2);
    }

    #[test]
    fn encode_truncates_tail() {
        let vocab = Vocab::base(1000).unwrap();
        let subwords: Vec<String> = std::iter::repeat("int".to_string()).take(2000).collect();
        let seq = encode(&subwords, &vocab, 1024).unwrap();
        assert_eq!(seq.true_len, 1024);
        assert_eq!(*seq.ids.last().unwrap(), EOS_ID);
        assert!(seq.attention_mask.iter().all(|&m| m == 1));
    }

    #[test]
    fn decode_elides_reserved() {
        let vocab = Vocab::base(1000).unwrap();
        assert!(decode(&[0, 2], &vocab).unwrap().is_empty());
        assert!(decode(&[1, 1, 1], &vocab).unwrap().is_empty());
    }

    #[test]
    fn decode_out_of_range() {
        let vocab = Vocab::base(1000).unwrap();
        let err = decode(&[999_999], &vocab).unwrap_err();
        assert!(err.to_string().contains("999999"));
    }

    #[test]
    fn encode_decode_round_trip() {
        let corpus: Vec<Vec<LexToken>> =
            vec![lex("int foo(int a) { return a + 1; }"), lex("size_t n = strlen(s);")];
        let vocab = train_bpe(corpus.clone(), BASE_VOCAB_SIZE + 20).unwrap();
        for toks in &corpus {
            let subs = tokenize(toks, &vocab);
            let seq = encode(&subs, &vocab, 128).unwrap();
            let back = decode(&seq.ids, &vocab).unwrap();
            assert_eq!(back, subs);
        }
    }

    #[test]
    fn save_load_round_trip_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = vec![lex("int foo(int a) { return a + bar_baz; }")];
        let vocab = train_bpe(corpus, BASE_VOCAB_SIZE + 10).unwrap();
        let p1 = dir.path().join("v1.json");
        let p2 = dir.path().join("v2.json");
        save_vocab(&vocab, &p1).unwrap();
        let loaded = load_vocab(&p1).unwrap();
        save_vocab(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.len(), vocab.len());
    }

    #[test]
    fn load_truncated_file_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("broken.json");
        std::fs::write(&p, "{\"atoms\": [\"a\",").unwrap();
        match load_vocab(&p) {
            Err(Error::Parse { .. }) => {}
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn training_deterministic() {
        let mk = || {
            let corpus: Vec<Vec<LexToken>> = (0..50)
                .map(|i| lex(&format!("int value_{i} = compute_total(buffer_{i});")))
                .collect();
            train_bpe(corpus, BASE_VOCAB_SIZE + 100).unwrap()
        };
        let (a, b) = (mk(), mk());
        assert_eq!(vocab_to_json(&a), vocab_to_json(&b));
    }
}
