//! Tokenization, POS classification via a closed lexicon, and the
//! object-by-predicate co-occurrence table with its decision rule.
//!
//! The synthetic corpus controls its own vocabulary, so a closed lexicon
//! replaces a statistical POS tagger and keeps every test deterministic.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = usize;

/// Reserved id for unknown tokens; ids for known tokens start at 1.
pub const UNK_ID: TokenId = 0;
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Error)]
pub enum TextError {
    #[error("lexicon error: {0}")]
    Lexicon(String),
    #[error("table error: {0}")]
    Table(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Part-of-speech class in the closed lexicon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PosClass {
    Noun,
    Predicate,
    Other,
}

impl fmt::Display for PosClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PosClass::Noun => write!(f, "NOUN"),
            PosClass::Predicate => write!(f, "PREDICATE"),
            PosClass::Other => write!(f, "OTHER"),
        }
    }
}

impl PosClass {
    fn parse(s: &str) -> Result<Self, TextError> {
        match s {
            "NOUN" => Ok(PosClass::Noun),
            "PREDICATE" => Ok(PosClass::Predicate),
            "OTHER" => Ok(PosClass::Other),
            other => Err(TextError::Lexicon(format!("unknown POS class {other:?}"))),
        }
    }
}

/// Closed token -> (id, class) map. Ids are contiguous from 0 with id 0
/// reserved for the unknown token, which always classifies as OTHER.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    tokens: Vec<String>,
    classes: Vec<PosClass>,
    index: HashMap<String, TokenId>,
}

impl Lexicon {
    pub fn new() -> Self {
        let mut lex = Lexicon { tokens: Vec::new(), classes: Vec::new(), index: HashMap::new() };
        lex.tokens.push(UNK_TOKEN.to_string());
        lex.classes.push(PosClass::Other);
        lex.index.insert(UNK_TOKEN.to_string(), UNK_ID);
        lex
    }

    /// Insert a token, returning its id. Re-inserting an existing token with
    /// the same class is a no-op; a class conflict is an error.
    pub fn insert(&mut self, token: &str, class: PosClass) -> Result<TokenId, TextError> {
        if let Some(&id) = self.index.get(token) {
            if self.classes[id] != class {
                return Err(TextError::Lexicon(format!(
                    "token {token:?} already registered as {}",
                    self.classes[id]
                )));
            }
            return Ok(id);
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.classes.push(class);
        self.index.insert(token.to_string(), id);
        Ok(id)
    }

    /// Id for a token; unknown tokens map to [`UNK_ID`].
    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn class_of(&self, id: TokenId) -> PosClass {
        self.classes[id]
    }

    /// Number of ids, unknown token included. Embedding tables size to this.
    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    /// Entries in id order, unknown token excluded.
    pub fn entries(&self) -> impl Iterator<Item = (TokenId, &str, PosClass)> {
        self.tokens
            .iter()
            .zip(&self.classes)
            .enumerate()
            .skip(1)
            .map(|(id, (t, c))| (id, t.as_str(), *c))
    }

    /// Write as line-oriented UTF-8 `token<TAB>class`.
    pub fn write_file(&self, path: &Path) -> Result<(), TextError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (_, token, class) in self.entries() {
            writeln!(f, "{token}\t{class}")?;
        }
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self, TextError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lex = Lexicon::new();
        for (ln, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (token, class) = line.split_once('\t').ok_or_else(|| {
                TextError::Lexicon(format!("line {}: expected token<TAB>class", ln + 1))
            })?;
            lex.insert(token, PosClass::parse(class.trim())?)?;
        }
        Ok(lex)
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::new()
    }
}

/// Lowercase, split on any non-alphanumeric character. Deterministic;
/// empty text yields an empty sequence.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(|s| s.to_string())
        .collect()
}

/// Order-preserving subsequence of tokens whose lexicon class matches.
pub fn filter_pos(tokens: &[TokenId], lexicon: &Lexicon, class: PosClass) -> Vec<TokenId> {
    tokens
        .iter()
        .copied()
        .filter(|id| lexicon.class_of(*id) == class)
        .collect()
}

/// A query with its full, noun-only and predicate-only token views.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryText {
    pub raw: String,
    /// Full token id sequence.
    pub tokens: Vec<TokenId>,
    /// Noun view: order-preserving subsequence of `tokens`.
    pub nouns: Vec<TokenId>,
    /// Predicate view: order-preserving subsequence of `tokens`.
    pub predicates: Vec<TokenId>,
}

impl QueryText {
    pub fn new(raw: &str, lexicon: &Lexicon) -> Self {
        let tokens: Vec<TokenId> = tokenize(raw).iter().map(|t| lexicon.id(t)).collect();
        let nouns = filter_pos(&tokens, lexicon, PosClass::Noun);
        let predicates = filter_pos(&tokens, lexicon, PosClass::Predicate);
        QueryText { raw: raw.to_string(), tokens, nouns, predicates }
    }
}

/// How a query contributes to the co-occurrence counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum CoocCountMode {
    /// A query adds at most 1 per (object, predicate) pair.
    #[default]
    QueryPresence,
    /// A query adds (object occurrences) x (predicate occurrences).
    TokenFrequency,
}

/// K x K object-by-predicate count table over training queries. Rows hold
/// objects (top-K frequent nouns), columns predicates, both in rank order
/// (frequency descending, ties broken by token order).
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceTable {
    pub objects: Vec<TokenId>,
    pub predicates: Vec<TokenId>,
    pub counts: Vec<Vec<u64>>,
    pub requested_k: usize,
    object_row: HashMap<TokenId, usize>,
    predicate_col: HashMap<TokenId, usize>,
}

impl CooccurrenceTable {
    pub fn object_row(&self, object: TokenId) -> Option<usize> {
        self.object_row.get(&object).copied()
    }

    pub fn count(&self, object: TokenId, predicate: TokenId) -> u64 {
        match (self.object_row.get(&object), self.predicate_col.get(&predicate)) {
            (Some(r), Some(c)) => self.counts[*r][*c],
            _ => 0,
        }
    }

    /// True when fewer than the requested K distinct nouns or predicates
    /// existed; callers should warn.
    pub fn shrunk(&self) -> bool {
        self.objects.len() < self.requested_k || self.predicates.len() < self.requested_k
    }

    /// Export as CSV: header row = predicate tokens, first column = objects.
    pub fn write_csv(&self, lexicon: &Lexicon, path: &Path) -> Result<(), TextError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "object")?;
        for p in &self.predicates {
            write!(f, ",{}", lexicon.token(*p))?;
        }
        writeln!(f)?;
        for (r, o) in self.objects.iter().enumerate() {
            write!(f, "{}", lexicon.token(*o))?;
            for c in 0..self.predicates.len() {
                write!(f, ",{}", self.counts[r][c])?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Count corpus frequencies and fill the table. Top-K selection ranks by
/// raw token frequency with lexicographic tie-breaking.
pub fn build_cooc_table(
    queries: &[QueryText],
    lexicon: &Lexicon,
    k: usize,
    mode: CoocCountMode,
) -> Result<CooccurrenceTable, TextError> {
    if k == 0 {
        return Err(TextError::Table("K must be >= 1".into()));
    }
    if queries.is_empty() {
        return Err(TextError::Table("cannot build a table from zero queries".into()));
    }

    let mut noun_freq: HashMap<TokenId, u64> = HashMap::new();
    let mut pred_freq: HashMap<TokenId, u64> = HashMap::new();
    for q in queries {
        for t in &q.nouns {
            *noun_freq.entry(*t).or_default() += 1;
        }
        for t in &q.predicates {
            *pred_freq.entry(*t).or_default() += 1;
        }
    }

    let top = |freq: &HashMap<TokenId, u64>| -> Vec<TokenId> {
        let mut items: Vec<(TokenId, u64)> = freq.iter().map(|(t, c)| (*t, *c)).collect();
        items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| lexicon.token(a.0).cmp(lexicon.token(b.0))));
        items.into_iter().take(k).map(|(t, _)| t).collect()
    };
    let objects = top(&noun_freq);
    let predicates = top(&pred_freq);

    let object_row: HashMap<TokenId, usize> =
        objects.iter().enumerate().map(|(i, t)| (*t, i)).collect();
    let predicate_col: HashMap<TokenId, usize> =
        predicates.iter().enumerate().map(|(i, t)| (*t, i)).collect();

    let mut counts = vec![vec![0u64; predicates.len()]; objects.len()];
    for q in queries {
        match mode {
            CoocCountMode::QueryPresence => {
                let mut seen: Vec<(usize, usize)> = Vec::new();
                for o in &q.nouns {
                    let Some(&r) = object_row.get(o) else { continue };
                    for p in &q.predicates {
                        let Some(&c) = predicate_col.get(p) else { continue };
                        if !seen.contains(&(r, c)) {
                            seen.push((r, c));
                            counts[r][c] += 1;
                        }
                    }
                }
            }
            CoocCountMode::TokenFrequency => {
                for o in &q.nouns {
                    let Some(&r) = object_row.get(o) else { continue };
                    for p in &q.predicates {
                        let Some(&c) = predicate_col.get(p) else { continue };
                        counts[r][c] += 1;
                    }
                }
            }
        }
    }

    Ok(CooccurrenceTable { objects, predicates, counts, requested_k: k, object_row, predicate_col })
}

/// The n predicates with the highest counts for an object, ties broken by
/// token order, zero-count entries excluded. Unknown objects yield an empty
/// list.
pub fn top_predicates(table: &CooccurrenceTable, object: TokenId, n: usize, lexicon: &Lexicon) -> Vec<TokenId> {
    let Some(row) = table.object_row(object) else {
        return Vec::new();
    };
    let mut items: Vec<(TokenId, u64)> = table
        .predicates
        .iter()
        .enumerate()
        .filter_map(|(c, p)| {
            let count = table.counts[row][c];
            (count > 0).then_some((*p, count))
        })
        .collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| lexicon.token(a.0).cmp(lexicon.token(b.0))));
    items.into_iter().take(n).map(|(t, _)| t).collect()
}

/// Whether the biased model's retrieval should count as a positive or a
/// negative in the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Positive,
    Negative,
}

/// Table-rule decision for one query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoocDecision {
    pub branch: Branch,
    /// Set when the query has no noun view; such samples skip the biased
    /// model entirely.
    pub degenerate: bool,
}

/// POSITIVE iff some object in the query's noun view has one of the query's
/// predicates among its top-n table predicates (union over objects).
pub fn decide_cooc(
    query: &QueryText,
    table: &CooccurrenceTable,
    n: usize,
    lexicon: &Lexicon,
) -> CoocDecision {
    if query.nouns.is_empty() {
        return CoocDecision { branch: Branch::Negative, degenerate: true };
    }
    for o in &query.nouns {
        let top = top_predicates(table, *o, n, lexicon);
        if query.predicates.iter().any(|p| top.contains(p)) {
            return CoocDecision { branch: Branch::Positive, degenerate: false };
        }
    }
    CoocDecision { branch: Branch::Negative, degenerate: false }
}
