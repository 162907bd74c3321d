//! Caption corpus ingestion, the typed concept vocabulary and concept labels.
//!
//! Concepts are the `q` most frequent non-stop-word tokens of the corpus,
//! split into Object / Motion / Property buckets at a 7:2:1 ratio. Types come
//! from a lexicon file; tokens the lexicon does not cover fall back to a
//! suffix/word-list heuristic.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CvseError, Result};
use crate::numeric::Matrix;

/// One image with its reference captions (one JSON Lines object per image).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub id: String,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConceptType {
    Object,
    Motion,
    Property,
}

impl ConceptType {
    pub const ALL: [ConceptType; 3] = [ConceptType::Object, ConceptType::Motion, ConceptType::Property];

    pub fn as_str(self) -> &'static str {
        match self {
            ConceptType::Object => "Object",
            ConceptType::Motion => "Motion",
            ConceptType::Property => "Property",
        }
    }
}

impl fmt::Display for ConceptType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConceptType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "object" => Ok(ConceptType::Object),
            "motion" => Ok(ConceptType::Motion),
            "property" => Ok(ConceptType::Property),
            other => Err(format!("unknown concept type `{other}`")),
        }
    }
}

const STOP_WORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "but", "of", "on", "in", "at", "to", "for", "with", "by",
    "from", "up", "down", "into", "onto", "over", "under", "near", "next", "its", "it", "is",
    "are", "was", "were", "be", "been", "being", "has", "have", "had", "this", "that", "these",
    "those", "there", "their", "they", "them", "he", "she", "his", "her", "him", "who", "which",
    "while", "as", "some", "other", "each", "one", "two", "three", "very", "out", "off", "back",
    "front", "top", "side", "s", "t", "not", "no", "do", "does", "can", "will", "just", "than",
    "so", "if", "then", "about", "around", "through", "behind", "beside", "between", "another",
    "across", "along", "past", "inside", "outside", "together", "toward", "towards", "against",
    "above", "below", "upon", "where", "what", "all", "both", "few", "many", "several",
];

/// Closed adjective list used when the lexicon does not type a token.
const PROPERTY_WORDS: &[&str] = &[
    "red", "blue", "green", "yellow", "white", "black", "brown", "orange", "pink", "purple",
    "gray", "grey", "small", "large", "big", "little", "young", "old", "tall", "long", "short",
    "wooden", "empty", "full", "colorful", "dark", "bright", "open", "wet", "dry", "busy", "snowy",
];

pub fn is_stop_word(token: &str) -> bool {
    STOP_WORDS.contains(&token)
}

/// Type for a token the lexicon does not cover.
pub fn heuristic_type(token: &str) -> ConceptType {
    if token.len() > 4 && token.ends_with("ing") {
        ConceptType::Motion
    } else if PROPERTY_WORDS.contains(&token) {
        ConceptType::Property
    } else {
        ConceptType::Object
    }
}

/// Lowercases, turns every non-alphanumeric character into a separator and
/// splits on whitespace.
pub fn tokenize(caption: &str) -> Vec<String> {
    caption
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .to_lowercase()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

pub fn read_corpus(path: &Path) -> Result<Vec<CaptionRecord>> {
    let file = fs::File::open(path).map_err(|e| CvseError::io(path, e))?;
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CvseError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| CvseError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        };
        let record: CaptionRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if record.id.is_empty() {
            return Err(parse_err("empty image id".into()));
        }
        if record.captions.is_empty() {
            return Err(parse_err(format!("image `{}` has no captions", record.id)));
        }
        if !seen.insert(record.id.clone()) {
            return Err(parse_err(format!("duplicate image id `{}`", record.id)));
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(CvseError::Degenerate(format!("corpus {} is empty", path.display())));
    }
    Ok(records)
}

pub fn write_corpus(path: &Path, records: &[CaptionRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| CvseError::io(path, e))
}

/// `token<TAB>type` lines.
pub fn read_lexicon(path: &Path) -> Result<HashMap<String, ConceptType>> {
    let text = fs::read_to_string(path).map_err(|e| CvseError::io(path, e))?;
    let mut lexicon = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| CvseError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        };
        let mut fields = line.split('\t');
        let (Some(token), Some(kind), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(parse_err("expected `token<TAB>type`".into()));
        };
        let kind = kind.parse::<ConceptType>().map_err(parse_err)?;
        lexicon.insert(token.trim().to_lowercase(), kind);
    }
    Ok(lexicon)
}

pub fn write_lexicon(path: &Path, lexicon: &BTreeMap<String, ConceptType>) -> Result<()> {
    let mut out = String::new();
    for (token, kind) in lexicon {
        out.push_str(&format!("{token}\t{kind}\n"));
    }
    fs::write(path, out).map_err(|e| CvseError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub token: String,
    pub kind: ConceptType,
    pub frequency: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptVocabulary {
    entries: Vec<ConceptEntry>,
    index: HashMap<String, usize>,
}

/// Bucket sizes `(Object, Motion, Property)` for a vocabulary of size `q`.
pub fn bucket_sizes(q: usize) -> (usize, usize, usize) {
    let objects = (0.7 * q as f64).round() as usize;
    let motions = (0.2 * q as f64).round() as usize;
    (objects, motions, q - objects - motions)
}

impl ConceptVocabulary {
    pub fn from_entries(entries: Vec<ConceptEntry>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.token.clone(), i).is_some() {
                return Err(CvseError::Parameter(format!("duplicate concept token `{}`", e.token)));
            }
        }
        Ok(ConceptVocabulary { entries, index })
    }

    /// Picks the `q` most frequent typed tokens, 7:2:1 across types.
    ///
    /// Within a bucket tokens are ranked by frequency, ties broken
    /// lexicographically. The result lists Objects, then Motions, then
    /// Properties, each in rank order.
    pub fn build(
        corpus: &[CaptionRecord],
        lexicon: &HashMap<String, ConceptType>,
        q: usize,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(CvseError::Degenerate("empty corpus".into()));
        }
        if q < 10 {
            return Err(CvseError::Parameter(format!("vocabulary size q must be >= 10, got {q}")));
        }
        let mut freq: HashMap<String, u64> = HashMap::new();
        for record in corpus {
            for caption in &record.captions {
                for token in tokenize(caption) {
                    *freq.entry(token).or_default() += 1;
                }
            }
        }

        let mut buckets: BTreeMap<ConceptType, Vec<(String, u64)>> = BTreeMap::new();
        for (token, count) in freq {
            if is_stop_word(&token) || !token.chars().any(char::is_alphabetic) {
                continue;
            }
            let kind = lexicon.get(&token).copied().unwrap_or_else(|| heuristic_type(&token));
            buckets.entry(kind).or_default().push((token, count));
        }

        let (n_obj, n_mot, n_prop) = bucket_sizes(q);
        let mut entries = Vec::with_capacity(q);
        for (kind, needed) in [
            (ConceptType::Object, n_obj),
            (ConceptType::Motion, n_mot),
            (ConceptType::Property, n_prop),
        ] {
            let mut candidates = buckets.remove(&kind).unwrap_or_default();
            if candidates.len() < needed {
                return Err(CvseError::InsufficientVocabulary {
                    bucket: kind.as_str(),
                    needed,
                    available: candidates.len(),
                });
            }
            candidates.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            entries.extend(candidates.into_iter().take(needed).map(|(token, frequency)| ConceptEntry {
                token,
                kind,
                frequency,
            }));
        }
        Self::from_entries(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ConceptEntry] {
        &self.entries
    }

    pub fn token(&self, i: usize) -> &str {
        &self.entries[i].token
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn count_of(&self, kind: ConceptType) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).count()
    }

    /// `index<TAB>token<TAB>type<TAB>frequency` lines.
    pub fn to_tsv(&self) -> String {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| format!("{i}\t{}\t{}\t{}\n", e.token, e.kind, e.frequency))
            .collect()
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| CvseError::io(path, e))
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CvseError::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: String| CvseError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(parse_err("expected 4 tab-separated fields".into()));
            }
            let index: usize = fields[0].parse().map_err(|e| parse_err(format!("{e}")))?;
            if index != entries.len() {
                return Err(parse_err(format!("index {index} out of order")));
            }
            entries.push(ConceptEntry {
                token: fields[1].to_owned(),
                kind: fields[2].parse().map_err(parse_err)?,
                frequency: fields[3].parse().map_err(|e| parse_err(format!("{e}")))?,
            });
        }
        Self::from_entries(entries)
    }
}

/// Binary membership vector over the concept vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConceptLabel(Vec<bool>);

impl ConceptLabel {
    pub fn empty(q: usize) -> Self {
        ConceptLabel(vec![false; q])
    }

    pub fn from_bits(bits: &[u8]) -> Self {
        ConceptLabel(bits.iter().map(|&b| b != 0).collect())
    }

    /// Label whose bits are set for every vocabulary token found in `captions`.
    pub fn from_tokens<S: AsRef<str>>(captions: &[Vec<S>], vocab: &ConceptVocabulary) -> Self {
        let mut bits = vec![false; vocab.len()];
        for caption in captions {
            for token in caption {
                if let Some(i) = vocab.index_of(token.as_ref()) {
                    bits[i] = true;
                }
            }
        }
        ConceptLabel(bits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn support(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&i| self.0[i]).collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Elementwise OR.
    pub fn union_with(&mut self, other: &ConceptLabel) {
        for (a, &b) in self.0.iter_mut().zip(&other.0) {
            *a |= b;
        }
    }
}

/// Concept label over the union of a record's tokenised captions.
pub fn concept_label<S: AsRef<str>>(captions: &[Vec<S>], vocab: &ConceptVocabulary) -> ConceptLabel {
    ConceptLabel::from_tokens(captions, vocab)
}

/// Word vectors in the whitespace-delimited `token v1 … vD` text format.
#[derive(Debug, Clone)]
pub struct WordVectorTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl WordVectorTable {
    pub fn new(dim: usize) -> Self {
        WordVectorTable {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    pub fn insert(&mut self, token: &str, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(CvseError::shape("word vector", (1, self.dim), (1, vector.len())));
        }
        self.vectors.insert(token.to_owned(), vector);
        Ok(())
    }

    /// Parses a table whose lines must all carry `dim` values.
    pub fn load(path: &Path, dim: usize) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| CvseError::io(path, e))?;
        let mut table = WordVectorTable::new(dim);
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| CvseError::io(path, e))?;
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let parse_err = |msg: String| CvseError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg,
            };
            let values = parts
                .map(|p| p.parse::<f64>().map_err(|e| parse_err(format!("`{p}`: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != dim {
                return Err(parse_err(format!("expected {dim} values, found {}", values.len())));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(parse_err("non-finite value".into()));
            }
            table.vectors.insert(token.to_owned(), values);
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tokens: Vec<&String> = self.vectors.keys().collect();
        tokens.sort();
        let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(|e| CvseError::io(path, e))?);
        for t in tokens {
            write!(out, "{t}").map_err(|e| CvseError::io(path, e))?;
            for v in &self.vectors[t] {
                write!(out, " {v}").map_err(|e| CvseError::io(path, e))?;
            }
            writeln!(out).map_err(|e| CvseError::io(path, e))?;
        }
        out.flush().map_err(|e| CvseError::io(path, e))
    }

    /// Vector for `token`, or a Gaussian (σ = 0.1) fallback seeded by
    /// `(seed, token)` so reruns agree.
    pub fn vector_or_fallback(&self, token: &str, seed: u64) -> Vec<f64> {
        match self.get(token) {
            Some(v) => v.to_vec(),
            None => {
                log::warn!("no word vector for `{token}`; using seeded Gaussian fallback");
                fallback_vector(token, self.dim, seed)
            }
        }
    }

    /// Initial concept matrix `Y`: row `i` is the vector of concept `i`.
    pub fn concept_matrix(&self, vocab: &ConceptVocabulary, seed: u64) -> Matrix {
        let rows: Vec<Vec<f64>> = vocab
            .entries()
            .iter()
            .map(|e| self.vector_or_fallback(&e.token, seed))
            .collect();
        Matrix::stack(&rows).expect("all rows share the table dimension")
    }
}

pub(crate) fn fallback_vector(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(token.as_bytes()));
    Matrix::gaussian(1, dim, 0.1, &mut rng).into_data()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

/// Loads a word-vector file and builds the concept matrix in one go.
pub fn load_word_vectors(
    path: &Path,
    vocab: &ConceptVocabulary,
    dim: usize,
    seed: u64,
) -> Result<(WordVectorTable, Matrix)> {
    let table = WordVectorTable::load(path, dim)?;
    let y = table.concept_matrix(vocab, seed);
    Ok((table, y))
}
