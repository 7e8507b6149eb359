//! Feature schemas, labeled samples, and the interaction-log pipeline:
//! ingestion with rating binarization, leak-free behavior histories, and
//! deterministic chronological splits.

use std::collections::HashMap;
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KserError, Result};

/// Reserved token used to pad behavior histories to fixed length. It is never
/// part of any vocabulary and embeds to the zero vector.
pub const PAD_TOKEN: &str = "<pad>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Movielens,
    AmazonBook,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetKind::Movielens => write!(f, "movielens"),
            DatasetKind::AmazonBook => write!(f, "amazon_book"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Categorical,
    ItemSequence,
}

/// Token-to-index mapping frozen at construction. Index `len()` is the
/// reserved out-of-vocabulary slot and `len() + 1` the pad slot.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Builds a vocabulary in first-seen order, skipping duplicates.
    pub fn build<'a>(tokens: impl Iterator<Item = &'a str>) -> Self {
        let mut out = Vocab::from(Vec::new());
        for t in tokens {
            if !out.index.contains_key(t) {
                out.index.insert(t.to_string(), out.tokens.len() as u32);
                out.tokens.push(t.to_string());
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn oov_index(&self) -> usize {
        self.tokens.len()
    }

    pub fn pad_index(&self) -> usize {
        self.tokens.len() + 1
    }

    /// Rows an embedding table over this vocabulary needs (tokens + OOV + pad).
    pub fn table_rows(&self) -> usize {
        self.tokens.len() + 2
    }

    /// Maps a token to its index; unknown tokens land on the OOV slot and the
    /// pad token on the pad slot.
    pub fn encode(&self, token: &str) -> usize {
        if token == PAD_TOKEN {
            return self.pad_index();
        }
        self.index
            .get(token)
            .map(|i| *i as usize)
            .unwrap_or_else(|| self.oov_index())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    pub vocab: Vocab,
    pub embed_width: usize,
}

/// The recommender-side feature layout: named fields, their vocabularies and
/// embedding widths, with exactly one behavior-history field.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureSchema {
    fields: Vec<FieldSpec>,
}

impl FeatureSchema {
    pub fn new(fields: Vec<FieldSpec>) -> Result<Self> {
        let mut names = std::collections::HashSet::new();
        let mut seq_count = 0;
        for f in &fields {
            if !names.insert(f.name.clone()) {
                return Err(KserError::Schema(format!("duplicate field name '{}'", f.name)));
            }
            if f.vocab.is_empty() {
                return Err(KserError::Schema(format!(
                    "field '{}' has an empty vocabulary",
                    f.name
                )));
            }
            if f.embed_width == 0 {
                return Err(KserError::Schema(format!(
                    "field '{}' has zero embedding width",
                    f.name
                )));
            }
            if f.kind == FieldKind::ItemSequence {
                seq_count += 1;
            }
        }
        if seq_count != 1 {
            return Err(KserError::Schema(format!(
                "expected exactly one item-sequence field, found {seq_count}"
            )));
        }
        Ok(Self { fields })
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.fields
    }

    pub fn field(&self, name: &str) -> Option<(usize, &FieldSpec)> {
        self.fields.iter().enumerate().find(|(_, f)| f.name == name)
    }

    pub fn sequence_field(&self) -> (usize, &FieldSpec) {
        self.fields
            .iter()
            .enumerate()
            .find(|(_, f)| f.kind == FieldKind::ItemSequence)
            .expect("schema invariant: one sequence field")
    }

    /// Total feature-embedding width, with the sequence field counted once
    /// after pooling.
    pub fn total_embed_width(&self) -> usize {
        self.fields.iter().map(|f| f.embed_width).sum()
    }

    /// Returns a copy with every field's embedding width replaced.
    pub fn with_field_width(&self, width: usize) -> Result<Self> {
        let fields = self
            .fields
            .iter()
            .map(|f| FieldSpec {
                embed_width: width,
                ..f.clone()
            })
            .collect();
        Self::new(fields)
    }

    /// Hex SHA-256 over the canonical schema description (names, kinds,
    /// vocabularies, widths). Checkpoints embed this to verify compatibility.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for f in &self.fields {
            hasher.update(f.name.as_bytes());
            hasher.update([0u8]);
            hasher.update(match f.kind {
                FieldKind::Categorical => [1u8],
                FieldKind::ItemSequence => [2u8],
            });
            hasher.update((f.embed_width as u64).to_le_bytes());
            for t in f.vocab.tokens() {
                hasher.update(t.as_bytes());
                hasher.update([0u8]);
            }
            hasher.update([0xffu8]);
        }
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One labeled interaction. `context` holds the extra categorical fields in
/// header order; `history` is filled by [`build_history`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub user_id: String,
    pub item_id: String,
    pub history: Vec<String>,
    pub context: Vec<String>,
    pub label: u8,
    pub timestamp: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitTag::Train => write!(f, "train"),
            SplitTag::Val => write!(f, "val"),
            SplitTag::Test => write!(f, "test"),
        }
    }
}

/// An ordered collection of samples plus the names of the extra context
/// fields they carry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
    pub context_fields: Vec<String>,
    pub split: Option<SplitTag>,
}

impl SampleSet {
    pub fn new(samples: Vec<Sample>, context_fields: Vec<String>) -> Self {
        Self {
            samples,
            context_fields,
            split: None,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Builds the feature schema from a sample set: user, item, and context
/// vocabularies in first-seen order plus the behavior-history field, all at
/// one embedding width. Vocabularies are normally frozen on the train split.
pub fn schema_from(set: &SampleSet, field_width: usize) -> Result<FeatureSchema> {
    if set.is_empty() {
        return Err(KserError::Schema(
            "cannot build a schema from an empty sample set".into(),
        ));
    }
    let mut fields = Vec::new();
    fields.push(FieldSpec {
        name: "user_id".into(),
        kind: FieldKind::Categorical,
        vocab: Vocab::build(set.samples.iter().map(|s| s.user_id.as_str())),
        embed_width: field_width,
    });
    let item_vocab = Vocab::build(set.samples.iter().map(|s| s.item_id.as_str()));
    fields.push(FieldSpec {
        name: "item_id".into(),
        kind: FieldKind::Categorical,
        vocab: item_vocab.clone(),
        embed_width: field_width,
    });
    for (ci, cname) in set.context_fields.iter().enumerate() {
        fields.push(FieldSpec {
            name: cname.clone(),
            kind: FieldKind::Categorical,
            vocab: Vocab::build(set.samples.iter().map(|s| s.context[ci].as_str())),
            embed_width: field_width,
        });
    }
    fields.push(FieldSpec {
        name: "history".into(),
        kind: FieldKind::ItemSequence,
        vocab: item_vocab,
        embed_width: field_width,
    });
    FeatureSchema::new(fields)
}

/// Maps a raw rating to the binary label, using a strict `> 4` threshold for
/// MovieLens and `>= 5` for Amazon-Book.
pub fn binarize_rating(rating: f64, kind: DatasetKind) -> Result<u8> {
    if !rating.is_finite() || !(1.0..=5.0).contains(&rating) {
        return Err(KserError::RejectedInput(format!(
            "rating {rating} outside the [1, 5] scale for {kind}"
        )));
    }
    Ok(match kind {
        DatasetKind::Movielens => u8::from(rating > 4.0),
        DatasetKind::AmazonBook => u8::from(rating >= 5.0),
    })
}

const BASE_COLUMNS: [&str; 4] = ["user_id", "item_id", "rating", "timestamp"];

/// Loads an interaction TSV (`user_id  item_id  rating  timestamp [extras]`)
/// into a sample set with binarized labels, preserving row order.
pub fn load_interactions(path: impl AsRef<Path>, kind: DatasetKind) -> Result<SampleSet> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| KserError::io(path, e))?;
    let mut lines = std::io::BufReader::new(file).lines();

    let header = match lines.next() {
        Some(h) => h.map_err(|e| KserError::io(path, e))?,
        None => {
            eprintln!("warning: {} is empty, loaded zero samples", path.display());
            return Ok(SampleSet::new(Vec::new(), Vec::new()));
        }
    };
    let cols: Vec<&str> = header.trim_end_matches(['\r', '\n']).split('\t').collect();
    if cols.len() < BASE_COLUMNS.len() || cols[..4] != BASE_COLUMNS {
        return Err(KserError::DataFormat {
            path: path.into(),
            msg: format!(
                "header must start with '{}', got '{}'",
                BASE_COLUMNS.join("\\t"),
                header
            ),
        });
    }
    let context_fields: Vec<String> = cols[4..].iter().map(|s| s.to_string()).collect();

    let mut samples = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| KserError::io(path, e))?;
        let line_number = lineno + 2; // 1-based, after the header
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != cols.len() {
            return Err(KserError::MalformedRow {
                path: path.into(),
                line: line_number,
                msg: format!("expected {} columns, got {}", cols.len(), parts.len()),
            });
        }
        let rating: f64 = parts[2].parse().map_err(|_| KserError::MalformedRow {
            path: path.into(),
            line: line_number,
            msg: format!("rating '{}' is not numeric", parts[2]),
        })?;
        let timestamp: i64 = parts[3].parse().map_err(|_| KserError::MalformedRow {
            path: path.into(),
            line: line_number,
            msg: format!("timestamp '{}' is not an integer", parts[3]),
        })?;
        let label = binarize_rating(rating, kind).map_err(|e| KserError::MalformedRow {
            path: path.into(),
            line: line_number,
            msg: e.to_string(),
        })?;
        samples.push(Sample {
            id: format!("s{}", samples.len()),
            user_id: parts[0].to_string(),
            item_id: parts[1].to_string(),
            history: Vec::new(),
            context: parts[4..].iter().map(|s| s.to_string()).collect(),
            label,
            timestamp,
        });
    }
    if samples.is_empty() {
        eprintln!("warning: {} contains no data rows", path.display());
    }
    Ok(SampleSet::new(samples, context_fields))
}

/// Splits a set globally by timestamp (stable input-order tiebreak) using a
/// floor-then-remainder-to-train size rule.
pub fn chronological_split(
    set: SampleSet,
    ratios: (f64, f64, f64),
) -> Result<(SampleSet, SampleSet, SampleSet)> {
    let (rt, rv, rs) = ratios;
    if rt <= 0.0 || rv <= 0.0 || rs <= 0.0 {
        return Err(KserError::RejectedInput(format!(
            "split ratios must all be positive, got ({rt}, {rv}, {rs})"
        )));
    }
    if ((rt + rv + rs) - 1.0).abs() > 1e-9 {
        return Err(KserError::RejectedInput(format!(
            "split ratios must sum to 1, got {}",
            rt + rv + rs
        )));
    }
    let n = set.len();
    if n < 3 {
        return Err(KserError::RejectedInput(format!(
            "need at least 3 samples to split, got {n}"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (set.samples[i].timestamp, i));

    let n_val = (n as f64 * rv).floor() as usize;
    let n_test = (n as f64 * rs).floor() as usize;
    let n_train = n - n_val - n_test;

    let pick = |range: std::ops::Range<usize>, tag: SplitTag| SampleSet {
        samples: order[range].iter().map(|&i| set.samples[i].clone()).collect(),
        context_fields: set.context_fields.clone(),
        split: Some(tag),
    };
    let train = pick(0..n_train, SplitTag::Train);
    let val = pick(n_train..n_train + n_val, SplitTag::Val);
    let test = pick(n_train + n_val..n, SplitTag::Test);
    Ok((train, val, test))
}

/// Fills every sample's behavior history with that user's most recent
/// `h_max` positively labeled item ids strictly before its timestamp,
/// left-padded with [`PAD_TOKEN`] to fixed length.
pub fn build_history(set: SampleSet, h_max: usize) -> Result<SampleSet> {
    if h_max == 0 {
        return Err(KserError::RejectedInput(
            "history length must be at least 1".into(),
        ));
    }
    let mut by_user: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, s) in set.samples.iter().enumerate() {
        by_user.entry(s.user_id.as_str()).or_default().push(i);
    }

    let mut histories: Vec<Vec<String>> = vec![Vec::new(); set.len()];
    for indices in by_user.values() {
        let mut ordered = indices.clone();
        ordered.sort_by_key(|&i| (set.samples[i].timestamp, i));
        let mut positives: Vec<usize> = Vec::new(); // indices of past positive interactions
        let mut q = 0;
        for &i in &ordered {
            let now = set.samples[i].timestamp;
            while q < ordered.len() && set.samples[ordered[q]].timestamp < now {
                if set.samples[ordered[q]].label == 1 {
                    positives.push(ordered[q]);
                }
                q += 1;
            }
            let take = positives.len().min(h_max);
            let recent = &positives[positives.len() - take..];
            let mut hist = vec![PAD_TOKEN.to_string(); h_max - take];
            hist.extend(recent.iter().map(|&p| set.samples[p].item_id.clone()));
            histories[i] = hist;
        }
    }

    let samples = set
        .samples
        .into_iter()
        .zip(histories)
        .map(|(mut s, h)| {
            s.history = h;
            s
        })
        .collect();
    Ok(SampleSet {
        samples,
        context_fields: set.context_fields,
        split: set.split,
    })
}
