//! Item and annotator input vectors: embedding files, signed feature hashing,
//! one-hot identity, and the sentence templates used to turn annotator
//! metadata into text for an external sentence encoder.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::corpus::{Annotator, Item};
use crate::error::{DiscoError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    EmbeddingFile,
    HashedBow,
    OneHot,
    MetadataEmbedding,
}

/// One vector per entity, indexed like the dataset's items or annotators.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    ids: Vec<String>,
    rows: Vec<Vec<f64>>,
    source: FeatureSource,
}

impl FeatureMatrix {
    pub fn new(
        dim: usize,
        ids: Vec<String>,
        rows: Vec<Vec<f64>>,
        source: FeatureSource,
    ) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(DiscoError::Features(format!(
                "{} ids but {} rows",
                ids.len(),
                rows.len()
            )));
        }
        for (id, row) in ids.iter().zip(&rows) {
            if row.len() != dim {
                return Err(DiscoError::Features(format!(
                    "vector for `{id}` has {} entries, expected {dim}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(DiscoError::Features(format!(
                    "vector for `{id}` is not finite"
                )));
            }
        }
        Ok(FeatureMatrix {
            dim,
            ids,
            rows,
            source,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, index: usize) -> &[f64] {
        &self.rows[index]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn source(&self) -> FeatureSource {
        self.source
    }

    pub fn with_source(mut self, source: FeatureSource) -> Self {
        self.source = source;
        self
    }

    /// Replace entity ids (e.g. annotator ids for a one-hot matrix).
    pub fn with_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.rows.len() {
            return Err(DiscoError::Features(format!(
                "{} ids for {} rows",
                ids.len(),
                self.rows.len()
            )));
        }
        self.ids = ids;
        Ok(self)
    }

    /// Reorder rows to follow `expected_ids`; every id must be present.
    pub fn select(&self, expected_ids: &[String]) -> Result<FeatureMatrix> {
        let index: HashMap<&str, usize> = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let mut rows = Vec::with_capacity(expected_ids.len());
        for id in expected_ids {
            let i = index
                .get(id.as_str())
                .ok_or_else(|| DiscoError::MissingId(id.clone()))?;
            rows.push(self.rows[*i].clone());
        }
        Ok(FeatureMatrix {
            dim: self.dim,
            ids: expected_ids.to_vec(),
            rows,
            source: self.source,
        })
    }

    /// Serialize in the `#dim` TSV layout.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("#dim {}\n", self.dim);
        for (id, row) in self.ids.iter().zip(&self.rows) {
            out.push_str(id);
            out.push('\t');
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                // shortest representation that parses back to the same bits
                let _ = write!(out, "{v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| DiscoError::io(path, e))
    }

    /// Parse every row of a TSV embedding file, in file order.
    pub fn parse_tsv(text: &str, source: FeatureSource) -> Result<FeatureMatrix> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| DiscoError::Features("empty embedding file".into()))?;
        let dim: usize = header
            .strip_prefix("#dim")
            .map(str::trim)
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| {
                DiscoError::Features(format!("bad header `{header}`, expected `#dim <D>`"))
            })?;
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        let mut seen = HashMap::new();
        for (lineno, line) in lines {
            let (id, body) = line.split_once('\t').ok_or_else(|| {
                DiscoError::Features(format!("line {}: missing tab after id", lineno + 1))
            })?;
            let row = body
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>().map_err(|_| {
                        DiscoError::Features(format!("line {}: bad number `{t}`", lineno + 1))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            if row.len() != dim {
                return Err(DiscoError::Features(format!(
                    "line {}: `{id}` has {} values, expected {dim}",
                    lineno + 1,
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(DiscoError::Features(format!(
                    "line {}: `{id}` has a non-finite value",
                    lineno + 1
                )));
            }
            if seen.insert(id.to_string(), ()).is_some() {
                return Err(DiscoError::Features(format!("id `{id}` appears twice")));
            }
            ids.push(id.to_string());
            rows.push(row);
        }
        FeatureMatrix::new(dim, ids, rows, source)
    }
}

/// Load an embedding file and order its rows by `expected_ids`.
pub fn load_embeddings(path: impl AsRef<Path>, expected_ids: &[String]) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DiscoError::io(path, e))?;
    FeatureMatrix::parse_tsv(&text, FeatureSource::EmbeddingFile)?.select(expected_ids)
}

/// Identity rows: entity `n` gets the basis vector `e_n`.
pub fn one_hot_annotators(n: usize) -> Result<FeatureMatrix> {
    if n == 0 {
        return Err(DiscoError::Config(
            "one-hot encoding needs at least one annotator".into(),
        ));
    }
    let rows = (0..n)
        .map(|i| {
            let mut r = vec![0.0; n];
            r[i] = 1.0;
            r
        })
        .collect();
    FeatureMatrix::new(
        n,
        (0..n).map(|i| i.to_string()).collect(),
        rows,
        FeatureSource::OneHot,
    )
}

// ---------------------------------------------------------------------------
// Metadata sentences

/// A sentence built from a subject and clauses with `{key}` placeholders.
/// Clauses whose keys are missing are dropped; the rest are joined as an
/// English list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetadataTemplate {
    pub subject: String,
    pub clauses: Vec<String>,
    /// Render metadata keys not mentioned by any clause as `has <key> <value>`.
    #[serde(default = "yes")]
    pub include_unlisted: bool,
    pub fallback: String,
}

fn yes() -> bool {
    true
}

impl Default for MetadataTemplate {
    fn default() -> Self {
        MetadataTemplate {
            subject: "The annotator".into(),
            clauses: vec![
                "is {age} years old".into(),
                "identifies as {gender}".into(),
                "is from {nationality}".into(),
                "has {education} education".into(),
            ],
            include_unlisted: true,
            fallback: "No annotator metadata is available.".into(),
        }
    }
}

impl MetadataTemplate {
    /// Parse `subject|clause|clause...`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut parts = spec.split('|').map(str::trim);
        let subject = parts.next().filter(|s| !s.is_empty()).ok_or_else(|| {
            DiscoError::Config("metadata template needs a subject before the first `|`".into())
        })?;
        let clauses: Vec<String> = parts.filter(|c| !c.is_empty()).map(String::from).collect();
        for c in &clauses {
            placeholders(c)?;
        }
        Ok(MetadataTemplate {
            subject: subject.to_string(),
            clauses,
            ..Default::default()
        })
    }

    fn keys(&self) -> Vec<String> {
        self.clauses
            .iter()
            .flat_map(|c| placeholders(c).unwrap_or_default())
            .collect()
    }
}

fn placeholders(clause: &str) -> Result<Vec<String>> {
    let mut keys = Vec::new();
    let mut rest = clause;
    while let Some(start) = rest.find('{') {
        let end = rest[start..]
            .find('}')
            .ok_or_else(|| DiscoError::Config(format!("unclosed placeholder in `{clause}`")))?;
        let key = &rest[start + 1..start + end];
        if key.is_empty() {
            return Err(DiscoError::Config(format!(
                "empty placeholder in `{clause}`"
            )));
        }
        keys.push(key.to_string());
        rest = &rest[start + end + 1..];
    }
    Ok(keys)
}

fn fill(clause: &str, metadata: &IndexMap<String, String>) -> Option<String> {
    let mut out = clause.to_string();
    for key in placeholders(clause).ok()? {
        let value = metadata.get(&key).filter(|v| !v.trim().is_empty())?;
        out = out.replace(&format!("{{{key}}}"), value.trim());
    }
    Some(out)
}

fn english_list(parts: &[String]) -> String {
    match parts {
        [] => String::new(),
        [one] => one.clone(),
        [a, b] => format!("{a} and {b}"),
        [init @ .., last] => format!("{}, and {last}", init.join(", ")),
    }
}

pub fn render_metadata_text(annotator: &Annotator, template: &MetadataTemplate) -> String {
    let mut clauses: Vec<String> = template
        .clauses
        .iter()
        .filter_map(|c| fill(c, &annotator.metadata))
        .collect();
    if template.include_unlisted {
        let listed = template.keys();
        let mut extra: Vec<(&String, &String)> = annotator
            .metadata
            .iter()
            .filter(|(k, v)| !listed.contains(k) && !v.trim().is_empty())
            .collect();
        extra.sort();
        clauses.extend(
            extra
                .into_iter()
                .map(|(k, v)| format!("has {k} {}", v.trim())),
        );
    }
    if clauses.is_empty() {
        return template.fallback.clone();
    }
    format!("{} {}.", template.subject, english_list(&clauses))
}

// ---------------------------------------------------------------------------
// Signed feature hashing

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const BUCKET_SEED: u64 = 0x5eed_0001;
const SIGN_SEED: u64 = 0x5eed_0002;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET ^ seed.wrapping_mul(FNV_PRIME);
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    // final avalanche so the low bits used for bucketing are well mixed
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^ (h >> 33)
}

/// Lowercased tokens split on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Hash tokens of every text field into `dim` signed buckets, weight by
/// field, then L2-normalize. Fields absent from `field_weights` get weight 1.
pub fn hashed_bow(
    items: &[Item],
    dim: usize,
    field_weights: &HashMap<String, f64>,
) -> Result<FeatureMatrix> {
    if dim < 16 {
        return Err(DiscoError::Config(format!(
            "hashed feature dim must be >= 16, got {dim}"
        )));
    }
    let rows = items
        .iter()
        .map(|item| {
            let mut v = vec![0.0; dim];
            for (field, text) in &item.text_fields {
                let w = field_weights.get(field).copied().unwrap_or(1.0);
                for tok in tokenize(text) {
                    let bucket = (fnv1a(BUCKET_SEED, tok.as_bytes()) % dim as u64) as usize;
                    let sign = if fnv1a(SIGN_SEED, tok.as_bytes()) >> 63 == 0 {
                        1.0
                    } else {
                        -1.0
                    };
                    v[bucket] += sign * w;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter_mut().for_each(|x| *x /= norm);
            }
            v
        })
        .collect();
    FeatureMatrix::new(
        dim,
        items.iter().map(|i| i.item_id.clone()).collect(),
        rows,
        FeatureSource::HashedBow,
    )
}
