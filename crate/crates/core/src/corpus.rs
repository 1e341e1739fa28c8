//! Annotation corpora: label spaces, items, annotators and the sparse label
//! matrix, plus the empirical item and annotator histograms derived from it.
//!
//! The on-disk format is a single JSON object:
//!
//! ```json
//! {
//!   "label_space": {"labels": ["1", "2"], "values": [1, 2], "ordinal": true},
//!   "annotators": {"ann0": {"age": "25"}},
//!   "items": {
//!     "it0": {"text": {"post": "..."}, "split": "train", "annotations": {"ann0": "2"}}
//!   }
//! }
//! ```
//!
//! An annotation value of `null` marks a requested (item, annotator) pair whose
//! label is unknown, which is how test items ask for perspectivist predictions.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::marker::PhantomData;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::error::{DiscoError, Result};

/// Ordered label set with a numeric value per label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSpace {
    labels: Vec<String>,
    values: Vec<f64>,
    ordinal: bool,
}

impl LabelSpace {
    pub fn new(labels: Vec<String>, values: Vec<f64>, ordinal: bool) -> Result<Self> {
        if labels.len() < 2 {
            return Err(DiscoError::LabelSpace(format!(
                "need at least 2 labels, got {}",
                labels.len()
            )));
        }
        if values.len() != labels.len() {
            return Err(DiscoError::LabelSpace(format!(
                "{} labels but {} values",
                labels.len(),
                values.len()
            )));
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(DiscoError::LabelSpace(format!("label `{l}` is repeated")));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DiscoError::LabelSpace("label values must be finite".into()));
        }
        if ordinal && values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(DiscoError::LabelSpace(
                "ordinal label values must be strictly increasing".into(),
            ));
        }
        Ok(LabelSpace {
            labels,
            values,
            ordinal,
        })
    }

    /// Non-ordinal space with values `0..C`.
    pub fn categorical<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let values = (0..labels.len()).map(|i| i as f64).collect();
        Self::new(labels, values, false)
    }

    /// Ordinal space over consecutive integers `lo..=hi`, labels rendered as the integers.
    pub fn integer_scale(lo: i64, hi: i64) -> Result<Self> {
        let labels = (lo..=hi).map(|v| v.to_string()).collect();
        let values = (lo..=hi).map(|v| v as f64).collect();
        Self::new(labels, values, true)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, k: usize) -> f64 {
        self.values[k]
    }

    pub fn label(&self, k: usize) -> &str {
        &self.labels[k]
    }

    pub fn is_ordinal(&self) -> bool {
        self.ordinal
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// `max value − min value`.
    pub fn value_range(&self) -> f64 {
        let max = self
            .values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    }

    pub(crate) fn require_ordinal(&self, what: &'static str) -> Result<()> {
        if self.ordinal {
            Ok(())
        } else {
            Err(DiscoError::NotOrdinal(what))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = DiscoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(DiscoError::UnknownSplit(other.to_string())),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub item_id: String,
    pub text_fields: IndexMap<String, String>,
    pub split: Split,
}

impl Item {
    /// All text fields joined by a single space, in field order.
    pub fn joined_text(&self) -> String {
        self.text_fields
            .values()
            .map(String::as_str)
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Annotator {
    pub annotator_id: String,
    pub index: usize,
    pub metadata: IndexMap<String, String>,
}

/// One observed entry of the label matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Record {
    pub item: usize,
    pub annotator: usize,
    pub label: usize,
}

/// Empirical label distribution; `probs` is all zeros when `support_count == 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub probs: Vec<f64>,
    pub support_count: usize,
}

impl Histogram {
    pub fn from_counts(counts: &[usize]) -> Self {
        let total: usize = counts.iter().sum();
        let probs = if total == 0 {
            vec![0.0; counts.len()]
        } else {
            counts.iter().map(|&c| c as f64 / total as f64).collect()
        };
        Histogram {
            probs,
            support_count: total,
        }
    }

    /// False for empty support, whose probabilities are undefined.
    pub fn is_valid(&self) -> bool {
        self.support_count > 0
    }

    /// Largest probability (the modal label probability).
    pub fn modal_probability(&self) -> f64 {
        self.probs.iter().copied().fold(0.0, f64::max)
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }
}

/// Options that override what the file declares.
#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    pub label_space: Option<LabelSpace>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationDataset {
    label_space: LabelSpace,
    items: Vec<Item>,
    annotators: Vec<Annotator>,
    records: Vec<Record>,
    /// Pairs that ask for a prediction but carry no gold label.
    requests: Vec<(usize, usize)>,
}

impl AnnotationDataset {
    /// Build and validate a dataset from already-indexed parts.
    pub fn new(
        label_space: LabelSpace,
        items: Vec<Item>,
        annotators: Vec<Annotator>,
        records: Vec<Record>,
        requests: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let ds = AnnotationDataset {
            label_space,
            items,
            annotators,
            records,
            requests,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(DiscoError::Dataset("dataset has no items".into()));
        }
        let mut ids = HashSet::new();
        for item in &self.items {
            if !ids.insert(item.item_id.as_str()) {
                return Err(DiscoError::Dataset(format!(
                    "item id `{}` is repeated",
                    item.item_id
                )));
            }
            if item.text_fields.values().all(|t| t.trim().is_empty()) {
                return Err(DiscoError::Dataset(format!(
                    "item `{}` has no non-empty text field",
                    item.item_id
                )));
            }
        }
        let mut ids = HashSet::new();
        for (n, a) in self.annotators.iter().enumerate() {
            if a.index != n {
                return Err(DiscoError::Dataset(format!(
                    "annotator `{}` has index {} at position {n}",
                    a.annotator_id, a.index
                )));
            }
            if !ids.insert(a.annotator_id.as_str()) {
                return Err(DiscoError::Dataset(format!(
                    "annotator id `{}` is repeated",
                    a.annotator_id
                )));
            }
        }
        let (m_total, n_total, c) = (
            self.items.len(),
            self.annotators.len(),
            self.label_space.len(),
        );
        let mut pairs = HashSet::new();
        let pair_iter = self
            .records
            .iter()
            .map(|r| (r.item, r.annotator))
            .chain(self.requests.iter().copied());
        for (m, n) in pair_iter {
            if m >= m_total || n >= n_total {
                return Err(DiscoError::Dataset(format!(
                    "record ({m}, {n}) is outside {m_total} items × {n_total} annotators"
                )));
            }
            if !pairs.insert((m, n)) {
                return Err(DiscoError::DuplicateRecord {
                    item: self.items[m].item_id.clone(),
                    annotator: self.annotators[n].annotator_id.clone(),
                });
            }
        }
        if let Some(r) = self.records.iter().find(|r| r.label >= c) {
            return Err(DiscoError::Dataset(format!(
                "label index {} is outside the {c}-label space",
                r.label
            )));
        }
        let mut support = vec![0usize; m_total];
        for r in &self.records {
            support[r.item] += 1;
        }
        if let Some(m) =
            (0..m_total).find(|&m| self.items[m].split == Split::Train && support[m] == 0)
        {
            return Err(DiscoError::Dataset(format!(
                "training item `{}` has no annotations",
                self.items[m].item_id
            )));
        }
        Ok(())
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.label_space
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn annotators(&self) -> &[Annotator] {
        &self.annotators
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn requests(&self) -> &[(usize, usize)] {
        &self.requests
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_annotators(&self) -> usize {
        self.annotators.len()
    }

    pub fn num_classes(&self) -> usize {
        self.label_space.len()
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.items.iter().position(|i| i.item_id == id)
    }

    pub fn annotator_index(&self, id: &str) -> Option<usize> {
        self.annotators.iter().position(|a| a.annotator_id == id)
    }

    pub fn item_histogram(&self, m: usize) -> Histogram {
        assert!(m < self.items.len(), "item index {m} out of range");
        let mut counts = vec![0usize; self.num_classes()];
        for r in self.records.iter().filter(|r| r.item == m) {
            counts[r.label] += 1;
        }
        Histogram::from_counts(&counts)
    }

    pub fn annotator_histogram(&self, n: usize) -> Histogram {
        assert!(
            n < self.annotators.len(),
            "annotator index {n} out of range"
        );
        let mut counts = vec![0usize; self.num_classes()];
        for r in self.records.iter().filter(|r| r.annotator == n) {
            counts[r.label] += 1;
        }
        Histogram::from_counts(&counts)
    }

    /// All item histograms in one pass over the records.
    pub fn item_histograms(&self) -> Vec<Histogram> {
        let c = self.num_classes();
        let mut counts = vec![vec![0usize; c]; self.items.len()];
        for r in &self.records {
            counts[r.item][r.label] += 1;
        }
        counts.iter().map(|cs| Histogram::from_counts(cs)).collect()
    }

    /// All annotator histograms in one pass over the records.
    pub fn annotator_histograms(&self) -> Vec<Histogram> {
        let c = self.num_classes();
        let mut counts = vec![vec![0usize; c]; self.annotators.len()];
        for r in &self.records {
            counts[r.annotator][r.label] += 1;
        }
        counts.iter().map(|cs| Histogram::from_counts(cs)).collect()
    }

    /// Record indices grouped by item.
    pub fn records_by_item(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.items.len()];
        for (i, r) in self.records.iter().enumerate() {
            out[r.item].push(i);
        }
        out
    }

    /// Items of one split. Annotators keep their global indices so feature
    /// matrices and model parameters stay aligned across views.
    pub fn split_view(&self, split: Split) -> AnnotationDataset {
        self.filter_items(|item| item.split == split)
    }

    /// Convenience for string split names.
    pub fn split_view_named(&self, split: &str) -> Result<AnnotationDataset> {
        Ok(self.split_view(split.parse()?))
    }

    pub(crate) fn filter_items(&self, keep: impl Fn(&Item) -> bool) -> AnnotationDataset {
        let mut remap = vec![None; self.items.len()];
        let mut items = Vec::new();
        for (m, item) in self.items.iter().enumerate() {
            if keep(item) {
                remap[m] = Some(items.len());
                items.push(item.clone());
            }
        }
        let records = self
            .records
            .iter()
            .filter_map(|r| remap[r.item].map(|m| Record { item: m, ..*r }))
            .collect();
        let requests = self
            .requests
            .iter()
            .filter_map(|&(m, n)| remap[m].map(|m| (m, n)))
            .collect();
        AnnotationDataset {
            label_space: self.label_space.clone(),
            items,
            annotators: self.annotators.clone(),
            records,
            requests,
        }
    }

    /// Whether any item belongs to `split`.
    pub fn has_split(&self, split: Split) -> bool {
        self.items.iter().any(|i| i.split == split)
    }

    /// Every (item, annotator) pair that needs a perspectivist prediction:
    /// gold records first, then label-less requests.
    pub fn requested_pairs(&self) -> Vec<(usize, usize)> {
        self.records
            .iter()
            .map(|r| (r.item, r.annotator))
            .chain(self.requests.iter().copied())
            .collect()
    }

    pub fn from_json_str(s: &str, opts: &LoadOptions) -> Result<Self> {
        let raw: RawDataset = serde_json::from_str(s)?;
        raw.into_dataset(opts)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_raw())?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string()?).map_err(|e| DiscoError::io(path, e))
    }

    fn to_raw(&self) -> RawDataset {
        let annotators = OrderedEntries(
            self.annotators
                .iter()
                .map(|a| {
                    let meta = a
                        .metadata
                        .iter()
                        .map(|(k, v)| (k.clone(), Value::String(v.clone())))
                        .collect();
                    (a.annotator_id.clone(), OrderedEntries(meta))
                })
                .collect(),
        );
        let mut annotations: Vec<Vec<(String, Option<LabelValue>)>> =
            vec![Vec::new(); self.items.len()];
        for r in &self.records {
            annotations[r.item].push((
                self.annotators[r.annotator].annotator_id.clone(),
                Some(LabelValue::Text(
                    self.label_space.label(r.label).to_string(),
                )),
            ));
        }
        for &(m, n) in &self.requests {
            annotations[m].push((self.annotators[n].annotator_id.clone(), None));
        }
        let items = OrderedEntries(
            self.items
                .iter()
                .zip(annotations)
                .map(|(item, ann)| {
                    (
                        item.item_id.clone(),
                        RawItem {
                            text: item.text_fields.clone(),
                            split: item.split,
                            annotations: OrderedEntries(ann),
                        },
                    )
                })
                .collect(),
        );
        RawDataset {
            label_space: Some(RawLabelSpace {
                labels: self
                    .label_space
                    .labels
                    .iter()
                    .map(|l| LabelValue::Text(l.clone()))
                    .collect(),
                values: Some(self.label_space.values.clone()),
                ordinal: self.label_space.ordinal,
            }),
            annotators,
            items,
        }
    }
}

/// Read, parse and validate a dataset file.
pub fn load_dataset(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<AnnotationDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DiscoError::io(path, e))?;
    AnnotationDataset::from_json_str(&text, opts)
}

// ---------------------------------------------------------------------------
// Wire format

/// A JSON object kept as an ordered list of entries, so that repeated keys
/// survive parsing and can be reported instead of silently overwritten.
#[derive(Clone, Debug)]
struct OrderedEntries<V>(Vec<(String, V)>);

impl<V> Default for OrderedEntries<V> {
    fn default() -> Self {
        OrderedEntries(Vec::new())
    }
}

impl<'de, V: Deserialize<'de>> Deserialize<'de> for OrderedEntries<V> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct EntriesVisitor<V>(PhantomData<V>);

        impl<'de, V: Deserialize<'de>> Visitor<'de> for EntriesVisitor<V> {
            type Value = OrderedEntries<V>;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<Self::Value, A::Error> {
                let mut out = Vec::with_capacity(map.size_hint().unwrap_or(0));
                while let Some((k, v)) = map.next_entry::<String, V>()? {
                    out.push((k, v));
                }
                Ok(OrderedEntries(out))
            }
        }

        deserializer.deserialize_map(EntriesVisitor(PhantomData))
    }
}

impl<V: Serialize> Serialize for OrderedEntries<V> {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = serializer.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawLabelSpace {
    labels: Vec<LabelValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    values: Option<Vec<f64>>,
    #[serde(default)]
    ordinal: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawItem {
    #[serde(default)]
    text: IndexMap<String, String>,
    #[serde(default = "default_split")]
    split: Split,
    #[serde(default)]
    annotations: OrderedEntries<Option<LabelValue>>,
}

fn default_split() -> Split {
    Split::Train
}

#[derive(Debug, Serialize, Deserialize)]
struct RawDataset {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label_space: Option<RawLabelSpace>,
    #[serde(default)]
    annotators: OrderedEntries<OrderedEntries<Value>>,
    items: OrderedEntries<RawItem>,
}

/// Labels may be written as strings or as bare numbers (`3`, `-5`).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum LabelValue {
    Text(String),
    Number(serde_json::Number),
}

impl LabelValue {
    fn into_string(self) -> String {
        match self {
            LabelValue::Text(s) => s,
            LabelValue::Number(n) => n.to_string(),
        }
    }
}

fn metadata_value(v: Value) -> Option<String> {
    match v {
        Value::Null => None,
        Value::String(s) => Some(s),
        other => Some(other.to_string()),
    }
}

impl RawLabelSpace {
    fn into_label_space(self) -> Result<LabelSpace> {
        let labels: Vec<String> = self
            .labels
            .into_iter()
            .map(LabelValue::into_string)
            .collect();
        let values = self
            .values
            .unwrap_or_else(|| (0..labels.len()).map(|i| i as f64).collect());
        LabelSpace::new(labels, values, self.ordinal)
    }
}

impl RawDataset {
    fn into_dataset(self, opts: &LoadOptions) -> Result<AnnotationDataset> {
        if self.items.0.is_empty() {
            return Err(DiscoError::Dataset("dataset has no items".into()));
        }

        let mut annotators: Vec<Annotator> = Vec::new();
        let mut annotator_ids: HashMap<String, usize> = HashMap::new();
        for (id, meta) in self.annotators.0 {
            if annotator_ids.contains_key(&id) {
                return Err(DiscoError::Dataset(format!(
                    "annotator id `{id}` is repeated"
                )));
            }
            let mut metadata = IndexMap::new();
            for (k, v) in meta.0 {
                if let Some(v) = metadata_value(v) {
                    metadata.insert(k, v);
                }
            }
            annotator_ids.insert(id.clone(), annotators.len());
            annotators.push(Annotator {
                annotator_id: id,
                index: annotators.len(),
                metadata,
            });
        }

        let declared = match (&opts.label_space, self.label_space) {
            (Some(ls), _) => Some(ls.clone()),
            (None, Some(raw)) => Some(raw.into_label_space()?),
            (None, None) => None,
        };

        let mut items = Vec::with_capacity(self.items.0.len());
        let mut raw_labels: Vec<(usize, usize, Option<String>)> = Vec::new();
        let mut item_ids = HashSet::new();
        for (item_id, raw) in self.items.0 {
            if !item_ids.insert(item_id.clone()) {
                return Err(DiscoError::Dataset(format!(
                    "item id `{item_id}` is repeated"
                )));
            }
            let m = items.len();
            let mut seen = HashSet::new();
            for (ann_id, label) in raw.annotations.0 {
                if !seen.insert(ann_id.clone()) {
                    return Err(DiscoError::DuplicateRecord {
                        item: item_id,
                        annotator: ann_id,
                    });
                }
                let n = *annotator_ids.entry(ann_id.clone()).or_insert_with(|| {
                    annotators.push(Annotator {
                        annotator_id: ann_id,
                        index: annotators.len(),
                        metadata: IndexMap::new(),
                    });
                    annotators.len() - 1
                });
                raw_labels.push((m, n, label.map(LabelValue::into_string)));
            }
            items.push(Item {
                item_id,
                text_fields: raw.text,
                split: raw.split,
            });
        }

        let label_space = match declared {
            Some(ls) => ls,
            None => {
                let mut observed: Vec<String> = raw_labels
                    .iter()
                    .filter_map(|(_, _, l)| l.clone())
                    .collect::<HashSet<_>>()
                    .into_iter()
                    .collect();
                observed.sort();
                LabelSpace::categorical(observed)?
            }
        };

        let mut records = Vec::new();
        let mut requests = Vec::new();
        for (m, n, label) in raw_labels {
            match label {
                Some(l) => {
                    let k = label_space
                        .index_of(&l)
                        .ok_or_else(|| DiscoError::UnknownLabel {
                            item: items[m].item_id.clone(),
                            label: l,
                        })?;
                    records.push(Record {
                        item: m,
                        annotator: n,
                        label: k,
                    });
                }
                None => requests.push((m, n)),
            }
        }

        AnnotationDataset::new(label_space, items, annotators, records, requests)
    }
}
