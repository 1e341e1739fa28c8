//! Synthetic annotation corpora with known generative parameters.
//!
//! Every item has a hidden class drawn from `class_prior`; its feature vector
//! is a class centroid plus isotropic noise, and each sampled annotator labels
//! it through their own confusion matrix. The population label distribution
//! of an item (the mean of all annotators' confusion rows for its class) is
//! returned as the exact soft label.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::distr::weighted::WeightedIndex;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotationDataset, Annotator, Item, LabelSpace, Record, Split};
use crate::error::{DiscoError, Result};
use crate::features::{one_hot_annotators, FeatureMatrix, FeatureSource};

/// Confusion matrices, either spelled out or as a shorthand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Reliability {
    /// Every annotator is right with this probability and otherwise picks
    /// one of the other labels uniformly.
    Diagonal(f64),
    /// One C×C matrix shared by all annotators.
    Shared(Vec<Vec<f64>>),
    /// One C×C matrix per annotator.
    PerAnnotator(Vec<Vec<Vec<f64>>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    #[serde(alias = "M")]
    pub num_items: usize,
    #[serde(alias = "N")]
    pub num_annotators: usize,
    #[serde(alias = "C")]
    pub num_classes: usize,
    pub annotations_per_item: usize,
    pub reliability: Reliability,
    /// Uniform when absent.
    #[serde(default)]
    pub class_prior: Option<Vec<f64>>,
    #[serde(alias = "J")]
    pub feature_dim: usize,
    #[serde(default = "default_noise")]
    pub cluster_noise: f64,
    #[serde(default)]
    pub seed: u64,
    /// Label values 0..C-1 on an ordered scale.
    #[serde(default)]
    pub ordinal: bool,
    #[serde(default = "default_dev")]
    pub dev_fraction: f64,
    #[serde(default = "default_test")]
    pub test_fraction: f64,
}

fn default_noise() -> f64 {
    0.3
}

fn default_dev() -> f64 {
    0.2
}

fn default_test() -> f64 {
    0.1
}

impl GeneratorSpec {
    /// `accuracy` on the diagonal for every annotator, uniform class prior.
    pub fn diagonal(
        num_items: usize,
        num_annotators: usize,
        num_classes: usize,
        annotations_per_item: usize,
        accuracy: f64,
        feature_dim: usize,
        seed: u64,
    ) -> Self {
        GeneratorSpec {
            num_items,
            num_annotators,
            num_classes,
            annotations_per_item,
            reliability: Reliability::Diagonal(accuracy),
            class_prior: None,
            feature_dim,
            cluster_noise: default_noise(),
            seed,
            ordinal: false,
            dev_fraction: default_dev(),
            test_fraction: default_test(),
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let spec: GeneratorSpec = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn prior(&self) -> Vec<f64> {
        self.class_prior
            .clone()
            .unwrap_or_else(|| vec![1.0 / self.num_classes as f64; self.num_classes])
    }

    /// Expanded per-annotator confusion matrices, `[n][true][label]`.
    pub fn confusions(&self) -> Result<Vec<Vec<Vec<f64>>>> {
        let c = self.num_classes;
        let per = match &self.reliability {
            Reliability::Diagonal(acc) => {
                if !(0.0..=1.0).contains(acc) {
                    return Err(DiscoError::Config(format!(
                        "accuracy {acc} is outside [0, 1]"
                    )));
                }
                let off = (1.0 - acc) / (c - 1) as f64;
                let m: Vec<Vec<f64>> = (0..c)
                    .map(|z| (0..c).map(|k| if k == z { *acc } else { off }).collect())
                    .collect();
                vec![m; self.num_annotators]
            }
            Reliability::Shared(m) => vec![m.clone(); self.num_annotators],
            Reliability::PerAnnotator(ms) => ms.clone(),
        };
        if per.len() != self.num_annotators {
            return Err(DiscoError::Config(format!(
                "{} confusion matrices for {} annotators",
                per.len(),
                self.num_annotators
            )));
        }
        for (n, m) in per.iter().enumerate() {
            if m.len() != c || m.iter().any(|row| row.len() != c) {
                return Err(DiscoError::Config(format!(
                    "confusion matrix {n} is not {c}×{c}"
                )));
            }
            for row in m {
                check_simplex(row, &format!("confusion matrix {n}"))?;
            }
        }
        Ok(per)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_items == 0 || self.num_annotators == 0 || self.feature_dim == 0 {
            return Err(DiscoError::Config(
                "items, annotators and feature_dim must be >= 1".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(DiscoError::Config(
                "at least two classes are required".into(),
            ));
        }
        if self.annotations_per_item == 0 || self.annotations_per_item > self.num_annotators {
            return Err(DiscoError::Config(format!(
                "annotations_per_item must be in 1..={}, got {}",
                self.num_annotators, self.annotations_per_item
            )));
        }
        let prior = self.prior();
        if prior.len() != self.num_classes {
            return Err(DiscoError::Config(format!(
                "class_prior has {} entries for {} classes",
                prior.len(),
                self.num_classes
            )));
        }
        check_simplex(&prior, "class_prior")?;
        if !(self.cluster_noise.is_finite() && self.cluster_noise >= 0.0) {
            return Err(DiscoError::Config(
                "cluster_noise must be finite and >= 0".into(),
            ));
        }
        let fractions_ok = [self.dev_fraction, self.test_fraction]
            .iter()
            .all(|f| (0.0..1.0).contains(f))
            && self.dev_fraction + self.test_fraction < 1.0;
        if !fractions_ok {
            return Err(DiscoError::Config(
                "dev_fraction + test_fraction must be in [0, 1)".into(),
            ));
        }
        self.confusions()?;
        Ok(())
    }
}

fn check_simplex(row: &[f64], what: &str) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(DiscoError::Config(format!(
            "{what} has a row that is not a probability vector"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub dataset: AnnotationDataset,
    pub item_features: FeatureMatrix,
    pub annotator_features: FeatureMatrix,
    /// Population label distribution per item id.
    pub posteriors: IndexMap<String, Vec<f64>>,
    pub true_classes: Vec<usize>,
}

impl SyntheticCorpus {
    /// Writes `dataset.json`, `item_feats.tsv`, `annot_feats.tsv` and `posteriors.json`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| DiscoError::io(dir, e))?;
        self.dataset.save(dir.join("dataset.json"))?;
        self.item_features.save_tsv(dir.join("item_feats.tsv"))?;
        self.annotator_features
            .save_tsv(dir.join("annot_feats.tsv"))?;
        let path = dir.join("posteriors.json");
        let text = serde_json::to_string_pretty(&self.posteriors)?;
        fs::write(&path, text).map_err(|e| DiscoError::io(&path, e))
    }
}

const GENDERS: [&str; 3] = ["woman", "man", "non-binary"];
const NATIONALITIES: [&str; 5] = ["Atlantis", "Borduria", "Freedonia", "Genovia", "Ruritania"];
const EDUCATION: [&str; 3] = ["secondary", "undergraduate", "graduate"];
const FILLER: [&str; 8] = ["the", "a", "this", "it", "was", "really", "quite", "and"];

pub fn generate(spec: &GeneratorSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let (m_total, n_total, c, j) = (
        spec.num_items,
        spec.num_annotators,
        spec.num_classes,
        spec.feature_dim,
    );
    let confusions = spec.confusions()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let centroids = centroids(c, j, &mut rng, &std_normal);
    let noise = Normal::new(0.0, spec.cluster_noise).expect("validated noise");
    let prior = WeightedIndex::new(spec.prior())
        .map_err(|e| DiscoError::Config(format!("class_prior: {e}")))?;
    let rows: Vec<WeightedIndex<f64>> = confusions
        .iter()
        .flat_map(|m| {
            m.iter()
                .map(|row| WeightedIndex::new(row).expect("validated row"))
        })
        .collect();

    let width = (m_total.max(2) - 1).to_string().len();
    let n_test = (spec.test_fraction * m_total as f64).round() as usize;
    let n_dev = (spec.dev_fraction * m_total as f64).round() as usize;
    let n_train = m_total.saturating_sub(n_test + n_dev).max(1);

    let annot_width = (n_total.max(2) - 1).to_string().len();
    let annotators: Vec<Annotator> = (0..n_total)
        .map(|n| {
            let mut metadata = IndexMap::new();
            metadata.insert("age".to_string(), rng.random_range(18..80).to_string());
            metadata.insert(
                "gender".to_string(),
                GENDERS[rng.random_range(0..GENDERS.len())].to_string(),
            );
            metadata.insert(
                "nationality".to_string(),
                NATIONALITIES[rng.random_range(0..NATIONALITIES.len())].to_string(),
            );
            metadata.insert(
                "education".to_string(),
                EDUCATION[rng.random_range(0..EDUCATION.len())].to_string(),
            );
            Annotator {
                annotator_id: format!("a{n:0annot_width$}"),
                index: n,
                metadata,
            }
        })
        .collect();

    let mut items = Vec::with_capacity(m_total);
    let mut item_rows = Vec::with_capacity(m_total);
    let mut records = Vec::with_capacity(m_total * spec.annotations_per_item);
    let mut posteriors = IndexMap::new();
    let mut true_classes = Vec::with_capacity(m_total);
    for m in 0..m_total {
        let z = prior.sample(&mut rng);
        true_classes.push(z);
        let x: Vec<f64> = centroids[z]
            .iter()
            .map(|&mu| mu + noise.sample(&mut rng))
            .collect();
        item_rows.push(x);

        let len = rng.random_range(4..12);
        let words: Vec<String> = (0..len)
            .map(|_| {
                if rng.random_bool(0.5) {
                    format!("w{z}x{}", rng.random_range(0..6))
                } else {
                    FILLER[rng.random_range(0..FILLER.len())].to_string()
                }
            })
            .collect();
        let split = if m < n_train {
            Split::Train
        } else if m < n_train + n_dev {
            Split::Dev
        } else {
            Split::Test
        };
        let item_id = format!("i{m:0width$}");
        let mut text_fields = IndexMap::new();
        text_fields.insert("text".to_string(), words.join(" "));
        items.push(Item {
            item_id: item_id.clone(),
            text_fields,
            split,
        });

        let mut chosen = sample(&mut rng, n_total, spec.annotations_per_item).into_vec();
        chosen.sort_unstable();
        for n in chosen {
            let label = rows[n * c + z].sample(&mut rng);
            records.push(Record {
                item: m,
                annotator: n,
                label,
            });
        }

        let post: Vec<f64> = (0..c)
            .map(|k| confusions.iter().map(|cm| cm[z][k]).sum::<f64>() / n_total as f64)
            .collect();
        posteriors.insert(item_id, post);
    }

    let label_space = if spec.ordinal {
        LabelSpace::integer_scale(0, c as i64 - 1)?
    } else {
        LabelSpace::categorical((0..c).map(|k| k.to_string()))?
    };
    let item_ids = items.iter().map(|i| i.item_id.clone()).collect();
    let annot_ids = annotators.iter().map(|a| a.annotator_id.clone()).collect();
    let dataset = AnnotationDataset::new(label_space, items, annotators, records, Vec::new())?;
    Ok(SyntheticCorpus {
        dataset,
        item_features: FeatureMatrix::new(j, item_ids, item_rows, FeatureSource::EmbeddingFile)?,
        annotator_features: one_hot_annotators(n_total)?.with_ids(annot_ids)?,
        posteriors,
        true_classes,
    })
}

/// Unit-norm class centroids, orthonormalized when `j >= c`.
fn centroids(c: usize, j: usize, rng: &mut ChaCha8Rng, d: &Normal<f64>) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(c);
    for k in 0..c {
        let mut v: Vec<f64> = (0..j).map(|_| d.sample(rng)).collect();
        if k < j {
            for u in &out {
                let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|a| *a /= norm);
        out.push(v);
    }
    out
}
