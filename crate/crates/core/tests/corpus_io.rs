use std::collections::HashSet;
use std::fs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use disco_core::corpus::{load_dataset, AnnotationDataset, LabelSpace, LoadOptions, Split};
use disco_core::features::{load_embeddings, render_metadata_text, MetadataTemplate};
use disco_core::synthgen::{generate, GeneratorSpec};

#[test]
fn synthetic_files_round_trip_to_the_same_dataset() {
    let mut spec = GeneratorSpec::diagonal(3, 4, 3, 2, 0.8, 5, 77);
    spec.dev_fraction = 0.0;
    spec.test_fraction = 0.0;
    let g = generate(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    g.write_to_dir(dir.path()).unwrap();

    let back = load_dataset(dir.path().join("dataset.json"), &LoadOptions::default()).unwrap();
    assert_eq!(back, g.dataset);
    let item_ids: Vec<String> = back.items().iter().map(|i| i.item_id.clone()).collect();
    let annot_ids: Vec<String> = back
        .annotators()
        .iter()
        .map(|a| a.annotator_id.clone())
        .collect();
    let items = load_embeddings(dir.path().join("item_feats.tsv"), &item_ids).unwrap();
    let annots = load_embeddings(dir.path().join("annot_feats.tsv"), &annot_ids).unwrap();
    assert_eq!(items.rows(), g.item_features.rows());
    assert_eq!(annots.rows(), g.annotator_features.rows());
    let post: indexmap::IndexMap<String, Vec<f64>> =
        serde_json::from_str(&fs::read_to_string(dir.path().join("posteriors.json")).unwrap())
            .unwrap();
    assert_eq!(post, g.posteriors);
}

fn random_corpus(seed: u64) -> AnnotationDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = ["a", "b", "c", "d", "e", "f"];
    let mut items = serde_json::Map::new();
    for m in 0..40 {
        let mut ann = serde_json::Map::new();
        for n in 0..12 {
            if rng.random_bool(0.4) {
                ann.insert(format!("u{n}"), labels[rng.random_range(0..6)].into());
            }
        }
        ann.insert("u0".into(), labels[m % 6].into());
        let split = ["train", "dev", "test"][m % 3];
        items.insert(
            format!("item{m}"),
            serde_json::json!({"text": {"body": format!("text {m}")}, "split": split, "annotations": ann}),
        );
    }
    let doc = serde_json::json!({"label_space": {"labels": labels}, "items": items});
    AnnotationDataset::from_json_str(&doc.to_string(), &LoadOptions::default()).unwrap()
}

#[test]
fn histograms_equal_an_independent_tally() {
    let ds = random_corpus(8);
    let c = ds.num_classes();
    let mut item_counts = vec![vec![0usize; c]; ds.num_items()];
    let mut annot_counts = vec![vec![0usize; c]; ds.num_annotators()];
    for r in ds.records() {
        item_counts[r.item][r.label] += 1;
        annot_counts[r.annotator][r.label] += 1;
    }
    for (m, h) in ds.item_histograms().iter().enumerate() {
        let total: usize = item_counts[m].iter().sum();
        assert_eq!(h.support_count, total);
        for k in 0..c {
            assert_eq!(h.probs[k], item_counts[m][k] as f64 / total as f64);
        }
    }
    for (n, h) in ds.annotator_histograms().iter().enumerate() {
        let total: usize = annot_counts[n].iter().sum();
        assert_eq!(h.support_count, total);
        if total > 0 {
            for k in 0..c {
                assert_eq!(h.probs[k], annot_counts[n][k] as f64 / total as f64);
            }
        }
    }
}

#[test]
fn split_view_matches_a_filtered_reload() {
    let ds = random_corpus(9);
    let json: serde_json::Value = serde_json::from_str(&ds.to_json_string().unwrap()).unwrap();
    for split in Split::ALL {
        let view = ds.split_view(split);
        let mut filtered = json.clone();
        let items = filtered["items"].as_object_mut().unwrap();
        items.retain(|_, v| v["split"] == split.as_str());
        let reloaded =
            AnnotationDataset::from_json_str(&filtered.to_string(), &LoadOptions::default())
                .unwrap();
        let view_items: Vec<_> = view.items().iter().map(|i| &i.item_id).collect();
        let reload_items: Vec<_> = reloaded.items().iter().map(|i| &i.item_id).collect();
        assert_eq!(view_items, reload_items);
        assert_eq!(view.item_histograms(), reloaded.item_histograms());
        // the reload only knows annotators that appear in the filtered file
        for (a, h) in reloaded
            .annotators()
            .iter()
            .zip(reloaded.annotator_histograms())
        {
            let n = view.annotator_index(&a.annotator_id).unwrap();
            assert_eq!(view.annotator_histogram(n), h);
        }
    }
}

#[test]
fn declared_label_space_can_be_overridden() {
    let ds = random_corpus(10);
    let json = ds.to_json_string().unwrap();
    let ls = LabelSpace::new(
        ["a", "b", "c", "d", "e", "f"].map(String::from).to_vec(),
        vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        true,
    )
    .unwrap();
    let opts = LoadOptions {
        label_space: Some(ls.clone()),
    };
    let back = AnnotationDataset::from_json_str(&json, &opts).unwrap();
    assert_eq!(back.label_space(), &ls);
    assert_eq!(back.records(), ds.records());
}

#[test]
fn metadata_rendering_is_injective_on_the_synthetic_corpus() {
    let g = generate(&GeneratorSpec::diagonal(10, 200, 3, 2, 0.8, 4, 5)).unwrap();
    let template = MetadataTemplate::default();
    let mut seen = std::collections::HashMap::new();
    for a in g.dataset.annotators() {
        let text = render_metadata_text(a, &template);
        if let Some(prev) = seen.insert(text.clone(), a.metadata.clone()) {
            assert_eq!(
                prev, a.metadata,
                "`{text}` rendered from two different maps"
            );
        }
    }
    let distinct: HashSet<_> = g
        .dataset
        .annotators()
        .iter()
        .map(|a| format!("{:?}", a.metadata))
        .collect();
    assert_eq!(seen.len(), distinct.len());
}

#[test]
fn load_is_idempotent_and_counts_agree() {
    let ds = random_corpus(11);
    let again =
        AnnotationDataset::from_json_str(&ds.to_json_string().unwrap(), &LoadOptions::default())
            .unwrap();
    assert_eq!(again, ds);

    let by_item: usize = ds.item_histograms().iter().map(|h| h.support_count).sum();
    let by_annot: usize = ds
        .annotator_histograms()
        .iter()
        .map(|h| h.support_count)
        .sum();
    assert_eq!(by_item, ds.records().len());
    assert_eq!(by_annot, ds.records().len());

    let mut seen: Vec<String> = Split::ALL
        .iter()
        .flat_map(|&s| {
            ds.split_view(s)
                .items()
                .iter()
                .map(|i| i.item_id.clone())
                .collect::<Vec<_>>()
        })
        .collect();
    seen.sort();
    let mut all: Vec<String> = ds.items().iter().map(|i| i.item_id.clone()).collect();
    all.sort();
    assert_eq!(seen, all);
}
