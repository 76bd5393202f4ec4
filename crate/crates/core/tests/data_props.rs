use std::io::Write;

use proptest::prelude::*;
use ui2vec::features::{FeatureConfig, FeatureEncoder, Vocab};
use ui2vec::model::{read_corpus, validate_example, write_corpus, BoundingBox, ValidationRules};
use ui2vec::synth::{generate_corpus, icon_catalog, GenConfig};
use ui2vec::vh_parser::{
    extract_leaf_components, normalize_class_name, parse_view_hierarchy, ClassTable, LeafContext, RawVhNode,
};
use ui2vec::Error;

fn small_cfg(seed: u64, n: usize) -> GenConfig {
    GenConfig {
        seed,
        n_uis: n,
        ..GenConfig::default()
    }
}

fn vocab() -> Vocab {
    Vocab::new(2048).unwrap()
}

fn unit_box(b: &BoundingBox) -> bool {
    (0.0..=1.0).contains(&b.x0)
        && (0.0..=1.0).contains(&b.y0)
        && b.x0 <= b.x1
        && b.y0 <= b.y1
        && b.x1 <= 1.0
        && b.y1 <= 1.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn corpus_round_trip_is_identity(seed in any::<u64>(), n in 1usize..8, no_vh in any::<bool>()) {
        let cfg = GenConfig { no_vh, ..small_cfg(seed, n) };
        let corpus = generate_corpus(&cfg, &vocab()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_corpus(&corpus, &path).unwrap();
        let back = read_corpus(&path).unwrap();
        prop_assert_eq!(&back, &corpus);
        let again = dir.path().join("d.jsonl");
        write_corpus(&back, &again).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn validation_is_pure(seed in any::<u64>()) {
        let corpus = generate_corpus(&small_cfg(seed, 3), &vocab()).unwrap();
        let rules = ValidationRules::default();
        for e in &corpus.examples {
            let before = e.clone();
            let a = validate_example(e, &rules);
            let b = validate_example(e, &rules);
            prop_assert_eq!(&a, &b);
            prop_assert!(a.is_empty(), "{:?}", a);
            prop_assert_eq!(e, &before);
        }
    }

    #[test]
    fn leaf_extraction_keeps_every_leaf(tree in tree_strategy(), w in 1u32..3000, h in 1u32..3000) {
        let table = ClassTable::default();
        let v = vocab();
        let ctx = LeafContext { table: &table, vocab: &v, max_field_tokens: 4 };
        let comps = extract_leaf_components(&tree, w, h, &ctx).unwrap();
        prop_assert_eq!(comps.len(), tree.leaf_count());
        for c in &comps {
            prop_assert!(unit_box(&c.bounds), "{:?}", c.bounds);
            prop_assert!(c.text_tokens.len() <= 4 && c.desc_tokens.len() <= 4 && c.resid_tokens.len() <= 4);
            prop_assert!(c.class_id < 23);
        }
    }

    #[test]
    fn class_normalization_is_total_and_pure(raw in ".{0,40}") {
        let table = ClassTable::default();
        let a = normalize_class_name(&raw, &table);
        prop_assert!(a < 23);
        prop_assert_eq!(a, normalize_class_name(&raw, &table));
    }

    #[test]
    fn features_are_seed_deterministic(seed in any::<u64>(), tokens in prop::collection::vec(0u32..2048, 0..6), patch in prop::collection::vec(0.0f64..1.0, 256)) {
        let cfg = FeatureConfig::default();
        let a = FeatureEncoder::new(cfg, seed).unwrap();
        let b = FeatureEncoder::new(cfg, seed).unwrap();
        let ta = a.encode_text(&tokens).unwrap();
        let tb = b.encode_text(&tokens).unwrap();
        prop_assert_eq!(bits(&ta), bits(&tb));
        let pa = a.encode_image_patch(&patch).unwrap();
        prop_assert_eq!(bits(&pa), bits(&b.encode_image_patch(&patch).unwrap()));
        let corpus = generate_corpus(&small_cfg(seed, 1), a.vocab()).unwrap();
        for c in &corpus.examples[0].vh {
            let f = a.vh_component_feature(c).unwrap();
            prop_assert_eq!(f.len(), 23 + 3 * cfg.text_dim);
            prop_assert_eq!(bits(&f), bits(&b.vh_component_feature(c).unwrap()));
        }
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn node_strategy() -> impl Strategy<Value = RawVhNode> {
    (
        prop::sample::select(vec![
            "android.widget.ImageButton",
            "TextView",
            "com.foo.Bar",
            "",
            "android.widget.CheckBox",
        ]),
        "[a-z ]{0,20}",
        "[A-Za-z_:/]{0,16}",
        prop::array::uniform4(0u32..4000),
    )
        .prop_map(|(class, text, rid, b)| RawVhNode {
            class_name: class.to_string(),
            text: text.clone(),
            content_description: text,
            resource_id: rid,
            bounds_px: b,
            children: Vec::new(),
        })
}

fn tree_strategy() -> impl Strategy<Value = RawVhNode> {
    node_strategy().prop_recursive(4, 40, 5, |inner| {
        (node_strategy(), prop::collection::vec(inner, 1..5)).prop_map(|(mut n, kids)| {
            n.children = kids;
            n
        })
    })
}

#[test]
fn truncated_corpus_line_reports_its_location() {
    let corpus = generate_corpus(&small_cfg(3, 3), &vocab()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    write_corpus(&corpus, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let cut = &lines[2][..lines[2].len() / 2];
    let bad = dir.path().join("bad.jsonl");
    let mut f = std::fs::File::create(&bad).unwrap();
    writeln!(f, "{}\n{}\n{}", lines[0], lines[1], cut).unwrap();
    match read_corpus(&bad) {
        Err(Error::Parse { location, .. }) => assert!(location.ends_with(":3"), "{location}"),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn unknown_format_version_is_rejected() {
    let corpus = generate_corpus(&small_cfg(3, 1), &vocab()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    write_corpus(&corpus, &path).unwrap();
    let text = std::fs::read_to_string(&path)
        .unwrap()
        .replacen("\"version\":1", "\"version\":99", 1);
    std::fs::write(&path, text).unwrap();
    assert!(matches!(read_corpus(&path), Err(Error::Version { found: 99, .. })));
}

#[test]
fn parser_reads_nested_json() {
    let json = r#"{"class": "FrameLayout", "bounds": [0, 0, 1080, 1920], "children": [
        {"class": "android.widget.ImageButton", "content_desc": "Open settings", "resource_id": "app:id/settingsButton", "bounds": [0, 0, 100, 100]},
        {"class": "LinearLayout", "bounds": [0, 100, 1080, 400], "children": [
            {"class": "android.widget.TextView", "text": "Hello", "bounds": [10, 110, 500, 200]}
        ]}
    ]}"#;
    let root = parse_view_hierarchy(json).unwrap();
    assert_eq!(root.leaf_count(), 2);
    assert_eq!(root.depth(), 3);
    let table = ClassTable::default();
    let v = vocab();
    let ctx = LeafContext {
        table: &table,
        vocab: &v,
        max_field_tokens: 8,
    };
    let comps = extract_leaf_components(&root, 1080, 1920, &ctx).unwrap();
    assert_eq!(table.name(comps[0].class_id), "IMAGE_BUTTON");
    assert_eq!(comps[0].resid_tokens, v.tokenize("settings button"));
    assert_eq!(comps[1].text_tokens, v.tokenize("hello"));
    assert!((comps[1].bounds.y1 - 200.0 / 1920.0).abs() < 1e-12);
}

#[test]
fn parser_points_at_the_bad_node() {
    let json = r#"{"class": "A", "bounds": [0,0,1,1], "children": [{"class": "B", "bounds": [0,0,1,1]}, {"bounds": [0,0,1,1]}]}"#;
    match parse_view_hierarchy(json) {
        Err(Error::Parse { location, .. }) => assert_eq!(location, "/children/1"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn generated_labels_follow_from_template_fields() {
    let v = vocab();
    let catalog = icon_catalog(32);
    let corpus = generate_corpus(&small_cfg(12, 200), &v).unwrap();
    for e in &corpus.examples {
        let labels = e.icon_labels.as_ref().unwrap();
        let app = e.app_type_label.unwrap();
        for (c, &t) in e.vh.iter().zip(labels) {
            // rule: the description word of the app's dialect names the type
            let word = &catalog[t].words[app % 3];
            assert_eq!(c.desc_tokens, v.tokenize(word));
            assert_eq!(c.class_id, catalog[t].class_id);
        }
    }
}

#[test]
fn generation_is_deterministic() {
    let v = vocab();
    let a = generate_corpus(&small_cfg(99, 50), &v).unwrap();
    let b = generate_corpus(&small_cfg(99, 50), &v).unwrap();
    assert_eq!(a, b);
    let c = generate_corpus(&small_cfg(100, 50), &v).unwrap();
    assert_ne!(a, c);
}
