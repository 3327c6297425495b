use std::path::PathBuf;

use docgroup_core::document::DocumentModel;
use docgroup_core::synth::{generate_document, standard_corpus, Corpus, SynthSpec};

fn data(name: &str) -> Vec<u8> {
    std::fs::read(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)).unwrap()
}

#[test]
fn bundled_corpus_is_the_standard_one() {
    let corpus: Corpus = serde_json::from_slice(&data("corpus.json")).unwrap();
    assert_eq!(corpus, standard_corpus());
    assert_eq!(corpus.documents.len(), 30);
}

#[test]
fn sample_menu_is_reproducible() {
    let sample = DocumentModel::from_json_bytes(&data("sample_menu.json")).unwrap();
    let mut spec: SynthSpec = serde_json::from_str(r#"{"template": "MENU", "seed": 1, "entries": 10}"#).unwrap();
    spec.doc_id = Some("sample-menu".into());
    let (doc, _) = generate_document(&spec).unwrap();
    assert_eq!(sample.to_json_string(), doc.to_json_string());
}

#[test]
fn refine_fixtures_generate() {
    let v: serde_json::Value = serde_json::from_slice(&data("refine_fixture.json")).unwrap();
    let specs: Vec<SynthSpec> = serde_json::from_value(v["fixtures"].clone()).unwrap();
    assert!(!specs.is_empty());
    for spec in specs {
        generate_document(&spec).unwrap();
    }
    assert_eq!(v["refine_epochs"], 10);
}
