mod common;

use std::io::Cursor;

use nes::embedder::{
    entity_prompt, load_embedding_file, read_binary, read_lines, sniff_format, write_binary, write_embedding_file,
    write_lines, EmbeddingFormat, NORM_TOLERANCE,
};
use nes::{Embedding, EmbeddingSource, Error, FileEmbeddings, HashEmbedder, SourceSpec};
use proptest::prelude::*;

fn file_source(entries: &[(&str, &[f32])]) -> FileEmbeddings {
    let dim = entries[0].1.len();
    FileEmbeddings::from_entries(dim, entries.iter().map(|(k, v)| (k.to_string(), v.to_vec()))).unwrap()
}

#[test]
fn hash_source_is_repeatable() {
    let src = HashEmbedder::new(8, 7).unwrap();
    let first = src.embed_text("a dog").unwrap();
    for _ in 0..5 {
        assert_eq!(src.embed_text("a dog").unwrap(), first);
    }
    assert_eq!(first.dim(), 8);
}

#[test]
fn hash_source_separates_dog_and_cat() {
    let src = HashEmbedder::new(8, 7).unwrap();
    let dog = src.embed_text("a dog").unwrap();
    let cat = src.embed_text("a cat").unwrap();
    assert_ne!(dog.values(), cat.values());
}

#[test]
fn file_source_returns_renormalized_vector() {
    let src = file_source(&[("cap_001", &[3.0, 4.0, 0.0])]);
    let v = src.embed_text("cap_001").unwrap();
    assert_eq!(v.values(), &[0.6, 0.8, 0.0]);
}

#[test]
fn entity_embedding_uses_the_template() {
    let src = HashEmbedder::new(32, 1).unwrap();
    assert_eq!(
        src.embed_entity("dog").unwrap(),
        src.embed_text("A photo of dog").unwrap()
    );
    assert_eq!(
        src.embed_entity("frisbee").unwrap(),
        src.embed_text("A photo of frisbee").unwrap()
    );
    assert_eq!(entity_prompt("kite"), "A photo of kite");
}

#[test]
fn file_source_missing_entity_prompt() {
    let src = file_source(&[("A photo of dog", &[1.0, 0.0])]);
    assert!(src.embed_entity("dog").is_ok());
    match src.embed_entity("zebra") {
        Err(Error::UnknownKey(k)) => assert_eq!(k, "A photo of zebra"),
        other => panic!("expected UnknownKey, got {other:?}"),
    }
}

#[test]
fn empty_text_is_rejected() {
    let src = HashEmbedder::new(8, 0).unwrap();
    assert!(matches!(src.embed_text("   "), Err(Error::EmptyInput)));
    assert!(matches!(src.embed_entity(""), Err(Error::EmptyInput)));
}

#[test]
fn binary_file_with_three_records() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.nese");
    let table = file_source(&[
        ("a", &[1.0, 0.0, 0.0, 0.0]),
        ("b", &[0.0, 2.0, 0.0, 0.0]),
        ("c", &[1.0, 1.0, 1.0, 1.0]),
    ]);
    write_embedding_file(&path, &table, EmbeddingFormat::Binary).unwrap();
    assert_eq!(sniff_format(&path).unwrap(), EmbeddingFormat::Binary);
    let loaded = load_embedding_file(&path, EmbeddingFormat::Binary).unwrap();
    assert_eq!(loaded.len(), 3);
    assert_eq!(loaded.dim(), 4);
    assert_eq!(loaded, table);
}

#[test]
fn nan_record_is_a_format_error() {
    let mut bytes = Vec::new();
    write_binary(&mut bytes, 2, [("x", &[1.0f32, 0.0][..])]).unwrap();
    let n = bytes.len();
    bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(matches!(read_binary(Cursor::new(&bytes)), Err(Error::Format(_))));

    let line = "{\"key\":\"x\",\"vector\":[1.0,NaN]}\n";
    assert!(read_lines(Cursor::new(line)).is_err());
}

#[test]
fn malformed_binary_headers() {
    let mut good = Vec::new();
    write_binary(&mut good, 2, [("x", &[1.0f32, 0.0][..])]).unwrap();

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert!(matches!(read_binary(Cursor::new(&bad_magic)), Err(Error::Format(_))));

    let mut bad_version = good.clone();
    bad_version[4] = 9;
    assert!(matches!(read_binary(Cursor::new(&bad_version)), Err(Error::Format(_))));

    let truncated = &good[..good.len() - 1];
    assert!(matches!(read_binary(Cursor::new(truncated)), Err(Error::Format(_))));
}

#[test]
fn binary_and_lines_agree() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = common::rng(11);
    let table = FileEmbeddings::from_entries(
        16,
        (0..20).map(|i| (format!("key-{i}"), common::random_vec(&mut rng, 16))),
    )
    .unwrap();
    let bin = dir.path().join("t.nese");
    let jsonl = dir.path().join("t.jsonl");
    write_embedding_file(&bin, &table, EmbeddingFormat::Binary).unwrap();
    write_embedding_file(&jsonl, &table, EmbeddingFormat::Lines).unwrap();
    assert_eq!(sniff_format(&jsonl).unwrap(), EmbeddingFormat::Lines);
    let a = FileEmbeddings::load(&bin).unwrap();
    let b = FileEmbeddings::load(&jsonl).unwrap();
    for (key, v) in a.iter() {
        assert_eq!(b.get(key).unwrap(), v, "{key}");
    }
    assert_eq!(a.len(), b.len());
}

#[test]
fn source_spec_builds_both_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.nese");
    write_embedding_file(&path, &file_source(&[("k", &[0.0, 1.0])]), EmbeddingFormat::Binary).unwrap();
    let spec: SourceSpec = serde_json::from_str(&format!(
        "{{\"kind\":\"file\",\"path\":{}}}",
        serde_json::to_string(&path).unwrap()
    ))
    .unwrap();
    assert_eq!(spec.build().unwrap().embed_text("k").unwrap().values(), &[0.0, 1.0]);
    let spec: SourceSpec = serde_json::from_str(r#"{"kind":"hash","dim":16,"seed":3}"#).unwrap();
    let src = spec.build().unwrap();
    assert_eq!(src.dim(), 16);
    assert_eq!(
        src.embed_text("x y").unwrap(),
        HashEmbedder::new(16, 3).unwrap().embed_text("x y").unwrap()
    );
}

fn text_strategy() -> impl Strategy<Value = String> {
    prop::collection::vec("[a-zA-Z0-9]{1,8}", 1..12).prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn hash_embeddings_are_normalized(text in text_strategy(), dim in 1usize..64, seed in any::<u64>()) {
        let src = HashEmbedder::new(dim, seed).unwrap();
        let v = src.embed_text(&text).unwrap();
        prop_assert_eq!(v.dim(), dim);
        prop_assert!((v.norm() - 1.0).abs() <= NORM_TOLERANCE);
        prop_assert_eq!(src.embed_text(&text).unwrap(), v);
    }

    #[test]
    fn hash_embedding_ignores_case_and_punctuation(text in text_strategy(), seed in any::<u64>()) {
        let src = HashEmbedder::new(24, seed).unwrap();
        let noisy = format!("  {}!!", text.to_uppercase().replace(' ', ", "));
        prop_assert_eq!(src.embed_text(&noisy).unwrap(), src.embed_text(&text).unwrap());
    }

    #[test]
    fn shared_tokens_raise_similarity(seed in any::<u64>()) {
        let src = HashEmbedder::new(256, seed).unwrap();
        let a = src.embed_text("red kite over the beach").unwrap();
        let b = src.embed_text("red kite over the sea").unwrap();
        let c = src.embed_text("green tractor in mud").unwrap();
        prop_assert!(a.dot(&b).unwrap() > a.dot(&c).unwrap());
    }

    #[test]
    fn formats_round_trip(
        rows in prop::collection::vec((".{0,12}", prop::collection::vec(-10.0f32..10.0, 5)), 0..15)
    ) {
        let mut seen = std::collections::BTreeSet::new();
        let rows: Vec<(String, Vec<f32>)> = rows
            .into_iter()
            .filter(|(k, v)| seen.insert(k.clone()) && v.iter().any(|x| *x != 0.0))
            .map(|(k, v)| (k, Embedding::normalized(v).unwrap().into_values()))
            .collect();

        let mut bin = Vec::new();
        write_binary(&mut bin, 5, rows.iter().map(|(k, v)| (k.as_str(), v.as_slice()))).unwrap();
        let (dim, back) = read_binary(Cursor::new(&bin)).unwrap();
        prop_assert_eq!(dim, 5);
        prop_assert_eq!(&back, &rows);

        if !rows.is_empty() {
            let mut lines = Vec::new();
            write_lines(&mut lines, rows.iter().map(|(k, v)| (k.as_str(), v.as_slice()))).unwrap();
            let (dim, back) = read_lines(Cursor::new(&lines)).unwrap();
            prop_assert_eq!(dim, 5);
            for ((ka, va), (kb, vb)) in back.iter().zip(&rows) {
                prop_assert_eq!(ka, kb);
                for (x, y) in va.iter().zip(vb) {
                    prop_assert!((x - y).abs() <= 1e-7);
                }
            }
        }
    }
}
