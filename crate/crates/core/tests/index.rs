mod common;

use mtenc::encoder::{encode_text, init_params, similarity, Embedding, Side};
use mtenc::eval::DocEntry;
use mtenc::index::{build_index, build_index_threads, load_index, save_index, top_k, EmbeddingIndex, IndexError};
use mtenc::pooling::{embed_document_concat, DocumentRecord, Entity, EntityKind};
use mtenc::tensor::checkpoint_hash;
use mtenc::tokenizer::{encode, Vocab};
use proptest::prelude::*;

#[test]
fn top_k_matches_full_sort_over_a_thousand_docs() {
    common::check_topk(1000, 40, 12).unwrap();
}

fn corpus() -> Vec<DocEntry> {
    let words = ["bee", "hummel", "шмель", "蜂", "wasp", "ant", "honey", "nest", "sound", "video"];
    (0..40)
        .map(|i| DocEntry {
            id: format!("doc{i}"),
            doc: DocumentRecord::new(
                vec![
                    Entity::new(EntityKind::Title, format!("{} {}", words[i % 10], words[(i / 10 + 3) % 10])),
                    Entity::new(EntityKind::Url, format!("example.org/{i}")),
                ],
                "en",
            ),
        })
        .collect()
}

fn model() -> mtenc::encoder::ModelParams<f32> {
    init_params(&common::tiny_encoder(Vocab::bytes_only().size()), 4).unwrap()
}

#[test]
fn rows_are_the_document_embeddings_and_scores_their_similarity() {
    let m = model();
    let v = Vocab::bytes_only();
    let docs = corpus();
    let idx = build_index(&m, &v, &docs).unwrap();
    assert_eq!(idx.len(), docs.len());
    assert_eq!(idx.checkpoint_hash, checkpoint_hash(&m.params));
    let embs: Vec<Embedding> = docs.iter().map(|d| embed_document_concat(&m, &v, &d.doc).unwrap()).collect();
    for (i, e) in embs.iter().enumerate() {
        assert_eq!(idx.row(i), e.as_slice());
    }
    assert_eq!(build_index_threads(&m, &v, &docs, 3).unwrap(), idx);
    let q = encode_text(&m, Side::Query, &encode("bee sound", &v, 16, true).unwrap()).unwrap();
    for hit in top_k(&idx, &q, 10).unwrap() {
        let i = idx.ids.iter().position(|x| *x == hit.id).unwrap();
        assert!((hit.score - similarity(&q, &embs[i]).unwrap()).abs() < 1e-6);
    }
}

#[test]
fn roundtrip_and_hash_checks() {
    let m = model();
    let idx = build_index(&m, &Vocab::bytes_only(), &corpus()).unwrap();
    let mut buf = Vec::new();
    save_index(&idx, &mut buf).unwrap();
    assert_eq!(&buf[..4], b"DIDX");
    let back = load_index(&buf[..]).unwrap();
    assert_eq!(back, idx);
    assert!(back.check_hash(&checkpoint_hash(&m.params)));
    assert!(!back.check_hash("0000"));
    assert!(matches!(load_index(&buf[..buf.len() - 3]), Err(IndexError::Format(_))));
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(load_index(&bad[..]), Err(IndexError::Format(_))));
}

#[test]
fn edge_cases() {
    let empty = EmbeddingIndex::new(8, "h");
    assert!(top_k(&empty, &Embedding::from_raw(vec![1.0; 8]), 5).unwrap().is_empty());
    let mut buf = Vec::new();
    save_index(&empty, &mut buf).unwrap();
    assert_eq!(load_index(&buf[..]).unwrap(), empty);

    let rows = vec![Embedding::from_raw(vec![1.0, 0.0]), Embedding::from_raw(vec![0.0, 1.0])];
    let idx = EmbeddingIndex::from_rows(vec!["a".into(), "b".into()], &rows, "h").unwrap();
    assert_eq!(top_k(&idx, &rows[0], 10).unwrap().len(), 2);
    assert!(matches!(top_k(&idx, &rows[0], 0), Err(IndexError::ZeroK)));
    assert!(matches!(top_k(&idx, &Embedding::from_raw(vec![1.0; 3]), 1), Err(IndexError::Dim { .. })));
    assert!(matches!(
        EmbeddingIndex::from_rows(vec!["a".into(), "a".into()], &rows, "h"),
        Err(IndexError::DuplicateId(_))
    ));
    let mut docs = corpus();
    docs[1].id = docs[0].id.clone();
    assert!(matches!(build_index(&model(), &Vocab::bytes_only(), &docs), Err(IndexError::DuplicateId(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn top_k_is_a_sorted_prefix(seed in any::<u64>(), n in 1usize..60, k in 1usize..70) {
        let mut r = common::rng(seed);
        let rows: Vec<Embedding> = (0..n).map(|_| Embedding::normalized((0..6).map(|_| rand::Rng::random_range(&mut r, -1i8..=1) as f32 + 0.01).collect())).collect();
        let idx = EmbeddingIndex::from_rows((0..n).map(|i| format!("{i:03}")).collect(), &rows, "h").unwrap();
        let hits = top_k(&idx, &rows[0], k).unwrap();
        prop_assert_eq!(hits.len(), k.min(n));
        for w in hits.windows(2) {
            prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].id < w[1].id));
        }
        let all = top_k(&idx, &rows[0], n).unwrap();
        prop_assert_eq!(&all[..hits.len()], &hits[..]);
    }
}
