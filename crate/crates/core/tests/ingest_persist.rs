use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tierann::bundle::{build_bundle, Bundle};
use tierann::store::ExternalStore;
use tierann::{
    search_lazy, Error, FetchPolicy, HnswParams, LatencyModel, Metric, SearchParams,
    SimulatedStore, TierConfig, TieredVectorStore,
};

/// Writes `n` records and returns the embeddings as written.
fn write_corpus(path: &Path, n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BufWriter::new(File::create(path).unwrap());
    let mut shadow = Vec::with_capacity(n);
    for i in 0..n {
        let e: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let rec = serde_json::json!({"text": format!("record {i} / {}", i * 31 % 97), "embedding": e});
        writeln!(out, "{rec}").unwrap();
        shadow.push(e);
    }
    out.flush().unwrap();
    shadow
}

fn small_params() -> HnswParams {
    HnswParams {
        m: 6,
        ef_construction: 24,
        metric: Metric::Euclidean,
        seed: 5,
    }
}

#[test]
fn hundred_thousand_records_survive_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("big.jsonl");
    let shadow = write_corpus(&input, 100_000, 4, 1);
    let snap = dir.path().join("big.tanx");
    let report = build_bundle(&input, &snap, small_params(), 1000).unwrap();
    assert_eq!(report.nodes, 100_000);

    let bundle = Bundle::open(&snap).unwrap();
    assert_eq!(bundle.index.len(), 100_000);
    let payloads = bundle.payloads().unwrap();
    assert_eq!(payloads.len(), shadow.len());
    for (i, (id, e)) in payloads.iter().enumerate() {
        assert_eq!(*id, i as u64);
        let got: Vec<u32> = e.iter().map(|x| x.to_bits()).collect();
        let want: Vec<u32> = shadow[i].iter().map(|x| x.to_bits()).collect();
        assert_eq!(got, want, "payload {i} differs");
    }
}

#[test]
fn text_spot_check_matches_source() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("docs.jsonl");
    write_corpus(&input, 10_000, 4, 2);
    let snap = dir.path().join("docs.tanx");
    build_bundle(&input, &snap, small_params(), 777).unwrap();
    let bundle = Bundle::open(&snap).unwrap();
    let texts = bundle.texts.as_ref().unwrap();
    assert_eq!(texts.len(), 10_000);

    let source: Vec<String> = std::fs::read_to_string(&input)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["text"].as_str().unwrap().to_owned())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let id = rng.gen_range(0..10_000u64);
        assert_eq!(texts.get_text(id).unwrap(), source[id as usize]);
    }
    assert!(matches!(texts.get_text(10_000), Err(Error::MissingText(10_000))));
}

#[test]
fn texts_are_read_only_for_final_results() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("lazy.jsonl");
    let shadow = write_corpus(&input, 2_000, 8, 4);
    let snap = dir.path().join("lazy.tanx");
    build_bundle(&input, &snap, small_params(), 500).unwrap();
    let bundle = Bundle::open(&snap).unwrap();
    let texts = bundle.texts.as_ref().unwrap();

    let backend = Arc::new(SimulatedStore::copy_from(bundle.vectors.as_ref(), LatencyModel::default()).unwrap());
    let store = TieredVectorStore::new(backend, TierConfig::new(200, 200));
    let params = SearchParams::new(5, 48).unwrap();
    let (hits, stats) = search_lazy(&bundle.index, &shadow[17], params, &store).unwrap();
    assert!(stats.n_q > 5);
    assert_eq!(texts.reads(), 0);

    let ids: Vec<u64> = hits.iter().map(|h| h.id).collect();
    let got = texts.get_texts(&ids).unwrap();
    assert_eq!(texts.reads(), 5);
    assert_eq!(hits[0].id, 17);
    assert!(got[0].starts_with("record 17 "));
}

#[test]
fn same_input_and_seed_give_identical_bundles() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.jsonl");
    write_corpus(&input, 3_000, 6, 5);
    let mut files = Vec::new();
    for sub in ["a", "b"] {
        let d = dir.path().join(sub);
        std::fs::create_dir(&d).unwrap();
        let snap = d.join("idx.tanx");
        build_bundle(&input, &snap, small_params(), 256).unwrap();
        files.push(
            ["tanx", "vectors", "texts"]
                .map(|ext| std::fs::read(snap.with_extension(ext)).unwrap()),
        );
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn chunk_size_does_not_change_the_graph() {
    // Payloads are written before each chunk is linked, so the graph depends
    // only on insertion order.
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.jsonl");
    write_corpus(&input, 1_500, 6, 6);
    let a = dir.path().join("a.tanx");
    let b = dir.path().join("b.tanx");
    build_bundle(&input, &a, small_params(), 1).unwrap();
    build_bundle(&input, &b, small_params(), 1_500).unwrap();
    let (a, b) = (Bundle::open(&a).unwrap(), Bundle::open(&b).unwrap());
    assert_eq!(a.index.nodes(), b.index.nodes());
}

#[test]
fn adjacency_corruption_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.jsonl");
    write_corpus(&input, 500, 4, 7);
    let snap = dir.path().join("idx.tanx");
    build_bundle(&input, &snap, small_params(), 100).unwrap();

    let mut bytes = std::fs::read(&snap).unwrap();
    let at = bytes.windows(4).position(|w| w == b"ADJL").unwrap();
    bytes[at + 40] ^= 0x10;
    std::fs::write(&snap, &bytes).unwrap();
    assert!(matches!(Bundle::open(&snap), Err(Error::Integrity(_))));
}

#[test]
fn bad_line_keeps_earlier_chunks() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.jsonl");
    write_corpus(&input, 30, 4, 8);
    let mut f = std::fs::OpenOptions::new().append(true).open(&input).unwrap();
    writeln!(f, "{{\"text\": \"short\", \"embedding\": [1.0, 2.0]}}").unwrap();
    let snap = dir.path().join("idx.tanx");
    let err = build_bundle(&input, &snap, small_params(), 10).unwrap_err();
    assert!(matches!(err, Error::Ingest { line: 31, .. }), "{err}");
}

#[test]
fn upper_level_share_tracks_one_over_m() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.jsonl");
    write_corpus(&input, 20_000, 2, 9);
    let snap = dir.path().join("idx.tanx");
    let params = HnswParams { ef_construction: 8, ..small_params() };
    let report = build_bundle(&input, &snap, params, 5_000).unwrap();
    let expected = 1.0 / params.m as f64;
    let rel = (report.upper_fraction - expected).abs() / expected;
    assert!(rel < 0.2, "upper share {} vs {expected}", report.upper_fraction);
}

#[test]
fn every_policy_finds_the_stored_vector() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.jsonl");
    let shadow = write_corpus(&input, 1_000, 8, 10);
    let snap = dir.path().join("idx.tanx");
    build_bundle(&input, &snap, small_params(), 100).unwrap();
    let bundle = Bundle::open(&snap).unwrap();
    let backend = Arc::new(SimulatedStore::copy_from(bundle.vectors.as_ref(), LatencyModel::default()).unwrap());
    for policy in [FetchPolicy::Lazy, FetchPolicy::OnDemandItem, FetchPolicy::FixedPrefetch { size: 8 }] {
        let store = TieredVectorStore::new(backend.clone(), TierConfig::new(64, 64));
        let params = SearchParams::new(3, 40).unwrap();
        let (hits, _) = policy.run(&bundle.index, &store, &shadow[421], params).unwrap();
        assert_eq!(hits[0].id, 421, "{policy}");
        assert_eq!(hits[0].distance, 0.0);
    }
    assert_eq!(backend.len(), 1_000);
}
