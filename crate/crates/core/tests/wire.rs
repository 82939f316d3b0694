//! External backends reached over TCP, served by the in-process stub.

use std::net::TcpListener;
use std::path::Path;
use std::thread;

use mpa::backend::stub::{serve_tcp, StubConfig, StubSegment};
use mpa::backend::{BackendKind, ClientOptions, Endpoint, WireClient};
use mpa::embed::{embed_all, Embedder, ExternalEmbedder};
use mpa::io::save_mask;
use mpa::pipeline::{make_synthetic_dataset, run, PipelineConfig, SegmentationBackend, Toggles};
use mpa::segment::{refine, ExternalSegmenter};
use mpa::{
    generate_prompts, select_support, BinaryMask, EmbeddingCache, Error, Image, PromptConfig, SegmentationRequest,
    Segmenter,
};

fn stub(cfg: StubConfig) -> Endpoint {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || serve_tcp(listener, &cfg));
    Endpoint::Tcp(addr.to_string())
}

fn embedder_stub(vector: Option<Vec<f32>>, dir: &Path) -> ExternalEmbedder {
    let ep = stub(StubConfig {
        kind: BackendKind::Embedder,
        vector,
        segment: StubSegment::Box,
        out_dir: dir.to_path_buf(),
    });
    let client = WireClient::connect(&ep, ClientOptions::default()).unwrap();
    ExternalEmbedder::new(client, "stub", dir.join("work")).unwrap()
}

fn segmenter_stub(segment: StubSegment, dir: &Path) -> ExternalSegmenter {
    let ep = stub(StubConfig {
        kind: BackendKind::Segmenter,
        vector: None,
        segment,
        out_dir: dir.join("stub"),
    });
    let client = WireClient::connect(&ep, ClientOptions::default()).unwrap();
    ExternalSegmenter::new(client, dir.join("work")).unwrap()
}

fn disk(n: usize, cx: f64, cy: f64, r: f64) -> (Image<f32>, BinaryMask) {
    let inside = |x: usize, y: usize| (x as f64 - cx).hypot(y as f64 - cy) <= r;
    let img = Image::new(n, n, 1, (0..n * n).map(|k| if inside(k % n, k / n) { 0.8 } else { 0.2 }).collect()).unwrap();
    (img, BinaryMask::from_fn(n, n, inside))
}

fn samples(n: usize) -> Vec<(String, Image<f32>)> {
    (0..n)
        .map(|i| (format!("s{i}"), disk(24, 6.0 + 2.0 * i as f64, 12.0, 3.0 + i as f64).0))
        .collect()
}

#[test]
fn embedder_echoes_fixed_vector() {
    let dir = tempfile::tempdir().unwrap();
    let v = vec![0.25, -1.5, 3.0, 0.0];
    let e = embedder_stub(Some(v.clone()), dir.path());
    assert_eq!(e.embed("a", &disk(16, 8.0, 8.0, 4.0).0).unwrap(), v);
    assert_eq!(e.embed("b", &disk(16, 3.0, 3.0, 2.0).0).unwrap(), v);
    assert_eq!(e.calls(), 2);
}

#[test]
fn cached_ids_are_not_requested_again() {
    let dir = tempfile::tempdir().unwrap();
    let e = embedder_stub(None, dir.path());
    let mut cache = EmbeddingCache::new(e.tag());
    let first = embed_all(&e, &mut cache, &samples(4)).unwrap();
    assert_eq!(e.calls(), 4);
    let second = embed_all(&e, &mut cache, &samples(4)).unwrap();
    assert_eq!(e.calls(), 4);
    assert_eq!(first, second);
    let more = embed_all(&e, &mut cache, &samples(6)).unwrap();
    assert_eq!(e.calls(), 6);
    assert_eq!(&more[..4], &first[..]);
}

#[test]
fn nan_vector_is_rejected_and_cache_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let e = embedder_stub(Some(vec![1.0, f32::NAN, 0.5]), dir.path());
    let mut cache = EmbeddingCache::new(e.tag());
    cache.insert("kept", vec![1.0, 2.0, 3.0]).unwrap();
    let before = cache.clone();
    let res = embed_all(&e, &mut cache, &samples(3));
    assert!(matches!(res, Err(Error::NonFinite(_))), "{res:?}");
    assert_eq!(cache, before);
}

#[test]
fn selection_is_identical_from_live_backend_and_warm_cache() {
    let dir = tempfile::tempdir().unwrap();
    let data = samples(7);
    let ids: Vec<String> = data.iter().map(|(id, _)| id.clone()).collect();

    let live = embedder_stub(None, dir.path());
    let mut cache = EmbeddingCache::new(live.tag());
    let fresh = embed_all(&live, &mut cache, &data).unwrap();
    let path = EmbeddingCache::path_in(dir.path(), &live.tag());
    cache.write(&path).unwrap();

    let cold = embedder_stub(None, &dir.path().join("second"));
    let mut warm = EmbeddingCache::read(&path, cold.tag()).unwrap();
    let cached = embed_all(&cold, &mut warm, &data).unwrap();
    assert_eq!(cold.calls(), 0);
    assert_eq!(select_support(&ids, &fresh, 2).unwrap(), select_support(&ids, &cached, 2).unwrap());
}

#[test]
fn fixed_mask_is_returned_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let fixed = BinaryMask::from_fn(20, 20, |x, y| (x * 7 + y * 3) % 5 == 0);
    let path = dir.path().join("fixed.png");
    save_mask(&fixed, &path).unwrap();
    let seg = segmenter_stub(StubSegment::FixedMask(path), dir.path());
    let (img, mask) = disk(20, 10.0, 10.0, 5.0);
    let prompts = generate_prompts(&mask.to_soft::<f32>(), &PromptConfig::default());
    let res = seg
        .segment(&SegmentationRequest {
            sample_id: "q",
            image: &img,
            prompts: &prompts,
        })
        .unwrap();
    assert_eq!(res.mask, fixed);
    assert_eq!(res.confidence, 1.0);
}

#[test]
fn logit_threshold_stub_is_a_refinement_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let seg = segmenter_stub(StubSegment::LogitsThreshold, dir.path());
    let (img, _) = disk(32, 15.0, 14.0, 8.0);
    // concave coarse mask so the logits differ from the box
    let coarse = BinaryMask::from_fn(32, 32, |x, y| (8..24).contains(&x) && (6..22).contains(&y) && !(x > 14 && (11..17).contains(&y)));
    let prompts = generate_prompts(&coarse.to_soft::<f32>(), &PromptConfig::default());
    let req = SegmentationRequest {
        sample_id: "q",
        image: &img,
        prompts: &prompts,
    };
    let first = seg.segment(&req).unwrap();
    assert_eq!(first.mask, coarse);
    let refined = refine(&seg, "q", &img, &prompts, first.clone(), 1, 0.5);
    assert_eq!(refined.round, 1);
    assert_eq!(refined.mask, first.mask);
    assert!(refined.warning.is_none());
    assert_eq!(seg.calls(), 2);
}

#[test]
fn wrong_backend_kind_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let ep = stub(StubConfig {
        kind: BackendKind::Segmenter,
        vector: None,
        segment: StubSegment::Box,
        out_dir: dir.path().to_path_buf(),
    });
    let client = WireClient::connect(&ep, ClientOptions::default()).unwrap();
    assert!(ExternalEmbedder::new(client, "x", dir.path()).is_err());
}

#[test]
fn pipeline_runs_against_tcp_backends() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    make_synthetic_dataset(4, 3, &root).unwrap();
    let embed = stub(StubConfig {
        kind: BackendKind::Embedder,
        vector: None,
        segment: StubSegment::Box,
        out_dir: dir.path().join("e"),
    });
    let segment = stub(StubConfig {
        kind: BackendKind::Segmenter,
        vector: None,
        segment: StubSegment::LogitsThreshold,
        out_dir: dir.path().join("s"),
    });
    let cfg = PipelineConfig {
        dataset_root: root,
        k: 1,
        image_size: 64,
        toggles: Toggles::default(),
        embedding_backend: format!("{embed}").parse().unwrap(),
        segmentation_backend: SegmentationBackend::External(segment),
        output_dir: dir.path().join("out"),
        ..Default::default()
    };
    let report = run(&cfg).unwrap();
    assert_eq!(report.records.len(), 3);
    for r in &report.records {
        assert!(r.error.is_none(), "{r:?}");
        assert_eq!(r.rounds, 1);
        // the stub returns the softened coarse mask, so prediction = coarse
        assert_eq!(r.final_dice, r.coarse_dice);
    }
    assert!(EmbeddingCache::path_in(&cfg.output_dir, "ext-256").is_file());
}
