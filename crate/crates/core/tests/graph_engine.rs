mod common;

use common::*;
use proptest::prelude::*;

use temporal_exit::graph::{
    build_desk_model, format::parse_model, read_model, write_model, TrunkConfig, Unit,
};
use temporal_exit::ops::argmax;
use temporal_exit::stream::class_centroids;
use temporal_exit::{Error, ExitGraph, Frame, MacCount, StreamConfig, Tensor};

fn desk() -> (ExitGraph, Vec<Tensor>) {
    let cfg = StreamConfig::default();
    let centroids = class_centroids(&cfg).unwrap();
    let g = build_desk_model(&centroids, &TrunkConfig::default(), cfg.seed).unwrap();
    (g, centroids)
}

fn random_frame(g: &ExitGraph, seed: u64) -> Frame {
    Frame::new(random_tensor(&mut rng(seed), g.input_shape()))
}

fn model_bytes(g: &ExitGraph) -> Vec<u8> {
    let mut buf = Vec::new();
    write_model(g, &mut buf).unwrap();
    buf
}

#[test]
fn static_cost_matches_executed_macs() {
    let graphs = [small_conv_graph(1), desk().0];
    for g in &graphs {
        for seed in 0..10 {
            let frame = random_frame(g, seed);
            for k in 0..g.exit_count() {
                let run = g.run_to_exit(&frame, k, None).unwrap();
                assert_eq!(run.macs(), g.cumulative_cost(k).unwrap(), "exit {k}");
                let traced: MacCount = run.trace().iter().map(|e| e.macs).sum();
                assert_eq!(traced, run.macs());
            }
            assert_eq!(g.run_full(&frame).unwrap().macs(), g.full_vote_cost());
        }
    }
}

#[test]
fn incremental_runs_complete_to_a_full_run() {
    let g = small_conv_graph(2);
    let frame = random_frame(&g, 3);
    let full = g.run_full(&frame).unwrap();
    for k in 0..g.exit_count() {
        let partial = g.run_to_exit(&frame, k, None).unwrap();
        assert_eq!(partial.executed_exits().collect::<Vec<_>>(), vec![k]);
        assert_eq!(partial.exit_output(k), full.exit_output(k));
        let done = g.resume_full(&frame, Some(partial)).unwrap();
        assert_eq!(done.macs(), full.macs());
        for j in 0..g.exit_count() {
            assert_eq!(done.exit_output(j), full.exit_output(j));
        }
        // no unit executes twice
        let mut units: Vec<_> = done.trace().iter().map(|e| (e.unit, e.layer)).collect();
        let n = units.len();
        units.sort_by_key(|&(u, l)| (matches!(u, Unit::Head(_)), format!("{u:?}"), l));
        units.dedup();
        assert_eq!(units.len(), n);
    }
}

#[test]
fn resumed_run_rejects_another_frame() {
    let g = small_conv_graph(3);
    let a = random_frame(&g, 1);
    let b = random_frame(&g, 1);
    let run = g.run_to_exit(&a, 0, None).unwrap();
    assert!(matches!(g.run_to_exit(&b, 1, Some(run)), Err(Error::FrameMismatch { .. })));
    let wrong = Frame::new(Tensor::zeros(vec![2, 6, 6, 3]).unwrap());
    assert!(matches!(g.run_full(&wrong), Err(Error::Shape(_))));
    assert!(matches!(g.run_to_exit(&a, 3, None), Err(Error::OutOfRange { .. })));
}

#[test]
fn desk_model_cost_ordering_and_outputs() {
    let (g, centroids) = desk();
    assert_eq!(g.exit_count(), 3);
    let c: Vec<u64> = (0..3).map(|k| g.cumulative_cost(k).unwrap().get()).collect();
    assert!(c[0] < c[1] && c[1] < c[2] && c[2] < g.full_vote_cost().get(), "{c:?}");
    for (label, centroid) in centroids.iter().enumerate() {
        let run = g.run_full(&Frame::new(centroid.clone())).unwrap();
        for k in 0..3 {
            let p = run.exit_output(k).unwrap();
            let sum: f64 = p.iter().map(|&v| f64::from(v)).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert_eq!(argmax(p).unwrap(), label, "centroid {label} at exit {k}");
        }
    }
}

#[test]
fn desk_model_is_deterministic() {
    let (a, centroids) = desk();
    let b = build_desk_model(&centroids, &TrunkConfig::default(), StreamConfig::default().seed).unwrap();
    assert_eq!(model_bytes(&a), model_bytes(&b));
    let other = build_desk_model(&centroids, &TrunkConfig::default(), 43).unwrap();
    assert_ne!(model_bytes(&a), model_bytes(&other));
    let frame = random_frame(&a, 5);
    let x = a.run_full(&frame).unwrap();
    let y = a.run_full(&frame).unwrap();
    for k in 0..3 {
        assert_eq!(x.exit_output(k), y.exit_output(k));
    }
}

#[test]
fn model_round_trip_is_bit_exact() {
    let (g, _) = desk();
    let bytes = model_bytes(&g);
    let loaded = read_model(bytes.as_slice()).unwrap();
    assert_eq!(loaded, g);
    let frame = random_frame(&g, 9);
    let (a, b) = (g.run_full(&frame).unwrap(), loaded.run_full(&frame).unwrap());
    for k in 0..g.exit_count() {
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.exit_output(k).unwrap()), bits(b.exit_output(k).unwrap()));
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.exgr");
    temporal_exit::graph::save_model(&g, &path).unwrap();
    assert_eq!(temporal_exit::graph::load_model(&path).unwrap(), g);
}

#[test]
fn damaged_model_files_are_diagnosed() {
    let (g, _) = desk();
    let bytes = model_bytes(&g);
    for cut in [0, 3, 7, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            matches!(parse_model(&bytes[..cut]), Err(Error::Format { .. })),
            "truncated at {cut}"
        );
    }
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(parse_model(&magic), Err(Error::Format { .. })));
}

fn with_header(json: &str, blob: &[f32]) -> Vec<u8> {
    let mut out = b"EXGR".to_vec();
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    for v in blob {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

const FIXTURE: &str = r#"{
  "format_version": 1,
  "class_count": 2,
  "input_shape": [2, 2, 1],
  "segments": [[
    {"kind": "conv2d", "shape": [1, 1, 1, 2], "stride": [1, 1], "padding": "valid",
     "activation": "relu", "weights": {"offset": 0, "len": 8}, "bias": {"offset": 8, "len": 8}}
  ]],
  "heads": [[
    {"kind": "pool", "pool": "avg", "window": [2, 2], "stride": [2, 2]},
    {"kind": "dense", "shape": [2, 2], "activation": "none",
     "weights": {"offset": 16, "len": 16}, "bias": {"offset": 32, "len": 8}},
    {"kind": "softmax"}
  ]],
  "blob_len": 40
}"#;

const FIXTURE_BLOB: [f32; 10] = [1.0, -1.0, 0.0, 0.5, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0];

#[test]
fn hand_written_model_runs() {
    let g = parse_model(&with_header(FIXTURE, &FIXTURE_BLOB)).unwrap();
    let frame = Frame::new(Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let run = g.run_full(&frame).unwrap();
    // channel 0 copies the input, channel 1 is relu(0.5 - x) = 0; pooled [2.5, 0]
    let p = run.exit_output(0).unwrap();
    let e = 2.5f64.exp();
    assert!((f64::from(p[0]) - e / (e + 1.0)).abs() < 1e-6);
    assert!((f64::from(p[1]) - 1.0 / (e + 1.0)).abs() < 1e-6);
    // conv 1·1·1·2·2·2 + avg pool 1·1·2 + dense 2·2
    assert_eq!(run.macs(), MacCount(14));
    assert_eq!(g.cumulative_cost(0).unwrap(), MacCount(14));
}

#[test]
fn model_header_errors() {
    let newer = FIXTURE.replace("\"format_version\": 1", "\"format_version\": 2");
    assert!(matches!(
        parse_model(&with_header(&newer, &FIXTURE_BLOB)),
        Err(Error::Version { found: 2, expected: 1, .. })
    ));
    assert!(matches!(
        parse_model(&with_header(FIXTURE, &FIXTURE_BLOB[..9])),
        Err(Error::Format { .. })
    ));
    let wrong_classes = FIXTURE.replace("\"class_count\": 2", "\"class_count\": 3");
    assert!(matches!(
        parse_model(&with_header(&wrong_classes, &FIXTURE_BLOB)),
        Err(Error::Inconsistent(_))
    ));
    let bad_len = FIXTURE.replace("\"offset\": 16, \"len\": 16", "\"offset\": 16, \"len\": 12");
    assert!(matches!(
        parse_model(&with_header(&bad_len, &FIXTURE_BLOB)),
        Err(Error::Inconsistent(_))
    ));
}

#[test]
fn single_segment_graph_costs() {
    let g = parse_model(&with_header(FIXTURE, &FIXTURE_BLOB)).unwrap();
    assert_eq!(g.cumulative_cost(0).unwrap(), g.full_vote_cost());
    assert_eq!(g.single_exit_cost(), g.full_vote_cost());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn resume_from_any_exit_equals_full_run(seed: u64, exit in 0usize..3) {
        let g = small_conv_graph(seed % 4);
        let frame = random_frame(&g, seed);
        let full = g.run_full(&frame).unwrap();
        let partial = g.run_to_exit(&frame, exit, None).unwrap();
        prop_assert_eq!(partial.macs(), g.cumulative_cost(exit).unwrap());
        let done = g.resume_full(&frame, Some(partial)).unwrap();
        prop_assert_eq!(done.macs(), full.macs());
        for k in 0..3 {
            prop_assert_eq!(done.exit_output(k), full.exit_output(k));
        }
    }

    #[test]
    fn cumulative_cost_strictly_increases(seed in 0u64..8) {
        let g = small_conv_graph(seed);
        for k in 1..g.exit_count() {
            prop_assert!(g.cumulative_cost(k).unwrap() > g.cumulative_cost(k - 1).unwrap());
        }
        prop_assert!(g.full_vote_cost() > g.single_exit_cost());
    }
}
