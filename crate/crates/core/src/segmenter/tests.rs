use super::protocol::*;
use super::*;
use crate::prompts::{PointPrompt, PromptSet};
use proptest::prelude::*;
use std::io::{BufRead, BufReader, Write};
use std::time::Duration;

fn fixture(name: &str) -> String {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name);
    std::fs::read_to_string(path).unwrap()
}

fn pos(x: f64, y: f64) -> SlicePoint {
    SlicePoint {
        x,
        y,
        polarity: Polarity::Positive,
    }
}

fn neg(x: f64, y: f64) -> SlicePoint {
    SlicePoint {
        x,
        y,
        polarity: Polarity::Negative,
    }
}

fn request(width: usize, height: usize, pixels: Vec<f32>, points: Vec<SlicePoint>) -> SliceRequest {
    SliceRequest {
        request_id: 1,
        structure: StructureId::FEMUR,
        width,
        height,
        spacing: [1.0, 1.0],
        pixels,
        points,
    }
}

fn toy(req: &SliceRequest, tau: f64) -> Vec<u8> {
    ToySegmenter::new(tau).segment_slice(req).unwrap().mask
}

#[test]
fn uniform_slice_is_filled() {
    let req = request(6, 4, vec![7.0; 24], vec![pos(2.0, 1.0)]);
    assert_eq!(toy(&req, 150.0), vec![1; 24]);
}

#[test]
fn two_region_slice() {
    // left half 100, right half 2000
    let pixels = (0..40).map(|i| if i % 8 < 3 { 100.0 } else { 2000.0 }).collect();
    let req = request(8, 5, pixels, vec![pos(1.0, 2.0)]);
    let expected: Vec<u8> = (0..40).map(|i| u8::from(i % 8 < 3)).collect();
    assert_eq!(toy(&req, 200.0), expected);
}

#[test]
fn block_in_high_contrast_surround() {
    let (w, h) = (16, 16);
    let inside = |i: usize| (3..13).contains(&(i % w)) && (2..12).contains(&(i / w));
    let pixels = (0..w * h).map(|i| if inside(i) { 400.0 } else { 1500.0 }).collect();
    let req = request(w, h, pixels, vec![pos(7.0, 7.0)]);
    let mask = toy(&req, 150.0);
    assert_eq!(mask.iter().filter(|&&m| m == 1).count(), 100);
    assert!((0..w * h).all(|i| (mask[i] == 1) == inside(i)));
}

#[test]
fn negative_point_removes_its_component() {
    let req = request(6, 4, vec![7.0; 24], vec![pos(2.0, 1.0), neg(5.0, 3.0)]);
    assert_eq!(toy(&req, 150.0), vec![0; 24]);
}

#[test]
fn disjoint_seeds_give_union() {
    // two 100-blobs separated by a 2000 column
    let pixels = (0..30).map(|i| if i % 6 == 3 { 2000.0 } else { 100.0 }).collect();
    let req = request(6, 5, pixels, vec![pos(0.0, 0.0), pos(5.0, 4.0)]);
    let mask = toy(&req, 150.0);
    assert!((0..30).all(|i| (mask[i] == 1) == (i % 6 != 3)));
    // a negative in one blob removes only that blob
    let mut req2 = req.clone();
    req2.points.push(neg(4.0, 0.0));
    let mask = toy(&req2, 150.0);
    assert!((0..30).all(|i| (mask[i] == 1) == (i % 6 < 3)));
}

#[test]
fn request_preconditions() {
    let req = request(4, 4, vec![0.0; 16], vec![neg(1.0, 1.0)]);
    assert!(matches!(
        ToySegmenter::default().segment_slice(&req),
        Err(SegmenterError::NoPositivePoints)
    ));
    let req = request(4, 4, vec![0.0; 16], vec![pos(3.6, 1.0)]);
    assert!(matches!(req.validate(), Err(SegmenterError::PointOutOfBounds { .. })));
    let req = request(4, 4, vec![0.0; 15], vec![pos(1.0, 1.0)]);
    assert!(matches!(req.validate(), Err(SegmenterError::PixelCount { .. })));
}

fn arb_request() -> impl Strategy<Value = SliceRequest> {
    (1usize..9, 1usize..9).prop_flat_map(|(w, h)| {
        let point = (0.0..(w as f64 - 0.5), 0.0..(h as f64 - 0.5), any::<bool>()).prop_map(|(x, y, p)| SlicePoint {
            x,
            y,
            polarity: if p { Polarity::Positive } else { Polarity::Negative },
        });
        (
            prop::collection::vec(
                prop_oneof![Just(100.0f32), Just(400.0), Just(1500.0), -50.0f32..3000.0],
                w * h,
            ),
            (0.0..(w as f64 - 0.5), 0.0..(h as f64 - 0.5)),
            prop::collection::vec(point, 0..5),
            any::<u64>(),
            0.1f64..4.0,
        )
            .prop_map(move |(pixels, first, mut points, id, sx)| {
                points.insert(0, pos(first.0, first.1));
                SliceRequest {
                    request_id: id,
                    structure: StructureId::TIBIA,
                    width: w,
                    height: h,
                    spacing: [sx, 1.0],
                    pixels,
                    points,
                }
            })
    })
}

proptest! {
    #[test]
    fn larger_tau_never_shrinks_growth(req in arb_request(), t1 in 0.0f64..500.0, extra in 0.0f64..500.0) {
        let small = ToySegmenter::new(t1).grow(&req).unwrap();
        let large = ToySegmenter::new(t1 + extra).grow(&req).unwrap();
        prop_assert!(small.iter().zip(&large).all(|(s, l)| !*s || *l));
    }

    #[test]
    fn point_order_does_not_matter(req in arb_request(), seed in any::<u64>()) {
        let mut shuffled = req.clone();
        let n = shuffled.points.len();
        for i in (1..n).rev() {
            shuffled.points.swap(i, (seed as usize).wrapping_add(i * 7919) % (i + 1));
        }
        prop_assert_eq!(toy(&req, 150.0), toy(&shuffled, 150.0));
    }

    #[test]
    fn request_round_trip(req in arb_request()) {
        let line = encode_request(&req);
        prop_assert!(!line.contains('\n'));
        prop_assert_eq!(decode_request(&line).unwrap(), req);
    }

    #[test]
    fn response_round_trip(req in arb_request(), score in prop::option::of(0.0f64..1.0)) {
        let mut seg = ToySegmenter::default();
        let mut resp = seg.segment_slice(&req).unwrap();
        resp.score = score;
        prop_assert_eq!(decode_response(&encode_response(&resp), &req).unwrap(), resp);
    }
}

fn golden_request() -> SliceRequest {
    SliceRequest {
        request_id: 7,
        structure: StructureId::FEMORAL_CARTILAGE,
        width: 3,
        height: 2,
        spacing: [1.0, 0.5],
        pixels: vec![0.0, 1.5, -2.25, 100.0, 3000.0, 0.125],
        points: vec![pos(1.0, 0.0), neg(2.25, 1.0)],
    }
}

#[test]
fn golden_request_bytes() {
    assert_eq!(
        encode_request(&golden_request()),
        fixture("golden_request.json").trim_end()
    );
    assert_eq!(
        decode_request(fixture("golden_request.json").trim_end()).unwrap(),
        golden_request()
    );
}

#[test]
fn golden_response_decodes() {
    let resp = decode_response(fixture("golden_response.json").trim_end(), &golden_request()).unwrap();
    assert_eq!(resp.mask, vec![0, 1, 1, 0, 0, 1]);
    assert_eq!(resp.score, Some(0.875));
    assert_eq!(encode_response(&resp), fixture("golden_response.json").trim_end());
}

#[test]
fn response_contract_violations() {
    let req = golden_request();
    let ok = |mask: &[u8]| SliceResponse {
        request_id: 7,
        mask: mask.to_vec(),
        score: None,
    };
    assert!(matches!(
        decode_response(&encode_response(&ok(&[0; 5])), &req),
        Err(SegmenterError::DimensionMismatch { expected: 6, got: 5 })
    ));
    assert!(matches!(
        decode_response(
            &encode_response(&SliceResponse {
                request_id: 8,
                ..ok(&[0; 6])
            }),
            &req
        ),
        Err(SegmenterError::RequestIdMismatch { expected: 7, got: 8 })
    ));
    assert!(matches!(
        decode_response(&encode_response(&ok(&[2; 6])), &req),
        Err(SegmenterError::Protocol(_))
    ));
    assert!(matches!(
        decode_response(&encode_error(Some(7), "boom"), &req),
        Err(SegmenterError::Backend { request_id: 7, .. })
    ));
    assert!(matches!(
        decode_response("not json", &req),
        Err(SegmenterError::Protocol(_))
    ));
}

#[test]
fn malformed_request_reports_recoverable_id() {
    let (id, _) = decode_request(r#"{"request_id": 12, "structure": "femur"}"#).unwrap_err();
    assert_eq!(id, Some(12));
    let (id, _) = decode_request("{{{").unwrap_err();
    assert_eq!(id, None);
    let bad_points = encode_request(&SliceRequest {
        points: vec![neg(0.0, 0.0)],
        ..golden_request()
    });
    assert!(matches!(
        decode_request(&bad_points),
        Err((Some(7), SegmenterError::NoPositivePoints))
    ));
}

#[test]
fn spec_parsing() {
    assert_eq!(
        "toy".parse::<SegmenterSpec>().unwrap(),
        SegmenterSpec::Toy { tau: 150.0 }
    );
    assert_eq!(
        "toy:80".parse::<SegmenterSpec>().unwrap(),
        SegmenterSpec::Toy { tau: 80.0 }
    );
    assert_eq!(
        "exec:python3 sidecar.py --device cpu".parse::<SegmenterSpec>().unwrap(),
        SegmenterSpec::Exec {
            command: vec!["python3".into(), "sidecar.py".into(), "--device".into(), "cpu".into()]
        }
    );
    assert_eq!(
        "tcp:localhost:7000".parse::<SegmenterSpec>().unwrap(),
        SegmenterSpec::Tcp {
            address: "localhost:7000".into()
        }
    );
    for bad in [
        "",
        "sam",
        "toy:x",
        "toy:-1",
        "exec:",
        "tcp:host",
        "tcp::80",
        "tcp:h:99999",
    ] {
        assert!(bad.parse::<SegmenterSpec>().is_err(), "{bad}");
    }
}

fn cube_volume() -> Volume<f32> {
    let g = Grid::new([12, 10, 9], [1.0, 1.0, 2.0], [0.0; 3]).unwrap();
    // sphere of radius 4 voxels around (6, 5, 4) in voxel units
    Volume::from_fn(g, VolumeKind::Intensity, |i, j, k| {
        let d2 = (i as f64 - 6.0).powi(2) + (j as f64 - 5.0).powi(2) + (k as f64 - 4.0).powi(2);
        if d2 <= 16.0 {
            400.0
        } else {
            50.0
        }
    })
    .unwrap()
}

#[test]
fn slice_gating() {
    let vol = cube_volume();
    let ps = PromptSet::new(
        "x",
        vec![
            PointPrompt::new(StructureId::FEMUR, Polarity::Positive, [6.0, 5.0, 6.8]),
            PointPrompt::new(StructureId::TIBIA, Polarity::Positive, [6.0, 5.0, 3.0]),
        ],
    );
    let m = segment_volume(&mut ToySegmenter::default(), &vol, &ps, &StructureId::FEMUR).unwrap();
    assert!(m.is_mask());
    assert_eq!(m.grid(), vol.grid());
    for k in 0..9 {
        let n = m.slice_z(k).iter().filter(|v| **v != 0.0).count();
        assert_eq!(n > 0, k == 7, "slice {k}");
    }
    let none = segment_volume(&mut ToySegmenter::default(), &vol, &ps, &StructureId::FEMORAL_CARTILAGE);
    assert!(matches!(none, Err(SegmentVolumeError::StructureEmpty(_))));
    // negatives alone do not make a slice eligible
    let only_neg = PromptSet::new(
        "x",
        vec![PointPrompt::new(
            StructureId::FEMUR,
            Polarity::Negative,
            [0.0, 0.0, 1.0],
        )],
    );
    assert!(segment_volume(&mut ToySegmenter::default(), &vol, &only_neg, &StructureId::FEMUR).is_err());
}

#[test]
fn sphere_slices_match_flood_fill_oracle() {
    let vol = cube_volume();
    let ps = PromptSet::new(
        "x",
        [2usize, 4, 6]
            .iter()
            .map(|&k| PointPrompt::new(StructureId::FEMUR, Polarity::Positive, [6.0, 5.0, k as f64]))
            .collect(),
    );
    let m = segment_volume(&mut ToySegmenter::default(), &vol, &ps, &StructureId::FEMUR).unwrap();
    for k in 0..9 {
        for j in 0..10 {
            for i in 0..12 {
                // the sphere's cross-section is convex, so the flood fill is exactly the disc
                let expected = [2, 4, 6].contains(&k) && vol.get(i, j, k) == 400.0;
                assert_eq!(m.get(i, j, k) != 0.0, expected, "({i},{j},{k})");
            }
        }
    }
}

/// Serves one connection: answers each request with `reply(request)`.
fn tcp_backend(reply: impl Fn(&SliceRequest) -> String + Send + 'static) -> String {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut out = stream.try_clone().unwrap();
        for line in BufReader::new(stream).lines() {
            let Ok(line) = line else { break };
            let req = decode_request(&line).unwrap();
            if writeln!(out, "{}", reply(&req)).is_err() {
                break;
            }
        }
    });
    addr
}

#[test]
fn tcp_backend_with_empty_masks() {
    let addr = tcp_backend(|r| {
        encode_response(&SliceResponse {
            request_id: r.request_id,
            mask: vec![0; r.width * r.height],
            score: Some(0.5),
        })
    });
    let mut seg = ExternalSegmenter::connect(&addr, Duration::from_secs(10)).unwrap();
    let vol = cube_volume();
    let ps = PromptSet::new(
        "x",
        vec![PointPrompt::new(
            StructureId::FEMUR,
            Polarity::Positive,
            [6.0, 5.0, 4.0],
        )],
    );
    let m = segment_volume(&mut seg, &vol, &ps, &StructureId::FEMUR).unwrap();
    assert_eq!(m.count_nonzero(), 0);
    assert!(!seg.capabilities().deterministic);
}

#[test]
fn tcp_backend_with_wrong_dimensions() {
    let addr = tcp_backend(|r| {
        encode_response(&SliceResponse {
            request_id: r.request_id,
            mask: vec![0; 3],
            score: None,
        })
    });
    let mut seg = ExternalSegmenter::connect(&addr, Duration::from_secs(10)).unwrap();
    let err = seg.segment_slice(&golden_request()).unwrap_err();
    assert!(matches!(err, SegmenterError::DimensionMismatch { expected: 6, got: 3 }));
}

#[test]
fn exec_backend_failures() {
    let missing = ExternalSegmenter::spawn(&["/nonexistent/backend-binary".into()], Duration::from_secs(1));
    assert!(matches!(missing, Err(SegmenterError::Spawn { .. })));
    // `cat` echoes the request, which is not a valid response
    let mut echo = ExternalSegmenter::spawn(&["cat".into()], Duration::from_secs(10)).unwrap();
    assert!(matches!(
        echo.segment_slice(&golden_request()),
        Err(SegmenterError::Protocol(_))
    ));
    let mut silent = ExternalSegmenter::spawn(&["sleep".into(), "30".into()], Duration::from_millis(200)).unwrap();
    assert!(matches!(
        silent.segment_slice(&golden_request()),
        Err(SegmenterError::Timeout { request_id: 7, .. })
    ));
    let mut quits = ExternalSegmenter::spawn(&["true".into()], Duration::from_secs(10)).unwrap();
    assert!(quits.segment_slice(&golden_request()).is_err());
}

#[test]
fn request_ids_are_unique() {
    let a = next_request_id();
    let b = next_request_id();
    assert!(b > a);
}
