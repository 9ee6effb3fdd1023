//! End-to-end behavior of the library: detectors on rendered scenes, report
//! files, segmentation, GeoJSON and configuration round trips.

use std::path::Path;
use std::str::FromStr;

use railwatch::detecthub::{ballast_heuristic, switch_heuristic, BallastHeuristic, BallastParams, SwitchHeuristic};
use railwatch::health::{
    assets_of, geojson_string, read_events, read_report, EventRecord, RunStatus, Segmentation, SegmentFlag,
    SegmentHealth, EVENTS_FILE, MANIFEST_FILE, SEGMENTS_FILE,
};
use railwatch::ingest::{list_frames, parse_manifest, GeoPoint};
use railwatch::pipeline::{analyze, analyze_frames, AnalyzeOptions};
use railwatch::signalstate::{AssetRecord, AssetType, SignalState};
use railwatch::synth::{
    corpus, evaluate, render_frames, render_scene, GpsSpec, KinkSpec, LampColor, SignalSpec, SceneRenderer, SceneSpec, SupportRailSpec,
    Side, CONFIG_FILE, MANIFEST_FILE as SCENE_MANIFEST, TRUTH_FILE,
};
use railwatch::trackscan::{ScanParams, TrackScanner};
use railwatch::{load_config, ExecMode, RunConfig};

fn default_config_path() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("config/default.toml")
}

fn ballast_confidence(density: f64, seed: u64) -> f64 {
    let mut spec = SceneSpec::new(seed);
    spec.ballast_density = density;
    let frame = SceneRenderer::new(&spec).unwrap().frame(0);
    ballast_heuristic(&frame, &spec.calibration).unwrap().expect("rails found").confidence
}

#[test]
fn ballast_confidence_falls_with_gravel_density() {
    for seed in 0..3 {
        let conf: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|&d| ballast_confidence(d, seed)).collect();
        assert!(conf.windows(2).all(|w| w[1] <= w[0]), "seed {seed}: {conf:?}");
        assert!(conf[0] > 0.9, "seed {seed}: bare ground {conf:?}");
        assert!(conf[4] < 0.1, "seed {seed}: full gravel {conf:?}");
    }
}

#[test]
fn ballast_plugin_matches_free_function() {
    let mut spec = SceneSpec::new(3);
    spec.ballast_density = 0.2;
    let frame = SceneRenderer::new(&spec).unwrap().frame(0);
    let plugin = BallastHeuristic::new(spec.calibration.clone(), ScanParams::default(), BallastParams::default()).unwrap();
    assert_eq!(plugin.detect_frame(&frame).unwrap(), ballast_heuristic(&frame, &spec.calibration).unwrap());
}

#[test]
fn switch_scenes_detected_and_support_rail_is_not_a_switch() {
    for seed in 0..10 {
        let spec = corpus::switch_scene(seed);
        let scanner = TrackScanner::new(&spec.calibration, &ScanParams::default()).unwrap();
        let frame = SceneRenderer::new(&spec).unwrap().frame(0);
        let (out, _) = scanner.scan(&frame, &scanner.initial_state()).unwrap();
        let d = switch_heuristic(&frame, &spec.calibration, &out.observation).unwrap();
        let conf = d.map(|d| d.confidence).unwrap_or(0.0);
        assert!(conf >= 0.8, "seed {seed}: switch confidence {conf}");
    }
    for side in [Side::Left, Side::Right] {
        let mut spec = SceneSpec::new(5);
        spec.distractors.support_rail = Some(SupportRailSpec { side, offset_px: 16.0 });
        let scanner = TrackScanner::new(&spec.calibration, &ScanParams::default()).unwrap();
        let frame = SceneRenderer::new(&spec).unwrap().frame(0);
        let (out, _) = scanner.scan(&frame, &scanner.initial_state()).unwrap();
        let (_, binary) = scanner.prepare(&frame).unwrap();
        let plugin = SwitchHeuristic::new(spec.calibration.clone(), ScanParams::default(), Default::default()).unwrap();
        assert_eq!(plugin.detect(&binary, &out.observation), None, "{side:?}");
    }
}

#[test]
fn empty_run_writes_all_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    let s = analyze_frames(&cfg, Vec::new(), Segmentation::Frames(10), dir.path(), AnalyzeOptions::default()).unwrap();
    assert_eq!(s.manifest.status, RunStatus::Complete);
    assert_eq!(s.manifest.frame_count, 0);
    assert!(!s.has_flags());
    for f in [EVENTS_FILE, SEGMENTS_FILE, MANIFEST_FILE] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let r = read_report(dir.path()).unwrap();
    assert!(r.events.is_empty() && r.segments.is_empty());
}

#[test]
fn single_kink_raises_exactly_one_flag() {
    let mut spec = SceneSpec::new(21);
    spec.frames = 8;
    spec.kink = Some(KinkSpec {
        start_frame: 4,
        duration: 1,
        amplitude_px: 13.0,
        center_row: 120.0,
        length_rows: 120.0,
    });
    let dir = tempfile::tempdir().unwrap();
    let frames = render_frames(&spec).unwrap();
    let cfg = spec.run_config();
    let s = analyze_frames(&cfg, frames, Segmentation::Frames(4), dir.path(), AnalyzeOptions::default()).unwrap();
    let events = read_events(&dir.path().join(EVENTS_FILE)).unwrap();
    let flags: Vec<_> = events.iter().filter(|e| matches!(e, EventRecord::Flag(_))).collect();
    assert_eq!(flags.len(), 1, "{flags:?}");
    let EventRecord::Flag(f) = flags[0] else { unreachable!() };
    assert_eq!((f.frame_index, f.class_name.as_str()), (4, "sunkink"));
    assert_eq!(s.manifest.flag_count, 1);
    let segs = read_report(dir.path()).unwrap().segments;
    assert_eq!(segs.len(), 2);
    assert_eq!(segs[1].category1_flags.len(), 1);
    assert!(segs[0].category1_flags.is_empty());
    assert!(segs[1].mean_thi < segs[0].mean_thi);
}

#[test]
fn synth_scene_round_trips_through_analyze_and_eval() {
    let mut spec = SceneSpec::new(30);
    spec.frames = 24;
    spec.ballast_density = 0.1;
    spec.kink = Some(KinkSpec {
        start_frame: 8,
        duration: 3,
        amplitude_px: 14.0,
        center_row: 110.0,
        length_rows: 120.0,
    });
    spec.signals = vec![SignalSpec {
        first_frame: 3,
        last_frame: 18,
        bbox_start: [380.0, 40.0, 16.0, 40.0],
        bbox_end: Some([372.0, 36.0, 18.0, 44.0]),
        color: LampColor::Red,
        lamp_fraction: 0.2,
        dropout_frames: vec![7, 8, 12],
        detector_confidence: 0.9,
    }];
    spec.gps = Some(GpsSpec {
        lat: 12.97,
        lon: 77.59,
        meters_per_frame: 7.0,
        bearing_deg: 0.0,
    });
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    let truth = render_scene(&spec, &scene).unwrap();

    let entries = parse_manifest(&scene.join(SCENE_MANIFEST)).unwrap();
    assert_eq!(entries.len(), 24);
    for (e, t) in entries.iter().zip(&truth.frames) {
        assert_eq!(e.index, t.frame_index);
        assert_eq!(e.timestamp_ms, t.timestamp_ms);
        assert_eq!(e.geo, t.geo, "manifest GPS must round-trip exactly");
    }
    assert_eq!(list_frames(&scene.join(SCENE_MANIFEST)).unwrap(), entries);

    let cfg = load_config(&scene.join(CONFIG_FILE)).unwrap();
    assert_eq!(cfg.segment_length_m, 100.0);
    let report = dir.path().join("report");
    let s = analyze(&cfg, &scene.join(SCENE_MANIFEST), &report, AnalyzeOptions::default()).unwrap();
    assert!(s.has_flags());
    assert_eq!(s.manifest.frame_count, 24);

    // 7 m per frame and 100 m segments: frames 0-14 and 15-23
    let segs = read_report(&report).unwrap().segments;
    let spans: Vec<(u64, u64)> = segs.iter().map(|s| (s.first_frame, s.last_frame)).collect();
    assert_eq!(spans, vec![(0, 14), (15, 23)]);
    for s in &segs {
        assert!(s.start.unwrap().haversine_m(&s.end.unwrap()) < 100.0);
    }

    let eval = evaluate(&report, &scene.join(TRUTH_FILE), &Default::default()).unwrap();
    assert_eq!(eval.per_class["sunkink"].recall, Some(1.0));
    assert_eq!(eval.per_class["sunkink"].precision, Some(1.0));
    assert_eq!(eval.per_class["loose_ballast"].recall, Some(1.0));
    assert_eq!(eval.asset_level.display, "100.0%");
}

#[test]
fn frame_directory_without_gps_segments_by_frames() {
    let mut spec = SceneSpec::new(2);
    spec.frames = 5;
    let dir = tempfile::tempdir().unwrap();
    let frames_dir = dir.path().join("frames");
    std::fs::create_dir(&frames_dir).unwrap();
    for f in render_frames(&spec).unwrap() {
        f.image.save(&frames_dir.join(format!("frame_{:03}.png", f.index))).unwrap();
    }
    std::fs::write(frames_dir.join("notes.txt"), "not a frame").unwrap();
    let cfg = RunConfig {
        segment_length_frames: 2,
        ..RunConfig::default()
    };
    let report = dir.path().join("report");
    let s = analyze(&cfg, &frames_dir, &report, AnalyzeOptions::default()).unwrap();
    assert_eq!(s.manifest.frame_count, 5);
    assert!(!s.has_flags());
    let spans: Vec<(u64, u64)> =
        read_report(&report).unwrap().segments.iter().map(|s| (s.first_frame, s.last_frame)).collect();
    assert_eq!(spans, vec![(0, 1), (2, 3), (4, 4)]);
}

#[test]
fn unreadable_frame_is_skipped_and_counted() {
    let mut spec = SceneSpec::new(2);
    spec.frames = 3;
    let dir = tempfile::tempdir().unwrap();
    render_scene(&spec, dir.path()).unwrap();
    std::fs::write(dir.path().join("000001.png"), b"garbage").unwrap();
    let cfg = load_config(&dir.path().join(CONFIG_FILE)).unwrap();
    let report = dir.path().join("report");
    let s = analyze(&cfg, &dir.path().join(SCENE_MANIFEST), &report, AnalyzeOptions::default()).unwrap();
    assert_eq!((s.manifest.frame_count, s.manifest.skipped_frames), (2, 1));
    let on_disk: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(on_disk["skipped_frames"], 1);
}

#[test]
fn sequential_and_parallel_runs_agree() {
    let spec = corpus::kinked_scene(11, 12.0);
    let frames = render_frames(&spec).unwrap();
    let cfg = spec.run_config();
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for (name, mode, batch) in [("p", ExecMode::Parallel, 16), ("s", ExecMode::Sequential, 1)] {
        let out = dir.path().join(name);
        analyze_frames(&cfg, frames.clone(), Segmentation::Frames(3), &out, AnalyzeOptions { mode, batch }).unwrap();
        outputs.push(
            [EVENTS_FILE, SEGMENTS_FILE, MANIFEST_FILE].map(|f| std::fs::read(out.join(f)).unwrap()),
        );
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn geojson_fixture_is_valid() {
    let seg = SegmentHealth {
        segment_id: 0,
        first_frame: 0,
        last_frame: 24,
        start: Some(GeoPoint::new(12.97, 77.59).unwrap()),
        end: Some(GeoPoint::new(12.98, 77.60).unwrap()),
        mean_thi: 0.85,
        frame_count: 25,
        category1_flags: vec![SegmentFlag {
            frame_index: 7,
            class_name: "sunkink".into(),
            confidence: 0.9,
        }],
    };
    let asset = AssetRecord {
        asset_id: "signal-00000".into(),
        asset_type: AssetType::Signal,
        first_frame: 3,
        last_frame: 9,
        geo: Some(GeoPoint::new(12.975, 77.595).unwrap()),
        peak_confidence: 0.9,
        state: Some(SignalState::Red),
        observations: 6,
    };
    let text = geojson_string(&[seg], &[asset]).unwrap();
    let gj = geojson::GeoJson::from_str(&text).expect("valid GeoJSON");
    let geojson::GeoJson::FeatureCollection(fc) = gj else {
        panic!("not a FeatureCollection")
    };
    assert_eq!(fc.features.len(), 2);
    match &fc.features[0].geometry.as_ref().unwrap().value {
        geojson::Value::LineString(c) => assert_eq!(c, &vec![vec![77.59, 12.97], vec![77.60, 12.98]]),
        other => panic!("segment geometry {other:?}"),
    }
    let props = fc.features[0].properties.as_ref().unwrap();
    assert_eq!(props["mean_thi"], 0.85);
    assert_eq!(props["flags"][0]["class_name"], "sunkink");
    match &fc.features[1].geometry.as_ref().unwrap().value {
        geojson::Value::Point(c) => assert_eq!(c, &vec![77.595, 12.975]),
        other => panic!("asset geometry {other:?}"),
    }
    assert_eq!(fc.features[1].properties.as_ref().unwrap()["state"], "red");
}

#[test]
fn geojson_without_coordinates_is_an_error() {
    let seg = SegmentHealth {
        segment_id: 0,
        first_frame: 0,
        last_frame: 3,
        start: None,
        end: None,
        mean_thi: 1.0,
        frame_count: 4,
        category1_flags: Vec::new(),
    };
    assert!(geojson_string(&[seg], &assets_of(&[])).is_err());
}

#[test]
fn shipped_default_config_matches_builtin_defaults() {
    let cfg = load_config(&default_config_path()).unwrap();
    let builtin = RunConfig::default();
    assert_eq!(cfg.weight_table().unwrap().weights(), builtin.weight_table().unwrap().weights());
    let normalized = RunConfig {
        thi_weights: None,
        base_dir: builtin.base_dir.clone(),
        ..cfg.clone()
    };
    assert_eq!(normalized, builtin);
    assert_eq!(cfg.segment_length_m, 100.0);
}

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = load_config(&default_config_path()).unwrap();
    cfg.segment_length_m = 250.0;
    cfg.plugins.insert("signal".into(), "replay:dets.txt".into());
    let path = dir.path().join("run.toml");
    std::fs::write(&path, cfg.to_toml_string()).unwrap();
    let back = load_config(&path).unwrap();
    assert_eq!(back.segment_length_m, 250.0);
    assert_eq!(back.hash(), cfg.hash());
    let bindings = back.plugin_bindings().unwrap();
    assert!(bindings.iter().any(|(s, c)| s.to_string() == format!("replay:{}", dir.path().join("dets.txt").display())
        && c == &vec!["signal".to_string()]));
}

#[test]
fn scene_spec_file_round_trip() {
    let spec = corpus::signal_scene(9, 3);
    let back = SceneSpec::from_toml_str(&spec.to_toml_string()).unwrap();
    assert_eq!(back, spec);
}

#[test]
fn external_process_plugin_feeds_association_and_contract_violations_are_dropped() {
    let mut spec = SceneSpec::new(12);
    spec.frames = 6;
    spec.signals = vec![SignalSpec {
        first_frame: 0,
        last_frame: 5,
        bbox_start: [380.0, 40.0, 16.0, 40.0],
        bbox_end: None,
        color: LampColor::Red,
        lamp_fraction: 0.2,
        dropout_frames: Vec::new(),
        detector_confidence: 0.9,
    }];
    // answers every frame whose image exists; frame 2 breaks the contract
    let script = r#"while read idx path; do
  if [ -f "$path" ]; then
    if [ "$idx" = 2 ]; then c=1.5; else c=0.9; fi
    echo "$idx signal $c 380 40 16 40"
  fi
  echo
done"#;
    let mut cfg = spec.run_config();
    cfg.plugins.insert("signal".into(), format!("exec:{script}"));

    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    render_scene(&spec, &scene).unwrap();
    let from_disk = dir.path().join("disk");
    let s = analyze(&cfg, &scene.join(SCENE_MANIFEST), &from_disk, AnalyzeOptions::default()).unwrap();
    assert_eq!(s.manifest.plugin_warnings, 1);
    assert_eq!(s.warnings[0].frame_index, 2);

    let in_memory = dir.path().join("memory");
    analyze_frames(&cfg, render_frames(&spec).unwrap(), Segmentation::Frames(1000), &in_memory, AnalyzeOptions::default())
        .unwrap();
    for out in [&from_disk, &in_memory] {
        let assets = assets_of(&read_report(out).unwrap().events);
        assert_eq!(assets.len(), 1, "{}", out.display());
        assert_eq!((assets[0].first_frame, assets[0].last_frame, assets[0].observations), (0, 5, 5));
        assert_eq!(assets[0].state, Some(SignalState::Red));
    }
}

#[test]
fn report_coordinates_survive_reading_back() {
    let g = GeoPoint::new(12.970863347549175, 77.59000000000001).unwrap();
    let seg = SegmentHealth {
        segment_id: 0,
        first_frame: 0,
        last_frame: 0,
        start: Some(g),
        end: Some(g),
        mean_thi: 0.510465045407448,
        frame_count: 1,
        category1_flags: Vec::new(),
    };
    let dir = tempfile::tempdir().unwrap();
    let results = railwatch::health::RunResults { events: Vec::new(), segments: vec![seg.clone()] };
    railwatch::health::emit_report(&results, &railwatch::health::RunManifest::new(String::new()), dir.path()).unwrap();
    assert_eq!(read_report(dir.path()).unwrap().segments, vec![seg]);
}
