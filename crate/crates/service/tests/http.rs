use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use chrono::{Duration, TimeZone, Utc};
use http_body_util::BodyExt;
use lungpatch_core::imaging::{decode_pgm, load_image, save_pgm, Image};
use lungpatch_core::labels::{
    read_manifest, write_manifest, AnnotationLog, CaseRecord, Source, Split,
};
use lungpatch_core::lunggrid::build_grid;
use lungpatch_core::nnet::{save_checkpoint, train, Checkpoint, TinyResNet, TrainConfig};
use lungpatch_core::pipeline::{grid_for_mask, patch_set, prepare_case, PrepareOptions};
use lungpatch_core::segbaseline::segment_lungs;
use lungpatch_core::synth::{write_dataset, SynthConfig, MANIFEST_FILE};
use lungpatch_core::{lunggrid::mask_to_lung_boxes, GridSpec, SegConfig};
use lungpatch_service::{router, CaseScores, ServiceConfig, Store};
use serde_json::{json, Value};
use tower::ServiceExt;

const FLAT: &str = "flat-0000";

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    cfg: ServiceConfig,
}

/// Six synthetic cases plus one uniform image the segmenter cannot split into lungs.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let synth = SynthConfig {
        n: 6,
        seed: 9,
        ..SynthConfig::default()
    };
    let mut cases = write_dataset(&synth, &root).unwrap();
    save_pgm(&Image::filled(64, 64, 90), root.join("images/flat.pgm")).unwrap();
    cases.push(CaseRecord {
        case_id: FLAT.into(),
        image_path: "images/flat.pgm".into(),
        mask_path: None,
        nodules: vec![],
        difficult: false,
        source: Source::Synthetic,
        split: Split::Unassigned,
    });
    let manifest = root.join(MANIFEST_FILE);
    write_manifest(&manifest, &cases).unwrap();
    let cfg = ServiceConfig::new(&manifest, root.join("annotations.jsonl"));
    Fixture {
        _dir: dir,
        root,
        cfg,
    }
}

/// Small model trained at a high rate so it reaches confident outputs in a few epochs.
fn toy_checkpoint() -> &'static Checkpoint {
    static CKPT: OnceLock<Checkpoint> = OnceLock::new();
    CKPT.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let synth = SynthConfig {
            n: 40,
            seed: 21,
            ..SynthConfig::default()
        };
        write_dataset(&synth, dir.path()).unwrap();
        let opts = PrepareOptions::default();
        let prepared: Vec<_> = read_manifest(dir.path().join(MANIFEST_FILE))
            .unwrap()
            .into_iter()
            .map(|mut c| {
                c.split = Split::Train;
                prepare_case(&c, dir.path(), &opts).unwrap()
            })
            .collect();
        let cfg = TrainConfig {
            base_channels: 4,
            base_lr: 0.02,
            warmup_epochs: 2,
            total_epochs: 20,
            seed: 5,
            ..TrainConfig::default()
        };
        let out = train(
            TinyResNet::new(1, 4, 5),
            &patch_set(&prepared, Split::Train),
            None,
            &cfg,
        )
        .unwrap();
        Checkpoint::new(&out.net, cfg, out.class_weights, out.history)
    })
}

fn with_model(fx: &mut Fixture) {
    let p = fx.root.join("model.json");
    save_checkpoint(toy_checkpoint(), &p).unwrap();
    fx.cfg.checkpoint = Some(p);
    fx.cfg.scores = Some(fx.root.join("scores.jsonl"));
}

fn app(cfg: &ServiceConfig) -> Router {
    router(Arc::new(Store::open(cfg).unwrap()))
}

async fn send(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (
        status,
        resp.into_body()
            .collect()
            .await
            .unwrap()
            .to_bytes()
            .to_vec(),
    )
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = send(app, "GET", uri, None).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

fn annotation(positives: &[usize], started: i64, finished: i64) -> Value {
    let t0 = Utc.with_ymd_and_hms(2024, 5, 1, 9, 0, 0).unwrap();
    json!({
        "positives": positives,
        "annotator": "reader-1",
        "started_at": t0 + Duration::milliseconds(started),
        "finished_at": t0 + Duration::milliseconds(finished),
    })
}

fn log_lines(path: &Path) -> usize {
    std::fs::read_to_string(path).map_or(0, |s| s.lines().count())
}

#[tokio::test]
async fn case_detail_serves_the_build_grid_rects() {
    let fx = fixture();
    let app = app(&fx.cfg);
    let (status, raw) = send(&app, "GET", "/cases/syn-0000", None).await;
    assert_eq!(status, StatusCode::OK);
    let raw = String::from_utf8(raw).unwrap();
    let doc: Value = serde_json::from_str(&raw).unwrap();

    let img = load_image(fx.root.join("images/syn-0000.pgm")).unwrap();
    let mask = segment_lungs(&img, &SegConfig::default()).unwrap();
    let (l, r) = mask_to_lung_boxes(&mask).unwrap();
    let grid = build_grid(l, r, GridSpec::default()).unwrap();
    let want: Vec<_> = grid.rects().collect();
    assert_eq!(doc["rects"].as_array().unwrap().len(), 16);
    let rects = format!("\"rects\":{}", serde_json::to_string(&want).unwrap());
    assert!(raw.contains(&rects), "{raw}");
    assert_eq!(
        doc["grid"],
        serde_json::to_value(GridSpec::default()).unwrap()
    );
    assert_eq!(doc["image"], "/cases/syn-0000/image");
    assert_eq!(
        (doc["width"].as_u64(), doc["height"].as_u64()),
        (Some(256), Some(256))
    );
    // no model, no scores
    assert!(doc.get("scores").is_none());
    assert!(doc.get("cam").is_none());
    assert_eq!(doc["status"], "unread");
    assert_eq!(grid_for_mask(&mask, GridSpec::default()).unwrap(), grid);
}

#[tokio::test]
async fn unknown_case_is_not_found_everywhere() {
    let fx = fixture();
    let app = app(&fx.cfg);
    assert_eq!(get_json(&app, "/cases/nope").await.0, StatusCode::NOT_FOUND);
    assert_eq!(
        send(&app, "GET", "/cases/nope/image", None).await.0,
        StatusCode::NOT_FOUND
    );
    let (s, _) = send(
        &app,
        "POST",
        "/cases/nope/annotations",
        Some(annotation(&[1], 0, 10)),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(
        send(&app, "POST", "/predict/nope", None).await.0,
        StatusCode::SERVICE_UNAVAILABLE
    );
}

#[tokio::test]
async fn segmentation_failure_is_a_conflict_with_reason() {
    let fx = fixture();
    let app = app(&fx.cfg);
    let (status, doc) = get_json(&app, &format!("/cases/{FLAT}")).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let msg = doc["error"].as_str().unwrap();
    assert!(
        msg.contains(FLAT) && msg.contains("segmentation failed"),
        "{msg}"
    );
}

#[tokio::test]
async fn annotation_round_trip_and_status() {
    let fx = fixture();
    let app = app(&fx.cfg);
    let (_, doc) = get_json(&app, "/cases/syn-0001?annotator=reader-1").await;
    assert_eq!(doc["status"], "in_progress");
    assert_eq!(doc["assigned_to"], "reader-1");

    let (s, body) = send(
        &app,
        "POST",
        "/cases/syn-0001/annotations",
        Some(annotation(&[3], 0, 4250)),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED);
    let rec: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(rec["positives"], json!([3]));
    assert_eq!(rec["duration_ms"], 4250);
    assert!(rec["received_at"].is_string());

    let (_, doc) = get_json(&app, "/cases/syn-0001").await;
    assert_eq!(doc["status"], "labeled");
    assert_eq!(doc["annotations"], json!([rec]));
    let (_, list) = get_json(&app, "/cases/syn-0001/annotations").await;
    assert_eq!(list, json!([rec]));

    // an empty selection is a valid all-negative annotation
    let (s, _) = send(
        &app,
        "POST",
        "/cases/syn-0001/annotations",
        Some(annotation(&[], 0, 10)),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(log_lines(&fx.cfg.annotation_log), 2);
}

#[tokio::test]
async fn invalid_annotations_are_rejected_and_not_persisted() {
    let fx = fixture();
    let app = app(&fx.cfg);
    let uri = "/cases/syn-0002/annotations";
    assert_eq!(
        send(&app, "POST", uri, Some(annotation(&[99], 0, 10)))
            .await
            .0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    assert_eq!(
        send(&app, "POST", uri, Some(annotation(&[2], 10, 0)))
            .await
            .0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    let mut blank = annotation(&[2], 0, 10);
    blank["annotator"] = json!("  ");
    assert_eq!(
        send(&app, "POST", uri, Some(blank)).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    let mut stale = annotation(&[2], 0, 10);
    stale["grid"] = serde_json::to_value(GridSpec::six(0.25)).unwrap();
    assert_eq!(
        send(&app, "POST", uri, Some(stale)).await.0,
        StatusCode::CONFLICT
    );

    assert_eq!(log_lines(&fx.cfg.annotation_log), 0);
    let (_, doc) = get_json(&app, "/cases/syn-0002").await;
    assert_eq!(doc["annotations"], json!([]));
    assert_eq!(doc["status"], "unread");
}

#[tokio::test]
async fn replaying_the_log_reconstructs_served_state() {
    let fx = fixture();
    let app1 = app(&fx.cfg);
    for (case, pos) in [
        ("syn-0000", vec![1, 2]),
        ("syn-0003", vec![]),
        ("syn-0000", vec![15]),
    ] {
        let (s, _) = send(
            &app1,
            "POST",
            &format!("/cases/{case}/annotations"),
            Some(annotation(&pos, 0, 500)),
        )
        .await;
        assert_eq!(s, StatusCode::CREATED);
    }
    let app2 = app(&fx.cfg);
    for case in ["syn-0000", "syn-0003", "syn-0004"] {
        let (_, a) = get_json(&app1, &format!("/cases/{case}")).await;
        let (_, b) = get_json(&app2, &format!("/cases/{case}")).await;
        assert_eq!(a["annotations"], b["annotations"]);
        assert_eq!(a["status"], b["status"]);
    }
    let (_, doc) = get_json(&app2, "/cases/syn-0000/annotations").await;
    let order: Vec<Value> = doc
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["positives"].clone())
        .collect();
    assert_eq!(order, vec![json!([1, 2]), json!([15])]);
}

#[test]
fn concurrent_annotators_are_serialized_into_the_log() {
    let fx = fixture();
    let store = Store::open(&fx.cfg).unwrap();
    std::thread::scope(|s| {
        for t in 0..6 {
            let store = &store;
            s.spawn(move || {
                for k in 0..5 {
                    let body = serde_json::from_value(annotation(&[t, k], 0, 100)).unwrap();
                    store.annotate(&format!("syn-000{}", t % 3), body).unwrap();
                }
            });
        }
    });
    let replayed = AnnotationLog::replay(&fx.cfg.annotation_log).unwrap();
    assert_eq!(replayed.len(), 30);
    for case in ["syn-0000", "syn-0001", "syn-0002"] {
        let from_log: Vec<_> = replayed
            .iter()
            .filter(|r| r.case_id == case)
            .cloned()
            .collect();
        assert_eq!(store.annotations(case).unwrap(), from_log);
    }
}

#[tokio::test]
async fn worklist_orders_by_score_then_id_with_unscored_last() {
    let mut fx = fixture();
    let scores = fx.root.join("scores.jsonl");
    let lines: String = [
        ("syn-0001", vec![0.1, 0.2]),
        ("syn-0004", vec![0.9, 0.0]),
        ("syn-0000", vec![0.2, 0.2]),
        ("syn-0002", vec![0.95, 0.95, 0.95]),
        // later entries replace earlier ones
        ("syn-0001", vec![0.1, 0.2, 0.05]),
    ]
    .iter()
    .map(|(id, s)| {
        serde_json::to_string(&CaseScores {
            case_id: id.to_string(),
            scores: s.clone(),
        })
        .unwrap()
            + "\n"
    })
    .collect();
    std::fs::write(&scores, lines).unwrap();
    fx.cfg.scores = Some(scores);
    let app = app(&fx.cfg);
    let ids = |doc: &Value| -> Vec<String> {
        doc.as_array()
            .unwrap()
            .iter()
            .map(|e| e["case_id"].as_str().unwrap().to_string())
            .collect()
    };
    let unscored = ["flat-0000", "syn-0003", "syn-0005"];
    let (_, risk) = get_json(&app, "/worklist?order=risk").await;
    let mut want = vec!["syn-0002", "syn-0004", "syn-0000", "syn-0001"];
    want.extend(unscored);
    assert_eq!(ids(&risk), want);
    assert_eq!(risk[0]["risk"], 0.95);
    assert!(risk[4].get("risk").is_none());
    assert_eq!(ids(&get_json(&app, "/worklist").await.1), want);

    let (_, mean) = get_json(&app, "/worklist?order=mean").await;
    let mut want = vec!["syn-0002", "syn-0004", "syn-0000", "syn-0001"];
    want.extend(unscored);
    assert_eq!(ids(&mean), want);

    // counts above 0.9: 3, 0, 0, 0 → ties fall back to id order
    let (_, count) = get_json(&app, "/worklist?order=count").await;
    let mut want = vec!["syn-0002", "syn-0000", "syn-0001", "syn-0004"];
    want.extend(unscored);
    assert_eq!(ids(&count), want);
    assert_eq!(
        send(&app, "GET", "/worklist?order=loudest", None).await.0,
        StatusCode::BAD_REQUEST
    );
}

#[tokio::test]
async fn model_routes_need_a_checkpoint() {
    let fx = fixture();
    let app = app(&fx.cfg);
    assert_eq!(
        send(&app, "POST", "/predict/syn-0000", None).await.0,
        StatusCode::SERVICE_UNAVAILABLE
    );
    assert_eq!(
        send(&app, "GET", "/cases/syn-0000/cam/0", None).await.0,
        StatusCode::SERVICE_UNAVAILABLE
    );
}

#[tokio::test]
async fn images_are_served_as_png_and_pgm() {
    let fx = fixture();
    let app = app(&fx.cfg);
    let (s, png) = send(&app, "GET", "/cases/syn-0000/image", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
    let (_, pgm) = send(&app, "GET", "/cases/syn-0000/image?format=pgm", None).await;
    assert_eq!(
        decode_pgm(&pgm).unwrap(),
        load_image(fx.root.join("images/syn-0000.pgm")).unwrap()
    );
    assert_eq!(
        send(&app, "GET", "/cases/syn-0000/image?format=tiff", None)
            .await
            .0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
}

#[tokio::test]
async fn toy_model_flags_a_synthetic_positive_case() {
    let mut fx = fixture();
    with_model(&mut fx);
    let app = app(&fx.cfg);
    let manifest = read_manifest(&fx.cfg.manifest).unwrap();
    let positives: Vec<&CaseRecord> = manifest.iter().filter(|c| !c.nodules.is_empty()).collect();
    assert!(!positives.is_empty());

    let mut best = 0.0f64;
    for case in &positives {
        let uri = format!("/predict/{}", case.case_id);
        let (s, body) = send(&app, "POST", &uri, None).await;
        assert_eq!(s, StatusCode::OK);
        let scored: CaseScores = serde_json::from_slice(&body).unwrap();
        assert_eq!(scored.scores.len(), 16);
        best = best.max(scored.risk().unwrap());
        // deterministic inference
        let (_, again) = send(&app, "POST", &uri, None).await;
        assert_eq!(again, body);

        let (_, doc) = get_json(&app, &format!("/cases/{}", case.case_id)).await;
        assert_eq!(doc["scores"], serde_json::to_value(&scored.scores).unwrap());
        assert_eq!(doc["cam"].as_array().unwrap().len(), 16);
    }
    assert!(best > 0.9, "highest patch score on a positive case {best}");

    let (_, wl) = get_json(&app, "/worklist").await;
    let top = &wl[0];
    let top_case = top["case_id"].as_str().unwrap();
    assert!(positives.iter().any(|c| c.case_id == top_case));
    assert_eq!(top["risk"].as_f64().unwrap(), best);

    // scores survive a restart through the scores log
    let app2 = self::app(&fx.cfg);
    let (_, wl2) = get_json(&app2, "/worklist").await;
    assert_eq!(wl, wl2);

    let (s, png) = send(&app, "GET", &format!("/cases/{top_case}/cam/0"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&png[12..16], b"IHDR");
    assert_eq!(u32::from_be_bytes(png[16..20].try_into().unwrap()), 56);
    assert_eq!(
        send(&app, "GET", &format!("/cases/{top_case}/cam/16"), None)
            .await
            .0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
}
