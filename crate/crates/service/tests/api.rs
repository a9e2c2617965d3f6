use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use lineadapt::corpus::{render_line, WriterProfile};
use lineadapt::finetune::{finetune, Control, EpochRow, EpochTrace, RunConfig, Sample};
use lineadapt::image::LineImage;
use lineadapt::model::{ModelConfig, Recognizer, Setup};
use lineadapt::stopping::{decide, DecideContext, ThresholdMode};
use lineadapt_harness::spec::{Cell, RunTemplate, Selection};
use lineadapt_harness::store::{RunRecord, RunStatus, StoredRun};
use lineadapt_service::{router, Service};
use serde_json::{json, Value};
use tower::ServiceExt;

const WORDS: [&str; 16] = [
    "ab", "cab", "dead", "bead", "face", "fade", "ace", "bad", "deaf", "cafe", "add", "bed", "fee", "dab", "ebb", "faced",
];

fn micro_model() -> Recognizer {
    Recognizer::new(ModelConfig { max_decode_len: 12, ..ModelConfig::micro() }, 5).unwrap()
}

fn template() -> RunTemplate {
    RunTemplate { epochs: 3, ..RunTemplate::default() }
}

fn service_with(refs: Vec<StoredRun>) -> Arc<Service> {
    Arc::new(Service::new(micro_model(), template(), refs, ThresholdMode::RecordedMean))
}

fn png(text: &str, seed: u64) -> Vec<u8> {
    render_line(text, &WriterProfile::plain(1), 64, seed).unwrap().to_png().unwrap()
}

/// Multipart body: `(name, bytes, is_file)` parts in order.
fn multipart(parts: &[(&str, Vec<u8>, bool)]) -> (String, Vec<u8>) {
    let boundary = "lineadapt-test-boundary";
    let mut body = Vec::new();
    for (name, bytes, file) in parts {
        body.extend(format!("--{boundary}\r\n").as_bytes());
        if *file {
            body.extend(
                format!("Content-Disposition: form-data; name=\"{name}\"; filename=\"l.png\"\r\nContent-Type: image/png\r\n\r\n").as_bytes(),
            );
        } else {
            body.extend(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n").as_bytes());
        }
        body.extend(bytes);
        body.extend(b"\r\n");
    }
    body.extend(format!("--{boundary}--\r\n").as_bytes());
    (format!("multipart/form-data; boundary={boundary}"), body)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    };
    send(app, req.unwrap()).await
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v: Value = serde_json::from_slice(&bytes).unwrap_or_else(|e| panic!("non-JSON body {:?}: {e}", String::from_utf8_lossy(&bytes)));
    assert_eq!(v["schema_version"], 1, "{v}");
    (status, v)
}

async fn project_with_lines(app: &Router, n: usize, eval: usize) -> String {
    let (s, v) = call(app, "POST", "/projects", None).await;
    assert_eq!(s, StatusCode::CREATED);
    let id = v["project_id"].as_str().unwrap().to_string();
    let mut parts = Vec::new();
    for i in 0..n {
        parts.push(("line_id", format!("l{i:02}").into_bytes(), false));
        parts.push(("image", png(WORDS[i % WORDS.len()], i as u64), true));
    }
    for i in 0..eval {
        parts.push(("eval_transcript", WORDS[i].as_bytes().to_vec(), false));
        parts.push(("image", png(WORDS[i], 100 + i as u64), true));
    }
    let (ct, body) = multipart(&parts);
    let req = Request::post(format!("/projects/{id}/lines")).header("content-type", ct).body(Body::from(body)).unwrap();
    let (s, v) = send(app, req).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    assert_eq!(v["added"].as_array().unwrap().len(), n);
    assert_eq!(v["eval_added"], eval);
    id
}

async fn annotate(app: &Router, id: &str, lines: std::ops::Range<usize>) {
    for i in lines {
        let (s, v) =
            call(app, "POST", &format!("/projects/{id}/lines/l{i:02}/transcript"), Some(json!({"transcript": WORDS[i % WORDS.len()]}))).await;
        assert_eq!(s, StatusCode::OK, "{v}");
    }
}

async fn wait_idle(app: &Router, id: &str) -> Value {
    let start = Instant::now();
    loop {
        let (s, v) = call(app, "GET", &format!("/projects/{id}/status"), None).await;
        assert_eq!(s, StatusCode::OK);
        if v["training"] == false {
            return v;
        }
        assert!(start.elapsed() < Duration::from_secs(300), "round did not finish: {v}");
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
}

#[tokio::test]
async fn suggestions_rank_by_confidence_and_skip_annotated_lines() {
    let app = router(service_with(Vec::new()));
    let id = project_with_lines(&app, 10, 0).await;
    let (s, v) = call(&app, "GET", &format!("/projects/{id}/suggestions?k=4"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["ranking"], "one_shot");
    assert_eq!(v["checkpoint"], "baseline");
    let list = v["suggestions"].as_array().unwrap();
    assert_eq!(list.len(), 4);
    let scores: Vec<f64> = list.iter().map(|x| x["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] <= w[1]), "{scores:?}");
    assert_eq!(list.iter().map(|x| x["rank"].as_u64().unwrap()).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    assert!(list.iter().all(|x| x["prefill"].is_string()));

    let first = list[0]["line_id"].as_str().unwrap().to_string();
    let (s, _) = call(&app, "POST", &format!("/projects/{id}/lines/{first}/transcript"), Some(json!({"transcript": "abc"}))).await;
    assert_eq!(s, StatusCode::OK);
    let (_, v) = call(&app, "GET", &format!("/projects/{id}/suggestions?k=20"), None).await;
    let ids: Vec<&str> = v["suggestions"].as_array().unwrap().iter().map(|x| x["line_id"].as_str().unwrap()).collect();
    assert_eq!(ids.len(), 9);
    assert!(!ids.contains(&first.as_str()));
}

#[tokio::test]
async fn suggestions_report_empty_when_everything_is_annotated() {
    let app = router(service_with(Vec::new()));
    let id = project_with_lines(&app, 3, 0).await;
    annotate(&app, &id, 0..3).await;
    let (s, v) = call(&app, "GET", &format!("/projects/{id}/suggestions?k=5"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "empty");
    assert!(v["suggestions"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn transcript_submission_validates_and_is_idempotent() {
    let app = router(service_with(Vec::new()));
    let id = project_with_lines(&app, 2, 0).await;
    let uri = format!("/projects/{id}/lines/l00/transcript");

    let (s, v) = call(&app, "POST", &format!("/projects/{id}/lines/nope/transcript"), Some(json!({"transcript": "abc"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND, "{v}");

    let (s, v) = call(&app, "POST", &uri, Some(json!({"transcript": "ab€cQ€"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["offending"], json!(["Q", "€"]));

    let (s, _) = call(&app, "POST", &uri, Some(json!({"text": "abc"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let (_, v) = call(&app, "POST", &uri, Some(json!({"transcript": "abc"}))).await;
    assert_eq!(v["logged"], true);
    let (_, v) = call(&app, "POST", &uri, Some(json!({"transcript": "abc"}))).await;
    assert_eq!(v["logged"], false);
    let (_, v) = call(&app, "POST", &uri, Some(json!({"transcript": "abd"}))).await;
    assert_eq!(v["logged"], true);
    assert_eq!(v["annotated_lines"], 1);

    let (_, v) = call(&app, "GET", &format!("/projects/{id}/status"), None).await;
    assert_eq!(v["annotations_logged"], 2);
    assert_eq!(v["annotated_lines"], 1);
}

#[tokio::test]
async fn unknown_projects_and_rounds_are_not_found() {
    let app = router(service_with(Vec::new()));
    let (s, v) = call(&app, "GET", "/projects/missing/status", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(v["error"].as_str().unwrap().contains("missing"));
    let id = project_with_lines(&app, 1, 0).await;
    let (s, _) = call(&app, "GET", &format!("/projects/{id}/rounds/1"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", &format!("/projects/{id}/rounds/first"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", &format!("/projects/{id}/suggestions?k=many"), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "GET", "/nowhere", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "DELETE", "/projects", None).await;
    assert_eq!(s, StatusCode::METHOD_NOT_ALLOWED);
}

#[tokio::test]
async fn rounds_reject_oracle_criteria_and_missing_inputs() {
    let app = router(service_with(Vec::new()));
    let id = project_with_lines(&app, 4, 0).await;
    let rounds = format!("/projects/{id}/rounds");

    let (s, _) = call(&app, "POST", &rounds, Some(json!({"criterion": "TRN_CER"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "no annotations yet");
    annotate(&app, &id, 0..4).await;

    let (s, v) = call(&app, "POST", &rounds, Some(json!({"criterion": "TST_CER"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"].as_str().unwrap().contains("TST_CER"));
    for c in ["EP_CER", "EP_LOSS", "CF_CER"] {
        let (s, _) = call(&app, "POST", &rounds, Some(json!({"criterion": c}))).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{c} without references");
    }
    let (s, _) = call(&app, "POST", &rounds, Some(json!({"criterion": "SOMETIMES"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call(&app, "POST", &rounds, Some(json!({"criterion": "TRN_CER", "mask": "NOPE"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call(&app, "POST", &rounds, Some(json!({"criterion": "TRN_CER", "mask": []}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (_, v) = call(&app, "GET", &format!("/projects/{id}/status"), None).await;
    assert!(v["rounds"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn a_round_trains_publishes_and_reports_progress() {
    let svc = service_with(Vec::new());
    let app = router(svc.clone());
    let id = project_with_lines(&app, 8, 3).await;
    annotate(&app, &id, 0..6).await;
    let rounds = format!("/projects/{id}/rounds");

    let (s, v) = call(&app, "POST", &rounds, Some(json!({"criterion": "TRN_CER", "mask": "D", "epochs": 3}))).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    assert_eq!(v["round"], 1);
    let (s, _) = call(&app, "POST", &rounds, Some(json!({"criterion": "TRN_CER"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);

    // Annotations keep flowing while the round trains.
    annotate(&app, &id, 6..7).await;
    let status = wait_idle(&app, &id).await;
    assert_eq!(status["checkpoint"], "round-1");
    let r = &status["rounds"][0];
    assert_eq!(r["state"], "completed", "{status}");
    assert_eq!(r["lines"], 6);
    assert_eq!(r["mask"], "D");
    assert!(r["eval_cer"].is_number());

    let (s, full) = call(&app, "GET", &format!("{rounds}/1"), None).await;
    assert_eq!(s, StatusCode::OK);
    let trace = full["trace"].as_array().unwrap();
    assert!((1..=3).contains(&trace.len()));
    assert_eq!(full["decision"]["criterion"], "TRN_CER");
    assert_eq!(full["decision"]["epoch"], trace.len(), "the published model is the decided one");
    assert_eq!(full["eval_cer"], trace.last().unwrap()["val_cer"]);
    assert_eq!(full["line_ids"].as_array().unwrap().len(), 6);

    // Pre-fills now come from the published round; the ranking stays one-shot.
    let (_, v) = call(&app, "GET", &format!("/projects/{id}/suggestions?k=1"), None).await;
    assert_eq!(v["checkpoint"], "round-1");
    let project = svc.project(&id).unwrap();
    assert_eq!(project.published().version, 1);

    let (s, v) = call(&app, "POST", &rounds, Some(json!({"criterion": "EP_20", "mask": ["decoder_mha"], "epochs": 2}))).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    let status = wait_idle(&app, &id).await;
    let r = &status["rounds"][1];
    assert_eq!(r["state"], "completed");
    assert_eq!(r["lines"], 7);
    assert_eq!(r["mask"], "decoder_mha");
    assert_eq!(r["decided_epoch"], 2);
    assert_eq!(status["checkpoint"], "round-2");
}

#[tokio::test]
async fn x4_rounds_use_folds_and_fall_back_below_four_lines() {
    let app = router(service_with(Vec::new()));
    let id = project_with_lines(&app, 6, 0).await;
    annotate(&app, &id, 0..3).await;
    let rounds = format!("/projects/{id}/rounds");
    let (s, _) = call(&app, "POST", &rounds, Some(json!({"criterion": "X4", "mask": "D", "epochs": 2}))).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    wait_idle(&app, &id).await;
    let (_, r) = call(&app, "GET", &format!("{rounds}/1"), None).await;
    assert_eq!(r["decision"]["criterion"], "X4");
    assert_eq!(r["decision"]["fallback"], true);

    annotate(&app, &id, 3..6).await;
    let (s, _) = call(&app, "POST", &rounds, Some(json!({"criterion": "X4", "mask": "D", "epochs": 2}))).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    wait_idle(&app, &id).await;
    let (_, r) = call(&app, "GET", &format!("{rounds}/2"), None).await;
    assert_eq!(r["state"], "completed", "{r}");
    assert_eq!(r["decision"]["fallback"], false);
    let epochs = r["trace"].as_array().unwrap().len();
    assert_eq!(r["decision"]["epoch"], epochs);
    assert!((1..=2).contains(&epochs));
}

fn reference(writer: u32, level: usize, val_cer: &[f64], loss: &[f64]) -> StoredRun {
    let rows = val_cer
        .iter()
        .zip(loss)
        .enumerate()
        .map(|(i, (&c, &l))| EpochRow {
            epoch: i + 1,
            train_loss_aug: l,
            train_loss_clean: l,
            train_cer_clean: 0.5,
            val_loss: c,
            val_cer: c,
        })
        .collect();
    let cell = Cell { selection: Selection::Random, setup: Setup::D, writer, level, series: 0 };
    let record = RunRecord {
        cell,
        config: RunConfig::default(),
        train_line_ids: Vec::new(),
        val_lines: 1,
        baseline_sha256: String::new(),
        x4: false,
        config_hash: String::new(),
    }
    .with_hash();
    StoredRun {
        dir: std::env::temp_dir(),
        status: RunStatus { config_hash: record.config_hash.clone(), batch_size: 1, aborted: false, epochs_run: val_cer.len(), seconds: 0.0 },
        record,
        trace: EpochTrace { rows, batch_size: 1, aborted: false },
        folds: None,
    }
}

#[tokio::test]
async fn reference_criteria_use_the_nearest_stored_line_count() {
    let refs = vec![
        // Level 4: best epoch 2 for both writers; level 64 would say epoch 1.
        reference(1, 4, &[0.5, 0.2, 0.3], &[1e6, 1e6, 1e6]),
        reference(2, 4, &[0.4, 0.1, 0.2], &[1e6, 1e6, 1e6]),
        reference(3, 64, &[0.1, 0.2, 0.3], &[1.0, 1.0, 1.0]),
    ];
    let app = router(service_with(refs));
    let id = project_with_lines(&app, 5, 0).await;
    annotate(&app, &id, 0..5).await;
    let rounds = format!("/projects/{id}/rounds");

    let (s, v) = call(&app, "POST", &rounds, Some(json!({"criterion": "EP_CER", "mask": "D"}))).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    wait_idle(&app, &id).await;
    let (_, r) = call(&app, "GET", &format!("{rounds}/1"), None).await;
    assert_eq!(r["trace"].as_array().unwrap().len(), 2);
    assert_eq!(r["decision"]["epoch"], 2);
    assert_eq!(r["decision"]["reference_writer_ids"], json!([1, 2]));

    // Threshold far above any loss: stops after the first epoch.
    let (s, _) = call(&app, "POST", &rounds, Some(json!({"criterion": "CF_CER", "mask": "D"}))).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    wait_idle(&app, &id).await;
    let (_, r) = call(&app, "GET", &format!("{rounds}/2"), None).await;
    assert_eq!(r["trace"].as_array().unwrap().len(), 1);
    assert_eq!(r["decision"]["tau"], 1e6);
    assert_eq!(r["threshold"], 1e6);
    assert_eq!(r["decision"]["fallback"], false);

    // No references for this mask.
    let (s, _) = call(&app, "POST", &rounds, Some(json!({"criterion": "EP_CER", "mask": "ALL"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn rerank_projects_rank_with_the_current_checkpoint() {
    let app = router(service_with(Vec::new()));
    let (s, v) = call(&app, "POST", "/projects", Some(json!({"rerank": true}))).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["rerank"], true);
    let id = v["project_id"].as_str().unwrap();
    let (_, v) = call(&app, "GET", &format!("/projects/{id}/suggestions"), None).await;
    assert_eq!(v["ranking"], "rerank");
    assert_eq!(v["status"], "empty");
    let (s, _) = call(&app, "POST", "/projects", Some(json!({"bogus": 1}))).await;
    assert!(s.is_client_error());
}

#[tokio::test]
async fn rounds_restart_from_the_baseline_and_are_verifiable_offline() {
    let svc = service_with(Vec::new());
    let app = router(svc.clone());
    let id = project_with_lines(&app, 8, 2).await;
    let rounds = format!("/projects/{id}/rounds");
    annotate(&app, &id, 0..4).await;
    let (s, _) = call(&app, "POST", &rounds, Some(json!({"criterion": "TRN_CER", "mask": "D", "epochs": 2}))).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    wait_idle(&app, &id).await;
    annotate(&app, &id, 4..7).await;
    let (s, _) = call(&app, "POST", &rounds, Some(json!({"criterion": "EP_20", "mask": "D", "epochs": 2}))).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    wait_idle(&app, &id).await;

    let record = svc.project(&id).unwrap().round(2).unwrap();
    assert_eq!(record.line_ids.len(), 7);
    // The same fine-tuning started from the baseline, not from round 1.
    let images: Vec<_> = (0..7).map(|i| LineImage::from_png(&png(WORDS[i], i as u64)).unwrap()).collect();
    let evals: Vec<_> = (0..2).map(|i| LineImage::from_png(&png(WORDS[i], 100 + i as u64)).unwrap()).collect();
    let train: Vec<Sample> = images.iter().zip(WORDS).map(|(image, transcript)| Sample { image, transcript }).collect();
    let val: Vec<Sample> = evals.iter().zip(WORDS).map(|(image, transcript)| Sample { image, transcript }).collect();
    let mut cfg = template().config(Setup::D, record.seed);
    cfg.epochs = 2;
    let offline = finetune(svc.baseline(), &cfg, &train, &val, |_, _| Control::Continue).unwrap();
    assert_eq!(offline.trace.rows, record.trace);

    let trace = EpochTrace { rows: record.trace.clone(), batch_size: offline.trace.batch_size, aborted: false };
    let again = decide(record.criterion, &trace, &DecideContext::default(), 1.0).unwrap();
    assert_eq!(Some(again), record.decision);
}
