use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use lineadapt::charset::CharsetSpec;
use lineadapt::corpus::{generate_corpus, read_manifest, write_manifest, CorpusSpec, Split};
use lineadapt::model::{save_checkpoint, CheckpointMeta, ModelConfig, Recognizer};
use lineadapt_harness::spec::RunTemplate;
use lineadapt_service::{router, DemoProject, Service, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let v: Value = serde_json::from_slice(&resp.into_body().collect().await.unwrap().to_bytes()).unwrap();
    (status, v)
}

/// Suggest, correct 16 lines, train with TRN_CER and watch the round finish.
#[tokio::test]
async fn the_annotation_loop_on_a_demo_project() {
    let dir = tempfile::tempdir().unwrap();
    let spec = CorpusSpec { n_writers: 2, lines_per_writer: 512, n_source_writers: 0, max_chars: 10, ..CorpusSpec::default() };
    let corpus = generate_corpus(&spec, &CharsetSpec::default()).unwrap();
    write_manifest(&corpus, &dir.path().join("corpus/manifest.jsonl")).unwrap();
    let model = Recognizer::new(ModelConfig::micro(), 1).unwrap();
    save_checkpoint(&model, &CheckpointMeta::default(), &dir.path().join("base.ckpt")).unwrap();

    let cfg = ServiceConfig {
        run: RunTemplate { epochs: 2, ..RunTemplate::default() },
        demo: Some(DemoProject { corpus: "corpus/manifest.jsonl".into(), writer: None, pool_lines: Some(40), eval_lines: Some(8) }),
        ..ServiceConfig::new("base.ckpt")
    };
    let text = serde_json::to_string(&cfg).unwrap();
    let parsed: ServiceConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed, cfg);
    let app = router(Arc::new(Service::from_config(&cfg, dir.path()).unwrap()));

    let (_, st) = call(&app, "GET", "/projects/demo/status", None).await;
    assert_eq!((st["pool_lines"].as_u64(), st["eval_lines"].as_u64()), (Some(40), Some(8)));

    let corpus = read_manifest(&dir.path().join("corpus/manifest.jsonl")).unwrap();
    let truth = |id: &str| corpus.line(id).unwrap().transcript.clone();
    assert!(corpus.lines_of(0, Split::FinetunePool).len() >= 40);

    let (s, v) = call(&app, "GET", "/projects/demo/suggestions?k=16", None).await;
    assert_eq!(s, StatusCode::OK);
    let picked: Vec<String> = v["suggestions"].as_array().unwrap().iter().map(|c| c["line_id"].as_str().unwrap().to_string()).collect();
    assert_eq!(picked.len(), 16);
    for id in &picked {
        let (s, _) = call(&app, "POST", &format!("/projects/demo/lines/{id}/transcript"), Some(json!({"transcript": truth(id)}))).await;
        assert_eq!(s, StatusCode::OK);
    }
    let (s, v) = call(&app, "POST", "/projects/demo/rounds", Some(json!({"criterion": "TRN_CER", "mask": "ALL"}))).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");

    let start = Instant::now();
    let status = loop {
        let (_, st) = call(&app, "GET", "/projects/demo/status", None).await;
        if st["training"] == false {
            break st;
        }
        assert!(start.elapsed() < Duration::from_secs(600));
        tokio::time::sleep(Duration::from_millis(200)).await;
    };
    let (_, record) = call(&app, "GET", "/projects/demo/rounds/1", None).await;
    assert_eq!(record["state"], "completed");
    assert_eq!(status["rounds"][0]["decided_epoch"], record["decision"]["epoch"]);
    assert!(status["rounds"][0]["eval_cer"].is_number());

    let (_, v) = call(&app, "GET", "/projects/demo/suggestions?k=40", None).await;
    let rest: Vec<&str> = v["suggestions"].as_array().unwrap().iter().map(|c| c["line_id"].as_str().unwrap()).collect();
    assert_eq!(rest.len(), 24);
    assert!(rest.iter().all(|id| !picked.iter().any(|p| p == id)));
}
