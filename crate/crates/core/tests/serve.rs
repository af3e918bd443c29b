#![cfg(feature = "serve")]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use maskcap::checkpoint::Checkpoint;
use maskcap::data::synth::{synth_generate, SynthConfig, SynthOntology};
use maskcap::data::{Dataset, Vocabulary};
use maskcap::model::{Model, ModelConfig, ModelKind};
use maskcap::serve::{router, CaptionResponse, Service};
use serde_json::{json, Value};
use tower::ServiceExt;

fn service(kind: ModelKind, samples: usize) -> Arc<Service> {
    let ont = SynthOntology::standard(2, 8, 8).unwrap();
    let out = synth_generate(&ont, &SynthConfig { samples, ..Default::default() }).unwrap();
    let vocab = Vocabulary::build(out.dataset.captions(), 1);
    let cfg = ModelConfig { word_dim: 8, attn_dim: 8, mask_hidden: 8, ..ModelConfig::desk(8, 8, 4, vocab.len()) };
    let mut model = Model::new(cfg, 3).unwrap();
    // Sharper than the default init so captions depend on attention.
    for (_, t) in model.params.named_mut() {
        for v in t.data_mut() {
            *v *= 12.0;
        }
    }
    let ckpt = Checkpoint::new(kind, model, vocab, 3).unwrap();
    Arc::new(Service::new(ckpt, out.dataset).unwrap())
}

async fn call(svc: &Arc<Service>, method: &str, path: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(path);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(svc.clone(), None).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::test]
async fn health_and_samples() {
    let svc = service(ModelKind::Interpret, 5);
    let (s, v) = call(&svc, "GET", "/api/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["kind"], "interpret");
    let (s, v) = call(&svc, "GET", "/api/samples", None).await;
    assert_eq!(s, StatusCode::OK);
    let list = v.as_array().unwrap();
    assert_eq!(list.len(), 5);
    let ids: Vec<u64> = list.iter().map(|x| x["sample_id"].as_u64().unwrap()).collect();
    assert!(ids.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(list[0]["labels"].as_array().unwrap().len(), 4);
}

#[tokio::test]
async fn empty_split_lists_nothing() {
    let full = service(ModelKind::Base, 1);
    let svc = Arc::new(Service::new(full.checkpoint.clone(), Dataset::new(vec![]).unwrap()).unwrap());
    let (s, v) = call(&svc, "GET", "/api/samples", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!([]));
}

#[tokio::test]
async fn masked_caption_zeroes_attention_and_is_deterministic() {
    let svc = service(ModelKind::Interpret, 3);
    let body = json!({"sample_id": 1, "mask": [1.0, 0.0, 1.0, 0.0]});
    let (s, v) = call(&svc, "POST", "/api/caption", Some(body.clone())).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let r: CaptionResponse = serde_json::from_value(v.clone()).unwrap();
    assert_eq!(r.mask_used, vec![1.0, 0.0, 1.0, 0.0]);
    assert_eq!(r.mask_pred.as_ref().unwrap().len(), 4);
    assert!(!r.attention.is_empty());
    for row in &r.attention {
        assert_eq!(row[1], 0.0);
        assert_eq!(row[3], 0.0);
    }
    let (_, again) = call(&svc, "POST", "/api/caption", Some(body)).await;
    assert_eq!(v, again);
}

#[tokio::test]
async fn predicted_mask_round_trips() {
    let svc = service(ModelKind::Interpret, 3);
    let (s, v) = call(&svc, "POST", "/api/caption", Some(json!({"sample_id": 2, "use_predicted_mask": true}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let r: CaptionResponse = serde_json::from_value(v).unwrap();
    assert_eq!(Some(r.mask_used.clone()), r.mask_pred);
    assert!(r.mask_used.iter().all(|&m| m > 0.0 && m < 1.0));
    // Feeding the predicted mask back explicitly reproduces the caption.
    let (_, v2) = call(&svc, "POST", "/api/caption", Some(json!({"sample_id": 2, "mask": r.mask_used}))).await;
    let r2: CaptionResponse = serde_json::from_value(v2).unwrap();
    assert_eq!(r2.caption, r.caption);
    assert_eq!(r2.attention, r.attention);
}

#[tokio::test]
async fn base_model_all_ones_mask_matches_unmasked() {
    let svc = service(ModelKind::Base, 4);
    for id in 0..4 {
        let (_, a) = call(&svc, "POST", "/api/caption", Some(json!({"sample_id": id}))).await;
        let (_, b) = call(&svc, "POST", "/api/caption", Some(json!({"sample_id": id, "mask": [1, 1, 1, 1]}))).await;
        assert_eq!(a["caption"], b["caption"]);
        assert_eq!(a["mask_pred"], Value::Null);
        assert_eq!(a["mask_used"], json!([1.0, 1.0, 1.0, 1.0]));
    }
}

#[tokio::test]
async fn all_zero_mask_is_flagged_degenerate() {
    let svc = service(ModelKind::Interpret, 2);
    let (s, v) = call(&svc, "POST", "/api/caption", Some(json!({"sample_id": 0, "mask": [0, 0, 0, 0]}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["degenerate"], true);
}

#[tokio::test]
async fn request_errors() {
    let svc = service(ModelKind::Interpret, 2);
    let cases = [
        (json!({"sample_id": 99, "use_predicted_mask": true}), StatusCode::NOT_FOUND, "sample_id"),
        (json!({"sample_id": 0, "mask": [1, 0]}), StatusCode::BAD_REQUEST, "mask"),
        (json!({"sample_id": 0, "mask": [1, 0, 2, 0]}), StatusCode::BAD_REQUEST, "mask"),
        (json!({"sample_id": 0}), StatusCode::BAD_REQUEST, "mask"),
        (json!({"sample_id": 0, "mask": [1, 1, 1, 1], "use_predicted_mask": true}), StatusCode::BAD_REQUEST, "mask"),
        (json!({"sample_id": 0, "use_predicted_mask": true, "beam": 0}), StatusCode::BAD_REQUEST, "beam"),
    ];
    for (body, status, field) in cases {
        let (s, v) = call(&svc, "POST", "/api/caption", Some(body.clone())).await;
        assert_eq!(s, status, "{body}: {v}");
        assert_eq!(v["error"]["field"], field, "{body}: {v}");
    }
    let (s, v) = call(&svc, "POST", "/api/caption", Some(json!({"sample": 0}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["kind"], "invalid_request");
    let base = service(ModelKind::Base, 1);
    let (s, v) = call(&base, "POST", "/api/caption", Some(json!({"sample_id": 0, "use_predicted_mask": true}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["field"], "use_predicted_mask");
}

#[tokio::test]
async fn serves_static_files() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>ok</html>").unwrap();
    let svc = service(ModelKind::Base, 1);
    let req = Request::builder().uri("/index.html").body(Body::empty()).unwrap();
    let resp = router(svc, Some(dir.path().to_path_buf())).oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&bytes[..], b"<html>ok</html>");
}
