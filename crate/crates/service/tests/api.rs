use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use cemx_core::imagekit::{decode_png, encode_png, Image};
use cemx_service::{router, AppState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const BOUNDARY: &str = "cemxtestboundary";

fn lr_png(w: usize, h: usize) -> Vec<u8> {
    let img = Image::<f64>::from_fn(w, h, 3, |c, y, x| ((x * 7 + y * 3 + c * 11) % 17) as f64 / 16.0);
    encode_png(&img).unwrap()
}

fn multipart(fields: &[(&str, &[u8])]) -> Vec<u8> {
    let mut body = Vec::new();
    for (name, value) in fields {
        body.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        if *name == "lr" {
            body.extend_from_slice(b"Content-Disposition: form-data; name=\"lr\"; filename=\"lr.png\"\r\nContent-Type: image/png\r\n\r\n");
        } else {
            body.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n").as_bytes());
        }
        body.extend_from_slice(value);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn create(app: &Router, fields: &[(&str, &[u8])]) -> (StatusCode, Value) {
    let req = Request::post("/sessions")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(multipart(fields)))
        .unwrap();
    let (s, b) = send(app, req).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post_json(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let req = Request::post(uri).header("content-type", "application/json").body(Body::from(body.to_string())).unwrap();
    let (s, b) = send(app, req).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn wait_for(app: &Router, sid: &str, jid: &str) -> Value {
    for _ in 0..3000 {
        let (s, b) = get(app, &format!("/sessions/{sid}/jobs/{jid}")).await;
        assert_eq!(s, StatusCode::OK);
        let v: Value = serde_json::from_slice(&b).unwrap();
        if v["state"] != "running" {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    panic!("job {jid} did not finish");
}

fn app() -> Router {
    router(AppState::new())
}

fn scribble_spec(steps: usize) -> Value {
    json!({
        "tool": "scribble",
        "region": {"type": "rect", "x": 4, "y": 4, "width": 6, "height": 6},
        "params": {"color": [0.9, 0.2, 0.1]},
        "steps": steps,
        "step_size": 0.5
    })
}

#[tokio::test]
async fn create_defaults_to_bicubic_and_serves_image() {
    let app = app();
    let png = lr_png(4, 4);
    let (s, v) = create(&app, &[("lr", &png), ("scale", b"4")]).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    assert_eq!((v["width"].as_u64(), v["height"].as_u64()), (Some(16), Some(16)));
    let id = v["id"].as_str().unwrap();

    let (s, bytes) = get(&app, &format!("/sessions/{id}/image.png")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(decode_png::<f64>(&bytes).unwrap().dims(), (16, 16, 3));

    let (s, b) = get(&app, &format!("/sessions/{id}/consistency")).await;
    assert_eq!(s, StatusCode::OK);
    let c: Value = serde_json::from_slice(&b).unwrap();
    assert!(c["linf"].as_f64().unwrap() <= 1e-8);
}

#[tokio::test]
async fn bad_uploads_are_rejected() {
    let app = app();
    let png = lr_png(4, 4);
    assert_eq!(create(&app, &[("lr", &png), ("scale", b"5")]).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(create(&app, &[("scale", b"2")]).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(create(&app, &[("lr", b"not a png"), ("scale", b"2")]).await.0, StatusCode::BAD_REQUEST);
    let zero = br#"{"rows":3,"cols":3,"taps":[0,0,0,0,0,0,0,0,0]}"#;
    let (s, v) = create(&app, &[("lr", &png), ("scale", b"2"), ("kernel", zero)]).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["kind"], "SingularKernel");
}

#[tokio::test]
async fn unknown_ids_are_404() {
    let app = app();
    assert_eq!(get(&app, "/sessions/nope/image.png").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/sessions/nope/consistency").await.0, StatusCode::NOT_FOUND);
    let png = lr_png(8, 8);
    let (_, v) = create(&app, &[("lr", &png), ("scale", b"2")]).await;
    let id = v["id"].as_str().unwrap();
    assert_eq!(get(&app, &format!("/sessions/{id}/jobs/j99")).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn edit_job_runs_and_changes_the_image() {
    let app = app();
    let png = lr_png(8, 8);
    let (_, v) = create(&app, &[("lr", &png), ("scale", b"2")]).await;
    let id = v["id"].as_str().unwrap().to_string();
    let before = get(&app, &format!("/sessions/{id}/image.png")).await.1;

    let (s, v) = post_json(&app, &format!("/sessions/{id}/edits"), scribble_spec(30)).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    let jid = v["job_id"].as_str().unwrap().to_string();
    let done = wait_for(&app, &id, &jid).await;
    assert_eq!(done["state"], "done", "{done}");
    let trace = done["trace"].as_array().unwrap();
    assert_eq!(done["step"].as_u64().unwrap() as usize, trace.len());
    assert!(trace.windows(2).all(|w| w[1].as_f64() <= w[0].as_f64()));

    let after = get(&app, &format!("/sessions/{id}/image.png")).await.1;
    assert_ne!(before, after);
    let c: Value = serde_json::from_slice(&get(&app, &format!("/sessions/{id}/consistency")).await.1).unwrap();
    assert!(c["linf"].as_f64().unwrap() <= 1e-8);

    let (s, _) = post_json(&app, &format!("/sessions/{id}/undo"), json!({})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(get(&app, &format!("/sessions/{id}/image.png")).await.1, before);
}

#[tokio::test]
async fn concurrent_job_is_409_and_bad_spec_is_400() {
    let app = app();
    let png = lr_png(16, 16);
    let (_, v) = create(&app, &[("lr", &png), ("scale", b"2")]).await;
    let id = v["id"].as_str().unwrap().to_string();

    let (s, v) = post_json(&app, &format!("/sessions/{id}/edits"), json!({"tool": "sharpen", "params": {}, "region": {"type": "all"}, "steps": 5})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST, "{v}");

    let (s, v) = post_json(&app, &format!("/sessions/{id}/edits"), scribble_spec(40)).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let jid = v["job_id"].as_str().unwrap().to_string();
    let (s, v) = post_json(&app, &format!("/sessions/{id}/edits"), scribble_spec(5)).await;
    assert_eq!(s, StatusCode::CONFLICT, "{v}");
    assert_eq!(v["kind"], "Busy");
    let first = wait_for(&app, &id, &jid).await;
    assert_eq!(first["state"], "done");
}

#[tokio::test]
async fn undo_on_fresh_session_is_409() {
    let app = app();
    let png = lr_png(8, 8);
    let (_, v) = create(&app, &[("lr", &png), ("scale", b"2")]).await;
    let id = v["id"].as_str().unwrap();
    let (s, v) = post_json(&app, &format!("/sessions/{id}/undo"), json!({})).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["kind"], "NothingToUndo");
}

#[tokio::test]
async fn knobs_then_undo_restore_the_image() {
    let app = app();
    let png = lr_png(8, 8);
    let (_, v) = create(&app, &[("lr", &png), ("scale", b"2"), ("mode", b"generator")]).await;
    let id = v["id"].as_str().unwrap().to_string();
    let before = get(&app, &format!("/sessions/{id}/image.png")).await.1;
    let body = json!({"region": {"type": "rect", "x": 2, "y": 2, "width": 8, "height": 8}, "l1": 1.0, "l2": 0.1, "theta": 0.7});
    let (s, v) = post_json(&app, &format!("/sessions/{id}/knobs"), body.clone()).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_ne!(get(&app, &format!("/sessions/{id}/image.png")).await.1, before);
    assert_eq!(post_json(&app, &format!("/sessions/{id}/undo"), json!({})).await.0, StatusCode::OK);
    assert_eq!(get(&app, &format!("/sessions/{id}/image.png")).await.1, before);

    let (_, v) = create(&app, &[("lr", &png), ("scale", b"2")]).await;
    let direct = v["id"].as_str().unwrap();
    assert_eq!(post_json(&app, &format!("/sessions/{direct}/knobs"), body).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn alternatives_preview_and_adopt() {
    let app = app();
    let png = lr_png(8, 8);
    let (_, v) = create(&app, &[("lr", &png), ("scale", b"2")]).await;
    let id = v["id"].as_str().unwrap().to_string();
    let (s, v) = post_json(&app, &format!("/sessions/{id}/alternatives"), json!({"n": 3, "anchored": false})).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let alts = v["alternatives"].as_array().unwrap();
    assert_eq!(alts.len(), 3);
    use base64::Engine;
    for a in alts {
        let bytes = base64::engine::general_purpose::STANDARD.decode(a["png"].as_str().unwrap()).unwrap();
        assert_eq!(decode_png::<f64>(&bytes).unwrap().dims(), (16, 16, 3));
        assert!(a["linf"].as_f64().unwrap() <= 1e-8);
    }
    assert_eq!(post_json(&app, &format!("/sessions/{id}/alternatives"), json!({"n": 9, "anchored": false})).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(post_json(&app, &format!("/sessions/{id}/alternatives/1/adopt"), json!({})).await.0, StatusCode::OK);
    assert_eq!(post_json(&app, &format!("/sessions/{id}/alternatives/7/adopt"), json!({})).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn polls_are_answered_while_a_job_runs() {
    let state = AppState::new();
    let app = router(Arc::clone(&state));
    let png = lr_png(16, 16);
    let (_, v) = create(&app, &[("lr", &png), ("scale", b"2")]).await;
    let id = v["id"].as_str().unwrap().to_string();
    let (_, v) = post_json(&app, &format!("/sessions/{id}/edits"), scribble_spec(40)).await;
    let jid = v["job_id"].as_str().unwrap().to_string();
    let mut last_step = 0;
    loop {
        let v: Value = serde_json::from_slice(&get(&app, &format!("/sessions/{id}/jobs/{jid}")).await.1).unwrap();
        let step = v["step"].as_u64().unwrap();
        assert!(step >= last_step);
        assert_eq!(step as usize, v["trace"].as_array().unwrap().len());
        last_step = step;
        assert_eq!(get(&app, &format!("/sessions/{id}/image.png")).await.0, StatusCode::OK);
        if v["state"] != "running" {
            assert_eq!(v["state"], "done");
            break;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    assert_eq!(state.len(), 1);
}
