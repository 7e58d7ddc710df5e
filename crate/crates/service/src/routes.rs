use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use cemx_core::cem::CemOperator;
use cemx_core::edit::{EditJobSpec, RegionSpec};
use cemx_core::explorer::{DiversityOptions, Session, SessionConfig};
use cemx_core::generator::{GeneratorParams, Parameterization};
use cemx_core::imagekit::{decode_png, encode_png, BoundaryMode, Image};
use cemx_core::kernel::{bicubic_kernel, parse_kernel_json};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::{ApiError, ApiResult, ApiSession, AppState, JobState, JobStatus};

type AppRef = State<Arc<AppState>>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_info).delete(delete_session))
        .route("/sessions/{id}/image.png", get(image_png))
        .route("/sessions/{id}/lr.png", get(lr_png))
        .route("/sessions/{id}/edits", post(post_edit))
        .route("/sessions/{id}/jobs/{jid}", get(job_status))
        .route("/sessions/{id}/knobs", post(post_knobs))
        .route("/sessions/{id}/undo", post(post_undo))
        .route("/sessions/{id}/alternatives", post(post_alternatives))
        .route("/sessions/{id}/alternatives/{index}/adopt", post(post_adopt))
        .route("/sessions/{id}/consistency", get(consistency))
        .route("/sessions/{id}/export", post(post_export))
        .with_state(state)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::Internal(e.to_string()))?
}

fn png_response(img: &Image<f64>) -> ApiResult<impl IntoResponse> {
    let bytes = encode_png(&img.clip01())?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes))
}

fn b64_png(img: &Image<f64>) -> ApiResult<String> {
    Ok(base64::engine::general_purpose::STANDARD.encode(encode_png(&img.clip01())?))
}

fn bad(e: impl std::fmt::Display) -> ApiError {
    ApiError::BadRequest(e.to_string())
}

fn text(bytes: &Bytes, field: &str) -> ApiResult<String> {
    String::from_utf8(bytes.to_vec()).map_err(|_| bad(format!("field {field} is not UTF-8")))
}

#[derive(Default)]
struct Upload {
    lr: Option<Bytes>,
    kernel: Option<String>,
    scale: Option<String>,
    mode: Option<String>,
    boundary: Option<String>,
    weights: Option<String>,
    tau: Option<String>,
}

fn build_session(u: Upload) -> ApiResult<(Session, usize)> {
    let lr = u.lr.ok_or_else(|| bad("missing field lr"))?;
    let y: Image<f64> = decode_png(&lr).map_err(bad)?;
    let scale: usize = match u.scale.as_deref().map(str::trim) {
        None => return Err(bad("missing field scale")),
        Some(s) => s.parse().map_err(|_| bad(format!("scale {s:?} is not an integer")))?,
    };
    if !(1..=4).contains(&scale) {
        return Err(bad(format!("scale must be 1, 2, 3 or 4, got {scale}")));
    }
    let kernel = match u.kernel.as_deref().map(str::trim) {
        None | Some("") => bicubic_kernel(scale),
        Some(t) => parse_kernel_json(t, false)?,
    };
    let boundary = match u.boundary.as_deref().map(str::trim).unwrap_or("periodic") {
        "periodic" => BoundaryMode::Periodic,
        "replicate" => BoundaryMode::Replicate,
        other => return Err(bad(format!("unknown boundary {other:?}"))),
    };
    let psi = match u.mode.as_deref().map(str::trim).unwrap_or("direct") {
        "direct" | "direct_param" => Parameterization::Direct,
        "generator" | "network" => {
            let params = match u.weights.as_deref() {
                Some(t) => GeneratorParams::from_json(t)?,
                None => GeneratorParams::toy(scale, y.channels(), 0, false),
            };
            Parameterization::Network(Arc::new(params))
        }
        other => return Err(bad(format!("unknown mode {other:?}"))),
    };
    let mut config = SessionConfig::default();
    if let Some(t) = u.tau {
        config.tau = t.trim().parse().map_err(|_| bad(format!("tau {t:?} is not a number")))?;
    }
    let op = CemOperator::new(kernel, scale, y.width() * scale, y.height() * scale, boundary)?;
    Ok((Session::new(y, Arc::new(op), psi, config)?, scale))
}

async fn create_session(State(app): AppRef, mut mp: Multipart) -> ApiResult<(StatusCode, Json<Value>)> {
    let mut u = Upload::default();
    while let Some(field) = mp.next_field().await.map_err(bad)? {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(bad)?;
        match name.as_str() {
            "lr" => u.lr = Some(bytes),
            "kernel" => u.kernel = Some(text(&bytes, "kernel")?),
            "scale" => u.scale = Some(text(&bytes, "scale")?),
            "mode" => u.mode = Some(text(&bytes, "mode")?),
            "boundary" => u.boundary = Some(text(&bytes, "boundary")?),
            "weights" => u.weights = Some(text(&bytes, "weights")?),
            "tau" => u.tau = Some(text(&bytes, "tau")?),
            _ => {}
        }
    }
    let (session, scale) = blocking(move || build_session(u)).await?;
    let (w, h) = session.hr_dims();
    let entry = app.insert(session);
    Ok((StatusCode::CREATED, Json(json!({ "id": entry.id, "width": w, "height": h, "scale": scale }))))
}

fn info(entry: &ApiSession) -> Value {
    let s = entry.session.lock().unwrap();
    let (w, h) = s.hr_dims();
    let created = entry.created_at.duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    json!({
        "id": entry.id,
        "created_at": created,
        "width": w,
        "height": h,
        "lr_width": s.y().width(),
        "lr_height": s.y().height(),
        "channels": s.y().channels(),
        "scale": s.op().factor(),
        "boundary": s.op().boundary(),
        "mode": if s.is_direct() { "direct" } else { "generator" },
        "busy": s.is_busy(),
        "history": s.history_len(),
        "alternatives": s.alternatives().len(),
    })
}

async fn session_info(State(app): AppRef, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let entry = app.get(&id)?;
    Ok(Json(blocking(move || Ok(info(&entry))).await?))
}

async fn delete_session(State(app): AppRef, Path(id): Path<String>) -> ApiResult<StatusCode> {
    app.remove(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn image_png(State(app): AppRef, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let entry = app.get(&id)?;
    let x_hat = blocking(move || Ok(entry.session.lock().unwrap().x_hat().clone())).await?;
    png_response(&x_hat)
}

async fn lr_png(State(app): AppRef, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let entry = app.get(&id)?;
    let y = blocking(move || Ok(entry.session.lock().unwrap().y().clone())).await?;
    png_response(&y)
}

fn start_job(entry: Arc<ApiSession>, spec: EditJobSpec) -> ApiResult<String> {
    let job = entry.session.lock().unwrap().begin_job(&spec)?;
    let jid = {
        let mut n = entry.next_job.lock().unwrap();
        *n += 1;
        format!("j{n}")
    };
    let status = JobStatus {
        id: jid.clone(),
        state: JobState::Running,
        step: 0,
        steps: job.steps(),
        initial: None,
        trace: Vec::new(),
        stalled: false,
        error: None,
    };
    entry.jobs.lock().unwrap().insert(jid.clone(), status);
    let worker_id = jid.clone();
    std::thread::spawn(move || {
        let progress = |_: usize, v: f64| {
            if let Some(s) = entry.jobs.lock().unwrap().get_mut(&worker_id) {
                s.step += 1;
                s.trace.push(v);
            }
        };
        let out = job.run(progress);
        let result = entry.session.lock().unwrap().finish_job(out);
        let mut jobs = entry.jobs.lock().unwrap();
        let s = jobs.get_mut(&worker_id).expect("job registered before start");
        match result {
            Ok(o) => {
                s.initial = Some(o.initial);
                s.step = o.trace.len();
                s.trace = o.trace;
                s.stalled = o.stalled;
                s.state = JobState::Done;
            }
            Err(e) => {
                s.error = Some(e.to_string());
                s.state = JobState::Failed;
            }
        }
    });
    Ok(jid)
}

async fn post_edit(State(app): AppRef, Path(id): Path<String>, body: String) -> ApiResult<(StatusCode, Json<Value>)> {
    let entry = app.get(&id)?;
    let spec = EditJobSpec::from_json(&body).map_err(bad)?;
    let jid = blocking(move || start_job(entry, spec)).await?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": jid }))))
}

async fn job_status(State(app): AppRef, Path((id, jid)): Path<(String, String)>) -> ApiResult<Json<JobStatus>> {
    let entry = app.get(&id)?;
    entry.job(&jid).map(Json).ok_or_else(|| ApiError::NotFound(format!("job {jid}")))
}

#[derive(Deserialize)]
struct KnobRequest {
    #[serde(default)]
    region: Option<RegionSpec>,
    l1: f64,
    l2: f64,
    theta: f64,
}

async fn post_knobs(State(app): AppRef, Path(id): Path<String>, Json(req): Json<KnobRequest>) -> ApiResult<Json<Value>> {
    let entry = app.get(&id)?;
    blocking(move || {
        let mut s = entry.session.lock().unwrap();
        let (w, h) = s.hr_dims();
        let region = req.region.unwrap_or(RegionSpec::All).to_mask(w, h)?;
        s.set_knobs(&region, req.l1, req.l2, req.theta)?;
        Ok(Json(json!({ "history": s.history_len() })))
    })
    .await
}

async fn post_undo(State(app): AppRef, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let entry = app.get(&id)?;
    blocking(move || {
        let mut s = entry.session.lock().unwrap();
        s.undo()?;
        Ok(Json(json!({ "history": s.history_len() })))
    })
    .await
}

async fn post_alternatives(
    State(app): AppRef,
    Path(id): Path<String>,
    Json(opts): Json<DiversityOptions>,
) -> ApiResult<Json<Value>> {
    let entry = app.get(&id)?;
    blocking(move || {
        let mut s = entry.session.lock().unwrap();
        let alts = s.diverse_alternatives(&opts)?.to_vec();
        let previews = alts
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let linf = s.op().residual(&a.x_hat, s.y())?.0;
                Ok(json!({ "index": i, "png": b64_png(&a.x_hat)?, "linf": linf }))
            })
            .collect::<ApiResult<Vec<_>>>()?;
        Ok(Json(json!({ "alternatives": previews })))
    })
    .await
}

async fn post_adopt(State(app): AppRef, Path((id, index)): Path<(String, usize)>) -> ApiResult<Json<Value>> {
    let entry = app.get(&id)?;
    blocking(move || {
        let mut s = entry.session.lock().unwrap();
        s.adopt(index)?;
        Ok(Json(json!({ "history": s.history_len() })))
    })
    .await
}

async fn consistency(State(app): AppRef, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let entry = app.get(&id)?;
    blocking(move || {
        let (linf, rms) = entry.session.lock().unwrap().consistency()?;
        Ok(Json(json!({ "linf": linf, "rms": rms })))
    })
    .await
}

#[derive(Deserialize)]
struct ExportRequest {
    dir: String,
}

async fn post_export(State(app): AppRef, Path(id): Path<String>, Json(req): Json<ExportRequest>) -> ApiResult<Json<Value>> {
    let entry = app.get(&id)?;
    blocking(move || {
        entry.session.lock().unwrap().export(&req.dir)?;
        Ok(Json(json!({ "dir": req.dir })))
    })
    .await
}
