//! JSON-over-HTTP service for the interactive editing loop.
//!
//! Sessions live in process memory. Each one sits behind its own mutex, so
//! requests on one session are serialized while other sessions (and new
//! session creation) proceed concurrently. All heavy work runs on the
//! blocking pool.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use warpgen::field::CanonicalImage;
use warpgen::models::GeneratorBundle;

use crate::imageio::{decode_mask, decode_rgb, encode_mask, encode_rgb, ImageError};
use crate::session::Session;

/// Largest accepted frame count per session.
pub const MAX_FRAMES: usize = 256;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn bad(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            message: message.into(),
        }
    }
}

impl From<ImageError> for ApiError {
    fn from(e: ImageError) -> Self {
        Self::bad(e.code, e.message)
    }
}

/// Core errors caused by the request contents map to 400.
impl From<warpgen::Error> for ApiError {
    fn from(e: warpgen::Error) -> Self {
        use warpgen::Error as E;
        match e {
            E::Shape(_) => Self::bad("shape_mismatch", e.to_string()),
            E::Invalid(_) | E::NonFinite(_) | E::Dimension(_) => Self::bad("invalid_argument", e.to_string()),
            E::MissingParam(_) => Self::bad("no_deformation", e.to_string()),
            _ => Self::internal(e.to_string()),
        }
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    message: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.code,
            message: &self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

pub struct AppState {
    /// Bundle used when a session request names no checkpoint.
    pub default_bundle: Arc<GeneratorBundle>,
    bundles: Mutex<HashMap<PathBuf, Arc<GeneratorBundle>>>,
    sessions: Mutex<HashMap<u64, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(default_bundle: GeneratorBundle) -> Arc<Self> {
        Arc::new(Self {
            default_bundle: Arc::new(default_bundle),
            bundles: Mutex::new(HashMap::new()),
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        })
    }

    fn bundle(&self, checkpoint: Option<&str>) -> Result<Arc<GeneratorBundle>, ApiError> {
        let Some(p) = checkpoint else {
            return Ok(self.default_bundle.clone());
        };
        let path = crate::commands::checkpoint_file(Path::new(p));
        if let Some(b) = self.bundles.lock().unwrap().get(&path) {
            return Ok(b.clone());
        }
        let b = GeneratorBundle::load(&path)
            .map_err(|e| ApiError::bad("checkpoint_unavailable", format!("{}: {e}", path.display())))?;
        let b = Arc::new(b);
        self.bundles.lock().unwrap().insert(path, b.clone());
        Ok(b)
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        let missing = || ApiError {
            status: StatusCode::NOT_FOUND,
            code: "unknown_session",
            message: format!("no session `{id}`"),
        };
        let n: u64 = id.parse().map_err(|_| missing())?;
        self.sessions.lock().unwrap().get(&n).cloned().ok_or_else(missing)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRequest {
    #[serde(default)]
    pub checkpoint: Option<String>,
    pub seed: u64,
    pub frames: usize,
}

#[derive(Serialize, Deserialize)]
pub struct SessionResponse {
    pub session_id: String,
    pub canonical_png_b64: String,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResampleRequest {
    pub motion_seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub edited_canonical_png_b64: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackRequest {
    pub x: f64,
    pub y: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskRequest {
    pub mask_png_b64: String,
}

#[derive(Serialize, Deserialize)]
pub struct FramesResponse {
    pub frames_png_b64: Vec<String>,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct TrackedPoint {
    pub x: f64,
    pub y: f64,
    pub valid: bool,
    pub residual: f64,
}

#[derive(Serialize, Deserialize)]
pub struct TrackResponse {
    pub trajectory: Vec<TrackedPoint>,
}

#[derive(Serialize, Deserialize)]
pub struct MaskResponse {
    pub masks_png_b64: Vec<String>,
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad("invalid_json", e.to_string()))
}

fn unbase64(s: &str, field: &str) -> Result<Vec<u8>, ApiError> {
    B64.decode(s.trim()).map_err(|e| ApiError::bad("invalid_base64", format!("{field}: {e}")))
}

fn frames_b64(clip: &warpgen::field::VideoClip) -> Vec<String> {
    (0..clip.frame_count()).map(|t| B64.encode(encode_rgb(clip.frames(), t))).collect()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn create_session(State(st): State<Arc<AppState>>, body: Bytes) -> Result<Json<SessionResponse>, ApiError> {
    let req: SessionRequest = parse(&body)?;
    if req.frames == 0 || req.frames > MAX_FRAMES {
        return Err(ApiError::bad("invalid_argument", format!("frames must be in 1..={MAX_FRAMES}")));
    }
    blocking(move || {
        let bundle = st.bundle(req.checkpoint.as_deref())?;
        let s = Session::new(bundle, req.seed, req.frames)?;
        let c = s.canonical.tensor();
        let resp = SessionResponse {
            session_id: String::new(),
            canonical_png_b64: B64.encode(encode_rgb(c, 0)),
            width: s.canonical.width(),
            height: s.canonical.height(),
            frames: s.frames,
        };
        let id = st.next_id.fetch_add(1, Ordering::Relaxed);
        st.sessions.lock().unwrap().insert(id, Arc::new(Mutex::new(s)));
        log::info!("session {id}: seed {} frames {}", req.seed, req.frames);
        Ok(Json(SessionResponse {
            session_id: id.to_string(),
            ..resp
        }))
    })
    .await
}

async fn resample(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<FramesResponse>, ApiError> {
    let s = st.session(&id)?;
    let req: ResampleRequest = parse(&body)?;
    blocking(move || {
        let mut s = s.lock().unwrap();
        s.resample(req.motion_seed)?;
        Ok(Json(FramesResponse {
            frames_png_b64: frames_b64(&s.clip),
        }))
    })
    .await
}

async fn edit(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<FramesResponse>, ApiError> {
    let s = st.session(&id)?;
    let req: EditRequest = parse(&body)?;
    blocking(move || {
        let img = decode_rgb(&unbase64(&req.edited_canonical_png_b64, "edited_canonical_png_b64")?)?;
        let s = s.lock().unwrap();
        let (h, w) = (s.canonical.height(), s.canonical.width());
        let [_, _, ih, iw] = img.shape();
        if (ih, iw) != (h, w) {
            return Err(ApiError::bad("shape_mismatch", format!("edited canonical is {iw}x{ih}, session is {w}x{h}")));
        }
        let clip = s.edit(&CanonicalImage::new(img)?)?;
        Ok(Json(FramesResponse {
            frames_png_b64: frames_b64(&clip),
        }))
    })
    .await
}

async fn track(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<TrackResponse>, ApiError> {
    let s = st.session(&id)?;
    let req: TrackRequest = parse(&body)?;
    blocking(move || {
        let s = s.lock().unwrap();
        let tr = s.track(req.x, req.y)?;
        Ok(Json(TrackResponse {
            trajectory: tr
                .points
                .iter()
                .map(|p| TrackedPoint {
                    x: p.x,
                    y: p.y,
                    valid: p.valid,
                    residual: p.residual,
                })
                .collect(),
        }))
    })
    .await
}

async fn mask(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<MaskResponse>, ApiError> {
    let s = st.session(&id)?;
    let req: MaskRequest = parse(&body)?;
    blocking(move || {
        let m = decode_mask(&unbase64(&req.mask_png_b64, "mask_png_b64")?)?;
        let s = s.lock().unwrap();
        let seq = s.mask(&m)?;
        Ok(Json(MaskResponse {
            masks_png_b64: seq.frames.iter().map(|f| B64.encode(encode_mask(f))).collect(),
        }))
    })
    .await
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/session", post(create_session))
        .route("/session/{id}/resample", post(resample))
        .route("/session/{id}/edit", post(edit))
        .route("/session/{id}/track", post(track))
        .route("/session/{id}/mask", post(mask))
        .with_state(state)
}

/// Serves until interrupted.
pub async fn serve(state: Arc<AppState>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
