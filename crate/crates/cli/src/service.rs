//! HTTP JSON service: constrained rewriting of a marked guess and automatic
//! paraphrasing.
//!
//! Models live in a [`Registry`] behind `RwLock<Arc<_>>`. A request clones
//! the `Arc` once and works on that snapshot, so a reload swaps every model
//! at once and in-flight requests finish on the old set.

use std::collections::{BTreeMap, HashSet};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::{json, Map, Value};

use quickedit::decoding::{decode, respects_ban, DecodeOptions, Hypothesis};
use quickedit::editsim::EditTriple;
use quickedit::model::{Model, ModelError, ModelMode};
use quickedit::paraphrase::{paraphrase, MarkerModel, ParaphraseError};
use quickedit::text::words;

pub const MAX_BEAM: usize = 64;

#[derive(Clone, Debug, Default)]
pub struct Registry {
    models: BTreeMap<String, Arc<Model>>,
    markers: Option<Arc<MarkerModel>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_model(mut self, id: impl Into<String>, model: Model) -> Self {
        self.models.insert(id.into(), Arc::new(model));
        self
    }

    pub fn with_markers(mut self, markers: MarkerModel) -> Self {
        self.markers = Some(Arc::new(markers));
        self
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// The named model, or the only one when no name is given.
    fn pick(&self, id: Option<&str>, filter: impl Fn(&Model) -> bool) -> Result<(String, Arc<Model>), ApiError> {
        match id {
            Some(id) => self
                .models
                .get(id)
                .map(|m| (id.to_string(), m.clone()))
                .ok_or_else(|| ApiError::bad(format!("unknown model {id:?}"), "model")),
            None => {
                let mut fit = self.models.iter().filter(|(_, m)| filter(m));
                match (fit.next(), fit.next()) {
                    (Some((id, m)), None) => Ok((id.clone(), m.clone())),
                    (None, _) => Err(ApiError::unavailable("no suitable model is loaded")),
                    _ => Err(ApiError::bad("several models are loaded; name one", "model")),
                }
            }
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    registry: Arc<RwLock<Arc<Registry>>>,
    default_beam: usize,
}

impl AppState {
    pub fn new(registry: Registry, default_beam: usize) -> Self {
        Self {
            registry: Arc::new(RwLock::new(Arc::new(registry))),
            default_beam: default_beam.clamp(1, MAX_BEAM),
        }
    }

    pub fn snapshot(&self) -> Arc<Registry> {
        self.registry.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Atomically replaces every loaded model.
    pub fn replace(&self, registry: Registry) {
        *self.registry.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(registry);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub error: String,
    pub field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>, field: Option<&str>) -> Self {
        Self {
            status,
            error: error.into(),
            field: field.map(String::from),
        }
    }

    fn bad(error: impl Into<String>, field: &str) -> Self {
        Self::new(StatusCode::BAD_REQUEST, error, Some(field))
    }

    fn unavailable(error: impl Into<String>) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, error, None)
    }

    fn internal(error: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, error, None)
    }

    /// Decoder errors caused by the request (too long, wrong inputs).
    fn from_model(e: ModelError, field: &str) -> Self {
        match e {
            ModelError::PositionOverflow { .. } | ModelError::EmptyEncoderOutput => Self::bad(e.to_string(), field),
            ModelError::MissingSource => Self::bad(e.to_string(), "source"),
            ModelError::MissingGuess => Self::bad(e.to_string(), "guess"),
            other => Self::internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.error });
        if let Some(f) = self.field {
            body["field"] = Value::String(f);
        }
        (self.status, Json(body)).into_response()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditRequest {
    pub source: Option<String>,
    pub guess: String,
    pub markers: Vec<bool>,
    pub beam: Option<usize>,
    pub model: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParaphraseRequest {
    pub sentence: String,
    pub tau: f64,
    pub beam: Option<usize>,
    pub model: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EditResponse {
    pub output: String,
    pub introduced: Vec<usize>,
    pub flagged: bool,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParaphraseResponse {
    pub markers: Vec<u8>,
    pub output: String,
    pub introduced: Vec<usize>,
    pub boldness: f64,
    pub flagged: bool,
    pub score: f64,
}

fn object(body: &[u8], known: &[&str]) -> Result<Map<String, Value>, ApiError> {
    let value: Value =
        serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid JSON: {e}"), None))?;
    let Value::Object(map) = value else {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "request body must be a JSON object", None));
    };
    if let Some(k) = map.keys().find(|k| !known.contains(&k.as_str())) {
        return Err(ApiError::bad(format!("unknown field {k:?}"), k));
    }
    Ok(map)
}

fn string_field(map: &Map<String, Value>, key: &str) -> Result<Option<String>, ApiError> {
    match map.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(ApiError::bad(format!("{key} must be a string"), key)),
    }
}

fn beam_field(map: &Map<String, Value>) -> Result<Option<usize>, ApiError> {
    match map.get("beam") {
        None | Some(Value::Null) => Ok(None),
        Some(v) => match v.as_u64() {
            Some(b) if (1..=MAX_BEAM as u64).contains(&b) => Ok(Some(b as usize)),
            _ => Err(ApiError::bad(format!("beam must be an integer in 1..={MAX_BEAM}"), "beam")),
        },
    }
}

pub fn parse_edit_request(body: &[u8]) -> Result<EditRequest, ApiError> {
    let map = object(body, &["source", "guess", "markers", "beam", "model"])?;
    let guess = string_field(&map, "guess")?.ok_or_else(|| ApiError::bad("guess is required", "guess"))?;
    let markers = match map.get("markers") {
        Some(Value::Array(xs)) => xs
            .iter()
            .map(|x| match x.as_u64() {
                Some(0) => Ok(false),
                Some(1) => Ok(true),
                _ => Err(ApiError::bad("markers must be 0 or 1", "markers")),
            })
            .collect::<Result<Vec<_>, _>>()?,
        None => return Err(ApiError::bad("markers is required", "markers")),
        Some(_) => return Err(ApiError::bad("markers must be an array of 0/1", "markers")),
    };
    Ok(EditRequest {
        source: string_field(&map, "source")?,
        guess,
        markers,
        beam: beam_field(&map)?,
        model: string_field(&map, "model")?,
    })
}

pub fn parse_paraphrase_request(body: &[u8]) -> Result<ParaphraseRequest, ApiError> {
    let map = object(body, &["sentence", "tau", "beam", "model"])?;
    let sentence = string_field(&map, "sentence")?.ok_or_else(|| ApiError::bad("sentence is required", "sentence"))?;
    let tau = match map.get("tau").and_then(Value::as_f64) {
        Some(t) if (0.0..=1.0).contains(&t) => t,
        _ => return Err(ApiError::bad("tau must be a number in [0, 1]", "tau")),
    };
    Ok(ParaphraseRequest {
        sentence,
        tau,
        beam: beam_field(&map)?,
        model: string_field(&map, "model")?,
    })
}

/// Indices of `output` words whose type does not occur in `guess`.
pub fn introduced<S: AsRef<str>, G: AsRef<str>>(output: &[S], guess: &[G]) -> Vec<usize> {
    let types: HashSet<&str> = guess.iter().map(AsRef::as_ref).collect();
    (0..output.len()).filter(|&i| !types.contains(output[i].as_ref())).collect()
}

fn options(beam: Option<usize>, default: usize) -> DecodeOptions {
    DecodeOptions {
        beam: beam.unwrap_or(default),
        ..DecodeOptions::default()
    }
}

/// Validates `req` against the chosen model and runs the constrained decode.
pub fn edit(registry: &Registry, req: &EditRequest, default_beam: usize) -> Result<EditResponse, ApiError> {
    let (_, model) = registry.pick(req.model.as_deref(), |_| true)?;
    let guess: Vec<String> = words(&req.guess).into_iter().map(String::from).collect();
    if guess.len() != req.markers.len() {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("guess has {} words but {} markers", guess.len(), req.markers.len()),
            Some("markers"),
        ));
    }
    let source: Vec<String> = match (&req.source, model.mode().uses_source()) {
        (Some(s), true) => words(s).into_iter().map(String::from).collect(),
        (None, true) => return Err(ApiError::bad("this model needs a source sentence", "source")),
        (Some(_), false) => return Err(ApiError::bad("this model takes no source sentence", "source")),
        (None, false) => Vec::new(),
    };
    let triple = EditTriple::new(source, guess, req.markers.clone(), Vec::new()).map_err(|e| ApiError::internal(e.to_string()))?;
    let item = triple.decode_item(&model).map_err(|e| ApiError::bad(e.to_string(), "guess"))?;
    let field = if model.mode().uses_guess() { "guess" } else { "source" };
    let hyp = decode(&model, &item, &options(req.beam, default_beam)).map_err(|e| ApiError::from_model(e, field))?;
    check_ban(&hyp, &triple.guess, &triple.markers)?;
    Ok(EditResponse {
        introduced: introduced(&hyp.words, &triple.guess),
        output: hyp.output(),
        flagged: hyp.flagged,
        score: hyp.score,
    })
}

/// Independent of the decoder's own pruning: recompute the ban from the
/// request and refuse to answer if any output word is in it.
fn check_ban(hyp: &Hypothesis, guess: &[String], markers: &[bool]) -> Result<(), ApiError> {
    let ban = quickedit::decoding::BanSet::from_words(guess, markers);
    if respects_ban(&hyp.words, &ban) {
        Ok(())
    } else {
        tracing::error!(output = %hyp.output(), "decoder produced a banned word");
        Err(ApiError::internal("decoder produced a banned word"))
    }
}

pub fn run_paraphrase(registry: &Registry, req: &ParaphraseRequest, default_beam: usize) -> Result<ParaphraseResponse, ApiError> {
    let markers = registry
        .markers
        .clone()
        .ok_or_else(|| ApiError::unavailable("no marker model is loaded"))?;
    let (_, model) = registry.pick(req.model.as_deref(), |m| m.mode() == ModelMode::Monolingual)?;
    let sentence: Vec<String> = words(&req.sentence).into_iter().map(String::from).collect();
    let p = paraphrase(&model, &markers, &sentence, req.tau, &options(req.beam, default_beam)).map_err(|e| match e {
        ParaphraseError::Threshold(_) => ApiError::bad(e.to_string(), "tau"),
        ParaphraseError::WrongMode(_) => ApiError::bad(e.to_string(), "model"),
        ParaphraseError::Model(m) => ApiError::from_model(m, "sentence"),
        other => ApiError::internal(other.to_string()),
    })?;
    let hyp = Hypothesis {
        tokens: Vec::new(),
        words: p.output.clone(),
        score: p.score,
        flagged: p.flagged,
        banned: Vec::new(),
        attention: None,
    };
    check_ban(&hyp, &sentence, &p.markers)?;
    Ok(ParaphraseResponse {
        markers: p.markers.iter().map(|&m| u8::from(m)).collect(),
        introduced: introduced(&p.output, &sentence),
        output: hyp.output(),
        boldness: p.boldness,
        flagged: p.flagged,
        score: p.score,
    })
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| Err(ApiError::internal(format!("decode task failed: {e}"))))
}

async fn edit_handler(State(state): State<AppState>, body: Bytes) -> Result<Json<EditResponse>, ApiError> {
    let req = parse_edit_request(&body)?;
    let registry = state.snapshot();
    let beam = state.default_beam;
    blocking(move || edit(&registry, &req, beam)).await.map(Json)
}

async fn paraphrase_handler(State(state): State<AppState>, body: Bytes) -> Result<Json<ParaphraseResponse>, ApiError> {
    let req = parse_paraphrase_request(&body)?;
    let registry = state.snapshot();
    let beam = state.default_beam;
    blocking(move || run_paraphrase(&registry, &req, beam)).await.map(Json)
}

async fn models_handler(State(state): State<AppState>) -> Json<Value> {
    let registry = state.snapshot();
    let models: Vec<Value> = registry
        .models
        .iter()
        .map(|(id, m)| {
            json!({
                "id": id,
                "mode": m.mode(),
                "parameters": m.params.count(),
                "source_vocab": m.source_vocab.as_ref().map(|v| v.len()),
                "target_vocab": m.target_vocab.len(),
                "max_positions": m.config().max_positions,
            })
        })
        .collect();
    Json(json!({ "models": models, "markers": registry.markers.is_some() }))
}

async fn health_handler(State(state): State<AppState>) -> Json<Value> {
    Json(json!({ "status": "ok", "models": state.snapshot().len() }))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/edit", post(edit_handler))
        .route("/paraphrase", post(paraphrase_handler))
        .route("/models", get(models_handler))
        .route("/health", get(health_handler))
        .with_state(state)
}
