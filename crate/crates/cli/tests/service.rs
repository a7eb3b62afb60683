use std::collections::HashSet;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use proptest::prelude::*;
use serde_json::{json, Value};
use tower::ServiceExt;

use quickedit::editsim::EditTriple;
use quickedit::model::{Model, ModelConfig, ModelMode};
use quickedit::paraphrase::{boldness, MarkerModel};
use quickedit::text::Vocabulary;
use quickedit_cli::service::{edit, parse_edit_request, router, AppState, EditRequest, Registry};

const WORDS: [&str; 8] = ["a", "b", "c", "d", "e", "f", "g", "h"];

fn model(mode: ModelMode, seed: u64) -> Model {
    let vocab = || Vocabulary::from_tokens(WORDS).unwrap();
    let cfg = ModelConfig::uniform(mode, 0, 0, 1, 2, 8, 3, 8, 6, 32);
    Model::new(cfg, Some(vocab()), vocab(), seed).unwrap()
}

fn markers() -> MarkerModel {
    let t = |g: &str, m: &[bool]| EditTriple::new(vec![], g.split(' ').map(String::from).collect(), m.to_vec(), vec![]).unwrap();
    // P(a) = 1, P(b) = 1/2, P(c) = 1/4, others 0
    MarkerModel::fit(&[
        t("a b c d", &[true, true, true, false]),
        t("a b c c c e", &[true, false, false, false, false, false]),
    ])
    .unwrap()
}

fn registry() -> Registry {
    Registry::new()
        .with_model("qe", model(ModelMode::Bilingual, 1))
        .with_model("mono", model(ModelMode::Monolingual, 2))
        .with_markers(markers())
}

fn app() -> axum::Router {
    router(AppState::new(registry(), 5))
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

async fn post(app: &axum::Router, uri: &str, body: Value) -> (StatusCode, Value) {
    call(app, "POST", uri, Some(&body.to_string())).await
}

fn words(v: &Value) -> Vec<String> {
    v.as_str().unwrap().split_whitespace().map(String::from).collect()
}

fn indices(v: &Value) -> Vec<usize> {
    v.as_array().unwrap().iter().map(|x| x.as_u64().unwrap() as usize).collect()
}

#[tokio::test]
async fn health_and_models() {
    let app = app();
    let (s, v) = call(&app, "GET", "/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!({"status": "ok", "models": 2}));
    let (s, v) = call(&app, "GET", "/models", None).await;
    assert_eq!(s, StatusCode::OK);
    let ids: Vec<&str> = v["models"].as_array().unwrap().iter().map(|m| m["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["mono", "qe"]);
    assert_eq!(v["models"][1]["mode"], "bilingual");
    assert_eq!(v["models"][1]["target_vocab"], 12);
    assert_eq!(v["markers"], true);
}

#[tokio::test]
async fn marked_word_never_returns() {
    let app = app();
    let body = json!({"model": "qe", "source": "d e f", "guess": "a b c", "markers": [0, 1, 0]});
    let (s, v) = post(&app, "/edit", body.clone()).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let out = words(&v["output"]);
    assert!(!out.contains(&"b".to_string()), "{v}");
    assert!(v["score"].as_f64().unwrap().is_finite());
    assert_eq!(v["flagged"], false);
    let guess: HashSet<&str> = ["a", "b", "c"].into();
    let expect: Vec<usize> = (0..out.len()).filter(|&i| !guess.contains(out[i].as_str())).collect();
    assert_eq!(indices(&v["introduced"]), expect);

    // repeated and restarted: same answer
    assert_eq!(post(&app, "/edit", body.clone()).await.1, v);
    assert_eq!(post(&self::app(), "/edit", body).await.1, v);
}

#[tokio::test]
async fn unmarked_guess_reports_only_new_words() {
    let app = app();
    let (s, v) = post(
        &app,
        "/edit",
        json!({"model": "mono", "guess": "h g f", "markers": [0, 0, 0], "beam": 3}),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let out = words(&v["output"]);
    let introduced = indices(&v["introduced"]);
    for (i, w) in out.iter().enumerate() {
        assert_eq!(introduced.contains(&i), !["h", "g", "f"].contains(&w.as_str()));
    }
}

#[tokio::test]
async fn banning_everything_still_answers() {
    // with every word type banned only </s> remains
    let app = app();
    let guess = WORDS.join(" ") + " <unk>";
    let (s, v) = post(&app, "/edit", json!({"model": "mono", "guess": guess, "markers": vec![1; 9]})).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["output"], "");
    assert_eq!(v["introduced"], json!([]));
}

#[tokio::test]
async fn request_errors_name_the_field() {
    let app = app();
    let cases: Vec<(&str, StatusCode, Option<&str>)> = vec![
        ("not json", StatusCode::BAD_REQUEST, None),
        ("[1, 2]", StatusCode::BAD_REQUEST, None),
        (
            r#"{"model": "qe", "source": "a", "markers": []}"#,
            StatusCode::BAD_REQUEST,
            Some("guess"),
        ),
        (
            r#"{"model": "qe", "source": "a", "guess": 5, "markers": []}"#,
            StatusCode::BAD_REQUEST,
            Some("guess"),
        ),
        (
            r#"{"model": "qe", "source": "a", "guess": "a"}"#,
            StatusCode::BAD_REQUEST,
            Some("markers"),
        ),
        (
            r#"{"model": "qe", "source": "a", "guess": "a", "markers": [2]}"#,
            StatusCode::BAD_REQUEST,
            Some("markers"),
        ),
        (
            r#"{"model": "qe", "source": "a", "guess": "a", "markers": "1"}"#,
            StatusCode::BAD_REQUEST,
            Some("markers"),
        ),
        (
            r#"{"model": "qe", "source": "a", "guess": "a b", "markers": [1]}"#,
            StatusCode::UNPROCESSABLE_ENTITY,
            Some("markers"),
        ),
        (
            r#"{"model": "qe", "guess": "a", "markers": [1]}"#,
            StatusCode::BAD_REQUEST,
            Some("source"),
        ),
        (
            r#"{"model": "mono", "source": "a", "guess": "a", "markers": [1]}"#,
            StatusCode::BAD_REQUEST,
            Some("source"),
        ),
        (
            r#"{"model": "qe", "source": "a", "guess": "a", "markers": [1], "beam": 0}"#,
            StatusCode::BAD_REQUEST,
            Some("beam"),
        ),
        (
            r#"{"model": "qe", "source": "a", "guess": "a", "markers": [1], "beam": 1000}"#,
            StatusCode::BAD_REQUEST,
            Some("beam"),
        ),
        (
            r#"{"model": "nope", "source": "a", "guess": "a", "markers": [1]}"#,
            StatusCode::BAD_REQUEST,
            Some("model"),
        ),
        (
            r#"{"source": "a", "guess": "a", "markers": [1]}"#,
            StatusCode::BAD_REQUEST,
            Some("model"),
        ),
        (
            r#"{"model": "qe", "source": "a", "guess": "a", "markers": [1], "colour": 1}"#,
            StatusCode::BAD_REQUEST,
            Some("colour"),
        ),
    ];
    for (body, status, field) in cases {
        let (s, v) = call(&app, "POST", "/edit", Some(body)).await;
        assert_eq!(s, status, "{body} → {v}");
        assert!(v["error"].as_str().is_some_and(|e| !e.is_empty()), "{v}");
        assert_eq!(v.get("field").and_then(Value::as_str), field, "{body}");
    }
    // past max_positions
    let long = vec!["a"; 40].join(" ");
    let (s, v) = post(&app, "/edit", json!({"model": "mono", "guess": long, "markers": vec![0; 40]})).await;
    assert_eq!((s, v["field"].as_str()), (StatusCode::BAD_REQUEST, Some("guess")), "{v}");
}

#[tokio::test]
async fn sole_model_needs_no_name() {
    let app = router(AppState::new(
        Registry::new().with_model("only", model(ModelMode::Monolingual, 3)),
        5,
    ));
    let (s, _) = post(&app, "/edit", json!({"guess": "a b", "markers": [1, 0]})).await;
    assert_eq!(s, StatusCode::OK);
    let (s, v) = post(&app, "/paraphrase", json!({"sentence": "a b", "tau": 0.5})).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE, "{v}");
}

#[tokio::test]
async fn paraphrase_endpoint() {
    let app = app();
    let sentence = "a b c d e";
    let (s, v) = post(&app, "/paraphrase", json!({"sentence": sentence, "tau": 1.0})).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["markers"], json!([0, 0, 0, 0, 0]));

    let mut previous: Option<Vec<u64>> = None;
    for tau in [1.0, 0.75, 0.5, 0.3, 0.25, 0.1, 0.0] {
        let (s, v) = post(&app, "/paraphrase", json!({"sentence": sentence, "tau": tau})).await;
        assert_eq!(s, StatusCode::OK, "{v}");
        let marks: Vec<u64> = v["markers"].as_array().unwrap().iter().map(|m| m.as_u64().unwrap()).collect();
        if let Some(p) = &previous {
            assert!(p.iter().zip(&marks).all(|(a, b)| a <= b), "τ={tau}: {p:?} → {marks:?}");
        }
        let src: Vec<&str> = sentence.split(' ').collect();
        let out = words(&v["output"]);
        for (w, m) in src.iter().zip(&marks) {
            assert!(*m == 0 || !out.contains(&w.to_string()), "τ={tau}: {w} returned");
        }
        assert_eq!(v["boldness"].as_f64().unwrap(), boldness(&src, &out));
        previous = Some(marks);
    }
    // P(a) = 1, P(b) = 1/2, P(c) = 1/4 are strict thresholds
    let (_, v) = post(&app, "/paraphrase", json!({"sentence": sentence, "tau": 0.25})).await;
    assert_eq!(v["markers"], json!([1, 1, 0, 0, 0]));

    for bad in [
        json!({"sentence": "a", "tau": 1.5}),
        json!({"sentence": "a", "tau": -0.1}),
        json!({"sentence": "a", "tau": "x"}),
        json!({"sentence": "a"}),
    ] {
        let (s, v) = post(&app, "/paraphrase", bad).await;
        assert_eq!((s, v["field"].as_str()), (StatusCode::BAD_REQUEST, Some("tau")));
    }
    let (s, v) = post(&app, "/paraphrase", json!({"sentence": "a", "tau": 0.5, "model": "qe"})).await;
    assert_eq!((s, v["field"].as_str()), (StatusCode::BAD_REQUEST, Some("model")));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn reload_is_atomic() {
    let body = json!({"model": "m", "guess": "a b c d", "markers": [0, 1, 0, 0]});
    let answer = |seed| async move {
        let app = router(AppState::new(
            Registry::new().with_model("m", model(ModelMode::Monolingual, seed)),
            5,
        ));
        post(&app, "/edit", json!({"model": "m", "guess": "a b c d", "markers": [0, 1, 0, 0]}))
            .await
            .1
    };
    let (old, new) = (answer(10).await, answer(11).await);
    assert_ne!(old, new);

    let state = AppState::new(Registry::new().with_model("m", model(ModelMode::Monolingual, 10)), 5);
    let app = router(state.clone());
    let mut tasks = Vec::new();
    for i in 0..40 {
        let app = app.clone();
        let body = body.clone();
        tasks.push(tokio::spawn(async move { post(&app, "/edit", body).await.1 }));
        if i == 20 {
            state.replace(Registry::new().with_model("m", model(ModelMode::Monolingual, 11)));
        }
    }
    for t in tasks {
        let v = t.await.unwrap();
        assert!(v == old || v == new, "{v}");
    }
    assert_eq!(post(&app, "/edit", body).await.1, new);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn responses_are_safe_and_partition_the_output(
        guess in prop::collection::vec(0usize..10, 1..7),
        marks in prop::collection::vec(any::<bool>(), 7),
        bilingual in any::<bool>(),
        beam in 1usize..5,
    ) {
        // indices past the vocabulary become unknown words
        let guess: Vec<String> = guess.iter().map(|&i| WORDS.get(i).map_or(format!("x{i}"), |w| w.to_string())).collect();
        let markers = marks[..guess.len()].to_vec();
        let registry = registry();
        let req = EditRequest {
            source: bilingual.then(|| "c d e".to_string()),
            guess: guess.join(" "),
            markers: markers.clone(),
            beam: Some(beam),
            model: Some(if bilingual { "qe" } else { "mono" }.into()),
        };
        let resp = edit(&registry, &req, 5).unwrap();
        let out: Vec<&str> = resp.output.split_whitespace().collect();
        let banned: HashSet<&str> = guess.iter().zip(&markers).filter(|p| *p.1).map(|p| p.0.as_str()).collect();
        prop_assert!(out.iter().all(|w| !banned.contains(w)));
        let types: HashSet<&str> = guess.iter().map(String::as_str).collect();
        for (i, w) in out.iter().enumerate() {
            prop_assert_eq!(resp.introduced.contains(&i), !types.contains(w));
        }
        prop_assert!(resp.introduced.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn request_parser_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = parse_edit_request(&bytes);
    }

    #[test]
    fn request_parser_reads_what_it_is_given(
        guess in "[a-z ]{0,20}", markers in prop::collection::vec(any::<bool>(), 0..6),
        source in prop::option::of("[a-z ]{0,10}"), beam in prop::option::of(1usize..=64),
    ) {
        let mut body = json!({"guess": guess, "markers": markers.iter().map(|&m| u8::from(m)).collect::<Vec<_>>()});
        if let Some(s) = &source { body["source"] = json!(s); }
        if let Some(b) = beam { body["beam"] = json!(b); }
        let req = parse_edit_request(body.to_string().as_bytes()).unwrap();
        prop_assert_eq!(req, EditRequest { source, guess, markers, beam, model: None });
    }
}
