use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use lvqa_core::prompt::{Attribute, Entity, EvalItem, EvalItemRecord, StructuredPrompt};
use lvqa_core::study::{router, AppState, StudyRegistry};
use serde_json::{json, Value};
use tower::ServiceExt;

fn item(source: &str, image_ref: &str) -> EvalItemRecord {
    let p = StructuredPrompt::new(
        source,
        vec![
            Entity::new("shirt", vec![Attribute::pattern("striped").unwrap()]).unwrap(),
            Entity::new("pants", vec![Attribute::pattern("dotted").unwrap()]).unwrap(),
        ],
    );
    EvalItemRecord::from(&EvalItem::new(p, image_ref, "gen"))
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(serde_json::to_vec(&b).unwrap())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, value)
}

fn app() -> Router {
    router(AppState::new(StudyRegistry::in_memory()))
}

async fn create(app: &Router, mode: &str, items: Vec<EvalItemRecord>) -> String {
    let (status, body) = call(app, Method::POST, "/v1/studies", Some(json!({ "mode": mode, "items": items }))).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body["study_id"].as_str().unwrap().to_owned()
}

async fn answer(app: &Router, study: &str, task: &str, who: &str, ans: Value) -> StatusCode {
    let body = json!({ "task_id": task, "annotator_id": who, "answer": ans });
    call(app, Method::POST, &format!("/v1/studies/{study}/responses"), Some(body)).await.0
}

#[tokio::test]
async fn create_and_list() {
    let app = app();
    let (status, body) = call(&app, Method::POST, "/v1/studies", Some(json!({ "mode": "localized", "items": [] }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");

    let id = create(&app, "localized", vec![item("a", "/x/a.png"), item("b", "/x/b.png")]).await;
    let (_, list) = call(&app, Method::GET, "/v1/studies", None).await;
    assert_eq!(list[0]["study_id"], json!(id));
    assert_eq!(list[0]["n_tasks"], json!(8));
    assert_eq!(list[0]["mode"], json!("localized"));

    let (status, _) = call(&app, Method::POST, "/v1/studies", Some(json!({ "mode": "vibes", "items": [] }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn annotator_flow_localized() {
    let app = app();
    let id = create(&app, "localized", vec![item("a", "/x/a.png")]).await;
    let (status, body) = call(&app, Method::POST, "/v1/annotators", None).await;
    assert_eq!(status, StatusCode::CREATED);
    let who = body["annotator_id"].as_str().unwrap().to_owned();

    let mut seen = Vec::new();
    loop {
        let (status, next) = call(&app, Method::GET, &format!("/v1/studies/{id}/next?annotator={who}"), None).await;
        assert_eq!(status, StatusCode::OK);
        if next["done"] == json!(true) {
            assert_eq!(next["progress"], json!({ "answered": 4, "total": 4 }));
            break;
        }
        let task = &next["task"];
        let text = serde_json::to_string(task).unwrap();
        for hidden in ["kind", "target", "leakage", "reflection", "positive", "negative"] {
            assert!(!text.contains(hidden), "task exposes `{hidden}`: {text}");
        }
        assert!(task["question_text"].as_str().unwrap().starts_with("Is the") || task["question_text"].as_str().unwrap().starts_with("Are the"));
        let tid = task["task_id"].as_str().unwrap().to_owned();
        assert_eq!(answer(&app, &id, &tid, &who, json!("yes")).await, StatusCode::CREATED);
        seen.push(tid);
    }
    assert_eq!(seen.len(), 4);

    assert_eq!(answer(&app, &id, &seen[0], &who, json!("no")).await, StatusCode::CONFLICT);
    assert_eq!(answer(&app, &id, &seen[0], "other", json!(3)).await, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(answer(&app, &id, "missing", "other", json!("yes")).await, StatusCode::NOT_FOUND);
    assert_eq!(answer(&app, "study-99", &seen[0], "other", json!("yes")).await, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn likert_bounds() {
    let app = app();
    let id = create(&app, "likert", vec![item("a", "/x/a.png")]).await;
    let (_, next) = call(&app, Method::GET, &format!("/v1/studies/{id}/next?annotator=u1"), None).await;
    assert_eq!(next["task"]["prompt_text"], json!("a striped shirt. a pair of dotted pants"));
    let tid = next["task"]["task_id"].as_str().unwrap().to_owned();
    for bad in [json!(0), json!(6), json!("yes"), json!(2.5)] {
        assert_eq!(answer(&app, &id, &tid, "u1", bad).await, StatusCode::UNPROCESSABLE_ENTITY);
    }
    assert_eq!(answer(&app, &id, &tid, "u1", json!(5)).await, StatusCode::CREATED);

    let (status, body) = call(&app, Method::GET, &format!("/v1/studies/{id}/reference-scores"), None).await;
    assert_eq!(status, StatusCode::CONFLICT, "{body}");
    let (status, _) = call(&app, Method::GET, &format!("/v1/studies/{id}/agreement"), None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn agreement_and_reference_scores() {
    let app = app();
    let id = create(&app, "localized", vec![item("a", "/x/a.png")]).await;
    let (status, body) = call(&app, Method::GET, &format!("/v1/studies/{id}/reference-scores"), None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["unanswered"].as_array().unwrap().len(), 4);

    // Faithful answers from three annotators, one dissent on the first task.
    let truth = ["yes", "yes", "no", "no"];
    for who in ["u1", "u2", "u3"] {
        for (t, a) in truth.iter().enumerate() {
            let a = if who == "u3" && t == 0 { "no" } else { a };
            assert_eq!(answer(&app, &id, &format!("{id}-t{t}"), who, json!(a)).await, StatusCode::CREATED);
        }
    }
    let (status, agr) = call(&app, Method::GET, &format!("/v1/studies/{id}/agreement"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(agr["n_tasks"], json!(4));
    let expected = 100.0 * (2.0 / 3.0 + 3.0) / 4.0;
    assert!((agr["mean_agreement"].as_f64().unwrap() - expected).abs() < 1e-9);

    let (status, refs) = call(&app, Method::GET, &format!("/v1/studies/{id}/reference-scores"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(refs["items"][0]["item_id"], json!("a:gen"));
    assert_eq!(refs["items"][0]["report"]["counts"], json!({ "tp": 2, "fp": 0, "tn": 2, "fn": 0 }));
    assert_eq!(refs["items"][0]["report"]["f1"], json!(1.0));
}

#[tokio::test]
async fn images_only_for_registered_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.png");
    image::RgbImage::new(4, 4).save(&path).unwrap();
    std::fs::write(dir.path().join("secret.txt"), "nope").unwrap();

    let app = app();
    let id = create(&app, "likert", vec![item("a", path.to_str().unwrap())]).await;
    let (_, next) = call(&app, Method::GET, &format!("/v1/studies/{id}/next?annotator=u"), None).await;
    let image_url = next["task"]["image_url"].as_str().unwrap().to_owned();

    let resp = app.clone().oneshot(Request::get(&image_url).body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "image/png");
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&bytes[1..4], b"PNG");

    for probe in ["/v1/images/secret.txt", "/v1/images/..%2Fsecret.txt", "/v1/images/study-1-img9"] {
        let resp = app.clone().oneshot(Request::get(probe).body(Body::empty()).unwrap()).await.unwrap();
        assert_eq!(resp.status(), StatusCode::NOT_FOUND, "{probe}");
    }
}

#[tokio::test]
async fn next_requires_annotator() {
    let app = app();
    let id = create(&app, "likert", vec![item("a", "/x/a.png")]).await;
    let (status, _) = call(&app, Method::GET, &format!("/v1/studies/{id}/next"), None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(&app, Method::GET, "/v1/studies/nope/next?annotator=u", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_submissions_are_linearizable() {
    let app = app();
    let items: Vec<_> = (0..10).map(|i| item(&format!("s{i}"), "/x/a.png")).collect();
    let id = create(&app, "localized", items).await;

    // 20 annotators answer all 40 tasks concurrently, and every one of them
    // also races a duplicate of its first answer.
    let mut handles = Vec::new();
    for a in 0..20 {
        let (app, id) = (app.clone(), id.clone());
        handles.push(tokio::spawn(async move {
            let who = format!("ann{a}");
            let mut created = 0;
            let mut conflicts = 0;
            for t in 0..40 {
                for _ in 0..(if t == 0 { 2 } else { 1 }) {
                    match answer(&app, &id, &format!("{id}-t{t}"), &who, json!("yes")).await {
                        StatusCode::CREATED => created += 1,
                        StatusCode::CONFLICT => conflicts += 1,
                        other => panic!("unexpected {other}"),
                    }
                }
            }
            (created, conflicts)
        }));
    }
    let mut totals = (0, 0);
    for h in handles {
        let (c, d) = h.await.unwrap();
        totals.0 += c;
        totals.1 += d;
    }
    assert_eq!(totals, (800, 20));
    let (_, list) = call(&app, Method::GET, "/v1/studies", None).await;
    assert_eq!(list[0]["n_responses"], json!(800));
}

#[tokio::test]
async fn state_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("responses.jsonl");
    let id;
    {
        let app = router(AppState::new(StudyRegistry::open(&log).unwrap()));
        id = create(&app, "localized", vec![item("a", "/x/a.png")]).await;
        for t in 0..4 {
            assert_eq!(answer(&app, &id, &format!("{id}-t{t}"), "u1", json!("no")).await, StatusCode::CREATED);
        }
    }
    let app = router(AppState::new(StudyRegistry::open(&log).unwrap()));
    let (_, next) = call(&app, Method::GET, &format!("/v1/studies/{id}/next?annotator=u1"), None).await;
    assert_eq!(next["done"], json!(true));
    assert_eq!(answer(&app, &id, &format!("{id}-t0"), "u1", json!("yes")).await, StatusCode::CONFLICT);
    let (status, refs) = call(&app, Method::GET, &format!("/v1/studies/{id}/reference-scores"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(refs["items"][0]["report"]["counts"], json!({ "tp": 0, "fp": 0, "tn": 2, "fn": 2 }));
}
