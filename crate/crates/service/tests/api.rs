use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use musicrl_core::net::ParamSet;
use musicrl_core::preferences::{Choice, Source, training_records};
use musicrl_core::rng::stream;
use musicrl_core::symbolic::{CLIP_LEN, Prompt};
use musicrl_service::{AppState, PairSession, PreferenceStore, Stats, router};
use tower::ServiceExt;

fn state(store: &Path, loaded: bool) -> Arc<AppState> {
    let model = loaded.then(|| ParamSet::init(&mut stream(3, &[])));
    let pool: Vec<Prompt> = (0..20).map(|i| Prompt::from_index(i * 16)).collect();
    Arc::new(AppState::new(model, pool, PreferenceStore::open(store).unwrap(), 11).unwrap())
}

async fn call(state: &Arc<AppState>, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = router(Arc::clone(state)).oneshot(req).await.unwrap();
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

async fn get_pair(state: &Arc<AppState>, query: &str) -> (StatusCode, Vec<u8>) {
    call(
        state,
        Request::get(format!("/api/pair{query}"))
            .body(Body::empty())
            .unwrap(),
    )
    .await
}

async fn pair(state: &Arc<AppState>) -> PairSession {
    let (status, body) = get_pair(state, "").await;
    assert_eq!(status, StatusCode::OK);
    serde_json::from_slice(&body).unwrap()
}

async fn post(state: &Arc<AppState>, body: String) -> StatusCode {
    let req = Request::post("/api/preference")
        .header("content-type", "application/json")
        .body(Body::from(body))
        .unwrap();
    call(state, req).await.0
}

fn choice_body(id: &str, choice: &str, la: bool, lb: bool) -> String {
    format!(r#"{{"pair_id":"{id}","choice":"{choice}","listened_a":{la},"listened_b":{lb}}}"#)
}

async fn stats(state: &Arc<AppState>) -> Stats {
    let (status, body) = call(
        state,
        Request::get("/api/stats").body(Body::empty()).unwrap(),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    serde_json::from_slice(&body).unwrap()
}

#[tokio::test]
async fn pairs_are_distinct_and_full_length() {
    let dir = tempfile::tempdir().unwrap();
    let s = state(&dir.path().join("p.jsonl"), true);
    let a = pair(&s).await;
    let b = pair(&s).await;
    assert_ne!(a.pair_id, b.pair_id);
    for p in [&a, &b] {
        assert_eq!(p.clip_a.tokens.len(), CLIP_LEN);
        assert_eq!(p.clip_b.tokens.len(), CLIP_LEN);
        assert!(!p.resolved);
    }
}

#[tokio::test]
async fn prompt_override_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let s = state(&dir.path().join("p.jsonl"), true);
    let (status, body) = get_pair(&s, "?prompt=C,MAJOR,MED,MID").await;
    assert_eq!(status, StatusCode::OK);
    let p: PairSession = serde_json::from_slice(&body).unwrap();
    assert_eq!(p.prompt, "a moderate mid-register melody in C major");

    let (status, body) = get_pair(
        &s,
        "?prompt=a%20sparse%20high-register%20melody%20in%20D%20minor",
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let p: PairSession = serde_json::from_slice(&body).unwrap();
    assert_eq!(p.prompt, "a sparse high-register melody in D minor");

    assert_eq!(
        get_pair(&s, "?prompt=nonsense").await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
}

#[tokio::test]
async fn resolution_lifecycle_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let s = state(&dir.path().join("p.jsonl"), true);
    assert_eq!(
        stats(&s).await,
        Stats {
            pairs_served: 0,
            resolved: 0,
            skipped: 0,
            filtered_for_training: 0
        }
    );
    let p = pair(&s).await;
    assert_eq!(
        post(&s, choice_body(&p.pair_id, "A", true, true)).await,
        StatusCode::NO_CONTENT
    );
    assert_eq!(
        post(&s, choice_body(&p.pair_id, "B", true, true)).await,
        StatusCode::CONFLICT
    );
    assert_eq!(
        post(&s, choice_body("nope", "A", true, true)).await,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        post(&s, "{not json".into()).await,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    assert_eq!(
        post(&s, choice_body(&p.pair_id, "C", true, true)).await,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    assert_eq!(
        post(&s, format!(r#"{{"pair_id":"{}","choice":"A"}}"#, p.pair_id)).await,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    let st = stats(&s).await;
    assert_eq!((st.pairs_served, st.resolved), (1, 1));

    let rec = &s.store().snapshot()[0];
    assert_eq!(rec.choice, Choice::A);
    assert_eq!(rec.source, Source::Ui);
    assert_eq!(rec.clip_a, p.clip_a.tokens);
    assert_eq!(rec.prompt, p.prompt_fields);
}

#[tokio::test]
async fn unheard_clip_is_stored_but_not_trainable() {
    let dir = tempfile::tempdir().unwrap();
    let s = state(&dir.path().join("p.jsonl"), true);
    let p = pair(&s).await;
    let q = pair(&s).await;
    assert_eq!(
        post(&s, choice_body(&p.pair_id, "A", true, false)).await,
        StatusCode::NO_CONTENT
    );
    assert_eq!(
        post(&s, choice_body(&q.pair_id, "SKIP", true, true)).await,
        StatusCode::NO_CONTENT
    );
    let records = s.store().snapshot();
    assert_eq!(records.len(), 2);
    assert!(!records[0].listened_b);
    let (kept, dropped) = training_records(&records);
    assert!(kept.is_empty());
    assert_eq!(dropped, 2);
    let st = stats(&s).await;
    assert_eq!(
        (st.resolved, st.skipped, st.filtered_for_training),
        (2, 1, 2)
    );
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_resolution_has_one_winner() {
    let dir = tempfile::tempdir().unwrap();
    let s = state(&dir.path().join("p.jsonl"), true);
    for _ in 0..10 {
        let p = pair(&s).await;
        let handles: Vec<_> = ["A", "B"]
            .into_iter()
            .map(|c| {
                let s = Arc::clone(&s);
                let body = choice_body(&p.pair_id, c, true, true);
                tokio::spawn(async move { post(&s, body).await })
            })
            .collect();
        let mut codes = Vec::new();
        for h in handles {
            codes.push(h.await.unwrap());
        }
        codes.sort();
        assert_eq!(codes, [StatusCode::NO_CONTENT, StatusCode::CONFLICT]);
    }
    assert_eq!(s.store().snapshot().len(), 10);
}

#[tokio::test]
async fn not_ready_until_model_loaded() {
    let dir = tempfile::tempdir().unwrap();
    let s = state(&dir.path().join("p.jsonl"), false);
    assert_eq!(get_pair(&s, "").await.0, StatusCode::SERVICE_UNAVAILABLE);
    s.set_model(ParamSet::init(&mut stream(3, &[])));
    assert_eq!(get_pair(&s, "").await.0, StatusCode::OK);
}

#[tokio::test]
async fn counters_never_decrease() {
    let dir = tempfile::tempdir().unwrap();
    let s = state(&dir.path().join("p.jsonl"), true);
    let mut last = stats(&s).await;
    for i in 0..6 {
        let p = pair(&s).await;
        if i % 2 == 0 {
            post(
                &s,
                choice_body(
                    &p.pair_id,
                    if i % 4 == 0 { "SKIP" } else { "B" },
                    true,
                    i != 2,
                ),
            )
            .await;
        }
        let now = stats(&s).await;
        assert!(now.pairs_served >= last.pairs_served);
        assert!(now.resolved >= last.resolved);
        assert!(now.skipped >= last.skipped);
        assert!(now.filtered_for_training >= last.filtered_for_training);
        last = now;
    }
    assert_eq!(last.pairs_served, 6);
    assert_eq!(last.resolved, 3);
}

#[tokio::test]
async fn acknowledged_records_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.jsonl");
    let ids = {
        let s = state(&path, true);
        let mut ids = Vec::new();
        for c in ["A", "B", "SKIP"] {
            let p = pair(&s).await;
            assert_eq!(
                post(&s, choice_body(&p.pair_id, c, true, true)).await,
                StatusCode::NO_CONTENT
            );
            ids.push(p.pair_id);
        }
        ids
    };
    let s = state(&path, true);
    let stored: Vec<String> = s
        .store()
        .snapshot()
        .iter()
        .map(|r| r.pair_id.clone())
        .collect();
    assert_eq!(stored, ids);
    assert_eq!(stats(&s).await.resolved, 3);
    // Pairs from the previous process are unknown to the new one.
    assert_eq!(
        post(&s, choice_body(&ids[0], "A", true, true)).await,
        StatusCode::NOT_FOUND
    );
}
