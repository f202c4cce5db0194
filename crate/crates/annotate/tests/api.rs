use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use odseg_annotate::auth::user_line;
use odseg_annotate::render::point_in_polygon;
use odseg_annotate::{router, AppState, AuthPolicy, ServiceConfig};
use odseg_core::data::{merge_annotations, read_mask, write_rgb};
use odseg_core::Tensor;

const SIZE: usize = 160;

struct Fixture {
    _dir: tempfile::TempDir,
    app: Router,
    data_dir: std::path::PathBuf,
}

fn fixture(auth: AuthPolicy, assignments: Option<&str>) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    std::fs::create_dir_all(data_dir.join("images")).unwrap();
    for id in ["img1", "img2", "img3"] {
        let t = Tensor::full(&[SIZE, SIZE, 3], 0.4).unwrap();
        write_rgb(&t, data_dir.join("images").join(format!("{id}.png"))).unwrap();
    }
    if let Some(a) = assignments {
        std::fs::write(data_dir.join("assignments.txt"), a).unwrap();
    }
    let users = dir.path().join("users.txt");
    std::fs::write(
        &users,
        format!(
            "{}\n{}\n{}\n",
            user_line("ann", "secret-a"),
            user_line("bob", "secret-b"),
            user_line("cat", "secret-c")
        ),
    )
    .unwrap();
    let config = ServiceConfig {
        data_dir: data_dir.clone(),
        users_file: users,
        static_dir: None,
        auth,
    };
    let app = router(Arc::new(AppState::new(&config).unwrap()));
    Fixture { _dir: dir, app, data_dir }
}

async fn call(app: &Router, method: &str, uri: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn login(app: &Router, user: &str, pw: &str) -> String {
    let (s, b) = call(app, "POST", "/api/login", None, Some(json!({"username": user, "password": pw}))).await;
    assert_eq!(s, StatusCode::OK);
    serde_json::from_slice::<Value>(&b).unwrap()["token"].as_str().unwrap().to_string()
}

async fn list(app: &Router, token: &str) -> Vec<String> {
    let (s, b) = call(app, "GET", "/api/images", Some(token), None).await;
    assert_eq!(s, StatusCode::OK);
    serde_json::from_slice::<Vec<Value>>(&b)
        .unwrap()
        .iter()
        .map(|v| v["id"].as_str().unwrap().to_string())
        .collect()
}

fn arc(cx: f64, cy: f64, r: f64, from: f64, to: f64, n: usize) -> Vec<[f64; 2]> {
    (0..=n)
        .map(|i| {
            let t = from + (to - from) * i as f64 / n as f64;
            [cx + r * t.cos(), cy + r * t.sin()]
        })
        .collect()
}

fn mask_from_png(bytes: &[u8], dir: &Path, name: &str) -> Tensor {
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    read_mask(&p).unwrap()
}

/// Trace a circle in two batches and submit; returns the polygon used.
async fn trace_circle(app: &Router, token: &str, id: &str, cx: f64, cy: f64, r: f64) -> Vec<[f64; 2]> {
    use std::f64::consts::PI;
    let first = arc(cx, cy, r, 0.0, PI, 180);
    let second = arc(cx, cy, r, PI, 2.0 * PI, 180);
    for half in [&first, &second] {
        let (s, _) = call(
            app,
            "POST",
            &format!("/api/images/{id}/strokes"),
            Some(token),
            Some(json!({"strokes": [{"mode": "draw", "width": 1.0, "points": half}]})),
        )
        .await;
        assert_eq!(s, StatusCode::NO_CONTENT);
    }
    first.into_iter().chain(second).collect()
}

#[tokio::test]
async fn portal_workflow() {
    let f = fixture(AuthPolicy::default(), None);
    let ann = login(&f.app, "ann", "secret-a").await;
    let bob = login(&f.app, "bob", "secret-b").await;
    assert_eq!(list(&f.app, &ann).await, ["img1", "img2", "img3"]);

    let polygon = trace_circle(&f.app, &ann, "img1", 80.0, 78.0, 62.0).await;
    let (s, b) = call(&f.app, "GET", "/api/images/img1/strokes", Some(&ann), None).await;
    assert_eq!(s, StatusCode::OK);
    let record: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(record["strokes"].as_array().unwrap().len(), 2);
    assert_eq!(record["status"], "in-progress");
    // bob never sees ann's strokes
    let (_, b) = call(&f.app, "GET", "/api/images/img1/strokes", Some(&bob), None).await;
    assert!(serde_json::from_slice::<Value>(&b).unwrap()["strokes"].as_array().unwrap().is_empty());

    let (s, _) = call(&f.app, "POST", "/api/images/img1/submit", Some(&ann), None).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    assert_eq!(list(&f.app, &ann).await, ["img2", "img3"]);
    assert_eq!(list(&f.app, &bob).await, ["img1", "img2", "img3"]);
    let (s, _) = call(&f.app, "POST", "/api/images/img1/submit", Some(&ann), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = call(
        &f.app,
        "POST",
        "/api/images/img1/strokes",
        Some(&ann),
        Some(json!({"strokes": [{"mode": "draw", "width": 2.0, "points": [[1.0, 1.0], [2.0, 2.0]]}]})),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);

    // exported area against a point-in-polygon count
    let (s, png) = call(&f.app, "GET", "/api/export/img1?annotator=ann", Some(&bob), None).await;
    assert_eq!(s, StatusCode::OK);
    let decoded = image::load_from_memory(&png).unwrap().to_luma8();
    assert!(decoded.as_raw().iter().all(|&v| v == 0 || v == 255));
    let ann_mask = mask_from_png(&png, &f.data_dir, "ann.png");
    let oracle = (0..SIZE * SIZE)
        .filter(|i| point_in_polygon([(i % SIZE) as f64 + 0.5, (i / SIZE) as f64 + 0.5], &polygon))
        .count() as f64;
    let area = ann_mask.sum();
    assert!((area - oracle).abs() / oracle <= 0.02, "area {area} oracle {oracle}");

    // second annotator, shifted circle; merged export delegates to the merge rule
    trace_circle(&f.app, &bob, "img1", 86.0, 84.0, 55.0).await;
    let (s, _) = call(&f.app, "POST", "/api/images/img1/submit", Some(&bob), None).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (_, bob_png) = call(&f.app, "GET", "/api/export/img1?annotator=bob", Some(&ann), None).await;
    let bob_mask = mask_from_png(&bob_png, &f.data_dir, "bob.png");
    let (s, merged_png) = call(&f.app, "GET", "/api/export/img1/merged", Some(&ann), None).await;
    assert_eq!(s, StatusCode::OK);
    let merged = mask_from_png(&merged_png, &f.data_dir, "merged.png");
    assert_eq!(merged, merge_annotations(&[ann_mask, bob_mask]).unwrap());
}

#[tokio::test]
async fn polygon_area_matches_oracle_within_two_percent() {
    // the fill covers the polygon; a 1px brush adds a thin ring outside it
    let f = fixture(AuthPolicy::default(), None);
    let ann = login(&f.app, "ann", "secret-a").await;
    let polygon = trace_circle(&f.app, &ann, "img2", 80.0, 80.0, 70.0).await;
    call(&f.app, "POST", "/api/images/img2/submit", Some(&ann), None).await;
    let (_, png) = call(&f.app, "GET", "/api/export/img2?annotator=ann", Some(&ann), None).await;
    let mask = mask_from_png(&png, &f.data_dir, "m.png");
    let oracle_inside = |x: usize, y: usize| point_in_polygon([x as f64 + 0.5, y as f64 + 0.5], &polygon);
    let interior = (0..SIZE * SIZE).filter(|i| oracle_inside(i % SIZE, i / SIZE)).count() as f64;
    let covered = (0..SIZE * SIZE)
        .filter(|&i| oracle_inside(i % SIZE, i / SIZE) && mask.data()[i] == 1.0)
        .count() as f64;
    assert_eq!(covered, interior);
    let area = mask.sum();
    assert!((area - interior) / interior <= 0.02, "area {area} interior {interior}");
}

#[tokio::test]
async fn auth_contracts() {
    let f = fixture(
        AuthPolicy {
            token_ttl: Duration::from_millis(200),
            max_failures: 3,
            lockout: Duration::from_secs(60),
        },
        None,
    );
    let (s, _) = call(&f.app, "GET", "/api/images", None, None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, _) = call(&f.app, "POST", "/api/login", None, Some(json!({"username": "ann", "password": "nope"}))).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let token = login(&f.app, "ann", "secret-a").await;
    assert_eq!(list(&f.app, &token).await.len(), 3);
    tokio::time::sleep(Duration::from_millis(300)).await;
    let (s, _) = call(&f.app, "GET", "/api/images", Some(&token), None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);

    for expected in [StatusCode::UNAUTHORIZED, StatusCode::UNAUTHORIZED, StatusCode::TOO_MANY_REQUESTS] {
        let (s, _) = call(&f.app, "POST", "/api/login", None, Some(json!({"username": "bob", "password": "x"}))).await;
        assert_eq!(s, expected);
    }
    // locked even with the right password
    let (s, _) = call(&f.app, "POST", "/api/login", None, Some(json!({"username": "bob", "password": "secret-b"}))).await;
    assert_eq!(s, StatusCode::TOO_MANY_REQUESTS);
}

#[tokio::test]
async fn assignment_and_validation() {
    let f = fixture(AuthPolicy::default(), Some("ann: img1, img3\nbob: img2\n"));
    let ann = login(&f.app, "ann", "secret-a").await;
    let cat = login(&f.app, "cat", "secret-c").await;
    assert_eq!(list(&f.app, &ann).await, ["img1", "img3"]);
    assert!(list(&f.app, &cat).await.is_empty());

    let stroke = |pts: Value, mode: &str| json!({"strokes": [{"mode": mode, "width": 3.0, "points": pts}]});
    let (s, _) = call(&f.app, "POST", "/api/images/img2/strokes", Some(&ann), Some(stroke(json!([[1, 1], [5, 5]]), "draw"))).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    let (s, _) = call(&f.app, "POST", "/api/images/nope/strokes", Some(&ann), Some(stroke(json!([[1, 1], [5, 5]]), "draw"))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&f.app, "POST", "/api/images/img1/strokes", Some(&ann), Some(stroke(json!([[1, 1], [161, 5]]), "draw"))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    // only erase strokes cannot be submitted
    let (s, _) = call(&f.app, "POST", "/api/images/img1/strokes", Some(&ann), Some(stroke(json!([[1, 1], [5, 5]]), "erase"))).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (s, _) = call(&f.app, "POST", "/api/images/img1/submit", Some(&ann), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    // draw then erase everything: the rendered mask is empty
    let (s, _) = call(&f.app, "POST", "/api/images/img3/strokes", Some(&ann), Some(stroke(json!([[10, 10], [20, 10]]), "draw"))).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let erase = json!({"strokes": [{"mode": "erase", "width": 20.0, "points": [[8, 10], [22, 10]]}]});
    call(&f.app, "POST", "/api/images/img3/strokes", Some(&ann), Some(erase)).await;
    let (s, _) = call(&f.app, "POST", "/api/images/img3/submit", Some(&ann), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    // the erase is logged, not applied to the stored draw stroke
    let (_, b) = call(&f.app, "GET", "/api/images/img3/strokes", Some(&ann), None).await;
    let rec: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(rec["strokes"][0]["mode"], "draw");
    assert_eq!(rec["strokes"][1]["mode"], "erase");

    let (s, _) = call(&f.app, "GET", "/api/export/img1?annotator=ann", Some(&ann), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&f.app, "GET", "/api/export/img1/merged", Some(&ann), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn submissions_survive_restart_and_images_are_served() {
    let f = fixture(AuthPolicy::default(), None);
    let ann = login(&f.app, "ann", "secret-a").await;
    trace_circle(&f.app, &ann, "img1", 30.0, 30.0, 10.0).await;
    call(&f.app, "POST", "/api/images/img1/submit", Some(&ann), None).await;
    let (_, before) = call(&f.app, "GET", "/api/export/img1?annotator=ann", Some(&ann), None).await;

    // a new state over the same directory
    let config = ServiceConfig {
        data_dir: f.data_dir.clone(),
        users_file: f._dir.path().join("users.txt"),
        static_dir: None,
        auth: AuthPolicy::default(),
    };
    let app2 = router(Arc::new(AppState::new(&config).unwrap()));
    let ann2 = login(&app2, "ann", "secret-a").await;
    assert_eq!(list(&app2, &ann2).await, ["img2", "img3"]);
    let (_, after) = call(&app2, "GET", "/api/export/img1?annotator=ann", Some(&ann2), None).await;
    assert_eq!(before, after);

    let (s, png) = call(&app2, "GET", &format!("/api/images/img2/image?token={ann2}"), None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(image::load_from_memory(&png).unwrap().width(), SIZE as u32);
    let (s, body) = call(&app2, "GET", "/", None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(String::from_utf8(body).unwrap().contains("/api"));
}
