use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use http_body_util::BodyExt;
use scalae_core::dataset::PopNorm;
use scalae_core::imagery::ImageTile;
use scalae_core::inference::Checkpoint;
use scalae_core::model::{GrowthState, ModelConfig, Scalae};
use scalae_service::{router, AppState};
use serde_json::{json, Value};
use tower::ServiceExt;

const RES: usize = 8;

fn checkpoint(seed: u64) -> Checkpoint {
    let cfg = ModelConfig {
        z_dim: 8,
        w_dim: 8,
        base_resolution: 4,
        max_stage: 1,
        channels_per_stage: vec![8, 8],
        mapping_layers: 2,
        leaky_slope: 0.2,
    };
    let mut model = Scalae::new(cfg, seed).unwrap();
    model.set_growth(GrowthState::settled(1)).unwrap();
    // The population path starts at zero; give it weight so edits show up.
    let store = model.params_mut();
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.name.contains(".pop.")).map(|(id, _)| id).collect();
    for id in ids {
        for (i, v) in store.get_mut(id).value.data_mut().iter_mut().enumerate() {
            *v = ((i * 7919 + seed as usize * 31) % 200) as f64 / 100.0 - 1.0;
        }
    }
    Checkpoint::new(model, PopNorm::from_range(0.0, 5000.0).unwrap())
}

fn state() -> AppState {
    AppState::with_checkpoint(checkpoint(3)).unwrap()
}

async fn call(state: &AppState, method: &str, path: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(path);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

async fn post(state: &AppState, path: &str, body: Value) -> (StatusCode, Value) {
    call(state, "POST", path, Some(body)).await
}

fn png_of(v: &Value, key: &str) -> ImageTile {
    let bytes = STANDARD.decode(v[key].as_str().expect("png field")).unwrap();
    ImageTile::from_png(&bytes).unwrap()
}

fn grid(v: f64) -> Value {
    json!(vec![vec![v; 4]; 4])
}

fn quadrant_grid(base: f64, edited: f64) -> Value {
    let mut rows = vec![vec![base; 4]; 4];
    rows[0][0] = edited;
    rows[0][1] = edited;
    rows[1][0] = edited;
    rows[1][1] = edited;
    json!(rows)
}

fn image_b64() -> String {
    let px: Vec<f64> = (0..3 * RES * RES).map(|i| ((i * 37) % 101) as f64 / 50.5 - 1.0).collect();
    STANDARD.encode(ImageTile::new(RES, RES, px).unwrap().to_png().unwrap())
}

#[tokio::test]
async fn healthz_reports_load_state() {
    let (status, body) = call(&AppState::empty(), "GET", "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["model_loaded"], false);
    let s = state();
    let (_, body) = call(&s, "GET", "/healthz", None).await;
    assert_eq!(body["model_loaded"], true);
    assert_eq!(body["checkpoint_id"], json!(s.checkpoint_id().unwrap()));
}

#[tokio::test]
async fn unloaded_model_is_503() {
    let empty = AppState::empty();
    let (status, body) = post(&empty, "/api/generate", json!({"seed": 1, "pop": grid(10.0)})).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["code"], "model_not_loaded");
    let (status, _) = call(&empty, "GET", "/api/model", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn model_info_lists_config_and_constants() {
    let s = state();
    let (status, body) = call(&s, "GET", "/api/model", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["resolution"], RES);
    assert_eq!(body["config"]["w_dim"], 8);
    assert_eq!(body["checkpoint_id"], json!(s.checkpoint_id().unwrap()));
    let hi = body["pop_norm"]["pop_log_max"].as_f64().unwrap();
    assert!((hi - 5000f64.ln_1p()).abs() < 1e-12);
}

#[tokio::test]
async fn generate_returns_png_at_model_resolution() {
    let s = state();
    let (status, body) = post(&s, "/api/generate", json!({"seed": 11, "pop": grid(250.0)})).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let img = png_of(&body, "png");
    assert_eq!((img.height(), img.width()), (RES, RES));
    assert_eq!(body["style"].as_array().unwrap().len(), 8);
    assert_eq!(body["checkpoint_id"], json!(s.checkpoint_id().unwrap()));
    assert!(body["timing_ms"].as_f64().unwrap() >= 0.0);
}

#[tokio::test]
async fn generate_is_deterministic_and_style_reusable() {
    let s = state();
    let req = json!({"seed": 5, "pop": quadrant_grid(0.0, 4000.0)});
    let (_, a) = post(&s, "/api/generate", req.clone()).await;
    let (_, b) = post(&s, "/api/generate", req).await;
    assert_eq!(a["png"], b["png"]);
    let (status, c) = post(&s, "/api/generate", json!({"style": a["style"], "pop": quadrant_grid(0.0, 4000.0)})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(a["png"], c["png"]);
}

#[tokio::test]
async fn negative_cell_is_400() {
    let mut rows = vec![vec![5.0; 4]; 4];
    rows[2][3] = -1.0;
    let (status, body) = post(&state(), "/api/generate", json!({"seed": 1, "pop": rows})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "pop");
    assert_eq!(body["code"], "bad_request");
    assert!(body["message"].as_str().unwrap().contains("(2, 3)"));
}

#[tokio::test]
async fn malformed_requests_are_400() {
    let s = state();
    let ragged = json!([[1.0, 2.0], [3.0]]);
    for (body, field) in [
        (json!({"seed": 1, "pop": ragged}), Some("pop")),
        (json!({"seed": 1}), Some("pop")),
        (json!({"seed": 1, "style": vec![0.0; 8], "pop": grid(1.0)}), Some("seed")),
        (json!({"pop": grid(1.0)}), Some("seed")),
        (json!({"seed": "one", "pop": grid(1.0)}), Some("seed")),
        (json!({"seed": 1, "pop": grid(1.0), "k": 3}), Some("k")),
        (json!([1, 2]), None),
    ] {
        let (status, resp) = post(&s, "/api/generate", body.clone()).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        assert_eq!(resp["field"].as_str(), field, "{body}");
    }
    let req = Request::post("/api/generate").body(Body::from("{not json")).unwrap();
    let resp = router(s).oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn incompatible_resolution_is_422() {
    let s = state();
    let (status, body) = post(&s, "/api/generate", json!({"seed": 1, "pop": vec![vec![1.0; 3]; 3]})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["field"], "pop");
    let (status, body) = post(&s, "/api/generate", json!({"style": vec![0.5; 5], "pop": grid(1.0)})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["field"], "style");
}

#[tokio::test]
async fn reconstruct_round_trips_shapes() {
    let s = state();
    let (status, body) = post(&s, "/api/reconstruct", json!({"image": image_b64(), "pop": grid(100.0)})).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let img = png_of(&body, "png");
    assert_eq!(img.height(), RES);
    assert_eq!(body["style"].as_array().unwrap().len(), 8);

    let small = STANDARD.encode(ImageTile::filled(4, 4, [0.0; 3]).to_png().unwrap());
    let (status, body) = post(&s, "/api/reconstruct", json!({"image": small, "pop": grid(1.0)})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["field"], "image");

    let (status, body) = post(&s, "/api/reconstruct", json!({"image": "%%%", "pop": grid(1.0)})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "image");
}

#[tokio::test]
async fn zero_edit_repopulation_has_black_delta() {
    let s = state();
    let pop = quadrant_grid(20.0, 900.0);
    let (status, body) = post(&s, "/api/repopulate", json!({"image": image_b64(), "pop_orig": pop, "pop_new": pop})).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let delta = png_of(&body, "pixel_delta_png");
    assert!(delta.pixels().iter().all(|v| *v == -1.0), "delta must be black");
    assert_eq!(png_of(&body, "png").height(), RES);
}

#[tokio::test]
async fn repopulation_matches_reconstruction_under_original_pop() {
    let s = state();
    let orig = grid(30.0);
    let (_, recon) = post(&s, "/api/reconstruct", json!({"image": image_b64(), "pop": orig})).await;
    let (_, repop) = post(&s, "/api/repopulate", json!({"image": image_b64(), "pop_orig": orig, "pop_new": orig})).await;
    assert_eq!(recon["png"], repop["png"]);
    assert_eq!(recon["style"], repop["style"]);
}

#[tokio::test]
async fn valid_edit_returns_two_decodable_pngs() {
    let s = state();
    let req = json!({"image": image_b64(), "pop_orig": grid(0.0), "pop_new": quadrant_grid(0.0, 5000.0)});
    let (status, body) = post(&s, "/api/repopulate", req).await;
    assert_eq!(status, StatusCode::OK);
    let png = png_of(&body, "png");
    let delta = png_of(&body, "pixel_delta_png");
    assert_eq!((png.height(), png.width()), (RES, RES));
    assert_eq!((delta.height(), delta.width()), (RES, RES));
    assert!(delta.pixels().iter().any(|v| *v > -1.0), "an edit should change some pixel");
}

#[tokio::test]
async fn repopulate_rejects_bad_requests() {
    let s = state();
    let (status, body) = post(
        &s,
        "/api/repopulate",
        json!({"image": image_b64(), "pop_orig": grid(1.0), "pop_new": vec![vec![1.0; 2]; 2]}),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["field"], "pop_new");
    let (status, body) = post(&s, "/api/repopulate", json!({"image": image_b64(), "pop_orig": grid(1.0)})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "pop_new");
}

#[tokio::test]
async fn identical_pops_give_black_effect_map() {
    let s = state();
    let (status, body) = post(&s, "/api/effect-map", json!({"pop_a": grid(40.0), "pop_b": grid(40.0), "k_styles": 3})).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["stats"]["mean_inside"], 0.0);
    assert_eq!(body["stats"]["mean_outside"], 0.0);
    assert!(png_of(&body, "heatmap_png").pixels().iter().all(|v| *v == -1.0));
}

#[tokio::test]
async fn effect_map_defaults_to_twenty_styles() {
    let s = state();
    let (status, body) = post(&s, "/api/effect-map", json!({"pop_a": grid(0.0), "pop_b": quadrant_grid(0.0, 5000.0)})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["k_styles"], 20);
    let inside = body["stats"]["mean_inside"].as_f64().unwrap();
    let outside = body["stats"]["mean_outside"].as_f64().unwrap();
    assert!(inside >= 0.0 && outside >= 0.0);
    assert!(inside > 0.0);
}

#[tokio::test]
async fn effect_map_honours_explicit_mask() {
    let s = state();
    let a = grid(0.0);
    let b = quadrant_grid(0.0, 5000.0);
    let (_, default) = post(&s, "/api/effect-map", json!({"pop_a": a, "pop_b": b, "k_styles": 4})).await;
    let mut rows = vec![vec![false; 4]; 4];
    for r in rows.iter_mut().take(2) {
        r[0] = true;
        r[1] = true;
    }
    let (_, explicit) = post(&s, "/api/effect-map", json!({"pop_a": a, "pop_b": b, "k_styles": 4, "mask": rows})).await;
    assert_eq!(default["stats"], explicit["stats"]);
    let inverted: Vec<Vec<bool>> = rows.iter().map(|r| r.iter().map(|v| !v).collect()).collect();
    let (_, inv) = post(&s, "/api/effect-map", json!({"pop_a": a, "pop_b": b, "k_styles": 4, "mask": inverted})).await;
    assert_eq!(inv["stats"]["mean_inside"], default["stats"]["mean_outside"]);

    let (status, body) = post(&s, "/api/effect-map", json!({"pop_a": a, "pop_b": b, "mask": [[true]]})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["field"], "mask");
    let (status, body) = post(&s, "/api/effect-map", json!({"pop_a": a, "pop_b": b, "k_styles": 0})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "k_styles");
}

#[tokio::test]
async fn interpolation_endpoints_reproduce_pinned_images() {
    let s = state();
    let pop = quadrant_grid(10.0, 700.0);
    let (_, a) = post(&s, "/api/generate", json!({"seed": 1, "pop": pop})).await;
    let (_, b) = post(&s, "/api/generate", json!({"seed": 2, "pop": pop})).await;
    for mode in ["linear", "spherical"] {
        for (t, pinned) in [(0.0, &a), (1.0, &b)] {
            let req = json!({"style_a": a["style"], "style_b": b["style"], "t": t, "mode": mode, "pop": pop});
            let (status, body) = post(&s, "/api/interpolate", req).await;
            assert_eq!(status, StatusCode::OK, "{body}");
            assert_eq!(body["style"], pinned["style"], "{mode} t={t}");
            assert_eq!(body["png"], pinned["png"], "{mode} t={t}");
        }
    }
    let req = json!({"style_a": a["style"], "style_b": b["style"], "t": 0.5});
    let (status, body) = post(&s, "/api/interpolate", req).await;
    assert_eq!(status, StatusCode::OK);
    assert!(body.get("png").is_none());
    let mid: Vec<f64> = serde_json::from_value(body["style"].clone()).unwrap();
    let (wa, wb): (Vec<f64>, Vec<f64>) = (
        serde_json::from_value(a["style"].clone()).unwrap(),
        serde_json::from_value(b["style"].clone()).unwrap(),
    );
    for i in 0..8 {
        assert!((mid[i] - 0.5 * (wa[i] + wb[i])).abs() < 1e-12);
    }
}

#[tokio::test]
async fn interpolate_validates_inputs() {
    let s = state();
    let w = json!(vec![0.1; 8]);
    let (status, body) = post(&s, "/api/interpolate", json!({"style_a": w, "style_b": w, "t": 1.5})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "t");
    let (status, body) = post(&s, "/api/interpolate", json!({"style_a": w, "style_b": w, "t": 0.2, "mode": "cubic"})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "mode");
    let (status, body) = post(&s, "/api/interpolate", json!({"style_a": w, "style_b": vec![0.1; 3], "t": 0.2})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["field"], "style_b");
}

#[tokio::test]
async fn model_swap_changes_checkpoint_id() {
    let s = state();
    let (_, before) = post(&s, "/api/generate", json!({"seed": 1, "pop": grid(1.0)})).await;
    let new_id = s.load(checkpoint(4)).unwrap();
    let (_, after) = post(&s, "/api/generate", json!({"seed": 1, "pop": grid(1.0)})).await;
    assert_ne!(before["checkpoint_id"], after["checkpoint_id"]);
    assert_eq!(after["checkpoint_id"], json!(new_id));
    s.unload();
    let (status, _) = post(&s, "/api/generate", json!({"seed": 1, "pop": grid(1.0)})).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn interleaved_clients_match_serial_execution() {
    let s = state();
    let reqs: Vec<(&str, Value)> = vec![
        ("/api/generate", json!({"seed": 8, "pop": grid(12.0)})),
        ("/api/repopulate", json!({"image": image_b64(), "pop_orig": grid(0.0), "pop_new": grid(300.0)})),
        ("/api/effect-map", json!({"pop_a": grid(0.0), "pop_b": quadrant_grid(0.0, 80.0), "k_styles": 5})),
        ("/api/generate", json!({"seed": 9, "pop": quadrant_grid(5.0, 50.0)})),
    ];
    let mut serial = Vec::new();
    for (path, body) in &reqs {
        serial.push(post(&s, path, body.clone()).await);
    }
    let handles: Vec<_> = reqs
        .iter()
        .cloned()
        .map(|(path, body)| {
            let s = s.clone();
            tokio::spawn(async move { post(&s, path, body).await })
        })
        .collect();
    for (h, (status, mut expected)) in handles.into_iter().zip(serial) {
        let (got_status, mut got) = h.await.unwrap();
        assert_eq!(got_status, status);
        got.as_object_mut().unwrap().remove("timing_ms");
        expected.as_object_mut().unwrap().remove("timing_ms");
        assert_eq!(got, expected);
    }
}

#[tokio::test]
async fn requests_do_not_mutate_the_model() {
    let s = state();
    let fresh_id = |s: &AppState| s.with_model(|m| m.checkpoint.id().unwrap()).unwrap();
    let id = fresh_id(&s);
    post(&s, "/api/repopulate", json!({"image": image_b64(), "pop_orig": grid(0.0), "pop_new": grid(300.0)})).await;
    post(&s, "/api/effect-map", json!({"pop_a": grid(0.0), "pop_b": grid(3.0), "k_styles": 2})).await;
    assert_eq!(fresh_id(&s), id);
}
