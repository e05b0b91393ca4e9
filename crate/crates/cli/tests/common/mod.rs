#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use tower::ServiceExt;

use tunegs::fixture::{toy_cameras, toy_scene};
use tunegs::style::{FieldFile, Mask, StyleOffsetField, StyleTuner};
use tunegs::{GaussianScene, RenderConfig};
use tunegs_cli::service::{router, AppState, ServeState};

/// A field with small deterministic offsets on every channel.
pub fn field_for(scene: &GaussianScene, id: &str, seed: u64) -> FieldFile {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut field = StyleOffsetField::zeros(id, scene.len());
    for v in field.as_mut_slice() {
        *v = rng.gen_range(-0.2..0.2);
    }
    FieldFile {
        field,
        tuner: StyleTuner::default(),
        fingerprint: scene.fingerprint(),
    }
}

pub fn halves(n: usize) -> (Mask, Mask) {
    (
        Mask {
            id: "inside".into(),
            indices: (0..n / 2).collect(),
        },
        Mask {
            id: "outside".into(),
            indices: (n / 2..n).collect(),
        },
    )
}

pub fn toy_state() -> ServeState {
    let scene = toy_scene();
    let fields = vec![field_for(&scene, "s1", 1), field_for(&scene, "s2", 2)];
    let (a, b) = halves(scene.len());
    let overlap = Mask {
        id: "overlap".into(),
        indices: vec![0, 1, 2],
    };
    ServeState::new(scene, toy_cameras(), fields, vec![a, b, overlap], RenderConfig::default()).unwrap()
}

pub fn toy_app(cache: usize) -> Arc<AppState> {
    AppState::new(toy_state(), cache, None)
}

pub async fn call(app: &Arc<AppState>, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = router(Arc::clone(app)).oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body)
}

pub async fn get(app: &Arc<AppState>, uri: &str) -> (StatusCode, Vec<u8>) {
    call(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

pub async fn post_json(app: &Arc<AppState>, uri: &str, body: serde_json::Value) -> (StatusCode, Vec<u8>) {
    let req = Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    call(app, req).await
}
