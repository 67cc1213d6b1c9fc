//! Drives the REST interface in-process: upload a toy utterance, read its
//! analysis, generate with one constrained word, synthesise and fetch audio.
//! `prosody serve` exposes the same router over TCP.
//!
//!     cargo run -p prosody-service --example rest_walkthrough

use std::sync::Arc;

use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use prosody_core::corpus::{write_toy_corpus, ToyCorpusSpec};
use prosody_core::model::{Model, ModelConfig};
use prosody_service::api::router;
use prosody_service::store::ProjectStore;

const BOUNDARY: &str = "walkthrough-boundary";

async fn call(app: &axum::Router, req: Request<Body>) -> (u16, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.expect("router is infallible");
    let status = resp.status().as_u16();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn json_post(uri: &str, body: Value) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tmp = tempfile::tempdir()?;
    let corpus = tmp.path().join("corpus");
    let models = tmp.path().join("models");
    std::fs::create_dir_all(&models)?;
    write_toy_corpus(&corpus, ToyCorpusSpec { utterances: 1, ..Default::default() })?;
    // an untrained model is enough to show the control flow
    Model::new(ModelConfig::cdar(), 0)?.save(models.join("demo.ckpt"))?;
    let app = router(Arc::new(ProjectStore::open(tmp.path().join("projects"), &models)?));

    let mut body = Vec::new();
    for (name, bytes) in [
        ("audio", std::fs::read(corpus.join("toy000.wav"))?),
        ("alignment", std::fs::read(corpus.join("toy000.align.json"))?),
        ("embeddings", std::fs::read(corpus.join("toy000.emb"))?),
        ("model", b"demo".to_vec()),
    ] {
        body.extend(format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"{name}\"\r\n\r\n").bytes());
        body.extend(bytes);
        body.extend(b"\r\n");
    }
    body.extend(format!("--{BOUNDARY}--\r\n").bytes());
    let upload = Request::post("/projects")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))?;
    let (status, bytes) = call(&app, upload).await;
    let created: Value = serde_json::from_slice(&bytes)?;
    println!("POST /projects -> {status} {created}");
    let id = created["id"].as_str().ok_or("no project id")?;

    let (_, bytes) = call(&app, Request::get(format!("/projects/{id}/analysis")).body(Body::empty())?).await;
    let analysis: Value = serde_json::from_slice(&bytes)?;
    let words = analysis["words"].as_array().ok_or("no words")?;
    println!("analysis: {} frames, {} words", analysis["frames"].as_array().map_or(0, Vec::len), words.len());

    // hold the first eight voiced frames flat at the speaker mean
    let mean_hz = analysis["grid"]["mu"].as_f64().ok_or("no mu")?.exp2();
    let voiced: Vec<usize> = analysis["frames"]
        .as_array()
        .ok_or("no frames")?
        .iter()
        .enumerate()
        .filter(|(_, f)| f["voiced"] == true)
        .map(|(t, _)| t)
        .take(8)
        .collect();
    let (start, end) = (voiced[0], voiced[0] + 8);
    let constraints = json!([{"start_frame": start, "end_frame": end, "hz": vec![mean_hz; end - start]}]);
    let (status, bytes) = call(
        &app,
        json_post(&format!("/projects/{id}/generate"), json!({"constraints": constraints, "seed": 1})),
    )
    .await;
    let generated: Value = serde_json::from_slice(&bytes)?;
    println!("POST generate -> {status}, rendition {}", generated["rendition"]);
    let hz = generated["contour"]["hz"].as_array().ok_or("no contour")?;
    for t in start..end {
        println!("  frame {t}: {:.1} Hz (asked {mean_hz:.1})", hz[t].as_f64().unwrap_or(0.0));
    }

    let (status, bytes) = call(
        &app,
        json_post(&format!("/projects/{id}/synthesize"), json!({"rendition": generated["rendition"]})),
    )
    .await;
    let synth: Value = serde_json::from_slice(&bytes)?;
    println!("POST synthesize -> {status} {synth}");
    let rid = synth["rendition"].as_str().ok_or("no rendition")?;
    let (status, wav) = call(&app, Request::get(format!("/projects/{id}/audio/{rid}")).body(Body::empty())?).await;
    println!("GET audio -> {status}, {} bytes of WAV", wav.len());
    let (_, list) = call(&app, Request::get(format!("/projects/{id}/renditions")).body(Body::empty())?).await;
    println!("renditions: {}", String::from_utf8_lossy(&list));
    Ok(())
}
