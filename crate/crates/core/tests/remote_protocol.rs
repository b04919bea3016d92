//! Talks to an in-process mock model server over real HTTP.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};

use occlusplat::depth_init::DepthProvider;
use occlusplat::diffusion::remote::{
    DecodeRequest, DecodeResponse, DenoiseRequest, DenoiseResponse, EncodeRequest, EncodeResponse, RemoteModel,
    WireError, WireTensor,
};
use occlusplat::diffusion::{
    sample_latent, Conditioning, Denoiser, DiffusionError, GuidanceConfig, LatentCodec, NoiseSchedule, Tensor,
};
use occlusplat::scene::{Camera, ImageBuf};

#[derive(Default)]
struct Mock {
    requests: Mutex<Vec<DenoiseRequest>>,
    /// Number of upcoming denoise calls that fail with 503.
    fail_next: AtomicUsize,
    calls: AtomicUsize,
}

type Shared = Arc<Mock>;

fn tensor(w: &WireTensor) -> Tensor {
    Tensor::try_from(w).unwrap()
}

/// ε̂ = guidance.text · 0.25 · z for the latent models, and `1 + mean(rgb)`
/// as a one-channel map for the depth model.
async fn denoise(State(m): State<Shared>, Json(req): Json<DenoiseRequest>) -> Response {
    m.calls.fetch_add(1, Ordering::SeqCst);
    m.requests.lock().unwrap().push(req.clone());
    if m
        .fail_next
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
        .is_ok()
    {
        return (StatusCode::SERVICE_UNAVAILABLE, "busy").into_response();
    }
    let z = tensor(&req.latent);
    let out = match req.model.as_str() {
        "depth-estimate" => {
            let data = z.data.chunks(3).map(|c| 1.0 + (c[0] + c[1] + c[2]) / 3.0).collect();
            Tensor::new(vec![z.shape[0], z.shape[1], 1], data).unwrap()
        }
        "broken" => {
            let err = WireError {
                code: "bad_input".into(),
                message: "nope".into(),
            };
            return (StatusCode::BAD_REQUEST, Json(err)).into_response();
        }
        _ => {
            let k = 0.25 * req.guidance.text;
            Tensor::new(z.shape.clone(), z.data.iter().map(|v| k * v).collect()).unwrap()
        }
    };
    Json(DenoiseResponse {
        noise_pred: (&out).into(),
    })
    .into_response()
}

async fn encode(Json(req): Json<EncodeRequest>) -> Json<EncodeResponse> {
    let mut t = tensor(&req.image);
    t.data.iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
    Json(EncodeResponse { latent: (&t).into() })
}

async fn decode(Json(req): Json<DecodeRequest>) -> Json<DecodeResponse> {
    let mut t = tensor(&req.latent);
    t.data.iter_mut().for_each(|v| *v = 0.5 * (*v + 1.0));
    Json(DecodeResponse { image: (&t).into() })
}

struct Server {
    base: String,
    mock: Shared,
    _rt: tokio::runtime::Runtime,
}

fn start() -> Server {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(1)
        .enable_all()
        .build()
        .unwrap();
    let mock: Shared = Arc::default();
    let app = Router::new()
        .route("/v1/denoise", post(denoise))
        .route("/v1/encode", post(encode))
        .route("/v1/decode", post(decode))
        .with_state(mock.clone());
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    rt.spawn(async move { axum::serve(listener, app).await.unwrap() });
    Server { base, mock, _rt: rt }
}

fn latent() -> Tensor {
    Tensor::new(vec![2, 2, 4], (0..16).map(|i| i as f32 * 0.125 - 1.0).collect()).unwrap()
}

#[test]
fn denoise_request_carries_every_field() {
    let s = start();
    let model = RemoteModel::new(s.base.clone(), "inpaint");
    let z = latent();
    let cond = Conditioning {
        prompt: "a room".into(),
        image: Some(Tensor::new(vec![2, 2, 3], vec![0.5; 12]).unwrap()),
        mask: Some(Tensor::new(vec![2, 2, 1], vec![1.0, 0.0, 1.0, 0.0]).unwrap()),
        view: None,
    };
    let g = GuidanceConfig { image: 1.8, text: 7.5 };
    let eps = model.predict_guided(&z, 731, &cond, g).unwrap();
    for (e, v) in eps.data.iter().zip(&z.data) {
        assert_eq!(*e, 0.25 * 7.5 * v);
    }

    let reqs = s.mock.requests.lock().unwrap();
    assert_eq!(reqs.len(), 1, "guidance is applied server-side in one request");
    let r = &reqs[0];
    assert_eq!((r.model.as_str(), r.timestep, r.prompt.as_str()), ("inpaint", 731, "a room"));
    assert_eq!((r.guidance.image, r.guidance.text), (1.8, 7.5));
    assert_eq!(tensor(&r.latent), z);
    assert_eq!(tensor(r.mask.as_ref().unwrap()), *cond.mask.as_ref().unwrap());
    assert_eq!(tensor(r.image_cond.as_ref().unwrap()), *cond.image.as_ref().unwrap());
}

#[test]
fn plain_prediction_sends_unit_guidance_and_no_image() {
    let s = start();
    let model = RemoteModel::new(s.base.clone(), "text");
    model.predict(&latent(), 10, &Conditioning::text("x")).unwrap();
    let reqs = s.mock.requests.lock().unwrap();
    let r = &reqs[0];
    assert_eq!((r.guidance.image, r.guidance.text), (1.0, 1.0));
    assert!(r.mask.is_none() && r.image_cond.is_none());
}

#[test]
fn server_errors_are_retried_once() {
    let s = start();
    let model = RemoteModel::new(s.base.clone(), "text");
    s.mock.fail_next.store(1, Ordering::SeqCst);
    assert!(model.predict(&latent(), 5, &Conditioning::default()).is_ok());
    assert_eq!(s.mock.calls.load(Ordering::SeqCst), 2);

    s.mock.fail_next.store(2, Ordering::SeqCst);
    let err = model.predict(&latent(), 5, &Conditioning::default()).unwrap_err();
    assert!(matches!(err, DiffusionError::RemoteFailure(m) if m.contains("503")));
    assert_eq!(s.mock.calls.load(Ordering::SeqCst), 4);
}

#[test]
fn client_errors_are_reported_without_retry() {
    let s = start();
    let model = RemoteModel::new(s.base.clone(), "broken");
    let err = model.predict(&latent(), 5, &Conditioning::default()).unwrap_err();
    let DiffusionError::RemoteFailure(msg) = err else { panic!("{err:?}") };
    assert!(msg.contains("bad_input") && msg.contains("nope"), "{msg}");
    assert_eq!(s.mock.calls.load(Ordering::SeqCst), 1);
}

#[test]
fn codec_round_trip_over_the_wire() {
    let s = start();
    let codec = RemoteModel::new(s.base.clone(), "inpaint");
    let img = ImageBuf::from_fn(3, 2, |x, y| [x as f32 * 0.25, y as f32 * 0.5, 0.125]);
    let z = codec.encode(&img).unwrap();
    assert_eq!(z.shape, vec![2, 3, 3]);
    assert_eq!(z.data[3], -0.5);
    assert_eq!(codec.decode(&z).unwrap(), img);
    assert!(codec.encode_vjp(3, 2, &z).is_none());
}

#[test]
fn depth_estimate_uses_the_denoise_endpoint() {
    let s = start();
    let provider = RemoteModel::new(s.base.clone(), "depth-estimate");
    let img = ImageBuf::from_fn(4, 3, |x, _| [x as f32 * 0.25; 3]);
    let d = provider.estimate(&img, &Camera::looking_forward(4.0, 4, 3)).unwrap();
    assert_eq!((d.width, d.height), (4, 3));
    assert_eq!(d.at(2, 1), 1.5);
    assert_eq!(s.mock.requests.lock().unwrap()[0].timestep, 0);

    // A latent-shaped reply is not a depth map.
    let wrong = RemoteModel::new(s.base.clone(), "text");
    assert!(wrong.estimate(&img, &Camera::looking_forward(4.0, 4, 3)).is_err());
}

#[test]
fn remote_sampling_matches_a_local_model() {
    struct Local;
    impl Denoiser for Local {
        fn predict(&self, z: &Tensor, _t: usize, _c: &Conditioning) -> Result<Tensor, DiffusionError> {
            Ok(Tensor::new(z.shape.clone(), z.data.iter().map(|v| 0.25 * v).collect()).unwrap())
        }
    }
    let s = start();
    let schedule = NoiseSchedule::default();
    let remote = RemoteModel::with_timeout(s.base.clone(), "text", Duration::from_secs(10));
    let z = latent();
    let cond = Conditioning::default();
    let a = sample_latent(&z, 500, &remote, &cond, 4, GuidanceConfig::NONE, &schedule).unwrap();
    let b = sample_latent(&z, 500, &Local, &cond, 4, GuidanceConfig::NONE, &schedule).unwrap();
    assert_eq!(a, b);
    assert_eq!(s.mock.calls.load(Ordering::SeqCst), 4);
}
