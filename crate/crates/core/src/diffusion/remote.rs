//! HTTP client for model servers. Requests are synchronous JSON with tensors
//! as base64 little-endian f32, a 120 s timeout and one retry.

use std::sync::Mutex;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Conditioning, Denoiser, DiffusionError, GuidanceConfig, LatentCodec, Tensor};
use crate::depth_init::{DepthInitError, DepthProvider};
use crate::scene::{Camera, DepthMap, ImageBuf};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);
/// Model id used for relative depth estimation requests.
pub const DEPTH_ESTIMATE_MODEL: &str = "depth-estimate";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireTensor {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub data: String,
}

impl From<&Tensor> for WireTensor {
    fn from(t: &Tensor) -> Self {
        let bytes: Vec<u8> = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            shape: t.shape.clone(),
            dtype: "f32".into(),
            data: B64.encode(bytes),
        }
    }
}

impl TryFrom<&WireTensor> for Tensor {
    type Error = DiffusionError;

    fn try_from(w: &WireTensor) -> Result<Self, Self::Error> {
        let bad = |m: String| DiffusionError::RemoteFailure(m);
        if w.dtype != "f32" {
            return Err(bad(format!("unsupported dtype {:?}", w.dtype)));
        }
        let bytes = B64.decode(&w.data).map_err(|e| bad(format!("bad base64: {e}")))?;
        if bytes.len() % 4 != 0 {
            return Err(bad(format!("payload of {} bytes is not f32 aligned", bytes.len())));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(w.shape.clone(), data).map_err(|e| bad(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WireGuidance {
    pub image: f32,
    pub text: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseRequest {
    pub model: String,
    pub latent: WireTensor,
    pub timestep: usize,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<WireTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_cond: Option<WireTensor>,
    pub guidance: WireGuidance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseResponse {
    pub noise_pred: WireTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeRequest {
    pub image: WireTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeResponse {
    pub latent: WireTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRequest {
    pub latent: WireTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResponse {
    pub image: WireTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    pub code: String,
    pub message: String,
}

/// Client for one model id on one server. At most one request is in flight
/// per client.
pub struct RemoteModel {
    base_url: String,
    model: String,
    agent: ureq::Agent,
    in_flight: Mutex<()>,
}

impl RemoteModel {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self::with_timeout(base_url, model, DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(base_url: impl Into<String>, model: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            agent,
            in_flight: Mutex::new(()),
        }
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(&self, path: &str, body: &Req) -> Result<Resp, DiffusionError> {
        let _guard = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        let url = format!("{}{}", self.base_url, path);
        let mut last = String::new();
        for attempt in 0..2 {
            match self.try_post(&url, body) {
                Ok(r) => return Ok(r),
                Err((msg, retryable)) => {
                    log::warn!("request to {url} failed (attempt {}): {msg}", attempt + 1);
                    last = msg;
                    if !retryable {
                        break;
                    }
                }
            }
        }
        Err(DiffusionError::RemoteFailure(last))
    }

    /// Error strings carry whether a retry could help (transport and 5xx).
    fn try_post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(&self, url: &str, body: &Req) -> Result<Resp, (String, bool)> {
        let mut resp = self
            .agent
            .post(url)
            .send_json(body)
            .map_err(|e| (e.to_string(), true))?;
        let status = resp.status();
        if status.is_success() {
            return resp
                .body_mut()
                .read_json::<Resp>()
                .map_err(|e| (format!("bad response body: {e}"), false));
        }
        let detail = match resp.body_mut().read_json::<WireError>() {
            Ok(e) => format!("{} {}: {}", status.as_u16(), e.code, e.message),
            Err(_) => format!("HTTP {}", status.as_u16()),
        };
        Err((detail, status.is_server_error()))
    }

    fn denoise(&self, z_t: &Tensor, t: usize, cond: &Conditioning, guidance: GuidanceConfig) -> Result<Tensor, DiffusionError> {
        let req = DenoiseRequest {
            model: self.model.clone(),
            latent: z_t.into(),
            timestep: t,
            prompt: cond.prompt.clone(),
            mask: cond.mask.as_ref().map(Into::into),
            image_cond: cond.image.as_ref().map(Into::into),
            guidance: WireGuidance {
                image: guidance.image,
                text: guidance.text,
            },
        };
        let resp: DenoiseResponse = self.post("/v1/denoise", &req)?;
        Tensor::try_from(&resp.noise_pred)
    }
}

impl Denoiser for RemoteModel {
    fn predict(&self, z_t: &Tensor, t: usize, cond: &Conditioning) -> Result<Tensor, DiffusionError> {
        self.predict_guided(z_t, t, cond, GuidanceConfig::NONE)
    }

    /// Guidance is applied by the server in a single request.
    fn predict_guided(&self, z_t: &Tensor, t: usize, cond: &Conditioning, guidance: GuidanceConfig) -> Result<Tensor, DiffusionError> {
        let eps = self.denoise(z_t, t, cond, guidance)?;
        if eps.shape != z_t.shape {
            return Err(DiffusionError::ShapeMismatch(z_t.shape.clone(), eps.shape));
        }
        Ok(eps)
    }
}

impl LatentCodec for RemoteModel {
    fn encode(&self, image: &ImageBuf) -> Result<Tensor, DiffusionError> {
        let t = Tensor::new(vec![image.height, image.width, 3], image.data.clone())?;
        let resp: EncodeResponse = self.post("/v1/encode", &EncodeRequest { image: (&t).into() })?;
        Tensor::try_from(&resp.latent)
    }

    fn decode(&self, latent: &Tensor) -> Result<ImageBuf, DiffusionError> {
        let resp: DecodeResponse = self.post("/v1/decode", &DecodeRequest { latent: latent.into() })?;
        let t = Tensor::try_from(&resp.image)?;
        let &[h, w, 3] = t.shape.as_slice() else {
            return Err(DiffusionError::RemoteFailure(format!("decoded image has shape {:?}", t.shape)));
        };
        ImageBuf::from_vec(w, h, t.data).map_err(|e| DiffusionError::RemoteFailure(e.to_string()))
    }

    fn encode_vjp(&self, _width: usize, _height: usize, _grad: &Tensor) -> Option<Vec<f32>> {
        None
    }
}

/// Relative depth via `/v1/denoise` with the image as the latent; the
/// prediction is read as a `[h, w, 1]` depth map.
impl DepthProvider for RemoteModel {
    fn estimate(&self, image: &ImageBuf, _camera: &Camera) -> Result<DepthMap, DepthInitError> {
        let err = |e: DiffusionError| DepthInitError::Provider(e.to_string());
        let t = Tensor::new(vec![image.height, image.width, 3], image.data.clone()).map_err(err)?;
        let d = self.denoise(&t, 0, &Conditioning::default(), GuidanceConfig::NONE).map_err(err)?;
        if d.shape != [image.height, image.width, 1] {
            return Err(DepthInitError::Provider(format!("depth has shape {:?}", d.shape)));
        }
        DepthMap::from_vec(image.width, image.height, d.data).map_err(|e| DepthInitError::Provider(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_tensor_round_trip_is_bitwise() {
        let t = Tensor::new(vec![2, 3], vec![0.0, -1.5, f32::MIN_POSITIVE, 3.25e7, -0.0, 1.0 / 3.0]).unwrap();
        let w = WireTensor::from(&t);
        assert_eq!(w.dtype, "f32");
        let back = Tensor::try_from(&w).unwrap();
        let bits = |t: &Tensor| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn wire_tensor_rejects_bad_payloads() {
        let mut w = WireTensor::from(&Tensor::zeros(vec![2]));
        w.shape = vec![3];
        assert!(Tensor::try_from(&w).is_err());
        w.dtype = "f16".into();
        assert!(Tensor::try_from(&w).is_err());
    }

    #[test]
    fn unreachable_server_is_a_remote_failure() {
        let m = RemoteModel::with_timeout("http://127.0.0.1:9", "text", Duration::from_millis(200));
        let err = m.predict(&Tensor::zeros(vec![1]), 1, &Conditioning::default()).unwrap_err();
        assert!(matches!(err, DiffusionError::RemoteFailure(_)));
    }
}
