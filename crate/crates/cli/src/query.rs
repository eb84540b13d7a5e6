//! Access to suspicious models behind the minimal query interface: submit
//! one image and a list of candidate texts, receive one similarity score per
//! text. Local checkpoints are loaded in-process; remote endpoints are
//! reached through a small HTTP/1.1 client speaking JSON with a base64 PNG
//! payload.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use mmfinger_core::tensor::Tensor;
use mmfinger_core::verify::{SimilarityScorer, VerifyError};
use mmfinger_core::DualEncoder;

use crate::error::{CliError, CliResult};

/// Wire request of the query protocol.
#[derive(Serialize, Deserialize)]
pub struct QueryRequest {
    pub image_png_base64: String,
    pub texts: Vec<String>,
}

/// Wire response: one similarity per text, in order.
#[derive(Serialize, Deserialize)]
pub struct QueryResponse {
    pub scores: Vec<f64>,
}

/// A suspicious model reachable either as a local checkpoint or a remote
/// scoring endpoint.
pub enum ModelRef {
    Local(Box<DualEncoder>),
    Remote(HttpScorer),
}

impl ModelRef {
    /// `http://host:port/path` goes to the HTTP scorer, anything else is
    /// treated as a checkpoint path.
    pub fn open(spec: &str) -> CliResult<Self> {
        if spec.starts_with("http://") {
            Ok(ModelRef::Remote(HttpScorer::new(spec)?))
        } else if spec.starts_with("https://") {
            Err(CliError::validation(
                "https endpoints are not supported by the built-in client; use http or a local checkpoint",
            ))
        } else {
            let enc = crate::checkpoint::load_encoder(Path::new(spec))?;
            Ok(ModelRef::Local(Box::new(enc)))
        }
    }

    pub fn scorer(&self) -> &dyn SimilarityScorer {
        match self {
            ModelRef::Local(enc) => enc.as_ref(),
            ModelRef::Remote(http) => http,
        }
    }
}

/// Minimal HTTP/1.1 JSON client for remote scoring endpoints.
pub struct HttpScorer {
    host: String,
    port: u16,
    path: String,
    pub timeout: Duration,
}

impl HttpScorer {
    pub fn new(url: &str) -> CliResult<Self> {
        let rest = url
            .strip_prefix("http://")
            .ok_or_else(|| CliError::validation(format!("unsupported url {url}")))?;
        let (authority, path) = match rest.find('/') {
            Some(i) => (&rest[..i], rest[i..].to_string()),
            None => (rest, "/".to_string()),
        };
        let (host, port) = match authority.rsplit_once(':') {
            Some((h, p)) => (
                h.to_string(),
                p.parse::<u16>()
                    .map_err(|_| CliError::validation(format!("bad port in {url}")))?,
            ),
            None => (authority.to_string(), 80),
        };
        if host.is_empty() {
            return Err(CliError::validation(format!("missing host in {url}")));
        }
        Ok(HttpScorer {
            host,
            port,
            path,
            timeout: Duration::from_secs(30),
        })
    }

    fn post(&self, body: &[u8]) -> Result<Vec<u8>, VerifyError> {
        let addr = format!("{}:{}", self.host, self.port);
        let mut stream = TcpStream::connect(&addr)
            .map_err(|e| VerifyError::Scorer(format!("connect {addr}: {e}")))?;
        stream.set_read_timeout(Some(self.timeout)).ok();
        stream.set_write_timeout(Some(self.timeout)).ok();
        let header = format!(
            "POST {} HTTP/1.1\r\nHost: {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
            self.path,
            self.host,
            body.len()
        );
        stream
            .write_all(header.as_bytes())
            .and_then(|_| stream.write_all(body))
            .map_err(|e| VerifyError::Scorer(format!("send to {addr}: {e}")))?;
        let mut raw = Vec::new();
        stream
            .read_to_end(&mut raw)
            .map_err(|e| VerifyError::Scorer(format!("read from {addr}: {e}")))?;

        let split = raw
            .windows(4)
            .position(|w| w == b"\r\n\r\n")
            .ok_or_else(|| VerifyError::Scorer("malformed http response".into()))?;
        let head = String::from_utf8_lossy(&raw[..split]);
        let status = head
            .lines()
            .next()
            .and_then(|l| l.split_whitespace().nth(1))
            .and_then(|s| s.parse::<u16>().ok())
            .ok_or_else(|| VerifyError::Scorer("missing http status".into()))?;
        if status != 200 {
            return Err(VerifyError::Scorer(format!(
                "endpoint returned status {status}"
            )));
        }
        Ok(raw[split + 4..].to_vec())
    }
}

impl SimilarityScorer for HttpScorer {
    fn similarities(&self, image: &Tensor, texts: &[String]) -> Result<Vec<f64>, VerifyError> {
        let png = encode_png_bytes(image)
            .map_err(|e| VerifyError::Scorer(format!("encode query image: {e}")))?;
        let request = QueryRequest {
            image_png_base64: base64::engine::general_purpose::STANDARD.encode(png),
            texts: texts.to_vec(),
        };
        let body = serde_json::to_vec(&request)
            .map_err(|e| VerifyError::Scorer(format!("encode request: {e}")))?;
        let response = self.post(&body)?;
        let parsed: QueryResponse = serde_json::from_slice(&response)
            .map_err(|e| VerifyError::Scorer(format!("decode response: {e}")))?;
        if parsed.scores.len() != texts.len() {
            return Err(VerifyError::Scorer(format!(
                "endpoint returned {} scores for {} texts",
                parsed.scores.len(),
                texts.len()
            )));
        }
        Ok(parsed.scores)
    }
}

/// PNG-encode an image tensor in memory (the wire format of the query
/// protocol).
pub fn encode_png_bytes(image: &Tensor) -> CliResult<Vec<u8>> {
    let shape = image.shape();
    let (h, w) = (shape[1], shape[2]);
    let mut raw = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = image.data()[c * h * w + y * w + x];
                raw[(y * w + x) * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(std::io::Cursor::new(&mut out), w as u32, h as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| CliError::runtime(format!("png header: {e}")))?;
        writer
            .write_image_data(&raw)
            .map_err(|e| CliError::runtime(format!("png payload: {e}")))?;
    }
    Ok(out)
}

/// Decode the wire image back to a [3,H,W] tensor; used by test servers and
/// by anyone hosting a local model behind the protocol.
pub fn decode_png_bytes(bytes: &[u8]) -> CliResult<Tensor> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder
        .read_info()
        .map_err(|e| CliError::validation(format!("png decode: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| CliError::validation(format!("png decode: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => {
            return Err(CliError::validation(format!(
                "unsupported color type {other:?}"
            )))
        }
    };
    let mut data = vec![0.0f64; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = (y * w + x) * channels;
            for c in 0..3 {
                data[c * h * w + y * w + x] = buf[px + c] as f64 / 255.0;
            }
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data))
}
