//! Client for an external denoiser backend.
//!
//! Wire format: one JSON object per line in each direction. Tensors travel
//! as base64 of little-endian `f32`, frame-major `[N, C, H, W]`. The client
//! keeps one request in flight per connection and checks that every
//! response echoes the request id.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use super::{check_call, ConditionRole, Denoiser, FrameCondition};
use crate::edm::DenoisedPair;
use crate::error::{Error, Result};
use crate::tensor::{Frame, VideoLatent};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeOp {
    Denoise,
    Ping,
    Shutdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireRole {
    Start,
    End,
    None,
}

impl From<Option<ConditionRole>> for WireRole {
    fn from(role: Option<ConditionRole>) -> Self {
        match role {
            Some(ConditionRole::Start) => WireRole::Start,
            Some(ConditionRole::End) => WireRole::End,
            None => WireRole::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeRequest {
    pub id: u64,
    pub op: BridgeOp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cond_role: Option<WireRole>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<[usize; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cond_data: Option<String>,
}

impl BridgeRequest {
    pub fn control(id: u64, op: BridgeOp) -> Self {
        Self {
            id,
            op,
            sigma: None,
            cond_role: None,
            shape: None,
            data: None,
            cond_data: None,
        }
    }

    pub fn denoise(id: u64, x_t: &VideoLatent, sigma: f64, cond: Option<&FrameCondition>) -> Self {
        let (n, c, h, w) = x_t.as_array().dim();
        Self {
            id,
            op: BridgeOp::Denoise,
            sigma: Some(sigma),
            cond_role: Some(cond.map(|c| c.role).into()),
            shape: Some([n, c, h, w]),
            data: Some(encode_payload(x_t.as_array().iter().copied())),
            cond_data: cond.map(|c| encode_payload(c.latent.iter().copied())),
        }
    }

    /// Decodes the latent and condition of a denoise request.
    pub fn decode_inputs(&self) -> Result<(VideoLatent, f64, Option<FrameCondition>)> {
        let missing = |f: &str| Error::Format(format!("denoise request without {f}"));
        let [n, c, h, w] = self.shape.ok_or_else(|| missing("shape"))?;
        let sigma = self.sigma.ok_or_else(|| missing("sigma"))?;
        let data = decode_payload(self.data.as_deref().ok_or_else(|| missing("data"))?, n * c * h * w)?;
        let x =
            VideoLatent::new(Array4::from_shape_vec((n, c, h, w), data).map_err(|e| Error::Format(e.to_string()))?)?;
        let role = match self.cond_role.unwrap_or(WireRole::None) {
            WireRole::Start => Some(ConditionRole::Start),
            WireRole::End => Some(ConditionRole::End),
            WireRole::None => None,
        };
        let cond = match (role, &self.cond_data) {
            (None, _) => None,
            (Some(role), Some(raw)) => {
                let latent: Frame = Array3::from_shape_vec((c, h, w), decode_payload(raw, c * h * w)?)
                    .map_err(|e| Error::Format(e.to_string()))?;
                Some(FrameCondition { latent, role })
            }
            (Some(_), None) => return Err(missing("cond_data")),
        };
        Ok((x, sigma, cond))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeResponse {
    pub id: u64,
    pub status: BridgeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0_uncond: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0_cond: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl BridgeResponse {
    pub fn ok(id: u64) -> Self {
        Self {
            id,
            status: BridgeStatus::Ok,
            x0_uncond: None,
            x0_cond: None,
            error: None,
        }
    }

    pub fn denoised(id: u64, pair: &DenoisedPair) -> Self {
        Self {
            x0_uncond: Some(encode_payload(pair.uncond.as_array().iter().copied())),
            x0_cond: Some(encode_payload(pair.cond.as_array().iter().copied())),
            ..Self::ok(id)
        }
    }

    pub fn failure(id: u64, message: impl Into<String>) -> Self {
        Self {
            status: BridgeStatus::Error,
            error: Some(message.into()),
            ..Self::ok(id)
        }
    }
}

/// Base64 of the values narrowed to little-endian `f32`.
pub fn encode_payload(values: impl Iterator<Item = f64>) -> String {
    let bytes: Vec<u8> = values.flat_map(|v| (v as f32).to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

/// Inverse of [`encode_payload`]; `expected` is the element count.
pub fn decode_payload(text: &str, expected: usize) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Format(format!("bad base64 payload: {e}")))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Format(format!(
            "payload has {} bytes, expected {}",
            bytes.len(),
            expected * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

/// Where the backend lives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BridgeEndpoint {
    /// `host:port` of a listening backend.
    Tcp(String),
    /// Program and arguments of a backend speaking on stdin/stdout.
    Stdio(Vec<String>),
}

struct Connection {
    reader: BufReader<Box<dyn Read + Send>>,
    writer: Box<dyn Write + Send>,
    next_id: u64,
}

impl Connection {
    fn call(&mut self, build: impl FnOnce(u64) -> BridgeRequest) -> Result<BridgeResponse> {
        let id = self.next_id;
        self.next_id += 1;
        let mut line = serde_json::to_string(&build(id)).map_err(|e| Error::Format(e.to_string()))?;
        line.push('\n');
        let lost = |e: std::io::Error| Error::BackendUnavailable(format!("bridge connection lost: {e}"));
        self.writer.write_all(line.as_bytes()).map_err(lost)?;
        self.writer.flush().map_err(lost)?;
        let mut reply = String::new();
        if self.reader.read_line(&mut reply).map_err(lost)? == 0 {
            return Err(Error::BackendUnavailable("bridge closed the connection".into()));
        }
        let response: BridgeResponse = serde_json::from_str(reply.trim_end())
            .map_err(|e| Error::Backend(format!("unparseable bridge response: {e}")))?;
        if response.id != id {
            return Err(Error::Backend(format!(
                "bridge answered id {} to request {id}",
                response.id
            )));
        }
        match response.status {
            BridgeStatus::Ok => Ok(response),
            BridgeStatus::Error => Err(Error::Backend(
                response.error.unwrap_or_else(|| "unspecified backend error".into()),
            )),
        }
    }
}

/// Denoiser that forwards every call to an external backend.
pub struct BridgeDenoiser {
    conn: Mutex<Connection>,
    child: Option<Mutex<Child>>,
}

impl BridgeDenoiser {
    pub fn open(endpoint: &BridgeEndpoint) -> Result<Self> {
        match endpoint {
            BridgeEndpoint::Tcp(addr) => Self::connect_tcp(addr),
            BridgeEndpoint::Stdio(cmd) => Self::spawn(cmd),
        }
    }

    pub fn connect_tcp(addr: &str) -> Result<Self> {
        let unavailable = |e: std::io::Error| Error::BackendUnavailable(format!("cannot reach bridge at {addr}: {e}"));
        let resolved = addr
            .to_socket_addrs()
            .map_err(unavailable)?
            .next()
            .ok_or_else(|| Error::BackendUnavailable(format!("{addr} resolves to no address")))?;
        let stream = TcpStream::connect_timeout(&resolved, CONNECT_TIMEOUT).map_err(unavailable)?;
        stream.set_nodelay(true).map_err(unavailable)?;
        let reader = stream.try_clone().map_err(unavailable)?;
        Ok(Self::with_streams(Box::new(reader), Box::new(stream), None))
    }

    pub fn spawn(command: &[String]) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::InvalidInput("empty bridge command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::BackendUnavailable(format!("cannot start bridge {program:?}: {e}")))?;
        let stdin = child.stdin.take().expect("stdin was piped");
        let stdout = child.stdout.take().expect("stdout was piped");
        Ok(Self::with_streams(Box::new(stdout), Box::new(stdin), Some(child)))
    }

    fn with_streams(reader: Box<dyn Read + Send>, writer: Box<dyn Write + Send>, child: Option<Child>) -> Self {
        Self {
            conn: Mutex::new(Connection {
                reader: BufReader::new(reader),
                writer,
                next_id: 0,
            }),
            child: child.map(Mutex::new),
        }
    }

    fn call(&self, build: impl FnOnce(u64) -> BridgeRequest) -> Result<BridgeResponse> {
        self.conn
            .lock()
            .map_err(|_| Error::BackendUnavailable("bridge connection poisoned".into()))?
            .call(build)
    }

    pub fn ping(&self) -> Result<()> {
        self.call(|id| BridgeRequest::control(id, BridgeOp::Ping)).map(|_| ())
    }

    /// Asks the backend to exit. The connection is unusable afterwards.
    pub fn shutdown(&self) -> Result<()> {
        self.call(|id| BridgeRequest::control(id, BridgeOp::Shutdown))
            .map(|_| ())
    }
}

impl Drop for BridgeDenoiser {
    fn drop(&mut self) {
        if let Some(child) = self.child.take() {
            let mut child = child.into_inner().unwrap_or_else(|p| p.into_inner());
            let _ = self.shutdown();
            if let Ok(conn) = self.conn.get_mut() {
                // closing stdin lets a backend blocked on read exit
                conn.writer = Box::new(std::io::sink());
            }
            let _ = child.wait();
        }
    }
}

impl Denoiser for BridgeDenoiser {
    fn denoise(&self, x_t: &VideoLatent, sigma: f64, cond: Option<&FrameCondition>) -> Result<DenoisedPair> {
        check_call(x_t, sigma, cond)?;
        let response = self.call(|id| BridgeRequest::denoise(id, x_t, sigma, cond))?;
        let (n, c, h, w) = x_t.as_array().dim();
        let decode = |field: Option<String>, name: &str| -> Result<VideoLatent> {
            let text = field.ok_or_else(|| Error::Backend(format!("ok response without {name}")))?;
            let values = decode_payload(&text, x_t.len())?;
            VideoLatent::new(Array4::from_shape_vec((n, c, h, w), values).map_err(|e| Error::Format(e.to_string()))?)
        };
        let uncond = decode(response.x0_uncond, "x0_uncond")?;
        let cond = decode(response.x0_cond, "x0_cond")?;
        DenoisedPair::new(uncond, cond)
    }
}
