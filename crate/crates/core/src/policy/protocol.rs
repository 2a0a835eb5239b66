//! Line-delimited JSON protocol for policies living in another process.
//!
//! Every request is one object on one line with an `op` field and a
//! client-assigned `id`; the server answers each request with exactly one
//! line echoing that `id`. Log-probabilities are natural logs.
//!
//! ```text
//! {"op":"hello","id":1}
//! {"id":1,"ok":true,"protocol":"utrl-policy/1","backend":"toy","capabilities":[...]}
//! {"op":"sample","id":2,"prompt":"...","n":8,"top_p":0.8,"temperature":0.95,"max_len":512}
//! {"id":2,"ok":true,"samples":[{"text":..,"tokens":[..],"logp_policy":[..],"logp_reference":[..]}]}
//! ```

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{DecodingMode, DecodingParams, Policy, Sample, UpdateItem};
use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: &str = "utrl-policy/1";

pub const CAPABILITIES: [&str; 6] = ["sample", "score", "update", "freeze_reference", "save", "shutdown"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Hello {
        id: u64,
    },
    Sample {
        id: u64,
        prompt: String,
        n: usize,
        top_p: f64,
        temperature: f64,
        max_len: usize,
        #[serde(default)]
        greedy: bool,
        #[serde(default)]
        seed: u64,
    },
    Score {
        id: u64,
        prompt: String,
        completion: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tokens: Option<Vec<u32>>,
    },
    Update {
        id: u64,
        items: Vec<UpdateItem>,
        learning_rate: f64,
    },
    FreezeReference {
        id: u64,
    },
    Save {
        id: u64,
        path: PathBuf,
    },
    Shutdown {
        id: u64,
    },
}

impl Request {
    pub fn id(&self) -> u64 {
        match self {
            Request::Hello { id }
            | Request::Sample { id, .. }
            | Request::Score { id, .. }
            | Request::Update { id, .. }
            | Request::FreezeReference { id }
            | Request::Save { id, .. }
            | Request::Shutdown { id } => *id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub message: String,
    #[serde(default)]
    pub retryable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Response {
    /// Absent only when the request could not be parsed far enough to read it.
    pub id: Option<u64>,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capabilities: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<Sample>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<Sample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
}

impl Response {
    fn ok(id: u64) -> Self {
        Response {
            id: Some(id),
            ok: true,
            ..Response::default()
        }
    }

    fn failure(id: Option<u64>, message: String) -> Self {
        Response {
            id,
            ok: false,
            error: Some(ErrorBody {
                message,
                retryable: false,
            }),
            ..Response::default()
        }
    }
}

/// Answers one request. The boolean is true after `shutdown`.
pub fn handle(policy: &mut dyn Policy, request: Request) -> (Response, bool) {
    let id = request.id();
    let result = match request {
        Request::Hello { .. } => Ok(Response {
            protocol: Some(PROTOCOL_VERSION.into()),
            backend: Some(policy.backend()),
            capabilities: Some(CAPABILITIES.iter().map(|c| c.to_string()).collect()),
            ..Response::ok(id)
        }),
        Request::Sample {
            prompt,
            n,
            top_p,
            temperature,
            max_len,
            greedy,
            seed,
            ..
        } => {
            let params = DecodingParams {
                top_p,
                temperature,
                max_len,
                mode: if greedy { DecodingMode::Greedy } else { DecodingMode::Nucleus },
            };
            params
                .validate()
                .and_then(|_| policy.sample(&prompt, n, &params, seed))
                .map(|samples| Response {
                    samples: Some(samples),
                    ..Response::ok(id)
                })
        }
        Request::Score {
            prompt,
            completion,
            tokens,
            ..
        } => policy.score(&prompt, &completion, tokens.as_deref()).map(|s| Response {
            score: Some(s),
            ..Response::ok(id)
        }),
        Request::Update {
            items, learning_rate, ..
        } => policy.apply_update(&items, learning_rate).map(|objective| Response {
            objective: Some(objective),
            ..Response::ok(id)
        }),
        Request::FreezeReference { .. } => policy.freeze_reference().map(|_| Response::ok(id)),
        Request::Save { path, .. } => policy.save(&path).map(|_| Response::ok(id)),
        Request::Shutdown { .. } => return (Response::ok(id), true),
    };
    (result.unwrap_or_else(|e| Response::failure(Some(id), e.to_string())), false)
}

/// Answers one raw line. Malformed input yields an error response and never
/// stops the server.
pub fn handle_line(policy: &mut dyn Policy, line: &str) -> (Response, bool) {
    match serde_json::from_str::<Request>(line) {
        Ok(req) => handle(policy, req),
        Err(e) => {
            let id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("id").and_then(|i| i.as_u64()));
            (Response::failure(id, format!("malformed request: {e}")), false)
        }
    }
}

/// Serves `policy` until `shutdown` or end of input.
pub fn serve(policy: &mut dyn Policy, input: impl BufRead, output: impl Write) -> Result<()> {
    let mut output = BufWriter::new(output);
    for line in input.lines() {
        let line = line.map_err(|e| Error::Transport(format!("read failed: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let (response, stop) = handle_line(policy, &line);
        serde_json::to_writer(&mut output, &response)?;
        output
            .write_all(b"\n")
            .and_then(|_| output.flush())
            .map_err(|e| Error::Transport(format!("write failed: {e}")))?;
        if stop {
            break;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endpoint {
    /// Spawn this command and talk over its standard streams.
    Command(Vec<String>),
    /// Connect to `host:port`.
    Tcp(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalPolicyConfig {
    pub endpoint: Endpoint,
    /// Extra attempts after a failed connection or a retryable error.
    pub retries: u32,
    pub retry_delay_ms: u64,
}

enum Transport {
    Child {
        child: Child,
        stdin: ChildStdin,
        stdout: BufReader<ChildStdout>,
    },
    Tcp {
        reader: BufReader<TcpStream>,
        writer: TcpStream,
    },
}

impl Transport {
    fn open(endpoint: &Endpoint) -> std::io::Result<Self> {
        match endpoint {
            Endpoint::Command(argv) => {
                let (program, args) = argv
                    .split_first()
                    .ok_or_else(|| std::io::Error::other("empty policy command"))?;
                let mut child = Command::new(program)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
                Ok(Transport::Child { child, stdin, stdout })
            }
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr)?;
                stream.set_nodelay(true)?;
                Ok(Transport::Tcp {
                    reader: BufReader::new(stream.try_clone()?),
                    writer: stream,
                })
            }
        }
    }

    fn exchange(&mut self, line: &str) -> std::io::Result<String> {
        let (writer, reader): (&mut dyn Write, &mut dyn BufRead) = match self {
            Transport::Child { stdin, stdout, .. } => (stdin, stdout),
            Transport::Tcp { reader, writer } => (writer, reader),
        };
        writer.write_all(line.as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        let mut buf = String::new();
        if reader.read_line(&mut buf)? == 0 {
            return Err(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "policy closed the connection"));
        }
        Ok(buf)
    }
}

impl Drop for Transport {
    fn drop(&mut self) {
        if let Transport::Child { child, .. } = self {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Client side of the protocol. Requests are serialized per connection.
pub struct ExternalPolicy {
    config: ExternalPolicyConfig,
    transport: Option<Transport>,
    next_id: u64,
    backend: String,
    frozen: bool,
}

impl ExternalPolicy {
    pub fn connect(config: ExternalPolicyConfig) -> Result<Self> {
        let mut policy = ExternalPolicy {
            config,
            transport: None,
            next_id: 1,
            backend: String::new(),
            frozen: false,
        };
        let hello = policy.call(|id| Request::Hello { id })?;
        match hello.protocol.as_deref() {
            Some(PROTOCOL_VERSION) => {}
            other => {
                return Err(Error::Transport(format!(
                    "policy speaks {other:?}, expected {PROTOCOL_VERSION}"
                )))
            }
        }
        policy.backend = hello.backend.unwrap_or_else(|| "external".into());
        Ok(policy)
    }

    fn delay(&self, attempt: u32) {
        let ms = self.config.retry_delay_ms.saturating_mul(1 << attempt.min(6));
        thread::sleep(Duration::from_millis(ms));
    }

    /// Sends one request and waits for its response. Connection failures and
    /// retryable error responses consume the retry budget.
    fn call(&mut self, make: impl Fn(u64) -> Request) -> Result<Response> {
        let mut last_error = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                self.delay(attempt - 1);
            }
            if self.transport.is_none() {
                match Transport::open(&self.config.endpoint) {
                    Ok(t) => self.transport = Some(t),
                    Err(e) => {
                        last_error = format!("cannot reach policy: {e}");
                        log::warn!("{last_error} (attempt {})", attempt + 1);
                        continue;
                    }
                }
            }
            let id = self.next_id;
            self.next_id += 1;
            let line = serde_json::to_string(&make(id))?;
            let raw = match self.transport.as_mut().expect("transport open").exchange(&line) {
                Ok(raw) => raw,
                Err(e) => {
                    last_error = format!("policy connection failed: {e}");
                    log::warn!("{last_error} (attempt {})", attempt + 1);
                    self.transport = None;
                    continue;
                }
            };
            let response: Response = serde_json::from_str(raw.trim_end())
                .map_err(|e| Error::Transport(format!("unparseable response: {e}")))?;
            if response.id != Some(id) {
                return Err(Error::Transport(format!(
                    "response id {:?} does not match request id {id}",
                    response.id
                )));
            }
            if response.ok {
                return Ok(response);
            }
            let err = response.error.unwrap_or(ErrorBody {
                message: "unspecified failure".into(),
                retryable: false,
            });
            if !err.retryable {
                return Err(Error::Policy(err.message));
            }
            last_error = err.message;
            log::warn!("retryable policy error: {last_error} (attempt {})", attempt + 1);
        }
        Err(Error::Transport(format!(
            "retry budget of {} exhausted: {last_error}",
            self.config.retries
        )))
    }

    pub fn shutdown(mut self) -> Result<()> {
        self.call(|id| Request::Shutdown { id })?;
        Ok(())
    }
}

impl Policy for ExternalPolicy {
    fn backend(&self) -> String {
        self.backend.clone()
    }

    fn sample(&mut self, prompt: &str, n: usize, params: &DecodingParams, seed: u64) -> Result<Vec<Sample>> {
        let resp = self.call(|id| Request::Sample {
            id,
            prompt: prompt.to_string(),
            n,
            top_p: params.top_p,
            temperature: params.temperature,
            max_len: params.max_len,
            greedy: params.mode == DecodingMode::Greedy,
            seed,
        })?;
        resp.samples
            .ok_or_else(|| Error::Transport("sample response without samples".into()))
    }

    fn score(&mut self, prompt: &str, completion: &str, tokens: Option<&[u32]>) -> Result<Sample> {
        let resp = self.call(|id| Request::Score {
            id,
            prompt: prompt.to_string(),
            completion: completion.to_string(),
            tokens: tokens.map(<[u32]>::to_vec),
        })?;
        resp.score
            .ok_or_else(|| Error::Transport("score response without score".into()))
    }

    fn apply_update(&mut self, batch: &[UpdateItem], learning_rate: f64) -> Result<f64> {
        super::check_update_batch(batch, learning_rate)?;
        let resp = self.call(|id| Request::Update {
            id,
            items: batch.to_vec(),
            learning_rate,
        })?;
        resp.objective
            .ok_or_else(|| Error::Transport("update response without objective".into()))
    }

    fn freeze_reference(&mut self) -> Result<()> {
        self.call(|id| Request::FreezeReference { id })?;
        self.frozen = true;
        Ok(())
    }

    fn reference_frozen(&self) -> bool {
        self.frozen
    }

    fn save(&mut self, dir: &Path) -> Result<()> {
        let path = std::path::absolute(dir).map_err(|e| Error::io(dir, e))?;
        self.call(|id| Request::Save { id, path: path.clone() })?;
        Ok(())
    }
}
