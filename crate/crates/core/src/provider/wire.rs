//! Newline-delimited JSON provider protocol, over a child process's stdio or TCP.
//!
//! ```text
//! → {"op":"describe"}                        ⇒ {"p":…,"classes":[…],"nonneg":true,"mask_token":"…"}
//! → {"op":"embed","texts":[…]}               ⇒ {"activations":[[…],…]}
//! → {"op":"classify","activations":[[…],…]}  ⇒ {"logits":[[…],…]}
//! → {"op":"shutdown"}                        ⇒ {"ok":true}
//! ```
//!
//! Failures are answered with `{"error":"…","code":"…"}`. A line that is not
//! a valid request is answered with code `malformed` and ends the session.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{check_nonnegative, Provider, ProviderDescriptor};
use crate::error::{Error, Result};
use crate::matrixio::DenseMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase", deny_unknown_fields)]
pub enum Request {
    Describe,
    Embed { texts: Vec<String> },
    Classify { activations: Vec<Vec<f64>> },
    Shutdown,
}

fn error_code(err: &Error) -> &'static str {
    match err {
        Error::DimensionMismatch { .. } => "dimension_mismatch",
        Error::Precondition(_) => "precondition",
        Error::NonNegativity(_) => "nonnegativity",
        Error::Provider { .. } | Error::ProviderUnavailable { .. } => "provider",
        _ => "internal",
    }
}

fn matrix_from_rows(rows: Vec<Vec<f64>>, cols: usize) -> Result<DenseMatrix> {
    DenseMatrix::from_rows(&rows, cols)
}

/// How a [`serve`] session ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionEnd {
    Shutdown,
    Eof,
    Malformed,
}

/// Answers requests from `input` on `output` until shutdown, EOF or a malformed line.
pub fn serve<P, R, W>(provider: &P, input: R, mut output: W) -> Result<SessionEnd>
where
    P: Provider + ?Sized,
    R: BufRead,
    W: Write,
{
    let descriptor = provider.describe()?;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let request: Request = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                write_line(&mut output, &json!({"error": format!("malformed request: {e}"), "code": "malformed"}))?;
                return Ok(SessionEnd::Malformed);
            }
        };
        let response = match request {
            Request::Describe => Ok(serde_json::to_value(&descriptor)?),
            Request::Embed { texts } => provider.embed(&texts).map(|a| json!({"activations": a.to_rows()})),
            Request::Classify { activations } => matrix_from_rows(activations, descriptor.p)
                .and_then(|a| provider.classify(&a))
                .map(|l| json!({"logits": l.to_rows()})),
            Request::Shutdown => {
                write_line(&mut output, &json!({"ok": true}))?;
                return Ok(SessionEnd::Shutdown);
            }
        };
        let response = response.unwrap_or_else(|e| json!({"error": e.to_string(), "code": error_code(&e)}));
        write_line(&mut output, &response)?;
    }
    Ok(SessionEnd::Eof)
}

fn write_line<W: Write>(out: &mut W, value: &Value) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Serves connections on `listener`, one thread per connection, until any
/// client sends `shutdown`.
pub fn serve_tcp<P: Provider + 'static>(provider: Arc<P>, listener: TcpListener) -> Result<()> {
    listener.set_nonblocking(true)?;
    let stop = Arc::new(AtomicBool::new(false));
    let mut workers = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                let provider = Arc::clone(&provider);
                let stop = Arc::clone(&stop);
                workers.push(thread::spawn(move || {
                    let reader = BufReader::new(stream.try_clone()?);
                    if serve(&*provider, reader, BufWriter::new(stream))? == SessionEnd::Shutdown {
                        stop.store(true, Ordering::SeqCst);
                    }
                    Ok::<_, Error>(())
                }));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => return Err(e.into()),
        }
    }
    for w in workers {
        if let Ok(Err(e)) = w.join() {
            log::warn!("provider connection ended with error: {e}");
        }
    }
    Ok(())
}

/// Where a model server lives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endpoint {
    /// Child process speaking the protocol on stdin/stdout.
    Command { program: String, args: Vec<String> },
    /// `host:port`.
    Tcp(String),
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Command { program, args } => write!(f, "cmd:{} {}", program, args.join(" ")),
            Endpoint::Tcp(addr) => write!(f, "tcp:{addr}"),
        }
    }
}

enum Link {
    Child { child: Child, writer: BufWriter<ChildStdin>, reader: BufReader<ChildStdout> },
    Tcp { writer: BufWriter<TcpStream>, reader: BufReader<TcpStream> },
}

impl Link {
    fn open(endpoint: &Endpoint) -> std::io::Result<Link> {
        match endpoint {
            Endpoint::Command { program, args } => {
                let mut child = Command::new(program)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()?;
                let writer = BufWriter::new(child.stdin.take().expect("piped stdin"));
                let reader = BufReader::new(child.stdout.take().expect("piped stdout"));
                Ok(Link::Child { child, writer, reader })
            }
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr)?;
                stream.set_nodelay(true)?;
                Ok(Link::Tcp { writer: BufWriter::new(stream.try_clone()?), reader: BufReader::new(stream) })
            }
        }
    }

    fn exchange(&mut self, line: &[u8]) -> std::io::Result<String> {
        let (writer, reader): (&mut dyn Write, &mut dyn BufRead) = match self {
            Link::Child { writer, reader, .. } => (writer, reader),
            Link::Tcp { writer, reader } => (writer, reader),
        };
        writer.write_all(line)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        let mut response = String::new();
        if reader.read_line(&mut response)? == 0 {
            return Err(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "server closed the connection"));
        }
        Ok(response)
    }

    /// Child processes are owned by the client and asked to shut down; TCP
    /// servers are shared, so their connection is simply closed.
    fn close(mut self) {
        if let Link::Child { .. } = self {
            let _ = self.exchange(br#"{"op":"shutdown"}"#);
        }
        if let Link::Child { mut child, writer, .. } = self {
            drop(writer);
            let _ = child.wait();
        }
    }
}

/// Client for an external model server. One request is in flight at a
/// time; transport failures reconnect and retry up to `max_retries` times.
pub struct WireProvider {
    endpoint: Endpoint,
    link: Mutex<Option<Link>>,
    descriptor: ProviderDescriptor,
    max_retries: usize,
}

impl WireProvider {
    pub const DEFAULT_RETRIES: usize = 2;

    pub fn connect(endpoint: Endpoint) -> Result<Self> {
        Self::connect_with_retries(endpoint, Self::DEFAULT_RETRIES)
    }

    pub fn connect_with_retries(endpoint: Endpoint, max_retries: usize) -> Result<Self> {
        let placeholder =
            ProviderDescriptor { p: 0, class_names: vec![], nonneg_certified: false, mask_token: String::new() };
        let mut client = WireProvider { endpoint, link: Mutex::new(None), descriptor: placeholder, max_retries };
        let value = client.request(&Request::Describe)?;
        let descriptor: ProviderDescriptor = serde_json::from_value(value)
            .map_err(|e| Error::Provider { code: "protocol".into(), message: format!("bad describe response: {e}") })?;
        descriptor.validate()?;
        client.descriptor = descriptor;
        Ok(client)
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    /// Asks the server to stop. A TCP server stops accepting connections.
    pub fn shutdown_server(&self) -> Result<()> {
        self.request(&Request::Shutdown).map(|_| ())
    }

    fn request(&self, request: &Request) -> Result<Value> {
        let line = serde_json::to_vec(request)?;
        let mut guard = self.link.lock().expect("wire link lock poisoned");
        let mut last_error = String::new();
        for attempt in 0..=self.max_retries {
            if guard.is_none() {
                match Link::open(&self.endpoint) {
                    Ok(link) => *guard = Some(link),
                    Err(e) => {
                        last_error = format!("connect to {}: {e}", self.endpoint);
                        log::debug!("attempt {attempt}: {last_error}");
                        continue;
                    }
                }
            }
            let link = guard.as_mut().expect("link present");
            match link.exchange(&line) {
                Ok(response) => {
                    let value: Value = serde_json::from_str(&response).map_err(|e| Error::Provider {
                        code: "protocol".into(),
                        message: format!("unparseable response: {e}"),
                    })?;
                    if let Some(msg) = value.get("error") {
                        let code = value.get("code").and_then(Value::as_str).unwrap_or("unknown");
                        return Err(Error::Provider {
                            code: code.to_string(),
                            message: msg.as_str().unwrap_or_default().to_string(),
                        });
                    }
                    return Ok(value);
                }
                Err(e) => {
                    last_error = format!("exchange with {}: {e}", self.endpoint);
                    log::debug!("attempt {attempt}: {last_error}");
                    if let Some(Link::Child { mut child, .. }) = guard.take() {
                        let _ = child.kill();
                        let _ = child.wait();
                    }
                }
            }
        }
        Err(Error::ProviderUnavailable { retries: self.max_retries, message: last_error })
    }

    fn matrix_field(value: &Value, field: &str, cols: usize) -> Result<DenseMatrix> {
        let rows: Vec<Vec<f64>> = value
            .get(field)
            .cloned()
            .ok_or_else(|| Error::Provider { code: "protocol".into(), message: format!("response lacks `{field}`") })
            .and_then(|v| {
                serde_json::from_value(v)
                    .map_err(|e| Error::Provider { code: "protocol".into(), message: format!("bad `{field}`: {e}") })
            })?;
        matrix_from_rows(rows, cols)
    }
}

impl Drop for WireProvider {
    fn drop(&mut self) {
        if let Ok(mut guard) = self.link.lock() {
            if let Some(link) = guard.take() {
                link.close();
            }
        }
    }
}

impl Provider for WireProvider {
    fn describe(&self) -> Result<ProviderDescriptor> {
        Ok(self.descriptor.clone())
    }

    fn id(&self) -> String {
        let descriptor = serde_json::to_vec(&self.descriptor).expect("descriptor serializes");
        let mut hasher = Sha256::new();
        hasher.update(self.endpoint.to_string().as_bytes());
        hasher.update(&descriptor);
        format!("wire-{}", &hex::encode(hasher.finalize())[..16])
    }

    fn embed(&self, texts: &[String]) -> Result<DenseMatrix> {
        let value = self.request(&Request::Embed { texts: texts.to_vec() })?;
        let a = Self::matrix_field(&value, "activations", self.descriptor.p)?;
        if a.rows() != texts.len() {
            return Err(Error::dims(format!("{} activation rows", texts.len()), a.rows()));
        }
        check_nonnegative(&a)?;
        Ok(a)
    }

    fn classify(&self, activations: &DenseMatrix) -> Result<DenseMatrix> {
        if activations.cols() != self.descriptor.p {
            return Err(Error::dims(format!("{} activation columns", self.descriptor.p), activations.cols()));
        }
        let value = self.request(&Request::Classify { activations: activations.to_rows() })?;
        let logits = Self::matrix_field(&value, "logits", self.descriptor.num_classes())?;
        if logits.rows() != activations.rows() {
            return Err(Error::dims(format!("{} logit rows", activations.rows()), logits.rows()));
        }
        Ok(logits)
    }
}
