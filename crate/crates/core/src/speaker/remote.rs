//! Client for speakers served over a newline-delimited JSON socket.
//!
//! ```text
//! -> {"type":"hello"}
//! <- {"type":"vocab","tokens":[...],"eos":"</s>"}
//! -> {"type":"next","image":"<id>","prefix":["w1",...]}
//! <- {"type":"dist","logp":[...]}        (aligned with the handshake vocab)
//! <- {"type":"error","message":"..."}    (on failure)
//! ```
//!
//! JSON has no infinities, so a zero-probability entry is sent as `null`.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::SpeakerBackend;
use crate::error::{Error, Result};
use crate::prob::{support, Dist, Support};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// Served distributions must sum to one within this tolerance.
const SERVED_MASS_TOLERANCE: f64 = 1e-6;

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Request<'a> {
    Hello,
    Next { image: &'a str, prefix: &'a [String] },
}

#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum OwnedRequest {
    Hello,
    Next { image: String, prefix: Vec<String> },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Response {
    Vocab { tokens: Vec<String>, eos: String },
    Dist { logp: Vec<Option<f64>> },
    Error { message: String },
}

struct Connection {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Connection {
    fn call(&mut self, request: &Request) -> Result<Response> {
        let mut line = serde_json::to_string(request)?;
        line.push('\n');
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(io_error)?;
        let mut reply = String::new();
        let n = self.reader.read_line(&mut reply).map_err(io_error)?;
        if n == 0 {
            return Err(Error::Protocol("connection closed by speaker".into()));
        }
        match serde_json::from_str(reply.trim_end()) {
            Ok(Response::Error { message }) => Err(Error::Protocol(message)),
            Ok(r) => Ok(r),
            Err(e) => Err(Error::Protocol(format!("malformed message: {e}"))),
        }
    }
}

fn io_error(e: io::Error) -> Error {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => Error::Timeout,
        _ => Error::Protocol(format!("connection failed: {e}")),
    }
}

/// A speaker reached over the wire. Requests on one connection are
/// serialized; open another connection for parallel decoding.
pub struct RemoteSpeaker {
    vocab: Support,
    eos: String,
    conn: Mutex<Connection>,
}

impl std::fmt::Debug for RemoteSpeaker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteSpeaker")
            .field("vocab", &self.vocab.len())
            .field("eos", &self.eos)
            .finish()
    }
}

pub fn remote_speaker(endpoint: &str) -> Result<RemoteSpeaker> {
    RemoteSpeaker::connect(endpoint, DEFAULT_TIMEOUT)
}

impl RemoteSpeaker {
    pub fn connect(endpoint: &str, timeout: Duration) -> Result<Self> {
        let addr = endpoint
            .to_socket_addrs()
            .map_err(|e| Error::Protocol(format!("bad endpoint `{endpoint}`: {e}")))?
            .next()
            .ok_or_else(|| Error::Protocol(format!("endpoint `{endpoint}` did not resolve")))?;
        let stream = TcpStream::connect_timeout(&addr, timeout).map_err(io_error)?;
        stream.set_read_timeout(Some(timeout)).map_err(io_error)?;
        stream.set_write_timeout(Some(timeout)).map_err(io_error)?;
        stream.set_nodelay(true).map_err(io_error)?;
        let writer = stream.try_clone().map_err(io_error)?;
        let mut conn = Connection {
            reader: BufReader::new(stream),
            writer,
        };
        let (tokens, eos) = match conn.call(&Request::Hello)? {
            Response::Vocab { tokens, eos } => (tokens, eos),
            _ => return Err(Error::Protocol("expected a vocab message".into())),
        };
        if tokens.iter().filter(|t| **t == eos).count() != 1 {
            return Err(Error::Protocol(format!(
                "handshake vocabulary must contain `{eos}` exactly once"
            )));
        }
        Ok(RemoteSpeaker {
            vocab: support(tokens),
            eos,
            conn: Mutex::new(conn),
        })
    }
}

impl SpeakerBackend for RemoteSpeaker {
    fn vocabulary(&self) -> &Support {
        &self.vocab
    }

    fn eos(&self) -> &str {
        &self.eos
    }

    fn next_token_logprobs(&self, image: &str, prefix: &[String]) -> Result<Dist> {
        let mut conn = self
            .conn
            .lock()
            .map_err(|_| Error::Protocol("connection poisoned by an earlier failure".into()))?;
        let logp = match conn.call(&Request::Next { image, prefix })? {
            Response::Dist { logp } => logp,
            _ => return Err(Error::Protocol("expected a dist message".into())),
        };
        if logp.len() != self.vocab.len() {
            return Err(Error::VocabMismatch {
                expected: self.vocab.len(),
                got: logp.len(),
            });
        }
        let logp = logp.into_iter().map(|x| x.unwrap_or(f64::NEG_INFINITY)).collect();
        Dist::from_normalized(logp, self.vocab.clone(), SERVED_MASS_TOLERANCE)
            .map_err(|e| Error::Protocol(format!("served distribution rejected: {e}")))
    }
}

/// Serve `backend` on one accepted connection until the client hangs up.
/// Backend failures are reported to the client as error messages.
pub fn serve_connection(stream: TcpStream, backend: &dyn SpeakerBackend) -> io::Result<()> {
    let mut writer = stream.try_clone()?;
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<OwnedRequest>(&line) {
            Ok(OwnedRequest::Hello) => Response::Vocab {
                tokens: backend.vocabulary().to_vec(),
                eos: backend.eos().to_string(),
            },
            Ok(OwnedRequest::Next { image, prefix }) => match backend.next_token_logprobs(&image, &prefix) {
                Ok(d) => Response::Dist {
                    logp: d.logp().iter().map(|x| x.is_finite().then_some(*x)).collect(),
                },
                Err(e) => Response::Error { message: e.to_string() },
            },
            Err(e) => Response::Error {
                message: format!("malformed request: {e}"),
            },
        };
        let mut out = serde_json::to_string(&reply).map_err(io::Error::other)?;
        out.push('\n');
        writer.write_all(out.as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}
