//! Newline-delimited JSON protocol for external evaluators.
//!
//! ```text
//! request  {"id": 7, "preprompt": [3, 14, 15], "split": "train"}
//! response {"id": 7, "correct": 330, "total": 500, "per_question": [1, 0, ...]}
//! ```
//!
//! `per_question` is optional. Unknown fields are ignored and responses may
//! arrive in any order; they are matched to requests by `id`. A response may
//! carry `"error": "<message>"` instead of a score.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{check_indices, EvalError, EvalReport, Evaluator, Split};
use crate::space::PrePrompt;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub preprompt: Vec<u32>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_question: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Response {
    pub fn from_report(id: u64, report: &EvalReport) -> Self {
        Self {
            id,
            correct: Some(report.correct),
            total: Some(report.total),
            per_question: report
                .per_question
                .as_ref()
                .map(|v| v.iter().map(|&b| b as u8).collect()),
            error: None,
        }
    }

    pub fn from_error(id: u64, message: impl Into<String>) -> Self {
        Self {
            id,
            correct: None,
            total: None,
            per_question: None,
            error: Some(message.into()),
        }
    }

    /// Checks the score invariants and converts to a report.
    pub fn into_report(self) -> Result<EvalReport, EvalError> {
        if let Some(msg) = self.error {
            return Err(EvalError::Remote(msg));
        }
        let (correct, total) = match (self.correct, self.total) {
            (Some(c), Some(t)) => (c, t),
            _ => return Err(EvalError::Malformed("missing correct/total".into())),
        };
        let mut report = EvalReport::aggregate(correct, total)?;
        if let Some(bits) = self.per_question {
            if bits.len() != total as usize {
                return Err(EvalError::Malformed(format!(
                    "per_question has {} entries, total is {total}",
                    bits.len()
                )));
            }
            if let Some(b) = bits.iter().find(|&&b| b > 1) {
                return Err(EvalError::Malformed(format!("per_question entry {b} is not 0/1")));
            }
            let ones = bits.iter().filter(|&&b| b == 1).count();
            if ones != correct as usize {
                return Err(EvalError::Malformed(format!(
                    "per_question has {ones} ones, correct is {correct}"
                )));
            }
            report.per_question = Some(bits.into_iter().map(|b| b == 1).collect());
        }
        Ok(report)
    }
}

/// Decodes one response line. The id is returned whenever it can be
/// recovered, even if the rest of the line is invalid.
pub fn decode_response(line: &[u8]) -> (Option<u64>, Result<EvalReport, EvalError>) {
    let value: serde_json::Value = match serde_json::from_slice(line) {
        Ok(v) => v,
        Err(e) => return (None, Err(EvalError::Malformed(e.to_string()))),
    };
    let id = value.get("id").and_then(serde_json::Value::as_u64);
    let result = serde_json::from_value::<Response>(value)
        .map_err(|e| EvalError::Malformed(e.to_string()))
        .and_then(Response::into_report);
    (id, result)
}

pub fn decode_request(line: &[u8]) -> Result<Request, serde_json::Error> {
    serde_json::from_slice(line)
}

/// One protocol message as a newline-terminated JSON line.
pub fn encode_line<T: Serialize>(msg: &T) -> Vec<u8> {
    let mut line = serde_json::to_vec(msg).expect("protocol types serialize");
    line.push(b'\n');
    line
}

type Reply = mpsc::Sender<Result<EvalReport, EvalError>>;

#[derive(Default)]
struct Pending {
    waiting: Mutex<HashMap<u64, Reply>>,
    closed: AtomicBool,
}

impl Pending {
    fn fail_all(&self, err: EvalError) {
        let drained: Vec<Reply> = self
            .waiting
            .lock()
            .expect("pending lock")
            .drain()
            .map(|(_, tx)| tx)
            .collect();
        for tx in drained {
            let _ = tx.send(Err(err.clone()));
        }
    }
}

/// Client for an evaluator speaking the NDJSON protocol over any byte stream.
///
/// Safe for concurrent use: requests from several threads are multiplexed on
/// the one connection and routed back by id.
pub struct ExternalEvaluator {
    cardinality: usize,
    timeout: Duration,
    writer: Mutex<Box<dyn Write + Send>>,
    pending: Arc<Pending>,
    next_id: AtomicU64,
    child: Mutex<Option<Child>>,
    socket: Option<TcpStream>,
}

impl ExternalEvaluator {
    pub fn from_streams<R, W>(reader: R, writer: W, cardinality: usize, timeout: Duration) -> Self
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let pending = Arc::new(Pending::default());
        let shared = Arc::clone(&pending);
        thread::spawn(move || read_loop(BufReader::new(reader), &shared));
        Self {
            cardinality,
            timeout,
            writer: Mutex::new(Box::new(writer)),
            pending,
            next_id: AtomicU64::new(1),
            child: Mutex::new(None),
            socket: None,
        }
    }

    /// Launches `program` and talks to it over its stdin/stdout.
    pub fn spawn(
        program: &str,
        args: &[String],
        cardinality: usize,
        timeout: Duration,
    ) -> io::Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let client = Self::from_streams(stdout, stdin, cardinality, timeout);
        *client.child.lock().expect("child lock") = Some(child);
        Ok(client)
    }

    pub fn connect<A: ToSocketAddrs>(
        addr: A,
        cardinality: usize,
        timeout: Duration,
    ) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        let handle = stream.try_clone()?;
        let mut client = Self::from_streams(reader, stream, cardinality, timeout);
        client.socket = Some(handle);
        Ok(client)
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }
}

fn read_loop<R: BufRead>(mut reader: R, pending: &Pending) {
    let mut line = Vec::new();
    loop {
        line.clear();
        match reader.read_until(b'\n', &mut line) {
            Ok(0) | Err(_) => break,
            Ok(_) => {}
        }
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        match decode_response(&line) {
            (Some(id), result) => {
                let tx = pending.waiting.lock().expect("pending lock").remove(&id);
                // responses to abandoned (timed-out) requests are dropped
                if let Some(tx) = tx {
                    let _ = tx.send(result);
                }
            }
            // a line we cannot attribute poisons every outstanding request
            (None, Err(e)) => pending.fail_all(e),
            (None, Ok(_)) => unreachable!("a valid response always has an id"),
        }
    }
    pending.closed.store(true, Ordering::SeqCst);
    pending.fail_all(EvalError::Disconnected);
}

impl Evaluator for ExternalEvaluator {
    fn cardinality(&self) -> usize {
        self.cardinality
    }

    fn evaluate(&self, pre: &PrePrompt, split: Split) -> Result<EvalReport, EvalError> {
        check_indices(pre, self.cardinality)?;
        if self.pending.closed.load(Ordering::SeqCst) {
            return Err(EvalError::Disconnected);
        }
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = mpsc::channel();
        self.pending
            .waiting
            .lock()
            .expect("pending lock")
            .insert(id, tx);
        let line = encode_line(&Request {
            id,
            preprompt: pre.indices().to_vec(),
            split,
        });
        let sent = {
            let mut w = self.writer.lock().expect("writer lock");
            w.write_all(&line).and_then(|_| w.flush())
        };
        if let Err(e) = sent {
            self.pending.waiting.lock().expect("pending lock").remove(&id);
            return Err(EvalError::Io(e.to_string()));
        }
        match rx.recv_timeout(self.timeout) {
            Ok(result) => result,
            Err(RecvTimeoutError::Timeout) => {
                self.pending.waiting.lock().expect("pending lock").remove(&id);
                Err(EvalError::Timeout {
                    id,
                    timeout_ms: self.timeout.as_millis() as u64,
                })
            }
            Err(RecvTimeoutError::Disconnected) => Err(EvalError::Disconnected),
        }
    }
}

impl Drop for ExternalEvaluator {
    fn drop(&mut self) {
        if let Some(socket) = &self.socket {
            let _ = socket.shutdown(std::net::Shutdown::Both);
        }
        if let Some(mut child) = self.child.lock().ok().and_then(|mut c| c.take()) {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Serves `evaluator` over the protocol until `reader` reaches EOF. Returns
/// the number of requests answered.
pub fn serve<E, R, W>(evaluator: &E, reader: R, mut writer: W, per_question: bool) -> io::Result<u64>
where
    E: Evaluator + ?Sized,
    R: BufRead,
    W: Write,
{
    let mut answered = 0;
    for line in reader.split(b'\n') {
        let line = line?;
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let response = match decode_request(&line) {
            Ok(req) => match evaluator.evaluate(&PrePrompt::new(req.preprompt), req.split) {
                Ok(mut report) => {
                    if !per_question {
                        report.per_question = None;
                    }
                    Response::from_report(req.id, &report)
                }
                Err(e) => Response::from_error(req.id, e.to_string()),
            },
            Err(e) => {
                let id = serde_json::from_slice::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(serde_json::Value::as_u64));
                match id {
                    Some(id) => Response::from_error(id, format!("bad request: {e}")),
                    None => continue,
                }
            }
        };
        writer.write_all(&encode_line(&response))?;
        writer.flush()?;
        answered += 1;
    }
    Ok(answered)
}
