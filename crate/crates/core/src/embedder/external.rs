//! NDJSON client/server for embedders running in a child process.
//!
//! Wire format, one JSON object per line:
//!
//! * handshake (child -> parent, first line): `{"model_id": str, "dim": int}`
//! * request (parent -> child): `{"id": str, "payload_b64": str}`
//! * response (child -> parent): `{"id": str, "embedding": [f32...]}` or
//!   `{"id": str, "error": str}`
//!
//! Responses may come back in any order; they are matched by id.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{EmbedError, Embedder, EmbedderInfo, Fragment};
use crate::corpus::ModalityKind;
use crate::vector::EmbeddingVector;

/// Per-batch response deadline.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Serialize, Deserialize)]
struct Handshake {
    model_id: String,
    dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Request {
    id: String,
    payload_b64: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Response {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

type Pending = Arc<Mutex<Option<HashMap<String, Sender<Response>>>>>;

/// Client for an out-of-process embedder. Safe to share between threads:
/// writes to the child are serialized and responses are routed by id.
pub struct ExternalEmbedder {
    info: EmbedderInfo,
    writer: Mutex<Box<dyn Write + Send>>,
    // `None` once the reader has seen EOF; waiting callers then fail fast.
    pending: Pending,
    next_id: AtomicU64,
    timeout: Duration,
    child: Option<Mutex<Child>>,
}

impl std::fmt::Debug for ExternalEmbedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalEmbedder")
            .field("info", &self.info)
            .field("timeout", &self.timeout)
            .finish_non_exhaustive()
    }
}

impl ExternalEmbedder {
    /// Runs `command` through `sh -c` and performs the handshake.
    pub fn spawn(
        command: &str,
        modality: ModalityKind,
        timeout: Duration,
    ) -> Result<Self, EmbedError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| EmbedError::Failure(format!("cannot start {command:?}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        match Self::connect(stdout, stdin, modality, timeout) {
            Ok(mut this) => {
                this.child = Some(Mutex::new(child));
                Ok(this)
            }
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                Err(e)
            }
        }
    }

    /// Attaches to an already running peer over arbitrary streams.
    pub fn connect<R, W>(
        reader: R,
        writer: W,
        modality: ModalityKind,
        timeout: Duration,
    ) -> Result<Self, EmbedError>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let pending: Pending = Arc::new(Mutex::new(Some(HashMap::new())));
        let (hs_tx, hs_rx) = mpsc::channel();
        let routes = Arc::clone(&pending);
        thread::Builder::new()
            .name("embedder-reader".into())
            .spawn(move || read_loop(BufReader::new(reader), hs_tx, routes))
            .map_err(|e| EmbedError::Failure(format!("cannot start reader thread: {e}")))?;

        let handshake: Handshake = match hs_rx.recv_timeout(timeout) {
            Ok(Ok(h)) => h,
            Ok(Err(msg)) => return Err(EmbedError::Failure(msg)),
            Err(_) => return Err(EmbedError::Failure("no handshake from embedder".into())),
        };
        if handshake.dim == 0 {
            return Err(EmbedError::Failure("embedder declared dim 0".into()));
        }
        Ok(Self {
            info: EmbedderInfo {
                model_id: handshake.model_id,
                dim: handshake.dim,
                modality,
            },
            writer: Mutex::new(Box::new(writer)),
            pending,
            next_id: AtomicU64::new(0),
            timeout,
            child: None,
        })
    }

    fn register(&self, count: usize) -> Result<Vec<(String, Receiver<Response>)>, EmbedError> {
        let mut guard = self.pending.lock().expect("pending lock");
        let routes = guard
            .as_mut()
            .ok_or_else(|| EmbedError::Failure("embedder process has exited".into()))?;
        Ok((0..count)
            .map(|_| {
                let id = self.next_id.fetch_add(1, Ordering::Relaxed).to_string();
                let (tx, rx) = mpsc::channel();
                routes.insert(id.clone(), tx);
                (id, rx)
            })
            .collect())
    }

    fn unregister(&self, ids: &[(String, Receiver<Response>)]) {
        if let Some(routes) = self.pending.lock().expect("pending lock").as_mut() {
            for (id, _) in ids {
                routes.remove(id);
            }
        }
    }

    fn send(&self, slots: &[(String, Receiver<Response>)], fragments: &[Fragment<'_>]) -> Result<(), EmbedError> {
        let mut buf = Vec::new();
        for ((id, _), f) in slots.iter().zip(fragments) {
            let req = Request {
                id: id.clone(),
                payload_b64: B64.encode(f.payload),
            };
            serde_json::to_writer(&mut buf, &req).expect("request serializes");
            buf.push(b'\n');
        }
        let mut w = self.writer.lock().expect("writer lock");
        w.write_all(&buf)
            .and_then(|_| w.flush())
            .map_err(|e| EmbedError::Failure(format!("write to embedder failed: {e}")))
    }

    fn collect(
        &self,
        slots: &[(String, Receiver<Response>)],
        deadline: Instant,
    ) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let mut out = Vec::with_capacity(slots.len());
        for (index, (_, rx)) in slots.iter().enumerate() {
            let wait = deadline.saturating_duration_since(Instant::now());
            let resp = match rx.recv_timeout(wait) {
                Ok(r) => r,
                Err(RecvTimeoutError::Timeout) => {
                    return Err(EmbedError::Failure(format!(
                        "timed out after {:?} waiting for embedder",
                        self.timeout
                    )))
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(EmbedError::Failure("embedder process has exited".into()))
                }
            };
            let v = self.check(resp).map_err(|e| EmbedError::Batch {
                index,
                source: Box::new(e),
            })?;
            out.push(v);
        }
        Ok(out)
    }

    fn check(&self, resp: Response) -> Result<EmbeddingVector, EmbedError> {
        if let Some(msg) = resp.error {
            return Err(EmbedError::Failure(msg));
        }
        let values = resp
            .embedding
            .ok_or_else(|| EmbedError::Failure("response has neither embedding nor error".into()))?;
        if values.len() != self.info.dim {
            return Err(EmbedError::DimensionMismatch {
                expected: self.info.dim,
                got: values.len(),
            });
        }
        EmbeddingVector::new(values)
            .ok_or_else(|| EmbedError::Failure("embedding contains non-finite values".into()))
    }
}

impl Embedder for ExternalEmbedder {
    fn info(&self) -> &EmbedderInfo {
        &self.info
    }

    fn embed(&self, fragment: &Fragment<'_>) -> Result<EmbeddingVector, EmbedError> {
        let mut v = self.embed_batch(std::slice::from_ref(fragment)).map_err(|e| match e {
            EmbedError::Batch { source, .. } => *source,
            other => other,
        })?;
        Ok(v.pop().expect("one response"))
    }

    /// All-or-nothing: any error or a missed deadline fails the whole batch.
    fn embed_batch(&self, fragments: &[Fragment<'_>]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if let Some(index) = fragments.iter().position(|f| f.payload.is_empty()) {
            return Err(EmbedError::Batch {
                index,
                source: Box::new(EmbedError::EmptyPayload(fragments[index].id.to_string())),
            });
        }
        if fragments.is_empty() {
            return Ok(Vec::new());
        }
        let deadline = Instant::now() + self.timeout;
        let slots = self.register(fragments.len())?;
        let result = self
            .send(&slots, fragments)
            .and_then(|_| self.collect(&slots, deadline));
        self.unregister(&slots);
        result
    }
}

impl Drop for ExternalEmbedder {
    fn drop(&mut self) {
        if let Some(child) = self.child.take() {
            let mut child = child.into_inner().unwrap_or_else(|p| p.into_inner());
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn read_loop<R: BufRead>(
    reader: R,
    handshake: Sender<Result<Handshake, String>>,
    pending: Pending,
) {
    let mut lines = reader.lines();
    let first = match lines.next() {
        Some(Ok(line)) => serde_json::from_str::<Handshake>(&line)
            .map_err(|e| format!("bad handshake {line:?}: {e}")),
        Some(Err(e)) => Err(format!("reading handshake: {e}")),
        None => Err("embedder closed its output before the handshake".into()),
    };
    let ok = first.is_ok();
    let _ = handshake.send(first);
    if ok {
        for line in lines {
            let Ok(line) = line else { break };
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Response>(&line) {
                Ok(resp) => {
                    let tx = pending
                        .lock()
                        .expect("pending lock")
                        .as_mut()
                        .and_then(|routes| routes.remove(&resp.id));
                    match tx {
                        Some(tx) => {
                            let _ = tx.send(resp);
                        }
                        None => log::warn!("embedder response for unknown id {:?}", resp.id),
                    }
                }
                Err(e) => log::warn!("unparseable embedder response: {e}"),
            }
        }
    }
    // Dropping the senders wakes every waiter with `Disconnected`.
    pending.lock().expect("pending lock").take();
}

/// Serves `embedder` over the NDJSON protocol until `input` reaches EOF.
pub fn serve_ndjson<E, R, W>(embedder: &E, input: R, mut output: W) -> std::io::Result<()>
where
    E: Embedder + ?Sized,
    R: BufRead,
    W: Write,
{
    let hs = Handshake {
        model_id: embedder.info().model_id.clone(),
        dim: embedder.info().dim,
    };
    serde_json::to_writer(&mut output, &hs)?;
    output.write_all(b"\n")?;
    output.flush()?;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match serde_json::from_str::<Request>(&line) {
            Ok(req) => match B64.decode(&req.payload_b64) {
                Ok(payload) => match embedder.embed(&Fragment::new(&req.id, &payload)) {
                    Ok(v) => Response {
                        id: req.id,
                        embedding: Some(v.into_inner()),
                        error: None,
                    },
                    Err(e) => Response {
                        id: req.id,
                        embedding: None,
                        error: Some(e.to_string()),
                    },
                },
                Err(e) => Response {
                    id: req.id,
                    embedding: None,
                    error: Some(format!("bad base64 payload: {e}")),
                },
            },
            Err(e) => Response {
                id: String::new(),
                embedding: None,
                error: Some(format!("bad request: {e}")),
            },
        };
        serde_json::to_writer(&mut output, &resp)?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::HashEmbedder;
    use std::io::{pipe, PipeReader, PipeWriter};

    fn wire() -> ((PipeReader, PipeWriter), (PipeReader, PipeWriter)) {
        let (to_server_r, to_server_w) = pipe().unwrap();
        let (to_client_r, to_client_w) = pipe().unwrap();
        ((to_server_r, to_client_w), (to_client_r, to_server_w))
    }

    fn builtin_server(dim: usize) -> ExternalEmbedder {
        let ((sr, sw), (cr, cw)) = wire();
        thread::spawn(move || {
            let e = HashEmbedder::new(dim, ModalityKind::ClinicalText);
            serve_ndjson(&e, BufReader::new(sr), sw).unwrap();
        });
        ExternalEmbedder::connect(cr, cw, ModalityKind::ClinicalText, Duration::from_secs(10)).unwrap()
    }

    /// Runs `respond` for each request line after writing `handshake`.
    fn scripted_server<F>(handshake: &str, timeout: Duration, respond: F) -> Result<ExternalEmbedder, EmbedError>
    where
        F: FnMut(Vec<Request>, &mut PipeWriter) + Send + 'static,
    {
        let ((sr, mut sw), (cr, cw)) = wire();
        let hs = handshake.to_string();
        let mut respond = respond;
        thread::spawn(move || {
            writeln!(sw, "{hs}").unwrap();
            let mut lines = BufReader::new(sr).lines();
            while let Some(Ok(line)) = lines.next() {
                let req: Request = serde_json::from_str(&line).unwrap();
                respond(vec![req], &mut sw);
            }
        });
        ExternalEmbedder::connect(cr, cw, ModalityKind::ClinicalText, timeout)
    }

    #[test]
    fn matches_in_process_embedder() {
        let client = builtin_server(32);
        assert_eq!(client.info().dim, 32);
        assert_eq!(client.info().model_id, HashEmbedder::MODEL_ID);
        let local = HashEmbedder::new(32, ModalityKind::ClinicalText);
        let payloads: Vec<Vec<u8>> = (0..20u32).map(|i| format!("chunk {i}").into_bytes()).collect();
        let frags: Vec<_> = payloads.iter().map(|p| Fragment::new("x", p)).collect();
        let remote = client.embed_batch(&frags).unwrap();
        for (f, r) in frags.iter().zip(&remote) {
            assert!(local.embed(f).unwrap().bit_eq(r));
        }
    }

    #[test]
    fn concurrent_callers_get_their_own_answers() {
        let client = Arc::new(builtin_server(8));
        let local = HashEmbedder::new(8, ModalityKind::ClinicalText);
        let handles: Vec<_> = (0..8)
            .map(|t| {
                let c = Arc::clone(&client);
                thread::spawn(move || {
                    (0..25)
                        .map(|i| {
                            let p = format!("{t}-{i}");
                            (p.clone(), c.embed(&Fragment::new("f", p.as_bytes())).unwrap())
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (p, v) in h.join().unwrap() {
                assert!(local.embed(&Fragment::new("f", p.as_bytes())).unwrap().bit_eq(&v));
            }
        }
    }

    #[test]
    fn out_of_order_responses_are_matched_by_id() {
        let ((sr, mut sw), (cr, cw)) = wire();
        thread::spawn(move || {
            writeln!(sw, r#"{{"model_id":"rev","dim":1}}"#).unwrap();
            let reqs: Vec<Request> = BufReader::new(sr)
                .lines()
                .take(4)
                .map(|l| serde_json::from_str(&l.unwrap()).unwrap())
                .collect();
            for r in reqs.iter().rev() {
                let value = B64.decode(&r.payload_b64).unwrap()[0] as f32;
                let resp = Response {
                    id: r.id.clone(),
                    embedding: Some(vec![value]),
                    error: None,
                };
                writeln!(sw, "{}", serde_json::to_string(&resp).unwrap()).unwrap();
            }
        });
        let client =
            ExternalEmbedder::connect(cr, cw, ModalityKind::ClinicalText, Duration::from_secs(10)).unwrap();
        let payloads = [[1u8], [2], [3], [4]];
        let frags: Vec<_> = payloads.iter().map(|p| Fragment::new("f", p)).collect();
        let got: Vec<f32> = client
            .embed_batch(&frags)
            .unwrap()
            .into_iter()
            .map(|v| v.as_slice()[0])
            .collect();
        assert_eq!(got, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn wrong_length_is_dimension_mismatch() {
        let client = scripted_server(r#"{"model_id":"m","dim":768}"#, Duration::from_secs(10), |reqs, w| {
            for r in reqs {
                let resp = Response {
                    id: r.id,
                    embedding: Some(vec![0.5; 512]),
                    error: None,
                };
                writeln!(w, "{}", serde_json::to_string(&resp).unwrap()).unwrap();
            }
        })
        .unwrap();
        let err = client.embed(&Fragment::new("f", b"abc")).unwrap_err();
        assert!(matches!(err, EmbedError::DimensionMismatch { expected: 768, got: 512 }));
    }

    #[test]
    fn error_response_is_failure() {
        let client = scripted_server(r#"{"model_id":"m","dim":2}"#, Duration::from_secs(10), |reqs, w| {
            for r in reqs {
                writeln!(w, r#"{{"id":"{}","error":"model exploded"}}"#, r.id).unwrap();
            }
        })
        .unwrap();
        let err = client.embed(&Fragment::new("f", b"abc")).unwrap_err();
        assert!(matches!(err, EmbedError::Failure(ref m) if m.contains("exploded")));
    }

    #[test]
    fn silent_peer_times_out() {
        let client =
            scripted_server(r#"{"model_id":"m","dim":2}"#, Duration::from_millis(150), |_, _| {}).unwrap();
        let t0 = Instant::now();
        let frags = [Fragment::new("a", b"1"), Fragment::new("b", b"2")];
        let err = client.embed_batch(&frags).unwrap_err();
        assert!(matches!(err, EmbedError::Failure(ref m) if m.contains("timed out")));
        assert!(t0.elapsed() < Duration::from_secs(5));
    }

    #[test]
    fn bad_handshake_is_rejected() {
        let err = scripted_server("not json", Duration::from_secs(5), |_, _| {}).unwrap_err();
        assert!(matches!(err, EmbedError::Failure(_)));
    }

    #[test]
    fn spawned_process_exit_is_reported() {
        // A peer that handshakes then exits without answering.
        let client = ExternalEmbedder::spawn(
            r#"echo '{"model_id":"m","dim":3}'"#,
            ModalityKind::ClinicalText,
            Duration::from_secs(10),
        )
        .unwrap();
        assert_eq!(client.info().dim, 3);
        let err = client.embed(&Fragment::new("f", b"x")).unwrap_err();
        assert!(matches!(err, EmbedError::Failure(_)));
    }
}
