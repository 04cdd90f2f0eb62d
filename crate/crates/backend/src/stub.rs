//! Minimal local chat-completion server for tests and offline runs.
//!
//! Each connection carries one request and is closed after the reply.
//! Scripted replies are consumed first, one per request; afterwards every
//! request is answered with status 200 and the responder's text.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde_json::json;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StubReply {
    Status(u16),
    /// Sleep before answering normally.
    Delay(Duration),
}

type Responder = dyn Fn(&str) -> String + Send + Sync;

struct Shared {
    script: Mutex<VecDeque<StubReply>>,
    responder: Box<Responder>,
    requests: AtomicU64,
    last_auth: Mutex<Option<String>>,
    stop: AtomicBool,
}

pub struct StubServer {
    addr: std::net::SocketAddr,
    shared: Arc<Shared>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Starts on an ephemeral localhost port. `responder` maps the request
    /// body to the assistant message content.
    pub fn start<F>(script: Vec<StubReply>, responder: F) -> Self
    where
        F: Fn(&str) -> String + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub server");
        let addr = listener.local_addr().expect("stub address");
        let shared = Arc::new(Shared {
            script: Mutex::new(script.into()),
            responder: Box::new(responder),
            requests: AtomicU64::new(0),
            last_auth: Mutex::new(None),
            stop: AtomicBool::new(false),
        });
        let s = Arc::clone(&shared);
        let handle = thread::spawn(move || {
            for stream in listener.incoming() {
                if s.stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let s = Arc::clone(&s);
                thread::spawn(move || {
                    let _ = handle(stream, &s);
                });
            }
        });
        Self {
            addr,
            shared,
            handle: Some(handle),
        }
    }

    pub fn url(&self) -> String {
        format!("http://{}/v1/chat/completions", self.addr)
    }

    /// Requests received so far.
    pub fn requests(&self) -> u64 {
        self.shared.requests.load(Ordering::SeqCst)
    }

    pub fn last_authorization(&self) -> Option<String> {
        self.shared.last_auth.lock().unwrap().clone()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn handle(stream: TcpStream, s: &Shared) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    if reader.read_line(&mut line)? == 0 {
        return Ok(());
    }
    let mut content_length = 0usize;
    let mut auth = None;
    loop {
        line.clear();
        reader.read_line(&mut line)?;
        let header = line.trim_end();
        if header.is_empty() {
            break;
        }
        if let Some((name, value)) = header.split_once(':') {
            let name = name.trim().to_ascii_lowercase();
            if name == "content-length" {
                content_length = value.trim().parse().unwrap_or(0);
            } else if name == "authorization" {
                auth = Some(value.trim().to_string());
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    s.requests.fetch_add(1, Ordering::SeqCst);
    *s.last_auth.lock().unwrap() = auth;

    let scripted = s.script.lock().unwrap().pop_front();
    let (status, payload) = match scripted {
        Some(StubReply::Status(code)) if code != 200 => (code, json!({"error": {"message": "scripted"}}).to_string()),
        other => {
            if let Some(StubReply::Delay(d)) = other {
                thread::sleep(d);
            }
            let text = (s.responder)(&String::from_utf8_lossy(&body));
            let v = json!({
                "id": "stub",
                "object": "chat.completion",
                "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}]
            });
            (200, v.to_string())
        }
    };
    let mut out = stream;
    write!(
        out,
        "HTTP/1.1 {status} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        if status == 200 { "OK" } else { "Error" },
        payload.len()
    )?;
    out.flush()
}
