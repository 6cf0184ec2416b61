//! Offline stand-ins for the chat service: a scripted in-process
//! [`ChatApi`] and a minimal local HTTP server speaking the same wire
//! protocol as the real endpoint.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde_json::json;

use super::{ChatApi, ChatRequest, ChatResponse, LlmError};

/// A request as seen by the stub server.
#[derive(Debug, Clone)]
pub struct StubRequest {
    /// Zero-based arrival order.
    pub index: usize,
    pub path: String,
    pub body: serde_json::Value,
}

impl StubRequest {
    /// Content of the last message of a chat request.
    pub fn last_message(&self) -> &str {
        self.body["messages"]
            .as_array()
            .and_then(|m| m.last())
            .and_then(|m| m["content"].as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Clone)]
pub struct StubReply {
    pub status: u16,
    pub body: String,
}

impl StubReply {
    pub fn chat(content: &str) -> Self {
        Self {
            status: 200,
            body: json!({
                "choices": [{"message": {"role": "assistant", "content": content}}],
                "usage": {"prompt_tokens": 10, "completion_tokens": content.len() / 4},
            })
            .to_string(),
        }
    }

    pub fn embedding(vector: &[f64]) -> Self {
        Self {
            status: 200,
            body: json!({"data": [{"embedding": vector}]}).to_string(),
        }
    }

    pub fn status(status: u16, body: &str) -> Self {
        Self {
            status,
            body: body.to_string(),
        }
    }
}

type Handler = dyn Fn(&StubRequest) -> StubReply + Send + Sync;

/// Local HTTP server answering every request through a handler closure.
/// Serves one connection at a time and closes it after each response.
pub struct StubServer {
    addr: String,
    count: Arc<AtomicUsize>,
    requests: Arc<Mutex<Vec<StubRequest>>>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start<F>(handler: F) -> Self
    where
        F: Fn(&StubRequest) -> StubReply + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub server");
        let addr = listener.local_addr().expect("local addr").to_string();
        let count = Arc::new(AtomicUsize::new(0));
        let requests = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));
        let handler: Arc<Handler> = Arc::new(handler);
        let handle = {
            let (count, requests, stop) = (count.clone(), requests.clone(), stop.clone());
            std::thread::spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let index = count.load(Ordering::SeqCst);
                    if let Some(req) = serve_one(stream, index, handler.as_ref()) {
                        count.fetch_add(1, Ordering::SeqCst);
                        requests.lock().expect("poisoned").push(req);
                    }
                }
            })
        };
        Self {
            addr,
            count,
            requests,
            stop,
            handle: Some(handle),
        }
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn request_count(&self) -> usize {
        self.count.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<StubRequest> {
        self.requests.lock().expect("poisoned").clone()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(&self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve_one(stream: TcpStream, index: usize, handler: &Handler) -> Option<StubRequest> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line).ok()?;
    let path = request_line.split_whitespace().nth(1)?.to_string();
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).ok()? == 0 {
            return None;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                content_length = value.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body).ok()?;
    let body = serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null);
    let req = StubRequest { index, path, body };
    let reply = handler(&req);
    let mut stream = stream;
    let response = format!(
        "HTTP/1.1 {} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        reply.status,
        reply.body.len(),
        reply.body
    );
    stream.write_all(response.as_bytes()).ok()?;
    stream.flush().ok()?;
    Some(req)
}

type ChatFn = dyn Fn(usize, &ChatRequest) -> String + Send + Sync;
type EmbedFn = dyn Fn(&str) -> Vec<f64> + Send + Sync;

/// In-process scripted [`ChatApi`]. Never caches; counts every call.
pub struct ScriptedChat {
    chat_fn: Box<ChatFn>,
    embed_fn: Box<EmbedFn>,
    chat_calls: AtomicUsize,
    embed_calls: AtomicUsize,
    log: Mutex<Vec<ChatRequest>>,
}

impl ScriptedChat {
    /// `chat_fn` receives the zero-based call index and the request.
    pub fn new<F>(chat_fn: F) -> Self
    where
        F: Fn(usize, &ChatRequest) -> String + Send + Sync + 'static,
    {
        Self {
            chat_fn: Box::new(chat_fn),
            embed_fn: Box::new(|_| vec![1.0]),
            chat_calls: AtomicUsize::new(0),
            embed_calls: AtomicUsize::new(0),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn constant(text: &str) -> Self {
        let text = text.to_string();
        Self::new(move |_, _| text.clone())
    }

    /// Replies in order, repeating the last entry once exhausted.
    pub fn sequence(replies: Vec<String>) -> Self {
        Self::new(move |i, _| replies[i.min(replies.len() - 1)].clone())
    }

    pub fn with_embeddings<G>(mut self, embed_fn: G) -> Self
    where
        G: Fn(&str) -> Vec<f64> + Send + Sync + 'static,
    {
        self.embed_fn = Box::new(embed_fn);
        self
    }

    pub fn chat_calls(&self) -> usize {
        self.chat_calls.load(Ordering::SeqCst)
    }

    pub fn embed_calls(&self) -> usize {
        self.embed_calls.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().expect("poisoned").clone()
    }
}

impl ChatApi for ScriptedChat {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let i = self.chat_calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().expect("poisoned").push(request.clone());
        Ok(ChatResponse {
            content: (self.chat_fn)(i, request),
            prompt_tokens: 0,
            completion_tokens: 0,
            cached: false,
        })
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, LlmError> {
        if text.is_empty() {
            return Err(LlmError::InvalidRequest(
                "embedding input must be non-empty".into(),
            ));
        }
        self.embed_calls.fetch_add(1, Ordering::SeqCst);
        Ok((self.embed_fn)(text))
    }

    fn chat_model(&self) -> &str {
        "scripted"
    }
}
