#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use kperm_core::dataset::{synth_fixture, Dataset};
use kperm_core::generation::ChatClientConfig;
use kperm_core::pipeline::{Engine, PipelineConfig};

#[derive(Debug, Clone)]
pub struct Request {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl Request {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

type Handler = dyn Fn(usize, &Request) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 server for chat-completion tests. Every request is
/// answered by `handler(request_number, request)` and the connection is
/// closed afterwards.
pub struct MockServer {
    addr: SocketAddr,
    requests: Arc<Mutex<Vec<Request>>>,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start(handler: impl Fn(usize, &Request) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind mock server");
        let addr = listener.local_addr().unwrap();
        let requests = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));
        let handler: Arc<Handler> = Arc::new(handler);
        let counter = Arc::new(AtomicUsize::new(0));
        let accept = {
            let (requests, stop) = (requests.clone(), stop.clone());
            std::thread::spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(conn) = conn else { continue };
                    let (requests, handler, counter) = (requests.clone(), handler.clone(), counter.clone());
                    std::thread::spawn(move || serve(conn, &requests, &*handler, &counter));
                }
            })
        };
        Self {
            addr,
            requests,
            stop,
            accept: Some(accept),
        }
    }

    /// Base URL to use as the client endpoint.
    pub fn url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn requests(&self) -> Vec<Request> {
        self.requests.lock().unwrap().clone()
    }

    pub fn hits(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

fn serve(conn: TcpStream, log: &Mutex<Vec<Request>>, handler: &Handler, counter: &AtomicUsize) {
    let mut reader = BufReader::new(conn.try_clone().unwrap());
    let mut line = String::new();
    if reader.read_line(&mut line).unwrap_or(0) == 0 {
        return;
    }
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or("").to_string();
    let path = parts.next().unwrap_or("").to_string();
    let mut headers = Vec::new();
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h).unwrap_or(0) == 0 {
            return;
        }
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            headers.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    let len = headers
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
        .and_then(|(_, v)| v.parse::<usize>().ok())
        .unwrap_or(0);
    let mut body = vec![0u8; len];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let req = Request {
        method,
        path,
        headers,
        body: String::from_utf8_lossy(&body).into_owned(),
    };
    let n = counter.fetch_add(1, Ordering::SeqCst);
    log.lock().unwrap().push(req.clone());
    let (status, payload) = handler(n, &req);
    let reply = format!(
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
    let mut conn = conn;
    let _ = conn.write_all(reply.as_bytes());
    let _ = conn.flush();
}

/// A well-formed chat-completion response carrying `content`.
pub fn chat_ok(content: &str) -> String {
    serde_json::json!({
        "id": "cmpl-1",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}]
    })
    .to_string()
}

/// Content of the last user message in a request body.
pub fn last_user_content(body: &str) -> String {
    let v: serde_json::Value = serde_json::from_str(body).expect("request body is JSON");
    v["messages"]
        .as_array()
        .expect("messages array")
        .iter()
        .rev()
        .find(|m| m["role"] == "user")
        .and_then(|m| m["content"].as_str())
        .expect("a user message")
        .to_string()
}

/// The embedded reference answer when the prompt has one, otherwise the
/// whole user message.
pub fn echo_reference(body: &str) -> String {
    let content = last_user_content(body);
    match content.split_once("Reference answer: ") {
        Some((_, rest)) => rest.split("\n\n").next().unwrap_or("").to_string(),
        None => content,
    }
}

/// Echo server: replies with the embedded reference answer.
pub fn echo_server() -> MockServer {
    MockServer::start(|_, req| (200, chat_ok(&echo_reference(&req.body))))
}

/// Client settings pointed at `url` with short backoff.
pub fn client_config(url: &str) -> ChatClientConfig {
    ChatClientConfig {
        endpoint: url.to_string(),
        timeout_secs: 10.0,
        backoff_base_ms: 20,
        backoff_max_ms: 100,
        ..ChatClientConfig::default()
    }
}

/// The seeded planted-knowledge fixture used across the suites.
pub fn planted(n_dialogs: usize) -> Dataset {
    synth_fixture(7, n_dialogs, 5, 3 * n_dialogs)
        .expect("fixture")
        .into_dataset()
        .expect("consistent fixture")
}

pub fn engine_with(cfg: PipelineConfig, ds: &Dataset) -> Engine {
    Engine::new(cfg, ds.corpus.passages().to_vec()).expect("engine")
}

pub fn engine(ds: &Dataset) -> Engine {
    engine_with(PipelineConfig::default(), ds)
}
