#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use rankprompt_cli::config::{BackendKind, RunConfig};

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(rel)
}

pub fn sessions(domain: &str) -> PathBuf {
    fixture(&format!("sessions/{domain}.jsonl"))
}

/// Mock run configuration matching the shipped example config.
pub fn mock_config(script: &str) -> RunConfig {
    let mut config = RunConfig {
        backend: BackendKind::Mock,
        seed: 7,
        steps: 5,
        beam: 3,
        ..RunConfig::default()
    };
    config.paths.mock_script = Some(fixture(&format!("mock/{script}")));
    config
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Chat-completions endpoint that answers every optimizer and fusion request
/// type deterministically from the prompt text.
pub struct FakeLlm {
    pub base_url: String,
    pub hits: Arc<AtomicUsize>,
}

impl FakeLlm {
    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.hits.store(0, Ordering::SeqCst);
    }
}

fn answer(prompt: &str) -> String {
    if prompt.contains("Generate 10 different prompts") {
        let items: Vec<String> = (0..10)
            .map(|i| format!("\"Hybrid H{i:02}: rank by what continues the session\""))
            .collect();
        return format!("[{}]", items.join(", "));
    }
    if prompt.contains("Wrap each reason with") {
        return "<START>It ignores recency.<END>".into();
    }
    if prompt.contains("please write one improved prompt") {
        return "<START>Refined: rank by recency of interest.<END>".into();
    }
    if prompt.contains("Generate a variation") {
        return "Variant: order by session continuation.".into();
    }
    let candidates = prompt
        .lines()
        .find(|l| l.starts_with("Candidate item set:"))
        .unwrap_or_default();
    let n = candidates.matches(":\"").count().max(1);
    let shift = prompt.len() % n;
    let order: Vec<String> = (0..n).map(|i| ((i + shift) % n).to_string()).collect();
    format!("[{}]", order.join(","))
}

pub fn fake_llm() -> FakeLlm {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base_url = format!("http://{}/v1", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let counter = counter.clone();
            thread::spawn(move || {
                let mut writer = stream.try_clone().unwrap();
                let mut reader = BufReader::new(stream);
                let mut length = 0;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap();
                    }
                }
                let mut body = vec![0; length];
                if reader.read_exact(&mut body).is_err() {
                    return;
                }
                counter.fetch_add(1, Ordering::SeqCst);
                let request: serde_json::Value = serde_json::from_slice(&body).unwrap_or_default();
                let prompt = request["messages"][0]["content"]
                    .as_str()
                    .unwrap_or_default();
                let text = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": answer(prompt)}}]})
                    .to_string();
                let head = format!(
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                    text.len()
                );
                let _ = writer.write_all(head.as_bytes());
                let _ = writer.write_all(text.as_bytes());
            });
        }
    });
    FakeLlm { base_url, hits }
}
