//! Minimal static HTTP server for the inspector: `/` (the page), any file
//! under the assets directory, `/api/document` and `/api/health`.

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use nmt_core::interpret::RelevanceDocument;

use crate::ServeArgs;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("document {path}: {msg}")]
    Document { path: String, msg: String },
    #[error("{0}")]
    Io(#[from] io::Error),
}

const FALLBACK_PAGE: &str = r#"<!doctype html>
<html><head><meta charset="utf-8"><title>relevance inspector</title>
<style>body{font-family:sans-serif;margin:2em}pre{background:#f4f4f4;padding:1em;overflow:auto}</style>
</head><body><h1>relevance inspector</h1>
<p>No inspector bundle was given (<code>--assets</code>); the raw document follows.</p>
<pre id="doc">loading...</pre>
<script>
fetch('/api/document').then(r => r.json()).then(d => {
  document.getElementById('doc').textContent = JSON.stringify(d, null, 2);
}).catch(e => { document.getElementById('doc').textContent = 'error: ' + e; });
</script></body></html>
"#;

struct State {
    document: String,
    assets: Option<PathBuf>,
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") | Some("mjs") => "text/javascript; charset=utf-8",
        Some("css") => "text/css; charset=utf-8",
        Some("json") => "application/json",
        Some("wasm") => "application/wasm",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        _ => "application/octet-stream",
    }
}

fn respond(stream: &mut TcpStream, status: &str, ctype: &str, body: &[u8]) -> io::Result<()> {
    write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: {ctype}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    )?;
    stream.write_all(body)?;
    stream.flush()
}

/// Maps a request path inside the assets root, refusing `..` and absolute
/// components.
fn asset_path(root: &Path, request: &str) -> Option<PathBuf> {
    let rel = Path::new(request.trim_start_matches('/'));
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return None;
    }
    Some(root.join(rel))
}

fn handle(mut stream: TcpStream, state: &State) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    loop {
        let mut header = String::new();
        if reader.read_line(&mut header)? == 0 || header == "\r\n" || header == "\n" {
            break;
        }
    }
    let mut parts = request_line.split_whitespace();
    let (method, target) = (parts.next().unwrap_or(""), parts.next().unwrap_or("/"));
    let path = target.split('?').next().unwrap_or("/");
    if method != "GET" {
        return respond(&mut stream, "405 Method Not Allowed", "text/plain", b"method not allowed\n");
    }
    match path {
        "/api/health" => respond(&mut stream, "200 OK", "application/json", b"{\"ok\":true}"),
        "/api/document" => respond(&mut stream, "200 OK", "application/json", state.document.as_bytes()),
        "/" | "/index.html" => {
            let page = state
                .assets
                .as_ref()
                .and_then(|a| fs::read(a.join("index.html")).ok())
                .unwrap_or_else(|| FALLBACK_PAGE.as_bytes().to_vec());
            respond(&mut stream, "200 OK", "text/html; charset=utf-8", &page)
        }
        other => match state.assets.as_ref().and_then(|a| asset_path(a, other)) {
            Some(p) if p.is_file() => {
                let body = fs::read(&p)?;
                respond(&mut stream, "200 OK", content_type(&p), &body)
            }
            _ => respond(&mut stream, "404 Not Found", "text/plain", b"not found\n"),
        },
    }
}

pub fn serve(a: &ServeArgs) -> Result<(), ServeError> {
    let doc_err = |msg: String| ServeError::Document {
        path: a.document.display().to_string(),
        msg,
    };
    let text = fs::read_to_string(&a.document).map_err(|e| doc_err(e.to_string()))?;
    RelevanceDocument::from_json(&text).map_err(|e| doc_err(e.to_string()))?;
    let listener = TcpListener::bind((a.host.as_str(), a.port))?;
    let addr = listener.local_addr()?;
    println!("listening on http://{addr}");
    io::stdout().flush()?;
    let state = Arc::new(State {
        document: text,
        assets: a.assets.clone(),
    });
    for stream in listener.incoming() {
        let Ok(stream) = stream else { continue };
        let state = Arc::clone(&state);
        std::thread::spawn(move || {
            let _ = handle(stream, &state);
        });
    }
    Ok(())
}
