//! HTTP endpoint the labeling UI talks to.
//!
//! `GET /manifest`, `GET /image/{id}`, `GET /annotations` and
//! `POST /annotations` (stored atomically, answered with 204). Requests
//! carrying an `Origin` other than the server's own are refused.

use std::fs;
use std::io::Read;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tiny_http::{Header, Method, Request, Response, Server};

use crate::dataset::{load_annotations, AnnotationDocument};
use crate::error::{Error, Result};

pub const DEFAULT_PORT: u16 = 8731;
/// Largest accepted annotation upload.
const MAX_BODY: u64 = 64 << 20;

#[derive(Serialize)]
struct Manifest {
    images: Vec<ManifestEntry>,
}

#[derive(Serialize)]
struct ManifestEntry {
    id: String,
    url: String,
    width: u32,
    height: u32,
}

pub struct AnnotatorServer {
    server: Server,
    annotations: PathBuf,
    base_dir: PathBuf,
    addr: SocketAddr,
}

fn percent_encode(s: &str) -> String {
    let mut out = String::new();
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || b"-._~".contains(&b) {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

fn percent_decode(s: &str) -> Option<String> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = std::str::from_utf8(bytes.get(i + 1..i + 3)?).ok()?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok()
}

fn header(name: &str, value: &str) -> Header {
    Header::from_bytes(name.as_bytes(), value.as_bytes()).expect("ASCII header")
}

type Reply = Response<std::io::Cursor<Vec<u8>>>;

fn text(status: u16, msg: impl Into<String>) -> Reply {
    Response::from_string(msg.into())
        .with_status_code(status)
        .with_header(header("Content-Type", "text/plain; charset=utf-8"))
}

fn bytes(body: Vec<u8>, content_type: &str) -> Reply {
    Response::from_data(body).with_header(header("Content-Type", content_type))
}

/// Write `data` next to `path` and rename it into place.
fn write_atomic(path: &Path, data: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "annotations.json".into());
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, data).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl AnnotatorServer {
    /// Bind on `127.0.0.1:port` (0 picks a free port). The annotation file
    /// must exist and validate; image paths resolve against its directory.
    pub fn bind(annotations: &Path, port: u16) -> Result<Self> {
        load_annotations(annotations)?;
        let server = Server::http(("127.0.0.1", port))
            .map_err(|e| Error::io(format!("127.0.0.1:{port}"), std::io::Error::other(e.to_string())))?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| Error::InvalidConfig("server is not bound to an IP address".into()))?;
        let base_dir = annotations
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(AnnotatorServer {
            server,
            annotations: annotations.to_path_buf(),
            base_dir,
            addr,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    fn origins(&self) -> [String; 2] {
        let p = self.addr.port();
        [format!("http://127.0.0.1:{p}"), format!("http://localhost:{p}")]
    }

    /// Serve requests until the process ends.
    pub fn run(&self) {
        for req in self.server.incoming_requests() {
            self.handle(req);
        }
    }

    /// Serve at most `n` requests, then return.
    pub fn serve_n(&self, n: usize) {
        for _ in 0..n {
            match self.server.recv() {
                Ok(req) => self.handle(req),
                Err(_) => return,
            }
        }
    }

    fn handle(&self, mut req: Request) {
        let origin = req
            .headers()
            .iter()
            .find(|h| h.field.equiv("Origin"))
            .map(|h| h.value.as_str().to_owned());
        let reply = match &origin {
            Some(o) if !self.origins().contains(o) => text(403, "cross-origin requests are not allowed\n"),
            _ => self.route(&mut req),
        };
        let reply = match origin {
            Some(o) if self.origins().contains(&o) => reply
                .with_header(header("Access-Control-Allow-Origin", &o))
                .with_header(header("Vary", "Origin")),
            _ => reply,
        };
        let _ = req.respond(reply);
    }

    fn route(&self, req: &mut Request) -> Reply {
        let url = req.url().split('?').next().unwrap_or("").to_owned();
        let result = match (req.method(), url.as_str()) {
            (Method::Get, "/manifest") => self.manifest(),
            (Method::Get, "/annotations") => fs::read(&self.annotations)
                .map(|b| bytes(b, "application/json"))
                .map_err(|e| Error::io(&self.annotations, e)),
            (Method::Post, "/annotations") => self.store(req),
            (Method::Get, path) if path.starts_with("/image/") => self.image(&path["/image/".len()..]),
            (_, "/manifest" | "/annotations") => return text(405, "method not allowed\n"),
            _ => return text(404, "not found\n"),
        };
        result.unwrap_or_else(|e| match e {
            Error::Parse { .. } | Error::Validation(_) | Error::Json(_) => text(400, format!("{e}\n")),
            Error::OutOfRange(_) => text(404, format!("{e}\n")),
            other => text(500, format!("{other}\n")),
        })
    }

    fn manifest(&self) -> Result<Reply> {
        let doc = load_annotations(&self.annotations)?;
        let m = Manifest {
            images: doc
                .images
                .iter()
                .map(|r| ManifestEntry {
                    id: r.id.clone(),
                    url: format!("/image/{}", percent_encode(&r.id)),
                    width: r.width,
                    height: r.height,
                })
                .collect(),
        };
        Ok(bytes(serde_json::to_vec(&m)?, "application/json"))
    }

    fn image(&self, raw_id: &str) -> Result<Reply> {
        let id = percent_decode(raw_id).ok_or_else(|| Error::OutOfRange(format!("bad image id '{raw_id}'")))?;
        let doc = load_annotations(&self.annotations)?;
        let rec = doc
            .images
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::OutOfRange(format!("no image '{id}'")))?;
        let path = rec.resolve_file(&self.base_dir);
        let data = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        let ct = match ext.as_deref() {
            Some("pgm") => "image/x-portable-graymap",
            _ => "image/png",
        };
        Ok(bytes(data, ct))
    }

    fn store(&self, req: &mut Request) -> Result<Reply> {
        let mut body = Vec::new();
        req.as_reader()
            .take(MAX_BODY + 1)
            .read_to_end(&mut body)
            .map_err(|e| Error::io(&self.annotations, e))?;
        if body.len() as u64 > MAX_BODY {
            return Ok(text(413, "annotation document too large\n"));
        }
        let text_body =
            String::from_utf8(body).map_err(|_| Error::Validation(vec!["body is not UTF-8".into()]))?;
        AnnotationDocument::parse(&text_body, &self.annotations)?;
        write_atomic(&self.annotations, text_body.as_bytes())?;
        Ok(Response::from_data(Vec::new()).with_status_code(204))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percent_round_trip() {
        for s in ["phantom_00001", "a b/c%d", "ünï"] {
            assert_eq!(percent_decode(&percent_encode(s)).as_deref(), Some(s));
        }
        assert_eq!(percent_decode("%zz"), None);
        assert_eq!(percent_decode("%4"), None);
    }
}
