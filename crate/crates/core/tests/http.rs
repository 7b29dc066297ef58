use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;

use roidet::cli::serve::AnnotatorServer;

struct Reply {
    status: u16,
    headers: Vec<(String, String)>,
    body: Vec<u8>,
}

impl Reply {
    fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

fn request(addr: SocketAddr, method: &str, path: &str, extra: &[(&str, &str)], body: &[u8]) -> Reply {
    let mut s = TcpStream::connect(addr).unwrap();
    let mut head = format!(
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\nContent-Length: {}\r\n",
        body.len()
    );
    for (k, v) in extra {
        head.push_str(&format!("{k}: {v}\r\n"));
    }
    head.push_str("\r\n");
    s.write_all(head.as_bytes()).unwrap();
    s.write_all(body).unwrap();
    let mut raw = Vec::new();
    s.read_to_end(&mut raw).unwrap();
    let split = raw.windows(4).position(|w| w == b"\r\n\r\n").unwrap();
    let text = String::from_utf8_lossy(&raw[..split]).into_owned();
    let mut lines = text.split("\r\n");
    let status = lines.next().unwrap().split(' ').nth(1).unwrap().parse().unwrap();
    let headers = lines
        .filter_map(|l| l.split_once(':'))
        .map(|(k, v)| (k.trim().to_owned(), v.trim().to_owned()))
        .collect();
    Reply {
        status,
        headers,
        body: raw[split + 4..].to_vec(),
    }
}

fn dataset(dir: &Path) -> PathBuf {
    let o = Command::new(env!("CARGO_BIN_EXE_roidet"))
        .args(["synth", "--n", "3", "--long-side", "128", "--out"])
        .arg(dir)
        .output()
        .unwrap();
    assert!(o.status.success());
    dir.join("annotations.json")
}

/// Serve `n` requests on a background thread.
fn spawn(ann: &Path, n: usize) -> (SocketAddr, thread::JoinHandle<()>) {
    let server = AnnotatorServer::bind(ann, 0).unwrap();
    let addr = server.addr();
    (addr, thread::spawn(move || server.serve_n(n)))
}

#[test]
fn manifest_lists_every_image_with_a_working_url() {
    let tmp = tempfile::tempdir().unwrap();
    let ann = dataset(tmp.path());
    let (addr, h) = spawn(&ann, 5);
    let r = request(addr, "GET", "/manifest", &[], b"");
    assert_eq!(r.status, 200);
    assert!(r.header("Content-Type").unwrap().starts_with("application/json"));
    let m: serde_json::Value = serde_json::from_slice(&r.body).unwrap();
    let images = m["images"].as_array().unwrap();
    assert_eq!(images.len(), 3);
    let url = images[0]["url"].as_str().unwrap();
    let img = request(addr, "GET", url, &[], b"");
    assert_eq!(img.status, 200);
    assert_eq!(img.header("Content-Type"), Some("image/png"));
    let id = images[0]["id"].as_str().unwrap();
    assert_eq!(img.body, std::fs::read(tmp.path().join("images").join(format!("{id}.png"))).unwrap());
    assert_eq!(images[0]["width"], 128);
    assert_eq!(request(addr, "GET", "/image/nope", &[], b"").status, 404);
    assert_eq!(request(addr, "DELETE", "/annotations", &[], b"").status, 405);
    assert_eq!(request(addr, "GET", "/elsewhere", &[], b"").status, 404);
    h.join().unwrap();
}

#[test]
fn posted_annotations_round_trip_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let ann = dataset(tmp.path());
    let (addr, h) = spawn(&ann, 4);
    let original = request(addr, "GET", "/annotations", &[], b"");
    assert_eq!(original.status, 200);
    assert_eq!(original.body, std::fs::read(&ann).unwrap());

    // drop one ROI and reformat compactly; the exact bytes must be kept
    let mut doc: serde_json::Value = serde_json::from_slice(&original.body).unwrap();
    doc["images"][0]["rois"].as_array_mut().unwrap().truncate(1);
    let edited = serde_json::to_vec(&doc).unwrap();
    let post = request(addr, "POST", "/annotations", &[("Content-Type", "application/json")], &edited);
    assert_eq!(post.status, 204);
    assert!(post.body.is_empty());
    assert_eq!(std::fs::read(&ann).unwrap(), edited);
    assert_eq!(request(addr, "GET", "/annotations", &[], b"").body, edited);

    // invalid documents leave the file untouched
    let bad = request(addr, "POST", "/annotations", &[], br#"{"images": [{"id": 3}]}"#);
    assert_eq!(bad.status, 400);
    assert_eq!(std::fs::read(&ann).unwrap(), edited);
    h.join().unwrap();
}

#[test]
fn foreign_origins_are_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let ann = dataset(tmp.path());
    let (addr, h) = spawn(&ann, 3);
    let foreign = request(addr, "GET", "/manifest", &[("Origin", "http://evil.example")], b"");
    assert_eq!(foreign.status, 403);
    let before = std::fs::read(&ann).unwrap();
    let post = request(addr, "POST", "/annotations", &[("Origin", "http://evil.example")], b"{}");
    assert_eq!(post.status, 403);
    assert_eq!(std::fs::read(&ann).unwrap(), before);
    let own = format!("http://127.0.0.1:{}", addr.port());
    let same = request(addr, "GET", "/manifest", &[("Origin", &own)], b"");
    assert_eq!(same.status, 200);
    assert_eq!(same.header("Access-Control-Allow-Origin"), Some(own.as_str()));
    h.join().unwrap();
}

#[test]
fn binary_announces_its_address() {
    let tmp = tempfile::tempdir().unwrap();
    let ann = dataset(tmp.path());
    let mut child = Command::new(env!("CARGO_BIN_EXE_roidet"))
        .args(["serve-annotator", "--port", "0", "--annotations"])
        .arg(&ann)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.trim().rsplit(' ').next().unwrap().to_owned();
    let addr: SocketAddr = url.trim_start_matches("http://").parse().unwrap();
    let r = request(addr, "GET", "/manifest", &[], b"");
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(line.starts_with("serving "), "{line}");
    assert_eq!(r.status, 200);
}
