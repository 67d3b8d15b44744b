//! Fake container engine for tests: speaks enough of the engine HTTP API over a
//! Unix socket to run jobs as local processes, and counts what it created.

#![allow(dead_code)]

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::os::unix::process::CommandExt;
use std::process::{Command, Stdio};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;

use groundloop_core::sandbox::DockerClient;
use serde_json::{json, Value};

#[derive(Default)]
pub struct Container {
    spec: Value,
    dir: Option<tempfile::TempDir>,
    pid: Option<i32>,
    exit: Option<i64>,
    killed: bool,
    stdout: Vec<u8>,
    stderr: Vec<u8>,
}

#[derive(Default)]
pub struct Engine {
    pub containers: Mutex<HashMap<String, Container>>,
    pub exited: Condvar,
    pub images: Mutex<Vec<String>>,
    pub next: Mutex<u32>,
    pub created: Mutex<u32>,
}

struct Request {
    method: String,
    path: String,
    body: Vec<u8>,
}

fn read_request(stream: &mut UnixStream) -> Request {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap().to_string();
    let path = parts.next().unwrap().to_string();
    let mut len = 0;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).unwrap();
        if h == "\r\n" {
            break;
        }
        if let Some(v) = h.to_ascii_lowercase().strip_prefix("content-length:") {
            len = v.trim().parse().unwrap();
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).unwrap();
    Request { method, path, body }
}

fn respond(stream: &mut UnixStream, status: u16, body: &[u8], chunked: bool) {
    let mut out = format!("HTTP/1.1 {status} X\r\nConnection: close\r\n").into_bytes();
    if chunked {
        out.extend_from_slice(b"Transfer-Encoding: chunked\r\n\r\n");
        for part in body.chunks(7) {
            out.extend_from_slice(format!("{:x}\r\n", part.len()).as_bytes());
            out.extend_from_slice(part);
            out.extend_from_slice(b"\r\n");
        }
        out.extend_from_slice(b"0\r\n\r\n");
    } else {
        out.extend_from_slice(format!("Content-Length: {}\r\n\r\n", body.len()).as_bytes());
        out.extend_from_slice(body);
    }
    let _ = stream.write_all(&out);
}

fn frames(kind: u8, data: &[u8]) -> Vec<u8> {
    let mut out = vec![kind, 0, 0, 0];
    out.extend_from_slice(&(data.len() as u32).to_be_bytes());
    out.extend_from_slice(data);
    out
}

fn handle(engine: Arc<Engine>, mut stream: UnixStream) {
    let req = read_request(&mut stream);
    let path = req.path.strip_prefix("/v1.41").unwrap_or(&req.path).to_string();
    let (route, _query) = path.split_once('?').unwrap_or((&path, ""));
    let segs: Vec<&str> = route.trim_start_matches('/').split('/').collect();
    match (req.method.as_str(), segs.as_slice()) {
        ("GET", ["_ping"]) => respond(&mut stream, 200, b"OK", false),
        ("POST", ["images", "create"]) => {
            engine.images.lock().unwrap().push("python:3.10-slim".into());
            respond(&mut stream, 200, b"{}", true)
        }
        ("POST", ["containers", "create"]) => {
            let spec: Value = serde_json::from_slice(&req.body).unwrap();
            let image = spec["Image"].as_str().unwrap().to_string();
            if !engine.images.lock().unwrap().contains(&image) {
                return respond(&mut stream, 404, br#"{"message":"No such image"}"#, false);
            }
            let mut n = engine.next.lock().unwrap();
            *n += 1;
            *engine.created.lock().unwrap() += 1;
            let id = format!("c{n}");
            engine.containers.lock().unwrap().insert(id.clone(), Container { spec, ..Container::default() });
            respond(&mut stream, 201, json!({ "Id": id }).to_string().as_bytes(), false)
        }
        ("PUT", ["containers", id, "archive"]) => {
            let dir = tempfile::tempdir().unwrap();
            tar::Archive::new(req.body.as_slice()).unpack(dir.path()).unwrap();
            engine.containers.lock().unwrap().get_mut(*id).unwrap().dir = Some(dir);
            respond(&mut stream, 200, b"", false)
        }
        ("POST", ["containers", id, "start"]) => {
            let (cmd, cwd) = {
                let map = engine.containers.lock().unwrap();
                let c = &map[*id];
                let cmd: Vec<String> = serde_json::from_value(c.spec["Cmd"].clone()).unwrap();
                (cmd, c.dir.as_ref().unwrap().path().join("workspace"))
            };
            let mut child = Command::new(&cmd[0])
                .args(&cmd[1..])
                .current_dir(cwd)
                .process_group(0)
                .stdout(Stdio::piped())
                .stderr(Stdio::piped())
                .spawn()
                .unwrap();
            engine.containers.lock().unwrap().get_mut(*id).unwrap().pid = Some(child.id() as i32);
            let id = id.to_string();
            let eng = engine.clone();
            thread::spawn(move || {
                let mut out = Vec::new();
                let mut err = Vec::new();
                child.stdout.take().unwrap().read_to_end(&mut out).unwrap();
                child.stderr.take().unwrap().read_to_end(&mut err).unwrap();
                let status = child.wait().unwrap();
                let mut map = eng.containers.lock().unwrap();
                let c = map.get_mut(&id).unwrap();
                c.exit = Some(status.code().map(i64::from).unwrap_or(137));
                c.stdout = out;
                c.stderr = err;
                eng.exited.notify_all();
            });
            respond(&mut stream, 204, b"", false)
        }
        ("POST", ["containers", id, "wait"]) => {
            let mut map = engine.containers.lock().unwrap();
            while map[*id].exit.is_none() {
                map = engine.exited.wait(map).unwrap();
            }
            let code = map[*id].exit.unwrap();
            drop(map);
            respond(&mut stream, 200, json!({ "StatusCode": code }).to_string().as_bytes(), true)
        }
        ("POST", ["containers", id, "kill"]) => {
            let mut map = engine.containers.lock().unwrap();
            let c = map.get_mut(*id).unwrap();
            c.killed = true;
            if let Some(pid) = c.pid {
                let _ = Command::new("kill").args(["-9", "--", &format!("-{pid}")]).status();
            }
            respond(&mut stream, 204, b"", false)
        }
        ("GET", ["containers", id, "json"]) => {
            let map = engine.containers.lock().unwrap();
            let c = &map[*id];
            let state = json!({ "State": { "ExitCode": c.exit.unwrap_or(0), "OOMKilled": false } });
            respond(&mut stream, 200, state.to_string().as_bytes(), false)
        }
        ("GET", ["containers", id, "logs"]) => {
            let map = engine.containers.lock().unwrap();
            let c = &map[*id];
            let mut body = frames(1, &c.stdout);
            body.extend(frames(2, &c.stderr));
            respond(&mut stream, 200, &body, true)
        }
        ("DELETE", ["containers", id]) => {
            engine.containers.lock().unwrap().remove(*id);
            respond(&mut stream, 204, b"", false)
        }
        ("GET", ["containers", "json"]) => {
            let ids: Vec<Value> = engine
                .containers
                .lock()
                .unwrap()
                .keys()
                .map(|k| json!({ "Id": k }))
                .collect();
            respond(&mut stream, 200, Value::Array(ids).to_string().as_bytes(), false)
        }
        _ => respond(&mut stream, 404, br#"{"message":"unknown route"}"#, false),
    }
}

pub fn start_engine(with_image: bool) -> (Arc<Engine>, tempfile::TempDir, DockerClient) {
    let dir = tempfile::tempdir().unwrap();
    let sock = dir.path().join("engine.sock");
    let listener = UnixListener::bind(&sock).unwrap();
    let engine = Arc::new(Engine::default());
    if with_image {
        engine.images.lock().unwrap().push("python:3.10-slim".into());
    }
    let eng = engine.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let eng = eng.clone();
            thread::spawn(move || handle(eng, stream.unwrap()));
        }
    });
    (engine, dir, DockerClient::new(sock))
}
