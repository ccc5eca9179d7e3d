// SPDX-License-Identifier: Apache-2.0

//! DockerEngine against a scripted engine on a unix socket.

use std::io::{BufRead, BufReader, Read, Write};
use std::os::unix::net::UnixListener;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};
use vemul::runtime::{ContainerEngine, ContainerState, DockerEngine, EngineConfig, RuntimeError};
use vemul::topology::{IpConfig, NodeSpec};

type Log = Arc<Mutex<Vec<(String, String, Value)>>>;

fn route(method: &str, path: &str, body: &Value, cpu: &mut u64) -> (u16, Value) {
    let path = path.strip_prefix("/v1.41").unwrap_or(path);
    match (method, path) {
        ("GET", "/version") => (200, json!({"ApiVersion": "1.41", "Version": "24.0"})),
        ("POST", p) if p.starts_with("/containers/create") => {
            if body["Image"] == "absent:none" {
                (404, json!({"message": "No such image: absent:none"}))
            } else {
                (201, json!({"Id": "c1", "Warnings": []}))
            }
        }
        ("POST", "/containers/c1/start" | "/containers/c1/pause" | "/containers/c1/unpause") => {
            (204, Value::Null)
        }
        ("GET", "/containers/c1/json") => (
            200,
            json!({"Config": {"Hostname": "h1"}, "State": {"Pid": 4242, "Running": true, "Paused": false}, "HostConfig": {}}),
        ),
        ("GET", p) if p.starts_with("/containers/c1/stats") => {
            *cpu += 50_000_000;
            (
                200,
                json!({"cpu_stats": {"cpu_usage": {"total_usage": *cpu}}, "memory_stats": {"usage": 8_000_000, "stats": {"inactive_file": 1_000_000}}}),
            )
        }
        ("GET", p) if p.starts_with("/containers/json") => (
            200,
            json!([
                {"Id": "c1", "State": "running", "Labels": {"vemul.owner": "run1", "vemul.node": "h1", "vemul.kind": "host"}},
                {"Id": "c2", "State": "running", "Labels": {"vemul.owner": "other", "vemul.node": "h9", "vemul.kind": "host"}},
                {"Id": "zz", "State": "running", "Labels": {}}
            ]),
        ),
        ("DELETE", p) if p.starts_with("/containers/c1") => (204, Value::Null),
        _ => (404, json!({"message": format!("unrouted {method} {path}")})),
    }
}

fn serve(socket: &Path) -> Log {
    let listener = UnixListener::bind(socket).unwrap();
    let log: Log = Arc::default();
    let seen = log.clone();
    thread::spawn(move || {
        let mut cpu = 0u64;
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            if reader.read_line(&mut line).unwrap_or(0) == 0 {
                continue;
            }
            let mut parts = line.split_whitespace();
            let method = parts.next().unwrap_or_default().to_string();
            let path = parts.next().unwrap_or_default().to_string();
            let mut len = 0usize;
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                if h.trim().is_empty() {
                    break;
                }
                if let Some((k, v)) = h.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap();
                    }
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
            let (status, reply) = route(&method, &path, &body, &mut cpu);
            seen.lock().unwrap().push((method, path, body));
            let payload = if reply.is_null() {
                String::new()
            } else {
                reply.to_string()
            };
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
        }
    });
    log
}

fn engine(dir: &Path) -> (DockerEngine, Log) {
    let socket = dir.join("engine.sock");
    let log = serve(&socket);
    let cfg = EngineConfig {
        socket,
        request_timeout: Duration::from_secs(5),
        pull_missing: false,
        ..EngineConfig::default()
    };
    (DockerEngine::connect(cfg).unwrap(), log)
}

#[test]
fn lifecycle_against_scripted_engine() {
    let dir = tempfile::tempdir().unwrap();
    let (engine, log) = engine(dir.path());
    assert_eq!(
        engine.api_version(),
        "1.41",
        "negotiates down to the server's version"
    );

    let spec = NodeSpec::host("h1", "10.0.0.1/24".parse::<IpConfig>().unwrap());
    let mut h = engine.create_container(&spec, "run1").unwrap();
    assert_eq!((h.pid, h.state), (Some(4242), ContainerState::Running));

    let snap = engine.sample_stats(&h).unwrap();
    assert_eq!(snap.memory_bytes, 7_000_000);
    assert!(snap.cpu_percent > 0.0);

    engine.pause(&mut h).unwrap();
    assert_eq!(h.state, ContainerState::Paused);
    assert!(matches!(
        engine.pause(&mut h),
        Err(RuntimeError::InvalidState { .. })
    ));
    engine.resume(&mut h).unwrap();

    let managed = engine.list_managed(Some("run1")).unwrap();
    assert_eq!(
        managed.len(),
        1,
        "foreign and unlabelled containers are filtered"
    );
    assert_eq!(managed[0].node_name, "h1");

    engine.destroy_container(&mut h).unwrap();
    assert_eq!(h.state, ContainerState::Removed);
    engine.destroy_container(&mut h).unwrap();

    let log = log.lock().unwrap();
    let create = log
        .iter()
        .find(|(m, p, _)| m == "POST" && p.contains("/containers/create"))
        .unwrap();
    assert!(
        create
            .1
            .starts_with("/v1.41/containers/create?name=vemul-run1-h1"),
        "{}",
        create.1
    );
    assert_eq!(create.2["HostConfig"]["NetworkMode"], "none");
    assert_eq!(create.2["Labels"]["vemul.owner"], "run1");
    assert_eq!(
        log.iter().filter(|(m, _, _)| m == "DELETE").count(),
        1,
        "second destroy is a no-op"
    );
}

#[test]
fn missing_image_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (engine, _log) = engine(dir.path());
    let spec = NodeSpec::whitebox("sw1").with_image("absent:none");
    match engine.create_container(&spec, "run1") {
        Err(RuntimeError::ImageNotFound(i)) => assert_eq!(i, "absent:none"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn absent_socket_is_unreachable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = EngineConfig {
        socket: dir.path().join("nothing.sock"),
        ..EngineConfig::default()
    };
    assert!(matches!(
        DockerEngine::connect(cfg),
        Err(RuntimeError::EngineUnreachable(_))
    ));
}
