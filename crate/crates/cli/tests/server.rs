mod common;

use std::net::SocketAddr;

use drivecoach_cli::protocol::replay;
use futures_util::{SinkExt, StreamExt};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio_tungstenite::tungstenite::Message;

async fn start() -> SocketAddr {
    let (tx, rx) = tokio::sync::oneshot::channel();
    let teacher = common::teacher();
    tokio::spawn(async move {
        drivecoach_cli::server::serve(teacher, common::policy(), "127.0.0.1:0".parse().unwrap(), |a| {
            tx.send(a).unwrap()
        })
        .await
        .unwrap();
    });
    rx.await.unwrap()
}

async fn session(addr: SocketAddr, frames: Vec<String>) -> Vec<String> {
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/ws")).await.unwrap();
    let mut out = Vec::new();
    for f in frames {
        ws.send(Message::text(f)).await.unwrap();
    }
    while let Some(msg) = ws.next().await {
        match msg.unwrap() {
            Message::Text(t) => out.push(t.to_string()),
            Message::Close(_) => break,
            _ => {}
        }
    }
    out
}

async fn healthz(addr: SocketAddr) -> serde_json::Value {
    let mut s = tokio::net::TcpStream::connect(addr).await.unwrap();
    s.write_all(b"GET /healthz HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").await.unwrap();
    let mut buf = String::new();
    s.read_to_string(&mut buf).await.unwrap();
    assert!(buf.starts_with("HTTP/1.1 200"), "{buf}");
    serde_json::from_str(buf.split("\r\n\r\n").nth(1).unwrap()).unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_sessions_match_offline_replay() {
    let addr = start().await;
    let before = healthz(addr).await;
    let teacher = common::teacher();
    assert_eq!(before["model_hash"], teacher.model_hash());
    assert_eq!(before["action_set"].as_array().unwrap().len(), 5);

    let a = common::biased_stream(0.6, 1);
    let b = common::biased_stream(0.4, 2);
    let expect_a = replay(teacher.clone(), common::policy(), a.iter().map(String::as_str));
    let expect_b = replay(teacher, common::policy(), b.iter().map(String::as_str));
    assert_ne!(expect_a, expect_b);

    let (got_a, got_b) = tokio::join!(session(addr, a), session(addr, b));
    assert_eq!(got_a, expect_a);
    assert_eq!(got_b, expect_b);
    assert!(got_a.last().unwrap().contains(r#""type":"summary""#));

    assert_eq!(healthz(addr).await, before);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn refused_session_closes_socket() {
    let addr = start().await;
    let out = session(addr, vec![r#"{"type":"hello","proto":9,"track":"circuit"}"#.into()]).await;
    assert_eq!(out.len(), 1);
    assert!(out[0].contains("proto_mismatch"));
}
