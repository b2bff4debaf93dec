//! Hashed encoder collisions and the external encoder against a local
//! stand-in embedding service.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use serde_json::{json, Value as Json};

use setinfer_core::text::{encode_text, EncoderConfig, ExternalConfig, ExternalEncoder, HashedEncoder, TextEncoder};

fn vocabulary() -> Vec<String> {
    let syllables = ["ka", "lo", "mi", "nu", "re", "sa", "ti", "vo", "ze", "ul"];
    let mut words = Vec::new();
    for a in syllables {
        for b in syllables {
            for c in syllables {
                words.push(format!("{a}{b}{c}"));
            }
        }
    }
    words
}

#[test]
fn thousand_words_never_collide() {
    let words = vocabulary();
    assert_eq!(words.len(), 1000);
    for seed in 0..3 {
        let enc = HashedEncoder::new(EncoderConfig {
            hash_seed: seed,
            ..Default::default()
        })
        .unwrap();
        let mut seen = HashSet::new();
        for w in &words {
            let v = enc.encode(w).unwrap().vector;
            let key: Vec<u64> = v.iter().map(|x| x.to_bits()).collect();
            assert!(seen.insert(key), "collision for `{w}` at seed {seed}");
        }
    }
}

/// Serves `responses` in turn, one per connection, and counts requests.
fn serve(responses: Vec<(u16, Json)>) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    thread::spawn(move || {
        for (status, body) in responses {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream);
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line.trim().is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut req = vec![0u8; len];
            reader.read_exact(&mut req).unwrap();
            counter.fetch_add(1, Ordering::SeqCst);
            let body = body.to_string();
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (format!("http://{addr}/embed"), hits)
}

/// `head` padded with zeros to the minimum encoder width.
fn wide(head: &[f64]) -> Vec<f64> {
    let mut v = head.to_vec();
    v.resize(8, 0.0);
    v
}

fn external(endpoint: &str, dim: usize, cache: Option<std::path::PathBuf>) -> EncoderConfig {
    EncoderConfig {
        d_text: dim,
        external: Some(ExternalConfig {
            endpoint: endpoint.to_string(),
            cache_path: cache,
            timeout_secs: 5,
        }),
        ..Default::default()
    }
}

#[test]
fn external_vectors_are_normalised_and_cached() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache.jsonl");
    let (endpoint, hits) = serve(vec![(200, json!({"embeddings": [wide(&[3.0, 4.0]), wide(&[0.0, 2.0])]}))]);
    let enc = ExternalEncoder::new(external(&endpoint, 8, Some(cache.clone()))).unwrap();
    let out = enc.encode_batch(&["Alpha", "beta", "  alpha "]).unwrap();
    assert_eq!(hits.load(Ordering::SeqCst), 1);
    assert_eq!(out[0].vector, wide(&[0.6, 0.8]));
    assert_eq!(out[1].vector, wide(&[0.0, 1.0]));
    assert_eq!(out[2].vector, out[0].vector);
    assert_eq!(enc.encode("ALPHA").unwrap().vector, wide(&[0.6, 0.8]));
    assert_eq!(hits.load(Ordering::SeqCst), 1);

    // A fresh client reads the cache file and never calls the service.
    let again = encode_text("beta", &external(&endpoint, 8, Some(cache))).unwrap();
    assert_eq!(again.vector, wide(&[0.0, 1.0]));
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn external_failures_are_reported() {
    let (endpoint, _) = serve(vec![
        (200, json!({"embeddings": [[1.0, 0.0, 0.0]]})),
        (500, json!({"error": "down"})),
        (200, json!({"embeddings": [wide(&[])]})),
        (200, json!({"embeddings": []})),
    ]);
    let enc = ExternalEncoder::new(external(&endpoint, 8, None)).unwrap();
    for word in ["width", "status", "zero", "count"] {
        let err = enc.encode(word).unwrap_err().to_string();
        assert!(!err.is_empty(), "{word}");
    }
    assert!(enc.encode("   ").is_err());
}
