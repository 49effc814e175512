use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use termclust::oracle::{
    equivalence_prompt, ChatRequest, ChatTransport, FixtureTransport, HttpTransport, MockOracle, OracleError,
    RateLimiter, RemoteOracle, TermRef, TranscriptEntry, CLUSTERING_SYSTEM_PROMPT, EXPLANATION_SYSTEM_PROMPT,
};
use termclust::{Oracle, VerdictSource};

struct Seen {
    auth: Option<String>,
    body: serde_json::Value,
}

/// Serves one canned `(status, body)` per connection, recording each request.
fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    let handle = thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut auth = None;
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    match k.to_ascii_lowercase().as_str() {
                        "authorization" => auth = Some(v.trim().to_string()),
                        "content-length" => length = v.trim().parse().unwrap(),
                        _ => {}
                    }
                }
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                auth,
                body: serde_json::from_slice(&buf).unwrap(),
            });
            let mut out = stream;
            write!(
                out,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            out.flush().unwrap();
        }
    });
    (url, seen, handle)
}

fn reply(content: &str) -> (u16, String) {
    (
        200,
        serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string(),
    )
}

fn remote(url: &str, key: Option<&str>) -> Oracle {
    let transport = HttpTransport::new(url, key.map(String::from), Duration::from_secs(5));
    Oracle::new(Box::new(RemoteOracle::new(Box::new(transport), "test-model", RateLimiter::new(2, 0.0))))
}

#[test]
fn http_round_trip_sends_exact_prompt() {
    let (url, seen, server) = serve(vec![reply("Yes."), reply("no, they differ")]);
    let oracle = remote(&url, Some("sekrit"));
    let v = oracle
        .judge(TermRef::new("aspirin", None), TermRef::new("acetylsalicylic acid", None))
        .unwrap();
    assert!(v.same);
    assert_eq!(v.source, VerdictSource::Remote);
    let v = oracle
        .judge(TermRef::new("aspirin", None), TermRef::new("ibuprofen", None))
        .unwrap();
    assert!(!v.same);
    server.join().unwrap();

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer sekrit"));
    let body = &seen[0].body;
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][0]["content"], CLUSTERING_SYSTEM_PROMPT);
    assert_eq!(body["messages"][1]["content"], equivalence_prompt("aspirin", "acetylsalicylic acid"));

    // repeated pair, either order, is served from the cache
    let v = oracle
        .judge(TermRef::new("ibuprofen", None), TermRef::new("aspirin", None))
        .unwrap();
    assert_eq!(v.source, VerdictSource::Cache);
    assert_eq!(oracle.budget().queries_issued, 2);
    assert_eq!(oracle.budget().cache_hits, 1);
}

#[test]
fn http_failure_retried_once() {
    let (url, seen, server) = serve(vec![(500, "{}".into()), reply("YES")]);
    let oracle = remote(&url, None);
    assert!(oracle.judge(TermRef::new("a", None), TermRef::new("b", None)).unwrap().same);
    server.join().unwrap();
    assert_eq!(seen.lock().unwrap().len(), 2);
    assert!(seen.lock().unwrap()[0].auth.is_none());
}

#[test]
fn unparseable_twice_fails_and_refunds_budget() {
    let (url, _, server) = serve(vec![reply("maybe"), reply("I cannot say")]);
    let oracle = remote(&url, None).with_limit(Some(1));
    let err = oracle
        .judge(TermRef::new("a", None), TermRef::new("b", None))
        .unwrap_err();
    assert!(matches!(err, OracleError::UnparseableReply(_)), "{err}");
    assert_eq!(oracle.budget().queries_issued, 0);
    server.join().unwrap();
}

#[test]
fn unreachable_endpoint_is_unavailable() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let oracle = remote(&format!("http://127.0.0.1:{port}/"), None);
    let err = oracle.judge(TermRef::new("a", None), TermRef::new("b", None)).unwrap_err();
    assert!(matches!(err, OracleError::Unavailable(_)), "{err}");
}

#[test]
fn credential_from_env_never_printed() {
    let var = "TERMCLUST_TEST_KEY_7731";
    std::env::set_var(var, "hunter2");
    let t = HttpTransport::from_env("http://localhost/", var, Duration::from_secs(1));
    let shown = format!("{t:?}");
    assert!(!shown.contains("hunter2"), "{shown}");
    assert!(shown.contains("redacted"));
}

#[test]
fn transcript_replays_explanation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("transcript.json");
    let entries = vec![TranscriptEntry {
        request: ChatRequest::explanation("gpt", "aspirin"),
        reply: "A salicylate drug used to treat pain, fever and inflammation.".into(),
    }];
    std::fs::write(&path, serde_json::to_vec(&entries).unwrap()).unwrap();
    let remote = RemoteOracle::new(Box::new(FixtureTransport::load(&path).unwrap()), "gpt", RateLimiter::new(1, 0.0));
    assert_eq!(
        remote.explain_term("aspirin").unwrap(),
        "A salicylate drug used to treat pain, fever and inflammation."
    );
    assert!(matches!(remote.explain_term("unknown"), Err(OracleError::Unavailable(_))));
    assert!(matches!(remote.explain_term("  "), Err(OracleError::Precondition(_))));
    assert_eq!(entries[0].request.messages[0].content, EXPLANATION_SYSTEM_PROMPT);
    assert_eq!(
        entries[0].request.messages[1].content,
        "What is the term 'aspirin'? Please explain in 50 words as if in a dictionary."
    );
}

#[test]
fn mock_agreement_rate_observed() {
    let oracle = Oracle::mock(MockOracle::new(0.8, 42).unwrap());
    let n = 10_000;
    let mut agree = 0;
    for i in 0..n {
        let gold_same = i % 2 == 0;
        let a = format!("term a{i}");
        let b = format!("term b{i}");
        let cb = if gold_same { "x" } else { "y" };
        let v = oracle.judge(TermRef::new(&a, Some("x")), TermRef::new(&b, Some(cb))).unwrap();
        agree += usize::from(v.same == gold_same);
    }
    let rate = agree as f64 / n as f64;
    assert!((rate - 0.8).abs() <= 0.02, "observed agreement {rate}");
}

#[test]
fn mock_without_gold_is_an_error() {
    let oracle = Oracle::mock(MockOracle::perfect());
    let err = oracle.judge(TermRef::new("a", None), TermRef::new("b", Some("x"))).unwrap_err();
    assert!(matches!(err, OracleError::MissingGold(_)));
}

struct Counting {
    now: AtomicUsize,
    peak: AtomicUsize,
}

struct Shared(Arc<Counting>);

impl ChatTransport for Shared {
    fn complete(&self, _: &ChatRequest) -> Result<String, OracleError> {
        let c = &self.0;
        let cur = c.now.fetch_add(1, Ordering::SeqCst) + 1;
        c.peak.fetch_max(cur, Ordering::SeqCst);
        thread::sleep(Duration::from_millis(20));
        c.now.fetch_sub(1, Ordering::SeqCst);
        Ok("yes".into())
    }
}

#[test]
fn in_flight_cap_respected() {
    let counter = Arc::new(Counting {
        now: AtomicUsize::new(0),
        peak: AtomicUsize::new(0),
    });
    let oracle = Arc::new(Oracle::new(Box::new(RemoteOracle::new(
        Box::new(Shared(Arc::clone(&counter))),
        "m",
        RateLimiter::new(2, 0.0),
    ))));
    let handles: Vec<_> = (0..8)
        .map(|i| {
            let o = Arc::clone(&oracle);
            thread::spawn(move || {
                o.judge(TermRef::new(&format!("a{i}"), None), TermRef::new("b", None))
                    .unwrap()
            })
        })
        .collect();
    for h in handles {
        assert!(h.join().unwrap().same);
    }
    assert!(counter.peak.load(Ordering::SeqCst) <= 2);
    assert_eq!(oracle.budget().queries_issued, 8);
}

#[test]
fn request_rate_spaced() {
    let limiter = RateLimiter::new(4, 50.0);
    let start = Instant::now();
    for _ in 0..5 {
        drop(limiter.acquire());
    }
    assert!(start.elapsed() >= Duration::from_millis(75), "{:?}", start.elapsed());
}

#[test]
fn cache_file_persists_and_tolerates_torn_tail() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.jsonl");
    {
        let oracle = Oracle::mock(MockOracle::new(0.5, 3).unwrap()).with_cache_file(&path).unwrap();
        for i in 0..20 {
            oracle
                .judge(TermRef::new(&format!("t{i}"), Some("x")), TermRef::new("u", Some("x")))
                .unwrap();
        }
        assert_eq!(oracle.budget().queries_issued, 20);
    }
    let first = Oracle::mock(MockOracle::new(0.5, 3).unwrap());
    let expected: Vec<bool> = (0..20)
        .map(|i| {
            first
                .judge(TermRef::new("u", Some("x")), TermRef::new(&format!("t{i}"), Some("x")))
                .unwrap()
                .same
        })
        .collect();

    std::fs::OpenOptions::new()
        .append(true)
        .open(&path)
        .unwrap()
        .write_all(b"{\"a\":\"t0\",\"b\":")
        .unwrap();
    let oracle = Oracle::mock(MockOracle::perfect()).with_cache_file(&path).unwrap();
    assert_eq!(oracle.cached_pairs(), 20);
    for (i, want) in expected.iter().enumerate() {
        let v = oracle
            .judge(TermRef::new("u", Some("x")), TermRef::new(&format!("t{i}"), Some("x")))
            .unwrap();
        assert_eq!(v.source, VerdictSource::Cache);
        assert_eq!(v.same, *want);
    }
    assert_eq!(oracle.budget().queries_issued, 0);
}

#[test]
fn corrupt_cache_body_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.jsonl");
    std::fs::write(&path, "garbage\n{\"a\":\"x\",\"b\":\"y\",\"same\":true}\n").unwrap();
    let err = Oracle::mock(MockOracle::perfect()).with_cache_file(&path).unwrap_err();
    assert!(matches!(err, OracleError::Cache(_)));
}
