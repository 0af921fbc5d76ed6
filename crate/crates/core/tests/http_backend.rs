//! Wire-level tests of the HTTP backend against a local canned server:
//! request shape, logprob parsing, retry on 5xx/transport, no retry on
//! 4xx.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::time::Duration;

use uq_core::gateway::{
    sample_generations, CompletionBackend, CompletionRequest, GatewayOptions, HttpBackend,
    ProbeContext, RetryPolicy, SamplingConfig,
};
use uq_core::UqError;

/// Serve `responses.len()` connections sequentially, sending each request
/// body back through the channel.
fn spawn_server(
    responses: Vec<(u16, String)>,
) -> (String, mpsc::Receiver<(String, String)>, std::thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    let handle = std::thread::spawn(move || {
        for (status, body) in responses {
            let (mut stream, _) = listener.accept().unwrap();
            stream
                .set_read_timeout(Some(Duration::from_secs(5)))
                .unwrap();
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            let request_headers;
            let request_body;
            loop {
                let n = stream.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..n]);
                if let Some(header_end) = find_header_end(&buf) {
                    let headers = String::from_utf8_lossy(&buf[..header_end]).to_string();
                    let content_length = headers
                        .lines()
                        .find_map(|l| {
                            let (name, value) = l.split_once(':')?;
                            name.eq_ignore_ascii_case("content-length")
                                .then(|| value.trim().parse::<usize>().ok())?
                        })
                        .unwrap_or(0);
                    let body_start = header_end + 4;
                    while buf.len() < body_start + content_length {
                        let n = stream.read(&mut chunk).unwrap();
                        buf.extend_from_slice(&chunk[..n]);
                    }
                    request_body =
                        String::from_utf8_lossy(&buf[body_start..body_start + content_length])
                            .to_string();
                    request_headers = headers;
                    break;
                }
            }
            let _ = tx.send((request_headers, request_body));
            let response = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(response.as_bytes()).unwrap();
        }
    });
    (addr, rx, handle)
}

fn find_header_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n")
}

fn completion_json(text: &str, logprobs: &[f64]) -> String {
    let tokens: Vec<serde_json::Value> = logprobs
        .iter()
        .map(|lp| serde_json::json!({ "token": "t", "logprob": lp }))
        .collect();
    serde_json::json!({
        "choices": [{
            "message": { "role": "assistant", "content": text },
            "logprobs": { "content": tokens },
            "finish_reason": "stop"
        }]
    })
    .to_string()
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        attempts: 3,
        initial_backoff: Duration::from_millis(5),
    }
}

#[test]
fn default_sampling_config_goes_on_the_wire() {
    let (addr, rx, handle) = spawn_server(vec![(200, completion_json("yes", &[-0.1, -0.2]))]);
    let backend = HttpBackend::new(addr, "test-model").with_retry(fast_retry());
    let context = ProbeContext::new("c1", "is the lung clear?");
    let config = SamplingConfig {
        m: 1,
        ..Default::default()
    };
    let set = sample_generations(&context, &config, &backend, &GatewayOptions::default()).unwrap();
    handle.join().unwrap();

    let (_, request_body) = rx.recv().unwrap();
    let body: serde_json::Value = serde_json::from_str(&request_body).unwrap();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["temperature"], 1.0);
    assert_eq!(body["top_p"], 0.9);
    assert_eq!(body["logprobs"], true);
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], "is the lung clear?");

    assert_eq!(set.samples.len(), 1);
    assert_eq!(set.samples[0].text, "yes");
    assert_eq!(set.samples[0].token_logprobs, vec![-0.1, -0.2]);
    assert!((set.samples[0].sequence_logprob().unwrap() - (-0.3)).abs() < 1e-12);
}

#[test]
fn image_ref_becomes_a_content_part() {
    let (addr, rx, handle) = spawn_server(vec![(200, completion_json("yes", &[-0.1]))]);
    let backend = HttpBackend::new(addr, "m").with_retry(fast_retry());
    let mut context = ProbeContext::new("c1", "query");
    context.image_ref = Some("https://example.test/img.png".into());
    let config = SamplingConfig { m: 1, ..Default::default() };
    sample_generations(&context, &config, &backend, &GatewayOptions::default()).unwrap();
    handle.join().unwrap();

    let (_, request_body) = rx.recv().unwrap();
    let body: serde_json::Value = serde_json::from_str(&request_body).unwrap();
    let content = &body["messages"][0]["content"];
    assert_eq!(content[0]["type"], "text");
    assert_eq!(content[1]["type"], "image_url");
    assert_eq!(content[1]["image_url"]["url"], "https://example.test/img.png");
}

#[test]
fn transient_5xx_is_retried_until_success() {
    let (addr, _rx, handle) = spawn_server(vec![
        (500, "{\"error\":\"overloaded\"}".into()),
        (200, completion_json("yes", &[-0.5])),
    ]);
    let backend = HttpBackend::new(addr, "m").with_retry(fast_retry());
    let request = CompletionRequest {
        context_id: "c".into(),
        query: "q".into(),
        image_ref: None,
        temperature: 1.0,
        top_p: 0.9,
        max_tokens: 16,
        sample_index: 0,
    };
    let completion = backend.complete(&request).unwrap();
    assert_eq!(completion.text, "yes");
    handle.join().unwrap();
}

#[test]
fn exhausted_retries_surface_backend_unavailable() {
    let (addr, _rx, handle) = spawn_server(vec![
        (500, "{}".into()),
        (503, "{}".into()),
        (500, "{}".into()),
    ]);
    let backend = HttpBackend::new(addr, "m").with_retry(fast_retry());
    let context = ProbeContext::new("c1", "q");
    let config = SamplingConfig { m: 1, ..Default::default() };
    let err = sample_generations(&context, &config, &backend, &GatewayOptions::default())
        .unwrap_err();
    assert!(matches!(err, UqError::BackendUnavailable(_)));
    handle.join().unwrap();
}

#[test]
fn client_errors_fail_without_retry() {
    // exactly one canned response: a second attempt would hang the test
    let (addr, _rx, handle) = spawn_server(vec![(401, "{\"error\":\"bad key\"}".into())]);
    let backend = HttpBackend::new(addr, "m").with_retry(fast_retry());
    let request = CompletionRequest {
        context_id: "c".into(),
        query: "q".into(),
        image_ref: None,
        temperature: 1.0,
        top_p: 0.9,
        max_tokens: 16,
        sample_index: 0,
    };
    let err = backend.complete(&request).unwrap_err();
    assert!(matches!(err, UqError::BackendUnavailable(_)));
    assert!(err.to_string().contains("401"));
    handle.join().unwrap();
}

#[test]
fn unreachable_endpoint_is_backend_unavailable() {
    // bind then drop to get a port that refuses connections
    let port = {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        listener.local_addr().unwrap().port()
    };
    let backend =
        HttpBackend::new(format!("http://127.0.0.1:{port}"), "m").with_retry(fast_retry());
    let context = ProbeContext::new("c1", "q");
    let config = SamplingConfig { m: 2, ..Default::default() };
    let err = sample_generations(&context, &config, &backend, &GatewayOptions::default())
        .unwrap_err();
    assert!(matches!(err, UqError::BackendUnavailable(_)));
}

#[test]
fn live_probe_generation_parses_backend_lines() {
    let reply = "Q: Is there a mass in the right lung? || A: yes\nQ: Is the heart enlarged? || A: no";
    let (addr, _rx, handle) = spawn_server(vec![(200, completion_json(reply, &[-0.1]))]);
    let backend = HttpBackend::new(addr, "m").with_retry(fast_retry());
    let probes = uq_core::gateway::generate_probes(
        "The patient has a mass in the right lung.",
        0,
        2,
        &backend,
    )
    .unwrap();
    assert_eq!(probes.len(), 2);
    assert_eq!(probes[0].question, "Is there a mass in the right lung?");
    handle.join().unwrap();
}

#[test]
fn remote_nli_judge_requires_bidirectional_entailment() {
    let entail = serde_json::json!({"entailment": 0.9, "neutral": 0.06, "contradiction": 0.04});
    let neutral = serde_json::json!({"entailment": 0.2, "neutral": 0.7, "contradiction": 0.1});

    // both directions entail -> equivalent
    let (addr, rx, handle) =
        spawn_server(vec![(200, entail.to_string()), (200, entail.to_string())]);
    let judge = uq_core::clustering::RemoteNliJudge::new(addr);
    assert!(uq_core::clustering::judge_equivalent("the lung is clear", "lungs are clear", &judge)
        .unwrap());
    handle.join().unwrap();
    let (_, body) = rx.recv().unwrap();
    let body: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert_eq!(body["premise"], "the lung is clear");
    assert_eq!(body["hypothesis"], "lungs are clear");

    // forward entails, backward neutral -> not equivalent
    let (addr, _rx, handle) =
        spawn_server(vec![(200, entail.to_string()), (200, neutral.to_string())]);
    let judge = uq_core::clustering::RemoteNliJudge::new(addr);
    assert!(!uq_core::clustering::judge_equivalent("a", "b", &judge).unwrap());
    handle.join().unwrap();

    // forward fails early -> no second request, not equivalent
    let (addr, _rx, handle) = spawn_server(vec![(200, neutral.to_string())]);
    let judge = uq_core::clustering::RemoteNliJudge::new(addr);
    assert!(!uq_core::clustering::judge_equivalent("a", "b", &judge).unwrap());
    handle.join().unwrap();

    // endpoint rejects -> RemoteJudgeUnavailable
    let (addr, _rx, handle) = spawn_server(vec![(404, "{}".into())]);
    let judge = uq_core::clustering::RemoteNliJudge::new(addr);
    assert!(matches!(
        uq_core::clustering::judge_equivalent("a", "b", &judge),
        Err(UqError::RemoteJudgeUnavailable(_))
    ));
    handle.join().unwrap();
}

#[test]
fn external_labeler_scorer_computes_label_set_f1() {
    use uq_core::dpo::{score_generation, ExternalLabelerScorer};
    // candidate labels {edema, effusion}, reference {effusion, pneumonia}
    let cand = serde_json::json!({"labels": ["edema", "effusion"]});
    let refr = serde_json::json!({"labels": ["effusion", "pneumonia"]});
    let (addr, _rx, handle) = spawn_server(vec![(200, cand.to_string()), (200, refr.to_string())]);
    let scorer = ExternalLabelerScorer::new(addr);
    let f1 = score_generation("candidate text", "reference text", &scorer).unwrap();
    // overlap 1, precision 1/2, recall 1/2
    assert!((f1 - 0.5).abs() < 1e-12);
    handle.join().unwrap();

    let (addr, _rx, handle) = spawn_server(vec![(500, "{}".into())]);
    let scorer = ExternalLabelerScorer::new(addr);
    let err = score_generation("c", "r", &scorer).unwrap_err();
    assert!(matches!(err, UqError::ScorerUnavailable(_)));
    handle.join().unwrap();
}

#[test]
fn env_base_and_key_override_flags() {
    let (addr, rx, handle) = spawn_server(vec![(200, completion_json("yes", &[-0.1]))]);
    // env wins over the explicitly passed base URL; key lands as a bearer
    std::env::set_var("UQ_API_BASE", &addr);
    std::env::set_var("UQ_API_KEY", "sekrit-token");
    let backend = HttpBackend::from_env(Some("http://127.0.0.1:9"), "m")
        .unwrap()
        .with_retry(fast_retry());
    std::env::remove_var("UQ_API_BASE");
    std::env::remove_var("UQ_API_KEY");

    let context = ProbeContext::new("c1", "q");
    let config = SamplingConfig { m: 1, ..Default::default() };
    let set = sample_generations(&context, &config, &backend, &GatewayOptions::default()).unwrap();
    assert_eq!(set.samples[0].text, "yes");
    handle.join().unwrap();
    // the canned server saw the request, so the env base was used; the
    // env key rode along as the bearer token
    let (headers, _) = rx.recv().unwrap();
    assert!(headers.to_lowercase().contains("authorization: bearer sekrit-token"));
}

#[test]
fn missing_logprobs_from_live_backend_rejected_when_required() {
    let body = serde_json::json!({
        "choices": [{ "message": { "content": "yes" }, "finish_reason": "stop" }]
    })
    .to_string();
    let (addr, _rx, handle) = spawn_server(vec![(200, body)]);
    let backend = HttpBackend::new(addr, "m").with_retry(fast_retry());
    let context = ProbeContext::new("c1", "q");
    let config = SamplingConfig { m: 1, ..Default::default() };
    let err = sample_generations(&context, &config, &backend, &GatewayOptions::default())
        .unwrap_err();
    assert!(matches!(err, UqError::LogprobsMissing));
    handle.join().unwrap();
}
