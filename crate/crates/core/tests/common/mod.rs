//! Shared helpers for integration tests: graph and command generators, a
//! brute-force BLEU oracle and a tiny HTTP stub server.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};

use proptest::prelude::*;
use umrf_forge::command::{Marker, MultimodalCommand, Segment};
use umrf_forge::umrf::{NodeRef, Parameter, UmrfGraph, UmrfNode};

// ---------------------------------------------------------------------------
// Generators

fn arb_number() -> impl Strategy<Value = f64> {
    prop_oneof![
        (-1000i64..1000).prop_map(|i| i as f64),
        (-1.0e6f64..1.0e6),
        (-1000i64..1000, 1u32..7).prop_map(|(m, d)| m as f64 / 10f64.powi(d as i32)),
        any::<f64>().prop_filter("finite", |x| x.is_finite()),
    ]
}

fn arb_parameter() -> impl Strategy<Value = Parameter> {
    prop_oneof![
        arb_number().prop_map(Parameter::number),
        "[a-z ]{0,12}".prop_map(Parameter::string),
        any::<bool>().prop_map(Parameter::boolean),
        prop::collection::vec(arb_number(), 0..4).prop_map(Parameter::number_array),
    ]
}

fn arb_params() -> impl Strategy<Value = Vec<(String, Parameter)>> {
    prop::collection::vec(("[a-z_]{1,8}", arb_parameter()), 0..4)
}

const NAMES: [&str; 5] = ["navigation", "manipulate", "scan", "grasp", "speak"];

/// Valid graphs: node 0 is the entry, every other node has a parent with a
/// smaller index (so all are reachable), plus optional back edges that make
/// cycles without ever pointing at node 0.
pub fn arb_graph() -> impl Strategy<Value = UmrfGraph> {
    (1usize..8)
        .prop_flat_map(|n| {
            (
                Just(n),
                prop::collection::vec((0usize..NAMES.len(), 0u64..3), n),
                prop::collection::vec(any::<prop::sample::Index>(), n),
                prop::collection::vec((any::<prop::sample::Index>(), any::<prop::sample::Index>()), 0..n),
                prop::collection::vec(arb_params(), n),
                prop::collection::vec(arb_params(), n),
                prop::collection::vec(prop::bool::weighted(0.8), n),
                "[a-z_]{1,12}",
            )
        })
        .prop_map(|(n, ids, first_parents, extra_edges, inputs, outputs, sync, name)| {
            // Unique (name, id) pairs: bump the id on collision.
            let mut refs: Vec<NodeRef> = Vec::new();
            for (ni, id) in ids {
                let mut r = NodeRef::new(NAMES[ni], id);
                while refs.contains(&r) {
                    r.id += 1;
                }
                refs.push(r);
            }
            let mut g = UmrfGraph::new(name);
            for (i, r) in refs.iter().enumerate() {
                let mut node = UmrfNode::new(r.name.clone(), r.id);
                node.effect = if sync[i] { "synchronous" } else { "asynchronous" }.to_string();
                for (k, p) in &inputs[i] {
                    node.input_parameters.insert(k.clone(), p.clone());
                }
                for (k, p) in &outputs[i] {
                    node.output_parameters.insert(k.clone(), p.clone());
                }
                g.nodes.push(node);
            }
            let mut edges = std::collections::BTreeSet::new();
            for (j, parent) in first_parents.iter().enumerate().skip(1) {
                edges.insert((parent.index(j), j));
            }
            for (a, b) in extra_edges {
                let (a, b) = (a.index(n), b.index(n));
                if a != b && b != 0 {
                    edges.insert((a, b));
                }
            }
            for (a, b) in edges {
                g.link(&refs[a], &refs[b]);
            }
            g
        })
}

/// Marker coordinates with at most six fractional digits.
pub fn arb_coord() -> impl Strategy<Value = f64> {
    (-100_000_000i64..100_000_000, 0u32..7).prop_map(|(m, d)| m as f64 / 10f64.powi(d as i32))
}

pub fn arb_marker() -> impl Strategy<Value = Marker> {
    (arb_coord(), arb_coord(), arb_coord()).prop_map(|(x, y, yaw)| Marker::new(x, y, yaw))
}

/// Commands alternating text and markers, always with some text.
pub fn arb_command() -> impl Strategy<Value = MultimodalCommand> {
    (
        "[A-Za-z][a-z]{0,8}( [a-z]{1,8}){0,4}",
        prop::collection::vec((arb_marker(), prop::option::of("[a-z]{1,8}( [a-z]{1,8}){0,3}")), 0..4),
        any::<bool>(),
    )
        .prop_map(|(lead, rest, text_first)| {
            let mut segs = Vec::new();
            if text_first || rest.is_empty() {
                segs.push(Segment::Text(lead.clone()));
            }
            for (m, t) in rest {
                segs.push(Segment::Marker(m));
                if let Some(t) = t {
                    segs.push(Segment::Text(t));
                }
            }
            if !segs.iter().any(|s| matches!(s, Segment::Text(_))) {
                segs.push(Segment::Text(lead));
            }
            MultimodalCommand::from_segments(segs).expect("generated segments are valid")
        })
}

// ---------------------------------------------------------------------------
// BLEU oracle: plain loops, no hashing.

fn count(seq: &[String], gram: &[String]) -> usize {
    let n = gram.len();
    if seq.len() < n {
        return 0;
    }
    (0..=seq.len() - n).filter(|&i| &seq[i..i + n] == gram).count()
}

/// Sentence BLEU by brute force: for every candidate n-gram position, the
/// clipped count is min(count in candidate, count in reference) shared
/// across equal n-grams.
pub fn oracle_bleu(c: &[String], r: &[String], max_n: usize, smoothing: bool) -> f64 {
    if c.is_empty() {
        return 0.0;
    }
    let order = max_n.min(c.len()).min(r.len());
    let mut log_sum = 0.0;
    for n in 1..=order {
        let total = c.len() - n + 1;
        let mut matched = 0usize;
        let mut seen: Vec<&[String]> = Vec::new();
        for i in 0..total {
            let g = &c[i..i + n];
            if seen.contains(&g) {
                continue;
            }
            seen.push(g);
            matched += count(c, g).min(count(r, g));
        }
        let num = if matched == 0 {
            if !smoothing {
                return 0.0;
            }
            1e-9
        } else {
            matched as f64
        };
        log_sum += (num / total as f64).ln();
    }
    let bp = if c.len() < r.len() {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    } else {
        1.0
    };
    bp * (log_sum / order as f64).exp()
}

// ---------------------------------------------------------------------------
// HTTP stub

#[derive(Debug, Clone)]
pub struct Hit {
    pub path: String,
    pub authorization: Option<String>,
    pub body: serde_json::Value,
    /// Value of the test's clock when the request arrived, in seconds.
    pub at: f64,
}

pub struct Stub {
    pub url: String,
    pub hits: Arc<Mutex<Vec<Hit>>>,
}

/// Serves `respond(request_number, hit) -> (status, body)` until the test
/// process exits. `now` stamps each hit.
pub fn serve<F, C>(respond: F, now: C) -> Stub
where
    F: Fn(usize, &Hit) -> (u16, String) + Send + 'static,
    C: Fn() -> f64 + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(Mutex::new(Vec::new()));
    let log = hits.clone();
    std::thread::spawn(move || {
        for (i, stream) in listener.incoming().enumerate() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            if reader.read_line(&mut request_line).is_err() {
                continue;
            }
            let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
            let mut len = 0usize;
            let mut auth = None;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
                if lower.starts_with("authorization:") {
                    auth = Some(line["authorization:".len()..].trim().to_string());
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).ok();
            let hit = Hit {
                path,
                authorization: auth,
                body: serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null),
                at: now(),
            };
            let (status, text) = respond(i, &hit);
            log.lock().unwrap().push(hit);
            let resp = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            );
            stream.write_all(resp.as_bytes()).ok();
            stream.flush().ok();
        }
    });
    Stub { url, hits }
}

/// A completions-API response body carrying `text`.
pub fn completion_body(text: &str) -> String {
    serde_json::json!({ "choices": [{ "text": text, "finish_reason": "stop" }] }).to_string()
}

/// Largest number of hits inside any half-open window `[t, t + width)`.
pub fn max_in_window(times: &[f64], width: f64) -> usize {
    let mut ts = times.to_vec();
    ts.sort_by(f64::total_cmp);
    let mut best = 0;
    let mut j = 0;
    for i in 0..ts.len() {
        while j < ts.len() && ts[j] < ts[i] + width {
            j += 1;
        }
        best = best.max(j - i);
    }
    best
}
