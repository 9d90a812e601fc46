//! Acceptance harness: one PASS/FAIL line per top-level criterion.
//!
//! Built without the libtest harness so the lines always reach the console;
//! the process exits non-zero if any criterion fails unexpectedly.

mod common;

use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::TestRunner;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use umrf_forge::augment::{
    apply_op, baseline_score, default_grid, fragility_sweep, op_grid, AugmentationKind, AugmentationOp, Augmenter,
    SweepConfig,
};
use umrf_forge::bleu::{sentence_bleu, BleuConfig, TokenSequence};
use umrf_forge::command::{marker_spans, parse_command, render_command};
use umrf_forge::engine::{builtin_registry, execute_graph, ground_graph, WorldState, DEFAULT_MAX_STEPS};
use umrf_forge::library::{default_mock_fixture, demo_examples, example_types, expand_pool, validation_items};
use umrf_forge::provider::{
    mock_complete, CachedProvider, Clock, CompletionProvider, CompletionRequest, FnProvider, HttpProvider,
    MockProvider, ProviderConfig, VirtualClock,
};
use umrf_forge::search::{enumerate_prompts, exhaustive_search, SearchError, SearchOptions};
use umrf_forge::similarity::{cosine, pearson, EmbeddingVector};
use umrf_forge::umrf::{parse_graph, serialize_graph, validate_graph};

type Check = Result<(), String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn umrf_round_trip() -> Check {
    let mut runner = TestRunner::deterministic();
    let graphs: Vec<_> = (0..500)
        .map(|_| common::arb_graph().new_tree(&mut runner).unwrap().current())
        .collect();
    let started = Instant::now();
    for (i, g) in graphs.iter().enumerate() {
        let text = serialize_graph(g).map_err(|e| format!("graph {i}: {e}"))?;
        let back = parse_graph(&text).map_err(|e| format!("graph {i}: {e}"))?;
        ensure(&back == g, || format!("graph {i} changed in round trip"))?;
        let again = serialize_graph(&back).map_err(|e| format!("graph {i}: {e}"))?;
        ensure(again == text, || format!("graph {i} serialization not idempotent"))?;
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 5.0, || format!("took {secs:.2} s"))
}

fn demo_fixtures() -> Check {
    let examples = demo_examples();
    ensure(examples.len() == 5, || format!("{} demo examples", examples.len()))?;
    for ex in &examples {
        let input = render_command(&ex.query_form());
        let reparsed = parse_command(&input).map_err(|e| format!("example {}: {e}", ex.example_id))?;
        ensure(reparsed == ex.query_form(), || format!("example {} parses differently", ex.example_id))?;
        let v = validate_graph(&ex.umrf_output);
        ensure(v.is_empty(), || format!("example {}: {v:?}", ex.example_id))?;
    }
    let trace = |i: usize| -> Result<Vec<String>, String> {
        let plan = ground_graph(&examples[i].umrf_output, &builtin_registry()).map_err(|v| format!("{v:?}"))?;
        let t = execute_graph(&plan, WorldState::default(), DEFAULT_MAX_STEPS);
        Ok(t.actions().into_iter().map(str::to_string).collect())
    };
    let t3 = trace(2)?;
    ensure(t3 == ["navigate", "manipulate", "scan", "manipulate", "scan"], || format!("example 3: {t3:?}"))?;
    let t5 = trace(4)?;
    ensure(t5 == ["scan"], || format!("example 5: {t5:?}"))
}

fn permutation_count() -> Check {
    let pool = expand_pool(&example_types());
    ensure(pool.len() == 10, || format!("pool of {}", pool.len()))?;
    let designs = enumerate_prompts(&pool, 2, true).map_err(|e| e.to_string())?;
    ensure(designs.len() == 90, || format!("{} prompts", designs.len()))?;
    let items = validation_items();
    ensure(items.len() == 5, || format!("{} validation items", items.len()))?;
    let mock = MockProvider::new(default_mock_fixture());
    let report = exhaustive_search(&pool, 2, &items, &mock, &SearchOptions::default()).map_err(|e| e.to_string())?;
    ensure(report.records.len() == 450, || format!("{} records", report.records.len()))?;
    let off: Vec<_> = report.averages.iter().filter(|a| a.average != 1.0).collect();
    ensure(off.is_empty(), || format!("{} prompts below 1.0", off.len()))
}

fn bleu_oracle() -> Check {
    let vocab = ["a", "b", "c", "d", "e", "{", "}", ":"];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let n = rng.gen_range(1..=16);
        (0..n).map(|_| vocab[rng.gen_range(0..vocab.len())].to_string()).collect()
    };
    for i in 0..100 {
        let (c, r) = (draw(&mut rng), draw(&mut rng));
        let smoothing = i % 2 == 0;
        let cfg = BleuConfig { max_n: 4, smoothing };
        let got = sentence_bleu(&TokenSequence::new(c.clone()), &TokenSequence::new(r.clone()), cfg)
            .map_err(|e| e.to_string())?;
        let want = common::oracle_bleu(&c, &r, 4, smoothing);
        ensure((got - want).abs() <= 1e-12, || format!("pair {i}: {got} vs {want}"))?;
    }
    let x = TokenSequence::new(["{", "\"scan\"", ":", "0", "}"]);
    let cfg = BleuConfig::default();
    ensure(sentence_bleu(&x, &x, cfg).unwrap() == 1.0, || "BLEU(x, x) != 1".into())?;
    let y = TokenSequence::new(["p", "q", "r", "s", "t"]);
    ensure(sentence_bleu(&x, &y, cfg).unwrap() == 0.0, || "disjoint pair not 0".into())?;
    let c = TokenSequence::new(["a", "b", "c", "x", "b", "c", "d"]);
    let r = TokenSequence::new(["a", "b", "c", "d", "y", "a", "b"]);
    let raw = sentence_bleu(&c, &r, BleuConfig { max_n: 4, smoothing: false }).unwrap();
    let smooth = sentence_bleu(&c, &r, BleuConfig { max_n: 4, smoothing: true }).unwrap();
    ensure(raw == 0.0 && smooth > 0.0, || format!("4-gram miss: raw {raw}, smoothed {smooth}"))
}

fn augmentation_determinism() -> Check {
    let aug = Augmenter::bundled();
    let text = "Go to the loading dock [x=4.5; y=-2; yaw=0.3] and inspect the valve then scan the area";
    let units = |s: &str| -> Vec<String> {
        let mut out = Vec::new();
        let mut pos = 0;
        for m in marker_spans(s) {
            out.extend(s[pos..m.start].split_whitespace().map(str::to_string));
            out.push(s[m.clone()].to_string());
            pos = m.end;
        }
        out.extend(s[pos..].split_whitespace().map(str::to_string));
        out
    };
    for kind in AugmentationKind::ALL {
        for m in [0.0, 0.05, 0.1, 0.2, 0.4] {
            let op = AugmentationOp::new(kind, m).map_err(|e| e.to_string())?;
            let runs: Vec<String> = (0..3).map(|_| apply_op(&aug, text, &op, 7).unwrap()).collect();
            ensure(runs[0] == runs[1] && runs[1] == runs[2], || format!("{kind:?}@{m} not deterministic"))?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut runner = TestRunner::deterministic();
    for trial in 0..1000 {
        let cmd = common::arb_command().new_tree(&mut runner).unwrap().current();
        let input = render_command(&cmd);
        let kind = AugmentationKind::ALL[trial % 4];
        let m = [0.05, 0.1, 0.2, 0.4, 1.0][rng.gen_range(0..5)];
        let op = AugmentationOp::new(kind, m).unwrap();
        let out = apply_op(&aug, &input, &op, rng.gen()).map_err(|e| e.to_string())?;
        let markers = |s: &str| -> Vec<String> {
            let mut v: Vec<String> = marker_spans(s).into_iter().map(|r| s[r].to_string()).collect();
            v.sort();
            v
        };
        let (before, after) = (markers(&input), markers(&out));
        let stray = out.matches('[').count() != after.len() || out.matches(']').count() != after.len();
        ensure(!stray, || format!("trial {trial}: broken marker in {out:?}"))?;
        match kind {
            AugmentationKind::RandomDeletion => {
                ensure(!units(&out).is_empty(), || format!("trial {trial}: deleted everything"))?;
                ensure(after.iter().all(|a| before.contains(a)), || format!("trial {trial}: {out:?}"))?;
            }
            AugmentationKind::RandomSwap => {
                let (mut a, mut b) = (units(&input), units(&out));
                a.sort();
                b.sort();
                ensure(a == b, || format!("trial {trial}: swap changed words"))?;
            }
            _ => ensure(before == after, || format!("trial {trial}: markers changed in {out:?}"))?,
        }
    }
    Ok(())
}

fn fragility_shape() -> Check {
    let base = umrf_forge::prompt::PromptDesign::new(
        demo_examples()
            .into_iter()
            .map(|e| (e, umrf_forge::prompt::OrderingFlag::LanguageFirst))
            .collect(),
    );
    let items = validation_items();
    let mock = MockProvider::new(default_mock_fixture());
    let opts = SearchOptions::default();
    let aug = Augmenter::bundled();
    let cfg = SweepConfig::default();
    let records = fragility_sweep(&base, &default_grid(), &cfg, &items, &aug, &mock, &opts).map_err(|e| e.to_string())?;
    ensure(records.len() == 48, || format!("{} records", records.len()))?;
    let baseline = baseline_score(&base, &items, &mock, &opts).map_err(|e| e.to_string())?;
    let zero = fragility_sweep(&base, &op_grid(&[0.0]).unwrap(), &cfg, &items, &aug, &mock, &opts)
        .map_err(|e| e.to_string())?;
    let bad: Vec<_> = zero.iter().filter(|r| r.average_bleu.to_bits() != baseline.to_bits()).collect();
    ensure(bad.is_empty(), || format!("{} magnitude-0 rows differ from {baseline}", bad.len()))
}

fn similarity_math() -> Check {
    let v = |xs: &[f64]| EmbeddingVector::new(xs.to_vec(), "fixture").unwrap();
    let mut failures = Vec::new();
    let c_id = cosine(&v(&[1.0, 2.0, 3.0]), &v(&[1.0, 2.0, 3.0])).unwrap();
    if (c_id - 1.0).abs() > 1e-12 {
        failures.push(format!("identity cosine {c_id}"));
    }
    let c_orth = cosine(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap();
    if c_orth != 0.0 {
        failures.push(format!("orthogonal cosine {c_orth}"));
    }
    let c_half = cosine(&v(&[1.0, 0.0]), &v(&[1.0, 1.0])).unwrap();
    if (c_half - std::f64::consts::FRAC_1_SQRT_2).abs() > 1e-9 {
        failures.push(format!("1/sqrt(2) cosine {c_half}"));
    }
    let xs = [1.0, 2.0, 3.0];
    let up = pearson(&xs, &[5.0, 7.0, 9.0]).unwrap();
    let down = pearson(&xs, &[3.0, 2.0, 1.0]).unwrap();
    if up != 1.0 || down != -1.0 {
        failures.push(format!("affine cases {up}, {down}"));
    }
    // The criterion states 0.5 for this pair. The sample Pearson coefficient
    // is sqrt(3/7); 0.5 is the Spearman coefficient of the same data.
    let r = pearson(&xs, &[2.0, 1.0, 4.0]).unwrap();
    if (r - 0.5).abs() > 1e-9 {
        failures.push(format!(
            "stated 0.5 for (1,2,3)/(2,1,4) not met: pearson = {r:.9} (= sqrt(3/7)); known error in the criterion"
        ));
    }
    ensure(failures.is_empty(), || failures.join("; "))
}

fn cache_resume() -> Check {
    let pool = expand_pool(&example_types());
    let items = validation_items();
    let fixture = default_mock_fixture();
    let total = 450;
    let write = |report: &umrf_forge::search::SearchReport, dir: &Path| -> Result<Vec<Vec<u8>>, String> {
        report.write_to_dir(dir, 10).map_err(|e| e.to_string())?;
        ["records.csv", "summary.json", "prompts.jsonl"]
            .iter()
            .map(|f| std::fs::read(dir.join(f)).map_err(|e| e.to_string()))
            .collect()
    };
    let plain = FnProvider(|r: &CompletionRequest| Ok(mock_complete(r, &fixture)));
    let full = exhaustive_search(&pool, 2, &items, &plain, &SearchOptions::default()).map_err(|e| e.to_string())?;
    let ref_dir = tempfile::tempdir().unwrap();
    let reference = write(&full, ref_dir.path())?;

    let cache = tempfile::tempdir().unwrap();
    let cancel = Arc::new(AtomicBool::new(false));
    let calls = AtomicUsize::new(0);
    let killer = FnProvider(|r: &CompletionRequest| {
        if calls.fetch_add(1, Ordering::SeqCst) + 1 >= total / 2 {
            cancel.store(true, Ordering::SeqCst);
        }
        Ok(mock_complete(r, &fixture))
    });
    let opts = SearchOptions {
        cancel: Some(cancel.clone()),
        ..SearchOptions::default()
    };
    let cached = CachedProvider::new(&killer, cache.path()).map_err(|e| e.to_string())?;
    let completed = match exhaustive_search(&pool, 2, &items, &cached, &opts) {
        Err(SearchError::Cancelled { completed, .. }) => completed,
        other => return Err(format!("interrupted run did not cancel: {:?}", other.map(|r| r.records.len()))),
    };
    let counter = AtomicUsize::new(0);
    let resumed_provider = FnProvider(|r: &CompletionRequest| {
        counter.fetch_add(1, Ordering::SeqCst);
        Ok(mock_complete(r, &fixture))
    });
    let cached = CachedProvider::new(&resumed_provider, cache.path()).map_err(|e| e.to_string())?;
    let resumed = exhaustive_search(&pool, 2, &items, &cached, &SearchOptions::default()).map_err(|e| e.to_string())?;
    let out_dir = tempfile::tempdir().unwrap();
    let got = write(&resumed, out_dir.path())?;
    let n = counter.load(Ordering::SeqCst);
    ensure(n <= total - completed, || format!("{n} calls for {} remaining records", total - completed))?;
    ensure(got == reference, || "resumed report differs from an uninterrupted run".into())
}

fn rate_limiting() -> Check {
    let rpm = 30.0;
    let clock = Arc::new(VirtualClock::default());
    let stamp = clock.clone();
    let stub = common::serve(
        |i, _| match i {
            1 | 2 => (429, "{}".into()),
            _ if i % 13 == 12 => (503, "{}".into()),
            _ => (200, common::completion_body("ok")),
        },
        move || stamp.now().as_secs_f64(),
    );
    let cfg = ProviderConfig {
        base_url: stub.url.clone(),
        credential: Some("acceptance-key".into()),
        requests_per_minute: rpm,
        max_retries: 4,
        backoff_base: Duration::from_millis(500),
        timeout: Duration::from_secs(10),
    };
    let provider = HttpProvider::with_clock(cfg, clock.clone()).map_err(|e| e.to_string())?;
    let mut retried = None;
    for i in 0..100 {
        let r = provider
            .complete(&CompletionRequest::new(format!("request {i}")))
            .map_err(|e| format!("request {i}: {e}"))?;
        if i == 1 {
            retried = Some(r.retries);
        }
    }
    ensure(retried == Some(2), || format!("429 path recorded {retried:?} retries"))?;
    let times: Vec<f64> = stub.hits.lock().unwrap().iter().map(|h| h.at).collect();
    let worst = common::max_in_window(&times, 60.0);
    ensure(worst <= rpm as usize + 1, || format!("{worst} requests in a 60 s window"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("UMRF round-trip", umrf_round_trip),
        ("Demo example fixtures", demo_fixtures),
        ("Permutation count", permutation_count),
        ("BLEU oracle", bleu_oracle),
        ("Augmentation determinism", augmentation_determinism),
        ("Fragility sweep shape", fragility_shape),
        ("Similarity math", similarity_math),
        ("Cache/resume", cache_resume),
        ("Rate limiting", rate_limiting),
    ];
    // Criteria whose stated expectation is mathematically wrong; they are
    // reported as FAIL but do not fail the build.
    let known_errors = ["Similarity math"];
    let mut unexpected = Vec::new();
    for (name, check) in criteria {
        match check() {
            Ok(()) => println!("PASS {name}"),
            Err(why) => {
                println!("FAIL {name}: {why}");
                if !known_errors.contains(&name) {
                    unexpected.push(name);
                }
            }
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
