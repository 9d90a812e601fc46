use umrf_forge::augment::{
    baseline_score, compositional_sweep, default_grid, fragility_sweep, op_grid, score_variance, write_sweep_csv,
    Augmenter, SweepConfig,
};
use umrf_forge::bleu::tokenize;
use umrf_forge::library::{default_mock_fixture, demo_examples, validation_items};
use umrf_forge::prompt::{OrderingFlag, PromptDesign};
use umrf_forge::provider::{mock_complete, CompletionRequest, CompletionResult, FinishReason, FnProvider, MockProvider};
use umrf_forge::search::{design_text, SearchOptions};

fn base_design(n: usize) -> PromptDesign {
    PromptDesign::new(
        demo_examples()
            .into_iter()
            .take(n)
            .map(|e| (e, OrderingFlag::LanguageFirst))
            .collect(),
    )
}

#[test]
fn default_grid_with_three_trials_emits_48_records() {
    let base = base_design(5);
    let items = validation_items();
    let mock = MockProvider::new(default_mock_fixture());
    let opts = SearchOptions::default();
    let records = fragility_sweep(
        &base,
        &default_grid(),
        &SweepConfig::default(),
        &items,
        &Augmenter::bundled(),
        &mock,
        &opts,
    )
    .unwrap();
    assert_eq!(records.len(), 48);
    let mut csv = Vec::new();
    write_sweep_csv(&records, &mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    assert_eq!(csv.lines().next(), Some("kind,magnitude,trial,policy_digest,avg_bleu"));
    assert_eq!(csv.lines().count(), 49);
}

#[test]
fn magnitude_zero_rows_equal_the_baseline_bit_for_bit() {
    let base = base_design(5);
    let items = validation_items();
    let mock = MockProvider::new(default_mock_fixture());
    let opts = SearchOptions::default();
    let baseline = baseline_score(&base, &items, &mock, &opts).unwrap();
    let grid = op_grid(&[0.0]).unwrap();
    let records =
        fragility_sweep(&base, &grid, &SweepConfig::default(), &items, &Augmenter::bundled(), &mock, &opts).unwrap();
    assert_eq!(records.len(), 12);
    for r in records {
        assert_eq!(r.average_bleu.to_bits(), baseline.to_bits());
    }
}

fn word_edit_distance(a: &[String], b: &[String]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

#[test]
fn compositional_policies_spread_scores_at_least_as_much_as_single_ops() {
    // A provider whose output degrades with how far the examples drifted
    // from the unperturbed design: it returns a prefix of the correct graph
    // proportional to the fraction of example words left intact.
    let base = base_design(1);
    let baseline = tokenize(&design_text(&base)).tokens().to_vec();
    let fixture = default_mock_fixture();
    let provider = FnProvider(|req: &CompletionRequest| {
        let examples_end = req.prompt.rfind("\n\n").map_or(0, |i| i + 2);
        let seen = tokenize(&req.prompt[..examples_end]).tokens().to_vec();
        let drift = word_edit_distance(&seen, &baseline) as f64 / baseline.len() as f64;
        let keep = 1.0 - drift.min(1.0);
        let full = mock_complete(req, &fixture).text;
        let tokens = tokenize(&full).tokens().to_vec();
        let n = ((tokens.len() as f64 * keep).round() as usize).max(1);
        Ok(CompletionResult::new(tokens[..n].join(" "), FinishReason::Stop))
    });
    let items = validation_items();
    let opts = SearchOptions::default();
    let aug = Augmenter::bundled();
    let grid = default_grid();
    let cfg = SweepConfig { trials: 2, base_seed: 11 };
    let single = fragility_sweep(&base, &grid, &cfg, &items, &aug, &provider, &opts).unwrap();
    let pairs = compositional_sweep(&base, &grid, &cfg, &items, &aug, &provider, &opts).unwrap();
    assert_eq!(pairs.len(), 240 * 2);
    let (vs, vc) = (score_variance(&single), score_variance(&pairs));
    assert!(vc >= vs, "compositional variance {vc} < single-op variance {vs}");
}
