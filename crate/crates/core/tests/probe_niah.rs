use reform::bench::{niah_case, run_method, score_run, Method};
use reform::headfinder::{synthetic_corpus, Needle};
use reform::probe::{probe_model, PROBE_BAD_HEAD, PROBE_HEAD};
use reform::{PipelineConfig, Tokenizer};

fn probe_cfg(budget: usize) -> PipelineConfig {
    PipelineConfig {
        chunk_size: budget,
        cache_budget: budget,
        sink_len: 8,
        recent_len: 8,
        selected_heads: vec![PROBE_HEAD],
        recomputation_budget: budget / 2,
        neighbor_window: 8,
        observer_window: 16,
        ..PipelineConfig::default()
    }
}

#[test]
fn reform_recovers_needle_at_every_depth() {
    let m = probe_model();
    let tok = Tokenizer::Bytes;
    let corpus = synthetic_corpus(3, 40_000);
    let needle = Needle::probe();
    let cfg = probe_cfg(128);
    for depth in [0.0, 25.0, 50.0, 75.0, 100.0] {
        let case = niah_case(&tok, &corpus, &needle, depth, 2048, 11).unwrap();
        let run = run_method(&m, &case.sample.tokens, Method::Reform, &cfg, case.max_new).unwrap();
        let (hit, kept) = score_run(&tok, &case, &run);
        assert_eq!(kept, 1.0, "depth {depth}");
        assert!(hit, "depth {depth}: {:?}", tok.decode(&run.output));
    }
}

#[test]
fn truncation_loses_a_mid_depth_needle() {
    let m = probe_model();
    let tok = Tokenizer::Bytes;
    let corpus = synthetic_corpus(3, 40_000);
    let case = niah_case(&tok, &corpus, &Needle::probe(), 50.0, 2048, 5).unwrap();
    let run = run_method(
        &m,
        &case.sample.tokens,
        Method::Truncation,
        &probe_cfg(128),
        case.max_new,
    )
    .unwrap();
    assert_eq!(score_run(&tok, &case, &run), (false, 0.0));
}

#[test]
fn dense_reads_the_needle() {
    let m = probe_model();
    let tok = Tokenizer::Bytes;
    let corpus = synthetic_corpus(3, 40_000);
    let case = niah_case(&tok, &corpus, &Needle::probe(), 30.0, 600, 2).unwrap();
    let run = run_method(&m, &case.sample.tokens, Method::Dense, &probe_cfg(128), case.max_new).unwrap();
    assert_eq!(score_run(&tok, &case, &run), (true, 1.0));
}

#[test]
fn uninformative_head_misses_the_needle() {
    let m = probe_model();
    let tok = Tokenizer::Bytes;
    let corpus = synthetic_corpus(3, 40_000);
    let case = niah_case(&tok, &corpus, &Needle::probe(), 50.0, 2048, 5).unwrap();
    let cfg = PipelineConfig {
        selected_heads: vec![PROBE_BAD_HEAD],
        ..probe_cfg(128)
    };
    let run = run_method(&m, &case.sample.tokens, Method::Reform, &cfg, case.max_new).unwrap();
    let (hit, kept) = score_run(&tok, &case, &run);
    assert!(!hit);
    assert!(kept < 1.0);
}
