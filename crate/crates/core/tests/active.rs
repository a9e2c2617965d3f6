use std::collections::BTreeSet;
use std::sync::OnceLock;

use lineadapt::active::{build_active_series, rank_ascending, score_lines, LineConfidence, PoolLine};
use lineadapt::charset::CharsetSpec;
use lineadapt::corpus::{generate_corpus, Corpus, CorpusSpec, Split};
use lineadapt::finetune::build_series;
use lineadapt::model::{DecodeResult, ModelConfig, Recognizer};
use proptest::prelude::*;

fn corpus() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| {
        let spec = CorpusSpec { n_writers: 2, lines_per_writer: 512, n_source_writers: 0, max_chars: 8, seed: 3, ..CorpusSpec::default() };
        generate_corpus(&spec, &CharsetSpec::default()).unwrap()
    })
}

fn model() -> Recognizer {
    let mut cfg = ModelConfig::micro();
    cfg.max_decode_len = 10;
    Recognizer::new(cfg, 2).unwrap()
}

fn confidences() -> impl Strategy<Value = Vec<LineConfidence>> {
    prop::collection::vec((0u32..1000, -40i32..=0, any::<bool>()), 0..60).prop_map(|v| {
        let mut seen = BTreeSet::new();
        v.into_iter()
            .filter(|(id, _, _)| seen.insert(*id))
            .map(|(id, s, truncated)| LineConfidence { line_id: format!("l{id:04}"), score: s as f64 / 4.0, truncated })
            .collect()
    })
}

proptest! {
    #[test]
    fn ranking_is_a_permutation(c in confidences()) {
        let ranked = rank_ascending(&c);
        let mut a = ranked.clone();
        a.sort();
        let mut b: Vec<String> = c.iter().map(|x| x.line_id.clone()).collect();
        b.sort();
        prop_assert_eq!(a, b);
        let score = |id: &str| c.iter().find(|x| x.line_id == id).unwrap().score;
        prop_assert!(ranked.windows(2).all(|w| score(&w[0]) <= score(&w[1])));
    }

    #[test]
    fn ranking_ignores_input_order(c in confidences(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut shuffled = c.clone();
        shuffled.shuffle(&mut lineadapt::seed::rng(seed, "shuffle", 0));
        prop_assert_eq!(rank_ascending(&c), rank_ascending(&shuffled));
    }

    #[test]
    fn appending_uncertain_tokens_lowers_the_score(
        base in prop::collection::vec(-5.0f64..0.0, 0..20),
        extra in prop::collection::vec(-5.0f64..-1e-6, 1..10),
    ) {
        let shorter = DecodeResult { tokens: vec![3; base.len()], per_token_logprob: base.clone(), text: String::new(), truncated: false };
        let mut lp = base;
        lp.extend(&extra);
        let longer = DecodeResult { tokens: vec![3; lp.len()], per_token_logprob: lp, text: String::new(), truncated: false };
        prop_assert!(longer.confidence() < shorter.confidence());
    }
}

fn pool(writer: u32) -> Vec<PoolLine<'static>> {
    corpus().lines_of(writer, Split::FinetunePool).into_iter().map(|l| PoolLine { line_id: &l.line_id, image: &l.image }).collect()
}

#[test]
fn scores_do_not_depend_on_pool_order() {
    let m = model();
    let lines: Vec<PoolLine> = pool(0).into_iter().take(40).collect();
    let forward = score_lines(&m, &lines, 8).unwrap();
    let mut reversed: Vec<PoolLine> = lines.clone();
    reversed.reverse();
    let backward = score_lines(&m, &reversed, 8).unwrap();
    for (i, c) in forward.iter().enumerate() {
        assert_eq!(c.line_id, lines[i].line_id);
        assert!(c.score.is_finite() && c.score <= 0.0);
    }
    let mut b = backward.clone();
    b.reverse();
    assert_eq!(forward, b);
    assert_eq!(rank_ascending(&forward), rank_ascending(&backward));
}

#[test]
fn active_and_random_plans_agree_on_the_full_pool() {
    let m = model();
    let lines = pool(1);
    assert_eq!(lines.len(), 256);
    let levels = [1, 4, 16, 64, 256];
    let (active, scores) = build_active_series(1, &m, &lines, &levels, 5).unwrap();
    let ids: Vec<String> = lines.iter().map(|l| l.line_id.to_string()).collect();
    let random = build_series(1, &ids, 5, &levels).unwrap();
    let set = |v: &[String]| v.iter().cloned().collect::<BTreeSet<_>>();
    assert_eq!(set(active.subset(256)), set(random.subset(256)));
    assert_ne!(active.subset(16), random.subset(16));
    for w in levels.windows(2) {
        assert_eq!(active.subset(w[0]), &active.subset(w[1])[..w[0]]);
    }
    // The first lines are the least confident.
    let worst = scores.iter().map(|c| c.score).fold(f64::INFINITY, f64::min);
    let first = scores.iter().find(|c| c.line_id == active.subset(1)[0]).unwrap();
    assert_eq!(first.score, worst);
    assert!(build_active_series(1, &m, &lines[..10], &[16], 5).is_err());
}
