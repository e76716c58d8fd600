mod common;

use std::collections::HashSet;

use coregen::baseline::RetrievalIndex;
use coregen::corpus::{dedup_analyze, structure_commit, Category, CommitRecord, Split};
use coregen::metrics;
use coregen::tasks::{build_stage_one_dataset, make_masked_sample, MaskPolicy, TaskKind, MASK_TOKEN};
use coregen::training::{label_subset, lr_at_step};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

fn sentence(vocab: u8, max_len: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(0..vocab, 0..=max_len).prop_map(|v| v.into_iter().map(|i| format!("w{i}")).collect())
}

fn nonempty(vocab: u8, max_len: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(0..vocab, 1..=max_len).prop_map(|v| v.into_iter().map(|i| format!("w{i}")).collect())
}

fn corpus_pairs() -> impl Strategy<Value = Vec<(Vec<String>, Vec<String>)>> {
    prop::collection::vec((sentence(8, 10), nonempty(8, 10)), 1..12)
}

fn unzip(pairs: &[(Vec<String>, Vec<String>)]) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    pairs.iter().cloned().unzip()
}

fn diff_strategy() -> impl Strategy<Value = Vec<String>> {
    any::<u64>().prop_map(|seed| random_diff(&mut ChaCha8Rng::seed_from_u64(seed)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn scores_stay_in_range(pairs in corpus_pairs()) {
        let (c, r) = unzip(&pairs);
        let rep = metrics::evaluate_corpus(&c, &r).unwrap();
        for s in [rep.bleu4, rep.rouge1, rep.rouge2, rep.rouge_l, rep.meteor] {
            prop_assert!((0.0..=100.0).contains(&s), "{s}");
        }
    }

    #[test]
    fn corpus_scores_ignore_pair_order(pairs in corpus_pairs(), shift in 0usize..12) {
        let (c, r) = unzip(&pairs);
        let mut moved = pairs.clone();
        let k = shift % moved.len();
        moved.rotate_left(k);
        moved.reverse();
        let (c2, r2) = unzip(&moved);
        let a = metrics::evaluate_corpus(&c, &r).unwrap();
        let b = metrics::evaluate_corpus(&c2, &r2).unwrap();
        prop_assert_eq!(a.bleu4, b.bleu4);
        prop_assert!((a.rouge1 - b.rouge1).abs() < 1e-9);
        prop_assert!((a.rouge2 - b.rouge2).abs() < 1e-9);
        prop_assert!((a.rouge_l - b.rouge_l).abs() < 1e-9);
        prop_assert!((a.meteor - b.meteor).abs() < 1e-9);
    }

    #[test]
    fn rouge1_dominates_rouge2(pairs in corpus_pairs()) {
        let (c, r) = unzip(&pairs);
        let r1 = metrics::rouge_n(&c, &r, 1).unwrap();
        let r2 = metrics::rouge_n(&c, &r, 2).unwrap();
        prop_assert!(r1 + 1e-12 >= r2, "{r1} < {r2}");
        prop_assert!((r1 - 100.0 * c.iter().zip(&r).map(|(a, b)| oracle_rouge_n(a, b, 1)).sum::<f64>() / c.len() as f64).abs() < 1e-9);
        prop_assert!((r2 - 100.0 * c.iter().zip(&r).map(|(a, b)| oracle_rouge_n(a, b, 2)).sum::<f64>() / c.len() as f64).abs() < 1e-9);
    }

    #[test]
    fn sentence_metrics_match_oracles(c in nonempty(20, 12), r in nonempty(20, 12)) {
        prop_assert!((metrics::sentence_bleu4_smoothed(&c, &r).unwrap() - oracle_sentence_bleu(&c, &r)).abs() < 1e-9);
        prop_assert!((metrics::sentence_rouge_l(&c, &r) - oracle_rouge_l(&c, &r)).abs() < 1e-9);
        prop_assert!((metrics::sentence_meteor(&c, &r) - oracle_meteor(&c, &r)).abs() < 1e-9);
    }

    #[test]
    fn meteor_alignment_is_optimal_on_repetitive_text(c in nonempty(3, 8), r in nonempty(3, 8)) {
        prop_assert_eq!(metrics::meteor_alignment(&c, &r), oracle_alignment(&c, &r));
    }

    #[test]
    fn nngen_reuses_training_messages(
        docs in prop::collection::vec((nonempty(10, 8), nonempty(6, 4)), 1..15),
        query in nonempty(12, 10),
        k in 1usize..6,
    ) {
        let train: Vec<CommitRecord> = docs.iter().enumerate().map(|(i, (d, m))| record(i, d.clone(), m.clone(), Split::Train)).collect();
        let index = RetrievalIndex::build(&train, k).unwrap();
        let out = coregen::baseline::nngen_generate(&index, &query).unwrap();
        prop_assert!(train.iter().any(|t| t.msg_tokens == out));
    }

    #[test]
    fn cosine_ranking_is_scale_invariant(
        docs in prop::collection::vec(nonempty(10, 8), 1..15),
        query in nonempty(12, 10),
        k in 1usize..6,
    ) {
        let train: Vec<CommitRecord> = docs.iter().enumerate().map(|(i, d)| record(i, d.clone(), toks("m"), Split::Train)).collect();
        let index = RetrievalIndex::build(&train, k).unwrap();
        let doubled: Vec<String> = query.iter().flat_map(|t| [t.clone(), t.clone()]).collect();
        let a: Vec<usize> = index.neighbors(&query).unwrap().iter().map(|n| n.doc).collect();
        let b: Vec<usize> = index.neighbors(&doubled).unwrap().iter().map(|n| n.doc).collect();
        prop_assert_eq!(a.iter().collect::<HashSet<_>>(), b.iter().collect::<HashSet<_>>());
        for (x, y) in index.cosines(&query).iter().zip(index.cosines(&doubled)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn label_subsets_are_nested(total in 1usize..500, a in 0.01f64..1.0, b in 0.01f64..1.0, seed in any::<u64>()) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        if let (Ok(small), Ok(large)) = (label_subset(total, lo, seed), label_subset(total, hi, seed)) {
            prop_assert!(small.iter().all(|i| large.binary_search(i).is_ok()));
            prop_assert!(large.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(large.iter().all(|&i| i < total));
        }
    }

    #[test]
    fn structure_commit_is_lossless(diff in diff_strategy()) {
        let c = structure_commit(&record(0, diff.clone(), toks("m"), Split::Train));
        prop_assert_eq!(c.reassemble(), diff);
        prop_assert_eq!(c.category == Category::ImplicitChange, c.before_tokens == c.after_tokens);
    }

    #[test]
    fn masked_spans_stay_in_their_line(diff in diff_strategy(), tenths in 1u32..10, seed in any::<u64>()) {
        let c = structure_commit(&record(0, diff, toks("m"), Split::Train));
        prop_assume!(c.category == Category::ImplicitChange);
        let policy = MaskPolicy::new(tenths as f64 / 10.0, seed).unwrap();
        let s = make_masked_sample(&c, &policy, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let span = s.mask_span.unwrap();
        let line_len = c.lines[span.line].len();
        prop_assert!(!span.is_empty() && span.end <= line_len);
        prop_assert_eq!(s.source.len(), c.record.diff_tokens.len());
        let offset = c.line_offset(span.line);
        prop_assert!(s.source[offset + span.start..offset + span.end].iter().all(|t| t == MASK_TOKEN));
        // nothing outside the span changes, markers included
        let changed: Vec<usize> = (0..s.source.len()).filter(|&i| s.source[i] != c.record.diff_tokens[i]).collect();
        prop_assert!(changed.iter().all(|&i| i >= offset + span.start && i < offset + span.end));
    }

    #[test]
    fn tasks_follow_categories(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let commits: Vec<_> = (0..20).map(|i| structure_commit(&record(i, random_diff(&mut rng), toks("m"), Split::Train))).collect();
        let samples = build_stage_one_dataset(&commits, &MaskPolicy::new(0.5, seed).unwrap(), true, 0);
        for s in samples {
            let cat = commits[s.origin_id].category;
            match s.task {
                TaskKind::MaskedFragment => prop_assert_eq!(cat, Category::ImplicitChange),
                TaskKind::ChangesPrediction | TaskKind::InStatementMask => prop_assert_eq!(cat, Category::ExplicitChange),
            }
        }
    }

    #[test]
    fn complete_duplicates_are_code_duplicates(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pick = |rng: &mut ChaCha8Rng, pool: &[Vec<String>]| pool[rand::Rng::gen_range(rng, 0..pool.len())].clone();
        let diffs: Vec<Vec<String>> = (0..6).map(|_| random_diff(&mut rng)).collect();
        let msgs: Vec<Vec<String>> = vec![toks("a"), toks("b")];
        let mk = |rng: &mut ChaCha8Rng, n: usize, split| -> Vec<CommitRecord> {
            (0..n).map(|i| record(i, pick(rng, &diffs), pick(rng, &msgs), split)).collect()
        };
        let (train, valid, test) = (mk(&mut rng, 5, Split::Train), mk(&mut rng, 8, Split::Valid), mk(&mut rng, 8, Split::Test));
        let rep = dedup_analyze(&train, &valid, &test);
        for s in [&rep.valid, &rep.test] {
            let code: HashSet<_> = s.offending_ids.identical_code_changes.iter().collect();
            prop_assert!(s.offending_ids.completely_identical.iter().all(|i| code.contains(i)));
        }
    }

    #[test]
    fn schedule_peaks_at_warmup(warmup in 1u64..5000, step in 1u64..20000, d in 1usize..1024) {
        let peak = lr_at_step(warmup, d, warmup);
        let lr = lr_at_step(step, d, warmup);
        prop_assert!(lr > 0.0 && lr <= peak * (1.0 + 1e-12));
    }
}
