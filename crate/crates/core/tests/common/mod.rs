//! Shared helpers for the integration tests: independent brute-force metric
//! oracles, random commit generators, and criterion reporting.
#![allow(dead_code)]

use coregen::corpus::{CommitRecord, Split};
use rand::Rng;

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Prints one result line and returns whether it passed.
pub fn report(criterion: &str, check: &str, pass: bool, detail: impl std::fmt::Display) -> bool {
    println!(
        "[criterion {criterion}] {check}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

pub fn record(id: usize, diff: Vec<String>, msg: Vec<String>, split: Split) -> CommitRecord {
    CommitRecord {
        id,
        diff_tokens: diff,
        msg_tokens: msg,
        split,
    }
}

/// Random token sequence over `w0 .. w{vocab-1}`.
pub fn random_sentence<R: Rng>(rng: &mut R, vocab: usize, min_len: usize, max_len: usize) -> Vec<String> {
    let n = rng.gen_range(min_len..=max_len);
    (0..n).map(|_| format!("w{}", rng.gen_range(0..vocab))).collect()
}

/// A random diff: lines of random tokens, each line a context, added or
/// removed line; sometimes all-context (an implicit change).
pub fn random_diff<R: Rng>(rng: &mut R) -> Vec<String> {
    let lines = rng.gen_range(1..=6);
    let all_context = rng.gen_bool(0.3);
    let mut out = Vec::new();
    for i in 0..lines {
        if i > 0 {
            out.push("<nl>".to_string());
        }
        if !all_context {
            match rng.gen_range(0..3) {
                0 => out.push("+".to_string()),
                1 => out.push("-".to_string()),
                _ => {}
            }
        }
        let n = rng.gen_range(1..=9);
        for _ in 0..n {
            out.push(format!("t{}", rng.gen_range(0..12)));
        }
    }
    out
}

// ---- brute-force metric oracles ----

fn count_occurrences(seq: &[String], gram: &[String]) -> usize {
    if gram.len() > seq.len() {
        return 0;
    }
    (0..=seq.len() - gram.len())
        .filter(|&i| &seq[i..i + gram.len()] == gram)
        .count()
}

/// Clipped matches summed over distinct candidate n-grams, by rescanning.
pub fn oracle_clipped(cand: &[String], reference: &[String], n: usize) -> (usize, usize) {
    if cand.len() < n {
        return (0, 0);
    }
    let mut seen: Vec<&[String]> = Vec::new();
    let mut matched = 0;
    for i in 0..=cand.len() - n {
        let g = &cand[i..i + n];
        if seen.contains(&g) {
            continue;
        }
        seen.push(g);
        matched += count_occurrences(cand, g).min(count_occurrences(reference, g));
    }
    (matched, cand.len() - n + 1)
}

pub fn oracle_corpus_bleu(cands: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let mut logs = 0.0;
    for n in 1..=4 {
        let (mut m, mut d) = (0usize, 0usize);
        for (c, r) in cands.iter().zip(refs) {
            let (a, b) = oracle_clipped(c, r, n);
            m += a;
            d += b;
        }
        if m == 0 || d == 0 {
            return 0.0;
        }
        logs += (m as f64 / d as f64).ln();
    }
    let c: usize = cands.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    100.0 * bp * (logs / 4.0).exp()
}

pub fn oracle_sentence_bleu(c: &[String], r: &[String]) -> f64 {
    let mut prod = 1.0f64;
    for n in 1..=4 {
        let (m, d) = oracle_clipped(c, r, n);
        let p = if n == 1 {
            m as f64 / d as f64
        } else {
            (m as f64 + 1.0) / (d as f64 + 1.0)
        };
        prod *= p;
    }
    if prod == 0.0 {
        return 0.0;
    }
    let bp = if c.len() < r.len() {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    } else {
        1.0
    };
    100.0 * bp * prod.powf(0.25)
}

fn harmonic(overlap: f64, c: f64, r: f64) -> f64 {
    if overlap == 0.0 || c == 0.0 || r == 0.0 {
        return 0.0;
    }
    let (p, rec) = (overlap / c, overlap / r);
    2.0 * p * rec / (p + rec)
}

pub fn oracle_rouge_n(c: &[String], r: &[String], n: usize) -> f64 {
    let (m, cd) = oracle_clipped(c, r, n);
    harmonic(m as f64, cd as f64, r.len().saturating_sub(n - 1) as f64)
}

fn is_subsequence(needle: &[&String], hay: &[String]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|x| it.any(|y| y == *x))
}

/// Longest common subsequence by enumerating candidate subsequences.
pub fn oracle_lcs(c: &[String], r: &[String]) -> usize {
    assert!(c.len() <= 16);
    let mut best = 0;
    for mask in 0u32..(1 << c.len()) {
        let k = mask.count_ones() as usize;
        if k <= best {
            continue;
        }
        let sub: Vec<&String> = (0..c.len()).filter(|i| mask >> i & 1 == 1).map(|i| &c[i]).collect();
        if is_subsequence(&sub, r) {
            best = k;
        }
    }
    best
}

pub fn oracle_rouge_l(c: &[String], r: &[String]) -> f64 {
    harmonic(oracle_lcs(c, r) as f64, c.len() as f64, r.len() as f64)
}

/// Enumerates every one-to-one partial alignment of equal tokens; returns
/// the maximum match count and the fewest chunks among maximum alignments.
pub fn oracle_alignment(c: &[String], r: &[String]) -> (usize, usize) {
    fn chunks(pairs: &[(usize, usize)]) -> usize {
        let mut n = 0;
        for (k, &(i, j)) in pairs.iter().enumerate() {
            if k == 0 || !(pairs[k - 1].0 + 1 == i && pairs[k - 1].1 + 1 == j) {
                n += 1;
            }
        }
        n
    }
    fn go(
        i: usize,
        c: &[String],
        r: &[String],
        used: &mut Vec<bool>,
        pairs: &mut Vec<(usize, usize)>,
        best: &mut (usize, usize),
    ) {
        if i == c.len() {
            let m = pairs.len();
            let ch = chunks(pairs);
            if m > best.0 || (m == best.0 && ch < best.1) {
                *best = (m, ch);
            }
            return;
        }
        go(i + 1, c, r, used, pairs, best);
        for j in 0..r.len() {
            if !used[j] && r[j] == c[i] {
                used[j] = true;
                pairs.push((i, j));
                go(i + 1, c, r, used, pairs, best);
                pairs.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, 0);
    go(0, c, r, &mut vec![false; r.len()], &mut Vec::new(), &mut best);
    best
}

pub fn oracle_meteor(c: &[String], r: &[String]) -> f64 {
    let (m, ch) = oracle_alignment(c, r);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / c.len() as f64;
    let rec = m as f64 / r.len() as f64;
    let f = 10.0 * p * rec / (rec + 9.0 * p);
    f * (1.0 - 0.5 * (ch as f64 / m as f64).powi(3))
}
