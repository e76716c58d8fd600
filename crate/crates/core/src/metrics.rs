//! Corpus BLEU-4, ROUGE-1/2/L (F1), exact-match METEOR, and the smoothed
//! sentence BLEU used for retrieval re-ranking. All scores are on a 0-100
//! scale.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{candidates} candidates vs {references} references")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("no sentence pairs to score")]
    EmptyCorpus,
    #[error("sentence BLEU needs non-empty candidate and reference")]
    EmptyInput,
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;

fn check_lengths<A, B>(c: &[A], r: &[B]) -> Result<(), MetricsError> {
    if c.len() != r.len() {
        return Err(MetricsError::LengthMismatch {
            candidates: c.len(),
            references: r.len(),
        });
    }
    Ok(())
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped n-gram matches and the candidate n-gram total.
fn clipped<S: AsRef<str>>(cand: &[S], reference: &[S], n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let matched = c
        .iter()
        .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, cand.len().saturating_sub(n - 1))
}

fn bleu_from_parts(precisions: [f64; 4], cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 || precisions.iter().any(|&p| p <= 0.0) {
        return 0.0;
    }
    let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0;
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    100.0 * bp * log_mean.exp()
}

pub fn corpus_bleu4<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>]) -> Result<f64, MetricsError> {
    check_lengths(candidates, references)?;
    if candidates.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut num = [0usize; 4];
    let mut den = [0usize; 4];
    let (mut c_len, mut r_len) = (0, 0);
    for (c, r) in candidates.iter().zip(references) {
        for n in 1..=4 {
            let (m, d) = clipped(c, r, n);
            num[n - 1] += m;
            den[n - 1] += d;
        }
        c_len += c.len();
        r_len += r.len();
    }
    let mut p = [0.0; 4];
    for i in 0..4 {
        p[i] = if den[i] == 0 { 0.0 } else { num[i] as f64 / den[i] as f64 };
    }
    Ok(bleu_from_parts(p, c_len, r_len))
}

/// Sentence BLEU-4 with add-one smoothing on the 2..4-gram precisions.
pub fn sentence_bleu4_smoothed<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> Result<f64, MetricsError> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut p = [0.0; 4];
    for n in 1..=4 {
        let (m, d) = clipped(candidate, reference, n);
        p[n - 1] = if n == 1 {
            m as f64 / d as f64
        } else {
            (m + 1) as f64 / (d + 1) as f64
        };
    }
    Ok(bleu_from_parts(p, candidate.len(), reference.len()))
}

fn f1(overlap: usize, cand_total: usize, ref_total: usize) -> f64 {
    if overlap == 0 || cand_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand_total as f64;
    let r = overlap as f64 / ref_total as f64;
    2.0 * p * r / (p + r)
}

/// Sentence ROUGE-N F1 in [0, 1].
pub fn sentence_rouge_n<S: AsRef<str>>(cand: &[S], reference: &[S], n: usize) -> f64 {
    let (m, c_total) = clipped(cand, reference, n);
    f1(m, c_total, reference.len().saturating_sub(n - 1))
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence ROUGE-L F1 in [0, 1].
pub fn sentence_rouge_l<S: AsRef<str>>(cand: &[S], reference: &[S]) -> f64 {
    f1(lcs_len(cand, reference), cand.len(), reference.len())
}

fn mean_x100<S, F>(candidates: &[Vec<S>], references: &[Vec<S>], f: F) -> Result<f64, MetricsError>
where
    F: Fn(&[S], &[S]) -> f64,
{
    check_lengths(candidates, references)?;
    if candidates.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let sum: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| f(c, r))
        .sum();
    Ok(100.0 * sum / candidates.len() as f64)
}

pub fn rouge_n<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>], n: usize) -> Result<f64, MetricsError> {
    mean_x100(candidates, references, |c, r| sentence_rouge_n(c, r, n))
}

pub fn rouge_l<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>]) -> Result<f64, MetricsError> {
    mean_x100(candidates, references, sentence_rouge_l)
}

/// Maximum one-to-one exact alignment between candidate and reference
/// positions; among maximum alignments, one with the fewest chunks.
/// Returns `(matches, chunks)`.
pub fn meteor_alignment<S: AsRef<str>>(cand: &[S], reference: &[S]) -> (usize, usize) {
    let mut ref_pos: HashMap<&str, Vec<usize>> = HashMap::new();
    for (j, t) in reference.iter().enumerate() {
        ref_pos.entry(t.as_ref()).or_default().push(j);
    }
    let mut cand_left: HashMap<&str, usize> = HashMap::new();
    for t in cand {
        *cand_left.entry(t.as_ref()).or_insert(0) += 1;
    }
    // matches available per type: min(count in cand, count in ref)
    let mut need: HashMap<&str, usize> = HashMap::new();
    let mut m = 0;
    for (t, &c) in &cand_left {
        let k = c.min(ref_pos.get(t).map_or(0, Vec::len));
        if k > 0 {
            need.insert(t, k);
            m += k;
        }
    }
    if m == 0 {
        return (0, 0);
    }
    let tokens: Vec<&str> = cand.iter().map(AsRef::as_ref).collect();
    let mut search = ChunkSearch {
        tokens: &tokens,
        ref_pos: &ref_pos,
        used: vec![false; reference.len()],
        need,
        cand_left,
        best: usize::MAX,
    };
    search.run(0, None, 0);
    (m, search.best)
}

struct ChunkSearch<'a> {
    tokens: &'a [&'a str],
    ref_pos: &'a HashMap<&'a str, Vec<usize>>,
    used: Vec<bool>,
    /// Matches still to be placed per type.
    need: HashMap<&'a str, usize>,
    /// Candidate occurrences not yet visited per type.
    cand_left: HashMap<&'a str, usize>,
    best: usize,
}

impl ChunkSearch<'_> {
    /// Branch and bound over candidate positions. `prev` is the reference
    /// position matched by candidate position `i - 1`, if any.
    fn run(&mut self, i: usize, prev: Option<usize>, chunks: usize) {
        if chunks >= self.best {
            return;
        }
        if i == self.tokens.len() {
            self.best = chunks;
            return;
        }
        let t = self.tokens[i];
        let need = self.need.get(t).copied().unwrap_or(0);
        let left = self.cand_left[t];
        *self.cand_left.get_mut(t).unwrap() -= 1;
        if need > 0 {
            self.need.insert(t, need - 1);
            // continuing the current chunk first finds good bounds early
            let positions = &self.ref_pos[t];
            let cont = prev.map(|p| p + 1);
            let mut order: Vec<usize> = positions.iter().copied().filter(|&j| !self.used[j]).collect();
            order.sort_by_key(|&j| (Some(j) != cont, j));
            for j in order {
                self.used[j] = true;
                let extra = usize::from(Some(j) != cont);
                self.run(i + 1, Some(j), chunks + extra);
                self.used[j] = false;
            }
            self.need.insert(t, need);
        }
        // leaving this occurrence unmatched is allowed only when later
        // occurrences can still supply every needed match
        if need < left {
            self.run(i + 1, None, chunks);
        }
        *self.cand_left.get_mut(t).unwrap() += 1;
    }
}

/// Sentence METEOR (exact matching only) in [0, 1].
pub fn sentence_meteor<S: AsRef<str>>(cand: &[S], reference: &[S]) -> f64 {
    let (m, chunks) = meteor_alignment(cand, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunks as f64 / m as f64).powf(METEOR_BETA);
    f_mean * (1.0 - penalty)
}

pub fn meteor<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>]) -> Result<f64, MetricsError> {
    mean_x100(candidates, references, sentence_meteor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub sentences: usize,
    pub candidate_tokens: usize,
    pub reference_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricVariants {
    pub bleu: String,
    pub rouge: String,
    pub meteor: String,
}

impl Default for MetricVariants {
    fn default() -> Self {
        MetricVariants {
            bleu: "corpus-level BLEU-4, clipped precisions, uniform weights, no smoothing".into(),
            rouge: "F1 (beta = 1), mean over sentences".into(),
            meteor: format!(
                "exact matching only (no stemming, synonyms or paraphrases); alpha {METEOR_ALPHA}, beta {METEOR_BETA}, gamma {METEOR_GAMMA}; minimum-chunk alignment"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub meteor: f64,
    pub counts: MetricCounts,
    pub variants: MetricVariants,
}

pub fn evaluate_corpus<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>]) -> Result<MetricReport, MetricsError> {
    Ok(MetricReport {
        bleu4: corpus_bleu4(candidates, references)?,
        rouge1: rouge_n(candidates, references, 1)?,
        rouge2: rouge_n(candidates, references, 2)?,
        rouge_l: rouge_l(candidates, references)?,
        meteor: meteor(candidates, references)?,
        counts: MetricCounts {
            sentences: candidates.len(),
            candidate_tokens: candidates.iter().map(Vec::len).sum(),
            reference_tokens: references.iter().map(Vec::len).sum(),
        },
        variants: MetricVariants::default(),
    })
}

/// Reads a file with one space-tokenized sentence per line. Blank lines are
/// empty sentences.
pub fn read_sentences(path: &Path) -> Result<Vec<Vec<String>>, MetricsError> {
    let text = std::fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

pub fn evaluate_files(candidates: &Path, references: &Path) -> Result<MetricReport, MetricsError> {
    evaluate_corpus(&read_sentences(candidates)?, &read_sentences(references)?)
}
