//! Stage-I self-supervised sample construction.
//!
//! Explicit-change commits become code-changes pairs (before -> after) and,
//! optionally, in-statement masked-token samples. Implicit-change commits
//! become masked-fragment samples over their longest line.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Category, TokenizedCommit};
use crate::rng;

pub const MASK_TOKEN: &str = "<mask>";
pub const DEFAULT_ICSM_CAP: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum TaskError {
    #[error("commit {id} has category {found:?}, task needs {expected:?}")]
    WrongCategory {
        id: usize,
        expected: Category,
        found: Category,
    },
    #[error("longest line of commit {0} has no tokens")]
    EmptyLine(usize),
    #[error("mask rate must lie in (0, 1), got {0}")]
    InvalidMaskRate(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    ChangesPrediction,
    MaskedFragment,
    InStatementMask,
}

/// Masked region in line-local token coordinates, `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpan {
    pub line: usize,
    pub start: usize,
    pub end: usize,
}

impl MaskSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageOneSample {
    pub task: TaskKind,
    pub origin_id: usize,
    pub mask_span: Option<MaskSpan>,
    pub source: Vec<String>,
    pub target: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskPolicy {
    pub mask_rate: f64,
    pub rng_seed: u64,
}

impl MaskPolicy {
    pub fn new(mask_rate: f64, rng_seed: u64) -> Result<Self, TaskError> {
        if !(mask_rate > 0.0 && mask_rate < 1.0) {
            return Err(TaskError::InvalidMaskRate(mask_rate));
        }
        Ok(MaskPolicy {
            mask_rate,
            rng_seed,
        })
    }

    /// `max(1, floor(rate * line_len))`. The small offset keeps products such
    /// as `0.3 * 10` from flooring to 2 through representation error.
    pub fn span_len(&self, line_len: usize) -> usize {
        ((self.mask_rate * line_len as f64 + 1e-9).floor() as usize).clamp(1, line_len.max(1))
    }
}

fn expect_category(commit: &TokenizedCommit, expected: Category) -> Result<(), TaskError> {
    if commit.category != expected {
        return Err(TaskError::WrongCategory {
            id: commit.record.id,
            expected,
            found: commit.category,
        });
    }
    Ok(())
}

pub fn make_change_pair(commit: &TokenizedCommit) -> Result<StageOneSample, TaskError> {
    expect_category(commit, Category::ExplicitChange)?;
    Ok(StageOneSample {
        task: TaskKind::ChangesPrediction,
        origin_id: commit.record.id,
        mask_span: None,
        source: commit.before_tokens.clone(),
        target: commit.after_tokens.clone(),
    })
}

/// Index of the line with the most content tokens; the first one wins ties.
pub fn select_longest_line(commit: &TokenizedCommit) -> usize {
    let mut best = 0;
    for (i, line) in commit.lines.iter().enumerate() {
        if line.len() > commit.lines[best].len() {
            best = i;
        }
    }
    best
}

fn masked_copy(commit: &TokenizedCommit, span: MaskSpan) -> (Vec<String>, Vec<String>) {
    let offset = commit.line_offset(span.line);
    let mut source = commit.record.diff_tokens.clone();
    let target = source[offset + span.start..offset + span.end].to_vec();
    for tok in &mut source[offset + span.start..offset + span.end] {
        *tok = MASK_TOKEN.to_string();
    }
    (source, target)
}

pub fn make_masked_sample<R: Rng>(
    commit: &TokenizedCommit,
    policy: &MaskPolicy,
    rng: &mut R,
) -> Result<StageOneSample, TaskError> {
    expect_category(commit, Category::ImplicitChange)?;
    let line = select_longest_line(commit);
    let line_len = commit.lines[line].len();
    if line_len == 0 {
        return Err(TaskError::EmptyLine(commit.record.id));
    }
    let len = policy.span_len(line_len);
    let start = rng.gen_range(0..=line_len - len);
    let span = MaskSpan {
        line,
        start,
        end: start + len,
    };
    let (source, target) = masked_copy(commit, span);
    Ok(StageOneSample {
        task: TaskKind::MaskedFragment,
        origin_id: commit.record.id,
        mask_span: Some(span),
        source,
        target,
    })
}

/// One single-token mask per eligible statement (at least two tokens), at
/// most `max_per_commit` statements chosen uniformly.
pub fn make_icsm_samples<R: Rng>(
    commit: &TokenizedCommit,
    rng: &mut R,
    max_per_commit: usize,
) -> Vec<StageOneSample> {
    let eligible: Vec<usize> = commit
        .lines
        .iter()
        .enumerate()
        .filter(|(_, l)| l.len() >= 2)
        .map(|(i, _)| i)
        .collect();
    let mut chosen: Vec<usize> = if eligible.len() > max_per_commit {
        index::sample(rng, eligible.len(), max_per_commit)
            .into_iter()
            .map(|i| eligible[i])
            .collect()
    } else {
        eligible
    };
    chosen.sort_unstable();
    chosen
        .into_iter()
        .map(|line| {
            let start = rng.gen_range(0..commit.lines[line].len());
            let span = MaskSpan {
                line,
                start,
                end: start + 1,
            };
            let (source, target) = masked_copy(commit, span);
            StageOneSample {
                task: TaskKind::InStatementMask,
                origin_id: commit.record.id,
                mask_span: Some(span),
                source,
                target,
            }
        })
        .collect()
}

/// Samples for one Stage-I epoch. Each commit draws from its own stream keyed
/// by `(seed, task, epoch, commit id)`, so the result does not depend on
/// iteration order. Implicit-change commits whose lines are all empty are
/// skipped.
pub fn build_stage_one_dataset(
    commits: &[TokenizedCommit],
    policy: &MaskPolicy,
    icsm_enabled: bool,
    epoch: u64,
) -> Vec<StageOneSample> {
    let mut out = Vec::with_capacity(commits.len());
    for commit in commits {
        let id = commit.record.id as u64;
        match commit.category {
            Category::ExplicitChange => {
                out.push(make_change_pair(commit).expect("category checked"));
                if icsm_enabled {
                    let mut r = rng::stream(policy.rng_seed, &[rng::salt::ICSM, epoch, id]);
                    out.extend(make_icsm_samples(commit, &mut r, DEFAULT_ICSM_CAP));
                }
            }
            Category::ImplicitChange => {
                let mut r =
                    rng::stream(policy.rng_seed, &[rng::salt::MASKED_FRAGMENT, epoch, id]);
                if let Ok(sample) = make_masked_sample(commit, policy, &mut r) {
                    out.push(sample);
                }
            }
        }
    }
    out
}

/// Writes the masked target back into the source at the recorded span.
pub fn reconstruct(commit: &TokenizedCommit, sample: &StageOneSample) -> Option<Vec<String>> {
    let span = sample.mask_span?;
    let offset = commit.line_offset(span.line);
    let mut seq = sample.source.clone();
    seq.get_mut(offset + span.start..offset + span.end)?
        .clone_from_slice(&sample.target);
    Some(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{structure_commit, CommitRecord, Split};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn commit(id: usize, diff: &str) -> TokenizedCommit {
        structure_commit(&CommitRecord {
            id,
            diff_tokens: diff.split_whitespace().map(String::from).collect(),
            msg_tokens: vec!["m".into()],
            split: Split::Train,
        })
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn change_pairs() {
        let s = make_change_pair(&commit(0, "a b <nl> + c")).unwrap();
        assert_eq!((s.source, s.target), (toks("a b"), toks("a b c")));
        let s = make_change_pair(&commit(0, "a <nl> - b")).unwrap();
        assert_eq!((s.source, s.target), (toks("a b"), toks("a")));
        assert!(matches!(
            make_change_pair(&commit(0, "Binary files a and b differ")),
            Err(TaskError::WrongCategory { .. })
        ));
    }

    #[test]
    fn longest_line_selection() {
        assert_eq!(select_longest_line(&commit(0, "a b c <nl> a b c d e <nl> a b")), 1);
        assert_eq!(select_longest_line(&commit(0, "a b c d <nl> e f g h")), 0);
        assert_eq!(select_longest_line(&commit(0, "a b")), 0);
        // marker is not counted
        assert_eq!(select_longest_line(&commit(0, "a b <nl> + c d")), 0);
    }

    #[test]
    fn span_length_formula() {
        let p = MaskPolicy::new(0.5, 0).unwrap();
        assert_eq!(p.span_len(10), 5);
        assert_eq!(p.span_len(7), 3);
        assert_eq!(p.span_len(1), 1);
        assert_eq!(MaskPolicy::new(0.3, 0).unwrap().span_len(10), 3);
        assert!(MaskPolicy::new(0.0, 0).is_err());
        assert!(MaskPolicy::new(1.0, 0).is_err());
    }

    #[test]
    fn single_token_line_masks_whole_line() {
        let c = commit(3, "- x <nl> + x");
        let p = MaskPolicy::new(0.9, 0).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let s = make_masked_sample(&c, &p, &mut r).unwrap();
        assert_eq!(s.mask_span, Some(MaskSpan { line: 0, start: 0, end: 1 }));
        assert_eq!(s.source, toks("- <mask> <nl> + x"));
        assert_eq!(s.target, toks("x"));
        assert_eq!(reconstruct(&c, &s).unwrap(), c.record.diff_tokens);
    }

    #[test]
    fn masked_sample_rejects_explicit_and_empty() {
        let p = MaskPolicy::new(0.5, 0).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            make_masked_sample(&commit(0, "+ a"), &p, &mut r),
            Err(TaskError::WrongCategory { .. })
        ));
        assert_eq!(
            make_masked_sample(&commit(4, "+ <nl> -"), &p, &mut r),
            Err(TaskError::EmptyLine(4))
        );
    }

    #[test]
    fn icsm_eligibility_and_cap() {
        let c = commit(0, "+ a b c <nl> d <nl> e f g h");
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let s = make_icsm_samples(&c, &mut r, 8);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].mask_span.unwrap().line, 0);
        assert_eq!(s[1].mask_span.unwrap().line, 2);
        for x in &s {
            assert_eq!(x.target.len(), 1);
            assert_eq!(x.source.iter().filter(|t| *t == MASK_TOKEN).count(), 1);
            assert_eq!(reconstruct(&c, x).unwrap(), c.record.diff_tokens);
            // the marker is never masked
            assert_eq!(x.source[0], "+");
        }
        assert!(make_icsm_samples(&commit(0, "+ a <nl> b"), &mut r, 8).is_empty());
        let many = (0..12).map(|i| format!("x{i} y")).collect::<Vec<_>>().join(" <nl> ");
        let c = commit(0, &format!("+ q r <nl> {many}"));
        assert_eq!(make_icsm_samples(&c, &mut r, 8).len(), 8);
    }

    #[test]
    fn dataset_composition_and_epochs() {
        let commits = vec![
            commit(0, "a <nl> + b"),
            commit(1, "Binary files a / x and b / x differ"),
            commit(2, "- c"),
            commit(3, "Binary files a / y . png and b / y . png differ"),
            commit(4, "d <nl> + e f"),
        ];
        let p = MaskPolicy::new(0.5, 11).unwrap();
        let e0 = build_stage_one_dataset(&commits, &p, false, 0);
        assert_eq!(e0.len(), 5);
        assert_eq!(build_stage_one_dataset(&commits, &p, false, 0), e0);
        let changes = |d: &[StageOneSample]| {
            d.iter()
                .filter(|s| s.task == TaskKind::ChangesPrediction)
                .cloned()
                .collect::<Vec<_>>()
        };
        let spans = |d: &[StageOneSample]| d.iter().map(|s| s.mask_span).collect::<Vec<_>>();
        let mut differs = false;
        for epoch in 1..20 {
            let e = build_stage_one_dataset(&commits, &p, false, epoch);
            assert_eq!(changes(&e), changes(&e0));
            differs |= spans(&e) != spans(&e0);
        }
        assert!(differs, "masked spans never re-drawn across epochs");
        assert!(build_stage_one_dataset(&[], &p, true, 0).is_empty());
        let with_icsm = build_stage_one_dataset(&commits, &p, true, 0);
        assert_eq!(
            with_icsm
                .iter()
                .filter(|s| s.task == TaskKind::InStatementMask)
                .count(),
            1
        );
    }
}
