//! Benchmark-format commit corpora: loading, diff structuring, the shared
//! vocabulary, and train/valid/test overlap analysis.
//!
//! A corpus split is a pair of line-aligned files, `<split>.diff` and
//! `<split>.msg`. Each line is a single-space separated token sequence; diff
//! lines use the `<nl>` token as the source-line separator and a leading `+`
//! or `-` token to mark added and removed lines.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NL: &str = "<nl>";
pub const ADDED_MARKER: &str = "+";
pub const REMOVED_MARKER: &str = "-";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line count mismatch: diff file has {diff} lines, message file has {msg}")]
    LineCountMismatch { diff: usize, msg: usize },
    #[error("diff line {0} has no tokens")]
    EmptyLine(usize),
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("token id {0} is outside the vocabulary")]
    UnknownId(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub id: usize,
    pub diff_tokens: Vec<String>,
    pub msg_tokens: Vec<String>,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Marker {
    Added,
    Removed,
    Context,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiffLine {
    pub marker: Marker,
    /// Tokens of the line, without the marker token.
    pub tokens: Vec<String>,
}

impl DiffLine {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of tokens the line occupies in the flat commit sequence,
    /// marker included.
    pub fn flat_len(&self) -> usize {
        self.tokens.len() + usize::from(self.marker != Marker::Context)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    /// Before and after sequences differ (C1).
    ExplicitChange,
    /// Before and after sequences coincide, e.g. binary file changes (C2).
    ImplicitChange,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedCommit {
    pub record: CommitRecord,
    pub lines: Vec<DiffLine>,
    pub before_tokens: Vec<String>,
    pub after_tokens: Vec<String>,
    pub category: Category,
}

impl TokenizedCommit {
    /// Rebuilds the flat token sequence from the structured lines.
    pub fn reassemble(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.record.diff_tokens.len());
        for (i, line) in self.lines.iter().enumerate() {
            if i > 0 {
                out.push(NL.to_string());
            }
            match line.marker {
                Marker::Added => out.push(ADDED_MARKER.to_string()),
                Marker::Removed => out.push(REMOVED_MARKER.to_string()),
                Marker::Context => {}
            }
            out.extend(line.tokens.iter().cloned());
        }
        out
    }

    /// Offset of the first content token (after the marker) of `line` in the
    /// flat commit sequence.
    pub fn line_offset(&self, line: usize) -> usize {
        let mut offset = 0;
        for l in &self.lines[..line] {
            offset += l.flat_len() + 1;
        }
        offset + usize::from(self.lines[line].marker != Marker::Context)
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text.lines().map(str::to_string).collect())
}

fn split_tokens(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

/// Pairs line `i` of the diff file with line `i` of the message file.
pub fn load_split(
    diff_path: &Path,
    msg_path: &Path,
    split: Split,
) -> Result<Vec<CommitRecord>, CorpusError> {
    let diffs = read_lines(diff_path)?;
    let msgs = read_lines(msg_path)?;
    if diffs.len() != msgs.len() {
        return Err(CorpusError::LineCountMismatch {
            diff: diffs.len(),
            msg: msgs.len(),
        });
    }
    diffs
        .iter()
        .zip(&msgs)
        .enumerate()
        .map(|(id, (diff, msg))| {
            let diff_tokens = split_tokens(diff);
            if diff_tokens.is_empty() {
                return Err(CorpusError::EmptyLine(id));
            }
            Ok(CommitRecord {
                id,
                diff_tokens,
                msg_tokens: split_tokens(msg),
                split,
            })
        })
        .collect()
}

/// Writes records in the benchmark layout (`<split>.diff` / `<split>.msg`).
pub fn write_split(dir: &Path, split: Split, records: &[CommitRecord]) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut diff = String::new();
    let mut msg = String::new();
    for r in records {
        diff.push_str(&r.diff_tokens.join(" "));
        diff.push('\n');
        msg.push_str(&r.msg_tokens.join(" "));
        msg.push('\n');
    }
    fs::write(dir.join(format!("{split}.diff")), diff)?;
    fs::write(dir.join(format!("{split}.msg")), msg)
}

/// The three benchmark splits.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub train: Vec<CommitRecord>,
    pub valid: Vec<CommitRecord>,
    pub test: Vec<CommitRecord>,
}

impl Corpus {
    pub fn load_dir(dir: &Path) -> Result<Self, CorpusError> {
        let load = |split: Split| {
            load_split(
                &dir.join(format!("{split}.diff")),
                &dir.join(format!("{split}.msg")),
                split,
            )
        };
        Ok(Corpus {
            train: load(Split::Train)?,
            valid: load(Split::Valid)?,
            test: load(Split::Test)?,
        })
    }

    pub fn write_dir(&self, dir: &Path) -> std::io::Result<()> {
        write_split(dir, Split::Train, &self.train)?;
        write_split(dir, Split::Valid, &self.valid)?;
        write_split(dir, Split::Test, &self.test)
    }
}

/// Splits a commit on `<nl>` and derives the before/after views.
pub fn structure_commit(record: &CommitRecord) -> TokenizedCommit {
    let lines: Vec<DiffLine> = record
        .diff_tokens
        .split(|t| t == NL)
        .map(|raw| match raw.first().map(String::as_str) {
            Some(ADDED_MARKER) => DiffLine {
                marker: Marker::Added,
                tokens: raw[1..].to_vec(),
            },
            Some(REMOVED_MARKER) => DiffLine {
                marker: Marker::Removed,
                tokens: raw[1..].to_vec(),
            },
            _ => DiffLine {
                marker: Marker::Context,
                tokens: raw.to_vec(),
            },
        })
        .collect();

    let mut before_tokens = Vec::new();
    let mut after_tokens = Vec::new();
    for line in &lines {
        if line.marker != Marker::Added {
            before_tokens.extend(line.tokens.iter().cloned());
        }
        if line.marker != Marker::Removed {
            after_tokens.extend(line.tokens.iter().cloned());
        }
    }
    let category = if before_tokens == after_tokens {
        Category::ImplicitChange
    } else {
        Category::ExplicitChange
    };
    TokenizedCommit {
        record: record.clone(),
        lines,
        before_tokens,
        after_tokens,
        category,
    }
}

/// Reserved token ids.
pub mod special {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    pub const UNK: u32 = 3;
    pub const MASK: u32 = 4;
    pub const NL: u32 = 5;
}

pub const SPECIAL_TOKENS: [&str; 6] = ["<pad>", "<s>", "</s>", "<unk>", "<mask>", NL];

/// Shared token/id mapping over code and message tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    #[serde(skip)]
    token_to_id: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            id_to_token: tokens,
            token_to_id,
        }
    }

    /// Builds the vocabulary from training records. Tokens are ranked by
    /// descending frequency with ties broken by first occurrence; `max_size`
    /// caps the number of non-sentinel entries.
    pub fn build(
        records: &[CommitRecord],
        min_freq: usize,
        max_size: Option<usize>,
    ) -> Result<Self, CorpusError> {
        if records.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let min_freq = min_freq.max(1);
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
        let mut order = 0usize;
        for r in records {
            for t in r.diff_tokens.iter().chain(&r.msg_tokens) {
                let entry = counts.entry(t.as_str()).or_insert_with(|| {
                    order += 1;
                    (0, order)
                });
                entry.0 += 1;
            }
        }
        let mut ranked: Vec<(&str, usize, usize)> = counts
            .into_iter()
            .filter(|(t, (c, _))| *c >= min_freq && !SPECIAL_TOKENS.contains(t))
            .map(|(t, (c, first))| (t, c, first))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        if let Some(max) = max_size {
            ranked.truncate(max);
        }
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _, _)| t.to_string()))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    /// Vocabulary size excluding the five reserved sentinels.
    pub fn regular_len(&self) -> usize {
        self.len() - 5
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(special::UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Result<&str, CorpusError> {
        self.id_to_token
            .get(id as usize)
            .map(String::as_str)
            .ok_or(CorpusError::UnknownId(id))
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>, CorpusError> {
        ids.iter().map(|&i| self.token(i).map(str::to_string)).collect()
    }

    /// One token per line.
    pub fn to_text(&self) -> String {
        let mut s = self.id_to_token.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Self {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        fs::write(path, self.to_text()).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_text(&text))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapCount {
    pub count: usize,
    pub percentage: f64,
}

impl OverlapCount {
    fn new(count: usize, total: usize) -> Self {
        OverlapCount {
            count,
            percentage: percent_2dp(count, total),
        }
    }
}

/// `100 * count / total` rounded half-up to two decimals.
pub fn percent_2dp(count: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let (count, total) = (count as u128, total as u128);
    let hundredths = (20_000 * count + total) / (2 * total);
    hundredths as f64 / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffendingIds {
    pub identical_code_changes: Vec<usize>,
    pub completely_identical: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitOverlap {
    pub total: usize,
    pub identical_code_changes: OverlapCount,
    pub completely_identical: OverlapCount,
    pub offending_ids: OffendingIds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupReport {
    pub valid: SplitOverlap,
    pub test: SplitOverlap,
}

fn split_overlap(
    train_diffs: &HashSet<&[String]>,
    train_pairs: &HashSet<(&[String], &[String])>,
    records: &[CommitRecord],
) -> SplitOverlap {
    let mut code = Vec::new();
    let mut full = Vec::new();
    for r in records {
        if train_diffs.contains(r.diff_tokens.as_slice()) {
            code.push(r.id);
            if train_pairs.contains(&(r.diff_tokens.as_slice(), r.msg_tokens.as_slice())) {
                full.push(r.id);
            }
        }
    }
    let total = records.len();
    SplitOverlap {
        total,
        identical_code_changes: OverlapCount::new(code.len(), total),
        completely_identical: OverlapCount::new(full.len(), total),
        offending_ids: OffendingIds {
            identical_code_changes: code,
            completely_identical: full,
        },
    }
}

/// Counts valid/test records whose diff (and optionally message) exactly
/// duplicates a training record.
pub fn dedup_analyze(
    train: &[CommitRecord],
    valid: &[CommitRecord],
    test: &[CommitRecord],
) -> DedupReport {
    let train_diffs: HashSet<&[String]> = train.iter().map(|r| r.diff_tokens.as_slice()).collect();
    let train_pairs: HashSet<(&[String], &[String])> = train
        .iter()
        .map(|r| (r.diff_tokens.as_slice(), r.msg_tokens.as_slice()))
        .collect();
    DedupReport {
        valid: split_overlap(&train_diffs, &train_pairs, valid),
        test: split_overlap(&train_diffs, &train_pairs, test),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DedupMode {
    DropIdenticalCode,
    DropCompletelyIdentical,
}

fn drop_ids(records: &[CommitRecord], ids: &[usize]) -> Vec<CommitRecord> {
    let ids: HashSet<usize> = ids.iter().copied().collect();
    records
        .iter()
        .filter(|r| !ids.contains(&r.id))
        .cloned()
        .collect()
}

/// Removes overlapping valid/test records; survivors keep their order.
pub fn dedup_filter(
    train: &[CommitRecord],
    valid: &[CommitRecord],
    test: &[CommitRecord],
    mode: DedupMode,
) -> (Vec<CommitRecord>, Vec<CommitRecord>) {
    let report = dedup_analyze(train, valid, test);
    let pick = |s: &SplitOverlap| match mode {
        DedupMode::DropIdenticalCode => s.offending_ids.identical_code_changes.clone(),
        DedupMode::DropCompletelyIdentical => s.offending_ids.completely_identical.clone(),
    };
    (
        drop_ids(valid, &pick(&report.valid)),
        drop_ids(test, &pick(&report.test)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn toks(s: &str) -> Vec<String> {
        split_tokens(s)
    }

    fn rec(id: usize, diff: &str, msg: &str) -> CommitRecord {
        CommitRecord {
            id,
            diff_tokens: toks(diff),
            msg_tokens: toks(msg),
            split: Split::Train,
        }
    }

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn load_single_record() {
        let dir = tempfile::tempdir().unwrap();
        let d = write(dir.path(), "a.diff", "x = 1 <nl> + y = 2\n");
        let m = write(dir.path(), "a.msg", "add y\n");
        let recs = load_split(&d, &m, Split::Train).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].diff_tokens.len(), 8);
        assert_eq!(recs[0].msg_tokens, vec!["add", "y"]);
    }

    #[test]
    fn load_assigns_sequential_ids() {
        let dir = tempfile::tempdir().unwrap();
        let d = write(dir.path(), "a.diff", "a\nb\nc\n");
        let m = write(dir.path(), "a.msg", "x\ny\nz\n");
        let ids: Vec<usize> = load_split(&d, &m, Split::Test)
            .unwrap()
            .iter()
            .map(|r| r.id)
            .collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn load_rejects_mismatched_files() {
        let dir = tempfile::tempdir().unwrap();
        let d = write(dir.path(), "a.diff", &"a\n".repeat(10));
        let m = write(dir.path(), "a.msg", &"b\n".repeat(9));
        assert!(matches!(
            load_split(&d, &m, Split::Train),
            Err(CorpusError::LineCountMismatch { diff: 10, msg: 9 })
        ));
    }

    #[test]
    fn load_rejects_blank_diff() {
        let dir = tempfile::tempdir().unwrap();
        let d = write(dir.path(), "a.diff", "a\n   \n");
        let m = write(dir.path(), "a.msg", "b\nc\n");
        assert!(matches!(
            load_split(&d, &m, Split::Train),
            Err(CorpusError::EmptyLine(1))
        ));
    }

    #[test]
    fn structure_explicit_addition() {
        let c = structure_commit(&rec(0, "a b <nl> + c d", "m"));
        assert_eq!(c.before_tokens, toks("a b"));
        assert_eq!(c.after_tokens, toks("a b c d"));
        assert_eq!(c.category, Category::ExplicitChange);
        assert_eq!(c.lines[1].marker, Marker::Added);
    }

    #[test]
    fn structure_binary_change_is_implicit() {
        let c = structure_commit(&rec(0, "Binary files a and b differ", "m"));
        assert_eq!(c.lines.len(), 1);
        assert_eq!(c.before_tokens, c.after_tokens);
        assert_eq!(c.category, Category::ImplicitChange);
    }

    #[test]
    fn structure_noop_change_is_implicit() {
        let c = structure_commit(&rec(0, "- a <nl> + a", "m"));
        assert_eq!(c.before_tokens, toks("a"));
        assert_eq!(c.after_tokens, toks("a"));
        assert_eq!(c.category, Category::ImplicitChange);
    }

    #[test]
    fn metadata_lines_are_context() {
        let c = structure_commit(&rec(0, "mmm a / f <nl> ppp b / f <nl> - x", "m"));
        assert_eq!(c.lines[0].marker, Marker::Context);
        assert_eq!(c.lines[1].marker, Marker::Context);
        assert_eq!(c.reassemble(), c.record.diff_tokens);
    }

    #[test]
    fn line_offsets_point_past_markers() {
        let c = structure_commit(&rec(0, "a b <nl> + c d <nl> e", "m"));
        assert_eq!(c.line_offset(0), 0);
        assert_eq!(c.line_offset(1), 4);
        assert_eq!(c.line_offset(2), 7);
        assert_eq!(c.record.diff_tokens[4], "c");
        assert_eq!(c.record.diff_tokens[7], "e");
    }

    #[test]
    fn vocabulary_orders_by_frequency() {
        let v = Vocabulary::build(&[rec(0, "a a b", "")], 1, None).unwrap();
        assert_eq!(v.tokens()[..6], SPECIAL_TOKENS.map(String::from));
        assert!(v.id("a") < v.id("b"));
        assert_eq!(v.len(), 8);
    }

    #[test]
    fn vocabulary_ties_follow_first_occurrence() {
        let v = Vocabulary::build(&[rec(0, "c b a", "a b c")], 1, None).unwrap();
        assert_eq!(&v.tokens()[6..], &toks("c b a")[..]);
    }

    #[test]
    fn vocabulary_min_freq_and_cap() {
        let v = Vocabulary::build(&[rec(0, "a b", "")], 2, None).unwrap();
        assert_eq!(v.len(), SPECIAL_TOKENS.len());
        assert_eq!(v.encode(&["a", "b"]), vec![special::UNK; 2]);
        let v = Vocabulary::build(&[rec(0, "a a a b b c", "")], 1, Some(2)).unwrap();
        assert_eq!(&v.tokens()[6..], &toks("a b")[..]);
        assert!(matches!(
            Vocabulary::build(&[], 1, None),
            Err(CorpusError::EmptyCorpus)
        ));
    }

    #[test]
    fn encode_decode() {
        let v = Vocabulary::build(&[rec(0, "a b <nl> c", "d")], 1, None).unwrap();
        let t = toks("a <nl> d c");
        assert_eq!(v.decode(&v.encode(&t)).unwrap(), t);
        assert_eq!(v.encode(&["zzz"]), vec![3]);
        assert_eq!(v.id(NL), special::NL);
        let bad = v.len() as u32 + 7;
        assert!(matches!(v.decode(&[bad]), Err(CorpusError::UnknownId(x)) if x == bad));
        assert_eq!(Vocabulary::from_text(&v.to_text()), v);
    }

    #[test]
    fn percentages_round_half_up() {
        assert_eq!(percent_2dp(267, 2511), 10.63);
        assert_eq!(percent_2dp(119, 2511), 4.74);
        assert_eq!(percent_2dp(282, 2521), 11.19);
        assert_eq!(percent_2dp(119, 2521), 4.72);
        assert_eq!(percent_2dp(1, 8), 12.5);
        assert_eq!(percent_2dp(1, 800), 0.13);
        assert_eq!(percent_2dp(0, 0), 0.0);
    }

    #[test]
    fn dedup_counts_planted_overlaps() {
        let train: Vec<_> = (0..10).map(|i| rec(i, &format!("t{i} x"), &format!("m{i}"))).collect();
        let mut test: Vec<_> = (0..10).map(|i| rec(i, &format!("u{i} y"), "q")).collect();
        for (i, r) in test.iter_mut().take(3).enumerate() {
            r.diff_tokens = train[i].diff_tokens.clone();
        }
        test[0].msg_tokens = train[0].msg_tokens.clone();
        let report = dedup_analyze(&train, &[], &test);
        assert_eq!(report.test.identical_code_changes.count, 3);
        assert_eq!(report.test.completely_identical.count, 1);
        assert_eq!(report.test.offending_ids.identical_code_changes, vec![0, 1, 2]);
        assert_eq!(report.valid.total, 0);

        let (_, t) = dedup_filter(&train, &[], &test, DedupMode::DropIdenticalCode);
        assert_eq!(t.len(), 7);
        assert_eq!(t[0].id, 3);
        let (_, t) = dedup_filter(&train, &[], &test, DedupMode::DropCompletelyIdentical);
        assert_eq!(t.len(), 9);
    }

    #[test]
    fn dedup_disjoint_is_noop() {
        let train = vec![rec(0, "a", "b")];
        let valid = vec![rec(0, "c", "d")];
        let test = vec![rec(0, "e", "f")];
        let report = dedup_analyze(&train, &valid, &test);
        assert_eq!(report.valid.identical_code_changes.count, 0);
        assert_eq!(report.test.completely_identical.count, 0);
        let (v, t) = dedup_filter(&train, &valid, &test, DedupMode::DropIdenticalCode);
        assert_eq!((v, t), (valid, test));
    }
}
