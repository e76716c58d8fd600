//! Seeded synthetic commit corpora in the benchmark layout.
//!
//! Diffs look like small Java edits (file header lines, context statements
//! and one templated change); the message is a deterministic function of the
//! changed tokens, e.g. `rename userCount to itemCount`. A fraction of the
//! commits are binary-file changes whose before and after views coincide.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CommitRecord, Corpus, Split};
use crate::rng;

const STEMS: [&str; 15] = [
    "user", "item", "count", "name", "value", "index", "size", "buffer", "config", "path", "node",
    "list", "map", "key", "result",
];
const SUFFIXES: [&str; 10] = ["", "Id", "Count", "Name", "List", "Map", "Size", "Value", "Index", "Path"];
const CLASSES: [&str; 15] = [
    "User", "Item", "Order", "Cache", "Config", "Parser", "Loader", "Writer", "Reader", "Client",
    "Server", "Session", "Queue", "Store", "Router",
];
const ROLES: [&str; 3] = ["Manager", "Util", "Service"];
const TYPES: [&str; 5] = ["int", "long", "String", "boolean", "double"];
const ASSETS: [&str; 4] = ["png", "jar", "gif", "ico"];

const SYNTH_SALT: u64 = 0x5e_ed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub commits: usize,
    /// Share of binary-file (implicit change) commits.
    pub implicit_fraction: f64,
    pub train_fraction: f64,
    pub valid_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            commits: 1000,
            implicit_fraction: 0.2,
            train_fraction: 0.8,
            valid_fraction: 0.1,
            seed: 0,
        }
    }
}

fn identifiers() -> Vec<String> {
    let mut out = Vec::new();
    for stem in STEMS {
        for suf in SUFFIXES {
            out.push(format!("{stem}{suf}"));
        }
    }
    out
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

struct Generator {
    rng: ChaCha8Rng,
    idents: Vec<String>,
}

impl Generator {
    fn new(seed: u64) -> Self {
        Generator {
            rng: rng::stream(seed, &[SYNTH_SALT]),
            idents: identifiers(),
        }
    }

    fn pick<'a>(&mut self, xs: &'a [&'a str]) -> &'a str {
        xs.choose(&mut self.rng).unwrap()
    }

    fn ident(&mut self) -> String {
        self.idents.choose(&mut self.rng).unwrap().clone()
    }

    fn two_idents(&mut self) -> (String, String) {
        let a = self.ident();
        loop {
            let b = self.ident();
            if b != a {
                return (a, b);
            }
        }
    }

    fn context_line(&mut self) -> String {
        let (a, b) = self.two_idents();
        match self.rng.gen_range(0..3) {
            0 => format!("{} {a} = {b} ;", self.pick(&TYPES)),
            1 => format!("if ( {a} == null ) {{"),
            _ => format!("{a} . add ( {b} ) ;"),
        }
    }

    fn class_name(&mut self) -> String {
        format!("{}{}", self.pick(&CLASSES), self.pick(&ROLES))
    }

    /// One explicit-change commit: (diff lines, message).
    fn explicit(&mut self) -> (Vec<String>, String) {
        let class = self.class_name();
        let mut lines = vec![
            format!("mmm a / src / {class} . java"),
            format!("ppp b / src / {class} . java"),
        ];
        for _ in 0..self.rng.gen_range(0..=2) {
            lines.push(self.context_line());
        }
        let (a, b) = self.two_idents();
        let ty = self.pick(&TYPES);
        let msg = match self.rng.gen_range(0..5) {
            0 => {
                let init = self.ident();
                lines.push(format!("+ {ty} {a} = {init} ;"));
                format!("add {a} to {class}")
            }
            1 => {
                let init = self.ident();
                lines.push(format!("- {ty} {a} = {init} ;"));
                format!("remove unused {a}")
            }
            2 => {
                let init = self.ident();
                lines.push(format!("- {ty} {a} = {init} ;"));
                lines.push(format!("+ {ty} {b} = {init} ;"));
                format!("rename {a} to {b}")
            }
            3 => {
                lines.push(format!("- return {a} ;"));
                lines.push(format!("+ return {b} ;"));
                format!("return {b} instead of {a}")
            }
            _ => {
                lines.push(format!("+ {a} . {b} ( ) ;"));
                format!("call {b} on {a}")
            }
        };
        if self.rng.gen_bool(0.5) {
            lines.push("}".into());
        }
        (lines, msg)
    }

    /// One binary-file commit; before and after views are identical.
    fn implicit(&mut self) -> (Vec<String>, String) {
        let stem = self.pick(&STEMS);
        let class = self.pick(&CLASSES);
        let ext = self.pick(&ASSETS);
        let name = format!("{stem}{class}");
        let lines = vec![format!(
            "binary files a / res / {name} . {ext} and b / res / {name} . {ext} differ"
        )];
        (lines, format!("update {name} {ext}"))
    }

    fn commit(&mut self, implicit_fraction: f64) -> (Vec<String>, Vec<String>) {
        let (lines, msg) = if self.rng.gen_bool(implicit_fraction) {
            self.implicit()
        } else {
            self.explicit()
        };
        (words(&lines.join(" <nl> ")), words(&msg))
    }

    /// `n` commits with pairwise distinct diffs.
    fn unique_commits(&mut self, n: usize, implicit_fraction: f64) -> Vec<(Vec<String>, Vec<String>)> {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            let c = self.commit(implicit_fraction);
            attempts += 1;
            assert!(attempts < 100 * n + 1000, "synthetic diff space exhausted");
            if seen.insert(c.0.clone()) {
                out.push(c);
            }
        }
        out
    }
}

fn records(pairs: &[(Vec<String>, Vec<String>)], split: Split) -> Vec<CommitRecord> {
    pairs
        .iter()
        .enumerate()
        .map(|(id, (diff, msg))| CommitRecord {
            id,
            diff_tokens: diff.clone(),
            msg_tokens: msg.clone(),
            split,
        })
        .collect()
}

fn split_sizes(cfg: &SyntheticConfig) -> (usize, usize, usize) {
    let train = (cfg.train_fraction * cfg.commits as f64).round() as usize;
    let valid = ((cfg.valid_fraction * cfg.commits as f64).round() as usize).min(cfg.commits - train);
    (train, valid, cfg.commits - train - valid)
}

/// A corpus of `commits` unique diffs split train/valid/test.
pub fn generate_corpus(cfg: &SyntheticConfig) -> Corpus {
    let mut g = Generator::new(cfg.seed);
    let all = g.unique_commits(cfg.commits, cfg.implicit_fraction);
    let (n_train, n_valid, _) = split_sizes(cfg);
    Corpus {
        train: records(&all[..n_train], Split::Train),
        valid: records(&all[n_train..n_train + n_valid], Split::Valid),
        test: records(&all[n_train + n_valid..], Split::Test),
    }
}

/// Overlap planted into each of the valid and test splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedOverlap {
    /// Records whose diff duplicates a training diff (message may differ).
    pub identical_code: usize,
    /// Subset of those whose message is duplicated as well.
    pub completely_identical: usize,
}

/// A corpus with unique diffs except for the planted overlap: in both the
/// valid and the test split, `identical_code` records copy a training diff
/// and `completely_identical` of those also copy its message; the others
/// get a reworded message.
pub fn planted_overlap_corpus(cfg: &SyntheticConfig, planted: PlantedOverlap) -> Corpus {
    assert!(planted.completely_identical <= planted.identical_code);
    let mut g = Generator::new(cfg.seed);
    let (n_train, n_valid, n_test) = split_sizes(cfg);
    assert!(planted.identical_code <= n_valid.min(n_test));
    let fresh = g.unique_commits(n_train + n_valid + n_test - 2 * planted.identical_code, cfg.implicit_fraction);
    let train = fresh[..n_train].to_vec();
    let mut rest = fresh[n_train..].iter().cloned();
    let mut source_order: Vec<usize> = (0..n_train).collect();
    source_order.shuffle(&mut g.rng);
    let mut sources = source_order.into_iter();

    let mut build = |n: usize, split: Split| {
        let mut pairs: Vec<(Vec<String>, Vec<String>)> = Vec::with_capacity(n);
        for i in 0..planted.identical_code {
            let (diff, msg) = train[sources.next().unwrap()].clone();
            let msg = if i < planted.completely_identical {
                msg
            } else {
                let mut reworded = vec!["refactor".to_string(), ":".to_string()];
                reworded.extend(msg);
                reworded
            };
            pairs.push((diff, msg));
        }
        pairs.extend(rest.by_ref().take(n - planted.identical_code));
        pairs.shuffle(&mut g.rng);
        records(&pairs, split)
    };
    let valid = build(n_valid, Split::Valid);
    let test = build(n_test, Split::Test);
    Corpus {
        train: records(&train, Split::Train),
        valid,
        test,
    }
}
