//! NNGen: bag-of-words nearest-neighbour retrieval with BLEU re-ranking.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

use crate::corpus::CommitRecord;
use crate::metrics::sentence_bleu4_smoothed;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BaselineError {
    #[error("cannot index an empty training set")]
    EmptyCorpus,
    #[error("query diff is empty")]
    EmptyQuery,
    #[error("k must be at least 1")]
    InvalidK,
}

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    pub k: usize,
    terms: HashMap<String, u32>,
    /// Sparse raw term-frequency vectors, sorted by term index.
    vectors: Vec<Vec<(u32, f64)>>,
    norms: Vec<f64>,
    /// term -> [(document, count)]
    postings: Vec<Vec<(u32, f64)>>,
    ids: Vec<usize>,
    diffs: Vec<Vec<String>>,
    messages: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Neighbor {
    pub doc: usize,
    pub id: usize,
    pub cosine: f64,
    pub bleu: f64,
}

impl RetrievalIndex {
    pub fn build(train: &[CommitRecord], k: usize) -> Result<Self, BaselineError> {
        if train.is_empty() {
            return Err(BaselineError::EmptyCorpus);
        }
        if k == 0 {
            return Err(BaselineError::InvalidK);
        }
        let mut terms: HashMap<String, u32> = HashMap::new();
        let mut vectors = Vec::with_capacity(train.len());
        let mut postings: Vec<Vec<(u32, f64)>> = Vec::new();
        for (doc, r) in train.iter().enumerate() {
            let mut counts: HashMap<u32, f64> = HashMap::new();
            for tok in &r.diff_tokens {
                let next = terms.len() as u32;
                let t = *terms.entry(tok.clone()).or_insert(next);
                if t as usize == postings.len() {
                    postings.push(Vec::new());
                }
                *counts.entry(t).or_insert(0.0) += 1.0;
            }
            let mut v: Vec<(u32, f64)> = counts.into_iter().collect();
            v.sort_unstable_by_key(|&(t, _)| t);
            for &(t, c) in &v {
                postings[t as usize].push((doc as u32, c));
            }
            vectors.push(v);
        }
        let norms = vectors
            .iter()
            .map(|v| v.iter().map(|(_, c)| c * c).sum::<f64>().sqrt())
            .collect();
        Ok(RetrievalIndex {
            k,
            terms,
            vectors,
            norms,
            postings,
            ids: train.iter().map(|r| r.id).collect(),
            diffs: train.iter().map(|r| r.diff_tokens.clone()).collect(),
            messages: train.iter().map(|r| r.msg_tokens.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Raw-count vector of document `doc` as (term, count) pairs.
    pub fn vector(&self, doc: usize) -> Vec<(&str, f64)> {
        let mut names = vec![""; self.terms.len()];
        for (t, &i) in &self.terms {
            names[i as usize] = t;
        }
        self.vectors[doc]
            .iter()
            .map(|&(t, c)| (names[t as usize], c))
            .collect()
    }

    pub fn message(&self, doc: usize) -> &[String] {
        &self.messages[doc]
    }

    /// Cosine similarity of the query to every indexed diff.
    pub fn cosines(&self, query: &[String]) -> Vec<f64> {
        let mut q: HashMap<&str, f64> = HashMap::new();
        for t in query {
            *q.entry(t.as_str()).or_insert(0.0) += 1.0;
        }
        let q_norm = q.values().map(|c| c * c).sum::<f64>().sqrt();
        let mut dots = vec![0.0; self.len()];
        for (t, &qc) in &q {
            if let Some(&ti) = self.terms.get(*t) {
                for &(doc, c) in &self.postings[ti as usize] {
                    dots[doc as usize] += qc * c;
                }
            }
        }
        dots.iter()
            .zip(&self.norms)
            .map(|(&d, &n)| if n > 0.0 && q_norm > 0.0 { d / (n * q_norm) } else { 0.0 })
            .collect()
    }

    /// Top-k documents by cosine (ties: lower training id), each with its
    /// smoothed BLEU-4 against the query, in cosine order.
    pub fn neighbors(&self, query: &[String]) -> Result<Vec<Neighbor>, BaselineError> {
        if query.is_empty() {
            return Err(BaselineError::EmptyQuery);
        }
        let cos = self.cosines(query);
        let mut order: Vec<usize> = (0..self.len()).collect();
        let by_cosine = |&a: &usize, &b: &usize| {
            cos[b]
                .partial_cmp(&cos[a])
                .unwrap_or(Ordering::Equal)
                .then(self.ids[a].cmp(&self.ids[b]))
        };
        let k = self.k.min(order.len());
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, by_cosine);
            order.truncate(k);
        }
        order.sort_by(by_cosine);
        Ok(order
            .into_iter()
            .map(|doc| Neighbor {
                doc,
                id: self.ids[doc],
                cosine: cos[doc],
                bleu: sentence_bleu4_smoothed(&self.diffs[doc], query).unwrap_or(0.0),
            })
            .collect())
    }

    /// The re-ranked nearest neighbour: maximal BLEU among the top-k, ties
    /// by higher cosine, then lower id.
    pub fn nearest(&self, query: &[String]) -> Result<Neighbor, BaselineError> {
        let mut best: Option<Neighbor> = None;
        for n in self.neighbors(query)? {
            let better = match &best {
                None => true,
                Some(b) => {
                    n.bleu > b.bleu
                        || (n.bleu == b.bleu
                            && (n.cosine > b.cosine || (n.cosine == b.cosine && n.id < b.id)))
                }
            };
            if better {
                best = Some(n);
            }
        }
        Ok(best.expect("index is non-empty"))
    }
}

pub fn nngen_generate(index: &RetrievalIndex, query: &[String]) -> Result<Vec<String>, BaselineError> {
    let n = index.nearest(query)?;
    Ok(index.messages[n.doc].clone())
}

/// Batch retrieval; an empty query yields an empty message.
pub fn nngen_batch(index: &RetrievalIndex, queries: &[Vec<String>]) -> Vec<Vec<String>> {
    queries
        .iter()
        .map(|q| nngen_generate(index, q).unwrap_or_default())
        .collect()
}
