//! Greedy and beam-search message generation.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::special::{BOS, EOS, PAD};
use crate::model::{Decoder, ModelError, ParameterStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam_size: usize,
    /// Maximum number of generated tokens, EOS excluded.
    pub max_len: usize,
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: Strategy::Greedy,
            beam_size: 4,
            max_len: 30,
            length_penalty: 0.0,
        }
    }
}

impl DecodeConfig {
    pub fn beam(beam_size: usize) -> Self {
        DecodeConfig {
            strategy: Strategy::Beam,
            beam_size,
            ..DecodeConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.beam_size == 0 || self.max_len == 0 {
            return Err(ModelError::InvalidConfig(
                "beam_size and max_len must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Length-normalized hypothesis score.
pub fn normalized_score(log_prob: f64, len: usize, alpha: f64) -> f64 {
    if alpha > 0.0 {
        log_prob / (len.max(1) as f64).powf(alpha)
    } else {
        log_prob
    }
}

// PAD and BOS are never generated.
fn generable(id: usize) -> bool {
    id != PAD as usize && id != BOS as usize
}

/// Generates a message for one source. Sources longer than the model's
/// `max_len` are truncated, as during training.
pub fn generate(
    params: &ParameterStore,
    source: &[u32],
    cfg: &DecodeConfig,
) -> Result<Vec<u32>, ModelError> {
    cfg.validate()?;
    let decoder = Decoder::new(params);
    generate_with(&decoder, params, source, cfg)
}

fn generate_with(
    decoder: &Decoder<'_>,
    params: &ParameterStore,
    source: &[u32],
    cfg: &DecodeConfig,
) -> Result<Vec<u32>, ModelError> {
    let src = &source[..source.len().min(params.config.max_len)];
    let enc = decoder.encode(src)?;
    // the decoder input is BOS plus the generated prefix
    let max_len = cfg.max_len.min(params.config.max_len.saturating_sub(1)).max(1);
    match cfg.strategy {
        Strategy::Greedy => {
            let mut prefix = vec![BOS];
            while prefix.len() - 1 < max_len {
                let lp = decoder.next_log_probs(&enc, &prefix);
                let mut best = None::<(usize, f64)>;
                for (id, &v) in lp.iter().enumerate() {
                    if generable(id) && best.map_or(true, |(_, b)| v > b) {
                        best = Some((id, v));
                    }
                }
                let Some((id, _)) = best else { break };
                if id as u32 == EOS {
                    break;
                }
                prefix.push(id as u32);
            }
            prefix.remove(0);
            Ok(prefix)
        }
        Strategy::Beam => Ok(beam_search(
            |prefix| decoder.next_log_probs(&enc, prefix),
            cfg.beam_size,
            max_len,
            cfg.length_penalty,
        )),
    }
}

#[derive(Clone)]
struct Hyp {
    tokens: Vec<u32>,
    log_prob: f64,
}

fn rank(a: &Hyp, b: &Hyp) -> Ordering {
    b.log_prob
        .partial_cmp(&a.log_prob)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search over a next-token scorer. At every step the `beam_size`
/// best extensions are kept; extensions ending in EOS retire into the
/// finished pool, shrinking the live beam. Hypotheses still alive after
/// `max_len` tokens are finished as-is. The result is the finished
/// hypothesis with the best normalized score (ties: lexicographically
/// smallest token sequence).
pub fn beam_search<F>(mut next: F, beam_size: usize, max_len: usize, alpha: f64) -> Vec<u32>
where
    F: FnMut(&[u32]) -> Vec<f64>,
{
    let mut live = vec![Hyp {
        tokens: vec![BOS],
        log_prob: 0.0,
    }];
    // (hypothesis without BOS/EOS, normalized score)
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let mut cands = Vec::new();
        for h in &live {
            let lp = next(&h.tokens);
            for (id, &v) in lp.iter().enumerate() {
                if generable(id) {
                    let mut tokens = h.tokens.clone();
                    tokens.push(id as u32);
                    cands.push(Hyp {
                        tokens,
                        log_prob: h.log_prob + v,
                    });
                }
            }
        }
        cands.sort_by(rank);
        cands.truncate(beam_size);
        live.clear();
        for c in cands {
            if *c.tokens.last().unwrap() == EOS {
                let gen_len = c.tokens.len() - 1;
                let out = c.tokens[1..gen_len].to_vec();
                finished.push((out, normalized_score(c.log_prob, gen_len, alpha)));
            } else {
                live.push(c);
            }
        }
    }
    for h in live {
        let gen_len = h.tokens.len() - 1;
        finished.push((h.tokens[1..].to_vec(), normalized_score(h.log_prob, gen_len, alpha)));
    }
    finished
        .into_iter()
        .min_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        })
        .map(|(t, _)| t)
        .unwrap_or_default()
}

/// Generates for many sources, split across threads; output order follows
/// the input order.
pub fn generate_batch(
    params: &ParameterStore,
    sources: &[Vec<u32>],
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<u32>>, ModelError> {
    cfg.validate()?;
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(sources.len().max(1));
    let chunk = sources.len().div_ceil(threads).max(1);
    let parts: Vec<Result<Vec<Vec<u32>>, ModelError>> = std::thread::scope(|s| {
        let handles: Vec<_> = sources
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    let decoder = Decoder::new(params);
                    part.iter()
                        .map(|src| generate_with(&decoder, params, src, cfg))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("decode worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(sources.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_parameters, ModelConfig};

    fn tiny(vocab: usize, seed: u64) -> ParameterStore {
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            vocab_size: vocab,
            max_len: 16,
            dropout_rate: 0.0,
            label_smoothing: 0.0,
            tie_output: false,
        };
        init_parameters(&cfg, seed).unwrap()
    }

    /// Every EOS-terminated sequence of up to `max_len` tokens, plus every
    /// unterminated one of exactly `max_len`, scored by the model.
    fn exhaustive(
        dec: &Decoder<'_>,
        enc: &crate::model::EncodedSource,
        vocab: usize,
        max_len: usize,
        alpha: f64,
    ) -> (Vec<u32>, f64) {
        let mut best: Option<(Vec<u32>, f64)> = None;
        let mut stack = vec![(vec![BOS], 0.0f64)];
        let consider = |t: Vec<u32>, s: f64, best: &mut Option<(Vec<u32>, f64)>| {
            let better = match best {
                None => true,
                Some((bt, bs)) => s > *bs || (s == *bs && t < *bt),
            };
            if better {
                *best = Some((t, s));
            }
        };
        while let Some((prefix, lp)) = stack.pop() {
            let gen = prefix.len() - 1;
            if gen == max_len {
                consider(prefix[1..].to_vec(), normalized_score(lp, gen, alpha), &mut best);
                continue;
            }
            let next = dec.next_log_probs(enc, &prefix);
            for id in 0..vocab {
                if !generable(id) {
                    continue;
                }
                let s = lp + next[id];
                if id as u32 == EOS {
                    consider(prefix[1..].to_vec(), normalized_score(s, gen + 1, alpha), &mut best);
                } else {
                    let mut p = prefix.clone();
                    p.push(id as u32);
                    stack.push((p, s));
                }
            }
        }
        best.unwrap()
    }

    #[test]
    fn beam_one_equals_greedy() {
        for seed in 0..6 {
            let p = tiny(12, seed);
            let src = [6, 7, 8, 9, 10];
            let cfg = DecodeConfig {
                max_len: 10,
                ..DecodeConfig::default()
            };
            let g = generate(&p, &src, &cfg).unwrap();
            let b = generate(&p, &src, &DecodeConfig { strategy: Strategy::Beam, beam_size: 1, ..cfg }).unwrap();
            assert_eq!(g, b);
        }
    }

    #[test]
    fn max_len_caps_output() {
        for seed in 0..6 {
            let p = tiny(12, seed);
            let cfg = DecodeConfig {
                max_len: 3,
                ..DecodeConfig::default()
            };
            assert!(generate(&p, &[6, 7], &cfg).unwrap().len() <= 3);
            assert!(generate(&p, &[6, 7], &DecodeConfig { strategy: Strategy::Beam, ..cfg }).unwrap().len() <= 3);
        }
    }

    #[test]
    fn wide_beam_matches_exhaustive_search() {
        // V = 6 leaves EOS, UNK, MASK, NL generable: 4 choices per step
        for seed in 0..5 {
            let p = tiny(6, seed);
            let dec = Decoder::new(&p);
            let src = [3, 4, 5, 5];
            let enc = dec.encode(&src).unwrap();
            for (max_len, alpha) in [(2, 0.0), (3, 0.0), (4, 0.0), (4, 1.0)] {
                let (want, _) = exhaustive(&dec, &enc, 6, max_len, alpha);
                let got = generate(
                    &p,
                    &src,
                    &DecodeConfig {
                        strategy: Strategy::Beam,
                        beam_size: 256,
                        max_len,
                        length_penalty: alpha,
                    },
                )
                .unwrap();
                assert_eq!(got, want, "seed {seed} max_len {max_len} alpha {alpha}");
            }
        }
    }

    #[test]
    fn narrow_beam_returns_best_finished() {
        // a hand-built scorer: EOS early is mediocre, a long path is best
        let table = |prefix: &[u32]| -> Vec<f64> {
            let mut v = vec![f64::NEG_INFINITY; 6];
            match prefix.len() {
                1 => {
                    v[EOS as usize] = -1.0;
                    v[3] = -0.5;
                    v[4] = -0.7;
                }
                _ => {
                    v[EOS as usize] = -0.1;
                    v[5] = -2.0;
                }
            }
            v
        };
        assert_eq!(beam_search(table, 2, 4, 0.0), vec![3]);
        assert_eq!(beam_search(table, 1, 4, 0.0), vec![3]);
        // with a strong length preference the EOS-only hypothesis loses less
        let flat = |_: &[u32]| vec![f64::NEG_INFINITY, f64::NEG_INFINITY, -1.0, -1.0, -1.0, -1.0];
        // all hypotheses tie at -1 per token without normalization: EOS first wins
        assert_eq!(beam_search(flat, 3, 3, 0.0), Vec::<u32>::new());
        // with alpha = 1 every hypothesis scores -1; the smallest sequence wins
        assert_eq!(beam_search(flat, 3, 3, 1.0), Vec::<u32>::new());
    }

    #[test]
    fn batch_matches_single_and_is_deterministic() {
        let p = tiny(12, 4);
        let sources: Vec<Vec<u32>> = (0..7).map(|i| vec![6 + (i % 5) as u32, 7, 8]).collect();
        let cfg = DecodeConfig::default();
        let a = generate_batch(&p, &sources, &cfg).unwrap();
        let b = generate_batch(&p, &sources, &cfg).unwrap();
        assert_eq!(a, b);
        for (s, out) in sources.iter().zip(&a) {
            assert_eq!(&generate(&p, s, &cfg).unwrap(), out);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let p = tiny(12, 0);
        let cfg = DecodeConfig {
            beam_size: 0,
            ..DecodeConfig::beam(4)
        };
        assert!(generate(&p, &[6], &cfg).is_err());
    }
}
