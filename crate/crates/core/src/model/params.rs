use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub label_smoothing: f64,
    /// Reuse the embedding table as the output projection.
    #[serde(default)]
    pub tie_output: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: width 64, two layers, four heads, `d_ff = 4 d`.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            vocab_size,
            max_len: 256,
            dropout_rate: 0.1,
            label_smoothing: 0.1,
            tie_output: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::InvalidConfig(m));
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return fail("dimensions must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_len < 2 {
            return fail("max_len must be at least 2".into());
        }
        if self.vocab_size < 6 {
            return fail("vocabulary must hold the reserved tokens".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!(
                "label smoothing {} outside [0, 1)",
                self.label_smoothing
            ));
        }
        Ok(())
    }

    /// Closed-form number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        let (d, f, v, l) = (self.d_model, self.d_ff, self.vocab_size, self.n_layers);
        let attn = 4 * (d * d + d);
        let ff = d * f + f + f * d + d;
        let ln = 2 * d;
        let encoder = l * (attn + ff + 2 * ln);
        let decoder = l * (2 * attn + ff + 3 * ln);
        let output = if self.tie_output { v } else { d * v + v };
        v * d + encoder + decoder + output
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageTag {
    Scratch,
    StageI,
    StageII,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        NamedTensor {
            name: name.into(),
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttnIdx {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LnIdx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct FfIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayerIdx {
    pub self_attn: AttnIdx,
    pub ln1: LnIdx,
    pub ff: FfIdx,
    pub ln2: LnIdx,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayerIdx {
    pub self_attn: AttnIdx,
    pub ln1: LnIdx,
    pub cross_attn: AttnIdx,
    pub ln2: LnIdx,
    pub ff: FfIdx,
    pub ln3: LnIdx,
}

/// Position of every named array in a store built from a given config.
#[derive(Debug, Clone)]
pub struct Layout {
    pub embedding: usize,
    pub encoder: Vec<EncoderLayerIdx>,
    pub decoder: Vec<DecoderLayerIdx>,
    pub output_weight: Option<usize>,
    pub output_bias: usize,
    specs: Vec<(String, Vec<usize>, Init)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Zero,
    One,
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init: Init| {
            specs.push((name, shape, init));
            specs.len() - 1
        };
        let d = cfg.d_model;
        let embedding = push("embedding".into(), vec![cfg.vocab_size, d], Init::FanIn(d));

        fn attn(
            push: &mut impl FnMut(String, Vec<usize>, Init) -> usize,
            p: &str,
            d: usize,
        ) -> AttnIdx {
            let mut pair = |w: &str, b: &str| {
                (
                    push(format!("{p}.{w}"), vec![d, d], Init::FanIn(d)),
                    push(format!("{p}.{b}"), vec![d], Init::Zero),
                )
            };
            let (wq, bq) = pair("wq", "bq");
            let (wk, bk) = pair("wk", "bk");
            let (wv, bv) = pair("wv", "bv");
            let (wo, bo) = pair("wo", "bo");
            AttnIdx {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
            }
        }
        fn ln(push: &mut impl FnMut(String, Vec<usize>, Init) -> usize, p: &str, d: usize) -> LnIdx {
            LnIdx {
                gain: push(format!("{p}.gain"), vec![d], Init::One),
                bias: push(format!("{p}.bias"), vec![d], Init::Zero),
            }
        }
        fn ff(
            push: &mut impl FnMut(String, Vec<usize>, Init) -> usize,
            p: &str,
            d: usize,
            f: usize,
        ) -> FfIdx {
            FfIdx {
                w1: push(format!("{p}.w1"), vec![d, f], Init::FanIn(d)),
                b1: push(format!("{p}.b1"), vec![f], Init::Zero),
                w2: push(format!("{p}.w2"), vec![f, d], Init::FanIn(f)),
                b2: push(format!("{p}.b2"), vec![d], Init::Zero),
            }
        }

        let encoder = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("encoder.{l}");
                EncoderLayerIdx {
                    self_attn: attn(&mut push, &format!("{p}.self_attn"), d),
                    ln1: ln(&mut push, &format!("{p}.ln1"), d),
                    ff: ff(&mut push, &format!("{p}.ff"), d, cfg.d_ff),
                    ln2: ln(&mut push, &format!("{p}.ln2"), d),
                }
            })
            .collect();
        let decoder = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("decoder.{l}");
                DecoderLayerIdx {
                    self_attn: attn(&mut push, &format!("{p}.self_attn"), d),
                    ln1: ln(&mut push, &format!("{p}.ln1"), d),
                    cross_attn: attn(&mut push, &format!("{p}.cross_attn"), d),
                    ln2: ln(&mut push, &format!("{p}.ln2"), d),
                    ff: ff(&mut push, &format!("{p}.ff"), d, cfg.d_ff),
                    ln3: ln(&mut push, &format!("{p}.ln3"), d),
                }
            })
            .collect();
        let output_weight = (!cfg.tie_output)
            .then(|| push("output.weight".into(), vec![d, cfg.vocab_size], Init::FanIn(d)));
        let output_bias = push("output.bias".into(), vec![cfg.vocab_size], Init::Zero);
        Layout {
            embedding,
            encoder,
            decoder,
            output_weight,
            output_bias,
            specs,
        }
    }

    pub fn names_and_shapes(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.specs.iter().map(|(n, s, _)| (n.as_str(), s.as_slice()))
    }

    pub fn zeros(&self) -> Vec<NamedTensor> {
        self.specs
            .iter()
            .map(|(n, s, _)| NamedTensor::zeros(n.clone(), s.clone()))
            .collect()
    }
}

/// All model weights plus the metadata needed to resume or transfer them.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    pub config: ModelConfig,
    pub stage: StageTag,
    pub seed: u64,
    pub step: u64,
    pub tensors: Vec<NamedTensor>,
}

impl ParameterStore {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(NamedTensor::len).sum()
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    /// Checks names and shapes against what `config` prescribes.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<(), ModelError> {
        let layout = Layout::new(config);
        if layout.specs.len() != self.tensors.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "expected {} arrays, found {}",
                layout.specs.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), t) in layout.names_and_shapes().zip(&self.tensors) {
            if name != t.name || shape != t.shape.as_slice() || t.data.len() != shape.iter().product::<usize>() {
                return Err(ModelError::ShapeMismatch(format!(
                    "{name}{shape:?} does not match stored {}{:?}",
                    t.name, t.shape
                )));
            }
        }
        Ok(())
    }
}

/// Gradients aligned name-for-name with a [`ParameterStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradStore {
    pub tensors: Vec<NamedTensor>,
}

impl GradStore {
    pub fn zeros_like(store: &ParameterStore) -> Self {
        GradStore {
            tensors: store
                .tensors
                .iter()
                .map(|t| NamedTensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn add_scaled(&mut self, other: &GradStore, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

pub fn init_parameters(config: &ModelConfig, seed: u64) -> Result<ParameterStore, ModelError> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut tensors = Vec::with_capacity(layout.specs.len());
    for (i, (name, shape, init)) in layout.specs.iter().enumerate() {
        let mut t = NamedTensor::zeros(name.clone(), shape.clone());
        match *init {
            Init::Zero => {}
            Init::One => t.data.fill(1.0),
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut r = rng::stream(seed, &[rng::salt::INIT, i as u64]);
                for v in &mut t.data {
                    *v = r.gen_range(-bound..bound);
                }
            }
        }
        tensors.push(t);
    }
    Ok(ParameterStore {
        config: *config,
        stage: StageTag::Scratch,
        seed,
        step: 0,
        tensors,
    })
}
