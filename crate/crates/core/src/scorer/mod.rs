//! Dialogue scorer.
//!
//! A dialogue is represented twice by the same encoder: once as a whole
//! (first-position output over the full token sequence, the word-granularity
//! vector) and once turn by turn (first-position outputs of each turn encoded
//! on its own, summed or averaged: the turn-granularity vector). Their
//! concatenation goes through a `2d -> d -> 1` MLP with a GELU hidden layer and
//! a logistic output.

mod checkpoint;
mod encoder;
mod ops;
mod params;
pub mod vocab;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use params::{EncoderConfig, TensorInfo, TurnPooling};
pub use vocab::Vocab;

use encoder::{grads_pair, Dropout, Encoder, EncoderCache};
use params::Layout;

use crate::corpus::Dialogue;
use crate::seed::{self, Rng};
use crate::{Error, Result};

/// A predicted quality score, strictly inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ScoreValue(f64);

impl ScoreValue {
    const EDGE: f64 = 1e-12;

    pub fn from_logit(logit: f64) -> Self {
        let s = 1.0 / (1.0 + (-logit).exp());
        ScoreValue(s.clamp(Self::EDGE, 1.0 - Self::EDGE))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogueRepresentation {
    pub word_vec: Vec<f32>,
    pub turn_vec: Vec<f32>,
}

impl DialogueRepresentation {
    /// `h_D`: word vector followed by turn vector.
    pub fn concat(&self) -> Vec<f32> {
        [self.word_vec.as_slice(), self.turn_vec.as_slice()].concat()
    }
}

pub enum Mode<'a> {
    /// Dropout off.
    Deterministic,
    /// Dropout on, masks drawn from the given stream.
    Stochastic(&'a mut Rng),
}

/// Any model mapping a token sequence to one vector per position.
pub trait SequenceEncoder {
    fn dim(&self) -> usize;
    fn max_positions(&self) -> usize;
    /// Row-major `tokens.len() x dim` output.
    fn encode(&self, tokens: &[u32]) -> Result<Vec<f32>>;
}

/// Builds the two-granularity representation with an arbitrary encoder.
pub fn represent_with<E: SequenceEncoder + ?Sized>(
    encoder: &E,
    vocab: &Vocab,
    d: &Dialogue,
    pooling: TurnPooling,
) -> Result<DialogueRepresentation> {
    let dim = encoder.dim();
    let limit = encoder.max_positions();
    let full = encoder.encode(&vocab.tokenize(d, limit))?;
    let mut turn_vec = vec![0.0f32; dim];
    for t in d.turns() {
        let out = encoder.encode(&vocab.tokenize_turn(t, limit))?;
        for (a, b) in turn_vec.iter_mut().zip(&out[..dim]) {
            *a += b;
        }
    }
    if pooling == TurnPooling::Mean {
        let n = d.turns().len() as f32;
        turn_vec.iter_mut().for_each(|v| *v /= n);
    }
    Ok(DialogueRepresentation {
        word_vec: full[..dim].to_vec(),
        turn_vec,
    })
}

/// Token sequences of one dialogue, ready for the encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub full: Vec<u32>,
    pub turns: Vec<Vec<u32>>,
}

pub(crate) struct ScorerCache {
    word: EncoderCache,
    turns: Vec<EncoderCache>,
    h: Vec<f32>,
    in_mask: Option<Vec<f32>>,
    pre: Vec<f32>,
    hid_mask: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scorer {
    config: EncoderConfig,
    vocab: Vocab,
    layout: Layout,
    params: Vec<f32>,
}

impl Scorer {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: EncoderConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config, vocab.len());
        let mut rng = seed::rng(seed, &[b"init"]);
        let params = params::init_params(&layout, &config, &mut rng);
        Ok(Scorer {
            config,
            vocab,
            layout,
            params,
        })
    }

    pub fn from_parts(config: EncoderConfig, vocab: Vocab, params: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config, vocab.len());
        if params.len() != layout.total() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, got {}",
                layout.total(),
                params.len()
            )));
        }
        Ok(Scorer {
            config,
            vocab,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Changes the dropout rate used in stochastic mode.
    pub fn set_dropout(&mut self, p: f32) -> Result<()> {
        let mut cfg = self.config;
        cfg.dropout = p;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.layout.tensors
    }

    fn encoder(&self) -> Encoder<'_> {
        Encoder {
            cfg: &self.config,
            layout: &self.layout,
            params: &self.params,
        }
    }

    pub fn prepare(&self, d: &Dialogue) -> Encoded {
        let limit = self.config.max_positions;
        Encoded {
            full: self.vocab.tokenize(d, limit),
            turns: d
                .turns()
                .iter()
                .map(|t| self.vocab.tokenize_turn(t, limit))
                .collect(),
        }
    }

    /// First-position output over the whole dialogue.
    pub fn encode_word_granularity(&self, tokens: &[u32]) -> Result<Vec<f32>> {
        Ok(self.encoder().forward(tokens, 1, None)?.0)
    }

    /// Pooled first-position outputs of each turn encoded separately.
    pub fn encode_turn_granularity(&self, d: &Dialogue) -> Result<Vec<f32>> {
        let enc = self.prepare(d);
        let mut acc = vec![0.0f32; self.config.d_model];
        for t in &enc.turns {
            let (out, _) = self.encoder().forward(t, 1, None)?;
            for (a, b) in acc.iter_mut().zip(&out) {
                *a += b;
            }
        }
        if self.config.turn_pooling == TurnPooling::Mean {
            let n = enc.turns.len() as f32;
            acc.iter_mut().for_each(|v| *v /= n);
        }
        Ok(acc)
    }

    pub fn represent(&self, d: &Dialogue) -> Result<DialogueRepresentation> {
        let enc = self.prepare(d);
        Ok(DialogueRepresentation {
            word_vec: self.encode_word_granularity(&enc.full)?,
            turn_vec: self.encode_turn_granularity(d)?,
        })
    }

    /// Applies the MLP head to any representation of matching width.
    pub fn score_representation(&self, rep: &DialogueRepresentation) -> Result<ScoreValue> {
        let d = self.config.d_model;
        if rep.word_vec.len() != d || rep.turn_vec.len() != d {
            return Err(Error::Domain(format!("representation width must be {d}")));
        }
        let (logit, _, _) = self.head_forward(rep.concat(), None);
        Ok(ScoreValue::from_logit(logit as f64))
    }

    pub fn score(&self, d: &Dialogue, mode: Mode<'_>) -> Result<ScoreValue> {
        let enc = self.prepare(d);
        self.score_encoded(&enc, mode)
    }

    pub fn score_encoded(&self, enc: &Encoded, mode: Mode<'_>) -> Result<ScoreValue> {
        let rng = match mode {
            Mode::Deterministic => None,
            Mode::Stochastic(r) => Some(r),
        };
        let (logit, _) = self.forward(enc, rng)?;
        Ok(ScoreValue::from_logit(logit as f64))
    }

    fn head_forward(
        &self,
        mut h: Vec<f32>,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> (f32, Vec<f32>, [Option<Vec<f32>>; 3]) {
        let d = self.config.d_model;
        let p = |r: &std::ops::Range<usize>| &self.params[r.clone()];
        let in_mask = dropout.as_deref_mut().and_then(|dr| {
            (dr.p > 0.0).then(|| ops::dropout_mask(h.len(), dr.p, dr.rng))
        });
        if let Some(m) = &in_mask {
            ops::mul_in_place(&mut h, m);
        }
        let z = ops::linear(&h, 1, p(&self.layout.head_w1), p(&self.layout.head_b1), d);
        let mut hidden: Vec<f32> = z.iter().map(|&v| ops::gelu(v)).collect();
        let hid_mask = dropout.and_then(|dr| {
            (dr.p > 0.0).then(|| ops::dropout_mask(hidden.len(), dr.p, dr.rng))
        });
        let act = z;
        if let Some(m) = &hid_mask {
            ops::mul_in_place(&mut hidden, m);
        }
        let logit = ops::dot(&hidden, p(&self.layout.head_w2)) + self.params[self.layout.head_b2.start];
        (logit, h, [in_mask, hid_mask, Some(act)])
    }

    /// Forward pass keeping everything needed by [`Scorer::backward`].
    pub(crate) fn forward(&self, enc: &Encoded, rng: Option<&mut Rng>) -> Result<(f32, ScorerCache)> {
        let d = self.config.d_model;
        let p = self.config.dropout;
        let mut holder = rng.map(|rng| Dropout { p, rng });
        let encoder = self.encoder();
        let (word_vec, word) = encoder.forward(&enc.full, 1, holder.as_mut())?;
        let mut turn_vec = vec![0.0f32; d];
        let mut turns = Vec::with_capacity(enc.turns.len());
        for t in &enc.turns {
            let (out, c) = encoder.forward(t, 1, holder.as_mut())?;
            for (a, b) in turn_vec.iter_mut().zip(&out) {
                *a += b;
            }
            turns.push(c);
        }
        if self.config.turn_pooling == TurnPooling::Mean {
            let n = enc.turns.len() as f32;
            turn_vec.iter_mut().for_each(|v| *v /= n);
        }
        let h = [word_vec, turn_vec].concat();
        let (logit, h, [in_mask, hid_mask, act]) = self.head_forward(h, holder.as_mut());
        Ok((
            logit,
            ScorerCache {
                word,
                turns,
                h,
                in_mask,
                pre: act.expect("head keeps activations"),
                hid_mask,
            },
        ))
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d logit`.
    pub(crate) fn backward(&self, cache: &ScorerCache, d_logit: f32, grads: &mut [f32]) {
        let d = self.config.d_model;
        let lay = &self.layout;
        let w2 = &self.params[lay.head_w2.clone()];

        let mut hidden_used: Vec<f32> = cache.pre.iter().map(|&v| ops::gelu(v)).collect();
        if let Some(m) = &cache.hid_mask {
            ops::mul_in_place(&mut hidden_used, m);
        }
        {
            let (dw, db) = grads_pair(grads, &lay.head_w2, &lay.head_b2);
            for (g, a) in dw.iter_mut().zip(&hidden_used) {
                *g += d_logit * a;
            }
            db[0] += d_logit;
        }
        let mut dz: Vec<f32> = w2.iter().map(|w| w * d_logit).collect();
        if let Some(m) = &cache.hid_mask {
            ops::mul_in_place(&mut dz, m);
        }
        for (g, &z) in dz.iter_mut().zip(&cache.pre) {
            *g *= ops::gelu_grad(z);
        }
        {
            let (dw, db) = grads_pair(grads, &lay.head_w1, &lay.head_b1);
            ops::linear_param_grad(&cache.h, &dz, 1, d, dw, db);
        }
        let mut dh = vec![0.0f32; 2 * d];
        ops::linear_input_grad(&dz, 1, &self.params[lay.head_w1.clone()], d, &mut dh);
        if let Some(m) = &cache.in_mask {
            ops::mul_in_place(&mut dh, m);
        }

        let encoder = self.encoder();
        encoder.backward(&cache.word, &dh[..d], grads);
        let mut d_turn = dh[d..].to_vec();
        if self.config.turn_pooling == TurnPooling::Mean {
            let n = cache.turns.len() as f32;
            d_turn.iter_mut().for_each(|v| *v /= n);
        }
        for c in &cache.turns {
            encoder.backward(c, &d_turn, grads);
        }
    }
}

impl SequenceEncoder for Scorer {
    fn dim(&self) -> usize {
        self.config.d_model
    }

    fn max_positions(&self) -> usize {
        self.config.max_positions
    }

    fn encode(&self, tokens: &[u32]) -> Result<Vec<f32>> {
        Ok(self.encoder().forward(tokens, tokens.len(), None)?.0)
    }
}
