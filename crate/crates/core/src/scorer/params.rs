use std::ops::Range;

use rand::Rng as _;

use crate::kv::KvFile;
use crate::seed::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TurnPooling {
    #[default]
    Sum,
    Mean,
}

impl std::fmt::Display for TurnPooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TurnPooling::Sum => "sum",
            TurnPooling::Mean => "mean",
        })
    }
}

impl std::str::FromStr for TurnPooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(TurnPooling::Sum),
            "mean" => Ok(TurnPooling::Mean),
            _ => Err(Error::Config(format!("unknown turn pooling `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub dropout: f32,
    pub turn_pooling: TurnPooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 128,
            max_positions: 512,
            dropout: 0.5,
            turn_pooling: TurnPooling::Sum,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.d_model < 8 {
            return bad("d_model must be >= 8");
        }
        if self.max_positions < 16 {
            return bad("max_positions must be >= 16");
        }
        if self.num_layers < 1 {
            return bad("num_layers must be >= 1");
        }
        if self.num_heads < 1 || !self.d_model.is_multiple_of(self.num_heads) {
            return bad("num_heads must divide d_model");
        }
        if self.ffn_dim < 1 {
            return bad("ffn_dim must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut KvFile) {
        kv.set("d_model", self.d_model);
        kv.set("num_layers", self.num_layers);
        kv.set("num_heads", self.num_heads);
        kv.set("ffn_dim", self.ffn_dim);
        kv.set("max_positions", self.max_positions);
        kv.set("dropout", self.dropout);
        kv.set("turn_pooling", self.turn_pooling);
    }

    /// Overrides fields present in `kv`.
    pub fn update_from_kv(&mut self, kv: &KvFile) -> Result<()> {
        if let Some(v) = kv.parse_value("d_model")? {
            self.d_model = v;
        }
        if let Some(v) = kv.parse_value("num_layers")? {
            self.num_layers = v;
        }
        if let Some(v) = kv.parse_value("num_heads")? {
            self.num_heads = v;
        }
        if let Some(v) = kv.parse_value("ffn_dim")? {
            self.ffn_dim = v;
        }
        if let Some(v) = kv.parse_value("max_positions")? {
            self.max_positions = v;
        }
        if let Some(v) = kv.parse_value("dropout")? {
            self.dropout = v;
        }
        if let Some(v) = kv.parse_value("turn_pooling")? {
            self.turn_pooling = v;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerLayout {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub wq: Range<usize>,
    pub bq: Range<usize>,
    pub wk: Range<usize>,
    pub bk: Range<usize>,
    pub wv: Range<usize>,
    pub bv: Range<usize>,
    pub wo: Range<usize>,
    pub bo: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

/// Where each tensor lives in the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub tok_emb: Range<usize>,
    pub pos_emb: Range<usize>,
    pub layers: Vec<LayerLayout>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub head_w1: Range<usize>,
    pub head_b1: Range<usize>,
    pub head_w2: Range<usize>,
    pub head_b2: Range<usize>,
    pub tensors: Vec<TensorInfo>,
}

impl Layout {
    pub fn new(cfg: &EncoderConfig, vocab_size: usize) -> Self {
        let mut tensors: Vec<TensorInfo> = Vec::new();
        let mut add = |name: String, shape: Vec<usize>| -> Range<usize> {
            let start = tensors.last().map_or(0, |t| t.range.end);
            let range = start..start + shape.iter().product::<usize>();
            tensors.push(TensorInfo {
                name,
                shape,
                range: range.clone(),
            });
            range
        };
        let d = cfg.d_model;
        let f = cfg.ffn_dim;
        let tok_emb = add("embed.tokens".into(), vec![vocab_size, d]);
        let pos_emb = add("embed.positions".into(), vec![cfg.max_positions, d]);
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let mut p = |s: &str, shape: Vec<usize>| add(format!("layer.{l}.{s}"), shape);
                LayerLayout {
                    ln1_g: p("ln1.gain", vec![d]),
                    ln1_b: p("ln1.bias", vec![d]),
                    wq: p("attn.wq", vec![d, d]),
                    bq: p("attn.bq", vec![d]),
                    wk: p("attn.wk", vec![d, d]),
                    bk: p("attn.bk", vec![d]),
                    wv: p("attn.wv", vec![d, d]),
                    bv: p("attn.bv", vec![d]),
                    wo: p("attn.wo", vec![d, d]),
                    bo: p("attn.bo", vec![d]),
                    ln2_g: p("ln2.gain", vec![d]),
                    ln2_b: p("ln2.bias", vec![d]),
                    w1: p("ffn.w1", vec![d, f]),
                    b1: p("ffn.b1", vec![f]),
                    w2: p("ffn.w2", vec![f, d]),
                    b2: p("ffn.b2", vec![d]),
                }
            })
            .collect();
        let lnf_g = add("final_ln.gain".into(), vec![d]);
        let lnf_b = add("final_ln.bias".into(), vec![d]);
        let head_w1 = add("head.w1".into(), vec![2 * d, d]);
        let head_b1 = add("head.b1".into(), vec![d]);
        let head_w2 = add("head.w2".into(), vec![d, 1]);
        let head_b2 = add("head.b2".into(), vec![1]);
        Layout {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            head_w1,
            head_b1,
            head_w2,
            head_b2,
            tensors,
        }
    }

    pub fn total(&self) -> usize {
        self.tensors.last().map_or(0, |t| t.range.end)
    }
}

fn normal(rng: &mut Rng) -> f32 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

pub(crate) fn init_params(layout: &Layout, cfg: &EncoderConfig, rng: &mut Rng) -> Vec<f32> {
    let mut data = vec![0.0f32; layout.total()];
    let mut fill = |r: &Range<usize>, std: f32, rng: &mut Rng| {
        for v in &mut data[r.clone()] {
            *v = std * normal(rng);
        }
    };
    let d = cfg.d_model as f32;
    fill(&layout.tok_emb, 1.0, rng);
    fill(&layout.pos_emb, 0.1, rng);
    for l in &layout.layers {
        fill(&l.wq, d.powf(-0.5), rng);
        fill(&l.wk, d.powf(-0.5), rng);
        fill(&l.wv, d.powf(-0.5), rng);
        fill(&l.wo, 0.5 * d.powf(-0.5), rng);
        fill(&l.w1, d.powf(-0.5), rng);
        fill(&l.w2, 0.5 * (cfg.ffn_dim as f32).powf(-0.5), rng);
    }
    fill(&layout.head_w1, (2.0 * d).powf(-0.5), rng);
    fill(&layout.head_w2, d.powf(-0.5), rng);
    for l in &layout.layers {
        data[l.ln1_g.clone()].fill(1.0);
        data[l.ln2_g.clone()].fill(1.0);
    }
    data[layout.lnf_g.clone()].fill(1.0);
    data
}
