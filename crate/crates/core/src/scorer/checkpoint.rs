//! Single-file checkpoint archive.
//!
//! ```text
//! dialeval-checkpoint\n
//! key=value manifest lines\n
//! \n
//! payload: vocabulary (UTF-8, one token per line), then every tensor as
//! little-endian f32 in manifest order
//! ```
//!
//! The manifest carries the payload length and SHA-256, so truncation and
//! corruption are detected on load.

use std::path::Path;

use super::params::EncoderConfig;
use super::{Scorer, Vocab};
use crate::kv::KvFile;
use crate::seed::sha256_hex;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "dialeval-checkpoint\n";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub scorer: Scorer,
    /// Training stage that produced the parameters (`init`, `coarse`, `fine`).
    pub stage: String,
    /// Stages this checkpoint descends from, oldest first, ending with `stage`.
    pub lineage: Vec<String>,
    pub seed: u64,
    /// Free-form provenance (`meta.*` keys in the manifest).
    pub meta: KvFile,
    /// Additional named tensors, such as optimizer moments.
    pub extra: Vec<(String, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new(scorer: Scorer, stage: &str, seed: u64) -> Self {
        Checkpoint {
            scorer,
            stage: stage.to_owned(),
            lineage: vec![stage.to_owned()],
            seed,
            meta: KvFile::new(),
            extra: Vec::new(),
        }
    }

    /// A child checkpoint for `stage`, keeping this one's lineage.
    pub fn descend(&self, scorer: Scorer, stage: &str) -> Self {
        let mut lineage = self.lineage.clone();
        lineage.push(stage.to_owned());
        Checkpoint {
            scorer,
            stage: stage.to_owned(),
            lineage,
            seed: self.seed,
            meta: self.meta.clone(),
            extra: Vec::new(),
        }
    }

    pub fn extra(&self, name: &str) -> Option<&[f32]> {
        self.extra
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let scorer = &self.scorer;
        let mut payload = scorer.vocab().tokens().join("\n").into_bytes();
        let vocab_bytes = payload.len();
        for v in scorer.params() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        for (_, data) in &self.extra {
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }

        let mut m = KvFile::new();
        m.set("format_version", CHECKPOINT_FORMAT_VERSION);
        m.set("stage", &self.stage);
        m.set("lineage", self.lineage.join(","));
        m.set("seed", self.seed);
        scorer.config().to_kv(&mut m);
        m.set("vocab_size", scorer.vocab().len());
        m.set("vocab_sha256", scorer.vocab().checksum());
        m.set("vocab_bytes", vocab_bytes);
        for t in scorer.tensors() {
            let shape: Vec<String> = t.shape.iter().map(|s| s.to_string()).collect();
            m.set(format!("tensor.{}", t.name), shape.join("x"));
        }
        for (name, data) in &self.extra {
            m.set(format!("extra.{name}"), data.len());
        }
        for (k, v) in self.meta.iter() {
            m.set(format!("meta.{k}"), v);
        }
        m.set("payload_bytes", payload.len());
        m.set("payload_sha256", sha256_hex(&payload));

        let mut out = MAGIC.as_bytes().to_vec();
        out.extend_from_slice(m.to_string().as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let rest = bytes
            .strip_prefix(MAGIC.as_bytes())
            .ok_or_else(|| bad("not a checkpoint file".into()))?;
        let split = rest
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| bad("truncated manifest".into()))?;
        let header = std::str::from_utf8(&rest[..split + 1]).map_err(|_| bad("manifest is not UTF-8".into()))?;
        let payload = &rest[split + 2..];
        let m = KvFile::parse(header)?;

        let version: u32 = m.parse_value("format_version")?.ok_or_else(|| bad("missing format_version".into()))?;
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(bad(format!(
                "format version {version} is not supported (expected {CHECKPOINT_FORMAT_VERSION})"
            )));
        }
        let expected_len: usize = m.parse_value("payload_bytes")?.ok_or_else(|| bad("missing payload_bytes".into()))?;
        if payload.len() != expected_len {
            return Err(bad(format!(
                "payload is {} bytes, manifest says {expected_len} (truncated or padded file)",
                payload.len()
            )));
        }
        if sha256_hex(payload) != m.require("payload_sha256")? {
            return Err(bad("payload checksum mismatch".into()));
        }

        let mut config = EncoderConfig::default();
        config.update_from_kv(&m)?;
        let vocab_bytes: usize = m.parse_value("vocab_bytes")?.ok_or_else(|| bad("missing vocab_bytes".into()))?;
        if vocab_bytes > payload.len() {
            return Err(bad("vocabulary section exceeds payload".into()));
        }
        let vocab_text =
            std::str::from_utf8(&payload[..vocab_bytes]).map_err(|_| bad("vocabulary is not UTF-8".into()))?;
        let vocab = Vocab::from_tokens(vocab_text.split('\n').map(str::to_owned).collect())?;
        if vocab.checksum() != m.require("vocab_sha256")? {
            return Err(bad("vocabulary checksum mismatch".into()));
        }

        let floats: Vec<f32> = payload[vocab_bytes..]
            .chunks(4)
            .map(|c| {
                c.try_into()
                    .map(f32::from_le_bytes)
                    .map_err(|_| bad("tensor section is not a whole number of f32".into()))
            })
            .collect::<Result<_>>()?;

        let probe = Scorer::new(config, vocab.clone(), 0)?;
        for t in probe.tensors() {
            let shape: Vec<String> = t.shape.iter().map(|s| s.to_string()).collect();
            let key = format!("tensor.{}", t.name);
            if m.get(&key) != Some(shape.join("x").as_str()) {
                return Err(bad(format!("tensor {} missing or has a different shape", t.name)));
            }
        }
        let n_params = probe.num_params();
        if floats.len() < n_params {
            return Err(bad("parameter section too short".into()));
        }
        let mut at = n_params;
        let mut extra = Vec::new();
        let mut meta = KvFile::new();
        for (k, v) in m.iter() {
            if let Some(name) = k.strip_prefix("extra.") {
                let len: usize = v.parse().map_err(|_| bad(format!("bad length for {k}")))?;
                let end = at + len;
                if end > floats.len() {
                    return Err(bad(format!("extra tensor {name} exceeds payload")));
                }
                extra.push((name.to_owned(), floats[at..end].to_vec()));
                at = end;
            } else if let Some(name) = k.strip_prefix("meta.") {
                meta.set(name, v);
            }
        }
        if at != floats.len() {
            return Err(bad("trailing data after tensors".into()));
        }
        let scorer = Scorer::from_parts(config, vocab, floats[..n_params].to_vec())?;
        Ok(Checkpoint {
            scorer,
            stage: m.require("stage")?.to_owned(),
            lineage: m.require("lineage")?.split(',').map(str::to_owned).collect(),
            seed: m.parse_value("seed")?.unwrap_or(0),
            meta,
            extra,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::super::{Mode, TurnPooling};
    use super::*;
    use crate::corpus::Dialogue;

    fn sample() -> (Checkpoint, Vec<Dialogue>) {
        let dialogues: Vec<Dialogue> = (0..10)
            .map(|i| Dialogue::from_texts(format!("d{i}"), &[format!("hi {i}"), format!("yo {}", i * 7)]).unwrap())
            .collect();
        let vocab = Vocab::from_dialogues(dialogues.iter(), 100);
        let cfg = EncoderConfig {
            d_model: 8,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 8,
            max_positions: 32,
            dropout: 0.1,
            turn_pooling: TurnPooling::Mean,
        };
        let mut ck = Checkpoint::new(Scorer::new(cfg, vocab, 1).unwrap(), "coarse", 1);
        ck.meta.set("note", "x");
        ck.extra.push(("adam.m".into(), vec![0.5, -1.0]));
        (ck, dialogues)
    }

    #[test]
    fn roundtrip_preserves_scores_and_manifest() {
        let (ck, dialogues) = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let max_delta = dialogues
            .iter()
            .map(|d| {
                let a = ck.scorer.score(d, Mode::Deterministic).unwrap().value();
                let b = back.scorer.score(d, Mode::Deterministic).unwrap().value();
                (a - b).abs()
            })
            .fold(0.0, f64::max);
        assert_eq!(max_delta, 0.0);
        assert_eq!(back.stage, "coarse");
        assert_eq!(back.extra("adam.m"), Some(&[0.5, -1.0][..]));
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let (ck, _) = sample();
        let bytes = ck.to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0xff;
        assert!(Checkpoint::from_bytes(&flipped).unwrap_err().to_string().contains("checksum"));
        assert!(Checkpoint::from_bytes(b"hello").is_err());
        let text = String::from_utf8_lossy(&bytes[..60]).replace("format_version=1", "format_version=9");
        let mut bumped = text.into_bytes();
        bumped.extend_from_slice(&bytes[60..]);
        assert!(Checkpoint::from_bytes(&bumped).unwrap_err().to_string().contains("version"));
    }
}
