//! The `.llmc` container.
//!
//! ```text
//! "LLMCKPT1"             8 bytes
//! version                u32 LE
//! metadata length        u32 LE
//! metadata               UTF-8 JSON, keys sorted
//! payload                f32 LE, tensors back to back in manifest order
//! ```

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{manifest, ModelConfig, ModelWeights};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LLMCKPT1";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "llmc";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub weights: ModelWeights,
    pub step: u64,
    pub tokens_seen: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    offset: usize,
    bytes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    config: ModelConfig,
    vocabulary: Vocabulary,
    step: u64,
    tokens_seen: u64,
    tensors: Vec<TensorEntry>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Serializes to the canonical document: serde_json's `Value` keeps object
/// keys in a sorted map, so identical states give identical bytes.
fn canonical_json<T: Serialize>(value: &T) -> Vec<u8> {
    let value = serde_json::to_value(value).expect("metadata is always representable");
    serde_json::to_vec(&value).expect("value serializes")
}

pub fn export(ckpt: &Checkpoint) -> Vec<u8> {
    let mut offset = 0;
    let tensors: Vec<TensorEntry> = manifest(&ckpt.config)
        .into_iter()
        .zip(ckpt.weights.tensors())
        .map(|((name, shape, _), t)| {
            let bytes = t.len() * 4;
            let entry = TensorEntry {
                name,
                shape,
                offset,
                bytes,
            };
            offset += bytes;
            entry
        })
        .collect();
    let meta = Metadata {
        config: ckpt.config,
        vocabulary: ckpt.vocab.clone(),
        step: ckpt.step,
        tokens_seen: ckpt.tokens_seen,
        tensors,
    };
    let doc = canonical_json(&meta);
    let mut out = Vec::with_capacity(16 + doc.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(doc.len() as u32).to_le_bytes());
    out.extend_from_slice(&doc);
    for t in ckpt.weights.tensors() {
        for v in t.values().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn read_u32(bytes: &[u8], at: usize, field: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| format_err(format!("{field}: file ends before this field")))
}

pub fn import(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(format_err("magic: not an LLMCKPT1 checkpoint"));
    }
    let version = read_u32(bytes, 8, "version")?;
    if version != VERSION {
        return Err(format_err(format!("version: unsupported version {version}, expected {VERSION}")));
    }
    let meta_len = read_u32(bytes, 12, "metadata length")? as usize;
    let meta_end = 16usize
        .checked_add(meta_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| format_err("metadata length: exceeds file size"))?;
    let meta: Metadata = serde_json::from_slice(&bytes[16..meta_end])
        .map_err(|e| format_err(format!("metadata: {e}")))?;

    meta.config
        .validate()
        .map_err(|e| format_err(format!("config: {e}")))?;
    if meta.vocabulary.size() != meta.config.vocab_size {
        return Err(format_err(format!(
            "vocabulary: {} symbols do not match config vocab_size {}",
            meta.vocabulary.size(),
            meta.config.vocab_size
        )));
    }
    let expected = manifest(&meta.config);
    if meta.tensors.len() != expected.len() {
        return Err(format_err(format!(
            "tensors: manifest lists {} tensors, config needs {}",
            meta.tensors.len(),
            expected.len()
        )));
    }
    let mut offset = 0;
    for (i, (entry, (name, shape, _))) in meta.tensors.iter().zip(&expected).enumerate() {
        if &entry.name != name {
            return Err(format_err(format!("tensors[{i}].name: expected {name}, got {}", entry.name)));
        }
        if &entry.shape != shape {
            return Err(format_err(format!(
                "tensors[{i}].shape: expected {shape:?}, got {:?}",
                entry.shape
            )));
        }
        if entry.offset != offset {
            return Err(format_err(format!(
                "tensors[{i}].offset: expected {offset}, got {}",
                entry.offset
            )));
        }
        let want = shape.iter().product::<usize>() * 4;
        if entry.bytes != want {
            return Err(format_err(format!("tensors[{i}].bytes: expected {want}, got {}", entry.bytes)));
        }
        offset += want;
    }

    let payload = &bytes[meta_end..];
    if payload.len() < offset {
        return Err(format_err("payload shorter than manifest"));
    }
    if payload.len() > offset {
        return Err(format_err("payload longer than manifest"));
    }
    let tensors = meta
        .tensors
        .iter()
        .map(|e| {
            let data = payload[e.offset..e.offset + e.bytes]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")))
                .collect();
            Tensor::new(&e.shape, data)
        })
        .collect::<Result<Vec<_>>>()?;
    let weights = ModelWeights::from_tensors(&meta.config, tensors).map_err(|e| format_err(format!("tensors: {e}")))?;
    if !weights.is_finite() {
        return Err(format_err("payload: non-finite weight"));
    }
    Ok(Checkpoint {
        config: meta.config,
        vocab: meta.vocabulary,
        weights,
        step: meta.step,
        tokens_seen: meta.tokens_seen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let vocab = Vocabulary::build("hello, world\n").unwrap();
        let config = ModelConfig::new(2, 2, 8, 6, vocab.size());
        Checkpoint {
            weights: ModelWeights::init(&config, 3).unwrap(),
            config,
            vocab,
            step: 42,
            tokens_seen: 42 * 6 * 4,
        }
    }

    #[test]
    fn roundtrip_is_exact_and_idempotent() {
        let c = sample();
        let bytes = export(&c);
        let back = import(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(export(&back), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = export(&sample());
        assert_eq!(&bytes[..8], b"LLMCKPT1");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let doc: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        let keys: Vec<&String> = doc.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["config", "step", "tensors", "tokens_seen", "vocabulary"]);
        assert_eq!(doc["tensors"][0]["name"], "token_embedding");
    }

    #[test]
    fn metadata_keys_are_sorted_at_every_level() {
        let bytes = export(&sample());
        let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[16..16 + len]).unwrap();
        let config_at = text.find("\"config\":{").unwrap();
        let inner = &text[config_at..];
        let keys = ["context_len", "d_model", "mlp_ratio", "n_heads", "n_layers", "rope_base", "vocab_size"];
        let positions: Vec<usize> = keys.iter().map(|k| inner.find(&format!("\"{k}\"")).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn truncation_and_corruption_name_the_field() {
        let bytes = export(&sample());
        let err = |b: &[u8]| match import(b) {
            Err(Error::Format(msg)) => msg,
            other => panic!("expected a format error, got {other:?}"),
        };
        assert_eq!(err(&bytes[..bytes.len() - 4]), "payload shorter than manifest");
        let mut longer = bytes.clone();
        longer.push(0);
        assert_eq!(err(&longer), "payload longer than manifest");

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(err(&bad_magic).starts_with("magic"));
        let mut bad_version = bytes.clone();
        bad_version[8] = 2;
        assert!(err(&bad_version).starts_with("version"));
        assert!(err(&bytes[..14]).starts_with("metadata length"));
        assert!(err(&bytes[..20]).starts_with("metadata length"));
    }

    #[test]
    fn inconsistent_manifest_is_rejected() {
        let c = sample();
        let bytes = export(&c);
        let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let mut doc: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        doc["tensors"][2]["shape"] = serde_json::json!([8, 9]);
        let new_doc = serde_json::to_vec(&doc).unwrap();
        let mut edited = bytes[..12].to_vec();
        edited.extend_from_slice(&(new_doc.len() as u32).to_le_bytes());
        edited.extend_from_slice(&new_doc);
        edited.extend_from_slice(&bytes[16 + len..]);
        match import(&edited) {
            Err(Error::Format(msg)) => assert!(msg.starts_with("tensors[2].shape"), "{msg}"),
            other => panic!("{other:?}"),
        }

        doc["tensors"][2]["shape"] = serde_json::json!([8, 8]);
        doc["config"]["vocab_size"] = serde_json::json!(99);
        let new_doc = serde_json::to_vec(&doc).unwrap();
        let mut edited = bytes[..12].to_vec();
        edited.extend_from_slice(&(new_doc.len() as u32).to_le_bytes());
        edited.extend_from_slice(&new_doc);
        edited.extend_from_slice(&bytes[16 + len..]);
        match import(&edited) {
            Err(Error::Format(msg)) => assert!(msg.starts_with("vocabulary"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }
}
