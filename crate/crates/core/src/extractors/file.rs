use std::path::{Path, PathBuf};

use super::{payload_hash, EmbeddingMeta, TaskEmbedding};
use crate::store::write_atomic;
use crate::surrogate::canonical_json;
use crate::{Error, Result};

/// Ids double as file stems.
pub fn validate_id(id: &str) -> Result<()> {
    let bad = id.is_empty()
        || id == "."
        || id == ".."
        || id.starts_with('.')
        || id.chars().any(|c| c == '/' || c == '\\' || c.is_control());
    if bad {
        Err(Error::Argument(format!("`{id}` is not a valid embedding id")))
    } else {
        Ok(())
    }
}

fn paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{id}.json")), dir.join(format!("{id}.f32")))
}

/// Writes `<id>.f32` then `<id>.json`; the metadata file marks completion.
pub fn write_embedding(dir: &Path, emb: &TaskEmbedding) -> Result<()> {
    validate_id(emb.id())?;
    if emb.meta.dim != emb.values.len() || emb.meta.payload_sha256 != payload_hash(&emb.values) {
        return Err(Error::Contract(format!("metadata of `{}` does not describe its payload", emb.id())));
    }
    let (json, payload) = paths(dir, emb.id());
    write_atomic(&payload, &emb.payload())?;
    let mut text = canonical_json(&emb.meta)?;
    text.push('\n');
    write_atomic(&json, text.as_bytes())
}

/// Reads and verifies an embedding pair.
pub fn read_embedding(dir: &Path, id: &str) -> Result<TaskEmbedding> {
    validate_id(id)?;
    let (json, payload) = paths(dir, id);
    let meta: EmbeddingMeta = serde_json::from_slice(&std::fs::read(&json)?)
        .map_err(|e| Error::Format(format!("{}: {e}", json.display())))?;
    let bytes = std::fs::read(&payload)?;
    if bytes.len() != meta.dim * 4 {
        return Err(Error::Format(format!(
            "{}: {} bytes for dimension {}",
            payload.display(),
            bytes.len(),
            meta.dim
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    if payload_hash(&values) != meta.payload_sha256 {
        return Err(Error::Format(format!("{}: payload hash mismatch", payload.display())));
    }
    if meta.id != id {
        return Err(Error::Format(format!("{}: records id `{}`", json.display(), meta.id)));
    }
    Ok(TaskEmbedding { meta, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractors::{ExtractorConfig, Origin};
    use crate::surrogate::{SurrogateCheckpoint, SurrogateConfig};

    fn sample(id: &str) -> TaskEmbedding {
        let ckpt = SurrogateCheckpoint::init(SurrogateConfig::default(), 0).unwrap();
        let mut origin = Origin::model("llm-a#p3", "pool1");
        origin.id = id.into();
        TaskEmbedding::assemble(vec![0.5, -1.25, 3.0e-7], &ckpt, &ExtractorConfig::default(), origin).unwrap()
    }

    #[test]
    fn roundtrip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let e = sample("m1");
        write_embedding(dir.path(), &e).unwrap();
        let raw = std::fs::read(dir.path().join("m1.f32")).unwrap();
        assert_eq!(raw.len(), 12);
        assert_eq!(&raw[..4], &0.5f32.to_le_bytes());
        let text = std::fs::read_to_string(dir.path().join("m1.json")).unwrap();
        assert!(text.starts_with(r#"{"dim":3,"epochs":3,"fingerprint":""#), "{text}");
        assert_eq!(read_embedding(dir.path(), "m1").unwrap(), e);
    }

    #[test]
    fn tampered_payload_detected() {
        let dir = tempfile::tempdir().unwrap();
        write_embedding(dir.path(), &sample("m2")).unwrap();
        let p = dir.path().join("m2.f32");
        let mut raw = std::fs::read(&p).unwrap();
        raw[0] ^= 1;
        std::fs::write(&p, raw).unwrap();
        assert!(matches!(read_embedding(dir.path(), "m2"), Err(Error::Format(_))));
    }

    #[test]
    fn path_like_ids_rejected() {
        for id in ["", "..", "a/b", ".hidden", "x\n"] {
            assert!(validate_id(id).is_err(), "{id:?}");
        }
        assert!(validate_id("llm-a#prompt-3").is_ok());
    }
}
