//! On-disk artifact helpers and the embedding store.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::extractors::{read_embedding, validate_id, write_embedding, TaskEmbedding};
use crate::pipeline::UnsupervisedPool;
use crate::surrogate::SurrogateCheckpoint;
use crate::{Error, Result};

/// Writes `bytes` to a temporary file beside `path`, then renames it over
/// `path`. Readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

const SURROGATE_FILE: &str = "surrogate.ckpt";

#[derive(Default)]
struct Index {
    surrogate: Option<String>,
    records: BTreeMap<String, TaskEmbedding>,
}

/// Embeddings keyed by id, optionally mirrored to a directory:
/// `surrogate.ckpt`, `pool/<id>.jsonl`, `emb/<id>.json` + `emb/<id>.f32`.
///
/// All writes go through one lock, so concurrent jobs never interleave a
/// record. The in-memory index always matches the files it has written.
pub struct EmbeddingStore {
    root: Option<PathBuf>,
    index: Mutex<Index>,
}

impl EmbeddingStore {
    /// A store without disk backing.
    pub fn in_memory() -> Self {
        Self {
            root: None,
            index: Mutex::new(Index::default()),
        }
    }

    /// Opens (creating if needed) a store directory and indexes every
    /// complete record under `emb/`. Corrupt records are a format error.
    pub fn open(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root.join("emb"))?;
        std::fs::create_dir_all(root.join("pool"))?;
        let mut index = Index::default();
        let surrogate = root.join(SURROGATE_FILE);
        if surrogate.exists() {
            index.surrogate = Some(SurrogateCheckpoint::load(&surrogate)?.fingerprint().to_owned());
        }
        let emb_dir = root.join("emb");
        let mut ids: Vec<String> = std::fs::read_dir(&emb_dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_suffix(".json").map(str::to_owned)
            })
            .collect();
        ids.sort();
        for id in ids {
            let emb = read_embedding(&emb_dir, &id)?;
            index.records.insert(id, emb);
        }
        Ok(Self {
            root: Some(root.to_owned()),
            index: Mutex::new(index),
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Index> {
        self.index.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Registers `ckpt` as the store's surrogate. A store already bound to a
    /// different surrogate refuses it.
    pub fn register_surrogate(&self, ckpt: &SurrogateCheckpoint) -> Result<()> {
        let mut index = self.lock();
        match &index.surrogate {
            Some(fp) if fp == ckpt.fingerprint() => Ok(()),
            Some(fp) => Err(Error::IncompatibleSpace(format!(
                "store is bound to surrogate {} but got {}",
                &fp[..12],
                &ckpt.fingerprint()[..12]
            ))),
            None => {
                if let Some(root) = &self.root {
                    ckpt.save(&root.join(SURROGATE_FILE))?;
                }
                index.surrogate = Some(ckpt.fingerprint().to_owned());
                Ok(())
            }
        }
    }

    pub fn surrogate_fingerprint(&self) -> Option<String> {
        self.lock().surrogate.clone()
    }

    /// Loads the registered surrogate checkpoint from disk.
    pub fn load_surrogate(&self) -> Result<SurrogateCheckpoint> {
        let root = self
            .root
            .as_ref()
            .ok_or_else(|| Error::Argument("in-memory store keeps no checkpoint file".into()))?;
        SurrogateCheckpoint::load(&root.join(SURROGATE_FILE))
    }

    /// Fails unless `ckpt` is the registered surrogate.
    pub fn check_surrogate(&self, ckpt: &SurrogateCheckpoint) -> Result<()> {
        match self.lock().surrogate.as_deref() {
            Some(fp) if fp == ckpt.fingerprint() => Ok(()),
            Some(_) => Err(Error::IncompatibleSpace(
                "checkpoint differs from the store's registered surrogate".into(),
            )),
            None => Err(Error::Argument("store has no registered surrogate".into())),
        }
    }

    pub fn get(&self, id: &str) -> Option<TaskEmbedding> {
        self.lock().records.get(id).cloned()
    }

    pub fn ids(&self) -> Vec<String> {
        self.lock().records.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.lock().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds a record. Re-adding an identical record is a no-op; a different
    /// payload under an existing id is a contract violation.
    pub fn put(&self, emb: &TaskEmbedding) -> Result<()> {
        validate_id(emb.id())?;
        let mut index = self.lock();
        if let Some(old) = index.records.get(emb.id()) {
            if old.meta == emb.meta {
                return Ok(());
            }
            return Err(Error::Contract(format!("store already holds a different `{}`", emb.id())));
        }
        if let Some(root) = &self.root {
            write_embedding(&root.join("emb"), emb)?;
        }
        index.records.insert(emb.id().to_owned(), emb.clone());
        Ok(())
    }

    /// Persists a pool under `pool/`; a no-op for in-memory stores.
    pub fn save_pool(&self, pool: &UnsupervisedPool) -> Result<()> {
        let _guard = self.lock();
        match &self.root {
            Some(root) => pool.save(&root.join("pool")),
            None => Ok(()),
        }
    }

    pub fn load_pool(&self, id: &str) -> Result<UnsupervisedPool> {
        validate_id(id)?;
        let root = self
            .root
            .as_ref()
            .ok_or_else(|| Error::Argument("in-memory store keeps no pools".into()))?;
        UnsupervisedPool::load(&root.join("pool").join(format!("{id}.jsonl")))
    }

    pub fn ledger_path(&self) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join("ledger.json"))
    }
}
