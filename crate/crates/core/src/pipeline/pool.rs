use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use taskvec_autodiff::Rng;

use crate::label::PAD;
use crate::store::write_atomic;
use crate::{Error, Result};

/// Unlabeled texts used to probe oracles.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnsupervisedPool {
    pub id: String,
    pub texts: Vec<Vec<u32>>,
    /// Source name of each text.
    pub provenance: Vec<String>,
}

/// A named collection of candidate texts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolSource {
    pub name: String,
    pub texts: Vec<Vec<u32>>,
}

/// Strips leading and trailing padding and collapses inner pad runs to one.
pub fn normalize(tokens: &[u32]) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::with_capacity(tokens.len());
    for &t in tokens {
        if t == PAD && out.last().is_none_or(|&l| l == PAD) {
            continue;
        }
        out.push(t);
    }
    while out.last() == Some(&PAD) {
        out.pop();
    }
    out
}

fn pool_id(texts: &[Vec<u32>]) -> String {
    let mut h = Sha256::new();
    for t in texts {
        h.update((t.len() as u64).to_le_bytes());
        for tok in t {
            h.update(tok.to_le_bytes());
        }
    }
    format!("pool-{}", &hex::encode(h.finalize())[..16])
}

/// Samples up to `cap` texts per source (seeded, uniform without
/// replacement), drops normalized duplicates and anything matching
/// `dedup_against`. Texts that normalize to nothing are skipped.
pub fn build_pool(sources: &[PoolSource], cap: usize, dedup_against: &[Vec<u32>], seed: u64) -> Result<UnsupervisedPool> {
    if sources.is_empty() {
        return Err(Error::Argument("pool needs at least one source".into()));
    }
    let banned: HashSet<Vec<u32>> = dedup_against.iter().map(|t| normalize(t)).collect();
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    let mut texts = Vec::new();
    let mut provenance = Vec::new();
    for (s, source) in sources.iter().enumerate() {
        let mut order: Vec<usize> = (0..source.texts.len()).collect();
        Rng::derive(seed, s as u64).shuffle(&mut order);
        order.truncate(cap);
        order.sort_unstable();
        for i in order {
            let t = normalize(&source.texts[i]);
            if t.is_empty() || banned.contains(&t) || !seen.insert(t.clone()) {
                continue;
            }
            texts.push(t);
            provenance.push(source.name.clone());
        }
    }
    if texts.is_empty() {
        return Err(Error::DegeneratePool("no texts left after deduplication".into()));
    }
    Ok(UnsupervisedPool {
        id: pool_id(&texts),
        texts,
        provenance,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    tokens: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolMeta {
    id: String,
    size: usize,
    provenance: Vec<String>,
    per_source: BTreeMap<String, usize>,
}

impl UnsupervisedPool {
    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    /// Fails if any text equals (after normalization) an entry of `dedup`.
    pub fn check_hygiene(&self, dedup: &[Vec<u32>]) -> Result<()> {
        let banned: HashSet<Vec<u32>> = dedup.iter().map(|t| normalize(t)).collect();
        match self.texts.iter().position(|t| banned.contains(&normalize(t))) {
            Some(i) => Err(Error::DegeneratePool(format!("pool text {i} overlaps an evaluation dataset"))),
            None => Ok(()),
        }
    }

    /// Writes `<dir>/<id>.jsonl` (one `{"tokens":[…]}` per line) and
    /// `<dir>/<id>.meta.json` with per-text provenance.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut body = String::new();
        for t in &self.texts {
            body.push_str(&serde_json::to_string(&Line { tokens: t.clone() })?);
            body.push('\n');
        }
        let mut per_source = BTreeMap::new();
        for p in &self.provenance {
            *per_source.entry(p.clone()).or_insert(0) += 1;
        }
        let meta = PoolMeta {
            id: self.id.clone(),
            size: self.len(),
            provenance: self.provenance.clone(),
            per_source,
        };
        write_atomic(&dir.join(format!("{}.jsonl", self.id)), body.as_bytes())?;
        let mut text = crate::surrogate::canonical_json(&meta)?;
        text.push('\n');
        write_atomic(&dir.join(format!("{}.meta.json", self.id)), text.as_bytes())
    }

    /// Reads a pool file; provenance comes from the sidecar when present.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut texts = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
            texts.push(parsed.tokens);
        }
        if texts.is_empty() {
            return Err(Error::DegeneratePool(format!("{} holds no texts", path.display())));
        }
        let id = pool_id(&texts);
        let meta_path = path.with_file_name(format!("{id}.meta.json"));
        let provenance = match std::fs::read(&meta_path) {
            Ok(bytes) => {
                let meta: PoolMeta = serde_json::from_slice(&bytes)
                    .map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
                if meta.provenance.len() != texts.len() {
                    return Err(Error::Format(format!("{} does not match its pool", meta_path.display())));
                }
                meta.provenance
            }
            Err(_) => vec![String::from("file"); texts.len()],
        };
        Ok(Self { id, texts, provenance })
    }
}
