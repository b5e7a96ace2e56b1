//! Pool management, DTE/MTE computation with caching, ranking and the
//! invocation ledger.

mod ledger;
mod pool;

pub use ledger::{Counters, InvocationLedger, LedgerEntry};
pub use pool::{build_pool, normalize, PoolSource, UnsupervisedPool};

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::extractors::{extract, similarity, EmbeddingKind, ExtractorConfig, Method, Origin, Similarity, TaskEmbedding};
use crate::label::LabeledSet;
use crate::oracles::ModelOracle;
use crate::store::EmbeddingStore;
use crate::surrogate::{canonical_json, SurrogateCheckpoint};
use crate::{Error, Result};

#[derive(Serialize)]
struct CacheKey<'a> {
    kind: EmbeddingKind,
    method: Method,
    fingerprint: &'a str,
    source: &'a str,
    pool: Option<&'a str>,
    cfg: &'a ExtractorConfig,
}

/// Store id of an embedding: readable prefix plus a hash of everything that
/// determines its value. The seed enters through `cfg`.
pub fn embedding_id(kind: EmbeddingKind, fingerprint: &str, source: &str, pool: Option<&str>, cfg: &ExtractorConfig) -> Result<String> {
    let key = CacheKey {
        kind,
        method: cfg.method,
        fingerprint,
        source,
        pool,
        cfg,
    };
    let digest = hex::encode(Sha256::digest(canonical_json(&key)?.as_bytes()));
    let stem: String = source
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '#' | '+') { c } else { '_' })
        .take(48)
        .collect();
    let tag = match kind {
        EmbeddingKind::Dte => "dte",
        EmbeddingKind::Mte => "mte",
    };
    Ok(format!("{tag}-{}-{stem}-{}", cfg.method, &digest[..16]))
}

/// A surrogate bound to a store and a ledger.
pub struct Pipeline<'a> {
    pub ckpt: &'a SurrogateCheckpoint,
    pub store: &'a EmbeddingStore,
    pub ledger: &'a InvocationLedger,
}

impl<'a> Pipeline<'a> {
    /// Registers `ckpt` with the store, which must not be bound to another
    /// surrogate.
    pub fn new(ckpt: &'a SurrogateCheckpoint, store: &'a EmbeddingStore, ledger: &'a InvocationLedger) -> Result<Self> {
        store.register_surrogate(ckpt)?;
        Ok(Self { ckpt, store, ledger })
    }

    fn cached_or(&self, experiment: &str, id: String, origin: Origin, run: impl FnOnce(Origin) -> Result<TaskEmbedding>) -> Result<TaskEmbedding> {
        self.store.check_surrogate(self.ckpt)?;
        let counters = self.ledger.experiment(experiment);
        if let Some(hit) = self.store.get(&id) {
            counters.add_cache_hit();
            return Ok(hit);
        }
        let emb = run(Origin { id, ..origin })?;
        counters.add_extractor_call();
        self.store.put(&emb)?;
        Ok(emb)
    }

    /// Dataset embedding of `data`, served from the store when present.
    pub fn compute_dte(&self, experiment: &str, source: &str, data: &LabeledSet, cfg: &ExtractorConfig) -> Result<TaskEmbedding> {
        let id = embedding_id(EmbeddingKind::Dte, self.ckpt.fingerprint(), source, None, cfg)?;
        self.cached_or(experiment, id, Origin::dataset(source), |origin| extract(self.ckpt, data, cfg, origin))
    }

    /// Model embedding of `oracle`: labels every pool text, then extracts.
    /// A failed oracle call aborts before anything is stored.
    pub fn compute_mte(&self, experiment: &str, oracle: &ModelOracle, pool: &UnsupervisedPool, cfg: &ExtractorConfig) -> Result<TaskEmbedding> {
        if pool.is_empty() {
            return Err(Error::DegeneratePool(format!("pool `{}` is empty", pool.id)));
        }
        let id = embedding_id(EmbeddingKind::Mte, self.ckpt.fingerprint(), oracle.id(), Some(&pool.id), cfg)?;
        self.cached_or(experiment, id, Origin::model(oracle.id(), &pool.id), |origin| {
            let before = oracle.calls();
            let labeled = oracle.predict_pool(&pool.texts);
            self.ledger.experiment(experiment).add_oracle_calls(oracle.calls() - before);
            extract(self.ckpt, &labeled?, cfg, origin)
        })
    }
}

/// Candidates ordered by similarity to `target`, descending, ties by
/// ascending id. Every candidate must share the target's space.
pub fn rank_candidates(target: &TaskEmbedding, candidates: &[TaskEmbedding], measure: Similarity) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::with_capacity(candidates.len());
    for c in candidates {
        target.check_compatible(c).map_err(|e| match e {
            Error::IncompatibleSpace(m) => Error::IncompatibleSpace(format!("candidate `{}`: {m}", c.id())),
            other => other,
        })?;
        out.push((c.id().to_owned(), similarity(target, c, measure)?));
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}

/// Applies `f` to every item on up to `jobs` threads. Results keep input
/// order; the error of the lowest failing index wins.
pub fn parallel_map<T: Sync, R: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap_or_else(|p| p.into_inner()) = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap_or_else(|p| p.into_inner()).expect("every slot filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractors::{taskemb_extract, EmbeddingMeta, Layout};
    use crate::label::{Example, Label};
    use crate::oracles::ConstantModel;
    use crate::surrogate::{SurrogateConfig, TrainConfig};

    fn small() -> SurrogateConfig {
        SurrogateConfig {
            vocab: 16,
            width: 8,
            layers: 1,
            heads: 2,
            ff_width: 8,
            max_len: 8,
            classes: 2,
            seq_len: 4,
        }
    }

    fn hand(id: &str, v: &[f32]) -> TaskEmbedding {
        TaskEmbedding {
            meta: EmbeddingMeta {
                id: id.into(),
                kind: EmbeddingKind::Mte,
                method: Method::TaskEmb,
                layout: Layout::Full,
                source: id.into(),
                pool: None,
                fingerprint: "f".into(),
                dim: v.len(),
                seed: 0,
                epochs: 0,
                prefix_len: None,
                payload_sha256: String::new(),
            },
            values: v.to_vec(),
        }
    }

    fn four() -> LabeledSet {
        LabeledSet::new(
            (0..4)
                .map(|i| Example::new(vec![3 + i, 5, 4], Label::Class(i as usize % 2)))
                .collect(),
        )
    }

    fn cfg(method: Method) -> ExtractorConfig {
        ExtractorConfig::new(
            method,
            TrainConfig {
                epochs: 1,
                batch_size: 2,
                lr: 1e-2,
                seed: 3,
            },
        )
    }

    #[test]
    fn hand_ranking() {
        let t = hand("t", &[1.0, 0.0]);
        let c = [hand("c", &[0.0, 1.0]), hand("a", &[1.0, 0.0]), hand("b", &[0.9, 0.1])];
        let ids: Vec<_> = rank_candidates(&t, &c, Similarity::Cosine).unwrap().into_iter().map(|r| r.0).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn ties_by_id_and_self_first() {
        let t = hand("t", &[1.0, 1.0]);
        let c = [hand("z", &[1.0, 0.0]), hand("y", &[0.0, 1.0]), t.clone()];
        let r = rank_candidates(&t, &c, Similarity::Cosine).unwrap();
        assert_eq!(r[0], ("t".to_owned(), 1.0));
        assert_eq!((r[1].0.as_str(), r[2].0.as_str()), ("y", "z"));
    }

    #[test]
    fn incompatible_candidate_named() {
        let t = hand("t", &[1.0, 0.0]);
        let mut bad = hand("odd-one", &[1.0, 0.0]);
        bad.meta.fingerprint = "g".into();
        let err = rank_candidates(&t, &[hand("a", &[1.0, 0.0]), bad], Similarity::Cosine).unwrap_err();
        assert!(matches!(&err, Error::IncompatibleSpace(m) if m.contains("odd-one")), "{err}");
    }

    #[test]
    fn dte_cached_and_delegates() {
        let ckpt = SurrogateCheckpoint::init(small(), 1).unwrap();
        let store = EmbeddingStore::in_memory();
        let ledger = InvocationLedger::new();
        let p = Pipeline::new(&ckpt, &store, &ledger).unwrap();
        let c = cfg(Method::TaskEmb);
        let a = p.compute_dte("e", "ds", &four(), &c).unwrap();
        let b = p.compute_dte("e", "ds", &four(), &c).unwrap();
        assert_eq!(a, b);
        let snap = ledger.experiment("e").snapshot();
        assert_eq!((snap.extractor_calls, snap.cache_hits), (1, 1));
        let direct = taskemb_extract(&ckpt, &four(), &c, Origin::dataset("ds")).unwrap();
        assert_eq!(direct.values, a.values);
        let t = p.compute_dte("e", "ds", &four(), &cfg(Method::TuPaTE)).unwrap();
        assert_eq!(t.dim(), 2 * 4 * 8);
    }

    #[test]
    fn disk_store_roundtrip_and_binding() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = SurrogateCheckpoint::init(small(), 1).unwrap();
        let ledger = InvocationLedger::new();
        let id = {
            let store = EmbeddingStore::open(dir.path()).unwrap();
            let p = Pipeline::new(&ckpt, &store, &ledger).unwrap();
            p.compute_dte("e", "ds", &four(), &cfg(Method::TuPaTE)).unwrap().meta.id
        };
        let store = EmbeddingStore::open(dir.path()).unwrap();
        assert_eq!(store.ids(), vec![id.clone()]);
        assert_eq!(store.load_surrogate().unwrap(), ckpt);
        let other = SurrogateCheckpoint::init(small(), 2).unwrap();
        assert!(matches!(Pipeline::new(&other, &store, &ledger), Err(Error::IncompatibleSpace(_))));
        let p = Pipeline::new(&ckpt, &store, &ledger).unwrap();
        p.compute_dte("f", "ds", &four(), &cfg(Method::TuPaTE)).unwrap();
        assert_eq!(ledger.experiment("f").snapshot().extractor_calls, 0);
    }

    #[test]
    fn constant_oracle_mte_is_finite() {
        let ckpt = SurrogateCheckpoint::init(small(), 1).unwrap();
        let store = EmbeddingStore::in_memory();
        let ledger = InvocationLedger::new();
        let p = Pipeline::new(&ckpt, &store, &ledger).unwrap();
        let pool = build_pool(
            &[PoolSource {
                name: "s".into(),
                texts: (0..6).map(|i| vec![3 + i, 4]).collect(),
            }],
            10,
            &[],
            0,
        )
        .unwrap();
        let oracle = ModelOracle::from_backend("const", ConstantModel { output: Label::Class(1) });
        let mte = p.compute_mte("e", &oracle, &pool, &cfg(Method::TaskEmb)).unwrap();
        assert!(mte.values.iter().all(|v| v.is_finite()));
        assert_eq!(mte.meta.kind, EmbeddingKind::Mte);
        let data = LabeledSet::new(pool.texts.iter().map(|t| Example::new(t.clone(), Label::Class(1))).collect());
        let direct = taskemb_extract(&ckpt, &data, &cfg(Method::TaskEmb), Origin::model("const", &pool.id)).unwrap();
        assert_eq!(direct.values, mte.values);
        assert_eq!(ledger.experiment("e").snapshot().oracle_calls, 6);
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u64> = (0..20).collect();
        assert_eq!(parallel_map(3, &items, |&x| Ok(x * 2)).unwrap(), items.iter().map(|x| x * 2).collect::<Vec<_>>());
        let err = parallel_map(3, &items, |&x| if x % 7 == 6 { Err(Error::Numeric(x.to_string())) } else { Ok(x) }).unwrap_err();
        assert!(matches!(err, Error::Numeric(m) if m == "6"));
    }
}
