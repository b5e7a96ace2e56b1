use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::store::write_atomic;
use crate::surrogate::canonical_json;
use crate::{Error, Result};

/// Counters of one experiment. Counts only grow.
#[derive(Debug, Default)]
pub struct Counters {
    extractor_calls: AtomicU64,
    cache_hits: AtomicU64,
    oracle_calls: AtomicU64,
    grid_evaluations: AtomicU64,
    k_p: AtomicU64,
    k_d: AtomicU64,
}

impl Counters {
    pub fn add_extractor_call(&self) {
        self.extractor_calls.fetch_add(1, Ordering::SeqCst);
    }

    pub fn add_cache_hit(&self) {
        self.cache_hits.fetch_add(1, Ordering::SeqCst);
    }

    pub fn add_oracle_calls(&self, n: u64) {
        self.oracle_calls.fetch_add(n, Ordering::SeqCst);
    }

    pub fn add_grid_evaluations(&self, n: u64) {
        self.grid_evaluations.fetch_add(n, Ordering::SeqCst);
    }

    /// Records the number of candidates and targets.
    pub fn set_dims(&self, k_p: u64, k_d: u64) {
        self.k_p.store(k_p, Ordering::SeqCst);
        self.k_d.store(k_d, Ordering::SeqCst);
    }

    pub fn snapshot(&self) -> LedgerEntry {
        LedgerEntry {
            extractor_calls: self.extractor_calls.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
            oracle_calls: self.oracle_calls.load(Ordering::SeqCst),
            grid_evaluations: self.grid_evaluations.load(Ordering::SeqCst),
            k_p: self.k_p.load(Ordering::SeqCst),
            k_d: self.k_d.load(Ordering::SeqCst),
        }
    }

    fn restore(e: &LedgerEntry) -> Self {
        Self {
            extractor_calls: e.extractor_calls.into(),
            cache_hits: e.cache_hits.into(),
            oracle_calls: e.oracle_calls.into(),
            grid_evaluations: e.grid_evaluations.into(),
            k_p: e.k_p.into(),
            k_d: e.k_d.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerEntry {
    /// Extractor runs that were not served from the cache.
    pub extractor_calls: u64,
    pub cache_hits: u64,
    pub oracle_calls: u64,
    /// Cells of the exhaustive candidate × target grid that were evaluated.
    pub grid_evaluations: u64,
    pub k_p: u64,
    pub k_d: u64,
}

impl LedgerEntry {
    /// Extractor runs equal `k_p + k_d` and the grid holds `k_p · k_d` cells.
    pub fn complexity_holds(&self) -> bool {
        self.extractor_calls == self.k_p + self.k_d && self.grid_evaluations == self.k_p * self.k_d
    }
}

/// Per-experiment invocation counts, shared across jobs.
#[derive(Debug, Default)]
pub struct InvocationLedger {
    experiments: Mutex<BTreeMap<String, Arc<Counters>>>,
}

impl InvocationLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Counters for `experiment`, created on first use.
    pub fn experiment(&self, experiment: &str) -> Arc<Counters> {
        let mut map = self.experiments.lock().unwrap_or_else(|p| p.into_inner());
        map.entry(experiment.to_owned()).or_default().clone()
    }

    pub fn snapshot(&self) -> BTreeMap<String, LedgerEntry> {
        let map = self.experiments.lock().unwrap_or_else(|p| p.into_inner());
        map.iter().map(|(k, v)| (k.clone(), v.snapshot())).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = canonical_json(&self.snapshot())?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    /// Loads a saved ledger; a missing file gives an empty ledger.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Self::new()),
            Err(e) => return Err(e.into()),
        };
        let entries: BTreeMap<String, LedgerEntry> =
            serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let map = entries
            .iter()
            .map(|(k, e)| (k.clone(), Arc::new(Counters::restore(e))))
            .collect();
        Ok(Self {
            experiments: Mutex::new(map),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concurrent_increments() {
        let ledger = InvocationLedger::new();
        std::thread::scope(|s| {
            for _ in 0..4 {
                s.spawn(|| {
                    for _ in 0..250 {
                        ledger.experiment("x").add_extractor_call();
                    }
                });
            }
        });
        assert_eq!(ledger.experiment("x").snapshot().extractor_calls, 1000);
    }

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ledger = InvocationLedger::new();
        let c = ledger.experiment("bench");
        c.set_dims(3, 2);
        (0..5).for_each(|_| c.add_extractor_call());
        c.add_grid_evaluations(6);
        assert!(c.snapshot().complexity_holds());
        let path = dir.path().join("ledger.json");
        ledger.save(&path).unwrap();
        assert_eq!(InvocationLedger::load(&path).unwrap().snapshot(), ledger.snapshot());
        assert!(InvocationLedger::load(&dir.path().join("none.json")).unwrap().snapshot().is_empty());
    }
}
